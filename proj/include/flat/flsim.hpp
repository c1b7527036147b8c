#pragma once

// Round-based federated learning simulation with optional malicious clients.

#include "flat/attacks.hpp"
#include "flat/data.hpp"
#include "flat/defenses.hpp"
#include "flat/nn.hpp"
#include "flat/rng.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <vector>

namespace flat::flsim {

struct FLConfig {
  int n_clients = 100;
  int clients_per_round = 10;
  int n_malicious = 4;
  int rounds = 30;
  int local_epochs = 2;
  int batch_size = 32;
  double client_lr = 0.1;
  double alpha = 0.5;
  std::uint64_t seed = 1;
  int eval_every = 1;
  int eval_repeats = 1;
  std::uint64_t eval_seed = 12345;
  // Hidden widths of the classifier MLP (ReLU); the output layer is linear.
  std::vector<int> hidden{64};
  attacks::AttackConfig attack;
  defenses::AggregationRule defense;
  // Colluding attackers share one generator checkpoint; otherwise each owns one.
  bool shared_generator = true;
  bool reset_generator_each_round = false;
  // Malicious clients train honestly before this round (1-based).
  int attack_start_round = 1;
  int workers = 1;
  // Upper bound on triggers used for the diversity statistic of a report.
  int diversity_samples = 200;

  void validate() const;
};

struct RoundReport {
  int round = 0;
  double acc = 0;
  double asr = 0;
  std::vector<double> per_class_asr;
  std::vector<long> per_class_trials;
  double stealth_l2 = 0;
  double diversity = 0;
  double l_atk = 0;
  double l_stealth = 0;
  double l_div = 0;
  double wall_time = 0;
  // Diagnostics beyond the CSV contract.
  double max_abs_delta = 0;
  double benign_norm_median = 0;
  double malicious_norm_max = 0;
  int malicious_sampled = 0;
};

struct GeneratorState {
  attacks::FlatGenerator gen;
  nn::OptimState optim;
};

struct GlobalState {
  int round = 0;
  nn::Network theta;
  std::optional<GeneratorState> shared;
  std::map<int, GeneratorState> per_client;
  std::uint64_t root_seed = 0;
  // Latest generator epoch statistics averaged over the round's attackers.
  attacks::EpochStats last_stats;
  double max_abs_delta_seen = 0;
};

std::vector<int> sample_clients(std::uint64_t root_seed, int round, const FLConfig& cfg);

bool is_malicious(int client_id, const FLConfig& cfg);

nn::Network make_classifier(const data::Dataset& ds, const std::vector<int>& hidden, Rng& rng);

// One SGD pass of minibatch cross-entropy over (images, labels) in the given order.
void sgd_epoch(nn::Network& model, const nn::Matrix& images, std::span<const int> labels,
               std::span<const std::size_t> order, int batch_size, double lr);

defenses::ClientUpdate local_train_benign(const nn::Network& theta, const data::Dataset& client,
                                          int client_id, const FLConfig& cfg, Rng& shuffle_rng);

struct MaliciousResult {
  defenses::ClientUpdate update;
  std::optional<GeneratorState> generator;
  attacks::EpochStats stats;
};

// `generator` is required for the generator attack and ignored otherwise.
MaliciousResult local_train_malicious(const nn::Network& theta,
                                      const std::optional<GeneratorState>& generator,
                                      const attacks::Attack& attack, const data::Dataset& client,
                                      int client_id, const FLConfig& cfg, Rng& shuffle_rng,
                                      Rng& attack_rng);

class Simulation {
 public:
  Simulation(FLConfig cfg, data::Dataset train, data::Dataset test);

  const FLConfig& config() const { return cfg_; }
  const GlobalState& state() const { return state_; }
  const data::Partition& partition() const { return partition_; }
  const data::Dataset& test() const { return test_; }

  // Runs one round; returns a report on evaluation rounds (or when forced).
  std::optional<RoundReport> run_round(bool force_eval = false);
  std::vector<RoundReport> run();

  RoundReport evaluate() const;
  attacks::Attack attack() const;
  const attacks::FlatGenerator* eval_generator() const;

 private:
  GeneratorState fresh_generator() const;

  FLConfig cfg_;
  data::Dataset train_;
  data::Dataset test_;
  data::Partition partition_;
  std::vector<data::Dataset> clients_;
  nn::Vector blend_pattern_;
  GlobalState state_;
  // Round diagnostics carried into the next report.
  double benign_norm_median_ = 0;
  double malicious_norm_max_ = 0;
  int malicious_sampled_ = 0;
};

std::vector<RoundReport> run_experiment(const FLConfig& cfg, const data::Dataset& train,
                                        const data::Dataset& test);

// Centralised training helpers used by the theory checks and baselines.
nn::Network train_classifier(const data::Dataset& train, const std::vector<int>& hidden, int epochs,
                             double lr, int batch_size, std::uint64_t seed);

struct StandaloneRun {
  GeneratorState generator;
  attacks::EpochStats final_stats;
  double max_abs_delta = 0;
};

// Trains a fresh generator for `epochs` against a frozen classifier.
StandaloneRun train_generator(const nn::Network& model, const data::Dataset& train,
                              const attacks::AttackConfig& cfg, int epochs, int batch_size,
                              std::uint64_t seed);

}  // namespace flat::flsim
