#pragma once

// Server-side aggregation rules. Every rule maps a set of client deltas to one
// aggregated delta; none of them mutate their inputs.

#include "flat/nn.hpp"
#include "flat/rng.hpp"

#include <span>
#include <string>
#include <vector>

namespace flat::defenses {

struct ClientUpdate {
  int client_id = 0;
  nn::Vector delta;
  double n_samples = 1;
};

enum class RuleKind { fedavg, krum, multi_krum, median, trimmed_mean, rfa, flame, rflbat };

const char* to_string(RuleKind kind);
RuleKind rule_kind_from_string(const std::string& name);

struct AggregationRule {
  RuleKind kind = RuleKind::fedavg;
  int f_bound = 2;
  int multi_m = 1;
  double beta = 0.1;
  int rfa_iters = 100;
  double rfa_smoothing = 1e-6;
  double rfa_tol = 1e-8;
  double flame_noise_factor = 0.001;
  int rflbat_components = 2;

  void validate() const;
};

nn::Vector fedavg(std::span<const ClientUpdate> updates);

nn::Vector krum(std::span<const ClientUpdate> updates, int f_bound, int multi_m = 1);
// Krum scores (sum of squared distances to the n - f - 2 nearest others).
std::vector<double> krum_scores(std::span<const ClientUpdate> updates, int f_bound);

nn::Vector coord_median(std::span<const ClientUpdate> updates);
nn::Vector trimmed_mean(std::span<const ClientUpdate> updates, double beta);

struct RfaTrace {
  nn::Vector median;
  std::vector<double> objective;  // smoothed objective after each iterate, starting point first
  int iterations = 0;
};

// Smoothed Weiszfeld iteration for the weighted geometric median.
RfaTrace geometric_median_rfa(std::span<const ClientUpdate> updates, int max_iters = 100,
                              double smoothing = 1e-6, double tol = 1e-8);
double rfa_objective(std::span<const ClientUpdate> updates, const nn::Vector& point, double smoothing);

struct FlameResult {
  nn::Vector aggregate;   // noised
  nn::Vector pre_noise;   // mean of clipped admitted updates
  std::vector<std::size_t> admitted;
  double clip_norm = 0;
};

FlameResult flame(std::span<const ClientUpdate> updates, double noise_factor, Rng& rng);

// Cluster labels from average-linkage clustering over a distance matrix, stopped
// at the first merge that produces a cluster with at least `majority` members.
std::vector<std::size_t> majority_cluster(const nn::Matrix& dist, std::size_t majority);

struct RflbatResult {
  nn::Vector aggregate;
  std::vector<std::size_t> kept;
  nn::Matrix components;  // dim x k principal directions
  nn::Matrix projected;   // n x k
};

RflbatResult rflbat(std::span<const ClientUpdate> updates, int components, Rng& rng);

// Top-k principal directions of the centred rows of `data` by power iteration
// with deflation.
nn::Matrix principal_components(const nn::Matrix& data, int k, int steps = 200, double tol = 1e-10);

// Dispatch on rule.kind; rng feeds FLAME noise and RFLBAT restarts.
nn::Vector aggregate(const AggregationRule& rule, std::span<const ClientUpdate> updates, Rng& rng);

}  // namespace flat::defenses
