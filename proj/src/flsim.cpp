#include "flat/flsim.hpp"

#include "flat/metrics.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <mutex>
#include <thread>

namespace flat::flsim {

void FLConfig::validate() const {
  if (n_clients < 1) throw std::invalid_argument("fl.n_clients must be >= 1");
  if (clients_per_round < 1 || clients_per_round > n_clients)
    throw std::invalid_argument("fl.clients_per_round must lie in [1, fl.n_clients]");
  if (n_malicious < 0 || n_malicious > n_clients)
    throw std::invalid_argument("fl.n_malicious must lie in [0, fl.n_clients]");
  if (rounds < 0) throw std::invalid_argument("fl.rounds must be >= 0");
  if (local_epochs < 0) throw std::invalid_argument("fl.local_epochs must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("fl.batch_size must be >= 1");
  if (!(client_lr >= 0)) throw std::invalid_argument("fl.client_lr must be >= 0");
  if (!(alpha > 0)) throw std::invalid_argument("fl.alpha must be > 0");
  if (eval_every < 1) throw std::invalid_argument("fl.eval_every must be >= 1");
  if (eval_repeats < 1) throw std::invalid_argument("eval.repeats must be >= 1");
  if (workers < 1) throw std::invalid_argument("workers must be >= 1");
  if (diversity_samples < 2) throw std::invalid_argument("eval.diversity_samples must be >= 2");
  for (int h : hidden)
    if (h < 1) throw std::invalid_argument("model.hidden widths must be >= 1");
  attack.validate();
  defense.validate();
}

std::vector<int> sample_clients(std::uint64_t root_seed, int round, const FLConfig& cfg) {
  std::vector<int> ids(static_cast<std::size_t>(cfg.n_clients));
  std::iota(ids.begin(), ids.end(), 0);
  Rng rng = make_rng(root_seed, {stream::kSample, static_cast<std::uint64_t>(round)});
  const auto m = static_cast<std::size_t>(cfg.clients_per_round);
  for (std::size_t i = 0; i < m; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, ids.size() - 1);
    std::swap(ids[i], ids[pick(rng)]);
  }
  ids.resize(m);
  std::sort(ids.begin(), ids.end());
  return ids;
}

bool is_malicious(int client_id, const FLConfig& cfg) { return client_id < cfg.n_malicious; }

nn::Network make_classifier(const data::Dataset& ds, const std::vector<int>& hidden, Rng& rng) {
  std::vector<Eigen::Index> widths{ds.pixels()};
  std::vector<nn::Activation> acts;
  for (int h : hidden) {
    widths.push_back(h);
    acts.push_back(nn::Activation::relu);
  }
  widths.push_back(ds.classes);
  acts.push_back(nn::Activation::identity);
  return nn::Network::glorot(widths, acts, rng);
}

void sgd_epoch(nn::Network& model, const nn::Matrix& images, std::span<const int> labels,
               std::span<const std::size_t> order, int batch_size, double lr) {
  const auto bs = static_cast<std::size_t>(batch_size);
  for (std::size_t start = 0; start < order.size(); start += bs) {
    const std::size_t end = std::min(order.size(), start + bs);
    nn::Matrix x(static_cast<Eigen::Index>(end - start), images.cols());
    std::vector<int> y;
    for (std::size_t i = start; i < end; ++i) {
      x.row(static_cast<Eigen::Index>(i - start)) = images.row(static_cast<Eigen::Index>(order[i]));
      y.push_back(labels[order[i]]);
    }
    const auto tr = nn::forward_trace(model, x);
    const auto ce = nn::cross_entropy(tr.output, y);
    const auto bw = nn::backward(model, tr, ce.grad);
    if (!bw.grads.all_finite()) throw nn::NonFiniteGradient("local SGD produced a non-finite gradient");
    auto& layers = model.layers();
    for (std::size_t l = 0; l < layers.size(); ++l) {
      layers[l].weight -= lr * bw.grads.weight[l];
      layers[l].bias -= lr * bw.grads.bias[l];
    }
  }
}

namespace {

std::vector<std::size_t> shuffled(std::size_t n, Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

defenses::ClientUpdate make_update(const nn::Network& local, const nn::Network& theta, int client_id,
                                   const data::Dataset& client) {
  return {client_id, local.flatten() - theta.flatten(), static_cast<double>(client.size())};
}

double median(std::vector<double> v) {
  if (v.empty()) return 0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : (v[n / 2 - 1] + v[n / 2]) / 2;
}

}  // namespace

defenses::ClientUpdate local_train_benign(const nn::Network& theta, const data::Dataset& client,
                                          int client_id, const FLConfig& cfg, Rng& shuffle_rng) {
  if (client.size() == 0)
    throw std::invalid_argument("client " + std::to_string(client_id) + " owns no samples");
  nn::Network local = theta;
  for (int e = 0; e < cfg.local_epochs; ++e) {
    const auto order = shuffled(static_cast<std::size_t>(client.size()), shuffle_rng);
    sgd_epoch(local, client.images, client.labels, order, cfg.batch_size, cfg.client_lr);
  }
  return make_update(local, theta, client_id, client);
}

MaliciousResult local_train_malicious(const nn::Network& theta,
                                      const std::optional<GeneratorState>& generator,
                                      const attacks::Attack& attack, const data::Dataset& client,
                                      int client_id, const FLConfig& cfg, Rng& shuffle_rng,
                                      Rng& attack_rng) {
  if (client.size() == 0)
    throw std::invalid_argument("client " + std::to_string(client_id) + " owns no samples");
  const bool uses_generator = attack.kind() == attacks::AttackKind::flat;
  if (uses_generator && !generator)
    throw std::invalid_argument("local_train_malicious: generator attack without generator state");

  MaliciousResult out;
  if (uses_generator) out.generator = generator;
  attacks::Attack local_attack = attack;
  if (uses_generator) local_attack.generator = &out.generator->gen;

  nn::Network local = theta;
  attacks::EpochStats acc;
  int gen_epochs = 0;
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  for (int e = 0; e < cfg.local_epochs; ++e) {
    if (uses_generator) {
      const auto stats = attacks::flat_train_epoch(local, out.generator->gen, out.generator->optim,
                                                   client, attack.cfg, cfg.batch_size, attack_rng);
      acc.total += stats.total;
      acc.attack += stats.attack;
      acc.stealth += stats.stealth;
      acc.diversity += stats.diversity;
      acc.batches += stats.batches;
      acc.max_abs_delta = std::max(acc.max_abs_delta, stats.max_abs_delta);
      ++gen_epochs;
    }

    const auto order = shuffled(static_cast<std::size_t>(client.size()), shuffle_rng);
    // Poisoned rows replace the leading share of each batch.
    nn::Matrix images = client.images;
    std::vector<int> labels = client.labels;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::size_t end = std::min(order.size(), start + bs);
      const auto n_poison = static_cast<std::size_t>(
          std::lround(attack.cfg.poison_fraction * static_cast<double>(end - start)));
      if (n_poison == 0) continue;
      nn::Matrix x(static_cast<Eigen::Index>(n_poison), client.images.cols());
      std::vector<int> y;
      for (std::size_t i = 0; i < n_poison; ++i) {
        x.row(static_cast<Eigen::Index>(i)) = client.images.row(static_cast<Eigen::Index>(order[start + i]));
        y.push_back(client.labels[order[start + i]]);
      }
      const auto pb = attacks::poison_batch(local_attack, client, x, y, attack_rng);
      for (std::size_t i = 0; i < n_poison; ++i) {
        images.row(static_cast<Eigen::Index>(order[start + i])) = pb.inputs.row(static_cast<Eigen::Index>(i));
        labels[order[start + i]] = pb.targets[i];
      }
    }
    sgd_epoch(local, images, labels, order, cfg.batch_size, cfg.client_lr);
  }
  if (gen_epochs > 0) {
    acc.total /= gen_epochs;
    acc.attack /= gen_epochs;
    acc.stealth /= gen_epochs;
    acc.diversity /= gen_epochs;
  }
  out.stats = acc;
  out.update = make_update(local, theta, client_id, client);
  return out;
}

// ---- Simulation -------------------------------------------------------------

Simulation::Simulation(FLConfig cfg, data::Dataset train, data::Dataset test)
    : cfg_(std::move(cfg)), train_(std::move(train)), test_(std::move(test)) {
  cfg_.validate();
  train_.validate();
  test_.validate();
  if (cfg_.attack.kind != attacks::AttackKind::none && cfg_.attack.fixed_target >= train_.classes)
    throw std::invalid_argument("attack.fixed_target exceeds the class count");
  partition_ = data::dirichlet_partition(train_, cfg_.n_clients, cfg_.alpha, cfg_.seed);
  for (const auto& idx : partition_.assignment) clients_.push_back(train_.subset(idx));
  blend_pattern_ = attacks::blend_pattern(train_.pixels(), cfg_.seed);

  state_.root_seed = cfg_.seed;
  Rng init = make_rng(cfg_.seed, {stream::kInit});
  state_.theta = make_classifier(train_, cfg_.hidden, init);
  if (cfg_.attack.kind == attacks::AttackKind::flat) {
    if (cfg_.shared_generator) {
      state_.shared = fresh_generator();
    } else {
      for (int id = 0; id < cfg_.n_malicious; ++id) state_.per_client.emplace(id, fresh_generator());
    }
  }
}

GeneratorState Simulation::fresh_generator() const {
  Rng rng = make_rng(cfg_.seed, {stream::kInit, 1});
  return {attacks::FlatGenerator::random(attacks::GeneratorShape::from(train_, cfg_.attack), rng),
          nn::OptimState::adam(cfg_.attack.generator_lr)};
}

attacks::Attack Simulation::attack() const {
  attacks::Attack a;
  a.cfg = cfg_.attack;
  a.pattern = blend_pattern_;
  a.generator = eval_generator();
  return a;
}

const attacks::FlatGenerator* Simulation::eval_generator() const {
  if (state_.shared) return &state_.shared->gen;
  if (!state_.per_client.empty()) return &state_.per_client.begin()->second.gen;
  return nullptr;
}

namespace {

struct ClientResult {
  defenses::ClientUpdate update;
  std::optional<GeneratorState> generator;
  attacks::EpochStats stats;
  bool attacked = false;
};

// Averages generator replicas in client-id order.
GeneratorState merge_generators(const std::vector<const GeneratorState*>& reps) {
  GeneratorState out = *reps.front();
  if (reps.size() == 1) return out;
  nn::Vector params = nn::Vector::Zero(out.gen.param_count());
  nn::Vector m = nn::Vector::Zero(out.optim.m.size());
  nn::Vector v = nn::Vector::Zero(out.optim.v.size());
  for (const auto* r : reps) {
    params += r->gen.parameters();
    if (m.size() == r->optim.m.size()) m += r->optim.m;
    if (v.size() == r->optim.v.size()) v += r->optim.v;
    out.optim.step = std::max(out.optim.step, r->optim.step);
  }
  const double n = static_cast<double>(reps.size());
  out.gen.set_parameters(params / n);
  out.optim.m = m / n;
  out.optim.v = v / n;
  return out;
}

}  // namespace

std::optional<RoundReport> Simulation::run_round(bool force_eval) {
  const auto t0 = std::chrono::steady_clock::now();
  const int round = state_.round + 1;
  const auto ids = sample_clients(state_.root_seed, round, cfg_);
  const bool attacking = cfg_.attack.kind != attacks::AttackKind::none && round >= cfg_.attack_start_round;

  if (cfg_.reset_generator_each_round && cfg_.attack.kind == attacks::AttackKind::flat) {
    if (state_.shared) state_.shared = fresh_generator();
    for (auto& [id, g] : state_.per_client) g = fresh_generator();
  }

  const attacks::Attack attack_template = attack();
  std::vector<ClientResult> results(ids.size());
  auto work = [&](std::size_t slot) {
    const int id = ids[slot];
    const auto& data = clients_[static_cast<std::size_t>(id)];
    const auto r = static_cast<std::uint64_t>(round);
    const auto c = static_cast<std::uint64_t>(id);
    Rng shuffle_rng = make_rng(state_.root_seed, {stream::kShuffle, r, c});
    if (attacking && is_malicious(id, cfg_)) {
      Rng attack_rng = make_rng(state_.root_seed, {stream::kAttack, r, c});
      std::optional<GeneratorState> gen;
      if (state_.shared) gen = state_.shared;
      else if (auto it = state_.per_client.find(id); it != state_.per_client.end()) gen = it->second;
      auto res = local_train_malicious(state_.theta, gen, attack_template, data, id, cfg_, shuffle_rng,
                                       attack_rng);
      results[slot] = {std::move(res.update), std::move(res.generator), res.stats, true};
    } else {
      results[slot] = {local_train_benign(state_.theta, data, id, cfg_, shuffle_rng), std::nullopt, {}, false};
    }
  };

  const auto n_workers = std::min<std::size_t>(static_cast<std::size_t>(cfg_.workers), ids.size());
  if (n_workers <= 1) {
    for (std::size_t i = 0; i < ids.size(); ++i) work(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < n_workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < ids.size(); i = next++) {
          try {
            work(i);
          } catch (...) {
            std::lock_guard lock(failure_mutex);
            if (!failure) failure = std::current_exception();
          }
        }
      });
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
  }

  // ids are sorted, so results are already in client-id order.
  std::vector<defenses::ClientUpdate> updates;
  std::vector<double> benign_norms;
  double malicious_max = 0;
  int malicious_count = 0;
  std::vector<const GeneratorState*> replicas;
  attacks::EpochStats stats;
  int stat_count = 0;
  for (auto& r : results) {
    const double norm = r.update.delta.norm();
    if (r.attacked) {
      malicious_max = std::max(malicious_max, norm);
      ++malicious_count;
      if (r.generator) {
        replicas.push_back(&*r.generator);
        stats.attack += r.stats.attack;
        stats.stealth += r.stats.stealth;
        stats.diversity += r.stats.diversity;
        stats.total += r.stats.total;
        stats.max_abs_delta = std::max(stats.max_abs_delta, r.stats.max_abs_delta);
        ++stat_count;
      }
    } else {
      benign_norms.push_back(norm);
    }
    updates.push_back(r.update);
  }

  Rng defense_rng = make_rng(state_.root_seed, {stream::kDefense, static_cast<std::uint64_t>(round)});
  const nn::Vector agg = defenses::aggregate(cfg_.defense, updates, defense_rng);
  state_.theta.unflatten(state_.theta.flatten() + agg);

  if (!replicas.empty()) {
    if (state_.shared) {
      state_.shared = merge_generators(replicas);
    } else {
      for (auto& r : results)
        if (r.generator) state_.per_client[r.update.client_id] = std::move(*r.generator);
    }
    stats.attack /= stat_count;
    stats.stealth /= stat_count;
    stats.diversity /= stat_count;
    stats.total /= stat_count;
    state_.last_stats = stats;
    state_.max_abs_delta_seen = std::max(state_.max_abs_delta_seen, stats.max_abs_delta);
  }
  benign_norm_median_ = median(benign_norms);
  malicious_norm_max_ = malicious_max;
  malicious_sampled_ = malicious_count;
  state_.round = round;

  if (!force_eval && round % cfg_.eval_every != 0) return std::nullopt;
  RoundReport rep = evaluate();
  rep.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

RoundReport Simulation::evaluate() const {
  RoundReport rep;
  rep.round = state_.round;
  rep.acc = metrics::accuracy(state_.theta, test_);
  Rng eval_rng = make_rng(cfg_.eval_seed, {stream::kEval});
  const auto a = attack();
  const auto res = metrics::asr(state_.theta, a, test_, eval_rng, cfg_.eval_repeats);
  rep.asr = res.asr;
  rep.per_class_asr = res.per_class;
  rep.per_class_trials = res.per_class_trials;
  if (res.deltas.rows() > 0) {
    rep.stealth_l2 = metrics::stealth_metric(res.deltas);
    const Eigen::Index n = std::min<Eigen::Index>(res.deltas.rows(), cfg_.diversity_samples);
    if (n >= 2) rep.diversity = metrics::diversity_metric(res.deltas.topRows(n));
  }
  rep.l_atk = state_.last_stats.attack;
  rep.l_stealth = state_.last_stats.stealth;
  rep.l_div = state_.last_stats.diversity;
  rep.max_abs_delta = state_.max_abs_delta_seen;
  if (res.deltas.rows() > 0 && cfg_.attack.kind == attacks::AttackKind::flat)
    rep.max_abs_delta = std::max(rep.max_abs_delta, res.deltas.cwiseAbs().maxCoeff());
  rep.benign_norm_median = benign_norm_median_;
  rep.malicious_norm_max = malicious_norm_max_;
  rep.malicious_sampled = malicious_sampled_;
  return rep;
}

std::vector<RoundReport> Simulation::run() {
  std::vector<RoundReport> reports;
  for (int r = 0; r < cfg_.rounds; ++r) {
    const bool last = r + 1 == cfg_.rounds;
    if (auto rep = run_round(last)) reports.push_back(std::move(*rep));
  }
  return reports;
}

std::vector<RoundReport> run_experiment(const FLConfig& cfg, const data::Dataset& train,
                                        const data::Dataset& test) {
  if (cfg.rounds == 0) return {};
  Simulation sim(cfg, train, test);
  return sim.run();
}

nn::Network train_classifier(const data::Dataset& train, const std::vector<int>& hidden, int epochs,
                             double lr, int batch_size, std::uint64_t seed) {
  Rng init = make_rng(seed, {stream::kInit});
  nn::Network model = make_classifier(train, hidden, init);
  Rng shuffle = make_rng(seed, {stream::kShuffle});
  for (int e = 0; e < epochs; ++e) {
    const auto order = shuffled(static_cast<std::size_t>(train.size()), shuffle);
    sgd_epoch(model, train.images, train.labels, order, batch_size, lr);
  }
  return model;
}

StandaloneRun train_generator(const nn::Network& model, const data::Dataset& train,
                              const attacks::AttackConfig& cfg, int epochs, int batch_size,
                              std::uint64_t seed) {
  Rng init = make_rng(seed, {stream::kInit, 1});
  StandaloneRun run{{attacks::FlatGenerator::random(attacks::GeneratorShape::from(train, cfg), init),
                     nn::OptimState::adam(cfg.generator_lr)},
                    {},
                    0};
  Rng rng = make_rng(seed, {stream::kAttack});
  for (int e = 0; e < epochs; ++e) {
    run.final_stats = attacks::flat_train_epoch(model, run.generator.gen, run.generator.optim, train, cfg,
                                                batch_size, rng);
    run.max_abs_delta = std::max(run.max_abs_delta, run.final_stats.max_abs_delta);
  }
  return run;
}

}  // namespace flat::flsim
