// Acceptance suite: one PASS/FAIL line per criterion on the desk-scale toy task.
//
//   acceptance [--config toy.cfg] [--known-red 4,5]
//
// Criteria listed under --known-red still print FAIL but do not set the exit code.

#include "flat/attacks.hpp"
#include "flat/cli.hpp"
#include "flat/config.hpp"
#include "flat/data.hpp"
#include "flat/defenses.hpp"
#include "flat/flsim.hpp"
#include "flat/metrics.hpp"
#include "oracles.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <tuple>

using namespace flat;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

int failures = 0;
int tolerated = 0;
std::set<int> known_red;

void criterion(int id, const char* name, double budget_s, const std::function<Verdict()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Verdict v;
  try {
    v = body();
  } catch (const std::exception& e) {
    v = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (budget_s > 0 && secs >= budget_s) {
    v.pass = false;
    v.detail += " (over the " + std::to_string(static_cast<int>(budget_s)) + " s budget)";
  }
  if (!v.pass) (known_red.count(id) ? tolerated : failures) += 1;
  std::printf("C%-2d %-28s %s  %s  [%.1f s]\n", id, name, v.pass ? "PASS" : "FAIL", v.detail.c_str(), secs);
  std::fflush(stdout);
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// Final-round reports of toy runs, memoised across criteria.
class ToyRuns {
 public:
  explicit ToyRuns(config::ExperimentConfig base) : base_(std::move(base)) {
    std::tie(train_, test_) = config::load_datasets(base_.dataset);
  }

  const flsim::RoundReport& get(const std::string& preset, const std::string& rule, std::uint64_t seed) {
    const auto key = std::make_tuple(preset, rule, seed);
    if (auto it = cache_.find(key); it != cache_.end()) return it->second.report;
    auto cfg = base_;
    config::apply_attack_preset(cfg, preset);
    config::apply_defense(cfg, rule);
    cfg.fl.seed = seed;
    cfg.validate();
    flsim::Simulation sim(cfg.fl, train_, test_);
    const auto reports = sim.run();
    Entry e{reports.back(), sim.state().max_abs_delta_seen};
    return cache_.emplace(key, e).first->second.report;
  }

  double max_abs_delta(const std::string& preset, const std::string& rule, std::uint64_t seed) {
    get(preset, rule, seed);
    return cache_.at(std::make_tuple(preset, rule, seed)).max_abs_delta;
  }

  const config::ExperimentConfig& base() const { return base_; }
  const data::Dataset& train() const { return train_; }

 private:
  struct Entry {
    flsim::RoundReport report;
    double max_abs_delta = 0;
  };
  config::ExperimentConfig base_;
  data::Dataset train_, test_;
  std::map<std::tuple<std::string, std::string, std::uint64_t>, Entry> cache_;
};

Verdict gradients() {
  int cases = 0, bad = 0;
  double worst = 0;
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    for (const auto& c : cli::gradient_suite(seed, 1e-4)) {
      ++cases;
      bad += c.report.passed ? 0 : 1;
      worst = std::max(worst, c.report.max_rel_error);
    }
  }
  return {bad == 0, fmt("%d cases, %d over tolerance, worst rel error %.2e", cases, bad, worst)};
}

Verdict aggregation_oracles() {
  Rng rng(2718);
  std::uniform_int_distribution<int> nd(3, 10), dd(1, 8);
  int mismatches = 0;
  for (int trial = 0; trial < 500; ++trial) {
    const int n = nd(rng), dim = dd(rng);
    const auto u = oracle::random_updates(rng, n, dim, trial % 5 == 0);
    const auto med = defenses::coord_median(u);
    for (int c = 0; c < dim; ++c) mismatches += med[c] != oracle::median_coord(u, c);
    const int k = static_cast<int>(std::floor(0.2 * n));
    const auto tm = defenses::trimmed_mean(u, 0.2);
    for (int c = 0; c < dim; ++c) mismatches += tm[c] != oracle::trimmed_coord(u, c, k);
    for (int f = 0; 2 * f + 3 <= n; ++f)
      mismatches += defenses::krum(u, f) != u[oracle::krum_oracle(u, f).first].delta;
  }
  int rfa_far = 0, non_monotone = 0;
  double rfa_worst = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const auto u = oracle::random_updates(rng, 3 + trial % 4, 2);
    const auto tr = defenses::geometric_median_rfa(u, 1000, 1e-6, 1e-12);
    const auto [gx, gy] = oracle::grid_oracle(u);
    const double err = std::max(std::abs(tr.median[0] - gx), std::abs(tr.median[1] - gy));
    rfa_worst = std::max(rfa_worst, err);
    rfa_far += err > 1e-4;
    for (std::size_t i = 1; i < tr.objective.size(); ++i) non_monotone += tr.objective[i] > tr.objective[i - 1];
  }
  for (int trial = 0; trial < 200; ++trial) {
    const auto u = oracle::random_updates(rng, nd(rng), dd(rng));
    const auto tr = defenses::geometric_median_rfa(u);
    for (std::size_t i = 1; i < tr.objective.size(); ++i) non_monotone += tr.objective[i] > tr.objective[i - 1];
  }
  return {mismatches == 0 && rfa_far == 0 && non_monotone == 0,
          fmt("krum/median/trimmed mismatches %d; rfa worst grid gap %.1e (%d over 1e-4); objective increases %d",
              mismatches, rfa_worst, rfa_far, non_monotone)};
}

Verdict budget(ToyRuns& runs) {
  const auto& base = runs.base();
  const double eps = base.fl.attack.epsilon;
  double worst = 0;
  for (std::uint64_t seed : {1u, 2u, 3u}) worst = std::max(worst, runs.max_abs_delta("flat", "fedavg", seed));

  // Standalone 30-epoch generator run against a centrally trained classifier.
  const auto model = flsim::train_classifier(runs.train(), base.fl.hidden, 5, base.fl.client_lr, base.fl.batch_size, 1);
  auto acfg = base.fl.attack;
  acfg.kind = attacks::AttackKind::flat;
  Rng init = make_rng(1, {stream::kInit, 99});
  auto gen = attacks::FlatGenerator::random(attacks::GeneratorShape::from(runs.train(), acfg), init);
  auto optim = nn::OptimState::adam(acfg.generator_lr);
  Rng rng = make_rng(1, {stream::kAttack, 99});
  double first = 0, last = 0;
  int violations = 0;
  for (int epoch = 1; epoch <= 30; ++epoch) {
    const auto st = attacks::flat_train_epoch(model, gen, optim, runs.train(), acfg, base.fl.batch_size, rng);
    violations += st.max_abs_delta > eps;
    worst = std::max(worst, st.max_abs_delta);
    if (epoch == 1) first = st.attack;
    last = st.attack;
  }
  violations += worst > eps;
  return {violations == 0, fmt("max|delta| %.6f vs eps %.3f over FL and standalone runs; L_atk epoch 1 %.3f -> 30 %.3f (%.0f%% lower)",
                               worst, eps, first, last, 100 * (1 - last / first))};
}

Verdict fedavg_ordering(ToyRuns& runs) {
  int holds = 0;
  std::string d;
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto& none = runs.get("none", "fedavg", seed);
    const auto& multi = runs.get("flat", "fedavg", seed);
    const auto& single = runs.get("flat-single", "fedavg", seed);
    const auto& bad = runs.get("badnets", "fedavg", seed);
    const bool ok = multi.asr >= single.asr && single.asr >= bad.asr && multi.asr >= 0.60 &&
                    multi.acc >= none.acc - 0.05 && none.acc >= 0.85;
    holds += ok;
    d += fmt("s%llu multi %.2f single %.2f badnets %.2f acc %.2f/%.2f; ", static_cast<unsigned long long>(seed),
             multi.asr, single.asr, bad.asr, multi.acc, none.acc);
  }
  return {holds >= 2, fmt("ordering holds on %d/3: ", holds) + d};
}

Verdict ablations(ToyRuns& runs) {
  int stealth = 0, diversity = 0, latent = 0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto& full = runs.get("flat", "fedavg", seed);
    stealth += runs.get("flat-nostealth", "fedavg", seed).stealth_l2 > full.stealth_l2;
    diversity += full.diversity > runs.get("flat-nodiv", "fedavg", seed).diversity;
    latent += full.asr > runs.get("flat-noz", "fedavg", seed).asr;
  }
  return {stealth >= 4 && diversity >= 4 && latent >= 4,
          fmt("stealth w/o L_stealth larger %d/5; diversity with L_div larger %d/5; ASR with z larger %d/5", stealth,
              diversity, latent)};
}

Verdict robust_rules(ToyRuns& runs) {
  std::string d;
  bool pass = true;
  for (const char* rule : {"krum", "median"}) {
    int holds = 0;
    for (std::uint64_t seed : {1u, 2u, 3u}) {
      const double bad_avg = runs.get("badnets", "fedavg", seed).asr;
      const double flat_avg = runs.get("flat", "fedavg", seed).asr;
      const double bad_def = runs.get("badnets", rule, seed).asr;
      const double flat_def = runs.get("flat", rule, seed).asr;
      holds += bad_def <= 0.5 * bad_avg && flat_def >= 0.5 * flat_avg;
    }
    pass = pass && holds >= 2;
    d += fmt("%s %d/3; ", rule, holds);
  }
  return {pass, d};
}

Verdict stealth_sweep(const cli::TheoryOutcome& th) {
  std::string d = "stealth by lambda:";
  for (std::size_t i = 0; i < th.lambdas.size(); ++i) d += fmt(" %g->%.4f", th.lambdas[i], th.stealth[i]);
  d += fmt("; inversions %d", th.inversions);
  return {th.stealth_sweep_passed, d};
}

Verdict latent_collapse(const cli::TheoryOutcome& th) {
  const bool pass = th.collapsed_trigger_distance == 0.0 && th.trained_diversity > th.diversity_threshold &&
                    std::abs(th.latent_gap_d1 - 1.1284) <= 0.02;
  return {pass, fmt("collapsed distance %g; trained diversity %.4f vs threshold %.4f; latent gap d=1 %.4f (exact %.4f)",
                    th.collapsed_trigger_distance, th.trained_diversity, th.diversity_threshold, th.latent_gap_d1,
                    th.latent_gap_d1_exact)};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Verdict determinism(const std::string& toy_path) {
  const auto dir = fs::temp_directory_path() / "flatlab_acceptance_sweep";
  fs::remove_all(dir);
  fs::create_directories(dir);
  // Same toy settings, with the sweep matrix and seed list replaced.
  std::istringstream toy(slurp(toy_path));
  std::ofstream cfg(dir / "sweep.cfg");
  for (std::string line; std::getline(toy, line);)
    if (line.rfind("seeds", 0) != 0 && line.rfind("sweep.", 0) != 0) cfg << line << "\n";
  cfg << "seeds = 1, 2\nsweep.attacks = none, badnets, flat\nsweep.defenses = fedavg, krum, median\n";
  cfg.close();
  std::vector<std::string> files;
  std::ostringstream progress;
  auto* saved = std::cout.rdbuf(progress.rdbuf());
  struct Restore {
    std::streambuf* buf;
    ~Restore() { std::cout.rdbuf(buf); }
  } restore{saved};
  for (const char* workers : {"1", "3", "1"}) {
    const auto out = dir / ("w" + std::string(workers) + "_" + std::to_string(files.size()));
    const int rc = cli::run_cli({"flatlab", "sweep", "--config", (dir / "sweep.cfg").string(), "--out", out.string(),
                                 "--workers", workers});
    if (rc != 0) return {false, fmt("sweep exited with %d", rc)};
    files.push_back(slurp(out / "summary.csv") + slurp(out / "per_class_asr.csv"));
  }
  const bool same = files[0] == files[1] && files[1] == files[2];
  return {same, fmt("3 sweeps of 18 runs (workers 1, 3, 1): summaries %s, %zu bytes", same ? "identical" : "differ",
                    files[0].size())};
}

Verdict idx_parser() {
  Rng rng(31337);
  int mismatches = 0;
  for (int trial = 0; trial < 100; ++trial) {
    std::uniform_int_distribution<int> dim(1, 6), count(0, 9), classes(2, 12), byte(0, 255);
    data::Dataset ds;
    ds.height = dim(rng);
    ds.width = dim(rng);
    ds.classes = classes(rng);
    const int n = count(rng);
    ds.images.resize(n, ds.pixels());
    for (Eigen::Index i = 0; i < ds.images.size(); ++i) ds.images.data()[i] = byte(rng) / 255.0;
    std::uniform_int_distribution<int> label(0, ds.classes - 1);
    for (int i = 0; i < n; ++i) ds.labels.push_back(label(rng));
    const auto back = data::load_idx(data::encode_idx_images(ds), data::encode_idx_labels(ds), ds.classes);
    mismatches += !(back.images == ds.images && back.labels == ds.labels && back.height == ds.height &&
                    back.width == ds.width);
  }
  using Bytes = std::vector<std::uint8_t>;
  const Bytes img{0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2, 255, 0, 0, 255};
  const Bytes lab{0, 0, 8, 1, 0, 0, 0, 1, 7};
  std::vector<std::pair<Bytes, Bytes>> bad;
  auto m = img;
  m[3] = 2;
  bad.emplace_back(m, lab);
  m = lab;
  m[3] = 3;
  bad.emplace_back(img, m);
  bad.emplace_back(Bytes(img.begin(), img.end() - 1), lab);
  bad.emplace_back(Bytes(img.begin(), img.begin() + 8), lab);
  bad.emplace_back(img, Bytes(lab.begin(), lab.end() - 1));
  bad.emplace_back(Bytes{}, lab);
  m = img;
  m[7] = 2;
  bad.emplace_back(m, lab);
  int accepted = 0, silent = 0;
  for (const auto& [i, l] : bad) {
    try {
      data::load_idx(i, l);
      ++accepted;
    } catch (const data::IdxError& e) {
      silent += std::string(e.what()).find("offset") == std::string::npos;
    }
  }
  try {
    data::load_idx(img, lab, 5);
    ++accepted;
  } catch (const data::IdxError&) {
  }
  return {mismatches == 0 && accepted == 0 && silent == 0,
          fmt("round-trip mismatches %d/100; malformed accepted %d/%zu; rejections without offset %d", mismatches,
              accepted, bad.size() + 1, silent)};
}

// Largest malicious update norm over the median benign norm, final round.
std::string norm_ratios(ToyRuns& runs) {
  std::string out;
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto& r = runs.get("flat", "fedavg", seed);
    if (r.malicious_sampled == 0 || r.benign_norm_median <= 0) out += fmt("s%llu n/a ", static_cast<unsigned long long>(seed));
    else
      out += fmt("s%llu %.2f ", static_cast<unsigned long long>(seed), r.malicious_norm_max / r.benign_norm_median);
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria on the desk-scale toy task", "acceptance"};
  std::string toy_path = FLATLAB_TOY_CONFIG;
  std::vector<int> red;
  app.add_option("--config", toy_path, "Toy experiment config");
  app.add_option("--known-red", red, "Criteria expected to fail")->delimiter(',');
  CLI11_PARSE(app, argc, argv);
  known_red.insert(red.begin(), red.end());

  const auto toy = config::load_config(toy_path);
  ToyRuns runs(toy);
  std::printf("toy config: %s\n", toy_path.c_str());

  criterion(1, "gradient correctness", 30, gradients);
  criterion(2, "aggregation oracles", 60, aggregation_oracles);
  criterion(3, "perturbation budget", 0, [&] { return budget(runs); });
  const auto t0 = std::chrono::steady_clock::now();
  criterion(4, "FedAvg attack ordering", 600, [&] { return fedavg_ordering(runs); });
  criterion(5, "ablation directions", 0, [&] { return ablations(runs); });
  criterion(6, "robust-rule direction", 0, [&] { return robust_rules(runs); });
  const double matrix_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("    malicious update norm / median benign norm, flat under fedavg: %s\n", norm_ratios(runs).c_str());

  cli::TheoryOutcome th;
  std::string theory_error;
  const auto t1 = std::chrono::steady_clock::now();
  try {
    th = cli::run_theory(toy, toy.seeds.front());
  } catch (const std::exception& e) {
    theory_error = e.what();
  }
  const double theory_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t1).count();
  std::printf("    theory run (classifier, generator, lambda sweep) %.1f s\n", theory_s);
  criterion(7, "stealth lambda sweep", 0, [&] {
    return theory_error.empty() ? stealth_sweep(th) : Verdict{false, "theory run failed: " + theory_error};
  });
  criterion(8, "latent collapse and gap", 0, [&] {
    return theory_error.empty() ? latent_collapse(th) : Verdict{false, "theory run failed: " + theory_error};
  });
  criterion(9, "sweep determinism", 0, [&] { return determinism(toy_path); });
  criterion(10, "IDX parser", 0, idx_parser);

  std::printf("toy matrix wall time %.1f s (budget 900 s)\n", matrix_s);
  std::printf("%d of 10 criteria failed", failures + tolerated);
  if (tolerated > 0) std::printf(" (%d listed as known red)", tolerated);
  std::printf("\n");
  return failures == 0 ? 0 : 1;
}
