#include "flat/cli.hpp"

#include "flat/attacks.hpp"
#include "flat/flsim.hpp"
#include "flat/metrics.hpp"
#include "flat/report.hpp"
#include "flat/rng.hpp"
#include "flat/serialize.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

namespace flat::cli {

namespace fs = std::filesystem;

// ---- gradient suite ---------------------------------------------------------

std::vector<GradCase> gradient_suite(std::uint64_t seed, double tolerance) {
  std::vector<GradCase> cases;
  Rng rng = make_rng(seed, {stream::kInit});
  std::normal_distribution<double> normal(0.0, 1.0);
  auto randn = [&](Eigen::Index r, Eigen::Index c) {
    nn::Matrix m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
    return m;
  };

  const std::vector<std::pair<nn::Activation, const char*>> acts{{nn::Activation::relu, "relu"},
                                                                 {nn::Activation::leaky_relu, "leaky_relu"},
                                                                 {nn::Activation::tanh, "tanh"},
                                                                 {nn::Activation::identity, "identity"}};
  const nn::Matrix x = randn(6, 5);
  const std::vector<int> y{0, 1, 2, 3, 0, 2};
  for (const auto& [act, name] : acts) {
    // Two hidden layers of the same activation feeding a linear head.
    auto net = nn::Network::glorot({5, 7, 6, 4}, {act, act, nn::Activation::identity}, rng);
    // Nonzero biases keep dead rows off the ReLU kink at the probe point.
    for (auto& layer : net.layers()) layer.bias = 0.5 * randn(layer.bias.size(), 1);
    std::function<std::pair<double, nn::Gradients>(const nn::Network&)> fn = [&](const nn::Network& n) {
      const auto tr = nn::forward_trace(n, x);
      const auto ce = nn::cross_entropy(tr.output, y);
      return std::pair<double, nn::Gradients>{ce.loss, nn::backward(n, tr, ce.grad).grads};
    };
    cases.push_back({std::string(name) + "+cross_entropy", nn::grad_check(net, fn, tolerance)});
  }

  // Generator objective on a 6x6 single-channel toy; pixels in [0.2, 0.8] and a
  // small budget keep the clamp inactive so the loss is smooth at the probe.
  data::Dataset toy;
  toy.classes = 3;
  toy.channels = 1;
  toy.height = toy.width = 6;
  toy.images = (randn(5, 36).array().tanh() * 0.3 + 0.5).matrix();
  toy.labels = {0, 1, 2, 0, 1};
  const auto model = nn::Network::glorot({36, 8, 3}, {nn::Activation::tanh, nn::Activation::identity}, rng);

  struct Variant {
    const char* name;
    bool use_skip;
    bool use_latent;
    bool per_class;
  };
  for (const auto& v : {Variant{"generator_total_loss", true, true, false},
                        Variant{"generator_total_loss_noskip", false, true, false},
                        Variant{"generator_total_loss_nolatent", true, false, false},
                        Variant{"generator_total_loss_perclass_div", true, true, true}}) {
    attacks::AttackConfig cfg;
    cfg.epsilon = 0.1;
    cfg.latent_dim = 3;
    cfg.label_embed_dim = 2;
    cfg.encoder_width = 6;
    cfg.bottleneck_width = 4;
    cfg.use_skip = v.use_skip;
    cfg.use_latent = v.use_latent;
    cfg.diversity_per_class = v.per_class;
    auto gen = attacks::FlatGenerator::random(attacks::GeneratorShape::from(toy, cfg), rng);
    const std::vector<int> targets{1, 2, 0, 2, 0};
    const nn::Matrix z = randn(5, cfg.latent_dim);
    nn::LossAndGrad<double> fn = [&](const nn::Vector& p) {
      gen.set_parameters(p);
      const auto tl = attacks::flat_total_loss(model, gen, toy.images, toy.labels, targets, z, cfg);
      return std::pair<double, nn::Vector>{tl.total, tl.grad};
    };
    cases.push_back({v.name, nn::grad_check<double>(gen.parameters(), fn, tolerance)});
  }
  return cases;
}

// ---- theory checks ----------------------------------------------------------

TheoryOutcome run_theory(const config::ExperimentConfig& cfg, std::uint64_t seed) {
  const auto [train, test] = config::load_datasets(cfg.dataset);
  const auto& th = cfg.theory;
  const auto model = flsim::train_classifier(train, cfg.fl.hidden, th.classifier_epochs, cfg.fl.client_lr,
                                             cfg.fl.batch_size, seed);
  TheoryOutcome out;
  attacks::AttackConfig acfg = cfg.fl.attack;
  acfg.kind = attacks::AttackKind::flat;

  Rng mc = make_rng(seed, {stream::kEval, 1});
  out.latent_gap_d1 = metrics::latent_gap_monte_carlo(1, th.n_mc, mc);
  out.latent_gap_d1_exact = metrics::latent_gap_exact(1);
  out.latent_gap_d1_variant = metrics::latent_gap_closed_form_variant(1);

  const auto run = flsim::train_generator(model, train, acfg, th.generator_epochs, cfg.fl.batch_size, seed);
  out.max_abs_delta = run.max_abs_delta;
  const int probes = std::min<int>(th.probes, static_cast<int>(test.size()));
  const nn::Matrix probe_images = test.images.topRows(probes);
  std::vector<int> probe_targets(static_cast<std::size_t>(probes));
  for (int i = 0; i < probes; ++i)
    probe_targets[static_cast<std::size_t>(i)] = (test.labels[static_cast<std::size_t>(i)] + 1) % test.classes;

  Rng prng = make_rng(seed, {stream::kEval, 2});
  const auto p1 = metrics::check_latent_collapse(run.generator.gen, acfg, probe_images, probe_targets, th.n_mc, prng);
  out.latent_gap = p1.latent_gap;
  out.latent_gap_exact = p1.latent_gap_exact;
  out.latent_gap_variant = p1.latent_gap_variant;
  out.lipschitz_estimate = p1.lipschitz_estimate;
  out.mean_trigger_distance = p1.mean_trigger_distance;
  out.reference_product = p1.reference_product;
  out.within_reference = p1.within_reference;

  attacks::AttackConfig collapsed = acfg;
  collapsed.use_latent = false;
  Rng crng = make_rng(seed, {stream::kEval, 3});
  out.collapsed_trigger_distance =
      metrics::check_latent_collapse(run.generator.gen, collapsed, probe_images, probe_targets, 1, crng).mean_trigger_distance;

  // Diversity of triggers over the test set, one (t, z) draw per sample.
  Rng drng = make_rng(seed, {stream::kEval, 4});
  const Eigen::Index n = std::min<Eigen::Index>(test.size(), cfg.fl.diversity_samples);
  const nn::Matrix imgs = test.images.topRows(n);
  const std::vector<int> labels(test.labels.begin(), test.labels.begin() + n);
  const auto targets = attacks::sample_targets(labels, test.classes, acfg, drng);
  const auto z = attacks::sample_latents(n, acfg.latent_dim, drng);
  const auto g = attacks::flat_generate(run.generator.gen, imgs, targets, z, acfg);
  out.trained_diversity = n >= 2 ? metrics::diversity_metric(g.deltas) : 0.0;
  out.diversity_threshold = 0.05 * acfg.epsilon * std::sqrt(static_cast<double>(train.pixels()));

  metrics::StealthHarness harness = [&](double lambda) {
    attacks::AttackConfig c = acfg;
    c.lambda_stealth = lambda;
    const auto r = flsim::train_generator(model, train, c, th.generator_epochs, cfg.fl.batch_size, seed);
    out.max_abs_delta = std::max(out.max_abs_delta, r.max_abs_delta);
    return metrics::StealthSweepPoint{lambda, r.final_stats.stealth, r.final_stats.attack, r.final_stats.diversity};
  };
  const auto p2 = metrics::check_stealth_sweep(harness, th.lambdas);
  for (const auto& p : p2.sweep) {
    out.lambdas.push_back(p.lambda);
    out.stealth.push_back(p.stealth);
  }
  out.c_estimates = p2.c_estimates;
  out.inversions = p2.inversions;
  out.zero_lambda_largest = p2.zero_lambda_largest;
  out.stealth_sweep_passed = p2.passed;
  return out;
}

namespace {

// ---- experiment plumbing ----------------------------------------------------

struct Overrides {
  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
};

config::ExperimentConfig resolve(const Overrides& o) {
  auto cfg = o.config_path.empty() ? config::ExperimentConfig{} : config::load_config(o.config_path);
  if (!o.out_dir.empty()) cfg.out_dir = o.out_dir;
  if (o.seed) cfg.seeds = {*o.seed};
  if (o.workers) {
    if (*o.workers < 1) throw config::ConfigError("fl.workers", 0, "--workers must be >= 1");
    cfg.fl.workers = *o.workers;
  }
  return cfg;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw std::runtime_error("cannot create directory '" + dir.string() + "'");
}

void write_checkpoint(const fs::path& dir, const flsim::Simulation& sim, int round) {
  char name[32];
  std::snprintf(name, sizeof name, "round_%04d", round);
  {
    std::ofstream os(dir / (std::string("theta_") + name + ".bin"), std::ios::binary);
    io::write_network(os, sim.state().theta);
    if (!os) throw std::runtime_error("cannot write checkpoint in '" + dir.string() + "'");
  }
  if (const auto* gen = sim.eval_generator()) {
    std::ofstream os(dir / (std::string("generator_") + name + ".bin"), std::ios::binary);
    gen->write(os, sim.config().attack.epsilon);
    if (!os) throw std::runtime_error("cannot write checkpoint in '" + dir.string() + "'");
  }
}

// Runs one configured experiment, optionally checkpointing at every evaluation.
std::vector<flsim::RoundReport> execute(const config::ExperimentConfig& cfg, const data::Dataset& train,
                                        const data::Dataset& test, const std::optional<fs::path>& ckpt_dir) {
  if (cfg.fl.rounds == 0) return {};
  flsim::Simulation sim(cfg.fl, train, test);
  if (ckpt_dir) ensure_dir(*ckpt_dir);
  std::vector<flsim::RoundReport> reports;
  for (int r = 0; r < cfg.fl.rounds; ++r) {
    auto rep = sim.run_round(r + 1 == cfg.fl.rounds);
    if (!rep) continue;
    if (ckpt_dir) write_checkpoint(*ckpt_dir, sim, rep->round);
    reports.push_back(std::move(*rep));
  }
  return reports;
}

std::string run_label(const config::ExperimentConfig& cfg) {
  const auto& a = cfg.fl.attack;
  if (a.kind != attacks::AttackKind::flat) return attacks::to_string(a.kind);
  std::string s = "flat";
  if (!a.multi_target) s += "-single";
  if (!a.use_latent) s += "-noz";
  if (a.lambda_div == 0) s += "-nodiv";
  if (a.lambda_stealth == 0) s += "-nostealth";
  return s;
}

int cmd_run(const Overrides& o) {
  auto cfg = resolve(o);
  const auto [train, test] = config::load_datasets(cfg.dataset);
  const fs::path out = cfg.out_dir;
  ensure_dir(out);
  {
    std::ofstream echo(out / "config.txt");
    echo << config::serialize_config(cfg);
    if (!echo) throw std::runtime_error("cannot write '" + (out / "config.txt").string() + "'");
  }
  report::CsvAppender summary((out / "summary.csv").string(), report::summary_header(cfg));
  report::CsvAppender per_class((out / "per_class_asr.csv").string(), report::kPerClassHeader);
  for (const auto seed : cfg.seeds) {
    auto c = cfg;
    c.fl.seed = seed;
    std::optional<fs::path> ckpt;
    if (c.checkpoints) ckpt = out / "checkpoints" / ("seed_" + std::to_string(seed));
    const auto reports = execute(c, train, test, ckpt);
    const std::string rounds_name = cfg.seeds.size() == 1 ? "rounds.csv" : "rounds_seed_" + std::to_string(seed) + ".csv";
    report::write_rounds_csv((out / rounds_name).string(), reports);
    if (reports.empty()) continue;
    const report::RunKey key{run_label(c), defenses::to_string(c.fl.defense.kind), seed};
    summary.row(report::summary_row(key, reports.back(), c));
    for (const auto& row : report::per_class_rows(key, reports.back())) per_class.row(row);
    const auto& last = reports.back();
    std::cout << key.attack << "/" << key.defense << " seed " << seed << ": round " << last.round
              << " acc " << report::fmt(last.acc) << " asr " << report::fmt(last.asr) << "\n";
  }
  return kOk;
}

int cmd_sweep(const Overrides& o) {
  auto cfg = resolve(o);
  const auto [train, test] = config::load_datasets(cfg.dataset);
  const fs::path out = cfg.out_dir;
  ensure_dir(out / "rounds");
  report::CsvAppender summary((out / "summary.csv").string(), report::summary_header(cfg));
  report::CsvAppender per_class((out / "per_class_asr.csv").string(), report::kPerClassHeader);
  for (const auto& atk : cfg.sweep_attacks) {
    for (const auto& def : cfg.sweep_defenses) {
      for (const auto seed : cfg.seeds) {
        auto c = cfg;
        config::apply_attack_preset(c, atk);
        config::apply_defense(c, def);
        c.fl.seed = seed;
        const std::string tag = atk + "_" + def + "_seed_" + std::to_string(seed);
        std::optional<fs::path> ckpt;
        if (c.checkpoints) ckpt = out / "checkpoints" / tag;
        const auto reports = execute(c, train, test, ckpt);
        report::write_rounds_csv((out / "rounds" / (tag + ".csv")).string(), reports);
        if (reports.empty()) continue;
        const report::RunKey key{atk, def, seed};
        summary.row(report::summary_row(key, reports.back(), c));
        for (const auto& row : report::per_class_rows(key, reports.back())) per_class.row(row);
        std::cout << atk << "/" << def << " seed " << seed << ": acc " << report::fmt(reports.back().acc)
                  << " asr " << report::fmt(reports.back().asr) << std::endl;
      }
    }
  }
  return kOk;
}

int cmd_theory(const Overrides& o) {
  const auto cfg = resolve(o);
  const fs::path out = cfg.out_dir;
  ensure_dir(out);
  const auto t = run_theory(cfg, cfg.seeds.front());
  nlohmann::ordered_json j;
  j["latent_gap_d1"] = t.latent_gap_d1;
  j["latent_gap_d1_exact"] = t.latent_gap_d1_exact;
  j["latent_gap_d1_closed_form_variant"] = t.latent_gap_d1_variant;
  j["latent_dim"] = cfg.fl.attack.latent_dim;
  j["latent_gap"] = t.latent_gap;
  j["latent_gap_exact"] = t.latent_gap_exact;
  j["latent_gap_closed_form_variant"] = t.latent_gap_variant;
  j["lipschitz_estimate"] = t.lipschitz_estimate;
  j["mean_trigger_distance"] = t.mean_trigger_distance;
  j["diversity_bound"] = {{"reference_product", t.reference_product}, {"within_reference", t.within_reference}};
  j["collapsed_trigger_distance"] = t.collapsed_trigger_distance;
  j["trained_diversity"] = t.trained_diversity;
  j["diversity_threshold"] = t.diversity_threshold;
  j["max_abs_delta"] = t.max_abs_delta;
  auto sweep = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < t.lambdas.size(); ++i)
    sweep.push_back({{"lambda_stealth", t.lambdas[i]}, {"stealth_loss", t.stealth[i]}});
  j["stealth_sweep"] = sweep;
  j["c_estimates"] = t.c_estimates;
  j["inversions"] = t.inversions;
  j["zero_lambda_largest"] = t.zero_lambda_largest;
  j["stealth_sweep_passed"] = t.stealth_sweep_passed;
  const auto path = out / "theory.json";
  std::ofstream os(path);
  os << j.dump(2) << "\n";
  if (!os) throw std::runtime_error("cannot write '" + path.string() + "'");
  std::cout << j.dump(2) << "\n";
  return kOk;
}

int cmd_grad_check(std::uint64_t seed) {
  bool ok = true;
  for (const auto& c : gradient_suite(seed)) {
    std::printf("%-36s %s max_rel_error=%.3e checked=%ld\n", c.name.c_str(), c.report.passed ? "PASS" : "FAIL",
                c.report.max_rel_error, static_cast<long>(c.report.checked));
    ok = ok && c.report.passed;
  }
  return ok ? kOk : kRuntimeError;
}

int cmd_export_features(const Overrides& o, int samples) {
  auto cfg = resolve(o);
  cfg.fl.seed = cfg.seeds.front();
  const auto [train, test] = config::load_datasets(cfg.dataset);
  if (cfg.fl.rounds == 0) throw std::runtime_error("export-features needs fl.rounds >= 1");
  flsim::Simulation sim(cfg.fl, train, test);
  sim.run();
  const Eigen::Index n = std::min<Eigen::Index>(samples, test.size());
  std::vector<std::size_t> idx(static_cast<std::size_t>(n));
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  const auto clean = test.subset(idx);
  Rng rng = make_rng(cfg.fl.eval_seed, {stream::kEval, 5});
  const auto batch = attacks::poison_batch(sim.attack(), clean, clean.images, clean.labels, rng);
  const auto fx = metrics::export_features(sim.state().theta, clean, batch.inputs, batch.targets);
  const fs::path out = cfg.out_dir;
  ensure_dir(out);
  const auto path = out / "features.csv";
  std::ofstream os(path);
  metrics::write_features_csv(os, fx);
  if (!os) throw std::runtime_error("cannot write '" + path.string() + "'");
  std::cout << "wrote " << fx.features.rows() << " rows to " << path.string() << "\n";
  return kOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"Federated backdoor attack and defense lab", "flatlab"};
  app.require_subcommand(1);
  Overrides o;
  std::uint64_t seed_value = 0;
  int workers_value = 1;
  int samples = 200;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config_path, "Experiment config file");
    sub->add_option("--out", o.out_dir, "Output directory");
    sub->add_option("--seed", seed_value, "Override the seed list with one seed");
    sub->add_option("--workers", workers_value, "Concurrent client trainers per round");
  };
  auto* run = app.add_subcommand("run", "Run one experiment per configured seed");
  auto* sweep = app.add_subcommand("sweep", "Run attacks x defenses x seeds");
  auto* theory = app.add_subcommand("theory-check", "Latent-gap and stealth-sweep checks");
  auto* grad = app.add_subcommand("grad-check", "Finite-difference gradient checks");
  auto* exportf = app.add_subcommand("export-features", "Penultimate-layer features of clean and triggered samples");
  auto* version = app.add_subcommand("version", "Print the version");
  for (auto* s : {run, sweep, theory, exportf}) add_common(s);
  grad->add_option("--seed", seed_value, "Seed for the random probes");
  exportf->add_option("--samples", samples, "Clean test samples to export")->check(CLI::PositiveNumber);

  std::vector<std::string> rev(args.rbegin(), args.rend() - (args.empty() ? 0 : 1));
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfigError;
  }

  try {
    auto* active = app.get_subcommands().front();
    auto given = [active](const char* name) {
      const auto* opt = active->get_option_no_throw(name);
      return opt != nullptr && opt->count() > 0;
    };
    if (given("--seed")) o.seed = seed_value;
    if (given("--workers")) o.workers = workers_value;
    if (version->parsed()) {
      std::cout << kVersion << "\n";
      return kOk;
    }
    if (grad->parsed()) return cmd_grad_check(o.seed.value_or(1));
    if (run->parsed()) return cmd_run(o);
    if (sweep->parsed()) return cmd_sweep(o);
    if (theory->parsed()) return cmd_theory(o);
    if (exportf->parsed()) return cmd_export_features(o, samples);
  } catch (const config::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntimeError;
  }
  return kConfigError;
}

}  // namespace flat::cli
