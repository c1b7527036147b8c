#include "flat/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

namespace flat::config {

ConfigError::ConfigError(const std::string& key, int line, const std::string& message)
    : std::runtime_error((line > 0 ? "line " + std::to_string(line) + ": " : std::string()) +
                         (key.empty() ? std::string() : key + ": ") + message),
      key_(key),
      line_(line) {}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  if (trim(s).empty()) return out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

// Value codecs. Each parse throws std::invalid_argument with a short reason.
template <typename T>
T parse_value(const std::string& s);

template <>
int parse_value<int>(const std::string& s) {
  int v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw std::invalid_argument("expected an integer, got '" + s + "'");
  return v;
}

template <>
std::uint64_t parse_value<std::uint64_t>(const std::string& s) {
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size())
    throw std::invalid_argument("expected a non-negative integer, got '" + s + "'");
  return v;
}

template <>
double parse_value<double>(const std::string& s) {
  double v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size() || !std::isfinite(v))
    throw std::invalid_argument("expected a finite number, got '" + s + "'");
  return v;
}

template <>
bool parse_value<bool>(const std::string& s) {
  if (s == "true") return true;
  if (s == "false") return false;
  throw std::invalid_argument("expected true or false, got '" + s + "'");
}

template <>
std::string parse_value<std::string>(const std::string& s) {
  return s;
}

std::string format_value(int v) { return std::to_string(v); }
std::string format_value(std::uint64_t v) { return std::to_string(v); }
std::string format_value(bool v) { return v ? "true" : "false"; }
std::string format_value(const std::string& v) { return v; }
std::string format_value(double v) {
  char buf[32];
  // Shortest representation that reads back to the same double.
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

template <typename T>
std::string format_list(const std::vector<T>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? ", " : "") + format_value(v[i]);
  return out;
}

struct Entry {
  std::string key;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

template <typename T, typename Access, typename Check>
Entry scalar(std::string key, Access access, Check check, std::string rule) {
  return {key, [access](const ExperimentConfig& c) { return format_value(access(const_cast<ExperimentConfig&>(c))); },
          [access, check, rule](ExperimentConfig& c, const std::string& s) {
            const T v = parse_value<T>(s);
            if (!check(v)) throw std::invalid_argument("value " + s + " out of range (" + rule + ")");
            access(c) = v;
          }};
}

template <typename T, typename Access, typename Check>
Entry list(std::string key, Access access, Check check, std::string rule) {
  return {key, [access](const ExperimentConfig& c) { return format_list(access(const_cast<ExperimentConfig&>(c))); },
          [access, check, rule](ExperimentConfig& c, const std::string& s) {
            std::vector<T> out;
            for (const auto& item : split_list(s)) {
              const T v = parse_value<T>(item);
              if (!check(v)) throw std::invalid_argument("element " + item + " out of range (" + rule + ")");
              out.push_back(v);
            }
            access(c) = std::move(out);
          }};
}

#define FIELD(expr) [](ExperimentConfig & c) -> auto& { return c.expr; }

auto any = [](const auto&) { return true; };
auto positive_i = [](int v) { return v >= 1; };
auto non_negative_i = [](int v) { return v >= 0; };
auto positive_d = [](double v) { return v > 0; };
auto non_negative_d = [](double v) { return v >= 0; };
auto unit_d = [](double v) { return v >= 0 && v <= 1; };

const std::vector<Entry>& registry() {
  static const std::vector<Entry> entries = {
      scalar<std::string>("output.dir", FIELD(out_dir), [](const std::string& s) { return !s.empty(); }, "non-empty"),
      scalar<bool>("output.checkpoints", FIELD(checkpoints), any, "bool"),
      list<std::uint64_t>("seeds", FIELD(seeds), any, "integers"),

      scalar<std::string>("dataset.kind", FIELD(dataset.kind),
                          [](const std::string& s) { return s == "synthetic" || s == "idx"; }, "synthetic|idx"),
      scalar<int>("dataset.classes", FIELD(dataset.classes), [](int v) { return v >= 2 && v <= 256; }, "2..256"),
      scalar<int>("dataset.per_class", FIELD(dataset.per_class), non_negative_i, ">= 0"),
      scalar<int>("dataset.test_per_class", FIELD(dataset.test_per_class), non_negative_i, ">= 0"),
      scalar<int>("dataset.side", FIELD(dataset.side), [](int v) { return v >= 8; }, ">= 8"),
      scalar<std::uint64_t>("dataset.seed", FIELD(dataset.seed), any, "integer"),
      scalar<std::string>("dataset.train_images", FIELD(dataset.train_images), any, "path"),
      scalar<std::string>("dataset.train_labels", FIELD(dataset.train_labels), any, "path"),
      scalar<std::string>("dataset.test_images", FIELD(dataset.test_images), any, "path"),
      scalar<std::string>("dataset.test_labels", FIELD(dataset.test_labels), any, "path"),
      scalar<int>("dataset.downsample", FIELD(dataset.downsample), positive_i, ">= 1"),
      scalar<int>("dataset.train_limit", FIELD(dataset.train_limit), non_negative_i, ">= 0"),
      scalar<int>("dataset.test_limit", FIELD(dataset.test_limit), non_negative_i, ">= 0"),

      scalar<int>("fl.n_clients", FIELD(fl.n_clients), positive_i, ">= 1"),
      scalar<int>("fl.clients_per_round", FIELD(fl.clients_per_round), positive_i, ">= 1"),
      scalar<int>("fl.n_malicious", FIELD(fl.n_malicious), non_negative_i, ">= 0"),
      scalar<int>("fl.rounds", FIELD(fl.rounds), non_negative_i, ">= 0"),
      scalar<int>("fl.local_epochs", FIELD(fl.local_epochs), non_negative_i, ">= 0"),
      scalar<int>("fl.batch_size", FIELD(fl.batch_size), positive_i, ">= 1"),
      scalar<double>("fl.client_lr", FIELD(fl.client_lr), non_negative_d, ">= 0"),
      scalar<double>("fl.alpha", FIELD(fl.alpha), positive_d, "> 0"),
      scalar<int>("fl.eval_every", FIELD(fl.eval_every), positive_i, ">= 1"),
      scalar<bool>("fl.shared_generator", FIELD(fl.shared_generator), any, "bool"),
      scalar<bool>("fl.reset_generator_each_round", FIELD(fl.reset_generator_each_round), any, "bool"),
      scalar<int>("fl.attack_start_round", FIELD(fl.attack_start_round), positive_i, ">= 1"),
      scalar<int>("fl.workers", FIELD(fl.workers), positive_i, ">= 1"),
      list<int>("model.hidden", FIELD(fl.hidden), positive_i, ">= 1"),

      scalar<std::uint64_t>("eval.seed", FIELD(fl.eval_seed), any, "integer"),
      scalar<int>("eval.repeats", FIELD(fl.eval_repeats), positive_i, ">= 1"),
      scalar<int>("eval.diversity_samples", FIELD(fl.diversity_samples), [](int v) { return v >= 2; }, ">= 2"),

      {"attack.kind", [](const ExperimentConfig& c) { return std::string(attacks::to_string(c.fl.attack.kind)); },
       [](ExperimentConfig& c, const std::string& s) { c.fl.attack.kind = attacks::attack_kind_from_string(s); }},
      scalar<double>("attack.epsilon", FIELD(fl.attack.epsilon), positive_d, "> 0"),
      scalar<double>("attack.lambda_stealth", FIELD(fl.attack.lambda_stealth), non_negative_d, ">= 0"),
      scalar<double>("attack.lambda_div", FIELD(fl.attack.lambda_div), non_negative_d, ">= 0"),
      scalar<int>("attack.latent_dim", FIELD(fl.attack.latent_dim), positive_i, ">= 1"),
      scalar<int>("attack.label_embed_dim", FIELD(fl.attack.label_embed_dim), positive_i, ">= 1"),
      scalar<bool>("attack.multi_target", FIELD(fl.attack.multi_target), any, "bool"),
      scalar<int>("attack.fixed_target", FIELD(fl.attack.fixed_target), non_negative_i, ">= 0"),
      scalar<bool>("attack.use_latent", FIELD(fl.attack.use_latent), any, "bool"),
      scalar<bool>("attack.use_skip", FIELD(fl.attack.use_skip), any, "bool"),
      scalar<bool>("attack.diversity_per_class", FIELD(fl.attack.diversity_per_class), any, "bool"),
      scalar<double>("attack.generator_lr", FIELD(fl.attack.generator_lr), non_negative_d, ">= 0"),
      scalar<double>("attack.poison_fraction", FIELD(fl.attack.poison_fraction), unit_d, "[0,1]"),
      scalar<int>("attack.encoder_width", FIELD(fl.attack.encoder_width), positive_i, ">= 1"),
      scalar<int>("attack.bottleneck_width", FIELD(fl.attack.bottleneck_width), positive_i, ">= 1"),
      scalar<int>("attack.patch_side", FIELD(fl.attack.patch_side), positive_i, ">= 1"),
      scalar<double>("attack.blend_alpha", FIELD(fl.attack.blend_alpha), unit_d, "[0,1]"),

      {"defense.kind", [](const ExperimentConfig& c) { return std::string(defenses::to_string(c.fl.defense.kind)); },
       [](ExperimentConfig& c, const std::string& s) { c.fl.defense.kind = defenses::rule_kind_from_string(s); }},
      scalar<int>("defense.f_bound", FIELD(fl.defense.f_bound), non_negative_i, ">= 0"),
      scalar<int>("defense.multi_m", FIELD(fl.defense.multi_m), positive_i, ">= 1"),
      scalar<double>("defense.beta", FIELD(fl.defense.beta), [](double v) { return v >= 0 && v < 0.5; }, "[0,0.5)"),
      scalar<int>("defense.rfa_iters", FIELD(fl.defense.rfa_iters), positive_i, ">= 1"),
      scalar<double>("defense.rfa_smoothing", FIELD(fl.defense.rfa_smoothing), positive_d, "> 0"),
      scalar<double>("defense.rfa_tol", FIELD(fl.defense.rfa_tol), positive_d, "> 0"),
      scalar<double>("defense.flame_noise_factor", FIELD(fl.defense.flame_noise_factor), non_negative_d, ">= 0"),
      scalar<int>("defense.rflbat_components", FIELD(fl.defense.rflbat_components), positive_i, ">= 1"),

      list<std::string>("sweep.attacks", FIELD(sweep_attacks), [](const std::string& s) { return is_attack_preset(s); },
                        "attack presets"),
      list<std::string>("sweep.defenses", FIELD(sweep_defenses),
                        [](const std::string& s) {
                          try {
                            defenses::rule_kind_from_string(s);
                            return true;
                          } catch (const std::invalid_argument&) {
                            return false;
                          }
                        },
                        "aggregation rules"),

      list<double>("theory.lambdas", FIELD(theory.lambdas), non_negative_d, ">= 0"),
      scalar<int>("theory.generator_epochs", FIELD(theory.generator_epochs), positive_i, ">= 1"),
      scalar<int>("theory.classifier_epochs", FIELD(theory.classifier_epochs), positive_i, ">= 1"),
      scalar<int>("theory.n_mc", FIELD(theory.n_mc), positive_i, ">= 1"),
      scalar<int>("theory.probes", FIELD(theory.probes), positive_i, ">= 1"),
  };
  return entries;
}

#undef FIELD

// Cross-field rules, reported against the key most likely at fault.
void validate_with_keys(const ExperimentConfig& cfg, const std::map<std::string, int>& lines) {
  auto fail = [&lines](const std::string& key, const std::string& msg) {
    const auto it = lines.find(key);
    throw ConfigError(key, it == lines.end() ? 0 : it->second, msg);
  };
  const auto& fl = cfg.fl;
  if (fl.clients_per_round > fl.n_clients) fail("fl.clients_per_round", "exceeds fl.n_clients");
  if (fl.n_malicious > fl.n_clients) fail("fl.n_malicious", "exceeds fl.n_clients");
  if (fl.attack.fixed_target >= cfg.dataset.classes && cfg.dataset.kind == "synthetic")
    fail("attack.fixed_target", "must be below dataset.classes");
  if (cfg.dataset.kind == "idx" &&
      (cfg.dataset.train_images.empty() || cfg.dataset.train_labels.empty() ||
       cfg.dataset.test_images.empty() || cfg.dataset.test_labels.empty()))
    fail("dataset.kind", "idx datasets need train/test image and label paths");
  const auto k = static_cast<std::size_t>(std::floor(fl.defense.beta * fl.clients_per_round));
  if (fl.defense.kind == defenses::RuleKind::trimmed_mean && 2 * k >= static_cast<std::size_t>(fl.clients_per_round))
    fail("defense.beta", "trims every update of a round");
  if ((fl.defense.kind == defenses::RuleKind::krum || fl.defense.kind == defenses::RuleKind::multi_krum) &&
      fl.clients_per_round < 2 * fl.defense.f_bound + 3)
    fail("defense.f_bound", "krum needs fl.clients_per_round >= 2*f_bound+3");
  if (fl.defense.kind == defenses::RuleKind::multi_krum && fl.defense.multi_m > fl.clients_per_round)
    fail("defense.multi_m", "exceeds fl.clients_per_round");
  if (fl.defense.kind == defenses::RuleKind::flame && fl.clients_per_round < 3)
    fail("defense.kind", "flame needs fl.clients_per_round >= 3");
  if (fl.defense.kind == defenses::RuleKind::rflbat && fl.clients_per_round < 4)
    fail("defense.kind", "rflbat needs fl.clients_per_round >= 4");
  if (cfg.seeds.empty()) fail("seeds", "at least one seed is required");
  try {
    fl.validate();
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    fail(msg.substr(0, msg.find(' ')), msg);
  }
}

}  // namespace

void ExperimentConfig::validate() const { validate_with_keys(*this, {}); }

bool is_attack_preset(const std::string& preset) {
  static const std::set<std::string> names{"none",     "badnets",    "blended",    "flat",
                                           "flat-single", "flat-noz", "flat-nodiv", "flat-nostealth"};
  return names.count(preset) > 0;
}

void apply_attack_preset(ExperimentConfig& cfg, const std::string& preset) {
  auto& a = cfg.fl.attack;
  if (!is_attack_preset(preset)) throw std::invalid_argument("unknown attack preset '" + preset + "'");
  if (preset == "none") a.kind = attacks::AttackKind::none;
  else if (preset == "badnets") a.kind = attacks::AttackKind::badnets;
  else if (preset == "blended") a.kind = attacks::AttackKind::blended;
  else {
    a.kind = attacks::AttackKind::flat;
    if (preset == "flat-single") a.multi_target = false;
    if (preset == "flat-noz") a.use_latent = false;
    if (preset == "flat-nodiv") a.lambda_div = 0;
    if (preset == "flat-nostealth") a.lambda_stealth = 0;
  }
}

void apply_defense(ExperimentConfig& cfg, const std::string& rule) {
  cfg.fl.defense.kind = defenses::rule_kind_from_string(rule);
}

ExperimentConfig parse_config(const std::string& text) {
  ExperimentConfig cfg;
  std::map<std::string, int> lines;
  std::map<std::string, const Entry*> by_key;
  for (const auto& e : registry()) by_key[e.key] = &e;

  std::istringstream in(text);
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto hash = raw.find('#');
    const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("", line_no, "expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const auto it = by_key.find(key);
    if (it == by_key.end()) throw ConfigError(key, line_no, "unknown key");
    if (lines.count(key)) throw ConfigError(key, line_no, "duplicate key (first set on line " + std::to_string(lines[key]) + ")");
    try {
      it->second->set(cfg, value);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(key, line_no, e.what());
    }
    lines[key] = line_no;
  }
  validate_with_keys(cfg, lines);
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("", 0, "cannot read config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::vector<std::pair<std::string, std::string>> config_entries(const ExperimentConfig& cfg) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& e : registry()) out.emplace_back(e.key, e.get(cfg));
  return out;
}

std::string serialize_config(const ExperimentConfig& cfg) {
  std::string out;
  for (const auto& [k, v] : config_entries(cfg)) out += k + " = " + v + "\n";
  return out;
}

std::pair<data::Dataset, data::Dataset> load_datasets(const DatasetConfig& cfg) {
  data::Dataset train, test;
  if (cfg.kind == "synthetic") {
    train = data::make_synthetic(cfg.classes, cfg.per_class, cfg.side, cfg.seed);
    test = data::make_synthetic(cfg.classes, cfg.test_per_class, cfg.side, cfg.seed ^ 0x7E57ULL);
  } else {
    train = data::load_idx_files(cfg.train_images, cfg.train_labels, cfg.classes);
    test = data::load_idx_files(cfg.test_images, cfg.test_labels, cfg.classes);
    train = data::downsample(train, cfg.downsample);
    test = data::downsample(test, cfg.downsample);
  }
  auto limit = [](data::Dataset& ds, int n) {
    if (n <= 0 || n >= ds.size()) return;
    std::vector<std::size_t> idx(static_cast<std::size_t>(n));
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    ds = ds.subset(idx);
  };
  limit(train, cfg.train_limit);
  limit(test, cfg.test_limit);
  return {std::move(train), std::move(test)};
}

}  // namespace flat::config
