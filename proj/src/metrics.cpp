#include "flat/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <ostream>
#include <stdexcept>

namespace flat::metrics {

Classifier as_classifier(const nn::Network& model) {
  return [&model](const nn::Matrix& x) { return nn::forward(model, x); };
}

std::vector<int> predict(const nn::Matrix& logits) {
  std::vector<int> out(static_cast<std::size_t>(logits.rows()));
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index k = 1; k < logits.cols(); ++k)
      if (logits(i, k) > logits(i, best)) best = k;
    out[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return out;
}

double accuracy(const Classifier& model, const data::Dataset& test) {
  if (test.size() == 0) throw std::invalid_argument("accuracy on an empty test set");
  const auto pred = predict(model(test.images));
  long correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == test.labels[i];
  return static_cast<double>(correct) / static_cast<double>(pred.size());
}

double accuracy(const nn::Network& model, const data::Dataset& test) {
  return accuracy(as_classifier(model), test);
}

AsrResult asr(const Classifier& model, const attacks::Attack& attack, const data::Dataset& test,
              Rng& rng, int repeats) {
  if (test.size() == 0) throw std::invalid_argument("asr on an empty test set");
  AsrResult out;
  const auto k = static_cast<std::size_t>(test.classes);
  out.per_class.assign(k, 0.0);
  out.per_class_trials.assign(k, 0);
  out.per_class_hits.assign(k, 0);
  if (attack.kind() == attacks::AttackKind::none) return out;

  std::vector<nn::Matrix> delta_blocks;
  for (int r = 0; r < repeats; ++r) {
    const auto batch = attacks::poison_batch(attack, test, test.images, test.labels, rng);
    std::vector<Eigen::Index> rows;
    for (std::size_t i = 0; i < batch.poisoned.size(); ++i)
      if (batch.poisoned[i] && batch.targets[i] != test.labels[i]) rows.push_back(static_cast<Eigen::Index>(i));
    if (rows.empty()) continue;
    nn::Matrix triggered(static_cast<Eigen::Index>(rows.size()), test.images.cols());
    nn::Matrix deltas(static_cast<Eigen::Index>(rows.size()), test.images.cols());
    for (std::size_t j = 0; j < rows.size(); ++j) {
      triggered.row(static_cast<Eigen::Index>(j)) = batch.inputs.row(rows[j]);
      deltas.row(static_cast<Eigen::Index>(j)) = batch.inputs.row(rows[j]) - test.images.row(rows[j]);
    }
    const auto pred = predict(model(triggered));
    for (std::size_t j = 0; j < rows.size(); ++j) {
      const int t = batch.targets[static_cast<std::size_t>(rows[j])];
      ++out.per_class_trials[static_cast<std::size_t>(t)];
      ++out.trials;
      if (pred[j] == t) {
        ++out.per_class_hits[static_cast<std::size_t>(t)];
        ++out.hits;
      }
    }
    delta_blocks.push_back(std::move(deltas));
  }
  Eigen::Index total_rows = 0;
  for (const auto& b : delta_blocks) total_rows += b.rows();
  out.deltas.resize(total_rows, test.images.cols());
  Eigen::Index at = 0;
  for (const auto& b : delta_blocks) {
    out.deltas.middleRows(at, b.rows()) = b;
    at += b.rows();
  }
  if (out.trials > 0) out.asr = static_cast<double>(out.hits) / static_cast<double>(out.trials);
  for (std::size_t c = 0; c < k; ++c)
    if (out.per_class_trials[c] > 0)
      out.per_class[c] = static_cast<double>(out.per_class_hits[c]) / static_cast<double>(out.per_class_trials[c]);
  return out;
}

AsrResult asr(const nn::Network& model, const attacks::Attack& attack, const data::Dataset& test,
              Rng& rng, int repeats) {
  return asr(as_classifier(model), attack, test, rng, repeats);
}

double stealth_metric(const nn::Matrix& deltas) {
  if (deltas.rows() == 0) throw std::invalid_argument("stealth_metric needs at least one delta");
  return deltas.rowwise().squaredNorm().mean();
}

double diversity_metric(const nn::Matrix& deltas) {
  const Eigen::Index n = deltas.rows();
  if (n < 2) throw std::invalid_argument("diversity_metric needs at least two deltas");
  double sum = 0;
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j) sum += (deltas.row(i) - deltas.row(j)).norm();
  return sum / (0.5 * static_cast<double>(n) * static_cast<double>(n - 1));
}

double latent_gap_monte_carlo(int latent_dim, int n_pairs, Rng& rng) {
  if (latent_dim < 1 || n_pairs < 1) throw std::invalid_argument("latent gap needs d >= 1 and pairs >= 1");
  std::normal_distribution<double> normal(0.0, 1.0);
  double sum = 0;
  for (int p = 0; p < n_pairs; ++p) {
    double sq = 0;
    for (int j = 0; j < latent_dim; ++j) {
      const double diff = normal(rng) - normal(rng);
      sq += diff * diff;
    }
    sum += std::sqrt(sq);
  }
  return sum / n_pairs;
}

double latent_gap_exact(int latent_dim) {
  // z - z' ~ N(0, 2I): E||.|| = sqrt(2) * sqrt(2) * Gamma((d+1)/2) / Gamma(d/2).
  const double d = latent_dim;
  return 2.0 * std::exp(std::lgamma((d + 1) / 2) - std::lgamma(d / 2));
}

double latent_gap_closed_form_variant(int latent_dim) {
  const double d = latent_dim;
  return 2.0 * std::sqrt(2.0 / std::numbers::pi) * std::exp(std::lgamma((d + 1) / 2) - std::lgamma(d / 2));
}

CollapseReport check_latent_collapse(const attacks::FlatGenerator& gen, const attacks::AttackConfig& cfg,
                        const nn::Matrix& probes, std::span<const int> targets, int n_mc, Rng& rng,
                        int pairs_per_probe) {
  if (static_cast<Eigen::Index>(targets.size()) != probes.rows())
    throw std::invalid_argument("check_latent_collapse: one target per probe image required");
  CollapseReport rep;
  rep.latent_gap = latent_gap_monte_carlo(cfg.latent_dim, n_mc, rng);
  rep.latent_gap_exact = latent_gap_exact(cfg.latent_dim);
  rep.latent_gap_variant = latent_gap_closed_form_variant(cfg.latent_dim);

  double dist_sum = 0;
  long count = 0;
  for (Eigen::Index p = 0; p < probes.rows(); ++p) {
    const nn::Matrix images = probes.row(p).replicate(pairs_per_probe, 1);
    const std::vector<int> t(static_cast<std::size_t>(pairs_per_probe), targets[static_cast<std::size_t>(p)]);
    const nn::Matrix za = attacks::sample_latents(pairs_per_probe, cfg.latent_dim, rng);
    const nn::Matrix zb = attacks::sample_latents(pairs_per_probe, cfg.latent_dim, rng);
    const auto ga = attacks::flat_generate(gen, images, t, za, cfg);
    const auto gb = attacks::flat_generate(gen, images, t, zb, cfg);
    for (Eigen::Index i = 0; i < pairs_per_probe; ++i) {
      const double out_dist = (ga.deltas.row(i) - gb.deltas.row(i)).norm();
      const double in_dist = (za.row(i) - zb.row(i)).norm();
      dist_sum += out_dist;
      ++count;
      if (in_dist > 0) rep.lipschitz_estimate = std::max(rep.lipschitz_estimate, out_dist / in_dist);
    }
  }
  if (count > 0) rep.mean_trigger_distance = dist_sum / static_cast<double>(count);
  rep.reference_product = rep.lipschitz_estimate * rep.latent_gap;
  rep.within_reference = rep.mean_trigger_distance <= rep.reference_product;
  return rep;
}

StealthSweepReport judge_stealth_sweep(std::vector<StealthSweepPoint> sweep) {
  std::sort(sweep.begin(), sweep.end(), [](const auto& a, const auto& b) { return a.lambda < b.lambda; });
  StealthSweepReport rep;
  rep.sweep = std::move(sweep);
  bool tolerable = true;
  for (std::size_t i = 1; i < rep.sweep.size(); ++i) {
    const double prev = rep.sweep[i - 1].stealth;
    const double cur = rep.sweep[i].stealth;
    if (cur > prev) {
      ++rep.inversions;
      if (cur - prev > 0.1 * std::abs(prev)) tolerable = false;
    }
  }
  for (const auto& p : rep.sweep)
    if (p.lambda > 0) rep.c_estimates.push_back(p.lambda * p.stealth);
  if (!rep.sweep.empty() && rep.sweep.front().lambda == 0.0)
    for (std::size_t i = 1; i < rep.sweep.size(); ++i)
      if (!(rep.sweep.front().stealth > rep.sweep[i].stealth)) rep.zero_lambda_largest = false;
  rep.passed = rep.inversions <= 1 && tolerable && rep.zero_lambda_largest;
  return rep;
}

StealthSweepReport check_stealth_sweep(const StealthHarness& harness, std::vector<double> lambdas) {
  std::vector<StealthSweepPoint> sweep;
  for (double l : lambdas) {
    StealthSweepPoint p = harness(l);
    p.lambda = l;
    sweep.push_back(p);
  }
  return judge_stealth_sweep(std::move(sweep));
}

FeatureExport export_features(const nn::Network& model, const data::Dataset& clean,
                              const nn::Matrix& poisoned, std::span<const int> poisoned_labels) {
  if (model.layers().size() < 2)
    throw std::invalid_argument("export_features needs a model with at least one hidden layer");
  if (static_cast<Eigen::Index>(poisoned_labels.size()) != poisoned.rows())
    throw std::invalid_argument("export_features: one label per poisoned sample required");
  nn::Matrix inputs(clean.size() + poisoned.rows(), model.in_width());
  inputs << clean.images, poisoned;
  const auto tr = nn::forward_trace(model, inputs);
  FeatureExport fx;
  fx.features = tr.inputs.back();
  fx.labels = clean.labels;
  fx.labels.insert(fx.labels.end(), poisoned_labels.begin(), poisoned_labels.end());
  fx.poisoned.assign(static_cast<std::size_t>(clean.size()), false);
  fx.poisoned.resize(fx.labels.size(), true);
  return fx;
}

void write_features_csv(std::ostream& os, const FeatureExport& fx) {
  for (Eigen::Index j = 0; j < fx.features.cols(); ++j) os << "feat_" << j << ",";
  os << "label,poisoned\n";
  char buf[32];
  for (Eigen::Index i = 0; i < fx.features.rows(); ++i) {
    for (Eigen::Index j = 0; j < fx.features.cols(); ++j) {
      std::snprintf(buf, sizeof buf, "%.6g", fx.features(i, j));
      os << buf << ",";
    }
    os << fx.labels[static_cast<std::size_t>(i)] << "," << (fx.poisoned[static_cast<std::size_t>(i)] ? 1 : 0)
       << "\n";
  }
}

}  // namespace flat::metrics
