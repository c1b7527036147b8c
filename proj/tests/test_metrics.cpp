#include <gtest/gtest.h>

#include "flat/flsim.hpp"
#include "flat/metrics.hpp"

#include <numeric>
#include <sstream>

using namespace flat;

namespace {

// Predicts class 0 whenever the bottom-right pixel is lit, else the class in `fallback`.
metrics::Classifier patch_detector(int classes, Eigen::Index pixels, int fallback) {
  return [=](const nn::Matrix& x) {
    nn::Matrix logits = nn::Matrix::Zero(x.rows(), classes);
    for (Eigen::Index i = 0; i < x.rows(); ++i) logits(i, x(i, pixels - 1) >= 1.0 ? 0 : fallback) = 1;
    return logits;
  };
}

attacks::AttackConfig small_generator_config() {
  attacks::AttackConfig cfg;
  cfg.encoder_width = 24;
  cfg.bottleneck_width = 6;
  cfg.latent_dim = 8;
  cfg.label_embed_dim = 4;
  return cfg;
}

}  // namespace

TEST(Accuracy, CountingOracle) {
  const auto ds = data::make_synthetic(5, 10, 8, 1);
  const metrics::Classifier always_two = [](const nn::Matrix& x) {
    nn::Matrix l = nn::Matrix::Zero(x.rows(), 5);
    l.col(2).setOnes();
    return l;
  };
  const long twos = std::count(ds.labels.begin(), ds.labels.end(), 2);
  EXPECT_DOUBLE_EQ(metrics::accuracy(always_two, ds), static_cast<double>(twos) / ds.size());
  const metrics::Classifier oracle = [&](const nn::Matrix& x) {
    nn::Matrix l = nn::Matrix::Zero(x.rows(), 5);
    for (Eigen::Index i = 0; i < x.rows(); ++i) l(i, ds.labels[i]) = 1;
    return l;
  };
  EXPECT_DOUBLE_EQ(metrics::accuracy(oracle, ds), 1.0);
  EXPECT_EQ(metrics::predict(nn::Matrix::Zero(1, 3)), std::vector<int>{0});
}

TEST(Asr, HardwiredPatchDetector) {
  const auto ds = data::make_synthetic(4, 10, 8, 2);
  attacks::Attack attack;
  attack.cfg.kind = attacks::AttackKind::badnets;
  attack.cfg.multi_target = false;
  attack.cfg.fixed_target = 0;
  Rng rng(1);
  const auto hit = metrics::asr(patch_detector(4, ds.pixels(), 1), attack, ds, rng);
  const long not_zero = ds.size() - std::count(ds.labels.begin(), ds.labels.end(), 0);
  EXPECT_EQ(hit.trials, not_zero);
  EXPECT_DOUBLE_EQ(hit.asr, 1.0);
  const metrics::Classifier blind = [](const nn::Matrix& x) {
    nn::Matrix l = nn::Matrix::Zero(x.rows(), 4);
    l.col(3).setOnes();
    return l;
  };
  EXPECT_DOUBLE_EQ(metrics::asr(blind, attack, ds, rng).asr, 0.0);
  attack.cfg.kind = attacks::AttackKind::none;
  const auto none = metrics::asr(blind, attack, ds, rng);
  EXPECT_EQ(none.trials, 0);
  EXPECT_EQ(none.asr, 0.0);
}

TEST(Asr, PerClassRecombinesToOverall) {
  const auto ds = data::make_synthetic(5, 12, 8, 3);
  Rng rng(4);
  auto cfg = small_generator_config();
  attacks::GeneratorShape shape{5, 1, 8, 8, cfg.label_embed_dim, cfg.latent_dim, cfg.encoder_width,
                                cfg.bottleneck_width, cfg.use_skip};
  const auto gen = attacks::FlatGenerator::random(shape, rng);
  attacks::Attack attack;
  attack.cfg = cfg;
  attack.generator = &gen;
  const auto model = flsim::train_classifier(ds, {12}, 2, 0.1, 16, 5);
  const auto r = metrics::asr(model, attack, ds, rng, 3);
  EXPECT_EQ(r.trials, 3 * ds.size());
  EXPECT_EQ(std::accumulate(r.per_class_trials.begin(), r.per_class_trials.end(), 0L), r.trials);
  EXPECT_EQ(std::accumulate(r.per_class_hits.begin(), r.per_class_hits.end(), 0L), r.hits);
  double weighted = 0;
  for (std::size_t c = 0; c < 5; ++c) weighted += r.per_class[c] * static_cast<double>(r.per_class_trials[c]);
  EXPECT_NEAR(weighted / static_cast<double>(r.trials), r.asr, 1e-12);
  EXPECT_EQ(r.deltas.rows(), r.trials);
  EXPECT_LE(r.deltas.cwiseAbs().maxCoeff(), cfg.epsilon);
}

TEST(Metrics, StealthAndDiversityForcedCases) {
  nn::Matrix d(3, 2);
  d << 0, 0, 3, 4, 0, 1;
  EXPECT_DOUBLE_EQ(metrics::stealth_metric(d), (0 + 25 + 1) / 3.0);
  // pairs: 5, 1, sqrt(9+9)
  EXPECT_NEAR(metrics::diversity_metric(d), (5 + 1 + std::sqrt(18.0)) / 3, 1e-12);
  EXPECT_THROW(metrics::diversity_metric(d.topRows(1)), std::invalid_argument);
  EXPECT_EQ(metrics::diversity_metric(nn::Matrix::Ones(4, 3)), 0.0);
}

TEST(LatentGap, OneDimensionalMonteCarlo) {
  EXPECT_NEAR(metrics::latent_gap_exact(1), 1.1284, 1e-4);
  EXPECT_NEAR(metrics::latent_gap_closed_form_variant(1), 0.9003, 1e-4);
  Rng rng(11);
  EXPECT_NEAR(metrics::latent_gap_monte_carlo(1, 100000, rng), 1.1284, 0.02);
}

TEST(LatentGap, HighDimensionalStableAcrossSeeds) {
  std::vector<double> v;
  for (std::uint64_t s = 1; s <= 5; ++s) {
    Rng rng(s);
    v.push_back(metrics::latent_gap_monte_carlo(64, 10000, rng));
  }
  const double exact = metrics::latent_gap_exact(64);
  for (double x : v) EXPECT_NEAR(x, exact, 0.02 * exact);
}

TEST(LatentCollapse, CollapseWithoutLatent) {
  Rng rng(6);
  auto cfg = small_generator_config();
  cfg.use_latent = false;
  attacks::GeneratorShape shape{4, 1, 8, 8, cfg.label_embed_dim, cfg.latent_dim, cfg.encoder_width,
                                cfg.bottleneck_width, cfg.use_skip};
  const auto gen = attacks::FlatGenerator::random(shape, rng);
  const auto ds = data::make_synthetic(4, 3, 8, 1);
  const std::vector<int> targets(static_cast<std::size_t>(ds.size()), 1);
  const auto rep = metrics::check_latent_collapse(gen, cfg, ds.images, targets, 1000, rng, 20);
  EXPECT_EQ(rep.mean_trigger_distance, 0.0);
  cfg.use_latent = true;
  const auto live = metrics::check_latent_collapse(gen, cfg, ds.images, targets, 1000, rng, 20);
  EXPECT_GT(live.mean_trigger_distance, 0.0);
  EXPECT_GT(live.lipschitz_estimate, 0.0);
  EXPECT_DOUBLE_EQ(live.reference_product, live.lipschitz_estimate * live.latent_gap);
}

TEST(StealthSweep, JudgeCases) {
  using P = metrics::StealthSweepPoint;
  auto judge = [](std::vector<double> stealth) {
    const std::vector<double> lambdas{0, 0.1, 0.5, 2.0};
    std::vector<P> s;
    for (std::size_t i = 0; i < stealth.size(); ++i) s.push_back({lambdas[i], stealth[i], 0, 0});
    return metrics::judge_stealth_sweep(s);
  };
  EXPECT_TRUE(judge({4, 3, 2, 1}).passed);
  const auto one_small = judge({4, 2, 2.1, 1});
  EXPECT_TRUE(one_small.passed);
  EXPECT_EQ(one_small.inversions, 1);
  EXPECT_FALSE(judge({4, 2, 3, 1}).passed);
  EXPECT_FALSE(judge({4, 2, 2.1, 2.2}).passed);
  EXPECT_FALSE(judge({2, 3, 1, 0.5}).passed);
  EXPECT_FALSE(judge({4, 4, 2, 1}).passed);
  const auto unsorted = metrics::judge_stealth_sweep({{2.0, 1, 0, 0}, {0, 4, 0, 0}, {0.5, 2, 0, 0}, {0.1, 3, 0, 0}});
  EXPECT_TRUE(unsorted.passed);
  EXPECT_EQ(unsorted.c_estimates.size(), 3u);
  EXPECT_DOUBLE_EQ(unsorted.c_estimates[0], 0.3);
}

TEST(Features, ExportRowsAndCsv) {
  const auto ds = data::make_synthetic(3, 2, 8, 1);
  Rng rng(2);
  const auto model = flsim::make_classifier(ds, {5}, rng);
  const nn::Matrix poisoned = ds.images.topRows(2).array() + 0.1;
  const std::vector<int> plabels{2, 0};
  const auto fx = metrics::export_features(model, ds, poisoned, plabels);
  ASSERT_EQ(fx.features.rows(), ds.size() + 2);
  EXPECT_EQ(fx.features.cols(), 5);
  EXPECT_FALSE(fx.poisoned[0]);
  EXPECT_TRUE(fx.poisoned.back());
  EXPECT_EQ(fx.labels.back(), 0);
  std::ostringstream os;
  metrics::write_features_csv(os, fx);
  const std::string text = os.str();
  EXPECT_EQ(text.substr(0, text.find('\n')), "feat_0,feat_1,feat_2,feat_3,feat_4,label,poisoned");
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), fx.features.rows() + 1);
  EXPECT_THROW(metrics::export_features(model, ds, poisoned, std::vector<int>{1}), std::invalid_argument);
}
