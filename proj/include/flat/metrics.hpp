#pragma once

#include "flat/attacks.hpp"
#include "flat/data.hpp"
#include "flat/nn.hpp"
#include "flat/rng.hpp"

#include <functional>
#include <iosfwd>
#include <vector>

namespace flat::metrics {

// Anything mapping a batch of images to a batch of logits.
using Classifier = std::function<nn::Matrix(const nn::Matrix&)>;

Classifier as_classifier(const nn::Network& model);

// Row-wise argmax, ties to the lowest class index.
std::vector<int> predict(const nn::Matrix& logits);

double accuracy(const Classifier& model, const data::Dataset& test);
double accuracy(const nn::Network& model, const data::Dataset& test);

struct AsrResult {
  double asr = 0;
  std::vector<double> per_class;      // success rate per drawn target
  std::vector<long> per_class_trials;
  std::vector<long> per_class_hits;
  long trials = 0;
  long hits = 0;
  nn::Matrix deltas;  // triggered minus clean input for each trial
};

// Attack-conditional success rate: each test sample gets one drawn target
// t != y (the fixed target for static and single-target attacks, skipping
// samples already of that class) and, for the generator, one latent code.
// AttackKind::none yields an all-zero result.
AsrResult asr(const Classifier& model, const attacks::Attack& attack, const data::Dataset& test,
              Rng& rng, int repeats = 1);
AsrResult asr(const nn::Network& model, const attacks::Attack& attack, const data::Dataset& test,
              Rng& rng, int repeats = 1);

double stealth_metric(const nn::Matrix& deltas);
// Mean over unordered pairs of ||d_i - d_j||_2; needs at least two rows.
double diversity_metric(const nn::Matrix& deltas);

// E||z - z'|| for independent standard normal codes of dimension d.
double latent_gap_monte_carlo(int latent_dim, int n_pairs, Rng& rng);
double latent_gap_exact(int latent_dim);
// Same Gamma ratio with an extra sqrt(2/pi) factor; underestimates the true gap, kept for comparison.
double latent_gap_closed_form_variant(int latent_dim);

struct CollapseReport {
  double latent_gap = 0;
  double latent_gap_exact = 0;
  double latent_gap_variant = 0;
  double lipschitz_estimate = 0;
  double mean_trigger_distance = 0;
  double reference_product = 0;  // lipschitz_estimate * latent_gap
  bool within_reference = false;  // mean_trigger_distance <= reference_product
};

CollapseReport check_latent_collapse(const attacks::FlatGenerator& gen, const attacks::AttackConfig& cfg,
                        const nn::Matrix& probes, std::span<const int> targets, int n_mc, Rng& rng,
                        int pairs_per_probe = 100);

struct StealthSweepPoint {
  double lambda = 0;
  double stealth = 0;
  double attack = 0;
  double diversity = 0;
};

struct StealthSweepReport {
  std::vector<StealthSweepPoint> sweep;  // sorted by lambda
  std::vector<double> c_estimates; // lambda * stealth for lambda > 0
  int inversions = 0;
  bool zero_lambda_largest = true;
  bool passed = false;
};

// Trains one generator per lambda_stealth value and reports its final losses.
using StealthHarness = std::function<StealthSweepPoint(double lambda_stealth)>;

StealthSweepReport check_stealth_sweep(const StealthHarness& harness, std::vector<double> lambdas);
// Verdict over an already measured sweep.
StealthSweepReport judge_stealth_sweep(std::vector<StealthSweepPoint> sweep);

struct FeatureExport {
  nn::Matrix features;
  std::vector<int> labels;
  std::vector<bool> poisoned;
};

// Penultimate-layer activations for clean then poisoned samples.
FeatureExport export_features(const nn::Network& model, const data::Dataset& clean,
                              const nn::Matrix& poisoned, std::span<const int> poisoned_labels);
void write_features_csv(std::ostream& os, const FeatureExport& fx);

}  // namespace flat::metrics
