#pragma once

#include "flat/config.hpp"
#include "flat/nn.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace flat::cli {

inline constexpr const char* kVersion = "flatlab 0.1.0";

enum ExitCode : int { kOk = 0, kConfigError = 1, kRuntimeError = 2 };

// args[0] is the program name, as in argv.
int run_cli(const std::vector<std::string>& args);

struct GradCase {
  std::string name;
  nn::GradCheckReport<double> report;
};

// Finite-difference checks of every activation/loss pairing and of the
// generator objective, at 64-bit precision.
std::vector<GradCase> gradient_suite(std::uint64_t seed, double tolerance = 1e-4);

struct TheoryOutcome {
  double latent_gap_d1 = 0;
  double latent_gap_d1_exact = 0;
  double latent_gap_d1_variant = 0;
  double latent_gap = 0;
  double latent_gap_exact = 0;
  double latent_gap_variant = 0;
  double lipschitz_estimate = 0;
  double mean_trigger_distance = 0;
  double reference_product = 0;
  bool within_reference = false;
  // Trigger distance over latent pairs with the latent input disabled.
  double collapsed_trigger_distance = 0;
  double trained_diversity = 0;
  double diversity_threshold = 0;
  double max_abs_delta = 0;
  std::vector<double> lambdas;
  std::vector<double> stealth;
  std::vector<double> c_estimates;
  int inversions = 0;
  bool zero_lambda_largest = true;
  bool stealth_sweep_passed = false;
};

TheoryOutcome run_theory(const config::ExperimentConfig& cfg, std::uint64_t seed);

}  // namespace flat::cli
