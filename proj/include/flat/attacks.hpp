#pragma once

// Backdoor trigger construction: fixed-pattern baselines and the latent-driven
// conditional trigger generator with its attack/stealth/diversity objective.

#include "flat/data.hpp"
#include "flat/nn.hpp"
#include "flat/rng.hpp"

#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace flat::attacks {

enum class AttackKind { none, badnets, blended, flat };

const char* to_string(AttackKind kind);
AttackKind attack_kind_from_string(const std::string& name);

struct AttackConfig {
  AttackKind kind = AttackKind::flat;
  double epsilon = 0.2;
  double lambda_stealth = 0.5;
  double lambda_div = 0.2;
  int latent_dim = 64;
  int label_embed_dim = 16;
  bool multi_target = true;
  int fixed_target = 0;
  bool use_latent = true;
  bool use_skip = true;
  // Restricts diversity pairs to samples sharing a target class.
  bool diversity_per_class = false;
  double generator_lr = 1e-4;
  // Fraction of each malicious training batch replaced by poisoned samples.
  double poison_fraction = 0.5;
  int encoder_width = 256;
  int bottleneck_width = 64;
  int patch_side = 3;
  double blend_alpha = 0.2;

  void validate() const;
};

// ---- Static baselines -------------------------------------------------------

// Sets the bottom-right patch_side x patch_side pixels of every channel to 1.
nn::Vector badnets_apply(const nn::Vector& image, int channels, int height, int width,
                         int patch_side = 3);
nn::Vector blended_apply(const nn::Vector& image, const nn::Vector& pattern, double alpha = 0.2);

// Seeded uniform-noise blend pattern shared by all blended-attack clients.
nn::Vector blend_pattern(Eigen::Index pixels, std::uint64_t seed);

// ---- Generator --------------------------------------------------------------

struct GeneratorShape {
  int classes = 10;
  int channels = 1;
  int height = 12;
  int width = 12;
  int embed_dim = 16;
  int latent_dim = 64;
  int encoder_width = 256;
  int bottleneck_width = 64;
  bool use_skip = true;

  Eigen::Index image_size() const { return Eigen::Index{channels} * height * width; }
  Eigen::Index plane_size() const { return Eigen::Index{height} * width; }
  static GeneratorShape from(const data::Dataset& ds, const AttackConfig& cfg);
};

// Dense encoder-decoder G(x, t, z): the target embedding and the latent code
// are each projected to one H x W plane and stacked behind the image, giving a
// (C+2, H, W) input. The head is tanh; callers scale by epsilon.
class FlatGenerator {
 public:
  struct Trace {
    nn::Matrix embeds;  // B x D_C, rows of the embedding table
    nn::Matrix latents; // B x D_L
    std::vector<int> targets;
    nn::ForwardTrace<double> enc1, enc2, dec, head;
    nn::Matrix raw;  // B x CHW tanh output in [-1, 1]
  };

  FlatGenerator() = default;
  static FlatGenerator zeros(const GeneratorShape& shape);
  static FlatGenerator random(const GeneratorShape& shape, Rng& rng);

  const GeneratorShape& shape() const { return shape_; }

  Eigen::Index param_count() const;
  nn::Vector parameters() const;
  void set_parameters(const nn::Vector& params);

  // Builds the (C+2)HW generator input for each row.
  nn::Matrix assemble_input(const nn::Matrix& images, std::span<const int> targets,
                            const nn::Matrix& latents, nn::Matrix* embeds = nullptr) const;

  Trace forward(const nn::Matrix& images, std::span<const int> targets,
                const nn::Matrix& latents) const;
  // Flat parameter gradient given dLoss/d(raw).
  nn::Vector backward(const Trace& trace, const nn::Matrix& raw_grad) const;

  void write(std::ostream& os, double epsilon) const;
  static FlatGenerator read(std::istream& is, double* epsilon = nullptr);

  nn::Matrix embed_table;     // K x D_C
  nn::Matrix label_weight;    // HW x D_C
  nn::Vector label_bias;      // HW
  nn::Matrix latent_weight;   // HW x D_L
  nn::Vector latent_bias;     // HW
  nn::Network enc1, enc2, dec, head;

 private:
  GeneratorShape shape_;
};

struct Generated {
  nn::Matrix deltas;    // B x CHW, |entry| <= epsilon
  nn::Matrix poisoned;  // clamp(images + deltas, 0, 1)
};

// Latent codes are ignored (replaced by zeros) when cfg.use_latent is false.
Generated flat_generate(const FlatGenerator& gen, const nn::Matrix& images,
                        std::span<const int> targets, const nn::Matrix& latents,
                        const AttackConfig& cfg);

nn::Matrix sample_latents(Eigen::Index batch, int latent_dim, Rng& rng);

// Uniform over classes != label (rejection sampling); in single-target mode
// the fixed target is returned for every row and callers skip rows whose
// label equals it.
std::vector<int> sample_targets(std::span<const int> labels, int classes, const AttackConfig& cfg,
                                Rng& rng);

// -(1/B^2) * sum over ordered pairs (i, j) of ||d_i - d_j||_2.
double diversity_loss(const nn::Matrix& deltas);
double diversity_loss(const nn::Matrix& deltas, std::span<const int> targets, bool per_class);
nn::Matrix diversity_loss_grad(const nn::Matrix& deltas, std::span<const int> targets,
                               bool per_class);

// Mean over rows of ||d_i||_2^2.
double stealth_loss(const nn::Matrix& deltas);

struct TotalLoss {
  double total = 0;
  double attack = 0;
  double stealth = 0;
  double diversity = 0;
  nn::Vector grad;  // w.r.t. generator parameters
  nn::Matrix deltas;
  nn::Matrix poisoned;
};

// Classifier is frozen: only the generator gradient is produced.
TotalLoss flat_total_loss(const nn::Network& model, const FlatGenerator& gen,
                          const nn::Matrix& images, std::span<const int> labels,
                          std::span<const int> targets, const nn::Matrix& latents,
                          const AttackConfig& cfg);

struct EpochStats {
  double total = 0;
  double attack = 0;
  double stealth = 0;
  double diversity = 0;
  int batches = 0;
  // Largest |delta| seen on any generated batch of the epoch.
  double max_abs_delta = 0;
};

EpochStats flat_train_epoch(const nn::Network& model, FlatGenerator& gen, nn::OptimState& optim,
                            const data::Dataset& client, const AttackConfig& cfg, int batch_size,
                            Rng& rng);

// Static attack or generator, as seen by the federated training loop.
struct Attack {
  AttackConfig cfg;
  nn::Vector pattern;  // blended trigger pattern
  const FlatGenerator* generator = nullptr;

  AttackKind kind() const { return cfg.kind; }
};

struct PoisonedBatch {
  nn::Matrix inputs;
  std::vector<int> targets;
  std::vector<bool> poisoned;
};

// Poisons every row it is given; rows that cannot be attacked (single-target
// rows already labelled with the target) come back clean with their label.
PoisonedBatch poison_batch(const Attack& attack, const data::Dataset& ds,
                           const nn::Matrix& images, std::span<const int> labels, Rng& rng);

}  // namespace flat::attacks
