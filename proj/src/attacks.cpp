#include "flat/attacks.hpp"

#include "flat/serialize.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace flat::attacks {

const char* to_string(AttackKind kind) {
  switch (kind) {
    case AttackKind::none: return "none";
    case AttackKind::badnets: return "badnets";
    case AttackKind::blended: return "blended";
    case AttackKind::flat: return "flat";
  }
  return "?";
}

AttackKind attack_kind_from_string(const std::string& name) {
  if (name == "none") return AttackKind::none;
  if (name == "badnets") return AttackKind::badnets;
  if (name == "blended") return AttackKind::blended;
  if (name == "flat") return AttackKind::flat;
  throw std::invalid_argument("unknown attack kind '" + name + "'");
}

void AttackConfig::validate() const {
  if (!(epsilon > 0)) throw std::invalid_argument("attack.epsilon must be > 0");
  if (!(lambda_stealth >= 0)) throw std::invalid_argument("attack.lambda_stealth must be >= 0");
  if (!(lambda_div >= 0)) throw std::invalid_argument("attack.lambda_div must be >= 0");
  if (latent_dim < 1) throw std::invalid_argument("attack.latent_dim must be >= 1");
  if (label_embed_dim < 1) throw std::invalid_argument("attack.label_embed_dim must be >= 1");
  if (fixed_target < 0) throw std::invalid_argument("attack.fixed_target must be >= 0");
  if (!(generator_lr >= 0)) throw std::invalid_argument("attack.generator_lr must be >= 0");
  if (!(poison_fraction >= 0 && poison_fraction <= 1))
    throw std::invalid_argument("attack.poison_fraction must lie in [0,1]");
  if (encoder_width < 1 || bottleneck_width < 1)
    throw std::invalid_argument("attack.encoder_width and attack.bottleneck_width must be >= 1");
  if (patch_side < 1) throw std::invalid_argument("attack.patch_side must be >= 1");
  if (!(blend_alpha >= 0 && blend_alpha <= 1))
    throw std::invalid_argument("attack.blend_alpha must lie in [0,1]");
}

nn::Vector badnets_apply(const nn::Vector& image, int channels, int height, int width,
                         int patch_side) {
  if (image.size() != Eigen::Index{channels} * height * width)
    throw std::invalid_argument("badnets_apply: image size does not match C*H*W");
  if (patch_side > height || patch_side > width)
    throw std::invalid_argument("badnets_apply: patch of side " + std::to_string(patch_side) +
                                " does not fit a " + std::to_string(height) + "x" +
                                std::to_string(width) + " image");
  nn::Vector out = image;
  for (int c = 0; c < channels; ++c)
    for (int y = height - patch_side; y < height; ++y)
      for (int x = width - patch_side; x < width; ++x) out[(c * height + y) * width + x] = 1.0;
  return out;
}

nn::Vector blended_apply(const nn::Vector& image, const nn::Vector& pattern, double alpha) {
  if (image.size() != pattern.size())
    throw std::invalid_argument("blended_apply: pattern has " + std::to_string(pattern.size()) +
                                " pixels, image has " + std::to_string(image.size()));
  if (!(alpha >= 0 && alpha <= 1)) throw std::invalid_argument("blended_apply: alpha outside [0,1]");
  return ((1.0 - alpha) * image + alpha * pattern).cwiseMax(0.0).cwiseMin(1.0);
}

nn::Vector blend_pattern(Eigen::Index pixels, std::uint64_t seed) {
  Rng rng = make_rng(seed, {stream::kAttack, 0xB1E4D});
  std::uniform_real_distribution<double> u(0.0, 1.0);
  nn::Vector p(pixels);
  for (Eigen::Index i = 0; i < pixels; ++i) p[i] = u(rng);
  return p;
}

// ---- Generator --------------------------------------------------------------

GeneratorShape GeneratorShape::from(const data::Dataset& ds, const AttackConfig& cfg) {
  GeneratorShape s;
  s.classes = ds.classes;
  s.channels = ds.channels;
  s.height = ds.height;
  s.width = ds.width;
  s.embed_dim = cfg.label_embed_dim;
  s.latent_dim = cfg.latent_dim;
  s.encoder_width = cfg.encoder_width;
  s.bottleneck_width = cfg.bottleneck_width;
  s.use_skip = cfg.use_skip;
  return s;
}

namespace {

using nn::Activation;

struct CoreWidths {
  std::vector<Eigen::Index> enc1, enc2, dec, head;
};

CoreWidths core_widths(const GeneratorShape& s) {
  const Eigen::Index in = Eigen::Index{s.channels + 2} * s.plane_size();
  const Eigen::Index head_in = s.use_skip ? 2 * Eigen::Index{s.encoder_width} : s.encoder_width;
  return {{in, s.encoder_width},
          {s.encoder_width, s.bottleneck_width},
          {s.bottleneck_width, s.encoder_width},
          {head_in, s.image_size()}};
}

void append(nn::Vector& out, Eigen::Index& k, const nn::Matrix& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) out[k++] = m(r, c);
}

void append(nn::Vector& out, Eigen::Index& k, const nn::Vector& v) {
  out.segment(k, v.size()) = v;
  k += v.size();
}

void extract(const nn::Vector& in, Eigen::Index& k, nn::Matrix& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = in[k++];
}

void extract(const nn::Vector& in, Eigen::Index& k, nn::Vector& v) {
  v = in.segment(k, v.size());
  k += v.size();
}

void check_targets(std::span<const int> targets, int classes) {
  for (std::size_t i = 0; i < targets.size(); ++i)
    if (targets[i] < 0 || targets[i] >= classes)
      throw std::invalid_argument("target class " + std::to_string(targets[i]) + " at row " +
                                  std::to_string(i) + " outside [0," + std::to_string(classes) + ")");
}

}  // namespace

FlatGenerator FlatGenerator::zeros(const GeneratorShape& shape) {
  FlatGenerator g;
  g.shape_ = shape;
  const auto hw = shape.plane_size();
  g.embed_table = nn::Matrix::Zero(shape.classes, shape.embed_dim);
  g.label_weight = nn::Matrix::Zero(hw, shape.embed_dim);
  g.label_bias = nn::Vector::Zero(hw);
  g.latent_weight = nn::Matrix::Zero(hw, shape.latent_dim);
  g.latent_bias = nn::Vector::Zero(hw);
  const auto w = core_widths(shape);
  g.enc1 = nn::Network(w.enc1, {Activation::leaky_relu});
  g.enc2 = nn::Network(w.enc2, {Activation::leaky_relu});
  g.dec = nn::Network(w.dec, {Activation::leaky_relu});
  g.head = nn::Network(w.head, {Activation::tanh});
  return g;
}

FlatGenerator FlatGenerator::random(const GeneratorShape& shape, Rng& rng) {
  FlatGenerator g = zeros(shape);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (Eigen::Index i = 0; i < g.embed_table.size(); ++i) g.embed_table.data()[i] = normal(rng);
  auto glorot = [&rng](nn::Matrix& m) {
    const double limit = std::sqrt(6.0 / static_cast<double>(m.rows() + m.cols()));
    std::uniform_real_distribution<double> u(-limit, limit);
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = u(rng);
  };
  glorot(g.label_weight);
  glorot(g.latent_weight);
  const auto w = core_widths(shape);
  g.enc1 = nn::Network::glorot(w.enc1, {Activation::leaky_relu}, rng);
  g.enc2 = nn::Network::glorot(w.enc2, {Activation::leaky_relu}, rng);
  g.dec = nn::Network::glorot(w.dec, {Activation::leaky_relu}, rng);
  g.head = nn::Network::glorot(w.head, {Activation::tanh}, rng);
  return g;
}

Eigen::Index FlatGenerator::param_count() const {
  return embed_table.size() + label_weight.size() + label_bias.size() + latent_weight.size() +
         latent_bias.size() + enc1.param_count() + enc2.param_count() + dec.param_count() +
         head.param_count();
}

nn::Vector FlatGenerator::parameters() const {
  nn::Vector out(param_count());
  Eigen::Index k = 0;
  append(out, k, embed_table);
  append(out, k, label_weight);
  append(out, k, label_bias);
  append(out, k, latent_weight);
  append(out, k, latent_bias);
  for (const nn::Network* net : {&enc1, &enc2, &dec, &head}) append(out, k, net->flatten());
  return out;
}

void FlatGenerator::set_parameters(const nn::Vector& params) {
  if (params.size() != param_count())
    throw std::invalid_argument("generator expects " + std::to_string(param_count()) +
                                " parameters, got " + std::to_string(params.size()));
  Eigen::Index k = 0;
  extract(params, k, embed_table);
  extract(params, k, label_weight);
  extract(params, k, label_bias);
  extract(params, k, latent_weight);
  extract(params, k, latent_bias);
  for (nn::Network* net : {&enc1, &enc2, &dec, &head}) {
    net->unflatten(params.segment(k, net->param_count()));
    k += net->param_count();
  }
}

nn::Matrix FlatGenerator::assemble_input(const nn::Matrix& images, std::span<const int> targets,
                                         const nn::Matrix& latents, nn::Matrix* embeds) const {
  const Eigen::Index batch = images.rows();
  if (images.cols() != shape_.image_size())
    throw std::invalid_argument("generator: image width " + std::to_string(images.cols()) +
                                ", expected " + std::to_string(shape_.image_size()));
  if (static_cast<Eigen::Index>(targets.size()) != batch || latents.rows() != batch)
    throw std::invalid_argument("generator: images, targets and latents disagree on batch size");
  if (latents.cols() != shape_.latent_dim)
    throw std::invalid_argument("generator: latent width " + std::to_string(latents.cols()) +
                                ", expected " + std::to_string(shape_.latent_dim));
  check_targets(targets, shape_.classes);

  nn::Matrix e(batch, shape_.embed_dim);
  for (Eigen::Index i = 0; i < batch; ++i) e.row(i) = embed_table.row(targets[static_cast<std::size_t>(i)]);
  nn::Matrix label_map = e * label_weight.transpose();
  label_map.rowwise() += label_bias.transpose();
  nn::Matrix latent_map = latents * latent_weight.transpose();
  latent_map.rowwise() += latent_bias.transpose();

  nn::Matrix input(batch, images.cols() + 2 * shape_.plane_size());
  input << images, label_map, latent_map;
  if (embeds) *embeds = std::move(e);
  return input;
}

FlatGenerator::Trace FlatGenerator::forward(const nn::Matrix& images, std::span<const int> targets,
                                            const nn::Matrix& latents) const {
  Trace tr;
  const nn::Matrix input = assemble_input(images, targets, latents, &tr.embeds);
  tr.latents = latents;
  tr.targets.assign(targets.begin(), targets.end());
  tr.enc1 = nn::forward_trace(enc1, input);
  tr.enc2 = nn::forward_trace(enc2, tr.enc1.output);
  tr.dec = nn::forward_trace(dec, tr.enc2.output);
  if (shape_.use_skip) {
    nn::Matrix head_in(input.rows(), 2 * Eigen::Index{shape_.encoder_width});
    head_in << tr.dec.output, tr.enc1.output;
    tr.head = nn::forward_trace(head, head_in);
  } else {
    tr.head = nn::forward_trace(head, tr.dec.output);
  }
  tr.raw = tr.head.output;
  return tr;
}

nn::Vector FlatGenerator::backward(const Trace& tr, const nn::Matrix& raw_grad) const {
  const Eigen::Index width = shape_.encoder_width;
  const auto head_bw = nn::backward(head, tr.head, raw_grad);
  nn::Matrix g_dec = head_bw.input_grad.leftCols(width);
  const auto dec_bw = nn::backward(dec, tr.dec, g_dec);
  const auto enc2_bw = nn::backward(enc2, tr.enc2, dec_bw.input_grad);
  nn::Matrix g_h1 = enc2_bw.input_grad;
  if (shape_.use_skip) g_h1 += head_bw.input_grad.rightCols(width);
  const auto enc1_bw = nn::backward(enc1, tr.enc1, g_h1);

  const Eigen::Index img = shape_.image_size();
  const Eigen::Index hw = shape_.plane_size();
  const nn::Matrix g_label = enc1_bw.input_grad.middleCols(img, hw);
  const nn::Matrix g_latent = enc1_bw.input_grad.middleCols(img + hw, hw);

  nn::Matrix g_label_weight = g_label.transpose() * tr.embeds;
  nn::Vector g_label_bias = g_label.colwise().sum().transpose();
  nn::Matrix g_latent_weight = g_latent.transpose() * tr.latents;
  nn::Vector g_latent_bias = g_latent.colwise().sum().transpose();
  const nn::Matrix g_embeds = g_label * label_weight;
  nn::Matrix g_table = nn::Matrix::Zero(embed_table.rows(), embed_table.cols());
  for (std::size_t i = 0; i < tr.targets.size(); ++i)
    g_table.row(tr.targets[i]) += g_embeds.row(static_cast<Eigen::Index>(i));

  nn::Vector out(param_count());
  Eigen::Index k = 0;
  append(out, k, g_table);
  append(out, k, g_label_weight);
  append(out, k, g_label_bias);
  append(out, k, g_latent_weight);
  append(out, k, g_latent_bias);
  append(out, k, enc1_bw.grads.flatten());
  append(out, k, enc2_bw.grads.flatten());
  append(out, k, dec_bw.grads.flatten());
  append(out, k, head_bw.grads.flatten());
  return out;
}

void FlatGenerator::write(std::ostream& os, double epsilon) const {
  std::ostringstream manifest;
  manifest.precision(17);
  manifest << "flat-generator K=" << shape_.classes << " C=" << shape_.channels
           << " H=" << shape_.height << " W=" << shape_.width << " D_C=" << shape_.embed_dim
           << " D_L=" << shape_.latent_dim << " eps=" << epsilon
           << " skip=" << (shape_.use_skip ? 1 : 0) << "\n";
  os << manifest.str();
  io::write_block(os, embed_table);
  io::write_block(os, label_weight);
  io::write_block(os, label_bias);
  io::write_block(os, latent_weight);
  io::write_block(os, latent_bias);
  for (const nn::Network* net : {&enc1, &enc2, &dec, &head}) io::write_network(os, *net);
}

FlatGenerator FlatGenerator::read(std::istream& is, double* epsilon) {
  std::string line;
  if (!std::getline(is, line) || line.rfind("flat-generator ", 0) != 0)
    throw std::runtime_error("not a generator checkpoint: missing manifest line");
  GeneratorShape s;
  double eps = 0;
  int skip = 1;
  if (std::sscanf(line.c_str(), "flat-generator K=%d C=%d H=%d W=%d D_C=%d D_L=%d eps=%lf skip=%d",
                  &s.classes, &s.channels, &s.height, &s.width, &s.embed_dim, &s.latent_dim, &eps,
                  &skip) != 8)
    throw std::runtime_error("malformed generator manifest: " + line);
  s.use_skip = skip != 0;
  FlatGenerator g;
  g.embed_table = io::read_block(is);
  g.label_weight = io::read_block(is);
  g.label_bias = io::read_block(is);
  g.latent_weight = io::read_block(is);
  g.latent_bias = io::read_block(is);
  g.enc1 = io::read_network(is);
  g.enc2 = io::read_network(is);
  g.dec = io::read_network(is);
  g.head = io::read_network(is);
  s.encoder_width = static_cast<int>(g.enc1.out_width());
  s.bottleneck_width = static_cast<int>(g.enc2.out_width());
  g.shape_ = s;
  if (g.embed_table.rows() != s.classes || g.embed_table.cols() != s.embed_dim ||
      g.label_weight.rows() != s.plane_size() || g.latent_weight.cols() != s.latent_dim ||
      g.head.out_width() != s.image_size())
    throw std::runtime_error("generator checkpoint blocks disagree with the manifest");
  if (epsilon) *epsilon = eps;
  return g;
}

// ---- Losses -----------------------------------------------------------------

Generated flat_generate(const FlatGenerator& gen, const nn::Matrix& images,
                        std::span<const int> targets, const nn::Matrix& latents,
                        const AttackConfig& cfg) {
  const nn::Matrix z = cfg.use_latent ? latents : nn::Matrix::Zero(latents.rows(), latents.cols());
  const auto tr = gen.forward(images, targets, z);
  Generated out;
  out.deltas = cfg.epsilon * tr.raw;
  out.poisoned = (images + out.deltas).cwiseMax(0.0).cwiseMin(1.0);
  return out;
}

nn::Matrix sample_latents(Eigen::Index batch, int latent_dim, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  nn::Matrix z(batch, latent_dim);
  for (Eigen::Index i = 0; i < batch; ++i)
    for (Eigen::Index j = 0; j < latent_dim; ++j) z(i, j) = normal(rng);
  return z;
}

std::vector<int> sample_targets(std::span<const int> labels, int classes, const AttackConfig& cfg,
                                Rng& rng) {
  std::vector<int> targets(labels.size(), cfg.fixed_target);
  if (!cfg.multi_target) return targets;
  if (classes < 2) throw std::invalid_argument("multi-target sampling needs at least 2 classes");
  std::uniform_int_distribution<int> pick(0, classes - 1);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    int t = pick(rng);
    while (t == labels[i]) t = pick(rng);
    targets[i] = t;
  }
  return targets;
}

namespace {

bool paired(std::span<const int> targets, bool per_class, Eigen::Index i, Eigen::Index j) {
  return !per_class || targets[static_cast<std::size_t>(i)] == targets[static_cast<std::size_t>(j)];
}

}  // namespace

double diversity_loss(const nn::Matrix& deltas) { return diversity_loss(deltas, {}, false); }

double diversity_loss(const nn::Matrix& deltas, std::span<const int> targets, bool per_class) {
  const Eigen::Index b = deltas.rows();
  if (b == 0) return 0.0;
  double sum = 0;
  for (Eigen::Index i = 0; i < b; ++i)
    for (Eigen::Index j = i + 1; j < b; ++j)
      if (paired(targets, per_class, i, j)) sum += (deltas.row(i) - deltas.row(j)).norm();
  return -2.0 * sum / static_cast<double>(b * b);
}

nn::Matrix diversity_loss_grad(const nn::Matrix& deltas, std::span<const int> targets,
                               bool per_class) {
  const Eigen::Index b = deltas.rows();
  nn::Matrix g = nn::Matrix::Zero(b, deltas.cols());
  if (b == 0) return g;
  // Each unordered pair appears twice in the ordered sum.
  const double scale = -2.0 / static_cast<double>(b * b);
  for (Eigen::Index i = 0; i < b; ++i)
    for (Eigen::Index j = i + 1; j < b; ++j) {
      if (!paired(targets, per_class, i, j)) continue;
      const nn::Vector diff = (deltas.row(i) - deltas.row(j)).transpose();
      const double d = diff.norm();
      if (d == 0) continue;
      g.row(i) += (scale / d) * diff.transpose();
      g.row(j) -= (scale / d) * diff.transpose();
    }
  return g;
}

double stealth_loss(const nn::Matrix& deltas) {
  if (deltas.rows() == 0) return 0.0;
  return deltas.rowwise().squaredNorm().sum() / static_cast<double>(deltas.rows());
}

TotalLoss flat_total_loss(const nn::Network& model, const FlatGenerator& gen,
                          const nn::Matrix& images, std::span<const int> labels,
                          std::span<const int> targets, const nn::Matrix& latents,
                          const AttackConfig& cfg) {
  const Eigen::Index b = images.rows();
  if (static_cast<Eigen::Index>(labels.size()) != b || static_cast<Eigen::Index>(targets.size()) != b)
    throw std::invalid_argument("flat_total_loss: labels/targets do not match the batch");
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (targets[i] == labels[i])
      throw std::invalid_argument("flat_total_loss: target equals the true label at row " +
                                  std::to_string(i));

  const nn::Matrix z = cfg.use_latent ? latents : nn::Matrix::Zero(latents.rows(), latents.cols());
  const auto tr = gen.forward(images, targets, z);
  TotalLoss out;
  out.deltas = cfg.epsilon * tr.raw;
  const nn::Matrix shifted = images + out.deltas;
  out.poisoned = shifted.cwiseMax(0.0).cwiseMin(1.0);

  const auto model_tr = nn::forward_trace(model, out.poisoned);
  const std::vector<int> tvec(targets.begin(), targets.end());
  const auto ce = nn::cross_entropy(model_tr.output, tvec);
  const auto model_bw = nn::backward(model, model_tr, ce.grad);

  out.attack = ce.loss;
  out.stealth = stealth_loss(out.deltas);
  out.diversity = diversity_loss(out.deltas, targets, cfg.diversity_per_class);
  out.total = out.attack + cfg.lambda_stealth * out.stealth + cfg.lambda_div * out.diversity;

  // Clamping passes gradient only where the shifted pixel stayed in range.
  const nn::Matrix in_range = shifted.unaryExpr([](double v) { return (v >= 0.0 && v <= 1.0) ? 1.0 : 0.0; });
  nn::Matrix g_delta = model_bw.input_grad.cwiseProduct(in_range);
  if (b > 0) g_delta += (cfg.lambda_stealth * 2.0 / static_cast<double>(b)) * out.deltas;
  if (cfg.lambda_div != 0)
    g_delta += cfg.lambda_div * diversity_loss_grad(out.deltas, targets, cfg.diversity_per_class);
  out.grad = gen.backward(tr, cfg.epsilon * g_delta);
  return out;
}

EpochStats flat_train_epoch(const nn::Network& model, FlatGenerator& gen, nn::OptimState& optim,
                            const data::Dataset& client, const AttackConfig& cfg, int batch_size,
                            Rng& rng) {
  if (client.size() == 0) throw std::invalid_argument("flat_train_epoch: empty client dataset");
  if (batch_size < 1) throw std::invalid_argument("flat_train_epoch: batch_size must be >= 1");
  std::vector<std::size_t> order(static_cast<std::size_t>(client.size()));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);

  EpochStats stats;
  for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<std::size_t> rows;
    for (std::size_t i = start; i < end; ++i)
      if (cfg.multi_target || client.labels[order[i]] != cfg.fixed_target) rows.push_back(order[i]);
    if (rows.empty()) continue;

    const data::Dataset batch = client.subset(rows);
    const auto targets = sample_targets(batch.labels, client.classes, cfg, rng);
    const nn::Matrix z = sample_latents(batch.size(), cfg.latent_dim, rng);
    const auto loss = flat_total_loss(model, gen, batch.images, batch.labels, targets, z, cfg);

    stats.max_abs_delta = std::max(stats.max_abs_delta, loss.deltas.cwiseAbs().maxCoeff());
    nn::Vector params = gen.parameters();
    nn::optimizer_step<double>(optim, params, loss.grad);
    gen.set_parameters(params);

    stats.total += loss.total;
    stats.attack += loss.attack;
    stats.stealth += loss.stealth;
    stats.diversity += loss.diversity;
    ++stats.batches;
  }
  if (stats.batches > 0) {
    const double n = stats.batches;
    stats.total /= n;
    stats.attack /= n;
    stats.stealth /= n;
    stats.diversity /= n;
  }
  return stats;
}

PoisonedBatch poison_batch(const Attack& attack, const data::Dataset& ds, const nn::Matrix& images,
                           std::span<const int> labels, Rng& rng) {
  PoisonedBatch out;
  out.inputs = images;
  out.targets.assign(labels.begin(), labels.end());
  out.poisoned.assign(labels.size(), false);
  if (images.rows() == 0) return out;
  const auto& cfg = attack.cfg;

  switch (cfg.kind) {
    case AttackKind::none: return out;
    case AttackKind::badnets:
    case AttackKind::blended:
      for (Eigen::Index i = 0; i < images.rows(); ++i) {
        const nn::Vector x = images.row(i).transpose();
        out.inputs.row(i) = (cfg.kind == AttackKind::badnets
                                 ? badnets_apply(x, ds.channels, ds.height, ds.width, cfg.patch_side)
                                 : blended_apply(x, attack.pattern, cfg.blend_alpha))
                                .transpose();
        out.targets[static_cast<std::size_t>(i)] = cfg.fixed_target;
        out.poisoned[static_cast<std::size_t>(i)] = true;
      }
      return out;
    case AttackKind::flat: break;
  }

  if (!attack.generator) throw std::invalid_argument("poison_batch: FLAT attack without a generator");
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (cfg.multi_target || labels[i] != cfg.fixed_target) rows.push_back(i);
  if (rows.empty()) return out;

  nn::Matrix sub(static_cast<Eigen::Index>(rows.size()), images.cols());
  std::vector<int> sub_labels;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    sub.row(static_cast<Eigen::Index>(r)) = images.row(static_cast<Eigen::Index>(rows[r]));
    sub_labels.push_back(labels[rows[r]]);
  }
  const auto targets = sample_targets(sub_labels, ds.classes, cfg, rng);
  const nn::Matrix z = sample_latents(sub.rows(), cfg.latent_dim, rng);
  const auto gen = flat_generate(*attack.generator, sub, targets, z, cfg);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    out.inputs.row(static_cast<Eigen::Index>(rows[r])) = gen.poisoned.row(static_cast<Eigen::Index>(r));
    out.targets[rows[r]] = targets[r];
    out.poisoned[rows[r]] = true;
  }
  return out;
}

}  // namespace flat::attacks
