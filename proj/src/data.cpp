#include "flat/data.hpp"

#include <algorithm>
#include <cstdio>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>
#include <numeric>

namespace flat::data {

Dataset Dataset::subset(std::span<const std::size_t> idx) const {
  Dataset out;
  out.classes = classes;
  out.channels = channels;
  out.height = height;
  out.width = width;
  out.images.resize(static_cast<Eigen::Index>(idx.size()), images.cols());
  out.labels.reserve(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    out.images.row(static_cast<Eigen::Index>(i)) = images.row(static_cast<Eigen::Index>(idx[i]));
    out.labels.push_back(labels[idx[i]]);
  }
  return out;
}

void Dataset::validate() const {
  if (images.rows() != static_cast<Eigen::Index>(labels.size()))
    throw std::invalid_argument("dataset has " + std::to_string(images.rows()) + " images and " +
                                std::to_string(labels.size()) + " labels");
  if (images.rows() > 0 && images.cols() != pixels())
    throw std::invalid_argument("dataset image width does not match C*H*W");
  if (images.size() > 0 && (images.minCoeff() < 0.0 || images.maxCoeff() > 1.0))
    throw std::invalid_argument("dataset pixel outside [0,1]");
  for (int y : labels)
    if (y < 0 || y >= classes) throw std::invalid_argument("dataset label out of range");
}

namespace {

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes, const char* name)
      : bytes_(bytes), name_(name) {}

  std::uint32_t u32() {
    need(4, "header field");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v = (v << 8) | bytes_[pos_++];
    return v;
  }
  std::span<const std::uint8_t> take(std::size_t n) {
    need(n, "payload");
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n)
      throw IdxError(std::string(name_) + " stream truncated in " + what + ": need " +
                         std::to_string(n) + " bytes, have " + std::to_string(bytes_.size() - pos_),
                     pos_);
  }

  std::span<const std::uint8_t> bytes_;
  const char* name_;
  std::size_t pos_ = 0;
};

constexpr std::uint32_t kImageMagic = 0x00000803;
constexpr std::uint32_t kLabelMagic = 0x00000801;

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void push_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>((v >> s) & 0xFF));
}

}  // namespace

Dataset load_idx(std::span<const std::uint8_t> image_bytes,
                 std::span<const std::uint8_t> label_bytes, int classes) {
  ByteReader img(image_bytes, "image");
  const std::uint32_t img_magic = img.u32();
  if (img_magic != kImageMagic) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "0x%08X", img_magic);
    throw IdxError(std::string("image stream has magic ") + buf + ", expected 0x00000803", 0);
  }
  const std::uint32_t n = img.u32();
  const std::uint32_t rows = img.u32();
  const std::uint32_t cols = img.u32();
  if (rows == 0 || cols == 0) throw IdxError("image stream has a zero dimension", 8);

  ByteReader lab(label_bytes, "label");
  const std::uint32_t lab_magic = lab.u32();
  if (lab_magic != kLabelMagic) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "0x%08X", lab_magic);
    throw IdxError(std::string("label stream has magic ") + buf + ", expected 0x00000801", 0);
  }
  const std::uint32_t n_labels = lab.u32();
  if (n_labels != n)
    throw IdxError("image stream holds " + std::to_string(n) + " images but label stream holds " +
                       std::to_string(n_labels) + " labels",
                   4);

  const std::size_t per_image = std::size_t{rows} * cols;
  const std::size_t payload_start = img.pos();
  if ((image_bytes.size() - payload_start) / per_image < n)
    throw IdxError("image stream truncated: payload needs " + std::to_string(per_image * n) +
                       " bytes, have " + std::to_string(image_bytes.size() - payload_start),
                   image_bytes.size());
  auto pixels = img.take(per_image * n);
  auto label_payload = lab.take(n);

  Dataset ds;
  ds.channels = 1;
  ds.height = static_cast<int>(rows);
  ds.width = static_cast<int>(cols);
  ds.images.resize(n, static_cast<Eigen::Index>(per_image));
  for (std::uint32_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < per_image; ++p)
      ds.images(i, static_cast<Eigen::Index>(p)) = pixels[i * per_image + p] / 255.0;
  int max_label = -1;
  ds.labels.reserve(n);
  for (auto b : label_payload) {
    ds.labels.push_back(b);
    max_label = std::max(max_label, int{b});
  }
  ds.classes = classes > 0 ? classes : max_label + 1;
  if (max_label >= ds.classes)
    throw IdxError("label " + std::to_string(max_label) + " exceeds class count " +
                       std::to_string(ds.classes),
                   8);
  return ds;
}

Dataset load_idx_files(const std::string& image_path, const std::string& label_path, int classes) {
  const auto img = read_file(image_path);
  const auto lab = read_file(label_path);
  return load_idx(img, lab, classes);
}

std::vector<std::uint8_t> encode_idx_images(const Dataset& ds) {
  if (ds.channels != 1) throw std::invalid_argument("IDX export supports single-channel images");
  std::vector<std::uint8_t> out;
  push_u32(out, kImageMagic);
  push_u32(out, static_cast<std::uint32_t>(ds.size()));
  push_u32(out, static_cast<std::uint32_t>(ds.height));
  push_u32(out, static_cast<std::uint32_t>(ds.width));
  for (Eigen::Index i = 0; i < ds.images.rows(); ++i)
    for (Eigen::Index p = 0; p < ds.images.cols(); ++p)
      out.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(ds.images(i, p), 0.0, 1.0) * 255.0)));
  return out;
}

std::vector<std::uint8_t> encode_idx_labels(const Dataset& ds) {
  std::vector<std::uint8_t> out;
  push_u32(out, kLabelMagic);
  push_u32(out, static_cast<std::uint32_t>(ds.labels.size()));
  for (int y : ds.labels) {
    if (y < 0 || y > 255) throw std::invalid_argument("IDX labels must fit in a byte");
    out.push_back(static_cast<std::uint8_t>(y));
  }
  return out;
}

Dataset downsample(const Dataset& ds, int factor) {
  if (factor <= 1) return ds;
  if (ds.height % factor != 0 || ds.width % factor != 0)
    throw std::invalid_argument("downsample factor must divide the image side");
  Dataset out;
  out.classes = ds.classes;
  out.channels = ds.channels;
  out.height = ds.height / factor;
  out.width = ds.width / factor;
  out.labels = ds.labels;
  out.images = nn::Matrix::Zero(ds.size(), out.pixels());
  const double scale = 1.0 / (factor * factor);
  for (Eigen::Index i = 0; i < ds.size(); ++i)
    for (int c = 0; c < ds.channels; ++c)
      for (int y = 0; y < ds.height; ++y)
        for (int x = 0; x < ds.width; ++x)
          out.images(i, (c * out.height + y / factor) * out.width + x / factor) +=
              scale * ds.images(i, (c * ds.height + y) * ds.width + x);
  return out;
}

Dataset make_synthetic(int classes, int per_class, int side, std::uint64_t seed) {
  if (classes < 2) throw std::invalid_argument("make_synthetic needs at least 2 classes");
  if (side < 8) throw std::invalid_argument("make_synthetic needs side >= 8");
  if (per_class < 0) throw std::invalid_argument("per_class must be non-negative");

  Dataset ds;
  ds.classes = classes;
  ds.channels = 1;
  ds.height = side;
  ds.width = side;
  const Eigen::Index pixels = Eigen::Index{side} * side;

  // Class k: a Gaussian bump placed on a circle at angle 2*pi*k/K plus a
  // stripe whose frequency and orientation depend on k.
  nn::Matrix base(classes, pixels);
  const double centre = (side - 1) / 2.0;
  const double radius = 0.3 * side;
  const double spread = side / 6.0;
  for (int k = 0; k < classes; ++k) {
    const double angle = 2.0 * std::numbers::pi * k / classes;
    const double bx = centre + radius * std::cos(angle);
    const double by = centre + radius * std::sin(angle);
    const double freq = 1.0 + k % 4;
    const bool vertical = (k / 4) % 2 == 1;
    for (int y = 0; y < side; ++y)
      for (int x = 0; x < side; ++x) {
        const double d2 = (x - bx) * (x - bx) + (y - by) * (y - by);
        const double bump = std::exp(-d2 / (2 * spread * spread));
        const double u = vertical ? y : x;
        const double stripe = 0.5 + 0.5 * std::sin(2 * std::numbers::pi * freq * u / side + k);
        base(k, y * side + x) = 0.1 + 0.55 * bump + 0.25 * stripe;
      }
  }

  Rng rng = make_rng(seed, {stream::kData});
  std::normal_distribution<double> noise(0.0, 0.1);
  ds.images.resize(Eigen::Index{classes} * per_class, pixels);
  ds.labels.reserve(static_cast<std::size_t>(classes) * per_class);
  Eigen::Index row = 0;
  for (int k = 0; k < classes; ++k)
    for (int i = 0; i < per_class; ++i, ++row) {
      for (Eigen::Index p = 0; p < pixels; ++p)
        ds.images(row, p) = std::clamp(base(k, p) + noise(rng), 0.0, 1.0);
      ds.labels.push_back(k);
    }
  return ds;
}

Partition dirichlet_partition(const Dataset& ds, int n_clients, double alpha, std::uint64_t seed) {
  if (n_clients < 1) throw std::invalid_argument("dirichlet_partition needs n_clients >= 1");
  if (!(alpha > 0)) throw std::invalid_argument("dirichlet_partition needs alpha > 0");

  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(std::max(ds.classes, 1)));
  for (std::size_t i = 0; i < ds.labels.size(); ++i)
    by_class[static_cast<std::size_t>(ds.labels[i])].push_back(i);

  constexpr int kMaxRedraws = 100;
  for (int attempt = 0; attempt <= kMaxRedraws; ++attempt) {
    Rng rng = make_rng(seed + static_cast<std::uint64_t>(attempt), {stream::kData, 1});
    std::gamma_distribution<double> gamma(alpha, 1.0);
    Partition part;
    part.alpha = alpha;
    part.redraws = attempt;
    part.assignment.assign(static_cast<std::size_t>(n_clients), {});
    for (auto idx : by_class) {
      std::shuffle(idx.begin(), idx.end(), rng);
      std::vector<double> p(static_cast<std::size_t>(n_clients));
      double total = 0;
      for (auto& v : p) total += (v = gamma(rng));
      // All draws underflowing to zero is possible for tiny alpha.
      if (!(total > 0)) {
        std::fill(p.begin(), p.end(), 0.0);
        p[std::uniform_int_distribution<std::size_t>(0, p.size() - 1)(rng)] = 1.0;
        total = 1.0;
      }
      double cum = 0;
      std::size_t start = 0;
      for (std::size_t c = 0; c < p.size(); ++c) {
        cum += p[c] / total;
        const std::size_t end =
            c + 1 == p.size() ? idx.size()
                              : std::min(idx.size(), static_cast<std::size_t>(std::llround(cum * idx.size())));
        for (std::size_t j = start; j < std::max(start, end); ++j) part.assignment[c].push_back(idx[j]);
        start = std::max(start, end);
      }
    }
    const bool any_empty = std::any_of(part.assignment.begin(), part.assignment.end(),
                                       [](const auto& a) { return a.empty(); });
    if (!any_empty) {
      for (auto& a : part.assignment) std::sort(a.begin(), a.end());
      return part;
    }
  }
  throw std::runtime_error("dirichlet_partition: a client stayed empty after " +
                           std::to_string(kMaxRedraws) + " redraws (alpha=" + std::to_string(alpha) +
                           ", clients=" + std::to_string(n_clients) + ")");
}

double gini(std::span<const double> values) {
  if (values.empty()) return 0;
  std::vector<double> v(values.begin(), values.end());
  std::sort(v.begin(), v.end());
  const double total = std::accumulate(v.begin(), v.end(), 0.0);
  if (total <= 0) return 0;
  double weighted = 0;
  const auto n = static_cast<double>(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) weighted += (2.0 * (i + 1) - n - 1) * v[i];
  return weighted / (n * total);
}

}  // namespace flat::data
