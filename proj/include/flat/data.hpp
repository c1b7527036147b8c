#pragma once

#include "flat/nn.hpp"
#include "flat/rng.hpp"

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace flat::data {

// N images of shape (C, H, W) stored one per row, channel-major, pixels in [0,1].
struct Dataset {
  nn::Matrix images;
  std::vector<int> labels;
  int classes = 0;
  int channels = 1;
  int height = 0;
  int width = 0;

  Eigen::Index size() const { return images.rows(); }
  Eigen::Index pixels() const { return Eigen::Index{channels} * height * width; }

  Dataset subset(std::span<const std::size_t> idx) const;
  void validate() const;
};

class IdxError : public std::runtime_error {
 public:
  IdxError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

// IDX image (magic 0x00000803) and label (0x00000801) streams; pixels / 255.
// `classes` of 0 means max label + 1.
Dataset load_idx(std::span<const std::uint8_t> image_bytes,
                 std::span<const std::uint8_t> label_bytes, int classes = 0);
Dataset load_idx_files(const std::string& image_path, const std::string& label_path,
                       int classes = 0);

// Inverse of load_idx, quantising pixels to round(255 * v).
std::vector<std::uint8_t> encode_idx_images(const Dataset& ds);
std::vector<std::uint8_t> encode_idx_labels(const Dataset& ds);

// Mean-pools single- or multi-channel images by an integer factor.
Dataset downsample(const Dataset& ds, int factor);

Dataset make_synthetic(int classes, int per_class, int side, std::uint64_t seed);

struct Partition {
  std::vector<std::vector<std::size_t>> assignment;
  double alpha = 0;
  int redraws = 0;
};

Partition dirichlet_partition(const Dataset& ds, int n_clients, double alpha, std::uint64_t seed);

// Gini coefficient of a set of non-negative counts (0 = perfectly equal).
double gini(std::span<const double> values);

}  // namespace flat::data
