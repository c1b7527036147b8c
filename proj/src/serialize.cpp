#include "flat/serialize.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <stdexcept>
#include <string>

namespace flat::io {

namespace {

void require(std::istream& is, const char* what) {
  if (!is) throw std::runtime_error(std::string("truncated parameter stream while reading ") + what);
}

}  // namespace

void write_u32_be(std::ostream& os, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>((v >> 24) & 0xFF), static_cast<char>((v >> 16) & 0xFF),
                              static_cast<char>((v >> 8) & 0xFF), static_cast<char>(v & 0xFF)};
  os.write(b.data(), 4);
}

std::uint32_t read_u32_be(std::istream& is) {
  std::array<unsigned char, 4> b{};
  is.read(reinterpret_cast<char*>(b.data()), 4);
  require(is, "u32");
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) |
         std::uint32_t{b[3]};
}

void write_f64_le(std::ostream& os, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  std::array<char, 8> b{};
  for (int i = 0; i < 8; ++i) b[static_cast<std::size_t>(i)] = static_cast<char>((bits >> (8 * i)) & 0xFF);
  os.write(b.data(), 8);
}

double read_f64_le(std::istream& is) {
  std::array<unsigned char, 8> b{};
  is.read(reinterpret_cast<char*>(b.data()), 8);
  require(is, "f64");
  std::uint64_t bits = 0;
  for (int i = 7; i >= 0; --i) bits = (bits << 8) | b[static_cast<std::size_t>(i)];
  return std::bit_cast<double>(bits);
}

void write_network(std::ostream& os, const nn::Network& net) {
  const auto& layers = net.layers();
  write_u32_be(os, static_cast<std::uint32_t>(layers.size()));
  if (layers.empty()) return;
  write_u32_be(os, static_cast<std::uint32_t>(layers.front().in_width()));
  for (const auto& l : layers) write_u32_be(os, static_cast<std::uint32_t>(l.out_width()));
  for (const auto& l : layers) write_u32_be(os, static_cast<std::uint32_t>(l.act));
  const nn::Vector p = net.flatten();
  for (Eigen::Index i = 0; i < p.size(); ++i) write_f64_le(os, p[i]);
}

nn::Network read_network(std::istream& is) {
  const std::uint32_t n_layers = read_u32_be(is);
  if (n_layers == 0) return {};
  if (n_layers > 4096) throw std::runtime_error("parameter stream claims " + std::to_string(n_layers) + " layers");
  std::vector<Eigen::Index> widths;
  for (std::uint32_t i = 0; i <= n_layers; ++i) widths.push_back(read_u32_be(is));
  std::vector<nn::Activation> acts;
  for (std::uint32_t i = 0; i < n_layers; ++i) {
    const std::uint32_t code = read_u32_be(is);
    if (code > 3) throw std::runtime_error("unknown activation code " + std::to_string(code));
    acts.push_back(static_cast<nn::Activation>(code));
  }
  nn::Network net(widths, acts);
  nn::Vector p(net.param_count());
  for (Eigen::Index i = 0; i < p.size(); ++i) p[i] = read_f64_le(is);
  net.unflatten(p);
  return net;
}

void write_block(std::ostream& os, const nn::Matrix& m) {
  write_u32_be(os, static_cast<std::uint32_t>(m.rows()));
  write_u32_be(os, static_cast<std::uint32_t>(m.cols()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) write_f64_le(os, m(r, c));
}

nn::Matrix read_block(std::istream& is) {
  const std::uint32_t rows = read_u32_be(is);
  const std::uint32_t cols = read_u32_be(is);
  if (std::uint64_t{rows} * cols > (std::uint64_t{1} << 32))
    throw std::runtime_error("parameter block too large");
  nn::Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = read_f64_le(is);
  return m;
}

}  // namespace flat::io
