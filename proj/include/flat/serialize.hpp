#pragma once

// Binary parameter streams: big-endian u32 shape manifest followed by the
// parameters as little-endian IEEE-754 doubles.

#include "flat/nn.hpp"

#include <cstdint>
#include <istream>
#include <ostream>

namespace flat::io {

void write_u32_be(std::ostream& os, std::uint32_t v);
std::uint32_t read_u32_be(std::istream& is);
void write_f64_le(std::ostream& os, double v);
double read_f64_le(std::istream& is);

// Network stream: u32 layer count L, L+1 u32 widths, L u32 activation codes,
// then flatten() order doubles.
void write_network(std::ostream& os, const nn::Network& net);
nn::Network read_network(std::istream& is);

// Dense block: u32 rows, u32 cols, then row-major doubles.
void write_block(std::ostream& os, const nn::Matrix& m);
nn::Matrix read_block(std::istream& is);

}  // namespace flat::io
