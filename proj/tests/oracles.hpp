#pragma once

// Brute-force reference implementations shared by the unit and acceptance suites.

#include "flat/defenses.hpp"

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

namespace oracle {

using flat::Rng;
using flat::defenses::ClientUpdate;

inline std::vector<ClientUpdate> random_updates(Rng& rng, int n, int dim, bool integer_grid = false) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_int_distribution<int> small(-3, 3);
  std::uniform_int_distribution<int> weight(1, 50);
  std::vector<ClientUpdate> out;
  for (int i = 0; i < n; ++i) {
    ClientUpdate u;
    u.client_id = i;
    u.n_samples = weight(rng);
    u.delta.resize(dim);
    for (int k = 0; k < dim; ++k) u.delta[k] = integer_grid ? small(rng) : normal(rng);
    out.push_back(std::move(u));
  }
  return out;
}

// Krum by explicit loops over coordinates.
inline std::pair<std::size_t, std::vector<double>> krum_oracle(const std::vector<ClientUpdate>& u, int f) {
  const std::size_t n = u.size();
  std::vector<double> scores(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> d;
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      double s = 0;
      for (Eigen::Index k = 0; k < u[i].delta.size(); ++k)
        s += (u[i].delta[k] - u[j].delta[k]) * (u[i].delta[k] - u[j].delta[k]);
      d.push_back(s);
    }
    std::sort(d.begin(), d.end());
    double s = 0;
    for (std::size_t k = 0; k < n - f - 2; ++k) s += d[k];
    scores[i] = s;
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < n; ++i)
    if (scores[i] < scores[best] || (scores[i] == scores[best] && u[i].client_id < u[best].client_id)) best = i;
  return {best, scores};
}

inline double exact_objective(const std::vector<ClientUpdate>& u, double x, double y) {
  double s = 0;
  for (const auto& p : u) s += p.n_samples * std::hypot(p.delta[0] - x, p.delta[1] - y);
  return s;
}

// 1000 x 1000 grid over the bounding box, then repeated zoom around the best node.
inline std::pair<double, double> grid_oracle(const std::vector<ClientUpdate>& u) {
  double lo_x = 1e300, hi_x = -1e300, lo_y = 1e300, hi_y = -1e300;
  for (const auto& p : u) {
    lo_x = std::min(lo_x, p.delta[0]);
    hi_x = std::max(hi_x, p.delta[0]);
    lo_y = std::min(lo_y, p.delta[1]);
    hi_y = std::max(hi_y, p.delta[1]);
  }
  double bx = lo_x, by = lo_y;
  for (int level = 0; level < 8; ++level) {
    const int cells = level == 0 ? 1000 : 200;
    const double sx = (hi_x - lo_x) / cells, sy = (hi_y - lo_y) / cells;
    double best = 1e300;
    for (int i = 0; i <= cells; ++i)
      for (int j = 0; j <= cells; ++j) {
        const double x = lo_x + i * sx, y = lo_y + j * sy;
        const double v = exact_objective(u, x, y);
        if (v < best) {
          best = v;
          bx = x;
          by = y;
        }
      }
    lo_x = bx - 20 * sx;
    hi_x = bx + 20 * sx;
    lo_y = by - 20 * sy;
    hi_y = by + 20 * sy;
  }
  return {bx, by};
}

inline double median_coord(const std::vector<ClientUpdate>& u, Eigen::Index c) {
  std::vector<double> col;
  for (const auto& x : u) col.push_back(x.delta[c]);
  std::sort(col.begin(), col.end());
  const std::size_t n = col.size();
  return n % 2 ? col[n / 2] : (col[n / 2 - 1] + col[n / 2]) / 2;
}

inline double trimmed_coord(const std::vector<ClientUpdate>& u, Eigen::Index c, int k) {
  std::vector<double> col;
  for (const auto& x : u) col.push_back(x.delta[c]);
  std::sort(col.begin(), col.end());
  const int n = static_cast<int>(col.size());
  double s = 0;
  for (int i = k; i < n - k; ++i) s += col[static_cast<std::size_t>(i)];
  return s / (n - 2 * k);
}

}  // namespace oracle
