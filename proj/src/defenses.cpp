#include "flat/defenses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace flat::defenses {

const char* to_string(RuleKind kind) {
  switch (kind) {
    case RuleKind::fedavg: return "fedavg";
    case RuleKind::krum: return "krum";
    case RuleKind::multi_krum: return "multi_krum";
    case RuleKind::median: return "median";
    case RuleKind::trimmed_mean: return "trimmed_mean";
    case RuleKind::rfa: return "rfa";
    case RuleKind::flame: return "flame";
    case RuleKind::rflbat: return "rflbat";
  }
  return "?";
}

RuleKind rule_kind_from_string(const std::string& name) {
  for (auto k : {RuleKind::fedavg, RuleKind::krum, RuleKind::multi_krum, RuleKind::median,
                 RuleKind::trimmed_mean, RuleKind::rfa, RuleKind::flame, RuleKind::rflbat})
    if (name == to_string(k)) return k;
  throw std::invalid_argument("unknown aggregation rule '" + name + "'");
}

void AggregationRule::validate() const {
  if (f_bound < 0) throw std::invalid_argument("defense.f_bound must be >= 0");
  if (multi_m < 1) throw std::invalid_argument("defense.multi_m must be >= 1");
  if (!(beta >= 0 && beta < 0.5)) throw std::invalid_argument("defense.beta must lie in [0,0.5)");
  if (rfa_iters < 1) throw std::invalid_argument("defense.rfa_iters must be >= 1");
  if (!(rfa_smoothing > 0)) throw std::invalid_argument("defense.rfa_smoothing must be > 0");
  if (!(rfa_tol > 0)) throw std::invalid_argument("defense.rfa_tol must be > 0");
  if (!(flame_noise_factor >= 0)) throw std::invalid_argument("defense.flame_noise_factor must be >= 0");
  if (rflbat_components < 1) throw std::invalid_argument("defense.rflbat_components must be >= 1");
}

namespace {

Eigen::Index check_updates(std::span<const ClientUpdate> updates, std::size_t min_count,
                           const char* rule) {
  if (updates.size() < min_count)
    throw std::invalid_argument(std::string(rule) + " needs at least " + std::to_string(min_count) +
                                " updates, got " + std::to_string(updates.size()));
  const Eigen::Index dim = updates.front().delta.size();
  for (const auto& u : updates) {
    if (u.delta.size() != dim)
      throw std::invalid_argument(std::string(rule) + ": update dimensions disagree");
    if (!u.delta.allFinite())
      throw std::invalid_argument(std::string(rule) + ": non-finite update from client " +
                                  std::to_string(u.client_id));
    if (!(u.n_samples >= 1))
      throw std::invalid_argument(std::string(rule) + ": client " + std::to_string(u.client_id) +
                                  " reports n_samples < 1");
  }
  return dim;
}

nn::Matrix stack(std::span<const ClientUpdate> updates) {
  nn::Matrix m(static_cast<Eigen::Index>(updates.size()), updates.front().delta.size());
  for (std::size_t i = 0; i < updates.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = updates[i].delta.transpose();
  return m;
}

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : (v[n / 2 - 1] + v[n / 2]) / 2.0;
}

}  // namespace

nn::Vector fedavg(std::span<const ClientUpdate> updates) {
  const Eigen::Index dim = check_updates(updates, 1, "fedavg");
  nn::Vector sum = nn::Vector::Zero(dim);
  double weight = 0;
  for (const auto& u : updates) {
    sum += u.n_samples * u.delta;
    weight += u.n_samples;
  }
  return sum / weight;
}

std::vector<double> krum_scores(std::span<const ClientUpdate> updates, int f_bound) {
  const std::size_t n = updates.size();
  if (f_bound < 0 || n < 2 * static_cast<std::size_t>(f_bound) + 3)
    throw std::invalid_argument("krum with f=" + std::to_string(f_bound) + " needs n >= " +
                                std::to_string(2 * f_bound + 3) + " updates, got " +
                                std::to_string(n));
  check_updates(updates, 1, "krum");
  const std::size_t neighbours = n - static_cast<std::size_t>(f_bound) - 2;
  std::vector<double> scores(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> d;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) d.push_back((updates[i].delta - updates[j].delta).squaredNorm());
    std::sort(d.begin(), d.end());
    scores[i] = std::accumulate(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(neighbours), 0.0);
  }
  return scores;
}

nn::Vector krum(std::span<const ClientUpdate> updates, int f_bound, int multi_m) {
  const auto scores = krum_scores(updates, f_bound);
  if (multi_m < 1 || static_cast<std::size_t>(multi_m) > updates.size())
    throw std::invalid_argument("krum: multi_m must lie in [1, n]");
  std::vector<std::size_t> order(updates.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] < scores[b];
    return updates[a].client_id < updates[b].client_id;
  });
  nn::Vector sum = nn::Vector::Zero(updates.front().delta.size());
  for (int k = 0; k < multi_m; ++k) sum += updates[order[static_cast<std::size_t>(k)]].delta;
  return multi_m == 1 ? sum : nn::Vector(sum / multi_m);
}

nn::Vector coord_median(std::span<const ClientUpdate> updates) {
  const Eigen::Index dim = check_updates(updates, 1, "coord_median");
  nn::Vector out(dim);
  std::vector<double> column(updates.size());
  for (Eigen::Index c = 0; c < dim; ++c) {
    for (std::size_t i = 0; i < updates.size(); ++i) column[i] = updates[i].delta[c];
    out[c] = median_of(column);
  }
  return out;
}

nn::Vector trimmed_mean(std::span<const ClientUpdate> updates, double beta) {
  const Eigen::Index dim = check_updates(updates, 1, "trimmed_mean");
  const std::size_t n = updates.size();
  if (!(beta >= 0)) throw std::invalid_argument("trimmed_mean: beta must be >= 0");
  const auto k = static_cast<std::size_t>(std::floor(beta * static_cast<double>(n)));
  if (2 * k >= n)
    throw std::invalid_argument("trimmed_mean: trimming " + std::to_string(k) +
                                " from each side leaves nothing of " + std::to_string(n));
  nn::Vector out(dim);
  std::vector<double> column(n);
  for (Eigen::Index c = 0; c < dim; ++c) {
    for (std::size_t i = 0; i < n; ++i) column[i] = updates[i].delta[c];
    std::sort(column.begin(), column.end());
    double sum = 0;
    for (std::size_t i = k; i < n - k; ++i) sum += column[i];
    out[c] = sum / static_cast<double>(n - 2 * k);
  }
  return out;
}

double rfa_objective(std::span<const ClientUpdate> updates, const nn::Vector& point, double smoothing) {
  double total = 0;
  for (const auto& u : updates) total += u.n_samples * std::max(smoothing, (u.delta - point).norm());
  return total;
}

RfaTrace geometric_median_rfa(std::span<const ClientUpdate> updates, int max_iters, double smoothing,
                              double tol) {
  check_updates(updates, 1, "rfa");
  RfaTrace tr;
  tr.median = fedavg(updates);
  tr.objective.push_back(rfa_objective(updates, tr.median, smoothing));
  for (int it = 0; it < max_iters; ++it) {
    nn::Vector num = nn::Vector::Zero(tr.median.size());
    double den = 0;
    for (const auto& u : updates) {
      const double w = u.n_samples / std::max(smoothing, (u.delta - tr.median).norm());
      num += w * u.delta;
      den += w;
    }
    nn::Vector next = num / den;
    const double obj = rfa_objective(updates, next, smoothing);
    // Inside the smoothing radius the Weiszfeld map is no longer a strict
    // majoriser step; stop rather than accept an uphill move.
    if (obj > tr.objective.back()) break;
    const double step = (next - tr.median).norm();
    tr.median = std::move(next);
    tr.objective.push_back(obj);
    tr.iterations = it + 1;
    if (step < tol) break;
  }
  return tr;
}

std::vector<std::size_t> majority_cluster(const nn::Matrix& dist, std::size_t majority) {
  const auto n = static_cast<std::size_t>(dist.rows());
  std::vector<std::vector<std::size_t>> clusters(n);
  for (std::size_t i = 0; i < n; ++i) clusters[i] = {i};
  auto largest = [&]() -> const std::vector<std::size_t>* {
    const std::vector<std::size_t>* best = nullptr;
    for (const auto& c : clusters)
      if (c.size() >= majority && (!best || c.size() > best->size())) best = &c;
    return best;
  };
  while (clusters.size() > 1 && !largest()) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t ba = 0, bb = 1;
    for (std::size_t a = 0; a < clusters.size(); ++a)
      for (std::size_t b = a + 1; b < clusters.size(); ++b) {
        double sum = 0;
        for (auto i : clusters[a])
          for (auto j : clusters[b]) sum += dist(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
        const double avg = sum / static_cast<double>(clusters[a].size() * clusters[b].size());
        if (avg < best) {
          best = avg;
          ba = a;
          bb = b;
        }
      }
    clusters[ba].insert(clusters[ba].end(), clusters[bb].begin(), clusters[bb].end());
    clusters.erase(clusters.begin() + static_cast<std::ptrdiff_t>(bb));
  }
  // A single remaining cluster always satisfies the cut; the loop ends there
  // at the latest.
  const auto* chosen = largest();
  std::vector<std::size_t> out = chosen ? *chosen : clusters.front();
  std::sort(out.begin(), out.end());
  return out;
}

FlameResult flame(std::span<const ClientUpdate> updates, double noise_factor, Rng& rng) {
  const Eigen::Index dim = check_updates(updates, 3, "flame");
  const std::size_t n = updates.size();
  nn::Matrix dist = nn::Matrix::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double ni = updates[i].delta.norm();
      const double nj = updates[j].delta.norm();
      const double cos = (ni > 0 && nj > 0) ? updates[i].delta.dot(updates[j].delta) / (ni * nj) : 0.0;
      const auto a = static_cast<Eigen::Index>(i), b = static_cast<Eigen::Index>(j);
      dist(a, b) = dist(b, a) = 1.0 - cos;
    }

  FlameResult out;
  out.admitted = majority_cluster(dist, n / 2 + 1);
  std::vector<double> norms;
  for (auto i : out.admitted) norms.push_back(updates[i].delta.norm());
  out.clip_norm = median_of(norms);

  nn::Vector sum = nn::Vector::Zero(dim);
  for (std::size_t k = 0; k < out.admitted.size(); ++k) {
    const double norm = norms[k];
    const double scale = norm > out.clip_norm ? out.clip_norm / norm : 1.0;
    sum += scale * updates[out.admitted[k]].delta;
  }
  out.pre_noise = sum / static_cast<double>(out.admitted.size());
  out.aggregate = out.pre_noise;
  const double sigma = noise_factor * out.clip_norm;
  if (sigma > 0) {
    std::normal_distribution<double> noise(0.0, sigma);
    for (Eigen::Index c = 0; c < dim; ++c) out.aggregate[c] += noise(rng);
  }
  return out;
}

nn::Matrix principal_components(const nn::Matrix& data, int k, int steps, double tol) {
  const Eigen::Index n = data.rows();
  const Eigen::Index dim = data.cols();
  k = static_cast<int>(std::min<Eigen::Index>(k, dim));
  const nn::Matrix centred = data.rowwise() - data.colwise().mean();
  nn::Matrix comps = nn::Matrix::Zero(dim, k);
  for (int c = 0; c < k; ++c) {
    auto deflate = [&](nn::Vector& v) {
      for (int p = 0; p < c; ++p) v -= comps.col(p).dot(v) * comps.col(p);
    };
    // Deterministic start: the largest-norm centred row, orthogonalised.
    nn::Vector v = nn::Vector::Zero(dim);
    if (n > 0) {
      Eigen::Index best = 0;
      centred.rowwise().squaredNorm().maxCoeff(&best);
      v = centred.row(best).transpose();
    }
    deflate(v);
    if (v.norm() < 1e-300) {
      v = nn::Vector::Zero(dim);
      v[c % dim] = 1.0;
      deflate(v);
    }
    if (v.norm() > 0) v.normalize();
    for (int s = 0; s < steps; ++s) {
      nn::Vector next = centred.transpose() * (centred * v);
      deflate(next);
      const double norm = next.norm();
      if (norm < 1e-300) break;
      next /= norm;
      if (next.dot(v) < 0) next = -next;
      const double change = (next - v).norm();
      v = std::move(next);
      if (change < tol) break;
    }
    comps.col(c) = v;
  }
  return comps;
}

namespace {

// Lloyd's 2-means on rows of `pts`; returns labels and inertia.
std::pair<std::vector<int>, double> two_means(const nn::Matrix& pts, std::size_t first,
                                              std::size_t second) {
  const Eigen::Index n = pts.rows();
  nn::Matrix centres(2, pts.cols());
  centres.row(0) = pts.row(static_cast<Eigen::Index>(first));
  centres.row(1) = pts.row(static_cast<Eigen::Index>(second));
  std::vector<int> labels(static_cast<std::size_t>(n), -1);
  for (int iter = 0; iter < 100; ++iter) {
    bool changed = false;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double d0 = (pts.row(i) - centres.row(0)).squaredNorm();
      const double d1 = (pts.row(i) - centres.row(1)).squaredNorm();
      const int l = d1 < d0 ? 1 : 0;
      if (labels[static_cast<std::size_t>(i)] != l) {
        labels[static_cast<std::size_t>(i)] = l;
        changed = true;
      }
    }
    if (!changed) break;
    for (int c = 0; c < 2; ++c) {
      nn::Vector sum = nn::Vector::Zero(pts.cols());
      int count = 0;
      for (Eigen::Index i = 0; i < n; ++i)
        if (labels[static_cast<std::size_t>(i)] == c) {
          sum += pts.row(i).transpose();
          ++count;
        }
      if (count > 0) centres.row(c) = (sum / count).transpose();
    }
  }
  double inertia = 0;
  for (Eigen::Index i = 0; i < n; ++i)
    inertia += (pts.row(i) - centres.row(labels[static_cast<std::size_t>(i)])).squaredNorm();
  return {labels, inertia};
}

}  // namespace

RflbatResult rflbat(std::span<const ClientUpdate> updates, int components, Rng& rng) {
  check_updates(updates, 4, "rflbat");
  const std::size_t n = updates.size();
  const nn::Matrix data = stack(updates);
  RflbatResult out;
  out.components = principal_components(data, components);
  out.projected = (data.rowwise() - data.colwise().mean()) * out.components;

  std::vector<int> best_labels(n, 0);
  double best_inertia = std::numeric_limits<double>::infinity();
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  for (int restart = 0; restart < 10; ++restart) {
    const std::size_t a = pick(rng);
    std::size_t b = pick(rng);
    if (n > 1)
      while (b == a) b = pick(rng);
    auto [labels, inertia] = two_means(out.projected, a, b);
    if (inertia < best_inertia) {
      best_inertia = inertia;
      best_labels = std::move(labels);
    }
  }

  // Outlyingness of each update: summed distance to every other update in the
  // projected space. The cluster whose members are on average less outlying is kept.
  std::vector<double> outlying(n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      outlying[i] += (out.projected.row(static_cast<Eigen::Index>(i)) -
                      out.projected.row(static_cast<Eigen::Index>(j)))
                         .norm();
  double score[2] = {0, 0};
  std::size_t count[2] = {0, 0};
  for (std::size_t i = 0; i < n; ++i) {
    score[best_labels[i]] += outlying[i];
    ++count[best_labels[i]];
  }
  if (count[0] == 0 || count[1] == 0) {
    out.kept.resize(n);
    std::iota(out.kept.begin(), out.kept.end(), 0);
  } else {
    const int keep = score[1] / static_cast<double>(count[1]) < score[0] / static_cast<double>(count[0]) ? 1 : 0;
    for (std::size_t i = 0; i < n; ++i)
      if (best_labels[i] == keep) out.kept.push_back(i);
  }
  std::vector<ClientUpdate> kept;
  for (auto i : out.kept) kept.push_back(updates[i]);
  out.aggregate = fedavg(kept);
  return out;
}

nn::Vector aggregate(const AggregationRule& rule, std::span<const ClientUpdate> updates, Rng& rng) {
  switch (rule.kind) {
    case RuleKind::fedavg: return fedavg(updates);
    case RuleKind::krum: return krum(updates, rule.f_bound, 1);
    case RuleKind::multi_krum: return krum(updates, rule.f_bound, rule.multi_m);
    case RuleKind::median: return coord_median(updates);
    case RuleKind::trimmed_mean: return trimmed_mean(updates, rule.beta);
    case RuleKind::rfa:
      return geometric_median_rfa(updates, rule.rfa_iters, rule.rfa_smoothing, rule.rfa_tol).median;
    case RuleKind::flame: return flame(updates, rule.flame_noise_factor, rng).aggregate;
    case RuleKind::rflbat: return rflbat(updates, rule.rflbat_components, rng).aggregate;
  }
  throw std::logic_error("unhandled aggregation rule");
}

}  // namespace flat::defenses
