#include <gtest/gtest.h>

#include "flat/cli.hpp"
#include "flat/nn.hpp"
#include "flat/rng.hpp"
#include "flat/serialize.hpp"

#include <cmath>
#include <limits>
#include <sstream>

using namespace flat;

namespace {

nn::Matrix randn(Eigen::Index r, Eigen::Index c, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  nn::Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
  return m;
}

double act_ref(double v, nn::Activation a) {
  switch (a) {
    case nn::Activation::relu: return v > 0 ? v : 0;
    case nn::Activation::leaky_relu: return v > 0 ? v : 0.2 * v;
    case nn::Activation::tanh: return std::tanh(v);
    case nn::Activation::identity: return v;
  }
  return v;
}

// Plain loops over std::vector, independent of Eigen products.
std::vector<std::vector<double>> forward_ref(const nn::Network& net, const nn::Matrix& x) {
  std::vector<std::vector<double>> rows(static_cast<std::size_t>(x.rows()));
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index j = 0; j < x.cols(); ++j) rows[i].push_back(x(i, j));
  for (const auto& layer : net.layers()) {
    for (auto& row : rows) {
      std::vector<double> next(static_cast<std::size_t>(layer.weight.rows()));
      for (Eigen::Index o = 0; o < layer.weight.rows(); ++o) {
        double s = layer.bias[o];
        for (Eigen::Index k = 0; k < layer.weight.cols(); ++k) s += layer.weight(o, k) * row[k];
        next[o] = act_ref(s, layer.act);
      }
      row = next;
    }
  }
  return rows;
}

}  // namespace

TEST(Forward, MatchesLoopOracle) {
  Rng rng(11);
  for (auto act : {nn::Activation::relu, nn::Activation::leaky_relu, nn::Activation::tanh,
                   nn::Activation::identity}) {
    auto net = nn::Network::glorot({7, 5, 4, 3}, {act, act, nn::Activation::identity}, rng);
    for (auto& l : net.layers()) l.bias = randn(l.bias.size(), 1, rng);
    const nn::Matrix x = randn(9, 7, rng);
    const auto out = nn::forward(net, x);
    const auto ref = forward_ref(net, x);
    for (Eigen::Index i = 0; i < out.rows(); ++i)
      for (Eigen::Index j = 0; j < out.cols(); ++j) EXPECT_NEAR(out(i, j), ref[i][j], 1e-12);
  }
}

TEST(Forward, HandComputedTwoByTwo) {
  nn::Network net({2, 2}, {nn::Activation::relu});
  net.layers()[0].weight << 1, -2, 0.5, 3;
  net.layers()[0].bias << 0.5, -1;
  nn::Matrix x(1, 2);
  x << 2, 1;
  // pre = [2-2+0.5, 1+3-1] = [0.5, 3]
  const auto y = nn::forward(net, x);
  EXPECT_DOUBLE_EQ(y(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(y(0, 1), 3.0);
  x << -2, 1;
  // pre = [-2-2+0.5, -1+3-1] = [-3.5, 1]
  const auto y2 = nn::forward(net, x);
  EXPECT_DOUBLE_EQ(y2(0, 0), 0.0);
  EXPECT_DOUBLE_EQ(y2(0, 1), 1.0);
}

TEST(Forward, ShapeMismatchIsDiagnosed) {
  Rng rng(1);
  const auto net = nn::Network::glorot({4, 3}, {nn::Activation::tanh}, rng);
  try {
    nn::forward(net, nn::Matrix::Zero(2, 5));
    FAIL() << "expected a shape error";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("2x5"), std::string::npos) << e.what();
  }
}

TEST(Backward, RequiresTrace) {
  Rng rng(1);
  const auto net = nn::Network::glorot({4, 3}, {nn::Activation::tanh}, rng);
  nn::ForwardTrace<double> empty;
  EXPECT_THROW(nn::backward(net, empty, nn::Matrix::Zero(1, 3)), std::logic_error);
}

TEST(CrossEntropy, MatchesDirectFormula) {
  nn::Matrix logits(2, 3);
  logits << 1, 2, 3, -1, 0, 4;
  const std::vector<int> y{0, 2};
  const auto ce = nn::cross_entropy(logits, y);
  const double l0 = -std::log(std::exp(1.0) / (std::exp(1.0) + std::exp(2.0) + std::exp(3.0)));
  const double l1 = -std::log(std::exp(4.0) / (std::exp(-1.0) + std::exp(0.0) + std::exp(4.0)));
  EXPECT_NEAR(ce.loss, 0.5 * (l0 + l1), 1e-12);
  EXPECT_NEAR(ce.grad.row(0).sum(), 0.0, 1e-12);
  EXPECT_THROW(nn::cross_entropy(logits, std::vector<int>{0, 3}), std::invalid_argument);
}

TEST(CrossEntropy, StableForHugeLogits) {
  nn::Matrix logits(1, 2);
  logits << 1000, 0;
  const auto ce = nn::cross_entropy(logits, std::vector<int>{1});
  EXPECT_NEAR(ce.loss, 1000.0, 1e-9);
  EXPECT_TRUE(ce.grad.allFinite());
}

TEST(GradCheck, EveryActivationAndGeneratorObjective) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    for (const auto& c : cli::gradient_suite(seed)) {
      EXPECT_TRUE(c.report.passed) << c.name << " seed " << seed << " rel " << c.report.max_rel_error;
      EXPECT_GT(c.report.checked, 0);
    }
  }
}

TEST(GradCheck, DetectsWrongGradient) {
  nn::Vector p(3);
  p << 0.3, -0.2, 1.1;
  nn::LossAndGrad<double> fn = [](const nn::Vector& q) {
    return std::pair<double, nn::Vector>{q.squaredNorm(), 3.0 * q};  // true gradient is 2q
  };
  const auto rep = nn::grad_check<double>(p, fn, 1e-4);
  EXPECT_FALSE(rep.passed);
  EXPECT_NEAR(rep.max_rel_error, 1.0 / 3.0, 1e-6);
}

TEST(Optimizer, SgdStep) {
  auto st = nn::OptimState::sgd(0.5);
  nn::Vector p(2), g(2);
  p << 1, 2;
  g << 0.2, -4;
  nn::optimizer_step(st, p, g);
  EXPECT_DOUBLE_EQ(p[0], 0.9);
  EXPECT_DOUBLE_EQ(p[1], 4.0);
}

TEST(Optimizer, AdamMatchesRecurrence) {
  auto st = nn::OptimState::adam(1e-2);
  nn::Vector p(2), g(2);
  p << 1, -1;
  double m0 = 0, v0 = 0, p0 = 1;
  for (int t = 1; t <= 5; ++t) {
    const double gt = 0.3 * t - 0.7;
    g << gt, 2.0;
    nn::optimizer_step(st, p, g);
    m0 = 0.9 * m0 + 0.1 * gt;
    v0 = 0.999 * v0 + 0.001 * gt * gt;
    const double mh = m0 / (1 - std::pow(0.9, t));
    const double vh = v0 / (1 - std::pow(0.999, t));
    p0 -= 1e-2 * mh / (std::sqrt(vh) + 1e-8);
    EXPECT_NEAR(p[0], p0, 1e-14);
  }
  // Constant gradient: each Adam step moves by lr.
  EXPECT_NEAR(p[1], -1 - 5e-2, 1e-9);
}

TEST(Optimizer, RejectsNonFiniteGradient) {
  auto st = nn::OptimState::adam(1e-3);
  nn::Vector p = nn::Vector::Zero(2), g(2);
  g << 1, std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(nn::optimizer_step(st, p, g), nn::NonFiniteGradient);
  EXPECT_EQ(p, nn::Vector::Zero(2));
}

TEST(Serialize, NetworkRoundTripAndLayout) {
  Rng rng(3);
  auto net = nn::Network::glorot({3, 2, 2}, {nn::Activation::leaky_relu, nn::Activation::identity}, rng);
  std::stringstream ss;
  io::write_network(ss, net);
  const std::string bytes = ss.str();
  // 4 (L) + 3*4 widths + 2*4 codes + 14 params * 8
  ASSERT_EQ(bytes.size(), 4u + 12u + 8u + 14u * 8u);
  EXPECT_EQ(bytes.substr(0, 4), std::string("\0\0\0\2", 4));
  EXPECT_EQ(bytes.substr(4, 4), std::string("\0\0\0\3", 4));
  EXPECT_EQ(bytes.substr(16, 4), std::string("\0\0\0\1", 4));  // leaky_relu
  EXPECT_EQ(bytes.substr(20, 4), std::string("\0\0\0\3", 4));  // identity
  double first;
  std::memcpy(&first, bytes.data() + 24, 8);
  EXPECT_EQ(first, net.layers()[0].weight(0, 0));
  const auto back = io::read_network(ss);
  EXPECT_TRUE(back.same_shape(net));
  EXPECT_EQ(back.flatten(), net.flatten());
}

TEST(Serialize, TruncatedStreamRejected) {
  Rng rng(3);
  const auto net = nn::Network::glorot({3, 2}, {nn::Activation::tanh}, rng);
  std::stringstream ss;
  io::write_network(ss, net);
  std::string bytes = ss.str();
  bytes.resize(bytes.size() - 3);
  std::stringstream cut(bytes);
  EXPECT_THROW(io::read_network(cut), std::runtime_error);
}

TEST(Rng, DerivedStreamsDiffer) {
  EXPECT_NE(derive_seed(1, {stream::kShuffle, 1, 0}), derive_seed(1, {stream::kShuffle, 1, 1}));
  EXPECT_NE(derive_seed(1, {stream::kShuffle, 1, 0}), derive_seed(1, {stream::kAttack, 1, 0}));
  EXPECT_EQ(derive_seed(9, {1, 2}), derive_seed(9, {1, 2}));
}
