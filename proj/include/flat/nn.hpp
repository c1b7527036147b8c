#pragma once

// Dense multilayer perceptron with exact manual gradients.
//
// Batches are row-major in the logical sense: one sample per row, so a batch
// of B inputs of width D is an Eigen matrix with B rows and D columns.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace flat::nn {

enum class Activation : std::uint32_t { relu = 0, leaky_relu = 1, tanh = 2, identity = 3 };

inline constexpr double kLeakySlope = 0.2;

inline const char* to_string(Activation act) {
  switch (act) {
    case Activation::relu: return "relu";
    case Activation::leaky_relu: return "leaky_relu";
    case Activation::tanh: return "tanh";
    case Activation::identity: return "identity";
  }
  return "?";
}

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Derived>
auto activate(const Eigen::MatrixBase<Derived>& pre, Activation act) {
  using Scalar = typename Derived::Scalar;
  MatrixX<Scalar> out = pre;
  switch (act) {
    case Activation::relu: out = pre.cwiseMax(Scalar(0)); break;
    case Activation::leaky_relu:
      out = pre.unaryExpr([](Scalar v) { return v > Scalar(0) ? v : Scalar(kLeakySlope) * v; });
      break;
    case Activation::tanh: out = pre.array().tanh().matrix(); break;
    case Activation::identity: break;
  }
  return out;
}

// d(activation)/d(pre) evaluated elementwise; `post` is the activation output.
template <typename Scalar>
MatrixX<Scalar> activation_slope(const MatrixX<Scalar>& pre, const MatrixX<Scalar>& post,
                                 Activation act) {
  switch (act) {
    case Activation::relu:
      return pre.unaryExpr([](Scalar v) { return v > Scalar(0) ? Scalar(1) : Scalar(0); });
    case Activation::leaky_relu:
      return pre.unaryExpr(
          [](Scalar v) { return v > Scalar(0) ? Scalar(1) : Scalar(kLeakySlope); });
    case Activation::tanh: return (Scalar(1) - post.array().square()).matrix();
    case Activation::identity: break;
  }
  return MatrixX<Scalar>::Ones(pre.rows(), pre.cols());
}

template <typename Scalar>
struct Layer {
  MatrixX<Scalar> weight;  // out x in
  VectorX<Scalar> bias;    // out
  Activation act = Activation::identity;

  Eigen::Index in_width() const { return weight.cols(); }
  Eigen::Index out_width() const { return weight.rows(); }
};

template <typename Scalar>
struct BasicGradients {
  std::vector<MatrixX<Scalar>> weight;
  std::vector<VectorX<Scalar>> bias;

  bool all_finite() const {
    for (const auto& w : weight)
      if (!w.allFinite()) return false;
    for (const auto& b : bias)
      if (!b.allFinite()) return false;
    return true;
  }

  BasicGradients& operator+=(const BasicGradients& other) {
    for (std::size_t i = 0; i < weight.size(); ++i) {
      weight[i] += other.weight[i];
      bias[i] += other.bias[i];
    }
    return *this;
  }

  VectorX<Scalar> flatten() const;
};

template <typename Scalar>
class BasicNetwork {
 public:
  using Matrix = MatrixX<Scalar>;
  using Vector = VectorX<Scalar>;

  BasicNetwork() = default;

  // Layer widths w0 -> w1 -> ... -> wn with one activation per layer.
  BasicNetwork(const std::vector<Eigen::Index>& widths, const std::vector<Activation>& acts) {
    if (widths.size() < 2 || acts.size() + 1 != widths.size())
      throw std::invalid_argument("network needs n+1 widths for n activations");
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
      if (widths[i] < 1 || widths[i + 1] < 1)
        throw std::invalid_argument("layer widths must be positive");
      layers_.push_back(
          {Matrix::Zero(widths[i + 1], widths[i]), Vector::Zero(widths[i + 1]), acts[i]});
    }
  }

  // Glorot-uniform weights, zero biases.
  template <typename Rng>
  static BasicNetwork glorot(const std::vector<Eigen::Index>& widths,
                             const std::vector<Activation>& acts, Rng& rng) {
    BasicNetwork net(widths, acts);
    for (auto& layer : net.layers_) {
      const Scalar limit =
          std::sqrt(Scalar(6) / Scalar(layer.in_width() + layer.out_width()));
      std::uniform_real_distribution<double> dist(-limit, limit);
      for (Eigen::Index r = 0; r < layer.weight.rows(); ++r)
        for (Eigen::Index c = 0; c < layer.weight.cols(); ++c)
          layer.weight(r, c) = Scalar(dist(rng));
    }
    return net;
  }

  const std::vector<Layer<Scalar>>& layers() const { return layers_; }
  std::vector<Layer<Scalar>>& layers() { return layers_; }

  Eigen::Index in_width() const { return layers_.empty() ? 0 : layers_.front().in_width(); }
  Eigen::Index out_width() const { return layers_.empty() ? 0 : layers_.back().out_width(); }

  Eigen::Index param_count() const {
    Eigen::Index n = 0;
    for (const auto& l : layers_) n += l.weight.size() + l.bias.size();
    return n;
  }

  // Parameter order: per layer, weight row by row, then bias.
  Vector flatten() const {
    Vector out(param_count());
    Eigen::Index k = 0;
    for (const auto& l : layers_) {
      for (Eigen::Index r = 0; r < l.weight.rows(); ++r)
        for (Eigen::Index c = 0; c < l.weight.cols(); ++c) out[k++] = l.weight(r, c);
      for (Eigen::Index r = 0; r < l.bias.size(); ++r) out[k++] = l.bias[r];
    }
    return out;
  }

  void unflatten(const Eigen::Ref<const Vector>& params) {
    if (params.size() != param_count())
      throw std::invalid_argument("parameter vector has " + std::to_string(params.size()) +
                                  " entries, network expects " +
                                  std::to_string(param_count()));
    Eigen::Index k = 0;
    for (auto& l : layers_) {
      for (Eigen::Index r = 0; r < l.weight.rows(); ++r)
        for (Eigen::Index c = 0; c < l.weight.cols(); ++c) l.weight(r, c) = params[k++];
      for (Eigen::Index r = 0; r < l.bias.size(); ++r) l.bias[r] = params[k++];
    }
  }

  BasicGradients<Scalar> zero_gradients() const {
    BasicGradients<Scalar> g;
    for (const auto& l : layers_) {
      g.weight.push_back(Matrix::Zero(l.weight.rows(), l.weight.cols()));
      g.bias.push_back(Vector::Zero(l.bias.size()));
    }
    return g;
  }

  bool same_shape(const BasicNetwork& other) const {
    if (layers_.size() != other.layers_.size()) return false;
    for (std::size_t i = 0; i < layers_.size(); ++i)
      if (layers_[i].in_width() != other.layers_[i].in_width() ||
          layers_[i].out_width() != other.layers_[i].out_width() ||
          layers_[i].act != other.layers_[i].act)
        return false;
    return true;
  }

 private:
  std::vector<Layer<Scalar>> layers_;
};

template <typename Scalar>
VectorX<Scalar> BasicGradients<Scalar>::flatten() const {
  Eigen::Index n = 0;
  for (std::size_t i = 0; i < weight.size(); ++i) n += weight[i].size() + bias[i].size();
  VectorX<Scalar> out(n);
  Eigen::Index k = 0;
  for (std::size_t i = 0; i < weight.size(); ++i) {
    for (Eigen::Index r = 0; r < weight[i].rows(); ++r)
      for (Eigen::Index c = 0; c < weight[i].cols(); ++c) out[k++] = weight[i](r, c);
    for (Eigen::Index r = 0; r < bias[i].size(); ++r) out[k++] = bias[i][r];
  }
  return out;
}

// Intermediate values of one forward pass, consumed by backward().
template <typename Scalar>
struct ForwardTrace {
  std::vector<MatrixX<Scalar>> inputs;  // input to each layer
  std::vector<MatrixX<Scalar>> pre;     // pre-activation of each layer
  MatrixX<Scalar> output;

  bool empty() const { return inputs.empty(); }
};

template <typename Scalar>
struct BackwardResult {
  BasicGradients<Scalar> grads;
  MatrixX<Scalar> input_grad;
};

namespace detail {
inline std::string shape_str(Eigen::Index r, Eigen::Index c) {
  std::ostringstream os;
  os << r << "x" << c;
  return os.str();
}
}  // namespace detail

template <typename Scalar>
ForwardTrace<Scalar> forward_trace(const BasicNetwork<Scalar>& net,
                                   const Eigen::Ref<const MatrixX<std::type_identity_t<Scalar>>>& batch) {
  if (net.layers().empty()) throw std::invalid_argument("forward on an empty network");
  if (batch.cols() != net.in_width())
    throw std::invalid_argument("forward: batch is " + detail::shape_str(batch.rows(), batch.cols()) +
                                " but network input width is " + std::to_string(net.in_width()));
  ForwardTrace<Scalar> trace;
  MatrixX<Scalar> x = batch;
  for (const auto& layer : net.layers()) {
    MatrixX<Scalar> z = x * layer.weight.transpose();
    z.rowwise() += layer.bias.transpose();
    trace.inputs.push_back(std::move(x));
    x = activate(z, layer.act);
    trace.pre.push_back(std::move(z));
  }
  trace.output = std::move(x);
  return trace;
}

template <typename Scalar>
MatrixX<Scalar> forward(const BasicNetwork<Scalar>& net,
                        const Eigen::Ref<const MatrixX<std::type_identity_t<Scalar>>>& batch) {
  return forward_trace(net, batch).output;
}

template <typename Scalar>
BackwardResult<Scalar> backward(const BasicNetwork<Scalar>& net, const ForwardTrace<Scalar>& trace,
                                const Eigen::Ref<const MatrixX<std::type_identity_t<Scalar>>>& upstream) {
  if (trace.empty()) throw std::logic_error("backward called without a forward trace");
  if (trace.inputs.size() != net.layers().size())
    throw std::invalid_argument("forward trace does not belong to this network");
  if (upstream.rows() != trace.output.rows() || upstream.cols() != trace.output.cols())
    throw std::invalid_argument("backward: upstream gradient is " +
                                detail::shape_str(upstream.rows(), upstream.cols()) +
                                ", output is " +
                                detail::shape_str(trace.output.rows(), trace.output.cols()));
  BackwardResult<Scalar> result{net.zero_gradients(), {}};
  MatrixX<Scalar> g = upstream;
  for (std::size_t i = net.layers().size(); i-- > 0;) {
    const auto& layer = net.layers()[i];
    const MatrixX<Scalar>& post = (i + 1 < trace.inputs.size()) ? trace.inputs[i + 1] : trace.output;
    g = g.cwiseProduct(activation_slope<Scalar>(trace.pre[i], post, layer.act));
    result.grads.weight[i].noalias() = g.transpose() * trace.inputs[i];
    result.grads.bias[i] = g.colwise().sum().transpose();
    g = g * layer.weight;
  }
  result.input_grad = std::move(g);
  return result;
}

// Mean softmax cross-entropy and its gradient w.r.t. the logits.
template <typename Scalar>
struct LossGrad {
  Scalar loss = 0;
  MatrixX<Scalar> grad;
};

template <typename Derived, typename Scalar = typename Derived::Scalar>
LossGrad<Scalar> cross_entropy(const Eigen::MatrixBase<Derived>& logits,
                               const std::vector<int>& targets) {
  const Eigen::Index batch = logits.rows();
  const Eigen::Index classes = logits.cols();
  if (static_cast<Eigen::Index>(targets.size()) != batch)
    throw std::invalid_argument("cross_entropy: " + std::to_string(targets.size()) +
                                " targets for " + std::to_string(batch) + " rows");
  LossGrad<Scalar> out{Scalar(0), MatrixX<Scalar>::Zero(batch, classes)};
  if (batch == 0) return out;
  for (Eigen::Index i = 0; i < batch; ++i) {
    const int t = targets[static_cast<std::size_t>(i)];
    if (t < 0 || t >= classes)
      throw std::invalid_argument("cross_entropy: label " + std::to_string(t) + " at row " +
                                  std::to_string(i) + " outside [0," + std::to_string(classes) +
                                  ")");
    const Scalar m = logits.row(i).maxCoeff();
    const auto shifted = (logits.row(i).array() - m).eval();
    const Scalar log_sum = std::log(shifted.exp().sum());
    out.loss += log_sum - shifted(t);
    out.grad.row(i) = (shifted - log_sum).exp().matrix();
    out.grad(i, t) -= Scalar(1);
  }
  out.loss /= Scalar(batch);
  out.grad /= Scalar(batch);
  return out;
}

// Optimizers operate on flat parameter vectors so the same state type serves
// plain networks and composite models such as the trigger generator.
enum class OptimKind { sgd, adam };

template <typename Scalar>
struct BasicOptimState {
  OptimKind kind = OptimKind::sgd;
  Scalar lr = Scalar(0.1);
  Scalar beta1 = Scalar(0.9);
  Scalar beta2 = Scalar(0.999);
  Scalar eps = Scalar(1e-8);
  VectorX<Scalar> m;
  VectorX<Scalar> v;
  std::int64_t step = 0;

  static BasicOptimState sgd(Scalar lr) {
    BasicOptimState s;
    s.kind = OptimKind::sgd;
    s.lr = lr;
    return s;
  }
  static BasicOptimState adam(Scalar lr) {
    BasicOptimState s;
    s.kind = OptimKind::adam;
    s.lr = lr;
    return s;
  }
};

class NonFiniteGradient : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename Scalar>
void optimizer_step(BasicOptimState<Scalar>& state, Eigen::Ref<VectorX<std::type_identity_t<Scalar>>> params,
                    const Eigen::Ref<const VectorX<std::type_identity_t<Scalar>>>& grads) {
  if (params.size() != grads.size())
    throw std::invalid_argument("optimizer_step: " + std::to_string(grads.size()) +
                                " gradients for " + std::to_string(params.size()) + " params");
  if (!grads.allFinite()) throw NonFiniteGradient("optimizer_step: non-finite gradient rejected");
  if (state.kind == OptimKind::sgd) {
    params -= state.lr * grads;
    ++state.step;
    return;
  }
  if (state.m.size() == 0) {
    state.m = VectorX<Scalar>::Zero(params.size());
    state.v = VectorX<Scalar>::Zero(params.size());
  }
  if (state.m.size() != params.size())
    throw std::invalid_argument("optimizer_step: Adam moments sized for another model");
  ++state.step;
  state.m = state.beta1 * state.m + (Scalar(1) - state.beta1) * grads;
  state.v = state.beta2 * state.v + (Scalar(1) - state.beta2) * grads.cwiseAbs2();
  const Scalar c1 = Scalar(1) - std::pow(state.beta1, Scalar(state.step));
  const Scalar c2 = Scalar(1) - std::pow(state.beta2, Scalar(state.step));
  params.array() -=
      state.lr * (state.m.array() / c1) / ((state.v.array() / c2).sqrt() + state.eps);
}

template <typename Scalar>
void optimizer_step(BasicOptimState<Scalar>& state, BasicNetwork<Scalar>& net,
                    const BasicGradients<Scalar>& grads) {
  VectorX<Scalar> params = net.flatten();
  optimizer_step<Scalar>(state, params, grads.flatten());
  net.unflatten(params);
}

// Central finite differences over every parameter of `net` for a scalar loss.
template <typename Scalar>
struct GradCheckReport {
  Scalar max_rel_error = 0;
  Eigen::Index worst_index = -1;
  Eigen::Index checked = 0;
  bool passed = false;
};

// loss_and_grad returns the loss and the analytic flat gradient at the given parameters.
template <typename Scalar>
using LossAndGrad = std::function<std::pair<Scalar, VectorX<Scalar>>(const VectorX<Scalar>&)>;

template <typename Scalar>
GradCheckReport<Scalar> grad_check(const VectorX<Scalar>& params, const LossAndGrad<Scalar>& fn,
                                   Scalar tolerance, Scalar h = Scalar(1e-5)) {
  GradCheckReport<Scalar> report;
  const VectorX<Scalar> analytic = fn(params).second;
  VectorX<Scalar> probe = params;
  for (Eigen::Index i = 0; i < params.size(); ++i) {
    probe[i] = params[i] + h;
    const Scalar up = fn(probe).first;
    probe[i] = params[i] - h;
    const Scalar down = fn(probe).first;
    probe[i] = params[i];
    const Scalar numeric = (up - down) / (Scalar(2) * h);
    // Absolute floor keeps near-zero gradients from inflating the ratio.
    const Scalar denom = std::max({std::abs(numeric), std::abs(analytic[i]), Scalar(1e-6)});
    const Scalar rel = std::abs(numeric - analytic[i]) / denom;
    if (report.worst_index < 0 || rel > report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_index = i;
    }
    ++report.checked;
  }
  report.passed = report.max_rel_error < tolerance;
  return report;
}

template <typename Scalar>
GradCheckReport<Scalar> grad_check(const BasicNetwork<Scalar>& net,
                                   const std::function<std::pair<Scalar, BasicGradients<Scalar>>(
                                       const BasicNetwork<Scalar>&)>& loss_fn,
                                   Scalar tolerance, Scalar h = Scalar(1e-5)) {
  BasicNetwork<Scalar> scratch = net;
  LossAndGrad<Scalar> flat_fn = [&](const VectorX<Scalar>& p) {
    scratch.unflatten(p);
    auto [loss, g] = loss_fn(scratch);
    return std::pair<Scalar, VectorX<Scalar>>{loss, g.flatten()};
  };
  return grad_check<Scalar>(net.flatten(), flat_fn, tolerance, h);
}

using Matrix = MatrixX<double>;
using Vector = VectorX<double>;
using Network = BasicNetwork<double>;
using Gradients = BasicGradients<double>;
using OptimState = BasicOptimState<double>;

}  // namespace flat::nn
