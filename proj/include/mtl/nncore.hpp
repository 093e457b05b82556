#pragma once

// Deterministic dense-layer math: forward/backward, the three loss families
// with analytic gradients, SGD with classical momentum, and a central-
// difference gradient checker. Everything is templated on the scalar so the
// same code path runs in float32 for training and float64 for verification.

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "mtl/types.hpp"

namespace mtl {

template <class S>
struct DenseLayer {
  Mat<S> weights;  // out x in
  Vec<S> bias;     // out

  DenseLayer() = default;
  DenseLayer(Index out, Index in)
      : weights(Mat<S>::Zero(out, in)), bias(Vec<S>::Zero(out)) {}

  Index in_dim() const { return weights.cols(); }
  Index out_dim() const { return weights.rows(); }
};

template <class S>
struct LayerGrads {
  Mat<S> weights;
  Vec<S> bias;

  static LayerGrads zeros_like(const DenseLayer<S>& layer) {
    return {Mat<S>::Zero(layer.out_dim(), layer.in_dim()),
            Vec<S>::Zero(layer.out_dim())};
  }
};

// One entry per trainable layer: index 0 is the shared trunk, then heads in
// task order. Shape-congruent with the model it was taken from.
template <class S>
struct GradientBundle {
  std::vector<LayerGrads<S>> layers;
};

// Target block for one task: class indices (multiclass), a multi-hot matrix
// (multilabel) or a real vector (regression).
template <class S>
using TargetBlock = std::variant<IndexVec, Mat<S>, Vec<S>>;

template <class S>
struct Batch {
  Mat<S> inputs;  // B x D
  std::vector<TargetBlock<S>> targets_per_task;
  // Per-task row mask; an empty entry means every row carries a label.
  std::vector<std::vector<std::uint8_t>> valid_per_task;

  Index size() const { return inputs.rows(); }
};

// y = x * W^T + b, row-wise.
template <class S>
Mat<S> dense_forward(const DenseLayer<S>& layer, const Mat<S>& x) {
  if (x.cols() != layer.in_dim()) {
    throw std::invalid_argument(
        "dense_forward: input has " + std::to_string(x.cols()) +
        " columns, layer expects " + std::to_string(layer.in_dim()));
  }
  Mat<S> y = x * layer.weights.transpose();
  y.rowwise() += layer.bias.transpose();
  return y;
}

template <class Derived>
auto relu(const Eigen::MatrixBase<Derived>& x) {
  using S = typename Derived::Scalar;
  return x.cwiseMax(S(0));
}

// Subgradient at 0 is 0.
template <class Derived>
auto relu_grad(const Eigen::MatrixBase<Derived>& pre) {
  using S = typename Derived::Scalar;
  return (pre.array() > S(0)).template cast<S>().matrix();
}

// Row-stable softmax; every row sums to 1.
template <class S>
Mat<S> softmax_rows(const Mat<S>& logits) {
  Mat<S> shifted = logits.colwise() - logits.rowwise().maxCoeff();
  Mat<S> p = shifted.array().exp().matrix();
  Vec<S> sums = p.rowwise().sum();
  return (p.array().colwise() / sums.array()).matrix();
}

template <class S>
struct LossResult {
  S loss;
  Mat<S> grad;  // same shape as the logits/predictions
};

// Class-weighted categorical cross-entropy over softmax, mean over the batch.
// loss = (1/B) * sum_b cw[t_b] * (logsumexp(z_b) - z_b[t_b])
template <class S>
LossResult<S> softmax_xent(const Mat<S>& logits, const IndexVec& targets,
                           const Vec<S>& class_weights) {
  const Index batch = logits.rows();
  const Index num_classes = logits.cols();
  if (targets.size() != batch) {
    throw std::invalid_argument("softmax_xent: target count != batch size");
  }
  if (class_weights.size() != num_classes) {
    throw std::invalid_argument("softmax_xent: class weight count != K");
  }
  if ((class_weights.array() < S(0)).any()) {
    throw std::invalid_argument("softmax_xent: negative class weight");
  }
  for (Index b = 0; b < batch; ++b) {
    if (targets[b] < 0 || targets[b] >= num_classes) {
      throw std::invalid_argument("softmax_xent: target " +
                                  std::to_string(targets[b]) +
                                  " out of range [0, " +
                                  std::to_string(num_classes) + ")");
    }
  }

  const Vec<S> row_max = logits.rowwise().maxCoeff();
  Mat<S> shifted = logits.colwise() - row_max;
  Mat<S> exps = shifted.array().exp().matrix();
  const Vec<S> sums = exps.rowwise().sum();

  S loss = S(0);
  Mat<S> grad = (exps.array().colwise() / sums.array()).matrix();
  const S inv_batch = S(1) / static_cast<S>(batch);
  for (Index b = 0; b < batch; ++b) {
    const S w = class_weights[targets[b]];
    loss += w * (std::log(sums[b]) - shifted(b, targets[b]));
    grad(b, targets[b]) -= S(1);
    grad.row(b) *= w * inv_batch;
  }
  return {loss * inv_batch, std::move(grad)};
}

// Element-wise binary cross-entropy over sigmoid, mean over B*K entries.
// Stable form: max(z,0) - z*t + log1p(exp(-|z|)).
template <class S>
LossResult<S> sigmoid_bce(const Mat<S>& logits, const Mat<S>& targets) {
  if (logits.rows() != targets.rows() || logits.cols() != targets.cols()) {
    throw std::invalid_argument("sigmoid_bce: shape mismatch");
  }
  if (!((targets.array() == S(0)) || (targets.array() == S(1))).all()) {
    throw std::invalid_argument("sigmoid_bce: targets must be 0 or 1");
  }
  const auto z = logits.array();
  const auto t = targets.array();
  const S count = static_cast<S>(logits.size());
  const S loss =
      (z.max(S(0)) - z * t + (-z.abs()).exp().log1p()).sum() / count;
  // sigma(z); the selected branch never exponentiates a positive value
  Mat<S> sigma = (z >= S(0))
                     .select(S(1) / (S(1) + (-z).exp()),
                             z.exp() / (S(1) + z.exp()))
                     .matrix();
  Mat<S> grad = (sigma.array() - t).matrix() / count;
  return {loss, std::move(grad)};
}

// Mean absolute error; subgradient at ties is 0.
template <class S>
LossResult<S> mae_loss(const Vec<S>& pred, const Vec<S>& target) {
  if (pred.size() == 0) {
    throw std::invalid_argument("mae_loss: empty input");
  }
  if (pred.size() != target.size()) {
    throw std::invalid_argument("mae_loss: length mismatch");
  }
  const Vec<S> diff = pred - target;
  const S count = static_cast<S>(pred.size());
  const S loss = diff.array().abs().sum() / count;
  Mat<S> grad = diff.array().sign().matrix() / count;
  return {loss, std::move(grad)};
}

namespace detail {

template <class S, class P>
void momentum_update(P& param, const P& grad, P& velocity, S lr, S momentum) {
  // lr = 0 is a sanctioned no-op on the parameters (the velocity still
  // accumulates), so frozen runs stay bit-identical to their initialization
  if (lr < S(0)) {
    throw std::invalid_argument("optimizer_step: lr must be >= 0");
  }
  if (momentum < S(0) || momentum >= S(1)) {
    throw std::invalid_argument("optimizer_step: momentum must be in [0, 1)");
  }
  if (param.rows() != grad.rows() || param.cols() != grad.cols()) {
    throw std::invalid_argument("optimizer_step: grad shape mismatch");
  }
  if (velocity.rows() != param.rows() || velocity.cols() != param.cols()) {
    throw std::invalid_argument("optimizer_step: velocity shape mismatch");
  }
  velocity = momentum * velocity + grad;
  param -= lr * velocity;
}

}  // namespace detail

// Classical momentum: v <- momentum*v + g; p <- p - lr*v.
template <class S>
void optimizer_step(Mat<S>& param, const Mat<S>& grad, Mat<S>& velocity, S lr,
                    S momentum) {
  detail::momentum_update(param, grad, velocity, lr, momentum);
}

template <class S>
void optimizer_step(Vec<S>& param, const Vec<S>& grad, Vec<S>& velocity, S lr,
                    S momentum) {
  detail::momentum_update(param, grad, velocity, lr, momentum);
}

template <class S>
void optimizer_step(DenseLayer<S>& layer, const LayerGrads<S>& grads,
                    LayerGrads<S>& velocity, S lr, S momentum) {
  optimizer_step(layer.weights, grads.weights, velocity.weights, lr, momentum);
  optimizer_step(layer.bias, grads.bias, velocity.bias, lr, momentum);
  if (!layer.weights.allFinite() || !layer.bias.allFinite()) {
    throw std::runtime_error("optimizer_step: non-finite parameter after update");
  }
}

// Central-difference check of an analytic gradient. `loss` must re-evaluate
// the objective at the current parameter values; `params` and `analytic` are
// parallel flat views. Returns the max over coordinates of
// |g_a - g_n| / max(1e-12, |g_a| + |g_n|).
template <class S, class LossFn>
S grad_check(LossFn&& loss, const std::vector<std::span<S>>& params,
             const std::vector<std::span<const S>>& analytic, S epsilon) {
  if (epsilon <= S(0)) {
    throw std::invalid_argument("grad_check: epsilon must be > 0");
  }
  if (params.size() != analytic.size()) {
    throw std::invalid_argument("grad_check: view count mismatch");
  }
  S worst = S(0);
  for (std::size_t a = 0; a < params.size(); ++a) {
    auto p = params[a];
    auto g = analytic[a];
    if (p.size() != g.size()) {
      throw std::invalid_argument("grad_check: view length mismatch");
    }
    for (std::size_t i = 0; i < p.size(); ++i) {
      const S saved = p[i];
      p[i] = saved + epsilon;
      const S plus = loss();
      p[i] = saved - epsilon;
      const S minus = loss();
      p[i] = saved;
      const S numeric = (plus - minus) / (S(2) * epsilon);
      const S denom =
          std::max(S(1e-12), std::abs(g[i]) + std::abs(numeric));
      worst = std::max(worst, std::abs(g[i] - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace mtl
