#pragma once

// Multi-task network: one shared rectified layer feeding a linear head per
// task, trained jointly against the weighted, scaled sum of per-task losses
//   L_t = sum_i w_i * s_i * L_i.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "mtl/errors.hpp"
#include "mtl/nncore.hpp"
#include "mtl/rng.hpp"
#include "mtl/types.hpp"

namespace mtl {

enum class TaskKind { Multiclass, Multilabel, Regression };

std::string to_string(TaskKind kind);
TaskKind task_kind_from_string(const std::string& s);

struct TaskSpec {
  std::string name;
  TaskKind kind = TaskKind::Multiclass;
  int output_dim = 1;  // K_i; 1 for regression
  double weight = 1.0;  // w_i
  double scale = 1.0;   // s_i
  std::vector<double> class_weights;  // multiclass only; empty = uniform
};

inline void validate_specs(std::span<const TaskSpec> specs) {
  if (specs.empty()) {
    throw std::invalid_argument("task spec list is empty");
  }
  for (const TaskSpec& spec : specs) {
    if (spec.output_dim < 1) {
      throw std::invalid_argument("task '" + spec.name + "': output_dim < 1");
    }
    if (spec.kind == TaskKind::Regression && spec.output_dim != 1) {
      throw std::invalid_argument("task '" + spec.name +
                                  "': regression requires output_dim = 1");
    }
    if (spec.weight < 0.0) {
      throw std::invalid_argument("task '" + spec.name + "': weight < 0");
    }
    if (spec.scale <= 0.0) {
      throw std::invalid_argument("task '" + spec.name + "': scale <= 0");
    }
    if (!spec.class_weights.empty() &&
        static_cast<int>(spec.class_weights.size()) != spec.output_dim) {
      throw std::invalid_argument("task '" + spec.name +
                                  "': class weight count != output_dim");
    }
  }
}

template <class S>
struct MultiTaskModel {
  DenseLayer<S> shared;                // D -> H
  std::vector<DenseLayer<S>> heads;    // H -> K_i
  std::vector<TaskSpec> task_specs;

  Index input_dim() const { return shared.in_dim(); }
  Index hidden_dim() const { return shared.out_dim(); }
  std::size_t n_tasks() const { return heads.size(); }

  std::int64_t parameter_count() const {
    std::int64_t n = shared.weights.size() + shared.bias.size();
    for (const auto& head : heads) {
      n += head.weights.size() + head.bias.size();
    }
    return n;
  }
};

namespace detail {

// Scaled-uniform init in [-a, a], a = sqrt(6 / (fan_in + fan_out)); biases
// stay zero. Each component draws from its own substream keyed by name, so a
// model built without some task matches the remaining components bit-for-bit.
template <class S>
void init_layer(DenseLayer<S>& layer, Rng& rng) {
  const double bound =
      std::sqrt(6.0 / static_cast<double>(layer.in_dim() + layer.out_dim()));
  S* data = layer.weights.data();
  for (Index i = 0; i < layer.weights.size(); ++i) {
    data[i] = static_cast<S>(rng.uniform(-bound, bound));
  }
  layer.bias.setZero();
}

}  // namespace detail

template <class S>
MultiTaskModel<S> build_model(Index input_dim, Index hidden_dim,
                              std::vector<TaskSpec> specs,
                              std::uint64_t seed) {
  if (input_dim < 1 || hidden_dim < 1) {
    throw std::invalid_argument("build_model: dimensions must be >= 1");
  }
  validate_specs(specs);

  MultiTaskModel<S> model;
  model.shared = DenseLayer<S>(hidden_dim, input_dim);
  Rng shared_rng(sub_seed(seed, "shared"));
  detail::init_layer(model.shared, shared_rng);

  model.heads.reserve(specs.size());
  for (const TaskSpec& spec : specs) {
    DenseLayer<S> head(spec.output_dim, hidden_dim);
    Rng head_rng(sub_seed(seed, "head:" + spec.name));
    detail::init_layer(head, head_rng);
    model.heads.push_back(std::move(head));
  }
  model.task_specs = std::move(specs);
  return model;
}

template <class S>
struct ForwardResult {
  Mat<S> shared_pre;   // B x H, before the rectifier
  Mat<S> shared_act;   // B x H
  std::vector<Mat<S>> head_out;  // B x K_i
};

// The trunk is computed exactly once; every head consumes the same
// activations.
template <class S>
ForwardResult<S> forward_all_tasks(const MultiTaskModel<S>& model,
                                   const Mat<S>& x) {
  ForwardResult<S> fwd;
  fwd.shared_pre = dense_forward(model.shared, x);
  fwd.shared_act = relu(fwd.shared_pre);
  fwd.head_out.reserve(model.heads.size());
  for (const auto& head : model.heads) {
    fwd.head_out.push_back(dense_forward(head, fwd.shared_act));
  }
  return fwd;
}

template <class S>
struct TaskLoss {
  S raw = S(0);      // L_i, mean over the rows that carry a label
  Mat<S> grad;       // d L_i / d head_out, zero rows where unlabeled
  Index n_valid = 0;
};

template <class S>
struct LossBreakdown {
  std::vector<S> per_task_raw;       // L_i
  std::vector<S> per_task_weighted;  // w_i * s_i * L_i
  S total = S(0);
};

namespace detail {

inline std::vector<Index> valid_rows(const std::vector<std::uint8_t>& mask,
                                     Index batch) {
  std::vector<Index> rows;
  if (mask.empty()) {
    rows.resize(static_cast<std::size_t>(batch));
    std::iota(rows.begin(), rows.end(), Index(0));
    return rows;
  }
  if (static_cast<Index>(mask.size()) != batch) {
    throw std::invalid_argument("batch mask length != batch size");
  }
  for (Index b = 0; b < batch; ++b) {
    if (mask[static_cast<std::size_t>(b)]) rows.push_back(b);
  }
  return rows;
}

}  // namespace detail

// Loss and logit-gradient for one task. Rows without a label contribute
// nothing; the mean runs over labeled rows only.
template <class S>
TaskLoss<S> task_loss(const TaskSpec& spec, const Mat<S>& head_out,
                      const TargetBlock<S>& targets,
                      const std::vector<std::uint8_t>& mask) {
  const Index batch = head_out.rows();
  const std::vector<Index> rows = detail::valid_rows(mask, batch);
  TaskLoss<S> out;
  out.grad = Mat<S>::Zero(batch, head_out.cols());
  out.n_valid = static_cast<Index>(rows.size());
  if (rows.empty()) {
    return out;
  }

  Mat<S> gathered(out.n_valid, head_out.cols());
  for (Index r = 0; r < out.n_valid; ++r) {
    gathered.row(r) = head_out.row(rows[static_cast<std::size_t>(r)]);
  }

  LossResult<S> res{S(0), {}};
  switch (spec.kind) {
    case TaskKind::Multiclass: {
      const auto& all_targets = std::get<IndexVec>(targets);
      if (all_targets.size() != batch) {
        throw std::invalid_argument("task '" + spec.name +
                                    "': target rows != batch size");
      }
      IndexVec t(out.n_valid);
      for (Index r = 0; r < out.n_valid; ++r) {
        t[r] = all_targets[rows[static_cast<std::size_t>(r)]];
      }
      Vec<S> cw;
      if (spec.class_weights.empty()) {
        cw = Vec<S>::Ones(head_out.cols());
      } else {
        cw.resize(head_out.cols());
        for (Index k = 0; k < cw.size(); ++k) {
          cw[k] = static_cast<S>(spec.class_weights[static_cast<std::size_t>(k)]);
        }
      }
      res = softmax_xent(gathered, t, cw);
      break;
    }
    case TaskKind::Multilabel: {
      const auto& all_targets = std::get<Mat<S>>(targets);
      if (all_targets.rows() != batch || all_targets.cols() != head_out.cols()) {
        throw std::invalid_argument("task '" + spec.name +
                                    "': multi-hot shape mismatch");
      }
      Mat<S> t(out.n_valid, head_out.cols());
      for (Index r = 0; r < out.n_valid; ++r) {
        t.row(r) = all_targets.row(rows[static_cast<std::size_t>(r)]);
      }
      res = sigmoid_bce(gathered, t);
      break;
    }
    case TaskKind::Regression: {
      const auto& all_targets = std::get<Vec<S>>(targets);
      if (all_targets.size() != batch) {
        throw std::invalid_argument("task '" + spec.name +
                                    "': target rows != batch size");
      }
      Vec<S> t(out.n_valid);
      for (Index r = 0; r < out.n_valid; ++r) {
        t[r] = all_targets[rows[static_cast<std::size_t>(r)]];
      }
      res = mae_loss(Vec<S>(gathered.col(0)), t);
      break;
    }
  }

  out.raw = res.loss;
  for (Index r = 0; r < out.n_valid; ++r) {
    out.grad.row(rows[static_cast<std::size_t>(r)]) = res.grad.row(r);
  }
  return out;
}

template <class S>
std::vector<TaskLoss<S>> compute_task_losses(const MultiTaskModel<S>& model,
                                             const ForwardResult<S>& fwd,
                                             const Batch<S>& batch) {
  if (batch.targets_per_task.size() != model.n_tasks()) {
    throw std::invalid_argument("batch target count != task count");
  }
  static const std::vector<std::uint8_t> kAllValid;
  std::vector<TaskLoss<S>> losses;
  losses.reserve(model.n_tasks());
  for (std::size_t i = 0; i < model.n_tasks(); ++i) {
    const auto& mask = i < batch.valid_per_task.size()
                           ? batch.valid_per_task[i]
                           : kAllValid;
    losses.push_back(task_loss(model.task_specs[i], fwd.head_out[i],
                               batch.targets_per_task[i], mask));
  }
  return losses;
}

// Sums w_i*s_i*L_i and rescales each task gradient by w_i*s_i in place, so a
// zero-weight task injects exactly nothing downstream.
template <class S>
LossBreakdown<S> combined_loss(std::vector<TaskLoss<S>>& task_losses,
                               std::span<const TaskSpec> specs) {
  if (task_losses.size() != specs.size()) {
    throw std::invalid_argument("combined_loss: entry count != spec count");
  }
  LossBreakdown<S> breakdown;
  breakdown.per_task_raw.reserve(specs.size());
  breakdown.per_task_weighted.reserve(specs.size());
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const S ws = static_cast<S>(specs[i].weight * specs[i].scale);
    breakdown.per_task_raw.push_back(task_losses[i].raw);
    breakdown.per_task_weighted.push_back(ws * task_losses[i].raw);
    breakdown.total += breakdown.per_task_weighted.back();
    task_losses[i].grad *= ws;
  }
  return breakdown;
}

template <class S>
GradientBundle<S> zero_gradients(const MultiTaskModel<S>& model) {
  GradientBundle<S> g;
  g.layers.push_back(LayerGrads<S>::zeros_like(model.shared));
  for (const auto& head : model.heads) {
    g.layers.push_back(LayerGrads<S>::zeros_like(head));
  }
  return g;
}

// Full backward pass for one batch. Head gradients flow only from their own
// task; the shared layer accumulates over all tasks.
template <class S>
GradientBundle<S> backward_pass(const MultiTaskModel<S>& model,
                                const Mat<S>& inputs,
                                const ForwardResult<S>& fwd,
                                const std::vector<TaskLoss<S>>& scaled_losses) {
  GradientBundle<S> grads = zero_gradients(model);
  Mat<S> d_shared_act = Mat<S>::Zero(inputs.rows(), model.hidden_dim());
  for (std::size_t i = 0; i < model.n_tasks(); ++i) {
    const Mat<S>& d_out = scaled_losses[i].grad;
    grads.layers[i + 1].weights.noalias() = d_out.transpose() * fwd.shared_act;
    grads.layers[i + 1].bias = d_out.colwise().sum();
    d_shared_act.noalias() += d_out * model.heads[i].weights;
  }
  Mat<S> d_pre = d_shared_act.cwiseProduct(relu_grad(fwd.shared_pre));
  grads.layers[0].weights.noalias() = d_pre.transpose() * inputs;
  grads.layers[0].bias = d_pre.colwise().sum();
  return grads;
}

template <class S>
struct SgdState {
  std::vector<LayerGrads<S>> velocity;

  static SgdState zeros_like(const MultiTaskModel<S>& model) {
    SgdState state;
    state.velocity.push_back(LayerGrads<S>::zeros_like(model.shared));
    for (const auto& head : model.heads) {
      state.velocity.push_back(LayerGrads<S>::zeros_like(head));
    }
    return state;
  }
};

// One training step; returns the pre-update loss breakdown.
template <class S>
LossBreakdown<S> backward_update(MultiTaskModel<S>& model,
                                 const Batch<S>& batch, SgdState<S>& state,
                                 S lr, S momentum) {
  const ForwardResult<S> fwd = forward_all_tasks(model, batch.inputs);
  std::vector<TaskLoss<S>> losses = compute_task_losses(model, fwd, batch);
  LossBreakdown<S> breakdown = combined_loss(losses, model.task_specs);
  const GradientBundle<S> grads =
      backward_pass(model, batch.inputs, fwd, losses);
  optimizer_step(model.shared, grads.layers[0], state.velocity[0], lr,
                 momentum);
  for (std::size_t i = 0; i < model.heads.size(); ++i) {
    optimizer_step(model.heads[i], grads.layers[i + 1], state.velocity[i + 1],
                   lr, momentum);
  }
  return breakdown;
}

// Flat coefficient views in a fixed order (shared W, shared b, then each
// head's W and b), for the gradient checker.
template <class S>
std::vector<std::span<S>> parameter_views(MultiTaskModel<S>& model) {
  std::vector<std::span<S>> views;
  views.emplace_back(model.shared.weights.data(),
                     static_cast<std::size_t>(model.shared.weights.size()));
  views.emplace_back(model.shared.bias.data(),
                     static_cast<std::size_t>(model.shared.bias.size()));
  for (auto& head : model.heads) {
    views.emplace_back(head.weights.data(),
                       static_cast<std::size_t>(head.weights.size()));
    views.emplace_back(head.bias.data(),
                       static_cast<std::size_t>(head.bias.size()));
  }
  return views;
}

template <class S>
std::vector<std::span<const S>> gradient_views(const GradientBundle<S>& g) {
  std::vector<std::span<const S>> views;
  for (const auto& layer : g.layers) {
    views.emplace_back(layer.weights.data(),
                       static_cast<std::size_t>(layer.weights.size()));
    views.emplace_back(layer.bias.data(),
                       static_cast<std::size_t>(layer.bias.size()));
  }
  return views;
}

struct CalibrationOptions {
  bool round_scales_to_power_of_ten = true;
};

struct CalibrationResult {
  std::vector<double> weights;
  std::vector<double> scales;
};

// Task-weight and scale calibration from per-task validation losses.
// Classification keeps s = 1; each regression loss is rescaled toward the
// median classification loss (nearest power of ten). Weights then equalize
// the scaled losses at the median and are normalized to sum to n.
CalibrationResult calibrate_weights_scales(std::span<const TaskSpec> specs,
                                           std::span<const double> val_losses,
                                           const CalibrationOptions& options = {});

// Multiply-accumulate count for a forward pass over the first
// `n_tasks_evaluated` heads; the trunk is counted once.
template <class S>
std::int64_t flop_count(const MultiTaskModel<S>& model, int n_tasks_evaluated,
                        int batch_size) {
  if (n_tasks_evaluated < 0 ||
      n_tasks_evaluated > static_cast<int>(model.n_tasks())) {
    throw std::invalid_argument("flop_count: head count out of range");
  }
  std::int64_t per_sample =
      static_cast<std::int64_t>(model.input_dim()) * model.hidden_dim();
  for (int i = 0; i < n_tasks_evaluated; ++i) {
    per_sample += static_cast<std::int64_t>(model.hidden_dim()) *
                  model.heads[static_cast<std::size_t>(i)].out_dim();
  }
  return per_sample * batch_size;
}

// Same count restricted to an explicit head subset (e.g. one single-task run).
template <class S>
std::int64_t flop_count(const MultiTaskModel<S>& model,
                        std::span<const int> head_indices, int batch_size) {
  std::int64_t per_sample =
      static_cast<std::int64_t>(model.input_dim()) * model.hidden_dim();
  for (int i : head_indices) {
    if (i < 0 || i >= static_cast<int>(model.n_tasks())) {
      throw std::invalid_argument("flop_count: head index out of range");
    }
    per_sample += static_cast<std::int64_t>(model.hidden_dim()) *
                  model.heads[static_cast<std::size_t>(i)].out_dim();
  }
  return per_sample * batch_size;
}

// Checkpoint container: "OMTL" magic, u32 version, dims, float32 parameter
// payload, JSON task-spec trailer. Round-trips bit-exactly.
void save_model(const MultiTaskModel<float>& model,
                const std::filesystem::path& path);
MultiTaskModel<float> load_model(const std::filesystem::path& path);

}  // namespace mtl
