#include "mtl/model.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "mtl/rng.hpp"
#include "oracles.hpp"

using namespace mtl;

namespace {

std::vector<TaskSpec> three_task_specs() {
  TaskSpec artist{"artist", TaskKind::Multiclass, 3, 1.0, 1.0, {}};
  TaskSpec material{"material", TaskKind::Multilabel, 2, 1.0, 1.0, {}};
  TaskSpec period{"period", TaskKind::Regression, 1, 1.0, 1.0, {}};
  return {artist, material, period};
}

template <class S>
Batch<S> random_three_task_batch(Index batch, Index dim, Rng& rng) {
  Batch<S> b;
  b.inputs.resize(batch, dim);
  for (Index i = 0; i < b.inputs.size(); ++i) {
    b.inputs.data()[i] = static_cast<S>(rng.normal());
  }
  IndexVec artist(batch);
  for (Index i = 0; i < batch; ++i) {
    artist[i] = static_cast<int>(rng.below(3));
  }
  Mat<S> material(batch, 2);
  for (Index i = 0; i < material.size(); ++i) {
    material.data()[i] = rng.uniform01() < 0.5 ? S(0) : S(1);
  }
  Vec<S> period(batch);
  for (Index i = 0; i < batch; ++i) {
    period[i] = static_cast<S>(rng.normal());
  }
  b.targets_per_task = {TargetBlock<S>(artist), TargetBlock<S>(material),
                        TargetBlock<S>(period)};
  return b;
}

template <class S>
S total_loss(const MultiTaskModel<S>& model, const Batch<S>& batch) {
  const ForwardResult<S> fwd = forward_all_tasks(model, batch.inputs);
  std::vector<TaskLoss<S>> losses = compute_task_losses(model, fwd, batch);
  return combined_loss(losses, model.task_specs).total;
}

template <class S>
GradientBundle<S> analytic_gradients(const MultiTaskModel<S>& model,
                                     const Batch<S>& batch) {
  const ForwardResult<S> fwd = forward_all_tasks(model, batch.inputs);
  std::vector<TaskLoss<S>> losses = compute_task_losses(model, fwd, batch);
  combined_loss(losses, model.task_specs);
  return backward_pass(model, batch.inputs, fwd, losses);
}

struct TempPath {
  std::filesystem::path path;
  explicit TempPath(const std::string& name)
      : path(std::filesystem::temp_directory_path() /
             ("mtl_test_" + std::to_string(::getpid()) + "_" + name)) {}
  ~TempPath() { std::filesystem::remove(path); }
};

}  // namespace

TEST_CASE("build_model parameter count follows the closed form") {
  // D*H + H + sum_i (H*K_i + K_i)
  const std::vector<int> ks{374, 103, 81, 1};
  std::vector<TaskSpec> specs;
  specs.push_back({"artist", TaskKind::Multiclass, ks[0], 1.0, 1.0, {}});
  specs.push_back({"type", TaskKind::Multilabel, ks[1], 1.0, 1.0, {}});
  specs.push_back({"material", TaskKind::Multilabel, ks[2], 1.0, 1.0, {}});
  specs.push_back({"period", TaskKind::Regression, ks[3], 1.0, 1.0, {}});
  const auto model = build_model<float>(2048, 6144, specs, 1);
  std::int64_t expected = 2048ll * 6144 + 6144;
  for (int k : ks) expected += 6144ll * k + k;
  CHECK(model.parameter_count() == expected);
  CHECK(model.parameter_count() == 16024111);
}

TEST_CASE("build_model minimal model has 4 parameters") {
  const auto model = build_model<double>(
      1, 1, {{"period", TaskKind::Regression, 1, 1.0, 1.0, {}}}, 0);
  CHECK(model.parameter_count() == 4);
}

TEST_CASE("build_model is deterministic per seed") {
  const auto a = build_model<float>(5, 7, three_task_specs(), 42);
  const auto b = build_model<float>(5, 7, three_task_specs(), 42);
  CHECK(a.shared.weights == b.shared.weights);
  CHECK(a.shared.bias == b.shared.bias);
  for (std::size_t i = 0; i < a.heads.size(); ++i) {
    CHECK(a.heads[i].weights == b.heads[i].weights);
  }
  const auto c = build_model<float>(5, 7, three_task_specs(), 43);
  CHECK(a.shared.weights != c.shared.weights);
}

TEST_CASE("build_model rejects empty specs and bad dims") {
  CHECK_THROWS_AS(build_model<float>(4, 4, {}, 0), std::invalid_argument);
  CHECK_THROWS_AS(build_model<float>(0, 4, three_task_specs(), 0),
                  std::invalid_argument);
  std::vector<TaskSpec> bad = three_task_specs();
  bad[2].output_dim = 3;  // regression must stay 1-dimensional
  CHECK_THROWS_AS(build_model<float>(4, 4, bad, 0), std::invalid_argument);
}

TEST_CASE("forward_all_tasks on zero input yields head biases") {
  auto model = build_model<double>(4, 3, three_task_specs(), 7);
  for (auto& head : model.heads) head.bias.setConstant(0.25);
  model.shared.bias.setZero();
  const MatD x = MatD::Zero(2, 4);
  const auto fwd = forward_all_tasks(model, x);
  CHECK(fwd.shared_act.cwiseAbs().maxCoeff() == 0.0);
  for (const auto& out : fwd.head_out) {
    CHECK((out.array() == 0.25).all());
  }
}

TEST_CASE("forward_all_tasks rows are batch independent") {
  Rng rng(3);
  auto model = build_model<double>(6, 5, three_task_specs(), 9);
  MatD x(3, 6);
  for (Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
  const auto full = forward_all_tasks(model, x);
  const auto solo = forward_all_tasks(model, MatD(x.row(1)));
  for (std::size_t t = 0; t < model.n_tasks(); ++t) {
    CHECK((full.head_out[t].row(1) - solo.head_out[t].row(0))
              .cwiseAbs()
              .maxCoeff() == 0.0);
  }
}

TEST_CASE("forward_all_tasks with identity weights applies relu then heads") {
  std::vector<TaskSpec> one{{"artist", TaskKind::Multiclass, 2, 1.0, 1.0, {}}};
  auto model = build_model<double>(2, 2, one, 0);
  model.shared.weights.setIdentity();
  model.shared.bias.setZero();
  model.heads[0].weights.setIdentity();
  model.heads[0].bias.setZero();
  MatD x(2, 2);
  x << -1, 2, 3, -4;
  const auto fwd = forward_all_tasks(model, x);
  MatD expected(2, 2);
  expected << 0, 2, 3, 0;
  CHECK(fwd.head_out[0] == expected);
}

TEST_CASE("combined_loss arithmetic") {
  std::vector<TaskSpec> one{{"t", TaskKind::Regression, 1, 1.0, 1.0, {}}};
  std::vector<TaskLoss<double>> single(1);
  single[0].raw = 2.0;
  single[0].grad = MatD::Ones(1, 1);
  const auto identity = combined_loss(single, one);
  CHECK(identity.total == 2.0);

  std::vector<TaskSpec> two{{"a", TaskKind::Regression, 1, 0.5, 1.0, {}},
                            {"b", TaskKind::Regression, 1, 2.0, 0.1, {}}};
  std::vector<TaskLoss<double>> pair(2);
  pair[0].raw = 4.0;
  pair[0].grad = MatD::Ones(1, 1);
  pair[1].raw = 10.0;
  pair[1].grad = MatD::Ones(1, 1);
  const auto combined = combined_loss(pair, two);
  CHECK(combined.total == doctest::Approx(4.0).epsilon(1e-15));
  CHECK(combined.per_task_weighted[0] == doctest::Approx(2.0));
  CHECK(combined.per_task_weighted[1] == doctest::Approx(2.0));
  // gradients picked up the w*s factor
  CHECK(pair[0].grad(0, 0) == doctest::Approx(0.5));
  CHECK(pair[1].grad(0, 0) == doctest::Approx(0.2));

  std::vector<TaskLoss<double>> wrong(1);
  wrong[0].grad = MatD::Ones(1, 1);
  CHECK_THROWS_AS(combined_loss(wrong, two), std::invalid_argument);
}

TEST_CASE("combined loss satisfies Eq-style exactness on random inputs") {
  Rng rng(101);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.below(5);
    std::vector<TaskSpec> specs;
    std::vector<TaskLoss<double>> losses(n);
    double expected = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      TaskSpec spec{"t" + std::to_string(i), TaskKind::Regression, 1,
                    rng.uniform(0.0, 3.0), rng.uniform(0.01, 10.0), {}};
      losses[i].raw = rng.uniform(0.001, 20.0);
      losses[i].grad = MatD::Ones(1, 1);
      expected += spec.weight * spec.scale * losses[i].raw;
      specs.push_back(std::move(spec));
    }
    const auto breakdown = combined_loss(losses, specs);
    CHECK(std::abs(breakdown.total - expected) <=
          1e-9 * std::max(1.0, std::abs(expected)));
    double from_parts = 0.0;
    for (double w : breakdown.per_task_weighted) from_parts += w;
    CHECK(std::abs(breakdown.total - from_parts) <=
          1e-9 * std::max(1.0, std::abs(from_parts)));
  }
}

TEST_CASE("scaling every task weight scales loss and gradients exactly") {
  Rng rng(303);
  auto model = build_model<double>(6, 4, three_task_specs(), 17);
  const Batch<double> batch = random_three_task_batch<double>(5, 6, rng);
  const double base_total = total_loss(model, batch);
  const GradientBundle<double> base = analytic_gradients(model, batch);

  const double c = 3.7;
  for (auto& spec : model.task_specs) spec.weight *= c;
  const double scaled_total = total_loss(model, batch);
  const GradientBundle<double> scaled = analytic_gradients(model, batch);

  CHECK(std::abs(scaled_total - c * base_total) <=
        1e-9 * std::abs(scaled_total));
  for (std::size_t l = 0; l < base.layers.size(); ++l) {
    const MatD expect = c * base.layers[l].weights;
    const MatD diff = scaled.layers[l].weights - expect;
    const double denom = std::max(1e-12, expect.cwiseAbs().maxCoeff());
    CHECK(diff.cwiseAbs().maxCoeff() / denom < 1e-9);
  }
}

TEST_CASE("zero-weight task contributes no gradient anywhere") {
  Rng rng(404);
  auto model = build_model<double>(6, 4, three_task_specs(), 21);
  model.task_specs[1].weight = 0.0;  // ablate the multilabel task
  const Batch<double> batch = random_three_task_batch<double>(4, 6, rng);
  const GradientBundle<double> grads = analytic_gradients(model, batch);
  CHECK(grads.layers[2].weights.cwiseAbs().maxCoeff() == 0.0);
  CHECK(grads.layers[2].bias.cwiseAbs().maxCoeff() == 0.0);

  // and with only one live task the other heads receive exactly zero
  model.task_specs[0].weight = 0.0;
  const GradientBundle<double> only_period = analytic_gradients(model, batch);
  CHECK(only_period.layers[1].weights.cwiseAbs().maxCoeff() == 0.0);
  CHECK(only_period.layers[2].weights.cwiseAbs().maxCoeff() == 0.0);
  CHECK(only_period.layers[3].weights.cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("zero-weight training equals training without the task") {
  Rng rng(505);
  const Index dim = 5, batch_rows = 6;

  std::vector<TaskSpec> with = three_task_specs();
  with[1].weight = 0.0;
  auto model_with = build_model<float>(dim, 4, with, 99);

  std::vector<TaskSpec> without{with[0], with[2]};
  auto model_without = build_model<float>(dim, 4, without, 99);

  // per-name init streams make the shared trunk and surviving heads align
  CHECK(model_with.shared.weights == model_without.shared.weights);
  CHECK(model_with.heads[0].weights == model_without.heads[0].weights);
  CHECK(model_with.heads[2].weights == model_without.heads[1].weights);

  SgdState<float> state_with = SgdState<float>::zeros_like(model_with);
  SgdState<float> state_without = SgdState<float>::zeros_like(model_without);
  for (int step = 0; step < 5; ++step) {
    Batch<float> b3 = random_three_task_batch<float>(batch_rows, dim, rng);
    Batch<float> b2;
    b2.inputs = b3.inputs;
    b2.targets_per_task = {b3.targets_per_task[0], b3.targets_per_task[2]};
    backward_update(model_with, b3, state_with, 0.05f, 0.9f);
    backward_update(model_without, b2, state_without, 0.05f, 0.9f);
  }
  CHECK(model_with.shared.weights == model_without.shared.weights);
  CHECK(model_with.shared.bias == model_without.shared.bias);
  CHECK(model_with.heads[0].weights == model_without.heads[0].weights);
  CHECK(model_with.heads[2].weights == model_without.heads[1].weights);
  // the ablated head never moved
  const auto fresh = build_model<float>(dim, 4, with, 99);
  CHECK(model_with.heads[1].weights == fresh.heads[1].weights);
}

TEST_CASE("backward_update with lr=0 reports loss and changes nothing") {
  Rng rng(606);
  auto model = build_model<float>(6, 4, three_task_specs(), 31);
  const auto before = model;
  SgdState<float> state = SgdState<float>::zeros_like(model);
  const Batch<float> batch = random_three_task_batch<float>(4, 6, rng);
  const auto breakdown = backward_update(model, batch, state, 0.0f, 0.9f);
  CHECK(breakdown.total > 0.0f);
  CHECK(model.shared.weights == before.shared.weights);
  for (std::size_t i = 0; i < model.heads.size(); ++i) {
    CHECK(model.heads[i].weights == before.heads[i].weights);
    CHECK(model.heads[i].bias == before.heads[i].bias);
  }
}

TEST_CASE("single-task regression recovers the slope of y = 2x") {
  std::vector<TaskSpec> spec{{"period", TaskKind::Regression, 1, 1.0, 1.0, {}}};
  auto model = build_model<float>(1, 8, spec, 13);
  SgdState<float> state = SgdState<float>::zeros_like(model);

  const Index n = 32;
  Batch<float> batch;
  batch.inputs.resize(n, 1);
  VecF target(n);
  for (Index i = 0; i < n; ++i) {
    batch.inputs(i, 0) = 0.5f + 1.5f * static_cast<float>(i) / (n - 1);
    target[i] = 2.0f * batch.inputs(i, 0);
  }
  batch.targets_per_task = {TargetBlock<float>(target)};

  for (int step = 0; step < 500; ++step) {
    backward_update(model, batch, state, 0.02f, 0.9f);
  }
  // least-absolute-deviation fit of y=2x has slope exactly 2; measure the
  // learned slope across the training range
  MatD probe(2, 1);
  probe << 0.75, 1.75;
  const auto fwd = forward_all_tasks(model, MatF(probe.cast<float>()));
  const double slope =
      (fwd.head_out[0](1, 0) - fwd.head_out[0](0, 0)) / 1.0;
  CHECK(std::abs(slope - 2.0) < 0.05);
}

TEST_CASE("full-model gradient check passes at 64-bit") {
  Rng rng(707);
  auto model = build_model<double>(6, 4, three_task_specs(), 77);
  Batch<double> batch = random_three_task_batch<double>(5, 6, rng);
  // exercise the mask path: drop two rows from the regression task
  batch.valid_per_task = {{}, {}, {1, 1, 0, 1, 0}};

  const GradientBundle<double> analytic = analytic_gradients(model, batch);
  const double err = grad_check([&] { return total_loss(model, batch); },
                                parameter_views(model),
                                gradient_views(analytic), 1e-6);
  CHECK(err < 1e-4);
}

TEST_CASE("calibration: equal losses are a fixed point") {
  const auto specs = three_task_specs();
  const std::vector<double> losses{0.9, 0.9, 0.9};
  const auto result = calibrate_weights_scales(specs, losses);
  for (double w : result.weights) CHECK(w == doctest::Approx(1.0));
  for (double s : result.scales) CHECK(s == doctest::Approx(1.0));
}

TEST_CASE("calibration scales a dominant regression loss down by ten") {
  std::vector<TaskSpec> specs{
      {"artist", TaskKind::Multiclass, 3, 1.0, 1.0, {}},
      {"period", TaskKind::Regression, 1, 1.0, 1.0, {}}};
  const std::vector<double> losses{0.7, 7.0};
  const auto result = calibrate_weights_scales(specs, losses);
  CHECK(result.scales[0] == 1.0);
  CHECK(result.scales[1] == doctest::Approx(0.1).epsilon(1e-12));
}

TEST_CASE("calibration weight formula on [1, 2, 4]") {
  std::vector<TaskSpec> specs{
      {"a", TaskKind::Multiclass, 2, 1.0, 1.0, {}},
      {"b", TaskKind::Multiclass, 2, 1.0, 1.0, {}},
      {"c", TaskKind::Multiclass, 2, 1.0, 1.0, {}}};
  const std::vector<double> losses{1.0, 2.0, 4.0};
  const auto result = calibrate_weights_scales(specs, losses);
  CHECK(result.weights[0] == doctest::Approx(12.0 / 7.0).epsilon(1e-12));
  CHECK(result.weights[1] == doctest::Approx(6.0 / 7.0).epsilon(1e-12));
  CHECK(result.weights[2] == doctest::Approx(3.0 / 7.0).epsilon(1e-12));
  const double sum =
      result.weights[0] + result.weights[1] + result.weights[2];
  CHECK(sum == doctest::Approx(3.0).epsilon(1e-12));
}

TEST_CASE("calibration rejects nonpositive losses") {
  const auto specs = three_task_specs();
  const std::vector<double> losses{0.5, 0.0, 1.0};
  CHECK_THROWS_AS(calibrate_weights_scales(specs, losses),
                  std::invalid_argument);
}

TEST_CASE("flop_count: shared trunk is counted once") {
  std::vector<TaskSpec> specs{{"a", TaskKind::Multiclass, 3, 1.0, 1.0, {}},
                              {"b", TaskKind::Multiclass, 2, 1.0, 1.0, {}}};
  const auto model = build_model<float>(8, 4, specs, 0);
  CHECK(flop_count(model, 2, 1) == 52);  // 8*4 + 4*3 + 4*2
  const int first = 0, second = 1;
  const std::int64_t singles =
      flop_count(model, std::span<const int>(&first, 1), 1) +
      flop_count(model, std::span<const int>(&second, 1), 1);
  CHECK(singles == 84);  // (32+12) + (32+8)
  // difference is exactly (n-1)*B*D*H
  CHECK(singles - flop_count(model, 2, 1) == 1 * 1 * 8 * 4);
  // doubling the batch doubles the count
  CHECK(flop_count(model, 2, 2) == 2 * flop_count(model, 2, 1));

  std::vector<TaskSpec> one{{"a", TaskKind::Multiclass, 3, 1.0, 1.0, {}}};
  const auto single = build_model<float>(8, 4, one, 0);
  CHECK(flop_count(single, 1, 1) ==
        flop_count(single, std::span<const int>(&first, 1), 1));
}

TEST_CASE("checkpoint round-trips bit-exactly") {
  auto model = build_model<float>(7, 5, three_task_specs(), 2024);
  model.task_specs[0].class_weights = {1.5, 0.75, 0.75};
  model.task_specs[2].scale = 0.1;
  model.task_specs[2].weight = 1.25;

  TempPath tmp("ckpt.omtl");
  save_model(model, tmp.path);
  const auto loaded = load_model(tmp.path);
  CHECK(loaded.shared.weights == model.shared.weights);
  CHECK(loaded.shared.bias == model.shared.bias);
  REQUIRE(loaded.heads.size() == model.heads.size());
  for (std::size_t i = 0; i < model.heads.size(); ++i) {
    CHECK(loaded.heads[i].weights == model.heads[i].weights);
    CHECK(loaded.heads[i].bias == model.heads[i].bias);
  }
  CHECK(loaded.task_specs[0].class_weights == model.task_specs[0].class_weights);
  CHECK(loaded.task_specs[2].scale == 0.1);
  CHECK(loaded.task_specs[1].kind == TaskKind::Multilabel);

  // saving the loaded model reproduces the same bytes
  TempPath tmp2("ckpt2.omtl");
  save_model(loaded, tmp2.path);
  std::ifstream a(tmp.path, std::ios::binary), b(tmp2.path, std::ios::binary);
  const std::string bytes_a((std::istreambuf_iterator<char>(a)),
                            std::istreambuf_iterator<char>());
  const std::string bytes_b((std::istreambuf_iterator<char>(b)),
                            std::istreambuf_iterator<char>());
  CHECK(bytes_a == bytes_b);
}

TEST_CASE("checkpoint loader rejects corruption") {
  auto model = build_model<float>(3, 2, three_task_specs(), 5);
  TempPath tmp("bad.omtl");
  save_model(model, tmp.path);

  // truncate
  const auto full_size = std::filesystem::file_size(tmp.path);
  std::filesystem::resize_file(tmp.path, full_size / 2);
  CHECK_THROWS_AS(load_model(tmp.path), FormatError);

  // bad magic
  {
    std::ofstream out(tmp.path, std::ios::binary | std::ios::trunc);
    out << "NOPE";
  }
  CHECK_THROWS_AS(load_model(tmp.path), FormatError);
}
