#include "mtl/nncore.hpp"

#include <cmath>

#include "doctest.h"
#include "mtl/rng.hpp"
#include "oracles.hpp"

using namespace mtl;

namespace {

MatD random_matrix(Index rows, Index cols, Rng& rng, double scale = 1.0) {
  MatD m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) {
    m.data()[i] = scale * rng.normal();
  }
  return m;
}

}  // namespace

TEST_CASE("dense_forward computes x*W^T + b") {
  DenseLayer<double> identity(2, 2);
  identity.weights << 1, 0, 0, 1;
  MatD x(1, 2);
  x << 3, 4;
  MatD y = dense_forward(identity, x);
  CHECK(y(0, 0) == 3.0);
  CHECK(y(0, 1) == 4.0);

  DenseLayer<double> sum(1, 2);
  sum.weights << 1, 1;
  sum.bias << 1;
  MatD x2(1, 2);
  x2 << 2, 3;
  CHECK(dense_forward(sum, x2)(0, 0) == 6.0);

  DenseLayer<double> cancel(1, 2);
  cancel.weights << 0.5, -0.5;
  MatD x3(1, 2);
  x3 << 1, 1;
  CHECK(dense_forward(cancel, x3)(0, 0) == 0.0);
}

TEST_CASE("dense_forward rejects dimension mismatch") {
  DenseLayer<double> layer(2, 3);
  MatD x = MatD::Zero(1, 4);
  CHECK_THROWS_AS(dense_forward(layer, x), std::invalid_argument);
}

TEST_CASE("dense_forward is affine-linear in its input") {
  Rng rng(11);
  DenseLayer<double> layer(5, 7);
  layer.weights = random_matrix(5, 7, rng);
  layer.bias = random_matrix(5, 1, rng);
  for (int trial = 0; trial < 20; ++trial) {
    const MatD x = random_matrix(3, 7, rng);
    const MatD y = random_matrix(3, 7, rng);
    const double a = rng.uniform(-2.0, 2.0);
    const double b = rng.uniform(-2.0, 2.0);
    const MatD lhs = dense_forward(layer, MatD(a * x + b * y));
    MatD rhs = a * dense_forward(layer, x) + b * dense_forward(layer, y);
    rhs.rowwise() -= (a + b - 1.0) * layer.bias.transpose();
    CHECK((lhs - rhs).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("relu clamps negatives and passes positives") {
  MatD x(1, 2);
  x << -1, 2;
  MatD y = relu(x);
  CHECK(y(0, 0) == 0.0);
  CHECK(y(0, 1) == 2.0);

  MatD zero(1, 1);
  zero << 0;
  CHECK(MatD(relu(zero))(0, 0) == 0.0);
  CHECK(MatD(relu_grad(zero))(0, 0) == 0.0);  // subgradient at 0 is 0

  MatD five(1, 1);
  five << 5;
  CHECK(MatD(relu(five))(0, 0) == 5.0);
  CHECK(MatD(relu_grad(five))(0, 0) == 1.0);
}

TEST_CASE("softmax rows sum to one and stay in [0,1]") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const MatD logits = random_matrix(4, 6, rng, 5.0);
    const MatD p = softmax_rows(logits);
    CHECK((p.array() >= 0.0).all());
    CHECK((p.array() <= 1.0).all());
    for (Index b = 0; b < p.rows(); ++b) {
      CHECK(std::abs(p.row(b).sum() - 1.0) < 1e-9);
    }
  }
}

TEST_CASE("softmax_xent on uniform logits gives ln 2") {
  MatD logits(1, 2);
  logits << 0, 0;
  IndexVec targets(1);
  targets << 0;
  const auto res = softmax_xent(logits, targets, VecD(VecD::Ones(2)));
  CHECK(res.loss == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("softmax_xent applies class weights") {
  MatD logits(1, 2);
  logits << 0, 0;
  IndexVec targets(1);
  targets << 0;
  VecD weights(2);
  weights << 2, 1;
  const auto res = softmax_xent(logits, targets, weights);
  CHECK(res.loss == doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("softmax_xent survives extreme logits") {
  MatD logits(1, 2);
  logits << 1000, 0;
  IndexVec targets(1);
  targets << 0;
  const auto res = softmax_xent(logits, targets, VecD(VecD::Ones(2)));
  CHECK(std::isfinite(res.loss));
  CHECK(res.loss == doctest::Approx(0.0).epsilon(1e-12));

  MatD big(2, 3);
  big << 1e4, -1e4, 0, -1e4, 1e4, 3;
  IndexVec t2(2);
  t2 << 0, 2;
  const auto res2 = softmax_xent(big, t2, VecD(VecD::Ones(3)));
  CHECK(std::isfinite(res2.loss));
  CHECK(res2.grad.allFinite());
}

TEST_CASE("softmax_xent rejects out-of-range targets") {
  MatD logits(1, 2);
  logits << 0, 0;
  IndexVec targets(1);
  targets << 2;
  CHECK_THROWS_AS(softmax_xent(logits, targets, VecD(VecD::Ones(2))),
                  std::invalid_argument);
}

TEST_CASE("softmax_xent gradient matches finite differences") {
  Rng rng(21);
  const Index batch = 3, k = 4;
  const MatD logits = random_matrix(batch, k, rng, 2.0);
  IndexVec targets(batch);
  for (Index b = 0; b < batch; ++b) {
    targets[b] = static_cast<int>(rng.below(k));
  }
  VecD weights(k);
  for (Index i = 0; i < k; ++i) weights[i] = rng.uniform(0.5, 2.0);

  const auto res = softmax_xent(logits, targets, weights);
  const VecD analytic =
      Eigen::Map<const VecD>(res.grad.data(), res.grad.size());
  const VecD numeric = oracle::numeric_gradient(
      [&](const VecD& v) {
        const MatD z = Eigen::Map<const MatD>(v.data(), batch, k);
        return softmax_xent(z, targets, weights).loss;
      },
      VecD(Eigen::Map<const VecD>(logits.data(), logits.size())));
  CHECK(oracle::max_rel_error(analytic, numeric) < 1e-6);
}

TEST_CASE("sigmoid_bce basics") {
  MatD logits(1, 1);
  logits << 0;
  MatD target(1, 1);
  target << 1;
  CHECK(sigmoid_bce(logits, target).loss ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));

  logits << 50;
  const auto saturated = sigmoid_bce(logits, target);
  CHECK(std::isfinite(saturated.loss));
  CHECK(saturated.loss == doctest::Approx(0.0).epsilon(1e-12));

  logits << -1e4;
  target << 0;
  const auto extreme = sigmoid_bce(logits, target);
  CHECK(std::isfinite(extreme.loss));
  CHECK(extreme.grad.allFinite());

  target << 0.5;
  CHECK_THROWS_AS(sigmoid_bce(logits, target), std::invalid_argument);
}

TEST_CASE("sigmoid_bce gradient matches finite differences") {
  Rng rng(33);
  const Index batch = 2, k = 5;
  const MatD logits = random_matrix(batch, k, rng, 2.0);
  MatD targets(batch, k);
  for (Index i = 0; i < targets.size(); ++i) {
    targets.data()[i] = rng.uniform01() < 0.5 ? 0.0 : 1.0;
  }
  const auto res = sigmoid_bce(logits, targets);
  const VecD analytic =
      Eigen::Map<const VecD>(res.grad.data(), res.grad.size());
  const VecD numeric = oracle::numeric_gradient(
      [&](const VecD& v) {
        const MatD z = Eigen::Map<const MatD>(v.data(), batch, k);
        return sigmoid_bce(z, targets).loss;
      },
      VecD(Eigen::Map<const VecD>(logits.data(), logits.size())));
  CHECK(oracle::max_rel_error(analytic, numeric) < 1e-6);
}

TEST_CASE("mae_loss values and gradient") {
  VecD pred(1), target(1);
  pred << 5;
  target << 5;
  CHECK(mae_loss(pred, target).loss == 0.0);

  VecD p2(2), t2(2);
  p2 << 0, 4;
  t2 << 2, 2;
  CHECK(mae_loss(p2, t2).loss == 2.0);

  CHECK_THROWS_AS(mae_loss(VecD(), VecD()), std::invalid_argument);

  Rng rng(55);
  VecD p(7), t(7);
  for (Index i = 0; i < 7; ++i) {
    p[i] = rng.uniform(-3.0, 3.0);
    t[i] = rng.uniform(-3.0, 3.0);  // ties have probability zero
  }
  const auto res = mae_loss(p, t);
  const VecD numeric = oracle::numeric_gradient(
      [&](const VecD& v) { return mae_loss(v, t).loss; }, p);
  const VecD analytic = Eigen::Map<const VecD>(res.grad.data(), 7);
  CHECK(oracle::max_rel_error(analytic, numeric) < 1e-6);
}

TEST_CASE("optimizer_step momentum recurrence") {
  VecD p = VecD::Zero(1), g = VecD::Ones(1), v = VecD::Zero(1);
  optimizer_step(p, g, v, 0.1, 0.0);
  CHECK(p[0] == doctest::Approx(-0.1).epsilon(1e-15));

  p.setZero();
  v.setZero();
  const double lr = 0.1;
  optimizer_step(p, g, v, lr, 0.9);  // v=1, p=-lr
  optimizer_step(p, g, v, lr, 0.9);  // v=1.9, p=-lr*(1+1.9)
  CHECK(p[0] == doctest::Approx(-lr * (1.0 + 1.9)).epsilon(1e-12));
}

TEST_CASE("optimizer_step fixed points and validation") {
  DenseLayer<double> layer(2, 2);
  layer.weights << 1, 2, 3, 4;
  layer.bias << 5, 6;
  const MatD w_before = layer.weights;
  LayerGrads<double> zero = LayerGrads<double>::zeros_like(layer);
  LayerGrads<double> velocity = LayerGrads<double>::zeros_like(layer);
  optimizer_step(layer, zero, velocity, 0.5, 0.9);
  CHECK(layer.weights == w_before);  // g=0, v=0 leaves params bit-identical

  LayerGrads<double> ones{MatD::Ones(2, 2), VecD::Ones(2)};
  optimizer_step(layer, ones, velocity, 0.0, 0.9);  // lr=0: parameter no-op
  CHECK(layer.weights == w_before);

  LayerGrads<double> bad{MatD::Zero(1, 1), VecD::Zero(2)};
  CHECK_THROWS_AS(optimizer_step(layer, bad, velocity, 0.5, 0.9),
                  std::invalid_argument);
  CHECK_THROWS_AS(optimizer_step(layer, zero, velocity, -0.1, 0.9),
                  std::invalid_argument);
  CHECK_THROWS_AS(optimizer_step(layer, zero, velocity, 0.1, 1.0),
                  std::invalid_argument);
}

TEST_CASE("grad_check on a quadratic is exact up to roundoff") {
  std::vector<double> p{3.0};
  const std::vector<double> analytic{3.0};  // d(p^2/2)/dp = p
  std::vector<std::span<double>> params{std::span<double>(p)};
  std::vector<std::span<const double>> grads{std::span<const double>(analytic)};
  const double err =
      grad_check([&] { return 0.5 * p[0] * p[0]; }, params, grads, 1e-5);
  CHECK(err < 1e-8);
}

TEST_CASE("grad_check flags a corrupted gradient") {
  std::vector<double> p{3.0};
  const std::vector<double> corrupted{6.0};  // true gradient doubled
  std::vector<std::span<double>> params{std::span<double>(p)};
  std::vector<std::span<const double>> grads{
      std::span<const double>(corrupted)};
  const double err =
      grad_check([&] { return 0.5 * p[0] * p[0]; }, params, grads, 1e-5);
  CHECK(err == doctest::Approx(1.0 / 3.0).epsilon(1e-6));
}

TEST_CASE("grad_check validates epsilon") {
  std::vector<double> p{1.0};
  const std::vector<double> g{1.0};
  std::vector<std::span<double>> params{std::span<double>(p)};
  std::vector<std::span<const double>> grads{std::span<const double>(g)};
  CHECK_THROWS_AS(grad_check([&] { return p[0]; }, params, grads, 0.0),
                  std::invalid_argument);
}

TEST_CASE("every loss gradient passes finite differences on random instances") {
  Rng rng(99);
  const double eps = 1e-4;  // balances truncation against f*ulp/eps noise
  for (int trial = 0; trial < 10; ++trial) {
    const Index batch = 1 + static_cast<Index>(rng.below(8));
    const Index k = 2 + static_cast<Index>(rng.below(7));
    MatD logits(batch, k);
    for (Index i = 0; i < logits.size(); ++i) {
      logits.data()[i] = rng.uniform(-5.0, 5.0);
    }
    const VecD flat = Eigen::Map<const VecD>(logits.data(), logits.size());

    IndexVec targets(batch);
    for (Index b = 0; b < batch; ++b) {
      targets[b] = static_cast<int>(rng.below(static_cast<std::uint64_t>(k)));
    }
    const auto xent = softmax_xent(logits, targets, VecD(VecD::Ones(k)));
    VecD numeric = oracle::numeric_gradient(
        [&](const VecD& v) {
          const MatD z = Eigen::Map<const MatD>(v.data(), batch, k);
          return softmax_xent(z, targets, VecD(VecD::Ones(k))).loss;
        },
        flat, eps);
    CHECK(oracle::max_rel_error(
              VecD(Eigen::Map<const VecD>(xent.grad.data(), xent.grad.size())),
              numeric) < 1e-4);

    MatD hot(batch, k);
    for (Index i = 0; i < hot.size(); ++i) {
      hot.data()[i] = rng.uniform01() < 0.5 ? 0.0 : 1.0;
    }
    const auto bce = sigmoid_bce(logits, hot);
    numeric = oracle::numeric_gradient(
        [&](const VecD& v) {
          const MatD z = Eigen::Map<const MatD>(v.data(), batch, k);
          return sigmoid_bce(z, hot).loss;
        },
        flat, eps);
    CHECK(oracle::max_rel_error(
              VecD(Eigen::Map<const VecD>(bce.grad.data(), bce.grad.size())),
              numeric) < 1e-4);

    VecD pred(batch), target(batch);
    for (Index b = 0; b < batch; ++b) {
      pred[b] = rng.uniform(-5.0, 5.0);
      target[b] = rng.uniform(-5.0, 5.0);
    }
    const auto mae = mae_loss(pred, target);
    numeric = oracle::numeric_gradient(
        [&](const VecD& v) { return mae_loss(v, target).loss; }, pred, eps);
    CHECK(oracle::max_rel_error(
              VecD(Eigen::Map<const VecD>(mae.grad.data(), batch)), numeric) <
          1e-4);
  }
}
