#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <span>
#include <vector>

#include "phc/autodiff.hpp"
#include "phc/gradcheck.hpp"
#include "phc/mlp.hpp"

namespace ad = phc::ad;
using ad::Matrix;
using ad::Var;

namespace {

Matrix random_matrix(int r, int c, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m(i) = d(rng);
  return m;
}

template <class F>
void expect_gradient_ok(F&& f, const std::vector<Matrix>& leaves, double tol = 1e-6) {
  const ad::GradientCheck r = ad::check_gradient(f, leaves, 1e-6);
  EXPECT_GT(r.checked, 0u);
  EXPECT_LT(r.max_relative_error, tol);
}

}  // namespace

TEST(Autodiff, ScalarChainMatchesClosedForm) {
  ad::Tape tape;
  Var x = tape.leaf(Matrix::Constant(1, 1, 0.7));
  Var y = ad::sin(x) * ad::exp(x) + ad::square(x);
  auto g = ad::grad(y, {x});
  const double xv = 0.7;
  EXPECT_NEAR(g[0](0, 0), std::cos(xv) * std::exp(xv) + std::sin(xv) * std::exp(xv) + 2 * xv,
              1e-12);
}

TEST(Autodiff, ElementwiseOpsPassGradientCheck) {
  std::mt19937_64 rng(1);
  const Matrix a = random_matrix(3, 4, rng);
  const Matrix b = random_matrix(3, 4, rng, 0.5, 2.0);
  auto f = [](ad::Tape*, std::span<const Var> v) {
    const Var& x = v[0];
    const Var& y = v[1];
    Var s = ad::tanh(x) * y + ad::sigmoid(x) / y - ad::softplus(2.0 * x) + ad::log(y) +
            ad::sqrt(y) * ad::cos(x) + ad::reciprocal(y) + ad::pow(y, 1.5) - (-x) * 0.3;
    return ad::sum(s);
  };
  expect_gradient_ok(f, {a, b});
}

TEST(Autodiff, BroadcastingReducesAdjoints) {
  std::mt19937_64 rng(2);
  const Matrix a = random_matrix(3, 5, rng);
  const Matrix row = random_matrix(1, 5, rng);
  const Matrix col = random_matrix(3, 1, rng);
  const Matrix s = random_matrix(1, 1, rng);
  auto f = [](ad::Tape*, std::span<const Var> v) {
    Var y = (v[0] + v[1]) * v[2] - v[3] * ad::square(v[0]);
    return ad::sum(ad::tanh(y));
  };
  expect_gradient_ok(f, {a, row, col, s});
}

TEST(Autodiff, MatrixAndStructuralOps) {
  std::mt19937_64 rng(3);
  const Matrix w = random_matrix(4, 3, rng);
  const Matrix x = random_matrix(3, 6, rng);
  auto f = [](ad::Tape*, std::span<const Var> v) {
    Var h = ad::matmul(v[0], v[1]);
    Var top = ad::slice_rows(h, 0, 2);
    Var r = ad::row(h, 3);
    Var c = ad::concat_rows({top, r, ad::transpose(ad::transpose(r))});
    Var s = ad::sum_rows(ad::square(c));
    Var t = ad::sum_cols(ad::abs(c) + 1.0);
    return ad::sum(s) + ad::sum(ad::sqrt(t));
  };
  expect_gradient_ok(f, {w, x});
}

TEST(Autodiff, WrapAngleIsIdentityBetweenBranchCuts) {
  ad::Tape tape;
  Var x = tape.leaf(Matrix::Constant(1, 1, 3.0 * M_PI + 0.2));
  Var y = ad::wrap_angle(x);
  EXPECT_NEAR(y.scalar(), -M_PI + 0.2, 1e-12);
  auto g = ad::grad(ad::sum(y), {x});
  EXPECT_DOUBLE_EQ(g[0](0, 0), 1.0);
}

TEST(Autodiff, ReluKinkIsReportedAsUnreliable) {
  auto f = [](ad::Tape*, std::span<const Var> v) { return ad::sum(ad::relu(v[0])); };
  const ad::GradientCheck r = ad::check_gradient(f, {Matrix::Constant(1, 1, 0.0)}, 1e-6);
  EXPECT_EQ(r.unreliable_points, 1u);
}

TEST(Autodiff, FivePointStencilIsMoreAccurateThanCentral) {
  auto f = [](ad::Tape*, std::span<const Var> v) { return ad::sum(ad::sin(v[0]) * ad::exp(v[0])); };
  const std::vector<Matrix> leaves{(Matrix(1, 3) << 0.3, -1.1, 2.0).finished()};
  const ad::GradientCheck central = ad::check_gradient(f, leaves, 1e-3);
  const ad::GradientCheck five = ad::check_gradient(f, leaves, 1e-3, true);
  EXPECT_EQ(central.unreliable_points, 0u);
  EXPECT_GT(central.max_relative_error, 1e-9);
  EXPECT_LT(five.max_relative_error, 1e-2 * central.max_relative_error);
}

TEST(Autodiff, SoftplusIsStableForLargeInputs) {
  Var x(Matrix((Matrix(1, 3) << -800.0, 0.0, 800.0).finished()));
  const Matrix y = ad::softplus(x).value();
  EXPECT_NEAR(y(0, 0), 0.0, 1e-300);
  EXPECT_NEAR(y(0, 1), std::log(2.0), 1e-15);
  EXPECT_DOUBLE_EQ(y(0, 2), 800.0);
}

TEST(Autodiff, ShapeMismatchThrows) {
  Var a(Matrix::Zero(2, 3));
  Var b(Matrix::Zero(3, 2));
  EXPECT_THROW(a + b, ad::ShapeError);
  EXPECT_THROW(ad::matmul(a, a), ad::ShapeError);
  EXPECT_THROW(ad::slice_rows(a, 1, 2), ad::ShapeError);
}

TEST(Autodiff, GradientOfUntracedFunctionIsContractError) {
  Var a(Matrix::Ones(1, 1));
  Var y = ad::square(a);
  EXPECT_THROW(ad::grad(y, {a}), ad::ContractError);
}

TEST(Autodiff, NonScalarRootIsContractError) {
  ad::Tape tape;
  Var x = tape.leaf(Matrix::Ones(2, 1));
  EXPECT_THROW(ad::grad(ad::square(x), {x}), ad::ContractError);
}

TEST(Autodiff, UnreachedLeafHasZeroGradient) {
  ad::Tape tape;
  Var x = tape.leaf(Matrix::Ones(2, 2));
  Var y = tape.leaf(Matrix::Ones(1, 1));
  auto g = ad::grad(ad::sum(ad::square(y)), {x, y});
  EXPECT_TRUE(g[0].isZero());
  EXPECT_DOUBLE_EQ(g[1](0, 0), 2.0);
}

TEST(Autodiff, SeededBackwardIsVectorJacobianProduct) {
  std::mt19937_64 rng(4);
  const Matrix wv = random_matrix(3, 2, rng);
  const Matrix xv = random_matrix(2, 1, rng);
  const Matrix seed = random_matrix(3, 1, rng);
  ad::Tape tape;
  Var w = tape.leaf(wv);
  Var x = tape.leaf(xv);
  Var y = ad::matmul(w, x);
  std::vector<std::pair<Var, Matrix>> seeds{{y, seed}};
  tape.backward(std::span<const std::pair<Var, Matrix>>(seeds));
  EXPECT_TRUE(tape.adjoint(x).isApprox(wv.transpose() * seed, 1e-14));
  EXPECT_TRUE(tape.adjoint(w).isApprox(seed * xv.transpose(), 1e-14));
}

TEST(Mlp, ArchitectureRoundTrip) {
  const auto a = ad::Architecture::parse("2-50 tanh-50 tanh-1");
  EXPECT_EQ(a.input, 2);
  EXPECT_EQ(a.output(), 1);
  ASSERT_EQ(a.layers.size(), 3u);
  EXPECT_EQ(a.layers[0].activation, ad::Activation::kTanh);
  EXPECT_EQ(a.to_string(), "2-50 tanh-50 tanh-1");
  EXPECT_EQ(ad::Architecture::parse("3-4 softplus-1 softplus").layers.back().activation,
            ad::Activation::kSoftplus);
  EXPECT_THROW(ad::Architecture::parse("2"), ad::ShapeError);
  EXPECT_THROW(ad::Architecture::parse("2-4 relu6-1"), ad::ShapeError);
}

TEST(Mlp, WrongInputWidthThrows) {
  ad::ParamSet p;
  std::mt19937_64 rng(5);
  const auto arch = ad::Architecture::parse("2-4 tanh-1");
  ad::init_mlp(p, "f", arch, rng);
  EXPECT_THROW(ad::mlp_forward(p, "f", arch, Eigen::VectorXd::Zero(3)), ad::ShapeError);
}

TEST(Mlp, InputGradientMatchesFiniteDifferences) {
  ad::ParamSet p;
  std::mt19937_64 rng(6);
  const auto arch = ad::Architecture::parse("3-8 tanh-8 softplus-1");
  ad::init_mlp(p, "f", arch, rng);
  const ad::BoundParams bound(p, nullptr, false);
  const auto net = ad::bind_mlp(bound, "f", arch);
  const Matrix x = random_matrix(3, 4, rng);
  const Matrix g = ad::input_gradient_differentiable(net, Var(x)).value();
  const double h = 1e-6;
  for (int c = 0; c < 4; ++c) {
    for (int i = 0; i < 3; ++i) {
      Eigen::VectorXd xp = x.col(c), xm = x.col(c);
      xp(i) += h;
      xm(i) -= h;
      const double fd = (ad::mlp_forward(p, "f", arch, xp)(0) - ad::mlp_forward(p, "f", arch, xm)(0)) /
                        (2 * h);
      EXPECT_NEAR(g(i, c), fd, 1e-8);
    }
  }
}

TEST(Mlp, InputGradientIsDifferentiableInParameters) {
  std::mt19937_64 rng(7);
  const auto arch = ad::Architecture::parse("2-5 tanh-5 softplus-1");
  ad::ParamSet p;
  ad::init_mlp(p, "f", arch, rng);
  std::vector<Matrix> leaves;
  for (const auto& e : p) leaves.push_back(e.second);
  leaves.push_back(random_matrix(2, 3, rng));
  auto f = [&](ad::Tape*, std::span<const Var> v) {
    ad::BoundMlp net{arch, {v[0], v[2], v[4]}, {v[1], v[3], v[5]}};
    Var g = ad::input_gradient_differentiable(net, v[6]);
    return ad::sum(ad::square(g) * 0.5 + ad::sin(g));
  };
  expect_gradient_ok(f, leaves, 1e-5);
}
