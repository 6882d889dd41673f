#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>

#include "trafficfuse/autodiff.hpp"

using namespace trafficfuse;
using ad::Matrix;
using ad::Tape;
using ad::Var;

namespace {

using Op = std::function<Var(Tape&, const std::vector<Var>&)>;

Matrix random_matrix(int r, int c, std::mt19937_64& rng) {
  std::normal_distribution<double> z(0.0, 1.0);
  Matrix m(r, c);
  for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = z(rng);
  return m;
}

double weighted_sum(const Op& op, const std::vector<Matrix>& inputs, const Matrix& w) {
  Tape tape;
  std::vector<Var> vars;
  for (const auto& m : inputs) vars.push_back(tape.constant(m));
  return op(tape, vars).value().cwiseProduct(w).sum();
}

// Max relative error of the reverse-mode gradient of sum(W .* op(inputs)).
double check(const Op& op, const std::vector<Matrix>& inputs, std::uint64_t seed = 1) {
  std::mt19937_64 rng(seed);
  Tape tape;
  std::vector<Var> vars;
  for (const auto& m : inputs) vars.push_back(tape.variable(m));
  Var out = op(tape, vars);
  const Matrix w = random_matrix(static_cast<int>(out.rows()), static_cast<int>(out.cols()), rng);
  Matrix total(1, 1);
  total(0, 0) = out.value().cwiseProduct(w).sum();
  Var loss = tape.record(total, {out}, [&tape, out, w](const Matrix& g) { tape.accumulate(out, g(0, 0) * w); });
  tape.backward(loss);

  double worst = 0.0;
  const double h = 1e-6;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (Eigen::Index e = 0; e < inputs[k].size(); ++e) {
      auto up = inputs;
      auto down = inputs;
      up[k].data()[e] += h;
      down[k].data()[e] -= h;
      const double fd = (weighted_sum(op, up, w) - weighted_sum(op, down, w)) / (2 * h);
      const double g = vars[k].grad().data()[e];
      worst = std::max(worst, std::abs(g - fd) / std::max({std::abs(g), std::abs(fd), 1e-6}));
    }
  }
  return worst;
}

}  // namespace

TEST(Autodiff, Matmul) {
  std::mt19937_64 rng(1);
  EXPECT_LT(check([](Tape&, const auto& v) { return ad::matmul(v[0], v[1]); },
                  {random_matrix(3, 4, rng), random_matrix(4, 2, rng)}),
            1e-6);
}

TEST(Autodiff, AddVariants) {
  std::mt19937_64 rng(2);
  const auto a = random_matrix(3, 4, rng);
  const auto b = random_matrix(3, 4, rng);
  const auto c = random_matrix(3, 4, rng);
  EXPECT_LT(check([](Tape&, const auto& v) { return ad::add(v[0], v[1]); }, {a, b}), 1e-6);
  EXPECT_LT(check([](Tape&, const auto& v) { return ad::add3(v[0], v[1], v[2]); }, {a, b, c}), 1e-6);
  EXPECT_LT(check([](Tape&, const auto& v) { return ad::add_row(v[0], v[1]); }, {a, random_matrix(1, 4, rng)}),
            1e-6);
}

TEST(Autodiff, GeluMatchesClosedForm) {
  EXPECT_EQ(ad::gelu_value(0.0), 0.0);
  EXPECT_NEAR(ad::gelu_value(1.0), 0.8413447460685429, 1e-15);
  EXPECT_NEAR(ad::gelu_value(-1.0), -0.15865525393145707, 1e-15);
  std::mt19937_64 rng(3);
  EXPECT_LT(check([](Tape&, const auto& v) { return ad::gelu(v[0]); }, {random_matrix(4, 5, rng)}), 1e-6);
}

TEST(Autodiff, LayerNorm) {
  std::mt19937_64 rng(4);
  EXPECT_LT(check([](Tape&, const auto& v) { return ad::layer_norm(v[0], v[1], v[2]); },
                  {random_matrix(5, 6, rng), random_matrix(1, 6, rng), random_matrix(1, 6, rng)}),
            1e-5);
  Tape tape;
  const Var y = ad::layer_norm(tape.constant(random_matrix(3, 8, rng)), tape.constant(Matrix::Ones(1, 8)),
                               tape.constant(Matrix::Zero(1, 8)));
  for (int r = 0; r < 3; ++r) {
    EXPECT_NEAR(y.value().row(r).mean(), 0.0, 1e-12);
    EXPECT_NEAR(y.value().row(r).squaredNorm() / 8.0, 1.0, 1e-4);
  }
}

TEST(Autodiff, GraphMix) {
  std::mt19937_64 rng(5);
  ad::SparseRowMatrix a(3, 3);
  a.insert(0, 1) = 0.5;
  a.insert(0, 2) = 0.5;
  a.insert(1, 2) = 1.0;
  a.makeCompressed();
  EXPECT_LT(check([&a](Tape&, const auto& v) { return ad::graph_mix(a, v[0], 2); }, {random_matrix(6, 3, rng)}),
            1e-6);
}

TEST(Autodiff, PermuteAndFlatten) {
  std::mt19937_64 rng(6);
  EXPECT_LT(check([](Tape&, const auto& v) { return ad::permute_rows(v[0], {2, 0, 3, 1}); },
                  {random_matrix(4, 3, rng)}),
            1e-6);
  EXPECT_LT(check([](Tape&, const auto& v) { return ad::flatten_groups(v[0], 2); }, {random_matrix(6, 2, rng)}),
            1e-6);
  Tape tape;
  Matrix m(4, 2);
  m << 1, 2, 3, 4, 5, 6, 7, 8;
  const Var f = ad::flatten_groups(tape.constant(m), 2);
  Matrix expected(2, 4);
  expected << 1, 2, 3, 4, 5, 6, 7, 8;
  EXPECT_EQ(f.value(), expected);
}

TEST(Autodiff, GroupedAttention) {
  std::mt19937_64 rng(7);
  const auto q = random_matrix(6, 4, rng);
  const auto k = random_matrix(6, 4, rng);
  const auto v = random_matrix(6, 4, rng);
  EXPECT_LT(check([](Tape&, const auto& x) { return ad::grouped_attention(x[0], x[1], x[2], 2, 3, 2); }, {q, k, v}),
            1e-5);
  Tape tape;
  std::vector<Matrix> weights;
  ad::grouped_attention(tape.constant(q), tape.constant(k), tape.constant(v), 2, 3, 2, &weights);
  ASSERT_EQ(weights.size(), 4u);
  for (const auto& w : weights) {
    EXPECT_EQ(w.rows(), 3);
    for (int r = 0; r < 3; ++r) EXPECT_NEAR(w.row(r).sum(), 1.0, 1e-12);
    EXPECT_GE(w.minCoeff(), 0.0);
  }
}

TEST(Autodiff, SharedSubexpressionAccumulates) {
  // f(x) = x*x + x on a 1x1 matrix: grad = 2x + 1.
  Tape tape;
  Matrix x0(1, 1);
  x0(0, 0) = 3.0;
  const Var x = tape.variable(x0);
  const Var y = ad::add(ad::matmul(x, x), x);
  tape.backward(y);
  EXPECT_DOUBLE_EQ(x.grad()(0, 0), 7.0);
}

TEST(Autodiff, ConstantsReceiveNoGradient) {
  Tape tape;
  const Var a = tape.constant(Matrix::Ones(2, 2));
  const Var b = tape.variable(Matrix::Ones(2, 1));
  const Var row = tape.constant(Matrix::Ones(1, 2));
  const Var y = ad::matmul(ad::matmul(row, a), b);
  tape.backward(y);
  EXPECT_FALSE(tape.needs_grad(a));
  EXPECT_EQ(b.grad()(0, 0), 2.0);
}
