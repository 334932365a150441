#include <gtest/gtest.h>
#include <quadmath.h>

#include <cmath>

#include "rarelens/autodiff.hpp"
#include "rarelens/optim.hpp"
#include "rarelens/random.hpp"
#include "rarelens/tensor.hpp"

using namespace rarelens;

namespace {

Tensor triple_loop_matmul(const Tensor& a, const Tensor& b) {
  Tensor c(Shape{a.rows(), b.cols()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < a.cols(); ++p) s += a(i, p) * b(p, j);
      c(i, j) = s;
    }
  return c;
}

}  // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  const Tensor a = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(matmul(Tensor::identity(2), a), a);
}

TEST(Matmul, HandArithmetic) {
  const Tensor c = matmul(Tensor::matrix(2, 2, {1, 2, 3, 4}), Tensor::matrix(2, 1, {0, 1}));
  EXPECT_EQ(c, Tensor::matrix(2, 1, {2, 4}));
}

TEST(Matmul, MatchesTripleLoopOracle) {
  Rng rng(11);
  const Tensor a = rng.normal_tensor({3, 4}, 1.0);
  const Tensor b = rng.normal_tensor({4, 2}, 1.0);
  EXPECT_LE(max_abs_diff(matmul(a, b), triple_loop_matmul(a, b)), 1e-12);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(Tensor::zeros(2, 3), Tensor::zeros(2, 3));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3] x [2x3]"), std::string::npos) << msg;
  }
}

TEST(Softmax, UniformRow) {
  const Tensor y = softmax_rows(Tensor::matrix(1, 3, {0, 0, 0}));
  for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(y(0, j), 1.0 / 3.0, 1e-12);
}

TEST(Softmax, LargeLogitsDoNotOverflow) {
  const Tensor y = softmax_rows(Tensor::matrix(1, 2, {1000, 0}));
  EXPECT_NEAR(y(0, 0), 1.0, 1e-12);
  EXPECT_NEAR(y(0, 1), 0.0, 1e-12);
  EXPECT_TRUE(y.all_finite());
}

TEST(Softmax, MatchesQuadPrecisionOracle) {
  const Tensor y = softmax_rows(Tensor::matrix(1, 3, {1, 2, 3}));
  __float128 e[3], s = 0;
  for (int j = 0; j < 3; ++j) s += (e[j] = expq(static_cast<__float128>(j + 1)));
  for (int j = 0; j < 3; ++j) EXPECT_NEAR(y(0, j), static_cast<double>(e[j] / s), 1e-12);
}

TEST(Softmax, RowsSumToOneProperty) {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const Tensor x = rng.normal_tensor({4, 7}, 20.0);
    const bool causal = trial % 2 == 1;
    const Tensor y = softmax_rows(x, causal);
    for (std::size_t i = 0; i < 4; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < 7; ++j) {
        EXPECT_GE(y(i, j), 0.0);
        if (causal && j > i) EXPECT_EQ(y(i, j), 0.0);
        s += y(i, j);
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Cosine, IdentityAntipodalAndAnalytic) {
  const Tensor x = Tensor::vector({0.3, -1.2, 2.5});
  EXPECT_DOUBLE_EQ(cosine(x, x), 1.0);
  EXPECT_DOUBLE_EQ(cosine(x, -1.0 * x), -1.0);
  EXPECT_NEAR(cosine(Tensor::vector({1, 0}), Tensor::vector({1, 1})), 0.7071067811865475, 1e-15);
}

TEST(Cosine, ZeroNormIsDegenerate) {
  EXPECT_THROW(cosine(Tensor::vector({0, 0}), Tensor::vector({1, 1})), DegenerateVectorError);
}

TEST(Cosine, AlwaysWithinUnitInterval) {
  Rng rng(5);
  for (int trial = 0; trial < 1000; ++trial) {
    const Tensor a = rng.normal_tensor({5}, 1.0);
    const Tensor b = trial % 3 == 0 ? 1e-3 * a : rng.normal_tensor({5}, 1.0);
    const double c = cosine(a, b);
    EXPECT_GE(c, -1.0);
    EXPECT_LE(c, 1.0);
  }
}

TEST(Backward, SumGivesOnes) {
  GradTape tape;
  const Var x = tape.parameter(Tensor::vector({1, -2, 3}));
  const auto g = tape.backward(ad::sum(x));
  for (double v : g[x].data()) EXPECT_EQ(v, 1.0);
}

TEST(Backward, SquaredNormGivesTwiceX) {
  GradTape tape;
  const Tensor xv = Tensor::vector({1.5, -2, 0.25});
  const Var x = tape.parameter(xv);
  const auto g = tape.backward(ad::sum_squares(x));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(g[x][i], 2.0 * xv[i]);
}

TEST(Backward, NonScalarLossIsRejected) {
  GradTape tape;
  const Var x = tape.parameter(Tensor::vector({1, 2}));
  EXPECT_THROW(tape.backward(x), ContractError);
}

TEST(Backward, ConstantsLeaveNoTapeEntries) {
  GradTape tape;
  const Var a = tape.constant(Tensor::matrix(2, 2, {1, 2, 3, 4}));
  const Var b = tape.constant(Tensor::matrix(2, 2, {1, 0, 0, 1}));
  ad::gelu(ad::matmul(a, b));
  EXPECT_EQ(tape.differentiable_size(), 0u);
}

TEST(Backward, DeterministicForFixedTape) {
  Rng rng(2);
  const Tensor a = rng.normal_tensor({3, 4}, 1.0), b = rng.normal_tensor({4, 3}, 1.0);
  auto run = [&] {
    GradTape tape;
    const Var x = tape.parameter(a), y = tape.parameter(b);
    const auto g = tape.backward(ad::sum(ad::softmax_rows(ad::matmul(x, y), true)));
    return std::pair{g[x], g[y]};
  };
  EXPECT_EQ(run(), run());
}

// Every differentiable op composed into one loss, checked against central
// finite differences.
TEST(Backward, CompositeLossMatchesFiniteDifferences) {
  Rng rng(17);
  const std::vector<Tensor> params = {
      rng.normal_tensor({3, 4}, 0.7), rng.normal_tensor({4, 4}, 0.5), rng.normal_tensor({4}, 0.3),
      rng.normal_tensor({4}, 0.3),    rng.normal_tensor({5, 4}, 0.8), rng.normal_tensor({6, 4}, 0.6),
  };
  const Objective f = [](GradTape&, std::span<const Var> p) {
    Var h = ad::matmul(p[0], p[1]);
    h = ad::add_bias(ad::gelu(h), p[2]);
    h = ad::layer_norm(h, p[3], p[2]);
    const Var att = ad::softmax_rows(ad::matmul_nt(h, h), true);
    Var mixed = ad::matmul(att, h);
    mixed = ad::concat_rows({mixed, ad::gather_rows(p[4], {1, 3})});
    const Var left = ad::slice_cols(mixed, 0, 2), right = ad::slice_cols(mixed, 2, 4);
    mixed = ad::concat_cols({right, left});
    const Var cos = ad::cosine_rows(mixed, p[5]);
    std::vector<char> mask(cos.value().size(), 0);
    for (std::size_t i = 0; i < cos.rows(); ++i) mask[i * cos.cols() + (i % cos.cols())] = mask[i * cos.cols() + 5] = 1;
    const Var lse = ad::masked_logsumexp_rows(cos, mask);
    const Var ls = ad::log_softmax_rows(ad::slice_rows(mixed, 1, 4));
    const Var picked = ad::pick_cols(ls, {0, 3, 1});
    const Var ce = ad::cross_entropy_sum(mixed, {{0, 1}, {4, 2}});
    Var loss = ad::add(ad::sum(lse), ad::scale(ad::sum(picked), -0.5));
    loss = ad::add(loss, ce);
    loss = ad::add(loss, ad::scale(ad::sum_squares(ad::sub(mixed, ad::mul(mixed, mixed))), 0.01));
    return ad::mean(ad::concat_rows({ad::scale(loss, 1.0), ad::sum(att)}));
  };
  EXPECT_LT(grad_check(f, params, 1e-5), 1e-4);
}

TEST(GradCheck, QuadraticFormIsExactUpToRoundoff) {
  Rng rng(1);
  const Tensor a = rng.normal_tensor({4, 4}, 1.0);
  const Objective f = [&](GradTape& tape, std::span<const Var> p) {
    return ad::sum(ad::mul(p[0], ad::matmul(tape.constant(a), p[0])));
  };
  EXPECT_LT(grad_check(f, {rng.normal_tensor({4, 1}, 1.0)}, 1e-5), 1e-9);
}

TEST(GradCheck, NonFiniteObjectiveIsAnEvaluationError) {
  const Objective f = [](GradTape& tape, std::span<const Var> p) {
    return ad::scale(ad::sum(p[0]), std::numeric_limits<double>::infinity());
  };
  EXPECT_THROW(grad_check(f, {Tensor::vector({1.0})}, 1e-5), EvaluationError);
}

TEST(AdamW, DecoupledDecayShrinksWeightsWithoutGradient) {
  Tensor w = Tensor::vector({1.0, -2.0});
  AdamW opt({.lr = 0.1, .weight_decay = 0.5});
  opt.step({&w}, {Tensor::vector({0.0, 0.0})});
  EXPECT_DOUBLE_EQ(w[0], 1.0 - 0.1 * 0.5 * 1.0);
  EXPECT_DOUBLE_EQ(w[1], -2.0 - 0.1 * 0.5 * -2.0);
}

TEST(AdamW, FirstStepMovesByLearningRate) {
  Tensor w = Tensor::vector({0.0});
  AdamW opt({.lr = 0.01, .weight_decay = 0.0});
  opt.step({&w}, {Tensor::vector({3.0})});
  EXPECT_NEAR(w[0], -0.01, 1e-9);
}
