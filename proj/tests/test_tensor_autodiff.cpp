#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "emphasis/autodiff.hpp"
#include "emphasis/grad_check.hpp"
#include "support/op_cases.hpp"
#include "support/oracles.hpp"

using emphasis::ContractError;
using emphasis::DimensionError;
using emphasis::Shape;
using emphasis::Tensor;
using emphasis::ad::Tape;
using emphasis::ad::Var;
namespace ad = emphasis::ad;
using namespace gradcase;

TEST(Matmul, IdentityAndSelector) {
  Tape t;
  Var i2 = t.constant(Tensor::matrix(2, 2, {1, 0, 0, 1}));
  Var m = t.constant(Tensor::matrix(2, 2, {1, 2, 3, 4}));
  EXPECT_EQ(values(ad::matmul(i2, m).value()), (std::vector<double>{1, 2, 3, 4}));
  Var sel = ad::matmul(t.constant(Tensor::matrix(1, 2, {1, 0})), t.constant(Tensor::matrix(2, 1, {2, 5})));
  EXPECT_EQ(values(sel.value()), (std::vector<double>{2}));
}

TEST(Matmul, MatchesTripleLoop) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor a = random_tensor(3, 4, rng), b = random_tensor(4, 2, rng);
    Tape t;
    Tensor c = ad::matmul(t.constant(a), t.constant(b)).value();
    for (std::size_t i = 0; i < 3; ++i) {
      for (std::size_t j = 0; j < 2; ++j) {
        long double s = 0;
        for (std::size_t k = 0; k < 4; ++k) s += static_cast<long double>(a(i, k)) * b(k, j);
        EXPECT_NEAR(c(i, j), static_cast<double>(s), 1e-14);
      }
    }
  }
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Tape t;
  try {
    ad::matmul(t.constant(Tensor(Shape{2, 3})), t.constant(Tensor(Shape{2, 3})));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("2x3"), std::string::npos) << msg;
    EXPECT_GE(std::count(msg.begin(), msg.end(), 'x'), 2) << msg;
  }
}

TEST(Add, OnlyRowBiasBroadcasts) {
  Tape t;
  EXPECT_THROW(ad::add(t.constant(Tensor(Shape{3, 4})), t.constant(Tensor(Shape{3, 1}))), DimensionError);
  EXPECT_THROW(ad::add(t.constant(Tensor(Shape{3, 4})), t.constant(Tensor(Shape{2, 4}))), DimensionError);
  EXPECT_NO_THROW(ad::add(t.constant(Tensor(Shape{3, 4})), t.constant(Tensor(Shape{1, 4}))));
}

TEST(Softmax, KnownRows) {
  Tape t;
  auto p = ad::softmax_rows(t.constant(Tensor::matrix(1, 3, {0, 0, 0}))).value();
  for (double v : p.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
  auto big = ad::softmax_rows(t.constant(Tensor::matrix(1, 3, {1000, 0, 0}))).value();
  EXPECT_EQ(big[0], 1.0);
  EXPECT_LT(big[1], 1e-300);
  auto q = ad::softmax_rows(t.constant(Tensor::matrix(1, 3, {1, 2, 3}))).value();
  long double z = std::exp(1.0L) + std::exp(2.0L) + std::exp(3.0L);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(q[i], static_cast<double>(std::exp(static_cast<long double>(i + 1)) / z), 1e-15);
}

TEST(Softmax, RowsSumToOne) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    Tape t;
    auto p = ad::softmax_rows(t.constant(random_tensor(4, 5, rng, -30, 30))).value();
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0;
      for (double v : p.row(r)) {
        EXPECT_GE(v, 0.0);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Softmax, MaskedEntriesAreExactlyZero) {
  std::mt19937_64 rng(3);
  Tape t;
  auto p = ad::masked_softmax_rows(t.constant(random_tensor(3, 4, rng, -5, 5)), {{0, 3}, {2}, {0, 1, 2, 3}}).value();
  EXPECT_EQ(p(0, 1), 0.0);
  EXPECT_EQ(p(0, 2), 0.0);
  EXPECT_EQ(p(1, 2), 1.0);
  EXPECT_EQ(p(1, 0), 0.0);
  EXPECT_NEAR(p(0, 0) + p(0, 3), 1.0, 1e-12);
}

TEST(Activation, KnownValues) {
  Tape t;
  Var x = t.constant(Tensor::matrix(1, 3, {0.0, -1.0, 0.7}));
  EXPECT_EQ(ad::activate(x, {ad::Activation::Kind::sigmoid}).value()[0], 0.5);
  EXPECT_DOUBLE_EQ(ad::activate(x, {ad::Activation::Kind::leaky_relu, 0.2}).value()[1], -0.2);
  EXPECT_NEAR(ad::activate(x, {ad::Activation::Kind::tanh}).value()[2], static_cast<double>(std::tanh(0.7L)), 1e-15);
}

TEST(Activation, LeakyReluDerivativeAtZeroIsSlope) {
  Tape t;
  Var x = t.variable(Tensor::matrix(1, 2, {0.0, 1.0}));
  t.backward(ad::sum(ad::leaky_relu(x, 0.2)));
  EXPECT_DOUBLE_EQ(t.grad(x)[0], 0.2);
  EXPECT_DOUBLE_EQ(t.grad(x)[1], 1.0);
}

TEST(Log, RejectsNonPositive) {
  Tape t;
  EXPECT_THROW(ad::log(t.constant(Tensor::matrix(1, 2, {1.0, 0.0}))), ContractError);
}

TEST(Backward, SumAndSquare) {
  Tape t;
  Var x = t.variable(Tensor::matrix(2, 2, {1, -2, 3, 0.5}));
  t.backward(ad::sum(x));
  for (double g : t.grad(x)) EXPECT_EQ(g, 1.0);

  Tape u;
  Tensor p = Tensor::matrix(2, 2, {1, -2, 3, 0.5});
  Var y = u.variable(p);
  u.backward(ad::sum(ad::mul(y, y)));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(u.grad(y)[i], 2 * p[i]);
}

TEST(Backward, RejectsNonScalarAndForeignLoss) {
  Tape t, other;
  Var x = t.variable(Tensor::matrix(1, 2, {1, 2}));
  EXPECT_THROW(t.backward(x), ContractError);
  Var y = other.variable(Tensor::scalar(1.0));
  EXPECT_THROW(t.backward(y), ContractError);
}

TEST(Backward, RepeatedUseAccumulates) {
  Tensor w = Tensor::matrix(1, 2, {3, -1});
  w.set_requires_grad(true);
  Tape t;
  Var a = t.param(w);
  t.backward(ad::sum(ad::add(a, ad::scale(a, 2.0))));
  EXPECT_EQ(w.grad()[0], 3.0);
  EXPECT_EQ(w.grad()[1], 3.0);
}

TEST(Backward, SecondCallWithoutZeroingDoubles) {
  Tensor w = Tensor::matrix(1, 3, {0.3, -0.7, 1.1});
  w.set_requires_grad(true);
  Tape t;
  Var loss = ad::sum(ad::tanh(ad::mul(t.param(w), t.param(w))));
  t.backward(loss);
  std::vector<double> once(w.grad().begin(), w.grad().end());
  t.backward(loss);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(w.grad()[i], 2 * once[i]);
}

TEST(Backward, DeferredFlushMatchesDirect) {
  std::mt19937_64 rng(4);
  Tensor w = random_tensor(3, 3, rng);
  w.set_requires_grad(true);
  Tensor x = random_tensor(2, 3, rng);
  auto build = [&](Tape& t) { return ad::sum(ad::sigmoid(ad::matmul(ad::matmul(t.constant(x), t.param(w)), t.param(w)))); };
  Tape direct;
  direct.backward(build(direct));
  std::vector<double> a(w.grad().begin(), w.grad().end());
  w.clear_grad();
  Tape deferred;
  deferred.backward(build(deferred), false);
  EXPECT_FALSE(w.has_grad());
  deferred.flush_param_grads();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(w.grad()[i], a[i], 1e-15);
}

TEST(Backward, ForwardIsBitwiseDeterministic) {
  std::mt19937_64 rng(5);
  Tensor a = random_tensor(4, 6, rng), b = random_tensor(6, 5, rng);
  auto run = [&] {
    Tape t;
    return ad::softmax_rows(ad::tanh(ad::matmul(t.constant(a), t.constant(b)))).value();
  };
  EXPECT_TRUE(run().same_values(run()));
}

TEST(GradCheck, LinearAndSigmoid) {
  std::mt19937_64 rng(6);
  Tensor p = random_tensor(3, 3, rng);
  EXPECT_LE(ad::grad_check([](Tape&, Var x) { return ad::sum(x); }, p), 1e-10);
  EXPECT_LT(ad::grad_check([](Tape&, Var x) { return ad::sum(ad::sigmoid(x)); }, p), 1e-6);
}

TEST(GradCheck, Contracts) {
  Tensor p = Tensor::matrix(1, 2, {1, 2});
  EXPECT_THROW(ad::grad_check([](Tape&, Var x) { return x; }, p), ContractError);
  EXPECT_THROW(ad::grad_check([](Tape&, Var x) { return ad::sum(x); }, p, 0.0), ContractError);
  EXPECT_THROW(ad::grad_check([](Tape&, Var x) { return ad::sum(x); }, p, 1e-2), ContractError);
}

TEST(GradCheck, DetectsAWrongGradient) {
  // A deliberately broken op: forward x^2, backward claims 3x.
  auto broken = [](Tape& t, Var x) {
    Tensor y = x.value();
    for (double& v : y.data()) v *= v;
    const std::size_t xi = x.id();
    Var out = t.record(std::move(y), {x}, [xi](Tape& tp, std::size_t self) {
      auto g = tp.grad(xi);
      const Tensor& xv = tp.value(xi);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += 3 * xv[i] * tp.grad(self)[i];
    });
    return ad::sum(out);
  };
  EXPECT_GT(ad::grad_check(broken, Tensor::matrix(1, 2, {1.0, -2.0})), 0.1);
}

class OpGradient : public ::testing::TestWithParam<OpCase> {};

TEST_P(OpGradient, MatchesCentralDifferencesAt100Points) {
  const OpCase& c = GetParam();
  EXPECT_LT(op_worst_error(c, 100, 1000), 1e-4) << c.name;
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradient, ::testing::ValuesIn(op_cases()),
                         [](const auto& info) { return std::string(info.param.name); });

TEST(TensorType, ShapeContracts) {
  EXPECT_THROW(Tensor(Shape{2, 0}), DimensionError);
  EXPECT_THROW(Tensor(Shape{1, 1, 1, 1}), DimensionError);
  EXPECT_THROW(Tensor(Shape{2, 2}, std::vector<double>(3)), DimensionError);
  Tensor t(Shape{2, 3});
  EXPECT_EQ(t.size(), 6u);
  t.ensure_grad();
  EXPECT_EQ(t.grad().size(), t.size());
}
