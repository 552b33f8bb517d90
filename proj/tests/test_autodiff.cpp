#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "prw/autodiff.hpp"
#include "prw/gradcheck.hpp"
#include "test_util.hpp"

namespace prw {
namespace {

using testing::loop_matmul;
using testing::max_abs_diff;
using testing::random_tensor;

TEST(Forward, MatmulOneHotSelectsRow) {
  Tape t;
  Var a = t.constant(Tensor::matrix(1, 2, {1, 0}));
  Var b = t.constant(Tensor::matrix(2, 2, {1, 2, 3, 4}));
  Var c = ad::matmul(a, b);
  EXPECT_EQ(c.shape(), (Shape{1, 2}));
  EXPECT_EQ(c.value().data, (std::vector<double>{1, 2}));
}

TEST(Forward, SoftplusOfZeroIsLn2) {
  Tape t;
  Var s = ad::softplus(t.constant(Tensor::matrix(1, 1, {0.0})));
  EXPECT_NEAR(s.value().data[0], 0.6931471805599453, 1e-15);
}

TEST(Forward, SoftmaxOfZerosIsUniform) {
  Tape t;
  Var s = ad::softmax_rows(t.constant(Tensor::matrix(1, 3, {0, 0, 0})));
  for (double v : s.value().data) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Forward, MatmulMatchesLoopOracle) {
  Rng rng(11);
  for (int rep = 0; rep < 20; ++rep) {
    const auto m = static_cast<std::size_t>(uniform_int(rng, 1, 8));
    const auto k = static_cast<std::size_t>(uniform_int(rng, 1, 8));
    const auto n = static_cast<std::size_t>(uniform_int(rng, 1, 8));
    Tensor a = random_tensor(m, k, rng), b = random_tensor(k, n, rng);
    Tape t;
    Var c = ad::matmul(t.constant(a), t.constant(b));
    EXPECT_LT(max_abs_diff(c.value(), loop_matmul(a, b)), 1e-12);
  }
}

TEST(Forward, ShapeMismatchNamesOpAndShapes) {
  Tape t;
  Var a = t.constant(Tensor({2, 3}));
  Var b = t.constant(Tensor({2, 3}));
  try {
    ad::matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("matmul"), std::string::npos) << msg;
    EXPECT_NE(msg.find("2x3"), std::string::npos) << msg;
  }
  EXPECT_THROW(ad::add(a, t.constant(Tensor({3, 2}))), ShapeError);
}

TEST(Forward, NonFiniteIntermediateIsRejected) {
  Tape t;
  Var a = t.constant(Tensor::matrix(1, 1, {1e308}));
  EXPECT_THROW(ad::mul(a, a), NonFiniteError);
  EXPECT_THROW(t.constant(Tensor::matrix(1, 1, {std::nan("")})), NonFiniteError);
}

TEST(Forward, NoTapeGradWithoutRequiresGrad) {
  Tape t;
  Var a = t.constant(Tensor::matrix(1, 2, {1, 2}));
  Var s = ad::sum(ad::mul(a, a));
  EXPECT_FALSE(t.needs_grad(s.id()));
}

TEST(Backward, SquareAtThree) {
  Tape t;
  Var x = t.input(Tensor::matrix(1, 1, {3.0}));
  t.backward(ad::mul(x, x));
  EXPECT_DOUBLE_EQ(t.grad(x).data[0], 6.0);
}

TEST(Backward, MseGradient) {
  Tape t;
  Var a = t.input(Tensor::matrix(1, 2, {1, 2}));
  Var b = t.constant(Tensor::matrix(1, 2, {0, 0}));
  t.backward(ad::mse(a, b));
  const Tensor g = t.grad(a);
  EXPECT_NEAR(g.data[0], 1.0, 1e-12);
  EXPECT_NEAR(g.data[1], 2.0, 1e-12);
  // Oracle: central differences at h = 1e-5.
  Tensor fd = finite_difference_gradient(
      [](const Tensor& p) { return 0.5 * (p.data[0] * p.data[0] + p.data[1] * p.data[1]); },
      Tensor::matrix(1, 2, {1, 2}), 1e-5);
  EXPECT_NEAR(fd.data[0], g.data[0], 1e-8);
  EXPECT_NEAR(fd.data[1], g.data[1], 1e-8);
}

TEST(Backward, SoftmaxMseCompositeMatchesFiniteDifferences) {
  Rng rng(3);
  Tensor x0 = random_tensor(1, 4, rng);
  Tensor target = random_tensor(1, 4, rng, 0.3);
  auto f = [&](const Tensor& p) {
    Tape t;
    return ad::mse(ad::softmax_rows(t.constant(p)), t.constant(target)).value().data[0];
  };
  Tape t;
  Var x = t.input(x0);
  t.backward(ad::mse(ad::softmax_rows(x), t.constant(target)));
  Tensor fd = finite_difference_gradient(f, x0, 1e-5);
  EXPECT_LT(max_relative_error(t.grad(x).data, fd.data, {}, 1e-12), 1e-6);
}

TEST(Backward, SeedShapeMustMatchOutput) {
  Tape t;
  Var x = t.input(Tensor::matrix(1, 2, {1, 2}));
  Var y = ad::scale(x, 2.0);
  EXPECT_THROW(t.backward(y, Tensor({2, 1})), ShapeError);
  t.backward(y, Tensor::matrix(1, 2, {1, 1}));
  EXPECT_EQ(t.grad(x).data, (std::vector<double>{2, 2}));
}

TEST(Backward, DanglingNodeAfterClear) {
  Tape t;
  Var x = t.input(Tensor::matrix(1, 1, {2.0}));
  Var y = ad::mul(x, x);
  t.clear();
  EXPECT_THROW(t.backward(y), TapeError);
  EXPECT_THROW(y.value(), TapeError);
}

TEST(Backward, BoundParameterAccumulates) {
  Tensor w = Tensor::matrix(1, 1, {3.0});
  w.requires_grad = true;
  for (int i = 0; i < 2; ++i) {
    Tape t;
    Var p = t.param(w);
    t.backward(ad::mul(p, p));
  }
  ASSERT_TRUE(w.grad.has_value());
  EXPECT_DOUBLE_EQ((*w.grad)[0], 12.0);
  Tensor frozen = Tensor::matrix(1, 1, {3.0});
  Tape t;
  Var p = t.param(frozen);
  Var x = t.input(Tensor::matrix(1, 1, {1.0}));
  t.backward(ad::mul(p, x));
  EXPECT_FALSE(frozen.grad.has_value());
}

TEST(FiniteDifference, Examples) {
  Tensor x = Tensor::matrix(1, 1, {3.0});
  Tensor g = finite_difference_gradient([](const Tensor& p) { return p.data[0] * p.data[0]; }, x, 1e-5);
  EXPECT_NEAR(g.data[0], 6.0, 1e-8);
  Tensor z = Tensor::matrix(1, 1, {0.0});
  Tensor gs = finite_difference_gradient([](const Tensor& p) { return ad::softplus_value(p.data[0]); }, z, 1e-5);
  EXPECT_NEAR(gs.data[0], 0.5, 1e-8);
  EXPECT_THROW(finite_difference_gradient([](const Tensor&) { return 0.0; }, z, 0.0), Error);
}

// Every differentiable kernel against central differences on 100 random
// instances with dims <= 8.
struct OpCase {
  const char* name;
  std::size_t n_inputs;
  std::function<Var(const std::vector<Var>&, std::size_t, std::size_t)> apply;
  bool same_shape = true;
};

Tensor input_for(const OpCase& op, std::size_t idx, std::size_t m, std::size_t n, Rng& rng) {
  std::string name = op.name;
  if (name == "matmul" && idx == 1) return random_tensor(n, 3, rng);
  if ((name == "add_row" || name == "scale_rows") && idx == 1)
    return name == "add_row" ? random_tensor(1, n, rng) : random_tensor(m, 1, rng);
  return random_tensor(m, n, rng);
}

TEST(GradientProperty, EveryKernelMatchesFiniteDifferences) {
  const std::vector<OpCase> ops = {
      {"matmul", 2, [](const std::vector<Var>& v, std::size_t, std::size_t) { return ad::matmul(v[0], v[1]); }},
      {"add", 2, [](const std::vector<Var>& v, std::size_t, std::size_t) { return ad::add(v[0], v[1]); }},
      {"sub", 2, [](const std::vector<Var>& v, std::size_t, std::size_t) { return ad::sub(v[0], v[1]); }},
      {"mul", 2, [](const std::vector<Var>& v, std::size_t, std::size_t) { return ad::mul(v[0], v[1]); }},
      {"scale", 1, [](const std::vector<Var>& v, std::size_t, std::size_t) { return ad::scale(v[0], -1.7); }},
      {"softplus", 1, [](const std::vector<Var>& v, std::size_t, std::size_t) { return ad::softplus(v[0]); }},
      {"tanh", 1, [](const std::vector<Var>& v, std::size_t, std::size_t) { return ad::tanh(v[0]); }},
      {"softmax", 1, [](const std::vector<Var>& v, std::size_t, std::size_t) { return ad::softmax_rows(v[0]); }},
      {"transpose", 1, [](const std::vector<Var>& v, std::size_t, std::size_t) { return ad::transpose(v[0]); }},
      {"concat_rows", 2,
       [](const std::vector<Var>& v, std::size_t, std::size_t) { return ad::concat_rows({v[0], v[1]}); }},
      {"concat_cols", 2,
       [](const std::vector<Var>& v, std::size_t, std::size_t) { return ad::concat_cols({v[0], v[1]}); }},
      {"slice_rows", 1,
       [](const std::vector<Var>& v, std::size_t m, std::size_t) { return ad::slice_rows(v[0], m / 2, m); }},
      {"slice_cols", 1,
       [](const std::vector<Var>& v, std::size_t, std::size_t n) { return ad::slice_cols(v[0], 0, (n + 1) / 2); }},
      {"add_row", 2, [](const std::vector<Var>& v, std::size_t, std::size_t) { return ad::add_row(v[0], v[1]); }},
      {"scale_rows", 2,
       [](const std::vector<Var>& v, std::size_t, std::size_t) { return ad::scale_rows(v[0], v[1]); }},
      {"mean", 1, [](const std::vector<Var>& v, std::size_t, std::size_t) { return ad::mean(v[0]); }},
      {"mse", 2, [](const std::vector<Var>& v, std::size_t, std::size_t) { return ad::mse(v[0], v[1]); }},
      {"attention", 3,
       [](const std::vector<Var>& v, std::size_t, std::size_t n) { return ad::attention(v[0], v[1], v[2], n % 2 == 0 ? 2 : 1); }},
  };
  Rng rng(20240);
  for (const auto& op : ops) {
    double worst = 0.0;
    for (int rep = 0; rep < 100; ++rep) {
      const auto m = static_cast<std::size_t>(uniform_int(rng, 1, 8));
      const auto n = static_cast<std::size_t>(uniform_int(rng, 1, 8));
      std::vector<Tensor> xs;
      for (std::size_t i = 0; i < op.n_inputs; ++i) xs.push_back(input_for(op, i, m, n, rng));
      // Random projection makes the scalar objective sensitive to every output.
      Tensor proj;
      {
        Tape t;
        std::vector<Var> vs;
        for (auto& x : xs) vs.push_back(t.constant(x));
        Var out = op.apply(vs, m, n);
        proj = random_tensor(out.rows(), out.cols(), rng);
      }
      auto objective = [&](const std::vector<Tensor>& in, Tape& t, std::vector<Var>& vs) {
        vs.clear();
        for (auto& x : in) vs.push_back(t.input(x));
        return ad::sum(ad::mul(op.apply(vs, m, n), t.constant(proj)));
      };
      Tape t;
      std::vector<Var> vs;
      t.backward(objective(xs, t, vs));
      for (std::size_t i = 0; i < xs.size(); ++i) {
        Tensor analytic = t.grad(vs[i]);
        Tensor fd = finite_difference_gradient(
            [&](const Tensor& p) {
              std::vector<Tensor> in = xs;
              in[i] = p;
              Tape tt;
              std::vector<Var> vv;
              return objective(in, tt, vv).value().data[0];
            },
            xs[i], 1e-5);
        worst = std::max(worst, max_relative_error(analytic.data, fd.data, {}, 1e-6));
      }
    }
    EXPECT_LT(worst, 1e-4) << op.name;
  }
}

TEST(Properties, SoftmaxIsNormalized) {
  Rng rng(5);
  for (int rep = 0; rep < 100; ++rep) {
    Tensor x = random_tensor(static_cast<std::size_t>(uniform_int(rng, 1, 8)),
                             static_cast<std::size_t>(uniform_int(rng, 1, 8)), rng, 10.0);
    Tape t;
    const Tensor p = ad::softmax_rows(t.constant(x)).value();
    for (std::size_t i = 0; i < p.rows(); ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < p.cols(); ++j) {
        EXPECT_GE(p.at(i, j), 0.0);
        s += p.at(i, j);
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Properties, ConcatThenSliceRoundTrips) {
  Rng rng(6);
  Tensor a = random_tensor(3, 4, rng), b = random_tensor(5, 4, rng);
  Tape t;
  Var c = ad::concat_rows({t.constant(a), t.constant(b)});
  EXPECT_TRUE(ad::slice_rows(c, 0, 3).value().same_values(a));
  EXPECT_TRUE(ad::slice_rows(c, 3, 8).value().same_values(b));
  Tensor d = random_tensor(3, 2, rng);
  Var e = ad::concat_cols({t.constant(a), t.constant(d)});
  EXPECT_TRUE(ad::slice_cols(e, 0, 4).value().same_values(a));
  EXPECT_TRUE(ad::slice_cols(e, 4, 6).value().same_values(d));
}

TEST(Properties, ConcatRoutesGradientToItsSegment) {
  Rng rng(7);
  Tape t;
  Var a = t.input(random_tensor(2, 3, rng));
  Var b = t.input(random_tensor(4, 3, rng));
  Var c = ad::concat_rows({a, b});
  t.backward(ad::sum(ad::slice_rows(c, 2, 6)));
  for (double g : t.grad(a).data) EXPECT_EQ(g, 0.0);
  for (double g : t.grad(b).data) EXPECT_EQ(g, 1.0);
}

TEST(Properties, AttentionMatchesLoopOracle) {
  Rng rng(8);
  for (std::size_t heads : {1u, 2u, 4u}) {
    Tensor q = random_tensor(5, 8, rng), k = random_tensor(7, 8, rng), v = random_tensor(7, 8, rng);
    Tape t;
    Var o = ad::attention(t.constant(q), t.constant(k), t.constant(v), heads);
    EXPECT_LT(max_abs_diff(o.value(), testing::loop_attention(q, k, v, heads)), 1e-12);
  }
}

}  // namespace
}  // namespace prw
