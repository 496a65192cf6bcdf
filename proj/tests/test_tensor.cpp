// Copyright 2026 The msmk Authors
// Licensed under the Apache License, Version 2.0

#include <cmath>
#include <vector>

#include "doctest.h"
#include "msmk/gradcheck.hpp"
#include "msmk/layers.hpp"
#include "msmk/random.hpp"
#include "msmk/tensor.hpp"

using namespace msmk;

namespace {

Matrix<double> random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c, double lo = -1, double hi = 1) {
  Matrix<double> m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(lo, hi);
  return m;
}

Matrix<float> mat(std::initializer_list<std::initializer_list<float>> rows) {
  Matrix<float> m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.begin()->size()));
  Eigen::Index r = 0;
  for (auto row : rows) {
    Eigen::Index c = 0;
    for (float v : row) m(r, c++) = v;
    ++r;
  }
  return m;
}

}  // namespace

TEST_CASE("matmul identity and selector") {
  Tape<float> tape;
  auto eye = tape.constant(Matrix<float>::Identity(2, 2));
  auto b = tape.constant(mat({{1, 2}, {3, 4}}));
  CHECK(matmul(eye, b).value() == b.value());

  auto sel = tape.constant(mat({{1, 0}}));
  auto col = tape.constant(mat({{5}, {7}}));
  CHECK(matmul(sel, col).item() == 5.0f);
}

TEST_CASE("matmul matches triple loop") {
  Rng rng(11);
  Matrix<double> a = random_matrix(rng, 3, 4), b = random_matrix(rng, 4, 2);
  Tape<float> tape;
  auto y = matmul(tape.constant(a.cast<float>()), tape.constant(b.cast<float>()));
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 2; ++j) {
      double acc = 0;
      for (int k = 0; k < 4; ++k) acc += double(float(a(i, k))) * double(float(b(k, j)));
      CHECK(std::abs(y.value()(i, j) - acc) < 1e-6);
    }
  }
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tape<float> tape;
  auto a = tape.constant(Matrix<float>::Zero(2, 3));
  auto b = tape.constant(Matrix<float>::Zero(2, 3));
  try {
    matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("@ [2x3]") != std::string::npos);
  }
}

TEST_CASE("softmax") {
  Tape<float> tape;
  SUBCASE("uniform") {
    auto s = softmax(tape.constant(mat({{0, 0, 0}})));
    for (int i = 0; i < 3; ++i) CHECK(s.value()(0, i) == doctest::Approx(1.0 / 3).epsilon(1e-7));
  }
  SUBCASE("large magnitudes do not overflow") {
    auto s = softmax(tape.constant(mat({{1000, 0, 0}})));
    CHECK(s.value().allFinite());
    CHECK(s.value()(0, 0) == doctest::Approx(1.0));
    CHECK(s.value()(0, 1) < 1e-30);
  }
  SUBCASE("matches 64-bit exp/sum oracle") {
    Rng rng(3);
    Matrix<double> x = random_matrix(rng, 1, 9, -5, 5);
    auto s = softmax(tape.constant(x.cast<float>()));
    double z = 0;
    for (int i = 0; i < 9; ++i) z += std::exp(double(float(x(0, i))));
    for (int i = 0; i < 9; ++i) CHECK(std::abs(s.value()(0, i) - std::exp(double(float(x(0, i)))) / z) < 1e-6);
  }
  SUBCASE("rows sum to one for magnitudes up to 1e3") {
    Rng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
      auto s = softmax(tape.constant(random_matrix(rng, 4, 7, -1000, 1000).cast<float>()));
      for (int r = 0; r < 4; ++r) CHECK(std::abs(s.value().row(r).cast<double>().sum() - 1.0) < 1e-6);
    }
  }
  SUBCASE("axis 0 normalizes columns") {
    auto s = softmax(tape.constant(mat({{1, 2}, {3, 4}, {5, 0}})), 0);
    for (int c = 0; c < 2; ++c) CHECK(s.value().col(c).sum() == doctest::Approx(1.0));
  }
  SUBCASE("non-finite input is a numeric error") {
    Matrix<float> bad = mat({{0, 1}});
    bad(0, 1) = std::numeric_limits<float>::infinity();
    CHECK_THROWS_AS(softmax(tape.constant(bad)), NumericError);
  }
}

TEST_CASE("elementwise activations") {
  Tape<float> tape;
  auto zero = tape.scalar(0.0f);
  CHECK(sigmoid(zero).item() == 0.5f);
  CHECK(silu(zero).item() == 0.0f);
  CHECK_THROWS_AS(log(tape.constant(mat({{1, 0}}))), NumericError);

  // GELU against the erf definition on [-5, 5].
  Matrix<double> grid(1, 1001);
  for (int i = 0; i <= 1000; ++i) grid(0, i) = -5.0 + i * 0.01;
  Tape<double> dt;
  auto g = gelu(dt.constant(grid));
  double worst = 0;
  for (int i = 0; i <= 1000; ++i) {
    const double x = grid(0, i);
    worst = std::max(worst, std::abs(g.value()(0, i) - 0.5 * x * (1 + std::erf(x / std::sqrt(2.0)))));
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("broadcasting is limited to scalars and trailing-axis rows") {
  Tape<float> tape;
  auto x = tape.constant(Matrix<float>::Ones(3, 4));
  CHECK(add(x, tape.scalar(2.0f)).value().isApproxToConstant(3.0f));
  CHECK(add(x, tape.constant(Matrix<float>::Ones(1, 4))).shape() == Shape{3, 4});
  CHECK_THROWS_AS(add(x, tape.constant(Matrix<float>::Ones(3, 1))), DimensionError);
  CHECK(expand(tape.constant(Matrix<float>::Ones(3, 1)), 3, 4).shape() == Shape{3, 4});
}

TEST_CASE("layer_norm") {
  Tape<double> tape;
  auto ones = tape.constant(Matrix<double>::Ones(1, 3));
  auto zeros = tape.constant(Matrix<double>::Zero(1, 3));
  SUBCASE("constant row normalizes to zero") {
    auto y = layer_norm(tape.constant(Matrix<double>::Constant(2, 3, 4.0)), ones, zeros, 1e-5);
    CHECK(y.value().cwiseAbs().maxCoeff() == 0.0);
  }
  SUBCASE("[1,2,3] with eps 0") {
    Matrix<double> x(1, 3);
    x << 1, 2, 3;
    auto y = layer_norm(tape.constant(x), ones, zeros, 0.0);
    CHECK(y.value()(0, 0) == doctest::Approx(-1.224744871391589));
    CHECK(y.value()(0, 1) == doctest::Approx(0.0));
    CHECK(y.value()(0, 2) == doctest::Approx(1.224744871391589));
  }
  SUBCASE("rows have zero mean and unit variance") {
    Rng rng(9);
    Tape<float> ft;
    auto y = layer_norm(ft.constant(random_matrix(rng, 5, 16, -3, 7).cast<float>()),
                        ft.constant(Matrix<float>::Ones(1, 16)), ft.constant(Matrix<float>::Zero(1, 16)), 0.0f);
    for (int r = 0; r < 5; ++r) {
      const auto row = y.value().row(r).cast<double>();
      CHECK(std::abs(row.mean()) < 1e-5);
      CHECK(std::abs((row.array() - row.mean()).square().mean() - 1.0) < 1e-5);
    }
  }
}

TEST_CASE("group_norm") {
  Rng rng(17);
  Tape<double> tape;
  const Matrix<double> xv = random_matrix(rng, 3, 12, -2, 2);
  auto x = tape.constant(xv);
  auto gain = tape.constant(random_matrix(rng, 1, 12, 0.5, 1.5));
  auto bias = tape.constant(random_matrix(rng, 1, 12));
  const double eps = 1e-5;

  CHECK(group_norm(x, 1, gain, bias, eps).value().isApprox(layer_norm(x, gain, bias, eps).value(), 1e-12));

  // groups == channels: each value standardized alone, so only the bias remains.
  auto per_channel = group_norm(x, 12, gain, bias, eps);
  CHECK((per_channel.value() - bias.value().replicate(3, 1)).cwiseAbs().maxCoeff() < 1e-12);

  auto y = group_norm(x, 4, gain, bias, eps);
  double worst = 0;
  for (int r = 0; r < 3; ++r) {
    for (int g = 0; g < 4; ++g) {
      double mu = 0, var = 0;
      for (int c = 0; c < 3; ++c) mu += xv(r, g * 3 + c);
      mu /= 3;
      for (int c = 0; c < 3; ++c) var += (xv(r, g * 3 + c) - mu) * (xv(r, g * 3 + c) - mu);
      var /= 3;
      for (int c = 0; c < 3; ++c) {
        const int ch = g * 3 + c;
        const double expect = (xv(r, ch) - mu) / std::sqrt(var + eps) * gain.value()(0, ch) + bias.value()(0, ch);
        worst = std::max(worst, std::abs(expect - y.value()(r, ch)));
      }
    }
  }
  CHECK(worst < 1e-5);
  CHECK_THROWS_AS(group_norm(x, 5, gain, bias, eps), DimensionError);
}

TEST_CASE("causal_depthwise_conv1d") {
  Tape<double> tape;
  Rng rng(23);
  const Matrix<double> xv = random_matrix(rng, 7, 3);
  auto x = tape.constant(xv);
  SUBCASE("K=1 unit kernel is identity") {
    CHECK(causal_depthwise_conv1d(x, tape.constant(Matrix<double>::Ones(1, 3))).value() == xv);
  }
  SUBCASE("delta at the last tap is identity") {
    Matrix<double> k(2, 3);
    k << 0, 0, 0, 1, 1, 1;
    CHECK(causal_depthwise_conv1d(x, tape.constant(k)).value() == xv);
  }
  SUBCASE("matches double loop") {
    const Matrix<double> kv = random_matrix(rng, 4, 3);
    auto y = causal_depthwise_conv1d(x, tape.constant(kv));
    for (int t = 0; t < 7; ++t) {
      for (int d = 0; d < 3; ++d) {
        double acc = 0;
        for (int k = 0; k < 4; ++k) {
          const int s = t - 4 + 1 + k;
          if (s >= 0) acc += kv(k, d) * xv(s, d);
        }
        CHECK(std::abs(acc - y.value()(t, d)) < 1e-6);
      }
    }
  }
}

TEST_CASE("backward") {
  Tape<double> tape;
  Matrix<double> xv(1, 2);
  xv << 1, 2;
  SUBCASE("sum gives ones") {
    auto x = tape.variable(xv);
    tape.backward(sum(x));
    CHECK(x.grad() == Matrix<double>::Ones(1, 2));
  }
  SUBCASE("sum of squares gives 2x") {
    auto x = tape.variable(xv);
    tape.backward(sum(square(x)));
    CHECK(x.grad()(0, 0) == 2.0);
    CHECK(x.grad()(0, 1) == 4.0);
  }
  SUBCASE("non-scalar loss is rejected") {
    auto x = tape.variable(xv);
    CHECK_THROWS_AS(tape.backward(x), ContractError);
  }
  SUBCASE("second backward without reset is rejected") {
    auto x = tape.variable(xv);
    auto l = sum(x);
    tape.backward(l);
    CHECK_THROWS_AS(tape.backward(l), ContractError);
    tape.reset();
    auto x2 = tape.variable(xv);
    CHECK_NOTHROW(tape.backward(sum(x2)));
  }
  SUBCASE("every requires_grad leaf gets a gradient, even if unused") {
    auto x = tape.variable(xv);
    auto unused = tape.variable(xv);
    tape.backward(sum(x));
    CHECK(unused.has_grad());
    CHECK(unused.grad().isZero());
  }
}

// Each differentiable op, on random tensors with dims <= 8, against central
// finite differences.
TEST_CASE("gradient check: every primitive") {
  Rng rng(101);
  for (int trial = 0; trial < 3; ++trial) {
    const Eigen::Index r = 1 + static_cast<Eigen::Index>(rng.below(5));
    const Eigen::Index c = 2 + static_cast<Eigen::Index>(rng.below(6));
    Matrix<double> a = random_matrix(rng, r, c);
    Matrix<double> b = random_matrix(rng, r, c);
    Matrix<double> row = random_matrix(rng, 1, c);
    Matrix<double> pos = random_matrix(rng, r, c, 0.5, 2.0);
    Matrix<double> w = random_matrix(rng, c, 3);
    Matrix<double> wsum = random_matrix(rng, r, c);  // fixed weights make reductions non-trivial
    Matrix<double> gain = random_matrix(rng, 1, c, 0.5, 1.5);
    Matrix<double> kern = random_matrix(rng, 3, c);

    auto weighted = [&](Tape<double>& t, const Tensor<double>& y) {
      return sum(mul(y, t.constant(Matrix<double>::Constant(y.rows(), y.cols(), 0.7)) + t.constant(
                            Matrix<double>::NullaryExpr(y.rows(), y.cols(), [](Eigen::Index i, Eigen::Index j) {
                              return 0.1 * double(i) - 0.05 * double(j);
                            }))));
    };

    struct Case {
      const char* name;
      std::function<Tensor<double>(Tape<double>&)> f;
    };
    std::vector<Case> cases = {
        {"add", [&](Tape<double>& t) { return weighted(t, add(t.parameter(a), t.parameter(row))); }},
        {"sub", [&](Tape<double>& t) { return weighted(t, sub(t.parameter(a), t.parameter(b))); }},
        {"mul", [&](Tape<double>& t) { return weighted(t, mul(t.parameter(a), t.parameter(row))); }},
        {"div", [&](Tape<double>& t) { return weighted(t, div(t.parameter(a), t.parameter(pos))); }},
        {"exp", [&](Tape<double>& t) { return weighted(t, exp(t.parameter(a))); }},
        {"log", [&](Tape<double>& t) { return weighted(t, log(t.parameter(pos))); }},
        {"sigmoid", [&](Tape<double>& t) { return weighted(t, sigmoid(t.parameter(a))); }},
        {"tanh", [&](Tape<double>& t) { return weighted(t, tanh(t.parameter(a))); }},
        {"gelu", [&](Tape<double>& t) { return weighted(t, gelu(t.parameter(a))); }},
        {"silu", [&](Tape<double>& t) { return weighted(t, silu(t.parameter(a))); }},
        {"softplus", [&](Tape<double>& t) { return weighted(t, softplus(t.parameter(a))); }},
        {"maximum", [&](Tape<double>& t) { return weighted(t, maximum(t.parameter(a), t.parameter(b))); }},
        {"abs", [&](Tape<double>& t) { return weighted(t, abs(t.parameter(a))); }},
        {"matmul", [&](Tape<double>& t) { return weighted(t, matmul(t.parameter(a), t.parameter(w))); }},
        {"transpose", [&](Tape<double>& t) { return weighted(t, transpose(t.parameter(a))); }},
        {"softmax", [&](Tape<double>& t) { return weighted(t, softmax(t.parameter(a))); }},
        {"softmax0", [&](Tape<double>& t) { return weighted(t, softmax(t.parameter(a), 0)); }},
        {"sum_axis",
         [&](Tape<double>& t) { return sum(mul(sum(mul(t.parameter(a), t.constant(wsum)), 0), t.parameter(row))); }},
        {"layer_norm",
         [&](Tape<double>& t) {
           return weighted(t, layer_norm(t.parameter(a), t.parameter(gain), t.parameter(row), 1e-5));
         }},
        {"conv",
         [&](Tape<double>& t) { return weighted(t, causal_depthwise_conv1d(t.parameter(a), t.parameter(kern))); }},
        {"slice_concat",
         [&](Tape<double>& t) {
           auto x = t.parameter(a);
           return weighted(t, concat_cols<double>({slice_cols(x, 1, c - 1), slice_cols(x, 0, 1)}));
         }},
    };
    for (auto& cs : cases) {
      CAPTURE(cs.name);
      std::vector<std::pair<std::string, Matrix<double>*>> params = {{"a", &a}, {"b", &b}, {"row", &row},
                                                                     {"pos", &pos}, {"w", &w}, {"gain", &gain},
                                                                     {"kern", &kern}};
      auto rep = check_gradients(params, cs.f);
      CHECK(rep.max_rel_error < 1e-4);
    }
  }
}

TEST_CASE("gradient check: group norm, headwise projection and losses") {
  Rng rng(7);
  Matrix<double> x = random_matrix(rng, 4, 8);
  Matrix<double> gain = random_matrix(rng, 1, 8, 0.5, 1.5);
  Matrix<double> bias = random_matrix(rng, 1, 8);
  Matrix<double> hw = random_matrix(rng, 8, 4);
  Matrix<double> probe = random_matrix(rng, 4, 8);
  std::vector<std::pair<std::string, Matrix<double>*>> params = {
      {"x", &x}, {"gain", &gain}, {"bias", &bias}, {"hw", &hw}};
  auto rep = check_gradients(params, [&](Tape<double>& t) {
    auto y = group_norm(t.parameter(x), 2, t.parameter(gain), t.parameter(bias), 1e-5);
    y = headwise_linear(y, t.parameter(hw));
    return sum(mul(y, t.constant(probe)));
  });
  CHECK(rep.max_rel_error < 1e-4);

  Matrix<double> targets = Matrix<double>::Zero(4, 8);
  targets(0, 1) = targets(2, 5) = targets(3, 3) = 1;
  auto rep2 = check_gradients(params, [&](Tape<double>& t) {
    auto z = headwise_linear(t.parameter(x), t.parameter(hw));
    return add(softmax_cross_entropy(z, {1, 0, 7, 3}), sigmoid_bce(z, targets));
  });
  CHECK(rep2.max_rel_error < 1e-4);
}

TEST_CASE("gradient check: nested composition of depth >= 5") {
  Rng rng(29);
  Matrix<double> x = random_matrix(rng, 3, 4);
  Matrix<double> w = random_matrix(rng, 4, 4);
  std::vector<std::pair<std::string, Matrix<double>*>> params = {{"x", &x}, {"w", &w}};
  auto rep = check_gradients(params, [&](Tape<double>& t) {
    auto h = t.parameter(x);
    auto wt = t.parameter(w);
    for (int depth = 0; depth < 6; ++depth) {
      h = tanh(matmul(h, wt));
      h = silu(add(h, scale(h, 0.5)));
      h = softmax(h);
    }
    return sum(square(h));
  });
  CHECK(rep.max_rel_error < 1e-4);
}

TEST_CASE("parameter binding accumulates repeated use") {
  Tape<double> tape;
  Matrix<double> p = Matrix<double>::Constant(1, 1, 3.0);
  auto a = tape.parameter(p);
  auto b = tape.parameter(p);
  CHECK(a.id() == b.id());
  tape.backward(mul(a, b));
  REQUIRE(tape.grad_of(p) != nullptr);
  CHECK((*tape.grad_of(p))(0, 0) == 6.0);
}

TEST_CASE("rng is reproducible and splittable") {
  Rng a(42), b(42);
  for (int i = 0; i < 10; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng s1 = a.split(1), s2 = a.split(2), s1b = b.split(1);
  CHECK(s1.next_u64() == s1b.next_u64());
  CHECK(s1.next_u64() != s2.next_u64());
  Rng c = Rng::from_state(a.key(), a.counter());
  CHECK(c.next_u64() == a.next_u64());
}
