// Copyright 2026 The msmk Authors
// Licensed under the Apache License, Version 2.0

#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "msmk/gradcheck.hpp"
#include "msmk/patching.hpp"
#include "msmk/transformer.hpp"

using namespace msmk;

namespace {

template <typename Scalar>
Matrix<Scalar> randn(Eigen::Index r, Eigen::Index c, std::uint64_t seed, double s = 1.0) {
  Rng rng(seed);
  Matrix<Scalar> m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(s * rng.normal());
  return m;
}

Matrix<double> sdpa_oracle(const Matrix<double>& q, const Matrix<double>& k, const Matrix<double>& v) {
  const Eigen::Index n = q.rows(), d = q.cols();
  Matrix<double> out = Matrix<double>::Zero(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    std::vector<double> s(static_cast<std::size_t>(n));
    for (Eigen::Index j = 0; j < n; ++j) {
      double dot = 0;
      for (Eigen::Index c = 0; c < d; ++c) dot += q(i, c) * k(j, c);
      s[j] = dot / std::sqrt(static_cast<double>(d));
    }
    const double mx = *std::max_element(s.begin(), s.end());
    double z = 0;
    for (auto& e : s) z += (e = std::exp(e - mx));
    for (Eigen::Index j = 0; j < n; ++j) {
      for (Eigen::Index c = 0; c < d; ++c) out(i, c) += s[j] / z * v(j, c);
    }
  }
  return out;
}

}  // namespace

TEST_CASE("sdpa") {
  Tape<float> tape;
  SUBCASE("single token returns V") {
    auto v = tape.constant(randn<float>(1, 8, 1));
    auto y = sdpa(tape.constant(randn<float>(1, 8, 2)), tape.constant(randn<float>(1, 8, 3)), v);
    CHECK((y.value() - v.value()).cwiseAbs().maxCoeff() < 1e-7f);
  }
  SUBCASE("identical keys give the column mean of V") {
    Matrix<float> k = randn<float>(1, 8, 4).replicate(5, 1);
    auto v = randn<float>(5, 8, 5);
    auto y = sdpa(tape.constant(randn<float>(5, 8, 6)), tape.constant(k), tape.constant(v));
    for (Eigen::Index r = 0; r < 5; ++r) CHECK((y.value().row(r) - v.colwise().mean()).cwiseAbs().maxCoeff() < 1e-6f);
  }
  SUBCASE("loop oracle on 4x8") {
    auto q = randn<float>(4, 8, 7), k = randn<float>(4, 8, 8), v = randn<float>(4, 8, 9);
    auto y = sdpa(tape.constant(q), tape.constant(k), tape.constant(v));
    const auto ref = sdpa_oracle(q.cast<double>(), k.cast<double>(), v.cast<double>());
    CHECK((y.value().cast<double>() - ref).cwiseAbs().maxCoeff() < 1e-5);
  }
  SUBCASE("shape mismatch") {
    CHECK_THROWS_AS(sdpa(tape.constant(randn<float>(4, 8, 1)), tape.constant(randn<float>(4, 7, 1)),
                         tape.constant(randn<float>(4, 8, 1))),
                    DimensionError);
  }
}

TEST_CASE("multi-head attention") {
  Tape<double> tape;
  SUBCASE("one head is one sdpa between projections") {
    MultiHeadAttention<double> mha(8, 1);
    Rng rng(3);
    mha.init(rng);
    auto x = randn<double>(6, 8, 10);
    auto y = mha(tape, tape.constant(x));
    const Matrix<double> p = x * mha.qkv.weight + mha.qkv.bias.replicate(6, 1);
    const Matrix<double> h = sdpa_oracle(p.leftCols(8), p.middleCols(8, 8), p.rightCols(8));
    const Matrix<double> ref = h * mha.out.weight + mha.out.bias.replicate(6, 1);
    CHECK((y.value() - ref).cwiseAbs().maxCoeff() < 1e-12);
  }
  SUBCASE("attention rows sum to one per head") {
    MultiHeadAttention<double> mha(12, 3);
    Rng rng(4);
    mha.init(rng, 1.0);
    std::vector<Matrix<double>> w;
    mha(tape, tape.constant(randn<double>(7, 12, 11, 3.0)), &w);
    REQUIRE(w.size() == 3);
    for (const auto& a : w) {
      CHECK(a.rows() == 7);
      CHECK((a.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-6);
    }
  }
}

TEST_CASE("blocks and encoder") {
  TransformerConfig cfg{16, 3, 4, 4};
  auto enc = make_transformer<double>(cfg);
  Rng rng(12);
  enc.init(rng);
  for (auto& b : enc.blocks) {
    b.norm1.gain = randn<double>(1, 16, 20, 0.3).array() + 1.0;
    b.norm2.bias = randn<double>(1, 16, 21, 0.3);
  }
  const auto x = randn<double>(9, 16, 13);

  SUBCASE("shape preserved") {
    Tape<double> tape;
    CHECK(enc(tape, tape.constant(x)).shape() == Shape{9, 16});
    CHECK(enc.blocks[0](tape, tape.constant(x)).shape() == Shape{9, 16});
  }
  SUBCASE("permutation equivariance") {
    std::vector<int> perm(9);
    std::iota(perm.begin(), perm.end(), 0);
    std::reverse(perm.begin(), perm.end());
    std::swap(perm[0], perm[4]);
    Matrix<double> px(9, 16);
    for (int i = 0; i < 9; ++i) px.row(i) = x.row(perm[i]);
    Tape<double> tape;
    const Matrix<double> y = enc(tape, tape.constant(x)).value();
    const Matrix<double> py = enc(tape, tape.constant(px)).value();
    for (int i = 0; i < 9; ++i) CHECK((py.row(i) - y.row(perm[i])).cwiseAbs().maxCoeff() < 1e-5);
  }
  SUBCASE("zeroed output projections make the stack the final norm") {
    auto copy = enc;
    for (auto& b : copy.blocks) b.zero_output_projections();
    Tape<double> tape;
    const Matrix<double> y = copy(tape, tape.constant(x)).value();
    const Matrix<double> ref = copy.final_norm(tape, tape.constant(x)).value();
    CHECK(y == ref);
  }
  SUBCASE("no layers is the final norm") {
    auto empty = make_transformer<double>({16, 0, 4, 4});
    Tape<double> tape;
    CHECK(empty(tape, tape.constant(x)).value() == empty.final_norm(tape, tape.constant(x)).value());
  }
  SUBCASE("bad head count") { CHECK_THROWS_AS(make_transformer<float>({10, 1, 3, 4}), DimensionError); }
}

TEST_CASE("transformer gradients at d=8, N=4") {
  auto enc = make_transformer<double>({8, 2, 2, 4});
  Rng rng(6);
  enc.init(rng, 0.5);
  for (auto& b : enc.blocks) {
    fill_truncated_normal(b.norm1.bias, rng, 0.5);
    fill_truncated_normal(b.attn.qkv.bias, rng, 0.5);
  }
  const auto x = randn<double>(4, 8, 14);
  auto params = collect_parameters(enc);
  auto report = check_gradients(params, [&](Tape<double>& tape) {
    auto y = enc(tape, tape.constant(x));
    return sum(mul(y, tape.constant(randn<double>(4, 8, 15))));
  });
  CAPTURE(report.worst);
  CHECK(report.max_rel_error < 1e-4);
}

TEST_CASE("Tiny parameter count") {
  auto enc = make_transformer<float>(TransformerConfig::tiny());
  Embedding<float> emb(64, 192);
  const double total = static_cast<double>(parameter_count(enc) + parameter_count(emb));
  MESSAGE("transformer tiny parameters: " << total);
  CHECK(parameter_count(enc.blocks[0]) == 444864);
  CHECK(std::abs(total - 5.4e6) / 5.4e6 < 0.10);
}
