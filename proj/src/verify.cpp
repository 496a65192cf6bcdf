// Copyright 2026 The msmk Authors
// Licensed under the Apache License, Version 2.0

#include "msmk/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>

#include "msmk/audio.hpp"
#include "msmk/eval.hpp"
#include "msmk/gradcheck.hpp"
#include "msmk/msm.hpp"
#include "msmk/patching.hpp"
#include "msmk/ssm.hpp"
#include "msmk/transformer.hpp"
#include "msmk/xlstm.hpp"

namespace msmk {

bool SuiteReport::passed() const {
  return std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.passed; });
}

namespace {

using Vec = Eigen::VectorXd;

Matrix<double> randn(Eigen::Index r, Eigen::Index c, Rng& rng, double s = 1.0) {
  Matrix<double> m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = s * rng.normal();
  return m;
}

Matrix<double> uniform(Eigen::Index r, Eigen::Index c, Rng& rng, double lo, double hi) {
  Matrix<double> m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(lo, hi);
  return m;
}

Check below(std::string name, double measured, double limit, std::string detail = {}) {
  return {std::move(name), measured < limit, measured, limit, std::move(detail)};
}

Check gradient_check(std::string name, const GradCheckReport& r) {
  return below(std::move(name), r.max_rel_error, 1e-4, "worst " + r.worst);
}

}  // namespace

Check check_patch_arithmetic() {
  SynthOptions opts;
  opts.duration_s = 3.0;
  const Spectrogram full = log_mel(synth_clip(SynthKind::Tones, 1, 3, 0, opts), opts.frontend);
  const Spectrogram crop = random_crop(full, 2.0, 5);
  std::ostringstream got;
  bool ok = crop.frames.rows() == 200 && crop.frames.cols() == 80;
  got << "crop " << crop.frames.rows() << "x" << crop.frames.cols();
  struct Case {
    int t, f;
    Eigen::Index n, w;
  };
  for (const Case c : {Case{4, 16, 250, 64}, Case{8, 16, 125, 128}, Case{4, 8, 500, 32}}) {
    const auto ps = patchify(crop.frames, c.t, c.f);
    ok = ok && ps.x_p.rows() == c.n && ps.x_p.cols() == c.w;
    got << "; t=" << c.t << " f=" << c.f << ": " << ps.x_p.rows() << "x" << ps.x_p.cols();
  }
  return {"patch arithmetic", ok, ok ? 0.0 : 1.0, 0.0, got.str()};
}

Check check_mask_count() {
  std::size_t worst = 0;
  for (auto strategy : {MaskStrategy::Unstructured, MaskStrategy::Block}) {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      const auto plan = make_mask(250, 0.5, strategy, seed);
      worst = std::max<std::size_t>(worst, plan.masked.size() > 125 ? plan.masked.size() - 125 : 125 - plan.masked.size());
    }
  }
  return {"mask count 125 of 250", worst == 0, static_cast<double>(worst), 0.0,
          "largest deviation over 200 plans: " + std::to_string(worst)};
}

Check check_masked_gradient_zero() {
  Rng rng(2);
  Matrix<double> y = randn(250, 64, rng);
  const Matrix<double> x = randn(250, 64, rng);
  const auto plan = make_mask(250, 0.5, MaskStrategy::Unstructured, 7);
  Tape<double> tape;
  tape.backward(masked_mse(tape.parameter(y), tape.constant(x), plan));
  const Matrix<double>& g = *tape.grad_of(y);
  std::vector<char> masked(250, 0);
  for (auto r : plan.masked) masked[static_cast<std::size_t>(r)] = 1;
  double unmasked_max = 0, masked_min = std::numeric_limits<double>::infinity();
  for (Eigen::Index r = 0; r < 250; ++r) {
    const double a = g.row(r).cwiseAbs().maxCoeff();
    if (masked[static_cast<std::size_t>(r)]) {
      masked_min = std::min(masked_min, a);
    } else {
      unmasked_max = std::max(unmasked_max, a);
    }
  }
  const bool ok = unmasked_max == 0.0 && masked_min > 0.0;
  return {"masked-MSE gradient is zero at unmasked rows", ok, unmasked_max, 0.0,
          "max |grad| over unmasked rows (exact zero required)"};
}

Check check_lti_duality(int instances) {
  Rng rng(31);
  double worst = 0;
  for (int i = 0; i < instances; ++i) {
    const auto n = 1 + static_cast<Eigen::Index>(rng.below(24));
    const auto len = 1 + static_cast<Eigen::Index>(rng.below(64));
    const Vec a = -uniform(n, 1, rng, 0.05, 3.0), b = uniform(n, 1, rng, -1, 1), c = uniform(n, 1, rng, -1, 1);
    auto [ab, bb] = zoh_discretize<double>(a, b, std::exp(rng.uniform(-4, 0)));
    const Vec x = uniform(len, 1, rng, -2, 2);
    const double skip = rng.normal();
    worst = std::max(worst, (lti_scan<double>(ab, bb, c, x, skip) - lti_conv<double>(ab, bb, c, x, skip))
                                .cwiseAbs()
                                .maxCoeff());
  }
  return below("LTI scan equals convolution on " + std::to_string(instances) + " instances", worst, 1e-5);
}

Check check_selective_degeneracy() {
  Rng rng(32);
  double worst = 0;
  for (int trial = 0; trial < 5; ++trial) {
    SsmParams<double> p(5, 4);
    p.init(rng, 0.3);
    p.s_b.weight.setZero();
    p.s_c.weight.setZero();
    p.s_delta.weight.setZero();
    p.s_b.bias = randn(1, 4, rng);
    p.s_c.bias = randn(1, 4, rng);
    p.s_delta.bias(0, 0) = rng.uniform(-2, 1);
    p.skip = randn(1, 5, rng);
    const Matrix<double> x = randn(32, 5, rng);
    Tape<double> tape;
    const Matrix<double> y = ssm_forward(tape, tape.constant(x), p).value();
    for (Eigen::Index d = 0; d < 5; ++d) {
      const Vec a = -p.a_log.row(d).array().exp().transpose();
      const double delta = std::log1p(std::exp(p.delta_p(0, d) + p.s_delta.bias(0, 0)));
      auto [ab, bb] = zoh_discretize<double>(a, p.s_b.bias.row(0).transpose(), delta);
      const Vec ref = lti_scan<double>(ab, bb, p.s_c.bias.row(0).transpose(), x.col(d), p.skip(0, d));
      worst = std::max(worst, (y.col(d) - ref).cwiseAbs().maxCoeff());
    }
  }
  return below("selective scan with constant selection equals LTI scan", worst, 1e-6);
}

Check check_zoh() {
  Vec a(1), b(1);
  a << -1.0;
  b << 2.0;
  const double e1 = std::abs(zoh_discretize<double>(a, b, std::log(2.0)).first(0) - 0.5);
  auto [abar, bbar] = zoh_discretize<double>(a, b, 1e-8);
  const double e2 = std::abs(abar(0) - 1.0), e3 = std::abs(bbar(0) - 1e-8 * 2.0);
  std::ostringstream d;
  d << "|Abar-0.5| = " << e1 << " (limit 1e-12); small step |Abar-1| = " << e2 << ", |Bbar-dB| = " << e3
    << " (limit 1e-7)";
  const bool ok = e1 < 1e-12 && e2 < 1e-7 && e3 < 1e-7;
  return {"ZOH discretization", ok, std::max({e1, e2, e3}), 1e-7, d.str()};
}

namespace {

Matrix<double> naive_mlstm(const Matrix<double>& q, const Matrix<double>& k, const Matrix<double>& v,
                           const Matrix<double>& ig, const Matrix<double>& fg) {
  const Eigen::Index L = q.rows(), d = q.cols();
  Matrix<double> C = Matrix<double>::Zero(d, d), h(L, d);
  Eigen::RowVectorXd n = Eigen::RowVectorXd::Zero(d);
  for (Eigen::Index t = 0; t < L; ++t) {
    const double i = std::exp(ig(t, 0)), f = std::exp(fg(t, 0));
    C = f * C + i * v.row(t).transpose() * k.row(t);
    n = f * n + i * k.row(t);
    h.row(t) = (C * q.row(t).transpose()).transpose() / std::max(std::abs(n.dot(q.row(t))), 1.0);
  }
  return h;
}

}  // namespace

Check check_mlstm_stabilizer() {
  Rng rng(33);
  double worst = 0;
  for (int trial = 0; trial < 40; ++trial) {
    const auto L = 1 + static_cast<Eigen::Index>(rng.below(16)), d = 2 + static_cast<Eigen::Index>(rng.below(5));
    const Matrix<double> q = randn(L, d, rng, trial % 2 ? 3.0 : 0.2), k = randn(L, d, rng), v = randn(L, d, rng);
    const Matrix<double> ig = uniform(L, 1, rng, -3, 3), fg = uniform(L, 1, rng, -3, 3);
    Tape<double> tape;
    const Matrix<double> h =
        mlstm_cell(tape.constant(q), tape.constant(k), tape.constant(v), tape.constant(ig), tape.constant(fg)).value();
    worst = std::max(worst, (h - naive_mlstm(q, k, v, ig, fg)).cwiseAbs().maxCoeff());
  }
  return below("stabilized mLSTM matches the exponential-gate recurrence", worst, 1e-5);
}

Check check_mlstm_large_gates() {
  Rng rng(34);
  const Eigen::Index L = 16, d = 4;
  bool finite = true;
  {
    Tape<double> tape;
    finite = finite && mlstm_cell(tape.constant(randn(L, d, rng)), tape.constant(randn(L, d, rng)),
                                  tape.constant(randn(L, d, rng)), tape.constant(Matrix<double>::Constant(L, 1, 80.0)),
                                  tape.constant(Matrix<double>::Constant(L, 1, 80.0)))
                           .value()
                           .allFinite();
  }
  {
    Tape<float> tape;
    auto f = [&] { return Matrix<float>(randn(L, d, rng).cast<float>()); };
    finite = finite && mlstm_cell(tape.constant(f()), tape.constant(f()), tape.constant(f()),
                                  tape.constant(Matrix<float>::Constant(L, 1, 80.0f)),
                                  tape.constant(Matrix<float>::Constant(L, 1, 80.0f)))
                           .value()
                           .allFinite();
  }
  return {"mLSTM with +80 gate preactivations stays finite", finite, finite ? 0.0 : 1.0, 0.0, "double and float"};
}

Check check_slstm_stabilizer() {
  Rng rng(35);
  SLstmCell<double> cell(5);
  cell.init(rng, 0.3);
  cell.b = uniform(1, 4, rng, -0.5, 0.5);
  Tape<double> tape;
  auto s = SLstmState<double>::zeros(tape);
  double c = 0, n = 0, h = 0, worst = 0;
  for (int t = 0; t < 12; ++t) {
    const Eigen::RowVectorXd x = uniform(1, 5, rng, -1, 1);
    s = slstm_step(tape, s, tape.constant(x), cell);
    Eigen::RowVectorXd pre(4);
    for (int j = 0; j < 4; ++j) pre(j) = x.dot(cell.w.col(j)) + cell.r(0, j) * h + cell.b(0, j);
    const double o = 1.0 / (1.0 + std::exp(-pre(3)));
    c = std::exp(pre(2)) * c + std::exp(pre(1)) * std::tanh(pre(0));
    n = std::exp(pre(2)) * n + std::exp(pre(1));
    h = o * c / n;
    worst = std::max(worst, std::abs(s.h.item() - h));
  }
  return below("stabilized sLSTM matches the exponential-gate recurrence", worst, 1e-6);
}

std::vector<Check> check_block_gradients() {
  std::vector<Check> out;
  {
    auto enc = make_transformer<double>({8, 2, 2, 4});
    Rng rng(41);
    enc.init(rng, 0.5);
    for (auto& b : enc.blocks) {
      fill_truncated_normal(b.norm1.bias, rng, 0.5);
      fill_truncated_normal(b.attn.qkv.bias, rng, 0.5);
    }
    const Matrix<double> x = randn(4, 8, rng), w = randn(4, 8, rng);
    out.push_back(gradient_check("transformer encoder gradients", check_gradients(collect_parameters(enc), [&](Tape<double>& tape) {
      return sum(mul(enc(tape, tape.constant(x)), tape.constant(w)));
    })));
  }
  {
    auto enc = make_mamba<double>({8, 2, 3, 3, 4});
    Rng rng(42);
    enc.init(rng, 0.3);
    const Matrix<double> x = randn(6, 8, rng), w = randn(6, 8, rng);
    out.push_back(gradient_check("mamba encoder gradients", check_gradients(collect_parameters(enc), [&](Tape<double>& tape) {
      return sum(mul(enc(tape, tape.constant(x)), tape.constant(w)));
    })));
  }
  {
    auto enc = make_vil<double>({8, 1, 3, 2, 4, 4});
    Rng rng(43);
    enc.init(rng, 0.3);
    for (auto& b : enc.blocks) {
      b.gate_i.bias = randn(1, 2, rng, 0.5);
      b.bq = randn(1, 24, rng);
      b.bk = randn(1, 24, rng);
      b.bv = randn(1, 24, rng);
    }
    const Matrix<double> x = randn(6, 8, rng), w = randn(6, 8, rng);
    out.push_back(gradient_check("ViL encoder gradients", check_gradients(collect_parameters(enc), [&](Tape<double>& tape) {
      return sum(mul(enc(tape, tape.constant(x)), tape.constant(w)));
    })));
  }
  return out;
}

std::vector<Check> check_pipeline_gradients() {
  std::vector<Check> out;
  for (auto kind : {BackboneKind::Transformer, BackboneKind::Mamba, BackboneKind::MLstm}) {
    MsmConfig cfg;
    cfg.backbone = kind;
    cfg.d_enc = 8;
    cfg.layers = 1;
    cfg.heads = 2;
    cfg.patch_t = 2;
    cfg.patch_f = 4;
    cfg.n_mels = 16;
    MsmModel<double> model(cfg);
    model.init(Rng(11), 0.5);
    Rng rng(12);
    const Matrix<double> x_p = randn(6, cfg.patch_width(), rng);
    MaskPlan plan;
    plan.masked = {0, 2, 3};
    GradCheckOptions opts;
    opts.step = 1e-5;
    out.push_back(gradient_check("pipeline gradients, " + to_string(kind),
                                 check_gradients(collect_parameters(model), [&](Tape<double>& tape) {
                                   return masked_mse(model.reconstruct(tape, x_p, plan), tape.constant(x_p), plan);
                                 }, opts)));
  }
  return out;
}

namespace {

template <typename Encoder>
Check causality_probe(const std::string& name, const Encoder& enc, Rng& rng) {
  const Eigen::Index L = 32, d = 8;
  const Matrix<double> x = randn(L, d, rng);
  Tape<double> tape;
  tape.set_grad_enabled(false);
  const Matrix<double> y = enc(tape, tape.constant(x)).value();
  double leak = 0;
  int moved = 0;
  for (int probe = 0; probe < 20; ++probe) {
    const auto t = static_cast<Eigen::Index>(rng.below(L));
    Matrix<double> xp = x;
    xp.bottomRows(L - t) += randn(L - t, d, rng);
    const Matrix<double> yp = enc(tape, tape.constant(xp)).value();
    if (t > 0) leak = std::max(leak, (yp.topRows(t) - y.topRows(t)).cwiseAbs().maxCoeff());
    moved += yp.row(t) != y.row(t);
  }
  const bool ok = leak == 0.0 && moved == 20;
  return {name + " is causal", ok, leak, 0.0,
          "max prefix change over 20 suffix perturbations; " + std::to_string(moved) + "/20 perturbed rows moved"};
}

}  // namespace

std::vector<Check> check_causality() {
  Rng rng(51);
  auto mamba = make_mamba<double>({8, 2, 3, 3, 4});
  mamba.init(rng, 0.3);
  auto vil = make_vil<double>({8, 2, 3, 2, 4, 4});
  vil.init(rng, 0.3);
  return {causality_probe("mamba encoder", mamba, rng), causality_probe("ViL encoder", vil, rng)};
}

Check check_permutation_equivariance() {
  Rng rng(52);
  auto enc = make_transformer<double>({8, 2, 2, 4});
  enc.init(rng, 0.3);
  const Eigen::Index n = 12;
  const Matrix<double> x = randn(n, 8, rng);
  std::vector<Eigen::Index> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), Eigen::Index{0});
  for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
  Matrix<double> px(n, 8);
  for (Eigen::Index i = 0; i < n; ++i) px.row(i) = x.row(perm[static_cast<std::size_t>(i)]);
  Tape<double> tape;
  const Matrix<double> y = enc(tape, tape.constant(x)).value(), py = enc(tape, tape.constant(px)).value();
  double worst = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    worst = std::max(worst, (py.row(i) - y.row(perm[static_cast<std::size_t>(i)])).cwiseAbs().maxCoeff());
  }
  return below("transformer without positions is permutation-equivariant", worst, 1e-5);
}

Check check_parameter_counts() {
  const double paper[] = {5.4e6, 4.8e6, 4.3e6};
  double counts[3];
  double worst = 0;
  std::ostringstream d;
  int i = 0;
  for (auto kind : {BackboneKind::Transformer, BackboneKind::Mamba, BackboneKind::MLstm}) {
    MsmConfig cfg;
    cfg.backbone = kind;
    counts[i] = static_cast<double>(MsmModel<float>(cfg).encoder_parameter_count());
    const double rel = std::abs(counts[i] - paper[i]) / paper[i];
    worst = std::max(worst, rel);
    d << (i ? ", " : "") << to_string(kind) << " " << counts[i] / 1e6 << "M (" << paper[i] / 1e6 << "M)";
    ++i;
  }
  const bool ordered = counts[0] > counts[1] && counts[1] > counts[2];
  d << (ordered ? "; ordering holds" : "; ordering violated");
  return {"Tiny parameter counts", worst <= 0.15 && ordered, worst, 0.15, d.str()};
}

Check check_score_fixture() {
  auto run = [](Eigen::MatrixXd s) {
    ScoreBoard b;
    for (Eigen::Index m = 0; m < s.rows(); ++m) b.models.push_back("m" + std::to_string(m));
    for (Eigen::Index t = 0; t < s.cols(); ++t) b.tasks.push_back("t" + std::to_string(t));
    b.scores = std::move(s);
    return aggregate_score(b).score;
  };
  Eigen::MatrixXd swapped(2, 2);
  swapped << 0.5, 1.0, 1.0, 0.5;
  const auto s1 = run(swapped);
  double err = std::max(std::abs(s1[0] - 50.0), std::abs(s1[1] - 50.0));

  Eigen::MatrixXd three(3, 3);
  three << 0.9, 0.7, 0.8,  //
      0.2, 0.1, 0.3,       //
      0.6, 0.5, 0.35;
  const auto s2 = run(three);
  err = std::max({err, std::abs(s2[0] - 100.0), std::abs(s2[1])});

  Eigen::MatrixXd rescaled = three;
  rescaled.col(1) = rescaled.col(1) * 40.0 + Eigen::VectorXd::Constant(3, -7.0);
  rescaled.col(2) *= 0.01;
  const auto s3 = run(rescaled);
  for (std::size_t m = 0; m < 3; ++m) err = std::max(err, std::abs(s3[m] - s2[m]));
  return below("aggregate score fixture", err, 1e-9, "swapped pair 50/50, best everywhere 100, affine invariance");
}

const std::vector<std::string>& suite_names() {
  static const std::vector<std::string> names = {"gradcheck", "duality", "stabilizer", "masking"};
  return names;
}

SuiteReport run_suite(const std::string& name) {
  const auto start = std::chrono::steady_clock::now();
  SuiteReport r;
  r.suite = name;
  if (name == "gradcheck") {
    r.checks = check_block_gradients();
    for (auto& c : check_pipeline_gradients()) r.checks.push_back(std::move(c));
  } else if (name == "duality") {
    r.checks = {check_lti_duality(), check_selective_degeneracy(), check_zoh()};
  } else if (name == "stabilizer") {
    r.checks = {check_mlstm_stabilizer(), check_mlstm_large_gates(), check_slstm_stabilizer()};
  } else if (name == "masking") {
    r.checks = {check_patch_arithmetic(), check_mask_count(), check_masked_gradient_zero()};
  } else {
    throw ContractError("unknown verify suite '" + name + "'");
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

}  // namespace msmk
