// Copyright 2026 The msmk Authors
// Licensed under the Apache License, Version 2.0

#include <cmath>

#include "doctest.h"
#include "msmk/eval.hpp"

using namespace msmk;

namespace {

MsmConfig micro() {
  MsmConfig cfg;
  cfg.backbone = BackboneKind::Transformer;
  cfg.d_enc = 8;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.patch_t = 4;
  cfg.patch_f = 4;
  cfg.n_mels = 16;
  return cfg;
}

Matrix<float> noise(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
  Rng rng(seed);
  Matrix<float> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(rng.normal());
  return m;
}

// Two Gaussian blobs in 6 dimensions, well apart along the first axis.
ProbeSplit blobs(int n, std::uint64_t seed, bool shuffle_labels = false) {
  Rng rng(seed);
  ProbeSplit s{noise(n, 6, seed), {}};
  for (int i = 0; i < n; ++i) {
    const int y = i % 2;
    s.x(i, 0) += y ? 4.0f : -4.0f;
    s.labels.push_back({shuffle_labels ? static_cast<int>(rng.below(2)) : y});
  }
  return s;
}

ProbeOptions small_probe() {
  ProbeOptions o;
  o.hidden = 256;
  o.max_epochs = 40;
  o.patience = 10;
  o.batch_size = 16;
  return o;
}

}  // namespace

TEST_CASE("chunked features average token means per chunk") {
  // A stub encoder that returns the patch index makes the result analytic.
  auto index_encoder = [](const Matrix<float>& x_p) {
    Matrix<double> out(x_p.rows(), 1);
    for (Eigen::Index i = 0; i < x_p.rows(); ++i) out(i, 0) = static_cast<double>(i);
    return out;
  };
  const Matrix<float> frames = noise(16, 8, 1);
  // 16 frames of 8 bins with 4x4 patches: 8 patches per chunk of 16 frames.
  CHECK(chunked_features(frames, 16, 4, 4, index_encoder)(0) == doctest::Approx(3.5));
  // Three chunks of 8 frames, the last half padded: 4 patches each.
  const Matrix<float> longer = noise(20, 8, 2);
  CHECK(chunked_features(longer, 8, 4, 4, index_encoder)(0) == doctest::Approx(1.5));

  auto sum_encoder = [](const Matrix<float>& x_p) { return Matrix<double>(x_p.cast<double>().rowwise().sum()); };
  Matrix<float> twice(32, 8);
  twice << frames, frames;
  CHECK((chunked_features(twice, 16, 4, 4, sum_encoder) - chunked_features(frames, 16, 4, 4, sum_encoder)).norm() ==
        doctest::Approx(0.0));

  Matrix<float> padded = Matrix<float>::Constant(16, 8, log_floor());
  padded.topRows(10) = longer.topRows(10);
  CHECK((chunked_features(longer.topRows(10), 16, 4, 4, sum_encoder) - chunked_features(padded, 16, 4, 4, sum_encoder))
            .norm() == doctest::Approx(0.0));
  CHECK_THROWS_AS(chunked_features(frames, 0, 4, 4, sum_encoder), ContractError);
}

TEST_CASE("features of a periodic clip do not depend on its length") {
  const MsmConfig cfg = micro();
  MsmModel<float> model(cfg);
  model.init(Rng(5));
  const Matrix<float> period = noise(200, 16, 9);
  auto tiled = [&](int reps) {
    Spectrogram s;
    s.frames.resize(200 * reps, 16);
    for (int r = 0; r < reps; ++r) s.frames.middleRows(200 * r, 200) = period;
    return s;
  };
  const Eigen::RowVectorXd two = extract_features(model, cfg, tiled(1));
  CHECK(two.size() == 8);
  CHECK((extract_features(model, cfg, tiled(2)) - two).cwiseAbs().maxCoeff() < 1e-5);
  CHECK((extract_features(model, cfg, tiled(3)) - two).cwiseAbs().maxCoeff() < 1e-5);
}

TEST_CASE("metrics") {
  Matrix<float> scores(4, 3);
  scores << 0.9f, 0.1f, 0.0f,  //
      0.2f, 0.7f, 0.1f,        //
      0.1f, 0.2f, 0.8f,        //
      0.6f, 0.3f, 0.1f;
  CHECK(accuracy(scores, {{0}, {1}, {2}, {1}}) == doctest::Approx(0.75));
  CHECK_THROWS_AS(accuracy(scores, {{0}, {1}}), ContractError);

  // Class 0 positives {0, 3} rank 1st and 2nd: AP 1. Class 1 positive {3}
  // ranks 2nd (0.7, 0.3, ...): AP 0.5. Class 2 has no positives.
  CHECK(mean_average_precision(scores, {{0}, {}, {}, {0, 1}}) == doctest::Approx(0.75));
  CHECK_THROWS_AS(mean_average_precision(scores, {{}, {}, {}, {}}), ContractError);
}

TEST_CASE("probe separates separable classes and not shuffled ones") {
  const auto opts = small_probe();
  const double acc = probe_train(blobs(64, 1), blobs(32, 2), blobs(64, 3), 2, Metric::Accuracy, 7, opts);
  CHECK(acc >= 0.99);
  CHECK(probe_train(blobs(64, 1), blobs(32, 2), blobs(64, 3), 2, Metric::Accuracy, 7, opts) == acc);

  const double chance = probe_train(blobs(64, 1, true), blobs(32, 2, true), blobs(200, 3, true), 2, Metric::Accuracy,
                                    7, opts);
  CHECK(chance > 0.35);
  CHECK(chance < 0.65);

  ProbeSplit bad = blobs(8, 4);
  bad.labels.pop_back();
  CHECK_THROWS_AS(probe_train(bad, blobs(8, 2), blobs(8, 3), 2, Metric::Accuracy, 1, opts), ContractError);
  ProbeSplit narrow{noise(8, 5, 1), blobs(8, 1).labels};
  CHECK_THROWS_AS(probe_train(blobs(8, 1), narrow, blobs(8, 3), 2, Metric::Accuracy, 1, opts), ContractError);
}

TEST_CASE("multi-label probe reports mAP") {
  ProbeSplit tr = blobs(64, 1), va = blobs(32, 2), te = blobs(64, 3);
  for (auto* s : {&tr, &va, &te}) {
    for (auto& l : s->labels) l.push_back(2);  // class 2 is always on
  }
  CHECK(probe_train(tr, va, te, 3, Metric::MeanAveragePrecision, 3, small_probe()) >= 0.99);
}

TEST_CASE("confidence intervals") {
  const Interval flat = ci95(std::vector<double>(10, 0.7));
  CHECK(flat.mean == doctest::Approx(0.7));
  CHECK(flat.half_width == doctest::Approx(0.0));

  std::vector<double> alt;
  for (int i = 0; i < 10; ++i) alt.push_back(i % 2);
  const Interval ci = ci95(alt);
  CHECK(ci.mean == doctest::Approx(0.5));
  CHECK(ci.half_width == doctest::Approx(2.262 * std::sqrt(2.5 / 9.0) / std::sqrt(10.0)));

  CHECK_THROWS_AS(ci95(std::vector<double>(9, 0.5)), ContractError);
  CHECK(t_quantile_975(1) == doctest::Approx(12.706));
  CHECK(t_quantile_975(30) == doctest::Approx(2.042));
  CHECK_THROWS_AS(t_quantile_975(0), ContractError);
}

TEST_CASE("run_probe repeats, and result lines round trip") {
  auto opts = small_probe();
  opts.max_epochs = 5;
  const TaskResult r = run_probe("m", "t", blobs(32, 1), blobs(16, 2), blobs(32, 3), 2, Metric::Accuracy, 11, 3, opts);
  CHECK(r.scores.size() == 3);
  std::vector<std::string> lines = result_lines(r);
  CHECK(lines.size() == 3);
  CHECK(lines[0].rfind("{\"model\":\"m\",\"task\":\"t\"", 0) == 0);
  std::swap(lines[0], lines[2]);
  const auto back = parse_result_lines(lines);
  REQUIRE(back.size() == 1);
  CHECK(back[0].scores == r.scores);
  CHECK(back[0].mean == doctest::Approx(r.mean));
  CHECK(back[0].half_width == doctest::Approx(r.half_width));
  lines.pop_back();
  CHECK_THROWS_AS(parse_result_lines(lines), ParseError);
}

namespace {

ScoreBoard board(std::vector<std::string> models, std::vector<std::string> tasks, Eigen::MatrixXd s) {
  return {std::move(models), std::move(tasks), std::move(s)};
}

}  // namespace

TEST_CASE("aggregate score") {
  Eigen::MatrixXd s(2, 2);
  s << 0.5, 1.0,  //
      1.0, 0.5;
  auto out = aggregate_score(board({"A", "B"}, {"t1", "t2"}, s));
  CHECK(out.score[0] == doctest::Approx(50.0));
  CHECK(out.score[1] == doctest::Approx(50.0));

  Eigen::MatrixXd three(3, 2);
  three << 0.9, 0.8,  //
      0.5, 0.1,       //
      0.7, 0.4;
  out = aggregate_score(board({"A", "B", "C"}, {"t1", "t2"}, three));
  CHECK(out.score[0] == doctest::Approx(100.0));
  CHECK(out.score[1] == doctest::Approx(0.0));
  CHECK(out.score[2] == doctest::Approx(50.0 * (0.2 / 0.4 + 0.3 / 0.7)));

  Eigen::MatrixXd rescaled = three;
  rescaled.col(0) = rescaled.col(0) * 3.0 + Eigen::VectorXd::Constant(3, 2.0);
  rescaled.col(1) *= 0.25;
  const auto again = aggregate_score(board({"A", "B", "C"}, {"t1", "t2"}, rescaled));
  for (int m = 0; m < 3; ++m) CHECK(again.score[m] == doctest::Approx(out.score[m]));

  Eigen::MatrixXd tie(2, 2);
  tie << 0.3, 0.1,  //
      0.3, 0.9;
  out = aggregate_score(board({"A", "B"}, {"flat", "t"}, tie));
  CHECK(out.excluded_tasks == std::vector<std::string>{"flat"});
  CHECK(out.score[1] == doctest::Approx(100.0));

  CHECK_THROWS_AS(aggregate_score(board({"A"}, {"t"}, Eigen::MatrixXd::Constant(1, 1, 0.5))), ContractError);
  CHECK_THROWS_AS(aggregate_score(board({"A", "B"}, {"t"}, Eigen::MatrixXd::Constant(2, 1, 0.5))), ContractError);
}

TEST_CASE("scoreboard needs every model on every task") {
  std::vector<TaskResult> rs = {{"A", "t1", Metric::Accuracy, {}, 0.5, 0},
                                {"B", "t1", Metric::Accuracy, {}, 0.6, 0},
                                {"A", "t2", Metric::Accuracy, {}, 0.7, 0}};
  CHECK_THROWS_AS(ScoreBoard::from_results(rs), ContractError);
  rs.push_back({"B", "t2", Metric::Accuracy, {}, 0.2, 0});
  const auto b = ScoreBoard::from_results(rs);
  CHECK(b.models == std::vector<std::string>{"A", "B"});
  CHECK(b.scores(1, 1) == doctest::Approx(0.2));
}
