// Copyright 2026 The msmk Authors
// Licensed under the Apache License, Version 2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "msmk/audio.hpp"
#include "msmk/msm.hpp"
#include "msmk/patching.hpp"

namespace msmk {

/// Clip vector: the spectrogram is cut into non-overlapping chunks of
/// `chunk_frames` (the last one right-padded with `pad`), each chunk is
/// patchified and encoded, its tokens averaged, and the chunk means averaged.
/// `encode(x_p)` returns one row per patch.
template <typename EncodeFn>
Eigen::RowVectorXd chunked_features(const Matrix<float>& frames, Eigen::Index chunk_frames, int patch_t, int patch_f,
                                    EncodeFn&& encode, float pad = log_floor()) {
  if (chunk_frames <= 0) throw ContractError("chunked_features: chunk length must be positive");
  if (frames.rows() == 0) throw ContractError("chunked_features: empty spectrogram");
  const Eigen::Index chunks = (frames.rows() + chunk_frames - 1) / chunk_frames;
  Eigen::RowVectorXd total;
  for (Eigen::Index c = 0; c < chunks; ++c) {
    Matrix<float> chunk = Matrix<float>::Constant(chunk_frames, frames.cols(), pad);
    const Eigen::Index start = c * chunk_frames, len = std::min(chunk_frames, frames.rows() - start);
    chunk.topRows(len) = frames.middleRows(start, len);
    const Matrix<double> tokens = encode(patchify(chunk, patch_t, patch_f).x_p);
    const Eigen::RowVectorXd mean = tokens.colwise().mean();
    if (c == 0) {
      total = mean;
    } else {
      total += mean;
    }
  }
  return total / static_cast<double>(chunks);
}

/// Frozen-model features: 2-second chunks, cls row dropped, no mask.
Eigen::RowVectorXd extract_features(const MsmModel<float>& model, const MsmConfig& cfg, const Spectrogram& spec,
                                    double chunk_s = 2.0);

enum class Metric { Accuracy, MeanAveragePrecision };

Metric parse_metric(const std::string& name);
std::string to_string(Metric m);

/// Features and labels of one split. Single-label items carry one class.
struct ProbeSplit {
  Matrix<float> x;
  std::vector<std::vector<int>> labels;

  Eigen::Index size() const { return x.rows(); }
};

struct ProbeOptions {
  int hidden = 1024;
  int max_epochs = 200;
  int patience = 20;
  int batch_size = 64;
  double lr = 1e-3;
  double weight_decay = 0.01;

  nlohmann::json to_json() const;
};

double accuracy(const Matrix<float>& scores, const std::vector<std::vector<int>>& labels);
/// Mean over classes with at least one positive of the average precision.
double mean_average_precision(const Matrix<float>& scores, const std::vector<std::vector<int>>& labels);
double evaluate_metric(Metric metric, const Matrix<float>& scores, const std::vector<std::vector<int>>& labels);

/// Trains input -> hidden (GELU) -> classes on z-scored features with AdamW,
/// keeps the parameters of the best validation epoch, stops after `patience`
/// epochs without improvement, and returns the test metric.
double probe_train(const ProbeSplit& train, const ProbeSplit& valid, const ProbeSplit& test, int num_classes,
                   Metric metric, std::uint64_t seed, const ProbeOptions& opts = {});

/// Two-sided 95% Student-t quantile with `df` degrees of freedom (1..30).
double t_quantile_975(int df);

struct Interval {
  double mean = 0.0;
  double half_width = 0.0;
};

/// mean +- t * sd / sqrt(n) with the sample standard deviation. `values`
/// must hold exactly `expected_n` scores.
Interval ci95(const std::vector<double>& values, std::size_t expected_n = 10);

struct TaskResult {
  std::string model_id;
  std::string task_id;
  Metric metric = Metric::Accuracy;
  std::vector<double> scores;
  double mean = 0.0;
  double half_width = 0.0;
};

/// `repetitions` probes with seeds split from `seed`.
TaskResult run_probe(const std::string& model_id, const std::string& task_id, const ProbeSplit& train,
                     const ProbeSplit& valid, const ProbeSplit& test, int num_classes, Metric metric,
                     std::uint64_t seed, int repetitions = 10, const ProbeOptions& opts = {});

/// One line per repetition, then nothing else; fields in a fixed order.
std::vector<std::string> result_lines(const TaskResult& r);
/// Regroups repetition lines into results, in first-seen order.
std::vector<TaskResult> parse_result_lines(const std::vector<std::string>& lines);

/// Models x tasks matrix of mean scores.
struct ScoreBoard {
  std::vector<std::string> models;
  std::vector<std::string> tasks;
  Eigen::MatrixXd scores;

  static ScoreBoard from_results(const std::vector<TaskResult>& results);
};

struct AggregateScore {
  std::vector<double> score;  // per model, in [0, 100]
  std::vector<double> task_min;
  std::vector<double> task_max;
  std::vector<std::string> excluded_tasks;  // max == min
};

/// s(m) = 100 / |T| * sum_t (x_t(m) - min_t) / (max_t - min_t) over the
/// tasks that separate the models.
AggregateScore aggregate_score(const ScoreBoard& board);

}  // namespace msmk
