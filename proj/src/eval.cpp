// Copyright 2026 The msmk Authors
// Licensed under the Apache License, Version 2.0

#include "msmk/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include "msmk/layers.hpp"

namespace msmk {

Eigen::RowVectorXd extract_features(const MsmModel<float>& model, const MsmConfig& cfg, const Spectrogram& spec,
                                    double chunk_s) {
  const auto chunk_frames = static_cast<Eigen::Index>(std::lround(chunk_s / spec.hop_s));
  return chunked_features(spec.frames, chunk_frames, cfg.patch_t, cfg.patch_f, [&](const Matrix<float>& x_p) {
    Tape<float> tape;
    tape.set_grad_enabled(false);
    const Tensor<float> z = model.encode(tape, x_p);
    return Matrix<double>(z.value().bottomRows(z.rows() - 1).cast<double>());
  });
}

Metric parse_metric(const std::string& name) {
  if (name == "accuracy") return Metric::Accuracy;
  if (name == "mAP") return Metric::MeanAveragePrecision;
  throw ContractError("unknown metric '" + name + "' (expected accuracy or mAP)");
}

std::string to_string(Metric m) { return m == Metric::Accuracy ? "accuracy" : "mAP"; }

nlohmann::json ProbeOptions::to_json() const {
  return {{"hidden", hidden}, {"max_epochs", max_epochs}, {"patience", patience},
          {"batch_size", batch_size}, {"lr", lr}, {"weight_decay", weight_decay}};
}

namespace {

void check_scores(const Matrix<float>& scores, const std::vector<std::vector<int>>& labels, const char* who) {
  if (static_cast<std::size_t>(scores.rows()) != labels.size()) {
    throw ContractError(std::string(who) + ": " + std::to_string(labels.size()) + " label sets for " +
                        std::to_string(scores.rows()) + " rows");
  }
  if (labels.empty()) throw ContractError(std::string(who) + ": no items");
}

}  // namespace

double accuracy(const Matrix<float>& scores, const std::vector<std::vector<int>>& labels) {
  check_scores(scores, labels, "accuracy");
  std::size_t hits = 0;
  for (Eigen::Index r = 0; r < scores.rows(); ++r) {
    Eigen::Index arg;
    scores.row(r).maxCoeff(&arg);
    const auto& l = labels[static_cast<std::size_t>(r)];
    if (l.size() != 1) throw ContractError("accuracy: single-label items only");
    hits += l[0] == arg;
  }
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

double mean_average_precision(const Matrix<float>& scores, const std::vector<std::vector<int>>& labels) {
  check_scores(scores, labels, "mean_average_precision");
  const Eigen::Index n = scores.rows();
  double total = 0;
  int classes = 0;
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  for (Eigen::Index c = 0; c < scores.cols(); ++c) {
    std::vector<char> positive(static_cast<std::size_t>(n), 0);
    for (Eigen::Index r = 0; r < n; ++r) {
      const auto& l = labels[static_cast<std::size_t>(r)];
      positive[static_cast<std::size_t>(r)] = std::find(l.begin(), l.end(), c) != l.end();
    }
    const auto npos = std::count(positive.begin(), positive.end(), 1);
    if (npos == 0) continue;
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return scores(a, c) > scores(b, c); });
    double ap = 0;
    long tp = 0;
    for (std::size_t k = 0; k < order.size(); ++k) {
      if (positive[static_cast<std::size_t>(order[k])]) {
        ++tp;
        ap += static_cast<double>(tp) / static_cast<double>(k + 1);
      }
    }
    total += ap / static_cast<double>(npos);
    ++classes;
  }
  if (classes == 0) throw ContractError("mean_average_precision: no class has a positive item");
  return total / classes;
}

double evaluate_metric(Metric metric, const Matrix<float>& scores, const std::vector<std::vector<int>>& labels) {
  return metric == Metric::Accuracy ? accuracy(scores, labels) : mean_average_precision(scores, labels);
}

namespace {

struct Probe {
  Linear<float> hidden;
  Linear<float> out;

  Tensor<float> operator()(Tape<float>& tape, const Tensor<float>& x) const {
    return out(tape, gelu(hidden(tape, x)));
  }
  template <typename F>
  void visit(F&& f, const std::string& prefix) {
    hidden.visit(f, prefix + "hidden.");
    out.visit(f, prefix + "out.");
  }
};

void check_split(const ProbeSplit& s, Eigen::Index dim, int num_classes, Metric metric, const char* name) {
  if (static_cast<std::size_t>(s.x.rows()) != s.labels.size()) {
    throw ContractError(std::string("probe: ") + name + " split has " + std::to_string(s.x.rows()) +
                        " feature rows but " + std::to_string(s.labels.size()) + " label sets");
  }
  if (s.x.rows() == 0) throw ContractError(std::string("probe: ") + name + " split is empty");
  if (s.x.cols() != dim) {
    throw ContractError(std::string("probe: ") + name + " features have dimension " + std::to_string(s.x.cols()) +
                        ", train has " + std::to_string(dim));
  }
  if (!s.x.allFinite()) throw ContractError(std::string("probe: ") + name + " features are not finite");
  for (const auto& l : s.labels) {
    if (metric == Metric::Accuracy && l.size() != 1) {
      throw ContractError(std::string("probe: ") + name + " split has an item without exactly one label");
    }
    for (int c : l) {
      if (c < 0 || c >= num_classes) throw ContractError(std::string("probe: label out of range in ") + name);
    }
  }
}

Matrix<float> multi_hot(const std::vector<std::vector<int>>& labels, const std::vector<std::size_t>& rows, int k) {
  Matrix<float> t = Matrix<float>::Zero(static_cast<Eigen::Index>(rows.size()), k);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (int c : labels[rows[i]]) t(static_cast<Eigen::Index>(i), c) = 1.0f;
  }
  return t;
}

Matrix<float> predict(const Probe& probe, const Matrix<float>& x) {
  Tape<float> tape;
  tape.set_grad_enabled(false);
  return probe(tape, tape.constant(x)).value();
}

}  // namespace

double probe_train(const ProbeSplit& train, const ProbeSplit& valid, const ProbeSplit& test, int num_classes,
                   Metric metric, std::uint64_t seed, const ProbeOptions& opts) {
  if (num_classes < 1) throw ContractError("probe: need at least one class");
  if (opts.hidden < 1 || opts.batch_size < 1 || opts.max_epochs < 1 || opts.patience < 1) {
    throw ContractError("probe: hidden, batch_size, max_epochs and patience must be positive");
  }
  const Eigen::Index dim = train.x.cols();
  check_split(train, dim, num_classes, metric, "train");
  check_split(valid, dim, num_classes, metric, "validation");
  check_split(test, dim, num_classes, metric, "test");

  const Eigen::RowVectorXf mu = train.x.colwise().mean();
  Eigen::RowVectorXf sd = ((train.x.rowwise() - mu).array().square().colwise().mean()).sqrt();
  for (Eigen::Index j = 0; j < sd.size(); ++j) {
    if (!(sd(j) > 1e-6f)) sd(j) = 1.0f;
  }
  auto zscore = [&](const Matrix<float>& x) -> Matrix<float> {
    return (x.rowwise() - mu).array().rowwise() / sd.array();
  };
  const Matrix<float> xtr = zscore(train.x), xva = zscore(valid.x), xte = zscore(test.x);

  const Rng root(seed);
  Probe probe{Linear<float>(dim, opts.hidden), Linear<float>(opts.hidden, num_classes)};
  Rng r1 = root.split(0), r2 = root.split(1);
  probe.hidden.init(r1, 1.0 / std::sqrt(static_cast<double>(dim)));
  probe.out.init(r2, 1.0 / std::sqrt(static_cast<double>(opts.hidden)));

  std::vector<Matrix<float>*> params;
  probe.visit([&](const std::string&, Matrix<float>& p) { params.push_back(&p); }, "");
  std::vector<Moments<float>> moments(params.size());
  Probe best = probe;
  double best_score = -std::numeric_limits<double>::infinity();
  int since_best = 0;
  std::int64_t step = 0;

  std::vector<std::size_t> order(static_cast<std::size_t>(xtr.rows()));
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (int epoch = 0; epoch < opts.max_epochs; ++epoch) {
    Rng shuffle = root.split(2).split(static_cast<std::uint64_t>(epoch));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);
    for (std::size_t begin = 0; begin < order.size(); begin += static_cast<std::size_t>(opts.batch_size)) {
      const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(opts.batch_size));
      const std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(begin),
                                          order.begin() + static_cast<std::ptrdiff_t>(end));
      Matrix<float> xb(static_cast<Eigen::Index>(rows.size()), dim);
      for (std::size_t i = 0; i < rows.size(); ++i) xb.row(static_cast<Eigen::Index>(i)) = xtr.row(static_cast<Eigen::Index>(rows[i]));
      Tape<float> tape;
      const Tensor<float> logits = probe(tape, tape.constant(xb));
      Tensor<float> loss;
      if (metric == Metric::Accuracy) {
        std::vector<int> y;
        for (std::size_t r : rows) y.push_back(train.labels[r][0]);
        loss = softmax_cross_entropy(logits, y);
      } else {
        loss = sigmoid_bce(logits, multi_hot(train.labels, rows, num_classes));
      }
      tape.backward(loss);
      ++step;
      for (std::size_t k = 0; k < params.size(); ++k) {
        if (const Matrix<float>* g = tape.grad_of(*params[k])) {
          adamw_update(*params[k], *g, moments[k], step, opts.lr, opts.weight_decay);
        }
      }
    }
    const double score = evaluate_metric(metric, predict(probe, xva), valid.labels);
    if (score > best_score) {
      best_score = score;
      best = probe;
      since_best = 0;
    } else if (++since_best >= opts.patience) {
      break;
    }
  }
  return evaluate_metric(metric, predict(best, xte), test.labels);
}

double t_quantile_975(int df) {
  static const double table[] = {12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228,
                                 2.201,  2.179, 2.160, 2.145, 2.131, 2.120, 2.110, 2.101, 2.093, 2.086,
                                 2.080,  2.074, 2.069, 2.064, 2.060, 2.056, 2.052, 2.048, 2.045, 2.042};
  if (df < 1 || df > 30) throw ContractError("t_quantile_975: no table entry for " + std::to_string(df) + " df");
  return table[df - 1];
}

Interval ci95(const std::vector<double>& values, std::size_t expected_n) {
  if (values.size() != expected_n) {
    throw ContractError("ci95: expected " + std::to_string(expected_n) + " values, got " +
                        std::to_string(values.size()));
  }
  if (values.size() < 2) throw ContractError("ci95: needs at least two values");
  const double n = static_cast<double>(values.size());
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double ss = 0;
  for (double v : values) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / (n - 1));
  return {mean, t_quantile_975(static_cast<int>(values.size()) - 1) * sd / std::sqrt(n)};
}

TaskResult run_probe(const std::string& model_id, const std::string& task_id, const ProbeSplit& train,
                     const ProbeSplit& valid, const ProbeSplit& test, int num_classes, Metric metric,
                     std::uint64_t seed, int repetitions, const ProbeOptions& opts) {
  if (repetitions < 2) throw ContractError("run_probe: at least two repetitions are needed for an interval");
  TaskResult r{model_id, task_id, metric, {}, 0.0, 0.0};
  const Rng root(seed);
  for (int i = 0; i < repetitions; ++i) {
    r.scores.push_back(probe_train(train, valid, test, num_classes, metric, root.split(static_cast<std::uint64_t>(i)).next_u64(), opts));
  }
  const Interval ci = ci95(r.scores, r.scores.size());
  r.mean = ci.mean;
  r.half_width = ci.half_width;
  return r;
}

std::vector<std::string> result_lines(const TaskResult& r) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < r.scores.size(); ++i) {
    nlohmann::ordered_json j;
    j["model"] = r.model_id;
    j["task"] = r.task_id;
    j["metric"] = to_string(r.metric);
    j["repetition"] = i;
    j["repetitions"] = r.scores.size();
    j["score"] = r.scores[i];
    out.push_back(j.dump());
  }
  return out;
}

std::vector<TaskResult> parse_result_lines(const std::vector<std::string>& lines) {
  std::vector<TaskResult> out;
  std::map<std::pair<std::string, std::string>, std::size_t> index;
  std::vector<std::size_t> declared;
  for (const auto& line : lines) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
      const auto key = std::make_pair(j.at("model").get<std::string>(), j.at("task").get<std::string>());
      auto it = index.find(key);
      if (it == index.end()) {
        it = index.emplace(key, out.size()).first;
        out.push_back({key.first, key.second, parse_metric(j.at("metric").get<std::string>()), {}, 0.0, 0.0});
        declared.push_back(j.at("repetitions").get<std::size_t>());
      }
      auto& r = out[it->second];
      const auto rep = j.at("repetition").get<std::size_t>();
      if (rep >= declared[it->second]) throw ParseError("repetition index out of range");
      if (r.scores.size() < declared[it->second]) r.scores.resize(declared[it->second], std::numeric_limits<double>::quiet_NaN());
      r.scores[rep] = j.at("score").get<double>();
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("result line: ") + e.what());
    }
  }
  for (auto& r : out) {
    if (std::any_of(r.scores.begin(), r.scores.end(), [](double v) { return std::isnan(v); })) {
      throw ParseError("results for " + r.model_id + "/" + r.task_id + " are missing repetitions");
    }
    const Interval ci = ci95(r.scores, r.scores.size());
    r.mean = ci.mean;
    r.half_width = ci.half_width;
  }
  return out;
}

ScoreBoard ScoreBoard::from_results(const std::vector<TaskResult>& results) {
  ScoreBoard b;
  for (const auto& r : results) {
    if (std::find(b.models.begin(), b.models.end(), r.model_id) == b.models.end()) b.models.push_back(r.model_id);
    if (std::find(b.tasks.begin(), b.tasks.end(), r.task_id) == b.tasks.end()) b.tasks.push_back(r.task_id);
  }
  b.scores = Eigen::MatrixXd::Constant(static_cast<Eigen::Index>(b.models.size()),
                                       static_cast<Eigen::Index>(b.tasks.size()), std::numeric_limits<double>::quiet_NaN());
  for (const auto& r : results) {
    const auto m = std::find(b.models.begin(), b.models.end(), r.model_id) - b.models.begin();
    const auto t = std::find(b.tasks.begin(), b.tasks.end(), r.task_id) - b.tasks.begin();
    b.scores(m, t) = r.mean;
  }
  for (Eigen::Index m = 0; m < b.scores.rows(); ++m) {
    for (Eigen::Index t = 0; t < b.scores.cols(); ++t) {
      if (std::isnan(b.scores(m, t))) {
        throw ContractError("scoreboard: model '" + b.models[static_cast<std::size_t>(m)] + "' has no result for task '" +
                            b.tasks[static_cast<std::size_t>(t)] + "'");
      }
    }
  }
  return b;
}

AggregateScore aggregate_score(const ScoreBoard& board) {
  const Eigen::Index M = board.scores.rows(), T = board.scores.cols();
  if (M < 2) {
    throw ContractError("aggregate_score: s(m) is relative (min-max over models per task), so it needs at least "
                        "two models, got " + std::to_string(M));
  }
  if (T == 0) throw ContractError("aggregate_score: no tasks");
  if (!board.scores.allFinite()) throw ContractError("aggregate_score: non-finite task score");
  AggregateScore out;
  out.score.assign(static_cast<std::size_t>(M), 0.0);
  int used = 0;
  for (Eigen::Index t = 0; t < T; ++t) {
    const double lo = board.scores.col(t).minCoeff(), hi = board.scores.col(t).maxCoeff();
    out.task_min.push_back(lo);
    out.task_max.push_back(hi);
    if (hi == lo) {
      out.excluded_tasks.push_back(t < static_cast<Eigen::Index>(board.tasks.size()) ? board.tasks[static_cast<std::size_t>(t)]
                                                                                    : std::to_string(t));
      continue;
    }
    ++used;
    for (Eigen::Index m = 0; m < M; ++m) out.score[static_cast<std::size_t>(m)] += (board.scores(m, t) - lo) / (hi - lo);
  }
  if (used == 0) throw ContractError("aggregate_score: every task scores all models equally");
  for (auto& s : out.score) s *= 100.0 / used;
  return out;
}

}  // namespace msmk
