// Copyright 2026 The msmk Authors
// Licensed under the Apache License, Version 2.0
//
// msmk_cli: prepare | pretrain | probe | score | verify.
// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <iterator>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "msmk/audio.hpp"
#include "msmk/checkpoint.hpp"
#include "msmk/config.hpp"
#include "msmk/eval.hpp"
#include "msmk/msm.hpp"
#include "msmk/verify.hpp"

namespace fs = std::filesystem;
using namespace msmk;
using ojson = nlohmann::ordered_json;

namespace {

/// Bad invocation: missing inputs, unknown names.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string dashed(std::string key) {
  std::replace(key.begin(), key.end(), '_', '-');
  return key;
}

/// One subcommand: every RunConfig key is also a --flag.
struct Command {
  CLI::App* app = nullptr;
  RunConfig config;
  std::string config_file;
  std::map<std::string, std::string> flag_values;
  std::map<std::string, CLI::Option*> flag_options;

  Command(CLI::App& parent, const std::string& name, const std::string& help,
          std::map<std::string, std::string> defaults)
      : config(name, std::move(defaults)) {
    app = parent.add_subcommand(name, help);
    app->add_option("--config", config_file, "key = value settings file or a resolved manifest");
    for (const auto& [key, value] : config.values()) {
      flag_options[key] = app->add_option("--" + dashed(key), flag_values[key])->default_str(value);
    }
  }

  /// defaults < MSMK_SEED < config file < flags
  void resolve() {
    if (config.has("seed")) {
      if (const char* env = std::getenv("MSMK_SEED"); env && *env) config.set("seed", env, "env MSMK_SEED");
    }
    if (!config_file.empty()) config.apply_file(config_file);
    for (const auto& [key, opt] : flag_options) {
      if (opt->count() > 0) config.set(key, flag_values[key], "flag");
    }
  }

  const std::string& required(const std::string& key) const {
    const std::string& v = config.get(key);
    if (v.empty()) throw UsageError(config.command() + ": --" + dashed(key) + " is required");
    return v;
  }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text;
}

nlohmann::json read_json(const fs::path& p) {
  try {
    return nlohmann::json::parse(slurp(p));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(p.string() + ": " + e.what());
  }
}

/// Writes `c` unless an identical file is already there. Returns whether it wrote.
bool write_if_changed(const fs::path& p, const Container& c) {
  const std::string bytes = encode_container(c);
  if (fs::exists(p) && fs::file_size(p) == bytes.size() && slurp(p) == bytes) return false;
  write_container(p, c);
  return true;
}

// ------------------------------------------------------------------ prepare

std::map<std::string, std::string> prepare_defaults() {
  return {{"source", ""},  {"out", ""},          {"count", "64"},  {"seed", "0"},
          {"kind", "tones"}, {"duration_s", "2"}, {"classes", "4"}, {"n_mels", "80"}};
}

int cmd_prepare(Command& cmd) {
  const auto& cfg = cmd.config;
  const std::string source = cmd.required("source");
  const fs::path out = cmd.required("out");
  fs::create_directories(out);
  FrontendConfig frontend;
  frontend.n_mels = static_cast<int>(cfg.get_int("n_mels"));

  ojson index;
  index["entries"] = ojson::array();
  std::size_t written = 0, unchanged = 0, failed = 0;
  auto add = [&](const std::string& id, const Spectrogram& spec, const std::string& source_path, int label) {
    nlohmann::json extra = {{"id", id}, {"label", label}};
    const std::string file = id + ".msmk";
    (write_if_changed(out / file, spectrogram_container(spec, source_path, extra)) ? written : unchanged)++;
    ojson e;
    e["id"] = id;
    e["file"] = file;
    e["T"] = spec.frames.rows();
    e["F"] = spec.frames.cols();
    e["hop_s"] = spec.hop_s;
    e["source_path"] = source_path;
    e["label"] = label;
    index["entries"].push_back(e);
  };

  if (source == "synth") {
    const auto kind = parse_synth_kind(cfg.get("kind"));
    SynthOptions opts;
    opts.num_classes = static_cast<int>(cfg.get_int("classes"));
    opts.duration_s = cfg.get_double("duration_s");
    opts.frontend = frontend;
    const auto count = static_cast<std::size_t>(cfg.get_int("count"));
    if (count == 0) throw UsageError("prepare: count must be positive");
    const auto items = synth_dataset(kind, count, cfg.get_u64("seed"), opts);
    ojson task;
    task["task"] = "synth-" + to_string(kind);
    task["metric"] = "accuracy";
    task["num_classes"] = opts.num_classes;
    task["cache"] = ".";
    task["splits"] = {{"train", ojson::array()}, {"valid", ojson::array()}, {"test", ojson::array()}};
    for (std::size_t i = 0; i < items.size(); ++i) {
      char id[32];
      std::snprintf(id, sizeof id, "synth-%05zu", i);
      add(id, items[i].spec, "synth:" + to_string(kind) + "/" + std::to_string(i), items[i].label);
      const char* split = i % 5 < 3 ? "train" : i % 5 == 3 ? "valid" : "test";
      task["splits"][split].push_back({{"id", id}, {"labels", {items[i].label}}});
    }
    write_text(out / "task.json", task.dump(2) + "\n");
  } else {
    const fs::path dir = source;
    if (!fs::is_directory(dir)) throw UsageError("prepare: source '" + source + "' is neither 'synth' nor a directory");
    std::vector<fs::path> wavs;
    for (const auto& entry : fs::recursive_directory_iterator(dir)) {
      std::string ext = entry.path().extension().string();
      std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
      if (entry.is_regular_file() && ext == ".wav") wavs.push_back(entry.path());
    }
    std::sort(wavs.begin(), wavs.end());
    if (wavs.empty()) {
      std::cerr << "prepare: no .wav files under " << dir.string() << "\n";
      return 1;
    }
    for (const auto& p : wavs) {
      std::string id = fs::relative(p, dir).replace_extension().generic_string();
      std::replace(id.begin(), id.end(), '/', '_');
      try {
        add(id, log_mel(load_wav(p), frontend), p.string(), -1);
      } catch (const std::exception& e) {
        ++failed;
        std::cerr << "prepare: skipped " << p.string() << ": " << e.what() << "\n";
      }
    }
    if (failed == wavs.size()) {
      std::cerr << "prepare: every file failed\n";
      return 1;
    }
  }
  index["settings"] = cfg.manifest()["settings"];
  write_text(out / "index.json", index.dump(2) + "\n");
  cfg.write_manifest(out / "prepare.resolved.json");
  std::cout << "prepared " << index["entries"].size() << " entries in " << out.string() << " (" << written
            << " written, " << unchanged << " unchanged, " << failed << " failed)\n";
  return 0;
}

struct CacheEntry {
  std::string id;
  fs::path file;
};

std::vector<CacheEntry> read_index(const fs::path& cache) {
  const fs::path p = cache / "index.json";
  if (!fs::exists(p)) throw UsageError("no cache index at " + p.string() + " (run prepare first)");
  std::vector<CacheEntry> out;
  try {
    const auto index = read_json(p);
    for (const auto& e : index.at("entries")) {
      out.push_back({e.at("id").get<std::string>(), cache / e.at("file").get<std::string>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(p.string() + ": " + e.what());
  }
  return out;
}

Spectrogram load_cached(const fs::path& file) { return spectrogram_from(read_container(file, "spectrogram")); }

// ----------------------------------------------------------------- pretrain

std::map<std::string, std::string> pretrain_defaults() {
  auto d = MsmConfig{}.settings();
  d["cache"] = "";
  d["out"] = "";
  d["checkpoint_every"] = "0";
  d["max_steps"] = "0";
  d["resume"] = "false";
  return d;
}

ojson loss_record(const StepResult& r, std::int64_t epoch) {
  ojson j;
  j["step"] = r.step;
  j["epoch"] = epoch;
  j["lr"] = r.lr;
  j["loss"] = r.loss;
  return j;
}

int cmd_pretrain(Command& cmd) {
  const auto& rc = cmd.config;
  MsmConfig cfg;
  for (const auto& [key, value] : MsmConfig{}.settings()) cfg.apply_setting(key, rc.get(key));
  cfg.validate();
  const fs::path cache = cmd.required("cache");
  const fs::path out = cmd.required("out");
  fs::create_directories(out);
  rc.write_manifest(out / "pretrain.resolved.json");

  std::vector<Spectrogram> data;
  for (const auto& e : read_index(cache)) {
    data.push_back(load_cached(e.file));
    if (data.back().n_mels() != cfg.n_mels) {
      throw ContractError("cache entry " + e.id + " has " + std::to_string(data.back().n_mels()) +
                          " mel bins, config expects " + std::to_string(cfg.n_mels));
    }
  }
  if (data.empty()) throw UsageError("pretrain: the cache at " + cache.string() + " is empty");

  Pretrainer trainer(cfg, std::move(data));
  const fs::path ckpt = out / "checkpoint.msmk";
  const fs::path log_path = out / "loss.jsonl";
  std::vector<std::string> kept;
  if (rc.get_bool("resume") && fs::exists(ckpt)) {
    load_checkpoint_into(ckpt, cfg, trainer.model(), trainer.state());
    std::ifstream in(log_path);
    for (std::string line; std::getline(in, line);) {
      if (!line.empty() && nlohmann::json::parse(line).at("step").get<std::int64_t>() < trainer.state().step) {
        kept.push_back(line);
      }
    }
    std::cout << "resumed from " << ckpt.string() << " at step " << trainer.state().step << "\n";
  }
  {
    std::ofstream log(log_path, std::ios::trunc);
    for (const auto& line : kept) log << line << "\n";
  }
  std::ofstream log(log_path, std::ios::app);

  std::cout << to_string(cfg.backbone) << "/" << to_string(cfg.size) << ": " << trainer.model().encoder_parameter_count()
            << " encoder parameters (embedding included), " << parameter_count(trainer.model())
            << " with the decoder; " << trainer.total_steps() << " steps\n";

  const auto every = rc.get_int("checkpoint_every");
  const auto max_steps = rc.get_int("max_steps");
  try {
    while (!trainer.done() && (max_steps <= 0 || trainer.state().step < max_steps)) {
      const StepResult r = trainer.step();
      log << loss_record(r, r.step / trainer.steps_per_epoch()).dump() << "\n" << std::flush;
      if (every > 0 && trainer.state().step % every == 0) save_checkpoint(ckpt, cfg, trainer.model(), trainer.state());
    }
  } catch (const TrainingAborted& e) {
    save_checkpoint(out / "diagnostic.msmk", cfg, trainer.model(), trainer.state());
    write_text(out / "diagnostic.txt", std::string(e.what()) + "\n" + e.dump());
    std::cerr << "pretrain: " << e.what() << "; diagnostic checkpoint in " << (out / "diagnostic.msmk").string()
              << "\n";
    return 1;
  }
  save_checkpoint(ckpt, cfg, trainer.model(), trainer.state());
  std::cout << "checkpoint " << ckpt.string() << " at step " << trainer.state().step << "\n";
  return 0;
}

// -------------------------------------------------------------------- probe

std::map<std::string, std::string> probe_defaults() {
  const ProbeOptions p;
  std::ostringstream lr, wd;
  lr << p.lr;
  wd << p.weight_decay;
  return {{"checkpoint", ""},
          {"task", ""},
          {"out", "results"},
          {"embeddings", ""},
          {"model_id", ""},
          {"repetitions", "10"},
          {"seed", "0"},
          {"chunk_s", "2"},
          {"hidden", std::to_string(p.hidden)},
          {"max_epochs", std::to_string(p.max_epochs)},
          {"patience", std::to_string(p.patience)},
          {"batch_size", std::to_string(p.batch_size)},
          {"lr", lr.str()},
          {"weight_decay", wd.str()}};
}

struct SplitItems {
  std::vector<std::string> ids;
  std::vector<std::vector<int>> labels;
};

/// Features of one split, reusing a cached embedding file when it matches.
Matrix<float> split_features(const fs::path& file, const std::string& model_id, const std::string& task_id,
                             const std::string& split, const SplitItems& items, const fs::path& cache,
                             const LoadedCheckpoint& ck, double chunk_s) {
  const auto d_enc = ck.config.resolved_d_enc();
  if (fs::exists(file)) {
    const Container c = read_container(file, "embeddings");
    const auto stored = c.meta.at("d_enc").get<int>();
    if (stored != d_enc) {
      throw ContractError("d_enc mismatch: " + file.string() + " holds " + std::to_string(stored) +
                          "-dimensional embeddings, the checkpoint encodes " + std::to_string(d_enc));
    }
    if (c.meta.at("ids").get<std::vector<std::string>>() == items.ids) return c.at("features");
  }
  std::map<std::string, fs::path> files;
  for (const auto& e : read_index(cache)) files[e.id] = e.file;
  Matrix<float> x(static_cast<Eigen::Index>(items.ids.size()), d_enc);
  for (std::size_t i = 0; i < items.ids.size(); ++i) {
    auto it = files.find(items.ids[i]);
    if (it == files.end()) throw ContractError("task item '" + items.ids[i] + "' is not in the cache");
    x.row(static_cast<Eigen::Index>(i)) =
        extract_features(ck.model, ck.config, load_cached(it->second), chunk_s).cast<float>();
  }
  Container c;
  c.kind = "embeddings";
  c.meta = {{"model", model_id}, {"task", task_id}, {"split", split}, {"d_enc", d_enc}, {"ids", items.ids}};
  c.tensors.push_back({"features", x});
  write_container(file, c);
  return x;
}

int cmd_probe(Command& cmd) {
  const auto& rc = cmd.config;
  const fs::path task_path = cmd.required("task");
  const fs::path ckpt_path = cmd.required("checkpoint");
  if (!fs::exists(task_path)) throw UsageError("probe: task manifest " + task_path.string() + " does not exist");
  const nlohmann::json task = read_json(task_path);

  std::string task_id;
  Metric metric;
  int num_classes = 0;
  fs::path cache;
  std::map<std::string, SplitItems> splits;
  try {
    task_id = task.at("task").get<std::string>();
    metric = parse_metric(task.at("metric").get<std::string>());
    num_classes = task.at("num_classes").get<int>();
    cache = task_path.parent_path() / task.at("cache").get<std::string>();
    for (const char* name : {"train", "valid", "test"}) {
      auto& s = splits[name];
      for (const auto& item : task.at("splits").at(name)) {
        s.ids.push_back(item.at("id").get<std::string>());
        s.labels.push_back(item.at("labels").get<std::vector<int>>());
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(task_path.string() + ": " + e.what());
  }

  const LoadedCheckpoint ck = load_checkpoint(ckpt_path);
  const std::string model_id = rc.get("model_id").empty() ? ckpt_path.stem().string() : rc.get("model_id");
  const fs::path out = rc.get("out");
  const fs::path emb_dir = rc.get("embeddings").empty() ? out / "embeddings" : fs::path(rc.get("embeddings"));
  ProbeOptions opts;
  opts.hidden = static_cast<int>(rc.get_int("hidden"));
  opts.max_epochs = static_cast<int>(rc.get_int("max_epochs"));
  opts.patience = static_cast<int>(rc.get_int("patience"));
  opts.batch_size = static_cast<int>(rc.get_int("batch_size"));
  opts.lr = rc.get_double("lr");
  opts.weight_decay = rc.get_double("weight_decay");
  const int reps = static_cast<int>(rc.get_int("repetitions"));

  std::map<std::string, ProbeSplit> data;
  for (const auto& [name, items] : splits) {
    const fs::path file = emb_dir / (model_id + "__" + task_id + "__" + name + ".msmk");
    data[name] = {split_features(file, model_id, task_id, name, items, cache, ck, rc.get_double("chunk_s")),
                  items.labels};
  }
  const TaskResult r = run_probe(model_id, task_id, data["train"], data["valid"], data["test"], num_classes, metric,
                                 rc.get_u64("seed"), reps, opts);

  const std::string stem = model_id + "__" + task_id;
  std::string lines;
  for (const auto& line : result_lines(r)) lines += line + "\n";
  write_text(out / (stem + ".jsonl"), lines);
  ojson manifest = rc.manifest();
  manifest["probe"] = opts.to_json();
  manifest["t_quantile"] = t_quantile_975(reps - 1);
  manifest["checkpoint_config"] = ck.config.settings();
  write_text(out / (stem + ".manifest.json"), manifest.dump(2) + "\n");
  std::cout << std::fixed << std::setprecision(4) << model_id << " on " << task_id << ": " << to_string(metric) << " "
            << r.mean << " +- " << r.half_width << " (" << reps << " repetitions, t = " << t_quantile_975(reps - 1)
            << ")\n";
  return 0;
}

// -------------------------------------------------------------------- score

int cmd_score(Command& cmd) {
  const fs::path dir = cmd.required("results");
  if (!fs::is_directory(dir)) throw UsageError("score: " + dir.string() + " is not a directory");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".jsonl") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<std::string> lines;
  for (const auto& f : files) {
    std::istringstream in(slurp(f));
    for (std::string line; std::getline(in, line);) lines.push_back(line);
  }
  const ScoreBoard board = ScoreBoard::from_results(parse_result_lines(lines));
  const AggregateScore s = aggregate_score(board);

  std::ostringstream table;
  table << std::fixed << std::setprecision(4);
  table << "task\tmin\tmax\n";
  for (std::size_t t = 0; t < board.tasks.size(); ++t) {
    table << board.tasks[t] << "\t" << s.task_min[t] << "\t" << s.task_max[t] << "\n";
  }
  table << std::setprecision(1) << "\nmodel\ts(m)\n";
  for (std::size_t m = 0; m < board.models.size(); ++m) table << board.models[m] << "\t" << s.score[m] << "\n";
  std::cout << table.str();
  for (const auto& t : s.excluded_tasks) {
    std::cerr << "warning: task " << t << " excluded, every model scores the same\n";
  }
  if (!cmd.config.get("out").empty()) write_text(cmd.config.get("out"), table.str());
  return 0;
}

// ------------------------------------------------------------------- verify

int cmd_verify(Command& cmd) {
  const std::string suite = cmd.required("suite");
  std::vector<std::string> names;
  if (suite == "all") {
    names = suite_names();
  } else if (std::find(suite_names().begin(), suite_names().end(), suite) != suite_names().end()) {
    names = {suite};
  } else {
    throw UsageError("verify: unknown suite '" + suite + "' (gradcheck, duality, stabilizer, masking, all)");
  }
  bool ok = true;
  double total = 0;
  for (const auto& name : names) {
    const SuiteReport r = run_suite(name);
    total += r.seconds;
    ok = ok && r.passed();
    std::cout << (r.passed() ? "PASS " : "FAIL ") << name << " (" << std::fixed << std::setprecision(2) << r.seconds
              << " s)\n";
    for (const auto& c : r.checks) {
      std::cout << "  " << (c.passed ? "ok   " : "FAIL ") << c.name << ": " << std::scientific << std::setprecision(3)
                << c.measured << " (limit " << c.limit << ")" << std::defaultfloat;
      if (!c.detail.empty()) std::cout << "; " << c.detail;
      std::cout << "\n";
    }
  }
  if (names.size() > 1) std::cout << (ok ? "PASS" : "FAIL") << " all (" << std::fixed << std::setprecision(2) << total << " s)\n";
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Masked spectrogram modeling: data preparation, pretraining, probing, scoring and verification"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  std::vector<std::pair<std::unique_ptr<Command>, std::function<int(Command&)>>> commands;
  auto add = [&](const std::string& name, const std::string& help, std::map<std::string, std::string> defaults,
                 std::function<int(Command&)> run) {
    commands.emplace_back(std::make_unique<Command>(app, name, help, std::move(defaults)), std::move(run));
  };
  add("prepare", "Build a spectrogram cache from 'synth' or a directory of WAV files", prepare_defaults(), cmd_prepare);
  add("pretrain", "Masked spectrogram pretraining with periodic checkpoints and a loss log", pretrain_defaults(),
      cmd_pretrain);
  add("probe", "Probe a frozen checkpoint on a task manifest", probe_defaults(), cmd_probe);
  add("score", "Aggregate probe results into per-model scores", {{"results", ""}, {"out", ""}}, cmd_score);
  add("verify", "Run invariant suites", {{"suite", "all"}}, cmd_verify);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  for (auto& [cmd, run] : commands) {
    if (!cmd->app->parsed()) continue;
    try {
      cmd->resolve();
      return run(*cmd);
    } catch (const UsageError& e) {
      std::cerr << "usage error: " << e.what() << "\n";
      return 2;
    } catch (const ParseError& e) {
      std::cerr << "config error: " << e.what() << "\n";
      return 2;
    } catch (const ContractError& e) {
      std::cerr << "contract error: " << e.what() << "\n";
      return 2;
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << "\n";
      return 1;
    }
  }
  return 2;
}
