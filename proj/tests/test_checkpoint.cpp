// Copyright 2026 The msmk Authors
// Licensed under the Apache License, Version 2.0

#include <filesystem>
#include <fstream>
#include <iterator>

#include "doctest.h"
#include "msmk/checkpoint.hpp"

using namespace msmk;
namespace fs = std::filesystem;

namespace {

fs::path temp_path(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / "msmk_test_checkpoint";
  fs::create_directories(dir);
  return dir / name;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const fs::path& p, const std::string& bytes) {
  std::ofstream(p, std::ios::binary | std::ios::trunc).write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

MsmConfig micro(BackboneKind kind) {
  MsmConfig cfg;
  cfg.backbone = kind;
  cfg.d_enc = 8;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.patch_t = 2;
  cfg.patch_f = 4;
  cfg.n_mels = 16;
  cfg.crop_s = 0.2;
  cfg.batch_size = 2;
  cfg.epochs = 4;
  cfg.warmup_epochs = 1;
  cfg.base_lr = 3e-3;
  cfg.seed = 8;
  return cfg;
}

std::vector<Spectrogram> data(int count) {
  SynthOptions opts;
  opts.duration_s = 0.3;
  opts.frontend.n_mels = 16;
  std::vector<Spectrogram> out;
  for (auto& item : synth_dataset(SynthKind::Chirps, count, 4, opts)) out.push_back(std::move(item.spec));
  return out;
}

}  // namespace

TEST_CASE("fnv1a64 reference values") {
  CHECK(fnv1a64("", 0) == 0xcbf29ce484222325ULL);
  CHECK(fnv1a64("a", 1) == 0xaf63dc4c8601ec8cULL);
  CHECK(fnv1a64("foobar", 6) == 0x85944171f73967e8ULL);
}

TEST_CASE("container round trip and corruption") {
  Container c;
  c.kind = "test";
  c.meta = {{"answer", 42}, {"note", "x"}};
  Matrix<float> a(2, 3);
  a << 1, 2, 3, 4, 5, -6.5f;
  c.tensors.push_back({"a", a});
  c.tensors.push_back({"empty", Matrix<float>(0, 4)});
  const std::string bytes = encode_container(c);
  CHECK(bytes.substr(0, 4) == "MSMK");

  const Container back = decode_container(bytes);
  CHECK(back.kind == "test");
  CHECK(back.meta == c.meta);
  CHECK(back.at("a") == a);
  CHECK(back.at("empty").rows() == 0);
  CHECK(encode_container(back) == bytes);

  SUBCASE("truncated") {
    CHECK_THROWS_AS(decode_container(bytes.substr(0, bytes.size() - 1)), LoadError);
    CHECK_THROWS_AS(decode_container(bytes.substr(0, 30)), LoadError);
    CHECK_THROWS_AS(decode_container(bytes.substr(0, 10)), LoadError);
  }
  SUBCASE("digest mismatch") {
    std::string bad = bytes;
    bad[bad.size() - 12] ^= 0x01;  // inside the payload
    try {
      decode_container(bad);
      FAIL("expected LoadError");
    } catch (const LoadError& e) {
      CHECK(std::string(e.what()).find("digest") != std::string::npos);
    }
  }
  SUBCASE("version mismatch") {
    std::string bad = bytes;
    bad[4] = 2;
    try {
      decode_container(bad);
      FAIL("expected LoadError");
    } catch (const LoadError& e) {
      CHECK(std::string(e.what()).find("version 2") != std::string::npos);
    }
  }
  SUBCASE("wrong magic") { CHECK_THROWS_AS(decode_container("MSMX" + bytes.substr(4)), LoadError); }
  SUBCASE("kind check on read") {
    const auto p = temp_path("kind.msmk");
    write_container(p, c);
    CHECK(read_container(p, "test").at("a") == a);
    CHECK_THROWS_AS(read_container(p, "checkpoint"), KindMismatchError);
  }
}

TEST_CASE("checkpoint save, load, save is byte-identical") {
  for (auto kind : {BackboneKind::Transformer, BackboneKind::Mamba, BackboneKind::MLstm}) {
    CAPTURE(to_string(kind));
    Pretrainer trainer(micro(kind), data(4));
    trainer.step();
    trainer.step();
    const auto p1 = temp_path("a.msmk"), p2 = temp_path("b.msmk");
    save_checkpoint(p1, trainer.config(), trainer.model(), trainer.state());
    auto loaded = load_checkpoint(p1);
    CHECK(loaded.state.step == 2);
    CHECK(loaded.config.settings() == trainer.config().settings());
    save_checkpoint(p2, loaded.config, loaded.model, loaded.state);
    CHECK(slurp(p1) == slurp(p2));

    std::string cut = slurp(p1);
    spit(p2, cut.substr(0, cut.size() / 2));
    CHECK_THROWS_AS(load_checkpoint(p2), LoadError);
  }
}

TEST_CASE("loading into a different backbone is a kind mismatch") {
  Pretrainer trainer(micro(BackboneKind::Transformer), data(2));
  const auto p = temp_path("transformer.msmk");
  save_checkpoint(p, trainer.config(), trainer.model(), trainer.state());

  const MsmConfig mamba = micro(BackboneKind::Mamba);
  MsmModel<float> model(mamba);
  model.init(Rng(1));
  auto state = make_train_state(model, 1);
  const auto before = model.embedding.projection.weight;
  CHECK_THROWS_AS(load_checkpoint_into(p, mamba, model, state), KindMismatchError);
  CHECK(model.embedding.projection.weight == before);

  MsmConfig wider = micro(BackboneKind::Transformer);
  wider.d_enc = 12;
  MsmModel<float> other(wider);
  auto other_state = make_train_state(other, 1);
  CHECK_THROWS_AS(load_checkpoint_into(p, wider, other, other_state), KindMismatchError);
}

TEST_CASE("resumed training reproduces the uninterrupted losses") {
  for (auto kind : {BackboneKind::Transformer, BackboneKind::Mamba, BackboneKind::MLstm}) {
    CAPTURE(to_string(kind));
    MsmConfig cfg = micro(kind);
    const auto ds = data(5);
    Pretrainer straight(cfg, ds);
    std::vector<double> expected;
    while (!straight.done()) expected.push_back(straight.step().loss);
    REQUIRE(expected.size() == 12);

    Pretrainer first(cfg, ds);
    for (int i = 0; i < 5; ++i) first.step();
    const auto p = temp_path("resume.msmk");
    save_checkpoint(p, first.config(), first.model(), first.state());

    Pretrainer resumed(cfg, ds);
    load_checkpoint_into(p, resumed.config(), resumed.model(), resumed.state());
    CHECK(resumed.state().step == 5);
    double worst = 0;
    for (std::size_t i = 5; i < expected.size(); ++i) worst = std::max(worst, std::abs(resumed.step().loss - expected[i]));
    CHECK(worst < 1e-6);
  }
}
