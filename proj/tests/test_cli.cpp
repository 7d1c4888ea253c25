// Copyright (c) 2026 The ctlora Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "ctlora/ctlora.hpp"

namespace fs = std::filesystem;
using namespace ctlora;

namespace {

struct Result {
  int code = -1;
  std::string out;
};

Result run(const std::string& args) {
  const char* bin = std::getenv("CTLORA_BIN");
  if (!bin) bin = "./ctlora";
  const std::string cmd = std::string(bin) + " " + args + " 2>&1";
  Result r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  std::array<char, 4096> buf;
  std::size_t n;
  while ((n = fread(buf.data(), 1, buf.size(), p)) > 0) r.out.append(buf.data(), n);
  const int st = pclose(p);
  r.code = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Last line of the form "run directory: X".
std::string run_dir(const std::string& out) {
  const std::string tag = "run directory: ";
  const auto at = out.rfind(tag);
  if (at == std::string::npos) return {};
  auto end = out.find('\n', at);
  return out.substr(at + tag.size(), end - at - tag.size());
}

const char* kTinyConfig = R"(# small enough for a unit test
model.vision.depth = 8
model.vision.temporal_patch = 4
model.vision.spatial_patch = 12
model.vision.dim = 8
model.vision.heads = 2
model.vision.head_dim = 4
model.vision.spatial_layers = 1
model.vision.temporal_layers = 1
model.vision.mlp_ratio = 2
model.shared_dim = 8
model.text.max_len = 48
model.text.hidden = 8
model.text.layers = 1
model.text.heads = 2
model.text.mlp_ratio = 2
pretrain.epochs = 1
finetune.epochs = 1
)";

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = fs::temp_directory_path() / ("ctlora_cli_" + std::to_string(::getpid()));
    fs::create_directories(root_);
    std::ofstream(root_ / "tiny.conf") << kTinyConfig;
  }
  static void TearDownTestSuite() { fs::remove_all(root_); }

  static std::string conf() { return (root_ / "tiny.conf").string(); }
  static fs::path root_;
};

fs::path Cli::root_;

}  // namespace

TEST_F(Cli, InspectParamsReferenceScale) {
  auto r = run("inspect-params --paper");
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("Total trainable: 1668114 (1.67M) = 0.38% of 440000000"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("Vision Encoder"), std::string::npos);
}

TEST_F(Cli, InspectParamsDesk) {
  auto r = run("inspect-params");
  ASSERT_EQ(r.code, 0) << r.out;
  const auto cfg = pipeline::RunConfig::defaults();
  const auto pc = lora::structural_count(cfg.model, cfg.injection());
  EXPECT_NE(r.out.find(std::to_string(pc.trainable)), std::string::npos) << r.out;
}

TEST_F(Cli, DefaultsRoundTrip) {
  auto r = run("inspect-params --defaults");
  ASSERT_EQ(r.code, 0) << r.out;
  const auto kv = config::parse(r.out);
  EXPECT_EQ(kv.at("model.vision.pooling"), "max");
  EXPECT_EQ(kv.at("eval.template"), "CT scan showing {pathology}");
  EXPECT_EQ(pipeline::RunConfig::from_kv(kv).to_kv(), kv);
}

TEST_F(Cli, ExitCodes) {
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("no-such-command").code, 2);
  EXPECT_EQ(run("inspect-params --set bogus.key=1").code, 2);
  EXPECT_EQ(run("inspect-params --set eval.tau=-1").code, 2);
  EXPECT_EQ(run("inspect-params --config " + (root_ / "missing.conf").string()).code, 2);
  EXPECT_EQ(run("zeroshot --base " + (root_ / "none.peft").string() + " --data x.jsonl").code, 3);
  EXPECT_EQ(run("train --mode pretrain --data " + (root_ / "none.jsonl").string()).code, 3);
}

TEST_F(Cli, EndToEnd) {
  const auto data = root_ / "synth";
  const auto out = (root_ / "runs").string();
  auto r = run("gen-synth --seed 3 --train 16 --val 0 --test 12 --out " + data.string());
  ASSERT_EQ(r.code, 0) << r.out;
  const std::string manifest = (data / "manifest.jsonl").string();
  ASSERT_TRUE(fs::exists(manifest));
  const std::string common = " --config " + conf() + " --out " + out + " --seed 5";

  r = run("train --mode pretrain --data " + manifest + common);
  ASSERT_EQ(r.code, 0) << r.out;
  const fs::path pre = run_dir(r.out);
  for (const char* f : {"config.conf", "seed", "vocab.txt", "base.peft", "head.peft", "pretrain_log.jsonl",
                        "pretrain_state.peft", "report.json"})
    EXPECT_TRUE(fs::exists(pre / f)) << f;
  EXPECT_EQ(slurp(pre / "seed"), "5\n");
  EXPECT_EQ(config::parse(slurp(pre / "config.conf")).at("model.vision.dim"), "8");

  const std::string base = (pre / "base.peft").string();
  r = run("train --mode lora --data " + manifest + " --base " + base + common);
  ASSERT_EQ(r.code, 0) << r.out;
  const fs::path ft = run_dir(r.out);
  const auto rep = nlohmann::json::parse(slurp(ft / "report.json"));
  EXPECT_EQ(rep.at("base_sha256_before"), rep.at("base_sha256_after"));
  EXPECT_EQ(rep.at("epochs").size(), 1u);
  const std::string adapters = (ft / "adapters.peft").string();

  // Resume the fine-tuning run for one more epoch.
  r = run("train --mode lora --data " + manifest + " --base " + base + common + " --set finetune.epochs=2 --resume " +
          ft.string());
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(nlohmann::json::parse(slurp(ft / "report.json")).at("epochs").size(), 2u);

  const std::string eval_args = " --base " + base + " --adapters " + adapters + " --data " + manifest + common;
  r = run("zeroshot" + eval_args);
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("Mean AUROC"), std::string::npos);
  EXPECT_NE(r.out.find("Gain (pp)"), std::string::npos);
  const fs::path z1 = run_dir(r.out);
  r = run("zeroshot" + eval_args);
  ASSERT_EQ(r.code, 0) << r.out;
  const fs::path z2 = run_dir(r.out);
  EXPECT_NE(z1, z2);
  EXPECT_EQ(slurp(z1 / "adapted_metrics.txt"), slurp(z2 / "adapted_metrics.txt"));
  EXPECT_EQ(slurp(z1 / "base_metrics.txt"), slurp(z2 / "base_metrics.txt"));
  EXPECT_FALSE(slurp(z1 / "adapted_metrics.txt").empty());

  r = run("eval" + eval_args);
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("Macro-F1"), std::string::npos);

  r = run("retrieve --k 1,5" + eval_args);
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("Recall@5"), std::string::npos);
  EXPECT_EQ(run("retrieve --k 1000" + eval_args).code, 2);

  r = run("merge-adapter --base " + base + " --adapters " + adapters + common);
  ASSERT_EQ(r.code, 0) << r.out;
  const fs::path mg = run_dir(r.out);
  EXPECT_LE(nlohmann::json::parse(slurp(mg / "report.json")).at("probe_relative_diff").get<double>(), 1e-5);
  // The merged base is a plain base checkpoint; zero-shot on it matches the adapted model.
  r = run("zeroshot --base " + (mg / "base.peft").string() + " --data " + manifest + common);
  ASSERT_EQ(r.code, 0) << r.out;
  const auto merged = metrics::parse_flat(slurp(fs::path(run_dir(r.out)) / "base_metrics.txt"));
  const auto dynamic = metrics::parse_flat(slurp(z1 / "adapted_metrics.txt"));
  EXPECT_NEAR(std::stod(merged.at("mean_auroc")), std::stod(dynamic.at("mean_auroc")), 1e-3);

  r = run("augment --volume " + (data / "volumes" / "00000.vol").string() + common);
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_TRUE(fs::exists(fs::path(run_dir(r.out)) / "plan.txt"));

  // Wrong component: adapters passed as a base.
  EXPECT_EQ(run("zeroshot --base " + adapters + " --vocab " + (pre / "vocab.txt").string() + " --data " + manifest +
                common)
                .code,
            3);
}

TEST_F(Cli, NonFiniteWeightsExitFour) {
  const auto data = root_ / "synth_nan";
  ASSERT_EQ(run("gen-synth --seed 4 --train 2 --test 2 --out " + data.string()).code, 0);
  auto cfg = pipeline::RunConfig::from_kv(config::parse(kTinyConfig));
  const auto man = data::load_manifest((data / "manifest.jsonl").string());
  const auto vocab = pipeline::corpus_vocab({&man}, cfg.prompt_template);
  cfg.model.text.vocab_size = vocab.size();
  auto m = model::Model<float>::create(cfg.model, 1);
  (*m.params.at("vision.proj.weight").value)[0] = std::numeric_limits<float>::quiet_NaN();
  const auto dir = root_ / "nanbase";
  fs::create_directories(dir);
  checkpoint::save(checkpoint::base_container(m), (dir / "base.peft").string());
  text::save_vocab(vocab, (dir / "vocab.txt").string());
  auto r = run("zeroshot --base " + (dir / "base.peft").string() + " --data " + (data / "manifest.jsonl").string() +
               " --config " + conf() + " --out " + (root_ / "runs").string());
  EXPECT_EQ(r.code, 4) << r.out;
}
