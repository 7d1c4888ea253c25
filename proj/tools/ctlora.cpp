// Copyright (c) 2026 The ctlora Authors
// SPDX-License-Identifier: Apache-2.0

// ctlora command-line driver.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <iostream>
#include <sstream>

#include "ctlora/ctlora.hpp"

namespace fs = std::filesystem;
using namespace ctlora;
using nlohmann::json;

namespace {

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> sets;
};

pipeline::RunConfig resolve_config(const Globals& g) {
  config::KeyValues kv;
  if (!g.config_path.empty()) kv = config::load(g.config_path);
  for (const auto& s : g.sets) {
    const auto eq = s.find('=');
    require(eq != std::string::npos && eq > 0, Errc::invalid_config, "--set expects key=value, got '" + s + "'");
    kv[config::strip(s.substr(0, eq))] = config::strip(s.substr(eq + 1));
  }
  if (g.seed) kv["run.seed"] = std::to_string(*g.seed);
  if (!g.out.empty()) kv["run.out"] = g.out;
  // Relative paths inside a config file resolve against the file's directory.
  if (!g.config_path.empty()) {
    const fs::path base = fs::path(g.config_path).parent_path();
    for (const char* key : {"augment.policy", "data.manifest", "data.pretrain_manifest"}) {
      auto it = kv.find(key);
      if (it != kv.end() && !it->second.empty() && fs::path(it->second).is_relative() && !fs::exists(it->second))
        it->second = (base / it->second).string();
    }
  }
  return pipeline::RunConfig::from_kv(kv);
}

void require_file(const std::string& path, const std::string& what) {
  require(!path.empty(), Errc::invalid_config, what + " path not given");
  require(fs::exists(path), Errc::data, what + " not found: " + path);
}

std::string sibling(const std::string& path, const std::string& name) {
  return (fs::path(path).parent_path() / name).string();
}

void write_json(const std::string& dir, const std::string& name, const json& j) {
  volume::write_file((fs::path(dir) / name).string(), j.dump(2) + "\n");
}

/// Base checkpoint plus optional head and adapter containers.
struct Loaded {
  model::Model<float> base;
  std::optional<model::Model<float>> adapted;
  text::Vocabulary vocab;
};

Loaded load_models(const std::string& base_path, const std::string& head_path, const std::string& adapters_path,
                   const std::string& vocab_path) {
  require_file(base_path, "base checkpoint");
  const std::string vp = vocab_path.empty() ? sibling(base_path, "vocab.txt") : vocab_path;
  require_file(vp, "vocabulary");
  if (!head_path.empty()) require_file(head_path, "head checkpoint");
  if (!adapters_path.empty()) require_file(adapters_path, "adapter checkpoint");
  Loaded l{checkpoint::model_from_base(checkpoint::load(base_path)), std::nullopt, text::load_vocab(vp)};
  require(l.vocab.size() <= l.base.cfg.text.vocab_size, Errc::compatibility,
          "vocabulary is larger than the checkpoint's embedding table");
  if (!head_path.empty()) checkpoint::apply_adapters(l.base, checkpoint::load(head_path));
  if (!adapters_path.empty()) {
    l.adapted = l.base.clone();
    checkpoint::apply_adapters(*l.adapted, checkpoint::load(adapters_path));
  }
  return l;
}

std::string manifest_path(const pipeline::RunConfig& cfg, const std::string& flag) {
  const std::string p = flag.empty() ? cfg.manifest : flag;
  require(!p.empty(), Errc::invalid_config, "no manifest: pass --data or set data.manifest");
  require_file(p, "manifest");
  return p;
}

void print_table(const std::vector<pipeline::ComparisonRow>& rows, const std::string& dir) {
  const auto t = pipeline::format_table(rows);
  std::cout << t;
  volume::write_file((fs::path(dir) / "comparison.txt").string(), t);
  write_json(dir, "comparison.json", pipeline::to_json(rows));
}

json epoch_log(const train::FitResult& r) {
  auto a = json::array();
  for (const auto& e : r.log) a.push_back(e.to_json());
  return a;
}

// ---------------------------------------------------------------------------
// Commands

int cmd_gen_synth(const Globals& g, std::size_t n_train, std::size_t n_val, std::size_t n_test) {
  const auto cfg = resolve_config(g);
  require(n_train + n_val + n_test > 0, Errc::invalid_config, "gen-synth needs at least one record");
  const std::string dir = g.out.empty() ? "synth" : g.out;
  const auto spec = synth::SyntheticSpec::standard();
  const auto m = data::gen_synth(spec, {n_train, n_val, n_test}, cfg.seed, dir);
  write_json(dir, "synth.json",
             {{"seed", cfg.seed}, {"train", n_train}, {"val", n_val}, {"test", n_test}, {"records", m.records.size()}});
  std::cout << "wrote " << m.records.size() << " records to " << (fs::path(dir) / "manifest.jsonl").string() << "\n";
  return 0;
}

int cmd_train(const Globals& g, const std::string& mode, const std::string& data_flag, const std::string& base_path,
              const std::string& vocab_flag, const std::string& resume) {
  auto cfg = resolve_config(g);
  require(mode == "pretrain" || mode == "lora", Errc::invalid_config, "--mode must be pretrain or lora");
  std::string manifest;
  if (mode == "pretrain") {
    manifest = data_flag.empty() ? (cfg.pretrain_manifest.empty() ? cfg.manifest : cfg.pretrain_manifest) : data_flag;
    require(!manifest.empty(), Errc::invalid_config, "no manifest: pass --data or set data.pretrain_manifest");
    require_file(manifest, "manifest");
  } else {
    manifest = manifest_path(cfg, data_flag);
    require_file(base_path, "base checkpoint");
  }
  const auto man = data::load_manifest(manifest);
  std::string dir;
  if (!resume.empty()) {
    require(fs::is_directory(resume), Errc::data, "resume directory not found: " + resume);
    dir = resume;
  } else {
    dir = pipeline::make_run_dir(cfg, "train-" + mode);
  }
  json report{{"mode", mode}, {"manifest", manifest}, {"seed", cfg.seed}};
  train::FitResult res;
  if (mode == "pretrain") {
    text::Vocabulary vocab = resume.empty() ? pipeline::corpus_vocab({&man}, cfg.prompt_template)
                                            : text::load_vocab((fs::path(dir) / "vocab.txt").string());
    text::save_vocab(vocab, (fs::path(dir) / "vocab.txt").string());
    auto m = pipeline::pretrain_base(cfg, man, vocab, dir, !resume.empty(), &res);
    report["base_sha256"] = checkpoint::base_hash(m);
  } else {
    const std::string vp = vocab_flag.empty() ? sibling(base_path, "vocab.txt") : vocab_flag;
    require_file(vp, "vocabulary");
    auto vocab = text::load_vocab(vp);
    text::save_vocab(vocab, (fs::path(dir) / "vocab.txt").string());
    auto m = checkpoint::model_from_base(checkpoint::load(base_path), cfg.seed);
    res = pipeline::finetune(cfg, m, man, vocab, dir, !resume.empty());
    const auto pc = lora::count_trainable(m);
    report["base"] = base_path;
    report["base_sha256_before"] = res.base_hash_before;
    report["base_sha256_after"] = res.base_hash_after;
    report["trainable"] = pc.trainable;
    report["total"] = pc.total;
    report["trainable_percent"] = pc.percent();
  }
  report["epochs"] = epoch_log(res);
  write_json(dir, "report.json", report);
  std::cout << "run directory: " << dir << "\n";
  return 0;
}

struct EvalArgs {
  std::string base, head, adapters, vocab, data, split = "test";
};

int cmd_eval(const Globals& g, const EvalArgs& a) {
  const auto cfg = resolve_config(g);
  const auto manifest = manifest_path(cfg, a.data);
  const std::string head = a.head.empty() && fs::exists(sibling(a.base, "head.peft")) ? sibling(a.base, "head.peft") : a.head;
  require(!head.empty() || !a.adapters.empty(), Errc::invalid_config, "eval needs a trained head (--head or --adapters)");
  auto l = load_models(a.base, head, a.adapters, a.vocab);
  const auto d = data::load_split(data::load_manifest(manifest), a.split, l.base.cfg, l.vocab);
  const auto dir = pipeline::make_run_dir(cfg, "eval");
  json report{{"split", a.split}, {"records", d.samples.size()}};
  std::optional<metrics::MetricsReport> base_r;
  if (!head.empty()) {
    base_r = inference::head_eval(l.base, d.volumes(), d.labels(), cfg.threshold);
    volume::write_file((fs::path(dir) / "base_metrics.txt").string(), metrics::serialize(*base_r));
  }
  if (l.adapted) {
    const auto ad = inference::head_eval(*l.adapted, d.volumes(), d.labels(), cfg.threshold);
    volume::write_file((fs::path(dir) / "adapted_metrics.txt").string(), metrics::serialize(ad));
    if (base_r) print_table(pipeline::compare(*base_r, ad), dir);
    else std::cout << metrics::serialize(ad);
  } else {
    std::cout << metrics::serialize(*base_r);
  }
  write_json(dir, "report.json", report);
  std::cout << "run directory: " << dir << "\n";
  return 0;
}

int cmd_zeroshot(const Globals& g, const EvalArgs& a) {
  const auto cfg = resolve_config(g);
  const auto manifest = manifest_path(cfg, a.data);
  auto l = load_models(a.base, "", a.adapters, a.vocab);
  const auto d = data::load_split(data::load_manifest(manifest), a.split, l.base.cfg, l.vocab);
  const auto dir = pipeline::make_run_dir(cfg, "zeroshot");
  const auto base_r = pipeline::zero_shot(cfg, l.base, l.vocab, d);
  volume::write_file((fs::path(dir) / "base_metrics.txt").string(), metrics::serialize(base_r));
  json report{{"split", a.split}, {"records", d.samples.size()}, {"tau", cfg.tau}, {"template", cfg.prompt_template}};
  if (l.adapted) {
    const auto ad = pipeline::zero_shot(cfg, *l.adapted, l.vocab, d);
    volume::write_file((fs::path(dir) / "adapted_metrics.txt").string(), metrics::serialize(ad));
    print_table(pipeline::compare(base_r, ad), dir);
  } else {
    std::cout << metrics::serialize(base_r);
  }
  write_json(dir, "report.json", report);
  std::cout << "run directory: " << dir << "\n";
  return 0;
}

int cmd_retrieve(const Globals& g, const EvalArgs& a, const std::vector<std::size_t>& ks) {
  const auto cfg = resolve_config(g);
  const auto manifest = manifest_path(cfg, a.data);
  auto l = load_models(a.base, "", a.adapters, a.vocab);
  const auto d = data::load_split(data::load_manifest(manifest), a.split, l.base.cfg, l.vocab);
  for (auto k : ks) require(k >= 1 && k <= d.samples.size(), Errc::invalid_config, "K outside [1, split size]");
  const auto dir = pipeline::make_run_dir(cfg, "retrieve");
  auto rows = [&](const inference::RetrievalResult& r) {
    json j{{"mrr", r.mrr}};
    for (const auto& [k, v] : r.recall_at) j["recall@" + std::to_string(k)] = v;
    return j;
  };
  const auto b = pipeline::retrieval(l.base, d, ks);
  json report{{"split", a.split}, {"records", d.samples.size()}, {"direction", "image-to-report"}, {"base", rows(b)}};
  if (l.adapted) {
    const auto r = pipeline::retrieval(*l.adapted, d, ks);
    report["adapted"] = rows(r);
    std::vector<pipeline::ComparisonRow> t;
    for (auto k : ks) t.push_back({"Recall@" + std::to_string(k), b.recall_at.at(k), r.recall_at.at(k)});
    t.push_back({"MRR", b.mrr, r.mrr});
    print_table(t, dir);
  } else {
    std::cout << report["base"].dump(2) << "\n";
  }
  write_json(dir, "report.json", report);
  std::cout << "run directory: " << dir << "\n";
  return 0;
}

int cmd_merge(const Globals& g, const std::string& base_path, const std::string& adapters_path,
              const std::string& vocab_flag) {
  const auto cfg = resolve_config(g);
  auto l = load_models(base_path, "", adapters_path, vocab_flag);
  require(l.adapted.has_value(), Errc::invalid_config, "merge-adapter needs --adapters");
  auto& m = *l.adapted;
  const auto dir = pipeline::make_run_dir(cfg, "merge");
  // Merged and dynamic forwards on a probe volume, for the report.
  synth::SyntheticSpec spec = synth::SyntheticSpec::standard();
  const auto probe = volume::preprocess(synth::generate(spec, cfg.seed).volume, m.cfg.vision.depth);
  const auto dyn = inference::embed_volume(m, probe);
  lora::merge_all(m);
  const auto merged = inference::embed_volume(m, probe);
  double diff = 0, scale = 0;
  for (std::size_t i = 0; i < dyn.size(); ++i) {
    diff = std::max(diff, std::abs(dyn[i] - merged[i]));
    scale = std::max(scale, std::abs(dyn[i]));
  }
  checkpoint::Container c{"merged", "base", {}, {}, {}};
  for (const auto& [k, v] : m.cfg.to_kv()) c.meta["config." + k] = v;
  for (const auto& p : m.params.items())
    if (p.kind() == model::Kind::base) c.tensors.push_back(checkpoint::to_tensor(p));
  checkpoint::save(c, (fs::path(dir) / "base.peft").string());
  auto head_only = m.clone();
  lora::remove_adapters(head_only);
  checkpoint::save(checkpoint::adapter_container(head_only, "head"), (fs::path(dir) / "head.peft").string());
  text::save_vocab(l.vocab, (fs::path(dir) / "vocab.txt").string());
  write_json(dir, "report.json",
             {{"base", base_path}, {"adapters", adapters_path}, {"adapters_merged", m.lora.size()},
              {"probe_max_abs_diff", diff}, {"probe_relative_diff", scale > 0 ? diff / scale : diff}});
  std::cout << "merged " << m.lora.size() << " adapters; probe relative diff " << (scale > 0 ? diff / scale : diff)
            << "\nrun directory: " << dir << "\n";
  return 0;
}

void print_count(const lora::ParamCount& pc) {
  char line[160];
  std::snprintf(line, sizeof line, "%-10s %14s %14s %10s %9s\n", "Component", "Total", "Trainable", "Adapters", "Percent");
  std::cout << line;
  for (const auto& c : pc.components) {
    std::snprintf(line, sizeof line, "%-10s %14llu %14llu %10llu %8.3f%%\n", c.component.c_str(),
                  (unsigned long long)c.total, (unsigned long long)c.trainable, (unsigned long long)c.adapters,
                  c.percent());
    std::cout << line;
  }
  std::snprintf(line, sizeof line, "%-10s %14llu %14llu %10llu %8.3f%%\n", "Total", (unsigned long long)pc.total,
                (unsigned long long)pc.trainable, (unsigned long long)pc.adapters, pc.percent());
  std::cout << line;
}

int cmd_inspect(const Globals& g, bool defaults, bool paper) {
  if (defaults) {
    std::cout << config::to_text(pipeline::RunConfig::defaults().to_kv());
    return 0;
  }
  const auto cfg = resolve_config(g);
  if (paper) {
    const auto a = lora::reference_accounting();
    char line[160];
    std::snprintf(line, sizeof line, "%-18s %14s %10s %14s %9s\n", "Component", "Model size", "Adapters", "LoRA params",
                  "Percent");
    std::cout << line;
    for (const auto& r : a.rows) {
      std::snprintf(line, sizeof line, "%-18s %14llu %10llu %14llu %8.2f%%\n", r.component.c_str(),
                    (unsigned long long)r.model_size, (unsigned long long)r.adapters,
                    (unsigned long long)r.lora_params, r.percent());
      std::cout << line;
    }
    std::snprintf(line, sizeof line, "%-18s %14s %10s %14llu\n", "Classification head", "", "",
                  (unsigned long long)a.head_params);
    std::cout << line;
    std::snprintf(line, sizeof line, "Total trainable: %llu (%.2fM) = %.2f%% of %llu\n",
                  (unsigned long long)a.trainable(), double(a.trainable()) / 1e6, a.percent(),
                  (unsigned long long)a.model_size);
    std::cout << line;
    const auto pcfg = model::ModelConfig::paper_scale();
    std::cout << "\nThis architecture at reference dimensions:\n";
    print_count(lora::structural_count(pcfg, lora::InjectionSpec::paper(pcfg)));
    return 0;
  }
  print_count(lora::structural_count(cfg.model, cfg.injection()));
  return 0;
}

int cmd_augment(const Globals& g, const std::string& policy_path, const std::string& input) {
  auto cfg = resolve_config(g);
  if (!policy_path.empty()) cfg.augment_policy = policy_path;
  require_file(input, "volume");
  const auto policy = pipeline::load_policy(cfg.augment_policy).value_or(augment::AugmentationPolicy{});
  auto vol = volume::preprocess(volume::load(input), cfg.model.vision.depth);
  const auto plan = augment::sample_plan(policy, cfg.seed);
  augment::apply(plan, vol);
  const auto dir = pipeline::make_run_dir(cfg, "augment");
  volume::write_file((fs::path(dir) / "plan.txt").string(), augment::serialize(plan));
  volume::save(volume::to_raw(vol), (fs::path(dir) / "augmented.vol").string());
  std::cout << augment::serialize(plan) << "run directory: " << dir << "\n";
  return 0;
}

std::vector<std::size_t> parse_ks(const std::string& s) {
  std::vector<std::size_t> ks;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      ks.push_back(std::stoul(tok));
    } catch (const std::exception&) {
      fail(Errc::invalid_config, "bad K list '" + s + "'");
    }
  }
  require(!ks.empty(), Errc::invalid_config, "empty K list");
  return ks;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LoRA adaptation of a CT vision-language dual encoder"};
  app.require_subcommand(1);
  Globals g;
  std::uint64_t seed = 0;
  auto* seed_opt = app.add_option("--seed", seed, "Run seed (overrides run.seed)");
  app.add_option("--config", g.config_path, "key=value config file");
  app.add_option("--out", g.out, "Output root (gen-synth: dataset directory)");
  app.add_option("--set", g.sets, "Config override key=value (repeatable)");
  app.fallthrough();

  std::size_t n_train = 800, n_val = 0, n_test = 200;
  auto* gen = app.add_subcommand("gen-synth", "Generate a synthetic planted-signal dataset");
  gen->add_option("--train", n_train);
  gen->add_option("--val", n_val);
  gen->add_option("--test", n_test);

  std::string mode = "lora", data_flag, base, vocab, resume, head, adapters, split = "test", ks = "1,5,10", policy,
              input;
  auto* trn = app.add_subcommand("train", "Pretrain a base or fine-tune LoRA adapters");
  trn->add_option("--mode", mode, "pretrain | lora")->check(CLI::IsMember({"pretrain", "lora"}));
  trn->add_option("--data", data_flag, "Manifest (overrides the config)");
  trn->add_option("--base", base, "Base checkpoint (lora mode)");
  trn->add_option("--vocab", vocab, "Vocabulary (default: next to the base)");
  trn->add_option("--resume", resume, "Continue the run in this directory");

  EvalArgs ea;
  auto add_eval = [&](CLI::App* c) {
    c->add_option("--base", ea.base, "Base checkpoint")->required();
    c->add_option("--adapters", ea.adapters, "Adapter checkpoint");
    c->add_option("--vocab", ea.vocab, "Vocabulary (default: next to the base)");
    c->add_option("--data", ea.data, "Manifest (overrides the config)");
    c->add_option("--split", ea.split, "train | val | test")->check(CLI::IsMember({"train", "val", "test"}));
  };
  auto* ev = app.add_subcommand("eval", "Classification-head metrics");
  add_eval(ev);
  ev->add_option("--head", ea.head, "Head checkpoint for the base (default: head.peft next to the base)");
  auto* zs = app.add_subcommand("zeroshot", "Zero-shot prompt classification, base vs adapted");
  add_eval(zs);
  auto* rt = app.add_subcommand("retrieve", "Image-to-report retrieval");
  add_eval(rt);
  rt->add_option("--k", ks, "Comma-separated K values");

  auto* mg = app.add_subcommand("merge-adapter", "Fold adapters into the base weights");
  mg->add_option("--base", base)->required();
  mg->add_option("--adapters", adapters)->required();
  mg->add_option("--vocab", vocab);

  bool defaults = false, paper = false;
  auto* ins = app.add_subcommand("inspect-params", "Trainable-parameter accounting");
  ins->add_flag("--defaults", defaults, "Print every config key with its default");
  ins->add_flag("--paper", paper, "Reference-scale accounting");

  auto* aug = app.add_subcommand("augment", "Apply one sampled augmentation plan to a volume");
  aug->add_option("--policy", policy, "Policy file (overrides augment.policy)");
  aug->add_option("--volume", input, "Input .vol file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  if (*seed_opt) g.seed = seed;

  try {
    if (*gen) return cmd_gen_synth(g, n_train, n_val, n_test);
    if (*trn) return cmd_train(g, mode, data_flag, base, vocab, resume);
    if (*ev) return cmd_eval(g, ea);
    if (*zs) return cmd_zeroshot(g, ea);
    if (*rt) return cmd_retrieve(g, ea, parse_ks(ks));
    if (*mg) return cmd_merge(g, base, adapters, vocab);
    if (*ins) return cmd_inspect(g, defaults, paper);
    if (*aug) return cmd_augment(g, policy, input);
  } catch (const Error& e) {
    std::cerr << "ctlora: " << e.what() << "\n";
    return exit_code(e.code());
  } catch (const std::exception& e) {
    std::cerr << "ctlora: " << e.what() << "\n";
    return 3;
  }
  return 2;
}
