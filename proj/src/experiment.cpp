#include "delia/experiment.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <set>
#include <stdexcept>
#include <tuple>

#include "delia/datasynth.hpp"
#include "delia/evalharness.hpp"
#include "delia/model.hpp"
#include "delia/probes.hpp"
#include "delia/rng.hpp"
#include "delia/theory.hpp"
#include "delia/trainer.hpp"
#include "delia/util.hpp"
#include "delia/vocab.hpp"
#include "json.hpp"

namespace delia::experiment {

namespace fs = std::filesystem;
using nlohmann::json;

const char* const kStageOrder[7] = {"synth",  "pretrain", "train", "probe",
                                    "eval",   "theory",   "report"};

const std::map<std::string, std::string>& config_defaults() {
  static const std::map<std::string, std::string> defaults = {
      // data synthesis
      {"downstream_n", "64"},
      {"downstream_seed", "11"},
      {"diversifier", "template-paraphraser"},
      {"diversify_intensity", "4"},
      {"diversify_seed", "12"},
      {"diverse_n", "1024"},
      {"diverse_seed", "13"},
      {"diverse_source", "procedural"},
      {"diverse_path", "-"},
      {"eval_seed", "14"},
      {"eval_max_new", "96"},
      {"demo_query", "Name one planet of the solar system."},
      // model shape and pretraining
      {"n_layers", "2"},
      {"d_model", "32"},
      {"n_heads", "2"},
      {"d_ff", "64"},
      {"context_len", "160"},
      {"model_seed", "21"},
      {"pretrain_epochs", "6"},
      {"pretrain_batch", "64"},
      {"pretrain_lr", "3e-3"},
      {"pretrain_seed", "22"},
      // finetuning runs
      {"seeds", "0,1,2"},
      {"ratio", "64"},
      {"ratios", "0,4,16,64"},
      {"finetune_lr", "3e-3"},
      {"clip_norm", "1.0"},
      {"span_mode", "instruction+response"},
      {"mix_mode", "global-shuffle"},
      {"mix_seed", "33"},
      {"adapter_rank", "8"},
      {"adapter_alpha", "16"},
      {"adapter_seed", "31"},
      {"sep_init", "random_seeded"},
      {"sep_init_seed", "32"},
      {"sep_init_text", "-"},
      // probes
      {"probe_context_seed", "41"},
      {"probe_context_count", "16"},
      {"probe_keywords", "thought,json"},
      {"buffering_batch", "64"},
      // categorical-world verification
      {"theory_worlds", "20"},
      {"theory_world_size", "32"},
      {"theory_seed", "51"},
      {"theory_eps", "1e-3"},
      {"theory_kl_targets", "1e-4,1e-2,1"},
  };
  return defaults;
}

ExperimentConfig ExperimentConfig::parse(const std::string& text) {
  runio::KvConfig user = runio::KvConfig::parse(text);
  const auto& defaults = config_defaults();
  std::set<std::string> known;
  for (const auto& [key, value] : defaults) known.insert(key);
  user.require_known(known);

  ExperimentConfig cfg;
  for (const auto& [key, dflt] : defaults)
    cfg.kv.set(key, user.has(key) ? user.get_string(key) : dflt);
  cfg.hash = cfg.kv.hash();
  return cfg;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
  return parse(read_file(path));
}

int64_t ExperimentConfig::geti(const std::string& key) const { return kv.get_int(key); }
double ExperimentConfig::getd(const std::string& key) const { return kv.get_double(key); }
std::string ExperimentConfig::gets(const std::string& key) const { return kv.get_string(key); }

namespace {

std::vector<std::string> list_parts(const std::string& key, const std::string& value) {
  std::vector<std::string> out;
  for (const auto& part : split(value, ',')) {
    std::string t = trim(part);
    ensure(!t.empty(), "config key '" + key + "' has an empty list entry");
    out.push_back(t);
  }
  ensure(!out.empty(), "config key '" + key + "' lists no values");
  return out;
}

}  // namespace

std::vector<int64_t> ExperimentConfig::int_list(const std::string& key) const {
  std::vector<int64_t> out;
  for (const auto& t : list_parts(key, gets(key))) {
    size_t pos = 0;
    int64_t v = 0;
    try {
      v = std::stoll(t, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    ensure(pos == t.size(), "config key '" + key + "': '" + t + "' is not an integer");
    out.push_back(v);
  }
  return out;
}

std::vector<double> ExperimentConfig::double_list(const std::string& key) const {
  std::vector<double> out;
  for (const auto& t : list_parts(key, gets(key))) {
    size_t pos = 0;
    double v = 0.0;
    try {
      v = std::stod(t, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    ensure(pos == t.size(), "config key '" + key + "': '" + t + "' is not a number");
    out.push_back(v);
  }
  return out;
}

std::string resolve_out_root(const std::string& flag_value) {
  if (!flag_value.empty()) return flag_value;
  if (const char* env = std::getenv("DELIA_OUT_ROOT"); env != nullptr && *env != '\0') return env;
  return "delia-out";
}

namespace {

int64_t stage_index(const std::string& name) {
  for (int64_t i = 0; i < 7; ++i)
    if (name == kStageOrder[i]) return i;
  fail("unknown stage '" + name + "'");
}

const std::map<std::string, std::vector<std::string>>& stage_deps() {
  static const std::map<std::string, std::vector<std::string>> deps = {
      {"synth", {}},
      {"pretrain", {"synth"}},
      {"train", {"pretrain"}},
      {"probe", {"train"}},
      {"eval", {"train"}},
      {"theory", {}},
      {"report", {"probe", "eval", "theory"}},
  };
  return deps;
}

fs::path marker_path(const fs::path& dir, const std::string& stage) {
  return dir / "stages" / (stage + ".done");
}

void add_artifact(runio::RunManifest& man, const fs::path& dir, const std::string& rel) {
  man.add(dir, rel, rel);
}

// every per-run random choice moves together when the run seed changes
struct SeedPack {
  uint64_t run = 0;
  uint64_t mix = 0;
  uint64_t adapter = 0;
  uint64_t sep = 0;
};

SeedPack seeds_for(const ExperimentConfig& cfg, int64_t k) {
  auto u = [](int64_t v) { return static_cast<uint64_t>(v); };
  return {u(k), u(cfg.geti("mix_seed") + k), u(cfg.geti("adapter_seed") + k),
          u(cfg.geti("sep_init_seed") + k)};
}

vocab::InitStrategy sep_strategy(const ExperimentConfig& cfg, uint64_t seed) {
  std::string text = cfg.gets("sep_init_text");
  if (text == "-") text.clear();
  return vocab::parse_init_strategy(cfg.gets("sep_init"), seed, text);
}

model::TransformerConfig model_config(const ExperimentConfig& cfg, int64_t vocab_size) {
  model::TransformerConfig mc;
  mc.n_layers = cfg.geti("n_layers");
  mc.d_model = cfg.geti("d_model");
  mc.n_heads = cfg.geti("n_heads");
  mc.d_ff = cfg.geti("d_ff");
  mc.context_len = cfg.geti("context_len");
  mc.vocab_size = vocab_size;
  mc.validate();
  return mc;
}

std::string seed_dir(int64_t k) { return "runs/seed" + std::to_string(k); }

std::map<std::string, int64_t> arm_scales(int64_t ratio) {
  return {{"full", ratio}, {"wo_diverse", 0}, {"wo_diversified", ratio}, {"wo_all", 0}};
}

// arm holding the model trained at a given diverse scale
std::string run_name_for_scale(int64_t scale, int64_t ratio) {
  if (scale == ratio) return "full";
  if (scale == 0) return "wo_diverse";
  return "curve_r" + std::to_string(scale);
}

void write_run(const fs::path& dir, const std::string& rel_dir, const std::string& name,
               const trainer::RunRecord& rec, int64_t scale, runio::RunManifest& man) {
  std::string csv_rel = rel_dir + "/metrics_" + name + ".csv";
  std::string meta_rel = rel_dir + "/" + name + ".json";
  trainer::metrics_csv(rec).write(dir / csv_rel);

  json meta;
  meta["seed"] = rec.seed;
  meta["scale"] = scale;
  meta["stream_hash"] = hex64(rec.stream_hash);
  meta["config_hash"] = hex64(rec.config_hash);
  meta["multi_epoch_override"] = rec.multi_epoch_override;
  meta["checkpoint"] = rec.checkpoint_path;
  write_file(dir / meta_rel, meta.dump(2) + "\n");

  add_artifact(man, dir, csv_rel);
  add_artifact(man, dir, meta_rel);
}

model::ModelState load_model(const fs::path& dir, const std::string& rel,
                             const vocab::Vocabulary& v) {
  runio::Checkpoint c = runio::read_checkpoint(dir / rel);
  ensure(c.vocab_hash == v.hash(),
         "checkpoint " + rel + " was trained against a different vocabulary");
  return runio::restore_model(c);
}

std::vector<std::string> training_instructions(const std::vector<data::Sample>& raw,
                                               const std::vector<data::Sample>& diversified) {
  std::vector<std::string> out;
  out.reserve(raw.size() + diversified.size());
  for (const auto& s : raw) out.push_back(s.instruction);
  for (const auto& s : diversified) out.push_back(s.instruction);
  return out;
}

void stage_synth(const ExperimentConfig& cfg, const fs::path& dir, runio::RunManifest& man) {
  fs::create_directories(dir / "data");

  auto raw = datasynth::generate_downstream_formatted(cfg.geti("downstream_n"),
                                                      static_cast<uint64_t>(cfg.geti("downstream_seed")));
  datasynth::DiversifierSpec dspec;
  dspec.kind = datasynth::parse_diversifier_kind(cfg.gets("diversifier"));
  dspec.seed = static_cast<uint64_t>(cfg.geti("diversify_seed"));
  dspec.intensity = cfg.geti("diversify_intensity");
  auto diversified = datasynth::diversify_instructions(raw, dspec);

  std::string diverse_path = cfg.gets("diverse_path");
  if (diverse_path == "-") diverse_path.clear();
  auto diverse = datasynth::sample_diverse_qa(
      cfg.geti("diverse_n"), static_cast<uint64_t>(cfg.geti("diverse_seed")),
      datasynth::parse_diverse_source(cfg.gets("diverse_source")), diverse_path);

  auto seen = training_instructions(raw, diversified);
  auto eval_set = evalharness::build_eval_set(raw, seen, static_cast<uint64_t>(cfg.geti("eval_seed")));
  evalharness::ensure_disjoint(eval_set, seen);

  // the tokenizer covers the eval paraphrases too: held-out wording must not
  // pay a byte-fallback penalty that the training wording avoids
  std::vector<std::string> corpus;
  auto push = [&corpus](const std::vector<data::Sample>& samples) {
    for (const auto& s : samples) {
      corpus.push_back(s.instruction);
      corpus.push_back(s.response);
    }
  };
  push(raw);
  push(diversified);
  push(diverse);
  push(eval_set.samples);
  corpus.push_back(
      evalharness::demo_instruction(evalharness::DemoMode::Follow, cfg.gets("demo_query")));
  corpus.push_back(
      evalharness::demo_instruction(evalharness::DemoMode::Negate, cfg.gets("demo_query")));
  auto v = vocab::build_vocab(corpus, {"<pad>", "<bos>", "<eos>", "<resp>"});

  datasynth::write_jsonl((dir / "data/downstream.jsonl").string(), raw);
  datasynth::write_jsonl((dir / "data/diversified.jsonl").string(), diversified);
  datasynth::write_jsonl((dir / "data/diverse.jsonl").string(), diverse);
  datasynth::write_jsonl((dir / "data/eval.jsonl").string(), eval_set.samples);
  write_file(dir / "data/vocab.json", v.to_json());

  for (const char* rel : {"data/downstream.jsonl", "data/diversified.jsonl", "data/diverse.jsonl",
                          "data/eval.jsonl", "data/vocab.json"})
    add_artifact(man, dir, rel);
}

void stage_pretrain(const ExperimentConfig& cfg, const fs::path& dir, runio::RunManifest& man) {
  auto v = vocab::Vocabulary::from_json(read_file(dir / "data/vocab.json"));
  auto diverse = datasynth::read_jsonl((dir / "data/diverse.jsonl").string());
  trainer::RunRecord rec;
  auto m = pretrain_base(cfg, v, std::move(diverse), &rec);
  rec.config_hash = cfg.hash;
  rec.checkpoint_path = "base/base.ckpt";

  fs::create_directories(dir / "base");
  runio::save_checkpoint(dir / "base/base.ckpt", m, v.hash(), rec.seed);
  add_artifact(man, dir, "base/base.ckpt");
  write_run(dir, "base", "base", rec, 0, man);
}

void stage_train(const ExperimentConfig& cfg, const fs::path& dir, runio::RunManifest& man) {
  auto v = vocab::Vocabulary::from_json(read_file(dir / "data/vocab.json"));
  auto raw = datasynth::read_jsonl((dir / "data/downstream.jsonl").string());
  auto diversified = datasynth::read_jsonl((dir / "data/diversified.jsonl").string());
  auto diverse = datasynth::read_jsonl((dir / "data/diverse.jsonl").string());
  auto base = load_model(dir, "base/base.ckpt", v);

  int64_t ratio = cfg.geti("ratio");
  auto ratios = cfg.int_list("ratios");
  for (size_t i = 1; i < ratios.size(); ++i)
    ensure(ratios[i - 1] < ratios[i], "config key 'ratios' must be strictly increasing");
  ensure(ratios.empty() || ratios.back() <= ratio,
         "config key 'ratios' exceeds the headline ratio");

  vocab::Vocabulary grown;
  bool have_grown = false;
  for (int64_t k : cfg.int_list("seeds")) {
    SeedPack sp = seeds_for(cfg, k);
    std::string rel_dir = seed_dir(k);
    fs::create_directories(dir / rel_dir);

    trainer::AblationSpec spec;
    spec.downstream_raw = raw;
    spec.downstream_diversified = diversified;
    spec.diverse = diverse;
    spec.r = ratio;
    spec.mix_mode = datasynth::parse_mix_mode(cfg.gets("mix_mode"));
    spec.mix_seed = sp.mix;
    spec.plan.learning_rate = cfg.getd("finetune_lr");
    spec.plan.epochs = 1;
    spec.plan.span_mode = model::parse_span_mode(cfg.gets("span_mode"));
    spec.plan.seed = sp.run;
    spec.plan.clip_norm = cfg.getd("clip_norm");
    spec.adapter_rank = cfg.geti("adapter_rank");
    spec.adapter_alpha = cfg.getd("adapter_alpha");
    spec.adapter_seed = sp.adapter;
    spec.sep_init = sep_strategy(cfg, sp.sep);

    auto result = trainer::run_ablation(base, v, spec);
    if (!have_grown) {
      grown = result.vocab;
      have_grown = true;
      write_file(dir / "data/vocab_sep.json", grown.to_json());
      add_artifact(man, dir, "data/vocab_sep.json");
    } else {
      ensure(result.vocab.hash() == grown.hash(),
             "vocabulary with the special token diverged across seeds");
    }

    const auto arm_scale = arm_scales(ratio);
    for (auto& arm : result.arms) {
      std::string ck_rel = rel_dir + "/" + arm.name + ".ckpt";
      arm.record.config_hash = cfg.hash;
      arm.record.checkpoint_path = ck_rel;
      runio::save_checkpoint(dir / ck_rel, arm.model, grown.hash(), spec.plan.seed);
      add_artifact(man, dir, ck_rel);
      write_run(dir, rel_dir, arm.name, arm.record, arm_scale.at(arm.name), man);
    }

    // the scale sweep reuses wo_diverse for 0 and full for the headline ratio;
    // only intermediate ratios need their own runs
    for (int64_t rr : ratios) {
      if (rr == 0 || rr == ratio) continue;
      auto arm = trainer::prepare_arm(base, v, spec.adapter_rank, spec.adapter_alpha,
                                      spec.adapter_seed, spec.sep_init);
      datasynth::MixPlan mix;
      mix.r = rr;
      mix.mode = spec.mix_mode;
      mix.seed = sp.mix;
      trainer::TrainPlan plan = spec.plan;
      plan.stream = datasynth::interleave(diversified, diverse, mix);
      plan.batch_size = trainer::batch_size_for(static_cast<int64_t>(diversified.size()));
      auto rec = trainer::run_delia(arm.model, arm.vocab, diversified, diverse, plan);
      std::string name = run_name_for_scale(rr, ratio);
      std::string ck_rel = rel_dir + "/" + name + ".ckpt";
      rec.config_hash = cfg.hash;
      rec.checkpoint_path = ck_rel;
      runio::save_checkpoint(dir / ck_rel, arm.model, grown.hash(), spec.plan.seed);
      add_artifact(man, dir, ck_rel);
      write_run(dir, rel_dir, name, rec, rr, man);
    }
  }
}

void stage_probe(const ExperimentConfig& cfg, const fs::path& dir, runio::RunManifest& man) {
  auto v0 = vocab::Vocabulary::from_json(read_file(dir / "data/vocab.json"));
  auto grown = vocab::Vocabulary::from_json(read_file(dir / "data/vocab_sep.json"));
  auto base = load_model(dir, "base/base.ckpt", v0);
  auto eval_samples = datasynth::read_jsonl((dir / "data/eval.jsonl").string());
  auto raw = datasynth::read_jsonl((dir / "data/downstream.jsonl").string());
  auto diverse = datasynth::read_jsonl((dir / "data/diverse.jsonl").string());

  auto contexts = probes::default_probe_contexts(
      grown, static_cast<uint64_t>(cfg.geti("probe_context_seed")),
      static_cast<size_t>(cfg.geti("probe_context_count")));
  std::vector<std::string> keywords;
  for (const auto& kw : list_parts("probe_keywords", cfg.gets("probe_keywords")))
    keywords.push_back(kw);
  auto span = model::parse_span_mode(cfg.gets("span_mode"));
  int64_t ratio = cfg.geti("ratio");
  auto ratios = cfg.int_list("ratios");
  fs::create_directories(dir / "probes");

  // state-space control: the diverse-only base model, prompted in its own
  // (sep-free) vocabulary
  std::vector<std::vector<int>> control_prompts;
  control_prompts.reserve(eval_samples.size());
  for (const auto& s : eval_samples) control_prompts.push_back(probes::json_prompt(v0, s));
  auto control = probes::divergent_token_stats(base, v0, control_prompts);

  std::vector<std::vector<int>> prompts;
  prompts.reserve(eval_samples.size());
  for (const auto& s : eval_samples) prompts.push_back(probes::json_prompt(grown, s));

  int64_t buf_n = cfg.geti("buffering_batch");
  ensure(buf_n >= 2, "config key 'buffering_batch' must be at least 2");
  ensure(static_cast<size_t>(buf_n) <= diverse.size(),
         "config key 'buffering_batch' exceeds the diverse pool");
  std::vector<data::Sample> diverse_batch(diverse.begin(), diverse.begin() + buf_n);
  ensure(!raw.empty(), "no downstream samples to build the identical batch from");
  std::vector<data::Sample> identical_batch(static_cast<size_t>(buf_n), raw.front());

  for (int64_t k : cfg.int_list("seeds")) {
    std::string rel_dir = seed_dir(k);
    uint64_t seed = static_cast<uint64_t>(k);

    probes::ProbeReport l2;
    for (const auto& [arm, scale] : arm_scales(ratio)) {
      auto m = load_model(dir, rel_dir + "/" + arm + ".ckpt", grown);
      l2.append(probes::l2_probe(m, grown, "<sep>", keywords, contexts,
                                 {arm, scale, seed, cfg.hash}));
    }
    // the untrained reference arm: same init recipe, zero finetuning steps
    SeedPack sp = seeds_for(cfg, k);
    auto fresh = trainer::prepare_arm(base, v0, cfg.geti("adapter_rank"),
                                      cfg.getd("adapter_alpha"), sp.adapter,
                                      sep_strategy(cfg, sp.sep));
    ensure(fresh.vocab.hash() == grown.hash(), "reference arm grew a different vocabulary");
    l2.append(probes::l2_probe(fresh.model, grown, "<sep>", keywords, contexts,
                               {"random_init", 0, seed, cfg.hash}));
    std::string l2_rel = "probes/l2_seed" + std::to_string(k) + ".csv";
    l2.to_csv().write(dir / l2_rel);
    add_artifact(man, dir, l2_rel);

    std::vector<probes::ScaleRun> curve;
    for (int64_t rr : ratios)
      curve.push_back(
          {rr, load_run_record((dir / rel_dir).string(), run_name_for_scale(rr, ratio)).first});
    std::string curve_rel = "probes/loss_curve_seed" + std::to_string(k) + ".csv";
    probes::downstream_loss_curve(curve, "delia").to_csv().write(dir / curve_rel);
    add_artifact(man, dir, curve_rel);

    probes::ProbeReport space;
    for (int64_t rr : ratios) {
      auto m = load_model(dir, rel_dir + "/" + run_name_for_scale(rr, ratio) + ".ckpt", grown);
      space.append(probes::divergent_token_state_space(m, grown, prompts, control,
                                                       {"delia", rr, seed, cfg.hash}));
    }
    std::string space_rel = "probes/state_space_seed" + std::to_string(k) + ".csv";
    space.to_csv().write(dir / space_rel);
    add_artifact(man, dir, space_rel);

    auto full = load_model(dir, rel_dir + "/full.ckpt", grown);
    auto buffering = probes::buffering_gradient_probe(full, grown, diverse_batch, span,
                                                      {"diverse_batch", ratio, seed, cfg.hash});
    buffering.append(probes::buffering_gradient_probe(
        full, grown, identical_batch, span, {"identical_batch", ratio, seed, cfg.hash}));
    std::string buf_rel = "probes/buffering_seed" + std::to_string(k) + ".csv";
    buffering.to_csv().write(dir / buf_rel);
    add_artifact(man, dir, buf_rel);
  }
}

void stage_eval(const ExperimentConfig& cfg, const fs::path& dir, runio::RunManifest& man) {
  auto grown = vocab::Vocabulary::from_json(read_file(dir / "data/vocab_sep.json"));
  auto raw = datasynth::read_jsonl((dir / "data/downstream.jsonl").string());
  auto diversified = datasynth::read_jsonl((dir / "data/diversified.jsonl").string());
  evalharness::EvalSet set{datasynth::read_jsonl((dir / "data/eval.jsonl").string())};
  evalharness::ensure_disjoint(set, training_instructions(raw, diversified));

  fs::create_directories(dir / "eval");
  int64_t ratio = cfg.geti("ratio");
  int64_t max_new = cfg.geti("eval_max_new");
  auto seeds = cfg.int_list("seeds");

  runio::Csv acc({"arm", "seed", "accuracy", "hits", "total"});
  for (int64_t k : seeds) {
    for (const auto& [arm, scale] : arm_scales(ratio)) {
      auto m = load_model(dir, seed_dir(k) + "/" + arm + ".ckpt", grown);
      auto rep = evalharness::formatted_accuracy(m, grown, set, max_new);
      std::string rel = "eval/results_" + arm + "_seed" + std::to_string(k) + ".csv";
      rep.to_csv().write(dir / rel);
      add_artifact(man, dir, rel);
      acc.add_row({arm, std::to_string(k), fmt_double(rep.accuracy),
                   std::to_string(rep.hits), std::to_string(rep.total)});
    }
  }
  acc.write(dir / "eval/accuracies.csv");
  add_artifact(man, dir, "eval/accuracies.csv");

  auto m = load_model(dir, seed_dir(seeds.front()) + "/full.ckpt", grown);
  auto pair = evalharness::soft_prompt_pair(m, grown, cfg.gets("demo_query"), max_new);
  std::string transcript;
  for (const auto* r : {&pair.follow, &pair.negate}) {
    transcript += "mode: " + std::string(r->mode == evalharness::DemoMode::Follow ? "follow" : "negate") + "\n";
    transcript += "instruction: " + r->instruction + "\n";
    transcript += "output: " + r->output + "\n";
    transcript += "status: " + evalharness::status_name(r->status) + "\n";
    transcript += "formatted: " + std::string(r->formatted ? "yes" : "no") + "\n\n";
  }
  transcript += "contract_holds: " + std::string(pair.contract_holds ? "yes" : "no") + "\n";
  write_file(dir / "eval/demo.txt", transcript);
  add_artifact(man, dir, "eval/demo.txt");
}

void stage_theory(const ExperimentConfig& cfg, const fs::path& dir, runio::RunManifest& man) {
  fs::create_directories(dir / "theory");
  auto csv = theory_report(static_cast<uint64_t>(cfg.geti("theory_seed")),
                           cfg.geti("theory_worlds"), cfg.geti("theory_world_size"),
                           cfg.getd("theory_eps"), cfg.double_list("theory_kl_targets"));
  csv.write(dir / "theory/theory.csv");
  add_artifact(man, dir, "theory/theory.csv");
}

void stage_report(const ExperimentConfig& cfg, const fs::path& dir, runio::RunManifest& man) {
  (void)cfg;
  // the manifest is still mid-update for this stage, so aggregate from the
  // artifacts directly and let run_experiment register the outputs
  write_report({dir.string()}, (dir / "report").string());
  for (const char* rel :
       {"report/table1.csv", "report/table2.csv", "report/table5.csv",
        "report/fig_downstream_loss.csv", "report/fig_token_state_space.csv",
        "report/summary.txt"})
    add_artifact(man, dir, rel);
}

void run_stage(const ExperimentConfig& cfg, const fs::path& dir, runio::RunManifest& man,
               const std::string& name) {
  if (name == "synth") return stage_synth(cfg, dir, man);
  if (name == "pretrain") return stage_pretrain(cfg, dir, man);
  if (name == "train") return stage_train(cfg, dir, man);
  if (name == "probe") return stage_probe(cfg, dir, man);
  if (name == "eval") return stage_eval(cfg, dir, man);
  if (name == "theory") return stage_theory(cfg, dir, man);
  if (name == "report") return stage_report(cfg, dir, man);
  fail("unknown stage '" + name + "'");
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& cfg, const std::string& dir_s,
                                const std::vector<std::string>& stages) {
  fs::path dir(dir_s);
  fs::create_directories(dir / "stages");

  fs::path cfg_path = dir / "config.cfg";
  if (fs::exists(cfg_path)) {
    ExperimentConfig existing = ExperimentConfig::load(cfg_path.string());
    ensure(existing.hash == cfg.hash, "directory " + dir_s +
                                          " holds a different config (hash " +
                                          hex64(existing.hash) + " vs " + hex64(cfg.hash) + ")");
  } else {
    write_file(cfg_path, cfg.snapshot());
  }

  ExperimentResult result;
  result.dir = dir_s;
  if (fs::exists(dir / "manifest.json")) {
    result.manifest = runio::RunManifest::load(dir);
    result.manifest.verify(dir);
  }
  if (!result.manifest.has("config.cfg")) {
    result.manifest.add(dir, "config.cfg", "config.cfg");
    result.manifest.write(dir);
  }

  // closure of the requested stages over their prerequisites, in fixed order
  std::vector<std::string> requested = stages;
  if (requested.empty()) requested.assign(kStageOrder, kStageOrder + 7);
  std::set<std::string> selected;
  std::vector<std::string> frontier = requested;
  while (!frontier.empty()) {
    std::string s = frontier.back();
    frontier.pop_back();
    stage_index(s);
    if (!selected.insert(s).second) continue;
    const auto& deps = stage_deps().at(s);
    frontier.insert(frontier.end(), deps.begin(), deps.end());
  }

  for (const char* name : kStageOrder) {
    if (selected.count(name) == 0) continue;
    if (fs::exists(marker_path(dir, name))) {
      result.stages.push_back({name, true, true, ""});
      continue;
    }
    StageResult sr{name, false, false, ""};
    try {
      run_stage(cfg, dir, result.manifest, name);
      std::string marker_rel = "stages/" + std::string(name) + ".done";
      write_file(dir / marker_rel, std::string(name) + " " + hex64(cfg.hash) + "\n");
      result.manifest.add(dir, marker_rel, marker_rel);
      result.manifest.write(dir);
      sr.ok = true;
    } catch (const std::exception& e) {
      sr.error = e.what();
      write_file(dir / "stages" / (std::string(name) + ".failed"),
                 std::string(name) + ": " + e.what() + "\n");
      result.stages.push_back(sr);
      result.all_ok = false;
      return result;
    }
    result.stages.push_back(sr);
  }
  result.all_ok = true;
  return result;
}

namespace {

// the seed list is the one key allowed to differ between aggregated directories
uint64_t hash_without_seeds(const ExperimentConfig& cfg) {
  runio::KvConfig kv;
  for (const auto& [key, value] : config_defaults()) {
    if (key == "seeds") continue;
    kv.set(key, cfg.gets(key));
  }
  return kv.hash();
}

std::string strip_config_suffix(const std::string& condition) {
  auto at = condition.find(";cfg=");
  return at == std::string::npos ? condition : condition.substr(0, at);
}

int64_t scale_of_condition(const std::string& condition) {
  auto at = condition.find(";r=");
  ensure(at != std::string::npos, "condition '" + condition + "' carries no scale");
  return std::stoll(condition.substr(at + 3));
}

struct SeedValue {
  std::string seed;
  double value = 0.0;
};

// per-seed rows in input order followed by one mean row
void emit_group(runio::Csv& csv, const std::vector<std::string>& prefix,
                const std::vector<SeedValue>& values) {
  double sum = 0.0;
  for (const auto& sv : values) {
    std::vector<std::string> row = prefix;
    row.push_back(sv.seed);
    row.push_back(fmt_double(sv.value));
    csv.add_row(row);
    sum += sv.value;
  }
  std::vector<std::string> row = prefix;
  row.push_back("mean");
  row.push_back(fmt_double(sum / static_cast<double>(values.size())));
  csv.add_row(row);
}

struct ProbeRowIn {
  std::string metric;
  std::string condition;  // cfg suffix stripped
  std::string block;
  std::string seed;
  double value = 0.0;
};

std::vector<ProbeRowIn> read_probe_csv(const fs::path& p) {
  auto rows = runio::read_csv(p);
  ensure(!rows.empty(), "empty probe report: " + p.string());
  std::vector<ProbeRowIn> out;
  for (size_t i = 1; i < rows.size(); ++i) {
    const auto& r = rows[i];
    ensure(r.size() == 5, "malformed probe row in " + p.string());
    out.push_back({r[0], strip_config_suffix(r[1]), r[2], r[3], std::stod(r[4])});
  }
  return out;
}

}  // namespace

void write_report(const std::vector<std::string>& experiment_dirs, const std::string& out_dir) {
  ensure(!experiment_dirs.empty(), "report needs at least one experiment directory");

  struct DirInfo {
    fs::path dir;
    std::vector<int64_t> seeds;
    int64_t ratio = 0;
  };
  std::vector<DirInfo> dirs;
  uint64_t schema = 0;
  for (const auto& d : experiment_dirs) {
    ExperimentConfig cfg = ExperimentConfig::load((fs::path(d) / "config.cfg").string());
    uint64_t h = hash_without_seeds(cfg);
    if (dirs.empty()) {
      schema = h;
    } else {
      ensure(h == schema,
             "schema-incompatible manifests: " + d + " differs beyond the seed list");
    }
    runio::RunManifest man = runio::RunManifest::load(d);
    man.verify(d);
    for (const char* stage : {"train", "probe", "eval", "theory"})
      ensure(fs::exists(marker_path(d, stage)),
             d + " has not completed stage '" + std::string(stage) + "'");
    dirs.push_back({fs::path(d), cfg.int_list("seeds"), cfg.geti("ratio")});
  }

  fs::path out(out_dir);
  fs::create_directories(out);

  // table 1 analog: L2 distance from the separator to each keyword
  using L2Key = std::tuple<std::string, std::string, std::string>;  // metric, condition, block
  std::map<L2Key, std::vector<SeedValue>> l2_groups;
  std::vector<L2Key> l2_order;
  for (const auto& di : dirs) {
    for (int64_t k : di.seeds) {
      auto rows = read_probe_csv(di.dir / ("probes/l2_seed" + std::to_string(k) + ".csv"));
      for (const auto& r : rows) {
        L2Key key{r.metric, r.condition, r.block};
        if (l2_groups.find(key) == l2_groups.end()) l2_order.push_back(key);
        l2_groups[key].push_back({r.seed, r.value});
      }
    }
  }
  runio::Csv table1({"metric", "condition", "block", "seed", "value"});
  for (const auto& key : l2_order)
    emit_group(table1, {std::get<0>(key), std::get<1>(key), std::get<2>(key)}, l2_groups[key]);
  table1.write(out / "table1.csv");

  // accuracy rows feed both the method table and the ablation table
  std::map<std::string, std::vector<SeedValue>> acc_groups;
  std::vector<std::string> acc_order;
  for (const auto& di : dirs) {
    auto rows = runio::read_csv(di.dir / "eval/accuracies.csv");
    ensure(rows.size() >= 2, "empty accuracy report under " + di.dir.string());
    for (size_t i = 1; i < rows.size(); ++i) {
      const auto& r = rows[i];
      ensure(r.size() == 5, "malformed accuracy row under " + di.dir.string());
      if (acc_groups.find(r[0]) == acc_groups.end()) acc_order.push_back(r[0]);
      acc_groups[r[0]].push_back({r[1], std::stod(r[2])});
    }
  }

  // table 2 analog: plain tuning against the interleaved method
  runio::Csv table2({"method", "seed", "accuracy"});
  const std::vector<std::pair<std::string, std::string>> methods = {{"common", "wo_all"},
                                                                    {"delia", "full"}};
  for (const auto& [label, arm] : methods) {
    ensure(acc_groups.count(arm) > 0, "accuracy report lacks arm '" + arm + "'");
    emit_group(table2, {label}, acc_groups[arm]);
  }
  table2.write(out / "table2.csv");

  // table 5 analog: exactly the four ablation arms
  const std::vector<std::string> arms = {"full", "wo_diverse", "wo_diversified", "wo_all"};
  ensure(acc_order.size() == arms.size(), "accuracy report does not hold exactly four arms");
  runio::Csv table5({"arm", "seed", "accuracy"});
  for (const auto& arm : arms) {
    ensure(acc_groups.count(arm) > 0, "accuracy report lacks arm '" + arm + "'");
    emit_group(table5, {arm}, acc_groups[arm]);
  }
  table5.write(out / "table5.csv");

  // figure analog: final downstream loss by diverse scale
  std::map<int64_t, std::vector<SeedValue>> loss_groups;
  for (const auto& di : dirs) {
    for (int64_t k : di.seeds) {
      auto rows = read_probe_csv(di.dir / ("probes/loss_curve_seed" + std::to_string(k) + ".csv"));
      for (const auto& r : rows) {
        ensure(r.metric == "final_downstream_loss", "unexpected loss-curve metric " + r.metric);
        loss_groups[scale_of_condition(r.condition)].push_back({r.seed, r.value});
      }
    }
  }
  runio::Csv fig_loss({"scale", "seed", "final_downstream_loss"});
  for (auto& [scale, values] : loss_groups)
    emit_group(fig_loss, {std::to_string(scale)}, values);
  fig_loss.write(out / "fig_downstream_loss.csv");

  // figure analog: divergent-token state space by diverse scale
  using SpaceKey = std::pair<std::string, int64_t>;  // metric, scale
  std::map<SpaceKey, std::vector<SeedValue>> space_groups;
  for (const auto& di : dirs) {
    for (int64_t k : di.seeds) {
      auto rows = read_probe_csv(di.dir / ("probes/state_space_seed" + std::to_string(k) + ".csv"));
      for (const auto& r : rows)
        space_groups[{r.metric, scale_of_condition(r.condition)}].push_back({r.seed, r.value});
    }
  }
  runio::Csv fig_space({"metric", "scale", "seed", "value"});
  for (auto& [key, values] : space_groups)
    emit_group(fig_space, {key.first, std::to_string(key.second)}, values);
  fig_space.write(out / "fig_token_state_space.csv");

  // plain-text summary over the aggregated groups
  std::string s;
  s += "experiment summary\n";
  s += "directories: " + std::to_string(dirs.size()) + "\n";
  size_t n_seeds = 0;
  for (const auto& di : dirs) n_seeds += di.seeds.size();
  s += "seeds: " + std::to_string(n_seeds) + "\n";
  s += "shared config hash (seed list excluded): " + hex64(schema) + "\n\n";

  auto mean_of = [](const std::vector<SeedValue>& values) {
    double sum = 0.0;
    for (const auto& sv : values) sum += sv.value;
    return sum / static_cast<double>(values.size());
  };

  s += "separator-to-keyword L2, last block (table1.csv)\n";
  for (const auto& key : l2_order) {
    if (std::get<2>(key) != "last") continue;
    s += "  " + std::get<0>(key) + "  " + std::get<1>(key) + "  " +
         fmt_double(mean_of(l2_groups[key])) + "\n";
  }
  s += "\nformatted-generation accuracy (table2.csv)\n";
  for (const auto& [label, arm] : methods)
    s += "  " + label + "  " + fmt_double(mean_of(acc_groups[arm])) + "\n";
  s += "\nablation arms (table5.csv)\n";
  for (const auto& arm : arms) s += "  " + arm + "  " + fmt_double(mean_of(acc_groups[arm])) + "\n";
  s += "\nfinal downstream loss by diverse scale (fig_downstream_loss.csv)\n";
  for (auto& [scale, values] : loss_groups)
    s += "  r=" + std::to_string(scale) + "  " + fmt_double(mean_of(values)) + "\n";
  s += "\ndivergent-token state-space reduction by diverse scale (fig_token_state_space.csv)\n";
  for (auto& [key, values] : space_groups) {
    if (key.first != "state_space_reduction") continue;
    s += "  r=" + std::to_string(key.second) + "  " + fmt_double(mean_of(values)) + "\n";
  }
  write_file(out / "summary.txt", s);
}

model::ModelState pretrain_base(const ExperimentConfig& cfg, const vocab::Vocabulary& v,
                                std::vector<data::Sample> diverse,
                                trainer::RunRecord* record) {
  auto m = model::ModelState::init(model_config(cfg, static_cast<int64_t>(v.size())),
                                   static_cast<uint64_t>(cfg.geti("model_seed")));

  trainer::TrainPlan plan;
  plan.stream = std::move(diverse);
  Rng order(static_cast<uint64_t>(cfg.geti("pretrain_seed")));
  order.shuffle(plan.stream);
  plan.learning_rate = cfg.getd("pretrain_lr");
  plan.batch_size = cfg.geti("pretrain_batch");
  plan.epochs = cfg.geti("pretrain_epochs");
  plan.allow_multi_epoch = plan.epochs > 1;
  plan.span_mode = model::SpanMode::InstructionAndResponse;
  plan.seed = static_cast<uint64_t>(cfg.geti("pretrain_seed"));
  plan.clip_norm = cfg.getd("clip_norm");

  auto rec = trainer::run_stream(m, v, plan, trainer::UpdateScope::AllParameters);
  if (record != nullptr) *record = std::move(rec);
  return m;
}

std::pair<trainer::RunRecord, int64_t> load_run_record(const std::string& run_dir,
                                                       const std::string& name) {
  fs::path dir(run_dir);
  trainer::RunRecord rec;
  json meta = json::parse(read_file(dir / (name + ".json")));
  rec.seed = meta.at("seed").get<uint64_t>();
  int64_t scale = meta.at("scale").get<int64_t>();
  rec.stream_hash = std::stoull(meta.at("stream_hash").get<std::string>(), nullptr, 16);
  rec.config_hash = std::stoull(meta.at("config_hash").get<std::string>(), nullptr, 16);
  rec.multi_epoch_override = meta.at("multi_epoch_override").get<bool>();
  rec.checkpoint_path = meta.at("checkpoint").get<std::string>();

  auto rows = runio::read_csv(dir / ("metrics_" + name + ".csv"));
  ensure(rows.size() >= 2, "metrics for run '" + name + "' hold no steps");
  for (size_t i = 1; i < rows.size(); ++i) {
    const auto& r = rows[i];
    ensure(r.size() == 6, "metrics for run '" + name + "': malformed row");
    trainer::StepLog log;
    log.step = std::stoll(r[0]);
    log.loss = std::stod(r[1]);
    log.downstream_loss = std::stod(r[2]);
    log.diverse_loss = std::stod(r[3]);
    log.n_downstream = std::stoll(r[4]);
    log.n_diverse = std::stoll(r[5]);
    rec.steps.push_back(log);
  }
  return {std::move(rec), scale};
}

runio::Csv theory_report(uint64_t seed, int64_t worlds, int64_t world_size, double eps_inf,
                         const std::vector<double>& kl_targets) {
  ensure(worlds >= 1, "need at least one world");
  runio::Csv csv({"world", "metric", "value"});
  for (int64_t w = 0; w < worlds; ++w) {
    auto world = theory::random_world(static_cast<size_t>(world_size), seed + static_cast<uint64_t>(w));
    auto model = theory::model_near(world.p_d_prime, eps_inf, seed + 1000 + static_cast<uint64_t>(w));
    auto add = [&csv, w](const std::string& metric, double v) {
      csv.add_row({std::to_string(w), metric, fmt_double(v)});
    };

    auto taylor = theory::taylor_decomposition_check(world, model);
    add("taylor_rel_error", taylor.rel_error);
    add("taylor_halving_ratio", taylor.error_by_scale[0] / taylor.error_by_scale[1]);
    add("taylor_quartering_ratio", taylor.error_by_scale[1] / taylor.error_by_scale[2]);
    add("first_order_ok", taylor.first_order_ok ? 1.0 : 0.0);

    auto sim = theory::gradient_similarity_check(world, model);
    add("grad_cosine", sim.cosine);
    add("grad_norm_ratio", sim.norm_ratio);
    add("kl_pd_pg", sim.kl_pd_pg);

    auto buffering = theory::buffering_effect_check(world, model);
    add("buffering_spearman", buffering.rank_correlation);

    auto hyp = theory::kl_hypothesis_check(world);
    add("kl_biased", hyp.kl_biased);
    add("kl_true", hyp.kl_true);
    add("biased_farther", hyp.biased_farther ? 1.0 : 0.0);

    for (const auto& pt : theory::kl_alignment_sweep(world, model, kl_targets)) {
      add("sweep_cosine@" + fmt_double(pt.kl_target), pt.cosine);
      add("sweep_norm_ratio@" + fmt_double(pt.kl_target), pt.norm_ratio);
    }
  }
  return csv;
}

}  // namespace delia::experiment
