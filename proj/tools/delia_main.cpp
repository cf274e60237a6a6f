#include <cstdio>
#include <exception>
#include <filesystem>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "delia/datasynth.hpp"
#include "delia/evalharness.hpp"
#include "delia/experiment.hpp"
#include "delia/model.hpp"
#include "delia/probes.hpp"
#include "delia/runio.hpp"
#include "delia/trainer.hpp"
#include "delia/util.hpp"
#include "delia/vocab.hpp"

namespace fs = std::filesystem;
using namespace delia;
using experiment::ExperimentConfig;

namespace {

ExperimentConfig config_or_defaults(const std::string& path) {
  return path.empty() ? ExperimentConfig::parse("") : ExperimentConfig::load(path);
}

vocab::Vocabulary load_vocab(const std::string& path) {
  return vocab::Vocabulary::from_json(read_file(path));
}

model::ModelState load_checkpoint(const std::string& path, const vocab::Vocabulary& v) {
  auto c = runio::read_checkpoint(path);
  ensure(c.vocab_hash == v.hash(),
         "checkpoint " + path + " was trained against a different vocabulary");
  return runio::restore_model(c);
}

std::vector<std::string> comma_list(const std::string& value, const std::string& what) {
  std::vector<std::string> out;
  for (const auto& part : split(value, ',')) {
    std::string t = trim(part);
    ensure(!t.empty(), what + " has an empty entry");
    out.push_back(t);
  }
  ensure(!out.empty(), what + " is empty");
  return out;
}

int print_stages(const experiment::ExperimentResult& res) {
  for (const auto& s : res.stages) {
    if (s.skipped)
      std::printf("stage %-8s already complete\n", s.name.c_str());
    else if (s.ok)
      std::printf("stage %-8s done\n", s.name.c_str());
    else
      std::printf("stage %-8s FAILED: %s\n", s.name.c_str(), s.error.c_str());
  }
  std::printf("%s: %s\n", res.all_ok ? "ok" : "failed", res.dir.c_str());
  return res.all_ok ? 0 : 1;
}

std::string default_exp_dir(const ExperimentConfig& cfg, const std::string& out_root) {
  return (fs::path(experiment::resolve_out_root(out_root)) / ("exp-" + hex64(cfg.hash)))
      .string();
}

int cmd_run(const std::string& config, const std::string& out, const std::string& out_root,
            const std::vector<std::string>& stages) {
  auto cfg = config_or_defaults(config);
  std::string dir = out.empty() ? default_exp_dir(cfg, out_root) : out;
  return print_stages(experiment::run_experiment(cfg, dir, stages));
}

int cmd_synth(const std::string& task, int64_t n, int64_t diversify, int64_t diverse_n, int64_t r,
              uint64_t seed, const std::string& out) {
  ensure(task == "formatted", "unknown task '" + task + "' (only 'formatted' exists)");
  fs::create_directories(out);

  auto raw = datasynth::generate_downstream_formatted(n, seed);
  datasynth::DiversifierSpec dspec;
  dspec.seed = seed + 1;
  dspec.intensity = diversify;
  auto diversified = datasynth::diversify_instructions(raw, dspec);
  auto diverse = datasynth::sample_diverse_qa(diverse_n, seed + 2);

  datasynth::MixPlan mix;
  mix.r = r;
  mix.mode = datasynth::MixPlan::Mode::GlobalShuffle;
  mix.seed = seed + 3;
  auto stream = datasynth::interleave(diversified, diverse, mix);

  std::vector<std::string> seen;
  for (const auto& s : raw) seen.push_back(s.instruction);
  for (const auto& s : diversified) seen.push_back(s.instruction);
  auto eval_set = evalharness::build_eval_set(raw, seen, seed + 4);

  std::vector<std::string> corpus;
  for (const auto* pool : {&raw, &diversified, &diverse, &eval_set.samples})
    for (const auto& s : *pool) {
      corpus.push_back(s.instruction);
      corpus.push_back(s.response);
    }
  auto v = vocab::build_vocab(corpus, {"<pad>", "<bos>", "<eos>", "<resp>"});

  fs::path dir(out);
  datasynth::write_jsonl((dir / "downstream.jsonl").string(), raw);
  datasynth::write_jsonl((dir / "diversified.jsonl").string(), diversified);
  datasynth::write_jsonl((dir / "diverse.jsonl").string(), diverse);
  datasynth::write_jsonl((dir / "interleaved.jsonl").string(), stream);
  datasynth::write_jsonl((dir / "eval.jsonl").string(), eval_set.samples);
  write_file(dir / "vocab.json", v.to_json());

  std::printf("downstream %zu, diversified %zu, diverse %zu, interleaved %zu, eval %zu -> %s\n",
              raw.size(), diversified.size(), diverse.size(), stream.size(),
              eval_set.samples.size(), out.c_str());
  return 0;
}

int cmd_train(const std::string& mode, const std::string& data, const std::string& plan_path,
              const std::string& out) {
  auto plan_cfg = config_or_defaults(plan_path);
  fs::path data_dir(data);
  auto v = load_vocab((data_dir / "vocab.json").string());
  auto raw = datasynth::read_jsonl((data_dir / "downstream.jsonl").string());
  auto diversified = datasynth::read_jsonl((data_dir / "diversified.jsonl").string());
  auto diverse = datasynth::read_jsonl((data_dir / "diverse.jsonl").string());

  fs::path run_dir(out);
  fs::create_directories(run_dir);
  write_file(run_dir / "config.cfg", plan_cfg.snapshot());

  auto base = experiment::pretrain_base(plan_cfg, v, diverse);
  int64_t seed = plan_cfg.int_list("seeds").front();
  auto sep_init = vocab::parse_init_strategy(
      plan_cfg.gets("sep_init"), static_cast<uint64_t>(plan_cfg.geti("sep_init_seed")),
      plan_cfg.gets("sep_init_text") == "-" ? "" : plan_cfg.gets("sep_init_text"));

  trainer::TrainPlan plan;
  plan.learning_rate = plan_cfg.getd("finetune_lr");
  plan.span_mode = model::parse_span_mode(plan_cfg.gets("span_mode"));
  plan.seed = static_cast<uint64_t>(seed);
  plan.clip_norm = plan_cfg.getd("clip_norm");
  int64_t rank = plan_cfg.geti("adapter_rank");
  double alpha = plan_cfg.getd("adapter_alpha");
  uint64_t adapter_seed = static_cast<uint64_t>(plan_cfg.geti("adapter_seed"));

  auto save_arm = [&](const std::string& name, const trainer::ArmSetup& arm,
                      trainer::RunRecord rec) {
    std::string ck = name + ".ckpt";
    rec.checkpoint_path = ck;
    rec.config_hash = plan_cfg.hash;
    runio::save_checkpoint(run_dir / ck, arm.model, arm.vocab.hash(), plan.seed);
    trainer::metrics_csv(rec).write(run_dir / ("metrics_" + name + ".csv"));
    std::printf("%-16s final loss %s  downstream %s\n", name.c_str(),
                fmt_double(rec.final_loss()).c_str(),
                fmt_double(rec.final_downstream_loss()).c_str());
  };

  if (mode == "ablation") {
    trainer::AblationSpec spec;
    spec.downstream_raw = raw;
    spec.downstream_diversified = diversified;
    spec.diverse = diverse;
    spec.r = plan_cfg.geti("ratio");
    spec.mix_mode = datasynth::parse_mix_mode(plan_cfg.gets("mix_mode"));
    spec.mix_seed = static_cast<uint64_t>(plan_cfg.geti("mix_seed"));
    spec.plan = plan;
    spec.adapter_rank = rank;
    spec.adapter_alpha = alpha;
    spec.adapter_seed = adapter_seed;
    spec.sep_init = sep_init;
    auto result = trainer::run_ablation(base, v, spec);
    write_file(run_dir / "vocab_sep.json", result.vocab.to_json());
    for (auto& arm : result.arms)
      save_arm(arm.name, {result.vocab, std::move(arm.model)}, std::move(arm.record));
    return 0;
  }

  auto arm = trainer::prepare_arm(base, v, rank, alpha, adapter_seed, sep_init);
  write_file(run_dir / "vocab_sep.json", arm.vocab.to_json());
  trainer::RunRecord rec;
  if (mode == "delia") {
    datasynth::MixPlan mix;
    mix.r = plan_cfg.geti("ratio");
    mix.mode = datasynth::parse_mix_mode(plan_cfg.gets("mix_mode"));
    mix.seed = static_cast<uint64_t>(plan_cfg.geti("mix_seed"));
    plan.stream = datasynth::interleave(diversified, diverse, mix);
    plan.batch_size = trainer::batch_size_for(static_cast<int64_t>(diversified.size()));
    rec = trainer::run_delia(arm.model, arm.vocab, diversified, diverse, plan);
  } else {
    ensure(mode == "common", "unknown mode '" + mode + "'");
    plan.batch_size = trainer::batch_size_for(static_cast<int64_t>(raw.size()));
    rec = trainer::run_common(arm.model, arm.vocab, raw, plan);
  }
  save_arm("model", arm, std::move(rec));
  return 0;
}

int cmd_probe_l2(const std::string& checkpoint, const std::string& vocab_path,
                 const std::string& keywords, uint64_t context_seed, int64_t context_count,
                 const probes::RunTag& tag, const std::string& out) {
  auto v = load_vocab(vocab_path);
  auto m = load_checkpoint(checkpoint, v);
  auto contexts =
      probes::default_probe_contexts(v, context_seed, static_cast<size_t>(context_count));
  auto report =
      probes::l2_probe(m, v, "<sep>", comma_list(keywords, "--keywords"), contexts, tag);
  report.to_csv().write(out);
  return 0;
}

int cmd_probe_loss_curve(const std::string& run_dir, const std::string& runs,
                         const std::string& method, const std::string& out) {
  std::vector<probes::ScaleRun> curve;
  for (const auto& name : comma_list(runs, "--runs")) {
    auto [record, scale] = experiment::load_run_record(run_dir, name);
    curve.push_back({scale, std::move(record)});
  }
  std::sort(curve.begin(), curve.end(),
            [](const probes::ScaleRun& a, const probes::ScaleRun& b) { return a.scale < b.scale; });
  probes::downstream_loss_curve(curve, method).to_csv().write(out);
  return 0;
}

int cmd_probe_state_space(const std::string& checkpoint, const std::string& vocab_path,
                          const std::string& prompts_path, const std::string& control_checkpoint,
                          const std::string& control_vocab, const probes::RunTag& tag,
                          const std::string& out) {
  auto v = load_vocab(vocab_path);
  auto m = load_checkpoint(checkpoint, v);
  auto samples = datasynth::read_jsonl(prompts_path);
  std::vector<std::vector<int>> prompts;
  prompts.reserve(samples.size());
  for (const auto& s : samples) prompts.push_back(probes::json_prompt(v, s));

  probes::StateSpaceStats control;
  if (control_checkpoint.empty()) {
    // no control given: report raw stats with a zero reduction baseline
    control = probes::divergent_token_stats(m, v, prompts);
  } else {
    auto cv = control_vocab.empty() ? v : load_vocab(control_vocab);
    auto cm = load_checkpoint(control_checkpoint, cv);
    std::vector<std::vector<int>> control_prompts;
    control_prompts.reserve(samples.size());
    for (const auto& s : samples) control_prompts.push_back(probes::json_prompt(cv, s));
    control = probes::divergent_token_stats(cm, cv, control_prompts);
  }
  probes::divergent_token_state_space(m, v, prompts, control, tag).to_csv().write(out);
  return 0;
}

int cmd_probe_buffering(const std::string& checkpoint, const std::string& vocab_path,
                        const std::string& samples_path, int64_t batch_size,
                        const std::string& span_mode, const probes::RunTag& tag,
                        const std::string& out) {
  auto v = load_vocab(vocab_path);
  auto m = load_checkpoint(checkpoint, v);
  auto samples = datasynth::read_jsonl(samples_path);
  ensure(batch_size >= 1 && static_cast<size_t>(batch_size) <= samples.size(),
         "--batch-size must lie in [1, sample count]");
  samples.resize(static_cast<size_t>(batch_size));
  auto report =
      probes::buffering_gradient_probe(m, v, samples, model::parse_span_mode(span_mode), tag);
  report.to_csv().write(out);
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& vocab_path,
             const std::string& set_path, int64_t max_new, const std::string& out) {
  auto v = load_vocab(vocab_path);
  auto m = load_checkpoint(checkpoint, v);
  evalharness::EvalSet set{datasynth::read_jsonl(set_path)};
  auto report = evalharness::formatted_accuracy(m, v, set, max_new);
  report.to_csv().write(out);
  std::printf("accuracy %zu/%zu = %s\n", report.hits, report.total,
              fmt_double(report.accuracy).c_str());
  return 0;
}

int cmd_verify_theory(uint64_t seed, int64_t worlds, int64_t world_size, double eps,
                      const std::string& kl_targets, const std::string& report_path) {
  std::vector<double> targets;
  for (const auto& t : comma_list(kl_targets, "--kl-targets")) targets.push_back(std::stod(t));
  auto csv = experiment::theory_report(seed, worlds, world_size, eps, targets);
  csv.write(report_path);
  std::printf("%zu rows over %lld worlds -> %s\n", csv.rows(), static_cast<long long>(worlds),
              report_path.c_str());
  return 0;
}

int cmd_ablate(const std::string& config, const std::string& out, const std::string& out_root) {
  auto cfg = config_or_defaults(config);
  std::string dir = out.empty() ? default_exp_dir(cfg, out_root) : out;
  auto res = experiment::run_experiment(cfg, dir, {"eval"});
  int code = print_stages(res);
  if (code == 0) {
    auto rows = runio::read_csv(fs::path(dir) / "eval/accuracies.csv");
    for (size_t i = 1; i < rows.size(); ++i)
      std::printf("%-16s seed %s  accuracy %s (%s/%s)\n", rows[i][0].c_str(), rows[i][1].c_str(),
                  rows[i][2].c_str(), rows[i][3].c_str(), rows[i][4].c_str());
  }
  return code;
}

int cmd_report(const std::vector<std::string>& dirs, const std::string& out) {
  experiment::write_report(dirs, out);
  std::fputs(read_file(fs::path(out) / "summary.txt").c_str(), stdout);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"training-dynamics experiments: data synthesis, interleaved finetuning, probes"};
  app.require_subcommand(1);
  std::string out_root;
  app.add_option("--out-root", out_root,
                 "base directory for default experiment dirs (else $DELIA_OUT_ROOT, else "
                 "'delia-out')");

  std::string run_config, run_out;
  std::vector<std::string> run_stages;
  auto* run = app.add_subcommand("run", "run the experiment pipeline from a config file");
  run->add_option("--config", run_config, "experiment config file (defaults apply when omitted)");
  run->add_option("--out", run_out, "experiment directory (default: derived from the config hash)");
  run->add_option("--stages", run_stages,
                  "stages to run, with their prerequisites (default: all)")
      ->delimiter(',');

  std::string synth_task = "formatted", synth_out;
  int64_t synth_n = 64, synth_div = 4, synth_diverse = 1024, synth_r = 64;
  uint64_t synth_seed = 7;
  auto* synth = app.add_subcommand("synth", "emit the dataset files for one task");
  synth->add_option("--task", synth_task, "task family (formatted)");
  synth->add_option("--n", synth_n, "downstream sample count");
  synth->add_option("--diversify", synth_div, "paraphrases per downstream instruction");
  synth->add_option("--diverse-n", synth_diverse, "diverse pool size");
  synth->add_option("--r", synth_r, "diverse samples per downstream item in the stream");
  synth->add_option("--seed", synth_seed, "root seed for all dataset draws");
  synth->add_option("--out", synth_out, "output directory")->required();

  std::string train_mode, train_data, train_plan, train_out;
  auto* train = app.add_subcommand("train", "pretrain a base and finetune it on synthesized data");
  train->add_option("--mode", train_mode, "delia, common, or ablation")->required();
  train->add_option("--data", train_data, "directory with the synthesized datasets")->required();
  train->add_option("--plan", train_plan, "key-value plan file (defaults apply when omitted)");
  train->add_option("--out", train_out, "run directory")->required();

  std::string probe_suite, probe_ck, probe_vocab, probe_out, probe_method = "delia";
  std::string probe_keywords = "thought,json", probe_run_dir, probe_runs;
  std::string probe_prompts, probe_control_ck, probe_control_vocab;
  std::string probe_samples, probe_span = "instruction+response";
  int64_t probe_scale = 0, probe_context_count = 16, probe_batch = 64;
  uint64_t probe_seed = 0, probe_context_seed = 41;
  auto* probe = app.add_subcommand("probe", "measure a checkpoint without changing it");
  probe->add_option("--suite", probe_suite, "l2, loss-curve, state-space, or buffering")
      ->required();
  probe->add_option("--checkpoint", probe_ck, "model checkpoint to probe");
  probe->add_option("--vocab", probe_vocab, "vocabulary the checkpoint was trained with");
  probe->add_option("--out", probe_out, "report CSV path")->required();
  probe->add_option("--method", probe_method, "condition label for the report rows");
  probe->add_option("--scale", probe_scale, "diverse scale for the condition label");
  probe->add_option("--seed", probe_seed, "seed column for the report rows");
  probe->add_option("--keywords", probe_keywords, "l2: tokens to measure against <sep>");
  probe->add_option("--context-seed", probe_context_seed, "l2: probe context seed");
  probe->add_option("--context-count", probe_context_count, "l2: probe context count");
  probe->add_option("--run-dir", probe_run_dir, "loss-curve: directory holding the run records");
  probe->add_option("--runs", probe_runs, "loss-curve: run names, comma separated");
  probe->add_option("--prompts", probe_prompts, "state-space: JSONL samples prompted up to the response");
  probe->add_option("--control-checkpoint", probe_control_ck,
                    "state-space: reduction baseline checkpoint");
  probe->add_option("--control-vocab", probe_control_vocab,
                    "state-space: vocabulary for the control checkpoint");
  probe->add_option("--samples", probe_samples, "buffering: JSONL batch source");
  probe->add_option("--batch-size", probe_batch, "buffering: per-sample gradient batch size");
  probe->add_option("--span-mode", probe_span, "buffering: loss span");

  std::string eval_ck, eval_vocab, eval_set, eval_out;
  int64_t eval_max_new = 96;
  auto* eval = app.add_subcommand("eval", "score formatted generation on a held-out set");
  eval->add_option("--checkpoint", eval_ck, "model checkpoint")->required();
  eval->add_option("--vocab", eval_vocab, "vocabulary the checkpoint was trained with")
      ->required();
  eval->add_option("--set", eval_set, "held-out JSONL eval set")->required();
  eval->add_option("--max-new", eval_max_new, "generation budget per sample");
  eval->add_option("--out", eval_out, "per-sample results CSV")->required();

  uint64_t vt_seed = 51;
  int64_t vt_worlds = 20, vt_world_size = 32;
  double vt_eps = 1e-3;
  std::string vt_targets = "1e-4,1e-2,1", vt_report;
  auto* vt = app.add_subcommand("verify-theory",
                                "check the gradient decomposition on enumerable worlds");
  vt->add_option("--seed", vt_seed, "world seed");
  vt->add_option("--worlds", vt_worlds, "number of worlds");
  vt->add_option("--world-size", vt_world_size, "outcomes per world");
  vt->add_option("--eps", vt_eps, "model residual in sup norm");
  vt->add_option("--kl-targets", vt_targets, "alignment sweep targets, comma separated");
  vt->add_option("--report", vt_report, "report CSV path")->required();

  std::string ablate_config, ablate_out;
  auto* ablate = app.add_subcommand("ablate", "train and score the four ablation arms");
  ablate->add_option("--config", ablate_config, "experiment config file");
  ablate->add_option("--out", ablate_out, "experiment directory");

  std::vector<std::string> report_dirs;
  std::string report_out;
  auto* report = app.add_subcommand("report", "aggregate finished experiment directories");
  report->add_option("dirs", report_dirs, "experiment directories")->required();
  report->add_option("--out", report_out, "output directory for tables and summary")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) return cmd_run(run_config, run_out, out_root, run_stages);
    if (synth->parsed())
      return cmd_synth(synth_task, synth_n, synth_div, synth_diverse, synth_r, synth_seed,
                       synth_out);
    if (train->parsed()) return cmd_train(train_mode, train_data, train_plan, train_out);
    if (probe->parsed()) {
      probes::RunTag tag{probe_method, probe_scale, probe_seed, 0};
      if (probe_suite == "l2") {
        ensure(!probe_ck.empty() && !probe_vocab.empty(), "l2 needs --checkpoint and --vocab");
        return cmd_probe_l2(probe_ck, probe_vocab, probe_keywords, probe_context_seed,
                            probe_context_count, tag, probe_out);
      }
      if (probe_suite == "loss-curve") {
        ensure(!probe_run_dir.empty() && !probe_runs.empty(),
               "loss-curve needs --run-dir and --runs");
        return cmd_probe_loss_curve(probe_run_dir, probe_runs, probe_method, probe_out);
      }
      if (probe_suite == "state-space") {
        ensure(!probe_ck.empty() && !probe_vocab.empty() && !probe_prompts.empty(),
               "state-space needs --checkpoint, --vocab and --prompts");
        return cmd_probe_state_space(probe_ck, probe_vocab, probe_prompts, probe_control_ck,
                                     probe_control_vocab, tag, probe_out);
      }
      if (probe_suite == "buffering") {
        ensure(!probe_ck.empty() && !probe_vocab.empty() && !probe_samples.empty(),
               "buffering needs --checkpoint, --vocab and --samples");
        return cmd_probe_buffering(probe_ck, probe_vocab, probe_samples, probe_batch, probe_span,
                                   tag, probe_out);
      }
      fail("unknown probe suite '" + probe_suite + "'");
    }
    if (eval->parsed()) return cmd_eval(eval_ck, eval_vocab, eval_set, eval_max_new, eval_out);
    if (vt->parsed())
      return cmd_verify_theory(vt_seed, vt_worlds, vt_world_size, vt_eps, vt_targets, vt_report);
    if (ablate->parsed()) return cmd_ablate(ablate_config, ablate_out, out_root);
    if (report->parsed()) return cmd_report(report_dirs, report_out);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
