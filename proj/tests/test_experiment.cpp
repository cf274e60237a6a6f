#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>

#include "delia/experiment.hpp"
#include "delia/runio.hpp"
#include "delia/util.hpp"
#include "doctest.h"

using namespace delia;
using namespace delia::experiment;

namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / "delia-exp-tests" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// small enough for the unit suite, large enough that every stage has real work
const char* kSmokeConfig = R"(
downstream_n = 6
diversify_intensity = 2
diverse_n = 64
eval_max_new = 24
n_layers = 2
d_model = 16
n_heads = 2
d_ff = 32
pretrain_epochs = 1
seeds = 0
ratio = 4
ratios = 0,2,4
buffering_batch = 8
probe_context_count = 4
theory_worlds = 2
theory_world_size = 8
)";

std::vector<std::vector<std::string>> csv_at(const fs::path& p) { return runio::read_csv(p); }

}  // namespace

TEST_CASE("config defaults fill in and overrides stick") {
  auto cfg = ExperimentConfig::parse("downstream_n = 7\nratio = 16\n");
  CHECK(cfg.geti("downstream_n") == 7);
  CHECK(cfg.geti("ratio") == 16);
  CHECK(cfg.geti("diverse_n") == 1024);
  CHECK(cfg.gets("mix_mode") == "global-shuffle");
  CHECK(cfg.getd("finetune_lr") == doctest::Approx(3e-3));

  auto dflt = ExperimentConfig::parse("");
  CHECK(dflt.geti("downstream_n") == 64);
  CHECK(dflt.hash != cfg.hash);

  auto again = ExperimentConfig::parse("ratio = 16\ndownstream_n = 7\n");
  CHECK(again.hash == cfg.hash);
  CHECK(again.snapshot() == cfg.snapshot());
}

TEST_CASE("config rejects unknown keys by name") {
  CHECK_THROWS_WITH_AS(ExperimentConfig::parse("downstrem_n = 7\n"),
                       doctest::Contains("downstrem_n"), std::runtime_error);
}

TEST_CASE("config snapshot covers every knob") {
  auto cfg = ExperimentConfig::parse("");
  for (const auto& [key, value] : config_defaults()) {
    CAPTURE(key);
    CHECK(cfg.snapshot().find(key + " = ") != std::string::npos);
  }
}

TEST_CASE("config list accessors parse and validate") {
  auto cfg = ExperimentConfig::parse("seeds = 3, 1, 2\ntheory_kl_targets = 1e-4,0.5\n");
  CHECK(cfg.int_list("seeds") == std::vector<int64_t>{3, 1, 2});
  CHECK(cfg.double_list("theory_kl_targets") == std::vector<double>{1e-4, 0.5});

  auto bad = ExperimentConfig::parse("seeds = 1,x\n");
  CHECK_THROWS_WITH_AS(bad.int_list("seeds"), doctest::Contains("not an integer"),
                       std::runtime_error);
  auto gap = ExperimentConfig::parse("seeds = 1,,2\n");
  CHECK_THROWS_WITH_AS(gap.int_list("seeds"), doctest::Contains("empty list entry"),
                       std::runtime_error);
}

TEST_CASE("output root resolution order") {
  unsetenv("DELIA_OUT_ROOT");
  CHECK(resolve_out_root("") == "delia-out");
  setenv("DELIA_OUT_ROOT", "/tmp/from-env", 1);
  CHECK(resolve_out_root("") == "/tmp/from-env");
  CHECK(resolve_out_root("explicit") == "explicit");
  unsetenv("DELIA_OUT_ROOT");
}

TEST_CASE("theory report is deterministic and covers every world") {
  auto a = theory_report(9, 3, 8, 1e-3, {1e-4, 1e-2});
  auto b = theory_report(9, 3, 8, 1e-3, {1e-4, 1e-2});
  CHECK(a.str() == b.str());

  std::set<std::string> metrics;
  std::set<std::string> worlds;
  // header plus world-count times the per-world metric block
  auto rows = a.str();
  size_t lines = 0;
  for (char c : rows)
    if (c == '\n') ++lines;
  CHECK(lines == 1 + 3 * (11 + 4));
  CHECK(rows.find("taylor_rel_error") != std::string::npos);
  CHECK(rows.find("buffering_spearman") != std::string::npos);
  CHECK(rows.find("sweep_cosine@1e-04") != std::string::npos);
}

TEST_CASE("synth stage alone emits datasets and no checkpoints") {
  auto dir = fresh_dir("synth-only");
  auto cfg = ExperimentConfig::parse(kSmokeConfig);
  auto res = run_experiment(cfg, dir.string(), {"synth"});
  REQUIRE(res.all_ok);
  REQUIRE(res.stages.size() == 1);
  CHECK(res.stages[0].name == "synth");
  CHECK(res.stages[0].ok);
  CHECK_FALSE(res.stages[0].skipped);

  for (const char* rel : {"data/downstream.jsonl", "data/diversified.jsonl", "data/diverse.jsonl",
                          "data/eval.jsonl", "data/vocab.json", "stages/synth.done"})
    CHECK(fs::exists(dir / rel));
  CHECK_FALSE(fs::exists(dir / "base"));
  CHECK_FALSE(fs::exists(dir / "runs"));
  CHECK_FALSE(fs::exists(dir / "stages/pretrain.done"));

  auto again = run_experiment(cfg, dir.string(), {"synth"});
  REQUIRE(again.all_ok);
  CHECK(again.stages[0].skipped);
}

TEST_CASE("theory stage has no data prerequisites") {
  auto dir = fresh_dir("theory-only");
  auto cfg = ExperimentConfig::parse(kSmokeConfig);
  auto res = run_experiment(cfg, dir.string(), {"theory"});
  REQUIRE(res.all_ok);
  REQUIRE(res.stages.size() == 1);
  CHECK(res.stages[0].name == "theory");
  CHECK(fs::exists(dir / "theory/theory.csv"));
  CHECK_FALSE(fs::exists(dir / "data"));
}

TEST_CASE("a directory refuses a different config") {
  auto dir = fresh_dir("cfg-clash");
  auto cfg = ExperimentConfig::parse(kSmokeConfig);
  REQUIRE(run_experiment(cfg, dir.string(), {"theory"}).all_ok);
  auto other = ExperimentConfig::parse("downstream_n = 7\n");
  CHECK_THROWS_WITH_AS(run_experiment(other, dir.string(), {"theory"}),
                       doctest::Contains("different config"), std::runtime_error);
}

TEST_CASE("pipeline end to end: artifacts, resume, determinism, tampering") {
  auto cfg = ExperimentConfig::parse(kSmokeConfig);
  auto dir = fresh_dir("smoke-a");
  auto res = run_experiment(cfg, dir.string());
  REQUIRE(res.all_ok);
  REQUIRE(res.stages.size() == 7);
  for (const auto& sr : res.stages) {
    CAPTURE(sr.name);
    CHECK(sr.ok);
    CHECK(sr.error.empty());
  }

  // layout: every stage left its artifacts behind
  for (const char* rel :
       {"config.cfg", "manifest.json", "base/base.ckpt", "base/metrics_base.csv",
        "runs/seed0/full.ckpt", "runs/seed0/wo_diverse.ckpt", "runs/seed0/wo_diversified.ckpt",
        "runs/seed0/wo_all.ckpt", "runs/seed0/curve_r2.ckpt", "runs/seed0/metrics_full.csv",
        "probes/l2_seed0.csv", "probes/loss_curve_seed0.csv", "probes/state_space_seed0.csv",
        "probes/buffering_seed0.csv", "eval/results_full_seed0.csv", "eval/accuracies.csv",
        "eval/demo.txt", "theory/theory.csv", "report/table1.csv", "report/table2.csv",
        "report/table5.csv", "report/fig_downstream_loss.csv",
        "report/fig_token_state_space.csv", "report/summary.txt"}) {
    CAPTURE(rel);
    CHECK(fs::exists(dir / rel));
  }
  runio::RunManifest::load(dir).verify(dir);

  // loss-curve rows carry one value per configured scale
  auto curve = csv_at(dir / "probes/loss_curve_seed0.csv");
  REQUIRE(curve.size() == 4);
  CHECK(curve[1][1].find("r=0;") != std::string::npos);
  CHECK(curve[2][1].find("r=2;") != std::string::npos);
  CHECK(curve[3][1].find("r=4;") != std::string::npos);

  // the ablation table holds exactly the four arms, each with seed rows and a mean
  auto table5 = csv_at(dir / "report/table5.csv");
  REQUIRE(table5.size() == 1 + 4 * 2);
  std::set<std::string> arms;
  for (size_t i = 1; i < table5.size(); ++i) arms.insert(table5[i][0]);
  CHECK(arms == std::set<std::string>{"full", "wo_diverse", "wo_diversified", "wo_all"});
  CHECK(table5[2][1] == "mean");

  auto table2 = csv_at(dir / "report/table2.csv");
  REQUIRE(table2.size() == 1 + 2 * 2);
  CHECK(table2[1][0] == "common");
  CHECK(table2[3][0] == "delia");

  // resume: a second call over the same directory runs nothing
  auto resumed = run_experiment(cfg, dir.string());
  REQUIRE(resumed.all_ok);
  for (const auto& sr : resumed.stages) {
    CAPTURE(sr.name);
    CHECK(sr.skipped);
  }

  // determinism: an independent directory reproduces every artifact bit for bit
  auto dir2 = fresh_dir("smoke-b");
  auto res2 = run_experiment(cfg, dir2.string());
  REQUIRE(res2.all_ok);
  auto man1 = runio::RunManifest::load(dir);
  auto man2 = runio::RunManifest::load(dir2);
  REQUIRE(man1.entries().size() == man2.entries().size());
  for (const auto& e : man1.entries()) {
    CAPTURE(e.name);
    REQUIRE(man2.has(e.name));
    CHECK(man2.entry(e.name).hash == e.hash);
  }

  // tampering with a finished artifact fails the next resume by name
  {
    std::ofstream out(dir2 / "data/downstream.jsonl", std::ios::app);
    out << "\n";
  }
  CHECK_THROWS_WITH_AS(run_experiment(cfg, dir2.string()),
                       doctest::Contains("data/downstream.jsonl"), std::runtime_error);

  // cross-directory report: compatible configs aggregate, others are rejected
  auto out1 = fresh_dir("report-one");
  write_report({dir.string()}, out1.string());
  CHECK(fs::exists(out1 / "table5.csv"));

  auto clash = fresh_dir("report-clash");
  auto other = ExperimentConfig::parse("downstream_n = 7\n");
  write_file(clash / "config.cfg", other.snapshot());
  CHECK_THROWS_WITH_AS(write_report({dir.string(), clash.string()}, out1.string()),
                       doctest::Contains("schema-incompatible"), std::runtime_error);
}

TEST_CASE("a failing stage leaves a marker and stops the pipeline") {
  auto dir = fresh_dir("failing");
  // the diverse pool is smaller than the buffering batch, so probe must fail
  auto cfg = ExperimentConfig::parse(
      "downstream_n = 4\ndiversify_intensity = 2\ndiverse_n = 4\nratio = 2\nratios = 0,2\n"
      "seeds = 0\npretrain_epochs = 1\nn_layers = 2\nd_model = 16\nn_heads = 2\nd_ff = 32\n"
      "eval_max_new = 8\nprobe_context_count = 2\nbuffering_batch = 16\n"
      "theory_worlds = 1\ntheory_world_size = 4\n");
  auto res = run_experiment(cfg, dir.string(), {"probe"});
  REQUIRE_FALSE(res.all_ok);
  REQUIRE_FALSE(res.stages.empty());
  const auto& last = res.stages.back();
  CHECK(last.name == "probe");
  CHECK_FALSE(last.ok);
  CHECK(last.error.find("buffering_batch") != std::string::npos);
  CHECK(fs::exists(dir / "stages/probe.failed"));
  CHECK_FALSE(fs::exists(dir / "stages/probe.done"));

  // the dependency stages completed and stay completed
  CHECK(fs::exists(dir / "stages/train.done"));

  // fixing the config is a different config; the directory stays bound to the old one
  auto fixed = ExperimentConfig::parse("downstream_n = 4\ndiverse_n = 4\nbuffering_batch = 4\n");
  CHECK_THROWS_WITH_AS(run_experiment(fixed, dir.string(), {"probe"}),
                       doctest::Contains("different config"), std::runtime_error);
}
