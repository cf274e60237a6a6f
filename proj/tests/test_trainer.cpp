#include <cmath>
#include <cstring>
#include <map>
#include <string>
#include <vector>

#include "delia/datasynth.hpp"
#include "delia/model.hpp"
#include "delia/trainer.hpp"
#include "delia/util.hpp"
#include "doctest.h"

using namespace delia;
using namespace delia::trainer;
using data::Sample;
using data::Source;

namespace {

struct Fixture {
  vocab::Vocabulary v;
  model::ModelState m;
  std::vector<Sample> down;
  std::vector<Sample> diverse;
  int sep_id = -1;
};

Fixture make_fixture(int n_down, int n_div, uint64_t seed, bool adapters = true,
                     bool with_sep = true) {
  Fixture f;
  f.down = datasynth::generate_downstream_formatted(n_down, seed);
  f.diverse = datasynth::sample_diverse_qa(n_div, seed + 1, datasynth::DiverseSource::Procedural);
  std::vector<std::string> corpus;
  for (const auto& s : f.down) {
    corpus.push_back(s.instruction);
    corpus.push_back(s.response);
  }
  for (const auto& s : f.diverse) {
    corpus.push_back(s.instruction);
    corpus.push_back(s.response);
  }
  f.v = vocab::build_vocab(corpus, {"<pad>", "<bos>", "<eos>", "<resp>"});
  model::TransformerConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 32;
  cfg.n_heads = 2;
  cfg.d_ff = 64;
  cfg.context_len = 160;
  cfg.vocab_size = f.v.size();
  f.m = model::ModelState::init(cfg, seed + 2);
  if (with_sep) {
    vocab::InitStrategy init;
    init.kind = vocab::InitStrategy::Kind::RandomSeeded;
    init.seed = seed + 3;
    f.sep_id = f.m.add_special_row(f.v, "<sep>", init);
  }
  if (adapters) f.m.enable_adapters(4, 8.0, seed + 4);
  return f;
}

std::map<std::string, std::vector<double>> snapshot(const model::ModelState& m) {
  std::map<std::string, std::vector<double>> out;
  for (const auto& np : m.named_parameters()) out[np.name] = np.tensor.value();
  return out;
}

bool same_bits(const std::vector<double>& a, const std::vector<double>& b) {
  return a.size() == b.size() &&
         std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

uint64_t ids_hash(const std::vector<Sample>& stream, int repeats = 1) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (int r = 0; r < repeats; ++r)
    for (const auto& s : stream) h = fnv1a64(s.id + "\n", h);
  return h;
}

datasynth::MixPlan mix_of(int64_t r, datasynth::MixPlan::Mode mode, uint64_t seed) {
  datasynth::MixPlan mix;
  mix.r = r;
  mix.mode = mode;
  mix.seed = seed;
  return mix;
}

}  // namespace

TEST_CASE("batch size rule keys on the downstream count") {
  CHECK(batch_size_for(64) == 16);
  CHECK(batch_size_for(255) == 16);
  CHECK(batch_size_for(256) == 64);
  CHECK(batch_size_for(1000) == 64);
}

TEST_CASE("train plan validation catches misuse") {
  auto f = make_fixture(2, 2, 100);
  TrainPlan plan;
  CHECK_THROWS_WITH(run_stream(f.m, f.v, plan, UpdateScope::AdaptersAndSpecialRow),
                    doctest::Contains("empty stream"));
  plan.stream = f.down;
  plan.epochs = 2;
  CHECK_THROWS_WITH(run_stream(f.m, f.v, plan, UpdateScope::AdaptersAndSpecialRow),
                    doctest::Contains("allow_multi_epoch"));
  plan.epochs = 1;
  plan.eval_every = 2;
  CHECK_THROWS_WITH(run_stream(f.m, f.v, plan, UpdateScope::AdaptersAndSpecialRow),
                    doctest::Contains("eval_fn"));
  plan.eval_every = 0;

  auto bare = make_fixture(2, 2, 100, false);
  CHECK_THROWS_WITH(run_stream(bare.m, bare.v, plan, UpdateScope::AdaptersAndSpecialRow),
                    doctest::Contains("adapters enabled first"));

  auto nosep = make_fixture(2, 2, 100, true, false);
  CHECK_THROWS_WITH(run_stream(nosep.m, nosep.v, plan, UpdateScope::AdaptersAndSpecialRow),
                    doctest::Contains("lacks special token"));

  CHECK_THROWS_WITH(run_stream(f.m, nosep.v, plan, UpdateScope::AdaptersAndSpecialRow),
                    doctest::Contains("vocab rows"));
}

TEST_CASE("method run checks the stream against its source pools") {
  auto f = make_fixture(4, 8, 200);
  TrainPlan plan;
  plan.batch_size = 8;

  plan.stream = datasynth::interleave(f.down, f.diverse,
                                      mix_of(2, datasynth::MixPlan::Mode::StrictInterleave, 1));
  plan.stream.erase(plan.stream.begin());
  CHECK_THROWS_WITH(run_delia(f.m, f.v, f.down, f.diverse, plan),
                    doctest::Contains("do not match the downstream set"));

  plan.stream = datasynth::interleave(f.down, f.diverse,
                                      mix_of(2, datasynth::MixPlan::Mode::StrictInterleave, 1));
  plan.stream[1].id = "alien-000001";
  CHECK_THROWS_WITH(run_delia(f.m, f.v, f.down, f.diverse, plan),
                    doctest::Contains("not in the diverse pool"));

  plan.stream = f.down;
  plan.stream.push_back(f.down[0]);
  CHECK_THROWS_WITH(run_delia(f.m, f.v, f.down, f.diverse, plan),
                    doctest::Contains("do not match the downstream set"));

  auto mixed = datasynth::interleave(f.down, f.diverse,
                                     mix_of(1, datasynth::MixPlan::Mode::StrictInterleave, 1));
  TrainPlan cp;
  cp.stream = mixed;
  CHECK_THROWS_WITH(run_common(f.m, f.v, f.down, cp),
                    doctest::Contains("common tuning stream contains diverse"));
}

TEST_CASE("per-source losses split one forward pass") {
  auto f = make_fixture(2, 2, 300);
  TrainPlan plan;
  plan.batch_size = 4;
  plan.stream = {f.down[0], f.diverse[0], f.down[1], f.diverse[1]};

  auto rec = run_stream(f.m, f.v, plan, UpdateScope::AdaptersAndSpecialRow);
  REQUIRE(rec.steps.size() == 1);
  const auto& s = rec.steps[0];
  CHECK(s.n_downstream == 2);
  CHECK(s.n_diverse == 2);
  CHECK(std::isfinite(s.downstream_loss));
  CHECK(std::isfinite(s.diverse_loss));

  auto ab = model::assemble_batch(f.v, plan.stream, plan.span_mode, 160);
  int64_t kd = 0, kv = 0;
  for (size_t i = 0; i < ab.mask.size(); ++i) {
    if (!ab.mask[i]) continue;
    size_t b = i / static_cast<size_t>(ab.T);
    (plan.stream[b].source == Source::Downstream ? kd : kv) += 1;
  }
  double mixed = (s.downstream_loss * static_cast<double>(kd) +
                  s.diverse_loss * static_cast<double>(kv)) /
                 static_cast<double>(kd + kv);
  CHECK(s.loss == doctest::Approx(mixed).epsilon(1e-9));

  auto g = make_fixture(2, 2, 301);
  TrainPlan pure;
  pure.batch_size = 16;
  auto rec2 = run_common(g.m, g.v, g.down, pure);
  REQUIRE(rec2.steps.size() == 1);
  CHECK(rec2.steps[0].n_diverse == 0);
  CHECK(std::isnan(rec2.steps[0].diverse_loss));
  CHECK(rec2.final_downstream_loss() == rec2.steps[0].downstream_loss);
}

TEST_CASE("stream is consumed in order, whole, once per epoch") {
  auto f = make_fixture(4, 8, 400);
  TrainPlan plan;
  plan.batch_size = 4;
  plan.stream = datasynth::interleave(f.down, f.diverse,
                                      mix_of(2, datasynth::MixPlan::Mode::GlobalShuffle, 9));
  auto rec = run_stream(f.m, f.v, plan, UpdateScope::AdaptersAndSpecialRow);
  CHECK(rec.steps.size() == 3);  // 12 samples / batch 4
  CHECK(rec.stream_hash == ids_hash(plan.stream));
  int64_t nd = 0, nv = 0;
  for (const auto& s : rec.steps) {
    nd += s.n_downstream;
    nv += s.n_diverse;
  }
  CHECK(nd == 4);
  CHECK(nv == 8);

  auto g = make_fixture(4, 8, 400);
  TrainPlan twice = plan;
  twice.epochs = 2;
  twice.allow_multi_epoch = true;
  auto rec2 = run_stream(g.m, g.v, twice, UpdateScope::AdaptersAndSpecialRow);
  CHECK(rec2.steps.size() == 6);
  CHECK(rec2.multi_epoch_override);
  CHECK_FALSE(rec.multi_epoch_override);
  CHECK(rec2.stream_hash == ids_hash(plan.stream, 2));
}

TEST_CASE("same seeds give bit-identical runs") {
  auto run_once = [](uint64_t seed) {
    auto f = make_fixture(8, 16, 500);
    TrainPlan plan;
    plan.batch_size = 16;
    plan.learning_rate = 3e-3;
    plan.seed = seed;
    plan.stream = datasynth::interleave(
        f.down, f.diverse, mix_of(3, datasynth::MixPlan::Mode::GlobalShuffle, seed));
    auto rec = run_delia(f.m, f.v, f.down, f.diverse, plan);
    return std::make_pair(snapshot(f.m), metrics_csv(rec).str());
  };
  auto [pa, ca] = run_once(7);
  auto [pb, cb] = run_once(7);
  CHECK(ca == cb);
  REQUIRE(pa.size() == pb.size());
  for (const auto& [name, buf] : pa) CHECK(same_bits(buf, pb.at(name)));
}

TEST_CASE("base weights stay frozen outside the adapter and special row") {
  auto f = make_fixture(8, 16, 600);
  auto before = snapshot(f.m);
  TrainPlan plan;
  plan.batch_size = 16;
  plan.learning_rate = 3e-3;
  plan.stream = datasynth::interleave(f.down, f.diverse,
                                      mix_of(3, datasynth::MixPlan::Mode::GlobalShuffle, 3));
  run_delia(f.m, f.v, f.down, f.diverse, plan);
  auto after = snapshot(f.m);

  const int64_t d = f.m.config().d_model;
  bool adapters_moved = false;
  for (const auto& [name, buf] : after) {
    if (name == "embedding") {
      const auto& was = before.at(name);
      size_t lo = static_cast<size_t>(f.sep_id) * static_cast<size_t>(d);
      size_t hi = lo + static_cast<size_t>(d);
      CHECK(std::memcmp(buf.data(), was.data(), lo * sizeof(double)) == 0);
      CHECK(std::memcmp(buf.data() + hi, was.data() + hi, (buf.size() - hi) * sizeof(double)) == 0);
      CHECK_FALSE(std::memcmp(buf.data() + lo, was.data() + lo, (hi - lo) * sizeof(double)) == 0);
    } else if (name.find(".lora.") != std::string::npos) {
      if (!same_bits(buf, before.at(name))) adapters_moved = true;
    } else {
      CHECK(same_bits(buf, before.at(name)));
    }
  }
  CHECK(adapters_moved);
}

TEST_CASE("zero diverse ratio degenerates to common tuning") {
  auto fa = make_fixture(8, 4, 700);
  TrainPlan pa;
  pa.batch_size = 16;
  pa.learning_rate = 3e-3;
  pa.seed = 77;
  pa.stream =
      datasynth::interleave(fa.down, {}, mix_of(0, datasynth::MixPlan::Mode::StrictInterleave, 77));
  auto ra = run_delia(fa.m, fa.v, fa.down, {}, pa);

  auto fb = make_fixture(8, 4, 700);
  TrainPlan pb;
  pb.batch_size = 16;
  pb.learning_rate = 3e-3;
  pb.seed = 77;
  auto rb = run_common(fb.m, fb.v, fb.down, pb);

  CHECK(ra.stream_hash == rb.stream_hash);
  CHECK(metrics_csv(ra).str() == metrics_csv(rb).str());
  auto sa = snapshot(fa.m);
  auto sb = snapshot(fb.m);
  for (const auto& [name, buf] : sa) CHECK(same_bits(buf, sb.at(name)));
}

TEST_CASE("interleaved training lowers downstream loss in one pass") {
  auto f = make_fixture(64, 64, 800);
  double before = eval_loss(f.m, f.v, f.down, model::SpanMode::InstructionAndResponse);
  TrainPlan plan;
  plan.batch_size = batch_size_for(static_cast<int64_t>(f.down.size()));
  plan.learning_rate = 3e-3;
  plan.stream = datasynth::interleave(f.down, f.diverse,
                                      mix_of(16, datasynth::MixPlan::Mode::GlobalShuffle, 5));
  auto rec = run_delia(f.m, f.v, f.down, f.diverse, plan);
  CHECK(rec.steps.size() == 68);  // 64 * 17 samples / batch 16
  double after = eval_loss(f.m, f.v, f.down, model::SpanMode::InstructionAndResponse);
  INFO("downstream loss ", before, " -> ", after);
  CHECK(after < before);
  CHECK(std::isfinite(rec.final_downstream_loss()));
}

TEST_CASE("held-out paraphrases score worse than the memorized set") {
  auto f = make_fixture(8, 4, 900);
  datasynth::DiversifierSpec dspec;
  dspec.kind = datasynth::DiversifierSpec::Kind::TemplateParaphraser;
  dspec.seed = 4242;
  dspec.intensity = 1;
  auto variants = datasynth::diversify_instructions(f.down, dspec);
  std::map<std::string, std::string> parent_instruction;
  for (const auto& s : f.down) parent_instruction[s.id] = s.instruction;
  std::vector<Sample> heldout;
  for (const auto& s : variants) {
    REQUIRE(s.lineage.has_value());
    if (s.instruction != parent_instruction.at(s.lineage->parent_id)) heldout.push_back(s);
  }
  REQUIRE(heldout.size() >= 4);

  TrainPlan plan;
  plan.batch_size = 16;
  plan.learning_rate = 1e-2;
  plan.epochs = 40;
  plan.allow_multi_epoch = true;
  plan.seed = 11;
  auto rec = run_common(f.m, f.v, f.down, plan);
  CHECK(rec.multi_epoch_override);
  CHECK(rec.final_loss() < rec.steps.front().loss);

  double train = eval_loss(f.m, f.v, f.down, model::SpanMode::InstructionAndResponse);
  double held = eval_loss(f.m, f.v, heldout, model::SpanMode::InstructionAndResponse);
  INFO("train ", train, " held-out ", held);
  CHECK(train < held);
}

TEST_CASE("eval hook observes without perturbing") {
  auto run_once = [](bool with_eval) {
    auto f = make_fixture(8, 8, 1000);
    TrainPlan plan;
    plan.batch_size = 8;
    plan.learning_rate = 3e-3;
    plan.stream = datasynth::interleave(
        f.down, f.diverse, mix_of(1, datasynth::MixPlan::Mode::StrictInterleave, 2));
    if (with_eval) {
      plan.eval_every = 1;
      auto v = f.v;
      auto down = f.down;
      plan.eval_fn = [v, down](const model::ModelState& m) {
        return eval_loss(m, v, down, model::SpanMode::InstructionAndResponse);
      };
    }
    auto rec = run_stream(f.m, f.v, plan, UpdateScope::AdaptersAndSpecialRow);
    return std::make_pair(snapshot(f.m), rec);
  };
  auto [pa, ra] = run_once(true);
  auto [pb, rb] = run_once(false);
  CHECK(ra.evals.size() == ra.steps.size());
  CHECK(rb.evals.empty());
  for (size_t i = 0; i < ra.evals.size(); ++i) {
    CHECK(ra.evals[i].step == static_cast<int64_t>(i) + 1);
    CHECK(std::isfinite(ra.evals[i].value));
  }
  for (const auto& [name, buf] : pa) CHECK(same_bits(buf, pb.at(name)));
}

TEST_CASE("ablation trains four arms from one frozen base") {
  auto f = make_fixture(8, 32, 1100, false, false);
  auto base_before = snapshot(f.m);

  datasynth::DiversifierSpec dspec;
  dspec.kind = datasynth::DiversifierSpec::Kind::TemplateParaphraser;
  dspec.seed = 21;
  dspec.intensity = 2;

  AblationSpec spec;
  spec.downstream_raw = f.down;
  spec.downstream_diversified = datasynth::diversify_instructions(f.down, dspec);
  spec.diverse = f.diverse;
  spec.r = 3;
  spec.mix_mode = datasynth::MixPlan::Mode::GlobalShuffle;
  spec.mix_seed = 31;
  spec.plan.learning_rate = 3e-3;
  spec.adapter_rank = 4;
  spec.adapter_alpha = 8.0;
  spec.adapter_seed = 41;
  spec.sep_init.kind = vocab::InitStrategy::Kind::RandomSeeded;
  spec.sep_init.seed = 51;

  auto res = run_ablation(f.m, f.v, spec);
  REQUIRE(res.arms.size() == 4);
  CHECK(res.arms[0].name == "full");
  CHECK(res.arms[1].name == "wo_diverse");
  CHECK(res.arms[2].name == "wo_diversified");
  CHECK(res.arms[3].name == "wo_all");
  CHECK(res.vocab.has_special("<sep>"));

  auto totals = [](const RunRecord& r) {
    std::pair<int64_t, int64_t> t{0, 0};
    for (const auto& s : r.steps) {
      t.first += s.n_downstream;
      t.second += s.n_diverse;
    }
    return t;
  };
  auto [d0, v0] = totals(res.arms[0].record);
  CHECK(d0 == 16);
  CHECK(v0 == 48);
  auto [d1, v1] = totals(res.arms[1].record);
  CHECK(d1 == 16);
  CHECK(v1 == 0);
  auto [d2, v2] = totals(res.arms[2].record);
  CHECK(d2 == 8);
  CHECK(v2 == 24);
  auto [d3, v3] = totals(res.arms[3].record);
  CHECK(d3 == 8);
  CHECK(v3 == 0);

  // the base the arms were cloned from never moves
  auto base_after = snapshot(f.m);
  for (const auto& [name, buf] : base_after) CHECK(same_bits(buf, base_before.at(name)));

  // the no-treatment arm is the common-tuning baseline, byte for byte
  auto g = make_fixture(8, 32, 1100, false, false);
  auto mc = model::ModelState::clone(g.m);
  auto vc = g.v;
  mc.add_special_row(vc, "<sep>", spec.sep_init);
  mc.enable_adapters(spec.adapter_rank, spec.adapter_alpha, spec.adapter_seed);
  TrainPlan ref = spec.plan;
  ref.stream =
      datasynth::interleave(g.down, {}, mix_of(0, datasynth::MixPlan::Mode::GlobalShuffle, 31));
  ref.batch_size = batch_size_for(static_cast<int64_t>(g.down.size()));
  auto ref_rec = run_common(mc, vc, g.down, ref);
  CHECK(metrics_csv(ref_rec).str() == metrics_csv(res.arms[3].record).str());
  auto sa = snapshot(mc);
  auto sb = snapshot(res.arms[3].model);
  REQUIRE(sa.size() == sb.size());
  for (const auto& [name, buf] : sa) CHECK(same_bits(buf, sb.at(name)));

  CHECK_THROWS_WITH(run_ablation(res.arms[0].model, res.vocab, spec),
                    doctest::Contains("must not carry adapters"));
}

TEST_CASE("metrics csv carries one row per step") {
  auto f = make_fixture(4, 4, 1200);
  TrainPlan plan;
  plan.batch_size = 4;
  plan.stream = f.down;
  auto rec = run_stream(f.m, f.v, plan, UpdateScope::AdaptersAndSpecialRow);
  auto csv = metrics_csv(rec);
  CHECK(csv.rows() == rec.steps.size());
  CHECK(csv.str().substr(0, csv.str().find('\n')) ==
        "step,loss,downstream_loss,diverse_loss,n_downstream,n_diverse");
  CHECK(csv.str().find("nan") != std::string::npos);  // no diverse items in this stream
}
