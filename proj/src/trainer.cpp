#include "delia/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <set>

#include "delia/ndgrad.hpp"
#include "delia/util.hpp"

namespace delia::trainer {

using model::ModelState;
using ndgrad::Tape;
using ndgrad::Tensor;

int64_t batch_size_for(int64_t downstream_count) { return downstream_count < 256 ? 16 : 64; }

double RunRecord::final_loss() const {
  ensure(!steps.empty(), "run record has no steps");
  return steps.back().loss;
}

double RunRecord::final_downstream_loss() const {
  for (auto it = steps.rbegin(); it != steps.rend(); ++it)
    if (it->n_downstream > 0) return it->downstream_loss;
  fail("run record has no step containing downstream items");
}

runio::Csv metrics_csv(const RunRecord& rec) {
  runio::Csv csv({"step", "loss", "downstream_loss", "diverse_loss", "n_downstream", "n_diverse"});
  for (const auto& s : rec.steps)
    csv.add_row({std::to_string(s.step), fmt_double(s.loss), fmt_double(s.downstream_loss),
                 fmt_double(s.diverse_loss), std::to_string(s.n_downstream),
                 std::to_string(s.n_diverse)});
  return csv;
}

RunRecord run_stream(ModelState& m, const vocab::Vocabulary& v, const TrainPlan& plan,
                     UpdateScope scope, const std::string& special_token) {
  ensure(!plan.stream.empty(), "train: empty stream");
  ensure(plan.batch_size > 0, "train: batch_size must be positive");
  ensure(plan.learning_rate > 0.0, "train: learning_rate must be positive");
  ensure(plan.epochs >= 1, "train: epochs must be at least 1");
  ensure(plan.epochs == 1 || plan.allow_multi_epoch,
         "train: the stream is sized for a single pass; epochs=" + std::to_string(plan.epochs) +
             " needs allow_multi_epoch");
  ensure(m.config().vocab_size == v.size(),
         "train: model has " + std::to_string(m.config().vocab_size) +
             " vocab rows but the vocabulary has " + std::to_string(v.size()));
  if (plan.eval_every > 0)
    ensure(static_cast<bool>(plan.eval_fn), "train: eval_every set without an eval_fn");

  int sep_row = -1;
  if (scope == UpdateScope::AdaptersAndSpecialRow) {
    ensure(m.has_adapters(), "train: adapter scope needs adapters enabled first");
    ensure(v.has_special(special_token), "train: vocabulary lacks special token " + special_token);
    sep_row = v.special_id(special_token);
  }

  std::vector<model::NamedParam> trainable =
      scope == UpdateScope::AllParameters ? m.named_parameters() : m.adapter_parameters();
  if (scope == UpdateScope::AdaptersAndSpecialRow) trainable.push_back({"embedding", m.embedding()});

  std::vector<ndgrad::AdamState> opt(trainable.size());
  ndgrad::AdamHyper hp;
  hp.lr = plan.learning_rate;

  const int64_t d = m.config().d_model;
  const int64_t ctx = m.config().context_len;
  const size_t n = plan.stream.size();
  const size_t bs = static_cast<size_t>(plan.batch_size);
  const double nan = std::numeric_limits<double>::quiet_NaN();

  RunRecord rec;
  rec.seed = plan.seed;
  rec.multi_epoch_override = plan.epochs != 1;
  uint64_t stream_hash = 0xcbf29ce484222325ull;

  auto t0 = std::chrono::steady_clock::now();
  int64_t gstep = 0;
  for (int64_t epoch = 0; epoch < plan.epochs; ++epoch) {
    for (size_t off = 0; off < n; off += bs) {
      size_t hi = std::min(n, off + bs);
      std::vector<data::Sample> batch(plan.stream.begin() + static_cast<std::ptrdiff_t>(off),
                                      plan.stream.begin() + static_cast<std::ptrdiff_t>(hi));
      for (const auto& s : batch) stream_hash = fnv1a64(s.id + "\n", stream_hash);

      Tape tape;
      auto ab = model::assemble_batch(v, batch, plan.span_mode, ctx);
      Tensor logits = model::forward_batch(tape, m, ab.tokens, ab.nb, ab.T);
      Tensor loss = tape.cross_entropy(logits, ab.targets, ab.mask);

      StepLog log;
      log.step = gstep;
      log.loss = loss.item();
      ensure(std::isfinite(log.loss), "train: non-finite loss at step " + std::to_string(gstep));

      // per-source views of the same forward pass, for split loss logging
      std::vector<uint8_t> mask_down(ab.mask.size(), 0), mask_div(ab.mask.size(), 0);
      for (size_t b = 0; b < batch.size(); ++b) {
        bool down = batch[b].source == data::Source::Downstream;
        (down ? log.n_downstream : log.n_diverse) += 1;
        auto& dst = down ? mask_down : mask_div;
        size_t lo = b * static_cast<size_t>(ab.T);
        std::copy(ab.mask.begin() + static_cast<std::ptrdiff_t>(lo),
                  ab.mask.begin() + static_cast<std::ptrdiff_t>(lo + static_cast<size_t>(ab.T)),
                  dst.begin() + static_cast<std::ptrdiff_t>(lo));
      }
      log.downstream_loss =
          log.n_downstream ? tape.cross_entropy(logits, ab.targets, mask_down).item() : nan;
      log.diverse_loss = log.n_diverse ? tape.cross_entropy(logits, ab.targets, mask_div).item() : nan;

      tape.backward(loss);

      if (sep_row >= 0) {
        // zero every embedding grad row except the special token's, so the
        // frozen base rows see an exact no-op update
        auto& g = m.embedding().node()->grad;
        std::fill(g.begin(), g.begin() + static_cast<std::ptrdiff_t>(sep_row) * d, 0.0);
        std::fill(g.begin() + static_cast<std::ptrdiff_t>(sep_row + 1) * d, g.end(), 0.0);
      }
      std::vector<std::vector<double>*> grads;
      for (auto& p : trainable) {
        p.tensor.node()->ensure_grad();
        grads.push_back(&p.tensor.node()->grad);
      }
      ndgrad::clip_global_norm(grads, plan.clip_norm);
      for (size_t i = 0; i < trainable.size(); ++i)
        ndgrad::adam_step(trainable[i].tensor.value_mut(), trainable[i].tensor.node()->grad,
                          opt[i], hp);

      rec.steps.push_back(log);
      ++gstep;
      if (plan.eval_every > 0 && gstep % plan.eval_every == 0)
        rec.evals.push_back({gstep, plan.eval_fn(m)});
    }
  }
  rec.stream_hash = stream_hash;
  rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rec;
}

RunRecord run_delia(ModelState& m, const vocab::Vocabulary& v,
                    const std::vector<data::Sample>& downstream,
                    const std::vector<data::Sample>& diverse, const TrainPlan& plan) {
  ensure(!plan.stream.empty(), "train: empty stream (interleave first)");
  std::vector<std::string> want;
  want.reserve(downstream.size());
  for (const auto& s : downstream) want.push_back(s.id);
  std::sort(want.begin(), want.end());

  std::set<std::string> pool;
  for (const auto& s : diverse) pool.insert(s.id);
  std::vector<std::string> got;
  for (const auto& s : plan.stream) {
    if (s.source == data::Source::Downstream) {
      got.push_back(s.id);
    } else {
      ensure(pool.count(s.id) > 0,
             "train: stream diverse item " + s.id + " is not in the diverse pool");
    }
  }
  std::sort(got.begin(), got.end());
  ensure(got == want, "train: stream downstream items do not match the downstream set");
  return run_stream(m, v, plan, UpdateScope::AdaptersAndSpecialRow);
}

RunRecord run_common(ModelState& m, const vocab::Vocabulary& v,
                     const std::vector<data::Sample>& downstream, const TrainPlan& plan) {
  TrainPlan p = plan;
  if (p.stream.empty()) {
    datasynth::MixPlan mix;
    mix.r = 0;
    mix.mode = datasynth::MixPlan::Mode::StrictInterleave;
    mix.seed = plan.seed;
    p.stream = datasynth::interleave(downstream, {}, mix);
  }
  for (const auto& s : p.stream)
    ensure(s.source == data::Source::Downstream,
           "train: common tuning stream contains diverse item " + s.id);
  return run_delia(m, v, downstream, {}, p);
}

double eval_loss(const ModelState& m, const vocab::Vocabulary& v,
                 const std::vector<data::Sample>& samples, model::SpanMode mode,
                 int64_t batch_size) {
  ensure(!samples.empty(), "eval_loss: empty sample set");
  ensure(batch_size > 0, "eval_loss: batch_size must be positive");
  double total = 0.0;
  int64_t positions = 0;
  for (size_t off = 0; off < samples.size(); off += static_cast<size_t>(batch_size)) {
    size_t hi = std::min(samples.size(), off + static_cast<size_t>(batch_size));
    std::vector<data::Sample> batch(samples.begin() + static_cast<std::ptrdiff_t>(off),
                                    samples.begin() + static_cast<std::ptrdiff_t>(hi));
    Tape tape;
    auto ab = model::assemble_batch(v, batch, mode, m.config().context_len);
    Tensor logits = model::forward_batch(tape, m, ab.tokens, ab.nb, ab.T);
    double ce = tape.cross_entropy(logits, ab.targets, ab.mask).item();
    int64_t k = 0;
    for (uint8_t b : ab.mask) k += b != 0;
    total += ce * static_cast<double>(k);
    positions += k;
  }
  return total / static_cast<double>(positions);
}

ArmSetup prepare_arm(const ModelState& base, const vocab::Vocabulary& v, int64_t adapter_rank,
                     double adapter_alpha, uint64_t adapter_seed,
                     const vocab::InitStrategy& sep_init) {
  ensure(!base.has_adapters(), "arm setup: base model must not carry adapters yet");
  ensure(!v.has_special("<sep>"), "arm setup: pass the vocabulary from before the special token");
  ArmSetup arm;
  arm.vocab = v;
  arm.model = ModelState::clone(base);
  arm.model.add_special_row(arm.vocab, "<sep>", sep_init);
  arm.model.enable_adapters(adapter_rank, adapter_alpha, adapter_seed);
  return arm;
}

AblationResult run_ablation(const ModelState& base, const vocab::Vocabulary& v,
                            const AblationSpec& spec) {
  ensure(!base.has_adapters(), "ablation: base model must not carry adapters yet");
  ensure(!v.has_special("<sep>"), "ablation: pass the vocabulary from before the special token");
  ensure(spec.plan.stream.empty(), "ablation: plan.stream is built per arm; leave it empty");
  ensure(!spec.downstream_raw.empty() && !spec.downstream_diversified.empty() &&
             !spec.diverse.empty(),
         "ablation: all three sample pools must be non-empty");

  struct ArmDef {
    const char* name;
    const std::vector<data::Sample>* down;
    bool with_diverse;
  };
  const std::vector<ArmDef> defs = {
      {"full", &spec.downstream_diversified, true},
      {"wo_diverse", &spec.downstream_diversified, false},
      {"wo_diversified", &spec.downstream_raw, true},
      {"wo_all", &spec.downstream_raw, false},
  };

  AblationResult out;
  const std::vector<data::Sample> no_diverse;
  uint64_t vocab_hash = 0;
  for (const auto& def : defs) {
    ArmSetup arm =
        prepare_arm(base, v, spec.adapter_rank, spec.adapter_alpha, spec.adapter_seed,
                    spec.sep_init);
    vocab::Vocabulary vc = std::move(arm.vocab);
    ModelState mc = std::move(arm.model);

    datasynth::MixPlan mix;
    mix.r = def.with_diverse ? spec.r : 0;
    mix.mode = spec.mix_mode;
    mix.seed = spec.mix_seed;

    TrainPlan p = spec.plan;
    p.stream = datasynth::interleave(*def.down, def.with_diverse ? spec.diverse : no_diverse, mix);
    p.batch_size = batch_size_for(static_cast<int64_t>(def.down->size()));

    RunRecord rec = def.with_diverse ? run_delia(mc, vc, *def.down, spec.diverse, p)
                                     : run_common(mc, vc, *def.down, p);
    if (out.arms.empty()) {
      out.vocab = vc;
      vocab_hash = vc.hash();
    } else {
      ensure(vc.hash() == vocab_hash, "ablation: arm vocabularies diverged");
    }
    out.arms.push_back({def.name, std::move(rec), std::move(mc)});
  }
  return out;
}

}  // namespace delia::trainer
