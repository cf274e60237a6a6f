#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "delia/datasynth.hpp"
#include "delia/model.hpp"
#include "delia/runio.hpp"
#include "delia/sample.hpp"
#include "delia/vocab.hpp"

namespace delia::trainer {

// One optimizer step over one batch, taken in stream order.
struct StepLog {
  int64_t step = 0;
  double loss = 0.0;             // mean over all loss-bearing positions in the batch
  double downstream_loss = 0.0;  // NaN when the batch carries no downstream items
  double diverse_loss = 0.0;     // NaN when the batch carries no diverse items
  int64_t n_downstream = 0;
  int64_t n_diverse = 0;
};

struct EvalPoint {
  int64_t step = 0;
  double value = 0.0;
};

struct TrainPlan {
  std::vector<data::Sample> stream;  // consumed in order, whole, once per epoch
  double learning_rate = 2e-4;
  int64_t batch_size = 64;
  int64_t epochs = 1;
  bool allow_multi_epoch = false;  // escape hatch for the single-pass invariant
  model::SpanMode span_mode = model::SpanMode::InstructionAndResponse;
  uint64_t seed = 0;
  int64_t eval_every = 0;  // 0 disables mid-run evals
  double clip_norm = 1.0;
  std::function<double(const model::ModelState&)> eval_fn;
};

// below this many distinct downstream samples the batch size drops to 16
int64_t batch_size_for(int64_t downstream_count);

struct RunRecord {
  std::vector<StepLog> steps;
  std::vector<EvalPoint> evals;
  uint64_t seed = 0;
  uint64_t stream_hash = 0;  // chained over consumed sample ids, in order
  uint64_t config_hash = 0;  // stamped by the orchestration layer
  std::string checkpoint_path;
  bool multi_epoch_override = false;
  double wall_seconds = 0.0;  // never enters any hashed artifact

  double final_loss() const;
  // last logged value from a step that actually contained downstream items
  double final_downstream_loss() const;
};

// columns: step,loss,downstream_loss,diverse_loss,n_downstream,n_diverse
runio::Csv metrics_csv(const RunRecord& rec);

// What the optimizer may touch. Everything outside the scope stays bit-identical.
enum class UpdateScope { AdaptersAndSpecialRow, AllParameters };

RunRecord run_stream(model::ModelState& m, const vocab::Vocabulary& v, const TrainPlan& plan,
                     UpdateScope scope, const std::string& special_token = "<sep>");

// method run over an interleaved stream; validates the stream against its sources
RunRecord run_delia(model::ModelState& m, const vocab::Vocabulary& v,
                    const std::vector<data::Sample>& downstream,
                    const std::vector<data::Sample>& diverse, const TrainPlan& plan);

// baseline run on downstream data alone; builds a shuffled stream when none given
RunRecord run_common(model::ModelState& m, const vocab::Vocabulary& v,
                     const std::vector<data::Sample>& downstream, const TrainPlan& plan);

// mean loss per loss-bearing position, no parameter updates
double eval_loss(const model::ModelState& m, const vocab::Vocabulary& v,
                 const std::vector<data::Sample>& samples, model::SpanMode mode,
                 int64_t batch_size = 64);

struct ArmSetup {
  vocab::Vocabulary vocab;
  model::ModelState model;
};

// clone of `base` carrying a fresh <sep> row and adapters, plus the grown
// vocabulary; every finetuning arm starts from this
ArmSetup prepare_arm(const model::ModelState& base, const vocab::Vocabulary& v,
                     int64_t adapter_rank, double adapter_alpha, uint64_t adapter_seed,
                     const vocab::InitStrategy& sep_init);

struct AblationArm {
  std::string name;
  RunRecord record;
  model::ModelState model;
};

struct AblationSpec {
  std::vector<data::Sample> downstream_raw;          // before diversification
  std::vector<data::Sample> downstream_diversified;  // after fan-out
  std::vector<data::Sample> diverse;
  int64_t r = 64;
  datasynth::MixPlan::Mode mix_mode = datasynth::MixPlan::Mode::GlobalShuffle;
  uint64_t mix_seed = 0;
  TrainPlan plan;  // stream and batch_size are filled per arm
  int64_t adapter_rank = 8;
  double adapter_alpha = 16.0;
  uint64_t adapter_seed = 0;
  vocab::InitStrategy sep_init;
};

struct AblationResult {
  std::vector<AblationArm> arms;  // full, wo_diverse, wo_diversified, wo_all
  vocab::Vocabulary vocab;        // grown by the special token, shared by all arms
};

// four arms from one frozen base, sharing every seed; only the data differs
AblationResult run_ablation(const model::ModelState& base, const vocab::Vocabulary& v,
                            const AblationSpec& spec);

}  // namespace delia::trainer
