#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "delia/model.hpp"
#include "delia/runio.hpp"
#include "delia/sample.hpp"
#include "delia/trainer.hpp"
#include "delia/vocab.hpp"

namespace delia::probes {

// Identifies the run a measurement belongs to. config_hash ties every report
// row back to the exact config snapshot that produced the checkpoint.
struct RunTag {
  std::string method;
  int64_t scale = 0;  // diverse samples per downstream item
  uint64_t seed = 0;
  uint64_t config_hash = 0;
};

std::string condition_of(const RunTag& tag);

struct ProbeRow {
  std::string metric;
  std::string condition;
  std::string block;  // first|middle|last, or "-" for block-free metrics
  uint64_t seed = 0;
  double value = 0.0;
};

struct ProbeReport {
  std::vector<ProbeRow> rows;
  void append(const ProbeReport& other);
  runio::Csv to_csv() const;
};

// Neutral carrier sequences for representation probes. Each prefix starts with
// <bos>; the probed token is appended as the final position, so every context
// yields exactly one probe-token position and the same carriers serve every
// probed token.
struct ProbeContextSet {
  std::vector<std::vector<int>> prefixes;
  size_t size() const { return prefixes.size(); }
};

ProbeContextSet default_probe_contexts(const vocab::Vocabulary& v, uint64_t seed,
                                       size_t count = 16);

// hash over all parameter buffers; probes must leave it unchanged
uint64_t model_checksum(const model::ModelState& m);

// hidden state of `token_id` at the probe position, averaged over contexts
std::vector<double> mean_representation(const model::ModelState& m, int token_id,
                                        const ProbeContextSet& contexts, model::BlockSel sel);

double representation_distance(const model::ModelState& m, int token_a, int token_b,
                               const ProbeContextSet& contexts, model::BlockSel sel);

ProbeReport l2_probe(const model::ModelState& m, const vocab::Vocabulary& v,
                     const std::string& sep_token, const std::vector<std::string>& keywords,
                     const ProbeContextSet& contexts, const RunTag& tag);

struct ScaleRun {
  int64_t scale = 0;
  trainer::RunRecord record;
};

// final downstream-source loss per diverse scale; runs must agree on seed and
// on total downstream exposures or the curve is not comparing like with like
ProbeReport downstream_loss_curve(const std::vector<ScaleRun>& runs, const std::string& method);

struct StateSpaceStats {
  double open_mass = 0.0;     // probability on "{" at the divergent position
  double entropy = 0.0;       // of the next-token distribution
  double support_099 = 0.0;   // smallest top-k capturing 0.99 mass
  size_t prompt_count = 0;
};

// prompt ids for one sample, ending where the response must begin
std::vector<int> json_prompt(const vocab::Vocabulary& v, const data::Sample& s);

StateSpaceStats divergent_token_stats(const model::ModelState& m, const vocab::Vocabulary& v,
                                      const std::vector<std::vector<int>>& prompts);

// reduction is reported against the diverse-only control's support size
ProbeReport divergent_token_state_space(const model::ModelState& m, const vocab::Vocabulary& v,
                                        const std::vector<std::vector<int>>& prompts,
                                        const StateSpaceStats& diverse_only_control,
                                        const RunTag& tag);

struct BufferingStats {
  double cancellation = 0.0;      // ||mean grad|| / mean ||grad||, NaN for batch < 2
  double rank_correlation = 0.0;  // per-sample loss vs gradient norm, NaN when undefined
  size_t batch = 0;
};

// cancellation ratio over raw per-sample gradient vectors
double cancellation_of(const std::vector<std::vector<double>>& grads);

BufferingStats per_sample_gradient_stats(model::ModelState& m, const vocab::Vocabulary& v,
                                         const std::vector<data::Sample>& batch,
                                         model::SpanMode mode);

ProbeReport buffering_gradient_probe(model::ModelState& m, const vocab::Vocabulary& v,
                                     const std::vector<data::Sample>& batch, model::SpanMode mode,
                                     const RunTag& tag);

}  // namespace delia::probes
