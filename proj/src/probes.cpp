#include "delia/probes.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <limits>
#include <string_view>

#include "delia/ndgrad.hpp"
#include "delia/rng.hpp"
#include "delia/theory.hpp"
#include "delia/util.hpp"

namespace delia::probes {

using ndgrad::Tape;
using ndgrad::Tensor;

std::string condition_of(const RunTag& tag) {
  return tag.method + ";r=" + std::to_string(tag.scale) + ";cfg=" + hex64(tag.config_hash);
}

void ProbeReport::append(const ProbeReport& other) {
  rows.insert(rows.end(), other.rows.begin(), other.rows.end());
}

runio::Csv ProbeReport::to_csv() const {
  runio::Csv csv({"metric", "condition", "block", "seed", "value"});
  for (const auto& r : rows)
    csv.add_row({r.metric, r.condition, r.block, std::to_string(r.seed), fmt_double(r.value)});
  return csv;
}

namespace {

bool all_whitespace(const std::string& s) {
  for (char c : s)
    if (!std::isspace(static_cast<unsigned char>(c))) return false;
  return true;
}

}  // namespace

ProbeContextSet default_probe_contexts(const vocab::Vocabulary& v, uint64_t seed, size_t count) {
  ensure(count > 0, "context set must not be empty");
  int n_content = v.base_size() - 256;
  ensure(n_content > 0, "vocabulary has no content tokens to build carriers from");
  int bos = v.special_id("<bos>");
  int space = v.id_of(" ");
  Rng rng(seed);
  ProbeContextSet set;
  for (size_t i = 0; i < count; ++i) {
    std::vector<int> prefix{bos};
    size_t words = 3 + rng.bounded(4);
    for (size_t w = 0; w < words; ++w) {
      int id = static_cast<int>(rng.bounded(static_cast<uint64_t>(n_content)));
      for (int guard = 0; guard < 64 && all_whitespace(v.token_of(id)); ++guard)
        id = static_cast<int>(rng.bounded(static_cast<uint64_t>(n_content)));
      if (w > 0 && space >= 0) prefix.push_back(space);
      prefix.push_back(id);
    }
    set.prefixes.push_back(std::move(prefix));
  }
  return set;
}

uint64_t model_checksum(const model::ModelState& m) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& np : m.named_parameters()) {
    h = fnv1a64(np.name, h);
    const auto& vals = np.tensor.value();
    h = fnv1a64(std::string_view(reinterpret_cast<const char*>(vals.data()),
                                 vals.size() * sizeof(double)),
                h);
  }
  return h;
}

namespace {

// hidden state at the probed (final) position for all three block picks, one
// forward per context
std::array<std::vector<double>, 3> mean_reps(const model::ModelState& m, int token_id,
                                             const ProbeContextSet& contexts) {
  ensure(!contexts.prefixes.empty(), "context set must not be empty");
  int64_t rows = m.embedding().shape()[0];
  ensure(token_id >= 0 && token_id < rows, "probe token id out of range");
  std::array<std::vector<double>, 3> acc;
  for (const auto& prefix : contexts.prefixes) {
    std::vector<int> tokens = prefix;
    tokens.push_back(token_id);
    ensure(static_cast<int64_t>(tokens.size()) <= m.config().context_len,
           "probe context exceeds the model context window");
    Tape tape;
    auto [logits, trace] = model::forward(tape, m, tokens, true);
    (void)logits;
    int64_t last = static_cast<int64_t>(tokens.size()) - 1;
    const std::array<model::BlockSel, 3> sels{model::BlockSel::First, model::BlockSel::Middle,
                                              model::BlockSel::Last};
    for (size_t b = 0; b < 3; ++b) {
      auto rep = model::token_representation(*trace, sels[b], last);
      if (acc[b].empty()) acc[b].assign(rep.size(), 0.0);
      for (size_t i = 0; i < rep.size(); ++i) acc[b][i] += rep[i];
    }
  }
  double inv = 1.0 / static_cast<double>(contexts.prefixes.size());
  for (auto& v : acc)
    for (auto& x : v) x *= inv;
  return acc;
}

double l2(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    double d = a[i] - b[i];
    s += d * d;
  }
  return std::sqrt(s);
}

size_t sel_index(model::BlockSel sel) {
  if (sel == model::BlockSel::First) return 0;
  if (sel == model::BlockSel::Middle) return 1;
  return 2;
}

}  // namespace

std::vector<double> mean_representation(const model::ModelState& m, int token_id,
                                        const ProbeContextSet& contexts, model::BlockSel sel) {
  return mean_reps(m, token_id, contexts)[sel_index(sel)];
}

double representation_distance(const model::ModelState& m, int token_a, int token_b,
                               const ProbeContextSet& contexts, model::BlockSel sel) {
  return l2(mean_representation(m, token_a, contexts, sel),
            mean_representation(m, token_b, contexts, sel));
}

ProbeReport l2_probe(const model::ModelState& m, const vocab::Vocabulary& v,
                     const std::string& sep_token, const std::vector<std::string>& keywords,
                     const ProbeContextSet& contexts, const RunTag& tag) {
  ensure(m.embedding().shape()[0] == v.size(), "model and vocabulary disagree on size");
  ensure(!keywords.empty(), "no keywords to probe");
  int sep = v.special_id(sep_token);
  auto sep_reps = mean_reps(m, sep, contexts);
  ProbeReport report;
  std::string cond = condition_of(tag);
  for (const auto& kw : keywords) {
    int kid = v.single_token_id(kw);
    auto kw_reps = mean_reps(m, kid, contexts);
    for (auto sel : {model::BlockSel::First, model::BlockSel::Middle, model::BlockSel::Last}) {
      size_t b = sel_index(sel);
      report.rows.push_back({"l2_" + kw, cond, model::block_sel_name(sel), tag.seed,
                             l2(sep_reps[b], kw_reps[b])});
    }
  }
  return report;
}

ProbeReport downstream_loss_curve(const std::vector<ScaleRun>& runs, const std::string& method) {
  ensure(!runs.empty(), "loss curve needs at least one run");
  auto downstream_total = [](const trainer::RunRecord& r) {
    int64_t total = 0;
    for (const auto& s : r.steps) total += s.n_downstream;
    return total;
  };
  uint64_t seed0 = runs.front().record.seed;
  int64_t budget0 = downstream_total(runs.front().record);
  int64_t prev_scale = std::numeric_limits<int64_t>::min();
  ProbeReport report;
  for (const auto& run : runs) {
    if (run.record.seed != seed0) fail("runs are not comparable: seeds differ");
    if (downstream_total(run.record) != budget0)
      fail("runs are not comparable: downstream budgets differ");
    if (run.scale <= prev_scale) fail("diverse scales must be distinct and increasing");
    prev_scale = run.scale;
    double loss = run.record.final_downstream_loss();
    if (!std::isfinite(loss)) fail("run at scale " + std::to_string(run.scale) +
                                   " logged no downstream loss");
    RunTag tag{method, run.scale, run.record.seed, run.record.config_hash};
    report.rows.push_back({"final_downstream_loss", condition_of(tag), "-", tag.seed, loss});
  }
  return report;
}

std::vector<int> json_prompt(const vocab::Vocabulary& v, const data::Sample& s) {
  auto enc = model::encode_sample(v, s);
  return std::vector<int>(enc.tokens.begin(), enc.tokens.begin() + enc.resp_index + 1);
}

StateSpaceStats divergent_token_stats(const model::ModelState& m, const vocab::Vocabulary& v,
                                      const std::vector<std::vector<int>>& prompts) {
  ensure(!prompts.empty(), "no prompts to measure");
  ensure(m.embedding().shape()[0] == v.size(), "model and vocabulary disagree on size");
  int open = v.single_token_id("{");
  int64_t V = v.size();
  StateSpaceStats stats;
  for (const auto& prompt : prompts) {
    ensure(!prompt.empty(), "empty prompt");
    ensure(static_cast<int64_t>(prompt.size()) <= m.config().context_len,
           "prompt exceeds the model context window");
    Tape tape;
    auto [logits, trace] = model::forward(tape, m, prompt, false);
    (void)trace;
    const auto& flat = logits.value();
    size_t off = (prompt.size() - 1) * static_cast<size_t>(V);
    double mx = -std::numeric_limits<double>::infinity();
    for (int64_t i = 0; i < V; ++i) mx = std::max(mx, flat[off + i]);
    std::vector<double> p(V);
    double z = 0.0;
    for (int64_t i = 0; i < V; ++i) {
      p[i] = std::exp(flat[off + i] - mx);
      z += p[i];
    }
    double h = 0.0;
    for (auto& x : p) {
      x /= z;
      if (x > 0.0) h -= x * std::log(x);
    }
    stats.open_mass += p[open];
    stats.entropy += h;
    std::sort(p.begin(), p.end(), std::greater<double>());
    double cum = 0.0;
    size_t k = 0;
    while (k < p.size() && cum < 0.99) cum += p[k++];
    stats.support_099 += static_cast<double>(k);
  }
  double inv = 1.0 / static_cast<double>(prompts.size());
  stats.open_mass *= inv;
  stats.entropy *= inv;
  stats.support_099 *= inv;
  stats.prompt_count = prompts.size();
  return stats;
}

ProbeReport divergent_token_state_space(const model::ModelState& m, const vocab::Vocabulary& v,
                                        const std::vector<std::vector<int>>& prompts,
                                        const StateSpaceStats& diverse_only_control,
                                        const RunTag& tag) {
  ensure(diverse_only_control.support_099 > 0.0, "control run reports an empty support");
  auto stats = divergent_token_stats(m, v, prompts);
  std::string cond = condition_of(tag);
  double reduction =
      (diverse_only_control.support_099 - stats.support_099) / diverse_only_control.support_099;
  ProbeReport report;
  report.rows.push_back({"open_brace_mass", cond, "-", tag.seed, stats.open_mass});
  report.rows.push_back({"next_token_entropy", cond, "-", tag.seed, stats.entropy});
  report.rows.push_back({"support_at_0.99", cond, "-", tag.seed, stats.support_099});
  report.rows.push_back({"state_space_reduction", cond, "-", tag.seed, reduction});
  return report;
}

double cancellation_of(const std::vector<std::vector<double>>& grads) {
  if (grads.size() < 2) return std::numeric_limits<double>::quiet_NaN();
  size_t dim = grads.front().size();
  std::vector<double> mean(dim, 0.0);
  double norm_sum = 0.0;
  for (const auto& g : grads) {
    ensure(g.size() == dim, "per-sample gradients have mixed sizes");
    double s = 0.0;
    for (size_t i = 0; i < dim; ++i) {
      mean[i] += g[i];
      s += g[i] * g[i];
    }
    norm_sum += std::sqrt(s);
  }
  double n = static_cast<double>(grads.size());
  double mean_norm = 0.0;
  for (double x : mean) mean_norm += (x / n) * (x / n);
  mean_norm = std::sqrt(mean_norm);
  double denom = norm_sum / n;
  if (denom == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return mean_norm / denom;
}

BufferingStats per_sample_gradient_stats(model::ModelState& m, const vocab::Vocabulary& v,
                                         const std::vector<data::Sample>& batch,
                                         model::SpanMode mode) {
  ensure(!batch.empty(), "empty batch");
  ensure(m.has_adapters(), "per-sample gradient probe reads adapter parameters");
  ensure(m.embedding().shape()[0] == v.size(), "model and vocabulary disagree on size");
  std::vector<std::vector<double>> grads;
  std::vector<double> losses, norms;
  auto adapter_params = m.adapter_parameters();
  for (const auto& s : batch) {
    Tape tape;
    auto ab = model::assemble_batch(v, {s}, mode, m.config().context_len);
    auto logits = model::forward_batch(tape, m, ab.tokens, ab.nb, ab.T);
    auto loss = tape.cross_entropy(logits, ab.targets, ab.mask);
    tape.backward(loss);
    std::vector<double> flat;
    for (const auto& np : adapter_params) {
      const auto& g = np.tensor.grad();
      flat.insert(flat.end(), g.begin(), g.end());
    }
    double n2 = 0.0;
    for (double x : flat) n2 += x * x;
    losses.push_back(loss.value()[0]);
    norms.push_back(std::sqrt(n2));
    grads.push_back(std::move(flat));
  }
  for (auto np : m.named_parameters()) np.tensor.zero_grad();
  for (auto np : adapter_params) np.tensor.zero_grad();
  BufferingStats stats;
  stats.batch = batch.size();
  stats.cancellation = cancellation_of(grads);
  stats.rank_correlation = std::numeric_limits<double>::quiet_NaN();
  if (batch.size() >= 2) {
    try {
      stats.rank_correlation = theory::spearman(losses, norms);
    } catch (const std::exception&) {
      // constant losses or norms leave the ranking undefined
    }
  }
  return stats;
}

ProbeReport buffering_gradient_probe(model::ModelState& m, const vocab::Vocabulary& v,
                                     const std::vector<data::Sample>& batch, model::SpanMode mode,
                                     const RunTag& tag) {
  auto stats = per_sample_gradient_stats(m, v, batch, mode);
  std::string cond = condition_of(tag);
  ProbeReport report;
  report.rows.push_back(
      {"gradient_cancellation", cond, "-", tag.seed, stats.cancellation});
  report.rows.push_back(
      {"loss_norm_rank_correlation", cond, "-", tag.seed, stats.rank_correlation});
  report.rows.push_back(
      {"batch_size", cond, "-", tag.seed, static_cast<double>(stats.batch)});
  return report;
}

}  // namespace delia::probes
