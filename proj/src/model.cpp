#include "delia/model.hpp"

#include <algorithm>
#include <map>
#include <tuple>

#include "delia/util.hpp"
#include "json.hpp"

namespace delia::model {

using nlohmann::json;

void TransformerConfig::validate() const {
  ensure(n_layers >= 0, "config: n_layers must be >= 0");
  ensure(d_model > 0 && n_heads > 0 && d_ff > 0, "config: dimensions must be positive");
  ensure(d_model % n_heads == 0, "config: d_model must be divisible by n_heads");
  ensure(context_len > 0, "config: context_len must be positive");
  ensure(vocab_size > 0, "config: vocab_size must be set");
}

std::string TransformerConfig::to_json() const {
  json j;
  j["n_layers"] = n_layers;
  j["d_model"] = d_model;
  j["n_heads"] = n_heads;
  j["d_ff"] = d_ff;
  j["context_len"] = context_len;
  j["vocab_size"] = vocab_size;
  return j.dump();
}

TransformerConfig TransformerConfig::from_json(const std::string& text) {
  json j = json::parse(text, nullptr, false);
  ensure(!j.is_discarded() && j.is_object(), "config: not a json object");
  TransformerConfig c;
  for (auto* f : {"n_layers", "d_model", "n_heads", "d_ff", "context_len", "vocab_size"})
    ensure(j.contains(f) && j[f].is_number_integer(), std::string("config: missing field ") + f);
  c.n_layers = j["n_layers"].get<int64_t>();
  c.d_model = j["d_model"].get<int64_t>();
  c.n_heads = j["n_heads"].get<int64_t>();
  c.d_ff = j["d_ff"].get<int64_t>();
  c.context_len = j["context_len"].get<int64_t>();
  c.vocab_size = j["vocab_size"].get<int64_t>();
  c.validate();
  return c;
}

namespace {

Tensor normal_leaf(Rng& root, const std::string& name, ndgrad::Shape shape, double sigma) {
  Rng rng = root.derive(name);
  std::vector<double> v(static_cast<size_t>(ndgrad::shape_numel(shape)));
  for (auto& x : v) x = rng.normal(0.0, sigma);
  return Tensor::leaf(std::move(shape), std::move(v), true, name);
}

Tensor const_leaf(const std::string& name, ndgrad::Shape shape, double fill) {
  std::vector<double> v(static_cast<size_t>(ndgrad::shape_numel(shape)), fill);
  return Tensor::leaf(std::move(shape), std::move(v), true, name);
}

constexpr double kInitSigma = 0.02;

// d_in, d_out of a named linear, from the suffix after the last dot
std::pair<int64_t, int64_t> target_dims(const TransformerConfig& cfg, const std::string& target) {
  auto dotpos = target.rfind('.');
  std::string mat = dotpos == std::string::npos ? target : target.substr(dotpos + 1);
  if (mat == "wq" || mat == "wk" || mat == "wv" || mat == "wo")
    return {cfg.d_model, cfg.d_model};
  if (mat == "w1") return {cfg.d_model, cfg.d_ff};
  if (mat == "w2") return {cfg.d_ff, cfg.d_model};
  fail("adapter target is not a block linear: " + target);
}

const char* kAdapterMats[] = {"wq", "wk", "wv", "wo", "w1", "w2"};

}  // namespace

ModelState ModelState::init(const TransformerConfig& cfg, uint64_t seed) {
  cfg.validate();
  ModelState m;
  m.cfg_ = cfg;
  Rng root(seed);
  m.embedding_ = normal_leaf(root, "embedding", {cfg.vocab_size, cfg.d_model}, kInitSigma);
  m.pos_ = normal_leaf(root, "pos", {cfg.context_len, cfg.d_model}, kInitSigma);
  for (int64_t i = 0; i < cfg.n_layers; ++i) {
    std::string p = "block" + std::to_string(i) + ".";
    Block b;
    b.ln1_g = const_leaf(p + "ln1.g", {cfg.d_model}, 1.0);
    b.ln1_b = const_leaf(p + "ln1.b", {cfg.d_model}, 0.0);
    b.wq = normal_leaf(root, p + "wq", {cfg.d_model, cfg.d_model}, kInitSigma);
    b.wk = normal_leaf(root, p + "wk", {cfg.d_model, cfg.d_model}, kInitSigma);
    b.wv = normal_leaf(root, p + "wv", {cfg.d_model, cfg.d_model}, kInitSigma);
    b.wo = normal_leaf(root, p + "wo", {cfg.d_model, cfg.d_model}, kInitSigma);
    b.ln2_g = const_leaf(p + "ln2.g", {cfg.d_model}, 1.0);
    b.ln2_b = const_leaf(p + "ln2.b", {cfg.d_model}, 0.0);
    b.w1 = normal_leaf(root, p + "w1", {cfg.d_model, cfg.d_ff}, kInitSigma);
    b.b1 = const_leaf(p + "b1", {cfg.d_ff}, 0.0);
    b.w2 = normal_leaf(root, p + "w2", {cfg.d_ff, cfg.d_model}, kInitSigma);
    b.b2 = const_leaf(p + "b2", {cfg.d_model}, 0.0);
    m.blocks_.push_back(std::move(b));
  }
  m.final_ln_g_ = const_leaf("final_ln.g", {cfg.d_model}, 1.0);
  m.final_ln_b_ = const_leaf("final_ln.b", {cfg.d_model}, 0.0);
  return m;
}

void ModelState::enable_adapters(int64_t rank, double alpha, uint64_t seed) {
  ensure(adapters_.empty(), "adapters already enabled");
  ensure(rank > 0, "adapter rank must be positive");
  Rng root(seed);
  for (int64_t i = 0; i < cfg_.n_layers; ++i) {
    for (const char* mat : kAdapterMats) {
      LoRAAdapter a;
      a.target = "block" + std::to_string(i) + "." + mat;
      a.rank = rank;
      a.alpha = alpha;
      auto [d_in, d_out] = target_dims(cfg_, a.target);
      a.A = normal_leaf(root, a.target + ".lora.A", {rank, d_in}, kInitSigma);
      a.B = Tensor::leaf({d_out, rank}, std::vector<double>(static_cast<size_t>(d_out * rank), 0.0),
                         true, a.target + ".lora.B");
      adapters_.push_back(std::move(a));
    }
  }
}

std::vector<NamedParam> ModelState::named_parameters() const {
  std::vector<NamedParam> out;
  out.push_back({"embedding", embedding_});
  out.push_back({"pos", pos_});
  for (size_t i = 0; i < blocks_.size(); ++i) {
    std::string p = "block" + std::to_string(i) + ".";
    const Block& b = blocks_[i];
    out.push_back({p + "ln1.g", b.ln1_g});
    out.push_back({p + "ln1.b", b.ln1_b});
    out.push_back({p + "wq", b.wq});
    out.push_back({p + "wk", b.wk});
    out.push_back({p + "wv", b.wv});
    out.push_back({p + "wo", b.wo});
    out.push_back({p + "ln2.g", b.ln2_g});
    out.push_back({p + "ln2.b", b.ln2_b});
    out.push_back({p + "w1", b.w1});
    out.push_back({p + "b1", b.b1});
    out.push_back({p + "w2", b.w2});
    out.push_back({p + "b2", b.b2});
  }
  out.push_back({"final_ln.g", final_ln_g_});
  out.push_back({"final_ln.b", final_ln_b_});
  for (const auto& a : adapters_) {
    out.push_back({a.target + ".lora.A", a.A});
    out.push_back({a.target + ".lora.B", a.B});
  }
  return out;
}

std::vector<NamedParam> ModelState::adapter_parameters() const {
  std::vector<NamedParam> out;
  for (const auto& a : adapters_) {
    out.push_back({a.target + ".lora.A", a.A});
    out.push_back({a.target + ".lora.B", a.B});
  }
  return out;
}

int ModelState::add_special_row(vocab::Vocabulary& v, const std::string& name,
                                const vocab::InitStrategy& strategy) {
  ensure(v.size() == cfg_.vocab_size, "vocab and embedding row count out of sync");
  std::vector<double> emb = embedding_.value();
  int id = vocab::add_special_token(v, emb, cfg_.d_model, name, strategy);
  cfg_.vocab_size = v.size();
  embedding_ = Tensor::leaf({cfg_.vocab_size, cfg_.d_model}, std::move(emb), true, "embedding");
  return id;
}

ModelState ModelState::from_buffers(
    const TransformerConfig& cfg,
    const std::vector<std::pair<std::string, std::vector<double>>>& buffers,
    const std::vector<std::tuple<std::string, int64_t, double>>& adapter_meta) {
  ModelState m = init(cfg, 0);
  for (const auto& [target, rank, alpha] : adapter_meta) {
    LoRAAdapter a;
    a.target = target;
    a.rank = rank;
    a.alpha = alpha;
    auto [d_in, d_out] = target_dims(cfg, target);
    a.A = Tensor::zeros({rank, d_in}, true, target + ".lora.A");
    a.B = Tensor::zeros({d_out, rank}, true, target + ".lora.B");
    m.adapters_.push_back(std::move(a));
  }
  std::map<std::string, std::vector<double>> by_name(buffers.begin(), buffers.end());
  ensure(by_name.size() == buffers.size(), "duplicate parameter name in buffers");
  for (auto& np : m.named_parameters()) {
    auto it = by_name.find(np.name);
    ensure(it != by_name.end(), "missing parameter buffer: " + np.name);
    ensure(static_cast<int64_t>(it->second.size()) == np.tensor.numel(),
           "parameter size mismatch for " + np.name);
    ndgrad::check_finite(it->second, np.name);
    np.tensor.value_mut() = it->second;
    by_name.erase(it);
  }
  if (!by_name.empty()) fail("unknown parameter buffer: " + by_name.begin()->first);
  return m;
}

ModelState ModelState::clone(const ModelState& m) {
  std::vector<std::pair<std::string, std::vector<double>>> bufs;
  for (const auto& np : m.named_parameters()) bufs.emplace_back(np.name, np.tensor.value());
  std::vector<std::tuple<std::string, int64_t, double>> meta;
  for (const auto& a : m.adapters()) meta.emplace_back(a.target, a.rank, a.alpha);
  return from_buffers(m.config(), bufs, meta);
}

namespace {

// W + (alpha/rank) * (B A)^T when an adapter targets this matrix
Tensor effective_weight(Tape& tape, const ModelState& m, const std::string& target,
                        const Tensor& w) {
  for (const auto& a : m.adapters()) {
    if (a.target != target) continue;
    Tensor delta = tape.matmul(tape.transpose(a.A), tape.transpose(a.B));
    return tape.add(w, tape.scale(delta, a.alpha / static_cast<double>(a.rank)));
  }
  return w;
}

}  // namespace

Tensor forward_batch(Tape& tape, const ModelState& m, const std::vector<int>& tokens, int64_t nb,
                     int64_t T, BlockTrace* trace) {
  const TransformerConfig& cfg = m.config();
  ensure(nb > 0 && T > 0, "forward: empty batch");
  ensure(static_cast<int64_t>(tokens.size()) == nb * T, "forward: token buffer shape mismatch");
  ensure(T <= cfg.context_len, "forward: sequence length " + std::to_string(T) +
                                   " exceeds context_len " + std::to_string(cfg.context_len));
  ensure(trace == nullptr || nb == 1, "forward: trace capture needs a single sequence");

  std::vector<int> pos_ids(tokens.size());
  for (int64_t b = 0; b < nb; ++b)
    for (int64_t t = 0; t < T; ++t) pos_ids[static_cast<size_t>(b * T + t)] = static_cast<int>(t);

  Tensor h = tape.add(tape.embedding_lookup(m.embedding(), tokens),
                      tape.embedding_lookup(m.positional(), pos_ids));
  if (trace) {
    trace->seq_len = T;
    trace->d_model = cfg.d_model;
    trace->states.clear();
    trace->states.push_back(h.value());
  }

  int64_t H = cfg.n_heads, hd = cfg.head_dim();
  for (size_t i = 0; i < m.blocks().size(); ++i) {
    const Block& blk = m.blocks()[i];
    std::string p = "block" + std::to_string(i) + ".";

    Tensor x1 = tape.layer_norm(h, blk.ln1_g, blk.ln1_b);
    auto heads = [&](const Tensor& x) {
      return tape.permute0213(tape.reshape(x, {nb, T, H, hd}));
    };
    Tensor q = heads(tape.matmul(x1, effective_weight(tape, m, p + "wq", blk.wq)));
    Tensor k = heads(tape.matmul(x1, effective_weight(tape, m, p + "wk", blk.wk)));
    Tensor v = heads(tape.matmul(x1, effective_weight(tape, m, p + "wv", blk.wv)));
    Tensor att = tape.reshape(tape.permute0213(tape.causal_attention(q, k, v)),
                              {nb * T, cfg.d_model});
    h = tape.add(h, tape.matmul(att, effective_weight(tape, m, p + "wo", blk.wo)));

    Tensor x2 = tape.layer_norm(h, blk.ln2_g, blk.ln2_b);
    Tensor f = tape.gelu(
        tape.add_bias(tape.matmul(x2, effective_weight(tape, m, p + "w1", blk.w1)), blk.b1));
    h = tape.add(h, tape.add_bias(tape.matmul(f, effective_weight(tape, m, p + "w2", blk.w2)),
                                  blk.b2));
    if (trace) trace->states.push_back(h.value());
  }

  if (cfg.n_layers > 0) h = tape.layer_norm(h, m.final_ln_g(), m.final_ln_b());
  return tape.matmul(h, tape.transpose(m.embedding()));
}

std::pair<Tensor, std::optional<BlockTrace>> forward(Tape& tape, const ModelState& m,
                                                     const std::vector<int>& tokens,
                                                     bool capture) {
  ensure(!tokens.empty(), "forward: empty sequence");
  std::optional<BlockTrace> trace;
  if (capture) trace.emplace();
  Tensor logits = forward_batch(tape, m, tokens, 1, static_cast<int64_t>(tokens.size()),
                                capture ? &*trace : nullptr);
  return {logits, std::move(trace)};
}

BlockSel parse_block_sel(const std::string& name) {
  if (name == "first") return BlockSel::First;
  if (name == "middle") return BlockSel::Middle;
  if (name == "last") return BlockSel::Last;
  fail("unknown block selector: " + name + " (expected first|middle|last)");
}

std::string block_sel_name(BlockSel sel) {
  switch (sel) {
    case BlockSel::First: return "first";
    case BlockSel::Middle: return "middle";
    case BlockSel::Last: return "last";
  }
  fail("bad block selector");
}

std::vector<double> token_representation(const BlockTrace& trace, BlockSel sel,
                                         int64_t position) {
  int64_t nblocks = static_cast<int64_t>(trace.states.size()) - 1;
  ensure(nblocks >= 1, "trace has no block entries");
  ensure(position >= 0 && position < trace.seq_len, "position out of range");
  int64_t idx = 0;
  switch (sel) {
    case BlockSel::First: idx = 1; break;
    case BlockSel::Middle: idx = std::max<int64_t>(1, nblocks / 2); break;
    case BlockSel::Last: idx = nblocks; break;
  }
  const auto& state = trace.states[static_cast<size_t>(idx)];
  size_t off = static_cast<size_t>(position * trace.d_model);
  return std::vector<double>(state.begin() + static_cast<std::ptrdiff_t>(off),
                             state.begin() + static_cast<std::ptrdiff_t>(off) +
                                 static_cast<std::ptrdiff_t>(trace.d_model));
}

SpanMode parse_span_mode(const std::string& name) {
  if (name == "instruction+response") return SpanMode::InstructionAndResponse;
  if (name == "response-only") return SpanMode::ResponseOnly;
  fail("unknown span mode: " + name + " (expected instruction+response|response-only)");
}

EncodedSample encode_sample(const vocab::Vocabulary& v, const data::Sample& s) {
  ensure(!s.instruction.empty() && !s.response.empty(),
         "sample " + s.id + " has an empty instruction or response");
  EncodedSample e;
  e.id = s.id;
  e.tokens.push_back(v.special_id("<bos>"));
  for (int id : v.encode(s.instruction)) e.tokens.push_back(id);
  e.resp_index = static_cast<int64_t>(e.tokens.size());
  e.tokens.push_back(v.special_id("<resp>"));
  for (int id : v.encode(s.response)) e.tokens.push_back(id);
  e.tokens.push_back(v.special_id("<eos>"));
  return e;
}

AssembledBatch assemble_batch(const vocab::Vocabulary& v, const std::vector<data::Sample>& batch,
                              SpanMode mode, int64_t context_len) {
  ensure(!batch.empty(), "assemble_batch: empty batch");
  std::vector<EncodedSample> enc;
  int64_t T = 0;
  for (const auto& s : batch) {
    enc.push_back(encode_sample(v, s));
    int64_t len = static_cast<int64_t>(enc.back().tokens.size());
    ensure(len <= context_len, "sample " + s.id + " needs " + std::to_string(len) +
                                   " tokens but context_len is " + std::to_string(context_len));
    T = std::max(T, len);
  }
  AssembledBatch out;
  out.nb = static_cast<int64_t>(batch.size());
  out.T = T;
  const int pad = v.special_id("<pad>");
  out.tokens.assign(static_cast<size_t>(out.nb * T), pad);
  out.targets.assign(static_cast<size_t>(out.nb * T), 0);
  out.mask.assign(static_cast<size_t>(out.nb * T), 0);
  for (int64_t b = 0; b < out.nb; ++b) {
    const auto& e = enc[static_cast<size_t>(b)];
    int64_t len = static_cast<int64_t>(e.tokens.size());
    for (int64_t t = 0; t < len; ++t)
      out.tokens[static_cast<size_t>(b * T + t)] = e.tokens[static_cast<size_t>(t)];
    for (int64_t t = 0; t + 1 < len; ++t) {
      bool in_span = mode == SpanMode::InstructionAndResponse || t + 1 > e.resp_index;
      if (!in_span) continue;
      out.targets[static_cast<size_t>(b * T + t)] = e.tokens[static_cast<size_t>(t + 1)];
      out.mask[static_cast<size_t>(b * T + t)] = 1;
    }
  }
  return out;
}

Tensor loss_on_batch(Tape& tape, const ModelState& m, const vocab::Vocabulary& v,
                     const std::vector<data::Sample>& batch, SpanMode mode) {
  AssembledBatch ab = assemble_batch(v, batch, mode, m.config().context_len);
  Tensor logits = forward_batch(tape, m, ab.tokens, ab.nb, ab.T);
  return tape.cross_entropy(logits, ab.targets, ab.mask);
}

std::vector<int> generate(const ModelState& m, const vocab::Vocabulary& v,
                          const std::vector<int>& prompt, const GenOptions& opts) {
  ensure(!prompt.empty(), "generate: empty prompt");
  ensure(static_cast<int64_t>(prompt.size()) < m.config().context_len,
         "generate: prompt fills the whole context");
  const int eos = v.special_id("<eos>");
  const int64_t V = m.config().vocab_size;
  Rng rng(opts.seed);
  std::vector<int> out = prompt;
  for (int64_t step = 0; step < opts.max_new; ++step) {
    if (static_cast<int64_t>(out.size()) >= m.config().context_len) break;
    Tape tape;
    Tensor logits = forward_batch(tape, m, out, 1, static_cast<int64_t>(out.size()));
    const double* row = logits.value().data() + (out.size() - 1) * static_cast<size_t>(V);
    int next;
    if (opts.temperature <= 0.0) {
      next = static_cast<int>(std::max_element(row, row + V) - row);
    } else {
      double mx = *std::max_element(row, row + V);
      std::vector<double> w(static_cast<size_t>(V));
      for (int64_t i = 0; i < V; ++i)
        w[static_cast<size_t>(i)] = std::exp((row[i] - mx) / opts.temperature);
      next = static_cast<int>(rng.pick_index(w));
    }
    out.push_back(next);
    if (next == eos) break;
  }
  return out;
}

}  // namespace delia::model
