#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "delia/ndgrad.hpp"
#include "delia/rng.hpp"
#include "delia/sample.hpp"
#include "delia/vocab.hpp"

namespace delia::model {

using ndgrad::Tape;
using ndgrad::Tensor;

struct TransformerConfig {
  int64_t n_layers = 4;
  int64_t d_model = 128;
  int64_t n_heads = 4;
  int64_t d_ff = 512;
  int64_t context_len = 256;
  int64_t vocab_size = 0;

  int64_t head_dim() const { return d_model / n_heads; }
  void validate() const;
  std::string to_json() const;
  static TransformerConfig from_json(const std::string& text);
};

// Low-rank adapter on one base matrix: effective weight = W + (alpha/rank) * B A.
// B starts at zero so an adapted model is bit-identical to its base until trained.
struct LoRAAdapter {
  std::string target;  // named base matrix, e.g. "block0.wq"
  Tensor A;            // [rank, d_in]
  Tensor B;            // [d_out, rank]
  int64_t rank = 8;
  double alpha = 16.0;
};

struct Block {
  Tensor ln1_g, ln1_b;
  Tensor wq, wk, wv, wo;
  Tensor ln2_g, ln2_b;
  Tensor w1, b1, w2, b2;
};

struct NamedParam {
  std::string name;
  Tensor tensor;
};

// Hidden states captured during one single-sequence forward pass: the embedding
// layer output followed by the residual stream after each block.
struct BlockTrace {
  int64_t seq_len = 0;
  int64_t d_model = 0;
  std::vector<std::vector<double>> states;
};

enum class BlockSel { First, Middle, Last };

BlockSel parse_block_sel(const std::string& name);
std::string block_sel_name(BlockSel sel);
std::vector<double> token_representation(const BlockTrace& trace, BlockSel sel, int64_t position);

class ModelState {
 public:
  static ModelState init(const TransformerConfig& cfg, uint64_t seed);

  const TransformerConfig& config() const { return cfg_; }
  Tensor embedding() const { return embedding_; }  // [V, d]; doubles as the output head
  Tensor positional() const { return pos_; }
  const std::vector<Block>& blocks() const { return blocks_; }
  Tensor final_ln_g() const { return final_ln_g_; }
  Tensor final_ln_b() const { return final_ln_b_; }

  void enable_adapters(int64_t rank, double alpha, uint64_t seed);
  bool has_adapters() const { return !adapters_.empty(); }
  const std::vector<LoRAAdapter>& adapters() const { return adapters_; }

  // base parameters in a fixed order, then adapter parameters if enabled
  std::vector<NamedParam> named_parameters() const;
  std::vector<NamedParam> adapter_parameters() const;

  // grows vocab and embedding together so they can never drift apart;
  // returns the new token id
  int add_special_row(vocab::Vocabulary& v, const std::string& name,
                      const vocab::InitStrategy& strategy);

  // rebuilds a state from named buffers (checkpoint load); adapter_meta is
  // (target, rank, alpha) per adapter in order
  static ModelState from_buffers(
      const TransformerConfig& cfg,
      const std::vector<std::pair<std::string, std::vector<double>>>& buffers,
      const std::vector<std::tuple<std::string, int64_t, double>>& adapter_meta);

  // deep copy via the buffer path so clones never alias parameter storage
  static ModelState clone(const ModelState& m);

 private:
  TransformerConfig cfg_;
  Tensor embedding_, pos_;
  std::vector<Block> blocks_;
  Tensor final_ln_g_, final_ln_b_;
  std::vector<LoRAAdapter> adapters_;
};

// logits [B*T, V] over a padded flat id buffer; trace capture needs B == 1
Tensor forward_batch(Tape& tape, const ModelState& m, const std::vector<int>& tokens, int64_t B,
                     int64_t T, BlockTrace* trace = nullptr);

std::pair<Tensor, std::optional<BlockTrace>> forward(Tape& tape, const ModelState& m,
                                                     const std::vector<int>& tokens, bool capture);

enum class SpanMode { InstructionAndResponse, ResponseOnly };

SpanMode parse_span_mode(const std::string& name);

struct EncodedSample {
  std::string id;
  std::vector<int> tokens;  // <bos> instruction <resp> response <eos>
  int64_t resp_index = 0;   // position of the <resp> marker
};

EncodedSample encode_sample(const vocab::Vocabulary& v, const data::Sample& s);

// padded flat id buffers for one forward pass; mask marks loss-bearing targets
struct AssembledBatch {
  std::vector<int> tokens;
  std::vector<int> targets;
  std::vector<uint8_t> mask;
  int64_t nb = 0;
  int64_t T = 0;
};

AssembledBatch assemble_batch(const vocab::Vocabulary& v, const std::vector<data::Sample>& batch,
                              SpanMode mode, int64_t context_len);

Tensor loss_on_batch(Tape& tape, const ModelState& m, const vocab::Vocabulary& v,
                     const std::vector<data::Sample>& batch,
                     SpanMode mode = SpanMode::InstructionAndResponse);

struct GenOptions {
  int64_t max_new = 48;
  double temperature = 0.0;  // 0 = greedy
  uint64_t seed = 0;
};

// appends sampled ids until <eos>, max_new, or the context limit
std::vector<int> generate(const ModelState& m, const vocab::Vocabulary& v,
                          const std::vector<int>& prompt, const GenOptions& opts);

}  // namespace delia::model
