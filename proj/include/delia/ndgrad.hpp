#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace delia::ndgrad {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// One value on the tape. Tensors are handles; values are written once at
// creation and only the grad buffer mutates afterwards (parameter buffers are
// the exception: the optimizer rewrites them between tapes, never during one).
struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  bool needs_grad = false;  // requires_grad or any parent needs it
  std::string tag;          // op name for diagnostics
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;

  int64_t numel() const { return static_cast<int64_t>(value.size()); }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  // requires_grad leaves are optimizer-owned parameters or probe inputs
  static Tensor leaf(Shape shape, std::vector<double> value, bool requires_grad = false,
                     std::string tag = "leaf");
  static Tensor zeros(Shape shape, bool requires_grad = false, std::string tag = "zeros");
  static Tensor scalar(double v);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int64_t numel() const { return node_->numel(); }
  const std::vector<double>& value() const { return node_->value; }
  std::vector<double>& value_mut() { return node_->value; }  // optimizer only
  const std::vector<double>& grad() const;
  void zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }
  bool requires_grad() const { return node_->requires_grad; }
  double item() const;

  std::shared_ptr<Node> node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Records primitive ops in execution order (which is topological order) and
// replays them backwards for reverse-mode gradients. One backward per tape.
class Tape {
 public:
  // [m,k] x [k,n] -> [m,n]
  Tensor matmul(const Tensor& a, const Tensor& b);
  // [B,m,k] x [B,k,n] -> [B,m,n]
  Tensor bmm(const Tensor& a, const Tensor& b);
  Tensor add(const Tensor& a, const Tensor& b);       // same shape
  Tensor add_bias(const Tensor& x, const Tensor& b);  // [..., n] + [n]
  Tensor mul(const Tensor& a, const Tensor& b);       // elementwise
  Tensor scale(const Tensor& x, double c);
  Tensor gelu(const Tensor& x);
  Tensor log(const Tensor& x);
  Tensor dot(const Tensor& a, const Tensor& b);  // sum(a*b) -> scalar
  Tensor sum(const Tensor& x);                   // -> scalar
  Tensor softmax(const Tensor& x, int axis);
  Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    double eps = 1e-5);
  Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids);
  Tensor reshape(const Tensor& x, Shape shape);
  Tensor transpose(const Tensor& x);    // [m,n] -> [n,m]
  Tensor permute0213(const Tensor& x);  // [a,b,c,d] -> [a,c,b,d]
  // fused causal self-attention over [B,H,T,hd] q/k/v, scores scaled by 1/sqrt(hd)
  Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v);
  // mean of -log softmax(logits)[i, targets[i]] over positions where mask[i] != 0
  Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                       const std::vector<uint8_t>& mask);

  // seeds d(loss)=1 and accumulates grads into every node that needs them;
  // grads of touched leaves are reset first, so results never depend on stale state
  void backward(const Tensor& loss);

  size_t num_ops() const { return nodes_.size(); }

 private:
  Tensor record(Shape shape, std::vector<double> value, std::vector<Tensor> parents,
                std::string tag, std::function<void(Node&)> backprop);
  void note_leaf(const Tensor& t);

  std::vector<std::shared_ptr<Node>> nodes_;
  std::vector<std::shared_ptr<Node>> leaves_;  // external nodes touched by this tape
  bool used_ = false;
};

struct AdamState {
  std::vector<double> m, v;
  int64_t t = 0;
};

struct AdamHyper {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// one bias-corrected Adam update, in place; state is sized on first use
void adam_step(std::vector<double>& param, const std::vector<double>& grad, AdamState& state,
               const AdamHyper& hp);

// global-norm gradient clipping across a set of grad buffers; returns the pre-clip norm
double clip_global_norm(const std::vector<std::vector<double>*>& grads, double max_norm);

void check_finite(const std::vector<double>& v, const std::string& what);

}  // namespace delia::ndgrad
