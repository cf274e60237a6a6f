#include "delia/ndgrad.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <unordered_set>

#include "delia/util.hpp"

#ifdef DELIA_USE_CBLAS
#include <cblas.h>
#endif

namespace delia::ndgrad {

namespace {

// row-major GEMM: C = alpha * op(A) @ op(B) + beta * C
void gemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k, double alpha,
          const double* a, int64_t lda, const double* b, int64_t ldb, double beta, double* c,
          int64_t ldc) {
#ifdef DELIA_USE_CBLAS
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, static_cast<int>(m), static_cast<int>(n),
              static_cast<int>(k), alpha, a, static_cast<int>(lda), b, static_cast<int>(ldb),
              beta, c, static_cast<int>(ldc));
#else
  if (beta != 1.0) {
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j) c[i * ldc + j] *= beta;
  }
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t p = 0; p < k; ++p) {
      double av = trans_a ? a[p * lda + i] : a[i * lda + p];
      if (av == 0.0) continue;
      av *= alpha;
      const double* brow = trans_b ? nullptr : &b[p * ldb];
      double* crow = &c[i * ldc];
      if (trans_b) {
        for (int64_t j = 0; j < n; ++j) crow[j] += av * b[j * ldb + p];
      } else {
        for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  }
#endif
}

double phi_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi); }
double phi_cdf(double x) { return 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2)); }

}  // namespace

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) {
    ensure(d > 0, "shape dims must be positive");
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

void check_finite(const std::vector<double>& v, const std::string& what) {
  for (size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i]))
      fail("non-finite value in " + what + " at flat index " + std::to_string(i));
  }
}

Tensor Tensor::leaf(Shape shape, std::vector<double> value, bool requires_grad, std::string tag) {
  ensure(shape_numel(shape) == static_cast<int64_t>(value.size()),
         "leaf '" + tag + "': shape " + shape_str(shape) + " does not match value size " +
             std::to_string(value.size()));
  check_finite(value, "leaf '" + tag + "'");
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  n->needs_grad = requires_grad;
  n->tag = std::move(tag);
  return Tensor(n);
}

Tensor Tensor::zeros(Shape shape, bool requires_grad, std::string tag) {
  auto n = shape_numel(shape);
  return leaf(std::move(shape), std::vector<double>(static_cast<size_t>(n), 0.0), requires_grad,
              std::move(tag));
}

Tensor Tensor::scalar(double v) { return leaf({1}, {v}, false, "scalar"); }

const std::vector<double>& Tensor::grad() const {
  ensure(node_ != nullptr, "grad() on undefined tensor");
  ensure(node_->grad.size() == node_->value.size(),
         "grad() before backward on '" + node_->tag + "'");
  return node_->grad;
}

double Tensor::item() const {
  ensure(node_ && node_->numel() == 1, "item() needs a single-element tensor");
  return node_->value[0];
}

Tensor Tape::record(Shape shape, std::vector<double> value, std::vector<Tensor> parents,
                    std::string tag, std::function<void(Node&)> backprop) {
  check_finite(value, "op '" + tag + "'");
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->tag = std::move(tag);
  bool needs = false;
  for (auto& p : parents) {
    ensure(p.defined(), "op '" + n->tag + "': undefined input");
    n->parents.push_back(p.node());
    needs = needs || p.node()->needs_grad;
    if (!p.node()->backprop && p.node()->parents.empty()) note_leaf(p);
  }
  n->needs_grad = needs;
  if (needs) n->backprop = std::move(backprop);
  nodes_.push_back(n);
  return Tensor(n);
}

void Tape::note_leaf(const Tensor& t) {
  for (auto& l : leaves_)
    if (l.get() == t.node().get()) return;
  leaves_.push_back(t.node());
}

void Tape::backward(const Tensor& loss) {
  ensure(!used_, "Tape::backward called twice");
  used_ = true;
  ensure(loss.defined() && loss.numel() == 1, "backward needs a scalar loss");
  for (auto& n : nodes_)
    if (n->needs_grad) n->ensure_grad(), std::fill(n->grad.begin(), n->grad.end(), 0.0);
  for (auto& n : leaves_)
    if (n->needs_grad) n->ensure_grad(), std::fill(n->grad.begin(), n->grad.end(), 0.0);
  auto ln = loss.node();
  ensure(ln->needs_grad, "loss does not depend on any parameter");
  ln->grad.assign(1, 1.0);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node& n = **it;
    if (n.needs_grad && n.backprop && !n.grad.empty()) n.backprop(n);
  }
}

Tensor Tape::matmul(const Tensor& a, const Tensor& b) {
  ensure(a.shape().size() == 2 && b.shape().size() == 2,
         "matmul: need 2-d inputs, got " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  int64_t m = a.shape()[0], k = a.shape()[1], k2 = b.shape()[0], n = b.shape()[1];
  ensure(k == k2, "matmul: inner dims differ, " + shape_str(a.shape()) + " x " +
                      shape_str(b.shape()));
  std::vector<double> out(static_cast<size_t>(m * n), 0.0);
  gemm(false, false, m, n, k, 1.0, a.value().data(), k, b.value().data(), n, 0.0, out.data(), n);
  auto an = a.node(), bn = b.node();
  return record({m, n}, std::move(out), {a, b}, "matmul", [an, bn, m, n, k](Node& self) {
    if (an->needs_grad) {
      an->ensure_grad();
      gemm(false, true, m, k, n, 1.0, self.grad.data(), n, bn->value.data(), n, 1.0,
           an->grad.data(), k);
    }
    if (bn->needs_grad) {
      bn->ensure_grad();
      gemm(true, false, k, n, m, 1.0, an->value.data(), k, self.grad.data(), n, 1.0,
           bn->grad.data(), n);
    }
  });
}

Tensor Tape::bmm(const Tensor& a, const Tensor& b) {
  ensure(a.shape().size() == 3 && b.shape().size() == 3, "bmm: need 3-d inputs");
  int64_t bs = a.shape()[0], m = a.shape()[1], k = a.shape()[2], n = b.shape()[2];
  ensure(b.shape()[0] == bs && b.shape()[1] == k,
         "bmm: shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<double> out(static_cast<size_t>(bs * m * n), 0.0);
  for (int64_t i = 0; i < bs; ++i)
    gemm(false, false, m, n, k, 1.0, a.value().data() + i * m * k, k,
         b.value().data() + i * k * n, n, 0.0, out.data() + i * m * n, n);
  auto an = a.node(), bn = b.node();
  return record({bs, m, n}, std::move(out), {a, b}, "bmm", [an, bn, bs, m, n, k](Node& self) {
    for (int64_t i = 0; i < bs; ++i) {
      if (an->needs_grad) {
        an->ensure_grad();
        gemm(false, true, m, k, n, 1.0, self.grad.data() + i * m * n, n,
             bn->value.data() + i * k * n, n, 1.0, an->grad.data() + i * m * k, k);
      }
      if (bn->needs_grad) {
        bn->ensure_grad();
        gemm(true, false, k, n, m, 1.0, an->value.data() + i * m * k, k,
             self.grad.data() + i * m * n, n, 1.0, bn->grad.data() + i * k * n, n);
      }
    }
  });
}

Tensor Tape::add(const Tensor& a, const Tensor& b) {
  ensure(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) + " vs " +
                                     shape_str(b.shape()));
  std::vector<double> out(a.value());
  const auto& bv = b.value();
  for (size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  auto an = a.node(), bn = b.node();
  return record(a.shape(), std::move(out), {a, b}, "add", [an, bn](Node& self) {
    for (auto* p : {an.get(), bn.get()}) {
      if (!p->needs_grad) continue;
      p->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
    }
  });
}

Tensor Tape::add_bias(const Tensor& x, const Tensor& b) {
  ensure(b.shape().size() == 1, "add_bias: bias must be 1-d");
  int64_t n = b.shape()[0];
  ensure(!x.shape().empty() && x.shape().back() == n && x.numel() % n == 0,
         "add_bias: last dim of " + shape_str(x.shape()) + " must be " + std::to_string(n));
  int64_t rows = x.numel() / n;
  std::vector<double> out(x.value());
  const auto& bv = b.value();
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t j = 0; j < n; ++j) out[static_cast<size_t>(r * n + j)] += bv[static_cast<size_t>(j)];
  auto xn = x.node(), bn = b.node();
  return record(x.shape(), std::move(out), {x, b}, "add_bias", [xn, bn, rows, n](Node& self) {
    if (xn->needs_grad) {
      xn->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
    }
    if (bn->needs_grad) {
      bn->ensure_grad();
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < n; ++j)
          bn->grad[static_cast<size_t>(j)] += self.grad[static_cast<size_t>(r * n + j)];
    }
  });
}

Tensor Tape::mul(const Tensor& a, const Tensor& b) {
  ensure(a.shape() == b.shape(), "mul: shape mismatch");
  std::vector<double> out(a.value());
  const auto& bv = b.value();
  for (size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  auto an = a.node(), bn = b.node();
  return record(a.shape(), std::move(out), {a, b}, "mul", [an, bn](Node& self) {
    if (an->needs_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * bn->value[i];
    }
    if (bn->needs_grad) {
      bn->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i] * an->value[i];
    }
  });
}

Tensor Tape::scale(const Tensor& x, double c) {
  ensure(std::isfinite(c), "scale: non-finite constant");
  std::vector<double> out(x.value());
  for (auto& v : out) v *= c;
  auto xn = x.node();
  return record(x.shape(), std::move(out), {x}, "scale", [xn, c](Node& self) {
    if (!xn->needs_grad) return;
    xn->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += c * self.grad[i];
  });
}

Tensor Tape::gelu(const Tensor& x) {
  std::vector<double> out(x.value());
  for (auto& v : out) v = v * phi_cdf(v);
  auto xn = x.node();
  return record(x.shape(), std::move(out), {x}, "gelu", [xn](Node& self) {
    if (!xn->needs_grad) return;
    xn->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) {
      double v = xn->value[i];
      xn->grad[i] += self.grad[i] * (phi_cdf(v) + v * phi_pdf(v));
    }
  });
}

Tensor Tape::log(const Tensor& x) {
  std::vector<double> out(x.value());
  for (size_t i = 0; i < out.size(); ++i) {
    ensure(out[i] > 0.0, "log: non-positive input at flat index " + std::to_string(i));
    out[i] = std::log(out[i]);
  }
  auto xn = x.node();
  return record(x.shape(), std::move(out), {x}, "log", [xn](Node& self) {
    if (!xn->needs_grad) return;
    xn->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i] / xn->value[i];
  });
}

Tensor Tape::dot(const Tensor& a, const Tensor& b) {
  ensure(a.shape() == b.shape(), "dot: shape mismatch");
  double s = 0.0;
  for (size_t i = 0; i < a.value().size(); ++i) s += a.value()[i] * b.value()[i];
  auto an = a.node(), bn = b.node();
  return record({1}, {s}, {a, b}, "dot", [an, bn](Node& self) {
    double g = self.grad[0];
    if (an->needs_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += g * bn->value[i];
    }
    if (bn->needs_grad) {
      bn->ensure_grad();
      for (size_t i = 0; i < bn->grad.size(); ++i) bn->grad[i] += g * an->value[i];
    }
  });
}

Tensor Tape::sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.value()) s += v;
  auto xn = x.node();
  return record({1}, {s}, {x}, "sum", [xn](Node& self) {
    if (!xn->needs_grad) return;
    xn->ensure_grad();
    for (auto& g : xn->grad) g += self.grad[0];
  });
}

Tensor Tape::softmax(const Tensor& x, int axis) {
  int rank = static_cast<int>(x.shape().size());
  if (axis < 0) axis += rank;
  ensure(axis >= 0 && axis < rank, "softmax: axis out of range");
  int64_t n = x.shape()[static_cast<size_t>(axis)];
  int64_t inner = 1, outer = 1;
  for (int i = axis + 1; i < rank; ++i) inner *= x.shape()[static_cast<size_t>(i)];
  for (int i = 0; i < axis; ++i) outer *= x.shape()[static_cast<size_t>(i)];
  std::vector<double> out(x.value().size());
  const auto& xv = x.value();
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      int64_t base = o * n * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (int64_t j = 0; j < n; ++j) mx = std::max(mx, xv[static_cast<size_t>(base + j * inner)]);
      double z = 0.0;
      for (int64_t j = 0; j < n; ++j) {
        double e = std::exp(xv[static_cast<size_t>(base + j * inner)] - mx);
        out[static_cast<size_t>(base + j * inner)] = e;
        z += e;
      }
      for (int64_t j = 0; j < n; ++j) out[static_cast<size_t>(base + j * inner)] /= z;
    }
  }
  auto xn = x.node();
  return record(x.shape(), std::move(out), {x}, "softmax", [xn, outer, inner, n](Node& self) {
    if (!xn->needs_grad) return;
    xn->ensure_grad();
    for (int64_t o = 0; o < outer; ++o) {
      for (int64_t in = 0; in < inner; ++in) {
        int64_t base = o * n * inner + in;
        double dotv = 0.0;
        for (int64_t j = 0; j < n; ++j) {
          size_t idx = static_cast<size_t>(base + j * inner);
          dotv += self.grad[idx] * self.value[idx];
        }
        for (int64_t j = 0; j < n; ++j) {
          size_t idx = static_cast<size_t>(base + j * inner);
          xn->grad[idx] += self.value[idx] * (self.grad[idx] - dotv);
        }
      }
    }
  });
}

Tensor Tape::layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  ensure(!x.shape().empty(), "layer_norm: scalar input");
  int64_t d = x.shape().back();
  ensure(gamma.shape() == Shape{d} && beta.shape() == Shape{d},
         "layer_norm: gamma/beta must be [" + std::to_string(d) + "]");
  int64_t rows = x.numel() / d;
  std::vector<double> out(x.value().size());
  auto xhat = std::make_shared<std::vector<double>>(x.value().size());
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
  const auto& xv = x.value();
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = &xv[static_cast<size_t>(r * d)];
    double mu = 0.0;
    for (int64_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (int64_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(d);
    double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[static_cast<size_t>(r)] = is;
    for (int64_t j = 0; j < d; ++j) {
      double xh = (xr[j] - mu) * is;
      (*xhat)[static_cast<size_t>(r * d + j)] = xh;
      out[static_cast<size_t>(r * d + j)] = gv[static_cast<size_t>(j)] * xh + bv[static_cast<size_t>(j)];
    }
  }
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  return record(x.shape(), std::move(out), {x, gamma, beta}, "layer_norm",
                [xn, gn, bn, xhat, inv_std, rows, d](Node& self) {
    for (int64_t r = 0; r < rows; ++r) {
      const double* dy = &self.grad[static_cast<size_t>(r * d)];
      const double* xh = &(*xhat)[static_cast<size_t>(r * d)];
      if (gn->needs_grad) {
        gn->ensure_grad();
        for (int64_t j = 0; j < d; ++j) gn->grad[static_cast<size_t>(j)] += dy[j] * xh[j];
      }
      if (bn->needs_grad) {
        bn->ensure_grad();
        for (int64_t j = 0; j < d; ++j) bn->grad[static_cast<size_t>(j)] += dy[j];
      }
      if (xn->needs_grad) {
        xn->ensure_grad();
        double is = (*inv_std)[static_cast<size_t>(r)];
        double m1 = 0.0, m2 = 0.0;
        for (int64_t j = 0; j < d; ++j) {
          double gdy = gn->value[static_cast<size_t>(j)] * dy[j];
          m1 += gdy;
          m2 += gdy * xh[j];
        }
        m1 /= static_cast<double>(d);
        m2 /= static_cast<double>(d);
        for (int64_t j = 0; j < d; ++j) {
          double gdy = gn->value[static_cast<size_t>(j)] * dy[j];
          xn->grad[static_cast<size_t>(r * d + j)] += is * (gdy - m1 - xh[j] * m2);
        }
      }
    }
  });
}

Tensor Tape::embedding_lookup(const Tensor& table, const std::vector<int>& ids) {
  ensure(table.shape().size() == 2, "embedding_lookup: table must be [V,d]");
  int64_t v = table.shape()[0], d = table.shape()[1];
  int64_t n = static_cast<int64_t>(ids.size());
  ensure(n > 0, "embedding_lookup: empty id list");
  std::vector<double> out(static_cast<size_t>(n * d));
  const auto& tv = table.value();
  for (int64_t i = 0; i < n; ++i) {
    int id = ids[static_cast<size_t>(i)];
    ensure(id >= 0 && id < v, "embedding_lookup: id " + std::to_string(id) +
                                  " out of range [0," + std::to_string(v) + ")");
    std::copy_n(&tv[static_cast<size_t>(id) * static_cast<size_t>(d)], d,
                &out[static_cast<size_t>(i * d)]);
  }
  auto tn = table.node();
  auto ids_copy = std::make_shared<std::vector<int>>(ids);
  return record({n, d}, std::move(out), {table}, "embedding_lookup",
                [tn, ids_copy, n, d](Node& self) {
    if (!tn->needs_grad) return;
    tn->ensure_grad();
    for (int64_t i = 0; i < n; ++i) {
      int id = (*ids_copy)[static_cast<size_t>(i)];
      double* dst = &tn->grad[static_cast<size_t>(id) * static_cast<size_t>(d)];
      const double* src = &self.grad[static_cast<size_t>(i * d)];
      for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
    }
  });
}

Tensor Tape::reshape(const Tensor& x, Shape shape) {
  ensure(shape_numel(shape) == x.numel(), "reshape: numel mismatch " + shape_str(x.shape()) +
                                              " -> " + shape_str(shape));
  std::vector<double> out(x.value());
  auto xn = x.node();
  return record(std::move(shape), std::move(out), {x}, "reshape", [xn](Node& self) {
    if (!xn->needs_grad) return;
    xn->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
  });
}

Tensor Tape::transpose(const Tensor& x) {
  ensure(x.shape().size() == 2, "transpose: need 2-d input, got " + shape_str(x.shape()));
  int64_t m = x.shape()[0], n = x.shape()[1];
  std::vector<double> out(x.value().size());
  const auto& xv = x.value();
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) out[static_cast<size_t>(j * m + i)] = xv[static_cast<size_t>(i * n + j)];
  auto xn = x.node();
  return record({n, m}, std::move(out), {x}, "transpose", [xn, m, n](Node& self) {
    if (!xn->needs_grad) return;
    xn->ensure_grad();
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j)
        xn->grad[static_cast<size_t>(i * n + j)] += self.grad[static_cast<size_t>(j * m + i)];
  });
}

Tensor Tape::permute0213(const Tensor& x) {
  ensure(x.shape().size() == 4, "permute0213: need 4-d input");
  int64_t a = x.shape()[0], b = x.shape()[1], c = x.shape()[2], d = x.shape()[3];
  std::vector<double> out(x.value().size());
  const auto& xv = x.value();
  for (int64_t i = 0; i < a; ++i)
    for (int64_t j = 0; j < b; ++j)
      for (int64_t k = 0; k < c; ++k)
        std::copy_n(&xv[static_cast<size_t>(((i * b + j) * c + k) * d)], d,
                    &out[static_cast<size_t>(((i * c + k) * b + j) * d)]);
  auto xn = x.node();
  return record({a, c, b, d}, std::move(out), {x}, "permute0213",
                [xn, a, b, c, d](Node& self) {
    if (!xn->needs_grad) return;
    xn->ensure_grad();
    for (int64_t i = 0; i < a; ++i)
      for (int64_t k = 0; k < c; ++k)
        for (int64_t j = 0; j < b; ++j) {
          const double* src = &self.grad[static_cast<size_t>(((i * c + k) * b + j) * d)];
          double* dst = &xn->grad[static_cast<size_t>(((i * b + j) * c + k) * d)];
          for (int64_t t = 0; t < d; ++t) dst[t] += src[t];
        }
  });
}

Tensor Tape::causal_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  ensure(q.shape().size() == 4 && q.shape() == k.shape() && q.shape() == v.shape(),
         "causal_attention: q/k/v must share a [B,H,T,hd] shape");
  int64_t bs = q.shape()[0], h = q.shape()[1], t = q.shape()[2], hd = q.shape()[3];
  double sc = 1.0 / std::sqrt(static_cast<double>(hd));
  int64_t slices = bs * h;
  auto probs = std::make_shared<std::vector<double>>(static_cast<size_t>(slices * t * t), 0.0);
  std::vector<double> out(q.value().size(), 0.0);
  std::vector<double> scores(static_cast<size_t>(t * t));
  for (int64_t s = 0; s < slices; ++s) {
    const double* qs = q.value().data() + s * t * hd;
    const double* ks = k.value().data() + s * t * hd;
    const double* vs = v.value().data() + s * t * hd;
    double* ps = probs->data() + s * t * t;
    gemm(false, true, t, t, hd, sc, qs, hd, ks, hd, 0.0, scores.data(), t);
    for (int64_t i = 0; i < t; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (int64_t j = 0; j <= i; ++j) mx = std::max(mx, scores[static_cast<size_t>(i * t + j)]);
      double z = 0.0;
      for (int64_t j = 0; j <= i; ++j) {
        double e = std::exp(scores[static_cast<size_t>(i * t + j)] - mx);
        ps[i * t + j] = e;
        z += e;
      }
      for (int64_t j = 0; j <= i; ++j) ps[i * t + j] /= z;
    }
    gemm(false, false, t, hd, t, 1.0, ps, t, vs, hd, 0.0, out.data() + s * t * hd, hd);
  }
  auto qn = q.node(), kn = k.node(), vn = v.node();
  return record(q.shape(), std::move(out), {q, k, v}, "causal_attention",
                [qn, kn, vn, probs, slices, t, hd, sc](Node& self) {
    std::vector<double> dp(static_cast<size_t>(t * t));
    std::vector<double> ds(static_cast<size_t>(t * t), 0.0);
    for (int64_t s = 0; s < slices; ++s) {
      const double* ps = probs->data() + s * t * t;
      const double* dos = self.grad.data() + s * t * hd;
      const double* qs = qn->value.data() + s * t * hd;
      const double* ks = kn->value.data() + s * t * hd;
      const double* vs = vn->value.data() + s * t * hd;
      if (vn->needs_grad) {
        vn->ensure_grad();
        gemm(true, false, t, hd, t, 1.0, ps, t, dos, hd, 1.0, vn->grad.data() + s * t * hd, hd);
      }
      if (!qn->needs_grad && !kn->needs_grad) continue;
      gemm(false, true, t, t, hd, 1.0, dos, hd, vs, hd, 0.0, dp.data(), t);
      for (int64_t i = 0; i < t; ++i) {
        double dotv = 0.0;
        for (int64_t j = 0; j <= i; ++j)
          dotv += dp[static_cast<size_t>(i * t + j)] * ps[i * t + j];
        for (int64_t j = 0; j < t; ++j) {
          ds[static_cast<size_t>(i * t + j)] =
              j <= i ? ps[i * t + j] * (dp[static_cast<size_t>(i * t + j)] - dotv) : 0.0;
        }
      }
      if (qn->needs_grad) {
        qn->ensure_grad();
        gemm(false, false, t, hd, t, sc, ds.data(), t, ks, hd, 1.0,
             qn->grad.data() + s * t * hd, hd);
      }
      if (kn->needs_grad) {
        kn->ensure_grad();
        gemm(true, false, t, hd, t, sc, ds.data(), t, qs, hd, 1.0,
             kn->grad.data() + s * t * hd, hd);
      }
    }
  });
}

Tensor Tape::cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                           const std::vector<uint8_t>& mask) {
  ensure(logits.shape().size() == 2, "cross_entropy: logits must be [N,V]");
  int64_t n = logits.shape()[0], v = logits.shape()[1];
  ensure(static_cast<int64_t>(targets.size()) == n && static_cast<int64_t>(mask.size()) == n,
         "cross_entropy: targets/mask must have length " + std::to_string(n));
  int64_t m = 0;
  for (uint8_t b : mask) m += (b != 0);
  ensure(m > 0, "cross_entropy: empty mask, no positions to score");
  auto probs = std::make_shared<std::vector<double>>(static_cast<size_t>(n * v), 0.0);
  const auto& lv = logits.value();
  double total = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    if (!mask[static_cast<size_t>(i)]) continue;
    int tgt = targets[static_cast<size_t>(i)];
    ensure(tgt >= 0 && tgt < v, "cross_entropy: target " + std::to_string(tgt) +
                                    " out of range at row " + std::to_string(i));
    const double* row = &lv[static_cast<size_t>(i * v)];
    double mx = row[0];
    for (int64_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (int64_t j = 0; j < v; ++j) z += std::exp(row[j] - mx);
    double* pr = probs->data() + i * v;
    for (int64_t j = 0; j < v; ++j) pr[j] = std::exp(row[j] - mx) / z;
    total += std::log(z) + mx - row[tgt];
  }
  total /= static_cast<double>(m);
  auto ln = logits.node();
  auto tg = std::make_shared<std::vector<int>>(targets);
  auto mk = std::make_shared<std::vector<uint8_t>>(mask);
  return record({1}, {total}, {logits}, "cross_entropy",
                [ln, probs, tg, mk, n, v, m](Node& self) {
    if (!ln->needs_grad) return;
    ln->ensure_grad();
    double g = self.grad[0] / static_cast<double>(m);
    for (int64_t i = 0; i < n; ++i) {
      if (!(*mk)[static_cast<size_t>(i)]) continue;
      const double* pr = probs->data() + i * v;
      double* dst = &ln->grad[static_cast<size_t>(i * v)];
      for (int64_t j = 0; j < v; ++j) dst[j] += g * pr[j];
      dst[(*tg)[static_cast<size_t>(i)]] -= g;
    }
  });
}

void adam_step(std::vector<double>& param, const std::vector<double>& grad, AdamState& state,
               const AdamHyper& hp) {
  ensure(param.size() == grad.size(), "adam_step: param/grad size mismatch");
  if (state.m.empty()) {
    state.m.assign(param.size(), 0.0);
    state.v.assign(param.size(), 0.0);
    state.t = 0;
  }
  ensure(state.m.size() == param.size(), "adam_step: state size mismatch");
  state.t += 1;
  double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(state.t));
  double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(state.t));
  for (size_t i = 0; i < param.size(); ++i) {
    state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * grad[i];
    state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * grad[i] * grad[i];
    double mhat = state.m[i] / bc1;
    double vhat = state.v[i] / bc2;
    param[i] -= hp.lr * mhat / (std::sqrt(vhat) + hp.eps);
  }
}

double clip_global_norm(const std::vector<std::vector<double>*>& grads, double max_norm) {
  double sq = 0.0;
  for (auto* g : grads)
    for (double x : *g) sq += x * x;
  double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    double s = max_norm / norm;
    for (auto* g : grads)
      for (double& x : *g) x *= s;
  }
  return norm;
}

}  // namespace delia::ndgrad
