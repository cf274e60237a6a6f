#include "delia/theory.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "delia/rng.hpp"
#include "delia/util.hpp"

namespace delia::theory {

namespace {

void check_prob_vector(const std::vector<double>& p, const std::string& name) {
  ensure(p.size() >= 2, name + " needs at least two outcomes");
  double sum = 0.0;
  for (double x : p) {
    ensure(x >= 0.0, name + " has a negative entry");
    sum += x;
  }
  ensure(std::abs(sum - 1.0) <= 1e-12, name + " sums to " + fmt_double(sum) + ", not 1");
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm2(const std::vector<double>& v) { return std::sqrt(dot(v, v)); }

// every outcome keeps mass >= 0.6/n; callers fit residuals against these masses
std::vector<double> simplex_draw(Rng& rng, size_t n) {
  std::vector<double> p(n);
  double sum = 0.0;
  for (auto& x : p) {
    x = -std::log(1.0 - rng.uniform());
    sum += x;
  }
  for (auto& x : p) x = 0.4 * (x / sum) + 0.6 / static_cast<double>(n);
  return p;
}

// average ranks, ties share the mean of their positions
std::vector<double> ranks_of(const std::vector<double>& v) {
  std::vector<size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  size_t i = 0;
  while (i < idx.size()) {
    size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

}  // namespace

void CategoricalWorld::validate() const {
  ensure(p_d.size() == p_g.size() && p_d_prime.size() == p_g.size(),
         "world distributions disagree on the outcome count");
  ensure(p_g.size() <= 10000, "outcome space capped at 10^4 for exact enumeration");
  check_prob_vector(p_d, "p_d");
  check_prob_vector(p_d_prime, "p_d_prime");
  check_prob_vector(p_g, "p_g");
  for (size_t i = 0; i < p_g.size(); ++i)
    ensure(!(p_g[i] > 0.0 && p_d_prime[i] <= 0.0),
           "p_d_prime has no mass on outcome " + std::to_string(i) +
               " although p_g does; the expansion divides by it");
}

std::vector<double> SoftmaxModel::q() const {
  ensure(theta.size() >= 2, "model needs at least two logits");
  double mx = *std::max_element(theta.begin(), theta.end());
  std::vector<double> out(theta.size());
  double z = 0.0;
  for (size_t i = 0; i < theta.size(); ++i) {
    out[i] = std::exp(theta[i] - mx);
    z += out[i];
  }
  for (auto& x : out) x /= z;
  return out;
}

std::vector<double> SoftmaxModel::epsilon(const std::vector<double>& p_d_prime) const {
  auto qv = q();
  ensure(qv.size() == p_d_prime.size(), "model and distribution sizes differ");
  std::vector<double> out(qv.size());
  for (size_t i = 0; i < qv.size(); ++i) out[i] = qv[i] - p_d_prime[i];
  return out;
}

double kl(const std::vector<double>& p, const std::vector<double>& q) {
  ensure(p.size() == q.size(), "kl: size mismatch");
  double out = 0.0;
  for (size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    ensure(q[i] > 0.0,
           "kl: q has no mass on outcome " + std::to_string(i) + " where p does");
    out += p[i] * std::log(p[i] / q[i]);
  }
  // mathematically nonnegative; absorb sub-1e-12 float dust from p ~ q
  return out < 0.0 && out > -1e-12 ? 0.0 : out;
}

double entropy(const std::vector<double>& p) {
  double h = 0.0;
  for (double x : p)
    if (x > 0.0) h -= x * std::log(x);
  return h;
}

std::vector<double> exact_gradient(const SoftmaxModel& model, const std::vector<double>& under) {
  check_prob_vector(under, "under");
  auto qv = model.q();
  ensure(qv.size() == under.size(), "model and distribution sizes differ");
  // E_x[q - e_x] over the whole space contracts to q - under since under sums to 1
  std::vector<double> out(qv.size());
  for (size_t i = 0; i < qv.size(); ++i) out[i] = qv[i] - under[i];
  return out;
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  ensure(a.size() == b.size() && a.size() >= 2, "rank correlation needs two equal-length columns");
  auto ra = ranks_of(a);
  auto rb = ranks_of(b);
  double ma = 0.0, mb = 0.0;
  for (size_t i = 0; i < ra.size(); ++i) {
    ma += ra[i];
    mb += rb[i];
  }
  ma /= static_cast<double>(ra.size());
  mb /= static_cast<double>(rb.size());
  double num = 0.0, va = 0.0, vb = 0.0;
  for (size_t i = 0; i < ra.size(); ++i) {
    num += (ra[i] - ma) * (rb[i] - mb);
    va += (ra[i] - ma) * (ra[i] - ma);
    vb += (rb[i] - mb) * (rb[i] - mb);
  }
  ensure(va > 0.0 && vb > 0.0, "rank correlation undefined for a constant column");
  return num / std::sqrt(va * vb);
}

TaylorReport taylor_decomposition_check(const CategoricalWorld& world, const SoftmaxModel& model) {
  world.validate();
  auto qv = model.q();
  const size_t n = world.size();
  ensure(qv.size() == n, "model and world sizes differ");
  const auto& d = world.p_d_prime;
  const auto& pg = world.p_g;
  std::vector<double> eps = model.epsilon(d);

  TaylorReport rep;
  for (double e : eps) rep.eps_inf = std::max(rep.eps_inf, std::abs(e));
  double dmin = std::numeric_limits<double>::infinity();
  for (size_t i = 0; i < n; ++i)
    if (pg[i] > 0.0) dmin = std::min(dmin, d[i]);
  rep.first_order_ok = rep.eps_inf <= 0.25 * dmin;
  if (!rep.first_order_ok)
    rep.diagnostic = "residual sup norm " + fmt_double(rep.eps_inf) +
                     " is not small against the minimum training mass " + fmt_double(dmin) +
                     " on the diverse support; dropped second-order terms may dominate";

  // q_t = d + t*eps stays an exact distribution because eps sums to zero, so
  // scaling t is an exact scaling of the residual
  auto eval = [&](double t, std::vector<double>& lhs, std::vector<double>& rhs) {
    std::vector<double> qt(n), c(n);
    for (size_t i = 0; i < n; ++i) qt[i] = d[i] + t * eps[i];
    // lhs: exact gradient of E_pg[-log q_t] under the softmax parameterization
    lhs.resize(n);
    for (size_t j = 0; j < n; ++j) lhs[j] = qt[j] - pg[j];
    // rhs: grad of [KL(p_g||q_t - t*eps) + H(p_g)] minus grad of
    // E_pg[t*eps/(q_t - t*eps)], with the residual frozen at its current value.
    // Both routes enter through dq(x)/dtheta_j = q(x)(delta_xj - q(j)), which
    // contracts the double sum to one pass over c(x) = p_g(x)(d - t*eps)/d^2.
    for (size_t i = 0; i < n; ++i)
      c[i] = pg[i] > 0.0 ? pg[i] * (d[i] - t * eps[i]) / (d[i] * d[i]) : 0.0;
    double cq = dot(c, qt);
    rhs.resize(n);
    for (size_t j = 0; j < n; ++j) rhs[j] = -qt[j] * (c[j] - cq);
  };

  eval(1.0, rep.lhs, rep.rhs);
  double lhs_inf = 0.0;
  for (size_t j = 0; j < n; ++j) {
    rep.abs_error = std::max(rep.abs_error, std::abs(rep.lhs[j] - rep.rhs[j]));
    lhs_inf = std::max(lhs_inf, std::abs(rep.lhs[j]));
  }
  rep.rel_error = lhs_inf > 0.0 ? rep.abs_error / lhs_inf : 0.0;

  for (double t : {1.0, 0.5, 0.25}) {
    std::vector<double> lhs, rhs;
    eval(t, lhs, rhs);
    double err = 0.0;
    for (size_t j = 0; j < n; ++j) err = std::max(err, std::abs(lhs[j] - rhs[j]));
    rep.error_by_scale.push_back(err);
  }
  return rep;
}

namespace {

SimilarityReport similarity_of(const std::vector<double>& qv, const std::vector<double>& p_d,
                               const std::vector<double>& p_g) {
  SimilarityReport rep;
  rep.kl_pd_pg = kl(p_d, p_g);
  std::vector<double> gd(qv.size()), gg(qv.size());
  for (size_t i = 0; i < qv.size(); ++i) {
    gd[i] = qv[i] - p_d[i];
    gg[i] = qv[i] - p_g[i];
  }
  double nd = norm2(gd), ng = norm2(gg);
  if (nd < 1e-15 || ng < 1e-15) {
    rep.defined = false;
    rep.cosine = std::numeric_limits<double>::quiet_NaN();
    rep.norm_ratio = std::numeric_limits<double>::quiet_NaN();
    return rep;
  }
  rep.cosine = dot(gd, gg) / (nd * ng);
  rep.norm_ratio = nd / ng;
  return rep;
}

}  // namespace

SimilarityReport gradient_similarity_check(const CategoricalWorld& world,
                                           const SoftmaxModel& model) {
  world.validate();
  auto qv = model.q();
  ensure(qv.size() == world.size(), "model and world sizes differ");
  return similarity_of(qv, world.p_d, world.p_g);
}

BufferingReport buffering_effect_check(const CategoricalWorld& world, const SoftmaxModel& model) {
  auto qv = model.q();
  ensure(qv.size() == world.size(), "model and world sizes differ");
  BufferingReport rep;
  double qq = dot(qv, qv);
  rep.log_losses.resize(qv.size());
  rep.grad_norms.resize(qv.size());
  for (size_t x = 0; x < qv.size(); ++x) {
    rep.log_losses[x] = -std::log(qv[x]);
    // ||q - e_x||, the per-outcome gradient of -log q(x)
    rep.grad_norms[x] = std::sqrt(qq - 2.0 * qv[x] + 1.0);
  }
  rep.rank_correlation = spearman(rep.log_losses, rep.grad_norms);
  rep.argmax_q = static_cast<size_t>(
      std::max_element(qv.begin(), qv.end()) - qv.begin());
  rep.argmin_norm = static_cast<size_t>(
      std::min_element(rep.grad_norms.begin(), rep.grad_norms.end()) - rep.grad_norms.begin());
  return rep;
}

std::vector<KlSweepPoint> kl_alignment_sweep(const CategoricalWorld& world,
                                             const SoftmaxModel& model,
                                             const std::vector<double>& kl_targets) {
  world.validate();
  auto qv = model.q();
  const size_t n = world.size();
  ensure(qv.size() == n, "model and world sizes differ");
  const auto& pg = world.p_g;
  for (double x : pg) ensure(x > 0.0, "alignment sweep needs a full-support p_g");

  size_t lo_idx = static_cast<size_t>(std::min_element(pg.begin(), pg.end()) - pg.begin());
  std::vector<double> u(n, 0.1 / static_cast<double>(n));
  u[lo_idx] += 0.9;

  auto mix = [&](double s) {
    std::vector<double> p(n);
    for (size_t i = 0; i < n; ++i) p[i] = (1.0 - s) * pg[i] + s * u[i];
    return p;
  };

  std::vector<KlSweepPoint> out;
  for (double target : kl_targets) {
    ensure(target > 0.0, "kl targets must be positive");
    double kmax = kl(u, pg);
    ensure(kmax >= target, "kl target " + fmt_double(target) + " unreachable; the ray tops out at " +
                               fmt_double(kmax));
    double lo = 0.0, hi = 1.0;
    for (int it = 0; it < 100; ++it) {
      double mid = 0.5 * (lo + hi);
      (kl(mix(mid), pg) < target ? lo : hi) = mid;
    }
    double s = 0.5 * (lo + hi);
    auto pd = mix(s);
    auto sim = similarity_of(qv, pd, pg);
    out.push_back({target, kl(pd, pg), sim.cosine, sim.norm_ratio});
  }
  return out;
}

KlHypothesisReport kl_hypothesis_check(const CategoricalWorld& world) {
  world.validate();
  KlHypothesisReport rep;
  rep.kl_biased = kl(world.p_d_prime, world.p_g);
  rep.kl_true = kl(world.p_d, world.p_g);
  rep.biased_farther = rep.kl_biased > rep.kl_true;
  return rep;
}

CategoricalWorld random_world(size_t n, uint64_t seed) {
  ensure(n >= 2 && n <= 10000, "world size must lie in [2, 10^4]");
  Rng root(seed);
  Rng rd = root.derive("pd");
  Rng rg = root.derive("pg");
  CategoricalWorld w;
  w.p_d = simplex_draw(rd, n);
  w.p_g = simplex_draw(rg, n);
  // exponential tilt of p_d away from p_g; moving along this family strictly
  // increases kl(. || p_g), which makes the biased distribution farther out
  w.p_d_prime.resize(n);
  double sum = 0.0;
  for (size_t i = 0; i < n; ++i) {
    w.p_d_prime[i] = w.p_d[i] * std::sqrt(w.p_d[i] / w.p_g[i]);
    sum += w.p_d_prime[i];
  }
  for (auto& x : w.p_d_prime) x /= sum;
  w.validate();
  return w;
}

SoftmaxModel model_near(const std::vector<double>& target, double eps_inf, uint64_t seed) {
  check_prob_vector(target, "target");
  ensure(eps_inf >= 0.0, "residual size must be nonnegative");
  double tmin = *std::min_element(target.begin(), target.end());
  ensure(eps_inf < tmin, "residual " + fmt_double(eps_inf) +
                             " would push the smallest target mass " + fmt_double(tmin) +
                             " negative");
  SoftmaxModel m;
  m.theta.resize(target.size());
  if (eps_inf == 0.0) {
    for (size_t i = 0; i < target.size(); ++i) m.theta[i] = std::log(target[i]);
    return m;
  }
  Rng rng(seed);
  std::vector<double> z(target.size());
  double mean = 0.0;
  for (auto& x : z) {
    x = rng.normal();
    mean += x;
  }
  mean /= static_cast<double>(z.size());
  double zmax = 0.0;
  for (auto& x : z) {
    x -= mean;
    zmax = std::max(zmax, std::abs(x));
  }
  ensure(zmax > 0.0, "degenerate residual direction");
  for (size_t i = 0; i < target.size(); ++i)
    m.theta[i] = std::log(target[i] + z[i] * (eps_inf / zmax));
  return m;
}

}  // namespace delia::theory
