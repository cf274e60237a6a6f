#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace delia::theory {

// Finite outcome space with exact downstream, biased-training and diverse
// distributions. Everything downstream of this type is computed by full
// enumeration, so tolerances measure truncation, never sampling noise.
struct CategoricalWorld {
  std::vector<double> p_d;        // true downstream distribution
  std::vector<double> p_d_prime;  // biased training distribution
  std::vector<double> p_g;        // diverse/general distribution

  size_t size() const { return p_g.size(); }
  void validate() const;
};

// q = softmax(theta), one logit per outcome.
struct SoftmaxModel {
  std::vector<double> theta;

  std::vector<double> q() const;
  // fit residual against a training distribution; sums to ~0 by construction
  std::vector<double> epsilon(const std::vector<double>& p_d_prime) const;
};

double kl(const std::vector<double>& p, const std::vector<double>& q);
double entropy(const std::vector<double>& p);

// E_{x~under}[grad_theta(-log q_theta(x))], exact over the whole outcome space
std::vector<double> exact_gradient(const SoftmaxModel& model, const std::vector<double>& under);

// rank correlation with average ranks on ties
double spearman(const std::vector<double>& a, const std::vector<double>& b);

struct TaylorReport {
  std::vector<double> lhs;  // exact loss gradient under p_g
  std::vector<double> rhs;  // KL+entropy route minus the residual-ratio route
  double abs_error = 0.0;   // max |lhs - rhs| at the model's own residual
  double rel_error = 0.0;   // abs_error / max |lhs|
  double eps_inf = 0.0;
  // max |lhs - rhs| with the residual scaled by 1, 1/2, 1/4; the decomposition
  // drops only second-order terms, so each halving should shrink this ~4x
  std::vector<double> error_by_scale;
  bool first_order_ok = true;
  std::string diagnostic;
};

TaylorReport taylor_decomposition_check(const CategoricalWorld& world, const SoftmaxModel& model);

struct SimilarityReport {
  double cosine = 0.0;
  double norm_ratio = 0.0;  // ||grad under p_d|| / ||grad under p_g||
  double kl_pd_pg = 0.0;
  bool defined = true;  // false at an exact optimum, where direction is meaningless
};

SimilarityReport gradient_similarity_check(const CategoricalWorld& world,
                                           const SoftmaxModel& model);

struct BufferingReport {
  std::vector<double> log_losses;  // -log q(x) per outcome
  std::vector<double> grad_norms;  // ||grad_theta(-log q(x))|| per outcome
  double rank_correlation = 0.0;   // between the two columns above
  size_t argmax_q = 0;
  size_t argmin_norm = 0;
};

BufferingReport buffering_effect_check(const CategoricalWorld& world, const SoftmaxModel& model);

// premise probe: alignment of the two gradients as p_d is pulled away from p_g
struct KlSweepPoint {
  double kl_target = 0.0;
  double kl_actual = 0.0;
  double cosine = 0.0;
  double norm_ratio = 0.0;
};

std::vector<KlSweepPoint> kl_alignment_sweep(const CategoricalWorld& world,
                                             const SoftmaxModel& model,
                                             const std::vector<double>& kl_targets);

struct KlHypothesisReport {
  double kl_biased = 0.0;  // kl(p_d' || p_g)
  double kl_true = 0.0;    // kl(p_d  || p_g)
  bool biased_farther = false;
};

KlHypothesisReport kl_hypothesis_check(const CategoricalWorld& world);

// seeded full-support world; p_d' is p_d exponentially tilted away from p_g
CategoricalWorld random_world(size_t n, uint64_t seed);

// model whose q sits exactly eps_inf away (sup norm) from the target simplex
// point, with a zero-sum residual direction drawn from the seed
SoftmaxModel model_near(const std::vector<double>& target, double eps_inf, uint64_t seed);

}  // namespace delia::theory
