#include "delia/rng.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

#include "delia/util.hpp"

namespace delia {

double Rng::normal(double mu, double sigma) {
  // u1 in (0,1] so the log is finite
  double u1 = 1.0 - uniform();
  double u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  return mu + sigma * r * std::cos(2.0 * std::numbers::pi * u2);
}

size_t Rng::pick_index(const std::vector<double>& weights) {
  double total = 0.0;
  for (double w : weights) {
    if (w < 0.0) throw std::invalid_argument("Rng::pick_index: negative weight");
    total += w;
  }
  if (total <= 0.0) throw std::invalid_argument("Rng::pick_index: weights sum to zero");
  double x = uniform() * total;
  double acc = 0.0;
  for (size_t i = 0; i < weights.size(); ++i) {
    acc += weights[i];
    if (x < acc) return i;
  }
  return weights.size() - 1;
}

Rng Rng::derive(std::string_view tag) const {
  uint64_t h = fnv1a64(tag);
  return Rng(state_ ^ (h * 0x9e3779b97f4a7c15ull) ^ 0x5851f42d4c957f2dull);
}

}  // namespace delia
