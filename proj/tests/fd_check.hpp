#pragma once

// Finite-difference gradient oracle shared by the unit and acceptance suites.
// The analytic gradient path is never used here: losses are re-evaluated from
// scratch with perturbed leaf values, so agreement is meaningful evidence.

#include <cmath>
#include <functional>
#include <vector>

#include "delia/ndgrad.hpp"

namespace delia::testing {

inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6});
}

struct FdReport {
  double max_rel_err = 0.0;
  int64_t checked = 0;
  size_t worst_leaf = 0;
  size_t worst_elem = 0;
  double worst_analytic = 0.0;
  double worst_fd = 0.0;
};

// fwd must rebuild the whole computation from the captured leaves each call
inline FdReport fd_max_rel_err(const std::function<ndgrad::Tensor(ndgrad::Tape&)>& fwd,
                               std::vector<ndgrad::Tensor> leaves, double h = 1e-5) {
  using namespace delia::ndgrad;
  FdReport rep;
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    Tensor loss = fwd(tape);
    tape.backward(loss);
    for (auto& l : leaves) analytic.push_back(l.grad());
  }
  auto eval = [&]() {
    Tape tape;
    return fwd(tape).item();
  };
  for (size_t li = 0; li < leaves.size(); ++li) {
    auto& vals = leaves[li].value_mut();
    for (size_t i = 0; i < vals.size(); ++i) {
      double keep = vals[i];
      vals[i] = keep + h;
      double fp = eval();
      vals[i] = keep - h;
      double fm = eval();
      vals[i] = keep;
      double fd = (fp - fm) / (2.0 * h);
      double err = rel_err(fd, analytic[li][i]);
      if (err > rep.max_rel_err) {
        rep.max_rel_err = err;
        rep.worst_leaf = li;
        rep.worst_elem = i;
        rep.worst_analytic = analytic[li][i];
        rep.worst_fd = fd;
      }
      rep.checked += 1;
    }
  }
  return rep;
}

}  // namespace delia::testing
