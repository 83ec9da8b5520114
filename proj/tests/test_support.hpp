#pragma once

// Shared helpers for unit and acceptance tests. The gradient checker is the
// independent oracle for backward passes: central finite differences around
// the current parameter values.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "cpnerf/autodiff.hpp"

namespace cpnerf_test {

using cpnerf::ad::Tape;
using cpnerf::ad::Tensor;

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst;  // "param[i]" of the worst element
  bool ok(double tol) const { return max_rel_err < tol; }
};

// loss_fn must recompute the loss from the current parameter values.
inline GradCheckResult check_gradients(std::vector<Tensor> params,
                                       const std::function<Tensor()>& loss_fn,
                                       double h = 1e-5) {
  for (auto& p : params) p.zero_grad();
  {
    Tape tape;
    Tensor loss = loss_fn();
    tape.backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  for (auto& p : params) analytic.push_back(p.grad());

  GradCheckResult res;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto& data = params[pi].data();
    for (size_t i = 0; i < data.size(); ++i) {
      double saved = data[i];
      data[i] = saved + h;
      double lp = loss_fn().item();
      data[i] = saved - h;
      double lm = loss_fn().item();
      data[i] = saved;
      double fd = (lp - lm) / (2.0 * h);
      double g = analytic[pi][i];
      double rel = std::abs(g - fd) / std::max({1.0, std::abs(g), std::abs(fd)});
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst = "param" + std::to_string(pi) + "[" + std::to_string(i) + "]";
      }
    }
  }
  return res;
}

inline bool bits_equal(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) return false;
  for (size_t i = 0; i < a.size(); ++i) {
    if (std::memcmp(&a[i], &b[i], sizeof(double)) != 0) return false;
  }
  return true;
}

}  // namespace cpnerf_test
