#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "cpnerf/nn.hpp"

namespace cpnerf {
namespace optim {

// Adam with bias correction. Moment slots are laid out in the parameter
// store's creation order; the step counter is shared across parameters.
class Adam {
 public:
  explicit Adam(double lr = 0.0005, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(nn::ParamStore& params) {
    auto& items = params.items();
    if (slots_.size() != items.size()) {
      slots_.resize(items.size());
      for (size_t i = 0; i < items.size(); ++i) {
        slots_[i].m.assign(items[i].second.size(), 0.0);
        slots_[i].v.assign(items[i].second.size(), 0.0);
      }
    }
    ++step_count_;
    double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_count_));
    double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_count_));
    for (size_t i = 0; i < items.size(); ++i) {
      auto& p = items[i].second;
      const auto& g = p.grad();
      for (double gv : g)
        if (std::isnan(gv))
          fail_numeric("adam: NaN gradient in parameter " + items[i].first);
      auto& m = slots_[i].m;
      auto& v = slots_[i].v;
      auto& val = p.data();
      for (int64_t j = 0; j < p.size(); ++j) {
        m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
        v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
        double mhat = m[j] / bc1;
        double vhat = v[j] / bc2;
        val[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

  int64_t step_count() const { return step_count_; }
  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }

 private:
  struct Slot {
    std::vector<double> m, v;
  };
  double lr_, beta1_, beta2_, eps_;
  int64_t step_count_ = 0;
  std::vector<Slot> slots_;
};

}  // namespace optim
}  // namespace cpnerf
