#pragma once

#include <string>
#include <utility>
#include <vector>

#include "cpnerf/autodiff.hpp"
#include "cpnerf/common.hpp"

namespace cpnerf {
namespace nn {

// Ordered named parameter registry. Iteration order is creation order, which
// fixes the optimizer update order and the checkpoint record order.
class ParamStore {
 public:
  ad::Tensor add(const std::string& name, ad::Tensor t) {
    for (const auto& it : items_)
      check(it.first != name, "ParamStore: duplicate parameter name " + name);
    t.set_requires_grad(true);
    items_.emplace_back(name, t);
    return t;
  }

  const std::vector<std::pair<std::string, ad::Tensor>>& items() const { return items_; }
  std::vector<std::pair<std::string, ad::Tensor>>& items() { return items_; }

  ad::Tensor find(const std::string& name) const {
    for (const auto& it : items_)
      if (it.first == name) return it.second;
    fail("ParamStore: no parameter named " + name);
  }

  void zero_grad() {
    for (auto& it : items_) it.second.zero_grad();
  }

  int64_t total_size() const {
    int64_t n = 0;
    for (const auto& it : items_) n += it.second.size();
    return n;
  }

 private:
  std::vector<std::pair<std::string, ad::Tensor>> items_;
};

struct Linear {
  ad::Tensor w;  // (in, out)
  ad::Tensor b;  // (out)

  static Linear create(int in, int out, Rng& rng, ParamStore& store,
                       const std::string& prefix) {
    Linear l;
    double std = std::sqrt(2.0 / in);
    l.w = store.add(prefix + ".w", ad::Tensor::randn({in, out}, rng, std));
    l.b = store.add(prefix + ".b", ad::Tensor::zeros({out}));
    return l;
  }

  ad::Tensor forward(const ad::Tensor& x) const { return ad::matmul(x, w) + b; }
};

struct Conv2d {
  ad::Tensor w;  // (K, C, kh, kw)
  ad::Tensor b;  // (K)
  int stride = 1;
  int pad = 1;

  static Conv2d create(int in_ch, int out_ch, int ksize, int stride, int pad, Rng& rng,
                       ParamStore& store, const std::string& prefix) {
    Conv2d c;
    double std = std::sqrt(2.0 / (in_ch * ksize * ksize));
    c.w = store.add(prefix + ".w", ad::Tensor::randn({out_ch, in_ch, ksize, ksize}, rng, std));
    c.b = store.add(prefix + ".b", ad::Tensor::zeros({out_ch}));
    c.stride = stride;
    c.pad = pad;
    return c;
  }

  ad::Tensor forward(const ad::Tensor& x) const { return ad::conv2d(x, w, b, stride, pad); }
};

}  // namespace nn
}  // namespace cpnerf
