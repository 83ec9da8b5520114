#pragma once

// Reverse-mode autodiff over dense double arrays. Define-by-run: every
// primitive records a backward closure on the active Tape; Tape::backward
// replays them in exact reverse execution order. All kernels partition work
// by output element with a fixed inner summation order, so results are
// bit-identical for any thread count.

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <numeric>
#include <vector>

#include "cpnerf/common.hpp"

namespace cpnerf {
namespace ad {

struct Node {
  std::vector<int> shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first touched
  bool requires_grad = false;

  int64_t size() const { return static_cast<int64_t>(value.size()); }
  bool has_grad() const { return !grad.empty(); }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

inline int64_t shape_size(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : n_(std::move(n)) {}

  static Tensor zeros(const std::vector<int>& shape, bool requires_grad = false) {
    return full(shape, 0.0, requires_grad);
  }
  static Tensor full(const std::vector<int>& shape, double v, bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    n->shape = shape;
    n->value.assign(shape_size(shape), v);
    n->requires_grad = requires_grad;
    return Tensor(n);
  }
  static Tensor from_data(const std::vector<int>& shape, std::vector<double> data,
                          bool requires_grad = false) {
    check(shape_size(shape) == static_cast<int64_t>(data.size()),
          "Tensor: shape " + shape_str(shape) + " does not match data length " +
              std::to_string(data.size()));
    auto n = std::make_shared<Node>();
    n->shape = shape;
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(n);
  }
  static Tensor scalar(double v, bool requires_grad = false) {
    return full({1}, v, requires_grad);
  }
  static Tensor randn(const std::vector<int>& shape, Rng& rng, double std = 1.0,
                      bool requires_grad = false) {
    auto t = zeros(shape, requires_grad);
    for (auto& v : t.data()) v = rng.normal(0.0, std);
    return t;
  }

  bool defined() const { return n_ != nullptr; }
  const std::vector<int>& shape() const { return n_->shape; }
  int64_t size() const { return n_->size(); }
  bool requires_grad() const { return n_->requires_grad; }
  void set_requires_grad(bool rg) {
    n_->requires_grad = rg;
    if (rg) n_->ensure_grad();
  }

  std::vector<double>& data() { return n_->value; }
  const std::vector<double>& data() const { return n_->value; }
  std::vector<double>& grad() {
    n_->ensure_grad();
    return n_->grad;
  }
  const std::vector<double>& grad() const {
    n_->ensure_grad();
    return n_->grad;
  }
  void zero_grad() {
    n_->ensure_grad();
    std::fill(n_->grad.begin(), n_->grad.end(), 0.0);
  }

  double item() const {
    check(size() == 1, "item: tensor is not scalar, shape " + shape_str(shape()));
    return n_->value[0];
  }
  double at(int64_t i) const { return n_->value[i]; }

  std::shared_ptr<Node> node() const { return n_; }

 private:
  std::shared_ptr<Node> n_;
};

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

class Tape {
 public:
  Tape() { stack().push_back(this); }
  ~Tape() { stack().pop_back(); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current() { return stack().empty() ? nullptr : stack().back(); }

  void record(std::function<void()> fn) { entries_.push_back(std::move(fn)); }
  size_t size() const { return entries_.size(); }

  // Seeds d(loss)/d(loss) = 1 and replays recorded ops in reverse.
  void backward(const Tensor& loss) {
    check(loss.size() == 1,
          "backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    if (loss.requires_grad()) {
      loss.node()->ensure_grad();
      loss.node()->grad[0] += 1.0;
    }
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
  }

 private:
  static std::vector<Tape*>& stack() {
    thread_local std::vector<Tape*> s;
    return s;
  }
  std::vector<std::function<void()>> entries_;
};

namespace detail {

inline bool should_record(bool any_requires) {
  return any_requires && Tape::current() != nullptr;
}

inline Tensor make_out(const std::vector<int>& shape, bool requires_grad) {
  auto t = Tensor::zeros(shape, false);
  t.node()->requires_grad = requires_grad;
  return t;
}

// Broadcast plan: numpy rules, dims aligned right, size-1 dims get stride 0.
struct BcastPlan {
  std::vector<int> out_shape;
  std::vector<int64_t> stride_a, stride_b;  // per output dim
  int64_t out_size = 0;
  bool same_shape = false;
};

inline BcastPlan make_bcast_plan(const std::vector<int>& a, const std::vector<int>& b,
                                 const char* opname) {
  BcastPlan p;
  if (a == b) {
    p.out_shape = a;
    p.out_size = shape_size(a);
    p.same_shape = true;
    return p;
  }
  size_t rank = std::max(a.size(), b.size());
  p.out_shape.resize(rank);
  for (size_t i = 0; i < rank; ++i) {
    int da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    int db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1)
      fail(std::string(opname) + ": shapes not broadcastable " + shape_str(a) + " vs " +
           shape_str(b));
    p.out_shape[i] = std::max(da, db);
  }
  p.out_size = shape_size(p.out_shape);
  // row-major strides, zeroed where the input dim is 1
  auto strides_for = [&](const std::vector<int>& s) {
    std::vector<int64_t> st(rank, 0);
    int64_t acc = 1;
    for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
      size_t oi = rank - s.size() + i;
      st[oi] = (s[i] == 1) ? 0 : acc;
      acc *= s[i];
    }
    return st;
  };
  p.stride_a = strides_for(a);
  p.stride_b = strides_for(b);
  return p;
}

// Odometer walk over the broadcast output; calls fn(out_idx, a_idx, b_idx).
template <typename Fn>
inline void bcast_walk(const BcastPlan& p, Fn&& fn) {
  size_t rank = p.out_shape.size();
  std::vector<int> idx(rank, 0);
  int64_t ia = 0, ib = 0;
  for (int64_t o = 0; o < p.out_size; ++o) {
    fn(o, ia, ib);
    for (int d = static_cast<int>(rank) - 1; d >= 0; --d) {
      idx[d]++;
      ia += p.stride_a[d];
      ib += p.stride_b[d];
      if (idx[d] < p.out_shape[d]) break;
      idx[d] = 0;
      ia -= p.stride_a[d] * p.out_shape[d];
      ib -= p.stride_b[d] * p.out_shape[d];
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops with broadcasting
// ---------------------------------------------------------------------------

namespace detail {

// FwdOp: double(double,double). BwdOp: void(a,b,out,g,&da,&db).
template <typename FwdOp, typename BwdOp>
Tensor binary_op(const Tensor& a, const Tensor& b, FwdOp fwd, BwdOp bwd,
                 const char* name) {
  BcastPlan plan = make_bcast_plan(a.shape(), b.shape(), name);
  bool rg = a.requires_grad() || b.requires_grad();
  Tensor out = make_out(plan.out_shape, rg);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.data().data();
  if (plan.same_shape) {
    int64_t n = plan.out_size;
    parallel_for(n, [&](int64_t i) { po[i] = fwd(pa[i], pb[i]); }, 1 << 16);
  } else {
    bcast_walk(plan, [&](int64_t o, int64_t ia, int64_t ib) { po[o] = fwd(pa[ia], pb[ib]); });
  }
  if (should_record(rg)) {
    auto an = a.node(), bn = b.node(), on = out.node();
    Tape::current()->record([an, bn, on, plan, bwd]() {
      if (!on->has_grad()) return;
      if (an->requires_grad) an->ensure_grad();
      if (bn->requires_grad) bn->ensure_grad();
      const double* pa = an->value.data();
      const double* pb = bn->value.data();
      const double* po = on->value.data();
      const double* g = on->grad.data();
      double* ga = an->requires_grad ? an->grad.data() : nullptr;
      double* gb = bn->requires_grad ? bn->grad.data() : nullptr;
      if (plan.same_shape) {
        for (int64_t i = 0; i < plan.out_size; ++i) {
          double da = 0, db = 0;
          bwd(pa[i], pb[i], po[i], g[i], da, db);
          if (ga) ga[i] += da;
          if (gb) gb[i] += db;
        }
      } else {
        bcast_walk(plan, [&](int64_t o, int64_t ia, int64_t ib) {
          double da = 0, db = 0;
          bwd(pa[ia], pb[ib], po[o], g[o], da, db);
          if (ga) ga[ia] += da;
          if (gb) gb[ib] += db;
        });
      }
    });
  }
  return out;
}

template <typename FwdOp, typename BwdOp>
Tensor unary_op(const Tensor& a, FwdOp fwd, BwdOp bwd, const char*) {
  bool rg = a.requires_grad();
  Tensor out = make_out(a.shape(), rg);
  const double* pa = a.data().data();
  double* po = out.data().data();
  int64_t n = a.size();
  parallel_for(n, [&](int64_t i) { po[i] = fwd(pa[i]); }, 1 << 16);
  if (should_record(rg)) {
    auto an = a.node(), on = out.node();
    Tape::current()->record([an, on, bwd]() {
      if (!on->has_grad()) return;
      an->ensure_grad();
      const double* pa = an->value.data();
      const double* po = on->value.data();
      const double* g = on->grad.data();
      double* ga = an->grad.data();
      for (int64_t i = 0; i < an->size(); ++i) ga[i] += g[i] * bwd(pa[i], po[i]);
    });
  }
  return out;
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, [](double x, double y) { return x + y; },
      [](double, double, double, double g, double& da, double& db) {
        da = g;
        db = g;
      },
      "add");
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, [](double x, double y) { return x - y; },
      [](double, double, double, double g, double& da, double& db) {
        da = g;
        db = -g;
      },
      "sub");
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, [](double x, double y) { return x * y; },
      [](double x, double y, double, double g, double& da, double& db) {
        da = g * y;
        db = g * x;
      },
      "mul");
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, [](double x, double y) { return x / y; },
      [](double x, double y, double, double g, double& da, double& db) {
        da = g / y;
        db = -g * x / (y * y);
      },
      "div");
}

// ---------------------------------------------------------------------------
// Unary ops
// ---------------------------------------------------------------------------

inline Tensor relu(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; }, "relu");
}

inline double sigmoid_val(double x) {
  if (x >= 0) {
    double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  double e = std::exp(x);
  return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return sigmoid_val(x); },
      [](double, double y) { return y * (1.0 - y); }, "sigmoid");
}

inline double softplus_val(double x) {
  if (x > 30.0) return x;
  if (x < -30.0) return std::exp(x);
  return std::log1p(std::exp(x));
}

inline Tensor softplus(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return softplus_val(x); },
      [](double x, double) { return sigmoid_val(x); }, "softplus");
}

inline Tensor exp(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; }, "exp");
}

inline Tensor log(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; },
      "log");
}

inline Tensor sqrt(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return std::sqrt(x); },
      [](double, double y) { return 0.5 / y; }, "sqrt");
}

inline Tensor sin(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return std::sin(x); }, [](double x, double) { return std::cos(x); },
      "sin");
}

inline Tensor cos(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return std::cos(x); },
      [](double x, double) { return -std::sin(x); }, "cos");
}

// arccos with the domain clamped to [-1+1e-7, 1-1e-7]. Inputs beyond the
// 1e-7 tolerance band outside [-1,1] are a hard error; inside the band the
// gradient is zero (the clamp is active).
inline Tensor acos(const Tensor& a) {
  constexpr double kTol = 1e-7;
  for (double v : a.data())
    check(v >= -1.0 - kTol && v <= 1.0 + kTol,
          "acos: input " + std::to_string(v) + " outside [-1,1] beyond tolerance 1e-7");
  return detail::unary_op(
      a,
      [](double x) { return std::acos(cpnerf::clamp(x, -1.0 + kTol, 1.0 - kTol)); },
      [](double x, double) {
        if (x <= -1.0 + kTol || x >= 1.0 - kTol) return 0.0;
        return -1.0 / std::sqrt(1.0 - x * x);
      },
      "acos");
}

inline Tensor clamp(const Tensor& a, double lo, double hi) {
  return detail::unary_op(
      a, [lo, hi](double x) { return cpnerf::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; }, "clamp");
}

inline Tensor neg(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return -x; }, [](double, double) { return -1.0; }, "neg");
}

inline Tensor add_scalar(const Tensor& a, double c) {
  return detail::unary_op(
      a, [c](double x) { return x + c; }, [](double, double) { return 1.0; }, "add_scalar");
}

inline Tensor mul_scalar(const Tensor& a, double c) {
  return detail::unary_op(
      a, [c](double x) { return x * c; }, [c](double, double) { return c; }, "mul_scalar");
}

// ---------------------------------------------------------------------------
// Matrix multiply. Three raw kernels, each parallel over rows of the output
// with a fixed inner order.
// ---------------------------------------------------------------------------

namespace detail {

// C(M,N) = A(M,K) * B(K,N)
inline void mm_nn(const double* A, const double* B, double* C, int64_t M, int64_t K,
                  int64_t N) {
  parallel_for(
      M,
      [&](int64_t i) {
        double* c = C + i * N;
        std::fill(c, c + N, 0.0);
        const double* a = A + i * K;
        for (int64_t k = 0; k < K; ++k) {
          double av = a[k];
          const double* b = B + k * N;
          for (int64_t j = 0; j < N; ++j) c[j] += av * b[j];
        }
      },
      4);
}

// C(M,N) += A(M,K) * B(N,K)^T   (rows of B dotted with rows of A)
inline void mm_nt_acc(const double* A, const double* B, double* C, int64_t M, int64_t K,
                      int64_t N) {
  parallel_for(
      M,
      [&](int64_t i) {
        const double* a = A + i * K;
        double* c = C + i * N;
        for (int64_t j = 0; j < N; ++j) {
          const double* b = B + j * K;
          double s = 0.0;
          for (int64_t k = 0; k < K; ++k) s += a[k] * b[k];
          c[j] += s;
        }
      },
      4);
}

// C(K,N) += A(M,K)^T * B(M,N)
inline void mm_tn_acc(const double* A, const double* B, double* C, int64_t M, int64_t K,
                      int64_t N) {
  parallel_for(
      K,
      [&](int64_t k) {
        double* c = C + k * N;
        for (int64_t i = 0; i < M; ++i) {
          double av = A[i * K + k];
          const double* b = B + i * N;
          for (int64_t j = 0; j < N; ++j) c[j] += av * b[j];
        }
      },
      4);
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  check(a.shape().size() == 2 && b.shape().size() == 2,
        "matmul: expects rank-2 tensors, got " + shape_str(a.shape()) + " and " +
            shape_str(b.shape()));
  int64_t M = a.shape()[0], K = a.shape()[1];
  check(b.shape()[0] == K, "matmul: inner dimensions differ, " + shape_str(a.shape()) +
                               " vs " + shape_str(b.shape()));
  int64_t N = b.shape()[1];
  bool rg = a.requires_grad() || b.requires_grad();
  Tensor out = detail::make_out({static_cast<int>(M), static_cast<int>(N)}, rg);
  detail::mm_nn(a.data().data(), b.data().data(), out.data().data(), M, K, N);
  if (detail::should_record(rg)) {
    auto an = a.node(), bn = b.node(), on = out.node();
    Tape::current()->record([an, bn, on, M, K, N]() {
      if (!on->has_grad()) return;
      const double* g = on->grad.data();
      if (an->requires_grad) {
        an->ensure_grad();
        detail::mm_nt_acc(g, bn->value.data(), an->grad.data(), M, N, K);
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        detail::mm_tn_acc(an->value.data(), g, bn->grad.data(), M, K, N);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
  bool rg = a.requires_grad();
  Tensor out = detail::make_out({1}, rg);
  double s = 0.0;
  for (double v : a.data()) s += v;
  out.data()[0] = s;
  if (detail::should_record(rg)) {
    auto an = a.node(), on = out.node();
    Tape::current()->record([an, on]() {
      if (!on->has_grad()) return;
      an->ensure_grad();
      double g = on->grad[0];
      for (auto& v : an->grad) v += g;
    });
  }
  return out;
}

inline Tensor mean(const Tensor& a) {
  check(a.size() > 0, "mean: empty tensor");
  return mul_scalar(sum(a), 1.0 / static_cast<double>(a.size()));
}

// Collapses every axis except the first: (R, ...) -> (R).
inline Tensor sum_per_row(const Tensor& a) {
  check(!a.shape().empty(), "sum_per_row: rank-0 tensor");
  int64_t rows = a.shape()[0];
  int64_t cols = a.size() / std::max<int64_t>(rows, 1);
  bool rg = a.requires_grad();
  Tensor out = detail::make_out({static_cast<int>(rows)}, rg);
  const double* pa = a.data().data();
  double* po = out.data().data();
  parallel_for(rows, [&](int64_t r) {
    double s = 0.0;
    const double* p = pa + r * cols;
    for (int64_t c = 0; c < cols; ++c) s += p[c];
    po[r] = s;
  });
  if (detail::should_record(rg)) {
    auto an = a.node(), on = out.node();
    Tape::current()->record([an, on, rows, cols]() {
      if (!on->has_grad()) return;
      an->ensure_grad();
      for (int64_t r = 0; r < rows; ++r) {
        double g = on->grad[r];
        double* ga = an->grad.data() + r * cols;
        for (int64_t c = 0; c < cols; ++c) ga[c] += g;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& a, const std::vector<int>& shape) {
  check(shape_size(shape) == a.size(), "reshape: size mismatch " + shape_str(a.shape()) +
                                           " -> " + shape_str(shape));
  bool rg = a.requires_grad();
  Tensor out = detail::make_out(shape, rg);
  out.data() = a.data();
  if (detail::should_record(rg)) {
    auto an = a.node(), on = out.node();
    Tape::current()->record([an, on]() {
      if (!on->has_grad()) return;
      an->ensure_grad();
      for (int64_t i = 0; i < an->size(); ++i) an->grad[i] += on->grad[i];
    });
  }
  return out;
}

inline Tensor broadcast_to(const Tensor& a, const std::vector<int>& shape) {
  detail::BcastPlan plan = detail::make_bcast_plan(a.shape(), shape, "broadcast_to");
  check(plan.out_shape == shape,
        "broadcast_to: cannot broadcast " + shape_str(a.shape()) + " to " + shape_str(shape));
  bool rg = a.requires_grad();
  Tensor out = detail::make_out(shape, rg);
  const double* pa = a.data().data();
  double* po = out.data().data();
  detail::bcast_walk(plan, [&](int64_t o, int64_t ia, int64_t) { po[o] = pa[ia]; });
  if (detail::should_record(rg)) {
    auto an = a.node(), on = out.node();
    Tape::current()->record([an, on, plan]() {
      if (!on->has_grad()) return;
      an->ensure_grad();
      double* ga = an->grad.data();
      const double* g = on->grad.data();
      detail::bcast_walk(plan, [&](int64_t o, int64_t ia, int64_t) { ga[ia] += g[o]; });
    });
  }
  return out;
}

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
  check(!parts.empty(), "concat: no inputs");
  const auto& s0 = parts[0].shape();
  int rank = static_cast<int>(s0.size());
  check(axis >= 0 && axis < rank, "concat: bad axis");
  std::vector<int> out_shape = s0;
  bool rg = false;
  int axis_total = 0;
  for (const auto& p : parts) {
    check(static_cast<int>(p.shape().size()) == rank, "concat: rank mismatch");
    for (int d = 0; d < rank; ++d)
      if (d != axis)
        check(p.shape()[d] == s0[d], "concat: shape mismatch " + shape_str(p.shape()) +
                                         " vs " + shape_str(s0));
    axis_total += p.shape()[axis];
    rg = rg || p.requires_grad();
  }
  out_shape[axis] = axis_total;
  Tensor out = detail::make_out(out_shape, rg);

  int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= s0[d];
  for (int d = axis + 1; d < rank; ++d) inner *= s0[d];
  int64_t out_axis_stride = static_cast<int64_t>(axis_total) * inner;

  int64_t offset = 0;  // in units of inner elements
  struct Piece {
    std::shared_ptr<Node> n;
    int64_t offset, len;
  };
  std::vector<Piece> pieces;
  for (const auto& p : parts) {
    int64_t len = static_cast<int64_t>(p.shape()[axis]) * inner;
    const double* src = p.data().data();
    double* dst = out.data().data();
    for (int64_t o = 0; o < outer; ++o)
      std::copy(src + o * len, src + (o + 1) * len, dst + o * out_axis_stride + offset);
    pieces.push_back({p.node(), offset, len});
    offset += len;
  }
  if (detail::should_record(rg)) {
    auto on = out.node();
    Tape::current()->record([on, pieces, outer, out_axis_stride]() {
      if (!on->has_grad()) return;
      const double* g = on->grad.data();
      for (const auto& pc : pieces) {
        if (!pc.n->requires_grad) continue;
        pc.n->ensure_grad();
        double* ga = pc.n->grad.data();
        for (int64_t o = 0; o < outer; ++o) {
          const double* gs = g + o * out_axis_stride + pc.offset;
          double* gd = ga + o * pc.len;
          for (int64_t i = 0; i < pc.len; ++i) gd[i] += gs[i];
        }
      }
    });
  }
  return out;
}

inline Tensor slice(const Tensor& a, int axis, int start, int len) {
  const auto& s = a.shape();
  int rank = static_cast<int>(s.size());
  check(axis >= 0 && axis < rank, "slice: bad axis");
  check(start >= 0 && len > 0 && start + len <= s[axis],
        "slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
            ") out of bounds for axis size " + std::to_string(s[axis]));
  std::vector<int> out_shape = s;
  out_shape[axis] = len;
  bool rg = a.requires_grad();
  Tensor out = detail::make_out(out_shape, rg);

  int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= s[d];
  for (int d = axis + 1; d < rank; ++d) inner *= s[d];
  int64_t in_stride = static_cast<int64_t>(s[axis]) * inner;
  int64_t out_stride = static_cast<int64_t>(len) * inner;
  int64_t off = static_cast<int64_t>(start) * inner;

  const double* src = a.data().data();
  double* dst = out.data().data();
  for (int64_t o = 0; o < outer; ++o)
    std::copy(src + o * in_stride + off, src + o * in_stride + off + out_stride,
              dst + o * out_stride);
  if (detail::should_record(rg)) {
    auto an = a.node(), on = out.node();
    Tape::current()->record([an, on, outer, in_stride, out_stride, off]() {
      if (!on->has_grad()) return;
      an->ensure_grad();
      const double* g = on->grad.data();
      double* ga = an->grad.data();
      for (int64_t o = 0; o < outer; ++o) {
        const double* gs = g + o * out_stride;
        double* gd = ga + o * in_stride + off;
        for (int64_t i = 0; i < out_stride; ++i) gd[i] += gs[i];
      }
    });
  }
  return out;
}

// Rows of `table` selected by index; repeats allowed. Backward scatter-adds
// sequentially in batch order.
inline Tensor gather_rows(const Tensor& table, const std::vector<int>& idx) {
  check(table.shape().size() == 2, "gather_rows: table must be rank-2");
  int rows = table.shape()[0], dim = table.shape()[1];
  for (int i : idx)
    check(i >= 0 && i < rows, "gather_rows: index " + std::to_string(i) +
                                  " out of range for " + std::to_string(rows) + " rows");
  bool rg = table.requires_grad();
  Tensor out = detail::make_out({static_cast<int>(idx.size()), dim}, rg);
  const double* src = table.data().data();
  double* dst = out.data().data();
  for (size_t b = 0; b < idx.size(); ++b)
    std::copy(src + static_cast<int64_t>(idx[b]) * dim,
              src + static_cast<int64_t>(idx[b] + 1) * dim, dst + b * dim);
  if (detail::should_record(rg)) {
    auto tn = table.node(), on = out.node();
    Tape::current()->record([tn, on, idx, dim]() {
      if (!on->has_grad()) return;
      tn->ensure_grad();
      const double* g = on->grad.data();
      double* gt = tn->grad.data();
      for (size_t b = 0; b < idx.size(); ++b) {
        double* row = gt + static_cast<int64_t>(idx[b]) * dim;
        const double* gr = g + b * dim;
        for (int d = 0; d < dim; ++d) row[d] += gr[d];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// L2 normalization of the last axis (unit-vector heads)
// ---------------------------------------------------------------------------

inline Tensor l2_normalize(const Tensor& a) {
  const auto& s = a.shape();
  check(!s.empty(), "l2_normalize: rank-0 tensor");
  int dim = s.back();
  int64_t groups = a.size() / dim;
  constexpr double kEps = 1e-12;
  bool rg = a.requires_grad();
  Tensor out = detail::make_out(s, rg);
  const double* pa = a.data().data();
  double* po = out.data().data();
  parallel_for(groups, [&](int64_t gidx) {
    const double* x = pa + gidx * dim;
    double* y = po + gidx * dim;
    double n2 = 0.0;
    for (int d = 0; d < dim; ++d) n2 += x[d] * x[d];
    double n = std::max(std::sqrt(n2), kEps);
    for (int d = 0; d < dim; ++d) y[d] = x[d] / n;
  });
  if (detail::should_record(rg)) {
    auto an = a.node(), on = out.node();
    Tape::current()->record([an, on, groups, dim]() {
      if (!on->has_grad()) return;
      an->ensure_grad();
      const double* pa = an->value.data();
      const double* py = on->value.data();
      const double* g = on->grad.data();
      double* ga = an->grad.data();
      for (int64_t gi = 0; gi < groups; ++gi) {
        const double* x = pa + gi * dim;
        const double* y = py + gi * dim;
        const double* gr = g + gi * dim;
        double* gd = ga + gi * dim;
        double n2 = 0.0;
        for (int d = 0; d < dim; ++d) n2 += x[d] * x[d];
        double n = std::max(std::sqrt(n2), kEps);
        double dot = 0.0;
        for (int d = 0; d < dim; ++d) dot += y[d] * gr[d];
        for (int d = 0; d < dim; ++d) gd[d] += (gr[d] - y[d] * dot) / n;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// 2D convolution (CHW layout), nearest upsample, zero-fill shift. These carry
// the completion networks; backward passes are gather-style per element.
// ---------------------------------------------------------------------------

inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride,
                     int pad) {
  check(x.shape().size() == 3, "conv2d: input must be (C,H,W), got " + shape_str(x.shape()));
  check(w.shape().size() == 4, "conv2d: weight must be (K,C,kh,kw), got " + shape_str(w.shape()));
  int C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
  int K = w.shape()[0], kh = w.shape()[2], kw = w.shape()[3];
  check(w.shape()[1] == C, "conv2d: channel mismatch, input " + shape_str(x.shape()) +
                               " weight " + shape_str(w.shape()));
  check(bias.size() == K, "conv2d: bias size mismatch");
  check(stride >= 1, "conv2d: bad stride");
  int OH = (H + 2 * pad - kh) / stride + 1;
  int OW = (W + 2 * pad - kw) / stride + 1;
  check(OH > 0 && OW > 0, "conv2d: output would be empty");

  bool rg = x.requires_grad() || w.requires_grad() || bias.requires_grad();
  Tensor out = detail::make_out({K, OH, OW}, rg);
  const double* px = x.data().data();
  const double* pw = w.data().data();
  const double* pb = bias.data().data();
  double* po = out.data().data();

  parallel_for(
      K,
      [&](int64_t k) {
        for (int oy = 0; oy < OH; ++oy)
          for (int ox = 0; ox < OW; ++ox) {
            double s = pb[k];
            int iy0 = oy * stride - pad, ix0 = ox * stride - pad;
            for (int c = 0; c < C; ++c) {
              const double* xc = px + static_cast<int64_t>(c) * H * W;
              const double* wc = pw + ((static_cast<int64_t>(k) * C + c) * kh) * kw;
              for (int dy = 0; dy < kh; ++dy) {
                int iy = iy0 + dy;
                if (iy < 0 || iy >= H) continue;
                for (int dx = 0; dx < kw; ++dx) {
                  int ix = ix0 + dx;
                  if (ix < 0 || ix >= W) continue;
                  s += wc[dy * kw + dx] * xc[iy * W + ix];
                }
              }
            }
            po[(k * OH + oy) * OW + ox] = s;
          }
      },
      1);

  if (detail::should_record(rg)) {
    auto xn = x.node(), wn = w.node(), bn = bias.node(), on = out.node();
    Tape::current()->record([xn, wn, bn, on, C, H, W, K, kh, kw, OH, OW, stride, pad]() {
      if (!on->has_grad()) return;
      const double* g = on->grad.data();
      const double* px = xn->value.data();
      const double* pw = wn->value.data();
      if (xn->requires_grad) {
        xn->ensure_grad();
        double* gx = xn->grad.data();
        parallel_for(
            C,
            [&](int64_t c) {
              for (int y = 0; y < H; ++y)
                for (int x2 = 0; x2 < W; ++x2) {
                  double s = 0.0;
                  for (int k = 0; k < K; ++k) {
                    const double* wc = pw + ((static_cast<int64_t>(k) * C + c) * kh) * kw;
                    const double* gk = g + static_cast<int64_t>(k) * OH * OW;
                    for (int dy = 0; dy < kh; ++dy) {
                      int ty = y + pad - dy;
                      if (ty < 0 || ty % stride != 0) continue;
                      int oy = ty / stride;
                      if (oy >= OH) continue;
                      for (int dx = 0; dx < kw; ++dx) {
                        int tx = x2 + pad - dx;
                        if (tx < 0 || tx % stride != 0) continue;
                        int ox = tx / stride;
                        if (ox >= OW) continue;
                        s += wc[dy * kw + dx] * gk[oy * OW + ox];
                      }
                    }
                  }
                  gx[(c * H + y) * W + x2] += s;
                }
            },
            1);
      }
      if (wn->requires_grad) {
        wn->ensure_grad();
        double* gw = wn->grad.data();
        parallel_for(
            K,
            [&](int64_t k) {
              const double* gk = g + static_cast<int64_t>(k) * OH * OW;
              for (int c = 0; c < C; ++c) {
                const double* xc = px + static_cast<int64_t>(c) * H * W;
                for (int dy = 0; dy < kh; ++dy)
                  for (int dx = 0; dx < kw; ++dx) {
                    double s = 0.0;
                    for (int oy = 0; oy < OH; ++oy) {
                      int iy = oy * stride - pad + dy;
                      if (iy < 0 || iy >= H) continue;
                      for (int ox = 0; ox < OW; ++ox) {
                        int ix = ox * stride - pad + dx;
                        if (ix < 0 || ix >= W) continue;
                        s += gk[oy * OW + ox] * xc[iy * W + ix];
                      }
                    }
                    gw[((static_cast<int64_t>(k) * C + c) * kh + dy) * kw + dx] += s;
                  }
              }
            },
            1);
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        double* gb = bn->grad.data();
        for (int k = 0; k < K; ++k) {
          double s = 0.0;
          const double* gk = g + static_cast<int64_t>(k) * OH * OW;
          for (int i = 0; i < OH * OW; ++i) s += gk[i];
          gb[k] += s;
        }
      }
    });
  }
  return out;
}

inline Tensor upsample2x(const Tensor& x) {
  check(x.shape().size() == 3, "upsample2x: input must be (C,H,W)");
  int C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
  bool rg = x.requires_grad();
  Tensor out = detail::make_out({C, 2 * H, 2 * W}, rg);
  const double* px = x.data().data();
  double* po = out.data().data();
  parallel_for(C, [&](int64_t c) {
    const double* xc = px + c * H * W;
    double* oc = po + c * 4 * H * W;
    for (int y = 0; y < 2 * H; ++y)
      for (int x2 = 0; x2 < 2 * W; ++x2) oc[y * 2 * W + x2] = xc[(y / 2) * W + x2 / 2];
  });
  if (detail::should_record(rg)) {
    auto xn = x.node(), on = out.node();
    Tape::current()->record([xn, on, C, H, W]() {
      if (!on->has_grad()) return;
      xn->ensure_grad();
      const double* g = on->grad.data();
      double* gx = xn->grad.data();
      for (int c = 0; c < C; ++c) {
        const double* gc = g + static_cast<int64_t>(c) * 4 * H * W;
        double* gxc = gx + static_cast<int64_t>(c) * H * W;
        for (int y = 0; y < 2 * H; ++y)
          for (int x2 = 0; x2 < 2 * W; ++x2) gxc[(y / 2) * W + x2 / 2] += gc[y * 2 * W + x2];
      }
    });
  }
  return out;
}

// Translates each channel by (dy,dx), zero filled.
inline Tensor shift2d(const Tensor& x, int dy, int dx) {
  check(x.shape().size() == 3, "shift2d: input must be (C,H,W)");
  int C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
  bool rg = x.requires_grad();
  Tensor out = detail::make_out({C, H, W}, rg);
  const double* px = x.data().data();
  double* po = out.data().data();
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < H; ++y)
      for (int x2 = 0; x2 < W; ++x2) {
        int sy = y - dy, sx = x2 - dx;
        po[(static_cast<int64_t>(c) * H + y) * W + x2] =
            (sy >= 0 && sy < H && sx >= 0 && sx < W)
                ? px[(static_cast<int64_t>(c) * H + sy) * W + sx]
                : 0.0;
      }
  if (detail::should_record(rg)) {
    auto xn = x.node(), on = out.node();
    Tape::current()->record([xn, on, C, H, W, dy, dx]() {
      if (!on->has_grad()) return;
      xn->ensure_grad();
      const double* g = on->grad.data();
      double* gx = xn->grad.data();
      for (int c = 0; c < C; ++c)
        for (int y = 0; y < H; ++y)
          for (int x2 = 0; x2 < W; ++x2) {
            int sy = y - dy, sx = x2 - dx;
            if (sy >= 0 && sy < H && sx >= 0 && sx < W)
              gx[(static_cast<int64_t>(c) * H + sy) * W + sx] +=
                  g[(static_cast<int64_t>(c) * H + y) * W + x2];
          }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Operator sugar
// ---------------------------------------------------------------------------

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, double c) { return add_scalar(a, c); }
inline Tensor operator+(double c, const Tensor& a) { return add_scalar(a, c); }
inline Tensor operator-(const Tensor& a, double c) { return add_scalar(a, -c); }
inline Tensor operator-(double c, const Tensor& a) { return add_scalar(neg(a), c); }
inline Tensor operator*(const Tensor& a, double c) { return mul_scalar(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return mul_scalar(a, c); }
inline Tensor operator/(const Tensor& a, double c) { return mul_scalar(a, 1.0 / c); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

}  // namespace ad
}  // namespace cpnerf
