#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "hrlm/errors.hpp"
#include "hrlm/rng.hpp"

namespace hrlm {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

// Boolean selection/attention mask. Plain data, never on the tape.
struct Mask {
  Shape shape;
  std::vector<uint8_t> allow;

  int64_t numel() const { return shape_numel(shape); }
};

template <class S>
class Tape;

namespace detail {

template <class S>
struct TensorImpl {
  Shape shape;
  std::shared_ptr<std::vector<S>> data;
  bool requires_grad = false;
  // Identity on a tape. Valid only while `epoch` matches the active tape;
  // parameters outlive tapes and are re-registered lazily each step.
  int64_t node = -1;
  uint64_t epoch = 0;
};

}  // namespace detail

// Dense row-major tensor handle. Copies share storage; operations are
// functional and never mutate their inputs. 32-bit for training, 64-bit
// for oracle-based gradient checks.
template <class S>
class TensorT {
 public:
  using Impl = detail::TensorImpl<S>;

  TensorT() : impl_(std::make_shared<Impl>()) {
    impl_->data = std::make_shared<std::vector<S>>(1, S(0));
  }

  static TensorT zeros(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), S(0), requires_grad);
  }

  static TensorT filled(Shape shape, S value, bool requires_grad = false) {
    TensorT t;
    t.impl_->shape = std::move(shape);
    t.impl_->data =
        std::make_shared<std::vector<S>>(shape_numel(t.impl_->shape), value);
    t.impl_->requires_grad = requires_grad;
    return t;
  }

  static TensorT from_data(Shape shape, std::vector<S> values,
                           bool requires_grad = false) {
    if (shape_numel(shape) != static_cast<int64_t>(values.size()))
      throw ShapeError("from_data: " + shape_str(shape) + " does not hold " +
                       std::to_string(values.size()) + " values");
    TensorT t;
    t.impl_->shape = std::move(shape);
    t.impl_->data = std::make_shared<std::vector<S>>(std::move(values));
    t.impl_->requires_grad = requires_grad;
    return t;
  }

  static TensorT scalar(S value, bool requires_grad = false) {
    return from_data({}, {value}, requires_grad);
  }

  static TensorT randn(Shape shape, Rng& rng, double stddev = 1.0,
                       bool requires_grad = false) {
    TensorT t = zeros(std::move(shape), requires_grad);
    for (S& v : *t.impl_->data) v = static_cast<S>(rng.normal(0.0, stddev));
    return t;
  }

  const Shape& shape() const { return impl_->shape; }
  int64_t dim(size_t i) const { return impl_->shape.at(i); }
  int64_t rank() const { return static_cast<int64_t>(impl_->shape.size()); }
  int64_t size() const { return shape_numel(impl_->shape); }

  const std::vector<S>& data() const { return *impl_->data; }
  std::vector<S>& mutable_data() { return *impl_->data; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool rg) { impl_->requires_grad = rg; }
  int64_t node_id() const { return impl_->node; }

  S item() const {
    if (size() != 1)
      throw ContractError("item: tensor " + shape_str(shape()) +
                          " is not a scalar");
    return (*impl_->data)[0];
  }

  std::shared_ptr<Impl> impl_;
};

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;

// Reverse-mode tape. One tape per optimization step; records are replayed
// in reverse creation order, which is a valid topological order because
// every op's inputs exist before the op itself.
template <class S>
class Tape {
 public:
  Tape() {
    if (active_) throw ContractError("tape: a tape is already active on this thread");
    epoch_ = ++epoch_counter_;
    active_ = this;
  }
  ~Tape() { active_ = nullptr; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return active_; }

  bool recording() const { return pause_depth_ == 0; }
  void pause() { ++pause_depth_; }
  void resume() { --pause_depth_; }
  uint64_t epoch() const { return epoch_; }

  // Register a tensor as a leaf (or return its existing id on this tape).
  int64_t ensure_node(const TensorT<S>& t) {
    auto& impl = *t.impl_;
    if (impl.epoch == epoch_ && impl.node >= 0) return impl.node;
    impl.epoch = epoch_;
    impl.node = next_node_++;
    return impl.node;
  }

  int64_t assign_output_node(const TensorT<S>& t) {
    t.impl_->epoch = epoch_;
    t.impl_->node = next_node_++;
    return t.impl_->node;
  }

  void record(const char* op, std::function<void(Tape&)> fn) {
    records_.push_back({op, std::move(fn)});
  }

  // Gradient buffer access during backward.
  const std::vector<S>* find_grad(int64_t node) const {
    if (node < 0 || node >= static_cast<int64_t>(grads_.size())) return nullptr;
    if (grads_[node].empty()) return nullptr;
    return &grads_[node];
  }

  std::vector<S>& grad_buffer(int64_t node, int64_t numel) {
    if (node >= static_cast<int64_t>(grads_.size())) grads_.resize(node + 1);
    if (grads_[node].empty()) grads_[node].assign(numel, S(0));
    return grads_[node];
  }

  void backward(const TensorT<S>& loss) {
    if (loss.size() != 1)
      throw ContractError("backward: loss must be scalar, got " +
                          shape_str(loss.shape()));
    if (loss.impl_->epoch != epoch_ || loss.impl_->node < 0)
      throw ContractError("backward: loss is not on this tape");
    grads_.assign(next_node_, {});
    grad_buffer(loss.impl_->node, 1)[0] = S(1);
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) it->fn(*this);
    backward_done_ = true;
  }

  bool backward_done() const { return backward_done_; }

  // Accumulated gradient for a tensor after backward. Tensors that never
  // reached the loss report zeros of their own size.
  std::vector<S> grad(const TensorT<S>& t) const {
    if (!backward_done_)
      throw ContractError("grad: backward has not run on this tape");
    if (t.impl_->epoch == epoch_ && t.impl_->node >= 0) {
      const std::vector<S>* g = find_grad(t.impl_->node);
      if (g) return *g;
    }
    return std::vector<S>(t.size(), S(0));
  }

  size_t record_count() const { return records_.size(); }

 private:
  struct Record {
    const char* op;
    std::function<void(Tape&)> fn;
  };

  std::vector<Record> records_;
  std::vector<std::vector<S>> grads_;
  int64_t next_node_ = 0;
  uint64_t epoch_ = 0;
  int pause_depth_ = 0;
  bool backward_done_ = false;

  inline static thread_local Tape* active_ = nullptr;
  inline static thread_local uint64_t epoch_counter_ = 0;
};

// RAII guard: ops executed inside run pure value computations (no records,
// outputs do not require grad). Safe with no active tape.
template <class S>
class GradPause {
 public:
  GradPause() : tape_(Tape<S>::active()) {
    if (tape_) tape_->pause();
  }
  ~GradPause() {
    if (tape_) tape_->resume();
  }
  GradPause(const GradPause&) = delete;
  GradPause& operator=(const GradPause&) = delete;

 private:
  Tape<S>* tape_;
};

namespace detail {

template <class S>
inline void check_finite(const std::vector<S>& v, const char* op) {
  for (const S x : v) {
    if (!std::isfinite(static_cast<double>(x))) throw NonFiniteError(op);
  }
}

// Returns the recording tape if any listed input requires grad, else null.
template <class S>
inline Tape<S>* tape_for(std::initializer_list<const TensorT<S>*> ins) {
  Tape<S>* t = Tape<S>::active();
  if (!t || !t->recording()) return nullptr;
  for (const TensorT<S>* x : ins)
    if (x->impl_->requires_grad) return t;
  return nullptr;
}

// Limited broadcasting: identical shapes, a trailing-suffix operand
// (e.g. [d] against [t,d]) or a size-1 last dimension (e.g. [t,1]
// against [t,d]). Anything else is a shape error.
enum class BcastKind { kNone, kSuffix, kLastDim };

struct BcastPlan {
  bool swap = false;  // true when the first operand is the broadcast one
  BcastKind kind = BcastKind::kNone;
  int64_t big_numel = 0;
  int64_t small_numel = 0;
  int64_t last_dim = 1;
};

inline bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  const size_t off = big.size() - small.size();
  for (size_t i = 0; i < small.size(); ++i)
    if (small[i] != big[off + i]) return false;
  return true;
}

inline bool is_lastdim_one(const Shape& small, const Shape& big) {
  if (small.size() != big.size() || small.empty()) return false;
  if (small.back() != 1) return false;
  for (size_t i = 0; i + 1 < small.size(); ++i)
    if (small[i] != big[i]) return false;
  return true;
}

inline BcastPlan plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  BcastPlan p;
  if (a == b) {
    p.kind = BcastKind::kNone;
    p.big_numel = shape_numel(a);
    p.small_numel = p.big_numel;
    return p;
  }
  const auto make = [&](const Shape& big, const Shape& small, bool swap) {
    p.swap = swap;
    p.big_numel = shape_numel(big);
    p.small_numel = shape_numel(small);
    p.last_dim = big.empty() ? 1 : big.back();
    if (is_suffix(small, big)) {
      p.kind = BcastKind::kSuffix;
      return true;
    }
    if (is_lastdim_one(small, big)) {
      p.kind = BcastKind::kLastDim;
      return true;
    }
    return false;
  };
  if (shape_numel(a) >= shape_numel(b)) {
    if (make(a, b, false)) return p;
  } else {
    if (make(b, a, true)) return p;
  }
  throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " +
                   shape_str(b) + " are not broadcast-compatible "
                   "(equal, trailing suffix, or size-1 last dim only)");
}

// Flat index of the broadcast operand for output element i.
inline int64_t bcast_index(const BcastPlan& p, int64_t i) {
  switch (p.kind) {
    case BcastKind::kNone:
      return i;
    case BcastKind::kSuffix:
      return i % p.small_numel;
    case BcastKind::kLastDim:
      return i / p.last_dim;
  }
  return i;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops: add, sub, mul (with limited broadcasting).
// ---------------------------------------------------------------------------

namespace detail {

// Generic binary elementwise with partials da = dfa(a,b)*g, db = dfb(a,b)*g.
template <class S, class FwdFn, class DaFn, class DbFn>
TensorT<S> binary_op(const char* name, const TensorT<S>& a, const TensorT<S>& b,
                     FwdFn fwd, DaFn dfa, DbFn dfb) {
  const BcastPlan plan = plan_broadcast(a.shape(), b.shape(), name);
  const TensorT<S>& big = plan.swap ? b : a;
  const TensorT<S>& small = plan.swap ? a : b;

  TensorT<S> out = TensorT<S>::zeros(big.shape());
  const auto& bd = big.data();
  const auto& sd = small.data();
  auto& od = out.mutable_data();
  const int64_t n = out.size();
  if (plan.kind == BcastKind::kNone) {
    for (int64_t i = 0; i < n; ++i)
      od[i] = plan.swap ? fwd(sd[i], bd[i]) : fwd(bd[i], sd[i]);
  } else {
    for (int64_t i = 0; i < n; ++i) {
      const S sv = sd[bcast_index(plan, i)];
      od[i] = plan.swap ? fwd(sv, bd[i]) : fwd(bd[i], sv);
    }
  }
  check_finite(od, name);

  if (Tape<S>* tape = tape_for<S>({&a, &b})) {
    const int64_t na = a.impl_->requires_grad ? tape->ensure_node(a) : -1;
    const int64_t nb = b.impl_->requires_grad ? tape->ensure_node(b) : -1;
    const int64_t no = tape->assign_output_node(out);
    out.impl_->requires_grad = true;
    auto ai = a.impl_;
    auto bi = b.impl_;
    const int64_t asz = a.size(), bsz = b.size();
    tape->record(name, [=](Tape<S>& t) {
      const std::vector<S>* g = t.find_grad(no);
      if (!g) return;
      const auto& av = *ai->data;
      const auto& bv = *bi->data;
      std::vector<S>* ga = na >= 0 ? &t.grad_buffer(na, asz) : nullptr;
      std::vector<S>* gb = nb >= 0 ? &t.grad_buffer(nb, bsz) : nullptr;
      const int64_t nn = static_cast<int64_t>(g->size());
      for (int64_t i = 0; i < nn; ++i) {
        int64_t ia, ib;
        if (plan.kind == BcastKind::kNone) {
          ia = ib = i;
        } else if (!plan.swap) {
          ia = i;
          ib = bcast_index(plan, i);
        } else {
          ia = bcast_index(plan, i);
          ib = i;
        }
        const S gi = (*g)[i];
        if (ga) (*ga)[ia] += dfa(av[ia], bv[ib]) * gi;
        if (gb) (*gb)[ib] += dfb(av[ia], bv[ib]) * gi;
      }
    });
  }
  return out;
}

}  // namespace detail

template <class S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
  return detail::binary_op<S>(
      "add", a, b, [](S x, S y) { return x + y; },
      [](S, S) { return S(1); }, [](S, S) { return S(1); });
}

template <class S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
  return detail::binary_op<S>(
      "sub", a, b, [](S x, S y) { return x - y; },
      [](S, S) { return S(1); }, [](S, S) { return S(-1); });
}

template <class S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
  return detail::binary_op<S>(
      "mul", a, b, [](S x, S y) { return x * y; },
      [](S, S y) { return y; }, [](S x, S) { return x; });
}

// ---------------------------------------------------------------------------
// Elementwise unary ops.
// ---------------------------------------------------------------------------

namespace detail {

template <class S, class FwdFn, class GradFn>
TensorT<S> unary_op(const char* name, const TensorT<S>& x, FwdFn fwd,
                    GradFn dfx) {
  TensorT<S> out = TensorT<S>::zeros(x.shape());
  const auto& xd = x.data();
  auto& od = out.mutable_data();
  const int64_t n = x.size();
  for (int64_t i = 0; i < n; ++i) od[i] = fwd(xd[i]);
  check_finite(od, name);

  if (Tape<S>* tape = tape_for<S>({&x})) {
    const int64_t nx = tape->ensure_node(x);
    const int64_t no = tape->assign_output_node(out);
    out.impl_->requires_grad = true;
    auto xi = x.impl_;
    auto oi = out.impl_;
    tape->record(name, [=](Tape<S>& t) {
      const std::vector<S>* g = t.find_grad(no);
      if (!g) return;
      std::vector<S>& gx = t.grad_buffer(nx, n);
      const auto& xv = *xi->data;
      const auto& ov = *oi->data;
      for (int64_t i = 0; i < n; ++i) gx[i] += dfx(xv[i], ov[i]) * (*g)[i];
    });
  }
  return out;
}

}  // namespace detail

template <class S>
TensorT<S> sigmoid(const TensorT<S>& x) {
  return detail::unary_op<S>(
      "sigmoid", x,
      [](S v) {
        return v >= S(0) ? S(1) / (S(1) + std::exp(-v))
                         : S(std::exp(v) / (S(1) + std::exp(v)));
      },
      [](S, S o) { return o * (S(1) - o); });
}

template <class S>
TensorT<S> silu(const TensorT<S>& x) {
  return detail::unary_op<S>(
      "silu", x,
      [](S v) {
        const S s = v >= S(0) ? S(1) / (S(1) + std::exp(-v))
                              : S(std::exp(v) / (S(1) + std::exp(v)));
        return v * s;
      },
      [](S v, S) {
        const S s = v >= S(0) ? S(1) / (S(1) + std::exp(-v))
                              : S(std::exp(v) / (S(1) + std::exp(v)));
        return s + v * s * (S(1) - s);
      });
}

template <class S>
TensorT<S> scale(const TensorT<S>& x, S c) {
  return detail::unary_op<S>(
      "scale", x, [c](S v) { return c * v; }, [c](S, S) { return c; });
}

template <class S>
TensorT<S> add_scalar(const TensorT<S>& x, S c) {
  return detail::unary_op<S>(
      "add_scalar", x, [c](S v) { return v + c; }, [](S, S) { return S(1); });
}

template <class S>
TensorT<S> rsqrt(const TensorT<S>& x) {
  return detail::unary_op<S>(
      "rsqrt", x, [](S v) { return S(1) / std::sqrt(v); },
      [](S v, S o) { return S(-0.5) * o / v; });
}

// ---------------------------------------------------------------------------
// Reductions.
// ---------------------------------------------------------------------------

// Mean over the last dimension, keeping it as size 1.
template <class S>
TensorT<S> row_mean(const TensorT<S>& x) {
  if (x.rank() < 1) throw ShapeError("row_mean: needs rank >= 1");
  const int64_t d = x.shape().back();
  Shape out_shape = x.shape();
  out_shape.back() = 1;
  TensorT<S> out = TensorT<S>::zeros(out_shape);
  const auto& xd = x.data();
  auto& od = out.mutable_data();
  const int64_t rows = out.size();
  for (int64_t r = 0; r < rows; ++r) {
    S acc = S(0);
    const S* p = xd.data() + r * d;
    for (int64_t j = 0; j < d; ++j) acc += p[j];
    od[r] = acc / static_cast<S>(d);
  }
  detail::check_finite(od, "row_mean");

  if (Tape<S>* tape = detail::tape_for<S>({&x})) {
    const int64_t nx = tape->ensure_node(x);
    const int64_t no = tape->assign_output_node(out);
    out.impl_->requires_grad = true;
    const int64_t n = x.size();
    tape->record("row_mean", [=](Tape<S>& t) {
      const std::vector<S>* g = t.find_grad(no);
      if (!g) return;
      std::vector<S>& gx = t.grad_buffer(nx, n);
      const S inv = S(1) / static_cast<S>(d);
      for (int64_t r = 0; r < rows; ++r) {
        const S gr = (*g)[r] * inv;
        S* p = gx.data() + r * d;
        for (int64_t j = 0; j < d; ++j) p[j] += gr;
      }
    });
  }
  return out;
}

// Sum of all entries -> scalar.
template <class S>
TensorT<S> sum(const TensorT<S>& x) {
  TensorT<S> out = TensorT<S>::zeros({});
  const auto& xd = x.data();
  S acc = S(0);
  for (const S v : xd) acc += v;
  out.mutable_data()[0] = acc;
  detail::check_finite(out.data(), "sum");

  if (Tape<S>* tape = detail::tape_for<S>({&x})) {
    const int64_t nx = tape->ensure_node(x);
    const int64_t no = tape->assign_output_node(out);
    out.impl_->requires_grad = true;
    const int64_t n = x.size();
    tape->record("sum", [=](Tape<S>& t) {
      const std::vector<S>* g = t.find_grad(no);
      if (!g) return;
      std::vector<S>& gx = t.grad_buffer(nx, n);
      const S gv = (*g)[0];
      for (int64_t i = 0; i < n; ++i) gx[i] += gv;
    });
  }
  return out;
}

template <class S>
TensorT<S> mean(const TensorT<S>& x) {
  return scale(sum(x), S(1) / static_cast<S>(x.size()));
}

// ---------------------------------------------------------------------------
// Matrix multiply (2-D), the workhorse.
// ---------------------------------------------------------------------------

namespace detail {

// C[m,n] += A[m,k] * B[k,n]; ikj order keeps the inner loop contiguous.
template <class S>
void matmul_accum(const S* a, const S* b, S* c, int64_t m, int64_t k,
                  int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const S* arow = a + i * k;
    S* crow = c + i * n;
    for (int64_t kk = 0; kk < k; ++kk) {
      const S av = arow[kk];
      if (av == S(0)) continue;
      const S* brow = b + kk * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,k] += G[m,n] * B^T where B is [k,n]: dot of contiguous rows.
template <class S>
void matmul_accum_bt(const S* g, const S* b, S* c, int64_t m, int64_t n,
                     int64_t k) {
  for (int64_t i = 0; i < m; ++i) {
    const S* grow = g + i * n;
    S* crow = c + i * k;
    for (int64_t kk = 0; kk < k; ++kk) {
      const S* brow = b + kk * n;
      S acc = S(0);
      for (int64_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
      crow[kk] += acc;
    }
  }
}

// C[k,n] += A^T * G where A is [m,k], G is [m,n].
template <class S>
void matmul_accum_at(const S* a, const S* g, S* c, int64_t m, int64_t k,
                     int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const S* arow = a + i * k;
    const S* grow = g + i * n;
    for (int64_t kk = 0; kk < k; ++kk) {
      const S av = arow[kk];
      if (av == S(0)) continue;
      S* crow = c + kk * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * grow[j];
    }
  }
}

}  // namespace detail

template <class S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeError("matmul: expects rank-2 operands, got " +
                     shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const int64_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2)
    throw ShapeError("matmul: inner extents disagree: " + shape_str(a.shape()) +
                     " x " + shape_str(b.shape()));
  TensorT<S> out = TensorT<S>::zeros({m, n});
  detail::matmul_accum(a.data().data(), b.data().data(),
                       out.mutable_data().data(), m, k, n);
  detail::check_finite(out.data(), "matmul");

  if (Tape<S>* tape = detail::tape_for<S>({&a, &b})) {
    const int64_t na = a.impl_->requires_grad ? tape->ensure_node(a) : -1;
    const int64_t nb = b.impl_->requires_grad ? tape->ensure_node(b) : -1;
    const int64_t no = tape->assign_output_node(out);
    out.impl_->requires_grad = true;
    auto ai = a.impl_;
    auto bi = b.impl_;
    tape->record("matmul", [=](Tape<S>& t) {
      const std::vector<S>* g = t.find_grad(no);
      if (!g) return;
      if (na >= 0) {
        std::vector<S>& ga = t.grad_buffer(na, m * k);
        detail::matmul_accum_bt(g->data(), bi->data->data(), ga.data(), m, n, k);
      }
      if (nb >= 0) {
        std::vector<S>& gb = t.grad_buffer(nb, k * n);
        detail::matmul_accum_at(ai->data->data(), g->data(), gb.data(), m, k, n);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Masked softmax over the last dimension. Masked positions get probability
// exactly 0; each row must have at least one allowed position.
// ---------------------------------------------------------------------------

template <class S>
TensorT<S> masked_softmax(const TensorT<S>& logits, const Mask& mask) {
  if (logits.rank() < 1) throw ShapeError("masked_softmax: needs rank >= 1");
  const bool same = mask.shape == logits.shape();
  const bool suffix = detail::is_suffix(mask.shape, logits.shape());
  if (!same && !suffix)
    throw ShapeError("masked_softmax: mask " + shape_str(mask.shape) +
                     " does not match logits " + shape_str(logits.shape()));
  const int64_t d = logits.shape().back();
  const int64_t rows = logits.size() / d;
  const int64_t mask_numel = mask.numel();

  TensorT<S> out = TensorT<S>::zeros(logits.shape());
  const auto& xd = logits.data();
  auto& od = out.mutable_data();
  for (int64_t r = 0; r < rows; ++r) {
    const S* x = xd.data() + r * d;
    S* o = od.data() + r * d;
    const int64_t moff = (r * d) % mask_numel;
    const uint8_t* mk = mask.allow.data() + moff;
    S mx = -std::numeric_limits<S>::infinity();
    int64_t allowed = 0;
    for (int64_t j = 0; j < d; ++j) {
      if (mk[j]) {
        ++allowed;
        if (x[j] > mx) mx = x[j];
      }
    }
    if (allowed == 0)
      throw ContractError("masked_softmax: fully masked row " +
                          std::to_string(r));
    S denom = S(0);
    for (int64_t j = 0; j < d; ++j) {
      if (mk[j]) {
        o[j] = std::exp(x[j] - mx);
        denom += o[j];
      } else {
        o[j] = S(0);
      }
    }
    const S inv = S(1) / denom;
    for (int64_t j = 0; j < d; ++j)
      if (mk[j]) o[j] *= inv;
  }
  detail::check_finite(od, "masked_softmax");

  if (Tape<S>* tape = detail::tape_for<S>({&logits})) {
    const int64_t nx = tape->ensure_node(logits);
    const int64_t no = tape->assign_output_node(out);
    out.impl_->requires_grad = true;
    auto oi = out.impl_;
    tape->record("masked_softmax", [=](Tape<S>& t) {
      const std::vector<S>* g = t.find_grad(no);
      if (!g) return;
      std::vector<S>& gx = t.grad_buffer(nx, rows * d);
      const auto& ov = *oi->data;
      for (int64_t r = 0; r < rows; ++r) {
        const S* p = ov.data() + r * d;
        const S* gr = g->data() + r * d;
        S* gxr = gx.data() + r * d;
        S dot = S(0);
        for (int64_t j = 0; j < d; ++j) dot += gr[j] * p[j];
        for (int64_t j = 0; j < d; ++j) gxr[j] += p[j] * (gr[j] - dot);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// detach: value-transparent stop-gradient.
// ---------------------------------------------------------------------------

template <class S>
TensorT<S> detach(const TensorT<S>& x) {
  TensorT<S> out;
  out.impl_->shape = x.shape();
  out.impl_->data = x.impl_->data;  // storage is immutable once produced
  out.impl_->requires_grad = false;
  return out;
}

// Same data, new shape (numel must match). Gradient passes through.
template <class S>
TensorT<S> reshape(const TensorT<S>& x, Shape new_shape) {
  if (shape_numel(new_shape) != x.size())
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " +
                     shape_str(new_shape) + " changes element count");
  TensorT<S> out;
  out.impl_->shape = std::move(new_shape);
  out.impl_->data = x.impl_->data;
  if (Tape<S>* tape = detail::tape_for<S>({&x})) {
    const int64_t nx = tape->ensure_node(x);
    const int64_t no = tape->assign_output_node(out);
    out.impl_->requires_grad = true;
    const int64_t n = x.size();
    tape->record("reshape", [=](Tape<S>& t) {
      const std::vector<S>* g = t.find_grad(no);
      if (!g) return;
      std::vector<S>& gx = t.grad_buffer(nx, n);
      for (int64_t i = 0; i < n; ++i) gx[i] += (*g)[i];
    });
  }
  return out;
}

// Repeat a vector [d] over `rows` rows -> [rows, d].
template <class S>
TensorT<S> broadcast_rows(const TensorT<S>& v, int64_t rows) {
  if (v.rank() != 1)
    throw ShapeError("broadcast_rows: expects rank-1, got " +
                     shape_str(v.shape()));
  const int64_t d = v.dim(0);
  TensorT<S> out = TensorT<S>::zeros({rows, d});
  const auto& vd = v.data();
  auto& od = out.mutable_data();
  for (int64_t r = 0; r < rows; ++r)
    std::copy(vd.begin(), vd.end(), od.begin() + r * d);
  detail::check_finite(od, "broadcast_rows");

  if (Tape<S>* tape = detail::tape_for<S>({&v})) {
    const int64_t nv = tape->ensure_node(v);
    const int64_t no = tape->assign_output_node(out);
    out.impl_->requires_grad = true;
    tape->record("broadcast_rows", [=](Tape<S>& t) {
      const std::vector<S>* g = t.find_grad(no);
      if (!g) return;
      std::vector<S>& gv = t.grad_buffer(nv, d);
      for (int64_t r = 0; r < rows; ++r) {
        const S* gr = g->data() + r * d;
        for (int64_t j = 0; j < d; ++j) gv[j] += gr[j];
      }
    });
  }
  return out;
}

}  // namespace hrlm
