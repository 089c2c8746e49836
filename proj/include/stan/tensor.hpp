#pragma once

// Dense row-major tensors with reverse-mode differentiation.
//
// Every forward op optionally records a backward closure on the ambient
// thread-local tape (TapeT<S>::Scope).  With no active tape the same ops run
// as plain numeric kernels and outputs do not track gradients.  Scalar type
// is a template parameter: float for production, double for oracle and
// finite-difference tests.

#include <algorithm>
#include <cmath>
#include <functional>
#include <initializer_list>
#include <memory>
#include <vector>

#include "stan/common.hpp"

namespace stan {

template <class S>
struct TensorStorage {
  Shape shape;
  std::vector<S> data;
  std::vector<S> grad;  // allocated iff requires_grad
  bool requires_grad = false;
};

template <class S>
class TensorT {
 public:
  TensorT() = default;

  static TensorT zeros(Shape shape) {
    TensorT t;
    t.st_ = std::make_shared<TensorStorage<S>>();
    t.st_->shape = std::move(shape);
    t.st_->data.assign(shape_numel(t.st_->shape), S(0));
    return t;
  }

  static TensorT full(Shape shape, S v) {
    TensorT t = zeros(std::move(shape));
    std::fill(t.st_->data.begin(), t.st_->data.end(), v);
    return t;
  }

  static TensorT from(Shape shape, std::vector<S> values) {
    if (shape_numel(shape) != static_cast<int64_t>(values.size()))
      throw ShapeError("tensor: " + shape_str(shape) + " does not hold " +
                       std::to_string(values.size()) + " values");
    TensorT t;
    t.st_ = std::make_shared<TensorStorage<S>>();
    t.st_->shape = std::move(shape);
    t.st_->data = std::move(values);
    return t;
  }

  static TensorT scalar(S v) { return from({1}, {v}); }

  static TensorT uniform(Shape shape, S lo, S hi, Rng& rng) {
    TensorT t = zeros(std::move(shape));
    for (auto& v : t.st_->data) v = static_cast<S>(rng.uniform(lo, hi));
    return t;
  }

  bool defined() const { return st_ != nullptr; }
  const Shape& shape() const { return st_->shape; }
  int rank() const { return static_cast<int>(st_->shape.size()); }
  int dim(int i) const { return st_->shape[i]; }
  int64_t numel() const { return static_cast<int64_t>(st_->data.size()); }

  S* data() { return st_->data.data(); }
  const S* data() const { return st_->data.data(); }
  S& at(int64_t i) { return st_->data[i]; }
  S at(int64_t i) const { return st_->data[i]; }

  bool requires_grad() const { return st_ && st_->requires_grad; }

  TensorT& set_requires_grad(bool on) {
    st_->requires_grad = on;
    if (on)
      st_->grad.assign(st_->data.size(), S(0));
    else
      st_->grad.clear();
    return *this;
  }

  S* grad() { return st_->requires_grad ? st_->grad.data() : nullptr; }
  const S* grad() const { return st_->requires_grad ? st_->grad.data() : nullptr; }

  void zero_grad() {
    if (st_ && st_->requires_grad) std::fill(st_->grad.begin(), st_->grad.end(), S(0));
  }

  TensorT clone() const {
    TensorT t;
    t.st_ = std::make_shared<TensorStorage<S>>();
    t.st_->shape = st_->shape;
    t.st_->data = st_->data;
    return t;
  }

  std::shared_ptr<TensorStorage<S>> storage() const { return st_; }

 private:
  std::shared_ptr<TensorStorage<S>> st_;
};

// ---------------------------------------------------------------------------
// Computation tape.  Ops append backward closures in execution order; the
// backward pass replays them exactly once, in reverse.  A tape is confined to
// one thread of control; Scope installs it as the ambient tape.
// ---------------------------------------------------------------------------

template <class S>
class TapeT {
 public:
  void record(std::function<void()> fn) { ops_.push_back(std::move(fn)); }
  size_t size() const { return ops_.size(); }
  void clear() { ops_.clear(); }

  void run_backward() {
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
  }

  static TapeT* active() { return active_; }

  class Scope {
   public:
    Scope() : prev_(active_) { active_ = &tape_; }
    ~Scope() { active_ = prev_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;
    TapeT& tape() { return tape_; }

   private:
    TapeT tape_;
    TapeT* prev_;
  };

 private:
  std::vector<std::function<void()>> ops_;
  inline static thread_local TapeT* active_ = nullptr;
};

/// Seeds grad(loss) = 1 and replays the ambient tape backwards, accumulating
/// gradients (by sum) into every tracked tensor reachable from the loss.
template <class S>
void backward(TensorT<S>& loss) {
  if (loss.numel() != 1) throw ValueError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  TapeT<S>* tape = TapeT<S>::active();
  if (!tape) throw ValueError("backward: no active tape");
  if (!loss.requires_grad()) throw ValueError("backward: loss does not track gradients");
  loss.grad()[0] += S(1);
  tape->run_backward();
}

// ---------------------------------------------------------------------------
// Op plumbing
// ---------------------------------------------------------------------------

namespace detail {

template <class S>
inline bool tracking(std::initializer_list<const TensorT<S>*> inputs) {
  if (!TapeT<S>::active()) return false;
  for (const TensorT<S>* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

template <class S>
inline void track_output(TensorT<S>& out) {
  out.set_requires_grad(true);
}

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

inline std::vector<int64_t> row_major_strides(const Shape& s) {
  std::vector<int64_t> st(s.size());
  int64_t acc = 1;
  for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
    st[i] = acc;
    acc *= s[i];
  }
  return st;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <class S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
  detail::check(a.shape() == b.shape(),
                "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  TensorT<S> y = TensorT<S>::zeros(a.shape());
  const S* ad = a.data();
  const S* bd = b.data();
  S* yd = y.data();
  const int64_t n = y.numel();
  for (int64_t i = 0; i < n; ++i) yd[i] = ad[i] + bd[i];
  if (detail::tracking<S>({&a, &b})) {
    detail::track_output(y);
    auto as = a.storage(), bs = b.storage(), ys = y.storage();
    TapeT<S>::active()->record([as, bs, ys, n] {
      if (as->requires_grad)
        for (int64_t i = 0; i < n; ++i) as->grad[i] += ys->grad[i];
      if (bs->requires_grad)
        for (int64_t i = 0; i < n; ++i) bs->grad[i] += ys->grad[i];
    });
  }
  return y;
}

template <class S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
  detail::check(a.shape() == b.shape(),
                "sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  TensorT<S> y = TensorT<S>::zeros(a.shape());
  const S* ad = a.data();
  const S* bd = b.data();
  S* yd = y.data();
  const int64_t n = y.numel();
  for (int64_t i = 0; i < n; ++i) yd[i] = ad[i] - bd[i];
  if (detail::tracking<S>({&a, &b})) {
    detail::track_output(y);
    auto as = a.storage(), bs = b.storage(), ys = y.storage();
    TapeT<S>::active()->record([as, bs, ys, n] {
      if (as->requires_grad)
        for (int64_t i = 0; i < n; ++i) as->grad[i] += ys->grad[i];
      if (bs->requires_grad)
        for (int64_t i = 0; i < n; ++i) bs->grad[i] -= ys->grad[i];
    });
  }
  return y;
}

template <class S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
  detail::check(a.shape() == b.shape(),
                "mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  TensorT<S> y = TensorT<S>::zeros(a.shape());
  const S* ad = a.data();
  const S* bd = b.data();
  S* yd = y.data();
  const int64_t n = y.numel();
  for (int64_t i = 0; i < n; ++i) yd[i] = ad[i] * bd[i];
  if (detail::tracking<S>({&a, &b})) {
    detail::track_output(y);
    auto as = a.storage(), bs = b.storage(), ys = y.storage();
    TapeT<S>::active()->record([as, bs, ys, n] {
      if (as->requires_grad)
        for (int64_t i = 0; i < n; ++i) as->grad[i] += ys->grad[i] * bs->data[i];
      if (bs->requires_grad)
        for (int64_t i = 0; i < n; ++i) bs->grad[i] += ys->grad[i] * as->data[i];
    });
  }
  return y;
}

template <class S>
TensorT<S> scale(const TensorT<S>& a, S c) {
  TensorT<S> y = TensorT<S>::zeros(a.shape());
  const S* ad = a.data();
  S* yd = y.data();
  const int64_t n = y.numel();
  for (int64_t i = 0; i < n; ++i) yd[i] = ad[i] * c;
  if (detail::tracking<S>({&a})) {
    detail::track_output(y);
    auto as = a.storage(), ys = y.storage();
    TapeT<S>::active()->record([as, ys, c, n] {
      if (as->requires_grad)
        for (int64_t i = 0; i < n; ++i) as->grad[i] += ys->grad[i] * c;
    });
  }
  return y;
}

template <class S>
TensorT<S> add_scalar(const TensorT<S>& a, S c) {
  TensorT<S> y = TensorT<S>::zeros(a.shape());
  const S* ad = a.data();
  S* yd = y.data();
  const int64_t n = y.numel();
  for (int64_t i = 0; i < n; ++i) yd[i] = ad[i] + c;
  if (detail::tracking<S>({&a})) {
    detail::track_output(y);
    auto as = a.storage(), ys = y.storage();
    TapeT<S>::active()->record([as, ys, n] {
      if (as->requires_grad)
        for (int64_t i = 0; i < n; ++i) as->grad[i] += ys->grad[i];
    });
  }
  return y;
}

template <class S>
TensorT<S> relu(const TensorT<S>& a) {
  TensorT<S> y = TensorT<S>::zeros(a.shape());
  const S* ad = a.data();
  S* yd = y.data();
  const int64_t n = y.numel();
  for (int64_t i = 0; i < n; ++i) yd[i] = ad[i] > S(0) ? ad[i] : S(0);
  if (detail::tracking<S>({&a})) {
    detail::track_output(y);
    auto as = a.storage(), ys = y.storage();
    TapeT<S>::active()->record([as, ys, n] {
      if (!as->requires_grad) return;
      for (int64_t i = 0; i < n; ++i)
        if (as->data[i] > S(0)) as->grad[i] += ys->grad[i];
    });
  }
  return y;
}

template <class S>
TensorT<S> sigmoid(const TensorT<S>& a) {
  TensorT<S> y = TensorT<S>::zeros(a.shape());
  const S* ad = a.data();
  S* yd = y.data();
  const int64_t n = y.numel();
  for (int64_t i = 0; i < n; ++i) {
    // Split on sign so exp never overflows.
    const S x = ad[i];
    yd[i] = x >= S(0) ? S(1) / (S(1) + std::exp(-x))
                      : std::exp(x) / (S(1) + std::exp(x));
  }
  if (detail::tracking<S>({&a})) {
    detail::track_output(y);
    auto as = a.storage(), ys = y.storage();
    TapeT<S>::active()->record([as, ys, n] {
      if (!as->requires_grad) return;
      for (int64_t i = 0; i < n; ++i) {
        const S s = ys->data[i];
        as->grad[i] += ys->grad[i] * s * (S(1) - s);
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// softmax over the last dimension, max-subtracted
// ---------------------------------------------------------------------------

template <class S>
TensorT<S> softmax_last_dim(const TensorT<S>& a) {
  detail::check(a.rank() >= 1 && a.dim(a.rank() - 1) >= 1, "softmax: empty last dim");
  const int D = a.dim(a.rank() - 1);
  const int64_t rows = a.numel() / D;
  TensorT<S> y = TensorT<S>::zeros(a.shape());
  const S* ad = a.data();
  S* yd = y.data();
  for (int64_t r = 0; r < rows; ++r) {
    const S* in = ad + r * D;
    S* out = yd + r * D;
    S m = in[0];
    for (int j = 1; j < D; ++j) m = std::max(m, in[j]);
    S z = S(0);
    for (int j = 0; j < D; ++j) {
      out[j] = std::exp(in[j] - m);
      z += out[j];
    }
    for (int j = 0; j < D; ++j) out[j] /= z;
  }
  if (detail::tracking<S>({&a})) {
    detail::track_output(y);
    auto as = a.storage(), ys = y.storage();
    TapeT<S>::active()->record([as, ys, rows, D] {
      if (!as->requires_grad) return;
      for (int64_t r = 0; r < rows; ++r) {
        const S* p = ys->data.data() + r * D;
        const S* gy = ys->grad.data() + r * D;
        S* gx = as->grad.data() + r * D;
        S dot = S(0);
        for (int j = 0; j < D; ++j) dot += gy[j] * p[j];
        for (int j = 0; j < D; ++j) gx[j] += p[j] * (gy[j] - dot);
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// matmul (2-D), bias row add
// ---------------------------------------------------------------------------

template <class S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
  detail::check(a.rank() == 2 && b.rank() == 2,
                "matmul: expects rank-2 operands, got " + shape_str(a.shape()) + " and " +
                    shape_str(b.shape()));
  detail::check(a.dim(1) == b.dim(0),
                "matmul: inner dims disagree " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const int M = a.dim(0), K = a.dim(1), N = b.dim(1);
  TensorT<S> y = TensorT<S>::zeros({M, N});
  const S* ad = a.data();
  const S* bd = b.data();
  S* yd = y.data();
  for (int m = 0; m < M; ++m) {
    S* yrow = yd + static_cast<int64_t>(m) * N;
    for (int k = 0; k < K; ++k) {
      const S amk = ad[static_cast<int64_t>(m) * K + k];
      const S* brow = bd + static_cast<int64_t>(k) * N;
      for (int n = 0; n < N; ++n) yrow[n] += amk * brow[n];
    }
  }
  if (detail::tracking<S>({&a, &b})) {
    detail::track_output(y);
    auto as = a.storage(), bs = b.storage(), ys = y.storage();
    TapeT<S>::active()->record([as, bs, ys, M, K, N] {
      if (as->requires_grad) {
        // dA = dY * B^T
        for (int m = 0; m < M; ++m)
          for (int k = 0; k < K; ++k) {
            S acc = S(0);
            const S* gyrow = ys->grad.data() + static_cast<int64_t>(m) * N;
            const S* brow = bs->data.data() + static_cast<int64_t>(k) * N;
            for (int n = 0; n < N; ++n) acc += gyrow[n] * brow[n];
            as->grad[static_cast<int64_t>(m) * K + k] += acc;
          }
      }
      if (bs->requires_grad) {
        // dB = A^T * dY
        for (int m = 0; m < M; ++m) {
          const S* gyrow = ys->grad.data() + static_cast<int64_t>(m) * N;
          for (int k = 0; k < K; ++k) {
            const S amk = as->data[static_cast<int64_t>(m) * K + k];
            S* gbrow = bs->grad.data() + static_cast<int64_t>(k) * N;
            for (int n = 0; n < N; ++n) gbrow[n] += amk * gyrow[n];
          }
        }
      }
    });
  }
  return y;
}

/// x: (N, D), bias: (D); adds bias to every row.
template <class S>
TensorT<S> add_bias_rows(const TensorT<S>& x, const TensorT<S>& bias) {
  detail::check(x.rank() == 2 && bias.rank() == 1 && bias.dim(0) == x.dim(1),
                "add_bias_rows: " + shape_str(x.shape()) + " + " + shape_str(bias.shape()));
  const int N = x.dim(0), D = x.dim(1);
  TensorT<S> y = TensorT<S>::zeros(x.shape());
  const S* xd = x.data();
  const S* bd = bias.data();
  S* yd = y.data();
  for (int i = 0; i < N; ++i)
    for (int j = 0; j < D; ++j) yd[static_cast<int64_t>(i) * D + j] = xd[static_cast<int64_t>(i) * D + j] + bd[j];
  if (detail::tracking<S>({&x, &bias})) {
    detail::track_output(y);
    auto xs = x.storage(), bs = bias.storage(), ys = y.storage();
    TapeT<S>::active()->record([xs, bs, ys, N, D] {
      if (xs->requires_grad)
        for (int64_t i = 0; i < static_cast<int64_t>(N) * D; ++i) xs->grad[i] += ys->grad[i];
      if (bs->requires_grad)
        for (int i = 0; i < N; ++i)
          for (int j = 0; j < D; ++j) bs->grad[j] += ys->grad[static_cast<int64_t>(i) * D + j];
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// reshape / permute / concat / sum
// ---------------------------------------------------------------------------

template <class S>
TensorT<S> reshape(const TensorT<S>& x, Shape shape) {
  detail::check(shape_numel(shape) == x.numel(),
                "reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape) + " changes element count");
  TensorT<S> y = TensorT<S>::zeros(std::move(shape));
  std::copy(x.data(), x.data() + x.numel(), y.data());
  if (detail::tracking<S>({&x})) {
    detail::track_output(y);
    auto xs = x.storage(), ys = y.storage();
    const int64_t n = x.numel();
    TapeT<S>::active()->record([xs, ys, n] {
      if (!xs->requires_grad) return;
      for (int64_t i = 0; i < n; ++i) xs->grad[i] += ys->grad[i];
    });
  }
  return y;
}

template <class S>
TensorT<S> permute(const TensorT<S>& x, const std::vector<int>& perm) {
  detail::check(static_cast<int>(perm.size()) == x.rank(), "permute: rank mismatch");
  std::vector<bool> seen(perm.size(), false);
  for (int p : perm) {
    detail::check(p >= 0 && p < x.rank() && !seen[p], "permute: invalid permutation");
    seen[p] = true;
  }
  Shape out_shape(perm.size());
  for (size_t i = 0; i < perm.size(); ++i) out_shape[i] = x.dim(perm[i]);
  TensorT<S> y = TensorT<S>::zeros(out_shape);

  const auto in_strides = detail::row_major_strides(x.shape());
  std::vector<int64_t> gather(perm.size());
  for (size_t i = 0; i < perm.size(); ++i) gather[i] = in_strides[perm[i]];

  const S* xd = x.data();
  S* yd = y.data();
  const int r = x.rank();
  std::vector<int> idx(r, 0);
  const int64_t n = x.numel();
  int64_t src = 0;
  for (int64_t i = 0; i < n; ++i) {
    yd[i] = xd[src];
    for (int d = r - 1; d >= 0; --d) {
      idx[d]++;
      src += gather[d];
      if (idx[d] < out_shape[d]) break;
      src -= static_cast<int64_t>(idx[d]) * gather[d];
      idx[d] = 0;
    }
  }

  if (detail::tracking<S>({&x})) {
    detail::track_output(y);
    auto xs = x.storage(), ys = y.storage();
    TapeT<S>::active()->record([xs, ys, gather, out_shape, r, n] {
      if (!xs->requires_grad) return;
      std::vector<int> idx2(r, 0);
      int64_t src2 = 0;
      for (int64_t i = 0; i < n; ++i) {
        xs->grad[src2] += ys->grad[i];
        for (int d = r - 1; d >= 0; --d) {
          idx2[d]++;
          src2 += gather[d];
          if (idx2[d] < out_shape[d]) break;
          src2 -= static_cast<int64_t>(idx2[d]) * gather[d];
          idx2[d] = 0;
        }
      }
    });
  }
  return y;
}

template <class S>
TensorT<S> transpose2d(const TensorT<S>& x) {
  detail::check(x.rank() == 2, "transpose2d: expects rank-2");
  return permute(x, {1, 0});
}

template <class S>
TensorT<S> concat(const std::vector<TensorT<S>>& parts, int dim) {
  detail::check(!parts.empty(), "concat: no inputs");
  const int r = parts[0].rank();
  detail::check(dim >= 0 && dim < r, "concat: bad dim");
  Shape out_shape = parts[0].shape();
  int total = 0;
  for (const auto& p : parts) {
    detail::check(p.rank() == r, "concat: rank mismatch");
    for (int d = 0; d < r; ++d)
      detail::check(d == dim || p.dim(d) == out_shape[d],
                    "concat: shape mismatch at dim " + std::to_string(d));
    total += p.dim(dim);
  }
  out_shape[dim] = total;
  TensorT<S> y = TensorT<S>::zeros(out_shape);

  // outer = product of dims before `dim`; inner = product after.
  int64_t outer = 1, inner = 1;
  for (int d = 0; d < dim; ++d) outer *= out_shape[d];
  for (int d = dim + 1; d < r; ++d) inner *= out_shape[d];

  S* yd = y.data();
  int64_t offset = 0;  // element offset within one outer slice of y
  std::vector<int64_t> part_offsets(parts.size());
  for (size_t pi = 0; pi < parts.size(); ++pi) {
    part_offsets[pi] = offset;
    const auto& p = parts[pi];
    const S* pd = p.data();
    const int64_t span = static_cast<int64_t>(p.dim(dim)) * inner;
    for (int64_t o = 0; o < outer; ++o)
      std::copy(pd + o * span, pd + (o + 1) * span, yd + o * total * inner + offset);
    offset += span;
  }

  bool track = false;
  {
    std::vector<const TensorT<S>*> ptrs;
    for (const auto& p : parts) ptrs.push_back(&p);
    if (TapeT<S>::active())
      for (auto* t : ptrs)
        if (t->requires_grad()) track = true;
  }
  if (track) {
    detail::track_output(y);
    auto ys = y.storage();
    std::vector<std::shared_ptr<TensorStorage<S>>> pss;
    std::vector<int64_t> spans;
    for (const auto& p : parts) {
      pss.push_back(p.storage());
      spans.push_back(static_cast<int64_t>(p.dim(dim)) * inner);
    }
    const int64_t row = static_cast<int64_t>(total) * inner;
    TapeT<S>::active()->record([ys, pss, spans, part_offsets, outer, row] {
      for (size_t pi = 0; pi < pss.size(); ++pi) {
        auto& ps = pss[pi];
        if (!ps->requires_grad) continue;
        for (int64_t o = 0; o < outer; ++o) {
          const S* gy = ys->grad.data() + o * row + part_offsets[pi];
          S* gp = ps->grad.data() + o * spans[pi];
          for (int64_t i = 0; i < spans[pi]; ++i) gp[i] += gy[i];
        }
      }
    });
  }
  return y;
}

template <class S>
TensorT<S> sum_all(const TensorT<S>& x) {
  TensorT<S> y = TensorT<S>::zeros({1});
  const S* xd = x.data();
  S acc = S(0);
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) acc += xd[i];
  y.data()[0] = acc;
  if (detail::tracking<S>({&x})) {
    detail::track_output(y);
    auto xs = x.storage(), ys = y.storage();
    TapeT<S>::active()->record([xs, ys, n] {
      if (!xs->requires_grad) return;
      const S g = ys->grad[0];
      for (int64_t i = 0; i < n; ++i) xs->grad[i] += g;
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// conv2d: cross-correlation.  x is (C,H,W) or (N,C,H,W); kernel (Co,Ci,kh,kw);
// bias (Co).  Output spatial extents follow floor((H + 2p - k)/stride) + 1.
// ---------------------------------------------------------------------------

template <class S>
TensorT<S> conv2d(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& b,
                  int stride, int pad) {
  detail::check(x.rank() == 3 || x.rank() == 4, "conv2d: input must be (C,H,W) or (N,C,H,W)");
  detail::check(w.rank() == 4, "conv2d: kernel must be (Co,Ci,kh,kw)");
  const bool batched = x.rank() == 4;
  const int N = batched ? x.dim(0) : 1;
  const int Ci = x.dim(batched ? 1 : 0);
  const int H = x.dim(batched ? 2 : 1);
  const int W = x.dim(batched ? 3 : 2);
  const int Co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  detail::check(w.dim(1) == Ci, "conv2d: kernel input channels " + std::to_string(w.dim(1)) +
                                    " != input channels " + std::to_string(Ci));
  detail::check(b.rank() == 1 && b.dim(0) == Co, "conv2d: bias must be (Co)");
  detail::check(stride >= 1 && pad >= 0, "conv2d: bad stride/pad");
  const int OH = (H + 2 * pad - kh) / stride + 1;
  const int OW = (W + 2 * pad - kw) / stride + 1;
  detail::check(H + 2 * pad >= kh && W + 2 * pad >= kw && OH >= 1 && OW >= 1,
                "conv2d: kernel larger than padded input");

  Shape out_shape = batched ? Shape{N, Co, OH, OW} : Shape{Co, OH, OW};
  TensorT<S> y = TensorT<S>::zeros(out_shape);

  const S* xd = x.data();
  const S* wd = w.data();
  const S* bd = b.data();
  S* yd = y.data();
  const int64_t x_n = static_cast<int64_t>(Ci) * H * W;
  const int64_t y_n = static_cast<int64_t>(Co) * OH * OW;

  for (int n = 0; n < N; ++n) {
    const S* xb = xd + n * x_n;
    S* yb = yd + n * y_n;
    for (int co = 0; co < Co; ++co) {
      S* ymap = yb + static_cast<int64_t>(co) * OH * OW;
      const S bias_v = bd[co];
      for (int64_t i = 0; i < static_cast<int64_t>(OH) * OW; ++i) ymap[i] = bias_v;
      for (int ci = 0; ci < Ci; ++ci) {
        const S* xmap = xb + static_cast<int64_t>(ci) * H * W;
        const S* wmap = wd + ((static_cast<int64_t>(co) * Ci + ci) * kh) * kw;
        for (int r = 0; r < kh; ++r)
          for (int c = 0; c < kw; ++c) {
            const S wv = wmap[r * kw + c];
            if (wv == S(0)) continue;
            for (int oh = 0; oh < OH; ++oh) {
              const int ih = oh * stride - pad + r;
              if (ih < 0 || ih >= H) continue;
              const S* xrow = xmap + static_cast<int64_t>(ih) * W;
              S* yrow = ymap + static_cast<int64_t>(oh) * OW;
              for (int ow = 0; ow < OW; ++ow) {
                const int iw = ow * stride - pad + c;
                if (iw < 0 || iw >= W) continue;
                yrow[ow] += wv * xrow[iw];
              }
            }
          }
      }
    }
  }

  if (detail::tracking<S>({&x, &w, &b})) {
    detail::track_output(y);
    auto xs = x.storage(), ws = w.storage(), bs = b.storage(), ys = y.storage();
    TapeT<S>::active()->record([xs, ws, bs, ys, N, Ci, H, W, Co, kh, kw, OH, OW, stride, pad,
                                x_n, y_n] {
      for (int n = 0; n < N; ++n) {
        const S* gy = ys->grad.data() + n * y_n;
        const S* xb = xs->data.data() + n * x_n;
        for (int co = 0; co < Co; ++co) {
          const S* gymap = gy + static_cast<int64_t>(co) * OH * OW;
          if (bs->requires_grad) {
            S acc = S(0);
            for (int64_t i = 0; i < static_cast<int64_t>(OH) * OW; ++i) acc += gymap[i];
            bs->grad[co] += acc;
          }
          for (int ci = 0; ci < Ci; ++ci) {
            const int64_t w_base = ((static_cast<int64_t>(co) * Ci + ci) * kh) * kw;
            for (int r = 0; r < kh; ++r)
              for (int c = 0; c < kw; ++c) {
                const S wv = ws->data[w_base + r * kw + c];
                S wacc = S(0);
                for (int oh = 0; oh < OH; ++oh) {
                  const int ih = oh * stride - pad + r;
                  if (ih < 0 || ih >= H) continue;
                  const S* xrow = xb + (static_cast<int64_t>(ci) * H + ih) * W;
                  S* gxrow = xs->requires_grad
                                 ? xs->grad.data() + n * x_n + (static_cast<int64_t>(ci) * H + ih) * W
                                 : nullptr;
                  const S* gyrow = gymap + static_cast<int64_t>(oh) * OW;
                  for (int ow = 0; ow < OW; ++ow) {
                    const int iw = ow * stride - pad + c;
                    if (iw < 0 || iw >= W) continue;
                    wacc += gyrow[ow] * xrow[iw];
                    if (gxrow) gxrow[iw] += gyrow[ow] * wv;
                  }
                }
                if (ws->requires_grad) ws->grad[w_base + r * kw + c] += wacc;
              }
          }
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// conv3d: cross-correlation over (T,H,W).  x (Ci,T,H,W); kernel
// (Co,Ci,kt,kh,kw); stride 1; no temporal padding; symmetric spatial padding.
// ---------------------------------------------------------------------------

template <class S>
TensorT<S> conv3d(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& b, int spatial_pad) {
  detail::check(x.rank() == 4, "conv3d: input must be (Ci,T,H,W)");
  detail::check(w.rank() == 5, "conv3d: kernel must be (Co,Ci,kt,kh,kw)");
  const int Ci = x.dim(0), T = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Co = w.dim(0), kt = w.dim(2), kh = w.dim(3), kw = w.dim(4);
  detail::check(w.dim(1) == Ci, "conv3d: channel mismatch");
  detail::check(b.rank() == 1 && b.dim(0) == Co, "conv3d: bias must be (Co)");
  detail::check(kt <= T, "conv3d: temporal kernel " + std::to_string(kt) + " exceeds input extent " +
                             std::to_string(T));
  const int p = spatial_pad;
  const int OT = T - kt + 1;
  const int OH = H + 2 * p - kh + 1;
  const int OW = W + 2 * p - kw + 1;
  detail::check(OH >= 1 && OW >= 1, "conv3d: kernel larger than padded input");

  TensorT<S> y = TensorT<S>::zeros({Co, OT, OH, OW});
  const S* xd = x.data();
  const S* wd = w.data();
  const S* bd = b.data();
  S* yd = y.data();

  for (int co = 0; co < Co; ++co) {
    S* ych = yd + static_cast<int64_t>(co) * OT * OH * OW;
    const S bias_v = bd[co];
    for (int64_t i = 0; i < static_cast<int64_t>(OT) * OH * OW; ++i) ych[i] = bias_v;
    for (int ci = 0; ci < Ci; ++ci)
      for (int dt = 0; dt < kt; ++dt)
        for (int r = 0; r < kh; ++r)
          for (int c = 0; c < kw; ++c) {
            const S wv = wd[((((static_cast<int64_t>(co) * Ci + ci) * kt + dt) * kh + r) * kw + c)];
            if (wv == S(0)) continue;
            for (int ot = 0; ot < OT; ++ot) {
              const int it = ot + dt;
              for (int oh = 0; oh < OH; ++oh) {
                const int ih = oh - p + r;
                if (ih < 0 || ih >= H) continue;
                const S* xrow = xd + ((static_cast<int64_t>(ci) * T + it) * H + ih) * W;
                S* yrow = ych + (static_cast<int64_t>(ot) * OH + oh) * OW;
                for (int ow = 0; ow < OW; ++ow) {
                  const int iw = ow - p + c;
                  if (iw < 0 || iw >= W) continue;
                  yrow[ow] += wv * xrow[iw];
                }
              }
            }
          }
  }

  if (detail::tracking<S>({&x, &w, &b})) {
    detail::track_output(y);
    auto xs = x.storage(), ws = w.storage(), bs = b.storage(), ys = y.storage();
    TapeT<S>::active()->record([xs, ws, bs, ys, Ci, T, H, W, Co, kt, kh, kw, OT, OH, OW, p] {
      for (int co = 0; co < Co; ++co) {
        const S* gych = ys->grad.data() + static_cast<int64_t>(co) * OT * OH * OW;
        if (bs->requires_grad) {
          S acc = S(0);
          for (int64_t i = 0; i < static_cast<int64_t>(OT) * OH * OW; ++i) acc += gych[i];
          bs->grad[co] += acc;
        }
        for (int ci = 0; ci < Ci; ++ci)
          for (int dt = 0; dt < kt; ++dt)
            for (int r = 0; r < kh; ++r)
              for (int c = 0; c < kw; ++c) {
                const int64_t widx =
                    ((((static_cast<int64_t>(co) * Ci + ci) * kt + dt) * kh + r) * kw + c);
                const S wv = ws->data[widx];
                S wacc = S(0);
                for (int ot = 0; ot < OT; ++ot) {
                  const int it = ot + dt;
                  for (int oh = 0; oh < OH; ++oh) {
                    const int ih = oh - p + r;
                    if (ih < 0 || ih >= H) continue;
                    const S* xrow = xs->data.data() + ((static_cast<int64_t>(ci) * T + it) * H + ih) * W;
                    S* gxrow = xs->requires_grad
                                   ? xs->grad.data() + ((static_cast<int64_t>(ci) * T + it) * H + ih) * W
                                   : nullptr;
                    const S* gyrow = gych + (static_cast<int64_t>(ot) * OH + oh) * OW;
                    for (int ow = 0; ow < OW; ++ow) {
                      const int iw = ow - p + c;
                      if (iw < 0 || iw >= W) continue;
                      wacc += gyrow[ow] * xrow[iw];
                      if (gxrow) gxrow[iw] += gyrow[ow] * wv;
                    }
                  }
                }
                if (ws->requires_grad) ws->grad[widx] += wacc;
              }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// avg_pool2d_to / upsample_nearest2d on the trailing two dims of a rank-3 or
// rank-4 tensor.  Pooling averages non-overlapping blocks; extents must divide.
// Upsampling replicates each source cell into an integer-factor block.
// ---------------------------------------------------------------------------

template <class S>
TensorT<S> avg_pool2d_to(const TensorT<S>& x, int oh, int ow) {
  detail::check(x.rank() >= 3, "avg_pool2d_to: need trailing (H,W) dims");
  const int r = x.rank();
  const int H = x.dim(r - 2), W = x.dim(r - 1);
  detail::check(oh >= 1 && ow >= 1 && H % oh == 0 && W % ow == 0,
                "avg_pool2d_to: " + std::to_string(H) + "x" + std::to_string(W) +
                    " not divisible into " + std::to_string(oh) + "x" + std::to_string(ow));
  const int bh = H / oh, bw = W / ow;
  const int64_t maps = x.numel() / (static_cast<int64_t>(H) * W);
  Shape out_shape = x.shape();
  out_shape[r - 2] = oh;
  out_shape[r - 1] = ow;
  TensorT<S> y = TensorT<S>::zeros(out_shape);
  const S* xd = x.data();
  S* yd = y.data();
  const S inv = S(1) / static_cast<S>(bh * bw);
  for (int64_t m = 0; m < maps; ++m) {
    const S* xm = xd + m * H * W;
    S* ym = yd + m * static_cast<int64_t>(oh) * ow;
    for (int i = 0; i < oh; ++i)
      for (int j = 0; j < ow; ++j) {
        S acc = S(0);
        for (int u = 0; u < bh; ++u) {
          const S* row = xm + static_cast<int64_t>(i * bh + u) * W + j * bw;
          for (int v = 0; v < bw; ++v) acc += row[v];
        }
        ym[static_cast<int64_t>(i) * ow + j] = acc * inv;
      }
  }
  if (detail::tracking<S>({&x})) {
    detail::track_output(y);
    auto xs = x.storage(), ys = y.storage();
    TapeT<S>::active()->record([xs, ys, maps, H, W, oh, ow, bh, bw, inv] {
      if (!xs->requires_grad) return;
      for (int64_t m = 0; m < maps; ++m) {
        const S* gym = ys->grad.data() + m * static_cast<int64_t>(oh) * ow;
        S* gxm = xs->grad.data() + m * H * W;
        for (int i = 0; i < oh; ++i)
          for (int j = 0; j < ow; ++j) {
            const S g = gym[static_cast<int64_t>(i) * ow + j] * inv;
            for (int u = 0; u < bh; ++u) {
              S* row = gxm + static_cast<int64_t>(i * bh + u) * W + j * bw;
              for (int v = 0; v < bw; ++v) row[v] += g;
            }
          }
      }
    });
  }
  return y;
}

template <class S>
TensorT<S> upsample_nearest2d(const TensorT<S>& x, int OH, int OW) {
  detail::check(x.rank() >= 3, "upsample_nearest2d: need trailing (H,W) dims");
  const int r = x.rank();
  const int H = x.dim(r - 2), W = x.dim(r - 1);
  detail::check(OH >= H && OW >= W && OH % H == 0 && OW % W == 0,
                "upsample_nearest2d: target " + std::to_string(OH) + "x" + std::to_string(OW) +
                    " not an integer multiple of " + std::to_string(H) + "x" + std::to_string(W));
  const int fh = OH / H, fw = OW / W;
  const int64_t maps = x.numel() / (static_cast<int64_t>(H) * W);
  Shape out_shape = x.shape();
  out_shape[r - 2] = OH;
  out_shape[r - 1] = OW;
  TensorT<S> y = TensorT<S>::zeros(out_shape);
  const S* xd = x.data();
  S* yd = y.data();
  for (int64_t m = 0; m < maps; ++m) {
    const S* xm = xd + m * H * W;
    S* ym = yd + m * static_cast<int64_t>(OH) * OW;
    for (int i = 0; i < OH; ++i) {
      const S* xrow = xm + static_cast<int64_t>(i / fh) * W;
      S* yrow = ym + static_cast<int64_t>(i) * OW;
      for (int j = 0; j < OW; ++j) yrow[j] = xrow[j / fw];
    }
  }
  if (detail::tracking<S>({&x})) {
    detail::track_output(y);
    auto xs = x.storage(), ys = y.storage();
    TapeT<S>::active()->record([xs, ys, maps, H, W, OH, OW, fh, fw] {
      if (!xs->requires_grad) return;
      for (int64_t m = 0; m < maps; ++m) {
        const S* gym = ys->grad.data() + m * static_cast<int64_t>(OH) * OW;
        S* gxm = xs->grad.data() + m * H * W;
        for (int i = 0; i < OH; ++i) {
          const S* gyrow = gym + static_cast<int64_t>(i) * OW;
          S* gxrow = gxm + static_cast<int64_t>(i / fh) * W;
          for (int j = 0; j < OW; ++j) gxrow[j / fw] += gyrow[j];
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// batch_norm over one channel dimension; statistics reduce over every other
// dimension.  Training mode normalizes with batch statistics and updates the
// running buffers in place (population variance); eval mode uses the buffers.
// ---------------------------------------------------------------------------

template <class S>
TensorT<S> batch_norm(const TensorT<S>& x, const TensorT<S>& gamma, const TensorT<S>& beta,
                      TensorT<S>& running_mean, TensorT<S>& running_var, int channel_dim,
                      bool training, S momentum = S(0.9), S eps = S(1e-5)) {
  const int r = x.rank();
  detail::check(channel_dim >= 0 && channel_dim < r, "batch_norm: bad channel dim");
  const int C = x.dim(channel_dim);
  detail::check(gamma.numel() == C && beta.numel() == C && running_mean.numel() == C &&
                    running_var.numel() == C,
                "batch_norm: parameter extent != channel count");
  const int64_t n = x.numel();
  const int64_t per_channel = n / C;
  detail::check(per_channel >= 1, "batch_norm: empty channel slices");

  // Iteration as (outer, C, inner) with x index = (o*C + c)*inner + i.
  int64_t inner = 1;
  for (int d = channel_dim + 1; d < r; ++d) inner *= x.dim(d);
  const int64_t outer = n / (inner * C);

  std::vector<S> mean(C), var(C);
  const S* xd = x.data();
  if (training) {
    for (int c = 0; c < C; ++c) {
      S acc = S(0);
      for (int64_t o = 0; o < outer; ++o) {
        const S* base = xd + (o * C + c) * inner;
        for (int64_t i = 0; i < inner; ++i) acc += base[i];
      }
      mean[c] = acc / static_cast<S>(per_channel);
    }
    for (int c = 0; c < C; ++c) {
      S acc = S(0);
      for (int64_t o = 0; o < outer; ++o) {
        const S* base = xd + (o * C + c) * inner;
        for (int64_t i = 0; i < inner; ++i) {
          const S d = base[i] - mean[c];
          acc += d * d;
        }
      }
      var[c] = acc / static_cast<S>(per_channel);
    }
    for (int c = 0; c < C; ++c) {
      running_mean.data()[c] = momentum * running_mean.data()[c] + (S(1) - momentum) * mean[c];
      running_var.data()[c] = momentum * running_var.data()[c] + (S(1) - momentum) * var[c];
    }
  } else {
    for (int c = 0; c < C; ++c) {
      mean[c] = running_mean.data()[c];
      var[c] = running_var.data()[c];
    }
  }

  std::vector<S> inv_std(C);
  for (int c = 0; c < C; ++c) inv_std[c] = S(1) / std::sqrt(var[c] + eps);

  TensorT<S> y = TensorT<S>::zeros(x.shape());
  S* yd = y.data();
  const S* gd = gamma.data();
  const S* bd = beta.data();
  for (int64_t o = 0; o < outer; ++o)
    for (int c = 0; c < C; ++c) {
      const S* xb = xd + (o * C + c) * inner;
      S* yb = yd + (o * C + c) * inner;
      const S m = mean[c], is = inv_std[c], g = gd[c], bb = bd[c];
      for (int64_t i = 0; i < inner; ++i) yb[i] = (xb[i] - m) * is * g + bb;
    }

  if (detail::tracking<S>({&x, &gamma, &beta})) {
    detail::track_output(y);
    auto xs = x.storage(), gs = gamma.storage(), bs = beta.storage(), ys = y.storage();
    TapeT<S>::active()->record([xs, gs, bs, ys, mean, inv_std, outer, C, inner, per_channel,
                                training] {
      for (int c = 0; c < C; ++c) {
        const S m = mean[c], is = inv_std[c], g = gs->data[c];
        // Accumulate sum(dy) and sum(dy * xhat) for the channel.
        S sum_dy = S(0), sum_dy_xhat = S(0);
        for (int64_t o = 0; o < outer; ++o) {
          const S* xb = xs->data.data() + (o * C + c) * inner;
          const S* gyb = ys->grad.data() + (o * C + c) * inner;
          for (int64_t i = 0; i < inner; ++i) {
            sum_dy += gyb[i];
            sum_dy_xhat += gyb[i] * (xb[i] - m) * is;
          }
        }
        if (gs->requires_grad) gs->grad[c] += sum_dy_xhat;
        if (bs->requires_grad) bs->grad[c] += sum_dy;
        if (xs->requires_grad) {
          const S inv_n = S(1) / static_cast<S>(per_channel);
          for (int64_t o = 0; o < outer; ++o) {
            const S* xb = xs->data.data() + (o * C + c) * inner;
            const S* gyb = ys->grad.data() + (o * C + c) * inner;
            S* gxb = xs->grad.data() + (o * C + c) * inner;
            for (int64_t i = 0; i < inner; ++i) {
              const S xhat = (xb[i] - m) * is;
              if (training)
                gxb[i] += g * is * (gyb[i] - sum_dy * inv_n - xhat * sum_dy_xhat * inv_n);
              else
                gxb[i] += g * is * gyb[i];
            }
          }
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Loss kernels: each returns a scalar that is the weighted mean of per-element
// terms with the given nonnegative weights.  A zero weight sum yields 0 with
// no gradient (empty masks are legal).
// ---------------------------------------------------------------------------

/// Smooth-L1 (Huber, transition at |d| = 1) between pred and target.
template <class S>
TensorT<S> smooth_l1_loss(const TensorT<S>& pred, const TensorT<S>& target,
                          const TensorT<S>& weight) {
  detail::check(pred.shape() == target.shape() && pred.shape() == weight.shape(),
                "smooth_l1_loss: shape mismatch");
  const int64_t n = pred.numel();
  const S* pd = pred.data();
  const S* td = target.data();
  const S* wd = weight.data();
  S wsum = S(0), acc = S(0);
  for (int64_t i = 0; i < n; ++i) {
    const S d = pd[i] - td[i];
    const S ad = std::abs(d);
    const S h = ad < S(1) ? S(0.5) * d * d : ad - S(0.5);
    acc += wd[i] * h;
    wsum += wd[i];
  }
  TensorT<S> y = TensorT<S>::scalar(wsum > S(0) ? acc / wsum : S(0));
  if (detail::tracking<S>({&pred}) && wsum > S(0)) {
    detail::track_output(y);
    auto ps = pred.storage(), ts = target.storage(), ws = weight.storage(), ys = y.storage();
    TapeT<S>::active()->record([ps, ts, ws, ys, n, wsum] {
      if (!ps->requires_grad) return;
      const S g = ys->grad[0] / wsum;
      for (int64_t i = 0; i < n; ++i) {
        const S d = ps->data[i] - ts->data[i];
        ps->grad[i] += g * ws->data[i] * std::clamp(d, S(-1), S(1));
      }
    });
  }
  return y;
}

/// Cross-entropy over the last dimension of `logits` against integer labels,
/// one label and one weight per row; log-sum-exp is max-subtracted.
template <class S>
TensorT<S> cross_entropy_lastdim(const TensorT<S>& logits, const std::vector<int>& labels,
                                 const std::vector<S>& row_weights) {
  const int D = logits.dim(logits.rank() - 1);
  const int64_t rows = logits.numel() / D;
  detail::check(static_cast<int64_t>(labels.size()) == rows &&
                    static_cast<int64_t>(row_weights.size()) == rows,
                "cross_entropy: one label and weight per row required");
  const S* ld = logits.data();
  S wsum = S(0), acc = S(0);
  for (int64_t r = 0; r < rows; ++r) {
    const S w = row_weights[r];
    if (w == S(0)) continue;
    const int t = labels[r];
    detail::check(t >= 0 && t < D, "cross_entropy: label out of range");
    const S* in = ld + r * D;
    S m = in[0];
    for (int j = 1; j < D; ++j) m = std::max(m, in[j]);
    S z = S(0);
    for (int j = 0; j < D; ++j) z += std::exp(in[j] - m);
    acc += w * (m + std::log(z) - in[t]);
    wsum += w;
  }
  TensorT<S> y = TensorT<S>::scalar(wsum > S(0) ? acc / wsum : S(0));
  if (detail::tracking<S>({&logits}) && wsum > S(0)) {
    detail::track_output(y);
    auto ls = logits.storage(), ys = y.storage();
    TapeT<S>::active()->record([ls, ys, labels, row_weights, rows, D, wsum] {
      if (!ls->requires_grad) return;
      const S g = ys->grad[0] / wsum;
      for (int64_t r = 0; r < rows; ++r) {
        const S w = row_weights[r];
        if (w == S(0)) continue;
        const S* in = ls->data.data() + r * D;
        S* gx = ls->grad.data() + r * D;
        S m = in[0];
        for (int j = 1; j < D; ++j) m = std::max(m, in[j]);
        S z = S(0);
        for (int j = 0; j < D; ++j) z += std::exp(in[j] - m);
        for (int j = 0; j < D; ++j) {
          const S p = std::exp(in[j] - m) / z;
          gx[j] += g * w * (p - (j == labels[r] ? S(1) : S(0)));
        }
      }
    });
  }
  return y;
}

/// Binary cross-entropy on logits against targets in [0,1], elementwise
/// weights; uses the overflow-safe max(z,0) - z*y + log(1+exp(-|z|)) form.
template <class S>
TensorT<S> bce_with_logits(const TensorT<S>& logits, const TensorT<S>& targets,
                           const TensorT<S>& weight) {
  detail::check(logits.shape() == targets.shape() && logits.shape() == weight.shape(),
                "bce_with_logits: shape mismatch");
  const int64_t n = logits.numel();
  const S* zd = logits.data();
  const S* yd = targets.data();
  const S* wd = weight.data();
  S wsum = S(0), acc = S(0);
  for (int64_t i = 0; i < n; ++i) {
    const S z = zd[i];
    const S l = std::max(z, S(0)) - z * yd[i] + std::log1p(std::exp(-std::abs(z)));
    acc += wd[i] * l;
    wsum += wd[i];
  }
  TensorT<S> out = TensorT<S>::scalar(wsum > S(0) ? acc / wsum : S(0));
  if (detail::tracking<S>({&logits}) && wsum > S(0)) {
    detail::track_output(out);
    auto zs = logits.storage(), ts = targets.storage(), ws = weight.storage(),
         os = out.storage();
    TapeT<S>::active()->record([zs, ts, ws, os, n, wsum] {
      if (!zs->requires_grad) return;
      const S g = os->grad[0] / wsum;
      for (int64_t i = 0; i < n; ++i) {
        const S z = zs->data[i];
        const S s = z >= S(0) ? S(1) / (S(1) + std::exp(-z)) : std::exp(z) / (S(1) + std::exp(z));
        zs->grad[i] += g * ws->data[i] * (s - ts->data[i]);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------

template <class S>
void assert_finite(const TensorT<S>& x, const std::string& what) {
  const S* d = x.data();
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i)
    if (!std::isfinite(d[i]))
      throw ValueError(what + ": non-finite value at flat index " + std::to_string(i));
}

using Tensor = TensorT<float>;
using Tape = TapeT<float>;

}  // namespace stan
