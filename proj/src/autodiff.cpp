// SPDX-License-Identifier: Apache-2.0
#include "flans/autodiff.hpp"

#if defined(__SSE__)
#include <xmmintrin.h>
#endif

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <random>

#include "gemm.hpp"

namespace flans {

namespace {

std::atomic<bool> g_pairwise{false};
std::atomic<bool> g_debug{false};

template <typename T>
T sum_range(const T* p, std::size_t n, std::size_t stride) {
  if (!g_pairwise.load(std::memory_order_relaxed) || n <= 8) {
    T acc = T(0);
    for (std::size_t i = 0; i < n; ++i) acc += p[i * stride];
    return acc;
  }
  const std::size_t half = n / 2;
  return sum_range(p, half, stride) + sum_range(p + half * stride, n - half, stride);
}

struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) {
    throw Error(ErrorCode::ShapeMismatch,
                "axis " + std::to_string(axis) + " out of range for " + to_string(s));
  }
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

Shape drop_axis(const Shape& s, std::size_t axis) {
  Shape out;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) out.push_back(s[i]);
  return out;
}

template <typename T>
Tape<T>& tape_of(const Var<T>& a, const Var<T>& b) {
  if (!a.valid() || a.tape() != b.tape()) {
    throw Error(ErrorCode::InvalidArgument, "operands live on different tapes");
  }
  return *a.tape();
}

template <typename T>
Tape<T>& tape_of(const Var<T>& a) {
  if (!a.valid()) throw Error(ErrorCode::InvalidArgument, "unbound Var");
  return *a.tape();
}

enum class Bcast { None, AScalar, BScalar };

template <typename T>
Bcast broadcast_kind(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() == b.shape()) return Bcast::None;
  if (a.size() == 1) return Bcast::AScalar;
  if (b.size() == 1) return Bcast::BScalar;
  throw Error(ErrorCode::ShapeMismatch, std::string(op) + ": " + to_string(a.shape()) +
                                            " vs " + to_string(b.shape()));
}

template <typename T>
void add_into(Tensor<T>& dst, const Tensor<T>& src) {
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

template <typename T>
T sum_all(const Tensor<T>& t) {
  return sum_range(t.data().data(), t.size(), 1);
}

// Elementwise binary op with scalar broadcast. `fa`/`fb` give d out/d a and
// d out/d b at index (ia, ib).
template <typename T, typename Fwd, typename DA, typename DB>
Var<T> binary(const Var<T>& a, const Var<T>& b, const char* name, Fwd fwd, DA da, DB db) {
  Tape<T>& tape = tape_of(a, b);
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  const Bcast kind = broadcast_kind(av, bv, name);
  const Shape out_shape = kind == Bcast::AScalar ? bv.shape() : av.shape();
  Tensor<T> out(out_shape);
  const std::size_t n = out.size();
  const std::size_t sa = kind == Bcast::AScalar ? 0 : 1;
  const std::size_t sb = kind == Bcast::BScalar ? 0 : 1;
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[i * sa], bv[i * sb]);
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {a, b}, [=](Tape<T>& t, const Tensor<T>& g) {
    const Tensor<T>& x = t.value(ia);
    const Tensor<T>& y = t.value(ib);
    if (t.requires_grad(ia)) {
      Tensor<T>& gx = t.grad_buffer(ia);
      if (sa == 0) {
        T acc = T(0);
        for (std::size_t i = 0; i < n; ++i) acc += g[i] * da(x[0], y[i * sb]);
        gx[0] += acc;
      } else {
        for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * da(x[i], y[i * sb]);
      }
    }
    if (t.requires_grad(ib)) {
      Tensor<T>& gy = t.grad_buffer(ib);
      if (sb == 0) {
        T acc = T(0);
        for (std::size_t i = 0; i < n; ++i) acc += g[i] * db(x[i * sa], y[0]);
        gy[0] += acc;
      } else {
        for (std::size_t i = 0; i < n; ++i) gy[i] += g[i] * db(x[i * sa], y[i]);
      }
    }
  });
}

// Elementwise unary op; `dfn(x, y)` is d y / d x.
template <typename T, typename Fwd, typename D>
Var<T> unary(const Var<T>& x, Fwd fwd, D dfn) {
  Tape<T>& tape = tape_of(x);
  const Tensor<T>& xv = x.value();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xv[i]);
  const std::size_t ix = x.id();
  const std::size_t iy = tape.size();
  return tape.record(std::move(out), {x}, [=](Tape<T>& t, const Tensor<T>& g) {
    const Tensor<T>& xv2 = t.value(ix);
    const Tensor<T>& yv = t.value(iy);
    Tensor<T>& gx = t.grad_buffer(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * dfn(xv2[i], yv[i]);
  });
}

template <typename T>
void check_finite(const Tensor<T>& t) {
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (!std::isfinite(t[i])) {
      throw Error(ErrorCode::NonFinite, "result contains NaN/Inf at flat index " +
                                            std::to_string(i) + " of " + to_string(t.shape()));
    }
  }
}

}  // namespace

#if defined(__SSE__)
namespace {
constexpr unsigned kFtzDaz = 0x8040;
}
void set_flush_denormals(bool enabled) noexcept {
  _mm_setcsr(enabled ? (_mm_getcsr() | kFtzDaz) : (_mm_getcsr() & ~kFtzDaz));
}
FlushDenormalsScope::FlushDenormalsScope() : saved_(_mm_getcsr()) { _mm_setcsr(saved_ | kFtzDaz); }
FlushDenormalsScope::~FlushDenormalsScope() { _mm_setcsr(saved_); }
#else
void set_flush_denormals(bool) noexcept {}
FlushDenormalsScope::FlushDenormalsScope() = default;
FlushDenormalsScope::~FlushDenormalsScope() = default;
#endif

void set_pairwise_summation(bool enabled) noexcept { g_pairwise = enabled; }
bool pairwise_summation() noexcept { return g_pairwise; }
void set_debug_checks(bool enabled) noexcept { g_debug = enabled; }
bool debug_checks() noexcept { return g_debug; }

// ---- Tape -------------------------------------------------------------------

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
  nodes_.push_back(Node{std::move(value), {}, false, {}});
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::leaf(Tensor<T> value, bool requires_grad) {
  nodes_.push_back(Node{std::move(value), {}, requires_grad && grad_enabled_, {}});
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::param(const Parameter<T>& p) {
  if (auto it = params_.find(&p); it != params_.end()) return Var<T>(this, it->second);
  Var<T> v = leaf(p.value, p.trainable);
  params_.emplace(&p, v.id());
  return v;
}

template <typename T>
Var<T> Tape<T>::record(Tensor<T> value, const std::vector<Var<T>>& inputs, BackwardFn fn) {
  if (g_debug.load(std::memory_order_relaxed)) check_finite(value);
  bool rg = false;
  if (grad_enabled_) {
    for (const auto& in : inputs) {
      if (in.tape() != this) throw Error(ErrorCode::InvalidArgument, "input from another tape");
      rg = rg || nodes_[in.id()].requires_grad;
    }
  }
  nodes_.push_back(Node{std::move(value), {}, rg, rg ? std::move(fn) : BackwardFn{}});
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Tensor<T>& Tape<T>::grad_buffer(std::size_t id) {
  Node& n = nodes_.at(id);
  if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
  return n.grad;
}

template <typename T>
void Tape<T>::backward(const Var<T>& loss) {
  if (consumed_) throw Error(ErrorCode::TapeConsumed, "backward() already ran on this tape");
  if (loss.tape() != this) throw Error(ErrorCode::InvalidArgument, "loss from another tape");
  if (loss.size() != 1) {
    throw Error(ErrorCode::NonScalarLoss, "loss has shape " + to_string(loss.shape()));
  }
  consumed_ = true;
  if (!nodes_[loss.id()].requires_grad) return;
  grad_buffer(loss.id())[0] = T(1);
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
    n.backward(*this, n.grad);
  }
}

template <typename T>
Tensor<T> Tape<T>::grad(const Var<T>& v) const {
  const Node& n = nodes_.at(v.id());
  if (n.grad.empty()) return Tensor<T>(n.value.shape());
  return n.grad;
}

template <typename T>
Tensor<T> Tape<T>::grad(const Parameter<T>& p) const {
  auto it = params_.find(&p);
  if (it == params_.end()) return Tensor<T>(p.value.shape());
  const Node& n = nodes_[it->second];
  if (n.grad.empty()) return Tensor<T>(p.value.shape());
  return n.grad;
}

// ---- elementwise ------------------------------------------------------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return binary(a, b, "add", [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
                [](T, T) { return T(1); });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return binary(a, b, "sub", [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
                [](T, T) { return T(-1); });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  return binary(a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y) { return y; },
                [](T x, T) { return x; });
}

template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  return binary(a, b, "div", [](T x, T y) { return x / y; }, [](T, T y) { return T(1) / y; },
                [](T x, T y) { return -x / (y * y); });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T s) {
  return unary(a, [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

template <typename T>
Var<T> mul_scalar(const Var<T>& a, T s) {
  return unary(a, [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  return unary(x, [](T v) { return v > T(0) ? v : T(0); },
               [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Var<T> leaky_relu(const Var<T>& x, T slope) {
  return unary(x, [slope](T v) { return v > T(0) ? v : slope * v; },
               [slope](T v, T) { return v > T(0) ? T(1) : slope; });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  return unary(
      x,
      [](T v) {
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> log(const Var<T>& x) {
  return unary(x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <typename T>
Var<T> exp(const Var<T>& x) {
  return unary(x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Var<T> clamp(const Var<T>& x, T lo, T hi) {
  return unary(x, [lo, hi](T v) { return std::min(std::max(v, lo), hi); },
               [lo, hi](T v, T) { return (v >= lo && v <= hi) ? T(1) : T(0); });
}

// ---- matmul / conv ----------------------------------------------------------

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  Tape<T>& tape = tape_of(a, b);
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw Error(ErrorCode::ShapeMismatch, "matmul: " + to_string(av.shape()) + " x " +
                                              to_string(bv.shape()) + " (inner dims must agree)");
  }
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor<T> out(Shape{m, n});
  detail::gemm(av.data().data(), false, bv.data().data(), false, out.data().data(), m, k, n, false);
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {a, b}, [=](Tape<T>& t, const Tensor<T>& g) {
    if (t.requires_grad(ia)) {
      detail::gemm(g.data().data(), false, t.value(ib).data().data(), true,
                   t.grad_buffer(ia).data().data(), m, n, k, true);
    }
    if (t.requires_grad(ib)) {
      detail::gemm(t.value(ia).data().data(), true, g.data().data(), false,
                   t.grad_buffer(ib).data().data(), k, m, n, true);
    }
  });
}

namespace {

struct ConvGeom {
  std::size_t cin, h, w, cout, kh, kw, stride, pad, ho, wo;
};

template <typename T>
void im2col(const T* x, const ConvGeom& g, T* cols) {
  const std::size_t hw = g.ho * g.wo;
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        T* row = cols + ((c * g.kh + ki) * g.kw + kj) * hw;
        for (std::size_t oi = 0; oi < g.ho; ++oi) {
          const long ii = static_cast<long>(oi * g.stride + ki) - static_cast<long>(g.pad);
          T* dst = row + oi * g.wo;
          if (ii < 0 || ii >= static_cast<long>(g.h)) {
            std::fill(dst, dst + g.wo, T(0));
            continue;
          }
          const T* src = x + (c * g.h + static_cast<std::size_t>(ii)) * g.w;
          for (std::size_t oj = 0; oj < g.wo; ++oj) {
            const long jj = static_cast<long>(oj * g.stride + kj) - static_cast<long>(g.pad);
            dst[oj] = (jj < 0 || jj >= static_cast<long>(g.w)) ? T(0) : src[jj];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeom& g, T* gx) {
  const std::size_t hw = g.ho * g.wo;
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const T* row = cols + ((c * g.kh + ki) * g.kw + kj) * hw;
        for (std::size_t oi = 0; oi < g.ho; ++oi) {
          const long ii = static_cast<long>(oi * g.stride + ki) - static_cast<long>(g.pad);
          if (ii < 0 || ii >= static_cast<long>(g.h)) continue;
          T* dst = gx + (c * g.h + static_cast<std::size_t>(ii)) * g.w;
          const T* src = row + oi * g.wo;
          for (std::size_t oj = 0; oj < g.wo; ++oj) {
            const long jj = static_cast<long>(oj * g.stride + kj) - static_cast<long>(g.pad);
            if (jj >= 0 && jj < static_cast<long>(g.w)) dst[jj] += src[oj];
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>* bias, Conv2dOptions opt) {
  Tape<T>& tape = tape_of(x, w);
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = w.value();
  if (xv.rank() != 3 || wv.rank() != 4 || xv.dim(0) != wv.dim(1)) {
    throw Error(ErrorCode::ShapeMismatch, "conv2d: input " + to_string(xv.shape()) +
                                              " vs kernel " + to_string(wv.shape()) +
                                              " (input channels must agree)");
  }
  if (opt.stride == 0) throw Error(ErrorCode::InvalidArgument, "conv2d: stride must be positive");
  ConvGeom g{xv.dim(0), xv.dim(1), xv.dim(2), wv.dim(0), wv.dim(2), wv.dim(3),
             opt.stride, opt.pad, 0, 0};
  if (g.h + 2 * g.pad < g.kh || g.w + 2 * g.pad < g.kw) {
    throw Error(ErrorCode::ShapeMismatch, "conv2d: kernel larger than padded input");
  }
  g.ho = (g.h + 2 * g.pad - g.kh) / g.stride + 1;
  g.wo = (g.w + 2 * g.pad - g.kw) / g.stride + 1;
  if (bias && (bias->tape() != &tape || bias->value().rank() != 1 ||
               bias->value().dim(0) != g.cout)) {
    throw Error(ErrorCode::ShapeMismatch, "conv2d: bias must have shape (" +
                                              std::to_string(g.cout) + ")");
  }
  const std::size_t rows = g.cin * g.kh * g.kw;
  const std::size_t hw = g.ho * g.wo;
  const bool direct = g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0;

  auto cols = std::make_shared<std::vector<T>>();
  const T* colp = xv.data().data();
  if (!direct) {
    cols->resize(rows * hw);
    im2col(xv.data().data(), g, cols->data());
    colp = cols->data();
  }
  Tensor<T> out(Shape{g.cout, g.ho, g.wo});
  detail::gemm(wv.data().data(), false, colp, false, out.data().data(), g.cout, rows, hw, false);
  if (bias) {
    const Tensor<T>& bv = bias->value();
    for (std::size_t c = 0; c < g.cout; ++c) {
      T* o = out.data().data() + c * hw;
      for (std::size_t i = 0; i < hw; ++i) o[i] += bv[c];
    }
  }
  const std::size_t ix = x.id(), iw = w.id();
  const std::size_t ib = bias ? bias->id() : 0;
  const bool has_bias = bias != nullptr;
  std::vector<Var<T>> inputs{x, w};
  if (bias) inputs.push_back(*bias);
  return tape.record(std::move(out), inputs, [=](Tape<T>& t, const Tensor<T>& gy) {
    const T* colp2 = direct ? t.value(ix).data().data() : cols->data();
    if (t.requires_grad(iw)) {
      detail::gemm(gy.data().data(), false, colp2, true, t.grad_buffer(iw).data().data(),
                   g.cout, hw, rows, true);
    }
    if (has_bias && t.requires_grad(ib)) {
      Tensor<T>& gb = t.grad_buffer(ib);
      for (std::size_t c = 0; c < g.cout; ++c) gb[c] += sum_range(gy.data().data() + c * hw, hw, 1);
    }
    if (t.requires_grad(ix)) {
      if (direct) {
        detail::gemm(t.value(iw).data().data(), true, gy.data().data(), false,
                     t.grad_buffer(ix).data().data(), rows, g.cout, hw, true);
      } else {
        std::vector<T> gcols(rows * hw);
        detail::gemm(t.value(iw).data().data(), true, gy.data().data(), false, gcols.data(), rows,
                     g.cout, hw, false);
        col2im_add(gcols.data(), g, t.grad_buffer(ix).data().data());
      }
    }
  });
}

// ---- softmax / reductions -----------------------------------------------------

template <typename T>
Var<T> softmax(const Var<T>& x, std::size_t axis) {
  Tape<T>& tape = tape_of(x);
  const Tensor<T>& xv = x.value();
  const AxisSplit s = split_axis(xv.shape(), axis);
  Tensor<T> out(xv.shape());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      T m = xv[base];
      for (std::size_t k = 1; k < s.len; ++k) m = std::max(m, xv[base + k * s.inner]);
      T total = T(0);
      for (std::size_t k = 0; k < s.len; ++k) {
        const T e = std::exp(xv[base + k * s.inner] - m);
        out[base + k * s.inner] = e;
        total += e;
      }
      for (std::size_t k = 0; k < s.len; ++k) out[base + k * s.inner] /= total;
    }
  }
  const std::size_t ix = x.id();
  const std::size_t iy = tape.size();
  return tape.record(std::move(out), {x}, [=](Tape<T>& t, const Tensor<T>& g) {
    const Tensor<T>& y = t.value(iy);
    Tensor<T>& gx = t.grad_buffer(ix);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.len * s.inner + i;
        T dot = T(0);
        for (std::size_t k = 0; k < s.len; ++k) {
          const std::size_t j = base + k * s.inner;
          dot += g[j] * y[j];
        }
        for (std::size_t k = 0; k < s.len; ++k) {
          const std::size_t j = base + k * s.inner;
          gx[j] += y[j] * (g[j] - dot);
        }
      }
    }
  });
}

namespace {

template <typename T>
Var<T> sum_axis_scaled(const Var<T>& x, std::size_t axis, T scale) {
  Tape<T>& tape = tape_of(x);
  const Tensor<T>& xv = x.value();
  const AxisSplit s = split_axis(xv.shape(), axis);
  Tensor<T> out(drop_axis(xv.shape(), axis));
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      out[o * s.inner + i] = sum_range(xv.data().data() + o * s.len * s.inner + i, s.len, s.inner) * scale;
    }
  }
  const std::size_t ix = x.id();
  return tape.record(std::move(out), {x}, [=](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>& gx = t.grad_buffer(ix);
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t k = 0; k < s.len; ++k)
        for (std::size_t i = 0; i < s.inner; ++i)
          gx[(o * s.len + k) * s.inner + i] += g[o * s.inner + i] * scale;
  });
}

template <typename T>
Var<T> sum_all_scaled(const Var<T>& x, T scale) {
  Tape<T>& tape = tape_of(x);
  Tensor<T> out = Tensor<T>::scalar(sum_all(x.value()) * scale);
  const std::size_t ix = x.id();
  return tape.record(std::move(out), {x}, [=](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>& gx = t.grad_buffer(ix);
    const T gv = g[0] * scale;
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gv;
  });
}

}  // namespace

template <typename T>
Var<T> sum(const Var<T>& x, std::size_t axis) {
  return sum_axis_scaled(x, axis, T(1));
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  return sum_all_scaled(x, T(1));
}

template <typename T>
Var<T> mean(const Var<T>& x, std::size_t axis) {
  const std::size_t len = split_axis(x.shape(), axis).len;
  return sum_axis_scaled(x, axis, T(1) / static_cast<T>(len));
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  return sum_all_scaled(x, T(1) / static_cast<T>(x.size()));
}

template <typename T>
Var<T> max(const Var<T>& x, std::size_t axis) {
  Tape<T>& tape = tape_of(x);
  const Tensor<T>& xv = x.value();
  const AxisSplit s = split_axis(xv.shape(), axis);
  Tensor<T> out(drop_axis(xv.shape(), axis));
  auto arg = std::make_shared<std::vector<std::size_t>>(out.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      std::size_t best = 0;
      for (std::size_t k = 1; k < s.len; ++k)
        if (xv[base + k * s.inner] > xv[base + best * s.inner]) best = k;
      out[o * s.inner + i] = xv[base + best * s.inner];
      (*arg)[o * s.inner + i] = base + best * s.inner;
    }
  }
  const std::size_t ix = x.id();
  return tape.record(std::move(out), {x}, [=](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>& gx = t.grad_buffer(ix);
    for (std::size_t j = 0; j < g.size(); ++j) gx[(*arg)[j]] += g[j];
  });
}

// ---- shape ops ----------------------------------------------------------------

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Tape<T>& tape = tape_of(x);
  if (numel(shape) != x.size()) {
    throw Error(ErrorCode::ShapeMismatch,
                "reshape " + to_string(x.shape()) + " -> " + to_string(shape));
  }
  Tensor<T> out(std::move(shape), x.value().values());
  const std::size_t ix = x.id();
  return tape.record(std::move(out), {x}, [=](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>& gx = t.grad_buffer(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

template <typename T>
Var<T> transpose(const Var<T>& x, std::vector<std::size_t> perm) {
  Tape<T>& tape = tape_of(x);
  const Shape& in = x.shape();
  const std::size_t r = in.size();
  std::vector<bool> seen(r, false);
  if (perm.size() != r) throw Error(ErrorCode::ShapeMismatch, "transpose: permutation rank mismatch");
  for (std::size_t p : perm) {
    if (p >= r || seen[p]) throw Error(ErrorCode::InvalidArgument, "transpose: invalid permutation");
    seen[p] = true;
  }
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * in[i];
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = in[perm[i]];
  // src[j] = flat input index of output element j
  auto src = std::make_shared<std::vector<std::size_t>>(x.size());
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t j = 0; j < src->size(); ++j) {
    std::size_t off = 0;
    for (std::size_t d = 0; d < r; ++d) off += idx[d] * in_strides[perm[d]];
    (*src)[j] = off;
    for (std::size_t d = r; d-- > 0;) {
      if (++idx[d] < out_shape[d]) break;
      idx[d] = 0;
    }
  }
  Tensor<T> out(out_shape);
  const Tensor<T>& xv = x.value();
  for (std::size_t j = 0; j < out.size(); ++j) out[j] = xv[(*src)[j]];
  const std::size_t ix = x.id();
  return tape.record(std::move(out), {x}, [=](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>& gx = t.grad_buffer(ix);
    for (std::size_t j = 0; j < g.size(); ++j) gx[(*src)[j]] += g[j];
  });
}

template <typename T>
Var<T> transpose(const Var<T>& x) {
  if (x.shape().size() != 2) throw Error(ErrorCode::ShapeMismatch, "transpose() expects rank 2");
  return transpose(x, std::vector<std::size_t>{1, 0});
}

template <typename T>
Var<T> pad2d(const Var<T>& x, std::size_t pad_h, std::size_t pad_w) {
  Tape<T>& tape = tape_of(x);
  const Shape& in = x.shape();
  if (in.size() < 2) throw Error(ErrorCode::ShapeMismatch, "pad2d needs rank >= 2");
  const std::size_t h = in[in.size() - 2], w = in[in.size() - 1];
  const std::size_t ho = h + 2 * pad_h, wo = w + 2 * pad_w;
  const std::size_t planes = x.size() / (h * w);
  Shape out_shape = in;
  out_shape[in.size() - 2] = ho;
  out_shape[in.size() - 1] = wo;
  Tensor<T> out(out_shape);
  const Tensor<T>& xv = x.value();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j)
        out[(p * ho + i + pad_h) * wo + j + pad_w] = xv[(p * h + i) * w + j];
  const std::size_t ix = x.id();
  return tape.record(std::move(out), {x}, [=](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>& gx = t.grad_buffer(ix);
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j)
          gx[(p * h + i) * w + j] += g[(p * ho + i + pad_h) * wo + j + pad_w];
  });
}

template <typename T>
Var<T> upsample_nearest2d(const Var<T>& x, std::size_t factor) {
  Tape<T>& tape = tape_of(x);
  const Shape& in = x.shape();
  if (in.size() < 2 || factor == 0) throw Error(ErrorCode::ShapeMismatch, "upsample_nearest2d: bad input");
  const std::size_t h = in[in.size() - 2], w = in[in.size() - 1];
  const std::size_t ho = h * factor, wo = w * factor;
  const std::size_t planes = x.size() / (h * w);
  Shape out_shape = in;
  out_shape[in.size() - 2] = ho;
  out_shape[in.size() - 1] = wo;
  Tensor<T> out(out_shape);
  const Tensor<T>& xv = x.value();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < ho; ++i)
      for (std::size_t j = 0; j < wo; ++j)
        out[(p * ho + i) * wo + j] = xv[(p * h + i / factor) * w + j / factor];
  const std::size_t ix = x.id();
  return tape.record(std::move(out), {x}, [=](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>& gx = t.grad_buffer(ix);
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t i = 0; i < ho; ++i)
        for (std::size_t j = 0; j < wo; ++j)
          gx[(p * h + i / factor) * w + j / factor] += g[(p * ho + i) * wo + j];
  });
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& xs, std::size_t axis) {
  if (xs.empty()) throw Error(ErrorCode::InvalidArgument, "concat of nothing");
  Tape<T>& tape = tape_of(xs[0]);
  const Shape& first = xs[0].shape();
  if (axis >= first.size()) throw Error(ErrorCode::ShapeMismatch, "concat: axis out of range");
  Shape out_shape = first;
  out_shape[axis] = 0;
  std::vector<std::size_t> lens;
  for (const auto& v : xs) {
    if (v.tape() != &tape) throw Error(ErrorCode::InvalidArgument, "concat: mixed tapes");
    const Shape& s = v.shape();
    bool ok = s.size() == first.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == first[d];
    if (!ok) {
      throw Error(ErrorCode::ShapeMismatch, "concat: " + to_string(s) + " vs " + to_string(first) +
                                                " off axis " + std::to_string(axis));
    }
    lens.push_back(s[axis]);
    out_shape[axis] += s[axis];
  }
  const AxisSplit so = split_axis(out_shape, axis);
  Tensor<T> out(out_shape);
  std::vector<std::size_t> ids;
  std::size_t offset = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const Tensor<T>& v = xs[k].value();
    const std::size_t block = lens[k] * so.inner;
    for (std::size_t o = 0; o < so.outer; ++o)
      std::copy_n(v.data().data() + o * block, block,
                  out.data().data() + o * so.len * so.inner + offset * so.inner);
    offset += lens[k];
    ids.push_back(xs[k].id());
  }
  return tape.record(std::move(out), xs, [=](Tape<T>& t, const Tensor<T>& g) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      const std::size_t block = lens[k] * so.inner;
      if (t.requires_grad(ids[k])) {
        Tensor<T>& gx = t.grad_buffer(ids[k]);
        for (std::size_t o = 0; o < so.outer; ++o) {
          const T* src = g.data().data() + o * so.len * so.inner + off * so.inner;
          T* dst = gx.data().data() + o * block;
          for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
        }
      }
      off += lens[k];
    }
  });
}

template <typename T>
Var<T> slice(const Var<T>& x, std::size_t axis, std::size_t begin, std::size_t end) {
  Tape<T>& tape = tape_of(x);
  const AxisSplit s = split_axis(x.shape(), axis);
  if (begin >= end || end > s.len) {
    throw Error(ErrorCode::ShapeMismatch, "slice [" + std::to_string(begin) + "," +
                                              std::to_string(end) + ") of axis length " +
                                              std::to_string(s.len));
  }
  Shape out_shape = x.shape();
  out_shape[axis] = end - begin;
  const std::size_t block = (end - begin) * s.inner;
  Tensor<T> out(out_shape);
  const Tensor<T>& xv = x.value();
  for (std::size_t o = 0; o < s.outer; ++o)
    std::copy_n(xv.data().data() + (o * s.len + begin) * s.inner, block, out.data().data() + o * block);
  const std::size_t ix = x.id();
  return tape.record(std::move(out), {x}, [=](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>& gx = t.grad_buffer(ix);
    for (std::size_t o = 0; o < s.outer; ++o) {
      T* dst = gx.data().data() + (o * s.len + begin) * s.inner;
      const T* src = g.data().data() + o * block;
      for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
    }
  });
}

template <typename T>
Var<T> expand(const Var<T>& x, Shape shape) {
  Tape<T>& tape = tape_of(x);
  const Shape& in = x.shape();
  bool ok = in.size() == shape.size();
  for (std::size_t d = 0; ok && d < in.size(); ++d) ok = in[d] == shape[d] || in[d] == 1;
  if (!ok) throw Error(ErrorCode::ShapeMismatch, "expand " + to_string(in) + " -> " + to_string(shape));
  const std::size_t r = in.size();
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * in[i];
  auto src = std::make_shared<std::vector<std::size_t>>(numel(shape));
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t j = 0; j < src->size(); ++j) {
    std::size_t off = 0;
    for (std::size_t d = 0; d < r; ++d) off += (in[d] == 1 ? 0 : idx[d]) * in_strides[d];
    (*src)[j] = off;
    for (std::size_t d = r; d-- > 0;) {
      if (++idx[d] < shape[d]) break;
      idx[d] = 0;
    }
  }
  Tensor<T> out(shape);
  const Tensor<T>& xv = x.value();
  for (std::size_t j = 0; j < out.size(); ++j) out[j] = xv[(*src)[j]];
  const std::size_t ix = x.id();
  return tape.record(std::move(out), {x}, [=](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>& gx = t.grad_buffer(ix);
    for (std::size_t j = 0; j < g.size(); ++j) gx[(*src)[j]] += g[j];
  });
}

template <typename T>
Var<T> remap(const Var<T>& x, const SparseMap& map, Shape out_shape) {
  Tape<T>& tape = tape_of(x);
  if (map.in_size == 0 || x.size() % map.in_size != 0 ||
      (x.size() / map.in_size) * map.out_size() != numel(out_shape)) {
    throw Error(ErrorCode::ShapeMismatch, "remap: map " + std::to_string(map.in_size) + "->" +
                                              std::to_string(map.out_size()) + " on input " +
                                              to_string(x.shape()) + " to " + to_string(out_shape));
  }
  Tensor<T> out(std::move(out_shape));
  map.apply<T>(x.value().data(), out.data());
  const std::size_t ix = x.id();
  // The map is copied so the closure does not depend on caller lifetime.
  auto m = std::make_shared<SparseMap>(map);
  return tape.record(std::move(out), {x}, [=](Tape<T>& t, const Tensor<T>& g) {
    m->apply_transpose_add<T>(g.data(), t.grad_buffer(ix).data());
  });
}

// ---- composites -----------------------------------------------------------------

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  if (x.shape().size() != 1 || w.shape().size() != 2 || w.shape()[1] != x.shape()[0]) {
    throw Error(ErrorCode::DimMismatch, "linear: input " + to_string(x.shape()) + " vs weight " +
                                            to_string(w.shape()));
  }
  const std::size_t in = x.shape()[0];
  const std::size_t out = w.shape()[0];
  Var<T> y = reshape(matmul(w, reshape(x, Shape{in, 1})), Shape{out});
  return add(y, b);
}

template <typename T>
Var<T> mse(const Var<T>& a, const Var<T>& b) {
  Var<T> d = sub(a, b);
  return mean(mul(d, d));
}

// ---- gradient checks ------------------------------------------------------------

namespace {

// Central difference that backs off when the interval straddles a kink
// (relu, max): estimates at h and h/10 disagree there, while on smooth
// stretches they agree to O(h^2).
double central_difference(const std::function<double(double)>& at, double step) {
  auto diff = [&](double h) { return (at(h) - at(-h)) / (2.0 * h); };
  double coarse = diff(step);
  for (double h = step / 10; h >= step * 1e-3; h /= 10) {
    const double fine = diff(h);
    if (std::abs(fine - coarse) <= 1e-6 * std::max(1.0, std::abs(fine))) return coarse;
    coarse = fine;
  }
  return coarse;
}

}  // namespace

double grad_check(const std::function<Var<double>(Tape<double>&, const Var<double>&)>& f,
                  const Tensor<double>& x, double step) {
  Tape<double> tape;
  Var<double> xv = tape.leaf(x, true);
  Var<double> loss = f(tape, xv);
  tape.backward(loss);
  const Tensor<double> analytic = tape.grad(xv);

  auto eval = [&](const Tensor<double>& at) {
    Tape<double> t(false);
    return f(t, t.leaf(at, false)).value().item();
  };
  double worst = 0.0;
  Tensor<double> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double numeric = central_difference([&](double d) {
      probe[i] = x[i] + d;
      const double v = eval(probe);
      probe[i] = x[i];
      return v;
    }, step);
    worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric)));
  }
  return worst;
}

double grad_check_params(const std::function<Var<double>(Tape<double>&)>& f,
                         const std::vector<Parameter<double>*>& params, ParamGradCheckOptions opt) {
  std::vector<Tensor<double>> analytic;
  {
    Tape<double> tape;
    for (auto* p : params) tape.param(*p);
    Var<double> loss = f(tape);
    tape.backward(loss);
    for (auto* p : params) analytic.push_back(tape.grad(*p));
  }
  auto eval = [&] {
    Tape<double> t(false);
    return f(t).value().item();
  };
  std::mt19937_64 rng(opt.seed);
  double worst = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Parameter<double>& p = *params[pi];
    if (!p.trainable) continue;
    std::vector<std::size_t> coords;
    if (opt.coords_per_tensor == 0 || opt.coords_per_tensor >= p.value.size()) {
      coords.resize(p.value.size());
      std::iota(coords.begin(), coords.end(), std::size_t{0});
    } else {
      std::uniform_int_distribution<std::size_t> pick(0, p.value.size() - 1);
      for (std::size_t k = 0; k < opt.coords_per_tensor; ++k) coords.push_back(pick(rng));
    }
    for (std::size_t i : coords) {
      const double orig = p.value[i];
      const double numeric = central_difference([&](double d) {
        p.value[i] = orig + d;
        const double v = eval();
        p.value[i] = orig;
        return v;
      }, opt.step);
      worst = std::max(worst, std::abs(analytic[pi][i] - numeric) / std::max(1.0, std::abs(numeric)));
    }
  }
  return worst;
}

// ---- explicit instantiations ----------------------------------------------------

#define FLANS_INSTANTIATE(T)                                                              \
  template class Tape<T>;                                                                 \
  template Var<T> add(const Var<T>&, const Var<T>&);                                      \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                      \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                      \
  template Var<T> div(const Var<T>&, const Var<T>&);                                      \
  template Var<T> add_scalar(const Var<T>&, T);                                           \
  template Var<T> mul_scalar(const Var<T>&, T);                                           \
  template Var<T> matmul(const Var<T>&, const Var<T>&);                                   \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, const Var<T>*, Conv2dOptions);     \
  template Var<T> relu(const Var<T>&);                                                    \
  template Var<T> leaky_relu(const Var<T>&, T);                                           \
  template Var<T> sigmoid(const Var<T>&);                                                 \
  template Var<T> log(const Var<T>&);                                                     \
  template Var<T> exp(const Var<T>&);                                                     \
  template Var<T> clamp(const Var<T>&, T, T);                                             \
  template Var<T> softmax(const Var<T>&, std::size_t);                                    \
  template Var<T> sum(const Var<T>&, std::size_t);                                        \
  template Var<T> sum(const Var<T>&);                                                     \
  template Var<T> mean(const Var<T>&, std::size_t);                                       \
  template Var<T> mean(const Var<T>&);                                                    \
  template Var<T> max(const Var<T>&, std::size_t);                                        \
  template Var<T> reshape(const Var<T>&, Shape);                                          \
  template Var<T> transpose(const Var<T>&, std::vector<std::size_t>);                     \
  template Var<T> transpose(const Var<T>&);                                               \
  template Var<T> pad2d(const Var<T>&, std::size_t, std::size_t);                         \
  template Var<T> upsample_nearest2d(const Var<T>&, std::size_t);                         \
  template Var<T> concat(const std::vector<Var<T>>&, std::size_t);                        \
  template Var<T> slice(const Var<T>&, std::size_t, std::size_t, std::size_t);            \
  template Var<T> expand(const Var<T>&, Shape);                                           \
  template Var<T> remap(const Var<T>&, const SparseMap&, Shape);                          \
  template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>&);                    \
  template Var<T> mse(const Var<T>&, const Var<T>&);

FLANS_INSTANTIATE(float)
FLANS_INSTANTIATE(double)

#undef FLANS_INSTANTIATE

}  // namespace flans
