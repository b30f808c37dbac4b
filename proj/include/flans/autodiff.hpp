// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode automatic differentiation over Tensor<T>.
//
// A Tape records every primitive applied to Vars that depend on a trainable
// leaf. backward() seeds the scalar loss with 1 and visits the recorded nodes
// in exact reverse order, accumulating into per-node gradient buffers. A tape
// is single-use: a second backward() throws TapeConsumed.
//
// Shapes must match exactly; the only implicit broadcast is a one-element
// operand against a tensor. Everything else goes through expand().
#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "flans/sparse_map.hpp"
#include "flans/tensor.hpp"

namespace flans {

// Global numerics switches. Both default to off.
void set_pairwise_summation(bool enabled) noexcept;
bool pairwise_summation() noexcept;
void set_debug_checks(bool enabled) noexcept;
bool debug_checks() noexcept;

// Flush-to-zero and denormals-are-zero for the calling thread. Saturated
// sigmoids otherwise push the backward pass into subnormal floats, which
// run an order of magnitude slower. No-op off x86.
void set_flush_denormals(bool enabled) noexcept;

class FlushDenormalsScope {
 public:
  FlushDenormalsScope();
  ~FlushDenormalsScope();
  FlushDenormalsScope(const FlushDenormalsScope&) = delete;
  FlushDenormalsScope& operator=(const FlushDenormalsScope&) = delete;

 private:
  unsigned saved_ = 0;
};

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  bool trainable = true;
};

// Named learnable tensors owned by one network. Addresses are stable for
// the lifetime of the store, so tapes may key on them.
template <typename T>
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore& other) { *this = other; }
  ParameterStore& operator=(const ParameterStore& other) {
    if (this == &other) return *this;
    items_.clear();
    for (const auto& p : other.items_) items_.push_back(std::make_unique<Parameter<T>>(*p));
    return *this;
  }
  ParameterStore(ParameterStore&&) noexcept = default;
  ParameterStore& operator=(ParameterStore&&) noexcept = default;

  Parameter<T>& add(std::string name, Tensor<T> init) {
    if (find(name)) throw Error(ErrorCode::InvalidArgument, "duplicate parameter " + name);
    items_.push_back(std::make_unique<Parameter<T>>(Parameter<T>{std::move(name), std::move(init), true}));
    return *items_.back();
  }

  Parameter<T>* find(const std::string& name) {
    for (auto& p : items_) if (p->name == name) return p.get();
    return nullptr;
  }
  const Parameter<T>* find(const std::string& name) const {
    for (const auto& p : items_) if (p->name == name) return p.get();
    return nullptr;
  }
  Parameter<T>& get(const std::string& name) {
    if (auto* p = find(name)) return *p;
    throw Error(ErrorCode::InvalidArgument, "no parameter named " + name);
  }
  const Parameter<T>& get(const std::string& name) const {
    if (const auto* p = find(name)) return *p;
    throw Error(ErrorCode::InvalidArgument, "no parameter named " + name);
  }

  void set_trainable(bool trainable) {
    for (auto& p : items_) p->trainable = trainable;
  }

  std::size_t size() const noexcept { return items_.size(); }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : items_) n += p->value.size();
    return n;
  }

  std::vector<Parameter<T>*> all() {
    std::vector<Parameter<T>*> out;
    for (auto& p : items_) out.push_back(p.get());
    return out;
  }
  std::vector<const Parameter<T>*> all() const {
    std::vector<const Parameter<T>*> out;
    for (const auto& p : items_) out.push_back(p.get());
    return out;
  }

 private:
  std::vector<std::unique_ptr<Parameter<T>>> items_;
};

template <typename T>
class Tape;

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
template <typename T>
class Var {
 public:
  Var() = default;

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
  bool requires_grad() const;
  Tape<T>* tape() const noexcept { return tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape<T>;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor<T>& out_grad)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value);
  Var<T> leaf(Tensor<T> value, bool requires_grad = true);
  // One leaf per parameter per tape; repeated calls return the same node.
  Var<T> param(const Parameter<T>& p);

  // Appends an operation result. `fn` runs during backward() only if some
  // input requires a gradient.
  Var<T> record(Tensor<T> value, const std::vector<Var<T>>& inputs, BackwardFn fn);

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  bool grad_enabled() const noexcept { return grad_enabled_; }

  // Gradient accumulator for a node, zero-initialised on first use.
  Tensor<T>& grad_buffer(std::size_t id);

  void backward(const Var<T>& loss);

  Tensor<T> grad(const Var<T>& v) const;
  Tensor<T> grad(const Parameter<T>& p) const;

  bool consumed() const noexcept { return consumed_; }
  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  std::deque<Node> nodes_;
  std::unordered_map<const Parameter<T>*, std::size_t> params_;
  bool grad_enabled_;
  bool consumed_ = false;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape_->value(id_);
}

template <typename T>
bool Var<T>::requires_grad() const {
  return tape_->requires_grad(id_);
}

// ---- primitive operations -------------------------------------------------

template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> div(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> add_scalar(const Var<T>& a, T s);
template <typename T> Var<T> mul_scalar(const Var<T>& a, T s);

// [M,K] x [K,N] -> [M,N]
template <typename T> Var<T> matmul(const Var<T>& a, const Var<T>& b);

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t pad = 0;
};
// Cross-correlation of x [Cin,H,W] with w [Cout,Cin,kh,kw], zero padding,
// optional bias [Cout]. Output [Cout,Ho,Wo].
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>* bias, Conv2dOptions opt = {});
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, Conv2dOptions opt = {}) {
  return conv2d<T>(x, w, nullptr, opt);
}

template <typename T> Var<T> relu(const Var<T>& x);
template <typename T> Var<T> leaky_relu(const Var<T>& x, T slope = T(0.01));
template <typename T> Var<T> sigmoid(const Var<T>& x);
template <typename T> Var<T> log(const Var<T>& x);
template <typename T> Var<T> exp(const Var<T>& x);
template <typename T> Var<T> clamp(const Var<T>& x, T lo, T hi);
template <typename T> Var<T> softmax(const Var<T>& x, std::size_t axis);

// Reductions drop the reduced axis. The axis-free forms reduce everything to
// a rank-0 scalar.
template <typename T> Var<T> sum(const Var<T>& x, std::size_t axis);
template <typename T> Var<T> sum(const Var<T>& x);
template <typename T> Var<T> mean(const Var<T>& x, std::size_t axis);
template <typename T> Var<T> mean(const Var<T>& x);
template <typename T> Var<T> max(const Var<T>& x, std::size_t axis);

template <typename T> Var<T> reshape(const Var<T>& x, Shape shape);
template <typename T> Var<T> transpose(const Var<T>& x, std::vector<std::size_t> perm);
template <typename T> Var<T> transpose(const Var<T>& x);  // rank 2
template <typename T> Var<T> pad2d(const Var<T>& x, std::size_t pad_h, std::size_t pad_w);
template <typename T> Var<T> upsample_nearest2d(const Var<T>& x, std::size_t factor);
template <typename T> Var<T> concat(const std::vector<Var<T>>& xs, std::size_t axis);
template <typename T> Var<T> slice(const Var<T>& x, std::size_t axis, std::size_t begin, std::size_t end);
// Explicit broadcast: same rank, every source dim equals the target or is 1.
template <typename T> Var<T> expand(const Var<T>& x, Shape shape);
// Blockwise fixed linear map (permutations, gathers, bilinear resampling).
template <typename T> Var<T> remap(const Var<T>& x, const SparseMap& map, Shape out_shape);

template <typename T> Var<T> operator+(const Var<T>& a, const Var<T>& b) { return add(a, b); }
template <typename T> Var<T> operator-(const Var<T>& a, const Var<T>& b) { return sub(a, b); }
template <typename T> Var<T> operator*(const Var<T>& a, const Var<T>& b) { return mul(a, b); }
template <typename T> Var<T> operator/(const Var<T>& a, const Var<T>& b) { return div(a, b); }
template <typename T> Var<T> operator+(const Var<T>& a, T s) { return add_scalar(a, s); }
template <typename T> Var<T> operator*(const Var<T>& a, T s) { return mul_scalar(a, s); }
template <typename T> Var<T> operator*(T s, const Var<T>& a) { return mul_scalar(a, s); }
template <typename T> Var<T> operator-(T s, const Var<T>& a) { return add_scalar(mul_scalar(a, T(-1)), s); }

// ---- composite helpers ----------------------------------------------------

// y = W x + b for x [in], W [out,in], b [out].
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b);

template <typename T>
Var<T> mse(const Var<T>& a, const Var<T>& b);

// ---- gradient checking ----------------------------------------------------

// Max over coordinates of |analytic - central difference| / max(1, |central|).
// The step shrinks (down to step/1000) where it straddles a kink.
double grad_check(const std::function<Var<double>(Tape<double>&, const Var<double>&)>& f,
                  const Tensor<double>& x, double step = 1e-5);

struct ParamGradCheckOptions {
  double step = 1e-5;
  // 0 checks every coordinate; otherwise a seeded random subset per tensor.
  std::size_t coords_per_tensor = 0;
  std::uint64_t seed = 0;
};

// Same measure, taken over the coordinates of the given parameters of a
// scalar function that binds them through Tape::param.
double grad_check_params(const std::function<Var<double>(Tape<double>&)>& f,
                         const std::vector<Parameter<double>*>& params,
                         ParamGradCheckOptions opt = {});

}  // namespace flans
