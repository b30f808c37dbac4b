// SPDX-License-Identifier: Apache-2.0
//
// AdamW with decoupled weight decay, cosine annealing, and a gradient
// accumulator that sums per-sample tapes into one batch gradient.
#pragma once

#include <cstddef>
#include <vector>

#include "flans/autodiff.hpp"

namespace flans {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

template <typename T>
class AdamW {
 public:
  // Only trainable parameters are updated; the set is fixed at construction.
  AdamW(std::vector<Parameter<T>*> params, AdamWConfig config = {});

  // grads[i] belongs to the i-th parameter passed in.
  void step(const std::vector<Tensor<T>>& grads, double lr);
  std::size_t steps() const noexcept { return t_; }
  const std::vector<Parameter<T>*>& params() const noexcept { return params_; }

 private:
  std::vector<Parameter<T>*> params_;
  AdamWConfig config_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

// lr(t) = floor + (base - floor) (1 + cos(pi t / period)) / 2, clamped at
// t = period.
class CosineSchedule {
 public:
  CosineSchedule(double base, double floor, std::size_t period);
  double at(std::size_t step) const;

 private:
  double base_, floor_;
  std::size_t period_;
};

template <typename T>
class GradAccumulator {
 public:
  explicit GradAccumulator(const std::vector<Parameter<T>*>& params);

  // Adds the parameter gradients left on a tape after backward().
  void add(const Tape<T>& tape);
  std::size_t count() const noexcept { return count_; }
  // Mean over the accumulated tapes; resets the accumulator.
  std::vector<Tensor<T>> take_mean();

 private:
  std::vector<Parameter<T>*> params_;
  std::vector<Tensor<T>> sums_;
  std::size_t count_ = 0;
};

}  // namespace flans
