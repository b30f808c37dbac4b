// SPDX-License-Identifier: Apache-2.0
#include "flans/optim.hpp"

#include <cmath>
#include <numbers>

namespace flans {

template <typename T>
AdamW<T>::AdamW(std::vector<Parameter<T>*> params, AdamWConfig config) : config_(config) {
  if (!(config.beta1 >= 0 && config.beta1 < 1 && config.beta2 >= 0 && config.beta2 < 1 && config.eps > 0 &&
        config.weight_decay >= 0))
    throw Error(ErrorCode::InvalidArgument, "bad AdamW hyperparameters");
  for (auto* p : params) {
    if (!p->trainable) continue;
    params_.push_back(p);
    m_.emplace_back(p->value.size(), 0.0);
    v_.emplace_back(p->value.size(), 0.0);
  }
}

template <typename T>
void AdamW<T>::step(const std::vector<Tensor<T>>& grads, double lr) {
  if (grads.size() != params_.size())
    throw Error(ErrorCode::ShapeMismatch, "AdamW got " + std::to_string(grads.size()) + " gradients for " +
                                              std::to_string(params_.size()) + " parameters");
  if (!(lr > 0)) throw Error(ErrorCode::InvalidArgument, "learning rate must be positive");
  ++t_;
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& w = params_[i]->value;
    const auto& g = grads[i];
    if (g.shape() != w.shape())
      throw Error(ErrorCode::ShapeMismatch, "gradient shape for " + params_[i]->name);
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double gk = static_cast<double>(g[k]);
      m[k] = config_.beta1 * m[k] + (1.0 - config_.beta1) * gk;
      v[k] = config_.beta2 * v[k] + (1.0 - config_.beta2) * gk * gk;
      double wk = static_cast<double>(w[k]);
      wk -= lr * config_.weight_decay * wk;
      wk -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + config_.eps);
      w[k] = static_cast<T>(wk);
    }
  }
}

CosineSchedule::CosineSchedule(double base, double floor, std::size_t period)
    : base_(base), floor_(floor), period_(period) {
  if (!(base > 0) || floor < 0 || floor > base || period == 0)
    throw Error(ErrorCode::InvalidArgument, "cosine schedule needs base > 0, 0 <= floor <= base, period > 0");
}

double CosineSchedule::at(std::size_t step) const {
  const double t = static_cast<double>(std::min(step, period_)) / static_cast<double>(period_);
  return floor_ + (base_ - floor_) * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

template <typename T>
GradAccumulator<T>::GradAccumulator(const std::vector<Parameter<T>*>& params) : params_(params) {
  for (auto* p : params_) sums_.emplace_back(p->value.shape());
}

template <typename T>
void GradAccumulator<T>::add(const Tape<T>& tape) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const Tensor<T> g = tape.grad(*params_[i]);
    auto& s = sums_[i];
    for (std::size_t k = 0; k < s.size(); ++k) s[k] += g[k];
  }
  ++count_;
}

template <typename T>
std::vector<Tensor<T>> GradAccumulator<T>::take_mean() {
  if (count_ == 0) throw Error(ErrorCode::InvalidArgument, "no gradients accumulated");
  std::vector<Tensor<T>> out;
  const T scale = T(1) / static_cast<T>(count_);
  for (auto& s : sums_) {
    Tensor<T> m(s.shape());
    for (std::size_t k = 0; k < s.size(); ++k) m[k] = s[k] * scale;
    out.push_back(std::move(m));
    s = Tensor<T>(s.shape());
  }
  count_ = 0;
  return out;
}

template class AdamW<float>;
template class AdamW<double>;
template class GradAccumulator<float>;
template class GradAccumulator<double>;

}  // namespace flans
