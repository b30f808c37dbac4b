// SPDX-License-Identifier: Apache-2.0
#include "flans/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace flans {

void LossConfig::validate() const {
  if (!(dice_smooth > 0.0)) throw Error(ErrorCode::InvalidArgument, "dice smoothing must be positive");
  if (w_dice < 0.0 || w_ce_mask < 0.0 || w_ce_intent < 0.0) {
    throw Error(ErrorCode::InvalidArgument, "loss weights must be non-negative");
  }
}

namespace {

template <typename T>
void same_shape(const Var<T>& a, const Var<T>& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw Error(ErrorCode::ShapeMismatch,
                std::string(what) + ": " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

void same_shape(const Mask& a, const Mask& b) {
  if (a.shape() != b.shape()) {
    throw Error(ErrorCode::ShapeMismatch, to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

// 1-D squared distance transform of a sampled function (lower envelope of
// parabolas). f holds squared distances along one line.
void edt_1d(std::vector<std::int64_t>& f, std::vector<std::int64_t>& scratch_d, std::vector<long>& v,
            std::vector<double>& z) {
  const long n = static_cast<long>(f.size());
  constexpr std::int64_t inf = std::numeric_limits<std::int64_t>::max() / 4;
  long k = -1;
  for (long q = 0; q < n; ++q) {
    if (f[q] >= inf) continue;
    while (k >= 0) {
      const long p = v[k];
      const double s = (static_cast<double>(f[q] + q * q) - static_cast<double>(f[p] + p * p)) /
                       (2.0 * static_cast<double>(q - p));
      if (s <= z[k]) {
        --k;
      } else {
        break;
      }
    }
    ++k;
    v[k] = q;
    z[k] = k == 0 ? -std::numeric_limits<double>::infinity()
                  : (static_cast<double>(f[q] + q * q) - static_cast<double>(f[v[k - 1]] + v[k - 1] * v[k - 1])) /
                        (2.0 * static_cast<double>(q - v[k - 1]));
  }
  if (k < 0) return;  // no finite samples on this line
  long j = 0;
  for (long q = 0; q < n; ++q) {
    while (j < k && z[j + 1] < static_cast<double>(q)) ++j;
    const long p = v[j];
    scratch_d[q] = (q - p) * (q - p) + f[p];
  }
  std::copy(scratch_d.begin(), scratch_d.end(), f.begin());
}

// Squared Euclidean distance from every pixel to the nearest set pixel.
std::vector<std::int64_t> squared_distance_to(const std::vector<std::uint8_t>& set, std::size_t h, std::size_t w) {
  constexpr std::int64_t inf = std::numeric_limits<std::int64_t>::max() / 4;
  std::vector<std::int64_t> d(h * w);
  for (std::size_t i = 0; i < h * w; ++i) d[i] = set[i] ? 0 : inf;
  const std::size_t len = std::max(h, w);
  std::vector<std::int64_t> line, scratch(len);
  std::vector<long> v(len);
  std::vector<double> z(len + 1);
  for (std::size_t j = 0; j < w; ++j) {
    line.resize(h);
    scratch.resize(h);
    for (std::size_t i = 0; i < h; ++i) line[i] = d[i * w + j];
    edt_1d(line, scratch, v, z);
    for (std::size_t i = 0; i < h; ++i) d[i * w + j] = line[i];
  }
  for (std::size_t i = 0; i < h; ++i) {
    line.assign(d.begin() + static_cast<std::ptrdiff_t>(i * w), d.begin() + static_cast<std::ptrdiff_t>((i + 1) * w));
    scratch.resize(w);
    edt_1d(line, scratch, v, z);
    std::copy(line.begin(), line.end(), d.begin() + static_cast<std::ptrdiff_t>(i * w));
  }
  return d;
}

std::pair<std::size_t, std::size_t> plane_dims(const Mask& m) {
  if (m.rank() < 2 || m.size() != m.dim(m.rank() - 1) * m.dim(m.rank() - 2)) {
    throw Error(ErrorCode::ShapeMismatch, "expected a single 2-D mask, got " + to_string(m.shape()));
  }
  return {m.dim(m.rank() - 2), m.dim(m.rank() - 1)};
}

}  // namespace

template <typename T>
Var<T> dice_loss(const Var<T>& pred, const Var<T>& target, double eps) {
  same_shape(pred, target, "dice_loss");
  const T e = static_cast<T>(eps);
  Var<T> inter = sum(pred * target);
  Var<T> denom = add_scalar(sum(pred) + sum(target), e);
  return T(1) - add_scalar(mul_scalar(inter, T(2)), e) / denom;
}

template <typename T>
Var<T> ce_mask_loss(const Var<T>& pred, const Var<T>& target) {
  same_shape(pred, target, "ce_mask_loss");
  Var<T> p = clamp(pred, T(1e-7), T(1) - T(1e-7));
  Var<T> pos = target * log(p);
  Var<T> neg = (T(1) - target) * log(T(1) - p);
  return mul_scalar(mean(pos + neg), T(-1));
}

template <typename T>
Var<T> ce_intent_loss(const Var<T>& logits, int label) {
  if (logits.shape().size() != 1) {
    throw Error(ErrorCode::ShapeMismatch, "intent logits must be a vector, got " + to_string(logits.shape()));
  }
  const auto classes = logits.shape()[0];
  if (label < 0 || static_cast<std::size_t>(label) >= classes) {
    throw Error(ErrorCode::ClassOutOfRange,
                "class " + std::to_string(label) + " outside [0, " + std::to_string(classes) + ")");
  }
  // The shift is a constant; log-sum-exp does not depend on it.
  const auto& v = logits.value().values();
  const T m = *std::max_element(v.begin(), v.end());
  Var<T> shifted = add_scalar(logits, -m);
  Var<T> lse = log(sum(exp(shifted)));
  Var<T> picked = reshape(slice(shifted, 0, static_cast<std::size_t>(label), static_cast<std::size_t>(label) + 1), Shape{});
  return lse - picked;
}

template <typename T>
Var<T> combined_loss(const LossConfig& config, const Var<T>& pred, const Var<T>& target,
                     const std::optional<IntentPair<T>>& intent) {
  config.validate();
  if (config.include_intent_term != intent.has_value()) {
    throw Error(ErrorCode::MissingIntentPair, config.include_intent_term
                                                  ? "informed loss needs intent logits and a label"
                                                  : "agnostic loss takes no intent pair");
  }
  Var<T> loss = mul_scalar(dice_loss(pred, target, config.dice_smooth), static_cast<T>(config.w_dice)) +
                mul_scalar(ce_mask_loss(pred, target), static_cast<T>(config.w_ce_mask));
  if (intent) {
    loss = loss + mul_scalar(ce_intent_loss(intent->logits, intent->label), static_cast<T>(config.w_ce_intent));
  }
  return loss;
}

template <typename T>
Mask binarize(const Tensor<T>& probabilities, double threshold) {
  Mask m(probabilities.shape());
  for (std::size_t i = 0; i < m.size(); ++i) {
    m[i] = static_cast<double>(probabilities[i]) >= threshold ? 1 : 0;
  }
  return m;
}

double dice_metric(const Mask& pred, const Mask& target) {
  same_shape(pred, target);
  std::size_t a = 0, b = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, t = target[i] != 0;
    a += p;
    b += t;
    both += p && t;
  }
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(a + b);
}

std::vector<std::uint8_t> inner_boundary(const Mask& m) {
  const auto [h, w] = plane_dims(m);
  std::vector<std::uint8_t> out(h * w, 0);
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      if (!m[i * w + j]) continue;
      const bool edge = i == 0 || j == 0 || i + 1 == h || j + 1 == w;
      if (edge || !m[(i - 1) * w + j] || !m[(i + 1) * w + j] || !m[i * w + j - 1] || !m[i * w + j + 1]) {
        out[i * w + j] = 1;
      }
    }
  }
  return out;
}

double nsd_metric(const Mask& pred, const Mask& target, int tau) {
  same_shape(pred, target);
  if (tau < 0) throw Error(ErrorCode::InvalidArgument, "NSD tolerance must be non-negative");
  const auto [h, w] = plane_dims(pred);
  const auto ba = inner_boundary(pred);
  const auto bb = inner_boundary(target);
  const auto da = squared_distance_to(ba, h, w);
  const auto db = squared_distance_to(bb, h, w);
  const std::int64_t t2 = static_cast<std::int64_t>(tau) * tau;
  std::size_t na = 0, nb = 0, hits = 0;
  for (std::size_t i = 0; i < h * w; ++i) {
    if (ba[i]) {
      ++na;
      hits += db[i] <= t2;
    }
    if (bb[i]) {
      ++nb;
      hits += da[i] <= t2;
    }
  }
  if (na + nb == 0) return 1.0;
  return static_cast<double>(hits) / static_cast<double>(na + nb);
}

#define FLANS_INSTANTIATE(T)                                                                        \
  template Var<T> dice_loss(const Var<T>&, const Var<T>&, double);                                  \
  template Var<T> ce_mask_loss(const Var<T>&, const Var<T>&);                                       \
  template Var<T> ce_intent_loss(const Var<T>&, int);                                               \
  template Var<T> combined_loss(const LossConfig&, const Var<T>&, const Var<T>&,                    \
                                const std::optional<IntentPair<T>>&);                               \
  template Mask binarize(const Tensor<T>&, double);

FLANS_INSTANTIATE(float)
FLANS_INSTANTIATE(double)

#undef FLANS_INSTANTIATE

}  // namespace flans
