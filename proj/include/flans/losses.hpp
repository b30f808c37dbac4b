// SPDX-License-Identifier: Apache-2.0
//
// Training objectives and evaluation metrics for binary per-prompt masks.
#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "flans/autodiff.hpp"

namespace flans {

struct LossConfig {
  double dice_smooth = 1e-6;
  bool include_intent_term = true;
  double w_dice = 1.0;
  double w_ce_mask = 1.0;
  double w_ce_intent = 1.0;

  void validate() const;
};

// 1 - (2 sum(p t) + eps) / (sum p + sum t + eps)
template <typename T>
Var<T> dice_loss(const Var<T>& pred, const Var<T>& target, double eps = 1e-6);

// Mean binary cross-entropy with pred clamped to [1e-7, 1 - 1e-7].
template <typename T>
Var<T> ce_mask_loss(const Var<T>& pred, const Var<T>& target);

// Softmax cross-entropy of logits [C] against a class id.
template <typename T>
Var<T> ce_intent_loss(const Var<T>& logits, int label);

template <typename T>
struct IntentPair {
  Var<T> logits;
  int label;
};

// w_dice dice + w_ce_mask ce_mask (+ w_ce_intent ce_intent). The intent
// pair must be given exactly when the config includes the intent term.
template <typename T>
Var<T> combined_loss(const LossConfig& config, const Var<T>& pred, const Var<T>& target,
                     const std::optional<IntentPair<T>>& intent);

// Probability map -> binary mask (p >= threshold).
template <typename T>
Mask binarize(const Tensor<T>& probabilities, double threshold = 0.5);

// 2|A n B| / (|A| + |B|); 1 when both are empty.
double dice_metric(const Mask& pred, const Mask& target);

// Inner boundary under 4-connectivity: mask pixels with a background
// 4-neighbour or lying on the image border.
std::vector<std::uint8_t> inner_boundary(const Mask& m);

// Normalized surface distance with Euclidean tolerance tau (pixels).
double nsd_metric(const Mask& pred, const Mask& target, int tau = 2);

}  // namespace flans
