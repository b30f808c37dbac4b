// SPDX-License-Identifier: Apache-2.0
//
// Prompt-conditioned U-shaped segmentation backbone and the full model
// f(x) = act(h(x), p(act(h(x)^-1, x), t)).
#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "flans/autodiff.hpp"
#include "flans/canonicalizer.hpp"
#include "flans/text_encoder.hpp"

namespace flans {

struct SegNetConfig {
  std::vector<int> channels = {16, 32, 64};
  int embed_dim = 64;
  // Two extra input planes holding x and y in [-1, 1].
  bool coord_channels = true;
};

// Encoder stages at full, 1/2 and 1/4 resolution plus a 1/8 bottleneck
// with a pooled image context vector. Every encoder stage (bottleneck
// included) is modulated by FiLM, gamma = 1 + A t and beta = B t, with A and
// B zero at init. Mirrored decoder with skip connections, 1x1 logit head.
template <typename T>
class SegBackbone {
 public:
  SegBackbone(SegNetConfig config, std::uint64_t seed);

  const SegNetConfig& config() const noexcept { return config_; }
  ParameterStore<T>& params() noexcept { return params_; }
  const ParameterStore<T>& params() const noexcept { return params_; }
  std::size_t film_stages() const noexcept { return config_.channels.size() + 1; }

  // image [1, n, n] with n divisible by 8 -> logits [n, n]. A null
  // embedding means zero conditioning (gamma 1, beta 0).
  Var<T> forward(Tape<T>& tape, const Var<T>& image, const Var<T>* embedding) const;

 private:
  Var<T> film(Tape<T>& tape, const Var<T>& h, std::size_t stage, const Var<T>* embedding) const;
  Var<T> conv(Tape<T>& tape, const std::string& name, const Var<T>& x, std::size_t stride) const;

  SegNetConfig config_;
  ParameterStore<T> params_;
};

enum class OutputMode { Invariant, Equivariant };

struct ModelConfig {
  int classes = 4;
  CanonicalizerConfig canon;
  TextEncoderConfig text;
  SegNetConfig seg;
  double alpha = 0.5;
};

struct SegmentOptions {
  bool canonicalize = true;
  OutputMode mode = OutputMode::Equivariant;
  bool zero_conditioning = false;
};

template <typename T>
struct SegmentResult {
  Tensor<T> probabilities;  // [n, n]
  Tensor<T> intent_logits;  // [C]
  GroupElement g_hat;
};

template <typename T>
class FlansModel {
 public:
  FlansModel(Vocabulary vocab, ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const noexcept { return config_; }
  Canonicalizer<T>& canonicalizer() noexcept { return canon_; }
  const Canonicalizer<T>& canonicalizer() const noexcept { return canon_; }
  TextEncoderNet<T>& text() noexcept { return text_; }
  const TextEncoderNet<T>& text() const noexcept { return text_; }
  IntentionHead<T>& head() noexcept { return head_; }
  const IntentionHead<T>& head() const noexcept { return head_; }
  SegBackbone<T>& backbone() noexcept { return backbone_; }
  const SegBackbone<T>& backbone() const noexcept { return backbone_; }

  // Every parameter store, canonicalizer first.
  std::vector<ParameterStore<T>*> stores();
  std::vector<const ParameterStore<T>*> stores() const;
  std::vector<Parameter<T>*> parameters();

  // x [n, n] in [0, 1]. Throws NonSquareImage, UnnormalizedInput.
  SegmentResult<T> segment(const Tensor<T>& image, const std::string& prompt,
                           const SegmentOptions& options = {}) const;

  // Differentiable probabilities [n, n] for an image already in the frame
  // the backbone should see; no canonicalization here.
  struct Forward {
    Var<T> probabilities;
    Var<T> embedding;
    Var<T> intent_logits;
  };
  Forward forward(Tape<T>& tape, const Var<T>& image, const std::vector<int>& token_ids,
                  bool zero_conditioning = false) const;
  Forward forward(Tape<T>& tape, const Tensor<T>& image, const std::vector<int>& token_ids,
                  bool zero_conditioning = false) const {
    return forward(tape, tape.constant(image), token_ids, zero_conditioning);
  }

 private:
  ModelConfig config_;
  Canonicalizer<T> canon_;
  TextEncoderNet<T> text_;
  IntentionHead<T> head_;
  SegBackbone<T> backbone_;
};

// True when some probability reaches alpha.
template <typename T>
bool existence_filter(const Tensor<T>& probabilities, double alpha = 0.5);

// Throws NonSquareImage for non-square input and UnnormalizedInput for
// values outside [0, 1] by more than 1e-6.
template <typename T>
void check_image(const Tensor<T>& image);

}  // namespace flans
