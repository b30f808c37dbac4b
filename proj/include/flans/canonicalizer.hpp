// SPDX-License-Identifier: Apache-2.0
//
// Equivariant canonicalization network h: X -> G.
//
// Feature maps carry an explicit group axis in the regular representation:
// a tensor of shape [C * |G|, H, W] stores channel c at group element e in
// row c * |G| + e. Under g the map transforms as
//   f'[c, e] = act(g, f[c, g^-1 e]).
// Energies are the per-element mean of the last layer, so
//   energies(act(g, x))[e] = energies(x)[g^-1 e]
// and the argmax element satisfies h(act(g, x)) = g h(x).
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "flans/autodiff.hpp"
#include "flans/group.hpp"

namespace flans {

struct CanonicalizerConfig {
  int group_order = 4;
  int layers = 3;
  int hidden = 8;
  int kernel = 9;
  // Average-pool factor applied before the first layer (reduced to a divisor
  // of the image side so pooling commutes with the group action).
  int pool = 4;
  // Energies within this relative distance of the maximum count as tied;
  // ties resolve to the lowest element index.
  double tie_tolerance = 1e-6;
};

// Applies g to a regular-representation feature map [C * |G|, H, W].
template <typename T>
Tensor<T> act_on_group_features(const GroupAction& action, const GroupElement& g,
                                const Tensor<T>& features);

// First layer: plain image -> group features. One base kernel per output
// channel, evaluated at every transformed copy.
class LiftingConvLayer {
 public:
  LiftingConvLayer(std::string prefix, int in_channels, int out_channels, int kernel,
                   const GroupAction& action);

  template <typename T>
  void init(ParameterStore<T>& store, std::mt19937_64& rng) const;
  template <typename T>
  Var<T> forward(Tape<T>& tape, const ParameterStore<T>& store, const Var<T>& x) const;

  const std::string& weight_name() const { return weight_; }
  int out_channels() const { return cout_; }

 private:
  std::string weight_, bias_;
  int cin_, cout_, k_;
  std::size_t g_;
  SparseMap bank_, bias_map_;
};

// Group features -> group features with kernels [Cout, Cin, |G|, k, k].
class GroupConvLayer {
 public:
  GroupConvLayer(std::string prefix, int in_channels, int out_channels, int kernel,
                 const GroupAction& action);

  template <typename T>
  void init(ParameterStore<T>& store, std::mt19937_64& rng) const;
  template <typename T>
  Var<T> forward(Tape<T>& tape, const ParameterStore<T>& store, const Var<T>& x) const;

  const std::string& weight_name() const { return weight_; }
  int out_channels() const { return cout_; }

 private:
  std::string weight_, bias_;
  int cin_, cout_, k_;
  std::size_t g_;
  SparseMap bank_, bias_map_;
};

template <typename T>
struct Canonicalized {
  Tensor<T> image;
  GroupElement g_hat;
};

template <typename T>
class Canonicalizer {
 public:
  Canonicalizer(CanonicalizerConfig config, std::uint64_t seed);

  const CanonicalizerConfig& config() const noexcept { return config_; }
  const GroupAction& action() const noexcept { return action_; }
  ParameterStore<T>& params() noexcept { return params_; }
  const ParameterStore<T>& params() const noexcept { return params_; }
  std::size_t group_size() const noexcept { return g_; }

  // Single-channel view of the input after channel collapse and pooling,
  // shaped [1, h, w]. Throws NonSquareImage.
  Tensor<T> prepare(const Tensor<T>& image) const;

  // Group features of the last layer, [hidden * |G|, h, w].
  Var<T> features(Tape<T>& tape, const Tensor<T>& image) const;
  // Differentiable energy vector [|G|].
  Var<T> energies(Tape<T>& tape, const Tensor<T>& image) const;
  std::vector<T> energies(const Tensor<T>& image) const;

  GroupElement argmax(const std::vector<T>& energies) const;

  // g_hat = argmax energies; image = act(g_hat^-1, x).
  Canonicalized<T> canonicalize_hard(const Tensor<T>& image) const;
  // sum_e softmax(E / temperature)[e] * act(e^-1, x), same shape as x.
  Var<T> canonicalize_soft(Tape<T>& tape, const Tensor<T>& image, T temperature) const;
  // MSE(canonicalize_soft(act(g, x)), x) for x in the canonical frame.
  Var<T> stage1_loss(Tape<T>& tape, const Tensor<T>& canonical, const GroupElement& g,
                     T temperature) const;

  const LiftingConvLayer& lifting() const { return lifting_; }
  const std::vector<GroupConvLayer>& group_layers() const { return group_layers_; }

 private:
  CanonicalizerConfig config_;
  GroupAction action_;
  std::size_t g_;
  LiftingConvLayer lifting_;
  std::vector<GroupConvLayer> group_layers_;
  ParameterStore<T> params_;
};

}  // namespace flans
