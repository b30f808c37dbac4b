// SPDX-License-Identifier: Apache-2.0
#include "flans/canonicalizer.hpp"

#include <cmath>
#include <numeric>

namespace flans {

namespace {

template <typename T>
Tensor<T> kaiming(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(dist(rng));
  return t;
}

SparseMap bias_broadcast(int cout, std::size_t g) {
  SparseMap m;
  m.in_size = static_cast<std::size_t>(cout);
  for (int c = 0; c < cout; ++c) {
    for (std::size_t e = 0; e < g; ++e) {
      m.push(static_cast<std::uint32_t>(c), 1.0);
      m.end_row();
    }
  }
  return m;
}

}  // namespace

template <typename T>
Tensor<T> act_on_group_features(const GroupAction& action, const GroupElement& g,
                                const Tensor<T>& features) {
  const std::size_t n = square_side(features.shape());
  const std::size_t gs = group_size(action.order());
  if (features.rank() != 3 || features.dim(0) % gs != 0) {
    throw Error(ErrorCode::ShapeMismatch,
                "group features need shape [C*|G|, H, W], got " + to_string(features.shape()));
  }
  const std::size_t channels = features.dim(0) / gs;
  const std::size_t plane = n * n;
  const SparseMap& m = action.spatial_map(g, n, false);
  const GroupElement g_inv = inverse(g);
  Tensor<T> out(features.shape());
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t e = 0; e < gs; ++e) {
      const std::size_t src_e =
          compose(g_inv, GroupElement::from_index(e, action.order())).index();
      m.apply<T>(features.data().subspan((c * gs + src_e) * plane, plane),
                 out.data().subspan((c * gs + e) * plane, plane));
    }
  }
  return out;
}

// ---- lifting layer ----------------------------------------------------------

LiftingConvLayer::LiftingConvLayer(std::string prefix, int in_channels, int out_channels,
                                   int kernel, const GroupAction& action)
    : weight_(prefix + ".w"),
      bias_(prefix + ".b"),
      cin_(in_channels),
      cout_(out_channels),
      k_(kernel),
      g_(group_size(action.order())) {
  const auto k = static_cast<std::size_t>(kernel);
  const std::size_t kk = k * k;
  bank_.in_size = static_cast<std::size_t>(cout_ * cin_) * kk;
  for (int c = 0; c < cout_; ++c) {
    for (std::size_t e = 0; e < g_; ++e) {
      const SparseMap& sm = action.spatial_map(GroupElement::from_index(e, action.order()), k);
      for (int ci = 0; ci < cin_; ++ci) {
        const std::size_t base = static_cast<std::size_t>(c * cin_ + ci) * kk;
        for (std::size_t p = 0; p < kk; ++p) {
          for (std::uint32_t q = sm.row_begin[p]; q < sm.row_begin[p + 1]; ++q) {
            bank_.push(static_cast<std::uint32_t>(base + sm.src[q]), sm.weight[q]);
          }
          bank_.end_row();
        }
      }
    }
  }
  bias_map_ = bias_broadcast(cout_, g_);
}

template <typename T>
void LiftingConvLayer::init(ParameterStore<T>& store, std::mt19937_64& rng) const {
  const auto k = static_cast<std::size_t>(k_);
  store.add(weight_, kaiming<T>({static_cast<std::size_t>(cout_), static_cast<std::size_t>(cin_), k, k},
                                static_cast<std::size_t>(cin_) * k * k, rng));
  store.add(bias_, Tensor<T>(Shape{static_cast<std::size_t>(cout_)}));
}

template <typename T>
Var<T> LiftingConvLayer::forward(Tape<T>& tape, const ParameterStore<T>& store, const Var<T>& x) const {
  const auto k = static_cast<std::size_t>(k_);
  Var<T> w = tape.param(store.get(weight_));
  Var<T> b = tape.param(store.get(bias_));
  Var<T> bank = remap(w, bank_, Shape{static_cast<std::size_t>(cout_) * g_, static_cast<std::size_t>(cin_), k, k});
  Var<T> bias = remap(b, bias_map_, Shape{static_cast<std::size_t>(cout_) * g_});
  return conv2d(x, bank, &bias, Conv2dOptions{1, k / 2});
}

// ---- group convolution layer -------------------------------------------------

GroupConvLayer::GroupConvLayer(std::string prefix, int in_channels, int out_channels, int kernel,
                               const GroupAction& action)
    : weight_(prefix + ".w"),
      bias_(prefix + ".b"),
      cin_(in_channels),
      cout_(out_channels),
      k_(kernel),
      g_(group_size(action.order())) {
  const auto k = static_cast<std::size_t>(kernel);
  const std::size_t kk = k * k;
  const int order = action.order();
  bank_.in_size = static_cast<std::size_t>(cout_ * cin_) * g_ * kk;
  for (int c = 0; c < cout_; ++c) {
    for (std::size_t e = 0; e < g_; ++e) {
      const GroupElement ge = GroupElement::from_index(e, order);
      const GroupElement ge_inv = inverse(ge);
      const SparseMap& sm = action.spatial_map(ge, k);
      for (int ci = 0; ci < cin_; ++ci) {
        for (std::size_t ep = 0; ep < g_; ++ep) {
          const std::size_t u = compose(ge_inv, GroupElement::from_index(ep, order)).index();
          const std::size_t base = (static_cast<std::size_t>(c * cin_ + ci) * g_ + u) * kk;
          for (std::size_t p = 0; p < kk; ++p) {
            for (std::uint32_t q = sm.row_begin[p]; q < sm.row_begin[p + 1]; ++q) {
              bank_.push(static_cast<std::uint32_t>(base + sm.src[q]), sm.weight[q]);
            }
            bank_.end_row();
          }
        }
      }
    }
  }
  bias_map_ = bias_broadcast(cout_, g_);
}

template <typename T>
void GroupConvLayer::init(ParameterStore<T>& store, std::mt19937_64& rng) const {
  const auto k = static_cast<std::size_t>(k_);
  store.add(weight_, kaiming<T>({static_cast<std::size_t>(cout_), static_cast<std::size_t>(cin_), g_, k, k},
                                static_cast<std::size_t>(cin_) * g_ * k * k, rng));
  store.add(bias_, Tensor<T>(Shape{static_cast<std::size_t>(cout_)}));
}

template <typename T>
Var<T> GroupConvLayer::forward(Tape<T>& tape, const ParameterStore<T>& store, const Var<T>& x) const {
  const auto k = static_cast<std::size_t>(k_);
  Var<T> w = tape.param(store.get(weight_));
  Var<T> b = tape.param(store.get(bias_));
  Var<T> bank = remap(w, bank_,
                      Shape{static_cast<std::size_t>(cout_) * g_, static_cast<std::size_t>(cin_) * g_, k, k});
  Var<T> bias = remap(b, bias_map_, Shape{static_cast<std::size_t>(cout_) * g_});
  return conv2d(x, bank, &bias, Conv2dOptions{1, k / 2});
}

// ---- canonicalizer ------------------------------------------------------------

template <typename T>
Canonicalizer<T>::Canonicalizer(CanonicalizerConfig config, std::uint64_t seed)
    : config_(config),
      action_(config.group_order),
      g_(flans::group_size(config.group_order)),
      lifting_("canon.lift", 1, config.hidden, config.kernel, action_) {
  if (config_.layers < 1 || config_.hidden < 1 || config_.kernel < 1 || config_.kernel % 2 == 0 ||
      config_.pool < 1) {
    throw Error(ErrorCode::InvalidArgument, "canonicalizer needs layers, hidden, pool >= 1 and an odd kernel");
  }
  for (int l = 1; l < config_.layers; ++l) {
    group_layers_.emplace_back("canon.gconv" + std::to_string(l), config_.hidden, config_.hidden,
                               config_.kernel, action_);
  }
  std::mt19937_64 rng(seed);
  lifting_.init(params_, rng);
  for (const auto& layer : group_layers_) layer.init(params_, rng);
}

template <typename T>
Tensor<T> Canonicalizer<T>::prepare(const Tensor<T>& image) const {
  const std::size_t n = square_side(image.shape());
  if (image.rank() != 2 && image.rank() != 3) {
    throw Error(ErrorCode::ShapeMismatch, "expected [H,W] or [C,H,W], got " + to_string(image.shape()));
  }
  const std::size_t channels = image.rank() == 3 ? image.dim(0) : 1;
  const std::size_t plane = n * n;
  std::vector<T> gray(plane, T(0));
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t i = 0; i < plane; ++i) gray[i] += image[c * plane + i];
  if (channels > 1)
    for (auto& v : gray) v /= static_cast<T>(channels);

  const std::size_t f = std::gcd(static_cast<std::size_t>(config_.pool), n);
  const std::size_t m = n / f;
  Tensor<T> out(Shape{1, m, m});
  const T scale = T(1) / static_cast<T>(f * f);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      T acc = T(0);
      for (std::size_t a = 0; a < f; ++a)
        for (std::size_t b = 0; b < f; ++b) acc += gray[(i * f + a) * n + j * f + b];
      out.at(0, i, j) = acc * scale;
    }
  }
  return out;
}

template <typename T>
Var<T> Canonicalizer<T>::features(Tape<T>& tape, const Tensor<T>& image) const {
  Var<T> x = tape.constant(prepare(image));
  Var<T> h = lifting_.forward(tape, params_, x);
  for (const auto& layer : group_layers_) {
    h = layer.forward(tape, params_, relu(h));
  }
  return h;
}

template <typename T>
Var<T> Canonicalizer<T>::energies(Tape<T>& tape, const Tensor<T>& image) const {
  Var<T> f = features(tape, image);
  const Shape& s = f.shape();
  const std::size_t hidden = static_cast<std::size_t>(config_.hidden);
  Var<T> grouped = reshape(f, Shape{hidden, g_, s[1] * s[2]});
  return mean(mean(grouped, 2), 0);
}

template <typename T>
std::vector<T> Canonicalizer<T>::energies(const Tensor<T>& image) const {
  Tape<T> tape(false);
  return energies(tape, image).value().values();
}

template <typename T>
GroupElement Canonicalizer<T>::argmax(const std::vector<T>& e) const {
  T best = e.at(0);
  for (T v : e) best = std::max(best, v);
  const double tol = config_.tie_tolerance * std::max(1.0, std::abs(static_cast<double>(best)));
  for (std::size_t i = 0; i < e.size(); ++i) {
    if (static_cast<double>(e[i]) >= static_cast<double>(best) - tol) {
      return GroupElement::from_index(i, config_.group_order);
    }
  }
  return GroupElement::identity(config_.group_order);
}

template <typename T>
Canonicalized<T> Canonicalizer<T>::canonicalize_hard(const Tensor<T>& image) const {
  const GroupElement g_hat = argmax(energies(image));
  return Canonicalized<T>{action_.act(inverse(g_hat), image), g_hat};
}

template <typename T>
Var<T> Canonicalizer<T>::canonicalize_soft(Tape<T>& tape, const Tensor<T>& image, T temperature) const {
  if (!(temperature > T(0))) {
    throw Error(ErrorCode::NonPositiveTemperature, "temperature must be positive");
  }
  Var<T> weights = softmax(mul_scalar(energies(tape, image), T(1) / temperature), 0);
  const std::size_t n = image.size();
  Tensor<T> stack(Shape{g_, n});
  for (std::size_t e = 0; e < g_; ++e) {
    const Tensor<T> moved = action_.act(inverse(GroupElement::from_index(e, config_.group_order)), image);
    std::copy(moved.values().begin(), moved.values().end(), stack.values().begin() + static_cast<std::ptrdiff_t>(e * n));
  }
  Var<T> mixed = matmul(reshape(weights, Shape{1, g_}), tape.constant(std::move(stack)));
  return reshape(mixed, image.shape());
}

template <typename T>
Var<T> Canonicalizer<T>::stage1_loss(Tape<T>& tape, const Tensor<T>& canonical, const GroupElement& g,
                                     T temperature) const {
  Var<T> soft = canonicalize_soft(tape, action_.act(g, canonical), temperature);
  return mse(soft, tape.constant(canonical));
}

#define FLANS_INSTANTIATE(T)                                                                       \
  template Tensor<T> act_on_group_features(const GroupAction&, const GroupElement&, const Tensor<T>&); \
  template void LiftingConvLayer::init(ParameterStore<T>&, std::mt19937_64&) const;                \
  template Var<T> LiftingConvLayer::forward(Tape<T>&, const ParameterStore<T>&, const Var<T>&) const; \
  template void GroupConvLayer::init(ParameterStore<T>&, std::mt19937_64&) const;                  \
  template Var<T> GroupConvLayer::forward(Tape<T>&, const ParameterStore<T>&, const Var<T>&) const;   \
  template class Canonicalizer<T>;

FLANS_INSTANTIATE(float)
FLANS_INSTANTIATE(double)

#undef FLANS_INSTANTIATE

}  // namespace flans
