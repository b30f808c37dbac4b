// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <random>

#include "flans/canonicalizer.hpp"

using namespace flans;

namespace {

template <typename T>
Tensor<T> random_image(Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(u(rng));
  return t;
}

CanonicalizerConfig small_config() {
  CanonicalizerConfig c;
  c.hidden = 3;
  c.kernel = 3;
  c.layers = 3;
  c.pool = 1;
  return c;
}

// Plain cross-correlation with zero padding k/2, one output plane.
std::vector<double> conv_plane(const std::vector<double>& x, const std::vector<double>& w, std::size_t n,
                               std::size_t k) {
  std::vector<double> y(n * n, 0.0);
  const long p = static_cast<long>(k / 2);
  for (long i = 0; i < static_cast<long>(n); ++i)
    for (long j = 0; j < static_cast<long>(n); ++j) {
      double acc = 0;
      for (long a = 0; a < static_cast<long>(k); ++a)
        for (long b = 0; b < static_cast<long>(k); ++b) {
          const long yi = i + a - p, xj = j + b - p;
          if (yi < 0 || xj < 0 || yi >= static_cast<long>(n) || xj >= static_cast<long>(n)) continue;
          acc += x[yi * n + xj] * w[a * k + b];
        }
      y[i * n + j] = acc;
    }
  return y;
}

std::vector<double> act_plane(const GroupAction& act, const GroupElement& g, const std::vector<double>& w,
                              std::size_t k) {
  return act.act(g, Tensor<double>(Shape{k, k}, w)).values();
}

// Reference G-CNN written from the layer definitions with nested loops.
// Returns the mean activation of the identity slice of the last layer.
double reference_identity_energy(const Canonicalizer<double>& net, const Tensor<double>& image) {
  const auto& cfg = net.config();
  const GroupAction& act = net.action();
  const auto els = group_elements(cfg.group_order);
  const std::size_t G = els.size(), k = static_cast<std::size_t>(cfg.kernel), kk = k * k;
  const std::size_t n = image.dim(image.rank() - 1);
  const std::size_t hidden = static_cast<std::size_t>(cfg.hidden);
  std::vector<double> x(image.values().begin(), image.values().end());

  const auto& w1 = net.params().get("canon.lift.w").value;
  const auto& b1 = net.params().get("canon.lift.b").value;
  std::vector<std::vector<double>> h(hidden * G);
  for (std::size_t c = 0; c < hidden; ++c)
    for (std::size_t u = 0; u < G; ++u) {
      std::vector<double> base(w1.values().begin() + c * kk, w1.values().begin() + (c + 1) * kk);
      h[c * G + u] = conv_plane(x, act_plane(act, els[u], base, k), n, k);
      for (auto& v : h[c * G + u]) v += b1[c];
    }
  for (int l = 1; l < cfg.layers; ++l) {
    for (auto& plane : h)
      for (auto& v : plane) v = std::max(v, 0.0);
    const auto& w = net.params().get("canon.gconv" + std::to_string(l) + ".w").value;
    const auto& b = net.params().get("canon.gconv" + std::to_string(l) + ".b").value;
    std::vector<std::vector<double>> next(hidden * G, std::vector<double>(n * n, 0.0));
    for (std::size_t c = 0; c < hidden; ++c)
      for (std::size_t u = 0; u < G; ++u) {
        for (std::size_t ci = 0; ci < hidden; ++ci)
          for (std::size_t up = 0; up < G; ++up) {
            const std::size_t rel = compose(inverse(els[u]), els[up]).index();
            const auto off = static_cast<std::ptrdiff_t>(((c * hidden + ci) * G + rel) * kk);
            std::vector<double> base(w.values().begin() + off, w.values().begin() + off + static_cast<std::ptrdiff_t>(kk));
            const auto y = conv_plane(h[ci * G + up], act_plane(act, els[u], base, k), n, k);
            for (std::size_t p = 0; p < n * n; ++p) next[c * G + u][p] += y[p];
          }
        for (auto& v : next[c * G + u]) v += b[c];
      }
    h = std::move(next);
  }
  double total = 0;
  for (std::size_t c = 0; c < hidden; ++c)
    for (double v : h[c * G]) total += v;
  return total / static_cast<double>(hidden * n * n);
}

template <typename T>
void check_layer_equivariance(double tol) {
  GroupAction act(4);
  double worst = 0;
  for (std::uint64_t trial = 0; trial < 100; ++trial) {
    std::mt19937_64 rng(trial);
    LiftingConvLayer lift("l", 2, 3, 5, act);
    GroupConvLayer gconv("g", 3, 2, 3, act);
    ParameterStore<T> store;
    lift.init(store, rng);
    gconv.init(store, rng);
    const auto x = random_image<T>({2, 9, 9}, 1000 + trial);
    const auto g = random_element(4, rng);
    Tape<T> tape(false);
    const auto fx = lift.forward(tape, store, tape.constant(x)).value();
    const auto fgx = lift.forward(tape, store, tape.constant(act.act(g, x))).value();
    worst = std::max(worst, max_abs_diff(fgx, act_on_group_features(act, g, fx)));
    const auto hx = gconv.forward(tape, store, tape.constant(fx)).value();
    const auto hgx = gconv.forward(tape, store, tape.constant(act_on_group_features(act, g, fx))).value();
    worst = std::max(worst, max_abs_diff(hgx, act_on_group_features(act, g, hx)));
  }
  EXPECT_LE(worst, tol);
}

}  // namespace

TEST(Canonicalizer, LayersAreEquivariantF32) { check_layer_equivariance<float>(1e-5); }
TEST(Canonicalizer, LayersAreEquivariantF64) { check_layer_equivariance<double>(1e-10); }

TEST(Canonicalizer, EnergiesPermuteUnderTheGroup) {
  Canonicalizer<float> net(CanonicalizerConfig{}, 3);
  const GroupAction& act = net.action();
  const auto x = random_image<float>({32, 32}, 4);
  const auto e = net.energies(x);
  ASSERT_EQ(e.size(), 8u);
  for (const auto& g : group_elements(4)) {
    const auto eg = net.energies(act.act(g, x));
    for (const auto& u : group_elements(4)) {
      EXPECT_NEAR(eg[u.index()], e[compose(inverse(g), u).index()], 1e-5);
    }
  }
}

TEST(Canonicalizer, EnergiesMatchReferenceNetwork) {
  Canonicalizer<double> net(small_config(), 5);
  const auto x = random_image<double>({1, 10, 10}, 6);
  const auto e = net.energies(x);
  for (const auto& u : group_elements(4)) {
    const auto moved = net.action().act(inverse(u), x);
    EXPECT_NEAR(e[u.index()], reference_identity_energy(net, moved), 1e-10) << to_string(u);
    EXPECT_TRUE(std::isfinite(e[u.index()]));
  }
}

TEST(Canonicalizer, ConstantImageTiesToIdentity) {
  Canonicalizer<float> net(CanonicalizerConfig{}, 8);
  const auto x = Tensor<float>::full({16, 16}, 0.4f);
  const auto e = net.energies(x);
  for (float v : e) EXPECT_NEAR(v, e[0], 1e-5);
  const auto c = net.canonicalize_hard(x);
  EXPECT_TRUE(c.g_hat.is_identity());
  EXPECT_TRUE(c.image.bit_equal(x));
}

TEST(Canonicalizer, HardCanonicalizationIsInvariantAndIdempotent) {
  Canonicalizer<float> net(CanonicalizerConfig{}, 9);
  const GroupAction& act = net.action();
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto x = random_image<float>({16, 16}, 20 + s);
    const auto base = net.canonicalize_hard(x);
    const auto again = net.canonicalize_hard(base.image);
    EXPECT_TRUE(again.g_hat.is_identity());
    EXPECT_TRUE(again.image.bit_equal(base.image));
    for (const auto& g : group_elements(4)) {
      const auto c = net.canonicalize_hard(act.act(g, x));
      EXPECT_EQ(c.g_hat, compose(g, base.g_hat));
      EXPECT_TRUE(c.image.bit_equal(base.image));
    }
  }
}

TEST(Canonicalizer, SoftApproachesHardAtLowTemperature) {
  Canonicalizer<double> net(CanonicalizerConfig{}, 10);
  const auto x = random_image<double>({16, 16}, 11);
  Tape<double> tape(false);
  const auto soft = net.canonicalize_soft(tape, x, 1e-6).value();
  EXPECT_LE(max_abs_diff(soft, net.canonicalize_hard(x).image), 1e-9);
  EXPECT_THROW(net.canonicalize_soft(tape, x, 0.0), Error);
  EXPECT_THROW(net.canonicalize_soft(tape, x, -1.0), Error);
}

TEST(Canonicalizer, UniformEnergiesAverageAllTransforms) {
  Canonicalizer<double> net(small_config(), 12);
  for (auto* p : net.params().all()) p->value = Tensor<double>(p->value.shape());
  const auto x = random_image<double>({6, 6}, 13);
  Tape<double> tape(false);
  const auto soft = net.canonicalize_soft(tape, x, 0.1).value();
  Tensor<double> expected(x.shape());
  for (const auto& e : group_elements(4)) {
    const auto moved = net.action().act(inverse(e), x);
    for (std::size_t i = 0; i < x.size(); ++i) expected[i] += moved[i] / 8.0;
  }
  EXPECT_LE(max_abs_diff(soft, expected), 1e-12);
}

TEST(Canonicalizer, Stage1LossGradientsMatchFiniteDifferences) {
  CanonicalizerConfig cfg = small_config();
  cfg.hidden = 2;
  cfg.layers = 2;
  Canonicalizer<double> net(cfg, 14);
  const auto x = random_image<double>({8, 8}, 15);
  const auto g = GroupElement{3, true, 4};
  auto f = [&](Tape<double>& tape) { return net.stage1_loss(tape, x, g, 0.5); };
  EXPECT_LE(grad_check_params(f, net.params().all()), 1e-4);
  Tape<double> tape;
  const double loss = net.stage1_loss(tape, x, g, 0.1).value().item();
  EXPECT_TRUE(std::isfinite(loss));
  EXPECT_GT(loss, 0.0);
}

TEST(Canonicalizer, PoolingKeepsEquivariance) {
  Canonicalizer<double> net(CanonicalizerConfig{}, 16);
  const auto x = random_image<double>({3, 24, 24}, 17);
  EXPECT_EQ(net.prepare(x).shape(), (Shape{1, 6, 6}));
  const auto e = net.energies(x);
  for (const auto& g : group_elements(4)) {
    const auto eg = net.energies(net.action().act(g, x));
    for (const auto& u : group_elements(4)) EXPECT_NEAR(eg[u.index()], e[compose(inverse(g), u).index()], 1e-10);
  }
  EXPECT_THROW(net.energies(Tensor<double>(Shape{4, 6})), Error);
}

TEST(Canonicalizer, D8IsApproximatelyEquivariant) {
  CanonicalizerConfig cfg;
  cfg.group_order = 8;
  cfg.pool = 1;
  cfg.kernel = 5;
  Canonicalizer<double> net(cfg, 18);
  // Smooth, centred content so interpolation error stays small.
  Tensor<double> x(Shape{24, 24});
  for (std::size_t i = 0; i < 24; ++i)
    for (std::size_t j = 0; j < 24; ++j) {
      const double a = (i - 11.5) / 4.0, b = (j - 9.5) / 5.0;
      x.at(i, j) = std::exp(-(a * a + b * b) / 2.0);
    }
  const auto e = net.energies(x);
  double worst = 0;
  for (const auto& g : group_elements(8)) {
    const auto eg = net.energies(net.action().act(g, x));
    for (const auto& u : group_elements(8))
      worst = std::max(worst, std::abs(eg[u.index()] - e[compose(inverse(g), u).index()]));
  }
  EXPECT_LE(worst, 5e-2);
}
