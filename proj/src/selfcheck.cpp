// SPDX-License-Identifier: Apache-2.0
#include "flans/selfcheck.hpp"

#include <algorithm>
#include <cstring>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>

#include "flans/checkpoint.hpp"
#include "flans/data.hpp"
#include "flans/fts.hpp"
#include "flans/losses.hpp"
#include "flans/seg_net.hpp"

namespace flans {

namespace fs = std::filesystem;

namespace {

template <typename T>
Tensor<T> uniform(Shape shape, std::mt19937_64& rng, double lo = 0.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(u(rng));
  return t;
}

CheckResult result(std::string name, double value, double tol, std::string detail = {}) {
  return {std::move(name), value <= tol, value, tol, std::move(detail)};
}

template <typename T>
double equivariance_worst(std::size_t trials, std::uint64_t seed) {
  CanonicalizerConfig cfg;
  cfg.pool = 1;
  double worst = 0;
  const auto els = group_elements(cfg.group_order);
  for (std::size_t t = 0; t < trials; ++t) {
    std::mt19937_64 rng(seed * 7919 + t);
    const Canonicalizer<T> net(cfg, rng());
    const GroupAction& act = net.action();
    const GroupElement g = els[1 + t % (els.size() - 1)];
    const Tensor<T> x = uniform<T>(Shape{1, 16, 16}, rng);

    Tape<T> tape(false);
    const auto& store = net.params();
    Tensor<T> fx = net.lifting().forward(tape, store, tape.constant(x)).value();
    Tensor<T> fgx = net.lifting().forward(tape, store, tape.constant(act.act(g, x))).value();
    worst = std::max(worst, max_abs_diff(fgx, act_on_group_features(act, g, fx)));
    for (const auto& layer : net.group_layers()) {
      Var<T> in = relu(tape.constant(fx));
      Var<T> in_g = relu(tape.constant(act_on_group_features(act, g, fx)));
      const Tensor<T> hx = layer.forward(tape, store, in).value();
      const Tensor<T> hgx = layer.forward(tape, store, in_g).value();
      worst = std::max(worst, max_abs_diff(hgx, act_on_group_features(act, g, hx)));
      fx = hx;
    }
    const auto e = net.energies(x);
    const auto eg = net.energies(act.act(g, x));
    for (const auto& u : els)
      worst = std::max(worst, static_cast<double>(std::abs(eg[u.index()] - e[compose(inverse(g), u).index()])));
  }
  return worst;
}

Vocabulary phantom_vocab() {
  return Vocabulary(TemplateBank::for_classes({"liver", "spleen", "right kidney", "left kidney"}).corpus());
}

// Fresh models have zero FiLM and intent weights and zero biases, which
// hides whole code paths; give them small random values.
template <typename T>
void randomize_zero_inits(FlansModel<T>& model, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 0.1);
  for (auto* p : model.parameters()) {
    const bool zero = std::all_of(p->value.values().begin(), p->value.values().end(), [](T v) { return v == T(0); });
    if (zero)
      for (auto& v : p->value.values()) v = static_cast<T>(n(rng));
  }
}

bool unique_argmax(const std::vector<float>& e) {
  std::vector<float> s = e;
  std::sort(s.rbegin(), s.rend());
  return s[0] - s[1] > 1e-4f * std::max(1.0f, std::abs(s[0]));
}

}  // namespace

CheckResult check_equivariance_f32(std::size_t trials, std::uint64_t seed) {
  return result("equivariance f32", equivariance_worst<float>(trials, seed), 1e-5,
                std::to_string(trials) + " draws");
}

CheckResult check_equivariance_f64(std::size_t trials, std::uint64_t seed) {
  return result("equivariance f64", equivariance_worst<double>(trials, seed), 1e-10,
                std::to_string(trials) + " draws");
}

CheckResult check_model_invariance(std::size_t trials, std::uint64_t seed) {
  PhantomSpec spec;
  spec.seed = seed + 1;
  const auto data = generate_samples(spec, trials, "inv");
  double worst = 0;
  std::size_t used = 0, skipped = 0;
  const char* prompts[] = {"segment the liver", "outline the largest region"};
  for (std::size_t t = 0; t < trials; ++t) {
    FlansModel<float> model(phantom_vocab(), {}, seed * 131 + t);
    randomize_zero_inits(model, seed * 137 + t);
    const auto& x = data.samples[t].image;
    if (!unique_argmax(model.canonicalizer().energies(x))) {
      ++skipped;
      continue;
    }
    ++used;
    const GroupAction& act = model.canonicalizer().action();
    SegmentOptions inv, eq;
    inv.mode = OutputMode::Invariant;
    for (const char* p : prompts) {
      const auto base_inv = model.segment(x, p, inv).probabilities;
      const auto base_eq = model.segment(x, p, eq).probabilities;
      for (const auto& g : group_elements(4)) {
        const auto gx = act.act(g, x);
        worst = std::max(worst, max_abs_diff(model.segment(gx, p, inv).probabilities, base_inv));
        worst = std::max(worst, max_abs_diff(model.segment(gx, p, eq).probabilities, act.act(g, base_eq)));
      }
    }
  }
  auto r = result("model invariance", worst, 1e-5,
                  std::to_string(used) + " draws, " + std::to_string(skipped) + " skipped for argmax ties");
  if (used == 0) r.passed = false;
  return r;
}

// ---- gradients ------------------------------------------------------------------

namespace {

using Fn = std::function<Var<double>(Tape<double>&, const Var<double>&)>;

// Scalarises any output with fixed random weights so every element matters.
Var<double> project(Tape<double>& tape, const Var<double>& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Tensor<double> w = uniform<double>(y.shape(), rng, -1.0, 1.0);
  return sum(mul(y, tape.constant(std::move(w))));
}

}  // namespace

std::vector<CheckResult> check_gradients(std::uint64_t seed) {
  std::vector<CheckResult> out;
  std::mt19937_64 rng(seed);
  auto run = [&](const std::string& name, const Fn& f, const Tensor<double>& x) {
    out.push_back(result("grad " + name, grad_check(f, x), 1e-4));
  };
  const auto a = uniform<double>(Shape{3, 4}, rng, -1, 1);
  const auto b = uniform<double>(Shape{3, 4}, rng, -1, 1);
  const auto pos = uniform<double>(Shape{3, 4}, rng, 0.5, 2.0);
  auto c = [](Tape<double>& t, const Tensor<double>& v) { return t.constant(v); };
  const std::uint64_t ps = seed + 1;

  run("add", [&](auto& t, auto& x) { return project(t, add(x, c(t, b)), ps); }, a);
  run("sub", [&](auto& t, auto& x) { return project(t, sub(c(t, b), x), ps); }, a);
  run("mul", [&](auto& t, auto& x) { return project(t, mul(x, c(t, b)), ps); }, a);
  run("div numerator", [&](auto& t, auto& x) { return project(t, div(x, c(t, pos)), ps); }, a);
  run("div denominator", [&](auto& t, auto& x) { return project(t, div(c(t, a), x), ps); }, pos);
  run("add_scalar", [&](auto& t, auto& x) { return project(t, add_scalar(x, 0.7), ps); }, a);
  run("mul_scalar", [&](auto& t, auto& x) { return project(t, mul_scalar(x, -1.3), ps); }, a);
  const auto m = uniform<double>(Shape{4, 5}, rng, -1, 1);
  run("matmul left", [&](auto& t, auto& x) { return project(t, matmul(x, c(t, m)), ps); }, a);
  run("matmul right", [&](auto& t, auto& x) { return project(t, matmul(c(t, a), x), ps); }, m);

  const auto img = uniform<double>(Shape{2, 7, 7}, rng, -1, 1);
  const auto ker = uniform<double>(Shape{3, 2, 3, 3}, rng, -1, 1);
  const auto bias = uniform<double>(Shape{3}, rng, -1, 1);
  for (std::size_t stride : {1u, 2u}) {
    const Conv2dOptions opt{stride, 1};
    const std::string s = " stride " + std::to_string(stride);
    run("conv2d input" + s, [&](auto& t, auto& x) {
      Var<double> bb = c(t, bias);
      return project(t, conv2d(x, c(t, ker), &bb, opt), ps);
    }, img);
    run("conv2d weight" + s, [&](auto& t, auto& x) {
      Var<double> bb = c(t, bias);
      return project(t, conv2d(c(t, img), x, &bb, opt), ps);
    }, ker);
    run("conv2d bias" + s, [&](auto& t, auto& x) { return project(t, conv2d(c(t, img), c(t, ker), &x, opt), ps); },
        bias);
  }

  run("relu", [&](auto& t, auto& x) { return project(t, relu(x), ps); }, a);
  run("leaky_relu", [&](auto& t, auto& x) { return project(t, leaky_relu(x, 0.1), ps); }, a);
  run("sigmoid", [&](auto& t, auto& x) { return project(t, sigmoid(x), ps); }, a);
  run("log", [&](auto& t, auto& x) { return project(t, log(x), ps); }, pos);
  run("exp", [&](auto& t, auto& x) { return project(t, exp(x), ps); }, a);
  run("clamp", [&](auto& t, auto& x) { return project(t, clamp(x, -0.5, 0.5), ps); }, a);
  run("softmax", [&](auto& t, auto& x) { return project(t, softmax(x, 1), ps); }, a);
  run("sum axis", [&](auto& t, auto& x) { return project(t, sum(x, 0), ps); }, a);
  run("sum", [&](auto&, auto& x) { return sum(x); }, a);
  run("mean axis", [&](auto& t, auto& x) { return project(t, mean(x, 1), ps); }, a);
  run("mean", [&](auto&, auto& x) { return mean(x); }, a);
  run("max axis", [&](auto& t, auto& x) { return project(t, max(x, 1), ps); }, a);
  run("reshape", [&](auto& t, auto& x) { return project(t, reshape(x, Shape{2, 6}), ps); }, a);
  run("transpose", [&](auto& t, auto& x) { return project(t, transpose(x), ps); }, a);
  run("transpose perm", [&](auto& t, auto& x) { return project(t, transpose(x, {2, 0, 1}), ps); }, img);
  run("pad2d", [&](auto& t, auto& x) { return project(t, pad2d(x, 1, 2), ps); }, img);
  run("upsample", [&](auto& t, auto& x) { return project(t, upsample_nearest2d(x, 2), ps); }, img);
  run("concat", [&](auto& t, auto& x) { return project(t, concat(std::vector<Var<double>>{x, c(t, b), x}, 1), ps); },
      a);
  run("slice", [&](auto& t, auto& x) { return project(t, slice(x, 1, 1, 3), ps); }, a);
  run("expand", [&](auto& t, auto& x) { return project(t, expand(x, Shape{3, 4, 5}), ps); },
      uniform<double>(Shape{3, 1, 5}, rng, -1, 1));
  const GroupAction d8(8);
  const auto sq = uniform<double>(Shape{6, 6}, rng, -1, 1);
  run("remap", [&](auto& t, auto& x) { return project(t, remap(x, d8.spatial_map({1, true, 8}, 6), sq.shape()), ps); },
      sq);
  const auto w = uniform<double>(Shape{5, 4}, rng, -1, 1);
  const auto bv = uniform<double>(Shape{5}, rng, -1, 1);
  run("linear", [&](auto& t, auto& x) { return project(t, linear(x, c(t, w), c(t, bv)), ps); },
      uniform<double>(Shape{4}, rng, -1, 1));
  run("mse", [&](auto& t, auto& x) { return mse(x, c(t, b)); }, a);

  // Loss terms, with predictions kept inside (0, 1) by a sigmoid.
  Tensor<double> target(Shape{6, 6});
  for (std::size_t i = 1; i < 4; ++i)
    for (std::size_t j = 2; j < 5; ++j) target.at(i, j) = 1.0;
  const auto logit_map = uniform<double>(Shape{6, 6}, rng, -2, 2);
  run("dice_loss", [&](auto& t, auto& x) { return dice_loss(sigmoid(x), c(t, target)); }, logit_map);
  run("ce_mask_loss", [&](auto& t, auto& x) { return ce_mask_loss(sigmoid(x), c(t, target)); }, logit_map);
  run("ce_intent_loss", [&](auto&, auto& x) { return ce_intent_loss(x, 2); },
      uniform<double>(Shape{4}, rng, -2, 2));
  const auto intent = uniform<double>(Shape{4}, rng, -2, 2);
  run("combined_loss", [&](auto& t, auto& x) {
    return combined_loss(LossConfig{}, sigmoid(x), c(t, target),
                         std::optional<IntentPair<double>>(IntentPair<double>{c(t, intent), 1}));
  }, logit_map);

  ParamGradCheckOptions sampled;
  sampled.coords_per_tensor = 6;
  sampled.seed = seed;
  {
    CanonicalizerConfig cfg;
    cfg.hidden = 3;
    cfg.kernel = 5;
    Canonicalizer<double> net(cfg, seed + 2);
    const auto x = uniform<double>(Shape{16, 16}, rng);
    out.push_back(result("grad canonicalize_soft",
                         grad_check_params([&](Tape<double>& t) {
                           return mse(net.canonicalize_soft(t, x, 0.5), t.constant(x));
                         }, net.params().all(), sampled),
                         1e-4));
  }
  FlansModel<double> model(phantom_vocab(), {}, seed + 3);
  randomize_zero_inits(model, seed + 4);
  {
    const auto ids = model.text().vocab().tokenize("segment the left kidney");
    out.push_back(result("grad text encoder",
                         grad_check_params([&](Tape<double>& t) {
                           Var<double> e = model.text().encode(t, ids);
                           return sum(mul(e, e));
                         }, model.text().params().all()),
                         1e-4));
  }
  {
    const auto x = uniform<double>(Shape{16, 16}, rng);
    Tensor<double> tgt(Shape{16, 16});
    for (std::size_t i = 4; i < 10; ++i)
      for (std::size_t j = 3; j < 9; ++j) tgt.at(i, j) = 1.0;
    const auto ids = model.text().vocab().tokenize("segment the right kidney");
    out.push_back(result("grad full model 16x16",
                         grad_check_params([&](Tape<double>& t) {
                           Var<double> canon = model.canonicalizer().canonicalize_soft(t, x, 0.5);
                           auto f = model.forward(t, canon, ids);
                           return combined_loss(LossConfig{}, f.probabilities, t.constant(tgt),
                                                std::optional<IntentPair<double>>(
                                                    IntentPair<double>{f.intent_logits, 2}));
                         }, model.parameters(), sampled),
                         1e-4));
  }
  return out;
}

// ---- spatial oracle ---------------------------------------------------------------

std::map<SpatialCategory, int> spatial_scan_oracle(const std::vector<Mask>& masks) {
  const std::size_t h = masks.at(0).dim(0), w = masks.at(0).dim(1);
  std::map<SpatialCategory, int> out;
  // Sweep lines inward from each edge; the first class touched wins, lower
  // ids first within a line.
  auto sweep = [&](SpatialCategory cat, bool columns, bool reverse) {
    const std::size_t lines = columns ? w : h, len = columns ? h : w;
    for (std::size_t s = 0; s < lines; ++s) {
      const std::size_t line = reverse ? lines - 1 - s : s;
      for (std::size_t c = 0; c < masks.size(); ++c)
        for (std::size_t k = 0; k < len; ++k)
          if (columns ? masks[c].at(k, line) : masks[c].at(line, k)) {
            out[cat] = static_cast<int>(c);
            return;
          }
    }
  };
  sweep(SpatialCategory::LeftMost, true, false);
  sweep(SpatialCategory::RightMost, true, true);
  sweep(SpatialCategory::Upmost, false, false);
  sweep(SpatialCategory::Bottom, false, true);
  long big = -1, small = -1;
  std::size_t bc = 0, sc = 0;
  for (std::size_t c = 0; c < masks.size(); ++c) {
    std::size_t count = 0;
    for (auto v : masks[c].values()) count += v != 0;
    if (!count) continue;
    if (big < 0 || count > bc) big = static_cast<long>(c), bc = count;
    if (small < 0 || count < sc) small = static_cast<long>(c), sc = count;
  }
  if (big >= 0) {
    out[SpatialCategory::Largest] = static_cast<int>(big);
    out[SpatialCategory::Smallest] = static_cast<int>(small);
  }
  return out;
}

namespace {

std::vector<Mask> random_blobs(std::mt19937_64& rng, std::size_t n) {
  const std::size_t classes = 1 + rng() % 5;
  std::vector<Mask> out;
  for (std::size_t c = 0; c < classes; ++c) {
    Mask m(Shape{n, n});
    const std::size_t pieces = rng() % 3;
    for (std::size_t p = 0; p < pieces; ++p) {
      const long ci = static_cast<long>(rng() % n), cj = static_cast<long>(rng() % n);
      const long r = 1 + static_cast<long>(rng() % 6);
      const bool disk = rng() % 2;
      for (long i = 0; i < static_cast<long>(n); ++i)
        for (long j = 0; j < static_cast<long>(n); ++j) {
          const long di = i - ci, dj = j - cj;
          if (disk ? di * di + dj * dj <= r * r : std::abs(di) <= r && std::abs(dj) <= r / 2 + 1) m.at(i, j) = 1;
        }
    }
    out.push_back(std::move(m));
  }
  bool any = false;
  for (const auto& m : out)
    for (auto v : m.values()) any = any || v;
  if (!any) out[rng() % out.size()].at(rng() % n, rng() % n) = 1;
  return out;
}

// Distinct sizes and bounding-box edges, so the swap laws hold exactly.
bool tie_free(const std::vector<Mask>& masks) {
  struct Box {
    std::size_t count, l, r, t, b;
  };
  std::vector<Box> boxes;
  const std::size_t n = masks[0].dim(0);
  for (const auto& m : masks) {
    Box e{0, n, 0, n, 0};
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (m.at(i, j)) {
          ++e.count;
          e.l = std::min(e.l, j), e.r = std::max(e.r, j), e.t = std::min(e.t, i), e.b = std::max(e.b, i);
        }
    if (e.count) boxes.push_back(e);
  }
  for (std::size_t a = 0; a < boxes.size(); ++a)
    for (std::size_t b = a + 1; b < boxes.size(); ++b)
      if (boxes[a].count == boxes[b].count || boxes[a].l == boxes[b].l || boxes[a].r == boxes[b].r ||
          boxes[a].t == boxes[b].t || boxes[a].b == boxes[b].b)
        return false;
  return true;
}

}  // namespace

CheckResult check_spatial_oracle(std::size_t sets, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const GroupAction act(4);
  const GroupElement r180{2, false, 4}, flip{0, true, 4};
  using C = SpatialCategory;
  std::size_t mismatches = 0, swap_failures = 0, swap_checked = 0;
  for (std::size_t k = 0; k < sets; ++k) {
    const auto masks = random_blobs(rng, 24);
    const auto got = extract_spatial_categories(masks);
    if (got != spatial_scan_oracle(masks)) ++mismatches;
    if (!tie_free(masks)) continue;
    ++swap_checked;
    std::vector<Mask> rot, fl;
    for (const auto& m : masks) {
      rot.push_back(act.act_mask(r180, m));
      fl.push_back(act.act_mask(flip, m));
    }
    const auto r = extract_spatial_categories(rot), f = extract_spatial_categories(fl);
    const bool ok = r.at(C::LeftMost) == got.at(C::RightMost) && r.at(C::RightMost) == got.at(C::LeftMost) &&
                    r.at(C::Upmost) == got.at(C::Bottom) && r.at(C::Bottom) == got.at(C::Upmost) &&
                    r.at(C::Largest) == got.at(C::Largest) && r.at(C::Smallest) == got.at(C::Smallest) &&
                    f.at(C::LeftMost) == got.at(C::RightMost) && f.at(C::RightMost) == got.at(C::LeftMost) &&
                    f.at(C::Upmost) == got.at(C::Upmost) && f.at(C::Bottom) == got.at(C::Bottom);
    swap_failures += !ok;
  }
  std::ostringstream d;
  d << sets << " sets, " << mismatches << " oracle mismatches, " << swap_failures << " swap failures in "
    << swap_checked << " tie-free sets";
  auto r = result("spatial oracle", static_cast<double>(mismatches + swap_failures), 0.0, d.str());
  if (swap_checked == 0) r.passed = false;
  return r;
}

// ---- bit exactness ----------------------------------------------------------------

CheckResult check_fts_roundtrip(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::size_t failures = 0;
  for (int t = 0; t < 20; ++t) {
    const Shape shape{1 + rng() % 5, 1 + rng() % 7, 1 + rng() % 3};
    Tensor<float> f(shape);
    for (auto& v : f.values()) {
      std::uint32_t bits = static_cast<std::uint32_t>(rng());
      std::memcpy(&v, &bits, sizeof v);
      if (!std::isfinite(v)) v = -0.0f;
    }
    Tensor<std::uint8_t> u(shape);
    for (auto& v : u.values()) v = static_cast<std::uint8_t>(rng());
    Tensor<std::int32_t> i(shape);
    for (auto& v : i.values()) v = static_cast<std::int32_t>(rng());
    failures += !decode_fts<float>(encode_fts(f)).bit_equal(f);
    failures += !decode_fts<std::uint8_t>(encode_fts(u)).bit_equal(u);
    failures += !decode_fts<std::int32_t>(encode_fts(i)).bit_equal(i);
  }
  return result("fts round trip", static_cast<double>(failures), 0.0, "60 tensors");
}

CheckResult check_checkpoint_roundtrip(const fs::path& scratch, std::uint64_t seed) {
  FlansModel<float> model(phantom_vocab(), {}, seed);
  randomize_zero_inits(model, seed + 1);
  CheckpointMeta meta;
  meta.stages = {"1"};
  meta.class_names = {"liver", "spleen", "right kidney", "left kidney"};
  meta.seed = seed;
  const fs::path dir = scratch / "selfcheck_ckpt";
  save_checkpoint(dir, model, meta);
  const auto loaded = load_checkpoint(dir);
  PhantomSpec spec;
  spec.seed = seed;
  const auto data = generate_samples(spec, 3, "ck");
  std::size_t failures = 0;
  for (const auto& s : data.samples) {
    for (const char* p : {"segment the spleen", "outline the bottom region"}) {
      const auto a = model.segment(s.image, p), b = loaded.model.segment(s.image, p);
      failures += !a.probabilities.bit_equal(b.probabilities) || !a.intent_logits.bit_equal(b.intent_logits) ||
                  !(a.g_hat == b.g_hat);
    }
  }
  failures += loaded.meta.class_names != meta.class_names || loaded.meta.stages != meta.stages;
  std::error_code ec;
  fs::remove_all(dir, ec);
  return result("checkpoint round trip", static_cast<double>(failures), 0.0, "6 forward passes");
}

std::vector<CheckResult> run_selfcheck(const SelfcheckOptions& options) {
  fs::path scratch = options.scratch;
  if (scratch.empty()) scratch = fs::temp_directory_path() / ("flans_selfcheck_" + std::to_string(options.seed));
  fs::create_directories(scratch);
  std::vector<CheckResult> out;
  out.push_back(check_equivariance_f32(options.equivariance_trials, options.seed));
  out.push_back(check_equivariance_f64(options.equivariance_trials, options.seed));
  out.push_back(check_model_invariance(options.invariance_trials, options.seed));
  for (auto& r : check_gradients(options.seed)) out.push_back(std::move(r));
  out.push_back(check_spatial_oracle(options.oracle_sets, options.seed));
  out.push_back(check_fts_roundtrip(options.seed));
  out.push_back(check_checkpoint_roundtrip(scratch, options.seed));
  return out;
}

}  // namespace flans
