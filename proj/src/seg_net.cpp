// SPDX-License-Identifier: Apache-2.0
#include "flans/seg_net.hpp"

#include <cmath>

namespace flans {

namespace {

template <typename T>
Tensor<T> kaiming(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(dist(rng));
  return t;
}

std::size_t sz(int v) { return static_cast<std::size_t>(v); }

// Per-channel vector [C] -> [C, h, w].
template <typename T>
Var<T> broadcast_channels(const Var<T>& v, std::size_t h, std::size_t w) {
  const std::size_t c = v.shape()[0];
  return expand(reshape(v, Shape{c, 1, 1}), Shape{c, h, w});
}

template <typename T>
Tensor<T> coord_planes(std::size_t n) {
  Tensor<T> t(Shape{2, n, n});
  const double step = n > 1 ? 2.0 / static_cast<double>(n - 1) : 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      t.at(0, i, j) = static_cast<T>(-1.0 + step * static_cast<double>(j));
      t.at(1, i, j) = static_cast<T>(-1.0 + step * static_cast<double>(i));
    }
  return t;
}

std::uint64_t sub_seed(std::uint64_t seed, std::uint64_t k) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (k + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace

template <typename T>
SegBackbone<T>::SegBackbone(SegNetConfig config, std::uint64_t seed) : config_(std::move(config)) {
  if (config_.channels.size() != 3 || config_.embed_dim <= 0)
    throw Error(ErrorCode::InvalidArgument, "backbone needs three channel widths and a positive embed dim");
  for (int c : config_.channels)
    if (c <= 0) throw Error(ErrorCode::InvalidArgument, "channel widths must be positive");
  std::mt19937_64 rng(seed);
  auto add_conv = [&](const std::string& name, int cin, int cout, int k) {
    const std::size_t fan = sz(cin) * sz(k) * sz(k);
    params_.add(name + ".w", kaiming<T>(Shape{sz(cout), sz(cin), sz(k), sz(k)}, fan, rng));
    params_.add(name + ".b", Tensor<T>(Shape{sz(cout)}));
  };
  const auto& ch = config_.channels;
  const int in = 1 + (config_.coord_channels ? 2 : 0);
  add_conv("seg.enc1.a", in, ch[0], 3);
  add_conv("seg.enc1.b", ch[0], ch[0], 3);
  add_conv("seg.enc2.a", ch[0], ch[1], 3);
  add_conv("seg.enc2.b", ch[1], ch[1], 3);
  add_conv("seg.enc3.a", ch[1], ch[2], 3);
  add_conv("seg.enc3.b", ch[2], ch[2], 3);
  add_conv("seg.mid.a", ch[2], ch[2], 3);
  add_conv("seg.mid.b", ch[2], ch[2], 3);
  params_.add("seg.ctx.w", kaiming<T>(Shape{sz(ch[2]), sz(ch[2])}, sz(ch[2]), rng));
  params_.add("seg.ctx.b", Tensor<T>(Shape{sz(ch[2])}));
  add_conv("seg.dec3", 2 * ch[2], ch[2], 3);
  add_conv("seg.dec2", ch[2] + ch[1], ch[1], 3);
  add_conv("seg.dec1", ch[1] + ch[0], ch[0], 3);
  add_conv("seg.head", ch[0], 1, 1);
  const std::size_t d = sz(config_.embed_dim);
  const std::vector<int> film_width = {ch[0], ch[1], ch[2], ch[2]};
  for (std::size_t s = 0; s < film_width.size(); ++s) {
    const std::string p = "seg.film" + std::to_string(s + 1);
    const std::size_t c = sz(film_width[s]);
    params_.add(p + ".gamma.w", Tensor<T>(Shape{c, d}));
    params_.add(p + ".gamma.b", Tensor<T>(Shape{c}));
    params_.add(p + ".beta.w", Tensor<T>(Shape{c, d}));
    params_.add(p + ".beta.b", Tensor<T>(Shape{c}));
  }
}

template <typename T>
Var<T> SegBackbone<T>::conv(Tape<T>& tape, const std::string& name, const Var<T>& x, std::size_t stride) const {
  const Var<T> w = tape.param(params_.get(name + ".w"));
  const Var<T> b = tape.param(params_.get(name + ".b"));
  const std::size_t k = w.shape()[2];
  return conv2d(x, w, &b, Conv2dOptions{stride, k / 2});
}

template <typename T>
Var<T> SegBackbone<T>::film(Tape<T>& tape, const Var<T>& h, std::size_t stage, const Var<T>* embedding) const {
  if (embedding == nullptr) return h;
  const std::string p = "seg.film" + std::to_string(stage);
  Var<T> gamma = linear(*embedding, tape.param(params_.get(p + ".gamma.w")), tape.param(params_.get(p + ".gamma.b")));
  Var<T> beta = linear(*embedding, tape.param(params_.get(p + ".beta.w")), tape.param(params_.get(p + ".beta.b")));
  const std::size_t hh = h.shape()[1], ww = h.shape()[2];
  return add(mul(h, broadcast_channels(add_scalar(gamma, T(1)), hh, ww)), broadcast_channels(beta, hh, ww));
}

template <typename T>
Var<T> SegBackbone<T>::forward(Tape<T>& tape, const Var<T>& image, const Var<T>* embedding) const {
  const std::size_t n = square_side(image.shape());
  if (image.shape().size() != 3 || image.shape()[0] != 1)
    throw Error(ErrorCode::ShapeMismatch, "backbone expects [1, n, n], got " + to_string(image.shape()));
  if (n % 8 != 0) throw Error(ErrorCode::ShapeMismatch, "backbone side must be divisible by 8");
  if (embedding && embedding->shape() != Shape{sz(config_.embed_dim)})
    throw Error(ErrorCode::DimMismatch, "prompt embedding has shape " + to_string(embedding->shape()));

  Var<T> x = image;
  if (config_.coord_channels) x = concat(std::vector<Var<T>>{image, tape.constant(coord_planes<T>(n))}, 0);

  Var<T> s1 = relu(film(tape, conv(tape, "seg.enc1.a", x, 1), 1, embedding));
  s1 = relu(conv(tape, "seg.enc1.b", s1, 1));
  Var<T> s2 = relu(film(tape, conv(tape, "seg.enc2.a", s1, 2), 2, embedding));
  s2 = relu(conv(tape, "seg.enc2.b", s2, 1));
  Var<T> s3 = relu(film(tape, conv(tape, "seg.enc3.a", s2, 2), 3, embedding));
  s3 = relu(conv(tape, "seg.enc3.b", s3, 1));

  Var<T> m = conv(tape, "seg.mid.a", s3, 2);
  const std::size_t q = n / 8;
  Var<T> pooled = mean(mean(relu(m), 2), 1);
  Var<T> ctx = relu(linear(pooled, tape.param(params_.get("seg.ctx.w")), tape.param(params_.get("seg.ctx.b"))));
  m = relu(film(tape, add(m, broadcast_channels(ctx, q, q)), 4, embedding));
  m = relu(conv(tape, "seg.mid.b", m, 1));

  Var<T> d3 = relu(conv(tape, "seg.dec3", concat(std::vector<Var<T>>{upsample_nearest2d(m, 2), s3}, 0), 1));
  Var<T> d2 = relu(conv(tape, "seg.dec2", concat(std::vector<Var<T>>{upsample_nearest2d(d3, 2), s2}, 0), 1));
  Var<T> d1 = relu(conv(tape, "seg.dec1", concat(std::vector<Var<T>>{upsample_nearest2d(d2, 2), s1}, 0), 1));
  return reshape(conv(tape, "seg.head", d1, 1), Shape{n, n});
}

// ---- full model ---------------------------------------------------------------

template <typename T>
FlansModel<T>::FlansModel(Vocabulary vocab, ModelConfig config, std::uint64_t seed)
    : config_(config),
      canon_(config.canon, sub_seed(seed, 0)),
      text_(std::move(vocab), config.text, sub_seed(seed, 1)),
      head_(config.classes, config.text.embed_dim),
      backbone_(config.seg, sub_seed(seed, 2)) {
  if (config.seg.embed_dim != config.text.embed_dim)
    throw Error(ErrorCode::DimMismatch, "backbone and text encoder disagree on the embedding size");
  if (!(config.alpha > 0.0 && config.alpha <= 1.0))
    throw Error(ErrorCode::InvalidArgument, "existence threshold must lie in (0, 1]");
}

template <typename T>
std::vector<ParameterStore<T>*> FlansModel<T>::stores() {
  return {&canon_.params(), &text_.params(), &head_.params(), &backbone_.params()};
}

template <typename T>
std::vector<const ParameterStore<T>*> FlansModel<T>::stores() const {
  return {&canon_.params(), &text_.params(), &head_.params(), &backbone_.params()};
}

template <typename T>
std::vector<Parameter<T>*> FlansModel<T>::parameters() {
  std::vector<Parameter<T>*> out;
  for (auto* s : stores())
    for (auto* p : s->all()) out.push_back(p);
  return out;
}

template <typename T>
typename FlansModel<T>::Forward FlansModel<T>::forward(Tape<T>& tape, const Var<T>& image,
                                                       const std::vector<int>& token_ids,
                                                       bool zero_conditioning) const {
  const std::size_t n = square_side(image.shape());
  if (image.shape().size() != 2)
    throw Error(ErrorCode::ShapeMismatch, "expected [n, n], got " + to_string(image.shape()));
  Var<T> emb = text_.encode(tape, token_ids);
  Var<T> logits = head_.classify(tape, emb);
  Var<T> x = reshape(image, Shape{1, n, n});
  Var<T> seg = backbone_.forward(tape, x, zero_conditioning ? nullptr : &emb);
  return {sigmoid(seg), emb, logits};
}

template <typename T>
SegmentResult<T> FlansModel<T>::segment(const Tensor<T>& image, const std::string& prompt,
                                        const SegmentOptions& options) const {
  check_image(image);
  if (image.rank() != 2) throw Error(ErrorCode::ShapeMismatch, "expected [n, n], got " + to_string(image.shape()));
  const auto ids = text_.vocab().tokenize(prompt);
  GroupElement g_hat = GroupElement::identity(config_.canon.group_order);
  Tensor<T> frame = image;
  if (options.canonicalize) {
    auto c = canon_.canonicalize_hard(image);
    g_hat = c.g_hat;
    frame = std::move(c.image);
  }
  Tape<T> tape(false);
  const auto out = forward(tape, frame, ids, options.zero_conditioning);
  Tensor<T> probs = out.probabilities.value();
  if (options.canonicalize && options.mode == OutputMode::Equivariant) probs = canon_.action().act(g_hat, probs);
  return {std::move(probs), out.intent_logits.value(), g_hat};
}

template <typename T>
bool existence_filter(const Tensor<T>& probabilities, double alpha) {
  for (T p : probabilities.values())
    if (static_cast<double>(p) >= alpha) return true;
  return false;
}

template <typename T>
void check_image(const Tensor<T>& image) {
  square_side(image.shape());
  for (T v : image.values()) {
    if (!(static_cast<double>(v) >= -1e-6 && static_cast<double>(v) <= 1.0 + 1e-6))
      throw Error(ErrorCode::UnnormalizedInput, "pixel value " + std::to_string(static_cast<double>(v)) +
                                                     " outside [0, 1]");
  }
}

template class SegBackbone<float>;
template class SegBackbone<double>;
template class FlansModel<float>;
template class FlansModel<double>;
template bool existence_filter(const Tensor<float>&, double);
template bool existence_filter(const Tensor<double>&, double);
template void check_image(const Tensor<float>&);
template void check_image(const Tensor<double>&);

}  // namespace flans
