// SPDX-License-Identifier: Apache-2.0
#include "flans/text_encoder.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <map>

#include "flans/prompts.hpp"

namespace flans {

Vocabulary::Vocabulary(std::vector<std::string> words, std::size_t max_len) : max_len_(max_len) {
  if (max_len == 0) throw Error(ErrorCode::InvalidArgument, "max_len must be positive");
  std::sort(words.begin(), words.end());
  words.erase(std::unique(words.begin(), words.end()), words.end());
  tokens_ = {"<unk>", "<pad>"};
  for (auto& w : words) {
    if (w.empty() || w == "<unk>" || w == "<pad>") continue;
    tokens_.push_back(std::move(w));
  }
  for (std::size_t i = 0; i < tokens_.size(); ++i) index_.emplace(tokens_[i], static_cast<int>(i));
}

int Vocabulary::id(const std::string& word) const {
  auto it = index_.find(word);
  return it == index_.end() ? kUnk : it->second;
}

std::vector<int> Vocabulary::tokenize(const std::string& text) const {
  const auto words = split_words(text);
  if (words.empty()) throw Error(ErrorCode::EmptyText, "prompt has no words");
  std::vector<int> ids(max_len_, kPad);
  for (std::size_t i = 0; i < std::min(words.size(), max_len_); ++i) ids[i] = id(words[i]);
  return ids;
}

std::string Vocabulary::to_json() const {
  // Specials are implied by position.
  nlohmann::json j;
  j["max_len"] = max_len_;
  j["words"] = std::vector<std::string>(tokens_.begin() + 2, tokens_.end());
  return j.dump();
}

Vocabulary Vocabulary::from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    return Vocabulary(j.at("words").get<std::vector<std::string>>(), j.at("max_len").get<std::size_t>());
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::IoError, std::string("bad vocabulary: ") + e.what());
  }
}

namespace {

template <typename T>
Tensor<T> uniform_init(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(dist(rng));
  return t;
}

}  // namespace

template <typename T>
TextEncoderNet<T>::TextEncoderNet(Vocabulary vocab, TextEncoderConfig config, std::uint64_t seed)
    : vocab_(std::move(vocab)), config_(config) {
  if (config.token_dim <= 0 || config.hidden <= 0 || config.embed_dim <= 0)
    throw Error(ErrorCode::InvalidArgument, "text encoder dims must be positive");
  std::mt19937_64 rng(seed);
  const auto v = vocab_.size();
  const auto d = static_cast<std::size_t>(config.token_dim);
  const auto h = static_cast<std::size_t>(config.hidden);
  const auto e = static_cast<std::size_t>(config.embed_dim);
  std::normal_distribution<double> emb(0.0, 1.0);
  Tensor<T> table(Shape{v, d});
  for (auto& x : table.values()) x = static_cast<T>(emb(rng));
  params_.add("text.embed", std::move(table));
  params_.add("text.fc1.w", uniform_init<T>(Shape{h, d}, d, rng));
  params_.add("text.fc1.b", uniform_init<T>(Shape{h}, d, rng));
  params_.add("text.fc2.w", uniform_init<T>(Shape{e, h}, h, rng));
  params_.add("text.fc2.b", uniform_init<T>(Shape{e}, h, rng));
}

template <typename T>
Var<T> TextEncoderNet<T>::encode(Tape<T>& tape, const std::vector<int>& ids) const {
  const auto v = vocab_.size();
  const auto d = static_cast<std::size_t>(config_.token_dim);
  // Counting first makes the pooled sum independent of token order.
  std::map<int, std::size_t> counts;
  std::size_t n = 0;
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= v)
      throw Error(ErrorCode::InvalidArgument, "token id " + std::to_string(id) + " outside vocabulary");
    if (id == Vocabulary::kPad) continue;
    ++counts[id];
    ++n;
  }
  if (n == 0) {
    counts[Vocabulary::kUnk] = 1;
    n = 1;
  }
  SparseMap pool;
  pool.in_size = v * d;
  for (std::size_t j = 0; j < d; ++j) {
    for (const auto& [id, c] : counts)
      pool.push(static_cast<std::uint32_t>(static_cast<std::size_t>(id) * d + j),
                static_cast<double>(c) / static_cast<double>(n));
    pool.end_row();
  }
  Var<T> bag = remap(tape.param(params_.get("text.embed")), pool, Shape{d});
  Var<T> hid = relu(linear(bag, tape.param(params_.get("text.fc1.w")), tape.param(params_.get("text.fc1.b"))));
  return linear(hid, tape.param(params_.get("text.fc2.w")), tape.param(params_.get("text.fc2.b")));
}

template <typename T>
Tensor<T> TextEncoderNet<T>::encode(const std::string& text) const {
  Tape<T> tape(false);
  return encode(tape, text).value();
}

template <typename T>
IntentionHead<T>::IntentionHead(int classes, int dim) : classes_(classes), dim_(dim) {
  if (classes <= 0 || dim <= 0) throw Error(ErrorCode::InvalidArgument, "intention head dims must be positive");
  params_.add("intent.w", Tensor<T>(Shape{static_cast<std::size_t>(classes), static_cast<std::size_t>(dim)}));
  params_.add("intent.b", Tensor<T>(Shape{static_cast<std::size_t>(classes)}));
}

template <typename T>
Var<T> IntentionHead<T>::classify(Tape<T>& tape, const Var<T>& embedding) const {
  if (embedding.shape() != Shape{static_cast<std::size_t>(dim_)})
    throw Error(ErrorCode::DimMismatch, "intention head expects [" + std::to_string(dim_) + "], got " +
                                            to_string(embedding.shape()));
  return linear(embedding, tape.param(params_.get("intent.w")), tape.param(params_.get("intent.b")));
}

template <typename T>
Tensor<T> IntentionHead<T>::classify(const Tensor<T>& embedding) const {
  Tape<T> tape(false);
  return classify(tape, tape.constant(embedding)).value();
}

template class TextEncoderNet<float>;
template class TextEncoderNet<double>;
template class IntentionHead<float>;
template class IntentionHead<double>;

}  // namespace flans
