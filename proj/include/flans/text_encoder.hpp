// SPDX-License-Identifier: Apache-2.0
//
// Bag-of-tokens prompt encoder and the linear intention head on top of it.
#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "flans/autodiff.hpp"

namespace flans {

class Vocabulary {
 public:
  static constexpr int kUnk = 0;
  static constexpr int kPad = 1;

  // Words are deduplicated and sorted; ids start after the two specials.
  explicit Vocabulary(std::vector<std::string> words, std::size_t max_len = 24);

  std::size_t size() const noexcept { return tokens_.size(); }
  std::size_t max_len() const noexcept { return max_len_; }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }
  int id(const std::string& word) const;

  // Lowercase, split on anything non-alphanumeric, map, then truncate or
  // pad to max_len. Throws EmptyText.
  std::vector<int> tokenize(const std::string& text) const;

  std::string to_json() const;
  static Vocabulary from_json(const std::string& text);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
  std::size_t max_len_;
};

struct TextEncoderConfig {
  int token_dim = 32;
  int hidden = 64;
  int embed_dim = 64;
};

// Embedding table, mean over non-PAD tokens, then Linear-ReLU-Linear to D.
template <typename T>
class TextEncoderNet {
 public:
  TextEncoderNet(Vocabulary vocab, TextEncoderConfig config, std::uint64_t seed);

  const Vocabulary& vocab() const noexcept { return vocab_; }
  const TextEncoderConfig& config() const noexcept { return config_; }
  std::size_t dim() const noexcept { return static_cast<std::size_t>(config_.embed_dim); }
  ParameterStore<T>& params() noexcept { return params_; }
  const ParameterStore<T>& params() const noexcept { return params_; }

  // [D]. A sequence of only PAD tokens encodes like an all-UNK one.
  Var<T> encode(Tape<T>& tape, const std::vector<int>& ids) const;
  Var<T> encode(Tape<T>& tape, const std::string& text) const { return encode(tape, vocab_.tokenize(text)); }
  Tensor<T> encode(const std::string& text) const;

 private:
  Vocabulary vocab_;
  TextEncoderConfig config_;
  ParameterStore<T> params_;
};

// y = W t + b with W [C, D]. Zero-initialised.
template <typename T>
class IntentionHead {
 public:
  IntentionHead(int classes, int dim);

  int classes() const noexcept { return classes_; }
  int dim() const noexcept { return dim_; }
  ParameterStore<T>& params() noexcept { return params_; }
  const ParameterStore<T>& params() const noexcept { return params_; }

  // Throws DimMismatch.
  Var<T> classify(Tape<T>& tape, const Var<T>& embedding) const;
  Tensor<T> classify(const Tensor<T>& embedding) const;

 private:
  int classes_, dim_;
  ParameterStore<T> params_;
};

}  // namespace flans
