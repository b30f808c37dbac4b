// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <random>

#include "flans/prompts.hpp"
#include "flans/text_encoder.hpp"

using namespace flans;

namespace {

Vocabulary bank_vocab() { return Vocabulary(TemplateBank::default_bank().corpus(), 24); }

}  // namespace

TEST(Vocabulary, SpecialsAndDenseIds) {
  const Vocabulary v({"liver", "the", "segment", "the"}, 6);
  ASSERT_EQ(v.size(), 5u);
  EXPECT_EQ(v.tokens()[Vocabulary::kUnk], "<unk>");
  EXPECT_EQ(v.tokens()[Vocabulary::kPad], "<pad>");
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_EQ(v.id(v.tokens()[i]), static_cast<int>(i));
  EXPECT_EQ(v.id("kidney"), Vocabulary::kUnk);
}

TEST(Vocabulary, TokenizeExample) {
  const auto v = bank_vocab();
  const auto ids = v.tokenize("Segment the liver");
  ASSERT_EQ(ids.size(), 24u);
  EXPECT_EQ(ids[0], v.id("segment"));
  EXPECT_EQ(ids[1], v.id("the"));
  EXPECT_EQ(ids[2], v.id("liver"));
  for (std::size_t i = 3; i < ids.size(); ++i) EXPECT_EQ(ids[i], Vocabulary::kPad);
  EXPECT_NE(ids[2], Vocabulary::kUnk);
  EXPECT_EQ(v.tokenize("zyzzyva liver")[0], Vocabulary::kUnk);
  EXPECT_EQ(v.tokenize("the LIVER, please!"), v.tokenize("the liver please"));
  EXPECT_EQ(v.tokenize("Segment the liver"), ids);
}

TEST(Vocabulary, TruncatesAndRejectsEmpty) {
  const Vocabulary v({"a"}, 3);
  EXPECT_EQ(v.tokenize("a a a a a"), (std::vector<int>{2, 2, 2}));
  for (const char* bad : {"", "   ", "?!,."}) {
    try {
      v.tokenize(bad);
      FAIL() << bad;
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::EmptyText);
    }
  }
}

TEST(Vocabulary, JsonRoundTrip) {
  const auto v = bank_vocab();
  const auto back = Vocabulary::from_json(v.to_json());
  EXPECT_EQ(back.tokens(), v.tokens());
  EXPECT_EQ(back.max_len(), v.max_len());
}

TEST(TextEncoder, OutputDimAndDeterminism) {
  const TextEncoderNet<float> net(bank_vocab(), {}, 3);
  const auto a = net.encode("segment the liver");
  ASSERT_EQ(a.shape(), Shape{64});
  for (float x : a.values()) EXPECT_TRUE(std::isfinite(x));
  EXPECT_TRUE(a.bit_equal(net.encode("segment the liver")));
  const TextEncoderNet<float> same(bank_vocab(), {}, 3);
  EXPECT_TRUE(a.bit_equal(same.encode("segment the liver")));
}

TEST(TextEncoder, PadTailIsIgnored) {
  const TextEncoderNet<double> net(bank_vocab(), {}, 4);
  const auto& v = net.vocab();
  std::vector<int> short_ids = {v.id("segment"), v.id("the"), v.id("spleen"), Vocabulary::kPad};
  std::vector<int> long_ids = short_ids;
  long_ids.resize(20, Vocabulary::kPad);
  Tape<double> t1(false), t2(false);
  EXPECT_TRUE(net.encode(t1, short_ids).value().bit_equal(net.encode(t2, long_ids).value()));
}

TEST(TextEncoder, TokenPermutationIsExact) {
  const TextEncoderNet<float> net(bank_vocab(), {}, 5);
  std::mt19937_64 rng(1);
  const auto bank = TemplateBank::default_bank();
  for (std::uint64_t s = 0; s < 50; ++s) {
    auto ids = net.vocab().tokenize(generate_informed(static_cast<int>(s % 24), bank, s).text);
    const auto end = std::find(ids.begin(), ids.end(), Vocabulary::kPad);
    Tape<float> t1(false), t2(false);
    const auto a = net.encode(t1, ids).value();
    std::shuffle(ids.begin(), end, rng);
    EXPECT_TRUE(a.bit_equal(net.encode(t2, ids).value()));
  }
}

TEST(TextEncoder, GradCheckOnSquaredNorm) {
  TextEncoderNet<double> net(Vocabulary({"left", "most", "region", "segment", "the"}, 8), {8, 12, 6}, 6);
  const auto ids = net.vocab().tokenize("segment the left most region the");
  const double err = grad_check_params(
      [&](Tape<double>& tape) {
        Var<double> t = net.encode(tape, ids);
        return sum(mul(t, t));
      },
      net.params().all());
  EXPECT_LE(err, 1e-4);
}

TEST(IntentionHead, ZeroAndIdentity) {
  IntentionHead<double> head(4, 4);
  const Tensor<double> t({4}, {0.3, -1.0, 2.0, 0.5});
  const auto zero = head.classify(t);
  for (double x : zero.values()) EXPECT_EQ(x, 0.0);
  auto& w = head.params().get("intent.w").value;
  for (std::size_t i = 0; i < 4; ++i) w.at(i, i) = 1.0;
  const Tensor<double> onehot({4}, {0, 0, 1, 0});
  EXPECT_TRUE(head.classify(onehot).bit_equal(onehot));
}

TEST(IntentionHead, DimMismatch) {
  const IntentionHead<float> head(4, 64);
  try {
    head.classify(Tensor<float>(Shape{32}));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DimMismatch);
  }
}

TEST(IntentionHead, AffineLinearity) {
  IntentionHead<double> head(24, 64);
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n(0.0, 1.0);
  for (auto* p : head.params().all())
    for (auto& x : p->value.values()) x = n(rng);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor<double> t1(Shape{64}), t2(Shape{64});
    for (auto& x : t1.values()) x = n(rng);
    for (auto& x : t2.values()) x = n(rng);
    const double a = n(rng), b = n(rng);
    Tensor<double> mix(Shape{64});
    for (std::size_t i = 0; i < 64; ++i) mix[i] = a * t1[i] + b * t2[i];
    const auto lhs = head.classify(mix), y1 = head.classify(t1), y2 = head.classify(t2);
    const auto& bias = head.params().get("intent.b").value;
    for (std::size_t c = 0; c < 24; ++c) {
      const double rhs = a * y1[c] + b * y2[c] - (a + b - 1.0) * bias[c];
      EXPECT_NEAR(lhs[c], rhs, 1e-5);
    }
  }
}
