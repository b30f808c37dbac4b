// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <filesystem>
#include <httplib.h>
#include <json.hpp>
#include <random>
#include <set>
#include <thread>

#include "flans/data.hpp"
#include "flans/group.hpp"
#include "flans/prompts.hpp"

using namespace flans;

namespace {

Mask blob(std::size_t n, std::size_t i0, std::size_t j0, std::size_t h, std::size_t w) {
  Mask m(Shape{n, n});
  for (std::size_t i = i0; i < i0 + h; ++i)
    for (std::size_t j = j0; j < j0 + w; ++j) m.at(i, j) = 1;
  return m;
}

// Random disjoint-or-overlapping rectangles and disks; some classes empty.
std::vector<Mask> random_mask_set(std::mt19937_64& rng, std::size_t n) {
  const std::size_t classes = 1 + rng() % 5;
  std::vector<Mask> out;
  for (std::size_t c = 0; c < classes; ++c) {
    Mask m(Shape{n, n});
    const std::size_t pieces = rng() % 3;  // zero pieces leaves the mask empty
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
  if (std::all_of(out.begin(), out.end(), [](const Mask& m) {
        return std::all_of(m.values().begin(), m.values().end(), [](auto v) { return v == 0; });
      })) {
    out[rng() % out.size()].at(rng() % n, rng() % n) = 1;
  }
  return out;
}

// Scan-order oracle: sweep columns/rows from the relevant edge and take the
// first class (lowest id) seen; sizes by direct count.
std::map<SpatialCategory, int> scan_oracle(const std::vector<Mask>& masks) {
  const std::size_t n = masks[0].dim(0);
  std::map<SpatialCategory, int> out;
  auto sweep = [&](SpatialCategory cat, bool columns, bool reverse) {
    for (std::size_t s = 0; s < n; ++s) {
      const std::size_t line = reverse ? n - 1 - s : s;
      for (std::size_t c = 0; c < masks.size(); ++c)
        for (std::size_t k = 0; k < n; ++k) {
          const bool hit = columns ? masks[c].at(k, line) : masks[c].at(line, k);
          if (hit) {
            out[cat] = static_cast<int>(c);
            return;
          }
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
    for (auto v : masks[c].values()) count += v;
    if (!count) continue;
    if (big < 0 || count > bc) big = static_cast<long>(c), bc = count;
    if (small < 0 || count < sc) small = static_cast<long>(c), sc = count;
  }
  out[SpatialCategory::Largest] = static_cast<int>(big);
  out[SpatialCategory::Smallest] = static_cast<int>(small);
  return out;
}

bool has_ties(const std::vector<Mask>& masks) {
  // Any two non-empty masks sharing a count or a bbox edge.
  struct E {
    std::size_t count, l, r, t, b;
  };
  std::vector<E> es;
  const std::size_t n = masks[0].dim(0);
  for (const auto& m : masks) {
    E e{0, n, 0, n, 0};
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (m.at(i, j)) {
          ++e.count;
          e.l = std::min(e.l, j), e.r = std::max(e.r, j), e.t = std::min(e.t, i), e.b = std::max(e.b, i);
        }
    if (e.count) es.push_back(e);
  }
  for (std::size_t a = 0; a < es.size(); ++a)
    for (std::size_t b = a + 1; b < es.size(); ++b)
      if (es[a].count == es[b].count || es[a].l == es[b].l || es[a].r == es[b].r || es[a].t == es[b].t ||
          es[a].b == es[b].b)
        return true;
  return false;
}

}  // namespace

TEST(SpatialCategories, SingleMaskWinsEverything) {
  const auto cats = extract_spatial_categories({Mask(Shape{8, 8}), blob(8, 2, 2, 3, 3)});
  ASSERT_EQ(cats.size(), 6u);
  for (const auto& [c, id] : cats) EXPECT_EQ(id, 1) << to_string(c);
}

TEST(SpatialCategories, TwoBlobExample) {
  // 100 pixels on the left, 50 on the right.
  const auto cats = extract_spatial_categories({blob(32, 5, 1, 10, 10), blob(32, 8, 20, 5, 10)});
  EXPECT_EQ(cats.at(SpatialCategory::Largest), 0);
  EXPECT_EQ(cats.at(SpatialCategory::Smallest), 1);
  EXPECT_EQ(cats.at(SpatialCategory::LeftMost), 0);
  EXPECT_EQ(cats.at(SpatialCategory::RightMost), 1);
}

TEST(SpatialCategories, EqualAreasTieToLowerClass) {
  const auto cats = extract_spatial_categories({blob(16, 0, 0, 3, 3), blob(16, 8, 8, 3, 3)});
  EXPECT_EQ(cats.at(SpatialCategory::Largest), 0);
  EXPECT_EQ(cats.at(SpatialCategory::Smallest), 0);
}

TEST(SpatialCategories, Errors) {
  auto code = [](const std::vector<Mask>& m) {
    try {
      extract_spatial_categories(m);
    } catch (const Error& e) {
      return e.code();
    }
    return ErrorCode::InvalidArgument;
  };
  EXPECT_EQ(code({}), ErrorCode::EmptyMaskSet);
  EXPECT_EQ(code({Mask(Shape{4, 4}), Mask(Shape{4, 4})}), ErrorCode::EmptyMaskSet);
  EXPECT_EQ(code({blob(4, 0, 0, 1, 1), Mask(Shape{5, 5})}), ErrorCode::ShapeMismatch);
}

TEST(SpatialCategories, MatchesScanOracle) {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto masks = random_mask_set(rng, 24);
    EXPECT_EQ(extract_spatial_categories(masks), scan_oracle(masks)) << trial;
  }
}

TEST(SpatialCategories, RelabelingPermutesWinners) {
  std::mt19937_64 rng(18);
  int checked = 0;
  for (int trial = 0; trial < 400; ++trial) {
    auto masks = random_mask_set(rng, 24);
    if (has_ties(masks)) continue;
    std::vector<std::size_t> perm(masks.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<Mask> relabeled(masks.size());
    for (std::size_t c = 0; c < masks.size(); ++c) relabeled[perm[c]] = masks[c];
    const auto a = extract_spatial_categories(masks), b = extract_spatial_categories(relabeled);
    for (auto cat : kAllCategories) EXPECT_EQ(b.at(cat), static_cast<int>(perm[a.at(cat)]));
    ++checked;
  }
  EXPECT_GT(checked, 50);
}

TEST(SpatialCategories, D4ActionsSwapCategories) {
  std::mt19937_64 rng(19);
  GroupAction act(4);
  const auto r180 = GroupElement{2, false, 4}, flip = GroupElement{0, true, 4};
  int checked = 0;
  for (int trial = 0; trial < 400; ++trial) {
    const auto masks = random_mask_set(rng, 24);
    if (has_ties(masks)) continue;
    std::vector<Mask> rot, fl;
    for (const auto& m : masks) {
      rot.push_back(act.act_mask(r180, m));
      fl.push_back(act.act_mask(flip, m));
    }
    const auto a = extract_spatial_categories(masks), r = extract_spatial_categories(rot),
               f = extract_spatial_categories(fl);
    using C = SpatialCategory;
    EXPECT_EQ(r.at(C::LeftMost), a.at(C::RightMost));
    EXPECT_EQ(r.at(C::RightMost), a.at(C::LeftMost));
    EXPECT_EQ(r.at(C::Upmost), a.at(C::Bottom));
    EXPECT_EQ(r.at(C::Bottom), a.at(C::Upmost));
    EXPECT_EQ(r.at(C::Largest), a.at(C::Largest));
    EXPECT_EQ(f.at(C::LeftMost), a.at(C::RightMost));
    EXPECT_EQ(f.at(C::RightMost), a.at(C::LeftMost));
    EXPECT_EQ(f.at(C::Upmost), a.at(C::Upmost));
    EXPECT_EQ(f.at(C::Bottom), a.at(C::Bottom));
    ++checked;
  }
  EXPECT_GT(checked, 50);
}

TEST(TemplateBank, SizesAndRendering) {
  const auto bank = TemplateBank::default_bank();
  EXPECT_EQ(bank.class_count(), 24u);
  EXPECT_GE(bank.informed_templates().size(), 10u);
  for (auto c : kAllCategories) EXPECT_GE(bank.agnostic_templates(c).size(), 10u);
  for (int c = 0; c < 24; ++c)
    for (std::uint64_t s = 0; s < 50; ++s) EXPECT_FALSE(generate_informed(c, bank, s).text.empty());
  EXPECT_THROW(TemplateBank::for_classes({"liver", "heart"}), Error);
}

TEST(Informed, LiverMentionsLiverOrSynonym) {
  const auto bank = TemplateBank::for_classes({"liver", "spleen"});
  const auto p = generate_informed(0, bank, 0);
  EXPECT_TRUE(mentions_organ(p.text, {bank.organ(0)})) << p.text;
  EXPECT_TRUE(contains_phrase("assess the hepatic region", "hepatic region"));
  EXPECT_EQ(p.kind, PromptKind::AnatomyInformed);
  EXPECT_EQ(p.target_class, 0);
  EXPECT_FALSE(p.spatial_category.has_value());
  EXPECT_NO_THROW(p.validate());
}

TEST(Informed, DeterministicAndVaried) {
  const auto bank = TemplateBank::default_bank();
  EXPECT_EQ(generate_informed(3, bank, 42).text, generate_informed(3, bank, 42).text);
  for (int c = 0; c < 24; ++c) {
    std::set<std::string> forms;
    for (std::uint64_t s = 0; s < 1000; ++s) {
      const auto p = generate_informed(c, bank, s);
      EXPECT_TRUE(mentions_organ(p.text, {bank.organ(c)}));
      forms.insert(p.text);
    }
    EXPECT_GE(forms.size(), 10u);
  }
  try {
    generate_informed(24, bank, 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::UnknownClass);
  }
}

TEST(Agnostic, NeverLeaksOrganVocabulary) {
  const auto bank = TemplateBank::default_bank();
  for (auto c : kAllCategories)
    for (std::uint64_t s = 0; s < 100; ++s) {
      const auto p = generate_agnostic(c, bank, s);
      EXPECT_FALSE(mentions_organ(p.text, default_organ_table())) << p.text;
      EXPECT_EQ(p.kind, PromptKind::AnatomyAgnostic);
      EXPECT_EQ(p.spatial_category, c);
      EXPECT_NO_THROW(p.validate());
    }
}

TEST(Agnostic, CarriesCategoryLexicon) {
  const auto bank = TemplateBank::default_bank();
  for (auto c : kAllCategories)
    for (std::uint64_t s = 0; s < 100; ++s) {
      const auto text = generate_agnostic(c, bank, s).text;
      const auto& terms = bank.category_terms(c);
      EXPECT_TRUE(std::any_of(terms.begin(), terms.end(), [&](const std::string& t) { return contains_phrase(text, t); }))
          << text;
    }
  const auto left = generate_agnostic(SpatialCategory::LeftMost, bank, 9).text;
  EXPECT_TRUE(left.find("left") != std::string::npos) << left;
  EXPECT_EQ(generate_agnostic(SpatialCategory::Largest, bank, 3).text,
            generate_agnostic(SpatialCategory::Largest, bank, 3).text);
}

TEST(PromptJsonl, RoundTrip) {
  const auto bank = TemplateBank::default_bank();
  std::vector<Prompt> ps = {generate_informed(1, bank, 5), generate_agnostic(SpatialCategory::Bottom, bank, 6)};
  ps[0].sample_id = "train_0003";
  const auto path = std::filesystem::temp_directory_path() / "flans_prompts.jsonl";
  write_prompts_jsonl(path, ps);
  const auto back = read_prompts_jsonl(path);
  ASSERT_EQ(back.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(back[i].text, ps[i].text);
    EXPECT_EQ(back[i].kind, ps[i].kind);
    EXPECT_EQ(back[i].target_class, ps[i].target_class);
    EXPECT_EQ(back[i].spatial_category, ps[i].spatial_category);
    EXPECT_EQ(back[i].sample_id, ps[i].sample_id);
    EXPECT_EQ(back[i].seed, ps[i].seed);
  }
  const auto j = nlohmann::json::parse(prompt_to_json(ps[1]));
  for (const char* key : {"text", "kind", "target_class", "spatial_category", "sample_id", "seed"})
    EXPECT_TRUE(j.contains(key)) << key;
  EXPECT_THROW(prompt_from_json("{\"text\": \"x\", \"kind\": \"anatomy_informed\", \"target_class\": null, "
                                "\"spatial_category\": null}"),
               Error);
}

class MockProvider : public ::testing::Test {
 protected:
  void SetUp() override {
    server_.Post("/upper", [this](const httplib::Request& req, httplib::Response& res) {
      last_auth_ = req.get_header_value("Authorization");
      auto text = nlohmann::json::parse(req.body).at("text").get<std::string>();
      for (auto& ch : text) ch = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
      res.set_content(nlohmann::json{{"text", text}}.dump(), "application/json");
    });
    server_.Post("/broken", [](const httplib::Request&, httplib::Response& res) { res.status = 500; });
    server_.Post("/garbage", [](const httplib::Request&, httplib::Response& res) {
      res.set_content("not json", "text/plain");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  void TearDown() override {
    server_.stop();
    thread_.join();
  }
  std::string url(const std::string& path) const { return "http://127.0.0.1:" + std::to_string(port_) + path; }

  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
  std::string last_auth_;
};

TEST_F(MockProvider, UppercasingEndpointKeepsMetadata) {
  ASSERT_GT(port_, 0);
  const auto bank = TemplateBank::default_bank();
  Prompt p = generate_informed(0, bank, 1);
  p.sample_id = "s1";
  const auto r = paraphrase_external(p, EndpointConfig{url("/upper"), "secret", 5});
  EXPECT_FALSE(r.warning.has_value());
  std::string upper = p.text;
  for (auto& ch : upper) ch = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
  EXPECT_EQ(r.prompt.text, upper);
  EXPECT_EQ(r.prompt.source, PromptSource::ExternalProvider);
  EXPECT_EQ(r.prompt.kind, p.kind);
  EXPECT_EQ(r.prompt.target_class, p.target_class);
  EXPECT_EQ(r.prompt.sample_id, "s1");
  EXPECT_EQ(last_auth_, "Bearer secret");
}

TEST_F(MockProvider, FailuresFallBackWithWarning) {
  const auto p = generate_agnostic(SpatialCategory::Upmost, TemplateBank::default_bank(), 2);
  for (const auto& path : {"/broken", "/garbage", "/missing"}) {
    const auto r = paraphrase_external(p, EndpointConfig{url(path), "", 5});
    EXPECT_EQ(r.prompt.text, p.text) << path;
    EXPECT_EQ(r.prompt.source, PromptSource::Template);
    EXPECT_TRUE(r.warning.has_value()) << path;
  }
}

TEST(Paraphrase, UnsetEndpointIsIdentity) {
  const auto p = generate_informed(2, TemplateBank::default_bank(), 3);
  const auto r = paraphrase_external(p, EndpointConfig{});
  EXPECT_EQ(r.prompt.text, p.text);
  EXPECT_EQ(r.prompt.source, PromptSource::Template);
  EXPECT_TRUE(paraphrase_external(p, EndpointConfig{"ftp://example.org/x", "", 1}).warning.has_value());
  const auto unreachable = paraphrase_external(p, EndpointConfig{"http://127.0.0.1:1/x", "", 1});
  EXPECT_EQ(unreachable.prompt.text, p.text);
  EXPECT_TRUE(unreachable.warning.has_value());
}

TEST(SpatialCategories, PhantomLayoutHasStableWinners) {
  PhantomSpec spec;
  spec.seed = 23;
  const auto d = generate_samples(spec, 300, "c");
  int full = 0;
  for (const auto& s : d.samples) {
    if (s.present.size() != 4) continue;
    ++full;
    const auto cats = extract_spatial_categories(s.masks);
    using C = SpatialCategory;
    EXPECT_EQ(cats.at(C::Largest), 0) << s.id;
    EXPECT_EQ(cats.at(C::LeftMost), 0) << s.id;
    EXPECT_EQ(cats.at(C::Upmost), 0) << s.id;
    EXPECT_EQ(cats.at(C::Smallest), 1) << s.id;
    EXPECT_EQ(cats.at(C::RightMost), 1) << s.id;
    EXPECT_EQ(cats.at(C::Bottom), 2) << s.id;
  }
  EXPECT_GT(full, 150);
}
