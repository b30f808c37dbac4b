// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>

#include "flans/checkpoint.hpp"
#include "flans/fts.hpp"
#include "flans/pipeline.hpp"

using namespace flans;
namespace fs = std::filesystem;

namespace {

Dataset tiny(std::size_t n, std::uint64_t seed) {
  PhantomSpec spec;
  spec.seed = seed;
  return generate_samples(spec, n, "tiny");
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.epochs1 = c.epochs2 = c.epochs3 = 1;
  c.batch = 2;
  c.seed = 5;
  return c;
}

std::vector<Tensor<float>> snapshot(const ParameterStore<float>& store) {
  std::vector<Tensor<float>> out;
  for (const auto* p : store.all()) out.push_back(p->value);
  return out;
}

bool same(const std::vector<Tensor<float>>& a, const std::vector<Tensor<float>>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!a[i].bit_equal(b[i])) return false;
  return true;
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("flans_test_pipeline_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

struct Fixture {
  Dataset data = tiny(4, 21);
  std::vector<std::string> names = data.manifest.class_names;
  TemplateBank bank = TemplateBank::for_classes(names);
  std::vector<Prompt> prompts = generate_prompt_set(data, bank, 3);
};

}  // namespace

TEST(TrainConfig, ValidationAndJson) {
  TrainConfig c;
  c.seed = 77;
  c.epochs2 = 3;
  const auto back = TrainConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
  auto bad = c;
  bad.lr = 0;
  EXPECT_THROW(bad.validate(), Error);
  bad = c;
  bad.batch = 0;
  EXPECT_THROW(bad.validate(), Error);
  bad = c;
  bad.stage = "4";
  EXPECT_THROW(bad.validate(), Error);
  EXPECT_THROW(TrainConfig::from_json("{\"stage\": 1}"), Error);
}

TEST(Prompts, SetCoversEverySample) {
  Fixture f;
  EXPECT_EQ(f.prompts.size(), f.data.samples.size() * (f.names.size() + kAllCategories.size()));
  const auto index = index_prompts(f.data, f.prompts);
  EXPECT_EQ(index.size(), f.data.samples.size());
  EXPECT_EQ(generate_prompt_set(f.data, f.bank, 3).front().text, f.prompts.front().text);
}

TEST(Prompts, MissingKindThrows) {
  Fixture f;
  std::vector<Prompt> informed_only;
  for (const auto& p : f.prompts)
    if (p.kind == PromptKind::AnatomyInformed) informed_only.push_back(p);
  try {
    index_prompts(f.data, informed_only);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::MissingPrompts);
  }
}

TEST(Training, RejectsNonCanonicalData) {
  Fixture f;
  const Dataset moved = transform_dataset(f.data, group_elements(4), 1);
  auto state = init_training(f.names, f.bank, tiny_config());
  try {
    train_stage1(state, moved);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NonCanonicalDataset);
  }
  EXPECT_THROW(train_stage2(state, moved, f.prompts), Error);
}

TEST(Training, Stage3NeedsStage2) {
  Fixture f;
  auto state = init_training(f.names, f.bank, tiny_config());
  EXPECT_THROW(train_stage3(state, f.data, f.prompts), Error);
}

TEST(Training, StageIsolation) {
  Fixture f;
  auto state = init_training(f.names, f.bank, tiny_config());
  auto& m = state.model;
  const auto canon0 = snapshot(m.canonicalizer().params());
  const auto text0 = snapshot(m.text().params());
  const auto head0 = snapshot(m.head().params());
  const auto seg0 = snapshot(m.backbone().params());

  train_stage1(state, f.data);
  EXPECT_FALSE(same(snapshot(m.canonicalizer().params()), canon0));
  EXPECT_TRUE(same(snapshot(m.text().params()), text0));
  EXPECT_TRUE(same(snapshot(m.head().params()), head0));
  EXPECT_TRUE(same(snapshot(m.backbone().params()), seg0));

  const auto canon1 = snapshot(m.canonicalizer().params());
  train_stage2(state, f.data, f.prompts);
  EXPECT_TRUE(same(snapshot(m.canonicalizer().params()), canon1));
  EXPECT_FALSE(same(snapshot(m.backbone().params()), seg0));
  EXPECT_FALSE(same(snapshot(m.head().params()), head0));

  train_stage3(state, f.data, f.prompts);
  EXPECT_FALSE(same(snapshot(m.canonicalizer().params()), canon1));
  EXPECT_EQ(state.stages, (std::vector<std::string>{"1", "2", "3"}));
  for (auto* p : m.parameters()) EXPECT_TRUE(p->trainable) << p->name;
}

// The intention head starts at zero; with no informed prompt it never gets a
// gradient, and weight decay keeps zero at zero.
TEST(Training, AgnosticOnlyBatchesLeaveIntentHeadAtZero) {
  Fixture f;
  auto cfg = tiny_config();
  cfg.informed_fraction = 0.0;
  auto state = init_training(f.names, f.bank, cfg);
  const auto seg0 = snapshot(state.model.backbone().params());
  train_stage2(state, f.data, f.prompts);
  for (const auto* p : state.model.head().params().all())
    for (float v : p->value.values()) EXPECT_EQ(v, 0.0f) << p->name;
  EXPECT_FALSE(same(snapshot(state.model.backbone().params()), seg0));
}

TEST(Training, IdenticalSeedsGiveIdenticalRuns) {
  Fixture f;
  auto run = [&] {
    auto state = init_training(f.names, f.bank, tiny_config());
    train(state, f.data, f.prompts);
    return state;
  };
  auto a = run(), b = run();
  const auto pa = a.model.parameters(), pb = b.model.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_TRUE(pa[i]->value.bit_equal(pb[i]->value)) << pa[i]->name;
  const std::vector<AblationRow> ra{{"m", "c", evaluate(a.model, f.data, f.prompts)}};
  const std::vector<AblationRow> rb{{"m", "c", evaluate(b.model, f.data, f.prompts)}};
  EXPECT_EQ(report_csv(ra), report_csv(rb));
}

TEST(Checkpoint, RoundTripIsBitExact) {
  Fixture f;
  auto state = init_training(f.names, f.bank, tiny_config());
  train(state, f.data, f.prompts);
  const auto dir = scratch("roundtrip");
  save_checkpoint(dir / "ck", state.model, state.meta());
  auto loaded = load_checkpoint(dir / "ck");
  EXPECT_EQ(loaded.meta.stages, state.stages);
  EXPECT_EQ(loaded.meta.class_names, f.names);
  EXPECT_EQ(loaded.meta.train_config, state.config.to_json());
  const auto pa = state.model.parameters(), pb = loaded.model.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_TRUE(pa[i]->value.bit_equal(pb[i]->value)) << pa[i]->name;
  for (const auto& s : f.data.samples) {
    const auto a = state.model.segment(s.image, "segment the left kidney");
    const auto b = loaded.model.segment(s.image, "segment the left kidney");
    EXPECT_TRUE(a.probabilities.bit_equal(b.probabilities));
    EXPECT_TRUE(a.intent_logits.bit_equal(b.intent_logits));
  }
  // Resuming restores the rng stream.
  const auto resumed = resume_training(load_checkpoint(dir / "ck"), state.config);
  auto r1 = resumed.rng;
  auto r2 = state.rng;
  EXPECT_EQ(r1(), r2());
  fs::remove_all(dir);
}

TEST(Checkpoint, CorruptionIsReported) {
  Fixture f;
  auto state = init_training(f.names, f.bank, tiny_config());
  const auto dir = scratch("corrupt");
  save_checkpoint(dir / "ck", state.model, state.meta());

  fs::copy(dir / "ck", dir / "missing", fs::copy_options::recursive);
  fs::remove(dir / "missing" / "tensors" / "seg.head.w.fts");
  EXPECT_THROW(load_checkpoint(dir / "missing"), Error);

  fs::copy(dir / "ck", dir / "shape", fs::copy_options::recursive);
  write_fts(dir / "shape" / "tensors" / "seg.head.b.fts", Tensor<float>(Shape{2}));
  EXPECT_THROW(load_checkpoint(dir / "shape"), Error);

  fs::copy(dir / "ck", dir / "index", fs::copy_options::recursive);
  write_file(dir / "index" / "index.json", "{\"version\": 1");
  EXPECT_THROW(load_checkpoint(dir / "index"), Error);

  EXPECT_THROW(load_checkpoint(dir / "nope"), Error);
  fs::remove_all(dir);
}

// Energies permute exactly under D4, so a random canonicalizer is already
// invariant wherever its argmax is unique.
TEST(Evaluation, FreshCanonicalizerIsInvariantOnUniqueArgmax) {
  Fixture f;
  auto state = init_training(f.names, f.bank, tiny_config());
  const auto& canon = state.model.canonicalizer();
  Dataset unique;
  unique.manifest = f.data.manifest;
  for (const auto& s : f.data.samples) {
    auto e = canon.energies(s.image);
    std::sort(e.rbegin(), e.rend());
    if (e[0] - e[1] > 1e-4f * std::max(1.0f, std::abs(e[0]))) unique.samples.push_back(s);
  }
  ASSERT_FALSE(unique.samples.empty());
  EXPECT_EQ(canonicalization_invariance(canon, unique), 1.0);
  EXPECT_THROW(canonicalization_invariance(canon, Dataset{}), Error);
}

TEST(Ablation, ReportFormats) {
  EvalReport r;
  r.dice_informed = 0.5;
  const std::vector<AblationRow> rows{{"full", "canonical", r}, {"-augmentation", "transformed", r}};
  const auto csv = report_csv(rows);
  EXPECT_NE(csv.find("full,canonical,0.500000"), std::string::npos);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
  const auto table = report_table(rows);
  EXPECT_NE(table.find("-augmentation"), std::string::npos);
}
