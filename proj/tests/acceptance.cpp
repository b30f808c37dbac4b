// SPDX-License-Identifier: Apache-2.0
//
// Acceptance runner: one PASS/FAIL line per criterion. Criteria 6-10 share
// one default-scale training run; criterion 10 repeats it with the same
// seeds and compares the metric CSVs byte for byte.
//
//   acceptance [--seed N] [--only 1,2,...] [--work DIR]
#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <set>
#include <sstream>

#include "flans/checkpoint.hpp"
#include "flans/fts.hpp"
#include "flans/losses.hpp"
#include "flans/pipeline.hpp"
#include "flans/selfcheck.hpp"

using namespace flans;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

double since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

int failures = 0;

void line(int id, bool pass, const std::string& text) {
  std::printf("[%s] criterion %2d: %s\n", pass ? "PASS" : "FAIL", id, text.c_str());
  std::fflush(stdout);
  failures += !pass;
}

void note(const std::string& text) {
  std::printf("       %s\n", text.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

const EvalReport& row(const std::vector<AblationRow>& rows, const std::string& variant, const std::string& set) {
  for (const auto& r : rows)
    if (r.variant == variant && r.test_set == set) return r.report;
  throw std::runtime_error("no row " + variant + "/" + set);
}

double mean_dice(const EvalReport& r) { return 0.5 * (r.dice_informed + r.dice_agnostic); }

// Fraction of r180 and flip copies of test images (both kidneys present) on
// which the "right kidney" prompt picks the right kidney: Dice with it at
// least 0.5 and above the Dice with the left kidney.
double right_kidney_rate(const FlansModel<float>& model, const Dataset& test, const TemplateBank& bank,
                         bool canonicalize, std::uint64_t seed, std::size_t* count) {
  const auto& names = test.manifest.class_names;
  const auto find = [&](const std::string& n) {
    return static_cast<int>(std::find(names.begin(), names.end(), n) - names.begin());
  };
  const int right = find("right kidney"), left = find("left kidney");
  if (right >= static_cast<int>(names.size()) || left >= static_cast<int>(names.size()))
    throw std::runtime_error("test set lacks the kidney pair");
  const GroupAction act(4);
  std::size_t total = 0, hits = 0;
  SegmentOptions opt;
  opt.canonicalize = canonicalize;
  for (const auto& s : test.samples) {
    const auto has = [&](int c) { return std::find(s.present.begin(), s.present.end(), c) != s.present.end(); };
    if (!has(right) || !has(left)) continue;
    for (const GroupElement g : {GroupElement{2, false, 4}, GroupElement{0, true, 4}}) {
      const auto prompt = generate_informed(right, bank, seed + total);
      const auto probs = model.segment(act.act(g, s.image), prompt.text, opt).probabilities;
      const Mask pred = binarize(probs, 0.5);
      const double dr = dice_metric(pred, act.act_mask(g, s.masks[static_cast<std::size_t>(right)]));
      const double dl = dice_metric(pred, act.act_mask(g, s.masks[static_cast<std::size_t>(left)]));
      hits += dr >= 0.5 && dr > dl;
      ++total;
    }
  }
  *count = total;
  return total ? static_cast<double>(hits) / static_cast<double>(total) : 0.0;
}

struct Corpus {
  Dataset train, test;
  std::vector<Prompt> train_prompts, test_prompts;
  TemplateBank bank = TemplateBank::default_bank();
};

// Same seeds as `flans gen-data` / `gen-prompts`.
Corpus make_corpus(std::uint64_t seed) {
  PhantomSpec spec;
  Corpus c;
  spec.seed = seed * 1000003 + 1;
  c.train = generate_samples(spec, 400, "train");
  spec.seed = seed * 1000003 + 3;
  c.test = generate_samples(spec, 50, "test");
  c.bank = TemplateBank::for_classes(c.train.manifest.class_names);
  c.train_prompts = generate_prompt_set(c.train, c.bank, seed + 1);
  c.test_prompts = generate_prompt_set(c.test, c.bank, seed + 1);
  return c;
}

double stage_seconds(const TrainState& s) {
  double t = 0;
  for (const auto& e : s.log) t += e.seconds;
  return t;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::uint64_t seed = 1;
  std::string only;
  fs::path work = fs::temp_directory_path() / "flans_acceptance";
  app.add_option("--seed", seed);
  app.add_option("--only", only, "comma-separated criterion ids");
  app.add_option("--work", work);
  CLI11_PARSE(app, argc, argv);
  std::set<int> want;
  if (only.empty()) {
    for (int i = 1; i <= 10; ++i) want.insert(i);
  } else {
    std::stringstream ss(only);
    for (std::string t; std::getline(ss, t, ',');) want.insert(std::stoi(t));
  }
  fs::create_directories(work);
  set_flush_denormals(true);

  try {
    if (want.count(1)) {
      const auto t = Clock::now();
      const auto a = check_equivariance_f32(100, seed), b = check_equivariance_f64(100, seed);
      const double secs = since(t);
      line(1, a.passed && b.passed && secs < 30,
           "equivariance over 100 draws: f32 max " + fmt("%.2e", a.value) + " (<= 1e-5), f64 max " +
               fmt("%.2e", b.value) + " (<= 1e-10), " + fmt("%.1f", secs) + " s (< 30 s)");
    }
    if (want.count(3)) {
      const auto t = Clock::now();
      const auto r = check_model_invariance(16, seed);
      const double secs = since(t);
      line(3, r.passed && secs < 60,
           "model invariance max " + fmt("%.2e", r.value) + " (<= 1e-5), " + r.detail + ", " + fmt("%.1f", secs) +
               " s (< 60 s)");
    }
    if (want.count(4)) {
      const auto t = Clock::now();
      const auto rs = check_gradients(seed);
      const double secs = since(t);
      double worst = 0;
      std::string worst_name;
      bool ok = true;
      for (const auto& r : rs) {
        ok = ok && r.passed;
        if (r.value >= worst) worst = r.value, worst_name = r.name;
        if (!r.passed) note("failed: " + r.name + " " + fmt("%.3e", r.value));
      }
      line(4, ok && secs < 300,
           std::to_string(rs.size()) + " gradient checks, worst " + fmt("%.2e", worst) + " (" + worst_name +
               ", <= 1e-4), " + fmt("%.1f", secs) + " s (< 300 s)");
    }
    if (want.count(5)) {
      const auto r = check_spatial_oracle(1000, seed);
      line(5, r.passed, "spatial oracle: " + r.detail);
    }

    const bool need_run = want.count(2) || want.count(6) || want.count(7) || want.count(8) || want.count(9) ||
                          want.count(10);
    if (!need_run) return failures ? 1 : 0;

    const Corpus corpus = make_corpus(seed);
    TrainConfig cfg;
    cfg.seed = seed;
    note("training: 400 samples, epochs " + std::to_string(cfg.epochs1) + "/" + std::to_string(cfg.epochs2) + "/" +
         std::to_string(cfg.epochs3) + ", progress on stderr");
    auto run = run_ablation(corpus.train, corpus.train_prompts, corpus.test, corpus.test_prompts,
                            corpus.train.manifest.class_names, corpus.bank, cfg, &std::cerr);
    const std::string csv = report_csv(run.rows);
    write_file(work / "ablation_run1.csv", csv);
    std::cout << report_table(run.rows);

    {
      // Stage 2 leaves the canonicalizer untouched, so the stage-2 copy
      // holds the canonicalizer exactly as stage 1 left it.
      const auto& canon = run.no_aug.model.canonicalizer();
      const double inv = canonicalization_invariance(canon, corpus.test);
      const double inv3 = canonicalization_invariance(run.full.model.canonicalizer(), corpus.test);
      if (want.count(2))
        line(2, inv >= 0.99,
             "canonicalization invariant under all 8 elements on " + fmt("%.0f%%", 100 * inv) +
                 " of 50 held-out samples after stage 1 (>= 99%); " + fmt("%.0f%%", 100 * inv3) + " after stage 3");
      std::vector<double> s1;
      for (const auto& e : run.full.log)
        if (e.stage == "1") s1.push_back(e.loss);
      bool decreasing = s1.size() >= 3 && s1[1] < s1[0] && s1[2] < s1[1];
      note(std::string("stage-1 loss over first 3 epochs ") + (decreasing ? "strictly decreases" : "does NOT decrease") +
           ": " + fmt("%.5f", s1.size() > 0 ? s1[0] : 0) + " " + fmt("%.5f", s1.size() > 1 ? s1[1] : 0) + " " +
           fmt("%.5f", s1.size() > 2 ? s1[2] : 0));
    }

    if (want.count(6)) {
      const auto& c = row(run.rows, "full", "canonical");
      const auto& t = row(run.rows, "full", "transformed");
      const double secs = stage_seconds(run.full);
      const bool ok = c.dice_informed >= 0.85 && c.nsd_informed >= 0.85 && c.dice_agnostic >= 0.85 &&
                      c.nsd_agnostic >= 0.85 && t.dice_informed >= 0.80 && t.dice_agnostic >= 0.80 &&
                      c.intent_accuracy >= 0.95 && secs <= 900;
      line(6, ok,
           "canonical Dice/NSD informed " + fmt("%.3f", c.dice_informed) + "/" + fmt("%.3f", c.nsd_informed) +
               ", agnostic " + fmt("%.3f", c.dice_agnostic) + "/" + fmt("%.3f", c.nsd_agnostic) +
               " (>= 0.85); transformed Dice informed " + fmt("%.3f", t.dice_informed) + ", agnostic " +
               fmt("%.3f", t.dice_agnostic) + " (>= 0.80); intent " + fmt("%.3f", c.intent_accuracy) +
               " (>= 0.95); training " + fmt("%.0f", secs) + " s (<= 900 s)");
    }
    if (want.count(7)) {
      const double full_t = mean_dice(row(run.rows, "full", "transformed"));
      const double canon_t = mean_dice(row(run.rows, "-canonicalization", "transformed"));
      const double aug_t = mean_dice(row(run.rows, "-augmentation", "transformed"));
      const double full_c = mean_dice(row(run.rows, "full", "canonical"));
      const double canon_c = mean_dice(row(run.rows, "-canonicalization", "canonical"));
      const double aug_c = mean_dice(row(run.rows, "-augmentation", "canonical"));
      const double spread = std::max({full_c, canon_c, aug_c}) - std::min({full_c, canon_c, aug_c});
      const bool ok = full_t > canon_t && canon_t > aug_t && full_t - aug_t >= 0.2 && spread <= 0.1;
      line(7, ok,
           "transformed Dice full " + fmt("%.3f", full_t) + " > -canon " + fmt("%.3f", canon_t) + " > -aug " +
               fmt("%.3f", aug_t) + ", gap " + fmt("%.3f", full_t - aug_t) + " (>= 0.2); canonical spread " +
               fmt("%.3f", spread) + " (<= 0.1)");
    }
    if (want.count(8)) {
      std::size_t n_on = 0, n_off = 0;
      const double on = right_kidney_rate(run.full.model, corpus.test, corpus.bank, true, seed, &n_on);
      const double off = right_kidney_rate(run.no_aug.model, corpus.test, corpus.bank, false, seed, &n_off);
      line(8, on == 1.0 && 1.0 - off > 0.2,
           "\"right kidney\" on " + std::to_string(n_on) + " r180/flip images: canonicalizer on " +
               fmt("%.1f%%", 100 * on) + " correct (100%), stage-2 model with canonicalizer off error " +
               fmt("%.1f%%", 100 * (1 - off)) + " (> 20%)");
    }
    if (want.count(9)) {
      const auto& c = row(run.rows, "full", "canonical");
      const auto& t = row(run.rows, "full", "transformed");
      const double absent = std::min(c.absent_detected, t.absent_detected);
      const double present = std::min(c.present_detected, t.present_detected);
      line(9, absent >= 0.9 && present >= 0.95,
           "existence filter: absent flagged on " + fmt("%.1f%%", 100 * absent) + " of " +
               std::to_string(c.absent_queries) + " absent queries (>= 90%), present on " +
               fmt("%.1f%%", 100 * present) + " (>= 95%), worst of canonical and transformed sets");
    }
    if (want.count(10)) {
      const auto fts = check_fts_roundtrip(seed);
      const auto ck = check_checkpoint_roundtrip(work, seed);
      save_checkpoint(work / "full", run.full.model, run.full.meta());
      const auto loaded = load_checkpoint(work / "full");
      std::size_t mismatched = 0;
      for (const auto& s : corpus.test.samples)
        for (const char* p : {"segment the liver", "highlight the smallest structure"})
          mismatched += !run.full.model.segment(s.image, p).probabilities.bit_equal(
              loaded.model.segment(s.image, p).probabilities);
      note("repeating the full run with the same seeds");
      const auto again = run_ablation(corpus.train, corpus.train_prompts, corpus.test, corpus.test_prompts,
                                      corpus.train.manifest.class_names, corpus.bank, cfg, &std::cerr);
      const std::string csv2 = report_csv(again.rows);
      write_file(work / "ablation_run2.csv", csv2);
      line(10, fts.passed && ck.passed && mismatched == 0 && csv == csv2,
           "FTS round trip " + std::string(fts.passed ? "exact" : "MISMATCH") + ", checkpoint round trip " +
               (ck.passed && mismatched == 0 ? "exact" : "MISMATCH") + " (trained model, 100 forward passes), " +
               "repeat-run metric CSV " + (csv == csv2 ? "identical" : "DIFFERENT"));
    }
  } catch (const std::exception& e) {
    std::printf("acceptance aborted: %s\n", e.what());
    return 1;
  }
  std::printf("%s\n", failures ? "acceptance FAILED" : "acceptance passed");
  return failures ? 1 : 0;
}
