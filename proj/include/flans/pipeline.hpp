// SPDX-License-Identifier: Apache-2.0
//
// Three-stage training (canonicalizer alone, prompted segmentation on
// canonical scans, joint training under random group transforms),
// evaluation and the ablation harness.
#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "flans/checkpoint.hpp"
#include "flans/data.hpp"
#include "flans/optim.hpp"
#include "flans/prompts.hpp"
#include "flans/seg_net.hpp"

namespace flans {

struct TrainConfig {
  std::string stage = "all";  // 1, 2, 3 or all
  double lr = 2e-3;           // text encoder, intention head, backbone
  double canon_lr = 3e-3;
  double stage3_lr = 5e-4;    // joint fine-tuning, all parameters
  double lr_floor = 1e-6;
  AdamWConfig adamw;
  std::size_t batch = 8;
  int epochs1 = 4;
  int epochs2 = 16;
  int epochs3 = 8;
  std::uint64_t seed = 0;
  int group_order = 4;
  // Soft-canonicalization temperature, halved after each third of stage 1.
  double temperature = 0.1;
  // Weight of the stage-1 objective kept alive during stage 3.
  double aux_weight = 1.0;
  // The stage-3 auxiliary term runs on every aux_every-th sample.
  std::size_t aux_every = 4;
  bool stage3_transforms = true;
  bool use_canonicalizer = true;
  double informed_fraction = 0.5;
  // Share of informed queries aimed at an absent class, when the sample has
  // one. Absent classes are rare in the phantoms.
  double absent_fraction = 1.0;

  void validate() const;
  std::string to_json() const;
  static TrainConfig from_json(const std::string& text);
};

struct EpochLog {
  std::string stage;
  int epoch;
  double loss;
  double lr;
  double seconds;
};

// Prompts grouped by sample id.
using PromptIndex = std::map<std::string, std::vector<Prompt>>;

// Every class (informed) and every category (agnostic) once per sample,
// each with its own derived seed.
std::vector<Prompt> generate_prompt_set(const Dataset& dataset, const TemplateBank& bank, std::uint64_t seed);
// Throws MissingPrompts when a sample has no informed or no agnostic prompt.
PromptIndex index_prompts(const Dataset& dataset, const std::vector<Prompt>& prompts);

struct TrainState {
  FlansModel<float> model;
  std::vector<std::string> class_names;
  TrainConfig config;
  std::vector<std::string> stages;
  std::vector<EpochLog> log;
  std::mt19937_64 rng;
  std::ostream* progress = nullptr;

  CheckpointMeta meta() const;
};

// Builds the vocabulary from the bank and a fresh model seeded by config.
TrainState init_training(const std::vector<std::string>& class_names, const TemplateBank& bank,
                         const TrainConfig& config);
TrainState resume_training(LoadedCheckpoint checkpoint, const TrainConfig& config);

// Throws NonCanonicalDataset.
void train_stage1(TrainState& state, const Dataset& train);
// Throws NonCanonicalDataset, MissingPrompts.
void train_stage2(TrainState& state, const Dataset& train, const std::vector<Prompt>& prompts);
// Throws NonCanonicalDataset, MissingPrompts.
void train_stage3(TrainState& state, const Dataset& train, const std::vector<Prompt>& prompts);
// Runs the stages named by config.stage.
void train(TrainState& state, const Dataset& train, const std::vector<Prompt>& prompts);

struct EvalOptions {
  bool canonicalize = true;
  int tau = 2;
  double threshold = 0.5;
};

struct EvalReport {
  double dice_informed = 0, nsd_informed = 0;
  double dice_agnostic = 0, nsd_agnostic = 0;
  double intent_accuracy = 0;
  double absent_detected = 0;   // absent-class queries flagged absent
  double present_detected = 0;  // present-class queries flagged present
  std::size_t informed_queries = 0, agnostic_queries = 0, absent_queries = 0;
};

// Informed queries score present classes; absent classes feed the existence
// rates. Agnostic targets are resolved on the frame the model segments in
// (canonicalized when enabled).
EvalReport evaluate(const FlansModel<float>& model, const Dataset& test, const std::vector<Prompt>& prompts,
                    const EvalOptions& options = {});

// Canonical-frame accuracy of g_hat against recorded transforms, up to the
// stabilizer of each sample (elements leaving the image unchanged).
double canonicalization_accuracy(const Canonicalizer<float>& canon, const Dataset& transformed,
                                 const Dataset& original);

// Fraction of samples whose hard canonical image is the same bit pattern for
// every group element applied to the input.
double canonicalization_invariance(const Canonicalizer<float>& canon, const Dataset& dataset);

struct AblationRow {
  std::string variant;
  std::string test_set;
  EvalReport report;
};

struct AblationResult {
  std::vector<AblationRow> rows;
  TrainState full;     // all three stages
  TrainState no_aug;   // stage 2 only, canonicalizer off
};

// Variants: full, -canonicalization (+augmentation) and -augmentation.
// The last two reuse the stage-2 weights of the full run.
AblationResult run_ablation(const Dataset& train, const std::vector<Prompt>& train_prompts, const Dataset& test,
                            const std::vector<Prompt>& test_prompts, const std::vector<std::string>& class_names,
                            const TemplateBank& bank, const TrainConfig& config, std::ostream* progress = nullptr);

std::string report_csv(const std::vector<AblationRow>& rows);
std::string report_table(const std::vector<AblationRow>& rows);

}  // namespace flans
