// SPDX-License-Identifier: Apache-2.0
#include "flans/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <json.hpp>
#include <ostream>
#include <sstream>

#include "flans/losses.hpp"

namespace flans {

using json = nlohmann::json;

// ---- config -------------------------------------------------------------------

void TrainConfig::validate() const {
  if (stage != "1" && stage != "2" && stage != "3" && stage != "all")
    throw Error(ErrorCode::InvalidArgument, "stage must be 1, 2, 3 or all, got " + stage);
  if (!(lr > 0) || !(canon_lr > 0) || !(stage3_lr > 0)) throw Error(ErrorCode::InvalidArgument, "learning rates must be positive");
  if (lr_floor < 0 || lr_floor > std::min({lr, canon_lr, stage3_lr}))
    throw Error(ErrorCode::InvalidArgument, "lr floor must lie in [0, lr]");
  if (batch < 1) throw Error(ErrorCode::InvalidArgument, "batch must be at least 1");
  if (epochs1 < 1 || epochs2 < 1 || epochs3 < 1) throw Error(ErrorCode::InvalidArgument, "epochs must be positive");
  if (group_order != 4 && group_order != 8) throw Error(ErrorCode::GroupOrderMismatch, "group order must be 4 or 8");
  if (!(temperature > 0)) throw Error(ErrorCode::NonPositiveTemperature, "temperature must be positive");
  if (aux_weight < 0) throw Error(ErrorCode::InvalidArgument, "aux weight must be non-negative");
  if (aux_every < 1) throw Error(ErrorCode::InvalidArgument, "aux_every must be at least 1");
  if (!(informed_fraction >= 0 && informed_fraction <= 1) || !(absent_fraction >= 0 && absent_fraction <= 1))
    throw Error(ErrorCode::InvalidArgument, "informed and absent fractions must lie in [0, 1]");
}

std::string TrainConfig::to_json() const {
  json j = {{"stage", stage},
            {"lr", lr},
            {"canon_lr", canon_lr},
            {"stage3_lr", stage3_lr},
            {"lr_floor", lr_floor},
            {"beta1", adamw.beta1},
            {"beta2", adamw.beta2},
            {"eps", adamw.eps},
            {"weight_decay", adamw.weight_decay},
            {"batch", batch},
            {"epochs1", epochs1},
            {"epochs2", epochs2},
            {"epochs3", epochs3},
            {"seed", seed},
            {"group_order", group_order},
            {"temperature", temperature},
            {"aux_weight", aux_weight},
            {"aux_every", aux_every},
            {"stage3_transforms", stage3_transforms},
            {"use_canonicalizer", use_canonicalizer},
            {"informed_fraction", informed_fraction},
            {"absent_fraction", absent_fraction}};
  return j.dump();
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  try {
    const auto j = json::parse(text);
    TrainConfig c;
    c.stage = j.at("stage").get<std::string>();
    c.lr = j.at("lr").get<double>();
    c.canon_lr = j.at("canon_lr").get<double>();
    c.stage3_lr = j.at("stage3_lr").get<double>();
    c.lr_floor = j.at("lr_floor").get<double>();
    c.adamw.beta1 = j.at("beta1").get<double>();
    c.adamw.beta2 = j.at("beta2").get<double>();
    c.adamw.eps = j.at("eps").get<double>();
    c.adamw.weight_decay = j.at("weight_decay").get<double>();
    c.batch = j.at("batch").get<std::size_t>();
    c.epochs1 = j.at("epochs1").get<int>();
    c.epochs2 = j.at("epochs2").get<int>();
    c.epochs3 = j.at("epochs3").get<int>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.group_order = j.at("group_order").get<int>();
    c.temperature = j.at("temperature").get<double>();
    c.aux_weight = j.at("aux_weight").get<double>();
    c.aux_every = j.at("aux_every").get<std::size_t>();
    c.stage3_transforms = j.at("stage3_transforms").get<bool>();
    c.use_canonicalizer = j.at("use_canonicalizer").get<bool>();
    c.informed_fraction = j.at("informed_fraction").get<double>();
    c.absent_fraction = j.at("absent_fraction").get<double>();
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::IoError, std::string("bad train config: ") + e.what());
  }
}

// ---- prompts ------------------------------------------------------------------

namespace {

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a ^ (b + 0x9E3779B97F4A7C15ULL + (a << 6) + (a >> 2));
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace

std::vector<Prompt> generate_prompt_set(const Dataset& dataset, const TemplateBank& bank, std::uint64_t seed) {
  std::vector<Prompt> out;
  for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
    const auto& s = dataset.samples[i];
    const std::uint64_t base = mix(seed, i);
    for (std::size_t c = 0; c < s.masks.size(); ++c) {
      Prompt p = generate_informed(static_cast<int>(c), bank, mix(base, c));
      p.sample_id = s.id;
      out.push_back(std::move(p));
    }
    for (std::size_t k = 0; k < kAllCategories.size(); ++k) {
      Prompt p = generate_agnostic(kAllCategories[k], bank, mix(base, 100 + k));
      p.sample_id = s.id;
      out.push_back(std::move(p));
    }
  }
  return out;
}

PromptIndex index_prompts(const Dataset& dataset, const std::vector<Prompt>& prompts) {
  PromptIndex index;
  const auto classes = static_cast<int>(dataset.manifest.class_names.size());
  for (const auto& p : prompts) {
    p.validate();
    if (p.target_class && *p.target_class >= classes)
      throw Error(ErrorCode::UnknownClass, "prompt targets class " + std::to_string(*p.target_class));
    index[p.sample_id].push_back(p);
  }
  for (const auto& s : dataset.samples) {
    auto it = index.find(s.id);
    const bool ok = it != index.end() &&
                    std::any_of(it->second.begin(), it->second.end(),
                                [](const Prompt& p) { return p.kind == PromptKind::AnatomyInformed; }) &&
                    std::any_of(it->second.begin(), it->second.end(),
                                [](const Prompt& p) { return p.kind == PromptKind::AnatomyAgnostic; });
    if (!ok) throw Error(ErrorCode::MissingPrompts, "sample " + s.id + " lacks informed or agnostic prompts");
  }
  return index;
}

// ---- training -----------------------------------------------------------------

CheckpointMeta TrainState::meta() const {
  CheckpointMeta m;
  m.stages = stages;
  m.class_names = class_names;
  m.seed = config.seed;
  std::ostringstream os;
  os << rng;
  m.rng_state = os.str();
  m.train_config = config.to_json();
  return m;
}

namespace {

ModelConfig model_config_for(std::size_t classes, const TrainConfig& config) {
  ModelConfig m;
  m.classes = static_cast<int>(classes);
  m.canon.group_order = config.group_order;
  return m;
}

}  // namespace

TrainState init_training(const std::vector<std::string>& class_names, const TemplateBank& bank,
                         const TrainConfig& config) {
  config.validate();
  if (class_names.empty()) throw Error(ErrorCode::InvalidArgument, "no classes");
  return TrainState{FlansModel<float>(Vocabulary(bank.corpus()), model_config_for(class_names.size(), config),
                                      config.seed),
                    class_names,
                    config,
                    {},
                    {},
                    std::mt19937_64(mix(config.seed, 0xC0FFEE)),
                    nullptr};
}

TrainState resume_training(LoadedCheckpoint checkpoint, const TrainConfig& config) {
  config.validate();
  if (checkpoint.model.config().canon.group_order != config.group_order)
    throw Error(ErrorCode::GroupOrderMismatch, "checkpoint was trained for a different group");
  std::mt19937_64 rng;
  std::istringstream is(checkpoint.meta.rng_state);
  if (!(is >> rng)) rng.seed(mix(config.seed, 0xC0FFEE));
  return TrainState{std::move(checkpoint.model), checkpoint.meta.class_names, config, checkpoint.meta.stages, {},
                    rng, nullptr};
}

namespace {

using Clock = std::chrono::steady_clock;

std::vector<Parameter<float>*> collect(std::initializer_list<ParameterStore<float>*> stores) {
  std::vector<Parameter<float>*> out;
  for (auto* s : stores) {
    s->set_trainable(true);
    for (auto* p : s->all()) out.push_back(p);
  }
  return out;
}

std::size_t steps_per_epoch(std::size_t n, std::size_t batch) { return (n + batch - 1) / batch; }

void report(TrainState& state, const std::string& stage, int epoch, int epochs, double loss, double lr,
            Clock::time_point start) {
  const double secs = std::chrono::duration<double>(Clock::now() - start).count();
  state.log.push_back({stage, epoch, loss, lr, secs});
  if (!state.progress) return;
  *state.progress << "stage " << stage << " epoch " << epoch + 1 << "/" << epochs << " loss " << std::fixed
                  << std::setprecision(5) << loss << " lr " << std::scientific << std::setprecision(2) << lr
                  << std::defaultfloat << " (" << std::setprecision(3) << secs << " s)\n";
  state.progress->flush();
}

double stage1_temperature(const TrainConfig& c, int epoch) {
  const int third = std::max(1, (c.epochs1 + 2) / 3);
  return c.temperature * std::pow(0.5, epoch / third);
}

double final_temperature(const TrainConfig& c) { return stage1_temperature(c, c.epochs1 - 1); }

struct Query {
  const Prompt* prompt;
  Tensor<float> target;
  std::optional<int> label;
};

Query pick_query(std::mt19937_64& rng, const std::vector<Prompt>& prompts, const std::vector<Mask>& masks,
                 const TrainConfig& c) {
  std::vector<const Prompt*> present, absent, agnostic;
  for (const auto& p : prompts) {
    if (p.kind == PromptKind::AnatomyAgnostic) {
      agnostic.push_back(&p);
      continue;
    }
    const auto& m = masks.at(static_cast<std::size_t>(*p.target_class)).values();
    const bool empty = std::none_of(m.begin(), m.end(), [](std::uint8_t v) { return v != 0; });
    (empty ? absent : present).push_back(&p);
  }
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const bool any_informed = !present.empty() || !absent.empty();
  const bool use_informed = agnostic.empty() || (any_informed && u(rng) < c.informed_fraction);
  if (use_informed) {
    const bool use_absent = present.empty() || (!absent.empty() && u(rng) < c.absent_fraction);
    const auto& pool = use_absent ? absent : present;
    const Prompt* p = pool[rng() % pool.size()];
    return {p, masks.at(static_cast<std::size_t>(*p->target_class)).cast<float>(), p->target_class};
  }
  const Prompt* p = agnostic[rng() % agnostic.size()];
  const int winner = extract_spatial_categories(masks).at(*p->spatial_category);
  return {p, masks[static_cast<std::size_t>(winner)].cast<float>(), std::nullopt};
}

float seg_step(const FlansModel<float>& model, const Tensor<float>& frame, const Query& q,
               GradAccumulator<float>& acc) {
  Tape<float> tape;
  const auto out = model.forward(tape, frame, model.text().vocab().tokenize(q.prompt->text));
  LossConfig lc;
  lc.include_intent_term = q.label.has_value();
  std::optional<IntentPair<float>> intent;
  if (q.label) intent = IntentPair<float>{out.intent_logits, *q.label};
  Var<float> loss = combined_loss(lc, out.probabilities, tape.constant(q.target), intent);
  tape.backward(loss);
  acc.add(tape);
  return loss.value().item();
}

std::vector<Mask> act_masks(const GroupAction& act, const GroupElement& g, const std::vector<Mask>& masks) {
  std::vector<Mask> out;
  for (const auto& m : masks) out.push_back(act.act_mask(g, m));
  return out;
}

void require_canonical(const Dataset& d) {
  if (!d.manifest.canonical)
    throw Error(ErrorCode::NonCanonicalDataset, "dataset " + d.manifest.name + " is not in the canonical frame");
}

}  // namespace

void train_stage1(TrainState& state, const Dataset& train) {
  const FlushDenormalsScope ftz;
  require_canonical(train);
  const auto& c = state.config;
  auto& canon = state.model.canonicalizer();
  for (auto* s : state.model.stores()) s->set_trainable(false);
  AdamW<float> opt(collect({&canon.params()}), c.adamw);
  GradAccumulator<float> acc(opt.params());
  const auto group = group_elements(c.group_order);
  const std::size_t n = train.samples.size();
  const CosineSchedule sched(c.canon_lr, c.lr_floor, steps_per_epoch(n, c.batch) * static_cast<std::size_t>(c.epochs1));
  std::vector<std::size_t> order(n);
  for (int epoch = 0; epoch < c.epochs1; ++epoch) {
    const auto start = Clock::now();
    const float temp = static_cast<float>(stage1_temperature(c, epoch));
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), state.rng);
    double total = 0;
    double lr = sched.at(opt.steps());
    for (std::size_t k = 0; k < n; ++k) {
      const auto& s = train.samples[order[k]];
      const GroupElement g = group[state.rng() % group.size()];
      Tape<float> tape;
      Var<float> loss = canon.stage1_loss(tape, s.image, g, temp);
      tape.backward(loss);
      acc.add(tape);
      total += loss.value().item();
      if (acc.count() == c.batch || k + 1 == n) {
        lr = sched.at(opt.steps());
        opt.step(acc.take_mean(), lr);
      }
    }
    report(state, "1", epoch, c.epochs1, total / static_cast<double>(n), lr, start);
  }
  for (auto* s : state.model.stores()) s->set_trainable(true);
  state.stages.push_back("1");
}

void train_stage2(TrainState& state, const Dataset& train, const std::vector<Prompt>& prompts) {
  const FlushDenormalsScope ftz;
  require_canonical(train);
  const auto index = index_prompts(train, prompts);
  const auto& c = state.config;
  auto& m = state.model;
  for (auto* s : m.stores()) s->set_trainable(false);
  AdamW<float> opt(collect({&m.text().params(), &m.head().params(), &m.backbone().params()}), c.adamw);
  GradAccumulator<float> acc(opt.params());
  const std::size_t n = train.samples.size();
  const CosineSchedule sched(c.lr, c.lr_floor, steps_per_epoch(n, c.batch) * static_cast<std::size_t>(c.epochs2));
  std::vector<std::size_t> order(n);
  for (int epoch = 0; epoch < c.epochs2; ++epoch) {
    const auto start = Clock::now();
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), state.rng);
    double total = 0;
    double lr = sched.at(opt.steps());
    for (std::size_t k = 0; k < n; ++k) {
      const auto& s = train.samples[order[k]];
      const Query q = pick_query(state.rng, index.at(s.id), s.masks, c);
      total += seg_step(m, s.image, q, acc);
      if (acc.count() == c.batch || k + 1 == n) {
        lr = sched.at(opt.steps());
        opt.step(acc.take_mean(), lr);
      }
    }
    report(state, "2", epoch, c.epochs2, total / static_cast<double>(n), lr, start);
  }
  for (auto* s : m.stores()) s->set_trainable(true);
  state.stages.push_back("2");
}

void train_stage3(TrainState& state, const Dataset& train, const std::vector<Prompt>& prompts) {
  const FlushDenormalsScope ftz;
  require_canonical(train);
  if (std::find(state.stages.begin(), state.stages.end(), "2") == state.stages.end())
    throw Error(ErrorCode::InvalidArgument, "stage 3 starts from a stage-2 model");
  const auto index = index_prompts(train, prompts);
  const auto& c = state.config;
  auto& m = state.model;
  auto& canon = m.canonicalizer();
  const bool joint = c.use_canonicalizer;
  for (auto* s : m.stores()) s->set_trainable(false);
  AdamW<float> seg_opt(collect({&m.text().params(), &m.head().params(), &m.backbone().params()}), c.adamw);
  GradAccumulator<float> seg_acc(seg_opt.params());
  std::vector<Parameter<float>*> canon_params;
  if (joint) canon_params = collect({&canon.params()});
  AdamW<float> canon_opt(canon_params, c.adamw);
  GradAccumulator<float> canon_acc(canon_opt.params());

  const auto group = c.stage3_transforms ? group_elements(c.group_order)
                                         : std::vector<GroupElement>{GroupElement::identity(c.group_order)};
  const GroupAction& act = canon.action();
  const std::size_t n = train.samples.size();
  const std::size_t period = steps_per_epoch(n, c.batch) * static_cast<std::size_t>(c.epochs3);
  const CosineSchedule seg_sched(c.stage3_lr, c.lr_floor, period);
  const CosineSchedule canon_sched(c.stage3_lr, c.lr_floor, period);
  const float temp = static_cast<float>(final_temperature(c));
  std::vector<std::size_t> order(n);
  for (int epoch = 0; epoch < c.epochs3; ++epoch) {
    const auto start = Clock::now();
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), state.rng);
    double total = 0;
    double lr = seg_sched.at(seg_opt.steps());
    for (std::size_t k = 0; k < n; ++k) {
      const auto& s = train.samples[order[k]];
      const GroupElement g = group[state.rng() % group.size()];
      Tensor<float> frame = act.act(g, s.image);
      std::vector<Mask> masks = act_masks(act, g, s.masks);
      if (joint) {
        const auto hard = canon.canonicalize_hard(frame);
        frame = hard.image;
        masks = act_masks(act, inverse(hard.g_hat), masks);
      }
      const Query q = pick_query(state.rng, index.at(s.id), masks, c);
      double loss = seg_step(m, frame, q, seg_acc);
      if (joint && c.aux_weight > 0 && k % c.aux_every == 0) {
        Tape<float> tape;
        Var<float> aux = mul_scalar(canon.stage1_loss(tape, s.image, g, temp), static_cast<float>(c.aux_weight));
        tape.backward(aux);
        canon_acc.add(tape);
        loss += aux.value().item();
      }
      total += loss;
      if (seg_acc.count() == c.batch || k + 1 == n) {
        lr = seg_sched.at(seg_opt.steps());
        seg_opt.step(seg_acc.take_mean(), lr);
        if (canon_acc.count() > 0) canon_opt.step(canon_acc.take_mean(), canon_sched.at(canon_opt.steps()));
      }
    }
    report(state, "3", epoch, c.epochs3, total / static_cast<double>(n), lr, start);
  }
  for (auto* s : m.stores()) s->set_trainable(true);
  state.stages.push_back("3");
}

void train(TrainState& state, const Dataset& train_set, const std::vector<Prompt>& prompts) {
  const auto& stage = state.config.stage;
  if (stage == "1" || stage == "all") train_stage1(state, train_set);
  if (stage == "2" || stage == "all") train_stage2(state, train_set, prompts);
  if (stage == "3" || stage == "all") train_stage3(state, train_set, prompts);
}

// ---- evaluation -----------------------------------------------------------------

EvalReport evaluate(const FlansModel<float>& model, const Dataset& test, const std::vector<Prompt>& prompts,
                    const EvalOptions& options) {
  const FlushDenormalsScope ftz;
  const auto index = index_prompts(test, prompts);
  const auto& canon = model.canonicalizer();
  const GroupAction& act = canon.action();
  const double alpha = model.config().alpha;
  EvalReport r;
  std::size_t intent_total = 0, intent_hits = 0, present_total = 0, present_hits = 0, absent_hits = 0;
  for (const auto& s : test.samples) {
    check_image(s.image);
    GroupElement g_hat = GroupElement::identity(model.config().canon.group_order);
    Tensor<float> frame = s.image;
    if (options.canonicalize) {
      auto hard = canon.canonicalize_hard(s.image);
      g_hat = hard.g_hat;
      frame = std::move(hard.image);
    }
    const auto winners = extract_spatial_categories(act_masks(act, inverse(g_hat), s.masks));
    for (const auto& p : index.at(s.id)) {
      Tape<float> tape(false);
      const auto out = model.forward(tape, frame, model.text().vocab().tokenize(p.text));
      Tensor<float> probs = out.probabilities.value();
      if (options.canonicalize) probs = act.act(g_hat, probs);
      const Mask pred = binarize(probs, options.threshold);
      if (p.kind == PromptKind::AnatomyInformed) {
        const int c = *p.target_class;
        const auto& logits = out.intent_logits.value().values();
        const auto arg = std::distance(logits.begin(), std::max_element(logits.begin(), logits.end()));
        ++intent_total;
        intent_hits += arg == c;
        const bool present = std::find(s.present.begin(), s.present.end(), c) != s.present.end();
        const bool flagged = existence_filter(probs, alpha);
        if (present) {
          ++present_total;
          present_hits += flagged;
          r.dice_informed += dice_metric(pred, s.masks[static_cast<std::size_t>(c)]);
          r.nsd_informed += nsd_metric(pred, s.masks[static_cast<std::size_t>(c)], options.tau);
          ++r.informed_queries;
        } else {
          ++r.absent_queries;
          absent_hits += !flagged;
        }
      } else {
        const auto& target = s.masks[static_cast<std::size_t>(winners.at(*p.spatial_category))];
        r.dice_agnostic += dice_metric(pred, target);
        r.nsd_agnostic += nsd_metric(pred, target, options.tau);
        ++r.agnostic_queries;
      }
    }
  }
  auto div = [](double a, std::size_t b) { return b ? a / static_cast<double>(b) : 0.0; };
  r.dice_informed = div(r.dice_informed, r.informed_queries);
  r.nsd_informed = div(r.nsd_informed, r.informed_queries);
  r.dice_agnostic = div(r.dice_agnostic, r.agnostic_queries);
  r.nsd_agnostic = div(r.nsd_agnostic, r.agnostic_queries);
  r.intent_accuracy = div(static_cast<double>(intent_hits), intent_total);
  r.present_detected = div(static_cast<double>(present_hits), present_total);
  r.absent_detected = div(static_cast<double>(absent_hits), r.absent_queries);
  return r;
}

double canonicalization_accuracy(const Canonicalizer<float>& canon, const Dataset& transformed,
                                 const Dataset& original) {
  if (transformed.samples.size() != original.samples.size() || original.samples.empty())
    throw Error(ErrorCode::ShapeMismatch, "datasets differ in size");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < original.samples.size(); ++i)
    hits += canon.canonicalize_hard(transformed.samples[i].image).image.bit_equal(original.samples[i].image);
  return static_cast<double>(hits) / static_cast<double>(original.samples.size());
}

double canonicalization_invariance(const Canonicalizer<float>& canon, const Dataset& dataset) {
  if (dataset.samples.empty()) throw Error(ErrorCode::InvalidArgument, "empty dataset");
  const GroupAction& act = canon.action();
  const auto group = group_elements(canon.config().group_order);
  std::size_t hits = 0;
  for (const auto& s : dataset.samples) {
    const Tensor<float> ref = canon.canonicalize_hard(s.image).image;
    hits += std::all_of(group.begin(), group.end(), [&](const GroupElement& g) {
      return canon.canonicalize_hard(act.act(g, s.image)).image.bit_equal(ref);
    });
  }
  return static_cast<double>(hits) / static_cast<double>(dataset.samples.size());
}

// ---- ablation -------------------------------------------------------------------

AblationResult run_ablation(const Dataset& train_set, const std::vector<Prompt>& train_prompts, const Dataset& test,
                            const std::vector<Prompt>& test_prompts, const std::vector<std::string>& class_names,
                            const TemplateBank& bank, const TrainConfig& config, std::ostream* progress) {
  TrainConfig full_cfg = config;
  full_cfg.stage = "all";
  full_cfg.use_canonicalizer = true;
  TrainState full = init_training(class_names, bank, full_cfg);
  full.progress = progress;
  train_stage1(full, train_set);
  train_stage2(full, train_set, train_prompts);
  TrainState no_aug = full;
  TrainState no_canon = full;
  train_stage3(full, train_set, train_prompts);

  no_canon.config.use_canonicalizer = false;
  no_canon.config.stage3_transforms = true;
  train_stage3(no_canon, train_set, train_prompts);

  const Dataset transformed = transform_dataset(test, group_elements(config.group_order), mix(config.seed, 0x7E57));
  EvalOptions on, off;
  off.canonicalize = false;
  AblationResult result{{}, std::move(full), std::move(no_aug)};
  auto add = [&](const std::string& variant, const FlansModel<float>& model, const EvalOptions& opt) {
    result.rows.push_back({variant, "canonical", evaluate(model, test, test_prompts, opt)});
    result.rows.push_back({variant, "transformed", evaluate(model, transformed, test_prompts, opt)});
  };
  add("full", result.full.model, on);
  add("-canonicalization", no_canon.model, off);
  add("-augmentation", result.no_aug.model, off);
  return result;
}

std::string report_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "variant,test_set,dice_informed,nsd_informed,dice_agnostic,nsd_agnostic,intent_accuracy,"
        "absent_detected,present_detected\n";
  os << std::fixed << std::setprecision(6);
  for (const auto& r : rows) {
    const auto& e = r.report;
    os << r.variant << ',' << r.test_set << ',' << e.dice_informed << ',' << e.nsd_informed << ','
       << e.dice_agnostic << ',' << e.nsd_agnostic << ',' << e.intent_accuracy << ',' << e.absent_detected << ','
       << e.present_detected << '\n';
  }
  return os.str();
}

std::string report_table(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << std::left << std::setw(20) << "variant" << std::setw(13) << "test set" << std::right << std::setw(10)
     << "dice inf" << std::setw(10) << "nsd inf" << std::setw(10) << "dice agn" << std::setw(10) << "nsd agn"
     << std::setw(10) << "intent" << '\n';
  os << std::fixed << std::setprecision(3);
  for (const auto& r : rows) {
    const auto& e = r.report;
    os << std::left << std::setw(20) << r.variant << std::setw(13) << r.test_set << std::right << std::setw(10)
       << e.dice_informed << std::setw(10) << e.nsd_informed << std::setw(10) << e.dice_agnostic << std::setw(10)
       << e.nsd_agnostic << std::setw(10) << e.intent_accuracy << '\n';
  }
  return os.str();
}

}  // namespace flans
