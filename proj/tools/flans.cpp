// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end: data and prompt generation, staged training,
// single-image segmentation, evaluation, ablation and the self-check suite.
#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>

#include "flans/checkpoint.hpp"
#include "flans/data.hpp"
#include "flans/error.hpp"
#include "flans/fts.hpp"
#include "flans/losses.hpp"
#include "flans/pipeline.hpp"
#include "flans/prompts.hpp"
#include "flans/selfcheck.hpp"

namespace fs = std::filesystem;
using namespace flans;

namespace {

void add_train_flags(CLI::App* cmd, TrainConfig& cfg) {
  cmd->add_option("--lr", cfg.lr, "learning rate for text encoder, head and backbone")->capture_default_str();
  cmd->add_option("--canon-lr", cfg.canon_lr, "stage-1 canonicalizer learning rate")->capture_default_str();
  cmd->add_option("--stage3-lr", cfg.stage3_lr, "stage-3 learning rate")->capture_default_str();
  cmd->add_option("--batch", cfg.batch, "samples per optimizer step")->capture_default_str();
  cmd->add_option("--epochs1", cfg.epochs1)->capture_default_str();
  cmd->add_option("--epochs2", cfg.epochs2)->capture_default_str();
  cmd->add_option("--epochs3", cfg.epochs3)->capture_default_str();
  cmd->add_option("--group-order", cfg.group_order, "4 (D4) or 8 (D8)")->capture_default_str();
  cmd->add_option("--temperature", cfg.temperature, "initial stage-1 softmax temperature")->capture_default_str();
}

std::vector<std::string> class_names_of(const Dataset& d) { return d.manifest.class_names; }

void print_result(const CheckResult& r) {
  std::cout << (r.passed ? "PASS " : "FAIL ") << std::left << std::setw(28) << r.name << std::right
            << " value=" << std::setprecision(3) << std::scientific << r.value << " tol=" << r.tolerance
            << std::defaultfloat;
  if (!r.detail.empty()) std::cout << "  (" << r.detail << ")";
  std::cout << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"flans: text-prompted segmentation with a learned canonicalizer"};
  app.require_subcommand(1);
  app.fallthrough();
  std::uint64_t seed = 0;
  app.add_option("--seed", seed, "random seed")->capture_default_str();

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate phantom train/val/test sets and a transformed test set");
  fs::path data_out;
  std::size_t n_train = 400, n_val = 50, n_test = 50, size = 64, classes = 4;
  gen->add_option("--out", data_out, "output directory")->required();
  gen->add_option("--train", n_train)->capture_default_str();
  gen->add_option("--val", n_val)->capture_default_str();
  gen->add_option("--test", n_test)->capture_default_str();
  gen->add_option("--size", size, "image side")->capture_default_str();
  gen->add_option("--classes", classes)->capture_default_str();
  int gen_order = 4;
  gen->add_option("--group-order", gen_order, "group used for the transformed test set")->capture_default_str();

  // gen-prompts
  auto* gp = app.add_subcommand("gen-prompts", "informed and agnostic prompts for every sample of a dataset");
  fs::path gp_data, gp_out;
  gp->add_option("--data", gp_data, "dataset directory")->required();
  gp->add_option("--out", gp_out, "output JSONL")->required();

  // train
  auto* tr = app.add_subcommand("train", "run training stages and write a checkpoint");
  fs::path tr_data, tr_prompts, tr_out, tr_resume;
  TrainConfig cfg;
  tr->add_option("--data", tr_data, "canonical training set")->required();
  tr->add_option("--prompts", tr_prompts, "prompt JSONL (needed for stages 2 and 3)");
  tr->add_option("--out", tr_out, "checkpoint directory")->required();
  tr->add_option("--resume", tr_resume, "continue from this checkpoint");
  tr->add_option("--stage", cfg.stage, "1, 2, 3 or all")->capture_default_str()->check(
      CLI::IsMember({"1", "2", "3", "all"}));
  add_train_flags(tr, cfg);

  // segment
  auto* sg = app.add_subcommand("segment", "segment one image from a text prompt");
  fs::path sg_ckpt, sg_image, sg_out;
  std::string sg_prompt;
  bool no_canon = false, equivariant = false;
  sg->add_option("--checkpoint", sg_ckpt)->required();
  sg->add_option("--image", sg_image, "image tensor (.fts, [n, n] float)")->required();
  sg->add_option("--prompt", sg_prompt)->required();
  sg->add_option("--out", sg_out, "write the binary mask here (.fts, u8)");
  sg->add_flag("--no-canon", no_canon, "skip canonicalization");
  sg->add_flag("--equivariant", equivariant, "map the mask back to the input frame");

  // canonicalize
  auto* cn = app.add_subcommand("canonicalize", "print g_hat and write the canonicalized image");
  fs::path cn_ckpt, cn_image, cn_out;
  cn->add_option("--checkpoint", cn_ckpt)->required();
  cn->add_option("--image", cn_image)->required();
  cn->add_option("--out", cn_out);

  // eval
  auto* ev = app.add_subcommand("eval", "Dice/NSD, intent accuracy and existence rates on a dataset");
  fs::path ev_ckpt, ev_data, ev_prompts, ev_csv;
  bool ev_no_canon = false;
  ev->add_option("--checkpoint", ev_ckpt)->required();
  ev->add_option("--data", ev_data)->required();
  ev->add_option("--prompts", ev_prompts)->required();
  ev->add_option("--csv", ev_csv, "write CSV here instead of stdout");
  ev->add_flag("--no-canon", ev_no_canon);

  // ablate
  auto* ab = app.add_subcommand("ablate", "train the three ablation variants and report them");
  fs::path ab_train, ab_train_prompts, ab_test, ab_test_prompts, ab_out;
  TrainConfig ab_cfg;
  ab->add_option("--train-data", ab_train)->required();
  ab->add_option("--train-prompts", ab_train_prompts)->required();
  ab->add_option("--test-data", ab_test, "canonical test set")->required();
  ab->add_option("--test-prompts", ab_test_prompts)->required();
  ab->add_option("--out", ab_out, "directory for ablation.csv and the full checkpoint")->required();
  add_train_flags(ab, ab_cfg);

  // selfcheck
  auto* sc = app.add_subcommand("selfcheck", "run the invariant suites");
  SelfcheckOptions sc_opt;
  sc->add_option("--trials", sc_opt.equivariance_trials, "equivariance draws")->capture_default_str();
  sc->add_option("--scratch", sc_opt.scratch, "scratch directory");

  set_flush_denormals(true);
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    if (code == 0) return 0;
    std::cerr << app.help();
    return 2;
  }

  try {
    if (*gen) {
      PhantomSpec spec;
      spec.image_size = size;
      spec.class_count = classes;
      const std::pair<const char*, std::size_t> splits[] = {{"train", n_train}, {"val", n_val}, {"test", n_test}};
      std::uint64_t k = 0;
      for (const auto& [name, n] : splits) {
        spec.seed = seed * 1000003 + ++k;
        generate_dataset(spec, n, data_out / name, name);
      }
      apply_dataset_transforms(data_out / "test", group_elements(gen_order), seed * 1000003 + 99, data_out / "test_transformed");
      std::cout << "wrote " << data_out.string() << "/{train,val,test,test_transformed}\n";
    } else if (*gp) {
      const Dataset d = load_dataset(gp_data);
      const auto bank = TemplateBank::for_classes(class_names_of(d));
      auto prompts = generate_prompt_set(d, bank, seed);
      const auto endpoint = EndpointConfig::from_env();
      if (!endpoint.url.empty()) {
        std::size_t warned = 0;
        for (auto& p : prompts) {
          auto r = paraphrase_external(p, endpoint);
          if (r.warning && warned++ < 3) std::cerr << "warning: " << *r.warning << '\n';
          p = std::move(r.prompt);
        }
        if (warned > 3) std::cerr << "warning: " << warned - 3 << " more paraphrase failures\n";
      }
      write_prompts_jsonl(gp_out, prompts);
      std::cout << "wrote " << prompts.size() << " prompts to " << gp_out.string() << '\n';
    } else if (*tr) {
      cfg.seed = seed;
      const Dataset d = load_dataset(tr_data);
      std::vector<Prompt> prompts;
      if (!tr_prompts.empty()) prompts = read_prompts_jsonl(tr_prompts);
      if (prompts.empty() && cfg.stage != "1")
        throw Error(ErrorCode::MissingPrompts, "--prompts is required for stage " + cfg.stage);
      TrainState state = tr_resume.empty()
                             ? init_training(class_names_of(d), TemplateBank::for_classes(class_names_of(d)), cfg)
                             : resume_training(load_checkpoint(tr_resume), cfg);
      state.progress = &std::cerr;
      train(state, d, prompts);
      save_checkpoint(tr_out, state.model, state.meta());
      std::cout << "wrote checkpoint " << tr_out.string() << " (stages";
      for (const auto& s : state.stages) std::cout << ' ' << s;
      std::cout << ")\n";
    } else if (*sg) {
      const auto ck = load_checkpoint(sg_ckpt);
      const auto image = read_fts<float>(sg_image);
      SegmentOptions opt;
      opt.canonicalize = !no_canon;
      opt.mode = equivariant ? OutputMode::Equivariant : OutputMode::Invariant;
      const auto r = ck.model.segment(image, sg_prompt, opt);
      if (!existence_filter(r.probabilities, ck.model.config().alpha)) {
        std::cout << "absent\n";
        return 0;
      }
      const Mask mask = binarize(r.probabilities, ck.model.config().alpha);
      std::size_t pixels = 0;
      for (auto v : mask.values()) pixels += v;
      std::cout << "present pixels=" << pixels << " g_hat=" << to_string(r.g_hat) << '\n';
      if (!sg_out.empty()) write_fts(sg_out, mask);
    } else if (*cn) {
      const auto ck = load_checkpoint(cn_ckpt);
      const auto c = ck.model.canonicalizer().canonicalize_hard(read_fts<float>(cn_image));
      std::cout << to_string(c.g_hat) << '\n';
      if (!cn_out.empty()) write_fts(cn_out, c.image);
    } else if (*ev) {
      const auto ck = load_checkpoint(ev_ckpt);
      const Dataset d = load_dataset(ev_data);
      EvalOptions opt;
      opt.canonicalize = !ev_no_canon;
      const auto report = evaluate(ck.model, d, read_prompts_jsonl(ev_prompts), opt);
      const std::vector<AblationRow> rows{{ev_no_canon ? "no-canon" : "model", d.manifest.name, report}};
      const auto csv = report_csv(rows);
      if (ev_csv.empty()) {
        std::cout << csv << '\n';
      } else {
        write_file(ev_csv, csv);
      }
      std::cout << report_table(rows) << std::fixed << std::setprecision(3)
                << "absent detected " << report.absent_detected << " over " << report.absent_queries
                << " queries, present detected " << report.present_detected << '\n';
    } else if (*ab) {
      ab_cfg.seed = seed;
      const Dataset train_set = load_dataset(ab_train), test_set = load_dataset(ab_test);
      auto result = run_ablation(train_set, read_prompts_jsonl(ab_train_prompts), test_set,
                                 read_prompts_jsonl(ab_test_prompts), class_names_of(train_set),
                                 TemplateBank::for_classes(class_names_of(train_set)), ab_cfg, &std::cerr);
      fs::create_directories(ab_out);
      write_file(ab_out / "ablation.csv", report_csv(result.rows));
      save_checkpoint(ab_out / "full", result.full.model, result.full.meta());
      std::cout << report_table(result.rows);
    } else if (*sc) {
      sc_opt.seed = seed;
      bool ok = true;
      for (const auto& r : run_selfcheck(sc_opt)) {
        print_result(r);
        ok = ok && r.passed;
      }
      std::cout << (ok ? "selfcheck passed\n" : "selfcheck FAILED\n");
      return ok ? 0 : 1;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
