// modmerge: merge, measure and experiment with modality-specific checkpoints.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "modmerge/error.hpp"
#include "modmerge/experiment.hpp"
#include "modmerge/gram_capture.hpp"
#include "modmerge/merge_engine.hpp"
#include "modmerge/metrics.hpp"
#include "modmerge/report_io.hpp"
#include "modmerge/tensor_store.hpp"
#include "modmerge/toy_model.hpp"

namespace fs = std::filesystem;
using namespace modmerge;

namespace {

ShareMask parse_mask(const std::vector<std::string>& groups) {
  ShareMask mask;
  for (const auto& g : groups) mask.insert(parse_param_group(g));
  return mask;
}

void add_model_flags(CLI::App* cmd, ToyConfig& cfg) {
  cmd->add_option("--d-model", cfg.d_model, "Model width")->capture_default_str();
  cmd->add_option("--n-heads", cfg.n_heads, "Attention heads")->capture_default_str();
  cmd->add_option("--layers", cfg.n_layers, "Layers per modality stack (N)")->capture_default_str();
  cmd->add_option("--fusion", cfg.n_fusion, "Fusion layers (M)")->capture_default_str();
  cmd->add_option("--ffn-mult", cfg.ffn_mult, "FFN width multiplier")->capture_default_str();
  cmd->add_option("--vocab-v", cfg.vocab_v, "Vision vocabulary")->capture_default_str();
  cmd->add_option("--vocab-l", cfg.vocab_l, "Language vocabulary (even)")->capture_default_str();
  cmd->add_option("--seq-len", cfg.seq_len, "Tokens per sequence")->capture_default_str();
}

struct MergeArgs {
  std::string method = "interpolation";
  double alpha = 0.75, lambda = 0.5, gamma = 1.0;
  std::string vision, language, crossmodal, init;
  std::string vision_gram, language_gram, crossmodal_gram;
  std::vector<std::string> share_mask;
  std::string out, report;
};

int cmd_merge(const MergeArgs& a) {
  MergeSpec spec;
  spec.method = parse_merge_method(a.method);
  spec.alpha = a.alpha;
  spec.lambda = a.lambda;
  spec.gamma = a.gamma;
  spec.share_mask = parse_mask(a.share_mask);
  if (spec.method == MergeMethod::modality_arithmetic && a.init.empty())
    throw UsageError("modality-arithmetic needs --init");
  if (spec.method == MergeMethod::regmean &&
      (a.vision_gram.empty() || a.language_gram.empty() || (!a.crossmodal.empty() && a.crossmodal_gram.empty())))
    throw UsageError("regmean needs --vision-gram, --language-gram (and --crossmodal-gram with --crossmodal)");

  const Checkpoint v = load_checkpoint(a.vision);
  const Checkpoint l = load_checkpoint(a.language);
  std::optional<Checkpoint> x;
  if (!a.crossmodal.empty()) x = load_checkpoint(a.crossmodal);
  const Checkpoint* xp = x ? &*x : nullptr;
  spec.routing = infer_routing(v, xp);

  MergeResult result;
  switch (spec.method) {
    case MergeMethod::interpolation: result = interpolate(v, l, xp, spec); break;
    case MergeMethod::modality_arithmetic: result = modality_arithmetic(load_checkpoint(a.init), v, l, xp, spec); break;
    case MergeMethod::regmean: {
      const GramStore gv = load_gram_store(a.vision_gram);
      const GramStore gl = load_gram_store(a.language_gram);
      std::optional<GramStore> gx;
      std::vector<RegMeanInput> inputs = {{v, gv, Modality::vision}, {l, gl, Modality::language}};
      if (xp) {
        gx = load_gram_store(a.crossmodal_gram);
        inputs.push_back({*xp, *gx, Modality::crossmodal});
      }
      result = regmean_merge(inputs, spec);
      break;
    }
  }
  save_checkpoint(result.merged, a.out);
  write_text(a.report.empty() ? a.out + ".report.json" : a.report, merge_report_json(spec, result.report));
  std::cerr << "merged " << result.merged.size() << " entries into " << a.out << "\n";
  return 0;
}

struct MetricsArgs {
  std::string vision, language, drops, out, format = "json";
  double truncation = 0.5;
};

int cmd_metrics(const MetricsArgs& a) {
  MetricSpec spec{a.truncation};
  spec.validate();
  std::vector<DropObservation> drops;
  if (!a.drops.empty()) drops = parse_drops_csv(read_text(a.drops));
  const MetricReport report = metric_report(load_checkpoint(a.vision), load_checkpoint(a.language), spec, drops);
  const std::string text = a.format == "csv" ? metric_report_csv(report) : metric_report_json(report, spec);
  if (a.out.empty())
    std::cout << text;
  else
    write_text(a.out, text);
  return 0;
}

struct CaptureArgs {
  std::string model, stack = "vision", out;
  int n_heads = 2;
  std::size_t batches = 16, batch_size = 8;
  std::uint64_t seed = 0x6a3, task_seed = 0x5eed;
};

int cmd_capture(const CaptureArgs& a) {
  const Checkpoint ckpt = load_checkpoint(a.model);
  const ToyConfig cfg = infer_config(ckpt, a.n_heads);
  const ToyModel model = from_checkpoint(cfg, ckpt);
  const SyntheticTaskSet tasks(cfg.task_shape(), a.task_seed);
  const Modality stack = parse_modality(a.stack);
  save_gram_store(capture_grams(model, tasks, stack, a.batches, a.batch_size, a.seed), a.out);
  return 0;
}

struct TrainArgs {
  ToyConfig cfg;
  std::size_t steps = 2000;
  double fraction = 0.5, lr = 0.05;
  std::size_t batch_size = 4;
  std::uint64_t task_seed = 0x5eed;
  std::vector<std::string> share_mask;
  std::string out_dir;
};

int cmd_train(TrainArgs a) {
  if (!(a.fraction >= 0.0 && a.fraction <= 1.0)) throw UsageError("--seed-fraction must lie in [0,1]");
  a.cfg.validate();
  const SyntheticTaskSet tasks(a.cfg.task_shape(), a.task_seed);
  ToyModel model = init_model(a.cfg);
  TrainOptions o;
  o.lr = a.lr;
  o.batch_size = a.batch_size;
  o.stream_seed = mix_seed(a.cfg.seed, 0x74726e);
  const auto seed_steps = static_cast<std::size_t>(std::llround(a.fraction * static_cast<double>(a.steps)));
  train_phase(model, tasks, seed_steps, TrainMode::seed_shared, o);
  const ToyModel snapshot = model;
  model.tied = parse_mask(a.share_mask);
  o.first_step = seed_steps;
  train_phase(model, tasks, a.steps - seed_steps, TrainMode::branched, o);

  fs::create_directories(a.out_dir);
  const fs::path dir(a.out_dir);
  save_checkpoint(to_checkpoint(model), dir / "model.mmc");
  save_checkpoint(route_checkpoint(model, Modality::vision), dir / "vision.mmc");
  save_checkpoint(route_checkpoint(model, Modality::language), dir / "language.mmc");
  if (a.cfg.n_fusion > 0) save_checkpoint(route_checkpoint(model, Modality::crossmodal), dir / "crossmodal.mmc");
  save_checkpoint(init_checkpoint(snapshot), dir / "init.mmc");
  for (const auto& [task, score] : evaluate(model, tasks)) std::printf("%s %.4f\n", task.c_str(), score);
  return 0;
}

struct ExperimentArgs {
  std::string preset = "seed-sweep", out = "sweep";
  std::size_t n_seeds = 5;
  std::uint64_t seed = 0;
  ExperimentConfig cfg;
};

int cmd_experiment(ExperimentArgs a) {
  a.cfg.seeds.clear();
  for (std::size_t i = 0; i < a.n_seeds; ++i) a.cfg.seeds.push_back(a.seed + i + 1);
  SweepResult result;
  if (a.preset == "seed-sweep")
    result = run_seed_sweep(a.cfg);
  else if (a.preset == "method-ablation")
    result = run_method_ablation(a.cfg);
  else if (a.preset == "share-mask")
    result = run_share_mask_ablation(a.cfg);
  else
    throw UsageError("unknown preset '" + a.preset + "'");
  write_text(a.out + ".json", sweep_json(result));
  write_text(a.out + ".csv", sweep_csv(result));
  std::cout << sweep_summary(result);
  bool any_ok = false;
  for (const CellResult& c : result.cells) any_ok |= !c.diverged;
  if (!any_ok) throw NumericalError("every sweep cell diverged");
  return 0;
}

int cmd_report(const std::string& in, const std::string& out) {
  const std::string text = sweep_summary(parse_sweep_json(read_text(in)));
  if (out.empty())
    std::cout << text;
  else
    write_text(out, text);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Merge modality-specific transformer checkpoints and study mergeability"};
  app.require_subcommand(1);

  MergeArgs merge;
  auto* m = app.add_subcommand("merge", "Merge vision/language(/crossmodal) checkpoints");
  m->add_option("--method", merge.method, "interpolation | modality-arithmetic | regmean")->capture_default_str();
  m->add_option("--alpha", merge.alpha, "Interpolation weight of the vision checkpoint")->capture_default_str();
  m->add_option("--lambda", merge.lambda, "Modality-arithmetic scale")->capture_default_str();
  m->add_option("--gamma", merge.gamma, "RegMean off-diagonal shrinkage")->capture_default_str();
  m->add_option("--vision", merge.vision, "Vision checkpoint")->required();
  m->add_option("--language", merge.language, "Language checkpoint")->required();
  m->add_option("--crossmodal", merge.crossmodal, "Crossmodal (fusion layers) checkpoint");
  m->add_option("--init", merge.init, "Shared initialization (modality-arithmetic)");
  m->add_option("--vision-gram", merge.vision_gram, "Vision gram file (regmean)");
  m->add_option("--language-gram", merge.language_gram, "Language gram file (regmean)");
  m->add_option("--crossmodal-gram", merge.crossmodal_gram, "Crossmodal gram file (regmean)");
  m->add_option("--share-mask", merge.share_mask, "Groups already shared: attention ffn layernorm other");
  m->add_option("--out", merge.out, "Merged checkpoint")->required();
  m->add_option("--report", merge.report, "Merge report JSON (default <out>.report.json)");

  MetricsArgs metrics;
  auto* me = app.add_subcommand("metrics", "Distance metrics between two checkpoints");
  me->add_option("--vision", metrics.vision, "Vision checkpoint")->required();
  me->add_option("--language", metrics.language, "Language checkpoint")->required();
  me->add_option("--truncation", metrics.truncation, "TSSD truncation fraction")->capture_default_str();
  me->add_option("--drops", metrics.drops, "CSV of earlier merges (drop,l2,cosine,ssd,tssd) for Pearson columns");
  me->add_option("--format", metrics.format, "json | csv")->check(CLI::IsMember({"json", "csv"}))->capture_default_str();
  me->add_option("--out", metrics.out, "Output file (default stdout)");

  CaptureArgs cap;
  auto* c = app.add_subcommand("capture-gram", "Accumulate input grams of a toy model's linear layers");
  c->add_option("--model", cap.model, "Full toy model export (model.mmc)")->required();
  c->add_option("--stack", cap.stack, "vision | language | crossmodal")
      ->check(CLI::IsMember({"vision", "language", "crossmodal"}))
      ->capture_default_str();
  c->add_option("--n-heads", cap.n_heads, "Attention heads of the model")->capture_default_str();
  c->add_option("--batches", cap.batches, "Batches to capture")->capture_default_str();
  c->add_option("--batch-size", cap.batch_size, "Sequences per batch")->capture_default_str();
  c->add_option("--seed", cap.seed, "Data stream seed")->capture_default_str();
  c->add_option("--task-seed", cap.task_seed, "Task definition seed")->capture_default_str();
  c->add_option("--out", cap.out, "Gram file")->required();

  TrainArgs train;
  auto* t = app.add_subcommand("train-toy", "Seed-train then branch-train the toy model and export checkpoints");
  add_model_flags(t, train.cfg);
  t->add_option("--seed", train.cfg.seed, "Initialization and data seed")->capture_default_str();
  t->add_option("--steps", train.steps, "Total training steps K")->capture_default_str();
  t->add_option("--seed-fraction", train.fraction, "Share of K spent in seed-shared training")->capture_default_str();
  t->add_option("--lr", train.lr, "Learning rate")->capture_default_str();
  t->add_option("--batch-size", train.batch_size, "Sequences per task and step")->capture_default_str();
  t->add_option("--task-seed", train.task_seed, "Task definition seed")->capture_default_str();
  t->add_option("--share-mask", train.share_mask, "Groups tied during branched training");
  t->add_option("--out-dir", train.out_dir, "Directory for model/vision/language/crossmodal/init .mmc")->required();

  ExperimentArgs exp;
  auto* e = app.add_subcommand("experiment", "Run a sweep and write <out>.json and <out>.csv");
  e->add_option("--preset", exp.preset, "seed-sweep | method-ablation | share-mask")
      ->check(CLI::IsMember({"seed-sweep", "method-ablation", "share-mask"}))
      ->capture_default_str();
  e->add_option("--seeds", exp.n_seeds, "Number of run seeds")->check(CLI::PositiveNumber)->capture_default_str();
  e->add_option("--seed", exp.seed, "Base seed; runs use seed+1 .. seed+n")->capture_default_str();
  e->add_option("--steps", exp.cfg.total_steps, "Training steps K per cell")->capture_default_str();
  e->add_option("--fractions", exp.cfg.seed_fractions, "Seed fractions (seed-sweep)");
  e->add_option("--ablation-fraction", exp.cfg.ablation_fraction, "Seed fraction of the ablations")
      ->capture_default_str();
  e->add_option("--fine-tune", exp.cfg.fine_tune_steps, "Heads-only fine-tune steps")->capture_default_str();
  e->add_option("--eval-samples", exp.cfg.eval.samples, "Evaluation samples per task")->capture_default_str();
  e->add_option("--lr", exp.cfg.lr, "Learning rate")->capture_default_str();
  e->add_option("--batch-size", exp.cfg.batch_size, "Sequences per task and step")->capture_default_str();
  e->add_option("--task-seed", exp.cfg.task_seed, "Task definition seed")->capture_default_str();
  e->add_option("--threads", exp.cfg.threads, "Worker threads (default MODMERGE_THREADS or all cores)");
  e->add_option("--out", exp.out, "Output prefix")->capture_default_str();
  add_model_flags(e, exp.cfg.model);

  std::string report_in, report_out;
  auto* r = app.add_subcommand("report", "Summarize a sweep JSON: medians and correlations");
  r->add_option("--in", report_in, "Sweep JSON")->required();
  r->add_option("--out", report_out, "Output file (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::CallForAllHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::ParseError& ex) {
    app.exit(ex);
    return 1;
  }

  try {
    if (*m) return cmd_merge(merge);
    if (*me) return cmd_metrics(metrics);
    if (*c) return cmd_capture(cap);
    if (*t) return cmd_train(train);
    if (*e) return cmd_experiment(exp);
    if (*r) return cmd_report(report_in, report_out);
  } catch (const Error& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return ex.exit_code();
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 2;
  }
  return 1;
}
