#pragma once

// Desk-scale sweeps over the seed/branch training split, merge
// hyperparameters and share masks, with per-cell scores, drops and
// weight-distance metrics.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "modmerge/merge_engine.hpp"
#include "modmerge/metrics.hpp"
#include "modmerge/toy_model.hpp"

namespace modmerge {

struct ShareVariant {
  std::string name;       // full-custom | custom-attn | custom-FFN | custom-LN | fully-shared
  ShareMask shared;       // groups tied during branched training and skipped by the merge
};

/// The five architectures of the share-mask ablation.
std::vector<ShareVariant> share_variants();

struct ExperimentConfig {
  ToyConfig model;                            // model.seed is replaced per run seed
  std::size_t total_steps = 2000;             // K = seed steps + branch steps
  double ablation_fraction = 0.5;             // seed fraction of the method and share-mask ablations
  std::vector<double> seed_fractions = {0.0, 0.25, 0.5, 0.75};
  std::vector<MergeSpec> merge_specs;         // empty: the preset's default; routing is taken from `model`
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  std::size_t fine_tune_steps = 50;           // heads-only, applied before and after merging
  double lr = 0.05;
  std::size_t batch_size = 4;                 // per task and step
  std::uint64_t task_seed = 0x5eed;           // fixes the task definitions
  EvalOptions eval;
  std::size_t gram_batches = 16;
  unsigned threads = 0;                       // 0: MODMERGE_THREADS, else hardware concurrency

  void validate() const;
};

/// Recommended method set for the seed sweep.
std::vector<MergeSpec> default_sweep_specs();
/// alpha, lambda and gamma each over {0, .25, .5, .75, 1}.
std::vector<MergeSpec> method_grid();

struct CellResult {
  double fraction = 0.0;
  std::string variant;  // share-mask variant, empty outside that ablation
  MergeSpec spec;
  std::uint64_t seed = 0;
  bool diverged = false;
  std::string error;

  std::map<std::string, double> before;     // fine-tuned modality-specific model
  std::map<std::string, double> after_raw;  // merged, no fine-tune
  std::map<std::string, double> after;      // merged, fine-tuned
  std::map<std::string, double> drop;       // before - after
  std::map<std::string, double> raw_drop;   // before - after_raw
  double mean_drop = 0.0;
  std::optional<MetricValues> metrics;      // unset when the custom weight set is empty

  std::size_t train_steps = 0;              // seed + branch steps consumed
  std::size_t fine_tune_steps = 0;
  bool shared_preserved = true;             // share-masked entries bit-identical through the merge
  std::size_t merged_entries = 0;           // entries actually combined
};

struct SweepResult {
  std::string preset;
  ExperimentConfig config;
  std::vector<CellResult> cells;
};

/// Per fraction: seed-shared training for round(f K) steps, branched training
/// for the rest, then every merge spec, fine-tune and evaluation. Divergence
/// is recorded in the affected cells.
SweepResult run_seed_sweep(const ExperimentConfig& cfg);

/// The merge specs (default: method_grid()) at cfg.ablation_fraction.
SweepResult run_method_ablation(ExperimentConfig cfg);

/// Each share variant trained at cfg.ablation_fraction with its groups tied
/// during the branched phase, then merged (default: interpolation
/// alpha=0.75) over its custom groups only.
SweepResult run_share_mask_ablation(ExperimentConfig cfg);

struct SweepCorrelation {
  std::string spec_label;                                      // e.g. "interpolation alpha=0.5"
  std::size_t points = 0;
  std::map<std::string, double> pooled;                        // metric -> r against mean drop
  std::map<std::string, std::map<std::string, double>> per_task;  // task -> metric -> r (defined ones only)
};

/// Pearson of each metric against the drop over the non-diverged cells of one
/// merge spec (default: the first). Throws NumericalError("zero variance")
/// when the pooled drops or a metric do not vary.
SweepCorrelation correlate(const SweepResult& sweep, std::optional<std::string> spec_label = std::nullopt);

std::string spec_label(const MergeSpec& spec);  // "<method> <hyperparam>"

struct AggregateRow {
  double fraction = 0.0;
  std::string variant;
  std::string spec;
  std::size_t seeds = 0;  // non-diverged
  double median_before = 0.0;
  double median_after = 0.0;
  double median_drop = 0.0;
  double median_raw_drop = 0.0;
};

/// Medians over seeds of the task-mean scores, per (fraction, variant, spec).
std::vector<AggregateRow> aggregate(const SweepResult& sweep);

double median(std::vector<double> values);

/// Worker count: cfg.threads, else MODMERGE_THREADS, else hardware concurrency.
unsigned worker_count(unsigned requested);

}  // namespace modmerge
