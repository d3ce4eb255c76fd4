#include "modmerge/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <numeric>
#include <thread>

namespace modmerge {

std::vector<ShareVariant> share_variants() {
  using G = ParamGroup;
  return {
      {"full-custom", {}},
      {"custom-attn", {G::ffn, G::layernorm}},
      {"custom-FFN", {G::attention, G::layernorm}},
      {"custom-LN", {G::attention, G::ffn}},
      {"fully-shared", {G::attention, G::ffn, G::layernorm}},
  };
}

void ExperimentConfig::validate() const {
  model.validate();
  if (seeds.empty()) throw UsageError("at least one seed is required");
  if (!std::is_sorted(seed_fractions.begin(), seed_fractions.end()))
    throw UsageError("seed fractions must be sorted ascending");
  for (double f : seed_fractions)
    if (!(f >= 0.0 && f <= 1.0)) throw UsageError("seed fractions must lie in [0,1]");
  if (!(ablation_fraction >= 0.0 && ablation_fraction <= 1.0))
    throw UsageError("ablation fraction must lie in [0,1]");
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw UsageError("learning rate must be finite and >= 0");
  if (batch_size == 0) throw UsageError("batch size must be positive");
  if (eval.samples == 0 || eval.batch_size == 0) throw UsageError("evaluation needs samples");
  for (MergeSpec s : merge_specs) {
    s.routing = model.routing();
    s.validate();
  }
}

std::vector<MergeSpec> default_sweep_specs() {
  std::vector<MergeSpec> specs(4);
  specs[0].method = MergeMethod::interpolation;
  specs[0].alpha = 0.5;
  specs[1].method = MergeMethod::interpolation;
  specs[1].alpha = 0.75;
  specs[2].method = MergeMethod::modality_arithmetic;
  specs[2].lambda = 0.5;
  specs[3].method = MergeMethod::regmean;
  specs[3].gamma = 1.0;
  return specs;
}

std::vector<MergeSpec> method_grid() {
  std::vector<MergeSpec> specs;
  for (MergeMethod m : {MergeMethod::interpolation, MergeMethod::modality_arithmetic, MergeMethod::regmean}) {
    for (double v : {0.0, 0.25, 0.5, 0.75, 1.0}) {
      MergeSpec s;
      s.method = m;
      if (m == MergeMethod::interpolation) s.alpha = v;
      if (m == MergeMethod::modality_arithmetic) s.lambda = v;
      if (m == MergeMethod::regmean) s.gamma = v;
      specs.push_back(s);
    }
  }
  return specs;
}

std::string spec_label(const MergeSpec& spec) {
  return std::string(to_string(spec.method)) + " " + spec.hyperparam_label();
}

double median(std::vector<double> values) {
  if (values.empty()) throw DataError("median of no values");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

unsigned worker_count(unsigned requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("MODMERGE_THREADS"); env && *env) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (*end != '\0' || v < 1) throw UsageError("MODMERGE_THREADS must be a positive integer");
    return static_cast<unsigned>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

namespace {

struct Job {
  double fraction;
  std::string variant;
  ShareMask shared;
  std::uint64_t seed;
};

double task_mean(const std::map<std::string, double>& m) {
  double s = 0.0;
  for (const auto& [k, v] : m) s += v;
  return m.empty() ? 0.0 : s / static_cast<double>(m.size());
}

ToyModel fine_tune(ToyModel model, const SyntheticTaskSet& tasks, const ExperimentConfig& cfg, std::uint64_t seed) {
  TrainOptions o;
  o.lr = cfg.lr;
  o.batch_size = cfg.batch_size;
  o.stream_seed = mix_seed(seed, 0x66696e65);
  o.heads_only = true;
  train_phase(model, tasks, cfg.fine_tune_steps, TrainMode::branched, o);
  return model;
}

struct Branches {
  Checkpoint vision, language, crossmodal, init;
};

MergeResult merge_with(const MergeSpec& spec, const Branches& b, const ToyModel& trained,
                       const SyntheticTaskSet& tasks, const ExperimentConfig& cfg, std::uint64_t seed,
                       std::optional<std::vector<GramStore>>& grams) {
  const Checkpoint* cx = spec.routing.n_fusion > 0 ? &b.crossmodal : nullptr;
  switch (spec.method) {
    case MergeMethod::interpolation: return interpolate(b.vision, b.language, cx, spec);
    case MergeMethod::modality_arithmetic: return modality_arithmetic(b.init, b.vision, b.language, cx, spec);
    case MergeMethod::regmean: {
      if (!grams) {
        grams.emplace();
        const std::uint64_t gseed = mix_seed(seed, 0x6772616d);
        for (Modality m : {Modality::vision, Modality::language, Modality::crossmodal})
          grams->push_back(capture_grams(trained, tasks, m, cfg.gram_batches, cfg.batch_size, gseed));
      }
      std::vector<RegMeanInput> inputs = {{b.vision, (*grams)[0], Modality::vision},
                                          {b.language, (*grams)[1], Modality::language}};
      if (cx) inputs.push_back({b.crossmodal, (*grams)[2], Modality::crossmodal});
      return regmean_merge(inputs, spec);
    }
  }
  throw UsageError("unknown merge method");
}

std::vector<CellResult> run_job(const ExperimentConfig& cfg, const std::vector<MergeSpec>& specs, const Job& job,
                                const SyntheticTaskSet& tasks) {
  ToyConfig mc = cfg.model;
  mc.seed = job.seed;

  std::vector<CellResult> cells(specs.size());
  for (std::size_t i = 0; i < specs.size(); ++i) {
    CellResult& c = cells[i];
    c.fraction = job.fraction;
    c.variant = job.variant;
    c.spec = specs[i];
    c.spec.routing = mc.routing();
    c.spec.share_mask = job.shared;
    c.seed = job.seed;
    c.fine_tune_steps = cfg.fine_tune_steps;
  }

  ToyModel model = init_model(mc);
  const auto seed_steps = static_cast<std::size_t>(std::llround(job.fraction * static_cast<double>(cfg.total_steps)));
  std::size_t steps = 0;
  std::optional<ToyModel> snapshot;
  try {
    TrainOptions o;
    o.lr = cfg.lr;
    o.batch_size = cfg.batch_size;
    o.stream_seed = mix_seed(job.seed, 0x74726e);
    steps += train_phase(model, tasks, seed_steps, TrainMode::seed_shared, o);
    snapshot.emplace(model);
    model.tied = job.shared;
    o.first_step = seed_steps;
    steps += train_phase(model, tasks, cfg.total_steps - seed_steps, TrainMode::branched, o);
  } catch (const NumericalError& e) {
    for (CellResult& c : cells) {
      c.diverged = true;
      c.error = e.what();
      c.train_steps = steps;
    }
    return cells;
  }

  Branches b{route_checkpoint(model, Modality::vision), route_checkpoint(model, Modality::language),
             route_checkpoint(model, Modality::crossmodal), init_checkpoint(*snapshot)};
  std::optional<MetricValues> metrics;
  try {
    metrics = metric_report(b.vision, b.language, MetricSpec{}).values;
  } catch (const Error&) {
    metrics.reset();
  }

  std::map<std::string, double> before;
  std::optional<std::vector<GramStore>> grams;
  for (CellResult& c : cells) {
    c.train_steps = steps;
    c.metrics = metrics;
    try {
      if (before.empty()) before = evaluate(fine_tune(model, tasks, cfg, job.seed), tasks, cfg.eval);
      c.before = before;
      const MergeResult merged = merge_with(c.spec, b, model, tasks, cfg, job.seed, grams);
      for (const EntryReport& r : merged.report) {
        if (r.action == "shared-copy") {
          if (!identical(merged.merged.at(r.name).tensor, b.vision.at(r.name).tensor)) c.shared_preserved = false;
        } else if (r.action != "pass-through") {
          ++c.merged_entries;
        }
      }
      Checkpoint full = merged.merged;
      // Without fusion layers the joint head is not part of any merge input.
      for (const auto& [name, e] : b.crossmodal.entries())
        if (!e.meta.mergeable && !full.contains(name)) full.insert(name, e.tensor, e.meta);
      const ToyModel merged_model = from_merged(mc, full);
      c.after_raw = evaluate(merged_model, tasks, cfg.eval);
      c.after = evaluate(fine_tune(merged_model, tasks, cfg, job.seed), tasks, cfg.eval);
      for (const auto& [task, score] : c.before) {
        c.drop[task] = score - c.after.at(task);
        c.raw_drop[task] = score - c.after_raw.at(task);
      }
      c.mean_drop = task_mean(c.drop);
    } catch (const NumericalError& e) {
      c.diverged = true;
      c.error = e.what();
    }
  }
  return cells;
}

SweepResult run_jobs(const ExperimentConfig& cfg, std::string preset, const std::vector<Job>& jobs) {
  cfg.validate();
  const SyntheticTaskSet tasks(cfg.model.task_shape(), cfg.task_seed);
  std::vector<std::vector<CellResult>> out(jobs.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;

  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= jobs.size()) return;
      try {
        out[i] = run_job(cfg, cfg.merge_specs, jobs[i], tasks);
      } catch (...) {
        std::lock_guard lock(failure_mu);
        if (!failure) failure = std::current_exception();
        next.store(jobs.size());
      }
    }
  };
  const auto n = std::min<std::size_t>(worker_count(cfg.threads), jobs.size());
  if (n <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  SweepResult result{std::move(preset), cfg, {}};
  for (auto& cells : out)
    for (auto& c : cells) result.cells.push_back(std::move(c));
  return result;
}

}  // namespace

SweepResult run_seed_sweep(const ExperimentConfig& in) {
  ExperimentConfig cfg = in;
  if (cfg.merge_specs.empty()) cfg.merge_specs = default_sweep_specs();
  if (cfg.seed_fractions.empty()) throw UsageError("seed sweep needs at least one fraction");
  std::vector<Job> jobs;
  for (double f : cfg.seed_fractions)
    for (std::uint64_t s : cfg.seeds) jobs.push_back({f, "", {}, s});
  return run_jobs(cfg, "seed-sweep", jobs);
}

SweepResult run_method_ablation(ExperimentConfig cfg) {
  if (cfg.merge_specs.empty()) cfg.merge_specs = method_grid();
  cfg.seed_fractions = {cfg.ablation_fraction};
  std::vector<Job> jobs;
  for (std::uint64_t s : cfg.seeds) jobs.push_back({cfg.ablation_fraction, "", {}, s});
  return run_jobs(cfg, "method-ablation", jobs);
}

SweepResult run_share_mask_ablation(ExperimentConfig cfg) {
  if (cfg.merge_specs.empty()) cfg.merge_specs = {MergeSpec{}};
  cfg.seed_fractions = {cfg.ablation_fraction};
  std::vector<Job> jobs;
  for (const ShareVariant& v : share_variants())
    for (std::uint64_t s : cfg.seeds) jobs.push_back({cfg.ablation_fraction, v.name, v.shared, s});
  return run_jobs(cfg, "share-mask", jobs);
}

SweepCorrelation correlate(const SweepResult& sweep, std::optional<std::string> label) {
  SweepCorrelation out;
  if (sweep.cells.empty()) throw DataError("empty sweep");
  out.spec_label = label ? *label : spec_label(sweep.cells.front().spec);

  std::vector<DropObservation> pooled;
  std::map<std::string, std::vector<DropObservation>> per_task;
  for (const CellResult& c : sweep.cells) {
    if (c.diverged || !c.metrics || spec_label(c.spec) != out.spec_label) continue;
    pooled.push_back({"", *c.metrics, c.mean_drop});
    for (const auto& [task, d] : c.drop) per_task[task].push_back({task, *c.metrics, d});
  }
  out.points = pooled.size();
  if (pooled.size() < 2) throw DataError("correlation needs at least two sweep points for '" + out.spec_label + "'");
  out.pooled = correlate_drops(pooled);
  for (const auto& [task, obs] : per_task) {
    try {
      out.per_task[task] = correlate_drops(obs);
    } catch (const NumericalError&) {
      // constant drop on this task: correlation undefined
    }
  }
  return out;
}

std::vector<AggregateRow> aggregate(const SweepResult& sweep) {
  struct Acc {
    std::vector<double> before, after, drop, raw;
  };
  std::vector<std::tuple<double, std::string, std::string>> order;
  std::map<std::tuple<double, std::string, std::string>, Acc> groups;
  for (const CellResult& c : sweep.cells) {
    const auto key = std::make_tuple(c.fraction, c.variant, spec_label(c.spec));
    if (!groups.contains(key)) order.push_back(key);
    Acc& a = groups[key];
    if (c.diverged) continue;
    a.before.push_back(task_mean(c.before));
    a.after.push_back(task_mean(c.after));
    a.drop.push_back(c.mean_drop);
    a.raw.push_back(task_mean(c.raw_drop));
  }
  std::vector<AggregateRow> rows;
  for (const auto& key : order) {
    const Acc& a = groups[key];
    AggregateRow r;
    std::tie(r.fraction, r.variant, r.spec) = key;
    r.seeds = a.drop.size();
    if (r.seeds > 0) {
      r.median_before = median(a.before);
      r.median_after = median(a.after);
      r.median_drop = median(a.drop);
      r.median_raw_drop = median(a.raw);
    }
    rows.push_back(r);
  }
  return rows;
}

}  // namespace modmerge
