#include <cstdlib>

#include "doctest.h"
#include "modmerge/experiment.hpp"

using namespace modmerge;

namespace {

ExperimentConfig tiny() {
  ExperimentConfig cfg;
  cfg.model.d_model = 8;
  cfg.model.n_heads = 2;
  cfg.model.n_layers = 2;
  cfg.model.n_fusion = 1;
  cfg.model.ffn_mult = 2;
  cfg.model.vocab_v = 8;
  cfg.model.vocab_l = 8;
  cfg.model.seq_len = 4;
  cfg.total_steps = 24;
  cfg.seeds = {1, 2};
  cfg.fine_tune_steps = 4;
  cfg.eval.samples = 60;
  cfg.gram_batches = 2;
  cfg.threads = 2;
  return cfg;
}

MergeSpec interp(double alpha) {
  MergeSpec s;
  s.alpha = alpha;
  return s;
}

MergeSpec arith(double lambda) {
  MergeSpec s;
  s.method = MergeMethod::modality_arithmetic;
  s.lambda = lambda;
  return s;
}

}  // namespace

TEST_CASE("median") {
  CHECK(median({3, 1, 2}) == 2.0);
  CHECK(median({4, 1, 3, 2}) == 2.5);
  CHECK_THROWS_AS(median({}), DataError);
}

TEST_CASE("worker count") {
  CHECK(worker_count(3) == 3);
  CHECK(worker_count(0) >= 1);
}

TEST_CASE("config validation") {
  ExperimentConfig cfg = tiny();
  cfg.seed_fractions = {0.5, 0.25};
  CHECK_THROWS_AS(cfg.validate(), UsageError);
  cfg = tiny();
  cfg.seed_fractions = {1.5};
  CHECK_THROWS_AS(run_seed_sweep(cfg), UsageError);
  cfg = tiny();
  cfg.merge_specs = {interp(2.0)};
  CHECK_THROWS_AS(cfg.validate(), UsageError);
  cfg = tiny();
  cfg.seeds.clear();
  CHECK_THROWS_AS(cfg.validate(), UsageError);
}

TEST_CASE("spec sets") {
  CHECK(default_sweep_specs().size() == 4);
  CHECK(method_grid().size() == 15);
  CHECK(spec_label(interp(0.5)) == "interpolation " + interp(0.5).hyperparam_label());
  CHECK(share_variants().size() == 5);
  CHECK(share_variants().front().shared.empty());
  CHECK(share_variants().back().shared.size() == 3);
}

TEST_CASE("a fully seed-shared run merges without loss") {
  ExperimentConfig cfg = tiny();
  cfg.seed_fractions = {1.0};
  cfg.merge_specs = {interp(0.5), interp(0.75), arith(0.5)};
  const SweepResult r = run_seed_sweep(cfg);
  REQUIRE(r.cells.size() == 6);
  for (const CellResult& c : r.cells) {
    CHECK_FALSE(c.diverged);
    CHECK(c.train_steps == cfg.total_steps);
    CHECK(c.fine_tune_steps == cfg.fine_tune_steps);
    for (const auto& [task, d] : c.drop) CHECK(d == 0.0);
    REQUIRE(c.metrics);
    CHECK(c.metrics->l2 == 0.0);
    CHECK(c.metrics->cosine == 0.0);
    CHECK(c.metrics->ssd == 0.0);
    CHECK(c.metrics->tssd == 0.0);
  }
}

TEST_CASE("sweeps are deterministic and conserve the step budget") {
  ExperimentConfig cfg = tiny();
  cfg.seed_fractions = {0.0, 0.5};
  cfg.merge_specs = {interp(0.5)};
  const SweepResult a = run_seed_sweep(cfg);
  cfg.threads = 1;
  const SweepResult b = run_seed_sweep(cfg);
  REQUIRE(a.cells.size() == 4);
  REQUIRE(b.cells.size() == 4);
  for (std::size_t i = 0; i < a.cells.size(); ++i) {
    CHECK(a.cells[i].fraction == b.cells[i].fraction);
    CHECK(a.cells[i].seed == b.cells[i].seed);
    CHECK(a.cells[i].before == b.cells[i].before);
    CHECK(a.cells[i].after == b.cells[i].after);
    CHECK(a.cells[i].metrics->l2 == b.cells[i].metrics->l2);
    CHECK(a.cells[i].train_steps == cfg.total_steps);
  }
  CHECK(a.cells[0].metrics->l2 > 0.0);

  const auto rows = aggregate(a);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].fraction == 0.0);
  CHECK(rows[0].seeds == 2);
}

TEST_CASE("boundary merges reproduce their sources") {
  ExperimentConfig cfg = tiny();
  cfg.model.n_fusion = 0;  // no top-layer third source
  cfg.seed_fractions = {0.25};
  cfg.seeds = {3};
  cfg.merge_specs = {interp(0.0), arith(0.0)};
  const SweepResult r = run_seed_sweep(cfg);
  REQUIRE(r.cells.size() == 2);
  // alpha = 0 is the language stack; lambda = 0 is the seed checkpoint.
  // Both keep every entry of one source, so their raw scores differ from
  // each other only through which stack they copied.
  for (const CellResult& c : r.cells) CHECK_FALSE(c.diverged);

  // Direct check on the merged weights.
  ToyConfig mc = cfg.model;
  mc.seed = 3;
  const SyntheticTaskSet tasks(mc.task_shape(), cfg.task_seed);
  ToyModel m = init_model(mc);
  TrainOptions o;
  o.batch_size = cfg.batch_size;
  train_phase(m, tasks, 6, TrainMode::seed_shared, o);
  const Checkpoint w0 = init_checkpoint(m);
  train_phase(m, tasks, 18, TrainMode::branched, o);
  const Checkpoint v = route_checkpoint(m, Modality::vision);
  const Checkpoint l = route_checkpoint(m, Modality::language);
  MergeSpec a0 = interp(0.0), l0 = arith(0.0), a5 = interp(0.5), l5 = arith(0.5);
  for (MergeSpec* s : {&a0, &l0, &a5, &l5}) s->routing = mc.routing();
  const Checkpoint mi = interpolate(v, l, nullptr, a0).merged;
  const Checkpoint ma = modality_arithmetic(w0, v, l, nullptr, l0).merged;
  const Checkpoint mi5 = interpolate(v, l, nullptr, a5).merged;
  const Checkpoint ma5 = modality_arithmetic(w0, v, l, nullptr, l5).merged;
  for (const auto& [name, e] : l.entries()) {
    if (!e.meta.mergeable) continue;
    CHECK(identical(mi.at(name).tensor, e.tensor));
    CHECK(identical(ma.at(name).tensor, w0.at(name).tensor));
    const auto& x = mi5.at(name).tensor.values();
    const auto& y = ma5.at(name).tensor.values();
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(x[i] == doctest::Approx(y[i]).epsilon(1e-12));
  }
}

TEST_CASE("share-mask ablation") {
  ExperimentConfig cfg = tiny();
  cfg.seeds = {4};
  const SweepResult r = run_share_mask_ablation(cfg);
  REQUIRE(r.cells.size() == 5);
  CHECK(r.preset == "share-mask");
  for (const CellResult& c : r.cells) {
    CHECK_FALSE(c.diverged);
    CHECK(c.shared_preserved);
    if (c.variant == "fully-shared") {
      CHECK(c.merged_entries == 0);
      CHECK_FALSE(c.metrics);
      for (const auto& [task, d] : c.drop) CHECK(d == 0.0);
    }
    if (c.variant == "custom-LN") {
      // 4 layernorm entries per layer and stack-layer slot: ln1/ln2 scale and shift.
      CHECK(c.merged_entries == static_cast<std::size_t>(4 * cfg.model.n_layers));
    }
    if (c.variant == "full-custom") CHECK(c.merged_entries == static_cast<std::size_t>(15 * cfg.model.n_layers));
  }
}

TEST_CASE("correlation over a sweep") {
  SweepResult s;
  for (int i = 0; i < 4; ++i) {
    CellResult c;
    c.spec = interp(0.5);
    c.metrics = MetricValues{1.0 * i, 0.1 * i, 0.3 + 0.01 * i, 0.5 - 0.01 * i};
    c.drop = {{"vision", 0.1 * i}, {"language", 0.05}, {"joint", 0.2 * i}};
    c.mean_drop = (0.1 * i + 0.05 + 0.2 * i) / 3.0;
    s.cells.push_back(c);
  }
  const SweepCorrelation r = correlate(s);
  CHECK(r.points == 4);
  CHECK(r.pooled.at("l2") == doctest::Approx(1.0));
  CHECK(r.pooled.at("tssd") == doctest::Approx(-1.0));
  CHECK(r.per_task.contains("vision"));
  CHECK_FALSE(r.per_task.contains("language"));  // constant drop

  for (auto& c : s.cells) c.mean_drop = 0.1;
  CHECK_THROWS_AS(correlate(s), NumericalError);
  CHECK_THROWS_AS(correlate(s, "regmean gamma=1"), DataError);
}
