#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "gradient_check.hpp"
#include "modmerge/metrics.hpp"
#include "modmerge/toy_model.hpp"

using namespace modmerge;

namespace {

ToyConfig small_config(std::uint64_t seed = 3) {
  ToyConfig cfg;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.n_layers = 2;
  cfg.n_fusion = 1;
  cfg.ffn_mult = 2;
  cfg.vocab_v = 8;
  cfg.vocab_l = 8;
  cfg.seq_len = 4;
  cfg.seed = seed;
  return cfg;
}

bool same_params(const ToyModel& a, const ToyModel& b) {
  const auto pa = parameters(a);
  const auto pb = parameters(b);
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i)
    if (pa[i].name != pb[i].name || !identical(*pa[i].tensor, *pb[i].tensor)) return false;
  return true;
}

bool all_zero(const Tensor& t) {
  for (double v : t.values())
    if (v != 0.0) return false;
  return true;
}

// Names of parameters whose gradient is non-zero after one route's loss.
std::set<std::string> touched(const ToyModel& model, const TaskBatch& batch) {
  ToyModel g = model.zeros_like();
  accumulate_gradient(model, batch, 1.0, g);
  std::set<std::string> out;
  for (const ParamRef& p : parameters(g))
    if (!all_zero(*p.tensor)) out.insert(p.name);
  return out;
}

}  // namespace

TEST_CASE("init is deterministic in the seed and stacks start equal") {
  const ToyConfig cfg = small_config();
  const ToyModel a = init_model(cfg);
  CHECK(same_params(a, init_model(cfg)));
  CHECK_FALSE(same_params(a, init_model(small_config(4))));
  for (int i = 0; i < cfg.n_layers; ++i) {
    CHECK(identical(a.vision[i].wq, a.language[i].wq));
    CHECK(identical(a.vision[i].w2, a.language[i].w2));
  }
  CHECK(identical(a.crossmodal[0].w1, a.vision[1].w1));
  CHECK(all_zero(a.head_v_w));
  CHECK(all_zero(a.head_j_b));
}

TEST_CASE("d_model must divide into heads") {
  ToyConfig cfg = small_config();
  cfg.d_model = 15;
  CHECK_THROWS_AS(init_model(cfg), UsageError);
  cfg = small_config();
  cfg.n_fusion = 3;
  CHECK_THROWS_AS(init_model(cfg), UsageError);
}

TEST_CASE("zero heads give a loss of ln 2 on every route") {
  const ToyConfig cfg = small_config();
  const ToyModel m = init_model(cfg);
  const SyntheticTaskSet tasks(cfg.task_shape(), 1);
  for (Route r : kAllRoutes) CHECK(forward(m, tasks.batch(r, 5, 6)).loss == doctest::Approx(std::log(2.0)).epsilon(1e-14));
}

TEST_CASE("captured activations have the linear input widths") {
  const ToyConfig cfg = small_config();
  const ToyModel m = init_model(cfg);
  const SyntheticTaskSet tasks(cfg.task_shape(), 1);
  const std::size_t T = static_cast<std::size_t>(cfg.seq_len);

  const ForwardResult v = forward(m, tasks.batch(Route::unimodal_v, 1, 2), true);
  CHECK(v.activations.size() == static_cast<std::size_t>(6 * cfg.n_layers));
  for (const auto& act : v.activations) {
    CHECK(act.stack == Modality::vision);
    CHECK(act.batch.rows.rows() == 2 * T);
    const std::size_t want = act.batch.entry_name.ends_with("ffn.w2") ? static_cast<std::size_t>(cfg.ffn_dim())
                                                                      : static_cast<std::size_t>(cfg.d_model);
    CHECK(act.batch.rows.cols() == want);
  }

  const ForwardResult j = forward(m, tasks.batch(Route::fusion, 1, 2), true);
  std::size_t fused = 0;
  for (const auto& act : j.activations) {
    if (act.stack != Modality::crossmodal) {
      CHECK(act.batch.rows.rows() == 2 * T);
      continue;
    }
    ++fused;
    CHECK(act.batch.rows.rows() == 2 * 2 * T);
  }
  CHECK(fused == static_cast<std::size_t>(6 * cfg.n_fusion));
}

TEST_CASE("layernorm output is standardized per token") {
  const ToyConfig cfg = small_config();
  const ToyModel m = init_model(cfg);  // scale 1, shift 0
  const SyntheticTaskSet tasks(cfg.task_shape(), 1);
  const ForwardResult r = forward(m, tasks.batch(Route::unimodal_l, 2, 3), true);
  for (const auto& act : r.activations) {
    if (!act.batch.entry_name.ends_with("attn.wq")) continue;
    const Tensor& x = act.batch.rows;
    for (std::size_t i = 0; i < x.rows(); ++i) {
      double mean = 0.0, var = 0.0;
      for (std::size_t j = 0; j < x.cols(); ++j) mean += x(i, j);
      mean /= static_cast<double>(x.cols());
      for (std::size_t j = 0; j < x.cols(); ++j) var += (x(i, j) - mean) * (x(i, j) - mean);
      var /= static_cast<double>(x.cols());
      CHECK(std::abs(mean) < 1e-10);
      CHECK(std::abs(var - 1.0) < 1e-10);
    }
  }
}

TEST_CASE("each route only reaches its own parameters") {
  const ToyConfig cfg = small_config();
  const ToyModel m = testutil::gradcheck_model(cfg);
  const SyntheticTaskSet tasks(cfg.task_shape(), 1);

  for (const std::string& name : touched(m, tasks.batch(Route::unimodal_v, 1, 4)))
    CHECK_MESSAGE((name.starts_with("vision/") || name.starts_with("embed.vision") || name.starts_with("head.vision")),
                  name);
  for (const std::string& name : touched(m, tasks.batch(Route::unimodal_l, 1, 4)))
    CHECK_MESSAGE((name.starts_with("language/") || name.starts_with("embed.language") ||
                   name.starts_with("head.language")),
                  name);
  const auto fusion = touched(m, tasks.batch(Route::fusion, 1, 4));
  CHECK(fusion.contains("crossmodal/layers.1.attn.wq"));
  CHECK(fusion.contains("vision/layers.0.ffn.w1"));
  CHECK(fusion.contains("language/layers.0.ffn.w1"));
  CHECK_FALSE(fusion.contains("vision/layers.1.attn.wq"));
  CHECK_FALSE(fusion.contains("language/layers.1.attn.wq"));
  CHECK_FALSE(fusion.contains("head.vision.weight"));
  CHECK(fusion.contains("head.joint.weight"));
}

TEST_CASE("analytic gradients match central finite differences") {
  const auto r = testutil::gradient_check(testutil::gradcheck_config());
  INFO("worst: " << r.worst << " rel " << r.max_rel_error);
  CHECK(r.checked > 1000);
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("gradient steps") {
  const ToyConfig cfg = small_config();
  const ToyModel m = testutil::gradcheck_model(cfg);
  const SyntheticTaskSet tasks(cfg.task_shape(), 1);
  const TaskBatch b = tasks.batch(Route::unimodal_v, 3, 8);
  CHECK(same_params(backward_step(m, b, 0.0), m));
  const double before = forward(m, b).loss;
  CHECK(forward(backward_step(m, b, 1e-3), b).loss < before);
}

TEST_CASE("training phases") {
  const ToyConfig cfg = small_config();
  const SyntheticTaskSet tasks(cfg.task_shape(), 1);
  TrainOptions opt;
  opt.stream_seed = 8;

  ToyModel m = init_model(cfg);
  const ToyModel start = m;
  CHECK(train_phase(m, tasks, 0, TrainMode::branched, opt) == 0);
  CHECK(same_params(m, start));

  SUBCASE("seed-shared keeps the stacks bit-identical") {
    train_phase(m, tasks, 40, TrainMode::seed_shared, opt);
    CHECK_FALSE(same_params(m, start));
    for (int i = 0; i < cfg.n_layers; ++i) {
      for (const auto& [v, l] : {std::pair{&m.vision[i].wq, &m.language[i].wq}, std::pair{&m.vision[i].b1, &m.language[i].b1},
                                 std::pair{&m.vision[i].ln2_scale, &m.language[i].ln2_scale}})
        CHECK(identical(*v, *l));
    }
    CHECK(identical(m.crossmodal[0].w2, m.vision[1].w2));
  }

  SUBCASE("branched training separates the stacks") {
    train_phase(m, tasks, 100, TrainMode::branched, opt);
    const double d = ssd(m.vision[0].w1.data(), m.language[0].w1.data());
    CHECK(d > 0.0);
    CHECK(l2_distance(m.vision[0].wq.data(), m.language[0].wq.data()) > 0.0);
  }

  SUBCASE("tied groups stay identical during branched training") {
    m.tied = {ParamGroup::attention, ParamGroup::layernorm};
    train_phase(m, tasks, 60, TrainMode::branched, opt);
    for (int i = 0; i < cfg.n_layers; ++i) {
      CHECK(identical(m.vision[i].wq, m.language[i].wq));
      CHECK(identical(m.vision[i].bo, m.language[i].bo));
      CHECK(identical(m.vision[i].ln1_shift, m.language[i].ln1_shift));
      CHECK_FALSE(identical(m.vision[i].w1, m.language[i].w1));
    }
    CHECK(identical(m.crossmodal[0].wk, m.vision[1].wk));
    CHECK_FALSE(identical(m.crossmodal[0].w1, m.vision[1].w1));
  }

  SUBCASE("heads-only training leaves the layers alone") {
    opt.heads_only = true;
    train_phase(m, tasks, 20, TrainMode::branched, opt);
    CHECK(identical(m.vision[0].wq, start.vision[0].wq));
    CHECK(identical(m.embed_v_token, start.embed_v_token));
    CHECK_FALSE(identical(m.head_v_w, start.head_v_w));
  }
}

TEST_CASE("evaluation") {
  const ToyConfig cfg;  // default size
  const SyntheticTaskSet tasks(cfg.task_shape(), 0x5eed);
  ToyModel m = init_model(cfg);
  EvalOptions eval;
  eval.samples = 400;
  const auto untrained = evaluate(m, tasks, eval);
  for (const auto& [task, acc] : untrained) CHECK_MESSAGE(std::abs(acc - 0.5) <= 0.1, task);
  CHECK(evaluate(m, tasks, eval) == untrained);

  TrainOptions opt;
  opt.stream_seed = 21;
  train_phase(m, tasks, 500, TrainMode::seed_shared, opt);
  const auto trained = evaluate(m, tasks, eval);
  double before = 0.0, after = 0.0;
  for (const auto& [task, acc] : trained) {
    after += acc;
    before += untrained.at(task);
  }
  CHECK(after > before + 0.3);
}

TEST_CASE("checkpoint views") {
  const ToyConfig cfg = small_config();
  const ToyModel m = testutil::gradcheck_model(cfg);

  SUBCASE("full export round-trips through a file") {
    const auto path = std::filesystem::temp_directory_path() / "modmerge_toy.mmc";
    save_checkpoint(to_checkpoint(m), path);
    const Checkpoint back = load_checkpoint(path);
    CHECK(same_params(from_checkpoint(cfg, back), m));
    const ToyConfig inferred = infer_config(back, cfg.n_heads);
    CHECK(inferred.d_model == cfg.d_model);
    CHECK(inferred.n_layers == cfg.n_layers);
    CHECK(inferred.n_fusion == cfg.n_fusion);
    CHECK(inferred.ffn_mult == cfg.ffn_mult);
    CHECK(inferred.vocab_v == cfg.vocab_v);
    CHECK(inferred.vocab_l == cfg.vocab_l);
    CHECK(inferred.seq_len == cfg.seq_len);
    std::filesystem::remove(path);
  }

  SUBCASE("route checkpoints") {
    ToyModel t = m;
    t.tied = {ParamGroup::ffn};
    const Checkpoint v = route_checkpoint(t, Modality::vision);
    CHECK(v.at("layers.0.attn.wq").meta.modality == Modality::vision);
    CHECK(v.at("layers.0.ffn.w1").meta.modality == Modality::shared);
    CHECK(v.contains("embed.vision.token"));
    CHECK_FALSE(v.contains("embed.language.token"));
    CHECK_FALSE(v.contains("head.joint.weight"));
    const Checkpoint x = route_checkpoint(t, Modality::crossmodal);
    CHECK(x.contains("layers.1.attn.wq"));
    CHECK_FALSE(x.contains("layers.0.attn.wq"));
    CHECK(x.contains("head.joint.weight"));
    const Checkpoint w0 = init_checkpoint(t);
    CHECK(w0.at("layers.1.ffn.b2").meta.modality == Modality::init);
    CHECK_FALSE(w0.contains("embed.vision.token"));
  }

  SUBCASE("a merge of identical stacks rebuilds the same network") {
    const ToyModel same = init_model(cfg);
    const Checkpoint v = route_checkpoint(same, Modality::vision);
    const Checkpoint l = route_checkpoint(same, Modality::language);
    const Checkpoint x = route_checkpoint(same, Modality::crossmodal);
    MergeSpec spec;
    spec.alpha = 0.5;
    spec.routing = cfg.routing();
    Checkpoint merged = interpolate(v, l, &x, spec).merged;
    for (const Checkpoint* src : {&v, &l, &x})
      for (const auto& [name, e] : src->entries())
        if (!e.meta.mergeable && !merged.contains(name)) merged.insert(name, e.tensor, e.meta);
    const ToyModel rebuilt = from_merged(cfg, merged);
    CHECK(same_params(rebuilt, same));
    CHECK(from_checkpoint(cfg, merged).tied.size() == 3);
  }

  SUBCASE("missing or mis-shaped entries are rejected") {
    Checkpoint c = to_checkpoint(m);
    Checkpoint broken;
    for (const auto& [name, e] : c.entries())
      if (name != "vision/layers.0.attn.wq") broken.insert(name, e.tensor, e.meta);
    CHECK_THROWS_AS(from_checkpoint(cfg, broken), DataError);
    ToyConfig bigger = cfg;
    bigger.d_model = 10;
    CHECK_THROWS_AS(from_checkpoint(bigger, c), DataError);
  }
}
