#pragma once

// Central finite differences against the hand-written backward pass.

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

#include "modmerge/toy_model.hpp"

namespace testutil {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst;  // parameter name and index
  std::size_t checked = 0;
};

inline modmerge::ToyConfig gradcheck_config() {
  modmerge::ToyConfig cfg;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.n_layers = 2;
  cfg.n_fusion = 1;
  cfg.ffn_mult = 2;
  cfg.vocab_v = 6;
  cfg.vocab_l = 6;
  cfg.seq_len = 4;
  cfg.seed = 17;
  return cfg;
}

// Non-zero heads so every layer receives gradient, and perturbed layer
// values so the stacks differ.
inline modmerge::ToyModel gradcheck_model(const modmerge::ToyConfig& cfg) {
  using namespace modmerge;
  ToyModel m = init_model(cfg);
  std::mt19937_64 rng(cfg.seed + 1);
  std::normal_distribution<double> n(0.0, 0.3);
  for (ParamRef& p : parameters(m))
    for (double& v : p.tensor->values()) v += n(rng);
  return m;
}

inline double total_loss(const modmerge::ToyModel& m, const std::vector<modmerge::TaskBatch>& batches,
                         const modmerge::SyntheticTaskSet& tasks) {
  double loss = 0.0;
  for (const auto& b : batches) loss += tasks.loss_weight(b.route) * modmerge::forward(m, b).loss;
  return loss;
}

// Every scalar parameter; relative error |a - n| / max(|a|, |n|, 1e-8).
inline GradCheckResult gradient_check(const modmerge::ToyConfig& cfg, double eps = 1e-5) {
  using namespace modmerge;
  const SyntheticTaskSet tasks(cfg.task_shape(), 0x5eed);
  ToyModel model = gradcheck_model(cfg);
  std::vector<TaskBatch> batches;
  for (Route r : kAllRoutes) batches.push_back(tasks.batch(r, 99, 3));

  ToyModel grads = model.zeros_like();
  for (const auto& b : batches) accumulate_gradient(model, b, tasks.loss_weight(b.route), grads);

  GradCheckResult out;
  auto params = parameters(model);
  const auto gparams = parameters(grads);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& values = params[k].tensor->values();
    const auto& g = gparams[k].tensor->values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double keep = values[i];
      values[i] = keep + eps;
      const double up = total_loss(model, batches, tasks);
      values[i] = keep - eps;
      const double down = total_loss(model, batches, tasks);
      values[i] = keep;
      const double numeric = (up - down) / (2.0 * eps);
      const double rel = std::abs(g[i] - numeric) / std::max({std::abs(g[i]), std::abs(numeric), 1e-8});
      ++out.checked;
      if (rel > out.max_rel_error) {
        out.max_rel_error = rel;
        out.worst = params[k].name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return out;
}

}  // namespace testutil
