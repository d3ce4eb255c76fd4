#include "modmerge/merge_engine.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>

namespace modmerge {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

void LayerRouting::validate() const {
  if (n_layers < 1) throw UsageError("routing needs at least one layer");
  if (n_fusion < 0 || n_fusion > n_layers) throw UsageError("fusion layer count must lie in [0, N]");
}

std::string_view to_string(MergeMethod m) noexcept {
  switch (m) {
    case MergeMethod::interpolation: return "interpolation";
    case MergeMethod::modality_arithmetic: return "modality-arithmetic";
    case MergeMethod::regmean: return "regmean";
  }
  return "?";
}

MergeMethod parse_merge_method(std::string_view s) {
  for (MergeMethod m : {MergeMethod::interpolation, MergeMethod::modality_arithmetic, MergeMethod::regmean})
    if (to_string(m) == s) return m;
  throw UsageError("unknown merge method '" + std::string(s) + "'");
}

void MergeSpec::validate() const {
  routing.validate();
  switch (method) {
    case MergeMethod::interpolation:
      if (!(alpha >= 0.0 && alpha <= 1.0)) throw UsageError("alpha must lie in [0,1]");
      break;
    case MergeMethod::modality_arithmetic:
      if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw UsageError("lambda must be finite and >= 0");
      break;
    case MergeMethod::regmean:
      if (!(gamma >= 0.0 && gamma <= 1.0)) throw UsageError("gamma must lie in [0,1]");
      break;
  }
}

std::string MergeSpec::hyperparam_label() const {
  char buf[64];
  switch (method) {
    case MergeMethod::interpolation: std::snprintf(buf, sizeof buf, "alpha=%g", alpha); break;
    case MergeMethod::modality_arithmetic: std::snprintf(buf, sizeof buf, "lambda=%g", lambda); break;
    case MergeMethod::regmean: std::snprintf(buf, sizeof buf, "gamma=%g", gamma); break;
  }
  return buf;
}

bool apply_share_mask(const MergeSpec& spec, std::string_view name, const ParamMeta& meta) {
  return meta.mergeable && !spec.share_mask.contains(param_group(name, meta));
}

LayerRouting infer_routing(const Checkpoint& vision, const Checkpoint* crossmodal) {
  int max_layer = -1;
  for (const auto& [name, e] : vision.entries())
    if (e.meta.mergeable && e.meta.layer_index) max_layer = std::max(max_layer, *e.meta.layer_index);
  std::set<int> fusion;
  if (crossmodal)
    for (const auto& [name, e] : crossmodal->entries())
      if (e.meta.mergeable && e.meta.layer_index) fusion.insert(*e.meta.layer_index);
  return LayerRouting{std::max(max_layer + 1, 1), static_cast<int>(fusion.size())};
}

namespace {

struct Source {
  const Checkpoint* ckpt;
  Modality modality;
};

bool is_top(const MergeSpec& spec, const ParamMeta& meta) {
  return meta.layer_index && spec.routing.is_top(*meta.layer_index);
}

// Checks the layer routing contract shared by every method: `primary` holds
// the full-depth stacks (vision, language, ...), `crossmodal` only the top M
// layers. Returns the reference checkpoint whose mergeable names drive the merge.
const Checkpoint& check_inputs(std::span<const Source> primary, const Checkpoint* crossmodal,
                               const MergeSpec& spec) {
  spec.validate();
  if (primary.empty()) throw UsageError("no input checkpoints");
  const Checkpoint& ref = *primary.front().ckpt;
  for (std::size_t i = 1; i < primary.size(); ++i)
    require_merge_compatible(ref, *primary[i].ckpt,
                             std::string(to_string(primary.front().modality)) + "/" +
                                 std::string(to_string(primary[i].modality)));

  const int n = spec.routing.n_layers;
  bool has_top = false;
  for (const auto& [name, e] : ref.entries()) {
    if (!e.meta.mergeable || !e.meta.layer_index) continue;
    if (*e.meta.layer_index >= n)
      throw DataError("entry '" + name + "' has layer index " + std::to_string(*e.meta.layer_index) +
                      " outside the " + std::to_string(n) + "-layer routing");
    has_top |= spec.routing.is_top(*e.meta.layer_index);
  }

  if (spec.routing.n_fusion > 0 && has_top && !crossmodal)
    throw DataError("routing has " + std::to_string(spec.routing.n_fusion) +
                    " fusion layers but no crossmodal checkpoint was given");
  if (crossmodal) {
    if (spec.routing.n_fusion == 0 && !crossmodal->mergeable_names().empty())
      throw DataError("crossmodal checkpoint given but routing has no fusion layers");
    for (const auto& [name, e] : crossmodal->entries()) {
      if (!e.meta.mergeable) continue;
      if (!e.meta.layer_index || !spec.routing.is_top(*e.meta.layer_index))
        throw DataError("crossmodal entry '" + name + "' lies outside the top " +
                        std::to_string(spec.routing.n_fusion) + " layers");
      const Entry* r = ref.find(name);
      if (!r || !r->meta.mergeable) throw DataError("crossmodal entry '" + name + "' has no vision/language counterpart");
      if (r->tensor.shape() != e.tensor.shape())
        throw DataError("entry '" + name + "' shape " + shape_string(r->tensor.shape()) + " vs crossmodal " +
                        shape_string(e.tensor.shape()));
    }
    for (const auto& [name, e] : ref.entries()) {
      if (!e.meta.mergeable || !is_top(spec, e.meta)) continue;
      const Entry* x = crossmodal->find(name);
      if (!x || !x->meta.mergeable) throw DataError("missing crossmodal entry '" + name + "' for a fusion layer");
    }
  }

  // Entries in shared groups must already agree everywhere.
  for (const auto& [name, e] : ref.entries()) {
    if (!e.meta.mergeable || apply_share_mask(spec, name, e.meta)) continue;
    for (const Source& s : primary)
      if (!identical(s.ckpt->at(name).tensor, e.tensor))
        throw DataError("shared entry '" + name + "' differs across inputs");
    if (crossmodal && is_top(spec, e.meta) && !identical(crossmodal->at(name).tensor, e.tensor))
      throw DataError("shared entry '" + name + "' differs across inputs");
  }
  return ref;
}

ParamMeta merged_meta(ParamMeta meta) {
  meta.modality = Modality::shared;
  return meta;
}

void copy_shared(MergeResult& out, const std::string& name, const Entry& e) {
  out.merged.insert(name, e.tensor, merged_meta(e.meta));
  out.report.push_back({name, "shared-copy", {}, {}, false});
}

// Non-mergeable entries (embeddings, heads) travel unchanged per modality.
void pass_through(MergeResult& out, std::span<const Source> sources) {
  for (const Source& s : sources) {
    for (const auto& [name, e] : s.ckpt->entries()) {
      if (e.meta.mergeable) continue;
      if (const Entry* existing = out.merged.find(name)) {
        if (!identical(existing->tensor, e.tensor))
          throw DataError("non-mergeable entry '" + name + "' collides across modalities");
        continue;
      }
      out.merged.insert(name, e.tensor, e.meta);
      out.report.push_back({name, "pass-through", {}, {s.modality}, false});
    }
  }
}

std::vector<Source> with_crossmodal(std::span<const Source> primary, const Checkpoint* crossmodal) {
  std::vector<Source> all(primary.begin(), primary.end());
  if (crossmodal) all.push_back({crossmodal, Modality::crossmodal});
  return all;
}

}  // namespace

MergeResult interpolate(const Checkpoint& vision, const Checkpoint& language, const Checkpoint* crossmodal,
                        const MergeSpec& spec) {
  const Source primary[] = {{&vision, Modality::vision}, {&language, Modality::language}};
  check_inputs(primary, crossmodal, spec);
  const double a = spec.alpha;

  MergeResult out;
  for (const auto& [name, e] : vision.entries()) {
    if (!e.meta.mergeable) continue;
    if (!apply_share_mask(spec, name, e.meta)) {
      copy_shared(out, name, e);
      continue;
    }
    const auto& wv = e.tensor.values();
    const auto& wl = language.at(name).tensor.values();
    std::vector<double> merged(wv.size());
    // std::lerp is exact at the endpoints and for equal inputs.
    for (std::size_t i = 0; i < wv.size(); ++i) merged[i] = std::lerp(wl[i], wv[i], a);
    EntryReport rep{name, "interpolate", {}, {Modality::vision, Modality::language}, false};
    if (is_top(spec, e.meta)) {
      const auto& wx = crossmodal->at(name).tensor.values();
      for (std::size_t i = 0; i < wv.size(); ++i) merged[i] = std::lerp(merged[i], wx[i], 1.0 / 3.0);
      rep.coefficients = {{Modality::vision, 2.0 * a / 3.0},
                          {Modality::language, 2.0 * (1.0 - a) / 3.0},
                          {Modality::crossmodal, 1.0 / 3.0}};
      rep.sources.push_back(Modality::crossmodal);
    } else {
      rep.coefficients = {{Modality::vision, a}, {Modality::language, 1.0 - a}};
    }
    out.merged.insert(name, Tensor(e.tensor.shape(), std::move(merged)), merged_meta(e.meta));
    out.report.push_back(std::move(rep));
  }
  pass_through(out, with_crossmodal(primary, crossmodal));
  return out;
}

MergeResult modality_arithmetic(const Checkpoint& init, const Checkpoint& vision, const Checkpoint& language,
                                const Checkpoint* crossmodal, const MergeSpec& spec) {
  const Source primary[] = {{&vision, Modality::vision}, {&language, Modality::language}};
  check_inputs(primary, crossmodal, spec);
  require_merge_compatible(init, vision, "init/vision");
  const double lambda = spec.lambda;

  MergeResult out;
  for (const auto& [name, e] : vision.entries()) {
    if (!e.meta.mergeable) continue;
    if (!apply_share_mask(spec, name, e.meta)) {
      copy_shared(out, name, e);
      continue;
    }
    const auto& w0 = init.at(name).tensor.values();
    const auto& wv = e.tensor.values();
    const auto& wl = language.at(name).tensor.values();
    const bool top = is_top(spec, e.meta);
    const std::vector<double>* wx = top ? &crossmodal->at(name).tensor.values() : nullptr;

    std::vector<double> merged(w0.size());
    for (std::size_t i = 0; i < w0.size(); ++i) {
      double tau = (wv[i] - w0[i]) + (wl[i] - w0[i]);
      if (wx) tau += (*wx)[i] - w0[i];
      merged[i] = w0[i] + lambda * tau;
    }
    EntryReport rep{name, "arithmetic", {}, {Modality::init, Modality::vision, Modality::language}, false};
    const double k = top ? 3.0 : 2.0;
    rep.coefficients = {{Modality::init, 1.0 - k * lambda}, {Modality::vision, lambda}, {Modality::language, lambda}};
    if (top) {
      rep.coefficients.emplace_back(Modality::crossmodal, lambda);
      rep.sources.push_back(Modality::crossmodal);
    }
    out.merged.insert(name, Tensor(e.tensor.shape(), std::move(merged)), merged_meta(e.meta));
    out.report.push_back(std::move(rep));
  }
  pass_through(out, with_crossmodal(primary, crossmodal));
  return out;
}

namespace {

// Solves A X = B for symmetric positive semidefinite A. Returns whether a
// ridge had to be added.
bool solve_symmetric(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, Eigen::MatrixXd& x,
                     const std::string& name) {
  auto well_posed = [](const Eigen::LDLT<Eigen::MatrixXd>& f) {
    if (f.info() != Eigen::Success || !f.isPositive()) return false;
    const auto d = f.vectorD();
    const double dmax = d.cwiseAbs().maxCoeff();
    return dmax > 0.0 && d.minCoeff() > 1e-13 * dmax;
  };
  Eigen::LDLT<Eigen::MatrixXd> ldlt(a);
  if (well_posed(ldlt)) {
    x = ldlt.solve(b);
    return false;
  }
  const double mean_diag = a.diagonal().mean();
  if (!(mean_diag > 0.0)) throw NumericalError("singular RegMean system for '" + name + "' (zero gram)");
  const Eigen::MatrixXd ridged = a + 1e-8 * mean_diag * Eigen::MatrixXd::Identity(a.rows(), a.cols());
  ldlt.compute(ridged);
  if (!well_posed(ldlt)) throw NumericalError("singular RegMean system for '" + name + "' after ridge");
  x = ldlt.solve(b);
  return true;
}

}  // namespace

MergeResult regmean_merge(std::span<const RegMeanInput> inputs, const MergeSpec& spec) {
  std::vector<Source> primary;
  const Checkpoint* crossmodal = nullptr;
  std::vector<const GramStore*> primary_grams;
  const GramStore* crossmodal_grams = nullptr;
  for (const RegMeanInput& in : inputs) {
    if (in.modality == Modality::crossmodal) {
      if (crossmodal) throw UsageError("more than one crossmodal input");
      crossmodal = &in.checkpoint;
      crossmodal_grams = &in.grams;
    } else {
      primary.push_back({&in.checkpoint, in.modality});
      primary_grams.push_back(&in.grams);
    }
  }
  const Checkpoint& ref = check_inputs(primary, crossmodal, spec);

  MergeResult out;
  for (const auto& [name, e] : ref.entries()) {
    if (!e.meta.mergeable) continue;
    if (!apply_share_mask(spec, name, e.meta)) {
      copy_shared(out, name, e);
      continue;
    }
    std::vector<std::pair<const Tensor*, const GramStore*>> srcs;
    EntryReport rep{name, "", {}, {}, false};
    for (std::size_t i = 0; i < primary.size(); ++i) {
      srcs.emplace_back(&primary[i].ckpt->at(name).tensor, primary_grams[i]);
      rep.sources.push_back(primary[i].modality);
    }
    if (crossmodal && is_top(spec, e.meta)) {
      srcs.emplace_back(&crossmodal->at(name).tensor, crossmodal_grams);
      rep.sources.push_back(Modality::crossmodal);
    }

    if (srcs.size() == 1) {
      // (G)^-1 (G W) = W.
      rep.action = "regmean-single";
      rep.coefficients = {{rep.sources.front(), 1.0}};
      out.merged.insert(name, *srcs.front().first, merged_meta(e.meta));
      out.report.push_back(std::move(rep));
      continue;
    }

    if (e.meta.kind == ParamKind::linear_weight) {
      const Tensor& w0 = e.tensor;
      // A 1-D weight is a single output column.
      if (w0.rank() > 2) throw DataError("linear weight '" + name + "' must be 1-D or 2-D (d_in x d_out)");
      const auto d_in = static_cast<Eigen::Index>(w0.rows());
      const auto d_out = static_cast<Eigen::Index>(w0.rank() == 2 ? w0.cols() : 1);
      Eigen::MatrixXd a = Eigen::MatrixXd::Zero(d_in, d_in);
      Eigen::MatrixXd b = Eigen::MatrixXd::Zero(d_in, d_out);
      for (std::size_t s = 0; s < srcs.size(); ++s) {
        const GramEntry* g = srcs[s].second->find(name);
        if (!g)
          throw DataError("no gram matrix for linear weight '" + name + "' (" +
                          std::string(to_string(rep.sources[s])) + ")");
        if (static_cast<Eigen::Index>(g->matrix.rows()) != d_in)
          throw DataError("gram for '" + name + "' is " + shape_string(g->matrix.shape()) +
                          " but the weight has d_in " + std::to_string(d_in) +
                          " (weights are stored d_in x d_out)");
        const Tensor shrunk = shrink_matrix(g->matrix, spec.gamma);
        const Eigen::Map<const RowMatrix> gm(shrunk.data().data(), d_in, d_in);
        const Eigen::Map<const RowMatrix> wm(srcs[s].first->data().data(), d_in, d_out);
        a += gm;
        b += gm * wm;
      }
      Eigen::MatrixXd x;
      rep.ridge_applied = solve_symmetric(a, b, x, name);
      std::vector<double> merged(static_cast<std::size_t>(d_in * d_out));
      Eigen::Map<RowMatrix>(merged.data(), d_in, d_out) = x;
      rep.action = "regmean-solve";
      rep.coefficients = {};
      out.merged.insert(name, Tensor(w0.shape(), std::move(merged)), merged_meta(e.meta));
    } else {
      const double k = static_cast<double>(srcs.size());
      std::vector<double> merged(e.tensor.size(), 0.0);
      for (const auto& [t, g] : srcs)
        for (std::size_t i = 0; i < merged.size(); ++i) merged[i] += (*t)[i];
      for (double& v : merged) v /= k;
      rep.action = "regmean-average";
      for (Modality m : rep.sources) rep.coefficients.emplace_back(m, 1.0 / k);
      out.merged.insert(name, Tensor(e.tensor.shape(), std::move(merged)), merged_meta(e.meta));
    }
    out.report.push_back(std::move(rep));
  }
  pass_through(out, with_crossmodal(primary, crossmodal));
  return out;
}

}  // namespace modmerge
