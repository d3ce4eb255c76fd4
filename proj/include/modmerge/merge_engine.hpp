#pragma once

// Interpolation, modality arithmetic and RegMean merging of modality-specific
// transformer checkpoints into one modality-agnostic checkpoint.
//
// Layer routing: a model has N layers per modality stack; the top M of them
// (indices N-M .. N-1) additionally exist as cross-modal fusion layers.
// Lower layers merge two sources (vision, language), top layers three.

#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "modmerge/gram_capture.hpp"
#include "modmerge/tensor_store.hpp"

namespace modmerge {

struct LayerRouting {
  int n_layers = 4;
  int n_fusion = 1;

  void validate() const;
  bool is_top(int layer) const noexcept { return layer >= n_layers - n_fusion; }
};

enum class MergeMethod { interpolation, modality_arithmetic, regmean };

std::string_view to_string(MergeMethod m) noexcept;
MergeMethod parse_merge_method(std::string_view s);

struct MergeSpec {
  MergeMethod method = MergeMethod::interpolation;
  double alpha = 0.75;   // interpolation: vision share vs language
  double lambda = 0.5;   // modality arithmetic: modality-vector scale
  double gamma = 1.0;    // RegMean: off-diagonal gram shrinkage
  LayerRouting routing;
  ShareMask share_mask;  // groups already shared across modalities

  /// Range checks for the active method only. Throws UsageError.
  void validate() const;
  /// Short label such as "alpha=0.75".
  std::string hyperparam_label() const;
};

struct EntryReport {
  std::string name;
  std::string action;  // interpolate | arithmetic | regmean-solve | regmean-average | shared-copy | pass-through
  std::vector<std::pair<Modality, double>> coefficients;
  std::vector<Modality> sources;
  bool ridge_applied = false;
};

struct MergeResult {
  Checkpoint merged;
  std::vector<EntryReport> report;
};

/// True iff the entry takes part in merging: mergeable and its group is not
/// in the share mask.
bool apply_share_mask(const MergeSpec& spec, std::string_view name, const ParamMeta& meta);

/// Lower layers: alpha*Wv + (1-alpha)*Wl. Top layers: 2/3 of that plus 1/3 Wvl.
/// `crossmodal` must be given iff the routing has fusion layers.
MergeResult interpolate(const Checkpoint& vision, const Checkpoint& language,
                        const Checkpoint* crossmodal, const MergeSpec& spec);

/// W0 + lambda * sum of (Wm - W0) over the modalities present at each layer.
MergeResult modality_arithmetic(const Checkpoint& init, const Checkpoint& vision,
                                const Checkpoint& language, const Checkpoint* crossmodal,
                                const MergeSpec& spec);

struct RegMeanInput {
  const Checkpoint& checkpoint;
  const GramStore& grams;
  Modality modality;
};

/// Linear weights (stored d_in x d_out) solve
///   (sum_m G~m) W = sum_m G~m Wm,   G~ = gamma G + (1-gamma) diag(G),
/// through a symmetric factorization; a ridge of 1e-8 * mean(diag) is added
/// when the system is rank deficient. Every other mergeable entry is the
/// equal-weight mean over the modalities holding it.
MergeResult regmean_merge(std::span<const RegMeanInput> inputs, const MergeSpec& spec);

/// Infers N (max layer index + 1 over mergeable entries) and M (distinct
/// layers among crossmodal mergeable entries).
LayerRouting infer_routing(const Checkpoint& vision, const Checkpoint* crossmodal);

}  // namespace modmerge
