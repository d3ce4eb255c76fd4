#pragma once

// Weight-distance mergeability metrics and their correlation with
// post-merge performance drops.

#include <map>
#include <span>
#include <string>
#include <vector>

#include "modmerge/tensor_store.hpp"

namespace modmerge {

struct MetricSpec {
  double truncation_fraction = 0.5;  // share of each vector zeroed before TSSD
  void validate() const;
};

struct MetricValues {
  double l2 = 0.0;
  double cosine = 0.0;
  double ssd = 0.0;
  double tssd = 0.0;

  double get(std::string_view metric) const;
};

inline constexpr std::string_view kMetricNames[] = {"l2", "cosine", "ssd", "tssd"};

struct MetricReport {
  MetricValues values;
  std::map<std::string, double> pearson;  // metric -> correlation with drop
};

/// One earlier merge: its metric values and the measured drop.
struct DropObservation {
  std::string context;
  MetricValues metrics;
  double drop = 0.0;
};

double l2_distance(std::span<const double> x, std::span<const double> y);

/// 1 - cos(x, y); in [0, 2]. Zero vectors are rejected.
double cosine_dissimilarity(std::span<const double> x, std::span<const double> y);

/// Soft sign dissimilarity: 1 - mean_i |x_i + y_i| / (|x_i| + |y_i|).
/// A pair of zeros counts as full agreement.
double ssd(std::span<const double> x, std::span<const double> y);

/// Zeroes the floor(fraction * L) smallest-magnitude entries of x and of y
/// independently (ties: lower index first), then averages the SSD terms
/// over indices where at least one side survived.
double tssd(std::span<const double> x, std::span<const double> y, const MetricSpec& spec);

/// Sample Pearson correlation. Throws NumericalError on zero variance.
double pearson(std::span<const double> xs, std::span<const double> ys);

MetricValues compute_metrics(std::span<const double> x, std::span<const double> y, const MetricSpec& spec);

/// Modality of the non-shared mergeable entries; throws DataError when mixed.
Modality primary_modality(const Checkpoint& ckpt);

/// All four metrics on the flattened modality-specific mergeable weights
/// (DataError when there are none). When at least two
/// drop observations are given, adds the Pearson correlation of each metric
/// with the drop across them.
MetricReport metric_report(const Checkpoint& vision, const Checkpoint& language, const MetricSpec& spec,
                           std::span<const DropObservation> drops = {});

/// Pearson per metric across observations.
std::map<std::string, double> correlate_drops(std::span<const DropObservation> drops);

}  // namespace modmerge
