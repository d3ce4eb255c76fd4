#include "modmerge/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>

namespace modmerge {

void MetricSpec::validate() const {
  if (!(truncation_fraction >= 0.0 && truncation_fraction < 1.0))
    throw UsageError("truncation fraction must lie in [0,1)");
}

double MetricValues::get(std::string_view metric) const {
  if (metric == "l2") return l2;
  if (metric == "cosine") return cosine;
  if (metric == "ssd") return ssd;
  if (metric == "tssd") return tssd;
  throw UsageError("unknown metric '" + std::string(metric) + "'");
}

namespace {

void require_same_length(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size())
    throw DataError("length mismatch: " + std::to_string(x.size()) + " vs " + std::to_string(y.size()));
}

// |x+y| / (|x|+|y|), or nullopt for a pair of zeros.
std::optional<double> sign_similarity(double x, double y) {
  const double denom = std::abs(x) + std::abs(y);
  if (denom == 0.0) return std::nullopt;
  return std::abs(x + y) / denom;
}

std::vector<double> truncate_smallest(std::span<const double> v, std::size_t k) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return std::abs(v[a]) < std::abs(v[b]); });
  std::vector<double> out(v.begin(), v.end());
  for (std::size_t i = 0; i < k; ++i) out[order[i]] = 0.0;
  return out;
}

}  // namespace

double l2_distance(std::span<const double> x, std::span<const double> y) {
  require_same_length(x, y);
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - y[i];
    s += d * d;
  }
  return std::sqrt(s);
}

double cosine_dissimilarity(std::span<const double> x, std::span<const double> y) {
  require_same_length(x, y);
  double dot = 0.0, xx = 0.0, yy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    dot += x[i] * y[i];
    xx += x[i] * x[i];
    yy += y[i] * y[i];
  }
  if (xx == 0.0 || yy == 0.0) throw NumericalError("cosine dissimilarity of a zero vector");
  // sqrt(xx * xx) == xx exactly, so x == y yields exactly 0.
  const double c = std::clamp(dot / std::sqrt(xx * yy), -1.0, 1.0);
  return 1.0 - c;
}

double ssd(std::span<const double> x, std::span<const double> y) {
  require_same_length(x, y);
  if (x.empty()) throw DataError("SSD of empty vectors");
  double sim = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) sim += sign_similarity(x[i], y[i]).value_or(1.0);
  return std::clamp(1.0 - sim / static_cast<double>(x.size()), 0.0, 1.0);
}

double tssd(std::span<const double> x, std::span<const double> y, const MetricSpec& spec) {
  spec.validate();
  require_same_length(x, y);
  const auto k = static_cast<std::size_t>(std::floor(spec.truncation_fraction * static_cast<double>(x.size())));
  const auto tx = truncate_smallest(x, k);
  const auto ty = truncate_smallest(y, k);
  double sim = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < tx.size(); ++i) {
    if (auto s = sign_similarity(tx[i], ty[i])) {
      sim += *s;
      ++count;
    }
  }
  if (count == 0) throw NumericalError("TSSD undefined: every index pair is zero after truncation");
  return std::clamp(1.0 - sim / static_cast<double>(count), 0.0, 1.0);
}

double pearson(std::span<const double> xs, std::span<const double> ys) {
  require_same_length(xs, ys);
  if (xs.size() < 2) throw DataError("pearson needs at least two observations");
  const double n = static_cast<double>(xs.size());
  const double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  const double my = std::accumulate(ys.begin(), ys.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double dx = xs[i] - mx, dy = ys[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw NumericalError("zero variance");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

MetricValues compute_metrics(std::span<const double> x, std::span<const double> y, const MetricSpec& spec) {
  MetricValues v;
  v.l2 = l2_distance(x, y);
  v.cosine = cosine_dissimilarity(x, y);
  v.ssd = ssd(x, y);
  v.tssd = tssd(x, y, spec);
  return v;
}

Modality primary_modality(const Checkpoint& ckpt) {
  std::optional<Modality> found;
  for (const auto& [name, e] : ckpt.entries()) {
    if (!e.meta.mergeable || e.meta.modality == Modality::shared) continue;
    if (found && *found != e.meta.modality)
      throw DataError("checkpoint mixes modalities ('" + name + "' is " +
                      std::string(to_string(e.meta.modality)) + ")");
    found = e.meta.modality;
  }
  return found.value_or(Modality::shared);
}

namespace {

std::vector<std::string> flattened_names(const Checkpoint& ckpt, Modality m) {
  std::vector<std::string> names;
  for (const auto& [name, e] : ckpt.entries())
    if (e.meta.mergeable && e.meta.modality == m) names.push_back(name);
  return names;
}

}  // namespace

std::map<std::string, double> correlate_drops(std::span<const DropObservation> drops) {
  std::vector<double> ys;
  for (const auto& d : drops) ys.push_back(d.drop);
  std::map<std::string, double> out;
  for (std::string_view metric : kMetricNames) {
    std::vector<double> xs;
    for (const auto& d : drops) xs.push_back(d.metrics.get(metric));
    out[std::string(metric)] = pearson(xs, ys);
  }
  return out;
}

MetricReport metric_report(const Checkpoint& vision, const Checkpoint& language, const MetricSpec& spec,
                           std::span<const DropObservation> drops) {
  spec.validate();
  require_merge_compatible(vision, language, "metrics");
  const Modality mv = primary_modality(vision);
  const Modality ml = primary_modality(language);
  if (mv == Modality::shared || ml == Modality::shared)
    throw DataError("no modality-specific mergeable entries to compare");
  if (flattened_names(vision, mv) != flattened_names(language, ml))
    throw DataError("vision and language checkpoints flatten to different entry sets");
  const Tensor x = flatten_mergeable(vision, mv);
  const Tensor y = flatten_mergeable(language, ml);

  MetricReport report;
  report.values = compute_metrics(x.data(), y.data(), spec);
  if (drops.size() >= 2) report.pearson = correlate_drops(drops);
  return report;
}

}  // namespace modmerge
