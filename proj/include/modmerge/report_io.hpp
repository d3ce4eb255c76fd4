#pragma once

// JSON and CSV renderings of merge reports, metric reports and sweeps.

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "modmerge/experiment.hpp"
#include "modmerge/merge_engine.hpp"
#include "modmerge/metrics.hpp"

namespace modmerge {

std::string merge_report_json(const MergeSpec& spec, std::span<const EntryReport> report);

std::string metric_report_json(const MetricReport& report, const MetricSpec& spec);
/// Columns: metric,value,pearson (pearson empty when not computed).
std::string metric_report_csv(const MetricReport& report);

std::string sweep_json(const SweepResult& sweep);
/// One row per (cell, task): fraction,method,hyperparam,seed,task,before,after,
/// drop,l2,cosine,ssd,tssd,variant,raw_drop,diverged.
std::string sweep_csv(const SweepResult& sweep);

/// Reads the cells back from sweep_json output.
SweepResult parse_sweep_json(const std::string& text);

/// Aggregate medians and correlations as a plain-text table.
std::string sweep_summary(const SweepResult& sweep);

/// A CSV with a `drop` column and the four metric columns (l2, cosine, ssd,
/// tssd), matched by header name. Throws DataError on missing columns or
/// unparsable numbers.
std::vector<DropObservation> parse_drops_csv(const std::string& text);

std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace modmerge
