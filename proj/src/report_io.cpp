#include "modmerge/report_io.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace modmerge {

using json = nlohmann::ordered_json;

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

json metric_json(const MetricValues& m) {
  return json{{"l2", m.l2}, {"cosine", m.cosine}, {"ssd", m.ssd}, {"tssd", m.tssd}};
}

json spec_json(const MergeSpec& spec) {
  json j;
  j["method"] = to_string(spec.method);
  switch (spec.method) {
    case MergeMethod::interpolation: j["alpha"] = spec.alpha; break;
    case MergeMethod::modality_arithmetic: j["lambda"] = spec.lambda; break;
    case MergeMethod::regmean: j["gamma"] = spec.gamma; break;
  }
  j["n_layers"] = spec.routing.n_layers;
  j["n_fusion"] = spec.routing.n_fusion;
  json mask = json::array();
  for (ParamGroup g : spec.share_mask) mask.push_back(to_string(g));
  j["share_mask"] = mask;
  return j;
}

MergeSpec spec_from_json(const json& j) {
  MergeSpec s;
  s.method = parse_merge_method(j.at("method").get<std::string>());
  if (j.contains("alpha")) s.alpha = j["alpha"].get<double>();
  if (j.contains("lambda")) s.lambda = j["lambda"].get<double>();
  if (j.contains("gamma")) s.gamma = j["gamma"].get<double>();
  s.routing = {j.at("n_layers").get<int>(), j.at("n_fusion").get<int>()};
  for (const auto& g : j.at("share_mask")) s.share_mask.insert(parse_param_group(g.get<std::string>()));
  return s;
}

json scores_json(const std::map<std::string, double>& m) {
  json j = json::object();
  for (const auto& [k, v] : m) j[k] = v;
  return j;
}

std::map<std::string, double> scores_from_json(const json& j) {
  std::map<std::string, double> m;
  for (const auto& [k, v] : j.items()) m[k] = v.get<double>();
  return m;
}

json hyperparam_value(const MergeSpec& s) {
  switch (s.method) {
    case MergeMethod::interpolation: return s.alpha;
    case MergeMethod::modality_arithmetic: return s.lambda;
    case MergeMethod::regmean: return s.gamma;
  }
  return nullptr;
}

}  // namespace

std::string merge_report_json(const MergeSpec& spec, std::span<const EntryReport> report) {
  json j;
  j["spec"] = spec_json(spec);
  json entries = json::array();
  for (const EntryReport& r : report) {
    json e;
    e["name"] = r.name;
    e["action"] = r.action;
    json coeffs = json::object();
    for (const auto& [m, c] : r.coefficients) coeffs[std::string(to_string(m))] = c;
    e["coefficients"] = coeffs;
    json sources = json::array();
    for (Modality m : r.sources) sources.push_back(to_string(m));
    e["sources"] = sources;
    e["ridge_applied"] = r.ridge_applied;
    entries.push_back(std::move(e));
  }
  j["entries"] = entries;
  return j.dump(2) + "\n";
}

std::string metric_report_json(const MetricReport& report, const MetricSpec& spec) {
  json j;
  j["truncation_fraction"] = spec.truncation_fraction;
  j["values"] = metric_json(report.values);
  if (!report.pearson.empty()) j["pearson"] = scores_json(report.pearson);
  return j.dump(2) + "\n";
}

std::string metric_report_csv(const MetricReport& report) {
  std::string out = "metric,value,pearson\n";
  for (std::string_view m : kMetricNames) {
    out += std::string(m) + "," + fmt(report.values.get(m)) + ",";
    if (auto it = report.pearson.find(std::string(m)); it != report.pearson.end()) out += fmt(it->second);
    out += "\n";
  }
  return out;
}

std::string sweep_json(const SweepResult& sweep) {
  const ExperimentConfig& c = sweep.config;
  json j;
  j["preset"] = sweep.preset;
  json cfg;
  cfg["total_steps"] = c.total_steps;
  cfg["seed_fractions"] = c.seed_fractions;
  cfg["seeds"] = c.seeds;
  cfg["fine_tune_steps"] = c.fine_tune_steps;
  cfg["lr"] = c.lr;
  cfg["batch_size"] = c.batch_size;
  cfg["task_seed"] = c.task_seed;
  cfg["eval_samples"] = c.eval.samples;
  cfg["model"] = {{"d_model", c.model.d_model}, {"n_heads", c.model.n_heads}, {"n_layers", c.model.n_layers},
                  {"n_fusion", c.model.n_fusion}, {"ffn_mult", c.model.ffn_mult}, {"vocab_v", c.model.vocab_v},
                  {"vocab_l", c.model.vocab_l}, {"seq_len", c.model.seq_len}};
  j["config"] = cfg;

  json cells = json::array();
  for (const CellResult& cell : sweep.cells) {
    json e;
    e["fraction"] = cell.fraction;
    e["variant"] = cell.variant;
    e["spec"] = spec_json(cell.spec);
    e["seed"] = cell.seed;
    e["diverged"] = cell.diverged;
    if (cell.diverged) e["error"] = cell.error;
    e["before"] = scores_json(cell.before);
    e["after_raw"] = scores_json(cell.after_raw);
    e["after"] = scores_json(cell.after);
    e["drop"] = scores_json(cell.drop);
    e["raw_drop"] = scores_json(cell.raw_drop);
    e["mean_drop"] = cell.mean_drop;
    e["metrics"] = cell.metrics ? metric_json(*cell.metrics) : json(nullptr);
    e["train_steps"] = cell.train_steps;
    e["fine_tune_steps"] = cell.fine_tune_steps;
    e["shared_preserved"] = cell.shared_preserved;
    e["merged_entries"] = cell.merged_entries;
    cells.push_back(std::move(e));
  }
  j["cells"] = cells;

  json agg = json::array();
  for (const AggregateRow& r : aggregate(sweep)) {
    agg.push_back({{"fraction", r.fraction}, {"variant", r.variant}, {"spec", r.spec}, {"seeds", r.seeds},
                   {"median_before", r.median_before}, {"median_after", r.median_after},
                   {"median_drop", r.median_drop}, {"median_raw_drop", r.median_raw_drop}});
  }
  j["aggregate"] = agg;

  json corr = json::array();
  std::vector<std::string> labels;
  for (const CellResult& cell : sweep.cells)
    if (std::find(labels.begin(), labels.end(), spec_label(cell.spec)) == labels.end())
      labels.push_back(spec_label(cell.spec));
  for (const std::string& label : labels) {
    json e{{"spec", label}};
    try {
      const SweepCorrelation sc = correlate(sweep, label);
      e["points"] = sc.points;
      e["pooled"] = scores_json(sc.pooled);
      json per_task = json::object();
      for (const auto& [task, m] : sc.per_task) per_task[task] = scores_json(m);
      e["per_task"] = per_task;
    } catch (const Error& err) {
      e["error"] = err.what();
    }
    corr.push_back(std::move(e));
  }
  j["correlation"] = corr;
  return j.dump(2) + "\n";
}

SweepResult parse_sweep_json(const std::string& text) {
  SweepResult out;
  try {
    const json j = json::parse(text);
    out.preset = j.at("preset").get<std::string>();
    const json& cfg = j.at("config");
    out.config.total_steps = cfg.at("total_steps").get<std::size_t>();
    out.config.seed_fractions = cfg.at("seed_fractions").get<std::vector<double>>();
    out.config.seeds = cfg.at("seeds").get<std::vector<std::uint64_t>>();
    out.config.fine_tune_steps = cfg.at("fine_tune_steps").get<std::size_t>();
    for (const json& e : j.at("cells")) {
      CellResult c;
      c.fraction = e.at("fraction").get<double>();
      c.variant = e.at("variant").get<std::string>();
      c.spec = spec_from_json(e.at("spec"));
      c.seed = e.at("seed").get<std::uint64_t>();
      c.diverged = e.at("diverged").get<bool>();
      if (e.contains("error")) c.error = e["error"].get<std::string>();
      c.before = scores_from_json(e.at("before"));
      c.after_raw = scores_from_json(e.at("after_raw"));
      c.after = scores_from_json(e.at("after"));
      c.drop = scores_from_json(e.at("drop"));
      c.raw_drop = scores_from_json(e.at("raw_drop"));
      c.mean_drop = e.at("mean_drop").get<double>();
      if (!e.at("metrics").is_null()) {
        const json& m = e["metrics"];
        c.metrics = MetricValues{m.at("l2").get<double>(), m.at("cosine").get<double>(), m.at("ssd").get<double>(),
                                 m.at("tssd").get<double>()};
      }
      c.train_steps = e.at("train_steps").get<std::size_t>();
      c.fine_tune_steps = e.at("fine_tune_steps").get<std::size_t>();
      c.shared_preserved = e.at("shared_preserved").get<bool>();
      c.merged_entries = e.at("merged_entries").get<std::size_t>();
      out.cells.push_back(std::move(c));
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed sweep report: ") + e.what());
  }
  return out;
}

std::string sweep_csv(const SweepResult& sweep) {
  std::string out = "fraction,method,hyperparam,seed,task,before,after,drop,l2,cosine,ssd,tssd,variant,raw_drop,diverged\n";
  for (const CellResult& c : sweep.cells) {
    std::vector<std::string> tasks;
    for (Route r : kAllRoutes) tasks.emplace_back(task_name(r));
    for (const std::string& task : tasks) {
      auto cell = [&](const std::map<std::string, double>& m) {
        auto it = m.find(task);
        return it == m.end() ? std::string() : fmt(it->second);
      };
      out += fmt(c.fraction) + "," + std::string(to_string(c.spec.method)) + "," + hyperparam_value(c.spec).dump() +
             "," + std::to_string(c.seed) + "," + task + "," + cell(c.before) + "," + cell(c.after) + "," +
             cell(c.drop);
      for (std::string_view m : kMetricNames) out += "," + (c.metrics ? fmt(c.metrics->get(m)) : std::string());
      out += "," + c.variant + "," + cell(c.raw_drop) + "," + (c.diverged ? "1" : "0") + "\n";
    }
  }
  return out;
}

std::string sweep_summary(const SweepResult& sweep) {
  std::ostringstream os;
  char line[256];
  std::snprintf(line, sizeof line, "%-9s %-13s %-30s %5s %8s %8s %8s %8s\n", "fraction", "variant", "spec", "seeds",
                "before", "after", "drop", "raw_drop");
  os << line;
  for (const AggregateRow& r : aggregate(sweep)) {
    std::snprintf(line, sizeof line, "%-9.3g %-13s %-30s %5zu %8.4f %8.4f %8.4f %8.4f\n", r.fraction,
                  r.variant.empty() ? "-" : r.variant.c_str(), r.spec.c_str(), r.seeds, r.median_before,
                  r.median_after, r.median_drop, r.median_raw_drop);
    os << line;
  }
  std::vector<std::string> labels;
  for (const CellResult& c : sweep.cells)
    if (std::find(labels.begin(), labels.end(), spec_label(c.spec)) == labels.end()) labels.push_back(spec_label(c.spec));
  for (const std::string& label : labels) {
    os << "\npearson vs drop, " << label << ":";
    try {
      const SweepCorrelation sc = correlate(sweep, label);
      for (std::string_view m : kMetricNames) os << " " << m << "=" << fmt(sc.pooled.at(std::string(m)));
      os << " (" << sc.points << " points)";
    } catch (const Error& e) {
      os << " undefined (" << e.what() << ")";
    }
  }
  os << "\n";
  return os.str();
}

std::vector<DropObservation> parse_drops_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  auto split = [](const std::string& s) {
    std::vector<std::string> cols;
    std::string cur;
    for (char ch : s) {
      if (ch == ',') {
        cols.push_back(cur);
        cur.clear();
      } else if (ch != '\r') {
        cur += ch;
      }
    }
    cols.push_back(cur);
    return cols;
  };
  if (!std::getline(in, line)) throw DataError("drops CSV is empty");
  const auto header = split(line);
  auto column = [&](std::string_view name) {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    throw DataError("drops CSV lacks a '" + std::string(name) + "' column");
  };
  const std::size_t drop_col = column("drop");
  std::vector<std::size_t> metric_cols;
  for (std::string_view m : kMetricNames) metric_cols.push_back(column(m));

  auto number = [](const std::string& s, std::size_t row) {
    double v = 0.0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size())
      throw DataError("drops CSV row " + std::to_string(row) + ": '" + s + "' is not a number");
    return v;
  };
  std::vector<DropObservation> out;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty() || line == "\r") continue;
    const auto cols = split(line);
    if (cols.size() != header.size())
      throw DataError("drops CSV row " + std::to_string(row) + " has " + std::to_string(cols.size()) + " fields");
    if (cols[drop_col].empty()) continue;  // diverged cell
    if (std::any_of(metric_cols.begin(), metric_cols.end(), [&](std::size_t i) { return cols[i].empty(); }))
      continue;  // nothing custom to measure
    DropObservation d;
    d.context = "row " + std::to_string(row);
    d.drop = number(cols[drop_col], row);
    d.metrics.l2 = number(cols[metric_cols[0]], row);
    d.metrics.cosine = number(cols[metric_cols[1]], row);
    d.metrics.ssd = number(cols[metric_cols[2]], row);
    d.metrics.tssd = number(cols[metric_cols[3]], row);
    out.push_back(d);
  }
  return out;
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw DataError("write failed for '" + path.string() + "'");
}

}  // namespace modmerge
