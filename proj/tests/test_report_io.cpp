#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "modmerge/report_io.hpp"

using namespace modmerge;

namespace {

SweepResult sample_sweep() {
  SweepResult s;
  s.preset = "seed-sweep";
  s.config.seed_fractions = {0.0, 0.5};
  s.config.seeds = {1, 2};
  for (double f : {0.0, 0.5}) {
    for (std::uint64_t seed : {1, 2}) {
      CellResult c;
      c.fraction = f;
      c.seed = seed;
      c.spec.alpha = 0.5;
      c.before = {{"vision", 0.9}, {"language", 0.95}, {"joint", 0.8}};
      c.after = {{"vision", 0.8 + 0.05 * f}, {"language", 0.9}, {"joint", 0.7 + 0.01 * seed}};
      c.after_raw = c.after;
      for (const auto& [k, v] : c.before) {
        c.drop[k] = v - c.after[k];
        c.raw_drop[k] = v - c.after_raw[k];
      }
      c.mean_drop = (c.drop["vision"] + c.drop["language"] + c.drop["joint"]) / 3.0;
      c.metrics = MetricValues{1.0 - f + 0.1 * seed, 0.2 - 0.1 * f, 0.3 + 0.05 * f + 0.01 * seed, 0.4 - 0.2 * f};
      c.train_steps = 2000;
      c.fine_tune_steps = 50;
      c.merged_entries = 64;
      s.cells.push_back(c);
    }
  }
  CellResult d;
  d.fraction = 0.5;
  d.seed = 3;
  d.spec.alpha = 0.5;
  d.diverged = true;
  d.error = "non-finite loss";
  s.cells.push_back(d);
  return s;
}

}  // namespace

TEST_CASE("sweep json round-trips cells") {
  const SweepResult s = sample_sweep();
  const SweepResult back = parse_sweep_json(sweep_json(s));
  CHECK(back.preset == s.preset);
  REQUIRE(back.cells.size() == s.cells.size());
  for (std::size_t i = 0; i < s.cells.size(); ++i) {
    const CellResult& a = s.cells[i];
    const CellResult& b = back.cells[i];
    CHECK(a.fraction == b.fraction);
    CHECK(a.seed == b.seed);
    CHECK(a.diverged == b.diverged);
    CHECK(a.error == b.error);
    CHECK(a.before == b.before);
    CHECK(a.after == b.after);
    CHECK(a.drop == b.drop);
    CHECK(a.mean_drop == b.mean_drop);
    CHECK(a.metrics.has_value() == b.metrics.has_value());
    if (a.metrics) CHECK(a.metrics->tssd == b.metrics->tssd);
    CHECK(spec_label(a.spec) == spec_label(b.spec));
  }
  CHECK(sweep_json(back).find("\"cells\"") != std::string::npos);
}

TEST_CASE("sweep json carries aggregates and correlations") {
  const auto j = nlohmann::json::parse(sweep_json(sample_sweep()));
  CHECK(j.at("aggregate").size() == 2);
  CHECK(j.at("aggregate")[1].at("seeds") == 2);
  REQUIRE(j.at("correlation").size() == 1);
  CHECK(j.at("correlation")[0].at("points") == 4);
  CHECK(j.at("correlation")[0].at("pooled").contains("tssd"));
}

TEST_CASE("malformed sweep json is a data error") {
  CHECK_THROWS_AS(parse_sweep_json("{"), DataError);
  CHECK_THROWS_AS(parse_sweep_json("{\"preset\": 1}"), DataError);
}

TEST_CASE("sweep csv has one row per cell and task") {
  const SweepResult s = sample_sweep();
  const std::string csv = sweep_csv(s);
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  CHECK(line == "fraction,method,hyperparam,seed,task,before,after,drop,l2,cosine,ssd,tssd,variant,raw_drop,diverged");
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    ++rows;
    CHECK(std::count(line.begin(), line.end(), ',') == 14);
  }
  CHECK(rows == 3 * s.cells.size());

  const auto drops = parse_drops_csv(csv);
  CHECK(drops.size() == 3 * (s.cells.size() - 1));  // the diverged cell has no drop
  CHECK(drops.front().drop == doctest::Approx(0.9 - 0.8));
}

TEST_CASE("drops csv parsing") {
  const auto d = parse_drops_csv("tssd,ssd,cosine,l2,drop\n0.1,0.2,0.3,4,0.05\r\n\n0.2,0.3,0.4,5,0.07\n");
  REQUIRE(d.size() == 2);
  CHECK(d[1].metrics.l2 == 5.0);
  CHECK(d[1].metrics.tssd == 0.2);
  CHECK(d[1].drop == 0.07);
  CHECK_THROWS_AS(parse_drops_csv("l2,cosine,ssd,drop\n1,2,3,4\n"), DataError);
  CHECK_THROWS_AS(parse_drops_csv("l2,cosine,ssd,tssd,drop\n1,2,x,4,5\n"), DataError);
  CHECK_THROWS_AS(parse_drops_csv("l2,cosine,ssd,tssd,drop\n1,2,3\n"), DataError);
  CHECK_THROWS_AS(parse_drops_csv(""), DataError);
}

TEST_CASE("metric report renderings") {
  MetricReport r;
  r.values = MetricValues{1.5, 0.25, 0.125, 0.5};
  const auto j = nlohmann::json::parse(metric_report_json(r, MetricSpec{}));
  CHECK(j.at("values").at("l2") == 1.5);
  CHECK_FALSE(j.contains("pearson"));
  CHECK(metric_report_csv(r) == "metric,value,pearson\nl2,1.5,\ncosine,0.25,\nssd,0.125,\ntssd,0.5,\n");
  r.pearson = {{"l2", 0.5}, {"cosine", -0.25}, {"ssd", 0.0}, {"tssd", 1.0}};
  CHECK(nlohmann::json::parse(metric_report_json(r, MetricSpec{})).at("pearson").at("cosine") == -0.25);
}

TEST_CASE("merge report json") {
  MergeSpec spec;
  spec.share_mask = {ParamGroup::ffn};
  std::vector<EntryReport> report{{"layers.0.attn.wq", "interpolate", {{Modality::vision, 0.75}, {Modality::language, 0.25}},
                                   {Modality::vision, Modality::language}, false},
                                  {"layers.0.ffn.w1", "shared-copy", {}, {Modality::vision}, false}};
  const auto j = nlohmann::json::parse(merge_report_json(spec, report));
  CHECK(j.at("spec").at("method") == "interpolation");
  CHECK(j.at("spec").at("share_mask")[0] == "ffn");
  CHECK(j.at("entries").size() == 2);
  CHECK(j.at("entries")[0].at("coefficients").at("vision") == 0.75);
  CHECK(j.at("entries")[1].at("action") == "shared-copy");
}
