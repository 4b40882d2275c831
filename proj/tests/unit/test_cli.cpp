#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>

#include "json.hpp"
#include "support/oracles.hpp"
#include "wcox/cli.hpp"

using namespace wcox;
namespace fs = std::filesystem;
using Json = nlohmann::json;

namespace {

fs::path tmp_dir() {
  const char* env = std::getenv("WCOX_TEST_TMP");
  fs::path p = env ? fs::path(env) : fs::temp_directory_path() / "wcox_cli_tests";
  fs::create_directories(p);
  return p;
}

std::string tmp(const std::string& name) { return (tmp_dir() / name).string(); }

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "wcox");
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_cohort(const std::string& path, const Cohort& c, bool factorial_columns = false) {
  std::ofstream os(path);
  os << std::setprecision(17) << "time,event," << (factorial_columns ? "cell,z1,z2" : "treatment");
  for (const auto& name : c.covariate_names) os << ',' << name;
  os << '\n';
  for (Eigen::Index i = 0; i < c.n(); ++i) {
    os << c.time[i] << ',' << c.event[i] << ',';
    if (factorial_columns) {
      const auto [z1, z2] = decode_factorial(c.treatment[i]);
      os << c.treatment[i] << ',' << z1 << ',' << z2;
    } else {
      os << c.treatment_labels[static_cast<std::size_t>(c.treatment[i])];
    }
    for (Eigen::Index k = 0; k < c.p(); ++k) os << ',' << c.covariates(i, k);
    os << '\n';
  }
}

const Calibration& quick_calibration(Setting s) {
  static std::map<Setting, Calibration> cache;
  auto it = cache.find(s);
  if (it == cache.end()) {
    ScenarioConfig cfg;
    cfg.setting = s;
    cfg.calibration_units = 100'000;
    it = cache.emplace(s, calibrate(cfg)).first;
  }
  return it->second;
}

Cohort simulated(Setting s, Eigen::Index n, std::uint64_t seed) {
  ScenarioConfig cfg;
  cfg.setting = s;
  cfg.n = n;
  return generate_replicate(cfg, quick_calibration(s), seed).cohort;
}

std::vector<std::vector<std::string>> csv_rows(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) {
    std::vector<std::string> f;
    std::stringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) f.push_back(cell);
    rows.push_back(f);
  }
  return rows;
}

/// Tag-balance check: every element opened is closed in order.
bool well_formed_xml(const std::string& s) {
  std::vector<std::string> stack;
  const std::regex tag(R"(<(/?)([A-Za-z][\w:-]*)[^>]*?(/?)>)");
  for (auto it = std::sregex_iterator(s.begin(), s.end(), tag); it != std::sregex_iterator(); ++it) {
    const auto& m = *it;
    if (m[3].length()) continue;
    if (m[1].length()) {
      if (stack.empty() || stack.back() != m[2].str()) return false;
      stack.pop_back();
    } else {
      stack.push_back(m[2].str());
    }
  }
  return stack.empty();
}

const std::vector<std::string> kCov{"--covariates", "x1,x2,x3,x4,x5,x6"};

std::vector<std::string> with(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

}  // namespace

TEST(CliFit, FourUnitCohortUnitWeights) {
  write_cohort(tmp("four.csv"), oracle::four_unit_cohort());
  const Result r = run({"fit", "--data", tmp("four.csv"), "--time", "time", "--event", "event", "--treatment",
                        "treatment", "--reference", "0", "--weight-scheme", "unit"});
  ASSERT_EQ(r.code, 0) << r.err;
  const Json j = Json::parse(r.out);
  EXPECT_NEAR(j["tau"][0].get<double>(), oracle::four_unit_root(), 1e-9);
  EXPECT_NEAR(j["hr"][0].get<double>(), (std::sqrt(5.0) - 1.0) / 2.0, 1e-9);
  EXPECT_EQ(j["contrasts"][0]["vs"], "0");
}

TEST(CliFit, FactorialFlagsLabelThreeContrasts) {
  const Cohort c = simulated(Setting::factorial, 600, 21);
  write_cohort(tmp("fact.csv"), c, true);
  const std::vector<std::string> base{"fit", "--data", tmp("fact.csv"), "--time", "time", "--event", "event"};
  const Result f = run(with(with(base, {"--z1", "z1", "--z2", "z2"}), kCov));
  ASSERT_EQ(f.code, 0) << f.err;
  const Json jf = Json::parse(f.out);
  ASSERT_EQ(jf["contrasts"].size(), 3u);
  const std::vector<std::string> want{"(1,0)", "(0,1)", "(1,1)"};
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_EQ(jf["contrasts"][k]["label"], want[k]);
    EXPECT_EQ(jf["contrasts"][k]["vs"], "(0,0)");
  }
  // the same cells given as a four-level treatment column
  const Result m = run(with(with(base, {"--treatment", "cell", "--reference", "0"}), kCov));
  ASSERT_EQ(m.code, 0) << m.err;
  const Json jm = Json::parse(m.out);
  for (const auto& cf : jf["contrasts"])
    for (const auto& cm : jm["contrasts"])
      if (factorial_labels()[std::stoul(cm["label"].get<std::string>())] == cf["label"]) {
        EXPECT_NEAR(cm["tau"].get<double>(), cf["tau"].get<double>(), 1e-8);
        EXPECT_NEAR(cm["se"].get<double>(), cf["se"].get<double>(), 1e-7);
      }
}

TEST(CliFit, MissingColumnIsValidationError) {
  write_cohort(tmp("four.csv"), oracle::four_unit_cohort());
  const Result r = run({"fit", "--data", tmp("four.csv"), "--time", "time", "--event", "status", "--treatment",
                        "treatment"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("status"), std::string::npos);
  EXPECT_TRUE(r.out.empty());
}

TEST(CliFit, BadFlagsAreValidationErrors) {
  write_cohort(tmp("four.csv"), oracle::four_unit_cohort());
  const std::vector<std::string> base{"fit", "--data", tmp("four.csv"), "--time", "time", "--event", "event",
                                      "--treatment", "treatment"};
  EXPECT_EQ(run(with(base, {"--weight-scheme", "magic"})).code, 2);
  EXPECT_EQ(run(with(base, {"--variance", "jackknife"})).code, 2);
  EXPECT_EQ(run(with(base, {"--reference", "7"})).code, 2);
  EXPECT_EQ(run({"fit", "--data", tmp("nope.csv"), "--time", "t", "--event", "e", "--treatment", "z"}).code, 2);
}

TEST(CliFit, SeparationIsNonconvergence) {
  std::ofstream(tmp("sep.csv")) << "time,event,z\n1,1,a\n2,1,b\n";
  const Result r = run({"fit", "--data", tmp("sep.csv"), "--time", "time", "--event", "event", "--treatment", "z",
                        "--weight-scheme", "unit"});
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("separation"), std::string::npos);
}

TEST(CliFit, TrimmingAndBootstrapReport) {
  const Cohort c = simulated(Setting::multi3, 500, 22);
  write_cohort(tmp("multi.csv"), c);
  const Result r = run(with({"fit", "--data", tmp("multi.csv"), "--time", "time", "--event", "event", "--treatment",
                             "treatment", "--reference", "0", "--weight-scheme", "ipw", "--trim", "0.05", "--variance",
                             "bootstrap:40", "--seed", "5"},
                            kCov));
  ASSERT_EQ(r.code, 0) << r.err;
  const Json j = Json::parse(r.out);
  EXPECT_EQ(j["variance_method"], "bootstrap");
  EXPECT_EQ(j["trimming"]["threshold"], 0.05);
  EXPECT_EQ(j["n"].get<int>() + static_cast<int>(j["trimming"]["removed_rows"].size()), 500);
  EXPECT_EQ(j["bootstrap"]["requested"], 40);
  for (const auto& ct : j["contrasts"]) EXPECT_LT(ct["ci_low"].get<double>(), ct["ci_high"].get<double>());
}

TEST(CliFit, JsonRoundTripsEveryNumber) {
  const Cohort c = simulated(Setting::multi3, 400, 23);
  write_cohort(tmp("multi.csv"), c);
  const Result r = run(with({"fit", "--data", tmp("multi.csv"), "--time", "time", "--event", "event", "--treatment",
                             "treatment", "--weight-scheme", "ow"},
                            kCov));
  ASSERT_EQ(r.code, 0) << r.err;
  const Json j = Json::parse(r.out);
  // every printed literal parses back to the double the parser produced
  const std::regex num(R"(-?\d+\.\d+(?:[eE][-+]?\d+)?)");
  const std::string bare = std::regex_replace(r.out, std::regex(R"("(?:[^"\\]|\\.)*")"), "\"\"");
  std::vector<double> printed;
  for (auto it = std::sregex_iterator(bare.begin(), bare.end(), num); it != std::sregex_iterator(); ++it)
    printed.push_back(std::stod(it->str()));
  std::vector<double> parsed;
  std::function<void(const Json&)> walk = [&](const Json& v) {
    if (v.is_number_float()) parsed.push_back(v.get<double>());
    if (v.is_structured())
      for (const auto& x : v) walk(x);
  };
  walk(Json::parse(r.out));
  ASSERT_FALSE(parsed.empty());
  std::sort(printed.begin(), printed.end());
  std::sort(parsed.begin(), parsed.end());
  ASSERT_EQ(printed.size(), parsed.size());
  for (std::size_t k = 0; k < printed.size(); ++k) EXPECT_EQ(printed[k], parsed[k]) << k;
  EXPECT_EQ(Json::parse(j.dump()), j);
}

TEST(CliKm, UnitSchemeMatchesClassicalKm) {
  const Cohort c = simulated(Setting::multi3, 200, 24);
  write_cohort(tmp("km.csv"), c);
  const std::vector<std::string> base{"km", "--data", tmp("km.csv"), "--time", "time", "--event", "event",
                                      "--treatment", "treatment", "--reference", "0"};
  const Result u = run(with(base, {"--weight-scheme", "unit", "--out-csv", tmp("km_unit.csv")}));
  ASSERT_EQ(u.code, 0) << u.err;
  const Result o = run(with(with(base, {"--weight-scheme", "ow", "--out-csv", tmp("km_ow.csv")}), kCov));
  ASSERT_EQ(o.code, 0) << o.err;
  EXPECT_NE(slurp(tmp("km_unit.csv")), slurp(tmp("km_ow.csv")));
  EXPECT_TRUE(fs::exists(tmp("km_unit.csv") + ".manifest.json"));

  const auto rows = csv_rows(slurp(tmp("km_unit.csv")));
  for (int g = 0; g < 3; ++g) {
    std::vector<double> t, w;
    std::vector<int> e;
    for (Eigen::Index i = 0; i < c.n(); ++i)
      if (c.treatment[i] == g) {
        t.push_back(c.time[i]);
        e.push_back(c.event[i]);
      }
    std::vector<oracle::Rational> ones(t.size(), 1);
    const auto ref = oracle::km_rational(t, e, ones);
    std::vector<std::pair<double, double>> got;
    for (std::size_t r = 1; r < rows.size(); ++r)
      if (rows[r][0] == std::to_string(g) && std::stod(rows[r][1]) > 0.0)
        got.emplace_back(std::stod(rows[r][1]), std::stod(rows[r][2]));
    ASSERT_EQ(got.size(), ref.size());
    for (std::size_t l = 0; l < ref.size(); ++l) {
      EXPECT_EQ(got[l].first, ref[l].time);
      EXPECT_NEAR(got[l].second, static_cast<double>(ref[l].survival), 1e-14);
    }
  }
}

TEST(CliKm, CumulativeAndSvg) {
  const Cohort c = simulated(Setting::multi3, 200, 25);
  write_cohort(tmp("km.csv"), c);
  const Result r = run({"km", "--data", tmp("km.csv"), "--time", "time", "--event", "event", "--treatment",
                        "treatment", "--weight-scheme", "unit", "--cumulative", "--out-svg", tmp("km.svg")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = csv_rows(r.out);
  ASSERT_GT(rows.size(), 3u);
  EXPECT_EQ(rows[0][3], "cum_risk");
  for (std::size_t k = 1; k < rows.size(); ++k)
    EXPECT_NEAR(std::stod(rows[k][3]), 1.0 - std::stod(rows[k][2]), 1e-15);
  const std::string svg = slurp(tmp("km.svg"));
  EXPECT_TRUE(well_formed_xml(svg));
  const std::regex poly("<polyline");
  EXPECT_EQ(std::distance(std::sregex_iterator(svg.begin(), svg.end(), poly), std::sregex_iterator()), 3);
}

TEST(CliBalance, TwoArmOverlapWeightsBalanceExactly) {
  const Cohort c3 = simulated(Setting::multi3, 800, 26);
  std::vector<Eigen::Index> keep;
  for (Eigen::Index i = 0; i < c3.n(); ++i)
    if (c3.treatment[i] != 2) keep.push_back(i);
  Cohort c2 = select_units(c3, keep);
  c2.treatment_labels.pop_back();
  write_cohort(tmp("two.csv"), c2);
  const Result r = run(with({"balance", "--data", tmp("two.csv"), "--time", "time", "--event", "event",
                             "--treatment", "treatment", "--weight-scheme", "ow", "--histogram", tmp("hist.csv")},
                            kCov));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = csv_rows(r.out);
  ASSERT_EQ(rows[0].size(), 9u);
  EXPECT_EQ(rows[0][8], "smd_weighted");
  ASSERT_EQ(rows.size(), 7u);
  for (std::size_t k = 1; k < rows.size(); ++k) EXPECT_LE(std::abs(std::stod(rows[k][8])), 1e-6) << rows[k][0];

  const auto hist = csv_rows(slurp(tmp("hist.csv")));
  long total = 0;
  for (std::size_t k = 1; k < hist.size(); ++k) total += std::stol(hist[k][4]);
  EXPECT_EQ(total, 2 * c2.n());
}

TEST(CliBalance, ThreeArmOverlapWeightsReduceImbalance) {
  write_cohort(tmp("multi.csv"), simulated(Setting::multi3, 800, 27));
  const Result r = run(with({"balance", "--data", tmp("multi.csv"), "--time", "time", "--event", "event",
                             "--treatment", "treatment", "--weight-scheme", "ow"},
                            kCov));
  ASSERT_EQ(r.code, 0) << r.err;
  double un = 0.0, wt = 0.0;
  for (const auto& row : csv_rows(r.out))
    if (row[0] != "covariate") {
      un = std::max(un, std::abs(std::stod(row[7])));
      wt = std::max(wt, std::abs(std::stod(row[8])));
    }
  EXPECT_LT(wt, 0.5 * un);
}

TEST(CliSimulate, ValidationAndDeterminism) {
  EXPECT_EQ(run({"simulate", "--replicates", "0"}).code, 2);
  EXPECT_EQ(run({"simulate", "--psi", "-1"}).code, 2);
  const std::vector<std::string> args{"simulate",      "--setting", "multi3", "--psi",         "1",
                                      "--censoring",   "0.25",      "--n",    "200",           "--replicates",
                                      "3",             "--seed",    "7",      "--bootstrap-B", "5",
                                      "--estimand-M",  "1000000"};
  const Result a = run(with(args, {"--out-csv", tmp("sim_a.csv")}));
  ASSERT_EQ(a.code, 0) << a.err;
  const Result b = run(with(args, {"--out-csv", tmp("sim_b.csv")}));
  ASSERT_EQ(b.code, 0) << b.err;
  EXPECT_EQ(slurp(tmp("sim_a.csv")), slurp(tmp("sim_b.csv")));
  EXPECT_EQ(a.out, b.out);
  EXPECT_NE(a.out.find("OW"), std::string::npos);
}

TEST(CliEstimand, SmallMIsRejected) {
  const Result r = run({"estimand", "--setting", "multi3", "--scheme", "ipw", "--M", "100"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("M too small"), std::string::npos);
}

TEST(CliMisc, HelpVersionAndUnknownCommand) {
  EXPECT_EQ(run({"--help"}).code, 0);
  EXPECT_EQ(run({"--version"}).code, 0);
  EXPECT_EQ(run({"frobnicate"}).code, 2);
}
