#include "cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "io.hpp"
#include "wcox/wcox.hpp"

#ifndef WCOX_VERSION
#define WCOX_VERSION "0.0.0"
#endif

namespace wcox::cli {

namespace {

using Clock = std::chrono::steady_clock;

// ---------------------------------------------------------------------------
// Shared option blocks

struct CohortArgs {
  std::string data;
  std::string time;
  std::string event;
  std::string treatment;
  std::string z1;
  std::string z2;
  std::string covariates;
  std::string reference;
};

struct WeightArgs {
  std::string scheme = "ow";
  std::optional<double> trim;
  bool no_refit = false;
};

void add_cohort_options(CLI::App* cmd, CohortArgs& a) {
  cmd->add_option("--data", a.data, "input CSV file (header row required)")->required();
  cmd->add_option("--time", a.time, "observed time column")->required();
  cmd->add_option("--event", a.event, "event indicator column (1 = event, 0 = censored)")->required();
  cmd->add_option("--treatment", a.treatment, "treatment label column");
  cmd->add_option("--z1", a.z1, "first binary factor (factorial design)");
  cmd->add_option("--z2", a.z2, "second binary factor (factorial design)");
  cmd->add_option("--covariates", a.covariates, "comma-separated covariate columns");
  cmd->add_option("--reference", a.reference, "reference treatment label");
}

void add_weight_options(CLI::App* cmd, WeightArgs& w) {
  cmd->add_option("--weight-scheme", w.scheme, "ipw, ow, att:<label> or unit")->capture_default_str();
  cmd->add_option("--trim", w.trim, "drop units whose smallest propensity is below this value");
  cmd->add_flag("--no-refit", w.no_refit, "keep the original propensity fit after trimming");
}

struct LoadedCohort {
  Cohort cohort;
  InputFile input;
  bool factorial = false;
};

LoadedCohort load_cohort(const CohortArgs& a) {
  const bool factorial = !a.z1.empty() || !a.z2.empty();
  if (factorial && (a.z1.empty() || a.z2.empty())) throw ValidationError("--z1 and --z2 must be given together");
  if (factorial && !a.treatment.empty()) throw ValidationError("use either --treatment or --z1/--z2, not both");
  if (!factorial && a.treatment.empty()) throw ValidationError("missing --treatment (or --z1/--z2)");

  const CsvTable t = read_csv(a.data);
  const std::size_t ct = t.column(a.time);
  const std::size_t ce = t.column(a.event);
  std::size_t cz = 0, cz1 = 0, cz2 = 0;
  if (factorial) {
    cz1 = t.column(a.z1);
    cz2 = t.column(a.z2);
  } else {
    cz = t.column(a.treatment);
  }
  const auto cov_names = split_list(a.covariates);
  std::vector<std::size_t> cc;
  for (const auto& name : cov_names) cc.push_back(t.column(name));

  RawRows raw;
  raw.covariate_names = cov_names;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& row = t.rows[r];
    raw.time.push_back(parse_number(row[ct], a.time, r + 1));
    raw.event.push_back(parse_number(row[ce], a.event, r + 1));
    if (factorial) {
      const double z1 = parse_number(row[cz1], a.z1, r + 1);
      const double z2 = parse_number(row[cz2], a.z2, r + 1);
      if ((z1 != 0.0 && z1 != 1.0) || (z2 != 0.0 && z2 != 1.0))
        throw ValidationError("factorial treatments must be 0/1 at row " + std::to_string(r + 1), {r + 1});
      raw.treatment.push_back(factorial_label(encode_factorial(static_cast<int>(z1), static_cast<int>(z2))));
    } else {
      raw.treatment.push_back(row[cz]);
    }
    std::vector<double> x;
    for (std::size_t k = 0; k < cc.size(); ++k) x.push_back(parse_number(row[cc[k]], cov_names[k], r + 1));
    if (!cc.empty()) raw.covariates.push_back(std::move(x));
  }

  if (factorial) raw.level_order = factorial_labels();
  if (!a.reference.empty()) {
    if (std::find(raw.treatment.begin(), raw.treatment.end(), a.reference) == raw.treatment.end())
      throw ValidationError("treatment level '" + a.reference + "' has no units");
    if (raw.level_order) {
      auto& lv = *raw.level_order;
      const auto it = std::find(lv.begin(), lv.end(), a.reference);
      std::rotate(lv.begin(), it, it + 1);
    } else {
      raw.reference = a.reference;
    }
  }
  return {validate_cohort(raw), describe_input(a.data), factorial};
}

WeightScheme parse_scheme(const std::string& s, const Cohort& c) {
  if (s == "ipw") return WeightScheme::ipw();
  if (s == "ow") return WeightScheme::ow();
  if (s == "unit") return WeightScheme::unit();
  if (s.rfind("att:", 0) == 0) {
    const std::string label = s.substr(4);
    for (int j = 0; j < c.levels(); ++j)
      if (c.treatment_labels[static_cast<std::size_t>(j)] == label) return WeightScheme::att(j);
    throw ValidationError("ATT target level '" + label + "' is not a treatment level");
  }
  throw ValidationError("unknown weight scheme '" + s + "' (expected ipw, ow, att:<label> or unit)");
}

std::string scheme_label(const WeightScheme& s, const Cohort& c) {
  if (s.kind == SchemeKind::att) return "att:" + c.treatment_labels[static_cast<std::size_t>(s.att_level)];
  return s.name();
}

struct Weighted {
  Cohort cohort;
  WeightScheme scheme;
  std::optional<PropensityFit> ps;
  std::optional<TrimReport> trim;
  std::vector<Eigen::Index> trimmed_rows;  // 1-based input rows removed
  WeightSet weights;
};

Weighted apply_weights(Cohort cohort, const WeightArgs& w) {
  Weighted out;
  out.scheme = parse_scheme(w.scheme, cohort);
  if (out.scheme.depends_on_propensity() || w.trim) out.ps = fit_multinomial_logit(cohort);
  if (w.trim) {
    TrimResult tr = trim(cohort, *out.ps, *w.trim, !w.no_refit);
    for (auto id : tr.report.removed_ids) out.trimmed_rows.push_back(id + 1);
    cohort = std::move(tr.cohort);
    out.ps = std::move(tr.fit);
    out.trim = std::move(tr.report);
  }
  out.weights = out.scheme.depends_on_propensity() ? compute_weights(*out.ps, cohort.treatment, out.scheme)
                                                   : unit_weights(cohort.n());
  if (w.trim) out.weights.threshold = *w.trim;
  out.cohort = std::move(cohort);
  return out;
}

Json cohort_config(const CohortArgs& a) {
  Json j;
  j["data"] = a.data;
  j["time"] = a.time;
  j["event"] = a.event;
  if (a.treatment.empty()) {
    j["z1"] = a.z1;
    j["z2"] = a.z2;
  } else {
    j["treatment"] = a.treatment;
  }
  j["covariates"] = split_list(a.covariates);
  j["reference"] = a.reference.empty() ? Json(nullptr) : Json(a.reference);
  return j;
}

Json matrix_json(const Eigen::MatrixXd& m) {
  Json rows = Json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    Json r = Json::array();
    for (Eigen::Index k = 0; k < m.cols(); ++k) r.push_back(m(i, k));
    rows.push_back(r);
  }
  return rows;
}

std::string dump(const Json& j) { return j.dump(2) + "\n"; }

std::optional<double> elapsed(bool timing, Clock::time_point start) {
  if (!timing) return std::nullopt;
  return std::chrono::duration<double>(Clock::now() - start).count();
}

void emit(const std::string& text, const std::string& path, std::ostream& out) {
  if (path.empty())
    out << text;
  else
    write_text(path, text);
}

std::string format_fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

// ---------------------------------------------------------------------------
// fit

struct FitArgs {
  CohortArgs cohort;
  WeightArgs weights;
  std::string variance = "robust";
  unsigned long long seed = 1;
  double level = 0.95;
  std::string out;
  bool timing = false;
};

int cmd_fit(const FitArgs& a, std::ostream& out) {
  const auto start = Clock::now();
  LoadedCohort lc = load_cohort(a.cohort);
  Weighted wt = apply_weights(std::move(lc.cohort), a.weights);
  const Cohort& c = wt.cohort;

  MhrEstimate est = fit_mhr(c, wt.weights.weights);
  std::optional<BootstrapResult> boot;
  int bootstrap_B = 0;
  if (a.variance == "robust") {
    const Eigen::MatrixXd cov = wt.ps && wt.scheme.depends_on_propensity()
                                    ? sandwich_covariance(c, *wt.ps, wt.scheme, est.tau).cov_tau
                                    : robust_covariance_fixed_weights(c, wt.weights.weights, est.tau);
    attach_covariance(est, cov, VarianceMethod::robust, a.level);
  } else if (a.variance == "bootstrap" || a.variance.rfind("bootstrap:", 0) == 0) {
    bootstrap_B = 200;
    if (a.variance.size() > 10) {
      try {
        bootstrap_B = std::stoi(a.variance.substr(10));
      } catch (const std::logic_error&) {
        throw ValidationError("bad bootstrap replicate count in --variance " + a.variance);
      }
    }
    BootstrapOptions bo;
    bo.replicates = bootstrap_B;
    bo.seed = a.seed;
    bo.threads = worker_count();
    boot = bootstrap_covariance(c, wt.scheme, bo);
    attach_covariance(est, boot->cov_tau, VarianceMethod::bootstrap, a.level);
  } else if (a.variance == "model") {
    attach_covariance(est, information_covariance(est), VarianceMethod::model, a.level);
  } else if (a.variance != "none") {
    throw ValidationError("unknown variance method '" + a.variance + "' (expected robust, bootstrap:<B>, model or none)");
  }

  Json j;
  j["command"] = "fit";
  j["n"] = c.n();
  j["events"] = c.event_count();
  j["weight_scheme"] = scheme_label(wt.scheme, c);
  j["reference"] = c.treatment_labels.front();
  j["levels"] = c.treatment_labels;
  Json contrasts = Json::array();
  for (int k = 0; k < c.contrasts(); ++k) {
    Json e;
    e["label"] = c.treatment_labels[static_cast<std::size_t>(k + 1)];
    e["vs"] = c.treatment_labels.front();
    e["tau"] = est.tau[k];
    e["hr"] = est.hr[k];
    const bool has_var = est.variance_method != VarianceMethod::none;
    e["se"] = has_var ? Json(est.se[k]) : Json(nullptr);
    e["ci_low"] = has_var ? Json(est.ci_low[k]) : Json(nullptr);
    e["ci_high"] = has_var ? Json(est.ci_high[k]) : Json(nullptr);
    contrasts.push_back(e);
  }
  j["contrasts"] = contrasts;
  j["tau"] = std::vector<double>(est.tau.data(), est.tau.data() + est.tau.size());
  j["hr"] = std::vector<double>(est.hr.data(), est.hr.data() + est.hr.size());
  j["variance_method"] = to_string(est.variance_method);
  j["level"] = a.level;
  j["covariance"] = est.variance_method == VarianceMethod::none ? Json(nullptr) : matrix_json(est.cov_tau);

  Json conv;
  conv["converged"] = est.converged;
  conv["iterations"] = est.iterations;
  conv["score_norm"] = est.score_norm;
  conv["loglik"] = est.loglik;
  if (wt.ps) {
    conv["propensity"] = {{"converged", wt.ps->converged},
                          {"iterations", wt.ps->iterations},
                          {"gradient_norm", wt.ps->final_gradient_norm},
                          {"ridge_applied", wt.ps->ridge_applied}};
  }
  j["convergence"] = conv;

  if (boot) {
    Json reasons = Json::object();
    for (const auto& [k, v] : boot->drop_reasons) reasons[k] = v;
    j["bootstrap"] = {{"requested", boot->requested}, {"dropped", boot->dropped}, {"drop_reasons", reasons}};
  }

  if (wt.trim) {
    Json per = Json::object();
    for (std::size_t g = 0; g < wt.trim->removed_per_group.size(); ++g)
      per[c.treatment_labels[g]] = wt.trim->removed_per_group[g];
    j["trimming"] = {{"threshold", wt.trim->threshold},
                     {"removed", wt.trim->removed_ids.size()},
                     {"removed_per_group", per},
                     {"removed_rows", wt.trimmed_rows},
                     {"refit", wt.trim->refit}};
  } else {
    j["trimming"] = nullptr;
  }

  if (c.p() > 0) {
    const BalanceReport bal = balance_table(c, wt.weights.weights);
    double max_unw = 0.0;
    for (const auto& e : bal.entries) max_unw = std::max(max_unw, std::abs(e.unweighted));
    Json rows = Json::array();
    for (const auto& e : bal.entries)
      rows.push_back({{"covariate", bal.covariate_names[static_cast<std::size_t>(e.covariate)]},
                      {"group", bal.group_labels[static_cast<std::size_t>(e.group_a)]},
                      {"versus", bal.group_labels[static_cast<std::size_t>(e.group_b)]},
                      {"smd_unweighted", e.unweighted},
                      {"smd_weighted", e.weighted}});
    j["balance"] = {{"max_abs_smd_unweighted", max_unw}, {"max_abs_smd_weighted", bal.max_abs_weighted()},
                    {"pairs", rows}};
  } else {
    j["balance"] = nullptr;
  }

  Json cfg;
  cfg["cohort"] = cohort_config(a.cohort);
  cfg["weight_scheme"] = a.weights.scheme;
  cfg["trim"] = a.weights.trim ? Json(*a.weights.trim) : Json(nullptr);
  cfg["refit_after_trim"] = !a.weights.no_refit;
  cfg["variance"] = a.variance;
  cfg["level"] = a.level;
  cfg["threads_affect_output"] = false;
  j["manifest"] = make_manifest("fit", cfg, {lc.input}, a.seed, elapsed(a.timing, start));
  emit(dump(j), a.out, out);
  return kOk;
}

// ---------------------------------------------------------------------------
// km

struct KmArgs {
  CohortArgs cohort;
  WeightArgs weights;
  std::string out_csv;
  std::string out_svg;
  bool cumulative = false;
  bool timing = false;
};

int cmd_km(const KmArgs& a, std::ostream& out) {
  const auto start = Clock::now();
  LoadedCohort lc = load_cohort(a.cohort);
  Weighted wt = apply_weights(std::move(lc.cohort), a.weights);
  const auto curves = weighted_km_all(wt.cohort, wt.weights.weights);
  std::ostringstream csv;
  write_km_csv(csv, curves);
  emit(csv.str(), a.out_csv, out);
  if (!a.out_svg.empty()) {
    std::ostringstream svg;
    write_km_svg(svg, curves, a.cumulative, "weighted Kaplan-Meier (" + scheme_label(wt.scheme, wt.cohort) + ")");
    write_text(a.out_svg, svg.str());
  }
  if (!a.out_csv.empty()) {
    Json cfg;
    cfg["cohort"] = cohort_config(a.cohort);
    cfg["weight_scheme"] = a.weights.scheme;
    cfg["trim"] = a.weights.trim ? Json(*a.weights.trim) : Json(nullptr);
    cfg["cumulative"] = a.cumulative;
    cfg["out_svg"] = a.out_svg;
    write_text(a.out_csv + ".manifest.json",
               dump(make_manifest("km", cfg, {lc.input}, std::nullopt, elapsed(a.timing, start))));
  }
  return kOk;
}

// ---------------------------------------------------------------------------
// balance

struct BalanceArgs {
  CohortArgs cohort;
  WeightArgs weights;
  std::string out_csv;
  std::string histogram;
  int bins = 30;
  bool timing = false;
};

int cmd_balance(const BalanceArgs& a, std::ostream& out) {
  const auto start = Clock::now();
  LoadedCohort lc = load_cohort(a.cohort);
  if (lc.cohort.p() == 0) throw ValidationError("balance needs at least one covariate (--covariates)");
  Weighted wt = apply_weights(std::move(lc.cohort), a.weights);
  const Cohort& c = wt.cohort;
  const BalanceReport bal = balance_table(c, wt.weights.weights);
  std::ostringstream csv;
  csv << std::setprecision(17);
  csv << "covariate,group,versus,mean_group,mean_versus,weighted_mean_group,weighted_mean_versus,smd_unweighted,"
         "smd_weighted\n";
  for (const auto& e : bal.entries) {
    const auto k = e.covariate;
    csv << bal.covariate_names[static_cast<std::size_t>(k)] << ',' << bal.group_labels[static_cast<std::size_t>(e.group_a)]
        << ',' << bal.group_labels[static_cast<std::size_t>(e.group_b)] << ',' << bal.unweighted.mean(e.group_a, k)
        << ',' << bal.unweighted.mean(e.group_b, k) << ',' << bal.weighted.mean(e.group_a, k) << ','
        << bal.weighted.mean(e.group_b, k) << ',' << e.unweighted << ',' << e.weighted << '\n';
  }
  emit(csv.str(), a.out_csv, out);

  if (!a.histogram.empty()) {
    if (!wt.ps) throw ValidationError("--histogram needs a propensity-based weight scheme or --trim");
    if (a.bins < 1) throw ValidationError("--bins must be positive");
    const auto h = propensity_histogram(wt.ps->probs, c.treatment, a.bins);
    std::ostringstream hs;
    hs << std::setprecision(17) << "group,propensity_of,bin_low,bin_high,count\n";
    for (std::size_t g = 0; g < h.counts.size(); ++g)
      for (std::size_t col = 0; col < h.counts[g].size(); ++col)
        for (int b = 0; b < h.bins; ++b)
          hs << c.treatment_labels[g] << ',' << c.treatment_labels[col] << ',' << static_cast<double>(b) / h.bins << ','
             << static_cast<double>(b + 1) / h.bins << ',' << h.counts[g][col][static_cast<std::size_t>(b)] << '\n';
    write_text(a.histogram, hs.str());
  }
  if (!a.out_csv.empty()) {
    Json cfg;
    cfg["cohort"] = cohort_config(a.cohort);
    cfg["weight_scheme"] = a.weights.scheme;
    cfg["trim"] = a.weights.trim ? Json(*a.weights.trim) : Json(nullptr);
    cfg["histogram"] = a.histogram;
    cfg["bins"] = a.bins;
    write_text(a.out_csv + ".manifest.json",
               dump(make_manifest("balance", cfg, {lc.input}, std::nullopt, elapsed(a.timing, start))));
  }
  return kOk;
}

// ---------------------------------------------------------------------------
// simulate / estimand / event-rates

struct ScenarioArgs {
  std::string config;
  std::string setting;
  std::optional<double> psi;
  std::optional<double> censoring;
  std::optional<int> replicates;
  std::optional<long long> n;
  std::optional<int> bootstrap_B;
  std::optional<unsigned long long> seed;
  std::optional<long long> M;
  std::optional<unsigned long long> estimand_seed;
};

void add_scenario_options(CLI::App* cmd, ScenarioArgs& s, bool study) {
  cmd->add_option("--config", s.config, "flat key = value scenario file");
  cmd->add_option("--setting", s.setting, "multi3 or factorial");
  cmd->add_option("--psi", s.psi, "overlap parameter");
  cmd->add_option("--censoring", s.censoring, "target censoring fraction");
  cmd->add_option("--seed", s.seed, "master seed");
  if (study) {
    cmd->add_option("--replicates", s.replicates, "number of Monte Carlo replicates");
    cmd->add_option("--n", s.n, "units per replicate");
    cmd->add_option("--bootstrap-B", s.bootstrap_B, "bootstrap resamples per replicate (0 disables)");
    cmd->add_option("--estimand-M", s.M, "units in the true-estimand oracle");
    cmd->add_option("--estimand-seed", s.estimand_seed, "seed of the true-estimand oracle");
  }
}

ScenarioConfig resolve_scenario(const ScenarioArgs& s, std::vector<InputFile>& inputs) {
  ScenarioConfig cfg;
  if (!s.config.empty()) {
    std::ifstream in(s.config);
    if (!in) throw ValidationError("cannot open scenario file " + s.config);
    cfg = parse_config(in);
    inputs.push_back(describe_input(s.config));
  }
  if (!s.setting.empty()) cfg.setting = parse_setting(s.setting);
  if (s.psi) cfg.psi = *s.psi;
  if (s.censoring) cfg.target_censoring = *s.censoring;
  if (s.replicates) cfg.replicates = *s.replicates;
  if (s.n) cfg.n = *s.n;
  if (s.bootstrap_B) cfg.bootstrap_B = *s.bootstrap_B;
  if (s.seed) cfg.seed = *s.seed;
  if (s.M) cfg.estimand_units = *s.M;
  if (s.estimand_seed) cfg.estimand_seed = *s.estimand_seed;
  validate_config(cfg);
  return cfg;
}

Json scenario_json(const ScenarioConfig& cfg) {
  Json j;
  j["setting"] = to_string(cfg.setting);
  j["psi"] = cfg.psi;
  j["n"] = cfg.n;
  j["target_censoring"] = cfg.target_censoring;
  j["b"] = cfg.b;
  j["c"] = cfg.c;
  j["beta"] = cfg.beta;
  const Eigen::VectorXd th = cfg.theta_full();
  j["theta"] = std::vector<double>(th.data() + 1, th.data() + th.size());
  j["shape"] = cfg.shape;
  j["scale"] = cfg.scale;
  j["replicates"] = cfg.replicates;
  j["bootstrap_B"] = cfg.bootstrap_B;
  j["seed"] = cfg.seed;
  j["calibration_units"] = cfg.calibration_units;
  j["calibration_seed"] = cfg.calibration_seed;
  j["estimand_units"] = cfg.estimand_units;
  j["estimand_seed"] = cfg.estimand_seed;
  j["estimand_quantile"] = cfg.estimand_quantile;
  return j;
}

struct SimulateArgs {
  ScenarioArgs scenario;
  std::string out_csv;
  std::string out_table;
  std::string out_dir;
  bool full_grid = false;
  bool timing = false;
};

Json calibration_json(const Calibration& cal) {
  return {{"alpha", std::vector<double>(cal.alpha.data(), cal.alpha.data() + cal.alpha.size())},
          {"lambda_c", cal.lambda_c}};
}

std::string study_manifest(const StudyReport& rep, const std::vector<InputFile>& inputs, std::optional<double> t) {
  Json cfg = scenario_json(rep.config);
  cfg["calibration"] = calibration_json(rep.calibration);
  cfg["estimands"] = {
      {"ipw", std::vector<double>(rep.estimands.tau_ipw.data(), rep.estimands.tau_ipw.data() + rep.estimands.tau_ipw.size())},
      {"ow", std::vector<double>(rep.estimands.tau_ow.data(), rep.estimands.tau_ow.data() + rep.estimands.tau_ow.size())},
      {"M", rep.estimands.M},
      {"oracle_seed", rep.estimands.seed}};
  cfg["completed"] = rep.completed;
  cfg["failed"] = rep.failed;
  return dump(make_manifest("simulate", cfg, inputs, rep.config.seed, t));
}

int cmd_simulate(const SimulateArgs& a, std::ostream& out, std::ostream& err) {
  const auto start = Clock::now();
  std::vector<InputFile> inputs;
  ScenarioConfig cfg = resolve_scenario(a.scenario, inputs);
  if (!a.full_grid) {
    const StudyReport rep = run_study(cfg);
    std::ostringstream csv, table;
    write_study_csv(csv, rep);
    write_study_table(table, rep);
    if (!a.out_csv.empty()) {
      write_text(a.out_csv, csv.str());
      write_text(a.out_csv + ".manifest.json", study_manifest(rep, inputs, elapsed(a.timing, start)));
    }
    emit(table.str(), a.out_table, out);
    return kOk;
  }
  if (a.out_dir.empty()) throw ValidationError("--full-grid needs --out-dir");
  if (!a.scenario.replicates) cfg.replicates = 1000;
  err << "warning: the full grid runs " << 6 * cfg.replicates
      << " replicates with bootstrap; expect hours of runtime on a single core\n";
  std::filesystem::create_directories(a.out_dir);
  for (double psi : {1.0, 2.0, 3.0})
    for (double cens : {0.25, 0.50}) {
      ScenarioConfig cell = cfg;
      cell.psi = psi;
      cell.target_censoring = cens;
      const StudyReport rep = run_study(cell);
      const std::string stem = a.out_dir + "/" + to_string(cell.setting) + "_psi" + format_fixed(psi, 0) + "_cens" +
                               std::to_string(static_cast<int>(std::lround(cens * 100)));
      std::ostringstream csv, table;
      write_study_csv(csv, rep);
      write_study_table(table, rep);
      write_text(stem + ".csv", csv.str());
      write_text(stem + ".txt", table.str());
      write_text(stem + ".csv.manifest.json", study_manifest(rep, inputs, elapsed(a.timing, start)));
      out << table.str() << "\n";
    }
  return kOk;
}

struct EstimandArgs {
  ScenarioArgs scenario;
  std::string scheme = "ipw";
  long long M = 2'000'000;
  std::string out_csv;
  bool timing = false;
};

int cmd_estimand(const EstimandArgs& a, std::ostream& out) {
  const auto start = Clock::now();
  std::vector<InputFile> inputs;
  ScenarioConfig cfg = resolve_scenario(a.scenario, inputs);
  WeightScheme scheme;
  if (a.scheme == "ipw") scheme = WeightScheme::ipw();
  else if (a.scheme == "ow") scheme = WeightScheme::ow();
  else if (a.scheme.rfind("att:", 0) == 0) {
    const auto labels = cfg.labels();
    const auto it = std::find(labels.begin(), labels.end(), a.scheme.substr(4));
    if (it == labels.end()) throw ValidationError("ATT target level '" + a.scheme.substr(4) + "' is not a level");
    scheme = WeightScheme::att(static_cast<int>(it - labels.begin()));
  } else {
    throw ValidationError("unknown estimand scheme '" + a.scheme + "' (expected ipw, ow or att:<label>)");
  }
  if (a.M < kMinEstimandUnits)
    throw ValidationError("M too small: the estimand oracle needs M >= " + std::to_string(kMinEstimandUnits));
  const std::uint64_t seed = a.scenario.seed.value_or(cfg.estimand_seed);
  const Calibration cal = calibrate_intercepts(cfg);
  const EstimandResult r = true_estimand(cfg, cal.alpha, scheme, a.M, seed);
  const auto labels = cfg.labels();
  std::ostringstream csv;
  csv << std::setprecision(17) << "component,contrast,tau,hr\n";
  for (Eigen::Index j = 0; j < r.tau.size(); ++j)
    csv << j + 1 << ',' << labels[static_cast<std::size_t>(j + 1)] << " vs " << labels[0] << ',' << r.tau[j] << ','
        << std::exp(r.tau[j]) << '\n';
  emit(csv.str(), a.out_csv, out);
  if (!a.out_csv.empty()) {
    Json cfgj = scenario_json(cfg);
    cfgj["scheme"] = a.scheme;
    cfgj["M"] = a.M;
    cfgj["alpha"] = calibration_json(cal)["alpha"];
    cfgj["horizon"] = r.horizon;
    write_text(a.out_csv + ".manifest.json",
               dump(make_manifest("estimand", cfgj, inputs, seed, elapsed(a.timing, start))));
  }
  return kOk;
}

struct EventRateArgs {
  ScenarioArgs scenario;
  std::string times = "0.5,1,2";
  long long M = 1'000'000;
  std::string out_csv;
};

int cmd_event_rates(const EventRateArgs& a, std::ostream& out) {
  std::vector<InputFile> inputs;
  ScenarioConfig cfg = resolve_scenario(a.scenario, inputs);
  std::vector<double> times;
  for (const auto& s : split_list(a.times)) times.push_back(parse_number(s, "--times", 1));
  if (times.empty()) throw ValidationError("--times is empty");
  if (a.M < 1000) throw ValidationError("--M must be at least 1000");
  const Calibration cal = calibrate(cfg);
  const EventRates er = event_rates(cfg, cal, times, a.M, derive_seed(cfg.seed, 0xE7));
  const auto labels = cfg.labels();
  std::ostringstream csv;
  csv << std::setprecision(17) << "time,overall";
  for (const auto& l : labels) csv << ",arm " << l;
  csv << '\n';
  for (std::size_t t = 0; t < times.size(); ++t) {
    csv << times[t] << ',' << er.overall[t];
    for (const auto& arm : er.by_arm) csv << ',' << arm[t];
    csv << '\n';
  }
  emit(csv.str(), a.out_csv, out);
  if (!a.out_csv.empty()) {
    Json cfgj = scenario_json(cfg);
    cfgj["times"] = times;
    cfgj["M"] = a.M;
    cfgj["calibration"] = calibration_json(cal);
    write_text(a.out_csv + ".manifest.json",
               dump(make_manifest("event-rates", cfgj, inputs, derive_seed(cfg.seed, 0xE7), std::nullopt)));
  }
  return kOk;
}

// ---------------------------------------------------------------------------
// demo

struct DemoArgs {
  unsigned long long seed = 2024;
  std::string out_csv;
};

int cmd_demo(const DemoArgs& a, std::ostream& out) {
  const OverlapDemo d = poor_overlap_demo(a.seed);
  auto vec = [](const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  Json j;
  j["command"] = "demo";
  j["n"] = d.cohort.n();
  j["removed_units"] = d.dropped;
  j["max_ipw_weight"] = d.max_ipw_weight;
  j["ipw"] = {{"hr", vec(d.hr_ipw)}, {"hr_after_removal", vec(d.hr_ipw_dropped)}, {"fold_change", d.ipw_fold_change()}};
  j["ow"] = {{"hr", vec(d.hr_ow)}, {"hr_after_removal", vec(d.hr_ow_dropped)}, {"fold_change", d.ow_fold_change()}};
  j["manifest"] = make_manifest("demo", {{"seed", a.seed}, {"out_csv", a.out_csv}}, {}, a.seed, std::nullopt);
  out << dump(j);
  if (!a.out_csv.empty()) {
    const Cohort& c = d.cohort;
    std::ostringstream csv;
    csv << std::setprecision(17) << "time,event,treatment";
    for (const auto& name : c.covariate_names) csv << ',' << name;
    csv << '\n';
    for (Eigen::Index i = 0; i < c.n(); ++i) {
      csv << c.time[i] << ',' << c.event[i] << ',' << c.treatment_labels[static_cast<std::size_t>(c.treatment[i])];
      for (Eigen::Index k = 0; k < c.p(); ++k) csv << ',' << c.covariates(i, k);
      csv << '\n';
    }
    write_text(a.out_csv, csv.str());
  }
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Propensity-score-weighted marginal Cox models for multiple and factorial treatments", "wcox"};
  app.require_subcommand(1);
  app.set_version_flag("--version", WCOX_VERSION);

  FitArgs fit;
  auto* c_fit = app.add_subcommand("fit", "estimate marginal hazard ratios");
  add_cohort_options(c_fit, fit.cohort);
  add_weight_options(c_fit, fit.weights);
  c_fit->add_option("--variance", fit.variance, "robust, bootstrap:<B>, model or none")->capture_default_str();
  c_fit->add_option("--seed", fit.seed, "bootstrap seed")->capture_default_str();
  c_fit->add_option("--level", fit.level, "confidence level")->capture_default_str();
  c_fit->add_option("--out", fit.out, "write JSON here instead of standard output");
  c_fit->add_flag("--timing", fit.timing, "record wall-clock duration in the manifest");

  KmArgs km;
  auto* c_km = app.add_subcommand("km", "weighted Kaplan-Meier curves per treatment group");
  add_cohort_options(c_km, km.cohort);
  add_weight_options(c_km, km.weights);
  c_km->add_option("--out-csv", km.out_csv, "curve CSV (standard output when omitted)");
  c_km->add_option("--out-svg", km.out_svg, "standalone SVG plot");
  c_km->add_flag("--cumulative", km.cumulative, "plot cumulative risk 1 - S");
  c_km->add_flag("--timing", km.timing, "record wall-clock duration in the manifest");

  BalanceArgs bal;
  auto* c_bal = app.add_subcommand("balance", "pairwise standardized mean differences");
  add_cohort_options(c_bal, bal.cohort);
  add_weight_options(c_bal, bal.weights);
  c_bal->add_option("--out-csv", bal.out_csv, "SMD CSV (standard output when omitted)");
  c_bal->add_option("--histogram", bal.histogram, "write binned propensity counts here");
  c_bal->add_option("--bins", bal.bins, "histogram bins")->capture_default_str();
  c_bal->add_flag("--timing", bal.timing, "record wall-clock duration in the manifest");

  SimulateArgs sim;
  auto* c_sim = app.add_subcommand("simulate", "Monte Carlo study of IPW, OW, naive and multivariable Cox");
  add_scenario_options(c_sim, sim.scenario, true);
  c_sim->add_option("--out-csv", sim.out_csv, "study CSV");
  c_sim->add_option("--out-table", sim.out_table, "formatted table (standard output when omitted)");
  c_sim->add_option("--out-dir", sim.out_dir, "output directory for --full-grid");
  c_sim->add_flag("--full-grid", sim.full_grid, "run psi 1,2,3 x censoring 0.25,0.50");
  c_sim->add_flag("--timing", sim.timing, "record wall-clock duration in the manifest");

  EstimandArgs estd;
  auto* c_est = app.add_subcommand("estimand", "large-sample true marginal log hazard ratios");
  add_scenario_options(c_est, estd.scenario, false);
  c_est->add_option("--scheme", estd.scheme, "ipw, ow or att:<label>")->capture_default_str();
  c_est->add_option("--M", estd.M, "Monte Carlo units")->capture_default_str();
  c_est->add_option("--out-csv", estd.out_csv, "CSV output (standard output when omitted)");
  c_est->add_flag("--timing", estd.timing, "record wall-clock duration in the manifest");

  EventRateArgs er;
  auto* c_er = app.add_subcommand("event-rates", "observed event rates by time under a scenario");
  add_scenario_options(c_er, er.scenario, false);
  c_er->add_option("--times", er.times, "comma-separated times")->capture_default_str();
  c_er->add_option("--M", er.M, "Monte Carlo units")->capture_default_str();
  c_er->add_option("--out-csv", er.out_csv, "CSV output (standard output when omitted)");

  DemoArgs demo;
  auto* c_demo = app.add_subcommand("demo", "poor-overlap demonstration: IPW instability versus OW");
  c_demo->add_option("--seed", demo.seed, "seed")->capture_default_str();
  c_demo->add_option("--out-csv", demo.out_csv, "write the synthetic cohort here");

  std::vector<const char*> argv;
  for (const auto& s : args) argv.push_back(s.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::CallForVersion&) {
    out << WCOX_VERSION << "\n";
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kValidation;
  }

  try {
    if (c_fit->parsed()) return cmd_fit(fit, out);
    if (c_km->parsed()) return cmd_km(km, out);
    if (c_bal->parsed()) return cmd_balance(bal, out);
    if (c_sim->parsed()) return cmd_simulate(sim, out, err);
    if (c_est->parsed()) return cmd_estimand(estd, out);
    if (c_er->parsed()) return cmd_event_rates(er, out);
    if (c_demo->parsed()) return cmd_demo(demo, out);
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return kValidation;
  } catch (const StudyAbortedError& e) {
    err << "error: " << e.what() << "\n";
    return kStudyAborted;
  } catch (const ConvergenceError& e) {
    err << "error: " << e.what() << "\n";
    return kNonconvergence;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kFailure;
}

}  // namespace wcox::cli
