#pragma once

// Monte Carlo harness: the three-arm and 2x2 factorial data-generating
// processes, intercept and censoring calibration, the large-sample
// true-estimand oracle and the replicate study runner.

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <istream>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "wcox/data_model.hpp"
#include "wcox/error.hpp"
#include "wcox/marginal_cox.hpp"
#include "wcox/parallel.hpp"
#include "wcox/propensity.hpp"
#include "wcox/rng.hpp"

namespace wcox {

enum class Setting { multi3, factorial };

inline std::string to_string(Setting s) { return s == Setting::multi3 ? "multi3" : "factorial"; }

inline Setting parse_setting(const std::string& s) {
  if (s == "multi3") return Setting::multi3;
  if (s == "factorial" || s == "factorial2x2") return Setting::factorial;
  throw ValidationError("unknown setting '" + s + "' (expected multi3 or factorial)");
}

struct ScenarioConfig {
  Setting setting = Setting::multi3;
  double psi = 1.0;
  Eigen::Index n = 1000;
  double target_censoring = 0.25;
  std::vector<double> b{0.6, -0.4, 0.3, 0.2, -0.1, 0.15};
  std::vector<double> c{0.4, 0.2, -0.3, 0.1, 0.1, -0.2};
  std::vector<double> beta{1.2, -0.9, 0.8, 0.6, -0.3, 0.4};
  /// Conditional log hazard ratios for levels 1..J; empty selects the
  /// setting default.
  std::vector<double> theta;
  double shape = 1.2;
  double scale = 1.0;
  int replicates = 200;
  int bootstrap_B = 100;
  std::uint64_t seed = 1;
  Eigen::Index calibration_units = 1'000'000;
  std::uint64_t calibration_seed = 20240601;
  Eigen::Index estimand_units = 2'000'000;
  std::uint64_t estimand_seed = 20240602;
  double estimand_quantile = 0.999;

  int levels() const { return setting == Setting::multi3 ? 3 : kFactorialLevels; }
  int contrasts() const { return levels() - 1; }

  Eigen::VectorXd theta_full() const {
    Eigen::VectorXd t(levels());
    t[0] = 0.0;
    if (theta.empty()) {
      if (setting == Setting::multi3)
        t.tail(2) << 0.35, -0.20;
      else
        t.tail(3) << 0.35, -0.20, 0.15;
    } else {
      for (int j = 0; j < contrasts(); ++j) t[j + 1] = theta[static_cast<std::size_t>(j)];
    }
    return t;
  }

  std::vector<std::string> labels() const {
    if (setting == Setting::factorial) return factorial_labels();
    return {"0", "1", "2"};
  }
};

inline void validate_config(const ScenarioConfig& cfg) {
  auto fail = [](const std::string& m) { throw ValidationError("invalid scenario: " + m); };
  if (!(cfg.psi >= 0.0) || !std::isfinite(cfg.psi)) fail("psi must be a finite nonnegative number");
  if (cfg.n < 4 * cfg.levels()) fail("n must be at least " + std::to_string(4 * cfg.levels()));
  if (!(cfg.target_censoring > 0.0 && cfg.target_censoring < 1.0)) fail("censoring target must be in (0,1)");
  if (cfg.b.size() != 6 || cfg.c.size() != 6 || cfg.beta.size() != 6) fail("b, c and beta need 6 entries");
  if (!cfg.theta.empty() && static_cast<int>(cfg.theta.size()) != cfg.contrasts())
    fail("theta needs " + std::to_string(cfg.contrasts()) + " entries");
  if (!(cfg.shape > 0.0) || !(cfg.scale > 0.0)) fail("Weibull shape and scale must be positive");
  if (cfg.replicates < 1) fail("replicates must be at least 1");
  if (cfg.bootstrap_B < 0 || cfg.bootstrap_B == 1) fail("bootstrap_B must be 0 (off) or at least 2");
  if (cfg.calibration_units < 1000) fail("calibration_units too small");
  if (!(cfg.estimand_quantile > 0.0 && cfg.estimand_quantile <= 1.0)) fail("estimand_quantile must be in (0,1]");
}

namespace detail {

inline std::vector<double> parse_list(const std::string& v) {
  std::vector<double> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    const double x = std::stod(item, &used);
    if (item.find_first_not_of(" \t", used) != std::string::npos) throw std::invalid_argument(item);
    out.push_back(x);
  }
  return out;
}

inline std::string trim_ws(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto z = s.find_last_not_of(" \t\r");
  return s.substr(a, z - a + 1);
}

}  // namespace detail

/// Applies one `key = value` setting.
inline void set_config_value(ScenarioConfig& cfg, const std::string& key, const std::string& value) {
  try {
    if (key == "setting") cfg.setting = parse_setting(value);
    else if (key == "psi") cfg.psi = std::stod(value);
    else if (key == "n") cfg.n = std::stoll(value);
    else if (key == "censoring" || key == "target_censoring") cfg.target_censoring = std::stod(value);
    else if (key == "replicates") cfg.replicates = std::stoi(value);
    else if (key == "bootstrap_B" || key == "bootstrap-B") cfg.bootstrap_B = std::stoi(value);
    else if (key == "seed") cfg.seed = std::stoull(value);
    else if (key == "shape") cfg.shape = std::stod(value);
    else if (key == "scale") cfg.scale = std::stod(value);
    else if (key == "b") cfg.b = detail::parse_list(value);
    else if (key == "c") cfg.c = detail::parse_list(value);
    else if (key == "beta") cfg.beta = detail::parse_list(value);
    else if (key == "theta") cfg.theta = detail::parse_list(value);
    else if (key == "calibration_units") cfg.calibration_units = std::stoll(value);
    else if (key == "calibration_seed") cfg.calibration_seed = std::stoull(value);
    else if (key == "estimand_units" || key == "M") cfg.estimand_units = std::stoll(value);
    else if (key == "estimand_seed") cfg.estimand_seed = std::stoull(value);
    else if (key == "estimand_quantile") cfg.estimand_quantile = std::stod(value);
    else throw ValidationError("unknown scenario key '" + key + "'");
  } catch (const std::logic_error&) {
    throw ValidationError("bad value for scenario key '" + key + "': " + value);
  }
}

/// Reads a flat key-value file: one `key = value` (or `key: value`) per
/// line, `#` starts a comment.
inline ScenarioConfig parse_config(std::istream& in, ScenarioConfig cfg = {}) {
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto h = line.find('#'); h != std::string::npos) line.erase(h);
    line = detail::trim_ws(line);
    if (line.empty()) continue;
    auto sep = line.find('=');
    if (sep == std::string::npos) sep = line.find(':');
    if (sep == std::string::npos)
      throw ValidationError("scenario file line " + std::to_string(lineno) + ": expected key = value");
    set_config_value(cfg, detail::trim_ws(line.substr(0, sep)), detail::trim_ws(line.substr(sep + 1)));
  }
  validate_config(cfg);
  return cfg;
}

inline Eigen::VectorXd unit_vector(const std::vector<double>& v) {
  Eigen::VectorXd x = Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
  return x / x.norm();
}

// ---------------------------------------------------------------------------
// Generators

/// X1..X3 equicorrelated (rho 0.5) standard normals, X4..X6 centered
/// Bernoulli(0.5).
inline Eigen::MatrixXd gen_covariates(Eigen::Index n, Engine& eng) {
  Eigen::Matrix3d sigma = Eigen::Matrix3d::Constant(0.5);
  sigma.diagonal().setOnes();
  const Eigen::Matrix3d L = sigma.llt().matrixL();
  std::normal_distribution<double> normal;
  Eigen::MatrixXd X(n, 6);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Vector3d z(normal(eng), normal(eng), normal(eng));
    X.row(i).head<3>() = (L * z).transpose();
    const std::uint64_t bits = eng();
    for (int k = 0; k < 3; ++k) X(i, 3 + k) = static_cast<double>((bits >> (63 - k)) & 1U) - 0.5;
  }
  return X;
}

inline Eigen::MatrixXd gen_covariates(Eigen::Index n, std::uint64_t seed) {
  Engine eng = make_engine(seed);
  return gen_covariates(n, eng);
}

namespace detail {

inline Eigen::MatrixXd softmax_rows(const Eigen::MatrixXd& eta) {
  Eigen::MatrixXd p(eta.rows(), eta.cols());
  for (Eigen::Index i = 0; i < eta.rows(); ++i) {
    const double m = eta.row(i).maxCoeff();
    p.row(i) = (eta.row(i).array() - m).exp();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

inline Eigen::VectorXi draw_categorical(const Eigen::MatrixXd& probs, Engine& eng) {
  Eigen::VectorXi z(probs.rows());
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    const double u = std::generate_canonical<double, 64>(eng);
    double acc = 0.0;
    int j = 0;
    for (; j < probs.cols() - 1; ++j) {
      acc += probs(i, j);
      if (u < acc) break;
    }
    z[i] = j;
  }
  return z;
}

}  // namespace detail

/// True generalized propensities, three arms: softmax(0, a + psi b'X, a - psi b'X).
inline Eigen::MatrixXd true_propensity_multi3(const Eigen::MatrixXd& X, double psi, double alpha,
                                              const std::vector<double>& b = ScenarioConfig{}.b) {
  const Eigen::VectorXd s = X * unit_vector(b);
  Eigen::MatrixXd eta(X.rows(), 3);
  eta.col(0).setZero();
  eta.col(1) = (alpha + psi * s.array()).matrix();
  eta.col(2) = (alpha - psi * s.array()).matrix();
  return detail::softmax_rows(eta);
}

/// True propensities of the four factorial cells in label order
/// (0,0), (1,0), (0,1), (1,1).
inline Eigen::MatrixXd true_propensity_factorial(const Eigen::MatrixXd& X, double psi, const Eigen::Vector3d& alpha,
                                                 const std::vector<double>& b = ScenarioConfig{}.b,
                                                 const std::vector<double>& c = ScenarioConfig{}.c) {
  const Eigen::VectorXd sb = X * unit_vector(b);
  const Eigen::VectorXd sc = X * unit_vector(c);
  Eigen::MatrixXd eta(X.rows(), 4);
  eta.col(encode_factorial(0, 0)).setZero();
  eta.col(encode_factorial(1, 0)) = (alpha[0] + psi * sb.array()).matrix();
  eta.col(encode_factorial(0, 1)) = (alpha[1] - psi * sb.array()).matrix();
  eta.col(encode_factorial(1, 1)) = (alpha[2] + psi * sc.array()).matrix();
  return detail::softmax_rows(eta);
}

inline Eigen::VectorXi gen_treatment_multi3(const Eigen::MatrixXd& X, double psi, double alpha, Engine& eng) {
  return detail::draw_categorical(true_propensity_multi3(X, psi, alpha), eng);
}

inline Eigen::VectorXi gen_treatment_multi3(const Eigen::MatrixXd& X, double psi, double alpha, std::uint64_t seed) {
  Engine eng = make_engine(seed);
  return gen_treatment_multi3(X, psi, alpha, eng);
}

/// Factorial assignment; returns the two binary treatments.
inline std::pair<Eigen::VectorXi, Eigen::VectorXi> gen_treatment_factorial(const Eigen::MatrixXd& X, double psi,
                                                                           const Eigen::Vector3d& alpha, Engine& eng) {
  const Eigen::VectorXi cell = detail::draw_categorical(true_propensity_factorial(X, psi, alpha), eng);
  Eigen::VectorXi z1(cell.size()), z2(cell.size());
  for (Eigen::Index i = 0; i < cell.size(); ++i) std::tie(z1[i], z2[i]) = decode_factorial(cell[i]);
  return {z1, z2};
}

inline std::pair<Eigen::VectorXi, Eigen::VectorXi> gen_treatment_factorial(const Eigen::MatrixXd& X, double psi,
                                                                           const Eigen::Vector3d& alpha,
                                                                           std::uint64_t seed) {
  Engine eng = make_engine(seed);
  return gen_treatment_factorial(X, psi, alpha, eng);
}

/// Weibull proportional-hazards potential times for every arm:
/// T(z) = scale (-log U / exp(theta_z + beta'X))^(1/shape), one U per arm
/// per unit. Column z holds arm z.
inline Eigen::MatrixXd gen_outcomes(const Eigen::MatrixXd& X, const Eigen::VectorXd& theta,
                                    const std::vector<double>& beta, double shape, double scale, Engine& eng) {
  if (!(shape > 0.0) || !(scale > 0.0)) throw ValidationError("Weibull shape and scale must be positive");
  const Eigen::VectorXd lp =
      X * Eigen::Map<const Eigen::VectorXd>(beta.data(), static_cast<Eigen::Index>(beta.size()));
  const Eigen::Index L = theta.size();
  Eigen::MatrixXd T(X.rows(), L);
  const double inv_shape = 1.0 / shape;
  for (Eigen::Index i = 0; i < X.rows(); ++i)
    for (Eigen::Index z = 0; z < L; ++z) {
      const double e = -std::log(uniform_open0(eng));
      T(i, z) = scale * std::pow(e / std::exp(theta[z] + lp[i]), inv_shape);
    }
  return T;
}

inline Eigen::MatrixXd gen_outcomes(const Eigen::MatrixXd& X, const Eigen::VectorXd& theta,
                                    const std::vector<double>& beta, double shape, double scale, std::uint64_t seed) {
  Engine eng = make_engine(seed);
  return gen_outcomes(X, theta, beta, shape, scale, eng);
}

/// Intercepts in a common length-J layout: three arms use (a, a); the
/// factorial design uses (a1, a2, a3).
inline Eigen::MatrixXd true_propensity(const ScenarioConfig& cfg, const Eigen::MatrixXd& X,
                                       const Eigen::VectorXd& alpha) {
  if (cfg.setting == Setting::multi3) return true_propensity_multi3(X, cfg.psi, alpha[0], cfg.b);
  return true_propensity_factorial(X, cfg.psi, alpha.head<3>(), cfg.b, cfg.c);
}

// ---------------------------------------------------------------------------
// Calibration

struct Calibration {
  Eigen::VectorXd alpha;
  double lambda_c = 0.0;
  int alpha_iterations = 0;
  Eigen::VectorXd prevalence;
  double censoring = 0.0;
};

/// Damped fixed point on the log-prevalence mismatch, using mean true
/// propensities over a fixed-seed sample of `calibration_units` units.
inline Calibration calibrate_intercepts(const ScenarioConfig& cfg) {
  validate_config(cfg);
  const int L = cfg.levels();
  const int J = L - 1;
  const Eigen::MatrixXd X = gen_covariates(cfg.calibration_units, cfg.calibration_seed);
  const double target = 1.0 / L;
  Calibration cal;
  cal.alpha = Eigen::VectorXd::Zero(J);
  constexpr double damping = 0.8;
  for (int it = 1; it <= 200; ++it) {
    const Eigen::VectorXd prev = true_propensity(cfg, X, cal.alpha).colwise().mean().transpose();
    cal.prevalence = prev;
    Eigen::VectorXd step(J);
    for (int j = 0; j < J; ++j) step[j] = std::log(target / prev[j + 1]) - std::log(target / prev[0]);
    if (cfg.setting == Setting::multi3) step.setConstant(step.mean());
    cal.alpha_iterations = it;
    const double worst = (prev.array() - target).abs().maxCoeff();
    if (step.lpNorm<Eigen::Infinity>() <= 1e-10 && worst <= 0.002) return cal;
    cal.alpha += damping * step;
  }
  throw ConvergenceError("intercept calibration did not converge in 200 iterations");
}

namespace detail {

/// Fixed-seed sample of treated potential times and unit-rate exponentials
/// used as common random numbers for censoring calibration.
struct CensoringSample {
  Eigen::VectorXd t_obs;
  Eigen::VectorXd e;
};

inline CensoringSample censoring_sample(const ScenarioConfig& cfg, const Eigen::VectorXd& alpha, Eigen::Index m,
                                        std::uint64_t seed) {
  Engine eng = make_engine(seed);
  const Eigen::MatrixXd X = gen_covariates(m, eng);
  const Eigen::VectorXi Z = draw_categorical(true_propensity(cfg, X, alpha), eng);
  const Eigen::MatrixXd T = gen_outcomes(X, cfg.theta_full(), cfg.beta, cfg.shape, cfg.scale, eng);
  CensoringSample s{Eigen::VectorXd(m), Eigen::VectorXd(m)};
  for (Eigen::Index i = 0; i < m; ++i) {
    s.t_obs[i] = T(i, Z[i]);
    s.e[i] = -std::log(uniform_open0(eng));
  }
  return s;
}

inline double censored_fraction(const CensoringSample& s, double lambda) {
  Eigen::Index k = 0;
  for (Eigen::Index i = 0; i < s.e.size(); ++i) k += (s.e[i] / lambda < s.t_obs[i]);
  return static_cast<double>(k) / static_cast<double>(s.e.size());
}

}  // namespace detail

/// Censoring fraction under C ~ Exp(lambda) for the scenario, on a fixed
/// sample of m units.
inline double censoring_fraction(const ScenarioConfig& cfg, const Eigen::VectorXd& alpha, double lambda,
                                 Eigen::Index m, std::uint64_t seed) {
  return detail::censored_fraction(detail::censoring_sample(cfg, alpha, m, seed), lambda);
}

/// Bisection (log scale) on the exponential censoring rate.
inline double calibrate_censoring(const ScenarioConfig& cfg, const Eigen::VectorXd& alpha) {
  const double target = cfg.target_censoring;
  if (!(target > 0.0 && target < 1.0)) throw ValidationError("target must be in (0,1)");
  const auto s = detail::censoring_sample(cfg, alpha, cfg.calibration_units, derive_seed(cfg.calibration_seed, 1));
  double lo = 1e-6, hi = 1e4;
  if (!(detail::censored_fraction(s, lo) < target && detail::censored_fraction(s, hi) > target))
    throw ConvergenceError("censoring calibration bracket does not contain the target");
  for (int it = 0; it < 200 && hi / lo > 1.0 + 1e-12; ++it) {
    const double mid = std::sqrt(lo * hi);
    (detail::censored_fraction(s, mid) < target ? lo : hi) = mid;
  }
  const double lambda = std::sqrt(lo * hi);
  if (std::abs(detail::censored_fraction(s, lambda) - target) > 0.005)
    throw ConvergenceError("censoring calibration missed the target by more than 0.005");
  return lambda;
}

inline Calibration calibrate(const ScenarioConfig& cfg) {
  Calibration cal = calibrate_intercepts(cfg);
  cal.lambda_c = calibrate_censoring(cfg, cal.alpha);
  cal.censoring = cfg.target_censoring;
  return cal;
}

// ---------------------------------------------------------------------------
// True estimand

struct EstimandResult {
  Eigen::VectorXd tau;
  Eigen::Index M = 0;
  std::uint64_t seed = 0;
  double horizon = 0.0;
  WeightScheme scheme;
  int iterations = 0;
};

inline constexpr Eigen::Index kMinEstimandUnits = 1'000'000;

/// Large-sample oracle: every unit contributes one uncensored record per arm
/// (no confounding by construction), weighted by the tilting function h(X)
/// of the true propensities, administratively truncated at the
/// `estimand_quantile` quantile of all potential times.
inline EstimandResult true_estimand(const ScenarioConfig& cfg, const Eigen::VectorXd& alpha,
                                    const WeightScheme& scheme, Eigen::Index M, std::uint64_t seed) {
  if (M < kMinEstimandUnits)
    throw ValidationError("M too small: the estimand oracle needs M >= " + std::to_string(kMinEstimandUnits));
  if (scheme.kind == SchemeKind::att && (scheme.att_level < 0 || scheme.att_level >= cfg.levels()))
    throw ValidationError("ATT target level out of range");
  Engine eng = make_engine(seed);
  const Eigen::MatrixXd X = gen_covariates(M, eng);
  const Eigen::MatrixXd T = gen_outcomes(X, cfg.theta_full(), cfg.beta, cfg.shape, cfg.scale, eng);
  const Eigen::MatrixXd e = true_propensity(cfg, X, alpha);
  const int L = cfg.levels();
  const Eigen::Index N = M * L;

  Eigen::VectorXd time(N), w(N);
  Eigen::VectorXi event(N), arm(N);
  for (Eigen::Index i = 0; i < M; ++i) {
    const double h = tilt_value(e.row(i), scheme);
    for (int z = 0; z < L; ++z) {
      const Eigen::Index r = i * L + z;
      time[r] = T(i, z);
      w[r] = h;
      arm[r] = z;
    }
  }
  std::vector<double> sorted(time.data(), time.data() + N);
  const auto q = static_cast<std::size_t>(std::ceil(cfg.estimand_quantile * static_cast<double>(N))) - 1;
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(q), sorted.end());
  const double horizon = sorted[q];
  for (Eigen::Index r = 0; r < N; ++r) {
    event[r] = time[r] <= horizon ? 1 : 0;
    time[r] = std::min(time[r], horizon);
  }
  const RiskTable tab = build_risk_table(time, event, arm, L, w, time_order(time));
  const MhrEstimate est = fit_mhr(tab);
  return {est.tau, M, seed, horizon, scheme, est.iterations};
}

inline EstimandResult true_estimand(const ScenarioConfig& cfg, const WeightScheme& scheme, Eigen::Index M,
                                    std::uint64_t seed) {
  return true_estimand(cfg, calibrate_intercepts(cfg).alpha, scheme, M, seed);
}

// ---------------------------------------------------------------------------
// Replicates

struct ReplicateData {
  Cohort cohort;
  Eigen::MatrixXd potential_times;  // n x levels
  Eigen::VectorXd censoring_time;
  Eigen::MatrixXd true_propensity;
  Eigen::VectorXi z1, z2;  // factorial only
};

inline ReplicateData generate_replicate(const ScenarioConfig& cfg, const Calibration& cal, std::uint64_t seed) {
  Engine eng = make_engine(seed);
  ReplicateData rd;
  const Eigen::Index n = cfg.n;
  const Eigen::MatrixXd X = gen_covariates(n, eng);
  rd.true_propensity = true_propensity(cfg, X, cal.alpha);
  const Eigen::VectorXi Z = detail::draw_categorical(rd.true_propensity, eng);
  rd.potential_times = gen_outcomes(X, cfg.theta_full(), cfg.beta, cfg.shape, cfg.scale, eng);
  rd.censoring_time.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) rd.censoring_time[i] = -std::log(uniform_open0(eng)) / cal.lambda_c;

  Cohort& c = rd.cohort;
  c.time.resize(n);
  c.event.resize(n);
  c.treatment = Z;
  c.covariates = X;
  c.treatment_labels = cfg.labels();
  c.covariate_names = {"x1", "x2", "x3", "x4", "x5", "x6"};
  for (Eigen::Index i = 0; i < n; ++i) {
    const double t = rd.potential_times(i, Z[i]);
    c.time[i] = std::min(t, rd.censoring_time[i]);
    c.event[i] = t <= rd.censoring_time[i] ? 1 : 0;
  }
  if (cfg.setting == Setting::factorial) {
    rd.z1.resize(n);
    rd.z2.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) std::tie(rd.z1[i], rd.z2[i]) = decode_factorial(Z[i]);
  }
  validate_cohort(c);
  return rd;
}

struct EventRates {
  std::vector<double> times;
  std::vector<double> overall;
  std::vector<std::vector<double>> by_arm;  // [arm][time]
};

/// Fraction of units with an observed event (delta = 1) by time t, overall
/// and within each observed arm, on a sample of m units.
inline EventRates event_rates(const ScenarioConfig& cfg, const Calibration& cal, const std::vector<double>& times,
                              Eigen::Index m, std::uint64_t seed) {
  ScenarioConfig big = cfg;
  big.n = m;
  const ReplicateData rd = generate_replicate(big, cal, seed);
  const Cohort& c = rd.cohort;
  const int L = cfg.levels();
  EventRates er;
  er.times = times;
  er.by_arm.assign(static_cast<std::size_t>(L), {});
  std::vector<double> arm_n(static_cast<std::size_t>(L), 0.0);
  for (Eigen::Index i = 0; i < m; ++i) arm_n[static_cast<std::size_t>(c.treatment[i])] += 1.0;
  for (double t : times) {
    std::vector<double> hits(static_cast<std::size_t>(L), 0.0);
    for (Eigen::Index i = 0; i < m; ++i)
      if (c.event[i] && c.time[i] <= t) hits[static_cast<std::size_t>(c.treatment[i])] += 1.0;
    double total = 0.0;
    for (int z = 0; z < L; ++z) {
      total += hits[static_cast<std::size_t>(z)];
      er.by_arm[static_cast<std::size_t>(z)].push_back(hits[static_cast<std::size_t>(z)] / arm_n[static_cast<std::size_t>(z)]);
    }
    er.overall.push_back(total / static_cast<double>(m));
  }
  return er;
}

// ---------------------------------------------------------------------------
// Study runner

struct StudyEstimands {
  Eigen::VectorXd tau_ipw;
  Eigen::VectorXd tau_ow;
  Eigen::Index M = 0;
  std::uint64_t seed = 0;
};

inline StudyEstimands compute_estimands(const ScenarioConfig& cfg, const Calibration& cal) {
  StudyEstimands est;
  est.M = cfg.estimand_units;
  est.seed = cfg.estimand_seed;
  est.tau_ipw = true_estimand(cfg, cal.alpha, WeightScheme::ipw(), est.M, est.seed).tau;
  est.tau_ow = true_estimand(cfg, cal.alpha, WeightScheme::ow(), est.M, est.seed).tau;
  return est;
}

inline const std::vector<std::string>& study_methods() {
  static const std::vector<std::string> m{"IPW", "OW", "Naive", "Multivariable"};
  return m;
}

struct MethodMetrics {
  std::string method;
  int component = 1;  // 1-based contrast index
  std::string contrast;
  double target = 0.0;
  double mean_tau = 0.0;
  double rel_bias = 0.0;  // signed: (mean exp(tau_hat) - exp(target)) / exp(target)
  double coverage = 0.0;
  double mean_se_robust = std::numeric_limits<double>::quiet_NaN();
  double mean_se_bootstrap = std::numeric_limits<double>::quiet_NaN();
  double mean_se_model = std::numeric_limits<double>::quiet_NaN();
  double mc_sd = 0.0;
  int replicates = 0;
};

struct StudyReport {
  ScenarioConfig config;
  Calibration calibration;
  StudyEstimands estimands;
  std::vector<MethodMetrics> rows;
  int requested = 0;
  int completed = 0;
  int failed = 0;
  std::map<std::string, int> failure_reasons;

  const MethodMetrics& row(const std::string& method, int component) const {
    for (const auto& r : rows)
      if (r.method == method && r.component == component) return r;
    throw ValidationError("no study row for " + method + " component " + std::to_string(component));
  }
};

namespace detail {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

/// Per-replicate results, indexed [method][component].
struct ReplicateOutcome {
  std::vector<Eigen::VectorXd> tau, se_robust, se_boot, se_model;
  std::string failure;
};

inline Eigen::VectorXd diag_se(const Eigen::MatrixXd& cov) { return cov.diagonal().cwiseMax(0.0).cwiseSqrt(); }

inline ReplicateOutcome run_replicate(const ScenarioConfig& cfg, const Calibration& cal, std::uint64_t seed) {
  ReplicateOutcome out;
  const int J = cfg.contrasts();
  const Eigen::VectorXd none = Eigen::VectorXd::Constant(J, kNaN);
  try {
    const ReplicateData rd = generate_replicate(cfg, cal, seed);
    const Cohort& c = rd.cohort;
    const PropensityFit ps = fit_multinomial_logit(c);
    for (const auto& scheme : {WeightScheme::ipw(), WeightScheme::ow()}) {
      const Eigen::VectorXd w = compute_weights(ps, c.treatment, scheme).weights;
      const MhrEstimate est = fit_mhr(c, w);
      out.tau.push_back(est.tau);
      out.se_robust.push_back(diag_se(sandwich_covariance(c, ps, scheme, est.tau).cov_tau));
      if (cfg.bootstrap_B >= 2) {
        BootstrapOptions bo;
        bo.replicates = cfg.bootstrap_B;
        bo.seed = derive_seed(seed, scheme.kind == SchemeKind::ipw ? 101 : 102);
        bo.threads = 1;
        out.se_boot.push_back(diag_se(bootstrap_covariance(c, scheme, bo).cov_tau));
      } else {
        out.se_boot.push_back(none);
      }
      out.se_model.push_back(none);
    }
    const Eigen::VectorXd ones = Eigen::VectorXd::Ones(c.n());
    const MhrEstimate naive = fit_mhr(c, ones);
    out.tau.push_back(naive.tau);
    out.se_robust.push_back(diag_se(robust_covariance_fixed_weights(c, ones, naive.tau)));
    out.se_boot.push_back(none);
    out.se_model.push_back(diag_se(information_covariance(naive)));

    const CoxFit mv = fit_multivariable_cox(c);
    out.tau.push_back(mv.coef.head(J));
    out.se_robust.push_back(none);
    out.se_boot.push_back(none);
    out.se_model.push_back(diag_se(mv.cov.topLeftCorner(J, J)));
  } catch (const PropensityConvergenceError&) {
    out.failure = "propensity nonconvergence";
  } catch (const ConvergenceError& e) {
    const std::string what = e.what();
    out.failure = what.rfind("bootstrap unstable", 0) == 0 ? "bootstrap unstable" : "outcome nonconvergence";
  } catch (const ValidationError&) {
    out.failure = "invalid replicate";
  }
  return out;
}

inline double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? kNaN : s / static_cast<double>(v.size());
}

}  // namespace detail

/// Runs `cfg.replicates` independent replicates (seed stream
/// derive_seed(cfg.seed, r)) and aggregates IPW, OW, Naive and
/// Multivariable metrics. IPW, Naive and Multivariable are judged against
/// the IPW estimand, OW against the OW estimand; coverage uses the robust SE
/// for the weighted estimators and the model-based SE otherwise.
inline StudyReport run_study(const ScenarioConfig& cfg, const Calibration& cal, const StudyEstimands& truth,
                             unsigned threads = worker_count()) {
  validate_config(cfg);
  const auto R = static_cast<std::size_t>(cfg.replicates);
  std::vector<detail::ReplicateOutcome> outcomes(R);
  parallel_for(
      R, [&](std::size_t r) { outcomes[r] = detail::run_replicate(cfg, cal, derive_seed(cfg.seed, r)); }, threads);

  StudyReport rep;
  rep.config = cfg;
  rep.calibration = cal;
  rep.estimands = truth;
  rep.requested = cfg.replicates;
  for (const auto& o : outcomes) {
    if (o.failure.empty()) {
      ++rep.completed;
    } else {
      ++rep.failed;
      ++rep.failure_reasons[o.failure];
    }
  }
  if (static_cast<double>(rep.failed) > 0.05 * static_cast<double>(rep.requested)) {
    std::string why;
    for (const auto& [k, v] : rep.failure_reasons) why += (why.empty() ? "" : ", ") + k + ": " + std::to_string(v);
    throw StudyAbortedError("study aborted: " + std::to_string(rep.failed) + " of " + std::to_string(rep.requested) +
                            " replicates failed (" + why + ")");
  }

  const double z = normal_quantile(0.975);
  const int J = cfg.contrasts();
  const auto labels = cfg.labels();
  const auto& methods = study_methods();
  for (std::size_t m = 0; m < methods.size(); ++m) {
    const Eigen::VectorXd& target = methods[m] == "OW" ? truth.tau_ow : truth.tau_ipw;
    const bool weighted = methods[m] == "IPW" || methods[m] == "OW";
    for (int j = 0; j < J; ++j) {
      std::vector<double> tau, hr, cover, se_ro, se_bs, se_mo;
      for (const auto& o : outcomes) {
        if (!o.failure.empty()) continue;
        const double t = o.tau[m][j];
        tau.push_back(t);
        hr.push_back(std::exp(t));
        const double se = weighted ? o.se_robust[m][j] : o.se_model[m][j];
        cover.push_back(std::abs(t - target[j]) <= z * se ? 1.0 : 0.0);
        if (!std::isnan(o.se_robust[m][j])) se_ro.push_back(o.se_robust[m][j]);
        if (!std::isnan(o.se_boot[m][j])) se_bs.push_back(o.se_boot[m][j]);
        if (!std::isnan(o.se_model[m][j])) se_mo.push_back(o.se_model[m][j]);
      }
      MethodMetrics mm;
      mm.method = methods[m];
      mm.component = j + 1;
      mm.contrast = labels[static_cast<std::size_t>(j + 1)] + " vs " + labels[0];
      mm.target = target[j];
      mm.replicates = static_cast<int>(tau.size());
      mm.mean_tau = detail::mean_of(tau);
      mm.rel_bias = (detail::mean_of(hr) - std::exp(target[j])) / std::exp(target[j]);
      mm.coverage = detail::mean_of(cover);
      mm.mean_se_robust = detail::mean_of(se_ro);
      mm.mean_se_bootstrap = detail::mean_of(se_bs);
      mm.mean_se_model = detail::mean_of(se_mo);
      double ss = 0.0;
      for (double t : tau) ss += (t - mm.mean_tau) * (t - mm.mean_tau);
      mm.mc_sd = tau.size() > 1 ? std::sqrt(ss / static_cast<double>(tau.size() - 1)) : detail::kNaN;
      rep.rows.push_back(mm);
    }
  }
  return rep;
}

inline StudyReport run_study(const ScenarioConfig& cfg, unsigned threads = worker_count()) {
  const Calibration cal = calibrate(cfg);
  return run_study(cfg, cal, compute_estimands(cfg, cal), threads);
}

namespace detail {

inline void put_number(std::ostream& os, double v) {
  if (std::isnan(v))
    os << "NA";
  else
    os << v;
}

}  // namespace detail

inline void write_study_csv(std::ostream& os, const StudyReport& rep) {
  os << "method,component,contrast,target,mean_tau,rel_bias,coverage,mean_se_robust,mean_se_bootstrap,mean_se_model,"
        "mc_sd,replicates\n";
  os << std::setprecision(17);
  for (const auto& r : rep.rows) {
    os << r.method << ',' << r.component << ',' << r.contrast << ',';
    for (double v : {r.target, r.mean_tau, r.rel_bias, r.coverage, r.mean_se_robust, r.mean_se_bootstrap,
                     r.mean_se_model, r.mc_sd}) {
      detail::put_number(os, v);
      os << ',';
    }
    os << r.replicates << '\n';
  }
}

/// Human-readable table: Rel.Bias, Coverage, SE(ro), SE(bs) per method and
/// component, two decimals.
inline void write_study_table(std::ostream& os, const StudyReport& rep) {
  const auto& cfg = rep.config;
  os << "setting=" << to_string(cfg.setting) << " psi=" << cfg.psi << " n=" << cfg.n
     << " censoring=" << cfg.target_censoring << " replicates=" << rep.completed << "/" << rep.requested
     << " bootstrap_B=" << cfg.bootstrap_B << " seed=" << cfg.seed << "\n";
  os << std::fixed << std::setprecision(3);
  os << "estimand IPW:";
  for (Eigen::Index j = 0; j < rep.estimands.tau_ipw.size(); ++j) os << ' ' << rep.estimands.tau_ipw[j];
  os << "  OW:";
  for (Eigen::Index j = 0; j < rep.estimands.tau_ow.size(); ++j) os << ' ' << rep.estimands.tau_ow[j];
  os << "  (M=" << rep.estimands.M << ", oracle seed=" << rep.estimands.seed << ")\n";
  os << std::left << std::setw(15) << "method" << std::setw(6) << "tau" << std::right << std::setw(10) << "Rel.Bias"
     << std::setw(10) << "Coverage" << std::setw(9) << "SE(ro)" << std::setw(9) << "SE(bs)" << std::setw(9) << "MC SD"
     << "\n";
  os << std::setprecision(2);
  auto cell = [&](double v, int width) {
    if (std::isnan(v))
      os << std::setw(width) << "-";
    else
      os << std::setw(width) << v;
  };
  for (const auto& r : rep.rows) {
    const bool weighted = r.method == "IPW" || r.method == "OW";
    os << std::left << std::setw(15) << r.method << std::setw(6) << ("tau" + std::to_string(r.component))
       << std::right;
    cell(r.rel_bias, 10);
    cell(r.coverage, 10);
    cell(weighted ? r.mean_se_robust : r.mean_se_model, 9);
    cell(r.mean_se_bootstrap, 9);
    cell(r.mc_sd, 9);
    os << "\n";
  }
  if (rep.failed > 0) {
    os << "failed replicates: " << rep.failed;
    for (const auto& [k, v] : rep.failure_reasons) os << " [" << k << ": " << v << "]";
    os << "\n";
  }
}

// ---------------------------------------------------------------------------
// Poor-overlap demonstration

struct OverlapDemo {
  Cohort cohort;
  Eigen::VectorXd hr_ipw, hr_ipw_dropped;
  Eigen::VectorXd hr_ow, hr_ow_dropped;
  std::vector<Eigen::Index> dropped;  // 0-based unit ids
  double max_ipw_weight = 0.0;

  /// Largest per-contrast fold change, max(a/b, b/a).
  static double fold(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    double f = 1.0;
    for (Eigen::Index j = 0; j < a.size(); ++j) f = std::max({f, a[j] / b[j], b[j] / a[j]});
    return f;
  }
  double ipw_fold_change() const { return fold(hr_ipw, hr_ipw_dropped); }
  double ow_fold_change() const { return fold(hr_ow, hr_ow_dropped); }
};

/// Three-arm synthetic cohort with weak overlap plus a few units deep in
/// the tail of the propensity distribution who are assigned to the arm they
/// were least likely to receive and stay event-free to the end of follow-up. Compares IPW and OW hazard
/// ratios before and after removing the units with the smallest estimated
/// propensity of their received arm.
inline OverlapDemo poor_overlap_demo(std::uint64_t seed = 2024, Eigen::Index n = 2000, int outliers = 3,
                                     double extremity = 2.5, double exit_quantile = 0.4) {
  ScenarioConfig cfg;
  cfg.psi = 2.0;
  cfg.n = n;
  Calibration cal;
  cal.alpha = Eigen::VectorXd::Constant(2, -0.6);
  cal.lambda_c = 0.3;
  Engine eng = make_engine(seed);
  ReplicateData rd = generate_replicate(cfg, cal, derive_seed(seed, 0));
  Cohort c = rd.cohort;
  const Eigen::VectorXd b = unit_vector(cfg.b);
  std::normal_distribution<double> jitter(0.0, 0.05);
  const Eigen::Index base = c.n();
  std::vector<double> sorted_time(c.time.data(), c.time.data() + c.n());
  std::sort(sorted_time.begin(), sorted_time.end());
  const double latest = sorted_time[static_cast<std::size_t>(exit_quantile * static_cast<double>(c.n() - 1))];
  c.time.conservativeResize(base + outliers);
  c.event.conservativeResize(base + outliers);
  c.treatment.conservativeResize(base + outliers);
  c.covariates.conservativeResize(base + outliers, Eigen::NoChange);
  for (int k = 0; k < outliers; ++k) {
    const Eigen::Index i = base + k;
    Eigen::VectorXd x = extremity * b / b.cwiseAbs().maxCoeff();
    x.head(3) = x.head(3).unaryExpr([&](double v) { return v + jitter(eng); });
    x.tail(3) = x.tail(3).unaryExpr([](double v) { return v > 0 ? 0.5 : -0.5; });
    c.covariates.row(i) = x.transpose();
    c.treatment[i] = 2;  // eta_2 = a - psi b'x is smallest here
    c.time[i] = latest;
    c.event[i] = 0;
  }
  c = validate_cohort(c);

  OverlapDemo demo;
  const PropensityFit ps = fit_multinomial_logit(c);
  const Eigen::VectorXd w_ipw = compute_weights(ps, c.treatment, WeightScheme::ipw()).weights;
  const Eigen::VectorXd w_ow = compute_weights(ps, c.treatment, WeightScheme::ow()).weights;
  demo.max_ipw_weight = w_ipw.maxCoeff();
  demo.hr_ipw = fit_mhr(c, w_ipw).hr;
  demo.hr_ow = fit_mhr(c, w_ow).hr;

  std::vector<Eigen::Index> order(static_cast<std::size_t>(c.n()));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b2) {
    return ps.probs(a, c.treatment[a]) < ps.probs(b2, c.treatment[b2]);
  });
  demo.dropped.assign(order.begin(), order.begin() + outliers);
  std::vector<Eigen::Index> keep(order.begin() + outliers, order.end());
  std::sort(keep.begin(), keep.end());
  const Cohort kept = select_units(c, keep);
  const PropensityFit ps2 = fit_multinomial_logit(kept);
  demo.hr_ipw_dropped = fit_mhr(kept, compute_weights(ps2, kept.treatment, WeightScheme::ipw()).weights).hr;
  demo.hr_ow_dropped = fit_mhr(kept, compute_weights(ps2, kept.treatment, WeightScheme::ow()).weights).hr;
  demo.cohort = std::move(c);
  return demo;
}

}  // namespace wcox
