#pragma once

// Weighted marginal Cox model with one indicator per non-reference
// treatment level. Ties follow the Breslow convention: every event at time t
// sees the risk set {l : Y_l >= t}.

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/Eigenvalues>
#include <Eigen/LU>
#include <Eigen/SVD>

#include <boost/math/distributions/normal.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "wcox/data_model.hpp"
#include "wcox/error.hpp"
#include "wcox/parallel.hpp"
#include "wcox/propensity.hpp"
#include "wcox/rng.hpp"
#include "wcox/summation.hpp"

namespace wcox {

// ---------------------------------------------------------------------------
// Risk-set bookkeeping

/// Unit indices sorted by ascending observed time (stable).
inline std::vector<Eigen::Index> time_order(const Eigen::VectorXd& time) {
  std::vector<Eigen::Index> order(static_cast<std::size_t>(time.size()));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) { return time[a] < time[b]; });
  return order;
}

/// Per-level weighted at-risk and event totals at each distinct event time.
struct RiskTable {
  std::vector<double> event_time;  // ascending, distinct
  Eigen::MatrixXd at_risk;         // K x levels
  Eigen::MatrixXd events;          // K x levels
  Eigen::Index n = 0;
  double weight_scale = 1.0;  // mean weight; stopping rules are relative to it

  Eigen::Index size() const { return static_cast<Eigen::Index>(event_time.size()); }
  int levels() const { return static_cast<int>(at_risk.cols()); }

  /// Number of event times <= t.
  Eigen::Index count_through(double t) const {
    return static_cast<Eigen::Index>(std::upper_bound(event_time.begin(), event_time.end(), t) - event_time.begin());
  }
};

inline RiskTable build_risk_table(const Eigen::VectorXd& time, const Eigen::VectorXi& event, const Eigen::VectorXi& group,
                                  int levels, const Eigen::VectorXd& weights, const std::vector<Eigen::Index>& order) {
  const Eigen::Index n = time.size();
  RiskTable tab;
  tab.n = n;
  if (n > 0 && weights.sum() > 0.0) tab.weight_scale = weights.sum() / static_cast<double>(n);
  std::vector<double> times;
  std::vector<double> risk_rows;
  std::vector<double> event_rows;
  std::vector<double> running(static_cast<std::size_t>(levels), 0.0);
  std::vector<double> block_events(static_cast<std::size_t>(levels), 0.0);
  Eigen::Index hi = n;
  while (hi > 0) {
    const double t = time[order[static_cast<std::size_t>(hi - 1)]];
    Eigen::Index lo = hi - 1;
    while (lo > 0 && time[order[static_cast<std::size_t>(lo - 1)]] == t) --lo;
    bool any_event = false;
    std::fill(block_events.begin(), block_events.end(), 0.0);
    for (Eigen::Index r = lo; r < hi; ++r) {
      const Eigen::Index i = order[static_cast<std::size_t>(r)];
      const auto g = static_cast<std::size_t>(group[i]);
      running[g] += weights[i];
      if (event[i]) {
        block_events[g] += weights[i];
        any_event = true;
      }
    }
    if (any_event) {
      times.push_back(t);
      risk_rows.insert(risk_rows.end(), running.begin(), running.end());
      event_rows.insert(event_rows.end(), block_events.begin(), block_events.end());
    }
    hi = lo;
  }
  const auto K = static_cast<Eigen::Index>(times.size());
  tab.event_time.assign(times.rbegin(), times.rend());
  tab.at_risk.resize(K, levels);
  tab.events.resize(K, levels);
  for (Eigen::Index k = 0; k < K; ++k)
    for (int g = 0; g < levels; ++g) {
      const auto src = static_cast<std::size_t>((K - 1 - k) * levels + g);
      tab.at_risk(k, g) = risk_rows[src];
      tab.events(k, g) = event_rows[src];
    }
  return tab;
}

inline RiskTable build_risk_table(const Cohort& c, const Eigen::VectorXd& weights) {
  return build_risk_table(c.time, c.event, c.treatment, c.levels(), weights, time_order(c.time));
}

/// Risk-set processes at event time index k, normalized by 1/n.
struct RiskProcesses {
  double S0 = 0.0;
  Eigen::VectorXd S1;
  Eigen::MatrixXd S2;
  Eigen::VectorXd Dbar;
};

inline RiskProcesses risk_processes(const RiskTable& tab, Eigen::Index k, const Eigen::VectorXd& tau) {
  const int J = tab.levels() - 1;
  RiskProcesses rp;
  rp.S1.resize(J);
  const double inv_n = 1.0 / static_cast<double>(tab.n);
  rp.S0 = tab.at_risk(k, 0) * inv_n;
  for (int j = 0; j < J; ++j) {
    rp.S1[j] = tab.at_risk(k, j + 1) * std::exp(tau[j]) * inv_n;
    rp.S0 += rp.S1[j];
  }
  rp.S2 = rp.S1.asDiagonal();  // indicators are mutually exclusive: D D' = diag(D)
  rp.Dbar = rp.S1 / rp.S0;
  return rp;
}

// ---------------------------------------------------------------------------
// Score, information and log partial likelihood

struct ScoreEval {
  Eigen::VectorXd score;
  double loglik = 0.0;
  Eigen::MatrixXd info;
};

inline ScoreEval evaluate(const RiskTable& tab, const Eigen::VectorXd& tau) {
  const int L = tab.levels();
  const int J = L - 1;
  ScoreEval ev{Eigen::VectorXd::Zero(J), 0.0, Eigen::MatrixXd::Zero(J, J)};
  Eigen::VectorXd et(L);
  et[0] = 1.0;
  for (int j = 0; j < J; ++j) et[j + 1] = std::exp(tau[j]);
  Eigen::VectorXd p(J);
  detail::CompensatedSum ll;
  for (Eigen::Index k = 0; k < tab.size(); ++k) {
    double s0 = tab.at_risk(k, 0);
    double d = tab.events(k, 0);
    for (int j = 0; j < J; ++j) {
      p[j] = tab.at_risk(k, j + 1) * et[j + 1];
      s0 += p[j];
      d += tab.events(k, j + 1);
      ll.add(tab.events(k, j + 1) * tau[j]);
    }
    if (d == 0.0) continue;
    p /= s0;
    ll.add(-d * std::log(s0));
    for (int j = 0; j < J; ++j) {
      ev.score[j] += tab.events(k, j + 1) - d * p[j];
      ev.info(j, j) += d * p[j];
      for (int l = 0; l < J; ++l) ev.info(j, l) -= d * p[j] * p[l];
    }
  }
  ev.loglik = ll.value();
  return ev;
}

/// Score, log partial likelihood and observed information of the weighted
/// marginal Cox model at `tau`.
inline ScoreEval evaluate_score(const Cohort& cohort, const Eigen::VectorXd& weights, const Eigen::VectorXd& tau) {
  if (cohort.event_count() == 0) throw ValidationError("all units are censored; no events to fit");
  if (weights.size() != cohort.n()) throw ValidationError("weight vector length does not match the cohort");
  if (tau.size() != cohort.contrasts()) throw ValidationError("tau length does not match the number of contrasts");
  return evaluate(build_risk_table(cohort, weights), tau);
}

// ---------------------------------------------------------------------------
// Point estimation

struct CoxOptions {
  double score_tol = 1e-8;
  double step_tol = 1e-10;
  int max_iterations = 50;
  int max_halvings = 30;
  double divergence_bound = 20.0;
};

enum class VarianceMethod { none, robust, bootstrap, model };

inline std::string to_string(VarianceMethod m) {
  switch (m) {
    case VarianceMethod::none: return "none";
    case VarianceMethod::robust: return "robust";
    case VarianceMethod::bootstrap: return "bootstrap";
    case VarianceMethod::model: return "model";
  }
  return "?";
}

struct MhrEstimate {
  Eigen::VectorXd tau;
  Eigen::VectorXd hr;
  Eigen::MatrixXd cov_tau;
  Eigen::VectorXd se;
  Eigen::VectorXd ci_low;
  Eigen::VectorXd ci_high;
  double level = 0.95;
  VarianceMethod variance_method = VarianceMethod::none;
  bool converged = false;
  int iterations = 0;
  double score_norm = std::numeric_limits<double>::quiet_NaN();
  double loglik = std::numeric_limits<double>::quiet_NaN();
  Eigen::MatrixXd information;
  std::string reference_label;
  std::vector<std::string> contrast_labels;
};

/// Damped Newton-Raphson on the weighted partial likelihood, from tau = 0.
inline MhrEstimate fit_mhr(const RiskTable& tab, const CoxOptions& opt = {}) {
  const int J = tab.levels() - 1;
  if (tab.size() == 0) throw ValidationError("all units are censored; no events to fit");
  MhrEstimate est;
  Eigen::VectorXd tau = Eigen::VectorXd::Zero(J);
  ScoreEval ev = evaluate(tab, tau);
  for (int it = 0;; ++it) {
    est.iterations = it;
    est.score_norm = ev.score.lpNorm<Eigen::Infinity>();
    if (est.score_norm <= opt.score_tol * tab.weight_scale) {
      // a flat tail reached only after drifting far out: the Newton step is
      // still O(1) there while at a genuine optimum it is negligible
      const Eigen::VectorXd polish = ev.info.ldlt().solve(ev.score);
      if (tau.lpNorm<Eigen::Infinity>() > 5.0 && polish.lpNorm<Eigen::Infinity>() > 1e-4)
        throw ConvergenceError("nonconvergence: separation in survival ordering");
      // one more Newton step so the absolute score is far below tolerance
      // whatever the weight scale
      ScoreEval ev_p = evaluate(tab, tau + polish);
      if (std::isfinite(ev_p.loglik) && ev_p.score.lpNorm<Eigen::Infinity>() <= est.score_norm) {
        tau += polish;
        ev = std::move(ev_p);
        est.iterations = it + 1;
        est.score_norm = ev.score.lpNorm<Eigen::Infinity>();
      }
      break;
    }
    if (it >= opt.max_iterations)
      throw ConvergenceError("marginal Cox model did not converge in " + std::to_string(opt.max_iterations) +
                             " iterations");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(ev.info, Eigen::EigenvaluesOnly);
    const double lmax = eig.eigenvalues().maxCoeff();
    const double lmin = eig.eigenvalues().minCoeff();
    if (!(lmax > 0.0 && lmin > 1e-14 * lmax)) {
      if (tau.lpNorm<Eigen::Infinity>() > 5.0)
        throw ConvergenceError("nonconvergence: separation in survival ordering");
      throw ConvergenceError("singular information matrix in the marginal Cox model");
    }
    const Eigen::VectorXd step = ev.info.ldlt().solve(ev.score);
    const bool last = step.lpNorm<Eigen::Infinity>() <= opt.step_tol;
    double t = 1.0;
    bool accepted = false;
    for (int h = 0; h <= opt.max_halvings; ++h, t *= 0.5) {
      const Eigen::VectorXd cand = tau + t * step;
      ScoreEval ev_c = evaluate(tab, cand);
      if (std::isfinite(ev_c.loglik) && ev_c.loglik >= ev.loglik - 1e-12 * (tab.weight_scale + std::abs(ev.loglik))) {
        tau = cand;
        ev = std::move(ev_c);
        accepted = true;
        break;
      }
    }
    if (!accepted) throw ConvergenceError("marginal Cox line search failed to increase the partial likelihood");
    if (tau.lpNorm<Eigen::Infinity>() > opt.divergence_bound)
      throw ConvergenceError("nonconvergence: separation in survival ordering");
    if (last) {
      est.iterations = it + 1;
      est.score_norm = ev.score.lpNorm<Eigen::Infinity>();
      break;
    }
  }
  est.converged = true;
  est.tau = tau;
  est.hr = tau.array().exp();
  est.loglik = ev.loglik;
  est.information = ev.info;
  return est;
}

inline MhrEstimate fit_mhr(const Cohort& cohort, const Eigen::VectorXd& weights, const CoxOptions& opt = {}) {
  if (weights.size() != cohort.n()) throw ValidationError("weight vector length does not match the cohort");
  if (!weights.allFinite() || weights.minCoeff() < 0.0) throw ValidationError("weights must be finite and nonnegative");
  if (cohort.event_count() == 0) throw ValidationError("all units are censored; no events to fit");
  MhrEstimate est = fit_mhr(build_risk_table(cohort, weights), opt);
  est.reference_label = cohort.treatment_labels.front();
  est.contrast_labels.assign(cohort.treatment_labels.begin() + 1, cohort.treatment_labels.end());
  return est;
}

// ---------------------------------------------------------------------------
// Confidence intervals

struct HazardRatioInterval {
  double hr = 1.0;
  double low = 1.0;
  double high = 1.0;
};

inline double normal_quantile(double p) { return boost::math::quantile(boost::math::normal(), p); }

/// exp(tau +- z se) with z the standard normal quantile at (1 + level) / 2.
inline std::vector<HazardRatioInterval> confidence_intervals(const Eigen::VectorXd& tau, const Eigen::MatrixXd& cov,
                                                             double level = 0.95) {
  if (!(level > 0.0 && level < 1.0)) throw ValidationError("confidence level must lie in (0,1)");
  const double z = normal_quantile(0.5 + 0.5 * level);
  std::vector<HazardRatioInterval> out;
  for (Eigen::Index j = 0; j < tau.size(); ++j) {
    const double se = std::sqrt(std::max(0.0, cov(j, j)));
    out.push_back({std::exp(tau[j]), std::exp(tau[j] - z * se), std::exp(tau[j] + z * se)});
  }
  return out;
}

inline void attach_covariance(MhrEstimate& est, const Eigen::MatrixXd& cov, VarianceMethod method, double level = 0.95) {
  est.cov_tau = cov;
  est.variance_method = method;
  est.level = level;
  const auto ci = confidence_intervals(est.tau, cov, level);
  const Eigen::Index J = est.tau.size();
  est.se.resize(J);
  est.ci_low.resize(J);
  est.ci_high.resize(J);
  for (Eigen::Index j = 0; j < J; ++j) {
    est.se[j] = std::sqrt(std::max(0.0, cov(j, j)));
    est.ci_low[j] = ci[static_cast<std::size_t>(j)].low;
    est.ci_high[j] = ci[static_cast<std::size_t>(j)].high;
  }
}

/// Inverse observed information, the model-based covariance used for the
/// unweighted comparators.
inline Eigen::MatrixXd information_covariance(const MhrEstimate& est) { return est.information.inverse(); }

// ---------------------------------------------------------------------------
// General-design weighted Cox regression (Breslow ties). Used for the
// covariate-adjusted comparator, where the design holds treatment
// indicators followed by covariates.

struct CoxFit {
  Eigen::VectorXd coef;
  Eigen::MatrixXd information;
  Eigen::MatrixXd cov;
  bool converged = false;
  int iterations = 0;
  double loglik = 0.0;
  double score_norm = 0.0;
};

namespace detail {

struct DesignEval {
  Eigen::VectorXd score;
  Eigen::MatrixXd info;
  double loglik = 0.0;
};

inline DesignEval evaluate_design(const Eigen::VectorXd& time, const Eigen::VectorXi& event, const Eigen::MatrixXd& x,
                                  const Eigen::VectorXd& w, const std::vector<Eigen::Index>& order,
                                  const Eigen::VectorXd& beta) {
  const Eigen::Index n = time.size();
  const Eigen::Index q = x.cols();
  DesignEval ev{Eigen::VectorXd::Zero(q), Eigen::MatrixXd::Zero(q, q), 0.0};
  const Eigen::VectorXd eta = x * beta;
  double s0 = 0.0;
  Eigen::VectorXd s1 = Eigen::VectorXd::Zero(q);
  Eigen::MatrixXd s2 = Eigen::MatrixXd::Zero(q, q);
  Eigen::Index hi = n;
  while (hi > 0) {
    const double t = time[order[static_cast<std::size_t>(hi - 1)]];
    Eigen::Index lo = hi - 1;
    while (lo > 0 && time[order[static_cast<std::size_t>(lo - 1)]] == t) --lo;
    double d = 0.0;
    Eigen::VectorXd dx = Eigen::VectorXd::Zero(q);
    for (Eigen::Index r = lo; r < hi; ++r) {
      const Eigen::Index i = order[static_cast<std::size_t>(r)];
      const double a = w[i] * std::exp(eta[i]);
      s0 += a;
      s1.noalias() += a * x.row(i).transpose();
      s2.noalias() += a * x.row(i).transpose() * x.row(i);
      if (event[i]) {
        d += w[i];
        dx.noalias() += w[i] * x.row(i).transpose();
        ev.loglik += w[i] * eta[i];
      }
    }
    if (d > 0.0) {
      const Eigen::VectorXd xbar = s1 / s0;
      ev.loglik -= d * std::log(s0);
      ev.score += dx - d * xbar;
      ev.info.noalias() += d * (s2 / s0 - xbar * xbar.transpose());
    }
    hi = lo;
  }
  return ev;
}

}  // namespace detail

inline CoxFit fit_cox(const Eigen::VectorXd& time, const Eigen::VectorXi& event, const Eigen::MatrixXd& design,
                      const Eigen::VectorXd& weights, const CoxOptions& opt = {}) {
  if (event.sum() == 0) throw ValidationError("all units are censored; no events to fit");
  // Centering leaves the coefficients unchanged and keeps exp(eta) in range.
  const Eigen::RowVectorXd center = design.colwise().mean();
  const Eigen::MatrixXd x = design.rowwise() - center;
  const auto order = time_order(time);
  CoxFit fit;
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(design.cols());
  auto ev = detail::evaluate_design(time, event, x, weights, order, beta);
  for (int it = 0;; ++it) {
    fit.iterations = it;
    fit.score_norm = ev.score.lpNorm<Eigen::Infinity>();
    if (fit.score_norm <= opt.score_tol) break;
    if (it >= opt.max_iterations) throw ConvergenceError("Cox regression did not converge");
    Eigen::LDLT<Eigen::MatrixXd> ldlt(ev.info);
    if (ldlt.info() != Eigen::Success || !(ldlt.vectorD().minCoeff() > 0.0))
      throw ConvergenceError("singular information matrix in Cox regression");
    const Eigen::VectorXd step = ldlt.solve(ev.score);
    const bool last = step.lpNorm<Eigen::Infinity>() <= opt.step_tol;
    double t = 1.0;
    bool accepted = false;
    for (int h = 0; h <= opt.max_halvings; ++h, t *= 0.5) {
      const Eigen::VectorXd cand = beta + t * step;
      auto ev_c = detail::evaluate_design(time, event, x, weights, order, cand);
      if (std::isfinite(ev_c.loglik) && ev_c.loglik >= ev.loglik - 1e-12 * (1.0 + std::abs(ev.loglik))) {
        beta = cand;
        ev = std::move(ev_c);
        accepted = true;
        break;
      }
    }
    if (!accepted) throw ConvergenceError("Cox regression line search failed");
    if (beta.lpNorm<Eigen::Infinity>() > opt.divergence_bound)
      throw ConvergenceError("nonconvergence: separation in survival ordering");
    if (last) {
      fit.iterations = it + 1;
      fit.score_norm = ev.score.lpNorm<Eigen::Infinity>();
      break;
    }
  }
  fit.converged = true;
  fit.coef = beta;
  fit.loglik = ev.loglik;
  fit.information = ev.info;
  fit.cov = ev.info.inverse();
  return fit;
}

/// Cox model on treatment indicators plus all cohort covariates. The first
/// J coefficients (and the leading J x J block of `cov`) are the treatment
/// log hazard ratios conditional on the covariates.
inline CoxFit fit_multivariable_cox(const Cohort& cohort, const CoxOptions& opt = {}) {
  const int J = cohort.contrasts();
  Eigen::MatrixXd design(cohort.n(), J + cohort.p());
  for (Eigen::Index i = 0; i < cohort.n(); ++i) design.row(i).head(J) = cohort.indicator(i).transpose();
  if (cohort.p() > 0) design.rightCols(cohort.p()) = cohort.covariates;
  return fit_cox(cohort.time, cohort.event, design, Eigen::VectorXd::Ones(cohort.n()), opt);
}

// ---------------------------------------------------------------------------
// Robust sandwich variance from the stacked estimating equations
// (outcome score psi_i stacked on the propensity score pi_i).

/// Per-unit weighted score contributions psi_i = w_i delta_i (D_i - Dbar(Y_i)).
inline Eigen::MatrixXd score_contributions(const Cohort& cohort, const Eigen::VectorXd& weights,
                                           const Eigen::VectorXd& tau) {
  const RiskTable tab = build_risk_table(cohort, weights);
  const int J = cohort.contrasts();
  Eigen::MatrixXd psi = Eigen::MatrixXd::Zero(cohort.n(), J);
  for (Eigen::Index i = 0; i < cohort.n(); ++i) {
    if (!cohort.event[i]) continue;
    const Eigen::Index k = tab.count_through(cohort.time[i]) - 1;
    const RiskProcesses rp = risk_processes(tab, k, tau);
    psi.row(i) = weights[i] * (cohort.indicator(i) - rp.Dbar).transpose();
  }
  return psi;
}

/// Corrected scores Psi_i: the score residual minus the risk-set correction
/// w_i sum_{events j: Y_j <= Y_i} w_j exp(eta_i) / S0(Y_j) (D_i - Dbar(Y_j)),
/// with S0 the unnormalized weighted risk-set sum.
inline Eigen::MatrixXd corrected_scores(const Cohort& cohort, const Eigen::VectorXd& weights,
                                        const Eigen::VectorXd& tau) {
  const RiskTable tab = build_risk_table(cohort, weights);
  const int J = cohort.contrasts();
  const Eigen::Index K = tab.size();
  // cum0[k] = sum_{k' < k} dW/S0,  cum1.row(k) = sum_{k' < k} dW Dbar / S0
  Eigen::VectorXd cum0 = Eigen::VectorXd::Zero(K + 1);
  Eigen::MatrixXd cum1 = Eigen::MatrixXd::Zero(K + 1, J);
  Eigen::MatrixXd dbar(K, J);
  for (Eigen::Index k = 0; k < K; ++k) {
    const RiskProcesses rp = risk_processes(tab, k, tau);
    dbar.row(k) = rp.Dbar.transpose();
    const double dW = tab.events.row(k).sum();
    const double inc = dW / (rp.S0 * static_cast<double>(tab.n));
    cum0[k + 1] = cum0[k] + inc;
    cum1.row(k + 1) = cum1.row(k) + inc * rp.Dbar.transpose();
  }
  Eigen::MatrixXd Psi = Eigen::MatrixXd::Zero(cohort.n(), J);
  for (Eigen::Index i = 0; i < cohort.n(); ++i) {
    const Eigen::Index k = tab.count_through(cohort.time[i]);
    const Eigen::RowVectorXd d = cohort.indicator(i).transpose();
    const double eta = cohort.treatment[i] > 0 ? tau[cohort.treatment[i] - 1] : 0.0;
    Eigen::RowVectorXd row = -weights[i] * std::exp(eta) * (d * cum0[k] - cum1.row(k));
    if (cohort.event[i]) row += weights[i] * (d - dbar.row(k - 1));
    Psi.row(i) = row;
  }
  return Psi;
}

/// Stacked estimating function (sum_i psi_i(tau, gamma), sum_i pi_i(gamma))
/// with the weights recomputed from gamma under `scheme`.
inline Eigen::VectorXd stacked_estimating_function(const Cohort& cohort, const Eigen::MatrixXd& design,
                                                   const WeightScheme& scheme, const Eigen::VectorXd& tau,
                                                   const Eigen::MatrixXd& gamma) {
  const Eigen::MatrixXd probs = multinomial_probs(design, gamma);
  const Eigen::VectorXd w = weights_from_gamma(design, cohort.treatment, gamma, scheme);
  const Eigen::VectorXd psi = evaluate(build_risk_table(cohort, w), tau).score;
  const Eigen::VectorXd pi = multinomial_score(design, cohort.treatment, probs);
  Eigen::VectorXd out(psi.size() + pi.size());
  out << psi, pi;
  return out;
}

struct StackedPieces {
  Eigen::MatrixXd psi;  // n x J
  Eigen::MatrixXd Psi;  // n x J
  Eigen::MatrixXd pi;   // n x J(p+1)
  Eigen::MatrixXd A_tt, A_tg, A_gt, A_gg;
};

struct SandwichResult {
  Eigen::MatrixXd cov_joint;
  Eigen::MatrixXd cov_tau;
  /// Covariance that treats the weights as known (gamma rows/columns removed).
  Eigen::MatrixXd cov_tau_fixed_weights;
  Eigen::MatrixXd A;
  Eigen::MatrixXd B;
  StackedPieces pieces;
};

struct SandwichOptions {
  double fd_step = 1e-6;
  double condition_limit = 1e14;
};

namespace detail {

inline Eigen::MatrixXd sandwich(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B, Eigen::Index n, double cond_limit) {
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(A);
  const auto& sv = svd.singularValues();
  const double cond = sv[0] / sv[sv.size() - 1];
  if (!(sv[sv.size() - 1] > 0.0) || !(cond < cond_limit))
    throw ConvergenceError("singular bread matrix in sandwich variance (condition estimate " + std::to_string(cond) +
                           ")");
  const Eigen::MatrixXd Ainv = A.fullPivLu().inverse();
  Eigen::MatrixXd V = Ainv * B * Ainv.transpose() / static_cast<double>(n);
  return 0.5 * (V + V.transpose());
}

}  // namespace detail

/// Lin-Wei robust covariance of tau with the weights treated as fixed.
inline Eigen::MatrixXd robust_covariance_fixed_weights(const Cohort& cohort, const Eigen::VectorXd& weights,
                                                       const Eigen::VectorXd& tau) {
  const Eigen::MatrixXd Psi = corrected_scores(cohort, weights, tau);
  const Eigen::MatrixXd info = evaluate(build_risk_table(cohort, weights), tau).info;
  const auto n = static_cast<double>(cohort.n());
  return detail::sandwich(info / n, Psi.transpose() * Psi / n, cohort.n(), 1e14);
}

/// Sandwich covariance A^-1 B A^-T / n of (tau, gamma) accounting for the
/// estimated propensity model. The cross block dpsi/dgamma is obtained by
/// central differences of the outcome score with tau held fixed.
inline SandwichResult sandwich_covariance(const Cohort& cohort, const PropensityFit& ps, const WeightScheme& scheme,
                                          const Eigen::VectorXd& tau, const SandwichOptions& opt = {}) {
  const Eigen::Index n = cohort.n();
  const auto nd = static_cast<double>(n);
  const Eigen::Index J = cohort.contrasts();
  const Eigen::Index q = ps.gamma.size();
  const Eigen::VectorXd w = weights_from_gamma(ps.design, cohort.treatment, ps.gamma, scheme);
  const auto order = time_order(cohort.time);
  const RiskTable tab = build_risk_table(cohort.time, cohort.event, cohort.treatment, cohort.levels(), w, order);

  SandwichResult res;
  StackedPieces& pc = res.pieces;
  pc.psi = score_contributions(cohort, w, tau);
  pc.Psi = corrected_scores(cohort, w, tau);
  pc.pi = multinomial_score_contributions(ps.design, cohort.treatment, ps.probs);
  pc.A_tt = evaluate(tab, tau).info / nd;
  pc.A_gg = multinomial_information(ps.design, ps.probs) / nd;
  pc.A_gt = Eigen::MatrixXd::Zero(q, J);
  pc.A_tg = Eigen::MatrixXd::Zero(J, q);
  if (scheme.depends_on_propensity()) {
    const Eigen::VectorXd g0 = flatten_gamma(ps.gamma);
    const Eigen::Index cols = ps.gamma.cols();
    for (Eigen::Index k = 0; k < q; ++k) {
      const double h = opt.fd_step * std::max(1.0, std::abs(g0[k]));
      Eigen::VectorXd gp = g0, gm = g0;
      gp[k] += h;
      gm[k] -= h;
      const Eigen::VectorXd wp = weights_from_gamma(ps.design, cohort.treatment, unflatten_gamma(gp, J, cols), scheme);
      const Eigen::VectorXd wm = weights_from_gamma(ps.design, cohort.treatment, unflatten_gamma(gm, J, cols), scheme);
      const Eigen::VectorXd sp =
          evaluate(build_risk_table(cohort.time, cohort.event, cohort.treatment, cohort.levels(), wp, order), tau).score;
      const Eigen::VectorXd sm =
          evaluate(build_risk_table(cohort.time, cohort.event, cohort.treatment, cohort.levels(), wm, order), tau).score;
      pc.A_tg.col(k) = -(sp - sm) / (2.0 * h) / nd;
    }
  }

  res.A.resize(J + q, J + q);
  res.A << pc.A_tt, pc.A_tg, pc.A_gt, pc.A_gg;
  Eigen::MatrixXd Phi(n, J + q);
  Phi << pc.Psi, pc.pi;
  res.B = Phi.transpose() * Phi / nd;
  res.cov_joint = detail::sandwich(res.A, res.B, n, opt.condition_limit);
  res.cov_tau = res.cov_joint.topLeftCorner(J, J);
  res.cov_tau_fixed_weights =
      detail::sandwich(pc.A_tt, res.B.topLeftCorner(J, J), n, opt.condition_limit);
  return res;
}

// ---------------------------------------------------------------------------
// Nonparametric bootstrap

struct BootstrapOptions {
  int replicates = 200;
  std::uint64_t seed = 1;
  unsigned threads = 1;
  double max_drop_fraction = 0.2;
  MultinomialOptions ps;
  CoxOptions cox;
};

struct BootstrapResult {
  Eigen::MatrixXd cov_tau;
  std::vector<Eigen::VectorXd> draws;
  int requested = 0;
  int dropped = 0;
  std::map<std::string, int> drop_reasons;
};

namespace detail {

inline Eigen::MatrixXd empirical_covariance(const std::vector<Eigen::VectorXd>& draws) {
  const auto m = static_cast<Eigen::Index>(draws.size());
  const Eigen::Index J = draws.front().size();
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(J);
  for (const auto& d : draws) mean += d;
  mean /= static_cast<double>(m);
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(J, J);
  for (const auto& d : draws) cov.noalias() += (d - mean) * (d - mean).transpose();
  return cov / static_cast<double>(m - 1);
}

}  // namespace detail

/// Resamples units with replacement, refits the propensity model and the
/// weighted marginal Cox model on each resample, and returns the empirical
/// covariance of the retained draws. Replicate b uses seed
/// derive_seed(seed, b), so results do not depend on the thread count.
inline BootstrapResult bootstrap_covariance(const Cohort& cohort, const WeightScheme& scheme,
                                            const BootstrapOptions& opt = {}) {
  if (opt.replicates < 2) throw ValidationError("bootstrap needs at least 2 replicates");
  const auto B = static_cast<std::size_t>(opt.replicates);
  std::vector<Eigen::VectorXd> draws(B);
  std::vector<std::string> failure(B);
  const Eigen::Index n = cohort.n();
  const int L = cohort.levels();

  parallel_for(
      B,
      [&](std::size_t b) {
        Engine eng = make_engine(derive_seed(opt.seed, b));
        std::uniform_int_distribution<Eigen::Index> pick(0, n - 1);
        std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
        for (auto& v : idx) v = pick(eng);
        Cohort rs = select_units(cohort, idx);
        if (rs.event_count() == 0) {
          failure[b] = "no events";
          return;
        }
        std::vector<int> seen(static_cast<std::size_t>(L), 0);
        for (Eigen::Index i = 0; i < n; ++i) seen[static_cast<std::size_t>(rs.treatment[i])] = 1;
        if (std::find(seen.begin(), seen.end(), 0) != seen.end()) {
          failure[b] = "missing treatment level";
          return;
        }
        try {
          Eigen::VectorXd w;
          if (scheme.depends_on_propensity()) {
            const PropensityFit ps = fit_multinomial_logit(rs, opt.ps);
            w = compute_weights(ps, rs.treatment, scheme).weights;
          } else {
            w = Eigen::VectorXd::Ones(n);
          }
          draws[b] = fit_mhr(rs, w, opt.cox).tau;
        } catch (const PropensityConvergenceError&) {
          failure[b] = "propensity nonconvergence";
        } catch (const ConvergenceError&) {
          failure[b] = "outcome nonconvergence";
        } catch (const ValidationError&) {
          failure[b] = "invalid resample";
        }
      },
      opt.threads);

  BootstrapResult res;
  res.requested = opt.replicates;
  for (std::size_t b = 0; b < B; ++b) {
    if (failure[b].empty()) {
      res.draws.push_back(draws[b]);
    } else {
      ++res.dropped;
      ++res.drop_reasons[failure[b]];
    }
  }
  if (static_cast<double>(res.dropped) > opt.max_drop_fraction * static_cast<double>(opt.replicates) ||
      res.draws.size() < 2) {
    std::string why;
    for (const auto& [reason, count] : res.drop_reasons)
      why += (why.empty() ? "" : ", ") + reason + ": " + std::to_string(count);
    throw ConvergenceError("bootstrap unstable: " + std::to_string(res.dropped) + " of " +
                           std::to_string(opt.replicates) + " replicates dropped (" + why + ")");
  }
  res.cov_tau = detail::empirical_covariance(res.draws);
  return res;
}

// ---------------------------------------------------------------------------
// End-to-end estimation

struct EstimationOptions {
  VarianceMethod variance = VarianceMethod::robust;
  BootstrapOptions bootstrap;
  MultinomialOptions ps;
  CoxOptions cox;
  double level = 0.95;
};

struct EstimationResult {
  MhrEstimate estimate;
  WeightSet weights;
  std::optional<PropensityFit> propensity;
  std::optional<BootstrapResult> bootstrap;
};

/// Fits the propensity model (unless the scheme is UNIT), forms the weights,
/// solves the weighted score equation and attaches the requested variance.
inline EstimationResult estimate_mhr(const Cohort& cohort, const WeightScheme& scheme,
                                     const EstimationOptions& opt = {}) {
  EstimationResult res;
  if (scheme.depends_on_propensity()) {
    res.propensity = fit_multinomial_logit(cohort, opt.ps);
    res.weights = compute_weights(*res.propensity, cohort.treatment, scheme);
  } else {
    res.weights = unit_weights(cohort.n());
  }
  res.estimate = fit_mhr(cohort, res.weights.weights, opt.cox);
  switch (opt.variance) {
    case VarianceMethod::none: break;
    case VarianceMethod::model:
      attach_covariance(res.estimate, information_covariance(res.estimate), VarianceMethod::model, opt.level);
      break;
    case VarianceMethod::robust: {
      Eigen::MatrixXd cov;
      if (res.propensity) {
        cov = sandwich_covariance(cohort, *res.propensity, scheme, res.estimate.tau).cov_tau;
      } else {
        cov = robust_covariance_fixed_weights(cohort, res.weights.weights, res.estimate.tau);
      }
      attach_covariance(res.estimate, cov, VarianceMethod::robust, opt.level);
      break;
    }
    case VarianceMethod::bootstrap: {
      BootstrapOptions bo = opt.bootstrap;
      bo.ps = opt.ps;
      bo.cox = opt.cox;
      res.bootstrap = bootstrap_covariance(cohort, scheme, bo);
      attach_covariance(res.estimate, res.bootstrap->cov_tau, VarianceMethod::bootstrap, opt.level);
      break;
    }
  }
  return res;
}

}  // namespace wcox
