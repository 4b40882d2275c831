#pragma once

// Generalized propensity scores from a multinomial logit, balancing weights
// (IPW / ATT / OW), trimming and covariate balance diagnostics.

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "wcox/data_model.hpp"
#include "wcox/error.hpp"

namespace wcox {

/// Fitted multinomial logit. Row j of `gamma` holds the coefficients of
/// level j+1 against the reference; column 0 is the intercept.
struct PropensityFit {
  Eigen::MatrixXd gamma;   // J x (p+1)
  Eigen::MatrixXd probs;   // n x (J+1)
  Eigen::MatrixXd design;  // n x (p+1)
  bool converged = false;
  int iterations = 0;
  double final_gradient_norm = std::numeric_limits<double>::quiet_NaN();
  double loglik = std::numeric_limits<double>::quiet_NaN();
  bool ridge_applied = false;
};

struct MultinomialOptions {
  double gradient_tol = 1e-8;
  int max_iterations = 100;
  int max_halvings = 30;
  double separation_bound = 30.0;
  double ridge = 1e-8;
  double condition_limit = 1e12;
};

/// Raised when Newton iterations stop before the gradient tolerance; carries
/// the last iterate.
class PropensityConvergenceError : public ConvergenceError {
 public:
  PropensityConvergenceError(const std::string& what, Eigen::MatrixXd last_gamma)
      : ConvergenceError(what), last_gamma_(std::move(last_gamma)) {}
  const Eigen::MatrixXd& last_gamma() const noexcept { return last_gamma_; }

 private:
  Eigen::MatrixXd last_gamma_;
};

inline Eigen::MatrixXd design_with_intercept(const Eigen::MatrixXd& x) {
  Eigen::MatrixXd d(x.rows(), x.cols() + 1);
  d.col(0).setOnes();
  if (x.cols() > 0) d.rightCols(x.cols()) = x;
  return d;
}

/// Softmax probabilities, n x (J+1), reference column first.
inline Eigen::MatrixXd multinomial_probs(const Eigen::MatrixXd& design, const Eigen::MatrixXd& gamma) {
  const Eigen::Index n = design.rows();
  const Eigen::Index J = gamma.rows();
  Eigen::MatrixXd eta(n, J + 1);
  eta.col(0).setZero();
  eta.rightCols(J) = design * gamma.transpose();
  Eigen::MatrixXd probs(n, J + 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double m = eta.row(i).maxCoeff();
    double s = 0.0;
    for (Eigen::Index k = 0; k <= J; ++k) s += (probs(i, k) = std::exp(eta(i, k) - m));
    probs.row(i) /= s;
  }
  return probs;
}

inline double multinomial_loglik(const Eigen::MatrixXd& design, const Eigen::VectorXi& treatment,
                                 const Eigen::MatrixXd& gamma) {
  const Eigen::MatrixXd eta = design * gamma.transpose();
  double ll = 0.0;
  for (Eigen::Index i = 0; i < design.rows(); ++i) {
    const double m = std::max(0.0, eta.row(i).maxCoeff());
    const double s = std::exp(-m) + (eta.row(i).array() - m).exp().sum();
    ll += (treatment[i] > 0 ? eta(i, treatment[i] - 1) : 0.0) - m - std::log(s);
  }
  return ll;
}

/// Per-unit score contributions pi_i = (D_i - e_i) (x) x_i as rows of an
/// n x J(p+1) matrix, index j*(p+1)+k.
inline Eigen::MatrixXd multinomial_score_contributions(const Eigen::MatrixXd& design, const Eigen::VectorXi& treatment,
                                                       const Eigen::MatrixXd& probs) {
  const Eigen::Index n = design.rows();
  const Eigen::Index q = design.cols();
  const Eigen::Index J = probs.cols() - 1;
  Eigen::MatrixXd out(n, J * q);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < J; ++j) {
      const double r = (treatment[i] == j + 1 ? 1.0 : 0.0) - probs(i, j + 1);
      out.block(i, j * q, 1, q) = r * design.row(i);
    }
  return out;
}

inline Eigen::VectorXd multinomial_score(const Eigen::MatrixXd& design, const Eigen::VectorXi& treatment,
                                         const Eigen::MatrixXd& probs) {
  return multinomial_score_contributions(design, treatment, probs).colwise().sum().transpose();
}

/// Fisher information sum_i (diag(e_i) - e_i e_i') (x) x_i x_i'.
inline Eigen::MatrixXd multinomial_information(const Eigen::MatrixXd& design, const Eigen::MatrixXd& probs) {
  const Eigen::Index q = design.cols();
  const Eigen::Index J = probs.cols() - 1;
  Eigen::MatrixXd info(J * q, J * q);
  Eigen::VectorXd c(design.rows());
  for (Eigen::Index j = 0; j < J; ++j)
    for (Eigen::Index l = j; l < J; ++l) {
      c = -probs.col(j + 1).cwiseProduct(probs.col(l + 1));
      if (j == l) c += probs.col(j + 1);
      const Eigen::MatrixXd block = design.transpose() * c.asDiagonal() * design;
      info.block(j * q, l * q, q, q) = block;
      if (l != j) info.block(l * q, j * q, q, q) = block.transpose();
    }
  return info;
}

inline Eigen::VectorXd flatten_gamma(const Eigen::MatrixXd& gamma) {
  Eigen::VectorXd v(gamma.size());
  for (Eigen::Index j = 0; j < gamma.rows(); ++j) v.segment(j * gamma.cols(), gamma.cols()) = gamma.row(j).transpose();
  return v;
}

inline Eigen::MatrixXd unflatten_gamma(const Eigen::VectorXd& v, Eigen::Index J, Eigen::Index q) {
  Eigen::MatrixXd g(J, q);
  for (Eigen::Index j = 0; j < J; ++j) g.row(j) = v.segment(j * q, q).transpose();
  return g;
}

/// Maximum-likelihood multinomial logit of treatment on the cohort
/// covariates (main effects plus intercept) by damped Newton-Raphson.
inline PropensityFit fit_multinomial_logit(const Cohort& cohort, const MultinomialOptions& opt = {}) {
  PropensityFit fit;
  fit.design = design_with_intercept(cohort.covariates);
  const Eigen::Index q = fit.design.cols();
  const Eigen::Index J = cohort.contrasts();
  Eigen::VectorXd theta = Eigen::VectorXd::Zero(J * q);

  auto loglik_at = [&](const Eigen::VectorXd& th) {
    return multinomial_loglik(fit.design, cohort.treatment, unflatten_gamma(th, J, q));
  };

  double ll = loglik_at(theta);
  for (int it = 0;; ++it) {
    const Eigen::MatrixXd gamma = unflatten_gamma(theta, J, q);
    const Eigen::MatrixXd probs = multinomial_probs(fit.design, gamma);
    const Eigen::VectorXd score = multinomial_score(fit.design, cohort.treatment, probs);
    fit.final_gradient_norm = score.lpNorm<Eigen::Infinity>();
    fit.iterations = it;
    if (fit.final_gradient_norm <= opt.gradient_tol) {
      fit.converged = true;
      fit.gamma = gamma;
      fit.probs = probs;
      fit.loglik = ll;
      return fit;
    }
    if (it >= opt.max_iterations)
      throw PropensityConvergenceError("propensity model did not converge in " + std::to_string(opt.max_iterations) +
                                           " iterations (gradient norm " + std::to_string(fit.final_gradient_norm) + ")",
                                       gamma);

    Eigen::MatrixXd info = multinomial_information(fit.design, probs);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(info, Eigen::EigenvaluesOnly);
    const double lmin = eig.eigenvalues().minCoeff();
    const double lmax = eig.eigenvalues().maxCoeff();
    if (!(lmin > 0.0) || lmax / lmin > opt.condition_limit) {
      info.diagonal().array() += opt.ridge;
      fit.ridge_applied = true;
    }
    const Eigen::VectorXd step = info.ldlt().solve(score);
    if (!step.allFinite()) throw PropensityConvergenceError("propensity Newton step is not finite", gamma);

    double t = 1.0;
    bool accepted = false;
    for (int h = 0; h <= opt.max_halvings; ++h, t *= 0.5) {
      const Eigen::VectorXd cand = theta + t * step;
      const double ll_c = loglik_at(cand);
      if (std::isfinite(ll_c) && ll_c >= ll - 1e-12 * (1.0 + std::abs(ll))) {
        theta = cand;
        ll = ll_c;
        accepted = true;
        break;
      }
    }
    if (!accepted)
      throw PropensityConvergenceError("propensity line search failed to increase the log-likelihood", gamma);
    if (theta.lpNorm<Eigen::Infinity>() > opt.separation_bound)
      throw PropensityConvergenceError("quasi-separation: propensity coefficient exceeds " +
                                           std::to_string(opt.separation_bound) + " in magnitude",
                                       unflatten_gamma(theta, J, q));
  }
}

// ---------------------------------------------------------------------------
// Balancing weights w_i = h(X_i) / e_{Z_i}(X_i).

enum class SchemeKind { ipw, att, ow, unit };

struct WeightScheme {
  SchemeKind kind = SchemeKind::ipw;
  int att_level = 0;  // ATT target level j'

  static WeightScheme ipw() { return {SchemeKind::ipw, 0}; }
  static WeightScheme ow() { return {SchemeKind::ow, 0}; }
  static WeightScheme unit() { return {SchemeKind::unit, 0}; }
  static WeightScheme att(int level) { return {SchemeKind::att, level}; }

  bool depends_on_propensity() const { return kind != SchemeKind::unit; }

  std::string name() const {
    switch (kind) {
      case SchemeKind::ipw: return "ipw";
      case SchemeKind::ow: return "ow";
      case SchemeKind::unit: return "unit";
      case SchemeKind::att: return "att:" + std::to_string(att_level);
    }
    return "?";
  }
  friend bool operator==(const WeightScheme&, const WeightScheme&) = default;
};

struct WeightSet {
  WeightScheme scheme;
  Eigen::VectorXd weights;
  Eigen::VectorXd tilt;
  std::vector<Eigen::Index> trimmed_ids;
  std::optional<double> threshold;
};

/// Tilting function h evaluated on one row of generalized propensities.
inline double tilt_value(const Eigen::Ref<const Eigen::RowVectorXd>& e, const WeightScheme& scheme) {
  switch (scheme.kind) {
    case SchemeKind::ipw:
    case SchemeKind::unit: return 1.0;
    case SchemeKind::att: return e[scheme.att_level];
    case SchemeKind::ow: return 1.0 / e.cwiseInverse().sum();
  }
  return 1.0;
}

inline WeightSet unit_weights(Eigen::Index n) {
  return {WeightScheme::unit(), Eigen::VectorXd::Ones(n), Eigen::VectorXd::Ones(n), {}, std::nullopt};
}

inline WeightSet compute_weights(const Eigen::MatrixXd& probs, const Eigen::VectorXi& treatment,
                                 const WeightScheme& scheme) {
  const Eigen::Index n = treatment.size();
  if (scheme.kind == SchemeKind::unit) return unit_weights(n);
  if (probs.rows() != n) throw ValidationError("propensity rows do not match the treatment column");
  if (scheme.kind == SchemeKind::att && (scheme.att_level < 0 || scheme.att_level >= probs.cols()))
    throw ValidationError("ATT target level out of range: " + std::to_string(scheme.att_level));
  WeightSet ws{scheme, Eigen::VectorXd(n), Eigen::VectorXd(n), {}, std::nullopt};
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto row = probs.row(i);
    if (!(row.minCoeff() > 0.0) || !(row.maxCoeff() < 1.0))
      throw ValidationError("propensity outside (0,1) at row " + std::to_string(i + 1) + " violates positivity",
                            {static_cast<std::size_t>(i + 1)});
    ws.tilt[i] = tilt_value(row, scheme);
    ws.weights[i] = ws.tilt[i] / row[treatment[i]];
  }
  return ws;
}

inline WeightSet compute_weights(const PropensityFit& fit, const Eigen::VectorXi& treatment, const WeightScheme& scheme) {
  return compute_weights(fit.probs, treatment, scheme);
}

/// Weights as a function of the propensity coefficients.
inline Eigen::VectorXd weights_from_gamma(const Eigen::MatrixXd& design, const Eigen::VectorXi& treatment,
                                          const Eigen::MatrixXd& gamma, const WeightScheme& scheme) {
  if (scheme.kind == SchemeKind::unit) return Eigen::VectorXd::Ones(treatment.size());
  return compute_weights(multinomial_probs(design, gamma), treatment, scheme).weights;
}

// ---------------------------------------------------------------------------
// Trimming

struct TrimReport {
  double threshold = 0.0;
  std::vector<Eigen::Index> removed_ids;
  std::vector<Eigen::Index> removed_per_group;
  bool refit = true;
};

struct TrimResult {
  Cohort cohort;
  PropensityFit fit;
  TrimReport report;
};

/// Drops every unit whose smallest generalized propensity is below
/// `threshold`, then refits the propensity model on the survivors unless
/// `refit` is false (in which case the surviving rows of the original fit
/// are kept).
inline TrimResult trim(const Cohort& cohort, const PropensityFit& fit, double threshold, bool refit = true,
                       const MultinomialOptions& opt = {}) {
  const double upper = 1.0 / cohort.levels();
  if (!(threshold >= 0.0) || !(threshold < upper))
    throw ValidationError("trim threshold must lie in [0, " + std::to_string(upper) + ")");
  TrimResult res;
  res.report.threshold = threshold;
  res.report.refit = refit;
  res.report.removed_per_group.assign(static_cast<std::size_t>(cohort.levels()), 0);
  std::vector<Eigen::Index> keep;
  for (Eigen::Index i = 0; i < cohort.n(); ++i) {
    if (fit.probs.row(i).minCoeff() < threshold) {
      res.report.removed_ids.push_back(i);
      ++res.report.removed_per_group[static_cast<std::size_t>(cohort.treatment[i])];
    } else {
      keep.push_back(i);
    }
  }
  Eigen::Index group_total = 0;
  for (int g = 0; g < cohort.levels(); ++g) {
    group_total = (cohort.treatment.array() == g).count();
    if (res.report.removed_per_group[static_cast<std::size_t>(g)] == group_total)
      throw ValidationError("trimming removes every unit of treatment level '" +
                            cohort.treatment_labels[static_cast<std::size_t>(g)] + "'");
  }
  res.cohort = select_units(cohort, keep);
  if (res.report.removed_ids.empty()) {
    res.fit = fit;
  } else if (refit) {
    res.fit = fit_multinomial_logit(res.cohort, opt);
  } else {
    res.fit = fit;
    Eigen::MatrixXd probs(static_cast<Eigen::Index>(keep.size()), fit.probs.cols());
    Eigen::MatrixXd design(static_cast<Eigen::Index>(keep.size()), fit.design.cols());
    for (std::size_t r = 0; r < keep.size(); ++r) {
      probs.row(static_cast<Eigen::Index>(r)) = fit.probs.row(keep[r]);
      design.row(static_cast<Eigen::Index>(r)) = fit.design.row(keep[r]);
    }
    res.fit.probs = probs;
    res.fit.design = design;
  }
  return res;
}

// ---------------------------------------------------------------------------
// Balance diagnostics

struct GroupMoments {
  Eigen::MatrixXd mean;      // levels x p
  Eigen::MatrixXd variance;  // levels x p
};

struct SmdEntry {
  Eigen::Index covariate = 0;
  int group_a = 0;
  int group_b = 0;
  double unweighted = 0.0;
  double weighted = 0.0;
};

struct BalanceReport {
  std::vector<std::string> covariate_names;
  std::vector<std::string> group_labels;
  std::vector<SmdEntry> entries;
  GroupMoments unweighted;
  GroupMoments weighted;

  double max_abs_weighted() const {
    double m = 0.0;
    for (const auto& e : entries) m = std::max(m, std::abs(e.weighted));
    return m;
  }
};

/// Weighted within-group mean and variance. Weights are rescaled within the
/// group to sum to the group size, and the variance uses the n_g - 1
/// divisor, so unit weights give the ordinary sample variance.
inline GroupMoments group_moments(const Cohort& cohort, const Eigen::VectorXd& weights) {
  const int L = cohort.levels();
  const Eigen::Index p = cohort.p();
  GroupMoments gm{Eigen::MatrixXd::Zero(L, p), Eigen::MatrixXd::Zero(L, p)};
  for (int g = 0; g < L; ++g) {
    double wsum = 0.0;
    Eigen::Index ng = 0;
    for (Eigen::Index i = 0; i < cohort.n(); ++i)
      if (cohort.treatment[i] == g) {
        wsum += weights[i];
        ++ng;
      }
    if (ng == 0 || !(wsum > 0.0)) {
      gm.mean.row(g).setConstant(std::numeric_limits<double>::quiet_NaN());
      gm.variance.row(g).setConstant(std::numeric_limits<double>::quiet_NaN());
      continue;
    }
    const double scale = static_cast<double>(ng) / wsum;
    for (Eigen::Index k = 0; k < p; ++k) {
      double m = 0.0;
      for (Eigen::Index i = 0; i < cohort.n(); ++i)
        if (cohort.treatment[i] == g) m += weights[i] * cohort.covariates(i, k);
      m /= wsum;
      double ss = 0.0;
      for (Eigen::Index i = 0; i < cohort.n(); ++i)
        if (cohort.treatment[i] == g) {
          const double dx = cohort.covariates(i, k) - m;
          ss += scale * weights[i] * dx * dx;
        }
      gm.mean(g, k) = m;
      gm.variance(g, k) = ng > 1 ? ss / static_cast<double>(ng - 1) : 0.0;
    }
  }
  return gm;
}

/// (m_a - m_b) / sqrt((s_a^2 + s_b^2) / 2); 0 when both variances vanish and
/// the means agree, NaN when they vanish and the means differ.
inline double standardized_difference(double mean_a, double var_a, double mean_b, double var_b) {
  const double pooled = 0.5 * (var_a + var_b);
  if (pooled <= 0.0) return mean_a == mean_b ? 0.0 : std::numeric_limits<double>::quiet_NaN();
  return (mean_a - mean_b) / std::sqrt(pooled);
}

inline BalanceReport balance_table(const Cohort& cohort, const Eigen::VectorXd& weights) {
  if (weights.size() != cohort.n()) throw ValidationError("weight vector length does not match the cohort");
  if (!weights.allFinite() || weights.minCoeff() < 0.0) throw ValidationError("weights must be finite and nonnegative");
  BalanceReport rep;
  rep.covariate_names = cohort.covariate_names;
  rep.group_labels = cohort.treatment_labels;
  rep.unweighted = group_moments(cohort, Eigen::VectorXd::Ones(cohort.n()));
  rep.weighted = group_moments(cohort, weights);
  for (Eigen::Index k = 0; k < cohort.p(); ++k)
    for (int a = 0; a < cohort.levels(); ++a)
      for (int b = a + 1; b < cohort.levels(); ++b) {
        SmdEntry e;
        e.covariate = k;
        e.group_a = b;  // contrast "level b vs level a", reference-relative as in Table-3 style reports
        e.group_b = a;
        e.unweighted = standardized_difference(rep.unweighted.mean(b, k), rep.unweighted.variance(b, k),
                                               rep.unweighted.mean(a, k), rep.unweighted.variance(a, k));
        e.weighted = standardized_difference(rep.weighted.mean(b, k), rep.weighted.variance(b, k),
                                             rep.weighted.mean(a, k), rep.weighted.variance(a, k));
        rep.entries.push_back(e);
      }
  return rep;
}

// ---------------------------------------------------------------------------
// Propensity histograms: counts per (observed group, propensity column, bin)
// over equal-width bins on [0, 1].

struct PropensityHistogram {
  int bins = 30;
  // counts[group][column][bin]
  std::vector<std::vector<std::vector<Eigen::Index>>> counts;
};

inline PropensityHistogram propensity_histogram(const Eigen::MatrixXd& probs, const Eigen::VectorXi& treatment,
                                                int bins = 30) {
  const auto L = static_cast<std::size_t>(probs.cols());
  PropensityHistogram h;
  h.bins = bins;
  h.counts.assign(L, std::vector<std::vector<Eigen::Index>>(L, std::vector<Eigen::Index>(static_cast<std::size_t>(bins), 0)));
  for (Eigen::Index i = 0; i < probs.rows(); ++i)
    for (std::size_t c = 0; c < L; ++c) {
      const double e = probs(i, static_cast<Eigen::Index>(c));
      auto b = static_cast<int>(std::floor(e * bins));
      b = std::clamp(b, 0, bins - 1);
      ++h.counts[static_cast<std::size_t>(treatment[i])][c][static_cast<std::size_t>(b)];
    }
  return h;
}

}  // namespace wcox
