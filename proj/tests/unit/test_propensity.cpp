#include <gtest/gtest.h>

#include "support/oracles.hpp"

using namespace wcox;

namespace {

Cohort setting_one_cohort(double psi, std::uint64_t seed, Eigen::Index n = 1000) {
  ScenarioConfig cfg;
  cfg.psi = psi;
  cfg.n = n;
  cfg.calibration_units = 100'000;
  Calibration cal = calibrate_intercepts(cfg);
  cal.lambda_c = 0.24;
  return generate_replicate(cfg, cal, seed).cohort;
}

Cohort counts_cohort(const std::vector<int>& counts) {
  std::vector<int> z;
  for (std::size_t g = 0; g < counts.size(); ++g) z.insert(z.end(), static_cast<std::size_t>(counts[g]), static_cast<int>(g));
  const auto n = static_cast<Eigen::Index>(z.size());
  Eigen::VectorXd t = Eigen::VectorXd::LinSpaced(n, 1.0, static_cast<double>(n));
  return make_cohort(t, Eigen::VectorXi::Ones(n), Eigen::Map<Eigen::VectorXi>(z.data(), n));
}

}  // namespace

TEST(Multinomial, InterceptOnlyGivesProportions) {
  const PropensityFit fit = fit_multinomial_logit(counts_cohort({10, 20, 10}));
  ASSERT_TRUE(fit.converged);
  for (Eigen::Index i = 0; i < fit.probs.rows(); ++i) {
    EXPECT_NEAR(fit.probs(i, 0), 0.25, 1e-10);
    EXPECT_NEAR(fit.probs(i, 1), 0.50, 1e-10);
    EXPECT_NEAR(fit.probs(i, 2), 0.25, 1e-10);
  }
}

TEST(Multinomial, SaturatedTwoCellLogit) {
  // x = 0: 5 of 10 treated; x = 1: 8 of 10 treated
  Eigen::VectorXd t = Eigen::VectorXd::LinSpaced(20, 1, 20);
  Eigen::VectorXi z(20);
  Eigen::MatrixXd x(20, 1);
  for (int i = 0; i < 20; ++i) {
    x(i, 0) = i < 10 ? 0.0 : 1.0;
    z[i] = i < 10 ? (i < 5 ? 1 : 0) : (i < 18 ? 1 : 0);
  }
  const PropensityFit fit = fit_multinomial_logit(make_cohort(t, Eigen::VectorXi::Ones(20), z, x));
  EXPECT_NEAR(fit.gamma(0, 0), 0.0, 1e-9);
  EXPECT_NEAR(fit.gamma(0, 1), std::log(4.0), 1e-9);
}

TEST(Multinomial, MatchesDerivativeFreeMaximization) {
  oracle::Gen g(2024);
  for (int rep = 0; rep < 6; ++rep) {
    const Cohort c = oracle::random_cohort(g, {.n = 30, .levels = 3, .p = 3});
    const PropensityFit fit = fit_multinomial_logit(c);
    const Eigen::MatrixXd ref = oracle::brute_multinomial(fit.design, c.treatment, c.contrasts());
    EXPECT_LE((fit.gamma - ref).cwiseAbs().maxCoeff(), 1e-5) << "replicate " << rep;
  }
}

TEST(Multinomial, RowStochasticAndScoreZero) {
  oracle::Gen g(5);
  for (int rep = 0; rep < 15; ++rep) {
    const Cohort c = oracle::random_cohort(g, {.n = 80, .levels = 2 + rep % 3, .p = 1 + rep % 4});
    const PropensityFit fit = fit_multinomial_logit(c);
    for (Eigen::Index i = 0; i < fit.probs.rows(); ++i) {
      EXPECT_NEAR(fit.probs.row(i).sum(), 1.0, 1e-12);
      EXPECT_GT(fit.probs.row(i).minCoeff(), 0.0);
      EXPECT_LT(fit.probs.row(i).maxCoeff(), 1.0);
    }
    EXPECT_LE(multinomial_score(fit.design, c.treatment, fit.probs).lpNorm<Eigen::Infinity>(), 1e-8);
  }
}

TEST(Multinomial, ScoreMatchesFiniteDifferences) {
  oracle::Gen g(17);
  for (int rep = 0; rep < 10; ++rep) {
    const Cohort c = oracle::random_cohort(g, {.n = 50, .levels = 3, .p = 2});
    const Eigen::MatrixXd design = design_with_intercept(c.covariates);
    Eigen::VectorXd theta(c.contrasts() * design.cols());
    for (Eigen::Index k = 0; k < theta.size(); ++k) theta[k] = g.uniform(-1, 1);
    const Eigen::Index J = c.contrasts(), q = design.cols();
    const Eigen::VectorXd analytic =
        multinomial_score(design, c.treatment, multinomial_probs(design, unflatten_gamma(theta, J, q)));
    for (Eigen::Index k = 0; k < theta.size(); ++k) {
      Eigen::VectorXd tp = theta, tm = theta;
      tp[k] += 1e-6;
      tm[k] -= 1e-6;
      const double fd = (multinomial_loglik(design, c.treatment, unflatten_gamma(tp, J, q)) -
                         multinomial_loglik(design, c.treatment, unflatten_gamma(tm, J, q))) /
                        2e-6;
      EXPECT_NEAR(fd, analytic[k], 1e-6 * std::max(1.0, std::abs(analytic[k])));
    }
  }
}

TEST(Multinomial, InformationIsNegativeScoreJacobian) {
  oracle::Gen g(23);
  const Cohort c = oracle::random_cohort(g, {.n = 60, .levels = 4, .p = 2});
  const Eigen::MatrixXd design = design_with_intercept(c.covariates);
  const Eigen::Index J = c.contrasts(), q = design.cols();
  Eigen::VectorXd theta(J * q);
  for (Eigen::Index k = 0; k < theta.size(); ++k) theta[k] = g.uniform(-0.5, 0.5);
  const auto score = [&](const Eigen::VectorXd& th) {
    return Eigen::VectorXd(multinomial_score(design, c.treatment, multinomial_probs(design, unflatten_gamma(th, J, q))));
  };
  const Eigen::MatrixXd fd = -oracle::fd_jacobian(score, theta, 1e-6);
  const Eigen::MatrixXd info = multinomial_information(design, multinomial_probs(design, unflatten_gamma(theta, J, q)));
  EXPECT_LE(oracle::max_rel_diff(fd, info, 1.0), 1e-6);
}

TEST(Multinomial, CollinearCovariatesUseRidge) {
  oracle::Gen g(3);
  Cohort c = oracle::random_cohort(g, {.n = 60, .levels = 3, .p = 2});
  c.covariates.col(1) = 2.0 * c.covariates.col(0);
  const PropensityFit fit = fit_multinomial_logit(c);
  EXPECT_TRUE(fit.ridge_applied);
  EXPECT_TRUE(fit.converged);
}

TEST(Multinomial, SeparationIsReported) {
  Eigen::VectorXd t = Eigen::VectorXd::LinSpaced(10, 1, 10);
  Eigen::VectorXi z(10);
  Eigen::MatrixXd x(10, 1);
  for (int i = 0; i < 10; ++i) {
    z[i] = i < 5 ? 0 : 1;
    x(i, 0) = i;
  }
  EXPECT_THROW(fit_multinomial_logit(make_cohort(t, Eigen::VectorXi::Ones(10), z, x)), ConvergenceError);
}

TEST(Weights, SchemeFormulas) {
  Eigen::MatrixXd e(1, 2);
  e << 0.5, 0.5;
  Eigen::VectorXi z0 = Eigen::VectorXi::Zero(1), z1 = Eigen::VectorXi::Ones(1);
  EXPECT_DOUBLE_EQ(compute_weights(e, z0, WeightScheme::ipw()).weights[0], 2.0);
  EXPECT_DOUBLE_EQ(compute_weights(e, z0, WeightScheme::ow()).weights[0], 0.5);
  e << 0.2, 0.8;
  EXPECT_NEAR(compute_weights(e, z0, WeightScheme::ow()).weights[0], 0.8, 1e-15);
  EXPECT_NEAR(compute_weights(e, z1, WeightScheme::ow()).weights[0], 0.2, 1e-15);
  Eigen::MatrixXd e3(1, 3);
  e3 << 0.1, 0.3, 0.6;
  Eigen::VectorXi z2 = Eigen::VectorXi::Constant(1, 2);
  EXPECT_NEAR(compute_weights(e3, z2, WeightScheme::att(0)).weights[0], 0.1 / 0.6, 1e-15);
  EXPECT_EQ(compute_weights(e3, z2, WeightScheme::unit()).weights[0], 1.0);
}

TEST(Weights, PositivityViolation) {
  Eigen::MatrixXd e(2, 2);
  e << 0.5, 0.5, 1.0, 0.0;
  EXPECT_THROW(compute_weights(e, Eigen::VectorXi::Zero(2), WeightScheme::ipw()), ValidationError);
}

TEST(Weights, OwWeightsAreBounded) {
  oracle::Gen g(8);
  for (int rep = 0; rep < 10; ++rep) {
    const Cohort c = oracle::random_cohort(g, {.n = 100, .levels = 3, .p = 3});
    const PropensityFit fit = fit_multinomial_logit(c);
    const WeightSet ow = compute_weights(fit, c.treatment, WeightScheme::ow());
    // h / e_Z <= 1 because h <= e_Z for the harmonic-mean tilt
    EXPECT_LE(ow.weights.maxCoeff(), 1.0 + 1e-12);
    EXPECT_GT(ow.weights.minCoeff(), 0.0);
  }
}

TEST(Trim, ZeroThresholdIsNoOp) {
  oracle::Gen g(1);
  const Cohort c = oracle::random_cohort(g, {.n = 50, .levels = 3, .p = 2});
  const PropensityFit fit = fit_multinomial_logit(c);
  const TrimResult r = trim(c, fit, 0.0);
  EXPECT_TRUE(r.report.removed_ids.empty());
  EXPECT_EQ(r.cohort.time, c.time);
  EXPECT_EQ(r.fit.gamma, fit.gamma);
}

TEST(Trim, DirectComparison) {
  Eigen::VectorXd t(5);
  t << 1, 2, 3, 4, 5;
  Eigen::VectorXi z(5);
  z << 0, 1, 0, 1, 0;
  const Cohort c = make_cohort(t, Eigen::VectorXi::Ones(5), z);
  PropensityFit fit;
  fit.design = Eigen::MatrixXd::Ones(5, 1);
  fit.gamma = Eigen::MatrixXd::Zero(1, 1);
  fit.probs.resize(5, 2);
  const double mins[] = {0.01, 0.06, 0.20, 0.04, 0.30};
  for (int i = 0; i < 5; ++i) fit.probs.row(i) << mins[i], 1.0 - mins[i];
  const TrimResult r = trim(c, fit, 0.05, false);
  EXPECT_EQ(r.report.removed_ids, (std::vector<Eigen::Index>{0, 3}));
  EXPECT_EQ(r.report.removed_per_group, (std::vector<Eigen::Index>{1, 1}));
  EXPECT_EQ(r.cohort.n(), 3);
  EXPECT_EQ(r.fit.probs.rows(), 3);
}

TEST(Trim, WeakOverlapCountMatchesScan) {
  const Cohort c = setting_one_cohort(3.0, 99);
  const PropensityFit fit = fit_multinomial_logit(c);
  Eigen::Index expected = 0;
  for (Eigen::Index i = 0; i < c.n(); ++i) expected += fit.probs.row(i).minCoeff() < 0.05;
  const TrimResult r = trim(c, fit, 0.05);
  EXPECT_GT(expected, 0);
  EXPECT_EQ(static_cast<Eigen::Index>(r.report.removed_ids.size()), expected);
  EXPECT_EQ(r.cohort.n(), c.n() - expected);
  EXPECT_TRUE(r.report.refit);
  EXPECT_TRUE(r.fit.converged);
}

TEST(Trim, ThresholdRange) {
  oracle::Gen g(1);
  const Cohort c = oracle::random_cohort(g, {.n = 50, .levels = 3, .p = 1});
  const PropensityFit fit = fit_multinomial_logit(c);
  EXPECT_THROW(trim(c, fit, 0.34), ValidationError);
  EXPECT_THROW(trim(c, fit, -0.1), ValidationError);
}

TEST(Balance, IdenticalDistributionsGiveZero) {
  Eigen::VectorXd t = Eigen::VectorXd::LinSpaced(8, 1, 8);
  Eigen::VectorXi z(8);
  z << 0, 0, 0, 0, 1, 1, 1, 1;
  Eigen::MatrixXd x(8, 1);
  x << 1, 2, 3, 4, 1, 2, 3, 4;
  const BalanceReport b = balance_table(make_cohort(t, Eigen::VectorXi::Ones(8), z, x), Eigen::VectorXd::Ones(8));
  ASSERT_EQ(b.entries.size(), 1u);
  EXPECT_EQ(b.entries[0].unweighted, 0.0);
  EXPECT_EQ(b.entries[0].weighted, 0.0);
}

TEST(Balance, UnitMeanShift) {
  // group 1 values have mean 1, group 0 mean 0, both with sample variance 1
  Eigen::VectorXd t = Eigen::VectorXd::LinSpaced(6, 1, 6);
  Eigen::VectorXi z(6);
  z << 0, 0, 0, 1, 1, 1;
  Eigen::MatrixXd x(6, 1);
  x << -1, 0, 1, 0, 1, 2;
  const BalanceReport b = balance_table(make_cohort(t, Eigen::VectorXi::Ones(6), z, x), Eigen::VectorXd::Ones(6));
  EXPECT_DOUBLE_EQ(b.entries[0].unweighted, 1.0);
  EXPECT_EQ(b.entries[0].group_a, 1);
  EXPECT_EQ(b.entries[0].group_b, 0);
}

TEST(Balance, OverlapWeightsBalanceExactlyWithTwoArms) {
  oracle::Gen g(31);
  for (int rep = 0; rep < 10; ++rep) {
    const Cohort c = oracle::random_cohort(g, {.n = 200, .levels = 2, .p = 4});
    const PropensityFit fit = fit_multinomial_logit(c);
    const WeightSet ow = compute_weights(fit, c.treatment, WeightScheme::ow());
    const BalanceReport b = balance_table(c, ow.weights);
    for (Eigen::Index k = 0; k < c.p(); ++k) EXPECT_NEAR(b.weighted.mean(1, k), b.weighted.mean(0, k), 1e-9);
  }
}

TEST(Balance, ThreeArmOverlapWeightsReduceImbalance) {
  for (std::uint64_t seed : {1, 2, 3}) {
    const Cohort c = setting_one_cohort(1.0, seed);
    const PropensityFit fit = fit_multinomial_logit(c);
    const BalanceReport b = balance_table(c, compute_weights(fit, c.treatment, WeightScheme::ow()).weights);
    double unweighted = 0.0;
    for (const auto& e : b.entries) unweighted = std::max(unweighted, std::abs(e.unweighted));
    EXPECT_LT(b.max_abs_weighted(), 0.25 * unweighted);
  }
}

TEST(Balance, SmdInvariantToWeightScale) {
  oracle::Gen g(4);
  const Cohort c = oracle::random_cohort(g, {.n = 60, .levels = 3, .p = 2});
  const Eigen::VectorXd w = oracle::random_weights(g, c.n());
  const BalanceReport a = balance_table(c, w), b = balance_table(c, 4.0 * w);
  for (std::size_t k = 0; k < a.entries.size(); ++k) EXPECT_NEAR(a.entries[k].weighted, b.entries[k].weighted, 1e-12);
}

TEST(Histogram, CountsCoverEveryUnit) {
  oracle::Gen g(6);
  const Cohort c = oracle::random_cohort(g, {.n = 90, .levels = 3, .p = 2});
  const PropensityFit fit = fit_multinomial_logit(c);
  const PropensityHistogram h = propensity_histogram(fit.probs, c.treatment, 20);
  for (int grp = 0; grp < 3; ++grp)
    for (int col = 0; col < 3; ++col) {
      Eigen::Index total = 0;
      for (auto v : h.counts[static_cast<std::size_t>(grp)][static_cast<std::size_t>(col)]) total += v;
      EXPECT_EQ(total, (c.treatment.array() == grp).count());
    }
}
