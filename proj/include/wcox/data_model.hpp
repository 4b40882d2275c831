#pragma once

// Cohort representation and treatment coding shared by every estimator.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "wcox/error.hpp"

namespace wcox {

/// Right-censored survival cohort with a nominal treatment.
///
/// `treatment` holds dense labels 0..J with 0 the reference level, and
/// `covariates` is n x p without an intercept column. Instances produced by
/// `validate_cohort` satisfy all invariants and are treated as immutable.
struct Cohort {
  Eigen::VectorXd time;
  Eigen::VectorXi event;
  Eigen::VectorXi treatment;
  Eigen::MatrixXd covariates;
  std::vector<std::string> treatment_labels;
  std::vector<std::string> covariate_names;

  Eigen::Index n() const { return time.size(); }
  Eigen::Index p() const { return covariates.cols(); }
  /// Number of treatment levels, J + 1.
  int levels() const { return static_cast<int>(treatment_labels.size()); }
  /// Number of contrasts against the reference, J.
  int contrasts() const { return levels() - 1; }

  /// Indicator vector D_i of length J (reference level maps to all zeros).
  Eigen::VectorXd indicator(Eigen::Index i) const {
    Eigen::VectorXd d = Eigen::VectorXd::Zero(contrasts());
    if (treatment[i] > 0) d[treatment[i] - 1] = 1.0;
    return d;
  }

  Eigen::Index event_count() const { return event.count(); }
};

/// Parsed input rows before validation. Treatment values are arbitrary
/// strings; covariates are stored row-major (`covariates[i][k]`).
struct RawRows {
  std::vector<double> time;
  std::vector<double> event;
  std::vector<std::string> treatment;
  std::vector<std::vector<double>> covariates;
  std::vector<std::string> covariate_names;
  /// Name of the level to use as reference; first appearance otherwise.
  std::optional<std::string> reference;
  /// Explicit level order (reference first). Overrides first-appearance
  /// ordering; every observed level must be listed.
  std::optional<std::vector<std::string>> level_order;
};

namespace detail {

inline std::string join_rows(const std::vector<std::size_t>& rows, std::size_t limit = 10) {
  std::string out;
  for (std::size_t k = 0; k < rows.size() && k < limit; ++k) {
    if (k) out += ", ";
    out += std::to_string(rows[k]);
  }
  if (rows.size() > limit) out += ", ...";
  return out;
}

}  // namespace detail

/// Validates parsed rows and builds a Cohort with dense treatment labels.
inline Cohort validate_cohort(const RawRows& raw) {
  const std::size_t n = raw.time.size();
  if (raw.event.size() != n || raw.treatment.size() != n)
    throw ValidationError("time, event and treatment columns differ in length");
  if (!raw.covariates.empty() && raw.covariates.size() != n)
    throw ValidationError("covariate rows differ in length from the time column");
  if (n == 0) throw ValidationError("cohort is empty");

  const std::size_t p = raw.covariates.empty() ? raw.covariate_names.size() : raw.covariates.front().size();
  if (!raw.covariate_names.empty() && raw.covariate_names.size() != p)
    throw ValidationError("covariate name count does not match covariate columns");

  std::vector<std::size_t> bad_rows;
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(raw.time[i]) || !std::isfinite(raw.event[i])) {
      bad_rows.push_back(i + 1);
      continue;
    }
    if (raw.treatment[i].empty()) {
      bad_rows.push_back(i + 1);
      continue;
    }
    if (p > 0) {
      if (raw.covariates[i].size() != p) {
        bad_rows.push_back(i + 1);
        continue;
      }
      if (!std::all_of(raw.covariates[i].begin(), raw.covariates[i].end(),
                       [](double v) { return std::isfinite(v); }))
        bad_rows.push_back(i + 1);
    }
  }
  if (!bad_rows.empty())
    throw ValidationError("missing or non-finite values at rows " + detail::join_rows(bad_rows), bad_rows);

  for (std::size_t i = 0; i < n; ++i) {
    if (raw.time[i] < 0.0)
      throw ValidationError("negative time at row " + std::to_string(i + 1), {i + 1});
    if (raw.event[i] != 0.0 && raw.event[i] != 1.0)
      throw ValidationError("event flag not in {0,1} at row " + std::to_string(i + 1), {i + 1});
  }

  std::vector<std::string> levels;
  if (raw.level_order) {
    levels = *raw.level_order;
  } else {
    if (raw.reference) levels.push_back(*raw.reference);
    for (const auto& t : raw.treatment)
      if (std::find(levels.begin(), levels.end(), t) == levels.end()) levels.push_back(t);
  }
  std::map<std::string, int> code;
  for (std::size_t k = 0; k < levels.size(); ++k) {
    if (!code.emplace(levels[k], static_cast<int>(k)).second)
      throw ValidationError("duplicate treatment level '" + levels[k] + "'");
  }

  Cohort c;
  c.time.resize(static_cast<Eigen::Index>(n));
  c.event.resize(static_cast<Eigen::Index>(n));
  c.treatment.resize(static_cast<Eigen::Index>(n));
  c.covariates.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(p));
  std::vector<std::size_t> counts(levels.size(), 0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto it = code.find(raw.treatment[i]);
    if (it == code.end())
      throw ValidationError("treatment level '" + raw.treatment[i] + "' at row " + std::to_string(i + 1) +
                                " is not among the declared levels",
                            {i + 1});
    const auto ii = static_cast<Eigen::Index>(i);
    c.time[ii] = raw.time[i];
    c.event[ii] = raw.event[i] == 1.0 ? 1 : 0;
    c.treatment[ii] = it->second;
    ++counts[static_cast<std::size_t>(it->second)];
    for (std::size_t k = 0; k < p; ++k) c.covariates(ii, static_cast<Eigen::Index>(k)) = raw.covariates[i][k];
  }
  if (levels.size() < 2) throw ValidationError("treatment has a single level");
  for (std::size_t k = 0; k < levels.size(); ++k)
    if (counts[k] == 0) throw ValidationError("treatment level '" + levels[k] + "' has no units");

  c.treatment_labels = levels;
  if (raw.covariate_names.empty()) {
    for (std::size_t k = 0; k < p; ++k) c.covariate_names.push_back("x" + std::to_string(k + 1));
  } else {
    c.covariate_names = raw.covariate_names;
  }
  return c;
}

/// Re-checks the invariants of an already constructed cohort. Labels present
/// in the cohort are kept; the result equals the input when it is valid.
inline Cohort validate_cohort(const Cohort& in) {
  const Eigen::Index n = in.time.size();
  if (in.event.size() != n || in.treatment.size() != n || in.covariates.rows() != n)
    throw ValidationError("cohort columns differ in length");
  if (n == 0) throw ValidationError("cohort is empty");
  const int levels = in.levels();
  if (levels < 2) throw ValidationError("treatment has a single level");
  if (static_cast<Eigen::Index>(in.covariate_names.size()) != in.p())
    throw ValidationError("covariate name count does not match covariate columns");
  std::vector<std::size_t> counts(static_cast<std::size_t>(levels), 0);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto row = static_cast<std::size_t>(i + 1);
    if (!std::isfinite(in.time[i])) throw ValidationError("non-finite time at row " + std::to_string(row), {row});
    if (in.time[i] < 0.0) throw ValidationError("negative time at row " + std::to_string(row), {row});
    if (in.event[i] != 0 && in.event[i] != 1)
      throw ValidationError("event flag not in {0,1} at row " + std::to_string(row), {row});
    if (in.treatment[i] < 0 || in.treatment[i] >= levels)
      throw ValidationError("treatment label out of range at row " + std::to_string(row), {row});
    if (!in.covariates.row(i).allFinite())
      throw ValidationError("non-finite covariate at row " + std::to_string(row), {row});
    ++counts[static_cast<std::size_t>(in.treatment[i])];
  }
  for (int k = 0; k < levels; ++k)
    if (counts[static_cast<std::size_t>(k)] == 0)
      throw ValidationError("treatment level '" + in.treatment_labels[static_cast<std::size_t>(k)] + "' has no units");
  return in;
}

/// Builds a cohort from numeric columns. Treatment codes are re-indexed
/// densely in ascending order, so the smallest code becomes the reference.
inline Cohort make_cohort(const Eigen::VectorXd& time, const Eigen::VectorXi& event, const Eigen::VectorXi& treatment,
                          const Eigen::MatrixXd& covariates = Eigen::MatrixXd()) {
  RawRows raw;
  const auto n = static_cast<std::size_t>(time.size());
  if (static_cast<std::size_t>(event.size()) != n || static_cast<std::size_t>(treatment.size()) != n)
    throw ValidationError("time, event and treatment columns differ in length");
  const Eigen::Index p = covariates.size() == 0 ? 0 : covariates.cols();
  if (p > 0 && covariates.rows() != time.size())
    throw ValidationError("covariate rows differ in length from the time column");
  std::vector<int> codes(treatment.data(), treatment.data() + treatment.size());
  std::sort(codes.begin(), codes.end());
  codes.erase(std::unique(codes.begin(), codes.end()), codes.end());
  std::vector<std::string> order;
  for (int v : codes) order.push_back(std::to_string(v));
  raw.level_order = order;
  raw.time.assign(time.data(), time.data() + time.size());
  raw.event.reserve(n);
  for (Eigen::Index i = 0; i < event.size(); ++i) raw.event.push_back(event[i]);
  for (Eigen::Index i = 0; i < treatment.size(); ++i) raw.treatment.push_back(std::to_string(treatment[i]));
  if (p > 0) {
    raw.covariates.assign(n, std::vector<double>(static_cast<std::size_t>(p)));
    for (std::size_t i = 0; i < n; ++i)
      for (Eigen::Index k = 0; k < p; ++k) raw.covariates[i][static_cast<std::size_t>(k)] = covariates(static_cast<Eigen::Index>(i), k);
  }
  for (Eigen::Index k = 0; k < p; ++k) raw.covariate_names.push_back("x" + std::to_string(k + 1));
  return validate_cohort(raw);
}

/// Subset of a cohort by unit indices (duplicates allowed, as in a bootstrap
/// resample). Labels are kept; no validation is performed.
inline Cohort select_units(const Cohort& c, std::span<const Eigen::Index> idx) {
  Cohort out;
  const auto m = static_cast<Eigen::Index>(idx.size());
  out.time.resize(m);
  out.event.resize(m);
  out.treatment.resize(m);
  out.covariates.resize(m, c.p());
  for (Eigen::Index r = 0; r < m; ++r) {
    const Eigen::Index i = idx[static_cast<std::size_t>(r)];
    out.time[r] = c.time[i];
    out.event[r] = c.event[i];
    out.treatment[r] = c.treatment[i];
    out.covariates.row(r) = c.covariates.row(i);
  }
  out.treatment_labels = c.treatment_labels;
  out.covariate_names = c.covariate_names;
  return out;
}

// ---------------------------------------------------------------------------
// Two-way factorial coding: the four cells of (z1, z2) become four nominal
// levels with (0,0) as reference.

inline constexpr int kFactorialLevels = 4;

inline int encode_factorial(int z1, int z2) {
  if ((z1 != 0 && z1 != 1) || (z2 != 0 && z2 != 1))
    throw ValidationError("factorial indicators must be 0 or 1, got (" + std::to_string(z1) + "," +
                          std::to_string(z2) + ")");
  // (0,0)->0, (1,0)->1, (0,1)->2, (1,1)->3
  return z1 + 2 * z2;
}

inline std::pair<int, int> decode_factorial(int label) {
  if (label < 0 || label >= kFactorialLevels)
    throw ValidationError("factorial label out of range: " + std::to_string(label));
  return {label % 2, label / 2};
}

inline std::string factorial_label(int label) {
  const auto [z1, z2] = decode_factorial(label);
  return "(" + std::to_string(z1) + "," + std::to_string(z2) + ")";
}

inline std::vector<std::string> factorial_labels() {
  std::vector<std::string> out;
  for (int k = 0; k < kFactorialLevels; ++k) out.push_back(factorial_label(k));
  return out;
}

/// Column-wise factorial encoding. Rows are reported 1-based on error.
inline Eigen::VectorXi encode_factorial(std::span<const double> z1, std::span<const double> z2) {
  if (z1.size() != z2.size()) throw ValidationError("factorial columns differ in length");
  Eigen::VectorXi out(static_cast<Eigen::Index>(z1.size()));
  for (std::size_t i = 0; i < z1.size(); ++i) {
    const bool ok1 = z1[i] == 0.0 || z1[i] == 1.0;
    const bool ok2 = z2[i] == 0.0 || z2[i] == 1.0;
    if (!ok1 || !ok2)
      throw ValidationError("non-binary factorial indicator at row " + std::to_string(i + 1), {i + 1});
    out[static_cast<Eigen::Index>(i)] = encode_factorial(static_cast<int>(z1[i]), static_cast<int>(z2[i]));
  }
  return out;
}

}  // namespace wcox
