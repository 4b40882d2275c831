#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "wcox/data_model.hpp"
#include "wcox/error.hpp"
#include "wcox/summation.hpp"

namespace wcox {

/// Weighted product-limit curve for one treatment group. Index 0 is the
/// origin (t = 0, S = 1, no events); the remaining entries are the group's
/// distinct event times in increasing order.
struct KmCurve {
  int group = 0;
  std::string label;
  std::vector<double> time;
  std::vector<double> survival;
  std::vector<double> weighted_at_risk;
  std::vector<double> weighted_events;

  std::size_t size() const { return time.size(); }

  /// Step-function value at t (right-continuous).
  double at(double t) const {
    const auto it = std::upper_bound(time.begin(), time.end(), t);
    if (it == time.begin()) return 1.0;
    return survival[static_cast<std::size_t>(it - time.begin() - 1)];
  }
};

/// Weighted Kaplan-Meier curve for treatment group `group`:
/// S(t) = prod_{t_l <= t} (1 - D_l / R_l), with D_l and R_l the weighted
/// event and at-risk totals among units of the group (at risk: Y >= t_l).
inline KmCurve weighted_km(const Cohort& cohort, const Eigen::VectorXd& weights, int group) {
  if (group < 0 || group >= cohort.levels()) throw ValidationError("treatment group out of range");
  if (weights.size() != cohort.n()) throw ValidationError("weight vector length does not match the cohort");
  std::vector<Eigen::Index> idx;
  for (Eigen::Index i = 0; i < cohort.n(); ++i)
    if (cohort.treatment[i] == group) {
      if (!(weights[i] >= 0.0) || !std::isfinite(weights[i]))
        throw ValidationError("weights must be finite and nonnegative");
      idx.push_back(i);
    }
  if (idx.empty()) throw ValidationError("treatment group has no units");
  std::stable_sort(idx.begin(), idx.end(),
                   [&](Eigen::Index a, Eigen::Index b) { return cohort.time[a] < cohort.time[b]; });

  // suffix[m] = weight of units idx[m..]; compensated so that the risk-set
  // totals do not depend on summation order
  std::vector<double> suffix(idx.size() + 1, 0.0);
  detail::CompensatedSum acc;
  for (std::size_t m = idx.size(); m-- > 0;) {
    acc.add(weights[idx[m]]);
    suffix[m] = acc.value();
  }
  const double total = suffix.front();
  if (!(total > 0.0)) throw ValidationError("total weight of the treatment group is zero");

  KmCurve curve;
  curve.group = group;
  curve.label = cohort.treatment_labels[static_cast<std::size_t>(group)];
  curve.time.push_back(0.0);
  curve.survival.push_back(1.0);
  curve.weighted_at_risk.push_back(total);
  curve.weighted_events.push_back(0.0);

  double s = 1.0;
  std::size_t r = 0;
  while (r < idx.size()) {
    const double t = cohort.time[idx[r]];
    std::size_t e = r;
    detail::CompensatedSum dsum;
    while (e < idx.size() && cohort.time[idx[e]] == t) {
      if (cohort.event[idx[e]]) dsum.add(weights[idx[e]]);
      ++e;
    }
    const double d = dsum.value();
    if (d > 0.0) {
      const double at_risk = suffix[r];
      s *= 1.0 - d / at_risk;
      if (t == 0.0) {
        curve.survival.front() = s;
        curve.weighted_at_risk.front() = at_risk;
        curve.weighted_events.front() = d;
      } else {
        curve.time.push_back(t);
        curve.survival.push_back(s);
        curve.weighted_at_risk.push_back(at_risk);
        curve.weighted_events.push_back(d);
      }
    }
    r = e;
  }
  return curve;
}

inline std::vector<KmCurve> weighted_km_all(const Cohort& cohort, const Eigen::VectorXd& weights) {
  std::vector<KmCurve> out;
  for (int g = 0; g < cohort.levels(); ++g) out.push_back(weighted_km(cohort, weights, g));
  return out;
}

/// Pointwise complement 1 - S.
inline std::vector<double> cumulative_risk(const std::vector<double>& survival) {
  std::vector<double> out(survival.size());
  std::transform(survival.begin(), survival.end(), out.begin(), [](double s) { return 1.0 - s; });
  return out;
}

inline std::vector<double> cumulative_risk(const KmCurve& curve) { return cumulative_risk(curve.survival); }

inline void write_km_csv(std::ostream& os, const std::vector<KmCurve>& curves) {
  os << "group,time,survival,cum_risk,weighted_at_risk,weighted_events\n";
  os << std::setprecision(17);
  for (const auto& c : curves) {
    const auto risk = cumulative_risk(c);
    for (std::size_t l = 0; l < c.size(); ++l)
      os << c.label << ',' << c.time[l] << ',' << c.survival[l] << ',' << risk[l] << ',' << c.weighted_at_risk[l]
         << ',' << c.weighted_events[l] << '\n';
  }
}

/// Standalone SVG step plot, one polyline per group.
inline void write_km_svg(std::ostream& os, const std::vector<KmCurve>& curves, bool cumulative = false,
                         const std::string& title = "") {
  constexpr double W = 640, H = 420, left = 60, right = 150, top = 30, bottom = 50;
  const double pw = W - left - right, ph = H - top - bottom;
  double tmax = 0.0;
  for (const auto& c : curves)
    if (!c.time.empty()) tmax = std::max(tmax, c.time.back());
  if (tmax <= 0.0) tmax = 1.0;
  static const char* palette[] = {"#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d"};
  auto px = [&](double t) { return left + pw * t / tmax; };
  auto py = [&](double v) { return top + ph * (1.0 - v); };

  os << std::fixed << std::setprecision(2);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
     << ' ' << H << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  if (!title.empty())
    os << "<text x=\"" << left << "\" y=\"18\" font-family=\"sans-serif\" font-size=\"13\">" << title << "</text>\n";
  os << "<g stroke=\"black\" fill=\"none\">\n";
  os << "<line x1=\"" << left << "\" y1=\"" << top + ph << "\" x2=\"" << left + pw << "\" y2=\"" << top + ph
     << "\"/>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << top + ph << "\"/>\n";
  os << "</g>\n<g font-family=\"sans-serif\" font-size=\"11\">\n";
  for (int k = 0; k <= 4; ++k) {
    const double v = k / 4.0;
    os << "<text x=\"" << left - 8 << "\" y=\"" << py(v) + 4 << "\" text-anchor=\"end\">" << std::setprecision(2) << v
       << "</text>\n";
    const double t = tmax * k / 4.0;
    os << "<text x=\"" << px(t) << "\" y=\"" << top + ph + 18 << "\" text-anchor=\"middle\">" << t << "</text>\n";
  }
  os << "<text x=\"" << left + pw / 2 << "\" y=\"" << H - 10 << "\" text-anchor=\"middle\">time</text>\n";
  os << "<text x=\"15\" y=\"" << top + ph / 2 << "\" transform=\"rotate(-90 15 " << top + ph / 2
     << ")\" text-anchor=\"middle\">" << (cumulative ? "cumulative risk" : "survival") << "</text>\n</g>\n";

  for (std::size_t g = 0; g < curves.size(); ++g) {
    const auto& c = curves[g];
    const char* colour = palette[g % (sizeof(palette) / sizeof(palette[0]))];
    const auto vals = cumulative ? cumulative_risk(c) : c.survival;
    os << "<polyline fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t l = 0; l < c.size(); ++l) {
      if (l > 0) os << px(c.time[l]) << ',' << py(vals[l - 1]) << ' ';
      os << px(c.time[l]) << ',' << py(vals[l]) << ' ';
    }
    os << "\"/>\n";
    const double ly = top + 15 + 18.0 * static_cast<double>(g);
    os << "<line x1=\"" << left + pw + 15 << "\" y1=\"" << ly << "\" x2=\"" << left + pw + 35 << "\" y2=\"" << ly
       << "\" stroke=\"" << colour << "\" stroke-width=\"2\"/>\n";
    os << "<text x=\"" << left + pw + 40 << "\" y=\"" << ly + 4
       << "\" font-family=\"sans-serif\" font-size=\"11\">" << c.label << "</text>\n";
  }
  os << "</svg>\n";
}

}  // namespace wcox
