// Copyright 2026 The fedcmp Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "fedcmp/aggregates.hpp"
#include "fedcmp/calibration.hpp"
#include "fedcmp/dataset.hpp"
#include "fedcmp/errors.hpp"
#include "fedcmp/outcome.hpp"

namespace fedcmp {

// Target populations are nonempty subsets of {1..K}, encoded as bit masks
// with bit (site-1) set.
using SubsetMask = std::uint32_t;

inline constexpr int kMaxSites = 12;

inline SubsetMask full_subset(int k_sites) { return (SubsetMask{1} << k_sites) - 1; }

inline bool subset_contains(SubsetMask subset, int site) {
  return (subset >> (site - 1)) & 1u;
}

inline std::vector<int> subset_sites(SubsetMask subset) {
  std::vector<int> out;
  for (int s = 1; s <= kMaxSites; ++s)
    if (subset_contains(subset, s)) out.push_back(s);
  return out;
}

inline std::string subset_label(SubsetMask subset) {
  std::string out;
  for (int s : subset_sites(subset)) {
    if (!out.empty()) out += '+';
    out += std::to_string(s);
  }
  return out;
}

inline SubsetMask subset_from_sites(const std::vector<int>& sites) {
  SubsetMask m = 0;
  for (int s : sites) {
    if (s < 1 || s > kMaxSites) throw UnknownSite("subset site id " + std::to_string(s));
    m |= SubsetMask{1} << (s - 1);
  }
  return m;
}

inline constexpr double kNormalQuantile975 = 1.9599639845400545;

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

// One estimate for a comparator pair on one target population.
struct EstimateReport {
  std::string method;  // "dac", "dor", "dcw", "dac-br"
  int k = 0;
  int kprime = 0;
  SubsetMask subset = 0;
  double tau_hat = 0.0;
  double variance = std::numeric_limits<double>::quiet_NaN();
  double ci_low = std::numeric_limits<double>::quiet_NaN();
  double ci_high = std::numeric_limits<double>::quiet_NaN();
  double p_value = std::numeric_limits<double>::quiet_NaN();
  std::map<int, double> mu_hat;  // comparator site -> estimated mean potential outcome
};

// Fills the 95% normal-approximation interval and two-sided p-value.
// Variance estimates are algebraic rearrangements of a sample second moment,
// so anything below -1e-12 indicates a real defect; tiny negative rounding is
// clamped for reporting.
inline void finalize_interval(EstimateReport& report) {
  if (std::isnan(report.variance)) return;
  double v = report.variance;
  if (v < 0.0 && v > -1e-12) v = 0.0;
  report.variance = v;
  const double se = std::sqrt(v);
  report.ci_low = report.tau_hat - kNormalQuantile975 * se;
  report.ci_high = report.tau_hat + kNormalQuantile975 * se;
  if (se > 0.0) {
    report.p_value = std::erfc(std::abs(report.tau_hat) / (se * std::sqrt(2.0)));
  } else {
    report.p_value = report.tau_hat == 0.0 ? 1.0 : 0.0;
  }
}

namespace detail {

inline void check_pair(std::span<const AggregatedData> ads, SubsetMask subset, int k, int kp) {
  const int k_sites = static_cast<int>(ads.size());
  if (subset == 0) throw EmptySubset("estimator: empty target subset");
  if (k == kp) throw SameComparators("estimator: comparators must differ (k=" + std::to_string(k) + ")");
  if (k < 1 || k > k_sites || kp < 1 || kp > k_sites)
    throw UnknownSite("estimator: comparator outside 1.." + std::to_string(k_sites));
  if (subset >= (SubsetMask{1} << k_sites))
    throw UnknownSite("estimator: subset references a site outside 1.." + std::to_string(k_sites));
  for (int s = 0; s < k_sites; ++s) {
    if (ads[s].site != s + 1)
      throw UnknownSite("estimator: aggregated data out of order at position " + std::to_string(s));
  }
}

// Weighted average over the subset of per-site terms. Singleton subsets
// return the term directly, which makes the subset-aggregation identity
// mu_{k|I} = sum n_j mu_{k|{j}} / sum n_j hold to the last bit.
template <typename TermFn>
double subset_average(std::span<const AggregatedData> ads, SubsetMask subset, TermFn&& term) {
  const std::vector<int> sites = subset_sites(subset);
  if (sites.size() == 1) return term(sites[0]);
  NeumaierSum num;
  long den = 0;
  for (int j : sites) {
    num.add(static_cast<double>(ads[j - 1].n) * term(j));
    den += ads[j - 1].n;
  }
  return num.value() / static_cast<double>(den);
}

inline long subset_size(std::span<const AggregatedData> ads, SubsetMask subset) {
  long n = 0;
  for (int j : subset_sites(subset)) n += ads[j - 1].n;
  return n;
}

}  // namespace detail

// DAC point estimator: outcome-regression means plus calibration-weighted
// residual corrections, assembled purely from aggregated data.
inline EstimateReport dac_tau(std::span<const AggregatedData> ads, SubsetMask subset, int k, int kp) {
  detail::check_pair(ads, subset, k, kp);
  EstimateReport rep;
  rep.method = "dac";
  rep.k = k;
  rep.kprime = kp;
  rep.subset = subset;
  rep.tau_hat = detail::subset_average(ads, subset, [&](int j) {
    return (ads[j - 1].a1[kp - 1] - ads[j - 1].a1[k - 1]) +
           (ads[kp - 1].a2[j - 1] - ads[k - 1].a2[j - 1]);
  });
  rep.mu_hat[k] = detail::subset_average(ads, subset, [&](int j) {
    return ads[j - 1].a1[k - 1] + ads[k - 1].a2[j - 1];
  });
  rep.mu_hat[kp] = detail::subset_average(ads, subset, [&](int j) {
    return ads[j - 1].a1[kp - 1] + ads[kp - 1].a2[j - 1];
  });
  return rep;
}

// Influence-function variance estimate assembled from the A1..A5 aggregates.
// Algebraically identical to the sample second moment of the estimated
// efficient influence function over the pooled data, divided by N.
inline double dac_var(std::span<const AggregatedData> ads, SubsetMask subset, int k, int kp,
                      double tau_hat) {
  detail::check_pair(ads, subset, k, kp);
  const std::vector<int> sites = subset_sites(subset);
  const double n_subset = static_cast<double>(detail::subset_size(ads, subset));
  const double inv2 = 1.0 / (n_subset * n_subset);

  NeumaierSum acc;
  // Model-contrast spread over the subset.
  for (int l : sites) acc.add(inv2 * ads[l - 1].a3(k - 1, kp - 1));
  // Squared weighted residuals at the two comparator sites.
  for (int l : sites)
    for (int h : sites) {
      acc.add(inv2 * ads[kp - 1].a4(l - 1, h - 1));
      acc.add(inv2 * ads[k - 1].a4(l - 1, h - 1));
    }
  // Cross terms between model contrasts and weighted residuals. a5 at site j
  // is keyed by the other comparator; the sign flip for site k is baked into
  // its own-model-minus-other orientation.
  if (subset_contains(subset, kp))
    for (int l : sites) acc.add(2.0 * inv2 * ads[kp - 1].a5(k - 1, l - 1));
  if (subset_contains(subset, k))
    for (int l : sites) acc.add(2.0 * inv2 * ads[k - 1].a5(kp - 1, l - 1));
  // Centering terms in tau.
  acc.add(tau_hat * tau_hat / n_subset);
  {
    NeumaierSum s;
    for (int l : sites)
      s.add(static_cast<double>(ads[l - 1].n) * (ads[l - 1].a1[kp - 1] - ads[l - 1].a1[k - 1]));
    acc.add(-2.0 * inv2 * tau_hat * s.value());
  }
  if (subset_contains(subset, kp)) {
    NeumaierSum s;
    for (int l : sites) s.add(static_cast<double>(ads[l - 1].n) * ads[kp - 1].a2[l - 1]);
    acc.add(-2.0 * inv2 * tau_hat * s.value());
  }
  if (subset_contains(subset, k)) {
    NeumaierSum s;
    for (int l : sites) s.add(static_cast<double>(ads[l - 1].n) * ads[k - 1].a2[l - 1]);
    acc.add(2.0 * inv2 * tau_hat * s.value());
  }
  return acc.value();
}

inline EstimateReport dac_estimate(std::span<const AggregatedData> ads, SubsetMask subset, int k,
                                   int kp) {
  EstimateReport rep = dac_tau(ads, subset, k, kp);
  rep.variance = dac_var(ads, subset, k, kp, rep.tau_hat);
  finalize_interval(rep);
  return rep;
}

// Distributed outcome regression: the A1 part alone.
inline EstimateReport dor_tau(std::span<const AggregatedData> ads, SubsetMask subset, int k, int kp) {
  detail::check_pair(ads, subset, k, kp);
  EstimateReport rep;
  rep.method = "dor";
  rep.k = k;
  rep.kprime = kp;
  rep.subset = subset;
  rep.tau_hat = detail::subset_average(
      ads, subset, [&](int j) { return ads[j - 1].a1[kp - 1] - ads[j - 1].a1[k - 1]; });
  rep.mu_hat[k] = detail::subset_average(ads, subset, [&](int j) { return ads[j - 1].a1[k - 1]; });
  rep.mu_hat[kp] = detail::subset_average(ads, subset, [&](int j) { return ads[j - 1].a1[kp - 1]; });
  return rep;
}

// Plug-in variance for DOR: the DAC formula with every weight-dependent term
// removed, i.e. the spread of the model contrast around tau over the subset.
inline double dor_var(std::span<const AggregatedData> ads, SubsetMask subset, int k, int kp,
                      double tau_hat) {
  detail::check_pair(ads, subset, k, kp);
  const std::vector<int> sites = subset_sites(subset);
  const double n_subset = static_cast<double>(detail::subset_size(ads, subset));
  const double inv2 = 1.0 / (n_subset * n_subset);
  NeumaierSum acc;
  for (int l : sites) acc.add(inv2 * ads[l - 1].a3(k - 1, kp - 1));
  acc.add(tau_hat * tau_hat / n_subset);
  NeumaierSum s;
  for (int l : sites)
    s.add(static_cast<double>(ads[l - 1].n) * (ads[l - 1].a1[kp - 1] - ads[l - 1].a1[k - 1]));
  acc.add(-2.0 * inv2 * tau_hat * s.value());
  return acc.value();
}

inline EstimateReport dor_estimate(std::span<const AggregatedData> ads, SubsetMask subset, int k,
                                   int kp) {
  EstimateReport rep = dor_tau(ads, subset, k, kp);
  rep.variance = dor_var(ads, subset, k, kp, rep.tau_hat);
  finalize_interval(rep);
  return rep;
}

// Distributed calibration weighting: weighted outcome means alone. A
// point-estimate comparator; no variance formula is attached to it, so the
// interval fields stay NaN.
inline EstimateReport dcw_tau(std::span<const AggregatedData> ads, SubsetMask subset, int k, int kp) {
  detail::check_pair(ads, subset, k, kp);
  EstimateReport rep;
  rep.method = "dcw";
  rep.k = k;
  rep.kprime = kp;
  rep.subset = subset;
  rep.tau_hat = detail::subset_average(
      ads, subset, [&](int j) { return ads[kp - 1].b2[j - 1] - ads[k - 1].b2[j - 1]; });
  rep.mu_hat[k] = detail::subset_average(ads, subset, [&](int j) { return ads[k - 1].b2[j - 1]; });
  rep.mu_hat[kp] = detail::subset_average(ads, subset, [&](int j) { return ads[kp - 1].b2[j - 1]; });
  return rep;
}

// ---------------------------------------------------------------------------
// Pooled references. These walk the individual-level rows directly and exist
// to verify that the aggregated-data estimators lose nothing; they are the
// test-side of the lossless guarantee and the variance oracle.
// ---------------------------------------------------------------------------

// weights[site-1][target-1] are the calibration results for that site's rows.
using WeightTable = std::vector<std::vector<CalibrationResult>>;

inline double pooled_mu(const std::vector<SiteDataset>& sites,
                        const std::vector<FittedOutcomeModel>& models, const WeightTable& weights,
                        SubsetMask subset, int k) {
  const int k_sites = static_cast<int>(sites.size());
  if (subset == 0) throw EmptySubset("pooled_mu: empty subset");
  long n_subset = 0;
  for (int j : subset_sites(subset)) n_subset += sites[j - 1].n();

  NeumaierSum acc;
  for (int d = 1; d <= k_sites; ++d) {
    const SiteDataset& site = sites[d - 1];
    const Vec pred_k = predict(models[k - 1], site.covariates);
    if (subset_contains(subset, d)) {
      for (int i = 0; i < site.n(); ++i) acc.add(pred_k[i]);
    }
    if (d == k) {
      for (int i = 0; i < site.n(); ++i) {
        double wsum = 0.0;
        for (int j : subset_sites(subset))
          wsum += static_cast<double>(sites[j - 1].n()) * weights[d - 1][j - 1].weights[i];
        acc.add((site.y[i] - pred_k[i]) * wsum);
      }
    }
  }
  return acc.value() / static_cast<double>(n_subset);
}

inline double pooled_tau(const std::vector<SiteDataset>& sites,
                         const std::vector<FittedOutcomeModel>& models, const WeightTable& weights,
                         SubsetMask subset, int k, int kp) {
  if (k == kp) throw SameComparators("pooled_tau: comparators must differ");
  return pooled_mu(sites, models, weights, subset, kp) -
         pooled_mu(sites, models, weights, subset, k);
}

// Sample second moment of the estimated efficient influence function for
// tau_{(k,k')|I}, divided by N: the pooled-data variance reference.
inline double pooled_eif_variance(const std::vector<SiteDataset>& sites,
                                  const std::vector<FittedOutcomeModel>& models,
                                  const WeightTable& weights, SubsetMask subset, int k, int kp,
                                  double tau_hat) {
  const int k_sites = static_cast<int>(sites.size());
  long n_subset = 0;
  for (int j : subset_sites(subset)) n_subset += sites[j - 1].n();

  NeumaierSum acc;
  for (int d = 1; d <= k_sites; ++d) {
    const SiteDataset& site = sites[d - 1];
    const bool in_subset = subset_contains(subset, d);
    if (!in_subset && d != k && d != kp) continue;
    const Vec pred_k = predict(models[k - 1], site.covariates);
    const Vec pred_kp = predict(models[kp - 1], site.covariates);
    for (int i = 0; i < site.n(); ++i) {
      double phi = 0.0;
      if (in_subset) phi += (pred_kp[i] - pred_k[i]) - tau_hat;
      if (d == kp) {
        double wsum = 0.0;
        for (int j : subset_sites(subset))
          wsum += static_cast<double>(sites[j - 1].n()) * weights[d - 1][j - 1].weights[i];
        phi += (site.y[i] - pred_kp[i]) * wsum;
      }
      if (d == k) {
        double wsum = 0.0;
        for (int j : subset_sites(subset))
          wsum += static_cast<double>(sites[j - 1].n()) * weights[d - 1][j - 1].weights[i];
        phi -= (site.y[i] - pred_k[i]) * wsum;
      }
      acc.add(phi * phi);
    }
  }
  return acc.value() / (static_cast<double>(n_subset) * static_cast<double>(n_subset));
}

}  // namespace fedcmp
