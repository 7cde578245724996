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
#include <numeric>
#include <string>
#include <vector>

#include "fedcmp/calibration.hpp"
#include "fedcmp/dataset.hpp"
#include "fedcmp/errors.hpp"
#include "fedcmp/estimators.hpp"
#include "fedcmp/linalg.hpp"

namespace fedcmp {

// Bias-reduced nuisance fit at one site: log-linear weighting functions
// toward every other site plus subset-specific linear outcome coefficients,
// chosen so the derivative of the efficient influence function is zero in
// sample. Gammas carry an explicit intercept coordinate, which absorbs the
// weight normalization: sum_i exp(gamma' a(x_i)) over local rows equals the
// target site's size.
struct BRNuisanceFit {
  int site = 0;
  int num_sites = 0;
  std::vector<Vec> gammas;           // target-1 -> q-vector (intercept first); self is all zero
  std::vector<Vec> betas;            // subset mask -> p-vector; entry 0 unused
  Matrix tilts;                      // n x K, exp(gamma_{k}' a(x_i)) per target k
  std::vector<int> weight_features;  // covariate indices behind a(X)
  std::vector<int> outcome_features; // covariate indices behind g(X)
};

namespace detail {

inline Matrix select_columns(const Matrix& x, const std::vector<int>& idx) {
  Matrix out(x.rows, static_cast<int>(idx.size()));
  for (int i = 0; i < x.rows; ++i)
    for (std::size_t c = 0; c < idx.size(); ++c) out(i, c) = x(i, idx[c]);
  return out;
}

// [1, x_sel] expansion used for both a(X) and g(X) in this module.
inline Matrix with_intercept(const Matrix& x) {
  Matrix out(x.rows, x.cols + 1);
  for (int i = 0; i < x.rows; ++i) {
    out(i, 0) = 1.0;
    for (int c = 0; c < x.cols; ++c) out(i, c + 1) = x(i, c);
  }
  return out;
}

// Experimental a != g path: damped Newton root solve of the moment system
// sum_i exp(gamma' a_i) g_i = n_target * gbar_target, requiring p == q and a
// full-rank cross-moment Jacobian. Rank failure is surfaced, not regularized.
inline Vec br_cross_basis_gamma(const Matrix& a, const Matrix& g, const Vec& target,
                                const std::string& label) {
  const int n = a.rows;
  const int q = a.cols;
  if (g.cols != q)
    throw DegenerateFeatures("bias-reduced cross-basis solve needs p == q at " + label);
  Vec gamma(q, 0.0);
  Vec tilt(n);
  const double tol = 1e-10 * std::max(1.0, inf_norm(target));
  auto moments = [&](const Vec& gm, Vec& f) {
    for (int i = 0; i < n; ++i) tilt[i] = std::exp(stable_dot(a.row(i), gm));
    for (int c = 0; c < q; ++c) {
      NeumaierSum s;
      for (int i = 0; i < n; ++i) s.add(tilt[i] * g(i, c));
      f[c] = (s.value() - target[c]) / n;
    }
  };
  Vec f(q);
  moments(gamma, f);
  for (int iter = 0; iter < 200; ++iter) {
    if (inf_norm(f) <= tol) return gamma;
    Matrix jac(q, q);
    for (int r = 0; r < q; ++r)
      for (int c = 0; c < q; ++c) {
        NeumaierSum s;
        for (int i = 0; i < n; ++i) s.add(tilt[i] * g(i, r) * a(i, c));
        jac(r, c) = s.value() / n;
      }
    Vec rhs(q);
    for (int c = 0; c < q; ++c) rhs[c] = -f[c];
    Vec delta;
    try {
      delta = solve_square(jac, rhs);
    } catch (const SingularSystem&) {
      throw DegenerateFeatures("bias-reduced cross-moment matrix rank-deficient at " + label);
    }
    const double fnorm = inf_norm(f);
    double step = 1.0;
    Vec cand(q);
    for (;;) {
      for (int c = 0; c < q; ++c) cand[c] = gamma[c] + step * delta[c];
      moments(cand, f);
      if (inf_norm(f) < fnorm) break;
      step *= 0.5;
      if (step < 1e-12)
        throw InfeasibleTarget("bias-reduced cross-basis calibration stalled at " + label);
    }
    gamma = cand;
    if (inf_norm(gamma) > 1e3)
      throw InfeasibleTarget("bias-reduced cross-basis calibration diverged at " + label);
  }
  throw InfeasibleTarget("bias-reduced cross-basis calibration did not converge at " + label);
}

}  // namespace detail

// Solves the bias-reduced estimating equations at site `data.site`:
// entropy-balancing tilts toward every target (the weight equation) followed
// by, for every nonempty subset, weighted least squares with the summed
// tilts as weights (the outcome equation). target_means[k-1] holds the
// covariate means of g(X) at site k (no intercept coordinate; that target
// is the site size). With weight_features != outcome_features the
// experimental cross-basis route is taken.
inline BRNuisanceFit br_fit_site(const SiteDataset& data, const std::vector<Vec>& target_means,
                                 const std::vector<long>& site_sizes,
                                 const std::vector<int>& weight_features,
                                 const std::vector<int>& outcome_features) {
  const int k_sites = static_cast<int>(target_means.size());
  if (static_cast<int>(site_sizes.size()) != k_sites)
    throw DimensionMismatch("br_fit_site: site_sizes length != K");
  if (k_sites < 2 || k_sites > kMaxSites)
    throw ConfigError("br_fit_site: K must be in 2.." + std::to_string(kMaxSites));
  const int n = data.n();
  const int site = data.site;
  const bool same_basis = weight_features == outcome_features;

  const Matrix a_cov = detail::select_columns(data.covariates, weight_features);
  const Matrix g_full = detail::with_intercept(detail::select_columns(data.covariates, outcome_features));
  const int p = g_full.cols;
  const int q = a_cov.cols + 1;
  if (p != q && !same_basis)
    throw DegenerateFeatures("br_fit_site: cross-basis path requires p == q (got p=" +
                             std::to_string(p) + ", q=" + std::to_string(q) + ")");

  BRNuisanceFit fit;
  fit.site = site;
  fit.num_sites = k_sites;
  fit.weight_features = weight_features;
  fit.outcome_features = outcome_features;
  fit.gammas.assign(k_sites, Vec(q, 0.0));
  fit.tilts = Matrix(n, k_sites);

  for (int target = 1; target <= k_sites; ++target) {
    if (target == site) {
      for (int i = 0; i < n; ++i) fit.tilts(i, target - 1) = 1.0;
      continue;
    }
    const double n_target = static_cast<double>(site_sizes[target - 1]);
    if (same_basis) {
      CalibrationProblem problem;
      problem.features = a_cov;
      problem.target_mean = target_means[target - 1];
      problem.source_site = site;
      problem.target_site = target;
      const CalibrationResult cal = entropy_balance(problem);
      // Unnormalized tilt: exp(gamma' a) = n_target * normalized weight; the
      // intercept coordinate carries the log normalizer.
      NeumaierSum lse;
      for (int i = 0; i < n; ++i) {
        double u = 0.0;
        for (int c = 0; c < a_cov.cols; ++c) u += cal.gamma[c] * a_cov(i, c);
        lse.add(std::exp(u));
      }
      Vec& gamma = fit.gammas[target - 1];
      gamma[0] = std::log(n_target) - std::log(lse.value());
      for (int c = 0; c < a_cov.cols; ++c) gamma[c + 1] = cal.gamma[c];
      for (int i = 0; i < n; ++i) fit.tilts(i, target - 1) = n_target * cal.weights[i];
    } else {
      Vec target_g(p);
      target_g[0] = n_target;
      for (int c = 0; c + 1 < p; ++c) target_g[c + 1] = n_target * target_means[target - 1][c];
      const Matrix a_full = detail::with_intercept(a_cov);
      const std::string label = "site " + std::to_string(site) + " toward target " + std::to_string(target);
      fit.gammas[target - 1] = detail::br_cross_basis_gamma(a_full, g_full, target_g, label);
      for (int i = 0; i < n; ++i)
        fit.tilts(i, target - 1) = std::exp(stable_dot(a_full.row(i), fit.gammas[target - 1]));
    }
  }

  // Subset-specific outcome coefficients: one weighted moment solve per
  // nonempty subset, reusing the per-target tilts (only the weight sums
  // change from subset to subset).
  Matrix cross_rows;
  if (!same_basis) cross_rows = detail::with_intercept(a_cov);
  const Matrix& a_full_rows = same_basis ? g_full : cross_rows;
  fit.betas.assign(std::size_t{1} << k_sites, Vec());
  Vec w(n);
  for (SubsetMask mask = 1; mask < (SubsetMask{1} << k_sites); ++mask) {
    for (int i = 0; i < n; ++i) {
      double v = 0.0;
      for (int j = 1; j <= k_sites; ++j)
        if (subset_contains(mask, j)) v += fit.tilts(i, j - 1);
      w[i] = v;
    }
    Matrix m(p, p);
    Vec rhs(p);
    for (int r = 0; r < p; ++r) {
      for (int c = same_basis ? r : 0; c < p; ++c) {
        NeumaierSum s;
        for (int i = 0; i < n; ++i) s.add(w[i] * a_full_rows(i, r) * g_full(i, c));
        m(r, c) = s.value();
        if (same_basis) m(c, r) = s.value();
      }
      NeumaierSum s;
      for (int i = 0; i < n; ++i) s.add(w[i] * a_full_rows(i, r) * data.y[i]);
      rhs[r] = s.value();
    }
    try {
      fit.betas[mask] = same_basis ? solve_spd(m, rhs) : solve_square(m, rhs);
    } catch (const SingularSystem&) {
      throw DegenerateFeatures("br_fit_site: outcome moment matrix singular at site " +
                               std::to_string(site) + ", subset {" + subset_label(mask) + "}");
    }
  }
  return fit;
}

// The round-2 payload of the bias-reduced algorithm. All entries are sums
// over local rows; subscripts follow the fit they came from:
//   o1       sum of g(x_i)
//   o2[I][k] tilt-k weighted residual sum under the subset-I coefficients
//   o3       sum of g g'
//   o4[I](l,h) product-tilt weighted squared residual sum
//   o5[I][k] tilt-k weighted residual-times-g sum
struct BRAggregatedData {
  int site = 0;
  long n = 0;
  int p = 0;
  int num_sites = 0;
  std::vector<Vec> beta;               // subset mask -> p
  Vec o1;                              // p
  Matrix o3;                           // p x p
  std::vector<Vec> o2;                 // subset mask -> K
  std::vector<Matrix> o4;              // subset mask -> K x K, symmetric
  std::vector<std::vector<Vec>> o5;    // subset mask -> K -> p
};

inline BRAggregatedData br_aggregates(const SiteDataset& data, const BRNuisanceFit& fit) {
  if (fit.site != data.site) throw UnknownSite("br_aggregates: fit belongs to another site");
  const int k_sites = fit.num_sites;
  const int n = data.n();
  const Matrix g_full = detail::with_intercept(detail::select_columns(data.covariates, fit.outcome_features));
  const int p = g_full.cols;

  BRAggregatedData ad;
  ad.site = data.site;
  ad.n = n;
  ad.p = p;
  ad.num_sites = k_sites;
  ad.beta = fit.betas;
  ad.o1.assign(p, 0.0);
  ad.o3 = Matrix(p, p);
  for (int r = 0; r < p; ++r) {
    NeumaierSum s;
    for (int i = 0; i < n; ++i) s.add(g_full(i, r));
    ad.o1[r] = s.value();
    for (int c = r; c < p; ++c) {
      NeumaierSum sc;
      for (int i = 0; i < n; ++i) sc.add(g_full(i, r) * g_full(i, c));
      ad.o3(r, c) = sc.value();
      ad.o3(c, r) = sc.value();
    }
  }

  const std::size_t masks = std::size_t{1} << k_sites;
  ad.o2.assign(masks, Vec());
  ad.o4.assign(masks, Matrix());
  ad.o5.assign(masks, std::vector<Vec>());
  Vec resid(n);
  for (SubsetMask mask = 1; mask < masks; ++mask) {
    const Vec& beta = fit.betas[mask];
    for (int i = 0; i < n; ++i) resid[i] = data.y[i] - stable_dot(g_full.row(i), beta);
    Vec& o2 = ad.o2[mask];
    o2.assign(k_sites, 0.0);
    Matrix& o4 = ad.o4[mask];
    o4 = Matrix(k_sites, k_sites);
    std::vector<Vec>& o5 = ad.o5[mask];
    o5.assign(k_sites, Vec(p, 0.0));
    for (int k = 0; k < k_sites; ++k) {
      NeumaierSum s2;
      for (int i = 0; i < n; ++i) s2.add(fit.tilts(i, k) * resid[i]);
      o2[k] = s2.value();
      for (int r = 0; r < p; ++r) {
        NeumaierSum s5;
        for (int i = 0; i < n; ++i) s5.add(fit.tilts(i, k) * resid[i] * g_full(i, r));
        o5[k][r] = s5.value();
      }
      for (int h = k; h < k_sites; ++h) {
        NeumaierSum s4;
        for (int i = 0; i < n; ++i) s4.add(fit.tilts(i, k) * fit.tilts(i, h) * resid[i] * resid[i]);
        o4(k, h) = s4.value();
        o4(h, k) = s4.value();
      }
    }
  }
  return ad;
}

namespace detail {

inline void check_br_pair(std::span<const BRAggregatedData> brads, SubsetMask subset, int k, int kp) {
  const int k_sites = static_cast<int>(brads.size());
  if (subset == 0) throw EmptySubset("br estimator: empty target subset");
  if (k == kp) throw SameComparators("br estimator: comparators must differ");
  if (k < 1 || k > k_sites || kp < 1 || kp > k_sites)
    throw UnknownSite("br estimator: comparator outside 1.." + std::to_string(k_sites));
  if (subset >= (SubsetMask{1} << k_sites))
    throw UnknownSite("br estimator: subset references an unknown site");
  for (int s = 0; s < k_sites; ++s)
    if (brads[s].site != s + 1)
      throw UnknownSite("br estimator: aggregated data out of order");
}

}  // namespace detail

// Bias-reduced point estimator: outcome-coefficient contrast against the
// pooled subset moments plus residual corrections (which vanish under the
// shared-basis fit by the weighted least squares normal equations).
inline EstimateReport br_tau(std::span<const BRAggregatedData> brads, SubsetMask subset, int k,
                             int kp) {
  detail::check_br_pair(brads, subset, k, kp);
  const std::vector<int> sites = subset_sites(subset);
  const int p = brads[0].p;
  long n_subset = 0;
  Vec sum_o1(p, 0.0);
  for (int j : sites) {
    n_subset += brads[j - 1].n;
    for (int r = 0; r < p; ++r) sum_o1[r] += brads[j - 1].o1[r];
  }
  const Vec& beta_k = brads[k - 1].beta[subset];
  const Vec& beta_kp = brads[kp - 1].beta[subset];

  // Accumulated so that swapping the comparators negates every term exactly.
  NeumaierSum tau;
  for (int r = 0; r < p; ++r) tau.add((beta_kp[r] - beta_k[r]) * sum_o1[r]);
  for (int j : sites) tau.add(brads[kp - 1].o2[subset][j - 1] - brads[k - 1].o2[subset][j - 1]);

  EstimateReport rep;
  rep.method = "dac-br";
  rep.k = k;
  rep.kprime = kp;
  rep.subset = subset;
  rep.tau_hat = tau.value() / static_cast<double>(n_subset);
  for (int comparator : {k, kp}) {
    NeumaierSum mu;
    const Vec& beta = brads[comparator - 1].beta[subset];
    for (int r = 0; r < p; ++r) mu.add(beta[r] * sum_o1[r]);
    for (int j : sites) mu.add(brads[comparator - 1].o2[subset][j - 1]);
    rep.mu_hat[comparator] = mu.value() / static_cast<double>(n_subset);
  }
  return rep;
}

// Variance of the bias-reduced estimator from the O1..O5 aggregates;
// algebraically the pooled sample second moment of the influence function
// at the bias-reduced nuisance values, divided by N. Valid with one working
// model misspecified.
inline double br_var(std::span<const BRAggregatedData> brads, SubsetMask subset, int k, int kp,
                     double tau_hat) {
  detail::check_br_pair(brads, subset, k, kp);
  const std::vector<int> sites = subset_sites(subset);
  const int p = brads[0].p;
  long n_subset_l = 0;
  Vec sum_o1(p, 0.0);
  Matrix sum_o3(p, p);
  for (int j : sites) {
    n_subset_l += brads[j - 1].n;
    for (int r = 0; r < p; ++r) {
      sum_o1[r] += brads[j - 1].o1[r];
      for (int c = 0; c < p; ++c) sum_o3(r, c) += brads[j - 1].o3(r, c);
    }
  }
  const double n_subset = static_cast<double>(n_subset_l);
  const double inv2 = 1.0 / (n_subset * n_subset);
  const Vec& beta_k = brads[k - 1].beta[subset];
  const Vec& beta_kp = brads[kp - 1].beta[subset];
  Vec dbeta(p);
  for (int r = 0; r < p; ++r) dbeta[r] = beta_kp[r] - beta_k[r];

  NeumaierSum acc;
  // Outcome-contrast spread.
  for (int r = 0; r < p; ++r)
    for (int c = 0; c < p; ++c) acc.add(inv2 * dbeta[r] * sum_o3(r, c) * dbeta[c]);
  acc.add(-2.0 * inv2 * tau_hat * stable_dot(dbeta, sum_o1));
  acc.add(tau_hat * tau_hat / n_subset);
  // Weighted residual second moments at the comparator sites.
  for (int l : sites)
    for (int h : sites)
      acc.add(inv2 * (brads[kp - 1].o4[subset](l - 1, h - 1) + brads[k - 1].o4[subset](l - 1, h - 1)));
  // Cross terms.
  if (subset_contains(subset, kp)) {
    NeumaierSum s5, s2;
    for (int l : sites) {
      s5.add(stable_dot(dbeta, brads[kp - 1].o5[subset][l - 1]));
      s2.add(brads[kp - 1].o2[subset][l - 1]);
    }
    acc.add(2.0 * inv2 * s5.value());
    acc.add(-2.0 * inv2 * tau_hat * s2.value());
  }
  if (subset_contains(subset, k)) {
    NeumaierSum s5, s2;
    for (int l : sites) {
      s5.add(stable_dot(dbeta, brads[k - 1].o5[subset][l - 1]));
      s2.add(brads[k - 1].o2[subset][l - 1]);
    }
    acc.add(-2.0 * inv2 * s5.value());
    acc.add(2.0 * inv2 * tau_hat * s2.value());
  }
  return acc.value();
}

inline EstimateReport br_estimate(std::span<const BRAggregatedData> brads, SubsetMask subset, int k,
                                  int kp) {
  EstimateReport rep = br_tau(brads, subset, k, kp);
  rep.variance = br_var(brads, subset, k, kp, rep.tau_hat);
  finalize_interval(rep);
  return rep;
}

}  // namespace fedcmp
