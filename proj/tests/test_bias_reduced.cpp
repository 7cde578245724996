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

#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "fedcmp/bias_reduced.hpp"
#include "test_helpers.hpp"

using namespace fedcmp;

namespace {

struct BRSetup {
  std::vector<SiteDataset> sites;
  std::vector<long> sizes;
  std::vector<Vec> gbar;  // covariate means per site
  std::vector<BRNuisanceFit> fits;
  std::vector<BRAggregatedData> brads;
};

BRSetup make_br_setup(std::uint64_t seed, int k_sites, int n_per_site, int dims = 2,
                      double shift = 0.15) {
  Rng rng(seed);
  BRSetup setup;
  for (int k = 1; k <= k_sites; ++k) {
    SiteDataset site;
    site.site = k;
    site.covariates = Matrix(n_per_site, dims);
    site.y.resize(n_per_site);
    for (int i = 0; i < n_per_site; ++i) {
      double mean = 0.7 * k;
      for (int c = 0; c < dims; ++c) {
        const double x = shift * k + rng.normal();
        site.covariates(i, c) = x;
        mean += (0.4 - 0.1 * c) * x;
      }
      mean += 0.2 * site.covariates(i, 0) * site.covariates(i, 0);
      site.y[i] = mean + 0.4 * rng.normal();
    }
    setup.sites.push_back(std::move(site));
    setup.sizes.push_back(n_per_site);
  }
  for (int k = 1; k <= k_sites; ++k) {
    Vec mean(dims);
    for (int c = 0; c < dims; ++c) {
      NeumaierSum s;
      for (int i = 0; i < n_per_site; ++i) s.add(setup.sites[k - 1].covariates(i, c));
      mean[c] = s.value() / n_per_site;
    }
    setup.gbar.push_back(std::move(mean));
  }
  std::vector<int> features(dims);
  for (int c = 0; c < dims; ++c) features[c] = c;
  for (int k = 1; k <= k_sites; ++k) {
    setup.fits.push_back(br_fit_site(setup.sites[k - 1], setup.gbar, setup.sizes, features,
                                     features));
    setup.brads.push_back(br_aggregates(setup.sites[k - 1], setup.fits[k - 1]));
  }
  return setup;
}

Matrix design_with_intercept(const Matrix& x) {
  Matrix g(x.rows, x.cols + 1);
  for (int i = 0; i < x.rows; ++i) {
    g(i, 0) = 1.0;
    for (int c = 0; c < x.cols; ++c) g(i, c + 1) = x(i, c);
  }
  return g;
}

// Raw residuals of the two estimating equations, computed by straight loops
// from the returned fit. Scaled by 1/N like the printed equations.
double weight_equation_residual(const BRSetup& setup, int site, int target) {
  const SiteDataset& data = setup.sites[site - 1];
  const Matrix g = design_with_intercept(data.covariates);
  const BRNuisanceFit& fit = setup.fits[site - 1];
  long total_n = 0;
  for (long n : setup.sizes) total_n += n;
  double worst = 0.0;
  for (int c = 0; c < g.cols; ++c) {
    double s = 0.0;
    for (int i = 0; i < data.n(); ++i) s += fit.tilts(i, target - 1) * g(i, c);
    const double expected = c == 0 ? static_cast<double>(setup.sizes[target - 1])
                                   : setup.sizes[target - 1] * setup.gbar[target - 1][c - 1];
    worst = std::max(worst, std::abs(s - expected) / total_n);
  }
  return worst;
}

double outcome_equation_residual(const BRSetup& setup, int site, SubsetMask subset) {
  const SiteDataset& data = setup.sites[site - 1];
  const Matrix g = design_with_intercept(data.covariates);
  const BRNuisanceFit& fit = setup.fits[site - 1];
  const Vec& beta = fit.betas[subset];
  long total_n = 0;
  for (long n : setup.sizes) total_n += n;
  double worst = 0.0;
  for (int c = 0; c < g.cols; ++c) {
    double s = 0.0;
    for (int i = 0; i < data.n(); ++i) {
      double w = 0.0;
      for (int j = 1; j <= static_cast<int>(setup.sites.size()); ++j)
        if (subset_contains(subset, j)) w += fit.tilts(i, j - 1);
      double pred = 0.0;
      for (int t = 0; t < g.cols; ++t) pred += beta[t] * g(i, t);
      s += w * (data.y[i] - pred) * g(i, c);
    }
    worst = std::max(worst, std::abs(s) / total_n);
  }
  return worst;
}

// Packages the subset-specific bias-reduced nuisances in the shapes the
// generic estimators expect.
struct BRNuisanceView {
  std::vector<FittedOutcomeModel> models;
  WeightTable weights;
};

BRNuisanceView nuisance_view(const BRSetup& setup, SubsetMask subset) {
  BRNuisanceView view;
  const int k_sites = static_cast<int>(setup.sites.size());
  for (int k = 1; k <= k_sites; ++k) {
    FittedOutcomeModel model;
    model.basis.kind = BasisKind::linear;
    model.basis.covariates = setup.sites[k - 1].dims();
    model.coefficients = setup.fits[k - 1].betas[subset];
    model.retained_columns.resize(model.coefficients.size());
    for (std::size_t c = 0; c < model.coefficients.size(); ++c)
      model.retained_columns[c] = static_cast<int>(c);
    model.site = k;
    model.subset_tag = subset;
    view.models.push_back(std::move(model));
  }
  for (int k = 1; k <= k_sites; ++k) {
    std::vector<CalibrationResult> row;
    for (int target = 1; target <= k_sites; ++target) {
      CalibrationResult cal;
      cal.weights.resize(setup.sites[k - 1].n());
      for (int i = 0; i < setup.sites[k - 1].n(); ++i)
        cal.weights[i] = setup.fits[k - 1].tilts(i, target - 1) / setup.sizes[target - 1];
      row.push_back(std::move(cal));
    }
    view.weights.push_back(std::move(row));
  }
  return view;
}

}  // namespace

TEST_CASE("estimating-equation residuals stay below 1e-8", "[properties]") {
  const BRSetup setup = make_br_setup(41, 3, 70);
  for (int site = 1; site <= 3; ++site) {
    for (int target = 1; target <= 3; ++target)
      CHECK(weight_equation_residual(setup, site, target) <= 1e-8);
    for (SubsetMask subset = 1; subset < (1u << 3); ++subset)
      CHECK(outcome_equation_residual(setup, site, subset) <= 1e-8);
  }
  // Self-gamma is exactly zero.
  for (int site = 1; site <= 3; ++site)
    CHECK(inf_norm(setup.fits[site - 1].gammas[site - 1]) == 0.0);
}

TEST_CASE("identical distributions reduce the singleton fit to ols") {
  // One common covariate law; subset {site}: tilt weights are exactly one.
  BRSetup setup = make_br_setup(77, 2, 60, 2, 0.0);
  for (int site = 1; site <= 2; ++site) {
    const SiteDataset& data = setup.sites[site - 1];
    const SubsetMask self = SubsetMask{1} << (site - 1);
    const Vec& beta = setup.fits[site - 1].betas[self];
    const FittedOutcomeModel ols = fit_outcome_model(data.covariates, data.y, BasisSpec{}, site);
    REQUIRE(beta.size() == ols.coefficients.size());
    for (std::size_t c = 0; c < beta.size(); ++c)
      CHECK(beta[c] == Catch::Approx(ols.coefficients[c]).margin(1e-9));
  }
}

TEST_CASE("infeasible target names the offending site") {
  BRSetup setup = make_br_setup(55, 2, 50);
  std::vector<Vec> far_targets = setup.gbar;
  far_targets[1] = {50.0, 50.0};  // far outside site 1's support
  try {
    br_fit_site(setup.sites[0], far_targets, setup.sizes, {0, 1}, {0, 1});
    FAIL("expected InfeasibleTarget");
  } catch (const InfeasibleTarget& e) {
    CHECK(std::string(e.what()).find("target 2") != std::string::npos);
  }
}

TEST_CASE("constant outcomes zero the bias-reduced residual aggregates") {
  BRSetup setup = make_br_setup(62, 2, 40);
  for (SiteDataset& site : setup.sites)
    for (double& y : site.y) y = site.site == 1 ? 1.0 : 3.0;
  setup.fits.clear();
  setup.brads.clear();
  for (int k = 1; k <= 2; ++k) {
    setup.fits.push_back(br_fit_site(setup.sites[k - 1], setup.gbar, setup.sizes, {0, 1}, {0, 1}));
    setup.brads.push_back(br_aggregates(setup.sites[k - 1], setup.fits[k - 1]));
  }
  for (const BRAggregatedData& ad : setup.brads) {
    for (SubsetMask subset = 1; subset < (1u << 2); ++subset) {
      for (int k = 0; k < 2; ++k) {
        CHECK(std::abs(ad.o2[subset][k]) <= 1e-8);
        for (int h = 0; h < 2; ++h) CHECK(std::abs(ad.o4[subset](k, h)) <= 1e-6);
        for (int r = 0; r < ad.p; ++r) CHECK(std::abs(ad.o5[subset][k][r]) <= 1e-6);
      }
    }
  }
  const EstimateReport rep = br_estimate(setup.brads, 3, 1, 2);
  CHECK(rep.tau_hat == Catch::Approx(2.0).margin(1e-10));
  CHECK(std::abs(rep.variance) <= 1e-10);
}

TEST_CASE("bias-reduced aggregates match a straight-loop recomputation") {
  const BRSetup setup = make_br_setup(83, 2, 45);
  for (int site = 1; site <= 2; ++site) {
    const BRAggregatedData& ad = setup.brads[site - 1];
    const SiteDataset& data = setup.sites[site - 1];
    const Matrix g = design_with_intercept(data.covariates);
    const BRNuisanceFit& fit = setup.fits[site - 1];
    for (int r = 0; r < ad.p; ++r) {
      double s = 0.0;
      for (int i = 0; i < data.n(); ++i) s += g(i, r);
      CHECK(ad.o1[r] == Catch::Approx(s).margin(1e-12 * (1.0 + std::abs(s))));
      for (int c = 0; c < ad.p; ++c) {
        double sc = 0.0;
        for (int i = 0; i < data.n(); ++i) sc += g(i, r) * g(i, c);
        CHECK(ad.o3(r, c) == Catch::Approx(sc).margin(1e-12 * (1.0 + std::abs(sc))));
      }
    }
    for (SubsetMask subset = 1; subset < (1u << 2); ++subset) {
      const Vec& beta = fit.betas[subset];
      for (int k = 0; k < 2; ++k) {
        double o2 = 0.0, o4 = 0.0;
        Vec o5(ad.p, 0.0);
        for (int i = 0; i < data.n(); ++i) {
          double pred = 0.0;
          for (int t = 0; t < ad.p; ++t) pred += beta[t] * g(i, t);
          const double resid = data.y[i] - pred;
          o2 += fit.tilts(i, k) * resid;
          o4 += fit.tilts(i, k) * fit.tilts(i, k) * resid * resid;
          for (int r = 0; r < ad.p; ++r) o5[r] += fit.tilts(i, k) * resid * g(i, r);
        }
        CHECK(ad.o2[subset][k] == Catch::Approx(o2).margin(1e-12 + 1e-12 * std::abs(o2)));
        CHECK(ad.o4[subset](k, k) == Catch::Approx(o4).margin(1e-12 * (1.0 + std::abs(o4))));
        for (int r = 0; r < ad.p; ++r)
          CHECK(ad.o5[subset][k][r] == Catch::Approx(o5[r]).margin(1e-11 + 1e-12 * std::abs(o5[r])));
      }
    }
  }
}

TEST_CASE("weighted residual sums over the subset vanish", "[properties]") {
  const BRSetup setup = make_br_setup(90, 3, 55);
  for (int site = 1; site <= 3; ++site) {
    const BRAggregatedData& ad = setup.brads[site - 1];
    for (SubsetMask subset = 1; subset < (1u << 3); ++subset) {
      double total = 0.0;
      for (int j : subset_sites(subset)) total += ad.o2[subset][j - 1];
      CHECK(std::abs(total) <= 1e-8);
    }
  }
}

TEST_CASE("triple identity: bias-reduced = dcw = dac under shared bases", "[properties]") {
  const BRSetup setup = make_br_setup(112, 3, 65);
  for (SubsetMask subset = 1; subset < (1u << 3); ++subset) {
    const BRNuisanceView view = nuisance_view(setup, subset);
    std::vector<AggregatedData> ads;
    for (int k = 1; k <= 3; ++k)
      ads.push_back(site_aggregates(setup.sites[k - 1], view.models, view.weights[k - 1],
                                    setup.sizes));
    for (int k = 1; k <= 3; ++k)
      for (int kp = 1; kp <= 3; ++kp) {
        if (k == kp) continue;
        const EstimateReport br = br_estimate(setup.brads, subset, k, kp);
        const double dac = dac_tau(ads, subset, k, kp).tau_hat;
        const double dcw = dcw_tau(ads, subset, k, kp).tau_hat;
        CHECK(std::abs(br.tau_hat - dac) <= 1e-10 * (1.0 + std::abs(dac)));
        CHECK(std::abs(br.tau_hat - dcw) <= 1e-10 * (1.0 + std::abs(dcw)));

        // Variance: Eq-level identity with the pooled influence-function
        // second moment and the generic aggregated-data variance.
        const double dac_variance = dac_var(ads, subset, k, kp, br.tau_hat);
        const double pooled = pooled_eif_variance(setup.sites, view.models, view.weights, subset,
                                                  k, kp, br.tau_hat);
        CHECK(std::abs(br.variance - pooled) <= 1e-10 * (1.0 + std::abs(pooled)));
        CHECK(std::abs(dac_variance - pooled) <= 1e-10 * (1.0 + std::abs(pooled)));
        CHECK(br.variance >= -1e-12);
      }
  }
}

TEST_CASE("experimental cross-basis path solves both equations") {
  // a(X) = (1, x1), g(X) = (1, x2) with correlated covariates.
  Rng rng(314159);
  const int n = 150;
  std::vector<SiteDataset> sites;
  std::vector<long> sizes;
  std::vector<Vec> gbar;
  for (int k = 1; k <= 2; ++k) {
    SiteDataset site;
    site.site = k;
    site.covariates = Matrix(n, 2);
    site.y.resize(n);
    for (int i = 0; i < n; ++i) {
      const double base = 0.1 * k + rng.normal();
      site.covariates(i, 0) = base;
      site.covariates(i, 1) = 0.8 * base + 0.3 * rng.normal();
      site.y[i] = 1.0 + 0.5 * site.covariates(i, 1) + 0.3 * rng.normal();
    }
    sites.push_back(std::move(site));
    sizes.push_back(n);
  }
  for (int k = 1; k <= 2; ++k) {
    // Balancing targets are the g-feature means (covariate x2).
    NeumaierSum s;
    for (int i = 0; i < n; ++i) s.add(sites[k - 1].covariates(i, 1));
    gbar.push_back({s.value() / n});
  }
  const BRNuisanceFit fit = br_fit_site(sites[0], gbar, sizes, {0}, {1});
  // Weight equation: tilted g-moments hit the target.
  const Matrix g = design_with_intercept(detail::select_columns(sites[0].covariates, {1}));
  for (int target = 1; target <= 2; ++target) {
    double s0 = 0.0, s1 = 0.0;
    for (int i = 0; i < n; ++i) {
      s0 += fit.tilts(i, target - 1);
      s1 += fit.tilts(i, target - 1) * g(i, 1);
    }
    CHECK(std::abs(s0 - sizes[target - 1]) / (2.0 * n) <= 1e-8);
    CHECK(std::abs(s1 - sizes[target - 1] * gbar[target - 1][0]) / (2.0 * n) <= 1e-8);
  }
  // Outcome equation residual (moments against a(X)).
  const Matrix a = design_with_intercept(detail::select_columns(sites[0].covariates, {0}));
  for (SubsetMask subset = 1; subset < 4; ++subset) {
    const Vec& beta = fit.betas[subset];
    for (int c = 0; c < 2; ++c) {
      double s = 0.0;
      for (int i = 0; i < n; ++i) {
        double w = 0.0;
        for (int j = 1; j <= 2; ++j)
          if (subset_contains(subset, j)) w += fit.tilts(i, j - 1);
        s += w * (sites[0].y[i] - beta[0] * g(i, 0) - beta[1] * g(i, 1)) * a(i, c);
      }
      CHECK(std::abs(s) / (2.0 * n) <= 1e-8);
    }
  }
}
