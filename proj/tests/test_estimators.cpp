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
#include <algorithm>
#include <cmath>

#include "test_helpers.hpp"

using namespace fedcmp;
using testutil::Network;

TEST_CASE("constant toy forces tau = 2 with zero variance") {
  const Network net = testutil::constant_toy();
  const EstimateReport rep = dac_estimate(net.ads, full_subset(2), 1, 2);
  CHECK(rep.tau_hat == Catch::Approx(2.0).margin(1e-14));
  CHECK(std::abs(rep.variance) <= 1e-12);
  CHECK(rep.mu_hat.at(1) == Catch::Approx(1.0).margin(1e-14));
  CHECK(rep.mu_hat.at(2) == Catch::Approx(3.0).margin(1e-14));
  CHECK(dor_tau(net.ads, 3, 1, 2).tau_hat == Catch::Approx(2.0).margin(1e-14));
  CHECK(dcw_tau(net.ads, 3, 1, 2).tau_hat == Catch::Approx(2.0).margin(1e-14));
}

TEST_CASE("comparator and subset validation") {
  const Network net = testutil::constant_toy();
  CHECK_THROWS_AS(dac_tau(net.ads, 3, 1, 1), SameComparators);
  CHECK_THROWS_AS(dac_tau(net.ads, 0, 1, 2), EmptySubset);
  CHECK_THROWS_AS(dac_tau(net.ads, 3, 1, 5), UnknownSite);
  CHECK_THROWS_AS(dac_tau(net.ads, 0b100, 1, 2), UnknownSite);
}

TEST_CASE("dac equals the pooled estimator on seeded data") {
  const Network net = testutil::make_network(501, 2, 20);
  for (SubsetMask subset = 1; subset <= 3; ++subset) {
    const EstimateReport rep = dac_estimate(net.ads, subset, 1, 2);
    const double pooled = pooled_tau(net.sites, net.models, net.weights, subset, 1, 2);
    CHECK(std::abs(rep.tau_hat - pooled) <= 1e-10 * (1.0 + std::abs(pooled)));
    const double pooled_var =
        pooled_eif_variance(net.sites, net.models, net.weights, subset, 1, 2, pooled);
    CHECK(std::abs(rep.variance - pooled_var) <= 1e-10 * (1.0 + std::abs(pooled_var)));
  }
}

TEST_CASE("lossless equivalence over subsets and pairs", "[properties]") {
  const Network net = testutil::make_network(907, 4, 45, 3);
  for (SubsetMask subset = 1; subset < (1u << 4); ++subset) {
    for (int k = 1; k <= 4; ++k)
      for (int kp = 1; kp <= 4; ++kp) {
        if (k == kp) continue;
        const EstimateReport rep = dac_estimate(net.ads, subset, k, kp);
        const double pooled = pooled_tau(net.sites, net.models, net.weights, subset, k, kp);
        const double pooled_var =
            pooled_eif_variance(net.sites, net.models, net.weights, subset, k, kp, pooled);
        CHECK(std::abs(rep.tau_hat - pooled) <= 1e-10 * (1.0 + std::abs(pooled)));
        CHECK(std::abs(rep.variance - pooled_var) <= 1e-10 * (1.0 + std::abs(pooled_var)));
        CHECK(rep.variance >= -1e-12);
        CHECK(rep.ci_low <= rep.tau_hat);
        CHECK(rep.ci_high >= rep.tau_hat);
      }
  }
}

TEST_CASE("antisymmetry is exact", "[properties]") {
  const Network net = testutil::make_network(1203, 3, 35);
  for (SubsetMask subset = 1; subset < (1u << 3); ++subset)
    for (int k = 1; k <= 3; ++k)
      for (int kp = 1; kp <= 3; ++kp) {
        if (k == kp) continue;
        const double forward = dac_tau(net.ads, subset, k, kp).tau_hat;
        const double backward = dac_tau(net.ads, subset, kp, k).tau_hat;
        CHECK(forward == -backward);
      }
}

TEST_CASE("subset aggregation identity is exact", "[properties]") {
  const Network net = testutil::make_network(7321, 4, 30, 2);
  for (int k = 1; k <= 4; ++k) {
    for (SubsetMask subset = 1; subset < (1u << 4); ++subset) {
      const int kp = k == 1 ? 2 : 1;
      const EstimateReport rep = dac_tau(net.ads, subset, k, kp);
      // Recombine singleton estimates with the same weighted average.
      NeumaierSum num_mu, num_tau;
      long den = 0;
      for (int j : subset_sites(subset)) {
        const EstimateReport single = dac_tau(net.ads, SubsetMask{1} << (j - 1), k, kp);
        num_mu.add(static_cast<double>(net.ads[j - 1].n) * single.mu_hat.at(k));
        num_tau.add(static_cast<double>(net.ads[j - 1].n) * single.tau_hat);
        den += net.ads[j - 1].n;
      }
      if (subset_sites(subset).size() == 1) continue;  // identity is trivial
      CHECK(rep.mu_hat.at(k) == num_mu.value() / den);
      CHECK(rep.tau_hat == num_tau.value() / den);
    }
  }
}

TEST_CASE("dor equals dac when models fit residual-free") {
  // Noiseless linear outcomes: every residual is zero.
  const Network net = testutil::make_network(88, 2, 40, 2, 0.2, 0.0);
  // Curvature makes residuals nonzero; rebuild with a purely linear signal.
  Network lin = net;
  for (int k = 0; k < 2; ++k) {
    SiteDataset& site = lin.sites[k];
    for (int i = 0; i < site.n(); ++i) {
      site.y[i] = 1.0 + 0.5 * site.covariates(i, 0) - 0.25 * site.covariates(i, 1);
    }
    lin.models[k] = fit_outcome_model(site.covariates, site.y, BasisSpec{}, k + 1);
  }
  for (int k = 0; k < 2; ++k)
    lin.ads[k] = site_aggregates(lin.sites[k], lin.models, lin.weights[k], lin.sizes);
  const double dac = dac_tau(lin.ads, 3, 1, 2).tau_hat;
  const double dor = dor_tau(lin.ads, 3, 1, 2).tau_hat;
  CHECK(dac == Catch::Approx(dor).margin(1e-9));
}

TEST_CASE("dcw differs from dac under misspecified weights") {
  Network net = testutil::make_network(2024, 2, 120, 2, 0.6, 0.0);
  // Correct outcome signal (noiseless linear), deliberately wrong weights:
  // uniform everywhere despite shifted covariate laws.
  for (int k = 0; k < 2; ++k) {
    SiteDataset& site = net.sites[k];
    for (int i = 0; i < site.n(); ++i)
      site.y[i] = 2.0 + 1.5 * site.covariates(i, 0) + 0.5 * site.covariates(i, 1);
    net.models[k] = fit_outcome_model(site.covariates, site.y, BasisSpec{}, k + 1);
    net.weights[k] = {uniform_calibration(site.n(), 2), uniform_calibration(site.n(), 2)};
  }
  for (int k = 0; k < 2; ++k)
    net.ads[k] = site_aggregates(net.sites[k], net.models, net.weights[k], net.sizes);
  const double dac = dac_tau(net.ads, 0b01, 1, 2).tau_hat;  // target population site 1
  const double dcw = dcw_tau(net.ads, 0b01, 1, 2).tau_hat;
  // The outcome model is exact, so DAC recovers the site-1 contrast; DCW
  // averages unweighted site-2 outcomes and misses the covariate shift.
  CHECK(std::abs(dac - dcw) > 1e-3);
}

TEST_CASE("dac minus dcw equals the bias-correction expression", "[properties]") {
  const Network net = testutil::make_network(611, 3, 55, 2);
  for (SubsetMask subset = 1; subset < (1u << 3); ++subset)
    for (int k = 1; k <= 3; ++k)
      for (int kp = 1; kp <= 3; ++kp) {
        if (k == kp) continue;
        const double dac = dac_tau(net.ads, subset, k, kp).tau_hat;
        const double dcw = dcw_tau(net.ads, subset, k, kp).tau_hat;
        // Direct recomputation of the correction: for each comparator, the
        // local model average minus the weighted model average at its site.
        auto correction = [&](int comparator) {
          double num = 0.0;
          long den = 0;
          for (int j : subset_sites(subset)) {
            const SiteDataset& target = net.sites[j - 1];
            double local_avg = 0.0;
            for (int i = 0; i < target.n(); ++i)
              local_avg += net.models[comparator - 1].predict_row(target.covariates.row(i));
            local_avg /= target.n();
            const SiteDataset& source = net.sites[comparator - 1];
            double weighted_avg = 0.0;
            for (int i = 0; i < source.n(); ++i)
              weighted_avg += net.weights[comparator - 1][j - 1].weights[i] *
                              net.models[comparator - 1].predict_row(source.covariates.row(i));
            num += target.n() * (local_avg - weighted_avg);
            den += target.n();
          }
          return num / den;
        };
        const double expected = correction(kp) - correction(k);
        CHECK(dac - dcw == Catch::Approx(expected).margin(1e-10 * (1.0 + std::abs(expected))));
      }
}

TEST_CASE("row permutation leaves all reports bit-identical", "[properties]") {
  auto build = [](const std::vector<SiteDataset>& sites) {
    Network net;
    net.sites = sites;
    for (const SiteDataset& s : sites) net.sizes.push_back(s.n());
    for (int k = 1; k <= static_cast<int>(sites.size()); ++k)
      net.models.push_back(
          fit_outcome_model(sites[k - 1].covariates, sites[k - 1].y, BasisSpec{}, k));
    for (int k = 1; k <= static_cast<int>(sites.size()); ++k) {
      std::vector<CalibrationResult> row;
      for (int target = 1; target <= static_cast<int>(sites.size()); ++target) {
        if (target == k) {
          row.push_back(uniform_calibration(sites[k - 1].n(), sites[k - 1].dims()));
          continue;
        }
        CalibrationProblem problem;
        problem.features = sites[k - 1].covariates;
        problem.source_site = k;
        problem.target_site = target;
        problem.target_mean.resize(sites[k - 1].dims());
        for (int c = 0; c < sites[k - 1].dims(); ++c) {
          NeumaierSum s;
          for (int i = 0; i < sites[target - 1].n(); ++i)
            s.add(sites[target - 1].covariates(i, c));
          problem.target_mean[c] = s.value() / sites[target - 1].n();
        }
        row.push_back(entropy_balance(problem));
      }
      net.weights.push_back(std::move(row));
    }
    for (int k = 1; k <= static_cast<int>(sites.size()); ++k)
      net.ads.push_back(
          site_aggregates(sites[k - 1], net.models, net.weights[k - 1], net.sizes));
    return net;
  };

  const Network base = testutil::make_network(404, 2, 64);
  std::vector<SiteDataset> permuted = base.sites;
  // Reverse the rows of site 1.
  SiteDataset& site = permuted[0];
  const int n = site.n();
  SiteDataset rev = site;
  for (int i = 0; i < n; ++i) {
    rev.y[i] = site.y[n - 1 - i];
    for (int c = 0; c < site.dims(); ++c) rev.covariates(i, c) = site.covariates(n - 1 - i, c);
  }
  permuted[0] = rev;

  const Network a = build(base.sites);
  const Network b = build(permuted);
  for (SubsetMask subset = 1; subset <= 3; ++subset) {
    const EstimateReport ra = dac_estimate(a.ads, subset, 1, 2);
    const EstimateReport rb = dac_estimate(b.ads, subset, 1, 2);
    CHECK(ra.tau_hat == rb.tau_hat);
    CHECK(ra.variance == rb.variance);
    CHECK(ra.mu_hat.at(1) == rb.mu_hat.at(1));
    CHECK(ra.mu_hat.at(2) == rb.mu_hat.at(2));
  }
}

TEST_CASE("pooled oracle single-site subset reduces to the plain average") {
  const Network net = testutil::make_network(3110, 2, 25);
  // I = {k}: self-weights are uniform, so mu is the AIPW-style site average.
  const EstimateReport rep = dac_tau(net.ads, 0b01, 1, 2);
  const SiteDataset& site = net.sites[0];
  double direct = 0.0;
  for (int i = 0; i < site.n(); ++i) {
    direct += net.models[0].predict_row(site.covariates.row(i)) +
              (site.y[i] - net.models[0].predict_row(site.covariates.row(i)));
  }
  direct /= site.n();
  CHECK(rep.mu_hat.at(1) == Catch::Approx(direct).margin(1e-12));
  const double pooled = pooled_tau(net.sites, net.models, net.weights, 0b01, 1, 2);
  CHECK(rep.tau_hat == Catch::Approx(pooled).margin(1e-12 * (1.0 + std::abs(pooled))));
}

TEST_CASE("interval finalization") {
  EstimateReport rep;
  rep.tau_hat = 2.0;
  rep.variance = 1.0;
  finalize_interval(rep);
  CHECK(rep.ci_low == Catch::Approx(2.0 - 1.9599639845400545).margin(1e-12));
  CHECK(rep.ci_high == Catch::Approx(2.0 + 1.9599639845400545).margin(1e-12));
  CHECK(rep.p_value == Catch::Approx(0.0455).margin(2e-4));
  EstimateReport zero;
  zero.tau_hat = 0.5;
  zero.variance = 0.0;
  finalize_interval(zero);
  CHECK(zero.p_value == 0.0);
  CHECK(zero.ci_low == 0.5);
}
