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

#include <string>
#include <vector>

#include "fedcmp/calibration.hpp"
#include "fedcmp/dataset.hpp"
#include "fedcmp/errors.hpp"
#include "fedcmp/linalg.hpp"
#include "fedcmp/outcome.hpp"

namespace fedcmp {

// The aggregated data AD_j one site contributes in round 2. Indices are
// 1-based site ids; vector/matrix positions are id-1. With j this site:
//   a1[k]    mean over local rows of the site-k model prediction
//   a2[l]    weighted average of local outcome residuals tilted toward l
//   a3(k,k') sum of squared differences between model-k and model-k' predictions
//   a4(l,h)  sum of w_l * w_h * squared residuals (weights on the raw scale,
//            i.e. tilts rescaled by the target site sizes)
//   a5(k',l) sum of w_l * (own-model minus model-k' prediction) * residual
//   b2[l]    weighted average of local outcomes toward l (DCW diagnostic)
struct AggregatedData {
  int site = 0;
  long n = 0;
  Vec a1;
  Vec a2;
  Vec b2;
  Matrix a3;
  Matrix a4;
  Matrix a5;
};

// Computes AD_j from local rows, the K broadcast models, per-target
// calibration weights (normalized to sum to one; entry target-1), and the
// site sizes from the broadcast (needed to rescale tilts for a4/a5).
inline AggregatedData site_aggregates(const SiteDataset& data,
                                      const std::vector<FittedOutcomeModel>& models,
                                      const std::vector<CalibrationResult>& weights,
                                      const std::vector<long>& site_sizes) {
  const int k_sites = static_cast<int>(models.size());
  const int j = data.site;
  const int n = data.n();
  if (j < 1 || j > k_sites) throw UnknownSite("site_aggregates: site id " + std::to_string(j));
  for (int k = 0; k < k_sites; ++k) {
    if (models[k].site != k + 1)
      throw MissingModel("site_aggregates: model for site " + std::to_string(k + 1) + " missing");
  }
  if (static_cast<int>(weights.size()) != k_sites || static_cast<int>(site_sizes.size()) != k_sites)
    throw MissingWeights("site_aggregates: need weights and sizes for all " +
                         std::to_string(k_sites) + " sites");
  for (int l = 0; l < k_sites; ++l) {
    if (static_cast<int>(weights[l].weights.size()) != n)
      throw MissingWeights("site_aggregates: weight vector toward site " + std::to_string(l + 1) +
                           " has wrong length");
  }

  // Per-row predictions for every site model and own-model residuals.
  Matrix pred(n, k_sites);
  for (int k = 0; k < k_sites; ++k) {
    const Vec values = predict(models[k], data.covariates);
    for (int i = 0; i < n; ++i) pred(i, k) = values[i];
  }
  Vec resid(n);
  for (int i = 0; i < n; ++i) resid[i] = data.y[i] - pred(i, j - 1);

  AggregatedData ad;
  ad.site = j;
  ad.n = n;
  ad.a1.resize(k_sites);
  ad.a2.resize(k_sites);
  ad.b2.resize(k_sites);
  ad.a3 = Matrix(k_sites, k_sites);
  ad.a4 = Matrix(k_sites, k_sites);
  ad.a5 = Matrix(k_sites, k_sites);

  for (int k = 0; k < k_sites; ++k) {
    NeumaierSum s;
    for (int i = 0; i < n; ++i) s.add(pred(i, k));
    ad.a1[k] = s.value() / n;
  }
  for (int l = 0; l < k_sites; ++l) {
    const Vec& w = weights[l].weights;
    NeumaierSum sr, sy;
    for (int i = 0; i < n; ++i) {
      sr.add(w[i] * resid[i]);
      sy.add(w[i] * data.y[i]);
    }
    ad.a2[l] = sr.value();
    ad.b2[l] = sy.value();
  }
  for (int k = 0; k < k_sites; ++k) {
    for (int kp = k + 1; kp < k_sites; ++kp) {
      NeumaierSum s;
      for (int i = 0; i < n; ++i) {
        const double d = pred(i, k) - pred(i, kp);
        s.add(d * d);
      }
      ad.a3(k, kp) = s.value();
      ad.a3(kp, k) = s.value();
    }
  }
  for (int l = 0; l < k_sites; ++l) {
    for (int h = l; h < k_sites; ++h) {
      NeumaierSum s;
      const Vec& wl = weights[l].weights;
      const Vec& wh = weights[h].weights;
      for (int i = 0; i < n; ++i) s.add(wl[i] * wh[i] * resid[i] * resid[i]);
      const double v = static_cast<double>(site_sizes[l]) * static_cast<double>(site_sizes[h]) * s.value();
      ad.a4(l, h) = v;
      ad.a4(h, l) = v;
    }
  }
  for (int kp = 0; kp < k_sites; ++kp) {
    for (int l = 0; l < k_sites; ++l) {
      NeumaierSum s;
      const Vec& wl = weights[l].weights;
      for (int i = 0; i < n; ++i) s.add(wl[i] * (pred(i, j - 1) - pred(i, kp)) * resid[i]);
      ad.a5(kp, l) = static_cast<double>(site_sizes[l]) * s.value();
    }
  }
  return ad;
}

}  // namespace fedcmp
