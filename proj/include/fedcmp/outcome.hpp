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
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedcmp/basis.hpp"
#include "fedcmp/errors.hpp"
#include "fedcmp/linalg.hpp"

namespace fedcmp {

// Solution of a (weighted) least squares problem on an explicit design
// matrix. Coefficients correspond to the retained columns only; dropped
// columns were collinear at the rank tolerance.
struct LeastSquaresFit {
  Vec coefficients;
  std::vector<int> retained_columns;
  std::vector<int> dropped_columns;
};

namespace detail {

inline LeastSquaresFit fit_least_squares(const Matrix& design, const Vec& y, const Vec* weights) {
  const int n = design.rows;
  const int p = design.cols;
  if (static_cast<int>(y.size()) != n)
    throw DimensionMismatch("least squares: outcome length != rows");
  if (!design.finite() || !all_finite(y))
    throw NonFiniteData("least squares: non-finite design or outcome entry");
  if (weights) {
    if (static_cast<int>(weights->size()) != n)
      throw DimensionMismatch("least squares: weight length != rows");
    if (!all_finite(*weights)) throw NonFiniteData("least squares: non-finite weight");
    for (double w : *weights)
      if (w < 0.0) throw InvalidArgument("least squares: negative weight");
  }
  if (p == 0) throw DegenerateFeatures("least squares: empty design");

  auto wi = [&](int i) { return weights ? (*weights)[i] : 1.0; };

  // Column scales keep the Gram system well conditioned; solved coefficients
  // are mapped back to the raw column scale.
  Vec scale(p, 1.0);
  for (int c = 0; c < p; ++c) {
    NeumaierSum s;
    for (int i = 0; i < n; ++i) s.add(wi(i) * design(i, c) * design(i, c));
    const double v = s.value();
    scale[c] = v > 0.0 ? std::sqrt(v) : 1.0;
  }

  Matrix gram(p, p);
  Vec moment(p);
  for (int a = 0; a < p; ++a) {
    for (int b = a; b < p; ++b) {
      NeumaierSum s;
      for (int i = 0; i < n; ++i) s.add(wi(i) * design(i, a) * design(i, b));
      const double v = s.value() / (scale[a] * scale[b]);
      gram(a, b) = v;
      gram(b, a) = v;
    }
    NeumaierSum s;
    for (int i = 0; i < n; ++i) s.add(wi(i) * design(i, a) * y[i]);
    moment[a] = s.value() / scale[a];
  }

  RankCholesky rank = rank_cholesky(gram, 1e-8);
  if (rank.retained.empty())
    throw DegenerateFeatures("least squares: design has rank zero");
  Vec rhs(rank.retained.size());
  for (std::size_t t = 0; t < rank.retained.size(); ++t) rhs[t] = moment[rank.retained[t]];
  Vec beta = rank.solve(rhs);
  for (std::size_t t = 0; t < beta.size(); ++t) beta[t] /= scale[rank.retained[t]];

  LeastSquaresFit fit;
  fit.coefficients = std::move(beta);
  fit.retained_columns = std::move(rank.retained);
  fit.dropped_columns = std::move(rank.dropped);
  return fit;
}

}  // namespace detail

inline LeastSquaresFit fit_ols(const Matrix& design, const Vec& y) {
  return detail::fit_least_squares(design, y, nullptr);
}

inline LeastSquaresFit fit_wls(const Matrix& design, const Vec& y, const Vec& weights) {
  return detail::fit_least_squares(design, y, &weights);
}

// A fitted conditional-mean function in transmittable form: the realized
// basis (structure) plus coefficients (parameters). This is everything
// another site needs to evaluate the model on its own covariates.
struct FittedOutcomeModel {
  RealizedBasis basis;
  Vec coefficients;                 // one per retained column
  std::vector<int> retained_columns;
  std::vector<int> dropped_columns;
  int site = 0;
  std::optional<std::uint32_t> subset_tag;  // set on bias-reduced, subset-specific fits

  double predict_row(std::span<const double> x) const {
    std::vector<double> row(basis.dimension());
    basis.expand_row(x, row.data());
    double v = 0.0;
    for (std::size_t t = 0; t < coefficients.size(); ++t) v += coefficients[t] * row[retained_columns[t]];
    return v;
  }
};

inline FittedOutcomeModel fit_outcome_model(const Matrix& x, const Vec& y, const RealizedBasis& rb,
                                            int site, const Vec* weights = nullptr) {
  const Matrix design = expand_basis(x, rb);
  LeastSquaresFit fit = detail::fit_least_squares(design, y, weights);
  FittedOutcomeModel model;
  model.basis = rb;
  model.coefficients = std::move(fit.coefficients);
  model.retained_columns = std::move(fit.retained_columns);
  model.dropped_columns = std::move(fit.dropped_columns);
  model.site = site;
  return model;
}

inline FittedOutcomeModel fit_outcome_model(const Matrix& x, const Vec& y, const BasisSpec& spec,
                                            int site) {
  return fit_outcome_model(x, y, realize_basis(x, spec), site);
}

inline Vec predict(const FittedOutcomeModel& model, const Matrix& x) {
  if (x.cols != model.basis.covariates)
    throw DimensionMismatch("predict: covariate dimension " + std::to_string(x.cols) +
                            " != model dimension " + std::to_string(model.basis.covariates));
  Vec out(x.rows);
  for (int i = 0; i < x.rows; ++i) out[i] = model.predict_row(x.row(i));
  return out;
}

}  // namespace fedcmp
