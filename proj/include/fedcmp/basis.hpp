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

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "fedcmp/errors.hpp"
#include "fedcmp/linalg.hpp"

namespace fedcmp {

enum class BasisKind { linear, cubic_spline };

inline std::string to_string(BasisKind k) {
  return k == BasisKind::linear ? "linear" : "cubic-spline";
}

inline BasisKind basis_kind_from_string(const std::string& s) {
  if (s == "linear") return BasisKind::linear;
  if (s == "cubic-spline" || s == "cubic_spline") return BasisKind::cubic_spline;
  throw ConfigError("unknown basis kind '" + s + "'");
}

// Configuration-level description of g(X). The constant column is always
// part of the expansion; spline knots are placed when the basis is realized
// against a concrete sample.
struct BasisSpec {
  BasisKind kind = BasisKind::linear;
  int interior_knots = 3;  // per covariate, cubic_spline only
};

inline constexpr int kSplineOrder = 4;  // cubic

namespace detail {

// Nonzero B-spline basis values at x for the knot span `span`
// (Cox-de Boor recursion, zero-denominator guarded for repeated knots).
inline void bspline_nonzero(const std::vector<double>& t, int span, double x, double* bvals) {
  double left[kSplineOrder];
  double right[kSplineOrder];
  bvals[0] = 1.0;
  for (int j = 1; j < kSplineOrder; ++j) {
    left[j] = x - t[span + 1 - j];
    right[j] = t[span + j] - x;
    double saved = 0.0;
    for (int r = 0; r < j; ++r) {
      const double denom = right[r + 1] + left[j - r];
      const double term = denom != 0.0 ? bvals[r] / denom : 0.0;
      bvals[r] = saved + right[r + 1] * term;
      saved = left[j - r] * term;
    }
    bvals[j] = saved;
  }
}

// Interpolated sample quantile (the usual linear type) of sorted values.
inline double sorted_quantile(const std::vector<double>& sorted, double prob) {
  const std::size_t n = sorted.size();
  const double pos = prob * static_cast<double>(n - 1);
  const std::size_t lo = static_cast<std::size_t>(pos);
  if (lo + 1 >= n) return sorted.back();
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

}  // namespace detail

// A basis realized against a training sample: for splines this pins the knot
// vectors, which travel with the fitted model so any site can reproduce the
// expansion. Evaluation clamps to the training range, so predictions are
// constant beyond the boundary knots.
struct RealizedBasis {
  BasisKind kind = BasisKind::linear;
  int covariates = 0;
  std::vector<std::vector<double>> knots;  // per covariate, boundary knots replicated kSplineOrder times

  int functions_per_covariate(int c) const {
    if (kind == BasisKind::linear) return 1;
    // Full B-spline basis minus the first function, absorbed by the intercept.
    return static_cast<int>(knots[c].size()) - kSplineOrder - 1;
  }

  int dimension() const {
    int d = 1;
    for (int c = 0; c < covariates; ++c) d += functions_per_covariate(c);
    return d;
  }

  // Writes the expanded row (leading constant first) into out[0..dimension).
  void expand_row(std::span<const double> x, double* out) const {
    if (static_cast<int>(x.size()) != covariates)
      throw DimensionMismatch("basis: covariate count mismatch");
    out[0] = 1.0;
    int pos = 1;
    if (kind == BasisKind::linear) {
      for (int c = 0; c < covariates; ++c) out[pos++] = x[c];
      return;
    }
    for (int c = 0; c < covariates; ++c) {
      const std::vector<double>& t = front_knots(c);
      const int nb = static_cast<int>(t.size()) - kSplineOrder;
      const double lo = t[kSplineOrder - 1];
      const double hi = t[nb];
      double v = std::clamp(x[c], lo, hi);
      int span;
      if (v >= hi) {
        span = nb - 1;
        while (span > kSplineOrder - 1 && t[span] >= hi) --span;
      } else {
        span = static_cast<int>(std::upper_bound(t.begin(), t.end(), v) - t.begin()) - 1;
        span = std::clamp(span, kSplineOrder - 1, nb - 1);
      }
      double bvals[kSplineOrder];
      detail::bspline_nonzero(t, span, v, bvals);
      const int nfun = functions_per_covariate(c);
      for (int f = 0; f < nfun; ++f) out[pos + f] = 0.0;
      for (int r = 0; r < kSplineOrder; ++r) {
        const int idx = span - kSplineOrder + 1 + r;  // index in the full basis
        if (idx >= 1 && idx - 1 < nfun) out[pos + idx - 1] = bvals[r];
      }
      pos += nfun;
    }
  }

 private:
  const std::vector<double>& front_knots(int c) const { return knots[c]; }
};

// Places spline knots at equally spaced local quantiles of each covariate
// (boundary knots at the sample extremes).
inline RealizedBasis realize_basis(const Matrix& x, const BasisSpec& spec) {
  if (!x.finite()) throw NonFiniteData("realize_basis: non-finite covariate");
  RealizedBasis rb;
  rb.kind = spec.kind;
  rb.covariates = x.cols;
  if (spec.kind == BasisKind::linear) return rb;
  if (spec.interior_knots < 0) throw ConfigError("realize_basis: negative knot count");
  rb.knots.resize(x.cols);
  for (int c = 0; c < x.cols; ++c) {
    std::vector<double> col(x.rows);
    for (int i = 0; i < x.rows; ++i) col[i] = x(i, c);
    std::sort(col.begin(), col.end());
    const double lo = col.front();
    const double hi = col.back();
    if (!(hi > lo))
      throw DegenerateCovariate("realize_basis: covariate " + std::to_string(c + 1) +
                                " is constant; spline knots undefined");
    std::vector<double>& t = rb.knots[c];
    t.assign(kSplineOrder, lo);
    for (int k = 1; k <= spec.interior_knots; ++k)
      t.push_back(detail::sorted_quantile(col, static_cast<double>(k) / (spec.interior_knots + 1)));
    for (int k = 0; k < kSplineOrder; ++k) t.push_back(hi);
  }
  return rb;
}

inline Matrix expand_basis(const Matrix& x, const RealizedBasis& rb) {
  Matrix design(x.rows, rb.dimension());
  for (int i = 0; i < x.rows; ++i) rb.expand_row(x.row(i), &design(i, 0));
  return design;
}

inline Matrix expand_basis(const Matrix& x, const BasisSpec& spec) {
  return expand_basis(x, realize_basis(x, spec));
}

}  // namespace fedcmp
