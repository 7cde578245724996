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
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "fedcmp/errors.hpp"

namespace fedcmp {

using Vec = std::vector<double>;

// Compensated (Neumaier) accumulator. Every reduction over subject rows goes
// through this so that aggregate values are stable to the last bit under row
// permutations and independent of the parallel schedule.
class NeumaierSum {
 public:
  void add(double v) {
    const double t = sum_ + v;
    if (std::abs(sum_) >= std::abs(v)) {
      comp_ += (sum_ - t) + v;
    } else {
      comp_ += (v - t) + sum_;
    }
    sum_ = t;
  }
  double value() const { return sum_ + comp_; }

 private:
  double sum_ = 0.0;
  double comp_ = 0.0;
};

inline double stable_sum(std::span<const double> xs) {
  NeumaierSum s;
  for (double x : xs) s.add(x);
  return s.value();
}

inline double stable_dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionMismatch("stable_dot: length mismatch");
  NeumaierSum s;
  for (std::size_t i = 0; i < a.size(); ++i) s.add(a[i] * b[i]);
  return s.value();
}

inline double inf_norm(std::span<const double> xs) {
  double m = 0.0;
  for (double x : xs) m = std::max(m, std::abs(x));
  return m;
}

inline bool all_finite(std::span<const double> xs) {
  for (double x : xs) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

// Dense row-major matrix. Small and value-semantic; everything the estimators
// touch fits comfortably in a handful of kilobytes.
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(int r, int c) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, 0.0) {}

  double& operator()(int i, int j) { return data[static_cast<std::size_t>(i) * cols + j]; }
  double operator()(int i, int j) const { return data[static_cast<std::size_t>(i) * cols + j]; }

  std::span<const double> row(int i) const {
    return {data.data() + static_cast<std::size_t>(i) * cols, static_cast<std::size_t>(cols)};
  }

  bool finite() const { return all_finite(data); }

  static Matrix identity(int n) {
    Matrix m(n, n);
    for (int i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }
};

inline Vec matvec(const Matrix& a, const Vec& x) {
  if (static_cast<int>(x.size()) != a.cols) throw DimensionMismatch("matvec: size mismatch");
  Vec y(a.rows);
  for (int i = 0; i < a.rows; ++i) y[i] = stable_dot(a.row(i), x);
  return y;
}

namespace detail {

// Plain in-place Cholesky; returns false instead of throwing so the caller
// can retry with a ridge.
inline bool cholesky(Matrix& a) {
  const int n = a.rows;
  for (int j = 0; j < n; ++j) {
    double d = a(j, j);
    for (int s = 0; s < j; ++s) d -= a(j, s) * a(j, s);
    if (!(d > 0.0) || !std::isfinite(d)) return false;
    const double ljj = std::sqrt(d);
    a(j, j) = ljj;
    for (int i = j + 1; i < n; ++i) {
      double v = a(i, j);
      for (int s = 0; s < j; ++s) v -= a(i, s) * a(j, s);
      a(i, j) = v / ljj;
    }
  }
  return true;
}

inline Vec cholesky_solve(const Matrix& l, Vec b) {
  const int n = l.rows;
  for (int i = 0; i < n; ++i) {
    for (int s = 0; s < i; ++s) b[i] -= l(i, s) * b[s];
    b[i] /= l(i, i);
  }
  for (int i = n - 1; i >= 0; --i) {
    for (int s = i + 1; s < n; ++s) b[i] -= l(s, i) * b[s];
    b[i] /= l(i, i);
  }
  return b;
}

}  // namespace detail

// Solves A x = b for symmetric positive definite A by Cholesky factorization.
// If the factorization fails, adds ridge*I and retries once.
inline Vec solve_spd(const Matrix& a, const Vec& b, double ridge = 1e-10) {
  if (a.rows != a.cols) throw DimensionMismatch("solve_spd: matrix not square");
  if (static_cast<int>(b.size()) != a.rows) throw DimensionMismatch("solve_spd: rhs size mismatch");
  double scale = 0.0;
  for (int i = 0; i < a.rows; ++i)
    for (int j = 0; j < a.cols; ++j) scale = std::max(scale, std::abs(a(i, j)));
  for (int i = 0; i < a.rows; ++i)
    for (int j = i + 1; j < a.cols; ++j)
      if (std::abs(a(i, j) - a(j, i)) > 1e-10 * (1.0 + scale))
        throw InvalidArgument("solve_spd: matrix not symmetric");

  Matrix l = a;
  if (!detail::cholesky(l)) {
    l = a;
    for (int i = 0; i < a.rows; ++i) l(i, i) += ridge;
    if (!detail::cholesky(l)) throw SingularSystem("solve_spd: factorization failed after ridge retry");
  }
  return detail::cholesky_solve(l, b);
}

// Rank-revealing Cholesky of a Gram matrix, processing columns in index order
// so earlier columns (the intercept in a design) win ties. A column is dropped
// when its residual diagonal falls below `tol` times its own diagonal.
struct RankCholesky {
  std::vector<int> retained;
  std::vector<int> dropped;
  Matrix factor;  // lower-triangular, retained x retained

  Vec solve(const Vec& rhs_retained) const { return detail::cholesky_solve(factor, rhs_retained); }
};

inline RankCholesky rank_cholesky(const Matrix& gram, double tol = 1e-8) {
  if (gram.rows != gram.cols) throw DimensionMismatch("rank_cholesky: matrix not square");
  const int p = gram.rows;
  RankCholesky out;
  // Rows of the factor for retained columns, built incrementally.
  std::vector<Vec> lrows;
  for (int c = 0; c < p; ++c) {
    const int r = static_cast<int>(out.retained.size());
    Vec lc(r);
    for (int t = 0; t < r; ++t) {
      double v = gram(c, out.retained[t]);
      for (int u = 0; u < t; ++u) v -= lc[u] * lrows[t][u];
      lc[t] = v / lrows[t][t];
    }
    double d = gram(c, c);
    for (int t = 0; t < r; ++t) d -= lc[t] * lc[t];
    if (gram(c, c) <= 0.0 || d <= tol * gram(c, c)) {
      out.dropped.push_back(c);
      continue;
    }
    lc.push_back(std::sqrt(d));
    lrows.push_back(std::move(lc));
    out.retained.push_back(c);
  }
  const int r = static_cast<int>(out.retained.size());
  out.factor = Matrix(r, r);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j <= i; ++j) out.factor(i, j) = lrows[i][j];
  return out;
}

// General square solve via LU with partial pivoting. Used only by the
// experimental a != g bias-reduced path, where cross-moment matrices are
// not symmetric.
inline Vec solve_square(Matrix a, Vec b) {
  if (a.rows != a.cols) throw DimensionMismatch("solve_square: matrix not square");
  if (static_cast<int>(b.size()) != a.rows) throw DimensionMismatch("solve_square: rhs size mismatch");
  const int n = a.rows;
  std::vector<int> piv(n);
  for (int i = 0; i < n; ++i) piv[i] = i;
  for (int c = 0; c < n; ++c) {
    int best = c;
    for (int i = c + 1; i < n; ++i)
      if (std::abs(a(i, c)) > std::abs(a(best, c))) best = i;
    if (a(best, c) == 0.0 || !std::isfinite(a(best, c)))
      throw SingularSystem("solve_square: singular matrix");
    if (best != c) {
      for (int j = 0; j < n; ++j) std::swap(a(c, j), a(best, j));
      std::swap(b[c], b[best]);
    }
    for (int i = c + 1; i < n; ++i) {
      const double f = a(i, c) / a(c, c);
      a(i, c) = f;
      for (int j = c + 1; j < n; ++j) a(i, j) -= f * a(c, j);
      b[i] -= f * b[c];
    }
  }
  for (int i = n - 1; i >= 0; --i) {
    for (int j = i + 1; j < n; ++j) b[i] -= a(i, j) * b[j];
    b[i] /= a(i, i);
  }
  return b;
}

}  // namespace fedcmp
