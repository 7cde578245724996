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
#include <string>
#include <utility>
#include <vector>

#include "fedcmp/errors.hpp"
#include "fedcmp/linalg.hpp"
#include "fedcmp/newton.hpp"

namespace fedcmp {

// One calibration solve: reweight the source site's rows so the weighted mean
// of the feature columns matches the target site's reported mean. Features
// exclude the leading constant; the sum-to-one constraint plays that role.
struct CalibrationProblem {
  Matrix features;   // n x p, g(X) without the constant column
  Vec target_mean;   // p, the target site's sample mean of g(X)
  int source_site = 0;
  int target_site = 0;
};

struct CalibrationResult {
  Vec gamma;              // p, multiplier on the original feature scale (0 for dropped columns)
  Vec weights;            // n, exponential-tilt weights normalized to sum to one
  Vec balance_residual;   // p, weighted feature mean minus target mean
  std::vector<int> dropped_columns;
  int iterations = 0;
  double effective_sample_size = 0.0;
};

inline Vec balance_residual(const Vec& weights, const Matrix& features, const Vec& target_mean) {
  if (static_cast<int>(weights.size()) != features.rows)
    throw DimensionMismatch("balance_residual: weight count != rows");
  if (static_cast<int>(target_mean.size()) != features.cols)
    throw DimensionMismatch("balance_residual: target length != columns");
  const double total = stable_sum(weights);
  if (std::abs(total - 1.0) > 1e-10)
    throw InvalidArgument("balance_residual: weights must sum to one");
  Vec r(features.cols);
  for (int c = 0; c < features.cols; ++c) {
    NeumaierSum s;
    for (int i = 0; i < features.rows; ++i) s.add(weights[i] * features(i, c));
    r[c] = s.value() - target_mean[c];
  }
  return r;
}

// Exactly uniform weights with zero multiplier; the self-calibration case.
inline CalibrationResult uniform_calibration(int n, int p) {
  CalibrationResult res;
  res.gamma.assign(p, 0.0);
  res.weights.assign(n, 1.0 / n);
  res.balance_residual.assign(p, 0.0);
  res.effective_sample_size = static_cast<double>(n);
  return res;
}

// Entropy balancing: minimizes the negative entropy distance from uniform
// weights subject to the moment constraints, solved through the unconstrained
// convex dual  f(gamma) = log sum_i exp(gamma' (g_i - target)). The dual
// gradient is exactly the balance residual of the tilted weights. Columns are
// centered and scaled internally; collinear columns are dropped and the
// residual check afterwards covers them, so an inconsistent dropped direction
// still surfaces as infeasibility.
inline CalibrationResult entropy_balance(const CalibrationProblem& problem) {
  const Matrix& g = problem.features;
  const int n = g.rows;
  const int p = g.cols;
  if (static_cast<int>(problem.target_mean.size()) != p)
    throw DimensionMismatch("entropy_balance: target length != feature columns");
  if (n < p + 1)
    throw DegenerateFeatures("entropy_balance: need at least p+1 rows, got " + std::to_string(n));
  if (!g.finite() || !all_finite(problem.target_mean))
    throw NonFiniteData("entropy_balance: non-finite feature or target entry");

  const std::string pair_label = "site " + std::to_string(problem.source_site) +
                                 " toward target " + std::to_string(problem.target_site);

  // Column means and standard deviations of the source sample.
  Vec mean(p), scale(p);
  for (int c = 0; c < p; ++c) {
    NeumaierSum s;
    for (int i = 0; i < n; ++i) s.add(g(i, c));
    mean[c] = s.value() / n;
    NeumaierSum q;
    for (int i = 0; i < n; ++i) {
      const double d = g(i, c) - mean[c];
      q.add(d * d);
    }
    const double var = q.value() / (n > 1 ? n - 1 : 1);
    scale[c] = var > 0.0 ? std::sqrt(var) : 1.0;
  }

  // Exact-zero shortcut: the target already matches the local sample mean.
  bool at_mean = true;
  for (int c = 0; c < p; ++c) {
    if (std::abs(problem.target_mean[c] - mean[c]) > 1e-12 * std::max(1.0, std::abs(mean[c]))) {
      at_mean = false;
      break;
    }
  }
  if (at_mean) return uniform_calibration(n, p);

  // Standardized, target-centered columns z_ic = (g_ic - target_c) / scale_c
  // shifted so they are mean-zero per column up to the target offset.
  Matrix z(n, p);
  Vec offset(p);  // standardized target minus standardized source mean
  for (int c = 0; c < p; ++c) {
    offset[c] = (problem.target_mean[c] - mean[c]) / scale[c];
    for (int i = 0; i < n; ++i) z(i, c) = (g(i, c) - mean[c]) / scale[c] - offset[c];
  }

  // Collinearity among calibration constraints shows up in the
  // source-centered standardized Gram matrix (z + offset is the centered
  // standardized column).
  Matrix gram(p, p);
  for (int a = 0; a < p; ++a) {
    for (int b = a; b < p; ++b) {
      NeumaierSum s;
      for (int i = 0; i < n; ++i) s.add((z(i, a) + offset[a]) * (z(i, b) + offset[b]));
      gram(a, b) = s.value();
      gram(b, a) = s.value();
    }
  }
  RankCholesky rank = rank_cholesky(gram, 1e-8);
  const std::vector<int>& keep = rank.retained;
  const int q = static_cast<int>(keep.size());
  if (q == 0)
    throw DegenerateFeatures("entropy_balance: no informative feature columns at " + pair_label);

  // Dual evaluation on the retained standardized columns.
  auto tilt = [&](const Vec& gamma, Vec& u) {
    for (int i = 0; i < n; ++i) {
      double v = 0.0;
      for (int t = 0; t < q; ++t) v += gamma[t] * z(i, keep[t]);
      u[i] = v;
    }
  };
  auto softmax = [&](const Vec& u, Vec& w) {
    double m = u[0];
    for (double v : u) m = std::max(m, v);
    NeumaierSum zsum;
    for (int i = 0; i < n; ++i) {
      w[i] = std::exp(u[i] - m);
      zsum.add(w[i]);
    }
    const double total = zsum.value();
    for (int i = 0; i < n; ++i) w[i] /= total;
    return m + std::log(total);
  };

  NewtonProblem dual;
  dual.value = [&](const Vec& gamma) {
    Vec u(n), w(n);
    tilt(gamma, u);
    return softmax(u, w) - std::log(static_cast<double>(n));
  };
  dual.gradient = [&](const Vec& gamma) {
    Vec u(n), w(n);
    tilt(gamma, u);
    softmax(u, w);
    Vec grad(q);
    for (int t = 0; t < q; ++t) {
      NeumaierSum s;
      for (int i = 0; i < n; ++i) s.add(w[i] * z(i, keep[t]));
      grad[t] = s.value();
    }
    return grad;
  };
  dual.hessian = [&](const Vec& gamma) {
    Vec u(n), w(n);
    tilt(gamma, u);
    softmax(u, w);
    Vec m1(q);
    for (int t = 0; t < q; ++t) {
      NeumaierSum s;
      for (int i = 0; i < n; ++i) s.add(w[i] * z(i, keep[t]));
      m1[t] = s.value();
    }
    Matrix h(q, q);
    for (int a = 0; a < q; ++a) {
      for (int b = a; b < q; ++b) {
        NeumaierSum s;
        for (int i = 0; i < n; ++i) s.add(w[i] * z(i, keep[a]) * z(i, keep[b]));
        const double v = s.value() - m1[a] * m1[b];
        h(a, b) = v;
        h(b, a) = v;
      }
    }
    return h;
  };

  NewtonConfig cfg;
  double max_scale = 1.0;
  for (int t = 0; t < q; ++t) max_scale = std::max(max_scale, scale[keep[t]]);
  cfg.gradient_tolerance = std::min(1e-10, 1e-9 / max_scale);

  NewtonResult solved;
  try {
    solved = newton_minimize(dual, Vec(q, 0.0), cfg);
  } catch (const Diverged&) {
    throw InfeasibleTarget("entropy_balance: balancing target outside the convex hull at " + pair_label);
  } catch (const DidNotConverge&) {
    throw InfeasibleTarget("entropy_balance: calibration did not converge at " + pair_label +
                           " (target at or beyond the support boundary)");
  }

  CalibrationResult res;
  res.iterations = solved.iterations;
  res.dropped_columns = rank.dropped;
  res.weights.assign(n, 0.0);
  {
    Vec u(n);
    tilt(solved.x, u);
    softmax(u, res.weights);
  }
  res.gamma.assign(p, 0.0);
  for (int t = 0; t < q; ++t) res.gamma[keep[t]] = solved.x[t] / scale[keep[t]];
  res.balance_residual = balance_residual(res.weights, g, problem.target_mean);
  if (inf_norm(res.balance_residual) > 1e-8)
    throw InfeasibleTarget("entropy_balance: residual " + std::to_string(inf_norm(res.balance_residual)) +
                           " exceeds 1e-8 at " + pair_label +
                           " (inconsistent target in a dropped direction)");
  NeumaierSum sq;
  for (double w : res.weights) sq.add(w * w);
  res.effective_sample_size = 1.0 / sq.value();
  return res;
}

}  // namespace fedcmp
