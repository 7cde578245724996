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
#include <functional>
#include <string>

#include "fedcmp/errors.hpp"
#include "fedcmp/linalg.hpp"

namespace fedcmp {

struct NewtonConfig {
  double gradient_tolerance = 1e-10;  // infinity norm
  int max_iterations = 100;
  double ridge = 1e-10;
  double backtracking_shrink = 0.5;
  double armijo_constant = 1e-4;
};

struct NewtonProblem {
  std::function<double(const Vec&)> value;
  std::function<Vec(const Vec&)> gradient;
  std::function<Matrix(const Vec&)> hessian;
};

struct NewtonResult {
  Vec x;
  int iterations = 0;
  double objective = 0.0;
  double gradient_norm = 0.0;
};

// Iterates are declared divergent once they leave this ball; callers are
// expected to standardize their problem so the scale is meaningful. For the
// calibration dual this signals an infeasible balancing target.
inline constexpr double kNewtonDivergenceRadius = 1e3;

// Damped Newton descent for smooth convex objectives: full Newton step with
// Armijo backtracking, ridge-stabilized solve of the Hessian system. The
// objective never increases across accepted iterations.
inline NewtonResult newton_minimize(const NewtonProblem& problem, Vec x0,
                                    const NewtonConfig& cfg = {}) {
  if (cfg.gradient_tolerance <= 0.0 || cfg.max_iterations < 1)
    throw InvalidArgument("newton_minimize: bad config");
  if (!all_finite(x0)) throw InvalidArgument("newton_minimize: x0 not finite");

  Vec x = std::move(x0);
  double fx = problem.value(x);
  for (int iter = 0; iter < cfg.max_iterations; ++iter) {
    Vec g = problem.gradient(x);
    const double gnorm = inf_norm(g);
    if (gnorm <= cfg.gradient_tolerance)
      return {std::move(x), iter, fx, gnorm};

    Matrix h = problem.hessian(x);
    Vec rhs(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) rhs[i] = -g[i];
    Vec dir;
    try {
      dir = solve_spd(h, rhs, cfg.ridge);
    } catch (const SingularSystem&) {
      dir = rhs;  // steepest descent fallback
    }
    double slope = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) slope += g[i] * dir[i];
    if (!(slope < 0.0)) {
      dir = rhs;
      slope = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) slope -= g[i] * g[i];
      if (!(slope < 0.0)) return {std::move(x), iter, fx, gnorm};
    }

    double step = 1.0;
    Vec cand(x.size());
    double fc = 0.0;
    // Near the optimum the Newton decrement sinks below the rounding noise
    // of the objective; the Armijo test gets the same slack so the final
    // quadratic-phase steps are not rejected for noise.
    const double noise_floor = 1e-14 * (1.0 + std::abs(fx));
    for (;;) {
      for (std::size_t i = 0; i < x.size(); ++i) cand[i] = x[i] + step * dir[i];
      fc = problem.value(cand);
      if (std::isfinite(fc) && fc <= fx + cfg.armijo_constant * step * slope + noise_floor) break;
      step *= cfg.backtracking_shrink;
      if (step < 1e-14)
        throw DidNotConverge("newton_minimize: backtracking produced no acceptable step");
    }
    x.swap(cand);
    fx = fc;
    if (inf_norm(x) > kNewtonDivergenceRadius)
      throw Diverged("newton_minimize: iterate left the trust region (radius 1e3)");
  }
  throw DidNotConverge("newton_minimize: iteration budget exhausted (max " +
                       std::to_string(cfg.max_iterations) + ")");
}

}  // namespace fedcmp
