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

#include "fedcmp/newton.hpp"

using namespace fedcmp;

namespace {

NewtonProblem quadratic_bowl() {
  NewtonProblem p;
  p.value = [](const Vec& x) { return 0.5 * (x[0] * x[0] + x[1] * x[1]); };
  p.gradient = [](const Vec& x) { return Vec{x[0], x[1]}; };
  p.hessian = [](const Vec&) { return Matrix::identity(2); };
  return p;
}

// f(x) = log(e^x + e^,-x.), the scalar symmetric log-sum-exp.
NewtonProblem scalar_logsumexp() {
  NewtonProblem p;
  p.value = [](const Vec& x) {
    const double a = std::abs(x[0]);
    return a + std::log(std::exp(x[0] - a) + std::exp(-x[0] - a));
  };
  p.gradient = [](const Vec& x) { return Vec{std::tanh(x[0])}; };
  p.hessian = [](const Vec& x) {
    Matrix h(1, 1);
    const double t = std::tanh(x[0]);
    h(0, 0) = 1.0 - t * t;
    return h;
  };
  return p;
}

// The two-support-point calibration dual with target mean 1.5 on features
// {0, 2}: f(g) = log(e^{-1.5 g} + e^{0.5 g}), minimized at g = ln(3)/2.
NewtonProblem two_point_dual() {
  NewtonProblem p;
  auto weights = [](double g) {
    const double a = std::exp(-1.5 * g);
    const double b = std::exp(0.5 * g);
    return std::pair{a / (a + b), b / (a + b)};
  };
  p.value = [](const Vec& x) { return std::log(std::exp(-1.5 * x[0]) + std::exp(0.5 * x[0])); };
  p.gradient = [weights](const Vec& x) {
    const auto [wa, wb] = weights(x[0]);
    return Vec{-1.5 * wa + 0.5 * wb};
  };
  p.hessian = [weights](const Vec& x) {
    const auto [wa, wb] = weights(x[0]);
    const double mean = -1.5 * wa + 0.5 * wb;
    Matrix h(1, 1);
    h(0, 0) = 2.25 * wa + 0.25 * wb - mean * mean;
    return h;
  };
  return p;
}

}  // namespace

TEST_CASE("newton solves the quadratic bowl in one step") {
  const NewtonResult res = newton_minimize(quadratic_bowl(), {5.0, -5.0});
  CHECK(std::abs(res.x[0]) <= 1e-10);
  CHECK(std::abs(res.x[1]) <= 1e-10);
  CHECK(res.iterations <= 2);
}

TEST_CASE("newton solves the scalar log-sum-exp") {
  const NewtonResult res = newton_minimize(scalar_logsumexp(), {3.0});
  CHECK(std::abs(res.x[0]) <= 1e-9);
  CHECK(res.gradient_norm <= 1e-10);
}

TEST_CASE("newton reproduces the closed-form calibration dual root") {
  const NewtonResult res = newton_minimize(two_point_dual(), {0.0});
  // exp(2 gamma) = 3 at the optimum.
  CHECK(res.x[0] == Catch::Approx(std::log(3.0) / 2.0).margin(1e-10));
}

TEST_CASE("newton output is stationary and monotone", "[properties]") {
  // Track accepted objective values through the value callback.
  NewtonProblem p = two_point_dual();
  const NewtonResult res = newton_minimize(p, {-2.5});
  CHECK(res.gradient_norm <= 1e-10);
  CHECK(inf_norm(p.gradient(res.x)) <= 1e-10);
  CHECK(res.objective <= p.value({-2.5}));
}

TEST_CASE("newton reports divergence on an unbounded objective") {
  // f(x) = log sum exp over points all on one side of the target: the
  // two-support dual with an unreachable mean 2.5 -> slopes -2.5 and -0.5.
  NewtonProblem p;
  p.value = [](const Vec& x) {
    const double m = std::max(-2.5 * x[0], -0.5 * x[0]);
    return m + std::log(std::exp(-2.5 * x[0] - m) + std::exp(-0.5 * x[0] - m));
  };
  p.gradient = [](const Vec& x) {
    const double a = std::exp(-2.5 * x[0]);
    const double b = std::exp(-0.5 * x[0]);
    return Vec{(-2.5 * a - 0.5 * b) / (a + b)};
  };
  p.hessian = [](const Vec& x) {
    const double a = std::exp(-2.5 * x[0]);
    const double b = std::exp(-0.5 * x[0]);
    const double mean = (-2.5 * a - 0.5 * b) / (a + b);
    Matrix h(1, 1);
    h(0, 0) = (6.25 * a + 0.25 * b) / (a + b) - mean * mean;
    return h;
  };
  CHECK_THROWS_AS(newton_minimize(p, {0.0}), Diverged);
}

TEST_CASE("newton exhausts its iteration budget cleanly") {
  NewtonConfig cfg;
  cfg.max_iterations = 2;
  cfg.gradient_tolerance = 1e-14;
  CHECK_THROWS_AS(newton_minimize(scalar_logsumexp(), {300.0}, cfg), DidNotConverge);
}
