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

#include "fedcmp/basis.hpp"
#include "fedcmp/outcome.hpp"
#include "fedcmp/random.hpp"

using namespace fedcmp;

TEST_CASE("linear expansion prepends the constant") {
  Matrix x(1, 2);
  x(0, 0) = 1.5;
  x(0, 1) = -2.0;
  const Matrix design = expand_basis(x, BasisSpec{});
  REQUIRE(design.cols == 3);
  CHECK(design(0, 0) == 1.0);
  CHECK(design(0, 1) == 1.5);
  CHECK(design(0, 2) == -2.0);
}

TEST_CASE("all-zero covariate collapses to the intercept") {
  Matrix x(5, 1);  // all zero
  const Matrix design = expand_basis(x, BasisSpec{});
  const LeastSquaresFit fit = fit_ols(design, {3.0, 3.0, 3.0, 3.0, 3.0});
  REQUIRE(fit.retained_columns == std::vector<int>{0});
  REQUIRE(fit.dropped_columns == std::vector<int>{1});
  CHECK(fit.coefficients[0] == Catch::Approx(3.0).margin(1e-12));
}

TEST_CASE("spline basis sums to one and respects the clamp") {
  Matrix x(50, 1);
  for (int i = 0; i < 50; ++i) x(i, 0) = -1.0 + 2.0 * i / 49.0;
  BasisSpec spec;
  spec.kind = BasisKind::cubic_spline;
  spec.interior_knots = 3;
  const RealizedBasis rb = realize_basis(x, spec);
  REQUIRE(rb.dimension() == 1 + (3 + 3));
  // Partition of unity: the dropped first function equals one minus the rest.
  Vec row(rb.dimension());
  for (double v : {-1.0, -0.37, 0.0, 0.8, 1.0, 2.5 /* clamped */}) {
    rb.expand_row(std::vector<double>{v}, row.data());
    double total = 0.0;
    for (int c = 1; c < rb.dimension(); ++c) total += row[c];
    CHECK(total <= 1.0 + 1e-12);
    CHECK(total >= -1e-12);
  }
  // Beyond the boundary the expansion matches the boundary value.
  Vec at_hi(rb.dimension()), beyond(rb.dimension());
  rb.expand_row(std::vector<double>{1.0}, at_hi.data());
  rb.expand_row(std::vector<double>{7.0}, beyond.data());
  for (int c = 0; c < rb.dimension(); ++c) CHECK(at_hi[c] == beyond[c]);
}

TEST_CASE("spline fit reproduces a cubic exactly") {
  Matrix x(80, 1);
  Vec y(80);
  for (int i = 0; i < 80; ++i) {
    const double v = -2.0 + 4.0 * i / 79.0;
    x(i, 0) = v;
    y[i] = 2.0 - v + 0.5 * v * v - 0.25 * v * v * v;
  }
  BasisSpec spec;
  spec.kind = BasisKind::cubic_spline;
  const FittedOutcomeModel model = fit_outcome_model(x, y, spec, 1);
  const Vec fitted = predict(model, x);
  double worst = 0.0;
  for (int i = 0; i < 80; ++i) worst = std::max(worst, std::abs(fitted[i] - y[i]));
  CHECK(worst <= 1e-6);
}

TEST_CASE("constant covariate rejects spline knots") {
  Matrix x(10, 1);
  for (int i = 0; i < 10; ++i) x(i, 0) = 3.0;
  BasisSpec spec;
  spec.kind = BasisKind::cubic_spline;
  CHECK_THROWS_AS(realize_basis(x, spec), DegenerateCovariate);
}

TEST_CASE("non-finite covariates are rejected") {
  Matrix x(3, 1);
  x(1, 0) = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(expand_basis(x, BasisSpec{}), NonFiniteData);
}
