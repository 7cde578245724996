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

#include "fedcmp/linalg.hpp"
#include "fedcmp/random.hpp"

using namespace fedcmp;

TEST_CASE("solve_spd identity system") {
  const Vec x = solve_spd(Matrix::identity(3), {1.0, 2.0, 3.0});
  CHECK(x[0] == 1.0);
  CHECK(x[1] == 2.0);
  CHECK(x[2] == 3.0);
}

TEST_CASE("solve_spd diagonal system") {
  Matrix a(2, 2);
  a(0, 0) = 2.0;
  a(1, 1) = 4.0;
  const Vec x = solve_spd(a, {2.0, 8.0});
  CHECK(x[0] == Catch::Approx(1.0).margin(1e-14));
  CHECK(x[1] == Catch::Approx(2.0).margin(1e-14));
}

TEST_CASE("solve_spd recovers a constructed solution") {
  // Construct-then-solve oracle: draw SPD A = B B' + I, pick x*, set b = A x*.
  Rng rng(7);
  const int n = 6;
  Matrix b(n, n);
  for (auto& v : b.data) v = rng.normal();
  Matrix a(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      double s = i == j ? 1.0 : 0.0;
      for (int t = 0; t < n; ++t) s += b(i, t) * b(j, t);
      a(i, j) = s;
    }
  Vec xstar(n);
  for (auto& v : xstar) v = rng.normal();
  const Vec rhs = matvec(a, xstar);
  const Vec x = solve_spd(a, rhs);
  for (int i = 0; i < n; ++i) CHECK(x[i] == Catch::Approx(xstar[i]).margin(1e-8));
}

TEST_CASE("solve_spd residual contract", "[properties]") {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 2 + static_cast<int>(rng.next() % 7);
    Matrix b(n, n);
    for (auto& v : b.data) v = rng.normal();
    Matrix a(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        double s = i == j ? 0.5 : 0.0;
        for (int t = 0; t < n; ++t) s += b(i, t) * b(j, t);
        a(i, j) = s;
      }
    Vec rhs(n);
    for (auto& v : rhs) v = rng.normal();
    const Vec x = solve_spd(a, rhs);
    const Vec back = matvec(a, x);
    double err = 0.0;
    for (int i = 0; i < n; ++i) err = std::max(err, std::abs(back[i] - rhs[i]));
    CHECK(err <= 1e-8 * (1.0 + inf_norm(rhs)));
  }
}

TEST_CASE("solve_spd ridge retry and failure") {
  Matrix a(2, 2);  // rank one
  a(0, 0) = 1.0;
  a(0, 1) = 1.0;
  a(1, 0) = 1.0;
  a(1, 1) = 1.0;
  // Rank-deficient but consistent after the ridge: solvable.
  const Vec x = solve_spd(a, {2.0, 2.0}, 1e-8);
  CHECK(x[0] == Catch::Approx(x[1]).margin(1e-6));
  // A negative-definite matrix stays unfactorable through the tiny ridge.
  Matrix neg(2, 2);
  neg(0, 0) = -1.0;
  neg(1, 1) = -1.0;
  CHECK_THROWS_AS(solve_spd(neg, {1.0, 1.0}), SingularSystem);
}

TEST_CASE("solve_spd rejects bad shapes") {
  CHECK_THROWS_AS(solve_spd(Matrix(2, 3), {1.0, 2.0}), DimensionMismatch);
  CHECK_THROWS_AS(solve_spd(Matrix::identity(2), {1.0, 2.0, 3.0}), DimensionMismatch);
  Matrix askew = Matrix::identity(2);
  askew(0, 1) = 0.5;
  CHECK_THROWS_AS(solve_spd(askew, {1.0, 1.0}), InvalidArgument);
}

TEST_CASE("rank_cholesky drops collinear columns, keeps earlier ones") {
  // Columns: v, 2v, w -> the duplicate direction is dropped.
  Matrix gram(3, 3);
  const double vv = 4.0, ww = 9.0;
  gram(0, 0) = vv;
  gram(0, 1) = 2 * vv;
  gram(1, 0) = 2 * vv;
  gram(1, 1) = 4 * vv;
  gram(2, 2) = ww;
  const RankCholesky rank = rank_cholesky(gram);
  REQUIRE(rank.retained == std::vector<int>{0, 2});
  REQUIRE(rank.dropped == std::vector<int>{1});
}

TEST_CASE("solve_square matches known solution") {
  Matrix a(2, 2);
  a(0, 0) = 0.0;
  a(0, 1) = 2.0;
  a(1, 0) = 3.0;
  a(1, 1) = 1.0;
  const Vec x = solve_square(a, {4.0, 5.0});  // x = (1, 2)
  CHECK(x[0] == Catch::Approx(1.0).margin(1e-12));
  CHECK(x[1] == Catch::Approx(2.0).margin(1e-12));
  Matrix sing(2, 2);
  sing(0, 0) = 1.0;
  sing(1, 0) = 2.0;
  sing(0, 1) = 2.0;
  sing(1, 1) = 4.0;
  CHECK_THROWS_AS(solve_square(sing, {1.0, 1.0}), SingularSystem);
}

TEST_CASE("compensated summation is bit-stable under permutation", "[properties]") {
  Rng rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 500;
    Vec xs(n);
    for (auto& v : xs) v = rng.normal() * std::exp(3.0 * rng.normal());
    const double forward = stable_sum(xs);
    std::vector<double> rev(xs.rbegin(), xs.rend());
    CHECK(stable_sum(rev) == forward);
    // A couple of random shuffles.
    for (int s = 0; s < 3; ++s) {
      for (int i = n - 1; i > 0; --i)
        std::swap(xs[i], xs[rng.next() % static_cast<std::uint64_t>(i + 1)]);
      CHECK(stable_sum(xs) == forward);
    }
  }
}
