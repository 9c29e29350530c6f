#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "rarsq/rng.hpp"
#include "rarsq/rotation.hpp"

using namespace rarsq;

namespace {

double norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

// Frobenius norm of M^T M - I.
double ortho_defect(const std::vector<double>& m, int dim) {
  double s = 0.0;
  for (int i = 0; i < dim; ++i)
    for (int j = 0; j < dim; ++j) {
      double e = 0.0;
      for (int k = 0; k < dim; ++k) e += m[k * dim + i] * m[k * dim + j];
      e -= i == j ? 1.0 : 0.0;
      s += e * e;
    }
  return std::sqrt(s);
}

}  // namespace

TEST_CASE("aligned pair gives identity map") {
  std::vector<double> r = {1.0, 0.0}, q = {1.0, 0.0};
  REQUIRE(rot::classify(r.data(), q.data(), 2) == rot::Branch::regular);
  std::vector<double> m(4);
  rot::rotation_matrix(r.data(), q.data(), 2, m.data());
  REQUIRE(m[0] == doctest::Approx(1.0));
  REQUIRE(m[1] == doctest::Approx(0.0));
  REQUIRE(m[2] == doctest::Approx(0.0));
  REQUIRE(m[3] == doctest::Approx(1.0));
  auto b = rot::BatchRotation::freeze(r.data(), q.data(), 1, 2);
  REQUIRE(b.scale[0] == doctest::Approx(1.0));
  REQUIRE(b.y0[0] == doctest::Approx(1.0));
  REQUIRE(b.y0[1] == doctest::Approx(0.0));
}

TEST_CASE("planar 90 degree case matches the hand expansion") {
  // r=(1,0), q=(0,1): lambda=(1,1)/sqrt2, M = [[0,-1],[1,0]].
  std::vector<double> r = {1.0, 0.0}, q = {0.0, 1.0};
  std::vector<double> m(4);
  rot::rotation_matrix(r.data(), q.data(), 2, m.data());
  REQUIRE(m[0] == doctest::Approx(0.0).epsilon(1e-12));
  REQUIRE(m[1] == doctest::Approx(-1.0));
  REQUIRE(m[2] == doctest::Approx(1.0));
  REQUIRE(m[3] == doctest::Approx(0.0).epsilon(1e-12));
  REQUIRE(ortho_defect(m, 2) < 1e-12);
}

TEST_CASE("antipodal pair falls back to a reflection") {
  std::vector<double> r = {1.0, 0.0}, q = {-2.0, 0.0};
  REQUIRE(rot::classify(r.data(), q.data(), 2) == rot::Branch::antipodal);
  auto b = rot::BatchRotation::freeze(r.data(), q.data(), 1, 2);
  REQUIRE(b.scale[0] == doctest::Approx(2.0));
  // forward lands on the code
  REQUIRE(b.y0[0] == doctest::Approx(-2.0));
  REQUIRE(b.y0[1] == doctest::Approx(0.0));
  // unit map is diag(-1,1): orthogonal with det -1
  std::vector<double> m(4);
  b.materialize(0, m.data());
  for (auto& x : m) x /= b.scale[0];
  REQUIRE(ortho_defect(m, 2) < 1e-12);
  REQUIRE(m[0] == doctest::Approx(-1.0));
  REQUIRE(m[3] == doctest::Approx(1.0));
}

TEST_CASE("backward multiplies by the transposed frozen map") {
  // r=(1,0), q=(0,2): forward (0,2); grad (g1,g2) -> 2*(g2,-g1).
  std::vector<double> r = {1.0, 0.0}, q = {0.0, 2.0};
  auto b = rot::BatchRotation::freeze(r.data(), q.data(), 1, 2);
  REQUIRE(b.y0[0] == doctest::Approx(0.0).epsilon(1e-12));
  REQUIRE(b.y0[1] == doctest::Approx(2.0));
  std::vector<double> gy = {0.3, -1.7}, gv = {0.0, 0.0};
  b.apply_transpose_accum(gy.data(), gv.data());
  REQUIRE(gv[0] == doctest::Approx(2.0 * gy[1]));
  REQUIRE(gv[1] == doctest::Approx(-2.0 * gy[0]));
}

TEST_CASE("zero residual passes through with identity jacobian") {
  std::vector<double> r = {0.0, 0.0, 0.0}, q = {0.5, -0.25, 1.0};
  REQUIRE(rot::classify(r.data(), q.data(), 3) == rot::Branch::passthrough);
  auto b = rot::BatchRotation::freeze(r.data(), q.data(), 1, 3);
  for (int j = 0; j < 3; ++j) REQUIRE(b.y0[j] == q[j]);
  std::vector<double> v = {0.1, 0.2, 0.3}, y(3);
  b.apply(v.data(), y.data());
  for (int j = 0; j < 3; ++j) REQUIRE(y[j] == doctest::Approx(q[j] + v[j]));
  std::vector<double> gy = {1.0, 2.0, 3.0}, gv(3, 0.0);
  b.apply_transpose_accum(gy.data(), gv.data());
  for (int j = 0; j < 3; ++j) REQUIRE(gv[j] == gy[j]);
}

TEST_CASE("alignment, orthogonality, norm transport across dims") {
  Rng rng(42);
  for (int dim : {2, 8, 128}) {
    for (int trial = 0; trial < 1000; ++trial) {
      std::vector<double> r(dim), q(dim);
      for (int j = 0; j < dim; ++j) {
        r[j] = rng.normal();
        q[j] = rng.normal();
      }
      auto br = rot::BatchRotation::freeze(r.data(), q.data(), 1, dim);
      REQUIRE(br.branch[0] == rot::Branch::regular);
      double rn = norm(r), qn = norm(q);
      // unit fields
      double ln = 0.0, rhn = 0.0, qhn = 0.0;
      for (int j = 0; j < dim; ++j) {
        ln += br.lam[j] * br.lam[j];
        rhn += br.rhat[j] * br.rhat[j];
        qhn += br.qhat[j] * br.qhat[j];
      }
      REQUIRE(std::fabs(std::sqrt(ln) - 1.0) < 1e-9);
      REQUIRE(std::fabs(std::sqrt(rhn) - 1.0) < 1e-9);
      REQUIRE(std::fabs(std::sqrt(qhn) - 1.0) < 1e-9);
      // alignment of unit directions: apply unit map to rhat
      std::vector<double> m(static_cast<size_t>(dim) * dim);
      br.materialize(0, m.data());
      double defect = 0.0;
      for (int i = 0; i < dim; ++i) {
        double y = 0.0;
        for (int j = 0; j < dim; ++j)
          y += m[static_cast<size_t>(i) * dim + j] / br.scale[0] * br.rhat[j];
        double d = y - br.qhat[i];
        defect += d * d;
      }
      REQUIRE(std::sqrt(defect) < 1e-6);
      // norm transport: forward value has the code's norm
      double yn = 0.0;
      for (int j = 0; j < dim; ++j) yn += br.y0[j] * br.y0[j];
      REQUIRE(std::fabs(std::sqrt(yn) - qn) < 1e-6 * (1.0 + qn));
      REQUIRE(br.scale[0] == doctest::Approx(qn / rn));
      if (trial < 50) {  // orthogonality is O(dim^3); subsample at dim 128
        for (auto& x : m) x /= br.scale[0];
        REQUIRE(ortho_defect(m, dim) < 1e-6);
      }
    }
  }
}

TEST_CASE("rank-1 application equals the materialized matrix") {
  Rng rng(7);
  for (int dim : {2, 8, 64}) {
    std::vector<double> r(dim), q(dim), v(dim);
    for (int j = 0; j < dim; ++j) {
      r[j] = rng.normal();
      q[j] = rng.normal();
      v[j] = rng.normal();
    }
    auto b = rot::BatchRotation::freeze(r.data(), q.data(), 1, dim);
    std::vector<double> y1(dim);
    b.apply(v.data(), y1.data());
    std::vector<double> m(static_cast<size_t>(dim) * dim);
    b.materialize(0, m.data());
    for (int i = 0; i < dim; ++i) {
      double y = b.y0[i];
      for (int j = 0; j < dim; ++j)
        y += m[static_cast<size_t>(i) * dim + j] * (v[j] - b.v0[j]);
      REQUIRE(std::fabs(y - y1[i]) < 1e-10);
    }
  }
}

TEST_CASE("distinct residual directions receive distinct backward maps") {
  std::vector<double> r1 = {1.0, 0.2, -0.3, 0.5};
  std::vector<double> r2 = {-0.4, 0.9, 0.1, 0.2};
  std::vector<double> q = {0.6, -0.1, 0.8, 0.3};
  auto b1 = rot::BatchRotation::freeze(r1.data(), q.data(), 1, 4);
  auto b2 = rot::BatchRotation::freeze(r2.data(), q.data(), 1, 4);
  std::vector<double> m1(16), m2(16);
  b1.materialize(0, m1.data());
  b2.materialize(0, m2.data());
  double diff = 0.0;
  for (int i = 0; i < 16; ++i) diff += (m1[i] - m2[i]) * (m1[i] - m2[i]);
  REQUIRE(std::sqrt(diff) > 1e-6);
}

TEST_CASE("degenerate inputs are rejected by rotation_matrix") {
  std::vector<double> r = {0.0, 0.0}, q = {1.0, 0.0};
  std::vector<double> m(4);
  REQUIRE_THROWS_AS(rot::rotation_matrix(r.data(), q.data(), 2, m.data()),
                    std::invalid_argument);
}
