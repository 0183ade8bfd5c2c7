#include <catch2/catch.hpp>
#include <cmath>

#include "oracles.hpp"
#include "qmhmm/bessel.hpp"

using qmhmm::bessel_k_ratio;
using qmhmm::log_bessel_k;

TEST_CASE("half-integer closed forms", "[bessel]") {
  // K_{1/2}(x) = sqrt(pi/(2x)) e^{-x}
  for (double x : {0.05, 0.5, 2.0, 17.0, 300.0}) {
    const double want = 0.5 * std::log(M_PI / (2.0 * x)) - x;
    REQUIRE(log_bessel_k(0.5, x) == Approx(want).epsilon(1e-13));
    REQUIRE(log_bessel_k(-0.5, x) == Approx(want).epsilon(1e-13));
  }
  REQUIRE(log_bessel_k(0.5, 2.0) == Approx(0.5 * std::log(M_PI / 4.0) - 2.0).epsilon(1e-13));
  // K_{3/2}(x) = K_{1/2}(x) (1 + 1/x)
  for (double x : {0.2, 1.0, 9.0}) {
    const double want = 0.5 * std::log(M_PI / (2.0 * x)) - x + std::log1p(1.0 / x);
    REQUIRE(log_bessel_k(1.5, x) == Approx(want).epsilon(1e-12));
  }
}

TEST_CASE("symmetry in the order", "[bessel]") {
  for (double nu : {0.1, 0.3, 0.5, 1.2, 2.7, 6.0}) {
    for (double x : {1e-6, 0.03, 1.0, 4.0, 120.0}) {
      const double a = log_bessel_k(nu, x);
      const double b = log_bessel_k(-nu, x);
      REQUIRE(std::fabs(a - b) <= 1e-12 * std::max(1.0, std::fabs(a)));
    }
  }
  REQUIRE(log_bessel_k(-0.3, 1.7) == Approx(log_bessel_k(0.3, 1.7)).epsilon(1e-14));
}

TEST_CASE("three-term recurrence", "[bessel]") {
  // K_{nu+1}/K_nu = K_{nu-1}/K_nu + 2 nu / x, checked on ratios
  for (double nu = -2.0; nu <= 2.0 + 1e-12; nu += 0.25) {
    for (double x : {0.01, 0.05, 0.3, 1.0, 2.5, 10.0, 40.0, 100.0}) {
      const double k_m = log_bessel_k(nu - 1.0, x);
      const double k_0 = log_bessel_k(nu, x);
      const double k_p = log_bessel_k(nu + 1.0, x);
      const double lhs = std::exp(k_p - k_0);
      const double rhs = std::exp(k_m - k_0) + 2.0 * nu / x;
      REQUIRE(lhs == Approx(rhs).epsilon(1e-8));
    }
  }
}

TEST_CASE("agreement with the quadrature oracle", "[bessel]") {
  const double nus[] = {0.0, 0.17, 0.5, 1.0, 1.9, 3.25, 7.5};
  const double xs[] = {1e-8, 1e-4, 0.02, 0.3, 1.0, 1.99, 2.01, 6.0, 30.0, 700.0};
  for (double nu : nus) {
    for (double x : xs) {
      const double mine = log_bessel_k(nu, x);
      const double ref = oracle::log_bessel_k(nu, x);
      REQUIRE(std::fabs(mine - ref) <= 1e-10 * std::max(1.0, std::fabs(ref)));
    }
  }
}

TEST_CASE("ratio properties", "[bessel]") {
  REQUIRE(bessel_k_ratio(-0.5, 3.0) == Approx(1.0).epsilon(1e-14));
  const double r10 = bessel_k_ratio(0.0, 10.0);
  REQUIRE(r10 > 1.0);
  REQUIRE(r10 < 1.06);

  // monotone nonincreasing in x, limit 1 from above
  for (double nu : {0.0, 0.5, 1.3}) {
    double prev = std::numeric_limits<double>::infinity();
    for (double x = 0.05; x < 400.0; x *= 1.7) {
      const double r = bessel_k_ratio(nu, x);
      REQUIRE(r > 0.0);
      REQUIRE(r <= prev * (1.0 + 1e-12));
      prev = r;
    }
    REQUIRE(prev > 1.0);
    REQUIRE(prev < 1.01);
  }

  // divergence toward 0+ for nu = 0 matches the oracle
  const double tiny = bessel_k_ratio(0.0, 1e-6);
  const double lo = oracle::log_bessel_k(1.0, 1e-6) - oracle::log_bessel_k(0.0, 1e-6);
  REQUIRE(tiny == Approx(std::exp(lo)).epsilon(1e-8));
}

TEST_CASE("domain errors", "[bessel]") {
  REQUIRE_THROWS_AS(log_bessel_k(0.5, 0.0), std::domain_error);
  REQUIRE_THROWS_AS(log_bessel_k(0.5, -1.0), std::domain_error);
  REQUIRE_THROWS_AS(log_bessel_k(0.5, std::numeric_limits<double>::quiet_NaN()),
                    std::domain_error);
  REQUIRE_THROWS_AS(log_bessel_k(std::numeric_limits<double>::infinity(), 1.0),
                    std::domain_error);
  REQUIRE_THROWS_AS(bessel_k_ratio(0.0, -2.0), std::domain_error);
}
