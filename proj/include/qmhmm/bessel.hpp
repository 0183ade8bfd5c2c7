#pragma once

// Log-domain evaluation of the modified Bessel function of the third kind
// K_nu(x) for real order. Strategy: Temme's series for x <= 2, the
// Thompson-Barnett continued fraction (scaled by e^x) for x > 2, and a
// log-scaled upward recurrence in the order. Everything downstream consumes
// ln K_nu, so x up to several hundred neither under- nor overflows.

#include <cmath>
#include <limits>
#include <stdexcept>
#include <utility>

namespace qmhmm {

namespace bessel_detail {

inline constexpr double kEulerGamma = 0.57721566490153286060651209008240;
inline constexpr double kPi = 3.14159265358979323846264338327950;

struct GammaTerms {
  double gam1;   // [1/Gamma(1-mu) - 1/Gamma(1+mu)] / (2 mu)
  double gam2;   // [1/Gamma(1-mu) + 1/Gamma(1+mu)] / 2
  double gampl;  // 1/Gamma(1+mu)
  double gammi;  // 1/Gamma(1-mu)
};

// Auxiliary gamma combinations for |mu| <= 1/2. Uses ln(1/Gamma(1+mu)) =
// gamma*mu - sum_{k>=2} (-1)^k zeta(k) mu^k / k; the even/odd split avoids
// the cancellation that a naive difference of reciprocal gammas would incur
// near mu = 0.
inline GammaTerms gamma_terms(double mu) {
  double a;  // even part of ln(1/Gamma(1+.)) at mu
  double b;  // odd part; b/mu -> -gamma as mu -> 0
  if (std::fabs(mu) <= 0.01) {
    static constexpr double zeta_even[] = {
        1.6449340668482264365,   // zeta(2)
        1.0823232337111381916,   // zeta(4)
        1.0173430619844491397,   // zeta(6)
        1.0040773561979443394,   // zeta(8)
        1.0009945751278180853,   // zeta(10)
        1.0002460865533080483};  // zeta(12)
    static constexpr double zeta_odd[] = {
        1.2020569031595942854,   // zeta(3)
        1.0369277551433699263,   // zeta(5)
        1.0083492773819228268,   // zeta(7)
        1.0020083928260822144,   // zeta(9)
        1.0004941886041194646};  // zeta(11)
    const double m2 = mu * mu;
    a = 0.0;
    double pow_even = m2;
    for (int i = 0; i < 6; ++i) {
      a -= zeta_even[i] * pow_even / (2 * i + 2);
      pow_even *= m2;
    }
    double b_over_mu = -kEulerGamma;
    double pow_odd = m2;
    for (int i = 0; i < 5; ++i) {
      b_over_mu -= zeta_odd[i] * pow_odd / (2 * i + 3);
      pow_odd *= m2;
    }
    b = b_over_mu * mu;
    const double b2 = b * b;
    const double sinhc = 1.0 + b2 / 6.0 * (1.0 + b2 / 20.0 * (1.0 + b2 / 42.0));
    return {std::exp(a) * b_over_mu * sinhc, std::exp(a) * std::cosh(b),
            std::exp(a - b), std::exp(a + b)};
  }
  const double lgp = std::lgamma(1.0 + mu);
  const double lgm = std::lgamma(1.0 - mu);
  a = -0.5 * (lgp + lgm);
  b = 0.5 * (lgp - lgm);
  return {std::exp(a) * std::sinh(b) / mu, std::exp(a) * std::cosh(b),
          std::exp(a - b), std::exp(a + b)};
}

// Temme's series for (K_mu(x), K_{mu+1}(x)), valid for x <= 2, |mu| <= 1/2.
inline std::pair<double, double> temme_pair(double mu, double x) {
  constexpr double eps = std::numeric_limits<double>::epsilon();
  const double x2 = 0.5 * x;
  const double pimu = kPi * mu;
  const double fact = std::fabs(pimu) < 1e-15 ? 1.0 : pimu / std::sin(pimu);
  double d = -std::log(x2);
  double e = mu * d;
  const double fact2 = std::fabs(e) < 1e-15 ? 1.0 : std::sinh(e) / e;
  const GammaTerms g = gamma_terms(mu);
  double ff = fact * (g.gam1 * std::cosh(e) + g.gam2 * fact2 * d);
  double sum = ff;
  e = std::exp(e);
  double p = 0.5 * e / g.gampl;
  double q = 0.5 / (e * g.gammi);
  double c = 1.0;
  d = x2 * x2;
  double sum1 = p;
  const double mu2 = mu * mu;
  for (int i = 1; i <= 500; ++i) {
    ff = (i * ff + p + q) / (i * i - mu2);
    c *= d / i;
    p /= (i - mu);
    q /= (i + mu);
    const double del = c * ff;
    sum += del;
    const double del1 = c * (p - i * ff);
    sum1 += del1;
    if (std::fabs(del) < std::fabs(sum) * eps) break;
  }
  return {sum, sum1 * (2.0 / x)};
}

// Continued fraction CF2 for (ln K_mu(x), ln K_{mu+1}(x)), x > 2, |mu| <= 1/2.
inline std::pair<double, double> cf2_log_pair(double mu, double x) {
  constexpr double eps = std::numeric_limits<double>::epsilon();
  const double mu2 = mu * mu;
  double b = 2.0 * (1.0 + x);
  double d = 1.0 / b;
  double h = d, delh = d;
  double q1 = 0.0, q2 = 1.0;
  const double a1 = 0.25 - mu2;
  double q = a1, c = a1;
  double a = -a1;
  double s = 1.0 + q * delh;
  for (int i = 2; i <= 10000; ++i) {
    a -= 2 * (i - 1);
    c = -a * c / i;
    const double qnew = (q1 - b * q2) / a;
    q1 = q2;
    q2 = qnew;
    q += c * qnew;
    b += 2.0;
    d = 1.0 / (b + a * d);
    delh = (b * d - 1.0) * delh;
    h += delh;
    const double dels = q * delh;
    s += dels;
    if (std::fabs(dels / s) <= eps) break;
  }
  h = a1 * h;
  const double log_kmu = 0.5 * std::log(kPi / (2.0 * x)) - x - std::log(s);
  const double log_kmu1 = log_kmu + std::log((mu + x + 0.5 - h) / x);
  return {log_kmu, log_kmu1};
}

// (ln K_mu(x), ln K_{mu+1}(x)) for the reduced order |mu| <= 1/2.
inline std::pair<double, double> base_log_pair(double mu, double x) {
  if (x <= 2.0) {
    const auto [k0, k1] = temme_pair(mu, x);
    return {std::log(k0), std::log(k1)};
  }
  return cf2_log_pair(mu, x);
}

// Climbs (ln K_{mu+n-1}, ln K_{mu+n}) from the base pair by the three-term
// recurrence expressed on ratios, which cannot overflow.
inline std::pair<double, double> log_pair_at(double order_lo, double x) {
  // order_lo >= -1/2; returns logs at orders (order_lo, order_lo + 1)
  const int n = static_cast<int>(std::floor(order_lo + 0.5));
  const double mu = order_lo - n;
  auto [lk0, lk1] = base_log_pair(mu, x);
  for (int j = 1; j <= n; ++j) {
    const double ratio = std::exp(lk0 - lk1) + 2.0 * (mu + j) / x;
    const double lk2 = lk1 + std::log(ratio);
    lk0 = lk1;
    lk1 = lk2;
  }
  return {lk0, lk1};
}

inline void check_args(double nu, double x) {
  if (!std::isfinite(nu))
    throw std::domain_error("log_bessel_k: order must be finite");
  if (!std::isfinite(x) || x <= 0.0)
    throw std::domain_error("log_bessel_k: argument must be positive and finite");
}

}  // namespace bessel_detail

/// ln K_nu(x) for real nu (symmetric in the order) and x > 0.
inline double log_bessel_k(double nu, double x) {
  bessel_detail::check_args(nu, x);
  const double a = std::fabs(nu);
  if (a <= 0.5) return bessel_detail::base_log_pair(a, x).first;
  return bessel_detail::log_pair_at(a - 1.0, x).second;
}

/// (ln K_nu(x), ln K_{nu+1}(x)) in one evaluation.
inline std::pair<double, double> log_bessel_k_pair(double nu, double x) {
  bessel_detail::check_args(nu, x);
  if (nu >= -0.5) return bessel_detail::log_pair_at(nu, x);
  if (nu <= -1.0) {
    // K_nu = K_|nu| and K_{nu+1} = K_{|nu|-1}: a consecutive pair, reversed.
    const auto [lo, hi] = bessel_detail::log_pair_at(-nu - 1.0, x);
    return {hi, lo};
  }
  // nu in (-1, -1/2): the two orders |nu| and nu+1 are not consecutive.
  return {log_bessel_k(-nu, x), log_bessel_k(nu + 1.0, x)};
}

/// K_{nu+1}(x) / K_nu(x).
inline double bessel_k_ratio(double nu, double x) {
  const auto [lk, lk1] = log_bessel_k_pair(nu, x);
  return std::exp(lk1 - lk);
}

}  // namespace qmhmm
