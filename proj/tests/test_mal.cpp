#include <catch2/catch.hpp>
#include <cmath>

#include "oracles.hpp"
#include "qmhmm/mal.hpp"
#include "qmhmm/rng.hpp"

using namespace qmhmm;

namespace {

MALParams random_params(RandomStream& rs, int p) {
  MALParams m;
  m.mu.resize(p);
  m.d.resize(p);
  for (int j = 0; j < p; ++j) {
    m.mu[j] = 2.0 * rs.normal();
    m.d[j] = 0.3 + 2.0 * rs.uniform();
  }
  m.psi = Eigen::MatrixXd::Identity(p, p);
  if (p == 2) {
    const double r = 1.6 * rs.uniform() - 0.8;
    m.psi(0, 1) = m.psi(1, 0) = r;
  } else if (p > 2) {
    // random correlation via a normalized Gram matrix
    Eigen::MatrixXd a(p, p + 2);
    for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = rs.normal();
    Eigen::MatrixXd s = a * a.transpose();
    Eigen::VectorXd inv_sd = s.diagonal().cwiseSqrt().cwiseInverse();
    m.psi = inv_sd.asDiagonal() * s * inv_sd.asDiagonal();
    m.psi = 0.5 * (m.psi + m.psi.transpose());
    for (int i = 0; i < p; ++i) m.psi(i, i) = 1.0;
  }
  return m;
}

QuantileSpec random_spec(RandomStream& rs, int p) {
  Eigen::VectorXd tau(p);
  for (int j = 0; j < p; ++j) tau[j] = 0.1 + 0.8 * rs.uniform();
  return QuantileSpec(tau);
}

}  // namespace

TEST_CASE("quantile constants", "[mal]") {
  QuantileSpec spec{(Eigen::VectorXd(2) << 0.25, 0.75).finished()};
  REQUIRE(spec.xi_tilde()[0] == Approx(8.0 / 3.0).epsilon(1e-14));
  REQUIRE(spec.xi_tilde()[1] == Approx(-8.0 / 3.0).epsilon(1e-14));
  REQUIRE(spec.lambda()[0] == Approx(std::sqrt(2.0 / 0.1875)).epsilon(1e-14));
  REQUIRE_THROWS_AS(QuantileSpec{(Eigen::VectorXd(1) << 1.0).finished()},
                    std::invalid_argument);
  REQUIRE(QuantileSpec{(Eigen::VectorXd(2) << 0.5, 0.5).finished()}.nu() == 0.0);
}

TEST_CASE("univariate closed form", "[mal]") {
  // at tau = 1/2 the marginal is the symmetric Laplace with density
  // tau(1-tau)/d exp(-check_loss((y-mu)/d))
  MALParams m;
  m.mu = Eigen::VectorXd::Zero(1);
  m.d = Eigen::VectorXd::Ones(1);
  m.psi = Eigen::MatrixXd::Identity(1, 1);
  QuantileSpec spec{(Eigen::VectorXd(1) << 0.5).finished()};
  const Eigen::VectorXd y = (Eigen::VectorXd(1) << 2.0).finished();
  REQUIRE(mal_log_density(y, m, spec) == Approx(std::log(0.25) - 1.0).epsilon(1e-12));

  // general tau and scale
  for (double tau : {0.2, 0.65, 0.9}) {
    QuantileSpec s1{(Eigen::VectorXd(1) << tau).finished()};
    m.d[0] = 0.7;
    for (double yy : {-1.3, 0.4, 2.2}) {
      const double want = std::log(tau * (1.0 - tau) / m.d[0]) -
                          check_loss(yy / m.d[0], tau);
      const Eigen::VectorXd yv = (Eigen::VectorXd(1) << yy).finished();
      REQUIRE(mal_log_density(yv, m, s1) == Approx(want).epsilon(1e-10));
    }
  }
}

TEST_CASE("median symmetry", "[mal]") {
  RandomStream rs(11);
  QuantileSpec spec{(Eigen::VectorXd(2) << 0.5, 0.5).finished()};
  for (int rep = 0; rep < 20; ++rep) {
    MALParams m = random_params(rs, 2);
    Eigen::VectorXd y(2);
    y << rs.normal() * 3, rs.normal() * 3;
    const Eigen::VectorXd mirrored = 2.0 * m.mu - y;
    REQUIRE(mal_log_density(y, m, spec) ==
            Approx(mal_log_density(mirrored, m, spec)).epsilon(1e-11));
  }
}

TEST_CASE("mixture-representation quadrature agreement", "[mal]") {
  RandomStream rs(23);
  for (int rep = 0; rep < 40; ++rep) {
    const int p = 1 + rep % 3;
    MALParams m = random_params(rs, p);
    QuantileSpec spec = random_spec(rs, p);
    Eigen::VectorXd y(p);
    for (int j = 0; j < p; ++j) y[j] = m.mu[j] + 4.0 * rs.normal();
    const double mine = mal_log_density(y, m, spec);
    const double ref = oracle::mal_log_density_mixture(y, m, spec);
    REQUIRE(std::fabs(mine - ref) <= 1e-6 * std::max(1.0, std::fabs(ref)));
  }
}

TEST_CASE("sampling moments", "[mal]") {
  const Eigen::Index n = 200000;
  MALParams m;
  m.mu = Eigen::VectorXd::Zero(2);
  m.d = Eigen::VectorXd::Ones(2);
  m.psi = Eigen::MatrixXd::Identity(2, 2);
  QuantileSpec spec{(Eigen::VectorXd(2) << 0.25, 0.75).finished()};
  const Eigen::MatrixXd draws = mal_sample(m, spec, n, 99);
  REQUIRE(draws.rows() == n);

  const Eigen::VectorXd mean = draws.colwise().mean();
  const Eigen::MatrixXd centered = draws.rowwise() - mean.transpose();
  const Eigen::MatrixXd cov = centered.transpose() * centered / double(n - 1);
  const Eigen::MatrixXd want_cov = mal_covariance(m, spec);
  const Eigen::VectorXd want_mean = m.d.cwiseProduct(spec.xi_tilde());

  for (int j = 0; j < 2; ++j) {
    const double se = std::sqrt(cov(j, j) / double(n));
    REQUIRE(std::fabs(mean[j] - want_mean[j]) < 4.0 * se);
  }
  for (int r = 0; r < 2; ++r) {
    for (int c = 0; c < 2; ++c) {
      // empirical standard error of the covariance entry
      const Eigen::ArrayXd prod =
          centered.col(r).array() * centered.col(c).array();
      const double v = (prod - prod.mean()).square().sum() / double(n - 1);
      const double se = std::sqrt(v / double(n));
      REQUIRE(std::fabs(cov(r, c) - want_cov(r, c)) < 4.0 * se);
    }
  }
}

TEST_CASE("marginal quantile coverage", "[mal]") {
  const Eigen::Index n = 200000;
  RandomStream rs(4);
  MALParams m = random_params(rs, 2);
  QuantileSpec spec{(Eigen::VectorXd(2) << 0.3, 0.7).finished()};
  const Eigen::MatrixXd draws = mal_sample(m, spec, n, 123);
  for (int j = 0; j < 2; ++j) {
    const double tau = spec.tau()[j];
    const double frac =
        (draws.col(j).array() <= m.mu[j]).cast<double>().mean();
    const double se = std::sqrt(tau * (1.0 - tau) / double(n));
    REQUIRE(std::fabs(frac - tau) < 4.0 * se);
  }
}

TEST_CASE("sampling is deterministic in the seed", "[mal]") {
  MALParams m;
  m.mu = Eigen::VectorXd::Zero(2);
  m.d = Eigen::VectorXd::Ones(2);
  m.psi = Eigen::MatrixXd::Identity(2, 2);
  QuantileSpec spec{(Eigen::VectorXd(2) << 0.4, 0.6).finished()};
  const Eigen::MatrixXd a = mal_sample(m, spec, 5000, 7);
  const Eigen::MatrixXd b = mal_sample(m, spec, 5000, 7);
  REQUIRE((a - b).cwiseAbs().maxCoeff() == 0.0);
  const Eigen::MatrixXd c = mal_sample(m, spec, 5000, 8);
  REQUIRE((a - c).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("covariance formula", "[mal]") {
  MALParams m;
  m.mu = Eigen::VectorXd::Zero(2);
  m.d = Eigen::VectorXd::Ones(2);
  m.psi = Eigen::MatrixXd::Identity(2, 2);
  QuantileSpec spec{(Eigen::VectorXd(2) << 0.5, 0.5).finished()};
  const Eigen::MatrixXd s = mal_covariance(m, spec);
  REQUIRE(s(0, 0) == Approx(8.0).epsilon(1e-14));
  REQUIRE(s(1, 1) == Approx(8.0).epsilon(1e-14));
  REQUIRE(s(0, 1) == Approx(0.0).margin(1e-14));
  REQUIRE(mal_correlation(m, spec)(0, 1) == Approx(0.0).margin(1e-14));

  m.psi(0, 1) = m.psi(1, 0) = 0.3;
  REQUIRE(mal_correlation(m, spec)(0, 1) == Approx(0.3).epsilon(1e-14));
}

TEST_CASE("gig expectations", "[mal]") {
  // half-integer order: the Bessel ratio is exactly 1
  const GigWeights w = gig_expectations(4.0, 2.0, -0.5);
  REQUIRE(w.c_hat == Approx(1.0).epsilon(1e-13));
  REQUIRE(w.z_hat == Approx(1.25).epsilon(1e-13));

  // quadrature oracle over a grid
  for (double nu : {-1.5, -0.5, 0.0, 0.5, 1.25}) {
    for (double m : {1e-6, 1e-3, 0.2, 1.0, 7.0, 55.0}) {
      for (double d : {0.0, 0.7, 9.0}) {
        const GigWeights g = gig_expectations(m, d, nu);
        const double c_ref = oracle::gig_moment(nu, 2.0 + d, m, 1.0);
        const double z_ref = oracle::gig_moment(nu, 2.0 + d, m, -1.0);
        REQUIRE(g.c_hat == Approx(c_ref).epsilon(1e-8));
        REQUIRE(g.z_hat == Approx(z_ref).epsilon(1e-8));
        REQUIRE(g.c_hat * g.z_hat >= 1.0 - 1e-12);
      }
    }
  }
  REQUIRE_THROWS_AS(gig_expectations(-1.0, 0.0, 0.0), std::domain_error);
  REQUIRE_THROWS_AS(gig_expectations(1.0, -0.1, 0.0), std::domain_error);
}

TEST_CASE("density normalization by envelope importance sampling", "[mal]") {
  RandomStream rs(31);
  for (int p = 1; p <= 3; ++p) {
    MALParams m = random_params(rs, p);
    QuantileSpec spec = random_spec(rs, p);
    const Eigen::MatrixXd s = mal_covariance(m, spec);
    const Eigen::VectorXd center = m.mu + m.d.cwiseProduct(spec.xi_tilde());
    // multivariate t(3) envelope with inflated scale dominates the
    // exponential tails of the target
    const Eigen::MatrixXd scale = 4.0 * s;
    const Eigen::MatrixXd chol = Eigen::LLT<Eigen::MatrixXd>(scale).matrixL();
    const double log_det = std::log(scale.determinant());
    const Eigen::MatrixXd scale_inv = scale.inverse();
    const double df = 3.0;
    const double log_c = std::lgamma(0.5 * (df + p)) - std::lgamma(0.5 * df) -
                         0.5 * p * std::log(df * M_PI) - 0.5 * log_det;
    RandomStream draws(1000 + p);
    const int n = 400000;
    double sum = 0.0;
    Eigen::VectorXd z(p), x(p);
    for (int it = 0; it < n; ++it) {
      for (int j = 0; j < p; ++j) z[j] = draws.normal();
      const double u = std::sqrt(draws.chi_squared(3) / df);
      x = center + (chol * z) / u;
      const double quad = (x - center).dot(scale_inv * (x - center));
      const double log_g = log_c - 0.5 * (df + p) * std::log1p(quad / df);
      sum += std::exp(mal_log_density(x, m, spec) - log_g);
    }
    const double integral = sum / n;
    REQUIRE(integral == Approx(1.0).epsilon(0.01));
  }
}

TEST_CASE("parameter validation", "[mal]") {
  MALParams m;
  m.mu = Eigen::VectorXd::Zero(2);
  m.d = (Eigen::VectorXd(2) << 1.0, -0.5).finished();
  m.psi = Eigen::MatrixXd::Identity(2, 2);
  QuantileSpec spec{(Eigen::VectorXd(2) << 0.5, 0.5).finished()};
  Eigen::VectorXd y = Eigen::VectorXd::Zero(2);
  REQUIRE_THROWS_AS(mal_log_density(y, m, spec), std::invalid_argument);

  m.d[1] = 0.5;
  m.psi(0, 1) = m.psi(1, 0) = 1.2;  // not positive definite
  REQUIRE_THROWS_AS(mal_log_density(y, m, spec), std::invalid_argument);

  m.psi(0, 1) = m.psi(1, 0) = 0.0;
  Eigen::VectorXd y3 = Eigen::VectorXd::Zero(3);
  REQUIRE_THROWS_AS(mal_log_density(y3, m, spec), std::invalid_argument);

  // the floor keeps the density finite at y = mu
  REQUIRE(std::isfinite(mal_log_density(y, m, spec)));
}
