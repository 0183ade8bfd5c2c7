#include <catch2/catch.hpp>
#include <cmath>

#include "qmhmm/simulation.hpp"

using namespace qmhmm;

TEST_CASE("bias and error metrics", "[sim]") {
  REQUIRE(arb({2.0, 2.0, 2.0}, 2.0) == Approx(0.0).margin(1e-14));
  REQUIRE(arb({2.2, 1.8}, 2.0) == Approx(0.0).margin(1e-12));
  REQUIRE(arb({2.2, 2.2}, 2.0) == Approx(10.0).epsilon(1e-12));
  REQUIRE_THROWS_AS(arb({1.0}, 0.0), std::invalid_argument);

  REQUIRE(rmse({2.0, 2.0}, 2.0) == 0.0);
  REQUIRE(rmse({1.0, 3.0}, 2.0) == Approx(1.0).epsilon(1e-14));
  REQUIRE(rmse({0.0, 0.0, 0.0}, 2.0) == Approx(2.0).epsilon(1e-14));
}

TEST_CASE("quantile functions", "[sim]") {
  REQUIRE(normal_quantile(0.5) == Approx(0.0).margin(1e-12));
  REQUIRE(normal_quantile(0.25) == Approx(-0.6744897501960817).epsilon(1e-10));
  REQUIRE(normal_quantile(0.975) == Approx(1.959963984540054).epsilon(1e-10));
  // t(3) has closed-form CDF; round trip a few probabilities
  for (double p : {0.05, 0.25, 0.5, 0.8, 0.99}) {
    const double x = student_t3_quantile(p);
    const double u = x / std::sqrt(3.0);
    const double back = 0.5 + (std::atan(u) + u / (1.0 + u * u)) / M_PI;
    REQUIRE(back == Approx(p).epsilon(1e-12));
  }
  REQUIRE(student_t3_quantile(0.25) == Approx(-0.7648923283074207).epsilon(1e-8));
}

TEST_CASE("generator determinism and structure", "[sim]") {
  ScenarioConfig cfg;
  cfg.N = 25;
  cfg.T = 6;
  cfg.seed = 3;
  const SimulatedData a = generate_dataset(cfg, 2);
  const SimulatedData b = generate_dataset(cfg, 2);
  REQUIRE((a.states - b.states).cwiseAbs().maxCoeff() == 0);
  for (int i = 0; i < cfg.N; ++i)
    REQUIRE((a.data.subject(i).y - b.data.subject(i).y).cwiseAbs().maxCoeff() == 0.0);
  const SimulatedData c = generate_dataset(cfg, 3);
  REQUIRE((a.data.subject(0).y - c.data.subject(0).y).cwiseAbs().maxCoeff() > 0.0);

  REQUIRE(a.data.n_subjects() == 25);
  REQUIRE(a.data.p() == 2);
  REQUIRE(a.data.k() == 2);
  REQUIRE(a.data.k_z() == 1);
  REQUIRE(a.data.k_w() == 1);
}

TEST_CASE("forced single state", "[sim]") {
  ScenarioConfig cfg;
  cfg.N = 10;
  cfg.T = 8;
  cfg.q_true = (Eigen::Vector2d() << 1.0, 0.0).finished();
  cfg.Q_true = Eigen::Matrix2d::Identity();
  const SimulatedData sim = generate_dataset(cfg, 0);
  REQUIRE(sim.states.maxCoeff() == 0);
}

TEST_CASE("chain occupancy approaches the uniform stationary law", "[sim]") {
  ScenarioConfig cfg;
  cfg.N = 200;
  cfg.T = 50;
  cfg.seed = 8;
  const SimulatedData sim = generate_dataset(cfg, 0);
  const double frac =
      1.0 - sim.states.cast<double>().sum() / double(cfg.N * cfg.T);
  const double se = 0.5 / std::sqrt(double(cfg.N * cfg.T) / 10.0);  // correlated draws
  REQUIRE(std::fabs(frac - 0.5) < 4.0 * se);
}

TEST_CASE("pure noise covariance", "[sim]") {
  ScenarioConfig cfg;
  cfg.N = 60000;
  cfg.T = 1;
  cfg.rho = 0.3;
  cfg.seed = 77;
  cfg.beta_true.setZero();
  cfg.alpha_true.setZero();
  cfg.omega.setZero();  // no random effects
  const SimulatedData sim = generate_dataset(cfg, 0);
  Eigen::MatrixXd ys(cfg.N, 2);
  for (int i = 0; i < cfg.N; ++i) ys.row(i) = sim.data.subject(i).y.row(0);
  const Eigen::VectorXd mean = ys.colwise().mean();
  const Eigen::MatrixXd centered = ys.rowwise() - mean.transpose();
  const Eigen::MatrixXd cov = centered.transpose() * centered / double(cfg.N - 1);
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 2; ++c) {
      const double want = cfg.omega_tilde()(r, c);
      REQUIRE(cov(r, c) == Approx(want).margin(4.0 * 1.5 / std::sqrt(double(cfg.N))));
    }
}

TEST_CASE("student errors are heavier tailed", "[sim]") {
  ScenarioConfig cfg;
  cfg.N = 40000;
  cfg.T = 1;
  cfg.scenario = Scenario::StudentStudent;
  cfg.beta_true.setZero();
  cfg.alpha_true.setZero();
  cfg.omega.setZero();
  cfg.seed = 21;
  const SimulatedData sim = generate_dataset(cfg, 0);
  // quartiles of the first outcome match the t(3) quantile, not the normal
  std::vector<double> col;
  col.reserve(cfg.N);
  for (int i = 0; i < cfg.N; ++i) col.push_back(sim.data.subject(i).y(0, 0));
  std::sort(col.begin(), col.end());
  const double q05 = col[static_cast<std::size_t>(0.05 * cfg.N)];
  REQUIRE(q05 == Approx(student_t3_quantile(0.05)).margin(0.12));
  REQUIRE(std::fabs(q05 - normal_quantile(0.05)) > 0.3);
}

TEST_CASE("study report on a tiny run", "[sim]") {
  ScenarioConfig cfg;
  cfg.N = 50;
  cfg.T = 5;
  cfg.B = 4;
  cfg.seed = 4;
  StudyConfig study;
  study.em.n_starts = 3;
  study.em.max_iter = 150;
  study.em.tol = 1e-5;
  study.G_range = {2};
  study.M = 2;
  const StudyReport rep = run_study(cfg, study);
  REQUIRE(rep.B_effective + rep.n_failures == 4);
  REQUIRE(rep.B_effective >= 3);
  REQUIRE(rep.beta_arb.rows() == 2);
  REQUIRE(rep.beta_rmse.minCoeff() >= 0.0);

  // variance decomposition: rmse^2 >= squared bias
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 2; ++c) {
      const double bias = rep.beta_truth(r, c) * rep.beta_arb(r, c) / 100.0;
      REQUIRE(rep.beta_rmse(r, c) * rep.beta_rmse(r, c) >=
              bias * bias - 1e-12);
    }

  // median-level truth equals the generator's state intercepts
  REQUIRE((rep.alpha_truth - cfg.alpha_true).cwiseAbs().maxCoeff() < 1e-12);

  // bitwise reproducibility
  const StudyReport again = run_study(cfg, study);
  REQUIRE(again.B_effective == rep.B_effective);
  REQUIRE((again.beta_arb - rep.beta_arb).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE((again.alpha_rmse - rep.alpha_rmse).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("alpha truth shifts by the error quantile", "[sim]") {
  ScenarioConfig cfg;
  cfg.tau = Eigen::Vector2d(0.25, 0.25);
  cfg.B = 0;
  StudyConfig study;
  const StudyReport rep = run_study(cfg, study);
  const double shift = normal_quantile(0.25);
  REQUIRE(rep.alpha_truth(0, 0) == Approx(cfg.alpha_true(0, 0) + shift).epsilon(1e-12));
  REQUIRE(rep.alpha_truth(1, 1) == Approx(cfg.alpha_true(1, 1) + shift).epsilon(1e-12));
}
