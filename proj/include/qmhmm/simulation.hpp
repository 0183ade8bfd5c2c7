#pragma once

// Simulation-study harness: bivariate two-state data generator with Gaussian
// or Student-t errors and random slopes, bias/RMSE metrics across Monte Carlo
// replications, and the model-selection frequency study.

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <cmath>
#include <map>
#include <optional>
#include <stdexcept>
#include <vector>

#include "qmhmm/bootstrap.hpp"
#include "qmhmm/data.hpp"
#include "qmhmm/em.hpp"
#include "qmhmm/model_selection.hpp"
#include "qmhmm/parallel.hpp"
#include "qmhmm/rng.hpp"

namespace qmhmm {

/// Standard normal quantile (Acklam's rational approximation polished with
/// two Newton steps on erfc, good to full double precision).
inline double normal_quantile(double prob) {
  if (!(prob > 0.0 && prob < 1.0))
    throw std::domain_error("normal_quantile: probability outside (0, 1)");
  static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                                 -2.759285104469687e+02, 1.383577518672690e+02,
                                 -3.066479806614716e+01, 2.506628277459239e+00};
  static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                                 -1.556989798598866e+02, 6.680131188771972e+01,
                                 -1.328068155288572e+01};
  static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                                 -2.400758277161838e+00, -2.549732539343734e+00,
                                 4.374664141464968e+00,  2.938163982698783e+00};
  static constexpr double dd[] = {7.784695709041462e-03, 3.224671290700398e-01,
                                  2.445134137142996e+00, 3.754408661907416e+00};
  const double p_low = 0.02425;
  double x;
  if (prob < p_low) {
    const double q = std::sqrt(-2.0 * std::log(prob));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((dd[0] * q + dd[1]) * q + dd[2]) * q + dd[3]) * q + 1.0);
  } else if (prob <= 1.0 - p_low) {
    const double q = prob - 0.5;
    const double r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  } else {
    const double q = std::sqrt(-2.0 * std::log(1.0 - prob));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((dd[0] * q + dd[1]) * q + dd[2]) * q + dd[3]) * q + 1.0);
  }
  for (int it = 0; it < 2; ++it) {
    const double err = 0.5 * std::erfc(-x / std::sqrt(2.0)) - prob;
    const double pdf =
        std::exp(-0.5 * x * x) / std::sqrt(2.0 * 3.14159265358979323846);
    x -= err / pdf;
  }
  return x;
}

/// Quantile of the Student t with 3 degrees of freedom (unit scale), via
/// Newton iteration on the closed-form CDF.
inline double student_t3_quantile(double prob) {
  if (!(prob > 0.0 && prob < 1.0))
    throw std::domain_error("student_t3_quantile: probability outside (0, 1)");
  const double pi = 3.14159265358979323846;
  auto cdf = [&](double x) {
    const double u = x / std::sqrt(3.0);
    return 0.5 + (std::atan(u) + u / (1.0 + u * u)) / pi;
  };
  auto pdf = [&](double x) {
    const double t = 1.0 + x * x / 3.0;
    return 2.0 / (pi * std::sqrt(3.0) * t * t);
  };
  double x = normal_quantile(prob) * 1.3;
  for (int it = 0; it < 60; ++it) {
    const double err = cdf(x) - prob;
    const double step = err / pdf(x);
    x -= step;
    if (std::fabs(step) < 1e-14 * (1.0 + std::fabs(x))) break;
  }
  return x;
}

enum class Scenario { NormalNormal, StudentStudent };

// Data generating process of the simulation design: p = 2 outcomes, a
// standard normal and a Bernoulli covariate, a two-state chain driving the
// intercepts, random slopes on the first covariate.
struct ScenarioConfig {
  Scenario scenario = Scenario::NormalNormal;
  double rho = 0.3;
  int N = 100;
  int T = 5;
  int B = 250;
  Eigen::Vector2d tau{0.5, 0.5};
  std::uint64_t seed = 1;
  double df = 3.0;  // Student-t degrees of freedom
  Eigen::Matrix2d omega = (Eigen::Matrix2d() << 1.0, 0.25, 0.25, 1.0).finished();
  Eigen::MatrixXd beta_true =
      (Eigen::Matrix2d() << 2.0, -0.8, -1.4, 3.0).finished();
  Eigen::MatrixXd alpha_true =
      (Eigen::Matrix2d() << 5.0, -2.0, -5.0, 2.0).finished();
  Eigen::VectorXd q_true = (Eigen::Vector2d() << 0.7, 0.3).finished();
  Eigen::MatrixXd Q_true =
      (Eigen::Matrix2d() << 0.8, 0.2, 0.2, 0.8).finished();

  Eigen::Matrix2d omega_tilde() const {
    Eigen::Matrix2d m;
    m << 1.0, rho, rho, 1.0;
    return m;
  }
  int n_states() const { return static_cast<int>(alpha_true.rows()); }
};

struct SimulatedData {
  LongitudinalDataset data;
  Eigen::MatrixXi states;   // N x T, 0-based
  Eigen::MatrixXd b_true;   // N x p random slopes
};

/// The marginal quantile of one error component; added to the state
/// intercepts to obtain their tau-level true values.
inline double error_quantile(Scenario scenario, double tau) {
  return scenario == Scenario::NormalNormal ? normal_quantile(tau)
                                            : student_t3_quantile(tau);
}

inline SimulatedData generate_dataset(const ScenarioConfig& cfg, int replication) {
  const int p = 2, k = 2;
  const int M = cfg.n_states();
  RandomStream rs(derive_seed(cfg.seed, 0xDA7Au, static_cast<std::uint64_t>(replication)));
  const Eigen::Matrix2d l_omega = cfg.omega.llt().matrixL();
  const Eigen::Matrix2d l_eps = cfg.omega_tilde().llt().matrixL();
  const bool student = cfg.scenario == Scenario::StudentStudent;

  auto draw2 = [&](const Eigen::Matrix2d& chol) {
    Eigen::Vector2d z(rs.normal(), rs.normal());
    Eigen::Vector2d v = chol * z;
    if (student) {
      const double denom = std::sqrt(rs.chi_squared(static_cast<int>(cfg.df)) / cfg.df);
      v /= denom;
    }
    return v;
  };

  std::vector<SubjectRecord> subs;
  subs.reserve(static_cast<std::size_t>(cfg.N));
  Eigen::MatrixXi states(cfg.N, cfg.T);
  Eigen::MatrixXd b_true(cfg.N, p);
  std::vector<double> qv(static_cast<std::size_t>(M));
  for (int j = 0; j < M; ++j) qv[static_cast<std::size_t>(j)] = cfg.q_true[j];

  for (int i = 0; i < cfg.N; ++i) {
    const Eigen::Vector2d bi = draw2(l_omega);
    b_true.row(i) = bi.transpose();
    SubjectRecord rec;
    rec.id = "sim" + std::to_string(i + 1);
    rec.y.resize(cfg.T, p);
    rec.x.resize(cfg.T, k);
    int s = rs.categorical(qv);
    for (int t = 0; t < cfg.T; ++t) {
      if (t > 0) {
        std::vector<double> row(static_cast<std::size_t>(M));
        for (int j = 0; j < M; ++j) row[static_cast<std::size_t>(j)] = cfg.Q_true(s, j);
        s = rs.categorical(row);
      }
      states(i, t) = s;
      const double x1 = rs.normal();
      const double x2 = rs.bernoulli(0.5) ? 1.0 : 0.0;
      rec.x(t, 0) = x1;
      rec.x(t, 1) = x2;
      const Eigen::Vector2d eps = draw2(l_eps);
      const Eigen::RowVector2d xrow(x1, x2);
      rec.y.row(t) = xrow * cfg.beta_true + x1 * bi.transpose() +
                     cfg.alpha_true.row(s) + eps.transpose();
    }
    subs.push_back(std::move(rec));
  }
  return SimulatedData{
      LongitudinalDataset(std::move(subs), {0}, false, {}, true),
      std::move(states), std::move(b_true)};
}

/// Average relative bias in percent.
inline double arb(const std::vector<double>& estimates, double truth) {
  if (truth == 0.0) throw std::invalid_argument("arb: truth must be nonzero");
  if (estimates.empty()) throw std::invalid_argument("arb: no estimates");
  double s = 0.0;
  for (double e : estimates) s += (e - truth) / truth;
  return s / static_cast<double>(estimates.size()) * 100.0;
}

/// Root mean square error.
inline double rmse(const std::vector<double>& estimates, double truth) {
  if (estimates.empty()) throw std::invalid_argument("rmse: no estimates");
  double s = 0.0;
  for (double e : estimates) s += (e - truth) * (e - truth);
  return std::sqrt(s / static_cast<double>(estimates.size()));
}

struct StudyConfig {
  FitConfig em;                      // settings for every replication fit
  std::vector<int> G_range{2, 3, 4}; // mixture sizes scored by BIC
  int M = 2;                         // states (metrics mode)
  bool select = false;               // model-selection frequency mode
  std::vector<int> M_range{2, 3, 4}; // states scored in selection mode
};

struct StudyReport {
  Eigen::MatrixXd beta_truth, alpha_truth;
  Eigen::MatrixXd beta_arb, beta_rmse;
  Eigen::MatrixXd alpha_arb, alpha_rmse;
  std::vector<Eigen::MatrixXd> beta_estimates;   // aligned, per replication
  std::vector<Eigen::MatrixXd> alpha_estimates;  // M x p, aligned
  std::map<int, int> bic_m_counts, aic_m_counts;
  int n_failures = 0;
  int B_effective = 0;
};

/// Runs B replications: generate, fit (G scored by BIC; in selection mode the
/// full (G, M) grid), align states to the truth by the intercept distance,
/// and accumulate bias/RMSE or selection frequencies.
inline StudyReport run_study(const ScenarioConfig& cfg, const StudyConfig& study) {
  const int p = 2;
  const int M_true = cfg.n_states();

  StudyReport rep;
  rep.beta_truth = cfg.beta_true;
  rep.alpha_truth = cfg.alpha_true;
  for (int c = 0; c < p; ++c) {
    const double shift = error_quantile(cfg.scenario, cfg.tau[c]);
    rep.alpha_truth.col(c).array() += shift;
  }

  struct RepOutcome {
    std::optional<Eigen::MatrixXd> beta, alpha;
    int bic_m = 0, aic_m = 0;
    bool failed = false;
  };
  std::vector<RepOutcome> outcomes(static_cast<std::size_t>(cfg.B));

  parallel_for(
      cfg.B,
      [&](int r) {
        auto& oc = outcomes[static_cast<std::size_t>(r)];
        try {
          SimulatedData sim = generate_dataset(cfg, r);
          const QuantileSpec spec{cfg.tau};
          FitConfig em = study.em;
          em.seed = derive_seed(cfg.seed, 0xF17u, static_cast<std::uint64_t>(r));
          em.n_threads = 1;
          const std::vector<int> M_range =
              study.select ? study.M_range : std::vector<int>{study.M};
          GridResult grid = grid_search(sim.data, spec, study.G_range, M_range, em);
          if (study.select) {
            oc.bic_m = grid.bic_cell().M;
            oc.aic_m = grid.aic_cell().M;
          }
          const FitResult& best = grid.bic_cell().fit;
          if (best.params.M() == M_true) {
            QMHMMParams truth_like = best.params;
            for (int j = 0; j < M_true; ++j)
              truth_like.alpha[static_cast<std::size_t>(j)] =
                  rep.alpha_truth.row(j);
            const QMHMMParams aligned = align_labels(best.params, truth_like);
            oc.beta = aligned.beta;
            Eigen::MatrixXd a(M_true, p);
            for (int j = 0; j < M_true; ++j)
              a.row(j) = aligned.alpha[static_cast<std::size_t>(j)].row(
                  sim.data.k_w() - 1);
            oc.alpha = a;
          }
        } catch (const std::exception&) {
          oc.failed = true;
        }
      },
      study.em.n_threads);

  for (auto& oc : outcomes) {
    if (oc.failed) {
      ++rep.n_failures;
      continue;
    }
    if (study.select) {
      rep.bic_m_counts[oc.bic_m] += 1;
      rep.aic_m_counts[oc.aic_m] += 1;
    }
    if (oc.beta) {
      rep.beta_estimates.push_back(*oc.beta);
      rep.alpha_estimates.push_back(*oc.alpha);
    }
  }
  rep.B_effective = static_cast<int>(rep.beta_estimates.size());

  if (rep.B_effective > 0) {
    const int k = static_cast<int>(rep.beta_truth.rows());
    rep.beta_arb.resize(k, p);
    rep.beta_rmse.resize(k, p);
    for (int r = 0; r < k; ++r)
      for (int c = 0; c < p; ++c) {
        std::vector<double> est;
        est.reserve(rep.beta_estimates.size());
        for (const auto& m : rep.beta_estimates) est.push_back(m(r, c));
        rep.beta_arb(r, c) = arb(est, rep.beta_truth(r, c));
        rep.beta_rmse(r, c) = rmse(est, rep.beta_truth(r, c));
      }
    rep.alpha_arb.resize(M_true, p);
    rep.alpha_rmse.resize(M_true, p);
    for (int r = 0; r < M_true; ++r)
      for (int c = 0; c < p; ++c) {
        std::vector<double> est;
        est.reserve(rep.alpha_estimates.size());
        for (const auto& m : rep.alpha_estimates) est.push_back(m(r, c));
        rep.alpha_arb(r, c) = arb(est, rep.alpha_truth(r, c));
        rep.alpha_rmse(r, c) = rmse(est, rep.alpha_truth(r, c));
      }
  }
  return rep;
}

}  // namespace qmhmm
