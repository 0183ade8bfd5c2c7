#pragma once

// EM estimation of the quantile mixed hidden Markov model: log-domain
// forward-backward recursions, posterior and GIG expectations, closed-form
// M-step, convergence control and the multi-start driver.

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <stdexcept>
#include <vector>

#include "qmhmm/data.hpp"
#include "qmhmm/mal.hpp"
#include "qmhmm/parallel.hpp"
#include "qmhmm/rng.hpp"

namespace qmhmm {

struct FitConfig {
  int max_iter = 500;
  double tol = 1e-6;          // max absolute parameter change
  int n_starts = 50;
  std::uint64_t seed = 1;
  double retain_floor = 0.05; // pi_g and q_j must exceed this to retain
  int n_threads = 0;          // 0 = hardware concurrency
  bool freeze_scale = false;  // hold d and psi fixed (exact M-steps only)
  // Weight annealing: early iterations floor the quadratic form entering the
  // GIG weights at anneal_floor_start, halving the floor every iteration
  // until the distribution floor is reached. Without it, an observation a
  // rough start happens to interpolate carries a weight orders of magnitude
  // above the rest of the sample, pinning the weighted M-step in place. The
  // schedule ends at the exact E-step, so fixed points are unaffected.
  bool anneal_weights = true;
  double anneal_floor_start = 1e-2;
};

struct FitResult {
  QMHMMParams params;
  double loglik = -std::numeric_limits<double>::infinity();
  std::vector<double> loglik_trace;
  int iterations = 0;
  bool converged = false;
  bool retained = false;
  int n_free_params = 0;
  double bic = 0.0, aic = 0.0;
  Eigen::MatrixXd response_covariance;
  Eigen::MatrixXd response_correlation;
  int failed_starts = 0;
  int best_start = -1;
};

// A start that ran into a numerical dead end (collapsed posteriors, singular
// weighted design, degenerate states). fit() drops the start; only if every
// start fails does the error surface to the caller.
struct FitFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Log forward or backward variables of one subject, indexed (t, j, g).
struct LogTrellis {
  int T = 0, M = 0, G = 0;
  std::vector<double> v;

  LogTrellis() = default;
  LogTrellis(int t, int m, int g)
      : T(t), M(m), G(g), v(static_cast<std::size_t>(t) * m * g) {}
  double operator()(int t, int j, int g) const {
    return v[static_cast<std::size_t>((t * M + j) * G + g)];
  }
  double& at(int t, int j, int g) {
    return v[static_cast<std::size_t>((t * M + j) * G + g)];
  }
};

namespace em_detail {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

inline double log_or_neg_inf(double x) {
  return x > 0.0 ? std::log(x) : kNegInf;
}

inline double logsumexp(const double* v, int n) {
  double m = kNegInf;
  for (int i = 0; i < n; ++i) m = std::max(m, v[i]);
  if (m == kNegInf) return kNegInf;
  double s = 0.0;
  for (int i = 0; i < n; ++i) s += std::exp(v[i] - m);
  return m + std::log(s);
}

// Normalizes exp(logvals) in place; returns false when all mass vanished.
inline bool softmax(std::vector<double>& vals, std::size_t begin,
                    std::size_t count) {
  double m = kNegInf;
  for (std::size_t i = 0; i < count; ++i) m = std::max(m, vals[begin + i]);
  if (m == kNegInf || !std::isfinite(m)) return false;
  double s = 0.0;
  for (std::size_t i = 0; i < count; ++i) {
    vals[begin + i] = std::exp(vals[begin + i] - m);
    s += vals[begin + i];
  }
  if (!(s > 0.0)) return false;
  for (std::size_t i = 0; i < count; ++i) vals[begin + i] /= s;
  return true;
}

// Per-subject log density table (and optionally GIG weights), same (t, j, g)
// layout as LogTrellis.
struct DensityTable {
  std::vector<double> logf;
  std::vector<double> gig_c, gig_z;
};

// Location pieces of subject i at time t: x'beta plus per-component and
// per-state contributions. Pieces are computed separately so M-step passes
// can mix freshly updated blocks with previous-iteration ones.
struct LocationParts {
  Eigen::VectorXd xb;                 // p
  std::vector<Eigen::VectorXd> zb;    // G of p
  std::vector<Eigen::VectorXd> wa;    // M of p

  void compute_x(const LongitudinalDataset& data, const QMHMMParams& params,
                 int i, int t) {
    xb.noalias() = params.beta.transpose() * data.subject(i).x.row(t).transpose();
  }

  void compute_z(const LongitudinalDataset& data, const QMHMMParams& params,
                 int i, int t) {
    zb.resize(static_cast<std::size_t>(params.G()));
    if (data.k_z() > 0) {
      const Eigen::VectorXd z = data.z_row(i, t);
      for (int g = 0; g < params.G(); ++g)
        zb[static_cast<std::size_t>(g)].noalias() =
            params.b[static_cast<std::size_t>(g)].transpose() * z;
    } else {
      for (auto& v : zb) v = Eigen::VectorXd::Zero(params.p());
    }
  }

  void compute_w(const LongitudinalDataset& data, const QMHMMParams& params,
                 int i, int t) {
    wa.resize(static_cast<std::size_t>(params.M()));
    if (data.k_w() > 0) {
      const Eigen::VectorXd w = data.w_row(i, t);
      for (int j = 0; j < params.M(); ++j)
        wa[static_cast<std::size_t>(j)].noalias() =
            params.alpha[static_cast<std::size_t>(j)].transpose() * w;
    } else {
      for (auto& v : wa) v = Eigen::VectorXd::Zero(params.p());
    }
  }

  void compute(const LongitudinalDataset& data, const QMHMMParams& params,
               int i, int t) {
    compute_x(data, params, i, t);
    compute_z(data, params, i, t);
    compute_w(data, params, i, t);
  }
};

inline DensityTable density_table(const LongitudinalDataset& data,
                                  const QMHMMParams& params,
                                  const MalEvaluator& ev, int i, bool want_gig,
                                  double weight_floor = kMTildeFloor) {
  const int T = data.n_obs(i);
  const int M = params.M();
  const int G = params.G();
  DensityTable tab;
  tab.logf.resize(static_cast<std::size_t>(T) * M * G);
  if (want_gig) {
    tab.gig_c.resize(tab.logf.size());
    tab.gig_z.resize(tab.logf.size());
  }
  LocationParts parts;
  Eigen::VectorXd resid(params.p());
  for (int t = 0; t < T; ++t) {
    parts.compute(data, params, i, t);
    const Eigen::VectorXd y = data.subject(i).y.row(t).transpose();
    for (int j = 0; j < M; ++j) {
      for (int g = 0; g < G; ++g) {
        resid = y - parts.xb - parts.zb[static_cast<std::size_t>(g)] -
                parts.wa[static_cast<std::size_t>(j)];
        const std::size_t idx = static_cast<std::size_t>((t * M + j) * G + g);
        if (want_gig) {
          GigWeights gw{};
          ev.density_and_gig(resid, &tab.logf[idx], &gw, weight_floor);
          tab.gig_c[idx] = gw.c_hat;
          tab.gig_z[idx] = gw.z_hat;
        } else {
          tab.logf[idx] = ev.log_density_resid(resid);
        }
        if (!std::isfinite(tab.logf[idx]) && tab.logf[idx] != kNegInf)
          throw FitFailure("non-finite density encountered");
      }
    }
  }
  return tab;
}

inline LogTrellis forward_from(const std::vector<double>& logf, int T, int M,
                               int G, const Eigen::VectorXd& log_q,
                               const Eigen::MatrixXd& log_Q) {
  LogTrellis a(T, M, G);
  std::vector<double> scratch(static_cast<std::size_t>(M));
  for (int j = 0; j < M; ++j)
    for (int g = 0; g < G; ++g)
      a.at(0, j, g) = log_q[j] + logf[static_cast<std::size_t>(j * G + g)];
  for (int t = 1; t < T; ++t) {
    for (int g = 0; g < G; ++g) {
      for (int j = 0; j < M; ++j) {
        for (int h = 0; h < M; ++h)
          scratch[static_cast<std::size_t>(h)] = a(t - 1, h, g) + log_Q(h, j);
        a.at(t, j, g) = logsumexp(scratch.data(), M) +
                        logf[static_cast<std::size_t>((t * M + j) * G + g)];
      }
    }
  }
  return a;
}

inline LogTrellis backward_from(const std::vector<double>& logf, int T, int M,
                                int G, const Eigen::MatrixXd& log_Q) {
  LogTrellis b(T, M, G);
  std::vector<double> scratch(static_cast<std::size_t>(M));
  for (int j = 0; j < M; ++j)
    for (int g = 0; g < G; ++g) b.at(T - 1, j, g) = 0.0;
  for (int t = T - 2; t >= 0; --t) {
    for (int g = 0; g < G; ++g) {
      for (int j = 0; j < M; ++j) {
        for (int k = 0; k < M; ++k)
          scratch[static_cast<std::size_t>(k)] =
              log_Q(j, k) + logf[static_cast<std::size_t>(((t + 1) * M + k) * G + g)] +
              b(t + 1, k, g);
        b.at(t, j, g) = logsumexp(scratch.data(), M);
      }
    }
  }
  return b;
}

inline double subject_loglik(const LogTrellis& a, const Eigen::VectorXd& log_pi) {
  std::vector<double> per_g(static_cast<std::size_t>(a.G));
  std::vector<double> per_j(static_cast<std::size_t>(a.M));
  for (int g = 0; g < a.G; ++g) {
    for (int j = 0; j < a.M; ++j) per_j[static_cast<std::size_t>(j)] = a(a.T - 1, j, g);
    per_g[static_cast<std::size_t>(g)] = log_pi[g] + logsumexp(per_j.data(), a.M);
  }
  return logsumexp(per_g.data(), a.G);
}

}  // namespace em_detail

/// Log forward variables a_it(j, g) for one subject.
inline LogTrellis forward(const LongitudinalDataset& data,
                          const QMHMMParams& params, int i) {
  const MalEvaluator ev(params.d, params.psi, params.spec());
  const auto tab = em_detail::density_table(data, params, ev, i, false);
  Eigen::VectorXd log_q(params.M());
  for (int j = 0; j < params.M(); ++j)
    log_q[j] = em_detail::log_or_neg_inf(params.q[j]);
  Eigen::MatrixXd log_Q(params.M(), params.M());
  for (int j = 0; j < params.M(); ++j)
    for (int k = 0; k < params.M(); ++k)
      log_Q(j, k) = em_detail::log_or_neg_inf(params.Q(j, k));
  return em_detail::forward_from(tab.logf, data.n_obs(i), params.M(),
                                 params.G(), log_q, log_Q);
}

/// Log backward variables b_it(j, g); the final slice is identically zero.
inline LogTrellis backward(const LongitudinalDataset& data,
                           const QMHMMParams& params, int i) {
  const MalEvaluator ev(params.d, params.psi, params.spec());
  const auto tab = em_detail::density_table(data, params, ev, i, false);
  Eigen::MatrixXd log_Q(params.M(), params.M());
  for (int j = 0; j < params.M(); ++j)
    for (int k = 0; k < params.M(); ++k)
      log_Q(j, k) = em_detail::log_or_neg_inf(params.Q(j, k));
  return em_detail::backward_from(tab.logf, data.n_obs(i), params.M(),
                                  params.G(), log_Q);
}

/// Observed-data log-likelihood.
inline double observed_loglik(const LongitudinalDataset& data,
                              const QMHMMParams& params) {
  const MalEvaluator ev(params.d, params.psi, params.spec());
  Eigen::VectorXd log_q(params.M()), log_pi(params.G());
  for (int j = 0; j < params.M(); ++j)
    log_q[j] = em_detail::log_or_neg_inf(params.q[j]);
  for (int g = 0; g < params.G(); ++g)
    log_pi[g] = em_detail::log_or_neg_inf(params.pi[g]);
  Eigen::MatrixXd log_Q(params.M(), params.M());
  for (int j = 0; j < params.M(); ++j)
    for (int k = 0; k < params.M(); ++k)
      log_Q(j, k) = em_detail::log_or_neg_inf(params.Q(j, k));
  double ll = 0.0;
  for (int i = 0; i < data.n_subjects(); ++i) {
    const auto tab = em_detail::density_table(data, params, ev, i, false);
    const auto a = em_detail::forward_from(tab.logf, data.n_obs(i), params.M(),
                                           params.G(), log_q, log_Q);
    ll += em_detail::subject_loglik(a, log_pi);
  }
  return ll;
}

/// E-step: posterior expectations of the latent indicators plus the GIG
/// conditional moments, all computed in the log domain. When loglik_out is
/// given it receives the observed log-likelihood at the current parameters.
inline PosteriorSet e_step(const LongitudinalDataset& data,
                           const QMHMMParams& params,
                           double* loglik_out = nullptr,
                           double weight_floor = kMTildeFloor) {
  using namespace em_detail;
  const int N = data.n_subjects();
  const int M = params.M();
  const int G = params.G();
  const MalEvaluator ev(params.d, params.psi, params.spec());

  Eigen::VectorXd log_q(M), log_pi(G);
  for (int j = 0; j < M; ++j) log_q[j] = log_or_neg_inf(params.q[j]);
  for (int g = 0; g < G; ++g) log_pi[g] = log_or_neg_inf(params.pi[g]);
  Eigen::MatrixXd log_Q(M, M);
  for (int j = 0; j < M; ++j)
    for (int k = 0; k < M; ++k) log_Q(j, k) = log_or_neg_inf(params.Q(j, k));

  PosteriorSet post;
  post.M = M;
  post.G = G;
  post.w_hat.resize(N, G);
  post.z_hat.resize(static_cast<std::size_t>(N));
  post.u_hat.resize(static_cast<std::size_t>(N));
  post.v_hat.resize(static_cast<std::size_t>(N));
  post.gig_c.resize(static_cast<std::size_t>(N));
  post.gig_z.resize(static_cast<std::size_t>(N));

  double loglik = 0.0;
  std::vector<double> scratch_g(static_cast<std::size_t>(G));
  std::vector<double> per_j(static_cast<std::size_t>(M));
  for (int i = 0; i < N; ++i) {
    const int T = data.n_obs(i);
    auto tab = density_table(data, params, ev, i, true, weight_floor);
    const auto a = forward_from(tab.logf, T, M, G, log_q, log_Q);
    const auto bb = backward_from(tab.logf, T, M, G, log_Q);

    loglik += subject_loglik(a, log_pi);

    // w_ig
    std::vector<double> wrow(static_cast<std::size_t>(G));
    for (int g = 0; g < G; ++g) {
      for (int j = 0; j < M; ++j) per_j[static_cast<std::size_t>(j)] = a(T - 1, j, g);
      wrow[static_cast<std::size_t>(g)] = log_pi[g] + logsumexp(per_j.data(), M);
    }
    if (!softmax(wrow, 0, static_cast<std::size_t>(G)))
      throw FitFailure("component posterior collapsed");
    for (int g = 0; g < G; ++g) post.w_hat(i, g) = wrow[static_cast<std::size_t>(g)];

    // z_itjg and u_itj
    auto& zi = post.z_hat[static_cast<std::size_t>(i)];
    auto& ui = post.u_hat[static_cast<std::size_t>(i)];
    zi.resize(static_cast<std::size_t>(T) * M * G);
    ui.assign(static_cast<std::size_t>(T) * M, 0.0);
    for (int t = 0; t < T; ++t) {
      for (int j = 0; j < M; ++j)
        for (int g = 0; g < G; ++g)
          zi[static_cast<std::size_t>((t * M + j) * G + g)] =
              a(t, j, g) + bb(t, j, g) + log_pi[g];
      if (!softmax(zi, static_cast<std::size_t>(t) * M * G,
                   static_cast<std::size_t>(M) * G))
        throw FitFailure("state posterior collapsed");
      for (int j = 0; j < M; ++j) {
        double s = 0.0;
        for (int g = 0; g < G; ++g)
          s += zi[static_cast<std::size_t>((t * M + j) * G + g)];
        ui[static_cast<std::size_t>(t * M + j)] = s;
      }
    }

    // v_itjk for t >= 2
    auto& vi = post.v_hat[static_cast<std::size_t>(i)];
    vi.resize(static_cast<std::size_t>(std::max(T - 1, 0)) * M * M);
    for (int t = 1; t < T; ++t) {
      for (int j = 0; j < M; ++j) {
        for (int k = 0; k < M; ++k) {
          for (int g = 0; g < G; ++g)
            scratch_g[static_cast<std::size_t>(g)] =
                a(t - 1, j, g) + log_Q(j, k) +
                tab.logf[static_cast<std::size_t>((t * M + k) * G + g)] +
                bb(t, k, g) + log_pi[g];
          vi[static_cast<std::size_t>(((t - 1) * M + j) * M + k)] =
              logsumexp(scratch_g.data(), G);
        }
      }
      if (!softmax(vi, static_cast<std::size_t>(t - 1) * M * M,
                   static_cast<std::size_t>(M) * M))
        throw FitFailure("transition posterior collapsed");
    }

    post.gig_c[static_cast<std::size_t>(i)] = std::move(tab.gig_c);
    post.gig_z[static_cast<std::size_t>(i)] = std::move(tab.gig_z);
  }
  if (loglik_out) *loglik_out = loglik;
  return post;
}

namespace em_detail {

inline Eigen::MatrixXd solve_gram(const Eigen::MatrixXd& gram,
                                  const Eigen::MatrixXd& rhs,
                                  const char* what) {
  Eigen::LLT<Eigen::MatrixXd> llt(gram);
  if (llt.info() != Eigen::Success)
    throw FitFailure(std::string("singular weighted design in ") + what);
  return llt.solve(rhs);
}

// Projects a symmetric matrix onto the correlation matrices: rescale to unit
// diagonal, clip eigenvalues from below, rescale again.
inline Eigen::MatrixXd nearest_correlation(const Eigen::MatrixXd& sym) {
  const Eigen::Index p = sym.rows();
  for (Eigen::Index i = 0; i < p; ++i)
    if (!(sym(i, i) > 0.0))
      throw FitFailure("scale update produced a nonpositive variance");
  Eigen::VectorXd inv_sd = sym.diagonal().cwiseSqrt().cwiseInverse();
  Eigen::MatrixXd c = inv_sd.asDiagonal() * sym * inv_sd.asDiagonal();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(c);
  if (es.info() != Eigen::Success)
    throw FitFailure("correlation eigendecomposition failed");
  if (es.eigenvalues().minCoeff() < 1e-8) {
    const Eigen::VectorXd ev = es.eigenvalues().cwiseMax(1e-8);
    c = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
    const Eigen::VectorXd s = c.diagonal().cwiseSqrt().cwiseInverse();
    c = s.asDiagonal() * c * s.asDiagonal();
  }
  for (Eigen::Index i = 0; i < p; ++i) c(i, i) = 1.0;
  return 0.5 * (c + c.transpose());
}

}  // namespace em_detail

/// Closed-form M-step. Updates, in order: the chain and mixing laws, beta,
/// the mixture locations, the state coefficients, then (unless frozen) the
/// correlation and the check-function scale; finally restores the centering
/// constraint on the mixture locations.
inline QMHMMParams m_step(const LongitudinalDataset& data,
                          const PosteriorSet& post, const QMHMMParams& prev,
                          bool freeze_scale = false) {
  using namespace em_detail;
  const int N = data.n_subjects();
  const int M = prev.M();
  const int G = prev.G();
  const int p = prev.p();
  const int k = data.k();
  const int kz = data.k_z();
  const int kw = data.k_w();
  const double sumT = static_cast<double>(data.total_obs());

  const QuantileSpec spec = prev.spec();
  const Eigen::VectorXd xi = spec.xi_tilde();
  const Eigen::VectorXd lam = spec.lambda();
  const Eigen::VectorXd xid = xi.cwiseProduct(prev.d);

  QMHMMParams next = prev;

  // chain and mixture laws
  for (int j = 0; j < M; ++j) {
    double s = 0.0;
    for (int i = 0; i < N; ++i) s += post.u(i, 0, j);
    next.q[j] = s / N;
  }
  Eigen::MatrixXd vsum = Eigen::MatrixXd::Zero(M, M);
  for (int i = 0; i < N; ++i)
    for (int t = 1; t < data.n_obs(i); ++t)
      for (int j = 0; j < M; ++j)
        for (int kk = 0; kk < M; ++kk) vsum(j, kk) += post.v(i, t, j, kk);
  for (int j = 0; j < M; ++j) {
    const double rs = vsum.row(j).sum();
    if (rs > 0.0) next.Q.row(j) = vsum.row(j) / rs;
    // states never left from keep their previous transition law
  }
  for (int g = 0; g < G; ++g) next.pi[g] = post.w_hat.col(g).sum() / N;

  // beta, holding the previous mixture locations and state coefficients
  {
    Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(k, k);
    Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(k, p);
    LocationParts parts;
    Eigen::VectorXd acc(p);
    for (int i = 0; i < N; ++i) {
      for (int t = 0; t < data.n_obs(i); ++t) {
        parts.compute_z(data, prev, i, t);
        parts.compute_w(data, prev, i, t);
        const Eigen::VectorXd y = data.subject(i).y.row(t).transpose();
        double s_it = 0.0;
        acc.setZero();
        for (int j = 0; j < M; ++j) {
          for (int g = 0; g < G; ++g) {
            const double wz = post.z(i, t, j, g) *
                              post.gig_z[static_cast<std::size_t>(i)]
                                        [static_cast<std::size_t>((t * M + j) * G + g)];
            s_it += wz;
            acc += wz * (y - parts.zb[static_cast<std::size_t>(g)] -
                         parts.wa[static_cast<std::size_t>(j)]);
          }
        }
        const Eigen::VectorXd x = data.subject(i).x.row(t).transpose();
        gram.noalias() += s_it * x * x.transpose();
        rhs.noalias() += x * (acc - xid).transpose();
      }
    }
    next.beta = solve_gram(gram, rhs, "beta");
  }

  // mixture locations, using the new beta and the previous alpha
  if (kz > 0) {
    std::vector<Eigen::MatrixXd> gram(static_cast<std::size_t>(G),
                                      Eigen::MatrixXd::Zero(kz, kz));
    std::vector<Eigen::MatrixXd> rhs(static_cast<std::size_t>(G),
                                     Eigen::MatrixXd::Zero(kz, p));
    LocationParts parts;
    Eigen::VectorXd acc(p);
    for (int i = 0; i < N; ++i) {
      for (int t = 0; t < data.n_obs(i); ++t) {
        parts.compute_x(data, next, i, t);
        parts.compute_w(data, prev, i, t);
        const Eigen::VectorXd y = data.subject(i).y.row(t).transpose();
        const Eigen::VectorXd z = data.z_row(i, t);
        for (int g = 0; g < G; ++g) {
          double wsum = 0.0, usum = 0.0;
          acc.setZero();
          for (int j = 0; j < M; ++j) {
            const double zp = post.z(i, t, j, g);
            const double wz = zp * post.gig_z[static_cast<std::size_t>(i)]
                                             [static_cast<std::size_t>((t * M + j) * G + g)];
            wsum += wz;
            usum += zp;
            acc += wz * (y - parts.xb - parts.wa[static_cast<std::size_t>(j)]);
          }
          gram[static_cast<std::size_t>(g)].noalias() += wsum * z * z.transpose();
          rhs[static_cast<std::size_t>(g)].noalias() +=
              z * (acc - usum * xid).transpose();
        }
      }
    }
    for (int g = 0; g < G; ++g) {
      if (next.pi[g] < 1e-12) continue;  // dead component, leave untouched
      next.b[static_cast<std::size_t>(g)] =
          solve_gram(gram[static_cast<std::size_t>(g)],
                     rhs[static_cast<std::size_t>(g)], "mixture locations");
    }
  }

  // state coefficients, using the new beta and new mixture locations
  if (kw > 0) {
    std::vector<Eigen::MatrixXd> gram(static_cast<std::size_t>(M),
                                      Eigen::MatrixXd::Zero(kw, kw));
    std::vector<Eigen::MatrixXd> rhs(static_cast<std::size_t>(M),
                                     Eigen::MatrixXd::Zero(kw, p));
    LocationParts parts;
    Eigen::VectorXd acc(p);
    for (int i = 0; i < N; ++i) {
      for (int t = 0; t < data.n_obs(i); ++t) {
        parts.compute_x(data, next, i, t);
        parts.compute_z(data, next, i, t);
        const Eigen::VectorXd y = data.subject(i).y.row(t).transpose();
        const Eigen::VectorXd w = data.w_row(i, t);
        for (int j = 0; j < M; ++j) {
          double wsum = 0.0;
          acc.setZero();
          for (int g = 0; g < G; ++g) {
            const double wz = post.z(i, t, j, g) *
                              post.gig_z[static_cast<std::size_t>(i)]
                                        [static_cast<std::size_t>((t * M + j) * G + g)];
            wsum += wz;
            acc += wz * (y - parts.xb - parts.zb[static_cast<std::size_t>(g)]);
          }
          const double u_itj = post.u(i, t, j);
          gram[static_cast<std::size_t>(j)].noalias() += wsum * w * w.transpose();
          rhs[static_cast<std::size_t>(j)].noalias() +=
              w * (acc - u_itj * xid).transpose();
        }
      }
    }
    for (int j = 0; j < M; ++j)
      next.alpha[static_cast<std::size_t>(j)] =
          solve_gram(gram[static_cast<std::size_t>(j)],
                     rhs[static_cast<std::size_t>(j)], "state coefficients");
  }

  // scale matrix and check-function scale at the fully updated location
  if (!freeze_scale) {
    Eigen::MatrixXd sig1 = Eigen::MatrixXd::Zero(p, p);
    Eigen::VectorXd rho = Eigen::VectorXd::Zero(p);
    Eigen::VectorXd dsum = Eigen::VectorXd::Zero(p);
    double scz = 0.0;
    const Eigen::VectorXd dinv = prev.d.cwiseInverse();
    LocationParts parts;
    Eigen::VectorXd r(p), dr(p);
    for (int i = 0; i < N; ++i) {
      for (int t = 0; t < data.n_obs(i); ++t) {
        parts.compute(data, next, i, t);
        const Eigen::VectorXd y = data.subject(i).y.row(t).transpose();
        for (int j = 0; j < M; ++j) {
          for (int g = 0; g < G; ++g) {
            const std::size_t idx = static_cast<std::size_t>((t * M + j) * G + g);
            const double zp = post.z(i, t, j, g);
            if (zp == 0.0) continue;
            r = y - parts.xb - parts.zb[static_cast<std::size_t>(g)] -
                parts.wa[static_cast<std::size_t>(j)];
            const double wz = zp * post.gig_z[static_cast<std::size_t>(i)][idx];
            dr = dinv.cwiseProduct(r);
            sig1.noalias() += wz * dr * dr.transpose();
            scz += zp * post.gig_c[static_cast<std::size_t>(i)][idx];
            rho += zp * r;
            for (int c = 0; c < p; ++c)
              dsum[c] += zp * check_loss(r[c], prev.tau[c]);
          }
        }
      }
    }
    Eigen::MatrixXd sigma_hat =
        (sig1 + scz * xi * xi.transpose() -
         2.0 * dinv.cwiseProduct(rho) * xi.transpose()) /
        sumT;
    const Eigen::VectorXd lam_inv = lam.cwiseInverse();
    Eigen::MatrixXd psi_tilde =
        lam_inv.asDiagonal() * sigma_hat * lam_inv.asDiagonal();
    psi_tilde = 0.5 * (psi_tilde + psi_tilde.transpose());
    next.psi = em_detail::nearest_correlation(psi_tilde);
    next.d = (dsum / sumT).cwiseMax(1e-12);
  }

  // restore the centering constraint, shifting the compensation into beta
  // (and into the state intercept for a random intercept)
  if (kz > 0 && G > 0) {
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(kz, p);
    for (int g = 0; g < G; ++g)
      m += next.pi[g] * next.b[static_cast<std::size_t>(g)];
    for (int g = 0; g < G; ++g) next.b[static_cast<std::size_t>(g)] -= m;
    const auto& zc = data.z_cols();
    for (std::size_t c = 0; c < zc.size(); ++c)
      next.beta.row(zc[c]) += m.row(static_cast<Eigen::Index>(c));
    if (data.z_intercept()) {
      for (int j = 0; j < M; ++j)
        next.alpha[static_cast<std::size_t>(j)].row(kw - 1) += m.row(kz - 1);
    }
  }
  return next;
}

/// Largest absolute entry-wise change between two parameter sets.
inline double max_param_change(const QMHMMParams& a, const QMHMMParams& b) {
  double m = 0.0;
  auto upd = [&m](const Eigen::MatrixXd& x, const Eigen::MatrixXd& y) {
    if (x.size() > 0) m = std::max(m, (x - y).cwiseAbs().maxCoeff());
  };
  upd(a.beta, b.beta);
  for (std::size_t g = 0; g < a.b.size(); ++g) upd(a.b[g], b.b[g]);
  upd(a.pi, b.pi);
  for (std::size_t j = 0; j < a.alpha.size(); ++j) upd(a.alpha[j], b.alpha[j]);
  upd(a.q, b.q);
  upd(a.Q, b.Q);
  upd(a.d, b.d);
  upd(a.psi, b.psi);
  return m;
}

namespace em_detail {

inline double quantile_of(std::vector<double> v, double level) {
  std::sort(v.begin(), v.end());
  const double pos = level * (static_cast<double>(v.size()) - 1.0);
  const std::size_t lo = static_cast<std::size_t>(pos);
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return v[lo] * (1.0 - frac) + v[hi] * frac;
}

}  // namespace em_detail

/// Deterministic starting values for one EM start: beta from a short pooled
/// single-state fit, state coefficients from spread residual quantiles,
/// mixture locations from centered Gaussian draws.
inline QMHMMParams initialize(const LongitudinalDataset& data,
                              const QuantileSpec& spec, int G, int M,
                              int start_index, std::uint64_t seed) {
  const int p = data.p();
  const int k = data.k();
  const int kz = data.k_z();
  const int kw = data.k_w();
  const int N = data.n_subjects();
  RandomStream rs(derive_seed(seed, 0x57A2u, static_cast<std::uint64_t>(start_index)));

  const Eigen::VectorXd xi = spec.xi_tilde();
  const Eigen::MatrixXd psi0 = Eigen::MatrixXd::Identity(p, p);

  // pooled location-only fit: ridge start, then three weighted iterations
  Eigen::MatrixXd gram0 = 1e-8 * Eigen::MatrixXd::Identity(k, k);
  Eigen::MatrixXd rhs0 = Eigen::MatrixXd::Zero(k, p);
  for (int i = 0; i < N; ++i) {
    const auto& s = data.subject(i);
    gram0.noalias() += s.x.transpose() * s.x;
    rhs0.noalias() += s.x.transpose() * s.y;
  }
  Eigen::MatrixXd beta = gram0.ldlt().solve(rhs0);

  auto check_scale = [&](const Eigen::MatrixXd& bta) {
    Eigen::VectorXd dsum = Eigen::VectorXd::Zero(p);
    for (int i = 0; i < N; ++i) {
      const auto& s = data.subject(i);
      const Eigen::MatrixXd resid = s.y - s.x * bta;
      for (Eigen::Index t = 0; t < resid.rows(); ++t)
        for (int c = 0; c < p; ++c)
          dsum[c] += check_loss(resid(t, c), spec.tau()[c]);
    }
    return (dsum / data.total_obs()).cwiseMax(1e-8).eval();
  };
  Eigen::VectorXd d = check_scale(beta);

  for (int iter = 0; iter < 3; ++iter) {
    const MalEvaluator ev(d, psi0, spec);
    const Eigen::VectorXd xid = xi.cwiseProduct(d);
    Eigen::MatrixXd gram = 1e-8 * Eigen::MatrixXd::Identity(k, k);
    Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(k, p);
    for (int i = 0; i < N; ++i) {
      const auto& s = data.subject(i);
      for (Eigen::Index t = 0; t < s.y.rows(); ++t) {
        const Eigen::VectorXd x = s.x.row(t).transpose();
        const Eigen::VectorXd y = s.y.row(t).transpose();
        const Eigen::VectorXd resid = y - beta.transpose() * x;
        GigWeights gw{};
        double lnf;
        ev.density_and_gig(resid, &lnf, &gw, 1e-2);
        gram.noalias() += gw.z_hat * x * x.transpose();
        rhs.noalias() += x * (gw.z_hat * y - xid).transpose();
      }
    }
    beta = gram.ldlt().solve(rhs);
    d = check_scale(beta);
  }

  // residual spread per outcome
  std::vector<std::vector<double>> resid_cols(static_cast<std::size_t>(p));
  for (int i = 0; i < N; ++i) {
    const auto& s = data.subject(i);
    const Eigen::MatrixXd resid = s.y - s.x * beta;
    for (Eigen::Index t = 0; t < resid.rows(); ++t)
      for (int c = 0; c < p; ++c)
        resid_cols[static_cast<std::size_t>(c)].push_back(resid(t, c));
  }

  QMHMMParams params;
  params.tau = spec.tau();
  params.beta = beta;
  params.psi = psi0;
  params.pi = Eigen::VectorXd::Constant(G, 1.0 / G);
  params.q = Eigen::VectorXd::Constant(M, 1.0 / M);
  if (M == 1) {
    params.Q = Eigen::MatrixXd::Ones(1, 1);
  } else {
    params.Q = Eigen::MatrixXd::Constant(M, M, 0.2 / (M - 1));
    params.Q.diagonal().setConstant(0.8);
  }

  Eigen::VectorXd raw_sd(p);
  for (int c = 0; c < p; ++c) {
    const auto& col = resid_cols[static_cast<std::size_t>(c)];
    double mean = 0.0;
    for (double v : col) mean += v;
    mean /= static_cast<double>(col.size());
    double var = 0.0;
    for (double v : col) var += (v - mean) * (v - mean);
    var /= std::max<std::size_t>(col.size() - 1, 1);
    raw_sd[c] = std::sqrt(std::max(var, 1e-12));
  }

  params.alpha.assign(static_cast<std::size_t>(M), Eigen::MatrixXd::Zero(kw, p));
  const int wrow = data.w_intercept() ? kw - 1 : 0;
  if (kw > 0) {
    for (int j = 0; j < M; ++j) {
      for (int c = 0; c < p; ++c) {
        const double base = em_detail::quantile_of(
            resid_cols[static_cast<std::size_t>(c)], (j + 0.5) / M);
        const double jitter =
            start_index > 0 ? 0.3 * raw_sd[c] * rs.normal() : 0.0;
        params.alpha[static_cast<std::size_t>(j)](wrow, c) = base + jitter;
      }
    }
  }

  // residual scale net of the provisional state levels; the raw pooled
  // residuals are dominated by the state separation and would oversize
  // both the mixture draws and the starting scale
  std::vector<std::vector<double>> adj_cols(static_cast<std::size_t>(p));
  for (std::size_t n = 0; n < resid_cols[0].size(); ++n) {
    int best_j = 0;
    if (kw > 0 && M > 1) {
      double best_dist = std::numeric_limits<double>::infinity();
      for (int j = 0; j < M; ++j) {
        double dist = 0.0;
        for (int c = 0; c < p; ++c) {
          const double dev = resid_cols[static_cast<std::size_t>(c)][n] -
                             params.alpha[static_cast<std::size_t>(j)](wrow, c);
          dist += dev * dev;
        }
        if (dist < best_dist) {
          best_dist = dist;
          best_j = j;
        }
      }
    }
    for (int c = 0; c < p; ++c) {
      double v = resid_cols[static_cast<std::size_t>(c)][n];
      if (kw > 0 && M > 1)
        v -= params.alpha[static_cast<std::size_t>(best_j)](wrow, c);
      adj_cols[static_cast<std::size_t>(c)].push_back(v);
    }
  }
  Eigen::VectorXd adj_sd(p);
  Eigen::VectorXd d_adj(p);
  for (int c = 0; c < p; ++c) {
    const auto& col = adj_cols[static_cast<std::size_t>(c)];
    double mean = 0.0, loss = 0.0;
    for (double v : col) mean += v;
    mean /= static_cast<double>(col.size());
    double var = 0.0;
    for (double v : col) {
      var += (v - mean) * (v - mean);
      loss += check_loss(v, spec.tau()[c]);
    }
    var /= std::max<std::size_t>(col.size() - 1, 1);
    adj_sd[c] = std::sqrt(std::max(var, 1e-12));
    d_adj[c] = std::max(loss / static_cast<double>(col.size()), 1e-8);
  }
  params.d = d_adj;

  params.b.assign(static_cast<std::size_t>(G), Eigen::MatrixXd::Zero(kz, p));
  if (kz > 0 && G > 1) {
    for (int g = 0; g < G; ++g)
      for (int r = 0; r < kz; ++r)
        for (int c = 0; c < p; ++c)
          params.b[static_cast<std::size_t>(g)](r, c) =
              0.5 * adj_sd[c] * rs.normal();
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(kz, p);
    for (int g = 0; g < G; ++g) m += params.b[static_cast<std::size_t>(g)];
    m /= static_cast<double>(G);
    for (int g = 0; g < G; ++g) params.b[static_cast<std::size_t>(g)] -= m;
  }
  return params;
}

namespace em_detail {

struct StartResult {
  QMHMMParams params;
  double loglik;
  std::vector<double> trace;
  int iterations;
  bool converged;
  bool retained;
};

// Continuation schedule for the E-step weight floor: run to convergence at
// the softened levels, then at the exact floor. The final stage is the
// unmodified EM, so the point the loop settles in is a fixed point of the
// exact iteration.
inline std::vector<double> anneal_schedule(const FitConfig& cfg) {
  std::vector<double> floors;
  if (cfg.anneal_weights)
    for (double f : {1e-2, 1e-4})
      if (f <= cfg.anneal_floor_start * (1.0 + 1e-9) && f > kMTildeFloor)
        floors.push_back(f);
  floors.push_back(kMTildeFloor);
  return floors;
}

// Alternates E and M steps through the annealing stages within a total
// iteration budget. The recorded trace holds exact observed log-likelihoods
// (the weight floor never enters the forward recursion).
inline StartResult em_loop(const LongitudinalDataset& data,
                           QMHMMParams params, const FitConfig& cfg) {
  const int M = params.M();
  StartResult out;
  out.converged = false;
  out.iterations = 0;
  const std::vector<double> floors = anneal_schedule(cfg);
  int used = 0;
  for (std::size_t stage = 0; stage < floors.size(); ++stage) {
    const bool final_stage = stage + 1 == floors.size();
    // softened stages get a bounded share so the exact stage always runs
    const int stage_cap =
        final_stage ? cfg.max_iter
                    : std::min(cfg.max_iter, std::max(50, cfg.max_iter / 3));
    bool stage_done = false;
    int in_stage = 0;
    QMHMMParams prev = params;
    while (used < cfg.max_iter && in_stage < stage_cap && !stage_done) {
      double ll = 0.0;
      PosteriorSet post = e_step(data, params, &ll, floors[stage]);
      // With the scale frozen every exact step ascends; a drop can only come
      // from an observation crossing the tie floor, where the iteration
      // oscillates microscopically around a pinned solution. Step back to
      // the better iterate and stop the stage there.
      if (cfg.freeze_scale && !out.trace.empty() &&
          ll < out.trace.back() - 1e-9 * std::fabs(out.trace.back())) {
        params = prev;
        stage_done = true;
        break;
      }
      // a state whose posterior mass vanished everywhere cannot be updated
      for (int j = 0; j < M; ++j) {
        double mass = 0.0;
        for (int i = 0; i < data.n_subjects(); ++i)
          for (int t = 0; t < data.n_obs(i); ++t) mass += post.u(i, t, j);
        if (mass < 1e-8) throw FitFailure("hidden state collapsed");
      }
      out.trace.push_back(ll);
      prev = params;
      QMHMMParams next = m_step(data, post, params, cfg.freeze_scale);
      const double delta = max_param_change(params, next);
      params = std::move(next);
      ++used;
      ++in_stage;
      stage_done = delta < cfg.tol;
    }
    if (final_stage) out.converged = stage_done;
  }
  out.iterations = used;
  out.loglik = observed_loglik(data, params);
  out.trace.push_back(out.loglik);
  out.retained = params.pi.minCoeff() > cfg.retain_floor &&
                 params.q.minCoeff() > cfg.retain_floor;
  out.params = std::move(params);
  return out;
}

inline StartResult run_start(const LongitudinalDataset& data,
                             const QuantileSpec& spec, int G, int M,
                             const FitConfig& cfg, int start_index) {
  return em_loop(data, initialize(data, spec, G, M, start_index, cfg.seed), cfg);
}

}  // namespace em_detail

/// Multi-start EM fit. Starts run independently (in parallel when allowed);
/// among the retained solutions the one with the highest observed
/// log-likelihood wins, falling back to the best unretained solution.
inline FitResult fit(const LongitudinalDataset& data, const QuantileSpec& spec,
                     int G, int M, const FitConfig& config) {
  if (G < 1 || M < 1)
    throw std::invalid_argument("fit: G and M must be at least 1");
  if (G >= data.n_subjects())
    throw std::invalid_argument("fit: need fewer mixture components than subjects");
  if (spec.dim() != data.p())
    throw std::invalid_argument("fit: quantile levels do not match outcomes");

  std::vector<std::optional<em_detail::StartResult>> starts(
      static_cast<std::size_t>(config.n_starts));
  parallel_for(
      config.n_starts,
      [&](int s) {
        try {
          starts[static_cast<std::size_t>(s)] =
              em_detail::run_start(data, spec, G, M, config, s);
        } catch (const FitFailure&) {
          starts[static_cast<std::size_t>(s)] = std::nullopt;
        }
      },
      config.n_threads);

  int best = -1, failed = 0;
  bool best_retained = false;
  for (int s = 0; s < config.n_starts; ++s) {
    const auto& r = starts[static_cast<std::size_t>(s)];
    if (!r) {
      ++failed;
      continue;
    }
    if (best < 0 || (r->retained && !best_retained) ||
        (r->retained == best_retained &&
         r->loglik > starts[static_cast<std::size_t>(best)]->loglik)) {
      best = s;
      best_retained = r->retained;
    }
  }
  if (best < 0) throw std::runtime_error("fit: all EM starts failed numerically");

  em_detail::StartResult& win = *starts[static_cast<std::size_t>(best)];
  FitResult res;
  res.params = std::move(win.params);
  res.loglik = win.loglik;
  res.loglik_trace = std::move(win.trace);
  res.iterations = win.iterations;
  res.converged = win.converged;
  res.retained = win.retained;
  res.failed_starts = failed;
  res.best_start = best;
  res.n_free_params =
      n_free_params(data.p(), data.k(), data.k_z(), data.k_w(), G, M);
  res.bic = -2.0 * res.loglik +
            std::log(static_cast<double>(data.n_subjects())) * res.n_free_params;
  res.aic = -2.0 * res.loglik + 2.0 * res.n_free_params;
  MALParams mal{Eigen::VectorXd::Zero(data.p()), res.params.d, res.params.psi};
  res.response_covariance = mal_covariance(mal, spec);
  res.response_correlation = mal_correlation(mal, spec);
  return res;
}

}  // namespace qmhmm
