#pragma once

// Multivariate Asymmetric Laplace distribution under the quantile-regression
// identifiability constraints: the skewness vector and the diagonal of the
// correlation scale are fixed functions of the quantile levels, which makes
// each component of the location the tau_j-th marginal quantile.

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <cmath>
#include <stdexcept>
#include <utility>

#include "qmhmm/bessel.hpp"
#include "qmhmm/rng.hpp"

namespace qmhmm {

// Observations landing exactly on the location would make the GIG weights
// diverge; the quadratic form is clamped below at this floor.
inline constexpr double kMTildeFloor = 1e-10;

class QuantileSpec {
 public:
  explicit QuantileSpec(Eigen::VectorXd tau) : tau_(std::move(tau)) {
    if (tau_.size() < 1)
      throw std::invalid_argument("QuantileSpec: need at least one level");
    for (Eigen::Index j = 0; j < tau_.size(); ++j)
      if (!(tau_[j] > 0.0 && tau_[j] < 1.0))
        throw std::invalid_argument(
            "QuantileSpec: quantile levels must lie strictly in (0, 1)");
  }

  int dim() const { return static_cast<int>(tau_.size()); }
  const Eigen::VectorXd& tau() const { return tau_; }
  double nu() const { return 0.5 * (2.0 - dim()); }

  // skewness constants (1 - 2 tau_j) / (tau_j (1 - tau_j))
  Eigen::VectorXd xi_tilde() const {
    Eigen::VectorXd xi(tau_.size());
    for (Eigen::Index j = 0; j < tau_.size(); ++j)
      xi[j] = (1.0 - 2.0 * tau_[j]) / (tau_[j] * (1.0 - tau_[j]));
    return xi;
  }

  // diagonal of Lambda: sigma_j = sqrt(2 / (tau_j (1 - tau_j)))
  Eigen::VectorXd lambda() const {
    Eigen::VectorXd lam(tau_.size());
    for (Eigen::Index j = 0; j < tau_.size(); ++j)
      lam[j] = std::sqrt(2.0 / (tau_[j] * (1.0 - tau_[j])));
    return lam;
  }

 private:
  Eigen::VectorXd tau_;
};

struct MALParams {
  Eigen::VectorXd mu;   // location
  Eigen::VectorXd d;    // diagonal of D, positive
  Eigen::MatrixXd psi;  // correlation matrix
};

struct GigWeights {
  double c_hat;  // E[C | y]
  double z_hat;  // E[1/C | y]
};

inline double check_loss(double u, double tau) {
  return u * (tau - (u < 0.0 ? 1.0 : 0.0));
}

namespace mal_detail {

inline void require_correlation(const Eigen::MatrixXd& psi, double tol = 1e-8) {
  if (psi.rows() != psi.cols())
    throw std::invalid_argument("psi must be square");
  for (Eigen::Index i = 0; i < psi.rows(); ++i) {
    if (std::fabs(psi(i, i) - 1.0) > tol)
      throw std::invalid_argument("psi must have a unit diagonal");
    for (Eigen::Index j = 0; j < i; ++j)
      if (std::fabs(psi(i, j) - psi(j, i)) > tol)
        throw std::invalid_argument("psi must be symmetric");
  }
}

}  // namespace mal_detail

// Caches every parameter-dependent quantity of the density so that repeated
// evaluations (the EM inner loop) only pay for the residual-dependent part.
class MalEvaluator {
 public:
  MalEvaluator(const Eigen::VectorXd& d, const Eigen::MatrixXd& psi,
               const QuantileSpec& spec)
      : p_(spec.dim()), nu_(spec.nu()) {
    if (d.size() != p_ || psi.rows() != p_)
      throw std::invalid_argument("MAL parameter dimension mismatch");
    for (Eigen::Index j = 0; j < d.size(); ++j)
      if (!(d[j] > 0.0))
        throw std::invalid_argument("MAL scale entries must be positive");
    mal_detail::require_correlation(psi);

    const Eigen::VectorXd lam = spec.lambda();
    const Eigen::VectorXd xi = spec.xi_tilde();
    sigma_ = lam.asDiagonal() * psi * lam.asDiagonal();
    Eigen::LLT<Eigen::MatrixXd> llt(sigma_);
    if (llt.info() != Eigen::Success)
      throw std::invalid_argument("psi is not positive definite");
    sigma_inv_ = llt.solve(Eigen::MatrixXd::Identity(p_, p_));
    double log_det_sigma = 0.0;
    for (int j = 0; j < p_; ++j)
      log_det_sigma += 2.0 * std::log(llt.matrixL()(j, j));
    double log_det_d = 0.0;
    for (int j = 0; j < p_; ++j) log_det_d += std::log(d[j]);

    d_ = d;
    dsd_inv_ = d.cwiseInverse().asDiagonal() * sigma_inv_ *
               d.cwiseInverse().asDiagonal();
    skew_ = d.cwiseInverse().asDiagonal() * (sigma_inv_ * xi);
    d_tilde_ = xi.dot(sigma_inv_ * xi);
    log_norm_ = std::log(2.0) - 0.5 * p_ * std::log(2.0 * 3.14159265358979323846) -
                0.5 * (log_det_sigma + 2.0 * log_det_d);
  }

  int dim() const { return p_; }
  double nu() const { return nu_; }
  double d_tilde() const { return d_tilde_; }
  const Eigen::MatrixXd& sigma() const { return sigma_; }
  const Eigen::MatrixXd& sigma_inv() const { return sigma_inv_; }
  const Eigen::VectorXd& d() const { return d_; }

  double m_tilde(const Eigen::VectorXd& resid) const {
    return resid.dot(dsd_inv_ * resid);
  }

  double log_density_resid(const Eigen::VectorXd& resid) const {
    double lnf;
    core(resid, &lnf, nullptr, kMTildeFloor);
    return lnf;
  }

  double log_density(const Eigen::VectorXd& y, const Eigen::VectorXd& mu) const {
    if (y.size() != p_ || mu.size() != p_)
      throw std::invalid_argument("MAL dimension mismatch");
    return log_density_resid(y - mu);
  }

  // Density and conditional mixing-variable moments in one Bessel
  // evaluation. weight_floor >= kMTildeFloor bounds the quadratic form used
  // for the moments only; callers anneal it toward kMTildeFloor so that
  // near-interpolated observations cannot monopolize early M-steps.
  void density_and_gig(const Eigen::VectorXd& resid, double* log_density,
                       GigWeights* gig,
                       double weight_floor = kMTildeFloor) const {
    core(resid, log_density, gig, weight_floor);
  }

 private:
  void core(const Eigen::VectorXd& resid, double* log_density, GigWeights* gig,
            double weight_floor) const {
    double m = m_tilde(resid);
    if (m < kMTildeFloor) m = kMTildeFloor;
    const double a = 2.0 + d_tilde_;
    const double s = std::sqrt(a * m);
    const auto [lk, lk1] = log_bessel_k_pair(nu_, s);
    if (log_density)
      *log_density = log_norm_ + skew_.dot(resid) +
                     0.5 * nu_ * (std::log(m) - std::log(a)) + lk;
    if (gig) {
      double mw = m, lkw = lk, lk1w = lk1;
      if (m < weight_floor) {
        mw = weight_floor;
        const auto pair_w = log_bessel_k_pair(nu_, std::sqrt(a * mw));
        lkw = pair_w.first;
        lk1w = pair_w.second;
      }
      const double ratio = std::exp(lk1w - lkw);
      gig->c_hat = std::sqrt(mw / a) * ratio;
      gig->z_hat = std::sqrt(a / mw) * ratio - 2.0 * nu_ / mw;
    }
  }

  int p_;
  double nu_;
  Eigen::VectorXd d_;
  Eigen::MatrixXd sigma_, sigma_inv_, dsd_inv_;
  Eigen::VectorXd skew_;
  double d_tilde_;
  double log_norm_;
};

inline double mal_log_density(const Eigen::VectorXd& y, const MALParams& params,
                              const QuantileSpec& spec) {
  MalEvaluator ev(params.d, params.psi, spec);
  return ev.log_density(y, params.mu);
}

/// E[C | .] and E[1/C | .] of the GIG(nu, 2 + d_tilde, m_tilde) conditional.
inline GigWeights gig_expectations(double m_tilde, double d_tilde, double nu) {
  if (!(m_tilde >= 0.0) || !(d_tilde >= 0.0) || !std::isfinite(nu))
    throw std::domain_error("gig_expectations: inputs must be nonnegative");
  if (m_tilde < kMTildeFloor) m_tilde = kMTildeFloor;
  const double a = 2.0 + d_tilde;
  const double s = std::sqrt(a * m_tilde);
  const double up = bessel_k_ratio(nu, s);  // K_{nu+1} / K_nu
  // E[1/C] via K_{nu-1}/K_nu, which is positive term by term; the printed
  // form sqrt(a/m) K_{nu+1}/K_nu - 2 nu / m is identical by the recurrence
  // K_{nu+1} = K_{nu-1} + (2 nu / s) K_nu but cancels for large nu.
  const double down = 1.0 / bessel_k_ratio(nu - 1.0, s);  // K_{nu-1} / K_nu
  return {std::sqrt(m_tilde / a) * up, std::sqrt(a / m_tilde) * down};
}

/// Covariance of Y: S = D (xi xi' + Lambda Psi Lambda) D.
inline Eigen::MatrixXd mal_covariance(const MALParams& params,
                                      const QuantileSpec& spec) {
  const Eigen::VectorXd xi = spec.xi_tilde();
  const Eigen::VectorXd lam = spec.lambda();
  mal_detail::require_correlation(params.psi);
  const Eigen::MatrixXd inner =
      xi * xi.transpose() +
      Eigen::MatrixXd(lam.asDiagonal() * params.psi * lam.asDiagonal());
  return params.d.asDiagonal() * inner * params.d.asDiagonal();
}

/// Correlation matrix implied by mal_covariance.
inline Eigen::MatrixXd mal_correlation(const MALParams& params,
                                       const QuantileSpec& spec) {
  const Eigen::MatrixXd s = mal_covariance(params, spec);
  const Eigen::VectorXd inv_sd = s.diagonal().cwiseSqrt().cwiseInverse();
  return inv_sd.asDiagonal() * s * inv_sd.asDiagonal();
}

// Square root of Sigma by symmetric eigendecomposition; eigenvalues are
// clipped below so that sampling stays defined for near-singular psi.
inline Eigen::MatrixXd sigma_sqrt(const Eigen::MatrixXd& psi,
                                  const QuantileSpec& spec) {
  const Eigen::VectorXd lam = spec.lambda();
  const Eigen::MatrixXd sigma = lam.asDiagonal() * psi * lam.asDiagonal();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sigma);
  if (es.info() != Eigen::Success)
    throw std::runtime_error("sigma_sqrt: eigendecomposition failed");
  Eigen::VectorXd ev = es.eigenvalues().cwiseMax(1e-12);
  return es.eigenvectors() * ev.cwiseSqrt().asDiagonal() *
         es.eigenvectors().transpose();
}

/// Draws n rows of mu + D xi C + sqrt(C) D Sigma^{1/2} Z, C ~ Exp(1).
inline Eigen::MatrixXd mal_sample(const MALParams& params,
                                  const QuantileSpec& spec, Eigen::Index n,
                                  std::uint64_t seed) {
  const int p = spec.dim();
  if (params.mu.size() != p || params.d.size() != p || params.psi.rows() != p)
    throw std::invalid_argument("mal_sample: dimension mismatch");
  const Eigen::MatrixXd root =
      params.d.asDiagonal() * sigma_sqrt(params.psi, spec);
  const Eigen::VectorXd shift = params.d.cwiseProduct(spec.xi_tilde());

  Eigen::MatrixXd out(n, p);
  constexpr Eigen::Index chunk = 1 << 16;
  Eigen::VectorXd z(p);
  for (Eigen::Index start = 0; start < n; start += chunk) {
    RandomStream stream(derive_seed(seed, static_cast<std::uint64_t>(start / chunk)));
    const Eigen::Index stop = std::min(n, start + chunk);
    for (Eigen::Index r = start; r < stop; ++r) {
      const double c = stream.exponential();
      for (int j = 0; j < p; ++j) z[j] = stream.normal();
      out.row(r) =
          (params.mu + shift * c + std::sqrt(c) * (root * z)).transpose();
    }
  }
  return out;
}

}  // namespace qmhmm
