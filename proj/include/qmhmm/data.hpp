#pragma once

// Longitudinal dataset container and the full model parameter set.
// Z and W designs are stored as column subsets of X plus an optional
// constant-one column, mirroring how the model nests its designs.

#include <Eigen/Dense>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "qmhmm/mal.hpp"

namespace qmhmm {

struct SubjectRecord {
  std::string id;
  Eigen::MatrixXd y;  // T_i x p
  Eigen::MatrixXd x;  // T_i x k
};

class LongitudinalDataset {
 public:
  LongitudinalDataset(std::vector<SubjectRecord> subjects,
                      std::vector<int> z_cols, bool z_intercept,
                      std::vector<int> w_cols, bool w_intercept)
      : subjects_(std::move(subjects)),
        z_cols_(std::move(z_cols)),
        w_cols_(std::move(w_cols)),
        z_intercept_(z_intercept),
        w_intercept_(w_intercept) {
    if (subjects_.empty())
      throw std::invalid_argument("dataset: no subjects");
    p_ = static_cast<int>(subjects_.front().y.cols());
    k_ = static_cast<int>(subjects_.front().x.cols());
    total_obs_ = 0;
    for (const auto& s : subjects_) {
      if (s.y.rows() < 1)
        throw std::invalid_argument("dataset: subject '" + s.id +
                                    "' has no observations");
      if (s.y.cols() != p_ || s.x.cols() != k_ || s.x.rows() != s.y.rows())
        throw std::invalid_argument("dataset: inconsistent dimensions for '" +
                                    s.id + "'");
      if (!s.y.allFinite() || !s.x.allFinite())
        throw std::invalid_argument("dataset: non-finite values for '" + s.id +
                                    "'");
      total_obs_ += static_cast<int>(s.y.rows());
    }
    auto check_cols = [&](const std::vector<int>& cols, const char* name) {
      for (int c : cols)
        if (c < 0 || c >= k_)
          throw std::invalid_argument(std::string("dataset: ") + name +
                                      " column index out of range");
    };
    check_cols(z_cols_, "Z");
    check_cols(w_cols_, "W");
    if (z_intercept_ && !w_intercept_)
      throw std::invalid_argument(
          "dataset: a random-effect intercept requires a state intercept so "
          "the centering shift can be absorbed");
  }

  int n_subjects() const { return static_cast<int>(subjects_.size()); }
  int p() const { return p_; }
  int k() const { return k_; }
  int k_z() const {
    return static_cast<int>(z_cols_.size()) + (z_intercept_ ? 1 : 0);
  }
  int k_w() const {
    return static_cast<int>(w_cols_.size()) + (w_intercept_ ? 1 : 0);
  }
  int total_obs() const { return total_obs_; }
  const SubjectRecord& subject(int i) const {
    return subjects_[static_cast<std::size_t>(i)];
  }
  int n_obs(int i) const { return static_cast<int>(subject(i).y.rows()); }
  const std::vector<int>& z_cols() const { return z_cols_; }
  const std::vector<int>& w_cols() const { return w_cols_; }
  bool z_intercept() const { return z_intercept_; }
  bool w_intercept() const { return w_intercept_; }

  // mapped columns first, intercept (if any) last
  Eigen::VectorXd z_row(int i, int t) const {
    return sub_row(i, t, z_cols_, z_intercept_);
  }
  Eigen::VectorXd w_row(int i, int t) const {
    return sub_row(i, t, w_cols_, w_intercept_);
  }

 private:
  Eigen::VectorXd sub_row(int i, int t, const std::vector<int>& cols,
                          bool intercept) const {
    Eigen::VectorXd v(static_cast<Eigen::Index>(cols.size()) + (intercept ? 1 : 0));
    const auto& x = subject(i).x;
    for (std::size_t c = 0; c < cols.size(); ++c)
      v[static_cast<Eigen::Index>(c)] = x(t, cols[c]);
    if (intercept) v[v.size() - 1] = 1.0;
    return v;
  }

  std::vector<SubjectRecord> subjects_;
  std::vector<int> z_cols_, w_cols_;
  bool z_intercept_, w_intercept_;
  int p_ = 0, k_ = 0, total_obs_ = 0;
};

struct QMHMMParams {
  Eigen::MatrixXd beta;                // k x p
  std::vector<Eigen::MatrixXd> b;      // G matrices, k_z x p
  Eigen::VectorXd pi;                  // G
  std::vector<Eigen::MatrixXd> alpha;  // M matrices, k_w x p
  Eigen::VectorXd q;                   // M
  Eigen::MatrixXd Q;                   // M x M
  Eigen::VectorXd d;                   // p
  Eigen::MatrixXd psi;                 // p x p
  Eigen::VectorXd tau;                 // p quantile levels

  int G() const { return static_cast<int>(b.size()); }
  int M() const { return static_cast<int>(alpha.size()); }
  int p() const { return static_cast<int>(d.size()); }
  QuantileSpec spec() const { return QuantileSpec(tau); }
};

/// Fitted location for observation (i, t) under mixture component g, state j.
inline Eigen::VectorXd location(const LongitudinalDataset& data,
                                const QMHMMParams& params, int i, int t, int g,
                                int j) {
  if (i < 0 || i >= data.n_subjects() || t < 0 || t >= data.n_obs(i) ||
      g < 0 || g >= params.G() || j < 0 || j >= params.M())
    throw std::out_of_range("location: index out of range");
  Eigen::VectorXd mu = params.beta.transpose() * data.subject(i).x.row(t).transpose();
  if (data.k_z() > 0)
    mu += params.b[static_cast<std::size_t>(g)].transpose() * data.z_row(i, t);
  if (data.k_w() > 0)
    mu += params.alpha[static_cast<std::size_t>(j)].transpose() * data.w_row(i, t);
  return mu;
}

/// Structural checks on a parameter set; returns human-readable violations.
inline std::vector<std::string> validate(const QMHMMParams& params,
                                         double tol = 1e-8) {
  std::vector<std::string> out;
  auto fail = [&](const std::string& msg) { out.push_back(msg); };

  const int G = params.G();
  const int M = params.M();
  const int p = params.p();
  if (params.pi.size() != G) fail("pi length does not match number of components");
  if (params.q.size() != M) fail("q length does not match number of states");
  if (params.Q.rows() != M || params.Q.cols() != M) fail("Q is not M x M");
  if (params.psi.rows() != p || params.psi.cols() != p) fail("psi is not p x p");
  if (params.tau.size() != p) fail("tau length does not match p");
  if (!out.empty()) return out;

  for (int j = 0; j < p; ++j) {
    if (!(params.tau[j] > 0.0 && params.tau[j] < 1.0))
      fail("tau[" + std::to_string(j + 1) + "] outside (0, 1)");
    if (!(params.d[j] > 0.0))
      fail("d[" + std::to_string(j + 1) + "] is not positive");
  }
  for (int g = 0; g < G; ++g)
    if (params.pi[g] < -tol)
      fail("pi[" + std::to_string(g + 1) + "] is negative");
  if (std::fabs(params.pi.sum() - 1.0) > tol) fail("pi does not sum to 1");
  for (int j = 0; j < M; ++j)
    if (params.q[j] < -tol) fail("q[" + std::to_string(j + 1) + "] is negative");
  if (std::fabs(params.q.sum() - 1.0) > tol) fail("q does not sum to 1");
  for (int j = 0; j < M; ++j) {
    if (params.Q.row(j).minCoeff() < -tol)
      fail("Q row " + std::to_string(j + 1) + " has a negative entry");
    if (std::fabs(params.Q.row(j).sum() - 1.0) > tol)
      fail("Q row " + std::to_string(j + 1) + " does not sum to 1");
  }

  // identifiability centering sum_g pi_g b_g = 0
  if (G > 0 && params.b.front().size() > 0) {
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(params.b.front().rows(),
                                              params.b.front().cols());
    for (int g = 0; g < G; ++g) m += params.pi[g] * params.b[static_cast<std::size_t>(g)];
    if (m.cwiseAbs().maxCoeff() > tol)
      fail("mixture locations are not centered: sum_g pi_g b_g != 0");
  }

  for (int i = 0; i < p; ++i) {
    if (std::fabs(params.psi(i, i) - 1.0) > tol)
      fail("psi diagonal entry " + std::to_string(i + 1) + " is not 1");
    for (int j = 0; j < i; ++j)
      if (std::fabs(params.psi(i, j) - params.psi(j, i)) > tol)
        fail("psi is not symmetric");
  }
  if (out.empty()) {
    Eigen::LLT<Eigen::MatrixXd> llt(params.psi);
    if (llt.info() != Eigen::Success) fail("psi is not positive definite");
  }
  return out;
}

/// Number of free parameters: k p + M k_w p + G k_z p + (G-1) + (M-1)
/// + M (M-1) + p + p (p-1) / 2.
inline int n_free_params(int p, int k, int k_z, int k_w, int G, int M) {
  if (p < 1 || k < 1 || G < 1 || M < 1 || k_z < 0 || k_w < 0)
    throw std::invalid_argument("n_free_params: invalid dimensions");
  return k * p + M * k_w * p + G * k_z * p + (G - 1) + (M - 1) + M * (M - 1) +
         p + p * (p - 1) / 2;
}

// E-step expectations; per-subject blocks are laid out t-major as
// [(t * M + j) * G + g] and transitions as [((t - 1) * M + j) * M + k].
struct PosteriorSet {
  int M = 0, G = 0;
  Eigen::MatrixXd w_hat;                      // N x G
  std::vector<std::vector<double>> z_hat;     // [i][(t M + j) G + g]
  std::vector<std::vector<double>> u_hat;     // [i][t M + j]
  std::vector<std::vector<double>> v_hat;     // [i][((t-1) M + j) M + k], t >= 1
  std::vector<std::vector<double>> gig_c;     // shape of z_hat
  std::vector<std::vector<double>> gig_z;     // shape of z_hat

  double z(int i, int t, int j, int g) const {
    return z_hat[static_cast<std::size_t>(i)]
                [static_cast<std::size_t>((t * M + j) * G + g)];
  }
  double u(int i, int t, int j) const {
    return u_hat[static_cast<std::size_t>(i)][static_cast<std::size_t>(t * M + j)];
  }
  double v(int i, int t, int j, int k) const {
    return v_hat[static_cast<std::size_t>(i)]
                [static_cast<std::size_t>(((t - 1) * M + j) * M + k)];
  }
};

}  // namespace qmhmm
