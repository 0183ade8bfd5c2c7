#pragma once

// Non-parametric block bootstrap: subjects are resampled with replacement
// keeping their measurement sequences intact, the model is refit warm-started
// at the point estimate, and labels are aligned before pooling so that the
// elementwise standard deviations are taken over matching parameters.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <vector>

#include "qmhmm/em.hpp"
#include "qmhmm/parallel.hpp"

namespace qmhmm {

struct BootstrapResult {
  FitResult point;      // full multi-start fit on the original data
  QMHMMParams se;       // elementwise standard errors, same shape as point
  int n_success = 0;
  int n_failed = 0;
};

namespace boot_detail {

inline void permutations(int n, std::vector<std::vector<int>>& out) {
  std::vector<int> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  do {
    out.push_back(idx);
  } while (std::next_permutation(idx.begin(), idx.end()));
}

// Best state permutation: minimizes total squared distance between the
// replicate's state coefficients and the reference ones. Exhaustive up to
// 8 states, greedy beyond.
inline std::vector<int> align_states(const std::vector<Eigen::MatrixXd>& ref,
                                     const std::vector<Eigen::MatrixXd>& rep) {
  const int M = static_cast<int>(ref.size());
  Eigen::MatrixXd cost(M, M);
  for (int j = 0; j < M; ++j)
    for (int k = 0; k < M; ++k)
      cost(j, k) = (rep[static_cast<std::size_t>(k)] - ref[static_cast<std::size_t>(j)])
                       .squaredNorm();
  std::vector<int> best(static_cast<std::size_t>(M));
  if (M <= 8) {
    std::vector<std::vector<int>> perms;
    permutations(M, perms);
    double best_cost = std::numeric_limits<double>::infinity();
    for (const auto& perm : perms) {
      double c = 0.0;
      for (int j = 0; j < M; ++j) c += cost(j, perm[static_cast<std::size_t>(j)]);
      if (c < best_cost) {
        best_cost = c;
        best = perm;
      }
    }
    return best;
  }
  std::vector<bool> used(static_cast<std::size_t>(M), false);
  for (int j = 0; j < M; ++j) {
    int arg = -1;
    for (int k = 0; k < M; ++k)
      if (!used[static_cast<std::size_t>(k)] &&
          (arg < 0 || cost(j, k) < cost(j, arg)))
        arg = k;
    used[static_cast<std::size_t>(arg)] = true;
    best[static_cast<std::size_t>(j)] = arg;
  }
  return best;
}

// Component permutation over the mixture locations, weighted by the
// reference masses.
inline std::vector<int> align_components(const std::vector<Eigen::MatrixXd>& ref,
                                         const Eigen::VectorXd& ref_pi,
                                         const std::vector<Eigen::MatrixXd>& rep) {
  const int G = static_cast<int>(ref.size());
  Eigen::MatrixXd cost(G, G);
  for (int g = 0; g < G; ++g)
    for (int h = 0; h < G; ++h)
      cost(g, h) = ref_pi[g] * (rep[static_cast<std::size_t>(h)] -
                                ref[static_cast<std::size_t>(g)])
                                   .squaredNorm();
  std::vector<int> best(static_cast<std::size_t>(G));
  if (G <= 8) {
    std::vector<std::vector<int>> perms;
    permutations(G, perms);
    double best_cost = std::numeric_limits<double>::infinity();
    for (const auto& perm : perms) {
      double c = 0.0;
      for (int g = 0; g < G; ++g) c += cost(g, perm[static_cast<std::size_t>(g)]);
      if (c < best_cost) {
        best_cost = c;
        best = perm;
      }
    }
    return best;
  }
  std::vector<bool> used(static_cast<std::size_t>(G), false);
  for (int g = 0; g < G; ++g) {
    int arg = -1;
    for (int h = 0; h < G; ++h)
      if (!used[static_cast<std::size_t>(h)] &&
          (arg < 0 || cost(g, h) < cost(g, arg)))
        arg = h;
    used[static_cast<std::size_t>(arg)] = true;
    best[static_cast<std::size_t>(g)] = arg;
  }
  return best;
}

}  // namespace boot_detail

/// Relabels states and mixture components of `params` to match `reference`.
inline QMHMMParams align_labels(const QMHMMParams& params,
                                const QMHMMParams& reference) {
  QMHMMParams out = params;
  const int M = params.M();
  const int G = params.G();
  if (M > 1) {
    const auto perm = boot_detail::align_states(reference.alpha, params.alpha);
    for (int j = 0; j < M; ++j) {
      out.alpha[static_cast<std::size_t>(j)] =
          params.alpha[static_cast<std::size_t>(perm[static_cast<std::size_t>(j)])];
      out.q[j] = params.q[perm[static_cast<std::size_t>(j)]];
      for (int k = 0; k < M; ++k)
        out.Q(j, k) = params.Q(perm[static_cast<std::size_t>(j)],
                               perm[static_cast<std::size_t>(k)]);
    }
  }
  if (G > 1) {
    const auto perm =
        boot_detail::align_components(reference.b, reference.pi, params.b);
    for (int g = 0; g < G; ++g) {
      out.b[static_cast<std::size_t>(g)] =
          params.b[static_cast<std::size_t>(perm[static_cast<std::size_t>(g)])];
      out.pi[g] = params.pi[perm[static_cast<std::size_t>(g)]];
    }
  }
  return out;
}

/// Resamples whole subjects with replacement; sequences stay intact.
inline LongitudinalDataset resample_subjects(const LongitudinalDataset& data,
                                             RandomStream& rs) {
  std::vector<SubjectRecord> subs;
  subs.reserve(static_cast<std::size_t>(data.n_subjects()));
  for (int i = 0; i < data.n_subjects(); ++i)
    subs.push_back(data.subject(rs.uniform_int(data.n_subjects())));
  return LongitudinalDataset(std::move(subs), data.z_cols(), data.z_intercept(),
                             data.w_cols(), data.w_intercept());
}

namespace boot_detail {

// Single warm-started EM run; no multi-start, no re-initialization.
inline std::optional<QMHMMParams> warm_refit(const LongitudinalDataset& data,
                                             const QMHMMParams& start,
                                             const FitConfig& cfg) {
  try {
    em_detail::StartResult res = em_detail::em_loop(data, start, cfg);
    if (res.converged) return std::move(res.params);
  } catch (const std::exception&) {
  }
  return std::nullopt;  // non-converged replicates are dropped
}

template <typename Fn>
inline void for_each_entry(QMHMMParams& a, Fn&& fn) {
  auto apply = [&](Eigen::MatrixXd& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) fn(m.data()[i]);
  };
  auto applyv = [&](Eigen::VectorXd& v) {
    for (Eigen::Index i = 0; i < v.size(); ++i) fn(v[i]);
  };
  apply(a.beta);
  for (auto& m : a.b) apply(m);
  applyv(a.pi);
  for (auto& m : a.alpha) apply(m);
  applyv(a.q);
  apply(a.Q);
  applyv(a.d);
  apply(a.psi);
}

template <typename Fn>
inline void zip_entries(QMHMMParams& a, const QMHMMParams& b, Fn&& fn) {
  auto apply = [&](Eigen::MatrixXd& x, const Eigen::MatrixXd& y) {
    for (Eigen::Index i = 0; i < x.size(); ++i) fn(x.data()[i], y.data()[i]);
  };
  auto applyv = [&](Eigen::VectorXd& x, const Eigen::VectorXd& y) {
    for (Eigen::Index i = 0; i < x.size(); ++i) fn(x[i], y[i]);
  };
  apply(a.beta, b.beta);
  for (std::size_t g = 0; g < a.b.size(); ++g) apply(a.b[g], b.b[g]);
  applyv(a.pi, b.pi);
  for (std::size_t j = 0; j < a.alpha.size(); ++j) apply(a.alpha[j], b.alpha[j]);
  applyv(a.q, b.q);
  apply(a.Q, b.Q);
  applyv(a.d, b.d);
  apply(a.psi, b.psi);
}

}  // namespace boot_detail

/// Block bootstrap standard errors from H warm-started replicate refits.
inline BootstrapResult block_bootstrap(const LongitudinalDataset& data,
                                       const QuantileSpec& spec, int G, int M,
                                       int H, const FitConfig& config) {
  if (H < 2) throw std::invalid_argument("block_bootstrap: need H >= 2");

  BootstrapResult out;
  out.point = fit(data, spec, G, M, config);

  std::vector<std::optional<QMHMMParams>> reps(static_cast<std::size_t>(H));
  parallel_for(
      H,
      [&](int h) {
        RandomStream rs(derive_seed(config.seed, 0xB007u, static_cast<std::uint64_t>(h)));
        LongitudinalDataset sample = resample_subjects(data, rs);
        FitConfig warm = config;
        warm.n_threads = 1;
        // warm starts are already near a solution; a gentler anneal suffices
        warm.anneal_floor_start = std::min(config.anneal_floor_start, 1e-4);
        auto refit = boot_detail::warm_refit(sample, out.point.params, warm);
        if (refit) reps[static_cast<std::size_t>(h)] = align_labels(*refit, out.point.params);
      },
      config.n_threads);

  std::vector<const QMHMMParams*> ok;
  for (const auto& r : reps)
    if (r) ok.push_back(&*r);
  out.n_success = static_cast<int>(ok.size());
  out.n_failed = H - out.n_success;
  if (out.n_success < 2)
    throw std::runtime_error("block_bootstrap: fewer than two replicates converged");

  QMHMMParams mean = out.point.params;
  boot_detail::for_each_entry(mean, [](double& x) { x = 0.0; });
  for (const QMHMMParams* r : ok)
    boot_detail::zip_entries(mean, *r, [&](double& m, const double& v) {
      m += v / static_cast<double>(out.n_success);
    });

  QMHMMParams var = mean;
  boot_detail::for_each_entry(var, [](double& x) { x = 0.0; });
  for (const QMHMMParams* r : ok) {
    QMHMMParams dev = *r;
    boot_detail::zip_entries(dev, mean, [](double& x, const double& m) { x -= m; });
    boot_detail::zip_entries(var, dev, [](double& s, const double& d) { s += d * d; });
  }
  boot_detail::for_each_entry(var, [&](double& x) {
    x = std::sqrt(x / (static_cast<double>(out.n_success) - 1.0));
  });
  out.se = std::move(var);
  return out;
}

}  // namespace qmhmm
