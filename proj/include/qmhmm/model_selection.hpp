#pragma once

// Grid search over the number of mixture components G and hidden states M,
// scored by BIC (and AIC), restricted to retained solutions.

#include <algorithm>
#include <stdexcept>
#include <vector>

#include "qmhmm/em.hpp"
#include "qmhmm/parallel.hpp"

namespace qmhmm {

struct GridCell {
  int G = 0, M = 0;
  FitResult fit;
};

struct GridResult {
  std::vector<GridCell> entries;
  int best_bic = -1;  // indices into entries
  int best_aic = -1;
  bool any_retained = false;

  const GridCell& bic_cell() const { return entries[static_cast<std::size_t>(best_bic)]; }
  const GridCell& aic_cell() const { return entries[static_cast<std::size_t>(best_aic)]; }
};

/// Fits every (G, M) pair. Cells are independent: each derives its own seed
/// from (seed, G, M), so enlarging the grid never changes existing cells.
/// Ties break toward smaller (M, G); unretained fits are excluded from the
/// best-of selection unless nothing was retained.
inline GridResult grid_search(const LongitudinalDataset& data,
                              const QuantileSpec& spec,
                              const std::vector<int>& G_range,
                              const std::vector<int>& M_range,
                              const FitConfig& config) {
  if (G_range.empty() || M_range.empty())
    throw std::invalid_argument("grid_search: empty grid");

  std::vector<std::pair<int, int>> cells;  // (M, G) ascending
  for (int M : M_range)
    for (int G : G_range) cells.emplace_back(M, G);
  std::sort(cells.begin(), cells.end());

  GridResult out;
  out.entries.resize(cells.size());
  std::vector<std::string> errors(cells.size());
  const int inner_threads = cells.size() == 1 ? config.n_threads : 1;
  parallel_for(
      static_cast<int>(cells.size()),
      [&](int c) {
        const auto [M, G] = cells[static_cast<std::size_t>(c)];
        FitConfig cell_cfg = config;
        cell_cfg.seed = derive_seed(config.seed, static_cast<std::uint64_t>(G) << 16,
                                    static_cast<std::uint64_t>(M));
        cell_cfg.n_threads = inner_threads;
        auto& cell = out.entries[static_cast<std::size_t>(c)];
        cell.G = G;
        cell.M = M;
        try {
          cell.fit = fit(data, spec, G, M, cell_cfg);
        } catch (const std::exception& e) {
          errors[static_cast<std::size_t>(c)] = e.what();
          cell.fit.loglik = -std::numeric_limits<double>::infinity();
        }
      },
      cells.size() == 1 ? 1 : config.n_threads);

  auto usable = [&](std::size_t c) { return errors[c].empty(); };
  for (std::size_t c = 0; c < out.entries.size(); ++c)
    if (usable(c) && out.entries[c].fit.retained) out.any_retained = true;

  auto pick = [&](auto criterion) {
    int best = -1;
    for (std::size_t c = 0; c < out.entries.size(); ++c) {
      if (!usable(c)) continue;
      if (out.any_retained && !out.entries[c].fit.retained) continue;
      if (best < 0 || criterion(out.entries[c].fit) <
                          criterion(out.entries[static_cast<std::size_t>(best)].fit))
        best = static_cast<int>(c);
    }
    return best;
  };
  out.best_bic = pick([](const FitResult& f) { return f.bic; });
  out.best_aic = pick([](const FitResult& f) { return f.aic; });
  if (out.best_bic < 0)
    throw std::runtime_error("grid_search: every grid cell failed");
  return out;
}

}  // namespace qmhmm
