#include <catch2/catch.hpp>
#include <cmath>

#include "qmhmm/model_selection.hpp"
#include "qmhmm/simulation.hpp"
#include "test_helpers.hpp"

using namespace qmhmm;

TEST_CASE("single-cell grid returns that cell", "[select]") {
  RandomStream rs(7);
  LongitudinalDataset data = testing_helpers::random_dataset(rs, 10, 4, 2);
  const QuantileSpec spec{(Eigen::VectorXd(2) << 0.5, 0.5).finished()};
  FitConfig cfg;
  cfg.n_starts = 2;
  cfg.max_iter = 60;
  cfg.n_threads = 1;
  const GridResult grid = grid_search(data, spec, {2}, {1}, cfg);
  REQUIRE(grid.entries.size() == 1);
  REQUIRE(grid.best_bic == 0);
  REQUIRE(grid.best_aic == 0);
  REQUIRE(grid.bic_cell().G == 2);
  REQUIRE(grid.bic_cell().M == 1);
}

TEST_CASE("criteria recompute from the stored pieces", "[select]") {
  RandomStream rs(8);
  LongitudinalDataset data = testing_helpers::random_dataset(rs, 12, 4, 2);
  const QuantileSpec spec{(Eigen::VectorXd(2) << 0.5, 0.5).finished()};
  FitConfig cfg;
  cfg.n_starts = 2;
  cfg.max_iter = 80;
  cfg.n_threads = 1;
  const GridResult grid = grid_search(data, spec, {1, 2}, {1, 2}, cfg);
  for (const auto& cell : grid.entries) {
    const double bic = -2.0 * cell.fit.loglik + std::log(12.0) * cell.fit.n_free_params;
    const double aic = -2.0 * cell.fit.loglik + 2.0 * cell.fit.n_free_params;
    REQUIRE(cell.fit.bic == Approx(bic).epsilon(1e-12));
    REQUIRE(cell.fit.aic == Approx(aic).epsilon(1e-12));
    REQUIRE(cell.fit.n_free_params ==
            n_free_params(2, 2, 1, 1, cell.G, cell.M));
  }
}

TEST_CASE("adding cells never changes existing cells", "[select]") {
  RandomStream rs(9);
  LongitudinalDataset data = testing_helpers::random_dataset(rs, 10, 3, 2);
  const QuantileSpec spec{(Eigen::VectorXd(2) << 0.5, 0.5).finished()};
  FitConfig cfg;
  cfg.n_starts = 2;
  cfg.max_iter = 40;
  cfg.n_threads = 1;
  cfg.seed = 33;
  const GridResult small = grid_search(data, spec, {1, 2}, {1}, cfg);
  const GridResult larger = grid_search(data, spec, {1, 2, 3}, {1, 2}, cfg);
  for (const auto& cell : small.entries) {
    bool found = false;
    for (const auto& other : larger.entries) {
      if (other.G == cell.G && other.M == cell.M) {
        REQUIRE(other.fit.loglik == cell.fit.loglik);
        REQUIRE(other.fit.bic == cell.fit.bic);
        found = true;
      }
    }
    REQUIRE(found);
  }
}

TEST_CASE("BIC prefers the smallest M when one state generated the data",
          "[select]") {
  // no regime switching in the generator: identical state intercepts
  ScenarioConfig cfg;
  cfg.N = 60;
  cfg.T = 5;
  cfg.B = 1;
  cfg.seed = 21;
  cfg.alpha_true = (Eigen::Matrix2d() << 1.0, -1.0, 1.0, -1.0).finished();

  FitConfig em;
  em.n_starts = 3;
  em.max_iter = 120;
  em.n_threads = 0;
  int wins = 0;
  const int reps = 5;
  for (int r = 0; r < reps; ++r) {
    const SimulatedData sim = generate_dataset(cfg, r);
    const QuantileSpec spec{cfg.tau};
    em.seed = 300 + r;
    const GridResult grid = grid_search(sim.data, spec, {2}, {2, 3}, em);
    if (grid.bic_cell().M == 2) ++wins;
  }
  REQUIRE(wins > reps / 2);
}

TEST_CASE("ties break toward smaller (M, G)", "[select]") {
  // same BIC in every cell can only happen artificially; instead verify the
  // traversal order guarantee: the first strictly-best cell wins, and with a
  // 1x1-vs-duplicated grid the earlier (M, G) pair is reported
  RandomStream rs(12);
  LongitudinalDataset data = testing_helpers::random_dataset(rs, 8, 3, 2);
  const QuantileSpec spec{(Eigen::VectorXd(2) << 0.5, 0.5).finished()};
  FitConfig cfg;
  cfg.n_starts = 1;
  cfg.max_iter = 30;
  cfg.n_threads = 1;
  const GridResult grid = grid_search(data, spec, {1, 1}, {1}, cfg);
  REQUIRE(grid.entries.size() == 2);
  REQUIRE(grid.entries[0].fit.bic == grid.entries[1].fit.bic);
  REQUIRE(grid.best_bic == 0);
}
