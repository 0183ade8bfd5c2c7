// Command-line front end: fit, select, bootstrap, simulate and sample
// subcommands with deterministic, machine-readable CSV/JSON artifacts.
// Exit codes: 0 success, 1 error, 2 converged but unretained.

#include <CLI11.hpp>
#include <algorithm>
#include <set>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "qmhmm/qmhmm.hpp"


namespace fs = std::filesystem;
using namespace qmhmm;

namespace {

struct CommonOpts {
  std::string input;
  std::string config_file;
  std::string out_dir = ".";
  std::vector<double> tau;
  std::uint64_t seed = 1;
  int threads = 0;
  // column mapping
  std::string id_col = "id";
  std::string time_col = "time";
  std::vector<std::string> y_cols, x_cols, z_cols, w_cols;
  bool z_intercept = false;
  bool w_intercept = false;
  // fit settings
  int G = 1, M = 1;
  std::string G_range, M_range;
  int starts = 50;
  double tol = 1e-6;
  int max_iter = 500;
  double retain_floor = 0.05;
};

std::vector<int> parse_range(const std::string& text, const char* flag) {
  // "a..b" or a single integer
  const auto pos = text.find("..");
  try {
    if (pos == std::string::npos) return {std::stoi(text)};
    const int lo = std::stoi(text.substr(0, pos));
    const int hi = std::stoi(text.substr(pos + 2));
    if (hi < lo) throw std::invalid_argument("empty");
    std::vector<int> out;
    for (int v = lo; v <= hi; ++v) out.push_back(v);
    return out;
  } catch (const std::exception&) {
    throw CLI::ValidationError(std::string(flag) + ": expected N or LO..HI, got '" +
                               text + "'");
  }
}

std::vector<std::pair<std::string, std::string>> read_flat_config(
    const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file '" + path + "'");
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  while (std::getline(in, line)) {
    const std::string t = io_detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("config: expected key=value, got '" + t + "'");
    out.emplace_back(io_detail::trim(t.substr(0, eq)),
                     io_detail::trim(t.substr(eq + 1)));
  }
  return out;
}

// Expands --config FILE into --key=value tokens right after the subcommand,
// skipping keys the command line already provides, so flags always win.
std::vector<std::string> apply_config(std::vector<std::string> args) {
  std::string config_path;
  std::vector<std::string> kept;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config") {
      if (i + 1 >= args.size())
        throw std::runtime_error("--config expects a file path");
      config_path = args[++i];
    } else if (args[i].rfind("--config=", 0) == 0) {
      config_path = args[i].substr(9);
    } else {
      kept.push_back(args[i]);
    }
  }
  if (config_path.empty()) return kept;

  std::set<std::string> given;
  for (const auto& a : kept)
    if (a.rfind("--", 0) == 0) given.insert(a.substr(0, a.find('=')));
  std::size_t pos = 0;
  while (pos < kept.size() && kept[pos].rfind('-', 0) == 0) ++pos;
  if (pos < kept.size()) ++pos;  // place config values after the subcommand
  std::vector<std::string> inject;
  for (const auto& [k, v] : read_flat_config(config_path))
    if (!given.count("--" + k)) inject.push_back("--" + k + "=" + v);
  kept.insert(kept.begin() + static_cast<std::ptrdiff_t>(pos), inject.begin(),
              inject.end());
  return kept;
}

ColumnSpec column_spec(const CommonOpts& o) {
  ColumnSpec s;
  s.id = o.id_col;
  s.time = o.time_col;
  s.y = o.y_cols;
  s.x = o.x_cols;
  s.z = o.z_cols;
  s.w = o.w_cols;
  s.z_intercept = o.z_intercept;
  s.w_intercept = o.w_intercept;
  return s;
}

FitConfig fit_config(const CommonOpts& o) {
  FitConfig cfg;
  cfg.n_starts = o.starts;
  cfg.tol = o.tol;
  cfg.max_iter = o.max_iter;
  cfg.seed = o.seed;
  cfg.retain_floor = o.retain_floor;
  cfg.n_threads = o.threads;
  return cfg;
}

QuantileSpec quantile_spec(const CommonOpts& o, int p) {
  std::vector<double> tau = o.tau;
  if (tau.empty()) tau.assign(static_cast<std::size_t>(p), 0.5);
  if (static_cast<int>(tau.size()) != p)
    throw std::runtime_error("tau has " + std::to_string(tau.size()) +
                             " levels but the data has " + std::to_string(p) +
                             " outcomes");
  Eigen::VectorXd t(static_cast<Eigen::Index>(tau.size()));
  for (std::size_t i = 0; i < tau.size(); ++i)
    t[static_cast<Eigen::Index>(i)] = tau[i];
  return QuantileSpec(t);
}

void add_common(CLI::App* cmd, CommonOpts& o, bool needs_input) {
  cmd->add_option("--config", o.config_file,
                  "flat key=value configuration file; command-line flags win");
  if (needs_input)
    cmd->add_option("--input", o.input, "long-format CSV input")->required();
  cmd->add_option("--out", o.out_dir, "output directory (created if absent)");
  cmd->add_option("--tau", o.tau, "quantile levels, e.g. --tau 0.5,0.5")
      ->delimiter(',');
  cmd->add_option("--seed", o.seed, "seed governing all randomness");
  cmd->add_option("--threads", o.threads, "worker threads (0 = all cores)");
  cmd->add_option("--id-col", o.id_col, "subject id column");
  cmd->add_option("--time-col", o.time_col, "occasion column");
  cmd->add_option("--y-cols", o.y_cols, "outcome columns")->delimiter(',');
  cmd->add_option("--x-cols", o.x_cols, "fixed-effect design columns")
      ->delimiter(',');
  cmd->add_option("--z-cols", o.z_cols,
                  "random-effect design columns (subset of --x-cols)")
      ->delimiter(',');
  cmd->add_option("--w-cols", o.w_cols,
                  "state-effect design columns (subset of --x-cols)")
      ->delimiter(',');
  cmd->add_flag("--z-intercept", o.z_intercept, "add a constant column to Z");
  cmd->add_flag("--w-intercept", o.w_intercept, "add a constant column to W");
  cmd->add_option("--starts", o.starts, "number of EM starting points");
  cmd->add_option("--tol", o.tol, "EM convergence threshold");
  cmd->add_option("--max-iter", o.max_iter, "EM iteration cap");
  cmd->add_option("--retain-floor", o.retain_floor,
                  "minimum pi_g and q_j for a retained solution");
}

fs::path ensure_out(const CommonOpts& o) {
  fs::path dir(o.out_dir);
  fs::create_directories(dir);
  return dir;
}

int cmd_fit(const CommonOpts& o) {
  const LongitudinalDataset data = read_dataset_csv(o.input, column_spec(o));
  const QuantileSpec spec = quantile_spec(o, data.p());
  const FitResult res = fit(data, spec, o.G, o.M, fit_config(o));
  const fs::path dir = ensure_out(o);
  write_params_json((dir / "params.json").string(), res.params);
  write_fit_summary_csv((dir / "fit_summary.csv").string(), res,
                        data.n_subjects(), data.total_obs());
  const PosteriorSet post = e_step(data, res.params);
  write_posteriors_csv((dir / "posteriors.csv").string(), data, post);
  std::cout << "loglik " << fmt_double(res.loglik) << " bic "
            << fmt_double(res.bic) << (res.retained ? "" : " (unretained)")
            << "\n";
  return res.retained ? 0 : 2;
}

int cmd_select(const CommonOpts& o) {
  const LongitudinalDataset data = read_dataset_csv(o.input, column_spec(o));
  const QuantileSpec spec = quantile_spec(o, data.p());
  const std::vector<int> gr =
      o.G_range.empty() ? std::vector<int>{o.G} : parse_range(o.G_range, "--G-range");
  const std::vector<int> mr =
      o.M_range.empty() ? std::vector<int>{o.M} : parse_range(o.M_range, "--M-range");
  const GridResult grid = grid_search(data, spec, gr, mr, fit_config(o));
  const fs::path dir = ensure_out(o);
  write_grid_csv((dir / "grid.csv").string(), grid);
  const auto& best = grid.bic_cell();
  write_params_json((dir / "params.json").string(), best.fit.params);
  std::cout << "best BIC at G=" << best.G << " M=" << best.M << " (bic "
            << fmt_double(best.fit.bic) << ")"
            << (best.fit.retained ? "" : " (unretained)") << "\n";
  return best.fit.retained ? 0 : 2;
}

int cmd_bootstrap(const CommonOpts& o, int H) {
  const LongitudinalDataset data = read_dataset_csv(o.input, column_spec(o));
  const QuantileSpec spec = quantile_spec(o, data.p());
  const BootstrapResult boot =
      block_bootstrap(data, spec, o.G, o.M, H, fit_config(o));
  const fs::path dir = ensure_out(o);
  write_params_json((dir / "params.json").string(), boot.point.params);
  write_bootstrap_csv((dir / "se.csv").string(), boot);
  write_bootstrap_summary_csv((dir / "bootstrap_summary.csv").string(), boot, H);
  std::cout << "bootstrap: " << boot.n_success << "/" << H << " replicates\n";
  return 0;
}

struct SimulateOpts {
  std::string preset;
  std::string scenario = "NN";
  double rho = 0.3;
  int N = 100, T = 5, B = 10;
  bool select = false;
  bool dump_data = false;
};

ScenarioConfig scenario_config(const SimulateOpts& s, const CommonOpts& o) {
  ScenarioConfig cfg;
  if (!s.preset.empty()) {
    // appB-{NN|TT}-r{03|08}-N{n}-T{t}
    std::string text = s.preset;
    if (text.rfind("appB-", 0) != 0)
      throw std::runtime_error("unknown preset '" + s.preset + "'");
    text = text.substr(5);
    std::vector<std::string> parts;
    std::stringstream ss(text);
    std::string tok;
    while (std::getline(ss, tok, '-')) parts.push_back(tok);
    if (parts.size() != 4 || parts[1].size() < 2 || parts[2].size() < 2 ||
        parts[3].size() < 2 || parts[1].rfind('r', 0) != 0 ||
        parts[2].rfind('N', 0) != 0 || parts[3].rfind('T', 0) != 0)
      throw std::runtime_error("unknown preset '" + s.preset + "'");
    cfg.scenario = parts[0] == "TT" ? Scenario::StudentStudent
                                    : Scenario::NormalNormal;
    cfg.rho = std::stod("0." + parts[1].substr(1));
    cfg.N = std::stoi(parts[2].substr(1));
    cfg.T = std::stoi(parts[3].substr(1));
  } else {
    cfg.scenario = s.scenario == "TT" ? Scenario::StudentStudent
                                      : Scenario::NormalNormal;
    cfg.rho = s.rho;
    cfg.N = s.N;
    cfg.T = s.T;
  }
  cfg.B = s.B;
  cfg.seed = o.seed;
  if (!o.tau.empty()) {
    if (o.tau.size() != 2)
      throw std::runtime_error("simulate: --tau must have two levels");
    cfg.tau = Eigen::Vector2d(o.tau[0], o.tau[1]);
  }
  return cfg;
}

int cmd_simulate(const SimulateOpts& s, const CommonOpts& o) {
  const ScenarioConfig cfg = scenario_config(s, o);
  StudyConfig study;
  study.em = fit_config(o);
  study.select = s.select;
  if (!o.G_range.empty()) study.G_range = parse_range(o.G_range, "--G-range");
  if (!o.M_range.empty()) study.M_range = parse_range(o.M_range, "--M-range");
  study.M = o.M > 1 ? o.M : 2;
  const fs::path dir = ensure_out(o);
  if (s.dump_data) {
    const SimulatedData sim = generate_dataset(cfg, 0);
    write_dataset_csv((dir / "dataset.csv").string(), sim.data, {"y1", "y2"},
                      {"x1", "x2"});
  }
  const StudyReport rep = run_study(cfg, study);
  write_study_csv((dir / "study.csv").string(), rep);
  write_estimates_csv((dir / "estimates.csv").string(), rep);
  if (s.select)
    write_selection_csv((dir / "selection.csv").string(), rep, study.M_range);
  std::cout << "replications: " << rep.B_effective << " usable, "
            << rep.n_failures << " failed\n";
  return 0;
}

struct SampleOpts {
  long n = 1000;
  std::string params_file;
};

int cmd_sample(const SampleOpts& s, const CommonOpts& o) {
  MALParams mal;
  Eigen::VectorXd tau;
  if (!s.params_file.empty()) {
    const QMHMMParams p = read_params_json(s.params_file);
    tau = p.tau;
    mal.mu = Eigen::VectorXd::Zero(p.p());
    mal.d = p.d;
    mal.psi = p.psi;
  } else {
    if (o.tau.empty())
      throw std::runtime_error("sample: need --tau or --params");
    tau.resize(static_cast<Eigen::Index>(o.tau.size()));
    for (std::size_t i = 0; i < o.tau.size(); ++i)
      tau[static_cast<Eigen::Index>(i)] = o.tau[i];
    const int p = static_cast<int>(tau.size());
    mal.mu = Eigen::VectorXd::Zero(p);
    mal.d = Eigen::VectorXd::Ones(p);
    mal.psi = Eigen::MatrixXd::Identity(p, p);
  }
  const QuantileSpec spec{tau};
  Eigen::MatrixXd draws(0, spec.dim());
  if (s.n > 0) draws = mal_sample(mal, spec, s.n, o.seed);
  const fs::path dir = ensure_out(o);
  write_samples_csv((dir / "samples.csv").string(), draws);
  std::cout << "wrote " << draws.rows() << " draws\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"joint conditional-quantile estimation for multivariate "
               "longitudinal data (quantile mixed hidden Markov model)"};
  app.require_subcommand(1);

  CommonOpts o;
  SimulateOpts sim;
  SampleOpts sam;
  int H = 100;

  auto* c_fit = app.add_subcommand("fit", "fit the model at fixed (G, M)");
  add_common(c_fit, o, true);
  c_fit->add_option("--G", o.G, "mixture components")->required();
  c_fit->add_option("--M", o.M, "hidden states")->required();

  auto* c_sel = app.add_subcommand("select", "grid search over (G, M) by BIC");
  add_common(c_sel, o, true);
  c_sel->add_option("--G", o.G, "single G when no range is given");
  c_sel->add_option("--M", o.M, "single M when no range is given");
  c_sel->add_option("--G-range", o.G_range, "e.g. 2..8");
  c_sel->add_option("--M-range", o.M_range, "e.g. 2..4");

  auto* c_boot = app.add_subcommand("bootstrap", "block bootstrap standard errors");
  add_common(c_boot, o, true);
  c_boot->add_option("--G", o.G, "mixture components")->required();
  c_boot->add_option("--M", o.M, "hidden states")->required();
  c_boot->add_option("--H", H, "bootstrap replicates");

  auto* c_simu = app.add_subcommand("simulate", "Monte Carlo simulation study");
  add_common(c_simu, o, false);
  c_simu->add_option("--preset", sim.preset, "e.g. appB-NN-r03-N100-T5");
  c_simu->add_option("--scenario", sim.scenario, "NN or TT")
      ->check(CLI::IsMember({"NN", "TT"}));
  c_simu->add_option("--rho", sim.rho, "error correlation");
  c_simu->add_option("--N", sim.N, "subjects per replication");
  c_simu->add_option("--T", sim.T, "occasions per subject");
  c_simu->add_option("--B", sim.B, "Monte Carlo replications");
  c_simu->add_option("--M", o.M, "states fitted in metrics mode");
  c_simu->add_option("--G-range", o.G_range, "mixture sizes scored by BIC");
  c_simu->add_option("--M-range", o.M_range, "state grid in selection mode");
  c_simu->add_flag("--select", sim.select, "report AIC/BIC selection frequencies");
  c_simu->add_flag("--dump-data", sim.dump_data,
                   "also write replication 0 as dataset.csv");

  auto* c_samp = app.add_subcommand("sample", "draw from the response distribution");
  add_common(c_samp, o, false);
  c_samp->add_option("--n", sam.n, "number of draws");
  c_samp->add_option("--params", sam.params_file,
                     "params.json supplying d, psi and tau");

  try {
    std::vector<std::string> args(argv + 1, argv + argc);
    args = apply_config(std::move(args));
    std::reverse(args.begin(), args.end());  // CLI11's vector overload
    app.parse(std::move(args));
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }

  try {
    if (c_fit->parsed()) return cmd_fit(o);
    if (c_sel->parsed()) return cmd_select(o);
    if (c_boot->parsed()) return cmd_bootstrap(o, H);
    if (c_simu->parsed()) return cmd_simulate(sim, o);
    if (c_samp->parsed()) return cmd_sample(sam, o);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
