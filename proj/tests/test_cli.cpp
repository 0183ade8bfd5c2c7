#include <catch2/catch.hpp>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "qmhmm/io.hpp"
#include "qmhmm/rng.hpp"

namespace fs = std::filesystem;

namespace {

const std::string cli = QMHMM_CLI_PATH;

int run(const std::string& args, const std::string& log = "") {
  std::string cmd = cli + " " + args;
  if (!log.empty()) cmd += " >" + log + " 2>&1";
  const int rc = std::system(cmd.c_str());
  return WEXITSTATUS(rc);
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("intercept-only median fit recovers the sample median", "[cli]") {
  TempDir dir("cli_median");
  qmhmm::RandomStream rs(42);
  std::vector<double> values;
  {
    std::ofstream out(dir.path / "data.csv");
    out << "id,time,y,ones\n";
    for (int i = 0; i < 21; ++i) {
      const double v = 3.0 + 2.0 * rs.normal();
      values.push_back(v);
      out << "s" << i << ",1," << v << ",1\n";
    }
  }
  std::sort(values.begin(), values.end());
  const double median = values[10];

  const int rc = run("fit --input " + (dir.path / "data.csv").string() +
                         " --y-cols y --x-cols ones --G 1 --M 1 --tau 0.5"
                         " --starts 1 --max-iter 5000 --tol 1e-10 --out " +
                         (dir.path / "out").string(),
                     (dir.path / "log.txt").string());
  REQUIRE(rc == 0);
  const qmhmm::QMHMMParams params =
      qmhmm::read_params_json((dir.path / "out" / "params.json").string());
  REQUIRE(params.beta(0, 0) == Approx(median).margin(1e-6));
}

TEST_CASE("missing column is a named error with exit 1", "[cli]") {
  TempDir dir("cli_missing");
  {
    std::ofstream out(dir.path / "data.csv");
    out << "id,time,y,x\n";
    out << "a,1,0.0,1.0\n";
  }
  const int rc = run("fit --input " + (dir.path / "data.csv").string() +
                         " --y-cols y --x-cols wrong_name --G 1 --M 1 --out " +
                         (dir.path / "out").string(),
                     (dir.path / "log.txt").string());
  REQUIRE(rc == 1);
  const std::string log = slurp(dir.path / "log.txt");
  REQUIRE(log.find("wrong_name") != std::string::npos);
}

TEST_CASE("sample with n = 0 writes only the header", "[cli]") {
  TempDir dir("cli_sample0");
  const int rc = run("sample --n 0 --tau 0.3,0.7 --out " + dir.path.string(),
                     (dir.path / "log.txt").string());
  REQUIRE(rc == 0);
  REQUIRE(slurp(dir.path / "samples.csv") == "y1,y2\n");
}

TEST_CASE("single-cell select writes a one-row grid", "[cli]") {
  TempDir dir("cli_select");
  {
    std::ofstream out(dir.path / "data.csv");
    qmhmm::RandomStream rs(5);
    out << "id,time,y1,x1\n";
    for (int i = 0; i < 12; ++i)
      for (int t = 1; t <= 3; ++t)
        out << "s" << i << "," << t << "," << rs.normal() << "," << rs.normal()
            << "\n";
  }
  const int rc = run("select --input " + (dir.path / "data.csv").string() +
                         " --y-cols y1 --x-cols x1 --G 1 --M 1 --tau 0.5"
                         " --starts 2 --max-iter 60 --out " +
                         (dir.path / "out").string(),
                     (dir.path / "log.txt").string());
  REQUIRE(rc == 0);
  const std::string grid = slurp(dir.path / "out" / "grid.csv");
  REQUIRE(std::count(grid.begin(), grid.end(), '\n') == 2);  // header + 1 row
  REQUIRE(grid.rfind("G,M,loglik", 0) == 0);
}

TEST_CASE("an impossible retention floor exits with 2", "[cli]") {
  // with two components both masses cannot exceed 0.6, so the fit converges
  // but is never retained
  TempDir dir("cli_unretained");
  {
    std::ofstream out(dir.path / "data.csv");
    qmhmm::RandomStream rs(6);
    out << "id,time,y1,x1\n";
    for (int i = 0; i < 15; ++i)
      for (int t = 1; t <= 3; ++t)
        out << "s" << i << "," << t << "," << rs.normal() << "," << rs.normal()
            << "\n";
  }
  const int rc = run("fit --input " + (dir.path / "data.csv").string() +
                         " --y-cols y1 --x-cols x1 --z-cols x1 --G 2 --M 1"
                         " --tau 0.5 --starts 2 --max-iter 80"
                         " --retain-floor 0.6 --out " +
                         (dir.path / "out").string(),
                     (dir.path / "log.txt").string());
  REQUIRE(rc == 2);
}

TEST_CASE("config file values are overridden by flags", "[cli]") {
  TempDir dir("cli_config");
  {
    std::ofstream out(dir.path / "conf.ini");
    out << "n=5\n";
    out << "tau=0.4,0.6\n";
    out << "seed=9\n";
  }
  const int rc = run("sample --config " + (dir.path / "conf.ini").string() +
                         " --n 3 --out " + dir.path.string(),
                     (dir.path / "log.txt").string());
  REQUIRE(rc == 0);
  const std::string csv = slurp(dir.path / "samples.csv");
  // flag wins: 3 rows, config supplies tau
  REQUIRE(std::count(csv.begin(), csv.end(), '\n') == 4);
}

TEST_CASE("same seed reproduces byte-identical artifacts", "[cli]") {
  TempDir dir("cli_seeded");
  const std::string base = "simulate --preset appB-NN-r03-N100-T5 --B 1"
                           " --N 30 --T 3 --M 2 --G-range 2..2 --starts 2"
                           " --max-iter 40 --seed 123 --dump-data --out ";
  // the preset pins N and T; override by placing flags after it is not
  // supported, so use the explicit scenario flags instead
  const std::string cmd = "simulate --scenario NN --rho 0.3 --N 24 --T 3 --B 2"
                          " --M 2 --G-range 2..2 --starts 2 --max-iter 60"
                          " --seed 123 --dump-data --out ";
  REQUIRE(run(cmd + (dir.path / "a").string(),
              (dir.path / "log_a.txt").string()) == 0);
  REQUIRE(run(cmd + (dir.path / "b").string(),
              (dir.path / "log_b.txt").string()) == 0);
  for (const char* name : {"study.csv", "estimates.csv", "dataset.csv"}) {
    const std::string a = slurp(dir.path / "a" / name);
    const std::string b = slurp(dir.path / "b" / name);
    REQUIRE(!a.empty());
    REQUIRE(a == b);
  }
  (void)base;
}
