#pragma once

// File formats: long-format CSV ingestion (one row per subject-occasion),
// parameter sets as JSON, and the CSV artifacts the command line emits.
// Numbers are written with 17 significant digits so artifacts round-trip.

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "qmhmm/bootstrap.hpp"
#include "qmhmm/data.hpp"
#include "qmhmm/em.hpp"
#include "qmhmm/model_selection.hpp"
#include "qmhmm/simulation.hpp"

namespace qmhmm {

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

struct ColumnSpec {
  std::string id = "id";
  std::string time = "time";
  std::vector<std::string> y;
  std::vector<std::string> x;
  std::vector<std::string> z;  // must name columns listed in x
  std::vector<std::string> w;  // must name columns listed in x
  bool z_intercept = false;
  bool w_intercept = false;
};

namespace io_detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  std::stringstream ss(line);
  while (std::getline(ss, cur, ',')) out.push_back(trim(cur));
  if (!line.empty() && line.back() == ',') out.push_back("");
  return out;
}

inline double parse_double(const std::string& s, int row, const std::string& col) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0')
    throw std::runtime_error("csv: row " + std::to_string(row) +
                             ", column '" + col + "': cannot parse '" + s +
                             "' as a number");
  return v;
}

inline long parse_long(const std::string& s, int row, const std::string& col) {
  char* end = nullptr;
  const long v = std::strtol(s.c_str(), &end, 10);
  if (end == s.c_str() || *end != '\0')
    throw std::runtime_error("csv: row " + std::to_string(row) +
                             ", column '" + col + "': cannot parse '" + s +
                             "' as an integer");
  return v;
}

}  // namespace io_detail

/// Reads a long-format CSV (one row per subject-occasion). Rows are grouped
/// by id in first-appearance order and sorted by time within each subject;
/// gaps in time are treated as consecutive occasions.
inline LongitudinalDataset read_dataset_csv(const std::string& path,
                                            const ColumnSpec& cols) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open input file '" + path + "'");
  std::string line;
  if (!std::getline(in, line))
    throw std::runtime_error("csv: '" + path + "' is empty");
  const auto header = io_detail::split_csv_line(line);
  std::map<std::string, int> col_index;
  for (std::size_t c = 0; c < header.size(); ++c)
    col_index[header[c]] = static_cast<int>(c);

  auto find_col = [&](const std::string& name) {
    const auto it = col_index.find(name);
    if (it == col_index.end())
      throw std::runtime_error("csv: missing column '" + name + "'");
    return it->second;
  };

  const int id_col = find_col(cols.id);
  const int time_col = find_col(cols.time);
  std::vector<int> y_cols, x_cols;
  for (const auto& n : cols.y) y_cols.push_back(find_col(n));
  for (const auto& n : cols.x) x_cols.push_back(find_col(n));
  if (y_cols.empty()) throw std::runtime_error("csv: no outcome columns given");
  if (x_cols.empty()) throw std::runtime_error("csv: no covariate columns given");

  auto subset_of_x = [&](const std::vector<std::string>& names, const char* what) {
    std::vector<int> idx;
    for (const auto& n : names) {
      const auto it = std::find(cols.x.begin(), cols.x.end(), n);
      if (it == cols.x.end())
        throw std::runtime_error(std::string("csv: ") + what + " column '" + n +
                                 "' is not among the x columns");
      idx.push_back(static_cast<int>(it - cols.x.begin()));
    }
    return idx;
  };
  const std::vector<int> z_idx = subset_of_x(cols.z, "z");
  const std::vector<int> w_idx = subset_of_x(cols.w, "w");

  struct Row {
    long time;
    Eigen::VectorXd y, x;
  };
  std::vector<std::string> order;
  std::map<std::string, std::vector<Row>> groups;
  int row_no = 1;
  while (std::getline(in, line)) {
    ++row_no;
    if (io_detail::trim(line).empty()) continue;
    const auto fields = io_detail::split_csv_line(line);
    if (fields.size() != header.size())
      throw std::runtime_error("csv: row " + std::to_string(row_no) + " has " +
                               std::to_string(fields.size()) + " fields, expected " +
                               std::to_string(header.size()));
    Row r;
    r.time = io_detail::parse_long(fields[static_cast<std::size_t>(time_col)],
                                   row_no, cols.time);
    r.y.resize(static_cast<Eigen::Index>(y_cols.size()));
    r.x.resize(static_cast<Eigen::Index>(x_cols.size()));
    for (std::size_t c = 0; c < y_cols.size(); ++c)
      r.y[static_cast<Eigen::Index>(c)] = io_detail::parse_double(
          fields[static_cast<std::size_t>(y_cols[c])], row_no, cols.y[c]);
    for (std::size_t c = 0; c < x_cols.size(); ++c)
      r.x[static_cast<Eigen::Index>(c)] = io_detail::parse_double(
          fields[static_cast<std::size_t>(x_cols[c])], row_no, cols.x[c]);
    const std::string& id = fields[static_cast<std::size_t>(id_col)];
    if (groups.find(id) == groups.end()) order.push_back(id);
    groups[id].push_back(std::move(r));
  }

  std::vector<SubjectRecord> subjects;
  subjects.reserve(order.size());
  for (const auto& id : order) {
    auto& rows = groups[id];
    std::stable_sort(rows.begin(), rows.end(),
                     [](const Row& a, const Row& b) { return a.time < b.time; });
    SubjectRecord rec;
    rec.id = id;
    rec.y.resize(static_cast<Eigen::Index>(rows.size()),
                 static_cast<Eigen::Index>(y_cols.size()));
    rec.x.resize(static_cast<Eigen::Index>(rows.size()),
                 static_cast<Eigen::Index>(x_cols.size()));
    for (std::size_t t = 0; t < rows.size(); ++t) {
      rec.y.row(static_cast<Eigen::Index>(t)) = rows[t].y.transpose();
      rec.x.row(static_cast<Eigen::Index>(t)) = rows[t].x.transpose();
    }
    subjects.push_back(std::move(rec));
  }
  return LongitudinalDataset(std::move(subjects), z_idx, cols.z_intercept,
                             w_idx, cols.w_intercept);
}

inline void write_dataset_csv(const std::string& path,
                              const LongitudinalDataset& data,
                              const std::vector<std::string>& y_names,
                              const std::vector<std::string>& x_names) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open output file '" + path + "'");
  out << "id,time";
  for (const auto& n : y_names) out << ',' << n;
  for (const auto& n : x_names) out << ',' << n;
  out << '\n';
  for (int i = 0; i < data.n_subjects(); ++i) {
    const auto& s = data.subject(i);
    for (Eigen::Index t = 0; t < s.y.rows(); ++t) {
      out << s.id << ',' << (t + 1);
      for (Eigen::Index c = 0; c < s.y.cols(); ++c)
        out << ',' << fmt_double(s.y(t, c));
      for (Eigen::Index c = 0; c < s.x.cols(); ++c)
        out << ',' << fmt_double(s.x(t, c));
      out << '\n';
    }
  }
}

// ---- parameter JSON ----

namespace io_detail {

inline nlohmann::ordered_json matrix_json(const Eigen::MatrixXd& m) {
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    nlohmann::ordered_json row = nlohmann::ordered_json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline nlohmann::ordered_json vector_json(const Eigen::VectorXd& v) {
  nlohmann::ordered_json a = nlohmann::ordered_json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

inline Eigen::MatrixXd json_matrix(const nlohmann::json& j, const char* key) {
  if (j.is_array() && j.empty()) return Eigen::MatrixXd(0, 0);
  if (!j.is_array() || !j.front().is_array())
    throw std::runtime_error(std::string("params json: '") + key +
                             "' must be an array of rows");
  Eigen::MatrixXd m(static_cast<Eigen::Index>(j.size()),
                    static_cast<Eigen::Index>(j.front().size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const auto& row = j[static_cast<std::size_t>(r)];
    if (static_cast<Eigen::Index>(row.size()) != m.cols())
      throw std::runtime_error(std::string("params json: ragged rows in '") +
                               key + "'");
    for (Eigen::Index c = 0; c < m.cols(); ++c)
      m(r, c) = row[static_cast<std::size_t>(c)].get<double>();
  }
  return m;
}

inline Eigen::VectorXd json_vector(const nlohmann::json& j, const char* key) {
  if (!j.is_array())
    throw std::runtime_error(std::string("params json: '") + key +
                             "' must be an array");
  Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i)
    v[i] = j[static_cast<std::size_t>(i)].get<double>();
  return v;
}

}  // namespace io_detail

inline nlohmann::ordered_json params_to_json(const QMHMMParams& params) {
  nlohmann::ordered_json j;
  j["beta"] = io_detail::matrix_json(params.beta);
  nlohmann::ordered_json bs = nlohmann::ordered_json::array();
  for (const auto& m : params.b) bs.push_back(io_detail::matrix_json(m));
  j["b"] = std::move(bs);
  j["pi"] = io_detail::vector_json(params.pi);
  nlohmann::ordered_json as = nlohmann::ordered_json::array();
  for (const auto& m : params.alpha) as.push_back(io_detail::matrix_json(m));
  j["alpha"] = std::move(as);
  j["q"] = io_detail::vector_json(params.q);
  j["Q"] = io_detail::matrix_json(params.Q);
  j["d"] = io_detail::vector_json(params.d);
  j["psi"] = io_detail::matrix_json(params.psi);
  j["tau"] = io_detail::vector_json(params.tau);
  return j;
}

inline QMHMMParams params_from_json(const nlohmann::json& j) {
  QMHMMParams p;
  for (const char* key : {"beta", "b", "pi", "alpha", "q", "Q", "d", "psi", "tau"})
    if (!j.contains(key))
      throw std::runtime_error(std::string("params json: missing key '") + key + "'");
  p.beta = io_detail::json_matrix(j["beta"], "beta");
  for (const auto& m : j["b"]) p.b.push_back(io_detail::json_matrix(m, "b"));
  p.pi = io_detail::json_vector(j["pi"], "pi");
  for (const auto& m : j["alpha"])
    p.alpha.push_back(io_detail::json_matrix(m, "alpha"));
  p.q = io_detail::json_vector(j["q"], "q");
  p.Q = io_detail::json_matrix(j["Q"], "Q");
  p.d = io_detail::json_vector(j["d"], "d");
  p.psi = io_detail::json_matrix(j["psi"], "psi");
  p.tau = io_detail::json_vector(j["tau"], "tau");
  return p;
}

inline void write_params_json(const std::string& path, const QMHMMParams& params) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open output file '" + path + "'");
  out << params_to_json(params).dump(2) << '\n';
}

inline QMHMMParams read_params_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open params file '" + path + "'");
  nlohmann::json j;
  in >> j;
  return params_from_json(j);
}

// ---- flattened parameter names (bootstrap CSV) ----

inline std::vector<std::pair<std::string, double>> flatten_params(
    const QMHMMParams& p) {
  std::vector<std::pair<std::string, double>> out;
  auto tag = [](const std::string& base, int r, int c) {
    return base + "." + std::to_string(r + 1) + "." + std::to_string(c + 1);
  };
  for (Eigen::Index r = 0; r < p.beta.rows(); ++r)
    for (Eigen::Index c = 0; c < p.beta.cols(); ++c)
      out.emplace_back(tag("beta", static_cast<int>(r), static_cast<int>(c)),
                       p.beta(r, c));
  for (std::size_t g = 0; g < p.b.size(); ++g)
    for (Eigen::Index r = 0; r < p.b[g].rows(); ++r)
      for (Eigen::Index c = 0; c < p.b[g].cols(); ++c)
        out.emplace_back("b." + std::to_string(g + 1) + "." +
                             std::to_string(r + 1) + "." + std::to_string(c + 1),
                         p.b[g](r, c));
  for (Eigen::Index g = 0; g < p.pi.size(); ++g)
    out.emplace_back("pi." + std::to_string(g + 1), p.pi[g]);
  for (std::size_t j = 0; j < p.alpha.size(); ++j)
    for (Eigen::Index r = 0; r < p.alpha[j].rows(); ++r)
      for (Eigen::Index c = 0; c < p.alpha[j].cols(); ++c)
        out.emplace_back("alpha." + std::to_string(j + 1) + "." +
                             std::to_string(r + 1) + "." + std::to_string(c + 1),
                         p.alpha[j](r, c));
  for (Eigen::Index j = 0; j < p.q.size(); ++j)
    out.emplace_back("q." + std::to_string(j + 1), p.q[j]);
  for (Eigen::Index j = 0; j < p.Q.rows(); ++j)
    for (Eigen::Index k = 0; k < p.Q.cols(); ++k)
      out.emplace_back(tag("Q", static_cast<int>(j), static_cast<int>(k)),
                       p.Q(j, k));
  for (Eigen::Index c = 0; c < p.d.size(); ++c)
    out.emplace_back("d." + std::to_string(c + 1), p.d[c]);
  for (Eigen::Index r = 0; r < p.psi.rows(); ++r)
    for (Eigen::Index c = r + 1; c < p.psi.cols(); ++c)
      out.emplace_back(tag("psi", static_cast<int>(r), static_cast<int>(c)),
                       p.psi(r, c));
  return out;
}

// ---- artifact writers ----

inline void write_fit_summary_csv(const std::string& path, const FitResult& fit,
                                  int n_subjects, int n_obs) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open output file '" + path + "'");
  out << "loglik,iterations,converged,retained,n_params,aic,bic,n_subjects,n_obs";
  const int p = fit.params.p();
  for (int r = 0; r < p; ++r)
    for (int c = r + 1; c < p; ++c)
      out << ",r_" << (r + 1) << "_" << (c + 1);
  out << '\n';
  out << fmt_double(fit.loglik) << ',' << fit.iterations << ','
      << (fit.converged ? 1 : 0) << ',' << (fit.retained ? 1 : 0) << ','
      << fit.n_free_params << ',' << fmt_double(fit.aic) << ','
      << fmt_double(fit.bic) << ',' << n_subjects << ',' << n_obs;
  for (int r = 0; r < p; ++r)
    for (int c = r + 1; c < p; ++c)
      out << ',' << fmt_double(fit.response_correlation(r, c));
  out << '\n';
}

inline void write_posteriors_csv(const std::string& path,
                                 const LongitudinalDataset& data,
                                 const PosteriorSet& post) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open output file '" + path + "'");
  out << "id,time,state,state_prob,component,component_prob\n";
  for (int i = 0; i < data.n_subjects(); ++i) {
    int comp = 0;
    for (int g = 1; g < post.G; ++g)
      if (post.w_hat(i, g) > post.w_hat(i, comp)) comp = g;
    for (int t = 0; t < data.n_obs(i); ++t) {
      int state = 0;
      for (int j = 1; j < post.M; ++j)
        if (post.u(i, t, j) > post.u(i, t, state)) state = j;
      out << data.subject(i).id << ',' << (t + 1) << ',' << (state + 1) << ','
          << fmt_double(post.u(i, t, state)) << ',' << (comp + 1) << ','
          << fmt_double(post.w_hat(i, comp)) << '\n';
    }
  }
}

inline void write_grid_csv(const std::string& path, const GridResult& grid) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open output file '" + path + "'");
  out << "G,M,loglik,n_params,AIC,BIC,retained,converged\n";
  for (const auto& cell : grid.entries) {
    out << cell.G << ',' << cell.M << ',' << fmt_double(cell.fit.loglik) << ','
        << cell.fit.n_free_params << ',' << fmt_double(cell.fit.aic) << ','
        << fmt_double(cell.fit.bic) << ',' << (cell.fit.retained ? 1 : 0) << ','
        << (cell.fit.converged ? 1 : 0) << '\n';
  }
}

inline void write_bootstrap_csv(const std::string& path,
                                const BootstrapResult& boot) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open output file '" + path + "'");
  out << "parameter,estimate,se,z\n";
  const auto est = flatten_params(boot.point.params);
  const auto se = flatten_params(boot.se);
  for (std::size_t i = 0; i < est.size(); ++i) {
    const double z = se[i].second > 0.0 ? est[i].second / se[i].second : 0.0;
    out << est[i].first << ',' << fmt_double(est[i].second) << ','
        << fmt_double(se[i].second) << ',' << fmt_double(z) << '\n';
  }
}

inline void write_bootstrap_summary_csv(const std::string& path,
                                        const BootstrapResult& boot, int H) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open output file '" + path + "'");
  out << "H_requested,H_success,failed\n";
  out << H << ',' << boot.n_success << ',' << boot.n_failed << '\n';
}

inline void write_study_csv(const std::string& path, const StudyReport& rep) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open output file '" + path + "'");
  out << "parameter,truth,arb_percent,rmse\n";
  auto emit = [&](const std::string& base, const Eigen::MatrixXd& truth,
                  const Eigen::MatrixXd& a, const Eigen::MatrixXd& r) {
    for (Eigen::Index i = 0; i < truth.rows(); ++i)
      for (Eigen::Index c = 0; c < truth.cols(); ++c)
        out << base << (i + 1) << (c + 1) << ',' << fmt_double(truth(i, c))
            << ',' << fmt_double(a(i, c)) << ',' << fmt_double(r(i, c)) << '\n';
  };
  if (rep.beta_arb.size() > 0)
    emit("beta", rep.beta_truth, rep.beta_arb, rep.beta_rmse);
  if (rep.alpha_arb.size() > 0)
    emit("alpha", rep.alpha_truth, rep.alpha_arb, rep.alpha_rmse);
}

inline void write_selection_csv(const std::string& path, const StudyReport& rep,
                                const std::vector<int>& M_range) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open output file '" + path + "'");
  out << "M,aic_count,bic_count\n";
  for (int m : M_range) {
    const auto a = rep.aic_m_counts.find(m);
    const auto b = rep.bic_m_counts.find(m);
    out << m << ',' << (a == rep.aic_m_counts.end() ? 0 : a->second) << ','
        << (b == rep.bic_m_counts.end() ? 0 : b->second) << '\n';
  }
}

inline void write_estimates_csv(const std::string& path, const StudyReport& rep) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open output file '" + path + "'");
  out << "replication,parameter,estimate\n";
  for (std::size_t r = 0; r < rep.beta_estimates.size(); ++r) {
    const auto& bm = rep.beta_estimates[r];
    for (Eigen::Index i = 0; i < bm.rows(); ++i)
      for (Eigen::Index c = 0; c < bm.cols(); ++c)
        out << (r + 1) << ",beta" << (i + 1) << (c + 1) << ','
            << fmt_double(bm(i, c)) << '\n';
    const auto& am = rep.alpha_estimates[r];
    for (Eigen::Index i = 0; i < am.rows(); ++i)
      for (Eigen::Index c = 0; c < am.cols(); ++c)
        out << (r + 1) << ",alpha" << (i + 1) << (c + 1) << ','
            << fmt_double(am(i, c)) << '\n';
  }
}

inline void write_samples_csv(const std::string& path, const Eigen::MatrixXd& m) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open output file '" + path + "'");
  for (Eigen::Index c = 0; c < m.cols(); ++c)
    out << (c ? "," : "") << "y" << (c + 1);
  out << '\n';
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c)
      out << (c ? "," : "") << fmt_double(m(r, c));
    out << '\n';
  }
}

}  // namespace qmhmm
