#pragma once

#include "sparsefa/core.hpp"

#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace sparsefa {

using nlohmann::json;

namespace detail {

inline json vec_to_json(const Vec& v) {
  json out = json::array();
  for (int i = 0; i < v.size(); ++i) out.push_back(v[i]);
  return out;
}

inline json mat_to_json(const Mat& m) {
  json out = json::array();
  for (int i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (int j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    out.push_back(row);
  }
  return out;
}

inline Vec vec_from_json(const json& j) {
  Vec v(j.size());
  for (size_t i = 0; i < j.size(); ++i) v[i] = j[i].get<double>();
  return v;
}

inline Mat mat_from_json(const json& j, int expected_cols = -1) {
  const int rows = static_cast<int>(j.size());
  const int cols = rows ? static_cast<int>(j[0].size()) : std::max(expected_cols, 0);
  Mat m(rows, cols);
  for (int i = 0; i < rows; ++i) {
    if (static_cast<int>(j[i].size()) != cols)
      throw Error("ragged matrix in params file");
    for (int c = 0; c < cols; ++c) m(i, c) = j[i][c].get<double>();
  }
  return m;
}

inline void write_text(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  out << content;
}

}  // namespace detail

// --------------------------------------------------------------------------
// Canonical ratings file: header `user item rating x_1 ... x_p`, then
// space-separated rows; reals with 17 significant digits.
// --------------------------------------------------------------------------

inline void write_ratings_file(const std::string& path,
                               const RatingsTriples& data) {
  std::ostringstream out;
  out << "user item rating";
  for (int t = 1; t <= data.p; ++t) out << " x_" << t;
  out << "\n";
  char buf[64];
  for (const Entry& en : data.entries) {
    out << en.user << ' ' << en.item;
    std::snprintf(buf, sizeof(buf), " %.17g", en.rating);
    out << buf;
    for (int t = 0; t < data.p; ++t) {
      std::snprintf(buf, sizeof(buf), " %.17g", en.x[t]);
      out << buf;
    }
    out << "\n";
  }
  detail::write_text(path, out.str());
}

inline RatingsTriples read_ratings_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw EmptyInput("empty ratings file " + path);
  std::istringstream hs(line);
  std::vector<std::string> header;
  for (std::string tok; hs >> tok;) header.push_back(tok);
  if (header.size() < 3 || header[0] != "user" || header[1] != "item" ||
      header[2] != "rating")
    throw MalformedLine("bad ratings header in " + path, 1);
  RatingsTriples data;
  data.p = static_cast<int>(header.size()) - 3;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    Entry en;
    en.x = Vec::Zero(data.p);
    if (!(ls >> en.user >> en.item >> en.rating))
      throw MalformedLine("bad ratings row", lineno);
    for (int t = 0; t < data.p; ++t)
      if (!(ls >> en.x[t])) throw MalformedLine("missing covariate", lineno);
    data.n_users = std::max(data.n_users, en.user + 1);
    data.n_items = std::max(data.n_items, en.item + 1);
    data.entries.push_back(std::move(en));
  }
  return data;
}

// --------------------------------------------------------------------------
// Params file (JSON): model parameters plus the posterior summary, or the
// baseline factorization.
// --------------------------------------------------------------------------

struct ParamsFile {
  ModelParams params;
  PosteriorSummary posterior;
  int n_users = 0;
  std::vector<int> unrated_items;  // kept initialized loadings; predict falls back
};

inline json params_to_json(const ParamsFile& pf) {
  const ModelParams& params = pf.params;
  json j;
  j["variant"] = variant_name(params.variant);
  j["k"] = params.k;
  j["n_users"] = pf.n_users;
  j["n_items"] = params.n_items();
  j["p"] = params.p();
  j["beta"] = detail::vec_to_json(params.beta);
  j["loadings"] = detail::mat_to_json(params.loadings);
  if (params.shared_noise())
    j["psi"] = params.sigma2_e;
  else
    j["psi"] = detail::vec_to_json(params.psi);
  if (has_client_intercept(params.variant)) j["sigma2_a"] = params.sigma2_a;
  if (has_item_intercept(params.variant)) j["sigma2_b"] = params.sigma2_b;
  json post;
  json means = json::array(), covs = json::array();
  for (const UserPosterior& u : pf.posterior.users) {
    means.push_back(detail::vec_to_json(u.mean));
    json cov_row = json::array();  // row-major flattened covariance
    for (int r = 0; r < u.cov.rows(); ++r)
      for (int c = 0; c < u.cov.cols(); ++c) cov_row.push_back(u.cov(r, c));
    covs.push_back(cov_row);
  }
  post["user_mean"] = means;
  post["user_cov"] = covs;
  if (pf.posterior.item_mean.size()) {
    post["item_mean"] = detail::vec_to_json(pf.posterior.item_mean);
    post["item_var"] = detail::vec_to_json(pf.posterior.item_var);
  }
  j["posterior"] = post;
  j["unrated_items"] = pf.unrated_items;
  return j;
}

inline ParamsFile params_from_json(const json& j) {
  ParamsFile pf;
  ModelParams& params = pf.params;
  params.variant = parse_variant(j.at("variant").get<std::string>());
  params.k = j.at("k").get<int>();
  pf.n_users = j.at("n_users").get<int>();
  const int c = j.at("n_items").get<int>();
  params.beta = detail::vec_from_json(j.at("beta"));
  params.loadings = detail::mat_from_json(j.at("loadings"), params.k);
  if (params.loadings.rows() != c) params.loadings.resize(c, params.k);
  if (j.at("psi").is_number())
    params.sigma2_e = j.at("psi").get<double>();
  else
    params.psi = detail::vec_from_json(j.at("psi"));
  if (j.contains("sigma2_a")) params.sigma2_a = j.at("sigma2_a").get<double>();
  if (j.contains("sigma2_b")) params.sigma2_b = j.at("sigma2_b").get<double>();
  const json& post = j.at("posterior");
  const int kp = params.k_aug();
  for (size_t i = 0; i < post.at("user_mean").size(); ++i) {
    UserPosterior u;
    u.mean = detail::vec_from_json(post.at("user_mean")[i]);
    const json& flat = post.at("user_cov")[i];
    u.cov.resize(kp, kp);
    for (int r = 0; r < kp; ++r)
      for (int col = 0; col < kp; ++col)
        u.cov(r, col) = flat[r * kp + col].get<double>();
    pf.posterior.users.push_back(std::move(u));
  }
  if (post.contains("item_mean")) {
    pf.posterior.item_mean = detail::vec_from_json(post.at("item_mean"));
    pf.posterior.item_var = detail::vec_from_json(post.at("item_var"));
  }
  if (j.contains("unrated_items"))
    pf.unrated_items = j.at("unrated_items").get<std::vector<int>>();
  return pf;
}

inline void save_params(const std::string& path, const ParamsFile& pf) {
  detail::write_text(path, params_to_json(pf).dump(2) + "\n");
}

inline ParamsFile load_params(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  json j;
  in >> j;
  return params_from_json(j);
}

inline json report_to_json(const FitReport& report) {
  json j;
  j["iterations"] = report.iterations;
  j["objective_trace"] = report.objective_trace;
  j["converged"] = report.converged;
  j["seconds_per_iteration"] = report.seconds_per_iteration;
  j["never_rated_items"] = report.never_rated_items;
  return j;
}

inline void save_report(const std::string& path, const FitReport& report) {
  detail::write_text(path, report_to_json(report).dump(2) + "\n");
}

}  // namespace sparsefa
