// Independent oracle routes used by the tests. Everything here deliberately
// avoids the precision-matrix / capacitance-matrix code paths of the library:
// posteriors come from dense joint-Gaussian conditioning, likelihoods from
// dense covariance factorizations, and minimizers from finite differences.
#pragma once

#include "sparsefa/core.hpp"

#include <cstdlib>
#include <filesystem>
#include <functional>
#include <string>

namespace oracles {

using sparsefa::Mat;
using sparsefa::Vec;

// Posterior of f given y = L f + eps by conditioning the joint Gaussian
// [f; y] ~ N(0, [[I, L'], [L, L L' + diag(psi)]]) with a plain dense inverse.
struct DensePosterior {
  Vec mean;
  Mat cov;
};

inline DensePosterior dense_conditioning(const Mat& loadings, const Vec& psi,
                                         const Vec& residuals) {
  const int k = static_cast<int>(loadings.cols());
  Mat cov_yy = loadings * loadings.transpose();
  cov_yy += psi.asDiagonal();
  const Mat cov_yy_inv = cov_yy.inverse();
  DensePosterior out;
  out.mean = loadings.transpose() * cov_yy_inv * residuals;
  out.cov = Mat::Identity(k, k) -
            loadings.transpose() * cov_yy_inv * loadings;
  return out;
}

inline double dense_gaussian_loglik(const Vec& residuals, const Mat& cov) {
  const int n = static_cast<int>(residuals.size());
  Eigen::LLT<Mat> llt(cov);
  double logdet = 0.0;
  for (int t = 0; t < n; ++t) logdet += 2.0 * std::log(llt.matrixL()(t, t));
  return -0.5 * (n * std::log(2.0 * M_PI) + logdet +
                 residuals.dot(llt.solve(residuals)));
}

// Per-user marginal log-likelihood through the dense n_i x n_i covariance
// (no Woodbury / determinant lemma anywhere).
inline double dense_marginal_loglik(const sparsefa::ModelParams& params,
                                    const sparsefa::RatingsTriples& data,
                                    const sparsefa::BipartiteIndex& index) {
  const sparsefa::AugmentedLoadings aug =
      sparsefa::AugmentedLoadings::from_params(params);
  double ll = 0.0;
  for (int i = 0; i < data.n_users; ++i) {
    const auto& owned = index.by_user[i];
    if (owned.empty()) continue;
    const int n = static_cast<int>(owned.size());
    Mat l(n, aug.k_aug());
    Vec psi(n), r(n);
    for (int t = 0; t < n; ++t) {
      const sparsefa::Entry& en = data.entries[owned[t]];
      l.row(t) = aug.rows.row(en.item);
      psi[t] = params.noise(en.item);
      r[t] = en.rating - en.x.dot(params.beta);
    }
    Mat cov = l * l.transpose();
    cov += psi.asDiagonal();
    ll += dense_gaussian_loglik(r, cov);
  }
  return ll;
}

// Exact marginal log-likelihood for both-intercept variants through the full
// N x N covariance of all observed ratings:
// Cov(y_e, y_e') = [same user](l'l + sigma2_a) + [same item] sigma2_b
//                  + [e = e'] sigma2_e.
inline double dense_crossed_loglik(const sparsefa::ModelParams& params,
                                   const sparsefa::RatingsTriples& data) {
  const int n = data.n_obs();
  Mat cov(n, n);
  Vec r(n);
  for (int e = 0; e < n; ++e) {
    const sparsefa::Entry& a = data.entries[e];
    r[e] = a.rating - a.x.dot(params.beta);
    for (int e2 = 0; e2 < n; ++e2) {
      const sparsefa::Entry& b = data.entries[e2];
      double v = 0.0;
      if (a.user == b.user)
        v += params.loadings.row(a.item).dot(params.loadings.row(b.item)) +
             params.sigma2_a;
      if (a.item == b.item) v += params.sigma2_b;
      if (e == e2) v += params.sigma2_e;
      cov(e, e2) = v;
    }
  }
  return dense_gaussian_loglik(r, cov);
}

// Minimizes a quadratic function by finite-difference Newton from zero.
inline Vec quadratic_minimize(const std::function<double(const Vec&)>& f, int dim,
                              double h = 1e-4) {
  Vec g(dim);
  Mat hess(dim, dim);
  const Vec x0 = Vec::Zero(dim);
  const double f0 = f(x0);
  for (int i = 0; i < dim; ++i) {
    Vec e = Vec::Zero(dim);
    e[i] = h;
    const double fp = f(x0 + e), fm = f(x0 - e);
    g[i] = (fp - fm) / (2.0 * h);
    hess(i, i) = (fp - 2.0 * f0 + fm) / (h * h);
  }
  for (int i = 0; i < dim; ++i)
    for (int j = i + 1; j < dim; ++j) {
      Vec e = Vec::Zero(dim);
      e[i] = h;
      e[j] = h;
      const double fpp = f(x0 + e), fmm = f(x0 - e);
      Vec ei = Vec::Zero(dim), ej = Vec::Zero(dim);
      ei[i] = h;
      ej[j] = h;
      const double fip = f(x0 + ei - ej), fjp = f(x0 - ei + ej);
      hess(i, j) = hess(j, i) = (fpp + fmm - fip - fjp) / (4.0 * h * h);
    }
  return hess.ldlt().solve(-g);
}

// MovieLens-100K directory, when available: $ML100K_DIR, else data/ml-100k.
inline std::optional<std::string> ml100k_dir() {
  namespace fs = std::filesystem;
  if (const char* env = std::getenv("ML100K_DIR")) {
    if (fs::exists(fs::path(env) / "u.data")) return std::string(env);
  }
  for (const char* cand : {"data/ml-100k", "../data/ml-100k", "../../data/ml-100k"})
    if (fs::exists(fs::path(cand) / "u.data")) return std::string(cand);
  return std::nullopt;
}

}  // namespace oracles
