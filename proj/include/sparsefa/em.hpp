#pragma once

#include "sparsefa/core.hpp"
#include "sparsefa/rng.hpp"

#include <chrono>
#include <limits>

namespace sparsefa {

namespace detail {

inline void check_finite_params(const ModelParams& params) {
  if (!params.beta.allFinite() || !params.loadings.allFinite())
    throw NonFiniteInput("non-finite model parameters");
  if (params.shared_noise()) {
    if (!std::isfinite(params.sigma2_e) || params.sigma2_e <= 0)
      throw NonFiniteInput("invalid shared noise variance");
  } else {
    if (!params.psi.allFinite() || (params.psi.array() <= 0).any())
      throw NonFiniteInput("invalid per-item noise variance");
  }
  if (has_client_intercept(params.variant) &&
      (!std::isfinite(params.sigma2_a) || params.sigma2_a < 0))
    throw NonFiniteInput("invalid client intercept variance");
}

inline Mat second_moment(const UserPosterior& u) {
  return u.cov + u.mean * u.mean.transpose();
}

}  // namespace detail

// Exact E-step: for each user the Gaussian posterior of the augmented factor,
//   Sigma_i = (I + sum_j z_ij l~_j l~_j' / Psi_jj)^-1
//   mu_i    = Sigma_i sum_j z_ij (y_ij - x_ij'beta) l~_j / Psi_jj.
// Users with no observed ratings keep the prior (0, I).
inline PosteriorSummary e_step(const ModelParams& params,
                               const RatingsTriples& data,
                               const BipartiteIndex& index) {
  detail::check_finite_params(params);
  const AugmentedLoadings aug = AugmentedLoadings::from_params(params);
  const int kp = aug.k_aug();
  PosteriorSummary post;
  post.users.resize(data.n_users);
  for (int i = 0; i < data.n_users; ++i) {
    Mat a = Mat::Identity(kp, kp);
    Vec h = Vec::Zero(kp);
    for (int e : index.by_user[i]) {
      const Entry& en = data.entries[e];
      const double w = 1.0 / params.noise(en.item);
      const Vec lj = aug.rows.row(en.item);
      a.noalias() += w * lj * lj.transpose();
      h.noalias() += w * (en.rating - en.x.dot(params.beta)) * lj;
    }
    Eigen::LLT<Mat> llt(a);
    if (llt.info() != Eigen::Success)
      throw NonPositiveDefinite("posterior precision not positive definite");
    UserPosterior& u = post.users[i];
    u.cov = llt.solve(Mat::Identity(kp, kp));
    u.cov = 0.5 * (u.cov + u.cov.transpose()).eval();
    u.mean = llt.solve(h);
  }
  return post;
}

// Fixed-effect update: beta = (sum z x x')^-1 sum z (y - mu_i' l~_j) x.
inline Vec m_step_beta(const RatingsTriples& data, const BipartiteIndex&,
                       const PosteriorSummary& post,
                       const AugmentedLoadings& aug) {
  const int p = data.p;
  if (p == 0) return Vec();
  Mat gram = Mat::Zero(p, p);
  Vec rhs = Vec::Zero(p);
  for (const Entry& en : data.entries) {
    gram.noalias() += en.x * en.x.transpose();
    const double fitted = post.users[en.user].mean.dot(aug.rows.row(en.item));
    rhs.noalias() += (en.rating - fitted) * en.x;
  }
  Eigen::FullPivLU<Mat> lu(gram);
  if (!lu.isInvertible())
    throw SingularGram("covariate Gram matrix is singular (collinear covariates)");
  return lu.solve(rhs);
}

// Loadings update, item by item. For client-intercept variants only the first
// K coordinates are free; the shared last coordinate sigma_a is handled by
// m_step_sigma_a. Items with no observed ratings keep their current row.
inline Mat m_step_loadings(const RatingsTriples& data,
                           const BipartiteIndex& index,
                           const PosteriorSummary& post, const Vec& beta,
                           std::optional<double> sigma_a_current,
                           const Mat& current_loadings) {
  const int k = static_cast<int>(current_loadings.cols());
  Mat out = current_loadings;
  if (k == 0) return out;
  for (int j = 0; j < data.n_items; ++j) {
    const auto& owned = index.by_item[j];
    if (owned.empty()) continue;
    Mat s = Mat::Zero(k, k);
    Vec rhs = Vec::Zero(k);
    for (int e : owned) {
      const Entry& en = data.entries[e];
      const UserPosterior& u = post.users[en.user];
      const double r = en.rating - en.x.dot(beta);
      s.noalias() += u.cov.topLeftCorner(k, k) +
                     u.mean.head(k) * u.mean.head(k).transpose();
      rhs.noalias() += r * u.mean.head(k);
      if (sigma_a_current) {
        // cross second moment between factor block and absorbed intercept
        const Vec m_fa = u.cov.col(k).head(k) + u.mean.head(k) * u.mean[k];
        rhs.noalias() -= *sigma_a_current * m_fa;
      }
    }
    Eigen::LLT<Mat> llt(s);
    if (llt.info() != Eigen::Success)
      throw SingularItemMoment("item factor moment not positive definite for item " +
                               std::to_string(j));
    out.row(j) = llt.solve(rhs).transpose();
  }
  return out;
}

// Client intercept variance from the exact posterior: a_i equals the absorbed
// coordinate rescaled by the sigma_a used at the E-step, so
//   sigma2_a = sigma_a^2 / R * sum_i (mu_last^2 + Sigma_last).
inline double m_step_sigma_a(const PosteriorSummary& post,
                             double sigma_a_current, double floor_value) {
  double acc = 0.0;
  for (const UserPosterior& u : post.users) {
    const int last = static_cast<int>(u.mean.size()) - 1;
    acc += u.mean[last] * u.mean[last] + u.cov(last, last);
  }
  const double s2 =
      sigma_a_current * sigma_a_current * acc / static_cast<double>(post.users.size());
  return std::max(s2, floor_value);
}

struct NoiseEstimate {
  Vec psi;            // filled in per-item mode
  double sigma2_e = 0.0;  // filled in shared mode
};

// Noise update using the full quadratic expansion
//   E[(y - x'beta - f~'l~)^2] = r^2 - 2 r l~'mu + l~' E[f~ f~'] l~,
// which stays nonnegative under any backfitting pass order. `aug` must carry
// the sigma_a the posterior was computed under.
inline NoiseEstimate m_step_psi(const RatingsTriples& data,
                                const BipartiteIndex& index,
                                const PosteriorSummary& post, const Vec& beta,
                                const AugmentedLoadings& aug, bool shared_mode,
                                const Vec& current_psi, double floor_value) {
  NoiseEstimate out;
  double total = 0.0;
  Vec per_item = current_psi.size() ? current_psi : Vec::Constant(data.n_items, floor_value);
  for (int j = 0; j < data.n_items; ++j) {
    const auto& owned = index.by_item[j];
    if (owned.empty()) continue;
    const Vec lj = aug.rows.row(j);
    double num = 0.0;
    for (int e : owned) {
      const Entry& en = data.entries[e];
      const UserPosterior& u = post.users[en.user];
      const double r = en.rating - en.x.dot(beta);
      num += r * r - 2.0 * r * lj.dot(u.mean) +
             lj.dot(detail::second_moment(u) * lj);
    }
    total += num;
    per_item[j] = std::max(num / static_cast<double>(owned.size()), floor_value);
  }
  if (shared_mode)
    out.sigma2_e = std::max(total / static_cast<double>(data.n_obs()), floor_value);
  else
    out.psi = per_item;
  return out;
}

// Marginal log-likelihood sum_i log N(y_i | X_i beta, L~_i L~_i' + Psi_i),
// evaluated through the K'-dimensional capacitance matrix so the cost is
// linear in N. Constants are kept, values are comparable across runs.
inline double marginal_loglik(const ModelParams& params,
                              const RatingsTriples& data,
                              const BipartiteIndex& index) {
  if (has_item_intercept(params.variant))
    throw InvalidDimensions(
        "marginal likelihood factorizes per user only without item intercepts");
  if (params.shared_noise()) {
    if (params.sigma2_e <= 0) throw NonPositiveDefinite("sigma2_e must be > 0");
  } else if ((params.psi.array() <= 0).any()) {
    throw NonPositiveDefinite("Psi_jj must be > 0");
  }
  const AugmentedLoadings aug = AugmentedLoadings::from_params(params);
  const int kp = aug.k_aug();
  const double log2pi = std::log(2.0 * M_PI);
  double ll = 0.0;
  for (int i = 0; i < data.n_users; ++i) {
    const auto& owned = index.by_user[i];
    if (owned.empty()) continue;
    Mat m = Mat::Identity(kp, kp);
    Vec g = Vec::Zero(kp);
    double quad = 0.0, logdiag = 0.0;
    for (int e : owned) {
      const Entry& en = data.entries[e];
      const double psi = params.noise(en.item);
      const double w = 1.0 / psi;
      const double r = en.rating - en.x.dot(params.beta);
      const Vec lj = aug.rows.row(en.item);
      m.noalias() += w * lj * lj.transpose();
      g.noalias() += w * r * lj;
      quad += w * r * r;
      logdiag += std::log(psi);
    }
    Eigen::LLT<Mat> llt(m);
    if (llt.info() != Eigen::Success)
      throw NonPositiveDefinite("capacitance matrix not positive definite");
    double logdet_m = 0.0;
    for (int t = 0; t < kp; ++t) logdet_m += 2.0 * std::log(llt.matrixL()(t, t));
    const double n_i = static_cast<double>(owned.size());
    ll += -0.5 * (n_i * log2pi + logdiag + logdet_m + quad - g.dot(llt.solve(g)));
  }
  return ll;
}

struct EmFit {
  ModelParams params;
  PosteriorSummary posterior;
  FitReport report;
};

namespace detail {

inline Mat deterministic_loading_init(int c, int k) {
  // small fixed perturbations, symmetry-breaking but seed-free
  Mat l(c, k);
  for (int j = 0; j < c; ++j)
    for (int t = 0; t < k; ++t)
      l(j, t) = 0.1 * std::sin(0.5 * (j + 1) * (t + 1));
  return l;
}

inline ModelParams init_params(const FitOptions& opt, int p, int c) {
  ModelParams params;
  params.variant = opt.variant;
  params.k = opt.k;
  if (opt.deterministic_init) {
    params.beta = Vec::Zero(p);
    params.loadings = deterministic_loading_init(c, opt.k);
    if (opt.shared_noise)
      params.sigma2_e = 1.0;
    else
      params.psi = Vec::Ones(c);
    if (has_client_intercept(opt.variant)) params.sigma2_a = 1.0;
    if (has_item_intercept(opt.variant)) params.sigma2_b = 1.0;
    return params;
  }
  RngStream beta_rng(opt.seed, 1), load_rng(opt.seed, 2), noise_rng(opt.seed, 3),
      var_rng(opt.seed, 4);
  params.beta = Vec::Zero(p);
  for (int t = 0; t < p; ++t) params.beta[t] = beta_rng.normal();
  params.loadings.resize(c, opt.k);
  for (int j = 0; j < c; ++j)
    for (int t = 0; t < opt.k; ++t) params.loadings(j, t) = load_rng.normal();
  if (opt.shared_noise) {
    params.sigma2_e = std::max(noise_rng.chi_square_1(), opt.variance_floor);
  } else {
    params.psi.resize(c);
    for (int j = 0; j < c; ++j)
      params.psi[j] = std::max(noise_rng.chi_square_1(), opt.variance_floor);
  }
  if (has_client_intercept(opt.variant))
    params.sigma2_a = std::max(var_rng.chi_square_1(), opt.variance_floor);
  if (has_item_intercept(opt.variant))
    params.sigma2_b = std::max(var_rng.chi_square_1(), opt.variance_floor);
  return params;
}

}  // namespace detail

// Exact EM (one E-step, then one or more backfitting passes of block updates
// beta -> loadings -> sigma_a -> noise per iteration). All M-step expectations
// use the sigma_a in force at the E-step, so every block update maximizes the
// expected complete-data likelihood exactly and the marginal log-likelihood
// trace is nondecreasing.
inline EmFit fit_em(const RatingsTriples& data, const FitOptions& opt) {
  validate_options(opt);
  if (is_variational(opt.variant))
    throw InvalidDimensions("variant " + variant_name(opt.variant) +
                            " requires the variational solver");
  const BipartiteIndex index = validate_and_index(data);
  EmFit fit;
  fit.params = detail::init_params(opt, data.p, data.n_items);
  ModelParams& params = fit.params;
  FitReport& report = fit.report;
  for (int j = 0; j < data.n_items; ++j)
    if (index.by_item[j].empty()) report.never_rated_items.push_back(j);

  const bool client = has_client_intercept(opt.variant);
  double prev_ll = -std::numeric_limits<double>::infinity();
  for (int iter = 1; iter <= opt.max_iter; ++iter) {
    const auto t0 = std::chrono::steady_clock::now();
    fit.posterior = e_step(params, data, index);
    // posterior moments of a_i scale with the E-step's sigma_a; keep it fixed
    // across the backfitting passes of this iteration
    const std::optional<double> sa_estep =
        client ? std::optional<double>(params.sigma_a()) : std::nullopt;
    for (int pass = 0; pass < opt.backfit_passes; ++pass) {
      AugmentedLoadings aug = AugmentedLoadings::build(params.loadings, sa_estep);
      params.beta = m_step_beta(data, index, fit.posterior, aug);
      params.loadings = m_step_loadings(data, index, fit.posterior, params.beta,
                                        sa_estep, params.loadings);
      if (client)
        params.sigma2_a =
            m_step_sigma_a(fit.posterior, *sa_estep, opt.variance_floor);
      aug = AugmentedLoadings::build(params.loadings, sa_estep);
      NoiseEstimate noise =
          m_step_psi(data, index, fit.posterior, params.beta, aug,
                     opt.shared_noise, params.psi, opt.variance_floor);
      if (opt.shared_noise)
        params.sigma2_e = noise.sigma2_e;
      else
        params.psi = noise.psi;
    }
    const double ll = marginal_loglik(params, data, index);
    report.objective_trace.push_back(ll);
    report.seconds_per_iteration.push_back(
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    report.iterations = iter;
    const double rel = std::abs(ll - prev_ll) / (1.0 + std::abs(ll));
    prev_ll = ll;
    if (rel <= opt.tol) {
      report.converged = true;
      break;
    }
  }
  // final posterior consistent with the returned parameters
  fit.posterior = e_step(params, data, index);
  return fit;
}

}  // namespace sparsefa
