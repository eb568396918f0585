#pragma once

#include "sparsefa/core.hpp"
#include "sparsefa/em.hpp"

#include <chrono>
#include <limits>

namespace sparsefa {

// Factored variational posterior: per-user Gaussian over the augmented factor
// (stored in the absorbed coordinates, last coordinate a_i / sigma_a) and
// per-item Gaussian over b_j. `sigma_a_estep` records the sigma_a the user
// block was computed under, so a_i moments stay well defined while the
// parameters move during an M-step.
struct VariationalState {
  std::vector<UserPosterior> users;  // dim K+1
  Vec b_mean;
  Vec b_var;
  double sigma_a_estep = 1.0;

  PosteriorSummary to_posterior() const {
    PosteriorSummary post;
    post.users = users;
    post.item_mean = b_mean;
    post.item_var = b_var;
    return post;
  }
};

namespace detail {

// Augmented loadings consistent with the scale the user block was computed
// under; used wherever E_q[f'l + a] is needed.
inline AugmentedLoadings state_loadings(const ModelParams& params,
                                        const VariationalState& state) {
  return AugmentedLoadings::build(params.loadings, state.sigma_a_estep);
}

inline void check_state_finite(const VariationalState& state) {
  for (const UserPosterior& u : state.users)
    if (!u.mean.allFinite() || !u.cov.allFinite())
      throw NonFiniteInput("non-finite variational user block");
  if (!state.b_mean.allFinite() || !state.b_var.allFinite())
    throw NonFiniteInput("non-finite variational item block");
}

}  // namespace detail

// Coordinate update of the item-intercept block:
//   var_b,j = (n_j / sigma2_e + 1 / sigma2_b)^-1,
//   mu_b,j  = var_b,j sum_i z_ij (y_ij - x'beta - E_q[f~'l~]) / sigma2_e.
// Items with no ratings keep the prior (0, sigma2_b).
inline void update_q_b(VariationalState& state, const ModelParams& params,
                       const RatingsTriples& data, const BipartiteIndex& index) {
  detail::check_finite_params(params);
  detail::check_state_finite(state);
  const AugmentedLoadings aug = detail::state_loadings(params, state);
  const double se2 = params.sigma2_e;
  state.b_mean = Vec::Zero(data.n_items);
  state.b_var = Vec::Constant(data.n_items, params.sigma2_b);
  for (int j = 0; j < data.n_items; ++j) {
    const auto& owned = index.by_item[j];
    if (owned.empty()) continue;
    const double var =
        1.0 / (static_cast<double>(owned.size()) / se2 + 1.0 / params.sigma2_b);
    double acc = 0.0;
    for (int e : owned) {
      const Entry& en = data.entries[e];
      acc += en.rating - en.x.dot(params.beta) -
             state.users[en.user].mean.dot(aug.rows.row(j));
    }
    state.b_var[j] = var;
    state.b_mean[j] = var * acc / se2;
  }
}

// Coordinate update of the user block over the augmented factor:
//   Sigma_i = (sum_j z_ij l~_j l~_j' / sigma2_e + I)^-1,
//   mu_i    = Sigma_i sum_j z_ij (y_ij - x'beta - mu_b,j) l~_j / sigma2_e,
// with l~_j = (l_j, sigma_a) at the current parameters.
inline void update_q_f(VariationalState& state, const ModelParams& params,
                       const RatingsTriples& data, const BipartiteIndex& index) {
  detail::check_finite_params(params);
  detail::check_state_finite(state);
  const AugmentedLoadings aug = AugmentedLoadings::from_params(params);
  const int kp = aug.k_aug();
  const double se2 = params.sigma2_e;
  for (int i = 0; i < data.n_users; ++i) {
    Mat a = Mat::Identity(kp, kp);
    Vec h = Vec::Zero(kp);
    for (int e : index.by_user[i]) {
      const Entry& en = data.entries[e];
      const Vec lj = aug.rows.row(en.item);
      a.noalias() += lj * lj.transpose() / se2;
      h.noalias() +=
          (en.rating - en.x.dot(params.beta) - state.b_mean[en.item]) * lj / se2;
    }
    Eigen::LLT<Mat> llt(a);
    if (llt.info() != Eigen::Success)
      throw NonPositiveDefinite("variational precision not positive definite");
    state.users[i].cov = llt.solve(Mat::Identity(kp, kp));
    state.users[i].cov =
        0.5 * (state.users[i].cov + state.users[i].cov.transpose()).eval();
    state.users[i].mean = llt.solve(h);
  }
  state.sigma_a_estep = params.sigma_a();
}

// Evidence lower bound F(q, theta) = E_q[log p(Y, f, a, b | theta)] + H(q),
// evaluated in the original variables (a_i unpacked through the recorded
// E-step sigma_a) with all constants kept.
inline double compute_elbo(const VariationalState& state,
                           const ModelParams& params, const RatingsTriples& data,
                           const BipartiteIndex& index) {
  detail::check_state_finite(state);
  const int k = params.k;
  const double s2 = state.sigma_a_estep * state.sigma_a_estep;
  const double se2 = params.sigma2_e;
  const double sb2 = params.sigma2_b;
  const double sa2 = params.sigma2_a;
  const double log2pi = std::log(2.0 * M_PI);
  if (se2 <= 0 || sb2 <= 0) throw NonPositiveDefinite("noise variances must be > 0");
  const AugmentedLoadings aug = detail::state_loadings(params, state);

  double f = 0.0;
  // observation term
  for (const Entry& en : data.entries) {
    const UserPosterior& u = state.users[en.user];
    const Vec lj = aug.rows.row(en.item);
    const double r =
        en.rating - en.x.dot(params.beta) - u.mean.dot(lj) - state.b_mean[en.item];
    const double e2 =
        r * r + lj.dot(u.cov * lj) + state.b_var[en.item];
    f -= 0.5 * (log2pi + std::log(se2) + e2 / se2);
  }
  // user latents: factor prior, intercept prior, entropy. The log sigma_a^2
  // Jacobian of a = sigma_a * a~ cancels between prior and entropy, so only
  // the ratio to the stored E-step scale appears and the sigma_a -> 0 limit
  // stays finite.
  const double log_ratio = (sa2 == s2) ? 0.0 : std::log(sa2 / s2);
  const double scale = (sa2 == s2) ? 1.0 : s2 / sa2;
  for (int i = 0; i < data.n_users; ++i) {
    const UserPosterior& u = state.users[i];
    f -= 0.5 * (k * log2pi + u.mean.head(k).squaredNorm() +
                u.cov.topLeftCorner(k, k).trace());
    f -= 0.5 * (log2pi + log_ratio + scale * (u.mean[k] * u.mean[k] + u.cov(k, k)));
    Eigen::LLT<Mat> llt(u.cov);
    if (llt.info() != Eigen::Success)
      throw NonPositiveDefinite("variational covariance not positive definite");
    double logdet = 0.0;
    for (int t = 0; t <= k; ++t) logdet += 2.0 * std::log(llt.matrixL()(t, t));
    f += 0.5 * ((k + 1) * (1.0 + log2pi) + logdet);
  }
  // item intercepts: prior and entropy
  for (int j = 0; j < data.n_items; ++j) {
    if (state.b_var[j] <= 0)
      throw NonPositiveDefinite("variational item variance must be > 0");
    f -= 0.5 * (log2pi + std::log(sb2) +
                (state.b_mean[j] * state.b_mean[j] + state.b_var[j]) / sb2);
    f += 0.5 * (1.0 + log2pi + std::log(state.b_var[j]));
  }
  return f;
}

// --- variational M-step blocks (each the exact coordinate maximizer of F
// given the current q) ---

inline Vec vem_update_beta(const VariationalState& state,
                           const RatingsTriples& data, const BipartiteIndex&,
                           const ModelParams& params) {
  const int p = data.p;
  if (p == 0) return Vec();
  const AugmentedLoadings aug = detail::state_loadings(params, state);
  Mat gram = Mat::Zero(p, p);
  Vec rhs = Vec::Zero(p);
  for (const Entry& en : data.entries) {
    gram.noalias() += en.x * en.x.transpose();
    const double fitted = state.users[en.user].mean.dot(aug.rows.row(en.item)) +
                          state.b_mean[en.item];
    rhs.noalias() += (en.rating - fitted) * en.x;
  }
  Eigen::FullPivLU<Mat> lu(gram);
  if (!lu.isInvertible())
    throw SingularGram("covariate Gram matrix is singular (collinear covariates)");
  return lu.solve(rhs);
}

inline Mat vem_update_loadings(const VariationalState& state,
                               const RatingsTriples& data,
                               const BipartiteIndex& index, const Vec& beta,
                               const ModelParams& params) {
  const int k = params.k;
  Mat out = params.loadings;
  if (k == 0) return out;
  const double s = state.sigma_a_estep;
  for (int j = 0; j < data.n_items; ++j) {
    const auto& owned = index.by_item[j];
    if (owned.empty()) continue;
    Mat sm = Mat::Zero(k, k);
    Vec rhs = Vec::Zero(k);
    for (int e : owned) {
      const Entry& en = data.entries[e];
      const UserPosterior& u = state.users[en.user];
      const double r = en.rating - en.x.dot(beta) - state.b_mean[j];
      sm.noalias() += u.cov.topLeftCorner(k, k) +
                      u.mean.head(k) * u.mean.head(k).transpose();
      const Vec m_fa = u.cov.col(k).head(k) + u.mean.head(k) * u.mean[k];
      rhs.noalias() += r * u.mean.head(k) - s * m_fa;
    }
    Eigen::LLT<Mat> llt(sm);
    if (llt.info() != Eigen::Success)
      throw SingularItemMoment("item factor moment not positive definite for item " +
                               std::to_string(j));
    out.row(j) = llt.solve(rhs).transpose();
  }
  return out;
}

inline double vem_update_sigma2_a(const VariationalState& state,
                                  double floor_value) {
  double acc = 0.0;
  for (const UserPosterior& u : state.users) {
    const int last = static_cast<int>(u.mean.size()) - 1;
    acc += u.mean[last] * u.mean[last] + u.cov(last, last);
  }
  const double s2 = state.sigma_a_estep * state.sigma_a_estep * acc /
                    static_cast<double>(state.users.size());
  return std::max(s2, floor_value);
}

inline double vem_update_sigma2_b(const VariationalState& state,
                                  double floor_value) {
  const double c = static_cast<double>(state.b_mean.size());
  const double s2 =
      (state.b_mean.squaredNorm() + state.b_var.sum()) / c;
  return std::max(s2, floor_value);
}

inline double vem_update_sigma2_e(const VariationalState& state,
                                  const RatingsTriples& data, const Vec& beta,
                                  const Mat& loadings, double floor_value) {
  const AugmentedLoadings aug =
      AugmentedLoadings::build(loadings, state.sigma_a_estep);
  double acc = 0.0;
  for (const Entry& en : data.entries) {
    const UserPosterior& u = state.users[en.user];
    const Vec lj = aug.rows.row(en.item);
    const double r =
        en.rating - en.x.dot(beta) - u.mean.dot(lj) - state.b_mean[en.item];
    acc += r * r + lj.dot(u.cov * lj) + state.b_var[en.item];
  }
  return std::max(acc / static_cast<double>(data.n_obs()), floor_value);
}

// One backfitting pass, order beta -> loadings -> sigma2_a -> sigma2_b ->
// sigma2_e. Expectations are taken under the fixed q (through the stored
// E-step sigma_a), so F is nondecreasing block by block.
inline ModelParams vem_m_step(const VariationalState& state,
                              const RatingsTriples& data,
                              const BipartiteIndex& index,
                              const ModelParams& params,
                              double floor_value = 1e-6,
                              bool pin_sigma2_b = false) {
  ModelParams out = params;
  out.beta = vem_update_beta(state, data, index, params);
  out.loadings = vem_update_loadings(state, data, index, out.beta, params);
  out.sigma2_a = vem_update_sigma2_a(state, floor_value);
  if (!pin_sigma2_b) out.sigma2_b = vem_update_sigma2_b(state, floor_value);
  out.sigma2_e =
      vem_update_sigma2_e(state, data, out.beta, out.loadings, floor_value);
  return out;
}

struct VemFit {
  ModelParams params;
  VariationalState state;
  PosteriorSummary posterior;
  FitReport report;
};

// Factored variational EM for the both-intercept variants. Noise is shared
// (sigma2_e) by construction.
inline VemFit fit_vem(const RatingsTriples& data, const FitOptions& opt_in) {
  FitOptions opt = opt_in;
  opt.shared_noise = true;
  validate_options(opt);
  if (!is_variational(opt.variant))
    throw InvalidDimensions("variant " + variant_name(opt.variant) +
                            " requires the exact EM solver");
  const BipartiteIndex index = validate_and_index(data);
  VemFit fit;
  fit.params = detail::init_params(opt, data.p, data.n_items);
  if (opt.pin_sigma2_b_at_floor) fit.params.sigma2_b = opt.variance_floor;
  ModelParams& params = fit.params;
  FitReport& report = fit.report;
  for (int j = 0; j < data.n_items; ++j)
    if (index.by_item[j].empty()) report.never_rated_items.push_back(j);

  const int kp = params.k_aug();
  VariationalState& state = fit.state;
  state.users.assign(data.n_users,
                     UserPosterior{Vec::Zero(kp), Mat::Identity(kp, kp)});
  state.b_mean = Vec::Zero(data.n_items);
  state.b_var = Vec::Constant(data.n_items, params.sigma2_b);
  state.sigma_a_estep = params.sigma_a();

  double prev_f = -std::numeric_limits<double>::infinity();
  for (int iter = 1; iter <= opt.max_iter; ++iter) {
    const auto t0 = std::chrono::steady_clock::now();
    for (int sweep = 0; sweep < opt.q_sweeps; ++sweep) {
      update_q_b(state, params, data, index);
      update_q_f(state, params, data, index);
    }
    for (int pass = 0; pass < opt.backfit_passes; ++pass)
      params = vem_m_step(state, data, index, params, opt.variance_floor,
                          opt.pin_sigma2_b_at_floor);
    const double f = compute_elbo(state, params, data, index);
    report.objective_trace.push_back(f);
    report.seconds_per_iteration.push_back(
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    report.iterations = iter;
    const double rel = std::abs(f - prev_f) / (1.0 + std::abs(f));
    prev_f = f;
    if (rel <= opt.tol) {
      report.converged = true;
      break;
    }
  }
  // final variational E-step under the returned parameters
  update_q_b(state, params, data, index);
  update_q_f(state, params, data, index);
  fit.posterior = state.to_posterior();
  return fit;
}

}  // namespace sparsefa
