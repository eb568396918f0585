#pragma once

#include "sparsefa/core.hpp"
#include "sparsefa/rng.hpp"

#include <numeric>
#include <utility>

namespace sparsefa {

struct SyntheticSpec {
  int n_users = 0;
  int n_items = 0;
  int k = 0;
  int p = 0;
  int ratings_per_user = 0;
  ModelVariant variant = ModelVariant::Factor;
  std::uint64_t seed = 0;
  double sigma2_e = 1.0;
  double sigma2_a = 0.5;
  double sigma2_b = 0.5;
  bool per_item_noise = false;  // Psi_jj = sigma2_e * (0.5 + U[0,1))
};

// Generating parameters together with the realized latent draws.
struct SyntheticTruth {
  ModelParams params;
  Mat factors;  // R x K
  Vec a;        // client intercepts (zero when absent)
  Vec b;        // item intercepts (zero when absent)
};

// Samples the generative model exactly as written: beta and loadings entries
// i.i.d. standard normal, f_i ~ N(0, I_K), a_i ~ N(0, sigma2_a),
// b_j ~ N(0, sigma2_b), Gaussian noise, each user rating a uniform random
// item subset of the requested size. Deterministic given the seed.
inline std::pair<RatingsTriples, SyntheticTruth> generate_synthetic(
    const SyntheticSpec& spec) {
  if (spec.n_users < 1 || spec.n_items < 1 || spec.p < 0 || spec.k < 0)
    throw InvalidDimensions("nonpositive synthetic dimensions");
  if (spec.ratings_per_user < 1 || spec.ratings_per_user > spec.n_items)
    throw InvalidDimensions("ratings_per_user must be in [1, C]");
  if (allows_factors(spec.variant) ? spec.k < 1 : spec.k != 0)
    throw InvalidDimensions("latent dimension inconsistent with variant");

  RngStream beta_rng(spec.seed, 10), load_rng(spec.seed, 11),
      noise_scale_rng(spec.seed, 12), factor_rng(spec.seed, 13),
      a_rng(spec.seed, 14), b_rng(spec.seed, 15), mask_rng(spec.seed, 16),
      eps_rng(spec.seed, 17), x_rng(spec.seed, 18);

  SyntheticTruth truth;
  ModelParams& params = truth.params;
  params.variant = spec.variant;
  params.k = spec.k;
  params.beta = Vec::Zero(spec.p);
  for (int t = 0; t < spec.p; ++t) params.beta[t] = beta_rng.normal();
  params.loadings.resize(spec.n_items, spec.k);
  for (int j = 0; j < spec.n_items; ++j)
    for (int t = 0; t < spec.k; ++t) params.loadings(j, t) = load_rng.normal();
  if (spec.per_item_noise) {
    params.psi.resize(spec.n_items);
    for (int j = 0; j < spec.n_items; ++j)
      params.psi[j] = spec.sigma2_e * (0.5 + noise_scale_rng.uniform());
  } else {
    params.sigma2_e = spec.sigma2_e;
  }
  params.sigma2_a = has_client_intercept(spec.variant) ? spec.sigma2_a : 0.0;
  params.sigma2_b = has_item_intercept(spec.variant) ? spec.sigma2_b : 0.0;

  truth.factors.setZero(spec.n_users, spec.k);
  for (int i = 0; i < spec.n_users; ++i)
    for (int t = 0; t < spec.k; ++t) truth.factors(i, t) = factor_rng.normal();
  truth.a = Vec::Zero(spec.n_users);
  if (has_client_intercept(spec.variant))
    for (int i = 0; i < spec.n_users; ++i)
      truth.a[i] = std::sqrt(spec.sigma2_a) * a_rng.normal();
  truth.b = Vec::Zero(spec.n_items);
  if (has_item_intercept(spec.variant))
    for (int j = 0; j < spec.n_items; ++j)
      truth.b[j] = std::sqrt(spec.sigma2_b) * b_rng.normal();

  RatingsTriples data;
  data.n_users = spec.n_users;
  data.n_items = spec.n_items;
  data.p = spec.p;
  data.entries.reserve(static_cast<size_t>(spec.n_users) * spec.ratings_per_user);
  std::vector<int> pool(spec.n_items);
  for (int i = 0; i < spec.n_users; ++i) {
    std::iota(pool.begin(), pool.end(), 0);
    // partial Fisher-Yates for a uniform subset
    for (int t = 0; t < spec.ratings_per_user; ++t) {
      const int pick =
          t + static_cast<int>(mask_rng.uniform_below(spec.n_items - t));
      std::swap(pool[t], pool[pick]);
    }
    std::sort(pool.begin(), pool.begin() + spec.ratings_per_user);
    for (int t = 0; t < spec.ratings_per_user; ++t) {
      const int j = pool[t];
      Entry en;
      en.user = i;
      en.item = j;
      en.x = Vec::Zero(spec.p);
      for (int d = 0; d < spec.p; ++d) en.x[d] = x_rng.normal();
      const double noise_sd =
          std::sqrt(spec.per_item_noise ? params.psi[j] : spec.sigma2_e);
      en.rating = en.x.dot(params.beta) +
                  truth.factors.row(i).dot(params.loadings.row(j)) + truth.a[i] +
                  truth.b[j] + noise_sd * eps_rng.normal();
      data.entries.push_back(std::move(en));
    }
  }
  return {std::move(data), std::move(truth)};
}

}  // namespace sparsefa
