#pragma once

#include "sparsefa/core.hpp"

namespace sparsefa {

// Posterior-mean prediction for a (user, item) pair with covariates x.
// Entities absent from training (pass std::nullopt, or an out-of-range index)
// contribute nothing; with both entities unseen this degenerates to x'beta.
// A seen user's intercept term survives an unseen item, since the absorbed
// intercept loading sigma_a is shared across items.
inline double predict_rating(const ModelParams& params,
                             const PosteriorSummary& post,
                             std::optional<int> user, std::optional<int> item,
                             const Vec& x) {
  if (x.size() != params.p())
    throw DimensionMismatch("covariate length " + std::to_string(x.size()) +
                            " expected " + std::to_string(params.p()));
  double v = x.dot(params.beta);
  const bool user_seen =
      user && *user >= 0 && *user < static_cast<int>(post.users.size());
  const bool item_seen = item && *item >= 0 && *item < params.n_items();
  if (user_seen) {
    const Vec& mu = post.users[*user].mean;
    if (mu.size() != params.k_aug())
      throw DimensionMismatch("posterior mean length mismatch");
    if (has_client_intercept(params.variant)) v += params.sigma_a() * mu[params.k];
    if (item_seen && params.k > 0)
      v += mu.head(params.k).dot(params.loadings.row(*item));
  }
  if (item_seen && has_item_intercept(params.variant) &&
      post.item_mean.size() == params.n_items())
    v += post.item_mean[*item];
  return v;
}

inline double mean_square_error(const std::vector<double>& predicted,
                                const std::vector<double>& actual) {
  if (predicted.size() != actual.size())
    throw LengthMismatch("prediction/actual length mismatch");
  if (predicted.empty()) throw EmptyInput("no predictions to score");
  double s = 0.0;
  for (size_t i = 0; i < predicted.size(); ++i) {
    double d = predicted[i] - actual[i];
    s += d * d;
  }
  return s / static_cast<double>(predicted.size());
}

}  // namespace sparsefa
