#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace sparsefa {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DuplicatePair : Error {
  int user, item;
  DuplicatePair(int u, int j)
      : Error("duplicate rating for pair (" + std::to_string(u) + ", " +
              std::to_string(j) + ")"),
        user(u), item(j) {}
};

struct IndexOutOfRange : Error { using Error::Error; };
struct InconsistentCovariateLength : Error { using Error::Error; };
struct DimensionMismatch : Error { using Error::Error; };
struct LengthMismatch : Error { using Error::Error; };
struct EmptyInput : Error { using Error::Error; };
struct SingularGram : Error { using Error::Error; };
struct SingularItemMoment : Error { using Error::Error; };
struct NonFiniteInput : Error { using Error::Error; };
struct NonPositiveDefinite : Error { using Error::Error; };
struct SvdFailure : Error { using Error::Error; };
struct InvalidDimensions : Error { using Error::Error; };

struct MalformedLine : Error {
  int lineno;
  MalformedLine(const std::string& what, int line)
      : Error(what + " (line " + std::to_string(line) + ")"), lineno(line) {}
};
struct DuplicateUserId : Error { using Error::Error; };
struct WrongFlagCount : Error { using Error::Error; };
struct RatingOutOfRange : Error { using Error::Error; };
struct UnknownUser : Error { using Error::Error; };
struct UnknownItem : Error { using Error::Error; };
struct InvalidSplit : Error { using Error::Error; };

// ---------------------------------------------------------------------------
// Model variants
// ---------------------------------------------------------------------------

enum class ModelVariant {
  InterceptClient,  // x'b + a_i + e          (exact EM, K = 0)
  InterceptBoth,    // x'b + a_i + b_j + e    (variational EM, K = 0)
  Factor,           // x'b + f'l + e          (exact EM)
  FactorClient,     // x'b + f'l + a_i + e    (exact EM)
  FactorBoth        // x'b + f'l + a_i + b_j + e  (variational EM)
};

constexpr bool has_client_intercept(ModelVariant v) {
  return v != ModelVariant::Factor;
}

constexpr bool has_item_intercept(ModelVariant v) {
  return v == ModelVariant::InterceptBoth || v == ModelVariant::FactorBoth;
}

constexpr bool is_variational(ModelVariant v) { return has_item_intercept(v); }

constexpr bool allows_factors(ModelVariant v) {
  return v == ModelVariant::Factor || v == ModelVariant::FactorClient ||
         v == ModelVariant::FactorBoth;
}

// Dimension of the augmented factor: K plus one coordinate for the absorbed
// client intercept (a_i / sigma_a gets a standard normal prior and every item
// shares the loading sigma_a on it).
constexpr int augmented_dim(ModelVariant v, int k) {
  return k + (has_client_intercept(v) ? 1 : 0);
}

inline std::string variant_name(ModelVariant v) {
  switch (v) {
    case ModelVariant::InterceptClient: return "intercept-client";
    case ModelVariant::InterceptBoth: return "intercept-both";
    case ModelVariant::Factor: return "factor";
    case ModelVariant::FactorClient: return "factor-client";
    case ModelVariant::FactorBoth: return "factor-both";
  }
  return "unknown";
}

inline ModelVariant parse_variant(const std::string& s) {
  if (s == "intercept-client") return ModelVariant::InterceptClient;
  if (s == "intercept-both") return ModelVariant::InterceptBoth;
  if (s == "factor") return ModelVariant::Factor;
  if (s == "factor-client") return ModelVariant::FactorClient;
  if (s == "factor-both") return ModelVariant::FactorBoth;
  throw Error("unknown model variant: " + s);
}

// ---------------------------------------------------------------------------
// Ratings data
// ---------------------------------------------------------------------------

struct Entry {
  int user = 0;
  int item = 0;
  double rating = 0.0;
  Vec x;  // covariates, length p
};

// Sparse (user, item, rating, covariates) records; entries carry 0-based
// internal indices. An entry existing for (i, j) is the z_ij = 1 indicator.
struct RatingsTriples {
  int n_users = 0;
  int n_items = 0;
  int p = 0;
  std::vector<Entry> entries;

  int n_obs() const { return static_cast<int>(entries.size()); }
};

// Per-user and per-item lists of entry positions, each sorted by the
// counterpart index. Lets every per-user sum and per-item sum run in one
// linear pass.
struct BipartiteIndex {
  std::vector<std::vector<int>> by_user;
  std::vector<std::vector<int>> by_item;
};

inline BipartiteIndex validate_and_index(const RatingsTriples& raw) {
  if (raw.entries.empty()) throw EmptyInput("ratings are empty");
  BipartiteIndex idx;
  idx.by_user.resize(raw.n_users);
  idx.by_item.resize(raw.n_items);
  for (int e = 0; e < raw.n_obs(); ++e) {
    const Entry& en = raw.entries[e];
    if (en.user < 0 || en.user >= raw.n_users)
      throw IndexOutOfRange("user index " + std::to_string(en.user) +
                            " out of range [0, " + std::to_string(raw.n_users) + ")");
    if (en.item < 0 || en.item >= raw.n_items)
      throw IndexOutOfRange("item index " + std::to_string(en.item) +
                            " out of range [0, " + std::to_string(raw.n_items) + ")");
    if (en.x.size() != raw.p)
      throw InconsistentCovariateLength(
          "covariate vector of length " + std::to_string(en.x.size()) +
          " expected " + std::to_string(raw.p));
    idx.by_user[en.user].push_back(e);
    idx.by_item[en.item].push_back(e);
  }
  for (auto& lst : idx.by_user) {
    std::sort(lst.begin(), lst.end(), [&](int a, int b) {
      return raw.entries[a].item < raw.entries[b].item;
    });
    for (size_t t = 1; t < lst.size(); ++t)
      if (raw.entries[lst[t]].item == raw.entries[lst[t - 1]].item)
        throw DuplicatePair(raw.entries[lst[t]].user, raw.entries[lst[t]].item);
  }
  for (auto& lst : idx.by_item)
    std::sort(lst.begin(), lst.end(), [&](int a, int b) {
      return raw.entries[a].user < raw.entries[b].user;
    });
  return idx;
}

// ---------------------------------------------------------------------------
// Model parameters and posterior summaries
// ---------------------------------------------------------------------------

struct ModelParams {
  ModelVariant variant = ModelVariant::Factor;
  int k = 0;
  Vec beta;      // length p
  Mat loadings;  // C x K, row j = l_j
  Vec psi;       // per-item noise variances; empty when noise is shared
  double sigma2_e = 1.0;  // shared noise variance, used when psi is empty
  double sigma2_a = 0.0;  // client intercept variance
  double sigma2_b = 0.0;  // item intercept variance

  bool shared_noise() const { return psi.size() == 0; }
  double noise(int item) const { return shared_noise() ? sigma2_e : psi[item]; }
  double sigma_a() const { return std::sqrt(sigma2_a); }
  int n_items() const { return static_cast<int>(loadings.rows()); }
  int p() const { return static_cast<int>(beta.size()); }
  int k_aug() const { return augmented_dim(variant, k); }
};

struct UserPosterior {
  Vec mean;  // length K'
  Mat cov;   // K' x K', symmetric positive definite
};

// Per-user moments of the augmented factor (exact or variational) plus, for
// variational variants, the per-item intercept moments.
struct PosteriorSummary {
  std::vector<UserPosterior> users;
  Vec item_mean;  // mu_b, empty for exact-EM variants
  Vec item_var;   // var_b, empty for exact-EM variants
};

// Item loading rows extended with the shared intercept column sigma_a.
struct AugmentedLoadings {
  Mat rows;  // C x K'
  bool with_intercept = false;

  static AugmentedLoadings build(const Mat& loadings, std::optional<double> sigma_a) {
    AugmentedLoadings out;
    if (sigma_a) {
      out.with_intercept = true;
      out.rows.resize(loadings.rows(), loadings.cols() + 1);
      out.rows.leftCols(loadings.cols()) = loadings;
      out.rows.rightCols(1).setConstant(*sigma_a);
    } else {
      out.rows = loadings;
    }
    return out;
  }

  static AugmentedLoadings from_params(const ModelParams& params) {
    return build(params.loadings,
                 has_client_intercept(params.variant)
                     ? std::optional<double>(params.sigma_a())
                     : std::nullopt);
  }

  int k_aug() const { return static_cast<int>(rows.cols()); }
};

struct FitReport {
  int iterations = 0;
  std::vector<double> objective_trace;  // log-likelihood (EM) or ELBO (VEM)
  bool converged = false;
  std::vector<double> seconds_per_iteration;
  std::vector<int> never_rated_items;  // kept initialized loadings
};

// ---------------------------------------------------------------------------
// Fit configuration
// ---------------------------------------------------------------------------

struct FitOptions {
  ModelVariant variant = ModelVariant::Factor;
  int k = 1;
  bool shared_noise = false;  // Psi_jj collapsed to sigma2_e; forced for VEM
  double tol = 1e-6;
  int max_iter = 200;
  int backfit_passes = 1;
  int q_sweeps = 1;  // inner variational sweeps per outer iteration
  std::uint64_t seed = 0;
  bool deterministic_init = false;
  double variance_floor = 1e-6;
  bool pin_sigma2_b_at_floor = false;  // test hook: freeze item-intercept variance
};

inline void validate_options(const FitOptions& opt) {
  if (allows_factors(opt.variant)) {
    if (opt.k < 1)
      throw InvalidDimensions("variant " + variant_name(opt.variant) +
                              " requires K >= 1");
  } else if (opt.k != 0) {
    throw InvalidDimensions("variant " + variant_name(opt.variant) +
                            " requires K = 0");
  }
  if (opt.max_iter < 1) throw InvalidDimensions("max_iter must be >= 1");
  if (opt.backfit_passes < 1) throw InvalidDimensions("backfit_passes must be >= 1");
  if (opt.q_sweeps < 1) throw InvalidDimensions("q_sweeps must be >= 1");
  if (opt.variance_floor <= 0) throw InvalidDimensions("variance floor must be > 0");
}

}  // namespace sparsefa
