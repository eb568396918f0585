#pragma once

#include "sparsefa/core.hpp"
#include "sparsefa/rng.hpp"

#include <Eigen/SVD>

namespace sparsefa {

// Ordinary least squares of rating on covariates over the observed entries.
inline Vec ols_regression(const RatingsTriples& data) {
  if (data.entries.empty()) throw EmptyInput("no ratings to regress");
  const int p = data.p;
  Mat gram = Mat::Zero(p, p);
  Vec rhs = Vec::Zero(p);
  for (const Entry& en : data.entries) {
    gram.noalias() += en.x * en.x.transpose();
    rhs.noalias() += en.rating * en.x;
  }
  Eigen::FullPivLU<Mat> lu(gram);
  if (!lu.isInvertible())
    throw SingularGram("covariate Gram matrix is singular (collinear covariates)");
  return lu.solve(rhs);
}

// Dense residual workspace: observed cells hold y - x'beta_ols, unobserved
// cells hold the current imputation (initialized to zero).
struct ResidualMatrix {
  Mat values;
  Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> observed;

  static ResidualMatrix build(const RatingsTriples& data, const Vec& beta_ols) {
    ResidualMatrix rm;
    rm.values = Mat::Zero(data.n_users, data.n_items);
    rm.observed.setConstant(data.n_users, data.n_items, false);
    for (const Entry& en : data.entries) {
      rm.values(en.user, en.item) = en.rating - en.x.dot(beta_ols);
      rm.observed(en.user, en.item) = true;
    }
    return rm;
  }
};

struct RankKFactorization {
  Mat u;  // R x K
  Vec d;  // K singular values
  Mat v;  // C x K

  double fitted(int i, int j) const {
    return u.row(i).dot(d.cwiseProduct(v.row(j).transpose()));
  }
};

// Truncated rank-k SVD by randomized subspace iteration; exact when the
// matrix has rank <= k.
inline RankKFactorization truncated_svd(const Mat& m, int k) {
  const int r = static_cast<int>(m.rows());
  const int c = static_cast<int>(m.cols());
  RankKFactorization out;
  out.u = Mat::Zero(r, k);
  out.d = Vec::Zero(k);
  out.v = Mat::Zero(c, k);
  if (m.norm() == 0.0) return out;
  const int q = std::min(std::min(r, c), k + 8);
  RngStream rng(0x5fd1, 0);
  Mat omega(c, q);
  for (int i = 0; i < c; ++i)
    for (int j = 0; j < q; ++j) omega(i, j) = rng.normal();
  auto thin_q = [](const Mat& y) {
    Eigen::HouseholderQR<Mat> qr(y);
    return Mat(qr.householderQ() * Mat::Identity(y.rows(), y.cols()));
  };
  Mat basis = thin_q(m * omega);
  for (int it = 0; it < 4; ++it) {
    basis = thin_q(m.transpose() * basis);
    basis = thin_q(m * basis);
  }
  Eigen::BDCSVD<Mat> svd(basis.transpose() * m,
                         Eigen::ComputeThinU | Eigen::ComputeThinV);
  if (svd.info() != Eigen::Success) throw SvdFailure("SVD did not converge");
  out.u = basis * svd.matrixU().leftCols(k);
  out.d = svd.singularValues().head(k);
  out.v = svd.matrixV().leftCols(k);
  return out;
}

struct HardImputeResult {
  RankKFactorization factorization;
  int iterations = 0;
  bool converged = false;
  std::vector<double> train_sse_trace;  // observed-cell squared error per iteration
};

// Rank-K hard impute: alternate filling unobserved cells with the current fit
// and truncating to the best rank-K SVD, until the fitted matrix stops moving.
inline HardImputeResult hard_impute(const ResidualMatrix& residuals, int k,
                                    double tol = 1e-5, int max_iter = 300) {
  const int r = static_cast<int>(residuals.values.rows());
  const int c = static_cast<int>(residuals.values.cols());
  if (k < 1 || k > std::min(r, c))
    throw InvalidDimensions("rank must be in [1, min(R, C)]");
  Mat work = residuals.values;
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      if (!residuals.observed(i, j)) work(i, j) = 0.0;
  HardImputeResult out;
  Mat fit_prev = Mat::Zero(r, c);
  for (int iter = 1; iter <= max_iter; ++iter) {
    out.factorization = truncated_svd(work, k);
    const Mat fit = out.factorization.u *
                    out.factorization.d.asDiagonal() *
                    out.factorization.v.transpose();
    double sse = 0.0;
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) {
        if (residuals.observed(i, j)) {
          const double d = residuals.values(i, j) - fit(i, j);
          sse += d * d;
        } else {
          work(i, j) = fit(i, j);
        }
      }
    out.train_sse_trace.push_back(sse);
    out.iterations = iter;
    const double change = (fit - fit_prev).norm() / (fit_prev.norm() + 1e-12);
    fit_prev = fit;
    if (iter > 1 && change < tol) {
      out.converged = true;
      break;
    }
  }
  return out;
}

// x'beta_ols plus the rank-K fitted residual; unseen entities fall back to the
// regression alone.
inline double baseline_predict(const Vec& beta_ols,
                               const RankKFactorization& factorization,
                               std::optional<int> user, std::optional<int> item,
                               const Vec& x) {
  if (x.size() != beta_ols.size())
    throw DimensionMismatch("covariate length " + std::to_string(x.size()) +
                            " expected " + std::to_string(beta_ols.size()));
  double v = x.dot(beta_ols);
  const bool user_seen =
      user && *user >= 0 && *user < static_cast<int>(factorization.u.rows());
  const bool item_seen =
      item && *item >= 0 && *item < static_cast<int>(factorization.v.rows());
  if (user_seen && item_seen) v += factorization.fitted(*user, *item);
  return v;
}

}  // namespace sparsefa
