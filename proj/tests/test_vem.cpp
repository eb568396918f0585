#include <doctest.h>

#include <limits>

#include "oracles.hpp"
#include "sparsefa/sparsefa.hpp"

using namespace sparsefa;

namespace {

Entry make_entry(int u, int j, double y, const Vec& x = Vec()) {
  Entry en;
  en.user = u;
  en.item = j;
  en.rating = y;
  en.x = x;
  return en;
}

VariationalState prior_state(const ModelParams& params, int n_users, int n_items) {
  VariationalState state;
  const int kp = params.k_aug();
  state.users.assign(n_users, UserPosterior{Vec::Zero(kp), Mat::Identity(kp, kp)});
  state.b_mean = Vec::Zero(n_items);
  state.b_var = Vec::Constant(n_items, params.sigma2_b);
  state.sigma_a_estep = params.sigma_a();
  return state;
}

ModelParams intercept_both_params(int n_items, double se2, double sa2, double sb2) {
  ModelParams params;
  params.variant = ModelVariant::InterceptBoth;
  params.k = 0;
  params.beta = Vec();
  params.loadings = Mat::Zero(n_items, 0);
  params.sigma2_e = se2;
  params.sigma2_a = sa2;
  params.sigma2_b = sb2;
  return params;
}

}  // namespace

TEST_CASE("item-intercept update closed-form cases") {
  SUBCASE("zero residuals, unit variances") {
    const int n = 4;
    RatingsTriples data;
    data.n_users = n;
    data.n_items = 1;
    for (int i = 0; i < n; ++i) data.entries.push_back(make_entry(i, 0, 0.0));
    const BipartiteIndex index = validate_and_index(data);
    ModelParams params = intercept_both_params(1, 1.0, 1.0, 1.0);
    VariationalState state = prior_state(params, n, 1);
    update_q_b(state, params, data, index);
    CHECK(state.b_mean[0] == doctest::Approx(0.0));
    CHECK(state.b_var[0] == doctest::Approx(1.0 / (n + 1)).epsilon(1e-12));
  }
  SUBCASE("unrated item keeps the prior") {
    RatingsTriples data;
    data.n_users = 1;
    data.n_items = 2;
    data.entries = {make_entry(0, 0, 0.0)};
    const BipartiteIndex index = validate_and_index(data);
    ModelParams params = intercept_both_params(2, 1.0, 1.0, 0.7);
    VariationalState state = prior_state(params, 1, 2);
    update_q_b(state, params, data, index);
    CHECK(state.b_mean[1] == doctest::Approx(0.0));
    CHECK(state.b_var[1] == doctest::Approx(0.7));
  }
  SUBCASE("single rating with residual two") {
    RatingsTriples data;
    data.n_users = 1;
    data.n_items = 1;
    data.entries = {make_entry(0, 0, 2.0)};
    const BipartiteIndex index = validate_and_index(data);
    ModelParams params = intercept_both_params(1, 1.0, 0.0, 1.0);
    VariationalState state = prior_state(params, 1, 1);
    update_q_b(state, params, data, index);
    CHECK(state.b_var[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(state.b_mean[0] == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("user-block update closed-form cases") {
  SUBCASE("user with zero ratings keeps the prior") {
    RatingsTriples data;
    data.n_users = 2;
    data.n_items = 1;
    data.entries = {make_entry(0, 0, 1.0)};
    const BipartiteIndex index = validate_and_index(data);
    ModelParams params = intercept_both_params(1, 1.0, 0.5, 0.5);
    VariationalState state = prior_state(params, 2, 1);
    update_q_f(state, params, data, index);
    CHECK(state.users[1].mean[0] == doctest::Approx(0.0));
    CHECK(state.users[1].cov(0, 0) == doctest::Approx(1.0));
  }
  SUBCASE("scalar case with unit intercept loading") {
    RatingsTriples data;
    data.n_users = 1;
    data.n_items = 1;
    data.entries = {make_entry(0, 0, 2.0)};
    const BipartiteIndex index = validate_and_index(data);
    ModelParams params = intercept_both_params(1, 1.0, 1.0, 1.0);
    VariationalState state = prior_state(params, 1, 1);
    state.b_mean[0] = 0.0;
    update_q_f(state, params, data, index);
    CHECK(state.users[0].cov(0, 0) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(state.users[0].mean[0] == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("user-block update matches the exact e-step when item intercepts are frozen at zero") {
  SyntheticSpec spec;
  spec.n_users = 15;
  spec.n_items = 8;
  spec.k = 2;
  spec.p = 2;
  spec.ratings_per_user = 5;
  spec.variant = ModelVariant::FactorBoth;
  spec.seed = 17;
  auto [data, truth] = generate_synthetic(spec);
  const BipartiteIndex index = validate_and_index(data);

  VariationalState state = prior_state(truth.params, data.n_users, data.n_items);
  state.b_mean.setZero();
  update_q_f(state, truth.params, data, index);

  ModelParams exact = truth.params;
  exact.variant = ModelVariant::FactorClient;
  exact.sigma2_b = 0.0;
  const PosteriorSummary post = e_step(exact, data, index);
  for (int i = 0; i < data.n_users; ++i) {
    CHECK((state.users[i].mean - post.users[i].mean).cwiseAbs().maxCoeff() <= 1e-12);
    CHECK((state.users[i].cov - post.users[i].cov).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("each variational block update does not decrease the bound") {
  SyntheticSpec spec;
  spec.n_users = 15;
  spec.n_items = 6;
  spec.k = 1;
  spec.p = 2;
  spec.ratings_per_user = 4;
  spec.variant = ModelVariant::FactorBoth;
  spec.seed = 23;
  auto [data, truth] = generate_synthetic(spec);
  const BipartiteIndex index = validate_and_index(data);

  ModelParams params = truth.params;
  params.sigma2_e = 1.3;  // start away from the generator values
  params.sigma2_a = 0.9;
  params.sigma2_b = 0.8;
  VariationalState state = prior_state(params, data.n_users, data.n_items);
  update_q_b(state, params, data, index);
  update_q_f(state, params, data, index);

  double f = compute_elbo(state, params, data, index);
  const double slack = 1e-8 * (1.0 + std::abs(f));
  auto step = [&](auto&& apply) {
    apply();
    const double next = compute_elbo(state, params, data, index);
    CHECK(next >= f - slack);
    f = next;
  };
  step([&] { params.beta = vem_update_beta(state, data, index, params); });
  step([&] {
    params.loadings = vem_update_loadings(state, data, index, params.beta, params);
  });
  step([&] { params.sigma2_a = vem_update_sigma2_a(state, 1e-6); });
  step([&] { params.sigma2_b = vem_update_sigma2_b(state, 1e-6); });
  step([&] {
    params.sigma2_e =
        vem_update_sigma2_e(state, data, params.beta, params.loadings, 1e-6);
  });
  // the q updates themselves are also ascent steps
  step([&] { update_q_b(state, params, data, index); });
  step([&] { update_q_f(state, params, data, index); });
}

TEST_CASE("variance updates degenerate cases") {
  SUBCASE("noise clamps at the floor under a perfect point-mass fit") {
    RatingsTriples data;
    data.n_users = 1;
    data.n_items = 1;
    data.entries = {make_entry(0, 0, 0.0)};
    VariationalState state;
    state.users.push_back({Vec::Zero(1), Mat::Zero(1, 1)});
    state.b_mean = Vec::Zero(1);
    state.b_var = Vec::Zero(1);
    state.sigma_a_estep = 1.0;
    CHECK(vem_update_sigma2_e(state, data, Vec(), Mat::Zero(1, 0), 1e-6) ==
          doctest::Approx(1e-6));
  }
  SUBCASE("item variance from point masses at a common value") {
    VariationalState state;
    state.b_mean = Vec::Constant(5, 2.0);
    state.b_var = Vec::Zero(5);
    CHECK(vem_update_sigma2_b(state, 1e-6) == doctest::Approx(4.0).epsilon(1e-12));
  }
}

TEST_CASE("bound equals the exact likelihood when the posterior factorizes") {
  // one item, no factors, client variance zero: the posterior over b is exact
  const int n = 6;
  RatingsTriples data;
  data.n_users = n;
  data.n_items = 1;
  RngStream rng(71, 0);
  for (int i = 0; i < n; ++i)
    data.entries.push_back(make_entry(i, 0, rng.normal() * 1.5 + 0.4));
  const BipartiteIndex index = validate_and_index(data);

  ModelParams params = intercept_both_params(1, 0.7, 0.0, 0.9);
  VariationalState state;
  state.users.assign(n, UserPosterior{Vec::Zero(1), Mat::Identity(1, 1)});
  state.sigma_a_estep = 0.0;
  const double var = 1.0 / (n / params.sigma2_e + 1.0 / params.sigma2_b);
  double acc = 0.0;
  for (const Entry& en : data.entries) acc += en.rating;
  state.b_mean = Vec::Constant(1, var * acc / params.sigma2_e);
  state.b_var = Vec::Constant(1, var);

  const double f = compute_elbo(state, params, data, index);
  const double exact = oracles::dense_crossed_loglik(params, data);
  CHECK(f == doctest::Approx(exact).epsilon(1e-10));
}

TEST_CASE("bound never exceeds the exact likelihood on dense-checkable instances") {
  SyntheticSpec spec;
  spec.n_users = 8;
  spec.n_items = 8;
  spec.k = 2;
  spec.p = 2;
  spec.ratings_per_user = 8;  // R*C = 64 observed ratings
  spec.variant = ModelVariant::FactorBoth;
  spec.seed = 29;
  auto [data, truth] = generate_synthetic(spec);
  const BipartiteIndex index = validate_and_index(data);

  ModelParams params = truth.params;
  VariationalState state = prior_state(params, data.n_users, data.n_items);
  for (int iter = 0; iter < 12; ++iter) {
    update_q_b(state, params, data, index);
    update_q_f(state, params, data, index);
    const double f_q = compute_elbo(state, params, data, index);
    CHECK(f_q <= oracles::dense_crossed_loglik(params, data) + 1e-8);
    params = vem_m_step(state, data, index, params);
    const double f_m = compute_elbo(state, params, data, index);
    CHECK(f_m <= oracles::dense_crossed_loglik(params, data) + 1e-8);
  }
}

TEST_CASE("inflating the optimized q variances strictly decreases the bound") {
  SyntheticSpec spec;
  spec.n_users = 10;
  spec.n_items = 5;
  spec.k = 1;
  spec.p = 1;
  spec.ratings_per_user = 4;
  spec.variant = ModelVariant::FactorBoth;
  spec.seed = 37;
  auto [data, truth] = generate_synthetic(spec);
  const BipartiteIndex index = validate_and_index(data);
  ModelParams params = truth.params;
  VariationalState state = prior_state(params, data.n_users, data.n_items);
  for (int sweep = 0; sweep < 30; ++sweep) {
    update_q_b(state, params, data, index);
    update_q_f(state, params, data, index);
  }
  const double best = compute_elbo(state, params, data, index);
  VariationalState inflated = state;
  for (UserPosterior& u : inflated.users) u.cov *= 1.5;
  inflated.b_var *= 1.5;
  CHECK(compute_elbo(inflated, params, data, index) < best);
}

TEST_CASE("variational fit runs one iteration at infinite tolerance") {
  SyntheticSpec spec;
  spec.n_users = 12;
  spec.n_items = 6;
  spec.k = 0;
  spec.p = 1;
  spec.ratings_per_user = 4;
  spec.variant = ModelVariant::InterceptBoth;
  spec.seed = 41;
  auto [data, truth] = generate_synthetic(spec);
  FitOptions opt;
  opt.variant = ModelVariant::InterceptBoth;
  opt.k = 0;
  opt.tol = std::numeric_limits<double>::infinity();
  const VemFit fit = fit_vem(data, opt);
  CHECK(fit.report.iterations == 1);
  CHECK(std::isfinite(fit.report.objective_trace.back()));
}

TEST_CASE("bound trace is nondecreasing and the solver rejects exact-EM variants") {
  SyntheticSpec spec;
  spec.n_users = 80;
  spec.n_items = 20;
  spec.k = 2;
  spec.p = 2;
  spec.ratings_per_user = 8;
  spec.variant = ModelVariant::FactorBoth;
  spec.seed = 43;
  auto [data, truth] = generate_synthetic(spec);
  FitOptions opt;
  opt.variant = ModelVariant::FactorBoth;
  opt.k = 2;
  opt.seed = 9;
  opt.max_iter = 60;
  const VemFit fit = fit_vem(data, opt);
  const auto& trace = fit.report.objective_trace;
  REQUIRE(trace.size() >= 2);
  for (size_t t = 1; t < trace.size(); ++t)
    CHECK(trace[t] >= trace[t - 1] - 1e-8 * (1.0 + std::abs(trace[t])));

  opt.variant = ModelVariant::Factor;
  CHECK_THROWS_AS(fit_vem(data, opt), InvalidDimensions);
}

TEST_CASE("single-item fits agree between the two solvers when b is pinned") {
  SyntheticSpec spec;
  spec.n_users = 40;
  spec.n_items = 1;
  spec.k = 1;
  spec.p = 2;
  spec.ratings_per_user = 1;
  spec.variant = ModelVariant::FactorClient;
  spec.seed = 47;
  auto [data, truth] = generate_synthetic(spec);

  FitOptions em_opt;
  em_opt.variant = ModelVariant::FactorClient;
  em_opt.k = 1;
  em_opt.shared_noise = true;
  em_opt.deterministic_init = true;
  em_opt.tol = 1e-13;
  em_opt.max_iter = 2000;
  em_opt.variance_floor = 1e-12;
  const EmFit em = fit_em(data, em_opt);

  FitOptions vem_opt = em_opt;
  vem_opt.variant = ModelVariant::FactorBoth;
  vem_opt.pin_sigma2_b_at_floor = true;
  const VemFit vem = fit_vem(data, vem_opt);

  for (int i = 0; i < data.n_users; ++i) {
    const Vec& x = data.entries[i].x;
    const double a = predict_rating(em.params, em.posterior, i, 0, x);
    const double b = predict_rating(vem.params, vem.posterior, i, 0, x);
    CHECK(std::abs(a - b) <= 1e-6);
  }
}
