// Batch front door: ingest raw MovieLens-100K files, fit any of the five
// model variants or the hard-impute baseline, sweep K and seeds, evaluate
// test MSE, and run synthetic recovery experiments.

#include <CLI11.hpp>

#include "sparsefa/sparsefa.hpp"

#include <filesystem>
#include <iostream>

namespace fs = std::filesystem;
using namespace sparsefa;

namespace {

constexpr int kExitError = 1;
constexpr int kExitMaxIter = 2;

struct FitFlags {
  std::string variant = "factor";
  int k = 1;
  std::string psi_mode = "per-item";
  double tol = 1e-6;
  int max_iter = 200;
  int backfit_passes = 1;
  int q_sweeps = 1;
  std::uint64_t seed = 0;
  bool deterministic_init = false;

  void attach(CLI::App* cmd) {
    cmd->add_option("--variant", variant, "model variant")
        ->check(CLI::IsMember({"intercept-client", "intercept-both", "factor",
                               "factor-client", "factor-both"}));
    cmd->add_option("--k", k, "latent dimension (0 for intercept-only variants)");
    cmd->add_option("--psi", psi_mode, "noise mode")
        ->check(CLI::IsMember({"shared", "per-item"}));
    cmd->add_option("--tol", tol, "relative objective tolerance");
    cmd->add_option("--max-iter", max_iter, "iteration cap");
    cmd->add_option("--backfit-passes", backfit_passes, "M-step passes per iteration");
    cmd->add_option("--q-sweeps", q_sweeps, "variational inner sweeps per iteration");
    cmd->add_option("--seed", seed, "random seed");
    cmd->add_flag("--deterministic-init", deterministic_init,
                  "seed-free deterministic initialization");
  }

  FitOptions options() const {
    FitOptions opt;
    opt.variant = parse_variant(variant);
    opt.k = k;
    opt.shared_noise = psi_mode == "shared" || is_variational(opt.variant);
    opt.tol = tol;
    opt.max_iter = max_iter;
    opt.backfit_passes = backfit_passes;
    opt.q_sweeps = q_sweeps;
    opt.seed = seed;
    opt.deterministic_init = deterministic_init;
    return opt;
  }
};

void emit(const json& metrics, const std::string& out_path) {
  std::cout << metrics.dump() << "\n";
  if (!out_path.empty()) detail::write_text(out_path, metrics.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// ingest
// ---------------------------------------------------------------------------

int cmd_ingest(const std::string& raw_dir, int split,
               const std::string& out_train, const std::string& out_test) {
  if (split < 1 || split > 5)
    throw InvalidSplit("split must be in 1..5, got " + std::to_string(split));
  const auto users = parse_users(raw_dir + "/u.user");
  const auto items = parse_items(raw_dir + "/u.item");
  const auto base =
      parse_ratings(raw_dir + "/u" + std::to_string(split) + ".base");
  const auto test =
      parse_ratings(raw_dir + "/u" + std::to_string(split) + ".test");
  // age standardization from the training split only
  const AgeStats stats = age_stats(users, base);
  write_ratings_file(out_train, build_covariates(users, items, base, stats));
  write_ratings_file(out_test, build_covariates(users, items, test, stats));
  json metrics;
  metrics["train_rows"] = base.size();
  metrics["test_rows"] = test.size();
  metrics["age_mean"] = stats.mean;
  metrics["age_sd"] = stats.sd;
  emit(metrics, "");
  return 0;
}

// ---------------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------------

int cmd_fit(const FitFlags& flags, const std::string& train_path,
            const std::string& params_path, const std::string& report_path) {
  const RatingsTriples data = read_ratings_file(train_path);
  const FitOptions opt = flags.options();
  ParamsFile pf;
  FitReport report;
  if (is_variational(opt.variant)) {
    VemFit fit = fit_vem(data, opt);
    pf.params = std::move(fit.params);
    pf.posterior = std::move(fit.posterior);
    report = std::move(fit.report);
  } else {
    EmFit fit = fit_em(data, opt);
    pf.params = std::move(fit.params);
    pf.posterior = std::move(fit.posterior);
    report = std::move(fit.report);
  }
  pf.n_users = data.n_users;
  pf.unrated_items = report.never_rated_items;
  if (!params_path.empty()) save_params(params_path, pf);
  if (!report_path.empty()) save_report(report_path, report);
  json metrics;
  metrics["iterations"] = report.iterations;
  metrics["converged"] = report.converged;
  metrics["objective"] = report.objective_trace.back();
  emit(metrics, "");
  return report.converged ? 0 : kExitMaxIter;
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

struct Scored {
  double mse = 0.0;
  int n = 0;
  int fallbacks = 0;
  std::vector<double> predictions;
};

Scored score_model(const ParamsFile& pf, const RatingsTriples& test) {
  if (test.entries.empty()) throw EmptyInput("empty test file");
  if (test.p != pf.params.p())
    throw DimensionMismatch("test covariate dimension " + std::to_string(test.p) +
                            " does not match params " +
                            std::to_string(pf.params.p()));
  std::vector<bool> unrated(pf.params.n_items(), false);
  for (int j : pf.unrated_items)
    if (j >= 0 && j < pf.params.n_items()) unrated[j] = true;
  Scored sc;
  std::vector<double> actual;
  for (const Entry& en : test.entries) {
    std::optional<int> user =
        en.user < pf.n_users ? std::optional<int>(en.user) : std::nullopt;
    std::optional<int> item =
        (en.item < pf.params.n_items() && !unrated[en.item])
            ? std::optional<int>(en.item)
            : std::nullopt;
    if (!user || !item) ++sc.fallbacks;
    sc.predictions.push_back(
        predict_rating(pf.params, pf.posterior, user, item, en.x));
    actual.push_back(en.rating);
  }
  sc.mse = mean_square_error(sc.predictions, actual);
  sc.n = test.n_obs();
  return sc;
}

Scored score_baseline(const json& j, const RatingsTriples& test) {
  if (test.entries.empty()) throw EmptyInput("empty test file");
  const Vec beta = detail::vec_from_json(j.at("beta"));
  RankKFactorization fac;
  fac.u = detail::mat_from_json(j.at("U"));
  fac.d = detail::vec_from_json(j.at("D"));
  fac.v = detail::mat_from_json(j.at("V"));
  Scored sc;
  std::vector<double> actual;
  for (const Entry& en : test.entries) {
    std::optional<int> user =
        en.user < fac.u.rows() ? std::optional<int>(en.user) : std::nullopt;
    std::optional<int> item =
        en.item < fac.v.rows() ? std::optional<int>(en.item) : std::nullopt;
    if (!user || !item) ++sc.fallbacks;
    sc.predictions.push_back(baseline_predict(beta, fac, user, item, en.x));
    actual.push_back(en.rating);
  }
  sc.mse = mean_square_error(sc.predictions, actual);
  sc.n = test.n_obs();
  return sc;
}

int cmd_evaluate(const std::string& params_path, const std::string& test_path,
                 const std::string& out_path, const std::string& dump_path) {
  std::ifstream in(params_path);
  if (!in) throw Error("cannot open " + params_path);
  json j;
  in >> j;
  const RatingsTriples test = read_ratings_file(test_path);
  const bool baseline = j.at("variant").get<std::string>() == "baseline";
  const Scored sc =
      baseline ? score_baseline(j, test) : score_model(params_from_json(j), test);
  if (!dump_path.empty()) {
    std::ostringstream dump;
    dump << "user item actual predicted\n";
    char buf[64];
    for (int t = 0; t < test.n_obs(); ++t) {
      const Entry& en = test.entries[t];
      std::snprintf(buf, sizeof(buf), "%.17g %.17g", en.rating, sc.predictions[t]);
      dump << en.user << ' ' << en.item << ' ' << buf << "\n";
    }
    detail::write_text(dump_path, dump.str());
  }
  json metrics;
  metrics["mse"] = sc.mse;
  metrics["n"] = sc.n;
  metrics["fallback_predictions"] = sc.fallbacks;
  emit(metrics, out_path);
  return 0;
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

int cmd_sweep(const FitFlags& flags, const std::string& train_path,
              const std::string& test_path, int k_min, int k_max, int n_seeds,
              const std::string& out_path) {
  if (k_min > k_max || n_seeds < 1)
    throw InvalidDimensions("empty K range or seed count");
  const RatingsTriples train = read_ratings_file(train_path);
  const RatingsTriples test = read_ratings_file(test_path);
  json rows = json::array();
  double best_mse = std::numeric_limits<double>::infinity();
  int best_k = -1;
  std::uint64_t best_seed = 0;
  for (int k = k_min; k <= k_max; ++k) {
    for (int s = 0; s < n_seeds; ++s) {
      const std::uint64_t seed = flags.seed + static_cast<std::uint64_t>(s);
      FitFlags cell = flags;
      cell.k = k;
      cell.seed = seed;
      json row;
      row["k"] = k;
      row["seed"] = seed;
      try {
        const FitOptions opt = cell.options();
        ParamsFile pf;
        FitReport report;
        if (is_variational(opt.variant)) {
          VemFit fit = fit_vem(train, opt);
          pf.params = std::move(fit.params);
          pf.posterior = std::move(fit.posterior);
          report = std::move(fit.report);
        } else {
          EmFit fit = fit_em(train, opt);
          pf.params = std::move(fit.params);
          pf.posterior = std::move(fit.posterior);
          report = std::move(fit.report);
        }
        pf.n_users = train.n_users;
        pf.unrated_items = report.never_rated_items;
        const Scored sc = score_model(pf, test);
        row["mse"] = sc.mse;
        row["converged"] = report.converged;
        row["iterations"] = report.iterations;
        if (sc.mse < best_mse) {
          best_mse = sc.mse;
          best_k = k;
          best_seed = seed;
        }
      } catch (const std::exception& e) {
        row["error"] = e.what();
      }
      rows.push_back(row);
    }
  }
  json metrics;
  metrics["cells"] = rows;
  if (best_k >= 0) {
    metrics["best"] = {{"k", best_k}, {"seed", best_seed}, {"mse", best_mse}};
  }
  emit(metrics, out_path);
  return best_k >= 0 ? 0 : kExitError;
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

// Implied per-user covariance of a complete rating row:
// Cov(y_ij, y_ij') = l_j'l_j + sigma2_a + [j = j'] (psi_j + sigma2_b)
Mat implied_covariance(const ModelParams& params) {
  const int c = params.n_items();
  Mat cov = params.loadings * params.loadings.transpose();
  cov.array() += params.sigma2_a;
  for (int j = 0; j < c; ++j) cov(j, j) += params.noise(j) + params.sigma2_b;
  return cov;
}

int cmd_simulate(const FitFlags& flags, int n_users, int n_items, int p,
                 int ratings_per_user, double sigma2_e, double sigma2_a,
                 double sigma2_b, const std::string& out_path) {
  SyntheticSpec spec;
  spec.n_users = n_users;
  spec.n_items = n_items;
  spec.k = flags.k;
  spec.p = p;
  spec.ratings_per_user = ratings_per_user;
  spec.variant = parse_variant(flags.variant);
  spec.seed = flags.seed;
  spec.sigma2_e = sigma2_e;
  spec.sigma2_a = sigma2_a;
  spec.sigma2_b = sigma2_b;
  auto [data, truth] = generate_synthetic(spec);
  const FitOptions opt = flags.options();
  ModelParams est;
  FitReport report;
  if (is_variational(opt.variant)) {
    VemFit fit = fit_vem(data, opt);
    est = std::move(fit.params);
    report = std::move(fit.report);
  } else {
    EmFit fit = fit_em(data, opt);
    est = std::move(fit.params);
    report = std::move(fit.report);
  }
  json metrics;
  if (p > 0)
    metrics["beta_max_abs_error"] =
        (est.beta - truth.params.beta).cwiseAbs().maxCoeff();
  const Mat cov_true = implied_covariance(truth.params);
  const Mat cov_est = implied_covariance(est);
  metrics["covariance_rel_frobenius_error"] =
      (cov_est - cov_true).norm() / cov_true.norm();
  auto rel_err = [](double est_v, double true_v) {
    return std::abs(est_v - true_v) / std::abs(true_v);
  };
  if (est.shared_noise())
    metrics["sigma2_e_rel_error"] = rel_err(est.sigma2_e, spec.sigma2_e);
  if (has_client_intercept(spec.variant))
    metrics["sigma2_a_rel_error"] = rel_err(est.sigma2_a, spec.sigma2_a);
  if (has_item_intercept(spec.variant))
    metrics["sigma2_b_rel_error"] = rel_err(est.sigma2_b, spec.sigma2_b);
  metrics["iterations"] = report.iterations;
  metrics["converged"] = report.converged;
  metrics["objective_trace"] = report.objective_trace;
  emit(metrics, out_path);
  return report.converged ? 0 : kExitMaxIter;
}

// ---------------------------------------------------------------------------
// baseline
// ---------------------------------------------------------------------------

int cmd_baseline(const std::string& train_path, int k, double tol, int max_iter,
                 const std::string& params_path) {
  const RatingsTriples train = read_ratings_file(train_path);
  const Vec beta = ols_regression(train);
  const ResidualMatrix residuals = ResidualMatrix::build(train, beta);
  const HardImputeResult hi = hard_impute(residuals, k, tol, max_iter);
  json j;
  j["variant"] = "baseline";
  j["k"] = k;
  j["n_users"] = train.n_users;
  j["n_items"] = train.n_items;
  j["p"] = train.p;
  j["beta"] = detail::vec_to_json(beta);
  j["U"] = detail::mat_to_json(hi.factorization.u);
  j["D"] = detail::vec_to_json(hi.factorization.d);
  j["V"] = detail::mat_to_json(hi.factorization.v);
  if (!params_path.empty()) detail::write_text(params_path, j.dump(2) + "\n");
  json metrics;
  metrics["iterations"] = hi.iterations;
  metrics["converged"] = hi.converged;
  metrics["train_sse"] = hi.train_sse_trace.back();
  emit(metrics, "");
  return hi.converged ? 0 : kExitMaxIter;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Factor-analysis recommender models for sparse rating matrices"};
  app.require_subcommand(1);

  // ingest
  auto* ingest = app.add_subcommand("ingest", "build canonical train/test files from raw MovieLens-100K");
  std::string raw_dir, out_train, out_test;
  int split = 1;
  ingest->add_option("--raw-dir", raw_dir, "directory with u.user, u.item, uN.base, uN.test")->required();
  ingest->add_option("--split", split, "split id 1..5")->required();
  ingest->add_option("--out-train", out_train)->required();
  ingest->add_option("--out-test", out_test)->required();

  // fit
  auto* fit = app.add_subcommand("fit", "fit a model variant to a canonical ratings file");
  FitFlags fit_flags;
  std::string train_path, params_path, report_path;
  fit->add_option("--train", train_path)->required();
  fit->add_option("--params", params_path, "output params file");
  fit->add_option("--report", report_path, "output report file");
  fit_flags.attach(fit);

  // evaluate
  auto* evaluate = app.add_subcommand("evaluate", "score a params file on a test file");
  std::string eval_params, eval_test, eval_out, eval_dump;
  evaluate->add_option("--params", eval_params)->required();
  evaluate->add_option("--test", eval_test)->required();
  evaluate->add_option("--out", eval_out, "metrics file");
  evaluate->add_option("--dump", eval_dump, "per-prediction dump file");

  // sweep
  auto* sweep = app.add_subcommand("sweep", "fit every (K, seed) cell and report test MSEs");
  FitFlags sweep_flags;
  std::string sweep_train, sweep_test, sweep_out;
  int k_min = 1, k_max = 3, n_seeds = 3;
  sweep->add_option("--train", sweep_train)->required();
  sweep->add_option("--test", sweep_test)->required();
  sweep->add_option("--k-min", k_min);
  sweep->add_option("--k-max", k_max);
  sweep->add_option("--seeds", n_seeds, "number of seeds per K");
  sweep->add_option("--out", sweep_out, "summary file");
  sweep_flags.attach(sweep);

  // simulate
  auto* simulate = app.add_subcommand("simulate", "parameter-recovery run on synthetic data");
  FitFlags sim_flags;
  int sim_users = 2000, sim_items = 100, sim_p = 3, sim_rpu = 30;
  double sim_se = 1.0, sim_sa = 0.5, sim_sb = 0.5;
  std::string sim_out;
  simulate->add_option("--users", sim_users);
  simulate->add_option("--items", sim_items);
  simulate->add_option("--p", sim_p, "covariate dimension");
  simulate->add_option("--ratings-per-user", sim_rpu);
  simulate->add_option("--sigma2-e", sim_se);
  simulate->add_option("--sigma2-a", sim_sa);
  simulate->add_option("--sigma2-b", sim_sb);
  simulate->add_option("--out", sim_out, "recovery report file");
  sim_flags.attach(simulate);

  // baseline
  auto* baseline = app.add_subcommand("baseline", "OLS on covariates + rank-K hard impute on residuals");
  std::string base_train, base_params;
  int base_k = 1, base_max_iter = 300;
  double base_tol = 1e-5;
  baseline->add_option("--train", base_train)->required();
  baseline->add_option("--k", base_k);
  baseline->add_option("--tol", base_tol);
  baseline->add_option("--max-iter", base_max_iter);
  baseline->add_option("--params", base_params, "output params file");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*ingest) return cmd_ingest(raw_dir, split, out_train, out_test);
    if (*fit) return cmd_fit(fit_flags, train_path, params_path, report_path);
    if (*evaluate) return cmd_evaluate(eval_params, eval_test, eval_out, eval_dump);
    if (*sweep)
      return cmd_sweep(sweep_flags, sweep_train, sweep_test, k_min, k_max,
                       n_seeds, sweep_out);
    if (*simulate)
      return cmd_simulate(sim_flags, sim_users, sim_items, sim_p, sim_rpu,
                          sim_se, sim_sa, sim_sb, sim_out);
    if (*baseline)
      return cmd_baseline(base_train, base_k, base_tol, base_max_iter,
                          base_params);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitError;
  }
  return kExitError;
}
