#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "core/estimator.hpp"
#include "core/simlab.hpp"
#include "oracles.hpp"

using namespace mlmgof;

namespace {

Dataset make_ds(const std::vector<int>& y, const std::vector<std::string>& id2,
                const std::vector<double>& x) {
  RawTable t;
  t.covariate_names = {"x"};
  t.has_level3 = false;
  for (std::size_t i = 0; i < y.size(); ++i) {
    RawRecord r;
    r.outcome = y[i];
    r.level2 = id2[i];
    r.covariates = {x[i]};
    t.rows.push_back(std::move(r));
  }
  return validate_dataset(t);
}

ModelSpec intercept_re_spec(bool with_fixed_x = true) {
  ModelSpec spec;
  if (with_fixed_x) spec.fixed = {"x"};
  spec.random.level2.intercept = true;
  return spec;
}

Eigen::MatrixXd scalar_omega(double var) {
  Eigen::MatrixXd o(1, 1);
  o << var;
  return o;
}

double plain_bernoulli_loglik(const Eigen::MatrixXd& X, const std::vector<int>& y,
                              const Eigen::VectorXd& beta) {
  double ll = 0.0;
  Eigen::VectorXd eta = X * beta;
  for (std::size_t i = 0; i < y.size(); ++i)
    ll += y[i] * eta[i] - log1pexp(eta[i]);
  return ll;
}

} // namespace

TEST_CASE("zero variance collapses to the plain Bernoulli log-likelihood") {
  Dataset ds = make_ds({1, 0, 1, 1}, {"a", "a", "b", "b"}, {0.5, -0.2, 1.0, 0.1});
  ModelSpec spec = intercept_re_spec();
  DesignMatrices d = build_design(ds, spec);
  Eigen::VectorXd beta(2);
  beta << 0.3, -0.7;
  const double ll = marginal_loglik(beta, scalar_omega(0.0), Eigen::MatrixXd(), d,
                                    gh_rule(7));
  CHECK(ll == plain_bernoulli_loglik(d.X_full, ds.y, beta));
}

TEST_CASE("single observation, unit variance: integral is exactly one half") {
  Dataset ds = make_ds({1, 1}, {"a", "b"}, {0.0, 0.0});
  ModelSpec spec = intercept_re_spec(false);
  DesignMatrices d = build_design(ds, spec);
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(1);
  const double ll =
      marginal_loglik(beta, scalar_omega(1.0), Eigen::MatrixXd(), d, gh_rule(25));
  CHECK(ll == doctest::Approx(2.0 * std::log(0.5)).epsilon(1e-6));
}

TEST_CASE("two-observation clusters match a trapezoid integration oracle") {
  Dataset ds = make_ds({1, 0, 0, 1}, {"a", "a", "b", "b"}, {0.4, -1.2, 0.9, 2.0});
  ModelSpec spec = intercept_re_spec();
  DesignMatrices d = build_design(ds, spec);
  Eigen::VectorXd beta(2);
  beta << 0.3, -0.4;
  const double sigma = 0.7;
  const double ll = marginal_loglik(beta, scalar_omega(sigma * sigma),
                                    Eigen::MatrixXd(), d, gh_rule(15));

  double oracle = 0.0;
  for (const auto& sb : d.families[0].subjects) {
    Eigen::VectorXd eta = sb.X * beta;
    oracle += oracles::trapezoid_cluster_loglik(eta, sb.y, sigma);
  }
  CHECK(ll == doctest::Approx(oracle).epsilon(1e-6));
}

TEST_CASE("quadrature score matches central finite differences") {
  Scenario sc;
  sc.part = 3;
  sc.level2_sizes.assign(10, 6);
  sc.icc = 0.20;
  Dataset ds = generate_dataset(sc, 31);
  ModelSpec spec = scenario_model_spec(sc);
  DesignMatrices d = build_design(ds, spec);
  const QuadratureRule rule = gh_rule(15);

  std::mt19937_64 eng(99);
  std::normal_distribution<double> norm(0.0, 0.4);
  std::uniform_real_distribution<double> vunif(0.2, 1.2);
  for (int trial = 0; trial < 10; ++trial) {
    Eigen::VectorXd beta(3);
    for (int q = 0; q < 3; ++q) beta[q] = norm(eng);
    Eigen::MatrixXd omega2 = Eigen::Vector2d(vunif(eng), vunif(eng)).asDiagonal();

    const Eigen::VectorXd score = score_beta(beta, omega2, Eigen::MatrixXd(), d, rule);
    const double h = 1e-5;
    Eigen::VectorXd fd(3);
    for (int q = 0; q < 3; ++q) {
      Eigen::VectorXd bp = beta, bm = beta;
      bp[q] += h;
      bm[q] -= h;
      fd[q] = (marginal_loglik(bp, omega2, Eigen::MatrixXd(), d, rule) -
               marginal_loglik(bm, omega2, Eigen::MatrixXd(), d, rule)) /
              (2.0 * h);
    }
    const double rel = (score - fd).lpNorm<Eigen::Infinity>() /
                       std::max(1.0, fd.lpNorm<Eigen::Infinity>());
    CHECK(rel < 1e-4);
  }
}

TEST_CASE("marginal likelihood is invariant under cluster and row permutations") {
  Scenario sc;
  sc.part = 3;
  sc.level2_sizes.assign(8, 5);
  sc.icc = 0.15;
  Dataset ds = generate_dataset(sc, 12);
  ModelSpec spec = scenario_model_spec(sc);
  DesignMatrices d = build_design(ds, spec);

  // Permute whole clusters and rows within clusters.
  RawTable t;
  t.covariate_names = ds.covariate_names;
  t.has_level3 = false;
  std::mt19937_64 eng(5);
  std::vector<int> order(ds.n_level2());
  for (int k = 0; k < ds.n_level2(); ++k) order[k] = k;
  std::shuffle(order.begin(), order.end(), eng);
  for (int k : order) {
    std::vector<long> rows;
    for (long i = 0; i < ds.n_rows(); ++i)
      if (ds.level2[i] == k) rows.push_back(i);
    std::shuffle(rows.begin(), rows.end(), eng);
    for (long i : rows) {
      RawRecord r;
      r.outcome = ds.y[i];
      r.level2 = ds.level2_labels[k];
      r.covariates = {ds.covariates(i, 0), ds.covariates(i, 1)};
      t.rows.push_back(std::move(r));
    }
  }
  DesignMatrices d2 = build_design(validate_dataset(t), spec);

  Eigen::VectorXd beta(3);
  beta << -0.5, 0.3, 0.2;
  Eigen::MatrixXd omega2 = Eigen::Vector2d(0.8, 0.25).asDiagonal();
  const double a = marginal_loglik(beta, omega2, Eigen::MatrixXd(), d, gh_rule(7));
  const double b = marginal_loglik(beta, omega2, Eigen::MatrixXd(), d2, gh_rule(7));
  CHECK(a == doctest::Approx(b).epsilon(1e-9));
}

TEST_CASE("plain logistic fit matches the IRLS oracle") {
  std::mt19937_64 eng(2024);
  for (unsigned seed : {11u, 12u}) {
    Eigen::VectorXd beta_true(3);
    beta_true << -0.4, 0.8, -0.3;
    oracles::LogisticData sim = oracles::simulate_logistic(400, beta_true, seed);

    RawTable t;
    t.covariate_names = {"x1", "x2"};
    t.has_level3 = false;
    for (long i = 0; i < 400; ++i) {
      RawRecord r;
      r.outcome = sim.y[i];
      r.level2 = "c" + std::to_string(i % 7);
      r.covariates = {sim.X(i, 1), sim.X(i, 2)};
      t.rows.push_back(std::move(r));
    }
    Dataset ds = validate_dataset(t);
    ModelSpec spec;
    spec.fixed = {"x1", "x2"};

    FittedModel fm = fit(ds, spec);
    const Eigen::VectorXd oracle = oracles::irls_logistic(sim.X, sim.y);
    CHECK((fm.beta - oracle).lpNorm<Eigen::Infinity>() < 1e-6);
    CHECK(fm.converged);
  }
}

TEST_CASE("symmetric data yields a zero intercept") {
  std::mt19937_64 eng(8);
  std::normal_distribution<double> norm(0.0, 1.5);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  RawTable t;
  t.covariate_names = {"x1"};
  t.has_level3 = false;
  for (int i = 0; i < 150; ++i) {
    const double x = norm(eng);
    const int y = unif(eng) < oracles::sigmoid(0.9 * x) ? 1 : 0;
    RawRecord a;
    a.outcome = y;
    a.level2 = "u";
    a.covariates = {x};
    RawRecord b;
    b.outcome = 1 - y;
    b.level2 = "v";
    b.covariates = {-x};
    t.rows.push_back(a);
    t.rows.push_back(b);
  }
  ModelSpec spec;
  spec.fixed = {"x1"};
  FittedModel fm = fit(validate_dataset(t), spec);
  CHECK(std::abs(fm.beta[0]) < 1e-6);
}

TEST_CASE("EB modes: degenerate prior and symmetry") {
  Dataset ds = make_ds({1, 0, 1, 0}, {"a", "a", "b", "b"}, {0, 0, 0, 0});
  ModelSpec spec = intercept_re_spec(false);
  DesignMatrices d = build_design(ds, spec);
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(1);

  EbModes tiny = eb_modes(beta, scalar_omega(1e-12), Eigen::MatrixXd(), d);
  for (const auto& u : tiny.level2) CHECK(std::abs(u[0]) < 1e-6);

  // Half the outcomes are 1 with identical covariates and beta0 = 0.
  EbModes sym = eb_modes(beta, scalar_omega(1.0), Eigen::MatrixXd(), d);
  for (const auto& u : sym.level2) CHECK(std::abs(u[0]) < 1e-9);
}

TEST_CASE("EB mode matches a dense grid search") {
  Dataset ds = make_ds({1, 1, 0, 1, 0, 0, 0, 1}, {"a", "a", "a", "a", "a", "b", "b", "b"},
                       {0.5, -0.3, 0.8, 0.2, -1.0, 0.4, 0.9, -0.6});
  ModelSpec spec = intercept_re_spec();
  DesignMatrices d = build_design(ds, spec);
  Eigen::VectorXd beta(2);
  beta << 0.2, 0.5;
  const double sigma = 0.9;
  EbModes eb = eb_modes(beta, scalar_omega(sigma * sigma), Eigen::MatrixXd(), d);
  for (const auto& sb : d.families[0].subjects) {
    Eigen::VectorXd eta = sb.X * beta;
    const double oracle = oracles::grid_mode(eta, sb.y, sigma);
    CHECK(std::abs(eb.level2[sb.level2_index][0] - oracle) < 1e-4);
  }
}

TEST_CASE("conditional predictions") {
  Dataset ds = make_ds({1, 0}, {"a", "b"}, {0.0, 0.0});
  ModelSpec spec = intercept_re_spec(false);

  FittedModel fm;
  fm.beta = Eigen::VectorXd::Zero(1);
  fm.eb_level2 = {Eigen::VectorXd::Zero(1), Eigen::VectorXd::Zero(1)};
  fm.eb_level3 = {Eigen::VectorXd()};
  Eigen::VectorXd p = predict_conditional(fm, ds, spec);
  CHECK(p[0] == doctest::Approx(0.5));
  CHECK(p[1] == doctest::Approx(0.5));

  // eta = -1.0 with zero covariates and zero modes.
  fm.beta[0] = -1.0;
  p = predict_conditional(fm, ds, spec);
  CHECK(p[0] == doctest::Approx(0.26894).epsilon(1e-4));

  // Random intercept + slope contributions: eta = -1 + 0.3 + 0.1 + 0.2.
  RawTable t;
  t.covariate_names = {"x2"};
  t.has_level3 = false;
  for (int i = 0; i < 2; ++i) {
    RawRecord r;
    r.outcome = 0;
    r.level2 = i == 0 ? "a" : "b";
    r.covariates = {1.0};
    t.rows.push_back(std::move(r));
  }
  Dataset ds2 = validate_dataset(t);
  ModelSpec spec2;
  spec2.fixed = {"x2"};
  spec2.random.level2.intercept = true;
  spec2.random.level2.slopes = {"x2"};
  FittedModel fm2;
  fm2.beta.resize(2);
  fm2.beta << -1.0, 0.3;
  Eigen::VectorXd u(2);
  u << 0.1, 0.2;
  fm2.eb_level2 = {u, Eigen::VectorXd::Zero(2)};
  fm2.eb_level3 = {Eigen::VectorXd()};
  p = predict_conditional(fm2, ds2, spec2);
  CHECK(p[0] == doctest::Approx(0.40131).epsilon(1e-4));
  CHECK(p[1] == doctest::Approx(oracles::sigmoid(-0.7)).epsilon(1e-6));
  for (long i = 0; i < p.size(); ++i) {
    CHECK(p[i] > 0.0);
    CHECK(p[i] < 1.0);
  }
}

TEST_CASE("node refinement shrinks monotonically") {
  Scenario sc;
  sc.part = 3;
  sc.level2_sizes.assign(25, 6);
  sc.icc = 0.30;
  Dataset ds = generate_dataset(sc, 77);
  ModelSpec spec = scenario_model_spec(sc);

  double ll[3];
  int idx = 0;
  for (int nodes : {5, 9, 15}) {
    FitOptions opts;
    opts.nodes = nodes;
    opts.compute_cov = false;
    ll[idx++] = fit(ds, spec, opts).loglik;
  }
  CHECK(std::abs(ll[1] - ll[0]) >= std::abs(ll[2] - ll[1]));
}

TEST_CASE("fixed-effect covariance is symmetric with positive diagonal") {
  Scenario sc;
  sc.part = 3;
  sc.level2_sizes.assign(20, 10);
  sc.icc = 0.20;
  Dataset ds = generate_dataset(sc, 3);
  ModelSpec spec = scenario_model_spec(sc);
  FittedModel fm = fit(ds, spec, FitOptions{.nodes = 5});
  CHECK((fm.fixed_cov - fm.fixed_cov.transpose()).lpNorm<Eigen::Infinity>() < 1e-8);
  for (long q = 0; q < fm.fixed_cov.rows(); ++q) CHECK(fm.fixed_cov(q, q) > 0.0);
  CHECK(fm.converged);
  CHECK(std::isfinite(fm.loglik));
}

TEST_CASE("three-level fit runs and reports both variance components") {
  Scenario sc;
  sc.part = 1;
  sc.J = 8;
  sc.K = 4;
  sc.n = 10;
  sc.icc = 0.30;
  Dataset ds = generate_dataset(sc, 21);
  ModelSpec spec = scenario_model_spec(sc);
  FitOptions opts;
  opts.nodes = 5;
  FittedModel fm = fit(ds, spec, opts);
  CHECK(fm.vc.level2.dim() == 2);
  CHECK(fm.vc.level3.dim() == 1);
  CHECK(fm.vc.level2.omega(0, 1) == 0.0); // independent structure
  CHECK(fm.eb_level3.size() == 8);
  for (const auto& v : fm.eb_level3) CHECK(v.size() == 1);
  Eigen::MatrixXd corr = fm.vc.level2.correlations();
  CHECK(corr(0, 0) == 1.0);
  CHECK(std::abs(corr(0, 1)) <= 1.0);
}

TEST_CASE("fit options are validated") {
  Dataset ds = make_ds({1, 0}, {"a", "b"}, {0.1, 0.2});
  ModelSpec spec;
  spec.fixed = {"x"};
  FitOptions opts;
  opts.nodes = 0;
  CHECK_THROWS_AS(fit(ds, spec, opts), EstimationError);
}
