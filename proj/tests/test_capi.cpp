#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <random>
#include <string>

#include "mlmgof.h"

namespace {

// Two-level clustered logistic data as CSV text.
std::string make_csv(int clusters, int per_cluster, unsigned seed) {
  std::mt19937_64 eng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::normal_distribution<double> norm(0.0, 1.0);
  std::string text = "y,id2,x1,x2\n";
  for (int k = 0; k < clusters; ++k) {
    const double u = 0.7 * norm(eng);
    for (int i = 0; i < per_cluster; ++i) {
      const double x1 = norm(eng);
      const double x2 = unif(eng) < 0.5 ? 1.0 : 0.0;
      const double eta = -0.5 + 0.6 * x1 + 0.3 * x2 + u;
      const int y = unif(eng) < 1.0 / (1.0 + std::exp(-eta)) ? 1 : 0;
      text += std::to_string(y) + ",c" + std::to_string(k) + "," +
              std::to_string(x1) + "," + std::to_string(x2) + "\n";
    }
  }
  return text;
}

struct SpecGuard {
  mlmgof_spec* s = nullptr;
  ~SpecGuard() { mlmgof_spec_free(s); }
};

struct DsGuard {
  mlmgof_dataset* d = nullptr;
  ~DsGuard() { mlmgof_dataset_free(d); }
};

} // namespace

TEST_CASE("version and argument validation") {
  CHECK(mlmgof_version() != nullptr);
  CHECK(mlmgof_dataset_parse_csv(nullptr, nullptr) == MLMGOF_ERR_INVALID);
  CHECK(std::strlen(mlmgof_last_error()) > 0);
  CHECK(mlmgof_dataset_rows(nullptr) == -1);
}

TEST_CASE("dataset round trip and data errors") {
  DsGuard ds;
  const std::string text = make_csv(12, 8, 1);
  REQUIRE(mlmgof_dataset_parse_csv(text.c_str(), &ds.d) == MLMGOF_OK);
  CHECK(mlmgof_dataset_rows(ds.d) == 96);
  CHECK(mlmgof_dataset_level2_count(ds.d) == 12);
  CHECK(mlmgof_dataset_level3_count(ds.d) == 0); // synthetic only
  CHECK(mlmgof_dataset_min_cluster_size(ds.d) == 8);

  mlmgof_dataset* bad = nullptr;
  CHECK(mlmgof_dataset_parse_csv("y,id2,x\n2,a,0\n0,b,1\n", &bad) ==
        MLMGOF_ERR_DATA);
  CHECK(std::strlen(mlmgof_last_error()) > 0);
  CHECK(mlmgof_dataset_read_csv("/nonexistent/file.csv", &bad) == MLMGOF_ERR_IO);
}

TEST_CASE("fit, accessors, and prediction") {
  DsGuard ds;
  const std::string text = make_csv(20, 12, 2);
  REQUIRE(mlmgof_dataset_parse_csv(text.c_str(), &ds.d) == MLMGOF_OK);

  SpecGuard spec;
  REQUIRE(mlmgof_spec_new(&spec.s) == MLMGOF_OK);
  CHECK(mlmgof_spec_add_fixed(spec.s, "x1") == MLMGOF_OK);
  CHECK(mlmgof_spec_add_fixed(spec.s, "x2") == MLMGOF_OK);
  CHECK(mlmgof_spec_set_random(spec.s, 2, 1, nullptr, 0) == MLMGOF_OK);
  CHECK(mlmgof_spec_set_random(spec.s, 4, 1, nullptr, 0) == MLMGOF_ERR_INVALID);

  mlmgof_fit_options opts;
  mlmgof_fit_options_default(&opts);
  CHECK(opts.nodes == 7);
  opts.nodes = 5;

  mlmgof_fit* fit = nullptr;
  REQUIRE(mlmgof_fit_model(ds.d, spec.s, &opts, &fit) == MLMGOF_OK);
  CHECK(mlmgof_fit_n_coef(fit) == 3);
  CHECK(std::string(mlmgof_fit_coef_name(fit, 0)) == "intercept");
  CHECK(std::string(mlmgof_fit_coef_name(fit, 1)) == "x1");
  CHECK(std::isfinite(mlmgof_fit_loglik(fit)));
  CHECK(mlmgof_fit_loglik(fit) < 0.0);
  CHECK(mlmgof_fit_converged(fit) == 1);
  for (int q = 0; q < 3; ++q) CHECK(mlmgof_fit_coef_se(fit, q) > 0.0);
  CHECK(std::isnan(mlmgof_fit_coef(fit, 99)));

  CHECK(mlmgof_fit_re_dim(fit, 2) == 1);
  CHECK(mlmgof_fit_re_dim(fit, 3) == 0);
  CHECK(mlmgof_fit_re_sd(fit, 2, 0) >= 0.0);
  CHECK(std::string(mlmgof_fit_re_name(fit, 2, 0)) == "intercept");

  std::vector<double> p(mlmgof_dataset_rows(ds.d));
  REQUIRE(mlmgof_fit_predict(fit, ds.d, spec.s, p.data(),
                             static_cast<long>(p.size())) == MLMGOF_OK);
  for (double v : p) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
  CHECK(mlmgof_fit_predict(fit, ds.d, spec.s, p.data(), 1) == MLMGOF_ERR_INVALID);
  mlmgof_fit_free(fit);
}

TEST_CASE("gof through the C interface") {
  DsGuard ds;
  const std::string text = make_csv(30, 6, 3);
  REQUIRE(mlmgof_dataset_parse_csv(text.c_str(), &ds.d) == MLMGOF_OK);

  SpecGuard spec;
  REQUIRE(mlmgof_spec_new(&spec.s) == MLMGOF_OK);
  CHECK(mlmgof_spec_add_fixed(spec.s, "x1") == MLMGOF_OK);
  CHECK(mlmgof_spec_add_fixed(spec.s, "x2") == MLMGOF_OK);
  CHECK(mlmgof_spec_set_random(spec.s, 2, 1, nullptr, 0) == MLMGOF_OK);

  mlmgof_fit_options opts;
  mlmgof_fit_options_default(&opts);
  opts.nodes = 5;

  mlmgof_gof* gof = nullptr;
  REQUIRE(mlmgof_gof_run(ds.d, spec.s, 0, &opts, &gof) == MLMGOF_OK);
  REQUIRE(mlmgof_gof_ok(gof) == 1);
  CHECK(mlmgof_gof_groups(gof) == 6);
  CHECK(mlmgof_gof_df(gof) == 5);
  CHECK(mlmgof_gof_wald(gof) >= 0.0);
  CHECK(mlmgof_gof_pvalue(gof) >= 0.0);
  CHECK(mlmgof_gof_pvalue(gof) <= 1.0);
  CHECK(mlmgof_gof_baseline_loglik(gof) <= mlmgof_gof_augmented_loglik(gof) + 1e-6);
  char record[512];
  CHECK(mlmgof_gof_record_csv(gof, record, sizeof record) == MLMGOF_OK);
  CHECK(std::string(record).find("ok") != std::string::npos);
  CHECK(mlmgof_gof_record_csv(gof, record, 3) == MLMGOF_ERR_INVALID);
  mlmgof_gof_free(gof);

  // Forcing more groups than a cluster holds fails gracefully.
  mlmgof_gof* forced = nullptr;
  REQUIRE(mlmgof_gof_run(ds.d, spec.s, 10, &opts, &forced) == MLMGOF_OK);
  CHECK(mlmgof_gof_ok(forced) == 0);
  CHECK(std::string(mlmgof_gof_failure(forced)) == "degenerate_indicators");
  CHECK(std::isnan(mlmgof_gof_pvalue(forced)));
  mlmgof_gof_free(forced);

  CHECK(mlmgof_gof_run(ds.d, spec.s, -1, &opts, &gof) == MLMGOF_ERR_INVALID);
}

TEST_CASE("simulation catalog and a tiny run") {
  const int n = mlmgof_catalog_size();
  CHECK(n == 54);
  char id[128];
  int part = 0;
  REQUIRE(mlmgof_catalog_entry(0, id, sizeof id, &part) == MLMGOF_OK);
  CHECK(part == 1);
  CHECK(mlmgof_catalog_entry(n, id, sizeof id, &part) == MLMGOF_ERR_INVALID);

  char header[512];
  REQUIRE(mlmgof_summary_header(header, sizeof header) == MLMGOF_OK);
  CHECK(std::string(header).rfind("scenario_id,", 0) == 0);

  char row[1024];
  CHECK(mlmgof_simulate("no_such_scenario", 1, 1, 3, 1, row, sizeof row) ==
        MLMGOF_ERR_INVALID);
  REQUIRE(mlmgof_simulate("p3_balanced_n3_auto", 2, 11, 3, 1, row, sizeof row) ==
          MLMGOF_OK);
  const std::string r(row);
  CHECK(r.rfind("p3_balanced_n3_auto,3,", 0) == 0);

  // Same seed reproduces the row; the thread count must not matter.
  char row2[1024];
  REQUIRE(mlmgof_simulate("p3_balanced_n3_auto", 2, 11, 3, 2, row2, sizeof row2) ==
          MLMGOF_OK);
  CHECK(r == std::string(row2));
}
