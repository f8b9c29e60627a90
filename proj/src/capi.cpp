#include "mlmgof.h"

#include <algorithm>
#include <cstring>
#include <string>

#include "core/data.hpp"
#include "core/estimator.hpp"
#include "core/gof.hpp"
#include "core/simlab.hpp"

using namespace mlmgof;

struct mlmgof_dataset {
  Dataset ds;
};
struct mlmgof_spec {
  ModelSpec spec;
};
struct mlmgof_fit {
  FittedModel fm;
};
struct mlmgof_gof {
  GofResult res;
};

namespace {

thread_local std::string g_last_error;

void set_error(const std::string& msg) { g_last_error = msg; }

mlmgof_status fail(mlmgof_status code, const std::string& msg) {
  set_error(msg);
  return code;
}

// Runs fn, translating exceptions into status codes.
template <typename Fn>
mlmgof_status guarded(Fn&& fn) {
  try {
    fn();
    g_last_error.clear();
    return MLMGOF_OK;
  } catch (const DataError& e) {
    return fail(e.code() == DataError::Code::Io ? MLMGOF_ERR_IO : MLMGOF_ERR_DATA,
                e.what());
  } catch (const EstimationError& e) {
    return fail(MLMGOF_ERR_ESTIMATION, e.what());
  } catch (const GofError& e) {
    return fail(MLMGOF_ERR_GOF, e.what());
  } catch (const std::invalid_argument& e) {
    return fail(MLMGOF_ERR_INVALID, e.what());
  } catch (const std::exception& e) {
    return fail(MLMGOF_ERR_INTERNAL, e.what());
  }
}

FitOptions to_fit_options(const mlmgof_fit_options* opts) {
  FitOptions out;
  if (opts) {
    out.nodes = opts->nodes;
    out.max_iter = opts->max_iter;
    out.tol = opts->tol;
    out.compute_cov = opts->compute_cov != 0;
  }
  return out;
}

const LevelCov* level_cov(const mlmgof_fit* fit, int level) {
  if (!fit) return nullptr;
  if (level == 2) return &fit->fm.vc.level2;
  if (level == 3) return &fit->fm.vc.level3;
  return nullptr;
}

mlmgof_status copy_out(const std::string& s, char* buf, long buf_len) {
  if (!buf || buf_len <= static_cast<long>(s.size()))
    return fail(MLMGOF_ERR_INVALID, "output buffer too small");
  std::memcpy(buf, s.c_str(), s.size() + 1);
  return MLMGOF_OK;
}

const Scenario* find_scenario(const std::vector<Scenario>& cat, const char* id) {
  for (const auto& sc : cat)
    if (sc.id == id) return &sc;
  return nullptr;
}

} // namespace

extern "C" {

const char* mlmgof_version(void) { return "1.0.0"; }

const char* mlmgof_last_error(void) { return g_last_error.c_str(); }

mlmgof_status mlmgof_dataset_read_csv(const char* path, mlmgof_dataset** out) {
  if (!path || !out) return fail(MLMGOF_ERR_INVALID, "null argument");
  return guarded([&] {
    auto* h = new mlmgof_dataset{validate_dataset(read_csv(path))};
    *out = h;
  });
}

mlmgof_status mlmgof_dataset_parse_csv(const char* text, mlmgof_dataset** out) {
  if (!text || !out) return fail(MLMGOF_ERR_INVALID, "null argument");
  return guarded([&] {
    auto* h = new mlmgof_dataset{validate_dataset(parse_csv_text(text))};
    *out = h;
  });
}

void mlmgof_dataset_free(mlmgof_dataset* ds) { delete ds; }

long mlmgof_dataset_rows(const mlmgof_dataset* ds) {
  return ds ? ds->ds.n_rows() : -1;
}

int mlmgof_dataset_level2_count(const mlmgof_dataset* ds) {
  return ds ? ds->ds.n_level2() : -1;
}

int mlmgof_dataset_level3_count(const mlmgof_dataset* ds) {
  if (!ds) return -1;
  return ds->ds.synthetic_level3 ? 0 : ds->ds.n_level3();
}

long mlmgof_dataset_min_cluster_size(const mlmgof_dataset* ds) {
  return ds ? ds->ds.min_level2_size() : -1;
}

mlmgof_status mlmgof_spec_new(mlmgof_spec** out) {
  if (!out) return fail(MLMGOF_ERR_INVALID, "null argument");
  *out = new mlmgof_spec{};
  return MLMGOF_OK;
}

void mlmgof_spec_free(mlmgof_spec* spec) { delete spec; }

mlmgof_status mlmgof_spec_add_fixed(mlmgof_spec* spec, const char* name) {
  if (!spec || !name || !*name) return fail(MLMGOF_ERR_INVALID, "null argument");
  spec->spec.fixed.push_back(name);
  return MLMGOF_OK;
}

mlmgof_status mlmgof_spec_set_random(mlmgof_spec* spec, int level, int intercept,
                                     const char* slopes_csv, int unstructured) {
  if (!spec) return fail(MLMGOF_ERR_INVALID, "null argument");
  if (level != 2 && level != 3)
    return fail(MLMGOF_ERR_INVALID, "level must be 2 or 3");
  RandomPart part;
  part.intercept = intercept != 0;
  part.structure = unstructured ? CovStructure::Unstructured
                                : CovStructure::Independent;
  if (slopes_csv) {
    std::string s(slopes_csv);
    std::size_t pos = 0;
    while (pos <= s.size()) {
      const std::size_t comma = std::min(s.find(',', pos), s.size());
      std::string tok = s.substr(pos, comma - pos);
      if (!tok.empty()) part.slopes.push_back(tok);
      pos = comma + 1;
    }
  }
  (level == 2 ? spec->spec.random.level2 : spec->spec.random.level3) = part;
  return MLMGOF_OK;
}

void mlmgof_fit_options_default(mlmgof_fit_options* opts) {
  if (!opts) return;
  const FitOptions d;
  opts->nodes = d.nodes;
  opts->max_iter = d.max_iter;
  opts->tol = d.tol;
  opts->compute_cov = d.compute_cov ? 1 : 0;
}

mlmgof_status mlmgof_fit_model(const mlmgof_dataset* ds, const mlmgof_spec* spec,
                               const mlmgof_fit_options* opts, mlmgof_fit** out) {
  if (!ds || !spec || !out) return fail(MLMGOF_ERR_INVALID, "null argument");
  return guarded([&] {
    auto* h = new mlmgof_fit{fit(ds->ds, spec->spec, to_fit_options(opts))};
    *out = h;
  });
}

void mlmgof_fit_free(mlmgof_fit* fit) { delete fit; }

int mlmgof_fit_n_coef(const mlmgof_fit* fit) {
  return fit ? static_cast<int>(fit->fm.beta.size()) : -1;
}

const char* mlmgof_fit_coef_name(const mlmgof_fit* fit, int index) {
  if (!fit || index < 0 || index >= static_cast<int>(fit->fm.coef_names.size()))
    return nullptr;
  return fit->fm.coef_names[index].c_str();
}

double mlmgof_fit_coef(const mlmgof_fit* fit, int index) {
  if (!fit || index < 0 || index >= fit->fm.beta.size()) return NAN;
  return fit->fm.beta[index];
}

double mlmgof_fit_coef_se(const mlmgof_fit* fit, int index) {
  if (!fit || index < 0 || index >= fit->fm.fixed_cov.rows()) return NAN;
  return std::sqrt(fit->fm.fixed_cov(index, index));
}

double mlmgof_fit_loglik(const mlmgof_fit* fit) {
  return fit ? fit->fm.loglik : NAN;
}

int mlmgof_fit_converged(const mlmgof_fit* fit) {
  return fit ? (fit->fm.converged ? 1 : 0) : -1;
}

int mlmgof_fit_re_dim(const mlmgof_fit* fit, int level) {
  const LevelCov* lc = level_cov(fit, level);
  return lc ? lc->dim() : -1;
}

const char* mlmgof_fit_re_name(const mlmgof_fit* fit, int level, int index) {
  const LevelCov* lc = level_cov(fit, level);
  if (!lc || index < 0 || index >= lc->dim()) return nullptr;
  return lc->names[index].c_str();
}

double mlmgof_fit_re_sd(const mlmgof_fit* fit, int level, int index) {
  const LevelCov* lc = level_cov(fit, level);
  if (!lc || index < 0 || index >= lc->dim()) return NAN;
  return lc->sds()[index];
}

double mlmgof_fit_re_corr(const mlmgof_fit* fit, int level, int i, int j) {
  const LevelCov* lc = level_cov(fit, level);
  if (!lc || i < 0 || j < 0 || i >= lc->dim() || j >= lc->dim()) return NAN;
  return lc->correlations()(i, j);
}

mlmgof_status mlmgof_fit_predict(const mlmgof_fit* fit, const mlmgof_dataset* ds,
                                 const mlmgof_spec* spec, double* out, long out_len) {
  if (!fit || !ds || !spec || !out)
    return fail(MLMGOF_ERR_INVALID, "null argument");
  if (out_len < ds->ds.n_rows())
    return fail(MLMGOF_ERR_INVALID, "output buffer too small");
  return guarded([&] {
    Eigen::VectorXd p = predict_conditional(fit->fm, ds->ds, spec->spec);
    std::copy(p.data(), p.data() + p.size(), out);
  });
}

mlmgof_status mlmgof_gof_run(const mlmgof_dataset* ds, const mlmgof_spec* spec,
                             int forced_groups, const mlmgof_fit_options* opts,
                             mlmgof_gof** out) {
  if (!ds || !spec || !out) return fail(MLMGOF_ERR_INVALID, "null argument");
  if (forced_groups < 0)
    return fail(MLMGOF_ERR_INVALID, "forced_groups must be >= 0");
  const GroupRule rule =
      forced_groups > 0 ? GroupRule::fixed(forced_groups) : GroupRule::automatic();
  return guarded([&] {
    auto* h = new mlmgof_gof{run_test(ds->ds, spec->spec, rule, to_fit_options(opts))};
    *out = h;
  });
}

void mlmgof_gof_free(mlmgof_gof* gof) { delete gof; }

int mlmgof_gof_ok(const mlmgof_gof* gof) {
  return gof ? (gof->res.ok ? 1 : 0) : -1;
}

const char* mlmgof_gof_failure(const mlmgof_gof* gof) {
  return gof ? gof_failure_name(gof->res.failure) : nullptr;
}

int mlmgof_gof_groups(const mlmgof_gof* gof) { return gof ? gof->res.g_used : -1; }

double mlmgof_gof_wald(const mlmgof_gof* gof) {
  return gof && gof->res.ok ? gof->res.wald : NAN;
}

int mlmgof_gof_df(const mlmgof_gof* gof) {
  return gof && gof->res.ok ? gof->res.df : -1;
}

double mlmgof_gof_pvalue(const mlmgof_gof* gof) {
  return gof && gof->res.ok ? gof->res.p_value : NAN;
}

double mlmgof_gof_baseline_loglik(const mlmgof_gof* gof) {
  return gof ? gof->res.baseline_loglik : NAN;
}

double mlmgof_gof_augmented_loglik(const mlmgof_gof* gof) {
  return gof && gof->res.ok ? gof->res.augmented_loglik : NAN;
}

mlmgof_status mlmgof_gof_record_csv(const mlmgof_gof* gof, char* buf, long buf_len) {
  if (!gof) return fail(MLMGOF_ERR_INVALID, "null argument");
  return copy_out(gof->res.record_csv(), buf, buf_len);
}

int mlmgof_catalog_size(void) {
  return static_cast<int>(scenario_catalog().size());
}

mlmgof_status mlmgof_catalog_entry(int index, char* id_buf, long buf_len,
                                   int* part) {
  const std::vector<Scenario> cat = scenario_catalog();
  if (index < 0 || index >= static_cast<int>(cat.size()))
    return fail(MLMGOF_ERR_INVALID, "catalog index out of range");
  if (part) *part = cat[index].part;
  return copy_out(cat[index].id, id_buf, buf_len);
}

mlmgof_status mlmgof_summary_header(char* buf, long buf_len) {
  return copy_out(summary_csv_header(), buf, buf_len);
}

mlmgof_status mlmgof_simulate(const char* scenario_id, long reps,
                              uint64_t master_seed, int nodes, int jobs,
                              char* row_buf, long buf_len) {
  if (!scenario_id || reps < 1)
    return fail(MLMGOF_ERR_INVALID, "need a scenario id and reps >= 1");
  const std::vector<Scenario> cat = scenario_catalog();
  const Scenario* sc = find_scenario(cat, scenario_id);
  if (!sc)
    return fail(MLMGOF_ERR_INVALID,
                std::string("unknown scenario id: ") + scenario_id);
  std::string row;
  const mlmgof_status st = guarded([&] {
    SimOptions opts;
    if (nodes > 0) opts.nodes = nodes;
    if (jobs > 0) opts.jobs = jobs;
    const ScenarioSummary s = run_scenario(*sc, reps, master_seed, opts);
    row = summary_csv_row(*sc, s, reps, master_seed);
  });
  if (st != MLMGOF_OK) return st;
  return copy_out(row, row_buf, buf_len);
}

} // extern "C"
