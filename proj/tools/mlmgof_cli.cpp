// Command-line front end: fit, gof, simulate, catalog.
#include <CLI11.hpp>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "mlmgof.h"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailedGof = 1;
constexpr int kExitUsage = 2;
constexpr int kExitData = 3;

[[noreturn]] void die(int code, const std::string& msg) {
  std::cerr << "error: " << msg << "\n";
  std::exit(code);
}

int exit_code_for(mlmgof_status st) {
  switch (st) {
    case MLMGOF_OK: return kExitOk;
    case MLMGOF_ERR_DATA:
    case MLMGOF_ERR_IO: return kExitData;
    case MLMGOF_ERR_INVALID: return kExitUsage;
    default: return kExitFailedGof;
  }
}

void check(mlmgof_status st, const std::string& stage) {
  if (st != MLMGOF_OK) die(exit_code_for(st), stage + ": " + mlmgof_last_error());
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (pos <= s.size()) {
    const std::size_t next = std::min(s.find(sep, pos), s.size());
    if (next > pos) out.push_back(s.substr(pos, next - pos));
    pos = next + 1;
  }
  return out;
}

struct DataFlags {
  std::string path;
  std::string outcome = "y";
  std::string id2 = "id2";
  std::string id3 = "id3";
};

// The core parser expects the canonical column names y/id2/id3; map the
// user's column names onto them in the header before handing the text over.
mlmgof_dataset* load_dataset(const DataFlags& df) {
  std::ifstream in(df.path, std::ios::binary);
  if (!in) die(kExitData, "cannot open " + df.path);
  std::stringstream buf;
  buf << in.rdbuf();
  std::string text = buf.str();

  const std::size_t eol = text.find('\n');
  std::string header = text.substr(0, eol == std::string::npos ? text.size() : eol);
  if (!header.empty() && header.back() == '\r') header.pop_back();
  std::vector<std::string> cols = split(header, ',');
  for (auto& c : cols) {
    if (c == df.outcome) c = "y";
    else if (c == df.id2) c = "id2";
    else if (c == df.id3) c = "id3";
  }
  std::string renamed;
  for (std::size_t i = 0; i < cols.size(); ++i)
    renamed += (i ? "," : "") + cols[i];
  text = renamed + (eol == std::string::npos ? "" : text.substr(eol));

  mlmgof_dataset* ds = nullptr;
  check(mlmgof_dataset_parse_csv(text.c_str(), &ds), "data");
  return ds;
}

// Clause syntax: <idcol>:intercept+slope1+slope2[:unstructured]
void apply_re_clause(mlmgof_spec* spec, const DataFlags& df,
                     const std::string& clause) {
  const std::vector<std::string> parts = split(clause, ':');
  if (parts.size() < 2 || parts.size() > 3)
    die(kExitUsage, "bad --re clause: " + clause);
  int level = 0;
  if (parts[0] == df.id2) level = 2;
  else if (parts[0] == df.id3) level = 3;
  else die(kExitUsage, "--re must target the level-2 or level-3 id column");
  const int unstructured = parts.size() == 3 && parts[2] == "unstructured";
  if (parts.size() == 3 && !unstructured)
    die(kExitUsage, "bad --re structure: " + parts[2]);

  int intercept = 0;
  std::string slopes;
  for (const std::string& term : split(parts[1], '+')) {
    if (term == "intercept") intercept = 1;
    else slopes += (slopes.empty() ? "" : ",") + term;
  }
  check(mlmgof_spec_set_random(spec, level, intercept,
                               slopes.empty() ? nullptr : slopes.c_str(),
                               unstructured),
        "model spec");
}

mlmgof_spec* build_spec(const DataFlags& df, const std::string& fixed_csv,
                        const std::vector<std::string>& re_clauses) {
  mlmgof_spec* spec = nullptr;
  check(mlmgof_spec_new(&spec), "model spec");
  for (const std::string& name : split(fixed_csv, ','))
    check(mlmgof_spec_add_fixed(spec, name.c_str()), "model spec");
  for (const std::string& clause : re_clauses) apply_re_clause(spec, df, clause);
  return spec;
}

mlmgof_fit_options make_options(int nodes, int max_iter, double tol) {
  mlmgof_fit_options opts;
  mlmgof_fit_options_default(&opts);
  if (nodes > 0) opts.nodes = nodes;
  if (max_iter > 0) opts.max_iter = max_iter;
  if (tol > 0) opts.tol = tol;
  return opts;
}

void print_fit_report(const mlmgof_fit* fit) {
  std::ostream& os = std::cout;
  os << "Log likelihood: ";
  os.precision(6);
  os << std::fixed << mlmgof_fit_loglik(fit) << "\n";
  if (!mlmgof_fit_converged(fit)) os << "warning: optimizer did not converge\n";
  os << "\nFixed effects (odds-ratio scale, Wald 95% intervals):\n";
  char line[160];
  std::snprintf(line, sizeof line, "%-16s %10s %10s %10s %10s\n", "term",
                "odds ratio", "std err", "ci low", "ci high");
  os << line;
  for (int q = 0; q < mlmgof_fit_n_coef(fit); ++q) {
    const double b = mlmgof_fit_coef(fit, q);
    const double se = mlmgof_fit_coef_se(fit, q);
    std::snprintf(line, sizeof line, "%-16s %10.4f %10.4f %10.4f %10.4f\n",
                  mlmgof_fit_coef_name(fit, q), std::exp(b), std::exp(b) * se,
                  std::exp(b - 1.96 * se), std::exp(b + 1.96 * se));
    os << line;
  }
  for (int level : {3, 2}) {
    const int dim = mlmgof_fit_re_dim(fit, level);
    if (dim <= 0) continue;
    os << "\nRandom effects, level " << level << " (SD scale):\n";
    for (int i = 0; i < dim; ++i) {
      std::snprintf(line, sizeof line, "%-16s %10.4f\n",
                    mlmgof_fit_re_name(fit, level, i),
                    mlmgof_fit_re_sd(fit, level, i));
      os << line;
    }
    for (int i = 0; i < dim; ++i)
      for (int j = i + 1; j < dim; ++j) {
        const double r = mlmgof_fit_re_corr(fit, level, i, j);
        if (r != 0.0) {
          std::snprintf(line, sizeof line, "corr(%s, %s) = %.4f\n",
                        mlmgof_fit_re_name(fit, level, i),
                        mlmgof_fit_re_name(fit, level, j), r);
          os << line;
        }
      }
  }
}

std::uint64_t resolve_seed(bool seed_set, std::uint64_t seed) {
  if (seed_set) return seed;
  if (const char* env = std::getenv("MLMGOF_SEED")) {
    try {
      return std::stoull(env);
    } catch (const std::exception&) {
      die(kExitUsage, "MLMGOF_SEED is not a number");
    }
  }
  die(kExitUsage, "simulate needs --seed or MLMGOF_SEED");
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) die(kExitData, "cannot write " + path);
  return out;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mixed-effects logistic regression with a grouping-based "
               "Wald goodness-of-fit test"};
  app.require_subcommand(1);

  DataFlags df;
  std::string fixed_csv;
  std::vector<std::string> re_clauses;
  int nodes = 0, max_iter = 0, groups = 0;
  double tol = 0.0;

  auto add_model_flags = [&](CLI::App* sub) {
    sub->add_option("--data", df.path, "input CSV")->required();
    sub->add_option("--outcome", df.outcome, "outcome column (default y)");
    sub->add_option("--id2", df.id2, "level-2 id column (default id2)");
    sub->add_option("--id3", df.id3, "level-3 id column (default id3)");
    sub->add_option("--fixed", fixed_csv, "comma-separated fixed covariates");
    sub->add_option("--re", re_clauses,
                    "random effects, e.g. id2:intercept+x2 (repeatable)");
    sub->add_option("--nodes", nodes, "quadrature nodes per dimension");
    sub->add_option("--max-iter", max_iter, "optimizer iteration cap");
    sub->add_option("--tol", tol, "convergence tolerance");
  };

  CLI::App* fit_cmd = app.add_subcommand("fit", "fit a model and print the table");
  add_model_flags(fit_cmd);

  CLI::App* gof_cmd = app.add_subcommand("gof", "run the goodness-of-fit test");
  add_model_flags(gof_cmd);
  gof_cmd->add_option("--groups", groups,
                      "force the number of groups (default: data-driven)")
      ->check(CLI::Range(2, 50));

  long reps = 0;
  std::uint64_t seed = 0;
  bool seed_set = false;
  int part = 0, jobs = 0;
  std::string scenario_id, out_path;
  CLI::App* sim_cmd = app.add_subcommand("simulate", "run simulation scenarios");
  sim_cmd->add_option("--part", part, "run every scenario of this part (1-3)")
      ->check(CLI::Range(1, 3));
  sim_cmd->add_option("--scenario", scenario_id, "run a single scenario id");
  sim_cmd->add_option("--reps", reps, "replications per scenario")->required();
  sim_cmd->add_option("--seed", seed, "master seed (or env MLMGOF_SEED)")
      ->each([&](const std::string&) { seed_set = true; });
  sim_cmd->add_option("--jobs", jobs, "worker threads (default: hardware)");
  sim_cmd->add_option("--nodes", nodes, "quadrature nodes per dimension");
  sim_cmd->add_option("--out", out_path, "output CSV path (default stdout)");

  std::string cat_out;
  CLI::App* cat_cmd = app.add_subcommand("catalog", "list simulation scenarios");
  cat_cmd->add_option("--out", cat_out, "output CSV path (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e); // --help
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }

  if (*fit_cmd) {
    mlmgof_dataset* ds = load_dataset(df);
    mlmgof_spec* spec = build_spec(df, fixed_csv, re_clauses);
    const mlmgof_fit_options opts = make_options(nodes, max_iter, tol);
    mlmgof_fit* fit = nullptr;
    check(mlmgof_fit_model(ds, spec, &opts, &fit), "estimation");
    print_fit_report(fit);
    mlmgof_fit_free(fit);
    mlmgof_spec_free(spec);
    mlmgof_dataset_free(ds);
    return kExitOk;
  }

  if (*gof_cmd) {
    mlmgof_dataset* ds = load_dataset(df);
    mlmgof_spec* spec = build_spec(df, fixed_csv, re_clauses);
    const mlmgof_fit_options opts = make_options(nodes, max_iter, tol);
    mlmgof_gof* gof = nullptr;
    check(mlmgof_gof_run(ds, spec, groups, &opts, &gof), "gof");

    char record[512];
    check(mlmgof_gof_record_csv(gof, record, sizeof record), "gof");
    std::cout << "G_used,rule,W,df,p_value,status,baseline_loglik,"
                 "augmented_loglik\n"
              << record << "\n";
    const bool ok = mlmgof_gof_ok(gof) == 1;
    if (ok) {
      char footer[256];
      std::snprintf(footer, sizeof footer,
                    "Groups used (G) = %d, Wald chi2 = %.4f, df = %d, p = %.4f\n",
                    mlmgof_gof_groups(gof), mlmgof_gof_wald(gof),
                    mlmgof_gof_df(gof), mlmgof_gof_pvalue(gof));
      std::cout << footer;
    } else {
      std::cerr << "error: gof failed: " << mlmgof_gof_failure(gof) << "\n";
    }
    mlmgof_gof_free(gof);
    mlmgof_spec_free(spec);
    mlmgof_dataset_free(ds);
    return ok ? kExitOk : kExitFailedGof;
  }

  if (*sim_cmd) {
    if (part == 0 && scenario_id.empty())
      die(kExitUsage, "simulate needs --part or --scenario");
    const std::uint64_t master = resolve_seed(seed_set, seed);
    if (jobs <= 0) {
      const unsigned hw = std::thread::hardware_concurrency();
      jobs = hw > 0 ? static_cast<int>(hw) : 1;
    }

    std::vector<std::string> ids;
    if (!scenario_id.empty()) {
      ids.push_back(scenario_id);
    } else {
      const int n = mlmgof_catalog_size();
      for (int i = 0; i < n; ++i) {
        char id[128];
        int sc_part = 0;
        check(mlmgof_catalog_entry(i, id, sizeof id, &sc_part), "catalog");
        if (sc_part == part) ids.emplace_back(id);
      }
    }

    std::ofstream file;
    if (!out_path.empty()) file = open_out(out_path);
    std::ostream& os = out_path.empty() ? std::cout : file;

    char header[512];
    check(mlmgof_summary_header(header, sizeof header), "simulate");
    os << header << "\n";
    for (const std::string& id : ids) {
      char row[1024];
      check(mlmgof_simulate(id.c_str(), reps, master, nodes, jobs, row,
                            sizeof row),
            "simulate " + id);
      os << row << "\n";
      os.flush();
    }
    return kExitOk;
  }

  // catalog
  std::ofstream file;
  if (!cat_out.empty()) file = open_out(cat_out);
  std::ostream& os = cat_out.empty() ? std::cout : file;
  os << "scenario_id,part\n";
  const int n = mlmgof_catalog_size();
  for (int i = 0; i < n; ++i) {
    char id[128];
    int sc_part = 0;
    check(mlmgof_catalog_entry(i, id, sizeof id, &sc_part), "catalog");
    os << id << "," << sc_part << "\n";
  }
  return kExitOk;
}
