#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "data.hpp"
#include "gof.hpp"

namespace mlmgof {

/// Latent-scale variance from the intraclass correlation:
/// sigma^2 = icc * (pi^2/3) / (1 - icc).
double icc_to_variance(double icc);

struct MonteCarloBounds {
  double lower = 0.0;
  double upper = 0.0;
};

/// Binomial 95% interval around a nominal rate: alpha +/- 1.96 sqrt(...).
MonteCarloBounds monte_carlo_bounds(double alpha, long reps);

enum class Misspec { None, Quadratic, Interaction, OmittedLevel };

const char* misspec_name(Misspec m);

/// One simulation design point (a row of the Part 1-3 grids).
struct Scenario {
  std::string id;
  int part = 1;
  // Standard design: J families x K subjects x n observations.
  int J = 1;
  int K = 1;
  int n = 1;
  // Part-3 design: explicit level-2 cluster sizes under one synthetic family.
  std::vector<int> level2_sizes;
  double icc = 0.10;
  double beta0 = -1.0, beta1 = 0.5, beta2 = 0.3;
  double slope_sd = 0.5;
  Misspec misspec = Misspec::None;
  double misspec_param = 0.0; // beta3 or sigma_extra
  GroupRule gof_rule;
  bool fit_three_level = true;

  long total_rows() const;
};

struct ScenarioSummary {
  long replications = 0;
  long rejections = 0;
  long failures = 0;
  long grouping_failures = 0;   // degenerate indicators / too few observations
  long estimation_failures = 0; // everything else
  double rejection_rate = 0.0;  // rejections / valid replications
  double failure_rate = 0.0;
  double mc_lower = 0.0;
  double mc_upper = 0.0;
  std::uint64_t seed = 0;
};

Dataset generate_dataset(const Scenario& sc, std::uint64_t rep_seed);

/// Fitted model for a scenario: fixed x1 + x2, level-2 random intercept and
/// slope on x2; level-3 random intercept when the scenario fits three levels.
ModelSpec scenario_model_spec(const Scenario& sc);

/// All Part 1-3 design points, Part-3 entries duplicated per grouping rule.
std::vector<Scenario> scenario_catalog();

struct SimOptions {
  int nodes = 7;
  int jobs = 1;
  double alpha = 0.05;
  int max_iter = 200;
  double tol = 1e-6;
};

ScenarioSummary run_scenario(const Scenario& sc, long reps, std::uint64_t master_seed,
                             const SimOptions& opts = SimOptions());

std::string summary_csv_header();
std::string summary_csv_row(const Scenario& sc, const ScenarioSummary& s,
                            long reps, std::uint64_t master_seed);

} // namespace mlmgof
