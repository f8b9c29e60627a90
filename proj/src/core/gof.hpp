#pragma once

#include <Eigen/Core>
#include <map>
#include <string>
#include <vector>

#include "data.hpp"
#include "estimator.hpp"

namespace mlmgof {

class GofError : public std::runtime_error {
public:
  enum class Code { TooFewObservations, SingularCovariance, DegenerateIndicators };

  GofError(Code code, const std::string& msg)
      : std::runtime_error(msg), code_(code) {}

  Code code() const { return code_; }

private:
  Code code_;
};

/// Group-count rule: the data-driven default G = min(10, n_min), or a
/// user-forced G.
struct GroupRule {
  bool data_driven = true;
  int forced = 0;

  static GroupRule automatic() { return GroupRule{}; }
  static GroupRule fixed(int g) { return GroupRule{false, g}; }
  std::string label() const {
    return data_driven ? "data_driven" : "forced(" + std::to_string(forced) + ")";
  }
};

int select_group_count(const std::map<std::string, long>& level2_sizes,
                       const GroupRule& rule);

struct GroupAssignment {
  int G = 0;
  std::vector<int> group_of_row;       // 1..G per row
  Eigen::MatrixXi per_cluster_counts;  // n_level2 x G occupancy
};

/// Within each level-2 cluster, rank rows by predicted probability
/// (ties broken by original row order) and assign rank r to group
/// floor((r-1)*G/n_j) + 1.
GroupAssignment assign_groups(const Eigen::VectorXd& p_hat,
                              const std::vector<int>& level2_ids, int n_level2,
                              int G);

/// Pooled indicator columns I2..IG (group 1 is the reference).
Eigen::MatrixXd build_indicators(const GroupAssignment& ga);

/// Upper-tail probability of the chi-squared distribution via the
/// regularized upper incomplete gamma function.
double chi2_survival(double x, int df);

struct WaldStatistic {
  double W = 0.0;
  int df = 0;
};

WaldStatistic wald_statistic(const Eigen::VectorXd& gamma_hat,
                             const Eigen::MatrixXd& gamma_cov);

enum class GofFailure {
  None,
  TooFewObservations,
  Estimation,
  DegenerateIndicators,
  SingularCovariance
};

const char* gof_failure_name(GofFailure f);

struct GofResult {
  bool ok = false;
  GofFailure failure = GofFailure::None;
  std::string failure_detail;
  int g_used = 0;
  GroupRule rule;
  double wald = 0.0;
  int df = 0;
  double p_value = 0.0;
  Eigen::VectorXd gamma_hat;
  Eigen::MatrixXd gamma_cov;
  double baseline_loglik = 0.0;
  double augmented_loglik = 0.0;

  /// `G_used, rule, W, df, p_value, status, baseline_loglik, augmented_loglik`
  std::string record_csv() const;
};

/// The full grouping-based Wald goodness-of-fit procedure: fit the baseline
/// model, select G, group by conditional predictions, refit with pooled
/// group indicators, and test their joint significance. Estimation failures
/// become a failed status rather than an exception.
GofResult run_test(const Dataset& ds, const ModelSpec& spec, const GroupRule& rule,
                   const FitOptions& opts = FitOptions());

} // namespace mlmgof
