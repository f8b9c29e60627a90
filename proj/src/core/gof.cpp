#include "gof.hpp"

#include <Eigen/Cholesky>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace mlmgof {

namespace {

// Regularized upper incomplete gamma Q(a, x): series for x < a+1,
// Lentz continued fraction otherwise.
double gamma_q(double a, double x) {
  if (x <= 0.0) return 1.0;
  if (x < a + 1.0) {
    // P(a,x) by series, Q = 1 - P
    double term = 1.0 / a;
    double sum = term;
    double ap = a;
    for (int n = 0; n < 500; ++n) {
      ap += 1.0;
      term *= x / ap;
      sum += term;
      if (std::abs(term) < std::abs(sum) * 1e-16) break;
    }
    const double p = sum * std::exp(-x + a * std::log(x) - std::lgamma(a));
    return 1.0 - p;
  }
  const double tiny = 1e-300;
  double b = x + 1.0 - a;
  double c = 1.0 / tiny;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i < 500; ++i) {
    const double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::abs(delta - 1.0) < 1e-16) break;
  }
  return h * std::exp(-x + a * std::log(x) - std::lgamma(a));
}

// Probabilities used only for within-cluster ranking. Random-slope modes are
// left out: they are fit to the same outcomes being grouped, so including
// them leaks y into the ranks and inflates the test far above nominal size.
// Random intercepts are kept; being constant within a cluster they cannot
// change ranks, so this ranking coincides with the full conditional one for
// intercept-only models.
Eigen::VectorXd grouping_probabilities(const FittedModel& fm, const Dataset& ds,
                                       const ModelSpec& spec) {
  const DesignMatrices design = build_design(ds, spec);
  Eigen::VectorXd eta = design.X_full * fm.beta;
  const bool int2 = spec.random.level2.intercept && design.r2 > 0;
  const bool int3 = spec.random.level3.intercept && design.r3 > 0;
  for (const auto& fam : design.families) {
    double v0 = 0.0;
    if (int3 && fam.level3_index < static_cast<int>(fm.eb_level3.size()))
      v0 = fm.eb_level3[fam.level3_index][0];
    for (const auto& sb : fam.subjects) {
      double u0 = 0.0;
      if (int2 && sb.level2_index < static_cast<int>(fm.eb_level2.size()))
        u0 = fm.eb_level2[sb.level2_index][0];
      for (long r = 0; r < static_cast<long>(sb.rows.size()); ++r)
        eta[sb.rows[r]] += u0 + v0;
    }
  }
  Eigen::VectorXd p(eta.size());
  for (long i = 0; i < eta.size(); ++i) p[i] = 1.0 / (1.0 + std::exp(-eta[i]));
  return p;
}

} // namespace

int select_group_count(const std::map<std::string, long>& level2_sizes,
                       const GroupRule& rule) {
  if (level2_sizes.empty())
    throw GofError(GofError::Code::TooFewObservations, "no level-2 clusters");
  if (!rule.data_driven) return rule.forced;
  long n_min = std::numeric_limits<long>::max();
  for (const auto& [label, count] : level2_sizes) n_min = std::min(n_min, count);
  if (n_min < 2)
    throw GofError(GofError::Code::TooFewObservations,
                   "minimum cluster size " + std::to_string(n_min) +
                       " leaves a 1-group test with 0 degrees of freedom");
  return static_cast<int>(std::min<long>(10, n_min));
}

GroupAssignment assign_groups(const Eigen::VectorXd& p_hat,
                              const std::vector<int>& level2_ids, int n_level2,
                              int G) {
  const long n = static_cast<long>(level2_ids.size());
  GroupAssignment ga;
  ga.G = G;
  ga.group_of_row.assign(n, 0);
  ga.per_cluster_counts = Eigen::MatrixXi::Zero(n_level2, G);

  std::vector<std::vector<long>> rows_of(n_level2);
  for (long i = 0; i < n; ++i) rows_of[level2_ids[i]].push_back(i);

  for (int k = 0; k < n_level2; ++k) {
    auto& rows = rows_of[k];
    std::stable_sort(rows.begin(), rows.end(),
                     [&](long a, long b) { return p_hat[a] < p_hat[b]; });
    const long nj = static_cast<long>(rows.size());
    for (long r = 0; r < nj; ++r) {
      const int g = static_cast<int>(r * G / nj) + 1;
      ga.group_of_row[rows[r]] = g;
      ga.per_cluster_counts(k, g - 1) += 1;
    }
  }
  return ga;
}

Eigen::MatrixXd build_indicators(const GroupAssignment& ga) {
  const long n = static_cast<long>(ga.group_of_row.size());
  Eigen::MatrixXd ind = Eigen::MatrixXd::Zero(n, ga.G - 1);
  for (long i = 0; i < n; ++i) {
    const int g = ga.group_of_row[i];
    if (g >= 2) ind(i, g - 2) = 1.0;
  }
  return ind;
}

double chi2_survival(double x, int df) {
  if (x < 0.0 || df < 1)
    throw std::invalid_argument("chi2_survival requires x >= 0 and df >= 1");
  return gamma_q(0.5 * df, 0.5 * x);
}

WaldStatistic wald_statistic(const Eigen::VectorXd& gamma_hat,
                             const Eigen::MatrixXd& gamma_cov) {
  const long q = gamma_hat.size();
  if (gamma_cov.rows() != q || gamma_cov.cols() != q)
    throw std::invalid_argument("covariance dimension mismatch");
  Eigen::LDLT<Eigen::MatrixXd> ldlt(gamma_cov);
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive())
    throw GofError(GofError::Code::SingularCovariance,
                   "indicator covariance is not positive definite");
  const Eigen::VectorXd d = ldlt.vectorD();
  if (d.minCoeff() <= d.maxCoeff() * 1e-13)
    throw GofError(GofError::Code::SingularCovariance,
                   "indicator covariance is numerically singular");
  WaldStatistic w;
  w.W = gamma_hat.dot(ldlt.solve(gamma_hat));
  w.df = static_cast<int>(q);
  return w;
}

const char* gof_failure_name(GofFailure f) {
  switch (f) {
    case GofFailure::None: return "none";
    case GofFailure::TooFewObservations: return "too_few_observations";
    case GofFailure::Estimation: return "estimation";
    case GofFailure::DegenerateIndicators: return "degenerate_indicators";
    case GofFailure::SingularCovariance: return "singular_covariance";
  }
  return "unknown";
}

std::string GofResult::record_csv() const {
  std::ostringstream os;
  os.precision(10);
  os << g_used << "," << rule.label() << ",";
  if (ok) {
    os << wald << "," << df << "," << p_value << ",ok," << baseline_loglik << ","
       << augmented_loglik;
  } else {
    os << ",,,failed(" << gof_failure_name(failure) << ")," << baseline_loglik
       << ",";
  }
  return os.str();
}

GofResult run_test(const Dataset& ds, const ModelSpec& spec, const GroupRule& rule,
                   const FitOptions& opts) {
  GofResult res;
  res.rule = rule;
  try {
    FitOptions base_opts = opts;
    base_opts.compute_cov = false;
    FittedModel baseline = fit(ds, spec, base_opts);
    res.baseline_loglik = baseline.loglik;

    const int G = select_group_count(ds.cluster_sizes(2), rule);
    res.g_used = G;
    if (G < 2)
      throw GofError(GofError::Code::TooFewObservations,
                     "forced G must be at least 2");

    const Eigen::VectorXd p_hat = grouping_probabilities(baseline, ds, spec);
    const GroupAssignment ga =
        assign_groups(p_hat, ds.level2, ds.n_level2(), G);
    if (rule.data_driven && ga.per_cluster_counts.minCoeff() < 1)
      throw std::logic_error("data-driven rule produced an empty cell");

    const Eigen::MatrixXd ind = build_indicators(ga);
    for (long g = 0; g < ind.cols(); ++g)
      if (ind.col(g).sum() == 0.0)
        throw GofError(GofError::Code::DegenerateIndicators,
                       "pooled indicator I" + std::to_string(g + 2) +
                           " is identically zero");

    std::vector<std::string> names;
    for (int g = 2; g <= G; ++g) names.push_back("_gof_I" + std::to_string(g));
    const Dataset ds_aug = ds.with_extra_columns(names, ind);
    ModelSpec spec_aug = spec;
    spec_aug.extras = names;

    FitInit init;
    init.beta.setZero(baseline.beta.size() + G - 1);
    init.beta.head(baseline.beta.size()) = baseline.beta;
    init.theta = baseline.theta;
    const FittedModel augmented = fit(ds_aug, spec_aug, opts, &init);
    res.augmented_loglik = augmented.loglik;

    const long nb = augmented.beta.size();
    res.gamma_hat = augmented.beta.tail(G - 1);
    res.gamma_cov = augmented.fixed_cov.block(nb - (G - 1), nb - (G - 1), G - 1, G - 1);
    const WaldStatistic w = wald_statistic(res.gamma_hat, res.gamma_cov);
    res.wald = w.W;
    res.df = w.df;
    res.p_value = chi2_survival(w.W, w.df);
    res.ok = true;
  } catch (const GofError& e) {
    res.ok = false;
    res.failure_detail = e.what();
    switch (e.code()) {
      case GofError::Code::TooFewObservations:
        res.failure = GofFailure::TooFewObservations;
        break;
      case GofError::Code::SingularCovariance:
        res.failure = GofFailure::SingularCovariance;
        break;
      case GofError::Code::DegenerateIndicators:
        res.failure = GofFailure::DegenerateIndicators;
        break;
    }
  } catch (const EstimationError& e) {
    res.ok = false;
    res.failure = e.code() == EstimationError::Code::SingularInformation
                      ? GofFailure::SingularCovariance
                      : GofFailure::Estimation;
    res.failure_detail = e.what();
  }
  return res;
}

} // namespace mlmgof
