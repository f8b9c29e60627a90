#pragma once

#include <Eigen/Core>
#include <string>
#include <vector>

#include "data.hpp"
#include "errors.hpp"
#include "quadrature.hpp"

namespace mlmgof {

/// Random-effects covariance for one level, exposed as SDs and correlations.
/// dim 0 means the level has no random effects.
struct LevelCov {
  Eigen::MatrixXd omega;          // dim x dim, symmetric PSD
  std::vector<std::string> names; // effect names ("intercept", slope columns)
  CovStructure structure = CovStructure::Independent;
  bool boundary = false; // some component hit the lower variance floor

  int dim() const { return static_cast<int>(omega.rows()); }
  Eigen::VectorXd sds() const;
  Eigen::MatrixXd correlations() const;
};

struct VarianceComponents {
  LevelCov level2;
  LevelCov level3;
};

struct FitOptions {
  int nodes = 7;
  int max_iter = 200;
  double tol = 1e-6;
  bool compute_cov = true;
};

/// Warm start for fit(): beta in design column order, theta the unconstrained
/// covariance parameters (level-2 block then level-3 block).
struct FitInit {
  Eigen::VectorXd beta;
  Eigen::VectorXd theta;
};

struct FittedModel {
  Eigen::VectorXd beta;
  std::vector<std::string> coef_names;
  VarianceComponents vc;
  double loglik = 0.0;
  Eigen::MatrixXd fixed_cov; // n_beta x n_beta
  std::vector<Eigen::VectorXd> eb_level2; // per dense level-2 index
  std::vector<Eigen::VectorXd> eb_level3; // per dense level-3 index
  bool converged = false;
  int iterations = 0;
  Eigen::VectorXd theta; // unconstrained covariance parameters at the optimum
};

/// Log marginal likelihood of the model at given fixed effects and
/// covariance matrices, by adaptive Gauss-Hermite quadrature. A level whose
/// covariance matrix is all zero is integrated out exactly (effects fixed
/// at 0). The level-3 integral nests the level-2 integrals.
double marginal_loglik(const Eigen::VectorXd& beta, const Eigen::MatrixXd& omega2,
                       const Eigen::MatrixXd& omega3, const DesignMatrices& design,
                       const QuadratureRule& rule);

/// Score of the marginal log-likelihood with respect to beta, computed as
/// the posterior-weighted quadrature of the complete-data score.
Eigen::VectorXd score_beta(const Eigen::VectorXd& beta, const Eigen::MatrixXd& omega2,
                           const Eigen::MatrixXd& omega3, const DesignMatrices& design,
                           const QuadratureRule& rule);

/// Posterior modes of the random effects given data and parameters.
/// Level-2 modes are computed jointly with the level-3 values (nested
/// damped Newton on each family's joint log-density).
struct EbModes {
  std::vector<Eigen::VectorXd> level2; // per dense level-2 index
  std::vector<Eigen::VectorXd> level3; // per dense level-3 index
};
EbModes eb_modes(const Eigen::VectorXd& beta, const Eigen::MatrixXd& omega2,
                 const Eigen::MatrixXd& omega3, const DesignMatrices& design);

FittedModel fit(const Dataset& ds, const ModelSpec& spec,
                const FitOptions& opts = FitOptions(),
                const FitInit* init = nullptr);

/// Conditional predicted probabilities: invlogit(x'beta + z'u) per row,
/// using each row's cluster EB modes.
Eigen::VectorXd predict_conditional(const FittedModel& fm, const Dataset& ds,
                                    const ModelSpec& spec);

inline double invlogit(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double log1pexp(double x) {
  if (x > 35.0) return x;
  if (x < -35.0) return std::exp(x);
  return std::log1p(std::exp(x));
}

} // namespace mlmgof
