#include "quadrature.hpp"

#include <Eigen/Eigenvalues>
#include <cmath>
#include <vector>

#include "errors.hpp"

namespace mlmgof {

namespace {

// Probabilists' Hermite values He_0..He_k at x, in extended precision.
void hermite_values(int k, long double x, std::vector<long double>& he) {
  he.resize(k + 1);
  he[0] = 1.0L;
  if (k >= 1) he[1] = x;
  for (int j = 2; j <= k; ++j) he[j] = x * he[j - 1] - (j - 1) * he[j - 2];
}

} // namespace

// Golub-Welsch on the Jacobi matrix of the probabilists' Hermite recurrence
// (a_k = 0, b_k = sqrt(k)) for starting values, then Newton-polished roots
// of He_k and weights from the orthonormal-polynomial identity
// w_i = 1 / sum_{j<k} He_j(x_i)^2 / j!, all in long double. The eigensolver
// alone loses ~1e-10 of relative moment accuracy at k = 25.
QuadratureRule gh_rule(int k) {
  if (k < 1 || k > 50)
    throw EstimationError(EstimationError::Code::BadNodeCount,
                          "node count must be in [1, 50], got " + std::to_string(k));
  QuadratureRule rule;
  if (k == 1) {
    rule.nodes = Eigen::VectorXd::Zero(1);
    rule.weights = Eigen::VectorXd::Ones(1);
    return rule;
  }

  Eigen::MatrixXd J = Eigen::MatrixXd::Zero(k, k);
  for (int i = 1; i < k; ++i) {
    const double b = std::sqrt(static_cast<double>(i));
    J(i, i - 1) = b;
    J(i - 1, i) = b;
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(J);
  rule.nodes = es.eigenvalues();
  rule.weights.resize(k);
  std::vector<long double> he;
  for (int i = 0; i < k; ++i) {
    long double x = rule.nodes[i];
    for (int it = 0; it < 8; ++it) {
      hermite_values(k, x, he);
      const long double deriv = k * he[k - 1];
      if (deriv == 0.0L) break;
      const long double step = he[k] / deriv;
      x -= step;
      if (std::abs(static_cast<double>(step)) < 1e-18 * (1.0 + std::abs(static_cast<double>(x))))
        break;
    }
    hermite_values(k - 1, x, he);
    long double denom = 0.0L, fact = 1.0L;
    for (int j = 0; j < k; ++j) {
      if (j > 0) fact *= j;
      denom += he[j] * he[j] / fact;
    }
    rule.nodes[i] = static_cast<double>(x);
    rule.weights[i] = static_cast<double>(1.0L / denom);
  }

  // Enforce exact symmetry: pair node i with node k-1-i, zero the middle.
  for (int i = 0; i < k / 2; ++i) {
    const double x = 0.5 * (rule.nodes[k - 1 - i] - rule.nodes[i]);
    rule.nodes[i] = -x;
    rule.nodes[k - 1 - i] = x;
    const double w = 0.5 * (rule.weights[i] + rule.weights[k - 1 - i]);
    rule.weights[i] = w;
    rule.weights[k - 1 - i] = w;
  }
  if (k % 2 == 1) rule.nodes[k / 2] = 0.0;
  rule.weights /= rule.weights.sum();
  return rule;
}

} // namespace mlmgof
