#pragma once

#include <Eigen/Core>

namespace mlmgof {

/// Probabilists' Gauss-Hermite rule: sum_i w_i f(x_i) integrates f against
/// the standard normal density. Weights sum to 1, nodes symmetric about 0.
struct QuadratureRule {
  Eigen::VectorXd nodes;
  Eigen::VectorXd weights;
};

QuadratureRule gh_rule(int k);

} // namespace mlmgof
