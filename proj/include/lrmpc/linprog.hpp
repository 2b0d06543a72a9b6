#pragma once

#include <Eigen/Dense>

namespace lrmpc::linprog {

enum class LpStatus { optimal, infeasible, unbounded };

struct LpResult {
  LpStatus status = LpStatus::infeasible;
  Eigen::VectorXd x;
  double value = 0.0;
};

// maximize c'x subject to a x <= b with x free. Solved as the standard-form dual
// min b'y s.t. a'y = c, y >= 0 by a two-phase tableau simplex with Bland's rule;
// the primal point is read off the dual's simplex multipliers.
LpResult maximize(const Eigen::MatrixXd& a, const Eigen::VectorXd& b, const Eigen::VectorXd& c);

}  // namespace lrmpc::linprog
