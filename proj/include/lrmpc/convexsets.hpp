#pragma once

#include <Eigen/Dense>

#include <stdexcept>

namespace lrmpc::convexsets {

class EmptySetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Box {
  Eigen::VectorXd lower;
  Eigen::VectorXd upper;

  Box() = default;
  Box(Eigen::VectorXd lo, Eigen::VectorXd hi);
  static Box symmetric(const Eigen::VectorXd& half_widths);
  int dim() const { return static_cast<int>(lower.size()); }
  Eigen::VectorXd center() const { return 0.5 * (lower + upper); }
  Eigen::VectorXd half_widths() const { return 0.5 * (upper - lower); }
};

struct Zonotope {
  Eigen::VectorXd center;
  Eigen::MatrixXd generators;  // n x g

  Zonotope() = default;
  Zonotope(Eigen::VectorXd c, Eigen::MatrixXd g);
  static Zonotope point(const Eigen::VectorXd& c);
  int dim() const { return static_cast<int>(center.size()); }
  int num_generators() const { return static_cast<int>(generators.cols()); }
};

struct HPolytope {
  Eigen::MatrixXd normals;  // m x n
  Eigen::VectorXd offsets;  // m

  HPolytope() = default;
  HPolytope(Eigen::MatrixXd h, Eigen::VectorXd k);
  int dim() const { return static_cast<int>(normals.cols()); }
  int num_rows() const { return static_cast<int>(normals.rows()); }
};

struct Ellipsoid {
  Eigen::VectorXd center;
  Eigen::MatrixXd shape;  // {x : (x-c)' shape^{-1} (x-c) <= radius2}
  double radius2 = 0.0;

  Ellipsoid() = default;
  Ellipsoid(Eigen::VectorXd c, Eigen::MatrixXd s, double r2);
  int dim() const { return static_cast<int>(center.size()); }
};

Zonotope to_zonotope(const Box& b);
HPolytope to_hpolytope(const Box& b);
Box interval_hull(const Zonotope& z);
// Axis-aligned box with half-widths sqrt(radius2 * shape_ii).
Box outer_box(const Ellipsoid& e);

Zonotope minkowski_sum(const Zonotope& a, const Zonotope& b);
Zonotope minkowski_sum(const Box& a, const Box& b);
Zonotope minkowski_sum(const Zonotope& a, const Box& b);
Zonotope minkowski_sum(const Box& a, const Zonotope& b);
Zonotope linear_map(const Eigen::MatrixXd& m, const Zonotope& z);
Zonotope scale(const Zonotope& z, double factor);

// Offsets tightened by the support function of s along each row; throws
// EmptySetError when the result is empty.
HPolytope pontryagin_diff(const HPolytope& p, const Zonotope& s);

// Keeps at most cap generators: the smallest ones are replaced by their
// interval hull (an outer approximation).
Zonotope reduce_order(const Zonotope& z, int cap);

struct MrpiResult {
  Zonotope set;
  int terms = 0;       // number of summed powers
  double alpha = 0.0;  // A^terms W is inside alpha * W
};

// Outer approximation of sum_{j>=0} A^j W scaled by (1-alpha)^{-1}. W is
// replaced by its interval hull when A is not nilpotent, which makes the
// containment test exact.
MrpiResult mrpi_outer_detailed(const Eigen::MatrixXd& a_k, const Zonotope& w, double eps,
                               int max_terms = 2000, int generator_cap = 64);
Zonotope mrpi_outer(const Eigen::MatrixXd& a_k, const Zonotope& w, double eps,
                    int max_terms = 2000, int generator_cap = 64);

// Fixed point of O_{i+1} = O_i intersected with {x : a_k x in O_i}, with
// redundant rows pruned by linear programming.
HPolytope max_positive_invariant(const Eigen::MatrixXd& a_k, const HPolytope& x_constraint,
                                 int max_iter = 200);

// Removes rows implied by the others.
HPolytope remove_redundant(const HPolytope& p, double tol = 1e-9);

double support(const Box& b, const Eigen::VectorXd& d);
double support(const Zonotope& z, const Eigen::VectorXd& d);
double support(const Ellipsoid& e, const Eigen::VectorXd& d);
// +inf when unbounded; throws EmptySetError when empty.
double support(const HPolytope& p, const Eigen::VectorXd& d);

bool contains(const Box& b, const Eigen::VectorXd& x, double tol = 1e-9);
bool contains(const HPolytope& p, const Eigen::VectorXd& x, double tol = 1e-9);
bool contains(const Ellipsoid& e, const Eigen::VectorXd& x, double tol = 1e-9);
// Feasibility of G xi = x - c with |xi|_inf <= 1 + tol.
bool contains(const Zonotope& z, const Eigen::VectorXd& x, double tol = 1e-9);

bool is_empty(const HPolytope& p);

double spectral_radius(const Eigen::MatrixXd& a);

}  // namespace lrmpc::convexsets
