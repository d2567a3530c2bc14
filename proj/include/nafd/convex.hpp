// SPDX-License-Identifier: Apache-2.0
//
// Small interior-point kernel for the smooth convex subproblems the two
// sum-rate solvers generate. Variables live in one flat real vector; Hermitian
// positive-semidefinite matrix blocks are carried as n^2 real parameters
// (diagonal first, then re/im pairs of the upper triangle) with a log-det
// barrier. Scalar constraints are built from a closed set of atoms:
//
//   linear     a(x) <= 0
//   quad       sum_r w_r q_r(x)^2 + a(x) <= 0                  (w_r >= 0)
//   qol        sum_r w_r q_r(x)^2 / den(x) + a(x) <= 0         (den affine > 0)
//   log        a(x) - c log(arg(x)) <= 0                       (arg affine > 0)
//   hyp        th^2 - left*right <= 0, left,right > 0          (rotated cone row)
//
// with q, a, den, arg affine. Every atom's -log(-g) is convex on its domain
// (for hyp it is the standard rotated-cone barrier), so the Newton system
// stays positive definite. The objective (maximized) is affine plus positive
// multiples of log(affine) minus positive squares of affine forms.
#pragma once

#include <Eigen/Dense>

#include <complex>
#include <functional>
#include <string>
#include <vector>

namespace nafd::convex {

using VecD = Eigen::VectorXd;
using MatD = Eigen::MatrixXd;
using MatC = Eigen::MatrixXcd;

struct AffineExpr {
  double c0 = 0.0;
  std::vector<std::pair<int, double>> terms;  // (var index, coefficient)

  double eval(const VecD& x) const {
    double v = c0;
    for (const auto& [i, c] : terms) v += c * x[i];
    return v;
  }
  template <class Vec>
  void add_gradient(Vec&& g, double w) const {
    for (const auto& [i, c] : terms) g[i] += w * c;
  }
  AffineExpr& add(int var, double coef) {
    terms.emplace_back(var, coef);
    return *this;
  }
};

struct SquareTerm {
  double w = 1.0;
  AffineExpr q;
};

struct LinearCon {
  AffineExpr a;
};
struct QuadCon {
  std::vector<SquareTerm> squares;
  AffineExpr a;
};
struct QolCon {
  std::vector<SquareTerm> squares;
  AffineExpr den;
  AffineExpr a;
};
struct LogCon {
  AffineExpr a;
  AffineExpr arg;
  double c = 1.0;
};
struct HypCon {
  int tvar = -1;
  int lvar = -1, rvar = -1;        // -1: use the constant instead
  double lconst = 1.0, rconst = 1.0;
};

struct PsdBlock {
  int offset = 0;
  int dim = 0;
};

struct Objective {
  AffineExpr affine;
  std::vector<std::pair<double, AffineExpr>> logs;  // + c * log(expr), c > 0
  std::vector<SquareTerm> neg_squares;              // - w * q(x)^2
};

enum class ConKind { linear, quad, qol, log, hyp };

class ConvexProgram {
 public:
  int add_var(double lb, double ub, const std::string& name = "");
  int add_vars(int n, double lb, double ub, const std::string& name = "");
  // Appends dim*dim parameters for a Hermitian PSD block; returns the offset.
  int add_psd_block(int dim, const std::string& name = "");

  int add_linear(LinearCon c);
  int add_quad(QuadCon c);
  int add_qol(QolCon c);
  int add_log(LogCon c);
  int add_hyp(HypCon c);
  void add_equality(AffineExpr e);  // e(x) = 0

  Objective& objective() { return obj_; }
  const Objective& objective() const { return obj_; }

  int num_vars() const { return (int)lb_.size(); }
  int num_cons() const { return (int)order_.size(); }
  int num_eqs() const { return (int)eqs_.size(); }
  ConKind kind(int i) const { return order_[i].first; }
  // Appends a (var, -1) term to constraint i's affine part, turning g <= 0
  // into g - var <= 0. Used by phase one; rejects hyp rows.
  void relax_constraint(int i, int var);
  const std::vector<PsdBlock>& psd_blocks() const { return psd_; }
  double lb(int i) const { return lb_[i]; }
  double ub(int i) const { return ub_[i]; }
  const std::vector<LinearCon>& linear_cons() const { return lin_; }
  const std::vector<QuadCon>& quad_cons() const { return quad_; }
  const std::vector<QolCon>& qol_cons() const { return qol_; }
  const std::vector<LogCon>& log_cons() const { return log_; }
  const std::vector<HypCon>& hyp_cons() const { return hyp_; }
  const std::vector<AffineExpr>& equalities() const { return eqs_; }
  const std::pair<ConKind, int>& order(int i) const { return order_[i]; }

  double eval_objective(const VecD& x) const;
  // Value and gradient of scalar constraint i (in add order).
  double eval_constraint(int i, const VecD& x) const;
  VecD constraint_gradient(int i, const VecD& x) const;

  // Hermitian block packing helpers shared with the program builders.
  static int tri_index(int i, int j, int dim);  // upper pair rank of (i<j)
  static MatC unpack_hermitian(const VecD& x, int off, int dim);
  static void pack_hermitian(VecD& x, int off, int dim, const MatC& q);
  // Adds the coefficients of Re tr(A Q) for Hermitian A to expr.
  static void add_trace(AffineExpr& expr, int off, int dim, const MatC& a, double scale = 1.0);

 private:
  std::vector<double> lb_, ub_;
  std::vector<PsdBlock> psd_;
  std::vector<LinearCon> lin_;
  std::vector<QuadCon> quad_;
  std::vector<QolCon> qol_;
  std::vector<LogCon> log_;
  std::vector<HypCon> hyp_;
  std::vector<std::pair<ConKind, int>> order_;
  std::vector<AffineExpr> eqs_;
  Objective obj_;
};

enum class SolveStatus { optimal, infeasible, iteration_limit, numerical };

const char* to_string(SolveStatus s);

struct SolveOptions {
  double tol = 1e-8;           // target duality gap per unit of objective scale
  double t0 = 1.0;             // initial barrier weight on the objective
  double mu = 10.0;            // barrier growth factor between stages
  int max_stage_newton = 120;  // Newton steps per centering stage
  int max_total_newton = 20000;
};

struct SolveReport {
  SolveStatus status = SolveStatus::numerical;
  std::string message;
  VecD x;
  double objective = 0.0;
  VecD ineq_mult;               // per scalar constraint, add order
  VecD box_lo_mult, box_hi_mult;
  std::vector<MatC> psd_mult;   // per PSD block
  VecD eq_mult;
  double r_stat = 0.0, r_gap = 0.0, r_primal = 0.0;
  int newton_steps = 0;
  double final_t = 0.0;
};

// x0 must be strictly inside the domain (boxes, atom domains, PSD blocks) and
// satisfy the equalities; use find_interior to produce such a point.
SolveReport solve(const ConvexProgram& prog, const VecD& x0, const SolveOptions& opts = {});

struct Phase1Result {
  bool feasible = false;
  VecD x;
  double max_violation = 0.0;  // smallest achieved max-violation
};

// Minimizes the maximum violation s of the constraints flagged in relax
// (empty = all scalar constraints); the others must already hold strictly at
// x0. Returns x0 untouched when it is already strictly feasible, and stops
// the phase-1 solve early once s turns negative.
Phase1Result find_interior(const ConvexProgram& prog, const VecD& x0,
                           const std::vector<char>& relax = {}, const SolveOptions& opts = {});

struct Differentiable {
  std::function<double(const VecD&)> value;
  std::function<VecD(const VecD&)> gradient;
};

// Largest component error between the analytic gradient and central
// differences, scaled by max(1, largest analytic component).
double finite_diff_check(const Differentiable& f, const VecD& x, double step = 1e-5);

// Nearest (Frobenius) PSD matrix: eigenvalues clipped at zero.
MatC psd_floor(const MatC& m);
MatD psd_floor(const MatD& m);

}  // namespace nafd::convex
