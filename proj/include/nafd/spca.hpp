// SPDX-License-Identifier: Apache-2.0
//
// Direct two-stage beamformer/receiver/power design that maximizes the
// product of per-user (1 + SINR) factors.  The product is routed through a
// binary tree of rotated second-order cones whose root equals the geometric
// mean of the factors, every nonconvex coupling is replaced by a tight
// first-order inner approximation at the current iterate, and the resulting
// convex program is re-expanded and re-solved until the root value settles.
// Unlike the semidefinite path there is no lifting: beamformers come out of
// the solve directly, receivers are decision variables of every subproblem,
// and each iterate is feasible for the true problem by construction.
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "nafd/convex.hpp"
#include "nafd/scenario.hpp"
#include "nafd/solver_common.hpp"

namespace nafd::spca {

using convex::AffineExpr;

// ---------------------------------------------------------------------------
// First-order surrogate atoms.  Each struct carries the coefficients of an
// affine functional in the decision variables; `eval` reproduces its value.
// All are exported so the bound/tightness/gradient properties can be tested
// in isolation.

// Affine lower bound on the ratio w^H A w / (chi - shift), expanded at
// (anchor_w, anchor_chi).  The ratio is jointly convex on chi > shift, so the
// tangent plane sits below it everywhere; equality and matching gradients at
// the anchor.  Requires anchor_chi > shift (denominator floored at 1e-9).
struct RatioTangent {
  VecC w_coef;      // value contribution Re(w_coef^H w)
  double chi_coef;  // coefficient on chi
  double c0;        // constant term
  double eval(const VecC& w, double chi) const {
    return w_coef.dot(w).real() + chi_coef * chi + c0;
  }
};
RatioTangent ratio_tangent(const MatC& a, double shift, const VecC& anchor_w, double anchor_chi);

// Affine lower bound on the convex quadratic w^H A w, expanded at anchor_w.
struct QuadTangent {
  VecC w_coef;
  double c0;
  double eval(const VecC& w) const { return w_coef.dot(w).real() + c0; }
};
QuadTangent quad_tangent(const MatC& a, const VecC& anchor_w);

// Affine upper bound on the saturating activity measure 1 - exp(-theta x),
// expanded at anchor_x >= 0.  The measure is concave in x, so its tangent
// majorizes it on x >= 0; equality at the anchor.
struct IndicatorTangent {
  double slope;
  double c0;
  double eval(double x) const { return slope * x + c0; }
};
IndicatorTangent indicator_tangent(double anchor_x, double theta);

// Convexified product cap: any (a, b) with a > 0 satisfying
//   product_cap_lhs(a, b, ...) <= 0
// also satisfies a * c * d2 <= b^2, because b^2 / a is jointly convex and its
// linearization at (anchor_a, anchor_b) under-estimates it.  Tight (= 0) at
// the anchor whenever the original holds with equality there.  Requires
// anchor_a > 0 (floored at 1e-9).
double product_cap_lhs(double a, double b, double c, double d2, double anchor_a, double anchor_b);

// ---------------------------------------------------------------------------
// Geometric-mean cone tree.

struct GeoMeanTree {
  int depth = 0;               // number of halving levels
  int slots = 1;               // leaves including pads = 2^depth
  int root = -1;               // variable index of the root node
  std::vector<int> nodes;      // internal node variables, level order (root first)
  std::vector<int> rows;       // constraint rows added, level order
};

// Adds the node variables and rotated-cone rows that force
//   root <= (prod over leaves)^(1 / 2^depth),
// padding missing leaves with the constant 1.  Leaf i is variable
// leaf_vars[i] when >= 0, otherwise the constant leaf_consts[i].  node_hint
// gives strictly interior starting values for the added node variables
// (geometric means of the leaf hints, shaved slightly); the caller seeds its
// x0 from it.  A single-leaf tree adds no rows and reuses the leaf variable
// as the root (which must then be a variable).
GeoMeanTree build_geo_mean_tree(convex::ConvexProgram& prog, const std::vector<int>& leaf_vars,
                                const std::vector<double>& leaf_consts,
                                const std::vector<double>& leaf_hints,
                                std::vector<double>* node_hints);

// ---------------------------------------------------------------------------
// Solver state: the expansion point of every surrogate and the warm start of
// every subproblem.  All auxiliaries are kept strictly interior.

struct State {
  MatC w;        // (M*L) x K stacked beamformers (zeros on pruned blocks)
  MatC u;        // M x J serving-RAU receive filters
  VecD p;        // J uplink transmit powers
  VecD chi_d;    // K downlink 1+SINR factors
  VecD chi_u;    // J uplink 1+SINR factors
  VecD mu_d;     // K downlink interference-plus-noise lower bounds
  VecD rho;      // K metered downlink rate caps (empty when backhaul is inert)
  MatD rho_bar;  // L x K per-link load split, stage 1 only (0x0 otherwise)
  MatD beta;     // J x J received cross-power caps, diagonal unused
  VecD pt;       // L per-RAU radiated-power surrogates (empty when unused)
  MatD pt_bar;   // L x J per-RAU-at-receiver leakage caps (0x0 when unused)
};

// ---------------------------------------------------------------------------
// Subproblem container.

enum class RowKind {
  rau_power,      // per-RAU cap directly on the beams (used when pt chain is off)
  power_split,    // sum_k ||w_lk||^2 <= pt_l
  rx_norm,        // ||u_j||^2 <= 1 pins the free receive-filter scaling
  tree,           // rotated-cone tree row
  dl_signal,      // interference + noise <= signal / (chi_d - 1), tangent form
  dl_floor,       // downlink rate floor, tangent form
  iri_product,    // pt_l * var_lz * ||u_j||^2 <= pt_bar_lj^2, convexified
  cross_product,  // p_j' |u_j^H h_j'|^2 <= beta_jj'^2, convexified
  ul_floor,       // uplink rate floor, metered interference over own power
  ul_signal,      // metered interference / p <= signal / (chi_u - 1), tangent form
  backhaul_soft,  // sum_k rho_bar_kl^2 <= C_l
  meter_product,  // activity(||w_lk||^2) * rho_k <= rho_bar_kl^2, convexified
  itf_floor,      // mu_k <= exact interference, tangent form
  rate_link,      // signal / mu_k <= 2^rho_k - 1, tangent form
  backhaul_hard,  // sum over served users of rho_k <= C_l
};

struct RowRef {
  RowKind kind;
  int a = -1;  // first index (RAU or user, see RowKind)
  int b = -1;  // second index where applicable
};

struct ProgramLayout {
  int L = 0, Z = 0, K = 0, J = 0, M = 0;
  bool smoothed = true;                  // stage 1 (soft metering) vs stage 2
  bool backhaul_active = false;          // any load rows built
  std::vector<std::vector<int>> w_raus;  // active RAU list per downlink user
  std::vector<int> w_off;                // var offset of each user's beam block (-1 if empty)
  std::vector<int> u_off;                // var offset of each receive filter
  std::vector<int> p_var;                // uplink power variables
  std::vector<int> chi_d, chi_u;         // factor variables (-1 when excluded)
  std::vector<int> mu_var, rho_var;      // backhaul chain variables (-1 when inert)
  Eigen::MatrixXi rho_bar_var;           // L x K (stage 1; -1 elsewhere)
  Eigen::MatrixXi beta_var;              // J x J (-1 on diagonal)
  std::vector<int> pt_var;               // L (-1 when the leakage chain is off)
  Eigen::MatrixXi pt_bar_var;            // L x J (-1 when off)
  GeoMeanTree tree;
  std::vector<int> tree_leaf_user;       // leaf slot -> user index (K..K+J-1 = uplink), -1 pad
  std::vector<RowRef> rows;              // registry parallel to constraint order

  State unpack(const VecD& x) const;
};

struct Subproblem {
  convex::ConvexProgram prog;
  ProgramLayout layout;
  VecD x0;
};

// Expand every surrogate at `state` and assemble the stage-1 program (soft
// backhaul metering, all RAUs serve all users) or, given an association, the
// stage-2 program (hard per-RAU load rows, pruned beam blocks removed).
// Throws std::runtime_error when an association leaves a positive rate floor
// unservable.
Subproblem build_stage1_subproblem(const State& state, const ChannelRealization& ch,
                                   const ScenarioConfig& cfg);
Subproblem build_stage2_subproblem(const State& state, const AssociationMap& assoc,
                                   const ChannelRealization& ch, const ScenarioConfig& cfg);

// ---------------------------------------------------------------------------
// Feasible initialization: maximum-ratio start backed off from the power
// caps, a receiver-fixed floor-repair program when the start misses a rate
// floor, a uniform scale-back when the soft backhaul meter overshoots, and
// strictly interior auxiliaries tightened onto the result.  Returns the state
// or an explanation of which users' floors could not be certified.
struct StartResult {
  std::optional<State> state;
  std::string message;       // set when no state was found
  std::vector<int> dl_violators, ul_violators;
};
StartResult find_feasible_start(const ChannelRealization& ch, const ScenarioConfig& cfg);

// Stationarity certificate: pairs each subproblem row's multiplier with the
// gradient of the matching exact constraint (tangents swapped back for the
// true ratios, quadratics, and activity measures) and returns the infinity
// norm of the exact-problem KKT stationarity residual at rep.x.  ch/cfg must
// be the pair the subproblem was built from.
double stationarity_residual(const Subproblem& sub, const convex::SolveReport& rep,
                             const ChannelRealization& ch, const ScenarioConfig& cfg);

// ---------------------------------------------------------------------------

struct Options {
  double outer_tol = 1e-4;      // relative root-value settle tolerance
  int max_outer = 50;           // per stage
  double kernel_tol = 1e-8;
  bool two_stage = true;        // false: stop after the soft-metered stage
  bool kkt_certificate = true;  // anchor one extra solve at the converged
                                // point and report its stationarity residual
  bool debug_checks = false;    // re-verify surrogate bounds every iteration
};

struct Result {
  TransmitDesign tx;
  ReceiveDesign rx;
  AssociationMap assoc;
  double objective_root = 0.0;   // final tree-root value
  double exact_se = 0.0;         // sum rate of the returned design
  double kkt_residual = -1.0;    // -1 when not computed
  VecD chi_d, chi_u;             // final per-user factors
  SolveTrace trace;
};

Result run(const ChannelRealization& ch, const ScenarioConfig& cfg, const Options& opts = {});

}  // namespace nafd::spca
