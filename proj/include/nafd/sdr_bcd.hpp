// SPDX-License-Identifier: Apache-2.0
//
// Two-stage block-coordinate solver for the joint design problem, working on
// lifted per-user transmit covariance blocks. Each outer iteration solves one
// convex subproblem (tangent majorant of the interference log-sum, AM-GM bound
// for the bilinear backhaul coupling) with the uplink combiners held fixed,
// then refreshes the combiners in closed form. Stage 1 keeps every RAU-user
// link alive and meters backhaul through a smoothed activity weight; stage 2
// prunes weak links and re-optimizes with the sparsity pattern fixed.
#pragma once

#include "nafd/convex.hpp"
#include "nafd/scenario.hpp"
#include "nafd/solver_common.hpp"

#include <cstdint>
#include <utility>
#include <vector>

namespace nafd::sdr_bcd {

// One PSD block per downlink user: Q_k = w_k w_k^H at full antenna dimension.
std::vector<MatC> lift(const TransmitDesign& tx, const ScenarioConfig& cfg);

struct Rank1Extraction {
  VecC beam;         // sqrt(lambda_1) * principal eigenvector
  double gap = 0.0;  // lambda_2 / lambda_1, 0 for (near-)rank-1 or zero input
};
Rank1Extraction extract_rank1(const MatC& q);

// Exact concave/convex split of the sum rate in the lifted variables:
//   sum_rate = log_total - log_interference,
// where log_total sums log2(signal + interference + noise) over all users and
// log_interference sums log2(interference + noise). Both are concave in (q,p).
double eval_log_total(const std::vector<MatC>& q, const VecD& p, const ReceiveDesign& rx,
                      const ChannelRealization& ch, const ScenarioConfig& cfg);
double eval_log_interference(const std::vector<MatC>& q, const VecD& p, const ReceiveDesign& rx,
                             const ChannelRealization& ch, const ScenarioConfig& cfg);

// First-order expansion of log_interference at (q0, p0). Concavity makes it a
// global upper bound, which is what the subproblem subtracts.
struct InterferenceTangent {
  double constant = 0.0;
  std::vector<MatC> q_grad;  // Hermitian gradients, one per downlink user
  VecD p_grad;
  double value_at(const std::vector<MatC>& q, const VecD& p) const;
};
InterferenceTangent linearize_log_interference(const std::vector<MatC>& q, const VecD& p,
                                               const ReceiveDesign& rx,
                                               const ChannelRealization& ch,
                                               const ScenarioConfig& cfg);

// AM-GM majorant of the product mu*q: mu^2/(2 phi) + phi q^2 / 2, tight at
// phi = mu / q. Throws std::invalid_argument for phi <= 0.
double bilinear_upper_bound(double mu, double q, double phi);

// Expansion point carried between outer iterations. q blocks are always at
// full antenna dimension; pruned entries are zero.
struct ExpansionState {
  std::vector<MatC> q;        // K blocks, (M*L) x (M*L)
  VecD p;                     // J uplink powers
  VecD rate_cap;              // K   per-user rate auxiliary (backhaul chain)
  VecD inv_interference;      // K   reciprocal-interference auxiliary
  VecD amgm_weight;           // K   AM-GM weight, mu/(h^H Q h) at the previous optimum
  Eigen::MatrixXd link_load;  // L x K carried load shares; empty or <=0 entries
                              // fall back to the built-in seed recipe
};

// Variable / constraint-row map of a built subproblem, used to unpack solver
// output and to drive the interior-point phase-1 relaxation.
struct ProgramLayout {
  struct Block {
    int off = -1;            // first parameter index, -1 when the user is off
    int dim = 0;             // M * (number of serving RAUs)
    std::vector<int> raus;   // serving RAU indices, ascending
  };
  std::vector<Block> q;              // size K
  std::vector<int> p;                // size J, variable indices
  std::vector<int> rate_cap;         // size K, -1 when the backhaul chain is off
  std::vector<int> inv_interference; // size K, -1 likewise
  Eigen::MatrixXi link_load;         // L x K load-share variables, -1; smoothed stage only
  std::vector<int> active_backhaul;  // RAUs whose backhaul rows were built
  std::vector<int> power_rows;       // size L
  std::vector<int> dl_qos_rows;      // size K, -1 when the floor is zero or user off
  std::vector<int> ul_qos_rows;      // size J, -1 when the floor is zero
  std::vector<int> backhaul_rows;    // one per active RAU
  std::vector<int> chain_rows;       // auxiliary-chain rows (relaxable in phase 1)
  bool smoothed = true;
  int full_dim = 0;                  // M * L

  std::vector<MatC> unpack_q(const VecD& x, const ScenarioConfig& cfg) const;
  VecD unpack_p(const VecD& x) const;
  VecD unpack_rate_cap(const VecD& x) const;         // zeros where absent
  VecD unpack_inv_interference(const VecD& x) const; // zeros where absent
};

struct Subproblem {
  convex::ConvexProgram prog;
  ProgramLayout layout;
  VecD x0;  // packed expansion point (strictly feasible when the state is)
};

// Stage 1: every link alive, backhaul via the smoothed activity weight.
Subproblem build_stage1_subproblem(const ExpansionState& state, const ReceiveDesign& rx,
                                   const ChannelRealization& ch, const ScenarioConfig& cfg);
// Stage 2: pruned links structurally removed, per-RAU backhaul as a plain sum
// over surviving links. Throws std::runtime_error when the association removes
// every link of a user whose rate floor is positive.
Subproblem build_stage2_subproblem(const ExpansionState& state, const ReceiveDesign& rx,
                                   const AssociationMap& assoc, const ChannelRealization& ch,
                                   const ScenarioConfig& cfg);

struct Options {
  double outer_tol = 1e-4;  // relative objective change across outer iterations
  int max_outer = 50;       // per stage
  double kernel_tol = 1e-8;
  bool two_stage = true;
  int randomize_samples = 20;             // Gaussian redraws when the gap is large
  double randomize_gap_threshold = 0.05;  // lambda2/lambda1 above which to redraw
  std::uint64_t randomize_seed = 0x5eedb011ULL;
  bool debug_checks = false;  // verify tangent tightness/gradients per iteration
};

struct Result {
  TransmitDesign tx;
  ReceiveDesign rx;
  std::vector<MatC> q;   // final lifted blocks at full dimension
  AssociationMap assoc;
  double lifted_se = 0.0;     // exact split objective at the lifted optimum
  double extracted_se = 0.0;  // sum_rate of the returned (tx, rx)
  double rank1_gap = 0.0;     // max over users
  SolveTrace trace;
};

Result run(const ChannelRealization& ch, const ScenarioConfig& cfg, const Options& opts = {});

}  // namespace nafd::sdr_bcd
