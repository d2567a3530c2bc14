// SPDX-License-Identifier: Apache-2.0
//
// Types shared by the two sum-rate solvers and the baselines: run status,
// per-iteration trace records, and the link-association map derived from
// per-RAU beamformer powers.
#pragma once

#include "nafd/scenario.hpp"

#include <string>
#include <vector>

namespace nafd {

enum class RunStatus { converged, max_iterations, infeasible, numerical_failure };

const char* to_string(RunStatus s);

struct IterationRecord {
  int iteration = 0;
  double objective = 0.0;   // solver's internal monotone objective, bps/Hz scale
  double exact_se = 0.0;    // exact sum spectral efficiency of the extracted design
  double time_ms = 0.0;     // cumulative wall time at the end of this iteration
  double max_residual = 0.0;  // feasibility residual of the extracted design
  double rank1_gap = -1.0;    // lambda2/lambda1 of the lifted blocks; -1 if n/a
};

struct SolveTrace {
  std::vector<IterationRecord> iterations;
  RunStatus status = RunStatus::converged;
  std::string message;
  int stage1_iterations = 0;  // prefix of `iterations` spent before pruning
};

// Which transmit RAUs serve which downlink user after thresholding.
struct AssociationMap {
  Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> on;  // L x K

  int num_rau() const { return (int)on.rows(); }
  int num_users() const { return (int)on.cols(); }
  int links_of(int k) const {
    int n = 0;
    for (int l = 0; l < on.rows(); ++l) n += on(l, k);
    return n;
  }
  bool all_on() const { return on.all(); }
  static AssociationMap ones(int num_rau, int num_users) {
    AssociationMap m;
    m.on = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>::Constant(num_rau, num_users, true);
    return m;
  }
};

// Threshold rule on per-link transmit power: a link stays on when the
// smoothed indicator of its squared norm exceeds xi.
AssociationMap associate_from_link_power(const MatD& link_power, double theta, double xi);
AssociationMap associate_users(const TransmitDesign& tx, const ScenarioConfig& cfg);

// Per-link squared norms ||w_{l,k}||^2 as an L x K matrix.
MatD link_powers(const TransmitDesign& tx, const ScenarioConfig& cfg);

// Channels divided by the per-user / per-RAU noise standard deviations so that
// every noise variance becomes 1. Rates are invariant under this rescaling and
// transmit designs keep their original units; solvers work on the normalized
// copy for conditioning and report rates on whichever pair they are given.
struct NormalizedScenario {
  ChannelRealization ch;
  ScenarioConfig cfg;
};
NormalizedScenario normalized_copy(const ChannelRealization& ch, const ScenarioConfig& cfg);

}  // namespace nafd
