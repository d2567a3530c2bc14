// SPDX-License-Identifier: Apache-2.0
#include <nafd/solver_common.hpp>

#include <cmath>

namespace nafd {

const char* to_string(RunStatus s) {
  switch (s) {
    case RunStatus::converged: return "converged";
    case RunStatus::max_iterations: return "max_iterations";
    case RunStatus::infeasible: return "infeasible";
    case RunStatus::numerical_failure: return "numerical_failure";
  }
  return "unknown";
}

MatD link_powers(const TransmitDesign& tx, const ScenarioConfig& cfg) {
  const int L = cfg.num_tx_rau, K = cfg.num_dl_users, M = cfg.ant_per_rau;
  MatD p(L, K);
  for (int l = 0; l < L; ++l)
    for (int k = 0; k < K; ++k) p(l, k) = tx.dl_beams.middleRows(l * M, M).col(k).squaredNorm();
  return p;
}

AssociationMap associate_from_link_power(const MatD& link_power, double theta, double xi) {
  AssociationMap m;
  m.on.resize(link_power.rows(), link_power.cols());
  for (int l = 0; l < link_power.rows(); ++l)
    for (int k = 0; k < link_power.cols(); ++k)
      m.on(l, k) = smoothed_indicator(link_power(l, k), theta) > xi;
  return m;
}

AssociationMap associate_users(const TransmitDesign& tx, const ScenarioConfig& cfg) {
  return associate_from_link_power(link_powers(tx, cfg), cfg.theta, cfg.xi);
}

NormalizedScenario normalized_copy(const ChannelRealization& ch, const ScenarioConfig& cfg) {
  NormalizedScenario n{ch, cfg};
  const int K = cfg.num_dl_users, J = cfg.num_ul_users, Z = cfg.num_rx_rau;
  for (int k = 0; k < K; ++k) {
    const double s = std::sqrt(cfg.dl_noise_w(k));
    n.ch.dl_chan.col(k) /= s;
    for (int j = 0; j < J; ++j) n.ch.iui_chan(j, k) /= s;
  }
  for (int z = 0; z < Z; ++z) {
    const double v = cfg.ul_noise_w(z);
    n.ch.ul_chan[z] /= std::sqrt(v);
    n.ch.iri_var.col(z) /= v;
    n.ch.ul_gain.row(z) /= v;
  }
  n.cfg.dl_noise_w.setOnes();
  n.cfg.ul_noise_w.setOnes();
  return n;
}

}  // namespace nafd
