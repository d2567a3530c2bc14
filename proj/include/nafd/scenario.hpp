// SPDX-License-Identifier: Apache-2.0
//
// Deployment model for a distributed antenna system in which one set of
// remote antenna units transmits downlink while a second set simultaneously
// receives uplink on the same band. Holds the static configuration, draws
// seeded channel realizations, and evaluates rates / feasibility for a given
// transmit + receive design.
#pragma once

#include <Eigen/Dense>

#include <complex>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace nafd {

using cd = std::complex<double>;
using MatC = Eigen::MatrixXcd;
using VecC = Eigen::VectorXcd;
using MatD = Eigen::MatrixXd;
using VecD = Eigen::VectorXd;

// All powers and noise variances are linear watts, all rates bps/Hz.
// dB / dBm conversions happen in the file loader (scenario_file.cpp), never here.
struct ScenarioConfig {
  int num_tx_rau = 4;    // downlink-transmitting RAUs
  int num_rx_rau = 4;    // uplink-receiving RAUs
  int num_dl_users = 3;
  int num_ul_users = 3;
  int ant_per_rau = 2;

  double radius_m = 60.0;
  double min_rau_user_dist_m = 5.0;

  VecD dl_power_cap_w;       // size L
  VecD ul_power_cap_w;       // size J
  VecD backhaul_cap_bps_hz;  // size L
  VecD dl_rate_floor;        // size K
  VecD ul_rate_floor;        // size J
  VecD dl_noise_w;           // size K
  VecD ul_noise_w;           // size Z

  // Residual cross-RAU interference after cancellation: each receiving RAU sees
  // variance iri_error * ul_noise per watt transmitted by any transmitting RAU.
  double iri_error = 0.316227766016838;  // -5 dB

  double pathloss_offset_db = 128.1;
  double pathloss_slope_db = 37.6;  // per decade of km
  double shadowing_std_db = 8.0;

  double theta = 1e3;  // sharpness of the smoothed link-activity indicator
  double xi = 0.5;     // activity threshold used for user association

  // Optional override of the serving R-RAU per uplink user; empty = pick the
  // R-RAU with the largest large-scale gain per user at channel generation.
  std::vector<int> uu_pairing;

  // Throws std::invalid_argument on malformed values. Baseline schemes build
  // internal sub-scenarios with an empty user set on one side, hence the flag.
  void validate(bool allow_empty_user_sets = false) const;
};

// CI-sized deployment: 4+4 RAUs, 3+3 users, 2 antennas.
ScenarioConfig desk_profile();
// Reference deployment: 10+10 RAUs, 5+5 users, 2 antennas.
ScenarioConfig full_profile();

struct Layout {
  MatD tx_rau;   // L x 2, meters
  MatD rx_rau;   // Z x 2
  MatD dl_user;  // K x 2
  MatD ul_user;  // J x 2
};

struct ChannelRealization {
  MatC dl_chan;               // (M*L) x K, stacked per-RAU blocks
  std::vector<MatC> ul_chan;  // Z entries, each M x J
  MatC iui_chan;              // J x K uplink-user -> downlink-user leakage
  MatD iri_var;               // L x Z residual variance per transmitted watt
  std::vector<int> serving;   // size J, serving R-RAU per uplink user
  MatD ul_gain;               // Z x J large-scale gains (pathloss * shadowing)
  Layout layout;
};

struct TransmitDesign {
  MatC dl_beams;  // (M*L) x K
  VecD ul_power;  // J
};

struct ReceiveDesign {
  MatC combiners;            // M x J, combiner at the serving R-RAU only
  std::vector<int> serving;  // size J
};

struct FeasibilityReport {
  VecD dl_power_resid;  // L:   sum_k ||w_lk||^2 - cap_l
  VecD ul_power_resid;  // J:   max(P_j - cap_j, -P_j)
  VecD dl_rate_resid;   // K:   floor_k - rate_k
  VecD ul_rate_resid;   // J
  VecD backhaul_resid;  // L:   sum over links with nonzero power of rate_k, minus cap_l
  double max_resid = 0.0;
  bool feasible = false;
};

double pathloss_db(double dist_km, const ScenarioConfig& cfg);

// Deterministic for a given (cfg, seed): identical realizations bit for bit.
// When reuse_layout is non-null the positions are taken from it and only the
// fading / shadowing is drawn (used by derived co-located deployments).
ChannelRealization generate_channels(const ScenarioConfig& cfg, uint64_t seed,
                                     const Layout* reuse_layout = nullptr);

double downlink_rate(int k, const ChannelRealization& ch, const TransmitDesign& tx,
                     const ScenarioConfig& cfg);
double uplink_rate(int j, const ChannelRealization& ch, const TransmitDesign& tx,
                   const ReceiveDesign& rx, const ScenarioConfig& cfg);
double sum_rate(const ChannelRealization& ch, const TransmitDesign& tx, const ReceiveDesign& rx,
                const ScenarioConfig& cfg);

// Linear MMSE combiner for uplink user j given the current transmit design.
// Scale does not matter for the rate; the returned vector is the unnormalized
// MMSE solution. P_j = 0 yields the zero vector.
VecC mmse_receiver(int j, const ChannelRealization& ch, const TransmitDesign& tx,
                   const ScenarioConfig& cfg);
ReceiveDesign mmse_all(const ChannelRealization& ch, const TransmitDesign& tx,
                       const ScenarioConfig& cfg);

FeasibilityReport check_feasibility(const ChannelRealization& ch, const TransmitDesign& tx,
                                    const ReceiveDesign& rx, const ScenarioConfig& cfg,
                                    double tol = 1e-6);

// 1 - exp(-theta x): smooth 0/1 surrogate for "link carries power".
double smoothed_indicator(double x, double theta);

// Zero-initialized design pair of the right dimensions.
TransmitDesign zero_design(const ScenarioConfig& cfg);

// Sum over transmitting RAUs of per-watt leakage into R-RAU z, weighted by the
// per-RAU transmit power of the design. Appears in every uplink noise term.
double iri_power_at(int z, const ChannelRealization& ch, const TransmitDesign& tx,
                    const ScenarioConfig& cfg);

}  // namespace nafd
