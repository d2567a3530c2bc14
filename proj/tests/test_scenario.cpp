// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <nafd/scenario.hpp>

#include <cmath>
#include <random>

#include "oracles.hpp"

using namespace nafd;

namespace {

std::vector<oracle::cd> col_to_vec(const Eigen::Ref<const VecC>& c) {
  return std::vector<oracle::cd>(c.data(), c.data() + c.size());
}

TransmitDesign random_design(const ScenarioConfig& cfg, uint64_t seed, double power_frac = 0.8) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> nd;
  const int ml = cfg.ant_per_rau * cfg.num_tx_rau;
  TransmitDesign tx;
  tx.dl_beams = MatC::Zero(ml, cfg.num_dl_users);
  for (int k = 0; k < cfg.num_dl_users; ++k)
    for (int i = 0; i < ml; ++i) tx.dl_beams(i, k) = cd(nd(gen), nd(gen));
  // scale per RAU so every power cap holds with the requested slack
  for (int l = 0; l < cfg.num_tx_rau; ++l) {
    auto blk = tx.dl_beams.middleRows(l * cfg.ant_per_rau, cfg.ant_per_rau);
    double p = blk.squaredNorm();
    if (p > 0) blk *= std::sqrt(power_frac * cfg.dl_power_cap_w(l) / p);
  }
  tx.ul_power = VecD::Zero(cfg.num_ul_users);
  std::uniform_real_distribution<double> ud(0.05, power_frac);
  for (int j = 0; j < cfg.num_ul_users; ++j) tx.ul_power(j) = ud(gen) * cfg.ul_power_cap_w(j);
  return tx;
}

}  // namespace

TEST_CASE("pathloss formula at 60 m") {
  ScenarioConfig cfg = desk_profile();
  CHECK(pathloss_db(0.06, cfg) == doctest::Approx(82.158487).epsilon(1e-6));
  ScenarioConfig steep = cfg;
  steep.pathloss_slope_db = 20.0;
  CHECK(pathloss_db(1.0, steep) == doctest::Approx(steep.pathloss_offset_db));
}

TEST_CASE("config validation rejects bad values") {
  ScenarioConfig cfg = desk_profile();
  CHECK_NOTHROW(cfg.validate());
  ScenarioConfig bad = cfg;
  bad.radius_m = 0.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.num_dl_users = 0;
  bad.dl_rate_floor = VecD(0);
  bad.dl_noise_w = VecD(0);
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  CHECK_NOTHROW(bad.validate(/*allow_empty_user_sets=*/true));
  bad = cfg;
  bad.uu_pairing = {0, 1, 99};
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.dl_power_cap_w = VecD::Ones(2);  // wrong length
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("channel generation is deterministic and dimensioned") {
  ScenarioConfig cfg = desk_profile();
  ChannelRealization a = generate_channels(cfg, 7);
  ChannelRealization b = generate_channels(cfg, 7);
  ChannelRealization c = generate_channels(cfg, 8);

  CHECK(a.dl_chan.rows() == cfg.ant_per_rau * cfg.num_tx_rau);
  CHECK(a.dl_chan.cols() == cfg.num_dl_users);
  CHECK((int)a.ul_chan.size() == cfg.num_rx_rau);
  CHECK(a.iui_chan.rows() == cfg.num_ul_users);
  CHECK(a.iui_chan.cols() == cfg.num_dl_users);

  CHECK(a.dl_chan == b.dl_chan);
  CHECK(a.iui_chan == b.iui_chan);
  for (int z = 0; z < cfg.num_rx_rau; ++z) CHECK(a.ul_chan[z] == b.ul_chan[z]);
  CHECK(a.serving == b.serving);
  CHECK(a.dl_chan != c.dl_chan);

  // residual leakage variance is flat across pairs: iri_error * ul_noise
  for (int l = 0; l < cfg.num_tx_rau; ++l)
    for (int z = 0; z < cfg.num_rx_rau; ++z)
      CHECK(a.iri_var(l, z) == doctest::Approx(cfg.iri_error * cfg.ul_noise_w(z)).epsilon(1e-12));

  // layout honors the minimum RAU-user separation
  auto min_dist = [&](const MatD& users) {
    double d = 1e300;
    for (int i = 0; i < users.rows(); ++i) {
      for (int l = 0; l < a.layout.tx_rau.rows(); ++l)
        d = std::min(d, (users.row(i) - a.layout.tx_rau.row(l)).norm());
      for (int z = 0; z < a.layout.rx_rau.rows(); ++z)
        d = std::min(d, (users.row(i) - a.layout.rx_rau.row(z)).norm());
    }
    return d;
  };
  CHECK(min_dist(a.layout.dl_user) >= cfg.min_rau_user_dist_m);
  CHECK(min_dist(a.layout.ul_user) >= cfg.min_rau_user_dist_m);
}

TEST_CASE("small-scale fading has unit average power") {
  // Monte-Carlo estimate over many seeds of E|h|^2 relative to the large-scale
  // gain. Fix geometry via reuse_layout so the per-entry normalization is clean.
  ScenarioConfig cfg = desk_profile();
  cfg.shadowing_std_db = 0.0;  // isolate the fading factor
  ChannelRealization base = generate_channels(cfg, 1);
  double acc = 0.0;
  int n = 0;
  for (uint64_t s = 0; s < 400; ++s) {
    ChannelRealization ch = generate_channels(cfg, 1000 + s, &base.layout);
    for (int z = 0; z < cfg.num_rx_rau; ++z) {
      for (int j = 0; j < cfg.num_ul_users; ++j) {
        acc += ch.ul_chan[z].col(j).squaredNorm() / (cfg.ant_per_rau * ch.ul_gain(z, j));
        ++n;
      }
    }
  }
  CHECK(acc / n == doctest::Approx(1.0).epsilon(0.02));
}

TEST_CASE("default serving assignment follows the largest gain") {
  ScenarioConfig cfg = desk_profile();
  ChannelRealization ch = generate_channels(cfg, 3);
  for (int j = 0; j < cfg.num_ul_users; ++j) {
    int best = 0;
    for (int z = 1; z < cfg.num_rx_rau; ++z)
      if (ch.ul_gain(z, j) > ch.ul_gain(best, j)) best = z;
    CHECK(ch.serving[j] == best);
  }
  ScenarioConfig forced = cfg;
  forced.uu_pairing = {2, 2, 0};
  ChannelRealization ch2 = generate_channels(forced, 3);
  CHECK(ch2.serving == std::vector<int>({2, 2, 0}));
}

TEST_CASE("downlink rate matches a scalar recomputation") {
  ScenarioConfig cfg = desk_profile();
  ChannelRealization ch = generate_channels(cfg, 11);
  TransmitDesign tx = random_design(cfg, 42);

  std::vector<oracle::cvec> beams;
  for (int k = 0; k < cfg.num_dl_users; ++k) beams.push_back(col_to_vec(tx.dl_beams.col(k)));
  std::vector<double> pu(tx.ul_power.data(), tx.ul_power.data() + tx.ul_power.size());

  for (int k = 0; k < cfg.num_dl_users; ++k) {
    std::vector<oracle::cd> iui;
    for (int j = 0; j < cfg.num_ul_users; ++j) iui.push_back(ch.iui_chan(j, k));
    double want = oracle::dl_rate(col_to_vec(ch.dl_chan.col(k)), beams, k, pu, iui, cfg.dl_noise_w(k));
    CHECK(downlink_rate(k, ch, tx, cfg) == doctest::Approx(want).epsilon(1e-12));
  }

  TransmitDesign zero = zero_design(cfg);
  for (int k = 0; k < cfg.num_dl_users; ++k) CHECK(downlink_rate(k, ch, zero, cfg) == 0.0);
}

TEST_CASE("downlink rate falls when uplink power rises") {
  ScenarioConfig cfg = desk_profile();
  ChannelRealization ch = generate_channels(cfg, 21);
  TransmitDesign tx = random_design(cfg, 22);
  double before = downlink_rate(0, ch, tx, cfg);
  tx.ul_power *= 4.0;
  tx.ul_power = tx.ul_power.cwiseMin(cfg.ul_power_cap_w);
  CHECK(downlink_rate(0, ch, tx, cfg) < before);
}

TEST_CASE("uplink rate: matched filter on an isolated two-antenna user") {
  // One uplink user, unit channel on both antennas, unit noise, no leakage:
  // matched filter gives SINR 2 and rate log2(3).
  ScenarioConfig cfg = desk_profile();
  cfg.num_ul_users = 1;
  cfg.num_dl_users = 1;
  cfg.iri_error = 0.0;
  cfg.ul_power_cap_w = VecD::Ones(1);
  cfg.ul_noise_w = VecD::Ones(cfg.num_rx_rau);
  cfg.dl_noise_w = VecD::Ones(1);
  cfg.ul_rate_floor = VecD::Zero(1);
  cfg.dl_rate_floor = VecD::Zero(1);
  cfg.uu_pairing = {0};
  ChannelRealization ch = generate_channels(cfg, 5);
  ch.ul_chan[0].col(0) << 1.0, 1.0;
  ch.iri_var.setZero();

  TransmitDesign tx = zero_design(cfg);
  tx.ul_power(0) = 1.0;
  ReceiveDesign rx;
  rx.combiners = MatC::Zero(2, 1);
  rx.combiners.col(0) << cd(1 / std::sqrt(2.0), 0), cd(1 / std::sqrt(2.0), 0);
  rx.serving = {0};

  CHECK(uplink_rate(0, ch, tx, rx, cfg) == doctest::Approx(1.5849625007211562).epsilon(1e-12));

  // receiver scale invariance, including complex scaling
  ReceiveDesign rx2 = rx;
  rx2.combiners *= cd(-0.3, 1.7);
  CHECK(uplink_rate(0, ch, tx, rx2, cfg) == doctest::Approx(uplink_rate(0, ch, tx, rx, cfg)).epsilon(1e-12));
}

TEST_CASE("uplink rate matches a scalar recomputation") {
  ScenarioConfig cfg = desk_profile();
  ChannelRealization ch = generate_channels(cfg, 13);
  TransmitDesign tx = random_design(cfg, 14);
  ReceiveDesign rx = mmse_all(ch, tx, cfg);

  std::vector<double> pu(tx.ul_power.data(), tx.ul_power.data() + tx.ul_power.size());
  for (int j = 0; j < cfg.num_ul_users; ++j) {
    int z = rx.serving[j];
    std::vector<oracle::cvec> hs;
    for (int j2 = 0; j2 < cfg.num_ul_users; ++j2) hs.push_back(col_to_vec(ch.ul_chan[z].col(j2)));
    double iri = 0.0;
    for (int l = 0; l < cfg.num_tx_rau; ++l) {
      double p = tx.dl_beams.middleRows(l * cfg.ant_per_rau, cfg.ant_per_rau).squaredNorm();
      iri += p * ch.iri_var(l, z);
    }
    double want = oracle::ul_rate(col_to_vec(rx.combiners.col(j)), hs, j, pu, iri, cfg.ul_noise_w(z));
    CHECK(uplink_rate(j, ch, tx, rx, cfg) == doctest::Approx(want).epsilon(1e-12));
  }

  // zero receiver -> zero rate, no NaN
  ReceiveDesign rx0 = rx;
  rx0.combiners.setZero();
  for (int j = 0; j < cfg.num_ul_users; ++j) CHECK(uplink_rate(j, ch, tx, rx0, cfg) == 0.0);
}

TEST_CASE("sum rate is the sum of per-user rates") {
  ScenarioConfig cfg = desk_profile();
  ChannelRealization ch = generate_channels(cfg, 15);
  TransmitDesign tx = random_design(cfg, 16);
  ReceiveDesign rx = mmse_all(ch, tx, cfg);
  double want = 0.0;
  for (int k = 0; k < cfg.num_dl_users; ++k) want += downlink_rate(k, ch, tx, cfg);
  for (int j = 0; j < cfg.num_ul_users; ++j) want += uplink_rate(j, ch, tx, rx, cfg);
  CHECK(sum_rate(ch, tx, rx, cfg) == doctest::Approx(want).epsilon(1e-12));

  TransmitDesign zero = zero_design(cfg);
  ReceiveDesign rxz = mmse_all(ch, zero, cfg);
  CHECK(sum_rate(ch, zero, rxz, cfg) == 0.0);
}

TEST_CASE("mmse receiver maximizes the uplink rate") {
  ScenarioConfig cfg = desk_profile();
  std::mt19937_64 gen(99);
  std::normal_distribution<double> nd;
  for (int trial = 0; trial < 25; ++trial) {
    ChannelRealization ch = generate_channels(cfg, 500 + trial);
    TransmitDesign tx = random_design(cfg, 900 + trial);
    ReceiveDesign rx = mmse_all(ch, tx, cfg);
    for (int j = 0; j < cfg.num_ul_users; ++j) {
      double best = uplink_rate(j, ch, tx, rx, cfg);
      for (int r = 0; r < 100; ++r) {
        ReceiveDesign rr = rx;
        for (int m = 0; m < cfg.ant_per_rau; ++m) rr.combiners(m, j) = cd(nd(gen), nd(gen));
        CHECK(uplink_rate(j, ch, tx, rr, cfg) <= best + 1e-9);
      }
    }
  }
}

TEST_CASE("mmse receiver on an interference-free user is the matched filter") {
  ScenarioConfig cfg = desk_profile();
  cfg.num_ul_users = 1;
  cfg.iri_error = 0.0;
  cfg.ul_power_cap_w = VecD::Ones(1);
  cfg.ul_rate_floor = VecD::Zero(1);
  cfg.uu_pairing = {1};
  ChannelRealization ch = generate_channels(cfg, 33);
  TransmitDesign tx = zero_design(cfg);
  tx.ul_power(0) = 0.5;
  VecC u = mmse_receiver(0, ch, tx, cfg);
  VecC h = ch.ul_chan[1].col(0);
  // collinearity: |<u,h>| == ||u|| ||h||
  CHECK(std::abs((u.adjoint() * h)(0)) == doctest::Approx(u.norm() * h.norm()).epsilon(1e-10));

  tx.ul_power(0) = 0.0;
  CHECK(mmse_receiver(0, ch, tx, cfg).norm() == 0.0);
}

TEST_CASE("feasibility report flags exactly the violated rows") {
  ScenarioConfig cfg = desk_profile();
  ChannelRealization ch = generate_channels(cfg, 51);

  // power cap doubled -> positive residual of the right size
  TransmitDesign tx = random_design(cfg, 52, /*power_frac=*/1.0);
  TransmitDesign hot = tx;
  hot.dl_beams *= std::sqrt(2.0);
  ReceiveDesign rx = mmse_all(ch, hot, cfg);
  FeasibilityReport rep = check_feasibility(ch, hot, rx, cfg);
  CHECK_FALSE(rep.feasible);
  for (int l = 0; l < cfg.num_tx_rau; ++l)
    CHECK(rep.dl_power_resid(l) == doctest::Approx(cfg.dl_power_cap_w(l)).epsilon(1e-9));

  // zero design violates every positive rate floor, satisfies the power rows
  TransmitDesign zero = zero_design(cfg);
  ReceiveDesign rxz = mmse_all(ch, zero, cfg);
  FeasibilityReport rz = check_feasibility(ch, zero, rxz, cfg);
  CHECK_FALSE(rz.feasible);
  for (int k = 0; k < cfg.num_dl_users; ++k)
    CHECK(rz.dl_rate_resid(k) == doctest::Approx(cfg.dl_rate_floor(k)));
  CHECK(rz.dl_power_resid.maxCoeff() < 0.0);

  // backhaul counts only links that actually carry power
  ScenarioConfig tight = cfg;
  tight.backhaul_cap_bps_hz = VecD::Zero(cfg.num_tx_rau);
  tight.dl_rate_floor = VecD::Zero(cfg.num_dl_users);
  tight.ul_rate_floor = VecD::Zero(cfg.num_ul_users);
  FeasibilityReport rb = check_feasibility(ch, zero, rxz, tight);
  CHECK(rb.backhaul_resid.maxCoeff() == 0.0);  // no active link, cap 0 still met
  FeasibilityReport rb2 = check_feasibility(ch, tx, rx, tight);
  CHECK(rb2.backhaul_resid.minCoeff() > 0.0);  // active links exceed a zero cap
}

TEST_CASE("smoothed indicator behaves like a soft activity flag") {
  CHECK(smoothed_indicator(0.0, 1e3) == 0.0);
  CHECK(smoothed_indicator(0.1, 10.0) == doctest::Approx(0.6321205588285577).epsilon(1e-12));
  CHECK(smoothed_indicator(1.0, 1e3) == doctest::Approx(1.0).epsilon(1e-9));
  std::mt19937_64 gen(3);
  std::uniform_real_distribution<double> ud(0.0, 2.0);
  for (int i = 0; i < 1000; ++i) {
    double a = ud(gen), b = ud(gen);
    if (a > b) std::swap(a, b);
    double ia = smoothed_indicator(a, 500.0), ib = smoothed_indicator(b, 500.0);
    CHECK(ia <= ib + 1e-15);
    CHECK(ia >= 0.0);
    CHECK(ib < 1.0 + 1e-15);
  }
}
