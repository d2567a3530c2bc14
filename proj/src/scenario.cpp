// SPDX-License-Identifier: Apache-2.0
#include <nafd/scenario.hpp>

#include <algorithm>
#include <cmath>
#include <random>

namespace nafd {

namespace {

constexpr double kPi = 3.14159265358979323846;

// Deterministic uniform/normal source. Box-Muller on top of mt19937_64 so the
// stream does not depend on the standard library's distribution internals.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  double uniform() {  // (0, 1]
    return (double)((gen_() >> 11) + 1) * 0x1.0p-53;
  }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform(), u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * kPi * u2);
    have_spare_ = true;
    return r * std::cos(2.0 * kPi * u2);
  }

  cd cnormal() {  // CN(0,1), unit average power
    return cd(normal(), normal()) * (1.0 / std::sqrt(2.0));
  }

 private:
  std::mt19937_64 gen_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument("scenario config: " + msg);
}

void check_vec(const VecD& v, int n, const char* name, bool nonneg = true) {
  require((int)v.size() == n, std::string(name) + " must have one entry per index");
  if (nonneg) require(v.size() == 0 || v.minCoeff() >= 0.0, std::string(name) + " must be nonnegative");
}

MatD draw_disc_points(Rng& rng, int n, double radius) {
  MatD p(n, 2);
  for (int i = 0; i < n; ++i) {
    double r = radius * std::sqrt(rng.uniform());
    double a = 2.0 * kPi * rng.uniform();
    p(i, 0) = r * std::cos(a);
    p(i, 1) = r * std::sin(a);
  }
  return p;
}

MatD draw_users(Rng& rng, int n, const ScenarioConfig& cfg, const MatD& tx, const MatD& rx) {
  MatD p(n, 2);
  for (int i = 0; i < n; ++i) {
    for (int attempt = 0;; ++attempt) {
      if (attempt > 100000) throw std::runtime_error("user placement: separation unattainable");
      double r = cfg.radius_m * std::sqrt(rng.uniform());
      double a = 2.0 * kPi * rng.uniform();
      Eigen::RowVector2d cand(r * std::cos(a), r * std::sin(a));
      double d = 1e300;
      for (int l = 0; l < tx.rows(); ++l) d = std::min(d, (cand - tx.row(l)).norm());
      for (int z = 0; z < rx.rows(); ++z) d = std::min(d, (cand - rx.row(z)).norm());
      if (d >= cfg.min_rau_user_dist_m) {
        p.row(i) = cand;
        break;
      }
    }
  }
  return p;
}

double dist_km(const Eigen::RowVector2d& a, const Eigen::RowVector2d& b) {
  // floor at 1 m so user-to-user links cannot blow up the linear gain
  return std::max((a - b).norm(), 1.0) / 1000.0;
}

// large-scale amplitude gain: pathloss plus lognormal shadowing, linear power
double draw_gain(Rng& rng, double d_km, const ScenarioConfig& cfg) {
  double pl = pathloss_db(d_km, cfg) + cfg.shadowing_std_db * rng.normal();
  return std::pow(10.0, -pl / 10.0);
}

}  // namespace

double pathloss_db(double dist_km, const ScenarioConfig& cfg) {
  return cfg.pathloss_offset_db + cfg.pathloss_slope_db * std::log10(dist_km);
}

void ScenarioConfig::validate(bool allow_empty_user_sets) const {
  require(num_tx_rau >= 1, "need at least one transmitting RAU");
  require(num_rx_rau >= 1, "need at least one receiving RAU");
  require(ant_per_rau >= 1, "need at least one antenna per RAU");
  int min_users = allow_empty_user_sets ? 0 : 1;
  require(num_dl_users >= min_users, "need at least one downlink user");
  require(num_ul_users >= min_users, "need at least one uplink user");
  require(radius_m > 0.0, "radius must be positive");
  require(min_rau_user_dist_m >= 0.0 && min_rau_user_dist_m < radius_m,
          "min RAU-user distance must lie inside the disc");
  check_vec(dl_power_cap_w, num_tx_rau, "dl_power_cap_w");
  check_vec(ul_power_cap_w, num_ul_users, "ul_power_cap_w");
  check_vec(backhaul_cap_bps_hz, num_tx_rau, "backhaul_cap_bps_hz");
  check_vec(dl_rate_floor, num_dl_users, "dl_rate_floor");
  check_vec(ul_rate_floor, num_ul_users, "ul_rate_floor");
  check_vec(dl_noise_w, num_dl_users, "dl_noise_w");
  check_vec(ul_noise_w, num_rx_rau, "ul_noise_w");
  require(dl_noise_w.size() == 0 || dl_noise_w.minCoeff() > 0.0, "noise must be positive");
  require(ul_noise_w.size() == 0 || ul_noise_w.minCoeff() > 0.0, "noise must be positive");
  require(iri_error >= 0.0, "iri_error must be nonnegative");
  require(theta > 0.0, "theta must be positive");
  require(xi > 0.0 && xi < 1.0, "xi must lie in (0,1)");
  if (!uu_pairing.empty()) {
    require((int)uu_pairing.size() == num_ul_users, "uu_pairing must have one entry per uplink user");
    for (int z : uu_pairing) require(z >= 0 && z < num_rx_rau, "uu_pairing entry out of range");
  }
}

namespace {
ScenarioConfig make_profile(int l, int z, int k, int j, int m) {
  ScenarioConfig c;
  c.num_tx_rau = l;
  c.num_rx_rau = z;
  c.num_dl_users = k;
  c.num_ul_users = j;
  c.ant_per_rau = m;
  c.dl_power_cap_w = VecD::Constant(l, 1.0);
  c.ul_power_cap_w = VecD::Constant(j, 0.5);
  c.backhaul_cap_bps_hz = VecD::Constant(l, 20.0);
  c.dl_rate_floor = VecD::Constant(k, 0.1);
  c.ul_rate_floor = VecD::Constant(j, 0.1);
  c.dl_noise_w = VecD::Constant(k, 1e-10);  // -70 dBm
  c.ul_noise_w = VecD::Constant(z, 1e-10);
  return c;
}
}  // namespace

ScenarioConfig desk_profile() { return make_profile(4, 4, 3, 3, 2); }
ScenarioConfig full_profile() { return make_profile(10, 10, 5, 5, 2); }

ChannelRealization generate_channels(const ScenarioConfig& cfg, uint64_t seed,
                                     const Layout* reuse_layout) {
  cfg.validate(/*allow_empty_user_sets=*/true);
  const int L = cfg.num_tx_rau, Z = cfg.num_rx_rau;
  const int K = cfg.num_dl_users, J = cfg.num_ul_users, M = cfg.ant_per_rau;

  Rng rng(seed);
  ChannelRealization ch;
  if (reuse_layout) {
    require(reuse_layout->tx_rau.rows() == L && reuse_layout->rx_rau.rows() == Z &&
                reuse_layout->dl_user.rows() == K && reuse_layout->ul_user.rows() == J,
            "reused layout does not match the configuration");
    ch.layout = *reuse_layout;
  } else {
    ch.layout.tx_rau = draw_disc_points(rng, L, cfg.radius_m);
    ch.layout.rx_rau = draw_disc_points(rng, Z, cfg.radius_m);
    ch.layout.dl_user = draw_users(rng, K, cfg, ch.layout.tx_rau, ch.layout.rx_rau);
    ch.layout.ul_user = draw_users(rng, J, cfg, ch.layout.tx_rau, ch.layout.rx_rau);
  }

  ch.dl_chan = MatC::Zero(M * L, K);
  for (int k = 0; k < K; ++k) {
    for (int l = 0; l < L; ++l) {
      double g = draw_gain(rng, dist_km(ch.layout.dl_user.row(k), ch.layout.tx_rau.row(l)), cfg);
      for (int m = 0; m < M; ++m) ch.dl_chan(l * M + m, k) = std::sqrt(g) * rng.cnormal();
    }
  }

  ch.ul_chan.assign(Z, MatC::Zero(M, J));
  ch.ul_gain = MatD::Zero(Z, J);
  for (int j = 0; j < J; ++j) {
    for (int z = 0; z < Z; ++z) {
      double g = draw_gain(rng, dist_km(ch.layout.ul_user.row(j), ch.layout.rx_rau.row(z)), cfg);
      ch.ul_gain(z, j) = g;
      for (int m = 0; m < M; ++m) ch.ul_chan[z](m, j) = std::sqrt(g) * rng.cnormal();
    }
  }

  ch.iui_chan = MatC::Zero(J, K);
  for (int j = 0; j < J; ++j) {
    for (int k = 0; k < K; ++k) {
      double g = draw_gain(rng, dist_km(ch.layout.ul_user.row(j), ch.layout.dl_user.row(k)), cfg);
      ch.iui_chan(j, k) = std::sqrt(g) * rng.cnormal();
    }
  }

  ch.iri_var = MatD::Zero(L, Z);
  for (int l = 0; l < L; ++l)
    for (int z = 0; z < Z; ++z) ch.iri_var(l, z) = cfg.iri_error * cfg.ul_noise_w(z);

  if (!cfg.uu_pairing.empty()) {
    ch.serving = cfg.uu_pairing;
  } else {
    ch.serving.assign(J, 0);
    for (int j = 0; j < J; ++j) {
      for (int z = 1; z < Z; ++z)
        if (ch.ul_gain(z, j) > ch.ul_gain(ch.serving[j], j)) ch.serving[j] = z;
    }
  }
  return ch;
}

TransmitDesign zero_design(const ScenarioConfig& cfg) {
  TransmitDesign tx;
  tx.dl_beams = MatC::Zero(cfg.ant_per_rau * cfg.num_tx_rau, cfg.num_dl_users);
  tx.ul_power = VecD::Zero(cfg.num_ul_users);
  return tx;
}

double iri_power_at(int z, const ChannelRealization& ch, const TransmitDesign& tx,
                    const ScenarioConfig& cfg) {
  double acc = 0.0;
  for (int l = 0; l < cfg.num_tx_rau; ++l) {
    double p = tx.dl_beams.middleRows(l * cfg.ant_per_rau, cfg.ant_per_rau).squaredNorm();
    acc += p * ch.iri_var(l, z);
  }
  return acc;
}

double downlink_rate(int k, const ChannelRealization& ch, const TransmitDesign& tx,
                     const ScenarioConfig& cfg) {
  const VecC h = ch.dl_chan.col(k);
  double sig = std::norm((h.adjoint() * tx.dl_beams.col(k))(0));
  double itf = cfg.dl_noise_w(k);
  for (int k2 = 0; k2 < cfg.num_dl_users; ++k2)
    if (k2 != k) itf += std::norm((h.adjoint() * tx.dl_beams.col(k2))(0));
  for (int j = 0; j < cfg.num_ul_users; ++j) itf += tx.ul_power(j) * std::norm(ch.iui_chan(j, k));
  return std::log2(1.0 + sig / itf);
}

double uplink_rate(int j, const ChannelRealization& ch, const TransmitDesign& tx,
                   const ReceiveDesign& rx, const ScenarioConfig& cfg) {
  const int z = rx.serving[j];
  const VecC u = rx.combiners.col(j);
  const double un = u.squaredNorm();
  if (un == 0.0) return 0.0;
  double sig = tx.ul_power(j) * std::norm((u.adjoint() * ch.ul_chan[z].col(j))(0));
  double itf = (cfg.ul_noise_w(z) + iri_power_at(z, ch, tx, cfg)) * un;
  for (int j2 = 0; j2 < cfg.num_ul_users; ++j2)
    if (j2 != j) itf += tx.ul_power(j2) * std::norm((u.adjoint() * ch.ul_chan[z].col(j2))(0));
  return std::log2(1.0 + sig / itf);
}

double sum_rate(const ChannelRealization& ch, const TransmitDesign& tx, const ReceiveDesign& rx,
                const ScenarioConfig& cfg) {
  double acc = 0.0;
  for (int k = 0; k < cfg.num_dl_users; ++k) acc += downlink_rate(k, ch, tx, cfg);
  for (int j = 0; j < cfg.num_ul_users; ++j) acc += uplink_rate(j, ch, tx, rx, cfg);
  return acc;
}

VecC mmse_receiver(int j, const ChannelRealization& ch, const TransmitDesign& tx,
                   const ScenarioConfig& cfg) {
  const int z = ch.serving[j];
  const int M = cfg.ant_per_rau;
  MatC sigma = MatC::Zero(M, M);
  for (int j2 = 0; j2 < cfg.num_ul_users; ++j2) {
    const VecC h = ch.ul_chan[z].col(j2);
    sigma += tx.ul_power(j2) * (h * h.adjoint());
  }
  sigma += (cfg.ul_noise_w(z) + iri_power_at(z, ch, tx, cfg)) * MatC::Identity(M, M);
  Eigen::LLT<MatC> llt(sigma);
  if (llt.info() != Eigen::Success) throw std::domain_error("mmse receiver: singular covariance");
  return llt.solve(ch.ul_chan[z].col(j)) * std::sqrt(tx.ul_power(j));
}

ReceiveDesign mmse_all(const ChannelRealization& ch, const TransmitDesign& tx,
                       const ScenarioConfig& cfg) {
  ReceiveDesign rx;
  rx.combiners = MatC::Zero(cfg.ant_per_rau, cfg.num_ul_users);
  rx.serving = ch.serving;
  for (int j = 0; j < cfg.num_ul_users; ++j) rx.combiners.col(j) = mmse_receiver(j, ch, tx, cfg);
  return rx;
}

FeasibilityReport check_feasibility(const ChannelRealization& ch, const TransmitDesign& tx,
                                    const ReceiveDesign& rx, const ScenarioConfig& cfg,
                                    double tol) {
  const int L = cfg.num_tx_rau, K = cfg.num_dl_users, J = cfg.num_ul_users, M = cfg.ant_per_rau;
  FeasibilityReport rep;
  rep.dl_power_resid = VecD::Zero(L);
  rep.ul_power_resid = VecD::Zero(J);
  rep.dl_rate_resid = VecD::Zero(K);
  rep.ul_rate_resid = VecD::Zero(J);
  rep.backhaul_resid = VecD::Zero(L);

  VecD dl_rate(K);
  for (int k = 0; k < K; ++k) dl_rate(k) = downlink_rate(k, ch, tx, cfg);

  for (int l = 0; l < L; ++l) {
    double p = tx.dl_beams.middleRows(l * M, M).squaredNorm();
    rep.dl_power_resid(l) = p - cfg.dl_power_cap_w(l);
    double load = 0.0;
    for (int k = 0; k < K; ++k)
      if (tx.dl_beams.middleRows(l * M, M).col(k).squaredNorm() > 0.0) load += dl_rate(k);
    rep.backhaul_resid(l) = load - cfg.backhaul_cap_bps_hz(l);
  }
  for (int j = 0; j < J; ++j)
    rep.ul_power_resid(j) = std::max(tx.ul_power(j) - cfg.ul_power_cap_w(j), -tx.ul_power(j));
  for (int k = 0; k < K; ++k) rep.dl_rate_resid(k) = cfg.dl_rate_floor(k) - dl_rate(k);
  for (int j = 0; j < J; ++j)
    rep.ul_rate_resid(j) = cfg.ul_rate_floor(j) - uplink_rate(j, ch, tx, rx, cfg);

  rep.max_resid = 0.0;
  for (const VecD* v : {&rep.dl_power_resid, &rep.ul_power_resid, &rep.dl_rate_resid,
                        &rep.ul_rate_resid, &rep.backhaul_resid})
    if (v->size() > 0) rep.max_resid = std::max(rep.max_resid, v->maxCoeff());
  rep.feasible = rep.max_resid <= tol;
  return rep;
}

double smoothed_indicator(double x, double theta) { return -std::expm1(-theta * x); }

}  // namespace nafd
