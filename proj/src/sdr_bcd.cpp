// SPDX-License-Identifier: Apache-2.0
#include "nafd/sdr_bcd.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>

namespace nafd::sdr_bcd {

namespace {

constexpr double kLn2 = 0.6931471805599453;

using convex::AffineExpr;
using convex::ConvexProgram;

VecC restrict_vec(const VecC& h, const std::vector<int>& raus, int m) {
  VecC r(m * (int)raus.size());
  for (int a = 0; a < (int)raus.size(); ++a) r.segment(a * m, m) = h.segment(raus[a] * m, m);
  return r;
}

MatC restrict_mat(const MatC& q, const std::vector<int>& raus, int m) {
  const int d = m * (int)raus.size();
  MatC r(d, d);
  for (int a = 0; a < (int)raus.size(); ++a)
    for (int b = 0; b < (int)raus.size(); ++b)
      r.block(a * m, b * m, m, m) = q.block(raus[a] * m, raus[b] * m, m, m);
  return r;
}

void embed_mat(MatC& full, const MatC& r, const std::vector<int>& raus, int m) {
  for (int a = 0; a < (int)raus.size(); ++a)
    for (int b = 0; b < (int)raus.size(); ++b)
      full.block(raus[a] * m, raus[b] * m, m, m) = r.block(a * m, b * m, m, m);
}

// ca * a + cb * b
AffineExpr combine(double ca, const AffineExpr& a, double cb, const AffineExpr& b) {
  AffineExpr out;
  out.c0 = ca * a.c0 + cb * b.c0;
  for (const auto& [i, c] : a.terms) out.add(i, ca * c);
  for (const auto& [i, c] : b.terms) out.add(i, cb * c);
  return out;
}

double trace_block(const MatC& q, int l, int m) {
  return std::real(q.block(l * m, l * m, m, m).trace());
}

// rate a single user could never exceed: all transmit power coherently on it
double rate_upper_bound(int k, const ChannelRealization& ch, const ScenarioConfig& cfg) {
  double gain = ch.dl_chan.col(k).squaredNorm() * cfg.dl_power_cap_w.sum();
  return std::log2(1.0 + gain / cfg.dl_noise_w(k));
}

struct BuildContext {
  std::vector<AffineExpr> dl_sig, dl_itf;  // per downlink user (empty expr when off)
  std::vector<AffineExpr> ul_sig, ul_itf;  // per uplink user
  std::vector<char> chain;                 // per downlink user
};

Subproblem build_subproblem(const ExpansionState& state, const ReceiveDesign& rx,
                            const AssociationMap& assoc, bool smoothed,
                            const ChannelRealization& ch, const ScenarioConfig& cfg) {
  const int L = cfg.num_tx_rau, K = cfg.num_dl_users, J = cfg.num_ul_users;
  const int M = cfg.ant_per_rau;

  Subproblem sub;
  ProgramLayout& lay = sub.layout;
  ConvexProgram& prog = sub.prog;
  lay.smoothed = smoothed;
  lay.full_dim = M * L;
  lay.q.resize(K);
  lay.p.assign(J, -1);
  lay.rate_cap.assign(K, -1);
  lay.inv_interference.assign(K, -1);
  lay.link_load = Eigen::MatrixXi::Constant(L, K, -1);
  lay.dl_qos_rows.assign(K, -1);
  lay.ul_qos_rows.assign(J, -1);

  // --- variables -----------------------------------------------------------
  for (int k = 0; k < K; ++k) {
    for (int l = 0; l < L; ++l)
      if (assoc.on(l, k)) lay.q[k].raus.push_back(l);
    if (lay.q[k].raus.empty()) {
      if (cfg.dl_rate_floor(k) > 0.0)
        throw std::runtime_error("association removed every link of a user with a rate floor");
      continue;
    }
    lay.q[k].dim = M * (int)lay.q[k].raus.size();
    lay.q[k].off = prog.add_psd_block(lay.q[k].dim, "q" + std::to_string(k));
  }
  for (int j = 0; j < J; ++j)
    lay.p[j] = prog.add_var(0.0, cfg.ul_power_cap_w(j), "p" + std::to_string(j));

  std::vector<double> r_ub(K, 0.0);
  for (int k = 0; k < K; ++k) r_ub[k] = rate_upper_bound(k, ch, cfg);

  // backhaul rows only where the cap could possibly bind
  for (int l = 0; l < L; ++l) {
    double reachable = 0.0;
    for (int k = 0; k < K; ++k)
      if (lay.q[k].off >= 0 && assoc.on(l, k)) reachable += r_ub[k];
    if (cfg.backhaul_cap_bps_hz(l) < reachable) lay.active_backhaul.push_back(l);
  }

  BuildContext cx;
  cx.chain.assign(K, 0);
  for (int k = 0; k < K; ++k) {
    if (lay.q[k].off < 0) continue;
    for (int l : lay.active_backhaul)
      if (assoc.on(l, k)) cx.chain[k] = 1;
  }
  for (int k = 0; k < K; ++k) {
    if (!cx.chain[k]) continue;
    lay.rate_cap[k] = prog.add_var(0.0, r_ub[k] + 2.0, "rho" + std::to_string(k));
    lay.inv_interference[k] =
        prog.add_var(0.0, 4.0 / cfg.dl_noise_w(k), "mu" + std::to_string(k));
  }
  if (smoothed) {
    for (int l : lay.active_backhaul)
      for (int k = 0; k < K; ++k)
        if (cx.chain[k] && assoc.on(l, k))
          lay.link_load(l, k) = prog.add_var(0.0, cfg.backhaul_cap_bps_hz(l) * 1.01 + 1.0,
                                             "load" + std::to_string(l) + "_" + std::to_string(k));
  }

  // masked expansion covariances (structural zeros enforced)
  std::vector<MatC> qm(K, MatC::Zero(lay.full_dim, lay.full_dim));
  for (int k = 0; k < K; ++k)
    if (lay.q[k].off >= 0)
      embed_mat(qm[k], restrict_mat(state.q[k], lay.q[k].raus, M), lay.q[k].raus, M);

  // --- affine SINR pieces ---------------------------------------------------
  cx.dl_sig.resize(K);
  cx.dl_itf.resize(K);
  for (int k = 0; k < K; ++k) {
    if (lay.q[k].off < 0) continue;
    const VecC h = ch.dl_chan.col(k);
    VecC hr = restrict_vec(h, lay.q[k].raus, M);
    ConvexProgram::add_trace(cx.dl_sig[k], lay.q[k].off, lay.q[k].dim, hr * hr.adjoint());
    cx.dl_itf[k].c0 = cfg.dl_noise_w(k);
    for (int k2 = 0; k2 < K; ++k2) {
      if (k2 == k || lay.q[k2].off < 0) continue;
      VecC hr2 = restrict_vec(h, lay.q[k2].raus, M);
      ConvexProgram::add_trace(cx.dl_itf[k], lay.q[k2].off, lay.q[k2].dim, hr2 * hr2.adjoint());
    }
    for (int j = 0; j < J; ++j) cx.dl_itf[k].add(lay.p[j], std::norm(ch.iui_chan(j, k)));
  }
  cx.ul_sig.resize(J);
  cx.ul_itf.resize(J);
  std::vector<char> ul_live(J, 0);
  for (int j = 0; j < J; ++j) {
    const int z = rx.serving[j];
    const VecC u = rx.combiners.col(j);
    const double un = u.squaredNorm();
    if (un <= 0.0) {
      if (cfg.ul_rate_floor(j) > 0.0)
        throw std::runtime_error("zero combiner for an uplink user with a rate floor");
      continue;
    }
    ul_live[j] = 1;
    cx.ul_sig[j].add(lay.p[j], std::norm((u.adjoint() * ch.ul_chan[z].col(j))(0)));
    cx.ul_itf[j].c0 = cfg.ul_noise_w(z) * un;
    for (int j2 = 0; j2 < J; ++j2)
      if (j2 != j) cx.ul_itf[j].add(lay.p[j2], std::norm((u.adjoint() * ch.ul_chan[z].col(j2))(0)));
    for (int k = 0; k < K; ++k) {
      if (lay.q[k].off < 0) continue;
      for (int a = 0; a < (int)lay.q[k].raus.size(); ++a) {
        double c = ch.iri_var(lay.q[k].raus[a], z) * un;
        if (c == 0.0) continue;
        for (int i = 0; i < M; ++i) cx.ul_itf[j].add(lay.q[k].off + a * M + i, c);
      }
    }
  }

  // --- constraints -----------------------------------------------------------
  for (int l = 0; l < L; ++l) {
    convex::LinearCon con;
    con.a.c0 = -cfg.dl_power_cap_w(l);
    for (int k = 0; k < K; ++k) {
      if (lay.q[k].off < 0) continue;
      auto it = std::find(lay.q[k].raus.begin(), lay.q[k].raus.end(), l);
      if (it == lay.q[k].raus.end()) continue;
      int a = (int)(it - lay.q[k].raus.begin());
      for (int i = 0; i < M; ++i) con.a.add(lay.q[k].off + a * M + i, 1.0);
    }
    lay.power_rows.push_back(prog.add_linear(std::move(con)));
  }

  for (int k = 0; k < K; ++k) {
    if (cfg.dl_rate_floor(k) <= 0.0 || lay.q[k].off < 0) continue;
    double snr = std::exp2(cfg.dl_rate_floor(k)) - 1.0;
    convex::LinearCon con;
    con.a = combine(snr, cx.dl_itf[k], -1.0, cx.dl_sig[k]);
    lay.dl_qos_rows[k] = prog.add_linear(std::move(con));
  }
  for (int j = 0; j < J; ++j) {
    if (cfg.ul_rate_floor(j) <= 0.0 || !ul_live[j]) continue;
    double snr = std::exp2(cfg.ul_rate_floor(j)) - 1.0;
    convex::LinearCon con;
    con.a = combine(snr, cx.ul_itf[j], -1.0, cx.ul_sig[j]);
    lay.ul_qos_rows[j] = prog.add_linear(std::move(con));
  }

  for (int k = 0; k < K; ++k) {
    if (!cx.chain[k]) continue;
    const double phi_n = std::max(state.amgm_weight(k), 1e-12);
    const double rho_n = std::max(state.rate_cap(k), 1e-9);

    convex::QolCon rec;  // 1/mu <= interference
    convex::SquareTerm one;
    one.w = 1.0;
    one.q.c0 = 1.0;
    rec.squares.push_back(one);
    rec.den.add(lay.inv_interference[k], 1.0);
    rec.a = combine(-1.0, cx.dl_itf[k], 0.0, AffineExpr{});
    lay.chain_rows.push_back(prog.add_qol(std::move(rec)));

    // mu^2/(2 phi) + (phi/2) sig^2 <= 2^rho_n (1 + ln2 (rho - rho_n)) - 1
    convex::QuadCon prod;
    convex::SquareTerm smu;
    smu.w = 0.5 / phi_n;
    smu.q.add(lay.inv_interference[k], 1.0);
    convex::SquareTerm ssig;
    ssig.w = 0.5 * phi_n;
    ssig.q = cx.dl_sig[k];
    prod.squares = {smu, ssig};
    const double t_n = std::exp2(rho_n);
    prod.a.c0 = 1.0 - t_n + t_n * kLn2 * rho_n;
    prod.a.add(lay.rate_cap[k], -t_n * kLn2);
    lay.chain_rows.push_back(prog.add_quad(std::move(prod)));
  }

  if (smoothed) {
    for (int l : lay.active_backhaul) {
      for (int k = 0; k < K; ++k) {
        if (lay.link_load(l, k) < 0) continue;
        const double rho_n = std::max(state.rate_cap(k), 1e-9);
        // Expand the concave log-weight at a point no lower than 0.1/theta:
        // the tangent at any point stays a global upper bound, and the clamp
        // keeps the slope (~1/point near zero) from wrecking Newton scaling
        // when a link's power has decayed toward zero.
        const double t_n =
            std::max(trace_block(qm[k], l, M), std::max(0.1 / cfg.theta, 1e-12));
        const double lam = -std::expm1(-cfg.theta * t_n);
        const double slope = cfg.theta * std::exp(-cfg.theta * t_n) / lam;
        convex::LogCon con;
        con.c = 1.0;
        con.arg.add(lay.link_load(l, k), 1.0);
        con.a.c0 = -1.0 + std::log(rho_n) + std::log(lam) - slope * t_n;
        con.a.add(lay.rate_cap[k], 1.0 / rho_n);
        auto it = std::find(lay.q[k].raus.begin(), lay.q[k].raus.end(), l);
        int a = (int)(it - lay.q[k].raus.begin());
        for (int i = 0; i < M; ++i) con.a.add(lay.q[k].off + a * M + i, slope);
        lay.chain_rows.push_back(prog.add_log(std::move(con)));
      }
      convex::LinearCon cap;
      cap.a.c0 = -cfg.backhaul_cap_bps_hz(l);
      for (int k = 0; k < K; ++k)
        if (lay.link_load(l, k) >= 0) cap.a.add(lay.link_load(l, k), 1.0);
      lay.backhaul_rows.push_back(prog.add_linear(std::move(cap)));
    }
  } else {
    for (int l : lay.active_backhaul) {
      convex::LinearCon cap;
      cap.a.c0 = -cfg.backhaul_cap_bps_hz(l);
      for (int k = 0; k < K; ++k)
        if (cx.chain[k] && assoc.on(l, k)) cap.a.add(lay.rate_cap[k], 1.0);
      lay.backhaul_rows.push_back(prog.add_linear(std::move(cap)));
    }
  }

  // --- objective: exact concave part minus the interference tangent ----------
  auto& obj = prog.objective();
  for (int k = 0; k < K; ++k)
    if (lay.q[k].off >= 0)
      obj.logs.push_back({1.0 / kLn2, combine(1.0, cx.dl_sig[k], 1.0, cx.dl_itf[k])});
  for (int j = 0; j < J; ++j)
    if (ul_live[j]) obj.logs.push_back({1.0 / kLn2, combine(1.0, cx.ul_sig[j], 1.0, cx.ul_itf[j])});

  InterferenceTangent tan = linearize_log_interference(qm, state.p, rx, ch, cfg);
  obj.affine.c0 = -tan.constant;
  for (int k = 0; k < K; ++k)
    if (lay.q[k].off >= 0)
      ConvexProgram::add_trace(obj.affine, lay.q[k].off, lay.q[k].dim,
                               restrict_mat(tan.q_grad[k], lay.q[k].raus, M), -1.0);
  for (int j = 0; j < J; ++j) obj.affine.add(lay.p[j], -tan.p_grad(j));

  // --- expansion point ---------------------------------------------------------
  sub.x0 = VecD::Zero(prog.num_vars());
  for (int k = 0; k < K; ++k)
    if (lay.q[k].off >= 0)
      ConvexProgram::pack_hermitian(sub.x0, lay.q[k].off, lay.q[k].dim,
                                    restrict_mat(state.q[k], lay.q[k].raus, M));
  for (int j = 0; j < J; ++j) sub.x0[lay.p[j]] = state.p(j);
  for (int k = 0; k < K; ++k) {
    if (!cx.chain[k]) continue;
    sub.x0[lay.rate_cap[k]] = std::max(state.rate_cap(k), 1e-9);
    sub.x0[lay.inv_interference[k]] = state.inv_interference(k);
  }
  if (smoothed) {
    const bool carried =
        state.link_load.rows() == cfg.num_tx_rau && state.link_load.cols() == K;
    // Effective smoothing weight at the state under the clamped tangent; equal
    // to the plain weight whenever the link power sits above the clamp.
    auto eff_weight = [&](int l, int k) {
      const double t0 = trace_block(qm[k], l, M);
      const double tau = std::max(t0, std::max(0.1 / cfg.theta, 1e-12));
      const double lam = -std::expm1(-cfg.theta * tau);
      const double slope = cfg.theta * std::exp(-cfg.theta * tau) / lam;
      return lam * std::exp(slope * (t0 - tau));
    };
    for (int l : lay.active_backhaul) {
      double base = 0.0;
      for (int k = 0; k < K; ++k) {
        if (lay.link_load(l, k) < 0) continue;
        base += std::max(state.rate_cap(k), 1e-9) * eff_weight(l, k);
      }
      const double cap = cfg.backhaul_cap_bps_hz(l);
      double f = 1.0 + 1e-6;
      if (base > 0.0 && base < cap) f = std::min(f, 1.0 + 0.5 * (cap / base - 1.0));
      for (int k = 0; k < K; ++k) {
        if (lay.link_load(l, k) < 0) continue;
        // A load share carried from the previous optimum stays strictly
        // feasible for the re-expanded row (the fresh tangent evaluated at its
        // own expansion point can only sit lower), so prefer it to the recipe.
        if (carried && state.link_load(l, k) > 0.0) {
          sub.x0[lay.link_load(l, k)] =
              std::min(state.link_load(l, k), 0.9999 * (cap * 1.01 + 1.0));
          continue;
        }
        const double want = f * std::max(state.rate_cap(k), 1e-9) * eff_weight(l, k);
        sub.x0[lay.link_load(l, k)] = std::min(want, 0.9 * (cap * 1.01 + 1.0));
      }
    }
  }
  return sub;
}

// closed-form combiner refresh against the lifted interference model
void refresh_combiners(ReceiveDesign& rx, const std::vector<MatC>& q, const VecD& p,
                       const ChannelRealization& ch, const ScenarioConfig& cfg) {
  const int J = cfg.num_ul_users, M = cfg.ant_per_rau, L = cfg.num_tx_rau;
  const int K = cfg.num_dl_users;
  for (int j = 0; j < J; ++j) {
    const int z = rx.serving[j];
    double iri = 0.0;
    for (int k = 0; k < K; ++k)
      for (int l = 0; l < L; ++l) iri += trace_block(q[k], l, M) * ch.iri_var(l, z);
    MatC sigma = (cfg.ul_noise_w(z) + iri) * MatC::Identity(M, M);
    for (int j2 = 0; j2 < J; ++j2) {
      const VecC h2 = ch.ul_chan[z].col(j2);
      sigma += p(j2) * (h2 * h2.adjoint());
    }
    rx.combiners.col(j) =
        sigma.llt().solve(ch.ul_chan[z].col(j)) * std::sqrt(std::max(p(j), 0.0));
  }
}

// per-iteration guardrails enabled by Options::debug_checks
void verify_surrogates(const Subproblem& sub, const ExpansionState& state, const ReceiveDesign& rx,
                       const ChannelRealization& ch, const ScenarioConfig& cfg,
                       std::mt19937_64& gen) {
  auto qm = sub.layout.unpack_q(sub.x0, cfg);
  VecD p0 = sub.layout.unpack_p(sub.x0);
  double h0 = eval_log_interference(qm, p0, rx, ch, cfg);
  InterferenceTangent tan = linearize_log_interference(qm, p0, rx, ch, cfg);
  if (std::abs(tan.value_at(qm, p0) - h0) > 1e-10 * std::max(1.0, std::abs(h0)))
    throw std::logic_error("interference tangent is not tight at the expansion point");

  std::normal_distribution<double> nd;
  std::uniform_real_distribution<double> ud(0.0, 1.0);
  const int n = qm.empty() ? 0 : (int)qm[0].rows();
  for (int s = 0; s < 20; ++s) {
    std::vector<MatC> qs = qm;
    for (auto& q : qs) {
      MatC a(n, n);
      for (int r = 0; r < n; ++r)
        for (int c = 0; c < n; ++c) a(r, c) = cd(nd(gen), nd(gen));
      q += 0.05 * (a * a.adjoint()) / std::max(1, n);
    }
    VecD ps(p0.size());
    for (int i = 0; i < ps.size(); ++i) ps(i) = ud(gen) * cfg.ul_power_cap_w(i);
    double hs = eval_log_interference(qs, ps, rx, ch, cfg);
    if (tan.value_at(qs, ps) < hs - 1e-9)
      throw std::logic_error("interference tangent fails to majorize");
  }

  for (int k = 0; k < (int)sub.layout.rate_cap.size(); ++k) {
    if (sub.layout.rate_cap[k] < 0) continue;
    const VecC h = ch.dl_chan.col(k);
    double sig = std::real((h.adjoint() * qm[k] * h)(0));
    double mu = sub.x0[sub.layout.inv_interference[k]];
    double phi = std::max(state.amgm_weight(k), 1e-12);
    if (std::abs(bilinear_upper_bound(mu, sig, phi) - mu * sig) >
        1e-9 * std::max(1.0, mu * sig))
      throw std::logic_error("product majorant is not tight at the refreshed weight");
  }
}

struct Extraction {
  TransmitDesign tx;
  double gap = 0.0;  // max over users
};

Extraction principal_extraction(const std::vector<MatC>& q, const VecD& p,
                                const ScenarioConfig& cfg) {
  Extraction ex;
  ex.tx = zero_design(cfg);
  ex.tx.ul_power = p;
  for (int k = 0; k < (int)q.size(); ++k) {
    auto r = extract_rank1(q[k]);
    ex.tx.dl_beams.col(k) = r.beam;
    ex.gap = std::max(ex.gap, r.gap);
  }
  return ex;
}

// Largest uniform downlink scale in (0, 1] meeting power and backhaul caps,
// then a full feasibility check there. Scaling down only ever helps the
// uplink (less residual leakage), so only downlink floors can reject.
std::optional<std::pair<TransmitDesign, double>> repaired_candidate(
    const MatC& beams, const VecD& p, const ChannelRealization& ch, const ScenarioConfig& cfg) {
  auto attempt = [&](double tau) {
    TransmitDesign tx;
    tx.dl_beams = tau * beams;
    tx.ul_power = p;
    return tx;
  };
  auto caps_ok = [&](const TransmitDesign& tx) {
    auto rep = check_feasibility(ch, tx, mmse_all(ch, tx, cfg), cfg);
    bool ok = true;
    if (rep.dl_power_resid.size() > 0) ok = ok && rep.dl_power_resid.maxCoeff() <= 0.0;
    if (rep.backhaul_resid.size() > 0) ok = ok && rep.backhaul_resid.maxCoeff() <= 0.0;
    return ok;
  };

  TransmitDesign tx = attempt(1.0);
  auto rep = check_feasibility(ch, tx, mmse_all(ch, tx, cfg), cfg);
  if (rep.feasible) {
    ReceiveDesign rx = mmse_all(ch, tx, cfg);
    return std::make_pair(tx, sum_rate(ch, tx, rx, cfg));
  }
  if (caps_ok(tx)) return std::nullopt;  // a quality floor failed; shrinking cannot fix it

  double lo = 1e-9, hi = 1.0;
  if (!caps_ok(attempt(lo))) return std::nullopt;
  for (int it = 0; it < 60; ++it) {
    double mid = 0.5 * (lo + hi);
    (caps_ok(attempt(mid)) ? lo : hi) = mid;
  }
  tx = attempt(lo);
  ReceiveDesign rx = mmse_all(ch, tx, cfg);
  if (!check_feasibility(ch, tx, rx, cfg).feasible) return std::nullopt;
  return std::make_pair(tx, sum_rate(ch, tx, rx, cfg));
}

}  // namespace

// ---------------------------------------------------------------------------

std::vector<MatC> lift(const TransmitDesign& tx, const ScenarioConfig& cfg) {
  std::vector<MatC> q(cfg.num_dl_users);
  for (int k = 0; k < cfg.num_dl_users; ++k)
    q[k] = tx.dl_beams.col(k) * tx.dl_beams.col(k).adjoint();
  return q;
}

Rank1Extraction extract_rank1(const MatC& q) {
  Rank1Extraction out;
  const int n = (int)q.rows();
  Eigen::SelfAdjointEigenSolver<MatC> eig(q);
  const double l1 = eig.eigenvalues()(n - 1);
  if (l1 <= 0.0) {
    out.beam = VecC::Zero(n);
    out.gap = 0.0;
    return out;
  }
  out.beam = std::sqrt(l1) * eig.eigenvectors().col(n - 1);
  out.gap = n >= 2 ? std::max(0.0, eig.eigenvalues()(n - 2)) / l1 : 0.0;
  return out;
}

namespace {

// signal & interference of each user at a lifted point; the shared core of the
// exact split and its tangent
struct SplitTerms {
  VecD dl_sig, dl_itf;   // K
  VecD ul_sig, ul_itf;   // J (zero rows for dead combiners)
  std::vector<char> ul_live;
};

SplitTerms split_terms(const std::vector<MatC>& q, const VecD& p, const ReceiveDesign& rx,
                       const ChannelRealization& ch, const ScenarioConfig& cfg) {
  const int K = cfg.num_dl_users, J = cfg.num_ul_users, L = cfg.num_tx_rau;
  const int M = cfg.ant_per_rau;
  SplitTerms t;
  t.dl_sig = VecD::Zero(K);
  t.dl_itf = VecD::Zero(K);
  t.ul_sig = VecD::Zero(J);
  t.ul_itf = VecD::Zero(J);
  t.ul_live.assign(J, 0);
  for (int k = 0; k < K; ++k) {
    const VecC h = ch.dl_chan.col(k);
    t.dl_sig(k) = std::real((h.adjoint() * q[k] * h)(0));
    double itf = cfg.dl_noise_w(k);
    for (int k2 = 0; k2 < K; ++k2)
      if (k2 != k) itf += std::real((h.adjoint() * q[k2] * h)(0));
    for (int j = 0; j < J; ++j) itf += p(j) * std::norm(ch.iui_chan(j, k));
    t.dl_itf(k) = itf;
  }
  for (int j = 0; j < J; ++j) {
    const int z = rx.serving[j];
    const VecC u = rx.combiners.col(j);
    const double un = u.squaredNorm();
    if (un <= 0.0) continue;
    t.ul_live[j] = 1;
    t.ul_sig(j) = p(j) * std::norm((u.adjoint() * ch.ul_chan[z].col(j))(0));
    double iri = 0.0;
    for (int k = 0; k < K; ++k)
      for (int l = 0; l < L; ++l) iri += trace_block(q[k], l, M) * ch.iri_var(l, z);
    double itf = (cfg.ul_noise_w(z) + iri) * un;
    for (int j2 = 0; j2 < J; ++j2)
      if (j2 != j) itf += p(j2) * std::norm((u.adjoint() * ch.ul_chan[z].col(j2))(0));
    t.ul_itf(j) = itf;
  }
  return t;
}

}  // namespace

double eval_log_total(const std::vector<MatC>& q, const VecD& p, const ReceiveDesign& rx,
                      const ChannelRealization& ch, const ScenarioConfig& cfg) {
  SplitTerms t = split_terms(q, p, rx, ch, cfg);
  double v = 0.0;
  for (int k = 0; k < cfg.num_dl_users; ++k) v += std::log2(t.dl_sig(k) + t.dl_itf(k));
  for (int j = 0; j < cfg.num_ul_users; ++j)
    if (t.ul_live[j]) v += std::log2(t.ul_sig(j) + t.ul_itf(j));
  return v;
}

double eval_log_interference(const std::vector<MatC>& q, const VecD& p, const ReceiveDesign& rx,
                             const ChannelRealization& ch, const ScenarioConfig& cfg) {
  SplitTerms t = split_terms(q, p, rx, ch, cfg);
  double v = 0.0;
  for (int k = 0; k < cfg.num_dl_users; ++k) v += std::log2(t.dl_itf(k));
  for (int j = 0; j < cfg.num_ul_users; ++j)
    if (t.ul_live[j]) v += std::log2(t.ul_itf(j));
  return v;
}

double InterferenceTangent::value_at(const std::vector<MatC>& q, const VecD& p) const {
  double v = constant + p_grad.dot(p);
  for (size_t k = 0; k < q_grad.size(); ++k)
    v += (q_grad[k].cwiseProduct(q[k].conjugate())).sum().real();
  return v;
}

InterferenceTangent linearize_log_interference(const std::vector<MatC>& q, const VecD& p,
                                               const ReceiveDesign& rx,
                                               const ChannelRealization& ch,
                                               const ScenarioConfig& cfg) {
  const int K = cfg.num_dl_users, J = cfg.num_ul_users, L = cfg.num_tx_rau;
  const int M = cfg.ant_per_rau;
  const int n = M * L;
  SplitTerms t = split_terms(q, p, rx, ch, cfg);

  InterferenceTangent tan;
  tan.q_grad.assign(K, MatC::Zero(n, n));
  tan.p_grad = VecD::Zero(J);

  for (int k = 0; k < K; ++k) {
    const double w = 1.0 / (kLn2 * t.dl_itf(k));
    const VecC h = ch.dl_chan.col(k);
    const MatC outer = w * (h * h.adjoint());
    for (int k2 = 0; k2 < K; ++k2)
      if (k2 != k) tan.q_grad[k2] += outer;
    for (int j = 0; j < J; ++j) tan.p_grad(j) += w * std::norm(ch.iui_chan(j, k));
  }
  for (int j = 0; j < J; ++j) {
    if (!t.ul_live[j]) continue;
    const int z = rx.serving[j];
    const VecC u = rx.combiners.col(j);
    const double w = 1.0 / (kLn2 * t.ul_itf(j));
    const double un = u.squaredNorm();
    for (int k = 0; k < K; ++k)
      for (int l = 0; l < L; ++l) {
        double c = w * un * ch.iri_var(l, z);
        if (c != 0.0)
          tan.q_grad[k].block(l * M, l * M, M, M) += c * MatC::Identity(M, M);
      }
    for (int j2 = 0; j2 < J; ++j2)
      if (j2 != j) tan.p_grad(j2) += w * std::norm((u.adjoint() * ch.ul_chan[z].col(j2))(0));
  }

  tan.constant = eval_log_interference(q, p, rx, ch, cfg) - tan.p_grad.dot(p);
  for (int k = 0; k < K; ++k)
    tan.constant -= (tan.q_grad[k].cwiseProduct(q[k].conjugate())).sum().real();
  return tan;
}

double bilinear_upper_bound(double mu, double q, double phi) {
  if (phi <= 0.0) throw std::invalid_argument("nonpositive product-majorant weight");
  return mu * mu / (2.0 * phi) + 0.5 * phi * q * q;
}

std::vector<MatC> ProgramLayout::unpack_q(const VecD& x, const ScenarioConfig& cfg) const {
  std::vector<MatC> out(q.size(), MatC::Zero(full_dim, full_dim));
  for (size_t k = 0; k < q.size(); ++k) {
    if (q[k].off < 0) continue;
    MatC r = ConvexProgram::unpack_hermitian(x, q[k].off, q[k].dim);
    embed_mat(out[k], r, q[k].raus, cfg.ant_per_rau);
  }
  return out;
}

VecD ProgramLayout::unpack_p(const VecD& x) const {
  VecD out(p.size());
  for (size_t j = 0; j < p.size(); ++j) out(j) = x[p[j]];
  return out;
}

VecD ProgramLayout::unpack_rate_cap(const VecD& x) const {
  VecD out = VecD::Zero(rate_cap.size());
  for (size_t k = 0; k < rate_cap.size(); ++k)
    if (rate_cap[k] >= 0) out(k) = x[rate_cap[k]];
  return out;
}

VecD ProgramLayout::unpack_inv_interference(const VecD& x) const {
  VecD out = VecD::Zero(inv_interference.size());
  for (size_t k = 0; k < inv_interference.size(); ++k)
    if (inv_interference[k] >= 0) out(k) = x[inv_interference[k]];
  return out;
}

Subproblem build_stage1_subproblem(const ExpansionState& state, const ReceiveDesign& rx,
                                   const ChannelRealization& ch, const ScenarioConfig& cfg) {
  return build_subproblem(state, rx, AssociationMap::ones(cfg.num_tx_rau, cfg.num_dl_users),
                          true, ch, cfg);
}

Subproblem build_stage2_subproblem(const ExpansionState& state, const ReceiveDesign& rx,
                                   const AssociationMap& assoc, const ChannelRealization& ch,
                                   const ScenarioConfig& cfg) {
  return build_subproblem(state, rx, assoc, false, ch, cfg);
}

Result run(const ChannelRealization& ch, const ScenarioConfig& cfg, const Options& opts) {
  cfg.validate(true);
  using clock = std::chrono::steady_clock;
  const auto wall0 = clock::now();
  const double ms = 1.0;
  (void)ms;
  const int L = cfg.num_tx_rau, K = cfg.num_dl_users, J = cfg.num_ul_users;
  const int M = cfg.ant_per_rau;
  const int n = M * L;

  auto norm = normalized_copy(ch, cfg);
  const ChannelRealization& nch = norm.ch;
  const ScenarioConfig& ncfg = norm.cfg;

  Result res;
  res.assoc = AssociationMap::ones(L, K);
  res.tx = zero_design(cfg);
  res.rx.combiners = MatC::Zero(M, J);
  res.rx.serving = ch.serving;

  // matched filters to start the combiner block
  ReceiveDesign rx;
  rx.serving = nch.serving;
  rx.combiners = MatC::Zero(M, J);
  for (int j = 0; j < J; ++j) {
    VecC h = nch.ul_chan[nch.serving[j]].col(j);
    if (h.norm() > 0) rx.combiners.col(j) = h / h.norm();
  }

  // maximum-ratio start with a slight diagonal load, backed off to 95% caps
  ExpansionState state;
  state.p = 0.5 * cfg.ul_power_cap_w;
  state.q.assign(K, MatC::Zero(n, n));
  if (K > 0) {
    const double ebar = cfg.dl_power_cap_w.minCoeff() * 1e-6 / M;
    for (int k = 0; k < K; ++k) {
      VecC w = VecC::Zero(n);
      for (int l = 0; l < L; ++l) {
        VecC dir = nch.dl_chan.col(k).segment(l * M, M);
        if (dir.norm() > 0)
          w.segment(l * M, M) = dir * (std::sqrt(cfg.dl_power_cap_w(l) / K) / dir.norm());
      }
      state.q[k] = w * w.adjoint() + ebar * MatC::Identity(n, n);
    }
    double worst = 0.0;
    for (int l = 0; l < L; ++l) {
      double tr = 0.0;
      for (const auto& qk : state.q) tr += trace_block(qk, l, M);
      worst = std::max(worst, tr / cfg.dl_power_cap_w(l));
    }
    if (worst > 0.0)
      for (auto& qk : state.q) qk *= 0.95 / worst;
  }

  auto recipe_refresh = [&](const VecD* rho, const VecD* mu, const std::vector<int>& chain_idx) {
    SplitTerms t = split_terms(state.q, state.p, rx, nch, ncfg);
    state.rate_cap = VecD::Zero(K);
    state.inv_interference = VecD::Zero(K);
    state.amgm_weight = VecD::Zero(K);
    for (int k = 0; k < K; ++k) {
      const bool solved = rho && k < (int)chain_idx.size() && chain_idx[k] >= 0;
      if (solved) {
        state.rate_cap(k) = (*rho)(k);
        state.inv_interference(k) = (*mu)(k);
      } else {
        state.rate_cap(k) = std::log2(1.0 + 1.02 * t.dl_sig(k) / t.dl_itf(k)) + 1e-6;
        state.inv_interference(k) = (1.0 + 1e-4) / t.dl_itf(k);
      }
      state.amgm_weight(k) =
          std::max(state.inv_interference(k) / std::max(t.dl_sig(k), 1e-300), 1e-12);
    }
  };
  recipe_refresh(nullptr, nullptr, {});

  convex::SolveOptions kopts;
  kopts.tol = opts.kernel_tol;

  // Exact-row repair of the start. Rate floors are linear in (Q, p) for fixed
  // receivers, so enforce them before any surrogate is expanded: the reciprocal
  // weights of a floor-violating start can wall the subproblem off from the
  // whole feasible set. Backhaul is left out here (a huge cap builds no such
  // rows); the first subproblem's own phase-1 picks those up.
  if (K > 0 || J > 0) {
    ScenarioConfig pcfg = ncfg;
    pcfg.backhaul_cap_bps_hz.setConstant(1e12);
    Subproblem fs = build_stage1_subproblem(state, rx, nch, pcfg);
    auto pre = convex::find_interior(fs.prog, fs.x0, {}, kopts);
    if (!pre.feasible) {
      res.trace.status = RunStatus::infeasible;
      res.trace.message = "rate floors unattainable within the power budget";
      return res;
    }
    if (pre.x != fs.x0) {
      state.q = fs.layout.unpack_q(pre.x, ncfg);
      state.p = fs.layout.unpack_p(pre.x);
      recipe_refresh(nullptr, nullptr, {});
    }
  }

  std::mt19937_64 dbg_gen(0x0dbc4ecaULL);
  double last_omega = 0.0;
  int global_it = 0;
  int stage1_active_rows = -1;
  bool ok = true;

  auto elapsed_ms = [&] {
    return std::chrono::duration<double, std::milli>(clock::now() - wall0).count();
  };

  for (int stage = 1; stage <= 2 && ok; ++stage) {
    if (stage == 2) {
      if (!opts.two_stage || K == 0) break;
      MatD lp(L, K);
      for (int l = 0; l < L; ++l)
        for (int k = 0; k < K; ++k) lp(l, k) = trace_block(state.q[k], l, M);
      res.assoc = associate_from_link_power(lp, cfg.theta, cfg.xi);
      if (res.assoc.all_on() && stage1_active_rows == 0) break;  // nothing would change
      for (int k = 0; k < K; ++k)
        for (int l = 0; l < L; ++l)
          if (!res.assoc.on(l, k)) {
            state.q[k].middleRows(l * M, M).setZero();
            state.q[k].middleCols(l * M, M).setZero();
          }
      state.link_load.resize(0, 0);
      recipe_refresh(nullptr, nullptr, {});
    }

    double prev_obj = std::numeric_limits<double>::quiet_NaN();
    bool stage_done = false;
    for (int it = 0; it < opts.max_outer; ++it) {
      // One outer iteration = one receiver update, but the transmit subproblem
      // at fixed receivers is itself solved by successive convex expansion:
      // re-expand and re-solve until a pass gains less than the outer
      // tolerance (each pass is a plain majorize-minimize step, so the
      // objective cannot drop).  The first hard-association iterate instead
      // starts from the stage-1 optimum projected onto the hard backhaul rows
      // and passes just until that projection loss is recovered.  The very
      // first iterate stays single-pass: deep refinement against the crude
      // matched-filter receivers would overcommit the design.
      const bool entry_fix = stage == 2 && it == 0;
      const int max_pass = entry_fix || it > 0 ? 8 : 1;
      const double recover_to = (entry_fix && !res.trace.iterations.empty())
                                    ? res.trace.iterations.back().objective
                                    : -std::numeric_limits<double>::infinity();
      double pass_omega =
          entry_fix || it == 0 ? -std::numeric_limits<double>::infinity() : last_omega;
      Subproblem sub;
      convex::SolveReport rep;
      for (int pass = 0; pass < max_pass; ++pass) {
        try {
          sub = stage == 1 ? build_stage1_subproblem(state, rx, nch, ncfg)
                           : build_stage2_subproblem(state, rx, res.assoc, nch, ncfg);
        } catch (const std::runtime_error& e) {
          res.trace.status = RunStatus::infeasible;
          res.trace.message = e.what();
          ok = false;
          break;
        }
        if (stage == 1 && it == 0 && pass == 0)
          stage1_active_rows = (int)sub.layout.active_backhaul.size();
        if (opts.debug_checks) verify_surrogates(sub, state, rx, nch, ncfg, dbg_gen);

        auto ph = convex::find_interior(sub.prog, sub.x0, {}, kopts);
        if (!ph.feasible) {
          if (stage == 1 && it == 0 && pass == 0) {
            res.trace.status = RunStatus::infeasible;
            res.trace.message = "rate floors unattainable within the power and backhaul budgets";
          } else {
            res.trace.status = RunStatus::numerical_failure;
            std::ostringstream os;
            os << "lost feasibility at outer iteration " << global_it;
            res.trace.message = os.str();
          }
          ok = false;
          break;
        }
        rep = convex::solve(sub.prog, ph.x, kopts);
        if (rep.status != convex::SolveStatus::optimal) {
          res.trace.status = RunStatus::numerical_failure;
          std::ostringstream os;
          os << "subproblem " << convex::to_string(rep.status) << " at outer iteration "
             << global_it;
          res.trace.message = os.str();
          ok = false;
          break;
        }

        state.q = sub.layout.unpack_q(rep.x, ncfg);
        state.p = sub.layout.unpack_p(rep.x);
        VecD rho = sub.layout.unpack_rate_cap(rep.x);
        VecD mu = sub.layout.unpack_inv_interference(rep.x);
        recipe_refresh(&rho, &mu, sub.layout.rate_cap);
        if (stage == 1) {
          state.link_load = Eigen::MatrixXd::Constant(L, K, -1.0);
          for (int l = 0; l < L; ++l)
            for (int k = 0; k < K; ++k)
              if (sub.layout.link_load(l, k) >= 0)
                state.link_load(l, k) = rep.x[sub.layout.link_load(l, k)];
        }

        if (pass + 1 >= max_pass) break;
        const double w_now = eval_log_total(state.q, state.p, rx, nch, ncfg) -
                             eval_log_interference(state.q, state.p, rx, nch, ncfg);
        if (entry_fix && w_now >= recover_to - 1e-7) break;
        const double stall_tol = entry_fix ? 1e-7 : opts.outer_tol;
        if (w_now - pass_omega <= stall_tol * std::max(1.0, std::abs(w_now))) break;
        pass_omega = w_now;
      }
      if (!ok) break;
      refresh_combiners(rx, state.q, state.p, nch, ncfg);

      last_omega = eval_log_total(state.q, state.p, rx, nch, ncfg) -
                   eval_log_interference(state.q, state.p, rx, nch, ncfg);

      IterationRecord rec;
      rec.iteration = global_it;
      rec.objective = last_omega;
      Extraction snap = principal_extraction(state.q, state.p, cfg);
      ReceiveDesign srx = mmse_all(ch, snap.tx, cfg);
      rec.exact_se = sum_rate(ch, snap.tx, srx, cfg);
      rec.max_residual = check_feasibility(ch, snap.tx, srx, cfg).max_resid;
      rec.rank1_gap = snap.gap;
      rec.time_ms = elapsed_ms();
      res.trace.iterations.push_back(rec);
      if (stage == 1) res.trace.stage1_iterations = global_it + 1;
      ++global_it;

      if (!std::isnan(prev_obj) &&
          std::abs(last_omega - prev_obj) <= opts.outer_tol * std::max(1.0, std::abs(prev_obj))) {
        stage_done = true;
        break;
      }
      prev_obj = last_omega;
    }
    if (!ok) break;
    if (!stage_done) {
      res.trace.status = RunStatus::max_iterations;
      std::ostringstream os;
      os << "stage " << stage << " did not converge in " << opts.max_outer << " iterations";
      res.trace.message = os.str();
      break;
    }
  }

  if (!ok) return res;

  res.q = state.q;
  res.lifted_se = last_omega;

  Extraction principal = principal_extraction(state.q, state.p, cfg);
  res.rank1_gap = principal.gap;

  std::vector<MatC> candidates;
  candidates.push_back(principal.tx.dl_beams);
  if (K > 0 && principal.gap > opts.randomize_gap_threshold && opts.randomize_samples > 0) {
    std::vector<MatC> roots(K);
    for (int k = 0; k < K; ++k) {
      Eigen::SelfAdjointEigenSolver<MatC> eig(state.q[k]);
      VecD ev = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
      roots[k] = eig.eigenvectors() * ev.asDiagonal() * eig.eigenvectors().adjoint();
    }
    std::mt19937_64 gen(opts.randomize_seed);
    std::normal_distribution<double> nd;
    for (int s = 0; s < opts.randomize_samples; ++s) {
      MatC beams(n, K);
      for (int k = 0; k < K; ++k) {
        VecC g(n);
        for (int i = 0; i < n; ++i) g(i) = cd(nd(gen), nd(gen)) / std::sqrt(2.0);
        beams.col(k) = roots[k] * g;
      }
      candidates.push_back(beams);
    }
  }

  double best_rate = -1.0;
  TransmitDesign best_tx = principal.tx;
  bool any_feasible = false;
  for (const MatC& beams : candidates) {
    auto cand = repaired_candidate(beams, state.p, ch, cfg);
    if (!cand) continue;
    if (!any_feasible || cand->second > best_rate) {
      any_feasible = true;
      best_rate = cand->second;
      best_tx = cand->first;
    }
  }

  res.tx = best_tx;
  res.rx = mmse_all(ch, res.tx, cfg);
  res.extracted_se = sum_rate(ch, res.tx, res.rx, cfg);
  return res;
}

}  // namespace nafd::sdr_bcd
