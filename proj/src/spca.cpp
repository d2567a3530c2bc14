// SPDX-License-Identifier: Apache-2.0
#include "nafd/spca.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <random>
#include <sstream>
#include <stdexcept>

namespace nafd::spca {

namespace {

constexpr double kLn2 = 0.6931471805599453;
constexpr double kEps = 1e-3;   // relative interiority margin of rebuilt auxiliaries
constexpr double kTiny = 1e-9;  // absolute slack on quantities that may sit at zero

using convex::ConvexProgram;
using convex::LinearCon;
using convex::QolCon;
using convex::QuadCon;
using convex::SquareTerm;

// ---------------------------------------------------------------------------
// Real-variable views of complex blocks.  Each block covers the re/im pairs
// of a restricted complex vector; cpos holds the entry positions within the
// full-length vector so channel coefficients can be picked out directly.

struct BeamBlock {
  int off = -1;
  std::vector<int> cpos;
  bool empty() const { return cpos.empty(); }
  int size() const { return (int)cpos.size(); }
};

VecC restrict_vec(const VecC& full, const BeamBlock& b) {
  VecC out(b.size());
  for (int t = 0; t < b.size(); ++t) out(t) = full(b.cpos[t]);
  return out;
}

// scale * Re(c^H v) over the block's variables; c in block coordinates
void add_dot_re(AffineExpr& e, const BeamBlock& b, const VecC& c, double scale) {
  for (int t = 0; t < b.size(); ++t) {
    e.add(b.off + 2 * t, scale * c(t).real());
    e.add(b.off + 2 * t + 1, scale * c(t).imag());
  }
}

// scale * Im(c^H v)
void add_dot_im(AffineExpr& e, const BeamBlock& b, const VecC& c, double scale) {
  for (int t = 0; t < b.size(); ++t) {
    e.add(b.off + 2 * t, -scale * c(t).imag());
    e.add(b.off + 2 * t + 1, scale * c(t).real());
  }
}

AffineExpr dot_re(const BeamBlock& b, const VecC& c) {
  AffineExpr e;
  add_dot_re(e, b, c, 1.0);
  return e;
}

AffineExpr dot_im(const BeamBlock& b, const VecC& c) {
  AffineExpr e;
  add_dot_im(e, b, c, 1.0);
  return e;
}

// weight * ||v||^2, optionally only the entries of one RAU block
void add_norm_squares(std::vector<SquareTerm>& sq, const BeamBlock& b, double weight, int only_rau,
                      int m) {
  for (int t = 0; t < b.size(); ++t) {
    if (only_rau >= 0 && b.cpos[t] / m != only_rau) continue;
    AffineExpr re, im;
    re.add(b.off + 2 * t, 1.0);
    im.add(b.off + 2 * t + 1, 1.0);
    sq.push_back({weight, re});
    sq.push_back({weight, im});
  }
}

MatC outer(const VecC& h) { return h * h.adjoint(); }

BeamBlock w_block(const ProgramLayout& lay, int k) {
  BeamBlock b;
  b.off = lay.w_off[k];
  for (int l : lay.w_raus[k])
    for (int m = 0; m < lay.M; ++m) b.cpos.push_back(l * lay.M + m);
  return b;
}

BeamBlock u_block(const ProgramLayout& lay, int j) {
  BeamBlock b;
  b.off = lay.u_off[j];
  for (int m = 0; m < lay.M; ++m) b.cpos.push_back(m);
  return b;
}

}  // namespace

// ---------------------------------------------------------------------------
// Surrogate atoms.

RatioTangent ratio_tangent(const MatC& a, double shift, const VecC& anchor_w, double anchor_chi) {
  if (anchor_chi <= shift)
    throw std::invalid_argument("ratio_tangent: denominator anchor must exceed the shift");
  const double den = std::max(anchor_chi - shift, 1e-9);
  const VecC aw = a * anchor_w;
  const double num = anchor_w.dot(aw).real();
  RatioTangent t;
  t.w_coef = (2.0 / den) * aw;
  t.chi_coef = -num / (den * den);
  t.c0 = num * shift / (den * den);
  return t;
}

QuadTangent quad_tangent(const MatC& a, const VecC& anchor_w) {
  const VecC aw = a * anchor_w;
  QuadTangent t;
  t.w_coef = 2.0 * aw;
  t.c0 = -anchor_w.dot(aw).real();
  return t;
}

IndicatorTangent indicator_tangent(double anchor_x, double theta) {
  if (anchor_x < 0.0) throw std::invalid_argument("indicator_tangent: negative anchor");
  IndicatorTangent t;
  const double e = std::exp(-theta * anchor_x);
  t.slope = theta * e;
  t.c0 = 1.0 - e - t.slope * anchor_x;
  return t;
}

double product_cap_lhs(double a, double b, double c, double d2, double anchor_a, double anchor_b) {
  if (anchor_a <= 0.0) throw std::invalid_argument("product_cap_lhs: nonpositive anchor");
  const double an = std::max(anchor_a, 1e-9);
  return an * an * c * d2 - 2.0 * b * an * anchor_b + anchor_b * anchor_b * a;
}

// ---------------------------------------------------------------------------
// Geometric-mean cone tree.

GeoMeanTree build_geo_mean_tree(ConvexProgram& prog, const std::vector<int>& leaf_vars,
                                const std::vector<double>& leaf_consts,
                                const std::vector<double>& leaf_hints,
                                std::vector<double>* node_hints) {
  const int s = (int)leaf_vars.size();
  if (s < 1 || (int)leaf_consts.size() != s || (int)leaf_hints.size() != s)
    throw std::invalid_argument("geo-mean tree: inconsistent leaf arrays");
  GeoMeanTree tree;
  if (node_hints) node_hints->clear();
  if (s == 1) {
    if (leaf_vars[0] < 0)
      throw std::invalid_argument("geo-mean tree: a single leaf must be a variable");
    tree.root = leaf_vars[0];
    return tree;
  }
  int depth = 1;
  while ((1 << depth) < s) ++depth;
  tree.depth = depth;
  tree.slots = 1 << depth;

  // per-level interior values and upper bounds, leaves first
  std::vector<double> val(tree.slots, 1.0), bnd(tree.slots, 1.0);
  for (int i = 0; i < s; ++i) {
    if (leaf_vars[i] >= 0) {
      val[i] = leaf_hints[i];
      bnd[i] = prog.ub(leaf_vars[i]);
    } else {
      val[i] = leaf_consts[i];
      bnd[i] = leaf_consts[i];
    }
  }
  std::vector<std::vector<double>> lev_val(depth), lev_bnd(depth);
  for (int t = depth - 1; t >= 0; --t) {
    const int nn = 1 << t;
    lev_val[t].resize(nn);
    lev_bnd[t].resize(nn);
    for (int i = 0; i < nn; ++i) {
      lev_val[t][i] = std::sqrt(std::max(val[2 * i] * val[2 * i + 1], 0.0)) * (1.0 - 1e-9);
      lev_bnd[t][i] = std::sqrt(bnd[2 * i] * bnd[2 * i + 1]) + 1.0;
    }
    val = lev_val[t];
    bnd = lev_bnd[t];
  }

  std::vector<std::vector<int>> nvar(depth);
  for (int t = 0; t < depth; ++t) {
    nvar[t].resize(1 << t);
    for (int i = 0; i < (1 << t); ++i) {
      nvar[t][i] = prog.add_var(0.0, lev_bnd[t][i], "gm_node");
      tree.nodes.push_back(nvar[t][i]);
      if (node_hints) node_hints->push_back(lev_val[t][i]);
    }
  }
  tree.root = nvar[0][0];

  for (int t = 0; t < depth; ++t)
    for (int i = 0; i < (1 << t); ++i) {
      convex::HypCon h;
      h.tvar = nvar[t][i];
      if (t + 1 < depth) {
        h.lvar = nvar[t + 1][2 * i];
        h.rvar = nvar[t + 1][2 * i + 1];
      } else {
        const int a = 2 * i, b = 2 * i + 1;
        if (a < s && leaf_vars[a] >= 0)
          h.lvar = leaf_vars[a];
        else
          h.lconst = a < s ? leaf_consts[a] : 1.0;
        if (b < s && leaf_vars[b] >= 0)
          h.rvar = leaf_vars[b];
        else
          h.rconst = b < s ? leaf_consts[b] : 1.0;
      }
      tree.rows.push_back(prog.add_hyp(h));
    }
  return tree;
}

// ---------------------------------------------------------------------------
// Shared activity analysis: which users can be served at all, which RAUs need
// load metering, and where transmit power leaks into receiving RAUs.

namespace {

struct Activity {
  std::vector<std::vector<int>> raus;  // per DL user
  std::vector<char> excl_d, excl_u;
  std::vector<char> bh;    // per T-RAU: load rows needed
  std::vector<char> leak;  // per T-RAU: power couples into a receiving RAU
  VecD ub_rate;            // per DL user
  bool bh_any = false;
};

Activity analyze(const AssociationMap* assoc, const ChannelRealization& ch,
                 const ScenarioConfig& cfg) {
  const int L = cfg.num_tx_rau, K = cfg.num_dl_users, J = cfg.num_ul_users;
  const int M = cfg.ant_per_rau;
  Activity act;
  act.raus.assign(K, {});
  act.excl_d.assign(K, 0);
  act.excl_u.assign(J, 0);
  act.bh.assign(L, 0);
  act.leak.assign(L, 0);
  act.ub_rate = VecD::Zero(K);

  const double p_total = K > 0 ? cfg.dl_power_cap_w.sum() : 0.0;
  for (int k = 0; k < K; ++k) {
    if (assoc) {
      act.raus[k] = assoc->links_of(k);
    } else {
      act.raus[k].resize(L);
      for (int l = 0; l < L; ++l) act.raus[k][l] = l;
    }
    double h2 = 0.0;
    for (int l : act.raus[k]) h2 += ch.dl_chan.col(k).segment(l * M, M).squaredNorm();
    if (act.raus[k].empty() || h2 <= 0.0) {
      if (cfg.dl_rate_floor(k) > 0.0)
        throw std::runtime_error("association removes every serving link of a rate-floor user");
      act.excl_d[k] = 1;
      act.raus[k].clear();
      continue;
    }
    act.ub_rate(k) = std::log2(1.0 + h2 * p_total / cfg.dl_noise_w(k));
  }
  for (int j = 0; j < J; ++j) {
    const int z = ch.serving[j];
    const double h2 = ch.ul_chan[z].col(j).squaredNorm();
    if (h2 <= 0.0 || cfg.ul_power_cap_w(j) <= 0.0) {
      if (cfg.ul_rate_floor(j) > 0.0)
        throw std::runtime_error("an uplink rate-floor user has no usable channel or power");
      act.excl_u[j] = 1;
    }
  }

  bool any = false;
  for (int k = 0; k < K; ++k) any = any || !act.excl_d[k];
  for (int j = 0; j < J; ++j) any = any || !act.excl_u[j];
  if (!any) throw std::runtime_error("no user left to serve");

  if (K > 0) {
    const double ub_sum = act.ub_rate.sum();
    for (int l = 0; l < L; ++l)
      if (cfg.backhaul_cap_bps_hz(l) < ub_sum) {
        act.bh[l] = 1;
        act.bh_any = true;
      }
  }
  if (K > 0 && J > 0)
    for (int l = 0; l < L; ++l) {
      bool used = false;
      for (int k = 0; k < K && !used; ++k)
        used = !act.excl_d[k] && std::find(act.raus[k].begin(), act.raus[k].end(), l) !=
                                     act.raus[k].end();
      if (!used) continue;
      for (int j = 0; j < J; ++j)
        if (!act.excl_u[j] && ch.iri_var(l, ch.serving[j]) > 0.0) {
          act.leak[l] = 1;
          break;
        }
    }
  return act;
}

Subproblem build_subproblem(const State& st, const AssociationMap* assoc,
                            const ChannelRealization& ch, const ScenarioConfig& cfg) {
  const int L = cfg.num_tx_rau, K = cfg.num_dl_users, J = cfg.num_ul_users;
  const int M = cfg.ant_per_rau;
  const double theta = cfg.theta;

  Subproblem out;
  ConvexProgram& prog = out.prog;
  ProgramLayout& lay = out.layout;
  lay.L = L;
  lay.Z = cfg.num_rx_rau;
  lay.K = K;
  lay.J = J;
  lay.M = M;
  lay.smoothed = assoc == nullptr;

  Activity act = analyze(assoc, ch, cfg);
  lay.w_raus = act.raus;
  lay.backhaul_active = act.bh_any;
  lay.w_off.assign(K, -1);
  lay.u_off.assign(J, -1);
  lay.p_var.assign(J, -1);
  lay.chi_d.assign(K, -1);
  lay.chi_u.assign(J, -1);
  lay.mu_var.assign(K, -1);
  lay.rho_var.assign(K, -1);
  lay.rho_bar_var = Eigen::MatrixXi::Constant(L, K, -1);
  lay.beta_var = Eigen::MatrixXi::Constant(std::max(J, 1), std::max(J, 1), -1);
  lay.pt_var.assign(L, -1);
  lay.pt_bar_var = Eigen::MatrixXi::Constant(L, std::max(J, 1), -1);

  std::vector<std::pair<int, double>> seeds;
  auto seed = [&](int var, double v) { seeds.emplace_back(var, v); };

  // ---- variables ----
  const double wb = K > 0 ? std::sqrt(cfg.dl_power_cap_w.maxCoeff()) * 1.05 + 1e-6 : 1.0;
  for (int k = 0; k < K; ++k) {
    if (act.excl_d[k]) continue;
    const int nb = (int)act.raus[k].size() * M;
    lay.w_off[k] = prog.add_vars(2 * nb, -wb, wb, "w");
    BeamBlock b = w_block(lay, k);
    for (int t = 0; t < b.size(); ++t) {
      const cd v = st.w(b.cpos[t], k);
      seed(b.off + 2 * t, v.real());
      seed(b.off + 2 * t + 1, v.imag());
    }
  }
  for (int j = 0; j < J; ++j) {
    if (act.excl_u[j]) continue;
    lay.u_off[j] = prog.add_vars(2 * M, -1.05, 1.05, "u");
    for (int m = 0; m < M; ++m) {
      seed(lay.u_off[j] + 2 * m, st.u(m, j).real());
      seed(lay.u_off[j] + 2 * m + 1, st.u(m, j).imag());
    }
    lay.p_var[j] = prog.add_var(0.0, cfg.ul_power_cap_w(j), "p");
    seed(lay.p_var[j], st.p(j));
  }
  const double p_total = K > 0 ? cfg.dl_power_cap_w.sum() : 0.0;
  for (int k = 0; k < K; ++k) {
    if (act.excl_d[k]) continue;
    double h2 = 0.0;
    for (int l : act.raus[k]) h2 += ch.dl_chan.col(k).segment(l * M, M).squaredNorm();
    const double ub = 1.0 + 1.5 * h2 * p_total / cfg.dl_noise_w(k) + 10.0;
    lay.chi_d[k] = prog.add_var(1.0, ub, "chi_d");
    seed(lay.chi_d[k], st.chi_d(k));
  }
  for (int j = 0; j < J; ++j) {
    if (act.excl_u[j]) continue;
    const int z = ch.serving[j];
    const double h2 = ch.ul_chan[z].col(j).squaredNorm();
    const double ub = 1.0 + 1.5 * cfg.ul_power_cap_w(j) * h2 / cfg.ul_noise_w(z) + 10.0;
    lay.chi_u[j] = prog.add_var(1.0, ub, "chi_u");
    seed(lay.chi_u[j], st.chi_u(j));
  }
  if (act.bh_any) {
    for (int k = 0; k < K; ++k) {
      if (act.excl_d[k]) continue;
      const VecC hk = ch.dl_chan.col(k);
      double itf_ub = cfg.dl_noise_w(k);
      if (K > 1) itf_ub += hk.squaredNorm() * p_total;
      for (int j = 0; j < J; ++j)
        if (!act.excl_u[j]) itf_ub += cfg.ul_power_cap_w(j) * std::norm(ch.iui_chan(j, k));
      lay.mu_var[k] = prog.add_var(0.0, 2.0 * itf_ub + 1.0, "mu");
      seed(lay.mu_var[k], st.mu_d(k));
      lay.rho_var[k] = prog.add_var(0.0, act.ub_rate(k) + 1.0, "rho");
      seed(lay.rho_var[k], st.rho(k));
    }
    if (lay.smoothed)
      for (int l = 0; l < L; ++l) {
        if (!act.bh[l]) continue;
        for (int k = 0; k < K; ++k) {
          if (act.excl_d[k]) continue;
          lay.rho_bar_var(l, k) =
              prog.add_var(0.0, std::sqrt(cfg.backhaul_cap_bps_hz(l)) + 1.0, "rho_bar");
          seed(lay.rho_bar_var(l, k), st.rho_bar(l, k));
        }
      }
  }
  for (int j = 0; j < J; ++j) {
    if (act.excl_u[j]) continue;
    const int z = ch.serving[j];
    for (int j2 = 0; j2 < J; ++j2) {
      if (j2 == j || act.excl_u[j2]) continue;
      const double hn = ch.ul_chan[z].col(j2).norm();
      const double ub = std::sqrt(cfg.ul_power_cap_w(j2)) * hn * 1.05 + 1.0;
      lay.beta_var(j, j2) = prog.add_var(0.0, ub, "beta");
      seed(lay.beta_var(j, j2), st.beta(j, j2));
    }
  }
  for (int l = 0; l < L; ++l) {
    if (!act.leak[l]) continue;
    lay.pt_var[l] = prog.add_var(0.0, cfg.dl_power_cap_w(l), "pt");
    seed(lay.pt_var[l], st.pt(l));
    for (int j = 0; j < J; ++j) {
      if (act.excl_u[j]) continue;
      const double dvar = ch.iri_var(l, ch.serving[j]);
      if (dvar <= 0.0) continue;
      const double ub = std::sqrt(cfg.dl_power_cap_w(l) * dvar) * 1.05 + 1.0;
      lay.pt_bar_var(l, j) = prog.add_var(0.0, ub, "pt_bar");
      seed(lay.pt_bar_var(l, j), st.pt_bar(l, j));
    }
  }

  // ---- rows, in registry order ----
  auto reg = [&](RowKind kind, int a, int b) { lay.rows.push_back({kind, a, b}); };

  // per-RAU radiated power, either direct or through the split variable
  for (int l = 0; l < L; ++l) {
    std::vector<int> users;
    for (int k = 0; k < K; ++k)
      if (!act.excl_d[k] &&
          std::find(act.raus[k].begin(), act.raus[k].end(), l) != act.raus[k].end())
        users.push_back(k);
    if (users.empty()) continue;
    QuadCon qc;
    for (int k : users) add_norm_squares(qc.squares, w_block(lay, k), 1.0, l, M);
    if (lay.pt_var[l] >= 0) {
      qc.a.add(lay.pt_var[l], -1.0);
      prog.add_quad(qc);
      reg(RowKind::power_split, l, -1);
    } else {
      qc.a.c0 = -cfg.dl_power_cap_w(l);
      prog.add_quad(qc);
      reg(RowKind::rau_power, l, -1);
    }
  }

  // receive filters live on the unit ball: every row is scale-consistent in
  // (u, beta, pt_bar), so the cap costs nothing and pins the free scaling
  for (int j = 0; j < J; ++j) {
    if (act.excl_u[j]) continue;
    QuadCon qc;
    add_norm_squares(qc.squares, u_block(lay, j), 1.0, -1, M);
    qc.a.c0 = -1.0;
    prog.add_quad(qc);
    reg(RowKind::rx_norm, j, -1);
  }

  // objective tree over the per-user factors (served downlink, then uplink)
  {
    std::vector<int> leaf_vars;
    std::vector<double> leaf_consts, leaf_hints;
    lay.tree_leaf_user.clear();
    for (int k = 0; k < K; ++k) {
      if (act.excl_d[k]) continue;
      leaf_vars.push_back(lay.chi_d[k]);
      leaf_consts.push_back(1.0);
      leaf_hints.push_back(st.chi_d(k));
      lay.tree_leaf_user.push_back(k);
    }
    for (int j = 0; j < J; ++j) {
      if (act.excl_u[j]) continue;
      leaf_vars.push_back(lay.chi_u[j]);
      leaf_consts.push_back(1.0);
      leaf_hints.push_back(st.chi_u(j));
      lay.tree_leaf_user.push_back(K + j);
    }
    std::vector<double> node_hints;
    lay.tree = build_geo_mean_tree(prog, leaf_vars, leaf_consts, leaf_hints, &node_hints);
    for (size_t i = 0; i < lay.tree.nodes.size(); ++i) seed(lay.tree.nodes[i], node_hints[i]);
    while ((int)lay.tree_leaf_user.size() < lay.tree.slots) lay.tree_leaf_user.push_back(-1);
    for (size_t i = 0; i < lay.tree.rows.size(); ++i) reg(RowKind::tree, (int)i, -1);
  }
  prog.objective().affine.add(lay.tree.root, 1.0);

  // downlink factor link and rate floors
  for (int k = 0; k < K; ++k) {
    if (act.excl_d[k]) continue;
    const VecC hk = ch.dl_chan.col(k);
    const BeamBlock bk = w_block(lay, k);
    const VecC hk_own = restrict_vec(hk, bk);
    const VecC wk_own = restrict_vec(st.w.col(k), bk);
    const double chi_anchor = std::max(st.chi_d(k), 1.0 + 1e-9);

    QuadCon link;
    for (int k2 = 0; k2 < K; ++k2) {
      if (k2 == k || act.excl_d[k2]) continue;
      const BeamBlock b2 = w_block(lay, k2);
      const VecC h2 = restrict_vec(hk, b2);
      link.squares.push_back({1.0, dot_re(b2, h2)});
      link.squares.push_back({1.0, dot_im(b2, h2)});
    }
    for (int j = 0; j < J; ++j)
      if (!act.excl_u[j]) link.a.add(lay.p_var[j], std::norm(ch.iui_chan(j, k)));
    link.a.c0 += cfg.dl_noise_w(k);
    const RatioTangent g = ratio_tangent(outer(hk_own), 1.0, wk_own, chi_anchor);
    add_dot_re(link.a, bk, g.w_coef, -1.0);
    link.a.add(lay.chi_d[k], -g.chi_coef);
    link.a.c0 -= g.c0;
    prog.add_quad(link);
    reg(RowKind::dl_signal, k, -1);

    const double floor = cfg.dl_rate_floor(k);
    if (floor > 0.0) {
      const double f = std::exp2(floor) - 1.0;
      QuadCon qos;
      for (int k2 = 0; k2 < K; ++k2) {
        if (k2 == k || act.excl_d[k2]) continue;
        const BeamBlock b2 = w_block(lay, k2);
        const VecC h2 = restrict_vec(hk, b2);
        qos.squares.push_back({f, dot_re(b2, h2)});
        qos.squares.push_back({f, dot_im(b2, h2)});
      }
      for (int j = 0; j < J; ++j)
        if (!act.excl_u[j]) qos.a.add(lay.p_var[j], f * std::norm(ch.iui_chan(j, k)));
      qos.a.c0 += f * cfg.dl_noise_w(k);
      const QuadTangent s = quad_tangent(outer(hk_own), wk_own);
      add_dot_re(qos.a, bk, s.w_coef, -1.0);
      qos.a.c0 -= s.c0;
      prog.add_quad(qos);
      reg(RowKind::dl_floor, k, -1);
    }
  }

  // transmit power leaking into receiving RAUs: split power times the leak
  // variance must fit under the squared leak budget
  for (int l = 0; l < L; ++l) {
    if (!act.leak[l]) continue;
    for (int j = 0; j < J; ++j) {
      if (lay.pt_bar_var(l, j) < 0) continue;
      const double dvar = ch.iri_var(l, ch.serving[j]);
      const double an = std::max(st.pt(l), 1e-9);
      const double bn = st.pt_bar(l, j);
      QuadCon qc;
      add_norm_squares(qc.squares, u_block(lay, j), an * an * dvar, -1, M);
      qc.a.add(lay.pt_bar_var(l, j), -2.0 * an * bn);
      qc.a.add(lay.pt_var[l], bn * bn);
      prog.add_quad(qc);
      reg(RowKind::iri_product, l, j);
    }
  }

  // received cross powers between uplink users
  for (int j = 0; j < J; ++j) {
    if (act.excl_u[j]) continue;
    const int z = ch.serving[j];
    for (int j2 = 0; j2 < J; ++j2) {
      if (lay.beta_var(j, j2) < 0) continue;
      const VecC h = ch.ul_chan[z].col(j2);
      const double an = std::max(st.p(j2), 1e-9);
      const double bn = st.beta(j, j2);
      QuadCon qc;
      const BeamBlock bu = u_block(lay, j);
      qc.squares.push_back({an * an, dot_re(bu, h)});
      qc.squares.push_back({an * an, dot_im(bu, h)});
      qc.a.add(lay.beta_var(j, j2), -2.0 * an * bn);
      qc.a.add(lay.p_var[j2], bn * bn);
      prog.add_quad(qc);
      reg(RowKind::cross_product, j, j2);
    }
  }

  // uplink rate floors and factor links against the metered interference
  for (int j = 0; j < J; ++j) {
    if (act.excl_u[j]) continue;
    const int z = ch.serving[j];
    const VecC hu = ch.ul_chan[z].col(j);
    const BeamBlock bu = u_block(lay, j);
    const VecC un = st.u.col(j);
    auto metered = [&](double f) {
      QolCon qc;
      for (int j2 = 0; j2 < J; ++j2)
        if (lay.beta_var(j, j2) >= 0) {
          AffineExpr q;
          q.add(lay.beta_var(j, j2), 1.0);
          qc.squares.push_back({f, q});
        }
      for (int l = 0; l < L; ++l)
        if (lay.pt_bar_var(l, j) >= 0) {
          AffineExpr q;
          q.add(lay.pt_bar_var(l, j), 1.0);
          qc.squares.push_back({f, q});
        }
      add_norm_squares(qc.squares, bu, f * cfg.ul_noise_w(z), -1, M);
      qc.den.add(lay.p_var[j], 1.0);
      return qc;
    };

    const double floor = cfg.ul_rate_floor(j);
    if (floor > 0.0) {
      const double f = std::exp2(floor) - 1.0;
      QolCon qos = metered(f);
      const QuadTangent s = quad_tangent(outer(hu), un);
      add_dot_re(qos.a, bu, s.w_coef, -1.0);
      qos.a.c0 -= s.c0;
      prog.add_qol(qos);
      reg(RowKind::ul_floor, j, -1);
    }

    QolCon link = metered(1.0);
    const double chi_anchor = std::max(st.chi_u(j), 1.0 + 1e-9);
    const RatioTangent g = ratio_tangent(outer(hu), 1.0, un, chi_anchor);
    add_dot_re(link.a, bu, g.w_coef, -1.0);
    link.a.add(lay.chi_u[j], -g.chi_coef);
    link.a.c0 -= g.c0;
    prog.add_qol(link);
    reg(RowKind::ul_signal, j, -1);
  }

  // backhaul load: soft metered splits in stage 1, hard per-RAU sums later
  if (act.bh_any && lay.smoothed) {
    for (int l = 0; l < L; ++l) {
      if (!act.bh[l]) continue;
      QuadCon cap;
      for (int k = 0; k < K; ++k)
        if (lay.rho_bar_var(l, k) >= 0) {
          AffineExpr q;
          q.add(lay.rho_bar_var(l, k), 1.0);
          cap.squares.push_back({1.0, q});
        }
      cap.a.c0 = -cfg.backhaul_cap_bps_hz(l);
      prog.add_quad(cap);
      reg(RowKind::backhaul_soft, l, -1);
    }
    for (int l = 0; l < L; ++l) {
      if (!act.bh[l]) continue;
      for (int k = 0; k < K; ++k) {
        if (lay.rho_bar_var(l, k) < 0) continue;
        const double xn = st.w.col(k).segment(l * M, M).squaredNorm();
        const IndicatorTangent v = indicator_tangent(xn, theta);
        const double an = std::max(st.rho(k), 1e-9);
        const double bn = st.rho_bar(l, k);
        QuadCon qc;
        add_norm_squares(qc.squares, w_block(lay, k), an * an * v.slope, l, M);
        qc.a.c0 += an * an * v.c0;
        qc.a.add(lay.rho_bar_var(l, k), -2.0 * an * bn);
        qc.a.add(lay.rho_var[k], bn * bn);
        prog.add_quad(qc);
        reg(RowKind::meter_product, l, k);
      }
    }
  }
  if (act.bh_any) {
    for (int k = 0; k < K; ++k) {
      if (lay.mu_var[k] < 0) continue;
      const VecC hk = ch.dl_chan.col(k);
      LinearCon lc;
      lc.a.add(lay.mu_var[k], 1.0);
      for (int k2 = 0; k2 < K; ++k2) {
        if (k2 == k || act.excl_d[k2]) continue;
        const BeamBlock b2 = w_block(lay, k2);
        const VecC h2 = restrict_vec(hk, b2);
        const QuadTangent s = quad_tangent(outer(h2), restrict_vec(st.w.col(k2), b2));
        add_dot_re(lc.a, b2, s.w_coef, -1.0);
        lc.a.c0 -= s.c0;
      }
      for (int j = 0; j < J; ++j)
        if (!act.excl_u[j]) lc.a.add(lay.p_var[j], -std::norm(ch.iui_chan(j, k)));
      lc.a.c0 -= cfg.dl_noise_w(k);
      prog.add_linear(lc);
      reg(RowKind::itf_floor, k, -1);
    }
    for (int k = 0; k < K; ++k) {
      if (lay.mu_var[k] < 0) continue;
      const VecC hk = ch.dl_chan.col(k);
      const BeamBlock bk = w_block(lay, k);
      const VecC hk_own = restrict_vec(hk, bk);
      QolCon qc;
      qc.squares.push_back({1.0, dot_re(bk, hk_own)});
      qc.squares.push_back({1.0, dot_im(bk, hk_own)});
      qc.den.add(lay.mu_var[k], 1.0);
      const double rn = std::max(st.rho(k), 1e-9);
      const double c = std::exp2(rn);
      qc.a.add(lay.rho_var[k], -c * kLn2);
      qc.a.c0 = -c * (1.0 - kLn2 * rn) + 1.0;
      prog.add_qol(qc);
      reg(RowKind::rate_link, k, -1);
    }
    if (!lay.smoothed)
      for (int l = 0; l < L; ++l) {
        if (!act.bh[l]) continue;
        LinearCon lc;
        for (int k = 0; k < K; ++k) {
          if (act.excl_d[k] || lay.rho_var[k] < 0) continue;
          if (std::find(act.raus[k].begin(), act.raus[k].end(), l) == act.raus[k].end()) continue;
          lc.a.add(lay.rho_var[k], 1.0);
        }
        lc.a.c0 = -cfg.backhaul_cap_bps_hz(l);
        prog.add_linear(lc);
        reg(RowKind::backhaul_hard, l, -1);
      }
  }

  if ((int)lay.rows.size() != prog.num_cons())
    throw std::logic_error("subproblem row registry out of sync");

  out.x0 = VecD::Zero(prog.num_vars());
  for (const auto& [var, v] : seeds) out.x0[var] = v;
  return out;
}

}  // namespace

State ProgramLayout::unpack(const VecD& x) const {
  State s;
  s.w = MatC::Zero(M * L, K);
  s.u = MatC::Zero(M, J);
  s.p = VecD::Zero(J);
  s.chi_d = VecD::Ones(K);
  s.chi_u = VecD::Ones(J);
  s.mu_d = VecD::Zero(K);
  s.rho = VecD::Zero(K);
  s.rho_bar = MatD::Zero(L, K);
  s.beta = MatD::Zero(J, J);
  s.pt = VecD::Zero(L);
  s.pt_bar = MatD::Zero(L, J);
  for (int k = 0; k < K; ++k) {
    if (w_off[k] < 0) continue;
    const BeamBlock b = w_block(*this, k);
    for (int t = 0; t < b.size(); ++t)
      s.w(b.cpos[t], k) = cd(x[b.off + 2 * t], x[b.off + 2 * t + 1]);
    if (chi_d[k] >= 0) s.chi_d(k) = x[chi_d[k]];
    if (mu_var[k] >= 0) s.mu_d(k) = x[mu_var[k]];
    if (rho_var[k] >= 0) s.rho(k) = x[rho_var[k]];
    for (int l = 0; l < L; ++l)
      if (rho_bar_var(l, k) >= 0) s.rho_bar(l, k) = x[rho_bar_var(l, k)];
  }
  for (int j = 0; j < J; ++j) {
    if (u_off[j] < 0) continue;
    for (int m = 0; m < M; ++m) s.u(m, j) = cd(x[u_off[j] + 2 * m], x[u_off[j] + 2 * m + 1]);
    s.p(j) = x[p_var[j]];
    if (chi_u[j] >= 0) s.chi_u(j) = x[chi_u[j]];
    for (int j2 = 0; j2 < J; ++j2)
      if (beta_var(j, j2) >= 0) s.beta(j, j2) = x[beta_var(j, j2)];
  }
  for (int l = 0; l < L; ++l) {
    if (pt_var[l] >= 0) s.pt(l) = x[pt_var[l]];
    for (int j = 0; j < J; ++j)
      if (pt_bar_var(l, j) >= 0) s.pt_bar(l, j) = x[pt_bar_var(l, j)];
  }
  return s;
}

Subproblem build_stage1_subproblem(const State& state, const ChannelRealization& ch,
                                   const ScenarioConfig& cfg) {
  return build_subproblem(state, nullptr, ch, cfg);
}

Subproblem build_stage2_subproblem(const State& state, const AssociationMap& assoc,
                                   const ChannelRealization& ch, const ScenarioConfig& cfg) {
  return build_subproblem(state, &assoc, ch, cfg);
}

// ---------------------------------------------------------------------------
// Strictly interior auxiliary rebuild at a fixed design.

namespace {

State assemble_state(const MatC& w, const MatC& u, const VecD& p, const ChannelRealization& ch,
                     const ScenarioConfig& cfg) {
  const int L = cfg.num_tx_rau, K = cfg.num_dl_users, J = cfg.num_ul_users;
  const int M = cfg.ant_per_rau;
  State st;
  st.w = w;
  st.u = u;
  st.p = p;
  st.chi_d = VecD::Ones(K);
  st.chi_u = VecD::Ones(J);
  st.mu_d = VecD::Zero(K);
  st.rho = VecD::Zero(K);
  st.rho_bar = MatD::Zero(L, K);
  st.beta = MatD::Zero(J, J);
  st.pt = VecD::Zero(L);
  st.pt_bar = MatD::Zero(L, J);

  for (int k = 0; k < K; ++k) {
    const VecC hk = ch.dl_chan.col(k);
    const double sig = std::norm(hk.dot(w.col(k)));
    double itf = cfg.dl_noise_w(k);
    for (int k2 = 0; k2 < K; ++k2)
      if (k2 != k) itf += std::norm(hk.dot(w.col(k2)));
    for (int j = 0; j < J; ++j) itf += p(j) * std::norm(ch.iui_chan(j, k));
    const double s = sig / itf;
    st.chi_d(k) = 1.0 + std::max(s >= 2.0 * kEps ? s * (1.0 - kEps) : 0.5 * s, 1e-12);
    st.mu_d(k) = itf * (1.0 - kEps);
    st.rho(k) = std::log2(1.0 + sig / st.mu_d(k)) * (1.0 + kEps) + kTiny;
    for (int l = 0; l < L; ++l) {
      const double x = w.col(k).segment(l * M, M).squaredNorm();
      st.rho_bar(l, k) =
          std::sqrt(std::max(smoothed_indicator(x, cfg.theta) * st.rho(k), 0.0)) * (1.0 + kEps) +
          kTiny;
    }
  }
  for (int l = 0; l < L; ++l) {
    double used = 0.0;
    for (int k = 0; k < K; ++k) used += w.col(k).segment(l * M, M).squaredNorm();
    const double cap = cfg.dl_power_cap_w(l);
    const double room = cap - used;
    if (room > 0.0)
      st.pt(l) = used + std::min(0.5 * room, std::max(1e-12, 1e-3 * cap));
    else
      st.pt(l) = cap;  // repaired by the next subproblem's interior search
    for (int j = 0; j < J; ++j) {
      const double dvar = ch.iri_var(l, ch.serving[j]);
      if (dvar <= 0.0) continue;
      st.pt_bar(l, j) = std::sqrt(st.pt(l) * dvar) * u.col(j).norm() * (1.0 + kEps) + kTiny;
    }
  }
  for (int j = 0; j < J; ++j) {
    const int z = ch.serving[j];
    for (int j2 = 0; j2 < J; ++j2) {
      if (j2 == j) continue;
      st.beta(j, j2) =
          std::sqrt(std::max(p(j2), 0.0)) * std::abs(u.col(j).dot(ch.ul_chan[z].col(j2))) *
              (1.0 + kEps) +
          kTiny;
    }
    double num = cfg.ul_noise_w(z) * u.col(j).squaredNorm();
    for (int j2 = 0; j2 < J; ++j2)
      if (j2 != j) num += st.beta(j, j2) * st.beta(j, j2);
    for (int l = 0; l < L; ++l) num += st.pt_bar(l, j) * st.pt_bar(l, j);
    const double sig = std::norm(u.col(j).dot(ch.ul_chan[z].col(j)));
    if (num > 0.0)
      st.chi_u(j) = 1.0 + std::max(p(j) * sig / num * (1.0 - kEps), 1e-12);
  }
  return st;
}

double dl_sinr(const MatC& w, const VecD& p, const ChannelRealization& ch,
               const ScenarioConfig& cfg, int k) {
  const VecC hk = ch.dl_chan.col(k);
  const double sig = std::norm(hk.dot(w.col(k)));
  double itf = cfg.dl_noise_w(k);
  for (int k2 = 0; k2 < (int)w.cols(); ++k2)
    if (k2 != k) itf += std::norm(hk.dot(w.col(k2)));
  for (int j = 0; j < (int)p.size(); ++j) itf += p(j) * std::norm(ch.iui_chan(j, k));
  return sig / itf;
}

double ul_sinr(const MatC& w, const MatC& u, const VecD& p, const ChannelRealization& ch,
               const ScenarioConfig& cfg, int j) {
  const int z = ch.serving[j];
  const int M = cfg.ant_per_rau;
  const VecC uj = u.col(j);
  if (uj.squaredNorm() <= 0.0) return 0.0;
  double iri = 0.0;
  for (int l = 0; l < cfg.num_tx_rau; ++l) {
    double pw = 0.0;
    for (int k = 0; k < (int)w.cols(); ++k) pw += w.col(k).segment(l * M, M).squaredNorm();
    iri += pw * ch.iri_var(l, z);
  }
  double itf = (cfg.ul_noise_w(z) + iri) * uj.squaredNorm();
  for (int j2 = 0; j2 < (int)p.size(); ++j2)
    if (j2 != j) itf += p(j2) * std::norm(uj.dot(ch.ul_chan[z].col(j2)));
  const double sig = p(j) * std::norm(uj.dot(ch.ul_chan[z].col(j)));
  return sig / itf;
}

}  // namespace

StartResult find_feasible_start(const ChannelRealization& ch, const ScenarioConfig& cfg) {
  cfg.validate(true);
  const int L = cfg.num_tx_rau, K = cfg.num_dl_users, J = cfg.num_ul_users;
  const int M = cfg.ant_per_rau, n = M * L;
  StartResult sr;

  // maximum-ratio start at 95% caps, equal split across users
  MatC w = MatC::Zero(n, K);
  for (int k = 0; k < K; ++k)
    for (int l = 0; l < L; ++l) {
      const VecC dir = ch.dl_chan.col(k).segment(l * M, M);
      if (dir.norm() > 0.0)
        w.col(k).segment(l * M, M) = dir * (std::sqrt(0.95 * cfg.dl_power_cap_w(l) / K) / dir.norm());
    }
  VecD p = VecD::Zero(J);
  for (int j = 0; j < J; ++j) p(j) = 0.5 * std::max(cfg.ul_power_cap_w(j), 0.0);

  auto receivers = [&](const MatC& beams, const VecD& powers) {
    ReceiveDesign rx = mmse_all(ch, TransmitDesign{beams, powers}, cfg);
    MatC u = MatC::Zero(M, J);
    for (int j = 0; j < J; ++j) {
      VecC c = rx.combiners.col(j);
      if (c.norm() > 1e-12)
        u.col(j) = 0.9 * c / c.norm();
      else {
        const VecC h = ch.ul_chan[ch.serving[j]].col(j);
        if (h.norm() > 0.0) u.col(j) = 0.9 * h / h.norm();
      }
    }
    return u;
  };
  MatC u = receivers(w, p);

  auto margins_ok = [&](const MatC& beams, const MatC& filt, const VecD& powers) {
    for (int k = 0; k < K; ++k) {
      const double fl = cfg.dl_rate_floor(k);
      if (fl > 0.0 && dl_sinr(beams, powers, ch, cfg, k) <
                          (std::exp2(fl) - 1.0) * (1.0 + 5e-3) + 1e-12)
        return false;
    }
    for (int j = 0; j < J; ++j) {
      const double fl = cfg.ul_rate_floor(j);
      if (fl > 0.0 && ul_sinr(beams, filt, powers, ch, cfg, j) <
                          (std::exp2(fl) - 1.0) * (1.0 + 5e-3) + 1e-12)
        return false;
    }
    return true;
  };

  // receiver-fixed floor repair: power rows hard, floor rows relaxed
  if (!margins_ok(w, u, p)) {
    ConvexProgram prog;
    const double wb = K > 0 ? std::sqrt(cfg.dl_power_cap_w.maxCoeff()) * 1.05 + 1e-6 : 1.0;
    std::vector<int> woff(K, -1), pvar(J, -1);
    for (int k = 0; k < K; ++k) woff[k] = prog.add_vars(2 * n, -wb, wb, "w");
    for (int j = 0; j < J; ++j)
      if (cfg.ul_power_cap_w(j) > 0.0) pvar[j] = prog.add_var(0.0, cfg.ul_power_cap_w(j), "p");

    auto wblk = [&](int k) {
      BeamBlock b;
      b.off = woff[k];
      for (int i = 0; i < n; ++i) b.cpos.push_back(i);
      return b;
    };
    for (int l = 0; l < L; ++l) {
      QuadCon qc;
      for (int k = 0; k < K; ++k) add_norm_squares(qc.squares, wblk(k), 1.0, l, M);
      qc.a.c0 = -0.99 * cfg.dl_power_cap_w(l);
      prog.add_quad(qc);
    }
    std::vector<int> relax;
    std::vector<std::pair<bool, int>> floor_rows;  // (is_downlink, user)
    for (int k = 0; k < K; ++k) {
      const double fl = cfg.dl_rate_floor(k);
      if (fl <= 0.0) continue;
      const double f = (std::exp2(fl) - 1.0) * (1.0 + 1e-2);
      const VecC hk = ch.dl_chan.col(k);
      QuadCon qc;
      for (int k2 = 0; k2 < K; ++k2) {
        if (k2 == k) continue;
        qc.squares.push_back({f, dot_re(wblk(k2), hk)});
        qc.squares.push_back({f, dot_im(wblk(k2), hk)});
      }
      for (int j = 0; j < J; ++j)
        if (pvar[j] >= 0) qc.a.add(pvar[j], f * std::norm(ch.iui_chan(j, k)));
      qc.a.c0 += f * cfg.dl_noise_w(k);
      const QuadTangent s = quad_tangent(outer(hk), w.col(k));
      add_dot_re(qc.a, wblk(k), s.w_coef, -1.0);
      qc.a.c0 -= s.c0;
      relax.push_back(prog.add_quad(qc));
      floor_rows.emplace_back(true, k);
    }
    for (int j = 0; j < J; ++j) {
      const double fl = cfg.ul_rate_floor(j);
      if (fl <= 0.0) continue;
      const double f = (std::exp2(fl) - 1.0) * (1.0 + 1e-2);
      const int z = ch.serving[j];
      const VecC uj = u.col(j);
      QuadCon qc;
      for (int l = 0; l < L; ++l) {
        const double dvar = ch.iri_var(l, z);
        if (dvar <= 0.0) continue;
        for (int k = 0; k < K; ++k)
          add_norm_squares(qc.squares, wblk(k), f * dvar * uj.squaredNorm(), l, M);
      }
      qc.a.c0 += f * cfg.ul_noise_w(z) * uj.squaredNorm();
      for (int j2 = 0; j2 < J; ++j2) {
        if (j2 == j || pvar[j2] < 0) continue;
        qc.a.add(pvar[j2], f * std::norm(uj.dot(ch.ul_chan[z].col(j2))));
      }
      const double sig = std::norm(uj.dot(ch.ul_chan[z].col(j)));
      if (pvar[j] >= 0 && sig > 0.0)
        qc.a.add(pvar[j], -sig);
      else
        qc.a.c0 += 1.0;  // no usable channel or power: row cannot be met
      relax.push_back(prog.add_quad(qc));
      floor_rows.emplace_back(false, j);
    }

    VecD x0 = VecD::Zero(prog.num_vars());
    for (int k = 0; k < K; ++k)
      for (int i = 0; i < n; ++i) {
        x0[woff[k] + 2 * i] = w(i, k).real();
        x0[woff[k] + 2 * i + 1] = w(i, k).imag();
      }
    for (int j = 0; j < J; ++j)
      if (pvar[j] >= 0) x0[pvar[j]] = p(j);

    convex::SolveOptions kopts;
    auto ph = convex::find_interior(prog, x0, relax, kopts);
    if (!ph.feasible) {
      sr.message = "rate floors unattainable within the power budget";
      for (size_t i = 0; i < relax.size(); ++i)
        if (prog.eval_constraint(relax[i], ph.x) >= -1e-12) {
          if (floor_rows[i].first)
            sr.dl_violators.push_back(floor_rows[i].second);
          else
            sr.ul_violators.push_back(floor_rows[i].second);
        }
      return sr;
    }
    for (int k = 0; k < K; ++k)
      for (int i = 0; i < n; ++i)
        w(i, k) = cd(ph.x[woff[k] + 2 * i], ph.x[woff[k] + 2 * i + 1]);
    for (int j = 0; j < J; ++j)
      if (pvar[j] >= 0) p(j) = ph.x[pvar[j]];
    u = receivers(w, p);
  }

  // soft backhaul overload: scale the beams back uniformly (the metered load
  // is monotone in the scale), then re-check the floors
  if (K > 0) {
    auto load_of = [&](const MatC& beams, int l) {
      double load = 0.0;
      for (int k = 0; k < K; ++k) {
        const double s = dl_sinr(beams, p, ch, cfg, k);
        const double rhat = std::log2(1.0 + s / (1.0 - kEps)) * (1.0 + kEps) + kTiny;
        load += smoothed_indicator(beams.col(k).segment(l * M, M).squaredNorm(), cfg.theta) * rhat;
      }
      return load;
    };
    auto fits = [&](const MatC& beams) {
      for (int l = 0; l < L; ++l)
        if (load_of(beams, l) > 0.90 * cfg.backhaul_cap_bps_hz(l)) return false;
      return true;
    };
    if (!fits(w)) {
      double lo = 0.0, hi = 1.0;
      for (int it = 0; it < 40; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (fits(mid * w))
          lo = mid;
        else
          hi = mid;
      }
      w *= lo;
      u = receivers(w, p);
      if (!margins_ok(w, u, p)) {
        sr.message = "rate floors unattainable within the power and backhaul budgets";
        for (int k = 0; k < K; ++k)
          if (cfg.dl_rate_floor(k) > 0.0 &&
              dl_sinr(w, p, ch, cfg, k) < (std::exp2(cfg.dl_rate_floor(k)) - 1.0) * (1.0 + 5e-3))
            sr.dl_violators.push_back(k);
        for (int j = 0; j < J; ++j)
          if (cfg.ul_rate_floor(j) > 0.0 &&
              ul_sinr(w, u, p, ch, cfg, j) <
                  (std::exp2(cfg.ul_rate_floor(j)) - 1.0) * (1.0 + 5e-3))
            sr.ul_violators.push_back(j);
        return sr;
      }
    }
  }

  sr.state = assemble_state(w, u, p, ch, cfg);
  return sr;
}

// ---------------------------------------------------------------------------
// Exact-problem stationarity from subproblem multipliers.

double stationarity_residual(const Subproblem& sub, const convex::SolveReport& rep,
                             const ChannelRealization& ch, const ScenarioConfig& cfg) {
  const ProgramLayout& lay = sub.layout;
  const ConvexProgram& prog = sub.prog;
  const VecD& x = rep.x;
  const int L = lay.L, K = lay.K, J = lay.J, M = lay.M;
  VecD r = VecD::Zero(prog.num_vars());
  r[lay.tree.root] += 1.0;

  auto sq_grad = [&](const AffineExpr& q, double lambda, double scale) {
    // accumulate lambda * scale * grad(q(x)^2) into r with sign -lambda
    q.add_gradient(r, -lambda * scale * 2.0 * q.eval(x));
  };

  for (int i = 0; i < (int)lay.rows.size(); ++i) {
    const double lam = rep.ineq_mult[i];
    if (lam == 0.0) continue;
    const RowRef& ref = lay.rows[i];
    switch (ref.kind) {
      case RowKind::rau_power:
      case RowKind::power_split:
      case RowKind::rx_norm:
      case RowKind::tree:
      case RowKind::backhaul_soft:
      case RowKind::backhaul_hard: {
        // these rows are exact as written
        r.noalias() -= lam * prog.constraint_gradient(i, x);
        break;
      }
      case RowKind::dl_signal:
      case RowKind::dl_floor: {
        const int k = ref.a;
        const VecC hk = ch.dl_chan.col(k);
        const BeamBlock bk = w_block(lay, k);
        const VecC hk_own = restrict_vec(hk, bk);
        const bool link = ref.kind == RowKind::dl_signal;
        const double f = link ? 1.0 : std::exp2(cfg.dl_rate_floor(k)) - 1.0;
        for (int k2 = 0; k2 < K; ++k2) {
          if (k2 == k || lay.w_off[k2] < 0) continue;
          const BeamBlock b2 = w_block(lay, k2);
          const VecC h2 = restrict_vec(hk, b2);
          sq_grad(dot_re(b2, h2), lam, f);
          sq_grad(dot_im(b2, h2), lam, f);
        }
        for (int j = 0; j < J; ++j)
          if (lay.p_var[j] >= 0) r[lay.p_var[j]] -= lam * f * std::norm(ch.iui_chan(j, k));
        const AffineExpr qre = dot_re(bk, hk_own), qim = dot_im(bk, hk_own);
        const double sval = qre.eval(x) * qre.eval(x) + qim.eval(x) * qim.eval(x);
        if (link) {
          const double den = std::max(x[lay.chi_d[k]] - 1.0, 1e-12);
          qre.add_gradient(r, lam * 2.0 * qre.eval(x) / den);
          qim.add_gradient(r, lam * 2.0 * qim.eval(x) / den);
          r[lay.chi_d[k]] -= lam * sval / (den * den);
        } else {
          qre.add_gradient(r, lam * 2.0 * qre.eval(x));
          qim.add_gradient(r, lam * 2.0 * qim.eval(x));
        }
        break;
      }
      case RowKind::iri_product: {
        const int l = ref.a, j = ref.b;
        const double dvar = ch.iri_var(l, ch.serving[j]);
        const BeamBlock bu = u_block(lay, j);
        double un2 = 0.0;
        for (int t = 0; t < bu.size(); ++t) {
          const double ure = x[bu.off + 2 * t], uim = x[bu.off + 2 * t + 1];
          un2 += ure * ure + uim * uim;
        }
        const double pt = x[lay.pt_var[l]], pb = x[lay.pt_bar_var(l, j)];
        r[lay.pt_var[l]] -= lam * dvar * un2;
        for (int t = 0; t < 2 * bu.size(); ++t)
          r[bu.off + t] -= lam * pt * dvar * 2.0 * x[bu.off + t];
        r[lay.pt_bar_var(l, j)] += lam * 2.0 * pb;
        break;
      }
      case RowKind::cross_product: {
        const int j = ref.a, j2 = ref.b;
        const VecC h = ch.ul_chan[ch.serving[j]].col(j2);
        const BeamBlock bu = u_block(lay, j);
        const AffineExpr qre = dot_re(bu, h), qim = dot_im(bu, h);
        const double d2 = qre.eval(x) * qre.eval(x) + qim.eval(x) * qim.eval(x);
        const double pj2 = x[lay.p_var[j2]];
        r[lay.p_var[j2]] -= lam * d2;
        qre.add_gradient(r, -lam * pj2 * 2.0 * qre.eval(x));
        qim.add_gradient(r, -lam * pj2 * 2.0 * qim.eval(x));
        r[lay.beta_var(j, j2)] += lam * 2.0 * x[lay.beta_var(j, j2)];
        break;
      }
      case RowKind::ul_floor:
      case RowKind::ul_signal: {
        const int j = ref.a;
        const int z = ch.serving[j];
        const VecC hu = ch.ul_chan[z].col(j);
        const BeamBlock bu = u_block(lay, j);
        const bool link = ref.kind == RowKind::ul_signal;
        const double f = link ? 1.0 : std::exp2(cfg.ul_rate_floor(j)) - 1.0;
        const double pj = x[lay.p_var[j]];
        double num = 0.0;
        for (int j2 = 0; j2 < J; ++j2)
          if (lay.beta_var(j, j2) >= 0) {
            const double b = x[lay.beta_var(j, j2)];
            num += b * b;
            r[lay.beta_var(j, j2)] -= lam * f * 2.0 * b / pj;
          }
        for (int l = 0; l < L; ++l)
          if (lay.pt_bar_var(l, j) >= 0) {
            const double b = x[lay.pt_bar_var(l, j)];
            num += b * b;
            r[lay.pt_bar_var(l, j)] -= lam * f * 2.0 * b / pj;
          }
        double un2 = 0.0;
        for (int t = 0; t < 2 * bu.size(); ++t) {
          un2 += x[bu.off + t] * x[bu.off + t];
          r[bu.off + t] -= lam * f * cfg.ul_noise_w(z) * 2.0 * x[bu.off + t] / pj;
        }
        num += cfg.ul_noise_w(z) * un2;
        r[lay.p_var[j]] += lam * f * num / (pj * pj);
        const AffineExpr qre = dot_re(bu, hu), qim = dot_im(bu, hu);
        const double sval = qre.eval(x) * qre.eval(x) + qim.eval(x) * qim.eval(x);
        if (link) {
          const double den = std::max(x[lay.chi_u[j]] - 1.0, 1e-12);
          qre.add_gradient(r, lam * 2.0 * qre.eval(x) / den);
          qim.add_gradient(r, lam * 2.0 * qim.eval(x) / den);
          r[lay.chi_u[j]] -= lam * sval / (den * den);
        } else {
          qre.add_gradient(r, lam * 2.0 * qre.eval(x));
          qim.add_gradient(r, lam * 2.0 * qim.eval(x));
        }
        break;
      }
      case RowKind::meter_product: {
        const int l = ref.a, k = ref.b;
        const BeamBlock bk = w_block(lay, k);
        double xlk = 0.0;
        std::vector<int> vars;
        for (int t = 0; t < bk.size(); ++t) {
          if (bk.cpos[t] / M != l) continue;
          vars.push_back(bk.off + 2 * t);
          vars.push_back(bk.off + 2 * t + 1);
        }
        for (int v : vars) xlk += x[v] * x[v];
        const double rho = x[lay.rho_var[k]];
        const double e = std::exp(-cfg.theta * xlk);
        for (int v : vars) r[v] -= lam * rho * cfg.theta * e * 2.0 * x[v];
        r[lay.rho_var[k]] -= lam * (1.0 - e);
        r[lay.rho_bar_var(l, k)] += lam * 2.0 * x[lay.rho_bar_var(l, k)];
        break;
      }
      case RowKind::itf_floor: {
        const int k = ref.a;
        const VecC hk = ch.dl_chan.col(k);
        r[lay.mu_var[k]] -= lam;
        for (int k2 = 0; k2 < K; ++k2) {
          if (k2 == k || lay.w_off[k2] < 0) continue;
          const BeamBlock b2 = w_block(lay, k2);
          const VecC h2 = restrict_vec(hk, b2);
          sq_grad(dot_re(b2, h2), -lam, 1.0);
          sq_grad(dot_im(b2, h2), -lam, 1.0);
        }
        for (int j = 0; j < J; ++j)
          if (lay.p_var[j] >= 0) r[lay.p_var[j]] += lam * std::norm(ch.iui_chan(j, k));
        break;
      }
      case RowKind::rate_link: {
        const int k = ref.a;
        const VecC hk = ch.dl_chan.col(k);
        const BeamBlock bk = w_block(lay, k);
        const VecC hk_own = restrict_vec(hk, bk);
        const AffineExpr qre = dot_re(bk, hk_own), qim = dot_im(bk, hk_own);
        const double sval = qre.eval(x) * qre.eval(x) + qim.eval(x) * qim.eval(x);
        const double mu = x[lay.mu_var[k]];
        qre.add_gradient(r, -lam * 2.0 * qre.eval(x) / mu);
        qim.add_gradient(r, -lam * 2.0 * qim.eval(x) / mu);
        r[lay.mu_var[k]] += lam * sval / (mu * mu);
        r[lay.rho_var[k]] += lam * kLn2 * std::exp2(x[lay.rho_var[k]]);
        break;
      }
    }
  }
  r += rep.box_lo_mult;
  r -= rep.box_hi_mult;
  return r.lpNorm<Eigen::Infinity>();
}

// ---------------------------------------------------------------------------
// Debug re-verification of the surrogate bounds at the current anchors.

namespace {

void verify_surrogates(const State& st, const ChannelRealization& ch, const ScenarioConfig& cfg,
                       std::mt19937_64& gen) {
  std::normal_distribution<double> nd;
  std::uniform_real_distribution<double> ud(0.0, 2.0);
  const int K = cfg.num_dl_users, J = cfg.num_ul_users;
  auto rand_vec = [&](int m) {
    VecC v(m);
    for (int i = 0; i < m; ++i) v(i) = cd(nd(gen), nd(gen));
    return v;
  };
  for (int k = 0; k < K; ++k) {
    const VecC h = ch.dl_chan.col(k);
    const MatC a = outer(h);
    const VecC wn = st.w.col(k);
    const double chin = std::max(st.chi_d(k), 1.0 + 1e-9);
    const RatioTangent g = ratio_tangent(a, 1.0, wn, chin);
    const QuadTangent s = quad_tangent(a, wn);
    for (int t = 0; t < 4; ++t) {
      const VecC wt = wn + 0.3 * rand_vec((int)wn.size());
      const double chit = 1.0 + (chin - 1.0) * ud(gen) + 1e-6;
      const double exact = (wt.dot(a * wt)).real();
      if (g.eval(wt, chit) > exact / (chit - 1.0) + 1e-9 * std::max(1.0, exact))
        throw std::logic_error("ratio tangent exceeded the exact ratio");
      if (s.eval(wt) > exact + 1e-9 * std::max(1.0, exact))
        throw std::logic_error("quadratic tangent exceeded the exact quadratic");
    }
    for (int l = 0; l < cfg.num_tx_rau; ++l) {
      const double xn = wn.segment(l * cfg.ant_per_rau, cfg.ant_per_rau).squaredNorm();
      const IndicatorTangent v = indicator_tangent(xn, cfg.theta);
      for (int t = 0; t < 4; ++t) {
        const double xt = xn * ud(gen) + 1e-9;
        if (v.eval(xt) < smoothed_indicator(xt, cfg.theta) - 1e-9)
          throw std::logic_error("activity tangent fell below the smoothed indicator");
      }
    }
  }
  for (int j = 0; j < J; ++j) {
    for (int t = 0; t < 4; ++t) {
      const double an = 0.1 + ud(gen), bn = ud(gen), c = ud(gen), d2 = ud(gen);
      const double a = an * (0.5 + ud(gen)), b = bn + 0.5 * ud(gen);
      if (product_cap_lhs(a, b, c, d2, an, bn) <= 0.0 && a * c * d2 > b * b + 1e-9)
        throw std::logic_error("product cap accepted an infeasible point");
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------

Result run(const ChannelRealization& ch, const ScenarioConfig& cfg, const Options& opts) {
  cfg.validate(true);
  using clock = std::chrono::steady_clock;
  const auto wall0 = clock::now();
  const int L = cfg.num_tx_rau, K = cfg.num_dl_users, J = cfg.num_ul_users;
  const int M = cfg.ant_per_rau;

  auto norm = normalized_copy(ch, cfg);
  const ChannelRealization& nch = norm.ch;
  const ScenarioConfig& ncfg = norm.cfg;

  Result res;
  res.assoc = AssociationMap::ones(L, K);
  res.tx = zero_design(cfg);
  res.rx.combiners = MatC::Zero(M, J);
  res.rx.serving = ch.serving;
  res.chi_d = VecD::Ones(K);
  res.chi_u = VecD::Ones(J);
  if (K + J == 0) return res;

  StartResult fs = find_feasible_start(nch, ncfg);
  if (!fs.state) {
    res.trace.status = RunStatus::infeasible;
    res.trace.message = fs.message;
    return res;
  }
  State state = *fs.state;

  convex::SolveOptions kopts;
  kopts.tol = opts.kernel_tol;

  auto elapsed_ms = [&] {
    return std::chrono::duration<double, std::milli>(clock::now() - wall0).count();
  };
  auto record_design = [&](IterationRecord& rec) {
    TransmitDesign tx{state.w, state.p};
    ReceiveDesign rx{state.u, ch.serving};
    rec.exact_se = sum_rate(ch, tx, rx, cfg);
    rec.max_residual = check_feasibility(ch, tx, rx, cfg).max_resid;
  };

  std::mt19937_64 dbg_gen(0x5bca7e11ULL);
  double last_root = 0.0;
  int global_it = 0;
  int stage1_soft_rows = -1;
  bool ok = true;

  for (int stage = 1; stage <= 2 && ok; ++stage) {
    if (stage == 2) {
      if (!opts.two_stage || K == 0) break;
      MatD lp(L, K);
      for (int l = 0; l < L; ++l)
        for (int k = 0; k < K; ++k) lp(l, k) = state.w.col(k).segment(l * M, M).squaredNorm();
      res.assoc = associate_from_link_power(lp, cfg.theta, cfg.xi);
      if (res.assoc.all_on() && stage1_soft_rows == 0) break;  // nothing would change
      bool any_dl = false;
      for (int k = 0; k < K; ++k)
        if (!res.assoc.links_of(k).empty()) any_dl = true;
      if (!any_dl && J == 0) break;  // every link pruned away; keep the soft-stage design
      MatC wp = state.w;
      for (int k = 0; k < K; ++k)
        for (int l = 0; l < L; ++l)
          if (!res.assoc.on(l, k)) wp.col(k).segment(l * M, M).setZero();
      state = assemble_state(wp, state.u, state.p, nch, ncfg);
    }

    double prev_obj = std::numeric_limits<double>::quiet_NaN();
    bool stage_done = false;
    Subproblem sub;
    convex::SolveReport rep;
    for (int it = 0; it < opts.max_outer && ok; ++it) {
      // The first hard-association iterate starts from the soft-stage optimum
      // projected onto the pruned blocks; bundle re-expansions until that
      // projection loss is recovered so one recorded step spans the repair.
      const bool entry_fix = stage == 2 && it == 0;
      const int max_pass = entry_fix ? 8 : 1;
      const double recover_to = (entry_fix && !res.trace.iterations.empty())
                                    ? res.trace.iterations.back().objective
                                    : -std::numeric_limits<double>::infinity();
      double pass_root = -std::numeric_limits<double>::infinity();
      double root_now = 0.0;
      for (int pass = 0; pass < max_pass; ++pass) {
        try {
          sub = stage == 1 ? build_stage1_subproblem(state, nch, ncfg)
                           : build_stage2_subproblem(state, res.assoc, nch, ncfg);
        } catch (const std::runtime_error& e) {
          res.trace.status = RunStatus::infeasible;
          res.trace.message = e.what();
          ok = false;
          break;
        }
        if (stage == 1 && it == 0 && pass == 0) {
          stage1_soft_rows = 0;
          for (const RowRef& rr : sub.layout.rows)
            if (rr.kind == RowKind::backhaul_soft) ++stage1_soft_rows;
        }
        if (opts.debug_checks) verify_surrogates(state, nch, ncfg, dbg_gen);

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
        state = sub.layout.unpack(rep.x);
        root_now = rep.objective;

        if (pass + 1 >= max_pass) break;
        if (entry_fix && root_now >= recover_to - 1e-7) break;
        if (root_now - pass_root <= 1e-7 * std::max(1.0, std::abs(root_now))) break;
        pass_root = root_now;
      }
      if (!ok) break;

      last_root = root_now;
      IterationRecord rec;
      rec.iteration = global_it;
      rec.objective = last_root;
      record_design(rec);
      rec.time_ms = elapsed_ms();
      res.trace.iterations.push_back(rec);
      if (stage == 1) res.trace.stage1_iterations = global_it + 1;
      ++global_it;

      if (!std::isnan(prev_obj) &&
          std::abs(last_root - prev_obj) <= opts.outer_tol * std::max(1.0, std::abs(prev_obj))) {
        stage_done = true;
        break;
      }
      prev_obj = last_root;
    }
    if (!ok) break;
    if (!stage_done) {
      res.trace.status = RunStatus::max_iterations;
      std::ostringstream os;
      os << "stage " << stage << " did not converge in " << opts.max_outer << " iterations";
      res.trace.message = os.str();
      break;
    }

    // multiplier certificate against the exact problem, anchored at the
    // converged point (measurement only; the iterate is left untouched)
    if (stage == 1 && opts.kkt_certificate) {
      try {
        Subproblem cert = build_stage1_subproblem(state, nch, ncfg);
        auto ph = convex::find_interior(cert.prog, cert.x0, {}, kopts);
        if (ph.feasible) {
          convex::SolveReport crep = convex::solve(cert.prog, ph.x, kopts);
          if (crep.status == convex::SolveStatus::optimal)
            res.kkt_residual = stationarity_residual(cert, crep, nch, ncfg);
        }
      } catch (const std::runtime_error&) {
        // certificate is best-effort; the main result stands
      }
    }
  }

  res.tx = TransmitDesign{state.w, state.p};
  res.rx = ReceiveDesign{state.u, ch.serving};
  res.objective_root = last_root;
  res.exact_se = sum_rate(ch, res.tx, res.rx, cfg);
  res.chi_d = state.chi_d;
  res.chi_u = state.chi_u;
  return res;
}

}  // namespace nafd::spca
