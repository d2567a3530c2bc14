// SPDX-License-Identifier: Apache-2.0
#include "nafd/convex.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace nafd::convex {

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kCenterTol = 1e-10;  // newton decrement^2 / 2, affine invariant
constexpr double kPolishTol = 1e-14;
constexpr double kArmijo = 0.25;
}  // namespace

// ---------------------------------------------------------------------------
// program construction

int ConvexProgram::add_var(double lo, double hi, const std::string&) {
  if (!(lo < hi)) throw std::invalid_argument("add_var: lb must be below ub");
  lb_.push_back(lo);
  ub_.push_back(hi);
  return (int)lb_.size() - 1;
}

int ConvexProgram::add_vars(int n, double lo, double hi, const std::string& name) {
  int first = (int)lb_.size();
  for (int i = 0; i < n; ++i) add_var(lo, hi, name);
  return first;
}

int ConvexProgram::add_psd_block(int dim, const std::string&) {
  if (dim <= 0) throw std::invalid_argument("add_psd_block: dim must be positive");
  int off = (int)lb_.size();
  for (int i = 0; i < dim * dim; ++i) {
    lb_.push_back(-kInf);
    ub_.push_back(kInf);
  }
  psd_.push_back({off, dim});
  return off;
}

int ConvexProgram::add_linear(LinearCon c) {
  lin_.push_back(std::move(c));
  order_.emplace_back(ConKind::linear, (int)lin_.size() - 1);
  return (int)order_.size() - 1;
}

int ConvexProgram::add_quad(QuadCon c) {
  for (const auto& s : c.squares)
    if (!(s.w > 0)) throw std::invalid_argument("add_quad: weights must be positive");
  quad_.push_back(std::move(c));
  order_.emplace_back(ConKind::quad, (int)quad_.size() - 1);
  return (int)order_.size() - 1;
}

int ConvexProgram::add_qol(QolCon c) {
  for (const auto& s : c.squares)
    if (!(s.w > 0)) throw std::invalid_argument("add_qol: weights must be positive");
  qol_.push_back(std::move(c));
  order_.emplace_back(ConKind::qol, (int)qol_.size() - 1);
  return (int)order_.size() - 1;
}

int ConvexProgram::add_log(LogCon c) {
  if (!(c.c > 0)) throw std::invalid_argument("add_log: log weight must be positive");
  log_.push_back(std::move(c));
  order_.emplace_back(ConKind::log, (int)log_.size() - 1);
  return (int)order_.size() - 1;
}

int ConvexProgram::add_hyp(HypCon c) {
  if (c.tvar < 0) throw std::invalid_argument("add_hyp: tvar required");
  if (c.lvar < 0 && !(c.lconst > 0)) throw std::invalid_argument("add_hyp: lconst must be positive");
  if (c.rvar < 0 && !(c.rconst > 0)) throw std::invalid_argument("add_hyp: rconst must be positive");
  hyp_.push_back(c);
  order_.emplace_back(ConKind::hyp, (int)hyp_.size() - 1);
  return (int)order_.size() - 1;
}

void ConvexProgram::add_equality(AffineExpr e) { eqs_.push_back(std::move(e)); }

void ConvexProgram::relax_constraint(int i, int var) {
  auto [kind, k] = order_[i];
  switch (kind) {
    case ConKind::linear: lin_[k].a.add(var, -1.0); break;
    case ConKind::quad: quad_[k].a.add(var, -1.0); break;
    case ConKind::qol: qol_[k].a.add(var, -1.0); break;
    case ConKind::log: log_[k].a.add(var, -1.0); break;
    case ConKind::hyp: throw std::logic_error("hyp rows cannot be relaxed");
  }
}

// ---------------------------------------------------------------------------
// evaluation

double ConvexProgram::eval_objective(const VecD& x) const {
  double v = obj_.affine.eval(x);
  for (const auto& [c, e] : obj_.logs) {
    double a = e.eval(x);
    if (!(a > 0)) return -kInf;
    v += c * std::log(a);
  }
  for (const auto& s : obj_.neg_squares) {
    double q = s.q.eval(x);
    v -= s.w * q * q;
  }
  return v;
}

double ConvexProgram::eval_constraint(int i, const VecD& x) const {
  auto [kind, k] = order_[i];
  switch (kind) {
    case ConKind::linear:
      return lin_[k].a.eval(x);
    case ConKind::quad: {
      double g = quad_[k].a.eval(x);
      for (const auto& s : quad_[k].squares) {
        double q = s.q.eval(x);
        g += s.w * q * q;
      }
      return g;
    }
    case ConKind::qol: {
      double d = qol_[k].den.eval(x);
      double u = 0;
      for (const auto& s : qol_[k].squares) {
        double q = s.q.eval(x);
        u += s.w * q * q;
      }
      return u / d + qol_[k].a.eval(x);
    }
    case ConKind::log:
      return log_[k].a.eval(x) - log_[k].c * std::log(log_[k].arg.eval(x));
    case ConKind::hyp: {
      const auto& h = hyp_[k];
      double l = h.lvar >= 0 ? x[h.lvar] : h.lconst;
      double r = h.rvar >= 0 ? x[h.rvar] : h.rconst;
      return x[h.tvar] * x[h.tvar] - l * r;
    }
  }
  return 0;  // unreachable
}

VecD ConvexProgram::constraint_gradient(int i, const VecD& x) const {
  VecD g = VecD::Zero(num_vars());
  auto [kind, k] = order_[i];
  switch (kind) {
    case ConKind::linear:
      lin_[k].a.add_gradient(g, 1.0);
      break;
    case ConKind::quad:
      quad_[k].a.add_gradient(g, 1.0);
      for (const auto& s : quad_[k].squares) s.q.add_gradient(g, 2.0 * s.w * s.q.eval(x));
      break;
    case ConKind::qol: {
      const auto& c = qol_[k];
      double d = c.den.eval(x);
      double u = 0;
      c.a.add_gradient(g, 1.0);
      for (const auto& s : c.squares) {
        double q = s.q.eval(x);
        u += s.w * q * q;
        s.q.add_gradient(g, 2.0 * s.w * q / d);
      }
      c.den.add_gradient(g, -u / (d * d));
      break;
    }
    case ConKind::log: {
      const auto& c = log_[k];
      c.a.add_gradient(g, 1.0);
      c.arg.add_gradient(g, -c.c / c.arg.eval(x));
      break;
    }
    case ConKind::hyp: {
      const auto& h = hyp_[k];
      double l = h.lvar >= 0 ? x[h.lvar] : h.lconst;
      double r = h.rvar >= 0 ? x[h.rvar] : h.rconst;
      g[h.tvar] += 2.0 * x[h.tvar];
      if (h.lvar >= 0) g[h.lvar] -= r;
      if (h.rvar >= 0) g[h.rvar] -= l;
      break;
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// hermitian packing

int ConvexProgram::tri_index(int i, int j, int dim) {
  return i * (2 * dim - i - 1) / 2 + (j - i - 1);
}

MatC ConvexProgram::unpack_hermitian(const VecD& x, int off, int dim) {
  MatC q(dim, dim);
  for (int i = 0; i < dim; ++i) q(i, i) = x[off + i];
  for (int i = 0; i < dim; ++i)
    for (int j = i + 1; j < dim; ++j) {
      int p = off + dim + 2 * tri_index(i, j, dim);
      q(i, j) = std::complex<double>(x[p], x[p + 1]);
      q(j, i) = std::conj(q(i, j));
    }
  return q;
}

void ConvexProgram::pack_hermitian(VecD& x, int off, int dim, const MatC& q) {
  for (int i = 0; i < dim; ++i) x[off + i] = q(i, i).real();
  for (int i = 0; i < dim; ++i)
    for (int j = i + 1; j < dim; ++j) {
      std::complex<double> h = 0.5 * (q(i, j) + std::conj(q(j, i)));
      int p = off + dim + 2 * tri_index(i, j, dim);
      x[p] = h.real();
      x[p + 1] = h.imag();
    }
}

void ConvexProgram::add_trace(AffineExpr& expr, int off, int dim, const MatC& a, double scale) {
  for (int i = 0; i < dim; ++i) {
    double c = scale * a(i, i).real();
    if (c != 0.0) expr.add(off + i, c);
  }
  for (int i = 0; i < dim; ++i)
    for (int j = i + 1; j < dim; ++j) {
      std::complex<double> aij = 0.5 * (a(i, j) + std::conj(a(j, i)));
      int p = off + dim + 2 * tri_index(i, j, dim);
      if (aij.real() != 0.0) expr.add(p, 2.0 * scale * aij.real());
      if (aij.imag() != 0.0) expr.add(p + 1, 2.0 * scale * aij.imag());
    }
}

// ---------------------------------------------------------------------------
// barrier solver

namespace {

struct PsdBasisTerm {
  int a, b;
  std::complex<double> alpha;
};

// basis elements of a hermitian block in parameter order: diagonal entries,
// then an (re, im) pair per upper-triangle position.
std::vector<std::vector<PsdBasisTerm>> psd_basis(int dim) {
  std::vector<std::vector<PsdBasisTerm>> basis(dim * dim);
  for (int i = 0; i < dim; ++i) basis[i] = {{i, i, {1.0, 0.0}}};
  for (int i = 0; i < dim; ++i)
    for (int j = i + 1; j < dim; ++j) {
      int p = dim + 2 * ConvexProgram::tri_index(i, j, dim);
      basis[p] = {{i, j, {1.0, 0.0}}, {j, i, {1.0, 0.0}}};
      basis[p + 1] = {{i, j, {0.0, 1.0}}, {j, i, {0.0, -1.0}}};
    }
  return basis;
}

class BarrierSolver {
 public:
  explicit BarrierSolver(const ConvexProgram& prog) : p_(prog), n_(prog.num_vars()) {
    m_barrier_ = p_.num_cons();
    for (int i = 0; i < n_; ++i) {
      if (std::isfinite(p_.lb(i))) ++m_barrier_;
      if (std::isfinite(p_.ub(i))) ++m_barrier_;
    }
    for (const auto& b : p_.psd_blocks()) {
      m_barrier_ += b.dim;
      basis_.push_back(psd_basis(b.dim));
    }
    int cap = (int)p_.objective().logs.size() + (int)p_.objective().neg_squares.size();
    for (int i = 0; i < p_.num_cons(); ++i) {
      auto [kind, k] = p_.order(i);
      switch (kind) {
        case ConKind::linear: cap += 1; break;
        case ConKind::quad: cap += 1 + (int)p_.quad_cons()[k].squares.size(); break;
        case ConKind::qol: cap += 1 + (int)p_.qol_cons()[k].squares.size(); break;
        case ConKind::log: cap += 2; break;
        case ConKind::hyp: cap += 1; break;
      }
    }
    v_ = MatD::Zero(n_, std::max(cap, 1));
    setup_equalities();
  }

  SolveReport run(VecD x, const SolveOptions& opts, int stop_var, double stop_below);
  bool domain_ok(const VecD& x) const {
    double v;
    return eval_psi(x, 0.0, v);
  }

 private:
  void setup_equalities();
  bool eval_psi(const VecD& x, double t, double& val) const;
  void assemble(const VecD& x, double t, double& val, VecD& g, MatD& h);
  void barrier_gradient(const VecD& x, VecD& g) const;
  void objective_gradient(const VecD& x, VecD& g) const;
  void finish(SolveReport& rep, const VecD& x, double t) const;

  const ConvexProgram& p_;
  int n_ = 0;
  int m_barrier_ = 0;
  std::vector<std::vector<std::vector<PsdBasisTerm>>> basis_;
  MatD a_eq_;
  VecD b_eq_;
  MatD null_;
  bool has_eq_ = false;
  MatD v_;  // columns of the rank-one hessian factors
};

void BarrierSolver::setup_equalities() {
  const auto& eqs = p_.equalities();
  if (eqs.empty()) return;
  has_eq_ = true;
  int me = (int)eqs.size();
  a_eq_ = MatD::Zero(me, n_);
  b_eq_ = VecD::Zero(me);
  for (int i = 0; i < me; ++i) {
    for (const auto& [idx, c] : eqs[i].terms) a_eq_(i, idx) += c;
    b_eq_[i] = -eqs[i].c0;
  }
  Eigen::FullPivLU<MatD> lu(a_eq_);
  MatD kern = lu.kernel();
  if (kern.cols() == 1 && kern.col(0).lpNorm<Eigen::Infinity>() == 0.0) {
    null_ = MatD::Zero(n_, 0);
    return;
  }
  Eigen::HouseholderQR<MatD> qr(kern);
  null_ = qr.householderQ() * MatD::Identity(n_, kern.cols());
}

bool BarrierSolver::eval_psi(const VecD& x, double t, double& val) const {
  val = 0.0;
  const auto& obj = p_.objective();
  {
    double f = obj.affine.eval(x);
    for (const auto& [c, e] : obj.logs) {
      double a = e.eval(x);
      if (!(a > 0)) return false;
      f += c * std::log(a);
    }
    for (const auto& s : obj.neg_squares) {
      double q = s.q.eval(x);
      f -= s.w * q * q;
    }
    val -= t * f;
  }
  for (int i = 0; i < n_; ++i) {
    if (std::isfinite(p_.lb(i))) {
      double d = x[i] - p_.lb(i);
      if (!(d > 0)) return false;
      val -= std::log(d);
    }
    if (std::isfinite(p_.ub(i))) {
      double d = p_.ub(i) - x[i];
      if (!(d > 0)) return false;
      val -= std::log(d);
    }
  }
  for (int i = 0; i < p_.num_cons(); ++i) {
    auto [kind, k] = p_.order(i);
    double g = 0;
    switch (kind) {
      case ConKind::linear:
        g = p_.linear_cons()[k].a.eval(x);
        break;
      case ConKind::quad: {
        const auto& c = p_.quad_cons()[k];
        g = c.a.eval(x);
        for (const auto& s : c.squares) {
          double q = s.q.eval(x);
          g += s.w * q * q;
        }
        break;
      }
      case ConKind::qol: {
        const auto& c = p_.qol_cons()[k];
        double d = c.den.eval(x);
        if (!(d > 0)) return false;
        double u = 0;
        for (const auto& s : c.squares) {
          double q = s.q.eval(x);
          u += s.w * q * q;
        }
        g = u / d + c.a.eval(x);
        break;
      }
      case ConKind::log: {
        const auto& c = p_.log_cons()[k];
        double a = c.arg.eval(x);
        if (!(a > 0)) return false;
        g = c.a.eval(x) - c.c * std::log(a);
        break;
      }
      case ConKind::hyp: {
        const auto& h = p_.hyp_cons()[k];
        double l = h.lvar >= 0 ? x[h.lvar] : h.lconst;
        double r = h.rvar >= 0 ? x[h.rvar] : h.rconst;
        if (!(l > 0) || !(r > 0)) return false;
        g = x[h.tvar] * x[h.tvar] - l * r;
        break;
      }
    }
    double s = -g;
    if (!(s > 0)) return false;
    val -= std::log(s);
  }
  for (size_t b = 0; b < p_.psd_blocks().size(); ++b) {
    const auto& blk = p_.psd_blocks()[b];
    MatC q = ConvexProgram::unpack_hermitian(x, blk.offset, blk.dim);
    Eigen::LLT<MatC> llt(q);
    if (llt.info() != Eigen::Success) return false;
    double logdet = 0;
    for (int i = 0; i < blk.dim; ++i) {
      double lii = llt.matrixLLT()(i, i).real();
      if (!(lii > 0)) return false;
      logdet += std::log(lii);
    }
    val -= 2.0 * logdet;
  }
  return std::isfinite(val);
}

void BarrierSolver::assemble(const VecD& x, double t, double& val, VecD& g, MatD& h) {
  val = 0.0;
  g.setZero();
  h.setZero();
  Eigen::Index r = 0;  // rank-one factors collected in columns of v_

  const auto& obj = p_.objective();
  {
    val -= t * obj.affine.eval(x);
    obj.affine.add_gradient(g, -t);
    for (const auto& [c, e] : obj.logs) {
      double a = e.eval(x);
      val -= t * c * std::log(a);
      e.add_gradient(g, -t * c / a);
      auto col = v_.col(r++);
      col.setZero();
      e.add_gradient(col, 1.0);
      col *= std::sqrt(t * c) / a;
    }
    for (const auto& s : obj.neg_squares) {
      double q = s.q.eval(x);
      val += t * s.w * q * q;
      s.q.add_gradient(g, 2.0 * t * s.w * q);
      auto col = v_.col(r++);
      col.setZero();
      s.q.add_gradient(col, 1.0);
      col *= std::sqrt(2.0 * t * s.w);
    }
  }

  for (int i = 0; i < n_; ++i) {
    if (std::isfinite(p_.lb(i))) {
      double d = x[i] - p_.lb(i);
      val -= std::log(d);
      g[i] -= 1.0 / d;
      h(i, i) += 1.0 / (d * d);
    }
    if (std::isfinite(p_.ub(i))) {
      double d = p_.ub(i) - x[i];
      val -= std::log(d);
      g[i] += 1.0 / d;
      h(i, i) += 1.0 / (d * d);
    }
  }

  for (int i = 0; i < p_.num_cons(); ++i) {
    auto [kind, k] = p_.order(i);
    switch (kind) {
      case ConKind::linear: {
        const auto& c = p_.linear_cons()[k];
        double gv = c.a.eval(x);
        double s = -gv;
        val -= std::log(s);
        c.a.add_gradient(g, 1.0 / s);
        auto col = v_.col(r++);
        col.setZero();
        c.a.add_gradient(col, 1.0);
        col /= s;
        break;
      }
      case ConKind::quad: {
        const auto& c = p_.quad_cons()[k];
        double gv = c.a.eval(x);
        auto full = v_.col(r++);
        full.setZero();
        c.a.add_gradient(full, 1.0);
        for (const auto& sq : c.squares) {
          double q = sq.q.eval(x);
          gv += sq.w * q * q;
          sq.q.add_gradient(full, 2.0 * sq.w * q);
        }
        double s = -gv;
        val -= std::log(s);
        g += full / s;
        full /= s;
        for (const auto& sq : c.squares) {
          auto col = v_.col(r++);
          col.setZero();
          sq.q.add_gradient(col, 1.0);
          col *= std::sqrt(2.0 * sq.w / s);
        }
        break;
      }
      case ConKind::qol: {
        const auto& c = p_.qol_cons()[k];
        double d = c.den.eval(x);
        double u = 0;
        auto full = v_.col(r++);
        full.setZero();
        c.a.add_gradient(full, 1.0);
        for (const auto& sq : c.squares) {
          double q = sq.q.eval(x);
          u += sq.w * q * q;
          sq.q.add_gradient(full, 2.0 * sq.w * q / d);
        }
        c.den.add_gradient(full, -u / (d * d));
        double gv = u / d + c.a.eval(x);
        double s = -gv;
        val -= std::log(s);
        g += full / s;
        full /= s;
        for (const auto& sq : c.squares) {
          double q = sq.q.eval(x);
          auto col = v_.col(r++);
          col.setZero();
          sq.q.add_gradient(col, 1.0);
          c.den.add_gradient(col, -q / d);
          col *= std::sqrt(2.0 * sq.w / (d * s));
        }
        break;
      }
      case ConKind::log: {
        const auto& c = p_.log_cons()[k];
        double a = c.arg.eval(x);
        double gv = c.a.eval(x) - c.c * std::log(a);
        double s = -gv;
        val -= std::log(s);
        c.a.add_gradient(g, 1.0 / s);
        c.arg.add_gradient(g, -c.c / (a * s));
        auto full = v_.col(r++);
        full.setZero();
        c.a.add_gradient(full, 1.0);
        c.arg.add_gradient(full, -c.c / a);
        full /= s;
        auto col = v_.col(r++);
        col.setZero();
        c.arg.add_gradient(col, 1.0);
        col *= std::sqrt(c.c / s) / a;
        break;
      }
      case ConKind::hyp: {
        const auto& hc = p_.hyp_cons()[k];
        double l = hc.lvar >= 0 ? x[hc.lvar] : hc.lconst;
        double rr = hc.rvar >= 0 ? x[hc.rvar] : hc.rconst;
        double tv = x[hc.tvar];
        double s = l * rr - tv * tv;
        val -= std::log(s);
        g[hc.tvar] += 2.0 * tv / s;
        if (hc.lvar >= 0) g[hc.lvar] -= rr / s;
        if (hc.rvar >= 0) g[hc.rvar] -= l / s;
        auto col = v_.col(r++);
        col.setZero();
        col[hc.tvar] = 2.0 * tv;
        if (hc.lvar >= 0) col[hc.lvar] = -rr;
        if (hc.rvar >= 0) col[hc.rvar] = -l;
        col /= s;
        // exact curvature of g itself
        h(hc.tvar, hc.tvar) += 2.0 / s;
        if (hc.lvar >= 0 && hc.rvar >= 0) {
          int hi = std::max(hc.lvar, hc.rvar), lo = std::min(hc.lvar, hc.rvar);
          h(hi, lo) -= 1.0 / s;
        }
        break;
      }
    }
  }

  for (size_t b = 0; b < p_.psd_blocks().size(); ++b) {
    const auto& blk = p_.psd_blocks()[b];
    MatC q = ConvexProgram::unpack_hermitian(x, blk.offset, blk.dim);
    Eigen::LLT<MatC> llt(q);
    double logdet = 0;
    for (int i = 0; i < blk.dim; ++i) logdet += std::log(llt.matrixLLT()(i, i).real());
    val -= 2.0 * logdet;
    MatC gi = llt.solve(MatC::Identity(blk.dim, blk.dim));
    const auto& basis = basis_[b];
    int np = blk.dim * blk.dim;
    for (int pp = 0; pp < np; ++pp) {
      std::complex<double> tr = 0;
      for (const auto& tm : basis[pp]) tr += tm.alpha * gi(tm.b, tm.a);
      g[blk.offset + pp] -= tr.real();
    }
    for (int pp = 0; pp < np; ++pp)
      for (int qq = 0; qq <= pp; ++qq) {
        std::complex<double> acc = 0;
        for (const auto& tp : basis[pp])
          for (const auto& tq : basis[qq]) acc += tp.alpha * tq.alpha * gi(tp.b, tq.a) * gi(tq.b, tp.a);
        h(blk.offset + pp, blk.offset + qq) += acc.real();
      }
  }

  h.selfadjointView<Eigen::Lower>().rankUpdate(v_.leftCols(r));
}

void BarrierSolver::barrier_gradient(const VecD& x, VecD& g) const {
  g.setZero();
  for (int i = 0; i < n_; ++i) {
    if (std::isfinite(p_.lb(i))) g[i] -= 1.0 / (x[i] - p_.lb(i));
    if (std::isfinite(p_.ub(i))) g[i] += 1.0 / (p_.ub(i) - x[i]);
  }
  for (int i = 0; i < p_.num_cons(); ++i) {
    double s = -p_.eval_constraint(i, x);
    VecD gi = p_.constraint_gradient(i, x);
    g += gi / s;
  }
  for (size_t b = 0; b < p_.psd_blocks().size(); ++b) {
    const auto& blk = p_.psd_blocks()[b];
    MatC q = ConvexProgram::unpack_hermitian(x, blk.offset, blk.dim);
    Eigen::LLT<MatC> llt(q);
    MatC gi = llt.solve(MatC::Identity(blk.dim, blk.dim));
    const auto& basis = basis_[b];
    for (int pp = 0; pp < blk.dim * blk.dim; ++pp) {
      std::complex<double> tr = 0;
      for (const auto& tm : basis[pp]) tr += tm.alpha * gi(tm.b, tm.a);
      g[blk.offset + pp] -= tr.real();
    }
  }
}

void BarrierSolver::objective_gradient(const VecD& x, VecD& g) const {
  g.setZero();
  const auto& obj = p_.objective();
  obj.affine.add_gradient(g, 1.0);
  for (const auto& [c, e] : obj.logs) e.add_gradient(g, c / e.eval(x));
  for (const auto& s : obj.neg_squares) s.q.add_gradient(g, -2.0 * s.w * s.q.eval(x));
}

void BarrierSolver::finish(SolveReport& rep, const VecD& x, double t) const {
  rep.x = x;
  rep.objective = p_.eval_objective(x);
  rep.final_t = t;
  rep.r_gap = m_barrier_ / t;

  int nc = p_.num_cons();
  rep.ineq_mult = VecD::Zero(nc);
  double primal = 0;
  for (int i = 0; i < nc; ++i) {
    double gv = p_.eval_constraint(i, x);
    primal = std::max(primal, gv);
    rep.ineq_mult[i] = 1.0 / (t * std::max(-gv, 1e-300));
  }
  rep.box_lo_mult = VecD::Zero(n_);
  rep.box_hi_mult = VecD::Zero(n_);
  for (int i = 0; i < n_; ++i) {
    if (std::isfinite(p_.lb(i))) rep.box_lo_mult[i] = 1.0 / (t * std::max(x[i] - p_.lb(i), 1e-300));
    if (std::isfinite(p_.ub(i))) rep.box_hi_mult[i] = 1.0 / (t * std::max(p_.ub(i) - x[i], 1e-300));
  }
  rep.psd_mult.clear();
  for (const auto& blk : p_.psd_blocks()) {
    MatC q = ConvexProgram::unpack_hermitian(x, blk.offset, blk.dim);
    Eigen::LLT<MatC> llt(q);
    rep.psd_mult.push_back(llt.solve(MatC::Identity(blk.dim, blk.dim)) / t);
  }

  VecD gf(n_), gphi(n_);
  objective_gradient(x, gf);
  barrier_gradient(x, gphi);
  VecD r0 = gf - gphi / t;
  if (has_eq_) {
    Eigen::CompleteOrthogonalDecomposition<MatD> cod(a_eq_.transpose());
    rep.eq_mult = cod.solve(r0);
    rep.r_stat = (r0 - a_eq_.transpose() * rep.eq_mult).lpNorm<Eigen::Infinity>();
    primal = std::max(primal, (a_eq_ * x - b_eq_).lpNorm<Eigen::Infinity>());
  } else {
    rep.eq_mult = VecD();
    rep.r_stat = r0.lpNorm<Eigen::Infinity>();
  }
  rep.r_primal = std::max(primal, 0.0);
}

SolveReport BarrierSolver::run(VecD x, const SolveOptions& opts, int stop_var, double stop_below) {
  SolveReport rep;
  if ((int)x.size() != n_) throw std::invalid_argument("solve: x0 has the wrong size");

  if (has_eq_) {
    VecD resid = a_eq_ * x - b_eq_;
    if (resid.lpNorm<Eigen::Infinity>() > 1e-10 * (1.0 + b_eq_.lpNorm<Eigen::Infinity>())) {
      Eigen::CompleteOrthogonalDecomposition<MatD> cod(a_eq_);
      x += cod.solve(-resid);
    }
  }
  {
    double v;
    if (!eval_psi(x, 1.0, v))
      throw std::invalid_argument("solve: x0 is not strictly inside the barrier domain");
  }

  double t = std::max(opts.t0, 1e-9);
  const int rd = has_eq_ ? (int)null_.cols() : n_;
  VecD g(n_);
  MatD h(n_, n_);
  double val = 0;
  bool done = false;

  // 0 = hard failure (status already set), 1 = centered, 2 = stage budget spent
  auto newton_stage = [&](double center_tol, int max_iter, bool quiet) -> int {
    double val0 = std::numeric_limits<double>::quiet_NaN();
    double lam_last = std::numeric_limits<double>::infinity();
    for (int it = 0; it < max_iter; ++it) {
      if (rd == 0) return 1;
      assemble(x, t, val, g, h);
      if (it == 0) val0 = val;
      VecD gr;
      MatD hr;
      if (has_eq_) {
        MatD hf = h.selfadjointView<Eigen::Lower>();
        hr = null_.transpose() * hf * null_;
        gr = null_.transpose() * g;
      } else {
        hr = h;
        gr = g;
      }
      double diag_max = std::max(1.0, hr.diagonal().maxCoeff());
      double reg = 0;
      Eigen::LLT<MatD> llt;
      for (;;) {
        llt.compute(hr);
        if (llt.info() == Eigen::Success) break;
        double bump = reg == 0 ? 1e-12 * diag_max : reg * 99.0;
        hr.diagonal().array() += bump;
        reg += bump;
        if (reg > 1e8 * diag_max) {
          if (quiet) return 1;
          rep.status = SolveStatus::numerical;
          rep.message = "newton system could not be factorized";
          return 0;
        }
      }
      VecD dy = llt.solve(-gr);
      double lam2 = std::max(0.0, -gr.dot(dy));
      lam_last = 0.5 * lam2;
      if (0.5 * lam2 <= center_tol) return 1;
      if (rep.newton_steps >= opts.max_total_newton) {
        rep.status = SolveStatus::iteration_limit;
        rep.message = "newton budget exhausted";
        return 0;
      }
      VecD dx = has_eq_ ? VecD(null_ * dy) : dy;
      // Damped step: psi is self-concordant, so 1/(1+lambda) is guaranteed to
      // stay in the domain and make progress.  The sufficient-decrease test
      // carries a rounding allowance because at large t the predicted decrease
      // can sink below the spacing of doubles around psi, which would reject
      // perfectly sound steps.
      double alpha = lam2 > 0.0625 ? 1.0 / (1.0 + std::sqrt(lam2)) : 1.0;
      const double round_slack =
          16 * std::numeric_limits<double>::epsilon() * std::abs(val);
      bool accepted = false;
      for (int ls = 0; ls < 110; ++ls) {
        double vnew;
        if (eval_psi(x + alpha * dx, t, vnew) &&
            vnew - val <= -kArmijo * alpha * lam2 + round_slack) {
          x += alpha * dx;
          accepted = true;
          break;
        }
        alpha *= 0.5;
      }
      if (!accepted) {
        if (quiet || 0.5 * lam2 < 1e-5) return 1;  // effectively centered
        rep.status = SolveStatus::numerical;
        rep.message = "line search stalled";
        return 0;
      }
      ++rep.newton_steps;
      if (stop_var >= 0 && x[stop_var] < stop_below) {
        done = true;
        return 1;
      }
    }
    // Rounding floor: when t is large the barrier value dwarfs the step
    // increments, psi stops moving at double precision, and the decrement
    // oscillates near zero without ever crossing the strict threshold.  If a
    // whole stage made no progress while the decrement stayed tiny, the point
    // is as centered as the arithmetic allows at this t.
    if (std::abs(val - val0) <=
            16 * std::numeric_limits<double>::epsilon() * std::abs(val0) &&
        lam_last <= 2.5e-3)
      return 1;
    return 2;  // stage budget spent before the decrement criterion was met
  };

  for (int stage = 0; stage < 100000 && !done; ++stage) {
    int rc = newton_stage(kCenterTol, opts.max_stage_newton, false);
    if (rc == 0) {
      finish(rep, x, t);
      return rep;
    }
    if (done) break;
    // The m/t gap certificate is only valid at a centered point; never raise t
    // until this stage's decrement criterion is actually met.
    if (rc == 2) continue;
    double scale = std::max(1.0, std::abs(p_.eval_objective(x)));
    if (m_barrier_ / t <= opts.tol * scale) {
      newton_stage(kPolishTol, 12, true);
      done = true;
      break;
    }
    t *= opts.mu;
    if (t > 1e32) {
      rep.status = SolveStatus::numerical;
      rep.message = "barrier weight overflow";
      finish(rep, x, t);
      return rep;
    }
  }

  rep.status = done ? SolveStatus::optimal : SolveStatus::iteration_limit;
  if (!done) rep.message = "stage limit reached";
  finish(rep, x, t);
  return rep;
}

}  // namespace

const char* to_string(SolveStatus s) {
  switch (s) {
    case SolveStatus::optimal: return "optimal";
    case SolveStatus::infeasible: return "infeasible";
    case SolveStatus::iteration_limit: return "iteration_limit";
    case SolveStatus::numerical: return "numerical";
  }
  return "unknown";
}

SolveReport solve(const ConvexProgram& prog, const VecD& x0, const SolveOptions& opts) {
  BarrierSolver s(prog);
  return s.run(x0, opts, -1, 0.0);
}

Phase1Result find_interior(const ConvexProgram& prog, const VecD& x0, const std::vector<char>& relax,
                           const SolveOptions& opts) {
  const int n = prog.num_vars();
  const int nc = prog.num_cons();
  if ((int)x0.size() != n) throw std::invalid_argument("find_interior: x0 has the wrong size");
  std::vector<char> rel = relax;
  if (rel.empty()) {
    rel.assign(nc, 1);
    for (int i = 0; i < nc; ++i)
      if (prog.kind(i) == ConKind::hyp) rel[i] = 0;
  } else if ((int)rel.size() != nc) {
    throw std::invalid_argument("find_interior: relax mask has the wrong size");
  }
  for (int i = 0; i < nc; ++i)
    if (rel[i] && prog.kind(i) == ConKind::hyp) throw std::logic_error("hyp rows cannot be relaxed");

  double max_all = -kInf, max_relaxed = -kInf;
  for (int i = 0; i < nc; ++i) {
    double gv = prog.eval_constraint(i, x0);
    max_all = std::max(max_all, gv);
    if (rel[i])
      max_relaxed = std::max(max_relaxed, gv);
    else if (!(gv < 0))
      throw std::invalid_argument("find_interior: x0 violates a constraint that is not relaxed");
  }
  if (nc == 0 || max_all < 0.0) return {true, x0, nc == 0 ? 0.0 : max_all};
  if (max_relaxed == -kInf) return {max_all < 0, x0, max_all};

  ConvexProgram ph = prog;
  ph.objective() = Objective{};
  double s0 = std::max(max_relaxed, 0.0) + 0.5 * (1.0 + std::abs(std::max(max_relaxed, 0.0)));
  int s = ph.add_var(-1e7, s0 + 10.0 * (1.0 + std::abs(s0)));
  ph.objective().affine.add(s, -1.0);
  for (int i = 0; i < nc; ++i)
    if (rel[i]) ph.relax_constraint(i, s);

  VecD xs(n + 1);
  xs << x0, s0;
  SolveOptions po = opts;
  po.t0 = 1.0;
  BarrierSolver solver(ph);
  SolveReport rep = solver.run(std::move(xs), po, s, -1e-3);

  VecD xh = rep.x.head(n);
  double mg = -kInf;
  for (int i = 0; i < nc; ++i) mg = std::max(mg, prog.eval_constraint(i, xh));
  return {mg < 0, xh, mg};
}

double finite_diff_check(const Differentiable& f, const VecD& x, double step) {
  VecD g = f.gradient(x);
  double scale = std::max(1.0, g.lpNorm<Eigen::Infinity>());
  double worst = 0.0;
  VecD xp = x;
  for (int i = 0; i < (int)x.size(); ++i) {
    double save = xp[i];
    xp[i] = save + step;
    double up = f.value(xp);
    xp[i] = save - step;
    double dn = f.value(xp);
    xp[i] = save;
    worst = std::max(worst, std::abs((up - dn) / (2 * step) - g[i]) / scale);
  }
  return worst;
}

MatC psd_floor(const MatC& m) {
  Eigen::SelfAdjointEigenSolver<MatC> es(0.5 * (m + m.adjoint()));
  VecD ev = es.eigenvalues().cwiseMax(0.0);
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().adjoint();
}

MatD psd_floor(const MatD& m) {
  Eigen::SelfAdjointEigenSolver<MatD> es(0.5 * (m + m.transpose()));
  VecD ev = es.eigenvalues().cwiseMax(0.0);
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace nafd::convex
