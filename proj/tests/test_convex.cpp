// SPDX-License-Identifier: Apache-2.0
#include "nafd/convex.hpp"

#include <cmath>
#include <random>

#include "doctest.h"

using namespace nafd::convex;

namespace {

// Reference solution of  max -0.5 x^T P x + q^T x  s.t. A x = b  via the KKT
// linear system; P strictly positive definite.
VecD kkt_qp(const MatD& p, const VecD& q, const MatD& a, const VecD& b) {
  const int n = (int)q.size(), m = (int)b.size();
  MatD kkt = MatD::Zero(n + m, n + m);
  kkt.topLeftCorner(n, n) = p;
  kkt.topRightCorner(n, m) = a.transpose();
  kkt.bottomLeftCorner(m, n) = a;
  VecD rhs(n + m);
  rhs << q, b;
  VecD sol = kkt.fullPivLu().solve(rhs);
  return sol.head(n);
}

}  // namespace

TEST_CASE("single-variable quadratic maximum") {
  // max 4x - x^2 over [0, 10]  ->  x = 2, value 4
  ConvexProgram prog;
  int x = prog.add_var(0.0, 10.0);
  prog.objective().affine.add(x, 4.0);
  SquareTerm sq;
  sq.w = 1.0;
  sq.q.add(x, 1.0);
  prog.objective().neg_squares.push_back(sq);

  VecD x0(1);
  x0 << 5.0;
  auto rep = solve(prog, x0);
  REQUIRE(rep.status == SolveStatus::optimal);
  CHECK(rep.x[0] == doctest::Approx(2.0).epsilon(1e-6));
  CHECK(rep.objective == doctest::Approx(4.0).epsilon(1e-6));
  CHECK(rep.r_gap < 1e-6);
}

TEST_CASE("linear program lands on the right corner") {
  // max x + 2y  s.t. x + y <= 4, x <= 3, x,y >= 0  ->  (0,4), value 8
  ConvexProgram prog;
  int x = prog.add_var(0.0, 1e3);
  int y = prog.add_var(0.0, 1e3);
  prog.objective().affine.add(x, 1.0).add(y, 2.0);
  LinearCon c1;
  c1.a.c0 = -4.0;
  c1.a.add(x, 1.0).add(y, 1.0);
  prog.add_linear(c1);
  LinearCon c2;
  c2.a.c0 = -3.0;
  c2.a.add(x, 1.0);
  prog.add_linear(c2);

  VecD x0(2);
  x0 << 1.0, 1.0;
  auto rep = solve(prog, x0);
  REQUIRE(rep.status == SolveStatus::optimal);
  CHECK(rep.x[0] == doctest::Approx(0.0).epsilon(1e-5));
  CHECK(rep.x[1] == doctest::Approx(4.0).epsilon(1e-5));
  CHECK(rep.objective == doctest::Approx(8.0).epsilon(1e-6));
  // binding rows get positive multipliers, slack rows vanish
  CHECK(rep.ineq_mult[0] > 1e-3);
  CHECK(rep.ineq_mult[1] < 1e-5);
}

TEST_CASE("random strictly convex QP with equalities matches the KKT solve") {
  std::mt19937_64 gen(7);
  std::normal_distribution<double> nd;
  for (int trial = 0; trial < 8; ++trial) {
    const int n = 6, m = 2, nf = 8;
    MatD f(nf, n);
    for (int i = 0; i < nf; ++i)
      for (int j = 0; j < n; ++j) f(i, j) = nd(gen);
    MatD p = f.transpose() * f + 0.5 * MatD::Identity(n, n);
    VecD q(n);
    for (int i = 0; i < n; ++i) q[i] = nd(gen);
    MatD a(m, n);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) a(i, j) = nd(gen);
    VecD b = VecD::Zero(m);  // keep x0 = 0 on the equality manifold

    VecD xref = kkt_qp(p, q, a, b);

    // Build the same problem from square atoms: P = F^T F + 0.5 I.
    ConvexProgram prog;
    int v = prog.add_vars(n, -1e4, 1e4);
    for (int j = 0; j < n; ++j) prog.objective().affine.add(v + j, q[j]);
    for (int i = 0; i < nf; ++i) {
      SquareTerm sq;
      sq.w = 0.5;
      for (int j = 0; j < n; ++j) sq.q.add(v + j, f(i, j));
      prog.objective().neg_squares.push_back(sq);
    }
    for (int j = 0; j < n; ++j) {
      SquareTerm sq;
      sq.w = 0.25;
      sq.q.add(v + j, 1.0);
      prog.objective().neg_squares.push_back(sq);
    }
    for (int i = 0; i < m; ++i) {
      AffineExpr e;
      e.c0 = -b[i];
      for (int j = 0; j < n; ++j) e.add(v + j, a(i, j));
      prog.add_equality(e);
    }

    auto rep = solve(prog, VecD::Zero(n));
    REQUIRE(rep.status == SolveStatus::optimal);
    for (int j = 0; j < n; ++j) CHECK(rep.x[j] == doctest::Approx(xref[j]).epsilon(1e-5));
    CHECK((a * rep.x - b).lpNorm<Eigen::Infinity>() < 1e-8);
    CHECK(rep.r_stat < 1e-5);
  }
}

TEST_CASE("log constraint: max y with y <= log x, x <= e^2") {
  ConvexProgram prog;
  int x = prog.add_var(1e-6, 1e3);
  int y = prog.add_var(-1e3, 1e3);
  prog.objective().affine.add(y, 1.0);
  LogCon lc;  // y - log x <= 0
  lc.a.add(y, 1.0);
  lc.arg.add(x, 1.0);
  prog.add_log(lc);
  LinearCon ub;  // x <= e^2
  ub.a.c0 = -std::exp(2.0);
  ub.a.add(x, 1.0);
  prog.add_linear(ub);

  VecD x0(2);
  x0 << 1.0, -1.0;
  auto rep = solve(prog, x0);
  REQUIRE(rep.status == SolveStatus::optimal);
  CHECK(rep.x[y] == doctest::Approx(2.0).epsilon(1e-6));
}

TEST_CASE("quadratic-over-linear constraint: max y with y^2/x <= 1, x <= 4") {
  ConvexProgram prog;
  int x = prog.add_var(1e-6, 1e3);
  int y = prog.add_var(0.0, 1e3);
  prog.objective().affine.add(y, 1.0);
  QolCon qc;  // y^2 / x - 1 <= 0
  SquareTerm sq;
  sq.w = 1.0;
  sq.q.add(y, 1.0);
  qc.squares.push_back(sq);
  qc.den.add(x, 1.0);
  qc.a.c0 = -1.0;
  prog.add_qol(qc);
  LinearCon ub;
  ub.a.c0 = -4.0;
  ub.a.add(x, 1.0);
  prog.add_linear(ub);

  VecD x0(2);
  x0 << 1.0, 0.5;
  auto rep = solve(prog, x0);
  REQUIRE(rep.status == SolveStatus::optimal);
  CHECK(rep.x[y] == doctest::Approx(2.0).epsilon(1e-6));
  CHECK(rep.x[x] == doctest::Approx(4.0).epsilon(1e-5));
}

TEST_CASE("hyperbolic rows compose a geometric mean") {
  // max t s.t. t^2 <= a b, a + 2b <= 4  ->  a = 2, b = 1, t = sqrt(2)
  ConvexProgram prog;
  int a = prog.add_var(1e-9, 1e3);
  int b = prog.add_var(1e-9, 1e3);
  int t = prog.add_var(1e-9, 1e3);
  prog.objective().affine.add(t, 1.0);
  HypCon h;
  h.tvar = t;
  h.lvar = a;
  h.rvar = b;
  prog.add_hyp(h);
  LinearCon lc;
  lc.a.c0 = -4.0;
  lc.a.add(a, 1.0).add(b, 2.0);
  prog.add_linear(lc);

  VecD x0(3);
  x0 << 1.0, 1.0, 0.5;
  auto rep = solve(prog, x0);
  REQUIRE(rep.status == SolveStatus::optimal);
  CHECK(rep.x[t] == doctest::Approx(std::sqrt(2.0)).epsilon(1e-5));
  CHECK(rep.x[a] == doctest::Approx(2.0).epsilon(1e-4));
  CHECK(rep.x[b] == doctest::Approx(1.0).epsilon(1e-4));

  SUBCASE("constant right child") {
    ConvexProgram p2;
    int aa = p2.add_var(1e-9, 3.0);
    int tt = p2.add_var(1e-9, 1e3);
    p2.objective().affine.add(tt, 1.0);
    HypCon h2;  // t^2 <= 2 a
    h2.tvar = tt;
    h2.lvar = aa;
    h2.rconst = 2.0;
    p2.add_hyp(h2);
    VecD y0(2);
    y0 << 1.0, 0.5;
    auto r2 = solve(p2, y0);
    REQUIRE(r2.status == SolveStatus::optimal);
    CHECK(r2.x[tt] == doctest::Approx(std::sqrt(6.0)).epsilon(1e-5));
  }
}

TEST_CASE("log terms in the objective balance a budget") {
  // max log a + 2 log b s.t. a + b <= 3  ->  a = 1, b = 2
  ConvexProgram prog;
  int a = prog.add_var(1e-9, 1e3);
  int b = prog.add_var(1e-9, 1e3);
  AffineExpr ea, eb;
  ea.add(a, 1.0);
  eb.add(b, 1.0);
  prog.objective().logs.push_back({1.0, ea});
  prog.objective().logs.push_back({2.0, eb});
  LinearCon lc;
  lc.a.c0 = -3.0;
  lc.a.add(a, 1.0).add(b, 1.0);
  prog.add_linear(lc);

  VecD x0(2);
  x0 << 1.0, 1.0;
  auto rep = solve(prog, x0);
  REQUIRE(rep.status == SolveStatus::optimal);
  CHECK(rep.x[a] == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(rep.x[b] == doctest::Approx(2.0).epsilon(1e-6));
}

TEST_CASE("psd block: trace objective concentrates on the top eigenvector") {
  const int d = 3;
  ConvexProgram prog;
  int off = prog.add_psd_block(d);
  AffineExpr tr;
  ConvexProgram::add_trace(tr, off, d, MatC::Identity(d, d));
  // max Re tr(A Q) s.t. tr Q <= 1 puts all weight on A's top eigenvector:
  // optimal value = lambda_max(A), optimal Q rank one.
  MatC a = MatC::Zero(d, d);
  a(0, 0) = 2.0;
  a(1, 1) = 1.0;
  a(0, 1) = std::complex<double>(0.5, 0.25);
  a(1, 0) = std::conj(a(0, 1));
  ConvexProgram::add_trace(prog.objective().affine, off, d, a);
  LinearCon lc;
  lc.a.c0 = -1.0;
  lc.a.terms = tr.terms;
  prog.add_linear(lc);

  VecD x0 = VecD::Zero(prog.num_vars());
  ConvexProgram::pack_hermitian(x0, off, d, 0.2 * MatC::Identity(d, d));
  auto rep = solve(prog, x0);
  REQUIRE(rep.status == SolveStatus::optimal);

  Eigen::SelfAdjointEigenSolver<MatC> es(a);
  double lmax = es.eigenvalues().maxCoeff();
  CHECK(rep.objective == doctest::Approx(lmax).epsilon(1e-5));
  MatC q = ConvexProgram::unpack_hermitian(rep.x, off, d);
  Eigen::SelfAdjointEigenSolver<MatC> eq(q);
  CHECK(eq.eigenvalues().minCoeff() > -1e-9);       // stayed PSD
  CHECK(q.trace().real() == doctest::Approx(1.0).epsilon(1e-4));
  // optimum is (near) rank one along A's leading eigenvector
  CHECK(eq.eigenvalues()(d - 1) == doctest::Approx(1.0).epsilon(1e-3));
}

TEST_CASE("hermitian pack/unpack/trace round trip") {
  std::mt19937_64 gen(3);
  std::normal_distribution<double> nd;
  const int d = 4;
  MatC m(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) m(i, j) = std::complex<double>(nd(gen), nd(gen));
  MatC q = m + m.adjoint();  // hermitian
  MatC a(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) a(i, j) = std::complex<double>(nd(gen), nd(gen));
  a = MatC(a + a.adjoint());

  VecD x = VecD::Zero(d * d + 3);  // offset exercise
  ConvexProgram::pack_hermitian(x, 3, d, q);
  MatC back = ConvexProgram::unpack_hermitian(x, 3, d);
  CHECK((back - q).cwiseAbs().maxCoeff() < 1e-14);

  AffineExpr tr;
  ConvexProgram::add_trace(tr, 3, d, a, 2.5);
  double want = 2.5 * (a * q).trace().real();
  CHECK(tr.eval(x) == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("constraint evaluation and gradients match finite differences") {
  ConvexProgram prog;
  int v = prog.add_vars(3, -10.0, 10.0);
  QolCon qc;
  SquareTerm s1;
  s1.w = 2.0;
  s1.q.c0 = 0.3;
  s1.q.add(v, 1.0).add(v + 1, -0.5);
  qc.squares.push_back(s1);
  qc.den.c0 = 0.1;
  qc.den.add(v + 2, 1.0);
  qc.a.add(v + 1, 0.7);
  int ci = prog.add_qol(qc);
  QuadCon q2;
  SquareTerm s2;
  s2.w = 1.5;
  s2.q.add(v + 2, 1.0);
  s2.q.c0 = -0.2;
  q2.squares.push_back(s2);
  q2.a.add(v, -1.0);
  q2.a.c0 = -3.0;
  int ci2 = prog.add_quad(q2);
  LogCon lc;
  lc.a.add(v, 0.4);
  lc.arg.c0 = 1.0;
  lc.arg.add(v + 1, 1.0);
  lc.c = 1.7;
  int ci3 = prog.add_log(lc);

  VecD x(3);
  x << 0.4, 0.8, 1.3;
  for (int ci_check : {ci, ci2, ci3}) {
    Differentiable f;
    f.value = [&, ci_check](const VecD& y) { return prog.eval_constraint(ci_check, y); };
    f.gradient = [&, ci_check](const VecD& y) { return prog.constraint_gradient(ci_check, y); };
    CHECK(finite_diff_check(f, x, 1e-6) < 1e-7);
  }
}

TEST_CASE("finite_diff_check flags a wrong gradient") {
  Differentiable f;
  f.value = [](const VecD& y) { return y[0] * y[0]; };
  f.gradient = [](const VecD& y) {
    VecD g(1);
    g[0] = 2.0 * y[0] + 0.5;  // off by 0.5
    return g;
  };
  VecD x(1);
  x << 3.0;
  CHECK(finite_diff_check(f, x) > 1e-2);
}

TEST_CASE("phase one finds an interior point and detects infeasibility") {
  ConvexProgram prog;
  int x = prog.add_var(-10.0, 10.0);
  LinearCon c1;  // x >= 2  <->  2 - x <= 0
  c1.a.c0 = 2.0;
  c1.a.add(x, -1.0);
  prog.add_linear(c1);
  LinearCon c2;  // x <= 6
  c2.a.c0 = -6.0;
  c2.a.add(x, 1.0);
  prog.add_linear(c2);

  VecD x0(1);
  x0 << 0.0;  // violates c1
  auto ph = find_interior(prog, x0);
  REQUIRE(ph.feasible);
  CHECK(ph.x[0] > 2.0);
  CHECK(ph.x[0] < 6.0);

  SUBCASE("empty intersection reports infeasible") {
    ConvexProgram bad;
    int y = bad.add_var(-10.0, 10.0);
    LinearCon b1;  // y >= 5
    b1.a.c0 = 5.0;
    b1.a.add(y, -1.0);
    bad.add_linear(b1);
    LinearCon b2;  // y <= 3
    b2.a.c0 = -3.0;
    b2.a.add(y, 1.0);
    bad.add_linear(b2);
    VecD y0(1);
    y0 << 0.0;
    auto p2 = find_interior(bad, y0);
    CHECK(!p2.feasible);
    CHECK(p2.max_violation > 0.9);  // best possible is s = 1 at y = 4
  }
}

TEST_CASE("solver is deterministic") {
  auto build = [] {
    ConvexProgram prog;
    int a = prog.add_var(1e-9, 50.0);
    int b = prog.add_var(1e-9, 50.0);
    AffineExpr ea, eb;
    ea.add(a, 1.0);
    eb.c0 = 0.5;
    eb.add(b, 1.0);
    prog.objective().logs.push_back({1.0, ea});
    prog.objective().logs.push_back({3.0, eb});
    LinearCon lc;
    lc.a.c0 = -7.0;
    lc.a.add(a, 2.0).add(b, 1.0);
    prog.add_linear(lc);
    return prog;
  };
  VecD x0(2);
  x0 << 1.0, 1.0;
  auto r1 = solve(build(), x0);
  auto r2 = solve(build(), x0);
  REQUIRE(r1.status == SolveStatus::optimal);
  REQUIRE(r1.x.size() == r2.x.size());
  CHECK((r1.x - r2.x).lpNorm<Eigen::Infinity>() == 0.0);
  CHECK(r1.objective == r2.objective);
  CHECK(r1.newton_steps == r2.newton_steps);
}

TEST_CASE("multipliers certify the optimum of a constrained maximum") {
  // max 3a + b s.t. a^2 + b^2 <= 4 (quad atom), a <= 1.
  ConvexProgram prog;
  int a = prog.add_var(-10.0, 10.0);
  int b = prog.add_var(-10.0, 10.0);
  prog.objective().affine.add(a, 3.0).add(b, 1.0);
  QuadCon qc;
  SquareTerm sa, sb;
  sa.q.add(a, 1.0);
  sb.q.add(b, 1.0);
  qc.squares = {sa, sb};
  qc.a.c0 = -4.0;
  int ball = prog.add_quad(qc);
  LinearCon lc;
  lc.a.c0 = -1.0;
  lc.a.add(a, 1.0);
  int cap = prog.add_linear(lc);

  VecD x0(2);
  x0 << 0.0, 0.0;
  auto rep = solve(prog, x0);
  REQUIRE(rep.status == SolveStatus::optimal);
  // optimum: a = 1 (cap active), b = sqrt(3)
  CHECK(rep.x[a] == doctest::Approx(1.0).epsilon(1e-5));
  CHECK(rep.x[b] == doctest::Approx(std::sqrt(3.0)).epsilon(1e-5));
  // stationarity: grad f = lam_ball * grad g_ball + lam_cap * grad g_cap
  double lam_ball = rep.ineq_mult[ball], lam_cap = rep.ineq_mult[cap];
  CHECK(3.0 == doctest::Approx(lam_ball * 2.0 * rep.x[a] + lam_cap).epsilon(1e-4));
  CHECK(1.0 == doctest::Approx(lam_ball * 2.0 * rep.x[b]).epsilon(1e-4));
  CHECK(rep.r_stat < 1e-5);
}

TEST_CASE("psd_floor clips negative eigenvalues only") {
  MatC m(2, 2);
  m << std::complex<double>(1.0, 0.0), std::complex<double>(0.0, 2.0),
      std::complex<double>(0.0, -2.0), std::complex<double>(1.0, 0.0);
  // eigenvalues 3 and -1
  MatC f = psd_floor(m);
  Eigen::SelfAdjointEigenSolver<MatC> es(f);
  CHECK(es.eigenvalues().minCoeff() > -1e-12);
  CHECK(es.eigenvalues().maxCoeff() == doctest::Approx(3.0).epsilon(1e-10));
  MatC already = MatC::Identity(2, 2) * 2.0;
  CHECK((psd_floor(already) - already).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("warm start with larger t0 reuses fewer newton steps") {
  ConvexProgram prog;
  int a = prog.add_var(1e-9, 50.0);
  int b = prog.add_var(1e-9, 50.0);
  AffineExpr ea, eb;
  ea.add(a, 1.0);
  eb.add(b, 1.0);
  prog.objective().logs.push_back({2.0, ea});
  prog.objective().logs.push_back({1.0, eb});
  LinearCon lc;
  lc.a.c0 = -6.0;
  lc.a.add(a, 1.0).add(b, 2.0);
  prog.add_linear(lc);

  VecD cold(2);
  cold << 0.5, 0.5;
  auto r1 = solve(prog, cold);
  REQUIRE(r1.status == SolveStatus::optimal);

  SolveOptions warm_opts;
  warm_opts.t0 = std::max(1.0, r1.final_t / 100.0);
  auto r2 = solve(prog, r1.x, warm_opts);
  REQUIRE(r2.status == SolveStatus::optimal);
  CHECK(r2.objective == doctest::Approx(r1.objective).epsilon(1e-7));
  CHECK(r2.newton_steps < r1.newton_steps);
}
