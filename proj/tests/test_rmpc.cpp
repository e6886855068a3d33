#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "avc/rmpc.hpp"

using namespace avc;

namespace {

MatrixXd rotation(double th) {
  MatrixXd S(2, 2);
  S << std::cos(th), -std::sin(th), std::sin(th), std::cos(th);
  return S;
}

MatrixXd block_rotations(const std::vector<double>& th) {
  MatrixXd S = MatrixXd::Zero(2 * th.size(), 2 * th.size());
  for (std::size_t i = 0; i < th.size(); ++i) S.block(2 * i, 2 * i, 2, 2) = rotation(th[i]);
  return S;
}

// Gamma(q^-1) applied to a sequence, ignoring the first nw samples.
double annihilation_residual(const VectorXd& d, const InternalModel& im) {
  double worst = 0.0;
  for (Eigen::Index k = im.nw(); k < d.size(); ++k) {
    double v = d(k);
    for (int i = 0; i < im.nw(); ++i) v += im.alpha(i) * d(k - 1 - i);
    worst = std::max(worst, std::abs(v));
  }
  return worst;
}

StateSpaceModel random_stable(int n, int m, int p, Rng& rng) {
  std::normal_distribution<double> nd;
  StateSpaceModel s;
  s.A = MatrixXd::NullaryExpr(n, n, [&]() { return nd(rng); });
  s.A *= 0.9 / std::max(spectral_radius(s.A), 1e-3);
  s.B = MatrixXd::NullaryExpr(n, m, [&]() { return nd(rng); });
  s.C = MatrixXd::NullaryExpr(p, n, [&]() { return nd(rng); });
  s.D = MatrixXd::Zero(p, m);
  return s;
}

DisturbanceModel no_disturbance() { return {MatrixXd(0, 0), MatrixXd(1, 0), VectorXd(0)}; }

}  // namespace

TEST_CASE("internal model of a rotation and of a constant") {
  const double th = 0.37;
  InternalModel im = internal_model_from(rotation(th));
  REQUIRE(im.nw() == 2);
  CHECK(im.alpha(0) == doctest::Approx(-2.0 * std::cos(th)).epsilon(1e-12));
  CHECK(im.alpha(1) == doctest::Approx(1.0).epsilon(1e-12));
  VectorXd d(300);
  for (int k = 0; k < 300; ++k) d(k) = std::sin(th * k + 0.8);
  CHECK(annihilation_residual(d, im) <= 1e-10);

  InternalModel c = internal_model_from(MatrixXd::Ones(1, 1));
  REQUIRE(c.nw() == 1);
  CHECK(c.alpha(0) == doctest::Approx(-1.0));

  CHECK_THROWS_AS(internal_model_from(MatrixXd::Constant(1, 1, 1.01)), Error);
}

TEST_CASE("twelfth order internal model annihilates generator trajectories") {
  MatrixXd S = block_rotations({0.05, 0.2, 0.45, 0.9, 1.6, 2.4});
  InternalModel im = internal_model_from(S);
  CHECK(im.nw() == 12);
  DisturbanceModel dm{S, MatrixXd::Ones(1, 12), VectorXd::LinSpaced(12, -1.0, 1.0)};
  VectorXd w = dm.w0, d(2000);
  for (int k = 0; k < 2000; ++k) {
    auto [wn, dk] = step_disturbance(dm, w);
    d(k) = dk(0);
    w = wn;
  }
  CHECK(annihilation_residual(d, im) <= 1e-8 * d.cwiseAbs().maxCoeff());
}

TEST_CASE("augmentation") {
  Rng rng(2);
  StateSpaceModel p = random_stable(4, 2, 1, rng);
  InternalModel empty;
  AugmentedSystem a0 = augment(p, empty);
  CHECK(a0.A == p.A);
  CHECK(a0.B == p.B);
  CHECK(a0.C == p.C);

  InternalModel im = internal_model_from(block_rotations({0.3, 1.1}));
  AugmentedSystem a = augment(p, im);
  CHECK(a.dim() == 4 + 1 * 4);
  VectorXcd expect(8);
  expect << eigenvalues(p.A), im.roots;
  CHECK(hausdorff(eigenvalues(a.A), expect) < 1e-8);
}

TEST_CASE("augmentation warns on a transmission zero at a generator root") {
  const double th = 0.4;
  // numerator z^2 - 2cos(th) z + 1, denominator (z-0.5)(z-0.3)(z-0.2)
  StateSpaceModel p;
  p.A = MatrixXd::Zero(3, 3);
  p.A.row(0) << 1.0, -0.31, 0.03;
  p.A(1, 0) = 1.0;
  p.A(2, 1) = 1.0;
  p.B = VectorXd::Unit(3, 0);
  p.C = MatrixXd(1, 3);
  p.C << 1.0, -2.0 * std::cos(th), 1.0;
  p.D = MatrixXd::Zero(1, 1);
  Diagnostics d;
  augment(p, internal_model_from(rotation(th)), &d);
  CHECK(d.has_warning("transmission zero"));
  Diagnostics clean;
  augment(p, internal_model_from(rotation(th + 0.3)), &clean);
  CHECK(!clean.has_warning("transmission zero"));
}

TEST_CASE("gamma filter") {
  InternalModel integ;
  integ.alpha = VectorXd::Constant(1, -1.0);
  MatrixXd c = MatrixXd::Constant(20, 1, 3.0);
  MatrixXd f = filter_signal(c, integ);
  for (int k = 1; k < 20; ++k) CHECK(f(k, 0) == 0.0);

  InternalModel none;
  Rng rng(3);
  std::normal_distribution<double> nd;
  MatrixXd x = MatrixXd::NullaryExpr(50, 2, [&]() { return nd(rng); });
  CHECK(filter_signal(x, none) == x);

  const double th = 0.7;
  InternalModel rot = internal_model_from(rotation(th));
  MatrixXd s(100, 1);
  for (int k = 0; k < 100; ++k) s(k, 0) = 1.5 * std::cos(th * k - 0.2);
  MatrixXd fs = filter_signal(s, rot);
  for (int k = 2; k < 100; ++k) CHECK(std::abs(fs(k, 0)) < 1e-10);

  InternalModel twelve = internal_model_from(block_rotations({0.05, 0.2, 0.45, 0.9, 1.6, 2.4}));
  MatrixXd y = MatrixXd::NullaryExpr(400, 3, [&]() { return nd(rng); });
  // The inverse recursion is marginally stable, so round-off accumulates with length.
  CHECK((inverse_filter_signal(filter_signal(y, twelve), twelve) - y).cwiseAbs().maxCoeff() < 1e-8);
  CHECK((filter_signal(inverse_filter_signal(y, rot), rot) - y).cwiseAbs().maxCoeff() < 1e-10);

  GammaFilter g(rot.alpha, 3);
  InverseGammaFilter ig(rot.alpha, 3);
  for (int k = 0; k < 100; ++k) {
    VectorXd v = y.row(k).transpose();
    CHECK((ig.step(g.step(v)) - v).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("laguerre basis") {
  LaguerreBasis z = laguerre_basis(0.0, 4, 10);
  for (int k = 0; k < 10; ++k)
    for (int i = 0; i < 4; ++i) CHECK(z.L(k, i) == (k == i ? 1.0 : 0.0));

  LaguerreBasis h = laguerre_basis(0.5, 3, 200);
  CHECK((h.L.transpose() * h.L - MatrixXd::Identity(3, 3)).cwiseAbs().maxCoeff() < 1e-10);

  const int horizon = static_cast<int>(std::ceil(10.0 / (1.0 - 0.76))) * 4;
  LaguerreBasis p = laguerre_basis(0.76, 5, horizon);
  CHECK((p.L.transpose() * p.L - MatrixXd::Identity(5, 5)).cwiseAbs().maxCoeff() < 1e-10);

  // z-transform of the first function: sqrt(1-a^2) / (1 - a z^-1)
  for (int k = 0; k < 20; ++k) CHECK(p.L(k, 0) == doctest::Approx(std::sqrt(1 - 0.76 * 0.76) * std::pow(0.76, k)));

  auto first_small = [](const LaguerreBasis& b) {
    for (int k = 0; k < b.L.rows(); ++k)
      if (std::abs(b.L(k, 0)) < 1e-3) return k;
    return static_cast<int>(b.L.rows());
  };
  CHECK(first_small(laguerre_basis(0.9, 1, 500)) > first_small(laguerre_basis(0.5, 1, 500)));
  CHECK_THROWS_AS(laguerre_basis(1.0, 3, 10), Error);
}

TEST_CASE("hildreth small problems") {
  MatrixXd E = 2.0 * MatrixXd::Identity(2, 2);
  VectorXd F = VectorXd::Constant(2, -4.0);
  MatrixXd M(1, 2);
  M << 1.0, 0.0;
  VectorXd g = VectorXd::Ones(1);
  HildrethResult r = hildreth_solve(E, F, M, g);
  CHECK(r.converged);
  CHECK(r.eta(0) == doctest::Approx(1.0).epsilon(1e-8));
  CHECK(r.eta(1) == doctest::Approx(2.0).epsilon(1e-8));
  KktReport k = kkt_check(E, F, M, g, r);
  CHECK(k.stationarity < 1e-8);
  CHECK(k.primal < 1e-8);
  CHECK(k.complementarity < 1e-8);

  HildrethResult u = hildreth_solve(E, F, MatrixXd(0, 2), VectorXd(0));
  CHECK(u.converged);
  CHECK((u.eta - VectorXd::Constant(2, 2.0)).norm() < 1e-12);

  MatrixXd Mc(2, 2);
  Mc << 1.0, 0.0, -1.0, 0.0;
  VectorXd gc(2);
  gc << 0.0, -1.0;
  HildrethResult c = hildreth_solve(E, F, Mc, gc, 500);
  CHECK(!c.converged);
  CHECK(c.eta.allFinite());
  CHECK(c.feasibility > 0.0);
}

TEST_CASE("hildreth satisfies KKT on random feasible problems") {
  Rng rng(11);
  std::normal_distribution<double> nd;
  int converged = 0;
  for (int t = 0; t < 50; ++t) {
    const int n = 6, mc = 12;
    MatrixXd G = MatrixXd::NullaryExpr(n, n, [&]() { return nd(rng); });
    MatrixXd E = G * G.transpose() + MatrixXd::Identity(n, n);
    VectorXd F = VectorXd::NullaryExpr(n, [&]() { return 3.0 * nd(rng); });
    MatrixXd M = MatrixXd::NullaryExpr(mc, n, [&]() { return nd(rng); });
    VectorXd g = VectorXd::NullaryExpr(mc, [&]() { return std::abs(nd(rng)) + 0.1; });  // 0 is feasible
    HildrethResult r = hildreth_solve(E, F, M, g, 5000, 1e-10);
    if (!r.converged) continue;
    ++converged;
    KktReport k = kkt_check(E, F, M, g, r);
    const double tol = 1e-6 * (1.0 + F.cwiseAbs().maxCoeff());
    CHECK(k.primal < tol);
    CHECK(k.stationarity < tol);
    CHECK(k.complementarity < tol);
    CHECK(k.dual <= 0.0);
  }
  CHECK(converged >= 45);
}

TEST_CASE("kalman scalar steady state") {
  KalmanSchedule s = kalman_schedule(MatrixXd::Constant(1, 1, 0.9), MatrixXd::Ones(1, 1), MatrixXd::Ones(1, 1),
                                     MatrixXd::Ones(1, 1), MatrixXd::Ones(1, 1), 10);
  const double P = (0.81 + std::sqrt(0.81 * 0.81 + 4.0)) / 2.0;
  CHECK(s.P_ss(0, 0) == doctest::Approx(P).epsilon(1e-10));
  CHECK(s.K_ss(0, 0) == doctest::Approx(0.9 * P / (P + 1.0)).epsilon(1e-10));
  CHECK(s.gains.size() == 10);
}

TEST_CASE("kalman limits") {
  MatrixXd A(2, 2);
  A << 0.7, 0.2, -0.1, 0.5;
  KalmanSchedule z = kalman_schedule(A, MatrixXd::Identity(2, 2).topRows(1), MatrixXd::Zero(2, 2),
                                     MatrixXd::Ones(1, 1), MatrixXd::Identity(2, 2), 5);
  CHECK(z.P_ss.cwiseAbs().maxCoeff() < 1e-10);

  double prev = 1e9;
  for (double rf : {1e-2, 1e-4, 1e-6, 1e-8}) {
    KalmanSchedule k = kalman_schedule(A, MatrixXd::Identity(2, 2), MatrixXd::Identity(2, 2),
                                       rf * MatrixXd::Identity(2, 2), MatrixXd::Identity(2, 2), 5);
    double gap = (k.K_ss - A).cwiseAbs().maxCoeff();
    CHECK(gap < prev);
    prev = gap;
  }
  CHECK(prev < 1e-6);

  CHECK_THROWS_AS(kalman_schedule(MatrixXd::Constant(1, 1, 1.5), MatrixXd::Zero(1, 1), MatrixXd::Ones(1, 1),
                                  MatrixXd::Ones(1, 1), MatrixXd::Ones(1, 1), 5),
                  Error);
}

TEST_CASE("kalman estimation error is zero mean") {
  MatrixXd A(2, 2);
  A << 0.9, 0.3, -0.3, 0.9;
  MatrixXd C(1, 2);
  C << 1.0, 0.0;
  const double qs = 0.1, rs = 0.2;
  KalmanSchedule k = kalman_schedule(A, C, qs * qs * MatrixXd::Identity(2, 2), MatrixXd::Constant(1, 1, rs * rs),
                                     MatrixXd::Identity(2, 2), 1);
  Rng rng(5);
  std::normal_distribution<double> nd;
  VectorXd x = VectorXd::Zero(2), xh = VectorXd::Zero(2);
  const int steps = 10000;
  MatrixXd err(steps, 2);
  for (int t = 0; t < steps; ++t) {
    double y = (C * x)(0) + rs * nd(rng);
    err.row(t) = (x - xh).transpose();
    xh = A * xh + k.K_ss * (y - (C * xh)(0));
    x = A * x + qs * VectorXd::NullaryExpr(2, [&]() { return nd(rng); });
  }
  for (int j = 0; j < 2; ++j) {
    double mean = err.col(j).mean();
    double sd = std::sqrt((err.col(j).array() - mean).square().sum() / (steps - 1));
    CHECK(std::abs(mean) < 3.0 * sd / std::sqrt(static_cast<double>(steps)) * 5.0);  // correlated samples
  }
}

TEST_CASE("rls disturbance estimate") {
  MatrixXd H(3, 1);
  H << 0.0, 1.0, 0.5;
  RlsEstimator e(H, 1.0, 0);
  VectorXd d = VectorXd::Constant(1, 0.8);
  for (int k = 0; k < 10; ++k) e.update(H * d);
  CHECK(std::abs(e.estimate()(0) - 0.8) < 1e-8);

  RlsEstimator w(H, 1.0, 5);
  for (int k = 0; k < 10; ++k) w.update(H * d);
  CHECK(std::abs(w.estimate()(0) - 0.8) < 1e-12);

  RlsEstimator zero(H, 0.9, 5);
  for (int k = 0; k < 10; ++k) zero.update(VectorXd::Zero(3));
  CHECK(zero.estimate().norm() == 0.0);
}

TEST_CASE("rls tracking of a sinusoid improves with forgetting") {
  MatrixXd H(2, 1);
  H << 1.0, 0.0;
  Rng rng(4);
  std::normal_distribution<double> nd;
  auto rms = [&](double lambda) {
    RlsEstimator e(H, lambda, 0);
    Rng r2(4);
    double s = 0.0;
    int n = 0;
    for (int k = 0; k < 3000; ++k) {
      double d = std::sin(0.05 * k);
      VectorXd z = H * VectorXd::Constant(1, d);
      z(0) += 0.01 * nd(r2);
      e.update(z);
      if (k > 1000) {
        s += std::pow(e.estimate()(0) - d, 2);
        ++n;
      }
    }
    return std::sqrt(s / n);
  };
  const double r90 = rms(0.9), r98 = rms(0.98), r100 = rms(1.0);
  CHECK(r90 < r98);
  CHECK(r98 < r100);
}

TEST_CASE("transformed cost equals original cost") {
  Rng rng(21);
  std::normal_distribution<double> nd;
  std::uniform_int_distribution<int> dim(1, 6), hor(1, 25);
  std::uniform_real_distribution<double> bd(1.0, 3.0);
  for (int t = 0; t < 100; ++t) {
    const int n = dim(rng), m = std::max(1, dim(rng) / 2), N = hor(rng);
    const double beta = bd(rng);
    MatrixXd A = MatrixXd::NullaryExpr(n, n, [&]() { return nd(rng); });
    MatrixXd B = MatrixXd::NullaryExpr(n, m, [&]() { return nd(rng); });
    MatrixXd G = MatrixXd::NullaryExpr(n, n, [&]() { return nd(rng); });
    MatrixXd Q = G * G.transpose();
    MatrixXd R = MatrixXd::Identity(m, m) * (0.1 + std::abs(nd(rng)));
    VectorXd X0 = VectorXd::NullaryExpr(n, [&]() { return nd(rng); });
    std::vector<VectorXd> u(N), ub(N);
    for (int j = 0; j < N; ++j) {
      u[j] = VectorXd::NullaryExpr(m, [&]() { return nd(rng); });
      ub[j] = std::pow(beta, -j) * u[j];
    }
    const double J = weighted_cost(A, B, Q, R, beta, X0, u);
    const double Jb = scaled_cost(A, B, Q, R, beta, X0, ub);
    CHECK(std::abs(J - Jb) <= 1e-10 * std::max(1.0, std::abs(J)));
  }
}

TEST_CASE("prescribed stability riccati satisfies its equation") {
  Rng rng(8);
  StateSpaceModel p = random_stable(4, 2, 1, rng);
  MatrixXd Qb = p.C.transpose() * p.C, Rb = 0.1 * MatrixXd::Identity(2, 2);
  const double g = 0.9;
  int iters = 0;
  MatrixXd P = prescribed_stability_riccati(p.A, p.B, Qb, Rb, g, &iters);
  const MatrixXd Ag = p.A / g, Bg = p.B / g;
  MatrixXd res = Ag.transpose() * P * Ag - P + Qb -
                 Ag.transpose() * P * Bg * (Rb + Bg.transpose() * P * Bg).inverse() * Bg.transpose() * P * Ag;
  CHECK(res.cwiseAbs().maxCoeff() < 1e-8 * (1.0 + P.cwiseAbs().maxCoeff()));
  CHECK(iters > 0);
  MatrixXd K = (g * g * Rb + p.B.transpose() * P * p.B).inverse() * p.B.transpose() * P * p.A;
  CHECK(spectral_radius(p.A - p.B * K) <= g + 1e-8);
}

TEST_CASE("degenerate parameterization equals dense MPC") {
  Rng rng(31);
  StateSpaceModel p = random_stable(3, 2, 1, rng);
  RmpcConfig cfg;
  cfg.N = 8;
  cfg.a = {0.0, 0.0};
  cfg.n_l = {8, 8};
  cfg.prescribed_stability = false;
  cfg.beta = 1.4;
  RmpcController c = synthesize(p, MatrixXd::Zero(3, 1), no_disturbance(), cfg);
  CHECK(c.n_vars() == 16);
  MatrixXd Kd = dense_mpc_gain(c.aug.A, c.aug.B, c.Q, c.R, cfg.beta, cfg.N);
  CHECK((c.K_mpc - Kd).cwiseAbs().maxCoeff() < 1e-8 * (1.0 + Kd.cwiseAbs().maxCoeff()));
}

TEST_CASE("zero state weight gives a zero minimizer") {
  Rng rng(32);
  StateSpaceModel p = random_stable(3, 1, 1, rng);
  RmpcConfig cfg;
  cfg.N = 6;
  cfg.prescribed_stability = false;
  cfg.Qbar = MatrixXd::Zero(5, 5);
  cfg.a = {0.5};
  cfg.n_l = {3};
  RmpcController c = synthesize(p, MatrixXd::Zero(3, 1), DisturbanceModel{rotation(0.4), MatrixXd::Ones(1, 2), VectorXd::Ones(2)}, cfg);
  std::deque<VectorXd> hist(2, VectorXd::Ones(1));
  QpInstance q = build_qp(c, VectorXd::Ones(c.aug.dim()), hist, VectorXd::Zero(1));
  HildrethResult r = hildreth_solve(c.E, q.F, q.M, q.g);
  CHECK(r.eta.norm() < 1e-12);
}

TEST_CASE("benchmark controller: LQR match, prescribed stability, variable count, conditioning") {
  LtiPlant pl = benchmark_plant();
  DisturbanceModel dm = sinusoid_disturbance(14.0, kBenchmarkTs);
  RmpcConfig cfg;
  RmpcController c = synthesize(pl.model, pl.H, dm, cfg);
  CHECK(hausdorff(c.closed_loop_poles(), c.lqr_poles) < 1e-3);
  for (int i = 0; i < c.closed_loop_poles().size(); ++i) CHECK(std::abs(c.closed_loop_poles()(i)) <= 0.95 + 1e-6);
  CHECK(c.n_vars() == 10);
  CHECK(1.0 - static_cast<double>(c.n_vars()) / (cfg.N * pl.model.m()) == doctest::Approx(0.75));
  CHECK(Eigen::LLT<MatrixXd>(c.E).info() == Eigen::Success);

  RmpcConfig s21 = cfg, s1 = cfg;
  s21.laguerre_on_scaled_input = s1.laguerre_on_scaled_input = true;
  s1.beta = 1.0;
  CHECK(condition_number(synthesize(pl.model, pl.H, dm, s21).E) <
        condition_number(synthesize(pl.model, pl.H, dm, s1).E));
}

TEST_CASE("closed loop: quiescent, rejection and saturation") {
  LtiPlant pl = benchmark_plant();
  DisturbanceModel dm = sinusoid_disturbance(14.0, kBenchmarkTs);
  RmpcConfig cfg;
  RmpcController c = synthesize(pl.model, pl.H, dm, cfg);

  ClosedLoopOptions o;
  o.steps = 500;
  SimTrace q = closed_loop_run(pl, c, {dm, 0.0}, o);
  CHECK(q.u_applied.cwiseAbs().maxCoeff() == 0.0);
  CHECK(q.y.cwiseAbs().maxCoeff() == 0.0);

  o.steps = 10000;
  o.control = false;
  SimTrace ol = closed_loop_run(pl, c, {dm, 1.0}, o);
  o.control = true;
  SimTrace cl = closed_loop_run(pl, c, {dm, 1.0}, o);
  const int win = static_cast<int>(std::lround(1.0 / kBenchmarkTs));
  const double a0 = tone_amplitude(ol.y.col(0), 14.0, kBenchmarkTs, win);
  const double a1 = tone_amplitude(cl.y.col(0), 14.0, kBenchmarkTs, win);
  CHECK(20.0 * std::log10(a0 / a1) >= 40.0);
  CHECK(!cl.truncated);

  RmpcConfig sat = cfg;
  sat.saturation = SaturationSpec::symmetric(2, 0.5);
  RmpcController cs = synthesize(pl.model, pl.H, dm, sat);
  o.steps = 2000;
  SimTrace st = closed_loop_run(pl, cs, {dm, 1.0}, o);
  CHECK(!st.truncated);
  CHECK(st.u_applied.cwiseAbs().maxCoeff() <= 0.5);
  int active = 0;
  for (int s : st.sat_active) active += s;
  CHECK(active > 0);
  CHECK(st.y.allFinite());
  CHECK(st.y.cwiseAbs().maxCoeff() < 10.0 * ol.y.cwiseAbs().maxCoeff());
}

TEST_CASE("tone amplitude of a pure cosine") {
  const double Ts = 1e-3;
  VectorXd x(4000);
  for (int k = 0; k < 4000; ++k) x(k) = 0.7 * std::cos(2.0 * kPi * 25.0 * k * Ts + 1.0);
  CHECK(tone_amplitude(x, 25.0, Ts, 1000) == doctest::Approx(0.7).epsilon(1e-9));
}
