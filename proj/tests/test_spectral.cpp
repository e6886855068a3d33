#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "avc/excitation.hpp"
#include "avc/plantlab.hpp"
#include "avc/spectral.hpp"

using namespace avc;

namespace {

LtiPlant damped_siso() {
  LtiPlant p;
  p.model.A.resize(2, 2);
  p.model.A << 0.5, 0.3, -0.3, 0.5;
  p.model.B = MatrixXd(2, 1);
  p.model.B << 1.0, 0.5;
  p.model.C = MatrixXd(1, 2);
  p.model.C << 1.0, -0.4;
  p.model.D = MatrixXd::Constant(1, 1, 0.2);
  p.H = MatrixXd::Zero(2, 1);
  return p;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

struct LpmRun {
  FrmEstimate est;
  LpmConfig cfg;
};

// Random-phase multisine through the plant; periods after a long settle.
LpmRun run_lpm(const LtiPlant& lin, double kappa, int realizations, double meas_std, std::uint64_t seed) {
  const int N = 256, periods = 6;
  LpmConfig cfg;
  cfg.poly_order = 2;
  cfg.dof_target = 8;
  cfg.period_length = N;
  cfg.discard_periods = 2;
  for (int k = 1; k < N / 2; ++k) cfg.lines.push_back(k);
  Rng rng(seed);
  std::vector<LpmRecord> recs;
  for (int r = 0; r < realizations; ++r) {
    MultisineSpec s = flat_multisine(1.0, N, 1, N / 2 - 1);
    s.phases = random_phases(s.n_lines(), rng);
    VectorXd one = synthesize_multisine(s);
    MatrixXd u(N * periods, 1);
    for (int p = 0; p < periods; ++p) u.block(p * N, 0, N, 1) = one;
    PolynomialPlant pp;
    pp.linear = lin;
    pp.linear.meas_std = meas_std > 0 ? VectorXd::Constant(1, meas_std) : VectorXd();
    pp.kappa = kappa;
    pp.selector = VectorXd::Unit(2, 0);
    pp.injector = VectorXd::Unit(2, 1);
    MatrixXd d = MatrixXd::Zero(u.rows(), 1);
    LpmRecord rec;
    rec.realization = r;
    rec.u = u;
    rec.y = simulate(pp, u, d, VectorXd::Zero(2), rng);
    recs.push_back(rec);
  }
  return {lpm_estimate(recs, cfg), cfg};
}

}  // namespace

TEST_CASE("h1 static gain") {
  Rng rng(1);
  std::normal_distribution<double> nd;
  VectorXd u(4096);
  for (auto& v : u) v = nd(rng);
  SpectralConfig c;
  c.fft_length = 256;
  c.n_averages = 16;
  FrmEstimate e = h1_estimate(u, 2.0 * u, c);
  for (int k = 0; k < e.n_bins(); ++k) {
    REQUIRE(e.valid[k]);
    CHECK(std::abs(e.G[k](0, 0) - cd(2.0, 0.0)) < 1e-10);
    CHECK(e.coherence[k](0, 0) == doctest::Approx(1.0).epsilon(1e-10));
  }
}

TEST_CASE("h1 pure delay on a periodic record") {
  const int L = 128;
  MultisineSpec s = flat_multisine(1000.0, L, 1, L / 2 - 1);
  s.phases = schroeder_phases(s.n_lines());
  VectorXd one = synthesize_multisine(s);
  VectorXd u(L * 4), y(L * 4);
  for (int p = 0; p < 4; ++p) u.segment(p * L, L) = one;
  for (int k = 0; k < u.size(); ++k) y(k) = u((k - 1 + u.size()) % u.size());
  SpectralConfig c;
  c.window = Window::rect;
  c.fft_length = L;
  c.n_averages = 3;
  c.discard_periods = 1;
  c.f_sample = 1000.0;
  FrmEstimate e = h1_estimate(u, y, c);
  for (int k = 1; k < L / 2; ++k) {
    cd g = e.G[k](0, 0);
    CHECK(std::abs(g) == doctest::Approx(1.0).epsilon(1e-10));
    double w = 2.0 * kPi * e.freqs(k) / 1000.0;
    CHECK(std::abs(std::arg(g * std::exp(cd(0, w)))) < 1e-9);
  }
}

TEST_CASE("h1 coherence at 0 dB SNR is about one half") {
  Rng rng(7);
  std::normal_distribution<double> nd;
  const int L = 64, avg = 400;
  VectorXd u(L * avg);
  MatrixXd y(L * avg, 1);
  for (Eigen::Index k = 0; k < u.size(); ++k) {
    u(k) = nd(rng);
    y(k, 0) = u(k) + nd(rng);
  }
  SpectralConfig c;
  c.fft_length = L;
  c.n_averages = avg;
  FrmEstimate e = h1_estimate(u, y, c);
  double sum = 0.0;
  int n = 0;
  for (int k = 1; k < L / 2; ++k) {
    sum += e.coherence[k](0, 0);
    ++n;
  }
  CHECK(std::abs(sum / n - 0.5) <= 0.05);
}

TEST_CASE("h1 is invariant to joint scaling and coherence stays in [0,1]") {
  Rng rng(9);
  std::normal_distribution<double> nd;
  VectorXd u(2048);
  MatrixXd y(2048, 2);
  for (int k = 0; k < 2048; ++k) {
    u(k) = nd(rng);
    y(k, 0) = 0.7 * u(k) + (k > 0 ? 0.3 * u(k - 1) : 0.0) + 0.1 * nd(rng);
    y(k, 1) = nd(rng);
  }
  SpectralConfig c;
  c.fft_length = 128;
  c.n_averages = 30;
  c.overlap = 0.5;
  FrmEstimate a = h1_estimate(u, y, c);
  FrmEstimate b = h1_estimate(3.7 * u, 3.7 * y, c);
  for (int k = 0; k < a.n_bins(); ++k) {
    CHECK((a.G[k] - b.G[k]).cwiseAbs().maxCoeff() <= 1e-10 * (1.0 + a.G[k].cwiseAbs().maxCoeff()));
    for (int o = 0; o < 2; ++o) {
      CHECK(a.coherence[k](o, 0) >= 0.0);
      CHECK(a.coherence[k](o, 0) <= 1.0);
    }
  }
}

TEST_CASE("h1 marks bins without input power invalid") {
  VectorXd u = VectorXd::Zero(256);
  MatrixXd y = MatrixXd::Ones(256, 1);
  SpectralConfig c;
  c.fft_length = 64;
  c.n_averages = 4;
  FrmEstimate e = h1_estimate(u, y, c);
  for (bool v : e.valid) CHECK(!v);
  c.n_averages = 5;
  CHECK_THROWS_AS(h1_estimate(u, y, c), Error);
}

TEST_CASE("lpm half window satisfies the dof relation") {
  LpmConfig c;
  c.poly_order = 6;
  c.dof_target = 8;
  c.n_inputs = 4;
  int nw = c.half_window();
  CHECK(2 * nw + 1 - (c.poly_order + 1) * (c.n_inputs + 1) >= c.dof_target);
  CHECK(2 * (nw - 1) + 1 - (c.poly_order + 1) * (c.n_inputs + 1) < c.dof_target);
}

TEST_CASE("lpm on noise-free periodic data matches the true FRF") {
  LtiPlant p = damped_siso();
  LpmRun r = run_lpm(p, 0.0, 1, 0.0, 5);
  for (int i = 0; i < r.est.n_bins(); ++i) {
    double w = 2.0 * kPi * r.cfg.lines[i] / r.cfg.period_length;
    cd g0 = p.model.frf(std::exp(cd(0, w)))(0, 0);
    CHECK(std::abs(r.est.G[i](0, 0) - g0) < 1e-8 * std::abs(g0));
    CHECK(r.est.var_noise[i](0, 0) < 1e-20);
  }
}

TEST_CASE("lpm noise variance tracks injected white noise") {
  LtiPlant p = damped_siso();
  const double sigma = 0.05;
  LpmRun a = run_lpm(p, 0.0, 1, sigma, 21);
  LpmRun b = run_lpm(p, 0.0, 1, sigma * std::sqrt(2.0), 21);
  const int N = a.cfg.period_length, P = 6 - a.cfg.discard_periods;
  const double expected = N * sigma * sigma / P;  // per-bin power of the period-averaged spectrum
  std::vector<double> va, vb;
  for (int i = 0; i < a.est.n_bins(); ++i) {
    va.push_back(a.est.var_y[i](0, 0));
    vb.push_back(b.est.var_y[i](0, 0));
  }
  CHECK(std::abs(10.0 * std::log10(median(va) / expected)) < 3.0);
  CHECK(median(vb) / median(va) == doctest::Approx(2.0).epsilon(0.25));
}

TEST_CASE("lpm total variance exceeds noise variance for a cubic plant") {
  LtiPlant p = damped_siso();
  LpmRun nl = run_lpm(p, 0.05, 4, 1e-3, 33);
  LpmRun lin = run_lpm(p, 0.0, 4, 1e-3, 33);
  std::vector<double> rn, rl;
  for (int i = 0; i < nl.est.n_bins(); ++i) {
    CHECK(nl.est.var_total[i](0, 0) >= nl.est.var_noise[i](0, 0));
    CHECK(nl.est.var_noise[i](0, 0) >= 0.0);
    rn.push_back(nl.est.var_total[i](0, 0) / nl.est.var_noise[i](0, 0));
    rl.push_back(lin.est.var_total[i](0, 0) / lin.est.var_noise[i](0, 0));
  }
  CHECK(median(rn) > 10.0);
  CHECK(median(rl) < 3.0);
}

TEST_CASE("lpm rejects too few periods") {
  LpmConfig c;
  c.period_length = 64;
  c.lines = {1, 2, 3};
  c.poly_order = 1;
  c.dof_target = 2;
  LpmRecord rec;
  rec.u = MatrixXd::Ones(64, 1);
  rec.y = MatrixXd::Ones(64, 1);
  CHECK_THROWS_AS(lpm_estimate({rec}, c), Error);
}

TEST_CASE("transient contribution") {
  LtiPlant p = damped_siso();
  p.model.A *= 1.7;  // slower decay, radius about 0.99
  const int N = 128;
  MultisineSpec s = flat_multisine(1.0, N, 1, N / 2 - 1);
  s.phases = schroeder_phases(s.n_lines());
  VectorXd one = synthesize_multisine(s);
  MatrixXd u(N * 4, 1);
  for (int k = 0; k < 4; ++k) u.block(k * N, 0, N, 1) = one;
  Rng rng(1);
  MatrixXd y = simulate(p, u, MatrixXd::Zero(u.rows(), 1), VectorXd::Zero(2), rng);
  TransientReport t = transient_contribution(y.col(0), N);
  CHECK(t.period_db(0) > t.period_db(1));
  CHECK(t.period_db(1) > t.period_db(2));
  CHECK(t.period_db(3) == kDbFloor);

  VectorXd steady(N * 3);
  for (int k = 0; k < 3; ++k) steady.segment(k * N, N) = one;
  TransientReport s2 = transient_contribution(steady, N);
  for (int k = 0; k < 3; ++k) CHECK(s2.period_db(k) < -200.0);
}
