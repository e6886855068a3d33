#include "avc/plantlab.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>
#include <unsupported/Eigen/MatrixFunctions>

namespace avc {

void LtiPlant::validate() const {
  model.validate();
  if (H.rows() != model.n()) dimension_error("H row count must equal the state dimension");
  if (meas_std.size() != 0 && meas_std.size() != model.p()) dimension_error("one measurement noise std per output");
  if (proc_std.size() != 0 && proc_std.size() != model.n()) dimension_error("one process noise std per state");
  if ((meas_std.size() && meas_std.minCoeff() < 0.0) || (proc_std.size() && proc_std.minCoeff() < 0.0))
    config_error("noise standard deviations must be non-negative");
}

namespace {

VectorXd draw(const VectorXd& stds, Rng& rng, Eigen::Index n) {
  VectorXd v = VectorXd::Zero(n);
  if (stds.size() == 0) return v;
  std::normal_distribution<double> g(0.0, 1.0);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = stds(i) * g(rng);
  return v;
}

void check_step_dims(const LtiPlant& p, const VectorXd& x, const VectorXd& u, const VectorXd& d) {
  if (x.size() != p.model.n() || u.size() != p.model.m() || d.size() != p.r())
    dimension_error(fmt::format("plant step expects x({}), u({}), d({}); got {}, {}, {}", p.model.n(), p.model.m(),
                                p.r(), x.size(), u.size(), d.size()));
}

}  // namespace

PlantStep step_plant(const LtiPlant& plant, const VectorXd& x, const VectorXd& u, const VectorXd& d, Rng& rng) {
  check_step_dims(plant, x, u, d);
  const auto& m = plant.model;
  PlantStep s;
  s.y = m.C * x + m.D * u + draw(plant.meas_std, rng, m.p());
  s.x_next = m.A * x + m.B * u + plant.H * d + draw(plant.proc_std, rng, m.n());
  if (!s.x_next.allFinite()) numerical_error("plant state diverged (non-finite)");
  return s;
}

void DisturbanceModel::validate() const {
  if (S.rows() != S.cols()) dimension_error("S must be square");
  if (E.cols() != S.rows()) dimension_error("E column count must equal the size of S");
  if (w0.size() != S.rows()) dimension_error("w(0) must match the size of S");
  if (S.rows() == 0) return;
  VectorXcd ev = eigenvalues(S);
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    double a = std::abs(ev(i));
    if (a > 1.0 + 1e-9) config_error(fmt::format("disturbance generator eigenvalue {:.6g} lies outside the unit disk", a));
    if (std::abs(a - 1.0) <= 1e-9) {
      int mult = 0;
      for (Eigen::Index j = 0; j < ev.size(); ++j)
        if (std::abs(ev(j) - ev(i)) < 1e-6) ++mult;
      if (mult > 1) config_error("unit-circle eigenvalues of the disturbance generator must be simple");
    }
  }
}

std::pair<VectorXd, VectorXd> step_disturbance(const DisturbanceModel& dm, const VectorXd& w) {
  return {dm.S * w, dm.E * w};
}

DisturbanceModel sinusoid_disturbance(double freq_hz, double Ts, double amplitude, double phase) {
  const double th = 2.0 * kPi * freq_hz * Ts;
  DisturbanceModel dm;
  dm.S.resize(2, 2);
  dm.S << std::cos(th), -std::sin(th), std::sin(th), std::cos(th);
  dm.E.resize(1, 2);
  dm.E << amplitude, 0.0;
  dm.w0.resize(2);
  dm.w0 << std::cos(phase), std::sin(phase);
  return dm;
}

void SaturationSpec::validate() const {
  if (u_min.size() != u_max.size()) dimension_error("u_min and u_max must have equal length");
  for (Eigen::Index i = 0; i < u_min.size(); ++i)
    if (!(u_min(i) < u_max(i))) config_error(fmt::format("saturation channel {} needs u_min < u_max", i));
}

SaturationSpec SaturationSpec::symmetric(int m, double limit) {
  SaturationSpec s;
  s.u_min = VectorXd::Constant(m, -limit);
  s.u_max = VectorXd::Constant(m, limit);
  return s;
}

VectorXd saturate(const VectorXd& u, const SaturationSpec& spec) {
  if (u.size() != spec.u_max.size()) dimension_error("saturation size mismatch");
  VectorXd v(u.size());
  for (Eigen::Index i = 0; i < u.size(); ++i) v(i) = std::clamp(u(i), spec.u_min(i), spec.u_max(i));
  return v;
}

VectorXd dead_zone(const VectorXd& u, const SaturationSpec& spec) { return u - saturate(u, spec); }

PlantStep polynomial_plant_step(const PolynomialPlant& plant, const VectorXd& x, const VectorXd& u, const VectorXd& d,
                                Rng& rng) {
  if (!std::isfinite(plant.kappa)) config_error("kappa must be finite");
  PlantStep s = step_plant(plant.linear, x, u, d, rng);
  if (plant.kappa != 0.0) {
    double v = plant.selector.dot(x);
    s.x_next -= plant.kappa * v * v * v * plant.injector;
    if (!s.x_next.allFinite()) numerical_error("polynomial plant state diverged (non-finite)");
  }
  return s;
}

namespace {

template <class StepFn>
MatrixXd run(const StepFn& step, int p, const MatrixXd& u, const MatrixXd& d, const VectorXd& x0) {
  if (u.rows() != d.rows()) dimension_error("input and disturbance sequences must have equal length");
  MatrixXd y(u.rows(), p);
  VectorXd x = x0;
  for (Eigen::Index k = 0; k < u.rows(); ++k) {
    PlantStep s = step(x, u.row(k).transpose(), d.row(k).transpose());
    y.row(k) = s.y.transpose();
    x = std::move(s.x_next);
  }
  return y;
}

}  // namespace

MatrixXd simulate(const LtiPlant& plant, const MatrixXd& u, const MatrixXd& d, const VectorXd& x0, Rng& rng) {
  plant.validate();
  return run([&](const VectorXd& x, const VectorXd& uk, const VectorXd& dk) { return step_plant(plant, x, uk, dk, rng); },
             plant.model.p(), u, d, x0);
}

MatrixXd simulate(const PolynomialPlant& plant, const MatrixXd& u, const MatrixXd& d, const VectorXd& x0, Rng& rng) {
  plant.linear.validate();
  return run(
      [&](const VectorXd& x, const VectorXd& uk, const VectorXd& dk) {
        return polynomial_plant_step(plant, x, uk, dk, rng);
      },
      plant.linear.model.p(), u, d, x0);
}

void c2d_zoh(const MatrixXd& Ac, const MatrixXd& Bc, double Ts, MatrixXd& A, MatrixXd& B) {
  const Eigen::Index n = Ac.rows(), m = Bc.cols();
  MatrixXd blk = MatrixXd::Zero(n + m, n + m);
  blk.topLeftCorner(n, n) = Ac * Ts;
  blk.topRightCorner(n, m) = Bc * Ts;
  MatrixXd e = blk.exp();
  A = e.topLeftCorner(n, n);
  B = e.topRightCorner(n, m);
}

LtiPlant benchmark_plant() {
  const double zeta[3] = {0.01, 0.005, 0.02};
  const double bm[3][2] = {{1.0, 0.8}, {-0.6, 0.9}, {0.4, -0.5}};
  const double hm[3] = {0.7, 0.5, 0.3};
  const double cm[3] = {1.0, 0.8, 0.6};
  MatrixXd Ac = MatrixXd::Zero(6, 6), BHc = MatrixXd::Zero(6, 3), C = MatrixXd::Zero(1, 6);
  for (int i = 0; i < 3; ++i) {
    const double w = 2.0 * kPi * kBenchmarkModesHz[i];
    Ac(2 * i, 2 * i + 1) = 1.0;
    Ac(2 * i + 1, 2 * i) = -w * w;
    Ac(2 * i + 1, 2 * i + 1) = -2.0 * zeta[i] * w;
    BHc(2 * i + 1, 0) = bm[i][0] * w * w * 0.01;
    BHc(2 * i + 1, 1) = bm[i][1] * w * w * 0.01;
    BHc(2 * i + 1, 2) = hm[i] * w * w * 0.01;
    C(0, 2 * i + 1) = cm[i] / w * 10.0;
  }
  MatrixXd A, BH;
  c2d_zoh(Ac, BHc, kBenchmarkTs, A, BH);
  LtiPlant p;
  p.model.A = A;
  p.model.B = BH.leftCols(2);
  p.model.C = C;
  p.model.D = MatrixXd::Zero(1, 2);
  p.model.Ts = kBenchmarkTs;
  p.model.input_labels = {"piezo1", "piezo2"};
  p.model.output_labels = {"velocity"};
  p.H = BH.rightCols(1);
  return p;
}

std::array<double, 4> hb_cubic(const HbCoefficients& c, double w) {
  const double KI = c.KI_slope * w, KNLI = c.KNLI_slope * w;
  const double w2M = w * w * c.M;
  const double a3 = c.KNLR * c.KNLR + KNLI * KNLI;
  const double a2 = 2.0 * (c.KR * c.KNLR + KI * KNLI) - 2.0 * w2M * c.KNLR;
  const double a1 = w2M * w2M + c.KR * c.KR + KI * KI - 2.0 * w2M * c.KR;
  const double a0 = -c.Q * c.Q;
  return {a3, a2, a1, a0};
}

double hb_residual(const HbCoefficients& c, double omega, double r) {
  auto a = hb_cubic(c, omega);
  const double s = r * r;
  const double t[4] = {a[0] * s * s * s, a[1] * s * s, a[2] * s, a[3]};
  double sum = t[0] + t[1] + t[2] + t[3];
  double mag = std::abs(t[0]) + std::abs(t[1]) + std::abs(t[2]) + std::abs(t[3]);
  return mag > 0.0 ? std::abs(sum) / mag : 0.0;
}

namespace {

double polish(double a3, double a2, double a1, double a0, double s) {
  auto f = [&](double x) { return ((a3 * x + a2) * x + a1) * x + a0; };
  auto df = [&](double x) { return (3.0 * a3 * x + 2.0 * a2) * x + a1; };
  for (int it = 0; it < 4; ++it) {
    double d = df(s);
    if (d == 0.0) break;
    double next = s - f(s) / d;
    if (!std::isfinite(next) || std::abs(f(next)) >= std::abs(f(s))) break;
    s = next;
  }
  return s;
}

}  // namespace

std::vector<double> real_cubic_roots(double a3, double a2, double a1, double a0) {
  std::vector<double> out;
  if (a3 == 0.0) {
    if (a2 == 0.0) {
      if (a1 != 0.0) out.push_back(-a0 / a1);
      return out;
    }
    double disc = a1 * a1 - 4.0 * a2 * a0;
    if (disc < 0.0) return out;
    double sq = std::sqrt(disc);
    double q = -0.5 * (a1 + std::copysign(sq, a1));
    if (q != 0.0) out.push_back(q / a2);
    if (q != 0.0) out.push_back(a0 / q);
    else out.push_back(0.0);
    std::sort(out.begin(), out.end());
    return out;
  }
  const double b = a2 / a3, c = a1 / a3, d = a0 / a3;
  const double p = c - b * b / 3.0;
  const double q = 2.0 * b * b * b / 27.0 - b * c / 3.0 + d;
  const double shift = -b / 3.0;
  const double disc = q * q / 4.0 + p * p * p / 27.0;
  if (disc < 0.0) {
    // three distinct real roots
    const double m = 2.0 * std::sqrt(-p / 3.0);
    const double arg = std::clamp(3.0 * q / (p * m), -1.0, 1.0);
    const double th = std::acos(arg) / 3.0;
    for (int k = 0; k < 3; ++k) out.push_back(m * std::cos(th - 2.0 * kPi * k / 3.0) + shift);
  } else {
    const double sq = std::sqrt(disc);
    const double u = std::cbrt(-q / 2.0 + sq), v = std::cbrt(-q / 2.0 - sq);
    const double t1 = u + v + shift;
    out.push_back(t1);
    // complex pair -(u+v)/2 + shift +- j sqrt(3)/2 (u - v): keep when numerically real
    const double re = -(u + v) / 2.0 + shift;
    const double im = std::sqrt(3.0) / 2.0 * std::abs(u - v);
    if (im <= 1e-8 * std::abs(cd(re, im))) out.push_back(re);
  }
  for (auto& s : out) s = polish(a3, a2, a1, a0, s);
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<HbPoint> hb_amplitude_curve(const HbCoefficients& c, const VectorXd& omegas) {
  if (c.M == 0.0) config_error("harmonic-balance mass coefficient must be nonzero");
  std::vector<HbPoint> pts;
  for (Eigen::Index i = 0; i < omegas.size(); ++i) {
    const double w = omegas(i);
    if (!std::isfinite(w)) config_error("frequency grid must be finite");
    auto a = hb_cubic(c, w);
    HbPoint pt;
    pt.omega = w;
    std::vector<double> s;
    if (c.Q == 0.0) {
      s.push_back(0.0);
      for (double v : real_cubic_roots(0.0, a[0], a[1], a[2]))
        if (v > 0.0) s.push_back(v);
    } else {
      for (double v : real_cubic_roots(a[0], a[1], a[2], a[3]))
        if (v >= 0.0) s.push_back(v);
    }
    std::sort(s.begin(), s.end());
    s.erase(std::unique(s.begin(), s.end(), [](double x, double y) { return std::abs(x - y) <= 1e-12 * std::max(std::abs(x), std::abs(y)); }),
            s.end());
    for (double v : s) pt.r.push_back(std::sqrt(v));
    pt.no_root = pt.r.empty();
    pts.push_back(std::move(pt));
  }
  return pts;
}

}  // namespace avc
