#pragma once

#include <array>
#include <utility>
#include <vector>

#include "avc/error.hpp"
#include "avc/linalg.hpp"
#include "avc/sysid.hpp"

namespace avc {

struct LtiPlant {
  StateSpaceModel model;
  MatrixXd H;        // n x r disturbance input
  VectorXd meas_std; // per output, empty = noise free
  VectorXd proc_std; // per state, empty = noise free

  void validate() const;
  int r() const { return static_cast<int>(H.cols()); }
};

struct PlantStep {
  VectorXd x_next;
  VectorXd y;  // measured at the current state
};

// y = Cx + Du + v, x+ = Ax + Bu + Hd + w. Measurement noise is drawn before
// process noise at every step.
PlantStep step_plant(const LtiPlant& plant, const VectorXd& x, const VectorXd& u, const VectorXd& d, Rng& rng);

struct DisturbanceModel {
  MatrixXd S;
  MatrixXd E;
  VectorXd w0;
  void validate() const;
};

// (w_next, d) with d = E w.
std::pair<VectorXd, VectorXd> step_disturbance(const DisturbanceModel& dm, const VectorXd& w);

// Rotation generator producing amplitude*cos(2 pi f k Ts + phase).
DisturbanceModel sinusoid_disturbance(double freq_hz, double Ts, double amplitude = 1.0, double phase = 0.0);

struct SaturationSpec {
  VectorXd u_min, u_max;
  void validate() const;
  static SaturationSpec symmetric(int m, double limit);
};

VectorXd saturate(const VectorXd& u, const SaturationSpec& spec);
VectorXd dead_zone(const VectorXd& u, const SaturationSpec& spec);

struct PolynomialPlant {
  LtiPlant linear;
  double kappa = 0.0;
  VectorXd selector;  // s, state to scalar
  VectorXd injector;  // g, scalar back into the state
};

// x+ = Ax + Bu + Hd - kappa (s'x)^3 g (+ noise as in step_plant).
PlantStep polynomial_plant_step(const PolynomialPlant& plant, const VectorXd& x, const VectorXd& u, const VectorXd& d,
                                Rng& rng);

// Runs a plant over input/disturbance sequences (rows are time steps) from x0.
MatrixXd simulate(const LtiPlant& plant, const MatrixXd& u, const MatrixXd& d, const VectorXd& x0, Rng& rng);
MatrixXd simulate(const PolynomialPlant& plant, const MatrixXd& u, const MatrixXd& d, const VectorXd& x0, Rng& rng);

// Zero-order-hold discretization of (Ac, [Bc Hc]) with expm of the block matrix.
void c2d_zoh(const MatrixXd& Ac, const MatrixXd& Bc, double Ts, MatrixXd& A, MatrixXd& B);

// Synthetic 6th-order three-mode beam: two inputs, one velocity output, one
// disturbance channel. Numbers are illustrative, not measured.
LtiPlant benchmark_plant();
constexpr double kBenchmarkTs = 5e-4;
constexpr std::array<double, 3> kBenchmarkModesHz{14.0, 87.0, 232.0};

struct HbCoefficients {
  double M = 1.0;
  double KR = 0.0;
  double KI_slope = 0.0;   // K^I = KI_slope * omega
  double KNLR = 0.0;
  double KNLI_slope = 0.0; // K_NL^I = KNLI_slope * omega
  double Q = 0.0;
};

// Cubic in s = r^2: {a3, a2, a1, a0}.
std::array<double, 4> hb_cubic(const HbCoefficients& c, double omega);

// |p(r^2)| relative to the sum of term magnitudes.
double hb_residual(const HbCoefficients& c, double omega, double r);

struct HbPoint {
  double omega = 0.0;
  std::vector<double> r;  // ascending, non-negative
  bool no_root = false;
};

std::vector<HbPoint> hb_amplitude_curve(const HbCoefficients& c, const VectorXd& omegas);

// Real roots of a3 s^3 + a2 s^2 + a1 s + a0, ascending, polished.
std::vector<double> real_cubic_roots(double a3, double a2, double a1, double a0);

}  // namespace avc
