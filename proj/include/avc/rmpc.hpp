#pragma once

#include <cstdint>
#include <deque>
#include <optional>
#include <vector>

#include "avc/error.hpp"
#include "avc/linalg.hpp"
#include "avc/plantlab.hpp"
#include "avc/sysid.hpp"

namespace avc {

// Gamma(z) = z^nw + alpha_1 z^(nw-1) + ... + alpha_nw.
struct InternalModel {
  VectorXd alpha;
  VectorXcd roots;
  int nw() const { return static_cast<int>(alpha.size()); }
};

InternalModel internal_model_from(const MatrixXd& S);

struct AugmentedSystem {
  MatrixXd A, B, C;
  int n = 0, p = 0, m = 0, nw = 0;
  int dim() const { return static_cast<int>(A.rows()); }
};

// Block layout X = [x_f; y(k-1); ...; y(k-nw)]. Warns when the plant has a
// transmission zero at a root of Gamma.
AugmentedSystem augment(const StateSpaceModel& plant, const InternalModel& im, Diagnostics* diag = nullptr);

// Causal Gamma(q^-1) filter with its own zero-initialized history.
class GammaFilter {
 public:
  GammaFilter() = default;
  GammaFilter(const VectorXd& alpha, int dim);
  VectorXd step(const VectorXd& x);  // x(k) + sum alpha_i x(k-i)

 private:
  VectorXd alpha_;
  std::deque<VectorXd> hist_;  // most recent first
};

// Recursion x(k) = x_f(k) - sum alpha_i x(k-i).
class InverseGammaFilter {
 public:
  InverseGammaFilter() = default;
  InverseGammaFilter(const VectorXd& alpha, int dim);
  VectorXd step(const VectorXd& xf);
  const std::deque<VectorXd>& history() const { return hist_; }

 private:
  VectorXd alpha_;
  std::deque<VectorXd> hist_;
};

// Filters every row of a sequence (rows = time), zero history before the start.
MatrixXd filter_signal(const MatrixXd& seq, const InternalModel& im);
MatrixXd inverse_filter_signal(const MatrixXd& seq, const InternalModel& im);

struct LaguerreBasis {
  double a = 0.0;
  MatrixXd L;  // horizon x N_l, L(k, i) = l_{i+1}(k)
  int size() const { return static_cast<int>(L.cols()); }
};

LaguerreBasis laguerre_basis(double a, int n_l, int horizon);

struct HildrethResult {
  VectorXd eta;
  VectorXd lambda;
  int iterations = 0;
  bool converged = false;
  double feasibility = 0.0;  // max constraint violation
  std::vector<int> active;
};

// min 0.5 eta'E eta + eta'F  s.t.  M eta <= g, by dual coordinate ascent.
// lambda0 warm-starts the multipliers when its size matches the constraint count.
HildrethResult hildreth_solve(const MatrixXd& E, const VectorXd& F, const MatrixXd& M, const VectorXd& g,
                              int max_iters = 2000, double tol = 1e-9, const VectorXd* lambda0 = nullptr);

struct KktReport {
  double stationarity = 0.0;
  double primal = 0.0;
  double complementarity = 0.0;
  double dual = 0.0;
};

KktReport kkt_check(const MatrixXd& E, const VectorXd& F, const MatrixXd& M, const VectorXd& g,
                    const HildrethResult& r);

struct KalmanSchedule {
  std::vector<MatrixXd> gains;  // K_f(0), K_f(1), ...
  MatrixXd K_ss;
  MatrixXd P_ss;
  int iterations = 0;
};

KalmanSchedule kalman_schedule(const MatrixXd& A, const MatrixXd& C, const MatrixXd& Qf, const MatrixXd& Rf,
                               const MatrixXd& Pf0, int horizon);

// Windowed, exponentially weighted least squares for z = H d.
class RlsEstimator {
 public:
  RlsEstimator() = default;
  RlsEstimator(const MatrixXd& H, double lambda, int window);
  const VectorXd& update(const VectorXd& z);
  const VectorXd& estimate() const { return theta_; }
  int resets() const { return resets_; }

 private:
  MatrixXd H_;
  double lambda_ = 1.0;
  int window_ = 0;  // 0 = unlimited (recursive form)
  std::deque<VectorXd> z_;
  VectorXd theta_;
  MatrixXd P_;
  int resets_ = 0;
};

// Cost of a predicted trajectory with exponential data weighting, starting at X0.
double weighted_cost(const MatrixXd& A, const MatrixXd& B, const MatrixXd& Q, const MatrixXd& R, double beta,
                     const VectorXd& X0, const std::vector<VectorXd>& uf);

// Cost with the scaled dynamics A/beta, B/beta and unweighted stage costs.
double scaled_cost(const MatrixXd& A, const MatrixXd& B, const MatrixXd& Q, const MatrixXd& R, double beta,
                   const VectorXd& Xb0, const std::vector<VectorXd>& ub);

struct RmpcConfig {
  int N = 20;
  std::optional<MatrixXd> Qbar;  // default 10 C_aug' C_aug
  std::optional<MatrixXd> Rbar;  // default 3e-3 I
  double beta = 2.1;
  double gamma = 0.95;
  bool prescribed_stability = true;
  std::optional<SaturationSpec> saturation;
  std::vector<double> a;   // per input, default 0.76
  std::vector<int> n_l;    // per input, default 5
  bool laguerre_on_scaled_input = false;
  std::optional<MatrixXd> Qf, Rf, Pf0;  // Qf default: kalman_qu B_aug B_aug^T + kalman_qfic I
  double kalman_qu = 4.9e-9;
  double kalman_qfic = 1e-9;
  double rls_lambda = 0.9;
  int rls_window = -1;       // -1 = 5 n_w
  bool kalman_use_schedule = false;
  int kalman_horizon = 200;
  int hildreth_max_iters = 150;
  double hildreth_tol = 1e-9;
  bool hildreth_warm_start = true;
};

struct RmpcController {
  RmpcConfig cfg;
  StateSpaceModel plant;
  MatrixXd H;
  InternalModel im;
  AugmentedSystem aug;
  std::vector<LaguerreBasis> bases;
  MatrixXd Qbar, Rbar, Q, R, P_inf;
  MatrixXd K_lqr;
  VectorXcd lqr_poles;
  // QP template: J = 0.5 eta'E eta + eta'(Fx X) + const
  MatrixXd E, Fx;
  std::vector<MatrixXd> Luf;  // u_f(k+j) = Luf[j] eta
  std::vector<MatrixXd> Tu;   // physical u(k+j) = Tu[j] eta + history terms
  MatrixXd K_mpc;             // unconstrained u_f(k) = -K_mpc X
  KalmanSchedule kalman;
  MatrixXd ff_gain;           // (B'B)^{-1} B'H
  Diagnostics diag;

  int n_vars() const { return static_cast<int>(E.rows()); }
  VectorXcd closed_loop_poles() const;
};

RmpcController synthesize(const StateSpaceModel& plant, const MatrixXd& H, const DisturbanceModel& dist,
                          const RmpcConfig& cfg);

// Riccati solution for (A/gamma, B/gamma, Qbar, Rbar) by fixed-point iteration.
MatrixXd prescribed_stability_riccati(const MatrixXd& A, const MatrixXd& B, const MatrixXd& Qbar,
                                      const MatrixXd& Rbar, double gamma, int* iterations = nullptr);

// Unconstrained dense MPC over u_f(k..k+N-1): returns the first-move gain.
MatrixXd dense_mpc_gain(const MatrixXd& A, const MatrixXd& B, const MatrixXd& Q, const MatrixXd& R, double beta,
                        int N);

struct QpInstance {
  VectorXd F;
  MatrixXd M;
  VectorXd g;
};

// Linear term and box rows for the current estimate, input history (most
// recent first) and feedforward offset.
QpInstance build_qp(const RmpcController& c, const VectorXd& Xhat, const std::deque<VectorXd>& u_hist,
                    const VectorXd& u_offset);

struct DisturbanceScenario {
  DisturbanceModel generator;
  double gain = 1.0;
};

struct ClosedLoopOptions {
  int steps = 10000;
  bool feedforward = false;
  bool control = true;  // false: open loop, u = 0
  std::uint64_t seed = 0;
  VectorXd x0;
};

struct SimTrace {
  VectorXd t;
  MatrixXd d, y, y_hat, u_applied, u_unsat, d_hat;
  std::vector<int> qp_iters;
  std::vector<int> sat_active;
  int qp_unconverged = 0;
  bool truncated = false;
  Diagnostics diag;
  int steps() const { return static_cast<int>(t.size()); }
};

SimTrace closed_loop_run(const LtiPlant& plant, const RmpcController& ctrl, const DisturbanceScenario& scen,
                         const ClosedLoopOptions& opt);

// Amplitude of the component at freq_hz over the last `window` samples of a column.
double tone_amplitude(const VectorXd& x, double freq_hz, double Ts, int window);

}  // namespace avc
