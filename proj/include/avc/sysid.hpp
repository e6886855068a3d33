#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "avc/error.hpp"
#include "avc/linalg.hpp"
#include "avc/spectral.hpp"

namespace avc {

struct StateSpaceModel {
  MatrixXd A, B, C, D;
  double Ts = 1.0;
  std::vector<std::string> input_labels, output_labels;

  int n() const { return static_cast<int>(A.rows()); }
  int m() const { return static_cast<int>(B.cols()); }
  int p() const { return static_cast<int>(C.rows()); }
  bool stable() const;
  void validate() const;
  MatrixXcd frf(cd z) const;  // C (zI - A)^{-1} B + D
};

// Exact model FRF on the uniform grid omega_k = pi k / M, k = 0..M.
FrmEstimate frm_from_model(const StateSpaceModel& sys, int M);

// Model FRF at the bins of an existing estimate.
std::vector<MatrixXcd> model_frf(const StateSpaceModel& sys, const FrmEstimate& grid);

// Markov parameter estimates h_0 .. h_{2M-1} from an FRM sampled on [0, Nyquist].
std::vector<MatrixXd> impulse_from_frm(const FrmEstimate& frm, Diagnostics* diag = nullptr);

struct HankelConfig {
  int q = 0;
  int r = 0;
  int n = 0;
};

enum class Weighting { none, noise };

struct IdentResult {
  StateSpaceModel model;
  double objective = 0.0;
  VectorXcd poles;
  std::vector<bool> pole_stable;
  VectorXd singular_values;
  int iterations = 0;
  bool flagged = false;  // refinement stalled or identification degenerate
  Diagnostics diag;
};

// Normalized misfit sum |w (G - Ghat)|^2 / sum |w G|^2 over valid bins.
double frm_misfit(const StateSpaceModel& sys, const FrmEstimate& frm, Weighting w);

// Relative FRF error max_k ||G_k - Ghat_k||_F / ||G_k||_F.
double max_relative_frf_error(const StateSpaceModel& sys, const FrmEstimate& frm);

IdentResult subspace_identify(const FrmEstimate& frm, const HankelConfig& cfg);
IdentResult subspace_identify_weighted(const FrmEstimate& frm, const HankelConfig& cfg);

// Least-squares (B, D) for fixed (A, C); weights 1/sigma per entry when requested.
void fit_bd(const MatrixXd& A, const MatrixXd& C, const FrmEstimate& frm, Weighting w, MatrixXd& B, MatrixXd& D);

enum class QStrategy { rule_of_thumb, exhaustive, strided };

struct ScanRow {
  int n = 0;
  int q = 0;
  double objective = 0.0;
  VectorXcd poles;
  bool all_stable = false;
};

struct ScanResult {
  std::vector<ScanRow> rows;
  int recommended = -1;  // index into rows, -1 if no all-stable model
};

ScanResult stability_scan(const FrmEstimate& frm, const std::vector<int>& n_values, QStrategy strategy,
                          Weighting w = Weighting::none, int stride = 5);

struct RefineOptions {
  int max_iters = 100;
  double mu0 = 1e-3;
  double mu_max = 1e12;
};

IdentResult refine_output_error(const IdentResult& init, const FrmEstimate& frm, Weighting w,
                                const RefineOptions& opt = {});

// Transmission zeros of the SISO channel (out, in) from the system pencil.
VectorXcd siso_zeros(const StateSpaceModel& sys, int out, int in);

struct Ellipse {
  cd center;
  double semi_major = 0.0;
  double semi_minor = 0.0;
  double angle = 0.0;  // radians, major axis direction
  int count = 0;
};

struct McConfig {
  HankelConfig hankel;
  Weighting weighting = Weighting::none;
  std::uint64_t seed = 0;
  std::optional<VectorXcd> reference_poles;  // defaults to the nominal identified poles
};

struct McResult {
  StateSpaceModel nominal;
  std::vector<VectorXcd> poles;                 // per successful run
  std::vector<std::vector<VectorXcd>> zeros;    // per run, per channel (row-major out, in)
  std::vector<MatrixXd> env_min, env_max;       // |G| envelope per bin
  std::vector<Ellipse> ellipses;                // per reference pole
  VectorXcd reference;
  int failed = 0;
  int misassigned = 0;
  int samples = 0;
  double misassignment_rate() const { return samples ? static_cast<double>(misassigned) / samples : 0.0; }
  Diagnostics diag;
};

McResult monte_carlo_uncertainty(const FrmEstimate& frm, double perturb_db, int n_runs, const McConfig& cfg);

}  // namespace avc
