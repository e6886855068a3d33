#pragma once

#include <vector>

#include "avc/error.hpp"
#include "avc/linalg.hpp"

namespace avc {

enum class Window { hann, rect };

struct SpectralConfig {
  Window window = Window::hann;
  int n_averages = 1;
  double overlap = 0.0;    // fraction in [0,1)
  int discard_periods = 0; // leading blocks of fft_length samples dropped
  int fft_length = 1024;
  double f_sample = 1.0;
};

struct FrmEstimate {
  double f_sample = 1.0;
  VectorXd freqs;                      // Hz
  std::vector<MatrixXcd> G;            // n_y x n_u per bin
  std::vector<MatrixXd> var_noise;     // variance of G, per entry
  std::vector<MatrixXd> var_total;
  std::vector<MatrixXd> coherence;     // H1 mode only
  std::vector<MatrixXd> var_y;         // LPM output noise variance per (output, experiment)
  std::vector<bool> valid;
  std::vector<bool> clamped;           // var_total raised to var_noise at this bin
  int dof = 0;                         // LPM residual degrees of freedom
  Diagnostics diag;

  int n_bins() const { return static_cast<int>(freqs.size()); }
  int n_y() const { return G.empty() ? 0 : static_cast<int>(G[0].rows()); }
  int n_u() const { return G.empty() ? 0 : static_cast<int>(G[0].cols()); }
};

// Welch H1 estimate. u is one input channel; y has one column per output.
FrmEstimate h1_estimate(const VectorXd& u, const MatrixXd& y, const SpectralConfig& cfg);

struct LpmConfig {
  int poly_order = 6;   // R
  int dof_target = 8;
  int n_inputs = 1;
  int period_length = 0;       // samples per period N
  std::vector<int> lines;      // excited bins of one period (1-based)
  int discard_periods = 0;
  double f_sample = 1.0;

  // n_w from 2 n_w + 1 - (R+1)(n_u+1) = dof, rounded up.
  int half_window() const;
};

// One multi-reference experiment: samples x inputs and samples x outputs,
// periods stacked in time.
struct LpmRecord {
  int realization = 0;
  int experiment = 0;
  MatrixXd u;
  MatrixXd y;
};

FrmEstimate lpm_estimate(const std::vector<LpmRecord>& records, const LpmConfig& cfg);

struct TransientReport {
  MatrixXd deviation_db;  // periods x bins, |Y_p - Y_P| in dB
  VectorXd period_db;     // per period, energy of the difference over all bins
};

constexpr double kDbFloor = -300.0;

TransientReport transient_contribution(const VectorXd& record, int period_length);

double to_db_power(double v);

}  // namespace avc
