#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "avc/error.hpp"
#include "avc/linalg.hpp"

namespace avc {

struct MultisineSpec {
  double f_sample = 1.0;
  int n_samples = 0;               // samples per period, power of two
  std::vector<int> lines;          // 1-based bin indices, DC excluded
  std::vector<double> amplitudes;  // one per line
  std::vector<double> phases;      // radians, one per line
  double rms_target = 1.0;

  void validate() const;
  int n_lines() const { return static_cast<int>(lines.size()); }
};

// Flat-amplitude spec over the consecutive lines first..first+n_lines-1, zero phases.
MultisineSpec flat_multisine(double f_sample, int n_samples, int first_line, int n_lines,
                             double rms_target = 1.0);

VectorXd synthesize_multisine(const MultisineSpec& spec);

double crest_factor(const VectorXd& x);

std::vector<double> schroeder_phases(int n_lines);
std::vector<double> random_phases(int n_lines, Rng& rng);

enum class MixingKind { hadamard, orthogonal, identity };

struct MixingMatrix {
  MixingKind kind = MixingKind::identity;
  MatrixXcd T;
  int n_inputs() const { return static_cast<int>(T.rows()); }
};

MixingMatrix hadamard_mixing(int n_inputs);
MixingMatrix orthogonal_mixing(int n_inputs);
MixingMatrix identity_mixing(int n_inputs);

struct CfIteration {
  int iter = 0;
  double p = 0.0;      // smoothing exponent in force for this iteration
  double cf = 0.0;     // crest factor of the current iterate
  double best_cf = 0.0;
  long fevals = 0;     // cumulative objective evaluations
};

struct CfResult {
  MultisineSpec spec;
  double cf_initial = 0.0;
  double cf_final = 0.0;
  std::vector<CfIteration> log;
  Diagnostics diag;
};

struct CfOptions {
  int max_iters = 4000;
  double tol = 1e-9;         // relative objective change that ends a p-stage
  double p_start = 4.0;
  double p_max = 1024.0;
  int stage_iters = 400;     // iteration cap per p-stage
};

// Quasi-Newton (DFP) phase optimization on a smoothed peak objective.
CfResult minimize_crest_factor(const MultisineSpec& spec, const CfOptions& opt = {});

enum class PhaseMode { random, schroeder, cf_minimized };

struct ExcitationSet {
  MultisineSpec spec;
  int n_inputs = 1;
  std::optional<MixingMatrix> mixing;
  int realizations = 1;
  int periods = 2;
  std::uint64_t seed = 0;
  PhaseMode mode = PhaseMode::schroeder;
  bool nonlinear_variance_requested = false;
  CfOptions cf_options;
};

// One experiment of one realization: periods*n_samples rows, one column per input.
struct ExperimentRecord {
  int realization = 0;
  int experiment = 0;
  MatrixXd u;
};

struct RealizedExcitation {
  std::vector<ExperimentRecord> records;
  std::vector<MultisineSpec> base;  // base multisine per realization
  MatrixXcd T;                      // mixing used (identity when absent)
  Diagnostics diag;
};

RealizedExcitation realize_experiment(const ExcitationSet& set);

}  // namespace avc
