#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "avc/io.hpp"
#include "avc/plantlab.hpp"
#include "avc/rmpc.hpp"

namespace avc {

inline constexpr const char* kToolVersion = "0.1.0";

struct CommandOptions {
  fs::path out_dir = "out";
  std::optional<std::uint64_t> seed;  // overrides the config seed
  int jobs = 1;
  fs::path config_path;  // digested into the manifest when set
};

struct CommandResult {
  std::vector<fs::path> outputs;
  json report;
  Diagnostics diag;
};

json load_config(const fs::path& path);

// The seed is mandatory: from --seed or the config's top-level "seed".
std::uint64_t resolve_seed(const json& cfg, const CommandOptions& opt);

LtiPlant plant_from_config(const json& cfg);
ExcitationSet excitation_from_config(const json& cfg, const LtiPlant& plant, std::uint64_t seed);

struct SimulatedData {
  std::vector<LpmRecord> records;
  double f_sample = 1.0;
  int period_length = 0;
  std::vector<int> lines;
};

SimulatedData simulate_from_config(const json& cfg, const LtiPlant& plant, const RealizedExcitation& ex,
                                   std::uint64_t seed);
FrmEstimate estimate_from_config(const json& cfg, const SimulatedData& data, int n_inputs);

// Adds DC and Nyquist bins (real parts of the outermost lines, low weight) so an
// estimate over lines 1..N/2-1 sits on the uniform grid the realization needs.
FrmEstimate pad_to_full_grid(const FrmEstimate& frm, int period_length);

RmpcConfig rmpc_config_from(const json& cfg, int m);

// Block-diagonal rotation generator for the listed frequencies.
DisturbanceModel tone_generator(const std::vector<double>& freqs_hz, const std::vector<double>& amplitudes, double Ts);

CommandResult cmd_excite(const json& cfg, const CommandOptions& opt);
CommandResult cmd_simulate(const json& cfg, const CommandOptions& opt);
CommandResult cmd_estimate_frm(const json& cfg, const CommandOptions& opt);
CommandResult cmd_identify(const json& cfg, const CommandOptions& opt);
CommandResult cmd_mpc_design(const json& cfg, const CommandOptions& opt);
CommandResult cmd_closedloop(const json& cfg, const CommandOptions& opt);
CommandResult cmd_amplitude_curve(const json& cfg, const CommandOptions& opt);

}  // namespace avc
