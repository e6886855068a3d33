#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "avc/excitation.hpp"
#include "avc/linalg.hpp"
#include "avc/rmpc.hpp"
#include "avc/spectral.hpp"
#include "avc/sysid.hpp"

namespace avc {

using json = nlohmann::json;
namespace fs = std::filesystem;

// Shortest text that round-trips a double (%.17g).
std::string format_double(double v);

std::string csv_table(const std::vector<std::string>& header, const MatrixXd& data);

struct CsvTable {
  std::vector<std::string> header;
  MatrixXd data;
  int col(const std::string& name) const;  // -1 when absent
};

CsvTable parse_csv(const std::string& text);
CsvTable read_csv(const fs::path& path);

void write_text(const fs::path& path, const std::string& text);
std::string read_text(const fs::path& path);

json matrix_to_json(const MatrixXd& m);  // row-major nested arrays
MatrixXd matrix_from_json(const json& j);
json complex_to_json(const VectorXcd& v);  // [[re, im], ...]

json model_to_json(const StateSpaceModel& sys);
StateSpaceModel model_from_json(const json& j);

json multisine_to_json(const MultisineSpec& s);
MultisineSpec multisine_from_json(const json& j);

// Columns freq_hz, then per (i, j): re_G_i_j, im_G_i_j, var_noise_i_j, var_total_i_j, coherence_i_j; then valid.
std::string frm_csv(const FrmEstimate& frm);
FrmEstimate frm_from_csv(const CsvTable& t, double f_sample);

// Columns k, t, d*, y*, y_hat*, u_applied*, u_unsat*, d_hat*, qp_iters, sat_active.
std::string trace_csv(const SimTrace& tr);

json controller_to_json(const RmpcController& c);

std::string sha256_hex(const std::string& bytes);
std::string sha256_file(const fs::path& path);

struct RunManifest {
  std::string tool_version;
  std::string command;
  std::string config_hash;
  std::uint64_t seed = 0;
  int jobs = 1;
  std::vector<std::pair<std::string, std::string>> inputs;   // path, digest
  std::vector<std::pair<std::string, std::string>> outputs;  // path, digest
  std::vector<std::pair<std::string, double>> stage_seconds;
  json to_json() const;
};

}  // namespace avc
