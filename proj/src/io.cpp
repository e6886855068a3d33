#include "avc/io.hpp"

#include <fstream>
#include <sstream>

#include <fmt/format.h>
#include <openssl/evp.h>

namespace avc {

std::string format_double(double v) { return fmt::format("{:.17g}", v); }

std::string csv_table(const std::vector<std::string>& header, const MatrixXd& data) {
  if (static_cast<Eigen::Index>(header.size()) != data.cols()) dimension_error("CSV header and data widths differ");
  std::string out;
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (i) out += ',';
    out += header[i];
  }
  out += '\n';
  for (Eigen::Index r = 0; r < data.rows(); ++r) {
    for (Eigen::Index c = 0; c < data.cols(); ++c) {
      if (c) out += ',';
      out += format_double(data(r, c));
    }
    out += '\n';
  }
  return out;
}

int CsvTable::col(const std::string& name) const {
  for (std::size_t i = 0; i < header.size(); ++i)
    if (header[i] == name) return static_cast<int>(i);
  return -1;
}

namespace {

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream ss(line);
  while (std::getline(ss, cur, ',')) {
    while (!cur.empty() && (cur.back() == '\r' || cur.back() == ' ')) cur.pop_back();
    std::size_t b = cur.find_first_not_of(' ');
    out.push_back(b == std::string::npos ? std::string() : cur.substr(b));
  }
  return out;
}

}  // namespace

CsvTable parse_csv(const std::string& text) {
  CsvTable t;
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) config_error("CSV input is empty");
  t.header = split_line(line);
  std::vector<std::vector<double>> rows;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    auto cells = split_line(line);
    if (cells.size() != t.header.size())
      config_error(fmt::format("CSV line {} has {} fields, expected {}", lineno, cells.size(), t.header.size()));
    std::vector<double> r;
    r.reserve(cells.size());
    for (const auto& c : cells) {
      try {
        std::size_t pos = 0;
        r.push_back(std::stod(c, &pos));
      } catch (const std::exception&) {
        config_error(fmt::format("CSV line {}: '{}' is not a number", lineno, c));
      }
    }
    rows.push_back(std::move(r));
  }
  t.data.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(t.header.size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j) t.data(i, j) = rows[i][j];
  return t;
}

CsvTable read_csv(const fs::path& path) { return parse_csv(read_text(path)); }

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) config_error(fmt::format("cannot open {} for writing", path.string()));
  f << text;
  if (!f) config_error(fmt::format("write to {} failed", path.string()));
}

std::string read_text(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) config_error(fmt::format("cannot open {}", path.string()));
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

json matrix_to_json(const MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

MatrixXd matrix_from_json(const json& j) {
  if (!j.is_array()) config_error("matrix must be an array of rows");
  if (j.empty()) return MatrixXd(0, 0);
  const std::size_t cols = j[0].size();
  MatrixXd m(static_cast<Eigen::Index>(j.size()), static_cast<Eigen::Index>(cols));
  for (std::size_t r = 0; r < j.size(); ++r) {
    if (!j[r].is_array() || j[r].size() != cols) config_error("matrix rows must be arrays of equal length");
    for (std::size_t c = 0; c < cols; ++c) m(r, c) = j[r][c].get<double>();
  }
  return m;
}

json complex_to_json(const VectorXcd& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back({v(i).real(), v(i).imag()});
  return a;
}

json model_to_json(const StateSpaceModel& sys) {
  json j;
  j["Ts"] = sys.Ts;
  j["A"] = matrix_to_json(sys.A);
  j["B"] = matrix_to_json(sys.B);
  j["C"] = matrix_to_json(sys.C);
  j["D"] = matrix_to_json(sys.D);
  j["input_labels"] = sys.input_labels;
  j["output_labels"] = sys.output_labels;
  j["layout"] = "row-major";
  return j;
}

StateSpaceModel model_from_json(const json& j) {
  StateSpaceModel s;
  for (const char* k : {"A", "B", "C", "Ts"})
    if (!j.contains(k)) config_error(fmt::format("model JSON lacks '{}'", k));
  s.A = matrix_from_json(j["A"]);
  s.B = matrix_from_json(j["B"]);
  s.C = matrix_from_json(j["C"]);
  s.D = j.contains("D") ? matrix_from_json(j["D"]) : MatrixXd::Zero(s.C.rows(), s.B.cols());
  if (s.D.size() == 0) s.D = MatrixXd::Zero(s.C.rows(), s.B.cols());
  s.Ts = j["Ts"].get<double>();
  if (j.contains("input_labels")) s.input_labels = j["input_labels"].get<std::vector<std::string>>();
  if (j.contains("output_labels")) s.output_labels = j["output_labels"].get<std::vector<std::string>>();
  s.validate();
  return s;
}

json multisine_to_json(const MultisineSpec& s) {
  json j;
  j["f_sample"] = s.f_sample;
  j["n_samples"] = s.n_samples;
  j["lines"] = s.lines;
  j["amplitudes"] = s.amplitudes;
  j["phases"] = s.phases;
  j["rms_target"] = s.rms_target;
  return j;
}

MultisineSpec multisine_from_json(const json& j) {
  MultisineSpec s;
  s.f_sample = j.at("f_sample").get<double>();
  s.n_samples = j.at("n_samples").get<int>();
  s.lines = j.at("lines").get<std::vector<int>>();
  s.amplitudes = j.at("amplitudes").get<std::vector<double>>();
  s.phases = j.at("phases").get<std::vector<double>>();
  s.rms_target = j.value("rms_target", 1.0);
  s.validate();
  return s;
}

std::string frm_csv(const FrmEstimate& frm) {
  const int ny = frm.n_y(), nu = frm.n_u(), K = frm.n_bins();
  std::vector<std::string> hdr{"freq_hz"};
  for (int i = 1; i <= ny; ++i)
    for (int j = 1; j <= nu; ++j)
      for (const char* f : {"re_G", "im_G", "var_noise", "var_total", "coherence"})
        hdr.push_back(fmt::format("{}_{}_{}", f, i, j));
  hdr.push_back("valid");
  MatrixXd d(K, static_cast<Eigen::Index>(hdr.size()));
  for (int k = 0; k < K; ++k) {
    int c = 0;
    d(k, c++) = frm.freqs(k);
    for (int i = 0; i < ny; ++i)
      for (int j = 0; j < nu; ++j) {
        d(k, c++) = frm.G[k](i, j).real();
        d(k, c++) = frm.G[k](i, j).imag();
        d(k, c++) = frm.var_noise.empty() ? 0.0 : frm.var_noise[k](i, j);
        d(k, c++) = frm.var_total.empty() ? 0.0 : frm.var_total[k](i, j);
        d(k, c++) = frm.coherence.empty() ? 0.0 : frm.coherence[k](i, j);
      }
    d(k, c++) = frm.valid.empty() || frm.valid[k] ? 1.0 : 0.0;
  }
  return csv_table(hdr, d);
}

FrmEstimate frm_from_csv(const CsvTable& t, double f_sample) {
  FrmEstimate f;
  f.f_sample = f_sample;
  const int fc = t.col("freq_hz");
  if (fc < 0) config_error("FRM CSV lacks freq_hz");
  int ny = 0, nu = 0;
  for (int i = 1;; ++i) {
    if (t.col(fmt::format("re_G_{}_1", i)) < 0) break;
    ny = i;
  }
  for (int j = 1;; ++j) {
    if (t.col(fmt::format("re_G_1_{}", j)) < 0) break;
    nu = j;
  }
  if (ny == 0 || nu == 0) config_error("FRM CSV has no re_G_i_j columns");
  const Eigen::Index K = t.data.rows();
  f.freqs = t.data.col(fc);
  const int vc = t.col("valid");
  for (Eigen::Index k = 0; k < K; ++k) {
    MatrixXcd G(ny, nu);
    MatrixXd vn(ny, nu), vt(ny, nu), co(ny, nu);
    for (int i = 0; i < ny; ++i)
      for (int j = 0; j < nu; ++j) {
        auto get = [&](const char* name) {
          int c = t.col(fmt::format("{}_{}_{}", name, i + 1, j + 1));
          return c < 0 ? 0.0 : t.data(k, c);
        };
        G(i, j) = cd(get("re_G"), get("im_G"));
        vn(i, j) = get("var_noise");
        vt(i, j) = get("var_total");
        co(i, j) = get("coherence");
      }
    f.G.push_back(G);
    f.var_noise.push_back(vn);
    f.var_total.push_back(vt);
    f.coherence.push_back(co);
    f.valid.push_back(vc < 0 || t.data(k, vc) != 0.0);
    f.clamped.push_back(false);
  }
  return f;
}

std::string trace_csv(const SimTrace& tr) {
  const Eigen::Index K = tr.t.size();
  std::vector<std::string> hdr{"k", "t"};
  auto add = [&](const char* base, Eigen::Index n) {
    for (Eigen::Index i = 1; i <= n; ++i) hdr.push_back(fmt::format("{}{}", base, i));
  };
  add("d", tr.d.cols());
  add("y", tr.y.cols());
  add("y_hat", tr.y_hat.cols());
  add("u_applied", tr.u_applied.cols());
  add("u_unsat", tr.u_unsat.cols());
  add("d_hat", tr.d_hat.cols());
  hdr.push_back("qp_iters");
  hdr.push_back("sat_active");
  MatrixXd d(K, static_cast<Eigen::Index>(hdr.size()));
  for (Eigen::Index k = 0; k < K; ++k) {
    Eigen::Index c = 0;
    d(k, c++) = static_cast<double>(k);
    d(k, c++) = tr.t(k);
    for (const MatrixXd* m : {&tr.d, &tr.y, &tr.y_hat, &tr.u_applied, &tr.u_unsat, &tr.d_hat})
      for (Eigen::Index i = 0; i < m->cols(); ++i) d(k, c++) = (*m)(k, i);
    d(k, c++) = tr.qp_iters[k];
    d(k, c++) = tr.sat_active[k];
  }
  return csv_table(hdr, d);
}

json controller_to_json(const RmpcController& c) {
  json j;
  j["N"] = c.cfg.N;
  j["beta"] = c.cfg.beta;
  j["gamma"] = c.cfg.gamma;
  j["prescribed_stability"] = c.cfg.prescribed_stability;
  j["laguerre_on_scaled_input"] = c.cfg.laguerre_on_scaled_input;
  json lag = json::array();
  for (const auto& b : c.bases) lag.push_back({{"a", b.a}, {"N_l", b.size()}});
  j["laguerre"] = lag;
  j["n_vars"] = c.n_vars();
  j["alpha"] = std::vector<double>(c.im.alpha.data(), c.im.alpha.data() + c.im.alpha.size());
  j["A_aug"] = matrix_to_json(c.aug.A);
  j["B_aug"] = matrix_to_json(c.aug.B);
  j["C_aug"] = matrix_to_json(c.aug.C);
  j["Q"] = matrix_to_json(c.Q);
  j["R"] = matrix_to_json(c.R);
  j["E"] = matrix_to_json(c.E);
  j["Fx"] = matrix_to_json(c.Fx);
  j["K_mpc"] = matrix_to_json(c.K_mpc);
  j["K_lqr"] = matrix_to_json(c.K_lqr);
  j["K_kalman"] = matrix_to_json(c.kalman.K_ss);
  if (c.ff_gain.size() > 0) j["ff_gain"] = matrix_to_json(c.ff_gain);
  j["closed_loop_poles"] = complex_to_json(c.closed_loop_poles());
  j["lqr_poles"] = complex_to_json(c.lqr_poles);
  if (c.cfg.saturation) {
    const auto& s = *c.cfg.saturation;
    j["u_min"] = std::vector<double>(s.u_min.data(), s.u_min.data() + s.u_min.size());
    j["u_max"] = std::vector<double>(s.u_max.data(), s.u_max.data() + s.u_max.size());
  }
  j["warnings"] = c.diag.warnings;
  return j;
}

std::string sha256_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx, bytes.data(), bytes.size()) != 1 || EVP_DigestFinal_ex(ctx, md, &len) != 1) {
    EVP_MD_CTX_free(ctx);
    numerical_error("SHA-256 digest failed");
  }
  EVP_MD_CTX_free(ctx);
  std::string hex;
  for (unsigned int i = 0; i < len; ++i) hex += fmt::format("{:02x}", md[i]);
  return hex;
}

std::string sha256_file(const fs::path& path) { return sha256_hex(read_text(path)); }

json RunManifest::to_json() const {
  json j;
  j["tool_version"] = tool_version;
  j["command"] = command;
  j["config_hash"] = config_hash;
  j["seed"] = seed;
  j["jobs"] = jobs;
  json in = json::array(), out = json::array(), st = json::object();
  for (const auto& [p, d] : inputs) in.push_back({{"path", p}, {"sha256", d}});
  for (const auto& [p, d] : outputs) out.push_back({{"path", p}, {"sha256", d}});
  for (const auto& [s, t] : stage_seconds) st[s] = t;
  j["inputs"] = in;
  j["outputs"] = out;
  j["stage_seconds"] = st;
  return j;
}

}  // namespace avc
