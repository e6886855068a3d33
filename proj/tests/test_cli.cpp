#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <fstream>
#include <map>

#include <fmt/format.h>

#include "avc/io.hpp"
#include "avc/pipeline.hpp"

using namespace avc;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / fmt::format("avc_cli_{}_{}", ::getpid(), name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

fs::path write_config(const fs::path& dir, const json& cfg) {
  fs::path p = dir / "config.json";
  write_text(p, cfg.dump(2));
  return p;
}

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = fmt::format("AVC_VERBOSE=0 {} {} > {} 2>&1", AVC_CLI_PATH, args, log.string());
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

CommandOptions out_to(const fs::path& dir) {
  CommandOptions o;
  o.out_dir = dir;
  return o;
}

json identify_config() {
  return json::parse(R"({
    "seed": 7,
    "plant": {"kind": "benchmark"},
    "excitation": {"n_samples": 2048, "periods": 3},
    "simulate": {"snr_db": 40},
    "estimate": {"method": "lpm"},
    "identify": {"n": 6, "n_range": [6, 6], "monte_carlo": {"runs": 50, "perturb_db": 40}}
  })");
}

}  // namespace

TEST_CASE("seed is mandatory") {
  json cfg = identify_config();
  cfg.erase("seed");
  CHECK_THROWS_AS(resolve_seed(cfg, {}), Error);
  CommandOptions o;
  o.seed = 3;
  CHECK(resolve_seed(cfg, o) == 3);

  fs::path d = scratch("seed");
  const fs::path c = write_config(d, cfg);
  CHECK(run_cli(fmt::format("excite --config {} --out {}", c.string(), (d / "o").string()), d / "log") == 2);
  CHECK(run_cli(fmt::format("excite --config {} --out {} --seed 5", c.string(), (d / "o").string()), d / "log") == 0);
}

TEST_CASE("cli exit codes for malformed input") {
  fs::path d = scratch("codes");
  write_text(d / "bad.json", "{ not json");
  CHECK(run_cli(fmt::format("excite --config {}", (d / "bad.json").string()), d / "log") == 2);
  CHECK(run_cli("excite --config /nonexistent/config.json", d / "log") == 2);
  CHECK(run_cli("no-such-command", d / "log") == 2);
  json cfg = identify_config();
  cfg["excitation"]["n_samples"] = 1000;
  const fs::path c = write_config(d, cfg);
  CHECK(run_cli(fmt::format("excite --config {} --out {}", c.string(), (d / "o").string()), d / "log") == 2);
}

TEST_CASE("identify help documents the defaults") {
  fs::path d = scratch("help");
  CHECK(run_cli("identify --help", d / "log") == 0);
  const std::string help = read_text(d / "log");
  CHECK(help.find("n_range=[n-2, n+2]") != std::string::npos);
  CHECK(help.find("q=5n") != std::string::npos);
}

TEST_CASE("excite writes signals and a crest-factor report") {
  fs::path d = scratch("excite");
  json cfg = json::parse(R"({"seed": 1, "plant": {"kind": "benchmark"},
    "excitation": {"n_samples": 2048, "first_line": 1, "n_lines": 512, "n_inputs": 1, "periods": 2}})");
  CommandResult r = cmd_excite(cfg, out_to(d));
  CHECK(fs::exists(d / "excitation_r0_e0.csv"));
  CHECK(fs::exists(d / "manifest.json"));
  CsvTable cf = read_csv(d / "cf_report.csv");
  REQUIRE(cf.data.rows() == 1);
  const double v = cf.data(0, cf.col("cf_signal"));
  CHECK(v >= 1.0);
  CHECK(v <= 1.8);
  CsvTable sig = read_csv(d / "excitation_r0_e0.csv");
  CHECK(sig.data.rows() == 4096);

  fs::path d2 = scratch("excite_cf");
  cfg["excitation"]["phase_mode"] = "cf_minimized";
  cfg["excitation"]["n_lines"] = 64;
  cfg["excitation"]["n_samples"] = 256;
  cfg["excitation"]["cf"] = {{"max_iters", 300}};
  CommandResult rc = cmd_excite(cfg, out_to(d2));
  CHECK(rc.report["cf_final"].get<double>() <= rc.report["cf_initial"].get<double>());
  CHECK(fs::exists(d2 / "cf_log.csv"));
}

TEST_CASE("identify end to end with monte carlo, deterministic") {
  fs::path a = scratch("ident_a"), b = scratch("ident_b");
  const json cfg = identify_config();
  CommandResult r = cmd_identify(cfg, out_to(a));
  CHECK(r.report["misfit_db"].get<double>() < -40.0);
  const json model = json::parse(read_text(a / "model.json"));
  CHECK(model["model"]["A"].size() == 6);

  CsvTable mc = read_csv(a / "mc_poles.csv");
  std::map<int, int> per_pole;
  for (Eigen::Index i = 0; i < mc.data.rows(); ++i) ++per_pole[static_cast<int>(mc.data(i, mc.col("pole")))];
  REQUIRE(per_pole.size() == 6);
  for (const auto& [pole, count] : per_pole) CHECK(count == 50);
  CHECK(fs::exists(a / "stability_scan.csv"));
  CHECK(fs::exists(a / "mc_envelope.csv"));
  CHECK(fs::exists(a / "mc_ellipses.csv"));

  cmd_identify(cfg, out_to(b));
  for (const auto& e : fs::directory_iterator(a)) {
    if (e.path().extension() != ".csv") continue;
    CHECK_MESSAGE(read_text(e.path()) == read_text(b / e.path().filename()), e.path().filename().string());
  }
  const json ma = json::parse(read_text(a / "manifest.json")), mb = json::parse(read_text(b / "manifest.json"));
  CHECK(ma["config_hash"] == mb["config_hash"]);
}

TEST_CASE("closedloop rejection, feedforward ordering and traces") {
  fs::path d = scratch("closed");
  json cfg = json::parse(R"({"seed": 3, "plant": {"kind": "benchmark"},
    "control": {"steps": 10000, "feedforward": "both", "kalman_qfic": 1e-6,
                "disturbance": {"extra_freqs_hz": [40]}}})");
  CommandResult r = cmd_closedloop(cfg, out_to(d));
  for (const char* f : {"trace_open_loop.csv", "trace_ff_off.csv", "trace_ff_on.csv", "rejection.csv",
                        "rejection_report.json", "manifest.json"})
    CHECK(fs::exists(d / f));
  const json rep = json::parse(read_text(d / "rejection_report.json"));
  CHECK(rep["ff_off"]["per_frequency"][0]["attenuation_db"].get<double>() >= 40.0);
  for (std::size_t i = 0; i < 2; ++i)
    CHECK(rep["ff_on"]["per_frequency"][i]["attenuation_db"].get<double>() >=
          rep["ff_off"]["per_frequency"][i]["attenuation_db"].get<double>());
  CsvTable tr = read_csv(d / "trace_ff_off.csv");
  CHECK(tr.data.rows() == 10000);

  fs::path d2 = scratch("mpc_design");
  CommandResult m = cmd_mpc_design(cfg, out_to(d2));
  CHECK(m.report["lqr_hausdorff"].get<double>() < 1e-3);
  CHECK(m.report["max_pole_modulus"].get<double>() <= 0.95 + 1e-6);
}

TEST_CASE("closedloop saturation scenario") {
  fs::path d = scratch("sat");
  json cfg = json::parse(R"({"seed": 3, "plant": {"kind": "benchmark"},
    "control": {"steps": 1500, "feedforward": "off", "u_max": 0.5}})");
  cmd_closedloop(cfg, out_to(d));
  CsvTable tr = read_csv(d / "trace_ff_off.csv");
  const Eigen::Index sat_col = tr.col("sat_active");
  CHECK(tr.data.col(sat_col).sum() > 0.0);
  for (std::size_t c = 0; c < tr.header.size(); ++c)
    if (tr.header[c].rfind("u_applied", 0) == 0) CHECK(tr.data.col(c).cwiseAbs().maxCoeff() <= 0.5);
}

TEST_CASE("amplitude curve and environment override of the output directory") {
  fs::path d = scratch("hb");
  json cfg = json::parse(R"({"seed": 0, "amplitude_curve": {"n_points": 51}})");
  const fs::path c = write_config(d, cfg);
  const fs::path env_out = d / "env_out";
  const std::string cmd = fmt::format("AVC_VERBOSE=0 AVC_OUT_DIR={} {} amplitude-curve --config {} --out {} > {} 2>&1",
                                      env_out.string(), AVC_CLI_PATH, c.string(), (d / "flag_out").string(),
                                      (d / "log").string());
  CHECK(std::system(cmd.c_str()) == 0);
  CHECK(fs::exists(env_out / "amplitude_curve.csv"));
  CHECK(!fs::exists(d / "flag_out"));
  CsvTable t = read_csv(env_out / "amplitude_curve.csv");
  CHECK(t.data.rows() >= 51);
}
