#include <cstdlib>
#include <functional>
#include <iostream>
#include <map>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "avc/pipeline.hpp"

namespace {

using Command = std::function<avc::CommandResult(const avc::json&, const avc::CommandOptions&)>;

struct Entry {
  const char* name;
  const char* help;
  Command fn;
};

int verbosity() {
  const char* v = std::getenv("AVC_VERBOSE");
  return v ? std::atoi(v) : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multisine excitation, FRM estimation, subspace identification and repetitive MPC toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", avc::kToolVersion);

  std::string config_path, out_dir = "out";
  std::uint64_t seed = 0;
  int jobs = 1;

  const std::vector<Entry> entries = {
      {"excite", "Realize multisine excitation signals and a crest-factor report", avc::cmd_excite},
      {"simulate", "Simulate the configured plant under the excitation", avc::cmd_simulate},
      {"estimate-frm", "Nonparametric FRM estimate (LPM or H1) with variances", avc::cmd_estimate_frm},
      {"identify",
       "Subspace identification, stability scan and optional Monte-Carlo uncertainty.\n"
       "Defaults: n=6, q=5n, weighting=noise, n_range=[n-2, n+2], refine=true",
       avc::cmd_identify},
      {"mpc-design", "Synthesize the repetitive MPC and report its eigenvalues", avc::cmd_mpc_design},
      {"closedloop", "Open- and closed-loop simulation with a rejection report", avc::cmd_closedloop},
      {"amplitude-curve", "Harmonic-balance amplitude roots over a frequency range", avc::cmd_amplitude_curve},
  };
  std::map<CLI::App*, const Entry*> by_app;
  for (const auto& e : entries) {
    CLI::App* sub = app.add_subcommand(e.name, e.help);
    sub->add_option("--config", config_path, "JSON configuration file")->required()->check(CLI::ExistingFile);
    sub->add_option("--out", out_dir, "Output directory (env AVC_OUT_DIR overrides)");
    sub->add_option("--seed", seed, "Random seed (overrides the config seed)");
    sub->add_option("--jobs", jobs, "Worker count; accepted for interface stability, stages run serially")
        ->check(CLI::PositiveNumber);
    by_app[sub] = &e;
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  const Entry* chosen = nullptr;
  for (auto* sub : app.get_subcommands()) chosen = by_app.at(sub);

  avc::CommandOptions opt;
  opt.out_dir = out_dir;
  if (const char* env = std::getenv("AVC_OUT_DIR")) opt.out_dir = env;
  opt.jobs = jobs;
  opt.config_path = config_path;
  for (auto* sub : app.get_subcommands())
    if (sub->count("--seed") > 0) opt.seed = seed;

  try {
    const avc::json cfg = avc::load_config(config_path);
    const avc::CommandResult res = chosen->fn(cfg, opt);
    if (verbosity() > 0) {
      for (const auto& w : res.diag.warnings) std::cerr << "warning: " << w << "\n";
      std::cout << res.report.dump(2) << "\n";
      for (const auto& p : res.outputs) std::cout << p.string() << "\n";
    }
    return 0;
  } catch (const avc::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.kind() == avc::ErrorKind::numerical ? 3 : 2;
  } catch (const avc::json::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
