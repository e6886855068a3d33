#include "avc/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <regex>

#include <fmt/format.h>

namespace avc {

namespace {

json section(const json& cfg, const char* name) {
  if (!cfg.contains(name)) return json::object();
  if (!cfg[name].is_object()) config_error(fmt::format("config section '{}' must be an object", name));
  return cfg[name];
}

class Stopwatch {
 public:
  Stopwatch() : t0_(std::chrono::steady_clock::now()) {}
  double lap() {
    auto t = std::chrono::steady_clock::now();
    double s = std::chrono::duration<double>(t - t0_).count();
    t0_ = t;
    return s;
  }

 private:
  std::chrono::steady_clock::time_point t0_;
};

struct Emitter {
  fs::path dir;
  CommandResult* res;
  RunManifest manifest;

  void text(const std::string& name, const std::string& body) {
    fs::path p = dir / name;
    write_text(p, body);
    res->outputs.push_back(p);
    manifest.outputs.emplace_back(name, sha256_hex(body));
  }
  void input(const fs::path& p) { manifest.inputs.emplace_back(p.string(), sha256_file(p)); }
  void stage(const std::string& name, double secs) { manifest.stage_seconds.emplace_back(name, secs); }
  void finish(const json& cfg, const CommandOptions& opt, std::uint64_t seed, const std::string& command) {
    manifest.tool_version = kToolVersion;
    manifest.command = command;
    manifest.config_hash = sha256_hex(cfg.dump());
    manifest.seed = seed;
    manifest.jobs = opt.jobs;
    if (!opt.config_path.empty()) input(opt.config_path);
    json m = manifest.to_json();
    m["warnings"] = res->diag.warnings;
    write_text(dir / "manifest.json", m.dump(2) + "\n");
    res->outputs.push_back(dir / "manifest.json");
  }
};

Emitter make_emitter(const CommandOptions& opt, CommandResult& res) {
  fs::create_directories(opt.out_dir);
  return Emitter{opt.out_dir, &res, {}};
}

std::vector<int> int_list(const json& j, const char* key, std::vector<int> dflt) {
  return j.contains(key) ? j[key].get<std::vector<int>>() : dflt;
}

std::vector<double> dbl_list(const json& j, const char* key, std::vector<double> dflt) {
  if (!j.contains(key)) return dflt;
  if (j[key].is_number()) return {j[key].get<double>()};
  return j[key].get<std::vector<double>>();
}

// Linear periodic steady state for one period of input (rows = samples).
VectorXd periodic_state(const StateSpaceModel& sys, const MatrixXd& u_period) {
  const Eigen::Index N = u_period.rows();
  VectorXd acc = VectorXd::Zero(sys.n());
  for (Eigen::Index k = 0; k < N; ++k) acc = sys.A * acc + sys.B * u_period.row(k).transpose();
  MatrixXd AN = MatrixXd::Identity(sys.n(), sys.n());
  for (Eigen::Index k = 0; k < N; ++k) AN = sys.A * AN;
  return (MatrixXd::Identity(sys.n(), sys.n()) - AN).partialPivLu().solve(acc);
}

std::string record_name(int r, int e) { return fmt::format("sim_r{}_e{}.csv", r, e); }

std::string sim_csv(const LpmRecord& rec, double Ts, int n_dist) {
  const Eigen::Index K = rec.u.rows();
  std::vector<std::string> hdr{"k", "t"};
  for (Eigen::Index i = 1; i <= rec.u.cols(); ++i) hdr.push_back(fmt::format("u{}", i));
  for (int i = 1; i <= n_dist; ++i) hdr.push_back(fmt::format("d{}", i));
  for (Eigen::Index i = 1; i <= rec.y.cols(); ++i) hdr.push_back(fmt::format("y{}", i));
  MatrixXd d = MatrixXd::Zero(K, static_cast<Eigen::Index>(hdr.size()));
  for (Eigen::Index k = 0; k < K; ++k) {
    d(k, 0) = static_cast<double>(k);
    d(k, 1) = static_cast<double>(k) * Ts;
    d.block(k, 2, 1, rec.u.cols()) = rec.u.row(k);
    d.block(k, 2 + rec.u.cols() + n_dist, 1, rec.y.cols()) = rec.y.row(k);
  }
  return csv_table(hdr, d);
}

SimulatedData read_sim_dir(const fs::path& dir, const LtiPlant& plant, const ExcitationSet& set) {
  SimulatedData data;
  data.f_sample = set.spec.f_sample;
  data.period_length = set.spec.n_samples;
  data.lines = set.spec.lines;
  const std::regex pat(R"(sim_r(\d+)_e(\d+)\.csv)");
  std::vector<fs::path> files;
  for (const auto& ent : fs::directory_iterator(dir))
    if (std::regex_match(ent.path().filename().string(), pat)) files.push_back(ent.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) config_error(fmt::format("no sim_r*_e*.csv traces in {}", dir.string()));
  for (const auto& f : files) {
    std::smatch m;
    const std::string name = f.filename().string();
    std::regex_match(name, m, pat);
    CsvTable t = read_csv(f);
    LpmRecord rec;
    rec.realization = std::stoi(m[1]);
    rec.experiment = std::stoi(m[2]);
    rec.u.resize(t.data.rows(), plant.model.m());
    rec.y.resize(t.data.rows(), plant.model.p());
    for (int i = 0; i < plant.model.m(); ++i) {
      int c = t.col(fmt::format("u{}", i + 1));
      if (c < 0) config_error(fmt::format("{} lacks column u{}", name, i + 1));
      rec.u.col(i) = t.data.col(c);
    }
    for (int i = 0; i < plant.model.p(); ++i) {
      int c = t.col(fmt::format("y{}", i + 1));
      if (c < 0) config_error(fmt::format("{} lacks column y{}", name, i + 1));
      rec.y.col(i) = t.data.col(c);
    }
    data.records.push_back(std::move(rec));
  }
  return data;
}

QStrategy q_strategy(const std::string& s) {
  if (s == "rule_of_thumb") return QStrategy::rule_of_thumb;
  if (s == "exhaustive") return QStrategy::exhaustive;
  if (s == "strided") return QStrategy::strided;
  config_error(fmt::format("unknown q strategy '{}'", s));
}

Weighting weighting_of(const std::string& s) {
  if (s == "none") return Weighting::none;
  if (s == "noise") return Weighting::noise;
  config_error(fmt::format("unknown weighting '{}'", s));
}

}  // namespace

json load_config(const fs::path& path) {
  try {
    return json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    config_error(fmt::format("{}: {}", path.string(), e.what()));
  }
}

std::uint64_t resolve_seed(const json& cfg, const CommandOptions& opt) {
  if (opt.seed) return *opt.seed;
  if (!cfg.contains("seed") || !cfg["seed"].is_number_integer())
    config_error("a seed is required: set \"seed\" in the config or pass --seed");
  return cfg["seed"].get<std::uint64_t>();
}

LtiPlant plant_from_config(const json& cfg) {
  const json p = section(cfg, "plant");
  const std::string kind = p.value("kind", "benchmark");
  LtiPlant plant;
  if (kind == "benchmark") {
    plant = benchmark_plant();
  } else if (kind == "file" || kind == "inline") {
    json m = kind == "file" ? load_config(p.at("model_file").get<std::string>()) : p.at("model");
    if (m.contains("model")) m = m["model"];
    plant.model = model_from_json(m);
    plant.H = p.contains("H") ? matrix_from_json(p["H"]) : MatrixXd::Zero(plant.model.n(), 0);
  } else {
    config_error(fmt::format("unknown plant kind '{}'", kind));
  }
  plant.validate();
  return plant;
}

ExcitationSet excitation_from_config(const json& cfg, const LtiPlant& plant, std::uint64_t seed) {
  const json e = section(cfg, "excitation");
  ExcitationSet set;
  const double fs = e.value("f_sample", 1.0 / plant.model.Ts);
  const int N = e.value("n_samples", 2048);
  const int first = e.value("first_line", 1);
  const int nl = e.value("n_lines", N / 2 - first);
  set.spec = flat_multisine(fs, N, first, nl, e.value("rms", 1.0));
  set.n_inputs = e.value("n_inputs", plant.model.m());
  const std::string mix = e.value("mixing", set.n_inputs > 1 ? "hadamard" : "identity");
  if (mix == "hadamard")
    set.mixing = hadamard_mixing(set.n_inputs);
  else if (mix == "orthogonal")
    set.mixing = orthogonal_mixing(set.n_inputs);
  else if (mix == "identity")
    set.mixing = identity_mixing(set.n_inputs);
  else
    config_error(fmt::format("unknown mixing '{}'", mix));
  set.realizations = e.value("realizations", 1);
  set.periods = e.value("periods", 3);
  set.seed = seed;
  const std::string mode = e.value("phase_mode", "schroeder");
  if (mode == "random")
    set.mode = PhaseMode::random;
  else if (mode == "schroeder")
    set.mode = PhaseMode::schroeder;
  else if (mode == "cf_minimized")
    set.mode = PhaseMode::cf_minimized;
  else
    config_error(fmt::format("unknown phase_mode '{}'", mode));
  set.nonlinear_variance_requested = e.value("nonlinear_variance", false);
  if (e.contains("cf")) {
    const json c = e["cf"];
    set.cf_options.max_iters = c.value("max_iters", set.cf_options.max_iters);
    set.cf_options.tol = c.value("tol", set.cf_options.tol);
    set.cf_options.p_max = c.value("p_max", set.cf_options.p_max);
    set.cf_options.stage_iters = c.value("stage_iters", set.cf_options.stage_iters);
  }
  return set;
}

SimulatedData simulate_from_config(const json& cfg, const LtiPlant& plant, const RealizedExcitation& ex,
                                   std::uint64_t seed) {
  const json s = section(cfg, "simulate");
  const double snr_db = s.value("snr_db", 40.0);
  const double kappa = s.value("kappa", 0.0);
  const std::string start = s.value("initial", "periodic");
  if (start != "periodic" && start != "zero") config_error("simulate.initial must be 'periodic' or 'zero'");
  const auto& sys = plant.model;
  if (ex.records.empty()) config_error("no excitation records to simulate");
  if (ex.records.front().u.cols() != sys.m())
    dimension_error(fmt::format("excitation has {} channels but the plant has {} inputs",
                                ex.records.front().u.cols(), sys.m()));

  PolynomialPlant poly;
  poly.linear = plant;
  poly.linear.meas_std.resize(0);
  poly.linear.proc_std.resize(0);
  poly.kappa = kappa;
  poly.selector = s.contains("selector") ? VectorXd(Eigen::Map<const VectorXd>(
                                               s["selector"].get<std::vector<double>>().data(), sys.n()))
                                         : VectorXd(VectorXd::Unit(sys.n(), 0));
  poly.injector = s.contains("injector") ? VectorXd(Eigen::Map<const VectorXd>(
                                               s["injector"].get<std::vector<double>>().data(), sys.n()))
                                         : VectorXd(VectorXd::Unit(sys.n(), std::min(1, sys.n() - 1)));

  SimulatedData out;
  out.f_sample = ex.base.front().f_sample;
  out.period_length = ex.base.front().n_samples;
  out.lines = ex.base.front().lines;
  Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::normal_distribution<double> nd(0.0, 1.0);
  for (const auto& rec : ex.records) {
    const Eigen::Index K = rec.u.rows();
    VectorXd x0 = VectorXd::Zero(sys.n());
    if (start == "periodic") x0 = periodic_state(sys, rec.u.topRows(out.period_length));
    MatrixXd d = MatrixXd::Zero(K, plant.r());
    Rng unused(0);
    MatrixXd y = kappa == 0.0 ? simulate(poly.linear, rec.u, d, x0, unused) : simulate(poly, rec.u, d, x0, unused);
    for (Eigen::Index o = 0; o < y.cols(); ++o) {
      const double rms = std::sqrt(y.col(o).squaredNorm() / static_cast<double>(K));
      const double sd = rms * std::pow(10.0, -snr_db / 20.0);
      for (Eigen::Index k = 0; k < K; ++k) y(k, o) += sd * nd(rng);
    }
    out.records.push_back(LpmRecord{rec.realization, rec.experiment, rec.u, y});
  }
  return out;
}

FrmEstimate estimate_from_config(const json& cfg, const SimulatedData& data, int n_inputs) {
  const json e = section(cfg, "estimate");
  const std::string method = e.value("method", "lpm");
  if (method == "lpm") {
    LpmConfig lc;
    lc.poly_order = e.value("poly_order", 2);
    lc.dof_target = e.value("dof", 8);
    lc.n_inputs = n_inputs;
    lc.period_length = data.period_length;
    lc.lines = data.lines;
    lc.discard_periods = e.value("discard_periods", 1);
    lc.f_sample = data.f_sample;
    return lpm_estimate(data.records, lc);
  }
  if (method == "h1") {
    if (n_inputs != 1) config_error("H1 estimation supports a single input; use method 'lpm'");
    SpectralConfig sc;
    sc.f_sample = data.f_sample;
    sc.fft_length = e.value("fft_length", data.period_length);
    sc.n_averages = e.value("n_averages", 1);
    sc.overlap = e.value("overlap", 0.0);
    sc.discard_periods = e.value("discard_periods", 1);
    sc.window = e.value("window", "hann") == "rect" ? Window::rect : Window::hann;
    return h1_estimate(data.records.front().u.col(0), data.records.front().y, sc);
  }
  config_error(fmt::format("unknown estimation method '{}'", method));
}

FrmEstimate pad_to_full_grid(const FrmEstimate& frm, int period_length) {
  const int half = period_length / 2;
  if (frm.n_bins() != half - 1) return frm;
  for (int k = 0; k < frm.n_bins(); ++k)
    if (std::abs(frm.freqs(k) - (k + 1) * frm.f_sample / period_length) > 1e-9 * frm.f_sample) return frm;
  FrmEstimate out = frm;
  auto pad = [&](int src) {
    double vmax = 0.0;
    if (!frm.var_noise.empty()) vmax = frm.var_noise[src].maxCoeff();
    return std::make_pair(MatrixXcd(frm.G[src].real().cast<cd>()),
                          MatrixXd::Constant(frm.n_y(), frm.n_u(), std::max(vmax, 1e-30) * 1e6));
  };
  auto [g0, v0] = pad(0);
  auto [gn, vn] = pad(frm.n_bins() - 1);
  out.freqs.resize(half + 1);
  out.freqs(0) = 0.0;
  out.freqs.segment(1, frm.n_bins()) = frm.freqs;
  out.freqs(half) = frm.f_sample / 2.0;
  auto ins = [](auto& vec, auto front, auto back) {
    if (vec.empty()) return;
    vec.insert(vec.begin(), front);
    vec.push_back(back);
  };
  ins(out.G, g0, gn);
  ins(out.var_noise, v0, vn);
  ins(out.var_total, v0, vn);
  ins(out.coherence, MatrixXd::Zero(frm.n_y(), frm.n_u()), MatrixXd::Zero(frm.n_y(), frm.n_u()));
  ins(out.var_y, MatrixXd::Zero(frm.n_y(), frm.n_u()), MatrixXd::Zero(frm.n_y(), frm.n_u()));
  out.valid.insert(out.valid.begin(), true);
  out.valid.push_back(true);
  if (!out.clamped.empty()) {
    out.clamped.insert(out.clamped.begin(), false);
    out.clamped.push_back(false);
  }
  out.diag.note("DC and Nyquist bins padded from the outermost lines");
  return out;
}

RmpcConfig rmpc_config_from(const json& cfg, int m) {
  const json c = section(cfg, "control");
  RmpcConfig r;
  r.N = c.value("N", r.N);
  r.beta = c.value("beta", r.beta);
  r.gamma = c.value("gamma", r.gamma);
  r.prescribed_stability = c.value("prescribed_stability", r.prescribed_stability);
  r.laguerre_on_scaled_input = c.value("laguerre_on_scaled_input", r.laguerre_on_scaled_input);
  r.a = dbl_list(c, "a", std::vector<double>(m, 0.76));
  if (r.a.size() == 1 && m > 1) r.a.assign(m, r.a.front());
  r.n_l = int_list(c, "N_l", std::vector<int>(m, 5));
  if (r.n_l.size() == 1 && m > 1) r.n_l.assign(m, r.n_l.front());
  if (c.contains("Qbar")) r.Qbar = matrix_from_json(c["Qbar"]);
  if (c.contains("Rbar")) r.Rbar = matrix_from_json(c["Rbar"]);
  if (c.contains("Qf")) r.Qf = matrix_from_json(c["Qf"]);
  if (c.contains("Rf")) r.Rf = matrix_from_json(c["Rf"]);
  if (c.contains("Pf0")) r.Pf0 = matrix_from_json(c["Pf0"]);
  if (c.contains("u_max")) {
    std::vector<double> hi = dbl_list(c, "u_max", {});
    if (hi.size() == 1) hi.assign(m, hi.front());
    std::vector<double> lo = dbl_list(c, "u_min", {});
    if (lo.empty())
      for (double v : hi) lo.push_back(-v);
    if (lo.size() == 1) lo.assign(m, lo.front());
    SaturationSpec s;
    s.u_min = Eigen::Map<const VectorXd>(lo.data(), static_cast<Eigen::Index>(lo.size()));
    s.u_max = Eigen::Map<const VectorXd>(hi.data(), static_cast<Eigen::Index>(hi.size()));
    r.saturation = s;
  }
  r.rls_lambda = c.value("rls_lambda", r.rls_lambda);
  r.rls_window = c.value("rls_window", r.rls_window);
  r.kalman_use_schedule = c.value("kalman_schedule", r.kalman_use_schedule);
  r.kalman_qu = c.value("kalman_qu", r.kalman_qu);
  r.kalman_qfic = c.value("kalman_qfic", r.kalman_qfic);
  r.hildreth_max_iters = c.value("hildreth_max_iters", r.hildreth_max_iters);
  return r;
}

DisturbanceModel tone_generator(const std::vector<double>& freqs_hz, const std::vector<double>& amplitudes,
                                double Ts) {
  if (amplitudes.size() != freqs_hz.size()) config_error("one amplitude is needed per disturbance frequency");
  const int k = static_cast<int>(freqs_hz.size());
  DisturbanceModel dm;
  dm.S = MatrixXd::Zero(2 * k, 2 * k);
  dm.E = MatrixXd::Zero(1, 2 * k);
  dm.w0 = VectorXd::Zero(2 * k);
  for (int i = 0; i < k; ++i) {
    DisturbanceModel one = sinusoid_disturbance(freqs_hz[i], Ts, amplitudes[i]);
    dm.S.block(2 * i, 2 * i, 2, 2) = one.S;
    dm.E.block(0, 2 * i, 1, 2) = one.E;
    dm.w0.segment(2 * i, 2) = one.w0;
  }
  return dm;
}

CommandResult cmd_excite(const json& cfg, const CommandOptions& opt) {
  CommandResult res;
  const std::uint64_t seed = resolve_seed(cfg, opt);
  Emitter em = make_emitter(opt, res);
  Stopwatch sw;
  const LtiPlant plant = plant_from_config(cfg);
  const ExcitationSet set = excitation_from_config(cfg, plant, seed);
  const RealizedExcitation ex = realize_experiment(set);
  res.diag.merge(ex.diag);
  em.stage("realize", sw.lap());

  const double Ts = 1.0 / set.spec.f_sample;
  MatrixXd cf_rows(static_cast<Eigen::Index>(ex.records.size() * set.n_inputs), 5);
  Eigen::Index row = 0;
  for (const auto& rec : ex.records) {
    std::vector<std::string> hdr{"t"};
    for (int i = 1; i <= set.n_inputs; ++i) hdr.push_back(fmt::format("u{}", i));
    MatrixXd d(rec.u.rows(), set.n_inputs + 1);
    for (Eigen::Index k = 0; k < rec.u.rows(); ++k) d(k, 0) = static_cast<double>(k) * Ts;
    d.rightCols(set.n_inputs) = rec.u;
    em.text(fmt::format("excitation_r{}_e{}.csv", rec.realization, rec.experiment), csv_table(hdr, d));
    const double cf_base = crest_factor(synthesize_multisine(ex.base[rec.realization]));
    for (int i = 0; i < set.n_inputs; ++i)
      cf_rows.row(row++) << rec.realization, rec.experiment, i + 1,
          crest_factor(rec.u.col(i).head(set.spec.n_samples)), cf_base;
  }
  json specs = json::array();
  for (const auto& b : ex.base) specs.push_back(multisine_to_json(b));
  em.text("excitation_spec.json", specs.dump(2) + "\n");

  json report;
  if (set.mode == PhaseMode::cf_minimized) {
    MultisineSpec init = set.spec;
    init.phases = schroeder_phases(init.n_lines());
    const CfResult cr = minimize_crest_factor(init, set.cf_options);
    report["cf_initial"] = cr.cf_initial;
    report["cf_final"] = cr.cf_final;
    MatrixXd log(static_cast<Eigen::Index>(cr.log.size()), 4);
    for (std::size_t i = 0; i < cr.log.size(); ++i)
      log.row(static_cast<Eigen::Index>(i)) << cr.log[i].iter, cr.log[i].p, cr.log[i].cf, cr.log[i].best_cf;
    em.text("cf_log.csv", csv_table({"iter", "p", "cf", "best_cf"}, log));
  }
  em.text("cf_report.csv", csv_table({"realization", "experiment", "channel", "cf_signal", "cf_base"}, cf_rows));
  em.stage("write", sw.lap());
  report["signals"] = ex.records.size();
  res.report = report;
  em.finish(cfg, opt, seed, "excite");
  return res;
}

CommandResult cmd_simulate(const json& cfg, const CommandOptions& opt) {
  CommandResult res;
  const std::uint64_t seed = resolve_seed(cfg, opt);
  Emitter em = make_emitter(opt, res);
  Stopwatch sw;
  const LtiPlant plant = plant_from_config(cfg);
  const ExcitationSet set = excitation_from_config(cfg, plant, seed);
  const RealizedExcitation ex = realize_experiment(set);
  res.diag.merge(ex.diag);
  em.stage("realize", sw.lap());
  const SimulatedData data = simulate_from_config(cfg, plant, ex, seed);
  em.stage("simulate", sw.lap());
  for (const auto& rec : data.records)
    em.text(record_name(rec.realization, rec.experiment), sim_csv(rec, 1.0 / data.f_sample, plant.r()));
  em.stage("write", sw.lap());
  res.report["records"] = data.records.size();
  em.finish(cfg, opt, seed, "simulate");
  return res;
}

namespace {

struct FrmStage {
  FrmEstimate frm;
  int period_length = 0;
};

FrmStage produce_frm(const json& cfg, std::uint64_t seed, Emitter& em, CommandResult& res) {
  const LtiPlant plant = plant_from_config(cfg);
  const ExcitationSet set = excitation_from_config(cfg, plant, seed);
  const json e = section(cfg, "estimate");
  SimulatedData data;
  if (e.contains("input_dir")) {
    const fs::path dir = e["input_dir"].get<std::string>();
    data = read_sim_dir(dir, plant, set);
    for (const auto& ent : fs::directory_iterator(dir))
      if (ent.path().extension() == ".csv") em.input(ent.path());
  } else {
    const RealizedExcitation ex = realize_experiment(set);
    res.diag.merge(ex.diag);
    data = simulate_from_config(cfg, plant, ex, seed);
  }
  FrmStage st;
  st.frm = estimate_from_config(cfg, data, set.n_inputs);
  st.period_length = data.period_length;
  res.diag.merge(st.frm.diag);
  return st;
}

json frm_sidecar(const FrmEstimate& frm, const json& cfg) {
  json j;
  j["f_sample"] = frm.f_sample;
  j["n_bins"] = frm.n_bins();
  j["n_y"] = frm.n_y();
  j["n_u"] = frm.n_u();
  j["dof"] = frm.dof;
  j["variance_convention"] = "variance of the FRF estimate per entry";
  j["estimate_config"] = section(cfg, "estimate");
  return j;
}

}  // namespace

CommandResult cmd_estimate_frm(const json& cfg, const CommandOptions& opt) {
  CommandResult res;
  const std::uint64_t seed = resolve_seed(cfg, opt);
  Emitter em = make_emitter(opt, res);
  Stopwatch sw;
  FrmStage st = produce_frm(cfg, seed, em, res);
  em.stage("estimate", sw.lap());
  em.text("frm.csv", frm_csv(st.frm));
  em.text("frm.json", frm_sidecar(st.frm, cfg).dump(2) + "\n");
  em.stage("write", sw.lap());
  res.report["bins"] = st.frm.n_bins();
  res.report["dof"] = st.frm.dof;
  em.finish(cfg, opt, seed, "estimate-frm");
  return res;
}

CommandResult cmd_identify(const json& cfg, const CommandOptions& opt) {
  CommandResult res;
  const std::uint64_t seed = resolve_seed(cfg, opt);
  Emitter em = make_emitter(opt, res);
  Stopwatch sw;
  const json id = section(cfg, "identify");

  FrmEstimate frm;
  int period_length = 0;
  if (id.contains("frm_csv")) {
    const fs::path p = id["frm_csv"].get<std::string>();
    em.input(p);
    const double fs = id.value("f_sample", 1.0 / plant_from_config(cfg).model.Ts);
    frm = frm_from_csv(read_csv(p), fs);
    period_length = id.value("period_length", 0);
  } else {
    FrmStage st = produce_frm(cfg, seed, em, res);
    frm = std::move(st.frm);
    period_length = st.period_length;
  }
  em.stage("estimate", sw.lap());
  const FrmEstimate grid = period_length > 0 ? pad_to_full_grid(frm, period_length) : frm;

  const int n = id.value("n", 6);
  const Weighting w = weighting_of(id.value("weighting", "noise"));
  HankelConfig hc;
  hc.n = n;
  hc.q = id.value("q", 5 * n);
  hc.r = id.value("r", hc.q);
  IdentResult ir = w == Weighting::noise ? subspace_identify_weighted(grid, hc) : subspace_identify(grid, hc);
  if (id.value("refine", true)) ir = refine_output_error(ir, grid, w);
  res.diag.merge(ir.diag);
  em.stage("identify", sw.lap());

  const std::vector<int> nr = int_list(id, "n_range", {std::max(1, n - 2), n + 2});
  if (nr.size() != 2 || nr[0] > nr[1]) config_error("identify.n_range must be [min, max]");
  std::vector<int> ns;
  for (int v = nr[0]; v <= nr[1]; ++v) ns.push_back(v);
  const ScanResult scan = stability_scan(grid, ns, q_strategy(id.value("q_strategy", "rule_of_thumb")), w,
                                         id.value("q_stride", 5));
  MatrixXd srows(static_cast<Eigen::Index>(scan.rows.size()), 5);
  for (std::size_t i = 0; i < scan.rows.size(); ++i)
    srows.row(static_cast<Eigen::Index>(i)) << scan.rows[i].n, scan.rows[i].q, scan.rows[i].objective,
        scan.rows[i].all_stable ? 1.0 : 0.0, static_cast<int>(i) == scan.recommended ? 1.0 : 0.0;
  em.text("stability_scan.csv", csv_table({"n", "q", "objective", "all_stable", "recommended"}, srows));
  em.stage("scan", sw.lap());

  const double misfit = frm_misfit(ir.model, frm, Weighting::none);
  json model = model_to_json(ir.model);
  json out;
  out["model"] = model;
  out["poles"] = complex_to_json(ir.poles);
  out["objective"] = ir.objective;
  out["misfit_db"] = 10.0 * std::log10(std::max(misfit, 1e-300));
  out["flagged"] = ir.flagged;
  em.text("model.json", out.dump(2) + "\n");

  if (id.contains("monte_carlo")) {
    const json mc = id["monte_carlo"];
    McConfig mcc;
    mcc.hankel = hc;
    mcc.weighting = w;
    mcc.seed = seed;
    const McResult r = monte_carlo_uncertainty(grid, mc.value("perturb_db", 40.0), mc.value("runs", 50), mcc);
    res.diag.merge(r.diag);
    std::vector<std::array<double, 4>> rows;
    for (std::size_t run = 0; run < r.poles.size(); ++run)
      for (Eigen::Index k = 0; k < r.poles[run].size(); ++k)
        rows.push_back({static_cast<double>(run), static_cast<double>(k), r.poles[run](k).real(),
                        r.poles[run](k).imag()});
    // Sort by pole index so each pole's scatter is contiguous.
    std::stable_sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a[1] < b[1]; });
    MatrixXd pr(static_cast<Eigen::Index>(rows.size()), 4);
    for (std::size_t i = 0; i < rows.size(); ++i)
      pr.row(static_cast<Eigen::Index>(i)) << rows[i][0], rows[i][1], rows[i][2], rows[i][3];
    em.text("mc_poles.csv", csv_table({"run", "pole", "re", "im"}, pr));

    const int ny = grid.n_y(), nu = grid.n_u();
    std::vector<std::string> hdr{"freq_hz"};
    for (int i = 1; i <= ny; ++i)
      for (int j = 1; j <= nu; ++j) {
        hdr.push_back(fmt::format("min_abs_G_{}_{}", i, j));
        hdr.push_back(fmt::format("max_abs_G_{}_{}", i, j));
      }
    MatrixXd env(grid.n_bins(), static_cast<Eigen::Index>(hdr.size()));
    for (int k = 0; k < grid.n_bins(); ++k) {
      int c = 0;
      env(k, c++) = grid.freqs(k);
      for (int i = 0; i < ny; ++i)
        for (int j = 0; j < nu; ++j) {
          env(k, c++) = r.env_min.empty() ? 0.0 : r.env_min[k](i, j);
          env(k, c++) = r.env_max.empty() ? 0.0 : r.env_max[k](i, j);
        }
    }
    em.text("mc_envelope.csv", csv_table(hdr, env));
    MatrixXd el(static_cast<Eigen::Index>(r.ellipses.size()), 6);
    for (std::size_t i = 0; i < r.ellipses.size(); ++i) {
      const auto& e = r.ellipses[i];
      el.row(static_cast<Eigen::Index>(i)) << e.center.real(), e.center.imag(), e.semi_major, e.semi_minor, e.angle,
          e.count;
    }
    em.text("mc_ellipses.csv", csv_table({"center_re", "center_im", "semi_major", "semi_minor", "angle", "count"}, el));
    res.report["mc_failed"] = r.failed;
    res.report["mc_misassignment_rate"] = r.misassignment_rate();
    em.stage("monte_carlo", sw.lap());
  }
  res.report["misfit_db"] = out["misfit_db"];
  res.report["n"] = n;
  em.finish(cfg, opt, seed, "identify");
  return res;
}

namespace {

struct ControlSetup {
  LtiPlant plant;
  StateSpaceModel design_model;
  MatrixXd H;
  DisturbanceModel internal;  // generator the controller embeds
  DisturbanceModel scenario;  // generator driving the plant
  std::vector<double> freqs;  // all disturbance frequencies
};

ControlSetup control_setup(const json& cfg, Emitter& em) {
  const json c = section(cfg, "control");
  ControlSetup s;
  s.plant = plant_from_config(cfg);
  s.design_model = s.plant.model;
  s.H = s.plant.H;
  if (c.contains("model_file")) {
    const fs::path p = c["model_file"].get<std::string>();
    em.input(p);
    json m = load_config(p);
    if (m.contains("model")) m = m["model"];
    s.design_model = model_from_json(m);
    s.H = c.contains("H") ? matrix_from_json(c["H"]) : MatrixXd::Zero(s.design_model.n(), 0);
  }
  const json d = c.contains("disturbance") ? c["disturbance"] : json::object();
  const std::vector<double> f = dbl_list(d, "freqs_hz", {kBenchmarkModesHz[0]});
  const std::vector<double> a = dbl_list(d, "amplitudes", std::vector<double>(f.size(), 1.0));
  const std::vector<double> fx = dbl_list(d, "extra_freqs_hz", {});
  const std::vector<double> ax = dbl_list(d, "extra_amplitudes", std::vector<double>(fx.size(), 0.5));
  const double Ts = s.plant.model.Ts;
  s.internal = tone_generator(f, a, Ts);
  std::vector<double> fa = f, aa = a;
  fa.insert(fa.end(), fx.begin(), fx.end());
  aa.insert(aa.end(), ax.begin(), ax.end());
  s.scenario = tone_generator(fa, aa, Ts);
  s.freqs = fa;
  const double ms = c.value("meas_std", 1e-3);
  if (ms > 0.0) s.plant.meas_std = VectorXd::Constant(s.plant.model.p(), ms);
  return s;
}

}  // namespace

CommandResult cmd_mpc_design(const json& cfg, const CommandOptions& opt) {
  CommandResult res;
  const std::uint64_t seed = resolve_seed(cfg, opt);
  Emitter em = make_emitter(opt, res);
  Stopwatch sw;
  const ControlSetup s = control_setup(cfg, em);
  const RmpcController ctrl =
      synthesize(s.design_model, s.H, s.internal, rmpc_config_from(cfg, s.design_model.m()));
  res.diag.merge(ctrl.diag);
  em.stage("synthesize", sw.lap());
  json j = controller_to_json(ctrl);
  j["lqr_hausdorff"] = hausdorff(ctrl.closed_loop_poles(), ctrl.lqr_poles);
  j["max_pole_modulus"] = ctrl.closed_loop_poles().cwiseAbs().maxCoeff();
  em.text("controller.json", j.dump(2) + "\n");
  res.report["lqr_hausdorff"] = j["lqr_hausdorff"];
  res.report["max_pole_modulus"] = j["max_pole_modulus"];
  em.finish(cfg, opt, seed, "mpc-design");
  return res;
}

CommandResult cmd_closedloop(const json& cfg, const CommandOptions& opt) {
  CommandResult res;
  const std::uint64_t seed = resolve_seed(cfg, opt);
  Emitter em = make_emitter(opt, res);
  Stopwatch sw;
  const json c = section(cfg, "control");
  const ControlSetup s = control_setup(cfg, em);
  const RmpcController ctrl =
      synthesize(s.design_model, s.H, s.internal, rmpc_config_from(cfg, s.design_model.m()));
  res.diag.merge(ctrl.diag);
  em.stage("synthesize", sw.lap());

  ClosedLoopOptions o;
  o.steps = c.value("steps", 10000);
  o.seed = seed;
  const std::string ffm = c.value("feedforward", "both");
  if (ffm != "both" && ffm != "on" && ffm != "off") config_error("control.feedforward must be on, off or both");
  DisturbanceScenario sc{s.scenario, c.value("disturbance_gain", 1.0)};

  o.control = false;
  const SimTrace ol = closed_loop_run(s.plant, ctrl, sc, o);
  o.control = true;
  std::map<std::string, SimTrace> runs;
  if (ffm != "on") {
    o.feedforward = false;
    runs["off"] = closed_loop_run(s.plant, ctrl, sc, o);
  }
  if (ffm != "off") {
    o.feedforward = true;
    runs["on"] = closed_loop_run(s.plant, ctrl, sc, o);
  }
  em.stage("simulate", sw.lap());

  em.text("trace_open_loop.csv", trace_csv(ol));
  for (auto& [k, tr] : runs) {
    res.diag.merge(tr.diag);
    em.text(fmt::format("trace_ff_{}.csv", k), trace_csv(tr));
  }

  // Rejection per FFT bin over the steady-state window (last second by default).
  const double Ts = s.plant.model.Ts;
  const int L = std::min<int>(c.value("window", static_cast<int>(std::lround(1.0 / Ts))), o.steps);
  const int nb = L / 2 + 1;
  std::vector<std::string> hdr{"freq_hz", "open_loop_amp"};
  for (const auto& [k, tr] : runs) {
    hdr.push_back(fmt::format("closed_amp_ff_{}", k));
    hdr.push_back(fmt::format("atten_db_ff_{}", k));
  }
  MatrixXd rej(nb, static_cast<Eigen::Index>(hdr.size()));
  for (int b = 0; b < nb; ++b) {
    const double f = b / (L * Ts);
    const double a0 = tone_amplitude(ol.y.col(0), f, Ts, L);
    int col = 0;
    rej(b, col++) = f;
    rej(b, col++) = a0;
    for (const auto& [k, tr] : runs) {
      const double a1 = tr.steps() >= L ? tone_amplitude(tr.y.col(0), f, Ts, L) : std::nan("");
      rej(b, col++) = a1;
      rej(b, col++) = 20.0 * std::log10(std::max(a0, 1e-300) / std::max(a1, 1e-300));
    }
  }
  em.text("rejection.csv", csv_table(hdr, rej));

  json rep = json::object();
  for (const auto& [k, tr] : runs) {
    json per = json::array();
    double p_ol = 0.0, p_cl = 0.0;
    for (double f : s.freqs) {
      const double a0 = tone_amplitude(ol.y.col(0), f, Ts, L), a1 = tone_amplitude(tr.y.col(0), f, Ts, L);
      p_ol += a0 * a0;
      p_cl += a1 * a1;
      per.push_back({{"freq_hz", f}, {"attenuation_db", 20.0 * std::log10(a0 / std::max(a1, 1e-300))}});
    }
    int sat = 0;
    for (int v : tr.sat_active) sat += v;
    rep[fmt::format("ff_{}", k)] = {{"per_frequency", per},
                                     {"total_attenuation_db", 10.0 * std::log10(p_ol / std::max(p_cl, 1e-300))},
                                     {"saturated_steps", sat},
                                     {"max_abs_u", tr.u_applied.cwiseAbs().maxCoeff()},
                                     {"qp_unconverged", tr.qp_unconverged},
                                     {"truncated", tr.truncated}};
  }
  em.text("rejection_report.json", rep.dump(2) + "\n");
  em.stage("report", sw.lap());
  res.report = rep;
  em.finish(cfg, opt, seed, "closedloop");
  return res;
}

CommandResult cmd_amplitude_curve(const json& cfg, const CommandOptions& opt) {
  CommandResult res;
  const std::uint64_t seed = resolve_seed(cfg, opt);
  Emitter em = make_emitter(opt, res);
  Stopwatch sw;
  const json a = section(cfg, "amplitude_curve");
  HbCoefficients hc;
  hc.M = a.value("M", 1.0);
  hc.KR = a.value("KR", 1.0);
  hc.KI_slope = a.value("KI_slope", 0.02);
  hc.KNLR = a.value("KNLR", 0.1);
  hc.KNLI_slope = a.value("KNLI_slope", 0.0);
  hc.Q = a.value("Q", 0.05);
  const double w0 = a.value("omega_min", 0.5), w1 = a.value("omega_max", 1.5);
  const int n = a.value("n_points", 201);
  if (n < 2 || !(w1 > w0)) config_error("amplitude_curve needs n_points >= 2 and omega_max > omega_min");
  VectorXd om = VectorXd::LinSpaced(n, w0, w1);
  const auto curve = hb_amplitude_curve(hc, om);
  std::vector<std::array<double, 4>> rows;
  int empty = 0;
  for (const auto& pt : curve) {
    if (pt.no_root) ++empty;
    for (std::size_t b = 0; b < pt.r.size(); ++b)
      rows.push_back({pt.omega, static_cast<double>(b), pt.r[b], hb_residual(hc, pt.omega, pt.r[b])});
  }
  MatrixXd d(static_cast<Eigen::Index>(rows.size()), 4);
  for (std::size_t i = 0; i < rows.size(); ++i)
    d.row(static_cast<Eigen::Index>(i)) << rows[i][0], rows[i][1], rows[i][2], rows[i][3];
  em.text("amplitude_curve.csv", csv_table({"omega", "branch", "r", "residual"}, d));
  em.stage("solve", sw.lap());
  res.report["points"] = n;
  res.report["no_root_points"] = empty;
  em.finish(cfg, opt, seed, "amplitude-curve");
  return res;
}

}  // namespace avc
