#include "avc/excitation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <fmt/format.h>
#include <unsupported/Eigen/FFT>

namespace avc {

namespace {

bool is_pow2(int n) { return n > 0 && (n & (n - 1)) == 0; }

// Complex analytic signal z_k = sum_i A_i exp(j(2*pi*l_i*k/N + phi_i)); the
// multisine is its real part.
VectorXcd analytic_signal(const MultisineSpec& s) {
  const int n = s.n_samples;
  std::vector<cd> spec(n, cd(0.0, 0.0)), time(n);
  for (int i = 0; i < s.n_lines(); ++i) spec[s.lines[i]] = std::polar(s.amplitudes[i], s.phases[i]);
  Eigen::FFT<double> fft;
  fft.inv(time, spec);
  VectorXcd z(n);
  for (int k = 0; k < n; ++k) z(k) = time[k] * static_cast<double>(n);
  return z;
}

double raw_rms(const MultisineSpec& s) {
  double p = 0.0;
  for (double a : s.amplitudes) p += 0.5 * a * a;
  return std::sqrt(p);
}

}  // namespace

void MultisineSpec::validate() const {
  if (!is_pow2(n_samples)) config_error(fmt::format("n_samples_per_period must be a power of two, got {}", n_samples));
  if (!(f_sample > 0.0)) config_error("f_sample must be positive");
  if (lines.empty()) config_error("multisine has no active lines");
  if (amplitudes.size() != lines.size() || phases.size() != lines.size())
    config_error("amplitudes and phases must have one entry per active line");
  for (size_t i = 0; i < lines.size(); ++i) {
    if (lines[i] < 1) config_error("active lines are 1-based and exclude DC");
    if (2 * lines[i] >= n_samples) config_error(fmt::format("line {} is at or above Nyquist", lines[i]));
    if (i > 0 && lines[i] <= lines[i - 1]) config_error("active lines must be strictly increasing");
    if (!(amplitudes[i] >= 0.0) || !std::isfinite(amplitudes[i])) config_error("amplitudes must be finite and non-negative");
    if (!std::isfinite(phases[i])) config_error("phases must be finite");
  }
  if (raw_rms(*this) == 0.0) config_error("all amplitudes are zero");
  if (!(rms_target > 0.0)) config_error("rms_target must be positive");
}

MultisineSpec flat_multisine(double f_sample, int n_samples, int first_line, int n_lines, double rms_target) {
  MultisineSpec s;
  s.f_sample = f_sample;
  s.n_samples = n_samples;
  s.rms_target = rms_target;
  for (int i = 0; i < n_lines; ++i) s.lines.push_back(first_line + i);
  s.amplitudes.assign(n_lines, 1.0);
  s.phases.assign(n_lines, 0.0);
  return s;
}

VectorXd synthesize_multisine(const MultisineSpec& spec) {
  spec.validate();
  VectorXd x = analytic_signal(spec).real();
  return x * (spec.rms_target / raw_rms(spec));
}

double crest_factor(const VectorXd& x) {
  if (x.size() == 0) numerical_error("crest factor of an empty signal");
  double rms = std::sqrt(x.squaredNorm() / static_cast<double>(x.size()));
  if (rms == 0.0) numerical_error("crest factor of an all-zero signal");
  return x.cwiseAbs().maxCoeff() / rms;
}

std::vector<double> schroeder_phases(int n_lines) {
  if (n_lines < 1) config_error("schroeder_phases needs at least one line");
  std::vector<double> ph(n_lines);
  for (int i = 1; i <= n_lines; ++i)
    ph[i - 1] = -kPi * static_cast<double>(i) * static_cast<double>(i - 1) / static_cast<double>(n_lines);
  return ph;
}

std::vector<double> random_phases(int n_lines, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 2.0 * kPi);
  std::vector<double> ph(n_lines);
  for (auto& p : ph) p = u(rng);
  return ph;
}

MixingMatrix hadamard_mixing(int n_inputs) {
  if (!is_pow2(n_inputs))
    config_error(fmt::format("Hadamard mixing needs a power-of-two input count (got {}); use orthogonal mixing instead",
                             n_inputs));
  MatrixXd h(1, 1);
  h(0, 0) = 1.0;
  MatrixXd h2(2, 2);
  h2 << 1, 1, 1, -1;
  while (h.rows() < n_inputs) {
    MatrixXd next(2 * h.rows(), 2 * h.cols());
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j) next.block(i * h.rows(), j * h.cols(), h.rows(), h.cols()) = h2(i, j) * h;
    h = next;
  }
  MixingMatrix m;
  m.kind = MixingKind::hadamard;
  m.T = (h / std::sqrt(static_cast<double>(n_inputs))).cast<cd>();
  return m;
}

MixingMatrix orthogonal_mixing(int n_inputs) {
  if (n_inputs < 1) config_error("orthogonal mixing needs at least one input");
  MixingMatrix m;
  m.kind = MixingKind::orthogonal;
  m.T.resize(n_inputs, n_inputs);
  const double scale = 1.0 / std::sqrt(static_cast<double>(n_inputs));
  for (int p = 0; p < n_inputs; ++p)
    for (int q = 0; q < n_inputs; ++q) {
      // reduce the exponent modulo n so that n=2 gives exact +-1 entries
      int e = (p * q) % n_inputs;
      double ang = 2.0 * kPi * e / n_inputs;
      cd v = std::polar(scale, ang);
      if (2 * e == n_inputs) v = cd(-scale, 0.0);
      if (e == 0) v = cd(scale, 0.0);
      m.T(p, q) = v;
    }
  return m;
}

MixingMatrix identity_mixing(int n_inputs) {
  MixingMatrix m;
  m.kind = MixingKind::identity;
  m.T = MatrixXcd::Identity(n_inputs, n_inputs);
  return m;
}

namespace {

struct PeakObjective {
  const MultisineSpec& spec;
  double s;  // rms of the raw signal, phase independent
  Eigen::FFT<double> fft;
  std::vector<cd> spec_buf, time_buf;
  std::vector<double> wbuf;
  std::vector<cd> wspec;
  long evals = 0;

  explicit PeakObjective(const MultisineSpec& sp)
      : spec(sp), s(raw_rms(sp)), spec_buf(sp.n_samples), time_buf(sp.n_samples), wbuf(sp.n_samples) {}

  VectorXd signal(const VectorXd& phi) {
    std::fill(spec_buf.begin(), spec_buf.end(), cd(0.0, 0.0));
    for (int i = 0; i < spec.n_lines(); ++i) spec_buf[spec.lines[i]] = std::polar(spec.amplitudes[i], phi(i));
    fft.inv(time_buf, spec_buf);
    VectorXd x(spec.n_samples);
    for (int k = 0; k < spec.n_samples; ++k) x(k) = time_buf[k].real() * spec.n_samples;
    return x;
  }

  // Returns log of the p-mean peak surrogate divided by rms; fills grad and the
  // true crest factor of the evaluated point.
  double eval(const VectorXd& phi, double p, VectorXd* grad, double* cf) {
    ++evals;
    VectorXd x = signal(phi);
    const int n = spec.n_samples;
    double m = x.cwiseAbs().maxCoeff();
    if (cf) *cf = m / s;
    if (!(m > 0.0) || !std::isfinite(m)) return std::numeric_limits<double>::quiet_NaN();
    double sum = 0.0;
    for (int k = 0; k < n; ++k) {
      double a = std::abs(x(k)) / m;
      double ap = std::pow(a, p);
      sum += ap;
      wbuf[k] = (a > 0.0 ? ap / a : 0.0) * (x(k) >= 0.0 ? 1.0 : -1.0);
    }
    double f = std::log(sum / n) / p + std::log(m / s);
    if (grad) {
      fft.fwd(wspec, wbuf);
      grad->resize(spec.n_lines());
      for (int i = 0; i < spec.n_lines(); ++i) {
        cd sk = std::conj(wspec[spec.lines[i]]);  // sum_k w_k e^{+j 2 pi l k / N}
        (*grad)(i) = -spec.amplitudes[i] * (std::polar(1.0, phi(i)) * sk).imag() / (sum * m);
      }
    }
    return f;
  }
};

}  // namespace

CfResult minimize_crest_factor(const MultisineSpec& spec, const CfOptions& opt) {
  spec.validate();
  CfResult res;
  res.spec = spec;
  const int n = spec.n_lines();
  PeakObjective obj(spec);

  VectorXd phi = Eigen::Map<const VectorXd>(spec.phases.data(), n);
  double cf0 = 0.0;
  obj.eval(phi, 2.0, nullptr, &cf0);
  res.cf_initial = cf0;
  VectorXd best_phi = phi;
  double best_cf = cf0;

  int iter = 0;
  bool aborted = false;
  for (double p = opt.p_start; p <= opt.p_max && iter < opt.max_iters && !aborted; p *= 2.0) {
    VectorXd g;
    double cf = 0.0;
    double f = obj.eval(phi, p, &g, &cf);
    if (!std::isfinite(f)) {
      res.diag.warn("non-finite crest-factor objective; optimization aborted");
      break;
    }
    MatrixXd H = MatrixXd::Identity(n, n);
    bool fresh = true;
    for (int it = 0; it < opt.stage_iters && iter < opt.max_iters; ++it, ++iter) {
      VectorXd d(n);
      d.noalias() = -H * g;
      double slope = g.dot(d);
      if (!(slope < 0.0)) {
        H.setIdentity();
        fresh = true;
        d = -g;
        slope = g.dot(d);
      }
      if (fresh) {
        double dm = d.cwiseAbs().maxCoeff();
        if (dm > 0.0) {
          d *= 0.1 / dm;
          slope = g.dot(d);
        }
      }
      if (!(slope < 0.0)) break;  // stationary

      double t = 1.0;
      VectorXd phi_new, g_new;
      double f_new = 0.0, cf_new = 0.0;
      bool ok = false;
      for (int ls = 0; ls < 40; ++ls) {
        phi_new = phi + t * d;
        f_new = obj.eval(phi_new, p, &g_new, &cf_new);
        if (!std::isfinite(f_new)) {
          aborted = true;
          break;
        }
        if (f_new <= f + 1e-4 * t * slope) {
          ok = true;
          break;
        }
        t *= 0.5;
      }
      if (aborted) {
        res.diag.warn("non-finite crest-factor objective during line search; optimization aborted");
        break;
      }
      if (!ok) {
        if (fresh) break;  // steepest descent cannot progress at this p
        H.setIdentity();
        fresh = true;
        continue;
      }

      VectorXd s = phi_new - phi;
      VectorXd y = g_new - g;
      double sy = s.dot(y);
      if (sy > 1e-16 * s.norm() * y.norm()) {
        if (fresh) H *= sy / y.squaredNorm();
        VectorXd Hy = H * y;
        const double yHy = y.dot(Hy);
        H.noalias() += (s / sy) * s.transpose();
        H.noalias() -= (Hy / yHy) * Hy.transpose();
        fresh = false;
      } else {
        H.setIdentity();
        fresh = true;
      }

      double rel = std::abs(f - f_new) / std::max(1.0, std::abs(f));
      phi = phi_new;
      g = g_new;
      f = f_new;
      if (cf_new < best_cf) {
        best_cf = cf_new;
        best_phi = phi;
      }
      res.log.push_back({iter, p, cf_new, best_cf, obj.evals});
      if (rel < opt.tol) {
        ++iter;
        break;
      }
    }
    // continue the next stage from the best point found so far
    phi = best_phi;
  }

  for (int i = 0; i < n; ++i) res.spec.phases[i] = std::remainder(best_phi(i), 2.0 * kPi);
  res.cf_final = crest_factor(synthesize_multisine(res.spec));
  if (res.cf_final > res.cf_initial) {
    // wrapping the phases can only move the result by rounding; never report worse than the start
    res.spec = spec;
    res.cf_final = res.cf_initial;
  }
  return res;
}

RealizedExcitation realize_experiment(const ExcitationSet& set) {
  set.spec.validate();
  if (set.realizations < 1) config_error("realizations must be at least 1");
  if (set.periods < 1) config_error("periods_per_realization must be at least 1");
  if (set.nonlinear_variance_requested && set.periods < 2)
    config_error("noise variance estimation needs at least two periods per realization");
  if (set.n_inputs < 1) config_error("n_inputs must be at least 1");

  RealizedExcitation out;
  if (set.mixing) {
    if (set.mixing->n_inputs() != set.n_inputs)
      config_error(fmt::format("mixing matrix size {} does not match n_inputs {}", set.mixing->n_inputs(), set.n_inputs));
    out.T = set.mixing->T;
  } else {
    out.T = identity_mixing(set.n_inputs).T;
  }
  if (set.mode == PhaseMode::cf_minimized && set.nonlinear_variance_requested)
    out.diag.warn("crest-factor minimized phases are fixed across realizations; nonlinear variance is not quantifiable");

  Rng rng(set.seed);
  MultisineSpec fixed = set.spec;
  if (set.mode == PhaseMode::schroeder) fixed.phases = schroeder_phases(fixed.n_lines());
  if (set.mode == PhaseMode::cf_minimized) {
    fixed.phases = schroeder_phases(fixed.n_lines());
    fixed = minimize_crest_factor(fixed, set.cf_options).spec;
  }

  const int n = set.spec.n_samples;
  const double gain = std::sqrt(static_cast<double>(set.n_inputs));
  for (int r = 0; r < set.realizations; ++r) {
    MultisineSpec base = fixed;
    if (set.mode == PhaseMode::random) base.phases = random_phases(base.n_lines(), rng);
    VectorXcd z = analytic_signal(base) * (base.rms_target / raw_rms(base));
    for (int e = 0; e < set.n_inputs; ++e) {
      ExperimentRecord rec;
      rec.realization = r;
      rec.experiment = e;
      rec.u.resize(static_cast<Eigen::Index>(n) * set.periods, set.n_inputs);
      for (int i = 0; i < set.n_inputs; ++i) {
        VectorXd ch = (z * (gain * out.T(i, e))).real();
        for (int p = 0; p < set.periods; ++p) rec.u.block(static_cast<Eigen::Index>(p) * n, i, n, 1) = ch;
      }
      out.records.push_back(std::move(rec));
    }
    out.base.push_back(std::move(base));
  }
  return out;
}

}  // namespace avc
