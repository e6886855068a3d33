#include "avc/spectral.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include <fmt/format.h>
#include <unsupported/Eigen/FFT>

namespace avc {

namespace {

// Bins 0..n/2 of the unnormalized forward DFT.
VectorXcd rfft_half(const VectorXd& x) {
  Eigen::FFT<double> fft;
  std::vector<double> in(x.data(), x.data() + x.size());
  std::vector<cd> out;
  fft.fwd(out, in);
  const Eigen::Index nb = x.size() / 2 + 1;
  VectorXcd r(nb);
  for (Eigen::Index k = 0; k < nb; ++k) r(k) = out[k];
  return r;
}

VectorXd make_window(Window w, int n) {
  VectorXd v = VectorXd::Ones(n);
  if (w == Window::hann)
    for (int k = 0; k < n; ++k) v(k) = 0.5 * (1.0 - std::cos(2.0 * kPi * k / n));
  return v;
}

}  // namespace

double to_db_power(double v) {
  if (!(v > 0.0)) return kDbFloor;
  return std::max(kDbFloor, 10.0 * std::log10(v));
}

FrmEstimate h1_estimate(const VectorXd& u, const MatrixXd& y, const SpectralConfig& cfg) {
  if (u.size() != y.rows()) dimension_error("h1_estimate: u and y must have equal length");
  if (cfg.fft_length < 2) config_error("fft_length must be at least 2");
  if (!(cfg.overlap >= 0.0 && cfg.overlap < 1.0)) config_error("overlap_fraction must lie in [0,1)");
  if (cfg.n_averages < 1) config_error("n_averages must be at least 1");
  const int L = cfg.fft_length;
  const int hop = std::max(1, static_cast<int>(std::lround(L * (1.0 - cfg.overlap))));
  const Eigen::Index start = static_cast<Eigen::Index>(cfg.discard_periods) * L;
  const Eigen::Index need = start + static_cast<Eigen::Index>(cfg.n_averages - 1) * hop + L;
  if (need > u.size())
    config_error(fmt::format("record of {} samples is too short for {} averages of length {} (needs {})", u.size(),
                             cfg.n_averages, L, need));

  const int ny = static_cast<int>(y.cols());
  const int nb = L / 2 + 1;
  VectorXd w = make_window(cfg.window, L);
  VectorXd suu = VectorXd::Zero(nb);
  MatrixXcd syu = MatrixXcd::Zero(nb, ny);
  MatrixXd syy = MatrixXd::Zero(nb, ny);
  for (int a = 0; a < cfg.n_averages; ++a) {
    Eigen::Index s0 = start + static_cast<Eigen::Index>(a) * hop;
    VectorXcd U = rfft_half(u.segment(s0, L).cwiseProduct(w));
    suu += U.cwiseAbs2();
    for (int o = 0; o < ny; ++o) {
      VectorXcd Y = rfft_half(y.col(o).segment(s0, L).cwiseProduct(w));
      syu.col(o) += Y.cwiseProduct(U.conjugate());
      syy.col(o) += Y.cwiseAbs2();
    }
  }

  FrmEstimate est;
  est.f_sample = cfg.f_sample;
  est.freqs.resize(nb);
  const double floor = std::max(1e-300, std::numeric_limits<double>::epsilon() * suu.maxCoeff());
  for (int k = 0; k < nb; ++k) {
    est.freqs(k) = k * cfg.f_sample / L;
    MatrixXcd G = MatrixXcd::Zero(ny, 1);
    MatrixXd coh = MatrixXd::Zero(ny, 1), var = MatrixXd::Zero(ny, 1);
    bool ok = suu(k) >= floor;
    if (ok) {
      for (int o = 0; o < ny; ++o) {
        G(o, 0) = syu(k, o) / suu(k);
        double c = syy(k, o) > 0.0 ? std::norm(syu(k, o)) / (suu(k) * syy(k, o)) : 0.0;
        c = std::clamp(c, 0.0, 1.0);
        coh(o, 0) = c;
        // first-order random error of the H1 estimator
        var(o, 0) = c > 0.0 ? std::norm(G(o, 0)) * (1.0 - c) / (c * cfg.n_averages) : 0.0;
      }
    }
    est.G.push_back(G);
    est.coherence.push_back(coh);
    est.var_noise.push_back(var);
    est.var_total.push_back(var);
    est.valid.push_back(ok);
    est.clamped.push_back(false);
  }
  if (cfg.window == Window::hann) est.diag.note("Hann window amplitude correction factor 2");
  int invalid = static_cast<int>(std::count(est.valid.begin(), est.valid.end(), false));
  if (invalid > 0) est.diag.note(fmt::format("{} bins with input auto-spectrum below floor marked invalid", invalid));
  return est;
}

int LpmConfig::half_window() const {
  int twice = dof_target + (poly_order + 1) * (n_inputs + 1) - 1;
  return (twice + 1) / 2;
}

FrmEstimate lpm_estimate(const std::vector<LpmRecord>& records, const LpmConfig& cfg) {
  if (records.empty()) config_error("lpm_estimate: no records");
  if (cfg.period_length < 4) config_error("lpm_estimate: period_length too small");
  if (cfg.lines.empty()) config_error("lpm_estimate: no excited lines");
  if (cfg.poly_order < 0) config_error("lpm_estimate: negative polynomial order");
  const int nu = cfg.n_inputs;
  const int N = cfg.period_length;

  std::map<int, std::map<int, const LpmRecord*>> by_real;
  for (const auto& r : records) {
    if (r.u.cols() != nu) dimension_error("lpm_estimate: record input count differs from n_inputs");
    if (r.u.rows() != r.y.rows()) dimension_error("lpm_estimate: u and y lengths differ");
    by_real[r.realization][r.experiment] = &r;
  }
  const int ny = static_cast<int>(records.front().y.cols());
  const Eigen::Index total = records.front().u.rows();
  if (total % N != 0) config_error("lpm_estimate: record length is not a whole number of periods");
  const int P = static_cast<int>(total / N) - cfg.discard_periods;
  if (P < 2) config_error("lpm_estimate: at least two periods are needed after discarding");
  const int Ltot = P * N;
  const int half = Ltot / 2;
  const int nw = cfg.half_window();
  const int R = cfg.poly_order;

  for (const auto& [r, exps] : by_real) {
    if (static_cast<int>(exps.size()) != nu)
      config_error(fmt::format("realization {} has {} experiments, expected {}", r, exps.size(), nu));
  }
  const int M = static_cast<int>(by_real.size());

  // Per realization, per experiment: full-record spectra normalized by P.
  struct Spectra {
    MatrixXcd U, Y;  // bins x channels
  };
  auto spectra = [&](const LpmRecord& rec) {
    Spectra s;
    s.U.resize(half + 1, nu);
    s.Y.resize(half + 1, ny);
    Eigen::Index s0 = static_cast<Eigen::Index>(cfg.discard_periods) * N;
    for (int i = 0; i < nu; ++i) s.U.col(i) = rfft_half(rec.u.col(i).segment(s0, Ltot)) / static_cast<double>(P);
    for (int o = 0; o < ny; ++o) s.Y.col(o) = rfft_half(rec.y.col(o).segment(s0, Ltot)) / static_cast<double>(P);
    return s;
  };

  const int nl = static_cast<int>(cfg.lines.size());
  FrmEstimate est;
  est.f_sample = cfg.f_sample;
  est.freqs.resize(nl);
  est.G.assign(nl, MatrixXcd::Zero(ny, nu));
  est.var_noise.assign(nl, MatrixXd::Zero(ny, nu));
  est.var_total.assign(nl, MatrixXd::Zero(ny, nu));
  est.var_y.assign(nl, MatrixXd::Zero(ny, nu));
  est.valid.assign(nl, true);
  est.clamped.assign(nl, false);
  est.dof = std::numeric_limits<int>::max();
  std::vector<std::vector<MatrixXcd>> Gr(nl);
  std::vector<MatrixXd> var_sum(nl, MatrixXd::Zero(ny, nu));
  std::vector<MatrixXd> vary_sum(nl, MatrixXd::Zero(ny, nu));

  for (int i = 0; i < nl; ++i) {
    if (cfg.lines[i] < 1 || 2 * cfg.lines[i] >= N) config_error("lpm_estimate: excited line outside (0, Nyquist)");
    est.freqs(i) = cfg.lines[i] * cfg.f_sample / N;
  }

  // Local transient regressor per line; identical for every record.
  struct Local {
    std::vector<int> bins;
    Eigen::HouseholderQR<MatrixXcd> qr;
    double leverage = 0.0;  // variance inflation of the transient estimate at the centre
    int dof = 0;
    bool ill = false;
  };
  std::vector<Local> local(nl);
  for (int i = 0; i < nl; ++i) {
    const int kc = P * cfg.lines[i];
    const int lo = std::max(0, kc - nw), hi = std::min(half, kc + nw);
    Local& lc = local[i];
    for (int k = lo; k <= hi; ++k)
      if (k % P != 0) lc.bins.push_back(k);
    lc.dof = static_cast<int>(lc.bins.size()) - (R + 1);
    if (lc.dof < 1)
      config_error(fmt::format("lpm_estimate: local window at line {} leaves no residual degrees of freedom",
                               cfg.lines[i]));
    MatrixXcd phi(lc.bins.size(), R + 1);
    for (size_t b = 0; b < lc.bins.size(); ++b) {
      double d = static_cast<double>(lc.bins[b] - kc) / std::max(1, nw);
      double pw = 1.0;
      for (int c = 0; c <= R; ++c, pw *= d) phi(b, c) = pw;
    }
    Eigen::JacobiSVD<MatrixXcd> sv(phi);
    const auto& s = sv.singularValues();
    if (s(s.size() - 1) <= 0.0 || s(0) / s(s.size() - 1) > 1e10) lc.ill = true;
    lc.qr.compute(phi);
    MatrixXcd gram_inv = (phi.adjoint() * phi).inverse();
    lc.leverage = std::abs(gram_inv(0, 0));
    est.dof = std::min(est.dof, lc.dof);
  }

  for (const auto& [r, exps] : by_real) {
    std::vector<Spectra> sp;
    for (int e = 0; e < nu; ++e) {
      auto it = exps.find(e);
      if (it == exps.end()) config_error(fmt::format("realization {} is missing experiment {}", r, e));
      sp.push_back(spectra(*it->second));
    }
    for (int i = 0; i < nl; ++i) {
      const Local& lc = local[i];
      const int kc = P * cfg.lines[i];
      MatrixXcd Yt(ny, nu), Ut(nu, nu);
      MatrixXd sig2(ny, nu), var_corr(ny, nu);
      for (int e = 0; e < nu; ++e) {
        Ut.col(e) = sp[e].U.row(kc).transpose();
        for (int o = 0; o < ny; ++o) {
          VectorXcd yw(lc.bins.size());
          for (size_t b = 0; b < lc.bins.size(); ++b) yw(b) = sp[e].Y(lc.bins[b], o);
          VectorXcd th = lc.qr.solve(yw);
          double ss = 0.0;
          for (size_t b = 0; b < lc.bins.size(); ++b) {
            double d = static_cast<double>(lc.bins[b] - kc) / std::max(1, nw);
            cd fit = 0.0;
            double pw = 1.0;
            for (int c = 0; c <= R; ++c, pw *= d) fit += th(c) * pw;
            ss += std::norm(yw(b) - fit);
          }
          double s2 = ss / lc.dof;
          sig2(o, e) = s2;
          var_corr(o, e) = s2 * (1.0 + lc.leverage);
          Yt(o, e) = sp[e].Y(kc, o) - th(0);
        }
      }
      Eigen::FullPivLU<MatrixXcd> lu(Ut);
      if (!lu.isInvertible()) numerical_error(fmt::format("mixing matrix singular at line {}", cfg.lines[i]));
      MatrixXcd Ui = lu.inverse();
      MatrixXcd G = Yt * Ui;
      MatrixXd v = var_corr * Ui.cwiseAbs2();
      Gr[i].push_back(G);
      var_sum[i] += v;
      vary_sum[i] += sig2;
    }
  }

  for (int i = 0; i < nl; ++i) {
    MatrixXcd mean = MatrixXcd::Zero(ny, nu);
    for (const auto& g : Gr[i]) mean += g;
    mean /= static_cast<double>(M);
    est.G[i] = mean;
    est.var_noise[i] = var_sum[i] / (static_cast<double>(M) * M);
    est.var_y[i] = vary_sum[i] / static_cast<double>(M);
    if (M >= 2) {
      MatrixXd vt = MatrixXd::Zero(ny, nu);
      for (const auto& g : Gr[i]) vt += (g - mean).cwiseAbs2();
      vt /= static_cast<double>(M) * (M - 1);
      for (int o = 0; o < ny; ++o)
        for (int j = 0; j < nu; ++j)
          if (vt(o, j) < est.var_noise[i](o, j)) {
            vt(o, j) = est.var_noise[i](o, j);
            est.clamped[i] = true;
          }
      est.var_total[i] = vt;
    } else {
      est.var_total[i] = est.var_noise[i];
    }
    if (local[i].ill) {
      est.valid[i] = false;
      est.diag.warn(fmt::format("ill-conditioned local regressor at line {}", cfg.lines[i]));
    }
  }
  int nclamp = static_cast<int>(std::count(est.clamped.begin(), est.clamped.end(), true));
  if (nclamp > 0) est.diag.note(fmt::format("total variance clamped to noise variance at {} bins", nclamp));
  if (M < 2) est.diag.note("single realization: total variance equals noise variance");
  return est;
}

TransientReport transient_contribution(const VectorXd& record, int period_length) {
  if (period_length < 2) config_error("transient_contribution: period_length too small");
  const int P = static_cast<int>(record.size() / period_length);
  if (P < 2) config_error("transient_contribution: at least two periods are needed");
  const int nb = period_length / 2 + 1;
  VectorXcd last = rfft_half(record.segment(static_cast<Eigen::Index>(P - 1) * period_length, period_length));
  TransientReport rep;
  rep.deviation_db.resize(P, nb);
  rep.period_db.resize(P);
  for (int p = 0; p < P; ++p) {
    VectorXcd Yp = rfft_half(record.segment(static_cast<Eigen::Index>(p) * period_length, period_length));
    VectorXcd diff = Yp - last;
    for (int k = 0; k < nb; ++k) rep.deviation_db(p, k) = to_db_power(std::norm(diff(k)));
    rep.period_db(p) = to_db_power(diff.squaredNorm());
  }
  return rep;
}

}  // namespace avc
