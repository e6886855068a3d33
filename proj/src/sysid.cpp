#include "avc/sysid.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <fmt/format.h>
#include <unsupported/Eigen/FFT>

namespace avc {

bool StateSpaceModel::stable() const { return n() == 0 || spectral_radius(A) < 1.0; }

void StateSpaceModel::validate() const {
  if (A.rows() != A.cols()) dimension_error("A must be square");
  if (B.rows() != A.rows()) dimension_error("B row count must equal the state dimension");
  if (C.cols() != A.rows()) dimension_error("C column count must equal the state dimension");
  if (D.rows() != C.rows() || D.cols() != B.cols()) dimension_error("D must be outputs x inputs");
  if (!(Ts > 0.0)) config_error("sampling period must be positive");
}

MatrixXcd StateSpaceModel::frf(cd z) const {
  if (n() == 0) return D.cast<cd>();
  MatrixXcd zI_A = z * MatrixXcd::Identity(n(), n()) - A.cast<cd>();
  return C.cast<cd>() * zI_A.partialPivLu().solve(B.cast<cd>()) + D.cast<cd>();
}

namespace {

double omega_of(const FrmEstimate& frm, int k) { return 2.0 * kPi * frm.freqs(k) / frm.f_sample; }

double variance_floor(const FrmEstimate& frm) {
  double gmax = 0.0;
  for (const auto& g : frm.G) gmax = std::max(gmax, g.cwiseAbs2().maxCoeff());
  return 1e-20 * gmax + 1e-300;
}

std::vector<MatrixXd> weights_of(const FrmEstimate& frm, Weighting w) {
  std::vector<MatrixXd> out;
  out.reserve(frm.n_bins());
  const double fl = variance_floor(frm);
  for (int k = 0; k < frm.n_bins(); ++k) {
    if (w == Weighting::none || frm.var_noise.empty()) {
      out.push_back(MatrixXd::Ones(frm.n_y(), frm.n_u()));
    } else {
      out.push_back(frm.var_noise[k].cwiseMax(fl).cwiseSqrt().cwiseInverse());
    }
  }
  return out;
}

bool bin_used(const FrmEstimate& frm, int k) { return frm.valid.empty() || frm.valid[k]; }

bool grid_conforms(const FrmEstimate& frm) {
  const int nb = frm.n_bins();
  if (nb < 2) return false;
  const int M = nb - 1;
  for (int k = 0; k < nb; ++k)
    if (std::abs(frm.freqs(k) - k * frm.f_sample / (2.0 * M)) > 1e-9 * frm.f_sample) return false;
  for (int k = 0; k < nb; ++k)
    if (!bin_used(frm, k)) return false;
  return true;
}

FrmEstimate resample_uniform(const FrmEstimate& frm) {
  const int nb = frm.n_bins();
  const int M = std::max(1, nb - 1);
  std::vector<int> used;
  for (int k = 0; k < nb; ++k)
    if (bin_used(frm, k)) used.push_back(k);
  if (used.size() < 2) config_error("too few valid bins to resample the FRM grid");
  FrmEstimate out;
  out.f_sample = frm.f_sample;
  out.freqs.resize(M + 1);
  for (int k = 0; k <= M; ++k) {
    double f = k * frm.f_sample / (2.0 * M);
    out.freqs(k) = f;
    size_t hi = 0;
    while (hi < used.size() && frm.freqs(used[hi]) < f) ++hi;
    MatrixXcd g;
    if (hi == 0) {
      g = frm.G[used.front()];
    } else if (hi == used.size()) {
      g = frm.G[used.back()];
    } else {
      int a = used[hi - 1], b = used[hi];
      double t = (f - frm.freqs(a)) / (frm.freqs(b) - frm.freqs(a));
      g = (1.0 - t) * frm.G[a] + t * frm.G[b];
    }
    if (k == 0 || k == M) g = g.real().cast<cd>();
    out.G.push_back(g);
    out.var_noise.push_back(MatrixXd::Zero(g.rows(), g.cols()));
    out.var_total.push_back(MatrixXd::Zero(g.rows(), g.cols()));
    out.valid.push_back(true);
  }
  return out;
}

void finish(IdentResult& res, const FrmEstimate& frm, Weighting w) {
  res.objective = frm_misfit(res.model, frm, w);
  res.poles = eigenvalues(res.model.A);
  res.pole_stable.clear();
  for (Eigen::Index i = 0; i < res.poles.size(); ++i) res.pole_stable.push_back(std::abs(res.poles(i)) < 1.0);
}

void check_hankel(const HankelConfig& cfg) {
  if (cfg.n < 1) config_error("model order n must be at least 1");
  if (cfg.q <= cfg.n) config_error(fmt::format("Hankel block rows q={} must exceed n={}", cfg.q, cfg.n));
}

}  // namespace

FrmEstimate frm_from_model(const StateSpaceModel& sys, int M) {
  if (M < 1) config_error("frm_from_model needs M >= 1");
  FrmEstimate f;
  f.f_sample = 1.0 / sys.Ts;
  f.freqs.resize(M + 1);
  for (int k = 0; k <= M; ++k) {
    f.freqs(k) = k * f.f_sample / (2.0 * M);
    MatrixXcd g = sys.frf(std::polar(1.0, kPi * k / M));
    if (k == 0 || k == M) g = g.real().cast<cd>();
    f.G.push_back(g);
    f.var_noise.push_back(MatrixXd::Zero(sys.p(), sys.m()));
    f.var_total.push_back(MatrixXd::Zero(sys.p(), sys.m()));
    f.coherence.push_back(MatrixXd::Ones(sys.p(), sys.m()));
    f.valid.push_back(true);
    f.clamped.push_back(false);
  }
  return f;
}

std::vector<MatrixXcd> model_frf(const StateSpaceModel& sys, const FrmEstimate& grid) {
  std::vector<MatrixXcd> out;
  out.reserve(grid.n_bins());
  for (int k = 0; k < grid.n_bins(); ++k) out.push_back(sys.frf(std::polar(1.0, omega_of(grid, k))));
  return out;
}

double frm_misfit(const StateSpaceModel& sys, const FrmEstimate& frm, Weighting w) {
  auto W = weights_of(frm, w);
  double num = 0.0, den = 0.0;
  for (int k = 0; k < frm.n_bins(); ++k) {
    if (!bin_used(frm, k)) continue;
    MatrixXcd gh = sys.frf(std::polar(1.0, omega_of(frm, k)));
    num += (W[k].cast<cd>().cwiseProduct(gh - frm.G[k])).squaredNorm();
    den += (W[k].cast<cd>().cwiseProduct(frm.G[k])).squaredNorm();
  }
  return den > 0.0 ? num / den : num;
}

double max_relative_frf_error(const StateSpaceModel& sys, const FrmEstimate& frm) {
  double worst = 0.0;
  for (int k = 0; k < frm.n_bins(); ++k) {
    if (!bin_used(frm, k)) continue;
    MatrixXcd gh = sys.frf(std::polar(1.0, omega_of(frm, k)));
    double den = frm.G[k].norm();
    worst = std::max(worst, (gh - frm.G[k]).norm() / (den > 0.0 ? den : 1.0));
  }
  return worst;
}

std::vector<MatrixXd> impulse_from_frm(const FrmEstimate& frm, Diagnostics* diag) {
  const int nb = frm.n_bins();
  if (nb < 2) config_error("impulse_from_frm needs at least two bins");
  const int M = nb - 1;
  for (int k = 0; k < nb; ++k)
    if (std::abs(frm.freqs(k) - k * frm.f_sample / (2.0 * M)) > 1e-9 * frm.f_sample)
      config_error("impulse_from_frm needs a uniform grid from DC to Nyquist");
  double gmax = 0.0;
  for (const auto& g : frm.G) gmax = std::max(gmax, g.cwiseAbs().maxCoeff());
  const double tol = 1e-8 * std::max(gmax, 1e-300);
  if (frm.G[0].imag().cwiseAbs().maxCoeff() > tol) config_error("DC sample of the FRM is materially complex");
  if (frm.G[M].imag().cwiseAbs().maxCoeff() > tol) config_error("Nyquist sample of the FRM is materially complex");

  const int p = frm.n_y(), m = frm.n_u();
  const int L = 2 * M;
  std::vector<MatrixXd> h(L, MatrixXd::Zero(p, m));
  Eigen::FFT<double> fft;
  std::vector<cd> spec(L), time;
  double max_imag = 0.0;
  for (int i = 0; i < p; ++i)
    for (int j = 0; j < m; ++j) {
      spec[0] = frm.G[0](i, j).real();
      spec[M] = frm.G[M](i, j).real();
      for (int k = 1; k < M; ++k) {
        spec[k] = frm.G[k](i, j);
        spec[L - k] = std::conj(frm.G[k](i, j));
      }
      fft.inv(time, spec);
      for (int t = 0; t < L; ++t) {
        h[t](i, j) = time[t].real();
        max_imag = std::max(max_imag, std::abs(time[t].imag()));
      }
    }
  if (diag) diag->note(fmt::format("impulse imaginary residue {:.3e} discarded", max_imag));
  return h;
}

void fit_bd(const MatrixXd& A, const MatrixXd& C, const FrmEstimate& frm, Weighting w, MatrixXd& B, MatrixXd& D) {
  const int n = static_cast<int>(A.rows()), p = frm.n_y(), m = frm.n_u();
  auto W = weights_of(frm, w);
  std::vector<int> bins;
  for (int k = 0; k < frm.n_bins(); ++k)
    if (bin_used(frm, k)) bins.push_back(k);
  const int K = static_cast<int>(bins.size());
  std::vector<MatrixXcd> F(K);
  for (int kk = 0; kk < K; ++kk) {
    cd z = std::polar(1.0, omega_of(frm, bins[kk]));
    MatrixXcd zI_A = z * MatrixXcd::Identity(n, n) - A.cast<cd>();
    F[kk] = zI_A.transpose().partialPivLu().solve(C.transpose().cast<cd>()).transpose();
  }
  B.resize(n, m);
  D.resize(p, m);
  for (int j = 0; j < m; ++j) {
    MatrixXd lhs = MatrixXd::Zero(2 * p * K, n + p);
    VectorXd rhs(2 * p * K);
    for (int kk = 0; kk < K; ++kk)
      for (int o = 0; o < p; ++o) {
        const double wt = W[bins[kk]](o, j);
        const int re = 2 * (kk * p + o), im = re + 1;
        lhs.block(re, 0, 1, n) = wt * F[kk].row(o).real();
        lhs.block(im, 0, 1, n) = wt * F[kk].row(o).imag();
        lhs(re, n + o) = wt;
        rhs(re) = wt * frm.G[bins[kk]](o, j).real();
        rhs(im) = wt * frm.G[bins[kk]](o, j).imag();
      }
    VectorXd sol = lhs.colPivHouseholderQr().solve(rhs);
    B.col(j) = sol.head(n);
    D.col(j) = sol.tail(p);
  }
}

IdentResult subspace_identify(const FrmEstimate& frm, const HankelConfig& cfg) {
  check_hankel(cfg);
  if (cfg.r < cfg.n) config_error(fmt::format("Hankel block columns r={} must be at least n={}", cfg.r, cfg.n));
  IdentResult res;
  const FrmEstimate* src = &frm;
  FrmEstimate uni;
  if (!grid_conforms(frm)) {
    res.diag.warn("FRM grid does not span [0, Nyquist] uniformly; resampled by linear interpolation");
    uni = resample_uniform(frm);
    src = &uni;
  }
  const int M = src->n_bins() - 1;
  if (cfg.q + cfg.r - 1 > 2 * M - 1)
    config_error(fmt::format("q + r - 1 = {} exceeds the {} available impulse terms", cfg.q + cfg.r - 1, 2 * M - 1));
  auto h = impulse_from_frm(*src, &res.diag);
  const int p = frm.n_y(), m = frm.n_u(), q = cfg.q, r = cfg.r, n = cfg.n;

  MatrixXd H(q * p, r * m);
  for (int i = 0; i < q; ++i)
    for (int j = 0; j < r; ++j) H.block(i * p, j * m, p, m) = h[i + j + 1];
  Eigen::BDCSVD<MatrixXd> svd(H, Eigen::ComputeThinU);
  res.singular_values = svd.singularValues();
  const auto& s = res.singular_values;
  if (n > s.size()) config_error("model order exceeds the Hankel rank bound");
  if (n < s.size() && s(n) > 0.0 && s(n - 1) / s(n) < 1.5)
    res.diag.warn(fmt::format("no singular-value gap at n={} (ratio {:.3g})", n, s(n - 1) / s(n)));
  MatrixXd Us = svd.matrixU().leftCols(n) * s.head(n).cwiseSqrt().asDiagonal();
  MatrixXd J1 = Us.topRows((q - 1) * p);
  MatrixXd J2 = Us.bottomRows((q - 1) * p);
  if (numerical_rank(J1.cast<cd>(), 1e-12) < n) numerical_error("J1*Us is rank deficient");

  StateSpaceModel& mdl = res.model;
  mdl.Ts = 1.0 / frm.f_sample;
  mdl.A = pinv(J1) * J2;
  mdl.C = Us.topRows(p);
  fit_bd(mdl.A, mdl.C, frm, Weighting::none, mdl.B, mdl.D);
  finish(res, frm, Weighting::none);
  return res;
}

IdentResult subspace_identify_weighted(const FrmEstimate& frm, const HankelConfig& cfg) {
  check_hankel(cfg);
  IdentResult res;
  const int p = frm.n_y(), m = frm.n_u(), q = cfg.q, n = cfg.n;
  std::vector<int> bins;
  for (int k = 0; k < frm.n_bins(); ++k)
    if (bin_used(frm, k)) bins.push_back(k);
  const int K = static_cast<int>(bins.size());
  if (2 * K * m < q * (m + p))
    config_error(fmt::format("{} bins are too few for q={} block rows", K, q));
  if (frm.var_noise.size() != frm.G.size()) config_error("weighted identification needs noise variances");
  const double fl = variance_floor(frm);
  const double sk = 1.0 / std::sqrt(static_cast<double>(K));

  MatrixXd Z(q * (m + p), 2 * K * m);
  MatrixXd CN = MatrixXd::Zero(q * p, q * p);
  for (int kk = 0; kk < K; ++kk) {
    const int k = bins[kk];
    const double w = omega_of(frm, k);
    VectorXd Rk = frm.var_noise[k].cwiseMax(fl).rowwise().sum();
    for (int a = 0; a < q; ++a) {
      cd za = std::polar(sk, w * a);
      MatrixXcd Gblk = za * frm.G[k];
      Z.block(a * m, kk * m, m, m) = za.real() * MatrixXd::Identity(m, m);
      Z.block(a * m, (K + kk) * m, m, m) = za.imag() * MatrixXd::Identity(m, m);
      Z.block(q * m + a * p, kk * m, p, m) = Gblk.real();
      Z.block(q * m + a * p, (K + kk) * m, p, m) = Gblk.imag();
      for (int b = 0; b < q; ++b) {
        double c = std::cos(w * (a - b)) / K;
        for (int o = 0; o < p; ++o) CN(a * p + o, b * p + o) += c * Rk(o);
      }
    }
  }

  Eigen::LLT<MatrixXd> llt(CN);
  if (llt.info() != Eigen::Success) {
    double eps = 1e-12 * CN.trace();
    res.diag.warn(fmt::format("noise covariance not positive definite; regularized with {:.3e} I", eps));
    CN += eps * MatrixXd::Identity(q * p, q * p);
    llt.compute(CN);
    if (llt.info() != Eigen::Success) numerical_error("noise covariance factorization failed after regularization");
  }
  MatrixXd Kc = llt.matrixL();

  Eigen::HouseholderQR<MatrixXd> qr(Z.transpose());
  MatrixXd Rfull = qr.matrixQR().topRows(q * (m + p)).triangularView<Eigen::Upper>();
  MatrixXd L22 = Rfull.transpose().bottomRightCorner(q * p, q * p);
  MatrixXd KiR = Kc.triangularView<Eigen::Lower>().solve(L22);
  Eigen::BDCSVD<MatrixXd> svd(KiR, Eigen::ComputeThinU);
  res.singular_values = svd.singularValues();
  const auto& s = res.singular_values;
  if (n > s.size()) config_error("model order exceeds the projected data rank bound");
  if (n < s.size() && s(n) > 0.0 && s(n - 1) / s(n) < 1.5)
    res.diag.warn(fmt::format("no singular-value gap at n={} (ratio {:.3g})", n, s(n - 1) / s(n)));
  MatrixXd Os = Kc * svd.matrixU().leftCols(n);
  MatrixXd J1 = Os.topRows((q - 1) * p);
  MatrixXd J2 = Os.bottomRows((q - 1) * p);
  if (numerical_rank(J1.cast<cd>(), 1e-12) < n) numerical_error("J1*K*Us is rank deficient");

  StateSpaceModel& mdl = res.model;
  mdl.Ts = 1.0 / frm.f_sample;
  mdl.A = pinv(J1) * J2;
  mdl.C = Os.topRows(p);
  fit_bd(mdl.A, mdl.C, frm, Weighting::noise, mdl.B, mdl.D);
  finish(res, frm, Weighting::noise);
  return res;
}

ScanResult stability_scan(const FrmEstimate& frm, const std::vector<int>& n_values, QStrategy strategy, Weighting w,
                          int stride) {
  if (n_values.empty()) config_error("stability_scan needs at least one model order");
  ScanResult out;
  const int M = frm.n_bins() - 1;
  for (int n : n_values) {
    std::vector<int> qs;
    if (strategy == QStrategy::rule_of_thumb) {
      qs.push_back(5 * n);
    } else {
      int step = strategy == QStrategy::exhaustive ? 1 : std::max(1, stride);
      for (int q = n + 1; q < 10 * n; q += step) qs.push_back(q);
    }
    ScanRow best;
    best.n = n;
    best.objective = std::numeric_limits<double>::infinity();
    for (int q : qs) {
      HankelConfig hc{q, std::min(q, 2 * M - q), n};
      try {
        IdentResult r = w == Weighting::noise ? subspace_identify_weighted(frm, hc) : subspace_identify(frm, hc);
        if (std::isfinite(r.objective) && r.objective < best.objective) {
          best.q = q;
          best.objective = r.objective;
          best.poles = r.poles;
          best.all_stable = std::all_of(r.pole_stable.begin(), r.pole_stable.end(), [](bool b) { return b; });
        }
      } catch (const Error&) {
        // infeasible (n, q) pair: leave the row at infinite objective
      }
    }
    out.rows.push_back(best);
  }
  double best = std::numeric_limits<double>::infinity();
  for (size_t i = 0; i < out.rows.size(); ++i)
    if (out.rows[i].all_stable && out.rows[i].objective < best) {
      best = out.rows[i].objective;
      out.recommended = static_cast<int>(i);
    }
  return out;
}

namespace {

struct Packing {
  int n, m, p;
  int size() const { return n * n + n * m + p * n + p * m; }
  VectorXd pack(const StateSpaceModel& s) const {
    VectorXd t(size());
    int o = 0;
    t.segment(o, n * n) = Eigen::Map<const VectorXd>(s.A.data(), n * n), o += n * n;
    t.segment(o, n * m) = Eigen::Map<const VectorXd>(s.B.data(), n * m), o += n * m;
    t.segment(o, p * n) = Eigen::Map<const VectorXd>(s.C.data(), p * n), o += p * n;
    t.segment(o, p * m) = Eigen::Map<const VectorXd>(s.D.data(), p * m);
    return t;
  }
  void unpack(const VectorXd& t, StateSpaceModel& s) const {
    int o = 0;
    s.A = Eigen::Map<const MatrixXd>(t.data() + o, n, n), o += n * n;
    s.B = Eigen::Map<const MatrixXd>(t.data() + o, n, m), o += n * m;
    s.C = Eigen::Map<const MatrixXd>(t.data() + o, p, n), o += p * n;
    s.D = Eigen::Map<const MatrixXd>(t.data() + o, p, m);
  }
};

// Weighted residual (real/imag stacked) and optionally its Jacobian.
void residual(const StateSpaceModel& s, const FrmEstimate& frm, const std::vector<MatrixXd>& W,
              const std::vector<int>& bins, VectorXd& r, MatrixXd* J) {
  const int n = s.n(), m = s.m(), p = s.p();
  const int K = static_cast<int>(bins.size());
  const int half = K * p * m;
  Packing pk{n, m, p};
  r.resize(2 * half);
  if (J) J->setZero(2 * half, pk.size());
  for (int kk = 0; kk < K; ++kk) {
    const int k = bins[kk];
    cd z = std::polar(1.0, 2.0 * kPi * frm.freqs(k) / frm.f_sample);
    MatrixXcd zI_A = z * MatrixXcd::Identity(n, n) - s.A.cast<cd>();
    Eigen::PartialPivLU<MatrixXcd> lu(zI_A);
    MatrixXcd X = lu.solve(s.B.cast<cd>());                                            // R B
    MatrixXcd Y = zI_A.transpose().partialPivLu().solve(s.C.transpose().cast<cd>()).transpose();  // C R
    MatrixXcd G = s.C.cast<cd>() * X + s.D.cast<cd>();
    for (int o = 0; o < p; ++o)
      for (int j = 0; j < m; ++j) {
        const int row = (kk * p + o) * m + j;
        const double w = W[k](o, j);
        cd e = w * (G(o, j) - frm.G[k](o, j));
        r(row) = e.real();
        r(half + row) = e.imag();
        if (!J) continue;
        int col = 0;
        for (int b = 0; b < n; ++b)
          for (int a = 0; a < n; ++a, ++col) {
            cd d = w * Y(o, a) * X(b, j);
            (*J)(row, col) = d.real();
            (*J)(half + row, col) = d.imag();
          }
        for (int b = 0; b < m; ++b)
          for (int a = 0; a < n; ++a, ++col) {
            if (b != j) continue;
            cd d = w * Y(o, a);
            (*J)(row, col) = d.real();
            (*J)(half + row, col) = d.imag();
          }
        for (int b = 0; b < n; ++b)
          for (int a = 0; a < p; ++a, ++col) {
            if (a != o) continue;
            cd d = w * X(b, j);
            (*J)(row, col) = d.real();
            (*J)(half + row, col) = d.imag();
          }
        for (int b = 0; b < m; ++b)
          for (int a = 0; a < p; ++a, ++col)
            if (a == o && b == j) (*J)(row, col) = w;
      }
  }
}

}  // namespace

IdentResult refine_output_error(const IdentResult& init, const FrmEstimate& frm, Weighting w,
                                const RefineOptions& opt) {
  init.model.validate();
  auto W = weights_of(frm, w);
  std::vector<int> bins;
  double norm = 0.0;
  for (int k = 0; k < frm.n_bins(); ++k)
    if (bin_used(frm, k)) {
      bins.push_back(k);
      norm += (W[k].cast<cd>().cwiseProduct(frm.G[k])).squaredNorm();
    }
  if (norm <= 0.0) norm = 1.0;
  Packing pk{init.model.n(), init.model.m(), init.model.p()};

  IdentResult res = init;
  StateSpaceModel cur = init.model;
  VectorXd r;
  MatrixXd J;
  residual(cur, frm, W, bins, r, &J);
  double f = r.squaredNorm() / norm;
  double mu = opt.mu0;
  bool progressed = false, stalled = false;
  int it = 0;
  for (; it < opt.max_iters; ++it) {
    if (f < 1e-20) break;  // at the rounding floor of the data
    MatrixXd JtJ = J.transpose() * J;
    VectorXd g = J.transpose() * r;
    VectorXd dg = JtJ.diagonal();
    const double dmax = dg.maxCoeff();
    VectorXd theta = pk.pack(cur);
    bool accepted = false;
    double f_new = f;
    StateSpaceModel trial = cur;
    while (mu <= opt.mu_max) {
      MatrixXd lhs = JtJ;
      lhs.diagonal() += mu * (dg.array() + 1e-12 * dmax).matrix();
      VectorXd step = lhs.ldlt().solve(-g);
      pk.unpack(theta + step, trial);
      VectorXd rt;
      residual(trial, frm, W, bins, rt, nullptr);
      f_new = rt.squaredNorm() / norm;
      if (std::isfinite(f_new) && f_new < f) {
        accepted = true;
        mu = std::max(mu / 3.0, 1e-15);
        break;
      }
      mu *= 4.0;
    }
    if (!accepted) {
      stalled = true;
      break;
    }
    progressed = true;
    double drop = f - f_new;
    cur = trial;
    residual(cur, frm, W, bins, r, &J);
    f = r.squaredNorm() / norm;
    if (drop < 1e-12 * f_new) {
      ++it;
      break;
    }
  }
  res.iterations = it;
  if (stalled && !progressed) {
    res.flagged = true;
    res.diag.warn("output-error refinement could not reduce the objective at maximum damping; returning the initial model");
    res.iterations = it;
    return res;
  }
  res.model = cur;
  finish(res, frm, w);
  if (res.objective > init.objective) {
    // guard against re-evaluation jitter; the reported objective never rises
    IdentResult keep = init;
    keep.iterations = it;
    return keep;
  }
  return res;
}

VectorXcd siso_zeros(const StateSpaceModel& sys, int out, int in) {
  const int n = sys.n();
  MatrixXd P = MatrixXd::Zero(n + 1, n + 1), E = MatrixXd::Zero(n + 1, n + 1);
  P.topLeftCorner(n, n) = sys.A;
  P.topRightCorner(n, 1) = sys.B.col(in);
  P.bottomLeftCorner(1, n) = sys.C.row(out);
  P(n, n) = sys.D(out, in);
  E.topLeftCorner(n, n).setIdentity();
  Eigen::GeneralizedEigenSolver<MatrixXd> ges(P, E, false);
  const auto& al = ges.alphas();
  const auto& be = ges.betas();
  std::vector<cd> z;
  for (Eigen::Index i = 0; i < al.size(); ++i)
    if (std::abs(be(i)) > 1e-10 * std::max(1.0, std::abs(al(i)))) z.push_back(al(i) / be(i));
  VectorXcd v(z.size());
  for (size_t i = 0; i < z.size(); ++i) v(i) = z[i];
  return v;
}

McResult monte_carlo_uncertainty(const FrmEstimate& frm, double perturb_db, int n_runs, const McConfig& cfg) {
  if (n_runs < 2) config_error("monte_carlo_uncertainty needs at least two runs");
  auto identify = [&](const FrmEstimate& f) {
    return cfg.weighting == Weighting::noise ? subspace_identify_weighted(f, cfg.hankel) : subspace_identify(f, cfg.hankel);
  };
  McResult out;
  IdentResult nominal = identify(frm);
  out.nominal = nominal.model;
  out.reference = cfg.reference_poles ? *cfg.reference_poles : nominal.poles;
  const double rel_var = std::isinf(perturb_db) ? 0.0 : std::pow(10.0, -perturb_db / 10.0);
  const int nb = frm.n_bins(), p = frm.n_y(), m = frm.n_u();
  out.env_min.assign(nb, MatrixXd::Constant(p, m, std::numeric_limits<double>::infinity()));
  out.env_max.assign(nb, MatrixXd::Constant(p, m, -std::numeric_limits<double>::infinity()));

  Rng rng(cfg.seed);
  const int nref = static_cast<int>(out.reference.size());
  std::vector<std::vector<cd>> cluster(nref);
  for (int run = 0; run < n_runs; ++run) {
    FrmEstimate f = frm;
    for (int k = 0; k < nb; ++k)
      for (int i = 0; i < p; ++i)
        for (int j = 0; j < m; ++j) {
          double v = rel_var * std::norm(frm.G[k](i, j));
          if (v > 0.0) {
            cd e = complex_normal(rng, v);
            bool edge = (k == 0 || 2 * frm.freqs(k) >= frm.f_sample * (1.0 - 1e-12));
            f.G[k](i, j) += edge ? cd(e.real() * std::sqrt(2.0), 0.0) : e;
          }
          if (!f.var_noise.empty()) f.var_noise[k](i, j) = v;
        }
    IdentResult r;
    try {
      r = identify(f);
    } catch (const Error&) {
      ++out.failed;
      continue;
    }
    if (!r.poles.allFinite()) {
      ++out.failed;
      continue;
    }
    out.poles.push_back(r.poles);
    std::vector<VectorXcd> zs;
    for (int i = 0; i < p; ++i)
      for (int j = 0; j < m; ++j) zs.push_back(siso_zeros(r.model, i, j));
    out.zeros.push_back(std::move(zs));
    auto g = model_frf(r.model, frm);
    for (int k = 0; k < nb; ++k) {
      MatrixXd a = g[k].cwiseAbs();
      out.env_min[k] = out.env_min[k].cwiseMin(a);
      out.env_max[k] = out.env_max[k].cwiseMax(a);
    }
    // nearest-reference assignment; a reference claimed twice in one run is ambiguous
    std::vector<int> nearest(r.poles.size());
    std::vector<int> claims(nref, 0);
    for (Eigen::Index s = 0; s < r.poles.size(); ++s) {
      int best = 0;
      double bd = std::numeric_limits<double>::infinity();
      for (int t = 0; t < nref; ++t) {
        double d = std::abs(r.poles(s) - out.reference(t));
        if (d < bd) bd = d, best = t;
      }
      nearest[s] = best;
      if (nref) ++claims[best];
    }
    for (Eigen::Index s = 0; s < r.poles.size(); ++s) {
      ++out.samples;
      if (nref == 0 || claims[nearest[s]] != 1) {
        ++out.misassigned;
        continue;
      }
      cluster[nearest[s]].push_back(r.poles(s));
    }
  }
  if (out.failed > 0) out.diag.warn(fmt::format("{} of {} identification runs failed", out.failed, n_runs));

  const double chi2_95 = 5.991464547107979;
  for (int t = 0; t < nref; ++t) {
    Ellipse e;
    e.count = static_cast<int>(cluster[t].size());
    e.center = out.reference(t);
    if (e.count >= 2) {
      Eigen::Vector2d mean = Eigen::Vector2d::Zero();
      for (cd z : cluster[t]) mean += Eigen::Vector2d(z.real(), z.imag());
      mean /= e.count;
      Eigen::Matrix2d cov = Eigen::Matrix2d::Zero();
      for (cd z : cluster[t]) {
        Eigen::Vector2d d = Eigen::Vector2d(z.real(), z.imag()) - mean;
        cov += d * d.transpose();
      }
      cov /= (e.count - 1);
      Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(cov);
      e.center = cd(mean(0), mean(1));
      e.semi_major = std::sqrt(chi2_95 * std::max(0.0, es.eigenvalues()(1)));
      e.semi_minor = std::sqrt(chi2_95 * std::max(0.0, es.eigenvalues()(0)));
      e.angle = std::atan2(es.eigenvectors()(1, 1), es.eigenvectors()(0, 1));
    }
    out.ellipses.push_back(e);
  }
  return out;
}

}  // namespace avc
