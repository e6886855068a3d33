#include "avc/rmpc.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

namespace avc {

InternalModel internal_model_from(const MatrixXd& S) {
  InternalModel im;
  if (S.rows() != S.cols()) dimension_error("disturbance generator S must be square");
  if (S.rows() == 0) {
    im.alpha.resize(0);
    im.roots.resize(0);
    return im;
  }
  im.roots = eigenvalues(S);
  for (Eigen::Index i = 0; i < im.roots.size(); ++i)
    if (std::abs(im.roots(i)) > 1.0 + 1e-9)
      config_error(fmt::format("disturbance generator eigenvalue of modulus {:.6g} is unstable",
                               std::abs(im.roots(i))));
  VectorXcd c = poly_from_roots(im.roots);
  im.alpha.resize(c.size() - 1);
  for (Eigen::Index i = 1; i < c.size(); ++i) im.alpha(i - 1) = c(i).real();
  return im;
}

AugmentedSystem augment(const StateSpaceModel& plant, const InternalModel& im, Diagnostics* diag) {
  plant.validate();
  AugmentedSystem s;
  s.n = plant.n();
  s.p = plant.p();
  s.m = plant.m();
  s.nw = im.nw();
  const int n = s.n, p = s.p, m = s.m, nw = s.nw;
  const int na = n + p * nw;
  s.A = MatrixXd::Zero(na, na);
  s.B = MatrixXd::Zero(na, m);
  s.C = MatrixXd::Zero(p, na);
  s.A.topLeftCorner(n, n) = plant.A;
  s.B.topRows(n) = plant.B;
  s.C.leftCols(n) = plant.C;
  for (int i = 0; i < nw; ++i) s.C.block(0, n + i * p, p, p) = -im.alpha(i) * MatrixXd::Identity(p, p);
  if (nw > 0) {
    s.A.block(n, 0, p, na) = s.C;
    for (int b = 1; b < nw; ++b) s.A.block(n + b * p, n + (b - 1) * p, p, p).setIdentity();
  }

  if (plant.D.size() > 0 && plant.D.cwiseAbs().maxCoeff() > 0.0 && diag)
    diag->warn("plant feedthrough D is ignored by the controller");

  for (Eigen::Index r = 0; r < im.roots.size(); ++r) {
    const cd z = im.roots(r);
    MatrixXcd pen = MatrixXcd::Zero(n + p, n + m);
    pen.topLeftCorner(n, n) = z * MatrixXcd::Identity(n, n) - plant.A.cast<cd>();
    pen.topRightCorner(n, m) = plant.B.cast<cd>();
    pen.bottomLeftCorner(p, n) = -plant.C.cast<cd>();
    if (plant.D.size() > 0) pen.bottomRightCorner(p, m) = plant.D.cast<cd>();
    if (numerical_rank(pen, 1e-8) < n + std::min(p, m) && diag)
      diag->warn(fmt::format("plant has a transmission zero at internal-model root {:.6g}{:+.6g}j; "
                             "augmented system is not stabilizable",
                             z.real(), z.imag()));
  }
  return s;
}

GammaFilter::GammaFilter(const VectorXd& alpha, int dim) : alpha_(alpha) {
  for (Eigen::Index i = 0; i < alpha.size(); ++i) hist_.push_back(VectorXd::Zero(dim));
}

VectorXd GammaFilter::step(const VectorXd& x) {
  VectorXd out = x;
  for (Eigen::Index i = 0; i < alpha_.size(); ++i) out += alpha_(i) * hist_[i];
  if (alpha_.size() > 0) {
    hist_.push_front(x);
    hist_.pop_back();
  }
  return out;
}

InverseGammaFilter::InverseGammaFilter(const VectorXd& alpha, int dim) : alpha_(alpha) {
  for (Eigen::Index i = 0; i < alpha.size(); ++i) hist_.push_back(VectorXd::Zero(dim));
}

VectorXd InverseGammaFilter::step(const VectorXd& xf) {
  VectorXd x = xf;
  for (Eigen::Index i = 0; i < alpha_.size(); ++i) x -= alpha_(i) * hist_[i];
  if (alpha_.size() > 0) {
    hist_.push_front(x);
    hist_.pop_back();
  }
  return x;
}

MatrixXd filter_signal(const MatrixXd& seq, const InternalModel& im) {
  GammaFilter f(im.alpha, static_cast<int>(seq.cols()));
  MatrixXd out(seq.rows(), seq.cols());
  for (Eigen::Index k = 0; k < seq.rows(); ++k) out.row(k) = f.step(seq.row(k).transpose()).transpose();
  return out;
}

MatrixXd inverse_filter_signal(const MatrixXd& seq, const InternalModel& im) {
  InverseGammaFilter f(im.alpha, static_cast<int>(seq.cols()));
  MatrixXd out(seq.rows(), seq.cols());
  for (Eigen::Index k = 0; k < seq.rows(); ++k) out.row(k) = f.step(seq.row(k).transpose()).transpose();
  return out;
}

LaguerreBasis laguerre_basis(double a, int n_l, int horizon) {
  if (!(a >= 0.0 && a < 1.0)) config_error(fmt::format("Laguerre pole a = {} must lie in [0, 1)", a));
  if (n_l < 1) config_error("Laguerre order must be at least 1");
  if (horizon < 1) config_error("prediction horizon must be at least 1");
  const double bl = 1.0 - a * a;
  MatrixXd Al = MatrixXd::Zero(n_l, n_l);
  VectorXd l0(n_l);
  for (int i = 0; i < n_l; ++i) {
    Al(i, i) = a;
    for (int j = 0; j < i; ++j) Al(i, j) = std::pow(-a, i - j - 1) * bl;
    l0(i) = std::pow(-a, i) * std::sqrt(bl);
  }
  LaguerreBasis b;
  b.a = a;
  b.L.resize(horizon, n_l);
  VectorXd l = l0;
  for (int k = 0; k < horizon; ++k) {
    b.L.row(k) = l.transpose();
    l = Al * l;
  }
  return b;
}

HildrethResult hildreth_solve(const MatrixXd& E, const VectorXd& F, const MatrixXd& M, const VectorXd& g,
                              int max_iters, double tol, const VectorXd* lambda0) {
  if (E.rows() != E.cols() || F.size() != E.rows()) dimension_error("QP Hessian and linear term disagree");
  if (M.rows() != g.size() || (M.rows() > 0 && M.cols() != E.rows()))
    dimension_error("QP constraint matrix and bound disagree");
  Eigen::LLT<MatrixXd> llt(E);
  if (llt.info() != Eigen::Success) numerical_error("QP Hessian is not positive definite");

  HildrethResult res;
  const VectorXd eta0 = -llt.solve(F);
  res.eta = eta0;
  res.lambda = VectorXd::Zero(M.rows());
  if (M.rows() == 0) {
    res.converged = true;
    return res;
  }
  VectorXd viol = M * eta0 - g;
  if (viol.maxCoeff() <= 0.0) {
    res.converged = true;
    return res;
  }

  const MatrixXd EiMt = llt.solve(M.transpose());
  const MatrixXd P = M * EiMt;
  const VectorXd d = g - M * eta0;
  const double feas_tol = 1e-7 * (1.0 + g.cwiseAbs().maxCoeff());
  VectorXd lam = VectorXd::Zero(M.rows());
  if (lambda0 && lambda0->size() == M.rows()) lam = lambda0->cwiseMax(0.0);
  const Eigen::Index nc = M.rows();
  for (int it = 1; it <= max_iters; ++it) {
    double change = 0.0;
    for (Eigen::Index i = 0; i < nc; ++i) {
      const double pii = P(i, i);
      if (pii <= 0.0) continue;
      const double w = -(d(i) + P.row(i).dot(lam) - pii * lam(i)) / pii;
      const double nl = std::max(0.0, w);
      change = std::max(change, std::abs(nl - lam(i)));
      lam(i) = nl;
    }
    res.iterations = it;
    if (change <= tol * std::max(1.0, lam.cwiseAbs().maxCoeff())) {
      VectorXd eta = eta0 - EiMt * lam;
      if ((M * eta - g).maxCoeff() <= feas_tol) {
        res.converged = true;
        break;
      }
    }
  }
  res.lambda = lam;
  res.eta = eta0 - EiMt * lam;
  res.feasibility = std::max(0.0, (M * res.eta - g).maxCoeff());
  for (Eigen::Index i = 0; i < nc; ++i)
    if (lam(i) > 0.0) res.active.push_back(static_cast<int>(i));
  return res;
}

KktReport kkt_check(const MatrixXd& E, const VectorXd& F, const MatrixXd& M, const VectorXd& g,
                    const HildrethResult& r) {
  KktReport k;
  VectorXd grad = E * r.eta + F;
  if (M.rows() > 0) grad += M.transpose() * r.lambda;
  k.stationarity = grad.cwiseAbs().maxCoeff();
  if (M.rows() > 0) {
    VectorXd s = M * r.eta - g;
    k.primal = std::max(0.0, s.maxCoeff());
    k.complementarity = (r.lambda.array() * s.array()).abs().maxCoeff();
    k.dual = std::max(0.0, -r.lambda.minCoeff());
  }
  return k;
}

KalmanSchedule kalman_schedule(const MatrixXd& A, const MatrixXd& C, const MatrixXd& Qf, const MatrixXd& Rf,
                               const MatrixXd& Pf0, int horizon) {
  const Eigen::Index n = A.rows();
  if (Qf.rows() != n || Qf.cols() != n || Pf0.rows() != n || Pf0.cols() != n)
    dimension_error("Kalman covariances must match the augmented state");
  if (Rf.rows() != C.rows() || Rf.cols() != C.rows()) dimension_error("Kalman R_f must match the output count");
  KalmanSchedule ks;
  MatrixXd P = Pf0;
  const int max_iters = 100000;
  for (int k = 0; k < max_iters; ++k) {
    MatrixXd S = C * P * C.transpose() + Rf;
    MatrixXd K = A * P * C.transpose() * S.ldlt().solve(MatrixXd::Identity(S.rows(), S.cols()));
    if (k < horizon) ks.gains.push_back(K);
    MatrixXd Pn = (A - K * C) * P * A.transpose() + Qf;
    Pn = 0.5 * (Pn + Pn.transpose());
    if (!Pn.allFinite() || Pn.cwiseAbs().maxCoeff() > 1e12)
      numerical_error("Kalman covariance diverges; the augmented system is not detectable");
    const double diff = (Pn - P).cwiseAbs().maxCoeff();
    P = Pn;
    ks.iterations = k + 1;
    if (k + 1 >= horizon && diff <= 1e-12 * std::max(P.cwiseAbs().maxCoeff(), 1e-300)) break;
    if (k + 1 == max_iters) numerical_error("Kalman Riccati recursion did not converge");
  }
  ks.P_ss = P;
  MatrixXd S = C * P * C.transpose() + Rf;
  ks.K_ss = A * P * C.transpose() * S.ldlt().solve(MatrixXd::Identity(S.rows(), S.cols()));
  return ks;
}

RlsEstimator::RlsEstimator(const MatrixXd& H, double lambda, int window) : H_(H), lambda_(lambda), window_(window) {
  if (!(lambda > 0.0 && lambda <= 1.0)) config_error(fmt::format("forgetting factor {} must lie in (0, 1]", lambda));
  if (window < 0) config_error("regression window must be non-negative");
  theta_ = VectorXd::Zero(H.cols());
  P_ = 1e9 * MatrixXd::Identity(H.cols(), H.cols());
}

const VectorXd& RlsEstimator::update(const VectorXd& z) {
  if (z.size() != H_.rows()) dimension_error("regression target length must match the rows of H");
  if (H_.cols() == 0) return theta_;
  if (window_ > 0) {
    z_.push_front(z);
    if (static_cast<int>(z_.size()) > window_) z_.pop_back();
    VectorXd zbar = VectorXd::Zero(z.size());
    double wsum = 0.0, w = 1.0;
    for (const auto& zi : z_) {
      zbar += w * zi;
      wsum += w;
      w *= lambda_;
    }
    zbar /= wsum;
    theta_ = H_.colPivHouseholderQr().solve(zbar);
    return theta_;
  }
  const Eigen::Index p = H_.rows();
  MatrixXd S = lambda_ * MatrixXd::Identity(p, p) + H_ * P_ * H_.transpose();
  MatrixXd K = P_ * H_.transpose() * S.ldlt().solve(MatrixXd::Identity(p, p));
  theta_ += K * (z - H_ * theta_);
  P_ = (P_ - K * H_ * P_) / lambda_;
  P_ = 0.5 * (P_ + P_.transpose());
  if (P_.trace() > 1e12) {
    P_ = 1e9 * MatrixXd::Identity(H_.cols(), H_.cols());
    ++resets_;
  }
  return theta_;
}

double weighted_cost(const MatrixXd& A, const MatrixXd& B, const MatrixXd& Q, const MatrixXd& R, double beta,
                     const VectorXd& X0, const std::vector<VectorXd>& uf) {
  VectorXd X = X0;
  double J = 0.0;
  for (std::size_t j = 0; j < uf.size(); ++j) {
    const double wj = std::pow(beta, -2.0 * static_cast<double>(j));
    J += wj * uf[j].dot(R * uf[j]);
    X = A * X + B * uf[j];
    J += wj / (beta * beta) * X.dot(Q * X);
  }
  return J;
}

double scaled_cost(const MatrixXd& A, const MatrixXd& B, const MatrixXd& Q, const MatrixXd& R, double beta,
                   const VectorXd& Xb0, const std::vector<VectorXd>& ub) {
  const MatrixXd Ab = A / beta, Bb = B / beta;
  VectorXd X = Xb0;
  double J = 0.0;
  for (const auto& u : ub) {
    J += u.dot(R * u);
    X = Ab * X + Bb * u;
    J += X.dot(Q * X);
  }
  return J;
}

MatrixXd prescribed_stability_riccati(const MatrixXd& A, const MatrixXd& B, const MatrixXd& Qbar,
                                      const MatrixXd& Rbar, double gamma, int* iterations) {
  const MatrixXd Ag = A / gamma, Bg = B / gamma;
  MatrixXd P = Qbar;
  double prev = std::numeric_limits<double>::infinity();
  bool relax = false;
  const int max_iters = 200000;
  for (int it = 1; it <= max_iters; ++it) {
    MatrixXd S = Rbar + Bg.transpose() * P * Bg;
    MatrixXd PB = P * Bg;
    MatrixXd Pn = Qbar + Ag.transpose() * (P - PB * S.ldlt().solve(PB.transpose())) * Ag;
    Pn = 0.5 * (Pn + Pn.transpose());
    if (!Pn.allFinite()) numerical_error("Riccati iteration produced non-finite values");
    const double diff = (Pn - P).cwiseAbs().maxCoeff();
    if (it > 10 && diff > prev * 1.0001) relax = true;
    prev = diff;
    P = relax ? MatrixXd(0.5 * P + 0.5 * Pn) : Pn;
    if (diff <= 1e-11 * std::max(1.0, P.cwiseAbs().maxCoeff())) {
      if (iterations) *iterations = it;
      return P;
    }
  }
  numerical_error("Riccati fixed-point iteration did not converge");
}

MatrixXd dense_mpc_gain(const MatrixXd& A, const MatrixXd& B, const MatrixXd& Q, const MatrixXd& R, double beta,
                        int N) {
  const Eigen::Index n = A.rows(), m = B.cols();
  MatrixXd E = MatrixXd::Zero(m * N, m * N), F = MatrixXd::Zero(m * N, n);
  MatrixXd Phi = MatrixXd::Zero(n, m * N), Apow = MatrixXd::Identity(n, n);
  for (int j = 1; j <= N; ++j) {
    Phi = A * Phi;
    Phi.block(0, (j - 1) * m, n, m) = B;
    Apow = A * Apow;
    const double wx = std::pow(beta, -2.0 * j);
    const double wu = std::pow(beta, -2.0 * (j - 1));
    E += wx * Phi.transpose() * Q * Phi;
    E.block((j - 1) * m, (j - 1) * m, m, m) += wu * R;
    F += wx * Phi.transpose() * Q * Apow;
  }
  MatrixXd K = E.ldlt().solve(F);
  return K.topRows(m);
}

VectorXcd RmpcController::closed_loop_poles() const { return eigenvalues(aug.A - aug.B * K_mpc); }

namespace {

MatrixXd block_basis_row(const std::vector<LaguerreBasis>& bases, int j, int nv) {
  const int m = static_cast<int>(bases.size());
  MatrixXd out = MatrixXd::Zero(m, nv);
  int off = 0;
  for (int i = 0; i < m; ++i) {
    out.block(i, off, 1, bases[i].size()) = bases[i].L.row(j);
    off += bases[i].size();
  }
  return out;
}

}  // namespace

RmpcController synthesize(const StateSpaceModel& plant, const MatrixXd& H, const DisturbanceModel& dist,
                          const RmpcConfig& cfg) {
  RmpcController c;
  c.cfg = cfg;
  c.plant = plant;
  c.H = H;
  plant.validate();
  const int m = plant.m();
  if (H.size() > 0 && H.rows() != plant.n()) dimension_error("H must have one row per plant state");
  if (cfg.N < 1) config_error("prediction horizon N must be at least 1");
  if (!(cfg.beta >= 1.0)) config_error(fmt::format("weighting factor beta = {} must be at least 1", cfg.beta));
  if (cfg.prescribed_stability && !(cfg.gamma > 0.0 && cfg.gamma <= 1.0))
    config_error(fmt::format("prescribed stability radius gamma = {} must lie in (0, 1]", cfg.gamma));
  if (dist.S.size() > 0) dist.validate();
  if (cfg.saturation) {
    cfg.saturation->validate();
    if (cfg.saturation->u_min.size() != m) dimension_error("saturation limits must have one entry per input");
  }

  c.im = internal_model_from(dist.S);
  c.aug = augment(plant, c.im, &c.diag);
  const AugmentedSystem& ag = c.aug;
  const int na = ag.dim();

  c.Qbar = cfg.Qbar ? *cfg.Qbar : MatrixXd(10.0 * ag.C.transpose() * ag.C);
  c.Rbar = cfg.Rbar ? *cfg.Rbar : MatrixXd(3e-3 * MatrixXd::Identity(m, m));
  if (c.Qbar.rows() != na || c.Qbar.cols() != na) dimension_error("Qbar must match the augmented state dimension");
  if (c.Rbar.rows() != m || c.Rbar.cols() != m) dimension_error("Rbar must be m x m");
  if (Eigen::LLT<MatrixXd>(c.Rbar).info() != Eigen::Success) config_error("Rbar must be positive definite");
  {
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(c.Qbar);
    if (es.eigenvalues().minCoeff() < -1e-12 * std::max(1.0, c.Qbar.norm()))
      config_error("Qbar must be positive semidefinite");
  }

  const double gam = cfg.prescribed_stability ? cfg.gamma : 1.0;
  c.P_inf = prescribed_stability_riccati(ag.A, ag.B, c.Qbar, c.Rbar, gam);
  c.K_lqr = (gam * gam * c.Rbar + ag.B.transpose() * c.P_inf * ag.B)
                .ldlt()
                .solve(ag.B.transpose() * c.P_inf * ag.A);
  c.lqr_poles = eigenvalues(ag.A - ag.B * c.K_lqr);
  if (cfg.prescribed_stability) {
    const double s = (cfg.gamma * cfg.gamma) / (cfg.beta * cfg.beta);
    c.Q = s * c.Qbar + (1.0 - s) * c.P_inf;
    c.R = s * c.Rbar;
  } else {
    c.Q = c.Qbar;
    c.R = c.Rbar;
  }

  std::vector<double> a = cfg.a.empty() ? std::vector<double>(m, 0.76) : cfg.a;
  std::vector<int> nl = cfg.n_l.empty() ? std::vector<int>(m, 5) : cfg.n_l;
  if (static_cast<int>(a.size()) != m || static_cast<int>(nl.size()) != m)
    dimension_error("Laguerre parameters need one entry per input");
  int nv = 0;
  for (int i = 0; i < m; ++i) {
    c.bases.push_back(laguerre_basis(a[i], nl[i], cfg.N));
    nv += nl[i];
  }

  const int N = cfg.N;
  const double beta = cfg.beta;
  c.Luf.resize(N);
  std::vector<MatrixXd> Lb(N);  // u^beta(k+j) = Lb[j] eta
  for (int j = 0; j < N; ++j) {
    MatrixXd L = block_basis_row(c.bases, j, nv);
    if (cfg.laguerre_on_scaled_input) {
      Lb[j] = L;
      c.Luf[j] = std::pow(beta, j) * L;
    } else {
      Lb[j] = std::pow(beta, -j) * L;
      c.Luf[j] = L;
    }
  }

  const MatrixXd Ab = ag.A / beta, Bb = ag.B / beta;
  MatrixXd Phi = MatrixXd::Zero(na, nv), Psi = MatrixXd::Identity(na, na);
  c.E = MatrixXd::Zero(nv, nv);
  c.Fx = MatrixXd::Zero(nv, na);
  for (int j = 1; j <= N; ++j) {
    Phi = Ab * Phi + Bb * Lb[j - 1];
    Psi = Ab * Psi;
    c.E += Phi.transpose() * c.Q * Phi + Lb[j - 1].transpose() * c.R * Lb[j - 1];
    c.Fx += Phi.transpose() * c.Q * Psi;
  }
  c.E = 2.0 * c.E;
  c.E = 0.5 * (c.E + c.E.transpose());
  c.Fx = 2.0 * c.Fx;
  if (Eigen::LLT<MatrixXd>(c.E).info() != Eigen::Success) {
    const double eps = 1e-12 * std::max(c.E.trace(), 1e-300);
    c.E += eps * MatrixXd::Identity(nv, nv);
    c.diag.note(fmt::format("QP Hessian regularized with {:.3g} I", eps));
  }

  c.Tu.resize(N);
  for (int j = 0; j < N; ++j) {
    c.Tu[j] = c.Luf[j];
    for (int i = 1; i <= ag.nw && i <= j; ++i) c.Tu[j] -= c.im.alpha(i - 1) * c.Tu[j - i];
  }
  c.K_mpc = c.Luf[0] * c.E.ldlt().solve(c.Fx);

  const MatrixXd Qf = cfg.Qf ? *cfg.Qf
                             : MatrixXd(cfg.kalman_qu * ag.B * ag.B.transpose() +
                                               cfg.kalman_qfic * MatrixXd::Identity(na, na));
  const MatrixXd Rf = cfg.Rf ? *cfg.Rf : MatrixXd(2e-4 * MatrixXd::Identity(ag.p, ag.p));
  const MatrixXd Pf0 = cfg.Pf0 ? *cfg.Pf0 : MatrixXd(1e-4 * MatrixXd::Identity(na, na));
  c.kalman = kalman_schedule(ag.A, ag.C, Qf, Rf, Pf0, cfg.kalman_horizon);

  if (H.size() > 0) c.ff_gain = pinv(plant.B) * H;
  return c;
}

QpInstance build_qp(const RmpcController& c, const VectorXd& Xhat, const std::deque<VectorXd>& u_hist,
                    const VectorXd& u_offset) {
  QpInstance q;
  q.F = c.Fx * Xhat;
  const int nv = c.n_vars();
  if (!c.cfg.saturation) {
    q.M.resize(0, nv);
    q.g.resize(0);
    return q;
  }
  const int m = c.aug.m, N = c.cfg.N, nw = c.aug.nw;
  const auto& sat = *c.cfg.saturation;
  std::vector<VectorXd> h(N, VectorXd::Zero(m));
  for (int j = 0; j < N; ++j) {
    for (int i = 1; i <= nw; ++i) {
      if (i > j) {
        const std::size_t idx = static_cast<std::size_t>(i - j - 1);
        if (idx < u_hist.size()) h[j] -= c.im.alpha(i - 1) * u_hist[idx];
      } else {
        h[j] -= c.im.alpha(i - 1) * h[j - i];
      }
    }
  }
  q.M.resize(2 * m * N, nv);
  q.g.resize(2 * m * N);
  for (int j = 0; j < N; ++j) {
    q.M.block(2 * m * j, 0, m, nv) = c.Tu[j];
    q.g.segment(2 * m * j, m) = sat.u_max - u_offset - h[j];
    q.M.block(2 * m * j + m, 0, m, nv) = -c.Tu[j];
    q.g.segment(2 * m * j + m, m) = -(sat.u_min - u_offset - h[j]);
  }
  return q;
}

SimTrace closed_loop_run(const LtiPlant& plant, const RmpcController& ctrl, const DisturbanceScenario& scen,
                         const ClosedLoopOptions& opt) {
  plant.validate();
  scen.generator.validate();
  const auto& sys = plant.model;
  const int n = sys.n(), m = sys.m(), p = sys.p(), r = plant.r();
  if (scen.generator.E.rows() != r) dimension_error("disturbance scenario output must match the plant H columns");
  if (opt.control && (ctrl.aug.m != m || ctrl.aug.p != p))
    dimension_error("controller and plant input/output counts differ");
  if (opt.steps < 1) config_error("simulation needs at least one step");

  SimTrace tr;
  const int K = opt.steps;
  tr.t.resize(K);
  tr.d.resize(K, r);
  tr.y.resize(K, p);
  tr.y_hat.setZero(K, p);
  tr.u_applied.resize(K, m);
  tr.u_unsat.resize(K, m);
  const int rd = ctrl.ff_gain.size() > 0 ? static_cast<int>(ctrl.ff_gain.cols()) : 0;
  tr.d_hat.setZero(K, rd);
  tr.qp_iters.assign(K, 0);
  tr.sat_active.assign(K, 0);

  Rng rng(opt.seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  VectorXd x = opt.x0.size() ? opt.x0 : VectorXd::Zero(n);
  if (x.size() != n) dimension_error("initial state length must equal the plant order");
  VectorXd w = scen.generator.w0;

  const int na = opt.control ? ctrl.aug.dim() : 0;
  const int nw = opt.control ? ctrl.aug.nw : 0;
  const int nc = opt.control ? ctrl.aug.n : 0;
  VectorXd Xhat = VectorXd::Zero(na);
  std::deque<VectorXd> u_hist;  // MPC part of applied input, most recent first
  for (int i = 0; i < nw; ++i) u_hist.push_back(VectorXd::Zero(m));
  GammaFilter uf_filter(opt.control ? ctrl.im.alpha : VectorXd(), m);  // fed with the full applied input
  InverseGammaFilter x_inv(opt.control ? ctrl.im.alpha : VectorXd(), nc);
  const bool ff = opt.feedforward && opt.control && rd > 0;
  if (opt.feedforward && !ff) tr.diag.warn("feedforward requested but the controller has no disturbance model H");
  int window = ctrl.cfg.rls_window >= 0 ? ctrl.cfg.rls_window : 5 * std::max(nw, 1);
  RlsEstimator rls;
  if (ff) rls = RlsEstimator(ctrl.H, ctrl.cfg.rls_lambda, window);
  VectorXd xhat_prev = VectorXd::Zero(nc), u_prev = VectorXd::Zero(m);
  VectorXd dhat = VectorXd::Zero(rd);
  VectorXd lambda;

  int k = 0;
  for (; k < K; ++k) {
    tr.t(k) = k * sys.Ts;
    const VectorXd d = scen.gain * (scen.generator.E * w);
    w = scen.generator.S * w;

    VectorXd y = sys.C * x;
    if (plant.meas_std.size() == p)
      for (int i = 0; i < p; ++i) y(i) += plant.meas_std(i) * nd(rng);

    VectorXd u_app = VectorXd::Zero(m), u_unsat = VectorXd::Zero(m);
    if (opt.control) {
      tr.y_hat.row(k) = (ctrl.aug.C * Xhat).transpose();
      const VectorXd xhat = x_inv.step(Xhat.head(nc));
      if (ff) {
        if (k > 0) {
          const VectorXd z = xhat - ctrl.plant.A * xhat_prev - ctrl.plant.B * u_prev;
          dhat = rls.update(z);
        }
        tr.d_hat.row(k) = dhat.transpose();
      }
      xhat_prev = xhat;
      const VectorXd u_ff = ff ? VectorXd(-ctrl.ff_gain * dhat) : VectorXd::Zero(m);

      const QpInstance qp = build_qp(ctrl, Xhat, u_hist, u_ff);
      const HildrethResult hr = hildreth_solve(ctrl.E, qp.F, qp.M, qp.g, ctrl.cfg.hildreth_max_iters,
                                               ctrl.cfg.hildreth_tol, ctrl.cfg.hildreth_warm_start ? &lambda : nullptr);
      lambda = hr.lambda;
      tr.qp_iters[k] = hr.iterations;
      if (!hr.converged) ++tr.qp_unconverged;
      const VectorXd uf = ctrl.Luf[0] * hr.eta;
      VectorXd u_mpc = uf;
      for (int i = 0; i < nw; ++i) u_mpc -= ctrl.im.alpha(i) * u_hist[i];
      u_unsat = u_mpc + u_ff;
      u_app = ctrl.cfg.saturation ? saturate(u_unsat, *ctrl.cfg.saturation) : u_unsat;
      if ((u_app - u_unsat).cwiseAbs().maxCoeff() > 0.0) tr.sat_active[k] = 1;

      const VectorXd u_mpc_app = u_app - u_ff;
      if (nw > 0) {
        u_hist.push_front(u_mpc_app);
        u_hist.pop_back();
      }
      const VectorXd uf_app = uf_filter.step(u_app);
      const MatrixXd& Kf = (ctrl.cfg.kalman_use_schedule && k < static_cast<int>(ctrl.kalman.gains.size()))
                               ? ctrl.kalman.gains[k]
                               : ctrl.kalman.K_ss;
      Xhat = ctrl.aug.A * Xhat + ctrl.aug.B * uf_app + Kf * (y - ctrl.aug.C * Xhat);
      u_prev = u_app;
    }

    tr.d.row(k) = d.transpose();
    tr.y.row(k) = y.transpose();
    tr.u_applied.row(k) = u_app.transpose();
    tr.u_unsat.row(k) = u_unsat.transpose();

    x = sys.A * x + sys.B * u_app + plant.H * d;
    if (plant.proc_std.size() == n)
      for (int i = 0; i < n; ++i) x(i) += plant.proc_std(i) * nd(rng);
    if (!x.allFinite() || x.cwiseAbs().maxCoeff() > 1e12) {
      tr.truncated = true;
      tr.diag.warn(fmt::format("simulation diverged at step {}; trace truncated", k));
      ++k;
      break;
    }
  }
  if (k < K) {
    tr.t.conservativeResize(k);
    tr.d.conservativeResize(k, Eigen::NoChange);
    tr.y.conservativeResize(k, Eigen::NoChange);
    tr.y_hat.conservativeResize(k, Eigen::NoChange);
    tr.u_applied.conservativeResize(k, Eigen::NoChange);
    tr.u_unsat.conservativeResize(k, Eigen::NoChange);
    tr.d_hat.conservativeResize(k, Eigen::NoChange);
    tr.qp_iters.resize(k);
    tr.sat_active.resize(k);
  }
  if (tr.qp_unconverged > 0)
    tr.diag.warn(fmt::format("QP solver hit the iteration cap at {} steps", tr.qp_unconverged));
  return tr;
}

double tone_amplitude(const VectorXd& x, double freq_hz, double Ts, int window) {
  const Eigen::Index L = std::min<Eigen::Index>(window, x.size());
  if (L <= 0) return 0.0;
  const Eigen::Index start = x.size() - L;
  cd acc(0.0, 0.0);
  for (Eigen::Index i = 0; i < L; ++i) {
    const double ph = -2.0 * kPi * freq_hz * Ts * static_cast<double>(start + i);
    acc += x(start + i) * cd(std::cos(ph), std::sin(ph));
  }
  return 2.0 * std::abs(acc) / static_cast<double>(L);
}

}  // namespace avc
