#include "avc/linalg.hpp"

#include <algorithm>
#include <limits>

namespace avc {

VectorXcd poly_from_roots(const VectorXcd& roots) {
  VectorXcd c = VectorXcd::Zero(roots.size() + 1);
  c(0) = 1.0;
  for (Eigen::Index k = 0; k < roots.size(); ++k)
    for (Eigen::Index i = k + 1; i >= 1; --i) c(i) -= roots(k) * c(i - 1);
  return c;
}

MatrixXd pinv(const MatrixXd& a, double rel_tol) {
  Eigen::JacobiSVD<MatrixXd> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const auto& s = svd.singularValues();
  double cut = s.size() ? rel_tol * s(0) : 0.0;
  VectorXd inv = s;
  for (Eigen::Index i = 0; i < s.size(); ++i) inv(i) = s(i) > cut ? 1.0 / s(i) : 0.0;
  return svd.matrixV() * inv.asDiagonal() * svd.matrixU().transpose();
}

int numerical_rank(const MatrixXcd& a, double rel_tol) {
  Eigen::JacobiSVD<MatrixXcd> svd(a);
  const auto& s = svd.singularValues();
  if (s.size() == 0 || s(0) == 0.0) return 0;
  int r = 0;
  for (Eigen::Index i = 0; i < s.size(); ++i)
    if (s(i) > rel_tol * s(0)) ++r;
  return r;
}

VectorXcd eigenvalues(const MatrixXd& a) {
  if (a.rows() == 0) return VectorXcd();
  Eigen::EigenSolver<MatrixXd> es(a, false);
  return es.eigenvalues();
}

double spectral_radius(const MatrixXd& a) {
  if (a.rows() == 0) return 0.0;
  return eigenvalues(a).cwiseAbs().maxCoeff();
}

double hausdorff(const VectorXcd& a, const VectorXcd& b) {
  auto directed = [](const VectorXcd& p, const VectorXcd& q) {
    double worst = 0.0;
    for (Eigen::Index i = 0; i < p.size(); ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (Eigen::Index j = 0; j < q.size(); ++j) best = std::min(best, std::abs(p(i) - q(j)));
      worst = std::max(worst, best);
    }
    return worst;
  };
  return std::max(directed(a, b), directed(b, a));
}

double condition_number(const MatrixXd& a) {
  Eigen::JacobiSVD<MatrixXd> svd(a);
  const auto& s = svd.singularValues();
  return s(0) / s(s.size() - 1);
}

cd complex_normal(Rng& rng, double var) {
  std::normal_distribution<double> n(0.0, std::sqrt(var / 2.0));
  double re = n(rng);
  double im = n(rng);
  return {re, im};
}

}  // namespace avc
