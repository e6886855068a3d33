#pragma once

#include <complex>
#include <random>
#include <vector>

#include <Eigen/Dense>

namespace avc {

using cd = std::complex<double>;
using Eigen::MatrixXcd;
using Eigen::MatrixXd;
using Eigen::VectorXcd;
using Eigen::VectorXd;

using Rng = std::mt19937_64;

constexpr double kPi = 3.14159265358979323846;

// Monic polynomial coefficients [1, c1, ..., cn] with the given roots.
VectorXcd poly_from_roots(const VectorXcd& roots);

MatrixXd pinv(const MatrixXd& a, double rel_tol = 1e-12);

int numerical_rank(const MatrixXcd& a, double rel_tol = 1e-8);

double spectral_radius(const MatrixXd& a);

VectorXcd eigenvalues(const MatrixXd& a);

// Symmetric Hausdorff distance between two point sets in the complex plane.
double hausdorff(const VectorXcd& a, const VectorXcd& b);

double condition_number(const MatrixXd& a);

// Zero-mean circular complex Gaussian with E|z|^2 = var.
cd complex_normal(Rng& rng, double var);

}  // namespace avc
