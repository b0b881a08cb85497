#pragma once

// Damped least squares over a residual vector, backed by Eigen's MINPACK
// Levenberg-Marquardt port.

#include <Eigen/Core>

#include <functional>
#include <string>

namespace cryoscan::lsq {

using Residuals = std::function<void(const Eigen::VectorXd& x, Eigen::VectorXd& r)>;
using Jacobian = std::function<void(const Eigen::VectorXd& x, Eigen::MatrixXd& j)>;

struct Problem {
    Eigen::Index n_residuals = 0;
    Residuals residuals;
    Jacobian jacobian;  // empty: central differences
};

struct Options {
    double ftol = 1e-10;  // relative change of the cost
    double xtol = 1e-12;
    int max_iterations = 200;
};

struct Result {
    Eigen::VectorXd x;
    double cost = 0.0;  // 0.5 * |r|^2
    int iterations = 0;
    bool converged = false;
    std::string status;
};

Result solve(const Problem& problem, Eigen::VectorXd x0, const Options& options = {});

}  // namespace cryoscan::lsq
