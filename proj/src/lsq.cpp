#include "cryoscan/lsq.hpp"

#include "cryoscan/errors.hpp"

#include <unsupported/Eigen/NonLinearOptimization>
#include <unsupported/Eigen/NumericalDiff>

namespace cryoscan::lsq {

namespace {

struct Functor {
    using Scalar = double;
    using InputType = Eigen::VectorXd;
    using ValueType = Eigen::VectorXd;
    using JacobianType = Eigen::MatrixXd;
    enum { InputsAtCompileTime = Eigen::Dynamic, ValuesAtCompileTime = Eigen::Dynamic };

    const Problem* problem = nullptr;
    Eigen::Index n_inputs = 0;

    Functor() = default;
    Functor(const Problem* p, Eigen::Index n) : problem(p), n_inputs(n) {}

    Eigen::Index inputs() const { return n_inputs; }
    Eigen::Index values() const { return problem->n_residuals; }

    int operator()(const Eigen::VectorXd& x, Eigen::VectorXd& r) const {
        r.resize(problem->n_residuals);
        problem->residuals(x, r);
        return r.allFinite() ? 0 : -1;
    }
};

struct AnalyticFunctor : Functor {
    using Functor::Functor;
    int df(const Eigen::VectorXd& x, Eigen::MatrixXd& j) const {
        j.resize(problem->n_residuals, n_inputs);
        problem->jacobian(x, j);
        return 0;
    }
};

const char* status_name(Eigen::LevenbergMarquardtSpace::Status s) {
    using namespace Eigen::LevenbergMarquardtSpace;
    switch (s) {
        case RelativeReductionTooSmall: return "relative cost reduction below ftol";
        case RelativeErrorTooSmall: return "relative step below xtol";
        case RelativeErrorAndReductionTooSmall: return "cost and step below tolerance";
        case CosinusTooSmall: return "residual orthogonal to jacobian";
        case TooManyFunctionEvaluation: return "too many function evaluations";
        case FtolTooSmall: return "ftol too small for machine precision";
        case XtolTooSmall: return "xtol too small for machine precision";
        case GtolTooSmall: return "gtol too small for machine precision";
        case ImproperInputParameters: return "improper input parameters";
        case UserAsked: return "non-finite residual";
        default: return "iteration limit";
    }
}

template <typename F>
Result run(F& functor, Eigen::VectorXd x, const Options& options) {
    using namespace Eigen::LevenbergMarquardtSpace;
    Eigen::LevenbergMarquardt<F> lm(functor);
    lm.parameters.ftol = options.ftol;
    lm.parameters.xtol = options.xtol;
    lm.parameters.maxfev = 1000 * (x.size() + 1) * options.max_iterations;
    Status status = lm.minimizeInit(x);
    if (status == ImproperInputParameters) {
        throw FitError("least squares: fewer residuals than parameters");
    }
    do {
        status = lm.minimizeOneStep(x);
    } while (status == Running && lm.iter <= options.max_iterations);

    Result out;
    out.x = x;
    out.iterations = static_cast<int>(lm.iter);
    out.cost = 0.5 * lm.fvec.squaredNorm();
    out.status = status_name(status);
    out.converged = status == RelativeReductionTooSmall || status == RelativeErrorTooSmall ||
                    status == RelativeErrorAndReductionTooSmall || status == CosinusTooSmall ||
                    status == FtolTooSmall || status == XtolTooSmall || status == GtolTooSmall;
    return out;
}

}  // namespace

Result solve(const Problem& problem, Eigen::VectorXd x0, const Options& options) {
    if (!problem.residuals || problem.n_residuals < x0.size() || x0.size() == 0) {
        throw FitError("least squares: need at least as many residuals as parameters");
    }
    if (problem.jacobian) {
        AnalyticFunctor f(&problem, x0.size());
        return run(f, std::move(x0), options);
    }
    Eigen::NumericalDiff<Functor, Eigen::Central> f(Functor(&problem, x0.size()));
    return run(f, std::move(x0), options);
}

}  // namespace cryoscan::lsq
