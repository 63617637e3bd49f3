#pragma once

// Outer maximum likelihood fit and delta-method uncertainty.

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "alap/bfgs.hpp"
#include "alap/laplace.hpp"

namespace alap {

struct FitOptions {
    double outer_tol = 1e-6;
    int max_iter = 500;
    bool uncertainty = true;
};

struct Uncertainty {
    std::optional<std::vector<double>> theta_se;
    std::optional<std::vector<double>> theta_cov;  // m x m, row-major
    std::vector<double> outer_hessian;             // m x m, row-major
    std::vector<double> u_sd;
    std::string diagnostic;
};

struct FitReport {
    std::string model;
    std::vector<std::string> parameter_names;
    std::vector<double> theta_hat;
    std::optional<std::vector<double>> theta_se;
    std::vector<double> u_hat;
    std::vector<double> u_sd;
    double objective = 0;
    int iterations = 0;
    bool converged = false;
    double grad_norm = 0;
    std::string message;
    std::string diagnostic;
};

namespace detail {

/// In-place inverse of a small SPD matrix by Cholesky; false if not PD or if
/// a pivot falls below 1e-9 of its diagonal entry.
inline bool spd_inverse(std::vector<double>& a, std::size_t m)
{
    std::vector<double> L(m * m, 0.0);
    for (std::size_t j = 0; j < m; ++j) {
        double d = a[j * m + j];
        for (std::size_t k = 0; k < j; ++k) d -= L[j * m + k] * L[j * m + k];
        if (!(d > 1e-9 * std::abs(a[j * m + j]))) return false;
        L[j * m + j] = std::sqrt(d);
        for (std::size_t i = j + 1; i < m; ++i) {
            double s = a[i * m + j];
            for (std::size_t k = 0; k < j; ++k) s -= L[i * m + k] * L[j * m + k];
            L[i * m + j] = s / L[j * m + j];
        }
    }
    // columns of A^{-1} from L L^T x = e_c
    std::vector<double> x(m);
    for (std::size_t c = 0; c < m; ++c) {
        for (std::size_t i = 0; i < m; ++i) {
            double s = i == c ? 1.0 : 0.0;
            for (std::size_t k = 0; k < i; ++k) s -= L[i * m + k] * x[k];
            x[i] = s / L[i * m + i];
        }
        for (std::size_t i = m; i-- > 0;) {
            double s = x[i];
            for (std::size_t k = i + 1; k < m; ++k) s -= L[k * m + i] * x[k];
            x[i] = s / L[i * m + i];
        }
        for (std::size_t i = 0; i < m; ++i) a[i * m + c] = x[i];
    }
    return true;
}

}  // namespace detail

/// Outer Hessian of -log L* by central differences of the exact gradient,
/// theta standard errors from its inverse, and random-effect marginal SDs
///   sd(u_i)^2 = (H^{-1})_ii + (J V J^T)_ii,  J = -H^{-1} f''_{u theta}.
/// Leaves the engine evaluated at theta_hat.
inline Uncertainty sdreport(LaplaceEngine& engine, std::span<const double> theta_hat)
{
    const std::size_t m = engine.m(), n = engine.n();
    Uncertainty out;
    engine.neg_log_laplace(theta_hat);
    const std::vector<double> u_hat(engine.u_hat().begin(), engine.u_hat().end());

    std::vector<double> Hout(m * m, 0.0);
    std::vector<double> th(theta_hat.begin(), theta_hat.end());
    for (std::size_t i = 0; i < m; ++i) {
        const double h = 1e-4 * std::max(1.0, std::abs(theta_hat[i]));
        th[i] = theta_hat[i] + h;
        engine.set_warm_start(u_hat);
        const auto gp = engine.laplace_gradient(th);
        th[i] = theta_hat[i] - h;
        engine.set_warm_start(u_hat);
        const auto gm = engine.laplace_gradient(th);
        th[i] = theta_hat[i];
        for (std::size_t j = 0; j < m; ++j) Hout[j * m + i] = (gp[j] - gm[j]) / (2 * h);
    }
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < i; ++j) Hout[i * m + j] = Hout[j * m + i] = 0.5 * (Hout[i * m + j] + Hout[j * m + i]);
    out.outer_hessian = Hout;

    std::vector<double> V = Hout;
    if (detail::spd_inverse(V, m)) {
        std::vector<double> se(m);
        for (std::size_t i = 0; i < m; ++i) se[i] = std::sqrt(V[i * m + i]);
        out.theta_se = se;
        out.theta_cov = V;
    } else {
        out.diagnostic = "outer Hessian is not positive definite; parameters may not be identifiable";
    }

    engine.set_warm_start(u_hat);
    engine.neg_log_laplace(theta_hat);
    std::vector<double> var = engine.inverse().diagonal();
    if (out.theta_cov && m > 0) {
        std::vector<double> J(n * m);  // column-major: J[j * n + i]
        for (std::size_t j = 0; j < m; ++j) {
            const auto col = engine.cross_hessian_column(j);
            const auto sol = engine.solve_hessian(col);
            for (std::size_t i = 0; i < n; ++i) J[j * n + i] = -sol[i];
        }
        for (std::size_t i = 0; i < n; ++i) {
            double s = 0;
            for (std::size_t j = 0; j < m; ++j)
                for (std::size_t k = 0; k < m; ++k) s += J[j * n + i] * V[j * m + k] * J[k * n + i];
            var[i] += s;
        }
    }
    out.u_sd.resize(n);
    for (std::size_t i = 0; i < n; ++i) out.u_sd[i] = std::sqrt(std::max(0.0, var[i]));
    return out;
}

/// BFGS minimization of -log L* from theta0, followed by sdreport.
inline FitReport fit(LaplaceEngine& engine, std::span<const double> theta0, const FitOptions& options = {})
{
    FitReport rep;
    rep.model = engine.model().name;
    rep.parameter_names = engine.model().parameter_names;

    BfgsOptions bo;
    bo.grad_tol = options.outer_tol;
    bo.max_iter = options.max_iter;
    auto fg = [&](std::span<const double> th, std::vector<double>& g) {
        const double f = engine.neg_log_laplace(th);
        g = engine.laplace_gradient(th);
        return f;
    };
    BfgsResult r = bfgs_minimize(fg, theta0, bo);
    rep.theta_hat = r.x;
    rep.objective = r.f;
    rep.iterations = r.iterations;
    rep.converged = r.converged;
    rep.grad_norm = r.grad_norm;
    rep.message = r.message;

    try {
        if (options.uncertainty) {
            Uncertainty u = sdreport(engine, rep.theta_hat);
            rep.theta_se = u.theta_se;
            rep.u_sd = u.u_sd;
            rep.diagnostic = u.diagnostic;
        } else {
            engine.neg_log_laplace(rep.theta_hat);
        }
        rep.u_hat.assign(engine.u_hat().begin(), engine.u_hat().end());
    } catch (const std::exception& e) {
        rep.diagnostic = e.what();
    }
    return rep;
}

}  // namespace alap
