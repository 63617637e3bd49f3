#pragma once

// Dense BFGS with a backtracking Armijo line search that interpolates with a
// quadratic on the first backtrack and a cubic afterwards.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "alap/metric.hpp"

namespace alap {

struct BfgsOptions {
    double grad_tol = 1e-6;  // stop when |g|_inf <= grad_tol * max(1, |f|)
    int max_iter = 500;
    double armijo = 1e-4;
    int max_backtracks = 40;
};

struct BfgsResult {
    std::vector<double> x;
    double f = 0;
    std::vector<double> g;
    int iterations = 0;
    int evaluations = 0;
    bool converged = false;
    double grad_norm = 0;
    std::string message;
};

namespace detail {

inline double dot(std::span<const double> a, std::span<const double> b)
{
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

/// Minimizer of the cubic through (0, f0, d0), (a1, f1), (a2, f2).
inline double cubic_step(double f0, double d0, double a1, double f1, double a2, double f2)
{
    const double r1 = f1 - f0 - d0 * a1;
    const double r2 = f2 - f0 - d0 * a2;
    const double den = a1 - a2;
    const double a = (r1 / (a1 * a1) - r2 / (a2 * a2)) / den;
    const double b = (-a2 * r1 / (a1 * a1) + a1 * r2 / (a2 * a2)) / den;
    if (a == 0) return -d0 / (2 * b);
    const double disc = b * b - 3 * a * d0;
    if (disc < 0) return 0.5 * a1;
    return (-b + std::sqrt(disc)) / (3 * a);
}

}  // namespace detail

/// Minimizes f. fg(x, g) returns f(x) and writes the gradient into g; an
/// exception or a non-finite value marks x as rejected.
template <class FG>
BfgsResult bfgs_minimize(FG&& fg, std::span<const double> x0, const BfgsOptions& opt = {})
{
    const std::size_t m = x0.size();
    BfgsResult r;
    r.x.assign(x0.begin(), x0.end());
    r.g.assign(m, 0.0);

    auto eval = [&](std::span<const double> x, std::vector<double>& g, double& f) {
        ++r.evaluations;
        try {
            f = fg(x, g);
        } catch (const std::exception&) {
            return false;
        }
        if (!std::isfinite(f)) return false;
        for (double v : g)
            if (!std::isfinite(v)) return false;
        return true;
    };

    if (!eval(r.x, r.g, r.f)) {
        r.message = "objective could not be evaluated at the start point";
        r.grad_norm = INFINITY;
        return r;
    }

    std::vector<double> Hinv(m * m, 0.0);
    auto reset = [&] {
        std::fill(Hinv.begin(), Hinv.end(), 0.0);
        for (std::size_t i = 0; i < m; ++i) Hinv[i * m + i] = 1;
    };
    reset();
    bool fresh = true;  // Hinv is the identity; scale the step
    std::vector<double> d(m), xt(m), gt(m), s(m), y(m), Hy(m);

    for (r.iterations = 0;; ++r.iterations) {
        r.grad_norm = max_abs(r.g);
        if (r.grad_norm <= opt.grad_tol * std::max(1.0, std::abs(r.f))) {
            r.converged = true;
            r.message = "converged";
            return r;
        }
        if (r.iterations >= opt.max_iter) {
            r.message = "iteration limit reached";
            return r;
        }

        for (std::size_t i = 0; i < m; ++i) {
            double v = 0;
            for (std::size_t j = 0; j < m; ++j) v -= Hinv[i * m + j] * r.g[j];
            d[i] = v;
        }
        double slope = detail::dot(r.g, d);
        if (!(slope < 0)) {
            reset();
            fresh = true;
            for (std::size_t i = 0; i < m; ++i) d[i] = -r.g[i];
            slope = detail::dot(r.g, d);
        }
        if (fresh) {
            const double scale = std::min(1.0, 1.0 / max_abs(d));
            for (auto& v : d) v *= scale;
            slope *= scale;
        }

        double alpha = 1, prev_alpha = 0, prev_f = 0, ft = 0;
        bool accepted = false;
        for (int k = 0; k < opt.max_backtracks; ++k) {
            for (std::size_t i = 0; i < m; ++i) xt[i] = r.x[i] + alpha * d[i];
            const bool ok = eval(xt, gt, ft);
            if (ok && ft <= r.f + opt.armijo * alpha * slope) {
                accepted = true;
                break;
            }
            double next;
            if (!ok) {
                next = 0.1 * alpha;
            } else if (prev_alpha == 0) {
                next = -slope * alpha * alpha / (2 * (ft - r.f - slope * alpha));
            } else {
                next = detail::cubic_step(r.f, slope, alpha, ft, prev_alpha, prev_f);
            }
            if (!std::isfinite(next)) next = 0.5 * alpha;
            next = std::clamp(next, 0.1 * alpha, 0.5 * alpha);
            if (ok) {
                prev_alpha = alpha;
                prev_f = ft;
            }
            alpha = next;
        }
        if (!accepted) {
            r.message = "line search failed";
            return r;
        }

        for (std::size_t i = 0; i < m; ++i) {
            s[i] = xt[i] - r.x[i];
            y[i] = gt[i] - r.g[i];
        }
        const double ys = detail::dot(y, s);
        const double yy = detail::dot(y, y);
        if (ys > 1e-10 * std::sqrt(detail::dot(s, s) * yy)) {
            if (fresh) {
                for (auto& v : Hinv) v *= ys / yy;
                fresh = false;
            }
            // Hinv <- (I - rho s y^T) Hinv (I - rho y s^T) + rho s s^T
            const double rho = 1 / ys;
            for (std::size_t i = 0; i < m; ++i) {
                double v = 0;
                for (std::size_t j = 0; j < m; ++j) v += Hinv[i * m + j] * y[j];
                Hy[i] = v;
            }
            const double yHy = detail::dot(y, Hy);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < m; ++j)
                    Hinv[i * m + j] += rho * ((1 + rho * yHy) * s[i] * s[j] - Hy[i] * s[j] - s[i] * Hy[j]);
        }
        r.x.swap(xt);
        r.g.swap(gt);
        r.f = ft;
        xt.resize(m);
        gt.resize(m);
    }
}

}  // namespace alap
