#pragma once

// Self-checks for one model: tape gradients against finite differences,
// detected sparsity against a finite-difference Hessian, and the Laplace
// gradient against differences of the Laplace value.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "alap/laplace.hpp"
#include "alap/metric.hpp"

namespace alap {

struct CheckItem {
    std::string name;
    double value = 0;  // measured distance or count
    double limit = 0;
    bool passed = false;
    std::string note;
};

struct CheckOptions {
    double metric_max = 1e-5;  // Laplace gradient vs finite differences
    std::uint64_t seed = 1;
    int points = 3;
    std::size_t dense_limit = 50;  // columns of the FD Hessian checked
};

/// Central differences of a scalar function, step h * max(1, |x_i|).
inline std::vector<double> fd_gradient(const std::function<double(std::span<const double>)>& f,
                                       std::span<const double> x, double h = 1e-5)
{
    std::vector<double> g(x.size()), xp(x.begin(), x.end());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double s = h * std::max(1.0, std::abs(x[i]));
        xp[i] = x[i] + s;
        const double fp = f(xp);
        xp[i] = x[i] - s;
        const double fm = f(xp);
        xp[i] = x[i];
        g[i] = (fp - fm) / (2 * s);
    }
    return g;
}

/// Median time in seconds of the Laplace value alone and of value plus
/// gradient. Every repetition starts the inner problem from the model's
/// initial u, so both measurements perform the same inner work.
struct CheapGradient {
    double value_seconds = 0;
    double both_seconds = 0;
    double ratio() const { return both_seconds / value_seconds; }
};

inline CheapGradient measure_cheap_gradient(LaplaceEngine& engine, std::span<const double> theta, int reps = 7)
{
    using clock = std::chrono::steady_clock;
    auto median = [](std::vector<double> v) {
        std::sort(v.begin(), v.end());
        return v[v.size() / 2];
    };
    std::vector<double> tv, tb;
    for (int r = 0; r < reps; ++r) {
        engine.reset_warm_start();
        auto t0 = clock::now();
        engine.neg_log_laplace(theta);
        tv.push_back(std::chrono::duration<double>(clock::now() - t0).count());

        engine.reset_warm_start();
        t0 = clock::now();
        engine.neg_log_laplace(theta);
        engine.laplace_gradient(theta);
        tb.push_back(std::chrono::duration<double>(clock::now() - t0).count());
    }
    return {median(tv), median(tb)};
}

namespace detail {

inline CheckItem item(std::string name, double value, double limit, std::string note = {})
{
    return {std::move(name), value, limit, value <= limit, std::move(note)};
}

}  // namespace detail

inline std::vector<CheckItem> run_checks(LaplaceEngine& engine, const CheckOptions& opt = {})
{
    std::vector<CheckItem> out;
    const Model& model = engine.model();
    const std::size_t n = model.n, m = model.m;
    std::mt19937_64 rng(opt.seed);
    std::uniform_real_distribution<double> jitter(-0.3, 0.3);

    std::vector<std::vector<double>> points;
    for (int k = 0; k < opt.points; ++k) {
        std::vector<double> x = model.point(model.u0, model.theta0);
        for (auto& v : x) v += jitter(rng);
        points.push_back(std::move(x));
    }
    const Tape& t1 = engine.t1();
    const Tape& t2 = engine.t2();
    const double one = 1;

    double r_tape = 0, r_fd = 0;
    for (const auto& x : points) {
        const auto rev = reverse_one(t1, x, std::span<const double>(&one, 1));
        r_tape = std::max(r_tape, relative_distance(forward_zero(t2, x), rev));
        const auto fd = fd_gradient([&](std::span<const double> z) { return forward_zero(t1, z)[0]; }, x);
        r_fd = std::max(r_fd, relative_distance(rev, fd));
    }
    out.push_back(detail::item("gradient tape vs reverse sweep", r_tape, 1e-12));
    out.push_back(detail::item("reverse sweep vs finite differences", r_fd, 1e-6));
    out.push_back(detail::item("gradient tape size / function tape size",
                               static_cast<double>(t2.size()) / static_cast<double>(t1.size()), 4.0));
    out.push_back(detail::item("reverse / forward operation count",
                               static_cast<double>(reverse_op_count(t1)) /
                                   static_cast<double>(std::max<std::size_t>(1, forward_op_count(t1))),
                               4.0));

    const SparsityPattern& pat = engine.pattern();
    out.push_back(detail::item("pattern equals " + model.structure, pat == model.expected_pattern ? 0 : 1, 0));

    // finite-difference Hessian columns from the gradient tape
    const std::size_t cols = std::min(n, opt.dense_limit);
    const auto& x = points.front();
    std::size_t mismatches = 0;
    double r_hess = 0;
    {
        const auto h = sparse_hessian(t2, engine.subgraphs(), engine.worker_pattern(0), x);
        std::vector<double> fd_on_pattern, ad_on_pattern;
        std::vector<double> xp = x;
        for (std::size_t j = 0; j < cols; ++j) {
            const double s = 1e-5 * std::max(1.0, std::abs(x[j]));
            xp[j] = x[j] + s;
            const auto gp = forward_zero(t2, xp);
            xp[j] = x[j] - s;
            const auto gm = forward_zero(t2, xp);
            xp[j] = x[j];
            for (std::size_t i = j; i < n; ++i) {
                const double v = (gp[i] - gm[i]) / (2 * s);
                const auto l = engine.worker_pattern(0).find(static_cast<std::int32_t>(i), static_cast<std::int32_t>(j));
                if ((std::abs(v) > 1e-8) != (l >= 0)) ++mismatches;
                if (l >= 0) {
                    fd_on_pattern.push_back(v);
                    ad_on_pattern.push_back(h[l]);
                }
            }
        }
        r_hess = relative_distance(ad_on_pattern, fd_on_pattern);
    }
    out.push_back(detail::item("pattern vs FD Hessian nonzeros (" + std::to_string(cols) + " columns)",
                               static_cast<double>(mismatches), 0));
    out.push_back(detail::item("sparse Hessian vs FD Hessian", r_hess, 1e-6));

    if (m > 0) {
        engine.reset_warm_start();
        const auto th = model.theta0;
        const auto g = engine.laplace_gradient(th);
        const std::vector<double> u_hat(engine.u_hat().begin(), engine.u_hat().end());
        const auto fd = fd_gradient(
            [&](std::span<const double> t) {
                engine.set_warm_start(u_hat);
                return engine.neg_log_laplace(t);
            },
            th);
        out.push_back(detail::item("Laplace gradient vs finite differences", relative_distance(g, fd), opt.metric_max));
    } else {
        out.push_back({"Laplace gradient vs finite differences", 0, opt.metric_max, true, "no parameters"});
    }

    {
        const auto cg = measure_cheap_gradient(engine, model.theta0, 5);
        out.push_back(detail::item("time(value+gradient) / time(value)", cg.ratio(), 4.0));
    }
    return out;
}

}  // namespace alap
