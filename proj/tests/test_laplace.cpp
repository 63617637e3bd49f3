#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "alap/laplace.hpp"
#include "alap/metric.hpp"
#include "oracles.hpp"

using namespace alap;

namespace {

/// u_i ~ N(0, exp(2 theta)), y_i | u_i ~ N(u_i, 1), independent over i.
Model gaussian_scalar(std::vector<double> y)
{
    Model m;
    m.name = "gaussian";
    m.n = y.size();
    m.m = 1;
    m.u0.assign(m.n, 0.0);
    m.theta0 = {0.0};
    m.parameter_names = {"logsd"};
    m.expected_pattern = SparsityPattern::banded(m.n, 0);
    m.nll = [y = std::move(y)](std::span<const AdScalar> u, std::span<const AdScalar> th, TermAccumulator& f) {
        const AdScalar sd = exp(th[0]);
        for (std::size_t i = 0; i < y.size(); ++i) {
            f -= dnorm_log(u[i], 0.0, sd);
            f -= dnorm_log(AdScalar(y[i]), u[i], 1.0);
        }
    };
    return m;
}

double gaussian_scalar_nll(const std::vector<double>& y, double theta)
{
    const double v = std::exp(2 * theta) + 1;
    double f = 0;
    for (double yi : y) f += 0.5 * std::log(2 * std::numbers::pi * v) + 0.5 * yi * yi / v;
    return f;
}

double gaussian_scalar_grad(const std::vector<double>& y, double theta)
{
    const double s2 = std::exp(2 * theta), v = s2 + 1;
    double g = 0;
    for (double yi : y) g += s2 / v - yi * yi * s2 / (v * v);
    return g;
}

Model single_effect(NllBuilder nll, double u0 = 0.0)
{
    Model m;
    m.name = "single";
    m.n = 1;
    m.u0 = {u0};
    m.nll = std::move(nll);
    return m;
}

oracle::Mat mvrw_matrix(const Dataset& d, std::size_t p)
{
    oracle::Mat Y(d.rows(), p);
    for (std::size_t i = 0; i < p; ++i)
        for (std::size_t t = 0; t < d.rows(); ++t) Y(t, i) = d.column("y" + std::to_string(i + 1))[t];
    return Y;
}

std::vector<double> jitter(std::vector<double> x, std::mt19937_64& rng, double s)
{
    std::normal_distribution<double> N(0, s);
    for (auto& v : x) v += N(rng);
    return x;
}

std::vector<Model> gradient_models()
{
    std::vector<Model> out;
    auto th = make_model("thetalog", simulate_thetalog(31, 60));
    th.theta0 = {-1, 0, 6, std::log(0.01), std::log(0.04)};
    out.push_back(std::move(th));
    out.push_back(make_model("mvrw", simulate_mvrw(32, 20, 3)));
    auto sp = make_model("spatial", simulate_spatial(33, 4));
    sp.theta0 = {1, 0.5, std::log(2.0), std::log(0.7)};
    out.push_back(std::move(sp));
    return out;
}

}  // namespace

TEST(Inner, QuadraticConvergesInOneNewtonStep)
{
    Model m;
    m.name = "quadratic";
    m.n = 5;
    m.m = 1;
    m.u0.assign(5, 0.0);
    m.theta0 = {0.0};
    m.nll = [](std::span<const AdScalar> u, std::span<const AdScalar> th, TermAccumulator& f) {
        for (const auto& v : u) f += (v - th[0]) * (v - th[0]);
    };
    LaplaceEngine e(m);
    const auto r = e.inner_optimize(std::vector<double>{2.5}, m.u0);
    for (double v : r.u_hat) EXPECT_DOUBLE_EQ(v, 2.5);
    EXPECT_EQ(r.iterations, 1);
    EXPECT_FALSE(r.shifted);
}

TEST(Inner, ThetalogConverges)
{
    auto m = make_model("thetalog", simulate_thetalog(34, 100));
    LaplaceEngine e(m);
    const std::vector<double> theta{-1, 0, 6, std::log(0.01), std::log(0.04)};
    const auto r = e.inner_optimize(theta, m.u0);
    EXPECT_LE(r.grad_norm, 1e-8 * std::max(1.0, std::abs(r.f)));
    EXPECT_LE(r.iterations, 100);
}

TEST(Inner, UnboundedObjectiveFails)
{
    LaplaceEngine e(single_effect([](auto u, auto, TermAccumulator& f) { f -= u[0]; }));
    try {
        e.inner_optimize({}, std::vector<double>{0.0});
        FAIL() << "expected InnerFailure";
    } catch (const InnerFailure& ex) {
        EXPECT_EQ(ex.best_u.size(), 1u);
        EXPECT_GT(ex.grad_norm, 0.0);
    }
}

TEST(Inner, SingularHessianAtOptimumIsInvalid)
{
    LaplaceEngine e(single_effect([](auto u, auto, TermAccumulator& f) { f += (u[0] * u[0]) * (u[0] * u[0]); }));
    EXPECT_THROW(e.neg_log_laplace({}), LaplaceInvalid);
}

TEST(Laplace, RandomWalkValue)
{
    LaplaceEngine e(rw8());
    EXPECT_NEAR(e.neg_log_laplace({}), -4 * std::log(std::numbers::pi), 1e-12);
    EXPECT_TRUE(e.laplace_gradient({}).empty());
    for (double v : e.u_hat()) EXPECT_EQ(v, 0.0);
}

TEST(Laplace, GaussianClosedForm)
{
    std::mt19937_64 rng(35);
    std::normal_distribution<double> N(0, 1.5);
    std::vector<double> y(12);
    for (auto& v : y) v = N(rng);
    LaplaceEngine e(gaussian_scalar(y));
    for (double theta : {-1.0, 0.0, 0.4, 1.3}) {
        const std::vector<double> th{theta};
        EXPECT_LE(relative_distance(e.neg_log_laplace(th), gaussian_scalar_nll(y, theta)), 1e-12);
        EXPECT_LE(relative_distance(e.laplace_gradient(th)[0], gaussian_scalar_grad(y, theta)), 1e-9);
    }
}

TEST(Laplace, MultivariateRandomWalkMatchesKalmanFilter)
{
    for (std::size_t p : {1u, 3u}) {
        const auto d = simulate_mvrw(36, 40, p);
        const oracle::Mat Y = mvrw_matrix(d, p);
        LaplaceEngine e(make_model("mvrw", d));
        std::mt19937_64 rng(37);
        for (int k = 0; k < 3; ++k) {
            const auto th = jitter(std::vector<double>(e.m(), -0.8), rng, 0.3);
            EXPECT_LE(relative_distance(e.neg_log_laplace(th), oracle::kalman_nll(Y, th)), 1e-8) << "p=" << p;
            const auto fd = oracle::fd_gradient([&](const std::vector<double>& t) { return oracle::kalman_nll(Y, t); }, th);
            EXPECT_LE(relative_distance(e.laplace_gradient(th), fd), 1e-6) << "p=" << p;
        }
    }
}

TEST(Laplace, PosteriorModeMatchesDenseSolve)
{
    const auto d = simulate_mvrw(38, 15, 2);
    const oracle::Mat Y = mvrw_matrix(d, 2);
    LaplaceEngine e(make_model("mvrw", d));
    const std::vector<double> th{-0.5, -1.0, 0.3, -1.2};
    e.neg_log_laplace(th);
    const auto [H, b] = oracle::mvrw_posterior(Y, th);
    const oracle::Vec mode = H.ldlt().solve(b);
    EXPECT_LE(relative_distance(std::vector<double>(e.u_hat().begin(), e.u_hat().end()), oracle::to_std(mode)), 1e-9);
    const Eigen::LLT<oracle::Mat> llt(H);
    const oracle::Mat L = llt.matrixL();
    EXPECT_LE(relative_distance(e.factor().log_det(), 2 * L.diagonal().array().log().sum()), 1e-12);
}

TEST(Laplace, GradientMatchesFiniteDifferences)
{
    std::mt19937_64 rng(39);
    for (auto& m : gradient_models()) {
        LaplaceEngine e(m);
        for (int k = 0; k < 5; ++k) {
            const auto th = jitter(m.theta0, rng, 0.1);
            const auto g = e.laplace_gradient(th);
            const auto fd = oracle::fd_gradient([&](const std::vector<double>& t) { return e.neg_log_laplace(t); }, th);
            EXPECT_LE(relative_distance(g, fd), 1e-5) << m.name << " point " << k;
        }
    }
}

TEST(Laplace, GradientMatchesDenseTraceIdentity)
{
    // d/dtheta of f(u(theta), theta) + 1/2 log det H with u' = -H^{-1} f_u,theta
    std::mt19937_64 rng(40);
    for (auto& m : gradient_models()) {
        if (m.n > 20) {
            auto small = m.name == "thetalog" ? make_model("thetalog", simulate_thetalog(41, 20))
                                              : make_model("mvrw", simulate_mvrw(41, 6, 3));
            small.theta0 = m.theta0;
            m = std::move(small);
        }
        LaplaceEngine e(m);
        const auto th = jitter(m.theta0, rng, 0.05);
        const auto g = e.laplace_gradient(th);
        const auto n = static_cast<Eigen::Index>(e.n()), mm = static_cast<Eigen::Index>(e.m());
        const std::vector<double> x = m.point(e.u_hat(), th);
        const auto& pat = e.pattern();
        auto dense_h = [&](const std::vector<double>& z) {
            const auto h = e.hessian(z);
            oracle::Mat H = oracle::Mat::Zero(n, n);
            for (std::size_t l = 0; l < pat.nnz(); ++l) H(pat.rows()[l], pat.cols()[l]) = H(pat.cols()[l], pat.rows()[l]) = h[l];
            return H;
        };
        const oracle::Mat H = dense_h(x);
        const oracle::Mat Hinv = H.inverse();
        oracle::Mat Fut(n, mm);
        for (Eigen::Index j = 0; j < mm; ++j) Fut.col(j) = oracle::to_vec(e.cross_hessian_column(j));
        const oracle::Mat du = -Hinv * Fut;
        // dH/dx_i by central differences of the exact Hessian
        std::vector<double> dtrace(n + mm);
        for (Eigen::Index i = 0; i < n + mm; ++i) {
            auto xp = x, xm = x;
            const double s = 1e-5 * std::max(1.0, std::abs(x[i]));
            xp[i] += s;
            xm[i] -= s;
            dtrace[i] = 0.5 * (Hinv * (dense_h(xp) - dense_h(xm)) / (2 * s)).trace();
        }
        const auto full = e.f_gradient(x);
        std::vector<double> ref(mm);
        for (Eigen::Index j = 0; j < mm; ++j) {
            ref[j] = full[n + j] + dtrace[n + j];
            for (Eigen::Index i = 0; i < n; ++i) ref[j] += dtrace[i] * du(i, j);
        }
        EXPECT_LE(relative_distance(g, ref), 1e-6) << m.name;
    }
}

TEST(Laplace, WarmStartIsReproducible)
{
    auto m = gradient_models().front();
    LaplaceEngine a(m), b(m);
    const auto th = m.theta0;
    const double va = a.neg_log_laplace(th);
    const std::vector<double> ua(a.u_hat().begin(), a.u_hat().end());
    EXPECT_EQ(b.neg_log_laplace(th), va);

    auto other = th;
    other[0] += 0.2;
    b.neg_log_laplace(other);
    b.reset_warm_start();
    EXPECT_EQ(b.neg_log_laplace(th), va);

    LaplaceEngine c(m);
    c.set_warm_start(ua);
    c.neg_log_laplace(th);
    c.set_warm_start(ua);
    const double vc = c.neg_log_laplace(th);
    c.set_warm_start(ua);
    EXPECT_EQ(c.neg_log_laplace(th), vc);
    EXPECT_LE(relative_distance(vc, va), 1e-12);
}

TEST(Laplace, CachedStateAndProfile)
{
    LaplaceEngine e(gradient_models().front());
    EXPECT_FALSE(e.evaluated());
    EXPECT_THROW(e.u_hat(), std::logic_error);
    const auto th = e.model().theta0;
    e.laplace_gradient(th);
    const auto& p = e.profile();
    for (std::size_t s = 0; s < kStepCount; ++s) EXPECT_EQ(p.step_calls[s], 1u) << step_name(static_cast<Step>(s));
    EXPECT_GT(p.inner_iterations, 0u);
    EXPECT_GT(p.step_flops[static_cast<std::size_t>(Step::L4)], 0u);
    EXPECT_GT(p.step_flops[static_cast<std::size_t>(Step::G3)], 0u);
    e.laplace_gradient(th);
    EXPECT_EQ(p.step_calls[0], 1u);
    EXPECT_THROW(e.neg_log_laplace(std::vector<double>(e.m(), NAN)), std::invalid_argument);
    EXPECT_THROW(e.neg_log_laplace(std::vector<double>(e.m() + 1, 0.0)), AdError);
}

TEST(Laplace, NaturalOrderingGivesTheSameAnswer)
{
    auto m = make_model("spatial", simulate_spatial(42, 4));
    LaplaceOptions natural;
    natural.ordering = OrderingMethod::natural;
    LaplaceEngine a(m), b(m, natural);
    const std::vector<double> th{1, 0.5, std::log(2.0), std::log(0.7)};
    EXPECT_LE(relative_distance(a.neg_log_laplace(th), b.neg_log_laplace(th)), 1e-12);
    EXPECT_LE(relative_distance(a.laplace_gradient(th), b.laplace_gradient(th)), 1e-9);
}

TEST(Laplace, SolveFlopsBoundedByFactor)
{
    LaplaceEngine e(make_model("mvrw", simulate_mvrw(43, 30, 3)));
    e.laplace_gradient(e.model().theta0);
    const auto& p = e.profile();
    EXPECT_LE(p.step_flops[static_cast<std::size_t>(Step::G3)], 2 * p.step_flops[static_cast<std::size_t>(Step::L4)]);
    EXPECT_LE(p.step_flops[static_cast<std::size_t>(Step::G4)], p.step_flops[static_cast<std::size_t>(Step::L4)]);
}

TEST(Laplace, RejectsBadConfiguration)
{
    LaplaceOptions zero;
    zero.workers = 0;
    EXPECT_THROW(LaplaceEngine(rw8(), zero), std::invalid_argument);
    LaplaceOptions tol;
    tol.inner_tol = 0;
    EXPECT_THROW(LaplaceEngine(rw8(), tol), std::invalid_argument);
}
