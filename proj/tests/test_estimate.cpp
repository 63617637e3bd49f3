#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "alap/estimate.hpp"
#include "alap/metric.hpp"
#include "alap/report_json.hpp"
#include "oracles.hpp"

using namespace alap;

namespace {

/// u_i ~ N(0, exp(2 theta)), y_i | u_i ~ N(u_i, 1).
Model gaussian_scalar(std::vector<double> y)
{
    Model m;
    m.name = "gaussian";
    m.n = y.size();
    m.m = 1;
    m.u0.assign(m.n, 0.0);
    m.theta0 = {0.0};
    m.parameter_names = {"logsd"};
    m.nll = [y = std::move(y)](std::span<const AdScalar> u, std::span<const AdScalar> th, TermAccumulator& f) {
        const AdScalar sd = exp(th[0]);
        for (std::size_t i = 0; i < y.size(); ++i) {
            f -= dnorm_log(u[i], 0.0, sd);
            f -= dnorm_log(AdScalar(y[i]), u[i], 1.0);
        }
    };
    return m;
}

/// u_i ~ N(mu, 1), y_i | u_i ~ N(u_i, 1), so y_i ~ N(mu, 2).
Model iid_mean(std::vector<double> y)
{
    Model m;
    m.name = "iidmean";
    m.n = y.size();
    m.m = 1;
    m.u0.assign(m.n, 0.0);
    m.theta0 = {0.0};
    m.parameter_names = {"mu"};
    m.nll = [y = std::move(y)](std::span<const AdScalar> u, std::span<const AdScalar> th, TermAccumulator& f) {
        for (std::size_t i = 0; i < y.size(); ++i) {
            f -= dnorm_log(u[i], th[0], 1.0);
            f -= dnorm_log(AdScalar(y[i]), u[i], 1.0);
        }
    };
    return m;
}

std::vector<double> normal_sample(std::size_t n, double mean, double sd, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> N(mean, sd);
    std::vector<double> y(n);
    for (auto& v : y) v = N(rng);
    return y;
}

oracle::Mat mvrw_matrix(const Dataset& d, std::size_t p)
{
    oracle::Mat Y(d.rows(), p);
    for (std::size_t i = 0; i < p; ++i)
        for (std::size_t t = 0; t < d.rows(); ++t) Y(t, i) = d.column("y" + std::to_string(i + 1))[t];
    return Y;
}

/// Minimizer of the Kalman filter likelihood by Newton steps on finite
/// difference derivatives, started from a coarse BFGS solution.
std::vector<double> kalman_mle(const oracle::Mat& Y, std::vector<double> th)
{
    auto f = [&](const std::vector<double>& t) { return oracle::kalman_nll(Y, t); };
    auto fg = [&](std::span<const double> t, std::vector<double>& g) {
        const std::vector<double> tv(t.begin(), t.end());
        g = oracle::fd_gradient(f, tv);
        return f(tv);
    };
    BfgsOptions bo;
    bo.grad_tol = 1e-7;
    th = bfgs_minimize(fg, th, bo).x;
    for (int k = 0; k < 3; ++k) {
        const oracle::Mat H = oracle::fd_hessian(f, th, 1e-4);
        const oracle::Vec step = H.ldlt().solve(oracle::to_vec(oracle::fd_gradient(f, th)));
        for (std::size_t i = 0; i < th.size(); ++i) th[i] -= step(static_cast<Eigen::Index>(i));
    }
    return th;
}

}  // namespace

TEST(Bfgs, Rosenbrock)
{
    auto fg = [](std::span<const double> x, std::vector<double>& g) {
        const double a = 1 - x[0], b = x[1] - x[0] * x[0];
        g = {-2 * a - 400 * x[0] * b, 200 * b};
        return a * a + 100 * b * b;
    };
    BfgsOptions opt;
    opt.grad_tol = 1e-10;
    const auto r = bfgs_minimize(fg, std::vector<double>{-1.2, 1.0}, opt);
    EXPECT_TRUE(r.converged) << r.message;
    EXPECT_NEAR(r.x[0], 1.0, 1e-8);
    EXPECT_NEAR(r.x[1], 1.0, 1e-8);
}

TEST(Bfgs, RejectsNonFiniteTrialPoints)
{
    // log barrier: the first full step overshoots into the undefined region
    auto fg = [](std::span<const double> x, std::vector<double>& g) {
        g = {1 - 1 / x[0]};
        return x[0] - std::log(x[0]);
    };
    const auto r = bfgs_minimize(fg, std::vector<double>{0.05});
    EXPECT_TRUE(r.converged) << r.message;
    EXPECT_NEAR(r.x[0], 1.0, 1e-5);
}

TEST(Bfgs, StartPointFailure)
{
    auto fg = [](std::span<const double>, std::vector<double>& g) {
        g = {0.0};
        return NAN;
    };
    const auto r = bfgs_minimize(fg, std::vector<double>{0.0});
    EXPECT_FALSE(r.converged);
    EXPECT_FALSE(r.message.empty());
}

TEST(Fit, GaussianVarianceMle)
{
    const auto y = normal_sample(40, 0.0, 1.8, 51);
    double s = 0;
    for (double v : y) s += v * v;
    const double var_hat = s / y.size() - 1;
    ASSERT_GT(var_hat, 0.0);
    LaplaceEngine e(gaussian_scalar(y));
    FitOptions fo;
    fo.outer_tol = 1e-10;
    const auto r = fit(e, e.model().theta0, fo);
    ASSERT_TRUE(r.converged) << r.message;
    EXPECT_NEAR(r.theta_hat[0], 0.5 * std::log(var_hat), 1e-8);

    // observed information of the marginal likelihood in closed form
    const double s2 = var_hat, v = s2 + 1;
    double info = 0;
    for (double yi : y) info += 2 * s2 / (v * v) - yi * yi * 2 * s2 * (v - 2 * s2) / (v * v * v);
    ASSERT_TRUE(r.theta_se.has_value());
    EXPECT_LE(relative_distance((*r.theta_se)[0], 1 / std::sqrt(info)), 1e-6);
}

TEST(Fit, IidMeanStandardError)
{
    const auto y = normal_sample(25, 1.5, std::sqrt(2.0), 52);
    LaplaceEngine e(iid_mean(y));
    const auto r = fit(e, e.model().theta0);
    ASSERT_TRUE(r.converged);
    double mean = 0;
    for (double v : y) mean += v / y.size();
    EXPECT_NEAR(r.theta_hat[0], mean, 1e-6);
    ASSERT_TRUE(r.theta_se);
    EXPECT_LE(relative_distance((*r.theta_se)[0], std::sqrt(2.0 / y.size())), 1e-10);
    // u_i | y ~ N((mu + y_i) / 2, 1 / 2) plus the spread from mu: (1/2)^2 * 2 / N
    for (double sd : r.u_sd) EXPECT_LE(relative_distance(sd, std::sqrt(0.5 + 0.5 / y.size())), 1e-9);
}

TEST(Fit, MultivariateRandomWalkMatchesKalmanOracle)
{
    const auto d = simulate_mvrw(53, 60, 3);
    const oracle::Mat Y = mvrw_matrix(d, 3);
    LaplaceEngine e(make_model("mvrw", d));
    const auto r = fit(e, e.model().theta0);
    ASSERT_TRUE(r.converged) << r.message;

    const auto ref = kalman_mle(Y, e.model().theta0);
    EXPECT_LE(relative_distance(r.theta_hat, ref), 1e-4);

    const oracle::Mat Hout = oracle::fd_hessian([&](const std::vector<double>& t) { return oracle::kalman_nll(Y, t); },
                                                ref, 1e-4);
    const oracle::Mat V = Hout.inverse();
    ASSERT_TRUE(r.theta_se);
    std::vector<double> se(V.rows());
    for (Eigen::Index i = 0; i < V.rows(); ++i) se[i] = std::sqrt(V(i, i));
    EXPECT_LE(relative_distance(*r.theta_se, se), 1e-3);

    // random-effect sd: posterior variance plus the delta-method term of the mode
    const auto [H, b] = oracle::mvrw_posterior(Y, ref);
    const oracle::Mat Hinv = H.inverse();
    auto mode = [&](const std::vector<double>& t) {
        const auto [Ht, bt] = oracle::mvrw_posterior(Y, t);
        return oracle::to_std(Ht.ldlt().solve(bt));
    };
    const oracle::Mat J = oracle::fd_jacobian(mode, ref, 1e-6);
    const oracle::Mat W = J * V * J.transpose();
    std::vector<double> usd(H.rows());
    for (Eigen::Index i = 0; i < H.rows(); ++i) usd[i] = std::sqrt(Hinv(i, i) + W(i, i));
    EXPECT_LE(relative_distance(r.u_sd, usd), 1e-3);
}

TEST(Fit, ThetalogConvergesAndIsStationary)
{
    LaplaceEngine e(make_model("thetalog", simulate_thetalog(54, 120)));
    const auto r = fit(e, e.model().theta0);
    ASSERT_TRUE(r.converged) << r.message;
    EXPECT_LE(r.grad_norm, 1e-6 * std::max(1.0, std::abs(r.objective)));
    const auto fd = oracle::fd_gradient([&](const std::vector<double>& t) { return e.neg_log_laplace(t); }, r.theta_hat);
    EXPECT_LE(max_abs(fd), 1e-4 * std::max(1.0, std::abs(r.objective)));
    EXPECT_EQ(r.u_hat.size(), 120u);
    EXPECT_EQ(r.u_sd.size(), 120u);
    for (double v : r.u_sd) EXPECT_GT(v, 0.0);
}

TEST(Fit, Reproducible)
{
    const auto m = make_model("thetalog", simulate_thetalog(55, 80));
    LaplaceEngine a(m), b(m);
    const auto ra = fit(a, m.theta0), rb = fit(b, m.theta0);
    EXPECT_EQ(ra.theta_hat, rb.theta_hat);
    EXPECT_EQ(ra.objective, rb.objective);
    EXPECT_EQ(ra.iterations, rb.iterations);
    EXPECT_EQ(ra.u_sd, rb.u_sd);
}

TEST(Fit, NonIdentifiableParametersLeaveStandardErrorsAbsent)
{
    Model m = gaussian_scalar(normal_sample(30, 0.0, 1.8, 56));
    m.m = 2;
    m.theta0 = {0.0, 0.0};
    m.parameter_names = {"a", "b"};
    const auto y = normal_sample(30, 0.0, 1.8, 56);
    m.nll = [y](std::span<const AdScalar> u, std::span<const AdScalar> th, TermAccumulator& f) {
        const AdScalar sd = exp(th[0] + th[1]);
        for (std::size_t i = 0; i < y.size(); ++i) {
            f -= dnorm_log(u[i], 0.0, sd);
            f -= dnorm_log(AdScalar(y[i]), u[i], 1.0);
        }
    };
    LaplaceEngine e(m);
    const auto r = fit(e, m.theta0);
    EXPECT_TRUE(r.converged);
    EXPECT_FALSE(r.theta_se.has_value());
    EXPECT_FALSE(r.diagnostic.empty());
    EXPECT_EQ(r.u_sd.size(), m.n);
}

TEST(Fit, JsonReport)
{
    LaplaceEngine e(iid_mean(normal_sample(10, 0.5, 1.0, 57)));
    const auto r = fit(e, e.model().theta0);
    const auto j = to_json(r);
    for (const char* key : {"model", "parameter_names", "theta_hat", "theta_se", "u_hat", "u_sd", "objective",
                            "iterations", "converged", "grad_norm", "message"})
        EXPECT_TRUE(j.contains(key)) << key;
    EXPECT_EQ(j["model"], "iidmean");
    EXPECT_EQ(j["theta_hat"].size(), 1u);
    EXPECT_EQ(j["u_sd"].size(), 10u);
    EXPECT_EQ(j["theta_hat"][0].get<double>(), r.theta_hat[0]);

    FitReport no_se = r;
    no_se.theta_se.reset();
    EXPECT_TRUE(to_json(no_se)["theta_se"].is_null());
}
