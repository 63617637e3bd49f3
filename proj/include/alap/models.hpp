#pragma once

// Model definitions: a model supplies its joint negative log-likelihood
// f(u, theta) as a sequence of terms added to a TermAccumulator.

#include <cmath>
#include <functional>
#include <numbers>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "alap/ad.hpp"
#include "alap/dataset.hpp"
#include "alap/hessian.hpp"
#include "alap/paracc.hpp"

namespace alap {

class ModelError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Densities

/// log N(x; mean, sd^2).
template <class X, class M, class S>
auto dnorm_log(const X& x, const M& mean, const S& sd)
{
    using std::log;
    const auto z = (x - mean) / sd;
    return -0.5 * std::log(2 * std::numbers::pi) - log(sd) - 0.5 * (z * z);
}

/// log Poisson(k; lambda) for a count k given as data.
template <class L>
auto dpois_log(double k, const L& lambda)
{
    using std::log;
    return k * log(lambda) - lambda - std::lgamma(k + 1);
}

// ---------------------------------------------------------------------------
// Model interface

/// Adds the terms of f(u, theta) to acc.
using NllBuilder =
    std::function<void(std::span<const AdScalar> u, std::span<const AdScalar> theta, TermAccumulator& acc)>;

struct Model {
    std::string name;
    std::size_t n = 0;
    std::size_t m = 0;
    std::vector<double> u0;
    std::vector<double> theta0;
    std::vector<std::string> parameter_names;
    std::string structure;
    SparsityPattern expected_pattern;
    NllBuilder nll;

    /// Concatenated (u, theta).
    std::vector<double> point(std::span<const double> u, std::span<const double> theta) const
    {
        if (u.size() != n || theta.size() != m) throw ModelError(name + ": dimension mismatch");
        std::vector<double> x(u.begin(), u.end());
        x.insert(x.end(), theta.begin(), theta.end());
        return x;
    }

    /// f(u, theta) evaluated directly, without a tape.
    double evaluate(std::span<const double> u, std::span<const double> theta) const
    {
        const auto x = point(u, theta);
        std::vector<AdScalar> ax(x.begin(), x.end());
        TermAccumulator acc;
        nll(std::span<const AdScalar>(ax).first(n), std::span<const AdScalar>(ax).subspan(n), acc);
        return acc.result().value();
    }

    std::size_t term_count() const
    {
        std::vector<AdScalar> ax(n + m);
        TermAccumulator acc;
        nll(std::span<const AdScalar>(ax).first(n), std::span<const AdScalar>(ax).subspan(n), acc);
        return acc.terms();
    }
};

/// Records the terms of worker `worker` out of `workers` as a tape over
/// (u, theta). Returns the number of kept terms through `kept`.
inline Tape record_model(const Model& model, std::span<const double> x0 = {}, std::size_t worker = 0,
                         std::size_t workers = 1, std::size_t* kept = nullptr)
{
    std::size_t k = 0;
    auto builder = [&](std::span<const AdScalar> x) {
        TermAccumulator acc(worker, workers);
        model.nll(x.first(model.n), x.subspan(model.n), acc);
        k = acc.kept();
        return acc.result();
    };
    Tape t = record(builder, model.n + model.m, x0);
    if (kept) *kept = k;
    return t;
}

// ---------------------------------------------------------------------------
// rw8: f(u) = u_1^2 + sum_{i>=2} (u_i - u_{i-1})^2, no parameters.

inline Model rw8()
{
    Model m;
    m.name = "rw8";
    m.n = 8;
    m.m = 0;
    m.u0.assign(8, 0.0);
    m.structure = "tridiagonal";
    m.expected_pattern = SparsityPattern::banded(8, 1);
    m.nll = [](std::span<const AdScalar> u, std::span<const AdScalar>, TermAccumulator& f) {
        f += u[0] * u[0];
        for (std::size_t i = 1; i < u.size(); ++i) {
            const AdScalar d = u[i] - u[i - 1];
            f += d * d;
        }
    };
    return m;
}

// ---------------------------------------------------------------------------
// thetalog: theta logistic population model.
//   u_t = u_{t-1} + r0 (1 - (exp(u_{t-1}) / K)^psi) + e_t,  e_t ~ N(0, Q)
//   y_t = u_t + v_t,                                        v_t ~ N(0, R)

inline Model thetalog(std::vector<double> y)
{
    if (y.size() < 2) throw ModelError("thetalog: need at least two observations");
    Model m;
    m.name = "thetalog";
    m.n = y.size();
    m.m = 5;
    m.u0.assign(y.size(), 0.0);
    m.theta0 = {0.0, 0.0, 6.0, 0.0, 0.0};
    m.parameter_names = {"logr0", "logpsi", "logK", "logQ", "logR"};
    m.structure = "banded(3)";
    m.expected_pattern = SparsityPattern::banded(y.size(), 1);
    m.nll = [y = std::move(y)](std::span<const AdScalar> u, std::span<const AdScalar> th, TermAccumulator& f) {
        const AdScalar r0 = exp(th[0]);
        const AdScalar psi = exp(th[1]);
        const AdScalar logK = th[2];
        const AdScalar sdQ = sqrt(exp(th[3]));
        const AdScalar sdR = sqrt(exp(th[4]));
        for (std::size_t t = 1; t < y.size(); ++t) {
            // (exp(u)/K)^psi == exp(psi (u - log K))
            const AdScalar mean = u[t - 1] + r0 * (1.0 - exp(psi * (u[t - 1] - logK)));
            f -= dnorm_log(u[t], mean, sdQ);
        }
        for (std::size_t t = 0; t < y.size(); ++t) f -= dnorm_log(AdScalar(y[t]), u[t], sdR);
    };
    return m;
}

// ---------------------------------------------------------------------------
// mvrw: p-variate random walk with correlated increments and measurement
// noise. u is stored time-major, u[t * p + i].
//   u_t - u_{t-1} ~ N(0, S C S),  y_t ~ N(u_t, sigma^2 I)
// theta = (log sd_1..p, correlation parameters, log sigma). The correlation
// C = K K^T with K = diag(1 / rownorm(L)) L and L unit lower triangular whose
// strict lower part (row-major) holds the correlation parameters.

inline std::size_t mvrw_parameter_count(std::size_t p) { return p + p * (p - 1) / 2 + 1; }

inline std::vector<std::string> mvrw_parameter_names(std::size_t p)
{
    std::vector<std::string> names;
    for (std::size_t i = 0; i < p; ++i) names.push_back("logsd" + std::to_string(i + 1));
    for (std::size_t i = 1; i < p; ++i)
        for (std::size_t j = 0; j < i; ++j) names.push_back("corr" + std::to_string(i + 1) + std::to_string(j + 1));
    names.push_back("logsdobs");
    return names;
}

/// Y is T x p, row-major.
inline Model mvrw(std::vector<double> Y, std::size_t p)
{
    if (p == 0 || Y.empty() || Y.size() % p != 0) throw ModelError("mvrw: observation matrix is not T x p");
    const std::size_t T = Y.size() / p;
    if (T < 2) throw ModelError("mvrw: need at least two time steps");
    Model m;
    m.name = "mvrw";
    m.n = T * p;
    m.m = mvrw_parameter_count(p);
    m.u0.assign(m.n, 0.0);
    m.theta0.assign(m.m, 0.0);
    m.parameter_names = mvrw_parameter_names(p);
    m.structure = "block(" + std::to_string(p) + ") tridiagonal";
    m.expected_pattern = SparsityPattern::block_tridiagonal(m.n, p);
    m.nll = [Y = std::move(Y), p, T](std::span<const AdScalar> u, std::span<const AdScalar> th,
                                      TermAccumulator& f) {
        std::vector<AdScalar> L(p * p, AdScalar(0.0));
        std::size_t k = p;
        for (std::size_t i = 0; i < p; ++i) {
            L[i * p + i] = 1.0;
            for (std::size_t j = 0; j < i; ++j) L[i * p + j] = th[k++];
        }
        std::vector<AdScalar> s(p);
        for (std::size_t i = 0; i < p; ++i) {
            std::vector<AdScalar> sq{1.0};
            for (std::size_t j = 0; j < i; ++j) sq.push_back(L[i * p + j] * L[i * p + j]);
            s[i] = sqrt(sum(sq));
        }
        // M = L^{-1}, unit lower triangular
        std::vector<AdScalar> M(p * p, AdScalar(0.0));
        for (std::size_t j = 0; j < p; ++j) {
            M[j * p + j] = 1.0;
            for (std::size_t i = j + 1; i < p; ++i) {
                std::vector<AdScalar> acc;
                for (std::size_t l = j; l < i; ++l) acc.push_back(L[i * p + l] * M[l * p + j]);
                M[i * p + j] = -sum(acc);
            }
        }
        // A = K^{-1} S^{-1} = M diag(s / sd)
        std::vector<AdScalar> scale(p);
        for (std::size_t j = 0; j < p; ++j) scale[j] = s[j] * exp(-th[j]);
        std::vector<AdScalar> A(p * p, AdScalar(0.0));
        for (std::size_t i = 0; i < p; ++i)
            for (std::size_t j = 0; j <= i; ++j) A[i * p + j] = M[i * p + j] * scale[j];

        std::vector<AdScalar> half_logdet{0.5 * static_cast<double>(p) * std::log(2 * std::numbers::pi)};
        for (std::size_t i = 0; i < p; ++i) {
            half_logdet.push_back(th[i]);
            half_logdet.push_back(-log(s[i]));
        }
        const AdScalar c = sum(half_logdet);

        std::vector<AdScalar> delta(p);
        for (std::size_t t = 1; t < T; ++t) {
            for (std::size_t j = 0; j < p; ++j) delta[j] = u[t * p + j] - u[(t - 1) * p + j];
            std::vector<AdScalar> quad{c};
            for (std::size_t i = 0; i < p; ++i) {
                std::vector<AdScalar> z;
                for (std::size_t j = 0; j <= i; ++j) z.push_back(A[i * p + j] * delta[j]);
                const AdScalar zi = sum(z);
                quad.push_back(0.5 * (zi * zi));
            }
            f += sum(quad);
        }
        const AdScalar sd_obs = exp(th[p + p * (p - 1) / 2]);
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t i = 0; i < p; ++i) f -= dnorm_log(AdScalar(Y[t * p + i]), u[t * p + i], sd_obs);
    };
    return m;
}

// ---------------------------------------------------------------------------
// spatial: Poisson GLMM with an exponentially correlated Gaussian field.
//   u ~ N(0, sigma^2 R), R_ij = exp(-d_ij / rho)
//   count_i ~ Poisson(exp(b0 + b1 covariate_i + u_i))
// theta = (b0, b1, log rho, log sigma).

inline Model spatial(std::vector<double> xs, std::vector<double> ys, std::vector<double> covariate,
                     std::vector<double> counts)
{
    const std::size_t n = counts.size();
    if (n == 0 || xs.size() != n || ys.size() != n || covariate.size() != n)
        throw ModelError("spatial: inconsistent data lengths");
    std::vector<double> dist(n * n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) dist[i * n + j] = std::hypot(xs[i] - xs[j], ys[i] - ys[j]);

    Model m;
    m.name = "spatial";
    m.n = n;
    m.m = 4;
    m.u0.assign(n, 0.0);
    m.theta0 = {0.0, 0.0, 0.0, 0.0};
    m.parameter_names = {"b0", "b1", "logrange", "logsigma"};
    m.structure = "dense";
    m.expected_pattern = SparsityPattern::dense(n);
    m.nll = [n, dist = std::move(dist), covariate = std::move(covariate), counts = std::move(counts)](
                std::span<const AdScalar> u, std::span<const AdScalar> th, TermAccumulator& f) {
        const AdScalar inv_range = exp(-th[2]);
        // Cholesky of the correlation matrix, lower triangle row-major
        std::vector<AdScalar> C(n * n, AdScalar(0.0));
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j <= i; ++j) {
                std::vector<AdScalar> acc{i == j ? AdScalar(1.0) : exp(-dist[i * n + j] * inv_range)};
                for (std::size_t k = 0; k < j; ++k) acc.push_back(-(C[i * n + k] * C[j * n + k]));
                const AdScalar r = sum(acc);
                C[i * n + j] = i == j ? sqrt(r) : r / C[j * n + j];
            }
        }
        // G = C^{-1}, lower triangular
        std::vector<AdScalar> G(n * n, AdScalar(0.0));
        for (std::size_t j = 0; j < n; ++j) {
            G[j * n + j] = 1.0 / C[j * n + j];
            for (std::size_t i = j + 1; i < n; ++i) {
                std::vector<AdScalar> acc;
                for (std::size_t k = j; k < i; ++k) acc.push_back(C[i * n + k] * G[k * n + j]);
                G[i * n + j] = -sum(acc) / C[i * n + i];
            }
        }
        // R^{-1} = G^T G, symmetric
        std::vector<AdScalar> Rinv(n * n);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j <= i; ++j) {
                std::vector<AdScalar> acc;
                for (std::size_t k = i; k < n; ++k) acc.push_back(G[k * n + i] * G[k * n + j]);
                Rinv[i * n + j] = Rinv[j * n + i] = sum(acc);
            }
        }
        std::vector<AdScalar> w(n);
        for (std::size_t i = 0; i < n; ++i) {
            std::vector<AdScalar> acc;
            for (std::size_t j = 0; j < n; ++j) acc.push_back(Rinv[i * n + j] * u[j]);
            w[i] = sum(acc);
        }
        std::vector<AdScalar> quad;
        for (std::size_t i = 0; i < n; ++i) quad.push_back(u[i] * w[i]);
        std::vector<AdScalar> prior{0.5 * static_cast<double>(n) * std::log(2 * std::numbers::pi),
                                    static_cast<double>(n) * th[3], 0.5 * exp(-2.0 * th[3]) * sum(quad)};
        for (std::size_t i = 0; i < n; ++i) prior.push_back(log(C[i * n + i]));
        f += sum(prior);

        for (std::size_t i = 0; i < n; ++i) {
            const AdScalar eta = th[0] + th[1] * covariate[i] + u[i];
            f -= dpois_log(counts[i], exp(eta));
        }
    };
    return m;
}

// ---------------------------------------------------------------------------
// Simulation of fixtures

namespace detail {

inline std::string seed_comment(std::uint64_t seed) { return " seed: " + std::to_string(seed); }

inline std::string values_comment(const std::vector<std::string>& names, const std::vector<double>& values)
{
    std::string s = " true:";
    for (std::size_t i = 0; i < names.size(); ++i) s += " " + names[i] + "=" + std::to_string(values[i]);
    return s;
}

}  // namespace detail

inline Dataset simulate_thetalog(std::uint64_t seed, std::size_t n = 200)
{
    const std::vector<double> theta{-1.0, 0.0, 6.0, std::log(0.01), std::log(0.04)};
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> z(0.0, 1.0);
    const double r0 = std::exp(theta[0]), psi = std::exp(theta[1]), K = std::exp(theta[2]);
    const double sdQ = std::sqrt(std::exp(theta[3])), sdR = std::sqrt(std::exp(theta[4]));
    std::vector<double> u(n), y(n);
    u[0] = 3.0;
    for (std::size_t t = 1; t < n; ++t)
        u[t] = u[t - 1] + r0 * (1 - std::pow(std::exp(u[t - 1]) / K, psi)) + sdQ * z(rng);
    for (std::size_t t = 0; t < n; ++t) y[t] = u[t] + sdR * z(rng);
    Dataset d;
    d.comments = {" thetalog", detail::seed_comment(seed),
                  detail::values_comment({"logr0", "logpsi", "logK", "logQ", "logR"}, theta)};
    d.add("y", std::move(y));
    return d;
}

inline Dataset simulate_mvrw(std::uint64_t seed, std::size_t T = 100, std::size_t p = 3)
{
    std::vector<double> sd{0.5, 0.3, 0.4}, corr{0.5, -0.3, 0.4};
    sd.resize(p, 0.4);
    corr.resize(p * (p - 1) / 2, 0.2);
    const double sd_obs = 0.3;

    // innovation covariance factor: S K with K = diag(1 / rownorm(L)) L
    std::vector<double> F(p * p, 0.0);
    std::size_t k = 0;
    for (std::size_t i = 0; i < p; ++i) {
        double norm2 = 1;
        for (std::size_t j = 0; j < i; ++j) {
            F[i * p + j] = corr[k++];
            norm2 += F[i * p + j] * F[i * p + j];
        }
        F[i * p + i] = 1;
        for (std::size_t j = 0; j <= i; ++j) F[i * p + j] *= sd[i] / std::sqrt(norm2);
    }
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> z(0.0, 1.0);
    std::vector<double> u(p, 0.0), e(p);
    std::vector<std::vector<double>> cols(p, std::vector<double>(T));
    for (std::size_t t = 0; t < T; ++t) {
        if (t > 0) {
            for (auto& v : e) v = z(rng);
            for (std::size_t i = 0; i < p; ++i)
                for (std::size_t j = 0; j <= i; ++j) u[i] += F[i * p + j] * e[j];
        }
        for (std::size_t i = 0; i < p; ++i) cols[i][t] = u[i] + sd_obs * z(rng);
    }
    std::vector<double> theta;
    for (double s : sd) theta.push_back(std::log(s));
    theta.insert(theta.end(), corr.begin(), corr.end());
    theta.push_back(std::log(sd_obs));
    Dataset d;
    d.comments = {" mvrw", detail::seed_comment(seed), detail::values_comment(mvrw_parameter_names(p), theta)};
    for (std::size_t i = 0; i < p; ++i) d.add("y" + std::to_string(i + 1), std::move(cols[i]));
    return d;
}

inline Dataset simulate_spatial(std::uint64_t seed, std::size_t side = 10)
{
    const std::vector<double> theta{1.0, 0.5, std::log(2.0), std::log(0.7)};
    const std::size_t n = side * side;
    std::vector<double> xs(n), ys(n), cov(n), counts(n);
    for (std::size_t i = 0; i < n; ++i) {
        xs[i] = static_cast<double>(i % side);
        ys[i] = static_cast<double>(i / side);
        cov[i] = (xs[i] - 0.5 * static_cast<double>(side - 1)) / static_cast<double>(side);
    }
    const double rho = std::exp(theta[2]), sigma = std::exp(theta[3]);
    // dense Cholesky of sigma^2 R
    std::vector<double> C(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j <= i; ++j) {
            double s = sigma * sigma * std::exp(-std::hypot(xs[i] - xs[j], ys[i] - ys[j]) / rho);
            for (std::size_t k = 0; k < j; ++k) s -= C[i * n + k] * C[j * n + k];
            C[i * n + j] = i == j ? std::sqrt(s) : s / C[j * n + j];
        }
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> z(0.0, 1.0);
    std::vector<double> e(n), u(n, 0.0);
    for (auto& v : e) v = z(rng);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j <= i; ++j) u[i] += C[i * n + j] * e[j];
    for (std::size_t i = 0; i < n; ++i) {
        std::poisson_distribution<int> pois(std::exp(theta[0] + theta[1] * cov[i] + u[i]));
        counts[i] = pois(rng);
    }
    Dataset d;
    d.comments = {" spatial", detail::seed_comment(seed),
                  detail::values_comment({"b0", "b1", "logrange", "logsigma"}, theta)};
    d.add("x", std::move(xs));
    d.add("y", std::move(ys));
    d.add("covariate", std::move(cov));
    d.add("count", std::move(counts));
    return d;
}

// ---------------------------------------------------------------------------
// Registry

inline const std::vector<std::string>& model_names()
{
    static const std::vector<std::string> names{"rw8", "thetalog", "mvrw", "spatial"};
    return names;
}

inline bool model_needs_data(const std::string& name) { return name != "rw8"; }

inline Model make_model(const std::string& name, const Dataset& data = {})
{
    if (name == "rw8") return rw8();
    if (name == "thetalog") return thetalog(data.column("y"));
    if (name == "mvrw") {
        std::size_t p = 0;
        while (data.has("y" + std::to_string(p + 1))) ++p;
        if (p == 0) throw DataError("mvrw: dataset has no columns y1, y2, ...");
        const std::size_t T = data.rows();
        std::vector<double> Y(T * p);
        for (std::size_t i = 0; i < p; ++i) {
            const auto& c = data.column("y" + std::to_string(i + 1));
            for (std::size_t t = 0; t < T; ++t) Y[t * p + i] = c[t];
        }
        return mvrw(std::move(Y), p);
    }
    if (name == "spatial")
        return spatial(data.column("x"), data.column("y"), data.column("covariate"), data.column("count"));
    throw ModelError("unknown model '" + name + "'");
}

inline Dataset simulate(const std::string& name, std::uint64_t seed)
{
    if (name == "thetalog") return simulate_thetalog(seed);
    if (name == "mvrw") return simulate_mvrw(seed);
    if (name == "spatial") return simulate_spatial(seed);
    throw ModelError("no simulator for model '" + name + "'");
}

}  // namespace alap
