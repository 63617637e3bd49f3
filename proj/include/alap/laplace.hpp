#pragma once

// Laplace approximation of the marginal likelihood and its exact gradient.
//
//   -log L*(theta) = -n/2 log(2 pi) + 1/2 log det H + f(u_hat, theta)
//
// Tapes per worker: T1 = f, T2 = gradient of f, T3 = nonzeros of H = f''_uu.
// Value steps:    L1 inner Newton, L2 f at u_hat, L3 H at u_hat, L4 Cholesky.
// Gradient steps: G1 reverse T1, G2 weighted reverse T3, G3 inverse subset,
//                 G4 solve, G5 forward T2, G6 reverse T2 with (v, 0).

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "alap/ad.hpp"
#include "alap/hessian.hpp"
#include "alap/metric.hpp"
#include "alap/models.hpp"
#include "alap/paracc.hpp"
#include "alap/sparse_chol.hpp"

namespace alap {

class InnerFailure : public std::runtime_error {
public:
    InnerFailure(const std::string& what, std::vector<double> best_u, double grad_norm)
      : std::runtime_error(what), best_u(std::move(best_u)), grad_norm(grad_norm)
    { }
    std::vector<double> best_u;
    double grad_norm;
};

class LaplaceInvalid : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct LaplaceOptions {
    double inner_tol = 1e-8;
    int inner_max_iter = 100;
    int inner_min_iter = 1;  // Newton steps taken even if the start already meets the tolerance
    int inner_polish = 2;    // extra steps once within tolerance, until |g| <= 1e-4 tol
    OrderingMethod ordering = OrderingMethod::amd;
    std::size_t workers = 1;
    bool threads = true;
};

struct InnerResult {
    std::vector<double> u_hat;
    int iterations = 0;
    double grad_norm = 0;
    double f = 0;
    bool shifted = false;  // a Levenberg shift was needed on some iteration
};

enum class Step : std::size_t { L1, L2, L3, L4, G1, G2, G3, G4, G5, G6 };
inline constexpr std::size_t kStepCount = 10;

inline const char* step_name(Step s)
{
    static const char* names[kStepCount] = {"L1", "L2", "L3", "L4", "G1", "G2", "G3", "G4", "G5", "G6"};
    return names[static_cast<std::size_t>(s)];
}

/// Wall time and flop counters. Step counters follow the value/gradient
/// steps; category counters partition time into the disjoint parts
/// sparse Cholesky, inverse subset, tape construction and tape sweeps.
struct Profile {
    std::array<double, kStepCount> step_seconds{};
    std::array<std::uint64_t, kStepCount> step_flops{};
    std::array<std::size_t, kStepCount> step_calls{};
    double chol_seconds = 0;
    double inv_seconds = 0;
    double init_seconds = 0;
    double sweep_seconds = 0;
    std::size_t inner_iterations = 0;

    double& step(Step s) { return step_seconds[static_cast<std::size_t>(s)]; }
};

namespace detail {

class Stopwatch {
public:
    explicit Stopwatch(double& sink) : sink_(sink), start_(std::chrono::steady_clock::now()) { }
    ~Stopwatch() { sink_ += std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count(); }
    Stopwatch(const Stopwatch&) = delete;
    Stopwatch& operator=(const Stopwatch&) = delete;

private:
    double& sink_;
    std::chrono::steady_clock::time_point start_;
};

inline void add_into(std::vector<double>& acc, std::span<const double> x)
{
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += x[i];
}

}  // namespace detail

class LaplaceEngine {
public:
    /// One tape set per worker; terms are split round-robin over
    /// options.workers. A single worker is the monolithic path.
    explicit LaplaceEngine(Model model, LaplaceOptions options = {})
      : model_(std::move(model)), options_(options)
    {
        if (options_.workers == 0) throw std::invalid_argument("LaplaceEngine: workers must be at least 1");
        if (!(options_.inner_tol > 0)) throw std::invalid_argument("LaplaceEngine: inner tolerance must be positive");
        if (model_.n == 0) throw std::invalid_argument("LaplaceEngine: model has no random effects");
        if (model_.u0.size() != model_.n || model_.theta0.size() != model_.m)
            throw std::invalid_argument("LaplaceEngine: model start values have wrong dimension");
        detail::Stopwatch sw(profile_.init_seconds);
        build();
    }

    const Model& model() const { return model_; }
    const LaplaceOptions& options() const { return options_; }
    std::size_t n() const { return model_.n; }
    std::size_t m() const { return model_.m; }
    std::size_t workers() const { return parts_.size(); }

    const Tape& t1(std::size_t w = 0) const { return parts_.at(w).t1; }
    const Tape& t2(std::size_t w = 0) const { return parts_.at(w).t2; }
    const Tape& t3(std::size_t w = 0) const { return parts_.at(w).t3; }
    const SparsityPattern& worker_pattern(std::size_t w) const { return parts_.at(w).pattern; }
    const SubgraphIndex& subgraphs(std::size_t w = 0) const { return parts_.at(w).sub; }
    const SparsityPattern& pattern() const { return pattern_; }
    std::span<const std::int32_t> permutation() const { return symbolic_->perm; }
    const CholSymbolic& symbolic() const { return *symbolic_; }

    Profile& profile() { return profile_; }
    const Profile& profile() const { return profile_; }
    void reset_profile() { profile_ = Profile{}; }

    // -- combined sweeps over all workers -------------------------------------

    double f_value(std::span<const double> x)
    {
        detail::Stopwatch sw(profile_.sweep_seconds);
        run([&](Part& p) { p.out = forward_zero(p.t1, x, p.ws1); });
        return combine(1)[0];
    }

    std::vector<double> f_gradient(std::span<const double> x)
    {
        detail::Stopwatch sw(profile_.sweep_seconds);
        run([&](Part& p) { p.out = forward_zero(p.t2, x, p.ws2); });
        return combine(dim());
    }

    /// Nonzeros of H = f''_uu at x on the combined pattern.
    std::vector<double> hessian(std::span<const double> x)
    {
        detail::Stopwatch sw(profile_.sweep_seconds);
        run([&](Part& p) { p.out = forward_zero(p.t3, x, p.ws3); });
        std::vector<double> h(pattern_.nnz(), 0.0);
        for (const auto& p : parts_)
            for (std::size_t l = 0; l < p.out.size(); ++l) h[p.to_union[l]] += p.out[l];
        return h;
    }

    // -- inner problem --------------------------------------------------------

    /// Newton iterations on f(., theta) from u0 with backtracking line search.
    InnerResult inner_optimize(std::span<const double> theta, std::span<const double> u0)
    {
        detail::check_size(theta.size(), m(), "inner_optimize");
        detail::check_size(u0.size(), n(), "inner_optimize");
        detail::Stopwatch sw(profile_.step(Step::L1));
        ++profile_.step_calls[0];

        InnerResult res;
        std::vector<double> x = model_.point(u0, theta);
        double f = f_value(x);
        if (!std::isfinite(f)) throw InnerFailure("inner problem: non-finite objective at the start point",
                                                  std::vector<double>(u0.begin(), u0.end()), INFINITY);
        std::vector<double> best(u0.begin(), u0.end());
        double best_gn = INFINITY;
        std::vector<double> g(n()), trial(x.size());
        int polish = options_.inner_polish;
        auto finish = [&](const std::vector<double>& xs, int it, double gn, double fs) {
            res.u_hat.assign(xs.begin(), xs.begin() + static_cast<std::ptrdiff_t>(n()));
            res.iterations = it;
            res.grad_norm = gn;
            res.f = fs;
            profile_.inner_iterations += static_cast<std::size_t>(it);
            return res;
        };
        for (int it = 0;; ++it) {
            const auto full = f_gradient(x);
            std::copy_n(full.begin(), n(), g.begin());
            const double gn = max_abs(g);
            if (gn < best_gn) {
                best_gn = gn;
                std::copy_n(x.begin(), n(), best.begin());
            }
            const double tol = options_.inner_tol * std::max(1.0, std::abs(f));
            const bool within = gn <= tol && it >= options_.inner_min_iter;
            if (within && (gn <= 1e-4 * tol || polish == 0 || gn == 0)) return finish(x, it, gn, f);
            if (within) --polish;
            if (it >= options_.inner_max_iter || !std::isfinite(gn))
                throw InnerFailure("inner problem: no convergence in " + std::to_string(it) + " iterations", best,
                                   best_gn);

            auto h = hessian(x);
            const CholFactor fac = factor_shifted(h, res.shifted);
            std::vector<double> d = solve_timed(fac, g, nullptr);
            double slope = 0;
            for (std::size_t i = 0; i < n(); ++i) {
                d[i] = -d[i];
                slope += g[i] * d[i];
            }
            double step = 1;
            bool accepted = false;
            for (int k = 0; k < 60; ++k, step *= 0.5) {
                trial = x;
                for (std::size_t i = 0; i < n(); ++i) trial[i] += step * d[i];
                const double ft = f_value(trial);
                const double slack = 4 * std::numeric_limits<double>::epsilon() * std::abs(f);
                if (std::isfinite(ft) && ft <= f + 1e-4 * step * slope + slack) {
                    x.swap(trial);
                    f = ft;
                    accepted = true;
                    break;
                }
            }
            if (!accepted) {
                if (gn <= tol && it >= options_.inner_min_iter) return finish(x, it, gn, f);
                throw InnerFailure("inner problem: line search failed", best, best_gn);
            }
        }
    }

    // -- value and gradient ---------------------------------------------------

    /// Evaluates -log L*(theta), warm-starting the inner problem.
    double neg_log_laplace(std::span<const double> theta)
    {
        detail::check_size(theta.size(), m(), "neg_log_laplace");
        if (state_ && std::equal(theta.begin(), theta.end(), state_->theta.begin())) return state_->value;
        for (double t : theta)
            if (!std::isfinite(t)) throw std::invalid_argument("neg_log_laplace: non-finite parameter");

        std::vector<double> start = warm_ ? *warm_ : model_.u0;
        state_.reset();
        InnerResult inner = inner_optimize(theta, start);

        auto st = std::make_unique<State>();
        st->theta.assign(theta.begin(), theta.end());
        st->x = model_.point(inner.u_hat, theta);
        {
            detail::Stopwatch sw(profile_.step(Step::L2));
            ++profile_.step_calls[1];
            st->f = f_value(st->x);
        }
        {
            detail::Stopwatch sw(profile_.step(Step::L3));
            ++profile_.step_calls[2];
            st->h = hessian(st->x);
        }
        {
            detail::Stopwatch sw(profile_.step(Step::L4));
            ++profile_.step_calls[3];
            try {
                st->factor = factor_timed(st->h);
            } catch (const NotPositiveDefinite&) {
                throw LaplaceInvalid("Laplace invalid at theta: Hessian at the inner optimum is not positive definite");
            }
            profile_.step_flops[3] += st->factor.flops();
        }
        st->inner = std::move(inner);
        st->value = -0.5 * static_cast<double>(n()) * std::log(2 * std::numbers::pi) + 0.5 * st->factor.log_det() +
                    st->f;
        warm_ = st->inner.u_hat;
        state_ = std::move(st);
        return state_->value;
    }

    /// Exact gradient of -log L*(theta).
    std::vector<double> laplace_gradient(std::span<const double> theta)
    {
        neg_log_laplace(theta);
        State& st = *state_;
        if (st.gradient) return *st.gradient;
        const std::span<const double> x = st.x;

        std::vector<double> hprime;
        {  // G1: f'(xi) by a reverse sweep of T1
            detail::Stopwatch sw(profile_.step(Step::G1));
            ++profile_.step_calls[4];
            detail::Stopwatch sw2(profile_.sweep_seconds);
            const double one = 1;
            run([&](Part& p) { p.out = reverse_one(p.t1, x, std::span<const double>(&one, 1), p.ws1); });
            hprime = combine(dim());
        }
        std::vector<double> w(pattern_.nnz());
        {  // G3: inverse subset; weights double the off-diagonal entries
            detail::Stopwatch sw(profile_.step(Step::G3));
            ++profile_.step_calls[6];
            detail::Stopwatch sw2(profile_.inv_seconds);
            const InverseSubset z = inverse_subset(st.factor);
            profile_.step_flops[6] += z.flops();
            const auto rows = pattern_.rows();
            const auto cols = pattern_.cols();
            for (std::size_t l = 0; l < w.size(); ++l)
                w[l] = (rows[l] == cols[l] ? 1.0 : 2.0) * z.at(rows[l], cols[l]);
            st.inverse = z;
        }
        {  // G2: d/dxi sum_l w_l H_l = tr(H^{-1} dH/dxi)
            detail::Stopwatch sw(profile_.step(Step::G2));
            ++profile_.step_calls[5];
            detail::Stopwatch sw2(profile_.sweep_seconds);
            run([&](Part& p) {
                std::vector<double> wp(p.to_union.size());
                for (std::size_t l = 0; l < wp.size(); ++l) wp[l] = w[p.to_union[l]];
                p.out = hessian_weighted_reverse(p.t3, x, wp, p.ws3);
            });
            const auto g2 = combine(dim());
            for (std::size_t i = 0; i < hprime.size(); ++i) hprime[i] += 0.5 * g2[i];
        }
        std::vector<double> v;
        {  // G4: v = H^{-1} h'_u
            detail::Stopwatch sw(profile_.step(Step::G4));
            ++profile_.step_calls[7];
            std::uint64_t flops = 0;
            v = solve_timed(st.factor, std::span<const double>(hprime).first(n()), &flops);
            profile_.step_flops[7] += flops;
        }
        {  // G5: forward sweep of T2
            detail::Stopwatch sw(profile_.step(Step::G5));
            ++profile_.step_calls[8];
            detail::Stopwatch sw2(profile_.sweep_seconds);
            run([&](Part& p) { forward_zero(p.t2, x, p.ws2); });
        }
        std::vector<double> vf;
        {  // G6: reverse sweep of T2 with weights (v, 0) gives v f''_u.
            detail::Stopwatch sw(profile_.step(Step::G6));
            ++profile_.step_calls[9];
            detail::Stopwatch sw2(profile_.sweep_seconds);
            std::vector<double> wv(dim(), 0.0);
            std::copy(v.begin(), v.end(), wv.begin());
            run([&](Part& p) { p.out = reverse_sweep(p.t2, p.ws2, wv); });
            vf = combine(dim());
        }
        std::vector<double> grad(m());
        for (std::size_t j = 0; j < m(); ++j) grad[j] = hprime[n() + j] - vf[n() + j];
        st.gradient = grad;
        return grad;
    }

    // -- state at the last evaluation -----------------------------------------

    bool evaluated() const { return state_ != nullptr; }
    std::span<const double> theta() const { return require().theta; }
    std::span<const double> u_hat() const { return require().inner.u_hat; }
    const InnerResult& inner_result() const { return require().inner; }
    double f_hat() const { return require().f; }
    std::span<const double> hessian_values() const { return require().h; }
    const CholFactor& factor() const { return require().factor; }

    /// A^{-1} on the factor pattern at the last evaluation.
    const InverseSubset& inverse()
    {
        State& st = const_cast<State&>(require());
        if (!st.inverse) st.inverse = inverse_subset(st.factor);
        return *st.inverse;
    }

    /// H^{-1} b with the factor of the last evaluation.
    std::vector<double> solve_hessian(std::span<const double> b) const { return solve(require().factor, b); }

    /// Column j of f''_{u theta} at the last evaluation.
    std::vector<double> cross_hessian_column(std::size_t j)
    {
        const State& st = require();
        if (j >= m()) throw std::out_of_range("cross_hessian_column: parameter index out of range");
        std::vector<double> w(dim(), 0.0);
        w[n() + j] = 1;
        run([&](Part& p) { p.out = reverse_one(p.t2, st.x, w, p.ws2); });
        auto col = combine(dim());
        col.resize(n());
        return col;
    }

    /// Start point of the next inner problem.
    void set_warm_start(std::span<const double> u)
    {
        detail::check_size(u.size(), n(), "set_warm_start");
        warm_ = std::vector<double>(u.begin(), u.end());
        state_.reset();
    }

    /// Forgets the previous optimum; the next inner problem starts at the
    /// model's initial values.
    void reset_warm_start()
    {
        warm_.reset();
        state_.reset();
    }

private:
    struct Part {
        Tape t1, t2, t3;
        SparsityPattern pattern;
        SubgraphIndex sub;
        std::vector<std::int64_t> to_union;
        Workspace ws1, ws2, ws3;
        std::vector<double> out;
    };

    struct State {
        std::vector<double> theta;
        std::vector<double> x;
        InnerResult inner;
        double f = 0;
        std::vector<double> h;
        CholFactor factor;
        double value = 0;
        std::optional<InverseSubset> inverse;
        std::optional<std::vector<double>> gradient;
    };

    std::size_t dim() const { return model_.n + model_.m; }

    const State& require() const
    {
        if (!state_) throw std::logic_error("LaplaceEngine: no successful evaluation yet");
        return *state_;
    }

    void build()
    {
        const auto x0 = model_.point(model_.u0, model_.theta0);
        const std::size_t terms = model_.term_count();
        const std::size_t W = std::min(options_.workers, std::max<std::size_t>(terms, 1));
        parts_.resize(W);
        detail::run_workers(W, options_.threads, [&](std::size_t w) {
            Part& p = parts_[w];
            p.t1 = optimize_tape(record_model(model_, x0, w, W));
            p.t2 = gradient_tape(p.t1, x0);
            p.pattern = detect_sparsity(p.t2, model_.n);
            p.sub = build_subgraphs(p.t2, p.pattern);
            p.t3 = hessian_tape(p.t2, p.sub, p.pattern, x0);
        });
        std::vector<std::pair<std::int32_t, std::int32_t>> entries;
        for (const auto& p : parts_)
            for (std::size_t l = 0; l < p.pattern.nnz(); ++l) entries.emplace_back(p.pattern.rows()[l], p.pattern.cols()[l]);
        pattern_ = SparsityPattern::from_entries(model_.n, std::move(entries));
        for (auto& p : parts_) {
            p.to_union.resize(p.pattern.nnz());
            for (std::size_t l = 0; l < p.pattern.nnz(); ++l)
                p.to_union[l] = pattern_.find(p.pattern.rows()[l], p.pattern.cols()[l]);
        }
        const auto perm = ordering(pattern_, options_.ordering);
        symbolic_ = analyze(pattern_, perm);
    }

    template <class Job>
    void run(Job&& job)
    {
        detail::run_workers(parts_.size(), options_.threads, [&](std::size_t w) { job(parts_[w]); });
    }

    /// Sum of the workers' outputs in worker order.
    std::vector<double> combine(std::size_t size) const
    {
        std::vector<double> acc(parts_[0].out.begin(), parts_[0].out.begin() + static_cast<std::ptrdiff_t>(size));
        for (std::size_t w = 1; w < parts_.size(); ++w) detail::add_into(acc, parts_[w].out);
        return acc;
    }

    CholFactor factor_timed(std::span<const double> h)
    {
        detail::Stopwatch sw(profile_.chol_seconds);
        return alap::factor(h, symbolic_);
    }

    /// Factor of H + lambda I with lambda = 0 or doubling from 1e-4.
    CholFactor factor_shifted(std::vector<double>& h, bool& shifted)
    {
        try {
            return factor_timed(h);
        } catch (const NotPositiveDefinite&) {
        }
        shifted = true;
        const auto rows = pattern_.rows();
        const auto cols = pattern_.cols();
        for (double lambda = 1e-4; lambda < 1e300; lambda *= 2) {
            std::vector<double> hs = h;
            for (std::size_t l = 0; l < hs.size(); ++l)
                if (rows[l] == cols[l]) hs[l] += lambda;
            try {
                return factor_timed(hs);
            } catch (const NotPositiveDefinite&) {
            }
        }
        throw InnerFailure("inner problem: Hessian cannot be shifted to positive definite", {}, INFINITY);
    }

    std::vector<double> solve_timed(const CholFactor& f, std::span<const double> b, std::uint64_t* flops)
    {
        detail::Stopwatch sw(profile_.chol_seconds);
        return solve(f, b, flops);
    }

    Model model_;
    LaplaceOptions options_;
    std::vector<Part> parts_;
    SparsityPattern pattern_;
    std::shared_ptr<const CholSymbolic> symbolic_;
    std::optional<std::vector<double>> warm_;
    std::unique_ptr<State> state_;
    Profile profile_;
};

}  // namespace alap
