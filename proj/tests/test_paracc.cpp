#include <gtest/gtest.h>

#include <atomic>
#include <random>

#include "alap/laplace.hpp"
#include "alap/metric.hpp"
#include "alap/paracc.hpp"

using namespace alap;

namespace {

std::vector<double> integer_point(std::size_t dim, std::mt19937_64& rng)
{
    std::uniform_int_distribution<int> U(-8, 8);
    std::vector<double> x(dim);
    for (auto& v : x) v = U(rng);
    return x;
}

}  // namespace

TEST(TermSplit, RoundRobinLoads)
{
    const TermSplit s{10, 3};
    EXPECT_EQ(s.load(0), 4u);
    EXPECT_EQ(s.load(1), 3u);
    EXPECT_EQ(s.load(2), 3u);
    EXPECT_EQ(s.owner(7), 1u);
    const auto a = s.assignment();
    EXPECT_EQ(a, (std::vector<std::size_t>{0, 1, 2, 0, 1, 2, 0, 1, 2, 0}));
}

TEST(TermAccumulator, KeepsOwnTermsOnly)
{
    TermAccumulator acc(1, 3);
    for (int k = 0; k < 7; ++k) acc += AdScalar(static_cast<double>(k));
    EXPECT_EQ(acc.terms(), 7u);
    EXPECT_EQ(acc.kept(), 2u);
    EXPECT_EQ(acc.result().value(), 1.0 + 4.0);
    EXPECT_THROW(TermAccumulator(3, 3), std::invalid_argument);
    EXPECT_THROW(TermAccumulator(0, 0), std::invalid_argument);
}

TEST(TermAccumulator, SignedTerms)
{
    TermAccumulator acc;
    acc += AdScalar(5.0);
    acc -= AdScalar(2.0);
    acc -= AdScalar(1.0);
    EXPECT_EQ(acc.result().value(), 2.0);
    TermAccumulator neg;
    neg -= AdScalar(3.0);
    EXPECT_EQ(neg.result().value(), -3.0);
}

TEST(RunWorkers, EveryIndexOnceAndErrorsPropagate)
{
    std::vector<std::atomic<int>> hits(5);
    detail::run_workers(5, true, [&](std::size_t w) { ++hits[w]; });
    for (auto& h : hits) EXPECT_EQ(h.load(), 1);
    EXPECT_THROW(detail::run_workers(3, true,
                                     [](std::size_t w) {
                                         if (w == 2) throw std::runtime_error("worker failed");
                                     }),
                 std::runtime_error);
}

TEST(SplitTapes, RandomWalkPartsSumExactly)
{
    const Model m = rw8();
    std::size_t k0 = 0, k1 = 0;
    const Tape a = record_model(m, {}, 0, 2, &k0), b = record_model(m, {}, 1, 2, &k1);
    const Tape whole = record_model(m);
    EXPECT_EQ(k0 + k1, m.term_count());
    EXPECT_EQ(k0, 4u);
    std::mt19937_64 rng(61);
    for (int rep = 0; rep < 20; ++rep) {
        const auto x = integer_point(8, rng);
        EXPECT_EQ(forward_zero(a, x)[0] + forward_zero(b, x)[0], forward_zero(whole, x)[0]);
        const std::vector<double> one{1.0};
        const auto ga = reverse_one(a, x, one), gb = reverse_one(b, x, one), g = reverse_one(whole, x, one);
        for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(ga[i] + gb[i], g[i]);
    }
}

TEST(Engine, SingleWorkerIsTheDirectPath)
{
    const Model m = make_model("thetalog", simulate_thetalog(62, 50));
    LaplaceOptions serial;
    serial.threads = false;
    LaplaceEngine e(m), s(m, serial);
    ASSERT_EQ(e.workers(), 1u);
    const auto x0 = m.point(m.u0, m.theta0);
    const Tape t1 = optimize_tape(record_model(m, x0));
    const Tape t2 = gradient_tape(t1, x0);
    std::mt19937_64 rng(63);
    std::normal_distribution<double> N(0, 0.3);
    for (int rep = 0; rep < 5; ++rep) {
        auto x = x0;
        for (auto& v : x) v += N(rng);
        EXPECT_EQ(e.f_value(x), forward_zero(t1, x)[0]);
        EXPECT_EQ(e.f_gradient(x), forward_zero(t2, x));
    }
    EXPECT_EQ(e.neg_log_laplace(m.theta0), s.neg_log_laplace(m.theta0));
    EXPECT_EQ(e.laplace_gradient(m.theta0), s.laplace_gradient(m.theta0));
}

TEST(Engine, WorkersAgreeWithSingleWorker)
{
    for (const auto& m : {make_model("thetalog", simulate_thetalog(64, 60)), make_model("mvrw", simulate_mvrw(64, 20, 3)),
                          make_model("spatial", simulate_spatial(64, 4))}) {
        LaplaceEngine one(m);
        const double v1 = one.neg_log_laplace(m.theta0);
        const auto g1 = one.laplace_gradient(m.theta0);
        for (std::size_t W : {2u, 4u}) {
            LaplaceOptions o;
            o.workers = W;
            LaplaceEngine e(m, o);
            EXPECT_EQ(e.workers(), W);
            EXPECT_EQ(e.pattern(), one.pattern()) << m.name;
            EXPECT_LE(relative_distance(e.neg_log_laplace(m.theta0), v1), 1e-12) << m.name << " W=" << W;
            EXPECT_LE(relative_distance(e.laplace_gradient(m.theta0), g1), 1e-10) << m.name << " W=" << W;
        }
    }
}

TEST(Engine, UnionPatternCoversWorkerPatterns)
{
    const Model m = make_model("thetalog", simulate_thetalog(65, 30));
    LaplaceOptions o;
    o.workers = 3;
    LaplaceEngine e(m, o);
    std::size_t total = 0;
    for (std::size_t w = 0; w < 3; ++w) {
        const auto& p = e.worker_pattern(w);
        for (std::size_t l = 0; l < p.nnz(); ++l) EXPECT_GE(e.pattern().find(p.rows()[l], p.cols()[l]), 0);
        total += e.t1(w).size();
        EXPECT_LT(e.t1(w).size(), LaplaceEngine(m).t1().size());
    }
    EXPECT_EQ(e.pattern(), m.expected_pattern);
    EXPECT_GT(total, 0u);
}

TEST(Engine, MoreWorkersThanTerms)
{
    Model m;
    m.name = "tiny";
    m.n = 1;
    m.u0 = {0.0};
    m.nll = [](std::span<const AdScalar> u, std::span<const AdScalar>, TermAccumulator& f) {
        f += (u[0] - 1.0) * (u[0] - 1.0);
        f += u[0] * u[0];
    };
    LaplaceOptions o;
    o.workers = 5;
    LaplaceEngine e(m, o);
    EXPECT_EQ(e.workers(), 2u);
    EXPECT_NEAR(e.neg_log_laplace({}), LaplaceEngine(m).neg_log_laplace({}), 1e-14);
    EXPECT_NEAR(e.u_hat()[0], 0.5, 1e-14);
}
