#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>
#include <sstream>

#include "alap/metric.hpp"
#include "alap/models.hpp"
#include "alap/sparse_chol.hpp"
#include "oracles.hpp"

using namespace alap;

namespace {

SparseSym from_dense(const oracle::Mat& A)
{
    std::vector<std::pair<std::int32_t, std::int32_t>> e;
    const auto n = static_cast<std::int32_t>(A.rows());
    for (std::int32_t j = 0; j < n; ++j)
        for (std::int32_t i = j; i < n; ++i)
            if (A(i, j) != 0) e.emplace_back(i, j);
    SparseSym s{SparsityPattern::from_entries(n, e), {}};
    for (std::size_t l = 0; l < s.pattern.nnz(); ++l) s.values.push_back(A(s.pattern.rows()[l], s.pattern.cols()[l]));
    return s;
}

CholFactor factor_amd(const SparseSym& a) { return factor(a, ordering(a.pattern)); }

bool is_permutation(const std::vector<std::int32_t>& p)
{
    auto q = p;
    std::sort(q.begin(), q.end());
    for (std::size_t i = 0; i < q.size(); ++i)
        if (q[i] != static_cast<std::int32_t>(i)) return false;
    return true;
}

}  // namespace

TEST(Ordering, NaturalIsIdentity)
{
    const auto p = ordering(SparsityPattern::banded(6, 1), OrderingMethod::natural);
    std::vector<std::int32_t> id(6);
    std::iota(id.begin(), id.end(), 0);
    EXPECT_EQ(p, id);
}

TEST(Ordering, TridiagonalHasNoFill)
{
    const auto pat = SparsityPattern::banded(30, 1);
    const auto p = ordering(pat);
    EXPECT_TRUE(is_permutation(p));
    EXPECT_EQ(factor_nnz(pat, p), pat.nnz());
}

TEST(Ordering, ArrowheadEliminatesHubLate)
{
    std::vector<std::pair<std::int32_t, std::int32_t>> e;
    for (std::int32_t i = 1; i < 10; ++i) e.emplace_back(i, 0);
    const auto pat = SparsityPattern::from_entries(10, e);
    const auto p = ordering(pat);
    EXPECT_GE(std::find(p.begin(), p.end(), 0) - p.begin(), 8);
    EXPECT_EQ(factor_nnz(pat, p), pat.nnz());
    EXPECT_EQ(factor_nnz(pat, ordering(pat, OrderingMethod::natural)), 55u);
}

TEST(Ordering, NeverWorseThanNatural)
{
    for (const auto& pat : {SparsityPattern::block_tridiagonal(60, 3), SparsityPattern::banded(40, 4),
                            SparsityPattern::dense(12)}) {
        EXPECT_LE(factor_nnz(pat, ordering(pat)), factor_nnz(pat, ordering(pat, OrderingMethod::natural)));
    }
}

TEST(Factor, IdentityHasZeroLogDet)
{
    SparseSym a{SparsityPattern::banded(7, 0), std::vector<double>(7, 1.0)};
    EXPECT_EQ(factor_amd(a).log_det(), 0.0);
}

TEST(Factor, TwoByTwo)
{
    oracle::Mat A(2, 2);
    A << 2, 1, 1, 2;
    const auto f = factor_amd(from_dense(A));
    EXPECT_NEAR(f.log_det(), std::log(3.0), 1e-15);
    const auto x = solve(f, std::vector<double>{1, 0});
    EXPECT_NEAR(x[0], 2.0 / 3, 1e-15);
    EXPECT_NEAR(x[1], -1.0 / 3, 1e-15);
}

TEST(Factor, ReproducesPermutedMatrix)
{
    std::mt19937_64 rng(11);
    for (int w : {1, 3, 7}) {
        const oracle::Mat A = oracle::random_banded_spd(40, w, rng);
        const auto s = from_dense(A);
        const auto f = factor_amd(s);
        const auto n = static_cast<std::int32_t>(A.rows());
        oracle::Mat L = oracle::Mat::Zero(n, n), PAP(n, n);
        for (std::int32_t j = 0; j < n; ++j)
            for (std::int32_t i = j; i < n; ++i) L(i, j) = f.l(i, j);
        for (std::int32_t i = 0; i < n; ++i)
            for (std::int32_t j = 0; j < n; ++j) PAP(i, j) = A(f.perm()[i], f.perm()[j]);
        const oracle::Mat R = L * L.transpose();
        EXPECT_LE((R - PAP).cwiseAbs().maxCoeff() / PAP.cwiseAbs().maxCoeff(), 1e-10);
        const Eigen::LLT<oracle::Mat> llt(A);
        const oracle::Mat Ld = llt.matrixL();
        EXPECT_LE(relative_distance(f.log_det(), 2 * Ld.diagonal().array().log().sum()), 1e-12);
    }
}

TEST(Factor, SolveMatchesDense)
{
    std::mt19937_64 rng(12);
    const oracle::Mat A = oracle::random_banded_spd(25, 2, rng);
    std::normal_distribution<double> N;
    oracle::Vec b(25);
    for (auto& v : b) v = N(rng);
    const auto x = solve(factor_amd(from_dense(A)), oracle::to_std(b));
    const oracle::Vec ref = A.llt().solve(b);
    EXPECT_LE(relative_distance(x, oracle::to_std(ref)), 1e-12);
}

TEST(Factor, NotPositiveDefiniteReportsPivot)
{
    oracle::Mat A = oracle::Mat::Identity(4, 4);
    A(2, 2) = -1;
    try {
        factor(from_dense(A), ordering(SparsityPattern::banded(4, 0), OrderingMethod::natural));
        FAIL() << "expected NotPositiveDefinite";
    } catch (const NotPositiveDefinite& e) {
        EXPECT_EQ(e.pivot, 2);
        EXPECT_EQ(e.column, 2);
    }
}

TEST(Factor, SymbolicAnalysisIsReused)
{
    const auto pat = SparsityPattern::banded(10, 2);
    const auto sym = analyze(pat, ordering(pat));
    std::mt19937_64 rng(13);
    for (int rep = 0; rep < 3; ++rep) {
        const auto s = from_dense(oracle::random_banded_spd(10, 2, rng));
        const auto f = factor(s.values, sym);
        EXPECT_EQ(f.symbolic_ptr(), sym);
        EXPECT_LE(relative_distance(f.log_det(), factor_amd(s).log_det()), 1e-14);
    }
    EXPECT_THROW(factor(std::vector<double>(3, 1.0), sym), std::invalid_argument);
}

TEST(InverseSubset, MatchesDenseInverse)
{
    std::mt19937_64 rng(14);
    for (int n : {5, 20, 50}) {
        for (int w : {1, 4}) {
            const oracle::Mat A = oracle::random_banded_spd(n, w, rng);
            const auto s = from_dense(A);
            const auto f = factor_amd(s);
            const auto z = inverse_subset(f);
            const oracle::Mat Ai = A.inverse();
            std::vector<double> ref(s.pattern.nnz());
            for (std::size_t l = 0; l < ref.size(); ++l) ref[l] = Ai(s.pattern.rows()[l], s.pattern.cols()[l]);
            EXPECT_LE(relative_distance(z.on_pattern(), ref), 1e-10) << "n=" << n << " w=" << w;
            std::vector<double> diag(n);
            for (int i = 0; i < n; ++i) diag[i] = Ai(i, i);
            EXPECT_LE(relative_distance(z.diagonal(), diag), 1e-10);
        }
    }
}

TEST(InverseSubset, FlopsWithinTwiceTheFactor)
{
    std::mt19937_64 rng(15);
    for (int w : {1, 3, 6}) {
        const auto f = factor_amd(from_dense(oracle::random_banded_spd(60, w, rng)));
        EXPECT_LE(inverse_subset(f).flops(), 2 * f.flops()) << "w=" << w;
    }
}

TEST(Solve, FlopsWithinTheFactorOnWiderPatterns)
{
    std::mt19937_64 rng(16);
    for (int w : {3, 6}) {
        const auto f = factor_amd(from_dense(oracle::random_banded_spd(60, w, rng)));
        std::uint64_t flops = 0;
        solve(f, std::vector<double>(60, 1.0), &flops);
        EXPECT_LE(flops, f.flops()) << "w=" << w;
    }
}

TEST(Ordering, SpatialFillNotWorseThanNatural)
{
    const Model m = make_model("spatial", simulate_spatial(1, 6));
    const auto& pat = m.expected_pattern;
    EXPECT_LE(factor_nnz(pat, ordering(pat)), factor_nnz(pat, ordering(pat, OrderingMethod::natural)));
}

TEST(MatrixIo, RoundTrip)
{
    std::mt19937_64 rng(17);
    const auto s = from_dense(oracle::random_banded_spd(8, 2, rng));
    std::stringstream ss;
    write_matrix(ss, s);
    const auto t = read_matrix(ss);
    EXPECT_EQ(t.pattern, s.pattern);
    EXPECT_EQ(t.values, s.values);
}
