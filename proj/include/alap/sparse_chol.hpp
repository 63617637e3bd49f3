#pragma once

// Sparse symmetric positive definite linear algebra: minimum degree
// ordering, elimination tree symbolic analysis, up-looking simplicial
// Cholesky, triangular solves and the Takahashi inverse subset.
//
// Permutation convention: perm[k] is the original index of pivot k, so the
// factor satisfies L L^T = C with C(k, l) = A(perm[k], perm[l]).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <memory>
#include <numeric>
#include <ostream>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "alap/hessian.hpp"

namespace alap {

/// Lower triangle of a symmetric matrix; values aligned with pattern order.
struct SparseSym {
    SparsityPattern pattern;
    std::vector<double> values;

    double operator()(std::int32_t i, std::int32_t j) const
    {
        const auto l = pattern.find(i, j);
        return l < 0 ? 0.0 : values[l];
    }
};

class NotPositiveDefinite : public std::runtime_error {
public:
    NotPositiveDefinite(std::int32_t pivot, std::int32_t column)
      : std::runtime_error("not positive definite: pivot " + std::to_string(pivot) + " (column " +
                           std::to_string(column) + ")"),
        pivot(pivot),
        column(column)
    { }
    std::int32_t pivot;   // position in the factorization order
    std::int32_t column;  // original row/column index
};

enum class OrderingMethod { amd, natural };

/// Structure shared by every numeric factorization on one pattern.
struct CholSymbolic {
    SparsityPattern pattern;
    std::vector<std::int32_t> perm, pinv;
    std::vector<std::int32_t> parent;
    // Upper triangle of C by columns, and the pattern entry each slot reads.
    std::vector<std::int32_t> cp, ci, c_entry;
    // L by columns, diagonal first and rows ascending.
    std::vector<std::int32_t> lp, li;
    // L by rows (columns ascending), excluding the diagonal.
    std::vector<std::int32_t> rp, rj;

    std::size_t dim() const { return perm.size(); }
    std::size_t nnz_l() const { return li.size(); }

    /// Slot of L(i, j) (permuted indices, i >= j) or -1.
    std::int64_t find(std::int32_t i, std::int32_t j) const
    {
        const auto first = li.begin() + lp[j];
        const auto last = li.begin() + lp[j + 1];
        const auto it = std::lower_bound(first, last, i);
        return (it != last && *it == i) ? (it - li.begin()) : -1;
    }
};

inline std::vector<std::int32_t> invert_permutation(std::span<const std::int32_t> perm)
{
    std::vector<std::int32_t> pinv(perm.size(), -1);
    for (std::size_t k = 0; k < perm.size(); ++k) {
        const auto p = perm[k];
        if (p < 0 || static_cast<std::size_t>(p) >= perm.size() || pinv[p] != -1)
            throw std::invalid_argument("not a permutation");
        pinv[p] = static_cast<std::int32_t>(k);
    }
    return pinv;
}

inline std::shared_ptr<const CholSymbolic> analyze(const SparsityPattern& pattern, std::span<const std::int32_t> perm)
{
    const std::size_t n = pattern.dim();
    if (perm.size() != n) throw std::invalid_argument("analyze: permutation size mismatch");
    auto s = std::make_shared<CholSymbolic>();
    s->pattern = pattern;
    s->perm.assign(perm.begin(), perm.end());
    s->pinv = invert_permutation(perm);

    // C = P A P^T, upper triangle by columns.
    s->cp.assign(n + 1, 0);
    for (std::size_t l = 0; l < pattern.nnz(); ++l) {
        const auto a = s->pinv[pattern.rows()[l]], b = s->pinv[pattern.cols()[l]];
        ++s->cp[std::max(a, b) + 1];
    }
    for (std::size_t k = 0; k < n; ++k) s->cp[k + 1] += s->cp[k];
    s->ci.resize(pattern.nnz());
    s->c_entry.resize(pattern.nnz());
    std::vector<std::int32_t> next(s->cp.begin(), s->cp.end() - 1);
    for (std::size_t l = 0; l < pattern.nnz(); ++l) {
        const auto a = s->pinv[pattern.rows()[l]], b = s->pinv[pattern.cols()[l]];
        const auto p = next[std::max(a, b)]++;
        s->ci[p] = std::min(a, b);
        s->c_entry[p] = static_cast<std::int32_t>(l);
    }

    // Elimination tree with path compression.
    s->parent.assign(n, -1);
    std::vector<std::int32_t> ancestor(n, -1);
    for (std::size_t k = 0; k < n; ++k) {
        for (auto p = s->cp[k]; p < s->cp[k + 1]; ++p) {
            for (auto i = s->ci[p]; i != -1 && static_cast<std::size_t>(i) < k;) {
                const auto inext = ancestor[i];
                ancestor[i] = static_cast<std::int32_t>(k);
                if (inext == -1) s->parent[i] = static_cast<std::int32_t>(k);
                i = inext;
            }
        }
    }

    // Row structure of L: row k is the union of etree paths from the entries
    // of C(:, k) up to k.
    std::vector<std::int32_t> mark(n, -1);
    s->rp.assign(n + 1, 0);
    std::vector<std::int32_t> row;
    for (std::size_t k = 0; k < n; ++k) {
        row.clear();
        mark[k] = static_cast<std::int32_t>(k);
        for (auto p = s->cp[k]; p < s->cp[k + 1]; ++p) {
            for (auto i = s->ci[p]; mark[i] != static_cast<std::int32_t>(k); i = s->parent[i]) {
                row.push_back(i);
                mark[i] = static_cast<std::int32_t>(k);
            }
        }
        std::sort(row.begin(), row.end());
        s->rj.insert(s->rj.end(), row.begin(), row.end());
        s->rp[k + 1] = static_cast<std::int32_t>(s->rj.size());
    }

    // Column structure from the row structure.
    std::vector<std::int32_t> count(n, 1);
    for (auto j : s->rj) ++count[j];
    s->lp.assign(n + 1, 0);
    for (std::size_t j = 0; j < n; ++j) s->lp[j + 1] = s->lp[j] + count[j];
    s->li.resize(s->lp[n]);
    std::vector<std::int32_t> fill(s->lp.begin(), s->lp.end() - 1);
    for (std::size_t k = 0; k < n; ++k) {
        s->li[fill[k]++] = static_cast<std::int32_t>(k);
        for (auto p = s->rp[k]; p < s->rp[k + 1]; ++p) s->li[fill[s->rj[p]]++] = static_cast<std::int32_t>(k);
    }
    return s;
}

/// Number of nonzeros of L (diagonal included) under a permutation.
inline std::size_t factor_nnz(const SparsityPattern& pattern, std::span<const std::int32_t> perm)
{
    return analyze(pattern, perm)->nnz_l();
}

namespace detail {

/// Minimum degree on the explicit elimination graph. Ties are broken by the
/// lowest index, so the result is deterministic.
inline std::vector<std::int32_t> minimum_degree(const SparsityPattern& pattern)
{
    const std::size_t n = pattern.dim();
    std::vector<std::vector<std::int32_t>> adj(n);
    for (std::size_t l = 0; l < pattern.nnz(); ++l) {
        const auto i = pattern.rows()[l], j = pattern.cols()[l];
        if (i == j) continue;
        adj[i].push_back(j);
        adj[j].push_back(i);
    }
    std::set<std::pair<std::size_t, std::int32_t>> queue;
    for (std::size_t v = 0; v < n; ++v) {
        std::sort(adj[v].begin(), adj[v].end());
        queue.emplace(adj[v].size(), static_cast<std::int32_t>(v));
    }
    std::vector<std::int32_t> order;
    order.reserve(n);
    std::vector<std::int32_t> merged;
    while (!queue.empty()) {
        const auto v = queue.begin()->second;
        queue.erase(queue.begin());
        order.push_back(v);
        const std::vector<std::int32_t> nbrs = std::move(adj[v]);
        adj[v].clear();
        for (auto u : nbrs) {
            queue.erase({adj[u].size(), u});
            merged.clear();
            std::set_union(adj[u].begin(), adj[u].end(), nbrs.begin(), nbrs.end(), std::back_inserter(merged));
            merged.erase(std::remove_if(merged.begin(), merged.end(),
                                        [u, v](std::int32_t w) { return w == u || w == v; }),
                         merged.end());
            adj[u].swap(merged);
            queue.emplace(adj[u].size(), u);
        }
    }
    return order;
}

}  // namespace detail

/// Fill reducing ordering. The minimum degree order is used only when it
/// strictly reduces nnz(L) compared to the natural order, the way CHOLMOD
/// keeps the best of the orderings it tries.
inline std::vector<std::int32_t> ordering(const SparsityPattern& pattern, OrderingMethod method = OrderingMethod::amd)
{
    std::vector<std::int32_t> natural(pattern.dim());
    std::iota(natural.begin(), natural.end(), 0);
    if (method == OrderingMethod::natural) return natural;
    auto md = detail::minimum_degree(pattern);
    return factor_nnz(pattern, md) < factor_nnz(pattern, natural) ? md : natural;
}

class CholFactor;
class InverseSubset;
inline CholFactor factor(std::span<const double> values, std::shared_ptr<const CholSymbolic> symbolic);
inline InverseSubset inverse_subset(const CholFactor& f);

class CholFactor {
public:
    CholFactor() = default;

    std::size_t dim() const { return symbolic_ ? symbolic_->dim() : 0; }
    const CholSymbolic& symbolic() const { return *symbolic_; }
    std::shared_ptr<const CholSymbolic> symbolic_ptr() const { return symbolic_; }
    std::span<const double> values() const { return lx_; }
    double log_det() const { return log_det_; }
    std::uint64_t flops() const { return flops_; }
    std::span<const std::int32_t> perm() const { return symbolic_->perm; }

    /// L(i, j) in permuted indices.
    double l(std::int32_t i, std::int32_t j) const
    {
        const auto p = symbolic_->find(i, j);
        return p < 0 ? 0.0 : lx_[p];
    }

private:
    friend CholFactor factor(std::span<const double>, std::shared_ptr<const CholSymbolic>);
    std::shared_ptr<const CholSymbolic> symbolic_;
    std::vector<double> lx_;
    double log_det_ = 0;
    std::uint64_t flops_ = 0;
};

/// Numeric factorization of the values of a matrix with the analyzed
/// pattern. Throws NotPositiveDefinite on a non-positive pivot.
inline CholFactor factor(std::span<const double> values, std::shared_ptr<const CholSymbolic> symbolic)
{
    const CholSymbolic& s = *symbolic;
    if (values.size() != s.pattern.nnz()) throw std::invalid_argument("factor: value count does not match pattern");
    const std::size_t n = s.dim();
    CholFactor f;
    f.symbolic_ = std::move(symbolic);
    f.lx_.assign(s.nnz_l(), 0.0);
    double* lx = f.lx_.data();
    std::vector<double> x(n, 0.0);
    std::vector<std::int32_t> c(s.lp.begin(), s.lp.end() - 1);
    std::uint64_t flops = 0;
    double log_det = 0;
    for (std::size_t k = 0; k < n; ++k) {
        for (auto p = s.cp[k]; p < s.cp[k + 1]; ++p) x[s.ci[p]] = values[s.c_entry[p]];
        double d = x[k];
        x[k] = 0;
        for (auto q = s.rp[k]; q < s.rp[k + 1]; ++q) {
            const auto i = s.rj[q];
            const double lki = x[i] / lx[s.lp[i]];
            x[i] = 0;
            for (auto p = s.lp[i] + 1; p < c[i]; ++p) x[s.li[p]] -= lx[p] * lki;
            d -= lki * lki;
            flops += 3 + 2 * static_cast<std::uint64_t>(c[i] - s.lp[i] - 1);
            lx[c[i]++] = lki;
        }
        if (!(d > 0)) throw NotPositiveDefinite(static_cast<std::int32_t>(k), s.perm[k]);
        const double ljj = std::sqrt(d);
        lx[c[k]++] = ljj;
        log_det += std::log(ljj);
        ++flops;
    }
    f.log_det_ = 2 * log_det;
    f.flops_ = flops;
    return f;
}

inline CholFactor factor(const SparseSym& a, std::span<const std::int32_t> perm,
                         std::shared_ptr<const CholSymbolic> symbolic = nullptr)
{
    if (!symbolic) symbolic = analyze(a.pattern, perm);
    return factor(a.values, std::move(symbolic));
}

/// Solves A x = b. Optionally adds the operation count to *flops.
inline std::vector<double> solve(const CholFactor& f, std::span<const double> b, std::uint64_t* flops = nullptr)
{
    const std::size_t n = f.dim();
    if (b.size() != n) throw std::invalid_argument("solve: dimension mismatch");
    const CholSymbolic& s = f.symbolic();
    const auto lx = f.values();
    std::vector<double> y(n);
    for (std::size_t k = 0; k < n; ++k) y[k] = b[s.perm[k]];
    for (std::size_t j = 0; j < n; ++j) {
        y[j] /= lx[s.lp[j]];
        for (auto p = s.lp[j] + 1; p < s.lp[j + 1]; ++p) y[s.li[p]] -= lx[p] * y[j];
    }
    for (std::size_t j = n; j-- > 0;) {
        for (auto p = s.lp[j] + 1; p < s.lp[j + 1]; ++p) y[j] -= lx[p] * y[s.li[p]];
        y[j] /= lx[s.lp[j]];
    }
    std::vector<double> x(n);
    for (std::size_t k = 0; k < n; ++k) x[s.perm[k]] = y[k];
    if (flops) *flops += 2 * n + 4 * (s.nnz_l() - n);
    return x;
}

/// Entries of A^{-1} on the pattern of L (permuted indices, lower triangle).
class InverseSubset {
public:
    std::span<const double> values() const { return z_; }
    std::uint64_t flops() const { return flops_; }

    /// (A^{-1})(i, j) in original indices; the entry must lie on the pattern
    /// of L + L^T.
    double at(std::int32_t i, std::int32_t j) const
    {
        auto a = symbolic_->pinv[i], b = symbolic_->pinv[j];
        if (a < b) std::swap(a, b);
        const auto p = symbolic_->find(a, b);
        if (p < 0) throw std::out_of_range("inverse subset: entry outside the factor pattern");
        return z_[p];
    }

    /// Values on the pattern of A, in pattern order.
    std::vector<double> on_pattern() const
    {
        const auto& pat = symbolic_->pattern;
        std::vector<double> out(pat.nnz());
        for (std::size_t l = 0; l < pat.nnz(); ++l) out[l] = at(pat.rows()[l], pat.cols()[l]);
        return out;
    }

    std::vector<double> diagonal() const
    {
        std::vector<double> d(symbolic_->dim());
        for (std::size_t i = 0; i < d.size(); ++i) d[i] = z_[symbolic_->lp[symbolic_->pinv[i]]];
        return d;
    }

private:
    friend InverseSubset inverse_subset(const CholFactor&);
    std::shared_ptr<const CholSymbolic> symbolic_;
    std::vector<double> z_;
    std::uint64_t flops_ = 0;
};

/// Takahashi recurrence from the last column of L backwards:
///   Z(i,j) = -(1/L_jj) sum_{k in J} L_kj Z(k,i),   i in J
///   Z(j,j) = (1/L_jj) (1/L_jj - sum_{k in J} L_kj Z(k,j))
/// where J is the off-diagonal row structure of column j.
inline InverseSubset inverse_subset(const CholFactor& f)
{
    const CholSymbolic& s = f.symbolic();
    const auto lx = f.values();
    const std::size_t n = s.dim();
    InverseSubset inv;
    inv.symbolic_ = f.symbolic_ptr();
    inv.z_.assign(s.nnz_l(), 0.0);
    double* z = inv.z_.data();
    std::uint64_t flops = 0;
    for (std::size_t j = n; j-- > 0;) {
        const auto first = s.lp[j] + 1, last = s.lp[j + 1];
        const double inv_ljj = 1.0 / lx[s.lp[j]];
        for (auto pi = first; pi < last; ++pi) {
            const auto i = s.li[pi];
            double acc = 0;
            for (auto pk = first; pk < last; ++pk) {
                const auto k = s.li[pk];
                const auto slot = k >= i ? s.find(k, i) : s.find(i, k);
                acc += lx[pk] * z[slot];
            }
            z[pi] = -inv_ljj * acc;
        }
        const std::uint64_t m = static_cast<std::uint64_t>(last - first);
        if (m == 0) {
            z[s.lp[j]] = inv_ljj * inv_ljj;
            flops += 2;
            continue;
        }
        double acc = 0;
        for (auto pk = first; pk < last; ++pk) acc += lx[pk] * z[pk];
        z[s.lp[j]] = inv_ljj * (inv_ljj - acc);
        flops += m * (2 * m + 1) + 2 * m + 3;
    }
    inv.flops_ = flops;
    return inv;
}

/// Coordinate text: the dimension, then one "row col value" line per entry.
inline void write_matrix(std::ostream& os, const SparseSym& a)
{
    const auto old = os.precision(17);
    os << a.pattern.dim() << '\n';
    for (std::size_t l = 0; l < a.pattern.nnz(); ++l)
        os << a.pattern.rows()[l] << ' ' << a.pattern.cols()[l] << ' ' << a.values[l] << '\n';
    os.precision(old);
}

inline SparseSym read_matrix(std::istream& is)
{
    std::size_t dim = 0;
    if (!(is >> dim)) throw std::runtime_error("read_matrix: missing dimension");
    std::vector<std::pair<std::int32_t, std::int32_t>> coords;
    std::vector<double> vals;
    std::int32_t r = 0, c = 0;
    double v = 0;
    while (is >> r >> c >> v) {
        coords.emplace_back(r, c);
        vals.push_back(v);
    }
    SparseSym a;
    a.pattern = SparsityPattern::from_entries(dim, coords, false);
    a.values.assign(a.pattern.nnz(), 0.0);
    for (std::size_t t = 0; t < coords.size(); ++t) a.values[a.pattern.find(coords[t].first, coords[t].second)] = vals[t];
    return a;
}

}  // namespace alap
