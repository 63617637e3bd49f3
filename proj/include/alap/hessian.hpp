#pragma once

// Sparse Hessians from a gradient tape.
//
// The dependency structure of T2 (the tape of f') gives the sparsity pattern
// of the random-effects block f''_uu. Column k of the Hessian is a reverse
// sweep of T2 seeded at gradient component k, restricted to the part of the
// graph that can carry a derivative back to u. Recording those column sweeps
// yields T3, the tape of the lower-triangle nonzeros of f''_uu.

#include <algorithm>
#include <cstdint>
#include <istream>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "alap/ad.hpp"

namespace alap {

/// Lower-triangle nonzero structure of a symmetric matrix, sorted by column
/// then row.
class SparsityPattern {
public:
    SparsityPattern() = default;

    /// Builds a pattern from arbitrary (row, col) pairs; entries are mirrored
    /// into the lower triangle, sorted and deduplicated.
    static SparsityPattern from_entries(std::size_t dim, std::vector<std::pair<std::int32_t, std::int32_t>> entries,
                                        bool with_diagonal = true)
    {
        for (auto& [r, c] : entries) {
            if (r < 0 || c < 0 || static_cast<std::size_t>(r) >= dim || static_cast<std::size_t>(c) >= dim)
                throw std::out_of_range("SparsityPattern: entry outside of dimension");
            if (r < c) std::swap(r, c);
        }
        if (with_diagonal)
            for (std::size_t i = 0; i < dim; ++i)
                entries.emplace_back(static_cast<std::int32_t>(i), static_cast<std::int32_t>(i));
        std::sort(entries.begin(), entries.end(), [](const auto& x, const auto& y) {
            return x.second != y.second ? x.second < y.second : x.first < y.first;
        });
        entries.erase(std::unique(entries.begin(), entries.end()), entries.end());
        SparsityPattern p;
        p.dim_ = dim;
        p.col_start_.assign(dim + 1, 0);
        for (const auto& [r, c] : entries) {
            p.rows_.push_back(r);
            p.cols_.push_back(c);
            ++p.col_start_[c + 1];
        }
        for (std::size_t j = 0; j < dim; ++j) p.col_start_[j + 1] += p.col_start_[j];
        return p;
    }

    static SparsityPattern dense(std::size_t dim)
    {
        std::vector<std::pair<std::int32_t, std::int32_t>> e;
        for (std::size_t j = 0; j < dim; ++j)
            for (std::size_t i = j; i < dim; ++i) e.emplace_back(i, j);
        return from_entries(dim, std::move(e));
    }

    /// Symmetric band with |i - j| <= half_width.
    static SparsityPattern banded(std::size_t dim, std::size_t half_width)
    {
        std::vector<std::pair<std::int32_t, std::int32_t>> e;
        for (std::size_t j = 0; j < dim; ++j)
            for (std::size_t i = j; i < std::min(dim, j + half_width + 1); ++i) e.emplace_back(i, j);
        return from_entries(dim, std::move(e));
    }

    /// Block tridiagonal with dense blocks of size `block`.
    static SparsityPattern block_tridiagonal(std::size_t dim, std::size_t block)
    {
        std::vector<std::pair<std::int32_t, std::int32_t>> e;
        for (std::size_t j = 0; j < dim; ++j)
            for (std::size_t i = j; i < dim; ++i)
                if (i / block <= j / block + 1) e.emplace_back(i, j);
        return from_entries(dim, std::move(e));
    }

    std::size_t dim() const { return dim_; }
    std::size_t nnz() const { return rows_.size(); }
    std::span<const std::int32_t> rows() const { return rows_; }
    std::span<const std::int32_t> cols() const { return cols_; }
    std::span<const std::int32_t> col_start() const { return col_start_; }

    /// Position of entry (i, j) in either triangle, or -1 when absent.
    std::int64_t find(std::int32_t i, std::int32_t j) const
    {
        if (i < j) std::swap(i, j);
        const auto first = rows_.begin() + col_start_[j];
        const auto last = rows_.begin() + col_start_[j + 1];
        const auto it = std::lower_bound(first, last, i);
        return (it != last && *it == i) ? (it - rows_.begin()) : -1;
    }

    /// Largest |i - j| over the entries.
    std::size_t half_bandwidth() const
    {
        std::size_t w = 0;
        for (std::size_t l = 0; l < nnz(); ++l) w = std::max<std::size_t>(w, rows_[l] - cols_[l]);
        return w;
    }

    friend bool operator==(const SparsityPattern& x, const SparsityPattern& y)
    {
        return x.dim_ == y.dim_ && x.rows_ == y.rows_ && x.cols_ == y.cols_;
    }

private:
    std::size_t dim_ = 0;
    std::vector<std::int32_t> rows_;
    std::vector<std::int32_t> cols_;
    std::vector<std::int32_t> col_start_{0};
};

/// Coordinate list text: one "row col" pair per line, 0-based. The first line
/// holds the dimension.
inline void write_pattern(std::ostream& os, const SparsityPattern& p)
{
    os << p.dim() << '\n';
    for (std::size_t l = 0; l < p.nnz(); ++l) os << p.rows()[l] << ' ' << p.cols()[l] << '\n';
}

inline SparsityPattern read_pattern(std::istream& is)
{
    std::size_t dim = 0;
    if (!(is >> dim)) throw std::runtime_error("read_pattern: missing dimension");
    std::vector<std::pair<std::int32_t, std::int32_t>> e;
    std::int32_t r = 0, c = 0;
    while (is >> r >> c) e.emplace_back(r, c);
    return SparsityPattern::from_entries(dim, std::move(e), false);
}

/// Hessian pattern of the first n independents, from the dependency
/// structure of the gradient tape t2. Dependencies are propagated forward as
/// bit sets, 64 variables per pass. Diagonal entries are always included.
inline SparsityPattern detect_sparsity(const Tape& t2, std::size_t n)
{
    if (n > t2.num_independents())
        throw std::invalid_argument("detect_sparsity: n exceeds the number of independents");
    if (t2.num_dependents() != t2.num_independents())
        throw std::invalid_argument("detect_sparsity: not a gradient tape");
    const std::size_t size = t2.size();
    const auto deps = t2.dependents();
    std::vector<std::pair<std::int32_t, std::int32_t>> entries;
    std::vector<std::uint64_t> bits(size);
    for (std::size_t base = 0; base < n; base += 64) {
        const std::size_t width = std::min<std::size_t>(64, n - base);
        std::fill(bits.begin(), bits.end(), 0);
        for (std::size_t j = 0; j < width; ++j) bits[base + j] = std::uint64_t{1} << j;
        for (std::size_t k = t2.num_independents(); k < size; ++k) {
            std::uint64_t m = 0;
            t2.for_each_arg(k, [&](std::int32_t a) { m |= bits[a]; });
            bits[k] = m;
        }
        for (std::size_t i = 0; i < n; ++i) {
            std::uint64_t m = bits[deps[i]];
            while (m) {
                const int j = __builtin_ctzll(m);
                m &= m - 1;
                entries.emplace_back(static_cast<std::int32_t>(i), static_cast<std::int32_t>(base + j));
            }
        }
    }
    return SparsityPattern::from_entries(n, std::move(entries));
}

/// Per Hessian column k: the ascending list of T2 nodes that lie on a path
/// from some u-independent to gradient component k. Reversing over exactly
/// these nodes yields Hessian column k.
struct SubgraphIndex {
    std::vector<std::vector<std::int32_t>> columns;
    /// 1 for nodes that depend on at least one of the first n independents.
    std::vector<char> u_dependent;

    std::size_t total_size() const
    {
        std::size_t s = 0;
        for (const auto& c : columns) s += c.size();
        return s;
    }
};

inline std::vector<char> u_dependency(const Tape& t2, std::size_t n)
{
    std::vector<char> dep(t2.size(), 0);
    for (std::size_t k = 0; k < n; ++k) dep[k] = 1;
    for (std::size_t k = t2.num_independents(); k < t2.size(); ++k)
        t2.for_each_arg(k, [&](std::int32_t a) { dep[k] |= dep[a]; });
    return dep;
}

/// Breadth-first search backwards from each gradient node, followed by a sort.
inline SubgraphIndex build_subgraphs(const Tape& t2, const SparsityPattern& pattern)
{
    const std::size_t n = pattern.dim();
    SubgraphIndex sub;
    sub.u_dependent = u_dependency(t2, n);
    sub.columns.resize(n);
    std::vector<char> mark(t2.size(), 0);
    std::vector<std::int32_t> queue;
    for (std::size_t k = 0; k < n; ++k) {
        const std::int32_t root = t2.dependents()[k];
        queue.clear();
        if (sub.u_dependent[root]) {
            queue.push_back(root);
            mark[root] = 1;
        }
        for (std::size_t head = 0; head < queue.size(); ++head) {
            t2.for_each_arg(queue[head], [&](std::int32_t a) {
                if (sub.u_dependent[a] && !mark[a]) {
                    mark[a] = 1;
                    queue.push_back(a);
                }
            });
        }
        for (auto q : queue) mark[q] = 0;
        std::sort(queue.begin(), queue.end());
        sub.columns[k] = queue;
    }
    return sub;
}

/// Restricted reverse sweep for one Hessian column. `ws.values` must hold a
/// forward sweep of t2 and `ws.adjoints` must be zero on the subgraph; it is
/// left zero on return. Writes H(i, k) for the pattern entries of column k.
inline void hessian_column(const Tape& t2, const SubgraphIndex& sub, const SparsityPattern& pattern,
                           std::size_t k, Workspace& ws, std::span<double> out)
{
    const auto& nodes_k = sub.columns[k];
    const auto first = pattern.col_start()[k];
    const auto last = pattern.col_start()[k + 1];
    if (nodes_k.empty()) {
        for (auto l = first; l < last; ++l) out[l] = 0;
        return;
    }
    const auto nodes = t2.nodes();
    const std::int32_t* sa = t2.sum_args().data();
    double* adj = ws.adjoints.data();
    const double* v = ws.values.data();
    const char* udep = sub.u_dependent.data();
    adj[t2.dependents()[k]] = 1;
    auto emit = [adj, udep](std::int32_t arg, double c, bool neg) {
        if (!udep[arg]) return;
        if (neg)
            adj[arg] -= c;
        else
            adj[arg] += c;
    };
    for (auto it = nodes_k.rbegin(); it != nodes_k.rend(); ++it)
        detail::reverse_node<double>(nodes[*it], *it, v, adj[*it], sa, emit);
    for (auto l = first; l < last; ++l) out[l] = adj[pattern.rows()[l]];
    for (auto q : nodes_k) adj[q] = 0;
}

/// Lower-triangle Hessian nonzeros of f''_uu at x, in pattern order. One
/// forward sweep of t2 is shared by all column sweeps.
inline std::vector<double> sparse_hessian(const Tape& t2, const SubgraphIndex& sub, const SparsityPattern& pattern,
                                          std::span<const double> x, Workspace& ws)
{
    forward_zero(t2, x, ws);
    ws.adjoints.assign(t2.size(), 0.0);
    std::vector<double> h(pattern.nnz());
    for (std::size_t k = 0; k < pattern.dim(); ++k) hessian_column(t2, sub, pattern, k, ws, h);
    return h;
}

inline std::vector<double> sparse_hessian(const Tape& t2, const SubgraphIndex& sub, const SparsityPattern& pattern,
                                          std::span<const double> x)
{
    Workspace ws;
    return sparse_hessian(t2, sub, pattern, x, ws);
}

/// Records sparse_hessian into T3: independents are those of t2, dependents
/// are the pattern's nonzeros.
inline Tape hessian_tape(const Tape& t2, const SubgraphIndex& sub, const SparsityPattern& pattern,
                         std::span<const double> x0 = {}, bool optimize = true)
{
    const std::size_t nin = t2.num_independents();
    if (!x0.empty()) detail::check_size(x0.size(), nin, "hessian_tape");
    Recorder rec;
    std::vector<AdScalar> x;
    for (std::size_t i = 0; i < nin; ++i) x.push_back(rec.independent(x0.empty() ? 0.0 : x0[i]));
    const std::vector<AdScalar> v = detail::replay_forward(t2, x);

    const auto nodes = t2.nodes();
    const std::int32_t* sa = t2.sum_args().data();
    const char* udep = sub.u_dependent.data();
    std::vector<std::vector<detail::Contribution>> parts(t2.size());
    std::vector<AdScalar> h(pattern.nnz());
    auto emit = [&parts, udep](std::int32_t arg, const AdScalar& c, bool neg) {
        if (!udep[arg] || (c.is_constant() && c.value() == 0)) return;
        parts[arg].push_back({c, neg});
    };
    for (std::size_t k = 0; k < pattern.dim(); ++k) {
        const auto& nodes_k = sub.columns[k];
        if (!nodes_k.empty()) parts[t2.dependents()[k]].push_back({AdScalar(1.0), false});
        std::vector<AdScalar> row_adj(nin);
        for (auto it = nodes_k.rbegin(); it != nodes_k.rend(); ++it) {
            const auto q = *it;
            if (static_cast<std::size_t>(q) < nin) {
                row_adj[q] = detail::combine(parts[q]);
            } else if (!parts[q].empty()) {
                const AdScalar g = detail::combine(parts[q]);
                detail::reverse_node<AdScalar>(nodes[q], q, v.data(), g, sa, emit);
            }
            parts[q].clear();
        }
        for (auto l = pattern.col_start()[k]; l < pattern.col_start()[k + 1]; ++l) h[l] = row_adj[pattern.rows()[l]];
    }
    Tape t3 = rec.finish(h, true);
    return optimize ? optimize_tape(t3) : t3;
}

/// d/dxi of sum_l w_l H_l(xi): one reverse sweep of T3 in range direction w.
inline std::vector<double> hessian_weighted_reverse(const Tape& t3, std::span<const double> x,
                                                    std::span<const double> w, Workspace& ws)
{
    detail::check_size(w.size(), t3.num_dependents(), "hessian_weighted_reverse");
    return reverse_one(t3, x, w, ws);
}

inline std::vector<double> hessian_weighted_reverse(const Tape& t3, std::span<const double> x,
                                                    std::span<const double> w)
{
    Workspace ws;
    return hessian_weighted_reverse(t3, x, w, ws);
}

}  // namespace alap
