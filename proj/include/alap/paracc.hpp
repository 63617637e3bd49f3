#pragma once

// Term splitting for the parallel accumulator. A likelihood written as
// f = sum_k f_k is accumulated through a TermAccumulator; worker w of W keeps
// the terms with k % W == w. Terms owned by other workers are still evaluated
// while recording and vanish when the tape is optimized.

#include <cstddef>
#include <exception>
#include <stdexcept>
#include <thread>
#include <vector>

#include "alap/ad.hpp"

namespace alap {

struct TermSplit {
    std::size_t terms = 0;
    std::size_t workers = 1;

    std::size_t owner(std::size_t k) const { return k % workers; }

    std::size_t load(std::size_t w) const
    {
        return terms / workers + (w < terms % workers ? 1 : 0);
    }

    std::vector<std::size_t> assignment() const
    {
        std::vector<std::size_t> a(terms);
        for (std::size_t k = 0; k < terms; ++k) a[k] = owner(k);
        return a;
    }
};

class TermAccumulator {
public:
    TermAccumulator() = default;
    TermAccumulator(std::size_t worker, std::size_t workers) : worker_(worker), workers_(workers)
    {
        if (workers == 0 || worker >= workers) throw std::invalid_argument("TermAccumulator: bad worker index");
    }

    TermAccumulator& operator+=(const AdScalar& term) { return add(term, false); }
    TermAccumulator& operator-=(const AdScalar& term) { return add(term, true); }

    std::size_t terms() const { return count_; }
    std::size_t kept() const { return pos_.size() + neg_.size(); }
    TermSplit split() const { return TermSplit{count_, workers_}; }

    /// Sum of the kept terms as one CSum per sign.
    AdScalar result() const
    {
        if (neg_.empty()) return sum(pos_);
        if (pos_.empty()) return -sum(neg_);
        return sum(pos_) - sum(neg_);
    }

private:
    TermAccumulator& add(const AdScalar& term, bool negate)
    {
        if (count_++ % workers_ == worker_) (negate ? neg_ : pos_).push_back(term);
        return *this;
    }

    std::size_t worker_ = 0;
    std::size_t workers_ = 1;
    std::size_t count_ = 0;
    std::vector<AdScalar> pos_;
    std::vector<AdScalar> neg_;
};

namespace detail {

/// Runs job(w) for w in [0, count); worker 0 runs on the calling thread.
template <class Job>
void run_workers(std::size_t count, bool threaded, Job&& job)
{
    if (!threaded || count <= 1) {
        for (std::size_t w = 0; w < count; ++w) job(w);
        return;
    }
    std::vector<std::exception_ptr> errors(count);
    std::vector<std::thread> threads;
    threads.reserve(count - 1);
    for (std::size_t w = 1; w < count; ++w)
        threads.emplace_back([&, w] {
            try {
                job(w);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    try {
        job(0);
    } catch (...) {
        errors[0] = std::current_exception();
    }
    for (auto& t : threads) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

}  // namespace detail

}  // namespace alap
