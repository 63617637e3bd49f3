#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>

namespace alap {

inline double max_abs(std::span<const double> x)
{
    double m = 0;
    for (double v : x) m = std::max(m, std::abs(v));
    return m;
}

/// Relative sup-norm distance r(x,y) = 2|x-y|_inf / (|x|_inf + |y|_inf).
/// Returns 0 when both vectors are identically zero.
inline double relative_distance(std::span<const double> x, std::span<const double> y)
{
    if (x.size() != y.size()) throw std::invalid_argument("relative_distance: size mismatch");
    double diff = 0;
    for (std::size_t i = 0; i < x.size(); ++i) diff = std::max(diff, std::abs(x[i] - y[i]));
    const double scale = max_abs(x) + max_abs(y);
    if (scale == 0) return diff == 0 ? 0.0 : INFINITY;
    return 2 * diff / scale;
}

inline double relative_distance(double x, double y)
{
    return relative_distance(std::span<const double>(&x, 1), std::span<const double>(&y, 1));
}

}  // namespace alap
