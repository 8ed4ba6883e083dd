#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "mvlab/errors.hpp"

namespace mvlab {

inline double mean(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

inline double variance(std::span<const double> v) {
    if (v.size() < 2) return 0.0;
    const double m = mean(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return s / static_cast<double>(v.size() - 1);
}

inline double standard_error(std::span<const double> v) {
    if (v.size() < 2) return 0.0;
    return std::sqrt(variance(v) / static_cast<double>(v.size()));
}

struct LinearFit {
    double slope = 0.0;
    double intercept = 0.0;
};

inline LinearFit linear_fit(std::span<const double> x, std::span<const double> y) {
    require(x.size() == y.size() && x.size() >= 2, "invalid-parameter",
            "linear_fit needs two same-length samples");
    const double mx = mean(x), my = mean(y);
    double sxx = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxx += (x[i] - mx) * (x[i] - mx);
        sxy += (x[i] - mx) * (y[i] - my);
    }
    LinearFit f;
    f.slope = sxx > 0.0 ? sxy / sxx : 0.0;
    f.intercept = my - f.slope * mx;
    return f;
}

// Silverman's rule for a 1-D sample.
inline double silverman_bandwidth(std::span<const double> sample) {
    if (sample.size() < 2) return 0.0;
    const double sd = std::sqrt(variance(sample));
    std::vector<double> sorted(sample.begin(), sample.end());
    std::sort(sorted.begin(), sorted.end());
    const auto q = [&](double p) {
        const double idx = p * static_cast<double>(sorted.size() - 1);
        const std::size_t lo = static_cast<std::size_t>(idx);
        const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
        return sorted[lo] + (idx - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
    };
    const double iqr = q(0.75) - q(0.25);
    const double scale = (iqr > 0.0) ? std::min(sd, iqr / 1.349) : sd;
    return 0.9 * scale * std::pow(static_cast<double>(sample.size()), -0.2);
}

// Kahan-compensated sum; used where the spec pins tight tolerances on sums
// of many near-equal weights.
inline double kahan_sum(std::span<const double> v) {
    double s = 0.0, c = 0.0;
    for (double x : v) {
        const double y = x - c;
        const double t = s + y;
        c = (t - s) - y;
        s = t;
    }
    return s;
}

} // namespace mvlab
