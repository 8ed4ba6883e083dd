#include "mvlab/kernels.hpp"

#include <atomic>
#include <cmath>
#include <vector>

#include "mvlab/parallel.hpp"
#include "mvlab/rng.hpp"

namespace mvlab::kernels {

namespace {

struct Scratch {
    std::vector<double> b, dw, sig;
    Scratch(int d, int m) : b(d), dw(m), sig(static_cast<std::size_t>(d) * m) {}
};

// Advance one particle; returns true when the drift cap engaged. Writes -1
// into *bad when a non-finite coordinate shows up.
inline bool step_one(const EmStepArgs& a, std::int64_t i, const double* x_in, double* x_out,
                     Scratch& s, bool& bad) {
    const int d = a.coeffs->dim;
    const int m = a.coeffs->brownian_dim;
    const double* x = x_in + static_cast<std::size_t>(i) * d;
    double* y = x_out + static_cast<std::size_t>(i) * d;
    const std::span<const double> xs{x, static_cast<std::size_t>(d)};

    a.coeffs->drift(a.t, xs, *a.drift_measure, s.b);
    bool capped = false;
    double bn = 0.0;
    for (int c = 0; c < d; ++c) bn += s.b[c] * s.b[c];
    bn = std::sqrt(bn);
    if (a.drift_cap > 0.0 && bn * a.dt > a.drift_cap) {
        const double scale = a.drift_cap / (bn * a.dt);
        for (int c = 0; c < d; ++c) s.b[c] *= scale;
        capped = true;
    }

    a.coeffs->diffusion(a.t, xs, *a.diffusion_measure, MatView{s.sig.data(), d, m});

    CounterRng rng = noise_rng(a.seed, static_cast<std::uint64_t>(i), a.step);
    const double sq = std::sqrt(a.dt);
    for (int c = 0; c < m; ++c) s.dw[c] = sq * rng.normal();

    for (int c = 0; c < d; ++c) {
        double diff = 0.0;
        for (int k = 0; k < m; ++k) diff += s.sig[static_cast<std::size_t>(c) * m + k] * s.dw[k];
        y[c] = x[c] + s.b[c] * a.dt + diff;
        if (!std::isfinite(y[c])) bad = true;
    }
    return capped;
}

} // namespace

void em_step_serial(const EmStepArgs& args, const double* x_in, double* x_out,
                    std::int64_t n, unsigned char* capped, std::int64_t* first_bad) {
    Scratch s(args.coeffs->dim, args.coeffs->brownian_dim);
    *first_bad = -1;
    for (std::int64_t i = 0; i < n; ++i) {
        bool bad = false;
        capped[i] = step_one(args, i, x_in, x_out, s, bad) ? 1 : 0;
        if (bad && *first_bad < 0) *first_bad = i;
    }
}

void em_step_omp(const EmStepArgs& args, const double* x_in, double* x_out,
                 std::int64_t n, unsigned char* capped, std::int64_t* first_bad) {
#ifdef _OPENMP
    std::atomic<std::int64_t> bad_idx{-1};
    const int nw = parallel::workers();
#pragma omp parallel num_threads(nw)
    {
        Scratch s(args.coeffs->dim, args.coeffs->brownian_dim);
#pragma omp for schedule(static)
        for (std::int64_t i = 0; i < n; ++i) {
            bool bad = false;
            capped[i] = step_one(args, i, x_in, x_out, s, bad) ? 1 : 0;
            if (bad) {
                std::int64_t prev = bad_idx.load();
                while ((prev < 0 || i < prev) && !bad_idx.compare_exchange_weak(prev, i)) {
                }
            }
        }
    }
    *first_bad = bad_idx.load();
#else
    em_step_serial(args, x_in, x_out, n, capped, first_bad);
#endif
}

void em_step(const EmStepArgs& args, const double* x_in, double* x_out, std::int64_t n,
             unsigned char* capped, std::int64_t* first_bad) {
    if (parallel::mode() == parallel::Mode::openmp)
        em_step_omp(args, x_in, x_out, n, capped, first_bad);
    else
        em_step_serial(args, x_in, x_out, n, capped, first_bad);
}

namespace {
inline double kde_point(std::span<const double> sample, double inv_h, double norm, double x) {
    double acc = 0.0;
    for (double s : sample) {
        const double u = (x - s) * inv_h;
        acc += std::exp(-0.5 * u * u);
    }
    return acc * norm;
}
} // namespace

void kde_eval_serial(std::span<const double> sample, double bandwidth,
                     std::span<const double> queries, std::span<double> out) {
    const double inv_h = 1.0 / bandwidth;
    const double norm = inv_h / (std::sqrt(2.0 * M_PI) * static_cast<double>(sample.size()));
    for (std::size_t j = 0; j < queries.size(); ++j)
        out[j] = kde_point(sample, inv_h, norm, queries[j]);
}

void kde_eval_omp(std::span<const double> sample, double bandwidth,
                  std::span<const double> queries, std::span<double> out) {
#ifdef _OPENMP
    const double inv_h = 1.0 / bandwidth;
    const double norm = inv_h / (std::sqrt(2.0 * M_PI) * static_cast<double>(sample.size()));
    const int nw = parallel::workers();
#pragma omp parallel for schedule(static) num_threads(nw)
    for (std::int64_t j = 0; j < static_cast<std::int64_t>(queries.size()); ++j)
        out[j] = kde_point(sample, inv_h, norm, queries[j]);
#else
    kde_eval_serial(sample, bandwidth, queries, out);
#endif
}

void kde_eval(std::span<const double> sample, double bandwidth,
              std::span<const double> queries, std::span<double> out) {
    if (parallel::mode() == parallel::Mode::openmp)
        kde_eval_omp(sample, bandwidth, queries, out);
    else
        kde_eval_serial(sample, bandwidth, queries, out);
}

} // namespace mvlab::kernels
