// Benchmark comparing the serial reference kernels against their OpenMP
// variants. Usage: mvlab_bench [particles] [steps] [kde_sample] [kde_queries]
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <iostream>
#include <vector>

#include "mvlab/coefficients.hpp"
#include "mvlab/kernels.hpp"
#include "mvlab/parallel.hpp"
#include "mvlab/rng.hpp"

using clock_type = std::chrono::steady_clock;

namespace {

double seconds_since(clock_type::time_point t0) {
    return std::chrono::duration<double>(clock_type::now() - t0).count();
}

double run_em(int n, int steps, bool omp, double* checksum) {
    using namespace mvlab;
    const CoefficientSet coeffs = preset("bump_drift_mu_dependent");
    std::vector<double> cur(n, 0.0), next(n);
    std::vector<unsigned char> capped(n);
    const double dt = 1.0 / steps;
    const auto t0 = clock_type::now();
    for (int k = 0; k < steps; ++k) {
        const EmpiricalMeasure law = EmpiricalMeasure::uniform(1, cur);
        kernels::EmStepArgs args;
        args.coeffs = &coeffs;
        args.t = k * dt;
        args.dt = dt;
        args.drift_measure = &law;
        args.diffusion_measure = &law;
        args.seed = 42;
        args.step = static_cast<std::uint64_t>(k);
        args.drift_cap = 10.0 * std::sqrt(coeffs.K * dt);
        std::int64_t bad = -1;
        if (omp)
            kernels::em_step_omp(args, cur.data(), next.data(), n, capped.data(), &bad);
        else
            kernels::em_step_serial(args, cur.data(), next.data(), n, capped.data(), &bad);
        std::swap(cur, next);
    }
    const double el = seconds_since(t0);
    double s = 0.0;
    for (double x : cur) s += x;
    *checksum = s;
    return el;
}

double run_kde(int n, int nq, bool omp, double* checksum) {
    using namespace mvlab;
    std::vector<double> sample(n), queries(nq), out(nq);
    CounterRng rng(7, 0, 0);
    for (int i = 0; i < n; ++i) sample[i] = rng.normal();
    for (int j = 0; j < nq; ++j) queries[j] = -3.0 + 6.0 * j / (nq - 1.0);
    const auto t0 = clock_type::now();
    if (omp)
        kernels::kde_eval_omp(sample, 0.05, queries, out);
    else
        kernels::kde_eval_serial(sample, 0.05, queries, out);
    const double el = seconds_since(t0);
    double s = 0.0;
    for (double v : out) s += v;
    *checksum = s;
    return el;
}

} // namespace

int main(int argc, char** argv) {
    const int particles = argc > 1 ? std::atoi(argv[1]) : 200000;
    const int steps = argc > 2 ? std::atoi(argv[2]) : 50;
    const int kde_n = argc > 3 ? std::atoi(argv[3]) : 400000;
    const int kde_q = argc > 4 ? std::atoi(argv[4]) : 512;

    std::cout << "kernel,n,steps,serial_s,omp_s,workers,speedup,identical\n";

    double cs = 0.0, co = 0.0;
    const double ts = run_em(particles, steps, false, &cs);
    const double to = run_em(particles, steps, true, &co);
    std::cout << "em_step," << particles << "," << steps << "," << ts << "," << to << ","
              << mvlab::parallel::workers() << "," << ts / to << ","
              << (cs == co ? "yes" : "NO") << "\n";

    const double ks = run_kde(kde_n, kde_q, false, &cs);
    const double ko = run_kde(kde_n, kde_q, true, &co);
    std::cout << "kde_eval," << kde_n << "," << kde_q << "," << ks << "," << ko << ","
              << mvlab::parallel::workers() << "," << ks / ko << ","
              << (cs == co ? "yes" : "NO") << "\n";
    return 0;
}
