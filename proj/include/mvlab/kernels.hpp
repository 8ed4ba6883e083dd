#pragma once

#include <cstdint>
#include <span>

#include "mvlab/coefficients.hpp"

namespace mvlab::kernels {

// One Euler-Maruyama step for the whole ensemble:
//   X_{k+1} = X_k + b_t(X_k, drift_measure) dt + sigma_t(X_k, diffusion_measure) dW,
// with the per-step drift cap |b| dt <= drift_cap (taming device for singular
// drift; <= 0 disables). Noise comes from the counter RNG keyed by
// (seed, particle, step), so results do not depend on scheduling.
struct EmStepArgs {
    const CoefficientSet* coeffs = nullptr;
    double t = 0.0;
    double dt = 0.0;
    const EmpiricalMeasure* drift_measure = nullptr;
    const EmpiricalMeasure* diffusion_measure = nullptr;
    std::uint64_t seed = 0;
    std::uint64_t step = 0;
    double drift_cap = 0.0;
};

// Serial reference implementation.
void em_step_serial(const EmStepArgs& args, const double* x_in, double* x_out,
                    std::int64_t n, unsigned char* capped, std::int64_t* first_bad);

// OpenMP implementation; bitwise-identical to the serial one.
void em_step_omp(const EmStepArgs& args, const double* x_in, double* x_out,
                 std::int64_t n, unsigned char* capped, std::int64_t* first_bad);

// Dispatch on parallel::mode().
void em_step(const EmStepArgs& args, const double* x_in, double* x_out,
             std::int64_t n, unsigned char* capped, std::int64_t* first_bad);

// Gaussian KDE of a 1-D sample evaluated at query points.
void kde_eval_serial(std::span<const double> sample, double bandwidth,
                     std::span<const double> queries, std::span<double> out);
void kde_eval_omp(std::span<const double> sample, double bandwidth,
                  std::span<const double> queries, std::span<double> out);
void kde_eval(std::span<const double> sample, double bandwidth,
              std::span<const double> queries, std::span<double> out);

} // namespace mvlab::kernels
