#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "fbmtc/fbm.hpp"
#include "fbmtc/grid.hpp"

namespace fbmtc {

// delta-fluctuation times of a sampled path. tau_0 = 0; tau_{j+1} is the
// first grid time t > tau_j with |value(t) - value(tau_j)| >= delta
// (no interpolation, so the discrete count is a conservative undercount).
struct FluctuationRecord {
    double delta;
    std::vector<double> times;  // tau_0 = 0 included
    long count;                 // number of tau_j in (0, T]
};

FluctuationRecord fluctuation_times(std::span<const double> values,
                                    const TimeGrid& grid, double delta);

// Count only; same convention, no time bookkeeping.
long fluctuation_count(std::span<const double> values, double delta);

// floor(2|mu| T / delta) + 1, the number of delta/2-moves the drift t -> mu*t
// can contribute by time T.
long drift_budget(double mu, double horizon, double delta);

// Constants of the tail bound
// P[F >= n] <= c' exp(-c^{-1} delta^2 T^{-2H} n^{1+(2H /\ 1)}).
struct TailBoundParams {
    double c;
    double c_prime;
    HurstParameter hurst;

    TailBoundParams(double c_, double c_prime_, HurstParameter h);
};

double tail_bound_rhs(long n, double delta, double horizon,
                      const TailBoundParams& params);

// Empirical tail P_hat[F >= n] for n = 1..n_max over a path ensemble.
struct TailCurve {
    std::vector<long> n_values;
    std::vector<double> estimates;
    std::vector<double> standard_errors;
    std::size_t n_paths;
    double delta;
    double horizon;
    HurstParameter hurst;
    std::uint64_t seed;
};

TailCurve mc_tail_curve(const TimeGrid& grid, HurstParameter h, double delta,
                        long n_max, std::size_t n_paths, std::uint64_t seed,
                        FbmMethod method = FbmMethod::circulant);

// Build the curve from precomputed counts (shared by CLI and tests).
TailCurve tail_curve_from_counts(std::span<const long> counts, double delta,
                                 double horizon, HurstParameter h,
                                 std::uint64_t seed, long n_max);

// Least-squares fit of -log(estimate) against n^{1+(2H /\ 1)}. Points with
// fewer than `min_hits` hits or estimates outside (0,1) are excluded.
struct ScalingFit {
    double slope;
    double intercept;
    double r_squared;
    std::size_t points_used;
};

ScalingFit scaling_fit(const TailCurve& curve, std::size_t min_hits = 5);

enum class MomentKind { exponential, gaussian };

// Sample mean of exp(a F) or exp(a F^2) with jackknife standard error.
struct MomentEstimate {
    double estimate;
    double standard_error;
};

MomentEstimate moment_estimates(std::span<const long> counts, double a,
                                MomentKind kind);

}  // namespace fbmtc
