#include "fbmtc/fluctuation.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace fbmtc {

FluctuationRecord fluctuation_times(std::span<const double> values,
                                    const TimeGrid& grid, double delta) {
    if (!(delta > 0.0))
        throw std::invalid_argument("fluctuation_times: delta must be positive");
    if (values.size() != grid.size())
        throw std::invalid_argument(
            "fluctuation_times: values and grid size mismatch");
    for (double v : values)
        if (!std::isfinite(v))
            throw std::invalid_argument(
                "fluctuation_times: values must be finite");

    FluctuationRecord rec;
    rec.delta = delta;
    rec.times.push_back(grid[0]);
    rec.count = 0;
    double anchor = values[0];
    for (std::size_t i = 1; i < values.size(); ++i) {
        if (std::abs(values[i] - anchor) >= delta) {
            anchor = values[i];
            rec.times.push_back(grid[i]);
            ++rec.count;
        }
    }
    return rec;
}

long fluctuation_count(std::span<const double> values, double delta) {
    if (!(delta > 0.0))
        throw std::invalid_argument("fluctuation_count: delta must be positive");
    long count = 0;
    double anchor = values.empty() ? 0.0 : values[0];
    for (std::size_t i = 1; i < values.size(); ++i) {
        const double d = values[i] - anchor;
        if (d >= delta || d <= -delta) {
            anchor = values[i];
            ++count;
        }
    }
    return count;
}

long drift_budget(double mu, double horizon, double delta) {
    if (!(delta > 0.0) || !(horizon > 0.0))
        throw std::invalid_argument(
            "drift_budget: delta and horizon must be positive");
    return static_cast<long>(std::floor(2.0 * std::abs(mu) * horizon / delta)) +
           1;
}

TailBoundParams::TailBoundParams(double c_, double c_prime_, HurstParameter h)
    : c(c_), c_prime(c_prime_), hurst(h) {
    if (!(c > 0.0) || !(c_prime > 0.0))
        throw std::invalid_argument(
            "TailBoundParams: constants must be positive");
}

double tail_bound_rhs(long n, double delta, double horizon,
                      const TailBoundParams& params) {
    if (n < 1) throw std::invalid_argument("tail_bound_rhs: need n >= 1");
    const double exponent = 1.0 + std::min(2.0 * params.hurst.value, 1.0);
    const double arg = delta * delta *
                       std::pow(horizon, -2.0 * params.hurst.value) *
                       std::pow(static_cast<double>(n), exponent);
    return params.c_prime * std::exp(-arg / params.c);
}

TailCurve tail_curve_from_counts(std::span<const long> counts, double delta,
                                 double horizon, HurstParameter h,
                                 std::uint64_t seed, long n_max) {
    TailCurve curve{{}, {}, {}, counts.size(), delta, horizon, h, seed};
    const double n_paths = static_cast<double>(counts.size());
    for (long n = 1; n <= n_max; ++n) {
        long hits = 0;
        for (long c : counts)
            if (c >= n) ++hits;
        const double p = static_cast<double>(hits) / n_paths;
        curve.n_values.push_back(n);
        curve.estimates.push_back(p);
        curve.standard_errors.push_back(std::sqrt(p * (1.0 - p) / n_paths));
    }
    return curve;
}

TailCurve mc_tail_curve(const TimeGrid& grid, HurstParameter h, double delta,
                        long n_max, std::size_t n_paths, std::uint64_t seed,
                        FbmMethod method) {
    if (n_paths < 100)
        throw std::invalid_argument("mc_tail_curve: need n_paths >= 100");
    std::vector<long> counts(n_paths);
    if (method == FbmMethod::cholesky) {
        CholeskyFbmSampler sampler(grid, h);
        for (std::size_t i = 0; i < n_paths; ++i)
            counts[i] = fluctuation_count(sampler.sample(seed, i).values, delta);
    } else {
        CirculantFbmSampler sampler(grid, h);
        for (std::size_t i = 0; i < n_paths; ++i)
            counts[i] = fluctuation_count(sampler.sample(seed, i).values, delta);
    }
    return tail_curve_from_counts(counts, delta, grid.horizon(), h, seed,
                                  n_max);
}

ScalingFit scaling_fit(const TailCurve& curve, std::size_t min_hits) {
    const double exponent = 1.0 + std::min(2.0 * curve.hurst.value, 1.0);
    std::vector<double> xs, ys;
    for (std::size_t i = 0; i < curve.n_values.size(); ++i) {
        const double p = curve.estimates[i];
        const double hits = p * static_cast<double>(curve.n_paths);
        if (p <= 0.0 || p >= 1.0) continue;
        if (hits < static_cast<double>(min_hits) - 0.5) continue;
        xs.push_back(std::pow(static_cast<double>(curve.n_values[i]), exponent));
        ys.push_back(-std::log(p));
    }
    if (xs.size() < 3)
        throw std::runtime_error(
            "scaling_fit: only " + std::to_string(xs.size()) +
            " usable tail points; run more paths or adjust delta");

    const double n = static_cast<double>(xs.size());
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        sx += xs[i];
        sy += ys[i];
        sxx += xs[i] * xs[i];
        sxy += xs[i] * ys[i];
    }
    const double denom = n * sxx - sx * sx;
    ScalingFit fit;
    fit.points_used = xs.size();
    if (denom == 0.0) {
        fit.slope = 0.0;
        fit.intercept = sy / n;
        fit.r_squared = 1.0;
        return fit;
    }
    fit.slope = (n * sxy - sx * sy) / denom;
    fit.intercept = (sy - fit.slope * sx) / n;
    double ss_res = 0, ss_tot = 0;
    const double mean_y = sy / n;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const double pred = fit.slope * xs[i] + fit.intercept;
        ss_res += (ys[i] - pred) * (ys[i] - pred);
        ss_tot += (ys[i] - mean_y) * (ys[i] - mean_y);
    }
    fit.r_squared = ss_tot == 0.0 ? 1.0 : 1.0 - ss_res / ss_tot;
    return fit;
}

MomentEstimate moment_estimates(std::span<const long> counts, double a,
                                MomentKind kind) {
    if (counts.empty())
        throw std::invalid_argument("moment_estimates: counts must be nonempty");
    long max_count = 0;
    for (long c : counts) max_count = std::max(max_count, c);
    const double fmax = static_cast<double>(max_count);
    const double max_arg =
        kind == MomentKind::exponential ? a * fmax : a * fmax * fmax;
    if (max_arg > 700.0)
        throw std::runtime_error(
            "moment_estimates: exp overflow, largest count " +
            std::to_string(max_count) + " with a=" + std::to_string(a));

    const std::size_t n = counts.size();
    std::vector<double> terms(n);
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double f = static_cast<double>(counts[i]);
        terms[i] =
            std::exp(kind == MomentKind::exponential ? a * f : a * f * f);
        sum += terms[i];
    }
    MomentEstimate est;
    est.estimate = sum / static_cast<double>(n);
    if (n == 1) {
        est.standard_error = 0.0;
        return est;
    }
    // Jackknife over leave-one-out means.
    const double nn = static_cast<double>(n);
    double ss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double loo = (sum - terms[i]) / (nn - 1.0);
        ss += (loo - est.estimate) * (loo - est.estimate);
    }
    est.standard_error = std::sqrt((nn - 1.0) / nn * ss);
    return est;
}

}  // namespace fbmtc
