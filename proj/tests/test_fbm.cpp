#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <vector>

#include "doctest.h"
#include "fbmtc/fbm.hpp"
#include "fbmtc/rng.hpp"

using namespace fbmtc;

TEST_CASE("philox known-answer vectors") {
    // Reference vectors for Philox4x32-10 from the Random123 test suite.
    {
        Philox4x32 gen(0, 0);
        const auto block = gen(0);
        CHECK(block[0] == 0x6627e8d5u);
        CHECK(block[1] == 0xe169c58du);
        CHECK(block[2] == 0xbc57ac4cu);
        CHECK(block[3] == 0x9b00dbd8u);
    }
    {
        Philox4x32 gen(0xffffffffffffffffull, 0xffffffffffffffffull);
        const auto block = gen(0xffffffffffffffffull);
        CHECK(block[0] == 0x408f276du);
        CHECK(block[1] == 0x41c83b0eu);
        CHECK(block[2] == 0xa20bc7c6u);
        CHECK(block[3] == 0x6d5451fdu);
    }
}

TEST_CASE("gaussian stream moments") {
    GaussianStream stream(42, 7);
    const std::size_t n = 200000;
    double sum = 0, sum2 = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double z = stream.next();
        sum += z;
        sum2 += z * z;
    }
    const double mean = sum / n;
    const double var = sum2 / n - mean * mean;
    CHECK(std::abs(mean) < 4.0 / std::sqrt(static_cast<double>(n)));
    CHECK(std::abs(var - 1.0) < 4.0 * std::sqrt(2.0 / static_cast<double>(n)));
}

TEST_CASE("fbm covariance closed forms") {
    const HurstParameter h34(0.75);
    // Var(B_t) = t^{2H}
    CHECK(fbm_covariance(2.0, 2.0, h34) ==
          doctest::Approx(std::pow(2.0, 1.5)).epsilon(1e-14));
    // Brownian case: min(s, t)
    const HurstParameter h12(0.5);
    CHECK(fbm_covariance(0.3, 1.7, h12) == doctest::Approx(0.3).epsilon(1e-14));
    CHECK(fbm_covariance(1.7, 0.3, h12) == doctest::Approx(0.3).epsilon(1e-14));
    // Hand evaluation: (1 + 2^{1.5} - 1)/2 = 2^{0.5}
    CHECK(fbm_covariance(1.0, 2.0, h34) ==
          doctest::Approx(std::sqrt(2.0)).epsilon(1e-14));
    CHECK_THROWS_AS(fbm_covariance(-0.1, 1.0, h12), std::invalid_argument);
}

TEST_CASE("increment variance identity") {
    // Var(B_t - B_s) = (t-s)^{2H} from the covariance, to 1e-12 relative.
    for (double h : {0.25, 0.5, 0.75, 0.9}) {
        const HurstParameter hp(h);
        for (auto [s, t] : std::vector<std::pair<double, double>>{
                 {0.0, 0.5}, {0.25, 1.0}, {0.7, 2.3}, {1.0, 1.5}}) {
            const double var = fbm_covariance(t, t, hp) +
                               fbm_covariance(s, s, hp) -
                               2.0 * fbm_covariance(s, t, hp);
            const double expected = std::pow(t - s, 2.0 * h);
            CHECK(std::abs(var - expected) <= 1e-12 * expected);
        }
    }
}

TEST_CASE("disjoint increment covariance sign by hurst regime") {
    // H < 1/2: nonpositive; H > 1/2: nonnegative, over ordered quadruples.
    auto increment_cov = [](double s, double t, double u, double v, double h) {
        const HurstParameter hp(h);
        return fbm_covariance(t, v, hp) - fbm_covariance(t, u, hp) -
               fbm_covariance(s, v, hp) + fbm_covariance(s, u, hp);
    };
    std::vector<std::array<double, 4>> quads = {
        {0.0, 0.3, 0.5, 0.9}, {0.1, 0.2, 0.25, 0.8}, {0.0, 1.0, 1.5, 3.0}};
    for (const auto& q : quads) {
        CHECK(increment_cov(q[0], q[1], q[2], q[3], 0.3) <= 1e-14);
        CHECK(increment_cov(q[0], q[1], q[2], q[3], 0.7) >= -1e-14);
        CHECK(std::abs(increment_cov(q[0], q[1], q[2], q[3], 0.5)) <= 1e-14);
    }
}

namespace {

struct PathStats {
    std::vector<double> variance;  // per grid point, excluding t=0
};

PathStats grid_variances(const std::vector<GaussianPath>& paths) {
    const std::size_t n = paths.front().values.size() - 1;
    PathStats stats;
    stats.variance.assign(n, 0.0);
    for (std::size_t j = 1; j <= n; ++j) {
        double sum = 0, sum2 = 0;
        for (const auto& p : paths) {
            sum += p.values[j];
            sum2 += p.values[j] * p.values[j];
        }
        const double np = static_cast<double>(paths.size());
        const double mean = sum / np;
        stats.variance[j - 1] = sum2 / np - mean * mean;
    }
    return stats;
}

}  // namespace

TEST_CASE("samplers are deterministic and substream-stable") {
    const TimeGrid grid = TimeGrid::uniform(1.0, 16);
    const HurstParameter h(0.7);
    auto a = sample_fbm_paths(grid, h, 3, 99, FbmMethod::cholesky);
    auto b = sample_fbm_paths(grid, h, 3, 99, FbmMethod::cholesky);
    for (std::size_t i = 0; i < a.size(); ++i)
        CHECK(a[i].values == b[i].values);

    // Path i is a pure function of (seed, i): a larger batch reproduces it.
    auto big = sample_fbm_paths(grid, h, 5, 99, FbmMethod::cholesky);
    for (std::size_t i = 0; i < a.size(); ++i)
        CHECK(a[i].values == big[i].values);

    CirculantFbmSampler circ(grid, h);
    auto c1 = circ.sample(99, 2);
    auto c2 = circ.sample(99, 2);
    CHECK(c1.values == c2.values);
}

TEST_CASE("brownian increments are independent with variance dt") {
    const std::size_t steps = 8;
    const TimeGrid grid = TimeGrid::uniform(1.0, steps);
    const auto paths =
        sample_fbm_paths(grid, HurstParameter(0.5), 20000, 31, FbmMethod::cholesky);
    const double dt = 1.0 / static_cast<double>(steps);
    // Increment variances.
    for (std::size_t j = 0; j < steps; ++j) {
        double sum = 0, sum2 = 0;
        for (const auto& p : paths) {
            const double d = p.values[j + 1] - p.values[j];
            sum += d;
            sum2 += d * d;
        }
        const double np = static_cast<double>(paths.size());
        const double var = sum2 / np - (sum / np) * (sum / np);
        CHECK(std::abs(var - dt) < 5.0 * dt * std::sqrt(2.0 / np));
    }
    // Pairwise increment correlation of the first two increments.
    double s01 = 0;
    for (const auto& p : paths) {
        const double d0 = p.values[1] - p.values[0];
        const double d1 = p.values[2] - p.values[1];
        s01 += d0 * d1;
    }
    const double np = static_cast<double>(paths.size());
    CHECK(std::abs(s01 / np) < 5.0 * dt / std::sqrt(np));
}

TEST_CASE("sampler variance matches t^{2H} for both methods") {
    const TimeGrid grid = TimeGrid::uniform(1.0, 64);
    const std::size_t n_paths = 10000;
    for (double hv : {0.25, 0.75}) {
        const HurstParameter h(hv);
        for (auto method : {FbmMethod::cholesky, FbmMethod::circulant}) {
            const auto paths = sample_fbm_paths(grid, h, n_paths, 17, method);
            const auto stats = grid_variances(paths);
            for (std::size_t j = 1; j <= grid.steps(); ++j) {
                const double exact = std::pow(grid[j], 2.0 * hv);
                const double se =
                    exact * std::sqrt(2.0 / static_cast<double>(n_paths));
                CHECK(std::abs(stats.variance[j - 1] - exact) < 4.0 * se);
            }
        }
    }
}

TEST_CASE("circulant requires equally spaced grid") {
    const TimeGrid grid = TimeGrid::from_points({0.0, 0.1, 0.5, 1.0});
    CHECK_THROWS_AS(CirculantFbmSampler(grid, HurstParameter(0.5)),
                    std::invalid_argument);
    // Cholesky handles arbitrary grids.
    CholeskyFbmSampler chol(grid, HurstParameter(0.6));
    const auto p = chol.sample(5, 0);
    CHECK(p.values.size() == 4);
    CHECK(p.values[0] == 0.0);
}

TEST_CASE("H = 1 degenerate case gives B_t = t Z") {
    // The rank-one covariance goes through the jitter repair, so the sampled
    // path equals t * Z only up to sqrt(jitter) noise.
    const TimeGrid grid = TimeGrid::uniform(2.0, 4);
    CholeskyFbmSampler sampler(grid, HurstParameter(1.0));
    for (std::uint64_t i = 0; i < 10; ++i) {
        const auto p = sampler.sample(123, i);
        const double z = p.values.back() / grid.horizon();
        for (std::size_t j = 0; j < grid.size(); ++j)
            CHECK(std::abs(p.values[j] - z * grid[j]) < 1e-4);
    }
}

TEST_CASE("log and price paths") {
    auto grid = std::make_shared<TimeGrid>(TimeGrid::from_points({0.0, 0.5, 1.0}));
    GaussianPath path{grid, {0.0, 0.0, 0.0}};
    const ModelSpec drift_only(1.0, 1.0, HurstParameter(0.5), 1.0);
    const auto x = log_price_path(path, drift_only);
    CHECK(x == std::vector<double>{0.0, 0.5, 1.0});

    // mu = 0, sigma = 1 reproduces the raw path.
    GaussianPath wiggly{grid, {0.0, -0.3, 0.8}};
    const ModelSpec raw(0.0, 1.0, HurstParameter(0.5), 1.0);
    CHECK(log_price_path(wiggly, raw) == wiggly.values);

    // exp(X) is the price path, pointwise; S_0 = 1.
    const ModelSpec model(0.05, 0.2, HurstParameter(0.5), 1.0);
    GaussianPath unit{grid, {0.0, 0.4, 1.0}};
    const auto prices = fbs_price_path(unit, model);
    const auto logs = log_price_path(unit, model);
    CHECK(prices.prices[0] == 1.0);
    for (std::size_t i = 0; i < logs.size(); ++i)
        CHECK(prices.prices[i] == doctest::Approx(std::exp(logs[i])));
    // Hand value: mu=0.05, sigma=0.2, B_1 = 1 -> S_1 = exp(0.25).
    CHECK(prices.prices[2] == doctest::Approx(std::exp(0.25)).epsilon(1e-12));

    // Horizon mismatch.
    const ModelSpec other(0.0, 1.0, HurstParameter(0.5), 2.0);
    CHECK_THROWS_AS(log_price_path(unit, other), std::invalid_argument);
}

TEST_CASE("invalid domain values are rejected") {
    CHECK_THROWS_AS(HurstParameter(0.0), std::invalid_argument);
    CHECK_THROWS_AS(HurstParameter(1.5), std::invalid_argument);
    CHECK_THROWS_AS(ModelSpec(0.0, -1.0, HurstParameter(0.5), 1.0),
                    std::invalid_argument);
    CHECK_THROWS_AS(TimeGrid::uniform(-1.0, 4), std::invalid_argument);
    CHECK_THROWS_AS(TimeGrid::from_points({0.0, 0.5, 0.4}),
                    std::invalid_argument);
}
