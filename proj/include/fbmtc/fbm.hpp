#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "fbmtc/grid.hpp"

namespace fbmtc {

struct HurstParameter {
    double value;

    explicit HurstParameter(double v);
};

// One sampled fBm trajectory; values[0] = 0.
struct GaussianPath {
    std::shared_ptr<const TimeGrid> grid;
    std::vector<double> values;
};

// Fractional Black-Scholes model S_t = exp(mu t + sigma B^H_t).
struct ModelSpec {
    double mu;
    double sigma;
    HurstParameter hurst;
    double horizon;

    ModelSpec(double mu_, double sigma_, HurstParameter h, double horizon_);
};

struct PricePath {
    std::shared_ptr<const TimeGrid> grid;
    std::vector<double> prices;
};

// Cov(B^H_s, B^H_t) = (s^{2H} + t^{2H} - |t-s|^{2H}) / 2.
double fbm_covariance(double s, double t, HurstParameter h);

enum class FbmMethod { cholesky, circulant };

// Exact sampler backed by a Cholesky factor of the grid covariance; works on
// any grid, O(n^3) setup and O(n^2) per path.
class CholeskyFbmSampler {
public:
    CholeskyFbmSampler(const TimeGrid& grid, HurstParameter h);

    GaussianPath sample(std::uint64_t seed, std::uint64_t path_index) const;
    const std::shared_ptr<const TimeGrid>& grid() const { return grid_; }

private:
    std::shared_ptr<const TimeGrid> grid_;
    std::vector<double> factor_;  // lower triangle, row-major, n x n
    std::size_t n_;
};

// Exact sampler via circulant embedding of the fGn covariance (Davies-Harte);
// requires an equally spaced grid, O(n log n) per path. Holds one FFT plan
// and scratch buffers, so a sampler instance is not shareable across threads;
// output depends only on (seed, path_index).
class CirculantFbmSampler {
public:
    CirculantFbmSampler(const TimeGrid& grid, HurstParameter h);
    ~CirculantFbmSampler();
    CirculantFbmSampler(const CirculantFbmSampler&) = delete;
    CirculantFbmSampler& operator=(const CirculantFbmSampler&) = delete;

    GaussianPath sample(std::uint64_t seed, std::uint64_t path_index);
    const std::shared_ptr<const TimeGrid>& grid() const { return grid_; }

private:
    std::shared_ptr<const TimeGrid> grid_;
    std::vector<double> sqrt_eigenvalues_;  // sqrt(lambda_k / m)
    std::size_t m_;                         // embedding size, 2 * steps
    void* in_ = nullptr;                    // fftw_complex buffers
    void* out_ = nullptr;
    void* plan_ = nullptr;
};

std::vector<GaussianPath> sample_fbm_paths(const TimeGrid& grid,
                                           HurstParameter h,
                                           std::size_t n_paths,
                                           std::uint64_t seed,
                                           FbmMethod method);

// X_i = mu * t_i + sigma * B_i.
std::vector<double> log_price_path(const GaussianPath& path,
                                   const ModelSpec& model);

// S_i = exp(X_i); strictly positive, S_0 = 1.
PricePath fbs_price_path(const GaussianPath& path, const ModelSpec& model);

}  // namespace fbmtc
