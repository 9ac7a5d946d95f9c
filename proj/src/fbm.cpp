#include "fbmtc/fbm.hpp"

#include <fftw3.h>

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>
#include <string>

#include "fbmtc/rng.hpp"

namespace fbmtc {

HurstParameter::HurstParameter(double v) : value(v) {
    if (!(v > 0.0) || !(v <= 1.0))
        throw std::invalid_argument("HurstParameter: H must be in (0, 1], got " +
                                    std::to_string(v));
}

ModelSpec::ModelSpec(double mu_, double sigma_, HurstParameter h,
                     double horizon_)
    : mu(mu_), sigma(sigma_), hurst(h), horizon(horizon_) {
    if (!(sigma > 0.0))
        throw std::invalid_argument("ModelSpec: sigma must be positive");
    if (!(horizon > 0.0))
        throw std::invalid_argument("ModelSpec: horizon must be positive");
}

double fbm_covariance(double s, double t, HurstParameter h) {
    if (s < 0.0 || t < 0.0)
        throw std::invalid_argument("fbm_covariance: times must be nonnegative");
    const double two_h = 2.0 * h.value;
    return 0.5 * (std::pow(s, two_h) + std::pow(t, two_h) -
                  std::pow(std::abs(t - s), two_h));
}

namespace {

Eigen::MatrixXd grid_covariance(const TimeGrid& grid, HurstParameter h) {
    const std::size_t n = grid.steps();
    Eigen::MatrixXd cov(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j <= i; ++j) {
            const double c = fbm_covariance(grid[i + 1], grid[j + 1], h);
            cov(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = c;
            cov(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) = c;
        }
    return cov;
}

}  // namespace

CholeskyFbmSampler::CholeskyFbmSampler(const TimeGrid& grid, HurstParameter h)
    : grid_(std::make_shared<TimeGrid>(grid)), n_(grid.steps()) {
    Eigen::MatrixXd cov = grid_covariance(grid, h);
    Eigen::LLT<Eigen::MatrixXd> llt(cov);
    if (llt.info() != Eigen::Success) {
        // One bounded repair attempt before giving up.
        const double jitter = 1e-12 * cov.diagonal().maxCoeff();
        cov.diagonal().array() += jitter;
        llt.compute(cov);
        if (llt.info() != Eigen::Success)
            throw std::runtime_error(
                "CholeskyFbmSampler: covariance matrix on the given grid is "
                "not positive definite (H=" +
                std::to_string(h.value) + ", " + std::to_string(n_) +
                " steps, horizon " + std::to_string(grid.horizon()) +
                "), even after diagonal jitter");
    }
    const Eigen::MatrixXd lower = llt.matrixL();
    factor_.assign(n_ * n_, 0.0);
    for (std::size_t i = 0; i < n_; ++i)
        for (std::size_t j = 0; j <= i; ++j)
            factor_[i * n_ + j] = lower(static_cast<Eigen::Index>(i),
                                        static_cast<Eigen::Index>(j));
}

GaussianPath CholeskyFbmSampler::sample(std::uint64_t seed,
                                        std::uint64_t path_index) const {
    GaussianStream normals(seed, path_index);
    std::vector<double> z(n_);
    for (auto& v : z) v = normals.next();
    GaussianPath path;
    path.grid = grid_;
    path.values.assign(n_ + 1, 0.0);
    for (std::size_t i = 0; i < n_; ++i) {
        double acc = 0.0;
        const double* row = factor_.data() + i * n_;
        for (std::size_t j = 0; j <= i; ++j) acc += row[j] * z[j];
        path.values[i + 1] = acc;
    }
    return path;
}

CirculantFbmSampler::CirculantFbmSampler(const TimeGrid& grid,
                                         HurstParameter h)
    : grid_(std::make_shared<TimeGrid>(grid)) {
    if (!grid.equally_spaced())
        throw std::invalid_argument(
            "CirculantFbmSampler: grid must be equally spaced");
    const std::size_t n = grid.steps();
    m_ = 2 * n;
    in_ = fftw_malloc(sizeof(fftw_complex) * m_);
    out_ = fftw_malloc(sizeof(fftw_complex) * m_);
    plan_ = fftw_plan_dft_1d(static_cast<int>(m_),
                             static_cast<fftw_complex*>(in_),
                             static_cast<fftw_complex*>(out_), FFTW_FORWARD,
                             FFTW_ESTIMATE);

    const double dt = grid.dt();
    const double two_h = 2.0 * h.value;
    const double scale = 0.5 * std::pow(dt, two_h);

    // fGn autocovariance gamma(k), embedded in a circulant vector of size 2n.
    auto gamma = [&](std::size_t k) {
        const double kk = static_cast<double>(k);
        return scale * (std::pow(kk + 1.0, two_h) - 2.0 * std::pow(kk, two_h) +
                        std::pow(std::abs(kk - 1.0), two_h));
    };
    auto* in = static_cast<fftw_complex*>(in_);
    auto* out = static_cast<fftw_complex*>(out_);
    for (std::size_t k = 0; k < m_; ++k) {
        in[k][0] = k <= n ? gamma(k) : gamma(m_ - k);
        in[k][1] = 0.0;
    }
    fftw_execute(static_cast<fftw_plan>(plan_));

    double max_eig = 0.0;
    for (std::size_t k = 0; k < m_; ++k) max_eig = std::max(max_eig, out[k][0]);
    const double tol = 1e-10 * max_eig;
    sqrt_eigenvalues_.resize(m_);
    for (std::size_t k = 0; k < m_; ++k) {
        double lambda = out[k][0];
        if (lambda < -tol)
            throw std::runtime_error(
                "CirculantFbmSampler: circulant embedding has a negative "
                "eigenvalue (" +
                std::to_string(lambda) +
                ") beyond tolerance; use the cholesky sampler for this grid");
        if (lambda < 0.0) lambda = 0.0;
        sqrt_eigenvalues_[k] = std::sqrt(lambda / static_cast<double>(m_));
    }
}

CirculantFbmSampler::~CirculantFbmSampler() {
    if (plan_) fftw_destroy_plan(static_cast<fftw_plan>(plan_));
    if (in_) fftw_free(in_);
    if (out_) fftw_free(out_);
}

GaussianPath CirculantFbmSampler::sample(std::uint64_t seed,
                                         std::uint64_t path_index) {
    GaussianStream normals(seed, path_index);
    const std::size_t n = m_ / 2;
    auto* in = static_cast<fftw_complex*>(in_);
    auto* out = static_cast<fftw_complex*>(out_);
    const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
    in[0][0] = sqrt_eigenvalues_[0] * normals.next();
    in[0][1] = 0.0;
    for (std::size_t k = 1; k < n; ++k) {
        const double a = normals.next();
        const double b = normals.next();
        const double s = sqrt_eigenvalues_[k] * inv_sqrt2;
        in[k][0] = s * a;
        in[k][1] = s * b;
        in[m_ - k][0] = s * a;
        in[m_ - k][1] = -s * b;
    }
    in[n][0] = sqrt_eigenvalues_[n] * normals.next();
    in[n][1] = 0.0;
    fftw_execute(static_cast<fftw_plan>(plan_));

    GaussianPath path;
    path.grid = grid_;
    path.values.assign(n + 1, 0.0);
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        acc += out[i][0];
        path.values[i + 1] = acc;
    }
    return path;
}

std::vector<GaussianPath> sample_fbm_paths(const TimeGrid& grid,
                                           HurstParameter h,
                                           std::size_t n_paths,
                                           std::uint64_t seed,
                                           FbmMethod method) {
    if (n_paths < 1)
        throw std::invalid_argument("sample_fbm_paths: need n_paths >= 1");
    std::vector<GaussianPath> paths;
    paths.reserve(n_paths);
    if (method == FbmMethod::cholesky) {
        CholeskyFbmSampler sampler(grid, h);
        for (std::size_t i = 0; i < n_paths; ++i)
            paths.push_back(sampler.sample(seed, i));
    } else {
        CirculantFbmSampler sampler(grid, h);
        for (std::size_t i = 0; i < n_paths; ++i)
            paths.push_back(sampler.sample(seed, i));
    }
    return paths;
}

std::vector<double> log_price_path(const GaussianPath& path,
                                   const ModelSpec& model) {
    if (std::abs(path.grid->horizon() - model.horizon) >
        1e-12 * std::max(1.0, model.horizon))
        throw std::invalid_argument(
            "log_price_path: grid horizon does not match model horizon");
    const auto& grid = *path.grid;
    std::vector<double> x(path.values.size());
    for (std::size_t i = 0; i < x.size(); ++i)
        x[i] = model.mu * grid[i] + model.sigma * path.values[i];
    return x;
}

PricePath fbs_price_path(const GaussianPath& path, const ModelSpec& model) {
    const std::vector<double> x = log_price_path(path, model);
    PricePath out;
    out.grid = path.grid;
    out.prices.resize(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (x[i] > 700.0)
            throw std::runtime_error(
                "fbs_price_path: exp overflow, log-price " +
                std::to_string(x[i]) + " at index " + std::to_string(i));
        out.prices[i] = std::exp(x[i]);
    }
    return out;
}

}  // namespace fbmtc
