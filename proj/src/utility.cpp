#include "fbmtc/utility.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace fbmtc {

UtilitySpec UtilitySpec::log_u() {
    UtilitySpec u;
    u.kind = Kind::log_utility;
    u.u = [](double x) { return std::log(x); };
    u.u_prime = [](double x) { return 1.0 / x; };
    u.u_prime_inverse = [](double y) { return 1.0 / y; };
    u.v_conjugate = [](double y) { return -std::log(y) - 1.0; };
    u.ae_upper = 0.0;
    return u;
}

UtilitySpec UtilitySpec::power_u(double alpha) {
    if (alpha == 0.0 || alpha >= 1.0)
        throw std::invalid_argument(
            "power utility needs alpha != 0, alpha < 1, got " +
            std::to_string(alpha));
    UtilitySpec u;
    u.kind = Kind::power_utility;
    u.alpha = alpha;
    u.u = [alpha](double x) { return std::pow(x, alpha) / alpha; };
    u.u_prime = [alpha](double x) { return std::pow(x, alpha - 1.0); };
    u.u_prime_inverse = [alpha](double y) {
        return std::pow(y, 1.0 / (alpha - 1.0));
    };
    u.v_conjugate = [alpha](double y) {
        return (1.0 / alpha - 1.0) * std::pow(y, alpha / (alpha - 1.0));
    };
    u.ae_upper = alpha > 0.0 ? alpha : 0.0;
    return u;
}

UtilitySpec UtilitySpec::custom_u(std::function<double(double)> u,
                                  std::function<double(double)> u_prime,
                                  std::function<double(double)> u_prime_inverse,
                                  std::function<double(double)> v_conjugate,
                                  std::optional<double> ae_upper) {
    UtilitySpec spec;
    spec.kind = Kind::custom;
    spec.u = std::move(u);
    spec.u_prime = std::move(u_prime);
    spec.u_prime_inverse = std::move(u_prime_inverse);
    spec.v_conjugate = std::move(v_conjugate);
    spec.ae_upper = ae_upper;
    return spec;
}

void UtilitySpec::validate_on_grid() const {
    double prev_u = -1e308;
    double prev_up = 1e308;
    for (double x = 1e-6; x < 1e7; x *= 4.0) {
        const double ux = u(x);
        const double upx = u_prime(x);
        if (!(ux > prev_u))
            throw std::invalid_argument("utility is not increasing at x=" +
                                        std::to_string(x));
        if (!(upx > 0.0) || !(upx < prev_up))
            throw std::invalid_argument(
                "marginal utility is not positive decreasing at x=" +
                std::to_string(x));
        const double round_trip = u_prime_inverse(upx);
        if (std::abs(round_trip - x) > 1e-6 * x)
            throw std::invalid_argument(
                "u_prime_inverse does not invert u_prime at x=" +
                std::to_string(x));
        prev_u = ux;
        prev_up = upx;
    }
    // Inada spot checks, scale-relative so flat power exponents still pass.
    if (!(u_prime(1e-12) > 10.0 * u_prime(1.0)))
        throw std::invalid_argument("Inada at 0 fails: U'(0+) not large");
    if (!(u_prime(1e12) < 0.1 * u_prime(1.0)))
        throw std::invalid_argument("Inada at infinity fails: U'(inf) not small");
}

}  // namespace fbmtc
