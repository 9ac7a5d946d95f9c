#pragma once

#include <functional>
#include <optional>

namespace fbmtc {

// Utility on (0, inf): increasing, strictly concave, Inada at both ends.
// v_conjugate is the Legendre transform V(y) = sup_x { U(x) - x y }.
struct UtilitySpec {
    enum class Kind { log_utility, power_utility, custom };

    Kind kind;
    double alpha = 0.0;  // power exponent, alpha != 0, alpha < 1
    std::function<double(double)> u;
    std::function<double(double)> u_prime;
    std::function<double(double)> u_prime_inverse;
    std::function<double(double)> v_conjugate;
    std::optional<double> ae_upper;  // asymptotic elasticity bound

    static UtilitySpec log_u();
    static UtilitySpec power_u(double alpha);
    static UtilitySpec custom_u(std::function<double(double)> u,
                                std::function<double(double)> u_prime,
                                std::function<double(double)> u_prime_inverse,
                                std::function<double(double)> v_conjugate,
                                std::optional<double> ae_upper = std::nullopt);

    // Spot checks of concavity, monotonicity and the Inada limits on a
    // logarithmic sample grid; throws on violation.
    void validate_on_grid() const;
};

}  // namespace fbmtc
