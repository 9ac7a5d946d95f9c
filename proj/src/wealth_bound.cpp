#include "fbmtc/wealth_bound.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace fbmtc {

BoundParams::BoundParams(CostSpec cost_, double delta_)
    : cost(cost_), delta(delta_) {
    if (!(delta > 0.0))
        throw std::invalid_argument("BoundParams: delta must be positive");
    const double q = (1.0 - cost.lambda) * std::exp(2.0 * delta);
    if (!(q < 1.0))
        throw std::invalid_argument(
            "BoundParams: the hypothesis (1-lambda) e^{2 delta} < 1 fails "
            "((1-lambda) e^{2 delta} = " +
            std::to_string(q) +
            "); shrink delta or raise lambda");
}

double k_constant(const BoundParams& params) {
    const double denom =
        1.0 - (1.0 - params.cost.lambda) * std::exp(2.0 * params.delta);
    return (1.0 - 1.0 / denom) + std::exp(2.0 * params.delta) / denom;
}

double bound_value(double x, long n, const BoundParams& params) {
    if (!(x > 0.0))
        throw std::invalid_argument("bound_value: x must be positive");
    if (n < 0) throw std::invalid_argument("bound_value: n must be >= 0");
    return x * std::pow(k_constant(params), static_cast<double>(n));
}

double clairvoyant_segment_value(std::span<const double> segment_prices,
                                 double start_value, const BoundParams& params,
                                 SegmentDirection direction) {
    if (segment_prices.empty())
        throw std::invalid_argument("clairvoyant_segment_value: empty segment");
    const double s0 = segment_prices.front();
    const double lo = std::exp(-params.delta) * s0;
    const double hi = std::exp(params.delta) * s0;
    double s_min = s0;
    double s_max = s0;
    for (double p : segment_prices) {
        if (p < lo * (1.0 - 1e-9) || p > hi * (1.0 + 1e-9))
            throw std::invalid_argument(
                "clairvoyant_segment_value: price " + std::to_string(p) +
                " leaves the single-fluctuation band [" + std::to_string(lo) +
                ", " + std::to_string(hi) + "]");
        s_min = std::min(s_min, p);
        s_max = std::max(s_max, p);
    }
    const double s_end = segment_prices.back();
    const double one_minus = 1.0 - params.cost.lambda;

    // Long leg: buy at the segment minimum, as many shares as the
    // admissibility envelope phi0 + phi1 (1-lambda) e^{delta} S_0 >= 0 allows.
    const double q_long = start_value / (s_min - one_minus * hi);
    const double long_value = start_value + q_long * (s_end - s_min);

    // Short leg: sell at the maximum. The collateral constraint
    // phi0 - |phi1| S_u >= 0 is evaluated at the band bottom, the mirrored
    // envelope; the cap stays positive by the standing hypothesis.
    const double q_short = start_value / (lo - one_minus * s_max);
    const double short_value =
        start_value + q_short * one_minus * (s_max - s_end);

    switch (direction) {
        case SegmentDirection::long_side:
            return std::max(start_value, long_value);
        case SegmentDirection::short_side:
            return std::max(start_value, short_value);
        case SegmentDirection::best:
        default:
            return std::max({start_value, long_value, short_value});
    }
}

namespace {

double liq_part(double h, double price, double lambda) {
    return h >= 0.0 ? h * (1.0 - lambda) * price : h * price;
}

double opt_part(double h, double price, double lambda) {
    return h >= 0.0 ? h * price : h * (1.0 - lambda) * price;
}

struct DpRun {
    double result;
    bool edge_active;  // a feasible state touched the holdings-grid edge
};

// Collateral rule: minimal cash required to hold h at time i.
// True admissibility values the position at the current price; the segment
// envelope values longs at the band top and shorts at the band bottom.
struct CollateralRule {
    bool envelope = false;
    double lambda = 0.0;
    double band_lo = 0.0;
    double band_hi = 0.0;

    double value(double h, double price) const {
        if (!envelope) return liq_part(h, price, lambda);
        return h >= 0.0 ? h * (1.0 - lambda) * band_hi : h * band_lo;
    }
};

DpRun run_dp(std::span<const double> s, double lambda, double x,
             std::size_t m, double h_bound, TerminalValuation terminal,
             const CollateralRule& rule) {
    const std::size_t n = s.size();
    const std::size_t mid = m / 2;
    std::vector<double> h(m);
    for (std::size_t k = 0; k < m; ++k)
        h[k] = h_bound * (static_cast<double>(k) - static_cast<double>(mid)) /
               static_cast<double>(mid);
    h[mid] = 0.0;

    const double neg_inf = -std::numeric_limits<double>::infinity();
    std::vector<double> value(m, neg_inf);
    value[mid] = x;  // pre-trade state at time 0
    bool edge_active = false;

    std::vector<double> buy_scan(m), sell_scan(m);
    for (std::size_t i = 0; i < n; ++i) {
        const double price = s[i];
        // Trade at time i: prefix max over buys, suffix max over sells.
        double best = neg_inf;
        for (std::size_t k = 0; k < m; ++k) {
            const double cand =
                value[k] == neg_inf ? neg_inf : value[k] + price * h[k];
            best = std::max(best, cand);
            buy_scan[k] = best;
        }
        best = neg_inf;
        const double bid = (1.0 - lambda) * price;
        for (std::size_t k = m; k-- > 0;) {
            const double cand =
                value[k] == neg_inf ? neg_inf : value[k] + bid * h[k];
            best = std::max(best, cand);
            sell_scan[k] = best;
        }
        for (std::size_t k = 0; k < m; ++k) {
            double v = value[k];
            if (buy_scan[k] != neg_inf)
                v = std::max(v, buy_scan[k] - price * h[k]);
            if (sell_scan[k] != neg_inf)
                v = std::max(v, sell_scan[k] - bid * h[k]);
            // Admissibility of the post-trade state.
            if (v != neg_inf && v + rule.value(h[k], price) < 0.0) v = neg_inf;
            value[k] = v;
        }
        if (value[0] != neg_inf || value[m - 1] != neg_inf) edge_active = true;
    }

    double result = neg_inf;
    const double s_t = s[n - 1];
    for (std::size_t k = 0; k < m; ++k) {
        if (value[k] == neg_inf) continue;
        const double part = terminal == TerminalValuation::liquidation
                                ? liq_part(h[k], s_t, lambda)
                                : opt_part(h[k], s_t, lambda);
        result = std::max(result, value[k] + part);
    }
    if (result == neg_inf)
        throw std::runtime_error(
            "dp_oracle_best_terminal: no feasible strategy found");
    return {result, edge_active};
}

}  // namespace

double dp_oracle_best_terminal(const PricePath& prices, CostSpec cost,
                               double x, std::size_t holdings_levels,
                               TerminalValuation terminal,
                               std::optional<double> h_bound) {
    const std::size_t n = prices.prices.size();
    if (n > 64 || holdings_levels > 512)
        throw std::invalid_argument(
            "dp_oracle_best_terminal: instance too large (grid <= 64 points, "
            "holdings grid <= 512 levels; got " +
            std::to_string(n) + " points, " + std::to_string(holdings_levels) +
            " levels)");
    if (holdings_levels < 3)
        throw std::invalid_argument(
            "dp_oracle_best_terminal: need at least 3 holdings levels");
    if (!(x > 0.0))
        throw std::invalid_argument("dp_oracle_best_terminal: x must be > 0");
    const auto& s = prices.prices;
    const double lambda = cost.lambda;
    std::size_t m = holdings_levels;
    if (m % 2 == 0) --m;  // keep zero on the grid

    const CollateralRule rule{false, lambda, 0.0, 0.0};
    if (h_bound) {
        if (!(*h_bound > 0.0))
            throw std::invalid_argument(
                "dp_oracle_best_terminal: h_bound must be positive");
        return run_dp(s, lambda, x, m, *h_bound, terminal, rule).result;
    }

    // Full leverage at the cheapest price, with headroom for compounding;
    // widen while a feasible state presses against the grid edge.
    double s_min = s[0];
    for (double p : s) s_min = std::min(s_min, p);
    double bound = 4.0 * x / (lambda * s_min);
    DpRun run = run_dp(s, lambda, x, m, bound, terminal, rule);
    for (int attempt = 0; attempt < 3 && run.edge_active; ++attempt) {
        bound *= 4.0;
        run = run_dp(s, lambda, x, m, bound, terminal, rule);
    }
    return run.result;
}

double dp_segment_oracle(std::span<const double> segment_prices,
                         const BoundParams& params, double start_value,
                         std::size_t holdings_levels,
                         std::optional<double> h_bound) {
    const std::size_t n = segment_prices.size();
    if (n == 0 || n > 64 || holdings_levels > 512 || holdings_levels < 3)
        throw std::invalid_argument(
            "dp_segment_oracle: instance too large (grid <= 64 points, "
            "holdings grid in [3, 512])");
    if (!(start_value > 0.0))
        throw std::invalid_argument(
            "dp_segment_oracle: start value must be > 0");
    const double s0 = segment_prices.front();
    const double lo = std::exp(-params.delta) * s0;
    const double hi = std::exp(params.delta) * s0;
    for (double p : segment_prices)
        if (p < lo * (1.0 - 1e-9) || p > hi * (1.0 + 1e-9))
            throw std::invalid_argument(
                "dp_segment_oracle: price leaves the single-fluctuation band");
    const double lambda = params.cost.lambda;
    std::size_t m = holdings_levels;
    if (m % 2 == 0) --m;
    const CollateralRule rule{true, lambda, lo, hi};
    double bound;
    if (h_bound) {
        bound = *h_bound;
    } else {
        // The envelope cap, identical for both directions.
        bound = 1.25 * start_value / (lo - (1.0 - lambda) * hi);
    }
    return run_dp(segment_prices, lambda, start_value, m, bound,
                  TerminalValuation::optimistic, rule)
        .result;
}

}  // namespace fbmtc
