#pragma once

#include <optional>
#include <span>

#include "fbmtc/ledger.hpp"

namespace fbmtc {

// Parameters of the terminal-wealth bound x K^n; requires the standing
// hypothesis (1-lambda) e^{2 delta} < 1, under which no round trip completed
// inside a single fluctuation band can profit.
struct BoundParams {
    CostSpec cost;
    double delta;

    BoundParams(CostSpec cost_, double delta_);
};

// K = (1 - 1/(1-(1-lambda)e^{2 delta})) + e^{2 delta}/(1-(1-lambda)e^{2 delta});
// always > 1, increasing in delta, decreasing in lambda.
double k_constant(const BoundParams& params);

// x K^n.
double bound_value(double x, long n, const BoundParams& params);

enum class SegmentDirection { long_side, short_side, best };

// Maximal optimistic value at the end of one fluctuation segment (prices
// within [e^{-delta}, e^{delta}] times the segment's first price), starting
// from optimistic value V in cash: wait for the extreme price, take the
// largest position the admissibility envelope allows, hold to the end.
// Attains V * K exactly in the limiting min = e^{-delta} S_0,
// end = e^{delta} S_0 case.
double clairvoyant_segment_value(std::span<const double> segment_prices,
                                 double start_value, const BoundParams& params,
                                 SegmentDirection direction =
                                     SegmentDirection::best);

enum class TerminalValuation { liquidation, optimistic };

// Exact clairvoyant dynamic program over a discretised holdings grid:
// maximal terminal cash (after liquidation) over all admissible strategies
// restricted to the grid. Lower-bounds the continuum optimum and converges to
// it as the holdings grid refines. Small instances only. The holdings grid
// spans [-h_bound, h_bound] with zero always a level; by default the bound is
// sized from a leverage envelope and widened automatically while the optimum
// presses against it.
double dp_oracle_best_terminal(const PricePath& prices, CostSpec cost,
                               double x, std::size_t holdings_levels,
                               TerminalValuation terminal =
                                   TerminalValuation::liquidation,
                               std::optional<double> h_bound = std::nullopt);

// Same dynamic program on one fluctuation segment, but under the proof's
// band-envelope admissibility (longs collateralised at the band top, shorts
// at the band bottom) and with optimistic terminal valuation. True node-wise
// admissibility implies the envelope constraint, so this dominates
// dp_oracle_best_terminal on the segment and attains the clairvoyant value
// in the limiting case.
double dp_segment_oracle(std::span<const double> segment_prices,
                         const BoundParams& params, double start_value,
                         std::size_t holdings_levels,
                         std::optional<double> h_bound = std::nullopt);

}  // namespace fbmtc
