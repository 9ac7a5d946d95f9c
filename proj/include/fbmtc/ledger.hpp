#pragma once

#include <cstddef>
#include <optional>
#include <span>

#include "fbmtc/fbm.hpp"

namespace fbmtc {

// Proportional transaction costs: buy at S, sell at (1-lambda) S.
struct CostSpec {
    double lambda;

    explicit CostSpec(double l);
};

// Bond/stock holdings after rebalancing at each grid time, plus the initial
// endowment (x, 0) held before time 0. Self-financing with equality: cash
// moves only through stock trades, debited at ask, credited at bid.
struct TradingStrategy {
    std::shared_ptr<const TimeGrid> grid;
    double initial_cash;        // phi0 at 0-
    std::vector<double> phi0;   // post-trade bond holdings per grid time
    std::vector<double> phi1;   // post-trade stock holdings per grid time
};

// Settle per-time net stock increments into a strategy. A positive increment
// buys at the ask, a negative one sells at the bid; netting is implicit since
// each time carries a single increment.
TradingStrategy settle(std::span<const double> trades, const PricePath& prices,
                       CostSpec cost, double initial_cash);

// phi0 + (phi1)^+ (1-lambda) S - (phi1)^- S.
double liquidation_value(double phi0, double phi1, double price, CostSpec cost);

// phi0 + (phi1)^+ S - (phi1)^- (1-lambda) S.
double optimistic_value(double phi0, double phi1, double price, CostSpec cost);

struct AdmissibilityReport {
    bool admissible;
    std::optional<double> first_violation_time;
    std::optional<std::size_t> first_violation_index;
};

// Admissible iff the liquidation value is >= 0 at every grid time.
AdmissibilityReport check_admissible(const TradingStrategy& strategy,
                                     const PricePath& prices, CostSpec cost);

}  // namespace fbmtc
