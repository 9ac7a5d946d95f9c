#include "fbmtc/ledger.hpp"

#include <stdexcept>
#include <string>

namespace fbmtc {

CostSpec::CostSpec(double l) : lambda(l) {
    if (!(l > 0.0) || !(l < 1.0))
        throw std::invalid_argument("CostSpec: lambda must be in (0, 1), got " +
                                    std::to_string(l));
}

TradingStrategy settle(std::span<const double> trades, const PricePath& prices,
                       CostSpec cost, double initial_cash) {
    if (trades.size() != prices.prices.size())
        throw std::invalid_argument(
            "settle: trades must carry one increment per grid time");
    if (!(initial_cash > 0.0))
        throw std::invalid_argument("settle: initial cash must be positive");

    TradingStrategy s;
    s.grid = prices.grid;
    s.initial_cash = initial_cash;
    s.phi0.resize(trades.size());
    s.phi1.resize(trades.size());
    double cash = initial_cash;
    double shares = 0.0;
    for (std::size_t i = 0; i < trades.size(); ++i) {
        const double dq = trades[i];
        const double price = prices.prices[i];
        if (dq > 0.0)
            cash -= price * dq;
        else if (dq < 0.0)
            cash += (1.0 - cost.lambda) * price * (-dq);
        shares += dq;
        s.phi0[i] = cash;
        s.phi1[i] = shares;
    }
    return s;
}

double liquidation_value(double phi0, double phi1, double price,
                         CostSpec cost) {
    if (!(price > 0.0))
        throw std::invalid_argument("liquidation_value: price must be positive");
    return phi1 >= 0.0 ? phi0 + phi1 * (1.0 - cost.lambda) * price
                       : phi0 + phi1 * price;
}

double optimistic_value(double phi0, double phi1, double price, CostSpec cost) {
    if (!(price > 0.0))
        throw std::invalid_argument("optimistic_value: price must be positive");
    return phi1 >= 0.0 ? phi0 + phi1 * price
                       : phi0 + phi1 * (1.0 - cost.lambda) * price;
}

AdmissibilityReport check_admissible(const TradingStrategy& strategy,
                                     const PricePath& prices, CostSpec cost) {
    if (strategy.phi0.size() != prices.prices.size())
        throw std::invalid_argument("check_admissible: grid mismatch");
    AdmissibilityReport report{true, std::nullopt, std::nullopt};
    for (std::size_t i = 0; i < strategy.phi0.size(); ++i) {
        const double v = liquidation_value(strategy.phi0[i], strategy.phi1[i],
                                           prices.prices[i], cost);
        if (v < 0.0) {
            report.admissible = false;
            report.first_violation_time = (*prices.grid)[i];
            report.first_violation_index = i;
            return report;
        }
    }
    return report;
}

}  // namespace fbmtc
