#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "fbmtc/ledger.hpp"
#include "fbmtc/tree.hpp"
#include "fbmtc/utility.hpp"

namespace fbmtc {

// Solution of a tree utility-maximisation problem. All per-node vectors are
// indexed by tree node id; holdings and cash are post-trade, leaf_wealth is
// nonzero only at leaf ids.
struct OptimizationResult {
    std::vector<double> holdings;
    std::vector<double> cash;
    std::vector<double> leaf_wealth;
    double value = 0.0;
    double kkt_residual = 0.0;
    long iterations = 0;
    double tolerance = 0.0;
};

// Expected-utility maximisation over self-financing, node-wise admissible
// strategies under proportional costs. Cyclic exact coordinate maximisation
// over per-node net trades on the concave program; terminates when the
// projected-gradient (KKT) norm over the buy/sell split drops below tol.
OptimizationResult maximize_utility(const ScenarioTree& tree, CostSpec cost,
                                    const UtilitySpec& utility, double x,
                                    double tol = 1e-8);

// Frictionless problem for an arbitrary per-node price process (for example
// a shadow price). Log and power utilities solve by exact backward
// induction; custom utilities fall back to the coordinate solver with
// lambda = 0.
OptimizationResult frictionless_optimize(const ScenarioTree& tree,
                                         std::span<const double> prices,
                                         const UtilitySpec& utility, double x,
                                         double tol = 1e-8);

// Shadow price and deflator extracted from an optimal solution:
// Y0 at leaves is U'(terminal wealth), propagated backward as a martingale;
// the shadow price is pinned to the traded side of the spread at trading
// nodes and selected inside the spread by an interval backward recursion
// plus forward interpolation elsewhere, so Y1 = Y0 * S_hat is an exact
// martingale whenever the intervals stay feasible.
struct ShadowReport {
    std::vector<double> shadow_price;  // per node
    std::vector<double> y0;            // deflator, per node
    std::vector<double> y1;            // y0 * shadow_price
    double y_root = 0.0;               // estimate of u'(x)
    double dual_value = 0.0;           // E[V(Y0_T)]
    // Construction diagnostics.
    double max_pin_conflict = 0.0;  // |pinned value - feasible interval|
    double max_selection_residual = 0.0;  // forward-pass martingale residual
    long clamped_nodes = 0;

    struct Flag {
        bool pass = false;
        double magnitude = 0.0;
    };
    // Filled by verify_shadow.
    Flag spread_containment, boundary_trading, frictionless_match,
        martingale_residual, budget_identity;
};

ShadowReport extract_shadow(const ScenarioTree& tree, CostSpec cost,
                            const UtilitySpec& utility,
                            const OptimizationResult& result);

// Machine verification of the shadow-price properties:
//  (a) spread containment of S_hat,
//  (b) boundary trading (trades execute at the pinned side),
//  (c) frictionless re-optimisation under S_hat reproduces value and
//      terminal wealth,
//  (d) deflated wealth Y0 phi0 + Y1 phi1 is a martingale,
//  (e) budget identity E[g Y0_T] = x y.
// Magnitudes are relative; flags are also written into the report.
struct VerificationReport {
    ShadowReport::Flag containment, boundary, frictionless, martingale, budget;
    bool all_pass() const {
        return containment.pass && boundary.pass && frictionless.pass &&
               martingale.pass && budget.pass;
    }
};

VerificationReport verify_shadow(const ScenarioTree& tree, CostSpec cost,
                                 const UtilitySpec& utility, double x,
                                 const OptimizationResult& result,
                                 ShadowReport& report, double tol);

// Conjugacy diagnostic: v_hat(y) = min over candidate deflators of
// E[V(y Z_T)] where candidates are the extracted deflator plus random
// spread-valued martingale selections; the gap u(x) - min_y (v_hat(y) + xy)
// vanishes at the optimum and weak duality bounds it from below.
struct ConjugacyReport {
    double u_of_x = 0.0;
    double dual_min = 0.0;
    double y_at_min = 0.0;
    double gap = 0.0;
    std::size_t deflators_tested = 0;
    // max over tested (y, Z) of u(x) - (E[V(y Z_T)] + x y); positive values
    // beyond tolerance break weak duality.
    double worst_weak_duality = 0.0;
};

ConjugacyReport dual_conjugacy_check(const ScenarioTree& tree, CostSpec cost,
                                     const UtilitySpec& utility, double x,
                                     std::span<const double> y_grid,
                                     std::size_t random_deflators = 16,
                                     std::uint64_t seed = 1);

// Frictionless conjugacy on the tree's own prices: v(y) evaluated on the
// exact tilted deflator; on complete trees the gap vanishes analytically.
ConjugacyReport frictionless_conjugacy_check(const ScenarioTree& tree,
                                             const UtilitySpec& utility,
                                             double x,
                                             std::span<const double> y_grid);

// Exact frictionless deflator of a tree price process (exponential tilting
// per node); requires each node's price to lie strictly inside the convex
// hull of its children's prices. Returns the terminal density per node id.
std::vector<double> frictionless_deflator(const ScenarioTree& tree,
                                          std::span<const double> prices);

// Log-utility myopia: at every node the invested fraction of wealth under
// the shadow price maximises one-step conditional expected log growth.
// Returns the largest first-order-condition residual over nodes.
double myopic_check(const ScenarioTree& tree, const ShadowReport& report,
                    const OptimizationResult& result);

}  // namespace fbmtc
