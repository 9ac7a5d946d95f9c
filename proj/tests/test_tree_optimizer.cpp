#include <cmath>
#include <vector>

#include "doctest.h"
#include "fbmtc/tree.hpp"
#include "fbmtc/tree_optimizer.hpp"

using namespace fbmtc;

namespace {

// One-period tree S_0 = 1, children S_u, S_d with probabilities p, 1-p.
ScenarioTree one_period(double s_u, double s_d, double p = 0.5) {
    std::vector<TreeNode> nodes(3);
    nodes[0] = {0, -1, 0, 1.0, 1.0, {}};
    nodes[1] = {1, 0, 1, s_u, p, {}};
    nodes[2] = {2, 0, 1, s_d, 1.0 - p, {}};
    return ScenarioTree(std::move(nodes), {0.0, 1.0});
}

// Brute-force argmax over a trade grid for a one-period problem under
// proportional costs, the independent oracle for maximize_utility.
double brute_force_one_period_value(double s_u, double s_d, double lambda,
                                    const UtilitySpec& utility, double x,
                                    double q_lo, double q_hi, int steps) {
    double best = -1e300;
    for (int i = 0; i <= steps; ++i) {
        const double q = q_lo + (q_hi - q_lo) * i / steps;
        const double cash = q >= 0.0 ? x - q : x + (1.0 - lambda) * q;
        auto liq = [&](double s) {
            return q >= 0.0 ? cash + q * (1.0 - lambda) * s : cash + q * s;
        };
        const double wu = liq(s_u), wd = liq(s_d);
        if (wu <= 0.0 || wd <= 0.0) continue;
        best = std::max(best, 0.5 * utility.u(wu) + 0.5 * utility.u(wd));
    }
    return best;
}

}  // namespace

TEST_CASE("one-period frictionless log closed form") {
    // FOC 0.5*0.2/(1+0.2 pi) = 0.5*0.1/(1-0.1 pi) gives pi = 2.5.
    const auto tree = one_period(1.2, 0.9);
    const auto util = UtilitySpec::log_u();
    std::vector<double> prices{1.0, 1.2, 0.9};
    const auto res = frictionless_optimize(tree, prices, util, 1.0, 1e-12);
    CHECK(res.holdings[0] == doctest::Approx(2.5).epsilon(1e-9));
    const double expected = 0.5 * std::log(1.5) + 0.5 * std::log(0.75);
    CHECK(res.value == doctest::Approx(expected).epsilon(1e-12));
    CHECK(res.value == doctest::Approx(0.05889).epsilon(1e-3));
    CHECK(res.kkt_residual < 1e-10);

    // Martingale tree: zero holdings optimal.
    const auto mart = one_period(1.2, 0.8);
    std::vector<double> mprices{1.0, 1.2, 0.8};
    const auto mres = frictionless_optimize(mart, mprices, util, 1.0, 1e-12);
    CHECK(mres.holdings[0] == doctest::Approx(0.0).epsilon(1e-10));
    CHECK(mres.value == doctest::Approx(0.0));
}

TEST_CASE("one-period frictionless power vs golden-section oracle") {
    const auto tree = one_period(1.2, 0.9);
    const auto util = UtilitySpec::power_u(0.5);
    std::vector<double> prices{1.0, 1.2, 0.9};
    const auto res = frictionless_optimize(tree, prices, util, 1.0, 1e-12);

    auto value_of = [&](double pi) {
        return 0.5 * util.u(1.0 + 0.2 * pi) + 0.5 * util.u(1.0 - 0.1 * pi);
    };
    // Golden-section search over the admissible fraction interval.
    double a = -4.999, b = 9.999;
    const double gr = (std::sqrt(5.0) - 1.0) / 2.0;
    double c = b - gr * (b - a), d = a + gr * (b - a);
    for (int i = 0; i < 200; ++i) {
        if (value_of(c) > value_of(d))
            b = d;
        else
            a = c;
        c = b - gr * (b - a);
        d = a + gr * (b - a);
    }
    const double pi_star = 0.5 * (a + b);
    CHECK(res.holdings[0] == doctest::Approx(pi_star).epsilon(1e-7));
    CHECK(res.value == doctest::Approx(value_of(pi_star)).epsilon(1e-12));
}

TEST_CASE("one-period with costs matches a brute-force trade grid") {
    const auto tree = one_period(1.2, 0.9);
    const auto util = UtilitySpec::log_u();
    const CostSpec cost(0.02);
    const auto res = maximize_utility(tree, cost, util, 1.0, 1e-11);
    // Refined brute force around the solver's answer.
    const double q = res.holdings[0];
    const double coarse = brute_force_one_period_value(1.2, 0.9, 0.02, util,
                                                       1.0, -5.0, 9.0, 20000);
    const double fine = brute_force_one_period_value(
        1.2, 0.9, 0.02, util, 1.0, q - 1e-3, q + 1e-3, 20000);
    CHECK(res.value >= coarse - 1e-9);
    CHECK(res.value == doctest::Approx(fine).epsilon(1e-10));

    // Large costs kill the trade entirely.
    const CostSpec big(0.3);
    const auto none = maximize_utility(tree, big, util, 1.0, 1e-11);
    CHECK(none.holdings[0] == 0.0);
    CHECK(none.value == doctest::Approx(0.0));
    const double grid_best = brute_force_one_period_value(
        1.2, 0.9, 0.3, util, 1.0, -5.0, 9.0, 40000);
    CHECK(grid_best <= 1e-8);
}

TEST_CASE("zero-cost coordinate solver matches backward induction") {
    const ModelSpec model(0.05, 0.25, HurstParameter(0.5), 1.0);
    const auto tree = build_fbs_tree(model, 4);
    std::vector<double> prices(tree.nodes().size());
    for (std::size_t i = 0; i < prices.size(); ++i)
        prices[i] = tree.nodes()[i].price;
    for (const UtilitySpec& util :
         {UtilitySpec::log_u(), UtilitySpec::power_u(0.5),
          UtilitySpec::power_u(-1.0)}) {
        const auto bw = frictionless_optimize(tree, prices, util, 1.0, 1e-12);
        // Custom-kind forces the coordinate-descent path on the same problem.
        const auto custom = UtilitySpec::custom_u(util.u, util.u_prime,
                                                  util.u_prime_inverse,
                                                  util.v_conjugate);
        const auto cd = frictionless_optimize(tree, prices, custom, 1.0, 1e-10);
        CHECK(cd.value == doctest::Approx(bw.value).epsilon(1e-9));
        CHECK(cd.holdings[0] == doctest::Approx(bw.holdings[0]).epsilon(1e-5));
    }
}

TEST_CASE("cost solver approaches the frictionless value as costs vanish") {
    const ModelSpec model(0.0, 0.3, HurstParameter(0.5), 1.0);
    const auto tree = build_fbs_tree(model, 3);
    std::vector<double> prices(tree.nodes().size());
    for (std::size_t i = 0; i < prices.size(); ++i)
        prices[i] = tree.nodes()[i].price;
    const auto util = UtilitySpec::log_u();
    const auto fr = frictionless_optimize(tree, prices, util, 1.0, 1e-12);
    double prev_gap = 1e300;
    for (double lambda : {1e-3, 1e-4, 1e-5}) {
        const auto res = maximize_utility(tree, CostSpec(lambda), util, 1.0,
                                          1e-11);
        const double gap = fr.value - res.value;
        CHECK(gap >= -1e-10);
        CHECK(gap < prev_gap + 1e-12);
        prev_gap = gap;
    }
    CHECK(prev_gap < 5e-4);
}

TEST_CASE("scale equivariance") {
    const ModelSpec model(0.05, 0.25, HurstParameter(0.7), 1.0);
    const auto tree = build_fbs_tree(model, 3);
    const CostSpec cost(0.05);
    const auto log_util = UtilitySpec::log_u();
    const auto base = maximize_utility(tree, cost, log_util, 1.0, 1e-10);
    const auto scaled = maximize_utility(tree, cost, log_util, 3.0, 1e-10);
    CHECK(scaled.value ==
          doctest::Approx(base.value + std::log(3.0)).epsilon(1e-8));
    for (std::size_t i = 0; i < base.holdings.size(); ++i)
        CHECK(scaled.holdings[i] ==
              doctest::Approx(3.0 * base.holdings[i]).epsilon(1e-6));

    // Power utility: positively homogeneous holdings.
    const auto pow_util = UtilitySpec::power_u(0.5);
    const auto pb = maximize_utility(tree, cost, pow_util, 1.0, 1e-10);
    const auto ps = maximize_utility(tree, cost, pow_util, 2.0, 1e-10);
    for (std::size_t i = 0; i < pb.holdings.size(); ++i)
        CHECK(ps.holdings[i] ==
              doctest::Approx(2.0 * pb.holdings[i]).epsilon(1e-6));
}

TEST_CASE("concavity certificate on random feasible pairs") {
    const ModelSpec model(0.05, 0.25, HurstParameter(0.5), 1.0);
    const auto tree = build_fbs_tree(model, 3);
    const CostSpec cost(0.05);
    const auto util = UtilitySpec::log_u();
    const auto& nodes = tree.nodes();
    const auto& prob = tree.node_probability();

    // Evaluate expected utility of a trade vector (zeros at leaves).
    auto evaluate = [&](const std::vector<double>& q) -> double {
        std::vector<double> h(nodes.size()), c(nodes.size());
        double total = 0.0;
        for (std::size_t i = 0; i < nodes.size(); ++i) {
            const double ph = nodes[i].parent < 0
                                  ? 0.0
                                  : h[static_cast<std::size_t>(nodes[i].parent)];
            const double pc = nodes[i].parent < 0
                                  ? 1.0
                                  : c[static_cast<std::size_t>(nodes[i].parent)];
            h[i] = ph + q[i];
            c[i] = pc + (q[i] >= 0.0 ? -nodes[i].price * q[i]
                                     : -(1.0 - cost.lambda) * nodes[i].price *
                                           q[i]);
            if (nodes[i].children.empty()) {
                const double w =
                    c[i] + (h[i] >= 0.0
                                ? h[i] * (1.0 - cost.lambda) * nodes[i].price
                                : h[i] * nodes[i].price);
                if (w <= 0.0) return -1e300;
                total += prob[i] * util.u(w);
            }
        }
        return total;
    };

    std::uint64_t state = 12345;
    auto rnd = [&]() {
        state = state * 6364136223846793005ull + 1442695040888963407ull;
        return static_cast<double>(state >> 11) * 0x1.0p-53;
    };
    int checked = 0;
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> qa(nodes.size(), 0.0), qb(nodes.size(), 0.0);
        for (std::size_t i = 0; i < nodes.size(); ++i) {
            if (nodes[i].children.empty()) continue;
            qa[i] = 0.4 * (rnd() - 0.5);
            qb[i] = 0.4 * (rnd() - 0.5);
        }
        const double fa = evaluate(qa), fb = evaluate(qb);
        if (fa < -1e200 || fb < -1e200) continue;
        std::vector<double> qm(nodes.size());
        for (std::size_t i = 0; i < nodes.size(); ++i)
            qm[i] = 0.5 * (qa[i] + qb[i]);
        const double fm = evaluate(qm);
        CHECK(fm >= 0.5 * (fa + fb) - 1e-12);
        ++checked;
    }
    CHECK(checked > 10);
}

TEST_CASE("fbs tree structure and moment matching") {
    const ModelSpec model(0.05, 0.2, HurstParameter(0.5), 1.0);
    const auto tree = build_fbs_tree(model, 3);
    CHECK(tree.nodes().size() == 15);
    CHECK(tree.nodes()[0].price == 1.0);
    CHECK(tree.leaf_ids().size() == 8);

    // H = 1/2: increments are history-independent, mu dt +- sigma sqrt(dt).
    const double dt = 1.0 / 3.0;
    for (const auto& node : tree.nodes()) {
        if (node.children.empty()) continue;
        const auto& up = tree.nodes()[static_cast<std::size_t>(node.children[0])];
        const auto& dn = tree.nodes()[static_cast<std::size_t>(node.children[1])];
        const double lu = std::log(up.price / node.price);
        const double ld = std::log(dn.price / node.price);
        CHECK(lu == doctest::Approx(0.05 * dt + 0.2 * std::sqrt(dt)).epsilon(1e-10));
        CHECK(ld == doctest::Approx(0.05 * dt - 0.2 * std::sqrt(dt)).epsilon(1e-10));
    }

    // H != 1/2: history dependence shows up at depth 2.
    const ModelSpec rough(0.0, 0.2, HurstParameter(0.7), 1.0);
    const auto rt = build_fbs_tree(rough, 2);
    const auto& r_nodes = rt.nodes();
    const auto& root = r_nodes[0];
    const auto& u = r_nodes[static_cast<std::size_t>(root.children[0])];
    const auto& d = r_nodes[static_cast<std::size_t>(root.children[1])];
    const double up_up =
        std::log(r_nodes[static_cast<std::size_t>(u.children[0])].price /
                 u.price);
    const double dn_up =
        std::log(r_nodes[static_cast<std::size_t>(d.children[0])].price /
                 d.price);
    CHECK(std::abs(up_up - dn_up) > 1e-6);

    CHECK_THROWS_AS(build_fbs_tree(model, 15), std::invalid_argument);
}

TEST_CASE("tree json round trip") {
    const ModelSpec model(0.05, 0.2, HurstParameter(0.7), 1.0);
    const auto tree = build_fbs_tree(model, 3, 42);
    const auto text = tree.to_json_string();
    const auto back = ScenarioTree::from_json_string(text);
    REQUIRE(back.nodes().size() == tree.nodes().size());
    for (std::size_t i = 0; i < tree.nodes().size(); ++i) {
        CHECK(back.nodes()[i].price == tree.nodes()[i].price);
        CHECK(back.nodes()[i].parent == tree.nodes()[i].parent);
        CHECK(back.nodes()[i].prob == tree.nodes()[i].prob);
    }
    CHECK(back.metadata == tree.metadata);
}

TEST_CASE("shadow extraction and verification across a small corpus") {
    for (double hurst : {0.3, 0.5, 0.7}) {
        for (double lambda : {0.01, 0.1, 0.3}) {
            const ModelSpec model(0.05, 0.25, HurstParameter(hurst), 1.0);
            const auto tree = build_fbs_tree(model, 4);
            const CostSpec cost(lambda);
            for (const auto& util :
                 {UtilitySpec::log_u(), UtilitySpec::power_u(-1.0)}) {
                const auto res = maximize_utility(tree, cost, util, 1.0, 1e-11);
                auto rep = extract_shadow(tree, cost, util, res);
                const auto ver =
                    verify_shadow(tree, cost, util, 1.0, res, rep, 1e-8);
                INFO("hurst ", hurst, " lambda ", lambda);
                CHECK(ver.containment.pass);
                CHECK(ver.boundary.pass);
                CHECK(ver.frictionless.pass);
                CHECK(ver.martingale.pass);
                CHECK(ver.budget.pass);
            }
        }
    }
}

TEST_CASE("no-trade tree keeps a martingale selection inside the spread") {
    const auto tree = one_period(1.2, 0.9);
    const auto util = UtilitySpec::log_u();
    const CostSpec cost(0.3);
    const auto res = maximize_utility(tree, cost, util, 1.0, 1e-11);
    CHECK(res.holdings[0] == 0.0);
    auto rep = extract_shadow(tree, cost, util, res);
    CHECK(rep.clamped_nodes == 0);
    const auto ver = verify_shadow(tree, cost, util, 1.0, res, rep, 1e-8);
    CHECK(ver.all_pass());
    // The selection is a genuine conditional expectation.
    const double m = 0.5 * rep.shadow_price[1] + 0.5 * rep.shadow_price[2];
    CHECK(rep.shadow_price[0] == doctest::Approx(m).epsilon(1e-12));
}

TEST_CASE("buying at the root pins the shadow price to the ask") {
    const auto tree = one_period(1.2, 0.9);
    const auto util = UtilitySpec::log_u();
    const CostSpec cost(0.01);
    const auto res = maximize_utility(tree, cost, util, 1.0, 1e-11);
    CHECK(res.holdings[0] > 0.1);
    auto rep = extract_shadow(tree, cost, util, res);
    CHECK(rep.shadow_price[0] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("perturbed shadow price fails verification") {
    const ModelSpec model(0.05, 0.25, HurstParameter(0.5), 1.0);
    const auto tree = build_fbs_tree(model, 3);
    const CostSpec cost(0.05);
    const auto util = UtilitySpec::log_u();
    const auto res = maximize_utility(tree, cost, util, 1.0, 1e-11);
    auto rep = extract_shadow(tree, cost, util, res);
    const double tol = 1e-8;
    REQUIRE(verify_shadow(tree, cost, util, 1.0, res, rep, tol).all_pass());
    // Ask-side violation by 2x tolerance at one node.
    auto broken = rep;
    broken.shadow_price[5] =
        tree.nodes()[5].price * (1.0 + 2.0 * tol);
    broken.y1[5] = broken.y0[5] * broken.shadow_price[5];
    const auto ver = verify_shadow(tree, cost, util, 1.0, res, broken, tol);
    CHECK_FALSE(ver.all_pass());
}

TEST_CASE("duality: frictionless complete one-period gap vanishes") {
    const auto tree = one_period(1.2, 0.9);
    const auto util = UtilitySpec::log_u();
    // Dense grid around the analytic minimiser y = 1/x = 1.
    std::vector<double> ys;
    for (int i = -1000; i <= 1000; ++i)
        ys.push_back(1.0 + 1e-5 * static_cast<double>(i));
    const auto rep = frictionless_conjugacy_check(tree, util, 1.0, ys);
    CHECK(std::abs(rep.gap) <= 1e-6);
    CHECK(rep.worst_weak_duality <= 1e-8);
    CHECK(rep.y_at_min == doctest::Approx(1.0).epsilon(1e-3));
}

TEST_CASE("duality with friction: weak duality and near-tight extracted deflator") {
    const ModelSpec model(0.05, 0.25, HurstParameter(0.5), 1.0);
    const auto tree = build_fbs_tree(model, 3);
    const CostSpec cost(0.05);
    const auto util = UtilitySpec::log_u();
    std::vector<double> ys;
    for (int i = -400; i <= 400; ++i)
        ys.push_back(1.0 + 2.5e-5 * static_cast<double>(i));
    const auto rep = dual_conjugacy_check(tree, cost, util, 1.0, ys, 12, 7);
    CHECK(rep.worst_weak_duality <= 1e-8);  // no deflator undercuts u(x)
    CHECK(rep.deflators_tested >= 2);
    CHECK(std::abs(rep.gap) <= 1e-6);
}

TEST_CASE("myopic property under the shadow price") {
    // One-period: the closed form pi = 2.5.
    {
        const auto tree = one_period(1.2, 0.9);
        const auto util = UtilitySpec::log_u();
        const CostSpec cost(0.001);
        const auto res = maximize_utility(tree, cost, util, 1.0, 1e-11);
        auto rep = extract_shadow(tree, cost, util, res);
        CHECK(myopic_check(tree, rep, res) < 1e-8);
    }
    // Deeper tree.
    {
        const ModelSpec model(0.05, 0.25, HurstParameter(0.7), 1.0);
        const auto tree = build_fbs_tree(model, 4);
        const CostSpec cost(0.02);
        const auto util = UtilitySpec::log_u();
        const auto res = maximize_utility(tree, cost, util, 1.0, 1e-11);
        auto rep = extract_shadow(tree, cost, util, res);
        CHECK(myopic_check(tree, rep, res) < 1e-7);
    }
    // Martingale shadow price: zero fraction node-wise.
    {
        const auto tree = one_period(1.2, 0.9);
        const auto util = UtilitySpec::log_u();
        const CostSpec cost(0.3);
        const auto res = maximize_utility(tree, cost, util, 1.0, 1e-11);
        auto rep = extract_shadow(tree, cost, util, res);
        CHECK(res.holdings[0] == 0.0);
        CHECK(myopic_check(tree, rep, res) < 1e-10);
    }
}

TEST_CASE("utility spec validation") {
    CHECK_NOTHROW(UtilitySpec::log_u().validate_on_grid());
    CHECK_NOTHROW(UtilitySpec::power_u(0.5).validate_on_grid());
    CHECK_NOTHROW(UtilitySpec::power_u(-1.0).validate_on_grid());
    CHECK_THROWS_AS(UtilitySpec::power_u(0.0), std::invalid_argument);
    CHECK_THROWS_AS(UtilitySpec::power_u(1.0), std::invalid_argument);
}
