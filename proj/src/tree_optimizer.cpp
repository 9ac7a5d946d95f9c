#include "fbmtc/tree_optimizer.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <stdexcept>
#include <string>

#include "fbmtc/rng.hpp"

namespace fbmtc {

namespace {

constexpr double kWealthBarrier = 1e-12;
constexpr double kWealthFloor = 1e-10;

// Tree flattened to depth-first preorder: every subtree is a contiguous node
// range and its leaves a contiguous slice of the leaf list.
struct Flat {
    int n = 0;
    std::vector<int> order;      // flat -> tree id
    std::vector<int> flat_of;    // tree id -> flat
    std::vector<int> parent;     // flat indexing
    std::vector<double> price;
    std::vector<double> cprob;
    std::vector<double> prob;
    std::vector<int> sub_end;
    std::vector<int> leaf_begin, leaf_end;
    std::vector<int> leaves;  // flat ids, DFS order
    std::vector<char> is_leaf;
    std::vector<int> child_off;
    std::vector<int> child_dat;

    static Flat build(const ScenarioTree& tree) {
        Flat f;
        const auto& nodes = tree.nodes();
        const auto& uncond = tree.node_probability();
        f.n = static_cast<int>(nodes.size());
        f.order.reserve(nodes.size());
        f.flat_of.assign(nodes.size(), -1);
        std::vector<int> stack{0};
        while (!stack.empty()) {
            const int id = stack.back();
            stack.pop_back();
            f.flat_of[static_cast<std::size_t>(id)] =
                static_cast<int>(f.order.size());
            f.order.push_back(id);
            const auto& ch = nodes[static_cast<std::size_t>(id)].children;
            for (auto it = ch.rbegin(); it != ch.rend(); ++it)
                stack.push_back(*it);
        }
        f.parent.resize(f.n);
        f.price.resize(f.n);
        f.cprob.resize(f.n);
        f.prob.resize(f.n);
        f.sub_end.assign(f.n, 0);
        f.leaf_begin.assign(f.n, 0);
        f.leaf_end.assign(f.n, 0);
        f.is_leaf.assign(f.n, 0);
        for (int v = 0; v < f.n; ++v) {
            const auto& node = nodes[static_cast<std::size_t>(f.order[v])];
            f.parent[v] = node.parent < 0
                              ? -1
                              : f.flat_of[static_cast<std::size_t>(node.parent)];
            f.price[v] = node.price;
            f.cprob[v] = node.prob;
            f.prob[v] = uncond[static_cast<std::size_t>(f.order[v])];
            f.is_leaf[v] = node.children.empty() ? 1 : 0;
        }
        // Subtree ends and leaf slices in one reverse pass.
        std::vector<int> leaf_count(f.n, 0);
        for (int v = f.n - 1; v >= 0; --v) {
            f.sub_end[v] = v + 1;
            leaf_count[v] = f.is_leaf[v];
            // children are contiguous blocks following v in preorder
        }
        for (int v = f.n - 1; v >= 1; --v) {
            const int p = f.parent[v];
            f.sub_end[p] = std::max(f.sub_end[p], f.sub_end[v]);
            leaf_count[p] += leaf_count[v];
        }
        for (int v = 0; v < f.n; ++v)
            if (f.is_leaf[v]) f.leaves.push_back(v);
        // Leaf slices: preorder guarantees the subtree's leaves are the
        // contiguous run of leaves with flat index in [v, sub_end).
        {
            std::vector<int> leaf_pos(f.n, 0);
            int k = 0;
            for (int v = 0; v < f.n; ++v) {
                leaf_pos[v] = k;
                if (f.is_leaf[v]) ++k;
            }
            for (int v = 0; v < f.n; ++v) {
                f.leaf_begin[v] = leaf_pos[v];
                f.leaf_end[v] =
                    f.sub_end[v] == f.n ? k : leaf_pos[f.sub_end[v]];
            }
        }
        // Flattened children.
        f.child_off.assign(f.n + 1, 0);
        for (int v = 1; v < f.n; ++v) f.child_off[f.parent[v] + 1]++;
        for (int v = 0; v < f.n; ++v) f.child_off[v + 1] += f.child_off[v];
        f.child_dat.assign(f.n - 1 >= 0 ? f.n - 1 : 0, 0);
        {
            std::vector<int> cursor(f.child_off.begin(), f.child_off.end() - 1);
            for (int v = 1; v < f.n; ++v)
                f.child_dat[static_cast<std::size_t>(cursor[f.parent[v]]++)] = v;
        }
        return f;
    }

    std::span<const int> children(int v) const {
        return {child_dat.data() + child_off[v],
                static_cast<std::size_t>(child_off[v + 1] - child_off[v])};
    }
};

// Inlined utility evaluation; the std::function members of UtilitySpec stay
// the public face, this keeps the solver hot loop cheap for log and power.
struct Eval {
    UtilitySpec::Kind kind;
    double alpha;
    const UtilitySpec* spec;

    explicit Eval(const UtilitySpec& u)
        : kind(u.kind), alpha(u.alpha), spec(&u) {}

    double val(double w) const {
        switch (kind) {
            case UtilitySpec::Kind::log_utility:
                return std::log(w);
            case UtilitySpec::Kind::power_utility:
                return std::pow(w, alpha) / alpha;
            default:
                return spec->u(w);
        }
    }
    double d1(double w) const {
        switch (kind) {
            case UtilitySpec::Kind::log_utility:
                return 1.0 / w;
            case UtilitySpec::Kind::power_utility:
                return std::pow(w, alpha - 1.0);
            default:
                return spec->u_prime(w);
        }
    }
    double d2(double w) const {
        switch (kind) {
            case UtilitySpec::Kind::log_utility:
                return -1.0 / (w * w);
            case UtilitySpec::Kind::power_utility:
                return (alpha - 1.0) * std::pow(w, alpha - 2.0);
            default: {
                const double h = 1e-6 * std::max(w, 1e-6);
                return (spec->u_prime(w + h) - spec->u_prime(w - h)) /
                       (2.0 * h);
            }
        }
    }
};

double liq_part(double h, double price, double lambda) {
    return h >= 0.0 ? h * (1.0 - lambda) * price : h * price;
}
double g_right(double h, double price, double lambda) {
    return h >= 0.0 ? (1.0 - lambda) * price : price;
}
double g_left(double h, double price, double lambda) {
    return h > 0.0 ? (1.0 - lambda) * price : price;
}
double cash_flow(double q, double price, double lambda) {
    return q >= 0.0 ? -price * q : -(1.0 - lambda) * price * q;
}

// Numerically stable softplus, scaled by eps.
double softplus(double z, double eps) {
    const double t = z / eps;
    if (t > 40.0) return z;
    if (t < -40.0) return 0.0;
    return eps * std::log1p(std::exp(t));
}
double logistic(double t) {
    if (t > 40.0) return 1.0;
    if (t < -40.0) return 0.0;
    return 1.0 / (1.0 + std::exp(-t));
}

struct Solver {
    const Flat& f;
    Eval u;
    double lambda;
    double x;
    // Softplus rounding of the leaf-liquidation kink, in holdings units.
    // The kink couples trade coordinates through the path holdings, so plain
    // coordinate descent can wedge on it; a smoothing continuation keeps the
    // iterates on the globally optimal basin, and the final stage runs exact.
    double kink_eps = 0.0;
    std::vector<double> q, h, c, W;

    Solver(const Flat& flat, const UtilitySpec& util, double lambda_,
           double x_)
        : f(flat), u(util), lambda(lambda_), x(x_) {
        q.assign(f.n, 0.0);
        h.assign(f.n, 0.0);
        c.assign(f.n, 0.0);
        W.assign(f.n, 0.0);
        refresh(0);
    }

    double parent_h(int v) const { return v == 0 ? 0.0 : h[f.parent[v]]; }
    double parent_c(int v) const { return v == 0 ? x : c[f.parent[v]]; }

    // Liquidation leg of the leaf wealth and its one-sided derivatives,
    // exact or smoothed depending on the stage.
    double wealth_part(double hold, double price) const {
        if (kink_eps <= 0.0) return liq_part(hold, price, lambda);
        return (1.0 - lambda) * price * hold -
               lambda * price * softplus(-hold, kink_eps);
    }
    double wp_right(double hold, double price) const {
        if (kink_eps <= 0.0) return g_right(hold, price, lambda);
        return (1.0 - lambda) * price +
               lambda * price * logistic(-hold / kink_eps);
    }
    double wp_left(double hold, double price) const {
        if (kink_eps <= 0.0) return g_left(hold, price, lambda);
        return wp_right(hold, price);
    }
    double wp_second(double hold, double price) const {
        if (kink_eps <= 0.0) return 0.0;
        const double s = logistic(-hold / kink_eps);
        return -(lambda * price / kink_eps) * s * (1.0 - s);
    }

    // Recompute post-trade states and leaf wealth over the subtree of v.
    void refresh(int v) {
        for (int su = v; su < f.sub_end[v]; ++su) {
            h[su] = parent_h(su) + q[su];
            c[su] = parent_c(su) + cash_flow(q[su], f.price[su], lambda);
            if (f.is_leaf[su]) W[su] = c[su] + wealth_part(h[su], f.price[su]);
        }
    }

    double objective() const {
        double total = 0.0;
        for (int leaf : f.leaves) total += f.prob[leaf] * u.val(W[leaf]);
        return total;
    }

    // One-sided derivatives of the objective restricted to node v's trade,
    // displaced by dq from the current value.
    double deriv(int v, double dq, bool right) const {
        const double q_new = q[v] + dq;
        const double dcash =
            cash_flow(q_new, f.price[v], lambda) -
            cash_flow(q[v], f.price[v], lambda);
        const double cash_slope =
            right ? (q_new >= 0.0 ? -f.price[v] : -(1.0 - lambda) * f.price[v])
                  : (q_new > 0.0 ? -f.price[v] : -(1.0 - lambda) * f.price[v]);
        double total = 0.0;
        for (int sl = f.leaf_begin[v]; sl < f.leaf_end[v]; ++sl) {
            const int leaf = f.leaves[static_cast<std::size_t>(sl)];
            const double hh = h[leaf] + dq;
            const double w = W[leaf] + dcash +
                             wealth_part(hh, f.price[leaf]) -
                             wealth_part(h[leaf], f.price[leaf]);
            const double g = right ? wp_right(hh, f.price[leaf])
                                   : wp_left(hh, f.price[leaf]);
            total += f.prob[leaf] * u.d1(w) * (cash_slope + g);
        }
        return total;
    }

    double second_deriv(int v, double dq) const {
        const double q_new = q[v] + dq;
        const double dcash = cash_flow(q_new, f.price[v], lambda) -
                             cash_flow(q[v], f.price[v], lambda);
        const double cash_slope =
            q_new >= 0.0 ? -f.price[v] : -(1.0 - lambda) * f.price[v];
        double total = 0.0;
        for (int sl = f.leaf_begin[v]; sl < f.leaf_end[v]; ++sl) {
            const int leaf = f.leaves[static_cast<std::size_t>(sl)];
            const double hh = h[leaf] + dq;
            const double w = W[leaf] + dcash +
                             wealth_part(hh, f.price[leaf]) -
                             wealth_part(h[leaf], f.price[leaf]);
            const double slope = cash_slope + wp_right(hh, f.price[leaf]);
            total += f.prob[leaf] * (u.d2(w) * slope * slope +
                                     u.d1(w) * wp_second(hh, f.price[leaf]));
        }
        return total;
    }

    // Strict feasibility of a displacement: admissibility over the subtree
    // and the wealth barrier at its leaves. Admissibility stays exact; the
    // leaf barrier uses the (conservative) smoothed wealth.
    bool feasible(int v, double dq) const {
        const double q_new = q[v] + dq;
        const double dcash = cash_flow(q_new, f.price[v], lambda) -
                             cash_flow(q[v], f.price[v], lambda);
        for (int su = v; su < f.sub_end[v]; ++su) {
            const double hh = h[su] + dq;
            const double cc = c[su] + dcash;
            if (f.is_leaf[su]) {
                if (cc + wealth_part(hh, f.price[su]) < kWealthBarrier)
                    return false;
            } else if (cc + liq_part(hh, f.price[su], lambda) < 0.0) {
                return false;
            }
        }
        return true;
    }

    // Exact 1-D maximisation at node v. Returns |q change|.
    double solve_node(int v, double inner_tol) {
        const double dr0 = deriv(v, 0.0, true);
        const double dl0 = deriv(v, 0.0, false);
        if (dr0 <= inner_tol && dl0 >= -inner_tol) return 0.0;
        const bool up = dr0 > inner_tol;
        const double sgn = up ? 1.0 : -1.0;
        auto dir_deriv = [&](double dq) {
            return sgn * deriv(v, dq, up);
        };
        // Expand a bracket [lo, hi] with dir_deriv(lo) > 0, feasible lo.
        double lo = 0.0;
        double step = std::max(1e-3 * x / f.price[v], 1e-9);
        double hi = sgn * step;
        bool boundary = false;
        for (int i = 0; i < 200; ++i) {
            if (!feasible(v, hi)) {
                // Pull the bound onto the feasibility boundary.
                double in = lo, out = hi;
                for (int b = 0; b < 80; ++b) {
                    const double mid = 0.5 * (in + out);
                    (feasible(v, mid) ? in : out) = mid;
                }
                hi = in;
                boundary = true;
                break;
            }
            if (dir_deriv(hi) <= 0.0) break;
            lo = hi;
            hi *= 2.0;
            if (std::abs(hi) > 1e14)
                throw std::runtime_error(
                    "maximize_utility: unbounded direction at a node; "
                    "objective appears unbounded");
        }
        double dq;
        if (boundary && dir_deriv(hi) > 0.0) {
            dq = hi;  // constrained optimum on the admissibility boundary
        } else {
            // dir_deriv(lo) > 0 >= dir_deriv(hi): Newton safeguarded by
            // bisection on the monotone directional derivative.
            double a = lo, b = hi;
            double cand = 0.5 * (a + b);
            for (int it = 0; it < 200; ++it) {
                const double d = dir_deriv(cand);
                if (std::abs(d) <= 0.25 * inner_tol) break;
                if (d > 0.0)
                    a = cand;
                else
                    b = cand;
                // Newton on the true derivative D = sgn * d, curvature D2.
                const double dd = second_deriv(v, cand);
                double next = cand - (sgn * d) / dd;
                if (!(next > std::min(a, b) && next < std::max(a, b)) ||
                    !std::isfinite(next))
                    next = 0.5 * (a + b);
                cand = next;
                if (std::abs(b - a) <= 1e-16 * (1.0 + std::abs(cand))) break;
            }
            // The optimum may sit exactly on a kink (net trade through zero,
            // or, in the exact stage, a leaf's holdings through zero);
            // landing epsilon off it flips one-sided derivatives and makes
            // sweeps chatter, so snap when the subdifferential at the kink
            // brackets zero.
            const double window =
                std::max(std::abs(b - a) * 4.0, 1e-12 * (1.0 + std::abs(cand)));
            double snapped = cand;
            bool found = false;
            auto try_kink = [&](double z) {
                if (found || std::abs(z - cand) > window) return;
                if (deriv(v, z, true) <= 0.0 && deriv(v, z, false) >= 0.0) {
                    snapped = z;
                    found = true;
                }
            };
            try_kink(-q[v]);
            if (!found && kink_eps <= 0.0) {
                for (int sl = f.leaf_begin[v]; sl < f.leaf_end[v] && !found;
                     ++sl)
                    try_kink(-h[f.leaves[static_cast<std::size_t>(sl)]]);
            }
            dq = snapped;
        }
        if (std::abs(dq) < 1e-18) return 0.0;
        q[v] += dq;
        refresh(v);
        return std::abs(dq);
    }

    // Directional machinery for pass-through frontier moves: buy t at v and
    // unwind t at every maximal flat-holdings root below v. These directions
    // keep the zero-holdings corners in the subtree fixed, which is exactly
    // what a per-coordinate certificate cannot see when the optimum sits on
    // shared leaf-liquidation kinks.
    // Shallow cover: maximal flat interior roots.
    std::vector<int> frontier(int v) const {
        std::vector<int> roots;
        const double htol = 1e-12 * (1.0 + x / f.price[v]);
        int su = v + 1;
        while (su < f.sub_end[v]) {
            if (!f.is_leaf[su] && std::abs(h[su]) <= htol) {
                roots.push_back(su);
                su = f.sub_end[su];  // skip the covered subtree
            } else {
                ++su;
            }
        }
        return roots;
    }

    // Deep cover: the parents of flat leaves, kept disjoint.
    std::vector<int> frontier_deep(int v) const {
        std::vector<int> roots;
        const double htol = 1e-12 * (1.0 + x / f.price[v]);
        for (int sl = f.leaf_begin[v]; sl < f.leaf_end[v]; ++sl) {
            const int leaf = f.leaves[static_cast<std::size_t>(sl)];
            if (std::abs(h[leaf]) > htol) continue;
            const int p = f.parent[leaf];
            if (p == v || p < 0) continue;
            if (!roots.empty() && f.sub_end[roots.back()] > p) continue;
            roots.push_back(p);
        }
        return roots;
    }

    // Covering frontier root of a flat index, or -1.
    static int cover_of(const std::vector<int>& roots,
                        const std::vector<int>& sub_end, int idx) {
        for (int u : roots)
            if (idx >= u && idx < sub_end[u]) return u;
        return -1;
    }

    double frontier_deriv(int v, const std::vector<int>& roots, double t,
                          bool right) const {
        const double qv = q[v] + t;
        const double dcash_v = cash_flow(qv, f.price[v], lambda) -
                               cash_flow(q[v], f.price[v], lambda);
        const double slope_v =
            right ? (qv >= 0.0 ? -f.price[v] : -(1.0 - lambda) * f.price[v])
                  : (qv > 0.0 ? -f.price[v] : -(1.0 - lambda) * f.price[v]);
        std::vector<double> dcash_u(roots.size()), slope_u(roots.size());
        for (std::size_t k = 0; k < roots.size(); ++k) {
            const int u = roots[k];
            const double qu = q[u] - t;
            dcash_u[k] = cash_flow(qu, f.price[u], lambda) -
                         cash_flow(q[u], f.price[u], lambda);
            slope_u[k] =
                right ? (qu > 0.0 ? f.price[u] : (1.0 - lambda) * f.price[u])
                      : (qu >= 0.0 ? f.price[u] : (1.0 - lambda) * f.price[u]);
        }
        double total = 0.0;
        for (int sl = f.leaf_begin[v]; sl < f.leaf_end[v]; ++sl) {
            const int leaf = f.leaves[static_cast<std::size_t>(sl)];
            int cover = -1;
            for (std::size_t k = 0; k < roots.size(); ++k)
                if (leaf >= roots[k] && leaf < f.sub_end[roots[k]]) {
                    cover = static_cast<int>(k);
                    break;
                }
            const double hh = cover < 0 ? h[leaf] + t : h[leaf];
            const double w =
                W[leaf] + dcash_v +
                (cover < 0 ? 0.0 : dcash_u[static_cast<std::size_t>(cover)]) +
                wealth_part(hh, f.price[leaf]) -
                wealth_part(h[leaf], f.price[leaf]);
            double slope = slope_v;
            if (cover >= 0)
                slope += slope_u[static_cast<std::size_t>(cover)];
            else
                slope += right ? wp_right(hh, f.price[leaf])
                               : wp_left(hh, f.price[leaf]);
            total += f.prob[leaf] * u.d1(w) * slope;
        }
        return total;
    }

    bool frontier_feasible(int v, const std::vector<int>& roots,
                           double t) const {
        const double qv = q[v] + t;
        const double dcash_v = cash_flow(qv, f.price[v], lambda) -
                               cash_flow(q[v], f.price[v], lambda);
        std::vector<double> dcash_u(roots.size());
        for (std::size_t k = 0; k < roots.size(); ++k) {
            const int u = roots[k];
            dcash_u[k] = cash_flow(q[u] - t, f.price[u], lambda) -
                         cash_flow(q[u], f.price[u], lambda);
        }
        for (int su = v; su < f.sub_end[v]; ++su) {
            int cover = -1;
            for (std::size_t k = 0; k < roots.size(); ++k)
                if (su >= roots[k] && su < f.sub_end[roots[k]]) {
                    cover = static_cast<int>(k);
                    break;
                }
            const double hh = cover < 0 ? h[su] + t : h[su];
            const double cc =
                c[su] + dcash_v +
                (cover < 0 ? 0.0 : dcash_u[static_cast<std::size_t>(cover)]);
            if (f.is_leaf[su]) {
                if (cc + wealth_part(hh, f.price[su]) < kWealthBarrier)
                    return false;
            } else if (cc + liq_part(hh, f.price[su], lambda) < 0.0) {
                return false;
            }
        }
        return true;
    }

    // 1-D concave maximisation along the frontier direction.
    double solve_frontier(int v, const std::vector<int>& roots,
                          double inner_tol) {
        const double dr0 = frontier_deriv(v, roots, 0.0, true);
        const double dl0 = frontier_deriv(v, roots, 0.0, false);
        if (dr0 <= inner_tol && dl0 >= -inner_tol) return 0.0;
        const bool up = dr0 > inner_tol;
        const double sgn = up ? 1.0 : -1.0;
        auto dir = [&](double t) {
            return sgn * frontier_deriv(v, roots, t, up);
        };
        double lo = 0.0;
        double hi = sgn * std::max(1e-3 * x / f.price[v], 1e-9);
        bool boundary = false;
        for (int i = 0; i < 200; ++i) {
            if (!frontier_feasible(v, roots, hi)) {
                double in = lo, out = hi;
                for (int b = 0; b < 80; ++b) {
                    const double mid = 0.5 * (in + out);
                    (frontier_feasible(v, roots, mid) ? in : out) = mid;
                }
                hi = in;
                boundary = true;
                break;
            }
            if (dir(hi) <= 0.0) break;
            lo = hi;
            hi *= 2.0;
            if (std::abs(hi) > 1e14)
                throw std::runtime_error(
                    "maximize_utility: unbounded pass-through direction");
        }
        double t;
        if (boundary && dir(hi) > 0.0) {
            t = hi;
        } else {
            double a = lo, b = hi;
            double cand = 0.5 * (a + b);
            for (int it = 0; it < 200; ++it) {
                const double d = dir(cand);
                if (std::abs(d) <= 0.25 * inner_tol) break;
                if (d > 0.0)
                    a = cand;
                else
                    b = cand;
                cand = 0.5 * (a + b);
                if (std::abs(b - a) <= 1e-16 * (1.0 + std::abs(cand))) break;
            }
            // Snap to a coordinate kink when the subdifferential allows it.
            const double window =
                std::max(std::abs(b - a) * 4.0, 1e-12 * (1.0 + std::abs(cand)));
            std::vector<double> kinks{-q[v]};
            for (int u : roots) kinks.push_back(q[u]);
            for (double z : kinks) {
                if (std::abs(z - cand) > window) continue;
                if (frontier_deriv(v, roots, z, true) <= 0.0 &&
                    frontier_deriv(v, roots, z, false) >= 0.0) {
                    cand = z;
                    break;
                }
            }
            t = cand;
        }
        if (std::abs(t) < 1e-18) return 0.0;
        q[v] += t;
        for (int u : roots) q[u] -= t;
        refresh(v);
        return std::abs(t);
    }

    // Exact joint Newton step on the active pattern: trading nodes keep
    // their cost side, flat leaves keep their holdings at zero (equality
    // constraints), everything else stays fixed. Coordinate and frontier
    // moves identify the pattern; this solves the within-pattern concave
    // program to machine precision, which single directions cannot do once
    // several trades share a leaf-holdings corner.
    double newton_polish() {
        const double htol = 1e-12 * (1.0 + x / f.price[0]);
        std::vector<int> active;  // trading nodes
        std::vector<int> col(f.n, -1);
        for (int v = 0; v < f.n; ++v) {
            if (f.is_leaf[v] || q[v] == 0.0) continue;
            col[v] = static_cast<int>(active.size());
            active.push_back(v);
        }
        if (active.empty()) return 0.0;
        const int m = static_cast<int>(active.size());

        // Flat-leaf constraints: sum of active trades on the path is fixed.
        // Identical rows (siblings under one flat root) are deduplicated.
        std::vector<std::vector<int>> rows;
        for (int leaf : f.leaves) {
            if (std::abs(h[leaf]) > htol) continue;
            std::vector<int> row;
            for (int a = leaf; a >= 0; a = f.parent[a])
                if (col[a] >= 0) row.push_back(col[a]);
            if (row.empty()) continue;
            std::sort(row.begin(), row.end());
            bool dup = false;
            for (const auto& r : rows)
                if (r == row) {
                    dup = true;
                    break;
                }
            if (!dup) rows.push_back(std::move(row));
        }
        const int k = static_cast<int>(rows.size());

        // Gradient and Hessian of the pattern-restricted objective.
        Eigen::VectorXd grad = Eigen::VectorXd::Zero(m);
        Eigen::MatrixXd hess = Eigen::MatrixXd::Zero(m, m);
        std::vector<int> anc;
        std::vector<double> slope_anc;
        for (int leaf : f.leaves) {
            anc.clear();
            slope_anc.clear();
            for (int a = leaf; a >= 0; a = f.parent[a]) {
                if (col[a] < 0) continue;
                anc.push_back(col[a]);
                slope_anc.push_back(q[a] > 0.0 ? -f.price[a]
                                               : -(1.0 - lambda) * f.price[a]);
            }
            if (anc.empty()) continue;
            const bool flat = std::abs(h[leaf]) <= htol;
            const double side = flat ? 0.0
                                : (h[leaf] > 0.0
                                       ? (1.0 - lambda) * f.price[leaf]
                                       : f.price[leaf]);
            const double d1 = u.d1(W[leaf]);
            const double d2 = u.d2(W[leaf]);
            for (std::size_t i = 0; i < anc.size(); ++i) {
                const double di = slope_anc[i] + side;
                grad(anc[i]) += f.prob[leaf] * d1 * di;
                for (std::size_t j = 0; j < anc.size(); ++j) {
                    const double dj = slope_anc[j] + side;
                    hess(anc[i], anc[j]) += f.prob[leaf] * d2 * di * dj;
                }
            }
        }

        // KKT system [H A'; A 0] [dt; mu] = [-g; 0].
        Eigen::MatrixXd kkt = Eigen::MatrixXd::Zero(m + k, m + k);
        kkt.topLeftCorner(m, m) = hess;
        for (int r = 0; r < k; ++r)
            for (int cidx : rows[static_cast<std::size_t>(r)]) {
                kkt(m + r, cidx) = 1.0;
                kkt(cidx, m + r) = 1.0;
            }
        Eigen::VectorXd rhs = Eigen::VectorXd::Zero(m + k);
        rhs.head(m) = -grad;
        Eigen::VectorXd sol = kkt.fullPivLu().solve(rhs);
        if (!sol.allFinite()) return 0.0;

        // Backtracking step keeping the pattern, admissibility and barrier.
        const std::vector<double> saved_q = q;
        double alpha = 1.0;
        const double base_value = objective();
        for (int bt = 0; bt < 60; ++bt, alpha *= 0.5) {
            q = saved_q;
            bool sign_ok = true;
            for (int i = 0; i < m; ++i) {
                const int v = active[static_cast<std::size_t>(i)];
                q[v] += alpha * sol(i);
                if (saved_q[v] > 0.0 ? q[v] < 0.0 : q[v] > 0.0) sign_ok = false;
            }
            if (!sign_ok) continue;
            refresh(0);
            bool ok = true;
            for (int v = 0; v < f.n && ok; ++v) {
                if (f.is_leaf[v]) {
                    if (W[v] < kWealthBarrier) ok = false;
                } else if (c[v] + liq_part(h[v], f.price[v], lambda) < 0.0) {
                    ok = false;
                }
            }
            if (ok &&
                objective() >=
                    base_value - 1e-14 * (1.0 + std::abs(base_value))) {
                double moved = 0.0;
                for (int i = 0; i < m; ++i) moved += std::abs(alpha * sol(i));
                return moved;
            }
        }
        q = saved_q;
        refresh(0);
        return 0.0;
    }

    // First-order optimality norm. Per trade node the objective is concave
    // in the net trade with kinks (trade cost at q = 0, liquidation at zero
    // leaf holdings); stationarity is 0 in the subdifferential interval
    // [D_right, D_left], so the residual is the distance to that interval,
    // which also covers the projected-gradient condition of the buy/sell
    // split at q = 0.
    double kkt_residual() const {
        std::vector<double> sum_u(f.n, 0.0), sum_gr(f.n, 0.0),
            sum_gl(f.n, 0.0);
        for (int v = f.n - 1; v >= 0; --v) {
            if (f.is_leaf[v]) {
                const double t = f.prob[v] * u.d1(W[v]);
                sum_u[v] = t;
                sum_gr[v] = t * wp_right(h[v], f.price[v]);
                sum_gl[v] = t * wp_left(h[v], f.price[v]);
            }
            if (v > 0) {
                sum_u[f.parent[v]] += sum_u[v];
                sum_gr[f.parent[v]] += sum_gr[v];
                sum_gl[f.parent[v]] += sum_gl[v];
            }
        }
        double acc = 0.0;
        for (int v = 0; v < f.n; ++v) {
            if (f.is_leaf[v]) continue;
            const double slope_r =
                q[v] >= 0.0 ? -f.price[v] : -(1.0 - lambda) * f.price[v];
            const double slope_l =
                q[v] > 0.0 ? -f.price[v] : -(1.0 - lambda) * f.price[v];
            const double d_right = slope_r * sum_u[v] + sum_gr[v];
            const double d_left = slope_l * sum_u[v] + sum_gl[v];
            double up = std::max(d_right, 0.0);
            double down = std::max(-d_left, 0.0);
            // Project out directions blocked by an active admissibility
            // constraint somewhere in the subtree; only significant
            // components pay for the feasibility probe.
            const double eps = 1e-11 * (1.0 + std::abs(q[v]));
            if (up > 0.0 && !feasible(v, eps)) up = 0.0;
            if (down > 0.0 && !feasible(v, -eps)) down = 0.0;
            const double r = up + down;
            acc += r * r;
        }
        return std::sqrt(acc);
    }
};

OptimizationResult pack_result(const ScenarioTree& tree, const Solver& s,
                               double residual, long iterations, double tol) {
    OptimizationResult out;
    const std::size_t n = tree.nodes().size();
    out.holdings.assign(n, 0.0);
    out.cash.assign(n, 0.0);
    out.leaf_wealth.assign(n, 0.0);
    for (int v = 0; v < s.f.n; ++v) {
        const auto id = static_cast<std::size_t>(s.f.order[v]);
        out.holdings[id] = s.h[v];
        out.cash[id] = s.c[v];
        if (s.f.is_leaf[v]) out.leaf_wealth[id] = s.W[v];
    }
    out.value = s.objective();
    out.kkt_residual = residual;
    out.iterations = iterations;
    out.tolerance = tol;
    return out;
}

OptimizationResult coordinate_solve(const ScenarioTree& tree,
                                    const UtilitySpec& utility, double lambda,
                                    double x, double tol) {
    if (!(x > 0.0))
        throw std::invalid_argument("maximize_utility: x must be positive");
    if (!(tol > 0.0))
        throw std::invalid_argument("maximize_utility: tol must be positive");
    const Flat flat = Flat::build(tree);
    Solver s(flat, utility, lambda, x);

    std::vector<int> trade_nodes;
    for (int v = 0; v < flat.n; ++v)
        if (!flat.is_leaf[v]) trade_nodes.push_back(v);

    const long max_iter = 1000000;
    long iterations = 0;
    bool forward = true;
    const double h_scale = x / flat.price[0];

    auto sweep = [&]() {
        double moved = 0.0;
        const double inner =
            0.25 * tol /
            std::sqrt(2.0 * static_cast<double>(trade_nodes.size()));
        if (forward) {
            for (int v : trade_nodes) {
                moved += s.solve_node(v, inner);
                ++iterations;
            }
        } else {
            for (auto it = trade_nodes.rbegin(); it != trade_nodes.rend();
                 ++it) {
                moved += s.solve_node(*it, inner);
                ++iterations;
            }
        }
        forward = !forward;
        return moved;
    };

    // Kink-smoothing continuation: the smooth stages only steer the iterate
    // into the right corner basin, so they run to loose targets under a
    // sweep cap; the exact stage carries the convergence certificate.
    for (double stage : {1e-2, 1e-4, 1e-6, 1e-8}) {
        s.kink_eps = stage * h_scale;
        s.refresh(0);
        const double stage_tol = std::max({100.0 * tol, 0.01 * stage, 1e-7});
        for (int k = 0; k < 300; ++k) {
            if (s.kkt_residual() <= stage_tol) break;
            if (sweep() == 0.0) break;
        }
    }

    s.kink_eps = 0.0;
    s.refresh(0);
    const double pair_inner =
        0.25 * tol / std::sqrt(2.0 * static_cast<double>(trade_nodes.size()));
    // Frontier moves: trade at a node, unwind at the flat-holdings roots of
    // its subtree; these unwedge holdings corners shared along paths.
    auto pair_round = [&]() {
        double moved = 0.0;
        for (int v : trade_nodes) {
            const auto shallow = s.frontier(v);
            if (!shallow.empty()) {
                moved += s.solve_frontier(v, shallow, pair_inner);
                ++iterations;
            }
            const auto deep = s.frontier_deep(v);
            if (!deep.empty() && deep != shallow) {
                moved += s.solve_frontier(v, deep, pair_inner);
                ++iterations;
            }
        }
        return moved;
    };

    double residual = s.kkt_residual();
    for (int phase = 0;; ++phase) {
        for (int k = 0; k < 50; ++k) {
            if (residual <= tol) break;
            const double moved = sweep();
            residual = s.kkt_residual();
            if (moved == 0.0) break;
            if (iterations >= max_iter) {
                char buf[128];
                std::snprintf(buf, sizeof(buf),
                              "maximize_utility: iteration cap reached, KKT "
                              "residual %.3e > tol %.3e",
                              residual, tol);
                throw std::runtime_error(buf);
            }
        }
        double frontier_moved = 0.0;
        for (int r = 0; r < 20; ++r) {
            const double pm = pair_round();
            frontier_moved += pm;
            if (pm <= 1e-15) break;
        }
        double polish_moved = 0.0;
        for (int r = 0; r < 25; ++r) {
            const double pm = s.newton_polish();
            polish_moved += pm;
            ++iterations;
            if (pm <= 1e-15) break;
        }
        residual = s.kkt_residual();
        if (frontier_moved + polish_moved <= 1e-15 && residual <= tol) break;
        if (phase >= 400 || iterations >= max_iter) {
            if (residual <= tol) break;
            char buf[128];
            std::snprintf(buf, sizeof(buf),
                          "maximize_utility: wedged with KKT residual %.3e > "
                          "tol %.3e after frontier polish",
                          residual, tol);
            throw std::runtime_error(buf);
        }
    }

    // Solution invariants.
    for (int leaf : flat.leaves)
        if (!(s.W[leaf] >= kWealthFloor))
            throw std::runtime_error(
                "maximize_utility: terminal wealth " +
                std::to_string(s.W[leaf]) + " below the positivity floor");
    for (int v = 0; v < flat.n; ++v)
        if (s.c[v] + liq_part(s.h[v], flat.price[v], lambda) < -1e-12 * x)
            throw std::runtime_error(
                "maximize_utility: admissibility violated at a node");
    return pack_result(tree, s, residual, iterations, tol);
}

}  // namespace

OptimizationResult maximize_utility(const ScenarioTree& tree, CostSpec cost,
                                    const UtilitySpec& utility, double x,
                                    double tol) {
    return coordinate_solve(tree, utility, cost.lambda, x, tol);
}

namespace {

// Exact one-step solve of sum_w p_w G_w R_w (1 + pi R_w)^{alpha-1} = 0
// (log utility is alpha -> 0 with G = 1). The left side is strictly
// decreasing in pi on the admissible interval.
struct OneStep {
    std::vector<double> p, g, r;

    double psi(double pi, double alpha) const {
        double total = 0.0;
        for (std::size_t i = 0; i < p.size(); ++i)
            total += p[i] * g[i] * r[i] *
                     std::pow(1.0 + pi * r[i], alpha - 1.0);
        return total;
    }

    double solve(double alpha) const {
        double r_max = 0.0, r_min = 0.0;
        for (double ri : r) {
            r_max = std::max(r_max, ri);
            r_min = std::min(r_min, ri);
        }
        if (r_max <= 0.0 && r_min >= 0.0) return 0.0;  // all returns zero
        if (r_min >= 0.0 || r_max <= 0.0)
            throw std::runtime_error(
                "frictionless_optimize: one-step problem is unbounded (all "
                "returns on one side of zero)");
        // 1 + pi r > 0 for all branches.
        const double margin = 1e-12;
        double lo = -1.0 / r_max;
        double hi = 1.0 / (-r_min);
        lo += margin * (hi - lo);
        hi -= margin * (hi - lo);
        double flo = psi(lo, alpha);
        double fhi = psi(hi, alpha);
        if (!(flo > 0.0) || !(fhi < 0.0)) {
            // Numerical edge: the root sits against a boundary.
            if (flo <= 0.0) return lo;
            return hi;
        }
        double a = lo, b = hi, cand = 0.0;
        if (!(cand > a && cand < b)) cand = 0.5 * (a + b);
        for (int it = 0; it < 200; ++it) {
            const double fc = psi(cand, alpha);
            if (fc > 0.0)
                a = cand;
            else
                b = cand;
            // Newton using the analytic derivative.
            double d = 0.0;
            for (std::size_t i = 0; i < p.size(); ++i)
                d += p[i] * g[i] * r[i] * r[i] * (alpha - 1.0) *
                     std::pow(1.0 + cand * r[i], alpha - 2.0);
            double next = d < 0.0 ? cand - fc / d : 0.5 * (a + b);
            if (!(next > a && next < b) || !std::isfinite(next))
                next = 0.5 * (a + b);
            if (std::abs(next - cand) <= 1e-17 * (1.0 + std::abs(cand))) {
                cand = next;
                break;
            }
            cand = next;
        }
        return cand;
    }
};

OptimizationResult backward_induction(const ScenarioTree& tree,
                                      std::span<const double> prices,
                                      const UtilitySpec& utility, double x,
                                      double tol) {
    const Flat flat = Flat::build(tree);
    const bool is_log = utility.kind == UtilitySpec::Kind::log_utility;
    const double alpha = is_log ? 0.0 : utility.alpha;
    std::vector<double> mult(flat.n, 1.0);  // G for power, additive L for log
    if (is_log) std::fill(mult.begin(), mult.end(), 0.0);
    std::vector<double> pi(flat.n, 0.0);

    auto price_of = [&](int v) {
        return prices[static_cast<std::size_t>(flat.order[v])];
    };

    for (int v = flat.n - 1; v >= 0; --v) {
        if (flat.is_leaf[v]) continue;
        const auto kids = flat.children(v);
        OneStep step;
        step.p.reserve(kids.size());
        step.g.reserve(kids.size());
        step.r.reserve(kids.size());
        for (int w : kids) {
            step.p.push_back(flat.cprob[w]);
            step.g.push_back(is_log ? 1.0 : mult[w]);
            step.r.push_back(price_of(w) / price_of(v) - 1.0);
        }
        const double opt = step.solve(alpha);
        pi[v] = opt;
        if (is_log) {
            double acc = 0.0;
            for (std::size_t i = 0; i < kids.size(); ++i)
                acc += step.p[i] * (std::log1p(opt * step.r[i]) +
                                    mult[kids[static_cast<std::size_t>(i)]]);
            mult[v] = acc;
        } else {
            double acc = 0.0;
            for (std::size_t i = 0; i < kids.size(); ++i)
                acc += step.p[i] * mult[kids[static_cast<std::size_t>(i)]] *
                       std::pow(1.0 + opt * step.r[i], alpha);
            mult[v] = acc;
        }
    }

    // Forward wealth propagation.
    std::vector<double> wealth(flat.n, 0.0), hold(flat.n, 0.0),
        cash(flat.n, 0.0);
    wealth[0] = x;
    for (int v = 0; v < flat.n; ++v) {
        if (!flat.is_leaf[v]) {
            hold[v] = pi[v] * wealth[v] / price_of(v);
            cash[v] = wealth[v] - hold[v] * price_of(v);
            for (int w : flat.children(v)) {
                const double r = price_of(w) / price_of(v) - 1.0;
                wealth[w] = wealth[v] * (1.0 + pi[v] * r);
            }
        } else {
            hold[v] = 0.0;
            cash[v] = wealth[v];
        }
    }

    OptimizationResult out;
    const std::size_t n = tree.nodes().size();
    out.holdings.assign(n, 0.0);
    out.cash.assign(n, 0.0);
    out.leaf_wealth.assign(n, 0.0);
    double value = 0.0;
    for (int v = 0; v < flat.n; ++v) {
        const auto id = static_cast<std::size_t>(flat.order[v]);
        out.holdings[id] = hold[v];
        out.cash[id] = cash[v];
        if (flat.is_leaf[v]) {
            out.leaf_wealth[id] = wealth[v];
            value += flat.prob[v] * (is_log ? std::log(wealth[v])
                                            : std::pow(wealth[v], alpha) / alpha);
        }
    }
    out.value = value;
    out.iterations = flat.n;
    out.tolerance = tol;
    // Certify with the same KKT machinery at lambda = 0.
    {
        Flat f2 = flat;
        for (int v = 0; v < f2.n; ++v) f2.price[v] = price_of(v);
        Solver s(f2, utility, 0.0, x);
        for (int v = 0; v < f2.n; ++v)
            s.q[v] = out.holdings[static_cast<std::size_t>(f2.order[v])] -
                     (v == 0 ? 0.0
                             : out.holdings[static_cast<std::size_t>(
                                   f2.order[f2.parent[v]])]);
        for (int leaf : f2.leaves) s.q[leaf] = 0.0;
        s.refresh(0);
        out.kkt_residual = s.kkt_residual();
    }
    return out;
}

}  // namespace

OptimizationResult frictionless_optimize(const ScenarioTree& tree,
                                         std::span<const double> prices,
                                         const UtilitySpec& utility, double x,
                                         double tol) {
    if (prices.size() != tree.nodes().size())
        throw std::invalid_argument(
            "frictionless_optimize: need one price per node");
    if (!(x > 0.0))
        throw std::invalid_argument("frictionless_optimize: x must be positive");
    for (double p : prices)
        if (!(p > 0.0))
            throw std::invalid_argument(
                "frictionless_optimize: prices must be positive");
    if (utility.kind == UtilitySpec::Kind::custom) {
        // No closed backward recursion for general utilities; rerun the
        // coordinate solver with the supplied prices and no spread.
        std::vector<TreeNode> nodes = tree.nodes();
        for (auto& n : nodes) n.price = prices[static_cast<std::size_t>(n.id)];
        ScenarioTree repriced(std::move(nodes),
                              std::vector<double>(tree.times().begin(),
                                                  tree.times().end()));
        return coordinate_solve(repriced, utility, 0.0, x, tol);
    }
    return backward_induction(tree, prices, utility, x, tol);
}

namespace {

double trade_of(const ScenarioTree& tree, const OptimizationResult& result,
                int id) {
    const auto& node = tree.nodes()[static_cast<std::size_t>(id)];
    const double parent_h =
        node.parent < 0 ? 0.0
                        : result.holdings[static_cast<std::size_t>(node.parent)];
    return result.holdings[static_cast<std::size_t>(id)] - parent_h;
}

}  // namespace

ShadowReport extract_shadow(const ScenarioTree& tree, CostSpec cost,
                            const UtilitySpec& utility,
                            const OptimizationResult& result) {
    const auto& nodes = tree.nodes();
    const std::size_t n = nodes.size();
    if (result.holdings.size() != n)
        throw std::invalid_argument("extract_shadow: result does not match tree");
    const double lambda = cost.lambda;
    Eval u(utility);

    ShadowReport rep;
    rep.shadow_price.assign(n, 0.0);
    rep.y0.assign(n, 0.0);
    rep.y1.assign(n, 0.0);

    // Deflator: U'(terminal wealth) at leaves, conditional expectations
    // backward (ids are topologically ordered, parents first).
    for (std::size_t i = n; i-- > 0;) {
        const auto& node = nodes[i];
        if (node.children.empty()) {
            rep.y0[i] = u.d1(result.leaf_wealth[i]);
        } else {
            double acc = 0.0;
            for (int w : node.children)
                acc += nodes[static_cast<std::size_t>(w)].prob *
                       rep.y0[static_cast<std::size_t>(w)];
            rep.y0[i] = acc;
        }
    }
    rep.y_root = rep.y0[0];

    // Trade threshold in wealth units.
    const double x0 = result.cash[0] + result.holdings[0] * nodes[0].price;
    auto trades = [&](std::size_t i) {
        return std::abs(trade_of(tree, result, static_cast<int>(i))) *
                   nodes[i].price >
               1e-9 * std::max(x0, 1.0);
    };

    // Backward interval recursion for the feasible shadow values.
    std::vector<double> lo(n, 0.0), hi(n, 0.0);
    for (std::size_t i = n; i-- > 0;) {
        const auto& node = nodes[i];
        const double bid = (1.0 - lambda) * node.price;
        const double ask = node.price;
        double l, hgh;
        if (node.children.empty()) {
            const double hold = result.holdings[i];
            if (hold * node.price > 1e-9 * std::max(x0, 1.0)) {
                l = hgh = bid;  // liquidation sells at the bid
            } else if (hold * node.price < -1e-9 * std::max(x0, 1.0)) {
                l = hgh = ask;  // covering a short buys at the ask
            } else {
                l = bid;
                hgh = ask;
            }
        } else {
            double mlo = 0.0, mhi = 0.0;
            for (int w : node.children) {
                const auto wi = static_cast<std::size_t>(w);
                const double qw = nodes[wi].prob * rep.y0[wi] / rep.y0[i];
                mlo += qw * lo[wi];
                mhi += qw * hi[wi];
            }
            l = std::max(mlo, bid);
            hgh = std::min(mhi, ask);
            if (l > hgh) {
                ++rep.clamped_nodes;
                const double point = mhi < bid ? bid : ask;
                const double conflict =
                    (mhi < bid ? bid - mhi : mlo - ask) / node.price;
                rep.max_pin_conflict =
                    std::max(rep.max_pin_conflict, conflict);
                l = hgh = point;
            }
        }
        if (trades(i)) {
            const double pin =
                trade_of(tree, result, static_cast<int>(i)) > 0.0 ? ask : bid;
            if (pin >= l && pin <= hgh) {
                l = hgh = pin;
            } else {
                const double conflict =
                    (pin < l ? l - pin : pin - hgh) / node.price;
                rep.max_pin_conflict = std::max(rep.max_pin_conflict, conflict);
                l = hgh = pin < l ? l : hgh;
            }
        }
        lo[i] = l;
        hi[i] = hgh;
    }

    // Forward selection: hit each parent's value exactly by interpolating
    // between the children's interval ends.
    rep.shadow_price[0] = 0.5 * (lo[0] + hi[0]);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& node = nodes[i];
        if (node.children.empty()) continue;
        const double target = rep.shadow_price[i];
        double mlo = 0.0, mhi = 0.0;
        for (int w : node.children) {
            const auto wi = static_cast<std::size_t>(w);
            const double qw = nodes[wi].prob * rep.y0[wi] / rep.y0[i];
            mlo += qw * lo[wi];
            mhi += qw * hi[wi];
        }
        double t = 0.0;
        if (mhi > mlo)
            t = std::clamp((target - mlo) / (mhi - mlo), 0.0, 1.0);
        double achieved = 0.0;
        for (int w : node.children) {
            const auto wi = static_cast<std::size_t>(w);
            rep.shadow_price[wi] = lo[wi] + t * (hi[wi] - lo[wi]);
            const double qw = nodes[wi].prob * rep.y0[wi] / rep.y0[i];
            achieved += qw * rep.shadow_price[wi];
        }
        rep.max_selection_residual =
            std::max(rep.max_selection_residual,
                     std::abs(achieved - target) / node.price);
    }
    for (std::size_t i = 0; i < n; ++i)
        rep.y1[i] = rep.y0[i] * rep.shadow_price[i];

    double dual = 0.0;
    const auto& uncond = tree.node_probability();
    for (int leaf : tree.leaf_ids())
        dual += uncond[static_cast<std::size_t>(leaf)] *
                utility.v_conjugate(rep.y0[static_cast<std::size_t>(leaf)]);
    rep.dual_value = dual;
    return rep;
}

VerificationReport verify_shadow(const ScenarioTree& tree, CostSpec cost,
                                 const UtilitySpec& utility, double x,
                                 const OptimizationResult& result,
                                 ShadowReport& report, double tol) {
    const auto& nodes = tree.nodes();
    const std::size_t n = nodes.size();
    const double lambda = cost.lambda;
    VerificationReport out;

    // (a) spread containment, relative to the node price.
    double worst_containment = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double s = report.shadow_price[i];
        const double bid = (1.0 - lambda) * nodes[i].price;
        const double viol =
            std::max(bid - s, s - nodes[i].price) / nodes[i].price;
        worst_containment = std::max(worst_containment, viol);
    }
    out.containment = {worst_containment <= tol, worst_containment};

    // (b) boundary trading.
    const double x0 = result.cash[0] + result.holdings[0] * nodes[0].price;
    double worst_boundary = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double dq = trade_of(tree, result, static_cast<int>(i));
        if (std::abs(dq) * nodes[i].price <= 1e-9 * std::max(x0, 1.0)) continue;
        const double pin =
            dq > 0.0 ? nodes[i].price : (1.0 - lambda) * nodes[i].price;
        worst_boundary =
            std::max(worst_boundary,
                     std::abs(report.shadow_price[i] - pin) / nodes[i].price);
    }
    out.boundary = {worst_boundary <= 100.0 * tol, worst_boundary};

    // (c) frictionless re-optimisation under the shadow price.
    double worst_frictionless;
    {
        const auto fric = frictionless_optimize(
            tree, report.shadow_price, utility, x, std::min(tol, 1e-10));
        const double value_gap = std::abs(fric.value - result.value) /
                                 std::max(1.0, std::abs(result.value));
        double wealth_gap = 0.0;
        for (int leaf : tree.leaf_ids())
            wealth_gap =
                std::max(wealth_gap,
                         std::abs(fric.leaf_wealth[static_cast<std::size_t>(
                                      leaf)] -
                                  result.leaf_wealth[static_cast<std::size_t>(
                                      leaf)]) /
                             x);
        worst_frictionless = std::max(value_gap, wealth_gap);
    }
    out.frictionless = {worst_frictionless <= 100.0 * tol, worst_frictionless};

    // (d) deflated-wealth martingale, post-trade states on both ends.
    double worst_mart = 0.0;
    const double scale = x * report.y_root;
    for (std::size_t i = 0; i < n; ++i) {
        if (nodes[i].children.empty()) continue;
        const double dv = report.y0[i] * result.cash[i] +
                          report.y1[i] * result.holdings[i];
        double acc = 0.0;
        for (int w : nodes[i].children) {
            const auto wi = static_cast<std::size_t>(w);
            acc += nodes[wi].prob * (report.y0[wi] * result.cash[wi] +
                                     report.y1[wi] * result.holdings[wi]);
        }
        worst_mart = std::max(worst_mart, std::abs(acc - dv) / scale);
    }
    out.martingale = {worst_mart <= tol, worst_mart};

    // (e) budget identity E[g Y0_T] = x y.
    double lhs = 0.0;
    const auto& uncond = tree.node_probability();
    for (int leaf : tree.leaf_ids()) {
        const auto li = static_cast<std::size_t>(leaf);
        lhs += uncond[li] * result.leaf_wealth[li] * report.y0[li];
    }
    const double budget_gap = std::abs(lhs - x * report.y_root) / scale;
    out.budget = {budget_gap <= 100.0 * tol, budget_gap};

    report.spread_containment = out.containment;
    report.boundary_trading = out.boundary;
    report.frictionless_match = out.frictionless;
    report.martingale_residual = out.martingale;
    report.budget_identity = out.budget;
    return out;
}

std::vector<double> frictionless_deflator(const ScenarioTree& tree,
                                          std::span<const double> prices) {
    const auto& nodes = tree.nodes();
    const std::size_t n = nodes.size();
    std::vector<double> density(n, 1.0);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& node = nodes[i];
        if (node.children.empty()) continue;
        const double s = prices[i];
        double smin = 1e300, smax = -1e300;
        for (int w : node.children) {
            smin = std::min(smin, prices[static_cast<std::size_t>(w)]);
            smax = std::max(smax, prices[static_cast<std::size_t>(w)]);
        }
        if (!(s > smin && s < smax)) {
            if (std::abs(smax - smin) < 1e-14 * s && std::abs(s - smin) < 1e-12 * s) {
                for (int w : node.children)
                    density[static_cast<std::size_t>(w)] = density[i];
                continue;
            }
            throw std::runtime_error(
                "frictionless_deflator: node price outside the convex hull "
                "of its children (arbitrage at node " +
                std::to_string(i) + ")");
        }
        // Exponential tilting: q_w proportional to p_w exp(theta S_w) with
        // the tilted mean equal to the node price.
        double theta = 0.0;
        for (int it = 0; it < 200; ++it) {
            double z = 0.0, m1 = 0.0, m2 = 0.0;
            for (int w : node.children) {
                const auto wi = static_cast<std::size_t>(w);
                const double e =
                    nodes[wi].prob * std::exp(theta * (prices[wi] - s));
                z += e;
                m1 += e * prices[wi];
                m2 += e * prices[wi] * prices[wi];
            }
            const double mean = m1 / z;
            const double var = m2 / z - mean * mean;
            const double diff = mean - s;
            if (std::abs(diff) <= 1e-15 * s) break;
            theta -= diff / std::max(var, 1e-300);
        }
        double z = 0.0;
        for (int w : node.children) {
            const auto wi = static_cast<std::size_t>(w);
            z += nodes[wi].prob * std::exp(theta * (prices[wi] - s));
        }
        for (int w : node.children) {
            const auto wi = static_cast<std::size_t>(w);
            const double q = std::exp(theta * (prices[wi] - s)) / z;
            density[wi] = density[i] * q;
        }
    }
    return density;
}

ConjugacyReport dual_conjugacy_check(const ScenarioTree& tree, CostSpec cost,
                                     const UtilitySpec& utility, double x,
                                     std::span<const double> y_grid,
                                     std::size_t random_deflators,
                                     std::uint64_t seed) {
    if (y_grid.empty())
        throw std::invalid_argument("dual_conjugacy_check: empty y grid");
    const auto result = maximize_utility(tree, cost, utility, x, 1e-9);
    auto report = extract_shadow(tree, cost, utility, result);

    const auto& nodes = tree.nodes();
    const auto& uncond = tree.node_probability();
    const auto& leaves = tree.leaf_ids();

    // Candidate terminal densities, each with E[Z_T] = 1.
    std::vector<std::vector<double>> candidates;
    {
        std::vector<double> z;
        z.reserve(leaves.size());
        for (int leaf : leaves)
            z.push_back(report.y0[static_cast<std::size_t>(leaf)] /
                        report.y_root);
        candidates.push_back(std::move(z));
    }
    const double lambda = cost.lambda;
    GaussianStream noise(seed, 0xD1A1u);
    std::size_t accepted = 0;
    // Perturb around the extracted deflator's one-step measure; tilts scaled
    // to the spread width so most trials keep a feasible martingale
    // selection.
    const double tilt = 0.5 * std::min(lambda, 0.5);
    for (std::size_t trial = 0;
         trial < 16 * random_deflators && accepted < random_deflators;
         ++trial) {
        std::vector<double> qcond(nodes.size(), 1.0);
        for (std::size_t i = 0; i < nodes.size(); ++i) {
            const auto& node = nodes[i];
            if (node.children.empty()) continue;
            double z = 0.0;
            std::vector<double> w(node.children.size());
            for (std::size_t k = 0; k < node.children.size(); ++k) {
                const auto wi = static_cast<std::size_t>(node.children[k]);
                const double base =
                    nodes[wi].prob * report.y0[wi] / report.y0[i];
                w[k] = base * std::exp(tilt * noise.next());
                z += w[k];
            }
            for (std::size_t k = 0; k < node.children.size(); ++k)
                qcond[static_cast<std::size_t>(node.children[k])] = w[k] / z;
        }
        // Interval recursion under qcond.
        std::vector<double> lo(nodes.size()), hi(nodes.size());
        bool feasible = true;
        for (std::size_t i = nodes.size(); i-- > 0 && feasible;) {
            const auto& node = nodes[i];
            const double bid = (1.0 - lambda) * node.price;
            const double ask = node.price;
            if (node.children.empty()) {
                lo[i] = bid;
                hi[i] = ask;
                continue;
            }
            double mlo = 0.0, mhi = 0.0;
            for (int w : node.children) {
                const auto wi = static_cast<std::size_t>(w);
                mlo += qcond[wi] * lo[wi];
                mhi += qcond[wi] * hi[wi];
            }
            lo[i] = std::max(mlo, bid);
            hi[i] = std::min(mhi, ask);
            if (lo[i] > hi[i]) feasible = false;
        }
        if (!feasible) continue;
        // Terminal density of the tilted measure.
        std::vector<double> dens(nodes.size(), 1.0);
        for (std::size_t i = 1; i < nodes.size(); ++i)
            dens[i] = dens[static_cast<std::size_t>(nodes[i].parent)] *
                      qcond[i] / nodes[i].prob;
        std::vector<double> z;
        z.reserve(leaves.size());
        for (int leaf : leaves) z.push_back(dens[static_cast<std::size_t>(leaf)]);
        candidates.push_back(std::move(z));
        ++accepted;
    }

    ConjugacyReport out;
    out.u_of_x = result.value;
    out.deflators_tested = candidates.size();
    out.dual_min = std::numeric_limits<double>::infinity();
    out.worst_weak_duality = -std::numeric_limits<double>::infinity();
    for (double y : y_grid) {
        if (!(y > 0.0))
            throw std::invalid_argument(
                "dual_conjugacy_check: y grid must be positive");
        for (const auto& z : candidates) {
            double v = 0.0;
            for (std::size_t k = 0; k < leaves.size(); ++k)
                v += uncond[static_cast<std::size_t>(leaves[k])] *
                     utility.v_conjugate(y * z[k]);
            const double total = v + x * y;
            if (total < out.dual_min) {
                out.dual_min = total;
                out.y_at_min = y;
            }
            out.worst_weak_duality =
                std::max(out.worst_weak_duality, out.u_of_x - total);
        }
    }
    out.gap = out.u_of_x - out.dual_min;
    return out;
}

ConjugacyReport frictionless_conjugacy_check(const ScenarioTree& tree,
                                             const UtilitySpec& utility,
                                             double x,
                                             std::span<const double> y_grid) {
    if (y_grid.empty())
        throw std::invalid_argument("frictionless_conjugacy_check: empty y grid");
    const auto& nodes = tree.nodes();
    std::vector<double> prices(nodes.size());
    for (std::size_t i = 0; i < nodes.size(); ++i) prices[i] = nodes[i].price;
    const auto result = frictionless_optimize(tree, prices, utility, x, 1e-12);
    const auto density = frictionless_deflator(tree, prices);

    const auto& uncond = tree.node_probability();
    const auto& leaves = tree.leaf_ids();
    ConjugacyReport out;
    out.u_of_x = result.value;
    out.deflators_tested = 1;
    out.dual_min = std::numeric_limits<double>::infinity();
    out.worst_weak_duality = -std::numeric_limits<double>::infinity();
    for (double y : y_grid) {
        if (!(y > 0.0))
            throw std::invalid_argument(
                "frictionless_conjugacy_check: y grid must be positive");
        double v = 0.0;
        for (int leaf : leaves) {
            const auto li = static_cast<std::size_t>(leaf);
            v += uncond[li] * utility.v_conjugate(y * density[li]);
        }
        const double total = v + x * y;
        if (total < out.dual_min) {
            out.dual_min = total;
            out.y_at_min = y;
        }
        out.worst_weak_duality =
            std::max(out.worst_weak_duality, out.u_of_x - total);
    }
    out.gap = out.u_of_x - out.dual_min;
    return out;
}

double myopic_check(const ScenarioTree& tree, const ShadowReport& report,
                    const OptimizationResult& result) {
    const auto& nodes = tree.nodes();
    double worst = 0.0;
    for (std::size_t i = 0; i < nodes.size(); ++i) {
        const auto& node = nodes[i];
        if (node.children.empty()) continue;
        const double s_hat = report.shadow_price[i];
        const double wealth =
            result.cash[i] + result.holdings[i] * s_hat;
        if (!(wealth > 0.0))
            throw std::runtime_error(
                "myopic_check: nonpositive shadow wealth at node " +
                std::to_string(i));
        const double pi = result.holdings[i] * s_hat / wealth;
        double foc = 0.0;
        for (int w : node.children) {
            const auto wi = static_cast<std::size_t>(w);
            const double r = report.shadow_price[wi] / s_hat - 1.0;
            foc += nodes[wi].prob * r / (1.0 + pi * r);
        }
        worst = std::max(worst, std::abs(foc));
    }
    return worst;
}

}  // namespace fbmtc
