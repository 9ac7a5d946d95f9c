#include "fbmtc/tree.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>
#include <string>

#include "json.hpp"

namespace fbmtc {

ScenarioTree::ScenarioTree(std::vector<TreeNode> nodes,
                           std::vector<double> times)
    : nodes_(std::move(nodes)), times_(std::move(times)) {
    if (nodes_.empty()) throw std::invalid_argument("ScenarioTree: no nodes");
    if (times_.size() < 2)
        throw std::invalid_argument("ScenarioTree: depth must be >= 1");
    if (nodes_[0].parent != -1 || nodes_[0].time_index != 0)
        throw std::invalid_argument(
            "ScenarioTree: node 0 must be the root at time index 0");
    node_prob_.assign(nodes_.size(), 0.0);
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        const TreeNode& n = nodes_[i];
        if (n.id != static_cast<int>(i))
            throw std::invalid_argument("ScenarioTree: node ids must be 0..n-1 in order");
        if (!(n.price > 0.0))
            throw std::invalid_argument("ScenarioTree: prices must be positive");
        if (!(n.prob > 0.0))
            throw std::invalid_argument(
                "ScenarioTree: branch probabilities must be positive");
        if (i > 0) {
            if (n.parent < 0 || n.parent >= static_cast<int>(i))
                throw std::invalid_argument(
                    "ScenarioTree: parents must precede children");
            if (n.time_index !=
                nodes_[static_cast<std::size_t>(n.parent)].time_index + 1)
                throw std::invalid_argument(
                    "ScenarioTree: child time index must increment by one");
        }
        if (n.time_index >= static_cast<int>(times_.size()))
            throw std::invalid_argument("ScenarioTree: time index out of range");
    }
    // Rebuild child lists from parents; validate conditional probabilities.
    for (auto& n : nodes_) n.children.clear();
    for (std::size_t i = 1; i < nodes_.size(); ++i)
        nodes_[static_cast<std::size_t>(nodes_[i].parent)].children.push_back(
            static_cast<int>(i));
    node_prob_[0] = 1.0;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        const TreeNode& n = nodes_[i];
        if (i > 0)
            node_prob_[i] =
                node_prob_[static_cast<std::size_t>(n.parent)] * n.prob;
        if (n.children.empty()) {
            leaves_.push_back(static_cast<int>(i));
            continue;
        }
        double total = 0.0;
        for (int c : n.children) total += nodes_[static_cast<std::size_t>(c)].prob;
        if (std::abs(total - 1.0) > 1e-9)
            throw std::invalid_argument(
                "ScenarioTree: conditional probabilities at node " +
                std::to_string(i) + " sum to " + std::to_string(total));
    }
    double leaf_mass = 0.0;
    for (int l : leaves_) leaf_mass += node_prob_[static_cast<std::size_t>(l)];
    if (std::abs(leaf_mass - 1.0) > 1e-8)
        throw std::invalid_argument("ScenarioTree: leaf mass " +
                                    std::to_string(leaf_mass));
}

std::string ScenarioTree::to_json_string() const {
    nlohmann::json j;
    j["version"] = 1;
    j["times"] = times_;
    if (!metadata.empty()) j["metadata"] = metadata;
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& n : nodes_) {
        arr.push_back({{"id", n.id},
                       {"parent", n.parent},
                       {"time_index", n.time_index},
                       {"price", n.price},
                       {"prob", n.prob}});
    }
    j["nodes"] = std::move(arr);
    return j.dump(2);
}

ScenarioTree ScenarioTree::from_json_string(const std::string& text) {
    const nlohmann::json j = nlohmann::json::parse(text);
    std::vector<double> times = j.at("times").get<std::vector<double>>();
    std::vector<TreeNode> nodes;
    for (const auto& item : j.at("nodes")) {
        TreeNode n;
        n.id = item.at("id").get<int>();
        n.parent = item.at("parent").get<int>();
        n.time_index = item.at("time_index").get<int>();
        n.price = item.at("price").get<double>();
        n.prob = item.at("prob").get<double>();
        nodes.push_back(std::move(n));
    }
    ScenarioTree tree(std::move(nodes), std::move(times));
    if (j.contains("metadata")) tree.metadata = j["metadata"].get<std::string>();
    return tree;
}

ScenarioTree build_fbs_tree(const ModelSpec& model, int depth,
                            std::uint64_t seed) {
    if (depth < 1) throw std::invalid_argument("build_fbs_tree: depth >= 1");
    if (depth > 14)
        throw std::invalid_argument(
            "build_fbs_tree: depth " + std::to_string(depth) +
            " too large; a non-recombining binary tree would hold " +
            std::to_string((1ull << (depth + 1)) - 1) + " nodes (cap 2^15-1)");

    const int n = depth;
    std::vector<double> times(static_cast<std::size_t>(n) + 1);
    for (int i = 0; i <= n; ++i)
        times[static_cast<std::size_t>(i)] =
            model.horizon * static_cast<double>(i) / static_cast<double>(n);

    // Conditional mean weights and variances of B_{t_{d+1}} given
    // (B_{t_1}, ..., B_{t_d}), from the exact covariance.
    Eigen::MatrixXd cov(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            cov(i, j) = fbm_covariance(times[static_cast<std::size_t>(i + 1)],
                                       times[static_cast<std::size_t>(j + 1)],
                                       model.hurst);
    std::vector<Eigen::VectorXd> weights(static_cast<std::size_t>(n));
    std::vector<double> cond_var(static_cast<std::size_t>(n));
    for (int d = 0; d < n; ++d) {
        if (d == 0) {
            weights[0] = Eigen::VectorXd();
            cond_var[0] = cov(0, 0);
        } else {
            const Eigen::MatrixXd gd = cov.topLeftCorner(d, d);
            const Eigen::VectorXd cd = cov.block(0, d, d, 1);
            const Eigen::VectorXd w = gd.llt().solve(cd);
            weights[static_cast<std::size_t>(d)] = w;
            double v = cov(d, d) - cd.dot(w);
            if (v < -1e-10)
                throw std::runtime_error(
                    "build_fbs_tree: negative conditional variance " +
                    std::to_string(v));
            cond_var[static_cast<std::size_t>(d)] = std::max(v, 0.0);
        }
    }

    std::vector<TreeNode> nodes;
    nodes.reserve((2u << n) - 1u);
    {
        TreeNode root;
        root.id = 0;
        root.parent = -1;
        root.time_index = 0;
        root.price = 1.0;
        root.prob = 1.0;
        nodes.push_back(std::move(root));
    }
    // Depth-first construction; b_values carries the exact fBm value at each
    // node so conditional means use the raw history, not log(price) round
    // trips.
    struct Frame {
        int node;
        int d;  // time index of the node
    };
    std::vector<double> b_values;
    b_values.push_back(0.0);
    std::vector<double> history(static_cast<std::size_t>(n), 0.0);
    std::vector<Frame> stack;
    stack.push_back({0, 0});
    while (!stack.empty()) {
        const Frame f = stack.back();
        stack.pop_back();
        if (f.d == n) continue;
        {
            int u = f.node;
            int d = f.d;
            while (d > 0) {
                history[static_cast<std::size_t>(d - 1)] =
                    b_values[static_cast<std::size_t>(u)];
                u = nodes[static_cast<std::size_t>(u)].parent;
                --d;
            }
        }
        double mean = 0.0;
        const auto& w = weights[static_cast<std::size_t>(f.d)];
        for (int k = 0; k < w.size(); ++k)
            mean += w(k) * history[static_cast<std::size_t>(k)];
        const double sd = std::sqrt(cond_var[static_cast<std::size_t>(f.d)]);
        for (int branch = 0; branch < 2; ++branch) {
            const double b_next = branch == 0 ? mean + sd : mean - sd;
            TreeNode child;
            child.id = static_cast<int>(nodes.size());
            child.parent = f.node;
            child.time_index = f.d + 1;
            child.price =
                std::exp(model.mu * times[static_cast<std::size_t>(f.d + 1)] +
                         model.sigma * b_next);
            child.prob = 0.5;
            nodes.push_back(std::move(child));
            b_values.push_back(b_next);
            stack.push_back({static_cast<int>(nodes.size()) - 1, f.d + 1});
        }
    }

    ScenarioTree tree(std::move(nodes), std::move(times));
    tree.metadata = "fbs_tree mu=" + std::to_string(model.mu) +
                    " sigma=" + std::to_string(model.sigma) +
                    " hurst=" + std::to_string(model.hurst.value) +
                    " horizon=" + std::to_string(model.horizon) +
                    " depth=" + std::to_string(depth) +
                    " seed=" + std::to_string(seed);
    return tree;
}

}  // namespace fbmtc
