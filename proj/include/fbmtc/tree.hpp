#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fbmtc/fbm.hpp"

namespace fbmtc {

struct TreeNode {
    int id;          // equals its index in the node vector
    int parent;      // -1 at the root
    int time_index;  // 0 at the root
    double price;
    double prob;  // conditional branch probability, 1 at the root
    std::vector<int> children;
};

// Finite non-recombining event tree with prices and probabilities.
class ScenarioTree {
public:
    ScenarioTree(std::vector<TreeNode> nodes, std::vector<double> times);

    const std::vector<TreeNode>& nodes() const { return nodes_; }
    const TreeNode& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
    const std::vector<double>& times() const { return times_; }
    std::size_t depth() const { return times_.size() - 1; }
    const std::vector<int>& leaf_ids() const { return leaves_; }
    // Unconditional probability of reaching each node.
    const std::vector<double>& node_probability() const { return node_prob_; }

    std::string to_json_string() const;
    static ScenarioTree from_json_string(const std::string& text);

    // Free-form stamp recorded by builders (model, seed) and carried to disk.
    std::string metadata;

private:
    std::vector<TreeNode> nodes_;
    std::vector<double> times_;
    std::vector<int> leaves_;
    std::vector<double> node_prob_;
};

// Binary moment-matched tree for the fractional Black-Scholes model: each
// node's two children carry the conditional mean +- conditional standard
// deviation of the next fBm log-price increment given the node's history,
// each with probability 1/2, so the discrete increment matches the exact
// conditional Gaussian mean and variance. The construction is deterministic;
// the seed is only recorded in the metadata stamp.
ScenarioTree build_fbs_tree(const ModelSpec& model, int depth,
                            std::uint64_t seed = 0);

}  // namespace fbmtc
