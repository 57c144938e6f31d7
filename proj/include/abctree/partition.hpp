#pragma once

// Adaptive discretization of the parameter space: CART classification trees on
// ABC acceptances, dyadic midpoint refinement, and Beta re-initialization.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <queue>
#include <span>
#include <vector>

#include <json.hpp>

#include "abctree/bandit.hpp"
#include "abctree/core.hpp"

namespace abctree {

/// Training view: parameter points and their 0/1 acceptance labels.
struct LabeledPoints {
    std::vector<std::span<const double>> points;
    std::vector<std::uint8_t> labels;

    std::size_t size() const noexcept { return points.size(); }

    static LabeledPoints from(std::span<const TrialRecord* const> records, double epsilon) {
        LabeledPoints lp;
        lp.points.reserve(records.size());
        for (const auto* r : records) lp.points.emplace_back(r->theta);
        lp.labels = rethreshold(records, epsilon);
        return lp;
    }

    static LabeledPoints from(const ReferenceTable& table, double epsilon) {
        std::vector<const TrialRecord*> all;
        all.reserve(table.size());
        for (const auto& r : table.records()) all.push_back(&r);
        return from(all, epsilon);
    }
};

struct CartConfig {
    std::size_t max_leaves = 1000;
    std::size_t min_samples_leaf = 10;
    std::optional<std::size_t> max_depth;
};

namespace detail {

inline double gini(double ones, double n) {
    if (n <= 0.0) return 0.0;
    const double p = ones / n;
    return 2.0 * p * (1.0 - p);
}

struct SplitCandidate {
    double gain = 0.0;
    std::size_t axis = 0;
    double threshold = 0.0;
};

// Best Gini split of `idx` inside `box`. Candidate cuts are midpoints between
// consecutive distinct sorted coordinates; ties resolve to the lowest axis, then
// the lowest threshold.
inline std::optional<SplitCandidate> best_cart_split(const LabeledPoints& data, std::vector<std::size_t>& idx,
                                                     const Box& box, std::size_t min_leaf) {
    const double n = static_cast<double>(idx.size());
    double ones = 0.0;
    for (auto i : idx) ones += data.labels[i];
    if (ones == 0.0 || ones == n || idx.size() < 2 * min_leaf) return std::nullopt;
    const double parent = n * gini(ones, n);

    std::optional<SplitCandidate> best;
    for (std::size_t axis = 0; axis < box.dim(); ++axis) {
        std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
            const double xa = data.points[a][axis];
            const double xb = data.points[b][axis];
            return xa < xb || (xa == xb && a < b);
        });
        double left_ones = 0.0;
        for (std::size_t j = 0; j + 1 < idx.size(); ++j) {
            left_ones += data.labels[idx[j]];
            const double a = data.points[idx[j]][axis];
            const double b = data.points[idx[j + 1]][axis];
            const std::size_t nl = j + 1;
            if (nl < min_leaf) continue;
            if (idx.size() - nl < min_leaf) break;
            if (!(a < b)) continue;
            double cut = 0.5 * (a + b);
            if (!(cut > a)) cut = b;
            if (!(cut > box.lower(axis) && cut < box.upper(axis))) continue;
            const double nld = static_cast<double>(nl);
            const double nrd = n - nld;
            const double child = nld * gini(left_ones, nld) + nrd * gini(ones - left_ones, nrd);
            const double gain = parent - child;
            if (gain > 1e-12 && (!best || gain > best->gain)) best = SplitCandidate{gain, axis, cut};
        }
    }
    return best;
}

}  // namespace detail

/// Greedy best-first Gini classification tree on (theta -> accepted), read off
/// as a partition of `domain`. Leaves appear in the order they were finalized
/// by a depth-first walk (left before right).
inline Partition fit_cart(const Box& domain, const LabeledPoints& data, const CartConfig& config) {
    if (config.max_leaves < 1 || config.min_samples_leaf < 1) throw DomainError("fit_cart: invalid config");
    if (data.labels.size() != data.points.size()) throw ShapeError("fit_cart: labels/points mismatch");
    for (const auto& x : data.points) {
        if (x.size() != domain.dim()) throw ShapeError("fit_cart: point dimension mismatch");
    }

    struct Node {
        Box box;
        std::vector<std::size_t> idx;
        std::size_t depth = 0;
        std::optional<detail::SplitCandidate> split;
        int left = -1;
        int right = -1;
    };
    std::vector<Node> nodes;
    const auto evaluate = [&](Node& node) {
        if (config.max_depth && node.depth >= *config.max_depth) return;
        node.split = detail::best_cart_split(data, node.idx, node.box, config.min_samples_leaf);
    };

    Node root;
    root.box = domain;
    root.idx.resize(data.size());
    std::iota(root.idx.begin(), root.idx.end(), std::size_t{0});
    evaluate(root);
    nodes.push_back(std::move(root));

    // Max-heap on gain, ties toward the earlier-created node.
    using Entry = std::pair<double, int>;
    const auto cmp = [](const Entry& a, const Entry& b) {
        return a.first < b.first || (a.first == b.first && a.second > b.second);
    };
    std::priority_queue<Entry, std::vector<Entry>, decltype(cmp)> heap(cmp);
    if (nodes[0].split) heap.emplace(nodes[0].split->gain, 0);

    std::size_t leaves = 1;
    while (!heap.empty() && leaves < config.max_leaves) {
        const int id = heap.top().second;
        heap.pop();
        const auto split = *nodes[static_cast<std::size_t>(id)].split;
        auto [lbox, rbox] = nodes[static_cast<std::size_t>(id)].box.split(split.axis, split.threshold);
        Node l;
        Node r;
        l.box = std::move(lbox);
        r.box = std::move(rbox);
        l.depth = r.depth = nodes[static_cast<std::size_t>(id)].depth + 1;
        for (auto i : nodes[static_cast<std::size_t>(id)].idx) {
            (data.points[i][split.axis] < split.threshold ? l.idx : r.idx).push_back(i);
        }
        nodes[static_cast<std::size_t>(id)].idx.clear();
        nodes[static_cast<std::size_t>(id)].idx.shrink_to_fit();
        evaluate(l);
        evaluate(r);
        const int lid = static_cast<int>(nodes.size());
        nodes.push_back(std::move(l));
        nodes.push_back(std::move(r));
        nodes[static_cast<std::size_t>(id)].left = lid;
        nodes[static_cast<std::size_t>(id)].right = lid + 1;
        if (nodes[static_cast<std::size_t>(lid)].split) heap.emplace(nodes[static_cast<std::size_t>(lid)].split->gain, lid);
        if (nodes[static_cast<std::size_t>(lid + 1)].split) heap.emplace(nodes[static_cast<std::size_t>(lid + 1)].split->gain, lid + 1);
        ++leaves;
    }

    std::vector<Box> boxes;
    std::vector<int> stack{0};
    while (!stack.empty()) {
        const int id = stack.back();
        stack.pop_back();
        const auto& n = nodes[static_cast<std::size_t>(id)];
        if (n.left < 0) {
            boxes.push_back(n.box);
        } else {
            stack.push_back(n.right);
            stack.push_back(n.left);
        }
    }
    return Partition(domain, std::move(boxes));
}

inline Partition fit_cart(const ReferenceTable& table, const Box& domain, double epsilon, const CartConfig& config) {
    if (table.empty()) throw DomainError("fit_cart: empty table");
    return fit_cart(domain, LabeledPoints::from(table, epsilon), config);
}

enum class SplitRule { gini, round_robin };

/// Binary tree of midpoint bisections. Leaves, in creation order, are the arms.
class DyadicTree {
public:
    struct Node {
        Box box;
        int parent = -1;
        int left = -1;
        int right = -1;
        std::size_t depth = 0;
        std::size_t split_axis = 0;
    };

    DyadicTree() = default;

    explicit DyadicTree(Box domain, std::size_t splits_per_round = 10, SplitRule rule = SplitRule::gini)
        : splits_per_round_(splits_per_round), rule_(rule) {
        nodes_.push_back(Node{std::move(domain)});
        leaves_.push_back(0);
    }

    const Box& domain() const { return nodes_.front().box; }
    std::size_t leaf_count() const noexcept { return leaves_.size(); }
    const std::vector<int>& leaves() const noexcept { return leaves_; }
    const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
    std::size_t splits_per_round() const noexcept { return splits_per_round_; }
    SplitRule rule() const noexcept { return rule_; }

    std::size_t max_depth() const {
        std::size_t d = 0;
        for (int id : leaves_) d = std::max(d, node(id).depth);
        return d;
    }

    Partition partition() const {
        std::vector<Box> boxes;
        boxes.reserve(leaves_.size());
        for (int id : leaves_) boxes.push_back(node(id).box);
        return Partition(domain(), std::move(boxes));
    }

    /// Bisect leaf `leaf_index` (position in leaves()) along `axis`. The left
    /// child takes the leaf's slot; the right child is appended.
    void split_leaf(std::size_t leaf_index, std::size_t axis) {
        const int id = leaves_.at(leaf_index);
        auto [l, r] = node(id).box.bisect(axis);
        const std::size_t depth = node(id).depth + 1;
        const int lid = static_cast<int>(nodes_.size());
        nodes_.push_back(Node{std::move(l), id, -1, -1, depth, 0});
        nodes_.push_back(Node{std::move(r), id, -1, -1, depth, 0});
        nodes_[static_cast<std::size_t>(id)].left = lid;
        nodes_[static_cast<std::size_t>(id)].right = lid + 1;
        nodes_[static_cast<std::size_t>(id)].split_axis = axis;
        leaves_[leaf_index] = lid;
        leaves_.push_back(lid + 1);
    }

    /// Axis whose midpoint cut best separates accepted from rejected points in
    /// the leaf (Gini); lowest axis on ties. Without any signal (no points, or
    /// no cut improves impurity) the longest side relative to the domain is cut.
    std::size_t choose_axis(std::size_t leaf_index, const LabeledPoints& data,
                            std::span<const std::size_t> members) const {
        const Box& box = node(leaves_[leaf_index]).box;
        const std::size_t d = box.dim();
        if (rule_ == SplitRule::round_robin) return node(leaves_[leaf_index]).depth % d;
        std::vector<double> gains(d, 0.0);
        const double n = static_cast<double>(members.size());
        double ones = 0.0;
        for (auto i : members) ones += data.labels[i];
        for (std::size_t a = 0; a < d; ++a) {
            const double mid = 0.5 * (box.lower(a) + box.upper(a));
            double nl = 0.0;
            double ol = 0.0;
            for (auto i : members) {
                if (data.points[i][a] < mid) {
                    nl += 1.0;
                    ol += data.labels[i];
                }
            }
            gains[a] = n * detail::gini(ones, n) - nl * detail::gini(ol, nl) - (n - nl) * detail::gini(ones - ol, n - nl);
        }
        const auto best = detail::argmax(gains);
        if (gains[best] > 1e-12) return best;
        std::size_t longest = 0;
        for (std::size_t a = 1; a < d; ++a) {
            if (box.side(a) / domain().side(a) > box.side(longest) / domain().side(longest)) longest = a;
        }
        return longest;
    }

private:
    std::vector<Node> nodes_;
    std::vector<int> leaves_;
    std::size_t splits_per_round_ = 10;
    SplitRule rule_ = SplitRule::gini;
};

/// Split the leaf holding the most proposals, `tree.splits_per_round()` times.
/// `data` holds the proposals made since the last refinement, labelled at the
/// current tolerance. Point counts follow each split into the children.
inline DyadicTree refine_dyadic(DyadicTree tree, const LabeledPoints& data) {
    std::vector<std::vector<std::size_t>> members(tree.leaf_count());
    {
        const Partition part = tree.partition();
        for (std::size_t i = 0; i < data.size(); ++i) members[part.locate(data.points[i])].push_back(i);
    }
    for (std::size_t s = 0; s < tree.splits_per_round(); ++s) {
        std::size_t target = 0;
        for (std::size_t k = 1; k < members.size(); ++k) {
            if (members[k].size() > members[target].size()) target = k;
        }
        const std::size_t axis = tree.choose_axis(target, data, members[target]);
        const Box parent = tree.node(tree.leaves()[target]).box;
        const double mid = 0.5 * (parent.lower(axis) + parent.upper(axis));
        tree.split_leaf(target, axis);
        std::vector<std::size_t> left;
        std::vector<std::size_t> right;
        for (auto i : members[target]) (data.points[i][axis] < mid ? left : right).push_back(i);
        members[target] = std::move(left);
        members.push_back(std::move(right));
    }
    return tree;
}

/// Beta counts from past trials: alpha_k = accepts in box k, beta_k = rejects.
/// A zero count is raised to 1 so that every arm keeps a proper Beta; empty
/// boxes therefore restart at (1, 1).
inline BetaState reinit_beta(const Partition& partition, const LabeledPoints& data) {
    std::vector<double> alpha(partition.size(), 0.0);
    std::vector<double> beta(partition.size(), 0.0);
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto k = partition.locate(data.points[i]);
        (data.labels[i] ? alpha[k] : beta[k]) += 1.0;
    }
    for (std::size_t k = 0; k < partition.size(); ++k) {
        alpha[k] = std::max(alpha[k], 1.0);
        beta[k] = std::max(beta[k], 1.0);
    }
    return BetaState(std::move(alpha), std::move(beta));
}

inline BetaState reinit_beta(const Partition& partition, const ReferenceTable& table, double epsilon) {
    return reinit_beta(partition, LabeledPoints::from(table, epsilon));
}

inline nlohmann::json to_json(const Box& box) {
    return nlohmann::json{{"lower", box.lower()}, {"upper", box.upper()}};
}

inline nlohmann::json to_json(const Partition& partition) {
    nlohmann::json boxes = nlohmann::json::array();
    for (const auto& b : partition.boxes()) boxes.push_back(to_json(b));
    return nlohmann::json{{"domain", to_json(partition.domain())}, {"boxes", std::move(boxes)}};
}

inline Box box_from_json(const nlohmann::json& j) {
    return Box(j.at("lower").get<std::vector<double>>(), j.at("upper").get<std::vector<double>>());
}

inline Partition partition_from_json(const nlohmann::json& j) {
    std::vector<Box> boxes;
    for (const auto& b : j.at("boxes")) boxes.push_back(box_from_json(b));
    return Partition(box_from_json(j.at("domain")), std::move(boxes));
}

}  // namespace abctree
