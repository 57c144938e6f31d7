#pragma once

// Parameter-space geometry, priors and the ABC reference table.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "abctree/errors.hpp"
#include "abctree/random.hpp"

namespace abctree {

/// Axis-aligned hyper-rectangle [lower, upper). Side lengths are strictly positive.
class Box {
public:
    Box() = default;

    Box(std::vector<double> lower, std::vector<double> upper)
        : lower_(std::move(lower)), upper_(std::move(upper)) {
        if (lower_.size() != upper_.size() || lower_.empty()) {
            throw ShapeError("Box: lower/upper must be non-empty and of equal length");
        }
        for (std::size_t i = 0; i < lower_.size(); ++i) {
            if (!(lower_[i] < upper_[i]) || !std::isfinite(lower_[i]) || !std::isfinite(upper_[i])) {
                throw DomainError("Box: lower[" + std::to_string(i) + "] must be < upper[" +
                                  std::to_string(i) + "] and finite");
            }
        }
    }

    static Box unit(std::size_t dim) {
        return Box(std::vector<double>(dim, 0.0), std::vector<double>(dim, 1.0));
    }

    std::size_t dim() const noexcept { return lower_.size(); }
    const std::vector<double>& lower() const noexcept { return lower_; }
    const std::vector<double>& upper() const noexcept { return upper_; }
    double lower(std::size_t i) const { return lower_[i]; }
    double upper(std::size_t i) const { return upper_[i]; }
    double side(std::size_t i) const { return upper_[i] - lower_[i]; }

    double volume() const {
        double v = 1.0;
        for (std::size_t i = 0; i < dim(); ++i) v *= side(i);
        return v;
    }

    std::vector<double> center() const {
        std::vector<double> c(dim());
        for (std::size_t i = 0; i < dim(); ++i) c[i] = 0.5 * (lower_[i] + upper_[i]);
        return c;
    }

    /// Closed containment, used for domain checks.
    bool contains_closed(std::span<const double> x) const {
        if (x.size() != dim()) return false;
        for (std::size_t i = 0; i < dim(); ++i) {
            if (!(x[i] >= lower_[i] && x[i] <= upper_[i])) return false;
        }
        return true;
    }

    /// Half-open containment; faces lying on the domain's top face are closed.
    bool contains(std::span<const double> x, const Box& domain) const {
        for (std::size_t i = 0; i < dim(); ++i) {
            if (x[i] < lower_[i]) return false;
            if (x[i] >= upper_[i] && !(x[i] == upper_[i] && upper_[i] == domain.upper_[i])) return false;
        }
        return true;
    }

    /// Volume of the intersection with `other` (0 when disjoint).
    double overlap_volume(const Box& other) const {
        double v = 1.0;
        for (std::size_t i = 0; i < dim(); ++i) {
            const double lo = std::max(lower_[i], other.lower_[i]);
            const double hi = std::min(upper_[i], other.upper_[i]);
            if (!(hi > lo)) return 0.0;
            v *= hi - lo;
        }
        return v;
    }

    std::optional<Box> intersect(const Box& other) const {
        if (overlap_volume(other) <= 0.0) return std::nullopt;
        std::vector<double> lo(dim()), hi(dim());
        for (std::size_t i = 0; i < dim(); ++i) {
            lo[i] = std::max(lower_[i], other.lower_[i]);
            hi[i] = std::min(upper_[i], other.upper_[i]);
        }
        return Box(std::move(lo), std::move(hi));
    }

    /// Cut along `axis` at `at`; requires lower < at < upper on that axis.
    std::pair<Box, Box> split(std::size_t axis, double at) const {
        if (!(at > lower_[axis] && at < upper_[axis])) {
            throw DomainError("Box::split: cut point outside the open side");
        }
        Box left = *this;
        Box right = *this;
        left.upper_[axis] = at;
        right.lower_[axis] = at;
        return {std::move(left), std::move(right)};
    }

    std::pair<Box, Box> bisect(std::size_t axis) const {
        return split(axis, 0.5 * (lower_[axis] + upper_[axis]));
    }

    std::vector<double> sample_uniform(Rng& rng) const {
        std::vector<double> x(dim());
        for (std::size_t i = 0; i < dim(); ++i) {
            x[i] = lower_[i] + side(i) * uniform01(rng);
        }
        return x;
    }

    friend bool operator==(const Box&, const Box&) = default;

private:
    std::vector<double> lower_;
    std::vector<double> upper_;
};

/// Ordered set of disjoint boxes whose union is `domain`. Each box is one bandit arm.
class Partition {
public:
    Partition() = default;

    explicit Partition(Box domain) : domain_(domain), boxes_{std::move(domain)} { build_locator(); }

    Partition(Box domain, std::vector<Box> boxes) : domain_(std::move(domain)), boxes_(std::move(boxes)) {
        if (boxes_.empty()) throw ShapeError("Partition: no boxes");
        double total = 0.0;
        for (const auto& b : boxes_) {
            if (b.dim() != domain_.dim()) throw ShapeError("Partition: box dimension mismatch");
            total += b.volume();
        }
        const double dv = domain_.volume();
        if (std::abs(total - dv) > 1e-9 * dv) {
            throw DomainError("Partition: box volumes do not sum to the domain volume");
        }
        build_locator();
    }

    /// Regular grid with `bins[i]` equal cells along axis i (first axis varies slowest).
    static Partition grid(const Box& domain, std::span<const std::size_t> bins) {
        if (bins.size() != domain.dim()) throw ShapeError("Partition::grid: bins length != dim");
        std::vector<Box> boxes;
        std::vector<std::size_t> idx(domain.dim(), 0);
        const auto edge = [&](std::size_t axis, std::size_t j) {
            if (j == bins[axis]) return domain.upper(axis);
            return domain.lower(axis) + domain.side(axis) * static_cast<double>(j) / static_cast<double>(bins[axis]);
        };
        for (;;) {
            std::vector<double> lo(domain.dim()), hi(domain.dim());
            for (std::size_t a = 0; a < domain.dim(); ++a) {
                lo[a] = edge(a, idx[a]);
                hi[a] = edge(a, idx[a] + 1);
            }
            boxes.emplace_back(std::move(lo), std::move(hi));
            std::size_t a = domain.dim();
            while (a > 0) {
                --a;
                if (++idx[a] < bins[a]) break;
                idx[a] = 0;
                if (a == 0) return Partition(domain, std::move(boxes));
            }
        }
    }

    const Box& domain() const noexcept { return domain_; }
    const std::vector<Box>& boxes() const noexcept { return boxes_; }
    const Box& box(std::size_t k) const { return boxes_[k]; }
    std::size_t size() const noexcept { return boxes_.size(); }
    std::size_t dim() const noexcept { return domain_.dim(); }

    /// Index of the unique box containing theta (half-open rule).
    std::size_t locate(std::span<const double> theta) const {
        if (!domain_.contains_closed(theta)) throw DomainError("locate: theta outside the domain");
        std::int32_t node = 0;
        while (!nodes_.empty()) {
            const auto& n = nodes_[static_cast<std::size_t>(node)];
            if (n.leaf_begin >= 0) {
                for (auto i = n.leaf_begin; i < n.leaf_end; ++i) {
                    const auto k = leaf_items_[static_cast<std::size_t>(i)];
                    if (boxes_[k].contains(theta, domain_)) return k;
                }
                break;
            }
            node = theta[n.axis] < n.cut ? n.left : n.right;
        }
        throw DomainError("locate: no box contains theta (partition does not cover the domain)");
    }

    double volume_sum() const {
        double total = 0.0;
        for (const auto& b : boxes_) total += b.volume();
        return total;
    }

private:
    // Guillotine index over the boxes: recursively find an axis-aligned cut with
    // every box on one side. Tree-generated partitions always admit one.
    struct Node {
        std::size_t axis = 0;
        double cut = 0.0;
        std::int32_t left = -1;
        std::int32_t right = -1;
        std::int32_t leaf_begin = -1;
        std::int32_t leaf_end = -1;
    };

    void build_locator() {
        nodes_.clear();
        leaf_items_.clear();
        std::vector<std::size_t> all(boxes_.size());
        std::iota(all.begin(), all.end(), std::size_t{0});
        build_node(std::move(all));
    }

    std::int32_t build_node(std::vector<std::size_t> items) {
        const auto id = static_cast<std::int32_t>(nodes_.size());
        nodes_.emplace_back();
        if (items.size() > 4) {
            for (std::size_t axis = 0; axis < dim(); ++axis) {
                std::sort(items.begin(), items.end(), [&](std::size_t a, std::size_t b) {
                    return boxes_[a].lower(axis) < boxes_[b].lower(axis);
                });
                // Prefer the cut closest to the median for a balanced index.
                double max_upper = -std::numeric_limits<double>::infinity();
                std::size_t best = 0;
                std::size_t best_dist = items.size();
                for (std::size_t i = 0; i + 1 < items.size(); ++i) {
                    max_upper = std::max(max_upper, boxes_[items[i]].upper(axis));
                    if (max_upper <= boxes_[items[i + 1]].lower(axis)) {
                        const std::size_t left_count = i + 1;
                        const std::size_t dist = left_count > items.size() / 2 ? left_count - items.size() / 2
                                                                               : items.size() / 2 - left_count;
                        if (dist < best_dist) {
                            best_dist = dist;
                            best = left_count;
                        }
                    }
                }
                if (best > 0) {
                    const double cut = boxes_[items[best]].lower(axis);
                    std::vector<std::size_t> left(items.begin(), items.begin() + static_cast<std::ptrdiff_t>(best));
                    std::vector<std::size_t> right(items.begin() + static_cast<std::ptrdiff_t>(best), items.end());
                    nodes_[static_cast<std::size_t>(id)].axis = axis;
                    nodes_[static_cast<std::size_t>(id)].cut = cut;
                    const auto l = build_node(std::move(left));
                    const auto r = build_node(std::move(right));
                    nodes_[static_cast<std::size_t>(id)].left = l;
                    nodes_[static_cast<std::size_t>(id)].right = r;
                    return id;
                }
            }
        }
        std::sort(items.begin(), items.end());
        auto& n = nodes_[static_cast<std::size_t>(id)];
        n.leaf_begin = static_cast<std::int32_t>(leaf_items_.size());
        leaf_items_.insert(leaf_items_.end(), items.begin(), items.end());
        n.leaf_end = static_cast<std::int32_t>(leaf_items_.size());
        return id;
    }

    Box domain_;
    std::vector<Box> boxes_;
    std::vector<Node> nodes_;
    std::vector<std::size_t> leaf_items_;
};

inline std::size_t locate(const Partition& partition, std::span<const double> theta) {
    return partition.locate(theta);
}

inline double box_volume(const Box& box) { return box.volume(); }

/// Prior that is either uniform on the domain or piecewise constant on a
/// partition of it. Piecewise priors sample uniformly inside each piece.
class Prior {
public:
    enum class Kind { uniform, piecewise_constant };

    Prior() = default;

    static Prior uniform(Box domain) {
        Prior p;
        p.kind_ = Kind::uniform;
        p.pieces_ = Partition(std::move(domain));
        p.piece_mass_ = {1.0};
        return p;
    }

    static Prior piecewise(Partition pieces, std::vector<double> masses) {
        if (masses.size() != pieces.size()) throw ShapeError("Prior::piecewise: one mass per piece required");
        double total = 0.0;
        for (double m : masses) {
            if (!(m >= 0.0) || !std::isfinite(m)) throw InvalidPriorError("Prior::piecewise: masses must be >= 0");
            total += m;
        }
        if (std::abs(total - 1.0) > 1e-12) throw InvalidPriorError("Prior::piecewise: masses must sum to 1");
        Prior p;
        p.kind_ = Kind::piecewise_constant;
        p.pieces_ = std::move(pieces);
        p.piece_mass_ = std::move(masses);
        return p;
    }

    Kind kind() const noexcept { return kind_; }
    const Box& domain() const { return pieces_.domain(); }
    std::size_t dim() const { return pieces_.dim(); }

    double mass(const Box& box) const {
        if (kind_ == Kind::uniform) return box.overlap_volume(domain()) / domain().volume();
        double m = 0.0;
        for (std::size_t j = 0; j < pieces_.size(); ++j) {
            if (piece_mass_[j] == 0.0) continue;
            const double ov = box.overlap_volume(pieces_.box(j));
            if (ov > 0.0) m += piece_mass_[j] * ov / pieces_.box(j).volume();
        }
        return m;
    }

    /// Per-box masses of `partition`, renormalized to absorb rounding.
    std::vector<double> masses(const Partition& partition) const {
        std::vector<double> m(partition.size());
        double total = 0.0;
        for (std::size_t k = 0; k < partition.size(); ++k) {
            m[k] = mass(partition.box(k));
            total += m[k];
        }
        if (!(total > 0.0)) throw InvalidPriorError("Prior: partition carries no prior mass");
        for (auto& v : m) v /= total;
        return m;
    }

    double density(std::span<const double> theta) const {
        if (!domain().contains_closed(theta)) return 0.0;
        if (kind_ == Kind::uniform) return 1.0 / domain().volume();
        const auto j = pieces_.locate(theta);
        return piece_mass_[j] / pieces_.box(j).volume();
    }

    /// Draw from the prior restricted to `box`.
    std::vector<double> sample_in(const Box& box, Rng& rng) const {
        if (kind_ == Kind::uniform) {
            auto clipped = box.intersect(domain());
            if (!clipped) throw DomainError("Prior::sample_in: box outside the prior support");
            return clipped->sample_uniform(rng);
        }
        std::vector<double> w(pieces_.size(), 0.0);
        double total = 0.0;
        for (std::size_t j = 0; j < pieces_.size(); ++j) {
            if (piece_mass_[j] == 0.0) continue;
            w[j] = piece_mass_[j] * box.overlap_volume(pieces_.box(j)) / pieces_.box(j).volume();
            total += w[j];
        }
        if (!(total > 0.0)) throw DomainError("Prior::sample_in: box has zero prior mass");
        double u = uniform01(rng) * total;
        std::size_t j = 0;
        for (; j + 1 < w.size(); ++j) {
            if (u < w[j]) break;
            u -= w[j];
        }
        while (w[j] == 0.0 && j > 0) --j;
        return box.intersect(pieces_.box(j))->sample_uniform(rng);
    }

    std::vector<double> sample(Rng& rng) const { return sample_in(domain(), rng); }

private:
    Kind kind_ = Kind::uniform;
    Partition pieces_;
    std::vector<double> piece_mass_;
};

/// One simulator call and its outcome.
struct TrialRecord {
    std::uint64_t t = 0;       // global iteration index, 1-based
    std::uint32_t round = 1;   // outer-loop index
    std::size_t arm = 0;
    std::vector<double> theta;
    std::vector<double> summary;
    double discrepancy = std::numeric_limits<double>::infinity();
    std::uint8_t reward = 0;
    double weight = 1.0;       // importance weight prior(box) / proposal(box)
    double epsilon = 0.0;
};

enum class Window { extended, rolling };

/// Append-only ABC lookup table.
class ReferenceTable {
public:
    void append(TrialRecord record) {
        if (!records_.empty()) {
            const auto& last = records_.back();
            if (record.round < last.round || (record.round == last.round && record.t <= last.t)) {
                throw DomainError("ReferenceTable: iteration indices must increase within a round");
            }
        }
        records_.push_back(std::move(record));
    }

    void append(std::span<const TrialRecord> records) {
        for (const auto& r : records) append(r);
    }

    const std::vector<TrialRecord>& records() const noexcept { return records_; }
    std::size_t size() const noexcept { return records_.size(); }
    bool empty() const noexcept { return records_.empty(); }
    const TrialRecord& operator[](std::size_t i) const { return records_[i]; }

    std::uint32_t last_round() const { return records_.empty() ? 0 : records_.back().round; }

    /// Records the partitioner may train on after `round` completes.
    std::vector<const TrialRecord*> window(Window w, std::uint32_t round) const {
        std::vector<const TrialRecord*> out;
        for (const auto& r : records_) {
            if (r.round > round) continue;
            if (w == Window::rolling && r.round != round) continue;
            out.push_back(&r);
        }
        return out;
    }

private:
    std::vector<TrialRecord> records_;
};

inline std::vector<std::uint8_t> rethreshold(std::span<const TrialRecord> records, double epsilon) {
    std::vector<std::uint8_t> y(records.size());
    for (std::size_t i = 0; i < records.size(); ++i) y[i] = records[i].discrepancy < epsilon ? 1 : 0;
    return y;
}

inline std::vector<std::uint8_t> rethreshold(const ReferenceTable& table, double epsilon) {
    return rethreshold(std::span<const TrialRecord>(table.records()), epsilon);
}

inline std::vector<std::uint8_t> rethreshold(std::span<const TrialRecord* const> records, double epsilon) {
    std::vector<std::uint8_t> y(records.size());
    for (std::size_t i = 0; i < records.size(); ++i) y[i] = records[i]->discrepancy < epsilon ? 1 : 0;
    return y;
}

}  // namespace abctree
