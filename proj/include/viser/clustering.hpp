#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <stdexcept>
#include <tuple>
#include <vector>

#include "viser/fixation.hpp"

namespace viser {

// Per-fixation cluster assignment: -1 marks noise, ids >= 0 are clusters.
// Every cluster that appears has at least min_cluster_size members.
struct ClusterLabeling {
    std::vector<int> labels;
    int n_clusters = 0;
};

namespace hdbscan_detail {

constexpr double kMinDistance = 1e-12;  // duplicates collapse to this scale

struct MstEdge {
    int a = 0;
    int b = 0;
    double weight = 0.0;
};

inline double euclidean(const std::array<double, 2>& p, const std::array<double, 2>& q) {
    const double dx = p[0] - q[0];
    const double dy = p[1] - q[1];
    return std::sqrt(dx * dx + dy * dy);
}

// Core distance: distance to the min_samples-th nearest neighbor, counting
// the point itself as its own first neighbor. Duplicates count with
// multiplicity. min_samples is clamped to the point count.
inline std::vector<double> core_distances(const std::vector<std::array<double, 2>>& pts,
                                          int min_samples) {
    const int n = static_cast<int>(pts.size());
    const int k = std::min(min_samples, n);
    std::vector<double> core(n, 0.0);
    std::vector<double> dists(n);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) dists[j] = euclidean(pts[i], pts[j]);
        std::nth_element(dists.begin(), dists.begin() + (k - 1), dists.end());
        core[i] = dists[k - 1];
    }
    return core;
}

// Prim's algorithm over the implicit complete mutual-reachability graph.
// Ties resolve toward the smaller point index so results are deterministic.
inline std::vector<MstEdge> mutual_reachability_mst(const std::vector<std::array<double, 2>>& pts,
                                                    const std::vector<double>& core) {
    const int n = static_cast<int>(pts.size());
    std::vector<MstEdge> edges;
    edges.reserve(n > 0 ? n - 1 : 0);
    std::vector<double> best(n, std::numeric_limits<double>::infinity());
    std::vector<int> from(n, -1);
    std::vector<char> in_tree(n, 0);
    int current = 0;
    in_tree[0] = 1;
    for (int step = 1; step < n; ++step) {
        for (int j = 0; j < n; ++j) {
            if (in_tree[j]) continue;
            const double w =
                std::max({core[current], core[j], euclidean(pts[current], pts[j])});
            if (w < best[j]) {
                best[j] = w;
                from[j] = current;
            }
        }
        int next = -1;
        for (int j = 0; j < n; ++j) {
            if (in_tree[j]) continue;
            if (next == -1 || best[j] < best[next]) next = j;
        }
        edges.push_back({from[next], next, best[next]});
        in_tree[next] = 1;
        current = next;
    }
    return edges;
}

struct Dendrogram {
    // internal node k (id n+k) merges children[k] at height[k]; sizes[k] points below
    std::vector<std::array<int, 2>> children;
    std::vector<double> heights;
    std::vector<int> sizes;
    int n_points = 0;

    int root() const { return n_points + static_cast<int>(children.size()) - 1; }
    bool is_leaf(int node) const { return node < n_points; }
    int size_of(int node) const { return is_leaf(node) ? 1 : sizes[node - n_points]; }
};

inline Dendrogram single_linkage(std::vector<MstEdge> edges, int n) {
    std::sort(edges.begin(), edges.end(), [](const MstEdge& x, const MstEdge& y) {
        if (x.weight != y.weight) return x.weight < y.weight;
        const int xa = std::min(x.a, x.b), xb = std::max(x.a, x.b);
        const int ya = std::min(y.a, y.b), yb = std::max(y.a, y.b);
        return std::tie(xa, xb) < std::tie(ya, yb);
    });
    Dendrogram dendro;
    dendro.n_points = n;
    std::vector<int> parent(n);
    std::vector<int> comp_node(n);
    for (int i = 0; i < n; ++i) {
        parent[i] = i;
        comp_node[i] = i;
    }
    std::function<int(int)> find = [&](int x) {
        while (parent[x] != x) {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        return x;
    };
    for (const auto& e : edges) {
        const int ra = find(e.a);
        const int rb = find(e.b);
        const int node = n + static_cast<int>(dendro.children.size());
        dendro.children.push_back({comp_node[ra], comp_node[rb]});
        dendro.heights.push_back(e.weight);
        dendro.sizes.push_back(dendro.size_of(comp_node[ra]) + dendro.size_of(comp_node[rb]));
        parent[rb] = ra;
        comp_node[ra] = node;
    }
    return dendro;
}

struct CondensedTree {
    struct PointEvent {
        int cluster;
        int point;
        double lambda;
    };
    struct ClusterBirth {
        int parent;
        int child;
        double lambda;
        int size;
    };
    std::vector<PointEvent> point_events;
    std::vector<ClusterBirth> births;
    std::vector<int> cluster_parent;       // per cluster id; -1 for root
    std::vector<double> cluster_birth_lambda;
};

inline void collect_leaves(const Dendrogram& dendro, int node, std::vector<int>& out) {
    std::vector<int> stack{node};
    while (!stack.empty()) {
        const int cur = stack.back();
        stack.pop_back();
        if (dendro.is_leaf(cur)) {
            out.push_back(cur);
        } else {
            stack.push_back(dendro.children[cur - dendro.n_points][0]);
            stack.push_back(dendro.children[cur - dendro.n_points][1]);
        }
    }
}

// Walk the dendrogram top-down; sides smaller than min_cluster_size fall out
// of the running cluster at the split's lambda, sides that are both large
// enough become new clusters.
inline CondensedTree condense(const Dendrogram& dendro, int min_cluster_size) {
    CondensedTree tree;
    tree.cluster_parent.push_back(-1);
    tree.cluster_birth_lambda.push_back(0.0);  // root exists from lambda 0

    struct Frame {
        int node;
        int cluster;
    };
    std::vector<Frame> stack{{dendro.root(), 0}};
    std::vector<int> leaves;
    while (!stack.empty()) {
        const Frame frame = stack.back();
        stack.pop_back();
        const int idx = frame.node - dendro.n_points;
        const int left = dendro.children[idx][0];
        const int right = dendro.children[idx][1];
        const double lambda = 1.0 / std::max(dendro.heights[idx], kMinDistance);
        const int nl = dendro.size_of(left);
        const int nr = dendro.size_of(right);
        const bool left_big = nl >= min_cluster_size;
        const bool right_big = nr >= min_cluster_size;
        if (left_big && right_big) {
            for (int child_node : {left, right}) {
                const int cid = static_cast<int>(tree.cluster_parent.size());
                tree.cluster_parent.push_back(frame.cluster);
                tree.cluster_birth_lambda.push_back(lambda);
                tree.births.push_back({frame.cluster, cid, lambda, dendro.size_of(child_node)});
                stack.push_back({child_node, cid});
            }
        } else {
            for (int side : {left, right}) {
                const bool big = (side == left) ? left_big : right_big;
                if (big) {
                    stack.push_back({side, frame.cluster});
                } else {
                    leaves.clear();
                    collect_leaves(dendro, side, leaves);
                    for (int p : leaves) tree.point_events.push_back({frame.cluster, p, lambda});
                }
            }
        }
    }
    return tree;
}

// Cluster stability: sum over members of (lambda at departure - lambda at
// birth); members departing via a true split are counted at the split.
inline std::vector<double> stabilities(const CondensedTree& tree) {
    std::vector<double> sigma(tree.cluster_parent.size(), 0.0);
    for (const auto& ev : tree.point_events)
        sigma[ev.cluster] += ev.lambda - tree.cluster_birth_lambda[ev.cluster];
    for (const auto& b : tree.births)
        sigma[b.parent] += (b.lambda - tree.cluster_birth_lambda[b.parent]) * b.size;
    return sigma;
}

// Excess-of-mass selection. The root is selectable like any other cluster,
// so a dataset that is one genuine cluster yields that cluster instead of
// all-noise.
inline std::vector<char> select_excess_of_mass(const CondensedTree& tree,
                                               const std::vector<double>& sigma) {
    const int n_clusters = static_cast<int>(tree.cluster_parent.size());
    std::vector<std::vector<int>> children(n_clusters);
    for (const auto& b : tree.births) children[b.parent].push_back(b.child);

    std::vector<double> propagated(n_clusters, 0.0);
    std::vector<char> selected(n_clusters, 0);
    for (int cid = n_clusters - 1; cid >= 0; --cid) {
        if (children[cid].empty()) {
            propagated[cid] = sigma[cid];
            selected[cid] = 1;
            continue;
        }
        double child_sum = 0.0;
        for (int ch : children[cid]) child_sum += propagated[ch];
        if (sigma[cid] >= child_sum) {
            selected[cid] = 1;
            propagated[cid] = sigma[cid];
        } else {
            propagated[cid] = child_sum;
        }
    }
    // a selected ancestor absorbs any selected descendants; parent ids are
    // always smaller than child ids, so one ascending pass suffices
    std::vector<char> suppressed(n_clusters, 0);
    for (int cid = 0; cid < n_clusters; ++cid) {
        if (suppressed[cid]) selected[cid] = 0;
        if (selected[cid] || suppressed[cid])
            for (int ch : children[cid]) suppressed[ch] = 1;
    }
    return selected;
}

}  // namespace hdbscan_detail

// HDBSCAN* on 2-D points: mutual-reachability single linkage, condensed tree
// at min_cluster_size, excess-of-mass cluster extraction. Labels are
// renumbered by first appearance in input order.
inline ClusterLabeling hdbscan_labels(const std::vector<std::array<double, 2>>& points,
                                      int min_cluster_size, int min_samples) {
    using namespace hdbscan_detail;
    if (min_cluster_size < 2) throw std::invalid_argument("min_cluster_size must be >= 2");
    if (min_samples < 1) throw std::invalid_argument("min_samples must be >= 1");
    const int n = static_cast<int>(points.size());
    ClusterLabeling out;
    out.labels.assign(n, -1);
    if (n < min_cluster_size) return out;

    const auto core = core_distances(points, min_samples);
    const auto mst = mutual_reachability_mst(points, core);
    const auto dendro = single_linkage(mst, n);
    const auto tree = condense(dendro, min_cluster_size);
    const auto sigma = stabilities(tree);
    const auto selected = select_excess_of_mass(tree, sigma);

    // point -> nearest selected ancestor of the cluster it departed from
    std::vector<int> raw(n, -1);
    for (const auto& ev : tree.point_events) {
        int cid = ev.cluster;
        while (cid != -1 && !selected[cid]) cid = tree.cluster_parent[cid];
        raw[ev.point] = cid;
    }
    std::vector<int> relabel(tree.cluster_parent.size(), -1);
    int next_label = 0;
    for (int p = 0; p < n; ++p) {
        if (raw[p] == -1) continue;
        if (relabel[raw[p]] == -1) relabel[raw[p]] = next_label++;
        out.labels[p] = relabel[raw[p]];
    }
    out.n_clusters = next_label;
    return out;
}

struct DenoiseResult {
    std::vector<FixationRecord> kept;
    ClusterLabeling labeling;
};

// Drops fixations that HDBSCAN marks as noise. Clustering runs on (x, y)
// only; duration is a rendering weight, not a clustering feature.
inline DenoiseResult denoise_fixations(const std::vector<FixationRecord>& fixations,
                                       int min_cluster_size = 5, int min_samples = 3) {
    std::vector<std::array<double, 2>> points;
    points.reserve(fixations.size());
    for (const auto& f : fixations) points.push_back({f.x, f.y});
    DenoiseResult result;
    result.labeling = hdbscan_labels(points, min_cluster_size, min_samples);
    for (size_t i = 0; i < fixations.size(); ++i)
        if (result.labeling.labels[i] >= 0) result.kept.push_back(fixations[i]);
    return result;
}

}  // namespace viser
