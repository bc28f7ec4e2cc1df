#pragma once

// Independent HDBSCAN* oracle for cross-checking viser::hdbscan_labels.
// Deliberately naive: dense distance matrix, O(n^3) agglomeration by
// repeated full scans, recursive tree walks. Shares only the declared
// semantics with the production code, none of the implementation.

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <vector>

namespace viser::test {

class ReferenceHdbscan {
public:
    ReferenceHdbscan(int min_cluster_size, int min_samples)
        : mcs_(min_cluster_size), ms_(min_samples) {}

    std::vector<int> fit(const std::vector<std::array<double, 2>>& pts) {
        const int n = static_cast<int>(pts.size());
        std::vector<int> labels(n, -1);
        if (n < mcs_) return labels;

        build_mutual_reachability(pts);
        agglomerate(n);
        n_points_ = n;
        clusters_.clear();
        point_departures_.assign(n, {});
        new_cluster(-1, 0.0);
        condense_recursive(root_, 0);
        const auto selected = select();

        std::map<int, int> rename;
        for (int p = 0; p < n; ++p) {
            int cid = point_departures_[p].cluster;
            while (cid != -1 && !selected[cid]) cid = clusters_[cid].parent;
            if (cid == -1) continue;
            auto [it, inserted] = rename.try_emplace(cid, static_cast<int>(rename.size()));
            labels[p] = it->second;
        }
        return labels;
    }

private:
    struct MergeNode {
        int left = -1;
        int right = -1;
        double height = 0.0;
        int size = 1;
    };
    struct Cluster {
        int parent = -1;
        double birth = 0.0;
        std::vector<int> children;
        double stability = 0.0;
    };
    struct Departure {
        int cluster = -1;
        double lambda = 0.0;
    };

    int mcs_;
    int ms_;
    int n_points_ = 0;
    std::vector<std::vector<double>> mreach_;
    std::vector<MergeNode> nodes_;  // 0..n-1 leaves, then merges
    int root_ = -1;
    std::vector<Cluster> clusters_;
    std::vector<Departure> point_departures_;

    void build_mutual_reachability(const std::vector<std::array<double, 2>>& pts) {
        const int n = static_cast<int>(pts.size());
        std::vector<std::vector<double>> dist(n, std::vector<double>(n, 0.0));
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j)
                dist[i][j] = std::hypot(pts[i][0] - pts[j][0], pts[i][1] - pts[j][1]);
        std::vector<double> core(n);
        const int k = std::min(ms_, n);
        for (int i = 0; i < n; ++i) {
            std::vector<double> row = dist[i];  // includes the self distance 0
            std::sort(row.begin(), row.end());
            core[i] = row[k - 1];
        }
        mreach_.assign(n, std::vector<double>(n, 0.0));
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j)
                mreach_[i][j] = std::max({core[i], core[j], dist[i][j]});
    }

    void agglomerate(int n) {
        nodes_.assign(n, MergeNode{});
        std::vector<int> comp_of(n);
        std::vector<int> comp_node;
        std::vector<std::vector<int>> members;
        for (int i = 0; i < n; ++i) {
            comp_of[i] = i;
            comp_node.push_back(i);
            members.push_back({i});
        }
        std::vector<int> alive;
        for (int i = 0; i < n; ++i) alive.push_back(i);

        while (alive.size() > 1) {
            double best = std::numeric_limits<double>::infinity();
            int best_a = -1, best_b = -1, ca = -1, cb = -1;
            for (size_t x = 0; x < alive.size(); ++x)
                for (size_t y = x + 1; y < alive.size(); ++y)
                    for (int p : members[alive[x]])
                        for (int q : members[alive[y]]) {
                            const double w = mreach_[p][q];
                            const int lo = std::min(p, q), hi = std::max(p, q);
                            const int ba = std::min(best_a, best_b),
                                      bb = std::max(best_a, best_b);
                            if (w < best || (w == best && std::tie(lo, hi) < std::tie(ba, bb))) {
                                best = w;
                                best_a = lo;
                                best_b = hi;
                                ca = alive[x];
                                cb = alive[y];
                            }
                        }
            MergeNode node;
            node.left = comp_node[ca];
            node.right = comp_node[cb];
            node.height = best;
            node.size = static_cast<int>(members[ca].size() + members[cb].size());
            const int node_id = static_cast<int>(nodes_.size());
            nodes_.push_back(node);
            members[ca].insert(members[ca].end(), members[cb].begin(), members[cb].end());
            comp_node[ca] = node_id;
            alive.erase(std::find(alive.begin(), alive.end(), cb));
        }
        root_ = static_cast<int>(nodes_.size()) - 1;
    }

    int new_cluster(int parent, double birth) {
        clusters_.push_back({parent, birth, {}, 0.0});
        if (parent >= 0) clusters_[parent].children.push_back(static_cast<int>(clusters_.size()) - 1);
        return static_cast<int>(clusters_.size()) - 1;
    }

    void drop_points(int node, int cluster, double lambda) {
        if (node < n_points_) {
            point_departures_[node] = {cluster, lambda};
            clusters_[cluster].stability += lambda - clusters_[cluster].birth;
            return;
        }
        drop_points(nodes_[node].left, cluster, lambda);
        drop_points(nodes_[node].right, cluster, lambda);
    }

    void condense_recursive(int node, int cluster) {
        const auto& m = nodes_[node];
        const double lambda = 1.0 / std::max(m.height, 1e-12);
        const int nl = nodes_[m.left].size;
        const int nr = nodes_[m.right].size;
        const bool lb = nl >= mcs_;
        const bool rb = nr >= mcs_;
        if (lb && rb) {
            clusters_[cluster].stability +=
                (lambda - clusters_[cluster].birth) * (nl + nr);
            condense_recursive(m.left, new_cluster(cluster, lambda));
            condense_recursive(m.right, new_cluster(cluster, lambda));
        } else if (lb) {
            drop_points(m.right, cluster, lambda);
            condense_recursive(m.left, cluster);
        } else if (rb) {
            drop_points(m.left, cluster, lambda);
            condense_recursive(m.right, cluster);
        } else {
            drop_points(m.left, cluster, lambda);
            drop_points(m.right, cluster, lambda);
        }
    }

    std::vector<char> select() const {
        const int nc = static_cast<int>(clusters_.size());
        std::vector<char> chosen(nc, 0);
        std::vector<double> propagated(nc, 0.0);
        // children always have larger ids
        for (int cid = nc - 1; cid >= 0; --cid) {
            const auto& c = clusters_[cid];
            if (c.children.empty()) {
                chosen[cid] = 1;
                propagated[cid] = c.stability;
                continue;
            }
            double child_sum = 0.0;
            for (int ch : c.children) child_sum += propagated[ch];
            if (c.stability >= child_sum) {
                chosen[cid] = 1;
                propagated[cid] = c.stability;
            } else {
                propagated[cid] = child_sum;
            }
        }
        std::vector<char> blocked(nc, 0);
        for (int cid = 0; cid < nc; ++cid) {
            if (blocked[cid]) chosen[cid] = 0;
            if (chosen[cid] || blocked[cid])
                for (int ch : clusters_[cid].children) blocked[ch] = 1;
        }
        return chosen;
    }
};

}  // namespace viser::test
