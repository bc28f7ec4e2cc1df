#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "viser/datamodel.hpp"

namespace viser {

// One PAD score. Orientation: higher = more attack-like.
struct ScoreRecord {
    std::string sample_id;
    Label label = Label::bonafide;
    double score = 0.0;
};

namespace metrics_detail {

inline void require_both_classes(const std::vector<ScoreRecord>& scores, const char* op) {
    bool bona = false, attack = false;
    for (const auto& s : scores) {
        if (!std::isfinite(s.score)) throw std::invalid_argument(std::string(op) + ": non-finite score");
        (s.label == Label::bonafide ? bona : attack) = true;
    }
    if (!bona || !attack)
        throw std::invalid_argument(std::string(op) + ": need at least one record of each class");
}

}  // namespace metrics_detail

// Mann-Whitney AUROC via average ranks; ties count one half. Equals the
// probability that a random attack outscores a random bonafide sample.
inline double auroc(const std::vector<ScoreRecord>& scores) {
    metrics_detail::require_both_classes(scores, "auroc");
    const size_t n = scores.size();
    std::vector<size_t> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return scores[a].score < scores[b].score; });
    std::vector<double> rank(n, 0.0);
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j + 1 < n && scores[order[j + 1]].score == scores[order[i]].score) ++j;
        const double avg_rank = 0.5 * static_cast<double>(i + j) + 1.0;  // 1-based
        for (size_t k = i; k <= j; ++k) rank[order[k]] = avg_rank;
        i = j + 1;
    }
    double rank_sum = 0.0;
    size_t n_attack = 0;
    for (size_t k = 0; k < n; ++k) {
        if (scores[k].label == Label::attack) {
            rank_sum += rank[k];
            ++n_attack;
        }
    }
    const size_t n_bona = n - n_attack;
    const double u = rank_sum - 0.5 * static_cast<double>(n_attack) *
                                    static_cast<double>(n_attack + 1);
    return u / (static_cast<double>(n_attack) * static_cast<double>(n_bona));
}

struct ApcerResult {
    double apcer = 0.0;
    double threshold = 0.0;      // bonafide classified attack when score >= threshold
    double achieved_bpcer = 0.0; // <= target; exact 1% is rare on finite sets
};

// Most permissive operating point: the smallest candidate threshold whose
// bonafide error rate stays at or under the target. Candidates are the
// observed scores plus an accept-everything sentinel.
inline ApcerResult apcer_at_bpcer(const std::vector<ScoreRecord>& scores,
                                  double bpcer_target = 0.01) {
    metrics_detail::require_both_classes(scores, "apcer_at_bpcer");
    std::vector<double> bona, attack;
    for (const auto& s : scores)
        (s.label == Label::bonafide ? bona : attack).push_back(s.score);
    std::sort(bona.begin(), bona.end());

    auto bpcer_at = [&](double t) {
        const auto at_or_above =
            bona.end() - std::lower_bound(bona.begin(), bona.end(), t);
        return static_cast<double>(at_or_above) / static_cast<double>(bona.size());
    };

    std::vector<double> candidates;
    candidates.reserve(scores.size());
    for (const auto& s : scores) candidates.push_back(s.score);
    std::sort(candidates.begin(), candidates.end());
    candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());

    double threshold = std::numeric_limits<double>::infinity();  // classify nothing as attack
    for (double t : candidates) {
        if (bpcer_at(t) <= bpcer_target) {
            threshold = t;
            break;
        }
    }
    ApcerResult result;
    result.threshold = threshold;
    result.achieved_bpcer = std::isinf(threshold) ? 0.0 : bpcer_at(threshold);
    size_t missed = 0;
    for (double a : attack)
        if (a < threshold) ++missed;
    result.apcer = static_cast<double>(missed) / static_cast<double>(attack.size());
    return result;
}

}  // namespace viser
