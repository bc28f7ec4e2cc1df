#pragma once

// Brute-force metric oracles, independent of the rank-based production code.

#include <cmath>
#include <limits>
#include <vector>

#include "viser/metrics.hpp"

namespace viser::test {

// all-pairs Mann-Whitney: count attack>bona pairs, half credit for ties
inline double auroc_bruteforce(const std::vector<ScoreRecord>& scores) {
    double wins = 0.0;
    size_t pairs = 0;
    for (const auto& a : scores) {
        if (a.label != Label::attack) continue;
        for (const auto& b : scores) {
            if (b.label != Label::bonafide) continue;
            ++pairs;
            if (a.score > b.score)
                wins += 1.0;
            else if (a.score == b.score)
                wins += 0.5;
        }
    }
    return wins / static_cast<double>(pairs);
}

// exhaustive sweep over every candidate threshold (all scores plus the
// reject-nothing sentinel), smallest valid one wins
inline ApcerResult apcer_sweep(const std::vector<ScoreRecord>& scores, double bpcer_target) {
    std::vector<double> candidates;
    for (const auto& s : scores) candidates.push_back(s.score);
    candidates.push_back(std::numeric_limits<double>::infinity());
    std::sort(candidates.begin(), candidates.end());

    size_t n_bona = 0, n_attack = 0;
    for (const auto& s : scores) (s.label == Label::bonafide ? n_bona : n_attack) += 1;

    ApcerResult best;
    best.threshold = std::numeric_limits<double>::quiet_NaN();
    for (double t : candidates) {
        size_t bona_errors = 0;
        for (const auto& s : scores)
            if (s.label == Label::bonafide && s.score >= t) ++bona_errors;
        const double bpcer = static_cast<double>(bona_errors) / static_cast<double>(n_bona);
        if (bpcer <= bpcer_target) {
            size_t attack_errors = 0;
            for (const auto& s : scores)
                if (s.label == Label::attack && s.score < t) ++attack_errors;
            best.threshold = t;
            best.achieved_bpcer = bpcer;
            best.apcer = static_cast<double>(attack_errors) / static_cast<double>(n_attack);
            return best;  // candidates ascend, first valid is smallest
        }
    }
    return best;
}

}  // namespace viser::test
