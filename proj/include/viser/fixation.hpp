#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace viser {

enum class GazePhase { initial, full };

inline const char* to_string(GazePhase p) { return p == GazePhase::initial ? "initial" : "full"; }

// One fixation event: normalized [0,1] image coordinates, dwell duration,
// and the evaluation phase it was recorded in. phase=initial fixations form
// the first-impression prefix of the session timeline.
struct FixationRecord {
    double x = 0.0;
    double y = 0.0;
    double t_ms = 0.0;
    double duration_ms = 0.0;
    std::string participant_id;
    GazePhase phase = GazePhase::full;
};

// 2-D polynomial calibration map (x', y') = P(x, y). Coefficients are
// ordered by total degree, then descending x power:
//   degree 0: 1
//   degree 1: x, y
//   degree 2: x^2, xy, y^2
//   ...
// Identity is degree 1 with coeffs_x = {0,1,0}, coeffs_y = {0,0,1}.
struct RemapCoefficients {
    int degree = 1;
    std::vector<double> coeffs_x{0.0, 1.0, 0.0};
    std::vector<double> coeffs_y{0.0, 0.0, 1.0};

    static RemapCoefficients identity() { return RemapCoefficients{}; }

    static size_t expected_count(int degree) {
        return static_cast<size_t>((degree + 1) * (degree + 2) / 2);
    }

    void validate() const {
        if (degree < 1) throw std::invalid_argument("remap degree must be >= 1");
        const size_t want = expected_count(degree);
        if (coeffs_x.size() != want || coeffs_y.size() != want)
            throw std::invalid_argument(
                "remap coefficient count mismatch: degree " + std::to_string(degree) +
                " needs " + std::to_string(want) + " per axis, got " +
                std::to_string(coeffs_x.size()) + "/" + std::to_string(coeffs_y.size()));
    }
};

inline double evaluate_poly2d(const std::vector<double>& coeffs, int degree, double x, double y) {
    size_t idx = 0;
    double acc = 0.0;
    for (int total = 0; total <= degree; ++total) {
        for (int px = total; px >= 0; --px) {
            const int py = total - px;
            acc += coeffs[idx++] * std::pow(x, px) * std::pow(y, py);
        }
    }
    return acc;
}

struct GazeSession {
    std::string sample_id;
    std::string participant_id;
    std::vector<FixationRecord> fixations;  // time-ordered
    RemapCoefficients remap = RemapCoefficients::identity();
};

struct RemappedSession {
    GazeSession session;
    int clamped_count = 0;
    bool excessive_clamping = false;  // more than 20% of fixations landed out of frame
};

// Applies the per-participant calibration polynomial to every fixation.
// Order, durations and phases are untouched; out-of-frame results are
// clamped back into [0,1] and counted.
inline RemappedSession remap_fixations(const GazeSession& session) {
    session.remap.validate();
    RemappedSession out;
    out.session = session;
    for (auto& fix : out.session.fixations) {
        const double nx = evaluate_poly2d(session.remap.coeffs_x, session.remap.degree, fix.x, fix.y);
        const double ny = evaluate_poly2d(session.remap.coeffs_y, session.remap.degree, fix.x, fix.y);
        if (!std::isfinite(nx) || !std::isfinite(ny))
            throw std::runtime_error("remap produced non-finite coordinates for participant " +
                                     session.participant_id);
        const double cx = std::clamp(nx, 0.0, 1.0);
        const double cy = std::clamp(ny, 0.0, 1.0);
        if (cx != nx || cy != ny) ++out.clamped_count;
        fix.x = cx;
        fix.y = cy;
    }
    if (!out.session.fixations.empty() &&
        out.clamped_count > 0.2 * static_cast<double>(out.session.fixations.size()))
        out.excessive_clamping = true;
    return out;
}

inline std::vector<FixationRecord> filter_phase(const std::vector<FixationRecord>& fixations,
                                                GazePhase phase) {
    if (phase == GazePhase::full) return fixations;  // full window keeps everything
    std::vector<FixationRecord> kept;
    for (const auto& f : fixations)
        if (f.phase == GazePhase::initial) kept.push_back(f);
    return kept;
}

}  // namespace viser
