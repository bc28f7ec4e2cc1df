#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "viser/clustering.hpp"
#include "viser/datamodel.hpp"
#include "viser/fixation.hpp"
#include "viser/grid.hpp"
#include "viser/image_io.hpp"

namespace viser {

enum class SaliencySource {
    segmentation,
    hand_low,
    hand_equal,
    hand_high,
    et_full,
    et_initial,
    et_full_denoised,
    et_initial_denoised,
};

inline constexpr std::array<SaliencySource, 8> kAllSaliencySources = {
    SaliencySource::segmentation,   SaliencySource::hand_low,
    SaliencySource::hand_equal,     SaliencySource::hand_high,
    SaliencySource::et_full,        SaliencySource::et_initial,
    SaliencySource::et_full_denoised, SaliencySource::et_initial_denoised,
};

inline const char* to_string(SaliencySource s) {
    switch (s) {
        case SaliencySource::segmentation: return "segmentation";
        case SaliencySource::hand_low: return "hand_low";
        case SaliencySource::hand_equal: return "hand_equal";
        case SaliencySource::hand_high: return "hand_high";
        case SaliencySource::et_full: return "et_full";
        case SaliencySource::et_initial: return "et_initial";
        case SaliencySource::et_full_denoised: return "et_full_denoised";
        case SaliencySource::et_initial_denoised: return "et_initial_denoised";
    }
    return "?";
}

inline std::optional<SaliencySource> parse_saliency_source(const std::string& name) {
    for (SaliencySource s : kAllSaliencySources)
        if (name == to_string(s)) return s;
    return std::nullopt;
}

// Non-negative H x W map. After normalize_map the max value is 1 unless the
// map carries no signal at all, in which case empty_flag is set and the map
// stays all-zero.
struct SaliencyMap {
    Grid values;
    std::string sample_id;
    SaliencySource source = SaliencySource::segmentation;
    bool empty_flag = false;
};

// Per-annotator binary masks for one sample.
struct AnnotationSet {
    std::string sample_id;
    std::vector<Grid> masks;

    void validate() const {
        if (masks.empty()) throw std::invalid_argument("AnnotationSet: no masks");
        for (const auto& m : masks) {
            if (!m.same_shape(masks.front()))
                throw std::invalid_argument("AnnotationSet: mask shape mismatch");
            for (double v : m.data())
                if (v != 0.0 && v != 1.0)
                    throw std::invalid_argument("AnnotationSet: masks must be binary 0/1");
        }
    }
};

// ---- map operations ------------------------------------------------------

inline SaliencyMap normalize_map(SaliencyMap map) {
    const double peak = map.values.max_value();
    if (peak <= 0.0) {
        map.empty_flag = true;
        return map;
    }
    for (double& v : map.values.data()) v /= peak;
    map.empty_flag = false;
    return map;
}

// Shannon entropy in bits of the map treated as a probability distribution.
inline double map_entropy(const SaliencyMap& map) {
    const double total = map.values.sum();
    if (total <= 0.0) throw std::domain_error("map_entropy: entropy undefined for all-zero map");
    double bits = 0.0;
    for (double v : map.values.data()) {
        if (v <= 0.0) continue;
        const double p = v / total;
        bits -= p * std::log2(p);
    }
    return bits;
}

namespace saliency_detail {

inline int reflect_index(int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * n;
    i = ((i % period) + period) % period;
    return i < n ? i : period - 1 - i;
}

// Symmetric 1-D Gaussian taps for a given aperture. Even apertures round up
// to the next odd width so the kernel stays symmetric (mass conservation
// under the reflective border depends on symmetry). Sigma follows the usual
// aperture-to-sigma rule 0.3*((k-1)*0.5 - 1) + 0.8.
inline std::vector<double> gaussian_taps(int kernel) {
    const int radius = kernel / 2;
    const double sigma = std::max(0.3 * ((kernel - 1) * 0.5 - 1.0) + 0.8, 1e-3);
    std::vector<double> taps(2 * radius + 1);
    double total = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        taps[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
        total += taps[i + radius];
    }
    for (double& t : taps) t /= total;
    return taps;
}

inline Grid separable_blur(const Grid& in, const std::vector<double>& taps) {
    const int radius = static_cast<int>(taps.size() / 2);
    const int rows = in.rows(), cols = in.cols();
    Grid tmp(rows, cols), out(rows, cols);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
            double acc = 0.0;
            for (int k = -radius; k <= radius; ++k)
                acc += taps[k + radius] * in.at(r, reflect_index(c + k, cols));
            tmp.at(r, c) = acc;
        }
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
            double acc = 0.0;
            for (int k = -radius; k <= radius; ++k)
                acc += taps[k + radius] * tmp.at(reflect_index(r + k, rows), c);
            out.at(r, c) = acc;
        }
    return out;
}

}  // namespace saliency_detail

// kernel 0 is the identity; otherwise a Gaussian of the given aperture with
// duplicate-edge reflection at the borders, which preserves total mass.
inline SaliencyMap blur_map(const SaliencyMap& map, int kernel) {
    if (kernel < 0) throw std::invalid_argument("blur_map: negative kernel");
    if (kernel == 0 || kernel == 1) return map;
    SaliencyMap out = map;
    out.values = saliency_detail::separable_blur(map.values, saliency_detail::gaussian_taps(kernel));
    return out;
}

// Fraction of annotators that marked each pixel.
inline SaliencyMap average_annotations(const AnnotationSet& ann) {
    ann.validate();
    SaliencyMap out;
    out.sample_id = ann.sample_id;
    out.values = Grid(ann.masks.front().rows(), ann.masks.front().cols());
    for (const auto& mask : ann.masks)
        for (size_t i = 0; i < mask.size(); ++i) out.values[i] += mask[i];
    const double inv = 1.0 / static_cast<double>(ann.masks.size());
    for (double& v : out.values.data()) v *= inv;
    return out;
}

inline Grid pixelwise_mean(const std::vector<SaliencyMap>& maps) {
    if (maps.empty()) throw std::invalid_argument("pixelwise_mean: empty list");
    Grid acc(maps.front().values.rows(), maps.front().values.cols());
    for (const auto& m : maps) {
        if (!m.values.same_shape(acc))
            throw std::invalid_argument("pixelwise_mean: shape mismatch");
        for (size_t i = 0; i < acc.size(); ++i) acc[i] += m.values[i];
    }
    const double inv = 1.0 / static_cast<double>(maps.size());
    for (double& v : acc.data()) v *= inv;
    return acc;
}

// Pixel-wise mean across evaluators, then max-normalized.
inline SaliencyMap aggregate_maps(const std::vector<SaliencyMap>& maps) {
    if (maps.empty()) throw std::invalid_argument("aggregate_maps: empty list");
    for (const auto& m : maps)
        if (m.sample_id != maps.front().sample_id)
            throw std::invalid_argument("aggregate_maps: sample_id mismatch");
    SaliencyMap out;
    out.sample_id = maps.front().sample_id;
    out.source = maps.front().source;
    out.values = pixelwise_mean(maps);
    return normalize_map(std::move(out));
}

// Duration-weighted Gaussian splat per fixation, before normalization.
// Kernels are truncated at four sigma.
inline Grid accumulate_gaze(const std::vector<FixationRecord>& fixations, double sigma_px,
                            int rows, int cols) {
    if (sigma_px <= 0.0) throw std::invalid_argument("accumulate_gaze: sigma must be positive");
    Grid acc(rows, cols);
    const int reach = static_cast<int>(std::ceil(4.0 * sigma_px));
    const double inv_two_sigma_sq = 1.0 / (2.0 * sigma_px * sigma_px);
    for (const auto& fix : fixations) {
        const double cx = fix.x * (cols - 1);
        const double cy = fix.y * (rows - 1);
        const int r0 = std::max(0, static_cast<int>(std::floor(cy)) - reach);
        const int r1 = std::min(rows - 1, static_cast<int>(std::ceil(cy)) + reach);
        const int c0 = std::max(0, static_cast<int>(std::floor(cx)) - reach);
        const int c1 = std::min(cols - 1, static_cast<int>(std::ceil(cx)) + reach);
        for (int r = r0; r <= r1; ++r)
            for (int c = c0; c <= c1; ++c) {
                const double dr = r - cy;
                const double dc = c - cx;
                acc.at(r, c) += fix.duration_ms *
                                std::exp(-(dr * dr + dc * dc) * inv_two_sigma_sq);
            }
    }
    return acc;
}

// Continuous attention heatmap for one participant; empty fixation lists are
// legal (denoising can empty a session) and yield a flagged zero map.
inline SaliencyMap render_gaze_heatmap(const std::vector<FixationRecord>& fixations,
                                       double sigma_px, int rows, int cols) {
    SaliencyMap out;
    out.values = accumulate_gaze(fixations, sigma_px, rows, cols);
    return normalize_map(std::move(out));
}

// ---- compile pipeline ----------------------------------------------------

struct SaliencyCompileConfig {
    int height = 0;
    int width = 0;
    double sigma_px = 0.0;  // <= 0 means 5% of image width
    int kernel_low = 0;
    int kernel_equal = 5;
    int kernel_high = 10;
    int min_cluster_size = 5;
    int min_samples = 3;

    double effective_sigma() const { return sigma_px > 0.0 ? sigma_px : 0.05 * width; }
};

struct SaliencyInputs {
    std::map<std::string, Grid> segmentation_masks;              // by sample_id
    std::map<std::string, AnnotationSet> annotations;            // by sample_id
    std::map<std::string, std::vector<GazeSession>> gaze;        // by sample_id, one session per participant
};

struct CompiledSaliency {
    SaliencySource source = SaliencySource::segmentation;
    std::map<std::string, SaliencyMap> maps;
    std::vector<std::string> gaps;  // samples with no raw input for this source
    int clamped_fixations = 0;
    int emptied_sessions = 0;            // sessions with nothing left to render
    int excessively_clamped_sessions = 0;  // over 20% of a session landed out of frame
};

namespace saliency_detail {

inline SaliencyMap compile_gaze_sample(const std::vector<GazeSession>& sessions,
                                       SaliencySource source, const SaliencyCompileConfig& cfg,
                                       CompiledSaliency& stats) {
    const GazePhase phase = (source == SaliencySource::et_initial ||
                             source == SaliencySource::et_initial_denoised)
                                ? GazePhase::initial
                                : GazePhase::full;
    const bool denoise = source == SaliencySource::et_full_denoised ||
                         source == SaliencySource::et_initial_denoised;
    std::vector<SaliencyMap> per_participant;
    std::string sample_id = sessions.empty() ? "" : sessions.front().sample_id;
    for (const auto& session : sessions) {
        RemappedSession remapped = remap_fixations(session);
        stats.clamped_fixations += remapped.clamped_count;
        if (remapped.excessive_clamping) ++stats.excessively_clamped_sessions;
        std::vector<FixationRecord> fixations =
            filter_phase(remapped.session.fixations, phase);
        if (denoise)
            fixations = denoise_fixations(fixations, cfg.min_cluster_size, cfg.min_samples).kept;
        SaliencyMap heat =
            render_gaze_heatmap(fixations, cfg.effective_sigma(), cfg.height, cfg.width);
        heat.sample_id = sample_id;
        heat.source = source;
        if (heat.empty_flag) {
            ++stats.emptied_sessions;
            continue;  // a zero map only rescales the mean; normalization cancels it
        }
        per_participant.push_back(std::move(heat));
    }
    if (per_participant.empty()) {
        SaliencyMap empty;
        empty.sample_id = sample_id;
        empty.source = source;
        empty.values = Grid(cfg.height, cfg.width);
        empty.empty_flag = true;
        return empty;
    }
    return aggregate_maps(per_participant);
}

}  // namespace saliency_detail

// One map per sample for the requested source. Samples with no raw input are
// recorded as gaps rather than failing the compile; the trainer skips the
// saliency term for them.
inline CompiledSaliency compile_saliency(SaliencySource source,
                                         const std::vector<std::string>& sample_ids,
                                         const SaliencyInputs& inputs,
                                         const SaliencyCompileConfig& cfg) {
    if (cfg.height <= 0 || cfg.width <= 0)
        throw std::invalid_argument("compile_saliency: config image size unset");
    CompiledSaliency out;
    out.source = source;
    for (const std::string& sid : sample_ids) {
        switch (source) {
            case SaliencySource::segmentation: {
                auto it = inputs.segmentation_masks.find(sid);
                if (it == inputs.segmentation_masks.end()) {
                    out.gaps.push_back(sid);
                    break;
                }
                SaliencyMap map;
                map.sample_id = sid;
                map.source = source;
                map.values = it->second;
                out.maps.emplace(sid, normalize_map(std::move(map)));
                break;
            }
            case SaliencySource::hand_low:
            case SaliencySource::hand_equal:
            case SaliencySource::hand_high: {
                auto it = inputs.annotations.find(sid);
                if (it == inputs.annotations.end()) {
                    out.gaps.push_back(sid);
                    break;
                }
                const int kernel = source == SaliencySource::hand_low    ? cfg.kernel_low
                                   : source == SaliencySource::hand_equal ? cfg.kernel_equal
                                                                          : cfg.kernel_high;
                SaliencyMap map = average_annotations(it->second);
                map.source = source;
                out.maps.emplace(sid, normalize_map(blur_map(map, kernel)));
                break;
            }
            default: {
                auto it = inputs.gaze.find(sid);
                if (it == inputs.gaze.end() || it->second.empty()) {
                    out.gaps.push_back(sid);
                    break;
                }
                SaliencyMap map =
                    saliency_detail::compile_gaze_sample(it->second, source, cfg, out);
                map.sample_id = sid;
                out.maps.emplace(sid, std::move(map));
                break;
            }
        }
    }
    return out;
}

// ---- persistence ---------------------------------------------------------

// Compiled maps live as 16-bit PGMs under <root>/<source>/<sample_id>.pgm.
class SaliencyStore {
public:
    explicit SaliencyStore(std::filesystem::path root) : root_(std::move(root)) {}

    const std::filesystem::path& root() const { return root_; }

    std::filesystem::path path_for(SaliencySource source, const std::string& sample_id) const {
        return root_ / to_string(source) / (sample_id + ".pgm");
    }

    void save(const SaliencyMap& map) const {
        write_pgm(path_for(map.source, map.sample_id), map.values, 65535);
    }

    void save_all(const CompiledSaliency& compiled) const {
        for (const auto& [sid, map] : compiled.maps) save(map);
    }

    bool contains(SaliencySource source, const std::string& sample_id) const {
        return std::filesystem::exists(path_for(source, sample_id));
    }

    std::optional<SaliencyMap> load(SaliencySource source, const std::string& sample_id) const {
        const auto path = path_for(source, sample_id);
        if (!std::filesystem::exists(path)) return std::nullopt;
        SaliencyMap map;
        map.sample_id = sample_id;
        map.source = source;
        map.values = read_pgm(path);
        map.empty_flag = map.values.max_value() <= 0.0;
        return map;
    }

    std::map<std::string, SaliencyMap> load_all(SaliencySource source) const {
        std::map<std::string, SaliencyMap> maps;
        const auto dir = root_ / to_string(source);
        if (!std::filesystem::exists(dir)) return maps;
        for (const auto& entry : std::filesystem::directory_iterator(dir)) {
            if (entry.path().extension() != ".pgm") continue;
            const std::string sid = entry.path().stem().string();
            if (auto map = load(source, sid)) maps.emplace(sid, std::move(*map));
        }
        return maps;
    }

private:
    std::filesystem::path root_;
};

// ---- raw input loaders ---------------------------------------------------

// Gaze records: JSONL {sample_id, participant_id, phase, t_ms, x, y,
// duration_ms}, grouped into per-participant sessions ordered by t_ms.
inline std::map<std::string, std::vector<GazeSession>> load_gaze_file(
    const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open gaze file " + path.string());
    std::map<std::pair<std::string, std::string>, GazeSession> grouped;
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json rec;
        try {
            rec = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw ParseError("gaze line " + std::to_string(line_no) + ": " + e.what());
        }
        FixationRecord fix;
        fix.x = rec.at("x").get<double>();
        fix.y = rec.at("y").get<double>();
        fix.t_ms = rec.at("t_ms").get<double>();
        fix.duration_ms = rec.at("duration_ms").get<double>();
        fix.participant_id = rec.at("participant_id").get<std::string>();
        const std::string phase = rec.at("phase").get<std::string>();
        if (phase == "initial")
            fix.phase = GazePhase::initial;
        else if (phase == "full")
            fix.phase = GazePhase::full;
        else
            throw ValidationError("gaze line " + std::to_string(line_no) + ": unknown phase '" +
                                  phase + "'");
        if (!std::isfinite(fix.x) || !std::isfinite(fix.y))
            throw ValidationError("gaze line " + std::to_string(line_no) +
                                  ": non-finite coordinates");
        if (fix.duration_ms <= 0.0)
            throw ValidationError("gaze line " + std::to_string(line_no) +
                                  ": duration must be > 0");
        const std::string sid = rec.at("sample_id").get<std::string>();
        auto& session = grouped[{sid, fix.participant_id}];
        session.sample_id = sid;
        session.participant_id = fix.participant_id;
        session.fixations.push_back(std::move(fix));
    }
    std::map<std::string, std::vector<GazeSession>> by_sample;
    for (auto& [key, session] : grouped) {
        std::stable_sort(session.fixations.begin(), session.fixations.end(),
                         [](const FixationRecord& a, const FixationRecord& b) {
                             return a.t_ms < b.t_ms;
                         });
        by_sample[key.first].push_back(std::move(session));
    }
    return by_sample;
}

// Sidecar calibration file: JSONL {participant_id, degree, coeffs_x, coeffs_y}.
inline std::map<std::string, RemapCoefficients> load_remap_file(
    const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open remap file " + path.string());
    std::map<std::string, RemapCoefficients> coeffs;
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json rec;
        try {
            rec = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw ParseError("remap line " + std::to_string(line_no) + ": " + e.what());
        }
        RemapCoefficients rc;
        rc.degree = rec.at("degree").get<int>();
        rc.coeffs_x = rec.at("coeffs_x").get<std::vector<double>>();
        rc.coeffs_y = rec.at("coeffs_y").get<std::vector<double>>();
        rc.validate();
        coeffs[rec.at("participant_id").get<std::string>()] = std::move(rc);
    }
    return coeffs;
}

// Attaches per-participant calibration to sessions; participants without a
// record keep the identity map.
inline void attach_remap(std::map<std::string, std::vector<GazeSession>>& gaze,
                         const std::map<std::string, RemapCoefficients>& coeffs) {
    for (auto& [sid, sessions] : gaze)
        for (auto& session : sessions) {
            auto it = coeffs.find(session.participant_id);
            if (it != coeffs.end()) session.remap = it->second;
        }
}

// Directory of <sample_id>.pgm binary masks (0/255 in the file).
inline std::map<std::string, Grid> load_mask_dir(const std::filesystem::path& dir) {
    std::map<std::string, Grid> masks;
    if (!std::filesystem::exists(dir)) return masks;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (entry.path().extension() != ".pgm") continue;
        Grid g = read_pgm(entry.path());
        for (double& v : g.data()) v = v >= 0.5 ? 1.0 : 0.0;
        masks.emplace(entry.path().stem().string(), std::move(g));
    }
    return masks;
}

// Layout: <dir>/<sample_id>/<annotator>.pgm, one binary mask per annotator.
inline std::map<std::string, AnnotationSet> load_annotation_dir(
    const std::filesystem::path& dir) {
    std::map<std::string, AnnotationSet> sets;
    if (!std::filesystem::exists(dir)) return sets;
    for (const auto& sample_dir : std::filesystem::directory_iterator(dir)) {
        if (!sample_dir.is_directory()) continue;
        AnnotationSet set;
        set.sample_id = sample_dir.path().filename().string();
        std::vector<std::filesystem::path> files;
        for (const auto& entry : std::filesystem::directory_iterator(sample_dir.path()))
            if (entry.path().extension() == ".pgm") files.push_back(entry.path());
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
            Grid g = read_pgm(f);
            for (double& v : g.data()) v = v >= 0.5 ? 1.0 : 0.0;
            set.masks.push_back(std::move(g));
        }
        if (!set.masks.empty()) sets.emplace(set.sample_id, std::move(set));
    }
    return sets;
}

}  // namespace viser
