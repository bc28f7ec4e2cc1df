#include <doctest.h>

#include <fstream>
#include <random>

#include "support/temp_dir.hpp"
#include "viser/saliency.hpp"

using namespace viser;

namespace {

SaliencyMap make_map(int rows, int cols, double fill, const std::string& sid = "s") {
    SaliencyMap m;
    m.sample_id = sid;
    m.values = Grid(rows, cols, fill);
    return m;
}

FixationRecord fix_at(double x, double y, double duration = 100.0,
                      GazePhase phase = GazePhase::full) {
    FixationRecord f;
    f.x = x;
    f.y = y;
    f.duration_ms = duration;
    f.phase = phase;
    return f;
}

// dense 2-D convolution with duplicate-edge reflection, for checking the
// separable implementation
Grid dense_gaussian_oracle(const Grid& in, int kernel) {
    const auto taps = saliency_detail::gaussian_taps(kernel);
    const int radius = static_cast<int>(taps.size() / 2);
    Grid out(in.rows(), in.cols());
    for (int r = 0; r < in.rows(); ++r)
        for (int c = 0; c < in.cols(); ++c) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i)
                for (int j = -radius; j <= radius; ++j) {
                    const int rr = saliency_detail::reflect_index(r + i, in.rows());
                    const int cc = saliency_detail::reflect_index(c + j, in.cols());
                    acc += taps[i + radius] * taps[j + radius] * in.at(rr, cc);
                }
            out.at(r, c) = acc;
        }
    return out;
}

}  // namespace

TEST_CASE("remap_fixations identity leaves fixations unchanged") {
    GazeSession session;
    session.participant_id = "p1";
    session.fixations = {fix_at(0.2, 0.3), fix_at(0.8, 0.1), fix_at(0.5, 0.5)};
    const auto out = remap_fixations(session);
    CHECK(out.clamped_count == 0);
    REQUIRE(out.session.fixations.size() == 3);
    for (size_t i = 0; i < 3; ++i) {
        CHECK(out.session.fixations[i].x == session.fixations[i].x);
        CHECK(out.session.fixations[i].y == session.fixations[i].y);
    }
}

TEST_CASE("remap_fixations degree-1 shift moves x only") {
    GazeSession session;
    session.fixations = {fix_at(0.2, 0.3), fix_at(0.4, 0.9)};
    session.remap.coeffs_x = {0.1, 1.0, 0.0};  // x' = x + 0.1
    const auto out = remap_fixations(session);
    CHECK(out.session.fixations[0].x == doctest::Approx(0.3).epsilon(1e-12));
    CHECK(out.session.fixations[0].y == doctest::Approx(0.3).epsilon(1e-12));
    CHECK(out.session.fixations[1].x == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(out.session.fixations[1].y == doctest::Approx(0.9).epsilon(1e-12));
}

TEST_CASE("remap_fixations degree-2 matches direct polynomial evaluation") {
    // x' = 0.05 + 0.9 x + 0.1 y + 0.4 x^2, y' = y + 0.2 xy
    RemapCoefficients rc;
    rc.degree = 2;
    rc.coeffs_x = {0.05, 0.9, 0.1, 0.4, 0.0, 0.0};
    rc.coeffs_y = {0.0, 0.0, 1.0, 0.0, 0.2, 0.0};
    GazeSession session;
    session.remap = rc;
    session.fixations = {fix_at(0.5, 0.5)};
    const auto out = remap_fixations(session);
    // oracle, by hand: 0.05 + 0.45 + 0.05 + 0.4*0.25 = 0.65 ; 0.5 + 0.2*0.25 = 0.55
    CHECK(out.session.fixations[0].x == doctest::Approx(0.65).epsilon(1e-12));
    CHECK(out.session.fixations[0].y == doctest::Approx(0.55).epsilon(1e-12));
}

TEST_CASE("remap_fixations clamps out-of-frame results and counts them") {
    GazeSession session;
    session.fixations = {fix_at(0.95, 0.5), fix_at(0.2, 0.2)};
    session.remap.coeffs_x = {0.2, 1.0, 0.0};  // pushes 0.95 past 1
    const auto out = remap_fixations(session);
    CHECK(out.clamped_count == 1);
    CHECK(out.session.fixations[0].x == 1.0);
    CHECK(out.excessive_clamping == true);  // 1 of 2 > 20%
}

TEST_CASE("remap_fixations rejects coefficient count mismatch") {
    GazeSession session;
    session.fixations = {fix_at(0.5, 0.5)};
    session.remap.degree = 2;  // still has 3 coefficients, needs 6
    CHECK_THROWS_AS(remap_fixations(session), std::invalid_argument);
}

TEST_CASE("render_gaze_heatmap single center fixation peaks at center, 4-fold symmetric") {
    const int n = 33;
    const auto map = render_gaze_heatmap({fix_at(0.5, 0.5)}, 3.0, n, n);
    CHECK_FALSE(map.empty_flag);
    int best_r = -1, best_c = -1;
    double best = -1.0;
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < n; ++c)
            if (map.values.at(r, c) > best) {
                best = map.values.at(r, c);
                best_r = r;
                best_c = c;
            }
    CHECK(best_r == 16);
    CHECK(best_c == 16);
    CHECK(best == 1.0);
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < n; ++c)
            CHECK(map.values.at(r, c) ==
                  doctest::Approx(map.values.at(c, n - 1 - r)).epsilon(1e-12));
}

TEST_CASE("render_gaze_heatmap mirror fixations give equal peaks") {
    const int n = 41;
    const auto map =
        render_gaze_heatmap({fix_at(0.25, 0.5), fix_at(0.75, 0.5)}, 2.0, n, n);
    CHECK(map.values.at(20, 10) == doctest::Approx(map.values.at(20, 30)).epsilon(1e-12));
    CHECK(map.values.at(20, 10) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("accumulate_gaze is linear in duration") {
    const int n = 64;  // x = 21/63 and 42/63 land exactly on pixels 21 and 42
    const double xa = 21.0 / 63.0, xb = 42.0 / 63.0;
    const auto raw = accumulate_gaze({fix_at(xa, xa, 200.0), fix_at(xb, xb, 100.0)}, 2.0, n, n);
    CHECK(raw.at(21, 21) == doctest::Approx(2.0 * raw.at(42, 42)).epsilon(1e-9));
}

TEST_CASE("render_gaze_heatmap of no fixations is the flagged empty map") {
    const auto map = render_gaze_heatmap({}, 2.0, 16, 16);
    CHECK(map.empty_flag);
    CHECK(map.values.max_value() == 0.0);
}

TEST_CASE("aggregate_maps") {
    SUBCASE("single map is a post-normalization identity") {
        auto m = make_map(4, 4, 0.0);
        m.values.at(1, 2) = 0.5;
        m.values.at(3, 3) = 0.25;
        const auto agg = aggregate_maps({m});
        CHECK(agg.values.at(1, 2) == doctest::Approx(1.0));
        CHECK(agg.values.at(3, 3) == doctest::Approx(0.5));
    }
    SUBCASE("pixelwise mean of {0,1} is 0.5 before normalization") {
        auto a = make_map(2, 2, 0.0);
        auto b = make_map(2, 2, 0.0);
        b.values.at(0, 0) = 1.0;
        const auto mean = pixelwise_mean({a, b});
        CHECK(mean.at(0, 0) == doctest::Approx(0.5));
        CHECK(mean.at(1, 1) == doctest::Approx(0.0));
    }
    SUBCASE("three constant maps average to the arithmetic mean") {
        const auto mean =
            pixelwise_mean({make_map(3, 3, 0.2), make_map(3, 3, 0.4), make_map(3, 3, 0.6)});
        for (double v : mean.data()) CHECK(v == doctest::Approx(0.4).epsilon(1e-12));
    }
    SUBCASE("permutation invariant") {
        auto a = make_map(5, 5, 0.1);
        a.values.at(2, 2) = 0.9;
        auto b = make_map(5, 5, 0.3);
        b.values.at(1, 4) = 0.7;
        auto c = make_map(5, 5, 0.0);
        c.values.at(4, 0) = 0.2;
        const auto fwd = aggregate_maps({a, b, c});
        const auto rev = aggregate_maps({c, a, b});
        CHECK(fwd.values == rev.values);
    }
    SUBCASE("shape mismatch and empty list are errors") {
        CHECK_THROWS_AS(aggregate_maps({}), std::invalid_argument);
        CHECK_THROWS_AS(aggregate_maps({make_map(2, 2, 0.1), make_map(3, 3, 0.1)}),
                        std::invalid_argument);
    }
}

TEST_CASE("average_annotations is the per-pixel annotator fraction") {
    AnnotationSet ann;
    ann.sample_id = "s";
    ann.masks = {Grid(2, 2), Grid(2, 2), Grid(2, 2), Grid(2, 2)};
    for (auto& m : ann.masks) m.at(0, 0) = 1.0;  // everyone marks (0,0)
    ann.masks[0].at(0, 1) = 1.0;                 // 2 of 4 mark (0,1)
    ann.masks[1].at(0, 1) = 1.0;
    const auto avg = average_annotations(ann);
    CHECK(avg.values.at(0, 0) == doctest::Approx(1.0));
    CHECK(avg.values.at(0, 1) == doctest::Approx(0.5));
    CHECK(avg.values.at(1, 1) == doctest::Approx(0.0));
}

TEST_CASE("blur_map") {
    SUBCASE("kernel 0 is the identity") {
        auto m = make_map(6, 6, 0.0);
        m.values.at(2, 3) = 1.0;
        const auto out = blur_map(m, 0);
        CHECK(out.values == m.values);
    }
    SUBCASE("constant maps are unchanged") {
        const auto out = blur_map(make_map(9, 9, 0.37), 5);
        for (double v : out.values.data()) CHECK(v == doctest::Approx(0.37).epsilon(1e-9));
    }
    SUBCASE("negative kernel is an error") {
        CHECK_THROWS_AS(blur_map(make_map(4, 4, 0.1), -1), std::invalid_argument);
    }
    SUBCASE("single-pixel delta matches the dense convolution oracle") {
        auto m = make_map(15, 15, 0.0);
        m.values.at(7, 7) = 1.0;
        const auto fast = blur_map(m, 5);
        const auto oracle = dense_gaussian_oracle(m.values, 5);
        for (size_t i = 0; i < oracle.size(); ++i)
            CHECK(fast.values[i] == doctest::Approx(oracle[i]).epsilon(1e-12));
    }
    SUBCASE("delta near the border matches the oracle under reflection") {
        auto m = make_map(12, 12, 0.0);
        m.values.at(0, 1) = 1.0;
        m.values.at(11, 11) = 0.5;
        for (int kernel : {5, 10}) {
            const auto fast = blur_map(m, kernel);
            const auto oracle = dense_gaussian_oracle(m.values, kernel);
            for (size_t i = 0; i < oracle.size(); ++i)
                CHECK(fast.values[i] == doctest::Approx(oracle[i]).epsilon(1e-12));
        }
    }
    SUBCASE("total mass is preserved") {
        std::mt19937_64 rng(7);
        std::uniform_real_distribution<double> uni(0.0, 1.0);
        auto m = make_map(20, 17, 0.0);
        for (double& v : m.values.data()) v = uni(rng);
        for (int kernel : {5, 10}) {
            const auto out = blur_map(m, kernel);
            CHECK(out.values.sum() == doctest::Approx(m.values.sum()).epsilon(1e-9));
            CHECK(std::abs(out.values.sum() - m.values.sum()) < 1e-6);
        }
    }
}

TEST_CASE("map_entropy") {
    SUBCASE("uniform map has log2(N) bits") {
        const auto m = make_map(8, 8, 0.25);
        CHECK(map_entropy(m) == doctest::Approx(std::log2(64.0)).epsilon(1e-12));
    }
    SUBCASE("single nonzero pixel has zero entropy") {
        auto m = make_map(8, 8, 0.0);
        m.values.at(3, 3) = 0.7;
        CHECK(map_entropy(m) == doctest::Approx(0.0));
    }
    SUBCASE("two equal pixels carry one bit") {
        auto m = make_map(4, 4, 0.0);
        m.values.at(0, 0) = 0.5;
        m.values.at(2, 2) = 0.5;
        CHECK(map_entropy(m) == doctest::Approx(1.0).epsilon(1e-12));
    }
    SUBCASE("all-zero map is an error") {
        CHECK_THROWS_AS(map_entropy(make_map(4, 4, 0.0)), std::domain_error);
    }
}

TEST_CASE("normalize_map") {
    SUBCASE("scales the max to 1 and preserves ratios") {
        auto m = make_map(2, 2, 0.0);
        m.values.at(0, 0) = 4.0;
        m.values.at(1, 1) = 1.0;
        const auto out = normalize_map(m);
        CHECK(out.values.at(0, 0) == doctest::Approx(1.0));
        CHECK(out.values.at(1, 1) == doctest::Approx(0.25));
    }
    SUBCASE("idempotent on normalized maps") {
        auto m = make_map(3, 3, 0.0);
        m.values.at(1, 1) = 1.0;
        m.values.at(0, 2) = 0.5;
        const auto once = normalize_map(m);
        const auto twice = normalize_map(once);
        CHECK(once.values == twice.values);
    }
    SUBCASE("all-zero map is returned unchanged with the empty flag") {
        const auto out = normalize_map(make_map(3, 3, 0.0));
        CHECK(out.empty_flag);
        CHECK(out.values.max_value() == 0.0);
    }
}

TEST_CASE("blur strictly increases entropy of non-constant maps") {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    for (int trial = 0; trial < 10; ++trial) {
        auto m = make_map(24, 24, 0.0);
        // blobby binary mask
        for (int b = 0; b < 3; ++b) {
            const int cr = 4 + static_cast<int>(uni(rng) * 16);
            const int cc = 4 + static_cast<int>(uni(rng) * 16);
            for (int r = cr - 2; r <= cr + 2; ++r)
                for (int c = cc - 2; c <= cc + 2; ++c) m.values.at(r, c) = 1.0;
        }
        const double none = map_entropy(m);
        const double k5 = map_entropy(blur_map(m, 5));
        const double k10 = map_entropy(blur_map(m, 10));
        CHECK(k10 > k5);
        CHECK(k5 > none);
    }
}

TEST_CASE("compile_saliency hand_equal equals composing average and blur") {
    AnnotationSet ann;
    ann.sample_id = "s1";
    ann.masks = {Grid(16, 16), Grid(16, 16)};
    ann.masks[0].at(5, 5) = 1.0;
    ann.masks[0].at(5, 6) = 1.0;
    ann.masks[1].at(5, 5) = 1.0;
    ann.masks[1].at(10, 10) = 1.0;

    SaliencyInputs inputs;
    inputs.annotations.emplace("s1", ann);
    SaliencyCompileConfig cfg;
    cfg.height = 16;
    cfg.width = 16;
    const auto compiled = compile_saliency(SaliencySource::hand_equal, {"s1"}, inputs, cfg);
    REQUIRE(compiled.maps.count("s1") == 1);
    const auto expected = normalize_map(blur_map(average_annotations(ann), 5));
    CHECK(compiled.maps.at("s1").values == expected.values);
}

TEST_CASE("compile_saliency et_initial with no initial fixations yields flagged empty map") {
    GazeSession session;
    session.sample_id = "s1";
    session.participant_id = "p1";
    session.fixations = {fix_at(0.5, 0.5, 100.0, GazePhase::full),
                         fix_at(0.2, 0.2, 80.0, GazePhase::full)};
    SaliencyInputs inputs;
    inputs.gaze["s1"] = {session};
    SaliencyCompileConfig cfg;
    cfg.height = 16;
    cfg.width = 16;
    const auto compiled = compile_saliency(SaliencySource::et_initial, {"s1"}, inputs, cfg);
    REQUIRE(compiled.maps.count("s1") == 1);
    CHECK(compiled.maps.at("s1").empty_flag);
    CHECK(compiled.emptied_sessions == 1);
}

TEST_CASE("compile_saliency records gaps for missing inputs") {
    SaliencyInputs inputs;
    SaliencyCompileConfig cfg;
    cfg.height = 8;
    cfg.width = 8;
    const auto compiled =
        compile_saliency(SaliencySource::segmentation, {"s1", "s2"}, inputs, cfg);
    CHECK(compiled.maps.empty());
    CHECK(compiled.gaps == std::vector<std::string>{"s1", "s2"});
}

TEST_CASE("compile_saliency denoised variant removes isolated fixations") {
    // Fig. 2 style fixture: two clusters plus isolated points far away
    std::mt19937_64 rng(5);
    std::normal_distribution<double> jitter(0.0, 0.008);
    GazeSession session;
    session.sample_id = "s1";
    session.participant_id = "p1";
    std::vector<FixationRecord> inliers;
    for (int i = 0; i < 12; ++i) {
        auto f = fix_at(0.3 + jitter(rng), 0.3 + jitter(rng), 100.0);
        inliers.push_back(f);
        session.fixations.push_back(f);
    }
    for (int i = 0; i < 12; ++i) {
        auto f = fix_at(0.7 + jitter(rng), 0.7 + jitter(rng), 100.0);
        inliers.push_back(f);
        session.fixations.push_back(f);
    }
    const std::vector<FixationRecord> isolated = {fix_at(0.05, 0.95, 500.0),
                                                  fix_at(0.95, 0.05, 500.0)};
    for (const auto& f : isolated) session.fixations.push_back(f);

    SaliencyInputs inputs;
    inputs.gaze["s1"] = {session};
    SaliencyCompileConfig cfg;
    cfg.height = 64;
    cfg.width = 64;
    cfg.sigma_px = 2.0;
    const auto compiled =
        compile_saliency(SaliencySource::et_full_denoised, {"s1"}, inputs, cfg);
    REQUIRE(compiled.maps.count("s1") == 1);
    const auto& denoised = compiled.maps.at("s1");

    // oracle: render only the hand-labeled inliers
    auto oracle = render_gaze_heatmap(inliers, cfg.sigma_px, cfg.height, cfg.width);
    for (size_t i = 0; i < oracle.values.size(); ++i)
        CHECK(denoised.values[i] == doctest::Approx(oracle.values[i]).epsilon(1e-9));

    // no mass at the isolated positions beyond kernel tails
    for (const auto& f : isolated) {
        const int r = static_cast<int>(f.y * (cfg.height - 1));
        const int c = static_cast<int>(f.x * (cfg.width - 1));
        CHECK(denoised.values.at(r, c) < 1e-6);
    }
}

TEST_CASE("compile_saliency is deterministic and well-formed") {
    GazeSession session;
    session.sample_id = "s1";
    session.participant_id = "p1";
    for (int i = 0; i < 8; ++i)
        session.fixations.push_back(fix_at(0.3 + 0.01 * i, 0.4, 50.0 + i));
    SaliencyInputs inputs;
    inputs.gaze["s1"] = {session};
    SaliencyCompileConfig cfg;
    cfg.height = 32;
    cfg.width = 32;
    const auto a = compile_saliency(SaliencySource::et_full, {"s1"}, inputs, cfg);
    const auto b = compile_saliency(SaliencySource::et_full, {"s1"}, inputs, cfg);
    CHECK(a.maps.at("s1").values == b.maps.at("s1").values);

    const auto& map = a.maps.at("s1");
    CHECK(map.values.rows() == cfg.height);
    CHECK(map.values.cols() == cfg.width);
    CHECK(map.values.all_finite());
    CHECK(map.values.all_nonnegative());
    CHECK(map.values.max_value() == doctest::Approx(1.0));
}

TEST_CASE("saliency store round-trips maps as 16-bit PGM") {
    test::TempDir tmp("store");
    SaliencyStore store(tmp.path());
    auto m = make_map(8, 8, 0.0, "sample_1");
    m.source = SaliencySource::et_full;
    m.values.at(2, 2) = 1.0;
    m.values.at(4, 4) = 0.5;
    store.save(m);
    CHECK(store.contains(SaliencySource::et_full, "sample_1"));
    const auto loaded = store.load(SaliencySource::et_full, "sample_1");
    REQUIRE(loaded.has_value());
    CHECK(loaded->values.at(2, 2) == doctest::Approx(1.0).epsilon(1e-4));
    CHECK(loaded->values.at(4, 4) == doctest::Approx(0.5).epsilon(1e-4));
    CHECK_FALSE(store.contains(SaliencySource::et_initial, "sample_1"));
}

TEST_CASE("gaze and remap files load into calibrated sessions") {
    test::TempDir tmp("gaze");
    const auto gaze_path = tmp.path() / "gaze.jsonl";
    {
        std::ofstream out(gaze_path);
        out << R"({"sample_id":"s1","participant_id":"p1","phase":"initial","t_ms":10,"x":0.2,"y":0.3,"duration_ms":120})" << '\n';
        out << R"({"sample_id":"s1","participant_id":"p1","phase":"full","t_ms":400,"x":0.6,"y":0.7,"duration_ms":90})" << '\n';
        out << R"({"sample_id":"s1","participant_id":"p2","phase":"initial","t_ms":5,"x":0.4,"y":0.4,"duration_ms":60})" << '\n';
    }
    const auto remap_path = tmp.path() / "remap.jsonl";
    {
        std::ofstream out(remap_path);
        out << R"({"participant_id":"p1","degree":1,"coeffs_x":[0.1,1.0,0.0],"coeffs_y":[0.0,0.0,1.0]})" << '\n';
    }
    auto gaze = load_gaze_file(gaze_path);
    attach_remap(gaze, load_remap_file(remap_path));
    REQUIRE(gaze.count("s1") == 1);
    REQUIRE(gaze["s1"].size() == 2);
    const auto& p1 = gaze["s1"][0].participant_id == "p1" ? gaze["s1"][0] : gaze["s1"][1];
    const auto& p2 = gaze["s1"][0].participant_id == "p2" ? gaze["s1"][0] : gaze["s1"][1];
    CHECK(p1.fixations.size() == 2);
    CHECK(p1.fixations[0].t_ms == 10);  // time ordered
    CHECK(p1.remap.coeffs_x[0] == doctest::Approx(0.1));
    CHECK(p2.remap.coeffs_x[0] == doctest::Approx(0.0));  // identity default
    CHECK(p2.fixations[0].phase == GazePhase::initial);
}

TEST_CASE("gaze loader rejects bad records") {
    test::TempDir tmp("gaze_bad");
    const auto path = tmp.path() / "gaze.jsonl";
    {
        std::ofstream out(path);
        out << R"({"sample_id":"s1","participant_id":"p1","phase":"full","t_ms":1,"x":0.2,"y":0.3,"duration_ms":0})" << '\n';
    }
    CHECK_THROWS_AS(load_gaze_file(path), ValidationError);
}
