// viser: compile saliency maps, train and evaluate open-set PAD models,
// extract embeddings, and render report tables.
//
// Exit codes: 0 success, 1 config/data error, 2 usage, 3 partial protocol
// failure.

#include <atomic>
#include <csignal>
#include <iostream>
#include <memory>

#include <CLI11.hpp>

#include "viser/config.hpp"
#include "viser/http_extractor.hpp"
#include "viser/reporting.hpp"

namespace {

std::atomic<bool> g_interrupt{false};

void handle_sigint(int) { g_interrupt.store(true); }

void log_event(const std::string& event, nlohmann::json fields = {}) {
    fields["event"] = event;
    std::cerr << fields.dump() << '\n';
}

struct GlobalOptions {
    std::string config_path;
    std::string output_root_override;
    std::string methods_override;
    int jobs = 0;
    std::string seeds_override;  // "12" runs seeds 0..11, "3..7" an inclusive range
    std::string attacks_filter;
};

std::vector<uint64_t> parse_seeds(const std::string& text) {
    const auto dots = text.find("..");
    std::vector<uint64_t> seeds;
    if (dots == std::string::npos) {
        const int count = std::stoi(text);
        for (int s = 0; s < count; ++s) seeds.push_back(static_cast<uint64_t>(s));
    } else {
        const uint64_t lo = std::stoull(text.substr(0, dots));
        const uint64_t hi = std::stoull(text.substr(dots + 2));
        for (uint64_t s = lo; s <= hi; ++s) seeds.push_back(s);
    }
    return seeds;
}

viser::ExperimentConfig load_effective_config(const GlobalOptions& opts) {
    auto cfg = viser::load_config(opts.config_path);
    if (const char* env_root = std::getenv("VISER_OUTPUT_ROOT")) cfg.output_root = env_root;
    if (!opts.output_root_override.empty()) cfg.output_root = opts.output_root_override;
    if (opts.jobs > 0) cfg.jobs = opts.jobs;
    if (!opts.methods_override.empty()) {
        cfg.protocol.methods.clear();
        std::stringstream ss(opts.methods_override);
        std::string item;
        while (std::getline(ss, item, ','))
            if (!item.empty()) cfg.protocol.methods.push_back(item);
    }
    return cfg;
}

viser::DatasetManifest load_manifest_logged(const viser::ExperimentConfig& cfg) {
    auto manifest = viser::load_manifest(cfg.manifest_path, cfg.image_height, cfg.image_width,
                                         cfg.image_base);
    if (manifest.degraded())
        log_event("manifest_degraded",
                  {{"unresolved_images", manifest.unresolved_images.size()}});
    return manifest;
}

int require_valid(const viser::ExperimentConfig& cfg) {
    const auto errors = viser::validate_config(cfg);
    if (errors.empty()) return 0;
    for (const auto& e : errors) log_event("config_error", {{"detail", e}});
    return 1;
}

std::unique_ptr<viser::EmbeddingExtractor> make_extractor(const viser::ExperimentConfig& cfg) {
    if (cfg.extractor.kind == "stub-mean") return std::make_unique<viser::MeanIntensityStub>();
    if (cfg.extractor.kind == "stub-moments") return std::make_unique<viser::MomentStub>();
    if (cfg.extractor.kind == "command")
        return std::make_unique<viser::CommandExtractor>(cfg.extractor.id, cfg.extractor.command);
    if (cfg.extractor.kind == "remote")
        return std::make_unique<viser::RemoteExtractorClient>(cfg.extractor.id,
                                                              cfg.extractor.remote);
    throw viser::ValidationError("unknown extractor kind '" + cfg.extractor.kind + "'");
}

viser::SaliencyCompileConfig saliency_compile_config(const viser::ExperimentConfig& cfg) {
    viser::SaliencyCompileConfig out;
    out.height = cfg.image_height;
    out.width = cfg.image_width;
    out.sigma_px = cfg.saliency.sigma_px;
    out.kernel_low = cfg.saliency.kernel_low;
    out.kernel_equal = cfg.saliency.kernel_equal;
    out.kernel_high = cfg.saliency.kernel_high;
    out.min_cluster_size = cfg.saliency.min_cluster_size;
    out.min_samples = cfg.saliency.min_samples;
    return out;
}

int cmd_validate_config(const GlobalOptions& opts) {
    const auto cfg = load_effective_config(opts);
    const int status = require_valid(cfg);
    if (status == 0)
        std::cout << nlohmann::json{{"status", "ok"},
                                    {"fingerprint", viser::fingerprint_of(cfg)}}
                         .dump()
                  << '\n';
    return status;
}

int cmd_compile_saliency(const GlobalOptions& opts, const std::string& source_name,
                         bool dump_labelings) {
    const auto cfg = load_effective_config(opts);
    if (int status = require_valid(cfg)) return status;
    const auto source = viser::parse_saliency_source(source_name);
    if (!source) {
        log_event("config_error", {{"detail", "unknown saliency source '" + source_name + "'"}});
        return 1;
    }
    const auto manifest = load_manifest_logged(cfg);
    std::vector<std::string> ids;
    for (const auto& s : manifest.samples) ids.push_back(s.sample_id);

    viser::SaliencyInputs inputs;
    switch (*source) {
        case viser::SaliencySource::segmentation:
            inputs.segmentation_masks = viser::load_mask_dir(cfg.saliency.segmentation_dir);
            break;
        case viser::SaliencySource::hand_low:
        case viser::SaliencySource::hand_equal:
        case viser::SaliencySource::hand_high:
            inputs.annotations = viser::load_annotation_dir(cfg.saliency.annotation_dir);
            break;
        default: {
            inputs.gaze = viser::load_gaze_file(cfg.saliency.gaze_file);
            if (!cfg.saliency.remap_file.empty() &&
                std::filesystem::exists(cfg.saliency.remap_file))
                viser::attach_remap(inputs.gaze, viser::load_remap_file(cfg.saliency.remap_file));
            break;
        }
    }

    const auto compiled =
        viser::compile_saliency(*source, ids, inputs, saliency_compile_config(cfg));
    viser::SaliencyStore store(cfg.output_root / "saliency");
    store.save_all(compiled);

    if (dump_labelings &&
        (*source == viser::SaliencySource::et_full_denoised ||
         *source == viser::SaliencySource::et_initial_denoised)) {
        // per-fixation labelings for plotting cluster/noise overlays
        const auto path = cfg.output_root / "saliency" /
                          (std::string(viser::to_string(*source)) + "_labelings.jsonl");
        std::ofstream out(path, std::ios::trunc);
        const viser::GazePhase phase = *source == viser::SaliencySource::et_initial_denoised
                                           ? viser::GazePhase::initial
                                           : viser::GazePhase::full;
        for (const auto& [sid, sessions] : inputs.gaze)
            for (const auto& session : sessions) {
                const auto remapped = viser::remap_fixations(session);
                const auto fixations = viser::filter_phase(remapped.session.fixations, phase);
                const auto denoised = viser::denoise_fixations(
                    fixations, cfg.saliency.min_cluster_size, cfg.saliency.min_samples);
                for (size_t i = 0; i < fixations.size(); ++i) {
                    nlohmann::json line{{"sample_id", sid},
                                        {"participant_id", session.participant_id},
                                        {"x", fixations[i].x},
                                        {"y", fixations[i].y},
                                        {"duration_ms", fixations[i].duration_ms},
                                        {"label", denoised.labeling.labels[i]}};
                    out << line.dump() << '\n';
                }
            }
    }

    nlohmann::json summary{{"source", source_name},
                           {"maps", compiled.maps.size()},
                           {"gaps", compiled.gaps.size()},
                           {"clamped_fixations", compiled.clamped_fixations},
                           {"emptied_sessions", compiled.emptied_sessions}};
    if (compiled.excessively_clamped_sessions > 0)
        log_event("calibration_warning",
                  {{"detail", "over 20% of fixations clamped out of frame"},
                   {"sessions", compiled.excessively_clamped_sessions}});
    log_event("compile_saliency_done", summary);
    std::cout << summary.dump() << '\n';
    return 0;
}

// loads saliency stores for every source named by the configured methods
std::map<viser::SaliencySource, std::map<std::string, viser::SaliencyMap>> load_saliency_stores(
    const viser::ExperimentConfig& cfg, const std::vector<viser::MethodSpec>& methods,
    std::vector<std::string>& missing) {
    std::map<viser::SaliencySource, std::map<std::string, viser::SaliencyMap>> stores;
    viser::SaliencyStore store(cfg.output_root / "saliency");
    for (const auto& method : methods) {
        if (method.kind != viser::MethodSpec::Kind::backbone || !method.training.saliency_source)
            continue;
        const auto source = *method.training.saliency_source;
        if (stores.count(source)) continue;
        auto maps = store.load_all(source);
        if (maps.empty())
            missing.push_back(viser::to_string(source));
        else
            stores.emplace(source, std::move(maps));
    }
    return stores;
}

int cmd_embed(const GlobalOptions& opts) {
    const auto cfg = load_effective_config(opts);
    if (int status = require_valid(cfg)) return status;
    const auto manifest = load_manifest_logged(cfg);
    auto extractor = make_extractor(cfg);
    viser::EmbeddingStore store(cfg.output_root / "embeddings");
    const auto images =
        viser::disk_image_provider(cfg.image_height, cfg.image_width, cfg.image_base);
    std::map<std::string, const viser::IrisSample*> by_id;
    std::vector<std::string> ids;
    for (const auto& s : manifest.samples) {
        by_id[s.sample_id] = &s;
        ids.push_back(s.sample_id);
    }
    const auto result = viser::extract_embeddings(
        *extractor, ids, [&](const std::string& sid) { return images(*by_id.at(sid)); }, store);
    nlohmann::json summary{{"extractor", extractor->id()},
                           {"vectors", result.vectors.size()},
                           {"cache_hits", result.cache_hits},
                           {"extracted", result.extracted},
                           {"gaps", result.gaps.size()}};
    log_event("embed_done", summary);
    std::cout << summary.dump() << '\n';
    return result.gaps.empty() ? 0 : 3;
}

int cmd_train_one(const viser::ExperimentConfig& cfg, const std::string& method_name,
                  const std::string& attack_name, int seed) {
    const auto manifest = load_manifest_logged(cfg);
    const auto method = viser::method_from_name(method_name, cfg);
    if (method.kind != viser::MethodSpec::Kind::backbone) {
        log_event("config_error", {{"detail", "train expects a backbone method"}});
        return 1;
    }
    const auto attack = viser::parse_attack_type(attack_name);
    if (!attack || *attack == viser::AttackType::bonafide) {
        log_event("config_error", {{"detail", "train: --attack must name an attack type"}});
        return 1;
    }
    std::vector<std::string> missing;
    auto saliency_stores = load_saliency_stores(cfg, {method}, missing);
    if (!missing.empty()) {
        log_event("config_error", {{"detail", "saliency store empty for source '" + missing[0] +
                                                  "'; run compile-saliency first"}});
        return 1;
    }

    const auto splits = viser::make_loto_splits(manifest, static_cast<uint64_t>(seed),
                                                cfg.protocol.bonafide_test_fraction);
    const viser::SplitPlan* plan = nullptr;
    for (const auto& p : splits)
        if (p.held_out_attack == *attack) plan = &p;
    const auto images =
        viser::disk_image_provider(cfg.image_height, cfg.image_width, cfg.image_base);
    auto tc = method.training;
    tc.seed = static_cast<uint64_t>(seed);
    tc.image_height = cfg.image_height;
    tc.image_width = cfg.image_width;
    const std::map<std::string, viser::SaliencyMap>* store = nullptr;
    if (tc.saliency_source) store = &saliency_stores.at(*tc.saliency_source);
    auto trained = viser::train_model(manifest, plan->train, plan->test, store, tc, images);
    const auto dir = cfg.output_root / "runs" / method.name / viser::to_string(*attack) /
                     std::to_string(seed);
    std::filesystem::create_directories(dir);
    viser::save_checkpoint({trained.backbone->descriptor(), viser::fingerprint_of(cfg),
                            static_cast<uint64_t>(seed), trained.backbone->state()},
                           dir / "model.ckpt");
    {
        std::ofstream log(dir / "training_log.jsonl", std::ios::trunc);
        for (const auto& e : trained.log) {
            nlohmann::json line{{"epoch", e.epoch},
                                {"ce", e.ce},
                                {"saliency_mse", e.saliency_mse},
                                {"total", e.total}};
            if (std::isfinite(e.val_auroc)) line["val_auroc"] = e.val_auroc;
            log << line.dump() << '\n';
        }
    }
    log_event("train_done", {{"method", method.name},
                             {"attack", attack_name},
                             {"seed", seed},
                             {"final_total", trained.log.back().total},
                             {"zero_cam_skips", trained.zero_cam_skips}});
    std::cout << nlohmann::json{{"checkpoint", (dir / "model.ckpt").string()}}.dump() << '\n';
    return 0;
}

int cmd_eval(const GlobalOptions& opts) {
    const auto cfg = load_effective_config(opts);
    if (int status = require_valid(cfg)) return status;
    const auto manifest = load_manifest_logged(cfg);

    std::vector<viser::MethodSpec> methods;
    for (const auto& name : cfg.protocol.methods)
        methods.push_back(viser::method_from_name(name, cfg));

    std::vector<std::string> missing;
    auto saliency_stores = load_saliency_stores(cfg, methods, missing);
    if (!missing.empty()) {
        for (const auto& m : missing)
            log_event("config_error", {{"detail", "saliency store empty for source '" + m +
                                                      "'; run compile-saliency " + m + " first"}});
        return 1;
    }
    std::map<std::string, std::map<std::string, std::vector<double>>> embedding_stores;
    viser::EmbeddingStore embed_store(cfg.output_root / "embeddings");
    for (const auto& method : methods) {
        if (method.kind != viser::MethodSpec::Kind::probe) continue;
        if (embedding_stores.count(method.extractor_id)) continue;
        auto vectors = embed_store.load_all(method.extractor_id);
        if (vectors.empty()) {
            log_event("config_error",
                      {{"detail", "embedding store empty for extractor '" + method.extractor_id +
                                      "'; run embed first"}});
            return 1;
        }
        embedding_stores.emplace(method.extractor_id, std::move(vectors));
    }

    viser::ProtocolConfig protocol;
    protocol.methods = methods;
    protocol.n_seeds = cfg.protocol.n_seeds;
    if (!opts.seeds_override.empty()) protocol.seeds = parse_seeds(opts.seeds_override);
    if (!opts.attacks_filter.empty()) {
        std::stringstream ss(opts.attacks_filter);
        std::string item;
        while (std::getline(ss, item, ',')) {
            const auto attack = viser::parse_attack_type(item);
            if (!attack || *attack == viser::AttackType::bonafide) {
                log_event("config_error", {{"detail", "--attacks: unknown attack type '" + item + "'"}});
                return 1;
            }
            protocol.attack_filter.insert(*attack);
        }
    }
    protocol.bonafide_test_fraction = cfg.protocol.bonafide_test_fraction;
    protocol.output_root = cfg.output_root;
    protocol.config_fingerprint = viser::fingerprint_of(cfg);
    protocol.jobs = std::max(1, cfg.jobs);

    const auto images =
        viser::disk_image_provider(cfg.image_height, cfg.image_width, cfg.image_base);
    log_event("eval_start", {{"methods", cfg.protocol.methods},
                             {"n_seeds", protocol.n_seeds},
                             {"jobs", protocol.jobs}});
    const auto outcome = viser::run_protocol(manifest, saliency_stores, embedding_stores,
                                             protocol, images, &g_interrupt);
    nlohmann::json summary{{"executed", outcome.executed},
                           {"skipped_cached", outcome.skipped},
                           {"failed", outcome.failed},
                           {"interrupted", outcome.interrupted}};
    log_event("eval_done", summary);
    for (const auto& f : outcome.failures) log_event("run_failed", {{"detail", f}});
    std::cout << summary.dump() << '\n';
    if (outcome.failed > 0 || outcome.interrupted) return 3;
    return 0;
}

int cmd_report(const GlobalOptions& opts, const std::string& baseline,
               const std::string& format_name, bool force) {
    const auto cfg = load_effective_config(opts);
    const auto results = viser::load_all_results(cfg.output_root);
    if (results.empty()) {
        log_event("config_error",
                  {{"detail", "no results under " + (cfg.output_root / "runs").string()}});
        return 1;
    }
    std::set<std::string> fingerprints;
    for (const auto& run : results) fingerprints.insert(run.config_fingerprint);
    if (fingerprints.size() > 1 && !force) {
        log_event("config_error",
                  {{"detail", "results mix " + std::to_string(fingerprints.size()) +
                                  " config fingerprints; pass --force to aggregate anyway"}});
        return 1;
    }

    std::map<std::string, std::vector<viser::RunResult>> by_method;
    for (const auto& run : results) by_method[run.method].push_back(run);
    if (!by_method.count(baseline)) {
        log_event("config_error", {{"detail", "baseline method '" + baseline + "' has no runs"}});
        return 1;
    }
    const auto baseline_report = viser::aggregate_runs(by_method.at(baseline));
    std::vector<viser::MethodReport> method_reports;
    for (const auto& [name, runs] : by_method) {
        if (name == baseline) continue;
        method_reports.push_back(viser::aggregate_runs(runs));
    }
    const auto deltas = viser::delta_table(baseline_report, method_reports);
    const auto format =
        format_name == "csv" ? viser::ReportFormat::csv : viser::ReportFormat::markdown;
    std::cout << viser::render_report(deltas, format);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    std::signal(SIGINT, handle_sigint);

    CLI::App app{"saliency-guided open-set iris PAD toolkit"};
    app.require_subcommand(1);
    GlobalOptions opts;
    app.add_option("--config", opts.config_path, "experiment config file (JSON)");
    app.add_option("--output-root", opts.output_root_override, "override output root");
    app.add_option("--jobs", opts.jobs, "worker pool size for eval");
    app.add_option("--seeds", opts.seeds_override,
                   "protocol seeds: a count like 12, or an inclusive range like 0..11");
    app.add_option("--attacks", opts.attacks_filter,
                   "restrict eval to these held-out attack types (comma separated)");
    app.add_option("--methods,--method", opts.methods_override,
                   "override method list (comma separated)");

    auto* validate =
        app.add_subcommand("validate-config", "check the config and print its fingerprint");

    std::string source_name;
    bool dump_labelings = false;
    auto* compile =
        app.add_subcommand("compile-saliency", "compile one saliency source into the store");
    compile->add_option("source", source_name, "saliency source name")->required();
    compile->add_flag("--dump-labelings", dump_labelings,
                      "also write per-fixation cluster/noise labelings (denoised sources)");

    std::string train_method = "xent", train_attack;
    int train_seed = 0;
    auto* train = app.add_subcommand("train", "train one (method, held-out attack, seed) cell");
    train->add_option("--method", train_method, "method name");
    train->add_option("--attack", train_attack, "held-out attack type")->required();
    train->add_option("--seed", train_seed, "seed");

    auto* embed = app.add_subcommand("embed", "extract embeddings for every manifest sample");

    auto* eval = app.add_subcommand("eval", "run the full resumable protocol grid");

    std::string baseline = "xent", format_name = "markdown";
    bool force = false;
    auto* report = app.add_subcommand("report", "aggregate results and render tables");
    report->add_option("--baseline", baseline, "baseline method name");
    report->add_option("--format", format_name, "markdown or csv")
        ->check(CLI::IsMember({"markdown", "csv"}));
    report->add_flag("--force", force, "aggregate across mixed config fingerprints");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (app.got_subcommand(validate)) return cmd_validate_config(opts);
        if (app.got_subcommand(compile))
            return cmd_compile_saliency(opts, source_name, dump_labelings);
        if (app.got_subcommand(train)) {
            const auto cfg = load_effective_config(opts);
            if (int status = require_valid(cfg)) return status;
            return cmd_train_one(cfg, train_method, train_attack, train_seed);
        }
        if (app.got_subcommand(embed)) return cmd_embed(opts);
        if (app.got_subcommand(eval)) return cmd_eval(opts);
        if (app.got_subcommand(report)) return cmd_report(opts, baseline, format_name, force);
    } catch (const viser::ParseError& e) {
        log_event("error", {{"detail", e.what()}});
        return 1;
    } catch (const viser::ValidationError& e) {
        log_event("error", {{"detail", e.what()}});
        return 1;
    } catch (const std::exception& e) {
        log_event("error", {{"detail", e.what()}});
        return 1;
    }
    return 2;
}
