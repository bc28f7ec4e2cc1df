#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "viser/embeddings.hpp"
#include "viser/evaluation.hpp"
#include "viser/saliency.hpp"
#include "viser/training.hpp"

namespace viser {

// One declarative file per experiment; command-line flags override fields.
// The fingerprint of the effective config is stamped into every artifact so
// mixed-provenance aggregation is detectable.
struct ExperimentConfig {
    std::filesystem::path manifest_path;
    int image_height = 0;
    int image_width = 0;
    std::filesystem::path output_root = "out";
    std::filesystem::path image_base;  // optional prefix for relative image paths

    struct SaliencySection {
        std::filesystem::path segmentation_dir;
        std::filesystem::path annotation_dir;
        std::filesystem::path gaze_file;
        std::filesystem::path remap_file;
        double sigma_px = 0.0;  // <= 0: 5% of image width
        int kernel_low = 0;
        int kernel_equal = 5;
        int kernel_high = 10;
        int min_cluster_size = 5;
        int min_samples = 3;
    } saliency;

    TrainingConfig training;  // defaults shared by all backbone methods

    struct ProtocolSection {
        std::vector<std::string> methods = {"xent"};
        int n_seeds = 12;
        double bonafide_test_fraction = 0.3;
    } protocol;

    struct ExtractorSection {
        std::string kind = "stub-moments";  // stub-mean | stub-moments | command | remote
        std::string id = "stub-moments";
        std::string command;
        RemoteExtractorConfig remote;
    } extractor;

    int jobs = 1;
};

inline std::string config_fingerprint(const nlohmann::json& canonical) {
    // FNV-1a 64 over the canonical dump
    const std::string dump = canonical.dump();
    uint64_t hash = 0xcbf29ce484222325ULL;
    for (unsigned char ch : dump) {
        hash ^= ch;
        hash *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(hash));
    return std::string(buf);
}

inline nlohmann::json to_json(const ExperimentConfig& cfg) {
    return nlohmann::json{
        {"manifest", cfg.manifest_path.string()},
        {"image_size", {cfg.image_height, cfg.image_width}},
        {"output_root", cfg.output_root.string()},
        {"image_base", cfg.image_base.string()},
        {"saliency",
         {{"segmentation_dir", cfg.saliency.segmentation_dir.string()},
          {"annotation_dir", cfg.saliency.annotation_dir.string()},
          {"gaze_file", cfg.saliency.gaze_file.string()},
          {"remap_file", cfg.saliency.remap_file.string()},
          {"sigma_px", cfg.saliency.sigma_px},
          {"kernels",
           {{"low", cfg.saliency.kernel_low},
            {"equal", cfg.saliency.kernel_equal},
            {"high", cfg.saliency.kernel_high}}},
          {"clustering",
           {{"min_cluster_size", cfg.saliency.min_cluster_size},
            {"min_samples", cfg.saliency.min_samples}}}}},
        {"training",
         {{"backbone", cfg.training.backbone},
          {"alpha", cfg.training.alpha},
          {"epochs", cfg.training.epochs},
          {"batch_size", cfg.training.batch_size},
          {"learning_rate", cfg.training.learning_rate},
          {"lr_schedule", cfg.training.lr_schedule}}},
        {"protocol",
         {{"methods", cfg.protocol.methods},
          {"n_seeds", cfg.protocol.n_seeds},
          {"bonafide_test_fraction", cfg.protocol.bonafide_test_fraction}}},
        {"extractor",
         {{"kind", cfg.extractor.kind},
          {"id", cfg.extractor.id},
          {"command", cfg.extractor.command},
          {"endpoint_url", cfg.extractor.remote.endpoint_url},
          {"auth_token_env", cfg.extractor.remote.auth_token_env},
          {"timeout_seconds", cfg.extractor.remote.timeout_seconds},
          {"max_retries", cfg.extractor.remote.max_retries}}}};
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
    ExperimentConfig cfg;
    cfg.manifest_path = j.value("manifest", "");
    if (j.contains("image_size")) {
        cfg.image_height = j.at("image_size").at(0).get<int>();
        cfg.image_width = j.at("image_size").at(1).get<int>();
    }
    cfg.output_root = j.value("output_root", "out");
    cfg.image_base = j.value("image_base", "");
    if (j.contains("saliency")) {
        const auto& s = j.at("saliency");
        cfg.saliency.segmentation_dir = s.value("segmentation_dir", "");
        cfg.saliency.annotation_dir = s.value("annotation_dir", "");
        cfg.saliency.gaze_file = s.value("gaze_file", "");
        cfg.saliency.remap_file = s.value("remap_file", "");
        cfg.saliency.sigma_px = s.value("sigma_px", 0.0);
        if (s.contains("kernels")) {
            cfg.saliency.kernel_low = s.at("kernels").value("low", 0);
            cfg.saliency.kernel_equal = s.at("kernels").value("equal", 5);
            cfg.saliency.kernel_high = s.at("kernels").value("high", 10);
        }
        if (s.contains("clustering")) {
            cfg.saliency.min_cluster_size = s.at("clustering").value("min_cluster_size", 5);
            cfg.saliency.min_samples = s.at("clustering").value("min_samples", 3);
        }
    }
    if (j.contains("training")) {
        const auto& t = j.at("training");
        cfg.training.backbone = t.value("backbone", "tiny");
        cfg.training.alpha = t.value("alpha", 0.5);
        cfg.training.epochs = t.value("epochs", 50);
        cfg.training.batch_size = t.value("batch_size", 20);
        cfg.training.learning_rate = t.value("learning_rate", 0.005);
        cfg.training.lr_schedule = t.value("lr_schedule", "constant");
    }
    if (j.contains("protocol")) {
        const auto& p = j.at("protocol");
        cfg.protocol.methods = p.value("methods", std::vector<std::string>{"xent"});
        cfg.protocol.n_seeds = p.value("n_seeds", 12);
        cfg.protocol.bonafide_test_fraction = p.value("bonafide_test_fraction", 0.3);
    }
    if (j.contains("extractor")) {
        const auto& e = j.at("extractor");
        cfg.extractor.kind = e.value("kind", "stub-moments");
        cfg.extractor.id = e.value("id", cfg.extractor.kind);
        cfg.extractor.command = e.value("command", "");
        cfg.extractor.remote.endpoint_url = e.value("endpoint_url", "");
        cfg.extractor.remote.auth_token_env =
            e.value("auth_token_env", "VISER_EXTRACTOR_TOKEN");
        cfg.extractor.remote.timeout_seconds = e.value("timeout_seconds", 30);
        cfg.extractor.remote.max_retries = e.value("max_retries", 3);
    }
    return cfg;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open config " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError("config " + path.string() + ": " + e.what());
    }
    return config_from_json(j);
}

// The fingerprint covers exactly the fields that determine a single run
// cell's result. Grid shape (method list, seed count) and output locations
// stay out, so a narrowed --methods/--seeds invocation still produces cells
// a later full run can reuse.
inline std::string fingerprint_of(const ExperimentConfig& cfg) {
    nlohmann::json canonical = to_json(cfg);
    canonical.erase("output_root");
    canonical["protocol"].erase("methods");
    canonical["protocol"].erase("n_seeds");
    return config_fingerprint(canonical);
}

// Method grammar for the protocol list:
//   "xent"                      cross-entropy backbone baseline
//   "<saliency source name>"    saliency-guided backbone for that source
//   "probe:<logreg|svm_linear|svm_rbf>"  classical probe on extractor output
inline MethodSpec method_from_name(const std::string& name, const ExperimentConfig& cfg) {
    MethodSpec spec;
    spec.name = name;
    if (name == "xent") {
        spec.kind = MethodSpec::Kind::backbone;
        spec.training = cfg.training;
        spec.training.saliency_source = std::nullopt;
        return spec;
    }
    if (name.rfind("probe:", 0) == 0) {
        const auto kind = parse_probe_kind(name.substr(6));
        if (!kind) throw ValidationError("unknown probe kind in method '" + name + "'");
        spec.kind = MethodSpec::Kind::probe;
        spec.probe = *kind;
        spec.extractor_id = cfg.extractor.id;
        spec.name = cfg.extractor.id + "+" + name.substr(6);
        return spec;
    }
    const auto source = parse_saliency_source(name);
    if (!source)
        throw ValidationError("unknown method '" + name +
                              "' (expected xent, a saliency source, or probe:<kind>)");
    spec.kind = MethodSpec::Kind::backbone;
    spec.training = cfg.training;
    spec.training.saliency_source = source;
    return spec;
}

// Field-level validation; returns every problem rather than the first.
inline std::vector<std::string> validate_config(const ExperimentConfig& cfg) {
    std::vector<std::string> errors;
    if (cfg.manifest_path.empty())
        errors.push_back("manifest: path is required");
    else if (!std::filesystem::exists(cfg.manifest_path))
        errors.push_back("manifest: no such file " + cfg.manifest_path.string());
    if (cfg.image_height <= 0 || cfg.image_width <= 0)
        errors.push_back("image_size: must be positive [height, width]");
    if (cfg.protocol.n_seeds <= 0) errors.push_back("protocol.n_seeds: must be positive");
    if (cfg.protocol.bonafide_test_fraction <= 0.0 || cfg.protocol.bonafide_test_fraction >= 1.0)
        errors.push_back("protocol.bonafide_test_fraction: must lie in (0, 1)");
    if (cfg.training.alpha < 0.0 || cfg.training.alpha > 1.0)
        errors.push_back("training.alpha: must lie in [0, 1]");
    if (cfg.training.epochs <= 0) errors.push_back("training.epochs: must be positive");
    if (cfg.training.batch_size <= 0) errors.push_back("training.batch_size: must be positive");
    if (cfg.saliency.min_cluster_size < 2)
        errors.push_back("saliency.clustering.min_cluster_size: must be >= 2");
    if (cfg.saliency.min_samples < 1)
        errors.push_back("saliency.clustering.min_samples: must be >= 1");

    bool needs_probe = false;
    for (const auto& name : cfg.protocol.methods) {
        try {
            const auto spec = method_from_name(name, cfg);
            if (spec.kind == MethodSpec::Kind::probe) needs_probe = true;
            if (spec.kind == MethodSpec::Kind::backbone && spec.training.saliency_source) {
                switch (*spec.training.saliency_source) {
                    case SaliencySource::segmentation:
                        if (cfg.saliency.segmentation_dir.empty())
                            errors.push_back("saliency.segmentation_dir: required by method '" +
                                             name + "'");
                        break;
                    case SaliencySource::hand_low:
                    case SaliencySource::hand_equal:
                    case SaliencySource::hand_high:
                        if (cfg.saliency.annotation_dir.empty())
                            errors.push_back("saliency.annotation_dir: required by method '" +
                                             name + "'");
                        break;
                    default:
                        if (cfg.saliency.gaze_file.empty())
                            errors.push_back("saliency.gaze_file: required by method '" + name +
                                             "'");
                        break;
                }
            }
        } catch (const ValidationError& e) {
            errors.push_back(std::string("protocol.methods: ") + e.what());
        }
    }
    if (needs_probe) {
        if (cfg.extractor.kind == "command" && cfg.extractor.command.empty())
            errors.push_back("extractor.command: required for kind 'command'");
        if (cfg.extractor.kind == "remote" && cfg.extractor.remote.endpoint_url.empty())
            errors.push_back("extractor.endpoint_url: required for kind 'remote'");
        if (cfg.extractor.kind != "stub-mean" && cfg.extractor.kind != "stub-moments" &&
            cfg.extractor.kind != "command" && cfg.extractor.kind != "remote")
            errors.push_back("extractor.kind: unknown '" + cfg.extractor.kind + "'");
    }
    return errors;
}

}  // namespace viser
