#pragma once

#include <atomic>
#include <mutex>
#include <set>
#include <thread>

#include <json.hpp>

#include "viser/embeddings.hpp"
#include "viser/metrics.hpp"
#include "viser/training.hpp"

namespace viser {

// Leave-one-attack-type-out split. The held-out attack never appears in
// train; test attacks are exactly the held-out type; bonafide samples are
// partitioned once per seed and shared across all seven splits.
struct SplitPlan {
    AttackType held_out_attack = AttackType::printout;
    std::vector<std::string> train;
    std::vector<std::string> test;
    uint64_t seed = 0;
};

inline std::vector<SplitPlan> make_loto_splits(const DatasetManifest& manifest, uint64_t seed,
                                               double bonafide_test_fraction = 0.3) {
    const auto hist = manifest.histogram();
    std::string missing;
    for (AttackType t : kAttackTags)
        if (!hist.count(t)) missing += std::string(missing.empty() ? "" : ", ") + to_string(t);
    if (!missing.empty())
        throw ValidationError("manifest lacks attack types: " + missing);
    if (!hist.count(AttackType::bonafide))
        throw ValidationError("manifest lacks bonafide samples");

    // bonafide partition, stratified by source corpus
    std::map<std::string, std::vector<std::string>> bona_by_corpus;
    for (const auto& s : manifest.samples)
        if (s.label == Label::bonafide) bona_by_corpus[s.source_corpus].push_back(s.sample_id);
    std::vector<std::string> bona_train, bona_test;
    Rng rng(seed ^ 0xb0a0f1de5eedULL);
    for (auto& [corpus, ids] : bona_by_corpus) {
        rng.shuffle(ids);
        const int n = static_cast<int>(ids.size());
        int n_test = static_cast<int>(std::llround(bonafide_test_fraction * n));
        if (n >= 2) n_test = std::clamp(n_test, 1, n - 1);
        for (int i = 0; i < n; ++i)
            (i < n_test ? bona_test : bona_train).push_back(ids[i]);
    }
    if (bona_train.empty() || bona_test.empty())
        throw ValidationError("bonafide partition degenerate; adjust test fraction");

    std::vector<SplitPlan> plans;
    for (AttackType held_out : kAttackTags) {
        SplitPlan plan;
        plan.held_out_attack = held_out;
        plan.seed = seed;
        plan.train = bona_train;
        plan.test = bona_test;
        for (const auto& s : manifest.samples) {
            if (s.label != Label::attack) continue;
            if (s.attack_type == held_out)
                plan.test.push_back(s.sample_id);
            else
                plan.train.push_back(s.sample_id);
        }
        plans.push_back(std::move(plan));
    }
    return plans;
}

struct ScoringResult {
    std::vector<ScoreRecord> records;
    std::vector<std::string> errors;  // unreadable samples; run continues
};

inline ScoringResult score_samples(Backbone& backbone, const DatasetManifest& manifest,
                                   const std::vector<std::string>& ids,
                                   const ImageProvider& images) {
    std::map<std::string, const IrisSample*> by_id;
    for (const auto& s : manifest.samples) by_id[s.sample_id] = &s;
    ScoringResult result;
    for (const auto& id : ids) {
        auto it = by_id.find(id);
        if (it == by_id.end()) {
            result.errors.push_back(id + ": not in manifest");
            continue;
        }
        try {
            const auto out = backbone.forward(images(*it->second), false);
            result.records.push_back({id, it->second->label, attack_probability(out.logits)});
        } catch (const std::exception& e) {
            result.errors.push_back(id + ": " + e.what());
        }
    }
    return result;
}

// ---- protocol ---------------------------------------------------------------

struct RunResult {
    std::string method;
    AttackType held_out_attack = AttackType::printout;
    uint64_t seed = 0;
    std::vector<ScoreRecord> scores;
    double auroc_value = 0.0;
    double apcer_at_bpcer1 = 0.0;
    double threshold = 0.0;
    double achieved_bpcer = 0.0;
    std::string config_fingerprint;
};

struct MethodSpec {
    std::string name;
    enum class Kind { backbone, probe } kind = Kind::backbone;
    TrainingConfig training;               // backbone methods
    ProbeKind probe = ProbeKind::logreg;   // probe methods
    std::string extractor_id;              // embedding store key for probes
    ProbeHyperparams probe_params;
};

struct ProtocolConfig {
    std::vector<MethodSpec> methods;
    int n_seeds = 12;                    // expands to seeds 0..n_seeds-1 when seeds is empty
    std::vector<uint64_t> seeds;         // explicit seed list wins over n_seeds
    std::set<AttackType> attack_filter;  // empty = all seven
    double bonafide_test_fraction = 0.3;
    std::filesystem::path output_root;
    std::string config_fingerprint;
    int jobs = 1;
    bool persist_checkpoints = true;

    std::vector<uint64_t> effective_seeds() const {
        if (!seeds.empty()) return seeds;
        std::vector<uint64_t> out;
        for (int s = 0; s < n_seeds; ++s) out.push_back(static_cast<uint64_t>(s));
        return out;
    }
};

struct ProtocolOutcome {
    std::vector<RunResult> results;
    int executed = 0;
    int skipped = 0;
    int failed = 0;
    std::vector<std::string> failures;
    bool interrupted = false;
};

namespace protocol_detail {

inline std::filesystem::path run_dir(const std::filesystem::path& root, const std::string& method,
                                     AttackType attack, uint64_t seed) {
    return root / "runs" / method / to_string(attack) / std::to_string(seed);
}

inline void persist_run(const RunResult& run, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    {
        const auto tmp = dir / "scores.tmp";
        std::ofstream out(tmp, std::ios::trunc);
        for (const auto& rec : run.scores) {
            nlohmann::json line{{"sample_id", rec.sample_id},
                                {"label", to_string(rec.label)},
                                {"score", rec.score}};
            out << line.dump() << '\n';
        }
        if (!out) throw std::runtime_error("cannot write scores in " + dir.string());
        out.close();
        std::filesystem::rename(tmp, dir / "scores");
    }
    nlohmann::json summary{{"method", run.method},
                           {"held_out_attack", to_string(run.held_out_attack)},
                           {"seed", run.seed},
                           {"auroc", run.auroc_value},
                           {"apcer_at_bpcer1", run.apcer_at_bpcer1},
                           {"threshold", std::isfinite(run.threshold)
                                             ? nlohmann::json(run.threshold)
                                             : nlohmann::json("inf")},
                           {"achieved_bpcer", run.achieved_bpcer},
                           {"n_scores", run.scores.size()},
                           {"config_fingerprint", run.config_fingerprint}};
    const auto tmp = dir / "result.json.tmp";
    std::ofstream out(tmp, std::ios::trunc);
    out << summary.dump(2) << '\n';
    if (!out) throw std::runtime_error("cannot write result in " + dir.string());
    out.close();
    std::filesystem::rename(tmp, dir / "result.json");
}

inline std::optional<RunResult> load_run(const std::filesystem::path& dir,
                                         const std::string& expected_fingerprint) {
    const auto result_path = dir / "result.json";
    const auto scores_path = dir / "scores";
    if (!std::filesystem::exists(result_path) || !std::filesystem::exists(scores_path))
        return std::nullopt;
    std::ifstream in(result_path);
    nlohmann::json summary;
    try {
        in >> summary;
    } catch (const std::exception&) {
        return std::nullopt;
    }
    if (!expected_fingerprint.empty() &&
        summary.value("config_fingerprint", "") != expected_fingerprint)
        return std::nullopt;
    RunResult run;
    run.method = summary.at("method").get<std::string>();
    const auto attack = parse_attack_type(summary.at("held_out_attack").get<std::string>());
    if (!attack) return std::nullopt;
    run.held_out_attack = *attack;
    run.seed = summary.at("seed").get<uint64_t>();
    run.auroc_value = summary.at("auroc").get<double>();
    run.apcer_at_bpcer1 = summary.at("apcer_at_bpcer1").get<double>();
    run.threshold = summary.at("threshold").is_string()
                        ? std::numeric_limits<double>::infinity()
                        : summary.at("threshold").get<double>();
    run.achieved_bpcer = summary.at("achieved_bpcer").get<double>();
    run.config_fingerprint = summary.value("config_fingerprint", "");
    std::ifstream scores(scores_path);
    std::string line;
    while (std::getline(scores, line)) {
        if (line.empty()) continue;
        const auto rec = nlohmann::json::parse(line);
        run.scores.push_back({rec.at("sample_id").get<std::string>(),
                              rec.at("label").get<std::string>() == "attack" ? Label::attack
                                                                             : Label::bonafide,
                              rec.at("score").get<double>()});
    }
    return run;
}

}  // namespace protocol_detail

// Everything persisted under <root>/runs, regardless of fingerprint; the
// caller decides how to handle mixed fingerprints.
inline std::vector<RunResult> load_all_results(const std::filesystem::path& root) {
    std::vector<RunResult> results;
    const auto runs = root / "runs";
    if (!std::filesystem::exists(runs)) return results;
    for (const auto& method_dir : std::filesystem::directory_iterator(runs)) {
        if (!method_dir.is_directory()) continue;
        for (const auto& attack_dir : std::filesystem::directory_iterator(method_dir.path())) {
            if (!attack_dir.is_directory()) continue;
            for (const auto& seed_dir : std::filesystem::directory_iterator(attack_dir.path())) {
                if (!seed_dir.is_directory()) continue;
                if (auto run = protocol_detail::load_run(seed_dir.path(), ""))
                    results.push_back(std::move(*run));
            }
        }
    }
    return results;
}

// Full open-set grid: every (method, held-out attack, seed) cell. Completed
// cells found on disk with a matching fingerprint are not re-executed, so an
// interrupted protocol resumes where it stopped.
inline ProtocolOutcome run_protocol(
    const DatasetManifest& manifest,
    const std::map<SaliencySource, std::map<std::string, SaliencyMap>>& saliency_stores,
    const std::map<std::string, std::map<std::string, std::vector<double>>>& embedding_stores,
    const ProtocolConfig& config, const ImageProvider& images,
    std::atomic<bool>* interrupt = nullptr) {
    struct Task {
        const MethodSpec* method;
        AttackType attack;
        uint64_t seed;
        const SplitPlan* split;
    };

    // one split set per seed, shared by every method
    const auto seeds = config.effective_seeds();
    std::map<uint64_t, std::vector<SplitPlan>> splits_by_seed;
    for (uint64_t s : seeds)
        splits_by_seed[s] = make_loto_splits(manifest, s, config.bonafide_test_fraction);

    std::vector<Task> tasks;
    for (const auto& method : config.methods)
        for (uint64_t s : seeds)
            for (const auto& split : splits_by_seed[s]) {
                if (!config.attack_filter.empty() &&
                    !config.attack_filter.count(split.held_out_attack))
                    continue;
                tasks.push_back({&method, split.held_out_attack, s, &split});
            }

    ProtocolOutcome outcome;
    std::mutex mutex;
    std::atomic<size_t> next{0};

    auto execute_task = [&](const Task& task) -> RunResult {
        RunResult run;
        run.method = task.method->name;
        run.held_out_attack = task.attack;
        run.seed = task.seed;
        run.config_fingerprint = config.config_fingerprint;

        std::map<std::string, const IrisSample*> by_id;
        for (const auto& s : manifest.samples) by_id[s.sample_id] = &s;

        if (task.method->kind == MethodSpec::Kind::backbone) {
            TrainingConfig tc = task.method->training;
            tc.seed = task.seed;
            tc.image_height = manifest.image_height;
            tc.image_width = manifest.image_width;
            const std::map<std::string, SaliencyMap>* store = nullptr;
            if (tc.saliency_source) {
                auto it = saliency_stores.find(*tc.saliency_source);
                if (it == saliency_stores.end())
                    throw std::runtime_error(std::string("saliency store not compiled: ") +
                                             to_string(*tc.saliency_source));
                store = &it->second;
            }
            auto trained =
                train_model(manifest, task.split->train, task.split->test, store, tc, images);
            auto scored = score_samples(*trained.backbone, manifest, task.split->test, images);
            run.scores = std::move(scored.records);
            if (config.persist_checkpoints) {
                const auto dir = protocol_detail::run_dir(config.output_root, run.method,
                                                          task.attack, task.seed);
                std::filesystem::create_directories(dir);
                Checkpoint ckpt{trained.backbone->descriptor(), config.config_fingerprint,
                                task.seed, trained.backbone->state()};
                save_checkpoint(ckpt, dir / "model.ckpt");
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
        } else {
            auto store_it = embedding_stores.find(task.method->extractor_id);
            if (store_it == embedding_stores.end())
                throw std::runtime_error("embedding store missing: " + task.method->extractor_id);
            const auto& vectors = store_it->second;
            auto gather = [&](const std::vector<std::string>& ids) {
                std::vector<std::pair<std::string, std::vector<double>>> xs;
                std::vector<Label> ys;
                for (const auto& id : ids) {
                    auto vec = vectors.find(id);
                    if (vec == vectors.end())
                        throw std::runtime_error("embedding missing for sample " + id);
                    xs.emplace_back(id, vec->second);
                    ys.push_back(by_id.at(id)->label);
                }
                return std::make_pair(xs, ys);
            };
            auto [train_x, train_y] = gather(task.split->train);
            std::vector<std::vector<double>> train_mat;
            for (auto& [id, v] : train_x) train_mat.push_back(v);
            ProbeHyperparams hp = task.method->probe_params;
            hp.seed = task.seed;
            const auto model = fit_probe(train_mat, train_y, task.method->probe, hp);
            auto [test_x, test_y] = gather(task.split->test);
            run.scores = probe_scores(model, test_x, test_y);
        }

        run.auroc_value = auroc(run.scores);
        const auto apcer = apcer_at_bpcer(run.scores, 0.01);
        run.apcer_at_bpcer1 = apcer.apcer;
        run.threshold = apcer.threshold;
        run.achieved_bpcer = apcer.achieved_bpcer;
        protocol_detail::persist_run(
            run, protocol_detail::run_dir(config.output_root, run.method, task.attack, task.seed));
        return run;
    };

    auto worker = [&]() {
        while (true) {
            if (interrupt && interrupt->load()) return;
            const size_t i = next.fetch_add(1);
            if (i >= tasks.size()) return;
            const Task& task = tasks[i];
            const auto dir = protocol_detail::run_dir(config.output_root, task.method->name,
                                                      task.attack, task.seed);
            if (auto existing = protocol_detail::load_run(dir, config.config_fingerprint)) {
                std::lock_guard lock(mutex);
                outcome.results.push_back(std::move(*existing));
                ++outcome.skipped;
                continue;
            }
            try {
                RunResult run = execute_task(task);
                std::lock_guard lock(mutex);
                outcome.results.push_back(std::move(run));
                ++outcome.executed;
            } catch (const std::exception& e) {
                std::lock_guard lock(mutex);
                ++outcome.failed;
                outcome.failures.push_back(task.method->name + "/" +
                                           to_string(task.attack) + "/" +
                                           std::to_string(task.seed) + ": " + e.what());
            }
        }
    };

    const int jobs = std::max(1, config.jobs);
    if (jobs == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < jobs; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    outcome.interrupted =
        interrupt && interrupt->load() &&
        outcome.executed + outcome.skipped + outcome.failed < static_cast<int>(tasks.size());
    return outcome;
}

}  // namespace viser
