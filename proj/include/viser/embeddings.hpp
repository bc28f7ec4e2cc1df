#pragma once

#include <atomic>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "viser/grid.hpp"
#include "viser/image_io.hpp"
#include "viser/metrics.hpp"
#include "viser/rng.hpp"

namespace viser {

struct EmbeddingVector {
    std::string sample_id;
    std::vector<double> values;
};

// Adapter boundary to whatever produces embeddings: a deterministic stub for
// tests, an external command (local inference runtime), or a remote service.
class EmbeddingExtractor {
public:
    virtual ~EmbeddingExtractor() = default;
    virtual const std::string& id() const = 0;
    virtual std::vector<double> extract(const Grid& image) = 0;
    int invocations() const { return invocations_.load(); }

protected:
    void count_invocation() { invocations_.fetch_add(1); }

private:
    std::atomic<int> invocations_{0};
};

// (m, 1-m) over the mean intensity; the simplest checkable contract.
class MeanIntensityStub : public EmbeddingExtractor {
public:
    const std::string& id() const override { return id_; }
    std::vector<double> extract(const Grid& image) override {
        count_invocation();
        const double m = image.sum() / static_cast<double>(image.size());
        return {m, 1.0 - m};
    }

private:
    std::string id_ = "stub-mean";
};

// Deterministic image moments; enough signal for protocol fixtures.
class MomentStub : public EmbeddingExtractor {
public:
    const std::string& id() const override { return id_; }
    std::vector<double> extract(const Grid& image) override {
        count_invocation();
        const int rows = image.rows(), cols = image.cols();
        const double n = static_cast<double>(image.size());
        const double mean = image.sum() / n;
        double var = 0.0;
        for (double v : image.data()) var += (v - mean) * (v - mean);
        var /= n;
        std::vector<double> quadrants(4, 0.0), counts(4, 0.0);
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < cols; ++c) {
                const int q = (r < rows / 2 ? 0 : 2) + (c < cols / 2 ? 0 : 1);
                quadrants[q] += image.at(r, c);
                counts[q] += 1.0;
            }
        std::vector<double> out = {mean, std::sqrt(var)};
        for (int q = 0; q < 4; ++q) out.push_back(quadrants[q] / std::max(counts[q], 1.0));
        double grad_r = 0.0, grad_c = 0.0;
        for (int r = 0; r + 1 < rows; ++r)
            for (int c = 0; c < cols; ++c) grad_r += std::abs(image.at(r + 1, c) - image.at(r, c));
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c + 1 < cols; ++c) grad_c += std::abs(image.at(r, c + 1) - image.at(r, c));
        out.push_back(grad_r / n);
        out.push_back(grad_c / n);
        return out;
    }

private:
    std::string id_ = "stub-moments";
};

// Local inference runtime driven over a pipe: the command gets the image as
// a temporary PGM path argument and prints one float per line.
class CommandExtractor : public EmbeddingExtractor {
public:
    CommandExtractor(std::string id, std::string command)
        : id_(std::move(id)), command_(std::move(command)) {}

    const std::string& id() const override { return id_; }

    std::vector<double> extract(const Grid& image) override {
        count_invocation();
        const auto tmp = std::filesystem::temp_directory_path() /
                         ("viser_embed_" + std::to_string(
                                               reinterpret_cast<uintptr_t>(this)) +
                          "_" + std::to_string(counter_++) + ".pgm");
        write_pgm(tmp, image, 255);
        const std::string cmdline = command_ + " " + tmp.string();
        std::string output;
        FILE* pipe = popen(cmdline.c_str(), "r");
        if (!pipe) {
            std::filesystem::remove(tmp);
            throw std::runtime_error("extractor command failed to start: " + command_);
        }
        char buf[256];
        while (fgets(buf, sizeof(buf), pipe)) output += buf;
        const int status = pclose(pipe);
        std::filesystem::remove(tmp);
        if (status != 0)
            throw std::runtime_error("extractor command exited with status " +
                                     std::to_string(status));
        std::istringstream in(output);
        std::vector<double> values;
        double v;
        while (in >> v) values.push_back(v);
        if (values.empty()) throw std::runtime_error("extractor command produced no values");
        return values;
    }

private:
    std::string id_;
    std::string command_;
    std::atomic<uint64_t> counter_{0};
};

struct RemoteExtractorConfig {
    std::string endpoint_url;   // http://host:port/embed
    std::string auth_token_env = "VISER_EXTRACTOR_TOKEN";
    int timeout_seconds = 30;
    int max_retries = 3;
    int backoff_ms = 200;       // doubled per retry
};

// Declared here, defined in http_extractor.hpp so that only the CLI pulls in
// the bundled HTTP client.
class RemoteExtractor;

// ---- disk cache ------------------------------------------------------------

// Layout: <root>/<extractor_id>/<sample_id>.vec plus index.jsonl. Records are
// little-endian float32: u32 length then the values.
class EmbeddingStore {
public:
    explicit EmbeddingStore(std::filesystem::path root) : root_(std::move(root)) {}

    const std::filesystem::path& root() const { return root_; }

    std::filesystem::path vector_path(const std::string& extractor_id,
                                      const std::string& sample_id) const {
        return root_ / extractor_id / (sample_id + ".vec");
    }

    bool contains(const std::string& extractor_id, const std::string& sample_id) const {
        return std::filesystem::exists(vector_path(extractor_id, sample_id));
    }

    void save(const std::string& extractor_id, const std::string& sample_id,
              const std::vector<double>& values) const {
        const auto path = vector_path(extractor_id, sample_id);
        std::filesystem::create_directories(path.parent_path());
        const auto tmp = path.string() + ".tmp";
        {
            std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
            const uint32_t len = static_cast<uint32_t>(values.size());
            out.write(reinterpret_cast<const char*>(&len), 4);
            for (double v : values) {
                const float f = static_cast<float>(v);
                out.write(reinterpret_cast<const char*>(&f), 4);
            }
            if (!out) throw std::runtime_error("embedding write failed: " + path.string());
        }
        std::filesystem::rename(tmp, path);
    }

    std::optional<std::vector<double>> load(const std::string& extractor_id,
                                            const std::string& sample_id) const {
        const auto path = vector_path(extractor_id, sample_id);
        std::ifstream in(path, std::ios::binary);
        if (!in) return std::nullopt;
        uint32_t len = 0;
        in.read(reinterpret_cast<char*>(&len), 4);
        std::vector<double> values(len);
        for (uint32_t i = 0; i < len; ++i) {
            float f = 0.0f;
            in.read(reinterpret_cast<char*>(&f), 4);
            values[i] = f;
        }
        if (!in) throw std::runtime_error("truncated embedding record: " + path.string());
        return values;
    }

    std::map<std::string, std::vector<double>> load_all(const std::string& extractor_id) const {
        std::map<std::string, std::vector<double>> out;
        const auto dir = root_ / extractor_id;
        if (!std::filesystem::exists(dir)) return out;
        for (const auto& entry : std::filesystem::directory_iterator(dir)) {
            if (entry.path().extension() != ".vec") continue;
            if (auto v = load(extractor_id, entry.path().stem().string()))
                out.emplace(entry.path().stem().string(), std::move(*v));
        }
        return out;
    }

    void write_index(const std::string& extractor_id) const {
        const auto dir = root_ / extractor_id;
        if (!std::filesystem::exists(dir)) return;
        const auto tmp = dir / "index.jsonl.tmp";
        {
            std::ofstream out(tmp, std::ios::trunc);
            std::vector<std::filesystem::path> files;
            for (const auto& entry : std::filesystem::directory_iterator(dir))
                if (entry.path().extension() == ".vec") files.push_back(entry.path());
            std::sort(files.begin(), files.end());
            for (const auto& f : files) {
                std::ifstream in(f, std::ios::binary);
                uint32_t len = 0;
                in.read(reinterpret_cast<char*>(&len), 4);
                nlohmann::json rec{{"sample_id", f.stem().string()}, {"length", len}};
                out << rec.dump() << '\n';
            }
        }
        std::filesystem::rename(tmp, dir / "index.jsonl");
    }

private:
    std::filesystem::path root_;
};

struct ExtractionResult {
    std::map<std::string, std::vector<double>> vectors;  // by sample_id
    std::vector<std::string> gaps;                       // per-sample failures
    int cache_hits = 0;
    int extracted = 0;
};

// Cache-through extraction: repeated calls over the same store never touch
// the extractor for samples already on disk.
template <typename ImageFn>
ExtractionResult extract_embeddings(EmbeddingExtractor& extractor,
                                    const std::vector<std::string>& sample_ids,
                                    const ImageFn& image_for, const EmbeddingStore& store) {
    ExtractionResult result;
    for (const auto& sid : sample_ids) {
        if (auto cached = store.load(extractor.id(), sid)) {
            result.vectors.emplace(sid, std::move(*cached));
            ++result.cache_hits;
            continue;
        }
        try {
            auto values = extractor.extract(image_for(sid));
            store.save(extractor.id(), sid, values);
            result.vectors.emplace(sid, std::move(values));
            ++result.extracted;
        } catch (const std::exception&) {
            result.gaps.push_back(sid);
        }
    }
    store.write_index(extractor.id());
    return result;
}

// ---- probes ------------------------------------------------------------------

enum class ProbeKind { logreg, svm_linear, svm_rbf };

inline const char* to_string(ProbeKind k) {
    switch (k) {
        case ProbeKind::logreg: return "logreg";
        case ProbeKind::svm_linear: return "svm_linear";
        case ProbeKind::svm_rbf: return "svm_rbf";
    }
    return "?";
}

inline std::optional<ProbeKind> parse_probe_kind(const std::string& name) {
    if (name == "logreg") return ProbeKind::logreg;
    if (name == "svm_linear") return ProbeKind::svm_linear;
    if (name == "svm_rbf") return ProbeKind::svm_rbf;
    return std::nullopt;
}

struct ProbeHyperparams {
    double C = 1.0;
    double gamma = 0.0;  // <= 0: 1 / (dims * mean feature variance)
    int max_iter = 5000;
    double tol = 1e-6;
    uint64_t seed = 0;
};

// Fitted probe. Features are standardized with train statistics before any
// decision function; higher decision value = more attack-like.
struct ProbeModel {
    ProbeKind kind = ProbeKind::logreg;
    std::vector<double> feature_mean;
    std::vector<double> feature_scale;
    std::vector<double> weights;  // logreg / svm_linear, standardized space
    double bias = 0.0;
    std::vector<std::vector<double>> support_vectors;  // svm_rbf, standardized
    std::vector<double> support_coeffs;                // alpha_i * y_i
    double gamma = 0.0;
    bool converged = true;

    std::vector<double> standardize(const std::vector<double>& raw) const {
        if (raw.size() != feature_mean.size())
            throw std::invalid_argument("probe: vector length mismatch");
        std::vector<double> z(raw.size());
        for (size_t i = 0; i < raw.size(); ++i)
            z[i] = (raw[i] - feature_mean[i]) / feature_scale[i];
        return z;
    }

    double decision(const std::vector<double>& raw) const {
        const auto z = standardize(raw);
        if (kind == ProbeKind::svm_rbf) {
            double acc = bias;
            for (size_t s = 0; s < support_vectors.size(); ++s) {
                double d2 = 0.0;
                for (size_t i = 0; i < z.size(); ++i) {
                    const double diff = z[i] - support_vectors[s][i];
                    d2 += diff * diff;
                }
                acc += support_coeffs[s] * std::exp(-gamma * d2);
            }
            return acc;
        }
        double acc = bias;
        for (size_t i = 0; i < z.size(); ++i) acc += weights[i] * z[i];
        return acc;
    }
};

namespace probe_detail {

struct Standardized {
    std::vector<std::vector<double>> x;  // standardized train matrix
    std::vector<double> mean, scale;
};

inline Standardized standardize_train(const std::vector<std::vector<double>>& raw) {
    const size_t n = raw.size(), d = raw.front().size();
    Standardized out;
    out.mean.assign(d, 0.0);
    out.scale.assign(d, 0.0);
    for (const auto& row : raw) {
        if (row.size() != d) throw std::invalid_argument("fit_probe: ragged vectors");
        for (size_t i = 0; i < d; ++i) out.mean[i] += row[i];
    }
    for (double& m : out.mean) m /= static_cast<double>(n);
    for (const auto& row : raw)
        for (size_t i = 0; i < d; ++i) {
            const double diff = row[i] - out.mean[i];
            out.scale[i] += diff * diff;
        }
    for (double& s : out.scale) {
        s = std::sqrt(s / static_cast<double>(n));
        if (s < 1e-12) s = 1.0;  // zero-variance guard
    }
    out.x.assign(n, std::vector<double>(d));
    for (size_t r = 0; r < n; ++r)
        for (size_t i = 0; i < d; ++i) out.x[r][i] = (raw[r][i] - out.mean[i]) / out.scale[i];
    return out;
}

// L2-regularized logistic regression: 0.5 w.w + C * sum log(1 + exp(-y f)).
// Full-batch gradient descent with step halving; the problem is tiny and
// strictly convex, so this is dependable and deterministic.
inline void fit_logreg(const std::vector<std::vector<double>>& x, const std::vector<int>& y,
                       const ProbeHyperparams& hp, std::vector<double>& w, double& b,
                       bool& converged) {
    const size_t n = x.size(), d = x.front().size();
    w.assign(d, 0.0);
    b = 0.0;
    auto objective = [&](const std::vector<double>& wv, double bv) {
        double obj = 0.0;
        for (size_t i = 0; i < d; ++i) obj += 0.5 * wv[i] * wv[i];
        for (size_t r = 0; r < n; ++r) {
            double f = bv;
            for (size_t i = 0; i < d; ++i) f += wv[i] * x[r][i];
            const double margin = -y[r] * f;
            obj += hp.C * (margin > 30 ? margin : std::log1p(std::exp(margin)));
        }
        return obj;
    };
    double step = 0.5;
    double prev = objective(w, b);
    converged = false;
    for (int iter = 0; iter < hp.max_iter; ++iter) {
        std::vector<double> gw(w);
        double gb = 0.0;
        for (size_t r = 0; r < n; ++r) {
            double f = b;
            for (size_t i = 0; i < d; ++i) f += w[i] * x[r][i];
            const double s = 1.0 / (1.0 + std::exp(y[r] * f));
            const double coef = -hp.C * y[r] * s;
            for (size_t i = 0; i < d; ++i) gw[i] += coef * x[r][i];
            gb += coef;
        }
        double gnorm = gb * gb;
        for (double g : gw) gnorm += g * g;
        if (std::sqrt(gnorm) < hp.tol) {
            converged = true;
            break;
        }
        while (step > 1e-12) {
            std::vector<double> wn(d);
            for (size_t i = 0; i < d; ++i) wn[i] = w[i] - step * gw[i];
            const double bn = b - step * gb;
            const double next = objective(wn, bn);
            if (next < prev) {
                w = std::move(wn);
                b = bn;
                prev = next;
                step *= 1.2;
                break;
            }
            step *= 0.5;
        }
    }
}

// Sequential minimal optimization over the dual, deterministic partner
// selection by worst KKT violation.
inline void fit_svm(const std::vector<std::vector<double>>& x, const std::vector<int>& y,
                    bool rbf, double gamma, const ProbeHyperparams& hp,
                    std::vector<double>& alpha, double& b, bool& converged) {
    const size_t n = x.size();
    auto kernel = [&](size_t i, size_t j) {
        if (rbf) {
            double d2 = 0.0;
            for (size_t k = 0; k < x[i].size(); ++k) {
                const double diff = x[i][k] - x[j][k];
                d2 += diff * diff;
            }
            return std::exp(-gamma * d2);
        }
        double dot = 0.0;
        for (size_t k = 0; k < x[i].size(); ++k) dot += x[i][k] * x[j][k];
        return dot;
    };
    std::vector<std::vector<double>> K(n, std::vector<double>(n));
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j <= i; ++j) K[i][j] = K[j][i] = kernel(i, j);

    alpha.assign(n, 0.0);
    b = 0.0;
    auto decision = [&](size_t i) {
        double f = b;
        for (size_t j = 0; j < n; ++j)
            if (alpha[j] > 0.0) f += alpha[j] * y[j] * K[i][j];
        return f;
    };

    converged = false;
    const double C = hp.C;
    int passes_without_change = 0;
    for (int iter = 0; iter < hp.max_iter && passes_without_change < 2; ++iter) {
        int changed = 0;
        for (size_t i = 0; i < n; ++i) {
            const double Ei = decision(i) - y[i];
            const bool violates = (y[i] * Ei < -1e-5 && alpha[i] < C) ||
                                  (y[i] * Ei > 1e-5 && alpha[i] > 0.0);
            if (!violates) continue;
            size_t j = n;
            double best_gap = -1.0;
            for (size_t cand = 0; cand < n; ++cand) {
                if (cand == i) continue;
                const double gap = std::abs(Ei - (decision(cand) - y[cand]));
                if (gap > best_gap) {
                    best_gap = gap;
                    j = cand;
                }
            }
            if (j == n) continue;
            const double Ej = decision(j) - y[j];
            const double ai_old = alpha[i], aj_old = alpha[j];
            double lo, hi;
            if (y[i] != y[j]) {
                lo = std::max(0.0, aj_old - ai_old);
                hi = std::min(C, C + aj_old - ai_old);
            } else {
                lo = std::max(0.0, ai_old + aj_old - C);
                hi = std::min(C, ai_old + aj_old);
            }
            if (lo >= hi) continue;
            const double eta = 2.0 * K[i][j] - K[i][i] - K[j][j];
            if (eta >= 0.0) continue;
            double aj = aj_old - y[j] * (Ei - Ej) / eta;
            aj = std::clamp(aj, lo, hi);
            if (std::abs(aj - aj_old) < 1e-7) continue;
            const double ai = ai_old + y[i] * y[j] * (aj_old - aj);
            alpha[i] = ai;
            alpha[j] = aj;
            const double b1 = b - Ei - y[i] * (ai - ai_old) * K[i][i] -
                              y[j] * (aj - aj_old) * K[i][j];
            const double b2 = b - Ej - y[i] * (ai - ai_old) * K[i][j] -
                              y[j] * (aj - aj_old) * K[j][j];
            if (ai > 0.0 && ai < C)
                b = b1;
            else if (aj > 0.0 && aj < C)
                b = b2;
            else
                b = 0.5 * (b1 + b2);
            ++changed;
        }
        if (changed == 0)
            ++passes_without_change;
        else
            passes_without_change = 0;
        if (iter + 1 >= hp.max_iter) break;
    }
    converged = passes_without_change >= 2;
}

}  // namespace probe_detail

// Labels: attack = +1, bonafide = -1.
inline ProbeModel fit_probe(const std::vector<std::vector<double>>& vectors,
                            const std::vector<Label>& labels, ProbeKind kind,
                            const ProbeHyperparams& hp = {}) {
    if (vectors.empty() || vectors.size() != labels.size())
        throw std::invalid_argument("fit_probe: vectors/labels mismatch");
    bool bona = false, attack = false;
    for (Label l : labels) (l == Label::bonafide ? bona : attack) = true;
    if (!bona || !attack) throw std::invalid_argument("fit_probe: both classes required");

    auto std_data = probe_detail::standardize_train(vectors);
    std::vector<int> y(labels.size());
    for (size_t i = 0; i < labels.size(); ++i) y[i] = labels[i] == Label::attack ? 1 : -1;

    ProbeModel model;
    model.kind = kind;
    model.feature_mean = std_data.mean;
    model.feature_scale = std_data.scale;

    const size_t d = std_data.mean.size();
    double gamma = hp.gamma;
    if (gamma <= 0.0) {
        double var = 0.0;
        for (const auto& row : std_data.x)
            for (double v : row) var += v * v;  // standardized features are zero-mean
        var /= static_cast<double>(std_data.x.size() * d);
        gamma = 1.0 / (static_cast<double>(d) * std::max(var, 1e-12));
    }
    model.gamma = gamma;

    if (kind == ProbeKind::logreg) {
        probe_detail::fit_logreg(std_data.x, y, hp, model.weights, model.bias, model.converged);
        return model;
    }
    std::vector<double> alpha;
    probe_detail::fit_svm(std_data.x, y, kind == ProbeKind::svm_rbf, gamma, hp, alpha,
                          model.bias, model.converged);
    if (kind == ProbeKind::svm_linear) {
        model.weights.assign(d, 0.0);
        for (size_t r = 0; r < std_data.x.size(); ++r)
            if (alpha[r] > 0.0)
                for (size_t i = 0; i < d; ++i)
                    model.weights[i] += alpha[r] * y[r] * std_data.x[r][i];
    } else {
        for (size_t r = 0; r < std_data.x.size(); ++r) {
            if (alpha[r] > 1e-12) {
                model.support_vectors.push_back(std_data.x[r]);
                model.support_coeffs.push_back(alpha[r] * y[r]);
            }
        }
    }
    return model;
}

// Attack score in (0,1); the logistic squashing is monotone, so rank metrics
// are unaffected by it.
inline std::vector<ScoreRecord> probe_scores(
    const ProbeModel& model, const std::vector<std::pair<std::string, std::vector<double>>>& vectors,
    const std::vector<Label>& labels) {
    if (vectors.size() != labels.size())
        throw std::invalid_argument("probe_scores: vectors/labels mismatch");
    std::vector<ScoreRecord> out;
    out.reserve(vectors.size());
    for (size_t i = 0; i < vectors.size(); ++i) {
        const double f = model.decision(vectors[i].second);
        out.push_back({vectors[i].first, labels[i], 1.0 / (1.0 + std::exp(-f))});
    }
    return out;
}

}  // namespace viser
