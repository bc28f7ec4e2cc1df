#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "viser/backbone.hpp"
#include "viser/image_io.hpp"
#include "viser/metrics.hpp"
#include "viser/saliency.hpp"

namespace viser {

// ---- CAM -------------------------------------------------------------------

namespace cam_detail {

inline Grid bilinear_upsample(const Grid& in, int rows, int cols) {
    if (in.rows() == rows && in.cols() == cols) return in;
    Grid out(rows, cols);
    const double sy = rows > 1 ? static_cast<double>(in.rows() - 1) / (rows - 1) : 0.0;
    const double sx = cols > 1 ? static_cast<double>(in.cols() - 1) / (cols - 1) : 0.0;
    for (int r = 0; r < rows; ++r) {
        const double src_y = r * sy;
        const int y0 = static_cast<int>(src_y);
        const int y1 = std::min(y0 + 1, in.rows() - 1);
        const double fy = src_y - y0;
        for (int c = 0; c < cols; ++c) {
            const double src_x = c * sx;
            const int x0 = static_cast<int>(src_x);
            const int x1 = std::min(x0 + 1, in.cols() - 1);
            const double fx = src_x - x0;
            out.at(r, c) = (1 - fy) * (1 - fx) * in.at(y0, x0) +
                           (1 - fy) * fx * in.at(y0, x1) +
                           fy * (1 - fx) * in.at(y1, x0) + fy * fx * in.at(y1, x1);
        }
    }
    return out;
}

inline Grid bilinear_upsample_backward(const Grid& gout, int in_rows, int in_cols) {
    if (gout.rows() == in_rows && gout.cols() == in_cols) return gout;
    Grid gin(in_rows, in_cols);
    const double sy = gout.rows() > 1 ? static_cast<double>(in_rows - 1) / (gout.rows() - 1) : 0.0;
    const double sx = gout.cols() > 1 ? static_cast<double>(in_cols - 1) / (gout.cols() - 1) : 0.0;
    for (int r = 0; r < gout.rows(); ++r) {
        const double src_y = r * sy;
        const int y0 = static_cast<int>(src_y);
        const int y1 = std::min(y0 + 1, in_rows - 1);
        const double fy = src_y - y0;
        for (int c = 0; c < gout.cols(); ++c) {
            const double src_x = c * sx;
            const int x0 = static_cast<int>(src_x);
            const int x1 = std::min(x0 + 1, in_cols - 1);
            const double fx = src_x - x0;
            const double g = gout.at(r, c);
            gin.at(y0, x0) += (1 - fy) * (1 - fx) * g;
            gin.at(y0, x1) += (1 - fy) * fx * g;
            gin.at(y1, x0) += fy * (1 - fx) * g;
            gin.at(y1, x1) += fy * fx * g;
        }
    }
    return gin;
}

}  // namespace cam_detail

// CAM with the intermediates the training backward pass needs.
struct CamResult {
    SaliencyMap map;   // rectified, upsampled, max-normalized
    Grid raw;          // weighted channel sum before rectification (h x w)
    Grid upsampled;    // rectified + upsampled, before normalization (H x W)
    double peak = 0.0;
    size_t peak_index = 0;
    bool zero_flag = false;
};

inline CamResult compute_cam_detailed(const Tensor& features,
                                      const std::vector<double>& classifier_weights,
                                      int rows, int cols) {
    if (static_cast<int>(classifier_weights.size()) != features.channels)
        throw std::invalid_argument("compute_cam: weight count does not match channels");
    CamResult result;
    result.raw = Grid(features.height, features.width);
    const int plane = features.plane();
    for (int c = 0; c < features.channels; ++c)
        for (int i = 0; i < plane; ++i)
            result.raw[i] += classifier_weights[c] * features.v[c * plane + i];
    Grid rect = result.raw;
    for (double& v : rect.data()) v = std::max(v, 0.0);
    result.upsampled = cam_detail::bilinear_upsample(rect, rows, cols);
    result.peak = 0.0;
    for (size_t i = 0; i < result.upsampled.size(); ++i) {
        if (result.upsampled[i] > result.peak) {
            result.peak = result.upsampled[i];
            result.peak_index = i;
        }
    }
    result.map.values = result.upsampled;
    if (result.peak <= 0.0) {
        result.zero_flag = true;
        result.map.empty_flag = true;
    } else {
        for (double& v : result.map.values.data()) v /= result.peak;
    }
    return result;
}

// Weighted channel sum, rectified at zero, bilinearly upsampled and
// max-normalized; all-zero evidence yields a flagged zero map.
inline SaliencyMap compute_cam(const Tensor& features,
                               const std::vector<double>& classifier_weights, int rows,
                               int cols) {
    return compute_cam_detailed(features, classifier_weights, rows, cols).map;
}

inline double saliency_mse(const SaliencyMap& cam, const SaliencyMap& target) {
    if (!cam.values.same_shape(target.values))
        throw std::invalid_argument("saliency_mse: shape mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < cam.values.size(); ++i) {
        const double d = cam.values[i] - target.values[i];
        acc += d * d;
    }
    return acc / static_cast<double>(cam.values.size());
}

// ---- losses ----------------------------------------------------------------

inline int class_index(Label label) { return label == Label::attack ? 1 : 0; }

inline double cross_entropy(const std::vector<double>& logits, Label label) {
    const double m = std::max(logits[0], logits[1]);
    const double lse = m + std::log(std::exp(logits[0] - m) + std::exp(logits[1] - m));
    return lse - logits[class_index(label)];
}

inline std::vector<double> softmax2(const std::vector<double>& logits) {
    const double m = std::max(logits[0], logits[1]);
    const double e0 = std::exp(logits[0] - m);
    const double e1 = std::exp(logits[1] - m);
    return {e0 / (e0 + e1), e1 / (e0 + e1)};
}

inline double attack_probability(const std::vector<double>& logits) {
    return softmax2(logits)[1];
}

struct LossBreakdown {
    double total = 0.0;
    double ce = 0.0;
    double saliency_mse = 0.0;
    int n_samples_with_saliency = 0;
};

// Composite objective: (1-alpha) * cross-entropy + alpha * CAM alignment.
// Without a usable target (absent, empty, or zero CAM) the sample
// contributes plain cross-entropy at full weight.
inline LossBreakdown combined_loss(const std::vector<double>& logits, Label label,
                                   const std::optional<SaliencyMap>& cam,
                                   const std::optional<SaliencyMap>& target, double alpha) {
    LossBreakdown out;
    out.ce = cross_entropy(logits, label);
    const bool usable = alpha > 0.0 && cam.has_value() && target.has_value() &&
                        !cam->empty_flag && !target->empty_flag;
    if (usable) {
        out.saliency_mse = saliency_mse(*cam, *target);
        out.total = (1.0 - alpha) * out.ce + alpha * out.saliency_mse;
        out.n_samples_with_saliency = 1;
    } else {
        out.total = out.ce;
    }
    return out;
}

// ---- per-sample gradient step ----------------------------------------------

struct SampleLoss {
    LossBreakdown breakdown;
    bool zero_cam_skip = false;
};

// Forward, composite loss, and full backward through both the classifier
// path and the CAM path. grad_scale folds in the 1/batch factor.
inline SampleLoss loss_and_gradients(Backbone& backbone, const Grid& image, Label label,
                                     const SaliencyMap* target, double alpha,
                                     double grad_scale) {
    SampleLoss result;
    const BackboneOutput out = backbone.forward(image, true);
    const int tc = class_index(label);
    auto probs = softmax2(out.logits);
    std::vector<double> dlogits = {probs[0], probs[1]};
    dlogits[tc] -= 1.0;

    result.breakdown.ce = cross_entropy(out.logits, label);

    const bool want_saliency =
        alpha > 0.0 && target != nullptr && !target->empty_flag;
    if (!want_saliency) {
        result.breakdown.total = result.breakdown.ce;
        for (double& d : dlogits) d *= grad_scale;
        backbone.backward(dlogits, Tensor{});
        return result;
    }

    const CamResult cam = compute_cam_detailed(out.features, backbone.classifier_weights(tc),
                                               target->values.rows(), target->values.cols());
    if (cam.zero_flag) {
        result.zero_cam_skip = true;
        result.breakdown.total = result.breakdown.ce;
        for (double& d : dlogits) d *= grad_scale;
        backbone.backward(dlogits, Tensor{});
        return result;
    }

    result.breakdown.saliency_mse = saliency_mse(cam.map, *target);
    result.breakdown.total =
        (1.0 - alpha) * result.breakdown.ce + alpha * result.breakdown.saliency_mse;
    result.breakdown.n_samples_with_saliency = 1;

    const size_t n_px = cam.map.values.size();
    Grid dcam(cam.map.values.rows(), cam.map.values.cols());
    double weighted_sum = 0.0;  // sum of dcam * upsampled, for the peak term
    for (size_t i = 0; i < n_px; ++i) {
        dcam[i] = alpha * 2.0 * (cam.map.values[i] - target->values[i]) /
                  static_cast<double>(n_px);
        weighted_sum += dcam[i] * cam.upsampled[i];
    }
    Grid dup(dcam.rows(), dcam.cols());
    for (size_t i = 0; i < n_px; ++i) dup[i] = dcam[i] / cam.peak;
    dup[cam.peak_index] -= weighted_sum / (cam.peak * cam.peak);

    Grid drect =
        cam_detail::bilinear_upsample_backward(dup, cam.raw.rows(), cam.raw.cols());
    for (size_t i = 0; i < drect.size(); ++i)
        if (cam.raw[i] <= 0.0) drect[i] = 0.0;

    const auto weights = backbone.classifier_weights(tc);
    const int plane = out.features.plane();
    Tensor dfeatures(out.features.channels, out.features.height, out.features.width);
    std::vector<double> dcls(out.features.channels, 0.0);
    for (int c = 0; c < out.features.channels; ++c) {
        double acc = 0.0;
        for (int i = 0; i < plane; ++i) {
            dfeatures.v[c * plane + i] = grad_scale * weights[c] * drect[i];
            acc += out.features.v[c * plane + i] * drect[i];
        }
        dcls[c] = grad_scale * acc;
    }
    for (double& d : dlogits) d *= (1.0 - alpha) * grad_scale;
    backbone.add_classifier_grad(tc, dcls);
    backbone.backward(dlogits, dfeatures);
    return result;
}

// ---- trainer -----------------------------------------------------------------

struct TrainingConfig {
    double alpha = 0.5;
    int epochs = 50;
    int batch_size = 20;
    double learning_rate = 0.005;
    std::string lr_schedule = "constant";
    uint64_t seed = 0;
    std::optional<SaliencySource> saliency_source;  // nullopt = plain cross-entropy
    std::string backbone = "tiny";
    int image_height = 0;
    int image_width = 0;
    bool log_val_auroc = true;
};

struct EpochLog {
    int epoch = 0;
    double ce = 0.0;
    double saliency_mse = 0.0;
    double total = 0.0;
    double val_auroc = std::numeric_limits<double>::quiet_NaN();
};

struct TrainedModel {
    std::unique_ptr<Backbone> backbone;
    std::vector<EpochLog> log;
    int zero_cam_skips = 0;
    int missing_target_samples = 0;
};

using ImageProvider = std::function<Grid(const IrisSample&)>;

inline Grid resize_nearest(const Grid& in, int rows, int cols) {
    if (in.rows() == rows && in.cols() == cols) return in;
    Grid out(rows, cols);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
            const int sr = std::min(in.rows() - 1, r * in.rows() / rows);
            const int sc = std::min(in.cols() - 1, c * in.cols() / cols);
            out.at(r, c) = in.at(sr, sc);
        }
    return out;
}

// Disk-backed provider; images are brought to the configured size at load.
inline ImageProvider disk_image_provider(int rows, int cols,
                                         const std::filesystem::path& base = {}) {
    return [rows, cols, base](const IrisSample& sample) {
        auto path = std::filesystem::path(sample.image_path);
        if (!base.empty() && path.is_relative()) path = base / path;
        return resize_nearest(read_pgm(path), rows, cols);
    };
}

inline TrainedModel train_model(const DatasetManifest& manifest,
                                const std::vector<std::string>& train_ids,
                                const std::vector<std::string>& val_ids,
                                const std::map<std::string, SaliencyMap>* saliency,
                                const TrainingConfig& config, const ImageProvider& images) {
    std::map<std::string, const IrisSample*> by_id;
    for (const auto& s : manifest.samples) by_id[s.sample_id] = &s;
    std::vector<const IrisSample*> train;
    bool has_bona = false, has_attack = false;
    for (const auto& id : train_ids) {
        auto it = by_id.find(id);
        if (it == by_id.end())
            throw std::invalid_argument("train_model: unknown sample_id '" + id + "'");
        train.push_back(it->second);
        (it->second->label == Label::bonafide ? has_bona : has_attack) = true;
    }
    if (!has_bona || !has_attack)
        throw std::invalid_argument("train_model: train partition needs both classes");

    // alpha == 0 and saliency_source == none are the same configuration by
    // definition; both run the identical cross-entropy-only path.
    const bool use_saliency =
        config.alpha > 0.0 && config.saliency_source.has_value() && saliency != nullptr;

    TrainedModel result;
    result.backbone = make_backbone(config.backbone);
    result.backbone->init(config.seed);
    Rng order_rng(config.seed ^ 0x5deece66dULL);

    std::vector<size_t> order(train.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        order_rng.shuffle(order);
        double ce_sum = 0.0, mse_sum = 0.0, total_sum = 0.0;
        int mse_count = 0;
        for (size_t start = 0; start < order.size(); start += config.batch_size) {
            const size_t end = std::min(order.size(), start + config.batch_size);
            const double grad_scale = 1.0 / static_cast<double>(end - start);
            result.backbone->zero_grad();
            for (size_t i = start; i < end; ++i) {
                const IrisSample& sample = *train[order[i]];
                const Grid image = images(sample);
                const SaliencyMap* target = nullptr;
                if (use_saliency) {
                    auto it = saliency->find(sample.sample_id);
                    if (it != saliency->end() && !it->second.empty_flag) {
                        if (it->second.values.rows() != config.image_height ||
                            it->second.values.cols() != config.image_width)
                            throw std::invalid_argument(
                                "train_model: saliency store shape mismatch for '" +
                                sample.sample_id + "'");
                        target = &it->second;
                    } else if (epoch == 0) {
                        ++result.missing_target_samples;
                    }
                }
                const SampleLoss loss = loss_and_gradients(
                    *result.backbone, image, sample.label, target, config.alpha, grad_scale);
                if (loss.zero_cam_skip) ++result.zero_cam_skips;
                ce_sum += loss.breakdown.ce;
                total_sum += loss.breakdown.total;
                if (loss.breakdown.n_samples_with_saliency) {
                    mse_sum += loss.breakdown.saliency_mse;
                    ++mse_count;
                }
            }
            for (auto& p : result.backbone->parameters())
                for (size_t k = 0; k < p.values->size(); ++k)
                    (*p.values)[k] -= config.learning_rate * (*p.grads)[k];
        }
        EpochLog log;
        log.epoch = epoch;
        log.ce = ce_sum / static_cast<double>(train.size());
        log.saliency_mse = mse_count ? mse_sum / mse_count : 0.0;
        log.total = total_sum / static_cast<double>(train.size());
        if (config.log_val_auroc && !val_ids.empty()) {
            std::vector<ScoreRecord> scores;
            bool vb = false, va = false;
            for (const auto& id : val_ids) {
                auto it = by_id.find(id);
                if (it == by_id.end()) continue;
                const auto out = result.backbone->forward(images(*it->second), false);
                scores.push_back({id, it->second->label, attack_probability(out.logits)});
                (it->second->label == Label::bonafide ? vb : va) = true;
            }
            if (vb && va) log.val_auroc = auroc(scores);
        }
        result.log.push_back(log);
    }
    return result;
}

}  // namespace viser
