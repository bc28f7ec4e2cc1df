#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "viser/nn.hpp"

namespace viser {

struct BackboneOutput {
    std::vector<double> logits;  // [bonafide, attack]
    Tensor features;             // final stage, pre-pooling; CAM input
};

// Convolutional body plus global-average-pool linear head over two classes.
// The head weights double as the CAM channel weights.
class Backbone {
public:
    virtual ~Backbone() = default;
    virtual const std::string& descriptor() const = 0;
    virtual BackboneOutput forward(const Grid& image, bool train) = 0;
    // dlogits is dLoss/dlogits; dfeatures (may be empty) is the extra
    // gradient flowing into the feature maps from the CAM path.
    virtual void backward(const std::vector<double>& dlogits, const Tensor& dfeatures) = 0;
    virtual std::vector<double> classifier_weights(int class_index) const = 0;
    virtual void add_classifier_grad(int class_index, const std::vector<double>& grad) = 0;
    virtual std::vector<ParamView> parameters() = 0;
    virtual void zero_grad() = 0;
    virtual void init(uint64_t seed) = 0;
    virtual std::vector<double> state() const = 0;
    virtual void load_state(const std::vector<double>& state) = 0;
    virtual int feature_channels() const = 0;
};

class ConvNetBackbone : public Backbone {
public:
    ConvNetBackbone(std::string descriptor, std::unique_ptr<Sequential> body, int feat_channels)
        : descriptor_(std::move(descriptor)), body_(std::move(body)),
          feat_channels_(feat_channels),
          fc_weight_(static_cast<size_t>(2) * feat_channels, 0.0),
          fc_wgrad_(fc_weight_.size(), 0.0), fc_bias_(2, 0.0), fc_bgrad_(2, 0.0) {}

    const std::string& descriptor() const override { return descriptor_; }
    int feature_channels() const override { return feat_channels_; }

    BackboneOutput forward(const Grid& image, bool train) override {
        features_ = body_->forward(Tensor::from_grid(image), train);
        if (features_.channels != feat_channels_)
            throw std::logic_error("backbone: feature channel mismatch");
        const int plane = features_.plane();
        gap_.assign(feat_channels_, 0.0);
        for (int c = 0; c < feat_channels_; ++c) {
            double acc = 0.0;
            for (int i = 0; i < plane; ++i) acc += features_.v[c * plane + i];
            gap_[c] = acc / plane;
        }
        BackboneOutput out;
        out.logits.assign(2, 0.0);
        for (int k = 0; k < 2; ++k) {
            double acc = fc_bias_[k];
            for (int c = 0; c < feat_channels_; ++c)
                acc += fc_weight_[k * feat_channels_ + c] * gap_[c];
            out.logits[k] = acc;
        }
        out.features = features_;
        return out;
    }

    void backward(const std::vector<double>& dlogits, const Tensor& dfeatures) override {
        const int plane = features_.plane();
        Tensor dfeat = dfeatures.size() == features_.size()
                           ? dfeatures
                           : Tensor(features_.channels, features_.height, features_.width);
        std::vector<double> dgap(feat_channels_, 0.0);
        for (int k = 0; k < 2; ++k) {
            fc_bgrad_[k] += dlogits[k];
            for (int c = 0; c < feat_channels_; ++c) {
                fc_wgrad_[k * feat_channels_ + c] += dlogits[k] * gap_[c];
                dgap[c] += dlogits[k] * fc_weight_[k * feat_channels_ + c];
            }
        }
        for (int c = 0; c < feat_channels_; ++c) {
            const double g = dgap[c] / plane;
            for (int i = 0; i < plane; ++i) dfeat.v[c * plane + i] += g;
        }
        body_->backward(dfeat);
    }

    std::vector<double> classifier_weights(int class_index) const override {
        return {fc_weight_.begin() + class_index * feat_channels_,
                fc_weight_.begin() + (class_index + 1) * feat_channels_};
    }

    void add_classifier_grad(int class_index, const std::vector<double>& grad) override {
        for (int c = 0; c < feat_channels_; ++c)
            fc_wgrad_[class_index * feat_channels_ + c] += grad[c];
    }

    std::vector<ParamView> parameters() override {
        std::vector<ParamView> params;
        body_->collect_params(params);
        params.push_back({&fc_weight_, &fc_wgrad_});
        params.push_back({&fc_bias_, &fc_bgrad_});
        return params;
    }

    void zero_grad() override {
        for (auto& p : parameters()) std::fill(p.grads->begin(), p.grads->end(), 0.0);
    }

    void init(uint64_t seed) override {
        Rng rng(seed);
        body_->init(rng);
        // positive head weights keep the rectified evidence map alive at the
        // start of training; cross-entropy only sees logit differences
        const double stddev = std::sqrt(1.0 / feat_channels_);
        for (double& w : fc_weight_) w = std::abs(rng.normal(0.0, stddev));
        std::fill(fc_bias_.begin(), fc_bias_.end(), 0.0);
    }

    std::vector<double> state() const override {
        std::vector<double> flat;
        auto* self = const_cast<ConvNetBackbone*>(this);
        for (auto& p : self->parameters())
            flat.insert(flat.end(), p.values->begin(), p.values->end());
        std::vector<std::vector<double>*> buffers;
        self->body_->collect_buffers(buffers);
        for (auto* b : buffers) flat.insert(flat.end(), b->begin(), b->end());
        return flat;
    }

    void load_state(const std::vector<double>& state) override {
        size_t offset = 0;
        auto take = [&](std::vector<double>& dst) {
            if (offset + dst.size() > state.size())
                throw std::runtime_error("backbone state blob too short");
            std::copy(state.begin() + offset, state.begin() + offset + dst.size(), dst.begin());
            offset += dst.size();
        };
        for (auto& p : parameters()) take(*p.values);
        std::vector<std::vector<double>*> buffers;
        body_->collect_buffers(buffers);
        for (auto* b : buffers) take(*b);
        if (offset != state.size()) throw std::runtime_error("backbone state blob size mismatch");
    }

private:
    std::string descriptor_;
    std::unique_ptr<Sequential> body_;
    int feat_channels_;
    std::vector<double> fc_weight_, fc_wgrad_, fc_bias_, fc_bgrad_;
    Tensor features_;
    std::vector<double> gap_;
};

// "tiny" / "tiny-c<N>": one 3x3 conv with N channels, ReLU, 2x2 average
// pool. Small enough for finite-difference checks and CPU test fixtures.
inline std::unique_ptr<Backbone> make_tiny_backbone(int channels) {
    auto body = std::make_unique<Sequential>();
    body->add(std::make_unique<Conv2d>(1, channels, 3, 1, 1));
    body->add(std::make_unique<ReLU>());
    body->add(std::make_unique<AvgPool2d>(2, 2));
    const std::string descriptor = channels == 2 ? "tiny" : "tiny-c" + std::to_string(channels);
    return std::make_unique<ConvNetBackbone>(descriptor, std::move(body), channels);
}

// DenseNet-121: 7x7/2 stem, 3x3/2 max pool, dense blocks of 6/12/24/16
// bottleneck units at growth 32 with halving transitions, final norm+relu.
// Feature maps ahead of the pooled classifier have 1024 channels.
inline std::unique_ptr<Backbone> make_densenet121_backbone() {
    const int growth = 32;
    const std::vector<int> block_units = {6, 12, 24, 16};
    auto body = std::make_unique<Sequential>();
    body->add(std::make_unique<Conv2d>(1, 64, 7, 2, 3, false));
    body->add(std::make_unique<ChannelNorm>(64));
    body->add(std::make_unique<ReLU>());
    body->add(std::make_unique<MaxPool2d>(3, 2, 1));
    int ch = 64;
    for (size_t b = 0; b < block_units.size(); ++b) {
        body->add(std::make_unique<DenseBlock>(ch, block_units[b], growth));
        ch += block_units[b] * growth;
        if (b + 1 < block_units.size()) {
            body->add(std::make_unique<ChannelNorm>(ch));
            body->add(std::make_unique<ReLU>());
            body->add(std::make_unique<Conv2d>(ch, ch / 2, 1, 1, 0, false));
            body->add(std::make_unique<AvgPool2d>(2, 2));
            ch /= 2;
        }
    }
    body->add(std::make_unique<ChannelNorm>(ch));
    body->add(std::make_unique<ReLU>());
    return std::make_unique<ConvNetBackbone>("densenet121", std::move(body), ch);
}

inline std::unique_ptr<Backbone> make_backbone(const std::string& descriptor) {
    if (descriptor == "tiny") return make_tiny_backbone(2);
    if (descriptor.rfind("tiny-c", 0) == 0)
        return make_tiny_backbone(std::stoi(descriptor.substr(6)));
    if (descriptor == "densenet121") return make_densenet121_backbone();
    throw std::invalid_argument("unknown backbone descriptor '" + descriptor + "'");
}

// ---- checkpoints -----------------------------------------------------------

struct Checkpoint {
    std::string descriptor;
    std::string config_fingerprint;
    uint64_t seed = 0;
    std::vector<double> state;
};

inline void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    std::filesystem::create_directories(path.parent_path());
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
        const char magic[8] = {'V', 'S', 'R', 'C', 'K', 'P', 'T', '1'};
        out.write(magic, 8);
        auto write_str = [&](const std::string& s) {
            const uint32_t len = static_cast<uint32_t>(s.size());
            out.write(reinterpret_cast<const char*>(&len), 4);
            out.write(s.data(), len);
        };
        write_str(ckpt.descriptor);
        write_str(ckpt.config_fingerprint);
        out.write(reinterpret_cast<const char*>(&ckpt.seed), 8);
        const uint64_t n = ckpt.state.size();
        out.write(reinterpret_cast<const char*>(&n), 8);
        out.write(reinterpret_cast<const char*>(ckpt.state.data()),
                  static_cast<std::streamsize>(n * sizeof(double)));
        if (!out) throw std::runtime_error("checkpoint write failed " + path.string());
    }
    std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
    char magic[8];
    in.read(magic, 8);
    if (std::memcmp(magic, "VSRCKPT1", 8) != 0)
        throw std::runtime_error("bad checkpoint magic in " + path.string());
    auto read_str = [&]() {
        uint32_t len = 0;
        in.read(reinterpret_cast<char*>(&len), 4);
        std::string s(len, '\0');
        in.read(s.data(), len);
        return s;
    };
    Checkpoint ckpt;
    ckpt.descriptor = read_str();
    ckpt.config_fingerprint = read_str();
    in.read(reinterpret_cast<char*>(&ckpt.seed), 8);
    uint64_t n = 0;
    in.read(reinterpret_cast<char*>(&n), 8);
    ckpt.state.resize(n);
    in.read(reinterpret_cast<char*>(ckpt.state.data()),
            static_cast<std::streamsize>(n * sizeof(double)));
    if (!in) throw std::runtime_error("truncated checkpoint " + path.string());
    return ckpt;
}

}  // namespace viser
