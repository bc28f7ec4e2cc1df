#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "viser/grid.hpp"
#include "viser/rng.hpp"

namespace viser {

// C x H x W feature tensor, row-major within each channel.
struct Tensor {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<double> v;

    Tensor() = default;
    Tensor(int c, int h, int w, double fill = 0.0)
        : channels(c), height(h), width(w),
          v(static_cast<size_t>(c) * h * w, fill) {}

    double& at(int c, int y, int x) {
        return v[(static_cast<size_t>(c) * height + y) * width + x];
    }
    double at(int c, int y, int x) const {
        return v[(static_cast<size_t>(c) * height + y) * width + x];
    }
    size_t size() const { return v.size(); }
    int plane() const { return height * width; }

    static Tensor from_grid(const Grid& g) {
        Tensor t(1, g.rows(), g.cols());
        t.v = g.data();
        return t;
    }
};

struct ParamView {
    std::vector<double>* values = nullptr;
    std::vector<double>* grads = nullptr;
};

class Layer {
public:
    virtual ~Layer() = default;
    virtual Tensor forward(const Tensor& in, bool train) = 0;
    virtual Tensor backward(const Tensor& grad_out) = 0;
    virtual void collect_params(std::vector<ParamView>& out) {}
    virtual void collect_buffers(std::vector<std::vector<double>*>& out) {}
    virtual void init(Rng& rng) {}
    virtual int out_channels(int in_channels) const = 0;
};

// ---- layers ----------------------------------------------------------------

class Conv2d : public Layer {
public:
    Conv2d(int in_ch, int out_ch, int ksize, int stride = 1, int pad = 0, bool bias = true)
        : in_ch_(in_ch), out_ch_(out_ch), k_(ksize), stride_(stride), pad_(pad),
          has_bias_(bias),
          weight_(static_cast<size_t>(out_ch) * in_ch * ksize * ksize, 0.0),
          wgrad_(weight_.size(), 0.0),
          bias_(bias ? out_ch : 0, 0.0), bgrad_(bias_.size(), 0.0) {}

    void init(Rng& rng) override {
        const double fan_in = static_cast<double>(in_ch_) * k_ * k_;
        const double stddev = std::sqrt(2.0 / fan_in);
        for (double& w : weight_) w = rng.normal(0.0, stddev);
        std::fill(bias_.begin(), bias_.end(), 0.0);
    }

    Tensor forward(const Tensor& in, bool) override {
        if (in.channels != in_ch_) throw std::invalid_argument("Conv2d: channel mismatch");
        input_ = in;
        const int oh = (in.height + 2 * pad_ - k_) / stride_ + 1;
        const int ow = (in.width + 2 * pad_ - k_) / stride_ + 1;
        Tensor out(out_ch_, oh, ow);
        for (int oc = 0; oc < out_ch_; ++oc) {
            const double b = has_bias_ ? bias_[oc] : 0.0;
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) {
                    double acc = b;
                    for (int ic = 0; ic < in_ch_; ++ic)
                        for (int ky = 0; ky < k_; ++ky) {
                            const int iy = oy * stride_ - pad_ + ky;
                            if (iy < 0 || iy >= in.height) continue;
                            for (int kx = 0; kx < k_; ++kx) {
                                const int ix = ox * stride_ - pad_ + kx;
                                if (ix < 0 || ix >= in.width) continue;
                                acc += w_at(oc, ic, ky, kx) * in.at(ic, iy, ix);
                            }
                        }
                    out.at(oc, oy, ox) = acc;
                }
        }
        return out;
    }

    Tensor backward(const Tensor& gout) override {
        Tensor gin(input_.channels, input_.height, input_.width);
        for (int oc = 0; oc < out_ch_; ++oc)
            for (int oy = 0; oy < gout.height; ++oy)
                for (int ox = 0; ox < gout.width; ++ox) {
                    const double g = gout.at(oc, oy, ox);
                    if (has_bias_) bgrad_[oc] += g;
                    for (int ic = 0; ic < in_ch_; ++ic)
                        for (int ky = 0; ky < k_; ++ky) {
                            const int iy = oy * stride_ - pad_ + ky;
                            if (iy < 0 || iy >= input_.height) continue;
                            for (int kx = 0; kx < k_; ++kx) {
                                const int ix = ox * stride_ - pad_ + kx;
                                if (ix < 0 || ix >= input_.width) continue;
                                wg_at(oc, ic, ky, kx) += g * input_.at(ic, iy, ix);
                                gin.at(ic, iy, ix) += g * w_at(oc, ic, ky, kx);
                            }
                        }
                }
        return gin;
    }

    void collect_params(std::vector<ParamView>& out) override {
        out.push_back({&weight_, &wgrad_});
        if (has_bias_) out.push_back({&bias_, &bgrad_});
    }
    int out_channels(int) const override { return out_ch_; }

private:
    double& w_at(int oc, int ic, int ky, int kx) {
        return weight_[((static_cast<size_t>(oc) * in_ch_ + ic) * k_ + ky) * k_ + kx];
    }
    double& wg_at(int oc, int ic, int ky, int kx) {
        return wgrad_[((static_cast<size_t>(oc) * in_ch_ + ic) * k_ + ky) * k_ + kx];
    }

    int in_ch_, out_ch_, k_, stride_, pad_;
    bool has_bias_;
    std::vector<double> weight_, wgrad_, bias_, bgrad_;
    Tensor input_;
};

// Per-channel normalization over the spatial extent of one sample, with
// running statistics for eval mode. The engine processes samples one at a
// time, so the normalization pool is the sample itself rather than a batch.
class ChannelNorm : public Layer {
public:
    explicit ChannelNorm(int channels, double eps = 1e-5, double momentum = 0.1)
        : ch_(channels), eps_(eps), momentum_(momentum),
          gamma_(channels, 1.0), ggrad_(channels, 0.0),
          beta_(channels, 0.0), bgrad_(channels, 0.0),
          running_mean_(channels, 0.0), running_var_(channels, 1.0) {}

    void init(Rng&) override {
        std::fill(gamma_.begin(), gamma_.end(), 1.0);
        std::fill(beta_.begin(), beta_.end(), 0.0);
        std::fill(running_mean_.begin(), running_mean_.end(), 0.0);
        std::fill(running_var_.begin(), running_var_.end(), 1.0);
    }

    Tensor forward(const Tensor& in, bool train) override {
        if (in.channels != ch_) throw std::invalid_argument("ChannelNorm: channel mismatch");
        train_ = train;
        const int n = in.plane();
        Tensor out(in.channels, in.height, in.width);
        xhat_ = Tensor(in.channels, in.height, in.width);
        inv_std_.assign(ch_, 0.0);
        for (int c = 0; c < ch_; ++c) {
            double mean, var;
            if (train) {
                mean = 0.0;
                for (int i = 0; i < n; ++i) mean += in.v[c * n + i];
                mean /= n;
                var = 0.0;
                for (int i = 0; i < n; ++i) {
                    const double d = in.v[c * n + i] - mean;
                    var += d * d;
                }
                var /= n;
                running_mean_[c] = (1.0 - momentum_) * running_mean_[c] + momentum_ * mean;
                running_var_[c] = (1.0 - momentum_) * running_var_[c] + momentum_ * var;
            } else {
                mean = running_mean_[c];
                var = running_var_[c];
            }
            const double inv = 1.0 / std::sqrt(var + eps_);
            inv_std_[c] = inv;
            for (int i = 0; i < n; ++i) {
                const double xh = (in.v[c * n + i] - mean) * inv;
                xhat_.v[c * n + i] = xh;
                out.v[c * n + i] = gamma_[c] * xh + beta_[c];
            }
        }
        return out;
    }

    Tensor backward(const Tensor& gout) override {
        const int n = gout.plane();
        Tensor gin(gout.channels, gout.height, gout.width);
        for (int c = 0; c < ch_; ++c) {
            double sum_g = 0.0, sum_gx = 0.0;
            for (int i = 0; i < n; ++i) {
                const double g = gout.v[c * n + i];
                sum_g += g;
                sum_gx += g * xhat_.v[c * n + i];
            }
            ggrad_[c] += sum_gx;
            bgrad_[c] += sum_g;
            if (train_) {
                const double scale = gamma_[c] * inv_std_[c];
                for (int i = 0; i < n; ++i) {
                    const double g = gout.v[c * n + i];
                    gin.v[c * n + i] =
                        scale * (g - sum_g / n - xhat_.v[c * n + i] * sum_gx / n);
                }
            } else {
                const double scale = gamma_[c] * inv_std_[c];
                for (int i = 0; i < n; ++i) gin.v[c * n + i] = scale * gout.v[c * n + i];
            }
        }
        return gin;
    }

    void collect_params(std::vector<ParamView>& out) override {
        out.push_back({&gamma_, &ggrad_});
        out.push_back({&beta_, &bgrad_});
    }
    void collect_buffers(std::vector<std::vector<double>*>& out) override {
        out.push_back(&running_mean_);
        out.push_back(&running_var_);
    }
    int out_channels(int in_channels) const override { return in_channels; }

private:
    int ch_;
    double eps_, momentum_;
    bool train_ = true;
    std::vector<double> gamma_, ggrad_, beta_, bgrad_;
    std::vector<double> running_mean_, running_var_;
    Tensor xhat_;
    std::vector<double> inv_std_;
};

class ReLU : public Layer {
public:
    Tensor forward(const Tensor& in, bool) override {
        mask_.assign(in.size(), 0);
        Tensor out = in;
        for (size_t i = 0; i < in.size(); ++i) {
            if (in.v[i] > 0.0)
                mask_[i] = 1;
            else
                out.v[i] = 0.0;
        }
        return out;
    }
    Tensor backward(const Tensor& gout) override {
        Tensor gin = gout;
        for (size_t i = 0; i < gin.size(); ++i)
            if (!mask_[i]) gin.v[i] = 0.0;
        return gin;
    }
    int out_channels(int in_channels) const override { return in_channels; }

private:
    std::vector<char> mask_;
};

class MaxPool2d : public Layer {
public:
    MaxPool2d(int ksize, int stride, int pad = 0) : k_(ksize), stride_(stride), pad_(pad) {}

    Tensor forward(const Tensor& in, bool) override {
        in_h_ = in.height;
        in_w_ = in.width;
        const int oh = (in.height + 2 * pad_ - k_) / stride_ + 1;
        const int ow = (in.width + 2 * pad_ - k_) / stride_ + 1;
        Tensor out(in.channels, oh, ow);
        argmax_.assign(out.size(), -1);
        for (int c = 0; c < in.channels; ++c)
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) {
                    double best = -std::numeric_limits<double>::infinity();
                    int best_idx = -1;
                    for (int ky = 0; ky < k_; ++ky) {
                        const int iy = oy * stride_ - pad_ + ky;
                        if (iy < 0 || iy >= in.height) continue;
                        for (int kx = 0; kx < k_; ++kx) {
                            const int ix = ox * stride_ - pad_ + kx;
                            if (ix < 0 || ix >= in.width) continue;
                            const double val = in.at(c, iy, ix);
                            if (val > best) {
                                best = val;
                                best_idx = (c * in.height + iy) * in.width + ix;
                            }
                        }
                    }
                    out.at(c, oy, ox) = best;
                    argmax_[(static_cast<size_t>(c) * oh + oy) * ow + ox] = best_idx;
                }
        return out;
    }

    Tensor backward(const Tensor& gout) override {
        Tensor gin(gout.channels, in_h_, in_w_);
        for (size_t i = 0; i < gout.size(); ++i)
            if (argmax_[i] >= 0) gin.v[argmax_[i]] += gout.v[i];
        return gin;
    }
    int out_channels(int in_channels) const override { return in_channels; }

private:
    int k_, stride_, pad_;
    int in_h_ = 0, in_w_ = 0;
    std::vector<int> argmax_;
};

class AvgPool2d : public Layer {
public:
    AvgPool2d(int ksize, int stride) : k_(ksize), stride_(stride) {}

    Tensor forward(const Tensor& in, bool) override {
        in_h_ = in.height;
        in_w_ = in.width;
        const int oh = (in.height - k_) / stride_ + 1;
        const int ow = (in.width - k_) / stride_ + 1;
        Tensor out(in.channels, oh, ow);
        const double inv = 1.0 / (k_ * k_);
        for (int c = 0; c < in.channels; ++c)
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) {
                    double acc = 0.0;
                    for (int ky = 0; ky < k_; ++ky)
                        for (int kx = 0; kx < k_; ++kx)
                            acc += in.at(c, oy * stride_ + ky, ox * stride_ + kx);
                    out.at(c, oy, ox) = acc * inv;
                }
        return out;
    }

    Tensor backward(const Tensor& gout) override {
        Tensor gin(gout.channels, in_h_, in_w_);
        const double inv = 1.0 / (k_ * k_);
        for (int c = 0; c < gout.channels; ++c)
            for (int oy = 0; oy < gout.height; ++oy)
                for (int ox = 0; ox < gout.width; ++ox) {
                    const double g = gout.at(c, oy, ox) * inv;
                    for (int ky = 0; ky < k_; ++ky)
                        for (int kx = 0; kx < k_; ++kx)
                            gin.at(c, oy * stride_ + ky, ox * stride_ + kx) += g;
                }
        return gin;
    }
    int out_channels(int in_channels) const override { return in_channels; }

private:
    int k_, stride_;
    int in_h_ = 0, in_w_ = 0;
};

class Sequential : public Layer {
public:
    Sequential() = default;

    Sequential& add(std::unique_ptr<Layer> layer) {
        layers_.push_back(std::move(layer));
        return *this;
    }

    Tensor forward(const Tensor& in, bool train) override {
        Tensor cur = in;
        for (auto& layer : layers_) cur = layer->forward(cur, train);
        return cur;
    }
    Tensor backward(const Tensor& gout) override {
        Tensor cur = gout;
        for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) cur = (*it)->backward(cur);
        return cur;
    }
    void collect_params(std::vector<ParamView>& out) override {
        for (auto& layer : layers_) layer->collect_params(out);
    }
    void collect_buffers(std::vector<std::vector<double>*>& out) override {
        for (auto& layer : layers_) layer->collect_buffers(out);
    }
    void init(Rng& rng) override {
        for (auto& layer : layers_) layer->init(rng);
    }
    int out_channels(int in_channels) const override {
        int ch = in_channels;
        for (const auto& layer : layers_) ch = layer->out_channels(ch);
        return ch;
    }

private:
    std::vector<std::unique_ptr<Layer>> layers_;
};

// Dense connectivity: each unit consumes the concatenation of the block
// input and all previous unit outputs, and contributes `growth` channels.
class DenseBlock : public Layer {
public:
    DenseBlock(int in_channels, int n_units, int growth, int bn_size = 4)
        : in_channels_(in_channels), growth_(growth) {
        int ch = in_channels;
        for (int i = 0; i < n_units; ++i) {
            auto unit = std::make_unique<Sequential>();
            unit->add(std::make_unique<ChannelNorm>(ch));
            unit->add(std::make_unique<ReLU>());
            unit->add(std::make_unique<Conv2d>(ch, bn_size * growth, 1, 1, 0, false));
            unit->add(std::make_unique<ChannelNorm>(bn_size * growth));
            unit->add(std::make_unique<ReLU>());
            unit->add(std::make_unique<Conv2d>(bn_size * growth, growth, 3, 1, 1, false));
            units_.push_back(std::move(unit));
            ch += growth;
        }
    }

    Tensor forward(const Tensor& in, bool train) override {
        Tensor cur = in;
        for (auto& unit : units_) {
            Tensor fresh = unit->forward(cur, train);
            Tensor merged(cur.channels + fresh.channels, cur.height, cur.width);
            std::copy(cur.v.begin(), cur.v.end(), merged.v.begin());
            std::copy(fresh.v.begin(), fresh.v.end(), merged.v.begin() + cur.v.size());
            cur = std::move(merged);
        }
        return cur;
    }

    Tensor backward(const Tensor& gout) override {
        Tensor grad = gout;
        for (auto it = units_.rbegin(); it != units_.rend(); ++it) {
            const int prev_ch = grad.channels - growth_;
            Tensor g_prev(prev_ch, grad.height, grad.width);
            Tensor g_fresh(growth_, grad.height, grad.width);
            const size_t split = g_prev.v.size();
            std::copy(grad.v.begin(), grad.v.begin() + split, g_prev.v.begin());
            std::copy(grad.v.begin() + split, grad.v.end(), g_fresh.v.begin());
            Tensor g_through = (*it)->backward(g_fresh);
            for (size_t i = 0; i < g_prev.v.size(); ++i) g_prev.v[i] += g_through.v[i];
            grad = std::move(g_prev);
        }
        return grad;
    }

    void collect_params(std::vector<ParamView>& out) override {
        for (auto& unit : units_) unit->collect_params(out);
    }
    void collect_buffers(std::vector<std::vector<double>*>& out) override {
        for (auto& unit : units_) unit->collect_buffers(out);
    }
    void init(Rng& rng) override {
        for (auto& unit : units_) unit->init(rng);
    }
    int out_channels(int in_channels) const override {
        return in_channels + static_cast<int>(units_.size()) * growth_;
    }

private:
    int in_channels_, growth_;
    std::vector<std::unique_ptr<Sequential>> units_;
};

}  // namespace viser
