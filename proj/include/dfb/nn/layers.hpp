#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "dfb/rng.hpp"
#include "dfb/tensor.hpp"

namespace dfb::nn {

struct ParamRef {
    std::string name;
    Tensor* value;
    Tensor* grad;
    bool decay = true;  // excluded for biases / norm affine params
};

// Forward caches whatever backward needs; backward accumulates parameter
// gradients and returns the gradient w.r.t. the layer input.
class Layer {
public:
    virtual ~Layer() = default;
    virtual Tensor forward(const Tensor& x) = 0;
    virtual Tensor backward(const Tensor& dy) = 0;
    virtual void collect_params(const std::string& prefix, std::vector<ParamRef>& out) {}
    virtual void set_train(bool t) { train_ = t; }
    virtual std::string kind() const = 0;

protected:
    bool train_ = true;
};

class Conv2d : public Layer {
public:
    Conv2d(int64_t in_ch, int64_t out_ch, int64_t ksize, int64_t stride = 1, int64_t pad = -1,
           bool bias = true);
    void init(Rng& rng);  // He-normal
    Tensor forward(const Tensor& x) override;
    Tensor backward(const Tensor& dy) override;
    void collect_params(const std::string& prefix, std::vector<ParamRef>& out) override;
    std::string kind() const override { return "conv2d"; }

    Tensor weight;  // {out_ch, in_ch, k, k}
    Tensor bias;    // {out_ch} (empty when disabled)
    Tensor grad_weight, grad_bias;

private:
    int64_t in_ch_, out_ch_, k_, stride_, pad_;
    bool has_bias_;
    std::vector<int64_t> x_shape_;
    Tensor col_;  // im2col cache {K, N*P}
};

class Linear : public Layer {
public:
    Linear(int64_t in, int64_t out);
    void init(Rng& rng);
    Tensor forward(const Tensor& x) override;
    Tensor backward(const Tensor& dy) override;
    void collect_params(const std::string& prefix, std::vector<ParamRef>& out) override;
    std::string kind() const override { return "linear"; }

    Tensor weight;  // {out, in}
    Tensor bias;    // {out}
    Tensor grad_weight, grad_bias;

private:
    int64_t in_, out_;
    Tensor x_;
};

class ReLU : public Layer {
public:
    Tensor forward(const Tensor& x) override;
    Tensor backward(const Tensor& dy) override;
    std::string kind() const override { return "relu"; }

private:
    Tensor y_;
};

class Tanh : public Layer {
public:
    Tensor forward(const Tensor& x) override;
    Tensor backward(const Tensor& dy) override;
    std::string kind() const override { return "tanh"; }

private:
    Tensor y_;
};

// bound * tanh(x): output is confined to [-bound, bound] architecturally.
class ScaledTanh : public Layer {
public:
    explicit ScaledTanh(float bound) : bound_(bound) {}
    Tensor forward(const Tensor& x) override;
    Tensor backward(const Tensor& dy) override;
    std::string kind() const override { return "scaled_tanh"; }
    float bound() const { return bound_; }

private:
    float bound_;
    Tensor t_;  // tanh(x)
};

class MaxPool2d : public Layer {
public:
    explicit MaxPool2d(int64_t k = 2) : k_(k) {}
    Tensor forward(const Tensor& x) override;
    Tensor backward(const Tensor& dy) override;
    std::string kind() const override { return "maxpool2d"; }

private:
    int64_t k_;
    std::vector<int64_t> x_shape_;
    std::vector<int64_t> argmax_;
};

class GlobalAvgPool : public Layer {
public:
    Tensor forward(const Tensor& x) override;  // {N,C,H,W} -> {N,C}
    Tensor backward(const Tensor& dy) override;
    std::string kind() const override { return "gap"; }

private:
    std::vector<int64_t> x_shape_;
};

class UpsampleNearest2x : public Layer {
public:
    Tensor forward(const Tensor& x) override;
    Tensor backward(const Tensor& dy) override;
    std::string kind() const override { return "upsample2x"; }

private:
    std::vector<int64_t> x_shape_;
};

class BatchNorm2d : public Layer {
public:
    explicit BatchNorm2d(int64_t channels, float momentum = 0.1f, float eps = 1e-5f);
    Tensor forward(const Tensor& x) override;
    Tensor backward(const Tensor& dy) override;
    void collect_params(const std::string& prefix, std::vector<ParamRef>& out) override;
    std::string kind() const override { return "batchnorm2d"; }

    Tensor gamma, beta;
    Tensor grad_gamma, grad_beta;
    Tensor running_mean, running_var;  // persisted but not optimized

private:
    int64_t channels_;
    float momentum_, eps_;
    Tensor xhat_;
    std::vector<float> invstd_;
    std::vector<int64_t> x_shape_;
    bool used_batch_stats_ = false;
};

// Per-channel multiplicative mask; all-ones by default (pruning hook).
class ChannelMask : public Layer {
public:
    explicit ChannelMask(int64_t channels) : mask_(Tensor::full({channels}, 1.0f)) {}
    Tensor forward(const Tensor& x) override;
    Tensor backward(const Tensor& dy) override;
    std::string kind() const override { return "channel_mask"; }

    std::span<float> mask() { return mask_.flat(); }
    std::span<const float> mask() const { return mask_.flat(); }
    Tensor& mask_tensor() { return mask_; }  // persisted with checkpoints
    bool identity() const;

private:
    Tensor mask_;
};

class Flatten : public Layer {
public:
    Tensor forward(const Tensor& x) override;
    Tensor backward(const Tensor& dy) override;
    std::string kind() const override { return "flatten"; }

private:
    std::vector<int64_t> x_shape_;
};

// Residual basic block: conv-bn-relu-conv-bn (+ optional projection) -> relu.
class ResidualBlock : public Layer {
public:
    ResidualBlock(int64_t in_ch, int64_t out_ch, int64_t stride);
    void init(Rng& rng);
    Tensor forward(const Tensor& x) override;
    Tensor backward(const Tensor& dy) override;
    void collect_params(const std::string& prefix, std::vector<ParamRef>& out) override;
    void collect_running_stats(const std::string& prefix,
                               std::vector<std::pair<std::string, Tensor*>>& out);
    void set_train(bool t) override;
    std::string kind() const override { return "residual_block"; }

private:
    Conv2d conv1_, conv2_;
    BatchNorm2d bn1_, bn2_;
    ReLU relu1_, relu2_;
    std::unique_ptr<Conv2d> proj_;
    std::unique_ptr<BatchNorm2d> proj_bn_;
    Tensor x_;
};

class Sequential {
public:
    template <typename T, typename... Args>
    T* add(Args&&... args) {
        auto layer = std::make_unique<T>(std::forward<Args>(args)...);
        T* raw = layer.get();
        layers_.push_back(std::move(layer));
        return raw;
    }

    int size() const { return static_cast<int>(layers_.size()); }
    Layer& layer(int i) { return *layers_[static_cast<size_t>(i)]; }

    Tensor forward(const Tensor& x);
    // Output of layer i from the most recent forward (i = -1 gives the input).
    const Tensor& activation(int i) const;
    // Full backward; returns gradient w.r.t. the input.
    Tensor backward(const Tensor& dy);
    // Backward stopping early: returns the gradient w.r.t. activation(stop_at).
    Tensor backward_until(const Tensor& dy, int stop_at);

    std::vector<ParamRef> params(const std::string& prefix = "");
    void set_train(bool t);
    void init(Rng& rng);

private:
    std::vector<std::unique_ptr<Layer>> layers_;
    std::vector<Tensor> acts_;
    Tensor input_;
};

// Mean softmax cross-entropy over the batch; grad is d(loss)/d(logits).
struct CeResult {
    double loss = 0.0;
    Tensor grad;
};

CeResult softmax_cross_entropy(const Tensor& logits, std::span<const int32_t> labels,
                               bool want_grad = true);
Tensor softmax(const Tensor& logits);
std::vector<int32_t> argmax_rows(const Tensor& logits);
std::vector<double> per_sample_cross_entropy(const Tensor& logits, std::span<const int32_t> labels);

void he_init(Tensor& w, int64_t fan_in, Rng& rng);

}  // namespace dfb::nn
