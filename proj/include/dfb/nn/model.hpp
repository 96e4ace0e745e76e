#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "dfb/nn/layers.hpp"

namespace dfb::nn {

// Architecture ids accepted by the classifier registry.
bool known_classifier_arch(const std::string& arch);

struct ModelMeta {
    std::string kind;                 // "classifier" | "encoder"
    std::string arch;                 // registry id
    std::vector<int64_t> input_chw;   // {C, H, W}
    int64_t num_outputs = 0;          // logits (classifier) or channels (encoder)
    float out_bound = 0.0f;           // encoder residual bound, 0 for classifiers
    uint64_t seed = 0;
    std::string train_config_hash;    // set once trained
};

// Feed-forward classifier assembled from the registry. The last conv stage
// is followed by a per-channel mask (pruning hook) whose output also serves
// as the attribution tap for class activation maps.
class Classifier {
public:
    Classifier(const std::string& arch, std::vector<int64_t> input_chw, int64_t num_classes,
               uint64_t seed);

    Tensor forward(const Tensor& x);
    Tensor backward(const Tensor& dy);
    std::vector<ParamRef> params() { return net_.params(); }
    void set_train(bool t) { net_.set_train(t); }

    // Activation index of the masked last-conv feature map.
    int feature_tap() const { return mask_index_; }
    const Tensor& feature_map() const { return net_.activation(mask_index_); }
    // Gradient of a scalar objective w.r.t. the tapped feature map.
    Tensor grad_at_tap(const Tensor& dlogits) { return net_.backward_until(dlogits, mask_index_); }
    ChannelMask& channel_mask() { return *mask_; }
    int64_t feature_channels() const { return feature_channels_; }

    Sequential& net() { return net_; }
    ModelMeta meta;

private:
    Sequential net_;
    ChannelMask* mask_ = nullptr;
    int mask_index_ = -1;
    int64_t feature_channels_ = 0;
};

// Hourglass image-to-residual network with an additive full-resolution skip
// and a saturating output stage that confines every component to
// [-bound, +bound] by construction.
class ResidualEncoder {
public:
    ResidualEncoder(std::vector<int64_t> input_chw, float bound, uint64_t seed);

    Tensor forward(const Tensor& x);
    Tensor backward(const Tensor& dy);
    std::vector<ParamRef> params();
    // Everything a checkpoint persists: params plus norm running statistics.
    std::vector<std::pair<std::string, Tensor*>> state_entries();
    void set_train(bool t);
    float bound() const { return bound_; }

    ModelMeta meta;

private:
    float bound_;
    Conv2d pre_conv_;
    BatchNorm2d pre_bn_;
    ReLU pre_relu_;
    Conv2d down_conv_;
    BatchNorm2d down_bn_;
    ReLU down_relu_;
    Conv2d mid_conv_;
    BatchNorm2d mid_bn_;
    ReLU mid_relu_;
    UpsampleNearest2x up_;
    Conv2d up_conv_;
    BatchNorm2d up_bn_;
    ReLU up_relu_;
    Conv2d head_conv_;
    ScaledTanh out_;
};

// Self-describing checkpoint container: json header + named tensor blobs.
void save_classifier(const std::filesystem::path& p, Classifier& m);
std::unique_ptr<Classifier> load_classifier(const std::filesystem::path& p);
void save_encoder(const std::filesystem::path& p, ResidualEncoder& m);
std::unique_ptr<ResidualEncoder> load_encoder(const std::filesystem::path& p);

}  // namespace dfb::nn
