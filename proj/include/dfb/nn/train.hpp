#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dfb/data.hpp"
#include "dfb/io.hpp"
#include "dfb/nn/model.hpp"
#include "dfb/nn/optim.hpp"

namespace dfb::nn {

struct Hyper {
    int epochs = 10;
    int batch_size = 32;
    float lr = 0.05f;
    float momentum = 0.9f;
    float weight_decay = 5e-4f;
    std::string schedule = "cosine";  // cosine | step | constant
    std::vector<int> milestones;
    float gamma = 0.1f;
    uint64_t seed = 1;
    data::AugmentPolicy augment;

    json to_json() const;
    static Hyper from_json(const json& j);
};

struct EpochRecord {
    int epoch = 0;
    float lr = 0.0f;
    double train_loss = 0.0;
    double train_acc = 0.0;
    double val_loss = -1.0;  // negative = no validation split
    double val_acc = -1.0;
};

struct TrainResult {
    std::vector<EpochRecord> log;
    double final_train_acc = 0.0;
    double final_val_acc = -1.0;
};

struct FitOptions {
    const Tensor* val_images = nullptr;
    std::span<const int32_t> val_labels;
    std::filesystem::path log_path;  // line-delimited json epoch records when set
};

// Core supervised loop: seeded shuffling, optional crop/flip augmentation,
// cross-entropy, SGD with the configured schedule. Throws on non-finite loss.
TrainResult fit_classifier(Classifier& model, const Tensor& images,
                           std::span<const int32_t> labels, const Hyper& hyper,
                           const FitOptions& opts = {});

// Eval-mode batched inference.
Tensor predict_logits(Classifier& model, const Tensor& images, int batch_size = 128);
double accuracy(Classifier& model, const Tensor& images, std::span<const int32_t> labels,
                int batch_size = 128);

// Surrogate decoder training: binary head, internal seeded 10% validation split.
struct DecoderOutcome {
    std::unique_ptr<Classifier> model;
    TrainResult result;
};
DecoderOutcome train_decoder(const data::BinaryOodDataset& data, const std::string& arch,
                             const Hyper& hyper,
                             const std::filesystem::path& log_path = {});

// Victim training on a (possibly poisoned) labeled set.
std::unique_ptr<Classifier> train_victim(const data::LabeledDataset& data,
                                         const std::string& arch, int64_t num_classes,
                                         const Hyper& hyper, TrainResult* out_result = nullptr,
                                         const std::filesystem::path& log_path = {});

// Residual generation on a finalized encoder (eval mode, batched).
Tensor forward_encoder(ResidualEncoder& model, const Tensor& images, int batch_size = 128);

// Gather a subset of rows of a rank-4 tensor.
Tensor gather_rows(const Tensor& images, std::span<const int64_t> indices);

}  // namespace dfb::nn
