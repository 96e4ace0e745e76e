#pragma once

#include <functional>
#include <string>
#include <vector>

#include "dfb/poison.hpp"

namespace dfb::eval {

struct MetricsReport {
    double acc = 0.0;      // % clean test accuracy
    double tar_acc = 0.0;  // % clean accuracy on target-class test samples
    double asr = 0.0;      // % triggered non-target test samples classified as target
    std::string config_hash;
    uint64_t seed = 0;
    int64_t n_test = 0;
    int64_t n_target_test = 0;
    int64_t n_nontarget_test = 0;

    json to_json() const;
    static MetricsReport from_json(const json& j);
};

MetricsReport evaluate_attack(nn::Classifier& victim, const data::LabeledDataset& clean_test,
                              const trigger::Trigger& trig, int32_t target_class,
                              float amplification);

// Clean-model accuracy metrics only (no trigger): fills acc and tar_acc, asr
// computed with the provided trigger if any.
double clean_accuracy(nn::Classifier& victim, const data::LabeledDataset& clean_test);

struct BaselineSpec {
    std::string kind = "badnets_patch";  // badnets_patch | blend_image
    int patch_size = 3;
    std::string position = "bottom_right";  // bottom_right | top_left
    float patch_value = 1.0f;
    Tensor blend_image;  // {C,H,W}; required for blend_image kind
    float alpha = 0.2f;
    std::string label_policy = "clean";  // clean | dirty
};

// Pure appliers: x -> x'.
Tensor apply_baseline(const Tensor& images, const BaselineSpec& spec);

// Injects a baseline attack into a training set. Clean policy perturbs
// target-class samples and keeps labels; dirty policy perturbs samples from
// any class and overwrites their labels with the target.
data::LabeledDataset inject_baseline(const data::LabeledDataset& base, const BaselineSpec& spec,
                                     int32_t target_class, double ratio, uint64_t seed,
                                     std::vector<int64_t>* out_indices = nullptr);

// A named test-time image transform under study.
struct StudyTrigger {
    std::string name;
    std::function<Tensor(const Tensor&)> apply;
};

struct TriggerQualityCell {
    std::string trigger_name;
    int32_t cls = -1;
    double ce = 0.0;  // cross-entropy of the clean model, averaged over runs
};

// Cross-entropy of a clean model on triggered class samples, repeated over
// seeded subsample draws and averaged. The same draws are reused for every
// trigger so an identity transform reproduces the clean column exactly.
std::vector<TriggerQualityCell> trigger_quality_eval(nn::Classifier& clean_model,
                                                     const data::LabeledDataset& train_set,
                                                     const std::vector<StudyTrigger>& triggers,
                                                     const std::vector<int32_t>& classes,
                                                     int runs, int64_t samples_per_run,
                                                     uint64_t seed);

}  // namespace dfb::eval
