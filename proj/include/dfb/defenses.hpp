#pragma once

#include <string>
#include <vector>

#include "dfb/eval.hpp"

namespace dfb::defense {

// --------------------------------------------------------- Neural Cleanse

struct NcOptions {
    int steps = 300;          // optimizer steps per class
    int batch_size = 32;
    float lr = 0.1f;
    float lambda_init = 1e-3f;  // l1 weight, adapted during optimization
    float attack_threshold = 0.99f;  // success rate that triggers lambda growth
    int patience = 5;
    uint64_t seed = 0;
    int64_t max_samples = 256;  // optimization subset size
};

struct NcClassResult {
    int32_t cls = -1;
    Tensor mask;     // {H,W} in [0,1]
    Tensor pattern;  // {C,H,W} in [0,1]
    double l1 = 0.0;  // sum of mask values
    bool converged = true;
    std::string note;
};

struct NcReport {
    std::vector<NcClassResult> classes;
    std::vector<double> anomaly;  // per class, aligned with classes
    std::vector<int32_t> flagged;  // anomaly >= 2 and below-median l1
};

// Reverse-engineers a minimal (mask, pattern) per class and scores l1 norms
// with the median-absolute-deviation anomaly index.
NcReport neural_cleanse(nn::Classifier& victim, const data::LabeledDataset& samples,
                        const NcOptions& opts);

// |l1_c - median| / (1.4826 * MAD), MAD floored to avoid division by zero.
std::vector<double> anomaly_indices(const std::vector<double>& l1_norms);

// ----------------------------------------------------------------- pruning

struct PrunePoint {
    double rate = 0.0;
    double acc = 0.0;  // %
    double asr = 0.0;  // %
};

// Ranks last-stage conv channels by mean activation over the clean subset
// (ascending) and zeroes the lowest fraction at each rate. The victim's mask
// is restored to identity afterwards.
std::vector<PrunePoint> prune_defense(nn::Classifier& victim,
                                      const data::LabeledDataset& clean_subset,
                                      const data::LabeledDataset& test_set,
                                      const trigger::Trigger& trig, int32_t target_class,
                                      float amplification, const std::vector<double>& rates);

// ------------------------------------------------------------------- STRIP

// Mean prediction entropy of each probe under n seeded 0.5/0.5 overlays.
std::vector<double> strip_defense(nn::Classifier& victim, const Tensor& probe_inputs,
                                  const Tensor& overlay_pool, int n_perturbations,
                                  uint64_t seed);

// Entropy of one probability row; exposed for analytic tests.
double prediction_entropy(std::span<const float> probs);

// --------------------------------------------------------------- SentiNet

// Class-activation heatmap for one input: rectified gradient-weighted sum of
// the tapped feature maps, upsampled to input size, min-max normalized.
// target_class < 0 uses the predicted class.
Tensor sentinet_heatmap(nn::Classifier& victim, const Tensor& input, int32_t target_class = -1);

}  // namespace dfb::defense
