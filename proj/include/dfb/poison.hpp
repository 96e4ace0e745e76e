#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "dfb/data.hpp"
#include "dfb/io.hpp"
#include "dfb/trigger.hpp"

namespace dfb::poison {

struct PoisonPlan {
    int32_t target_class = -1;
    double ratio = 0.0;  // fraction of the FULL training set
    uint64_t seed = 0;
    std::vector<int64_t> indices;  // sorted, unique, all labeled target_class
    float eps_poison = 0.0f;
    std::string trigger_mode;

    json to_json() const;
    static PoisonPlan from_json(const json& j);
};

// Seeded uniform choice of round(ratio * N) target-class samples.
PoisonPlan plan_poison(const data::LabeledDataset& train, int32_t target_class, double ratio,
                       uint64_t seed, float eps_poison, const std::string& trigger_mode);

struct PoisonAudit {
    int64_t index = -1;
    float linf = 0.0f;  // of the perturbation actually applied
};

struct PoisonedDataset {
    data::LabeledDataset data;  // perturbed copy; labels identical to base
    PoisonPlan plan;
    std::vector<PoisonAudit> audit;
    std::string base_hash;  // provenance of the unpoisoned images
};

// x_i <- clip01(x_i + clip_linf(scale * delta_i, eps_poison)) for planned i.
// Fixed mode reuses one residual; dynamic mode queries the trigger's encoder
// per planned sample.
PoisonedDataset inject(const data::LabeledDataset& base, const PoisonPlan& plan,
                       const trigger::Trigger& trig, float scale);

// Test-time application: clip01(x + amplification * delta(x)). No l-inf clip
// beyond pixel validity.
Tensor apply_test_trigger(const Tensor& images, const trigger::Trigger& trig,
                          float amplification);

// Poisoned archive: base reference + sparse perturbation rows + plan. The
// loader verifies the base hash and replays the deltas.
void save_poisoned_archive(const std::filesystem::path& dir, const PoisonedDataset& pd);
PoisonedDataset load_poisoned_archive(const std::filesystem::path& dir,
                                      const data::LabeledDataset& base);

}  // namespace dfb::poison
