#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dfb/rng.hpp"
#include "dfb/tensor.hpp"

namespace dfb::data {

enum class Role { victim_train, victim_test, pood };

std::string role_name(Role r);
Role role_from_name(const std::string& s);

// Images are stored planar ({N,C,H,W}, float32 in [0,1]); the logical shape
// reported to callers is (H,W,C).
struct LabeledDataset {
    std::string name;
    Tensor images;  // {N,C,H,W}
    std::vector<int32_t> labels;
    std::vector<std::string> class_names;
    Role role = Role::victim_train;
    uint64_t seed = 0;

    int64_t size() const { return images.rank() == 4 ? images.dim(0) : 0; }
    int num_classes() const { return static_cast<int>(class_names.size()); }
    std::vector<int64_t> shape_hwc() const;  // (H,W,C)
    std::vector<int64_t> shape_chw() const;  // (C,H,W)
    int64_t image_numel() const;

    std::span<const float> image(int64_t i) const;
    std::span<float> image(int64_t i);
    Tensor image_copy(int64_t i) const;  // {C,H,W}

    int label_id(const std::string& class_name) const;  // -1 when absent
    std::vector<int64_t> indices_of_class(int32_t label) const;

    // Enforces the dataset invariants; throws std::runtime_error on violation.
    void validate() const;
};

struct AugmentPolicy {
    bool random_crop = false;
    int crop_pad = 4;
    bool random_hflip = false;
    bool identity() const { return !random_crop && !random_hflip; }
};

// Tokens: "random_crop", "random_crop(pad=N)", "random_hflip". Unknown tokens throw.
AugmentPolicy parse_augmentation(const std::vector<std::string>& tokens);

struct DatasetConfig {
    std::string name;
    std::string source;       // "synth:...", "folder:<path>", "archive:<path>"
    std::vector<int64_t> shape;  // target (H,W,C); empty = native, resize otherwise
    int target_class = -1;
    std::string target_class_name;
    std::string pood_source;  // same scheme set as source
    std::vector<std::string> augmentation;
    uint64_t seed = 0;
};

// Role selects between config.source (victim_train/victim_test) and
// config.pood_source (pood). Ordering is deterministic given the seed.
LabeledDataset load_dataset(const DatasetConfig& config, Role role);

struct BinaryOodDataset {
    Tensor images;  // {N,C,H,W}
    std::vector<int32_t> labels;  // 1 = target, 0 = non-target
    std::string source_target_class;
    int64_t n_target = 0;
    int64_t n_nontarget = 0;
    std::vector<int64_t> source_indices;  // provenance into the source set
    int64_t size() const { return images.rank() == 4 ? images.dim(0) : 0; }
};

enum class BalancePolicy { none, downsample };

// Relabels the OOD set {target -> 1, rest -> 0}. With downsampling the
// non-target side is reduced to k * n_target by seeded sampling.
BinaryOodDataset binarize_pood(const LabeledDataset& pood, const std::string& target_class_name,
                               BalancePolicy policy = BalancePolicy::downsample,
                               double balance_k = 1.0, uint64_t seed = 0);

struct DisjointReport {
    std::vector<std::string> overlap;  // exact-string matches
    std::vector<std::pair<std::string, std::string>> fuzzy_warnings;
    bool disjoint() const { return overlap.empty(); }
};

DisjointReport check_disjoint(const LabeledDataset& a, const LabeledDataset& b);

// Fuzzy name affinity used for disjointness warnings and for picking the
// OOD class closest in name to the victim target class. 0 = unrelated.
double name_affinity(const std::string& a, const std::string& b);
std::string nearest_class_name(const std::string& target, const std::vector<std::string>& candidates);

// Per-sample stochastic crop/flip; labels are never part of the signature.
Tensor augment_batch(const Tensor& batch, const AugmentPolicy& policy, Rng& rng);

Tensor resize_bilinear(const Tensor& images, int64_t out_h, int64_t out_w);

// ---- archive persistence (manifest + per-split tensors, SHA-256 audited) ----

void save_archive_split(const std::filesystem::path& dir, const LabeledDataset& ds,
                        const std::string& split);
LabeledDataset load_archive_split(const std::filesystem::path& dir, const std::string& split);
std::vector<std::string> archive_splits(const std::filesystem::path& dir);
std::string archive_split_hash(const std::filesystem::path& dir, const std::string& split);

// ---- procedural source ("synth:" scheme) ----

struct SynthSpec {
    std::string kind = "victim";  // victim | pood
    int classes = 5;
    int per_class = 500;
    int test_per_class = 0;  // victim_test count; 0 = per_class / 5
    int64_t height = 24, width = 24, channels = 3;
    uint64_t seed = 7;
    bool seed_explicit = false;
    uint64_t family = 0;     // template parameter space id
    double alpha = 0.055;    // class pattern amplitude
    double noise = 0.02;     // pixel noise sigma
    double degrade_frac = 0.0;  // fraction of low-quality samples (OOD sets)
    std::string cousin_of;   // pood only: victim class name to imitate
    uint64_t cousin_family = 0;  // family the cousin template is drawn from
    int cousin_class_index = 0;  // class index of the imitated template
};

SynthSpec parse_synth_source(const std::string& source);  // after "synth:"
LabeledDataset generate_synthetic(const SynthSpec& spec, Role role);

}  // namespace dfb::data
