#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "dfb/data.hpp"
#include "dfb/defenses.hpp"
#include "dfb/io.hpp"
#include "dfb/nn/train.hpp"

namespace dfb::config {

// Raised for schema violations; the CLI maps it to exit code 2.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct AttackConfig {
    float eps_gen = 8.0f / 255.0f;
    float eps_poison = 16.0f / 255.0f;
    double poison_ratio = 0.0;
    std::string trigger_mode = "fixed";  // fixed | dynamic | min-loss
    float train_scale = 2.0f;
    float amplification = 2.0f;
    int64_t max_candidates = 0;  // 0 = use every target-class candidate
};

struct DefenseConfig {
    defense::NcOptions neural_cleanse;
    std::vector<double> prune_rates{0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
    int strip_perturbations = 64;
    int64_t strip_probes = 64;
    int64_t prune_subset = 256;
    int64_t sentinet_probes = 4;
};

struct ExperimentConfig {
    std::string name = "experiment";
    uint64_t seed = 1;
    std::filesystem::path artifact_root = "runs";
    data::DatasetConfig dataset;  // holds victim source, pood source, target class
    double pood_balance_k = 1.0;
    AttackConfig attack;
    std::string decoder_arch = "small-cnn";
    nn::Hyper decoder_hyper;
    nn::Hyper encoder_hyper;
    std::string victim_arch = "small-cnn";
    nn::Hyper victim_hyper;
    DefenseConfig defense;

    // Fully resolved form (defaults applied); basis of the config hash.
    json to_json() const;
    std::string hash() const;
};

// Strict parse: unknown keys and invariant violations raise ConfigError with
// the offending field path. Epsilon defaults are 8/255 and 16/255.
ExperimentConfig validate_config(const json& raw);
ExperimentConfig validate_config_text(const std::string& text);
ExperimentConfig load_config_file(const std::filesystem::path& p);

}  // namespace dfb::config
