#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dfb/artifacts.hpp"
#include "dfb/config.hpp"

namespace dfb::pipeline {

// Canonical stage order: binarize, decoder, encoder, trigger, poison, victim,
// evaluate, defend.
const std::vector<std::string>& stage_names();
bool known_stage(const std::string& stage);

struct RunResult {
    json manifest;
    std::filesystem::path manifest_path;
};

// Runs the requested stages (empty = all) against the content-addressed store
// under cfg.artifact_root. Stages that are only dependencies must already have
// complete artifacts; a missing one raises DependencyError, a corrupted one
// StaleArtifactError. With force, requested stages are rebuilt and stale
// artifacts are wiped instead of refused. The returned manifest is also
// written under <root>/manifests/<config_hash>/ and is byte-stable across
// repeated runs of the same config.
RunResult run_pipeline(const config::ExperimentConfig& cfg,
                       std::vector<std::string> stages = {}, bool force = false);

// One full run (through evaluate) per value of the axis. Axes: poison_ratio,
// decoder_arch, victim_arch, target_class. The report and an ASR/ACC chart
// land under <root>/reports/.
json run_sweep(const config::ExperimentConfig& base, const std::string& axis,
               const json& values, bool force = false);

// Controlled comparisons built from full pipeline runs:
//   min_loss_trigger     fixed selection vs the inverted (argmin) rule
//   cross_domain_trigger trigger synthesized from params["foreign_pood"]
//   encoder_accuracy     erase rate vs ASR across params["encoder_epochs"]
json run_ablation(const config::ExperimentConfig& base, const std::string& kind,
                  const json& params, bool force = false);

// Renders a run manifest, sweep report, or ablation report into tables and
// charts under out_dir.
void render_report(const json& report, const std::filesystem::path& out_dir);

}  // namespace dfb::pipeline
