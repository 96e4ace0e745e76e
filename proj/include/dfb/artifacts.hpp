#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "dfb/io.hpp"

namespace dfb::artifacts {

// Missing or unusable upstream artifact; the CLI maps it to exit code 3.
struct DependencyError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Raised when an artifact's recorded output hashes no longer match the files
// on disk; rerun with force to rebuild.
struct StaleArtifactError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Content-addressed tree: root/<stage>/<key[0:2]>/<key>/ with an index.json
// recording the producing key material and output hashes.
class ArtifactStore {
public:
    explicit ArtifactStore(std::filesystem::path root) : root_(std::move(root)) {}

    const std::filesystem::path& root() const { return root_; }

    // Key = sha256 of canonical {stage, config: <stage-relevant config>,
    // inputs: [upstream hashes]}.
    static std::string key_for(const std::string& stage, const json& stage_config,
                               const std::vector<std::string>& input_hashes);

    std::filesystem::path dir_for(const std::string& stage, const std::string& key) const;

    bool exists(const std::filesystem::path& dir) const;
    // Exists and every recorded output hash matches the file on disk.
    bool complete(const std::filesystem::path& dir) const;
    // Exists but does not verify.
    bool stale(const std::filesystem::path& dir) const;

    // Hashes every file in dir (except index.json) and writes the index.
    void finalize(const std::filesystem::path& dir, const std::string& stage,
                  const std::string& key, const json& stage_config,
                  const std::vector<std::string>& input_hashes, const json& extra);
    void finalize(const std::filesystem::path& dir, const std::string& stage,
                  const std::string& key, const json& stage_config,
                  const std::vector<std::string>& input_hashes);

    json index(const std::filesystem::path& dir) const;
    // Sorted {relative path -> sha256} of the artifact's outputs.
    json outputs(const std::filesystem::path& dir) const;
    // Hash of one named output, from the index.
    std::string output_hash(const std::filesystem::path& dir, const std::string& name) const;

    // Remove a directory tree (forced rebuild).
    void wipe(const std::filesystem::path& dir) const;

private:
    std::filesystem::path root_;
};

}  // namespace dfb::artifacts
