#include "dfb/artifacts.hpp"

#include <algorithm>

#include <nlohmann/json.hpp>

namespace dfb::artifacts {

std::string ArtifactStore::key_for(const std::string& stage, const json& stage_config,
                                   const std::vector<std::string>& input_hashes) {
    json key_material;
    key_material["stage"] = stage;
    key_material["config"] = stage_config;
    key_material["inputs"] = input_hashes;
    return json_hash(key_material);
}

std::filesystem::path ArtifactStore::dir_for(const std::string& stage,
                                             const std::string& key) const {
    return root_ / stage / key.substr(0, 2) / key;
}

bool ArtifactStore::exists(const std::filesystem::path& dir) const {
    return std::filesystem::exists(dir / "index.json");
}

bool ArtifactStore::complete(const std::filesystem::path& dir) const {
    if (!exists(dir)) return false;
    json idx;
    try {
        idx = load_json_file(dir / "index.json");
    } catch (const std::exception&) {
        return false;
    }
    if (!idx.contains("outputs")) return false;
    for (auto it = idx.at("outputs").begin(); it != idx.at("outputs").end(); ++it) {
        const std::filesystem::path f = dir / it.key();
        if (!std::filesystem::exists(f)) return false;
        if (sha256_file(f) != it.value().get<std::string>()) return false;
    }
    return true;
}

bool ArtifactStore::stale(const std::filesystem::path& dir) const {
    return exists(dir) && !complete(dir);
}

void ArtifactStore::finalize(const std::filesystem::path& dir, const std::string& stage,
                             const std::string& key, const json& stage_config,
                             const std::vector<std::string>& input_hashes, const json& extra) {
    json idx;
    idx["stage"] = stage;
    idx["key"] = key;
    idx["config"] = stage_config;
    idx["inputs"] = input_hashes;
    idx["extra"] = extra;

    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::recursive_directory_iterator(dir))
        if (entry.is_regular_file() && entry.path().filename() != "index.json")
            files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    json outs = json::object();
    for (const auto& f : files)
        outs[std::filesystem::relative(f, dir).generic_string()] = sha256_file(f);
    idx["outputs"] = outs;

    write_text_file(dir / "index.json", canonical_dump(idx));
}

void ArtifactStore::finalize(const std::filesystem::path& dir, const std::string& stage,
                             const std::string& key, const json& stage_config,
                             const std::vector<std::string>& input_hashes) {
    finalize(dir, stage, key, stage_config, input_hashes, json::object());
}

json ArtifactStore::index(const std::filesystem::path& dir) const {
    if (!exists(dir)) throw DependencyError("missing artifact: " + dir.string());
    return load_json_file(dir / "index.json");
}

json ArtifactStore::outputs(const std::filesystem::path& dir) const {
    return index(dir).at("outputs");
}

std::string ArtifactStore::output_hash(const std::filesystem::path& dir,
                                       const std::string& name) const {
    const json outs = outputs(dir);
    if (!outs.contains(name))
        throw DependencyError("artifact " + dir.string() + " lacks output " + name);
    return outs.at(name).get<std::string>();
}

void ArtifactStore::wipe(const std::filesystem::path& dir) const {
    std::filesystem::remove_all(dir);
}

}  // namespace dfb::artifacts
