#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "dfb/tensor.hpp"

namespace dfb {

using json = nlohmann::json;

// Hex SHA-256 digests.
std::string sha256_hex(const void* data, size_t len);
std::string sha256_hex(const std::string& s);
std::string sha256_hex(const Tensor& t);
std::string sha256_file(const std::filesystem::path& p);

// Binary tensor container ("DFBT"): rank, dims, raw float32 payload.
void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);
void save_tensor(const std::filesystem::path& p, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& p);

void save_json(const std::filesystem::path& p, const json& j);
json load_json_file(const std::filesystem::path& p);

// Canonical serialization (sorted keys, fixed spacing) used for hashing;
// stable under field reordering in the source text.
std::string canonical_dump(const json& j);
std::string json_hash(const json& j);

std::string read_text_file(const std::filesystem::path& p);
void write_text_file(const std::filesystem::path& p, const std::string& text);

}  // namespace dfb
