#include "dfb/io.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include <openssl/evp.h>

#include <nlohmann/json.hpp>

namespace dfb {

std::string sha256_hex(const void* data, size_t len) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int digest_len = 0;
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
    EVP_DigestUpdate(ctx, data, len);
    EVP_DigestFinal_ex(ctx, digest, &digest_len);
    EVP_MD_CTX_free(ctx);
    static const char* hex = "0123456789abcdef";
    std::string out;
    out.reserve(digest_len * 2);
    for (unsigned int i = 0; i < digest_len; ++i) {
        out.push_back(hex[digest[i] >> 4]);
        out.push_back(hex[digest[i] & 0xf]);
    }
    return out;
}

std::string sha256_hex(const std::string& s) { return sha256_hex(s.data(), s.size()); }

std::string sha256_hex(const Tensor& t) {
    return sha256_hex(t.data(), static_cast<size_t>(t.numel()) * sizeof(float));
}

std::string sha256_file(const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    if (!f) throw std::runtime_error("sha256_file: cannot open " + p.string());
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int digest_len = 0;
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
    std::vector<char> buf(1 << 16);
    while (f) {
        f.read(buf.data(), static_cast<std::streamsize>(buf.size()));
        std::streamsize got = f.gcount();
        if (got > 0) EVP_DigestUpdate(ctx, buf.data(), static_cast<size_t>(got));
    }
    EVP_DigestFinal_ex(ctx, digest, &digest_len);
    EVP_MD_CTX_free(ctx);
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < digest_len; ++i) {
        out.push_back(hex[digest[i] >> 4]);
        out.push_back(hex[digest[i] & 0xf]);
    }
    return out;
}

namespace {
constexpr char kMagic[4] = {'D', 'F', 'B', 'T'};

template <typename T>
void write_pod(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw std::runtime_error("read_tensor: truncated stream");
    return v;
}
}  // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
    os.write(kMagic, 4);
    write_pod<int32_t>(os, static_cast<int32_t>(t.rank()));
    for (int i = 0; i < t.rank(); ++i) write_pod<int64_t>(os, t.dim(i));
    os.write(reinterpret_cast<const char*>(t.data()),
             static_cast<std::streamsize>(t.numel()) * static_cast<std::streamsize>(sizeof(float)));
}

Tensor read_tensor(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw std::runtime_error("read_tensor: bad magic");
    int32_t rank = read_pod<int32_t>(is);
    if (rank < 0 || rank > 8) throw std::runtime_error("read_tensor: bad rank");
    std::vector<int64_t> shape(static_cast<size_t>(rank));
    for (auto& d : shape) d = read_pod<int64_t>(is);
    Tensor t(shape);
    is.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(t.numel()) * static_cast<std::streamsize>(sizeof(float)));
    if (!is) throw std::runtime_error("read_tensor: truncated payload");
    return t;
}

void save_tensor(const std::filesystem::path& p, const Tensor& t) {
    std::ofstream f(p, std::ios::binary);
    if (!f) throw std::runtime_error("save_tensor: cannot open " + p.string());
    write_tensor(f, t);
}

Tensor load_tensor(const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    if (!f) throw std::runtime_error("load_tensor: cannot open " + p.string());
    return read_tensor(f);
}

void save_json(const std::filesystem::path& p, const json& j) {
    std::ofstream f(p);
    if (!f) throw std::runtime_error("save_json: cannot open " + p.string());
    f << j.dump(2) << "\n";
}

json load_json_file(const std::filesystem::path& p) {
    std::ifstream f(p);
    if (!f) throw std::runtime_error("load_json_file: cannot open " + p.string());
    return json::parse(f);
}

std::string canonical_dump(const json& j) {
    // nlohmann::json object keys are already sorted (std::map); a plain dump
    // with no indentation is canonical for our purposes.
    return j.dump();
}

std::string json_hash(const json& j) { return sha256_hex(canonical_dump(j)); }

std::string read_text_file(const std::filesystem::path& p) {
    std::ifstream f(p);
    if (!f) throw std::runtime_error("read_text_file: cannot open " + p.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void write_text_file(const std::filesystem::path& p, const std::string& text) {
    std::ofstream f(p);
    if (!f) throw std::runtime_error("write_text_file: cannot open " + p.string());
    f << text;
}

}  // namespace dfb
