#include "dfb/data.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "dfb/image_io.hpp"
#include "dfb/io.hpp"

namespace fs = std::filesystem;

namespace dfb::data {

std::string role_name(Role r) {
    switch (r) {
        case Role::victim_train: return "victim_train";
        case Role::victim_test: return "victim_test";
        case Role::pood: return "pood";
    }
    return "unknown";
}

Role role_from_name(const std::string& s) {
    if (s == "victim_train") return Role::victim_train;
    if (s == "victim_test") return Role::victim_test;
    if (s == "pood") return Role::pood;
    throw std::runtime_error("unknown dataset role: " + s);
}

std::vector<int64_t> LabeledDataset::shape_hwc() const {
    return {images.dim(2), images.dim(3), images.dim(1)};
}

std::vector<int64_t> LabeledDataset::shape_chw() const {
    return {images.dim(1), images.dim(2), images.dim(3)};
}

int64_t LabeledDataset::image_numel() const {
    return images.dim(1) * images.dim(2) * images.dim(3);
}

std::span<const float> LabeledDataset::image(int64_t i) const {
    return {images.data() + i * image_numel(), static_cast<size_t>(image_numel())};
}

std::span<float> LabeledDataset::image(int64_t i) {
    return {images.data() + i * image_numel(), static_cast<size_t>(image_numel())};
}

Tensor LabeledDataset::image_copy(int64_t i) const {
    Tensor t(shape_chw());
    auto src = image(i);
    std::copy(src.begin(), src.end(), t.data());
    return t;
}

int LabeledDataset::label_id(const std::string& class_name) const {
    for (size_t i = 0; i < class_names.size(); ++i)
        if (class_names[i] == class_name) return static_cast<int>(i);
    return -1;
}

std::vector<int64_t> LabeledDataset::indices_of_class(int32_t label) const {
    std::vector<int64_t> out;
    for (int64_t i = 0; i < size(); ++i)
        if (labels[static_cast<size_t>(i)] == label) out.push_back(i);
    return out;
}

void LabeledDataset::validate() const {
    if (images.rank() != 4)
        throw std::runtime_error("dataset '" + name + "': images must be {N,C,H,W}");
    if (static_cast<int64_t>(labels.size()) != size())
        throw std::runtime_error("dataset '" + name + "': label count != image count");
    const int nc = num_classes();
    for (size_t i = 0; i < labels.size(); ++i)
        if (labels[i] < 0 || labels[i] >= nc)
            throw std::runtime_error("dataset '" + name + "': label out of range at index " +
                                     std::to_string(i));
    for (float v : images.flat())
        if (!(v >= 0.0f && v <= 1.0f))
            throw std::runtime_error("dataset '" + name + "': pixel outside [0,1]");
}

AugmentPolicy parse_augmentation(const std::vector<std::string>& tokens) {
    AugmentPolicy p;
    for (const auto& tok : tokens) {
        if (tok == "random_hflip") {
            p.random_hflip = true;
        } else if (tok == "random_crop") {
            p.random_crop = true;
        } else if (tok.rfind("random_crop(pad=", 0) == 0 && tok.back() == ')') {
            p.random_crop = true;
            p.crop_pad = std::stoi(tok.substr(16, tok.size() - 17));
            if (p.crop_pad < 0) throw std::runtime_error("augmentation: negative crop pad");
        } else {
            throw std::runtime_error("augmentation: unknown policy token '" + tok + "'");
        }
    }
    return p;
}

// ---------------------------------------------------------------- disjointness

namespace {

std::vector<std::string> name_tokens(const std::string& s) {
    std::vector<std::string> toks;
    std::string cur;
    for (char ch : s) {
        if (std::isalnum(static_cast<unsigned char>(ch))) {
            cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
        } else if (!cur.empty()) {
            toks.push_back(cur);
            cur.clear();
        }
    }
    if (!cur.empty()) toks.push_back(cur);
    return toks;
}

}  // namespace

double name_affinity(const std::string& a, const std::string& b) {
    auto ta = name_tokens(a);
    auto tb = name_tokens(b);
    if (ta.empty() || tb.empty()) return 0.0;
    std::set<std::string> sa(ta.begin(), ta.end());
    std::set<std::string> sb(tb.begin(), tb.end());
    int shared = 0;
    for (const auto& t : sa)
        if (sb.count(t)) ++shared;
    double jaccard =
        static_cast<double>(shared) / static_cast<double>(sa.size() + sb.size() - shared);
    // Substring containment of whole normalized names also counts as related.
    std::string na, nb;
    for (const auto& t : ta) na += t;
    for (const auto& t : tb) nb += t;
    double contain = 0.0;
    if (na == nb)
        contain = 1.0;
    else if (na.find(nb) != std::string::npos || nb.find(na) != std::string::npos)
        contain = 0.5;
    return std::max(jaccard, contain);
}

std::string nearest_class_name(const std::string& target, const std::vector<std::string>& candidates) {
    double best = -1.0;
    std::string best_name;
    for (const auto& c : candidates) {
        double a = name_affinity(target, c);
        if (a > best) {
            best = a;
            best_name = c;
        }
    }
    return best_name;
}

DisjointReport check_disjoint(const LabeledDataset& a, const LabeledDataset& b) {
    DisjointReport rep;
    std::set<std::string> names_b(b.class_names.begin(), b.class_names.end());
    for (const auto& n : a.class_names)
        if (names_b.count(n)) rep.overlap.push_back(n);
    std::sort(rep.overlap.begin(), rep.overlap.end());
    for (const auto& na : a.class_names) {
        for (const auto& nb : b.class_names) {
            if (na == nb) continue;
            if (name_affinity(na, nb) > 0.0) {
                auto p = std::minmax(na, nb);
                rep.fuzzy_warnings.emplace_back(p.first, p.second);
            }
        }
    }
    std::sort(rep.fuzzy_warnings.begin(), rep.fuzzy_warnings.end());
    rep.fuzzy_warnings.erase(std::unique(rep.fuzzy_warnings.begin(), rep.fuzzy_warnings.end()),
                             rep.fuzzy_warnings.end());
    return rep;
}

// ----------------------------------------------------------------- binarize

BinaryOodDataset binarize_pood(const LabeledDataset& pood, const std::string& target_class_name,
                               BalancePolicy policy, double balance_k, uint64_t seed) {
    int target = pood.label_id(target_class_name);
    if (target < 0)
        throw std::runtime_error("binarize_pood: target class '" + target_class_name +
                                 "' not present in OOD class names");
    std::vector<int64_t> pos = pood.indices_of_class(target);
    if (pos.empty())
        throw std::runtime_error("binarize_pood: zero samples for target class '" +
                                 target_class_name + "'");
    std::vector<int64_t> neg;
    for (int64_t i = 0; i < pood.size(); ++i)
        if (pood.labels[static_cast<size_t>(i)] != target) neg.push_back(i);

    if (policy == BalancePolicy::downsample) {
        auto want = static_cast<int64_t>(
            std::llround(balance_k * static_cast<double>(pos.size())));
        if (want < static_cast<int64_t>(neg.size())) {
            Rng rng(seed ^ 0x62696e61ULL);
            auto pick = rng.sample_without_replacement(static_cast<int64_t>(neg.size()), want);
            std::sort(pick.begin(), pick.end());
            std::vector<int64_t> kept;
            kept.reserve(pick.size());
            for (int64_t k : pick) kept.push_back(neg[static_cast<size_t>(k)]);
            neg = std::move(kept);
        }
    }

    std::vector<int64_t> order;
    order.reserve(pos.size() + neg.size());
    order.insert(order.end(), pos.begin(), pos.end());
    order.insert(order.end(), neg.begin(), neg.end());
    std::sort(order.begin(), order.end());  // keep source ordering

    BinaryOodDataset out;
    auto chw = pood.shape_chw();
    out.images = Tensor({static_cast<int64_t>(order.size()), chw[0], chw[1], chw[2]});
    out.labels.resize(order.size());
    out.source_indices = order;
    out.source_target_class = target_class_name;
    const int64_t img_n = pood.image_numel();
    for (size_t j = 0; j < order.size(); ++j) {
        auto src = pood.image(order[j]);
        std::memcpy(out.images.data() + static_cast<int64_t>(j) * img_n, src.data(),
                    static_cast<size_t>(img_n) * sizeof(float));
        bool is_target = pood.labels[static_cast<size_t>(order[j])] == target;
        out.labels[j] = is_target ? 1 : 0;
        if (is_target)
            ++out.n_target;
        else
            ++out.n_nontarget;
    }
    return out;
}

// ----------------------------------------------------------------- augment

Tensor augment_batch(const Tensor& batch, const AugmentPolicy& policy, Rng& rng) {
    if (batch.rank() != 4) throw std::invalid_argument("augment_batch: expected {N,C,H,W}");
    Tensor out = batch;
    if (policy.identity()) return out;
    const int64_t n = batch.dim(0), c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
    const int64_t plane = h * w, img = c * plane;
    std::vector<float> tmp(static_cast<size_t>(img));
    for (int64_t i = 0; i < n; ++i) {
        float* px = out.data() + i * img;
        if (policy.random_crop) {
            const int pad = policy.crop_pad;
            // zero-pad then crop back to HxW at a random offset
            int64_t oy = rng.uniform_int(0, 2 * pad);
            int64_t ox = rng.uniform_int(0, 2 * pad);
            std::fill(tmp.begin(), tmp.end(), 0.0f);
            for (int64_t ch = 0; ch < c; ++ch) {
                for (int64_t y = 0; y < h; ++y) {
                    int64_t sy = y + oy - pad;
                    if (sy < 0 || sy >= h) continue;
                    for (int64_t x = 0; x < w; ++x) {
                        int64_t sx = x + ox - pad;
                        if (sx < 0 || sx >= w) continue;
                        tmp[static_cast<size_t>(ch * plane + y * w + x)] =
                            px[ch * plane + sy * w + sx];
                    }
                }
            }
            std::memcpy(px, tmp.data(), static_cast<size_t>(img) * sizeof(float));
        }
        if (policy.random_hflip && rng.uniform() < 0.5) {
            for (int64_t ch = 0; ch < c; ++ch)
                for (int64_t y = 0; y < h; ++y)
                    for (int64_t x = 0; x < w / 2; ++x)
                        std::swap(px[ch * plane + y * w + x], px[ch * plane + y * w + (w - 1 - x)]);
        }
    }
    return out;
}

// ----------------------------------------------------------------- resize

Tensor resize_bilinear(const Tensor& images, int64_t out_h, int64_t out_w) {
    if (images.rank() != 4) throw std::invalid_argument("resize_bilinear: expected {N,C,H,W}");
    const int64_t n = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
    if (h == out_h && w == out_w) return images;
    Tensor out({n, c, out_h, out_w});
    const double sy = static_cast<double>(h) / static_cast<double>(out_h);
    const double sx = static_cast<double>(w) / static_cast<double>(out_w);
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t ch = 0; ch < c; ++ch) {
            const float* src = images.data() + (i * c + ch) * h * w;
            float* dst = out.data() + (i * c + ch) * out_h * out_w;
            for (int64_t y = 0; y < out_h; ++y) {
                double fy = (static_cast<double>(y) + 0.5) * sy - 0.5;
                int64_t y0 = static_cast<int64_t>(std::floor(fy));
                double wy = fy - static_cast<double>(y0);
                int64_t y0c = std::clamp<int64_t>(y0, 0, h - 1);
                int64_t y1c = std::clamp<int64_t>(y0 + 1, 0, h - 1);
                for (int64_t x = 0; x < out_w; ++x) {
                    double fx = (static_cast<double>(x) + 0.5) * sx - 0.5;
                    int64_t x0 = static_cast<int64_t>(std::floor(fx));
                    double wx = fx - static_cast<double>(x0);
                    int64_t x0c = std::clamp<int64_t>(x0, 0, w - 1);
                    int64_t x1c = std::clamp<int64_t>(x0 + 1, 0, w - 1);
                    double v00 = src[y0c * w + x0c], v01 = src[y0c * w + x1c];
                    double v10 = src[y1c * w + x0c], v11 = src[y1c * w + x1c];
                    double top = v00 + (v01 - v00) * wx;
                    double bot = v10 + (v11 - v10) * wx;
                    dst[y * out_w + x] = static_cast<float>(top + (bot - top) * wy);
                }
            }
        }
    }
    return out;
}

// ----------------------------------------------------------------- archive

namespace {

void write_labels(const fs::path& p, const std::vector<int32_t>& labels) {
    std::ofstream f(p, std::ios::binary);
    if (!f) throw std::runtime_error("archive: cannot write " + p.string());
    const char magic[4] = {'D', 'F', 'B', 'L'};
    f.write(magic, 4);
    int64_t n = static_cast<int64_t>(labels.size());
    f.write(reinterpret_cast<const char*>(&n), sizeof(n));
    f.write(reinterpret_cast<const char*>(labels.data()),
            static_cast<std::streamsize>(labels.size() * sizeof(int32_t)));
}

std::vector<int32_t> read_labels(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    if (!f) throw std::runtime_error("archive: cannot read " + p.string());
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "DFBL", 4) != 0)
        throw std::runtime_error("archive: bad label file " + p.string());
    int64_t n = 0;
    f.read(reinterpret_cast<char*>(&n), sizeof(n));
    std::vector<int32_t> labels(static_cast<size_t>(n));
    f.read(reinterpret_cast<char*>(labels.data()),
           static_cast<std::streamsize>(labels.size() * sizeof(int32_t)));
    if (!f) throw std::runtime_error("archive: truncated label file " + p.string());
    return labels;
}

}  // namespace

void save_archive_split(const fs::path& dir, const LabeledDataset& ds, const std::string& split) {
    fs::create_directories(dir);
    const fs::path images_p = dir / (split + ".images.bin");
    const fs::path labels_p = dir / (split + ".labels.bin");
    save_tensor(images_p, ds.images);
    write_labels(labels_p, ds.labels);

    const fs::path manifest_p = dir / "manifest.json";
    json manifest;
    if (fs::exists(manifest_p)) manifest = load_json_file(manifest_p);
    manifest["format"] = "dfb-dataset-archive-v1";
    json& sp = manifest["splits"][split];
    sp["name"] = ds.name;
    sp["role"] = role_name(ds.role);
    sp["count"] = ds.size();
    auto hwc = ds.shape_hwc();
    sp["shape_hwc"] = {hwc[0], hwc[1], hwc[2]};
    sp["class_names"] = ds.class_names;
    sp["seed"] = ds.seed;
    sp["images_file"] = images_p.filename().string();
    sp["labels_file"] = labels_p.filename().string();
    sp["images_sha256"] = sha256_file(images_p);
    sp["labels_sha256"] = sha256_file(labels_p);
    save_json(manifest_p, manifest);
}

LabeledDataset load_archive_split(const fs::path& dir, const std::string& split) {
    json manifest = load_json_file(dir / "manifest.json");
    if (!manifest.contains("splits") || !manifest["splits"].contains(split))
        throw std::runtime_error("archive: split '" + split + "' not found in " + dir.string());
    const json& sp = manifest["splits"][split];
    const fs::path images_p = dir / sp["images_file"].get<std::string>();
    const fs::path labels_p = dir / sp["labels_file"].get<std::string>();
    if (sha256_file(images_p) != sp["images_sha256"].get<std::string>())
        throw std::runtime_error("archive: image tensor hash mismatch for split '" + split + "'");
    if (sha256_file(labels_p) != sp["labels_sha256"].get<std::string>())
        throw std::runtime_error("archive: label hash mismatch for split '" + split + "'");
    LabeledDataset ds;
    ds.images = load_tensor(images_p);
    ds.labels = read_labels(labels_p);
    ds.name = sp["name"].get<std::string>();
    ds.role = role_from_name(sp["role"].get<std::string>());
    ds.class_names = sp["class_names"].get<std::vector<std::string>>();
    ds.seed = sp["seed"].get<uint64_t>();
    ds.validate();
    return ds;
}

std::vector<std::string> archive_splits(const fs::path& dir) {
    json manifest = load_json_file(dir / "manifest.json");
    std::vector<std::string> out;
    if (manifest.contains("splits"))
        for (auto& [k, v] : manifest["splits"].items()) out.push_back(k);
    std::sort(out.begin(), out.end());
    return out;
}

std::string archive_split_hash(const fs::path& dir, const std::string& split) {
    json manifest = load_json_file(dir / "manifest.json");
    const json& sp = manifest["splits"].at(split);
    return sp["images_sha256"].get<std::string>();
}

// ----------------------------------------------------------- folder source

namespace {

LabeledDataset load_folder(const fs::path& root, const DatasetConfig& cfg, Role role) {
    if (!fs::exists(root) || !fs::is_directory(root))
        throw std::runtime_error("load_dataset: missing path " + root.string());
    std::vector<std::string> class_dirs;
    for (const auto& e : fs::directory_iterator(root))
        if (e.is_directory()) class_dirs.push_back(e.path().filename().string());
    std::sort(class_dirs.begin(), class_dirs.end());
    if (class_dirs.empty())
        throw std::runtime_error("load_dataset: no samples under " + root.string());

    int channels = 3;
    int64_t want_h = -1, want_w = -1;
    if (!cfg.shape.empty()) {
        if (cfg.shape.size() != 3)
            throw std::runtime_error("load_dataset: config shape must be (H,W,C)");
        want_h = cfg.shape[0];
        want_w = cfg.shape[1];
        channels = static_cast<int>(cfg.shape[2]);
    }

    std::vector<Tensor> imgs;
    std::vector<int32_t> labels;
    for (size_t ci = 0; ci < class_dirs.size(); ++ci) {
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(root / class_dirs[ci]))
            if (e.is_regular_file()) files.push_back(e.path());
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
            Tensor img = decode_image_file(f, channels);
            if (want_h > 0 && (img.dim(1) != want_h || img.dim(2) != want_w)) {
                img.reshape({1, img.dim(0), img.dim(1), img.dim(2)});
                img = resize_bilinear(img, want_h, want_w);
                img.reshape({img.dim(1), img.dim(2), img.dim(3)});
            }
            imgs.push_back(std::move(img));
            labels.push_back(static_cast<int32_t>(ci));
        }
    }
    if (imgs.empty()) throw std::runtime_error("load_dataset: no samples under " + root.string());
    for (const auto& t : imgs)
        if (!t.same_shape(imgs.front()))
            throw std::runtime_error(
                "load_dataset: image shape mismatch without a resize policy (saw " +
                t.shape_str() + " vs " + imgs.front().shape_str() + ")");

    LabeledDataset ds;
    ds.name = cfg.name.empty() ? root.filename().string() : cfg.name;
    ds.role = role;
    ds.seed = cfg.seed;
    ds.class_names = class_dirs;
    ds.labels = std::move(labels);
    auto& f0 = imgs.front();
    ds.images = Tensor({static_cast<int64_t>(imgs.size()), f0.dim(0), f0.dim(1), f0.dim(2)});
    const int64_t img_n = f0.numel();
    for (size_t i = 0; i < imgs.size(); ++i)
        std::memcpy(ds.images.data() + static_cast<int64_t>(i) * img_n, imgs[i].data(),
                    static_cast<size_t>(img_n) * sizeof(float));
    ds.validate();
    return ds;
}

}  // namespace

LabeledDataset load_dataset(const DatasetConfig& cfg, Role role) {
    const std::string& src = role == Role::pood ? cfg.pood_source : cfg.source;
    if (src.empty()) throw std::runtime_error("load_dataset: empty source for role " + role_name(role));
    auto colon = src.find(':');
    if (colon == std::string::npos)
        throw std::runtime_error("load_dataset: source must be '<scheme>:<spec>', got '" + src + "'");
    const std::string scheme = src.substr(0, colon);
    const std::string rest = src.substr(colon + 1);

    LabeledDataset ds;
    if (scheme == "synth") {
        SynthSpec spec = parse_synth_source(rest);
        if (!spec.seed_explicit && cfg.seed != 0) spec.seed = cfg.seed;
        ds = generate_synthetic(spec, role);
        if (!cfg.name.empty() && role != Role::pood) ds.name = cfg.name;
    } else if (scheme == "folder") {
        ds = load_folder(rest, cfg, role);
    } else if (scheme == "archive") {
        ds = load_archive_split(rest, role_name(role));
    } else {
        throw std::runtime_error("load_dataset: unknown source scheme '" + scheme + "'");
    }

    // Resize policy applies uniformly; OOD data is brought to victim shape here.
    if (!cfg.shape.empty() && cfg.shape.size() == 3) {
        if (ds.images.dim(2) != cfg.shape[0] || ds.images.dim(3) != cfg.shape[1])
            ds.images = resize_bilinear(ds.images, cfg.shape[0], cfg.shape[1]);
        clip_inplace(ds.images, 0.0f, 1.0f);
    }
    ds.validate();
    return ds;
}

}  // namespace dfb::data
