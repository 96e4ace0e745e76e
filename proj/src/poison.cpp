#include "dfb/poison.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include <nlohmann/json.hpp>

#include "dfb/nn/train.hpp"

namespace dfb::poison {

json PoisonPlan::to_json() const {
    json j;
    j["target_class"] = target_class;
    j["ratio"] = ratio;
    j["seed"] = seed;
    j["indices"] = indices;
    j["eps_poison"] = eps_poison;
    j["trigger_mode"] = trigger_mode;
    return j;
}

PoisonPlan PoisonPlan::from_json(const json& j) {
    PoisonPlan p;
    p.target_class = j.at("target_class").get<int32_t>();
    p.ratio = j.at("ratio").get<double>();
    p.seed = j.at("seed").get<uint64_t>();
    p.indices = j.at("indices").get<std::vector<int64_t>>();
    p.eps_poison = j.at("eps_poison").get<float>();
    p.trigger_mode = j.value("trigger_mode", "");
    return p;
}

PoisonPlan plan_poison(const data::LabeledDataset& train, int32_t target_class, double ratio,
                       uint64_t seed, float eps_poison, const std::string& trigger_mode) {
    const int64_t n = train.size();
    if (ratio < 0.0) throw std::invalid_argument("poison ratio must be non-negative");
    if (target_class < 0 || static_cast<size_t>(target_class) >= train.class_names.size())
        throw std::invalid_argument("target class out of range");

    std::vector<int64_t> target_idx;
    for (int64_t i = 0; i < n; ++i)
        if (train.labels[static_cast<size_t>(i)] == target_class) target_idx.push_back(i);

    const int64_t count = std::llround(ratio * static_cast<double>(n));
    if (count > static_cast<int64_t>(target_idx.size()))
        throw std::invalid_argument(
            "poison ratio " + std::to_string(ratio) + " requires " + std::to_string(count) +
            " target-class samples but only " + std::to_string(target_idx.size()) + " exist");

    PoisonPlan plan;
    plan.target_class = target_class;
    plan.ratio = ratio;
    plan.seed = seed;
    plan.eps_poison = eps_poison;
    plan.trigger_mode = trigger_mode;
    if (count > 0) {
        Rng rng(seed);
        auto picks = rng.sample_without_replacement(static_cast<int64_t>(target_idx.size()), count);
        plan.indices.reserve(picks.size());
        for (int64_t p : picks) plan.indices.push_back(target_idx[static_cast<size_t>(p)]);
        std::sort(plan.indices.begin(), plan.indices.end());
    }
    return plan;
}

namespace {

// Perturbation for one planned sample in pixel space, already scaled and
// l-inf clipped; pixel-range clipping happens at application.
Tensor planned_delta(const trigger::Trigger& trig, const Tensor& image_row, float scale,
                     float eps_poison) {
    Tensor delta;
    if (trig.mode == "fixed") {
        delta = trig.residual;
        delta.reshape(image_row.shape());
    } else if (trig.mode == "dynamic") {
        if (!trig.encoder) throw std::invalid_argument("dynamic trigger has no encoder loaded");
        delta = trig.encoder->forward(image_row);
    } else {
        throw std::invalid_argument("unknown trigger mode: " + trig.mode);
    }
    scale_inplace(delta, scale);
    clip_linf_inplace(delta, eps_poison);
    return delta;
}

}  // namespace

PoisonedDataset inject(const data::LabeledDataset& base, const PoisonPlan& plan,
                       const trigger::Trigger& trig, float scale) {
    const int64_t n = base.size();
    const int64_t row = n > 0 ? base.images.numel() / n : 0;
    if (trig.mode == "fixed") {
        if (trig.residual.numel() != row)
            throw std::invalid_argument("trigger shape does not match images");
    }
    if (trig.encoder) trig.encoder->set_train(false);

    PoisonedDataset out;
    out.data = base;
    out.plan = plan;
    out.base_hash = sha256_hex(base.images);

    std::vector<int64_t> shape = base.images.shape();
    shape[0] = 1;
    for (int64_t idx : plan.indices) {
        if (idx < 0 || idx >= n) throw std::invalid_argument("plan index out of range");
        Tensor xi(shape);
        std::memcpy(xi.data(), base.images.data() + idx * row,
                    static_cast<size_t>(row) * sizeof(float));
        Tensor delta = planned_delta(trig, xi, scale, plan.eps_poison);

        float* dst = out.data.images.data() + idx * row;
        const float* src = base.images.data() + idx * row;
        float linf = 0.0f;
        for (int64_t j = 0; j < row; ++j) {
            float v = src[j] + delta[j];
            v = std::min(std::max(v, 0.0f), 1.0f);
            // The addition rounds in the pixel's binade and may land a quantum
            // past the budget; the stored image must honor it exactly.
            while (std::fabs(static_cast<double>(v) - static_cast<double>(src[j])) >
                   static_cast<double>(plan.eps_poison))
                v = std::nextafterf(v, src[j]);
            dst[j] = v;
            linf = std::max(linf, std::fabs(v - src[j]));
        }
        out.audit.push_back({idx, linf});
    }
    return out;
}

Tensor apply_test_trigger(const Tensor& images, const trigger::Trigger& trig,
                          float amplification) {
    if (amplification <= 0.0f) throw std::invalid_argument("amplification must be positive");
    const int64_t n = images.dim(0);
    const int64_t row = n > 0 ? images.numel() / n : 0;
    Tensor out = images;
    if (trig.mode == "fixed") {
        if (trig.residual.numel() != row)
            throw std::invalid_argument("trigger shape does not match images");
        for (int64_t i = 0; i < n; ++i) {
            float* dst = out.data() + i * row;
            for (int64_t j = 0; j < row; ++j) {
                float v = dst[j] + amplification * trig.residual[j];
                dst[j] = std::min(std::max(v, 0.0f), 1.0f);
            }
        }
    } else if (trig.mode == "dynamic") {
        if (!trig.encoder) throw std::invalid_argument("dynamic trigger has no encoder loaded");
        Tensor delta = nn::forward_encoder(*trig.encoder, images);
        for (int64_t i = 0; i < out.numel(); ++i) {
            float v = out[i] + amplification * delta[i];
            out[i] = std::min(std::max(v, 0.0f), 1.0f);
        }
    } else {
        throw std::invalid_argument("unknown trigger mode: " + trig.mode);
    }
    return out;
}

void save_poisoned_archive(const std::filesystem::path& dir, const PoisonedDataset& pd) {
    std::filesystem::create_directories(dir);
    const int64_t n = pd.data.size();
    const int64_t row = n > 0 ? pd.data.images.numel() / n : 0;

    Tensor deltas({static_cast<int64_t>(pd.plan.indices.size()), row});
    for (size_t i = 0; i < pd.plan.indices.size(); ++i) {
        const int64_t idx = pd.plan.indices[i];
        for (int64_t j = 0; j < row; ++j)
            deltas[static_cast<int64_t>(i) * row + j] =
                pd.data.images[idx * row + j];  // poisoned rows verbatim
    }
    save_tensor(dir / "poisoned_rows.dfbt", deltas);

    json manifest;
    manifest["format"] = "dfb-poisoned-1";
    manifest["base_hash"] = pd.base_hash;
    manifest["plan"] = pd.plan.to_json();
    json audit = json::array();
    for (const auto& a : pd.audit) audit.push_back({{"index", a.index}, {"linf", a.linf}});
    manifest["audit"] = audit;
    manifest["rows_hash"] = sha256_file(dir / "poisoned_rows.dfbt");
    save_json(dir / "manifest.json", manifest);
}

PoisonedDataset load_poisoned_archive(const std::filesystem::path& dir,
                                      const data::LabeledDataset& base) {
    json manifest = load_json_file(dir / "manifest.json");
    if (manifest.value("format", "") != "dfb-poisoned-1")
        throw std::runtime_error("not a poisoned archive: " + dir.string());
    const std::string base_hash = sha256_hex(base.images);
    if (manifest.at("base_hash").get<std::string>() != base_hash)
        throw std::runtime_error("poisoned archive base mismatch (stale base dataset?)");
    const std::string rows_hash = sha256_file(dir / "poisoned_rows.dfbt");
    if (manifest.at("rows_hash").get<std::string>() != rows_hash)
        throw std::runtime_error("poisoned archive rows corrupted: " + dir.string());

    PoisonedDataset pd;
    pd.data = base;
    pd.plan = PoisonPlan::from_json(manifest.at("plan"));
    pd.base_hash = base_hash;
    for (const auto& a : manifest.at("audit"))
        pd.audit.push_back({a.at("index").get<int64_t>(), a.at("linf").get<float>()});

    Tensor rows = load_tensor(dir / "poisoned_rows.dfbt");
    const int64_t n = base.size();
    const int64_t row = n > 0 ? base.images.numel() / n : 0;
    if (rows.dim(0) != static_cast<int64_t>(pd.plan.indices.size()) ||
        (rows.dim(0) > 0 && rows.dim(1) != row))
        throw std::runtime_error("poisoned archive row shape mismatch");
    for (size_t i = 0; i < pd.plan.indices.size(); ++i) {
        const int64_t idx = pd.plan.indices[i];
        if (idx < 0 || idx >= n) throw std::runtime_error("poisoned archive index out of range");
        std::memcpy(pd.data.images.data() + idx * row,
                    rows.data() + static_cast<int64_t>(i) * row,
                    static_cast<size_t>(row) * sizeof(float));
    }
    return pd;
}

}  // namespace dfb::poison
