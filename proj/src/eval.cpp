#include "dfb/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include <nlohmann/json.hpp>

namespace dfb::eval {

json MetricsReport::to_json() const {
    json j;
    j["acc"] = acc;
    j["tar_acc"] = tar_acc;
    j["asr"] = asr;
    j["config_hash"] = config_hash;
    j["seed"] = seed;
    j["n_test"] = n_test;
    j["n_target_test"] = n_target_test;
    j["n_nontarget_test"] = n_nontarget_test;
    return j;
}

MetricsReport MetricsReport::from_json(const json& j) {
    MetricsReport r;
    r.acc = j.at("acc").get<double>();
    r.tar_acc = j.at("tar_acc").get<double>();
    r.asr = j.at("asr").get<double>();
    r.config_hash = j.value("config_hash", "");
    r.seed = j.value("seed", uint64_t{0});
    r.n_test = j.value("n_test", int64_t{0});
    r.n_target_test = j.value("n_target_test", int64_t{0});
    r.n_nontarget_test = j.value("n_nontarget_test", int64_t{0});
    return r;
}

double clean_accuracy(nn::Classifier& victim, const data::LabeledDataset& clean_test) {
    return nn::accuracy(victim, clean_test.images, clean_test.labels) * 100.0;
}

MetricsReport evaluate_attack(nn::Classifier& victim, const data::LabeledDataset& clean_test,
                              const trigger::Trigger& trig, int32_t target_class,
                              float amplification) {
    const int64_t n = clean_test.size();
    if (n == 0) throw std::invalid_argument("empty test set");

    MetricsReport rep;
    rep.n_test = n;

    const Tensor logits = nn::predict_logits(victim, clean_test.images);
    const auto pred = nn::argmax_rows(logits);
    int64_t hits = 0, tar_hits = 0, n_target = 0;
    for (int64_t i = 0; i < n; ++i) {
        const int32_t y = clean_test.labels[static_cast<size_t>(i)];
        const bool hit = pred[static_cast<size_t>(i)] == y;
        hits += hit;
        if (y == target_class) {
            ++n_target;
            tar_hits += hit;
        }
    }
    if (n_target == 0) throw std::invalid_argument("test set has no target-class samples");
    rep.n_target_test = n_target;
    rep.n_nontarget_test = n - n_target;
    rep.acc = 100.0 * static_cast<double>(hits) / static_cast<double>(n);
    rep.tar_acc = 100.0 * static_cast<double>(tar_hits) / static_cast<double>(n_target);

    // ASR over non-target samples only.
    std::vector<int64_t> nt_idx;
    nt_idx.reserve(static_cast<size_t>(n - n_target));
    for (int64_t i = 0; i < n; ++i)
        if (clean_test.labels[static_cast<size_t>(i)] != target_class) nt_idx.push_back(i);
    Tensor nt_images = nn::gather_rows(clean_test.images, nt_idx);
    Tensor triggered = poison::apply_test_trigger(nt_images, trig, amplification);
    const auto tpred = nn::argmax_rows(nn::predict_logits(victim, triggered));
    int64_t fooled = 0;
    for (int32_t p : tpred)
        if (p == target_class) ++fooled;
    rep.asr = 100.0 * static_cast<double>(fooled) / static_cast<double>(nt_idx.size());
    return rep;
}

Tensor apply_baseline(const Tensor& images, const BaselineSpec& spec) {
    const int64_t n = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
    Tensor out = images;
    if (spec.kind == "badnets_patch") {
        const int64_t k = spec.patch_size;
        if (k <= 0 || k > h || k > w)
            throw std::invalid_argument("patch exceeds image bounds");
        int64_t y0, x0;
        if (spec.position == "bottom_right") {
            y0 = h - k;
            x0 = w - k;
        } else if (spec.position == "top_left") {
            y0 = 0;
            x0 = 0;
        } else {
            throw std::invalid_argument("unknown patch position: " + spec.position);
        }
        for (int64_t i = 0; i < n; ++i)
            for (int64_t ch = 0; ch < c; ++ch) {
                float* plane = out.data() + (i * c + ch) * h * w;
                for (int64_t y = y0; y < y0 + k; ++y)
                    for (int64_t x = x0; x < x0 + k; ++x) plane[y * w + x] = spec.patch_value;
            }
    } else if (spec.kind == "blend_image") {
        if (spec.alpha < 0.0f || spec.alpha > 1.0f)
            throw std::invalid_argument("blend alpha must be in [0,1]");
        if (spec.blend_image.numel() != c * h * w)
            throw std::invalid_argument("blend image shape mismatch");
        const float a = spec.alpha;
        const int64_t row = c * h * w;
        for (int64_t i = 0; i < n; ++i) {
            float* dst = out.data() + i * row;
            for (int64_t j = 0; j < row; ++j)
                dst[j] = (1.0f - a) * dst[j] + a * spec.blend_image[j];
        }
    } else {
        throw std::invalid_argument("unknown baseline kind: " + spec.kind);
    }
    return out;
}

data::LabeledDataset inject_baseline(const data::LabeledDataset& base, const BaselineSpec& spec,
                                     int32_t target_class, double ratio, uint64_t seed,
                                     std::vector<int64_t>* out_indices) {
    const int64_t n = base.size();
    if (ratio < 0.0) throw std::invalid_argument("ratio must be non-negative");
    const int64_t count = std::llround(ratio * static_cast<double>(n));

    std::vector<int64_t> pool;
    if (spec.label_policy == "clean") {
        for (int64_t i = 0; i < n; ++i)
            if (base.labels[static_cast<size_t>(i)] == target_class) pool.push_back(i);
    } else if (spec.label_policy == "dirty") {
        for (int64_t i = 0; i < n; ++i)
            if (base.labels[static_cast<size_t>(i)] != target_class) pool.push_back(i);
    } else {
        throw std::invalid_argument("unknown label policy: " + spec.label_policy);
    }
    if (count > static_cast<int64_t>(pool.size()))
        throw std::invalid_argument("not enough samples for baseline injection");

    Rng rng(seed);
    auto picks = rng.sample_without_replacement(static_cast<int64_t>(pool.size()), count);
    std::vector<int64_t> chosen;
    chosen.reserve(picks.size());
    for (int64_t p : picks) chosen.push_back(pool[static_cast<size_t>(p)]);
    std::sort(chosen.begin(), chosen.end());

    data::LabeledDataset out = base;
    const int64_t row = n > 0 ? base.images.numel() / n : 0;
    if (!chosen.empty()) {
        Tensor rows = nn::gather_rows(base.images, chosen);
        Tensor patched = apply_baseline(rows, spec);
        for (size_t i = 0; i < chosen.size(); ++i) {
            std::memcpy(out.images.data() + chosen[i] * row,
                        patched.data() + static_cast<int64_t>(i) * row,
                        static_cast<size_t>(row) * sizeof(float));
            if (spec.label_policy == "dirty")
                out.labels[static_cast<size_t>(chosen[i])] = target_class;
        }
    }
    if (out_indices) *out_indices = chosen;
    return out;
}

std::vector<TriggerQualityCell> trigger_quality_eval(nn::Classifier& clean_model,
                                                     const data::LabeledDataset& train_set,
                                                     const std::vector<StudyTrigger>& triggers,
                                                     const std::vector<int32_t>& classes,
                                                     int runs, int64_t samples_per_run,
                                                     uint64_t seed) {
    if (runs < 1) throw std::invalid_argument("runs must be >= 1");
    const int64_t n = train_set.size();

    // Per-class index pools.
    std::vector<std::vector<int64_t>> by_class(train_set.class_names.size());
    for (int64_t i = 0; i < n; ++i)
        by_class[static_cast<size_t>(train_set.labels[static_cast<size_t>(i)])].push_back(i);

    // Draws are fixed per (class, run) and shared across triggers.
    std::vector<std::vector<std::vector<int64_t>>> draws(classes.size());
    Rng rng(seed);
    for (size_t ci = 0; ci < classes.size(); ++ci) {
        const auto& pool = by_class.at(static_cast<size_t>(classes[ci]));
        if (pool.empty())
            throw std::invalid_argument("class " + std::to_string(classes[ci]) +
                                        " absent from train set");
        draws[ci].resize(static_cast<size_t>(runs));
        for (int r = 0; r < runs; ++r) {
            Rng drng = rng.fork("draw-c" + std::to_string(classes[ci]) + "-r" + std::to_string(r));
            const int64_t k = std::min<int64_t>(samples_per_run, static_cast<int64_t>(pool.size()));
            auto picks = drng.sample_without_replacement(static_cast<int64_t>(pool.size()), k);
            for (int64_t p : picks) draws[ci][static_cast<size_t>(r)].push_back(pool[static_cast<size_t>(p)]);
        }
    }

    std::vector<TriggerQualityCell> cells;
    for (const auto& trig : triggers) {
        for (size_t ci = 0; ci < classes.size(); ++ci) {
            double ce_sum = 0.0;
            for (int r = 0; r < runs; ++r) {
                const auto& idx = draws[ci][static_cast<size_t>(r)];
                Tensor x = nn::gather_rows(train_set.images, idx);
                Tensor xt = trig.apply(x);
                std::vector<int32_t> y(idx.size(), classes[ci]);
                Tensor logits = nn::predict_logits(clean_model, xt);
                ce_sum += nn::softmax_cross_entropy(logits, y, false).loss;
            }
            TriggerQualityCell cell;
            cell.trigger_name = trig.name;
            cell.cls = classes[ci];
            cell.ce = ce_sum / static_cast<double>(runs);
            cells.push_back(cell);
        }
    }
    return cells;
}

}  // namespace dfb::eval
