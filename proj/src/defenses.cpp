#include "dfb/defenses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace dfb::defense {

std::vector<double> anomaly_indices(const std::vector<double>& l1_norms) {
    const size_t n = l1_norms.size();
    std::vector<double> out(n, 0.0);
    if (n == 0) return out;
    std::vector<double> sorted = l1_norms;
    std::sort(sorted.begin(), sorted.end());
    const double median =
        n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
    std::vector<double> dev(n);
    for (size_t i = 0; i < n; ++i) dev[i] = std::fabs(l1_norms[i] - median);
    std::vector<double> dev_sorted = dev;
    std::sort(dev_sorted.begin(), dev_sorted.end());
    const double mad =
        n % 2 ? dev_sorted[n / 2] : 0.5 * (dev_sorted[n / 2 - 1] + dev_sorted[n / 2]);
    const double denom = std::max(1.4826 * mad, 1e-12);
    for (size_t i = 0; i < n; ++i) out[i] = dev[i] / denom;
    return out;
}

namespace {

float sigmoidf(float x) { return 1.0f / (1.0f + std::exp(-x)); }

struct NcState {
    Tensor theta_mask;     // {H,W} raw
    Tensor theta_pattern;  // {C,H,W} raw
    Tensor grad_mask, grad_pattern;
};

// One synthesized-trigger optimization toward class c.
NcClassResult optimize_class(nn::Classifier& victim, const Tensor& images, int32_t cls,
                             const NcOptions& opts) {
    const int64_t c = images.dim(1), h = images.dim(2), w = images.dim(3);
    const int64_t nimg = images.dim(0);

    NcState st;
    st.theta_mask = Tensor::full({h, w}, -4.0f);  // small initial mask
    st.theta_pattern = Tensor({c, h, w});
    st.grad_mask = Tensor({h, w});
    st.grad_pattern = Tensor({c, h, w});
    Rng rng(opts.seed + static_cast<uint64_t>(cls) * 7919u);
    for (float& v : st.theta_pattern.flat()) v = static_cast<float>(rng.gaussian() * 0.1);

    std::vector<nn::ParamRef> vars{{"mask", &st.theta_mask, &st.grad_mask, false},
                                   {"pattern", &st.theta_pattern, &st.grad_pattern, false}};
    nn::Adam adam(vars);

    victim.set_train(false);
    float lambda = opts.lambda_init;
    int success_streak = 0;

    NcClassResult res;
    res.cls = cls;

    std::vector<int64_t> order(static_cast<size_t>(nimg));
    std::iota(order.begin(), order.end(), static_cast<int64_t>(0));

    for (int step = 0; step < opts.steps; ++step) {
        if (step % std::max<int64_t>(1, nimg / opts.batch_size) == 0) rng.shuffle(order);
        const int64_t start = (static_cast<int64_t>(step) * opts.batch_size) % nimg;
        const int64_t len = std::min<int64_t>(opts.batch_size, nimg - start);
        std::span<const int64_t> idx(order.data() + start, static_cast<size_t>(len));
        Tensor batch = nn::gather_rows(images, idx);

        // Reparameterized mask/pattern in [0,1].
        Tensor m({h, w}), p({c, h, w});
        for (int64_t i = 0; i < m.numel(); ++i) m[i] = sigmoidf(st.theta_mask[i]);
        for (int64_t i = 0; i < p.numel(); ++i) p[i] = sigmoidf(st.theta_pattern[i]);

        // x' = (1-m) x + m p, mask broadcast across channels.
        Tensor xp = batch;
        for (int64_t img = 0; img < len; ++img)
            for (int64_t ch = 0; ch < c; ++ch) {
                float* dst = xp.data() + (img * c + ch) * h * w;
                const float* pp = p.data() + ch * h * w;
                for (int64_t j = 0; j < h * w; ++j)
                    dst[j] = (1.0f - m[j]) * dst[j] + m[j] * pp[j];
            }

        std::vector<int32_t> target(static_cast<size_t>(len), cls);
        Tensor logits = victim.forward(xp);
        auto ce = nn::softmax_cross_entropy(logits, target, true);
        double l1 = 0.0;
        for (int64_t i = 0; i < m.numel(); ++i) l1 += m[i];
        const double loss = ce.loss + lambda * l1;
        if (!std::isfinite(loss)) {
            res.converged = false;
            res.note = "non-finite loss at step " + std::to_string(step);
            break;
        }

        Tensor dx = victim.backward(ce.grad);

        adam.zero_grad();
        // d/dm: sum over batch and channels of dx * (p - x); plus lambda.
        for (int64_t img = 0; img < len; ++img)
            for (int64_t ch = 0; ch < c; ++ch) {
                const float* dxp = dx.data() + (img * c + ch) * h * w;
                const float* xb = batch.data() + (img * c + ch) * h * w;
                const float* pp = p.data() + ch * h * w;
                for (int64_t j = 0; j < h * w; ++j)
                    st.grad_mask[j] += dxp[j] * (pp[j] - xb[j]);
            }
        for (int64_t j = 0; j < h * w; ++j) st.grad_mask[j] += lambda;
        // d/dp: dx * m.
        for (int64_t img = 0; img < len; ++img)
            for (int64_t ch = 0; ch < c; ++ch) {
                const float* dxp = dx.data() + (img * c + ch) * h * w;
                float* gp = st.grad_pattern.data() + ch * h * w;
                for (int64_t j = 0; j < h * w; ++j) gp[j] += dxp[j] * m[j];
            }
        // Through the sigmoid reparameterization.
        for (int64_t j = 0; j < m.numel(); ++j) st.grad_mask[j] *= m[j] * (1.0f - m[j]);
        for (int64_t j = 0; j < p.numel(); ++j) st.grad_pattern[j] *= p[j] * (1.0f - p[j]);
        adam.step(opts.lr);

        // Adaptive l1 weight: grow while the synthesized trigger succeeds.
        const auto pred = nn::argmax_rows(logits);
        int64_t hit = 0;
        for (int32_t q : pred)
            if (q == cls) ++hit;
        const double rate = static_cast<double>(hit) / static_cast<double>(len);
        if (rate >= opts.attack_threshold) {
            if (++success_streak >= opts.patience) {
                lambda *= 2.0f;
                success_streak = 0;
            }
        } else {
            success_streak = 0;
            lambda = std::max(lambda / 1.5f, opts.lambda_init * 0.01f);
        }
    }

    res.mask = Tensor({h, w});
    res.pattern = Tensor({c, h, w});
    for (int64_t i = 0; i < res.mask.numel(); ++i) res.mask[i] = sigmoidf(st.theta_mask[i]);
    for (int64_t i = 0; i < res.pattern.numel(); ++i)
        res.pattern[i] = sigmoidf(st.theta_pattern[i]);
    double l1 = 0.0;
    for (int64_t i = 0; i < res.mask.numel(); ++i) l1 += res.mask[i];
    res.l1 = l1;
    return res;
}

}  // namespace

NcReport neural_cleanse(nn::Classifier& victim, const data::LabeledDataset& samples,
                        const NcOptions& opts) {
    if (samples.size() == 0) throw std::invalid_argument("neural cleanse needs samples");
    const int num_classes = static_cast<int>(victim.meta.num_outputs);

    // Seeded optimization subset shared across classes.
    Tensor images = samples.images;
    if (samples.size() > opts.max_samples) {
        Rng rng(opts.seed);
        auto picks = rng.sample_without_replacement(samples.size(), opts.max_samples);
        std::sort(picks.begin(), picks.end());
        images = nn::gather_rows(samples.images, picks);
    }

    NcReport rep;
    std::vector<double> l1s;
    for (int c = 0; c < num_classes; ++c) {
        NcClassResult r;
        try {
            r = optimize_class(victim, images, c, opts);
        } catch (const std::exception& e) {
            r.cls = c;
            r.converged = false;
            r.note = e.what();
        }
        l1s.push_back(r.l1);
        rep.classes.push_back(std::move(r));
    }
    rep.anomaly = anomaly_indices(l1s);

    std::vector<double> sorted = l1s;
    std::sort(sorted.begin(), sorted.end());
    const double median = sorted.size() % 2
                              ? sorted[sorted.size() / 2]
                              : 0.5 * (sorted[sorted.size() / 2 - 1] + sorted[sorted.size() / 2]);
    for (int c = 0; c < num_classes; ++c)
        if (rep.anomaly[static_cast<size_t>(c)] >= 2.0 && l1s[static_cast<size_t>(c)] < median)
            rep.flagged.push_back(c);
    return rep;
}

std::vector<PrunePoint> prune_defense(nn::Classifier& victim,
                                      const data::LabeledDataset& clean_subset,
                                      const data::LabeledDataset& test_set,
                                      const trigger::Trigger& trig, int32_t target_class,
                                      float amplification, const std::vector<double>& rates) {
    if (clean_subset.size() == 0) throw std::invalid_argument("pruning needs a clean subset");
    for (double r : rates)
        if (r < 0.0 || r >= 1.0) throw std::invalid_argument("prune rate must be in [0,1)");

    // Mean activation per channel of the tapped feature map over the subset.
    victim.set_train(false);
    auto mask = victim.channel_mask().mask();
    std::fill(mask.begin(), mask.end(), 1.0f);
    const int64_t channels = victim.feature_channels();
    std::vector<double> mean_act(static_cast<size_t>(channels), 0.0);
    const int64_t n = clean_subset.size();
    const int batch = 64;
    for (int64_t start = 0; start < n; start += batch) {
        const int64_t len = std::min<int64_t>(batch, n - start);
        std::vector<int64_t> idx(static_cast<size_t>(len));
        std::iota(idx.begin(), idx.end(), start);
        victim.forward(nn::gather_rows(clean_subset.images, idx));
        const Tensor& fm = victim.feature_map();  // {len, C, h, w}
        const int64_t hw = fm.dim(2) * fm.dim(3);
        for (int64_t img = 0; img < len; ++img)
            for (int64_t ch = 0; ch < channels; ++ch) {
                const float* plane = fm.data() + (img * channels + ch) * hw;
                double s = 0.0;
                for (int64_t j = 0; j < hw; ++j) s += plane[j];
                mean_act[static_cast<size_t>(ch)] += s / static_cast<double>(hw);
            }
    }
    for (double& v : mean_act) v /= static_cast<double>(n);

    // Ascending activation order; ties by channel index.
    std::vector<int64_t> order(static_cast<size_t>(channels));
    std::iota(order.begin(), order.end(), static_cast<int64_t>(0));
    std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
        return mean_act[static_cast<size_t>(a)] < mean_act[static_cast<size_t>(b)];
    });

    std::vector<PrunePoint> curve;
    for (double rate : rates) {
        std::fill(mask.begin(), mask.end(), 1.0f);
        const int64_t k = static_cast<int64_t>(std::floor(rate * static_cast<double>(channels)));
        for (int64_t i = 0; i < k; ++i) mask[static_cast<size_t>(order[static_cast<size_t>(i)])] = 0.0f;

        auto rep = eval::evaluate_attack(victim, test_set, trig, target_class, amplification);
        curve.push_back({rate, rep.acc, rep.asr});
    }
    std::fill(mask.begin(), mask.end(), 1.0f);
    return curve;
}

double prediction_entropy(std::span<const float> probs) {
    double h = 0.0;
    for (float p : probs)
        if (p > 0.0f) h -= static_cast<double>(p) * std::log(static_cast<double>(p));
    return h;
}

std::vector<double> strip_defense(nn::Classifier& victim, const Tensor& probe_inputs,
                                  const Tensor& overlay_pool, int n_perturbations,
                                  uint64_t seed) {
    if (n_perturbations < 1) throw std::invalid_argument("n_perturbations must be >= 1");
    if (overlay_pool.rank() != 4 || overlay_pool.dim(0) == 0)
        throw std::invalid_argument("overlay pool is empty");
    const int64_t n = probe_inputs.dim(0);
    const int64_t pool = overlay_pool.dim(0);
    const int64_t row = probe_inputs.numel() / std::max<int64_t>(n, 1);

    victim.set_train(false);
    Rng rng(seed);
    std::vector<double> entropies(static_cast<size_t>(n), 0.0);
    for (int64_t i = 0; i < n; ++i) {
        Tensor batch({static_cast<int64_t>(n_perturbations), probe_inputs.dim(1),
                      probe_inputs.dim(2), probe_inputs.dim(3)});
        Rng prng = rng.fork("probe" + std::to_string(i));
        for (int k = 0; k < n_perturbations; ++k) {
            const int64_t ov = prng.uniform_int(0, pool - 1);
            float* dst = batch.data() + static_cast<int64_t>(k) * row;
            const float* a = probe_inputs.data() + i * row;
            const float* b = overlay_pool.data() + ov * row;
            for (int64_t j = 0; j < row; ++j) dst[j] = 0.5f * a[j] + 0.5f * b[j];
        }
        Tensor probs = nn::softmax(nn::predict_logits(victim, batch));
        double sum = 0.0;
        for (int k = 0; k < n_perturbations; ++k)
            sum += prediction_entropy(std::span<const float>(
                probs.data() + static_cast<int64_t>(k) * victim.meta.num_outputs,
                static_cast<size_t>(victim.meta.num_outputs)));
        entropies[static_cast<size_t>(i)] = sum / static_cast<double>(n_perturbations);
    }
    return entropies;
}

Tensor sentinet_heatmap(nn::Classifier& victim, const Tensor& input, int32_t target_class) {
    if (input.rank() != 4 || input.dim(0) != 1)
        throw std::invalid_argument("heatmap expects a single {1,C,H,W} input");
    victim.set_train(false);
    Tensor logits = victim.forward(input);
    int32_t cls = target_class;
    if (cls < 0) cls = nn::argmax_rows(logits)[0];
    if (cls >= victim.meta.num_outputs) throw std::invalid_argument("heatmap class out of range");

    Tensor dlogits(logits.shape());
    dlogits[cls] = 1.0f;
    Tensor dfm = victim.grad_at_tap(dlogits);  // {1, K, h, w}
    const Tensor& fm = victim.feature_map();
    const int64_t k = fm.dim(1), h = fm.dim(2), w = fm.dim(3), hw = h * w;

    // Channel weights: spatial mean of the gradient.
    Tensor cam({1, 1, h, w});
    for (int64_t ch = 0; ch < k; ++ch) {
        const float* g = dfm.data() + ch * hw;
        double wsum = 0.0;
        for (int64_t j = 0; j < hw; ++j) wsum += g[j];
        const float weight = static_cast<float>(wsum / static_cast<double>(hw));
        const float* a = fm.data() + ch * hw;
        for (int64_t j = 0; j < hw; ++j) cam[j] += weight * a[j];
    }
    for (int64_t j = 0; j < hw; ++j) cam[j] = std::max(cam[j], 0.0f);

    Tensor up = data::resize_bilinear(cam, input.dim(2), input.dim(3));
    float lo = up[0], hi = up[0];
    for (float v : up.flat()) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    Tensor heat({input.dim(2), input.dim(3)});
    if (hi > lo) {
        for (int64_t j = 0; j < heat.numel(); ++j) heat[j] = (up[j] - lo) / (hi - lo);
    }
    return heat;
}

}  // namespace dfb::defense
