#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <vector>

#include <nlohmann/json.hpp>

#include "dfb/data.hpp"
#include "dfb/io.hpp"
#include "dfb/nn/model.hpp"
#include "dfb/nn/train.hpp"
#include "dfb/rng.hpp"

using namespace dfb;
using namespace dfb::nn;
namespace fs = std::filesystem;

namespace {

int64_t param_count(const std::vector<ParamRef>& ps) {
    int64_t n = 0;
    for (const auto& p : ps) n += p.value->numel();
    return n;
}

// Tiny classifier heads built from the production layer set, small enough
// for exhaustive finite differences in float32. The smooth (tanh) variants
// keep every coordinate differentiable within the probe step; the relu
// variant exercises the production activation under a kink filter.
Sequential binary_head_net(uint64_t seed) {
    Sequential net;
    net.add<Conv2d>(3, 4, 3, 1, 1, false);
    net.add<BatchNorm2d>(4);
    net.add<ReLU>();
    net.add<ChannelMask>(4);
    net.add<GlobalAvgPool>();
    net.add<Linear>(4, 2);
    Rng rng(seed);
    net.init(rng);
    return net;
}

Sequential smooth_binary_net(uint64_t seed) {
    Sequential net;
    net.add<Conv2d>(3, 4, 3, 1, 1, false);
    net.add<BatchNorm2d>(4);
    net.add<Tanh>();
    net.add<ChannelMask>(4);
    net.add<GlobalAvgPool>();
    net.add<Linear>(4, 2);
    Rng rng(seed);
    net.init(rng);
    return net;
}

Sequential smooth_multiclass_net(uint64_t seed) {
    Sequential net;
    net.add<Conv2d>(3, 4, 3, 1, 1, true);
    net.add<BatchNorm2d>(4);
    net.add<Tanh>();
    net.add<Conv2d>(4, 5, 3, 2, 1, true);
    net.add<BatchNorm2d>(5);
    net.add<Tanh>();
    net.add<ChannelMask>(5);
    net.add<GlobalAvgPool>();
    net.add<Linear>(5, 5);
    Rng rng(seed);
    net.init(rng);
    return net;
}

Tensor random_batch(int64_t n, int64_t hw, Rng& rng) {
    Tensor x({n, 3, hw, hw});
    for (float& v : x.flat()) v = rng.uniform();
    return x;
}

struct GradCheck {
    double max_rel = 0.0;          // over coordinates with a measurable gradient
    double worst_violation = 0.0;  // |fd - an| - (atol + rtol * scale)
    int64_t checked = 0;
    int64_t skipped = 0;  // step straddled a relu/pool kink
};

constexpr float kFdStep = 1.0f / 32.0f;
constexpr double kFdRtol = 1e-3;
constexpr double kFdAtol = 3e-5;

// Richardson-extrapolated central differences against the analytic backward.
// Where the two step sizes disagree the step crossed a kink of the piecewise
// loss surface and no finite difference is meaningful; such coordinates are
// skipped and counted. Float32 forwards leave ~1e-5 noise on the quotients,
// so near-zero gradients are judged by atol.
struct FdProbe {
    double fd = 0.0;
    bool smooth = false;
};

template <typename LossFn>
FdProbe fd_probe(float* slot, LossFn&& loss, double consistency = 1e-2) {
    const float keep = *slot;
    auto central = [&](float h) {
        *slot = keep + h;
        const double up = loss();
        *slot = keep - h;
        const double dn = loss();
        *slot = keep;
        return (up - dn) / (2.0 * static_cast<double>(h));
    };
    const double fd1 = central(kFdStep);
    const double fd2 = central(kFdStep / 2.0f);
    FdProbe out;
    out.fd = (4.0 * fd2 - fd1) / 3.0;
    out.smooth =
        std::abs(fd1 - fd2) <= kFdAtol + consistency * std::max(std::abs(fd1), std::abs(fd2));
    return out;
}

void tally(GradCheck& out, const FdProbe& probe, double an) {
    if (!probe.smooth) {
        ++out.skipped;
        return;
    }
    const double scale = std::max(std::abs(probe.fd), std::abs(an));
    const double err = std::abs(probe.fd - an);
    out.worst_violation = std::max(out.worst_violation, err - (kFdAtol + kFdRtol * scale));
    if (scale >= 3e-2) out.max_rel = std::max(out.max_rel, err / scale);
    ++out.checked;
}

GradCheck check_gradients(Sequential& net, const Tensor& x, const std::vector<int32_t>& labels,
                          double consistency = 1e-2) {
    auto params = net.params();
    for (auto& p : params) p.grad->fill(0.0f);
    Tensor logits = net.forward(x);
    auto ce = softmax_cross_entropy(logits, labels);
    net.backward(ce.grad);

    auto loss = [&]() { return softmax_cross_entropy(net.forward(x), labels, false).loss; };
    GradCheck out;
    for (auto& p : params) {
        const float* g = p.grad->data();
        for (int64_t i = 0; i < p.value->numel(); ++i)
            tally(out, fd_probe(p.value->data() + i, loss, consistency), g[i]);
    }
    return out;
}

// Single-layer check under the linear functional sum(y * r): exact for the
// piecewise-linear layers, noise-limited for the rest.
GradCheck check_layer(Layer& layer, Tensor x, int n_param, int n_input, uint64_t seed) {
    Rng rng(seed);
    Tensor y0 = layer.forward(x);
    Tensor r(y0.shape());
    for (float& v : r.flat()) v = rng.uniform(-1.0f, 1.0f);

    std::vector<ParamRef> params;
    layer.collect_params("p", params);
    for (auto& p : params) p.grad->fill(0.0f);
    layer.forward(x);
    Tensor dx = layer.backward(r);

    auto loss = [&]() {
        Tensor y = layer.forward(x);
        double s = 0.0;
        for (int64_t i = 0; i < y.numel(); ++i)
            s += static_cast<double>(y.data()[i]) * static_cast<double>(r.data()[i]);
        return s;
    };
    GradCheck gc;
    Rng pick(seed ^ 0x5bd1e995ULL);
    for (int t = 0; t < n_param && !params.empty(); ++t) {
        auto& p = params[static_cast<size_t>(pick.uniform_int(0, static_cast<int64_t>(params.size()) - 1))];
        int64_t i = pick.uniform_int(0, p.value->numel() - 1);
        tally(gc, fd_probe(p.value->data() + i, loss), p.grad->data()[i]);
    }
    for (int t = 0; t < n_input; ++t) {
        int64_t i = pick.uniform_int(0, x.numel() - 1);
        tally(gc, fd_probe(x.data() + i, loss), dx.data()[i]);
    }
    return gc;
}

void expect_clean(const GradCheck& gc) {
    CHECK(gc.worst_violation <= 0.0);
    CHECK(gc.max_rel <= 1e-3);
    CHECK(gc.skipped == 0);
}

Tensor mixed_sign_batch(std::vector<int64_t> shape, uint64_t seed, float lo, float hi) {
    Tensor x(shape);
    Rng rng(seed);
    for (int64_t i = 0; i < x.numel(); ++i) {
        float v = rng.uniform(lo, hi);
        x.data()[i] = (i % 2 == 0) ? v : -v;
    }
    return x;
}

}  // namespace

TEST_CASE("analytic gradients match central finite differences") {
    Rng rng(42);
    Tensor x = random_batch(6, 8, rng);

    SUBCASE("binary head, exhaustive") {
        Sequential net = smooth_binary_net(7);
        const int64_t n_params = param_count(net.params());
        CHECK(n_params <= 1000);
        std::vector<int32_t> labels = {0, 1, 1, 0, 1, 0};
        auto gc = check_gradients(net, x, labels);
        CHECK(gc.worst_violation <= 0.0);
        CHECK(gc.max_rel <= 1e-3);
        CHECK(gc.skipped <= 2);
        CHECK(gc.checked + gc.skipped == n_params);
    }

    SUBCASE("multiclass net with strided stage, exhaustive") {
        Sequential net = smooth_multiclass_net(9);
        const int64_t n_params = param_count(net.params());
        CHECK(n_params <= 1000);
        std::vector<int32_t> labels = {0, 1, 2, 3, 4, 2};
        auto gc = check_gradients(net, x, labels);
        CHECK(gc.worst_violation <= 0.0);
        CHECK(gc.max_rel <= 1e-3);
        CHECK(gc.skipped <= 2);
        CHECK(gc.checked + gc.skipped == n_params);
    }

    // Train-mode batchnorm couples every activation to the batch statistics,
    // so a single-coordinate probe crosses relu kinks all over the net. The
    // relu checks run in eval mode (frozen stats), which also covers the
    // eval-mode batchnorm backward used by the defenses. Coordinates whose
    // probe straddles an activation boundary are skipped by the consistency
    // filter; the rest must satisfy the combined tolerance, which allows the
    // raw ratio to exceed the rtol alone when the atol term dominates.
    SUBCASE("relu head, eval mode, kink-filtered") {
        Sequential net = binary_head_net(7);
        Rng prime(13);
        net.forward(random_batch(6, 8, prime));
        net.forward(random_batch(6, 8, prime));
        net.set_train(false);
        const int64_t n_params = param_count(net.params());
        std::vector<int32_t> labels = {0, 1, 1, 0, 1, 0};
        auto gc = check_gradients(net, x, labels, 3e-3);
        CHECK(gc.worst_violation <= 0.0);
        CHECK(gc.skipped * 5 <= n_params);
        CHECK(gc.checked + gc.skipped == n_params);
    }

    SUBCASE("input gradient") {
        Sequential net = binary_head_net(7);
        Rng prime(13);
        net.forward(random_batch(6, 8, prime));
        net.forward(random_batch(6, 8, prime));
        net.set_train(false);
        std::vector<int32_t> labels = {0, 1, 1, 0, 1, 0};
        for (auto& p : net.params()) p.grad->fill(0.0f);
        auto ce = softmax_cross_entropy(net.forward(x), labels);
        Tensor dx = net.backward(ce.grad);
        REQUIRE(dx.shape() == x.shape());
        Tensor probe = x;
        auto loss = [&]() { return softmax_cross_entropy(net.forward(probe), labels, false).loss; };
        GradCheck gc;
        Rng pick(3);
        for (int t = 0; t < 60; ++t) {
            int64_t i = pick.uniform_int(0, probe.numel() - 1);
            tally(gc, fd_probe(probe.data() + i, loss, 3e-3), dx.data()[i]);
        }
        CHECK(gc.worst_violation <= 0.0);
        CHECK(gc.max_rel <= 1e-3);
        CHECK(gc.checked >= 45);
    }
}

TEST_CASE("layer backwards match finite differences") {
    SUBCASE("conv stride 1") {
        Conv2d c(3, 4, 3, 1, 1, true);
        Rng r(1);
        c.init(r);
        expect_clean(check_layer(c, mixed_sign_batch({2, 3, 8, 8}, 11, 0.1f, 1.0f), 90, 40, 51));
    }
    SUBCASE("conv stride 2") {
        Conv2d c(3, 4, 3, 2, 1, true);
        Rng r(2);
        c.init(r);
        expect_clean(check_layer(c, mixed_sign_batch({2, 3, 8, 8}, 12, 0.1f, 1.0f), 90, 40, 52));
    }
    SUBCASE("conv 1x1 without bias") {
        Conv2d c(4, 4, 1, 1, 0, false);
        Rng r(3);
        c.init(r);
        expect_clean(check_layer(c, mixed_sign_batch({2, 4, 6, 6}, 13, 0.1f, 1.0f), 90, 40, 53));
    }
    SUBCASE("linear") {
        Linear l(12, 5);
        Rng r(4);
        l.init(r);
        expect_clean(check_layer(l, mixed_sign_batch({4, 12}, 14, 0.1f, 1.0f), 90, 40, 54));
    }
    SUBCASE("relu off the kink") {
        ReLU rl;
        expect_clean(check_layer(rl, mixed_sign_batch({2, 4, 6, 6}, 15, 0.2f, 1.0f), 0, 60, 55));
    }
    SUBCASE("maxpool with distinct window values") {
        MaxPool2d mp(2);
        Tensor x({1, 2, 4, 4});
        for (int64_t i = 0; i < x.numel(); ++i)
            x.data()[i] = static_cast<float>((i * 7) % 32) * 0.1f;
        expect_clean(check_layer(mp, x, 0, 32, 56));
    }
    SUBCASE("gap, flatten, upsample") {
        GlobalAvgPool g;
        expect_clean(check_layer(g, mixed_sign_batch({2, 4, 6, 6}, 16, 0.1f, 1.0f), 0, 40, 57));
        Flatten f;
        expect_clean(check_layer(f, mixed_sign_batch({2, 4, 3, 3}, 17, 0.1f, 1.0f), 0, 40, 58));
        UpsampleNearest2x u;
        expect_clean(check_layer(u, mixed_sign_batch({2, 3, 4, 4}, 18, 0.1f, 1.0f), 0, 40, 59));
    }
    SUBCASE("tanh pair and fractional channel mask") {
        Tanh t;
        expect_clean(check_layer(t, mixed_sign_batch({2, 4, 6, 6}, 19, 0.1f, 1.0f), 0, 60, 60));
        ScaledTanh st(0.4f);
        expect_clean(check_layer(st, mixed_sign_batch({2, 4, 6, 6}, 20, 0.1f, 1.0f), 0, 60, 61));
        ChannelMask cm(4);
        cm.mask()[1] = 0.0f;
        cm.mask()[2] = 0.5f;
        expect_clean(check_layer(cm, mixed_sign_batch({2, 4, 5, 5}, 21, 0.1f, 1.0f), 0, 60, 62));
    }
    SUBCASE("batchnorm in both modes") {
        BatchNorm2d bn(4);
        bn.set_train(true);
        expect_clean(check_layer(bn, mixed_sign_batch({3, 4, 6, 6}, 22, 0.1f, 1.0f), 60, 40, 63));
        BatchNorm2d bn2(4);
        bn2.set_train(true);
        bn2.forward(mixed_sign_batch({3, 4, 6, 6}, 23, 0.1f, 1.0f));
        bn2.set_train(false);
        expect_clean(check_layer(bn2, mixed_sign_batch({3, 4, 6, 6}, 24, 0.1f, 1.0f), 60, 40, 64));
    }
    // Residual blocks carry internal relus that make finite differences on
    // the composite uninformative, so the blocks are verified structurally:
    // compose the same computation from the individually verified primitives
    // and require outputs, input gradients and parameter gradients to agree
    // bit for bit, in both train and eval mode.
    SUBCASE("residual block wiring matches a composed reference") {
        for (auto [in_ch, out_ch, stride] :
             {std::tuple<int64_t, int64_t, int64_t>{4, 4, 1}, {4, 8, 2}}) {
            ResidualBlock rb(in_ch, out_ch, stride);
            Rng r(40 + static_cast<uint64_t>(stride));
            rb.init(r);

            Conv2d conv1(in_ch, out_ch, 3, stride, 1, false);
            Conv2d conv2(out_ch, out_ch, 3, 1, 1, false);
            BatchNorm2d bn1(out_ch), bn2(out_ch);
            ReLU relu1, relu2;
            const bool has_proj = stride != 1 || in_ch != out_ch;
            std::unique_ptr<Conv2d> proj;
            std::unique_ptr<BatchNorm2d> proj_bn;
            if (has_proj) {
                proj = std::make_unique<Conv2d>(in_ch, out_ch, 1, stride, 0, false);
                proj_bn = std::make_unique<BatchNorm2d>(out_ch);
            }

            std::vector<ParamRef> src, dst;
            rb.collect_params("p", src);
            conv1.collect_params("p.conv1", dst);
            bn1.collect_params("p.bn1", dst);
            conv2.collect_params("p.conv2", dst);
            bn2.collect_params("p.bn2", dst);
            if (has_proj) {
                proj->collect_params("p.proj", dst);
                proj_bn->collect_params("p.proj_bn", dst);
            }
            REQUIRE(src.size() == dst.size());
            auto find_src = [&](const std::string& name) -> ParamRef& {
                for (auto& p : src)
                    if (p.name == name) return p;
                REQUIRE(false);
                return src.front();
            };
            for (auto& d : dst) *d.value = *find_src(d.name).value;

            auto compare = [&]() {
                Tensor x = mixed_sign_batch({2, in_ch, 6, 6}, 27, 0.1f, 1.0f);
                Tensor y_rb = rb.forward(x);
                Tensor h = relu1.forward(bn1.forward(conv1.forward(x)));
                Tensor main = bn2.forward(conv2.forward(h));
                Tensor skip = has_proj ? proj_bn->forward(proj->forward(x)) : x;
                add_scaled_inplace(main, skip, 1.0f);
                Tensor y_ref = relu2.forward(main);
                CHECK(sha256_hex(y_rb) == sha256_hex(y_ref));

                Tensor dy(y_rb.shape());
                Rng rg(5);
                for (float& v : dy.flat()) v = rg.uniform(-1.0f, 1.0f);
                for (auto& p : src) p.grad->fill(0.0f);
                for (auto& p : dst) p.grad->fill(0.0f);
                Tensor dx_rb = rb.backward(dy);
                Tensor d = relu2.backward(dy);
                Tensor d_main = bn2.backward(d);
                Tensor dx_ref =
                    conv1.backward(bn1.backward(relu1.backward(conv2.backward(d_main))));
                if (has_proj)
                    add_scaled_inplace(dx_ref, proj->backward(proj_bn->backward(d)), 1.0f);
                else
                    add_scaled_inplace(dx_ref, d, 1.0f);
                CHECK(sha256_hex(dx_rb) == sha256_hex(dx_ref));
                for (auto& dref : dst)
                    CHECK(sha256_hex(*dref.grad) == sha256_hex(*find_src(dref.name).grad));
            };

            rb.set_train(true);
            compare();
            rb.set_train(false);
            bn1.set_train(false);
            bn2.set_train(false);
            if (proj_bn) proj_bn->set_train(false);
            compare();
        }
    }
}

TEST_CASE("encoder wiring matches a composed reference") {
    const float bound = 0.25f;
    ResidualEncoder enc({3, 8, 8}, bound, 21);

    Conv2d pre(3, 16, 3, 1, 1, false), down(16, 32, 3, 2, 1, false), mid(32, 32, 3, 1, 1, false);
    Conv2d upc(32, 16, 3, 1, 1, false), head(16, 3, 3, 1, 1, true);
    BatchNorm2d pre_bn(16), down_bn(32), mid_bn(32), up_bn(16);
    ReLU r1, r2, r3, r4;
    UpsampleNearest2x up;
    ScaledTanh out(bound);

    std::vector<ParamRef> dst;
    pre.collect_params("pre_conv", dst);
    pre_bn.collect_params("pre_bn", dst);
    down.collect_params("down_conv", dst);
    down_bn.collect_params("down_bn", dst);
    mid.collect_params("mid_conv", dst);
    mid_bn.collect_params("mid_bn", dst);
    upc.collect_params("up_conv", dst);
    up_bn.collect_params("up_bn", dst);
    head.collect_params("head_conv", dst);
    auto src = enc.params();
    REQUIRE(src.size() == dst.size());
    auto find_src = [&](const std::string& name) -> ParamRef& {
        for (auto& p : src)
            if (p.name == name) return p;
        REQUIRE(false);
        return src.front();
    };
    for (auto& d : dst) *d.value = *find_src(d.name).value;

    auto compare = [&]() {
        Rng rng(5);
        Tensor x = random_batch(2, 8, rng);
        Tensor y_enc = enc.forward(x);

        Tensor a = r1.forward(pre_bn.forward(pre.forward(x)));
        Tensor dwn = r2.forward(down_bn.forward(down.forward(a)));
        Tensor m = r3.forward(mid_bn.forward(mid.forward(dwn)));
        Tensor u = r4.forward(up_bn.forward(upc.forward(up.forward(m))));
        add_scaled_inplace(u, a, 1.0f);
        Tensor y_ref = out.forward(head.forward(u));
        CHECK(sha256_hex(y_enc) == sha256_hex(y_ref));
        CHECK(linf_norm(y_enc) <= bound);

        Tensor dy(y_enc.shape());
        for (float& v : dy.flat()) v = rng.uniform(-1.0f, 1.0f);
        for (auto& p : src) p.grad->fill(0.0f);
        for (auto& p : dst) p.grad->fill(0.0f);
        Tensor dx_enc = enc.backward(dy);

        Tensor du = head.backward(out.backward(dy));
        Tensor da = du;
        Tensor dm = up.backward(upc.backward(up_bn.backward(r4.backward(du))));
        Tensor dd = mid.backward(mid_bn.backward(r3.backward(dm)));
        Tensor da2 = down.backward(down_bn.backward(r2.backward(dd)));
        add_scaled_inplace(da, da2, 1.0f);
        Tensor dx_ref = pre.backward(pre_bn.backward(r1.backward(da)));
        CHECK(sha256_hex(dx_enc) == sha256_hex(dx_ref));
        for (auto& d : dst)
            CHECK(sha256_hex(*d.grad) == sha256_hex(*find_src(d.name).grad));
    };

    enc.set_train(true);
    compare();
    enc.set_train(false);
    for (BatchNorm2d* bn : {&pre_bn, &down_bn, &mid_bn, &up_bn}) bn->set_train(false);
    compare();
}

TEST_CASE("cross entropy analytics") {
    Tensor logits({2, 4});
    logits.fill(0.3f);  // uniform rows
    std::vector<int32_t> labels = {1, 3};
    auto ce = softmax_cross_entropy(logits, labels);
    CHECK(ce.loss == doctest::Approx(std::log(4.0)).epsilon(1e-9));

    Tensor sm = softmax(logits);
    for (int64_t rrow = 0; rrow < 2; ++rrow) {
        double s = 0.0;
        for (int64_t c = 0; c < 4; ++c) s += sm.data()[rrow * 4 + c];
        CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }

    // Analytic CE gradient is (softmax - onehot) / N.
    for (int64_t rrow = 0; rrow < 2; ++rrow)
        for (int64_t c = 0; c < 4; ++c) {
            const double want = (0.25 - (labels[static_cast<size_t>(rrow)] == c ? 1.0 : 0.0)) / 2.0;
            CHECK(ce.grad.data()[rrow * 4 + c] == doctest::Approx(want).epsilon(1e-6));
        }

    Rng rng(23);
    Tensor mixed({3, 5});
    for (float& v : mixed.flat()) v = rng.uniform(-3.0f, 3.0f);
    std::vector<int32_t> ml = {4, 0, 2};
    auto batch = softmax_cross_entropy(mixed, ml, false);
    auto per = per_sample_cross_entropy(mixed, ml);
    REQUIRE(per.size() == 3);
    CHECK(batch.loss == doctest::Approx((per[0] + per[1] + per[2]) / 3.0).epsilon(1e-9));

    auto am = argmax_rows(mixed);
    REQUIRE(am.size() == 3);
    for (int64_t rrow = 0; rrow < 3; ++rrow) {
        float best = mixed.data()[rrow * 5 + am[static_cast<size_t>(rrow)]];
        for (int64_t c = 0; c < 5; ++c) CHECK(best >= mixed.data()[rrow * 5 + c]);
    }
}

TEST_CASE("sgd momentum and weight decay semantics") {
    Tensor w({2}), g({2});
    w.data()[0] = 1.0f;
    w.data()[1] = -2.0f;
    ParamRef ref{"w", &w, &g, true};
    Sgd opt({ref}, 0.9f, 0.1f);

    g.data()[0] = 0.5f;
    g.data()[1] = 0.25f;
    opt.step(0.1f);
    // v = g + wd*w; w -= lr*v
    float v0 = 0.5f + 0.1f * 1.0f, v1 = 0.25f + 0.1f * -2.0f;
    float w0 = 1.0f - 0.1f * v0, w1 = -2.0f - 0.1f * v1;
    CHECK(w.data()[0] == doctest::Approx(w0).epsilon(1e-6));
    CHECK(w.data()[1] == doctest::Approx(w1).epsilon(1e-6));

    opt.step(0.1f);
    v0 = 0.9f * v0 + (0.5f + 0.1f * w0);
    v1 = 0.9f * v1 + (0.25f + 0.1f * w1);
    w0 -= 0.1f * v0;
    w1 -= 0.1f * v1;
    CHECK(w.data()[0] == doctest::Approx(w0).epsilon(1e-6));
    CHECK(w.data()[1] == doctest::Approx(w1).epsilon(1e-6));

    opt.zero_grad();
    CHECK(g.data()[0] == 0.0f);
    CHECK(g.data()[1] == 0.0f);

    // decay=false params see no weight decay
    Tensor w2({1}), g2({1});
    w2.data()[0] = 4.0f;
    g2.data()[0] = 0.0f;
    Sgd opt2({ParamRef{"b", &w2, &g2, false}}, 0.0f, 10.0f);
    opt2.step(1.0f);
    CHECK(w2.data()[0] == 4.0f);
}

TEST_CASE("learning rate schedules") {
    LrSchedule cst{.kind = "constant", .base_lr = 0.2f, .total_epochs = 10};
    CHECK(lr_at(cst, 0) == 0.2f);
    CHECK(lr_at(cst, 9) == 0.2f);

    LrSchedule stp{.kind = "step", .base_lr = 1.0f, .total_epochs = 6,
                   .milestones = {2, 4}, .gamma = 0.5f};
    CHECK(lr_at(stp, 0) == doctest::Approx(1.0));
    CHECK(lr_at(stp, 1) == doctest::Approx(1.0));
    CHECK(lr_at(stp, 2) == doctest::Approx(0.5));
    CHECK(lr_at(stp, 3) == doctest::Approx(0.5));
    CHECK(lr_at(stp, 4) == doctest::Approx(0.25));

    LrSchedule cos{.kind = "cosine", .base_lr = 0.1f, .total_epochs = 10};
    CHECK(lr_at(cos, 0) == doctest::Approx(0.1));
    CHECK(lr_at(cos, 5) == doctest::Approx(0.05).epsilon(1e-6));
    CHECK(lr_at(cos, 9) > 0.0f);
    for (int e = 1; e < 10; ++e) CHECK(lr_at(cos, e) < lr_at(cos, e - 1));

    CHECK_THROWS(lr_at(LrSchedule{.kind = "warmup"}, 0));
}

TEST_CASE("classifier learns separable synthetic data") {
    data::DatasetConfig cfg;
    cfg.name = "sep";
    cfg.source = "synth:kind=victim&classes=3&per_class=40&test_per_class=10&hw=16&seed=21&alpha=0.25&noise=0.01";
    cfg.shape = {16, 16, 3};
    auto train = data::load_dataset(cfg, data::Role::victim_train);
    auto test = data::load_dataset(cfg, data::Role::victim_test);

    Hyper hyper;
    hyper.epochs = 10;
    hyper.batch_size = 32;
    hyper.lr = 0.05f;
    hyper.seed = 2;

    auto log_path = fs::temp_directory_path() / "dfb-nn-victim.jsonl";
    fs::remove(log_path);
    TrainResult result;
    auto model = train_victim(train, "small-cnn", train.num_classes(), hyper, &result, log_path);
    CHECK(result.log.size() == 10);
    CHECK(result.final_train_acc >= 0.95);
    CHECK(accuracy(*model, test.images, test.labels) >= 0.9);

    // Epoch log is line-delimited json tracking the cosine schedule.
    std::stringstream ss(read_text_file(log_path));
    std::string line;
    int rows = 0;
    LrSchedule sched{.kind = hyper.schedule, .base_lr = hyper.lr, .total_epochs = hyper.epochs,
                     .milestones = hyper.milestones, .gamma = hyper.gamma};
    while (std::getline(ss, line)) {
        if (line.empty()) continue;
        json rec = json::parse(line);
        CHECK(rec["epoch"].get<int>() == rows);
        CHECK(rec["lr"].get<float>() == doctest::Approx(lr_at(sched, rows)).epsilon(1e-6));
        ++rows;
    }
    CHECK(rows == 10);

    // Batch split must not change predictions (float summation order may).
    Tensor a = predict_logits(*model, test.images, 7);
    Tensor b = predict_logits(*model, test.images, 128);
    CHECK(a.shape() == b.shape());
    CHECK(max_abs_diff(a, b) <= 2e-5f);
    CHECK(argmax_rows(a) == argmax_rows(b));
}

TEST_CASE("binary decoder trains on binarized surrogate data") {
    data::DatasetConfig cfg;
    cfg.name = "sur";
    cfg.source = "synth:kind=victim&classes=3&per_class=20&hw=16&seed=31";
    cfg.pood_source = "synth:kind=pood&classes=4&per_class=40&hw=16&seed=32&alpha=0.25&noise=0.01&cousin_of=rings";
    cfg.shape = {16, 16, 3};
    auto pood = data::load_dataset(cfg, data::Role::pood);
    auto bin = data::binarize_pood(pood, "wild rings", data::BalancePolicy::downsample, 1.0, 3);

    Hyper hyper;
    hyper.epochs = 8;
    hyper.batch_size = 16;
    hyper.lr = 0.05f;
    hyper.seed = 5;
    auto out = train_decoder(bin, "small-cnn", hyper);
    REQUIRE(out.model != nullptr);
    CHECK(out.model->meta.num_outputs == 2);
    CHECK(out.result.log.size() == 8);
    CHECK(out.result.final_val_acc >= 0.0);
    CHECK(out.result.final_val_acc <= 1.0);
    CHECK(out.result.log.back().val_loss >= 0.0);
    CHECK(out.result.final_train_acc >= 0.9);
}

TEST_CASE("checkpoints round trip bitwise") {
    auto dir = fs::temp_directory_path() / "dfb-nn-ckpt";
    fs::create_directories(dir);
    Rng rng(77);
    Tensor x = random_batch(4, 16, rng);

    SUBCASE("classifier") {
        data::DatasetConfig cfg;
        cfg.name = "ck";
        cfg.source = "synth:kind=victim&classes=3&per_class=20&hw=16&seed=41";
        cfg.shape = {16, 16, 3};
        auto train = data::load_dataset(cfg, data::Role::victim_train);
        Hyper hyper;
        hyper.epochs = 1;
        hyper.batch_size = 16;
        hyper.seed = 6;
        auto model = train_victim(train, "small-cnn", 3, hyper);
        model->channel_mask().mask()[1] = 0.0f;  // mask state persists too

        Tensor before = predict_logits(*model, x);
        save_classifier(dir / "clf.ckpt", *model);
        auto loaded = load_classifier(dir / "clf.ckpt");
        Tensor after = predict_logits(*loaded, x);
        CHECK(sha256_hex(before) == sha256_hex(after));
        CHECK(loaded->meta.arch == "small-cnn");
        CHECK(loaded->meta.num_outputs == 3);
        CHECK(loaded->channel_mask().mask()[1] == 0.0f);
    }

    SUBCASE("encoder") {
        ResidualEncoder enc({3, 16, 16}, 8.0f / 255.0f, 13);
        enc.set_train(true);
        enc.forward(x);  // move the norm running statistics off their init
        enc.set_train(false);
        Tensor before = forward_encoder(enc, x);
        save_encoder(dir / "enc.ckpt", enc);
        auto loaded = load_encoder(dir / "enc.ckpt");
        Tensor after = forward_encoder(*loaded, x);
        CHECK(sha256_hex(before) == sha256_hex(after));
        CHECK(loaded->bound() == doctest::Approx(8.0f / 255.0f));
        CHECK(loaded->meta.input_chw == std::vector<int64_t>{3, 16, 16});
    }

    SUBCASE("truncated checkpoint is rejected") {
        ResidualEncoder enc({3, 16, 16}, 8.0f / 255.0f, 13);
        save_encoder(dir / "bad.ckpt", enc);
        auto bytes = read_text_file(dir / "bad.ckpt");
        write_text_file(dir / "bad.ckpt", bytes.substr(0, bytes.size() / 2));
        CHECK_THROWS(load_encoder(dir / "bad.ckpt"));
    }
}

TEST_CASE("encoder output is architecturally bounded") {
    Rng rng(3);
    Tensor x = random_batch(3, 8, rng);
    for (float bound : {0.0f, 8.0f / 255.0f, 0.3f}) {
        ResidualEncoder enc({3, 8, 8}, bound, 19);
        Tensor y = forward_encoder(enc, x);
        CHECK(y.shape() == x.shape());
        CHECK(linf_norm(y) <= bound);
        if (bound == 0.0f)
            for (float v : y.flat()) CHECK(v == 0.0f);
    }
    CHECK_THROWS(ResidualEncoder({3, 9, 9}, 0.1f, 1));
    CHECK_THROWS(ResidualEncoder({3, 8, 8}, -0.1f, 1));
}

TEST_CASE("gather rows copies the selected images") {
    Rng rng(8);
    Tensor x = random_batch(5, 8, rng);
    std::vector<int64_t> idx = {4, 0, 2};
    Tensor g = gather_rows(x, idx);
    REQUIRE(g.dim(0) == 3);
    for (size_t k = 0; k < idx.size(); ++k)
        for (int64_t i = 0; i < 3 * 8 * 8; ++i)
            CHECK(g.data()[static_cast<int64_t>(k) * 192 + i] == x.data()[idx[k] * 192 + i]);
}
