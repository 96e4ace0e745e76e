#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <memory>
#include <set>
#include <vector>

#include <nlohmann/json.hpp>

#include "dfb/io.hpp"
#include "dfb/nn/model.hpp"
#include "dfb/nn/train.hpp"
#include "dfb/poison.hpp"
#include "dfb/rng.hpp"
#include "dfb/trigger.hpp"

using namespace dfb;
using namespace dfb::poison;
namespace fs = std::filesystem;

namespace {

constexpr float kEpsGen = 8.0f / 255.0f;
constexpr float kEpsPoison = 16.0f / 255.0f;

// A saturated perturbation may sit up to one pixel quantum short of the
// budget once the stored sum is rounded and walked back inside it.
constexpr float kPixelQuantum = 1.2e-7f;

fs::path tmpdir(const char* tag) {
    fs::path p = fs::temp_directory_path() / (std::string("dfb-poison-") + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

data::LabeledDataset make_base(int64_t n, int64_t hw, int classes, uint64_t seed) {
    data::LabeledDataset d;
    d.name = "base";
    d.images = Tensor({n, 3, hw, hw});
    Rng rng(seed);
    for (float& v : d.images.flat()) v = rng.uniform(0.0f, 1.0f);
    d.labels.resize(static_cast<size_t>(n));
    for (auto& l : d.labels) l = static_cast<int32_t>(rng.uniform_int(0, classes - 1));
    for (int c = 0; c < classes; ++c) d.class_names.push_back("class" + std::to_string(c));
    return d;
}

trigger::Trigger fixed_trigger(int64_t hw, uint64_t seed, float mag = kEpsGen) {
    trigger::Trigger t;
    t.mode = "fixed";
    t.eps_gen = kEpsGen;
    t.residual = Tensor({3, hw, hw});
    Rng rng(seed);
    for (float& v : t.residual.flat()) v = rng.uniform(-mag, mag);
    return t;
}

}  // namespace

TEST_CASE("injection keeps labels clean across randomized plans and triggers") {
    const int64_t n = 1000, hw = 8;
    const int classes = 5;
    auto base = make_base(n, hw, classes, 42);
    const int64_t row = base.image_numel();
    const std::string base_sha = sha256_hex(base.images);

    auto dyn_encoder = std::make_shared<nn::ResidualEncoder>(std::vector<int64_t>{3, hw, hw},
                                                             kEpsGen, 77);
    Rng pairs(7);
    for (int trial = 0; trial < 100; ++trial) {
        const auto target = static_cast<int32_t>(pairs.uniform_int(0, classes - 1));
        const double ratio = static_cast<double>(pairs.uniform_int(0, 40)) / 1000.0;
        const uint64_t seed = pairs.uniform_int(1, 1'000'000);
        const bool dynamic = trial % 4 == 3;

        trigger::Trigger trig = dynamic ? trigger::make_dynamic_trigger(dyn_encoder)
                                        : fixed_trigger(hw, seed ^ 0xabcdULL);
        PoisonPlan plan = plan_poison(base, target, ratio, seed, kEpsPoison,
                                      dynamic ? "dynamic" : "fixed");
        CHECK(static_cast<int64_t>(plan.indices.size()) ==
              std::llround(ratio * static_cast<double>(n)));
        CHECK(std::is_sorted(plan.indices.begin(), plan.indices.end()));
        CHECK(std::adjacent_find(plan.indices.begin(), plan.indices.end()) ==
              plan.indices.end());

        PoisonedDataset pd = inject(base, plan, trig, 2.0f);

        // Labels never move: that is the clean-label contract.
        CHECK(pd.data.labels == base.labels);
        CHECK(pd.base_hash == base_sha);
        std::set<int64_t> planned(plan.indices.begin(), plan.indices.end());
        for (int64_t idx : plan.indices)
            CHECK(base.labels[static_cast<size_t>(idx)] == target);

        // Unplanned rows are byte-identical; planned rows stay in budget.
        for (int64_t i = 0; i < n; ++i) {
            const float* a = base.images.data() + i * row;
            const float* b = pd.data.images.data() + i * row;
            if (!planned.count(i)) {
                CHECK(std::memcmp(a, b, static_cast<size_t>(row) * sizeof(float)) == 0);
            } else {
                float linf = 0.0f;
                for (int64_t j = 0; j < row; ++j) {
                    linf = std::max(linf, std::fabs(b[j] - a[j]));
                    CHECK(b[j] >= 0.0f);
                    CHECK(b[j] <= 1.0f);
                }
                CHECK(linf <= kEpsPoison);
            }
        }

        REQUIRE(pd.audit.size() == plan.indices.size());
        for (size_t k = 0; k < pd.audit.size(); ++k) {
            CHECK(pd.audit[k].index == plan.indices[k]);
            CHECK(pd.audit[k].linf <= kEpsPoison);
        }
    }
}

TEST_CASE("plan arithmetic follows round(ratio * full set)") {
    auto base = make_base(1000, 6, 4, 11);

    const std::vector<std::pair<double, int64_t>> cases = {
        {0.0, 0}, {0.001, 1}, {0.0005, 1}, {0.0004, 0}, {0.01, 10}, {0.1, 100}, {0.123, 123}};
    for (auto [ratio, expect] : cases) {
        PoisonPlan plan = plan_poison(base, 0, ratio, 3, kEpsPoison, "fixed");
        CHECK(static_cast<int64_t>(plan.indices.size()) == expect);
        for (int64_t idx : plan.indices) CHECK(base.labels[static_cast<size_t>(idx)] == 0);
    }

    // Selection is a seeded choice among the target rows only.
    PoisonPlan a = plan_poison(base, 2, 0.05, 9, kEpsPoison, "fixed");
    PoisonPlan b = plan_poison(base, 2, 0.05, 9, kEpsPoison, "fixed");
    PoisonPlan c = plan_poison(base, 2, 0.05, 10, kEpsPoison, "fixed");
    CHECK(a.indices == b.indices);
    CHECK(a.indices != c.indices);

    json j = a.to_json();
    PoisonPlan back = PoisonPlan::from_json(j);
    CHECK(back.target_class == a.target_class);
    CHECK(back.ratio == a.ratio);
    CHECK(back.seed == a.seed);
    CHECK(back.indices == a.indices);
    CHECK(back.eps_poison == a.eps_poison);
    CHECK(back.trigger_mode == a.trigger_mode);

    CHECK_THROWS_AS(plan_poison(base, 0, -0.1, 1, kEpsPoison, "fixed"), std::invalid_argument);
    CHECK_THROWS_AS(plan_poison(base, -1, 0.01, 1, kEpsPoison, "fixed"), std::invalid_argument);
    CHECK_THROWS_AS(plan_poison(base, 4, 0.01, 1, kEpsPoison, "fixed"), std::invalid_argument);
    // More poison than the target class can supply.
    CHECK_THROWS_AS(plan_poison(base, 0, 0.9, 1, kEpsPoison, "fixed"), std::invalid_argument);
}

TEST_CASE("ratio zero leaves the dataset untouched") {
    auto base = make_base(60, 8, 3, 21);
    PoisonPlan plan = plan_poison(base, 1, 0.0, 5, kEpsPoison, "fixed");
    CHECK(plan.indices.empty());
    PoisonedDataset pd = inject(base, plan, fixed_trigger(8, 5), 2.0f);
    CHECK(sha256_hex(pd.data.images) == sha256_hex(base.images));
    CHECK(pd.audit.empty());
}

TEST_CASE("training perturbation is scaled then capped at the poison budget") {
    auto base = make_base(40, 8, 2, 31);
    const int64_t row = base.image_numel();
    // Keep every pixel away from the borders so only the l-inf cap engages.
    for (float& v : base.images.flat()) v = 0.25f + 0.5f * v;

    trigger::Trigger t = fixed_trigger(8, 9);
    for (float& v : t.residual.flat()) v = v < 0.0f ? -kEpsGen : kEpsGen;

    PoisonPlan plan = plan_poison(base, 1, 0.2, 13, kEpsPoison, "fixed");
    REQUIRE(!plan.indices.empty());

    SUBCASE("scale two saturates the budget") {
        PoisonedDataset pd = inject(base, plan, t, 2.0f);
        for (int64_t idx : plan.indices) {
            const float* a = base.images.data() + idx * row;
            const float* b = pd.data.images.data() + idx * row;
            for (int64_t j = 0; j < row; ++j) {
                const float diff = std::fabs(b[j] - a[j]);
                CHECK(diff <= kEpsPoison);
                CHECK(diff >= kEpsPoison - kPixelQuantum);
            }
        }
    }

    SUBCASE("larger scales clip to the same budget") {
        PoisonedDataset two = inject(base, plan, t, 2.0f);
        PoisonedDataset big = inject(base, plan, t, 7.5f);
        CHECK(sha256_hex(two.data.images) == sha256_hex(big.data.images));
    }

    SUBCASE("audit records the applied extremes") {
        PoisonedDataset pd = inject(base, plan, t, 2.0f);
        for (const auto& a : pd.audit) {
            CHECK(a.linf <= kEpsPoison);
            CHECK(a.linf >= kEpsPoison - kPixelQuantum);
        }
    }
}

TEST_CASE("test-time application amplifies without a budget cap") {
    const int64_t hw = 8;
    Tensor images({5, 3, hw, hw});
    images.fill(0.5f);

    trigger::Trigger t;
    t.mode = "fixed";
    t.eps_gen = kEpsGen;
    t.residual = Tensor::full({3, hw, hw}, kEpsGen);

    SUBCASE("amplification three exceeds the poison budget") {
        Tensor out = apply_test_trigger(images, t, 3.0f);
        const float applied = out[0] - 0.5f;
        CHECK(applied == doctest::Approx(3.0f * kEpsGen).epsilon(1e-6));
        CHECK(applied > kEpsPoison);
        for (int64_t i = 0; i < out.numel(); ++i) CHECK(out[i] == out[0]);
    }

    SUBCASE("pixel range still clips") {
        Tensor bright = images;
        bright.fill(0.999f);
        Tensor out = apply_test_trigger(bright, t, 2.0f);
        for (int64_t i = 0; i < out.numel(); ++i) CHECK(out[i] == 1.0f);
    }

    SUBCASE("dynamic application matches a manual replay") {
        auto enc = std::make_shared<nn::ResidualEncoder>(std::vector<int64_t>{3, hw, hw},
                                                         kEpsGen, 55);
        trigger::Trigger dyn = trigger::make_dynamic_trigger(enc);
        Rng rng(3);
        Tensor x({4, 3, hw, hw});
        for (float& v : x.flat()) v = rng.uniform(0.0f, 1.0f);

        Tensor out = apply_test_trigger(x, dyn, 2.0f);
        Tensor delta = nn::forward_encoder(*enc, x);
        Tensor manual = x;
        for (int64_t i = 0; i < manual.numel(); ++i) {
            float v = manual[i] + 2.0f * delta[i];
            manual[i] = std::min(std::max(v, 0.0f), 1.0f);
        }
        CHECK(sha256_hex(out) == sha256_hex(manual));
    }

    SUBCASE("argument validation") {
        CHECK_THROWS_AS(apply_test_trigger(images, t, 0.0f), std::invalid_argument);
        CHECK_THROWS_AS(apply_test_trigger(images, t, -1.0f), std::invalid_argument);
        trigger::Trigger undersized = fixed_trigger(4, 1);
        CHECK_THROWS_AS(apply_test_trigger(images, undersized, 2.0f), std::invalid_argument);
        trigger::Trigger weird;
        weird.mode = "banana";
        CHECK_THROWS_AS(apply_test_trigger(images, weird, 2.0f), std::invalid_argument);
        trigger::Trigger hollow;
        hollow.mode = "dynamic";
        CHECK_THROWS_AS(apply_test_trigger(images, hollow, 2.0f), std::invalid_argument);
    }
}

TEST_CASE("injection validates its inputs") {
    auto base = make_base(30, 8, 3, 41);
    trigger::Trigger t = fixed_trigger(8, 2);

    PoisonPlan rogue;
    rogue.target_class = 0;
    rogue.eps_poison = kEpsPoison;
    rogue.indices = {29, 99999};
    CHECK_THROWS_AS(inject(base, rogue, t, 2.0f), std::invalid_argument);

    trigger::Trigger small = fixed_trigger(4, 3);
    PoisonPlan plan = plan_poison(base, 0, 0.1, 5, kEpsPoison, "fixed");
    CHECK_THROWS_AS(inject(base, plan, small, 2.0f), std::invalid_argument);

    trigger::Trigger hollow;
    hollow.mode = "dynamic";
    hollow.eps_gen = kEpsGen;
    CHECK_THROWS_AS(inject(base, plan, hollow, 2.0f), std::invalid_argument);
}

TEST_CASE("poisoned archives replay exactly against the same base") {
    auto dir = tmpdir("arch");
    auto base = make_base(120, 8, 4, 51);
    trigger::Trigger t = fixed_trigger(8, 7);
    PoisonPlan plan = plan_poison(base, 2, 0.1, 17, kEpsPoison, "fixed");
    PoisonedDataset pd = inject(base, plan, t, 2.0f);

    save_poisoned_archive(dir, pd);
    PoisonedDataset back = load_poisoned_archive(dir, base);
    CHECK(sha256_hex(back.data.images) == sha256_hex(pd.data.images));
    CHECK(back.data.labels == pd.data.labels);
    CHECK(back.plan.indices == plan.indices);
    CHECK(back.plan.target_class == plan.target_class);
    CHECK(back.plan.eps_poison == plan.eps_poison);
    REQUIRE(back.audit.size() == pd.audit.size());
    for (size_t i = 0; i < back.audit.size(); ++i) {
        CHECK(back.audit[i].index == pd.audit[i].index);
        CHECK(back.audit[i].linf == pd.audit[i].linf);
    }

    SUBCASE("foreign base is rejected") {
        auto other = make_base(120, 8, 4, 52);
        CHECK_THROWS_WITH_AS(load_poisoned_archive(dir, other),
                             doctest::Contains("base mismatch"), std::runtime_error);
    }

    SUBCASE("row tampering is detected") {
        auto rows_file = dir / "poisoned_rows.dfbt";
        auto bytes = read_text_file(rows_file);
        bytes[bytes.size() - 1] = static_cast<char>(bytes[bytes.size() - 1] ^ 0x1);
        write_text_file(rows_file, bytes);
        CHECK_THROWS_WITH_AS(load_poisoned_archive(dir, base),
                             doctest::Contains("corrupted"), std::runtime_error);
    }

    SUBCASE("foreign manifest is rejected") {
        json m = load_json_file(dir / "manifest.json");
        m["format"] = "other";
        save_json(dir / "manifest.json", m);
        CHECK_THROWS(load_poisoned_archive(dir, base));
    }
}
