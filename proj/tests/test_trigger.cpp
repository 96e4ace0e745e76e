#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <memory>
#include <vector>

#include <nlohmann/json.hpp>

#include "dfb/data.hpp"
#include "dfb/io.hpp"
#include "dfb/nn/model.hpp"
#include "dfb/nn/train.hpp"
#include "dfb/rng.hpp"
#include "dfb/trigger.hpp"

using namespace dfb;
using namespace dfb::nn;
namespace fs = std::filesystem;

namespace {

constexpr float kEpsGen = 8.0f / 255.0f;

fs::path tmpdir(const char* tag) {
    fs::path p = fs::temp_directory_path() / (std::string("dfb-trig-") + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

Tensor random_images(int64_t n, int64_t hw, uint64_t seed) {
    Tensor x({n, 3, hw, hw});
    Rng rng(seed);
    for (float& v : x.flat()) v = rng.uniform(0.0f, 1.0f);
    return x;
}

// Scalar cross-entropy of a two-logit row toward label 0, written out long
// hand so the reference shares no code with the library loss.
double ce_to_label0(double z0, double z1) {
    const double m = std::max(z0, z1);
    return std::log(std::exp(z0 - m) + std::exp(z1 - m)) + m - z0;
}

struct RefScores {
    std::vector<double> clean;
    std::vector<double> triggered;
    std::vector<double> score;
};

// Brute-force two-pass reference for the fixed-trigger scan: first score
// every candidate independently, then take a single strict-comparison pass
// so ties resolve to the lowest index.
RefScores reference_scores(ResidualEncoder& enc, Classifier& dec, const Tensor& pool) {
    RefScores out;
    const int64_t n = pool.dim(0);
    for (int64_t i = 0; i < n; ++i) {
        const std::vector<int64_t> idx{i};
        Tensor x = gather_rows(pool, idx);
        Tensor delta = forward_encoder(enc, x);
        Tensor mixed = x;
        add_scaled_inplace(mixed, delta, 1.0f);
        clip_inplace(mixed, 0.0f, 1.0f);
        Tensor zc = predict_logits(dec, x);
        Tensor zt = predict_logits(dec, mixed);
        out.clean.push_back(ce_to_label0(zc[0], zc[1]));
        out.triggered.push_back(ce_to_label0(zt[0], zt[1]));
        out.score.push_back(out.clean.back() - out.triggered.back());
    }
    return out;
}

size_t pick(const std::vector<double>& s, bool take_max) {
    size_t best = 0;
    for (size_t i = 1; i < s.size(); ++i)
        if (take_max ? s[i] > s[best] : s[i] < s[best]) best = i;
    return best;
}

void copy_row(Tensor& pool, int64_t from, int64_t to) {
    const int64_t row = pool.dim(1) * pool.dim(2) * pool.dim(3);
    std::copy_n(pool.data() + from * row, row, pool.data() + to * row);
}

}  // namespace

TEST_CASE("fixed and min-loss selection match a two-pass reference") {
    Classifier dec("small-cnn", {3, 8, 8}, 2, 11);
    ResidualEncoder enc({3, 8, 8}, kEpsGen, 7);

    for (int64_t n = 1; n <= 50; ++n) {
        Tensor pool = random_images(n, 8, 200 + static_cast<uint64_t>(n));
        auto scores = trigger::score_candidates(enc, dec, pool);
        REQUIRE(scores.size() == static_cast<size_t>(n));
        auto ref = reference_scores(enc, dec, pool);
        // The library shifts logits by the row max in float before the double
        // cast, the reference subtracts after it; agreement is float-rounding
        // limited while the selection itself must match exactly.
        for (int64_t i = 0; i < n; ++i) {
            CHECK(scores[static_cast<size_t>(i)].index == i);
            CHECK(std::abs(scores[static_cast<size_t>(i)].loss_clean - ref.clean[static_cast<size_t>(i)]) <= 1e-6);
            CHECK(std::abs(scores[static_cast<size_t>(i)].loss_triggered - ref.triggered[static_cast<size_t>(i)]) <= 1e-6);
            CHECK(std::abs(scores[static_cast<size_t>(i)].score - ref.score[static_cast<size_t>(i)]) <= 1e-6);
        }

        const size_t amax = pick(ref.score, true);
        const size_t amin = pick(ref.score, false);
        trigger::Trigger t = trigger::select_fixed_trigger(enc, dec, pool);
        CHECK(t.mode == "fixed");
        CHECK(t.selected_index == static_cast<int64_t>(amax));
        CHECK(t.selected_score == scores[amax].score);
        CHECK(t.eps_gen == enc.bound());
        CHECK(t.residual.shape() == std::vector<int64_t>{3, 8, 8});
        for (const auto& s : scores) CHECK(t.selected_score >= s.score);

        const std::vector<int64_t> sel{t.selected_index};
        Tensor expected = forward_encoder(enc, gather_rows(pool, sel));
        expected.reshape({3, 8, 8});
        CHECK(sha256_hex(t.residual) == sha256_hex(expected));

        trigger::Trigger tmin = trigger::select_min_loss_trigger(enc, dec, pool);
        CHECK(tmin.selected_index == static_cast<int64_t>(amin));
        for (const auto& s : scores) CHECK(tmin.selected_score <= s.score);
    }

    // Per-candidate scoring is order independent.
    Tensor pool = random_images(10, 8, 999);
    std::vector<int64_t> rev{9, 8, 7, 6, 5, 4, 3, 2, 1, 0};
    Tensor pool_rev = gather_rows(pool, rev);
    auto fwd = trigger::score_candidates(enc, dec, pool);
    auto bwd = trigger::score_candidates(enc, dec, pool_rev);
    for (size_t i = 0; i < 10; ++i) CHECK(fwd[i].score == bwd[9 - i].score);

    Tensor empty({0, 3, 8, 8});
    CHECK_THROWS_AS(trigger::score_candidates(enc, dec, empty), std::invalid_argument);
}

TEST_CASE("duplicated candidates tie exactly and resolve to the lowest index") {
    Classifier dec("small-cnn", {3, 8, 8}, 2, 11);
    ResidualEncoder enc({3, 8, 8}, kEpsGen, 7);

    for (int64_t n : {2, 3, 5, 8, 13, 21, 34, 50}) {
        Tensor pool = random_images(n, 8, 300 + static_cast<uint64_t>(n));
        auto ref = reference_scores(enc, dec, pool);

        const auto amax = static_cast<int64_t>(pick(ref.score, true));
        const int64_t dup_max = amax == n - 1 ? 0 : n - 1;
        Tensor pool_max = pool;
        copy_row(pool_max, amax, dup_max);
        auto smax = trigger::score_candidates(enc, dec, pool_max);
        CHECK(smax[static_cast<size_t>(dup_max)].score == smax[static_cast<size_t>(amax)].score);
        CHECK(trigger::select_fixed_trigger(enc, dec, pool_max).selected_index ==
              std::min(amax, dup_max));

        const auto amin = static_cast<int64_t>(pick(ref.score, false));
        const int64_t dup_min = amin == n - 1 ? 0 : n - 1;
        Tensor pool_min = pool;
        copy_row(pool_min, amin, dup_min);
        auto smin = trigger::score_candidates(enc, dec, pool_min);
        CHECK(smin[static_cast<size_t>(dup_min)].score == smin[static_cast<size_t>(amin)].score);
        CHECK(trigger::select_min_loss_trigger(enc, dec, pool_min).selected_index ==
              std::min(amin, dup_min));
    }
}

TEST_CASE("residuals respect the generation budget") {
    Classifier dec("small-cnn", {3, 8, 8}, 2, 13);
    ResidualEncoder enc({3, 8, 8}, kEpsGen, 17);
    Tensor pool = random_images(12, 8, 404);

    SUBCASE("fixed trigger") {
        trigger::Trigger t = trigger::select_fixed_trigger(enc, dec, pool);
        CHECK(linf_norm(t.residual) <= kEpsGen);
        CHECK(all_finite(t.residual));
    }

    SUBCASE("dynamic trigger") {
        auto shared = std::make_shared<ResidualEncoder>(std::vector<int64_t>{3, 8, 8}, kEpsGen, 23);
        trigger::Trigger t = trigger::make_dynamic_trigger(shared);
        CHECK(t.mode == "dynamic");
        CHECK(t.eps_gen == shared->bound());
        CHECK(t.residual.numel() == 0);

        Tensor res = trigger::generate_dynamic_residuals(*shared, pool);
        CHECK(res.shape() == pool.shape());
        CHECK(linf_norm(res) <= kEpsGen);

        // Residuals are input dependent and reproducible.
        std::vector<int64_t> i0{0}, i1{1};
        Tensor r0 = gather_rows(res, i0);
        Tensor r1 = gather_rows(res, i1);
        CHECK(sha256_hex(r0) != sha256_hex(r1));
        Tensor again = trigger::generate_dynamic_residuals(*shared, pool);
        CHECK(sha256_hex(res) == sha256_hex(again));
        Tensor single = trigger::generate_dynamic_residuals(*shared, gather_rows(pool, i1));
        CHECK(max_abs_diff(single, r1) <= 2e-5f);

        CHECK_THROWS_AS(trigger::make_dynamic_trigger(nullptr), std::invalid_argument);
    }
}

TEST_CASE("encoder training drives the decoder off the target label") {
    // Class contrast is chosen so the decoder separates the surrogate task
    // cleanly while its margins stay within reach of the residual budget.
    data::DatasetConfig cfg;
    cfg.name = "tr";
    cfg.source = "synth:kind=victim&classes=3&per_class=20&hw=16&seed=31";
    cfg.pood_source =
        "synth:kind=pood&classes=4&per_class=40&hw=16&seed=32&alpha=0.1&noise=0.03&cousin_of=rings";
    cfg.shape = {16, 16, 3};
    auto pood = data::load_dataset(cfg, data::Role::pood);
    auto bin = data::binarize_pood(pood, "wild rings", data::BalancePolicy::downsample, 1.0, 3);

    Hyper dh;
    dh.epochs = 8;
    dh.batch_size = 16;
    dh.lr = 0.05f;
    dh.seed = 5;
    auto dec = train_decoder(bin, "small-cnn", dh);
    REQUIRE(dec.model != nullptr);
    REQUIRE(dec.result.final_train_acc >= 0.9);

    std::vector<int64_t> target_rows;
    for (size_t i = 0; i < bin.labels.size(); ++i)
        if (bin.labels[i] == 1) target_rows.push_back(static_cast<int64_t>(i));
    Tensor targets = gather_rows(bin.images, target_rows);

    ResidualEncoder enc({3, 16, 16}, kEpsGen, 9);
    Hyper eh;
    eh.epochs = 30;
    eh.batch_size = 16;
    eh.lr = 0.05f;
    eh.seed = 7;
    auto log_path = tmpdir("enc") / "encoder.jsonl";
    auto res = trigger::train_encoder(enc, *dec.model, targets, eh, log_path);

    REQUIRE(res.curve.size() == 30);
    for (const auto& e : res.curve) {
        CHECK(std::isfinite(e.loss));
        CHECK(e.erase_rate >= 0.0);
        CHECK(e.erase_rate <= 1.0);
    }
    CHECK(res.curve.back().loss < res.curve.front().loss);
    CHECK(res.final_erase_rate == trigger::erase_rate(enc, *dec.model, targets));
    CHECK(res.final_erase_rate >= 0.9);

    // The residual stays inside the budget even after training.
    Tensor res_residuals = trigger::generate_dynamic_residuals(enc, targets);
    CHECK(linf_norm(res_residuals) <= kEpsGen);

    std::stringstream ss(read_text_file(log_path));
    std::string line;
    int rows = 0;
    while (std::getline(ss, line)) {
        if (line.empty()) continue;
        json rec = json::parse(line);
        CHECK(rec["epoch"].get<int>() == rows);
        CHECK(std::isfinite(rec["loss"].get<double>()));
        CHECK(rec["erase_rate"].get<double>() >= 0.0);
        ++rows;
    }
    CHECK(rows == 30);

    Tensor no_targets({0, 3, 16, 16});
    CHECK_THROWS_AS(trigger::train_encoder(enc, *dec.model, no_targets, eh),
                    std::invalid_argument);
    Classifier not_binary("small-cnn", {3, 16, 16}, 3, 1);
    CHECK_THROWS_AS(trigger::train_encoder(enc, not_binary, targets, eh), std::invalid_argument);
}

TEST_CASE("trigger artifacts round trip") {
    auto dir = tmpdir("artifacts");
    Classifier dec("small-cnn", {3, 8, 8}, 2, 29);
    ResidualEncoder enc({3, 8, 8}, kEpsGen, 31);
    Tensor pool = random_images(6, 8, 505);

    SUBCASE("fixed") {
        trigger::Trigger t = trigger::select_fixed_trigger(enc, dec, pool);
        t.pood_source_id = "wild rings";
        t.decoder_hash = "decfeed";
        t.encoder_hash = "encfeed";
        trigger::save_trigger(dir / "fixed.trg", t);
        trigger::Trigger r = trigger::load_trigger(dir / "fixed.trg");
        CHECK(r.mode == "fixed");
        CHECK(r.eps_gen == t.eps_gen);
        CHECK(r.pood_source_id == t.pood_source_id);
        CHECK(r.selected_index == t.selected_index);
        CHECK(r.selected_score == t.selected_score);
        CHECK(r.decoder_hash == t.decoder_hash);
        CHECK(r.encoder_hash == t.encoder_hash);
        CHECK(sha256_hex(r.residual) == sha256_hex(t.residual));
        CHECK(r.encoder == nullptr);
    }

    SUBCASE("dynamic with relative encoder reference") {
        auto shared = std::make_shared<ResidualEncoder>(std::vector<int64_t>{3, 8, 8}, kEpsGen, 37);
        shared->set_train(true);
        shared->forward(pool);  // move the norm running statistics off their init
        shared->set_train(false);
        save_encoder(dir / "enc.ckpt", *shared);

        trigger::Trigger t = trigger::make_dynamic_trigger(shared);
        t.encoder_ref = "enc.ckpt";
        trigger::save_trigger(dir / "dyn.trg", t);

        trigger::Trigger r = trigger::load_trigger(dir / "dyn.trg");
        REQUIRE(r.encoder != nullptr);
        CHECK(r.mode == "dynamic");
        CHECK(r.eps_gen == t.eps_gen);
        Tensor a = forward_encoder(*shared, pool);
        Tensor b = forward_encoder(*r.encoder, pool);
        CHECK(sha256_hex(a) == sha256_hex(b));

        trigger::Trigger skip = trigger::load_trigger(dir / "dyn.trg", false);
        CHECK(skip.encoder == nullptr);
        CHECK(skip.encoder_ref == "enc.ckpt");
    }

    SUBCASE("dynamic without encoder reference fails to load") {
        auto shared = std::make_shared<ResidualEncoder>(std::vector<int64_t>{3, 8, 8}, kEpsGen, 41);
        trigger::Trigger t = trigger::make_dynamic_trigger(shared);
        trigger::save_trigger(dir / "dangling.trg", t);
        CHECK_THROWS(trigger::load_trigger(dir / "dangling.trg"));
    }

    SUBCASE("rejects foreign and truncated files") {
        write_text_file(dir / "junk.trg", "not a trigger");
        CHECK_THROWS(trigger::load_trigger(dir / "junk.trg"));

        trigger::Trigger t = trigger::select_fixed_trigger(enc, dec, pool);
        trigger::save_trigger(dir / "cut.trg", t);
        auto bytes = read_text_file(dir / "cut.trg");
        write_text_file(dir / "cut.trg", bytes.substr(0, 10));
        CHECK_THROWS(trigger::load_trigger(dir / "cut.trg"));
    }
}
