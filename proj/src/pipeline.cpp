#include "dfb/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "dfb/data.hpp"
#include "dfb/defenses.hpp"
#include "dfb/eval.hpp"
#include "dfb/io.hpp"
#include "dfb/nn/model.hpp"
#include "dfb/nn/train.hpp"
#include "dfb/poison.hpp"
#include "dfb/render.hpp"
#include "dfb/trigger.hpp"

namespace fs = std::filesystem;

namespace dfb::pipeline {

namespace {

const std::vector<std::string> kStages = {"binarize", "decoder", "encoder", "trigger",
                                          "poison",   "victim",  "evaluate", "defend"};

const std::map<std::string, std::vector<std::string>>& stage_deps() {
    static const std::map<std::string, std::vector<std::string>> deps = {
        {"binarize", {}},
        {"decoder", {"binarize"}},
        {"encoder", {"binarize", "decoder"}},
        {"trigger", {"binarize", "decoder", "encoder"}},
        {"poison", {"trigger"}},
        {"victim", {"poison"}},
        {"evaluate", {"trigger", "victim"}},
        {"defend", {"trigger", "victim"}},
    };
    return deps;
}

struct StageRef {
    std::string key;
    fs::path dir;
};

struct Context {
    const config::ExperimentConfig& cfg;
    artifacts::ArtifactStore store;
    data::LabeledDataset train, test, pood;
    std::string train_hash, test_hash, pood_hash;
    int32_t target = -1;
    std::string target_name;
    std::string pood_proxy;  // POOD class standing in for the target
    std::map<std::string, StageRef> done;

    explicit Context(const config::ExperimentConfig& c) : cfg(c), store(c.artifact_root) {}
};

std::string dataset_hash(const data::LabeledDataset& ds) {
    json j;
    j["images"] = sha256_hex(ds.images);
    j["labels"] = sha256_hex(ds.labels.data(), ds.labels.size() * sizeof(int32_t));
    j["classes"] = ds.class_names;
    return json_hash(j);
}

void resolve_target(Context& ctx) {
    const auto& dc = ctx.cfg.dataset;
    if (!dc.target_class_name.empty()) {
        int id = ctx.train.label_id(dc.target_class_name);
        if (id < 0)
            throw config::ConfigError("dataset.target_class: class '" + dc.target_class_name +
                                      "' is not in the victim training set");
        ctx.target = id;
    } else {
        if (dc.target_class < 0 || dc.target_class >= ctx.train.num_classes())
            throw config::ConfigError(
                "dataset.target_class: index " + std::to_string(dc.target_class) +
                " out of range for " + std::to_string(ctx.train.num_classes()) + " classes");
        ctx.target = dc.target_class;
    }
    ctx.target_name = ctx.train.class_names[static_cast<size_t>(ctx.target)];
}

void load_context_data(Context& ctx) {
    const auto& dc = ctx.cfg.dataset;
    ctx.train = data::load_dataset(dc, data::Role::victim_train);
    ctx.test = data::load_dataset(dc, data::Role::victim_test);
    ctx.pood = data::load_dataset(dc, data::Role::pood);
    ctx.train_hash = dataset_hash(ctx.train);
    ctx.test_hash = dataset_hash(ctx.test);
    ctx.pood_hash = dataset_hash(ctx.pood);
    resolve_target(ctx);

    auto rep = data::check_disjoint(ctx.train, ctx.pood);
    if (!rep.disjoint()) {
        std::string names;
        for (const auto& n : rep.overlap) names += (names.empty() ? "" : ", ") + n;
        throw config::ConfigError(
            "dataset.pood_source: shares classes with the victim dataset: " + names);
    }
    for (const auto& [a, b] : rep.fuzzy_warnings)
        std::cerr << "[dfb] warning: victim class '" << a << "' and out-of-distribution class '"
                  << b << "' have similar names\n";

    // The out-of-distribution proxy for the target: the class whose name is
    // closest to the victim target's.
    ctx.pood_proxy = data::nearest_class_name(ctx.target_name, ctx.pood.class_names);
    if (ctx.pood_proxy.empty())
        throw config::ConfigError("dataset.pood_source: the out-of-distribution set has no classes");
    if (data::name_affinity(ctx.target_name, ctx.pood_proxy) == 0.0)
        std::cerr << "[dfb] warning: no out-of-distribution class name resembles '"
                  << ctx.target_name << "'; using '" << ctx.pood_proxy << "'\n";
}

// ---------------------------------------------------------------- binarize IO

void save_bin(const fs::path& dir, const data::BinaryOodDataset& bin) {
    save_tensor(dir / "bin_images.dfbt", bin.images);
    json meta;
    meta["labels"] = bin.labels;
    meta["source_target_class"] = bin.source_target_class;
    meta["n_target"] = bin.n_target;
    meta["n_nontarget"] = bin.n_nontarget;
    meta["source_indices"] = bin.source_indices;
    write_text_file(dir / "bin_meta.json", canonical_dump(meta));
}

data::BinaryOodDataset load_bin(const fs::path& dir) {
    data::BinaryOodDataset bin;
    bin.images = load_tensor(dir / "bin_images.dfbt");
    json meta = load_json_file(dir / "bin_meta.json");
    bin.labels = meta["labels"].get<std::vector<int32_t>>();
    bin.source_target_class = meta["source_target_class"].get<std::string>();
    bin.n_target = meta["n_target"].get<int64_t>();
    bin.n_nontarget = meta["n_nontarget"].get<int64_t>();
    bin.source_indices = meta["source_indices"].get<std::vector<int64_t>>();
    return bin;
}

Tensor bin_target_rows(const data::BinaryOodDataset& bin) {
    std::vector<int64_t> idx;
    for (size_t i = 0; i < bin.labels.size(); ++i)
        if (bin.labels[i] == 1) idx.push_back(static_cast<int64_t>(i));
    return nn::gather_rows(bin.images, idx);
}

// Candidate pool for trigger selection: the binarized target rows, optionally
// reduced to a seeded subset.
Tensor trigger_candidates(const Context& ctx, const data::BinaryOodDataset& bin,
                          std::vector<int64_t>* rows_out) {
    std::vector<int64_t> idx;
    for (size_t i = 0; i < bin.labels.size(); ++i)
        if (bin.labels[i] == 1) idx.push_back(static_cast<int64_t>(i));
    const int64_t cap = ctx.cfg.attack.max_candidates;
    if (cap > 0 && cap < static_cast<int64_t>(idx.size())) {
        Rng rng(ctx.cfg.seed * 31 + 6);
        auto picks = rng.sample_without_replacement(static_cast<int64_t>(idx.size()), cap);
        std::sort(picks.begin(), picks.end());
        std::vector<int64_t> sub;
        sub.reserve(picks.size());
        for (int64_t p : picks) sub.push_back(idx[static_cast<size_t>(p)]);
        idx = std::move(sub);
    }
    if (rows_out) *rows_out = idx;
    return nn::gather_rows(bin.images, idx);
}

// Seeded row subset of a dataset, returned as a dataset (labels kept).
data::LabeledDataset subset_of(const data::LabeledDataset& ds, int64_t count, uint64_t seed) {
    count = std::min<int64_t>(count, ds.size());
    Rng rng(seed);
    auto picks = rng.sample_without_replacement(ds.size(), count);
    std::sort(picks.begin(), picks.end());
    data::LabeledDataset out;
    out.name = ds.name;
    out.role = ds.role;
    out.class_names = ds.class_names;
    out.seed = ds.seed;
    out.images = nn::gather_rows(ds.images, picks);
    out.labels.reserve(picks.size());
    for (int64_t p : picks) out.labels.push_back(ds.labels[static_cast<size_t>(p)]);
    return out;
}

// ------------------------------------------------------------- key material

void stage_key_material(Context& ctx, const std::string& stage, json& scfg,
                        std::vector<std::string>& inputs) {
    const auto& cfg = ctx.cfg;
    auto uphash = [&](const std::string& st, const std::string& file) {
        return ctx.store.output_hash(ctx.done.at(st).dir, file);
    };
    scfg = json::object();
    inputs.clear();
    if (stage == "binarize") {
        scfg["target_class"] = ctx.pood_proxy;
        scfg["balance_k"] = cfg.pood_balance_k;
        scfg["seed"] = cfg.seed;
        inputs = {ctx.pood_hash};
    } else if (stage == "decoder") {
        scfg["arch"] = cfg.decoder_arch;
        scfg["hyper"] = cfg.decoder_hyper.to_json();
        inputs = {uphash("binarize", "bin_images.dfbt"), uphash("binarize", "bin_meta.json")};
    } else if (stage == "encoder") {
        scfg["eps_gen"] = cfg.attack.eps_gen;
        scfg["hyper"] = cfg.encoder_hyper.to_json();
        inputs = {uphash("decoder", "decoder.ckpt"), uphash("binarize", "bin_images.dfbt"),
                  uphash("binarize", "bin_meta.json")};
    } else if (stage == "trigger") {
        scfg["mode"] = cfg.attack.trigger_mode;
        scfg["max_candidates"] = cfg.attack.max_candidates;
        scfg["seed"] = cfg.seed * 31 + 6;
        inputs = {uphash("encoder", "encoder.ckpt"), uphash("decoder", "decoder.ckpt"),
                  uphash("binarize", "bin_images.dfbt"), uphash("binarize", "bin_meta.json")};
    } else if (stage == "poison") {
        scfg["target_class"] = ctx.target;
        scfg["ratio"] = cfg.attack.poison_ratio;
        scfg["eps_poison"] = cfg.attack.eps_poison;
        scfg["train_scale"] = cfg.attack.train_scale;
        scfg["seed"] = cfg.seed * 31 + 5;
        inputs = {ctx.train_hash, uphash("trigger", "trigger.dfbg")};
        if (cfg.attack.trigger_mode == "dynamic")
            inputs.push_back(uphash("trigger", "encoder.ckpt"));
    } else if (stage == "victim") {
        scfg["arch"] = cfg.victim_arch;
        scfg["hyper"] = cfg.victim_hyper.to_json();
        scfg["num_classes"] = ctx.train.num_classes();
        inputs = {uphash("poison", "manifest.json"), uphash("poison", "poisoned_rows.dfbt"),
                  ctx.train_hash};
    } else if (stage == "evaluate") {
        scfg["amplification"] = cfg.attack.amplification;
        scfg["target_class"] = ctx.target;
        inputs = {uphash("victim", "victim.ckpt"), uphash("trigger", "trigger.dfbg"),
                  ctx.test_hash};
        if (cfg.attack.trigger_mode == "dynamic")
            inputs.push_back(uphash("trigger", "encoder.ckpt"));
    } else if (stage == "defend") {
        json def;
        def["nc"] = json{{"steps", cfg.defense.neural_cleanse.steps},
                         {"batch_size", cfg.defense.neural_cleanse.batch_size},
                         {"lr", cfg.defense.neural_cleanse.lr},
                         {"lambda_init", cfg.defense.neural_cleanse.lambda_init},
                         {"attack_threshold", cfg.defense.neural_cleanse.attack_threshold},
                         {"patience", cfg.defense.neural_cleanse.patience},
                         {"max_samples", cfg.defense.neural_cleanse.max_samples},
                         {"seed", cfg.defense.neural_cleanse.seed}};
        def["prune_rates"] = cfg.defense.prune_rates;
        def["prune_subset"] = cfg.defense.prune_subset;
        def["strip_perturbations"] = cfg.defense.strip_perturbations;
        def["strip_probes"] = cfg.defense.strip_probes;
        def["sentinet_probes"] = cfg.defense.sentinet_probes;
        scfg["defense"] = def;
        scfg["target_class"] = ctx.target;
        scfg["amplification"] = cfg.attack.amplification;
        scfg["seed"] = cfg.seed;
        inputs = {uphash("victim", "victim.ckpt"), uphash("trigger", "trigger.dfbg"),
                  ctx.test_hash};
        if (cfg.attack.trigger_mode == "dynamic")
            inputs.push_back(uphash("trigger", "encoder.ckpt"));
    } else {
        throw std::logic_error("stage_key_material: " + stage);
    }
}

// ------------------------------------------------------------ stage builders

json build_binarize(Context& ctx, const fs::path& dir) {
    auto bin = data::binarize_pood(ctx.pood, ctx.pood_proxy, data::BalancePolicy::downsample,
                                   ctx.cfg.pood_balance_k, ctx.cfg.seed);
    save_bin(dir, bin);
    return json{{"n_target", bin.n_target},
                {"n_nontarget", bin.n_nontarget},
                {"source_target_class", bin.source_target_class}};
}

json build_decoder(Context& ctx, const fs::path& dir) {
    auto bin = load_bin(ctx.done.at("binarize").dir);
    auto out = nn::train_decoder(bin, ctx.cfg.decoder_arch, ctx.cfg.decoder_hyper,
                                 dir / "epochs.jsonl");
    nn::save_classifier(dir / "decoder.ckpt", *out.model);
    json res;
    res["final_train_acc"] = out.result.final_train_acc;
    res["final_val_acc"] = out.result.final_val_acc;
    res["epochs"] = static_cast<int64_t>(out.result.log.size());
    write_text_file(dir / "result.json", canonical_dump(res));
    return res;
}

json build_encoder(Context& ctx, const fs::path& dir) {
    auto bin = load_bin(ctx.done.at("binarize").dir);
    auto decoder = nn::load_classifier(ctx.done.at("decoder").dir / "decoder.ckpt");
    Tensor pxstar = bin_target_rows(bin);
    auto chw = std::vector<int64_t>{bin.images.dim(1), bin.images.dim(2), bin.images.dim(3)};
    nn::ResidualEncoder enc(chw, ctx.cfg.attack.eps_gen, ctx.cfg.encoder_hyper.seed);
    auto res = trigger::train_encoder(enc, *decoder, pxstar, ctx.cfg.encoder_hyper,
                                      dir / "curve.jsonl");
    nn::save_encoder(dir / "encoder.ckpt", enc);
    json out;
    out["final_erase_rate"] = res.final_erase_rate;
    out["epochs"] = static_cast<int64_t>(res.curve.size());
    write_text_file(dir / "result.json", canonical_dump(out));
    return out;
}

json build_trigger(Context& ctx, const fs::path& dir) {
    const auto& mode = ctx.cfg.attack.trigger_mode;
    auto decoder_dir = ctx.done.at("decoder").dir;
    auto encoder_dir = ctx.done.at("encoder").dir;
    auto encoder = nn::load_encoder(encoder_dir / "encoder.ckpt");

    trigger::Trigger t;
    json extra;
    if (mode == "dynamic") {
        std::shared_ptr<nn::ResidualEncoder> shared(std::move(encoder));
        t = trigger::make_dynamic_trigger(shared);
        fs::copy_file(encoder_dir / "encoder.ckpt", dir / "encoder.ckpt");
        t.encoder_ref = "encoder.ckpt";
        auto bin = load_bin(ctx.done.at("binarize").dir);
        Tensor pxstar = bin_target_rows(bin);
        int64_t k = std::min<int64_t>(8, pxstar.dim(0));
        std::vector<int64_t> head(static_cast<size_t>(k));
        for (int64_t i = 0; i < k; ++i) head[static_cast<size_t>(i)] = i;
        Tensor sample = nn::gather_rows(pxstar, head);
        Tensor residuals = trigger::generate_dynamic_residuals(*shared, sample);
        Tensor vis = Tensor::zeros(residuals.shape());
        for (int64_t i = 0; i < k; ++i) {
            Tensor r({residuals.dim(1), residuals.dim(2), residuals.dim(3)});
            std::copy(residuals.data() + i * r.numel(), residuals.data() + (i + 1) * r.numel(),
                      r.data());
            Tensor v = render::residual_to_visual(r);
            std::copy(v.data(), v.data() + v.numel(), vis.data() + i * r.numel());
        }
        render::image_grid(dir / "trigger.png", vis, 4, 6);
        extra["mode"] = "dynamic";
    } else {
        auto decoder = nn::load_classifier(decoder_dir / "decoder.ckpt");
        auto bin = load_bin(ctx.done.at("binarize").dir);
        std::vector<int64_t> rows;
        Tensor candidates = trigger_candidates(ctx, bin, &rows);
        auto scores = trigger::score_candidates(*encoder, *decoder, candidates);
        t = (mode == "min-loss") ? trigger::select_min_loss_trigger(*encoder, *decoder, candidates)
                                 : trigger::select_fixed_trigger(*encoder, *decoder, candidates);
        json sc = json::array();
        for (const auto& s : scores)
            sc.push_back(json{{"index", s.index},
                              {"bin_row", rows[static_cast<size_t>(s.index)]},
                              {"loss_clean", s.loss_clean},
                              {"loss_triggered", s.loss_triggered},
                              {"score", s.score}});
        json sj;
        sj["selection"] = mode;
        sj["selected_index"] = t.selected_index;
        sj["selected_score"] = t.selected_score;
        sj["candidates"] = sc;
        write_text_file(dir / "scores.json", canonical_dump(sj));
        Tensor vis = render::residual_to_visual(t.residual);
        vis.reshape({1, vis.dim(0), vis.dim(1), vis.dim(2)});
        render::image_grid(dir / "trigger.png", vis, 1, 8);
        extra["mode"] = mode;
        extra["selected_index"] = t.selected_index;
        extra["selected_score"] = t.selected_score;
    }
    t.eps_gen = ctx.cfg.attack.eps_gen;
    t.pood_source_id = ctx.pood.name + ":" + ctx.pood_hash.substr(0, 12);
    t.decoder_hash = ctx.store.output_hash(decoder_dir, "decoder.ckpt");
    t.encoder_hash = ctx.store.output_hash(encoder_dir, "encoder.ckpt");
    trigger::save_trigger(dir / "trigger.dfbg", t);
    return extra;
}

json build_poison(Context& ctx, const fs::path& dir) {
    auto trig = trigger::load_trigger(ctx.done.at("trigger").dir / "trigger.dfbg");
    auto plan = poison::plan_poison(ctx.train, ctx.target, ctx.cfg.attack.poison_ratio,
                                    ctx.cfg.seed * 31 + 5, ctx.cfg.attack.eps_poison,
                                    ctx.cfg.attack.trigger_mode);
    auto pd = poison::inject(ctx.train, plan, trig, ctx.cfg.attack.train_scale);
    poison::save_poisoned_archive(dir, pd);

    if (!plan.indices.empty()) {
        int64_t k = std::min<int64_t>(8, static_cast<int64_t>(plan.indices.size()));
        std::vector<int64_t> head(plan.indices.begin(), plan.indices.begin() + k);
        Tensor before = nn::gather_rows(ctx.train.images, head);
        Tensor after = nn::gather_rows(pd.data.images, head);
        Tensor both({2 * k, before.dim(1), before.dim(2), before.dim(3)});
        std::copy(before.data(), before.data() + before.numel(), both.data());
        std::copy(after.data(), after.data() + after.numel(), both.data() + before.numel());
        render::image_grid(dir / "poison_pairs.png", both, k, 6);
    }
    float max_linf = 0.0f;
    for (const auto& a : pd.audit) max_linf = std::max(max_linf, a.linf);
    return json{{"poison_count", static_cast<int64_t>(plan.indices.size())},
                {"max_linf", max_linf}};
}

json build_victim(Context& ctx, const fs::path& dir) {
    auto pd = poison::load_poisoned_archive(ctx.done.at("poison").dir, ctx.train);
    nn::TrainResult res;
    auto victim = nn::train_victim(pd.data, ctx.cfg.victim_arch, ctx.train.num_classes(),
                                   ctx.cfg.victim_hyper, &res, dir / "epochs.jsonl");
    nn::save_classifier(dir / "victim.ckpt", *victim);
    json out;
    out["final_train_acc"] = res.final_train_acc;
    out["final_val_acc"] = res.final_val_acc;
    out["epochs"] = static_cast<int64_t>(res.log.size());
    write_text_file(dir / "result.json", canonical_dump(out));
    return out;
}

json build_evaluate(Context& ctx, const fs::path& dir) {
    auto victim = nn::load_classifier(ctx.done.at("victim").dir / "victim.ckpt");
    auto trig = trigger::load_trigger(ctx.done.at("trigger").dir / "trigger.dfbg");
    auto rep = eval::evaluate_attack(*victim, ctx.test, trig, ctx.target,
                                     ctx.cfg.attack.amplification);
    rep.config_hash = ctx.cfg.hash();
    rep.seed = ctx.cfg.seed;
    write_text_file(dir / "metrics.json", canonical_dump(rep.to_json()));
    return json{{"acc", rep.acc}, {"tar_acc", rep.tar_acc}, {"asr", rep.asr}};
}

json build_defend(Context& ctx, const fs::path& dir) {
    auto victim = nn::load_classifier(ctx.done.at("victim").dir / "victim.ckpt");
    auto trig = trigger::load_trigger(ctx.done.at("trigger").dir / "trigger.dfbg");
    const auto& dc = ctx.cfg.defense;
    const float amp = ctx.cfg.attack.amplification;
    json report;
    report["target_class"] = ctx.target;

    // Trigger inversion scan.
    auto nc = defense::neural_cleanse(*victim, ctx.test, dc.neural_cleanse);
    {
        json cls = json::array();
        const int64_t h = ctx.test.images.dim(2), w = ctx.test.images.dim(3);
        Tensor masks = Tensor::zeros({static_cast<int64_t>(nc.classes.size()), 1, h, w});
        for (size_t i = 0; i < nc.classes.size(); ++i) {
            const auto& c = nc.classes[i];
            cls.push_back(json{{"class", c.cls},
                               {"l1", c.l1},
                               {"anomaly", nc.anomaly[i]},
                               {"converged", c.converged},
                               {"note", c.note}});
            if (c.mask.numel() == h * w)
                std::copy(c.mask.data(), c.mask.data() + c.mask.numel(),
                          masks.data() + static_cast<int64_t>(i) * h * w);
        }
        json ncj;
        ncj["classes"] = cls;
        ncj["flagged"] = nc.flagged;
        ncj["target_anomaly"] =
            ctx.target < static_cast<int32_t>(nc.anomaly.size()) ? nc.anomaly[ctx.target] : 0.0;
        report["neural_cleanse"] = ncj;
        if (!nc.classes.empty()) render::image_grid(dir / "nc_masks.png", masks, 4, 6);
    }

    // Channel pruning sweep.
    {
        auto subset = subset_of(ctx.test, dc.prune_subset, ctx.cfg.seed * 31 + 7);
        auto curve = defense::prune_defense(*victim, subset, ctx.test, trig, ctx.target, amp,
                                            dc.prune_rates);
        json pts = json::array();
        render::Series acc{"clean acc", {}, {}}, asr{"attack rate", {}, {}};
        for (const auto& p : curve) {
            pts.push_back(json{{"rate", p.rate}, {"acc", p.acc}, {"asr", p.asr}});
            acc.x.push_back(p.rate);
            acc.y.push_back(p.acc);
            asr.x.push_back(p.rate);
            asr.y.push_back(p.asr);
        }
        report["pruning"] = pts;
        render::line_plot(dir / "prune_curve.png", {acc, asr}, "channel pruning",
                          "pruned fraction", "percent");
    }

    // Entropy-under-overlay screening.
    {
        std::vector<int64_t> nt;
        for (int64_t i = 0; i < ctx.test.size(); ++i)
            if (ctx.test.labels[static_cast<size_t>(i)] != ctx.target) nt.push_back(i);
        Rng rng(ctx.cfg.seed * 31 + 8);
        int64_t n_probe = std::min<int64_t>(dc.strip_probes, static_cast<int64_t>(nt.size()));
        auto pick = rng.sample_without_replacement(static_cast<int64_t>(nt.size()), n_probe);
        std::sort(pick.begin(), pick.end());
        std::vector<int64_t> probe_rows;
        probe_rows.reserve(pick.size());
        for (int64_t p : pick) probe_rows.push_back(nt[static_cast<size_t>(p)]);
        Tensor clean_probes = nn::gather_rows(ctx.test.images, probe_rows);
        Tensor trig_probes = poison::apply_test_trigger(clean_probes, trig, amp);
        auto pool_ds = subset_of(ctx.test, std::min<int64_t>(128, ctx.test.size()),
                                 ctx.cfg.seed * 31 + 9);
        auto e_clean = defense::strip_defense(*victim, clean_probes, pool_ds.images,
                                              dc.strip_perturbations, ctx.cfg.seed * 31 + 10);
        auto e_trig = defense::strip_defense(*victim, trig_probes, pool_ds.images,
                                             dc.strip_perturbations, ctx.cfg.seed * 31 + 10);
        auto mean = [](const std::vector<double>& v) {
            double s = 0.0;
            for (double x : v) s += x;
            return v.empty() ? 0.0 : s / static_cast<double>(v.size());
        };
        json sj;
        sj["clean_entropies"] = e_clean;
        sj["triggered_entropies"] = e_trig;
        sj["clean_mean"] = mean(e_clean);
        sj["triggered_mean"] = mean(e_trig);
        report["strip"] = sj;
        render::histogram(dir / "strip_entropy.png", {e_clean, e_trig},
                          {"clean", "triggered"}, 24, "overlay entropy", "entropy (nats)");
    }

    // Saliency probes.
    {
        std::vector<int64_t> nt;
        for (int64_t i = 0; i < ctx.test.size(); ++i)
            if (ctx.test.labels[static_cast<size_t>(i)] != ctx.target) nt.push_back(i);
        Rng rng(ctx.cfg.seed * 31 + 11);
        int64_t k = std::min<int64_t>(dc.sentinet_probes, static_cast<int64_t>(nt.size()));
        auto pick = rng.sample_without_replacement(static_cast<int64_t>(nt.size()), k);
        std::sort(pick.begin(), pick.end());
        json probes = json::array();
        for (int64_t i = 0; i < k; ++i) {
            int64_t row = nt[static_cast<size_t>(pick[static_cast<size_t>(i)])];
            Tensor x = nn::gather_rows(ctx.test.images, std::vector<int64_t>{row});
            Tensor xt = poison::apply_test_trigger(x, trig, amp);
            Tensor h_clean = defense::sentinet_heatmap(*victim, x, -1);
            Tensor h_trig = defense::sentinet_heatmap(*victim, xt, ctx.target);
            Tensor img({x.dim(1), x.dim(2), x.dim(3)});
            std::copy(x.data(), x.data() + x.numel(), img.data());
            Tensor imgt = img;
            std::copy(xt.data(), xt.data() + xt.numel(), imgt.data());
            std::string tag = std::to_string(i);
            render::heatmap_overlay(dir / ("saliency_clean_" + tag + ".png"), img, h_clean, 6);
            render::heatmap_overlay(dir / ("saliency_trig_" + tag + ".png"), imgt, h_trig, 6);
            probes.push_back(json{{"row", row},
                                  {"clean_file", "saliency_clean_" + tag + ".png"},
                                  {"triggered_file", "saliency_trig_" + tag + ".png"}});
        }
        report["saliency"] = json{{"probes", probes}};
    }

    write_text_file(dir / "defense_report.json", canonical_dump(report));
    return json{{"nc_target_anomaly", report["neural_cleanse"]["target_anomaly"]},
                {"nc_flagged", report["neural_cleanse"]["flagged"]},
                {"strip_clean_mean", report["strip"]["clean_mean"]},
                {"strip_triggered_mean", report["strip"]["triggered_mean"]}};
}

json build_stage(Context& ctx, const std::string& stage, const fs::path& dir) {
    if (stage == "binarize") return build_binarize(ctx, dir);
    if (stage == "decoder") return build_decoder(ctx, dir);
    if (stage == "encoder") return build_encoder(ctx, dir);
    if (stage == "trigger") return build_trigger(ctx, dir);
    if (stage == "poison") return build_poison(ctx, dir);
    if (stage == "victim") return build_victim(ctx, dir);
    if (stage == "evaluate") return build_evaluate(ctx, dir);
    if (stage == "defend") return build_defend(ctx, dir);
    throw std::logic_error("build_stage: " + stage);
}

void run_stage(Context& ctx, const std::string& stage, bool requested, bool force) {
    json scfg;
    std::vector<std::string> inputs;
    stage_key_material(ctx, stage, scfg, inputs);
    const std::string key = artifacts::ArtifactStore::key_for(stage, scfg, inputs);
    const fs::path dir = ctx.store.dir_for(stage, key);

    bool build = false;
    if (ctx.store.complete(dir)) {
        if (requested && force) {
            ctx.store.wipe(dir);
            build = true;
        }
    } else if (ctx.store.exists(dir)) {
        if (!force)
            throw artifacts::StaleArtifactError(
                "stale artifact for stage '" + stage + "' at " + dir.string() +
                " (outputs no longer match the index); rerun with --force to rebuild");
        ctx.store.wipe(dir);
        build = true;
    } else {
        if (!requested)
            throw artifacts::DependencyError(
                "stage '" + stage +
                "' has no artifact for this configuration; run it first or add it to --stages");
        build = true;
    }

    if (build) {
        fs::create_directories(dir);
        json extra = build_stage(ctx, stage, dir);
        ctx.store.finalize(dir, stage, key, scfg, inputs, extra);
        std::cerr << "[dfb] " << stage << ": built " << key.substr(0, 12) << "\n";
    } else {
        std::cerr << "[dfb] " << stage << ": cached " << key.substr(0, 12) << "\n";
    }
    ctx.done[stage] = StageRef{key, dir};
}

void apply_axis(config::ExperimentConfig& cfg, const std::string& axis, const json& value) {
    if (axis == "poison_ratio") {
        if (!value.is_number())
            throw config::ConfigError("sweep.values: poison_ratio values must be numbers");
        cfg.attack.poison_ratio = value.get<double>();
    } else if (axis == "decoder_arch" || axis == "victim_arch") {
        if (!value.is_string())
            throw config::ConfigError("sweep.values: architecture values must be strings");
        std::string arch = value.get<std::string>();
        if (!nn::known_classifier_arch(arch))
            throw config::ConfigError("sweep.values: unknown architecture '" + arch + "'");
        (axis == "decoder_arch" ? cfg.decoder_arch : cfg.victim_arch) = arch;
    } else if (axis == "target_class") {
        if (value.is_number_integer()) {
            cfg.dataset.target_class = value.get<int>();
            cfg.dataset.target_class_name.clear();
        } else if (value.is_string()) {
            cfg.dataset.target_class_name = value.get<std::string>();
        } else {
            throw config::ConfigError(
                "sweep.values: target_class values must be class names or indices");
        }
    } else {
        throw config::ConfigError("sweep.axis: unknown axis '" + axis + "'");
    }
}

const std::vector<std::string> kThroughEvaluate = {"binarize", "decoder", "encoder", "trigger",
                                                   "poison",   "victim",  "evaluate"};

json manifest_point(const json& manifest) {
    json p;
    p["config_hash"] = manifest.at("config_hash");
    p["metrics"] = manifest.at("metrics");
    if (manifest.contains("erase_rate")) p["erase_rate"] = manifest["erase_rate"];
    return p;
}

fs::path reports_dir(const config::ExperimentConfig& cfg) {
    fs::path p = cfg.artifact_root / "reports";
    fs::create_directories(p);
    return p;
}

}  // namespace

const std::vector<std::string>& stage_names() { return kStages; }

bool known_stage(const std::string& stage) {
    return std::find(kStages.begin(), kStages.end(), stage) != kStages.end();
}

RunResult run_pipeline(const config::ExperimentConfig& cfg, std::vector<std::string> stages,
                       bool force) {
    if (stages.empty()) stages = kStages;
    std::set<std::string> requested;
    for (const auto& s : stages) {
        if (!known_stage(s)) throw config::ConfigError("stages: unknown stage '" + s + "'");
        requested.insert(s);
    }
    std::set<std::string> needed = requested;
    for (bool grew = true; grew;) {
        grew = false;
        for (const auto& s : std::vector<std::string>(needed.begin(), needed.end()))
            for (const auto& d : stage_deps().at(s))
                if (needed.insert(d).second) grew = true;
    }

    Context ctx(cfg);
    load_context_data(ctx);

    for (const auto& s : kStages)
        if (needed.count(s)) run_stage(ctx, s, requested.count(s) != 0, force);

    json manifest;
    manifest["format"] = "dfb-run-manifest-1";
    manifest["config"] = cfg.to_json();
    manifest["config_hash"] = cfg.hash();
    json stage_records = json::array();
    for (const auto& s : kStages) {
        auto it = ctx.done.find(s);
        if (it == ctx.done.end()) continue;
        json rec;
        rec["stage"] = s;
        rec["key"] = it->second.key;
        rec["outputs"] = ctx.store.outputs(it->second.dir);
        stage_records.push_back(rec);
    }
    manifest["stages"] = stage_records;
    if (ctx.done.count("encoder")) {
        json res = load_json_file(ctx.done.at("encoder").dir / "result.json");
        manifest["erase_rate"] = res["final_erase_rate"];
    }
    if (ctx.done.count("evaluate"))
        manifest["metrics"] = load_json_file(ctx.done.at("evaluate").dir / "metrics.json");
    if (ctx.done.count("defend")) {
        json rep = load_json_file(ctx.done.at("defend").dir / "defense_report.json");
        json summary;
        summary["nc_target_anomaly"] = rep["neural_cleanse"]["target_anomaly"];
        summary["nc_flagged"] = rep["neural_cleanse"]["flagged"];
        summary["strip_clean_mean"] = rep["strip"]["clean_mean"];
        summary["strip_triggered_mean"] = rep["strip"]["triggered_mean"];
        manifest["defense"] = summary;
    }

    std::vector<std::string> sorted(requested.begin(), requested.end());
    std::string stageset = sorted.size() == kStages.size() ? "all" : "";
    if (stageset.empty())
        for (const auto& s : sorted) stageset += (stageset.empty() ? "" : "+") + s;

    fs::path mdir = cfg.artifact_root / "manifests" / cfg.hash();
    fs::create_directories(mdir);
    fs::path mpath = mdir / (stageset + ".json");
    write_text_file(mpath, canonical_dump(manifest));
    return RunResult{manifest, mpath};
}

json run_sweep(const config::ExperimentConfig& base, const std::string& axis, const json& values,
               bool force) {
    if (!values.is_array() || values.empty())
        throw config::ConfigError("sweep.values: expected a non-empty array");
    static const std::set<std::string> axes = {"poison_ratio", "decoder_arch", "victim_arch",
                                               "target_class"};
    if (!axes.count(axis)) throw config::ConfigError("sweep.axis: unknown axis '" + axis + "'");

    const std::string rid =
        json_hash(json{{"axis", axis}, {"values", values}, {"base", base.to_json()}})
            .substr(0, 16);
    const std::string stem = "sweep-" + axis + "-" + rid;
    fs::path rdir = reports_dir(base);

    json points = json::array();
    render::Series s_asr{"attack rate", {}, {}}, s_acc{"clean acc", {}, {}},
        s_tar{"target acc", {}, {}};
    for (const auto& v : values) {
        config::ExperimentConfig cfg = base;
        apply_axis(cfg, axis, v);
        auto rr = run_pipeline(cfg, kThroughEvaluate, force);
        json p = manifest_point(rr.manifest);
        p["value"] = v;
        points.push_back(p);
        if (v.is_number()) {
            double x = v.get<double>();
            s_asr.x.push_back(x);
            s_asr.y.push_back(p["metrics"]["asr"].get<double>());
            s_acc.x.push_back(x);
            s_acc.y.push_back(p["metrics"]["acc"].get<double>());
            s_tar.x.push_back(x);
            s_tar.y.push_back(p["metrics"]["tar_acc"].get<double>());
        }
    }

    json report;
    report["kind"] = "sweep";
    report["axis"] = axis;
    report["base_config"] = base.to_json();
    report["points"] = points;
    if (!s_asr.x.empty()) {
        report["plot"] = stem + ".png";
        render::line_plot(rdir / (stem + ".png"), {s_asr, s_acc, s_tar}, "sweep: " + axis, axis,
                          "percent");
    }
    report["report_path"] = (rdir / (stem + ".json")).string();
    write_text_file(rdir / (stem + ".json"), canonical_dump(report));
    return report;
}

json run_ablation(const config::ExperimentConfig& base, const std::string& kind,
                  const json& params, bool force) {
    if (!params.is_object() && !params.is_null())
        throw config::ConfigError("ablation.params: expected an object");
    json report;
    report["kind"] = "ablation";
    report["ablation"] = kind;
    report["base_config"] = base.to_json();

    auto eval_run = [&](const config::ExperimentConfig& cfg) {
        return manifest_point(run_pipeline(cfg, kThroughEvaluate, force).manifest);
    };

    if (kind == "min_loss_trigger") {
        config::ExperimentConfig a = base, b = base;
        a.attack.trigger_mode = "fixed";
        b.attack.trigger_mode = "min-loss";
        report["fixed"] = eval_run(a);
        report["min_loss"] = eval_run(b);
        report["asr_gap"] = report["fixed"]["metrics"]["asr"].get<double>() -
                            report["min_loss"]["metrics"]["asr"].get<double>();
    } else if (kind == "cross_domain_trigger") {
        std::string foreign =
            params.is_object() ? params.value("foreign_pood", std::string()) : std::string();
        if (foreign.empty())
            throw config::ConfigError(
                "ablation.params.foreign_pood: required for cross_domain_trigger");
        config::ExperimentConfig native = base, cross = base, clean = base;
        cross.dataset.pood_source = foreign;
        clean.attack.poison_ratio = 0.0;
        report["native"] = eval_run(native);
        report["foreign"] = eval_run(cross);
        report["clean"] = eval_run(clean);
        report["asr_gap"] = report["native"]["metrics"]["asr"].get<double>() -
                            report["foreign"]["metrics"]["asr"].get<double>();
    } else if (kind == "encoder_accuracy") {
        std::vector<int> epochs;
        if (params.is_object() && params.contains("encoder_epochs")) {
            if (!params["encoder_epochs"].is_array())
                throw config::ConfigError("ablation.params.encoder_epochs: expected an array");
            for (const auto& e : params["encoder_epochs"]) {
                if (!e.is_number_integer() || e.get<int>() < 0)
                    throw config::ConfigError(
                        "ablation.params.encoder_epochs: entries must be non-negative integers");
                epochs.push_back(e.get<int>());
            }
        } else {
            int full = base.encoder_hyper.epochs;
            epochs = {0, full / 2, full};
        }
        json pts = json::array();
        render::Series s_er{"erase rate", {}, {}}, s_asr{"attack rate", {}, {}};
        for (int e : epochs) {
            config::ExperimentConfig cfg = base;
            cfg.encoder_hyper.epochs = e;
            json p = eval_run(cfg);
            p["encoder_epochs"] = e;
            pts.push_back(p);
            s_er.x.push_back(e);
            s_er.y.push_back(p["erase_rate"].get<double>() * 100.0);
            s_asr.x.push_back(e);
            s_asr.y.push_back(p["metrics"]["asr"].get<double>());
        }
        report["points"] = pts;
        fs::path rdir = reports_dir(base);
        const std::string rid =
            json_hash(json{{"kind", kind}, {"params", params}, {"base", base.to_json()}})
                .substr(0, 16);
        report["plot"] = "ablation-encoder_accuracy-" + rid + ".png";
        render::line_plot(rdir / report["plot"].get<std::string>(), {s_er, s_asr},
                          "surrogate quality vs attack", "encoder epochs", "percent");
    } else {
        throw config::ConfigError("ablation.kind: unknown kind '" + kind + "'");
    }

    fs::path rdir = reports_dir(base);
    const std::string rid =
        json_hash(json{{"kind", kind}, {"params", params}, {"base", base.to_json()}}).substr(0, 16);
    fs::path rpath = rdir / ("ablation-" + kind + "-" + rid + ".json");
    report["report_path"] = rpath.string();
    write_text_file(rpath, canonical_dump(report));
    return report;
}

void render_report(const json& report, const std::filesystem::path& out_dir) {
    fs::create_directories(out_dir);
    std::ostringstream table;
    table.setf(std::ios::fixed);
    table.precision(2);

    if (report.is_object() && report.value("kind", "") == "sweep") {
        const std::string axis = report.at("axis").get<std::string>();
        table << "sweep over " << axis << "\n";
        table << "value\tacc%\ttar_acc%\tasr%\n";
        render::Series s_asr{"attack rate", {}, {}}, s_acc{"clean acc", {}, {}};
        for (const auto& p : report.at("points")) {
            table << p["value"].dump() << "\t" << p["metrics"]["acc"].get<double>() << "\t"
                  << p["metrics"]["tar_acc"].get<double>() << "\t"
                  << p["metrics"]["asr"].get<double>() << "\n";
            if (p["value"].is_number()) {
                double x = p["value"].get<double>();
                s_asr.x.push_back(x);
                s_asr.y.push_back(p["metrics"]["asr"].get<double>());
                s_acc.x.push_back(x);
                s_acc.y.push_back(p["metrics"]["acc"].get<double>());
            }
        }
        write_text_file(out_dir / "sweep_table.txt", table.str());
        if (!s_asr.x.empty())
            render::line_plot(out_dir / "sweep_plot.png", {s_asr, s_acc}, "sweep: " + axis, axis,
                              "percent");
        return;
    }
    if (report.is_object() && report.value("kind", "") == "ablation") {
        table << "ablation: " << report.at("ablation").get<std::string>() << "\n";
        table << "arm\tacc%\tasr%\n";
        for (const auto& [k, v] : report.items()) {
            if (!v.is_object() || !v.contains("metrics")) continue;
            table << k << "\t" << v["metrics"]["acc"].get<double>() << "\t"
                  << v["metrics"]["asr"].get<double>() << "\n";
        }
        if (report.contains("points"))
            for (const auto& p : report["points"])
                table << "epochs=" << p["encoder_epochs"].get<int>() << "\t"
                      << p["metrics"]["acc"].get<double>() << "\t"
                      << p["metrics"]["asr"].get<double>() << "\n";
        write_text_file(out_dir / "ablation_table.txt", table.str());
        return;
    }
    if (report.is_object() && report.value("format", "") == "dfb-run-manifest-1") {
        table << "run " << report.at("config_hash").get<std::string>().substr(0, 16) << "\n";
        if (report.contains("metrics")) {
            const auto& m = report["metrics"];
            table << "acc%\t" << m["acc"].get<double>() << "\n";
            table << "tar_acc%\t" << m["tar_acc"].get<double>() << "\n";
            table << "asr%\t" << m["asr"].get<double>() << "\n";
        }
        if (report.contains("erase_rate"))
            table << "erase_rate\t" << report["erase_rate"].get<double>() << "\n";
        table << "stages:\n";
        for (const auto& s : report.at("stages"))
            table << "  " << s["stage"].get<std::string>() << "\t"
                  << s["key"].get<std::string>().substr(0, 16) << "\n";
        write_text_file(out_dir / "run_table.txt", table.str());
        return;
    }
    throw config::ConfigError("report: unrecognized report document");
}

}  // namespace dfb::pipeline
