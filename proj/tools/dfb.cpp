// Command-line front end: every verb maps onto the library pipeline. Exit
// codes: 0 success, 2 config error, 3 missing dependency, 4 runtime failure.

#include <cmath>
#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "dfb/artifacts.hpp"
#include "dfb/config.hpp"
#include "dfb/data.hpp"
#include "dfb/io.hpp"
#include "dfb/pipeline.hpp"
#include "dfb/poison.hpp"

namespace {

using dfb::json;

dfb::config::ExperimentConfig load_cfg(const std::string& path, const std::string& root_override) {
    auto cfg = dfb::config::load_config_file(path);
    if (!root_override.empty()) {
        cfg.artifact_root = root_override;
    } else if (const char* env = std::getenv("DFB_ARTIFACT_ROOT"); env && *env) {
        cfg.artifact_root = env;
    }
    return cfg;
}

json parse_inline_json(const std::string& text, const std::string& what) {
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        throw dfb::config::ConfigError(what + ": " + e.what());
    }
}

void cmd_ingest(const dfb::config::ExperimentConfig& cfg, const std::string& out) {
    namespace data = dfb::data;
    auto train = data::load_dataset(cfg.dataset, data::Role::victim_train);
    auto test = data::load_dataset(cfg.dataset, data::Role::victim_test);
    auto pood = data::load_dataset(cfg.dataset, data::Role::pood);
    data::save_archive_split(out, train, data::role_name(data::Role::victim_train));
    data::save_archive_split(out, test, data::role_name(data::Role::victim_test));
    data::save_archive_split(out, pood, data::role_name(data::Role::pood));
    std::cout << "ingested " << train.size() << " train / " << test.size() << " test / "
              << pood.size() << " out-of-distribution samples into " << out << "\n";
}

void cmd_validate(const dfb::config::ExperimentConfig& cfg) {
    std::cout << cfg.to_json().dump(2) << "\n";
    std::cout << "config_hash: " << cfg.hash() << "\n";

    namespace data = dfb::data;
    data::LabeledDataset train;
    try {
        train = data::load_dataset(cfg.dataset, data::Role::victim_train);
    } catch (const std::exception& e) {
        throw dfb::config::ConfigError(std::string("dataset.source: ") + e.what());
    }
    int32_t target = cfg.dataset.target_class;
    if (!cfg.dataset.target_class_name.empty()) {
        target = train.label_id(cfg.dataset.target_class_name);
        if (target < 0)
            throw dfb::config::ConfigError("dataset.target_class: class '" +
                                           cfg.dataset.target_class_name +
                                           "' is not in the victim training set");
    }
    if (target < 0 || target >= train.num_classes())
        throw dfb::config::ConfigError("dataset.target_class: index " + std::to_string(target) +
                                       " out of range for " +
                                       std::to_string(train.num_classes()) + " classes");

    const int64_t n = train.size();
    const int64_t avail = static_cast<int64_t>(train.indices_of_class(target).size());
    const auto count = static_cast<int64_t>(std::llround(cfg.attack.poison_ratio * double(n)));
    std::cout << "train samples: " << n << " across " << train.num_classes() << " classes\n";
    std::cout << "target class: " << train.class_names[static_cast<size_t>(target)] << " (index "
              << target << ", " << avail << " samples)\n";
    std::cout << "poison plan: ratio " << cfg.attack.poison_ratio << " of the full set -> "
              << count << " samples\n";
    if (count > avail)
        std::cout << "warning: plan exceeds available target-class samples (" << avail << ")\n";
    std::cout << "budgets: eps_gen " << cfg.attack.eps_gen << ", eps_poison "
              << cfg.attack.eps_poison << ", train scale " << cfg.attack.train_scale
              << ", test amplification " << cfg.attack.amplification << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"data-free clean-label backdoor toolkit"};
    app.require_subcommand(1);

    std::string config_path, artifact_root, out_dir, input_path;
    std::string axis, values_text, kind, params_text = "{}";
    bool force = false, with_deps = false;

    // Verbs that run exactly one pipeline stage.
    const std::vector<std::pair<std::string, std::string>> stage_verbs = {
        {"binarize", "binarize"},       {"train-decoder", "decoder"},
        {"train-encoder", "encoder"},   {"make-trigger", "trigger"},
        {"poison", "poison"},           {"train-victim", "victim"},
        {"evaluate", "evaluate"},       {"defend", "defend"},
    };
    const std::vector<std::string> stage_help = {
        "relabel the out-of-distribution set against the target class",
        "train the binary surrogate decoder",
        "train the residual trigger encoder",
        "select or package the trigger",
        "inject the trigger into the training set",
        "train the victim classifier",
        "measure clean accuracy and attack success",
        "run the defense battery",
    };
    std::vector<CLI::App*> stage_subs;
    for (size_t i = 0; i < stage_verbs.size(); ++i) {
        CLI::App* sub = app.add_subcommand(stage_verbs[i].first, stage_help[i]);
        sub->add_option("--config", config_path, "experiment config (json)")->required();
        sub->add_option("--artifact-root", artifact_root, "override the artifact store root");
        sub->add_flag("--force", force, "rebuild even if a cached artifact exists");
        sub->add_flag("--deps", with_deps, "also run any missing upstream stages");
        stage_subs.push_back(sub);
    }

    CLI::App* ingest = app.add_subcommand("ingest", "package the configured datasets as an archive");
    ingest->add_option("--config", config_path, "experiment config (json)")->required();
    ingest->add_option("--out", out_dir, "archive directory")->required();

    CLI::App* sweep = app.add_subcommand("sweep", "full runs across one config axis");
    sweep->add_option("--config", config_path, "experiment config (json)")->required();
    sweep->add_option("--axis", axis, "poison_ratio | decoder_arch | victim_arch | target_class")
        ->required();
    sweep->add_option("--values", values_text, "json array of axis values")->required();
    sweep->add_option("--artifact-root", artifact_root, "override the artifact store root");
    sweep->add_flag("--force", force, "rebuild cached artifacts");

    CLI::App* ablate = app.add_subcommand("ablate", "controlled comparison runs");
    ablate->add_option("--config", config_path, "experiment config (json)")->required();
    ablate->add_option("--kind", kind,
                       "min_loss_trigger | cross_domain_trigger | encoder_accuracy")
        ->required();
    ablate->add_option("--params", params_text, "json object of ablation parameters");
    ablate->add_option("--artifact-root", artifact_root, "override the artifact store root");
    ablate->add_flag("--force", force, "rebuild cached artifacts");

    CLI::App* report = app.add_subcommand("report", "render a manifest or report as tables/charts");
    report->add_option("--input", input_path, "run manifest, sweep, or ablation json")->required();
    report->add_option("--out", out_dir, "output directory")->required();

    CLI::App* validate = app.add_subcommand("validate", "check a config and show the dry-run plan");
    validate->add_option("--config", config_path, "experiment config (json)")->required();

    try {
        app.parse(argc, argv);

        for (size_t i = 0; i < stage_subs.size(); ++i) {
            if (!stage_subs[i]->parsed()) continue;
            auto cfg = load_cfg(config_path, artifact_root);
            std::vector<std::string> stages;
            if (with_deps) {
                for (const auto& s : dfb::pipeline::stage_names()) {
                    stages.push_back(s);
                    if (s == stage_verbs[i].second) break;
                }
            } else {
                stages = {stage_verbs[i].second};
            }
            auto rr = dfb::pipeline::run_pipeline(cfg, stages, force);
            std::cout << rr.manifest_path.string() << "\n";
            return 0;
        }
        if (ingest->parsed()) {
            cmd_ingest(load_cfg(config_path, artifact_root), out_dir);
            return 0;
        }
        if (sweep->parsed()) {
            auto cfg = load_cfg(config_path, artifact_root);
            json values = parse_inline_json(values_text, "sweep.values");
            json rep = dfb::pipeline::run_sweep(cfg, axis, values, force);
            std::cout << rep["report_path"].get<std::string>() << "\n";
            return 0;
        }
        if (ablate->parsed()) {
            auto cfg = load_cfg(config_path, artifact_root);
            json params = parse_inline_json(params_text, "ablation.params");
            json rep = dfb::pipeline::run_ablation(cfg, kind, params, force);
            std::cout << rep["report_path"].get<std::string>() << "\n";
            return 0;
        }
        if (report->parsed()) {
            json doc = dfb::load_json_file(input_path);
            dfb::pipeline::render_report(doc, out_dir);
            std::cout << out_dir << "\n";
            return 0;
        }
        if (validate->parsed()) {
            cmd_validate(dfb::config::load_config_file(config_path));
            return 0;
        }
        return 0;
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    } catch (const dfb::config::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const dfb::artifacts::DependencyError& e) {
        std::cerr << "dependency error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    }
}
