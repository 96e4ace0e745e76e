#include "dfb/config.hpp"

#include <set>

#include <nlohmann/json.hpp>

#include "dfb/nn/model.hpp"

namespace dfb::config {

namespace {

void check_keys(const json& obj, const std::string& path, const std::set<std::string>& allowed) {
    if (!obj.is_object()) throw ConfigError(path + ": expected an object");
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        if (!allowed.count(it.key()))
            throw ConfigError(path + "." + it.key() + ": unknown key");
    }
}

template <typename T>
T get_or(const json& obj, const std::string& key, const std::string& path, T fallback) {
    if (!obj.contains(key)) return fallback;
    try {
        return obj.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError(path + "." + key + ": wrong type");
    }
}

nn::Hyper parse_hyper(const json& obj, const std::string& path, const nn::Hyper& defaults) {
    check_keys(obj, path,
               {"epochs", "batch_size", "lr", "momentum", "weight_decay", "schedule",
                "milestones", "gamma", "seed", "augmentation"});
    nn::Hyper h = defaults;
    h.epochs = get_or(obj, "epochs", path, h.epochs);
    h.batch_size = get_or(obj, "batch_size", path, h.batch_size);
    h.lr = get_or(obj, "lr", path, h.lr);
    h.momentum = get_or(obj, "momentum", path, h.momentum);
    h.weight_decay = get_or(obj, "weight_decay", path, h.weight_decay);
    h.schedule = get_or(obj, "schedule", path, h.schedule);
    h.milestones = get_or(obj, "milestones", path, h.milestones);
    h.gamma = get_or(obj, "gamma", path, h.gamma);
    h.seed = get_or(obj, "seed", path, h.seed);
    if (obj.contains("augmentation")) {
        try {
            h.augment = data::parse_augmentation(
                obj.at("augmentation").get<std::vector<std::string>>());
        } catch (const std::exception& e) {
            throw ConfigError(path + ".augmentation: " + e.what());
        }
    }
    if (h.epochs < 0) throw ConfigError(path + ".epochs: must be non-negative");
    if (h.batch_size < 1) throw ConfigError(path + ".batch_size: must be positive");
    if (!(h.lr > 0.0f)) throw ConfigError(path + ".lr: must be positive");
    if (h.schedule != "cosine" && h.schedule != "step" && h.schedule != "constant")
        throw ConfigError(path + ".schedule: must be cosine, step, or constant");
    return h;
}

}  // namespace

json ExperimentConfig::to_json() const {
    json j;
    j["name"] = name;
    j["seed"] = seed;
    j["artifact_root"] = artifact_root.string();

    json d;
    d["name"] = dataset.name;
    d["source"] = dataset.source;
    d["shape"] = dataset.shape;
    d["target_class"] = dataset.target_class;
    d["target_class_name"] = dataset.target_class_name;
    d["pood_source"] = dataset.pood_source;
    d["augmentation"] = dataset.augmentation;
    d["seed"] = dataset.seed;
    d["pood_balance_k"] = pood_balance_k;
    j["dataset"] = d;

    json a;
    a["eps_gen"] = attack.eps_gen;
    a["eps_poison"] = attack.eps_poison;
    a["poison_ratio"] = attack.poison_ratio;
    a["trigger_mode"] = attack.trigger_mode;
    a["train_scale"] = attack.train_scale;
    a["amplification"] = attack.amplification;
    a["max_candidates"] = attack.max_candidates;
    j["attack"] = a;

    j["decoder"] = {{"arch", decoder_arch}, {"hyper", decoder_hyper.to_json()}};
    j["encoder"] = {{"hyper", encoder_hyper.to_json()}};
    j["victim"] = {{"arch", victim_arch}, {"hyper", victim_hyper.to_json()}};

    json def;
    def["nc_steps"] = defense.neural_cleanse.steps;
    def["nc_batch_size"] = defense.neural_cleanse.batch_size;
    def["nc_lr"] = defense.neural_cleanse.lr;
    def["nc_lambda_init"] = defense.neural_cleanse.lambda_init;
    def["nc_attack_threshold"] = defense.neural_cleanse.attack_threshold;
    def["nc_patience"] = defense.neural_cleanse.patience;
    def["nc_max_samples"] = defense.neural_cleanse.max_samples;
    def["prune_rates"] = defense.prune_rates;
    def["prune_subset"] = defense.prune_subset;
    def["strip_perturbations"] = defense.strip_perturbations;
    def["strip_probes"] = defense.strip_probes;
    def["sentinet_probes"] = defense.sentinet_probes;
    j["defense"] = def;
    return j;
}

std::string ExperimentConfig::hash() const { return json_hash(to_json()); }

ExperimentConfig validate_config(const json& raw) {
    check_keys(raw, "config",
               {"name", "seed", "artifact_root", "dataset", "attack", "decoder", "encoder",
                "victim", "defense"});
    ExperimentConfig cfg;
    cfg.name = get_or<std::string>(raw, "name", "config", cfg.name);
    cfg.seed = get_or<uint64_t>(raw, "seed", "config", cfg.seed);
    cfg.artifact_root = get_or<std::string>(raw, "artifact_root", "config",
                                            cfg.artifact_root.string());

    if (!raw.contains("dataset")) throw ConfigError("config.dataset: required section missing");
    const json& d = raw.at("dataset");
    check_keys(d, "config.dataset",
               {"name", "source", "shape", "target_class", "pood_source", "augmentation",
                "seed", "pood_balance_k"});
    if (!d.contains("source"))
        throw ConfigError("config.dataset.source: required key missing");
    cfg.dataset.source = d.at("source").get<std::string>();
    cfg.dataset.name = get_or<std::string>(d, "name", "config.dataset", cfg.name + "-data");
    if (d.contains("shape")) {
        cfg.dataset.shape = d.at("shape").get<std::vector<int64_t>>();
        if (cfg.dataset.shape.size() != 3)
            throw ConfigError("config.dataset.shape: expected [H, W, C]");
    }
    if (!d.contains("pood_source"))
        throw ConfigError("config.dataset.pood_source: required key missing");
    cfg.dataset.pood_source = d.at("pood_source").get<std::string>();
    if (!d.contains("target_class"))
        throw ConfigError("config.dataset.target_class: required key missing");
    if (d.at("target_class").is_string())
        cfg.dataset.target_class_name = d.at("target_class").get<std::string>();
    else if (d.at("target_class").is_number_integer())
        cfg.dataset.target_class = d.at("target_class").get<int>();
    else
        throw ConfigError("config.dataset.target_class: expected class name or index");
    cfg.dataset.augmentation =
        get_or<std::vector<std::string>>(d, "augmentation", "config.dataset", {});
    cfg.dataset.seed = get_or<uint64_t>(d, "seed", "config.dataset", cfg.seed);
    cfg.pood_balance_k = get_or<double>(d, "pood_balance_k", "config.dataset", 1.0);
    if (cfg.pood_balance_k <= 0.0)
        throw ConfigError("config.dataset.pood_balance_k: must be positive");

    if (raw.contains("attack")) {
        const json& a = raw.at("attack");
        check_keys(a, "config.attack",
                   {"eps_gen", "eps_poison", "poison_ratio", "trigger_mode", "train_scale",
                    "amplification", "max_candidates"});
        cfg.attack.eps_gen = get_or(a, "eps_gen", "config.attack", cfg.attack.eps_gen);
        cfg.attack.eps_poison = get_or(a, "eps_poison", "config.attack", cfg.attack.eps_poison);
        cfg.attack.poison_ratio =
            get_or(a, "poison_ratio", "config.attack", cfg.attack.poison_ratio);
        cfg.attack.trigger_mode =
            get_or(a, "trigger_mode", "config.attack", cfg.attack.trigger_mode);
        cfg.attack.train_scale = get_or(a, "train_scale", "config.attack", cfg.attack.train_scale);
        cfg.attack.amplification =
            get_or(a, "amplification", "config.attack", cfg.attack.amplification);
        cfg.attack.max_candidates =
            get_or(a, "max_candidates", "config.attack", cfg.attack.max_candidates);
    }
    if (cfg.attack.eps_gen < 0.0f) throw ConfigError("config.attack.eps_gen: must be non-negative");
    if (cfg.attack.eps_gen > cfg.attack.eps_poison)
        throw ConfigError("config.attack.eps_gen exceeds config.attack.eps_poison (" +
                          std::to_string(cfg.attack.eps_gen) + " > " +
                          std::to_string(cfg.attack.eps_poison) + ")");
    if (cfg.attack.poison_ratio < 0.0)
        throw ConfigError("config.attack.poison_ratio: must be non-negative");
    if (cfg.attack.trigger_mode != "fixed" && cfg.attack.trigger_mode != "dynamic" &&
        cfg.attack.trigger_mode != "min-loss")
        throw ConfigError("config.attack.trigger_mode: must be fixed, dynamic, or min-loss");
    if (!(cfg.attack.amplification > 0.0f))
        throw ConfigError("config.attack.amplification: must be positive");
    if (cfg.attack.max_candidates < 0)
        throw ConfigError("config.attack.max_candidates: must be non-negative");

    nn::Hyper decoder_defaults;
    decoder_defaults.epochs = 10;
    decoder_defaults.lr = 0.05f;
    decoder_defaults.seed = cfg.seed * 31 + 1;
    nn::Hyper encoder_defaults;
    encoder_defaults.epochs = 8;
    encoder_defaults.lr = 0.02f;
    encoder_defaults.weight_decay = 0.0f;
    encoder_defaults.seed = cfg.seed * 31 + 2;
    nn::Hyper victim_defaults;
    victim_defaults.epochs = 20;
    victim_defaults.lr = 0.05f;
    victim_defaults.seed = cfg.seed * 31 + 3;

    if (raw.contains("decoder")) {
        check_keys(raw.at("decoder"), "config.decoder", {"arch", "hyper"});
        cfg.decoder_arch = get_or<std::string>(raw.at("decoder"), "arch", "config.decoder",
                                               cfg.decoder_arch);
        cfg.decoder_hyper = raw.at("decoder").contains("hyper")
                                ? parse_hyper(raw.at("decoder").at("hyper"),
                                              "config.decoder.hyper", decoder_defaults)
                                : decoder_defaults;
    } else {
        cfg.decoder_hyper = decoder_defaults;
    }
    if (raw.contains("encoder")) {
        check_keys(raw.at("encoder"), "config.encoder", {"hyper"});
        cfg.encoder_hyper = raw.at("encoder").contains("hyper")
                                ? parse_hyper(raw.at("encoder").at("hyper"),
                                              "config.encoder.hyper", encoder_defaults)
                                : encoder_defaults;
    } else {
        cfg.encoder_hyper = encoder_defaults;
    }
    if (raw.contains("victim")) {
        check_keys(raw.at("victim"), "config.victim", {"arch", "hyper"});
        cfg.victim_arch = get_or<std::string>(raw.at("victim"), "arch", "config.victim",
                                              cfg.victim_arch);
        cfg.victim_hyper = raw.at("victim").contains("hyper")
                               ? parse_hyper(raw.at("victim").at("hyper"), "config.victim.hyper",
                                             victim_defaults)
                               : victim_defaults;
    } else {
        cfg.victim_hyper = victim_defaults;
    }
    if (!nn::known_classifier_arch(cfg.decoder_arch))
        throw ConfigError("config.decoder.arch: unknown architecture " + cfg.decoder_arch);
    if (!nn::known_classifier_arch(cfg.victim_arch))
        throw ConfigError("config.victim.arch: unknown architecture " + cfg.victim_arch);

    if (raw.contains("defense")) {
        const json& f = raw.at("defense");
        check_keys(f, "config.defense",
                   {"nc_steps", "nc_batch_size", "nc_lr", "nc_lambda_init",
                    "nc_attack_threshold", "nc_patience", "nc_max_samples", "prune_rates",
                    "prune_subset", "strip_perturbations", "strip_probes", "sentinet_probes"});
        auto& nc = cfg.defense.neural_cleanse;
        nc.steps = get_or(f, "nc_steps", "config.defense", nc.steps);
        nc.batch_size = get_or(f, "nc_batch_size", "config.defense", nc.batch_size);
        nc.lr = get_or(f, "nc_lr", "config.defense", nc.lr);
        nc.lambda_init = get_or(f, "nc_lambda_init", "config.defense", nc.lambda_init);
        nc.attack_threshold =
            get_or(f, "nc_attack_threshold", "config.defense", nc.attack_threshold);
        nc.patience = get_or(f, "nc_patience", "config.defense", nc.patience);
        nc.max_samples = get_or(f, "nc_max_samples", "config.defense", nc.max_samples);
        cfg.defense.prune_rates =
            get_or(f, "prune_rates", "config.defense", cfg.defense.prune_rates);
        cfg.defense.prune_subset =
            get_or(f, "prune_subset", "config.defense", cfg.defense.prune_subset);
        cfg.defense.strip_perturbations =
            get_or(f, "strip_perturbations", "config.defense", cfg.defense.strip_perturbations);
        cfg.defense.strip_probes =
            get_or(f, "strip_probes", "config.defense", cfg.defense.strip_probes);
        cfg.defense.sentinet_probes =
            get_or(f, "sentinet_probes", "config.defense", cfg.defense.sentinet_probes);
        for (double r : cfg.defense.prune_rates)
            if (r < 0.0 || r >= 1.0)
                throw ConfigError("config.defense.prune_rates: rates must be in [0,1)");
        if (cfg.defense.strip_perturbations < 1)
            throw ConfigError("config.defense.strip_perturbations: must be >= 1");
    }
    cfg.defense.neural_cleanse.seed = cfg.seed * 31 + 4;
    return cfg;
}

ExperimentConfig validate_config_text(const std::string& text) {
    json raw;
    try {
        raw = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config parse error: ") + e.what());
    }
    return validate_config(raw);
}

ExperimentConfig load_config_file(const std::filesystem::path& p) {
    std::string text;
    try {
        text = read_text_file(p);
    } catch (const std::exception& e) {
        throw ConfigError(std::string("cannot read config: ") + e.what());
    }
    return validate_config_text(text);
}

}  // namespace dfb::config
