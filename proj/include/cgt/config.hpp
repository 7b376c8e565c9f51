#pragma once

// JSON run configuration mirroring TrainConfig plus the dataset bundle.
// Every key can be overridden on the command line as --key=value; unknown
// keys are rejected with the list of valid ones.

#include <cgt/dataset.hpp>
#include <cgt/training.hpp>

#include <json.hpp>

#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>

namespace cgt {

struct RunOptions {
    TrainConfig train;
    DatasetBundle dataset;
    int repeats = 1;
    std::string out_dir = ".";
};

namespace detail {

inline bool parse_bool(const std::string& s) {
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
    throw std::invalid_argument("expected a boolean, got '" + s + "'");
}

using Setter = std::function<void(RunOptions&, const std::string&)>;

inline const std::map<std::string, Setter>& config_setters() {
    static const std::map<std::string, Setter> table = {
        {"seed", [](RunOptions& o, const std::string& v) { o.train.seed = std::stoull(v); }},
        {"epochs_pretrain", [](RunOptions& o, const std::string& v) { o.train.epochs_pretrain = std::stoi(v); }},
        {"epochs_finetune", [](RunOptions& o, const std::string& v) { o.train.epochs_finetune = std::stoi(v); }},
        {"epochs_cluster", [](RunOptions& o, const std::string& v) { o.train.epochs_cluster = std::stoi(v); }},
        {"patience", [](RunOptions& o, const std::string& v) { o.train.patience = std::stoi(v); }},
        {"lr", [](RunOptions& o, const std::string& v) { o.train.lr = std::stod(v); }},
        {"adam_beta1", [](RunOptions& o, const std::string& v) { o.train.adam_beta1 = std::stod(v); }},
        {"adam_beta2", [](RunOptions& o, const std::string& v) { o.train.adam_beta2 = std::stod(v); }},
        {"adam_eps", [](RunOptions& o, const std::string& v) { o.train.adam_eps = std::stod(v); }},
        {"weight_decay", [](RunOptions& o, const std::string& v) { o.train.weight_decay = std::stod(v); }},
        {"train_frac", [](RunOptions& o, const std::string& v) { o.train.train_frac = std::stod(v); }},
        {"val_frac", [](RunOptions& o, const std::string& v) { o.train.val_frac = std::stod(v); }},
        {"test_frac", [](RunOptions& o, const std::string& v) { o.train.test_frac = std::stod(v); }},
        {"xi", [](RunOptions& o, const std::string& v) { o.train.xi = std::stod(v); }},
        {"zeta", [](RunOptions& o, const std::string& v) { o.train.zeta = std::stod(v); }},
        {"khop", [](RunOptions& o, const std::string& v) { o.train.khop = std::stoi(v); }},
        {"tau_start", [](RunOptions& o, const std::string& v) { o.train.tau_start = std::stod(v); }},
        {"tau_end", [](RunOptions& o, const std::string& v) { o.train.tau_end = std::stod(v); }},
        {"p_max", [](RunOptions& o, const std::string& v) { o.train.p_max = std::stoi(v); }},
        {"scales", [](RunOptions& o, const std::string& v) { o.train.scales = std::stoi(v); }},
        {"hidden", [](RunOptions& o, const std::string& v) { o.train.hidden = std::stoi(v); }},
        {"heads", [](RunOptions& o, const std::string& v) { o.train.heads = std::stoi(v); }},
        {"layers", [](RunOptions& o, const std::string& v) { o.train.layers = std::stoi(v); }},
        {"communities", [](RunOptions& o, const std::string& v) { o.train.communities = std::stoi(v); }},
        {"community_space", [](RunOptions& o, const std::string& v) { o.train.community_space = v; }},
        {"kmeans_max_iter", [](RunOptions& o, const std::string& v) { o.train.kmeans_max_iter = std::stoi(v); }},
        {"kmeans_tol", [](RunOptions& o, const std::string& v) { o.train.kmeans_tol = std::stod(v); }},
        {"alpha1", [](RunOptions& o, const std::string& v) { o.train.alpha1 = std::stod(v); }},
        {"alpha2", [](RunOptions& o, const std::string& v) { o.train.alpha2 = std::stod(v); }},
        {"beta1", [](RunOptions& o, const std::string& v) { o.train.beta1 = std::stod(v); }},
        {"beta2", [](RunOptions& o, const std::string& v) { o.train.beta2 = std::stod(v); }},
        {"cluster_heads", [](RunOptions& o, const std::string& v) { o.train.cluster_heads = std::stoi(v); }},
        {"cluster_weight", [](RunOptions& o, const std::string& v) { o.train.cluster_weight = std::stod(v); }},
        {"use_pretrain", [](RunOptions& o, const std::string& v) { o.train.use_pretrain = parse_bool(v); }},
        {"use_augmentation", [](RunOptions& o, const std::string& v) { o.train.use_augmentation = parse_bool(v); }},
        {"use_community_attention",
         [](RunOptions& o, const std::string& v) { o.train.use_community_attention = parse_bool(v); }},
        {"post_ffn_residual", [](RunOptions& o, const std::string& v) { o.train.post_ffn_residual = parse_bool(v); }},
        {"freeze_backbone", [](RunOptions& o, const std::string& v) { o.train.freeze_backbone = parse_bool(v); }},
        {"repeats", [](RunOptions& o, const std::string& v) { o.repeats = std::stoi(v); }},
        {"out_dir", [](RunOptions& o, const std::string& v) { o.out_dir = v; }},
        {"dataset.name", [](RunOptions& o, const std::string& v) { o.dataset.name = v; }},
        {"dataset.edges", [](RunOptions& o, const std::string& v) { o.dataset.edges_path = v; }},
        {"dataset.features", [](RunOptions& o, const std::string& v) { o.dataset.features_path = v; }},
        {"dataset.labels", [](RunOptions& o, const std::string& v) { o.dataset.labels_path = v; }},
    };
    return table;
}

inline std::string valid_keys_message() {
    std::ostringstream os;
    os << "valid keys:";
    for (const auto& [k, _] : config_setters()) os << " " << k;
    return os.str();
}

inline std::string json_scalar_to_string(const nlohmann::json& v) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
    if (v.is_number_integer()) return std::to_string(v.get<long long>());
    if (v.is_number_unsigned()) return std::to_string(v.get<unsigned long long>());
    if (v.is_number_float()) {
        std::ostringstream os;
        os.precision(17);
        os << v.get<double>();
        return os.str();
    }
    throw std::invalid_argument("config value must be a scalar");
}

}  // namespace detail

inline void apply_override(RunOptions& opts, const std::string& key, const std::string& value) {
    const auto& table = detail::config_setters();
    auto it = table.find(key);
    if (it == table.end())
        throw std::invalid_argument("unknown config key '" + key + "'; " + detail::valid_keys_message());
    try {
        it->second(opts, value);
    } catch (const std::invalid_argument& e) {
        throw std::invalid_argument("config key '" + key + "': " + e.what());
    }
}

inline RunOptions parse_config_json(const nlohmann::json& j) {
    RunOptions opts;
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (it.key() == "dataset") {
            if (!it.value().is_object())
                throw std::invalid_argument("config key 'dataset' must be an object");
            for (auto dit = it.value().begin(); dit != it.value().end(); ++dit)
                apply_override(opts, "dataset." + dit.key(), detail::json_scalar_to_string(dit.value()));
        } else {
            apply_override(opts, it.key(), detail::json_scalar_to_string(it.value()));
        }
    }
    return opts;
}

inline RunOptions parse_config_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open config file " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::parse_error& e) {
        throw std::runtime_error("config file " + path + ": " + e.what());
    }
    return parse_config_json(j);
}

/// CGT_SEED takes precedence over both the config file and flag overrides.
inline void apply_env_seed(RunOptions& opts) {
    if (const char* env = std::getenv("CGT_SEED")) opts.train.seed = std::stoull(env);
}

inline nlohmann::json config_to_json(const RunOptions& o) {
    nlohmann::json j;
    j["seed"] = o.train.seed;
    j["epochs_pretrain"] = o.train.epochs_pretrain;
    j["epochs_finetune"] = o.train.epochs_finetune;
    j["epochs_cluster"] = o.train.epochs_cluster;
    j["patience"] = o.train.patience;
    j["lr"] = o.train.lr;
    j["adam_beta1"] = o.train.adam_beta1;
    j["adam_beta2"] = o.train.adam_beta2;
    j["adam_eps"] = o.train.adam_eps;
    j["weight_decay"] = o.train.weight_decay;
    j["train_frac"] = o.train.train_frac;
    j["val_frac"] = o.train.val_frac;
    j["test_frac"] = o.train.test_frac;
    j["xi"] = o.train.xi;
    j["zeta"] = o.train.zeta;
    j["khop"] = o.train.khop;
    j["tau_start"] = o.train.tau_start;
    j["tau_end"] = o.train.tau_end;
    j["p_max"] = o.train.p_max;
    j["scales"] = o.train.scales;
    j["hidden"] = o.train.hidden;
    j["heads"] = o.train.heads;
    j["layers"] = o.train.layers;
    j["communities"] = o.train.communities;
    j["community_space"] = o.train.community_space;
    j["kmeans_max_iter"] = o.train.kmeans_max_iter;
    j["kmeans_tol"] = o.train.kmeans_tol;
    j["alpha1"] = o.train.alpha1;
    j["alpha2"] = o.train.alpha2;
    j["beta1"] = o.train.beta1;
    j["beta2"] = o.train.beta2;
    j["cluster_heads"] = o.train.cluster_heads;
    j["cluster_weight"] = o.train.cluster_weight;
    j["use_pretrain"] = o.train.use_pretrain;
    j["use_augmentation"] = o.train.use_augmentation;
    j["use_community_attention"] = o.train.use_community_attention;
    j["post_ffn_residual"] = o.train.post_ffn_residual;
    j["freeze_backbone"] = o.train.freeze_backbone;
    j["repeats"] = o.repeats;
    j["out_dir"] = o.out_dir;
    j["dataset"] = {{"name", o.dataset.name},
                    {"edges", o.dataset.edges_path},
                    {"features", o.dataset.features_path},
                    {"labels", o.dataset.labels_path}};
    return j;
}

}  // namespace cgt
