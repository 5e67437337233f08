#pragma once

#include <fstream>
#include <set>
#include <string>

#include <json.hpp>

#include "ship/prompts.hpp"
#include "ship/train.hpp"

namespace ship {

// ---------------------------------------------------------------------------
// Experiment configuration: one JSON file fully determines a run. The schema
// is strict: unknown keys are rejected everywhere, and every range check runs
// before any compute starts.
// ---------------------------------------------------------------------------

namespace config_detail {

inline void check_keys(const nlohmann::json& j, const std::set<std::string>& allowed,
                       const std::string& context) {
    if (!j.is_object()) throw ConfigError("config: '" + context + "' must be an object");
    for (const auto& [key, value] : j.items()) {
        if (!allowed.count(key)) {
            throw ConfigError("config: unknown key '" + key + "' in " + context);
        }
    }
}

template <typename T>
T get_or(const nlohmann::json& j, const char* key, T fallback) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config: bad value for '") + key + "': " + e.what());
    }
}

}  // namespace config_detail

struct ExperimentConfig {
    std::uint64_t seed = 0;
    std::string out_dir = "runs/out";
    std::string checkpoint;  // input for analyze/tune/ablate
    std::string partition;   // optional partition JSON for tune/ablate
    std::string dump;        // optional activation dump for analyze

    ViTConfig backbone;
    SyntheticTaskSpec upstream_task;
    SyntheticTaskSpec task;
    StrategySpec strategy;
    TrainConfig train;
    PromptHyperparams prompts;

    PartitionRule hierarchy_rule = PartitionRule::anchor;
    std::vector<double> hierarchy_sweep;  // thresholds reported by analyze
    std::size_t affinity_sample_cap = 1024;

    std::size_t proto_subset_cap = 1024;
    std::size_t kmeans_max_iter = 100;

    std::vector<std::uint64_t> ablate_seeds;  // per-seed repeats for ablate cells

    static ExperimentConfig defaults() {
        ExperimentConfig c;
        c.upstream_task.num_classes = 8;
        c.task.num_classes = 6;
        c.hierarchy_sweep = {1.0, 0.999, 0.99, 0.98, 0.97, 0.96, 0.95, 0.9, 0.8, 0.7, 0.5, 0.0};
        c.ablate_seeds = {0, 1, 2};
        return c;
    }

    void validate() const {
        backbone.validate();
        upstream_task.validate();
        task.validate();
        strategy.validate();
        train.validate();
        prompts.validate();
        if (task.patch_grid != backbone.patch_grid || task.patch_size != backbone.patch_size ||
            task.channels != backbone.image_channels) {
            throw ConfigError("config: task geometry does not match the backbone");
        }
        if (upstream_task.patch_grid != backbone.patch_grid ||
            upstream_task.patch_size != backbone.patch_size ||
            upstream_task.channels != backbone.image_channels) {
            throw ConfigError("config: upstream task geometry does not match the backbone");
        }
        if (prompts.attr_len > backbone.num_patches() || prompts.match_tokens > backbone.num_patches()) {
            throw ConfigError("config: N_a and N_m cannot exceed the patch count " +
                              std::to_string(backbone.num_patches()));
        }
        for (double l : hierarchy_sweep) {
            if (l > 1.0 || l < -1.0) {
                throw ConfigError("config: sweep threshold " + std::to_string(l) +
                                  " outside [-1, 1]");
            }
        }
        if (kmeans_max_iter == 0) throw ConfigError("config: kmeans_max_iter must be positive");
        if (affinity_sample_cap == 0 || proto_subset_cap == 0) {
            throw ConfigError("config: sample caps must be positive");
        }
    }

    static SyntheticTaskSpec parse_task(const nlohmann::json& j, const std::string& context,
                                        SyntheticTaskSpec base) {
        config_detail::check_keys(j,
                                  {"num_classes", "train_per_class", "test_per_class", "patch_grid",
                                   "patch_size", "channels", "semantic_depth", "noise", "amplitude"},
                                  context);
        using config_detail::get_or;
        base.num_classes = get_or(j, "num_classes", base.num_classes);
        base.train_per_class = get_or(j, "train_per_class", base.train_per_class);
        base.test_per_class = get_or(j, "test_per_class", base.test_per_class);
        base.patch_grid = get_or(j, "patch_grid", base.patch_grid);
        base.patch_size = get_or(j, "patch_size", base.patch_size);
        base.channels = get_or(j, "channels", base.channels);
        base.semantic_depth = get_or(j, "semantic_depth", base.semantic_depth);
        base.noise = get_or(j, "noise", base.noise);
        base.amplitude = get_or(j, "amplitude", base.amplitude);
        return base;
    }

    static ExperimentConfig from_json(const nlohmann::json& j) {
        using config_detail::check_keys;
        using config_detail::get_or;
        check_keys(j,
                   {"seed", "out_dir", "checkpoint", "partition", "dump", "backbone",
                    "upstream_task", "task", "strategy", "train", "prompts", "hierarchy",
                    "attribute", "da", "pml", "ablate"},
                   "top level");
        ExperimentConfig c = defaults();
        c.seed = get_or(j, "seed", c.seed);
        c.out_dir = get_or(j, "out_dir", c.out_dir);
        c.checkpoint = get_or(j, "checkpoint", c.checkpoint);
        c.partition = get_or(j, "partition", c.partition);
        c.dump = get_or(j, "dump", c.dump);

        if (j.contains("backbone")) {
            const auto& b = j.at("backbone");
            check_keys(b,
                       {"num_layers", "embed_dim", "num_heads", "patch_grid", "patch_size",
                        "mlp_ratio", "image_channels", "num_classes"},
                       "backbone");
            c.backbone.num_layers = get_or(b, "num_layers", c.backbone.num_layers);
            c.backbone.embed_dim = get_or(b, "embed_dim", c.backbone.embed_dim);
            c.backbone.num_heads = get_or(b, "num_heads", c.backbone.num_heads);
            c.backbone.patch_grid = get_or(b, "patch_grid", c.backbone.patch_grid);
            c.backbone.patch_size = get_or(b, "patch_size", c.backbone.patch_size);
            c.backbone.mlp_ratio = get_or(b, "mlp_ratio", c.backbone.mlp_ratio);
            c.backbone.image_channels = get_or(b, "image_channels", c.backbone.image_channels);
            c.backbone.num_classes = get_or(b, "num_classes", c.backbone.num_classes);
        }
        // tasks inherit the backbone geometry unless overridden
        SyntheticTaskSpec geo;
        geo.patch_grid = c.backbone.patch_grid;
        geo.patch_size = c.backbone.patch_size;
        geo.channels = c.backbone.image_channels;
        c.upstream_task = geo;
        c.upstream_task.num_classes = 8;
        c.task = geo;
        c.task.num_classes = 6;
        if (j.contains("upstream_task"))
            c.upstream_task = parse_task(j.at("upstream_task"), "upstream_task", c.upstream_task);
        if (j.contains("task")) c.task = parse_task(j.at("task"), "task", c.task);

        if (j.contains("strategy")) {
            const auto& s = j.at("strategy");
            check_keys(s, {"mode", "use_ap", "use_pml", "use_da"}, "strategy");
            c.strategy.mode = strategy_mode_from_string(get_or<std::string>(s, "mode", "none"));
            c.strategy.use_ap = get_or(s, "use_ap", false);
            c.strategy.use_pml = get_or(s, "use_pml", false);
            c.strategy.use_da = get_or(s, "use_da", false);
        }
        if (j.contains("train")) {
            const auto& t = j.at("train");
            check_keys(t, {"epochs", "batch_size", "lr", "weight_decay", "micro_batch"}, "train");
            c.train.epochs = get_or(t, "epochs", c.train.epochs);
            c.train.batch_size = get_or(t, "batch_size", c.train.batch_size);
            c.train.lr = get_or(t, "lr", c.train.lr);
            c.train.weight_decay = get_or(t, "weight_decay", c.train.weight_decay);
            c.train.micro_batch = get_or(t, "micro_batch", c.train.micro_batch);
        }
        if (j.contains("prompts")) {
            const auto& p = j.at("prompts");
            check_keys(p, {"n_p", "n_ss"}, "prompts");
            c.prompts.prompt_len = get_or(p, "n_p", c.prompts.prompt_len);
            c.prompts.ssp_len = get_or(p, "n_ss", c.prompts.ssp_len);
        }
        if (j.contains("hierarchy")) {
            const auto& h = j.at("hierarchy");
            check_keys(h, {"lambda", "rule", "sweep", "sample_cap"}, "hierarchy");
            c.prompts.lambda_threshold = get_or(h, "lambda", c.prompts.lambda_threshold);
            c.hierarchy_rule =
                partition_rule_from_string(get_or<std::string>(h, "rule", "anchor"));
            c.hierarchy_sweep = get_or(h, "sweep", c.hierarchy_sweep);
            c.affinity_sample_cap = get_or(h, "sample_cap", c.affinity_sample_cap);
        }
        if (j.contains("attribute")) {
            const auto& a = j.at("attribute");
            check_keys(a,
                       {"k", "m_a", "lambda_a", "n_a", "temperature", "subset_cap", "kmeans_iters",
                        "rebuild_per_layer"},
                       "attribute");
            c.prompts.prototype_k = get_or(a, "k", c.prompts.prototype_k);
            c.prompts.attr_hierarchies = get_or(a, "m_a", c.prompts.attr_hierarchies);
            c.prompts.lambda_a = get_or(a, "lambda_a", c.prompts.lambda_a);
            c.prompts.attr_len = get_or(a, "n_a", c.prompts.attr_len);
            c.prompts.attr_temperature = get_or(a, "temperature", c.prompts.attr_temperature);
            c.proto_subset_cap = get_or(a, "subset_cap", c.proto_subset_cap);
            c.kmeans_max_iter = get_or(a, "kmeans_iters", c.kmeans_max_iter);
            c.prompts.attr_rebuild_per_layer = get_or(a, "rebuild_per_layer", false);
        }
        if (j.contains("da")) {
            const auto& d = j.at("da");
            check_keys(d, {"lambda_d"}, "da");
            c.prompts.lambda_d = get_or(d, "lambda_d", c.prompts.lambda_d);
        }
        if (j.contains("pml")) {
            const auto& p = j.at("pml");
            check_keys(p, {"lambda_m", "n_m"}, "pml");
            c.prompts.lambda_m = get_or(p, "lambda_m", c.prompts.lambda_m);
            c.prompts.match_tokens = get_or(p, "n_m", c.prompts.match_tokens);
        }
        if (j.contains("ablate")) {
            const auto& a = j.at("ablate");
            check_keys(a, {"seeds"}, "ablate");
            c.ablate_seeds = get_or(a, "seeds", c.ablate_seeds);
        }
        c.train.lambda_m = c.prompts.lambda_m;
        c.train.n_match = c.prompts.match_tokens;
        c.validate();
        return c;
    }

    static ExperimentConfig load(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw ConfigError("config: cannot open " + path);
        nlohmann::json j;
        try {
            is >> j;
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("config: invalid JSON in " + path + ": " + e.what());
        }
        return from_json(j);
    }
};

}  // namespace ship
