#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ship/config.hpp"
#include "ship/grad_check.hpp"

namespace ship::cli {

// Exit-code contract: 0 success, 1 validation/config error, 2 numerical
// failure. CI can gate on `ship gradcheck`.
constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitNumeric = 2;

namespace detail {

inline void write_text(const std::string& path, const std::string& content) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write " + path);
    os << content;
    if (!os) throw IoError("write failed: " + path);
}

inline std::string json_text(const nlohmann::json& j) { return j.dump(2) + "\n"; }

inline void ensure_dir(const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory " + dir + ": " + ec.message());
}

inline ViTModel load_model(const ExperimentConfig& cfg) {
    if (cfg.checkpoint.empty()) {
        throw ConfigError("config: 'checkpoint' path is required for this subcommand");
    }
    if (!std::filesystem::exists(cfg.checkpoint)) {
        throw ConfigError("checkpoint not found: " + cfg.checkpoint);
    }
    return ViTModel::load_checkpoint(cfg.checkpoint);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// pretrain: train the toy backbone on the upstream synthetic task and save
// the frozen starting point for every later stage.
// ---------------------------------------------------------------------------
struct PretrainOutputs {
    std::string checkpoint_path;
    RunLog log;
};

inline PretrainOutputs cmd_pretrain(const ExperimentConfig& cfg, std::ostream& out) {
    detail::ensure_dir(cfg.out_dir);
    GeneratedTask task = generate_task(cfg.upstream_task, cfg.seed);

    ViTConfig bc = cfg.backbone;
    bc.num_classes = cfg.upstream_task.num_classes;
    ViTModel model = ViTModel::init(bc, cfg.seed);
    RunLog log = pretrain_backbone(model, task.train, task.test, cfg.train);

    PretrainOutputs res;
    res.checkpoint_path = cfg.out_dir + "/checkpoint.bin";
    model.save_checkpoint(res.checkpoint_path);
    {
        std::ostringstream csv;
        log.write_csv(csv);
        detail::write_text(cfg.out_dir + "/pretrain_log.csv", csv.str());
    }
    detail::write_text(cfg.out_dir + "/pretrain_summary.json", detail::json_text(log.summary_json()));
    detail::write_text(cfg.out_dir + "/timing.json", detail::json_text(log.timing_json()));
    res.log = std::move(log);
    out << "pretrain: " << res.log.epochs.size() << " epochs, final test acc "
        << res.log.epochs.back().test_acc << ", checkpoint " << res.checkpoint_path << "\n";
    return res;
}

// ---------------------------------------------------------------------------
// analyze: inter-layer affinity, threshold sweep, chosen partition.
// ---------------------------------------------------------------------------
struct AnalyzeOutputs {
    AffinityMatrix affinity;
    HierarchyPartition chosen;
    std::string partition_path;
};

inline AnalyzeOutputs cmd_analyze(const ExperimentConfig& cfg, std::ostream& out) {
    detail::ensure_dir(cfg.out_dir);
    AnalyzeOutputs res;
    if (!cfg.dump.empty()) {
        res.affinity = affinity_from_dump(ActivationDump::read(cfg.dump));
    } else {
        ViTModel model = detail::load_model(cfg);
        GeneratedTask task = generate_task(cfg.task, cfg.seed);
        std::vector<Tensor> samples =
            subsample_images(task.train, cfg.affinity_sample_cap, cfg.seed);
        res.affinity = affinity_matrix(model, samples);
    }
    res.affinity.validate();
    res.chosen = greedy_partition(res.affinity, cfg.prompts.lambda_threshold, cfg.hierarchy_rule);

    nlohmann::json sweeps = nlohmann::json::array();
    for (PartitionRule rule : {PartitionRule::anchor, PartitionRule::consecutive}) {
        auto sweep = threshold_sweep(res.affinity, cfg.hierarchy_sweep, rule);
        for (const auto& entry : sweep) {
            sweeps.push_back({{"rule", to_string(rule)},
                              {"lambda", entry.lambda},
                              {"num_groups", entry.num_groups},
                              {"partition", entry.partition.to_json()}});
        }
    }
    nlohmann::json j;
    j["affinity"] = res.affinity.to_json();
    j["chosen_partition"] = res.chosen.to_json();
    j["sweep"] = sweeps;
    detail::write_text(cfg.out_dir + "/affinity.json", detail::json_text(j));
    {
        std::ostringstream csv;
        res.affinity.write_heatmap_csv(csv);
        detail::write_text(cfg.out_dir + "/affinity.csv", csv.str());
    }
    res.partition_path = cfg.out_dir + "/partition.json";
    detail::write_text(res.partition_path, detail::json_text(res.chosen.to_json()));

    out << "analyze: " << res.affinity.n << " layers, " << res.affinity.sample_count
        << " samples, M = " << res.chosen.num_groups() << " at lambda "
        << cfg.prompts.lambda_threshold << " (" << to_string(cfg.hierarchy_rule) << " rule)\n";
    return res;
}

// ---------------------------------------------------------------------------
// tune: prompt tuning under the configured strategy.
// ---------------------------------------------------------------------------
struct TuneOutputs {
    RunLog log;
    HierarchyPartition partition;
    std::size_t trainable_count = 0;
};

inline HierarchyPartition resolve_partition(const ExperimentConfig& cfg, const ViTModel& model,
                                            const GeneratedTask& task) {
    // inline shortcuts cover the fixed partition-shape baselines; anything
    // contiguous can be spelled out in a partition JSON file instead
    if (cfg.partition == "single") return HierarchyPartition::single(model.cfg.num_layers);
    if (cfg.partition == "singletons") return HierarchyPartition::singletons(model.cfg.num_layers);
    if (cfg.partition.rfind("uniform:", 0) == 0) {
        const std::size_t interval = std::stoul(cfg.partition.substr(8));
        return HierarchyPartition::uniform(model.cfg.num_layers, interval);
    }
    if (!cfg.partition.empty()) {
        std::ifstream is(cfg.partition);
        if (!is) throw ConfigError("partition file not found: " + cfg.partition);
        nlohmann::json j;
        try {
            is >> j;
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("partition: invalid JSON: " + std::string(e.what()));
        }
        HierarchyPartition p = HierarchyPartition::from_json(j);
        p.validate(model.cfg.num_layers);
        return p;
    }
    std::vector<Tensor> samples = subsample_images(task.train, cfg.affinity_sample_cap, cfg.seed);
    AffinityMatrix S = affinity_matrix(model, samples);
    return greedy_partition(S, cfg.prompts.lambda_threshold, cfg.hierarchy_rule);
}

inline TuneOutputs cmd_tune(const ExperimentConfig& cfg, std::ostream& out) {
    detail::ensure_dir(cfg.out_dir);
    ViTModel model = detail::load_model(cfg);
    GeneratedTask task = generate_task(cfg.task, cfg.seed);
    model.reset_head(cfg.task.num_classes);

    TuneOutputs res;
    const StrategySpec& spec = cfg.strategy;
    std::size_t pool_count = 1;
    const HierarchyPartition* part_ptr = nullptr;
    if (spec.wants_partition()) {
        res.partition = resolve_partition(cfg, model, task);
        part_ptr = &res.partition;
        pool_count = res.partition.num_groups();
        // reject impossible attribute placement before any compute
        if (spec.effective_ap() && cfg.prompts.attr_hierarchies > pool_count) {
            throw ConfigError("config: M_a = " + std::to_string(cfg.prompts.attr_hierarchies) +
                              " exceeds the partition's M = " + std::to_string(pool_count));
        }
        detail::write_text(cfg.out_dir + "/partition.json",
                           detail::json_text(res.partition.to_json()));
    } else if (spec.mode == StrategyMode::vpt_deep) {
        pool_count = model.cfg.num_layers;
    }

    PrototypeSet protos;
    const PrototypeSet* protos_ptr = nullptr;
    if (spec.effective_ap()) {
        std::vector<Tensor> subset = subsample_images(task.train, cfg.proto_subset_cap, cfg.seed);
        if (subset.size() < cfg.prompts.prototype_k) {
            throw ConfigError("config: K = " + std::to_string(cfg.prompts.prototype_k) +
                              " prototypes from only " + std::to_string(subset.size()) +
                              " subset samples");
        }
        protos = build_prototypes(model, subset, cfg.prompts.prototype_k, cfg.kmeans_max_iter,
                                  cfg.seed);
        protos.save(cfg.out_dir + "/prototypes.bin");
        protos_ptr = &protos;
    }

    PromptState state =
        PromptState::init(model.cfg.embed_dim, pool_count, cfg.prompts, cfg.seed);
    TrainConfig tc = cfg.train;
    tc.seed = cfg.seed;
    res.log = train(model, state, spec, part_ptr, protos_ptr, task.train, task.test, tc);
    res.trainable_count = res.log.trainable_param_count;

    {
        std::ostringstream csv;
        res.log.write_csv(csv);
        detail::write_text(cfg.out_dir + "/runlog.csv", csv.str());
    }
    nlohmann::json summary = res.log.summary_json();
    summary["strategy"] = to_string(spec.mode);
    summary["use_ap"] = spec.effective_ap();
    summary["use_pml"] = spec.effective_pml();
    summary["use_da"] = spec.effective_da();
    if (spec.effective_pml()) {
        // matching-loss value of the tuned state on a few training samples
        NoGradGuard ng;
        double pml_sum = 0.0;
        const std::size_t probe = std::min<std::size_t>(task.train.size(), 8);
        for (std::size_t i = 0; i < probe; ++i) {
            ForwardResult r = forward_strategy(model, task.train.images[i], spec, state, part_ptr,
                                               protos_ptr);
            pml_sum += pml(r.final_prompts, select_match_tokens(r, tc.n_match)).item();
        }
        summary["final_pml_sample"] = pml_sum / static_cast<double>(probe);
    }
    detail::write_text(cfg.out_dir + "/runlog.json", detail::json_text(summary));
    detail::write_text(cfg.out_dir + "/timing.json", detail::json_text(res.log.timing_json()));

    out << "tune[" << to_string(spec.mode) << "]: final test acc "
        << res.log.epochs.back().test_acc << ", trainable params " << res.trainable_count << "\n";
    return res;
}

// ---------------------------------------------------------------------------
// ablate: component on/off grid plus hyperparameter sweeps, one CSV row per
// (cell, seed). Failures are recorded and the grid continues.
// ---------------------------------------------------------------------------
struct AblateCell {
    std::string id;
    std::string group;
    std::string param;
    std::string value;
    ExperimentConfig cfg;
};

struct AblateOutputs {
    std::string csv_path;
    std::size_t cells = 0;
    std::size_t failures = 0;
};

inline std::vector<AblateCell> ablate_grid(const ExperimentConfig& base) {
    std::vector<AblateCell> cells;
    auto push = [&](const std::string& id, const std::string& group, const std::string& param,
                    const std::string& value, ExperimentConfig cfg) {
        cells.push_back({id, group, param, value, std::move(cfg)});
    };
    auto with_strategy = [&](StrategyMode mode, bool ap, bool pml, bool da) {
        ExperimentConfig c = base;
        c.strategy.mode = mode;
        c.strategy.use_ap = ap;
        c.strategy.use_pml = pml;
        c.strategy.use_da = da;
        return c;
    };

    // component on/off grid
    push("baseline_vpt_deep", "components", "row", "vpt_deep",
         with_strategy(StrategyMode::vpt_deep, false, false, false));
    push("sip", "components", "row", "sip", with_strategy(StrategyMode::sip, false, false, false));
    push("sip_da", "components", "row", "sip+da",
         with_strategy(StrategyMode::sip, false, false, true));
    push("sip_ssp_da", "components", "row", "sip+ssp+da",
         with_strategy(StrategyMode::sip_ssp, false, false, true));
    push("sip_ssp_ap_da", "components", "row", "sip+ssp+ap+da",
         with_strategy(StrategyMode::sip_ssp, true, false, true));
    push("ship_full", "components", "row", "ship_full",
         with_strategy(StrategyMode::ship_full, false, false, false));

    // hyperparameter sweeps on the full method
    for (std::size_t k : {20, 50, 100, 200}) {
        ExperimentConfig c = with_strategy(StrategyMode::ship_full, false, false, false);
        c.prompts.prototype_k = k;
        push("k_" + std::to_string(k), "k_sweep", "K", std::to_string(k), std::move(c));
    }
    for (std::size_t ma : {1, 2, 3, 4}) {
        ExperimentConfig c = with_strategy(StrategyMode::ship_full, false, false, false);
        c.prompts.attr_hierarchies = ma;
        push("ma_" + std::to_string(ma), "ma_sweep", "M_a", std::to_string(ma), std::move(c));
    }
    for (std::size_t nm : {5, 10, 20, 50}) {
        ExperimentConfig c = with_strategy(StrategyMode::ship_full, false, false, false);
        c.prompts.match_tokens = nm;
        c.train.n_match = nm;
        push("nm_" + std::to_string(nm), "nm_sweep", "N_m", std::to_string(nm), std::move(c));
    }
    for (double ld : {0.01, 0.1, 0.3, 0.5}) {
        ExperimentConfig c = with_strategy(StrategyMode::ship_full, false, false, false);
        c.prompts.lambda_d = ld;
        std::ostringstream v;
        v << ld;
        push("lambda_d_" + v.str(), "lambda_d_sweep", "lambda_d", v.str(), std::move(c));
    }
    return cells;
}

inline AblateOutputs cmd_ablate(const ExperimentConfig& cfg, std::ostream& out) {
    detail::ensure_dir(cfg.out_dir);
    std::vector<AblateCell> cells = ablate_grid(cfg);

    std::ostringstream csv;
    csv << "cell,group,param,value,seed,final_test_acc,final_test_loss,trainable_params,status\n";
    csv.precision(17);
    AblateOutputs res;
    res.cells = cells.size();
    for (const AblateCell& cell : cells) {
        for (std::uint64_t seed : cfg.ablate_seeds) {
            ExperimentConfig cell_cfg = cell.cfg;
            cell_cfg.seed = seed;
            cell_cfg.out_dir = cfg.out_dir + "/cells/" + cell.id + "_s" + std::to_string(seed);
            try {
                std::ostringstream sink;
                TuneOutputs t = cmd_tune(cell_cfg, sink);
                csv << cell.id << "," << cell.group << "," << cell.param << "," << cell.value << ","
                    << seed << "," << t.log.epochs.back().test_acc << ","
                    << t.log.epochs.back().test_loss << "," << t.trainable_count << ",ok\n";
            } catch (const std::exception& e) {
                ++res.failures;
                std::string msg = e.what();
                for (char& ch : msg)
                    if (ch == ',' || ch == '\n') ch = ';';
                csv << cell.id << "," << cell.group << "," << cell.param << "," << cell.value << ","
                    << seed << ",,,," << "error: " << msg << "\n";
            }
        }
    }
    res.csv_path = cfg.out_dir + "/ablate.csv";
    detail::write_text(res.csv_path, csv.str());
    out << "ablate: " << res.cells << " cells x " << cfg.ablate_seeds.size() << " seeds, "
        << res.failures << " failed cells recorded, table " << res.csv_path << "\n";
    return res;
}

// ---------------------------------------------------------------------------
// gradcheck: the finite-difference suite over every differentiable path the
// method adds. Any component over tolerance fails the command.
// ---------------------------------------------------------------------------
struct GradCheckOutputs {
    struct Component {
        std::string name;
        double max_rel_err = 0.0;
    };
    std::vector<Component> components;
    double tolerance = 1e-4;
    bool passed = true;
};

inline GradCheckOutputs cmd_gradcheck(std::uint64_t seed, std::ostream& out, double tol = 1e-4) {
    GradCheckOutputs res;
    res.tolerance = tol;
    Rng rng(seed == 0 ? 12345 : seed);
    auto rand_t = [&](std::vector<std::size_t> shape, double lo = -1.0, double hi = 1.0) {
        Tensor t(std::move(shape));
        for (std::size_t i = 0; i < t.size(); ++i) t.at(i) = rng.uniform(lo, hi);
        return t;
    };
    auto record = [&](const std::string& name, const GradCheckReport& report) {
        res.components.push_back({name, report.max_rel_err});
        res.passed = res.passed && report.max_rel_err <= tol;
        out << "gradcheck " << name << ": max rel err " << report.max_rel_err << " "
            << (report.max_rel_err <= tol ? "PASS" : "FAIL") << "\n";
    };

    // backbone op chain
    {
        Tensor x = rand_t({4, 6});
        Tensor w = rand_t({6, 6});
        Tensor gamma = rand_t({6}, 0.5, 1.5);
        Tensor beta = rand_t({6});
        auto f = [&]() {
            Tensor h = gelu(matmul(x, w));
            Tensor ln = layer_norm(h, gamma, beta);
            return mean_all(softmax(matmul(ln, transpose(ln)), 1));
        };
        record("backbone_ops", grad_check(f, {{"x", x}, {"w", w}, {"gamma", gamma}, {"beta", beta}},
                                          1e-5));
    }
    // matching loss
    {
        Tensor prompts = rand_t({4, 5});
        Tensor tokens = rand_t({6, 5});
        auto f = [&]() { return pml(prompts, tokens); };
        record("prompt_matching_loss", grad_check(f, {{"prompts", prompts}, {"tokens", tokens}}, 1e-6));
    }
    // attribute aggregation path
    {
        PrototypeSet protos;
        protos.prototypes = rand_t({5, 6}, 0.2, 1.0);
        protos.k = 5;
        AttributePromptParams params;
        params.learnable = rand_t({3, 6});
        params.num_tokens = 3;
        params.lambda_a = 0.1;
        Tensor tokens = rand_t({3, 6}, 0.2, 1.0);
        Tensor weights = rand_t({3, 6});
        auto f = [&]() { return sum_all(mul(attribute_prompt(tokens, protos, params), weights)); };
        record("attribute_path",
               grad_check(f, {{"L_a", params.learnable}, {"tokens", tokens}}, 1e-6));
    }
    // decoupled attention
    {
        const std::size_t d = 8;
        AttentionWeights w;
        w.wq = rand_t({d, d}, -0.5, 0.5);
        w.bq = rand_t({d}, -0.1, 0.1);
        w.wk = rand_t({d, d}, -0.5, 0.5);
        w.bk = rand_t({d}, -0.1, 0.1);
        w.wv = rand_t({d, d}, -0.5, 0.5);
        w.bv = rand_t({d}, -0.1, 0.1);
        w.wo = rand_t({d, d}, -0.5, 0.5);
        w.bo = rand_t({d}, -0.1, 0.1);
        Tensor z = rand_t({4, d});
        Tensor p = rand_t({2, d});
        Tensor mixw = rand_t({4, d});
        auto f = [&]() {
            return sum_all(mul(decoupled_instance_attention(w, 2, z, p, 0.1), mixw));
        };
        record("decoupled_attention",
               grad_check(f, {{"z", z}, {"prompts", p}, {"wq", w.wq}, {"wv", w.wv}, {"wo", w.wo}},
                          1e-5));
    }
    // end-to-end combined objective on a micro SHIP configuration
    {
        ViTConfig cfg;
        cfg.num_layers = 2;
        cfg.embed_dim = 8;
        cfg.num_heads = 2;
        cfg.patch_grid = 2;
        cfg.patch_size = 2;
        cfg.mlp_ratio = 2;
        cfg.num_classes = 3;
        ViTModel model = ViTModel::init(cfg, 77);
        for (std::size_t i = 0; i < model.head_w.size(); ++i)
            model.head_w.at(i) = rng.uniform(-0.3, 0.3);
        model.set_backbone_trainable(false);
        model.set_head_trainable(true);

        HierarchyPartition part;
        part.groups = {{0, 0}, {1, 1}};
        PromptHyperparams hp;
        hp.prompt_len = 2;
        hp.ssp_len = 2;
        hp.attr_len = 2;
        hp.attr_hierarchies = 1;
        hp.match_tokens = 3;
        PromptState state = PromptState::init(cfg.embed_dim, 2, hp, 78);
        PrototypeSet protos;
        protos.prototypes = rand_t({3, cfg.embed_dim}, 0.2, 1.0);
        protos.k = 3;
        StrategySpec spec;
        spec.mode = StrategyMode::ship_full;
        Tensor image = rand_t({cfg.image_channels, cfg.image_size(), cfg.image_size()});

        auto f = [&]() {
            ForwardResult r = forward_strategy(model, image, spec, state, &part, &protos);
            Tensor tokens = select_match_tokens(r, hp.match_tokens);
            return combined_loss(r.logits, {1}, r.final_prompts, tokens, hp.lambda_m);
        };
        record("combined_loss_end_to_end",
               grad_check(f,
                          {{"sip_pool_0", state.sip_pools[0]},
                           {"sip_pool_1", state.sip_pools[1]},
                           {"ssp_pool", state.ssp_pool},
                           {"attr_learnable", state.attr.learnable},
                           {"head_w", model.head_w},
                           {"head_b", model.head_b}},
                          1e-5));
    }

    out << "gradcheck: " << res.components.size() << " components, tolerance " << tol << ", "
        << (res.passed ? "ALL PASS" : "FAILURES PRESENT") << "\n";
    return res;
}

// ---------------------------------------------------------------------------
// argument parsing and dispatch
// ---------------------------------------------------------------------------
inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout,
               std::ostream& err = std::cerr) {
    CLI::App app{"toy-scale ViT prompt-tuning laboratory"};
    app.require_subcommand(1);

    std::string config_path, out_dir;
    std::uint64_t seed_override = 0;
    bool seed_given = false;

    auto add_common = [&](CLI::App* sub, bool config_required) {
        auto* copt = sub->add_option("--config", config_path, "experiment config JSON");
        if (config_required) copt->required();
        sub->add_option("--out", out_dir, "output directory (overrides config out_dir)");
        sub->add_option("--seed", seed_override, "seed (overrides config seed)")
            ->each([&](const std::string&) { seed_given = true; });
    };

    CLI::App* pre = app.add_subcommand("pretrain", "train the upstream toy backbone");
    add_common(pre, true);
    CLI::App* ana = app.add_subcommand("analyze", "inter-layer affinity and hierarchy partition");
    add_common(ana, true);
    CLI::App* tun = app.add_subcommand("tune", "prompt tuning under the configured strategy");
    add_common(tun, true);
    CLI::App* abl = app.add_subcommand("ablate", "component grid and hyperparameter sweeps");
    add_common(abl, true);
    CLI::App* grd = app.add_subcommand("gradcheck", "finite-difference gradient suite");
    add_common(grd, false);

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {  // --help
            out << app.help();
            return kExitOk;
        }
        err << "argument error: " << e.what() << "\n";
        return kExitConfig;
    }

    try {
        if (grd->parsed()) {
            GradCheckOutputs g = cmd_gradcheck(seed_given ? seed_override : 0, out);
            return g.passed ? kExitOk : kExitNumeric;
        }
        ExperimentConfig cfg = ExperimentConfig::load(config_path);
        if (!out_dir.empty()) cfg.out_dir = out_dir;
        if (seed_given) cfg.seed = seed_override;
        cfg.validate();
        if (pre->parsed()) {
            cmd_pretrain(cfg, out);
        } else if (ana->parsed()) {
            cmd_analyze(cfg, out);
        } else if (tun->parsed()) {
            cmd_tune(cfg, out);
        } else if (abl->parsed()) {
            cmd_ablate(cfg, out);
        }
        return kExitOk;
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const ParseError& e) {
        err << "parse error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const IoError& e) {
        err << "io error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const ShapeError& e) {
        err << "shape error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const DegenerateInputError& e) {
        err << "degenerate input: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const NumericError& e) {
        err << "numeric error: " << e.what() << "\n";
        return kExitNumeric;
    }
}

}  // namespace ship::cli
