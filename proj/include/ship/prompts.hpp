#pragma once

#include <optional>
#include <string>
#include <vector>

#include "ship/attribute.hpp"
#include "ship/hierarchy.hpp"
#include "ship/vit.hpp"

namespace ship {

// ---------------------------------------------------------------------------
// Prompt-injection strategies. One executor covers them all:
//   - a "carried" prompt block (SIP pools, attribute prompts) is inserted at
//     hierarchy entry layers, propagates within the hierarchy, and is
//     discarded at the next hierarchy boundary;
//   - the shared pool (SSP) is appended fresh at every layer with the same
//     values, and its per-layer outputs are dropped.
// VPT-Shallow is the single-hierarchy special case, VPT-Deep the
// all-singletons one; both also have direct implementations used as
// reduction-identity references.
// ---------------------------------------------------------------------------

enum class StrategyMode { none, vpt_shallow, vpt_deep, sip, sip_ssp, ship_full };

inline const char* to_string(StrategyMode m) {
    switch (m) {
        case StrategyMode::none: return "none";
        case StrategyMode::vpt_shallow: return "vpt_shallow";
        case StrategyMode::vpt_deep: return "vpt_deep";
        case StrategyMode::sip: return "sip";
        case StrategyMode::sip_ssp: return "sip+ssp";
        case StrategyMode::ship_full: return "ship_full";
    }
    return "?";
}

inline StrategyMode strategy_mode_from_string(const std::string& s) {
    if (s == "none") return StrategyMode::none;
    if (s == "vpt_shallow") return StrategyMode::vpt_shallow;
    if (s == "vpt_deep") return StrategyMode::vpt_deep;
    if (s == "sip") return StrategyMode::sip;
    if (s == "sip+ssp" || s == "sip_ssp") return StrategyMode::sip_ssp;
    if (s == "ship_full") return StrategyMode::ship_full;
    throw ConfigError("unknown strategy mode '" + s + "'");
}

struct StrategySpec {
    StrategyMode mode = StrategyMode::none;
    bool use_ap = false;
    bool use_pml = false;
    bool use_da = false;

    bool wants_partition() const {
        return mode == StrategyMode::sip || mode == StrategyMode::sip_ssp ||
               mode == StrategyMode::ship_full;
    }
    bool wants_ssp() const {
        return mode == StrategyMode::sip_ssp || mode == StrategyMode::ship_full;
    }
    bool effective_ap() const { return use_ap || mode == StrategyMode::ship_full; }
    bool effective_pml() const { return use_pml || mode == StrategyMode::ship_full; }
    bool effective_da() const { return use_da || mode == StrategyMode::ship_full; }

    void validate() const {
        if (effective_ap() && !wants_partition()) {
            throw ConfigError("strategy: attribute prompts require a hierarchy (sip-family mode)");
        }
    }
};

struct PromptHyperparams {
    std::size_t prompt_len = 50;       // N_p, prompts per SIP pool
    std::size_t ssp_len = 10;          // N_SS
    std::size_t attr_len = 10;         // N_a
    std::size_t attr_hierarchies = 2;  // M_a
    std::size_t match_tokens = 10;     // N_m
    std::size_t prototype_k = 200;     // K
    double lambda_threshold = 0.95;    // hierarchy threshold
    double lambda_d = 0.1;             // decoupled-attention mix
    double lambda_m = 0.5;             // matching-loss weight
    double lambda_a = 0.1;             // attribute blend
    double attr_temperature = 1.0;
    bool attr_rebuild_per_layer = false;

    void validate() const {
        auto in_unit = [](double v, const char* name) {
            if (v < 0.0 || v > 1.0)
                throw ConfigError(std::string("hyperparams: ") + name + " must lie in [0, 1]");
        };
        in_unit(lambda_d, "lambda_d");
        in_unit(lambda_a, "lambda_a");
        if (lambda_m < 0.0) throw ConfigError("hyperparams: lambda_m must be >= 0");
        if (lambda_threshold > 1.0 || lambda_threshold < -1.0) {
            throw ConfigError("hyperparams: lambda_threshold must lie in [-1, 1]");
        }
        if (attr_temperature <= 0.0) throw ConfigError("hyperparams: attr_temperature must be positive");
    }
};

// Fan-based uniform bound used for all prompt pools.
inline Tensor init_prompt_pool(std::size_t rows, std::size_t d, Rng& rng) {
    Tensor t({rows, d});
    const double r = std::sqrt(6.0 / static_cast<double>(d + std::max<std::size_t>(rows, 1) * d));
    for (std::size_t i = 0; i < t.size(); ++i) t.at(i) = rng.uniform(-r, r);
    return t;
}

struct PromptState {
    std::vector<Tensor> sip_pools;  // one (N_p x d) pool per hierarchy
    Tensor ssp_pool;                // (N_SS x d)
    AttributePromptParams attr;     // holds L_a and its knobs
    PromptHyperparams hp;

    static PromptState init(std::size_t embed_dim, std::size_t num_hierarchies,
                            const PromptHyperparams& hp, std::uint64_t seed) {
        hp.validate();
        PromptState st;
        st.hp = hp;
        Rng rng(seed);
        for (std::size_t g = 0; g < num_hierarchies; ++g)
            st.sip_pools.push_back(init_prompt_pool(hp.prompt_len, embed_dim, rng));
        st.ssp_pool = init_prompt_pool(hp.ssp_len, embed_dim, rng);
        st.attr.learnable = init_prompt_pool(hp.attr_len, embed_dim, rng);
        st.attr.lambda_a = hp.lambda_a;
        st.attr.num_tokens = hp.attr_len;
        st.attr.last_hierarchies = hp.attr_hierarchies;
        st.attr.temperature = hp.attr_temperature;
        st.attr.rebuild_per_layer = hp.attr_rebuild_per_layer;
        return st;
    }

    // Trainable prompt tensors for the given strategy (head excluded).
    NamedParams trainable_params(const StrategySpec& spec) const {
        NamedParams out;
        switch (spec.mode) {
            case StrategyMode::none:
                break;
            case StrategyMode::vpt_shallow:
                out.emplace_back("sip_pool_0", sip_pools.at(0));
                break;
            case StrategyMode::vpt_deep:
            case StrategyMode::sip:
            case StrategyMode::sip_ssp:
            case StrategyMode::ship_full:
                for (std::size_t g = 0; g < sip_pools.size(); ++g)
                    out.emplace_back("sip_pool_" + std::to_string(g), sip_pools[g]);
                break;
        }
        if (spec.wants_ssp()) out.emplace_back("ssp_pool", ssp_pool);
        if (spec.effective_ap()) out.emplace_back("attr_learnable", attr.learnable);
        return out;
    }

    std::size_t trainable_count(const StrategySpec& spec) const {
        std::size_t n = 0;
        for (const auto& [name, t] : trainable_params(spec)) n += t.size();
        return n;
    }
};

// ---------------------------------------------------------------------------
// Unified prompted forward
// ---------------------------------------------------------------------------

struct PromptForwardOptions {
    const HierarchyPartition* partition = nullptr;  // required for sip-family
    bool use_ssp = false;
    bool use_ap = false;
    bool use_da = false;
    double lambda_d = 0.1;
    const PrototypeSet* prototypes = nullptr;  // required when use_ap
    const AttributePromptParams* attr = nullptr;
    bool p2ip_last_layer = true;       // decoupled mode: prompt branch at the final layer
    const std::vector<bool>* ssp_layers = nullptr;  // nullptr = every layer
};

inline ForwardResult forward_prompted(const ViTModel& m, const Tensor& image,
                                      const std::vector<Tensor>& sip_pools,
                                      const Tensor& ssp_pool, const PromptForwardOptions& opt) {
    const std::size_t n_layers = m.cfg.num_layers;
    const std::size_t d = m.cfg.embed_dim;
    const HierarchyPartition* part = opt.partition;
    HierarchyPartition fallback;
    if (!part) {
        fallback = HierarchyPartition::single(n_layers);  // one pool inserted at layer 0
        part = &fallback;
    }
    part->validate(n_layers);
    if (sip_pools.size() != part->num_groups()) {
        throw ConfigError("forward_prompted: " + std::to_string(sip_pools.size()) +
                          " pools for " + std::to_string(part->num_groups()) + " hierarchies");
    }
    for (const Tensor& p : sip_pools) {
        if (p.rank() != 2 || (p.dim(0) > 0 && p.dim(1) != d)) {
            throw ShapeError("forward_prompted: pool shape " + shape_str(p.shape()) +
                             " does not match embed dim " + std::to_string(d));
        }
    }
    if (opt.use_ap && (!opt.prototypes || !opt.attr)) {
        throw ConfigError("forward_prompted: attribute prompts need prototypes and parameters");
    }
    if (opt.use_ap && opt.attr->last_hierarchies > part->num_groups()) {
        throw ConfigError("forward_prompted: M_a = " + std::to_string(opt.attr->last_hierarchies) +
                          " exceeds hierarchy count M = " + std::to_string(part->num_groups()));
    }

    ForwardResult res;
    Tensor z = embed_image(m, image);
    Tensor carried = Tensor::zeros({0, d});
    std::size_t carried_ap_rows = 0;
    const bool has_ssp = opt.use_ssp && ssp_pool.dim(0) > 0;

    // query tokens: most CLS-attended patches of the incoming attention;
    // uniform tie-break order before the very first layer
    auto build_ap = [&](std::size_t layer) {
        std::vector<std::size_t> picked;
        if (layer == 0) {
            for (std::size_t i = 0; i < opt.attr->num_tokens; ++i) picked.push_back(i);
        } else {
            picked = cls_attention_topk(res.acts, layer - 1, opt.attr->num_tokens);
        }
        std::vector<std::size_t> rows;
        rows.reserve(picked.size());
        for (std::size_t p : picked) rows.push_back(p + 1);  // skip CLS row
        return attribute_prompt(gather_rows(z, rows), *opt.prototypes, *opt.attr);
    };

    for (std::size_t layer = 0; layer < n_layers; ++layer) {
        if (part->is_group_start(layer)) {
            const std::size_t g = part->group_of(layer);
            std::vector<Tensor> fresh{sip_pools[g]};
            carried_ap_rows = 0;
            // a zero-length attribute pool disables the component entirely
            if (opt.use_ap && opt.attr->num_tokens > 0 && opt.attr->last_hierarchies > 0 &&
                g + opt.attr->last_hierarchies >= part->num_groups()) {
                fresh.push_back(build_ap(layer));
                carried_ap_rows = opt.attr->num_tokens;
            }
            carried = concat_rows(fresh);
        } else if (opt.use_ap && carried_ap_rows > 0 && opt.attr->rebuild_per_layer) {
            // ablation variant: refresh the attribute block from the current
            // tokens at every layer inside the covered hierarchy
            Tensor sip_part = slice_rows(carried, 0, carried.dim(0) - carried_ap_rows);
            carried = concat_rows({sip_part, build_ap(layer)});
        }
        const bool ssp_here = has_ssp && (!opt.ssp_layers || (*opt.ssp_layers)[layer]);
        Tensor prompts = ssp_here ? concat_rows({carried, ssp_pool}) : concat_rows({carried});

        BlockOptions bo;
        bo.mode = opt.use_da ? AttentionMode::decoupled : AttentionMode::vanilla;
        bo.lambda_d = opt.lambda_d;
        bo.p2ip = opt.p2ip_last_layer && layer + 1 == n_layers;
        BlockResult br = vit_block_forward(m.layers[layer], m.cfg.num_heads, z, prompts, bo);

        z = br.instance;
        carried = carried.dim(0) > 0 ? slice_rows(br.prompts, 0, carried.dim(0))
                                     : Tensor::zeros({0, d});
        if (layer + 1 == n_layers) res.final_prompts = br.prompts;
        res.acts.push_back({br.instance, br.prompts, std::move(br.cls_row), br.instance_keys});
    }
    res.final_instance = z;
    res.logits = head_logits(m, z);
    return res;
}

// ---------------------------------------------------------------------------
// Direct reference paths (used by the reduction-identity checks) and named
// strategy entry points.
// ---------------------------------------------------------------------------

// Prompts inserted once before layer 1 and propagated to the end.
inline ForwardResult forward_vpt_shallow(const ViTModel& m, const Tensor& image,
                                         const Tensor& pool) {
    ForwardResult res;
    Tensor z = embed_image(m, image);
    Tensor prompts = pool.dim(0) ? concat_rows({pool}) : Tensor::zeros({0, m.cfg.embed_dim});
    for (std::size_t layer = 0; layer < m.cfg.num_layers; ++layer) {
        BlockResult br = vit_block_forward(m.layers[layer], m.cfg.num_heads, z, prompts, {});
        z = br.instance;
        prompts = br.prompts;
        if (layer + 1 == m.cfg.num_layers) res.final_prompts = br.prompts;
        res.acts.push_back({br.instance, br.prompts, std::move(br.cls_row), br.instance_keys});
    }
    res.final_instance = z;
    res.logits = head_logits(m, z);
    return res;
}

// A fresh pool at every layer; the previous layer's prompt outputs are
// dropped, never consumed downstream.
inline ForwardResult forward_vpt_deep(const ViTModel& m, const Tensor& image,
                                      const std::vector<Tensor>& pools) {
    if (pools.size() != m.cfg.num_layers) {
        throw ConfigError("forward_vpt_deep: " + std::to_string(pools.size()) + " pools for " +
                          std::to_string(m.cfg.num_layers) + " layers");
    }
    ForwardResult res;
    Tensor z = embed_image(m, image);
    for (std::size_t layer = 0; layer < m.cfg.num_layers; ++layer) {
        Tensor prompts =
            pools[layer].dim(0) ? concat_rows({pools[layer]}) : Tensor::zeros({0, m.cfg.embed_dim});
        BlockResult br = vit_block_forward(m.layers[layer], m.cfg.num_heads, z, prompts, {});
        z = br.instance;
        if (layer + 1 == m.cfg.num_layers) res.final_prompts = br.prompts;
        res.acts.push_back({br.instance, br.prompts, std::move(br.cls_row), br.instance_keys});
    }
    res.final_instance = z;
    res.logits = head_logits(m, z);
    return res;
}

// Semantic-independent prompts over an explicit hierarchy partition.
inline ForwardResult forward_sip(const ViTModel& m, const Tensor& image,
                                 const HierarchyPartition& partition,
                                 const std::vector<Tensor>& pools) {
    PromptForwardOptions opt;
    opt.partition = &partition;
    return forward_prompted(m, image, pools, Tensor::zeros({0, m.cfg.embed_dim}), opt);
}

// SIP base strategy plus the shared pool appended at every layer.
inline ForwardResult forward_ssp(const ViTModel& m, const Tensor& image,
                                 const HierarchyPartition& partition,
                                 const std::vector<Tensor>& pools, const Tensor& ssp_pool) {
    PromptForwardOptions opt;
    opt.partition = &partition;
    opt.use_ssp = true;
    return forward_prompted(m, image, pools, ssp_pool, opt);
}

// Strategy dispatch used by training and the CLI.
inline ForwardResult forward_strategy(const ViTModel& m, const Tensor& image,
                                      const StrategySpec& spec, const PromptState& state,
                                      const HierarchyPartition* partition,
                                      const PrototypeSet* prototypes) {
    spec.validate();
    switch (spec.mode) {
        case StrategyMode::none:
            return forward_plain(m, image);
        case StrategyMode::vpt_shallow:
        case StrategyMode::vpt_deep:
        case StrategyMode::sip:
        case StrategyMode::sip_ssp:
        case StrategyMode::ship_full: {
            HierarchyPartition local;
            if (spec.mode == StrategyMode::vpt_shallow) {
                local = HierarchyPartition::single(m.cfg.num_layers);
            } else if (spec.mode == StrategyMode::vpt_deep) {
                local = HierarchyPartition::singletons(m.cfg.num_layers);
            } else {
                if (!partition) throw ConfigError("strategy: sip-family mode needs a partition");
                local = *partition;
            }
            PromptForwardOptions opt;
            opt.partition = &local;
            opt.use_ssp = spec.wants_ssp();
            opt.use_ap = spec.effective_ap();
            opt.use_da = spec.effective_da();
            opt.lambda_d = state.hp.lambda_d;
            opt.prototypes = prototypes;
            opt.attr = &state.attr;
            std::vector<Tensor> pools = state.sip_pools;
            if (pools.size() != local.num_groups()) {
                throw ConfigError("strategy: prompt state has " + std::to_string(pools.size()) +
                                  " pools, partition wants " + std::to_string(local.num_groups()));
            }
            return forward_prompted(m, image, pools, state.ssp_pool, opt);
        }
    }
    throw ConfigError("strategy: unhandled mode");
}

}  // namespace ship
