#include <gtest/gtest.h>

#include "ship/grad_check.hpp"
#include "ship/prompts.hpp"

using namespace ship;

namespace {

ViTConfig small_config(std::size_t layers = 8) {
    ViTConfig cfg;
    cfg.num_layers = layers;
    cfg.embed_dim = 16;
    cfg.num_heads = 4;
    cfg.patch_grid = 4;
    cfg.patch_size = 2;
    cfg.mlp_ratio = 2;
    cfg.num_classes = 4;
    return cfg;
}

Tensor random_tensor(Rng& rng, std::vector<std::size_t> shape, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t.at(i) = rng.uniform(lo, hi);
    return t;
}

Tensor random_image(Rng& rng, const ViTConfig& cfg) {
    return random_tensor(rng, {cfg.image_channels, cfg.image_size(), cfg.image_size()});
}

// Head with nonzero weights so logits react to prompt-induced changes.
ViTModel random_model(const ViTConfig& cfg, std::uint64_t seed) {
    ViTModel m = ViTModel::init(cfg, seed);
    Rng rng(seed + 1);
    for (std::size_t i = 0; i < m.head_w.size(); ++i) m.head_w.at(i) = rng.uniform(-0.3, 0.3);
    return m;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    EXPECT_EQ(a.shape(), b.shape());
    double mx = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) mx = std::max(mx, std::abs(a.at(i) - b.at(i)));
    return mx;
}

}  // namespace

TEST(VptShallow, EmptyPromptCollapsesToPlain) {
    ViTConfig cfg = small_config();
    ViTModel m = random_model(cfg, 70);
    Rng rng(71);
    Tensor image = random_image(rng, cfg);
    Tensor empty = Tensor::zeros({0, cfg.embed_dim});
    ForwardResult plain = forward_plain(m, image);
    ForwardResult shallow = forward_vpt_shallow(m, image, empty);
    EXPECT_EQ(plain.logits.values(), shallow.logits.values());
}

TEST(VptShallow, PromptFeaturesPresentAtEveryLayer) {
    ViTConfig cfg = small_config();
    ViTModel m = random_model(cfg, 72);
    Rng rng(73);
    Tensor pool = random_tensor(rng, {5, cfg.embed_dim});
    ForwardResult r = forward_vpt_shallow(m, random_image(rng, cfg), pool);
    ASSERT_EQ(r.acts.size(), cfg.num_layers);
    for (const auto& a : r.acts) {
        EXPECT_EQ(a.prompts.dim(0), 5u);
        EXPECT_EQ(a.instance.dim(0), cfg.seq_len());  // N_x invariant across layers
    }
}

TEST(ReductionIdentity, SipSingleHierarchyIsVptShallow) {
    ViTConfig cfg = small_config();
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        ViTModel m = random_model(cfg, 80 + seed);
        Rng rng(90 + seed);
        Tensor image = random_image(rng, cfg);
        Tensor pool = random_tensor(rng, {6, cfg.embed_dim});
        ForwardResult direct = forward_vpt_shallow(m, image, pool);
        ForwardResult via_sip =
            forward_sip(m, image, HierarchyPartition::single(cfg.num_layers), {pool});
        EXPECT_LE(max_abs_diff(direct.logits, via_sip.logits), 1e-12);
        EXPECT_LE(max_abs_diff(direct.final_prompts, via_sip.final_prompts), 1e-12);
    }
}

TEST(ReductionIdentity, SipSingletonsIsVptDeep) {
    ViTConfig cfg = small_config();
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        ViTModel m = random_model(cfg, 100 + seed);
        Rng rng(110 + seed);
        Tensor image = random_image(rng, cfg);
        std::vector<Tensor> pools;
        for (std::size_t l = 0; l < cfg.num_layers; ++l)
            pools.push_back(random_tensor(rng, {4, cfg.embed_dim}));
        ForwardResult direct = forward_vpt_deep(m, image, pools);
        ForwardResult via_sip =
            forward_sip(m, image, HierarchyPartition::singletons(cfg.num_layers), pools);
        EXPECT_LE(max_abs_diff(direct.logits, via_sip.logits), 1e-12);
    }
}

TEST(VptDeep, ZeroSizePoolsCollapseToPlain) {
    ViTConfig cfg = small_config();
    ViTModel m = random_model(cfg, 120);
    Rng rng(121);
    Tensor image = random_image(rng, cfg);
    std::vector<Tensor> pools(cfg.num_layers, Tensor::zeros({0, cfg.embed_dim}));
    ForwardResult plain = forward_plain(m, image);
    ForwardResult deep = forward_vpt_deep(m, image, pools);
    EXPECT_EQ(plain.logits.values(), deep.logits.values());
}

TEST(VptDeep, PromptOutputsAreNotConsumedDownstream) {
    ViTConfig cfg = small_config();
    ViTModel m = random_model(cfg, 122);
    Rng rng(123);
    Tensor image = random_image(rng, cfg);
    std::vector<Tensor> pools;
    for (std::size_t l = 0; l < cfg.num_layers; ++l)
        pools.push_back(random_tensor(rng, {3, cfg.embed_dim}));
    ForwardResult baseline = forward_vpt_deep(m, image, pools);

    // manual replay, corrupting each layer's prompt outputs after the block:
    // later layers must not notice
    Tensor z = embed_image(m, image);
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
        BlockResult br = vit_block_forward(m.layers[l], m.cfg.num_heads, z, pools[l], {});
        for (std::size_t i = 0; i < br.prompts.size(); ++i) br.prompts.at(i) = 1e9;  // perturb v_l
        z = br.instance;
    }
    Tensor logits = head_logits(m, z);
    EXPECT_EQ(baseline.logits.values(), logits.values());
}

TEST(VptDeep, PoolCountMismatchRejected) {
    ViTConfig cfg = small_config();
    ViTModel m = random_model(cfg, 124);
    Rng rng(125);
    std::vector<Tensor> pools(3, Tensor::zeros({2, cfg.embed_dim}));
    EXPECT_THROW(forward_vpt_deep(m, random_image(rng, cfg), pools), ConfigError);
}

TEST(Sip, PromptsReplacedExactlyAtHierarchyBoundary) {
    ViTConfig cfg = small_config(8);
    ViTModel m = random_model(cfg, 130);
    Rng rng(131);
    Tensor image = random_image(rng, cfg);
    HierarchyPartition part;
    part.groups = {{0, 3}, {4, 7}};
    Tensor pool0 = random_tensor(rng, {3, cfg.embed_dim});
    Tensor pool1 = random_tensor(rng, {5, cfg.embed_dim});  // different size on purpose
    ForwardResult r = forward_sip(m, image, part, {pool0, pool1});

    for (std::size_t l = 0; l < 4; ++l) EXPECT_EQ(r.acts[l].prompts.dim(0), 3u);
    for (std::size_t l = 4; l < 8; ++l) EXPECT_EQ(r.acts[l].prompts.dim(0), 5u);

    // layer 4 must process the fresh pool on z_3: replaying that single block
    // reproduces its recorded outputs exactly
    BlockResult replay =
        vit_block_forward(m.layers[4], cfg.num_heads, r.acts[3].instance, pool1, {});
    EXPECT_EQ(replay.prompts.values(), r.acts[4].prompts.values());
}

TEST(Sip, PartitionMustCoverAllLayers) {
    ViTConfig cfg = small_config(8);
    ViTModel m = random_model(cfg, 132);
    Rng rng(133);
    HierarchyPartition bad;
    bad.groups = {{0, 3}};  // misses layers 4..7
    EXPECT_THROW(forward_sip(m, random_image(rng, cfg), bad, {Tensor::zeros({2, cfg.embed_dim})}),
                 ConfigError);
}

TEST(Sip, PoolCountMustMatchHierarchies) {
    ViTConfig cfg = small_config(8);
    ViTModel m = random_model(cfg, 134);
    Rng rng(135);
    HierarchyPartition part;
    part.groups = {{0, 3}, {4, 7}};
    EXPECT_THROW(forward_sip(m, random_image(rng, cfg), part, {Tensor::zeros({2, cfg.embed_dim})}),
                 ConfigError);
}

TEST(Ssp, ZeroLengthIsIdentityToBase) {
    ViTConfig cfg = small_config();
    ViTModel m = random_model(cfg, 140);
    Rng rng(141);
    Tensor image = random_image(rng, cfg);
    HierarchyPartition part;
    part.groups = {{0, 3}, {4, 7}};
    std::vector<Tensor> pools{random_tensor(rng, {3, cfg.embed_dim}),
                              random_tensor(rng, {3, cfg.embed_dim})};
    ForwardResult base = forward_sip(m, image, part, pools);
    ForwardResult with_ssp = forward_ssp(m, image, part, pools, Tensor::zeros({0, cfg.embed_dim}));
    EXPECT_EQ(base.logits.values(), with_ssp.logits.values());
}

TEST(Ssp, AppendedAtEveryLayerAndOutputsDropped) {
    ViTConfig cfg = small_config();
    ViTModel m = random_model(cfg, 142);
    Rng rng(143);
    Tensor image = random_image(rng, cfg);
    HierarchyPartition part;
    part.groups = {{0, 3}, {4, 7}};
    std::vector<Tensor> pools{random_tensor(rng, {3, cfg.embed_dim}),
                              random_tensor(rng, {3, cfg.embed_dim})};
    Tensor ssp = random_tensor(rng, {4, cfg.embed_dim});
    ForwardResult r = forward_ssp(m, image, part, pools, ssp);
    for (const auto& a : r.acts) {
        EXPECT_EQ(a.prompts.dim(0), 3u + 4u);  // carried + shared, every layer
        EXPECT_EQ(a.instance.dim(0), cfg.seq_len());
    }
}

TEST(Ssp, GradientAccumulatesFromEveryLayer) {
    ViTConfig cfg = small_config(4);
    ViTModel m = random_model(cfg, 144);
    m.set_backbone_trainable(false);
    m.set_head_trainable(false);
    Rng rng(145);
    Tensor image = random_image(rng, cfg);
    HierarchyPartition part = HierarchyPartition::single(cfg.num_layers);
    std::vector<Tensor> pools{Tensor::zeros({0, cfg.embed_dim})};
    Tensor ssp = random_tensor(rng, {2, cfg.embed_dim});

    auto loss_with_mask = [&](const std::vector<bool>* mask) {
        PromptForwardOptions opt;
        opt.partition = &part;
        opt.use_ssp = true;
        opt.ssp_layers = mask;
        ForwardResult r = forward_prompted(m, image, pools, ssp, opt);
        return cross_entropy(r.logits, {1});
    };

    // finite-difference check of d(loss)/d(ssp) with all layers active
    auto report = grad_check([&]() { return loss_with_mask(nullptr); }, {{"ssp", ssp}}, 1e-5);
    EXPECT_LE(report.max_rel_err, 1e-5);

    // the full gradient, for comparison against per-layer knockouts
    ssp.set_requires_grad(true);
    ssp.zero_grad();
    {
        Tape tape;
        Tensor loss = loss_with_mask(nullptr);
        tape.backward(loss);
    }
    std::vector<double> full_grad = ssp.grad();

    for (std::size_t drop = 0; drop < cfg.num_layers; ++drop) {
        std::vector<bool> mask(cfg.num_layers, true);
        mask[drop] = false;
        ssp.zero_grad();
        Tape tape;
        Tensor loss = loss_with_mask(&mask);
        tape.backward(loss);
        double diff = 0.0;
        for (std::size_t i = 0; i < full_grad.size(); ++i)
            diff = std::max(diff, std::abs(full_grad[i] - ssp.grad()[i]));
        EXPECT_GT(diff, 1e-12) << "dropping layer " << drop << " did not change d(loss)/d(ssp)";
    }
}

TEST(EmptyPromptCollapse, EveryStrategyReproducesPlain) {
    ViTConfig cfg = small_config();
    ViTModel m = random_model(cfg, 150);
    Rng rng(151);
    Tensor image = random_image(rng, cfg);
    ForwardResult plain = forward_plain(m, image);

    HierarchyPartition part;
    part.groups = {{0, 3}, {4, 7}};
    PrototypeSet protos;
    protos.prototypes = random_tensor(rng, {3, cfg.embed_dim}, 0.2, 1.0);
    protos.k = 3;

    PromptHyperparams hp;
    hp.prompt_len = 0;
    hp.ssp_len = 0;
    hp.attr_len = 0;
    hp.attr_hierarchies = 1;
    PromptState state = PromptState::init(cfg.embed_dim, part.num_groups(), hp, 7);

    for (StrategyMode mode : {StrategyMode::vpt_shallow, StrategyMode::vpt_deep, StrategyMode::sip,
                              StrategyMode::sip_ssp, StrategyMode::ship_full}) {
        StrategySpec spec;
        spec.mode = mode;
        PromptState st = state;
        if (mode == StrategyMode::vpt_deep) {
            st.sip_pools.assign(cfg.num_layers, Tensor::zeros({0, cfg.embed_dim}));
        } else if (mode == StrategyMode::vpt_shallow) {
            st.sip_pools.assign(1, Tensor::zeros({0, cfg.embed_dim}));
        }
        ForwardResult r = forward_strategy(m, image, spec, st, &part, &protos);
        EXPECT_EQ(plain.logits.values(), r.logits.values()) << to_string(mode);
    }
}

TEST(PromptState, TrainableCountsAreMonotoneAcrossComponents) {
    PromptHyperparams hp;
    hp.prompt_len = 6;
    hp.ssp_len = 3;
    hp.attr_len = 2;
    const std::size_t d = 16, M = 3;
    PromptState state = PromptState::init(d, M, hp, 3);

    StrategySpec sip{StrategyMode::sip};
    StrategySpec sip_ssp{StrategyMode::sip_ssp};
    StrategySpec full{StrategyMode::ship_full};
    const std::size_t c_sip = state.trainable_count(sip);
    const std::size_t c_ssp = state.trainable_count(sip_ssp);
    const std::size_t c_full = state.trainable_count(full);
    EXPECT_EQ(c_sip, M * 6 * d);
    EXPECT_EQ(c_ssp, c_sip + 3 * d);
    EXPECT_EQ(c_full, c_ssp + 2 * d);
    EXPECT_LE(c_sip, c_ssp);
    EXPECT_LE(c_ssp, c_full);
}

TEST(PromptState, InitIsDeterministicAndFanBounded) {
    PromptHyperparams hp;
    hp.prompt_len = 5;
    PromptState a = PromptState::init(16, 2, hp, 11);
    PromptState b = PromptState::init(16, 2, hp, 11);
    EXPECT_EQ(a.sip_pools[0].values(), b.sip_pools[0].values());
    EXPECT_EQ(a.ssp_pool.values(), b.ssp_pool.values());
    const double r = std::sqrt(6.0 / (16.0 + 5.0 * 16.0));
    for (double v : a.sip_pools[0].values()) {
        EXPECT_GE(v, -r);
        EXPECT_LE(v, r);
    }
}

TEST(ShipFull, AttributePromptsGrowSequenceByNa) {
    ViTConfig cfg = small_config();
    ViTModel m = random_model(cfg, 160);
    Rng rng(161);
    Tensor image = random_image(rng, cfg);
    HierarchyPartition part;
    part.groups = {{0, 3}, {4, 7}};

    PromptHyperparams hp;
    hp.prompt_len = 3;
    hp.ssp_len = 2;
    hp.attr_len = 4;       // N_a
    hp.attr_hierarchies = 1;
    PromptState state = PromptState::init(cfg.embed_dim, 2, hp, 9);
    PrototypeSet protos;
    protos.prototypes = random_tensor(rng, {5, cfg.embed_dim}, 0.2, 1.0);
    protos.k = 5;

    StrategySpec spec;
    spec.mode = StrategyMode::ship_full;
    ForwardResult r = forward_strategy(m, image, spec, state, &part, &protos);
    // hierarchy 0 (layers 0..3): SIP + SSP; hierarchy 1 (4..7): + N_a attribute prompts
    for (std::size_t l = 0; l < 4; ++l) EXPECT_EQ(r.acts[l].prompts.dim(0), 3u + 2u);
    for (std::size_t l = 4; l < 8; ++l) EXPECT_EQ(r.acts[l].prompts.dim(0), 3u + 4u + 2u);
}

TEST(ShipFull, AttributePromptsInBothHierarchiesWhenMaEqualsM) {
    ViTConfig cfg = small_config();
    ViTModel m = random_model(cfg, 162);
    Rng rng(163);
    Tensor image = random_image(rng, cfg);
    HierarchyPartition part;
    part.groups = {{0, 3}, {4, 7}};

    PromptHyperparams hp;
    hp.prompt_len = 3;
    hp.ssp_len = 0;
    hp.attr_len = 4;
    hp.attr_hierarchies = 2;  // M_a == M
    PromptState state = PromptState::init(cfg.embed_dim, 2, hp, 9);
    PrototypeSet protos;
    protos.prototypes = random_tensor(rng, {5, cfg.embed_dim}, 0.2, 1.0);
    protos.k = 5;

    StrategySpec spec;
    spec.mode = StrategyMode::sip;
    spec.use_ap = true;
    ForwardResult r = forward_strategy(m, image, spec, state, &part, &protos);
    for (std::size_t l = 0; l < 8; ++l) EXPECT_EQ(r.acts[l].prompts.dim(0), 3u + 4u);
}

TEST(ShipFull, MaGreaterThanMRejected) {
    ViTConfig cfg = small_config();
    ViTModel m = random_model(cfg, 164);
    Rng rng(165);
    HierarchyPartition part;
    part.groups = {{0, 3}, {4, 7}};
    PromptHyperparams hp;
    hp.attr_hierarchies = 3;  // M_a > M = 2
    PromptState state = PromptState::init(cfg.embed_dim, 2, hp, 9);
    PrototypeSet protos;
    protos.prototypes = random_tensor(rng, {5, cfg.embed_dim}, 0.2, 1.0);
    protos.k = 5;
    StrategySpec spec;
    spec.mode = StrategyMode::ship_full;
    EXPECT_THROW(forward_strategy(m, random_image(rng, cfg), spec, state, &part, &protos),
                 ConfigError);
}

TEST(StrategySpec, ApWithoutPartitionModeRejected) {
    StrategySpec spec;
    spec.mode = StrategyMode::vpt_deep;
    spec.use_ap = true;
    EXPECT_THROW(spec.validate(), ConfigError);
}

TEST(ShipFull, PerLayerAttributeRebuildFlag) {
    ViTConfig cfg = small_config();
    ViTModel m = random_model(cfg, 166);
    Rng rng(167);
    Tensor image = random_image(rng, cfg);
    HierarchyPartition part;
    part.groups = {{0, 3}, {4, 7}};

    PromptHyperparams hp;
    hp.prompt_len = 3;
    hp.ssp_len = 0;
    hp.attr_len = 4;
    hp.attr_hierarchies = 1;
    PromptState state = PromptState::init(cfg.embed_dim, 2, hp, 9);
    PrototypeSet protos;
    protos.prototypes = random_tensor(rng, {5, cfg.embed_dim}, 0.2, 1.0);
    protos.k = 5;

    PromptForwardOptions opt;
    opt.partition = &part;
    opt.use_ap = true;
    opt.prototypes = &protos;
    AttributePromptParams once = state.attr;
    opt.attr = &once;
    ForwardResult base = forward_prompted(m, image, state.sip_pools, state.ssp_pool, opt);

    AttributePromptParams fresh = state.attr;
    fresh.rebuild_per_layer = true;
    opt.attr = &fresh;
    ForwardResult rebuilt = forward_prompted(m, image, state.sip_pools, state.ssp_pool, opt);

    // same sequence shape everywhere, identical entry layer, divergence after
    for (std::size_t l = 0; l < cfg.num_layers; ++l)
        EXPECT_EQ(base.acts[l].prompts.dim(0), rebuilt.acts[l].prompts.dim(0));
    EXPECT_EQ(base.acts[4].prompts.values(), rebuilt.acts[4].prompts.values());
    EXPECT_NE(base.acts[5].prompts.values(), rebuilt.acts[5].prompts.values());
    EXPECT_NE(base.logits.values(), rebuilt.logits.values());
}
