#include <gtest/gtest.h>

#include "ship/hierarchy.hpp"

using namespace ship;

namespace {

AffinityMatrix make_affinity(std::size_t n, const std::vector<double>& entries) {
    AffinityMatrix S;
    S.n = n;
    S.s = entries;
    S.sample_count = 1;
    return S;
}

AffinityMatrix random_symmetric(Rng& rng, std::size_t n, double lo = -1.0, double hi = 1.0) {
    AffinityMatrix S;
    S.n = n;
    S.s.assign(n * n, 0.0);
    S.sample_count = 1;
    for (std::size_t i = 0; i < n; ++i) {
        S.at(i, i) = 1.0;
        for (std::size_t j = i + 1; j < n; ++j) {
            const double v = rng.uniform(lo, hi);
            S.at(i, j) = v;
            S.at(j, i) = v;
        }
    }
    return S;
}

// Independent reference: enumerate every contiguous partition (compositions
// via boundary bitmasks) and keep those satisfying greedy maximality: within
// a group every layer clears the rule threshold against its reference layer,
// and the layer after the group (if any) fails it.
std::vector<HierarchyPartition::Group> brute_force_partition(const AffinityMatrix& S, double lambda,
                                                             PartitionRule rule) {
    const std::size_t n = S.n;
    std::vector<std::vector<HierarchyPartition::Group>> admissible;
    for (std::uint64_t mask = 0; mask < (1ull << (n - 1)); ++mask) {
        std::vector<HierarchyPartition::Group> groups;
        std::size_t start = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const bool boundary_after = (i + 1 == n) || ((mask >> i) & 1);
            if (boundary_after) {
                groups.push_back({start, i});
                start = i + 1;
            }
        }
        bool ok = true;
        for (const auto& g : groups) {
            for (std::size_t j = g.first + 1; j <= g.last && ok; ++j) {
                const double a = rule == PartitionRule::anchor ? S.at(g.first, j) : S.at(j - 1, j);
                if (a < lambda) ok = false;
            }
            if (!ok) break;
            if (g.last + 1 < n) {
                const double a = rule == PartitionRule::anchor ? S.at(g.first, g.last + 1)
                                                               : S.at(g.last, g.last + 1);
                if (a >= lambda) ok = false;  // group closed too early
            }
            if (!ok) break;
        }
        if (ok) admissible.push_back(std::move(groups));
    }
    EXPECT_EQ(admissible.size(), 1u) << "greedy-maximal partition should be unique";
    return admissible.front();
}

}  // namespace

TEST(LayerFeature, EqualTokensGiveNormalizedToken) {
    Tensor z = Tensor::zeros({4, 3});
    const double u[3] = {3, 0, 4};  // norm 5
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 3; ++j) z.at(i, j) = u[j];
    LayerActivations act{z, Tensor::zeros({0, 3}), {}, 4};
    Tensor f = layer_feature(act);
    EXPECT_NEAR(f.at(0), 0.6, 1e-15);
    EXPECT_NEAR(f.at(1), 0.0, 1e-15);
    EXPECT_NEAR(f.at(2), 0.8, 1e-15);
}

TEST(LayerFeature, OpposedTokensAreDegenerate) {
    Tensor z = Tensor::zeros({3, 2});
    z.at(1, 0) = 1.0;   // patch token u
    z.at(2, 0) = -1.0;  // patch token -u; CLS row 0 ignored
    LayerActivations act{z, Tensor::zeros({0, 2}), {}, 3};
    EXPECT_THROW(layer_feature(act), DegenerateInputError);
}

TEST(LayerFeature, MatchesDirectOracle) {
    Rng rng(31);
    Tensor z = Tensor::zeros({5, 4});
    for (std::size_t i = 0; i < z.size(); ++i) z.at(i) = rng.uniform(-1.0, 1.0);
    LayerActivations act{z, Tensor::zeros({0, 4}), {}, 5};
    Tensor f = layer_feature(act);

    // independent mean over rows 1..4, then normalize
    std::vector<double> mean(4, 0.0);
    for (std::size_t i = 1; i < 5; ++i)
        for (std::size_t j = 0; j < 4; ++j) mean[j] += z.at(i, j) / 4.0;
    double norm = 0.0;
    for (double v : mean) norm += v * v;
    norm = std::sqrt(norm);
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(f.at(j), mean[j] / norm, 1e-12);
}

TEST(Affinity, IdenticalFeaturesGiveAllOnes) {
    Tensor u = Tensor::from({3}, {1, 2, 3});
    std::vector<std::vector<Tensor>> feats{{u, u, u}};
    AffinityMatrix S = affinity_from_features(feats);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(S.at(i, j), 1.0, 1e-12);
}

TEST(Affinity, OrthogonalFeaturesGiveIdentity) {
    Tensor e1 = Tensor::from({3}, {1, 0, 0});
    Tensor e2 = Tensor::from({3}, {0, 1, 0});
    Tensor e3 = Tensor::from({3}, {0, 0, 1});
    AffinityMatrix S = affinity_from_features({{e1, e2, e3}});
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(S.at(i, j), i == j ? 1.0 : 0.0, 1e-12);
}

TEST(Affinity, HandCaseTwoBlocksOfLayers) {
    Tensor e1 = Tensor::from({2}, {1, 0});
    Tensor e2 = Tensor::from({2}, {0, 1});
    AffinityMatrix S = affinity_from_features({{e1, e1, e2}});
    const std::vector<double> expect{1, 1, 0, 1, 1, 0, 0, 0, 1};
    for (std::size_t i = 0; i < 9; ++i) EXPECT_NEAR(S.s[i], expect[i], 1e-12);
}

TEST(Affinity, SampleOrderAndLayerScaleInvariance) {
    Rng rng(33);
    auto rand_vec = [&](double scale) {
        Tensor t({4});
        for (std::size_t i = 0; i < 4; ++i) t.at(i) = rng.uniform(-1.0, 1.0) * scale;
        return t;
    };
    std::vector<std::vector<Tensor>> feats;
    for (int s = 0; s < 3; ++s) feats.push_back({rand_vec(1), rand_vec(1), rand_vec(1)});
    AffinityMatrix S1 = affinity_from_features(feats);

    std::vector<std::vector<Tensor>> swapped{feats[2], feats[0], feats[1]};
    AffinityMatrix S2 = affinity_from_features(swapped);
    for (std::size_t i = 0; i < S1.s.size(); ++i) EXPECT_NEAR(S1.s[i], S2.s[i], 1e-12);

    // scaling one layer's features by c > 0 changes nothing (cosine)
    std::vector<std::vector<Tensor>> scaled = feats;
    for (auto& per_layer : scaled) {
        Tensor t = per_layer[1].clone();
        for (std::size_t i = 0; i < t.size(); ++i) t.at(i) *= 7.5;
        per_layer[1] = t;
    }
    AffinityMatrix S3 = affinity_from_features(scaled);
    for (std::size_t i = 0; i < S1.s.size(); ++i) EXPECT_NEAR(S1.s[i], S3.s[i], 1e-12);
}

TEST(Affinity, EmptySampleSetRejected) {
    EXPECT_THROW(affinity_from_features({}), ConfigError);
    ViTConfig cfg;
    cfg.embed_dim = 16;
    cfg.num_heads = 4;
    cfg.patch_size = 2;
    ViTModel m = ViTModel::init(cfg, 1);
    EXPECT_THROW(affinity_matrix(m, {}), ConfigError);
}

TEST(GreedyPartition, AllHighAffinitySingleGroup) {
    Rng rng(34);
    AffinityMatrix S = random_symmetric(rng, 5, 0.96, 1.0);
    HierarchyPartition p = greedy_partition(S, 0.95);
    EXPECT_EQ(p.num_groups(), 1u);
    EXPECT_EQ(p.groups[0].first, 0u);
    EXPECT_EQ(p.groups[0].last, 4u);
}

TEST(GreedyPartition, IdentityMatrixAllSingletons) {
    AffinityMatrix S = make_affinity(4, {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1});
    HierarchyPartition p = greedy_partition(S, 0.95);
    EXPECT_EQ(p.num_groups(), 4u);
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_EQ(p.groups[i].first, i);
        EXPECT_EQ(p.groups[i].last, i);
    }
}

TEST(GreedyPartition, SpecHandTrace) {
    // S[0][1]=0.97, S[0][2]=0.96, S[0][3]=0.40, S[2][3]=0.98, lambda=0.95
    AffinityMatrix S = make_affinity(4, {1.00, 0.97, 0.96, 0.40,   //
                                         0.97, 1.00, 0.50, 0.50,   //
                                         0.96, 0.50, 1.00, 0.98,   //
                                         0.40, 0.50, 0.98, 1.00});
    HierarchyPartition p = greedy_partition(S, 0.95, PartitionRule::anchor);
    ASSERT_EQ(p.num_groups(), 2u);
    EXPECT_EQ(p.groups[0].first, 0u);
    EXPECT_EQ(p.groups[0].last, 2u);
    EXPECT_EQ(p.groups[1].first, 3u);
    EXPECT_EQ(p.groups[1].last, 3u);

    auto ref = brute_force_partition(S, 0.95, PartitionRule::anchor);
    ASSERT_EQ(ref.size(), p.num_groups());
    for (std::size_t g = 0; g < ref.size(); ++g) {
        EXPECT_EQ(ref[g].first, p.groups[g].first);
        EXPECT_EQ(ref[g].last, p.groups[g].last);
    }
}

TEST(GreedyPartition, OracleAgreementRandomMatrices) {
    Rng rng(35);
    for (int trial = 0; trial < 400; ++trial) {
        const std::size_t n = 2 + rng.index(5);
        AffinityMatrix S = random_symmetric(rng, n);
        const double lambda = rng.uniform(-1.0, 1.0);
        for (PartitionRule rule : {PartitionRule::anchor, PartitionRule::consecutive}) {
            HierarchyPartition p = greedy_partition(S, lambda, rule);
            p.validate(n);  // contiguity, order, coverage
            auto ref = brute_force_partition(S, lambda, rule);
            ASSERT_EQ(ref.size(), p.num_groups());
            for (std::size_t g = 0; g < ref.size(); ++g) {
                EXPECT_EQ(ref[g].first, p.groups[g].first);
                EXPECT_EQ(ref[g].last, p.groups[g].last);
            }
        }
    }
}

TEST(GreedyPartition, ThresholdBounds) {
    AffinityMatrix S = make_affinity(2, {1, 0, 0, 1});
    EXPECT_THROW(greedy_partition(S, 1.0 + 1e-9), ConfigError);
    // lambda = -1 always groups everything (entries are >= -1)
    HierarchyPartition p = greedy_partition(S, -1.0);
    EXPECT_EQ(p.num_groups(), 1u);
}

TEST(ThresholdSweep, ConsecutiveRuleMonotoneInLambda) {
    // Theorem for the consecutive rule: group boundaries are exactly the
    // adjacent pairs below lambda, so lowering lambda only removes them.
    Rng rng(36);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 2 + rng.index(7);
        AffinityMatrix S = random_symmetric(rng, n);
        std::vector<double> lams;
        for (double l = 1.0; l >= -1.0; l -= 0.1) lams.push_back(l);
        auto sweep = threshold_sweep(S, lams, PartitionRule::consecutive);
        for (std::size_t i = 1; i < sweep.size(); ++i)
            EXPECT_LE(sweep[i].num_groups, sweep[i - 1].num_groups);
    }
}

TEST(ThresholdSweep, ConsecutiveRuleRaisingLambdaRefines) {
    Rng rng(37);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 3 + rng.index(5);
        AffinityMatrix S = random_symmetric(rng, n);
        const double lo = rng.uniform(-1.0, 0.5);
        const double hi = lo + rng.uniform(0.0, 1.0 - lo);
        auto coarse = greedy_partition(S, lo, PartitionRule::consecutive);
        auto fine = greedy_partition(S, hi, PartitionRule::consecutive);
        // every fine group fits inside some coarse group: raising lambda
        // never merges two groups that were previously split
        for (const auto& fg : fine.groups) {
            const std::size_t cg = coarse.group_of(fg.first);
            EXPECT_LE(coarse.groups[cg].first, fg.first);
            EXPECT_GE(coarse.groups[cg].last, fg.last);
        }
    }
}

// The anchor rule is *not* monotone in general: lowering the threshold can
// shift anchors onto layers with poor downstream affinity and split more.
// Frozen counterexample, kept as documentation of intended behavior.
TEST(ThresholdSweep, AnchorRuleNonMonotoneCounterexample) {
    AffinityMatrix S = make_affinity(4, {1.00, 0.60, 0.45, 0.80,   //
                                         0.60, 1.00, 0.95, 0.95,   //
                                         0.45, 0.95, 1.00, 0.05,   //
                                         0.80, 0.95, 0.05, 1.00});
    EXPECT_EQ(greedy_partition(S, 0.95, PartitionRule::anchor).num_groups(), 2u);
    EXPECT_EQ(greedy_partition(S, 0.50, PartitionRule::anchor).num_groups(), 3u);
    // the consecutive rule on the same matrix is monotone
    EXPECT_LE(greedy_partition(S, 0.50, PartitionRule::consecutive).num_groups(),
              greedy_partition(S, 0.95, PartitionRule::consecutive).num_groups());
}

TEST(ThresholdSweep, EmptyListRejected) {
    AffinityMatrix S = make_affinity(2, {1, 0, 0, 1});
    EXPECT_THROW(threshold_sweep(S, {}), ConfigError);
}

TEST(HierarchyPartition, ValidationAndHelpers) {
    HierarchyPartition p = HierarchyPartition::uniform(8, 3);
    p.validate(8);
    EXPECT_EQ(p.num_groups(), 3u);
    EXPECT_EQ(p.groups[2].first, 6u);
    EXPECT_EQ(p.groups[2].last, 7u);
    EXPECT_EQ(p.group_of(5), 1u);
    EXPECT_TRUE(p.is_group_start(3));
    EXPECT_FALSE(p.is_group_start(4));

    HierarchyPartition bad;
    bad.groups = {{0, 1}, {3, 4}};  // gap at 2
    EXPECT_THROW(bad.validate(5), ConfigError);

    // JSON round trip
    HierarchyPartition q = HierarchyPartition::from_json(p.to_json());
    EXPECT_EQ(q.num_groups(), p.num_groups());
    for (std::size_t g = 0; g < q.num_groups(); ++g) {
        EXPECT_EQ(q.groups[g].first, p.groups[g].first);
        EXPECT_EQ(q.groups[g].last, p.groups[g].last);
    }
}

TEST(AffinityMatrix, ValidationCatchesDefects) {
    AffinityMatrix bad = make_affinity(2, {1, 0.5, 0.4, 1});  // asymmetric
    EXPECT_THROW(bad.validate(), NumericError);
    AffinityMatrix bad_diag = make_affinity(2, {0.9, 0, 0, 1});
    EXPECT_THROW(bad_diag.validate(), NumericError);
    AffinityMatrix ok = make_affinity(2, {1, -0.3, -0.3, 1});
    EXPECT_NO_THROW(ok.validate());
}
