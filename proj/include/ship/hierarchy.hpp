#pragma once

#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ship/vit.hpp"

namespace ship {

// ---------------------------------------------------------------------------
// Inter-layer affinity and the threshold-greedy hierarchy partition.
// ---------------------------------------------------------------------------

struct AffinityMatrix {
    std::size_t n = 0;        // layer count
    std::vector<double> s;    // n x n, row-major, sample-averaged cosine similarities
    std::size_t sample_count = 0;

    double at(std::size_t i, std::size_t j) const { return s[i * n + j]; }
    double& at(std::size_t i, std::size_t j) { return s[i * n + j]; }

    void validate() const {
        if (s.size() != n * n) throw ShapeError("AffinityMatrix: storage does not match n");
        for (std::size_t i = 0; i < n; ++i) {
            if (std::abs(at(i, i) - 1.0) > 1e-9) {
                throw NumericError("AffinityMatrix: diagonal entry " + std::to_string(i) +
                                   " is not 1 (" + std::to_string(at(i, i)) + ")");
            }
            for (std::size_t j = 0; j < n; ++j) {
                if (std::abs(at(i, j) - at(j, i)) > 1e-9) {
                    throw NumericError("AffinityMatrix: asymmetric at (" + std::to_string(i) + "," +
                                       std::to_string(j) + ")");
                }
                if (at(i, j) < -1.0 - 1e-9 || at(i, j) > 1.0 + 1e-9) {
                    throw NumericError("AffinityMatrix: entry out of [-1, 1] at (" +
                                       std::to_string(i) + "," + std::to_string(j) + ")");
                }
            }
        }
    }

    nlohmann::json to_json() const {
        nlohmann::json rows = nlohmann::json::array();
        for (std::size_t i = 0; i < n; ++i) {
            nlohmann::json row = nlohmann::json::array();
            for (std::size_t j = 0; j < n; ++j) row.push_back(at(i, j));
            rows.push_back(row);
        }
        return {{"num_layers", n}, {"sample_count", sample_count}, {"matrix", rows}};
    }

    // Heatmap grid rows for external plotting: row,col,value
    void write_heatmap_csv(std::ostream& os) const {
        os << "row,col,value\n";
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j)
                os << i << "," << j << "," << at(i, j) << "\n";
    }
};

// Which pairwise affinities "above threshold" means during the greedy scan.
// anchor: affinity to the first layer of the open group (the scan restarts
// there after each split). consecutive: affinity between adjacent layers.
enum class PartitionRule { anchor, consecutive };

inline const char* to_string(PartitionRule r) {
    return r == PartitionRule::anchor ? "anchor" : "consecutive";
}

inline PartitionRule partition_rule_from_string(const std::string& s) {
    if (s == "anchor") return PartitionRule::anchor;
    if (s == "consecutive") return PartitionRule::consecutive;
    throw ConfigError("unknown partition rule '" + s + "' (expected anchor|consecutive)");
}

struct HierarchyPartition {
    struct Group {
        std::size_t first = 0;
        std::size_t last = 0;  // inclusive
        std::size_t size() const { return last - first + 1; }
    };
    std::vector<Group> groups;  // ordered, contiguous, covering 0..n-1
    double threshold = 0.0;
    PartitionRule rule = PartitionRule::anchor;

    std::size_t num_groups() const { return groups.size(); }
    std::size_t num_layers() const { return groups.empty() ? 0 : groups.back().last + 1; }

    std::size_t group_of(std::size_t layer) const {
        for (std::size_t g = 0; g < groups.size(); ++g)
            if (layer >= groups[g].first && layer <= groups[g].last) return g;
        throw ConfigError("HierarchyPartition: layer " + std::to_string(layer) + " not covered");
    }

    bool is_group_start(std::size_t layer) const {
        for (const Group& g : groups)
            if (g.first == layer) return true;
        return false;
    }

    void validate(std::size_t n) const {
        if (groups.empty()) throw ConfigError("HierarchyPartition: empty partition");
        std::size_t expect = 0;
        for (const Group& g : groups) {
            if (g.first != expect || g.last < g.first) {
                throw ConfigError("HierarchyPartition: groups must be contiguous, ordered and nonempty");
            }
            expect = g.last + 1;
        }
        if (expect != n) {
            throw ConfigError("HierarchyPartition: covers " + std::to_string(expect) +
                              " layers, expected " + std::to_string(n));
        }
    }

    static HierarchyPartition single(std::size_t n) {
        HierarchyPartition p;
        p.groups.push_back({0, n - 1});
        return p;
    }

    static HierarchyPartition singletons(std::size_t n) {
        HierarchyPartition p;
        for (std::size_t i = 0; i < n; ++i) p.groups.push_back({i, i});
        return p;
    }

    // Groups of `interval` consecutive layers (last group may be shorter).
    static HierarchyPartition uniform(std::size_t n, std::size_t interval) {
        if (interval == 0) throw ConfigError("HierarchyPartition::uniform: interval must be positive");
        HierarchyPartition p;
        for (std::size_t i = 0; i < n; i += interval)
            p.groups.push_back({i, std::min(i + interval, n) - 1});
        return p;
    }

    nlohmann::json to_json() const {
        nlohmann::json gs = nlohmann::json::array();
        for (const Group& g : groups) gs.push_back({{"first", g.first}, {"last", g.last}});
        return {{"groups", gs}, {"threshold", threshold}, {"rule", to_string(rule)}};
    }

    static HierarchyPartition from_json(const nlohmann::json& j) {
        HierarchyPartition p;
        for (const auto& g : j.at("groups")) {
            p.groups.push_back({g.at("first").get<std::size_t>(), g.at("last").get<std::size_t>()});
        }
        p.threshold = j.value("threshold", 0.0);
        p.rule = partition_rule_from_string(j.value("rule", "anchor"));
        p.validate(p.num_layers());
        return p;
    }
};

// ---------------------------------------------------------------------------
// Layer features: mean over patch tokens (CLS excluded), L2-normalized.
// ---------------------------------------------------------------------------
inline Tensor layer_feature(const LayerActivations& act) {
    const Tensor& z = act.instance;
    if (z.dim(0) < 2) throw ShapeError("layer_feature: need at least one patch token");
    NoGradGuard ng;
    Tensor pooled = mean_rows(slice_rows(z, 1, z.dim(0) - 1));
    double sq = 0.0;
    for (std::size_t i = 0; i < pooled.size(); ++i) sq += pooled.at(i) * pooled.at(i);
    if (sq == 0.0) {
        throw DegenerateInputError("layer_feature: pooled feature has zero norm");
    }
    const double inv = 1.0 / std::sqrt(sq);
    for (std::size_t i = 0; i < pooled.size(); ++i) pooled.at(i) *= inv;
    return pooled;
}

inline Tensor layer_feature(const Activations& acts, std::size_t layer) {
    if (layer >= acts.size()) {
        throw ConfigError("layer_feature: layer " + std::to_string(layer) + " out of range");
    }
    return layer_feature(acts[layer]);
}

// Affinity from precomputed per-sample, per-layer unit features.
// features[s][l] is the layer-l feature of sample s.
inline AffinityMatrix affinity_from_features(const std::vector<std::vector<Tensor>>& features) {
    if (features.empty()) throw ConfigError("affinity: empty sample set");
    const std::size_t n = features.front().size();
    AffinityMatrix S;
    S.n = n;
    S.sample_count = features.size();
    S.s.assign(n * n, 0.0);
    NoGradGuard ng;
    for (const auto& per_layer : features) {
        if (per_layer.size() != n) throw ShapeError("affinity: inconsistent layer counts across samples");
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j)
                S.at(i, j) += cosine_sim(per_layer[i], per_layer[j]).item();
    }
    const double inv = 1.0 / static_cast<double>(features.size());
    for (double& v : S.s) v *= inv;
    // Exact symmetry and unit diagonal, clamped against accumulated rounding.
    for (std::size_t i = 0; i < n; ++i) {
        S.at(i, i) = 1.0;
        for (std::size_t j = i + 1; j < n; ++j) {
            const double sym = 0.5 * (S.at(i, j) + S.at(j, i));
            S.at(i, j) = sym;
            S.at(j, i) = sym;
        }
    }
    S.validate();
    return S;
}

inline AffinityMatrix affinity_matrix(const ViTModel& model, const std::vector<Tensor>& samples) {
    if (samples.empty()) throw ConfigError("affinity_matrix: empty sample set");
    NoGradGuard ng;
    std::vector<std::vector<Tensor>> features;
    features.reserve(samples.size());
    for (const Tensor& image : samples) {
        ForwardResult r = forward_plain(model, image);
        std::vector<Tensor> per_layer;
        per_layer.reserve(r.acts.size());
        for (std::size_t l = 0; l < r.acts.size(); ++l) per_layer.push_back(layer_feature(r.acts, l));
        features.push_back(std::move(per_layer));
    }
    return affinity_from_features(features);
}

// ---------------------------------------------------------------------------
// Threshold-greedy partition. A group opens at an anchor layer i and absorbs
// the following layers while the rule's affinity stays >= lambda; the first
// failure closes the group and starts the next anchor there.
// ---------------------------------------------------------------------------
inline HierarchyPartition greedy_partition(const AffinityMatrix& S, double lambda,
                                           PartitionRule rule = PartitionRule::anchor) {
    if (lambda > 1.0 || lambda < -1.0) {
        throw ConfigError("greedy_partition: threshold " + std::to_string(lambda) +
                          " outside [-1, 1]");
    }
    if (S.n == 0) throw ConfigError("greedy_partition: empty affinity matrix");
    HierarchyPartition p;
    p.threshold = lambda;
    p.rule = rule;
    std::size_t anchor = 0;
    while (anchor < S.n) {
        std::size_t j = anchor + 1;
        while (j < S.n) {
            const double affinity =
                rule == PartitionRule::anchor ? S.at(anchor, j) : S.at(j - 1, j);
            if (affinity < lambda) break;
            ++j;
        }
        p.groups.push_back({anchor, j - 1});
        anchor = j;
    }
    p.validate(S.n);
    return p;
}

struct SweepEntry {
    double lambda = 0.0;
    HierarchyPartition partition;
    std::size_t num_groups = 0;
};

inline std::vector<SweepEntry> threshold_sweep(const AffinityMatrix& S,
                                               const std::vector<double>& lambdas,
                                               PartitionRule rule = PartitionRule::anchor) {
    if (lambdas.empty()) throw ConfigError("threshold_sweep: empty threshold list");
    std::vector<SweepEntry> out;
    out.reserve(lambdas.size());
    for (double l : lambdas) {
        SweepEntry e;
        e.lambda = l;
        e.partition = greedy_partition(S, l, rule);
        e.num_groups = e.partition.num_groups();
        out.push_back(std::move(e));
    }
    return out;
}

}  // namespace ship
