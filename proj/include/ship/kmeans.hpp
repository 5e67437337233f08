#pragma once

#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "ship/tensor_io.hpp"
#include "ship/vit.hpp"

namespace ship {

// ---------------------------------------------------------------------------
// Lloyd's k-means with k-means++ seeding, fully deterministic under a seed.
// Tie-breaks (nearest centroid, farthest point) go to the lowest index.
// ---------------------------------------------------------------------------

struct KMeansResult {
    Tensor centroids;                    // (k x d)
    std::vector<std::size_t> assignment; // per point
    double inertia = 0.0;                // sum of squared distances at convergence
    std::size_t iterations = 0;
    std::vector<double> inertia_history; // one entry per assignment pass
};

namespace kmeans_detail {

inline double sq_dist(const double* a, const double* b, std::size_t d) {
    double acc = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        const double diff = a[i] - b[i];
        acc += diff * diff;
    }
    return acc;
}

inline std::vector<std::size_t> plus_plus_seeds(const Tensor& points, std::size_t k, Rng& rng) {
    const std::size_t n = points.dim(0), d = points.dim(1);
    std::vector<std::size_t> seeds;
    seeds.push_back(rng.index(n));
    std::vector<double> best_sq(n, std::numeric_limits<double>::infinity());
    while (seeds.size() < k) {
        const double* last = points.data() + seeds.back() * d;
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            best_sq[i] = std::min(best_sq[i], sq_dist(points.data() + i * d, last, d));
            total += best_sq[i];
        }
        std::size_t pick;
        if (total <= 0.0) {
            pick = rng.index(n);  // all remaining mass at chosen points (duplicates)
        } else {
            const double target = rng.u01() * total;
            double run = 0.0;
            pick = n - 1;
            for (std::size_t i = 0; i < n; ++i) {
                run += best_sq[i];
                if (run > target) {
                    pick = i;
                    break;
                }
            }
        }
        seeds.push_back(pick);
    }
    return seeds;
}

}  // namespace kmeans_detail

inline KMeansResult kmeans(const Tensor& points, std::size_t k, std::size_t max_iter,
                           std::uint64_t seed) {
    if (points.rank() != 2) throw ShapeError("kmeans: expected (n x d) points, got " + shape_str(points.shape()));
    const std::size_t n = points.dim(0), d = points.dim(1);
    if (k < 1) throw ConfigError("kmeans: k must be >= 1");
    if (n < k) {
        throw ConfigError("kmeans: " + std::to_string(n) + " points cannot fill " +
                          std::to_string(k) + " clusters");
    }

    Rng rng(seed);
    KMeansResult res;
    res.centroids = Tensor::zeros({k, d});
    const auto seeds = kmeans_detail::plus_plus_seeds(points, k, rng);
    for (std::size_t c = 0; c < k; ++c)
        std::copy(points.data() + seeds[c] * d, points.data() + (seeds[c] + 1) * d,
                  res.centroids.data() + c * d);

    std::vector<std::size_t> assignment(n, k);
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t iter = 0; iter < std::max<std::size_t>(max_iter, 1); ++iter) {
        // assignment pass
        bool changed = false;
        double inertia = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double best = std::numeric_limits<double>::infinity();
            std::size_t arg = 0;
            for (std::size_t c = 0; c < k; ++c) {
                const double dist =
                    kmeans_detail::sq_dist(points.data() + i * d, res.centroids.data() + c * d, d);
                if (dist < best) {
                    best = dist;
                    arg = c;
                }
            }
            if (assignment[i] != arg) {
                assignment[i] = arg;
                changed = true;
            }
            inertia += best;
        }
        res.inertia_history.push_back(inertia);
        res.inertia = inertia;
        res.iterations = iter + 1;
        if (!changed) break;

        // update pass
        std::fill(res.centroids.data(), res.centroids.data() + res.centroids.size(), 0.0);
        std::fill(counts.begin(), counts.end(), 0);
        for (std::size_t i = 0; i < n; ++i) {
            ++counts[assignment[i]];
            double* c = res.centroids.data() + assignment[i] * d;
            const double* p = points.data() + i * d;
            for (std::size_t j = 0; j < d; ++j) c[j] += p[j];
        }
        for (std::size_t c = 0; c < k; ++c) {
            if (counts[c] == 0) continue;
            double* row = res.centroids.data() + c * d;
            for (std::size_t j = 0; j < d; ++j) row[j] /= static_cast<double>(counts[c]);
        }
        // empty clusters: reseed each from the point farthest from its own
        // centroid (lowest index on ties), one point per empty cluster
        std::vector<bool> claimed(n, false);
        for (std::size_t c = 0; c < k; ++c) {
            if (counts[c] != 0) continue;
            double far_dist = -1.0;
            std::size_t far_idx = 0;
            for (std::size_t i = 0; i < n; ++i) {
                if (claimed[i]) continue;
                const double dist = kmeans_detail::sq_dist(
                    points.data() + i * d, res.centroids.data() + assignment[i] * d, d);
                if (dist > far_dist) {
                    far_dist = dist;
                    far_idx = i;
                }
            }
            claimed[far_idx] = true;
            std::copy(points.data() + far_idx * d, points.data() + (far_idx + 1) * d,
                      res.centroids.data() + c * d);
        }
    }
    res.assignment = std::move(assignment);
    return res;
}

// ---------------------------------------------------------------------------
// Attribute prototypes: k-means centroids over frozen-backbone features.
// ---------------------------------------------------------------------------

struct PrototypeSet {
    Tensor prototypes;  // (K x d), frozen (never requires grad)
    std::size_t k = 0;
    std::string source;       // which features fed the clustering
    std::uint64_t seed = 0;
    double inertia = 0.0;

    void validate() const {
        if (k == 0 || prototypes.rank() != 2 || prototypes.dim(0) != k) {
            throw ConfigError("PrototypeSet: inconsistent k / prototype shape");
        }
        if (!prototypes.all_finite()) throw NumericError("PrototypeSet: non-finite prototype");
    }

    nlohmann::json sidecar_json() const {
        return {{"k", k},
                {"d", prototypes.dim(1)},
                {"source", source},
                {"seed", seed},
                {"inertia", inertia}};
    }

    void save(const std::string& path) const {
        TensorFile f;
        nlohmann::json meta = sidecar_json();
        meta["kind"] = "prototype_set";
        f.metadata = meta.dump();
        f.entries.push_back({"prototypes", prototypes});
        write_tensor_file(path, f);
        std::ofstream side(path + ".json");
        if (!side) throw IoError("cannot write sidecar: " + path + ".json");
        side << sidecar_json().dump(2) << "\n";
    }

    static PrototypeSet load(const std::string& path) {
        TensorFile f = read_tensor_file(path);
        nlohmann::json meta = nlohmann::json::parse(f.metadata);
        if (meta.value("kind", "") != "prototype_set") {
            throw ParseError(0, "tensor file at " + path + " is not a prototype set");
        }
        PrototypeSet ps;
        ps.prototypes = f.require("prototypes").clone();
        ps.k = meta.at("k").get<std::size_t>();
        ps.source = meta.value("source", "");
        ps.seed = meta.value("seed", std::uint64_t{0});
        ps.inertia = meta.value("inertia", 0.0);
        ps.validate();
        return ps;
    }
};

// Mean-pooled patch-token features of the final layer, one row per image.
// These are the clustering features for prototype construction.
inline Tensor collect_pooled_features(const ViTModel& model, const std::vector<Tensor>& images) {
    if (images.empty()) throw ConfigError("collect_pooled_features: empty image set");
    NoGradGuard ng;
    Tensor out = Tensor::zeros({images.size(), model.cfg.embed_dim});
    for (std::size_t s = 0; s < images.size(); ++s) {
        ForwardResult r = forward_plain(model, images[s]);
        const Tensor& z = r.final_instance;
        Tensor pooled = mean_rows(slice_rows(z, 1, z.dim(0) - 1));
        std::copy(pooled.data(), pooled.data() + pooled.size(), out.data() + s * out.dim(1));
    }
    return out;
}

inline PrototypeSet build_prototypes(const ViTModel& model, const std::vector<Tensor>& images,
                                     std::size_t k, std::size_t max_iter, std::uint64_t seed) {
    Tensor feats = collect_pooled_features(model, images);
    KMeansResult km = kmeans(feats, k, max_iter, seed);
    PrototypeSet ps;
    ps.prototypes = km.centroids;
    ps.k = k;
    ps.seed = seed;
    ps.inertia = km.inertia;
    ps.source = "final-layer patch-token mean-pooled features, pre-LN, " +
                std::to_string(images.size()) + " samples";
    ps.validate();
    return ps;
}

}  // namespace ship
