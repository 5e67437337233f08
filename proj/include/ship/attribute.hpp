#pragma once

#include "ship/kmeans.hpp"
#include "ship/ops.hpp"

namespace ship {

// ---------------------------------------------------------------------------
// Attribute prompts: a convex blend of learnable parameters with attribute
// features aggregated from frozen prototypes, queried by the most
// CLS-attended instance tokens.
// ---------------------------------------------------------------------------

struct AttributePromptParams {
    Tensor learnable;                 // L_a, (N_a x d), trainable
    double lambda_a = 0.1;            // blend toward aggregated attributes
    std::size_t num_tokens = 10;      // N_a, tokens queried = prompt length
    std::size_t last_hierarchies = 2; // M_a
    double temperature = 1.0;         // softmax temperature of the similarity weights
    bool rebuild_per_layer = false;   // rebuild P_a at every layer instead of once per hierarchy

    void validate() const {
        if (lambda_a < 0.0 || lambda_a > 1.0) {
            throw ConfigError("attribute prompt: lambda_a must lie in [0, 1], got " +
                              std::to_string(lambda_a));
        }
        if (num_tokens == 0) throw ConfigError("attribute prompt: N_a must be positive");
        if (temperature <= 0.0) throw ConfigError("attribute prompt: temperature must be positive");
        if (learnable.rank() != 2 || learnable.dim(0) != num_tokens) {
            throw ConfigError("attribute prompt: L_a shape " + shape_str(learnable.shape()) +
                              " does not match N_a = " + std::to_string(num_tokens));
        }
    }
};

// AG(z_D, A): cosine similarity of each query token against every prototype,
// softmax-normalized per token, then a weighted mix of the prototypes.
// Output rows lie in the convex hull of the prototypes.
inline Tensor aggregate_attributes(const Tensor& tokens, const Tensor& prototypes,
                                   double temperature = 1.0) {
    if (tokens.rank() != 2 || prototypes.rank() != 2 || tokens.dim(1) != prototypes.dim(1)) {
        throw ShapeError("aggregate_attributes: tokens " + shape_str(tokens.shape()) +
                         " vs prototypes " + shape_str(prototypes.shape()));
    }
    if (temperature <= 0.0) throw ConfigError("aggregate_attributes: temperature must be positive");
    Tensor sims = matmul(l2_normalize_rows(tokens), transpose(l2_normalize_rows(prototypes)));
    Tensor weights = softmax(scale(sims, 1.0 / temperature), 1);
    return matmul(weights, prototypes);
}

// Eq-style blend: P_a = (1 - lambda_a) L_a + lambda_a AG(z_D, A).
// Gradient reaches L_a and, through the similarity weights, the query tokens;
// prototypes stay frozen.
inline Tensor attribute_prompt(const Tensor& tokens, const PrototypeSet& protos,
                               const AttributePromptParams& params) {
    params.validate();
    Tensor aggregated = aggregate_attributes(tokens, protos.prototypes, params.temperature);
    if (aggregated.shape() != params.learnable.shape()) {
        throw ShapeError("attribute_prompt: aggregated " + shape_str(aggregated.shape()) +
                         " vs learnable " + shape_str(params.learnable.shape()));
    }
    return add(scale(params.learnable, 1.0 - params.lambda_a), scale(aggregated, params.lambda_a));
}

}  // namespace ship
