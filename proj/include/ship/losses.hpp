#pragma once

#include "ship/ops.hpp"
#include "ship/prompts.hpp"

namespace ship {

// ---------------------------------------------------------------------------
// Prompt matching loss: mean over prompts of the cosine distance to the
// nearest selected instance token. Differentiable through both sides; the
// argmin is a forward-value decision with lowest-index tie-break.
// ---------------------------------------------------------------------------
inline Tensor pml(const Tensor& prompts, const Tensor& tokens) {
    if (prompts.rank() != 2 || tokens.rank() != 2 || prompts.dim(1) != tokens.dim(1)) {
        throw ShapeError("pml: prompts " + shape_str(prompts.shape()) + " vs tokens " +
                         shape_str(tokens.shape()));
    }
    if (prompts.dim(0) == 0 || tokens.dim(0) == 0) {
        throw ConfigError("pml: needs at least one prompt and one token");
    }
    Tensor cosines = matmul(l2_normalize_rows(prompts), transpose(l2_normalize_rows(tokens)));
    std::vector<std::array<std::size_t, 2>> nearest;
    nearest.reserve(cosines.dim(0));
    for (std::size_t i = 0; i < cosines.dim(0); ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < cosines.dim(1); ++j) {
            if (cosines.at(i, j) > cosines.at(i, best)) best = j;  // strict: ties keep lowest j
        }
        nearest.push_back({i, best});
    }
    Tensor matched = gather_coords(cosines, nearest);
    return add_scalar(scale(mean_all(matched), -1.0), 1.0);
}

// Tokens feeding the matching loss: the N_m most CLS-attended instance tokens
// of the final layer, taken from the final-layer instance outputs.
inline Tensor select_match_tokens(const ForwardResult& r, std::size_t n_match) {
    if (r.acts.empty()) throw ConfigError("select_match_tokens: no layer activations");
    const auto idx = cls_attention_topk(r.acts, r.acts.size() - 1, n_match);
    std::vector<std::size_t> rows;
    rows.reserve(idx.size());
    for (std::size_t p : idx) rows.push_back(p + 1);  // patch index -> sequence row
    return gather_rows(r.final_instance, rows);
}

// L = L_c + lambda_m * L_m, with the matching term coming exclusively from
// the final layer's prompts and tokens.
inline Tensor combined_loss(const Tensor& logits, const std::vector<int>& labels,
                            const Tensor& prompts_last, const Tensor& tokens_last,
                            double lambda_m) {
    if (lambda_m < 0.0) throw ConfigError("combined_loss: lambda_m must be >= 0");
    Tensor ce = cross_entropy(logits, labels);
    if (lambda_m == 0.0) return ce;
    return add(ce, scale(pml(prompts_last, tokens_last), lambda_m));
}

}  // namespace ship
