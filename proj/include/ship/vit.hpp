#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ship/ops.hpp"
#include "ship/tensor_io.hpp"

namespace ship {

// ---------------------------------------------------------------------------
// Tiny pre-LN ViT backbone. Sequences are (tokens x d) with the CLS token at
// row 0 and patch tokens after it; prompt tokens, when present, are appended
// after the instance tokens and carry no positional embedding.
// ---------------------------------------------------------------------------

struct ViTConfig {
    std::size_t num_layers = 8;
    std::size_t embed_dim = 64;
    std::size_t num_heads = 4;
    std::size_t patch_grid = 4;   // patches per image side
    std::size_t patch_size = 4;   // pixels per patch side
    std::size_t mlp_ratio = 4;
    std::size_t image_channels = 3;
    std::size_t num_classes = 10;

    std::size_t seq_len() const { return patch_grid * patch_grid + 1; }  // N_x
    std::size_t num_patches() const { return patch_grid * patch_grid; }
    std::size_t image_size() const { return patch_grid * patch_size; }
    std::size_t patch_dim() const { return image_channels * patch_size * patch_size; }
    std::size_t head_dim() const { return embed_dim / num_heads; }

    void validate() const {
        if (num_layers < 2) throw ConfigError("ViTConfig: num_layers must be >= 2");
        if (embed_dim == 0 || num_heads == 0 || embed_dim % num_heads != 0) {
            throw ConfigError("ViTConfig: embed_dim " + std::to_string(embed_dim) +
                              " must be divisible by num_heads " + std::to_string(num_heads));
        }
        if (patch_grid == 0 || patch_size == 0 || image_channels == 0 || mlp_ratio == 0) {
            throw ConfigError("ViTConfig: geometry fields must be positive");
        }
        if (num_classes == 0) throw ConfigError("ViTConfig: num_classes must be positive");
    }

    nlohmann::json to_json() const {
        return {{"num_layers", num_layers},       {"embed_dim", embed_dim},
                {"num_heads", num_heads},         {"patch_grid", patch_grid},
                {"patch_size", patch_size},       {"mlp_ratio", mlp_ratio},
                {"image_channels", image_channels}, {"num_classes", num_classes}};
    }

    static ViTConfig from_json(const nlohmann::json& j) {
        ViTConfig c;
        c.num_layers = j.at("num_layers").get<std::size_t>();
        c.embed_dim = j.at("embed_dim").get<std::size_t>();
        c.num_heads = j.at("num_heads").get<std::size_t>();
        c.patch_grid = j.at("patch_grid").get<std::size_t>();
        c.patch_size = j.at("patch_size").get<std::size_t>();
        c.mlp_ratio = j.at("mlp_ratio").get<std::size_t>();
        c.image_channels = j.at("image_channels").get<std::size_t>();
        c.num_classes = j.at("num_classes").get<std::size_t>();
        c.validate();
        return c;
    }
};

struct AttentionWeights {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

struct LayerWeights {
    Tensor ln1_gamma, ln1_beta;
    AttentionWeights attn;
    Tensor ln2_gamma, ln2_beta;
    Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

// Per-layer record of the forward pass.
struct LayerActivations {
    Tensor instance;                    // z_i, (N_x x d)
    Tensor prompts;                     // v_i, (P x d), possibly zero rows
    std::vector<double> cls_attention;  // post-softmax CLS query row, head-averaged
    std::size_t instance_keys = 0;      // leading cls_attention entries that index instance tokens
};
using Activations = std::vector<LayerActivations>;

using NamedParams = std::vector<std::pair<std::string, Tensor>>;

class ViTModel {
public:
    ViTConfig cfg;
    Tensor patch_w, patch_b;  // (patch_dim x d), (d)
    Tensor cls_token;         // (1 x d)
    Tensor pos_embed;         // (N_x x d)
    std::vector<LayerWeights> layers;
    Tensor ln_f_gamma, ln_f_beta;
    Tensor head_w, head_b;    // (d x classes), (classes)

    static ViTModel init(const ViTConfig& cfg, std::uint64_t seed) {
        cfg.validate();
        ViTModel m;
        m.cfg = cfg;
        Rng rng(seed);
        const std::size_t d = cfg.embed_dim;
        auto randn = [&](std::vector<std::size_t> shape, double std) {
            Tensor t(std::move(shape));
            for (std::size_t i = 0; i < t.size(); ++i) t.at(i) = rng.normal() * std;
            return t;
        };
        m.patch_w = randn({cfg.patch_dim(), d}, 0.02);
        m.patch_b = Tensor::zeros({d});
        m.cls_token = randn({1, d}, 0.02);
        m.pos_embed = randn({cfg.seq_len(), d}, 0.02);
        for (std::size_t l = 0; l < cfg.num_layers; ++l) {
            LayerWeights lw;
            lw.ln1_gamma = Tensor::full({d}, 1.0);
            lw.ln1_beta = Tensor::zeros({d});
            lw.attn.wq = randn({d, d}, 0.02);
            lw.attn.bq = Tensor::zeros({d});
            lw.attn.wk = randn({d, d}, 0.02);
            lw.attn.bk = Tensor::zeros({d});
            lw.attn.wv = randn({d, d}, 0.02);
            lw.attn.bv = Tensor::zeros({d});
            lw.attn.wo = randn({d, d}, 0.02);
            lw.attn.bo = Tensor::zeros({d});
            lw.ln2_gamma = Tensor::full({d}, 1.0);
            lw.ln2_beta = Tensor::zeros({d});
            lw.mlp_w1 = randn({d, d * cfg.mlp_ratio}, 0.02);
            lw.mlp_b1 = Tensor::zeros({d * cfg.mlp_ratio});
            lw.mlp_w2 = randn({d * cfg.mlp_ratio, d}, 0.02);
            lw.mlp_b2 = Tensor::zeros({d});
            m.layers.push_back(std::move(lw));
        }
        m.ln_f_gamma = Tensor::full({d}, 1.0);
        m.ln_f_beta = Tensor::zeros({d});
        m.head_w = Tensor::zeros({d, cfg.num_classes});
        m.head_b = Tensor::zeros({cfg.num_classes});
        return m;
    }

    NamedParams backbone_params() const {
        NamedParams p;
        p.emplace_back("patch_w", patch_w);
        p.emplace_back("patch_b", patch_b);
        p.emplace_back("cls_token", cls_token);
        p.emplace_back("pos_embed", pos_embed);
        char buf[64];
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const LayerWeights& lw = layers[l];
            auto name = [&](const char* field) {
                std::snprintf(buf, sizeof(buf), "layer%02zu.%s", l, field);
                return std::string(buf);
            };
            p.emplace_back(name("ln1_gamma"), lw.ln1_gamma);
            p.emplace_back(name("ln1_beta"), lw.ln1_beta);
            p.emplace_back(name("wq"), lw.attn.wq);
            p.emplace_back(name("bq"), lw.attn.bq);
            p.emplace_back(name("wk"), lw.attn.wk);
            p.emplace_back(name("bk"), lw.attn.bk);
            p.emplace_back(name("wv"), lw.attn.wv);
            p.emplace_back(name("bv"), lw.attn.bv);
            p.emplace_back(name("wo"), lw.attn.wo);
            p.emplace_back(name("bo"), lw.attn.bo);
            p.emplace_back(name("ln2_gamma"), lw.ln2_gamma);
            p.emplace_back(name("ln2_beta"), lw.ln2_beta);
            p.emplace_back(name("mlp_w1"), lw.mlp_w1);
            p.emplace_back(name("mlp_b1"), lw.mlp_b1);
            p.emplace_back(name("mlp_w2"), lw.mlp_w2);
            p.emplace_back(name("mlp_b2"), lw.mlp_b2);
        }
        p.emplace_back("ln_f_gamma", ln_f_gamma);
        p.emplace_back("ln_f_beta", ln_f_beta);
        return p;
    }

    NamedParams head_params() const {
        return {{"head_w", head_w}, {"head_b", head_b}};
    }

    NamedParams all_params() const {
        NamedParams p = backbone_params();
        for (auto& h : head_params()) p.push_back(h);
        return p;
    }

    void set_backbone_trainable(bool trainable) {
        for (auto& [name, t] : backbone_params()) {
            Tensor tensor = t;
            tensor.set_requires_grad(trainable);
        }
    }

    void set_head_trainable(bool trainable) {
        head_w.set_requires_grad(trainable);
        head_b.set_requires_grad(trainable);
    }

    // Fresh zero-initialized head for a new downstream label space.
    void reset_head(std::size_t num_classes) {
        if (num_classes == 0) throw ConfigError("reset_head: num_classes must be positive");
        cfg.num_classes = num_classes;
        head_w = Tensor::zeros({cfg.embed_dim, num_classes});
        head_b = Tensor::zeros({num_classes});
    }

    void save_checkpoint(const std::string& path) const {
        TensorFile file;
        nlohmann::json meta;
        meta["kind"] = "vit_checkpoint";
        meta["config"] = cfg.to_json();
        file.metadata = meta.dump();
        for (const auto& [name, t] : all_params()) file.entries.push_back({name, t});
        write_tensor_file(path, file);
    }

    static ViTModel load_checkpoint(const std::string& path) {
        TensorFile file = read_tensor_file(path);
        nlohmann::json meta = nlohmann::json::parse(file.metadata);
        if (meta.value("kind", "") != "vit_checkpoint") {
            throw ParseError(0, "tensor file at " + path + " is not a vit checkpoint");
        }
        ViTModel m = init(ViTConfig::from_json(meta.at("config")), 0);
        for (auto& [name, t] : m.all_params()) {
            const Tensor& stored = file.require(name);
            if (stored.shape() != t.shape()) {
                throw ParseError(0, "checkpoint entry '" + name + "' has shape " +
                                        shape_str(stored.shape()) + ", expected " +
                                        shape_str(t.shape()));
            }
            Tensor dst = t;
            std::copy(stored.data(), stored.data() + stored.size(), dst.data());
        }
        return m;
    }
};

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

namespace attn_detail {

// One head over projected columns: softmax(q k^T / sqrt(dh)) v.
// When cls_row is given, the post-softmax weights of query row 0 are
// averaged into it (detached; selection is not differentiable).
inline Tensor attend_head(const Tensor& q, const Tensor& k, const Tensor& v,
                          std::vector<double>* cls_row, double head_weight) {
    const double scale_f = 1.0 / std::sqrt(static_cast<double>(q.dim(1)));
    Tensor att = softmax(scale(matmul(q, transpose(k)), scale_f), 1);
    if (cls_row) {
        if (cls_row->size() != k.dim(0)) cls_row->assign(k.dim(0), 0.0);
        for (std::size_t j = 0; j < k.dim(0); ++j) (*cls_row)[j] += head_weight * att.at(0, j);
    }
    return matmul(att, v);
}

struct Projected {
    Tensor q, k, v;
};

inline Projected project(const AttentionWeights& w, const Tensor& q_src, const Tensor& kv_src) {
    Projected p;
    p.q = add_row(matmul(q_src, w.wq), w.bq);
    p.k = add_row(matmul(kv_src, w.wk), w.bk);
    p.v = add_row(matmul(kv_src, w.wv), w.bv);
    return p;
}

}  // namespace attn_detail

// Multi-head attention with queries from q_src and keys/values from kv_src,
// including the output projection. Vanilla self-attention is q_src == kv_src.
inline Tensor mh_attention(const AttentionWeights& w, std::size_t num_heads, const Tensor& q_src,
                           const Tensor& kv_src, std::vector<double>* cls_row = nullptr) {
    const std::size_t d = w.wq.dim(0);
    const std::size_t dh = d / num_heads;
    auto p = attn_detail::project(w, q_src, kv_src);
    if (cls_row) cls_row->assign(kv_src.dim(0), 0.0);
    std::vector<Tensor> heads;
    heads.reserve(num_heads);
    for (std::size_t h = 0; h < num_heads; ++h) {
        heads.push_back(attn_detail::attend_head(
            slice_cols(p.q, h * dh, dh), slice_cols(p.k, h * dh, dh), slice_cols(p.v, h * dh, dh),
            cls_row, 1.0 / static_cast<double>(num_heads)));
    }
    return add_row(matmul(concat_cols(heads), w.wo), w.bo);
}

// Decoupled instance branch: (1 - lambda_d) I2I(z, z) + lambda_d I2P(z, P).
// I2I normalizes over instance keys only, I2P over prompt keys only. The
// recorded CLS row comes from the I2I branch.
inline Tensor decoupled_instance_attention(const AttentionWeights& w, std::size_t num_heads,
                                           const Tensor& z, const Tensor& prompts, double lambda_d,
                                           std::vector<double>* cls_row = nullptr) {
    if (lambda_d < 0.0 || lambda_d > 1.0) {
        throw ConfigError("decoupled attention: lambda_d must lie in [0, 1], got " +
                          std::to_string(lambda_d));
    }
    if (prompts.dim(0) == 0) {
        // No prompt keys to attend to: collapses to vanilla self-attention.
        return mh_attention(w, num_heads, z, z, cls_row);
    }
    const std::size_t d = w.wq.dim(0);
    const std::size_t dh = d / num_heads;
    auto pi = attn_detail::project(w, z, z);
    Tensor kp = add_row(matmul(prompts, w.wk), w.bk);
    Tensor vp = add_row(matmul(prompts, w.wv), w.bv);
    if (cls_row) cls_row->assign(z.dim(0), 0.0);
    std::vector<Tensor> heads;
    heads.reserve(num_heads);
    for (std::size_t h = 0; h < num_heads; ++h) {
        Tensor qh = slice_cols(pi.q, h * dh, dh);
        Tensor i2i = attn_detail::attend_head(qh, slice_cols(pi.k, h * dh, dh),
                                              slice_cols(pi.v, h * dh, dh), cls_row,
                                              1.0 / static_cast<double>(num_heads));
        Tensor i2p = attn_detail::attend_head(qh, slice_cols(kp, h * dh, dh),
                                              slice_cols(vp, h * dh, dh), nullptr, 0.0);
        heads.push_back(add(scale(i2i, 1.0 - lambda_d), scale(i2p, lambda_d)));
    }
    return add_row(matmul(concat_cols(heads), w.wo), w.bo);
}

// Prompt branch P2IP: prompt queries over the full [z, P] sequence.
inline Tensor p2ip_attention(const AttentionWeights& w, std::size_t num_heads, const Tensor& z,
                             const Tensor& prompts) {
    return mh_attention(w, num_heads, prompts, concat_rows({z, prompts}));
}

// ---------------------------------------------------------------------------
// Transformer block
// ---------------------------------------------------------------------------

enum class AttentionMode { vanilla, decoupled };

struct BlockOptions {
    AttentionMode mode = AttentionMode::vanilla;
    double lambda_d = 0.1;
    bool p2ip = true;  // decoupled mode only: prompt branch on/off
};

struct BlockResult {
    Tensor instance;  // (N_x x d)
    Tensor prompts;   // (P x d), zero rows when no prompts
    std::vector<double> cls_row;
    std::size_t instance_keys = 0;
};

inline BlockResult vit_block_forward(const LayerWeights& lw, std::size_t num_heads,
                                     const Tensor& z, const Tensor& prompts,
                                     const BlockOptions& opt) {
    const std::size_t n_inst = z.dim(0);
    const std::size_t n_prompt = prompts.dim(0);
    const Tensor seq = n_prompt ? concat_rows({z, prompts}) : z;
    const Tensor u = layer_norm(seq, lw.ln1_gamma, lw.ln1_beta);

    BlockResult res;
    res.instance_keys = n_inst;  // prompt keys, when recorded, come after instance keys
    Tensor attn_out;
    if (opt.mode == AttentionMode::vanilla || n_prompt == 0) {
        attn_out = mh_attention(lw.attn, num_heads, u, u, &res.cls_row);
    } else {
        const Tensor uz = slice_rows(u, 0, n_inst);
        const Tensor up = slice_rows(u, n_inst, n_prompt);
        Tensor z_att =
            decoupled_instance_attention(lw.attn, num_heads, uz, up, opt.lambda_d, &res.cls_row);
        Tensor p_att = opt.p2ip ? p2ip_attention(lw.attn, num_heads, uz, up)
                                : Tensor::zeros({n_prompt, z.dim(1)});
        attn_out = concat_rows({z_att, p_att});
    }

    const Tensor seq2 = add(seq, attn_out);
    const Tensor m = layer_norm(seq2, lw.ln2_gamma, lw.ln2_beta);
    const Tensor hidden = gelu(add_row(matmul(m, lw.mlp_w1), lw.mlp_b1));
    const Tensor seq3 = add(seq2, add_row(matmul(hidden, lw.mlp_w2), lw.mlp_b2));

    res.instance = slice_rows(seq3, 0, n_inst);
    res.prompts = n_prompt ? slice_rows(seq3, n_inst, n_prompt) : Tensor::zeros({0, z.dim(1)});
    return res;
}

// ---------------------------------------------------------------------------
// Embedding and the plain (no-prompt) forward pass
// ---------------------------------------------------------------------------

// Image (C x H x W) -> patch matrix (P^2 x C*p*p); constant w.r.t. the graph.
inline Tensor patchify(const ViTConfig& cfg, const Tensor& image) {
    if (image.rank() != 3 || image.dim(0) != cfg.image_channels ||
        image.dim(1) != cfg.image_size() || image.dim(2) != cfg.image_size()) {
        throw ShapeError("patchify: image " + shape_str(image.shape()) + " does not match config " +
                         shape_str({cfg.image_channels, cfg.image_size(), cfg.image_size()}));
    }
    const std::size_t g = cfg.patch_grid, p = cfg.patch_size, c = cfg.image_channels;
    const std::size_t hw = cfg.image_size();
    Tensor out({g * g, cfg.patch_dim()});
    for (std::size_t gy = 0; gy < g; ++gy)
        for (std::size_t gx = 0; gx < g; ++gx) {
            double* row = out.data() + (gy * g + gx) * cfg.patch_dim();
            std::size_t w = 0;
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t y = 0; y < p; ++y)
                    for (std::size_t x = 0; x < p; ++x)
                        row[w++] = image.data()[ch * hw * hw + (gy * p + y) * hw + (gx * p + x)];
        }
    return out;
}

// Embed one image: patch projection, CLS prepend, positional embedding.
inline Tensor embed_image(const ViTModel& m, const Tensor& image) {
    Tensor tokens = add_row(matmul(patchify(m.cfg, image), m.patch_w), m.patch_b);
    Tensor seq = concat_rows({m.cls_token, tokens});
    return add(seq, m.pos_embed);
}

struct ForwardResult {
    Tensor logits;          // (1 x classes)
    Activations acts;       // one record per layer
    Tensor final_instance;  // z_N after the last block (pre final LN)
    Tensor final_prompts;   // prompt outputs of the last block
};

// Classification head on the CLS row of the final-LN output.
inline Tensor head_logits(const ViTModel& m, const Tensor& z_final) {
    Tensor normed = layer_norm(z_final, m.ln_f_gamma, m.ln_f_beta);
    Tensor cls = slice_rows(normed, 0, 1);
    return add_row(matmul(cls, m.head_w), m.head_b);
}

inline ForwardResult forward_plain(const ViTModel& m, const Tensor& image) {
    Tensor z = embed_image(m, image);
    ForwardResult res;
    const Tensor no_prompts = Tensor::zeros({0, m.cfg.embed_dim});
    for (std::size_t l = 0; l < m.cfg.num_layers; ++l) {
        BlockResult br = vit_block_forward(m.layers[l], m.cfg.num_heads, z, no_prompts, {});
        z = br.instance;
        res.acts.push_back({br.instance, br.prompts, std::move(br.cls_row), br.instance_keys});
    }
    res.final_instance = z;
    res.final_prompts = no_prompts;
    res.logits = head_logits(m, z);
    return res;
}

// ---------------------------------------------------------------------------
// CLS-attention token ranking. Returns patch-token indices (0-based among
// patch tokens; sequence position = index + 1). Ties break to the lowest
// index.
// ---------------------------------------------------------------------------
inline std::vector<std::size_t> cls_attention_topk(const std::vector<double>& cls_row,
                                                   std::size_t instance_keys, std::size_t n) {
    if (instance_keys < 2 || cls_row.size() < instance_keys) {
        throw ShapeError("cls_attention_topk: malformed attention row");
    }
    const std::size_t num_patches = instance_keys - 1;  // CLS itself is excluded
    if (n == 0 || n > num_patches) {
        throw ConfigError("cls_attention_topk: n = " + std::to_string(n) +
                          " out of range [1, " + std::to_string(num_patches) + "]");
    }
    std::vector<std::size_t> order(num_patches);
    for (std::size_t i = 0; i < num_patches; ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const double wa = cls_row[a + 1], wb = cls_row[b + 1];
        if (wa != wb) return wa > wb;
        return a < b;
    });
    order.resize(n);
    return order;
}

inline std::vector<std::size_t> cls_attention_topk(const Activations& acts, std::size_t layer,
                                                   std::size_t n) {
    if (layer >= acts.size()) {
        throw ConfigError("cls_attention_topk: layer " + std::to_string(layer) + " out of range");
    }
    return cls_attention_topk(acts[layer].cls_attention, acts[layer].instance_keys, n);
}

}  // namespace ship
