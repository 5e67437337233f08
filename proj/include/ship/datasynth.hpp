#pragma once

#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ship/common.hpp"
#include "ship/hierarchy.hpp"
#include "ship/tensor_io.hpp"

namespace ship {

// ---------------------------------------------------------------------------
// Synthetic classification tasks with a controllable semantic depth: class
// evidence sits in a low-frequency layout (coarse), in a high-frequency
// texture (fine), or anywhere in between. Generation is a pure function of
// (spec, seed); train and test are disjoint by index partition.
// ---------------------------------------------------------------------------

struct SyntheticTaskSpec {
    std::size_t num_classes = 8;
    std::size_t train_per_class = 125;  // 1000 train samples at the defaults
    std::size_t test_per_class = 25;
    std::size_t patch_grid = 4;
    std::size_t patch_size = 4;
    std::size_t channels = 3;
    double semantic_depth = 0.5;  // 0 = coarse layout evidence, 1 = fine texture
    double noise = 0.3;           // white-noise level on top of the class pattern
    double amplitude = 1.0;

    std::size_t image_size() const { return patch_grid * patch_size; }

    void validate() const {
        if (num_classes < 2) throw ConfigError("task: need at least 2 classes");
        if (train_per_class == 0 || test_per_class == 0) {
            throw ConfigError("task: per-class sample counts must be positive");
        }
        if (patch_grid == 0 || patch_size == 0 || channels == 0) {
            throw ConfigError("task: geometry fields must be positive");
        }
        if (semantic_depth < 0.0 || semantic_depth > 1.0) {
            throw ConfigError("task: semantic_depth must lie in [0, 1]");
        }
        if (noise < 0.0) throw ConfigError("task: noise must be >= 0");
    }

    nlohmann::json to_json() const {
        return {{"num_classes", num_classes},       {"train_per_class", train_per_class},
                {"test_per_class", test_per_class}, {"patch_grid", patch_grid},
                {"patch_size", patch_size},         {"channels", channels},
                {"semantic_depth", semantic_depth}, {"noise", noise},
                {"amplitude", amplitude}};
    }
};

struct Dataset {
    std::vector<Tensor> images;  // each (C x S x S)
    std::vector<int> labels;
    std::size_t size() const { return images.size(); }
};

struct GeneratedTask {
    Dataset train;
    Dataset test;
    Tensor class_templates;  // (num_classes x C*S*S), the noise-free patterns
};

namespace synth_detail {

// Low-frequency modes carry the coarse layout; high-frequency modes carry
// texture. Both are separable cosine products over pixel coordinates.
inline double cosine_mode(std::size_t kx, std::size_t ky, std::size_t x, std::size_t y,
                          std::size_t s) {
    const double fx = std::cos(3.14159265358979323846 * kx * (x + 0.5) / static_cast<double>(s));
    const double fy = std::cos(3.14159265358979323846 * ky * (y + 0.5) / static_cast<double>(s));
    return fx * fy;
}

}  // namespace synth_detail

inline GeneratedTask generate_task(const SyntheticTaskSpec& spec, std::uint64_t seed) {
    spec.validate();
    const std::size_t s = spec.image_size();
    const std::size_t pixels = spec.channels * s * s;
    Rng rng(seed);

    // mode banks: coarse (k <= 2, excluding DC) and fine (k near Nyquist)
    std::vector<std::pair<std::size_t, std::size_t>> coarse_modes, fine_modes;
    for (std::size_t kx = 0; kx <= 2; ++kx)
        for (std::size_t ky = 0; ky <= 2; ++ky)
            if (kx + ky > 0 && kx + ky <= 2) coarse_modes.emplace_back(kx, ky);
    for (std::size_t kx = s / 2; kx < s; kx += 2)
        for (std::size_t ky = s / 2; ky < s; ky += 2) fine_modes.emplace_back(kx, ky);

    GeneratedTask task;
    task.class_templates = Tensor::zeros({spec.num_classes, pixels});
    for (std::size_t c = 0; c < spec.num_classes; ++c) {
        std::vector<double> coarse_coef(coarse_modes.size() * spec.channels);
        std::vector<double> fine_coef(fine_modes.size() * spec.channels);
        for (double& v : coarse_coef) v = rng.normal();
        for (double& v : fine_coef) v = rng.normal();
        double* row = task.class_templates.data() + c * pixels;
        for (std::size_t ch = 0; ch < spec.channels; ++ch)
            for (std::size_t y = 0; y < s; ++y)
                for (std::size_t x = 0; x < s; ++x) {
                    double coarse = 0.0, fine = 0.0;
                    for (std::size_t mi = 0; mi < coarse_modes.size(); ++mi)
                        coarse += coarse_coef[ch * coarse_modes.size() + mi] *
                                  synth_detail::cosine_mode(coarse_modes[mi].first,
                                                            coarse_modes[mi].second, x, y, s);
                    for (std::size_t mi = 0; mi < fine_modes.size(); ++mi)
                        fine += fine_coef[ch * fine_modes.size() + mi] *
                                synth_detail::cosine_mode(fine_modes[mi].first,
                                                          fine_modes[mi].second, x, y, s);
                    coarse /= std::sqrt(static_cast<double>(coarse_modes.size()));
                    fine /= std::sqrt(static_cast<double>(fine_modes.size()));
                    row[ch * s * s + y * s + x] =
                        spec.amplitude * ((1.0 - spec.semantic_depth) * coarse +
                                          spec.semantic_depth * fine);
                }
    }

    auto draw_sample = [&](std::size_t c) {
        Tensor img({spec.channels, s, s});
        const double* tmpl = task.class_templates.data() + c * pixels;
        const double gain = 0.8 + 0.4 * rng.u01();  // per-sample amplitude jitter
        for (std::size_t i = 0; i < pixels; ++i)
            img.at(i) = gain * tmpl[i] + spec.noise * rng.normal();
        return img;
    };

    // index partition: the first train_per_class draws per class are train
    for (std::size_t c = 0; c < spec.num_classes; ++c) {
        for (std::size_t i = 0; i < spec.train_per_class; ++i) {
            task.train.images.push_back(draw_sample(c));
            task.train.labels.push_back(static_cast<int>(c));
        }
        for (std::size_t i = 0; i < spec.test_per_class; ++i) {
            task.test.images.push_back(draw_sample(c));
            task.test.labels.push_back(static_cast<int>(c));
        }
    }
    return task;
}

// Fixed-seed subsample used wherever a bounded sample set is needed
// (affinity analysis, prototype construction).
inline std::vector<Tensor> subsample_images(const Dataset& data, std::size_t cap,
                                            std::uint64_t seed) {
    std::vector<std::size_t> idx(data.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (data.size() > cap) {
        Rng rng(seed);
        rng.shuffle(idx);
        idx.resize(cap);
        std::sort(idx.begin(), idx.end());
    }
    std::vector<Tensor> out;
    out.reserve(idx.size());
    for (std::size_t i : idx) out.push_back(data.images[i]);
    return out;
}

// ---------------------------------------------------------------------------
// Activation dumps: per-layer feature matrices for a sample batch, so the
// affinity analysis can also run on features exported from other models.
// ---------------------------------------------------------------------------

struct ActivationDump {
    std::string model_id;
    std::size_t embed_dim = 0;
    std::vector<Tensor> layers;  // one (n_samples x d) matrix per layer

    void validate() const {
        for (const Tensor& t : layers) {
            if (t.rank() != 2 || t.dim(1) != embed_dim) {
                throw ParseError(0, "activation dump: layer tensor " + shape_str(t.shape()) +
                                        " does not match embed dim " + std::to_string(embed_dim));
            }
            if (t.dim(0) != layers.front().dim(0)) {
                throw ParseError(0, "activation dump: inconsistent sample counts across layers");
            }
        }
    }

    void write(const std::string& path) const {
        validate();
        TensorFile f;
        nlohmann::json meta = {{"kind", "activation_dump"},
                               {"model_id", model_id},
                               {"num_layers", layers.size()},
                               {"embed_dim", embed_dim}};
        f.metadata = meta.dump();
        char name[32];
        for (std::size_t l = 0; l < layers.size(); ++l) {
            std::snprintf(name, sizeof(name), "layer_%04zu", l);
            f.entries.push_back({name, layers[l]});
        }
        write_tensor_file(path, f);
    }

    static ActivationDump read(const std::string& path) {
        TensorFile f = read_tensor_file(path);
        nlohmann::json meta = nlohmann::json::parse(f.metadata);
        if (meta.value("kind", "") != "activation_dump") {
            throw ParseError(0, "tensor file at " + path + " is not an activation dump");
        }
        ActivationDump dump;
        dump.model_id = meta.value("model_id", "");
        dump.embed_dim = meta.at("embed_dim").get<std::size_t>();
        const std::size_t declared = meta.at("num_layers").get<std::size_t>();
        if (declared != f.entries.size()) {
            throw ParseError(0, "activation dump: header declares " + std::to_string(declared) +
                                    " layers, file holds " + std::to_string(f.entries.size()));
        }
        for (const auto& e : f.entries) dump.layers.push_back(e.tensor);
        dump.validate();
        return dump;
    }
};

// Pooled per-layer features of a sample batch, in dump form.
inline ActivationDump make_activation_dump(const ViTModel& model, const std::vector<Tensor>& images,
                                           const std::string& model_id) {
    if (images.empty()) throw ConfigError("make_activation_dump: empty image set");
    NoGradGuard ng;
    ActivationDump dump;
    dump.model_id = model_id;
    dump.embed_dim = model.cfg.embed_dim;
    for (std::size_t l = 0; l < model.cfg.num_layers; ++l)
        dump.layers.push_back(Tensor::zeros({images.size(), model.cfg.embed_dim}));
    for (std::size_t s = 0; s < images.size(); ++s) {
        ForwardResult r = forward_plain(model, images[s]);
        for (std::size_t l = 0; l < r.acts.size(); ++l) {
            const Tensor& z = r.acts[l].instance;
            Tensor pooled = mean_rows(slice_rows(z, 1, z.dim(0) - 1));
            std::copy(pooled.data(), pooled.data() + pooled.size(),
                      dump.layers[l].data() + s * dump.embed_dim);
        }
    }
    return dump;
}

// Affinity analysis over an imported dump instead of a live model.
inline AffinityMatrix affinity_from_dump(const ActivationDump& dump) {
    dump.validate();
    if (dump.layers.empty()) throw ConfigError("affinity_from_dump: dump holds no layers");
    const std::size_t n_samples = dump.layers.front().dim(0);
    std::vector<std::vector<Tensor>> features(n_samples);
    for (std::size_t s = 0; s < n_samples; ++s) {
        features[s].reserve(dump.layers.size());
        for (const Tensor& layer : dump.layers) features[s].push_back(gather_rows(layer, {s}));
        for (Tensor& f : features[s]) f = Tensor::from({f.dim(1)}, f.values());
    }
    return affinity_from_features(features);
}

// Dataset export: images in the shared tensor container plus a labels CSV.
inline void export_dataset(const Dataset& data, const std::string& path) {
    TensorFile f;
    nlohmann::json meta = {{"kind", "dataset"}, {"count", data.size()}};
    f.metadata = meta.dump();
    char name[32];
    for (std::size_t i = 0; i < data.images.size(); ++i) {
        std::snprintf(name, sizeof(name), "image_%06zu", i);
        f.entries.push_back({name, data.images[i]});
    }
    write_tensor_file(path, f);
    std::ofstream csv(path + ".labels.csv");
    if (!csv) throw IoError("cannot write labels: " + path + ".labels.csv");
    csv << "index,label\n";
    for (std::size_t i = 0; i < data.labels.size(); ++i) csv << i << "," << data.labels[i] << "\n";
}

}  // namespace ship
