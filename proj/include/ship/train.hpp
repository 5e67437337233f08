#pragma once

#include <chrono>
#include <functional>
#include <ostream>

#include <json.hpp>

#include "ship/datasynth.hpp"
#include "ship/losses.hpp"
#include "ship/optim.hpp"

namespace ship {

// ---------------------------------------------------------------------------
// Training loops: prompt tuning on a frozen backbone, and upstream
// pretraining of the backbone itself. Both share one deterministic engine:
// AdamW, per-epoch cosine decay, fixed shuffles, gradient accumulation over
// micro-batches to cap live graph size.
// ---------------------------------------------------------------------------

struct TrainConfig {
    std::size_t epochs = 100;
    std::size_t batch_size = 64;
    double lr = 1e-3;
    double weight_decay = 1e-4;
    double lambda_m = 0.5;     // matching-loss weight (active strategies only)
    std::size_t n_match = 10;  // N_m
    std::uint64_t seed = 0;
    std::size_t micro_batch = 8;

    void validate() const {
        if (epochs == 0 || batch_size == 0 || micro_batch == 0) {
            throw ConfigError("train: epochs, batch_size and micro_batch must be positive");
        }
        if (lr <= 0.0 || weight_decay < 0.0) {
            throw ConfigError("train: lr must be positive and weight_decay non-negative");
        }
        if (lambda_m < 0.0) throw ConfigError("train: lambda_m must be >= 0");
        if (n_match == 0) throw ConfigError("train: n_match must be positive");
    }
};

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0.0;  // full objective (classification + matching)
    double test_loss = 0.0;   // classification loss only, for comparability
    double test_acc = 0.0;
    double wall_seconds = 0.0;
};

struct RunLog {
    std::vector<EpochRecord> epochs;
    std::size_t trainable_param_count = 0;
    double total_wall_seconds = 0.0;

    // Deterministic columns only; timing lives in the JSON summary.
    void write_csv(std::ostream& os) const {
        os << "epoch,train_loss,test_loss,test_acc\n";
        os.precision(17);
        for (const auto& e : epochs)
            os << e.epoch << "," << e.train_loss << "," << e.test_loss << "," << e.test_acc << "\n";
    }

    // Deterministic summary; wall-clock numbers live in timing_json so output
    // files stay bit-identical across re-runs of the same config + seed.
    nlohmann::json summary_json() const {
        nlohmann::json j;
        j["trainable_param_count"] = trainable_param_count;
        j["epochs_run"] = epochs.size();
        if (!epochs.empty()) {
            j["final_train_loss"] = epochs.back().train_loss;
            j["final_test_loss"] = epochs.back().test_loss;
            j["final_test_acc"] = epochs.back().test_acc;
        }
        return j;
    }

    nlohmann::json timing_json() const {
        nlohmann::json j;
        j["total_wall_seconds"] = total_wall_seconds;
        nlohmann::json wall = nlohmann::json::array();
        for (const auto& e : epochs) wall.push_back(e.wall_seconds);
        j["epoch_wall_seconds"] = wall;
        return j;
    }
};

struct EvalMetrics {
    double loss = 0.0;  // mean cross-entropy
    double accuracy = 0.0;
};

inline EvalMetrics evaluate(const ViTModel& model, const StrategySpec& spec,
                            const PromptState& state, const HierarchyPartition* partition,
                            const PrototypeSet* prototypes, const Dataset& data) {
    if (data.size() == 0) throw ConfigError("evaluate: empty dataset");
    NoGradGuard ng;
    EvalMetrics m;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        ForwardResult r = forward_strategy(model, data.images[i], spec, state, partition, prototypes);
        m.loss += cross_entropy(r.logits, {data.labels[i]}).item();
        std::size_t arg = 0;
        for (std::size_t c = 1; c < r.logits.dim(1); ++c)
            if (r.logits.at(0, c) > r.logits.at(0, arg)) arg = c;
        if (static_cast<int>(arg) == data.labels[i]) ++correct;
    }
    m.loss /= static_cast<double>(data.size());
    m.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
    return m;
}

namespace train_detail {

// Shared epoch/batch engine. sample_loss builds the per-sample graph and
// returns an unscaled scalar; eval_test runs after every epoch.
inline RunLog run_loop(std::vector<Tensor> opt_params,
                       const std::function<Tensor(std::size_t)>& sample_loss,
                       const std::function<EvalMetrics()>& eval_test, std::size_t n_train,
                       const TrainConfig& cfg) {
    RunLog log;
    for (const Tensor& t : opt_params) log.trainable_param_count += t.size();

    AdamWConfig opt_cfg;
    opt_cfg.lr = cfg.lr;
    opt_cfg.weight_decay = cfg.weight_decay;
    AdamW optimizer(opt_params, opt_cfg);

    Rng shuffle_rng(cfg.seed);
    std::vector<std::size_t> order(n_train);
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    const auto run_start = std::chrono::steady_clock::now();
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto epoch_start = std::chrono::steady_clock::now();
        const double lr_scale = 0.5 * (1.0 + std::cos(3.14159265358979323846 *
                                                      static_cast<double>(epoch) /
                                                      static_cast<double>(cfg.epochs)));
        shuffle_rng.shuffle(order);

        double epoch_loss = 0.0;
        std::size_t batches = 0;
        for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size) {
            const std::size_t bsz = std::min(cfg.batch_size, order.size() - b0);
            double batch_loss = 0.0;
            for (std::size_t c0 = 0; c0 < bsz; c0 += cfg.micro_batch) {
                const std::size_t csz = std::min(cfg.micro_batch, bsz - c0);
                Tape tape;
                Tensor chunk_loss;
                for (std::size_t k = 0; k < csz; ++k) {
                    Tensor sample = sample_loss(order[b0 + c0 + k]);
                    chunk_loss = (k == 0) ? sample : add(chunk_loss, sample);
                }
                chunk_loss = scale(chunk_loss, 1.0 / static_cast<double>(bsz));
                batch_loss += chunk_loss.item();
                tape.backward(chunk_loss);
            }
            optimizer.step(lr_scale);
            optimizer.zero_grad();
            epoch_loss += batch_loss;
            ++batches;
        }

        EvalMetrics test = eval_test();
        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = epoch_loss / static_cast<double>(batches);
        rec.test_loss = test.loss;
        rec.test_acc = test.accuracy;
        rec.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - epoch_start).count();
        log.epochs.push_back(rec);
    }
    log.total_wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - run_start).count();
    return log;
}

}  // namespace train_detail

// Prompt tuning: backbone frozen, prompts + head trainable.
inline RunLog train(ViTModel& model, PromptState& state, const StrategySpec& spec,
                    const HierarchyPartition* partition, const PrototypeSet* prototypes,
                    const Dataset& train_set, const Dataset& test_set, const TrainConfig& cfg) {
    cfg.validate();
    spec.validate();
    if (train_set.size() == 0) throw ConfigError("train: empty training set");

    model.set_backbone_trainable(false);
    model.set_head_trainable(true);

    NamedParams trainables = state.trainable_params(spec);
    for (auto& [name, t] : model.head_params()) trainables.push_back({name, t});
    std::vector<Tensor> opt_params;
    for (auto& [name, t] : trainables) {
        Tensor tensor = t;
        tensor.set_requires_grad(true);
        tensor.zero_grad();
        opt_params.push_back(tensor);
    }

    const bool matching_active = spec.effective_pml() && cfg.lambda_m > 0.0;
    auto sample_loss = [&](std::size_t idx) {
        ForwardResult r =
            forward_strategy(model, train_set.images[idx], spec, state, partition, prototypes);
        if (matching_active && r.final_prompts.dim(0) > 0) {
            Tensor tokens = select_match_tokens(r, cfg.n_match);
            return combined_loss(r.logits, {train_set.labels[idx]}, r.final_prompts, tokens,
                                 cfg.lambda_m);
        }
        return cross_entropy(r.logits, {train_set.labels[idx]});
    };
    auto eval_test = [&]() {
        return evaluate(model, spec, state, partition, prototypes, test_set);
    };
    return train_detail::run_loop(std::move(opt_params), sample_loss, eval_test, train_set.size(),
                                  cfg);
}

// Upstream pretraining: every backbone parameter and the head are trainable,
// plain forward, classification loss only.
inline RunLog pretrain_backbone(ViTModel& model, const Dataset& train_set, const Dataset& test_set,
                                const TrainConfig& cfg) {
    cfg.validate();
    if (train_set.size() == 0) throw ConfigError("pretrain: empty training set");

    model.set_backbone_trainable(true);
    model.set_head_trainable(true);
    std::vector<Tensor> opt_params;
    for (auto& [name, t] : model.all_params()) {
        Tensor tensor = t;
        tensor.set_requires_grad(true);
        tensor.zero_grad();
        opt_params.push_back(tensor);
    }

    auto sample_loss = [&](std::size_t idx) {
        ForwardResult r = forward_plain(model, train_set.images[idx]);
        return cross_entropy(r.logits, {train_set.labels[idx]});
    };
    StrategySpec plain;
    PromptState no_prompts;
    auto eval_test = [&]() {
        return evaluate(model, plain, no_prompts, nullptr, nullptr, test_set);
    };
    RunLog log = train_detail::run_loop(std::move(opt_params), sample_loss, eval_test,
                                        train_set.size(), cfg);
    // leave the model in the frozen-backbone posture expected downstream
    model.set_backbone_trainable(false);
    return log;
}

}  // namespace ship
