#pragma once

#include <algorithm>
#include <functional>
#include <memory>
#include <numeric>
#include <utility>
#include <vector>

#include "ship/common.hpp"

namespace ship {

// ---------------------------------------------------------------------------
// Dense row-major f64 tensor with shared storage. A Tensor is a cheap handle;
// copies alias the same buffer. Values are treated as immutable once the
// tensor has entered a computation graph; in-place mutation is reserved for
// initialization and optimizer steps between graphs.
// ---------------------------------------------------------------------------

class Tensor {
public:
    Tensor() : s_(std::make_shared<Storage>()) {}

    explicit Tensor(std::vector<std::size_t> shape) : s_(std::make_shared<Storage>()) {
        s_->shape = std::move(shape);
        s_->values.assign(numel_of(s_->shape), 0.0);
    }

    static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<std::size_t> shape, double v) {
        Tensor t(std::move(shape));
        std::fill(t.s_->values.begin(), t.s_->values.end(), v);
        return t;
    }

    static Tensor from(std::vector<std::size_t> shape, std::vector<double> values) {
        Tensor t;
        if (numel_of(shape) != values.size()) {
            throw ShapeError("Tensor::from: " + shape_str(shape) + " needs " +
                             std::to_string(numel_of(shape)) + " values, got " +
                             std::to_string(values.size()));
        }
        t.s_->shape = std::move(shape);
        t.s_->values = std::move(values);
        return t;
    }

    static Tensor scalar(double v) { return from({1}, {v}); }

    const std::vector<std::size_t>& shape() const { return s_->shape; }
    std::size_t rank() const { return s_->shape.size(); }
    std::size_t dim(std::size_t i) const { return s_->shape.at(i); }
    std::size_t size() const { return s_->values.size(); }

    double* data() { return s_->values.data(); }
    const double* data() const { return s_->values.data(); }
    std::vector<double>& values() { return s_->values; }
    const std::vector<double>& values() const { return s_->values; }

    double& at(std::size_t i) { return s_->values.at(i); }
    double at(std::size_t i) const { return s_->values.at(i); }
    double& at(std::size_t r, std::size_t c) {
        check_rank2();
        return s_->values[r * s_->shape[1] + c];
    }
    double at(std::size_t r, std::size_t c) const {
        check_rank2();
        return s_->values[r * s_->shape[1] + c];
    }

    double item() const {
        if (size() != 1) throw ShapeError("Tensor::item: tensor " + shape_str(shape()) + " is not a scalar");
        return s_->values[0];
    }

    bool requires_grad() const { return s_->requires_grad; }

    Tensor& set_requires_grad(bool rg) {
        s_->requires_grad = rg;
        if (rg && s_->grad.size() != s_->values.size()) {
            s_->grad.assign(s_->values.size(), 0.0);
        }
        if (!rg) s_->grad.clear();
        return *this;
    }

    bool has_grad() const { return !s_->grad.empty(); }

    // A Tensor is a handle: const protects the handle, not the shared
    // storage, so gradient accumulation works through captured copies.
    std::vector<double>& grad() const {
        if (s_->grad.empty()) throw NumericError("Tensor::grad: no gradient buffer (requires_grad is false)");
        return s_->grad;
    }

    void zero_grad() const {
        std::fill(s_->grad.begin(), s_->grad.end(), 0.0);
    }

    // Deep copy of values (fresh storage, no grad state carried over).
    Tensor clone() const {
        Tensor t;
        t.s_->shape = s_->shape;
        t.s_->values = s_->values;
        return t;
    }

    bool same_storage(const Tensor& other) const { return s_ == other.s_; }

    bool all_finite() const {
        for (double v : s_->values)
            if (!std::isfinite(v)) return false;
        return true;
    }

    static std::size_t numel_of(const std::vector<std::size_t>& shape) {
        return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
    }

private:
    struct Storage {
        std::vector<std::size_t> shape;
        std::vector<double> values;
        std::vector<double> grad;  // same length as values when requires_grad
        bool requires_grad = false;
    };

    void check_rank2() const {
        if (s_->shape.size() != 2) throw ShapeError("expected rank-2 tensor, got " + shape_str(s_->shape));
    }

    std::shared_ptr<Storage> s_;
};

// ---------------------------------------------------------------------------
// ComputationTape: ordered record of the differentiable ops executed while
// the tape was active. Forward execution order is a topological order by
// construction, so backward() replays the closures once, in reverse.
//
// Usage:
//   Tape tape;                 // becomes the active tape (RAII)
//   Tensor loss = f(params);   // ops record their backward steps
//   tape.backward(loss);       // seeds d(loss)=1 and runs the tape backward
//
// Gradient accumulation is additive across backward calls on *different*
// tapes; calling backward twice on the same tape is an error.
// ---------------------------------------------------------------------------

class Tape {
public:
    Tape() : prev_(active_tape()) { active_tape() = this; }
    ~Tape() { active_tape() = prev_; }

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active() { return active_tape(); }

    void record(std::function<void()> backward_step) {
        steps_.push_back(std::move(backward_step));
    }

    std::size_t num_ops() const { return steps_.size(); }

    void backward(Tensor& loss) {
        if (consumed_) {
            throw NumericError("Tape::backward: tape already consumed; build a fresh graph instead of backpropagating twice");
        }
        consumed_ = true;
        if (loss.size() != 1) {
            throw ShapeError("Tape::backward: loss must be scalar, got " + shape_str(loss.shape()));
        }
        if (!loss.requires_grad()) {
            throw NumericError("Tape::backward: loss does not require grad");
        }
        if (!std::isfinite(loss.item())) {
            throw NumericError("Tape::backward: loss is not finite");
        }
        loss.grad()[0] += 1.0;
        for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
    }

private:
    static Tape*& active_tape() {
        thread_local Tape* tape = nullptr;
        return tape;
    }

    std::vector<std::function<void()>> steps_;
    Tape* prev_ = nullptr;
    bool consumed_ = false;
};

// Suppresses recording within a scope (evaluation / finite differences).
class NoGradGuard {
public:
    NoGradGuard() { ++depth(); }
    ~NoGradGuard() { --depth(); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

    static bool active() { return depth() > 0; }

private:
    static int& depth() {
        thread_local int d = 0;
        return d;
    }
};

namespace detail {

inline bool should_record(bool out_requires_grad) {
    return out_requires_grad && Tape::active() != nullptr && !NoGradGuard::active();
}

inline void record_step(std::function<void()> fn) {
    Tape::active()->record(std::move(fn));
}

}  // namespace detail

}  // namespace ship
