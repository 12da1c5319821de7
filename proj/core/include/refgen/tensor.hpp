#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "refgen/errors.hpp"
#include "refgen/rng.hpp"

namespace refgen {

using Shape = std::vector<int>;

inline size_t shape_numel(const Shape& s) {
    size_t n = 1;
    for (int d : s) n *= static_cast<size_t>(d);
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

// Dense row-major tensor. The handle is a cheap shared reference to the
// storage: ops produce fresh storage, so values are immutable after creation
// except for gradient accumulation (and explicit parameter updates between
// training steps).
template <class T>
class BasicTensor {
public:
    struct Storage {
        Shape shape;
        std::vector<T> data;
        std::vector<T> grad;   // empty until first accumulation
        bool requires_grad = false;

        size_t numel() const { return data.size(); }
        bool grad_allocated() const { return !grad.empty(); }
        void ensure_grad() {
            if (grad.empty()) grad.assign(data.size(), T(0));
        }
    };

    BasicTensor() = default;

    static BasicTensor zeros(Shape shape, bool requires_grad = false) {
        return filled(std::move(shape), T(0), requires_grad);
    }

    static BasicTensor filled(Shape shape, T value, bool requires_grad = false) {
        BasicTensor t;
        t.s_ = std::make_shared<Storage>();
        t.s_->shape = std::move(shape);
        t.s_->data.assign(shape_numel(t.s_->shape), value);
        t.s_->requires_grad = requires_grad;
        return t;
    }

    static BasicTensor from_data(Shape shape, std::vector<T> data, bool requires_grad = false) {
        if (data.size() != shape_numel(shape)) {
            throw ShapeError("from_data: " + std::to_string(data.size()) +
                             " values do not fill shape " + shape_str(shape));
        }
        BasicTensor t;
        t.s_ = std::make_shared<Storage>();
        t.s_->shape = std::move(shape);
        t.s_->data = std::move(data);
        t.s_->requires_grad = requires_grad;
        return t;
    }

    static BasicTensor scalar(T value, bool requires_grad = false) {
        return from_data({1}, {value}, requires_grad);
    }

    static BasicTensor randn(Shape shape, Rng& rng, T stddev = T(1), bool requires_grad = false) {
        BasicTensor t = zeros(std::move(shape), requires_grad);
        for (auto& v : t.s_->data) v = static_cast<T>(rng.normal()) * stddev;
        return t;
    }

    bool defined() const { return s_ != nullptr; }
    const Shape& shape() const { return s_->shape; }
    int dim(int i) const { return s_->shape[static_cast<size_t>(i)]; }
    int ndim() const { return static_cast<int>(s_->shape.size()); }
    size_t numel() const { return s_->numel(); }
    bool requires_grad() const { return s_ && s_->requires_grad; }
    void set_requires_grad(bool rg) { s_->requires_grad = rg; }

    const std::vector<T>& data() const { return s_->data; }
    std::vector<T>& mutable_data() { return s_->data; }
    const std::vector<T>& grad() const {
        s_->ensure_grad();
        return s_->grad;
    }
    std::vector<T>& mutable_grad() {
        s_->ensure_grad();
        return s_->grad;
    }
    bool grad_allocated() const { return s_->grad_allocated(); }
    void zero_grad() { s_->grad.clear(); }

    T item() const {
        if (numel() != 1) {
            throw ContractError("item: tensor " + shape_str(shape()) + " is not scalar");
        }
        return s_->data[0];
    }

    T at(std::initializer_list<int> idx) const {
        return s_->data[offset(idx)];
    }

    std::shared_ptr<Storage> state() const { return s_; }

    // Value copy sharing no storage; drops graph membership.
    BasicTensor detach() const {
        BasicTensor t;
        t.s_ = std::make_shared<Storage>();
        t.s_->shape = s_->shape;
        t.s_->data = s_->data;
        t.s_->requires_grad = false;
        return t;
    }

private:
    size_t offset(std::initializer_list<int> idx) const {
        size_t off = 0;
        size_t k = 0;
        for (int i : idx) {
            off = off * static_cast<size_t>(s_->shape[k]) + static_cast<size_t>(i);
            ++k;
        }
        return off;
    }

    std::shared_ptr<Storage> s_;
};

// Ordered record of executed differentiable ops. Backward replays the record
// in exact reverse execution order. Grads of op outputs recorded on the tape
// are transient scratch, reset at the start of each backward pass; grads of
// leaves (parameters, inputs) persist and accumulate additively, so two
// backward passes double them. A tape belongs to one thread.
template <class T>
class Tape {
public:
    struct Entry {
        std::function<void()> backward;
        std::shared_ptr<typename BasicTensor<T>::Storage> output;
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    void record(std::function<void()> fn, std::shared_ptr<typename BasicTensor<T>::Storage> output) {
        entries_.push_back(Entry{std::move(fn), std::move(output)});
    }
    size_t size() const { return entries_.size(); }
    void clear() { entries_.clear(); }

    void backward(const BasicTensor<T>& loss) {
        if (loss.numel() != 1) {
            throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
        }
        for (auto& e : entries_) e.output->grad.clear();
        auto s = loss.state();
        s->ensure_grad();
        s->grad[0] += T(1);
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->backward();
    }

    static Tape*& current() {
        thread_local Tape* active = nullptr;
        return active;
    }

private:
    std::vector<Entry> entries_;
};

// Makes a tape active for the current scope; ops record onto it.
template <class T>
class TapeScope {
public:
    explicit TapeScope(Tape<T>& tape) : prev_(Tape<T>::current()) {
        Tape<T>::current() = &tape;
    }
    ~TapeScope() { Tape<T>::current() = prev_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape<T>* prev_;
};

using Tensor = BasicTensor<float>;
using DTensor = BasicTensor<double>;

} // namespace refgen
