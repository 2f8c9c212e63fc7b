#pragma once

#include <algorithm>
#include <cstddef>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace rareid {

using Shape = std::vector<std::size_t>;

/// Raised when operand extents are incompatible with an operation.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

inline std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

inline std::size_t numel_of(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

namespace detail {

struct TensorStorage {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
};

}  // namespace detail

/**
 * Dense row-major tensor of doubles with an optional gradient buffer.
 *
 * Copies share storage (handle semantics) so that the computation tape can
 * refer to operands after the caller's handles go out of scope. Use clone()
 * for an independent deep copy.
 */
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0) : impl_(std::make_shared<detail::TensorStorage>()) {
        validate_shape(shape);
        impl_->data.assign(numel_of(shape), fill);
        impl_->shape = std::move(shape);
    }

    Tensor(Shape shape, std::vector<double> values) : impl_(std::make_shared<detail::TensorStorage>()) {
        validate_shape(shape);
        if (values.size() != numel_of(shape)) {
            throw ShapeError("tensor data length " + std::to_string(values.size()) + " does not match shape " +
                             to_string(shape));
        }
        impl_->shape = std::move(shape);
        impl_->data = std::move(values);
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
    static Tensor full(Shape shape, double value) { return Tensor(std::move(shape), value); }
    static Tensor scalar(double value) { return Tensor(Shape{1}, std::vector<double>{value}); }
    static Tensor of(Shape shape, std::initializer_list<double> values) {
        return Tensor(std::move(shape), std::vector<double>(values));
    }

    bool defined() const noexcept { return static_cast<bool>(impl_); }

    const Shape& shape() const { return storage().shape; }
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t axis) const {
        if (axis >= rank()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + to_string(shape()));
        return shape()[axis];
    }
    std::size_t numel() const { return storage().data.size(); }

    std::span<double> data() { return storage().data; }
    std::span<const double> data() const { return storage().data; }
    double& operator[](std::size_t i) { return storage().data[i]; }
    double operator[](std::size_t i) const { return storage().data[i]; }
    double item() const {
        if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
        return storage().data[0];
    }

    bool requires_grad() const { return storage().requires_grad; }
    Tensor& set_requires_grad(bool on) {
        storage().requires_grad = on;
        return *this;
    }

    bool has_grad() const { return !storage().grad.empty(); }
    /// Allocates a zero gradient buffer on first use.
    std::span<double> grad() {
        auto& s = storage();
        if (s.grad.empty()) s.grad.assign(s.data.size(), 0.0);
        return s.grad;
    }
    std::span<const double> grad() const { return storage().grad; }
    void zero_grad() { std::fill(storage().grad.begin(), storage().grad.end(), 0.0); }
    void clear_grad() { storage().grad.clear(); }

    Tensor clone() const {
        Tensor out(shape(), std::vector<double>(data().begin(), data().end()));
        return out;
    }

    bool same_storage(const Tensor& other) const noexcept { return impl_ == other.impl_; }

    /// Bitwise equality of shape and data.
    bool equals(const Tensor& other) const {
        return shape() == other.shape() && std::equal(data().begin(), data().end(), other.data().begin(),
                                                      [](double a, double b) {
                                                          return std::memcmp(&a, &b, sizeof(double)) == 0;
                                                      });
    }

private:
    static void validate_shape(const Shape& shape) {
        if (shape.empty()) throw ShapeError("tensor rank must be at least 1");
        for (std::size_t i = 0; i < shape.size(); ++i) {
            if (shape[i] == 0) throw ShapeError("zero extent at dimension " + std::to_string(i) + " of " + to_string(shape));
        }
    }

    detail::TensorStorage& storage() {
        if (!impl_) throw std::logic_error("use of undefined tensor");
        return *impl_;
    }
    const detail::TensorStorage& storage() const {
        if (!impl_) throw std::logic_error("use of undefined tensor");
        return *impl_;
    }

    std::shared_ptr<detail::TensorStorage> impl_;
};

/**
 * Ordered record of executed differentiable operations.
 *
 * Each recorded entry holds the closure that propagates the output gradient
 * into its inputs. backward() runs the closures once each in reverse order
 * and then empties the tape. A disabled tape records nothing and is used for
 * inference and finite-difference probes.
 */
class Tape {
public:
    Tape() = default;
    explicit Tape(bool recording) : recording_(recording) {}

    static Tape disabled() { return Tape(false); }

    bool recording() const noexcept { return recording_; }
    std::size_t size() const noexcept { return entries_.size(); }
    bool empty() const noexcept { return entries_.empty(); }

    /// True when an operation on these operands must be recorded.
    bool tracks(std::initializer_list<const Tensor*> operands) const {
        if (!recording_) return false;
        return std::any_of(operands.begin(), operands.end(),
                           [](const Tensor* t) { return t && t->defined() && t->requires_grad(); });
    }

    void record(const char* op, std::function<void()> backward_fn) {
        entries_.push_back(Entry{op, std::move(backward_fn)});
    }

    void backward(Tensor loss) {
        if (loss.numel() != 1) throw ShapeError("backward requires a scalar loss, got " + to_string(loss.shape()));
        if (entries_.empty()) throw std::logic_error("backward on an empty tape");
        if (!loss.requires_grad()) throw std::logic_error("loss does not depend on any tensor requiring grad");
        loss.grad()[0] += 1.0;
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->backward();
        entries_.clear();
    }

    void clear() { entries_.clear(); }

private:
    struct Entry {
        const char* op;
        std::function<void()> backward;
    };
    std::vector<Entry> entries_;
    bool recording_ = true;
};

}  // namespace rareid
