// Copyright (c) 2026 The prefmoe authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense double-precision tensors of rank <= 3 with reverse-mode
// differentiation. Primitives record onto the thread's active Tape when any
// input is tracked; without an active tape they evaluate eagerly. Every
// primitive validates that its output is finite.

#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "prefmoe/rng.hpp"

namespace prefmoe {

/// Mismatched or unsupported shapes passed to a primitive.
class ShapeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A primitive produced NaN/Inf, or a numeric contract was violated.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed files, datasets or configuration data.
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace num {

/// Extents of a tensor, rank 0 (scalar) through 3 (batch x time x feature).
class Shape {
public:
    Shape() = default;  // rank-0 scalar

    Shape(std::initializer_list<int> extents) {
        if (extents.size() > 3) {
            throw ShapeError("Shape: rank > 3 not supported");
        }
        rank_ = static_cast<int>(extents.size());
        int i = 0;
        for (int e : extents) {
            if (e <= 0) {
                throw ShapeError("Shape: non-positive extent");
            }
            dims_[i++] = e;
        }
    }

    static Shape scalar() { return Shape{}; }

    int rank() const { return rank_; }

    int dim(int axis) const {
        if (axis < 0 || axis >= rank_) {
            throw ShapeError("Shape::dim: axis out of range");
        }
        return dims_[axis];
    }

    std::int64_t numel() const {
        std::int64_t n = 1;
        for (int i = 0; i < rank_; ++i) {
            n *= dims_[i];
        }
        return n;
    }

    bool operator==(const Shape& other) const {
        if (rank_ != other.rank_) {
            return false;
        }
        for (int i = 0; i < rank_; ++i) {
            if (dims_[i] != other.dims_[i]) {
                return false;
            }
        }
        return true;
    }
    bool operator!=(const Shape& other) const { return !(*this == other); }

    std::string str() const;

private:
    int dims_[3] = {1, 1, 1};
    int rank_ = 0;
};

class Tape;

/// Value-semantic tensor. Copies share the underlying buffer; buffers are
/// treated as immutable once created except for parameter updates between
/// training steps (via mutable_data).
class Tensor {
public:
    Tensor() : Tensor(Shape::scalar(), 0.0) {}

    Tensor(Shape shape, double fill)
        : shape_(shape),
          data_(std::make_shared<std::vector<double>>(
              static_cast<std::size_t>(shape.numel()), fill)) {}

    static Tensor zeros(Shape shape) { return Tensor(shape, 0.0); }
    static Tensor full(Shape shape, double v) { return Tensor(shape, v); }
    static Tensor scalar(double v) { return Tensor(Shape::scalar(), v); }
    static Tensor from_data(Shape shape, std::vector<double> values);
    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0);

    const Shape& shape() const { return shape_; }
    std::int64_t numel() const { return shape_.numel(); }

    std::span<const double> data() const { return {data_->data(), data_->size()}; }

    /// Writable view. Only parameter initialization and optimizer updates may
    /// use this; recorded intermediates must never be mutated.
    std::span<double> mutable_data() { return {data_->data(), data_->size()}; }

    /// The single element of a scalar (or one-element) tensor.
    double value() const {
        if (numel() != 1) {
            throw ShapeError("Tensor::value: tensor is not scalar");
        }
        return (*data_)[0];
    }

    double operator()(int i) const { return (*data_)[static_cast<std::size_t>(i)]; }
    double operator()(int i, int j) const {
        return (*data_)[static_cast<std::size_t>(i) * shape_.dim(1) + j];
    }
    double operator()(int i, int j, int k) const {
        return (*data_)[(static_cast<std::size_t>(i) * shape_.dim(1) + j) *
                            shape_.dim(2) +
                        k];
    }

    bool requires_grad() const { return requires_grad_; }
    Tensor& set_requires_grad(bool on) {
        requires_grad_ = on;
        return *this;
    }

    /// Same values, no autodiff history and no grad request.
    Tensor detached() const;

private:
    friend class Tape;
    friend struct Recorder;

    Shape shape_;
    std::shared_ptr<std::vector<double>> data_;
    bool requires_grad_ = false;
    int node_ = -1;            // index on the tape identified by tape_id_
    std::uint64_t tape_id_ = 0;
};

/// Records primitive applications in execution order (which is a topological
/// order by construction) and replays them backward. One tape may be active
/// per thread; construction activates, destruction deactivates.
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active();

    /// Reverse sweep from a scalar output. Gradients for every tracked leaf
    /// are accumulated in tape order; repeat uses of a value add exactly one
    /// contribution each.
    void backward(const Tensor& output);

    /// Gradient of a tracked tensor after backward(). Zero tensor if the
    /// tensor participated but received no gradient.
    Tensor grad(const Tensor& t) const;

    bool tracks(const Tensor& t) const { return node_index(t) >= 0; }

    std::size_t node_count() const { return nodes_.size(); }

    /// Gradient buffer of a node, allocated zero on first touch. Part of the
    /// primitive-implementation API, not for general use.
    std::vector<double>& grad_buffer(int node);
    /// Recorded output values of a node.
    const std::vector<double>& node_value(int node) const {
        return *nodes_[static_cast<std::size_t>(node)].value;
    }

private:
    friend struct Recorder;

    struct Node {
        Shape shape;
        std::shared_ptr<std::vector<double>> value;  // shared with the tensor
        std::vector<int> inputs;
        std::function<void(Tape&, int)> backward;  // may be empty (leaf)
        std::vector<double> grad;                  // lazily allocated
    };

    int node_index(const Tensor& t) const;
    int leaf_for(const Tensor& t);

    std::vector<Node> nodes_;
    std::unordered_map<const std::vector<double>*, int> leaves_;
    std::uint64_t id_;
    Tape* prev_;
    bool swept_ = false;
};

// --- primitives ------------------------------------------------------------
// Elementwise binary ops broadcast numpy-style: shapes align from the
// trailing axis; extents must match or be 1.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scalar_mul(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);

Tensor relu(const Tensor& a);
Tensor tanh(const Tensor& a);
/// log(sigmoid(x)), computed without overflow for |x| up to ~1e4.
Tensor log_sigmoid(const Tensor& a);

/// [m,k]x[k,n], [B,m,k]x[k,n] (shared rhs) or [B,m,k]x[B,k,n].
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose_last2(const Tensor& a);

/// Max-subtracted softmax along `axis`; each slice sums to 1.
Tensor softmax_stable(const Tensor& logits, int axis);

/// Normalizes the last axis to zero mean / unit variance (biased variance,
/// eps inside the square root), then applies gain and bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);

Tensor sum_axis(const Tensor& a, int axis);
Tensor mean_axis(const Tensor& a, int axis);
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);

Tensor concat(const Tensor& a, const Tensor& b, int axis);
/// Contiguous sub-range [start, start+len) of the last axis.
Tensor slice_last(const Tensor& a, int start, int len);
/// Contiguous sub-range [start, start+len) of the first axis.
Tensor slice_rows(const Tensor& a, int start, int len);
/// Same data, new extents (numel must match).
Tensor reshape(const Tensor& a, Shape shape);

/// Additive causal mask: 0 for key <= query, -1e9 above the diagonal.
/// The large negative surrogate saturates softmax to zero weight while
/// keeping the arithmetic finite.
Tensor causal_mask(int steps);

}  // namespace num
}  // namespace prefmoe
