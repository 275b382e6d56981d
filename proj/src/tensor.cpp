// Copyright (c) 2026 The prefmoe authors
// SPDX-License-Identifier: Apache-2.0

#include "prefmoe/tensor.hpp"

#include <atomic>
#include <cmath>
#include <cstring>
#include <utility>

namespace prefmoe {
namespace num {

namespace {

thread_local Tape* g_active_tape = nullptr;
std::uint64_t next_tape_id() {
    static std::atomic<std::uint64_t> counter{1};
    return counter.fetch_add(1);
}

void ensure_finite(std::span<const double> values, const char* op) {
    for (double v : values) {
        if (!std::isfinite(v)) {
            throw NumericalError(std::string(op) + ": non-finite value produced");
        }
    }
}

double stable_sigmoid(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double stable_log_sigmoid(double x) {
    // log sigmoid(x) = -softplus(-x)
    if (x >= 0.0) {
        return -std::log1p(std::exp(-x));
    }
    return x - std::log1p(std::exp(x));
}

/// (outer, n, inner) decomposition of a shape around one axis.
struct AxisSplit {
    std::int64_t outer = 1;
    std::int64_t n = 1;
    std::int64_t inner = 1;
};

AxisSplit split_axis(const Shape& s, int axis) {
    if (axis < 0 || axis >= s.rank()) {
        throw ShapeError("axis out of range for shape " + s.str());
    }
    AxisSplit sp;
    for (int i = 0; i < axis; ++i) {
        sp.outer *= s.dim(i);
    }
    sp.n = s.dim(axis);
    for (int i = axis + 1; i < s.rank(); ++i) {
        sp.inner *= s.dim(i);
    }
    return sp;
}

/// Broadcast plan for elementwise binary ops, padded to three loop levels.
struct BcastPlan {
    Shape out;
    std::int64_t extent[3] = {1, 1, 1};
    std::int64_t stride_a[3] = {0, 0, 0};
    std::int64_t stride_b[3] = {0, 0, 0};
};

BcastPlan make_bcast_plan(const Shape& a, const Shape& b, const char* op) {
    const int rank = a.rank() > b.rank() ? a.rank() : b.rank();
    int out_dims[3] = {1, 1, 1};
    int a_dims[3] = {1, 1, 1};
    int b_dims[3] = {1, 1, 1};
    // Align from the trailing axis into a common rank-3 frame.
    for (int i = 0; i < a.rank(); ++i) {
        a_dims[3 - a.rank() + i] = a.dim(i);
    }
    for (int i = 0; i < b.rank(); ++i) {
        b_dims[3 - b.rank() + i] = b.dim(i);
    }
    for (int i = 0; i < 3; ++i) {
        if (a_dims[i] != b_dims[i] && a_dims[i] != 1 && b_dims[i] != 1) {
            throw ShapeError(std::string(op) + ": cannot broadcast " + a.str() +
                             " with " + b.str());
        }
        out_dims[i] = a_dims[i] > b_dims[i] ? a_dims[i] : b_dims[i];
    }

    BcastPlan plan;
    std::initializer_list<int> out_list = {out_dims[3 - rank + 0],
                                           rank > 1 ? out_dims[3 - rank + 1] : 1,
                                           rank > 2 ? out_dims[2] : 1};
    (void)out_list;
    switch (rank) {
        case 0:
            plan.out = Shape::scalar();
            break;
        case 1:
            plan.out = Shape{out_dims[2]};
            break;
        case 2:
            plan.out = Shape{out_dims[1], out_dims[2]};
            break;
        default:
            plan.out = Shape{out_dims[0], out_dims[1], out_dims[2]};
            break;
    }
    std::int64_t sa = 1;
    std::int64_t sb = 1;
    for (int i = 2; i >= 0; --i) {
        plan.extent[i] = out_dims[i];
        plan.stride_a[i] = (a_dims[i] == 1 && out_dims[i] > 1) ? 0 : sa;
        plan.stride_b[i] = (b_dims[i] == 1 && out_dims[i] > 1) ? 0 : sb;
        sa *= a_dims[i];
        sb *= b_dims[i];
    }
    return plan;
}

}  // namespace

std::string Shape::str() const {
    std::string s = "[";
    for (int i = 0; i < rank_; ++i) {
        if (i) {
            s += ", ";
        }
        s += std::to_string(dims_[i]);
    }
    return s + "]";
}

Tensor Tensor::from_data(Shape shape, std::vector<double> values) {
    if (static_cast<std::int64_t>(values.size()) != shape.numel()) {
        throw ShapeError("from_data: " + std::to_string(values.size()) +
                         " values for shape " + shape.str());
    }
    Tensor t;
    t.shape_ = shape;
    t.data_ = std::make_shared<std::vector<double>>(std::move(values));
    ensure_finite(t.data(), "from_data");
    return t;
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev) {
    Tensor t(shape, 0.0);
    for (double& v : *t.data_) {
        v = rng.normal() * stddev;
    }
    return t;
}

Tensor Tensor::detached() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = data_;
    return t;
}

// --- Tape -------------------------------------------------------------------

Tape::Tape() : id_(next_tape_id()), prev_(g_active_tape) { g_active_tape = this; }

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::active() { return g_active_tape; }

int Tape::node_index(const Tensor& t) const {
    if (t.node_ >= 0 && t.tape_id_ == id_) {
        return t.node_;
    }
    auto it = leaves_.find(t.data_.get());
    return it == leaves_.end() ? -1 : it->second;
}

int Tape::leaf_for(const Tensor& t) {
    auto it = leaves_.find(t.data_.get());
    if (it != leaves_.end()) {
        return it->second;
    }
    Node node;
    node.shape = t.shape_;
    node.value = t.data_;
    const int id = static_cast<int>(nodes_.size());
    nodes_.push_back(std::move(node));
    leaves_.emplace(t.data_.get(), id);
    return id;
}

std::vector<double>& Tape::grad_buffer(int node) {
    auto& g = nodes_[static_cast<std::size_t>(node)].grad;
    if (g.empty()) {
        g.assign(nodes_[static_cast<std::size_t>(node)].value->size(), 0.0);
    }
    return g;
}

void Tape::backward(const Tensor& output) {
    if (output.numel() != 1) {
        throw ShapeError("backward: output must be scalar, got " +
                         output.shape().str());
    }
    if (swept_) {
        throw std::logic_error("backward: tape already swept");
    }
    int root = node_index(output);
    if (root < 0 && output.requires_grad()) {
        root = leaf_for(output);
    }
    if (root < 0) {
        throw std::invalid_argument("backward: output is not recorded on this tape");
    }
    swept_ = true;
    grad_buffer(root)[0] = 1.0;
    for (int i = root; i >= 0; --i) {
        Node& node = nodes_[static_cast<std::size_t>(i)];
        if (!node.grad.empty() && node.backward) {
            node.backward(*this, i);
        }
    }
}

Tensor Tape::grad(const Tensor& t) const {
    const int id = node_index(t);
    if (id < 0) {
        throw std::invalid_argument("grad: tensor is not tracked on this tape");
    }
    const Node& node = nodes_[static_cast<std::size_t>(id)];
    if (node.grad.empty()) {
        return Tensor::zeros(node.shape);
    }
    return Tensor::from_data(node.shape, node.grad);
}

// --- recording helper ---------------------------------------------------

struct Recorder {
    static const std::shared_ptr<std::vector<double>>& buffer(const Tensor& t) {
        return t.data_;
    }

    /// Tape node id for `x`, registering parameter leaves on first use.
    /// -1 marks a constant (untracked) input.
    static int resolve(Tape* tape, const Tensor& x) {
        if (tape == nullptr) {
            return -1;
        }
        if (x.node_ >= 0 && x.tape_id_ == tape->id_) {
            return x.node_;
        }
        if (x.requires_grad_) {
            return tape->leaf_for(x);
        }
        return -1;
    }

    static Tensor finish(Shape shape, std::vector<double> values, const char* op,
                         std::vector<int> inputs,
                         std::function<void(Tape&, int)> backward) {
        Tensor out = Tensor::from_data(shape, std::move(values));
        (void)op;
        Tape* tape = Tape::active();
        if (tape == nullptr) {
            return out;
        }
        bool tracked = false;
        for (int id : inputs) {
            tracked = tracked || id >= 0;
        }
        if (!tracked) {
            return out;
        }
        Tape::Node node;
        node.shape = out.shape_;
        node.value = out.data_;
        node.inputs = std::move(inputs);
        node.backward = std::move(backward);
        out.node_ = static_cast<int>(tape->nodes_.size());
        out.tape_id_ = tape->id_;
        tape->nodes_.push_back(std::move(node));
        return out;
    }
};

// --- elementwise binary ------------------------------------------------

namespace {

using BinaryFn = double (*)(double, double);

Tensor binary_op(const Tensor& a, const Tensor& b, const char* op, BinaryFn fwd,
                 BinaryFn grad_a, BinaryFn grad_b) {
    const BcastPlan plan = make_bcast_plan(a.shape(), b.shape(), op);
    std::vector<double> out(static_cast<std::size_t>(plan.out.numel()));
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    std::size_t o = 0;
    for (std::int64_t i = 0; i < plan.extent[0]; ++i) {
        for (std::int64_t j = 0; j < plan.extent[1]; ++j) {
            const std::int64_t base_a = i * plan.stride_a[0] + j * plan.stride_a[1];
            const std::int64_t base_b = i * plan.stride_b[0] + j * plan.stride_b[1];
            for (std::int64_t k = 0; k < plan.extent[2]; ++k) {
                out[o++] = fwd(pa[base_a + k * plan.stride_a[2]],
                               pb[base_b + k * plan.stride_b[2]]);
            }
        }
    }
    ensure_finite(out, op);

    Tape* tape = Tape::active();
    const int ia = Recorder::resolve(tape, a);
    const int ib = Recorder::resolve(tape, b);
    auto da = Recorder::buffer(a);
    auto db = Recorder::buffer(b);
    return Recorder::finish(
        plan.out, std::move(out), op, {ia, ib},
        [plan, ia, ib, da, db, grad_a, grad_b](Tape& t, int self) {
            const std::vector<double>& gy = t.grad_buffer(self);
            double* ga = ia >= 0 ? t.grad_buffer(ia).data() : nullptr;
            double* gb = ib >= 0 ? t.grad_buffer(ib).data() : nullptr;
            const double* pa = da->data();
            const double* pb = db->data();
            std::size_t o = 0;
            for (std::int64_t i = 0; i < plan.extent[0]; ++i) {
                for (std::int64_t j = 0; j < plan.extent[1]; ++j) {
                    const std::int64_t base_a =
                        i * plan.stride_a[0] + j * plan.stride_a[1];
                    const std::int64_t base_b =
                        i * plan.stride_b[0] + j * plan.stride_b[1];
                    for (std::int64_t k = 0; k < plan.extent[2]; ++k, ++o) {
                        const std::int64_t oa = base_a + k * plan.stride_a[2];
                        const std::int64_t ob = base_b + k * plan.stride_b[2];
                        if (ga != nullptr) {
                            ga[oa] += gy[o] * grad_a(pa[oa], pb[ob]);
                        }
                        if (gb != nullptr) {
                            gb[ob] += gy[o] * grad_b(pa[oa], pb[ob]);
                        }
                    }
                }
            }
        });
}

using UnaryFn = double (*)(double);
using UnaryGradFn = double (*)(double x, double y);

Tensor unary_op(const Tensor& a, const char* op, UnaryFn fwd, UnaryGradFn dfn) {
    std::vector<double> out(a.data().begin(), a.data().end());
    for (double& v : out) {
        v = fwd(v);
    }
    ensure_finite(out, op);
    Tape* tape = Tape::active();
    const int ia = Recorder::resolve(tape, a);
    auto din = Recorder::buffer(a);
    return Recorder::finish(a.shape(), std::move(out), op, {ia},
                            [ia, din, dfn](Tape& t, int self) {
                                const auto& gy = t.grad_buffer(self);
                                const auto& y = t.node_value(self);
                                auto& ga = t.grad_buffer(ia);
                                const double* x = din->data();
                                for (std::size_t i = 0; i < gy.size(); ++i) {
                                    ga[i] += gy[i] * dfn(x[i], y[i]);
                                }
                            });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_op(
        a, b, "add", [](double x, double y) { return x + y; },
        [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_op(
        a, b, "sub", [](double x, double y) { return x - y; },
        [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_op(
        a, b, "mul", [](double x, double y) { return x * y; },
        [](double, double y) { return y; }, [](double x, double) { return x; });
}

Tensor scalar_mul(const Tensor& a, double c) {
    std::vector<double> out(a.data().begin(), a.data().end());
    for (double& v : out) {
        v *= c;
    }
    ensure_finite(out, "scalar_mul");
    const int ia = Recorder::resolve(Tape::active(), a);
    return Recorder::finish(a.shape(), std::move(out), "scalar_mul", {ia},
                            [ia, c](Tape& t, int self) {
                                const auto& gy = t.grad_buffer(self);
                                auto& ga = t.grad_buffer(ia);
                                for (std::size_t i = 0; i < gy.size(); ++i) {
                                    ga[i] += gy[i] * c;
                                }
                            });
}

Tensor add_scalar(const Tensor& a, double c) {
    std::vector<double> out(a.data().begin(), a.data().end());
    for (double& v : out) {
        v += c;
    }
    ensure_finite(out, "add_scalar");
    const int ia = Recorder::resolve(Tape::active(), a);
    return Recorder::finish(a.shape(), std::move(out), "add_scalar", {ia},
                            [ia](Tape& t, int self) {
                                const auto& gy = t.grad_buffer(self);
                                auto& ga = t.grad_buffer(ia);
                                for (std::size_t i = 0; i < gy.size(); ++i) {
                                    ga[i] += gy[i];
                                }
                            });
}

Tensor relu(const Tensor& a) {
    return unary_op(
        a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
        [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor tanh(const Tensor& a) {
    return unary_op(
        a, "tanh", [](double x) { return std::tanh(x); },
        [](double, double y) { return 1.0 - y * y; });
}

Tensor log_sigmoid(const Tensor& a) {
    return unary_op(
        a, "log_sigmoid", [](double x) { return stable_log_sigmoid(x); },
        [](double x, double) { return stable_sigmoid(-x); });
}

// --- matmul -----------------------------------------------------------------

namespace {

// C[m,n] += A[m,k] * B[k,n]
void mm(const double* A, const double* B, double* C, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* arow = A + static_cast<std::size_t>(i) * k;
        double* crow = C + static_cast<std::size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double av = arow[p];
            const double* brow = B + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

// C[m,k] += G[m,n] * B[k,n]^T
void mm_gbt(const double* G, const double* B, double* C, int m, int n, int k) {
    for (int i = 0; i < m; ++i) {
        const double* grow = G + static_cast<std::size_t>(i) * n;
        double* crow = C + static_cast<std::size_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            const double* brow = B + static_cast<std::size_t>(p) * n;
            double s = 0.0;
            for (int j = 0; j < n; ++j) {
                s += grow[j] * brow[j];
            }
            crow[p] += s;
        }
    }
}

// C[k,n] += A[m,k]^T * G[m,n]
void mm_atg(const double* A, const double* G, double* C, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* arow = A + static_cast<std::size_t>(i) * k;
        const double* grow = G + static_cast<std::size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double av = arow[p];
            double* crow = C + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) {
                crow[j] += av * grow[j];
            }
        }
    }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.rank() < 2 || sb.rank() < 2 || sb.rank() > sa.rank()) {
        throw ShapeError("matmul: unsupported ranks " + sa.str() + " x " + sb.str());
    }
    const int batches = sa.rank() == 3 ? sa.dim(0) : 1;
    const int m = sa.dim(sa.rank() - 2);
    const int k = sa.dim(sa.rank() - 1);
    const bool shared_rhs = sb.rank() == 2;
    if (!shared_rhs && sb.dim(0) != batches) {
        throw ShapeError("matmul: batch mismatch " + sa.str() + " x " + sb.str());
    }
    const int k2 = sb.dim(sb.rank() - 2);
    const int n = sb.dim(sb.rank() - 1);
    if (k != k2) {
        throw ShapeError("matmul: inner extent mismatch " + sa.str() + " x " +
                         sb.str());
    }
    const Shape out_shape =
        sa.rank() == 3 ? Shape{batches, m, n} : Shape{m, n};

    std::vector<double> out(static_cast<std::size_t>(out_shape.numel()), 0.0);
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    for (int bi = 0; bi < batches; ++bi) {
        mm(pa + static_cast<std::size_t>(bi) * m * k,
           shared_rhs ? pb : pb + static_cast<std::size_t>(bi) * k * n,
           out.data() + static_cast<std::size_t>(bi) * m * n, m, k, n);
    }
    ensure_finite(out, "matmul");

    Tape* tape = Tape::active();
    const int ia = Recorder::resolve(tape, a);
    const int ib = Recorder::resolve(tape, b);
    auto da = Recorder::buffer(a);
    auto db = Recorder::buffer(b);
    return Recorder::finish(
        out_shape, std::move(out), "matmul", {ia, ib},
        [=](Tape& t, int self) {
            const double* gy = t.grad_buffer(self).data();
            const double* pa = da->data();
            const double* pb = db->data();
            double* ga = ia >= 0 ? t.grad_buffer(ia).data() : nullptr;
            double* gb = ib >= 0 ? t.grad_buffer(ib).data() : nullptr;
            for (int bi = 0; bi < batches; ++bi) {
                const double* gyb = gy + static_cast<std::size_t>(bi) * m * n;
                const double* ab = pa + static_cast<std::size_t>(bi) * m * k;
                const double* bb =
                    shared_rhs ? pb : pb + static_cast<std::size_t>(bi) * k * n;
                if (ga != nullptr) {
                    mm_gbt(gyb, bb, ga + static_cast<std::size_t>(bi) * m * k, m, n,
                           k);
                }
                if (gb != nullptr) {
                    mm_atg(ab, gyb,
                           shared_rhs ? gb
                                      : gb + static_cast<std::size_t>(bi) * k * n,
                           m, k, n);
                }
            }
        });
}

Tensor transpose_last2(const Tensor& a) {
    const Shape& s = a.shape();
    if (s.rank() < 2) {
        throw ShapeError("transpose_last2: rank < 2");
    }
    const int batches = s.rank() == 3 ? s.dim(0) : 1;
    const int m = s.dim(s.rank() - 2);
    const int n = s.dim(s.rank() - 1);
    const Shape out_shape = s.rank() == 3 ? Shape{batches, n, m} : Shape{n, m};
    std::vector<double> out(static_cast<std::size_t>(s.numel()));
    const double* pa = a.data().data();
    for (int bi = 0; bi < batches; ++bi) {
        const double* src = pa + static_cast<std::size_t>(bi) * m * n;
        double* dst = out.data() + static_cast<std::size_t>(bi) * m * n;
        for (int i = 0; i < m; ++i) {
            for (int j = 0; j < n; ++j) {
                dst[static_cast<std::size_t>(j) * m + i] =
                    src[static_cast<std::size_t>(i) * n + j];
            }
        }
    }
    const int ia = Recorder::resolve(Tape::active(), a);
    return Recorder::finish(out_shape, std::move(out), "transpose_last2", {ia},
                            [=](Tape& t, int self) {
                                const double* gy = t.grad_buffer(self).data();
                                double* ga = t.grad_buffer(ia).data();
                                for (int bi = 0; bi < batches; ++bi) {
                                    const double* g =
                                        gy + static_cast<std::size_t>(bi) * m * n;
                                    double* dst =
                                        ga + static_cast<std::size_t>(bi) * m * n;
                                    for (int j = 0; j < n; ++j) {
                                        for (int i = 0; i < m; ++i) {
                                            dst[static_cast<std::size_t>(i) * n + j] +=
                                                g[static_cast<std::size_t>(j) * m + i];
                                        }
                                    }
                                }
                            });
}

// --- softmax / layer norm ----------------------------------------------

Tensor softmax_stable(const Tensor& logits, int axis) {
    const AxisSplit sp = split_axis(logits.shape(), axis);
    std::vector<double> out(static_cast<std::size_t>(logits.numel()));
    const double* x = logits.data().data();
    for (std::int64_t o = 0; o < sp.outer; ++o) {
        for (std::int64_t r = 0; r < sp.inner; ++r) {
            const std::int64_t base = o * sp.n * sp.inner + r;
            double mx = x[base];
            for (std::int64_t i = 1; i < sp.n; ++i) {
                mx = std::max(mx, x[base + i * sp.inner]);
            }
            double sum = 0.0;
            for (std::int64_t i = 0; i < sp.n; ++i) {
                const double e = std::exp(x[base + i * sp.inner] - mx);
                out[static_cast<std::size_t>(base + i * sp.inner)] = e;
                sum += e;
            }
            const double inv = 1.0 / sum;
            for (std::int64_t i = 0; i < sp.n; ++i) {
                out[static_cast<std::size_t>(base + i * sp.inner)] *= inv;
            }
        }
    }
    ensure_finite(out, "softmax_stable");
    const int ia = Recorder::resolve(Tape::active(), logits);
    return Recorder::finish(
        logits.shape(), std::move(out), "softmax_stable", {ia},
        [ia, sp](Tape& t, int self) {
            const auto& gy = t.grad_buffer(self);
            const auto& y = t.node_value(self);
            auto& ga = t.grad_buffer(ia);
            for (std::int64_t o = 0; o < sp.outer; ++o) {
                for (std::int64_t r = 0; r < sp.inner; ++r) {
                    const std::int64_t base = o * sp.n * sp.inner + r;
                    double dot = 0.0;
                    for (std::int64_t i = 0; i < sp.n; ++i) {
                        const std::size_t idx =
                            static_cast<std::size_t>(base + i * sp.inner);
                        dot += gy[idx] * y[idx];
                    }
                    for (std::int64_t i = 0; i < sp.n; ++i) {
                        const std::size_t idx =
                            static_cast<std::size_t>(base + i * sp.inner);
                        ga[idx] += y[idx] * (gy[idx] - dot);
                    }
                }
            }
        });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps) {
    const Shape& s = x.shape();
    if (s.rank() < 1) {
        throw ShapeError("layer_norm: scalar input");
    }
    const int d = s.dim(s.rank() - 1);
    if (d < 2) {
        throw ShapeError("layer_norm: last extent must be >= 2");
    }
    if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
        throw ShapeError("layer_norm: gain/bias must have shape [d]");
    }
    const std::int64_t rows = s.numel() / d;
    std::vector<double> out(static_cast<std::size_t>(s.numel()));
    const double* px = x.data().data();
    const double* pg = gain.data().data();
    const double* pb = bias.data().data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* row = px + r * d;
        double* orow = out.data() + r * d;
        double mu = 0.0;
        for (int j = 0; j < d; ++j) {
            mu += row[j];
        }
        mu /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) {
            const double c = row[j] - mu;
            var += c * c;
        }
        var /= d;
        const double inv = 1.0 / std::sqrt(var + eps);
        for (int j = 0; j < d; ++j) {
            orow[j] = (row[j] - mu) * inv * pg[j] + pb[j];
        }
    }
    ensure_finite(out, "layer_norm");

    Tape* tape = Tape::active();
    const int ix = Recorder::resolve(tape, x);
    const int ig = Recorder::resolve(tape, gain);
    const int ib = Recorder::resolve(tape, bias);
    auto dx = Recorder::buffer(x);
    auto dg = Recorder::buffer(gain);
    return Recorder::finish(
        s, std::move(out), "layer_norm", {ix, ig, ib},
        [=](Tape& t, int self) {
            const auto& gy = t.grad_buffer(self);
            double* gxp = ix >= 0 ? t.grad_buffer(ix).data() : nullptr;
            double* ggp = ig >= 0 ? t.grad_buffer(ig).data() : nullptr;
            double* gbp = ib >= 0 ? t.grad_buffer(ib).data() : nullptr;
            const double* px = dx->data();
            const double* pg = dg->data();
            std::vector<double> xhat(static_cast<std::size_t>(d));
            for (std::int64_t r = 0; r < rows; ++r) {
                const double* row = px + r * d;
                const double* gr = gy.data() + r * d;
                double mu = 0.0;
                for (int j = 0; j < d; ++j) {
                    mu += row[j];
                }
                mu /= d;
                double var = 0.0;
                for (int j = 0; j < d; ++j) {
                    const double c = row[j] - mu;
                    var += c * c;
                }
                var /= d;
                const double inv = 1.0 / std::sqrt(var + eps);
                for (int j = 0; j < d; ++j) {
                    xhat[static_cast<std::size_t>(j)] = (row[j] - mu) * inv;
                }
                if (ggp != nullptr) {
                    for (int j = 0; j < d; ++j) {
                        ggp[j] += gr[j] * xhat[static_cast<std::size_t>(j)];
                    }
                }
                if (gbp != nullptr) {
                    for (int j = 0; j < d; ++j) {
                        gbp[j] += gr[j];
                    }
                }
                if (gxp != nullptr) {
                    double mean_dxhat = 0.0;
                    double mean_dxhat_xhat = 0.0;
                    for (int j = 0; j < d; ++j) {
                        const double dxh = gr[j] * pg[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xhat[static_cast<std::size_t>(j)];
                    }
                    mean_dxhat /= d;
                    mean_dxhat_xhat /= d;
                    double* gxr = gxp + r * d;
                    for (int j = 0; j < d; ++j) {
                        const double dxh = gr[j] * pg[j];
                        gxr[j] += inv * (dxh - mean_dxhat -
                                         xhat[static_cast<std::size_t>(j)] *
                                             mean_dxhat_xhat);
                    }
                }
            }
        });
}

// --- reductions -------------------------------------------------------------

namespace {

Shape drop_axis(const Shape& s, int axis) {
    std::vector<int> dims;
    for (int i = 0; i < s.rank(); ++i) {
        if (i != axis) {
            dims.push_back(s.dim(i));
        }
    }
    switch (dims.size()) {
        case 0:
            return Shape::scalar();
        case 1:
            return Shape{dims[0]};
        case 2:
            return Shape{dims[0], dims[1]};
        default:
            return Shape{dims[0], dims[1], dims[2]};
    }
}

Tensor reduce_axis(const Tensor& a, int axis, bool mean, const char* op) {
    const AxisSplit sp = split_axis(a.shape(), axis);
    const Shape out_shape = drop_axis(a.shape(), axis);
    const double scale = mean ? 1.0 / static_cast<double>(sp.n) : 1.0;
    std::vector<double> out(static_cast<std::size_t>(out_shape.numel()), 0.0);
    const double* px = a.data().data();
    for (std::int64_t o = 0; o < sp.outer; ++o) {
        for (std::int64_t i = 0; i < sp.n; ++i) {
            const double* src = px + (o * sp.n + i) * sp.inner;
            double* dst = out.data() + o * sp.inner;
            for (std::int64_t r = 0; r < sp.inner; ++r) {
                dst[r] += src[r];
            }
        }
    }
    if (mean) {
        for (double& v : out) {
            v *= scale;
        }
    }
    ensure_finite(out, op);
    const int ia = Recorder::resolve(Tape::active(), a);
    return Recorder::finish(out_shape, std::move(out), op, {ia},
                            [ia, sp, scale](Tape& t, int self) {
                                const auto& gy = t.grad_buffer(self);
                                auto& ga = t.grad_buffer(ia);
                                for (std::int64_t o = 0; o < sp.outer; ++o) {
                                    for (std::int64_t i = 0; i < sp.n; ++i) {
                                        double* dst =
                                            ga.data() + (o * sp.n + i) * sp.inner;
                                        const double* src =
                                            gy.data() + o * sp.inner;
                                        for (std::int64_t r = 0; r < sp.inner; ++r) {
                                            dst[r] += src[r] * scale;
                                        }
                                    }
                                }
                            });
}

}  // namespace

Tensor sum_axis(const Tensor& a, int axis) {
    return reduce_axis(a, axis, false, "sum_axis");
}

Tensor mean_axis(const Tensor& a, int axis) {
    return reduce_axis(a, axis, true, "mean_axis");
}

namespace {

Tensor reduce_all(const Tensor& a, bool mean, const char* op) {
    const double scale = mean ? 1.0 / static_cast<double>(a.numel()) : 1.0;
    double s = 0.0;
    for (double v : a.data()) {
        s += v;
    }
    s *= scale;
    if (!std::isfinite(s)) {
        throw NumericalError(std::string(op) + ": non-finite value produced");
    }
    const int ia = Recorder::resolve(Tape::active(), a);
    return Recorder::finish(Shape::scalar(), {s}, op, {ia},
                            [ia, scale](Tape& t, int self) {
                                const double g = t.grad_buffer(self)[0] * scale;
                                auto& ga = t.grad_buffer(ia);
                                for (double& v : ga) {
                                    v += g;
                                }
                            });
}

}  // namespace

Tensor sum_all(const Tensor& a) { return reduce_all(a, false, "sum_all"); }
Tensor mean_all(const Tensor& a) { return reduce_all(a, true, "mean_all"); }

// --- layout ops -------------------------------------------------------------

Tensor concat(const Tensor& a, const Tensor& b, int axis) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.rank() != sb.rank()) {
        throw ShapeError("concat: rank mismatch " + sa.str() + " vs " + sb.str());
    }
    for (int i = 0; i < sa.rank(); ++i) {
        if (i != axis && sa.dim(i) != sb.dim(i)) {
            throw ShapeError("concat: extent mismatch " + sa.str() + " vs " +
                             sb.str());
        }
    }
    const AxisSplit spa = split_axis(sa, axis);
    const AxisSplit spb = split_axis(sb, axis);
    std::vector<int> dims;
    for (int i = 0; i < sa.rank(); ++i) {
        dims.push_back(i == axis ? sa.dim(i) + sb.dim(i) : sa.dim(i));
    }
    Shape out_shape = dims.size() == 1
                          ? Shape{dims[0]}
                          : (dims.size() == 2 ? Shape{dims[0], dims[1]}
                                              : Shape{dims[0], dims[1], dims[2]});
    std::vector<double> out(static_cast<std::size_t>(out_shape.numel()));
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    const std::int64_t block_a = spa.n * spa.inner;
    const std::int64_t block_b = spb.n * spb.inner;
    for (std::int64_t o = 0; o < spa.outer; ++o) {
        double* dst = out.data() + o * (block_a + block_b);
        std::memcpy(dst, pa + o * block_a, sizeof(double) * block_a);
        std::memcpy(dst + block_a, pb + o * block_b, sizeof(double) * block_b);
    }
    Tape* tape = Tape::active();
    const int ia = Recorder::resolve(tape, a);
    const int ib = Recorder::resolve(tape, b);
    return Recorder::finish(
        out_shape, std::move(out), "concat", {ia, ib},
        [=](Tape& t, int self) {
            const auto& gy = t.grad_buffer(self);
            double* ga = ia >= 0 ? t.grad_buffer(ia).data() : nullptr;
            double* gb = ib >= 0 ? t.grad_buffer(ib).data() : nullptr;
            for (std::int64_t o = 0; o < spa.outer; ++o) {
                const double* src = gy.data() + o * (block_a + block_b);
                if (ga != nullptr) {
                    double* dst = ga + o * block_a;
                    for (std::int64_t i = 0; i < block_a; ++i) {
                        dst[i] += src[i];
                    }
                }
                if (gb != nullptr) {
                    double* dst = gb + o * block_b;
                    for (std::int64_t i = 0; i < block_b; ++i) {
                        dst[i] += src[block_a + i];
                    }
                }
            }
        });
}

Tensor slice_last(const Tensor& a, int start, int len) {
    const Shape& s = a.shape();
    if (s.rank() < 1) {
        throw ShapeError("slice_last: scalar input");
    }
    const int d = s.dim(s.rank() - 1);
    if (start < 0 || len <= 0 || start + len > d) {
        throw ShapeError("slice_last: range [" + std::to_string(start) + ", " +
                         std::to_string(start + len) + ") out of extent " +
                         std::to_string(d));
    }
    std::vector<int> dims;
    for (int i = 0; i < s.rank() - 1; ++i) {
        dims.push_back(s.dim(i));
    }
    dims.push_back(len);
    Shape out_shape = dims.size() == 1
                          ? Shape{dims[0]}
                          : (dims.size() == 2 ? Shape{dims[0], dims[1]}
                                              : Shape{dims[0], dims[1], dims[2]});
    const std::int64_t rows = s.numel() / d;
    std::vector<double> out(static_cast<std::size_t>(rows) * len);
    const double* pa = a.data().data();
    for (std::int64_t r = 0; r < rows; ++r) {
        std::memcpy(out.data() + r * len, pa + r * d + start,
                    sizeof(double) * len);
    }
    const int ia = Recorder::resolve(Tape::active(), a);
    return Recorder::finish(out_shape, std::move(out), "slice_last", {ia},
                            [=](Tape& t, int self) {
                                const auto& gy = t.grad_buffer(self);
                                auto& ga = t.grad_buffer(ia);
                                for (std::int64_t r = 0; r < rows; ++r) {
                                    double* dst = ga.data() + r * d + start;
                                    const double* src = gy.data() + r * len;
                                    for (int i = 0; i < len; ++i) {
                                        dst[i] += src[i];
                                    }
                                }
                            });
}

Tensor slice_rows(const Tensor& a, int start, int len) {
    const Shape& s = a.shape();
    if (s.rank() < 1) {
        throw ShapeError("slice_rows: scalar input");
    }
    const int n = s.dim(0);
    if (start < 0 || len <= 0 || start + len > n) {
        throw ShapeError("slice_rows: range [" + std::to_string(start) + ", " +
                         std::to_string(start + len) + ") out of extent " +
                         std::to_string(n));
    }
    const std::int64_t inner = s.numel() / n;
    std::vector<int> dims{len};
    for (int i = 1; i < s.rank(); ++i) {
        dims.push_back(s.dim(i));
    }
    Shape out_shape = dims.size() == 1
                          ? Shape{dims[0]}
                          : (dims.size() == 2 ? Shape{dims[0], dims[1]}
                                              : Shape{dims[0], dims[1], dims[2]});
    std::vector<double> out(static_cast<std::size_t>(len) * inner);
    std::memcpy(out.data(), a.data().data() + start * inner,
                sizeof(double) * out.size());
    const int ia = Recorder::resolve(Tape::active(), a);
    return Recorder::finish(out_shape, std::move(out), "slice_rows", {ia},
                            [=](Tape& t, int self) {
                                const auto& gy = t.grad_buffer(self);
                                auto& ga = t.grad_buffer(ia);
                                double* dst = ga.data() + start * inner;
                                for (std::size_t i = 0; i < gy.size(); ++i) {
                                    dst[i] += gy[i];
                                }
                            });
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape.numel() != a.numel()) {
        throw ShapeError("reshape: " + a.shape().str() + " -> " + shape.str() +
                         " changes element count");
    }
    // The copy keeps recorded buffers immutable and distinct.
    std::vector<double> out(a.data().begin(), a.data().end());
    const int ia = Recorder::resolve(Tape::active(), a);
    return Recorder::finish(shape, std::move(out), "reshape", {ia},
                            [ia](Tape& t, int self) {
                                const auto& gy = t.grad_buffer(self);
                                auto& ga = t.grad_buffer(ia);
                                for (std::size_t i = 0; i < gy.size(); ++i) {
                                    ga[i] += gy[i];
                                }
                            });
}

Tensor causal_mask(int steps) {
    if (steps < 1) {
        throw ShapeError("causal_mask: steps must be >= 1");
    }
    Tensor m(Shape{steps, steps}, 0.0);
    auto data = m.mutable_data();
    for (int i = 0; i < steps; ++i) {
        for (int j = i + 1; j < steps; ++j) {
            data[static_cast<std::size_t>(i) * steps + j] = -1e9;
        }
    }
    return m;
}

}  // namespace num
}  // namespace prefmoe
