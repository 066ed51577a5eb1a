/*
 * facedirs - Face reenactment by learned latent directions.
 *
 * File: include/facedirs/autograd.hpp
 *
 * Copyright 2026 The facedirs authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 * http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#pragma once

#ifndef FACEDIRS_AUTOGRAD_HPP
#define FACEDIRS_AUTOGRAD_HPP

#include "Eigen/Core"

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace facedirs {

/**
 * A minimal reverse-mode automatic differentiation layer.
 *
 * Values are flat double arrays with a shape attached (row-major for 2D,
 * C×H×W for feature maps). Every operation records a closure that maps the
 * output gradient onto its inputs. Binary element-wise ops broadcast a
 * size-1 operand; anything else must match exactly.
 *
 * Graphs are built per evaluation and freed when the last Var referencing
 * them goes out of scope. Leaf parameters keep their accumulated gradient
 * until zero_grad() is called.
 */
namespace ag {

using Shape = std::vector<int>;
using Array = Eigen::ArrayXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Eigen::Index numel(const Shape& shape)
{
    return std::accumulate(shape.begin(), shape.end(), Eigen::Index{1},
                           [](Eigen::Index a, int b) { return a * b; });
}

inline std::string shape_str(const Shape& s)
{
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i)
    {
        out += (i ? "," : "") + std::to_string(s[i]);
    }
    return out + "]";
}

struct Node
{
    Array value;
    Array grad;
    Shape shape;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    void accumulate(const Array& g)
    {
        if (grad.size() == 0)
        {
            grad = g;
        } else
        {
            grad += g;
        }
    }
    Array& grad_buffer()
    {
        if (grad.size() == 0)
        {
            grad = Array::Zero(value.size());
        }
        return grad;
    }
};

namespace detail {
inline bool& grad_mode()
{
    thread_local bool enabled = true;
    return enabled;
}
} // namespace detail

/// Disables graph recording on the current thread while alive.
class NoGradGuard
{
public:
    NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

class Var
{
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    static Var constant(Array value, Shape shape)
    {
        if (value.size() != numel(shape))
        {
            throw std::invalid_argument("Var::constant: value size " + std::to_string(value.size()) +
                                        " does not match shape " + shape_str(shape));
        }
        auto n = std::make_shared<Node>();
        n->value = std::move(value);
        n->shape = std::move(shape);
        return Var(std::move(n));
    }
    static Var constant(Array value)
    {
        const int n = static_cast<int>(value.size());
        return constant(std::move(value), Shape{n});
    }
    static Var scalar(double v) { return constant(Array::Constant(1, v), Shape{1}); }

    /// A leaf that accumulates gradients.
    static Var parameter(Array value, Shape shape)
    {
        Var v = constant(std::move(value), std::move(shape));
        v.node_->requires_grad = true;
        return v;
    }

    bool defined() const { return static_cast<bool>(node_); }
    const Array& value() const { return node_->value; }
    Array& mutable_value() { return node_->value; }
    const Shape& shape() const { return node_->shape; }
    Eigen::Index size() const { return node_->value.size(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    void set_requires_grad(bool r) { node_->requires_grad = r; }
    double item() const
    {
        if (size() != 1)
        {
            throw std::logic_error("Var::item on tensor of shape " + shape_str(shape()));
        }
        return node_->value(0);
    }
    /// Gradient accumulated by the last backward pass (zeros if none reached this node).
    Array grad() const
    {
        if (node_->grad.size() == 0)
        {
            return Array::Zero(size());
        }
        return node_->grad;
    }
    void zero_grad() { node_->grad.resize(0); }
    const std::shared_ptr<Node>& node() const { return node_; }

    /// Back-propagates from this scalar through the recorded graph.
    void backward() const;

private:
    std::shared_ptr<Node> node_;
};

inline void Var::backward() const
{
    if (size() != 1)
    {
        throw std::logic_error("backward() requires a scalar, got shape " + shape_str(shape()));
    }
    if (!node_->requires_grad)
    {
        return;
    }
    // Iterative post-order DFS gives a topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    visited.insert(node_.get());
    while (!stack.empty())
    {
        auto& [n, child] = stack.back();
        if (child < n->parents.size())
        {
            Node* p = n->parents[child++].get();
            if (p->requires_grad && !visited.count(p))
            {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else
        {
            order.push_back(n);
            stack.pop_back();
        }
    }
    node_->accumulate(Array::Ones(1));
    for (auto it = order.rbegin(); it != order.rend(); ++it)
    {
        Node* n = *it;
        if (n->backward && n->grad.size() != 0)
        {
            n->backward(*n);
        }
    }
    // Intermediate gradients are not needed after the sweep; leaves keep theirs.
    for (Node* n : order)
    {
        if (!n->parents.empty())
        {
            n->grad.resize(0);
        }
    }
}

/**
 * Builds a graph node. If no input needs a gradient (or recording is off) the
 * result is a plain constant and the closure is dropped.
 */
inline Var make_op(Array value, Shape shape, const std::vector<Var>& inputs, std::function<void(Node&)> backward)
{
    bool needs = false;
    if (grad_enabled())
    {
        for (const auto& in : inputs)
        {
            needs = needs || in.requires_grad();
        }
    }
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->shape = std::move(shape);
    if (needs)
    {
        n->requires_grad = true;
        for (const auto& in : inputs)
        {
            n->parents.push_back(in.node());
        }
        n->backward = std::move(backward);
    }
    return Var(std::move(n));
}

namespace detail {

inline void check_broadcast(const Var& a, const Var& b, const char* op)
{
    if (a.size() != b.size() && a.size() != 1 && b.size() != 1)
    {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    }
}

inline Array expand(const Array& v, Eigen::Index n)
{
    return v.size() == n ? v : Array::Constant(n, v(0));
}

// Reduces a gradient of the broadcast result back to an operand's size.
inline Array reduce_to(const Array& g, Eigen::Index n)
{
    return g.size() == n ? g : Array::Constant(1, g.sum());
}

template <class Forward, class GradA, class GradB>
Var binary(const Var& a, const Var& b, const char* name, Forward f, GradA ga, GradB gb)
{
    check_broadcast(a, b, name);
    const Eigen::Index n = std::max(a.size(), b.size());
    const Shape shape = a.size() >= b.size() ? a.shape() : b.shape();
    Array av = expand(a.value(), n);
    Array bv = expand(b.value(), n);
    Array out = f(av, bv);
    auto an = a.node();
    auto bn = b.node();
    return make_op(out, shape, {a, b}, [an, bn, av, bv, out, ga, gb](Node& self) {
        if (an->requires_grad)
        {
            an->accumulate(reduce_to(ga(self.grad, av, bv, out), an->value.size()));
        }
        if (bn->requires_grad)
        {
            bn->accumulate(reduce_to(gb(self.grad, av, bv, out), bn->value.size()));
        }
    });
}

template <class Forward, class Deriv>
Var unary(const Var& a, Forward f, Deriv d)
{
    const Array& x = a.value();
    Array out = f(x);
    auto an = a.node();
    return make_op(out, a.shape(), {a}, [an, out, d](Node& self) {
        an->accumulate(self.grad * d(an->value, out));
    });
}

} // namespace detail

inline Var add(const Var& a, const Var& b)
{
    return detail::binary(
        a, b, "add", [](const Array& x, const Array& y) { return Array(x + y); },
        [](const Array& g, const Array&, const Array&, const Array&) { return g; },
        [](const Array& g, const Array&, const Array&, const Array&) { return g; });
}

inline Var sub(const Var& a, const Var& b)
{
    return detail::binary(
        a, b, "sub", [](const Array& x, const Array& y) { return Array(x - y); },
        [](const Array& g, const Array&, const Array&, const Array&) { return g; },
        [](const Array& g, const Array&, const Array&, const Array&) { return Array(-g); });
}

inline Var mul(const Var& a, const Var& b)
{
    return detail::binary(
        a, b, "mul", [](const Array& x, const Array& y) { return Array(x * y); },
        [](const Array& g, const Array&, const Array& y, const Array&) { return Array(g * y); },
        [](const Array& g, const Array& x, const Array&, const Array&) { return Array(g * x); });
}

inline Var div(const Var& a, const Var& b)
{
    return detail::binary(
        a, b, "div", [](const Array& x, const Array& y) { return Array(x / y); },
        [](const Array& g, const Array&, const Array& y, const Array&) { return Array(g / y); },
        [](const Array& g, const Array&, const Array& y, const Array& out) { return Array(-g * out / y); });
}

/// Element-wise atan2(y, x).
inline Var atan2(const Var& y, const Var& x)
{
    return detail::binary(
        y, x, "atan2", [](const Array& a, const Array& b) { return Array(a.binaryExpr(b, [](double u, double v) {
                           return std::atan2(u, v);
                       })); },
        [](const Array& g, const Array& a, const Array& b, const Array&) {
            return Array(g * b / (a.square() + b.square()));
        },
        [](const Array& g, const Array& a, const Array& b, const Array&) {
            return Array(-g * a / (a.square() + b.square()));
        });
}

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator+(const Var& a, double b) { return add(a, Var::scalar(b)); }
inline Var operator-(const Var& a, double b) { return sub(a, Var::scalar(b)); }
inline Var operator*(const Var& a, double b) { return mul(a, Var::scalar(b)); }
inline Var operator/(const Var& a, double b) { return mul(a, Var::scalar(1.0 / b)); }
inline Var operator+(double a, const Var& b) { return add(Var::scalar(a), b); }
inline Var operator-(double a, const Var& b) { return sub(Var::scalar(a), b); }
inline Var operator*(double a, const Var& b) { return mul(Var::scalar(a), b); }
inline Var operator-(const Var& a)
{
    return detail::unary(
        a, [](const Array& x) { return Array(-x); },
        [](const Array& x, const Array&) { return Array::Constant(x.size(), -1.0); });
}

inline Var exp(const Var& a)
{
    return detail::unary(
        a, [](const Array& x) { return Array(x.exp()); }, [](const Array&, const Array& out) { return out; });
}

inline Var log(const Var& a)
{
    return detail::unary(
        a, [](const Array& x) { return Array(x.log()); },
        [](const Array& x, const Array&) { return Array(x.inverse()); });
}

inline Var tanh(const Var& a)
{
    return detail::unary(
        a, [](const Array& x) { return Array(x.tanh()); },
        [](const Array&, const Array& out) { return Array(1.0 - out.square()); });
}

inline Var atanh(const Var& a)
{
    return detail::unary(
        a, [](const Array& x) { return Array(0.5 * ((1.0 + x) / (1.0 - x)).log()); },
        [](const Array& x, const Array&) { return Array((1.0 - x.square()).inverse()); });
}

inline Var sqrt(const Var& a)
{
    return detail::unary(
        a, [](const Array& x) { return Array(x.sqrt()); },
        [](const Array&, const Array& out) { return Array(0.5 / out); });
}

inline Var square(const Var& a)
{
    return detail::unary(
        a, [](const Array& x) { return Array(x.square()); },
        [](const Array& x, const Array&) { return Array(2.0 * x); });
}

inline Var abs(const Var& a)
{
    return detail::unary(
        a, [](const Array& x) { return Array(x.abs()); },
        [](const Array& x, const Array&) {
            return Array(x.unaryExpr([](double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); }));
        });
}

inline Var relu(const Var& a)
{
    return detail::unary(
        a, [](const Array& x) { return Array(x.max(0.0)); },
        [](const Array& x, const Array&) { return Array((x > 0.0).cast<double>()); });
}

/// Clamps into [lo, hi]; the gradient is zero where the clamp is active.
inline Var clamp(const Var& a, double lo, double hi)
{
    return detail::unary(
        a, [lo, hi](const Array& x) { return Array(x.max(lo).min(hi)); },
        [lo, hi](const Array& x, const Array&) { return Array(((x >= lo) && (x <= hi)).cast<double>()); });
}

inline Var sum(const Var& a)
{
    auto an = a.node();
    const Eigen::Index n = a.size();
    return make_op(Array::Constant(1, a.value().sum()), Shape{1}, {a},
                   [an, n](Node& self) { an->accumulate(Array::Constant(n, self.grad(0))); });
}

inline Var mean(const Var& a) { return sum(a) / static_cast<double>(a.size()); }

inline Var dot(const Var& a, const Var& b) { return sum(mul(a, b)); }

inline Var l2_norm(const Var& a) { return sqrt(sum(square(a)) + 1e-24); }

inline Var l2_normalize(const Var& a) { return a / l2_norm(a); }

inline Var reshape(const Var& a, Shape shape)
{
    if (numel(shape) != a.size())
    {
        throw std::invalid_argument("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
    }
    auto an = a.node();
    return make_op(a.value(), std::move(shape), {a}, [an](Node& self) { an->accumulate(self.grad); });
}

/// Contiguous flat range [offset, offset+count).
inline Var slice(const Var& a, Eigen::Index offset, Eigen::Index count, Shape shape = {})
{
    if (offset < 0 || count < 0 || offset + count > a.size())
    {
        throw std::out_of_range("slice: range [" + std::to_string(offset) + ", " + std::to_string(offset + count) +
                                ") outside tensor of size " + std::to_string(a.size()));
    }
    if (shape.empty())
    {
        shape = Shape{static_cast<int>(count)};
    }
    auto an = a.node();
    return make_op(a.value().segment(offset, count), std::move(shape), {a}, [an, offset, count](Node& self) {
        an->grad_buffer().segment(offset, count) += self.grad;
    });
}

/// Selects flat elements by index (repeats allowed).
inline Var gather(const Var& a, std::vector<Eigen::Index> indices)
{
    Array out(static_cast<Eigen::Index>(indices.size()));
    for (std::size_t i = 0; i < indices.size(); ++i)
    {
        if (indices[i] < 0 || indices[i] >= a.size())
        {
            throw std::out_of_range("gather: index " + std::to_string(indices[i]) + " outside tensor of size " +
                                    std::to_string(a.size()));
        }
        out(static_cast<Eigen::Index>(i)) = a.value()(indices[i]);
    }
    auto an = a.node();
    const int n = static_cast<int>(indices.size());
    return make_op(out, Shape{n}, {a}, [an, idx = std::move(indices)](Node& self) {
        Array& g = an->grad_buffer();
        for (std::size_t i = 0; i < idx.size(); ++i)
        {
            g(idx[i]) += self.grad(static_cast<Eigen::Index>(i));
        }
    });
}

/// Flat concatenation.
inline Var concat(const std::vector<Var>& parts)
{
    Eigen::Index total = 0;
    for (const auto& p : parts)
    {
        total += p.size();
    }
    Array out(total);
    std::vector<std::shared_ptr<Node>> nodes;
    Eigen::Index off = 0;
    for (const auto& p : parts)
    {
        out.segment(off, p.size()) = p.value();
        off += p.size();
        nodes.push_back(p.node());
    }
    return make_op(out, Shape{static_cast<int>(total)}, parts, [nodes](Node& self) {
        Eigen::Index o = 0;
        for (const auto& n : nodes)
        {
            const Eigen::Index s = n->value.size();
            if (n->requires_grad)
            {
                n->accumulate(self.grad.segment(o, s));
            }
            o += s;
        }
    });
}

/// Adds `x` into a copy of `base` starting at flat offset.
inline Var add_at(const Var& base, const Var& x, Eigen::Index offset)
{
    if (offset < 0 || offset + x.size() > base.size())
    {
        throw std::out_of_range("add_at: segment does not fit");
    }
    Array out = base.value();
    out.segment(offset, x.size()) += x.value();
    auto bn = base.node();
    auto xn = x.node();
    const Eigen::Index n = x.size();
    return make_op(out, base.shape(), {base, x}, [bn, xn, offset, n](Node& self) {
        if (bn->requires_grad)
        {
            bn->accumulate(self.grad);
        }
        if (xn->requires_grad)
        {
            xn->accumulate(self.grad.segment(offset, n));
        }
    });
}

/// Row sums of a 2D tensor [r, c] -> [r].
inline Var row_sum(const Var& a)
{
    if (a.shape().size() != 2)
    {
        throw std::invalid_argument("row_sum expects a 2D tensor, got " + shape_str(a.shape()));
    }
    const int r = a.shape()[0];
    const int c = a.shape()[1];
    Eigen::Map<const RowMatrix> m(a.value().data(), r, c);
    Array out = m.rowwise().sum().array();
    auto an = a.node();
    return make_op(out, Shape{r}, {a}, [an, r, c](Node& self) {
        Array g(static_cast<Eigen::Index>(r) * c);
        for (int i = 0; i < r; ++i)
        {
            g.segment(static_cast<Eigen::Index>(i) * c, c).setConstant(self.grad(i));
        }
        an->accumulate(g);
    });
}

/// Matrix product of 2D tensors [m,k] x [k,n] -> [m,n]. 1D right operands are treated as [k,1].
inline Var matmul(const Var& a, const Var& b)
{
    if (a.shape().size() != 2)
    {
        throw std::invalid_argument("matmul: left operand must be 2D, got " + shape_str(a.shape()));
    }
    const int m = a.shape()[0];
    const int k = a.shape()[1];
    const int n = b.shape().size() == 2 ? b.shape()[1] : 1;
    const int kb = b.shape().size() == 2 ? b.shape()[0] : static_cast<int>(b.size());
    if (k != kb)
    {
        throw std::invalid_argument("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " +
                                    shape_str(b.shape()));
    }
    Eigen::Map<const RowMatrix> am(a.value().data(), m, k);
    Eigen::Map<const RowMatrix> bm(b.value().data(), k, n);
    RowMatrix cm = am * bm;
    Array out = Eigen::Map<const Array>(cm.data(), cm.size());
    Shape shape = b.shape().size() == 2 ? Shape{m, n} : Shape{m};
    auto an = a.node();
    auto bn = b.node();
    return make_op(out, shape, {a, b}, [an, bn, m, k, n](Node& self) {
        Eigen::Map<const RowMatrix> g(self.grad.data(), m, n);
        if (an->requires_grad)
        {
            Eigen::Map<const RowMatrix> bmat(bn->value.data(), k, n);
            RowMatrix ga = g * bmat.transpose();
            an->accumulate(Eigen::Map<const Array>(ga.data(), ga.size()));
        }
        if (bn->requires_grad)
        {
            Eigen::Map<const RowMatrix> amat(an->value.data(), m, k);
            RowMatrix gb = amat.transpose() * g;
            bn->accumulate(Eigen::Map<const Array>(gb.data(), gb.size()));
        }
    });
}

/// y = K x for a constant matrix K shared with the graph.
inline Var linear_map(std::shared_ptr<const Eigen::MatrixXd> K, const Var& x)
{
    if (K->cols() != x.size())
    {
        throw std::invalid_argument("linear_map: matrix has " + std::to_string(K->cols()) + " columns, input has " +
                                    std::to_string(x.size()) + " elements");
    }
    Array out = (*K * x.value().matrix()).array();
    auto xn = x.node();
    const int rows = static_cast<int>(K->rows());
    return make_op(out, Shape{rows}, {x}, [xn, K = std::move(K)](Node& self) {
        xn->accumulate((K->transpose() * self.grad.matrix()).array());
    });
}

/// y = K x; copies K, so prefer the shared overload for large matrices.
inline Var linear_map(const Eigen::MatrixXd& K, const Var& x)
{
    return linear_map(std::make_shared<const Eigen::MatrixXd>(K), x);
}

/// Writes `values` into a zero tensor of the given shape at flat indices.
inline Var scatter(const Var& values, std::shared_ptr<const std::vector<Eigen::Index>> indices, Shape shape)
{
    if (static_cast<Eigen::Index>(indices->size()) != values.size())
    {
        throw std::invalid_argument("scatter: " + std::to_string(indices->size()) + " indices for " +
                                    std::to_string(values.size()) + " values");
    }
    Array out = Array::Zero(numel(shape));
    for (std::size_t i = 0; i < indices->size(); ++i)
    {
        out((*indices)[i]) += values.value()(static_cast<Eigen::Index>(i));
    }
    auto vn = values.node();
    return make_op(out, std::move(shape), {values}, [vn, indices](Node& self) {
        Array g(static_cast<Eigen::Index>(indices->size()));
        for (std::size_t i = 0; i < indices->size(); ++i)
        {
            g(static_cast<Eigen::Index>(i)) = self.grad((*indices)[i]);
        }
        vn->accumulate(g);
    });
}

struct Conv2dSpec
{
    int stride = 1;
    int pad = 0;
};

namespace detail {

inline void im2col(const double* x, int c, int h, int w, int kh, int kw, int stride, int pad, int ho, int wo,
                   double* cols)
{
    const int plane = ho * wo;
    for (int ci = 0; ci < c; ++ci)
    {
        for (int ky = 0; ky < kh; ++ky)
        {
            for (int kx = 0; kx < kw; ++kx)
            {
                double* row = cols + ((ci * kh + ky) * kw + kx) * static_cast<std::ptrdiff_t>(plane);
                for (int oy = 0; oy < ho; ++oy)
                {
                    const int iy = oy * stride - pad + ky;
                    for (int ox = 0; ox < wo; ++ox)
                    {
                        const int ix = ox * stride - pad + kx;
                        row[oy * wo + ox] = (iy >= 0 && iy < h && ix >= 0 && ix < w)
                                                ? x[(static_cast<std::ptrdiff_t>(ci) * h + iy) * w + ix]
                                                : 0.0;
                    }
                }
            }
        }
    }
}

inline void col2im(const double* cols, int c, int h, int w, int kh, int kw, int stride, int pad, int ho, int wo,
                   double* x)
{
    const int plane = ho * wo;
    for (int ci = 0; ci < c; ++ci)
    {
        for (int ky = 0; ky < kh; ++ky)
        {
            for (int kx = 0; kx < kw; ++kx)
            {
                const double* row = cols + ((ci * kh + ky) * kw + kx) * static_cast<std::ptrdiff_t>(plane);
                for (int oy = 0; oy < ho; ++oy)
                {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h)
                    {
                        continue;
                    }
                    for (int ox = 0; ox < wo; ++ox)
                    {
                        const int ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < w)
                        {
                            x[(static_cast<std::ptrdiff_t>(ci) * h + iy) * w + ix] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

} // namespace detail

/**
 * 2D convolution of a single C×H×W tensor with weights [O,C,kh,kw] and bias [O].
 */
inline Var conv2d(const Var& x, const Var& weight, const Var& bias, Conv2dSpec spec = {})
{
    if (x.shape().size() != 3 || weight.shape().size() != 4)
    {
        throw std::invalid_argument("conv2d: expected x [C,H,W] and weight [O,C,kh,kw], got " +
                                    shape_str(x.shape()) + " and " + shape_str(weight.shape()));
    }
    const int c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
    const int o = weight.shape()[0], kh = weight.shape()[2], kw = weight.shape()[3];
    if (weight.shape()[1] != c || bias.size() != o)
    {
        throw std::invalid_argument("conv2d: channel mismatch between input " + shape_str(x.shape()) +
                                    " and weight " + shape_str(weight.shape()));
    }
    const int ho = (h + 2 * spec.pad - kh) / spec.stride + 1;
    const int wo = (w + 2 * spec.pad - kw) / spec.stride + 1;
    const int ckk = c * kh * kw;
    auto cols = std::make_shared<RowMatrix>(ckk, ho * wo);
    detail::im2col(x.value().data(), c, h, w, kh, kw, spec.stride, spec.pad, ho, wo, cols->data());
    Eigen::Map<const RowMatrix> wm(weight.value().data(), o, ckk);
    RowMatrix out = wm * (*cols);
    out.colwise() += bias.value().matrix();
    Array outv = Eigen::Map<const Array>(out.data(), out.size());
    auto xn = x.node(), wn = weight.node(), bn = bias.node();
    return make_op(outv, Shape{o, ho, wo}, {x, weight, bias},
                   [xn, wn, bn, cols, c, h, w, o, kh, kw, ho, wo, ckk, spec](Node& self) {
                       Eigen::Map<const RowMatrix> g(self.grad.data(), o, ho * wo);
                       if (wn->requires_grad)
                       {
                           RowMatrix gw = g * cols->transpose();
                           wn->accumulate(Eigen::Map<const Array>(gw.data(), gw.size()));
                       }
                       if (bn->requires_grad)
                       {
                           bn->accumulate(g.rowwise().sum().array());
                       }
                       if (xn->requires_grad)
                       {
                           Eigen::Map<const RowMatrix> wmat(wn->value.data(), o, ckk);
                           RowMatrix gcols = wmat.transpose() * g;
                           Array gx = Array::Zero(static_cast<Eigen::Index>(c) * h * w);
                           detail::col2im(gcols.data(), c, h, w, kh, kw, spec.stride, spec.pad, ho, wo, gx.data());
                           xn->accumulate(gx);
                       }
                   });
}

/// Non-overlapping k×k average pooling on C×H×W (H, W divisible by k).
inline Var avg_pool2d(const Var& x, int k)
{
    if (x.shape().size() != 3 || x.shape()[1] % k != 0 || x.shape()[2] % k != 0)
    {
        throw std::invalid_argument("avg_pool2d: shape " + shape_str(x.shape()) + " not divisible by " +
                                    std::to_string(k));
    }
    const int c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
    const int ho = h / k, wo = w / k;
    Array out = Array::Zero(static_cast<Eigen::Index>(c) * ho * wo);
    const double inv = 1.0 / (k * k);
    const Array& v = x.value();
    for (int ci = 0; ci < c; ++ci)
    {
        for (int y = 0; y < h; ++y)
        {
            for (int xx = 0; xx < w; ++xx)
            {
                out((static_cast<Eigen::Index>(ci) * ho + y / k) * wo + xx / k) +=
                    v((static_cast<Eigen::Index>(ci) * h + y) * w + xx) * inv;
            }
        }
    }
    auto xn = x.node();
    return make_op(out, Shape{c, ho, wo}, {x}, [xn, c, h, w, ho, wo, k, inv](Node& self) {
        Array g(static_cast<Eigen::Index>(c) * h * w);
        for (int ci = 0; ci < c; ++ci)
        {
            for (int y = 0; y < h; ++y)
            {
                for (int xx = 0; xx < w; ++xx)
                {
                    g((static_cast<Eigen::Index>(ci) * h + y) * w + xx) =
                        self.grad((static_cast<Eigen::Index>(ci) * ho + y / k) * wo + xx / k) * inv;
                }
            }
        }
        xn->accumulate(g);
    });
}

/// Per-channel affine map on C×H×W: y[c] = scale[c] * x[c] + shift[c].
inline Var channel_affine(const Var& x, const Var& scale, const Var& shift)
{
    const int c = x.shape()[0];
    if (scale.size() != c || shift.size() != c)
    {
        throw std::invalid_argument("channel_affine: expected " + std::to_string(c) + " channel parameters");
    }
    const Eigen::Index plane = x.size() / c;
    Array out(x.size());
    for (int ci = 0; ci < c; ++ci)
    {
        out.segment(ci * plane, plane) = x.value().segment(ci * plane, plane) * scale.value()(ci) + shift.value()(ci);
    }
    auto xn = x.node(), sn = scale.node(), tn = shift.node();
    return make_op(out, x.shape(), {x, scale, shift}, [xn, sn, tn, c, plane](Node& self) {
        if (xn->requires_grad)
        {
            Array g(self.grad.size());
            for (int ci = 0; ci < c; ++ci)
            {
                g.segment(ci * plane, plane) = self.grad.segment(ci * plane, plane) * sn->value(ci);
            }
            xn->accumulate(g);
        }
        if (sn->requires_grad)
        {
            Array g(c);
            for (int ci = 0; ci < c; ++ci)
            {
                g(ci) = (self.grad.segment(ci * plane, plane) * xn->value.segment(ci * plane, plane)).sum();
            }
            sn->accumulate(g);
        }
        if (tn->requires_grad)
        {
            Array g(c);
            for (int ci = 0; ci < c; ++ci)
            {
                g(ci) = self.grad.segment(ci * plane, plane).sum();
            }
            tn->accumulate(g);
        }
    });
}

/// Channel-wise concatenation of C_i×H×W tensors.
inline Var concat_channels(const std::vector<Var>& parts)
{
    int c = 0;
    for (const auto& p : parts)
    {
        if (p.shape().size() != 3 || p.shape()[1] != parts[0].shape()[1] || p.shape()[2] != parts[0].shape()[2])
        {
            throw std::invalid_argument("concat_channels: incompatible shape " + shape_str(p.shape()));
        }
        c += p.shape()[0];
    }
    return reshape(concat(parts), Shape{c, parts[0].shape()[1], parts[0].shape()[2]});
}

/// Stable 64-bit FNV-1a digest of parameter values.
inline std::uint64_t digest(const std::vector<Var>& params)
{
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& p : params)
    {
        const auto* bytes = reinterpret_cast<const unsigned char*>(p.value().data());
        const std::size_t n = static_cast<std::size_t>(p.size()) * sizeof(double);
        for (std::size_t i = 0; i < n; ++i)
        {
            h ^= bytes[i];
            h *= 1099511628211ULL;
        }
    }
    return h;
}

inline double grad_norm(const std::vector<Var>& params)
{
    double s = 0.0;
    for (const auto& p : params)
    {
        if (p.node()->grad.size() != 0)
        {
            s += p.node()->grad.square().sum();
        }
    }
    return std::sqrt(s);
}

inline void zero_grad(const std::vector<Var>& params)
{
    for (auto p : params)
    {
        p.zero_grad();
    }
}

/// Adam with a constant learning rate.
class Adam
{
public:
    Adam() = default;
    Adam(std::vector<Var> params, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps)
    {
        for (const auto& p : params_)
        {
            m_.push_back(Array::Zero(p.size()));
            v_.push_back(Array::Zero(p.size()));
        }
    }

    void zero_grad() { ag::zero_grad(params_); }

    void step()
    {
        ++t_;
        const double c1 = 1.0 - std::pow(beta1_, t_);
        const double c2 = 1.0 - std::pow(beta2_, t_);
        for (std::size_t i = 0; i < params_.size(); ++i)
        {
            auto& node = *params_[i].node();
            if (node.grad.size() == 0)
            {
                continue;
            }
            m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * node.grad;
            v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * node.grad.square();
            node.value -= lr_ * (m_[i] / c1) / ((v_[i] / c2).sqrt() + eps_);
        }
    }

    double learning_rate() const { return lr_; }
    long steps_taken() const { return t_; }
    const std::vector<Array>& first_moments() const { return m_; }
    const std::vector<Array>& second_moments() const { return v_; }
    void restore(long t, std::vector<Array> m, std::vector<Array> v)
    {
        if (m.size() != params_.size() || v.size() != params_.size())
        {
            throw std::invalid_argument("Adam::restore: state does not match parameter list");
        }
        t_ = t;
        m_ = std::move(m);
        v_ = std::move(v);
    }

private:
    std::vector<Var> params_;
    double lr_ = 1e-4;
    double beta1_ = 0.9;
    double beta2_ = 0.999;
    double eps_ = 1e-8;
    long t_ = 0;
    std::vector<Array> m_;
    std::vector<Array> v_;
};

} // namespace ag
} // namespace facedirs

#endif /* FACEDIRS_AUTOGRAD_HPP */
