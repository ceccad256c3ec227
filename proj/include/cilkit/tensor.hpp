/*
 * Copyright 2026 The cilkit Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Dense row-major tensors with define-by-run reverse-mode differentiation.
//
// A Tensor is a shared handle: copies alias the same storage. Differentiable
// operations are recorded on the thread's active Tape (if any) whenever at
// least one operand requires a gradient. Without an active tape every op is a
// plain value computation, which is what evaluation code relies on.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace cilkit {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    bool produced_by_op = false;
    std::uint64_t id = 0;
};

}  // namespace detail

class Tensor {
public:
    /// Empty tensor of shape [0]; only useful as a placeholder.
    Tensor();
    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor filled(Shape shape, double value, bool requires_grad = false);
    static Tensor scalar(double value);
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data,
                         bool requires_grad = false);
    static Tensor vector(std::vector<double> data, bool requires_grad = false);

    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t numel() const { return impl_->data.size(); }
    /// Rows of a rank-2 tensor; 1 for rank-1.
    std::size_t rows() const;
    /// Trailing extent.
    std::size_t cols() const;

    std::span<const double> data() const { return impl_->data; }
    /// Direct mutable access; intended for initializers and optimizers, never
    /// for tensors that are part of a live tape.
    std::span<double> mutable_data() { return impl_->data; }
    const std::vector<double>& values() const { return impl_->data; }

    double item() const;
    double operator[](std::size_t i) const { return impl_->data[i]; }
    double at(std::size_t r, std::size_t c) const { return impl_->data[r * cols() + c]; }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool flag) { impl_->requires_grad = flag; }
    bool is_leaf() const { return !impl_->produced_by_op; }
    std::uint64_t id() const { return impl_->id; }

    /// Deep copy with fresh identity; keeps the requires_grad flag.
    Tensor clone() const;
    /// Deep copy that is a non-differentiable leaf.
    Tensor detach() const;
    /// True when both handles alias the same storage.
    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

    const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }
    explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

private:
    std::shared_ptr<detail::TensorImpl> impl_;
};

/// Accumulates `grad_out` into the per-input buffers. Buffers of inputs that
/// do not require a gradient are null.
using BackwardFn = std::function<void(std::span<const double> grad_out,
                                      std::span<std::vector<double>* const> grad_in)>;

struct TapeNode {
    std::vector<std::shared_ptr<detail::TensorImpl>> inputs;
    std::shared_ptr<detail::TensorImpl> output;
    BackwardFn backward;
};

/// Records differentiable operations executed on this thread while alive.
/// Tapes nest: constructing one shadows the previous active tape until it is
/// destroyed. Nodes are stored in execution order, which is a topological
/// order of the computation graph.
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    std::size_t size() const { return nodes_.size(); }
    const std::vector<TapeNode>& nodes() const { return nodes_; }
    void record(TapeNode node) { nodes_.push_back(std::move(node)); }

    static Tape* active();

private:
    std::vector<TapeNode> nodes_;
    Tape* previous_;
};

/// Suspends recording in the current scope.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    Tape* saved_;
};

/// Gradients of leaf tensors, keyed by tensor identity.
class Gradients {
public:
    /// Gradient of `leaf`, or zeros of its shape when the leaf was not reached.
    Tensor of(const Tensor& leaf) const;
    bool contains(const Tensor& leaf) const { return grads_.count(leaf.id()) != 0; }
    std::size_t size() const { return grads_.size(); }

    void set(std::uint64_t id, std::vector<double> grad) { grads_[id] = std::move(grad); }

private:
    std::unordered_map<std::uint64_t, std::vector<double>> grads_;
};

/// Replays `tape` in reverse from the scalar `loss`. Each node is visited at
/// most once. Leaves with requires_grad=false never receive a gradient.
Gradients backward(const Tape& tape, const Tensor& loss);

namespace detail {

/// Builds the result of an op and, when recording applies, appends a node.
Tensor make_result(Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                   BackwardFn backward);

}  // namespace detail

}  // namespace cilkit
