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

#include "cilkit/tensor.hpp"

#include <atomic>

#include "cilkit/error.hpp"

namespace cilkit {

namespace {

std::uint64_t next_id() {
    static std::atomic<std::uint64_t> counter{1};
    return counter.fetch_add(1, std::memory_order_relaxed);
}

thread_local Tape* g_active_tape = nullptr;

std::shared_ptr<detail::TensorImpl> new_impl(Shape shape, std::vector<double> data,
                                             bool requires_grad) {
    if (shape_numel(shape) != data.size()) {
        throw DimensionError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_string(shape));
    }
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    impl->id = next_id();
    return impl;
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    return n;
}

std::string shape_string(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

Tensor::Tensor() : impl_(new_impl({0}, {}, false)) {}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : impl_(new_impl(std::move(shape), std::move(data), requires_grad)) {}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::filled(Shape shape, double value, bool requires_grad) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> data,
                      bool requires_grad) {
    return Tensor({rows, cols}, std::move(data), requires_grad);
}

Tensor Tensor::vector(std::vector<double> data, bool requires_grad) {
    const std::size_t n = data.size();
    return Tensor({n}, std::move(data), requires_grad);
}

std::size_t Tensor::rows() const {
    if (rank() == 1) return 1;
    if (rank() != 2) throw DimensionError("rows() requires rank <= 2, got " + shape_string(shape()));
    return shape()[0];
}

std::size_t Tensor::cols() const { return shape().empty() ? 1 : shape().back(); }

double Tensor::item() const {
    if (numel() != 1) throw ContractError("item() on non-scalar tensor " + shape_string(shape()));
    return impl_->data[0];
}

Tensor Tensor::clone() const { return Tensor(shape(), impl_->data, requires_grad()); }

Tensor Tensor::detach() const { return Tensor(shape(), impl_->data, false); }

Tape::Tape() : previous_(g_active_tape) { g_active_tape = this; }

Tape::~Tape() { g_active_tape = previous_; }

Tape* Tape::active() { return g_active_tape; }

NoGradGuard::NoGradGuard() : saved_(g_active_tape) { g_active_tape = nullptr; }

NoGradGuard::~NoGradGuard() { g_active_tape = saved_; }

Tensor Gradients::of(const Tensor& leaf) const {
    auto it = grads_.find(leaf.id());
    if (it == grads_.end()) return Tensor::zeros(leaf.shape());
    return Tensor(leaf.shape(), it->second);
}

Gradients backward(const Tape& tape, const Tensor& loss) {
    if (loss.numel() != 1) {
        throw ContractError("backward requires a scalar loss, got shape " +
                            shape_string(loss.shape()));
    }
    Gradients result;
    if (!loss.requires_grad()) return result;

    std::unordered_map<const detail::TensorImpl*, std::vector<double>> pending;
    pending[loss.impl().get()] = {1.0};

    const auto& nodes = tape.nodes();
    std::vector<std::vector<double>*> grad_in;
    for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
        auto found = pending.find(it->output.get());
        if (found == pending.end()) continue;
        std::vector<double> grad_out = std::move(found->second);
        pending.erase(found);

        grad_in.assign(it->inputs.size(), nullptr);
        for (std::size_t i = 0; i < it->inputs.size(); ++i) {
            const auto& input = it->inputs[i];
            if (!input->requires_grad) continue;
            auto& buf = pending[input.get()];
            if (buf.empty()) buf.assign(input->data.size(), 0.0);
            grad_in[i] = &buf;
        }
        it->backward(grad_out, grad_in);
    }

    // Whatever is still pending belongs to leaves (or to outputs of nodes
    // recorded on a different tape, which are treated as leaves here).
    for (auto& [impl, grad] : pending) {
        if (!impl->produced_by_op) result.set(impl->id, std::move(grad));
    }
    return result;
}

namespace detail {

Tensor make_result(Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                   BackwardFn backward) {
    Tensor out(std::move(shape), std::move(data));
    Tape* tape = Tape::active();
    if (tape == nullptr) return out;
    bool any = false;
    for (const auto& t : inputs) any = any || t.requires_grad();
    if (!any) return out;

    out.impl()->requires_grad = true;
    out.impl()->produced_by_op = true;
    TapeNode node;
    node.inputs.reserve(inputs.size());
    for (auto& t : inputs) node.inputs.push_back(t.impl());
    node.output = out.impl();
    node.backward = std::move(backward);
    tape->record(std::move(node));
    return out;
}

}  // namespace detail

}  // namespace cilkit
