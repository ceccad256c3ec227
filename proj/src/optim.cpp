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

#include "cilkit/optim.hpp"

#include <cmath>
#include <numbers>

namespace cilkit {

double CosineAnnealing::at(std::size_t step) const {
    if (total_ == 0) return lr0_;
    const double progress = static_cast<double>(step) / static_cast<double>(total_);
    return lr0_ * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

Sgd::Sgd(std::vector<Tensor> params, double momentum)
    : params_(std::move(params)), momentum_(momentum) {
    velocity_.reserve(params_.size());
    for (const auto& p : params_) velocity_.emplace_back(p.numel(), 0.0);
}

void Sgd::step(const Gradients& grads, double lr) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
        if (!grads.contains(params_[i])) continue;
        const Tensor g = grads.of(params_[i]);
        auto& v = velocity_[i];
        auto p = params_[i].mutable_data();
        const auto gd = g.data();
        for (std::size_t j = 0; j < p.size(); ++j) {
            v[j] = momentum_ * v[j] + gd[j];
            p[j] -= lr * v[j];
        }
    }
}

}  // namespace cilkit
