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

#pragma once

#include <cstddef>
#include <vector>

#include "cilkit/tensor.hpp"

namespace cilkit {

/// lr(k) = lr0 * (1 + cos(pi * k / total)) / 2 for optimizer step k in [0, total).
class CosineAnnealing {
public:
    CosineAnnealing(double lr0, std::size_t total_steps) : lr0_(lr0), total_(total_steps) {}

    double at(std::size_t step) const;
    double initial() const { return lr0_; }
    std::size_t total_steps() const { return total_; }

private:
    double lr0_;
    std::size_t total_;
};

/// Plain SGD with heavy-ball momentum: v = mu*v + g; p -= lr*v.
/// Only the registered parameters are ever written.
class Sgd {
public:
    Sgd(std::vector<Tensor> params, double momentum);

    void step(const Gradients& grads, double lr);
    const std::vector<Tensor>& params() const { return params_; }

private:
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> velocity_;
    double momentum_;
};

}  // namespace cilkit
