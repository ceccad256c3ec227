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

// Random instances of every differentiable operation, reduced to a scalar,
// for the finite-difference oracle.

#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "cilkit/backbone.hpp"
#include "cilkit/ops.hpp"
#include "cilkit/training.hpp"
#include "gradcheck.hpp"

namespace cilkit::testing {

struct OpCase {
    std::vector<Tensor> inputs;
    std::function<Tensor(const std::vector<Tensor>&)> f;
    std::shared_ptr<void> keep_alive;  // owner of state captured by f
};

struct OpEntry {
    std::string name;
    std::function<OpCase(Rng&)> make;
};

inline std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); }

inline std::vector<OpEntry> op_catalog() {
    using V = std::vector<Tensor>;
    std::vector<OpEntry> ops;
    const auto unary = [&](std::string name, std::function<Tensor(const Tensor&)> op) {
        ops.push_back({name, [op](Rng& rng) {
                           const std::size_t m = pick(rng, 1, 4), n = pick(rng, 1, 5);
                           const std::uint64_t w = rng.next_u64();
                           return OpCase{{random_tensor(rng, {m, n})},
                                         [op, w](const V& in) { return weighted_sum(op(in[0]), w); }};
                       }});
    };
    const auto binary = [&](std::string name, std::function<Tensor(const Tensor&, const Tensor&)> op) {
        ops.push_back({name, [op](Rng& rng) {
                           const std::size_t m = pick(rng, 1, 4), n = pick(rng, 1, 5);
                           const std::uint64_t w = rng.next_u64();
                           return OpCase{{random_tensor(rng, {m, n}), random_tensor(rng, {m, n})},
                                         [op, w](const V& in) { return weighted_sum(op(in[0], in[1]), w); }};
                       }});
    };

    ops.push_back({"matmul", [](Rng& rng) {
                       const std::size_t m = pick(rng, 1, 5), k = pick(rng, 1, 7), n = pick(rng, 1, 4);
                       const std::uint64_t w = rng.next_u64();
                       return OpCase{{random_tensor(rng, {m, k}), random_tensor(rng, {k, n})},
                                     [w](const V& in) { return weighted_sum(ops::matmul(in[0], in[1]), w); }};
                   }});
    ops.push_back({"matmul_nt", [](Rng& rng) {
                       const std::size_t m = pick(rng, 1, 5), k = pick(rng, 1, 7), n = pick(rng, 1, 4);
                       const std::uint64_t w = rng.next_u64();
                       return OpCase{{random_tensor(rng, {m, k}), random_tensor(rng, {n, k})},
                                     [w](const V& in) { return weighted_sum(ops::matmul_nt(in[0], in[1]), w); }};
                   }});
    unary("transpose", [](const Tensor& x) { return ops::transpose(x); });
    unary("reshape", [](const Tensor& x) { return ops::reshape(x, {x.numel()}); });
    binary("add", [](const Tensor& a, const Tensor& b) { return ops::add(a, b); });
    binary("sub", [](const Tensor& a, const Tensor& b) { return ops::sub(a, b); });
    binary("mul", [](const Tensor& a, const Tensor& b) { return ops::mul(a, b); });
    unary("scale", [](const Tensor& x) { return ops::scale(x, -1.7); });
    unary("add_scalar", [](const Tensor& x) { return ops::add_scalar(x, 0.3); });
    unary("relu", [](const Tensor& x) { return ops::relu(x); });
    unary("gelu", [](const Tensor& x) { return ops::gelu(x); });
    unary("square", [](const Tensor& x) { return ops::square(x); });
    unary("layer_norm", [](const Tensor& x) { return ops::layer_norm(x); });
    unary("l2_normalize_rows", [](const Tensor& x) { return ops::l2_normalize_rows(x); });
    unary("softmax_rows", [](const Tensor& x) { return ops::softmax_rows(x); });
    unary("sum", [](const Tensor& x) { return ops::scale(ops::sum(x), 1.3); });
    unary("mean", [](const Tensor& x) { return ops::scale(ops::mean(x), 0.7); });
    unary("mean_rows", [](const Tensor& x) { return ops::mean_rows(x); });
    binary("mean_squared_distance", [](const Tensor& a, const Tensor& b) { return ops::mean_squared_distance(a, b); });
    const auto row_op = [&](std::string name, std::function<Tensor(const Tensor&, const Tensor&)> op) {
        ops.push_back({name, [op](Rng& rng) {
                           const std::size_t m = pick(rng, 1, 4), n = pick(rng, 1, 5);
                           const std::uint64_t w = rng.next_u64();
                           return OpCase{{random_tensor(rng, {m, n}), random_tensor(rng, {n})},
                                         [op, w](const V& in) { return weighted_sum(op(in[0], in[1]), w); }};
                       }});
    };
    row_op("add_row", [](const Tensor& a, const Tensor& v) { return ops::add_row(a, v); });
    row_op("mul_row", [](const Tensor& a, const Tensor& v) { return ops::mul_row(a, v); });
    row_op("ssf_apply", [](const Tensor& a, const Tensor& v) { return ssf_apply(a, v, ops::scale(v, -0.5)); });
    ops.push_back({"add_tiled", [](Rng& rng) {
                       const std::size_t s = pick(rng, 1, 3), b = pick(rng, 1, 3), d = pick(rng, 1, 4);
                       const std::uint64_t w = rng.next_u64();
                       return OpCase{{random_tensor(rng, {b * s, d}), random_tensor(rng, {s, d})},
                                     [w](const V& in) { return weighted_sum(ops::add_tiled(in[0], in[1]), w); }};
                   }});
    ops.push_back({"concat_rows", [](Rng& rng) {
                       const std::size_t d = pick(rng, 1, 4);
                       const std::uint64_t w = rng.next_u64();
                       return OpCase{{random_tensor(rng, {pick(rng, 1, 3), d}), random_tensor(rng, {pick(rng, 1, 3), d})},
                                     [w](const V& in) { return weighted_sum(ops::concat_rows(in), w); }};
                   }});
    ops.push_back({"gather_rows", [](Rng& rng) {
                       const std::size_t m = pick(rng, 2, 5), d = pick(rng, 1, 4);
                       std::vector<std::size_t> rows;
                       for (std::size_t i = 0; i < pick(rng, 1, 6); ++i) rows.push_back(rng.below(m));
                       const std::uint64_t w = rng.next_u64();
                       return OpCase{{random_tensor(rng, {m, d})},
                                     [w, rows](const V& in) { return weighted_sum(ops::gather_rows(in[0], rows), w); }};
                   }});
    ops.push_back({"cross_entropy", [](Rng& rng) {
                       const std::size_t b = pick(rng, 1, 5), c = pick(rng, 2, 5);
                       std::vector<std::size_t> t(b);
                       for (auto& v : t) v = rng.below(c);
                       return OpCase{{random_tensor(rng, {b, c}, true, 2.0)},
                                     [t](const V& in) { return ops::cross_entropy(in[0], t); }};
                   }});
    ops.push_back({"offset_targets", [](Rng& rng) {
                       const std::size_t b = pick(rng, 1, 5), c = pick(rng, 2, 5);
                       std::vector<std::size_t> t(b);
                       for (auto& v : t) v = rng.below(c);
                       const std::uint64_t w = rng.next_u64();
                       return OpCase{{random_tensor(rng, {b, c})},
                                     [t, w](const V& in) { return weighted_sum(ops::offset_targets(in[0], t, -0.4), w); }};
                   }});
    ops.push_back({"append_tokens", [](Rng& rng) {
                       const std::size_t b = pick(rng, 1, 3), s = pick(rng, 1, 3), n = pick(rng, 1, 2), d = pick(rng, 1, 4);
                       const std::uint64_t w = rng.next_u64();
                       return OpCase{{random_tensor(rng, {b * s, d}), random_tensor(rng, {n, d})}, [w, s](const V& in) {
                                         return weighted_sum(ops::append_tokens(in[0], s, in[1]), w);
                                     }};
                   }});
    ops.push_back({"vpt_prepend", [](Rng& rng) {
                       const std::size_t t = pick(rng, 1, 4), n = pick(rng, 1, 3), d = pick(rng, 1, 4);
                       const std::uint64_t w = rng.next_u64();
                       return OpCase{{random_tensor(rng, {t, d}), random_tensor(rng, {n, d})},
                                     [w](const V& in) { return weighted_sum(vpt_prepend(in[0], in[1]), w); }};
                   }});
    ops.push_back({"keep_tokens", [](Rng& rng) {
                       const std::size_t b = pick(rng, 1, 3), s = pick(rng, 2, 4), d = pick(rng, 1, 4);
                       const std::size_t keep = pick(rng, 1, s);
                       const std::uint64_t w = rng.next_u64();
                       return OpCase{{random_tensor(rng, {b * s, d})}, [w, s, keep](const V& in) {
                                         return weighted_sum(ops::keep_tokens(in[0], s, keep), w);
                                     }};
                   }});
    ops.push_back({"pool_tokens", [](Rng& rng) {
                       const std::size_t b = pick(rng, 1, 3), s = pick(rng, 2, 4), d = pick(rng, 1, 4);
                       const std::size_t count = pick(rng, 1, s);
                       const std::uint64_t w = rng.next_u64();
                       return OpCase{{random_tensor(rng, {b * s, d})}, [w, s, count](const V& in) {
                                         return weighted_sum(ops::pool_tokens(in[0], s, count), w);
                                     }};
                   }});
    ops.push_back({"attention", [](Rng& rng) {
                       const std::size_t b = pick(rng, 1, 2), s = pick(rng, 1, 4), h = pick(rng, 1, 2);
                       const std::size_t d = h * pick(rng, 1, 3);
                       const std::uint64_t w = rng.next_u64();
                       return OpCase{{random_tensor(rng, {b * s, d}), random_tensor(rng, {b * s, d}),
                                      random_tensor(rng, {b * s, d})},
                                     [w, s, h](const V& in) {
                                         return weighted_sum(ops::attention(in[0], in[1], in[2], s, h), w);
                                     }};
                   }});
    ops.push_back({"adapter_apply", [](Rng& rng) {
                       const std::size_t m = pick(rng, 1, 4), d = pick(rng, 2, 6), r = pick(rng, 1, d - 1);
                       const std::uint64_t w = rng.next_u64();
                       return OpCase{{random_tensor(rng, {m, d}), random_tensor(rng, {d, r}), random_tensor(rng, {r, d}),
                                      random_tensor(rng, {r}), random_tensor(rng, {d})},
                                     [w](const V& in) {
                                         return weighted_sum(adapter_apply(in[0], in[1], in[2], 0.8, &in[3], &in[4]), w);
                                     }};
                   }});
    ops.push_back({"kd_feature_loss", [](Rng& rng) {
                       const std::size_t b = pick(rng, 1, 4), d = pick(rng, 1, 5);
                       return OpCase{{random_tensor(rng, {b, d}), random_tensor(rng, {b, d})},
                                     [](const V& in) { return kd_feature_loss(in[0], in[1]); }};
                   }});
    ops.push_back({"cosine_margin_loss", [](Rng& rng) {
                       const std::size_t b = pick(rng, 1, 4), d = pick(rng, 2, 5), c = pick(rng, 2, 4);
                       auto head = std::make_shared<ClassifierHead>(HeadKind::cosine, d);
                       std::vector<int> classes(c);
                       for (std::size_t i = 0; i < c; ++i) classes[i] = static_cast<int>(10 + i);
                       head->add_classes(classes, 1, rng, 1.0);
                       std::vector<int> labels(b);
                       for (auto& l : labels) l = classes[rng.below(c)];
                       LossConfig cfg;
                       cfg.scale = 1.0 + 4.0 * rng.uniform();
                       cfg.margin = 0.3 * rng.uniform();
                       std::vector<Tensor> in{random_tensor(rng, {b, d})};
                       for (const auto& r : head->rows()) in.push_back(r);
                       ClassifierHead* h = head.get();
                       return OpCase{in,
                                     [h, labels, classes, cfg](const V& x) {
                                         return cosine_margin_loss(x[0], labels, *h, classes, cfg);
                                     },
                                     head};
                   }});
    const auto model_case = [&](std::string name, std::string pet) {
        ops.push_back({name, [pet](Rng& rng) {
                           BackboneConfig cfg{8, 2, 8, 1, 12, 2};
                           auto model = std::make_shared<Model>();
                           model->frozen = FrozenWeights::initialize(cfg, rng);
                           if (pet == "adapter") {
                               AdapterParams a = AdapterParams::create(cfg, 3, 1.0, AdapterPlacement::parallel, true, rng);
                               for (auto& w : a.w_up)
                                   for (auto& v : w.mutable_data()) v = 0.3 * rng.normal();
                               model->pet = a;
                           } else if (pet == "ssf") {
                               SSFParams s = SSFParams::identity(cfg);
                               for (auto& g : s.gamma)
                                   for (auto& v : g.mutable_data()) v += 0.2 * rng.normal();
                               for (auto& b : s.beta)
                                   for (auto& v : b.mutable_data()) v += 0.2 * rng.normal();
                               model->pet = s;
                           } else if (pet == "vpt-deep") {
                               model->pet = PromptParams::create(cfg, 2, PromptMode::deep, rng, 0.5);
                           } else {
                               model->pet = FullFineTune{model->frozen.clone(true)};
                           }
                           const std::uint64_t w = rng.next_u64();
                           std::vector<Tensor> in{random_tensor(rng, {3, 8}, false)};
                           for (auto& p : trainable_parameters(model->pet)) in.push_back(p.tensor);
                           Model* m = model.get();
                           return OpCase{in, [m, w](const V& x) { return weighted_sum(forward(*m, x[0]), w); }, model};
                       }});
    };
    model_case("forward[adapter]", "adapter");
    model_case("forward[ssf]", "ssf");
    model_case("forward[vpt-deep]", "vpt-deep");
    model_case("forward[full]", "full");
    return ops;
}

}  // namespace cilkit::testing
