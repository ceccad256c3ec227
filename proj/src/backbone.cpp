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

#include "cilkit/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <numeric>

#include "cilkit/error.hpp"
#include "cilkit/ops.hpp"
#include "cilkit/optim.hpp"

namespace cilkit {

namespace {

Tensor gaussian(Shape shape, double stddev, Rng& rng) {
    std::vector<double> data(shape_numel(shape));
    for (auto& v : data) v = rng.normal() * stddev;
    return Tensor(std::move(shape), std::move(data));
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return ops::add_row(ops::matmul(x, w), b); }

Tensor norm_affine(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
    return ops::add_row(ops::mul_row(ops::layer_norm(x), gamma), beta);
}

template <class... Ts>
struct Overloaded : Ts... {
    using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

}  // namespace

void BackboneConfig::validate() const {
    if (input_dim == 0 || token_count == 0 || embed_dim == 0 || depth == 0 || mlp_hidden == 0 || heads == 0) {
        throw ContractError("backbone config: every extent must be positive");
    }
    if (embed_dim % heads != 0) throw ContractError("backbone config: embed_dim must be divisible by heads");
    if (input_dim % token_count != 0) {
        throw ContractError("backbone config: input_dim must be divisible by token_count");
    }
}

// ----------------------------------------------------------- FrozenWeights

FrozenWeights FrozenWeights::initialize(const BackboneConfig& config, Rng& rng) {
    config.validate();
    const std::size_t d = config.embed_dim, h = config.mlp_hidden, c = config.chunk_dim();
    const auto fan = [](std::size_t n) { return 1.0 / std::sqrt(static_cast<double>(n)); };
    FrozenWeights w;
    w.config = config;
    w.embed_w = gaussian({c, d}, fan(c), rng);
    w.embed_b = Tensor::zeros({d});
    w.pos = gaussian({config.token_count, d}, 1.0, rng);
    for (std::size_t l = 0; l < config.depth; ++l) {
        BlockWeights b;
        b.ln1_gamma = Tensor::filled({d}, 1.0);
        b.ln1_beta = Tensor::zeros({d});
        b.wq = gaussian({d, d}, fan(d), rng);
        b.bq = Tensor::zeros({d});
        b.wk = gaussian({d, d}, fan(d), rng);
        b.bk = Tensor::zeros({d});
        b.wv = gaussian({d, d}, fan(d), rng);
        b.bv = Tensor::zeros({d});
        b.wo = gaussian({d, d}, fan(d), rng);
        b.bo = Tensor::zeros({d});
        b.ln2_gamma = Tensor::filled({d}, 1.0);
        b.ln2_beta = Tensor::zeros({d});
        b.fc1 = gaussian({d, h}, fan(d), rng);
        b.fc1_b = Tensor::zeros({h});
        b.fc2 = gaussian({h, d}, fan(h), rng);
        b.fc2_b = Tensor::zeros({d});
        w.blocks.push_back(std::move(b));
    }
    w.final_gamma = Tensor::filled({d}, 1.0);
    w.final_beta = Tensor::zeros({d});
    return w;
}

std::vector<NamedParameter> FrozenWeights::named() const {
    std::vector<NamedParameter> out{{"embed.w", embed_w}, {"embed.b", embed_b}, {"embed.pos", pos}};
    for (std::size_t l = 0; l < blocks.size(); ++l) {
        const auto& b = blocks[l];
        const std::string p = "block" + std::to_string(l) + ".";
        for (auto& [name, t] : std::vector<std::pair<const char*, const Tensor*>>{
                 {"ln1.gamma", &b.ln1_gamma}, {"ln1.beta", &b.ln1_beta}, {"attn.wq", &b.wq}, {"attn.bq", &b.bq},
                 {"attn.wk", &b.wk}, {"attn.bk", &b.bk}, {"attn.wv", &b.wv}, {"attn.bv", &b.bv},
                 {"attn.wo", &b.wo}, {"attn.bo", &b.bo}, {"ln2.gamma", &b.ln2_gamma}, {"ln2.beta", &b.ln2_beta},
                 {"mlp.fc1", &b.fc1}, {"mlp.fc1_b", &b.fc1_b}, {"mlp.fc2", &b.fc2}, {"mlp.fc2_b", &b.fc2_b}}) {
            out.push_back({p + name, *t});
        }
    }
    out.push_back({"final.gamma", final_gamma});
    out.push_back({"final.beta", final_beta});
    return out;
}

std::size_t FrozenWeights::parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : named()) n += p.tensor.numel();
    return n;
}

FrozenWeights FrozenWeights::clone(bool trainable) const {
    const auto copy = [trainable](const Tensor& t) { return Tensor(t.shape(), t.values(), trainable); };
    FrozenWeights w;
    w.config = config;
    w.embed_w = copy(embed_w);
    w.embed_b = copy(embed_b);
    w.pos = copy(pos);
    for (const auto& b : blocks) {
        w.blocks.push_back(BlockWeights{copy(b.ln1_gamma), copy(b.ln1_beta), copy(b.wq), copy(b.bq), copy(b.wk),
                                        copy(b.bk), copy(b.wv), copy(b.bv), copy(b.wo), copy(b.bo),
                                        copy(b.ln2_gamma), copy(b.ln2_beta), copy(b.fc1), copy(b.fc1_b),
                                        copy(b.fc2), copy(b.fc2_b)});
    }
    w.final_gamma = copy(final_gamma);
    w.final_beta = copy(final_beta);
    return w;
}

void FrozenWeights::set_trainable(bool trainable) {
    for (auto& p : named()) p.tensor.set_requires_grad(trainable);
}

bool FrozenWeights::bit_equal(const FrozenWeights& other) const {
    if (!(config == other.config)) return false;
    const auto a = named(), b = other.named();
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].name != b[i].name || a[i].tensor.shape() != b[i].tensor.shape()) return false;
        if (std::memcmp(a[i].tensor.data().data(), b[i].tensor.data().data(), a[i].tensor.numel() * sizeof(double)) != 0)
            return false;
    }
    return true;
}

Container FrozenWeights::to_container() const {
    Container c;
    c.config = {static_cast<std::int32_t>(config.input_dim), static_cast<std::int32_t>(config.token_count),
                static_cast<std::int32_t>(config.embed_dim), static_cast<std::int32_t>(config.depth),
                static_cast<std::int32_t>(config.mlp_hidden), static_cast<std::int32_t>(config.heads)};
    for (const auto& p : named()) c.arrays.push_back({p.name, p.tensor.shape(), p.tensor.values()});
    return c;
}

FrozenWeights FrozenWeights::from_container(const Container& c) {
    if (c.config.size() != 6) {
        throw ParseError("backbone container: expected 6 config integers, got " + std::to_string(c.config.size()));
    }
    for (std::int32_t v : c.config)
        if (v <= 0) throw ParseError("backbone container: non-positive config integer");
    BackboneConfig cfg{static_cast<std::size_t>(c.config[0]), static_cast<std::size_t>(c.config[1]),
                       static_cast<std::size_t>(c.config[2]), static_cast<std::size_t>(c.config[3]),
                       static_cast<std::size_t>(c.config[4]), static_cast<std::size_t>(c.config[5])};
    try {
        cfg.validate();
    } catch (const ContractError& e) {
        throw ParseError(std::string("backbone container: ") + e.what());
    }
    Rng scratch(0);
    FrozenWeights w = initialize(cfg, scratch);
    auto slots = w.named();
    if (c.arrays.size() != slots.size()) {
        throw ParseError("backbone container: expected " + std::to_string(slots.size()) + " arrays, got " +
                         std::to_string(c.arrays.size()));
    }
    for (auto& slot : slots) {
        const NamedArray& a = c.get(slot.name);
        if (a.shape != slot.tensor.shape()) {
            throw ParseError("backbone container: array '" + slot.name + "' has shape " + shape_string(a.shape) +
                             ", expected " + shape_string(slot.tensor.shape()));
        }
        std::copy(a.data.begin(), a.data.end(), slot.tensor.mutable_data().begin());
    }
    return w;
}

// -------------------------------------------------------------------- PETs

AdapterParams AdapterParams::create(const BackboneConfig& config, std::size_t bottleneck, double scale,
                                    AdapterPlacement placement, bool bias, Rng& rng, double init_std) {
    const std::size_t d = config.embed_dim;
    if (bottleneck == 0 || bottleneck >= d) {
        throw ContractError("adapter bottleneck must satisfy 0 < d_hat < d (d = " + std::to_string(d) + ")");
    }
    AdapterParams p;
    p.scale = scale;
    p.placement = placement;
    for (std::size_t l = 0; l < config.depth; ++l) {
        Tensor down = gaussian({d, bottleneck}, init_std, rng);
        down.set_requires_grad(true);
        p.w_down.push_back(down);
        p.w_up.push_back(Tensor::zeros({bottleneck, d}, true));
        if (bias) {
            p.b_down.push_back(Tensor::zeros({bottleneck}, true));
            p.b_up.push_back(Tensor::zeros({d}, true));
        }
    }
    return p;
}

const char* ssf_site_name(SsfSite site) {
    switch (site) {
        case SsfSite::ln1: return "ln1";
        case SsfSite::q: return "q";
        case SsfSite::k: return "k";
        case SsfSite::v: return "v";
        case SsfSite::attn_proj: return "attn_proj";
        case SsfSite::ln2: return "ln2";
        case SsfSite::mlp_out: return "mlp_out";
    }
    return "?";
}

SSFParams SSFParams::identity(const BackboneConfig& config) {
    SSFParams p;
    for (std::size_t i = 0; i < config.depth * kSsfSitesPerBlock; ++i) {
        p.gamma.push_back(Tensor::filled({config.embed_dim}, 1.0, true));
        p.beta.push_back(Tensor::zeros({config.embed_dim}, true));
    }
    return p;
}

PromptParams PromptParams::create(const BackboneConfig& config, std::size_t count, PromptMode mode, Rng& rng,
                                  double init_std) {
    PromptParams p;
    p.count = count;
    p.mode = mode;
    const std::size_t layers = mode == PromptMode::deep ? config.depth : 1;
    for (std::size_t l = 0; l < layers; ++l) {
        Tensor t = gaussian({count, config.embed_dim}, init_std, rng);
        t.set_requires_grad(true);
        p.prompts.push_back(t);
    }
    return p;
}

std::string pet_kind_name(const PetAttachment& pet) {
    return std::visit(Overloaded{[](const NoPet&) { return std::string("none"); },
                                 [](const AdapterParams&) { return std::string("adapter"); },
                                 [](const SSFParams&) { return std::string("ssf"); },
                                 [](const PromptParams& p) {
                                     return std::string(p.mode == PromptMode::deep ? "vpt-deep" : "vpt-shallow");
                                 },
                                 [](const FullFineTune&) { return std::string("full"); }},
                      pet);
}

std::vector<NamedParameter> trainable_parameters(const PetAttachment& pet) {
    std::vector<NamedParameter> out;
    std::visit(Overloaded{[](const NoPet&) {},
                          [&](const AdapterParams& p) {
                              for (std::size_t l = 0; l < p.w_down.size(); ++l) {
                                  const std::string b = "block" + std::to_string(l) + ".";
                                  out.push_back({b + "w_down", p.w_down[l]});
                                  out.push_back({b + "w_up", p.w_up[l]});
                                  if (!p.b_down.empty()) {
                                      out.push_back({b + "b_down", p.b_down[l]});
                                      out.push_back({b + "b_up", p.b_up[l]});
                                  }
                              }
                          },
                          [&](const SSFParams& p) {
                              for (std::size_t i = 0; i < p.gamma.size(); ++i) {
                                  const std::string b = "block" + std::to_string(i / kSsfSitesPerBlock) + "." +
                                                        ssf_site_name(static_cast<SsfSite>(i % kSsfSitesPerBlock));
                                  out.push_back({b + ".gamma", p.gamma[i]});
                                  out.push_back({b + ".beta", p.beta[i]});
                              }
                          },
                          [&](const PromptParams& p) {
                              for (std::size_t l = 0; l < p.prompts.size(); ++l)
                                  out.push_back({"prompt" + std::to_string(l), p.prompts[l]});
                          },
                          [&](const FullFineTune& f) { out = f.weights.named(); }},
               pet);
    return out;
}

std::size_t trainable_parameter_count(const PetAttachment& pet) {
    std::size_t n = 0;
    for (const auto& p : trainable_parameters(pet)) n += p.tensor.numel();
    return n;
}

PetAttachment clone_pet(const PetAttachment& pet) {
    const auto copy_all = [](const std::vector<Tensor>& ts) {
        std::vector<Tensor> out;
        for (const auto& t : ts) out.push_back(t.clone());
        return out;
    };
    return std::visit(Overloaded{[](const NoPet&) -> PetAttachment { return NoPet{}; },
                                 [&](const AdapterParams& p) -> PetAttachment {
                                     AdapterParams c = p;
                                     c.w_down = copy_all(p.w_down);
                                     c.w_up = copy_all(p.w_up);
                                     c.b_down = copy_all(p.b_down);
                                     c.b_up = copy_all(p.b_up);
                                     return c;
                                 },
                                 [&](const SSFParams& p) -> PetAttachment {
                                     return SSFParams{copy_all(p.gamma), copy_all(p.beta)};
                                 },
                                 [&](const PromptParams& p) -> PetAttachment {
                                     PromptParams c = p;
                                     c.prompts = copy_all(p.prompts);
                                     return c;
                                 },
                                 [](const FullFineTune& f) -> PetAttachment {
                                     return FullFineTune{f.weights.clone(true)};
                                 }},
                      pet);
}

Model Model::snapshot() const { return Model{frozen, clone_pet(pet)}; }

// ------------------------------------------------------------------ forward

Tensor adapter_apply(const Tensor& x, const Tensor& w_down, const Tensor& w_up, double scale, const Tensor* b_down,
                     const Tensor* b_up) {
    if (x.cols() != w_down.rows() || w_up.cols() != x.cols() || w_down.cols() != w_up.rows()) {
        throw DimensionError("adapter_apply: input " + shape_string(x.shape()) + " with W_down " +
                             shape_string(w_down.shape()) + " and W_up " + shape_string(w_up.shape()));
    }
    Tensor hidden = ops::matmul(x, w_down);
    if (b_down) hidden = ops::add_row(hidden, *b_down);
    Tensor branch = ops::matmul(ops::relu(hidden), w_up);
    if (b_up) branch = ops::add_row(branch, *b_up);
    return ops::add(x, ops::scale(branch, scale));
}

Tensor adapter_apply(const Tensor& x, const AdapterParams& p, std::size_t block) {
    const bool bias = !p.b_down.empty();
    return adapter_apply(x, p.w_down[block], p.w_up[block], p.scale, bias ? &p.b_down[block] : nullptr,
                         bias ? &p.b_up[block] : nullptr);
}

Tensor ssf_apply(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
    if (gamma.numel() != x.cols() || beta.numel() != x.cols()) {
        throw DimensionError("ssf_apply: input " + shape_string(x.shape()) + " with gamma " +
                             shape_string(gamma.shape()) + " and beta " + shape_string(beta.shape()));
    }
    return ops::add_row(ops::mul_row(x, gamma), beta);
}

Tensor vpt_prepend(const Tensor& x, const Tensor& prompts) {
    if (x.rank() != 2) throw DimensionError("vpt_prepend: expects a [t x d] token matrix");
    if (prompts.numel() > 0 && prompts.cols() != x.cols()) {
        throw DimensionError("vpt_prepend: prompts " + shape_string(prompts.shape()) + " vs tokens " +
                             shape_string(x.shape()));
    }
    return ops::append_tokens(x, x.rows(), prompts);
}

Tensor forward(const FrozenWeights& frozen, const PetAttachment& pet, const Tensor& batch, ForwardTrace* trace) {
    const BackboneConfig& cfg = frozen.config;
    if (batch.rank() != 2 || batch.cols() != cfg.input_dim) {
        throw DimensionError("forward: batch " + shape_string(batch.shape()) + " does not match input_dim " +
                             std::to_string(cfg.input_dim));
    }
    const auto* full = std::get_if<FullFineTune>(&pet);
    const FrozenWeights& w = full ? full->weights : frozen;
    const auto* adapter = std::get_if<AdapterParams>(&pet);
    const auto* ssf = std::get_if<SSFParams>(&pet);
    const auto* prompts = std::get_if<PromptParams>(&pet);
    if (adapter && adapter->w_down.size() != cfg.depth) throw DimensionError("forward: adapter depth mismatch");
    if (ssf && ssf->gamma.size() != cfg.depth * kSsfSitesPerBlock) throw DimensionError("forward: SSF site count mismatch");
    if (prompts && prompts->prompts.size() != (prompts->mode == PromptMode::deep ? cfg.depth : 1)) {
        throw DimensionError("forward: prompt layer count mismatch");
    }

    const std::size_t batch_size = batch.rows(), tokens = cfg.token_count;
    const auto site = [&](Tensor x, std::size_t block, SsfSite s) {
        return ssf ? ssf_apply(x, ssf->gamma_at(block, s), ssf->beta_at(block, s)) : x;
    };

    Tensor h = ops::reshape(batch, {batch_size * tokens, cfg.chunk_dim()});
    h = ops::add_tiled(linear(h, w.embed_w, w.embed_b), w.pos);
    std::size_t seq = tokens;
    const std::size_t n_prompts = prompts ? prompts->count : 0;
    if (n_prompts > 0) {
        h = ops::append_tokens(h, tokens, prompts->prompts.front());
        seq = tokens + n_prompts;
    }
    if (trace) {
        trace->block_inputs.clear();
        trace->sequence_length = seq;
    }

    for (std::size_t l = 0; l < cfg.depth; ++l) {
        const BlockWeights& b = w.blocks[l];
        if (n_prompts > 0 && prompts->mode == PromptMode::deep && l > 0) {
            h = ops::append_tokens(ops::keep_tokens(h, seq, tokens), tokens, prompts->prompts[l]);
        }
        if (trace) trace->block_inputs.push_back(h);

        const Tensor a = site(norm_affine(h, b.ln1_gamma, b.ln1_beta), l, SsfSite::ln1);
        const Tensor q = site(linear(a, b.wq, b.bq), l, SsfSite::q);
        const Tensor k = site(linear(a, b.wk, b.bk), l, SsfSite::k);
        const Tensor v = site(linear(a, b.wv, b.bv), l, SsfSite::v);
        const Tensor att = ops::attention(q, k, v, seq, cfg.heads);
        h = ops::add(h, site(linear(att, b.wo, b.bo), l, SsfSite::attn_proj));

        const Tensor m = site(norm_affine(h, b.ln2_gamma, b.ln2_beta), l, SsfSite::ln2);
        const Tensor u = site(linear(ops::gelu(linear(m, b.fc1, b.fc1_b)), b.fc2, b.fc2_b), l, SsfSite::mlp_out);
        if (adapter == nullptr) {
            h = ops::add(h, u);
        } else if (adapter->placement == AdapterPlacement::parallel) {
            h = ops::add(adapter_apply(h, *adapter, l), u);
        } else {
            h = adapter_apply(ops::add(h, u), *adapter, l);
        }
    }
    h = norm_affine(h, w.final_gamma, w.final_beta);
    return ops::pool_tokens(h, seq, tokens);
}

Tensor forward(const Model& model, const Tensor& batch) { return forward(model.frozen, model.pet, batch); }

Matrix extract_features(const Model& model, const Matrix& inputs, std::size_t chunk) {
    NoGradGuard no_grad;
    const std::size_t n = inputs.rows(), d = model.frozen.config.embed_dim;
    Matrix out(n, d);
    for (std::size_t start = 0; start < n; start += chunk) {
        const std::size_t rows = std::min(chunk, n - start);
        std::vector<double> slice(inputs.data().begin() + static_cast<std::ptrdiff_t>(start * inputs.cols()),
                                  inputs.data().begin() + static_cast<std::ptrdiff_t>((start + rows) * inputs.cols()));
        const Tensor f = forward(model, Tensor::matrix(rows, inputs.cols(), std::move(slice)));
        std::copy(f.data().begin(), f.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(start * d));
    }
    return out;
}

// ----------------------------------------------------------------- pretrain

PretrainResult pretrain(const BackboneConfig& config, const LabeledSet& base_data, const PretrainSchedule& schedule,
                        Rng& rng) {
    if (base_data.empty()) throw ContractError("pretrain: empty base data");
    if (base_data.dim() != config.input_dim) {
        throw DimensionError("pretrain: data dim " + std::to_string(base_data.dim()) + " vs input_dim " +
                             std::to_string(config.input_dim));
    }
    FrozenWeights weights = FrozenWeights::initialize(config, rng);

    const std::vector<int> classes = base_data.classes();
    std::map<int, std::size_t> index;
    for (std::size_t i = 0; i < classes.size(); ++i) index[classes[i]] = i;
    std::vector<std::size_t> targets;
    for (int l : base_data.labels) targets.push_back(index[l]);

    Tensor head_w = gaussian({config.embed_dim, classes.size()}, 1.0 / std::sqrt(double(config.embed_dim)), rng);
    head_w.set_requires_grad(true);
    Tensor head_b = Tensor::zeros({classes.size()}, true);

    if (schedule.epochs > 0) {
        weights.set_trainable(true);
        std::vector<Tensor> params{head_w, head_b};
        for (auto& p : weights.named()) params.push_back(p.tensor);
        Sgd opt(params, schedule.momentum);
        const std::size_t n = base_data.size(), bs = std::max<std::size_t>(1, schedule.batch_size);
        const std::size_t steps_per_epoch = (n + bs - 1) / bs;
        CosineAnnealing lr(schedule.lr, schedule.epochs * steps_per_epoch);
        std::vector<std::size_t> order(n);
        std::size_t step = 0;
        for (std::size_t e = 0; e < schedule.epochs; ++e) {
            std::iota(order.begin(), order.end(), 0);
            rng.shuffle(order);
            for (std::size_t start = 0; start < n; start += bs) {
                const std::size_t rows = std::min(bs, n - start);
                std::vector<double> x;
                std::vector<std::size_t> y;
                x.reserve(rows * config.input_dim);
                for (std::size_t i = start; i < start + rows; ++i) {
                    const auto r = base_data.features.row(order[i]);
                    x.insert(x.end(), r.begin(), r.end());
                    y.push_back(targets[order[i]]);
                }
                Tape tape;
                const Tensor feats = forward(weights, NoPet{}, Tensor::matrix(rows, config.input_dim, std::move(x)));
                const Tensor loss = ops::cross_entropy(linear(feats, head_w, head_b), y);
                opt.step(backward(tape, loss), lr.at(step++));
            }
        }
        weights.set_trainable(false);
    }

    PretrainResult result{weights, 0.0};
    const Matrix feats = extract_features(Model{weights, NoPet{}}, base_data.features);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < base_data.size(); ++i) {
        std::size_t best = 0;
        double best_score = -INFINITY;
        for (std::size_t c = 0; c < classes.size(); ++c) {
            double s = head_b[c];
            for (std::size_t j = 0; j < config.embed_dim; ++j) s += feats(i, j) * head_w.at(j, c);
            if (s > best_score) {
                best_score = s;
                best = c;
            }
        }
        if (best == targets[i]) ++correct;
    }
    result.train_accuracy = static_cast<double>(correct) / static_cast<double>(base_data.size());
    return result;
}

}  // namespace cilkit
