#pragma once

// Tiny decoder-only autoregressive transformer: pre-norm residual blocks,
// multi-head causal attention, GELU FFN, learned positional embeddings and an
// output projection tied to the token embedding. Parameters are a named
// tensor list in a fixed canonical order so initialization, checkpointing and
// flat packing all agree.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "lethe/common.hpp"
#include "lethe/rng.hpp"
#include "lethe/tape.hpp"
#include "lethe/tensor.hpp"

namespace lethe {

// Byte-level token ids shared by the whole pipeline.
inline constexpr std::int32_t kPadId = 0;
inline constexpr std::int32_t kBosId = 1;
inline constexpr std::int32_t kEosId = 2;
inline constexpr std::int32_t kByteOffset = 3;
inline constexpr std::size_t kByteVocab = 259; // 256 bytes + PAD, BOS, EOS

inline constexpr float kLayerNormEps = 1e-5f;

struct ModelConfig {
    std::size_t vocab_size = kByteVocab;
    std::size_t d_model = 128;
    std::size_t n_heads = 4;
    std::size_t n_layers = 4;
    std::size_t ffn_mult = 4;
    std::size_t max_context = 256;
    std::uint64_t init_seed = 0;

    void validate() const {
        if (vocab_size < 4) throw ConfigError("vocab_size must be >= 4");
        if (max_context < 2) throw ConfigError("max_context must be >= 2");
        if (d_model == 0 || n_heads == 0 || n_layers == 0 || ffn_mult == 0) {
            throw ConfigError("model dimensions must be positive");
        }
        if (d_model % n_heads != 0) {
            throw ConfigError("d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                              std::to_string(n_heads));
        }
    }

    bool operator==(const ModelConfig&) const = default;
};

template <class S>
struct Parameters {
    ModelConfig config;
    std::vector<std::pair<std::string, Tensor<S>>> entries;

    const Tensor<S>& get(const std::string& name) const {
        for (const auto& [n, t] : entries) {
            if (n == name) return t;
        }
        throw ContractError("no parameter named '" + name + "'");
    }

    Tensor<S>& get(const std::string& name) {
        for (auto& [n, t] : entries) {
            if (n == name) return t;
        }
        throw ContractError("no parameter named '" + name + "'");
    }

    std::size_t total_params() const {
        std::size_t n = 0;
        for (const auto& [name, t] : entries) n += t.numel();
        return n;
    }

    template <class T>
    Parameters<T> cast() const {
        Parameters<T> out;
        out.config = config;
        out.entries.reserve(entries.size());
        for (const auto& [name, t] : entries) out.entries.emplace_back(name, t.template cast<T>());
        return out;
    }
};

namespace detail {

// Canonical parameter layout: name, shape, and which init rule applies.
enum class InitRule { Gaussian, GaussianResidual, Zero, One };

struct ParamSpec {
    std::string name;
    std::vector<std::size_t> shape;
    InitRule rule;
};

inline std::vector<ParamSpec> param_layout(const ModelConfig& cfg) {
    const std::size_t d = cfg.d_model;
    const std::size_t f = cfg.ffn_mult * d;
    std::vector<ParamSpec> specs;
    specs.push_back({"tok_emb", {cfg.vocab_size, d}, InitRule::Gaussian});
    specs.push_back({"pos_emb", {cfg.max_context, d}, InitRule::Gaussian});
    for (std::size_t i = 0; i < cfg.n_layers; ++i) {
        const std::string p = "layer" + std::to_string(i) + ".";
        specs.push_back({p + "ln1.gain", {d}, InitRule::One});
        specs.push_back({p + "ln1.bias", {d}, InitRule::Zero});
        specs.push_back({p + "attn.wq", {d, d}, InitRule::Gaussian});
        specs.push_back({p + "attn.wk", {d, d}, InitRule::Gaussian});
        specs.push_back({p + "attn.wv", {d, d}, InitRule::Gaussian});
        specs.push_back({p + "attn.wo", {d, d}, InitRule::GaussianResidual});
        specs.push_back({p + "ln2.gain", {d}, InitRule::One});
        specs.push_back({p + "ln2.bias", {d}, InitRule::Zero});
        specs.push_back({p + "ffn.w1", {d, f}, InitRule::Gaussian});
        specs.push_back({p + "ffn.b1", {f}, InitRule::Zero});
        specs.push_back({p + "ffn.w2", {f, d}, InitRule::GaussianResidual});
        specs.push_back({p + "ffn.b2", {d}, InitRule::Zero});
    }
    specs.push_back({"final_ln.gain", {d}, InitRule::One});
    specs.push_back({"final_ln.bias", {d}, InitRule::Zero});
    return specs;
}

} // namespace detail

template <class S = float>
Parameters<S> init_params(const ModelConfig& cfg) {
    cfg.validate();
    SplitMix64 rng(cfg.init_seed);
    const double base_std = 0.02;
    const double residual_std = base_std / std::sqrt(2.0 * static_cast<double>(cfg.n_layers));
    Parameters<S> params;
    params.config = cfg;
    for (auto& spec : detail::param_layout(cfg)) {
        Tensor<S> t(spec.shape);
        switch (spec.rule) {
            case detail::InitRule::Gaussian:
                for (auto& v : t.data) v = static_cast<S>(rng.next_gaussian() * base_std);
                break;
            case detail::InitRule::GaussianResidual:
                for (auto& v : t.data) v = static_cast<S>(rng.next_gaussian() * residual_std);
                break;
            case detail::InitRule::Zero:
                break;
            case detail::InitRule::One:
                for (auto& v : t.data) v = S{1};
                break;
        }
        params.entries.emplace_back(std::move(spec.name), std::move(t));
    }
    return params;
}

// One padded batch plus the provenance needed to map each masked position
// back to its sample.
struct TokenBatch {
    std::size_t batch = 0;
    std::size_t seq = 0;
    std::vector<std::int32_t> ids;     // [batch*seq], PAD-right
    std::vector<std::uint8_t> mask;    // 1 exactly on response tokens and EOS
    std::vector<std::string> seq_ids;  // [batch]
    std::vector<std::int32_t> resp_pos; // [batch*seq], response-relative index or -1
};

// Tape handles for every parameter, in canonical entry order.
template <class S>
struct ParamVars {
    struct Layer {
        typename Tape<S>::Var ln1_gain, ln1_bias, wq, wk, wv, wo, ln2_gain, ln2_bias, w1, b1, w2, b2;
    };
    typename Tape<S>::Var tok_emb, pos_emb;
    std::vector<Layer> layers;
    typename Tape<S>::Var final_gain, final_bias;
};

template <class S>
ParamVars<S> register_param_vars(Tape<S>& tape, const Parameters<S>& params) {
    ParamVars<S> pv;
    std::size_t i = 0;
    auto next = [&] { return tape.leaf(params.entries[i++].second); };
    pv.tok_emb = next();
    pv.pos_emb = next();
    pv.layers.resize(params.config.n_layers);
    for (auto& layer : pv.layers) {
        layer.ln1_gain = next();
        layer.ln1_bias = next();
        layer.wq = next();
        layer.wk = next();
        layer.wv = next();
        layer.wo = next();
        layer.ln2_gain = next();
        layer.ln2_bias = next();
        layer.w1 = next();
        layer.b1 = next();
        layer.w2 = next();
        layer.b2 = next();
    }
    pv.final_gain = next();
    pv.final_bias = next();
    return pv;
}

// Flat packing in canonical order, for optimizer state and gradient checks.
template <class S>
Tensor<S> params_to_flat(const Parameters<S>& params) {
    Tensor<S> flat({params.total_params()});
    std::size_t off = 0;
    for (const auto& [name, t] : params.entries) {
        std::copy(t.data.begin(), t.data.end(), flat.data.begin() + static_cast<long>(off));
        off += t.numel();
    }
    return flat;
}

template <class S>
void flat_to_params(const Tensor<S>& flat, Parameters<S>& params) {
    if (flat.numel() != params.total_params()) {
        throw ShapeError("flat vector " + shape_str(flat.shape) + " does not hold " +
                         std::to_string(params.total_params()) + " parameters");
    }
    std::size_t off = 0;
    for (auto& [name, t] : params.entries) {
        std::copy(flat.data.begin() + static_cast<long>(off),
                  flat.data.begin() + static_cast<long>(off + t.numel()), t.data.begin());
        off += t.numel();
    }
}

// Carves ParamVars out of one flat leaf so the whole model can be
// differentiated against a single probe vector.
template <class S>
ParamVars<S> slice_param_vars(Tape<S>& tape, typename Tape<S>::Var flat, const ModelConfig& cfg) {
    ParamVars<S> pv;
    std::size_t off = 0;
    auto specs = detail::param_layout(cfg);
    std::size_t i = 0;
    auto next = [&] {
        auto v = tape.slice(flat, off, specs[i].shape);
        off += Tensor<S>::numel_of(specs[i].shape);
        ++i;
        return v;
    };
    pv.tok_emb = next();
    pv.pos_emb = next();
    pv.layers.resize(cfg.n_layers);
    for (auto& layer : pv.layers) {
        layer.ln1_gain = next();
        layer.ln1_bias = next();
        layer.wq = next();
        layer.wk = next();
        layer.wv = next();
        layer.wo = next();
        layer.ln2_gain = next();
        layer.ln2_bias = next();
        layer.w1 = next();
        layer.b1 = next();
        layer.w2 = next();
        layer.b2 = next();
    }
    pv.final_gain = next();
    pv.final_bias = next();
    return pv;
}

// Logits for every position: [batch*seq x vocab]. Output projection reuses
// the token embedding.
template <class S>
typename Tape<S>::Var forward_logits(Tape<S>& tape, const ParamVars<S>& pv, const ModelConfig& cfg,
                                     const std::vector<std::int32_t>& ids, std::size_t batch,
                                     std::size_t seq) {
    if (seq > cfg.max_context) {
        throw ContractError("sequence length " + std::to_string(seq) + " exceeds max_context " +
                            std::to_string(cfg.max_context));
    }
    if (ids.size() != batch * seq) {
        throw ShapeError("ids length " + std::to_string(ids.size()) + " != batch*seq");
    }
    std::vector<std::int32_t> positions(batch * seq);
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t t = 0; t < seq; ++t) positions[b * seq + t] = static_cast<std::int32_t>(t);
    }
    auto h = tape.add(tape.gather_rows(pv.tok_emb, ids), tape.gather_rows(pv.pos_emb, positions));
    const S eps = static_cast<S>(kLayerNormEps);
    for (const auto& layer : pv.layers) {
        auto a = tape.layer_norm(h, layer.ln1_gain, layer.ln1_bias, eps);
        auto q = tape.matmul(a, layer.wq);
        auto k = tape.matmul(a, layer.wk);
        auto v = tape.matmul(a, layer.wv);
        auto att = tape.causal_attention(q, k, v, batch, seq, cfg.n_heads);
        h = tape.add(h, tape.matmul(att, layer.wo));
        auto f = tape.layer_norm(h, layer.ln2_gain, layer.ln2_bias, eps);
        auto ff = tape.matmul(tape.gelu(tape.add_bias(tape.matmul(f, layer.w1), layer.b1)), layer.w2);
        h = tape.add(h, tape.add_bias(ff, layer.b2));
    }
    auto hf = tape.layer_norm(h, pv.final_gain, pv.final_bias, eps);
    return tape.matmul_t(hf, pv.tok_emb);
}

// Shifted next-token targets: the loss of the token at position t lives at
// logits row t-1. Unmasked positions get -1 (no loss, no gradient).
inline std::vector<std::int32_t> shifted_targets(const TokenBatch& batch) {
    std::vector<std::int32_t> targets(batch.batch * batch.seq, -1);
    for (std::size_t b = 0; b < batch.batch; ++b) {
        for (std::size_t t = 1; t < batch.seq; ++t) {
            if (batch.mask[b * batch.seq + t]) {
                targets[b * batch.seq + t - 1] = batch.ids[b * batch.seq + t];
            }
        }
    }
    return targets;
}

// Per-position loss graph node, aligned with token positions: element
// (b, t) is the loss of token t given its strict prefix. Positions with
// mask 0 hold zero.
template <class S>
typename Tape<S>::Var token_loss_graph(Tape<S>& tape, const ParamVars<S>& pv, const ModelConfig& cfg,
                                       const TokenBatch& batch) {
    auto logits = forward_logits(tape, pv, cfg, batch.ids, batch.batch, batch.seq);
    return tape.cross_entropy_rows(logits, shifted_targets(batch));
}

// Realigns a loss node value (indexed by logits row t-1) to token positions.
template <class S>
Tensor<S> align_losses(const Tensor<S>& raw, std::size_t batch, std::size_t seq) {
    Tensor<S> out({batch, seq});
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t t = 1; t < seq; ++t) {
            out.data[b * seq + t] = raw.data[b * seq + t - 1];
        }
    }
    return out;
}

// Forward-only per-token loss: position (b, t) holds the negative log
// probability of token t; mask-0 positions are zero.
template <class S>
Tensor<S> per_token_loss(const Parameters<S>& params, const TokenBatch& batch) {
    Tape<S> tape;
    auto pv = register_param_vars(tape, params);
    auto losses = token_loss_graph(tape, pv, params.config, batch);
    return align_losses(tape.value(losses), batch.batch, batch.seq);
}

// Greedy or seeded-categorical continuation of a prompt. temperature 0 is
// argmax with ties broken toward the lowest token id; stops after max_new
// tokens, at EOS, or when the context fills up.
template <class S>
std::vector<std::int32_t> generate(const Parameters<S>& params, std::vector<std::int32_t> prompt,
                                   std::size_t max_new, double temperature, std::uint64_t seed) {
    if (prompt.empty()) throw ContractError("generate requires a nonempty prompt");
    if (temperature < 0.0) throw ContractError("temperature must be >= 0");
    const ModelConfig& cfg = params.config;
    if (prompt.size() > cfg.max_context) {
        throw ContractError("prompt of " + std::to_string(prompt.size()) + " tokens exceeds max_context " +
                            std::to_string(cfg.max_context));
    }
    SplitMix64 rng(seed);
    std::vector<std::int32_t> out;
    while (out.size() < max_new && prompt.size() < cfg.max_context) {
        Tape<S> tape;
        auto pv = register_param_vars(tape, params);
        auto logits = forward_logits(tape, pv, cfg, prompt, 1, prompt.size());
        const Tensor<S>& lv = tape.value(logits);
        const std::size_t last = (prompt.size() - 1) * cfg.vocab_size;
        std::int32_t next = 0;
        if (temperature == 0.0) {
            std::size_t best = 0;
            for (std::size_t j = 1; j < cfg.vocab_size; ++j) {
                if (lv.data[last + j] > lv.data[last + best]) best = j;
            }
            next = static_cast<std::int32_t>(best);
        } else {
            std::vector<double> probs(cfg.vocab_size);
            double mx = -1e300;
            for (std::size_t j = 0; j < cfg.vocab_size; ++j) {
                probs[j] = static_cast<double>(lv.data[last + j]) / temperature;
                mx = std::max(mx, probs[j]);
            }
            double total = 0.0;
            for (double& p : probs) {
                p = std::exp(p - mx);
                total += p;
            }
            const double u = rng.next_double() * total;
            double acc = 0.0;
            std::size_t pick = cfg.vocab_size - 1;
            for (std::size_t j = 0; j < cfg.vocab_size; ++j) {
                acc += probs[j];
                if (u < acc) {
                    pick = j;
                    break;
                }
            }
            next = static_cast<std::int32_t>(pick);
        }
        if (next == kEosId) break;
        out.push_back(next);
        prompt.push_back(next);
    }
    return out;
}

} // namespace lethe
