#pragma once

// Decoder-only Transformer in the original post-norm layout: sinusoidal
// positions, per layer causal multi-head self-attention and a position-wise
// feed-forward, each wrapped in residual + layer-norm.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "dsqa/array.hpp"
#include "dsqa/common.hpp"
#include "dsqa/ops.hpp"
#include "dsqa/optim.hpp"
#include "dsqa/rng.hpp"

namespace dsqa {

struct TransformerConfig {
    int num_layers = 2;
    int hidden_size = 128;
    int filter_size = 512;
    int num_heads = 4;
    int vocab_size = 32;
    int max_len = 64;
    float dropout = 0.1f;

    void validate() const {
        if (num_layers < 1) throw ConfigError("transformer: num_layers must be >= 1");
        if (hidden_size < 2 || hidden_size % 2 != 0)
            throw ConfigError("transformer: hidden_size must be even and >= 2");
        if (num_heads < 1 || hidden_size % num_heads != 0)
            throw ConfigError("transformer: num_heads " + std::to_string(num_heads) +
                              " must divide hidden_size " + std::to_string(hidden_size));
        if (filter_size < 1) throw ConfigError("transformer: filter_size must be >= 1");
        if (vocab_size < 2) throw ConfigError("transformer: vocab_size must be >= 2");
        if (max_len < 1) throw ConfigError("transformer: max_len must be >= 1");
        if (dropout < 0.0f || dropout >= 1.0f) throw ConfigError("transformer: dropout must be in [0, 1)");
    }
};

struct TransformerLayerParams {
    DiffArray wq, bq, wk, bk, wv, bv, wo, bo;
    DiffArray ln1_g, ln1_b;
    DiffArray ff1_w, ff1_b, ff2_w, ff2_b;
    DiffArray ln2_g, ln2_b;
};

struct TransformerParams {
    DiffArray embedding; // [vocab, hidden] input table
    std::vector<TransformerLayerParams> layers;
    DiffArray out_w, out_b; // [hidden, vocab]

    static TransformerParams create(ParamStore& store, const std::string& prefix,
                                    const TransformerConfig& cfg, RngState& rng) {
        cfg.validate();
        const int h = cfg.hidden_size, f = cfg.filter_size, v = cfg.vocab_size;
        TransformerParams p;
        p.embedding = store.add(prefix + ".embed", {v, h}, glorot_uniform(rng, v, h, std::int64_t{1} * v * h));
        for (int l = 0; l < cfg.num_layers; ++l) {
            const std::string base = prefix + ".layer" + std::to_string(l);
            TransformerLayerParams lp;
            auto mat = [&](const char* name, int rows, int cols) {
                return store.add(base + name, {rows, cols},
                                 glorot_uniform(rng, rows, cols, std::int64_t{1} * rows * cols));
            };
            auto vecz = [&](const char* name, int n, float fill) {
                return store.add(base + name, {n}, const_fill(n, fill));
            };
            lp.wq = mat(".attn.q.w", h, h); lp.bq = vecz(".attn.q.b", h, 0.0f);
            lp.wk = mat(".attn.k.w", h, h); lp.bk = vecz(".attn.k.b", h, 0.0f);
            lp.wv = mat(".attn.v.w", h, h); lp.bv = vecz(".attn.v.b", h, 0.0f);
            lp.wo = mat(".attn.o.w", h, h); lp.bo = vecz(".attn.o.b", h, 0.0f);
            lp.ln1_g = vecz(".ln1.g", h, 1.0f); lp.ln1_b = vecz(".ln1.b", h, 0.0f);
            lp.ff1_w = mat(".ff1.w", h, f); lp.ff1_b = vecz(".ff1.b", f, 0.0f);
            lp.ff2_w = mat(".ff2.w", f, h); lp.ff2_b = vecz(".ff2.b", h, 0.0f);
            lp.ln2_g = vecz(".ln2.g", h, 1.0f); lp.ln2_b = vecz(".ln2.b", h, 0.0f);
            p.layers.push_back(std::move(lp));
        }
        p.out_w = store.add(prefix + ".out.w", {h, v}, glorot_uniform(rng, h, v, std::int64_t{1} * h * v));
        p.out_b = store.add(prefix + ".out.b", {v}, const_fill(v, 0.0f));
        return p;
    }
};

// Fixed sin/cos position table, [T, H].
inline DiffArray sinusoid_positions(int T, int H) {
    std::vector<float> pe(static_cast<std::size_t>(T) * H);
    for (int t = 0; t < T; ++t) {
        for (int i = 0; i < H / 2; ++i) {
            const double rate = std::exp(-std::log(10000.0) * (2.0 * i / H));
            pe[static_cast<std::size_t>(t) * H + 2 * i] = static_cast<float>(std::sin(t * rate));
            pe[static_cast<std::size_t>(t) * H + 2 * i + 1] = static_cast<float>(std::cos(t * rate));
        }
    }
    return DiffArray::constant({T, H}, std::move(pe));
}

// Table lookup scaled by sqrt(hidden), the usual embedding convention.
inline DiffArray embed_tokens(const DiffArray& table, const std::vector<int>& ids, Shape shape) {
    return scale(embedding(table, ids, std::move(shape)), std::sqrt(static_cast<float>(table.dim(1))));
}

// Runs the layer stack over already-embedded input (positions added here).
// causal_offset > 0 lets that many leading positions attend bidirectionally
// among themselves; everything after them is causal.
inline DiffArray transformer_hidden(const DiffArray& x_embedded, const TransformerConfig& cfg,
                                    const TransformerParams& params, int causal_offset, Mode mode,
                                    RngState* rng) {
    cfg.validate();
    detail::expect_ndim("transformer", x_embedded, 3);
    const int T = x_embedded.dim(1);
    if (T > cfg.max_len)
        throw CapacityError("transformer: length " + std::to_string(T) + " exceeds max_len " +
                            std::to_string(cfg.max_len));
    if (x_embedded.dim(2) != cfg.hidden_size)
        throw DimensionError("transformer: input width " + std::to_string(x_embedded.dim(2)) +
                             " vs hidden_size " + std::to_string(cfg.hidden_size));
    if (mode == Mode::train && cfg.dropout > 0.0f && rng == nullptr)
        throw StateError("transformer: train mode with dropout requires an rng");

    auto drop = [&](const DiffArray& a) { return cfg.dropout > 0.0f && mode == Mode::train ? dropout(a, cfg.dropout, *rng, mode) : a; };

    DiffArray x = drop(add_broadcast(x_embedded, sinusoid_positions(T, cfg.hidden_size)));
    for (const auto& lp : params.layers) {
        DiffArray q = affine(x, lp.wq, lp.bq);
        DiffArray k = affine(x, lp.wk, lp.bk);
        DiffArray v = affine(x, lp.wv, lp.bv);
        DiffArray a = affine(attention(q, k, v, cfg.num_heads, true, causal_offset), lp.wo, lp.bo);
        x = layer_norm(add(x, drop(a)), lp.ln1_g, lp.ln1_b);
        DiffArray f = affine(relu(affine(x, lp.ff1_w, lp.ff1_b)), lp.ff2_w, lp.ff2_b);
        x = layer_norm(add(x, drop(f)), lp.ln2_g, lp.ln2_b);
    }
    return x;
}

inline DiffArray transformer_forward(const DiffArray& x_embedded, const TransformerConfig& cfg,
                                     const TransformerParams& params, int causal_offset = 0,
                                     Mode mode = Mode::eval, RngState* rng = nullptr) {
    return affine(transformer_hidden(x_embedded, cfg, params, causal_offset, mode, rng), params.out_w,
                  params.out_b);
}

inline DiffArray transformer_forward_ids(const std::vector<int>& ids, Shape shape,
                                         const TransformerConfig& cfg, const TransformerParams& params,
                                         int causal_offset = 0, Mode mode = Mode::eval,
                                         RngState* rng = nullptr) {
    return transformer_forward(embed_tokens(params.embedding, ids, std::move(shape)), cfg, params,
                               causal_offset, mode, rng);
}

} // namespace dsqa
