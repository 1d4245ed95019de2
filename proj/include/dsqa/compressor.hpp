#pragma once

// c(s): K-fold length reduction of an embedded sequence through k
// residual-convolution halving steps (or bare strided convolutions in the
// local variant), then the discretization bottleneck. A pretraining
// side-path returns s' untouched for the first pretrain_steps steps.

#include <cstdint>
#include <string>
#include <vector>

#include "dsqa/array.hpp"
#include "dsqa/bottleneck.hpp"
#include "dsqa/common.hpp"
#include "dsqa/ops.hpp"
#include "dsqa/optim.hpp"

namespace dsqa {

enum class BottleneckKind { semhash, gumbel };

struct CompressorConfig {
    int k = 3; // K = 2^k
    bool local = false;
    int hidden_size = 128;
    std::int64_t pretrain_steps = 10000;
    BottleneckKind bottleneck = BottleneckKind::semhash;
    SemhashConfig semhash;
    GumbelConfig gumbel;

    int K() const { return 1 << k; }

    void validate() const {
        if (k < 1 || k > 10) throw ConfigError("compressor: k must be in [1, 10], got " + std::to_string(k));
        if (hidden_size < 1) throw ConfigError("compressor: hidden_size must be positive");
        if (pretrain_steps < 0) throw ConfigError("compressor: pretrain_steps must be >= 0");
        if (bottleneck == BottleneckKind::semhash) {
            semhash.validate();
            if (semhash.hidden_size != hidden_size)
                throw ConfigError("compressor: semhash hidden_size " + std::to_string(semhash.hidden_size) +
                                  " must match compressor hidden_size " + std::to_string(hidden_size));
        } else {
            gumbel.validate();
        }
    }
};

struct HalvingStepParams {
    DiffArray conv_w[3], conv_b[3]; // kernel 3, stride 1
    DiffArray ln_g[3], ln_b[3];
    DiffArray down_w, down_b;       // kernel 2, stride 2
};

struct CompressorParams {
    std::vector<HalvingStepParams> steps;              // global variant
    std::vector<std::pair<DiffArray, DiffArray>> down; // local variant: bare strided convs
    SemhashParams semhash;
    GumbelParams gumbel;

    static CompressorParams create(ParamStore& store, const std::string& prefix,
                                   const CompressorConfig& cfg, RngState& rng) {
        cfg.validate();
        const int h = cfg.hidden_size;
        CompressorParams p;
        for (int s = 0; s < cfg.k; ++s) {
            const std::string base = prefix + ".step" + std::to_string(s);
            if (cfg.local) {
                p.down.emplace_back(
                    store.add(base + ".down.w", {2, h, h}, glorot_uniform(rng, 2 * h, h, std::int64_t{2} * h * h)),
                    store.add(base + ".down.b", {h}, const_fill(h, 0.0f)));
                continue;
            }
            HalvingStepParams hs;
            for (int c = 0; c < 3; ++c) {
                const std::string cb = base + ".conv" + std::to_string(c);
                hs.conv_w[c] =
                    store.add(cb + ".w", {3, h, h}, glorot_uniform(rng, 3 * h, h, std::int64_t{3} * h * h));
                hs.conv_b[c] = store.add(cb + ".b", {h}, const_fill(h, 0.0f));
                hs.ln_g[c] = store.add(cb + ".ln.g", {h}, const_fill(h, 1.0f));
                hs.ln_b[c] = store.add(cb + ".ln.b", {h}, const_fill(h, 0.0f));
            }
            hs.down_w =
                store.add(base + ".down.w", {2, h, h}, glorot_uniform(rng, 2 * h, h, std::int64_t{2} * h * h));
            hs.down_b = store.add(base + ".down.b", {h}, const_fill(h, 0.0f));
            p.steps.push_back(std::move(hs));
        }
        if (cfg.bottleneck == BottleneckKind::semhash)
            p.semhash = SemhashParams::create(store, prefix + ".bottleneck", cfg.semhash, rng);
        else
            p.gumbel = GumbelParams::create(store, prefix + ".bottleneck", cfg.gumbel, h, rng);
        return p;
    }
};

// One halving step: a three-convolution residual block, then the stride-2
// downsampling convolution. x: [B, L, H] -> [B, ceil(L/2), H].
inline DiffArray halving_step(const DiffArray& x, const HalvingStepParams& p) {
    DiffArray r = x;
    for (int i = 0; i < 3; ++i)
        r = layer_norm(conv1d(relu(r), p.conv_w[i], p.conv_b[i], 1), p.ln_g[i], p.ln_b[i]);
    r = add(x, r);
    return conv1d(r, p.down_w, p.down_b, 2);
}

// Smallest width that can hold ids in [0, num_symbols).
inline int id_bit_width(int num_symbols) {
    int w = 1;
    while ((std::int64_t{1} << w) < num_symbols) ++w;
    return w;
}

struct CompressOut {
    DiffArray s_prime;      // [B, ceil(N/K), hidden]
    DiffArray dense_latent; // same shape; equals s_prime during the bypass
    bool bypassed = false;
    DiscreteCode latent;    // empty during the bypass
    DiffArray gumbel_y;     // train-mode softmax rows for the usage penalty
};

inline CompressOut compress(const DiffArray& s_embedded, const CompressorConfig& cfg,
                            const CompressorParams& params, Mode mode, std::int64_t step, RngState* rng) {
    cfg.validate();
    detail::expect_ndim("compress", s_embedded, 3);
    if (s_embedded.dim(1) < 1) throw DataError("compress: empty sequence");
    if (s_embedded.dim(2) != cfg.hidden_size)
        throw DimensionError("compress: input width " + std::to_string(s_embedded.dim(2)) +
                             " vs hidden_size " + std::to_string(cfg.hidden_size));

    DiffArray r = s_embedded;
    if (cfg.local) {
        for (int s = 0; s < cfg.k; ++s) {
            if (s > 0) r = relu(r);
            r = conv1d(r, params.down[static_cast<std::size_t>(s)].first,
                       params.down[static_cast<std::size_t>(s)].second, 2);
        }
    } else {
        for (const auto& sp : params.steps) r = halving_step(r, sp);
    }

    CompressOut out;
    out.s_prime = r;
    if (step < cfg.pretrain_steps) {
        out.dense_latent = r;
        out.bypassed = true;
        return out;
    }

    if (cfg.bottleneck == BottleneckKind::semhash) {
        DiffArray v = project_to_bits(r, params.semhash, cfg.semhash);
        SemhashOut sh = semhash_forward(v, mode, cfg.semhash, rng);
        out.dense_latent = bit_decode_network(sh.dense_code, params.semhash, cfg.semhash);
        out.latent = std::move(sh.code);
    } else {
        GumbelOut g = gumbel_forward(r, mode, cfg.gumbel, step, rng, params.gumbel);
        out.dense_latent = g.dense_code;
        out.latent = DiscreteCode::from_ids(id_bit_width(cfg.gumbel.num_symbols), std::move(g.ids));
        out.gumbel_y = g.y;
    }
    return out;
}

// Input window feeding one latent symbol: exact in the local variant, a
// documented lower bound for the global one.
inline int receptive_field(const CompressorConfig& cfg) {
    cfg.validate();
    return cfg.local ? (1 << cfg.k) : 3 * (1 << (cfg.k - 1));
}

} // namespace dsqa
