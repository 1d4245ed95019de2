#pragma once

// The augmented sequence model: next-token prediction over
// reverse(c(s)) , separator , s, with a separately-parameterized latent
// predictor over the code ids, plus the plain baseline language model the
// comparison needs.

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "dsqa/array.hpp"
#include "dsqa/common.hpp"
#include "dsqa/compressor.hpp"
#include "dsqa/ops.hpp"
#include "dsqa/optim.hpp"
#include "dsqa/transformer.hpp"

namespace dsqa {

struct SequenceBatch {
    int batch = 0;
    int length = 0;              // N, padded to a multiple of K
    std::vector<int> token_ids;  // batch x N
    std::vector<float> mask;     // 1 on real tokens (EOS included), 0 on padding
    std::vector<int> lengths;    // real length per row, EOS included
    int source_len = 0;          // 0 for the unconditional task
    std::vector<int> source_ids; // batch x source_len

    bool conditional() const { return source_len > 0; }

    void validate(int K) const {
        if (batch < 1 || length < 1) throw DataError("batch: empty batch");
        if (length % K != 0)
            throw DataError("batch: length " + std::to_string(length) + " not a multiple of K=" +
                            std::to_string(K));
        if (token_ids.size() != static_cast<std::size_t>(batch) * length ||
            mask.size() != token_ids.size() || lengths.size() != static_cast<std::size_t>(batch))
            throw DataError("batch: field sizes disagree");
        if (source_ids.size() != static_cast<std::size_t>(batch) * source_len)
            throw DataError("batch: source field sizes disagree");
        for (std::size_t i = 0; i < mask.size(); ++i) {
            if (mask[i] != 0.0f && mask[i] != 1.0f) throw DataError("batch: mask must be 0/1");
            if (mask[i] == 0.0f && token_ids[i] != tokens::PAD)
                throw DataError("batch: mask is 0 on a non-padding token");
            if (mask[i] == 1.0f && token_ids[i] == tokens::PAD)
                throw DataError("batch: mask is 1 on a padding token");
        }
    }
};

struct AugmentedModelBundle {
    CompressorConfig comp_cfg;
    TransformerConfig main_cfg;
    TransformerConfig latent_cfg; // same stack dimensions, latent vocabulary
    float latent_loss_weight = 1.0f;

    CompressorParams compressor;
    TransformerParams main_model;
    TransformerParams latent_predictor; // .embedding is the latent id table
    DiffArray latpred_src_embedding;    // token table for the conditional source channel
    DiffArray separator;                // the '#' vector between prefix and s
    DiffArray latpred_start;            // start-of-code vector for the unconditional predictor

    std::int64_t step = 0;

    int latent_vocab() const {
        return comp_cfg.bottleneck == BottleneckKind::semhash ? (1 << comp_cfg.semhash.bits)
                                                              : comp_cfg.gumbel.num_symbols;
    }

    static AugmentedModelBundle create(const CompressorConfig& comp_cfg, const TransformerConfig& main_cfg,
                                       float latent_loss_weight, ParamStore& store, RngState& rng) {
        comp_cfg.validate();
        main_cfg.validate();
        if (comp_cfg.hidden_size != main_cfg.hidden_size)
            throw ConfigError("bundle: compressor hidden_size " + std::to_string(comp_cfg.hidden_size) +
                              " must match transformer hidden_size " + std::to_string(main_cfg.hidden_size));
        AugmentedModelBundle b;
        b.comp_cfg = comp_cfg;
        b.main_cfg = main_cfg;
        b.latent_cfg = main_cfg;
        b.latent_cfg.vocab_size = b.latent_vocab();
        b.latent_loss_weight = latent_loss_weight;
        const int h = main_cfg.hidden_size;
        b.compressor = CompressorParams::create(store, "comp", comp_cfg, rng);
        b.main_model = TransformerParams::create(store, "main", main_cfg, rng);
        b.latent_predictor = TransformerParams::create(store, "latpred", b.latent_cfg, rng);
        b.latpred_src_embedding = store.add("latpred.src_embed", {main_cfg.vocab_size, h},
                                            glorot_uniform(rng, main_cfg.vocab_size, h,
                                                           std::int64_t{1} * main_cfg.vocab_size * h));
        b.separator = store.add("sep", {h}, glorot_uniform(rng, h, h, h));
        b.latpred_start = store.add("latpred.start", {h}, glorot_uniform(rng, h, h, h));
        return b;
    }
};

// ---------------------------------------------------------------------------
// input assembly

struct AugmentedLayout {
    DiffArray input;   // [B, T, H]
    int prefix_len = 0; // source tokens incl. boundary; 0 when unconditional
    int latent_len = 0;
    int sep_pos = 0;
    int s_start = 0;
    int total = 0;
};

// reverse(latent) , separator , s, optionally preceded by an embedded
// source segment (which already carries its boundary token).
inline AugmentedLayout build_augmented_input(const DiffArray& latent_dense, const DiffArray& s_embedded,
                                             const DiffArray& separator,
                                             const DiffArray* src_embedded = nullptr) {
    detail::expect_ndim("build_augmented_input", latent_dense, 3);
    detail::expect_ndim("build_augmented_input", s_embedded, 3);
    if (latent_dense.dim(1) < 1) throw ConfigError("build_augmented_input: empty latent prefix");
    const int B = s_embedded.dim(0);

    AugmentedLayout lay;
    lay.latent_len = latent_dense.dim(1);
    DiffArray core = concat_time(reverse_time(latent_dense), tile_row(separator, B));
    if (s_embedded.dim(1) > 0) core = concat_time(core, s_embedded); // decoding passes an empty s

    if (src_embedded != nullptr) {
        lay.prefix_len = src_embedded->dim(1);
        lay.input = concat_time(*src_embedded, core);
    } else {
        lay.input = core;
    }
    lay.sep_pos = lay.prefix_len + lay.latent_len;
    lay.s_start = lay.sep_pos + 1;
    lay.total = lay.input.dim(1);
    return lay;
}

// ---------------------------------------------------------------------------
// training / evaluation forward passes

struct ForwardOptions {
    bool zero_latent_prefix = false; // ablation: blank the prefix, keep the layout
};

struct ForwardStats {
    DiffArray seq_nll;    // nats per real token of s
    DiffArray latent_nll; // nats per latent symbol (constant 0 during the bypass)
    DiffArray total;
    CompressOut comp;
    int latent_len = 0;
    bool bypassed = false;
};

namespace detail {

inline void check_vocab(const std::vector<int>& ids, int vocab, const char* what) {
    for (int id : ids)
        if (id < 0 || id >= vocab)
            throw ConfigError(std::string(what) + " id " + std::to_string(id) +
                              " outside model vocabulary of " + std::to_string(vocab));
}

// Per-row ids of source + trailing boundary token.
inline std::vector<int> with_boundary(const std::vector<int>& src, int B, int S) {
    std::vector<int> out(static_cast<std::size_t>(B) * (S + 1));
    for (int b = 0; b < B; ++b) {
        std::copy(src.begin() + static_cast<std::ptrdiff_t>(b) * S,
                  src.begin() + static_cast<std::ptrdiff_t>(b + 1) * S,
                  out.begin() + static_cast<std::ptrdiff_t>(b) * (S + 1));
        out[static_cast<std::size_t>(b) * (S + 1) + S] = tokens::BOUNDARY;
    }
    return out;
}

} // namespace detail

// Latent ids in the order they appear as the model's prefix (reversed
// c(s)), with a mask that drops code positions covering only padding.
struct LatentTargets {
    std::vector<int> ids;    // B x L, prefix order
    std::vector<float> mask; // same layout
};

inline LatentTargets latent_targets_prefix_order(const DiscreteCode& latent, const SequenceBatch& batch,
                                                 int K) {
    const int B = batch.batch;
    const int L = static_cast<int>(latent.positions()) / B;
    LatentTargets t;
    t.ids.resize(latent.ids.size());
    t.mask.resize(latent.ids.size());
    for (int b = 0; b < B; ++b) {
        for (int i = 0; i < L; ++i) { // i indexes natural c(s) order
            float real = 0.0f;
            for (int j = i * K; j < (i + 1) * K && j < batch.length; ++j)
                real = std::max(real, batch.mask[static_cast<std::size_t>(b) * batch.length + j]);
            const std::size_t at = static_cast<std::size_t>(b) * L + (L - 1 - i);
            t.ids[at] = latent.ids[static_cast<std::size_t>(b) * L + i];
            t.mask[at] = real;
        }
    }
    return t;
}

inline ForwardStats forward_pass(const SequenceBatch& batch, AugmentedModelBundle& bundle,
                                 std::int64_t step, RngState* rng, Mode mode,
                                 const ForwardOptions& options = {}) {
    const int K = bundle.comp_cfg.K();
    batch.validate(K);
    detail::check_vocab(batch.token_ids, bundle.main_cfg.vocab_size, "token");
    detail::check_vocab(batch.source_ids, bundle.main_cfg.vocab_size, "source token");

    const int B = batch.batch, N = batch.length, L = N / K;
    const int H = bundle.main_cfg.hidden_size;

    DiffArray e_s = embed_tokens(bundle.main_model.embedding, batch.token_ids, {B, N});

    ForwardStats out;
    out.comp = compress(e_s, bundle.comp_cfg, bundle.compressor, mode, step, rng);
    out.bypassed = out.comp.bypassed;
    out.latent_len = L;

    DiffArray prefix = options.zero_latent_prefix
                           ? DiffArray::zeros({B, L, H})
                           : out.comp.dense_latent;

    DiffArray e_src;
    AugmentedLayout lay;
    if (batch.conditional()) {
        auto src_plus = detail::with_boundary(batch.source_ids, B, batch.source_len);
        e_src = embed_tokens(bundle.main_model.embedding, src_plus, {B, batch.source_len + 1});
        lay = build_augmented_input(prefix, e_s, bundle.separator, &e_src);
    } else {
        lay = build_augmented_input(prefix, e_s, bundle.separator);
    }

    DiffArray logits = transformer_forward(lay.input, bundle.main_cfg, bundle.main_model, 0, mode, rng);
    DiffArray s_logits = reshape(slice_time(logits, lay.sep_pos, N), {B * N, bundle.main_cfg.vocab_size});
    out.seq_nll = cross_entropy(s_logits, batch.token_ids, batch.mask);

    if (out.bypassed) {
        out.latent_nll = DiffArray::scalar_const(0.0f);
        out.total = out.seq_nll;
        return out;
    }

    // latent channel: code ids are plain integer targets, so no gradient
    // reaches the compressor from this loss
    LatentTargets lt = latent_targets_prefix_order(out.comp.latent, batch, K);
    detail::check_vocab(lt.ids, bundle.latent_cfg.vocab_size, "latent");

    DiffArray lp_input;
    int predict_start = 0;
    if (batch.conditional()) {
        auto src_plus = detail::with_boundary(batch.source_ids, B, batch.source_len);
        DiffArray e_src_lp =
            embed_tokens(bundle.latpred_src_embedding, src_plus, {B, batch.source_len + 1});
        if (L > 1) {
            std::vector<int> shifted(static_cast<std::size_t>(B) * (L - 1));
            for (int b = 0; b < B; ++b)
                std::copy(lt.ids.begin() + static_cast<std::ptrdiff_t>(b) * L,
                          lt.ids.begin() + static_cast<std::ptrdiff_t>(b) * L + (L - 1),
                          shifted.begin() + static_cast<std::ptrdiff_t>(b) * (L - 1));
            DiffArray e_u = embed_tokens(bundle.latent_predictor.embedding, shifted, {B, L - 1});
            lp_input = concat_time(e_src_lp, e_u);
        } else {
            lp_input = e_src_lp;
        }
        predict_start = batch.source_len; // boundary position predicts the first code
    } else {
        DiffArray start = tile_row(bundle.latpred_start, B);
        if (L > 1) {
            std::vector<int> shifted(static_cast<std::size_t>(B) * (L - 1));
            for (int b = 0; b < B; ++b)
                std::copy(lt.ids.begin() + static_cast<std::ptrdiff_t>(b) * L,
                          lt.ids.begin() + static_cast<std::ptrdiff_t>(b) * L + (L - 1),
                          shifted.begin() + static_cast<std::ptrdiff_t>(b) * (L - 1));
            DiffArray e_u = embed_tokens(bundle.latent_predictor.embedding, shifted, {B, L - 1});
            lp_input = concat_time(start, e_u);
        } else {
            lp_input = start;
        }
        predict_start = 0;
    }

    DiffArray lp_logits =
        transformer_forward(lp_input, bundle.latent_cfg, bundle.latent_predictor, 0, mode, rng);
    DiffArray code_logits =
        reshape(slice_time(lp_logits, predict_start, L), {B * L, bundle.latent_cfg.vocab_size});
    out.latent_nll = cross_entropy(code_logits, lt.ids, lt.mask);

    out.total = add(out.seq_nll, scale(out.latent_nll, bundle.latent_loss_weight));
    if (bundle.comp_cfg.bottleneck == BottleneckKind::gumbel && mode == Mode::train &&
        bundle.comp_cfg.gumbel.variance_penalty_weight > 0.0f && out.comp.gumbel_y.defined()) {
        out.total = add(out.total, usage_variance_penalty(out.comp.gumbel_y,
                                                          bundle.comp_cfg.gumbel.variance_penalty_weight));
    }
    return out;
}

inline ForwardStats forward_train(const SequenceBatch& batch, AugmentedModelBundle& bundle,
                                  std::int64_t step, RngState* rng, const ForwardOptions& options = {}) {
    return forward_pass(batch, bundle, step, rng, Mode::train, options);
}

// ---------------------------------------------------------------------------
// plain language model baseline (identical stack, no latent prefix)

// Input is end-of-sequence as begin marker followed by the shifted tokens
// (or source , boundary , shifted tokens for the conditional task); the
// costed positions are exactly the real tokens of s.
inline DiffArray baseline_nll(const SequenceBatch& batch, const TransformerConfig& cfg,
                              TransformerParams& params, Mode mode, RngState* rng) {
    batch.validate(1);
    detail::check_vocab(batch.token_ids, cfg.vocab_size, "token");
    detail::check_vocab(batch.source_ids, cfg.vocab_size, "source token");
    const int B = batch.batch, N = batch.length, S = batch.source_len;
    const int T = S + 1 + (N - 1); // marker + shifted tokens

    std::vector<int> input(static_cast<std::size_t>(B) * T);
    for (int b = 0; b < B; ++b) {
        int* row = input.data() + static_cast<std::size_t>(b) * T;
        int at = 0;
        if (batch.conditional()) {
            for (int j = 0; j < S; ++j) row[at++] = batch.source_ids[static_cast<std::size_t>(b) * S + j];
            row[at++] = tokens::BOUNDARY;
        } else {
            row[at++] = tokens::EOS;
        }
        for (int j = 0; j + 1 < N; ++j) row[at++] = batch.token_ids[static_cast<std::size_t>(b) * N + j];
    }
    DiffArray logits = transformer_forward_ids(input, {B, T}, cfg, params, 0, mode, rng);
    const int predict_start = batch.conditional() ? S : 0;
    DiffArray s_logits = reshape(slice_time(logits, predict_start, N), {B * N, cfg.vocab_size});
    return cross_entropy(s_logits, batch.token_ids, batch.mask);
}

} // namespace dsqa
