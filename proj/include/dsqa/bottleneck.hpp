#pragma once

// The two discretization mechanisms: improved semantic hashing and the
// Gumbel-Softmax baseline. Both map a dense vector w to a discrete code
// d(w) plus a dense reconstruction b(w) the downstream model consumes.

#include <algorithm>
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

// ---------------------------------------------------------------------------
// packed code representation

inline int pack_bits(const std::uint8_t* bits, int b) {
    int id = 0;
    for (int i = 0; i < b; ++i) {
        if (bits[i] > 1) throw RangeError("pack_bits: bit values must be 0 or 1");
        id |= static_cast<int>(bits[i]) << i; // bit 0 least significant
    }
    return id;
}

inline void unpack_id(int id, int b, std::uint8_t* out) {
    if (id < 0 || id >= (1 << b))
        throw RangeError("unpack_id: id " + std::to_string(id) + " needs more than " + std::to_string(b) + " bits");
    for (int i = 0; i < b; ++i) out[i] = static_cast<std::uint8_t>((id >> i) & 1);
}

inline std::vector<std::uint8_t> unpack_id(int id, int b) {
    std::vector<std::uint8_t> out(static_cast<std::size_t>(b));
    unpack_id(id, b, out.data());
    return out;
}

// Discrete latent codes for a run of positions: the raw bit matrix and the
// same information packed into per-position integer ids.
struct DiscreteCode {
    int width = 0;                  // bits per position
    std::vector<std::uint8_t> bits; // positions x width, row-major
    std::vector<int> ids;

    std::int64_t positions() const { return static_cast<std::int64_t>(ids.size()); }

    static DiscreteCode from_bits(int width, std::vector<std::uint8_t> bits) {
        check_width(width);
        if (bits.size() % static_cast<std::size_t>(width) != 0)
            throw DimensionError("DiscreteCode: bit count not a multiple of width");
        DiscreteCode c;
        c.width = width;
        c.bits = std::move(bits);
        c.ids.resize(c.bits.size() / static_cast<std::size_t>(width));
        for (std::size_t p = 0; p < c.ids.size(); ++p)
            c.ids[p] = pack_bits(c.bits.data() + p * static_cast<std::size_t>(width), width);
        return c;
    }

    static DiscreteCode from_ids(int width, std::vector<int> ids) {
        check_width(width);
        DiscreteCode c;
        c.width = width;
        c.ids = std::move(ids);
        c.bits.resize(c.ids.size() * static_cast<std::size_t>(width));
        for (std::size_t p = 0; p < c.ids.size(); ++p)
            unpack_id(c.ids[p], width, c.bits.data() + p * static_cast<std::size_t>(width));
        return c;
    }

private:
    static void check_width(int width) {
        if (width < 1 || width > 24)
            throw ConfigError("DiscreteCode: width must be in [1, 24], got " + std::to_string(width));
    }
};

// ---------------------------------------------------------------------------
// semantic hashing

enum class BitPolarity { positive_is_one, negative_is_one };

struct SemhashConfig {
    int bits = 16;
    float noise_sigma = 1.0f;
    float mix_probability = 0.5f;
    int filter_size = 4096;
    int hidden_size = 512;
    BitPolarity bit_polarity = BitPolarity::positive_is_one;

    void validate() const {
        if (bits < 1 || bits > 24)
            throw ConfigError("semhash: bits must be in [1, 24], got " + std::to_string(bits));
        if (mix_probability < 0.0f || mix_probability > 1.0f)
            throw ConfigError("semhash: mix_probability must be in [0, 1]");
        if (noise_sigma < 0.0f) throw ConfigError("semhash: noise_sigma must be >= 0");
        if (filter_size < 1 || hidden_size < 1)
            throw ConfigError("semhash: filter_size and hidden_size must be positive");
    }
};

struct SemhashParams {
    DiffArray proj_w, proj_b; // hidden -> bits
    DiffArray h1a_w, h1a_b;   // bits -> filter
    DiffArray h1b_w, h1b_b;
    DiffArray h2_w, h2_b;     // filter -> filter
    DiffArray out_w, out_b;   // filter -> hidden

    static SemhashParams create(ParamStore& store, const std::string& prefix, const SemhashConfig& cfg,
                                RngState& rng) {
        cfg.validate();
        const int b = cfg.bits, f = cfg.filter_size, h = cfg.hidden_size;
        SemhashParams p;
        p.proj_w = store.add(prefix + ".proj.w", {h, b}, glorot_uniform(rng, h, b, std::int64_t{1} * h * b));
        p.proj_b = store.add(prefix + ".proj.b", {b}, const_fill(b, 0.0f));
        p.h1a_w = store.add(prefix + ".h1a.w", {b, f}, glorot_uniform(rng, b, f, std::int64_t{1} * b * f));
        p.h1a_b = store.add(prefix + ".h1a.b", {f}, const_fill(f, 0.0f));
        p.h1b_w = store.add(prefix + ".h1b.w", {b, f}, glorot_uniform(rng, b, f, std::int64_t{1} * b * f));
        p.h1b_b = store.add(prefix + ".h1b.b", {f}, const_fill(f, 0.0f));
        p.h2_w = store.add(prefix + ".h2.w", {f, f}, glorot_uniform(rng, f, f, std::int64_t{1} * f * f));
        p.h2_b = store.add(prefix + ".h2.b", {f}, const_fill(f, 0.0f));
        p.out_w = store.add(prefix + ".out.w", {f, h}, glorot_uniform(rng, f, h, std::int64_t{1} * f * h));
        p.out_b = store.add(prefix + ".out.b", {h}, const_fill(h, 0.0f));
        return p;
    }
};

inline DiffArray project_to_bits(const DiffArray& w, const SemhashParams& params, const SemhashConfig& cfg) {
    if (w.dim(w.ndim() - 1) != cfg.hidden_size)
        throw DimensionError("project_to_bits: trailing dim " + std::to_string(w.dim(w.ndim() - 1)) +
                             " vs hidden_size " + std::to_string(cfg.hidden_size));
    return affine(w, params.proj_w, params.proj_b);
}

struct SemhashOut {
    DiffArray dense_code; // [.., b]
    DiscreteCode code;
};

// v -> (dense code, hard bits). Training adds Gaussian noise, then per
// latent position either passes the saturating sigmoid v1 through or emits
// the hard bits v2 with the gradient redirected to v1 (straight-through).
// Evaluation is the deterministic hard-bit path.
inline SemhashOut semhash_forward(const DiffArray& v, Mode mode, const SemhashConfig& cfg, RngState* rng) {
    cfg.validate();
    const int b = cfg.bits;
    if (v.dim(v.ndim() - 1) != b)
        throw DimensionError("semhash_forward: trailing dim must be bits=" + std::to_string(b) +
                             ", got shape " + shape_str(v.shape()));
    if (mode == Mode::train && rng == nullptr)
        throw StateError("semhash_forward: train mode requires an rng");
    const std::int64_t positions = numel(v.shape()) / b;

    SemhashOut out;
    if (mode == Mode::eval) {
        std::vector<std::uint8_t> bits(v.size());
        std::vector<float> dense(v.size());
        for (std::size_t i = 0; i < v.size(); ++i) {
            const float x = v.data()[i];
            const bool one = cfg.bit_polarity == BitPolarity::positive_is_one ? x > 0.0f : x < 0.0f;
            bits[i] = one ? 1 : 0;
            dense[i] = one ? 1.0f : 0.0f;
        }
        out.dense_code = DiffArray::constant(v.shape(), std::move(dense));
        out.code = DiscreteCode::from_bits(b, std::move(bits));
        return out;
    }

    DiffArray vn = cfg.noise_sigma > 0.0f ? add(v, gaussian_like(*rng, v.shape(), cfg.noise_sigma)) : v;
    DiffArray v1 = saturating_sigmoid(vn);

    std::vector<std::uint8_t> bits(v.size());
    std::vector<float> mixed(v.size());
    for (std::int64_t p = 0; p < positions; ++p) {
        const bool take_dense = rng->bernoulli(cfg.mix_probability);
        for (int i = 0; i < b; ++i) {
            const std::size_t at = static_cast<std::size_t>(p * b + i);
            const float x = vn.data()[at];
            const bool one = cfg.bit_polarity == BitPolarity::positive_is_one ? x > 0.0f : x < 0.0f;
            bits[at] = one ? 1 : 0;
            mixed[at] = take_dense ? v1.data()[at] : (one ? 1.0f : 0.0f);
        }
    }
    // both branches route the whole gradient to v1, so a single redirect
    // over the per-position selection is exactly the per-branch formula
    out.dense_code = gradient_redirect(DiffArray::constant(v.shape(), std::move(mixed)), v1);
    out.code = DiscreteCode::from_bits(b, std::move(bits));
    return out;
}

// vd -> dense reconstruction through the two complementary input arms:
// h1a sees vd, h1b sees 1-vd, then two relu stages back to hidden size.
inline DiffArray bit_decode_network(const DiffArray& dense_code, const SemhashParams& params,
                                    const SemhashConfig& cfg) {
    if (dense_code.dim(dense_code.ndim() - 1) != cfg.bits)
        throw DimensionError("bit_decode_network: trailing dim must be bits=" + std::to_string(cfg.bits) +
                             ", got shape " + shape_str(dense_code.shape()));
    DiffArray complement = add_scalar(neg(dense_code), 1.0f);
    DiffArray h1a = affine(dense_code, params.h1a_w, params.h1a_b);
    DiffArray h1b = affine(complement, params.h1b_w, params.h1b_b);
    DiffArray h2 = affine(relu(add(h1a, h1b)), params.h2_w, params.h2_b);
    return affine(relu(h2), params.out_w, params.out_b);
}

// ---------------------------------------------------------------------------
// Gumbel-Softmax baseline

struct GumbelConfig {
    int num_symbols = 1 << 16;
    float tau_start = 2.0f;
    float tau_end = 0.5f;
    std::int64_t tau_decay_steps = 10000;
    float variance_penalty_weight = 0.0f;

    void validate() const {
        if (num_symbols < 2) throw ConfigError("gumbel: num_symbols must be >= 2");
        if (!(tau_start >= tau_end) || !(tau_end > 0.0f))
            throw ConfigError("gumbel: need tau_start >= tau_end > 0");
        if (tau_decay_steps < 1) throw ConfigError("gumbel: tau_decay_steps must be >= 1");
        if (variance_penalty_weight < 0.0f)
            throw ConfigError("gumbel: variance_penalty_weight must be >= 0");
    }
};

struct GumbelParams {
    DiffArray proj_w, proj_b; // hidden -> num_symbols
    DiffArray embedding;      // num_symbols -> hidden

    static GumbelParams create(ParamStore& store, const std::string& prefix, const GumbelConfig& cfg,
                               int hidden_size, RngState& rng) {
        cfg.validate();
        const int v = cfg.num_symbols, h = hidden_size;
        GumbelParams p;
        p.proj_w = store.add(prefix + ".proj.w", {h, v}, glorot_uniform(rng, h, v, std::int64_t{1} * h * v));
        p.proj_b = store.add(prefix + ".proj.b", {v}, const_fill(v, 0.0f));
        p.embedding = store.add(prefix + ".embed", {v, h}, glorot_uniform(rng, v, h, std::int64_t{1} * v * h));
        return p;
    }
};

// Exponential interpolation from tau_start to tau_end over tau_decay_steps.
inline float gumbel_tau(const GumbelConfig& cfg, std::int64_t step) {
    cfg.validate();
    const double t = std::clamp(static_cast<double>(step) / static_cast<double>(cfg.tau_decay_steps), 0.0, 1.0);
    const float tau = cfg.tau_start * static_cast<float>(std::pow(cfg.tau_end / cfg.tau_start, t));
    if (!(tau > 0.0f)) throw ConfigError("gumbel: temperature underflowed to zero");
    return tau;
}

struct GumbelOut {
    DiffArray dense_code;  // [.., hidden]
    std::vector<int> ids;
    DiffArray y;           // softmax rows [positions, num_symbols]; train mode only
};

// The relaxation itself: y = softmax((log_softmax(l) + g) / tau) row-wise.
inline DiffArray gumbel_relax(const DiffArray& logit_rows, const DiffArray& noise, float tau) {
    if (!(tau > 0.0f)) throw ConfigError("gumbel_relax: tau must be > 0");
    detail::expect_same_shape("gumbel_relax", logit_rows, noise);
    return softmax(scale(add(log_softmax(logit_rows), noise), 1.0f / tau));
}

inline GumbelOut gumbel_forward(const DiffArray& w, Mode mode, const GumbelConfig& cfg, std::int64_t step,
                                RngState* rng, const GumbelParams& params) {
    cfg.validate();
    if (mode == Mode::train && rng == nullptr)
        throw StateError("gumbel_forward: train mode requires an rng");
    const int V = cfg.num_symbols;
    DiffArray logits = affine(w, params.proj_w, params.proj_b);
    const std::int64_t positions = numel(logits.shape()) / V;

    GumbelOut out;
    if (mode == Mode::eval) {
        out.ids.resize(static_cast<std::size_t>(positions));
        for (std::int64_t p = 0; p < positions; ++p) {
            const float* row = logits.data() + p * V;
            out.ids[static_cast<std::size_t>(p)] =
                static_cast<int>(std::max_element(row, row + V) - row);
        }
        Shape id_shape(w.shape().begin(), w.shape().end() - 1);
        out.dense_code = embedding(params.embedding, out.ids, std::move(id_shape));
        return out;
    }

    const float tau = gumbel_tau(cfg, step);
    std::vector<float> g(logits.size());
    for (auto& gi : g) {
        const double u = std::clamp(rng->u01(), 1e-12, 1.0 - 1e-12);
        gi = static_cast<float>(-std::log(-std::log(u)));
    }
    // rows view so the usage penalty can consume y directly
    Shape flat{static_cast<int>(positions), V};
    DiffArray rows = reshape(logits, flat);
    out.y = gumbel_relax(rows, DiffArray::constant(flat, std::move(g)), tau);
    out.ids.resize(static_cast<std::size_t>(positions));
    for (std::int64_t p = 0; p < positions; ++p) {
        const float* row = out.y.data() + p * V;
        out.ids[static_cast<std::size_t>(p)] = static_cast<int>(std::max_element(row, row + V) - row);
    }
    DiffArray dense_rows = matmul(out.y, params.embedding); // [positions, hidden]
    Shape dense_shape = w.shape();
    dense_shape.back() = params.embedding.dim(1);
    out.dense_code = reshape(dense_rows, std::move(dense_shape));
    return out;
}

// Negative entropy of the batch-mean usage distribution: minimized when
// symbols are used uniformly across the batch.
inline DiffArray usage_variance_penalty(const DiffArray& y, float weight) {
    if (y.ndim() != 2 || y.dim(0) < 1)
        throw DimensionError("usage_variance_penalty: need at least one softmax row");
    return neg_entropy_of_mean(y, weight);
}

} // namespace dsqa
