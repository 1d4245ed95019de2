#pragma once

// Inference: greedy/beam/temperature decoding over a step scorer, plus the
// mixed procedure that samples a latent code from the latent predictor and
// beam-searches the surface sequence under it.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "dsqa/seqmodel.hpp"

namespace dsqa {

// Next-token logits for the tokens chosen so far; the conditioning prefix is
// baked into the scorer.
using StepScorer = std::function<std::vector<float>(const std::vector<int>&)>;

struct BeamConfig {
    int width = 4;
    int max_steps = 32;
    float length_normalization_alpha = 0.0f; // 0 = off
    int eos_id = tokens::EOS;                // negative disables termination

    void validate() const {
        if (width < 1) throw ConfigError("beam: width must be >= 1");
        if (max_steps < 1) throw ConfigError("beam: max_steps must be >= 1");
        if (length_normalization_alpha < 0.0f)
            throw ConfigError("beam: length_normalization_alpha must be >= 0");
    }
};

struct DecodeResult {
    std::vector<int> ids; // terminal eos kept when one was produced
    double score = 0.0;   // cumulative log-prob, length-normalized when enabled
};

namespace detail {

// Row log-probs in double so tie-breaks and tiny temperatures stay exact.
inline std::vector<double> log_probs(const std::vector<float>& logits) {
    double mx = -1e300;
    for (float v : logits) mx = std::max(mx, static_cast<double>(v));
    double lse = 0.0;
    for (float v : logits) lse += std::exp(static_cast<double>(v) - mx);
    lse = mx + std::log(lse);
    std::vector<double> out(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) out[i] = static_cast<double>(logits[i]) - lse;
    return out;
}

inline double beam_score(double logp, std::size_t len, float alpha) {
    return alpha > 0.0f ? logp / std::pow(static_cast<double>(len), static_cast<double>(alpha)) : logp;
}

} // namespace detail

inline DecodeResult beam_search(const StepScorer& scorer, int vocab, const BeamConfig& cfg) {
    cfg.validate();
    if (vocab < 1) throw ConfigError("beam: vocab must be >= 1");
    if (cfg.width > vocab)
        std::fprintf(stderr, "warning: beam width %d exceeds vocabulary %d at the first step; clipped\n",
                     cfg.width, vocab);

    struct Hyp {
        std::vector<int> ids;
        double logp = 0.0;
    };
    std::vector<Hyp> active{Hyp{}};
    std::vector<Hyp> done;

    for (int step = 0; step < cfg.max_steps && !active.empty(); ++step) {
        std::vector<Hyp> candidates;
        candidates.reserve(active.size() * static_cast<std::size_t>(vocab));
        for (const Hyp& h : active) {
            std::vector<double> lp = detail::log_probs(scorer(h.ids));
            if (static_cast<int>(lp.size()) != vocab)
                throw DimensionError("beam: scorer returned " + std::to_string(lp.size()) +
                                     " logits for vocab " + std::to_string(vocab));
            for (int v = 0; v < vocab; ++v) {
                Hyp c;
                c.ids = h.ids;
                c.ids.push_back(v);
                c.logp = h.logp + lp[v];
                candidates.push_back(std::move(c));
            }
        }
        // score order, then lexicographic so equal scores resolve the same way
        // every run (and width 1 matches plain argmax)
        std::sort(candidates.begin(), candidates.end(), [](const Hyp& a, const Hyp& b) {
            if (a.logp != b.logp) return a.logp > b.logp;
            return a.ids < b.ids;
        });
        if (static_cast<int>(candidates.size()) > cfg.width) candidates.resize(cfg.width);

        active.clear();
        for (Hyp& c : candidates) {
            if (cfg.eos_id >= 0 && c.ids.back() == cfg.eos_id)
                done.push_back(std::move(c));
            else
                active.push_back(std::move(c));
        }
    }
    // anything still open at max_steps counts as finished there
    for (Hyp& h : active) done.push_back(std::move(h));
    if (done.empty()) throw StateError("beam: no hypotheses produced");

    const Hyp* best = nullptr;
    double best_score = 0.0;
    for (const Hyp& h : done) {
        double s = detail::beam_score(h.logp, h.ids.size(), cfg.length_normalization_alpha);
        if (best == nullptr || s > best_score || (s == best_score && h.ids < best->ids)) {
            best = &h;
            best_score = s;
        }
    }
    return DecodeResult{best->ids, best_score};
}

inline DecodeResult greedy_decode(const StepScorer& scorer, int vocab, int max_steps,
                                  int eos_id = tokens::EOS) {
    BeamConfig cfg;
    cfg.width = 1;
    cfg.max_steps = max_steps;
    cfg.eos_id = eos_id;
    return beam_search(scorer, vocab, cfg);
}

inline std::vector<int> sample_tokens(const StepScorer& scorer, int vocab, float temperature,
                                      int max_steps, int eos_id, RngState& rng) {
    if (!(temperature > 0.0f)) throw ConfigError("sample: temperature must be > 0");
    if (max_steps < 1) throw ConfigError("sample: max_steps must be >= 1");
    std::vector<int> out;
    for (int step = 0; step < max_steps; ++step) {
        std::vector<float> logits = scorer(out);
        if (static_cast<int>(logits.size()) != vocab)
            throw DimensionError("sample: scorer returned " + std::to_string(logits.size()) +
                                 " logits for vocab " + std::to_string(vocab));
        double mx = -1e300;
        for (float v : logits) mx = std::max(mx, static_cast<double>(v) / temperature);
        std::vector<double> w(logits.size());
        double total = 0.0;
        for (std::size_t i = 0; i < w.size(); ++i) {
            w[i] = std::exp(static_cast<double>(logits[i]) / temperature - mx);
            total += w[i];
        }
        double u = rng.u01() * total;
        int pick = 0;
        double acc = 0.0;
        for (std::size_t i = 0; i < w.size(); ++i) {
            acc += w[i];
            if (u < acc) {
                pick = static_cast<int>(i);
                break;
            }
            pick = static_cast<int>(i); // numeric tail: keep the last index
        }
        out.push_back(pick);
        if (eos_id >= 0 && pick == eos_id) break;
    }
    return out;
}

// ---------------------------------------------------------------------------
// bundle-aware scorers

// Dense prefix vectors for explicit latent ids (natural code order, position
// 0 first), matching what eval-mode compression would produce for a sequence
// with that code.
inline DiffArray latent_prefix_vectors(const AugmentedModelBundle& bundle, const std::vector<int>& ids) {
    if (ids.empty()) throw ConfigError("decode: empty latent id list");
    const int vocab = bundle.latent_vocab();
    for (int id : ids)
        if (id < 0 || id >= vocab)
            throw RangeError("decode: latent id " + std::to_string(id) + " outside [0, " +
                             std::to_string(vocab) + ")");
    const int L = static_cast<int>(ids.size());
    NoGradGuard ng;
    if (bundle.comp_cfg.bottleneck == BottleneckKind::semhash) {
        const int bits = bundle.comp_cfg.semhash.bits;
        DiscreteCode code = DiscreteCode::from_ids(bits, ids);
        std::vector<float> vd(code.bits.begin(), code.bits.end());
        DiffArray dense = DiffArray::constant({1, L, bits}, std::move(vd));
        return bit_decode_network(dense, bundle.compressor.semhash, bundle.comp_cfg.semhash);
    }
    return embedding(bundle.compressor.gumbel.embedding, ids, {1, L});
}

// Everything up to and including the separator: [source+boundary,]
// reversed latent, separator. Built by the same assembly as training.
inline DiffArray decode_prefix(const AugmentedModelBundle& bundle, const std::vector<int>& latent_ids,
                               const std::vector<int>* source) {
    NoGradGuard ng;
    DiffArray lat = latent_prefix_vectors(bundle, latent_ids);
    DiffArray empty_s = DiffArray::zeros({1, 0, bundle.main_cfg.hidden_size});
    if (source != nullptr && !source->empty()) {
        detail::check_vocab(*source, bundle.main_cfg.vocab_size, "source token");
        auto src_plus = detail::with_boundary(*source, 1, static_cast<int>(source->size()));
        DiffArray e_src = embed_tokens(bundle.main_model.embedding, src_plus,
                                       {1, static_cast<int>(source->size()) + 1});
        return build_augmented_input(lat, empty_s, bundle.separator, &e_src).input;
    }
    return build_augmented_input(lat, empty_s, bundle.separator).input;
}

namespace detail {

inline std::vector<float> last_position_logits(const DiffArray& logits) {
    const int T = logits.dim(1), V = logits.dim(2);
    std::vector<float> out(static_cast<std::size_t>(V));
    std::copy(logits.data() + static_cast<std::size_t>(T - 1) * V,
              logits.data() + static_cast<std::size_t>(T) * V, out.begin());
    return out;
}

} // namespace detail

// Scores s under the main model, conditioned on a fixed embedded prefix.
inline StepScorer augmented_scorer(const AugmentedModelBundle& bundle, DiffArray prefix) {
    return [&bundle, prefix](const std::vector<int>& chosen) {
        NoGradGuard ng;
        DiffArray input = prefix;
        if (!chosen.empty()) {
            DiffArray e = embed_tokens(bundle.main_model.embedding, chosen,
                                       {1, static_cast<int>(chosen.size())});
            input = concat_time(prefix, e);
        }
        DiffArray logits = transformer_forward(input, bundle.main_cfg, bundle.main_model);
        return detail::last_position_logits(logits);
    };
}

// Scores latent ids under the latent predictor (prefix-order codes).
inline StepScorer latent_scorer(const AugmentedModelBundle& bundle, const std::vector<int>* source) {
    DiffArray prefix;
    if (source != nullptr && !source->empty()) {
        NoGradGuard ng;
        detail::check_vocab(*source, bundle.main_cfg.vocab_size, "source token");
        auto src_plus = detail::with_boundary(*source, 1, static_cast<int>(source->size()));
        prefix = embed_tokens(bundle.latpred_src_embedding, src_plus,
                              {1, static_cast<int>(source->size()) + 1});
    } else {
        prefix = tile_row(bundle.latpred_start, 1);
    }
    return [&bundle, prefix](const std::vector<int>& chosen) {
        NoGradGuard ng;
        DiffArray input = prefix;
        if (!chosen.empty()) {
            DiffArray e = embed_tokens(bundle.latent_predictor.embedding, chosen,
                                       {1, static_cast<int>(chosen.size())});
            input = concat_time(prefix, e);
        }
        DiffArray logits = transformer_forward(input, bundle.latent_cfg, bundle.latent_predictor);
        return detail::last_position_logits(logits);
    };
}

// ---------------------------------------------------------------------------
// the mixed procedure and the latent-override probe

struct MixedDecodeConfig {
    float latent_temperature = 1.0f;
    int num_samples = 1;
    int latent_len = 0; // unconditional runs must set this; conditional ones may
    BeamConfig beam;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(latent_temperature > 0.0f)) throw ConfigError("mixed decode: latent_temperature must be > 0");
        if (num_samples < 1) throw ConfigError("mixed decode: num_samples must be >= 1");
        beam.validate();
    }
};

struct MixedSample {
    std::vector<int> latent_ids; // natural code order, ready for re-decoding
    std::vector<int> ids;
    double score = 0.0;
};

inline DecodeResult latent_override_decode(const AugmentedModelBundle& bundle,
                                           const std::vector<int>& latent_ids, const BeamConfig& cfg,
                                           const std::vector<int>* source = nullptr) {
    DiffArray prefix = decode_prefix(bundle, latent_ids, source);
    // generation can never run past the position table
    const int room = bundle.main_cfg.max_len - prefix.dim(1);
    if (room < 1)
        throw ConfigError("decode: the prefix alone fills the model's max_len " +
                          std::to_string(bundle.main_cfg.max_len));
    BeamConfig capped = cfg;
    capped.max_steps = std::min(cfg.max_steps, room);
    return beam_search(augmented_scorer(bundle, prefix), bundle.main_cfg.vocab_size, capped);
}

inline std::vector<MixedSample> mixed_sample_beam(const AugmentedModelBundle& bundle,
                                                  const std::vector<int>* source,
                                                  const MixedDecodeConfig& cfg) {
    cfg.validate();
    if (bundle.step < bundle.comp_cfg.pretrain_steps)
        throw StateError("mixed decode: model is still in the bypass phase, no discrete code exists yet");
    int L = cfg.latent_len;
    if (L < 1 && source != nullptr && !source->empty())
        L = (static_cast<int>(source->size()) + bundle.comp_cfg.K() - 1) / bundle.comp_cfg.K();
    if (L < 1) throw ConfigError("mixed decode: latent_len must be set for unconditional decoding");

    StepScorer lat = latent_scorer(bundle, source);
    std::vector<MixedSample> out;
    for (int s = 0; s < cfg.num_samples; ++s) {
        RngState rng(RngState::derive(cfg.seed, static_cast<std::uint64_t>(s)));
        MixedSample m;
        // the predictor emits codes in the order they appear as a prefix,
        // i.e. reversed; flip back to natural order for decoding
        m.latent_ids = sample_tokens(lat, bundle.latent_vocab(), cfg.latent_temperature, L, -1, rng);
        std::reverse(m.latent_ids.begin(), m.latent_ids.end());
        DecodeResult r = latent_override_decode(bundle, m.latent_ids, cfg.beam, source);
        m.ids = std::move(r.ids);
        m.score = r.score;
        out.push_back(std::move(m));
    }
    return out;
}

} // namespace dsqa
