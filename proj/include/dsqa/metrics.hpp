#pragma once

// Perplexity bookkeeping and the discrete-sequence autoencoding efficiency
// score: the fraction of the latent code's bit budget that shows up as a
// drop in the sequence model's per-token entropy.

#include <algorithm>
#include <cmath>
#include <string>

#include "dsqa/common.hpp"

namespace dsqa {

struct DsaeReport {
    double ln_p = 0.0;       // baseline, nats per token
    double ln_p_prime = 0.0; // augmented, nats per token
    int K = 1;               // compression factor
    int b = 1;               // bits per latent symbol
    double dsae_raw = 0.0;
    double dsae_clamped = 0.0;
    bool overcapacity = false;
};

// dsae_raw = K (ln p - ln p') / (b ln 2). Negative raw values are kept (the
// code can hurt the model); the clamped field is what tables display.
inline DsaeReport dsae(double ln_p, double ln_p_prime, int K, int b) {
    if (K < 1) throw ConfigError("dsae: K must be >= 1, got " + std::to_string(K));
    if (b < 1) throw ConfigError("dsae: b must be >= 1, got " + std::to_string(b));
    if (!(ln_p > 0.0) || !(ln_p_prime > 0.0))
        throw DomainError("dsae: ln-perplexities must be positive, got ln_p=" + std::to_string(ln_p) +
                          " ln_p'=" + std::to_string(ln_p_prime));
    DsaeReport r;
    r.ln_p = ln_p;
    r.ln_p_prime = ln_p_prime;
    r.K = K;
    r.b = b;
    r.dsae_raw = K * (ln_p - ln_p_prime) / (b * std::log(2.0));
    r.dsae_clamped = std::max(0.0, r.dsae_raw);
    // strictly more bits per token than the baseline needs: a perfect score
    // is unreachable no matter how good the code is
    r.overcapacity = static_cast<double>(b) / K > ln_p / std::log(2.0);
    return r;
}

inline double nll_to_perplexity(double nll) {
    if (nll < 0.0) throw DomainError("perplexity: nll must be >= 0, got " + std::to_string(nll));
    return std::exp(nll);
}

inline double nats_to_bits(double nats) { return nats / std::log(2.0); }

} // namespace dsqa
