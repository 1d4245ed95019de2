#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "dsqa/array.hpp"
#include "dsqa/common.hpp"
#include "dsqa/rng.hpp"

namespace dsqa {

// A named persistent leaf plus its Adam moments. The DiffArray node lives
// across steps; each step zeroes grads, records a fresh graph and updates
// the values in place.
struct Parameter {
    std::string name;
    DiffArray array;
    std::vector<float> m;
    std::vector<float> v;

    Parameter(std::string n, DiffArray a)
        : name(std::move(n)), array(std::move(a)), m(array.size(), 0.0f), v(array.size(), 0.0f) {}
};

class ParamStore {
public:
    DiffArray add(const std::string& name, Shape shape, std::vector<float> values) {
        if (index_.count(name)) throw StateError("parameter registered twice: " + name);
        auto p = std::make_shared<Parameter>(name, DiffArray::leaf(std::move(shape), std::move(values)));
        index_[name] = params_.size();
        params_.push_back(std::move(p));
        return params_.back()->array;
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    Parameter& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw StateError("unknown parameter: " + name);
        return *params_[it->second];
    }

    const std::vector<std::shared_ptr<Parameter>>& all() const { return params_; }

    void zero_grad() {
        for (auto& p : params_) p->array.zero_grad();
    }

    std::size_t total_size() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p->array.size();
        return n;
    }

private:
    std::vector<std::shared_ptr<Parameter>> params_;
    std::unordered_map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// initializers

inline std::vector<float> glorot_uniform(RngState& rng, int fan_in, int fan_out, std::int64_t count) {
    const float limit = std::sqrt(6.0f / static_cast<float>(fan_in + fan_out));
    std::vector<float> out(static_cast<std::size_t>(count));
    for (auto& v : out) v = limit * (2.0f * static_cast<float>(rng.u01()) - 1.0f);
    return out;
}

inline std::vector<float> const_fill(std::int64_t count, float value) {
    return std::vector<float>(static_cast<std::size_t>(count), value);
}

// ---------------------------------------------------------------------------
// Adam with bias correction

struct AdamConfig {
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float epsilon = 1e-8f;
};

// Applies one update to a single parameter from its accumulated gradient.
// step is 1-based.
inline void adam_step(Parameter& p, float lr, const AdamConfig& cfg, std::int64_t step) {
    if (step < 1) throw ConfigError("adam_step: step must be >= 1, got " + std::to_string(step));
    const float bc1 = 1.0f - std::pow(cfg.beta1, static_cast<float>(step));
    const float bc2 = 1.0f - std::pow(cfg.beta2, static_cast<float>(step));
    float* w = p.array.data();
    for (std::size_t i = 0; i < p.array.size(); ++i) {
        const float g = p.array.grad_at(i);
        p.m[i] = cfg.beta1 * p.m[i] + (1.0f - cfg.beta1) * g;
        p.v[i] = cfg.beta2 * p.v[i] + (1.0f - cfg.beta2) * g * g;
        const float mhat = p.m[i] / bc1;
        const float vhat = p.v[i] / bc2;
        w[i] -= lr * mhat / (std::sqrt(vhat) + cfg.epsilon);
    }
}

inline void adam_step(ParamStore& store, float lr, const AdamConfig& cfg, std::int64_t step) {
    for (auto& p : store.all()) adam_step(*p, lr, cfg, step);
}

// Linear warmup to base_lr at `warmup`, then inverse square root decay.
inline float warmup_rsqrt_lr(float base_lr, std::int64_t warmup, std::int64_t step) {
    if (warmup < 1) throw ConfigError("warmup_rsqrt_lr: warmup must be >= 1");
    if (step < 1) throw ConfigError("warmup_rsqrt_lr: step must be >= 1");
    const float s = static_cast<float>(step);
    const float w = static_cast<float>(warmup);
    return base_lr * std::min(s / w, std::sqrt(w / s));
}

} // namespace dsqa
