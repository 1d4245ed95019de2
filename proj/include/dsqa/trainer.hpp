#pragma once

// The training loop: deterministic end to end. Batches are a pure function
// of (corpus, seed, step); the forward rng stream, Adam moments and step
// counter all live in the checkpoint, so save -> load -> continue is
// bit-identical to an uninterrupted run. Steps are indexed from 0; the
// checkpoint stores the number of completed steps.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <string>

#include <fcntl.h>
#include <unistd.h>

#include "json.hpp"

#include "dsqa/checkpoint.hpp"
#include "dsqa/config.hpp"
#include "dsqa/data.hpp"
#include "dsqa/seqmodel.hpp"

namespace dsqa {

// One training process owns an output directory; eval and decode commands
// read checkpoints without taking the lock.
class OutputLock {
public:
    explicit OutputLock(const std::string& dir) {
        std::filesystem::create_directories(dir);
        path_ = dir + "/lock";
        fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd_ < 0)
            throw StateError("another training process owns " + dir + " (remove " + path_ +
                             " if it is stale)");
        const std::string pid = std::to_string(::getpid()) + "\n";
        [[maybe_unused]] ssize_t n = ::write(fd_, pid.data(), pid.size());
    }

    ~OutputLock() {
        if (fd_ >= 0) {
            ::close(fd_);
            ::unlink(path_.c_str());
        }
    }

    OutputLock(const OutputLock&) = delete;
    OutputLock& operator=(const OutputLock&) = delete;

private:
    std::string path_;
    int fd_ = -1;
};

struct StepMetrics {
    std::int64_t step = 0; // index of the executed step
    float sequence_nll = 0.0f;
    float latent_nll = 0.0f;
    float total = 0.0f;
    std::string phase;
    double wall_ms = 0.0;
};

class MetricsLog {
public:
    MetricsLog() = default;
    MetricsLog(const std::string& path, bool append) {
        out_.open(path, std::ios::binary | (append ? std::ios::app : std::ios::trunc));
        if (!out_) throw DataError("metrics: cannot write " + path);
    }

    void write(const StepMetrics& m) {
        nlohmann::json j;
        j["step"] = m.step;
        j["sequence_nll"] = m.sequence_nll;
        j["latent_nll"] = m.latent_nll;
        j["total_loss"] = m.total;
        j["phase"] = m.phase;
        j["wall_ms"] = m.wall_ms;
        out_ << j.dump() << "\n";
        out_.flush();
    }

private:
    std::ofstream out_;
};

class Trainer {
public:
    explicit Trainer(RunConfig cfg) : cfg_(std::move(cfg)) {
        cfg_.validate();
        // the corpus lives on the heap so the batcher's pointer into it
        // survives moving the trainer
        corpus_ = std::make_unique<Corpus>(load_corpus(cfg_.corpus));
        cfg_.transformer.vocab_size = corpus_->vocab.size();
        config_text_ = serialize_run_config(cfg_);
        check_length_budget();

        RngState init_rng(RngState::derive(cfg_.train.seed, 0xA1));
        if (cfg_.model == ModelKind::augmented) {
            bundle_ = AugmentedModelBundle::create(cfg_.compressor, cfg_.transformer,
                                                   cfg_.latent_loss_weight, store_, init_rng);
        } else {
            baseline_ = TransformerParams::create(store_, "baseline", cfg_.transformer, init_rng);
        }
        train_rng_ = RngState(RngState::derive(cfg_.train.seed, 0xA2));
        train_batcher_.emplace(*corpus_, Split::train, cfg_.train.batch_size, cfg_.train.max_seq_len,
                               batch_multiple(), RngState::derive(cfg_.train.seed, 0xA3));
    }

    Trainer(Trainer&&) = default;
    Trainer& operator=(Trainer&&) = default;

    const RunConfig& config() const { return cfg_; }
    const std::string& config_text() const { return config_text_; }
    const Corpus& corpus() const { return *corpus_; }
    ParamStore& store() { return store_; }
    std::int64_t step() const { return step_; }
    std::int64_t batches_per_epoch() const { return train_batcher_->batches_per_epoch(); }

    AugmentedModelBundle& bundle() {
        if (cfg_.model != ModelKind::augmented) throw StateError("trainer: run is a baseline model");
        return bundle_;
    }

    StepMetrics train_step() {
        const auto t0 = std::chrono::steady_clock::now();
        const std::int64_t s = step_;
        const SequenceBatch batch = train_batcher_->at(s);
        store_.zero_grad();

        StepMetrics m;
        m.step = s;
        DiffArray loss;
        if (cfg_.model == ModelKind::augmented) {
            ForwardStats st = forward_train(batch, bundle_, s, &train_rng_);
            loss = st.total;
            m.sequence_nll = st.seq_nll.data()[0];
            m.latent_nll = st.latent_nll.data()[0];
            m.phase = st.bypassed ? "bypass" : "bottleneck";
        } else {
            loss = baseline_nll(batch, cfg_.transformer, baseline_, Mode::train, &train_rng_);
            m.sequence_nll = loss.data()[0];
            m.phase = "baseline";
        }
        m.total = loss.data()[0];
        if (!std::isfinite(m.total) || !std::isfinite(m.sequence_nll) || !std::isfinite(m.latent_nll))
            throw NumericError("training: non-finite loss at step " + std::to_string(s) +
                               "; the last checkpoint is retained");
        backward(loss);
        const float lr = warmup_rsqrt_lr(cfg_.optimizer.learning_rate, cfg_.optimizer.warmup_steps, s + 1);
        adam_step(store_, lr, cfg_.optimizer.adam, s + 1);

        step_ = s + 1;
        bundle_.step = step_;
        m.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        return m;
    }

    // Runs to total_steps, writing the rolling checkpoint on the interval and
    // at the end. A non-finite loss aborts before any further save, so the
    // file on disk is always the last good state.
    void run(MetricsLog* log, const std::string& checkpoint_path) {
        while (step_ < cfg_.train.total_steps) {
            StepMetrics m = train_step();
            if (log) log->write(m);
            if (!checkpoint_path.empty() &&
                (step_ % cfg_.train.checkpoint_interval == 0 || step_ == cfg_.train.total_steps)) {
                ensure_finite_parameters();
                save(checkpoint_path);
            }
        }
    }

    // Mask-weighted held-out nll per token of s, in nats, over every full
    // batch of the split.
    double evaluate(Split split) {
        NoGradGuard ng;
        Batcher batcher = eval_batcher(split);
        double total = 0.0, count = 0.0;
        for (std::int64_t t = 0; t < batcher.batches_per_epoch(); ++t) {
            const SequenceBatch batch = batcher.at(t);
            double n = 0.0;
            for (float v : batch.mask) n += v;
            float nll;
            if (cfg_.model == ModelKind::augmented)
                nll = forward_pass(batch, bundle_, step_, nullptr, Mode::eval).seq_nll.data()[0];
            else
                nll = baseline_nll(batch, cfg_.transformer, baseline_, Mode::eval, nullptr).data()[0];
            total += static_cast<double>(nll) * n;
            count += n;
        }
        return total / count;
    }

    void save(const std::string& path) const {
        save_checkpoint(path, config_text_, step_, train_rng_, store_);
    }

    void load(const std::string& path) {
        CheckpointMeta meta = read_checkpoint_meta(path);
        if (comparable(parse_run_config(meta.config_text)) != comparable(cfg_))
            throw ConfigError("checkpoint: " + path + " was written by a different configuration");
        load_checkpoint(path, store_);
        step_ = meta.step;
        bundle_.step = step_;
        train_rng_.restore(meta.rng_seed, meta.rng_position);
    }

    // Rebuilds the exact model a checkpoint was trained with, then loads it.
    static Trainer resume(const std::string& checkpoint_path) {
        CheckpointMeta meta = read_checkpoint_meta(checkpoint_path);
        Trainer t(parse_run_config(meta.config_text));
        t.load(checkpoint_path);
        return t;
    }

private:
    // Baseline runs keep the augmented run's batch padding so a paired
    // comparison sees byte-identical batches; the padding is masked out.
    int batch_multiple() const {
        const int k = cfg_.compressor.k;
        return k >= 1 && k <= 10 ? (1 << k) : 1;
    }

    // total_steps and output_dir may differ between saving and resuming; the
    // model-defining keys may not.
    static std::string comparable(RunConfig c) {
        c.train.total_steps = 1;
        c.train.output_dir = "-";
        return serialize_run_config(c);
    }

    Batcher eval_batcher(Split split) const {
        const std::uint64_t seed = RngState::derive(cfg_.train.seed, 0xA4);
        try {
            return Batcher(*corpus_, split, cfg_.train.batch_size, cfg_.train.max_seq_len,
                           batch_multiple(), seed);
        } catch (const DataError&) {
            // split smaller than the batch size: fall back to single rows
            return Batcher(*corpus_, split, 1, cfg_.train.max_seq_len, batch_multiple(), seed);
        }
    }

    void check_length_budget() const {
        const int K = batch_multiple();
        int longest = 0, s_max = 0;
        for (const auto* split : {&corpus_->train, &corpus_->valid})
            for (const auto& seq : *split)
                longest = std::max(longest, std::min<int>(cfg_.train.max_seq_len, static_cast<int>(seq.size())));
        for (const auto* split : {&corpus_->train_src, &corpus_->valid_src})
            for (const auto& src : *split) s_max = std::max(s_max, static_cast<int>(src.size()));
        const int n_hi = (longest + 1 + K - 1) / K * K;
        // augmented layout: [src+boundary?, code, separator, s]; baseline:
        // [eos | src+boundary, first n_hi-1 tokens]
        const int need = cfg_.model == ModelKind::augmented
                             ? (corpus_->conditional ? s_max + 1 : 0) + n_hi / K + 1 + n_hi
                             : (corpus_->conditional ? s_max + 1 : 1) + n_hi - 1;
        if (need > cfg_.transformer.max_len)
            throw ConfigError("trainer: longest batch needs " + std::to_string(need) +
                              " positions but transformer.max_len is " +
                              std::to_string(cfg_.transformer.max_len));
    }

    void ensure_finite_parameters() const {
        for (const auto& p : store_.all())
            for (std::size_t i = 0; i < p->array.size(); ++i)
                if (!std::isfinite(p->array.data()[i]))
                    throw NumericError("training: non-finite parameter " + p->name + " at step " +
                                       std::to_string(step_) + "; the last checkpoint is retained");
    }

    RunConfig cfg_;
    std::unique_ptr<Corpus> corpus_;
    std::string config_text_;
    ParamStore store_;
    AugmentedModelBundle bundle_;
    TransformerParams baseline_;
    RngState train_rng_;
    std::optional<Batcher> train_batcher_;
    std::int64_t step_ = 0;
};

} // namespace dsqa
