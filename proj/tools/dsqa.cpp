// Command-line front end: train, eval, noise-sweep, sample, decode-mixed,
// inspect-latents. Every failure prints one machine-parseable line
// (error[<code>]: message) and exits 2/3/4 for config/data/numeric errors.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "dsqa/dsqa.hpp"

namespace {

using nlohmann::json;

int exit_for(const dsqa::Error& e) {
    if (e.code() == "config") return 2;
    if (e.code() == "data") return 3;
    if (e.code() == "numeric") return 4;
    return 1;
}

std::vector<std::string> split_commas(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : text) {
        if (ch == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (!std::isspace(static_cast<unsigned char>(ch))) {
            cur.push_back(ch);
        }
    }
    out.push_back(cur);
    return out;
}

std::vector<int> parse_id_list(const std::string& text) {
    std::vector<int> out;
    for (const std::string& piece : split_commas(text)) {
        int v = 0;
        auto [p, ec] = std::from_chars(piece.data(), piece.data() + piece.size(), v);
        if (ec != std::errc() || p != piece.data() + piece.size())
            throw dsqa::ConfigError("--ids: '" + piece + "' is not an integer");
        out.push_back(v);
    }
    return out;
}

std::vector<double> parse_sigma_list(const std::string& text) {
    std::vector<double> out;
    for (const std::string& piece : split_commas(text)) {
        try {
            std::size_t used = 0;
            const double v = std::stod(piece, &used);
            if (used == piece.size() && v >= 0.0) {
                out.push_back(v);
                continue;
            }
        } catch (const std::exception&) {
        }
        throw dsqa::ConfigError("--sigmas: '" + piece + "' is not a non-negative number");
    }
    return out;
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << text;
    if (!out) throw dsqa::DataError("output: cannot write " + path);
}

// Decode records go to stdout and to the output file, identical JSON lines.
class RecordWriter {
public:
    explicit RecordWriter(const std::string& path) : out_(path, std::ios::binary | std::ios::trunc) {
        if (!out_) throw dsqa::DataError("output: cannot write " + path);
    }

    void emit(const json& j) {
        const std::string line = j.dump();
        std::fputs(line.c_str(), stdout);
        std::fputc('\n', stdout);
        out_ << line << '\n';
        out_.flush();
        if (!out_) throw dsqa::DataError("output: write failed");
    }

private:
    std::ofstream out_;
};

int code_bits(const dsqa::CompressorConfig& c) {
    if (c.bottleneck == dsqa::BottleneckKind::semhash) return c.semhash.bits;
    return dsqa::id_bit_width(c.gumbel.num_symbols);
}

json report_json(const dsqa::DsaeReport& r) {
    return json{{"ln_p", r.ln_p},          {"ln_p_prime", r.ln_p_prime},
                {"K", r.K},                {"b", r.b},
                {"dsae_raw", r.dsae_raw},  {"dsae", r.dsae_clamped},
                {"overcapacity", r.overcapacity}};
}

void print_report(const dsqa::DsaeReport& r) {
    std::printf("K=%-3d b=%-3d ln_p=%.4f ln_p'=%.4f DSAE=%5.1f%%%s\n", r.K, r.b, r.ln_p,
                r.ln_p_prime, 100.0 * r.dsae_clamped, r.overcapacity ? "  [overcapacity]" : "");
    std::printf("%s\n", report_json(r).dump().c_str());
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
    std::string config;
    bool resume = false;
    std::string resume_from;
};

int cmd_train(const TrainArgs& a) {
    dsqa::RunConfig cfg = dsqa::load_run_config(a.config);
    const bool seeded = dsqa::apply_env_seed(cfg);
    cfg.validate();

    std::filesystem::create_directories(cfg.train.output_dir);
    dsqa::OutputLock lock(cfg.train.output_dir);

    const std::string rolling = cfg.train.output_dir + "/checkpoint.ckpt";
    std::string from = a.resume_from;
    if (from.empty() && a.resume) from = rolling;

    dsqa::Trainer trainer(cfg);
    if (!from.empty()) trainer.load(from);
    write_text_file(cfg.train.output_dir + "/config.txt", trainer.config_text());

    dsqa::MetricsLog log(cfg.train.output_dir + "/metrics.jsonl", /*append=*/!from.empty());

    if (seeded) std::printf("seed %llu (DSQA_SEED)\n", static_cast<unsigned long long>(cfg.train.seed));
    std::printf("training in %s: step %lld -> %lld\n", cfg.train.output_dir.c_str(),
                static_cast<long long>(trainer.step()), static_cast<long long>(cfg.train.total_steps));
    std::fflush(stdout);
    trainer.run(&log, rolling);
    std::printf("done at step %lld; checkpoint %s\n", static_cast<long long>(trainer.step()),
                rolling.c_str());
    return 0;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
    bool offline = false;
    double ln_p = 0.0;
    double ln_p_prime = 0.0;
    int K = 0;
    int bits = 0;
    std::string checkpoint;
    std::string baseline;
    double baseline_nll = 0.0;
    bool baseline_nll_given = false;
    std::string split = "valid";
};

int cmd_eval(const EvalArgs& a) {
    if (a.offline) {
        print_report(dsqa::dsae(a.ln_p, a.ln_p_prime, a.K, a.bits));
        return 0;
    }

    dsqa::Trainer aug = dsqa::Trainer::resume(a.checkpoint);
    if (aug.config().model != dsqa::ModelKind::augmented)
        throw dsqa::ConfigError("eval: --checkpoint must be an augmented run, got a baseline one");
    if (aug.step() < aug.config().compressor.pretrain_steps)
        throw dsqa::StateError("eval: checkpoint at step " + std::to_string(aug.step()) +
                               " is still in the bypass phase (pretrain_steps " +
                               std::to_string(aug.config().compressor.pretrain_steps) +
                               "); no discrete code exists to score");

    const dsqa::Split split = a.split == "train" ? dsqa::Split::train : dsqa::Split::valid;
    const double ln_p_prime = aug.evaluate(split);

    double ln_p = a.baseline_nll;
    if (!a.baseline.empty()) {
        dsqa::Trainer base = dsqa::Trainer::resume(a.baseline);
        if (base.config().model != dsqa::ModelKind::baseline)
            throw dsqa::ConfigError("eval: --baseline must be a baseline run, got an augmented one");
        if (base.corpus().vocab.hash() != aug.corpus().vocab.hash())
            throw dsqa::DataError("eval: the baseline and augmented runs use different corpora");
        ln_p = base.evaluate(split);
    }

    print_report(dsqa::dsae(ln_p, ln_p_prime, aug.config().compressor.K(),
                            code_bits(aug.config().compressor)));
    return 0;
}

// ---------------------------------------------------------------------------
// noise-sweep

struct SweepArgs {
    std::string config;
    std::string sigmas;
    std::string out;
};

double train_to_valid_nll(dsqa::RunConfig cfg) {
    std::filesystem::create_directories(cfg.train.output_dir);
    dsqa::OutputLock lock(cfg.train.output_dir);
    dsqa::Trainer trainer(cfg);
    write_text_file(cfg.train.output_dir + "/config.txt", trainer.config_text());
    dsqa::MetricsLog log(cfg.train.output_dir + "/metrics.jsonl", false);
    trainer.run(&log, cfg.train.output_dir + "/checkpoint.ckpt");
    return trainer.evaluate(dsqa::Split::valid);
}

int cmd_noise_sweep(const SweepArgs& a) {
    dsqa::RunConfig cfg = dsqa::load_run_config(a.config);
    dsqa::apply_env_seed(cfg);
    cfg.validate();
    if (cfg.model != dsqa::ModelKind::augmented)
        throw dsqa::ConfigError("noise-sweep: the config must describe an augmented run");
    if (cfg.compressor.bottleneck != dsqa::BottleneckKind::semhash)
        throw dsqa::ConfigError("noise-sweep: sweeping binarization noise needs the semhash bottleneck");
    const std::vector<double> sigmas = parse_sigma_list(a.sigmas);

    const std::string root = cfg.train.output_dir;

    dsqa::RunConfig bl = cfg;
    bl.model = dsqa::ModelKind::baseline;
    bl.train.output_dir = root + "/baseline";
    std::printf("baseline: %lld steps in %s\n", static_cast<long long>(bl.train.total_steps),
                bl.train.output_dir.c_str());
    std::fflush(stdout);
    const double ln_p = train_to_valid_nll(bl);
    std::printf("baseline ln_p = %.6f\n", ln_p);

    std::string csv = "sigma,ln_p,ln_p_prime,dsae_raw,dsae,overcapacity\n";
    std::fputs(csv.c_str(), stdout);
    std::fflush(stdout);
    for (double sigma : sigmas) {
        dsqa::RunConfig rc = cfg;
        rc.compressor.semhash.noise_sigma = static_cast<float>(sigma);
        char tag[32];
        std::snprintf(tag, sizeof tag, "%g", sigma);
        rc.train.output_dir = root + "/sigma_" + tag;
        const double ln_p_prime = train_to_valid_nll(rc);
        const dsqa::DsaeReport r =
            dsqa::dsae(ln_p, ln_p_prime, cfg.compressor.K(), cfg.compressor.semhash.bits);
        char line[192];
        std::snprintf(line, sizeof line, "%g,%.6f,%.6f,%.6f,%.6f,%d\n", sigma, r.ln_p, r.ln_p_prime,
                      r.dsae_raw, r.dsae_clamped, r.overcapacity ? 1 : 0);
        csv += line;
        std::fputs(line, stdout);
        std::fflush(stdout);
    }
    write_text_file(a.out, csv);
    return 0;
}

// ---------------------------------------------------------------------------
// decode commands

struct DecodeArgs {
    std::string checkpoint;
    std::string out;
    std::string source;
    bool source_given = false;
    std::string ids;
    int samples = 1;
    std::uint64_t seed = 1;
    int latent_len = 0;       // 0: derive from the source length
    float temperature = 0.0f; // <= 0: config default
    float token_temperature = 1.0f;
    int beam_width = 0; // <= 0: config default
    int max_steps = 0;  // <= 0: config default
    float alpha = -1.0f; // < 0: config default
};

dsqa::Trainer open_augmented(const std::string& checkpoint) {
    dsqa::Trainer t = dsqa::Trainer::resume(checkpoint);
    if (t.config().model != dsqa::ModelKind::augmented)
        throw dsqa::ConfigError("decode: " + checkpoint + " is a baseline run; decoding needs an augmented one");
    if (t.step() < t.config().compressor.pretrain_steps)
        throw dsqa::StateError("decode: checkpoint at step " + std::to_string(t.step()) +
                               " is still in the bypass phase (pretrain_steps " +
                               std::to_string(t.config().compressor.pretrain_steps) +
                               "); no discrete code exists yet");
    return t;
}

std::vector<int> encode_source(const dsqa::Trainer& t, const DecodeArgs& a) {
    if (t.corpus().conditional) {
        if (!a.source_given)
            throw dsqa::ConfigError("decode: this model conditions on a source; pass --source");
        std::vector<int> ids = t.corpus().vocab.encode(a.source);
        if (ids.empty()) throw dsqa::DataError("decode: --source text encodes to no tokens");
        return ids;
    }
    if (a.source_given)
        throw dsqa::ConfigError("decode: this model is unconditional; --source does not apply");
    return {};
}

dsqa::BeamConfig beam_from(const dsqa::RunConfig& cfg, const DecodeArgs& a) {
    dsqa::BeamConfig b = cfg.decode.beam;
    if (a.beam_width > 0) b.width = a.beam_width;
    if (a.max_steps > 0) b.max_steps = a.max_steps;
    if (a.alpha >= 0.0f) b.length_normalization_alpha = a.alpha;
    b.validate();
    return b;
}

int cmd_sample(const DecodeArgs& a) {
    dsqa::Trainer t = open_augmented(a.checkpoint);
    const std::vector<int> source_ids = encode_source(t, a);
    const std::vector<int>* src = source_ids.empty() ? nullptr : &source_ids;
    dsqa::AugmentedModelBundle& bundle = t.bundle();

    const int K = t.config().compressor.K();
    int L = a.latent_len;
    if (L < 1 && src != nullptr) L = (static_cast<int>(src->size()) + K - 1) / K;
    if (L < 1) throw dsqa::ConfigError("sample: --latent-len is required for unconditional models");

    const float lat_temp = a.temperature > 0.0f ? a.temperature : t.config().decode.latent_temperature;
    const int max_steps = a.max_steps > 0 ? a.max_steps : t.config().decode.beam.max_steps;

    const dsqa::StepScorer lat = dsqa::latent_scorer(bundle, src);
    RecordWriter w(a.out);
    for (int s = 0; s < a.samples; ++s) {
        dsqa::RngState rng(dsqa::RngState::derive(a.seed, static_cast<std::uint64_t>(s)));
        std::vector<int> latent =
            dsqa::sample_tokens(lat, bundle.latent_vocab(), lat_temp, L, -1, rng);
        std::reverse(latent.begin(), latent.end());
        dsqa::DiffArray prefix = dsqa::decode_prefix(bundle, latent, src);
        const int room = bundle.main_cfg.max_len - prefix.dim(1);
        if (room < 1)
            throw dsqa::ConfigError("sample: the prefix alone fills the model's max_len " +
                                    std::to_string(bundle.main_cfg.max_len));
        const std::vector<int> toks = dsqa::sample_tokens(
            dsqa::augmented_scorer(bundle, prefix), bundle.main_cfg.vocab_size,
            a.token_temperature, std::min(max_steps, room), dsqa::tokens::EOS, rng);
        w.emit(json{{"sample", s},
                    {"latent_ids", latent},
                    {"token_ids", toks},
                    {"text", t.corpus().vocab.decode(toks)}});
    }
    return 0;
}

int cmd_decode_mixed(const DecodeArgs& a) {
    dsqa::Trainer t = open_augmented(a.checkpoint);
    const std::vector<int> source_ids = encode_source(t, a);
    const std::vector<int>* src = source_ids.empty() ? nullptr : &source_ids;
    dsqa::AugmentedModelBundle& bundle = t.bundle();

    dsqa::MixedDecodeConfig mc;
    mc.latent_temperature =
        a.temperature > 0.0f ? a.temperature : t.config().decode.latent_temperature;
    mc.num_samples = a.samples;
    mc.latent_len = a.latent_len;
    mc.beam = beam_from(t.config(), a);
    mc.seed = a.seed;

    const std::vector<dsqa::MixedSample> samples = dsqa::mixed_sample_beam(bundle, src, mc);
    RecordWriter w(a.out);
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const dsqa::MixedSample& m = samples[i];
        w.emit(json{{"sample", i},
                    {"latent_ids", m.latent_ids},
                    {"token_ids", m.ids},
                    {"text", t.corpus().vocab.decode(m.ids)},
                    {"score", m.score}});
    }
    return 0;
}

int cmd_inspect_latents(const DecodeArgs& a) {
    dsqa::Trainer t = open_augmented(a.checkpoint);
    const std::vector<int> source_ids = encode_source(t, a);
    const std::vector<int>* src = source_ids.empty() ? nullptr : &source_ids;
    const std::vector<int> ids = parse_id_list(a.ids);

    const dsqa::DecodeResult r =
        dsqa::latent_override_decode(t.bundle(), ids, beam_from(t.config(), a), src);
    RecordWriter w(a.out);
    w.emit(json{{"latent_ids", ids},
                {"token_ids", r.ids},
                {"text", t.corpus().vocab.decode(r.ids)},
                {"score", r.score}});
    return 0;
}

void add_decode_flags(CLI::App* cmd, DecodeArgs& a, bool stochastic) {
    cmd->add_option("--checkpoint", a.checkpoint, "checkpoint of an augmented run")->required();
    cmd->add_option("--out", a.out, "output file for the JSON records")->required();
    cmd->add_option("--source", a.source, "source text for conditional models");
    if (stochastic) {
        cmd->add_option("--samples", a.samples, "number of samples")->check(CLI::PositiveNumber);
        cmd->add_option("--seed", a.seed, "sampling seed");
        cmd->add_option("--latent-len", a.latent_len, "latent code length (default: from the source)");
        cmd->add_option("--temperature", a.temperature, "latent sampling temperature (default: config)");
    }
    cmd->add_option("--beam-width", a.beam_width, "token beam width (default: config)");
    cmd->add_option("--max-steps", a.max_steps, "decoding step limit (default: config)");
    cmd->add_option("--length-norm-alpha", a.alpha, "length normalization strength (default: config)");
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"discrete sequence autoencoding workbench"};
    app.require_subcommand(1);

    TrainArgs train_args;
    CLI::App* tr = app.add_subcommand("train", "train a model from a config file");
    tr->add_option("--config", train_args.config, "run configuration file")->required();
    tr->add_flag("--resume", train_args.resume, "continue from the run's rolling checkpoint");
    tr->add_option("--resume-from", train_args.resume_from, "continue from an explicit checkpoint");

    EvalArgs eval_args;
    CLI::App* ev = app.add_subcommand("eval", "report compression efficiency for a trained pair");
    ev->add_option("--checkpoint", eval_args.checkpoint, "augmented run checkpoint");
    ev->add_option("--baseline", eval_args.baseline, "paired baseline run checkpoint");
    CLI::Option* bnll =
        ev->add_option("--baseline-nll", eval_args.baseline_nll, "recorded baseline nll in nats");
    ev->add_option("--split", eval_args.split, "evaluation split")
        ->check(CLI::IsMember({"train", "valid"}));
    ev->add_flag("--offline", eval_args.offline, "compute from recorded numbers only");
    ev->add_option("--ln-p", eval_args.ln_p, "baseline nll in nats (offline)");
    ev->add_option("--ln-p-prime", eval_args.ln_p_prime, "augmented nll in nats (offline)");
    ev->add_option("--K", eval_args.K, "compression factor (offline)");
    ev->add_option("--bits", eval_args.bits, "bits per latent symbol (offline)");

    SweepArgs sweep_args;
    CLI::App* sw = app.add_subcommand("noise-sweep", "train across noise levels and report DSAE");
    sw->add_option("--config", sweep_args.config, "augmented run configuration file")->required();
    sw->add_option("--sigmas", sweep_args.sigmas, "comma-separated noise levels")->required();
    sw->add_option("--out", sweep_args.out, "CSV output file")->required();

    DecodeArgs sample_args;
    CLI::App* sa = app.add_subcommand("sample", "sample a latent code, then sample tokens from it");
    add_decode_flags(sa, sample_args, true);
    sa->add_option("--token-temperature", sample_args.token_temperature,
                   "token sampling temperature");

    DecodeArgs mixed_args;
    CLI::App* dm = app.add_subcommand("decode-mixed", "sample latent codes, beam-decode the tokens");
    add_decode_flags(dm, mixed_args, true);

    DecodeArgs inspect_args;
    CLI::App* il = app.add_subcommand("inspect-latents", "beam-decode a hand-picked latent code");
    add_decode_flags(il, inspect_args, false);
    il->add_option("--ids", inspect_args.ids, "comma-separated latent ids")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        std::fprintf(stderr, "error[config]: %s\n", e.what());
        return 2;
    }

    sample_args.source_given = sa->count("--source") > 0;
    mixed_args.source_given = dm->count("--source") > 0;
    inspect_args.source_given = il->count("--source") > 0;
    eval_args.baseline_nll_given = bnll->count() > 0;

    try {
        if (*tr) return cmd_train(train_args);
        if (*ev) {
            if (eval_args.offline) {
                if (ev->count("--ln-p") == 0 || ev->count("--ln-p-prime") == 0 ||
                    ev->count("--K") == 0 || ev->count("--bits") == 0)
                    throw dsqa::ConfigError(
                        "eval: --offline needs --ln-p, --ln-p-prime, --K and --bits");
            } else {
                if (eval_args.checkpoint.empty())
                    throw dsqa::ConfigError("eval: --checkpoint is required (or use --offline)");
                if (eval_args.baseline.empty() == !eval_args.baseline_nll_given)
                    throw dsqa::ConfigError(
                        "eval: pass exactly one of --baseline and --baseline-nll");
            }
            return cmd_eval(eval_args);
        }
        if (*sw) return cmd_noise_sweep(sweep_args);
        if (*sa) return cmd_sample(sample_args);
        if (*dm) return cmd_decode_mixed(mixed_args);
        if (*il) return cmd_inspect_latents(inspect_args);
    } catch (const dsqa::Error& e) {
        std::fprintf(stderr, "error[%s]: %s\n", e.code().c_str(), e.what());
        return exit_for(e);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error[internal]: %s\n", e.what());
        return 1;
    }
    return 0;
}
