#pragma once

// Run configuration: a flat key=value file with dotted section names
// (compressor.k=3). Parsing is strict — unknown or duplicate keys fail — and
// serialize() emits every key, so a persisted config replays a run exactly.

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include "dsqa/common.hpp"
#include "dsqa/compressor.hpp"
#include "dsqa/data.hpp"
#include "dsqa/decoding.hpp"
#include "dsqa/optim.hpp"
#include "dsqa/transformer.hpp"

namespace dsqa {

enum class ModelKind { augmented, baseline };

struct OptimizerConfig {
    float learning_rate = 1e-3f;
    std::int64_t warmup_steps = 400;
    AdamConfig adam;

    void validate() const {
        if (!(learning_rate > 0.0f)) throw ConfigError("optimizer: learning_rate must be > 0");
        if (warmup_steps < 1) throw ConfigError("optimizer: warmup_steps must be >= 1");
        if (!(adam.beta1 >= 0.0f && adam.beta1 < 1.0f) || !(adam.beta2 >= 0.0f && adam.beta2 < 1.0f))
            throw ConfigError("optimizer: betas must be in [0, 1)");
        if (!(adam.epsilon > 0.0f)) throw ConfigError("optimizer: epsilon must be > 0");
    }
};

struct DecodeDefaults {
    BeamConfig beam;
    float latent_temperature = 1.0f;

    void validate() const {
        beam.validate();
        if (!(latent_temperature > 0.0f)) throw ConfigError("decode: latent_temperature must be > 0");
    }
};

struct TrainControl {
    std::uint64_t seed = 1;
    std::int64_t total_steps = 1000;
    std::int64_t checkpoint_interval = 500;
    std::string output_dir = "runs/default";
    int batch_size = 16;
    int max_seq_len = 32;

    void validate() const {
        if (total_steps < 1) throw ConfigError("train: total_steps must be >= 1");
        if (checkpoint_interval < 1) throw ConfigError("train: checkpoint_interval must be >= 1");
        if (output_dir.empty()) throw ConfigError("train: output_dir must be set");
        if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
        if (max_seq_len < 1) throw ConfigError("train: max_seq_len must be >= 1");
    }
};

struct RunConfig {
    ModelKind model = ModelKind::augmented;
    float latent_loss_weight = 1.0f;
    TransformerConfig transformer; // vocab_size is derived from the corpus, never a config key
    CompressorConfig compressor;
    CorpusSpec corpus;
    OptimizerConfig optimizer;
    DecodeDefaults decode;
    TrainControl train;

    void validate() const {
        if (latent_loss_weight < 0.0f) throw ConfigError("model: latent_loss_weight must be >= 0");
        transformer.validate();
        if (model == ModelKind::augmented) compressor.validate();
        corpus.validate();
        optimizer.validate();
        decode.validate();
        train.validate();
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

template <typename T>
T parse_integer(const std::string& key, const std::string& value) {
    T out{};
    const char* begin = value.data();
    const char* end = begin + value.size();
    auto [p, ec] = std::from_chars(begin, end, out);
    if (ec != std::errc() || p != end)
        throw ConfigError("config: " + key + " needs an integer, got '" + value + "'");
    return out;
}

inline float parse_float(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        const float out = std::stof(value, &used);
        if (used == value.size()) return out;
    } catch (const std::exception&) {
    }
    throw ConfigError("config: " + key + " needs a number, got '" + value + "'");
}

inline double parse_double(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        const double out = std::stod(value, &used);
        if (used == value.size()) return out;
    } catch (const std::exception&) {
    }
    throw ConfigError("config: " + key + " needs a number, got '" + value + "'");
}

inline bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw ConfigError("config: " + key + " needs true/false, got '" + value + "'");
}

inline void set_config_key(RunConfig& c, const std::string& key, const std::string& value) {
    auto bad_choice = [&](const char* choices) {
        throw ConfigError("config: " + key + " must be one of {" + choices + "}, got '" + value + "'");
    };
    if (key == "model.kind") {
        if (value == "augmented") c.model = ModelKind::augmented;
        else if (value == "baseline") c.model = ModelKind::baseline;
        else bad_choice("augmented, baseline");
    } else if (key == "model.latent_loss_weight") {
        c.latent_loss_weight = parse_float(key, value);
    } else if (key == "transformer.num_layers") {
        c.transformer.num_layers = parse_integer<int>(key, value);
    } else if (key == "transformer.hidden_size") {
        c.transformer.hidden_size = parse_integer<int>(key, value);
    } else if (key == "transformer.filter_size") {
        c.transformer.filter_size = parse_integer<int>(key, value);
    } else if (key == "transformer.num_heads") {
        c.transformer.num_heads = parse_integer<int>(key, value);
    } else if (key == "transformer.max_len") {
        c.transformer.max_len = parse_integer<int>(key, value);
    } else if (key == "transformer.dropout") {
        c.transformer.dropout = parse_float(key, value);
    } else if (key == "compressor.k") {
        c.compressor.k = parse_integer<int>(key, value);
    } else if (key == "compressor.local") {
        c.compressor.local = parse_bool(key, value);
    } else if (key == "compressor.hidden_size") {
        c.compressor.hidden_size = parse_integer<int>(key, value);
    } else if (key == "compressor.pretrain_steps") {
        c.compressor.pretrain_steps = parse_integer<std::int64_t>(key, value);
    } else if (key == "compressor.bottleneck") {
        if (value == "semhash") c.compressor.bottleneck = BottleneckKind::semhash;
        else if (value == "gumbel") c.compressor.bottleneck = BottleneckKind::gumbel;
        else bad_choice("semhash, gumbel");
    } else if (key == "compressor.semhash.bits") {
        c.compressor.semhash.bits = parse_integer<int>(key, value);
    } else if (key == "compressor.semhash.noise_sigma") {
        c.compressor.semhash.noise_sigma = parse_float(key, value);
    } else if (key == "compressor.semhash.mix_probability") {
        c.compressor.semhash.mix_probability = parse_float(key, value);
    } else if (key == "compressor.semhash.filter_size") {
        c.compressor.semhash.filter_size = parse_integer<int>(key, value);
    } else if (key == "compressor.semhash.bit_polarity") {
        if (value == "positive_is_one") c.compressor.semhash.bit_polarity = BitPolarity::positive_is_one;
        else if (value == "negative_is_one") c.compressor.semhash.bit_polarity = BitPolarity::negative_is_one;
        else bad_choice("positive_is_one, negative_is_one");
    } else if (key == "compressor.gumbel.num_symbols") {
        c.compressor.gumbel.num_symbols = parse_integer<int>(key, value);
    } else if (key == "compressor.gumbel.tau_start") {
        c.compressor.gumbel.tau_start = parse_float(key, value);
    } else if (key == "compressor.gumbel.tau_end") {
        c.compressor.gumbel.tau_end = parse_float(key, value);
    } else if (key == "compressor.gumbel.tau_decay_steps") {
        c.compressor.gumbel.tau_decay_steps = parse_integer<std::int64_t>(key, value);
    } else if (key == "compressor.gumbel.variance_penalty_weight") {
        c.compressor.gumbel.variance_penalty_weight = parse_float(key, value);
    } else if (key == "corpus.source") {
        c.corpus.source = value;
    } else if (key == "corpus.tokenizer") {
        if (value == "chars") c.corpus.tokenizer = TokenizerMode::chars;
        else if (value == "words") c.corpus.tokenizer = TokenizerMode::words;
        else bad_choice("chars, words");
    } else if (key == "corpus.min_word_frequency") {
        c.corpus.min_word_frequency = parse_integer<int>(key, value);
    } else if (key == "corpus.train_fraction") {
        c.corpus.train_fraction = parse_double(key, value);
    } else if (key == "corpus.generator_seed") {
        c.corpus.generator_seed = parse_integer<std::uint64_t>(key, value);
    } else if (key == "corpus.generator_size") {
        c.corpus.generator_size = parse_integer<std::int64_t>(key, value);
    } else if (key == "optimizer.learning_rate") {
        c.optimizer.learning_rate = parse_float(key, value);
    } else if (key == "optimizer.warmup_steps") {
        c.optimizer.warmup_steps = parse_integer<std::int64_t>(key, value);
    } else if (key == "optimizer.beta1") {
        c.optimizer.adam.beta1 = parse_float(key, value);
    } else if (key == "optimizer.beta2") {
        c.optimizer.adam.beta2 = parse_float(key, value);
    } else if (key == "optimizer.epsilon") {
        c.optimizer.adam.epsilon = parse_float(key, value);
    } else if (key == "decode.beam_width") {
        c.decode.beam.width = parse_integer<int>(key, value);
    } else if (key == "decode.max_steps") {
        c.decode.beam.max_steps = parse_integer<int>(key, value);
    } else if (key == "decode.length_normalization_alpha") {
        c.decode.beam.length_normalization_alpha = parse_float(key, value);
    } else if (key == "decode.latent_temperature") {
        c.decode.latent_temperature = parse_float(key, value);
    } else if (key == "train.seed") {
        c.train.seed = parse_integer<std::uint64_t>(key, value);
    } else if (key == "train.total_steps") {
        c.train.total_steps = parse_integer<std::int64_t>(key, value);
    } else if (key == "train.checkpoint_interval") {
        c.train.checkpoint_interval = parse_integer<std::int64_t>(key, value);
    } else if (key == "train.output_dir") {
        c.train.output_dir = value;
    } else if (key == "train.batch_size") {
        c.train.batch_size = parse_integer<int>(key, value);
    } else if (key == "train.max_seq_len") {
        c.train.max_seq_len = parse_integer<int>(key, value);
    } else {
        throw ConfigError("config: unknown key '" + key + "'");
    }
}

inline std::string format_float(float v) {
    std::ostringstream os;
    os.precision(9); // round-trips any float32
    os << v;
    return os.str();
}

inline std::string format_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

} // namespace detail

inline RunConfig parse_run_config(const std::string& text) {
    RunConfig c;
    std::set<std::string> seen;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string t = detail::trim(line);
        if (t.empty() || t[0] == '#') continue;
        const std::size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config: line " + std::to_string(line_no) + " has no '=': " + t);
        const std::string key = detail::trim(t.substr(0, eq));
        const std::string value = detail::trim(t.substr(eq + 1));
        if (key.empty()) throw ConfigError("config: line " + std::to_string(line_no) + " has an empty key");
        if (!seen.insert(key).second) throw ConfigError("config: duplicate key '" + key + "'");
        detail::set_config_key(c, key, value);
    }
    // the bottleneck decodes back into the compressor's width
    c.compressor.semhash.hidden_size = c.compressor.hidden_size;
    return c;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("config: cannot read " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_run_config(buf.str());
}

// Every key, fixed order; parse(serialize(c)) == c.
inline std::string serialize_run_config(const RunConfig& c) {
    using detail::format_double;
    using detail::format_float;
    std::ostringstream os;
    os << "model.kind = " << (c.model == ModelKind::augmented ? "augmented" : "baseline") << "\n";
    os << "model.latent_loss_weight = " << format_float(c.latent_loss_weight) << "\n";
    os << "transformer.num_layers = " << c.transformer.num_layers << "\n";
    os << "transformer.hidden_size = " << c.transformer.hidden_size << "\n";
    os << "transformer.filter_size = " << c.transformer.filter_size << "\n";
    os << "transformer.num_heads = " << c.transformer.num_heads << "\n";
    os << "transformer.max_len = " << c.transformer.max_len << "\n";
    os << "transformer.dropout = " << format_float(c.transformer.dropout) << "\n";
    os << "compressor.k = " << c.compressor.k << "\n";
    os << "compressor.local = " << (c.compressor.local ? "true" : "false") << "\n";
    os << "compressor.hidden_size = " << c.compressor.hidden_size << "\n";
    os << "compressor.pretrain_steps = " << c.compressor.pretrain_steps << "\n";
    os << "compressor.bottleneck = "
       << (c.compressor.bottleneck == BottleneckKind::semhash ? "semhash" : "gumbel") << "\n";
    os << "compressor.semhash.bits = " << c.compressor.semhash.bits << "\n";
    os << "compressor.semhash.noise_sigma = " << format_float(c.compressor.semhash.noise_sigma) << "\n";
    os << "compressor.semhash.mix_probability = " << format_float(c.compressor.semhash.mix_probability)
       << "\n";
    os << "compressor.semhash.filter_size = " << c.compressor.semhash.filter_size << "\n";
    os << "compressor.semhash.bit_polarity = "
       << (c.compressor.semhash.bit_polarity == BitPolarity::positive_is_one ? "positive_is_one"
                                                                             : "negative_is_one")
       << "\n";
    os << "compressor.gumbel.num_symbols = " << c.compressor.gumbel.num_symbols << "\n";
    os << "compressor.gumbel.tau_start = " << format_float(c.compressor.gumbel.tau_start) << "\n";
    os << "compressor.gumbel.tau_end = " << format_float(c.compressor.gumbel.tau_end) << "\n";
    os << "compressor.gumbel.tau_decay_steps = " << c.compressor.gumbel.tau_decay_steps << "\n";
    os << "compressor.gumbel.variance_penalty_weight = "
       << format_float(c.compressor.gumbel.variance_penalty_weight) << "\n";
    os << "corpus.source = " << c.corpus.source << "\n";
    os << "corpus.tokenizer = " << (c.corpus.tokenizer == TokenizerMode::chars ? "chars" : "words") << "\n";
    os << "corpus.min_word_frequency = " << c.corpus.min_word_frequency << "\n";
    os << "corpus.train_fraction = " << format_double(c.corpus.train_fraction) << "\n";
    os << "corpus.generator_seed = " << c.corpus.generator_seed << "\n";
    os << "corpus.generator_size = " << c.corpus.generator_size << "\n";
    os << "optimizer.learning_rate = " << format_float(c.optimizer.learning_rate) << "\n";
    os << "optimizer.warmup_steps = " << c.optimizer.warmup_steps << "\n";
    os << "optimizer.beta1 = " << format_float(c.optimizer.adam.beta1) << "\n";
    os << "optimizer.beta2 = " << format_float(c.optimizer.adam.beta2) << "\n";
    os << "optimizer.epsilon = " << format_float(c.optimizer.adam.epsilon) << "\n";
    os << "decode.beam_width = " << c.decode.beam.width << "\n";
    os << "decode.max_steps = " << c.decode.beam.max_steps << "\n";
    os << "decode.length_normalization_alpha = "
       << format_float(c.decode.beam.length_normalization_alpha) << "\n";
    os << "decode.latent_temperature = " << format_float(c.decode.latent_temperature) << "\n";
    os << "train.seed = " << c.train.seed << "\n";
    os << "train.total_steps = " << c.train.total_steps << "\n";
    os << "train.checkpoint_interval = " << c.train.checkpoint_interval << "\n";
    os << "train.output_dir = " << c.train.output_dir << "\n";
    os << "train.batch_size = " << c.train.batch_size << "\n";
    os << "train.max_seq_len = " << c.train.max_seq_len << "\n";
    return os.str();
}

// DSQA_SEED in the environment wins over the config file. Returns true if it
// was set.
inline bool apply_env_seed(RunConfig& c) {
    const char* env = std::getenv("DSQA_SEED");
    if (env == nullptr || *env == '\0') return false;
    c.train.seed = detail::parse_integer<std::uint64_t>("DSQA_SEED", env);
    return true;
}

} // namespace dsqa
