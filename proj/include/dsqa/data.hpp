#pragma once

// Corpus handling: character and whitespace-word tokenization, deterministic
// K-padded batching, two built-in generators (a Markov word-salad text for
// language modeling and a cipher/block-reversal transduction task with a
// known zero-entropy optimum), and a line-oriented token-id file format.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "dsqa/common.hpp"
#include "dsqa/rng.hpp"
#include "dsqa/seqmodel.hpp"

namespace dsqa {

enum class TokenizerMode { chars, words };

namespace detail {

// Splits UTF-8 text into single-scalar strings; malformed bytes come back as
// one-byte tokens so encode can map them to UNK without crashing.
inline std::vector<std::string> utf8_scalars(const std::string& text) {
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < text.size()) {
        const unsigned char c = static_cast<unsigned char>(text[i]);
        std::size_t len = 1;
        if (c >= 0xF0)
            len = 4;
        else if (c >= 0xE0)
            len = 3;
        else if (c >= 0xC0)
            len = 2;
        if (i + len > text.size()) len = 1;
        bool ok = true;
        for (std::size_t j = 1; j < len; ++j)
            if ((static_cast<unsigned char>(text[i + j]) & 0xC0) != 0x80) ok = false;
        if (!ok) len = 1;
        out.push_back(text.substr(i, len));
        i += len;
    }
    return out;
}

inline std::vector<std::string> whitespace_words(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : text) {
        if (ch == ' ' || ch == '\t' || ch == '\n' || ch == '\r') {
            if (!cur.empty()) out.push_back(std::move(cur));
            cur.clear();
        } else {
            cur.push_back(ch);
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

inline std::uint64_t fnv1a(std::uint64_t h, const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001B3ull;
    }
    return h;
}

} // namespace detail

class Vocabulary {
public:
    static constexpr const char* reserved_names[tokens::reserved] = {"<pad>", "<eos>", "<unk>",
                                                                     "<boundary>"};

    Vocabulary() = default;

    TokenizerMode mode() const { return mode_; }
    int size() const { return static_cast<int>(id_to_token_.size()); }
    const std::string& token(int id) const {
        if (id < 0 || id >= size()) throw RangeError("vocab: id " + std::to_string(id) + " out of range");
        return id_to_token_[static_cast<std::size_t>(id)];
    }

    int id_of(const std::string& token) const {
        auto it = token_to_id_.find(token);
        return it == token_to_id_.end() ? tokens::UNK : it->second;
    }

    // Frequency-ordered vocabulary over the text; ties break lexicographically
    // so the same text always yields the same table.
    static Vocabulary build(const std::string& text, TokenizerMode mode, int min_frequency = 1) {
        if (min_frequency < 1) throw ConfigError("vocab: min_frequency must be >= 1");
        std::map<std::string, std::int64_t> counts;
        for (auto& t : mode == TokenizerMode::chars ? detail::utf8_scalars(text)
                                                    : detail::whitespace_words(text))
            ++counts[t];
        std::vector<std::pair<std::string, std::int64_t>> order(counts.begin(), counts.end());
        std::stable_sort(order.begin(), order.end(),
                         [](const auto& a, const auto& b) { return a.second > b.second; });
        Vocabulary v = reserved_only(mode);
        for (auto& [token, count] : order) {
            if (count < min_frequency) continue;
            if (v.token_to_id_.count(token)) continue; // a literal reserved name stays reserved
            v.token_to_id_[token] = v.size();
            v.id_to_token_.push_back(token);
        }
        return v;
    }

    // Vocabulary over explicit symbol names, for generated id corpora.
    static Vocabulary from_tokens(TokenizerMode mode, const std::vector<std::string>& toks) {
        Vocabulary v = reserved_only(mode);
        for (const auto& t : toks) {
            if (v.token_to_id_.count(t)) throw DataError("vocab: duplicate token " + t);
            v.token_to_id_[t] = v.size();
            v.id_to_token_.push_back(t);
        }
        return v;
    }

    std::vector<int> encode(const std::string& text) const {
        std::vector<int> out;
        for (auto& t : mode_ == TokenizerMode::chars ? detail::utf8_scalars(text)
                                                     : detail::whitespace_words(text)) {
            auto it = token_to_id_.find(t);
            out.push_back(it == token_to_id_.end() || it->second < tokens::reserved ? tokens::UNK
                                                                                    : it->second);
        }
        return out;
    }

    // Inverse of encode for fully in-vocab text (word mode re-joins with
    // single spaces). Reserved ids are dropped.
    std::string decode(const std::vector<int>& ids) const {
        std::string out;
        bool first = true;
        for (int id : ids) {
            if (id < 0 || id >= size()) throw RangeError("vocab: id " + std::to_string(id) + " out of range");
            if (id < tokens::reserved) continue;
            if (mode_ == TokenizerMode::words && !first) out += ' ';
            out += id_to_token_[static_cast<std::size_t>(id)];
            first = false;
        }
        return out;
    }

    std::uint64_t hash() const {
        std::uint64_t h = 0xCBF29CE484222325ull;
        const unsigned char m = mode_ == TokenizerMode::chars ? 0 : 1;
        h = detail::fnv1a(h, &m, 1);
        for (const auto& t : id_to_token_) {
            const std::uint32_t n = static_cast<std::uint32_t>(t.size());
            h = detail::fnv1a(h, &n, sizeof(n));
            h = detail::fnv1a(h, t.data(), t.size());
        }
        return h;
    }

    void save(const std::string& path) const;
    static Vocabulary load(const std::string& path);

private:
    static Vocabulary reserved_only(TokenizerMode mode) {
        Vocabulary v;
        v.mode_ = mode;
        for (int i = 0; i < tokens::reserved; ++i) {
            v.id_to_token_.push_back(reserved_names[i]);
            v.token_to_id_[reserved_names[i]] = i;
        }
        return v;
    }

    TokenizerMode mode_ = TokenizerMode::chars;
    std::vector<std::string> id_to_token_;
    std::unordered_map<std::string, int> token_to_id_;
};

inline void Vocabulary::save(const std::string& path) const {
    nlohmann::json j;
    j["mode"] = mode_ == TokenizerMode::chars ? "chars" : "words";
    j["tokens"] = std::vector<std::string>(id_to_token_.begin() + tokens::reserved, id_to_token_.end());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("vocab: cannot write " + path);
    out << j.dump(2) << "\n";
    if (!out) throw DataError("vocab: write failed for " + path);
}

inline Vocabulary Vocabulary::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("vocab: cannot read " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("vocab: bad json in " + path + ": " + e.what());
    }
    if (!j.contains("mode") || !j.contains("tokens")) throw DataError("vocab: missing fields in " + path);
    const std::string m = j["mode"].get<std::string>();
    if (m != "chars" && m != "words") throw DataError("vocab: unknown mode " + m);
    return from_tokens(m == "chars" ? TokenizerMode::chars : TokenizerMode::words,
                       j["tokens"].get<std::vector<std::string>>());
}

// ---------------------------------------------------------------------------
// corpus container and built-in generators

struct Corpus {
    Vocabulary vocab;
    std::vector<std::vector<int>> train, valid;          // target sequences, no EOS yet
    bool conditional = false;
    std::vector<std::vector<int>> train_src, valid_src;  // parallel when conditional
    std::uint64_t seed = 0;                              // generator seed, 0 for file corpora
};

struct CorpusSpec {
    std::string source;        // file path, "builtin:chars", or "builtin:transduction"
    TokenizerMode tokenizer = TokenizerMode::chars;
    int min_word_frequency = 1;
    double train_fraction = 0.9;
    std::uint64_t generator_seed = 1;
    std::int64_t generator_size = 65536; // chars of text / pairs, per generator

    void validate() const {
        if (source.empty()) throw ConfigError("corpus: source must be set");
        if (!(train_fraction > 0.0 && train_fraction < 1.0))
            throw ConfigError("corpus: train_fraction must be in (0, 1)");
        if (min_word_frequency < 1) throw ConfigError("corpus: min_word_frequency must be >= 1");
        if (generator_size < 1) throw ConfigError("corpus: generator_size must be >= 1");
    }
};

// Markov word-salad text: a seeded 40-word lexicon over lowercase letters
// where each word prefers 8 successors. Low per-character entropy, desk-scale
// vocabulary, newline-separated lines of 3..7 words.
inline std::string synthetic_char_text(std::uint64_t seed, std::int64_t size) {
    if (size < 1) throw ConfigError("generator: size must be >= 1");
    RngState lex(RngState::derive(seed, 1));
    std::vector<std::string> words;
    while (words.size() < 40) {
        const int len = 2 + static_cast<int>(lex.u01() * 4.0);
        std::string w;
        for (int i = 0; i < len; ++i) w.push_back(static_cast<char>('a' + static_cast<int>(lex.u01() * 26.0)));
        if (std::find(words.begin(), words.end(), w) == words.end()) words.push_back(w);
    }
    std::vector<std::vector<int>> successors(words.size());
    for (std::size_t i = 0; i < words.size(); ++i)
        for (int j = 0; j < 8; ++j)
            successors[i].push_back(static_cast<int>(lex.u01() * 40.0));

    RngState gen(RngState::derive(seed, 2));
    std::string out;
    int word = static_cast<int>(gen.u01() * 40.0);
    while (static_cast<std::int64_t>(out.size()) < size) {
        const int line_words = 3 + static_cast<int>(gen.u01() * 5.0);
        for (int i = 0; i < line_words; ++i) {
            out += words[static_cast<std::size_t>(word)];
            out += i + 1 == line_words ? '\n' : ' ';
            word = gen.u01() < 0.6 ? successors[static_cast<std::size_t>(word)][static_cast<int>(gen.u01() * 8.0)]
                                   : static_cast<int>(gen.u01() * 40.0);
        }
    }
    return out;
}

// The transduction alphabet is 40 symbols; targets are a seeded substitution
// cipher of the source with every 4-token block reversed. A model that learns
// the rule reaches 0 nats/token.
constexpr int transduction_alphabet = 40;

inline std::vector<int> transduction_cipher(std::uint64_t seed) {
    std::vector<int> perm(transduction_alphabet);
    for (int i = 0; i < transduction_alphabet; ++i) perm[static_cast<std::size_t>(i)] = i;
    RngState rng(RngState::derive(seed, 0xC1));
    for (int i = transduction_alphabet - 1; i > 0; --i) {
        const int j = static_cast<int>(rng.u01() * (i + 1));
        std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]);
    }
    return perm;
}

// Alphabet-index level rule, exposed for oracle checks.
inline std::vector<int> transduction_apply(const std::vector<int>& source, const std::vector<int>& cipher) {
    std::vector<int> out(source.size());
    for (std::size_t start = 0; start < source.size(); start += 4) {
        const std::size_t end = std::min(start + 4, source.size());
        for (std::size_t i = start; i < end; ++i) {
            const int s = source[start + (end - 1 - i)];
            if (s < 0 || s >= transduction_alphabet)
                throw RangeError("transduction: symbol " + std::to_string(s) + " outside alphabet");
            out[i] = cipher[static_cast<std::size_t>(s)];
        }
    }
    return out;
}

inline Corpus synthetic_transduction(std::uint64_t seed, std::int64_t size) {
    if (size < 1) throw ConfigError("generator: size must be >= 1");
    std::vector<std::string> names;
    for (int i = 0; i < transduction_alphabet; ++i) names.push_back("s" + std::to_string(i));

    Corpus c;
    c.vocab = Vocabulary::from_tokens(TokenizerMode::words, names);
    c.conditional = true;
    c.seed = seed;
    const std::vector<int> cipher = transduction_cipher(seed);

    RngState rng(RngState::derive(seed, 0xC2));
    for (std::int64_t n = 0; n < size; ++n) {
        const int len = 4 * (1 + static_cast<int>(rng.u01() * 3.0)); // 4, 8 or 12
        std::vector<int> src(static_cast<std::size_t>(len));
        for (auto& s : src) s = static_cast<int>(rng.u01() * transduction_alphabet);
        std::vector<int> tgt = transduction_apply(src, cipher);
        for (auto& s : src) s += tokens::reserved;
        for (auto& t : tgt) t += tokens::reserved;
        // every tenth pair held out
        const bool val = n % 10 == 9;
        (val ? c.valid_src : c.train_src).push_back(std::move(src));
        (val ? c.valid : c.train).push_back(std::move(tgt));
    }
    if (c.valid.empty()) throw DataError("corpus: validation split is empty");
    return c;
}

inline Corpus corpus_from_text(const std::string& text, const CorpusSpec& spec) {
    Corpus c;
    c.vocab = Vocabulary::build(text, spec.tokenizer, spec.min_word_frequency);
    c.seed = spec.source.rfind("builtin:", 0) == 0 ? spec.generator_seed : 0;
    const int period = std::max(2, static_cast<int>(1.0 / (1.0 - spec.train_fraction) + 0.5));
    std::int64_t line_no = 0;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<int> ids = c.vocab.encode(line);
        if (ids.empty()) continue;
        (line_no % period == period - 1 ? c.valid : c.train).push_back(std::move(ids));
        ++line_no;
    }
    if (c.train.empty()) throw DataError("corpus: training split is empty");
    if (c.valid.empty()) throw DataError("corpus: validation split is empty");
    return c;
}

inline Corpus load_corpus(const CorpusSpec& spec) {
    spec.validate();
    if (spec.source == "builtin:chars")
        return corpus_from_text(synthetic_char_text(spec.generator_seed, spec.generator_size), spec);
    if (spec.source == "builtin:transduction")
        return synthetic_transduction(spec.generator_seed, spec.generator_size);
    if (spec.source.rfind("builtin:", 0) == 0)
        throw ConfigError("corpus: unknown generator " + spec.source);
    std::ifstream in(spec.source, std::ios::binary);
    if (!in) throw DataError("corpus: cannot read " + spec.source);
    std::ostringstream buf;
    buf << in.rdbuf();
    return corpus_from_text(buf.str(), spec);
}

// ---------------------------------------------------------------------------
// deterministic batching

enum class Split { train, valid };

// Sequences are bucketed by source length (one bucket when unconditional),
// shuffled inside their bucket with a per-epoch stream, and cut into full
// batches; the batch for a step is a pure function of (corpus, seed, step).
class Batcher {
public:
    Batcher(const Corpus& corpus, Split split, int batch_size, int max_seq_len, int K,
            std::uint64_t seed)
        : corpus_(&corpus), split_(split), batch_size_(batch_size), max_seq_len_(max_seq_len), K_(K),
          seed_(seed) {
        if (batch_size < 1) throw ConfigError("batcher: batch_size must be >= 1");
        if (max_seq_len < 1) throw ConfigError("batcher: max_seq_len must be >= 1");
        if (K < 1) throw ConfigError("batcher: K must be >= 1");
        const auto& seqs = split == Split::train ? corpus.train : corpus.valid;
        const auto& srcs = split == Split::train ? corpus.train_src : corpus.valid_src;
        std::map<int, std::vector<std::int64_t>> buckets;
        for (std::size_t i = 0; i < seqs.size(); ++i) {
            if (static_cast<int>(seqs[i].size()) > max_seq_len) ++truncated_;
            const int key =
                corpus.conditional ? static_cast<int>(srcs[i].size()) : 0;
            buckets[key].push_back(static_cast<std::int64_t>(i));
        }
        for (auto& [key, rows] : buckets) {
            const std::int64_t full = static_cast<std::int64_t>(rows.size()) / batch_size;
            if (full > 0) buckets_.push_back({key, std::move(rows), full});
        }
        for (const auto& b : buckets_) batches_per_epoch_ += b.full_batches;
        if (batches_per_epoch_ == 0)
            throw DataError("batcher: split has fewer than batch_size sequences in every bucket");
    }

    std::int64_t batches_per_epoch() const { return batches_per_epoch_; }
    std::int64_t truncated() const { return truncated_; }

    SequenceBatch at(std::int64_t step) const {
        if (step < 0) throw RangeError("batcher: negative step");
        const std::int64_t epoch = step / batches_per_epoch_;
        std::int64_t slot = step % batches_per_epoch_;

        // per-epoch shuffle of each bucket, then of the batch slots
        std::vector<std::int64_t> batch_order(static_cast<std::size_t>(batches_per_epoch_));
        for (std::int64_t i = 0; i < batches_per_epoch_; ++i) batch_order[static_cast<std::size_t>(i)] = i;
        RngState order_rng(RngState::derive(seed_, (0xE0ull << 56) | static_cast<std::uint64_t>(epoch)));
        shuffle(batch_order, order_rng);
        slot = batch_order[static_cast<std::size_t>(slot)];

        for (std::size_t bi = 0; bi < buckets_.size(); ++bi) {
            const Bucket& bucket = buckets_[bi];
            if (slot >= bucket.full_batches) {
                slot -= bucket.full_batches;
                continue;
            }
            std::vector<std::int64_t> rows = bucket.rows;
            RngState rng(RngState::derive(seed_, (0xB0ull << 56) | (static_cast<std::uint64_t>(bi) << 40) |
                                                     static_cast<std::uint64_t>(epoch)));
            shuffle(rows, rng);
            return assemble(rows, slot);
        }
        throw StateError("batcher: slot accounting is broken"); // unreachable
    }

private:
    struct Bucket {
        int source_len;
        std::vector<std::int64_t> rows;
        std::int64_t full_batches;
    };

    static void shuffle(std::vector<std::int64_t>& v, RngState& rng) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(rng.u01() * static_cast<double>(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    SequenceBatch assemble(const std::vector<std::int64_t>& rows, std::int64_t slot) const {
        const auto& seqs = split_ == Split::train ? corpus_->train : corpus_->valid;
        const auto& srcs = split_ == Split::train ? corpus_->train_src : corpus_->valid_src;

        SequenceBatch b;
        b.batch = batch_size_;
        int longest = 0;
        for (int r = 0; r < batch_size_; ++r) {
            const auto& seq = seqs[static_cast<std::size_t>(rows[static_cast<std::size_t>(slot * batch_size_ + r)])];
            longest = std::max(longest, std::min<int>(max_seq_len_, static_cast<int>(seq.size())));
        }
        b.length = ((longest + 1 + K_ - 1) / K_) * K_; // room for EOS, K-aligned
        b.token_ids.assign(static_cast<std::size_t>(batch_size_) * b.length, tokens::PAD);
        b.mask.assign(b.token_ids.size(), 0.0f);
        for (int r = 0; r < batch_size_; ++r) {
            const std::int64_t row = rows[static_cast<std::size_t>(slot * batch_size_ + r)];
            const auto& seq = seqs[static_cast<std::size_t>(row)];
            const int n = std::min<int>(max_seq_len_, static_cast<int>(seq.size()));
            for (int j = 0; j < n; ++j) {
                b.token_ids[static_cast<std::size_t>(r) * b.length + j] = seq[static_cast<std::size_t>(j)];
                b.mask[static_cast<std::size_t>(r) * b.length + j] = 1.0f;
            }
            b.token_ids[static_cast<std::size_t>(r) * b.length + n] = tokens::EOS;
            b.mask[static_cast<std::size_t>(r) * b.length + n] = 1.0f;
            b.lengths.push_back(n + 1);
            if (corpus_->conditional) {
                const auto& src = srcs[static_cast<std::size_t>(row)];
                b.source_len = static_cast<int>(src.size());
                b.source_ids.insert(b.source_ids.end(), src.begin(), src.end());
            }
        }
        return b;
    }

    const Corpus* corpus_;
    Split split_;
    int batch_size_, max_seq_len_, K_;
    std::uint64_t seed_;
    std::vector<Bucket> buckets_;
    std::int64_t batches_per_epoch_ = 0;
    std::int64_t truncated_ = 0;
};

// ---------------------------------------------------------------------------
// token-id corpus files: a one-line header, then one sequence per line
// ("src<TAB>tgt" when conditional)

inline void save_corpus(const Corpus& c, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("corpus: cannot write " + path);
    char head[128];
    std::snprintf(head, sizeof(head), "dsqa-corpus v1 vocab=%016llx seed=%llu conditional=%d\n",
                  static_cast<unsigned long long>(c.vocab.hash()),
                  static_cast<unsigned long long>(c.seed), c.conditional ? 1 : 0);
    out << head;
    auto write_split = [&](const std::vector<std::vector<int>>& tgt,
                           const std::vector<std::vector<int>>& src, const char* name) {
        out << "split " << name << " " << tgt.size() << "\n";
        for (std::size_t i = 0; i < tgt.size(); ++i) {
            if (c.conditional) {
                for (std::size_t j = 0; j < src[i].size(); ++j) out << (j ? " " : "") << src[i][j];
                out << "\t";
            }
            for (std::size_t j = 0; j < tgt[i].size(); ++j) out << (j ? " " : "") << tgt[i][j];
            out << "\n";
        }
    };
    write_split(c.train, c.train_src, "train");
    write_split(c.valid, c.valid_src, "valid");
    if (!out) throw DataError("corpus: write failed for " + path);
}

inline Corpus load_corpus_file(const std::string& path, Vocabulary vocab) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("corpus: cannot read " + path);
    std::string line;
    if (!std::getline(in, line)) throw DataError("corpus: empty file " + path);
    unsigned long long hash = 0, seed = 0;
    int conditional = 0;
    if (std::sscanf(line.c_str(), "dsqa-corpus v1 vocab=%llx seed=%llu conditional=%d", &hash, &seed,
                    &conditional) != 3)
        throw DataError("corpus: bad header in " + path);
    if (hash != static_cast<unsigned long long>(vocab.hash()))
        throw DataError("corpus: vocabulary hash mismatch in " + path);

    Corpus c;
    c.vocab = std::move(vocab);
    c.conditional = conditional != 0;
    c.seed = seed;
    auto parse_ids = [&](const std::string& text) {
        std::vector<int> ids;
        std::istringstream is(text);
        int v;
        while (is >> v) {
            if (v < 0 || v >= c.vocab.size())
                throw DataError("corpus: token id " + std::to_string(v) + " outside vocabulary");
            ids.push_back(v);
        }
        return ids;
    };
    while (std::getline(in, line)) {
        std::size_t count = 0;
        char name[16];
        if (std::sscanf(line.c_str(), "split %15s %zu", name, &count) != 2)
            throw DataError("corpus: bad split header in " + path);
        const bool train = std::string(name) == "train";
        for (std::size_t i = 0; i < count; ++i) {
            if (!std::getline(in, line)) throw DataError("corpus: truncated file " + path);
            const std::size_t tab = line.find('\t');
            if (c.conditional != (tab != std::string::npos))
                throw DataError("corpus: line/flag mismatch in " + path);
            if (c.conditional) {
                (train ? c.train_src : c.valid_src).push_back(parse_ids(line.substr(0, tab)));
                (train ? c.train : c.valid).push_back(parse_ids(line.substr(tab + 1)));
            } else {
                (train ? c.train : c.valid).push_back(parse_ids(line));
            }
        }
    }
    if (c.train.empty() || c.valid.empty()) throw DataError("corpus: missing split in " + path);
    return c;
}

} // namespace dsqa
