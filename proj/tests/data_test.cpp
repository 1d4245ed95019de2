#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "dsqa/data.hpp"

using namespace dsqa;

namespace {

Corpus tiny_corpus(std::vector<std::vector<int>> train, std::vector<std::vector<int>> valid) {
    std::vector<std::string> names;
    for (int i = 0; i < 40; ++i) names.push_back("t" + std::to_string(i));
    Corpus c;
    c.vocab = Vocabulary::from_tokens(TokenizerMode::words, names);
    c.train = std::move(train);
    c.valid = std::move(valid);
    return c;
}

std::vector<int> row_of(int token, int n) { return std::vector<int>(static_cast<std::size_t>(n), token); }

struct TempFile {
    std::string path;
    explicit TempFile(const std::string& name) : path("/tmp/dsqa_test_" + name) {}
    ~TempFile() { std::remove(path.c_str()); }
};

} // namespace

TEST_CASE("character tokenization round-trips, including multi-byte text") {
    const std::string text = "ab a\nh\xC3\xA9llo \xE2\x86\x92 x"; // héllo → x
    Vocabulary v = Vocabulary::build(text, TokenizerMode::chars);
    CHECK(v.size() <= 4 + 12);
    for (const std::string& probe : {std::string("ab a"), std::string("h\xC3\xA9llo \xE2\x86\x92")}) {
        std::vector<int> ids = v.encode(probe);
        CHECK(v.decode(ids) == probe);
    }
    // unseen scalar becomes UNK, which decodes to nothing
    std::vector<int> ids = v.encode("zab");
    CHECK(ids[0] == tokens::UNK);
    CHECK(v.decode(ids) == "ab");
}

TEST_CASE("word vocabulary applies the frequency cutoff") {
    Vocabulary v = Vocabulary::build("a b b", TokenizerMode::words, 2);
    CHECK(v.size() == tokens::reserved + 1);
    CHECK(v.id_of("b") >= tokens::reserved);
    CHECK(v.encode("a")[0] == tokens::UNK);
    CHECK(v.encode("b c b")[1] == tokens::UNK);
    CHECK(v.decode(v.encode("b b")) == "b b");
}

TEST_CASE("reserved names typed in text never map to reserved ids") {
    Vocabulary v = Vocabulary::build("<pad> <eos> word word", TokenizerMode::words);
    CHECK(v.encode("<pad>")[0] == tokens::UNK);
    CHECK(v.encode("<eos>")[0] == tokens::UNK);
    CHECK(v.encode("word")[0] >= tokens::reserved);
}

TEST_CASE("identical text builds an identical vocabulary and hash") {
    const std::string text = "the quick brown fox\njumps over the lazy dog\n";
    Vocabulary a = Vocabulary::build(text, TokenizerMode::chars);
    Vocabulary b = Vocabulary::build(text, TokenizerMode::chars);
    CHECK(a.hash() == b.hash());
    Vocabulary c = Vocabulary::build(text + "!", TokenizerMode::chars);
    CHECK(a.hash() != c.hash());
    Vocabulary w = Vocabulary::build(text, TokenizerMode::words);
    CHECK(a.hash() != w.hash());
}

TEST_CASE("vocabulary files round-trip") {
    TempFile f("vocab.json");
    Vocabulary v = Vocabulary::build("hello vocab world vocab", TokenizerMode::words);
    v.save(f.path);
    Vocabulary loaded = Vocabulary::load(f.path);
    CHECK(loaded.hash() == v.hash());
    CHECK(loaded.id_of("vocab") == v.id_of("vocab"));
    CHECK(loaded.size() == v.size());
    CHECK_THROWS_AS(Vocabulary::load("/nonexistent/vocab.json"), DataError);
}

TEST_CASE("transduction targets follow the cipher and block reversal") {
    const std::vector<int> cipher = transduction_cipher(99);
    std::set<int> seen(cipher.begin(), cipher.end());
    REQUIRE(seen.size() == 40); // a permutation

    const std::vector<int> src = {5, 6, 7, 8};
    const std::vector<int> tgt = transduction_apply(src, cipher);
    REQUIRE(tgt == std::vector<int>{cipher[8], cipher[7], cipher[6], cipher[5]});

    // partial tail blocks reverse on their own
    const std::vector<int> odd = transduction_apply({1, 2, 3, 4, 9, 10}, cipher);
    REQUIRE(odd == std::vector<int>{cipher[4], cipher[3], cipher[2], cipher[1], cipher[10], cipher[9]});
}

TEST_CASE("transduction corpus is deterministic and exactly rule-generated") {
    Corpus a = synthetic_transduction(7, 100);
    Corpus b = synthetic_transduction(7, 100);
    REQUIRE(a.train.size() == b.train.size());
    REQUIRE(a.valid.size() == 10);
    REQUIRE(a.train[0] == b.train[0]);
    REQUIRE(a.train_src[3] == b.train_src[3]);
    CHECK(synthetic_transduction(8, 100).train[0] != a.train[0]);

    // the oracle: every target equals the rule applied to its source, so a
    // model knowing the rule would score 0 nats/token
    const std::vector<int> cipher = transduction_cipher(7);
    for (std::size_t i = 0; i < a.train.size(); ++i) {
        std::vector<int> alpha(a.train_src[i]);
        for (auto& s : alpha) s -= tokens::reserved;
        std::vector<int> expect = transduction_apply(alpha, cipher);
        for (auto& t : expect) t += tokens::reserved;
        REQUIRE(a.train[i] == expect);
    }
}

TEST_CASE("builtin character corpus is sized, small-vocabulary, reproducible") {
    CorpusSpec spec;
    spec.source = "builtin:chars";
    spec.generator_seed = 5;
    spec.generator_size = 12000;
    Corpus a = load_corpus(spec);
    Corpus b = load_corpus(spec);
    CHECK(a.vocab.size() <= 40);
    CHECK(a.vocab.hash() == b.vocab.hash());
    REQUIRE_FALSE(a.train.empty());
    REQUIRE_FALSE(a.valid.empty());
    REQUIRE(a.train[0] == b.train[0]);

    std::size_t total = 0;
    for (const auto& s : a.train) total += s.size();
    CHECK(total > 10000);

    std::string text = synthetic_char_text(5, 12000);
    CHECK(text.size() >= 12000);
    CHECK(synthetic_char_text(6, 12000) != text);
}

TEST_CASE("unknown generators and unreadable files fail loudly") {
    CorpusSpec spec;
    spec.source = "builtin:nope";
    CHECK_THROWS_AS(load_corpus(spec), ConfigError);
    spec.source = "/nonexistent/corpus.txt";
    CHECK_THROWS_AS(load_corpus(spec), DataError);
    spec.source = "builtin:chars";
    spec.train_fraction = 1.0;
    CHECK_THROWS_AS(load_corpus(spec), ConfigError);
}

TEST_CASE("batches pad to the compression multiple") {
    // two 13-token rows: 13 + EOS = 14, padded to 16 under K=8
    Corpus c = tiny_corpus({row_of(7, 13), row_of(8, 13)}, {row_of(9, 13), row_of(9, 13)});
    Batcher batcher(c, Split::train, 2, 64, 8, 1);
    SequenceBatch b = batcher.at(0);
    REQUIRE(b.length == 16);
    REQUIRE_NOTHROW(b.validate(8));
    float mask_sum = 0.0f;
    for (float m : b.mask) mask_sum += m;
    CHECK(mask_sum == 28.0f); // (13 + 1) per row

    // a 16-token row crosses into the next multiple: 17 -> 24
    Corpus c2 = tiny_corpus({row_of(7, 16), row_of(8, 16)}, {row_of(9, 16), row_of(9, 16)});
    SequenceBatch b2 = Batcher(c2, Split::train, 2, 64, 8, 1).at(0);
    REQUIRE(b2.length == 24);
}

TEST_CASE("batching is a pure function of corpus, seed and step") {
    std::vector<std::vector<int>> rows;
    for (int i = 0; i < 9; ++i) rows.push_back({4 + i, 4 + i, 4 + i});
    Corpus c = tiny_corpus(rows, {row_of(5, 3), row_of(6, 3)});
    Batcher x(c, Split::train, 2, 64, 4, 77);
    Batcher y(c, Split::train, 2, 64, 4, 77);
    REQUIRE(x.batches_per_epoch() == 4);
    for (std::int64_t t : {0, 1, 3, 4, 9}) {
        SequenceBatch bx = x.at(t);
        SequenceBatch by = y.at(t);
        REQUIRE(bx.token_ids == by.token_ids);
        REQUIRE(bx.mask == by.mask);
    }
    // a different seed rearranges rows
    Batcher z(c, Split::train, 2, 64, 4, 78);
    bool any_diff = false;
    for (std::int64_t t = 0; t < 4; ++t)
        if (z.at(t).token_ids != x.at(t).token_ids) any_diff = true;
    CHECK(any_diff);
}

TEST_CASE("one epoch touches distinct rows once") {
    std::vector<std::vector<int>> rows;
    for (int i = 0; i < 7; ++i) rows.push_back({4 + i});
    Corpus c = tiny_corpus(rows, {row_of(4, 1), row_of(5, 1)});
    Batcher batcher(c, Split::train, 2, 64, 4, 3);
    REQUIRE(batcher.batches_per_epoch() == 3);
    std::set<int> seen;
    for (std::int64_t t = 0; t < 3; ++t) {
        SequenceBatch b = batcher.at(t);
        for (int r = 0; r < b.batch; ++r) seen.insert(b.token_ids[static_cast<std::size_t>(r) * b.length]);
    }
    CHECK(seen.size() == 6); // six distinct first tokens across the epoch
}

TEST_CASE("overlong rows are truncated and counted") {
    Corpus c = tiny_corpus({row_of(7, 10), row_of(8, 3)}, {row_of(9, 2), row_of(9, 2)});
    Batcher batcher(c, Split::train, 2, 4, 4, 1);
    CHECK(batcher.truncated() == 1);
    SequenceBatch b = batcher.at(0);
    REQUIRE(b.length == 8); // 4 kept + EOS = 5 -> 8
    float mask_sum = 0.0f;
    for (float m : b.mask) mask_sum += m;
    CHECK(mask_sum == 9.0f); // 5 + 4
}

TEST_CASE("conditional batches group rows by source length") {
    Corpus c = synthetic_transduction(13, 300);
    Batcher batcher(c, Split::train, 4, 64, 4, 9);
    REQUIRE(batcher.batches_per_epoch() > 0);
    for (std::int64_t t = 0; t < batcher.batches_per_epoch(); ++t) {
        SequenceBatch b = batcher.at(t);
        REQUIRE((b.source_len == 4 || b.source_len == 8 || b.source_len == 12));
        REQUIRE(b.source_ids.size() == static_cast<std::size_t>(b.batch) * b.source_len);
        REQUIRE_NOTHROW(b.validate(4));
        // target length tracks its source: same length plus eos, padded
        REQUIRE(b.length == ((b.source_len + 1 + 3) / 4) * 4);
    }
}

TEST_CASE("batcher rejects impossible setups") {
    Corpus c = tiny_corpus({row_of(7, 2)}, {row_of(9, 2)});
    CHECK_THROWS_AS(Batcher(c, Split::train, 2, 64, 4, 1), DataError); // one row, batch of two
    CHECK_THROWS_AS(Batcher(c, Split::train, 0, 64, 4, 1), ConfigError);
    Batcher ok(c, Split::train, 1, 64, 4, 1);
    CHECK_THROWS_AS(ok.at(-1), RangeError);
}

TEST_CASE("corpus files round-trip with a guarded vocabulary hash") {
    TempFile f("corpus.txt");
    Corpus c = synthetic_transduction(21, 60);
    save_corpus(c, f.path);
    Corpus back = load_corpus_file(f.path, c.vocab);
    REQUIRE(back.conditional);
    REQUIRE(back.train == c.train);
    REQUIRE(back.valid == c.valid);
    REQUIRE(back.train_src == c.train_src);
    REQUIRE(back.valid_src == c.valid_src);
    CHECK(back.seed == c.seed);

    Vocabulary other = Vocabulary::build("abc", TokenizerMode::chars);
    CHECK_THROWS_AS(load_corpus_file(f.path, other), DataError);

    TempFile g("corpus_u.txt");
    CorpusSpec spec;
    spec.source = "builtin:chars";
    spec.generator_size = 4000;
    Corpus u = load_corpus(spec);
    save_corpus(u, g.path);
    Corpus uback = load_corpus_file(g.path, u.vocab);
    REQUIRE_FALSE(uback.conditional);
    REQUIRE(uback.train == u.train);
    REQUIRE(uback.valid == u.valid);
}
