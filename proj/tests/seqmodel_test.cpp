#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <string>
#include <vector>

#include "dsqa/seqmodel.hpp"

using namespace dsqa;

namespace {

CompressorConfig small_comp(int hidden, int k = 2, std::int64_t pretrain = 5) {
    CompressorConfig c;
    c.k = k;
    c.hidden_size = hidden;
    c.pretrain_steps = pretrain;
    c.semhash.bits = 4;
    c.semhash.filter_size = 32;
    c.semhash.hidden_size = hidden;
    return c;
}

TransformerConfig small_main(int hidden = 16, int vocab = 12) {
    TransformerConfig t;
    t.num_layers = 1;
    t.hidden_size = hidden;
    t.filter_size = 32;
    t.num_heads = 2;
    t.vocab_size = vocab;
    t.max_len = 48;
    t.dropout = 0.0f;
    return t;
}

SequenceBatch make_batch(int B, int N, int vocab, unsigned seed, std::vector<int> lengths = {}) {
    SequenceBatch b;
    b.batch = B;
    b.length = N;
    if (lengths.empty()) lengths.assign(B, N);
    b.lengths = lengths;
    b.token_ids.assign(static_cast<std::size_t>(B) * N, tokens::PAD);
    b.mask.assign(b.token_ids.size(), 0.0f);
    RngState rng(seed);
    for (int r = 0; r < B; ++r) {
        for (int j = 0; j < lengths[r]; ++j) {
            int id = tokens::reserved +
                     static_cast<int>(rng.u01() * (vocab - tokens::reserved - 1));
            if (j + 1 == lengths[r]) id = tokens::EOS;
            b.token_ids[static_cast<std::size_t>(r) * N + j] = id;
            b.mask[static_cast<std::size_t>(r) * N + j] = 1.0f;
        }
    }
    return b;
}

struct BundleFixture {
    ParamStore store;
    AugmentedModelBundle bundle;

    explicit BundleFixture(const CompressorConfig& cc, const TransformerConfig& tc, unsigned seed = 3,
                           float latent_weight = 1.0f)
        : bundle([&] {
              RngState rng(seed);
              return AugmentedModelBundle::create(cc, tc, latent_weight, store, rng);
          }()) {}
};

void zero_params_with_prefix(ParamStore& store, const std::string& prefix) {
    for (const auto& p : store.all())
        if (p->name.rfind(prefix, 0) == 0)
            std::fill(p->array.data(), p->array.data() + p->array.size(), 0.0f);
}

float grad_mass_with_prefix(const ParamStore& store, const std::string& prefix) {
    float mag = 0.0f;
    for (const auto& p : store.all())
        if (p->name.rfind(prefix, 0) == 0)
            for (std::size_t i = 0; i < p->array.size(); ++i) mag += std::abs(p->array.grad_at(i));
    return mag;
}

} // namespace

TEST_CASE("augmented input interleaves reversed latent, separator, tokens") {
    const int B = 2, H = 4;
    std::vector<float> lat(static_cast<std::size_t>(B) * 3 * H);
    for (std::size_t i = 0; i < lat.size(); ++i) lat[i] = static_cast<float>(i);
    DiffArray latent = DiffArray::constant({B, 3, H}, std::move(lat));
    DiffArray s = DiffArray::zeros({B, 24, H});
    DiffArray sep = DiffArray::constant({H}, {9, 9, 9, 9});

    AugmentedLayout lay = build_augmented_input(latent, s, sep);
    REQUIRE(lay.total == 28);
    REQUIRE(lay.prefix_len == 0);
    REQUIRE(lay.latent_len == 3);
    REQUIRE(lay.sep_pos == 3);
    REQUIRE(lay.s_start == 4);
    REQUIRE(lay.input.shape() == Shape{B, 28, H});
    // position 0 of the prefix is the last latent vector
    for (int h = 0; h < H; ++h) {
        CHECK(lay.input.values()[h] == latent.values()[2 * H + h]);
        CHECK(lay.input.values()[2 * H + h] == latent.values()[h]);
        CHECK(lay.input.values()[3 * H + h] == 9.0f);
    }
}

TEST_CASE("conditional layout matches the documented arithmetic") {
    const int B = 1, H = 4;
    DiffArray latent = DiffArray::zeros({B, 2, H});
    DiffArray s = DiffArray::zeros({B, 16, H});
    DiffArray src = DiffArray::zeros({B, 11, H}); // ten source tokens plus boundary
    DiffArray sep = DiffArray::zeros({H});
    AugmentedLayout lay = build_augmented_input(latent, s, sep, &src);
    CHECK(lay.total == 30);
    CHECK(lay.prefix_len == 11);
    CHECK(lay.sep_pos == 13);
    CHECK(lay.s_start == 14);
}

TEST_CASE("empty latent prefix is rejected") {
    DiffArray latent = DiffArray::zeros({1, 0, 4});
    DiffArray s = DiffArray::zeros({1, 8, 4});
    DiffArray sep = DiffArray::zeros({4});
    REQUIRE_THROWS_AS(build_augmented_input(latent, s, sep), ConfigError);
}

TEST_CASE("latent targets reverse the code and mask padding-only windows") {
    DiscreteCode code = DiscreteCode::from_ids(4, {7, 3, 11, 5}); // two rows of two
    SequenceBatch b = make_batch(2, 8, 12, 51, {8, 3});
    LatentTargets t = latent_targets_prefix_order(code, b, 4);
    REQUIRE(t.ids == std::vector<int>{3, 7, 5, 11});
    // row 1 covers tokens [0,4) and [4,8); only the first window holds real tokens
    REQUIRE(t.mask == std::vector<float>{1, 1, 0, 1});
}

TEST_CASE("batch validation rejects structural mistakes") {
    SequenceBatch b = make_batch(2, 8, 12, 52);
    REQUIRE_NOTHROW(b.validate(4));
    REQUIRE_THROWS_AS(b.validate(3), DataError); // 8 is not a multiple of 3

    SequenceBatch bad = b;
    bad.mask[1] = 0.0f; // mask says padding, token says otherwise
    REQUIRE_THROWS_AS(bad.validate(4), DataError);

    SequenceBatch bad2 = b;
    bad2.mask[2] = 0.5f;
    REQUIRE_THROWS_AS(bad2.validate(4), DataError);

    SequenceBatch empty;
    REQUIRE_THROWS_AS(empty.validate(1), DataError);
}

TEST_CASE("bundle rejects a hidden size mismatch and foreign token ids") {
    CompressorConfig cc = small_comp(16);
    TransformerConfig tc = small_main(24);
    ParamStore store;
    RngState rng(5);
    REQUIRE_THROWS_AS(AugmentedModelBundle::create(cc, tc, 1.0f, store, rng), ConfigError);

    BundleFixture fx(small_comp(16), small_main());
    SequenceBatch b = make_batch(1, 8, 12, 53);
    b.token_ids[0] = 99;
    REQUIRE_THROWS_AS(forward_pass(b, fx.bundle, 0, nullptr, Mode::eval), ConfigError);
}

TEST_CASE("bypass phase trains the sequence loss only") {
    BundleFixture fx(small_comp(16), small_main());
    SequenceBatch b = make_batch(2, 8, 12, 54);

    ForwardStats st = forward_pass(b, fx.bundle, 0, nullptr, Mode::eval);
    REQUIRE(st.bypassed);
    REQUIRE(st.latent_len == 2);
    CHECK(st.latent_nll.scalar() == 0.0f);
    CHECK(st.total.scalar() == st.seq_nll.scalar());

    backward(st.total);
    CHECK(grad_mass_with_prefix(fx.store, "comp.step") > 0.0f);
    CHECK(grad_mass_with_prefix(fx.store, "comp.bottleneck") == 0.0f);
    CHECK(grad_mass_with_prefix(fx.store, "latpred") == 0.0f);
    CHECK(grad_mass_with_prefix(fx.store, "main") > 0.0f);
}

TEST_CASE("after the bypass both losses are live and wired to the right parameters") {
    BundleFixture fx(small_comp(16), small_main());
    SequenceBatch b = make_batch(2, 8, 12, 55);
    RngState rng(9);

    ForwardStats st = forward_train(b, fx.bundle, 5, &rng);
    REQUIRE_FALSE(st.bypassed);
    CHECK(st.latent_nll.scalar() > 0.0f);
    CHECK(st.total.scalar() ==
          Catch::Approx(st.seq_nll.scalar() + st.latent_nll.scalar()).epsilon(1e-6));
    // a fresh model should score the 4-bit code near uniform
    CHECK(st.latent_nll.scalar() < std::log(16.0) + 1.0);

    backward(st.total);
    CHECK(grad_mass_with_prefix(fx.store, "comp.step") > 0.0f);
    CHECK(grad_mass_with_prefix(fx.store, "comp.bottleneck") > 0.0f);
    CHECK(grad_mass_with_prefix(fx.store, "latpred") > 0.0f);
    CHECK(grad_mass_with_prefix(fx.store, "main") > 0.0f);
}

TEST_CASE("latent loss weight scales the combined objective") {
    SequenceBatch b = make_batch(2, 8, 12, 56);
    BundleFixture fx1(small_comp(16), small_main(), 3, 1.0f);
    BundleFixture fx2(small_comp(16), small_main(), 3, 0.25f);
    ForwardStats s1 = forward_pass(b, fx1.bundle, 7, nullptr, Mode::eval);
    ForwardStats s2 = forward_pass(b, fx2.bundle, 7, nullptr, Mode::eval);
    CHECK(s1.seq_nll.scalar() == s2.seq_nll.scalar());
    CHECK(s2.total.scalar() ==
          Catch::Approx(s2.seq_nll.scalar() + 0.25 * s2.latent_nll.scalar()).epsilon(1e-6));
}

TEST_CASE("sequence loss ignores the latent predictor entirely") {
    CompressorConfig cc = small_comp(16);
    TransformerConfig tc = small_main();
    tc.dropout = 0.2f;
    SequenceBatch b = make_batch(2, 8, 12, 57);

    BundleFixture fx(cc, tc);
    RngState r1(101);
    ForwardStats before = forward_train(b, fx.bundle, 9, &r1);

    zero_params_with_prefix(fx.store, "latpred");
    RngState r2(101);
    ForwardStats after = forward_train(b, fx.bundle, 9, &r2);

    REQUIRE(std::memcmp(before.seq_nll.data(), after.seq_nll.data(), sizeof(float)) == 0);
    CHECK(before.latent_nll.scalar() != after.latent_nll.scalar());
}

TEST_CASE("blanking the latent prefix changes the sequence loss") {
    BundleFixture fx(small_comp(16), small_main());
    SequenceBatch b = make_batch(2, 8, 12, 58);
    ForwardStats with = forward_pass(b, fx.bundle, 7, nullptr, Mode::eval);
    ForwardOptions opt;
    opt.zero_latent_prefix = true;
    ForwardStats without = forward_pass(b, fx.bundle, 7, nullptr, Mode::eval, opt);
    CHECK(with.seq_nll.scalar() != without.seq_nll.scalar());
    // the code itself is unaffected by the ablation
    REQUIRE(with.comp.latent.ids == without.comp.latent.ids);
}

TEST_CASE("training forward is reproducible from the rng state") {
    CompressorConfig cc = small_comp(16);
    TransformerConfig tc = small_main();
    tc.dropout = 0.1f;
    BundleFixture fx(cc, tc);
    SequenceBatch b = make_batch(2, 8, 12, 59);
    RngState r1(7), r2(7);
    ForwardStats a = forward_train(b, fx.bundle, 12, &r1);
    ForwardStats c = forward_train(b, fx.bundle, 12, &r2);
    REQUIRE(std::memcmp(a.total.data(), c.total.data(), sizeof(float)) == 0);
    REQUIRE(a.comp.latent.ids == c.comp.latent.ids);
}

TEST_CASE("conditional task wires the source through both models") {
    CompressorConfig cc = small_comp(16);
    TransformerConfig tc = small_main(16, 12);
    BundleFixture fx(cc, tc);

    SequenceBatch b = make_batch(2, 8, 12, 60);
    b.source_len = 3;
    b.source_ids = {4, 5, 6, 7, 8, 9};

    ForwardStats st = forward_pass(b, fx.bundle, 7, nullptr, Mode::eval);
    CHECK(st.seq_nll.scalar() > 0.0f);
    CHECK(st.latent_nll.scalar() > 0.0f);

    // a different source must change both channels
    SequenceBatch b2 = b;
    b2.source_ids[0] = 10;
    ForwardStats st2 = forward_pass(b2, fx.bundle, 7, nullptr, Mode::eval);
    CHECK(st.seq_nll.scalar() != st2.seq_nll.scalar());
    CHECK(st.latent_nll.scalar() != st2.latent_nll.scalar());

    // the conditional source embedding of the latent predictor now carries gradient
    RngState trng(13);
    ForwardStats tr = forward_train(b, fx.bundle, 7, &trng);
    backward(tr.total);
    CHECK(grad_mass_with_prefix(fx.store, "latpred.src_embed") > 0.0f);
}

TEST_CASE("single-window sequences exercise the L=1 edge") {
    CompressorConfig cc = small_comp(16, 2, 0); // no bypass
    BundleFixture fx(cc, small_main());
    SequenceBatch b = make_batch(2, 4, 12, 61); // one code position per row
    ForwardStats st = forward_pass(b, fx.bundle, 3, nullptr, Mode::eval);
    REQUIRE(st.latent_len == 1);
    CHECK(st.latent_nll.scalar() > 0.0f);

    SequenceBatch bc = b;
    bc.source_len = 2;
    bc.source_ids = {4, 5, 6, 7};
    ForwardStats stc = forward_pass(bc, fx.bundle, 3, nullptr, Mode::eval);
    REQUIRE(stc.latent_len == 1);
    CHECK(stc.latent_nll.scalar() > 0.0f);
}

TEST_CASE("baseline model scores exactly uniform with a zeroed head") {
    TransformerConfig tc = small_main(16, 12);
    ParamStore store;
    RngState rng(8);
    TransformerParams params = TransformerParams::create(store, "base", tc, rng);
    std::fill(params.out_w.data(), params.out_w.data() + params.out_w.size(), 0.0f);

    SequenceBatch b = make_batch(2, 8, 12, 62, {8, 5});
    DiffArray nll = baseline_nll(b, tc, params, Mode::eval, nullptr);
    CHECK(nll.scalar() == Catch::Approx(std::log(12.0)).margin(1e-5));

    SequenceBatch bc = b;
    bc.source_len = 3;
    bc.source_ids = {4, 5, 6, 7, 8, 9};
    DiffArray cnll = baseline_nll(bc, tc, params, Mode::eval, nullptr);
    CHECK(cnll.scalar() == Catch::Approx(std::log(12.0)).margin(1e-5));
}

TEST_CASE("baseline first prediction conditions on nothing but the start marker") {
    TransformerConfig tc = small_main(16, 12);
    ParamStore store;
    RngState rng(10);
    TransformerParams params = TransformerParams::create(store, "base", tc, rng);

    // two batches that differ only in their final token
    SequenceBatch b1 = make_batch(1, 4, 12, 63);
    SequenceBatch b2 = b1;
    b2.token_ids[3] = b2.token_ids[3] == 5 ? 6 : 5;
    std::vector<float> first_only = {1, 0, 0, 0};
    SequenceBatch m1 = b1, m2 = b2;
    // score only position 0: the perturbed token never enters the input
    m1.mask = first_only;
    m2.mask = first_only;
    for (int j = 1; j < 4; ++j) {
        m1.token_ids[j] = tokens::PAD;
        m2.token_ids[j] = tokens::PAD;
    }
    m1.lengths = {1};
    m2.lengths = {1};
    DiffArray n1 = baseline_nll(m1, tc, params, Mode::eval, nullptr);
    DiffArray n2 = baseline_nll(m2, tc, params, Mode::eval, nullptr);
    // identical inputs after masking, so identical scores
    REQUIRE(std::memcmp(n1.data(), n2.data(), sizeof(float)) == 0);
}

TEST_CASE("gumbel bottleneck variant trains end to end with the usage penalty") {
    CompressorConfig cc;
    cc.k = 2;
    cc.hidden_size = 16;
    cc.pretrain_steps = 0;
    cc.bottleneck = BottleneckKind::gumbel;
    cc.gumbel.num_symbols = 16;
    cc.gumbel.variance_penalty_weight = 0.1f;
    BundleFixture fx(cc, small_main());
    REQUIRE(fx.bundle.latent_vocab() == 16);

    SequenceBatch b = make_batch(2, 8, 12, 64);
    RngState rng(11);
    ForwardStats st = forward_train(b, fx.bundle, 3, &rng);
    // the usage penalty is negative entropy, so it pulls total below seq + latent
    CHECK(st.total.scalar() <
          st.seq_nll.scalar() + st.latent_nll.scalar() + 1e-6f);
    backward(st.total);
    CHECK(grad_mass_with_prefix(fx.store, "comp.bottleneck") > 0.0f);

    ForwardStats ev = forward_pass(b, fx.bundle, 3, nullptr, Mode::eval);
    for (int id : ev.comp.latent.ids) CHECK((id >= 0 && id < 16));
}
