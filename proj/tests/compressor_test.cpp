#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "dsqa/compressor.hpp"

using namespace dsqa;

namespace {

CompressorConfig desk_cfg(int k, bool local) {
    CompressorConfig cfg;
    cfg.k = k;
    cfg.local = local;
    cfg.hidden_size = 8;
    cfg.pretrain_steps = 10;
    cfg.semhash.bits = 4;
    cfg.semhash.filter_size = 16;
    cfg.semhash.hidden_size = 8;
    return cfg;
}

DiffArray random_seq(RngState& rng, int B, int N, int H, float span = 0.8f) {
    std::vector<float> v(static_cast<std::size_t>(B) * N * H);
    for (auto& x : v) x = span * (2.0f * static_cast<float>(rng.u01()) - 1.0f);
    return DiffArray::constant({B, N, H}, std::move(v));
}

} // namespace

TEST_CASE("halving_step lengths and residual identity") {
    auto cfg = desk_cfg(1, false);
    RngState rng(41);
    ParamStore store;
    auto params = CompressorParams::create(store, "c", cfg, rng);

    SECTION("even and odd lengths") {
        auto x16 = random_seq(rng, 1, 16, 8);
        REQUIRE(halving_step(x16, params.steps[0]).dim(1) == 8);
        auto x7 = random_seq(rng, 1, 7, 8);
        REQUIRE(halving_step(x7, params.steps[0]).dim(1) == 4);
    }

    SECTION("zero inner convolutions leave only the strided conv of x") {
        for (int c = 0; c < 3; ++c) {
            std::fill(params.steps[0].conv_w[c].values().begin(), params.steps[0].conv_w[c].values().end(), 0.0f);
            std::fill(params.steps[0].conv_b[c].values().begin(), params.steps[0].conv_b[c].values().end(), 0.0f);
        }
        auto x = random_seq(rng, 2, 6, 8);
        NoGradGuard ng;
        auto got = halving_step(x, params.steps[0]);
        auto want = conv1d(x, params.steps[0].down_w, params.steps[0].down_b, 2);
        for (std::size_t i = 0; i < got.size(); ++i)
            REQUIRE(got.data()[i] == Catch::Approx(want.data()[i]).margin(1e-6));
    }
}

TEST_CASE("compress output lengths") {
    auto cfg = desk_cfg(3, false);
    RngState rng(43);
    ParamStore store;
    auto params = CompressorParams::create(store, "c", cfg, rng);

    SECTION("K-fold reduction") {
        auto s = random_seq(rng, 1, 64, 8);
        auto out = compress(s, cfg, params, Mode::eval, 0, nullptr);
        REQUIRE(out.s_prime.shape() == Shape{1, 8, 8});
    }
    SECTION("ceil division for awkward lengths") {
        NoGradGuard ng;
        for (int N : {1, 3, 8, 9, 17, 64, 127, 128}) {
            auto s = random_seq(rng, 1, N, 8);
            auto out = compress(s, cfg, params, Mode::eval, 0, nullptr);
            CAPTURE(N);
            REQUIRE(out.s_prime.dim(1) == (N + 7) / 8);
        }
    }
    SECTION("empty input is a data error") {
        REQUIRE_THROWS_AS(compress(DiffArray::constant({1, 0, 8}, {}), cfg, params, Mode::eval, 0, nullptr),
                          DataError);
    }
}

TEST_CASE("pretraining bypass") {
    auto cfg = desk_cfg(2, false);
    RngState rng(47);
    ParamStore store;
    auto params = CompressorParams::create(store, "c", cfg, rng);

    SECTION("bypass hands back s_prime itself") {
        RngState drng(1);
        auto s = random_seq(rng, 1, 8, 8);
        auto out = compress(s, cfg, params, Mode::train, 0, &drng);
        REQUIRE(out.bypassed);
        REQUIRE(out.latent.positions() == 0);
        REQUIRE(out.dense_latent.node().get() == out.s_prime.node().get());
    }

    SECTION("no bottleneck parameter receives gradient during bypass") {
        RngState drng(2);
        auto leaf = DiffArray::leaf({1, 8, 8}, std::vector<float>(64, 0.25f));
        auto out = compress(leaf, cfg, params, Mode::train, 5, &drng);
        backward(sum(out.dense_latent));
        for (const char* n : {"c.bottleneck.proj.w", "c.bottleneck.h1a.w", "c.bottleneck.out.w"}) {
            const auto& g = store.at(n).array.grad();
            bool nonzero = false;
            for (float x : g) nonzero |= x != 0.0f;
            REQUIRE_FALSE(nonzero);
        }
        // the convolution stack does train during the bypass
        const auto& cg = store.at("c.step0.conv0.w").array.grad();
        bool conv_grad = false;
        for (float x : cg) conv_grad |= x != 0.0f;
        REQUIRE(conv_grad);
    }

    SECTION("crossing the boundary changes the payload, never the shapes") {
        RngState drng(3);
        auto s = random_seq(rng, 1, 8, 8);
        auto before = compress(s, cfg, params, Mode::train, 9, &drng);
        auto after = compress(s, cfg, params, Mode::train, 10, &drng);
        REQUIRE(before.dense_latent.shape() == after.dense_latent.shape());
        REQUIRE(before.s_prime.shape() == after.s_prime.shape());
        REQUIRE_FALSE(before.latent.positions() > 0);
        REQUIRE(after.latent.positions() == 2);
        for (int id : after.latent.ids) {
            REQUIRE(id >= 0);
            REQUIRE(id < 16);
        }
    }
}

TEST_CASE("local variant locality") {
    auto cfg = desk_cfg(3, true);
    RngState rng(53);
    ParamStore store;
    auto params = CompressorParams::create(store, "c", cfg, rng);

    RngState srng(7);
    auto base_vals = random_seq(srng, 1, 32, 8).values();

    auto latent_of = [&](const std::vector<float>& vals) {
        NoGradGuard ng;
        auto s = DiffArray::constant({1, 32, 8}, vals);
        return compress(s, cfg, params, Mode::eval, 100, nullptr).s_prime.values();
    };

    auto before = latent_of(base_vals);
    auto poked = base_vals;
    poked[17 * 8 + 3] += 2.0f; // input position 17 -> window floor(17/8) = 2
    auto after = latent_of(poked);

    REQUIRE(before.size() == 4 * 8u);
    bool changed[4] = {false, false, false, false};
    for (int t = 0; t < 4; ++t)
        for (int c = 0; c < 8; ++c) changed[t] |= before[t * 8 + c] != after[t * 8 + c];
    REQUIRE_FALSE(changed[0]);
    REQUIRE_FALSE(changed[1]);
    REQUIRE(changed[2]);
    REQUIRE_FALSE(changed[3]);
}

TEST_CASE("receptive field") {
    REQUIRE(receptive_field(desk_cfg(3, true)) == 8);
    REQUIRE(receptive_field(desk_cfg(3, false)) == 12);
    REQUIRE(receptive_field(desk_cfg(1, true)) == 2);
    auto bad = desk_cfg(1, true);
    bad.k = 0;
    REQUIRE_THROWS_AS(receptive_field(bad), ConfigError);
}

TEST_CASE("gumbel bottleneck variant") {
    auto cfg = desk_cfg(2, false);
    cfg.bottleneck = BottleneckKind::gumbel;
    cfg.gumbel.num_symbols = 16;
    cfg.gumbel.tau_start = 1.0f;
    cfg.gumbel.tau_end = 0.5f;
    cfg.gumbel.tau_decay_steps = 100;
    RngState rng(59);
    ParamStore store;
    auto params = CompressorParams::create(store, "c", cfg, rng);

    auto s = random_seq(rng, 2, 8, 8);

    SECTION("eval codes are ids with the right width") {
        auto out = compress(s, cfg, params, Mode::eval, 50, nullptr);
        REQUIRE(out.latent.width == 4);
        REQUIRE(out.latent.positions() == 4);
        REQUIRE(out.dense_latent.shape() == Shape{2, 2, 8});
        REQUIRE_FALSE(out.gumbel_y.defined());
    }
    SECTION("train exposes the relaxation rows") {
        RngState drng(8);
        auto out = compress(s, cfg, params, Mode::train, 50, &drng);
        REQUIRE(out.gumbel_y.defined());
        REQUIRE(out.gumbel_y.shape() == Shape{4, 16});
    }
}

TEST_CASE("compress is reproducible from the rng seed") {
    auto cfg = desk_cfg(2, false);
    cfg.pretrain_steps = 0;
    RngState rng(61);
    ParamStore store;
    auto params = CompressorParams::create(store, "c", cfg, rng);
    auto s = random_seq(rng, 1, 16, 8);

    auto run = [&] {
        RngState drng(99);
        auto out = compress(s, cfg, params, Mode::train, 3, &drng);
        return out.dense_latent.values();
    };
    REQUIRE(run() == run());
}
