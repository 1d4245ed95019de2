#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <vector>

#include "dsqa/bottleneck.hpp"

using namespace dsqa;

namespace {

void fill(DiffArray& a, float v) { std::fill(a.values().begin(), a.values().end(), v); }

SemhashConfig desk_semhash() {
    SemhashConfig cfg;
    cfg.bits = 4;
    cfg.filter_size = 16;
    cfg.hidden_size = 8;
    return cfg;
}

} // namespace

TEST_CASE("pack and unpack ids") {
    SECTION("declared bit order") {
        std::vector<std::uint8_t> zeros(16, 0);
        REQUIRE(pack_bits(zeros.data(), 16) == 0);
        std::vector<std::uint8_t> three(16, 0);
        three[0] = three[1] = 1;
        REQUIRE(pack_bits(three.data(), 16) == 3);
    }
    SECTION("round trip over every 8-bit id") {
        for (int id = 0; id < 256; ++id) {
            auto bits = unpack_id(id, 8);
            REQUIRE(pack_bits(bits.data(), 8) == id);
        }
    }
    SECTION("range errors") {
        REQUIRE_THROWS_AS(unpack_id(256, 8), RangeError);
        REQUIRE_THROWS_AS(unpack_id(-1, 8), RangeError);
    }
    SECTION("code struct keeps both views consistent") {
        auto c = DiscreteCode::from_ids(4, {0, 5, 15});
        REQUIRE(c.positions() == 3);
        REQUIRE(c.bits == std::vector<std::uint8_t>{0, 0, 0, 0, 1, 0, 1, 0, 1, 1, 1, 1});
        auto c2 = DiscreteCode::from_bits(4, c.bits);
        REQUIRE(c2.ids == c.ids);
        REQUIRE_THROWS_AS(DiscreteCode::from_ids(25, {0}), ConfigError);
        REQUIRE_THROWS_AS(DiscreteCode::from_ids(4, {16}), RangeError);
    }
}

TEST_CASE("project_to_bits") {
    auto cfg = desk_semhash();
    RngState rng(3);
    ParamStore store;
    auto params = SemhashParams::create(store, "sh", cfg, rng);

    auto w = DiffArray::constant({10, 8}, std::vector<float>(80, 0.3f));
    auto v = project_to_bits(w, params, cfg);
    REQUIRE(v.shape() == Shape{10, 4});

    fill(params.proj_w, 0.0f);
    auto v0 = project_to_bits(w, params, cfg);
    for (std::size_t i = 0; i < v0.size(); ++i) REQUIRE(v0.data()[i] == 0.0f);

    auto bad = DiffArray::constant({10, 5}, std::vector<float>(50, 0.0f));
    REQUIRE_THROWS_AS(project_to_bits(bad, params, cfg), DimensionError);
}

TEST_CASE("saturating sigmoid endpoints") {
    auto x = DiffArray::constant({3}, {0.0f, 8.0f, -8.0f});
    auto y = saturating_sigmoid(x);
    // 1.2f * 0.5f - 0.1f rounds to exactly 0.5f in float arithmetic
    REQUIRE(y.data()[0] == 0.5f);
    REQUIRE(y.data()[1] == 1.0f);
    REQUIRE(y.data()[2] == 0.0f);
}

TEST_CASE("semhash eval path") {
    auto cfg = desk_semhash();
    cfg.bits = 2;

    SECTION("sign thresholding, positive_is_one") {
        auto v = DiffArray::constant({1, 2}, {3.0f, -3.0f});
        auto out = semhash_forward(v, Mode::eval, cfg, nullptr);
        REQUIRE(out.code.bits == std::vector<std::uint8_t>{1, 0});
        REQUIRE(out.dense_code.values() == std::vector<float>{1.0f, 0.0f});
        REQUIRE(out.code.ids == std::vector<int>{1});
    }
    SECTION("inverted polarity") {
        cfg.bit_polarity = BitPolarity::negative_is_one;
        auto v = DiffArray::constant({1, 2}, {3.0f, -3.0f});
        auto out = semhash_forward(v, Mode::eval, cfg, nullptr);
        REQUIRE(out.code.bits == std::vector<std::uint8_t>{0, 1});
        REQUIRE(out.code.ids == std::vector<int>{2});
    }
    SECTION("deterministic, rng untouched") {
        RngState rng(5);
        auto p0 = rng.position();
        auto v = DiffArray::constant({3, 2}, {0.2f, -0.4f, 1.0f, 2.0f, -0.1f, -0.2f});
        auto a = semhash_forward(v, Mode::eval, cfg, &rng);
        auto b = semhash_forward(v, Mode::eval, cfg, &rng);
        REQUIRE(rng.position() == p0);
        REQUIRE(a.code.ids == b.code.ids);
        REQUIRE(a.dense_code.values() == b.dense_code.values());
    }
    SECTION("train mode without rng is a state error") {
        auto v = DiffArray::constant({1, 2}, {1.0f, 1.0f});
        REQUIRE_THROWS_AS(semhash_forward(v, Mode::train, cfg, nullptr), StateError);
    }
}

TEST_CASE("semhash train paths") {
    auto cfg = desk_semhash();
    cfg.bits = 4;
    cfg.noise_sigma = 0.0f; // keep branches comparable without noise

    auto make_v = [] {
        return DiffArray::leaf({3, 4}, {0.3f, -0.8f, 1.4f, -0.2f, 2.0f, 0.6f, -1.1f, 0.9f,
                                        -0.5f, 0.4f, -2.2f, 1.7f});
    };

    SECTION("dense branch passes v1 through") {
        cfg.mix_probability = 1.0f;
        RngState rng(11);
        auto v = make_v();
        auto out = semhash_forward(v, Mode::train, cfg, &rng);
        NoGradGuard ng;
        auto v1 = saturating_sigmoid(v);
        REQUIRE(out.dense_code.values() == v1.values());
    }

    SECTION("discrete branch: hard forward, v1 gradient, bit for bit") {
        cfg.mix_probability = 0.0f;
        RngState rng(11);
        auto v = make_v();
        auto out = semhash_forward(v, Mode::train, cfg, &rng);
        for (std::size_t i = 0; i < out.dense_code.size(); ++i) {
            const float want = v.data()[i] > 0.0f ? 1.0f : 0.0f;
            REQUIRE(std::memcmp(&out.dense_code.data()[i], &want, sizeof(float)) == 0);
        }

        auto probe = DiffArray::constant({3, 4}, {0.7f, -1.3f, 0.2f, 2.0f, -0.4f, 1.1f, 0.5f, -0.9f,
                                                  1.9f, -0.6f, 0.8f, -1.5f});
        backward(sum(mul(out.dense_code, probe)));

        auto v_ref = make_v();
        backward(sum(mul(saturating_sigmoid(v_ref), probe)));
        for (std::size_t i = 0; i < v.size(); ++i) {
            const float got = v.grad_at(i), want = v_ref.grad_at(i);
            REQUIRE(std::memcmp(&got, &want, sizeof(float)) == 0);
        }
    }

    SECTION("mixing is drawn per position, not per bit") {
        cfg.mix_probability = 0.5f;
        RngState rng(29);
        // values where v1 and the hard bits never coincide
        auto v = DiffArray::leaf({16, 4}, std::vector<float>(64, 0.9f));
        auto out = semhash_forward(v, Mode::train, cfg, &rng);
        NoGradGuard ng;
        const float soft = saturating_sigmoid(v).data()[0];
        int dense_rows = 0, hard_rows = 0;
        for (int p = 0; p < 16; ++p) {
            bool all_soft = true, all_hard = true;
            for (int i = 0; i < 4; ++i) {
                const float x = out.dense_code.data()[p * 4 + i];
                all_soft &= x == soft;
                all_hard &= x == 1.0f;
            }
            REQUIRE((all_soft || all_hard));
            dense_rows += all_soft;
            hard_rows += all_hard;
        }
        REQUIRE(dense_rows + hard_rows == 16);
        REQUIRE(dense_rows > 0);
        REQUIRE(hard_rows > 0);
    }

    SECTION("same seed reproduces noise and mixing") {
        cfg.noise_sigma = 1.0f;
        auto run = [&] {
            RngState rng(77);
            auto v = make_v();
            auto out = semhash_forward(v, Mode::train, cfg, &rng);
            return out.dense_code.values();
        };
        REQUIRE(run() == run());
    }
}

TEST_CASE("bit_decode_network") {
    auto cfg = desk_semhash();
    RngState rng(13);
    ParamStore store;
    auto params = SemhashParams::create(store, "sh", cfg, rng);

    // dyadic entries so 1 - (1 - vd) round-trips exactly in float
    auto vd = DiffArray::constant({5, 4}, {0.125f, 0.875f, 1.0f, 0.0f, 0.5f, 0.5f, 0.25f, 0.75f,
                                           0.0f, 0.0f, 1.0f, 1.0f, 0.375f, 0.625f, 0.5f, 0.75f,
                                           1.0f, 0.25f, 0.0f, 0.875f});

    SECTION("shape and zero case") {
        auto y = bit_decode_network(vd, params, cfg);
        REQUIRE(y.shape() == Shape{5, 8});
        for (auto& name : {"sh.h1a.w", "sh.h1b.w", "sh.h2.w", "sh.out.w", "sh.h1a.b", "sh.h1b.b",
                           "sh.h2.b", "sh.out.b"})
            fill(store.at(name).array, 0.0f);
        auto z = bit_decode_network(vd, params, cfg);
        for (std::size_t i = 0; i < z.size(); ++i) REQUIRE(z.data()[i] == 0.0f);
    }

    SECTION("complement symmetry between the two input arms") {
        RngState rng2(13);
        ParamStore store2;
        auto swapped = SemhashParams::create(store2, "sh", cfg, rng2);
        std::swap(swapped.h1a_w.values(), swapped.h1b_w.values());
        std::swap(swapped.h1a_b.values(), swapped.h1b_b.values());

        auto complement = add_scalar(neg(vd), 1.0f);
        NoGradGuard ng;
        auto a = bit_decode_network(vd, params, cfg);
        auto b = bit_decode_network(complement, swapped, cfg);
        REQUIRE(a.values() == b.values());
    }

    SECTION("gradients flow to every layer") {
        auto vleaf = DiffArray::leaf({2, 4}, {0.2f, 0.8f, 0.4f, 0.6f, 0.9f, 0.1f, 0.3f, 0.7f});
        backward(sum(bit_decode_network(vleaf, params, cfg)));
        bool any = false;
        for (std::size_t i = 0; i < vleaf.size(); ++i) any |= vleaf.grad_at(i) != 0.0f;
        REQUIRE(any);
        REQUIRE_FALSE(store.at("sh.h1a.w").array.grad().empty());
        REQUIRE_FALSE(store.at("sh.out.w").array.grad().empty());
    }
}

TEST_CASE("gumbel eval path") {
    GumbelConfig cfg;
    cfg.num_symbols = 3;
    RngState rng(19);
    ParamStore store;
    auto params = GumbelParams::create(store, "gb", cfg, 3, rng);

    // identity projection: logits equal the input vector
    fill(params.proj_w, 0.0f);
    for (int i = 0; i < 3; ++i) params.proj_w.data()[i * 3 + i] = 1.0f;
    fill(params.proj_b, 0.0f);

    auto w = DiffArray::constant({1, 1, 3}, {0.1f, 5.0f, -2.0f});
    auto out = gumbel_forward(w, Mode::eval, cfg, 0, nullptr, params);
    REQUIRE(out.ids == std::vector<int>{1});

    SECTION("dense code is the embedding row") {
        for (int c = 0; c < 3; ++c) REQUIRE(out.dense_code.data()[c] == params.embedding.data()[3 + c]);
        REQUIRE(out.dense_code.shape() == Shape{1, 1, 3});
    }
    SECTION("argmax invariant to constant logit shift") {
        fill(params.proj_b, 13.5f);
        auto shifted = gumbel_forward(w, Mode::eval, cfg, 0, nullptr, params);
        REQUIRE(shifted.ids == out.ids);
    }
    SECTION("train mode without rng is a state error") {
        REQUIRE_THROWS_AS(gumbel_forward(w, Mode::train, cfg, 1, nullptr, params), StateError);
    }
}

TEST_CASE("gumbel relaxation math") {
    SECTION("low temperature, separated logits, zero noise: nearly one-hot") {
        auto logits = DiffArray::constant({2, 3}, {9.0f, 1.0f, 0.0f, -3.0f, 4.0f, -2.0f});
        auto zero = DiffArray::constant({2, 3}, std::vector<float>(6, 0.0f));
        auto y = gumbel_relax(logits, zero, 0.05f);
        REQUIRE(y.data()[0] > 0.99f);
        REQUIRE(y.data()[4] > 0.99f);
    }
    SECTION("uniform logits, zero noise: uniform at any temperature") {
        auto logits = DiffArray::constant({1, 4}, {0.7f, 0.7f, 0.7f, 0.7f});
        auto zero = DiffArray::constant({1, 4}, std::vector<float>(4, 0.0f));
        for (float tau : {0.1f, 1.0f, 3.0f}) {
            auto y = gumbel_relax(logits, zero, tau);
            for (int i = 0; i < 4; ++i) REQUIRE(y.data()[i] == Catch::Approx(0.25f).margin(1e-6));
        }
    }
    SECTION("tau must be positive") {
        auto l = DiffArray::constant({1, 2}, {0.0f, 0.0f});
        REQUIRE_THROWS_AS(gumbel_relax(l, l, 0.0f), ConfigError);
    }
}

TEST_CASE("gumbel train path") {
    GumbelConfig cfg;
    cfg.num_symbols = 8;
    cfg.tau_start = 1.5f;
    cfg.tau_end = 0.5f;
    cfg.tau_decay_steps = 100;
    RngState init(23);
    ParamStore store;
    auto params = GumbelParams::create(store, "gb", cfg, 6, init);

    auto w = DiffArray::leaf({2, 2, 6}, std::vector<float>(24, 0.4f));

    SECTION("soft code mixes embedding rows and is differentiable") {
        RngState rng(31);
        auto out = gumbel_forward(w, Mode::train, cfg, 1, &rng, params);
        REQUIRE(out.dense_code.shape() == Shape{2, 2, 6});
        REQUIRE(out.y.shape() == Shape{4, 8});
        for (int r = 0; r < 4; ++r) {
            double s = 0.0;
            for (int c = 0; c < 8; ++c) s += out.y.data()[r * 8 + c];
            REQUIRE(s == Catch::Approx(1.0).margin(1e-5));
        }
        backward(sum(out.dense_code));
        REQUIRE_FALSE(store.at("gb.embed").array.grad().empty());
        REQUIRE_FALSE(store.at("gb.proj.w").array.grad().empty());
        bool any = false;
        for (std::size_t i = 0; i < w.size(); ++i) any |= w.grad_at(i) != 0.0f;
        REQUIRE(any);
    }
    SECTION("ids follow the sampled relaxation's argmax") {
        RngState rng(31);
        auto out = gumbel_forward(w, Mode::train, cfg, 1, &rng, params);
        for (int r = 0; r < 4; ++r) {
            const float* row = out.y.data() + r * 8;
            REQUIRE(out.ids[static_cast<std::size_t>(r)] ==
                    static_cast<int>(std::max_element(row, row + 8) - row));
        }
    }
    SECTION("temperature schedule") {
        REQUIRE(gumbel_tau(cfg, 0) == Catch::Approx(1.5f));
        REQUIRE(gumbel_tau(cfg, 100) == Catch::Approx(0.5f));
        REQUIRE(gumbel_tau(cfg, 1000) == Catch::Approx(0.5f));
        REQUIRE(gumbel_tau(cfg, 50) == Catch::Approx(std::sqrt(1.5f * 0.5f)).epsilon(1e-4));
    }
    SECTION("bad temperature config rejected") {
        GumbelConfig bad = cfg;
        bad.tau_end = 2.0f; // above tau_start
        REQUIRE_THROWS_AS(bad.validate(), ConfigError);
        bad.tau_start = 0.0f;
        bad.tau_end = 0.0f;
        REQUIRE_THROWS_AS(bad.validate(), ConfigError);
    }
}

TEST_CASE("usage variance penalty") {
    SECTION("concentrated usage maximizes, uniform minimizes") {
        auto onehot = DiffArray::constant({3, 4}, {1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0});
        REQUIRE(usage_variance_penalty(onehot, 2.0f).scalar() == Catch::Approx(0.0f).margin(1e-5));

        auto uniform = DiffArray::constant({2, 4}, std::vector<float>(8, 0.25f));
        REQUIRE(usage_variance_penalty(uniform, 2.0f).scalar() ==
                Catch::Approx(-2.0f * std::log(4.0f)).margin(1e-5));
    }
    SECTION("more even usage is strictly smaller") {
        auto even = DiffArray::constant({2, 2}, {0.5f, 0.5f, 0.5f, 0.5f});
        auto skew = DiffArray::constant({2, 2}, {0.9f, 0.1f, 0.9f, 0.1f});
        REQUIRE(usage_variance_penalty(even, 1.0f).scalar() <
                usage_variance_penalty(skew, 1.0f).scalar());
    }
}
