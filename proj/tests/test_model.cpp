#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <random>

#include "kvcomm/model.hpp"

using namespace kvcomm;

namespace {

ModelConfig micro_config() {
    ModelConfig c;
    c.n_layers = 4;
    c.n_heads = 4;
    c.n_kv_heads = 2;
    c.head_dim = 8;
    c.d_model = 32;
    c.d_ff = 64;
    c.vocab_size = 64;
    return c;
}

std::vector<std::uint32_t> random_tokens(std::size_t n, std::uint32_t vocab, std::mt19937& rng) {
    std::vector<std::uint32_t> out(n);
    for (auto& t : out) t = rng() % vocab;
    return out;
}

float max_abs_diff(const std::vector<float>& a, const std::vector<float>& b) {
    REQUIRE(a.size() == b.size());
    float m = 0.0f;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

} // namespace

TEST_CASE("config invariants") {
    ModelConfig c = micro_config();
    CHECK_NOTHROW(c.validate());

    c.d_model = 33;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = micro_config();
    c.n_kv_heads = 3;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = micro_config();
    c.n_layers = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);

    // an L=16/H=4 shape: head_dim 16 forces d_model 64
    ModelConfig big;
    big.n_layers = 16;
    big.n_heads = 4;
    big.n_kv_heads = 2;
    big.head_dim = 16;
    big.d_model = 64;
    big.d_ff = 128;
    big.vocab_size = 256;
    CHECK_NOTHROW(big.validate());
    big.d_model = 128;
    CHECK_THROWS_AS(big.validate(), ConfigError);
}

TEST_CASE("build determinism and model id") {
    const ModelConfig c = micro_config();
    Model a = Model::build(c, 1);
    Model b = Model::build(c, 1);
    CHECK(a.model_id() == b.model_id());

    Model other = Model::build(c, 2);
    CHECK(a.model_id() != other.model_id());

    std::mt19937 rng(1);
    auto tokens = random_tokens(6, c.vocab_size, rng);
    auto [ta, ca] = a.prefill(tokens);
    auto [tb, cb] = b.prefill(tokens);
    CHECK(ta.logits.data == tb.logits.data);
}

TEST_CASE("attention rows are causal, nonnegative and sum to one") {
    const ModelConfig c = micro_config();
    Model m = Model::build(c, 42);
    std::mt19937 rng(2);
    auto tokens = random_tokens(7, c.vocab_size, rng);

    Model::PrefillOptions opts;
    opts.capture.attention = true;
    auto [trace, cache] = m.prefill(tokens, opts);

    for (std::uint32_t l = 0; l < c.n_layers; ++l) {
        const Tensor& a = trace.attention[l];
        REQUIRE(a.shape == std::vector<std::size_t>{c.n_heads, 7, 7});
        for (std::size_t h = 0; h < c.n_heads; ++h)
            for (std::size_t t = 0; t < 7; ++t) {
                float sum = 0.0f;
                for (std::size_t col = 0; col < 7; ++col) {
                    CHECK(a.at(h, t, col) >= 0.0f);
                    if (col > t) CHECK(a.at(h, t, col) == 0.0f); // strict upper triangle
                    sum += a.at(h, t, col);
                }
                CHECK(std::abs(sum - 1.0f) <= 1e-5f);
            }
    }
}

TEST_CASE("injected kv widens the attention span") {
    const ModelConfig c = micro_config();
    Model m = Model::build(c, 5);
    std::mt19937 rng(3);

    auto context = random_tokens(3, c.vocab_size, rng);
    auto [ctx_trace, ctx_cache] = m.prefill(context);

    InjectedKv injected;
    for (std::uint32_t l = 0; l < c.n_layers; ++l) injected[l] = &ctx_cache[l];

    auto query = random_tokens(2, c.vocab_size, rng);
    Model::PrefillOptions opts;
    opts.position_offset = 3;
    opts.injected = &injected;
    opts.capture.attention = true;
    auto [trace, cache] = m.prefill(query, opts);

    for (std::uint32_t l = 0; l < c.n_layers; ++l)
        CHECK(trace.attention[l].shape == std::vector<std::size_t>{c.n_heads, 2, 5});
    // returned cache holds own tokens only
    for (std::uint32_t l = 0; l < c.n_layers; ++l) CHECK(cache[l].seq_len() == 2);
}

TEST_CASE("injected kv with foreign head shapes is rejected") {
    const ModelConfig c = micro_config();
    Model m = Model::build(c, 5);
    LayerKv bad;
    bad.layer_index = 0;
    bad.keys = Tensor({c.n_kv_heads, 2, c.head_dim * 2});
    bad.values = Tensor({c.n_kv_heads, 2, c.head_dim * 2});
    bad.positions = {0, 1};
    InjectedKv injected;
    injected[0] = &bad;
    Model::PrefillOptions opts;
    opts.position_offset = 2;
    opts.injected = &injected;
    CHECK_THROWS_AS(m.prefill({1, 2}, opts), ShapeError);

    InjectedKv out_of_range;
    out_of_range[c.n_layers] = &bad;
    Model::PrefillOptions opts2;
    opts2.injected = &out_of_range;
    CHECK_THROWS_AS(m.prefill({1, 2}, opts2), ConfigError);
}

TEST_CASE("position collision with injected kv is rejected") {
    const ModelConfig c = micro_config();
    Model m = Model::build(c, 5);
    std::mt19937 rng(4);
    auto context = random_tokens(3, c.vocab_size, rng);
    auto [ctx_trace, ctx_cache] = m.prefill(context);
    InjectedKv injected;
    injected[0] = &ctx_cache[0];

    auto query = random_tokens(2, c.vocab_size, rng);
    Model::PrefillOptions opts;
    opts.position_offset = 2; // injected positions {0,1,2} overlap [2,4)
    opts.injected = &injected;
    CHECK_THROWS_AS(m.prefill(query, opts), ConfigError);
}

TEST_CASE("prefill matches prefill-then-decode on the last row") {
    const ModelConfig c = micro_config();
    Model m = Model::build(c, 9);
    std::mt19937 rng(5);
    auto tokens = random_tokens(8, c.vocab_size, rng);

    std::vector<std::uint32_t> prefix(tokens.begin(), tokens.end() - 1);
    auto [trace_full, cache_full] = m.prefill(tokens);
    auto [trace_pre, cache_pre] = m.prefill(prefix);

    auto step = m.decode_step(tokens.back(), cache_pre, 7);
    const std::size_t v = c.vocab_size;
    std::vector<float> full_last(trace_full.logits.data.end() - v, trace_full.logits.data.end());
    CHECK(max_abs_diff(step, full_last) <= 1e-4f);

    for (std::uint32_t l = 0; l < c.n_layers; ++l) CHECK(cache_pre[l].seq_len() == 8);
}

TEST_CASE("decode is deterministic and rejects stale positions") {
    const ModelConfig c = micro_config();
    Model m = Model::build(c, 13);
    std::mt19937 rng(6);
    auto tokens = random_tokens(5, c.vocab_size, rng);
    auto [trace, cache] = m.prefill(tokens);

    KvCacheSet cache_a = cache;
    KvCacheSet cache_b = cache;
    auto la = m.decode_step(7, cache_a, 5);
    auto lb = m.decode_step(7, cache_b, 5);
    CHECK(la == lb);
    for (std::uint32_t l = 0; l < c.n_layers; ++l)
        CHECK(cache_a[l].seq_len() == cache[l].seq_len() + 1);

    CHECK_THROWS_AS(m.decode_step(7, cache_a, 3), ConfigError);
}

TEST_CASE("generate is greedy and deterministic") {
    const ModelConfig c = micro_config();
    Model m = Model::build(c, 21);
    std::mt19937 rng(7);
    auto prompt = random_tokens(4, c.vocab_size, rng);

    CHECK(m.generate(prompt, 0).empty());

    auto first = m.generate(prompt, 6);
    auto second = m.generate(prompt, 6);
    CHECK(first == second);
    CHECK(first.size() == 6);

    // loop oracle: step-by-step argmax over decode_step logits
    auto [trace, cache] = m.prefill(prompt);
    const std::size_t v = c.vocab_size;
    std::vector<float> logits(trace.logits.data.end() - v, trace.logits.data.end());
    std::vector<std::uint32_t> manual;
    std::uint32_t pos = 4;
    for (int i = 0; i < 6; ++i) {
        const std::uint32_t tok = argmax(logits);
        manual.push_back(tok);
        if (i + 1 < 6) logits = m.decode_step(tok, cache, pos++);
    }
    CHECK(first == manual);

    // an eos id equal to the first greedy token stops generation immediately
    auto stopped = m.generate(prompt, 6, first[0]);
    CHECK(stopped == std::vector<std::uint32_t>{first[0]});
}

TEST_CASE("gqa maps query head h to kv head h*n_kv/H") {
    const ModelConfig c = micro_config(); // H=4, n_kv=2: heads {0,1}->0, {2,3}->1
    CHECK(c.kv_head(0) == 0);
    CHECK(c.kv_head(1) == 0);
    CHECK(c.kv_head(2) == 1);
    CHECK(c.kv_head(3) == 1);

    // inject keys where kv head 0 is silent (all zero) and kv head 1 holds a
    // huge spike per basis direction: heads reading kv head 1 must lock onto
    // one injected row, heads reading kv head 0 cannot.
    Model m = Model::build(c, 33);
    const std::size_t rows = c.head_dim; // one spike per basis vector
    LayerKv crafted;
    crafted.layer_index = 0;
    crafted.keys = Tensor({c.n_kv_heads, rows, c.head_dim});
    crafted.values = Tensor({c.n_kv_heads, rows, c.head_dim});
    for (std::size_t r = 0; r < rows; ++r) {
        crafted.keys.at(1, r, r) = 1e4f;
        crafted.positions.push_back(static_cast<std::uint32_t>(r));
    }

    InjectedKv injected;
    injected[0] = &crafted;
    Model::PrefillOptions opts;
    opts.position_offset = static_cast<std::uint32_t>(rows);
    opts.injected = &injected;
    opts.capture.attention = true;
    auto [trace, cache] = m.prefill({5}, opts);

    const Tensor& a = trace.attention[0];
    REQUIRE(a.shape == std::vector<std::size_t>{c.n_heads, 1, rows + 1});
    auto top1 = [&](std::size_t h) {
        float mx = 0.0f;
        for (std::size_t col = 0; col <= rows; ++col) mx = std::max(mx, a.at(h, 0, col));
        return mx;
    };
    CHECK(top1(0) < 0.9f);
    CHECK(top1(1) < 0.9f);
    CHECK(top1(2) > 0.99f);
    CHECK(top1(3) > 0.99f);
}

TEST_CASE("save/load reproduces logits exactly") {
    const ModelConfig c = micro_config();
    Model m = Model::build(c, 77);
    const std::string path = "/tmp/kvcomm_test_model.bin";
    m.save(path);
    Model loaded = Model::load(path);
    CHECK(loaded.model_id() == m.model_id());

    std::mt19937 rng(9);
    auto tokens = random_tokens(6, c.vocab_size, rng);
    auto [ta, ca] = m.prefill(tokens);
    auto [tb, cb] = loaded.prefill(tokens);
    CHECK(max_abs_diff(ta.logits.data, tb.logits.data) <= 1e-7f);
    std::remove(path.c_str());
}

TEST_CASE("layer kv validation") {
    LayerKv kv;
    kv.keys = Tensor({2, 3, 4});
    kv.values = Tensor({2, 3, 4});
    kv.positions = {0, 1, 2};
    CHECK_NOTHROW(kv.validate());

    kv.positions = {0, 2, 1};
    CHECK_THROWS_AS(kv.validate(), ShapeError);
    kv.positions = {0, 1, 2};
    kv.values = Tensor({2, 3, 5});
    CHECK_THROWS_AS(kv.validate(), ShapeError);
}
