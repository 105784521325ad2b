#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <random>

#include "kvcomm/baselines.hpp"
#include "kvcomm/comm.hpp"

using namespace kvcomm;

namespace {

ModelConfig comm_config() {
    ModelConfig c;
    c.n_layers = 6;
    c.n_heads = 4;
    c.n_kv_heads = 2;
    c.head_dim = 16;
    c.d_model = 64;
    c.d_ff = 128;
    c.vocab_size = 128;
    return c;
}

std::vector<std::uint32_t> random_tokens(std::size_t n, std::uint32_t vocab, std::mt19937& rng) {
    std::vector<std::uint32_t> out(n);
    for (auto& t : out) t = rng() % vocab;
    return out;
}

std::vector<std::uint32_t> all_layers(std::uint32_t n) {
    std::vector<std::uint32_t> out(n);
    for (std::uint32_t l = 0; l < n; ++l) out[l] = l;
    return out;
}

float max_abs_diff(const std::vector<float>& a, const std::vector<float>& b) {
    REQUIRE(a.size() == b.size());
    float m = 0.0f;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

} // namespace

TEST_CASE("sender payload slices the prefill cache bit-exactly") {
    const ModelConfig cfg = comm_config();
    Model model = Model::build(cfg, 100);
    std::mt19937 rng(1);
    auto context = random_tokens(9, cfg.vocab_size, rng);

    auto [trace, cache] = model.prefill(context);
    KvPayload payload = sender_run(model, context, {1, 4}, KvDtype::F32);
    REQUIRE(payload.selected_count() == 2);
    CHECK(payload.entries[0].keys.data == cache[1].keys.data);
    CHECK(payload.entries[0].values.data == cache[1].values.data);
    CHECK(payload.entries[1].keys.data == cache[4].keys.data);
    CHECK(payload.seq_len() == 9);

    KvPayload all = sender_run(model, context, all_layers(cfg.n_layers), KvDtype::F32);
    CHECK(all.selected_count() == cfg.n_layers);
    KvPayload none = sender_run(model, context, {}, KvDtype::F32);
    CHECK(none.selected_count() == 0);
}

TEST_CASE("empty payload degenerates to the baseline bit-exactly") {
    const ModelConfig cfg = comm_config();
    Model model = Model::build(cfg, 7);
    std::mt19937 rng(2);
    auto context = random_tokens(6, cfg.vocab_size, rng);
    auto query = random_tokens(4, cfg.vocab_size, rng);

    KvPayload none = sender_run(model, context, {}, KvDtype::F32);
    ReceiverResult rr = receiver_run(model, query, none, 8);
    RunResult base = run_baseline(model, query, 8);

    CHECK(rr.tokens == base.tokens);
    CHECK(rr.prefill_logits.data == base.prefill_logits.data);
    REQUIRE(rr.step_logits.size() == base.step_logits.size());
    for (std::size_t i = 0; i < rr.step_logits.size(); ++i)
        CHECK(rr.step_logits[i] == base.step_logits[i]);
}

TEST_CASE("full payload from an identical model reproduces skyline logits") {
    const ModelConfig cfg = comm_config();
    Model model = Model::build(cfg, 55);
    std::mt19937 rng(3);
    auto context = random_tokens(10, cfg.vocab_size, rng);
    auto query = random_tokens(5, cfg.vocab_size, rng);
    const std::uint32_t max_new = 8;

    KvPayload payload = sender_run(model, context, all_layers(cfg.n_layers), KvDtype::F32);
    ReceiverResult rr = receiver_run(model, query, payload, max_new);
    RunResult sky = run_skyline(model, context, query, max_new);

    // query span of the skyline prefill
    const std::size_t v = cfg.vocab_size;
    for (std::size_t t = 0; t < query.size(); ++t) {
        std::vector<float> sky_row(sky.prefill_logits.data.begin() + (context.size() + t) * v,
                                   sky.prefill_logits.data.begin() + (context.size() + t + 1) * v);
        std::vector<float> kv_row(rr.prefill_logits.data.begin() + t * v,
                                  rr.prefill_logits.data.begin() + (t + 1) * v);
        CHECK(max_abs_diff(sky_row, kv_row) <= 1e-4f);
    }
    CHECK(rr.tokens == sky.tokens);
    REQUIRE(rr.step_logits.size() == sky.step_logits.size());
    for (std::size_t i = 0; i < rr.step_logits.size(); ++i)
        CHECK(max_abs_diff(rr.step_logits[i], sky.step_logits[i]) <= 1e-4f);
}

TEST_CASE("mismatched sender id warns but proceeds; config mismatch fails") {
    const ModelConfig cfg = comm_config();
    Model receiver = Model::build(cfg, 1);
    Model finetuned = Model::build(cfg, 2); // same shape, different weights
    std::mt19937 rng(4);
    auto context = random_tokens(5, cfg.vocab_size, rng);
    auto query = random_tokens(3, cfg.vocab_size, rng);

    KvPayload payload = sender_run(finetuned, context, {0, 3}, KvDtype::F32);
    ReceiverResult rr = receiver_run(receiver, query, payload, 4);
    CHECK(!rr.warnings.empty());
    CHECK(rr.tokens.size() == 4);

    ModelConfig other = cfg;
    other.n_layers = 5;
    Model small = Model::build(other, 1);
    KvPayload bad = sender_run(small, context, {0}, KvDtype::F32);
    CHECK_THROWS_AS(receiver_run(receiver, query, bad, 4), ProtocolError);
}

TEST_CASE("transport transparency and wire accounting") {
    const ModelConfig cfg = comm_config();
    Model model = Model::build(cfg, 99);
    std::mt19937 rng(5);
    auto context = random_tokens(7, cfg.vocab_size, rng);
    auto query = random_tokens(4, cfg.vocab_size, rng);

    Session session;
    session.sender = &model;
    session.receiver = &model;
    session.layers = {0, 2, 5};

    session.transport = TransportKind::InProcess;
    EndToEndResult in_proc = end_to_end(session, context, query, 6);

    session.transport = TransportKind::File;
    session.file_path = "/tmp/kvcomm_test_payload.bin";
    EndToEndResult file = end_to_end(session, context, query, 6);

    session.transport = TransportKind::Tcp;
    session.options.address = "127.0.0.1:0";
    EndToEndResult tcp = end_to_end(session, context, query, 6);

    CHECK(in_proc.receiver.tokens == file.receiver.tokens);
    CHECK(in_proc.receiver.tokens == tcp.receiver.tokens);

    KvPayload reference = sender_run(model, context, session.layers, KvDtype::F32);
    const std::size_t expect_bytes = serialize(reference).size();
    CHECK(in_proc.cost.bytes_on_wire == expect_bytes);
    CHECK(file.cost.bytes_on_wire == expect_bytes);
    CHECK(tcp.cost.bytes_on_wire == expect_bytes);

    CHECK(in_proc.cost.sender_prefill_flops > 0);
    CHECK(in_proc.cost.receiver_prefill_flops > 0);
    CHECK(in_proc.cost.receiver_decode_flops > 0);
    std::remove(session.file_path.c_str());
}

TEST_CASE("payload bytes grow strictly with M at fixed sequence") {
    const ModelConfig cfg = comm_config();
    Model model = Model::build(cfg, 12);
    std::mt19937 rng(6);
    auto context = random_tokens(8, cfg.vocab_size, rng);

    std::size_t prev = 0;
    for (std::uint32_t m = 0; m <= cfg.n_layers; ++m) {
        std::vector<std::uint32_t> layers;
        for (std::uint32_t l = 0; l < m; ++l) layers.push_back(l);
        KvPayload p = sender_run(model, context, layers, KvDtype::F32);
        const std::size_t bytes = serialize(p).size();
        if (m > 0) CHECK(bytes > prev);
        prev = bytes;
    }

    // f16 payloads are about half the body size
    KvPayload full32 = sender_run(model, context, all_layers(cfg.n_layers), KvDtype::F32);
    KvPayload full16 = sender_run(model, context, all_layers(cfg.n_layers), KvDtype::F16);
    CHECK(serialize(full16).size() < serialize(full32).size());
}

TEST_CASE("tcp round trip delivers payloads bit-exactly") {
    const ModelConfig cfg = comm_config();
    Model model = Model::build(cfg, 31);
    std::mt19937 rng(7);
    auto context = random_tokens(6, cfg.vocab_size, rng);
    KvPayload payload = sender_run(model, context, {1, 3}, KvDtype::F32);
    std::vector<std::uint8_t> bytes = serialize(payload);

    KvPayload received;
    bool got = false;
    TransportOptions opts;
    opts.address = "127.0.0.1:0";
    TcpPayloadServer server(opts, [&](KvPayload p) {
        received = std::move(p);
        got = true;
    });
    {
        TransportOptions copts = opts;
        copts.address = "127.0.0.1:" + std::to_string(server.port());
        TcpPayloadClient client(copts);
        client.send_payload(bytes);
    }
    server.stop();
    REQUIRE(got);
    CHECK(serialize(received) == bytes);
}

TEST_CASE("tcp nacks corrupt and truncated frames with distinct codes") {
    const ModelConfig cfg = comm_config();
    Model model = Model::build(cfg, 32);
    std::mt19937 rng(8);
    auto context = random_tokens(5, cfg.vocab_size, rng);
    KvPayload payload = sender_run(model, context, {2}, KvDtype::F32);
    std::vector<std::uint8_t> bytes = serialize(payload);

    TransportOptions opts;
    opts.address = "127.0.0.1:0";
    int deliveries = 0;
    TcpPayloadServer server(opts, [&](KvPayload) { ++deliveries; });
    opts.address = "127.0.0.1:" + std::to_string(server.port());

    {
        TcpPayloadClient client(opts);
        std::vector<std::uint8_t> corrupt = bytes;
        corrupt[20] ^= 0xFF;
        CHECK(client.send_frame_raw(corrupt) == ack_code_for(ErrorCode::BadCrc));
    }
    {
        TcpPayloadClient client(opts);
        CHECK(client.send_frame_truncated(bytes, bytes.size() / 2) ==
              ack_code_for(ErrorCode::Truncated));
    }
    server.stop();
    CHECK(deliveries == 0);
}

TEST_CASE("a session rejects structurally different sender and receiver") {
    const ModelConfig cfg = comm_config();
    Model receiver = Model::build(cfg, 1);
    ModelConfig other = cfg;
    other.n_heads = 8;
    other.n_kv_heads = 4;
    other.d_model = other.n_heads * other.head_dim;
    Model sender = Model::build(other, 1);

    Session session;
    session.sender = &sender;
    session.receiver = &receiver;
    session.layers = {0};
    CHECK_THROWS_AS(session.validate(), ConfigError);

    session.sender = &receiver;
    session.layers = {cfg.n_layers};
    CHECK_THROWS_AS(session.validate(), ConfigError);
}

TEST_CASE("transport options honour the environment overrides") {
    setenv("KVCOMM_ADDR", "10.1.2.3:4444", 1);
    setenv("KVCOMM_TIMEOUT_MS", "1500", 1);
    TransportOptions opts = TransportOptions::from_env();
    CHECK(opts.address == "10.1.2.3:4444");
    CHECK(opts.timeout_ms == 1500);

    setenv("KVCOMM_TIMEOUT_MS", "-5", 1); // nonsense falls back to the default
    CHECK(TransportOptions::from_env().timeout_ms == 30000);

    unsetenv("KVCOMM_ADDR");
    unsetenv("KVCOMM_TIMEOUT_MS");
    CHECK(TransportOptions::from_env().address == "127.0.0.1:0");
}

TEST_CASE("tcp: 100 sequential payloads on one connection, acks in order") {
    const ModelConfig cfg = comm_config();
    Model model = Model::build(cfg, 33);
    std::mt19937 rng(9);
    auto context = random_tokens(4, cfg.vocab_size, rng);
    auto [trace, cache] = model.prefill(context);

    TransportOptions opts;
    opts.address = "127.0.0.1:0";
    std::vector<std::uint64_t> seen;
    TcpPayloadServer server(opts, [&](KvPayload p) { seen.push_back(p.sender_model_id); });
    opts.address = "127.0.0.1:" + std::to_string(server.port());

    {
        TcpPayloadClient client(opts);
        for (std::uint64_t i = 0; i < 100; ++i) {
            KvPayload p = extract_payload(cache, {0, 1}, KvDtype::F32, /*sender id*/ i);
            std::vector<std::uint8_t> bytes = serialize(p);
            CHECK(client.send_frame_raw(bytes) == 0);
        }
    }
    server.stop();
    REQUIRE(seen.size() == 100);
    for (std::uint64_t i = 0; i < 100; ++i) CHECK(seen[i] == i);
}
