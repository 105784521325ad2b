#include <doctest.h>

#include <cstring>
#include <random>

#include "kvcomm/crc32.hpp"
#include "kvcomm/model.hpp"
#include "kvcomm/payload.hpp"

using namespace kvcomm;

namespace {

LayerKv random_layer_kv(std::uint32_t layer, std::size_t kv_heads, std::size_t seq,
                        std::size_t head_dim, std::uint32_t first_pos, std::mt19937& rng) {
    std::uniform_real_distribution<float> dist(-2.0f, 2.0f);
    LayerKv out;
    out.layer_index = layer;
    out.keys = Tensor({kv_heads, seq, head_dim});
    out.values = Tensor({kv_heads, seq, head_dim});
    for (float& v : out.keys.data) v = dist(rng);
    for (float& v : out.values.data) v = dist(rng);
    for (std::size_t i = 0; i < seq; ++i)
        out.positions.push_back(first_pos + static_cast<std::uint32_t>(i));
    return out;
}

KvCacheSet random_cache(std::size_t layers, std::size_t kv_heads, std::size_t seq,
                        std::size_t head_dim, std::mt19937& rng) {
    KvCacheSet cache;
    for (std::size_t l = 0; l < layers; ++l)
        cache.push_back(
            random_layer_kv(static_cast<std::uint32_t>(l), kv_heads, seq, head_dim, 0, rng));
    // one shared positions list payload-wide
    for (std::size_t l = 1; l < layers; ++l) cache[l].positions = cache[0].positions;
    return cache;
}

} // namespace

TEST_CASE("concat_inject puts incoming rows first") {
    std::mt19937 rng(1);
    LayerKv incoming = random_layer_kv(0, 2, 3, 4, 0, rng);
    LayerKv own = random_layer_kv(0, 2, 2, 4, 3, rng);

    LayerKv merged = concat_inject(own, incoming);
    CHECK(merged.seq_len() == 5);
    for (std::size_t g = 0; g < 2; ++g)
        for (std::size_t t = 0; t < 3; ++t)
            for (std::size_t j = 0; j < 4; ++j) {
                CHECK(merged.keys.at(g, t, j) == incoming.keys.at(g, t, j));
                CHECK(merged.values.at(g, t, j) == incoming.values.at(g, t, j));
            }
    // slicing recovers both inputs bit-exactly
    for (std::size_t g = 0; g < 2; ++g)
        for (std::size_t t = 0; t < 2; ++t)
            for (std::size_t j = 0; j < 4; ++j) {
                CHECK(merged.keys.at(g, 3 + t, j) == own.keys.at(g, t, j));
                CHECK(merged.values.at(g, 3 + t, j) == own.values.at(g, t, j));
            }
    CHECK(merged.positions == std::vector<std::uint32_t>{0, 1, 2, 3, 4});
}

TEST_CASE("concat_inject: empty incoming is the identity") {
    std::mt19937 rng(2);
    LayerKv own = random_layer_kv(1, 2, 4, 4, 5, rng);
    LayerKv empty;
    LayerKv merged = concat_inject(own, empty);
    CHECK(merged.keys.data == own.keys.data);
    CHECK(merged.values.data == own.values.data);
    CHECK(merged.positions == own.positions);
}

TEST_CASE("concat_inject is associative along the sequence") {
    std::mt19937 rng(3);
    LayerKv a = random_layer_kv(0, 2, 2, 4, 0, rng);
    LayerKv b = random_layer_kv(0, 2, 3, 4, 2, rng);
    LayerKv own = random_layer_kv(0, 2, 2, 4, 5, rng);

    LayerKv ab = concat_inject(b, a); // a before b
    LayerKv left = concat_inject(concat_inject(own, b), a);
    LayerKv right = concat_inject(own, ab);
    CHECK(left.keys.data == right.keys.data);
    CHECK(left.values.data == right.values.data);
    CHECK(left.positions == right.positions);
}

TEST_CASE("concat_inject rejects overlap and shape mismatch") {
    std::mt19937 rng(4);
    LayerKv own = random_layer_kv(0, 2, 2, 4, 2, rng);
    LayerKv late = random_layer_kv(0, 2, 3, 4, 1, rng); // positions 1,2,3 overlap
    CHECK_THROWS_AS(concat_inject(own, late), ConfigError);

    LayerKv bad_shape = random_layer_kv(0, 2, 2, 8, 0, rng);
    CHECK_THROWS_AS(concat_inject(own, bad_shape), ShapeError);
}

TEST_CASE("extract_payload selects, degenerates and round trips") {
    std::mt19937 rng(5);
    KvCacheSet cache = random_cache(6, 2, 4, 8, rng);

    KvPayload all = extract_payload(cache, {0, 1, 2, 3, 4, 5}, KvDtype::F32, 99);
    CHECK(all.selected_count() == 6);

    KvPayload none = extract_payload(cache, {}, KvDtype::F32, 99);
    CHECK(none.selected_count() == 0);
    CHECK(none.seq_len() == 4);
    CHECK_NOTHROW(none.validate());

    CHECK_THROWS_AS(extract_payload(cache, {6}, KvDtype::F32, 99), ConfigError);
    CHECK_THROWS_AS(extract_payload(cache, {1, 1}, KvDtype::F32, 99), ConfigError);

    KvPayload some = extract_payload(cache, {4, 1}, KvDtype::F32, 99);
    REQUIRE(some.selected_count() == 2);
    CHECK(some.entries[0].layer_index == 1); // sorted ascending
    CHECK(some.entries[1].layer_index == 4);
    CHECK(some.entries[0].keys.data == cache[1].keys.data);

    std::vector<std::uint8_t> bytes = serialize(some);
    CHECK(bytes.size() == serialized_size(2, 4, 2, 8, KvDtype::F32));
    KvPayload back = deserialize(bytes);
    CHECK(back.sender_model_id == 99);
    CHECK(back.total_layers == 6);
    REQUIRE(back.selected_count() == 2);
    CHECK(back.entries[0].keys.data == some.entries[0].keys.data);
    CHECK(back.entries[1].values.data == some.entries[1].values.data);
    CHECK(back.positions == some.positions);

    // identity on re-serialization
    CHECK(serialize(back) == bytes);
}

TEST_CASE("wire format: random payload round trips bit-exactly (f32)") {
    std::mt19937 rng(6);
    for (int trial = 0; trial < 25; ++trial) {
        const std::size_t layers = 1 + rng() % 8;
        const std::size_t kv_heads = 1 + rng() % 3;
        const std::size_t seq = 1 + rng() % 9;
        const std::size_t head_dim = 2 * (1 + rng() % 4);
        KvCacheSet cache = random_cache(layers, kv_heads, seq, head_dim, rng);
        std::vector<std::uint32_t> pick;
        for (std::size_t l = 0; l < layers; ++l)
            if (rng() % 2) pick.push_back(static_cast<std::uint32_t>(l));
        KvPayload p = extract_payload(cache, pick, KvDtype::F32, rng());
        std::vector<std::uint8_t> bytes = serialize(p);
        CHECK(bytes.size() ==
              serialized_size(pick.size(), seq, pick.empty() ? 0 : kv_heads,
                              pick.empty() ? 0 : head_dim, KvDtype::F32));
        KvPayload q = deserialize(bytes);
        CHECK(serialize(q) == bytes);
        REQUIRE(q.selected_count() == p.selected_count());
        for (std::size_t i = 0; i < p.entries.size(); ++i) {
            CHECK(q.entries[i].layer_index == p.entries[i].layer_index);
            CHECK(q.entries[i].keys.data == p.entries[i].keys.data);
            CHECK(q.entries[i].values.data == p.entries[i].values.data);
        }
    }
}

TEST_CASE("wire format: f16 serialization is idempotent after one quantization") {
    std::mt19937 rng(7);
    KvCacheSet cache = random_cache(4, 2, 5, 6, rng);
    KvPayload p = extract_payload(cache, {0, 2}, KvDtype::F16, 7);
    std::vector<std::uint8_t> first = serialize(p);
    KvPayload q = deserialize(first);
    std::vector<std::uint8_t> second = serialize(q);
    CHECK(first == second);
}

TEST_CASE("wire format: corruption carries distinct error codes") {
    std::mt19937 rng(8);
    KvCacheSet cache = random_cache(3, 2, 3, 4, rng);
    KvPayload p = extract_payload(cache, {0, 2}, KvDtype::F32, 1234);
    const std::vector<std::uint8_t> bytes = serialize(p);

    auto code_of = [](const std::vector<std::uint8_t>& b) {
        try {
            deserialize(b);
            return ErrorCode::Config; // not expected
        } catch (const ProtocolError& e) {
            return e.code();
        }
    };

    // magic
    std::vector<std::uint8_t> bad = bytes;
    bad[0] ^= 0xFF;
    CHECK(code_of(bad) == ErrorCode::BadMagic);

    // any body byte -> CRC
    bad = bytes;
    bad[10] ^= 0x01;
    CHECK(code_of(bad) == ErrorCode::BadCrc);
    bad = bytes;
    bad[bytes.size() - 1] ^= 0x01; // the checksum itself
    CHECK(code_of(bad) == ErrorCode::BadCrc);

    // version, with the checksum recomputed so it parses past the CRC gate
    {
        KvPayload tmp = p;
        std::vector<std::uint8_t> rebuilt = serialize(tmp);
        rebuilt[4] = 9;
        const std::uint32_t crc = kvcomm::crc32(rebuilt.data() + 4, rebuilt.size() - 8);
        std::memcpy(rebuilt.data() + rebuilt.size() - 4, &crc, 4);
        CHECK(code_of(rebuilt) == ErrorCode::BadVersion);
    }

    // header promises more records than the body holds
    {
        std::vector<std::uint8_t> rebuilt = serialize(p);
        rebuilt[16] = 3; // M lives after magic+version+model_id+L_total
        const std::uint32_t crc = kvcomm::crc32(rebuilt.data() + 4, rebuilt.size() - 8);
        std::memcpy(rebuilt.data() + rebuilt.size() - 4, &crc, 4);
        CHECK(code_of(rebuilt) == ErrorCode::Truncated);
    }

    // truncated byte stream loses CRC integrity
    bad.assign(bytes.begin(), bytes.end() - 9);
    const ErrorCode c = code_of(bad);
    CHECK((c == ErrorCode::BadCrc || c == ErrorCode::Truncated));
}

TEST_CASE("wire bytes scale with the selected fraction, header overhead under 1%") {
    // an L=32 model shape at a realistic context length
    const std::size_t seq = 512, kv_heads = 8, head_dim = 128;
    const std::size_t m_small = 10, m_all = 32;
    const double small = static_cast<double>(
        serialized_size(m_small, seq, kv_heads, head_dim, KvDtype::F32));
    const double all =
        static_cast<double>(serialized_size(m_all, seq, kv_heads, head_dim, KvDtype::F32));
    CHECK(std::abs(small / all - 10.0 / 32.0) <= 1e-3);

    const double header = static_cast<double>(serialized_size(0, seq, 0, 0, KvDtype::F32));
    CHECK(header / all < 0.01);
}

TEST_CASE("wire format: every single-byte flip is detected") {
    std::mt19937 rng(9);
    KvCacheSet cache = random_cache(2, 1, 2, 4, rng);
    KvPayload p = extract_payload(cache, {1}, KvDtype::F32, 42);
    const std::vector<std::uint8_t> bytes = serialize(p);
    for (std::size_t i = 0; i < bytes.size(); ++i) {
        std::vector<std::uint8_t> bad = bytes;
        bad[i] ^= 0x5A;
        CHECK_THROWS_AS(deserialize(bad), ProtocolError);
    }
}
