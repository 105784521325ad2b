#include "kvcomm/payload.hpp"

#include <algorithm>
#include <cstring>

#include "kvcomm/crc32.hpp"
#include "kvcomm/f16.hpp"

namespace kvcomm {

namespace {

constexpr char kMagic[4] = {'K', 'V', 'C', 'M'};
constexpr std::uint16_t kWireVersion = 1;

struct Writer {
    std::vector<std::uint8_t>& out;
    template <typename T>
    void pod(T v) {
        std::uint8_t buf[sizeof(T)];
        std::memcpy(buf, &v, sizeof(T));
        out.insert(out.end(), buf, buf + sizeof(T));
    }
};

struct Reader {
    const std::vector<std::uint8_t>& in;
    std::size_t pos = 0;
    template <typename T>
    T pod() {
        if (pos + sizeof(T) > in.size())
            throw ProtocolError(ErrorCode::Truncated, "payload truncated");
        T v;
        std::memcpy(&v, in.data() + pos, sizeof(T));
        pos += sizeof(T);
        return v;
    }
};

float quantize_f16(float v) { return f16_to_f32(f32_to_f16(v)); }

} // namespace

void KvPayload::validate() const {
    if (entries.size() > total_layers)
        throw ProtocolError(ErrorCode::Invariant, "more entries than layers");
    std::uint32_t seq = stored_seq_len;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const LayerKv& e = entries[i];
        e.validate();
        if (e.layer_index >= total_layers)
            throw ProtocolError(ErrorCode::Invariant, "entry layer index out of range");
        if (i > 0 && entries[i - 1].layer_index >= e.layer_index)
            throw ProtocolError(ErrorCode::Invariant, "entries must be strictly ascending");
        if (e.seq_len() != seq)
            throw ProtocolError(ErrorCode::Invariant, "entries disagree on seq length");
        if (e.positions != positions)
            throw ProtocolError(ErrorCode::Invariant, "entries disagree on positions");
    }
    if (positions.size() != seq)
        throw ProtocolError(ErrorCode::Invariant, "positions length != seq length");
}

InjectedKv KvPayload::injection_map() const {
    InjectedKv map;
    for (const LayerKv& e : entries) map[e.layer_index] = &e;
    return map;
}

LayerKv concat_inject(const LayerKv& own, const LayerKv& incoming) {
    if (incoming.empty()) return own;
    if (own.empty()) {
        LayerKv out = incoming;
        out.layer_index = own.layer_index;
        return out;
    }
    if (incoming.keys.shape[0] != own.keys.shape[0] ||
        incoming.keys.shape[2] != own.keys.shape[2])
        throw ShapeError("concat_inject: head shape mismatch");
    if (incoming.positions.back() >= own.positions.front())
        throw ConfigError("concat_inject: incoming positions must precede own positions");

    LayerKv out;
    out.layer_index = own.layer_index;
    out.keys = incoming.keys;
    out.values = incoming.values;
    out.positions = incoming.positions;
    out.append(own.keys, own.values, own.positions);
    return out;
}

KvPayload extract_payload(const KvCacheSet& cache, const std::vector<std::uint32_t>& layers,
                          KvDtype dtype, std::uint64_t sender_model_id) {
    KvPayload p;
    p.sender_model_id = sender_model_id;
    p.total_layers = static_cast<std::uint16_t>(cache.size());
    p.dtype = dtype;

    std::vector<std::uint32_t> sorted = layers;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 1; i < sorted.size(); ++i)
        if (sorted[i] == sorted[i - 1]) throw ConfigError("extract_payload: duplicate layer");

    if (!cache.empty()) {
        p.stored_seq_len = static_cast<std::uint32_t>(cache[0].seq_len());
        p.positions = cache[0].positions;
    }
    for (std::uint32_t l : sorted) {
        if (l >= cache.size())
            throw ConfigError("extract_payload: layer " + std::to_string(l) + " out of range");
        LayerKv e = cache[l];
        e.layer_index = l;
        if (dtype == KvDtype::F16) {
            for (float& v : e.keys.data) v = quantize_f16(v);
            for (float& v : e.values.data) v = quantize_f16(v);
        }
        p.entries.push_back(std::move(e));
    }
    p.validate();
    return p;
}

std::size_t serialized_size(std::size_t selected, std::size_t seq_len, std::size_t kv_heads,
                            std::size_t head_dim, KvDtype dtype) {
    const std::size_t scalar = dtype == KvDtype::F32 ? 4 : 2;
    const std::size_t header = 4 + 2 + 8 + 2 + 2 + 1 + 4 + 2 + 2;
    const std::size_t record = 2 + 2 * kv_heads * seq_len * head_dim * scalar;
    return header + 4 * seq_len + selected * record + 4;
}

std::vector<std::uint8_t> serialize(KvPayload& payload) {
    payload.validate();
    const std::size_t kv_heads = payload.entries.empty() ? 0 : payload.entries[0].keys.shape[0];
    const std::size_t head_dim = payload.entries.empty() ? 0 : payload.entries[0].keys.shape[2];
    const std::uint32_t seq = payload.seq_len();

    std::vector<std::uint8_t> bytes;
    bytes.reserve(serialized_size(payload.entries.size(), seq, kv_heads, head_dim,
                                  payload.dtype));
    Writer w{bytes};
    bytes.insert(bytes.end(), kMagic, kMagic + 4);
    w.pod(kWireVersion);
    w.pod(payload.sender_model_id);
    w.pod(payload.total_layers);
    w.pod(static_cast<std::uint16_t>(payload.entries.size()));
    w.pod(static_cast<std::uint8_t>(payload.dtype));
    w.pod(seq);
    w.pod(static_cast<std::uint16_t>(kv_heads));
    w.pod(static_cast<std::uint16_t>(head_dim));
    for (std::uint32_t p : payload.positions) w.pod(p);

    auto put_tensor = [&](const Tensor& t) {
        if (payload.dtype == KvDtype::F32) {
            for (float v : t.data) w.pod(v);
        } else {
            for (float v : t.data) w.pod(f32_to_f16(v));
        }
    };
    for (const LayerKv& e : payload.entries) {
        w.pod(static_cast<std::uint16_t>(e.layer_index));
        put_tensor(e.keys);
        put_tensor(e.values);
    }

    const std::uint32_t crc = crc32(bytes.data() + 4, bytes.size() - 4);
    w.pod(crc);
    payload.checksum = crc;
    return bytes;
}

KvPayload deserialize(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0)
        throw ProtocolError(ErrorCode::BadMagic, "bad payload magic");
    if (bytes.size() < 4 + 4)
        throw ProtocolError(ErrorCode::Truncated, "payload shorter than magic + checksum");

    // checksum first, so any corruption after the magic is a CRC error
    std::uint32_t stored_crc;
    std::memcpy(&stored_crc, bytes.data() + bytes.size() - 4, 4);
    const std::uint32_t computed = crc32(bytes.data() + 4, bytes.size() - 8);
    if (stored_crc != computed)
        throw ProtocolError(ErrorCode::BadCrc, "payload checksum mismatch");

    Reader r{bytes, 4};
    KvPayload p;
    p.protocol_version = r.pod<std::uint16_t>();
    if (p.protocol_version != kWireVersion)
        throw ProtocolError(ErrorCode::BadVersion,
                            "unsupported payload version " + std::to_string(p.protocol_version));
    p.sender_model_id = r.pod<std::uint64_t>();
    p.total_layers = r.pod<std::uint16_t>();
    const std::uint16_t selected = r.pod<std::uint16_t>();
    const std::uint8_t dtype_raw = r.pod<std::uint8_t>();
    if (dtype_raw > 1)
        throw ProtocolError(ErrorCode::Invariant, "unknown dtype tag");
    p.dtype = static_cast<KvDtype>(dtype_raw);
    const std::uint32_t seq = r.pod<std::uint32_t>();
    const std::uint16_t kv_heads = r.pod<std::uint16_t>();
    const std::uint16_t head_dim = r.pod<std::uint16_t>();
    p.stored_seq_len = seq;
    p.positions.resize(seq);
    for (std::uint32_t& pos : p.positions) pos = r.pod<std::uint32_t>();

    if (selected > 0 && (kv_heads == 0 || head_dim == 0))
        throw ProtocolError(ErrorCode::Invariant, "entries present but zero head shape");

    auto get_tensor = [&](Tensor& t) {
        t = Tensor({kv_heads, std::size_t{seq}, head_dim});
        if (p.dtype == KvDtype::F32) {
            for (float& v : t.data) v = r.pod<float>();
        } else {
            for (float& v : t.data) v = f16_to_f32(r.pod<std::uint16_t>());
        }
    };
    for (std::uint16_t i = 0; i < selected; ++i) {
        LayerKv e;
        e.layer_index = r.pod<std::uint16_t>();
        if (seq == 0)
            throw ProtocolError(ErrorCode::Invariant, "entry with zero seq length");
        get_tensor(e.keys);
        get_tensor(e.values);
        e.positions = p.positions;
        p.entries.push_back(std::move(e));
    }
    if (r.pos != bytes.size() - 4)
        throw ProtocolError(ErrorCode::Truncated, "payload has trailing or missing bytes");
    p.checksum = stored_crc;

    try {
        p.validate();
    } catch (const ProtocolError&) {
        throw;
    } catch (const Error& e) {
        throw ProtocolError(ErrorCode::Invariant, e.what());
    }
    return p;
}

} // namespace kvcomm
