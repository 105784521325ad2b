#pragma once

#include <cstdint>
#include <vector>

#include "kvcomm/model.hpp"

namespace kvcomm {

enum class KvDtype : std::uint8_t { F32 = 0, F16 = 1 };

/// The transmitted artifact: the selected layers' KV pairs from one sender
/// prefill, sharing a single positions list.
struct KvPayload {
    std::uint16_t protocol_version = 1;
    std::uint64_t sender_model_id = 0;
    std::uint16_t total_layers = 0;
    KvDtype dtype = KvDtype::F32;
    std::vector<LayerKv> entries; // ascending layer_index, no duplicates
    std::uint32_t checksum = 0;   // CRC32 of the last serialized body

    std::size_t selected_count() const { return entries.size(); }
    std::uint32_t seq_len() const {
        return entries.empty() ? stored_seq_len
                               : static_cast<std::uint32_t>(entries.front().seq_len());
    }

    // seq_len/positions survive even for an empty selection so the receiver
    // can still see what context length the sender processed
    std::uint32_t stored_seq_len = 0;
    std::vector<std::uint32_t> positions;

    void validate() const;
    InjectedKv injection_map() const;
};

/// Receiver-side merge: incoming rows occupy the earliest attention slots,
/// own rows follow (k_new = [k_in; k_own]).
LayerKv concat_inject(const LayerKv& own, const LayerKv& incoming);

/// Deep-copies the chosen layers out of a prefill cache. The f16 dtype
/// quantizes values (round-to-nearest-even) immediately, so the payload the
/// sender holds equals what a receiver will decode.
KvPayload extract_payload(const KvCacheSet& cache, const std::vector<std::uint32_t>& layers,
                          KvDtype dtype, std::uint64_t sender_model_id);

/// Wire format (little-endian):
///   "KVCM" | version u16 | sender_model_id u64 | L_total u16 | M u16 |
///   dtype u8 | seq_len u32 | n_kv_heads u16 | head_dim u16 |
///   positions u32[seq_len] |
///   M × { layer_index u16 | K | V }  (row-major [kv_heads][seq][head_dim]) |
///   CRC32 u32 over everything after the magic.
std::vector<std::uint8_t> serialize(KvPayload& payload);
KvPayload deserialize(const std::vector<std::uint8_t>& bytes);

/// Exact byte length serialize() will produce for these parameters.
std::size_t serialized_size(std::size_t selected, std::size_t seq_len, std::size_t kv_heads,
                            std::size_t head_dim, KvDtype dtype);

} // namespace kvcomm
