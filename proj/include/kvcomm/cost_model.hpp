#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kvcomm/model.hpp"

namespace kvcomm::cost {

/// Token/shape parameters of the leading-order formulas. All in tokens
/// except d (hidden width) and L/M (layer counts). t_s/t_r are the debate
/// generation lengths entering the NLD formula only.
struct CostParams {
    std::uint64_t n_layers = 0;    // L
    std::uint64_t selected = 0;    // M
    std::uint64_t d = 0;           // hidden dimension
    std::uint64_t context = 0;     // |C|
    std::uint64_t query = 0;       // |Q|
    std::uint64_t generated = 0;   // T
    std::uint64_t t_s = 0;
    std::uint64_t t_r = 0;

    void validate() const;
};

struct FlopTotal {
    std::uint64_t sender_prefill = 0;
    std::uint64_t receiver_prefill = 0;
    std::uint64_t receiver_decode = 0;
    std::uint64_t total() const { return sender_prefill + receiver_prefill + receiver_decode; }
    std::uint64_t receiver_total() const { return receiver_prefill + receiver_decode; }
};

// --- leading-order forms with unit constants (integer-exact) ---

/// One decoder layer prefilling N tokens: N d^2 + N^2 d.
std::uint64_t flops_prefill_layer(std::uint64_t n, std::uint64_t d);
/// Decoding generated token i over an N-token prefix: d^2 + (N + i) d.
std::uint64_t flops_decode_token(std::uint64_t n, std::uint64_t i, std::uint64_t d);

FlopTotal flops_kvcomm(const CostParams& p);
FlopTotal flops_skyline(const CostParams& p);

struct NldFlops {
    std::uint64_t sender_initial = 0;   // sender reads C, drafts t_s tokens
    std::uint64_t receiver_initial = 0; // receiver reads Q, drafts t_r tokens
    std::uint64_t receiver_final = 0;   // receiver reads the debate, answers
    std::uint64_t total() const { return sender_initial + receiver_initial + receiver_final; }
};
NldFlops flops_nld(const CostParams& p);

/// |C| d (L (2|Q| + T) - M (|Q| + T)); equals skyline total - kvcomm total
/// exactly under unit constants.
std::uint64_t margin_over_skyline(const CostParams& p);
std::int64_t margin_over_nld(const CostParams& p);

// --- calibrated engine model ---
//
// Matmul inventory per decoder layer forwarding t_q rows over t_kv attended
// positions, matching the engine's instrumented counter term for term:
//   q proj     2 t_q d^2        k,v proj   4 t_q d d_kv
//   o proj     2 t_q d^2        scores     2 t_q t_kv d
//   attn * V   2 t_q t_kv d     mlp        6 t_q d d_ff
// plus one LM head matmul of 2 t_q d vocab per forward pass. Norms, RoPE and
// the embedding lookup are not matmuls and are excluded on both sides.

struct EngineDims {
    std::uint64_t n_layers = 0;
    std::uint64_t d = 0;
    std::uint64_t kv_dim = 0;
    std::uint64_t d_ff = 0;
    std::uint64_t vocab = 0;

    static EngineDims from_config(const ModelConfig& c);
};

/// One full forward of t_q rows; n_injected layers attend extra_kv more rows.
std::uint64_t analytic_forward_flops(const EngineDims& dims, std::uint64_t t_q,
                                     std::uint64_t extra_kv, std::uint64_t n_injected);

/// Greedy loop of `generated` single-token forwards on top of an own cache of
/// `own_len` rows, with `extra_kv` injected rows at `n_injected` layers.
std::uint64_t analytic_decode_flops(const EngineDims& dims, std::uint64_t own_len,
                                    std::uint64_t extra_kv, std::uint64_t n_injected,
                                    std::uint64_t generated);

FlopTotal analytic_kvcomm(const EngineDims& dims, const CostParams& p);
FlopTotal analytic_skyline(const EngineDims& dims, const CostParams& p);

/// Skyline-over-KVComm ratio of the computation beyond the one context
/// prefill both methods pay somewhere (the sender in KVComm, the receiver in
/// Skyline). KVComm's share is exactly its receiver-side cost.
double beyond_context_ratio(const EngineDims& dims, const CostParams& p);

// --- reconciliation against the instrumented counter ---

struct StageComparison {
    std::string stage;
    std::uint64_t analytic = 0;
    std::uint64_t instrumented = 0;
    double rel_error = 0.0;
};

struct ReconcileReport {
    std::vector<StageComparison> stages;
    double max_rel_error = 0.0;
    double receiver_ratio = 0.0; // instrumented skyline receiver / kvcomm receiver
};

/// Instrumented per-stage matmul FLOPs from one end-to-end run plus the
/// matching skyline run.
struct InstrumentedRun {
    FlopTotal kvcomm;
    std::uint64_t skyline_prefill = 0;
    std::uint64_t skyline_decode = 0;
};

ReconcileReport reconcile(const EngineDims& dims, const CostParams& p,
                          const InstrumentedRun& run);

} // namespace kvcomm::cost
