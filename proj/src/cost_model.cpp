#include "kvcomm/cost_model.hpp"

#include <cmath>

#include "kvcomm/errors.hpp"

namespace kvcomm::cost {

namespace {

using u64 = std::uint64_t;

u64 sq(u64 x) { return x * x; }

} // namespace

void CostParams::validate() const {
    if (n_layers == 0 || d == 0) throw ConfigError("cost params need L >= 1 and d >= 1");
    if (selected > n_layers) throw ConfigError("cost params: M > L");
}

u64 flops_prefill_layer(u64 n, u64 d) { return n * d * d + n * n * d; }

u64 flops_decode_token(u64 n, u64 i, u64 d) { return d * d + (n + i) * d; }

FlopTotal flops_kvcomm(const CostParams& p) {
    p.validate();
    const u64 L = p.n_layers, M = p.selected, d = p.d;
    const u64 C = p.context, Q = p.query, T = p.generated;
    FlopTotal f;
    f.sender_prefill = L * (C * d * d + C * C * d);
    f.receiver_prefill = L * Q * d * d + M * (C + Q) * Q * d + (L - M) * Q * Q * d;
    f.receiver_decode = T * (L * d * d + M * (C + Q + T) * d + (L - M) * (Q + T) * d);
    return f;
}

FlopTotal flops_skyline(const CostParams& p) {
    p.validate();
    const u64 L = p.n_layers, d = p.d;
    const u64 C = p.context, Q = p.query, T = p.generated;
    FlopTotal f;
    f.receiver_prefill = L * (C + Q) * d * d + L * sq(C + Q) * d;
    f.receiver_decode = T * (L * d * d + L * (C + Q + T) * d);
    return f;
}

NldFlops flops_nld(const CostParams& p) {
    p.validate();
    const u64 L = p.n_layers, d = p.d;
    const u64 C = p.context, Q = p.query, T = p.generated;
    const u64 Ts = p.t_s, Tr = p.t_r;
    NldFlops f;
    f.sender_initial = L * (C * d * d + C * C * d) + Ts * L * (d * d + (C + Ts) * d);
    f.receiver_initial = L * (Q * d * d + Q * Q * d) + Tr * L * (d * d + (Q + Tr) * d);
    const u64 hist = Ts + Tr + Q;
    f.receiver_final =
        L * (hist * d * d + hist * hist * d) + T * L * (d * d + (hist + T) * d);
    return f;
}

u64 margin_over_skyline(const CostParams& p) {
    p.validate();
    const u64 L = p.n_layers, M = p.selected, d = p.d;
    const u64 C = p.context, Q = p.query, T = p.generated;
    return C * d * (L * (2 * Q + T) - M * (Q + T));
}

std::int64_t margin_over_nld(const CostParams& p) {
    p.validate();
    const u64 L = p.n_layers, M = p.selected, d = p.d;
    const u64 C = p.context, Q = p.query, T = p.generated;
    const u64 Ts = p.t_s, Tr = p.t_r;
    const u64 d2_term = L * (2 * Ts + 2 * Tr + Q) * d * d;
    const u64 pos = L * (Ts * Ts + Tr * Tr + sq(Ts + Tr + Q) + Ts * C + Tr * Q + T * (Ts + Tr));
    const u64 neg = C * M * (Q + T);
    return static_cast<std::int64_t>(d2_term) +
           (static_cast<std::int64_t>(pos) - static_cast<std::int64_t>(neg)) *
               static_cast<std::int64_t>(d);
}

EngineDims EngineDims::from_config(const ModelConfig& c) {
    EngineDims e;
    e.n_layers = c.n_layers;
    e.d = c.d_model;
    e.kv_dim = c.kv_dim();
    e.d_ff = c.d_ff;
    e.vocab = c.vocab_size;
    return e;
}

namespace {

// per-layer matmul FLOPs for t_q rows attending t_kv positions
u64 layer_flops(const EngineDims& e, u64 t_q, u64 t_kv) {
    const u64 proj = 4 * t_q * e.d * e.d + 4 * t_q * e.d * e.kv_dim;
    const u64 attn = 4 * t_q * t_kv * e.d;
    const u64 mlp = 6 * t_q * e.d * e.d_ff;
    return proj + attn + mlp;
}

} // namespace

u64 analytic_forward_flops(const EngineDims& e, u64 t_q, u64 extra_kv, u64 n_injected) {
    if (n_injected > e.n_layers) throw ConfigError("analytic_forward_flops: M > L");
    u64 total = n_injected * layer_flops(e, t_q, extra_kv + t_q) +
                (e.n_layers - n_injected) * layer_flops(e, t_q, t_q);
    total += 2 * t_q * e.d * e.vocab; // LM head
    return total;
}

u64 analytic_decode_flops(const EngineDims& e, u64 own_len, u64 extra_kv, u64 n_injected,
                          u64 generated) {
    // the first generated token reuses the prefill logits; steps 1..T-1 each
    // run one single-row forward attending own_len + step rows (incl. self)
    u64 total = 0;
    for (u64 i = 1; i < generated; ++i) {
        const u64 own = own_len + i;
        total += n_injected * layer_flops(e, 1, extra_kv + own) +
                 (e.n_layers - n_injected) * layer_flops(e, 1, own);
        total += 2 * e.d * e.vocab;
    }
    return total;
}

FlopTotal analytic_kvcomm(const EngineDims& e, const CostParams& p) {
    p.validate();
    FlopTotal f;
    f.sender_prefill = analytic_forward_flops(e, p.context, 0, 0);
    f.receiver_prefill = analytic_forward_flops(e, p.query, p.context, p.selected);
    f.receiver_decode =
        analytic_decode_flops(e, p.query, p.context, p.selected, p.generated);
    return f;
}

FlopTotal analytic_skyline(const EngineDims& e, const CostParams& p) {
    p.validate();
    FlopTotal f;
    f.receiver_prefill = analytic_forward_flops(e, p.context + p.query, 0, 0);
    f.receiver_decode = analytic_decode_flops(e, p.context + p.query, 0, 0, p.generated);
    return f;
}

double beyond_context_ratio(const EngineDims& e, const CostParams& p) {
    const u64 context_prefill = analytic_forward_flops(e, p.context, 0, 0);
    const u64 skyline = analytic_skyline(e, p).total();
    const u64 kvcomm_receiver = analytic_kvcomm(e, p).receiver_total();
    if (skyline <= context_prefill || kvcomm_receiver == 0)
        throw ConfigError("beyond_context_ratio: degenerate parameters");
    return static_cast<double>(skyline - context_prefill) /
           static_cast<double>(kvcomm_receiver);
}

ReconcileReport reconcile(const EngineDims& e, const CostParams& p,
                          const InstrumentedRun& run) {
    ReconcileReport rep;
    const FlopTotal kv = analytic_kvcomm(e, p);
    const FlopTotal sk = analytic_skyline(e, p);
    auto add = [&rep](const std::string& stage, u64 analytic, u64 instrumented) {
        if (instrumented == 0) throw ConfigError("reconcile: missing stage counter " + stage);
        StageComparison c;
        c.stage = stage;
        c.analytic = analytic;
        c.instrumented = instrumented;
        c.rel_error = std::abs(static_cast<double>(analytic) - static_cast<double>(instrumented)) /
                      static_cast<double>(instrumented);
        rep.max_rel_error = std::max(rep.max_rel_error, c.rel_error);
        rep.stages.push_back(std::move(c));
    };
    add("sender_prefill", kv.sender_prefill, run.kvcomm.sender_prefill);
    add("receiver_prefill", kv.receiver_prefill, run.kvcomm.receiver_prefill);
    add("receiver_decode", kv.receiver_decode, run.kvcomm.receiver_decode);
    add("skyline_prefill", sk.receiver_prefill, run.skyline_prefill);
    add("skyline_decode", sk.receiver_decode, run.skyline_decode);
    rep.receiver_ratio =
        static_cast<double>(run.skyline_prefill + run.skyline_decode) /
        static_cast<double>(run.kvcomm.receiver_total());
    return rep;
}

} // namespace kvcomm::cost
