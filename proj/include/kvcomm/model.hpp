#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "kvcomm/tensor.hpp"

namespace kvcomm {

struct ModelConfig {
    std::uint32_t n_layers = 0;
    std::uint32_t n_heads = 0;
    std::uint32_t n_kv_heads = 0;
    std::uint32_t head_dim = 0;
    std::uint32_t d_model = 0;
    std::uint32_t d_ff = 0;
    std::uint32_t vocab_size = 0;
    float rope_theta = 10000.0f;
    float rmsnorm_eps = 1e-5f;

    std::uint32_t kv_dim() const { return n_kv_heads * head_dim; }
    void validate() const;

    // query head h reads kv head h * n_kv_heads / n_heads
    std::uint32_t kv_head(std::uint32_t h) const { return h * n_kv_heads / n_heads; }
};

/// One layer's cached keys/values, shape [n_kv_heads × seq × head_dim],
/// with the absolute positions the rows were encoded at. Keys are stored
/// post-RoPE, so rows can be transported and attended to without knowing
/// the producing model's position bookkeeping.
struct LayerKv {
    std::uint32_t layer_index = 0;
    Tensor keys;
    Tensor values;
    std::vector<std::uint32_t> positions;

    std::size_t seq_len() const { return positions.size(); }
    bool empty() const { return positions.empty(); }
    void validate() const;
    void append(const Tensor& k, const Tensor& v, const std::vector<std::uint32_t>& pos);
};

/// Per-layer cache, index == layer.
using KvCacheSet = std::vector<LayerKv>;

using InjectedKv = std::map<std::uint32_t, const LayerKv*>;

struct CaptureFlags {
    bool attention = false;    // per-layer [H × T_q × T_kv] softmax weights
    bool layer_inputs = false; // residual stream entering each layer
};

struct ForwardTrace {
    Tensor logits; // [T_q × vocab]
    // attention[l] filled for layers the pass ran, when captured
    std::vector<Tensor> attention;
    // layer_inputs[l] = residual stream entering layer l ([T_q × d]);
    // layer_inputs[L] = output of the last layer, before the final norm.
    // Index 0 is the token embedding.
    std::vector<Tensor> layer_inputs;
};

// Edit applied to the residual stream right after `layer` completes, i.e. to
// what becomes the input of layer+1. Used by the activation-communication and
// token-ablation baselines.
using HiddenHook = std::function<void(std::uint32_t layer, Tensor& hidden)>;

struct LayerWeights {
    Tensor wq, wk, wv, wo;
    Tensor w_gate, w_up, w_down;
    std::vector<float> attn_norm, mlp_norm;
};

struct GenResult {
    std::vector<std::uint32_t> tokens;           // generated continuation
    std::vector<std::vector<float>> step_logits; // logits that produced each token
};

class Model {
public:
    /// Deterministic weights: projection/embedding/head matrices uniform in
    /// [-1/sqrt(d_model), 1/sqrt(d_model)] from a seeded generator, norm
    /// gains at 1. Identical (config, seed) gives identical weights and id.
    static Model build(const ModelConfig& config, std::uint64_t seed);

    const ModelConfig& config() const { return config_; }
    std::uint64_t model_id() const { return model_id_; }
    std::uint64_t seed() const { return seed_; }

    KvCacheSet empty_cache() const;

    struct PrefillOptions {
        std::uint32_t position_offset = 0;
        const InjectedKv* injected = nullptr;
        CaptureFlags capture;
        const HiddenHook* hook = nullptr;
    };

    /// Full-stack prefill: token i sits at absolute position offset+i; each
    /// query row attends to every injected row plus its own causal prefix.
    /// The returned cache holds the own-token KV only; injected rows are the
    /// caller's to merge (see concat_inject).
    std::pair<ForwardTrace, KvCacheSet> prefill(const std::vector<std::uint32_t>& tokens,
                                                const PrefillOptions& opts) const;
    std::pair<ForwardTrace, KvCacheSet> prefill(const std::vector<std::uint32_t>& tokens) const;

    /// Single-token step appending one KV row per layer. Entries already in
    /// the cache (own or injected) stay attended for every later step.
    std::vector<float> decode_step(std::uint32_t token_id, KvCacheSet& cache,
                                   std::uint32_t position) const;

    /// Greedy decoding from a prefilled cache. last_logits is the logits row
    /// of the final prompt token; next_position the first free position.
    GenResult greedy_continue(KvCacheSet& cache, const std::vector<float>& last_logits,
                              std::uint32_t next_position, std::uint32_t max_new,
                              std::optional<std::uint32_t> eos_id = std::nullopt) const;

    /// prefill + greedy argmax loop; returns the continuation only.
    std::vector<std::uint32_t> generate(const std::vector<std::uint32_t>& prompt,
                                        std::uint32_t max_new,
                                        std::optional<std::uint32_t> eos_id = std::nullopt) const;

    // --- lower-level pieces used by the baseline experiments ---

    Tensor embed(const std::vector<std::uint32_t>& tokens) const;

    struct ForwardOptions {
        std::uint32_t layer_begin = 0;
        std::uint32_t layer_end = 0; // 0 means n_layers
        const InjectedKv* injected = nullptr;
        CaptureFlags capture;
        const HiddenHook* hook = nullptr;
    };

    /// Runs layers [layer_begin, layer_end) over `hidden` rows at the given
    /// absolute positions. Attention per layer sees [injected; cache; own]
    /// with causality among the own rows; own KV is appended to the cache.
    Tensor forward_layers(Tensor hidden, const std::vector<std::uint32_t>& positions,
                          KvCacheSet& cache, const ForwardOptions& opts,
                          ForwardTrace* trace = nullptr) const;

    /// Final RMSNorm + LM head over residual rows.
    Tensor logits_from_hidden(const Tensor& hidden) const;

    void save(const std::string& path) const;
    static Model load(const std::string& path);

private:
    Model() = default;

    ModelConfig config_;
    std::uint64_t seed_ = 0;
    std::uint64_t model_id_ = 0;
    Tensor embedding_; // [vocab × d]
    std::vector<LayerWeights> layers_;
    std::vector<float> final_norm_;
    Tensor lm_head_; // [d × vocab]
};

std::uint64_t compute_model_id(const ModelConfig& config, std::uint64_t seed);

std::uint32_t argmax(const std::vector<float>& v);

} // namespace kvcomm
