#include "kvcomm/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <random>

namespace kvcomm {

namespace {

constexpr char kModelMagic[4] = {'K', 'V', 'M', 'F'};
constexpr std::uint16_t kModelVersion = 1;

double next_unit(std::mt19937_64& rng) {
    // top 53 bits -> [0,1); avoids the library-defined distribution so the
    // stream is identical across standard libraries
    return static_cast<double>(rng() >> 11) * (1.0 / 9007199254740992.0);
}

void fill_uniform(Tensor& t, std::mt19937_64& rng, float bound) {
    for (float& v : t.data)
        v = static_cast<float>((2.0 * next_unit(rng) - 1.0) * bound);
}

float silu(float x) { return x / (1.0f + std::exp(-x)); }

template <typename T>
void write_pod_le(std::ostream& os, T value) {
    unsigned char buf[sizeof(T)];
    std::memcpy(buf, &value, sizeof(T));
    os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T read_pod_le(std::istream& is) {
    unsigned char buf[sizeof(T)];
    is.read(reinterpret_cast<char*>(buf), sizeof(T));
    if (!is) throw IoError("model file truncated");
    T value;
    std::memcpy(&value, buf, sizeof(T));
    return value;
}

} // namespace

void ModelConfig::validate() const {
    if (n_layers < 1) throw ConfigError("n_layers must be >= 1");
    if (n_heads == 0 || n_kv_heads == 0) throw ConfigError("head counts must be positive");
    if (n_heads % n_kv_heads != 0)
        throw ConfigError("n_heads must be divisible by n_kv_heads");
    if (head_dim == 0 || head_dim % 2 != 0)
        throw ConfigError("head_dim must be positive and even");
    if (d_model != n_heads * head_dim)
        throw ConfigError("d_model must equal n_heads * head_dim");
    if (d_ff == 0) throw ConfigError("d_ff must be positive");
    if (vocab_size == 0) throw ConfigError("vocab_size must be positive");
    if (!(rope_theta > 0.0f)) throw ConfigError("rope_theta must be positive");
    if (!(rmsnorm_eps > 0.0f)) throw ConfigError("rmsnorm_eps must be positive");
}

void LayerKv::validate() const {
    if (keys.shape != values.shape) throw ShapeError("LayerKv: keys/values shape mismatch");
    if (keys.rank() != 3) throw ShapeError("LayerKv: expected [kv_heads × seq × head_dim]");
    if (keys.shape[1] != positions.size())
        throw ShapeError("LayerKv: positions length != seq");
    for (std::size_t i = 1; i < positions.size(); ++i)
        if (positions[i] <= positions[i - 1])
            throw ShapeError("LayerKv: positions must be strictly increasing");
}

void LayerKv::append(const Tensor& k, const Tensor& v, const std::vector<std::uint32_t>& pos) {
    if (k.shape != v.shape || k.rank() != 3) throw ShapeError("LayerKv::append: bad shapes");
    if (k.shape[1] != pos.size()) throw ShapeError("LayerKv::append: positions length != rows");
    if (empty()) {
        keys = k;
        values = v;
        positions = pos;
        validate();
        return;
    }
    if (k.shape[0] != keys.shape[0] || k.shape[2] != keys.shape[2])
        throw ShapeError("LayerKv::append: head shape mismatch");
    if (!pos.empty() && pos.front() <= positions.back())
        throw ConfigError("LayerKv::append: stale position");

    const std::size_t kv = keys.shape[0], old_seq = keys.shape[1], hd = keys.shape[2];
    const std::size_t add = k.shape[1];
    Tensor nk({kv, old_seq + add, hd});
    Tensor nv({kv, old_seq + add, hd});
    for (std::size_t g = 0; g < kv; ++g) {
        for (std::size_t t = 0; t < old_seq; ++t)
            for (std::size_t j = 0; j < hd; ++j) {
                nk.at(g, t, j) = keys.at(g, t, j);
                nv.at(g, t, j) = values.at(g, t, j);
            }
        for (std::size_t t = 0; t < add; ++t)
            for (std::size_t j = 0; j < hd; ++j) {
                nk.at(g, old_seq + t, j) = k.at(g, t, j);
                nv.at(g, old_seq + t, j) = v.at(g, t, j);
            }
    }
    keys = std::move(nk);
    values = std::move(nv);
    positions.insert(positions.end(), pos.begin(), pos.end());
}

std::uint64_t compute_model_id(const ModelConfig& config, std::uint64_t seed) {
    // FNV-1a over the identity-defining fields
    std::uint64_t h = 0xcbf29ce484222325ull;
    auto mix = [&h](const void* p, std::size_t n) {
        const unsigned char* b = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 0x100000001b3ull;
        }
    };
    const std::uint32_t dims[7] = {config.n_layers,  config.n_heads, config.n_kv_heads,
                                   config.head_dim,  config.d_model, config.d_ff,
                                   config.vocab_size};
    mix(dims, sizeof(dims));
    mix(&config.rope_theta, sizeof(config.rope_theta));
    mix(&config.rmsnorm_eps, sizeof(config.rmsnorm_eps));
    mix(&seed, sizeof(seed));
    return h;
}

std::uint32_t argmax(const std::vector<float>& v) {
    return static_cast<std::uint32_t>(
        std::distance(v.begin(), std::max_element(v.begin(), v.end())));
}

Model Model::build(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    Model m;
    m.config_ = config;
    m.seed_ = seed;
    m.model_id_ = compute_model_id(config, seed);

    std::mt19937_64 rng(seed);
    const float bound = 1.0f / std::sqrt(static_cast<float>(config.d_model));
    const std::size_t d = config.d_model, kv = config.kv_dim(), ff = config.d_ff;

    m.embedding_ = Tensor({config.vocab_size, d});
    fill_uniform(m.embedding_, rng, bound);

    m.layers_.resize(config.n_layers);
    for (std::uint32_t l = 0; l < config.n_layers; ++l) {
        LayerWeights& w = m.layers_[l];
        w.wq = Tensor({d, d});
        w.wk = Tensor({d, kv});
        w.wv = Tensor({d, kv});
        w.wo = Tensor({d, d});
        w.w_gate = Tensor({d, ff});
        w.w_up = Tensor({d, ff});
        w.w_down = Tensor({ff, d});
        fill_uniform(w.wq, rng, bound);
        fill_uniform(w.wk, rng, bound);
        fill_uniform(w.wv, rng, bound);
        fill_uniform(w.wo, rng, bound);
        fill_uniform(w.w_gate, rng, bound);
        fill_uniform(w.w_up, rng, bound);
        fill_uniform(w.w_down, rng, bound);
        w.attn_norm.assign(d, 1.0f);
        w.mlp_norm.assign(d, 1.0f);
    }
    m.final_norm_.assign(d, 1.0f);
    m.lm_head_ = Tensor({d, config.vocab_size});
    fill_uniform(m.lm_head_, rng, bound);
    return m;
}

KvCacheSet Model::empty_cache() const {
    KvCacheSet cache(config_.n_layers);
    for (std::uint32_t l = 0; l < config_.n_layers; ++l) cache[l].layer_index = l;
    return cache;
}

Tensor Model::embed(const std::vector<std::uint32_t>& tokens) const {
    const std::size_t d = config_.d_model;
    Tensor out({tokens.size(), d});
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        if (tokens[t] >= config_.vocab_size)
            throw ConfigError("token id " + std::to_string(tokens[t]) + " out of vocab");
        for (std::size_t j = 0; j < d; ++j) out.at(t, j) = embedding_.at(tokens[t], j);
    }
    return out;
}

Tensor Model::forward_layers(Tensor hidden, const std::vector<std::uint32_t>& positions,
                             KvCacheSet& cache, const ForwardOptions& opts,
                             ForwardTrace* trace) const {
    const std::uint32_t L = config_.n_layers;
    const std::uint32_t layer_end = opts.layer_end == 0 ? L : opts.layer_end;
    if (opts.layer_begin > layer_end || layer_end > L)
        throw ConfigError("forward_layers: bad layer range");
    if (cache.size() != L) throw ShapeError("forward_layers: cache must have one slot per layer");
    const std::size_t t_q = hidden.shape[0];
    if (positions.size() != t_q) throw ShapeError("forward_layers: positions length != rows");

    const std::size_t d = config_.d_model, hd = config_.head_dim;
    const std::size_t n_heads = config_.n_heads, n_kv = config_.n_kv_heads;
    const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
    const float neg_inf = -std::numeric_limits<float>::infinity();

    if (trace) {
        if (trace->attention.size() != L) trace->attention.resize(L);
        if (trace->layer_inputs.size() != L + 1) trace->layer_inputs.resize(L + 1);
    }

    for (std::uint32_t l = opts.layer_begin; l < layer_end; ++l) {
        if (trace && opts.capture.layer_inputs) trace->layer_inputs[l] = hidden;

        const LayerWeights& w = layers_[l];
        const LayerKv* inj = nullptr;
        if (opts.injected) {
            auto it = opts.injected->find(l);
            if (it != opts.injected->end() && it->second && !it->second->empty()) {
                inj = it->second;
                if (inj->keys.shape[0] != n_kv || inj->keys.shape[2] != hd)
                    throw ShapeError("injected KV head shape mismatch at layer " +
                                     std::to_string(l));
            }
        }
        const LayerKv& own_cache = cache[l];
        const std::size_t inj_len = inj ? inj->seq_len() : 0;
        const std::size_t cache_len = own_cache.seq_len();
        const std::size_t t_kv = inj_len + cache_len + t_q;

        // attention
        Tensor xn({t_q, d});
        for (std::size_t t = 0; t < t_q; ++t) {
            std::vector<float> row(hidden.data.begin() + t * d, hidden.data.begin() + (t + 1) * d);
            std::vector<float> nr = rmsnorm(row, w.attn_norm, config_.rmsnorm_eps);
            std::copy(nr.begin(), nr.end(), xn.data.begin() + t * d);
        }
        Tensor q2 = matmul(xn, w.wq);
        Tensor k2 = matmul(xn, w.wk);
        Tensor v2 = matmul(xn, w.wv);

        Tensor q3({n_heads, t_q, hd});
        for (std::size_t h = 0; h < n_heads; ++h)
            for (std::size_t t = 0; t < t_q; ++t)
                for (std::size_t j = 0; j < hd; ++j) q3.at(h, t, j) = q2.at(t, h * hd + j);
        Tensor k3({n_kv, t_q, hd});
        Tensor v3({n_kv, t_q, hd});
        for (std::size_t g = 0; g < n_kv; ++g)
            for (std::size_t t = 0; t < t_q; ++t)
                for (std::size_t j = 0; j < hd; ++j) {
                    k3.at(g, t, j) = k2.at(t, g * hd + j);
                    v3.at(g, t, j) = v2.at(t, g * hd + j);
                }
        q3 = rope_apply(q3, positions, config_.rope_theta);
        k3 = rope_apply(k3, positions, config_.rope_theta);

        Tensor attn_concat({t_q, d});
        Tensor* attn_capture = nullptr;
        if (trace && opts.capture.attention) {
            trace->attention[l] = Tensor({n_heads, t_q, t_kv});
            attn_capture = &trace->attention[l];
        }

        for (std::size_t h = 0; h < n_heads; ++h) {
            const std::size_t g = config_.kv_head(static_cast<std::uint32_t>(h));

            Tensor qh({t_q, hd});
            for (std::size_t t = 0; t < t_q; ++t)
                for (std::size_t j = 0; j < hd; ++j) qh.at(t, j) = q3.at(h, t, j);

            // attended rows: [injected; cached; own], keys transposed for matmul
            Tensor kt({hd, t_kv});
            Tensor vg({t_kv, hd});
            for (std::size_t c = 0; c < inj_len; ++c)
                for (std::size_t j = 0; j < hd; ++j) {
                    kt.at(j, c) = inj->keys.at(g, c, j);
                    vg.at(c, j) = inj->values.at(g, c, j);
                }
            for (std::size_t c = 0; c < cache_len; ++c)
                for (std::size_t j = 0; j < hd; ++j) {
                    kt.at(j, inj_len + c) = own_cache.keys.at(g, c, j);
                    vg.at(inj_len + c, j) = own_cache.values.at(g, c, j);
                }
            for (std::size_t c = 0; c < t_q; ++c)
                for (std::size_t j = 0; j < hd; ++j) {
                    kt.at(j, inj_len + cache_len + c) = k3.at(g, c, j);
                    vg.at(inj_len + cache_len + c, j) = v3.at(g, c, j);
                }

            Tensor scores = matmul(qh, kt);
            for (std::size_t t = 0; t < t_q; ++t) {
                for (std::size_t c = 0; c < t_kv; ++c) scores.at(t, c) *= scale;
                // own row t may not see own rows later than itself
                for (std::size_t c = inj_len + cache_len + t + 1; c < t_kv; ++c)
                    scores.at(t, c) = neg_inf;
            }
            Tensor probs = softmax_rows(scores);
            if (attn_capture)
                for (std::size_t t = 0; t < t_q; ++t)
                    for (std::size_t c = 0; c < t_kv; ++c)
                        attn_capture->at(h, t, c) = probs.at(t, c);

            Tensor oh = matmul(probs, vg);
            for (std::size_t t = 0; t < t_q; ++t)
                for (std::size_t j = 0; j < hd; ++j) attn_concat.at(t, h * hd + j) = oh.at(t, j);
        }

        Tensor attn_out = matmul(attn_concat, w.wo);
        for (std::size_t i = 0; i < hidden.data.size(); ++i) hidden.data[i] += attn_out.data[i];

        // MLP
        Tensor xn2({t_q, d});
        for (std::size_t t = 0; t < t_q; ++t) {
            std::vector<float> row(hidden.data.begin() + t * d, hidden.data.begin() + (t + 1) * d);
            std::vector<float> nr = rmsnorm(row, w.mlp_norm, config_.rmsnorm_eps);
            std::copy(nr.begin(), nr.end(), xn2.data.begin() + t * d);
        }
        Tensor gate = matmul(xn2, w.w_gate);
        Tensor up = matmul(xn2, w.w_up);
        for (std::size_t i = 0; i < gate.data.size(); ++i)
            gate.data[i] = silu(gate.data[i]) * up.data[i];
        Tensor mlp_out = matmul(gate, w.w_down);
        for (std::size_t i = 0; i < hidden.data.size(); ++i) hidden.data[i] += mlp_out.data[i];

        cache[l].append(k3, v3, positions);
        if (opts.hook) (*opts.hook)(l, hidden);
    }

    if (trace && opts.capture.layer_inputs) trace->layer_inputs[layer_end] = hidden;
    return hidden;
}

Tensor Model::logits_from_hidden(const Tensor& hidden) const {
    const std::size_t d = config_.d_model;
    Tensor normed({hidden.shape[0], d});
    for (std::size_t t = 0; t < hidden.shape[0]; ++t) {
        std::vector<float> row(hidden.data.begin() + t * d, hidden.data.begin() + (t + 1) * d);
        std::vector<float> nr = rmsnorm(row, final_norm_, config_.rmsnorm_eps);
        std::copy(nr.begin(), nr.end(), normed.data.begin() + t * d);
    }
    return matmul(normed, lm_head_);
}

std::pair<ForwardTrace, KvCacheSet> Model::prefill(const std::vector<std::uint32_t>& tokens) const {
    return prefill(tokens, PrefillOptions{});
}

std::pair<ForwardTrace, KvCacheSet> Model::prefill(const std::vector<std::uint32_t>& tokens,
                                                   const PrefillOptions& opts) const {
    if (tokens.empty()) throw ConfigError("prefill: empty token list");
    if (opts.injected) {
        for (const auto& [l, kvp] : *opts.injected) {
            if (l >= config_.n_layers)
                throw ConfigError("prefill: injected layer " + std::to_string(l) + " out of range");
            if (!kvp) continue;
            for (std::uint32_t p : kvp->positions)
                if (p >= opts.position_offset &&
                    p < opts.position_offset + static_cast<std::uint32_t>(tokens.size()))
                    throw ConfigError("prefill: injected position " + std::to_string(p) +
                                      " collides with own token span");
        }
    }

    std::vector<std::uint32_t> positions(tokens.size());
    for (std::size_t i = 0; i < tokens.size(); ++i)
        positions[i] = opts.position_offset + static_cast<std::uint32_t>(i);

    ForwardTrace trace;
    KvCacheSet cache = empty_cache();
    ForwardOptions fopts;
    fopts.injected = opts.injected;
    fopts.capture = opts.capture;
    fopts.hook = opts.hook;
    Tensor hidden = forward_layers(embed(tokens), positions, cache, fopts, &trace);
    trace.logits = logits_from_hidden(hidden);
    return {std::move(trace), std::move(cache)};
}

std::vector<float> Model::decode_step(std::uint32_t token_id, KvCacheSet& cache,
                                      std::uint32_t position) const {
    for (const LayerKv& lk : cache)
        if (!lk.positions.empty() && position <= lk.positions.back())
            throw ConfigError("decode_step: stale position " + std::to_string(position));

    std::vector<std::uint32_t> positions{position};
    ForwardOptions fopts;
    Tensor hidden = forward_layers(embed({token_id}), positions, cache, fopts, nullptr);
    Tensor logits = logits_from_hidden(hidden);
    return logits.data;
}

GenResult Model::greedy_continue(KvCacheSet& cache, const std::vector<float>& last_logits,
                                 std::uint32_t next_position, std::uint32_t max_new,
                                 std::optional<std::uint32_t> eos_id) const {
    GenResult out;
    if (max_new == 0) return out;
    std::vector<float> logits = last_logits;
    std::uint32_t pos = next_position;
    for (std::uint32_t i = 0; i < max_new; ++i) {
        const std::uint32_t tok = argmax(logits);
        out.tokens.push_back(tok);
        out.step_logits.push_back(logits);
        if (eos_id && tok == *eos_id) break;
        if (i + 1 == max_new) break;
        logits = decode_step(tok, cache, pos);
        ++pos;
    }
    return out;
}

std::vector<std::uint32_t> Model::generate(const std::vector<std::uint32_t>& prompt,
                                           std::uint32_t max_new,
                                           std::optional<std::uint32_t> eos_id) const {
    if (max_new == 0) return {};
    auto [trace, cache] = prefill(prompt);
    const std::size_t last = trace.logits.shape[0] - 1;
    std::vector<float> logits(trace.logits.data.begin() + last * config_.vocab_size,
                              trace.logits.data.begin() + (last + 1) * config_.vocab_size);
    GenResult r = greedy_continue(cache, logits, static_cast<std::uint32_t>(prompt.size()),
                                  max_new, eos_id);
    return r.tokens;
}

void Model::save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os.write(kModelMagic, 4);
    write_pod_le(os, kModelVersion);
    write_pod_le(os, config_.n_layers);
    write_pod_le(os, config_.n_heads);
    write_pod_le(os, config_.n_kv_heads);
    write_pod_le(os, config_.head_dim);
    write_pod_le(os, config_.d_model);
    write_pod_le(os, config_.d_ff);
    write_pod_le(os, config_.vocab_size);
    write_pod_le(os, config_.rope_theta);
    write_pod_le(os, config_.rmsnorm_eps);
    write_pod_le(os, seed_);
    write_pod_le(os, model_id_);

    auto write_tensor = [&os](const Tensor& t) {
        for (float v : t.data) write_pod_le(os, v);
    };
    auto write_vec = [&os](const std::vector<float>& v) {
        for (float x : v) write_pod_le(os, x);
    };
    write_tensor(embedding_);
    for (const LayerWeights& w : layers_) {
        write_tensor(w.wq);
        write_tensor(w.wk);
        write_tensor(w.wv);
        write_tensor(w.wo);
        write_tensor(w.w_gate);
        write_tensor(w.w_up);
        write_tensor(w.w_down);
        write_vec(w.attn_norm);
        write_vec(w.mlp_norm);
    }
    write_vec(final_norm_);
    write_tensor(lm_head_);
    if (!os) throw IoError("write failed: " + path);
}

Model Model::load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kModelMagic, 4) != 0)
        throw IoError("not a model file: " + path);
    const std::uint16_t version = read_pod_le<std::uint16_t>(is);
    if (version != kModelVersion)
        throw IoError("unsupported model file version " + std::to_string(version));

    ModelConfig config;
    config.n_layers = read_pod_le<std::uint32_t>(is);
    config.n_heads = read_pod_le<std::uint32_t>(is);
    config.n_kv_heads = read_pod_le<std::uint32_t>(is);
    config.head_dim = read_pod_le<std::uint32_t>(is);
    config.d_model = read_pod_le<std::uint32_t>(is);
    config.d_ff = read_pod_le<std::uint32_t>(is);
    config.vocab_size = read_pod_le<std::uint32_t>(is);
    config.rope_theta = read_pod_le<float>(is);
    config.rmsnorm_eps = read_pod_le<float>(is);
    const std::uint64_t seed = read_pod_le<std::uint64_t>(is);
    const std::uint64_t stored_id = read_pod_le<std::uint64_t>(is);
    config.validate();
    if (stored_id != compute_model_id(config, seed))
        throw IoError("model id mismatch in " + path);

    Model m;
    m.config_ = config;
    m.seed_ = seed;
    m.model_id_ = stored_id;

    const std::size_t d = config.d_model, kv = config.kv_dim(), ff = config.d_ff;
    auto read_tensor = [&is](std::vector<std::size_t> shape) {
        Tensor t(std::move(shape));
        for (float& v : t.data) v = read_pod_le<float>(is);
        return t;
    };
    auto read_vec = [&is](std::size_t n) {
        std::vector<float> v(n);
        for (float& x : v) x = read_pod_le<float>(is);
        return v;
    };
    m.embedding_ = read_tensor({config.vocab_size, d});
    m.layers_.resize(config.n_layers);
    for (LayerWeights& w : m.layers_) {
        w.wq = read_tensor({d, d});
        w.wk = read_tensor({d, kv});
        w.wv = read_tensor({d, kv});
        w.wo = read_tensor({d, d});
        w.w_gate = read_tensor({d, ff});
        w.w_up = read_tensor({d, ff});
        w.w_down = read_tensor({ff, d});
        w.attn_norm = read_vec(d);
        w.mlp_norm = read_vec(d);
    }
    m.final_norm_ = read_vec(d);
    m.lm_head_ = read_tensor({d, config.vocab_size});
    return m;
}

} // namespace kvcomm
