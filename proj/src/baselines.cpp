#include "kvcomm/baselines.hpp"

#include <cmath>
#include <sstream>

namespace kvcomm {

namespace {

std::vector<float> last_row(const Tensor& logits) {
    const std::size_t last = logits.shape[0] - 1;
    return std::vector<float>(logits.data.begin() + last * logits.shape[1],
                              logits.data.begin() + (last + 1) * logits.shape[1]);
}

RunResult finish_greedy(const Model& model, Tensor prefill_logits, KvCacheSet cache,
                        std::uint32_t next_position, std::uint32_t max_new,
                        std::optional<std::uint32_t> eos_id) {
    RunResult r;
    GenResult gen =
        model.greedy_continue(cache, last_row(prefill_logits), next_position, max_new, eos_id);
    r.prefill_logits = std::move(prefill_logits);
    r.tokens = std::move(gen.tokens);
    r.step_logits = std::move(gen.step_logits);
    return r;
}

std::vector<double> softmax_dist(const std::vector<float>& logits) {
    double mx = logits[0];
    for (float v : logits) mx = std::max(mx, static_cast<double>(v));
    std::vector<double> p(logits.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        p[i] = std::exp(static_cast<double>(logits[i]) - mx);
        sum += p[i];
    }
    for (double& v : p) v /= sum;
    return p;
}

} // namespace

RunResult run_baseline(const Model& receiver, const std::vector<std::uint32_t>& query,
                       std::uint32_t max_new, std::optional<std::uint32_t> eos_id) {
    auto [trace, cache] = receiver.prefill(query);
    return finish_greedy(receiver, std::move(trace.logits), std::move(cache),
                         static_cast<std::uint32_t>(query.size()), max_new, eos_id);
}

RunResult run_skyline(const Model& receiver, const std::vector<std::uint32_t>& context,
                      const std::vector<std::uint32_t>& query, std::uint32_t max_new,
                      std::optional<std::uint32_t> eos_id) {
    std::vector<std::uint32_t> joined = context;
    joined.insert(joined.end(), query.begin(), query.end());
    auto [trace, cache] = receiver.prefill(joined);
    return finish_greedy(receiver, std::move(trace.logits), std::move(cache),
                         static_cast<std::uint32_t>(joined.size()), max_new, eos_id);
}

std::pair<ForwardTrace, RunResult> run_skyline_traced(const Model& receiver,
                                                      const std::vector<std::uint32_t>& context,
                                                      const std::vector<std::uint32_t>& query,
                                                      std::uint32_t max_new,
                                                      CaptureFlags capture) {
    std::vector<std::uint32_t> joined = context;
    joined.insert(joined.end(), query.begin(), query.end());
    Model::PrefillOptions opts;
    opts.capture = capture;
    auto [trace, cache] = receiver.prefill(joined, opts);
    Tensor logits = trace.logits;
    RunResult r = finish_greedy(receiver, std::move(logits), std::move(cache),
                                static_cast<std::uint32_t>(joined.size()), max_new,
                                std::nullopt);
    return {std::move(trace), std::move(r)};
}

AcMode ac_mode_from_string(const std::string& s) {
    if (s == "replace") return AcMode::Replace;
    if (s == "mean") return AcMode::Mean;
    if (s == "sum") return AcMode::Sum;
    throw ConfigError("unknown AC mode: " + s);
}

RunResult run_ac(const Model& sender, const Model& receiver,
                 const std::vector<std::uint32_t>& context,
                 const std::vector<std::uint32_t>& query, AcMode mode,
                 std::uint32_t boundary_layer, std::uint32_t max_new,
                 std::optional<std::uint32_t> eos_id) {
    if (boundary_layer >= receiver.config().n_layers ||
        boundary_layer >= sender.config().n_layers)
        throw ConfigError("run_ac: boundary layer out of range");
    if (sender.config().d_model != receiver.config().d_model)
        throw ConfigError("run_ac: models disagree on hidden width");

    Model::PrefillOptions sender_opts;
    sender_opts.capture.layer_inputs = true;
    auto [sender_trace, sender_cache] = sender.prefill(context, sender_opts);
    const Tensor& boundary_out = sender_trace.layer_inputs[boundary_layer + 1];
    const std::size_t d = sender.config().d_model;
    std::vector<float> h_s(boundary_out.data.end() - d, boundary_out.data.end());

    const std::size_t last_q = query.size() - 1;
    HiddenHook hook = [&](std::uint32_t layer, Tensor& hidden) {
        if (layer != boundary_layer) return;
        float* row = hidden.data.data() + last_q * d;
        switch (mode) {
            case AcMode::Replace:
                for (std::size_t j = 0; j < d; ++j) row[j] = h_s[j];
                break;
            case AcMode::Mean:
                for (std::size_t j = 0; j < d; ++j) row[j] = (row[j] + h_s[j]) / 2.0f;
                break;
            case AcMode::Sum:
                for (std::size_t j = 0; j < d; ++j) row[j] = row[j] + h_s[j];
                break;
        }
    };
    Model::PrefillOptions opts;
    opts.hook = &hook;
    auto [trace, cache] = receiver.prefill(query, opts);
    return finish_greedy(receiver, std::move(trace.logits), std::move(cache),
                         static_cast<std::uint32_t>(query.size()), max_new, eos_id);
}

RunResult run_ac(const Model& sender, const Model& receiver,
                 const std::vector<std::uint32_t>& context,
                 const std::vector<std::uint32_t>& query, AcMode mode, std::uint32_t max_new) {
    return run_ac(sender, receiver, context, query, mode, receiver.config().n_layers - 1,
                  max_new);
}

RunResult run_hs_prepend(const Model& sender, const Model& receiver,
                         const std::vector<std::uint32_t>& context,
                         const std::vector<std::uint32_t>& query, std::uint32_t layer_from,
                         std::uint32_t layer_to, std::uint32_t max_new,
                         std::optional<std::uint32_t> eos_id) {
    const std::uint32_t L = receiver.config().n_layers;
    if (layer_from > sender.config().n_layers || layer_to >= L)
        throw ConfigError("run_hs_prepend: layer out of range");
    if (sender.config().d_model != receiver.config().d_model)
        throw ConfigError("run_hs_prepend: models disagree on hidden width");
    if (context.empty()) return run_baseline(receiver, query, max_new, eos_id);

    // sender residuals entering layer_from; index 0 is the embedding
    Model::PrefillOptions sender_opts;
    sender_opts.capture.layer_inputs = true;
    auto [sender_trace, sender_cache] = sender.prefill(context, sender_opts);
    const Tensor& h_context = sender_trace.layer_inputs[layer_from];

    const std::size_t d = receiver.config().d_model;
    const std::size_t c_len = context.size(), q_len = query.size();

    KvCacheSet cache = receiver.empty_cache();
    Tensor hidden_q = receiver.embed(query);
    if (layer_to > 0) {
        std::vector<std::uint32_t> early_pos(q_len);
        for (std::size_t i = 0; i < q_len; ++i) early_pos[i] = static_cast<std::uint32_t>(i);
        Model::ForwardOptions fopts;
        fopts.layer_begin = 0;
        fopts.layer_end = layer_to;
        hidden_q = receiver.forward_layers(std::move(hidden_q), early_pos, cache, fopts);
    }

    // extend: [context residuals; query residuals], query re-offset after it
    Tensor extended({c_len + q_len, d});
    std::copy(h_context.data.begin(), h_context.data.end(), extended.data.begin());
    std::copy(hidden_q.data.begin(), hidden_q.data.end(),
              extended.data.begin() + c_len * d);
    std::vector<std::uint32_t> positions(c_len + q_len);
    for (std::size_t i = 0; i < c_len + q_len; ++i)
        positions[i] = static_cast<std::uint32_t>(i);

    Model::ForwardOptions fopts;
    fopts.layer_begin = layer_to;
    fopts.layer_end = L;
    Tensor final_hidden = receiver.forward_layers(std::move(extended), positions, cache, fopts);
    Tensor logits = receiver.logits_from_hidden(final_hidden);

    return finish_greedy(receiver, std::move(logits), std::move(cache),
                         static_cast<std::uint32_t>(c_len + q_len), max_new, eos_id);
}

TokenImportanceResult run_token_importance(const Model& model,
                                           const std::vector<std::uint32_t>& prompt,
                                           TokenAblation mode, std::uint32_t position,
                                           std::uint32_t layer) {
    if (position >= prompt.size()) throw ConfigError("run_token_importance: position out of range");
    if (layer >= model.config().n_layers)
        throw ConfigError("run_token_importance: layer out of range");

    auto [ref_trace, ref_cache] = model.prefill(prompt);
    const std::vector<double> p_ref = softmax_dist(last_row(ref_trace.logits));

    const std::size_t d = model.config().d_model;
    HiddenHook hook = [&](std::uint32_t l, Tensor& hidden) {
        if (l != layer) return;
        const std::size_t rows = hidden.shape[0];
        for (std::size_t t = 0; t < rows; ++t) {
            const bool zero_it =
                mode == TokenAblation::Remove ? (t == position) : (t != position);
            if (zero_it)
                for (std::size_t j = 0; j < d; ++j) hidden.at(t, j) = 0.0f;
        }
    };
    Model::PrefillOptions opts;
    opts.hook = &hook;
    auto [mod_trace, mod_cache] = model.prefill(prompt, opts);
    const std::vector<double> p_mod = softmax_dist(last_row(mod_trace.logits));

    TokenImportanceResult r;
    for (std::size_t i = 0; i < p_ref.size(); ++i)
        r.kl += p_ref[i] * std::log(p_ref[i] / p_mod[i]);
    r.kl = std::max(r.kl, 0.0); // clamp the tiny negative float residue of identical dists
    r.top1_match = argmax(last_row(ref_trace.logits)) == argmax(last_row(mod_trace.logits));
    return r;
}

std::string ExperimentGrid::to_csv() const {
    std::ostringstream os;
    os.precision(17);
    os << row_axis << "\\" << col_axis;
    for (double c : col_labels) os << "," << c;
    os << "\n";
    for (std::size_t r = 0; r < rows(); ++r) {
        os << row_labels[r];
        for (std::size_t c = 0; c < cols(); ++c) os << "," << at(r, c);
        os << "\n";
    }
    return os.str();
}

std::string ExperimentGrid::to_json() const {
    std::ostringstream os;
    os.precision(17);
    auto emit_array = [&os](const std::vector<double>& v) {
        os << "[";
        for (std::size_t i = 0; i < v.size(); ++i) {
            if (i) os << ",";
            os << v[i];
        }
        os << "]";
    };
    os << "{\"kind\":\"" << kind << "\",\"row_axis\":\"" << row_axis << "\",\"col_axis\":\""
       << col_axis << "\",\"row_labels\":";
    emit_array(row_labels);
    os << ",\"col_labels\":";
    emit_array(col_labels);
    os << ",\"cells\":[";
    for (std::size_t r = 0; r < rows(); ++r) {
        if (r) os << ",";
        std::vector<double> row(cells.begin() + r * cols(), cells.begin() + (r + 1) * cols());
        emit_array(row);
    }
    os << "],\"metadata\":{";
    for (std::size_t i = 0; i < metadata.size(); ++i) {
        if (i) os << ",";
        os << "\"" << metadata[i].first << "\":\"" << metadata[i].second << "\"";
    }
    os << "}}";
    return os.str();
}

double token_agreement(const std::vector<std::uint32_t>& a, const std::vector<std::uint32_t>& b) {
    const std::size_t n = std::max(a.size(), b.size());
    if (n == 0) return 1.0;
    std::size_t match = 0;
    for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i)
        if (a[i] == b[i]) ++match;
    return static_cast<double>(match) / static_cast<double>(n);
}

} // namespace kvcomm
