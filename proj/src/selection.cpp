#include "kvcomm/selection.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

namespace kvcomm {

SelectionConfig SelectionConfig::defaults(std::uint32_t n_layers) {
    SelectionConfig c;
    c.alpha = 1.0;
    c.mu = n_layers / 2.0 - 0.5;
    c.sigma = 10.0;
    c.ratio = 0.3;
    return c;
}

std::uint32_t SelectionConfig::resolve_budget(std::uint32_t n_layers) const {
    if (m > 0) {
        if (m > n_layers) throw ConfigError("selection budget exceeds layer count");
        return m;
    }
    return resolve_m(n_layers, ratio);
}

void SelectionConfig::validate(std::uint32_t n_layers) const {
    if (alpha < 0.0 || alpha > 1.0) throw ConfigError("alpha must be in [0,1]");
    if (!(sigma > 0.0)) throw ConfigError("sigma must be positive");
    if (m > n_layers) throw ConfigError("M exceeds layer count");
    if (m == 0 && (ratio <= 0.0 || ratio > 1.0))
        throw ConfigError("ratio must be in (0,1] when M is not given");
}

std::vector<double> attention_importance(const ForwardTrace& trace, std::size_t context_len,
                                         std::size_t query_len) {
    if (context_len == 0 || query_len == 0)
        throw ConfigError("attention_importance: context and query must be non-empty");
    std::vector<double> raw;
    raw.reserve(trace.attention.size());
    for (std::size_t l = 0; l < trace.attention.size(); ++l) {
        const Tensor& a = trace.attention[l];
        if (a.rank() != 3)
            throw ShapeError("attention_importance: layer " + std::to_string(l) +
                             " has no captured attention");
        const std::size_t heads = a.shape[0], rows = a.shape[1], cols = a.shape[2];
        if (rows < context_len + query_len || cols < context_len)
            throw ShapeError("attention_importance: trace smaller than context+query");
        double sum = 0.0;
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t t = context_len; t < context_len + query_len; ++t)
                for (std::size_t c = 0; c < context_len; ++c) sum += a.at(h, t, c);
        raw.push_back(sum / (static_cast<double>(heads) * static_cast<double>(query_len)));
    }
    return raw;
}

std::vector<double> normalize_scores(const std::vector<double>& raw) {
    if (raw.empty()) return {};
    const auto [mn_it, mx_it] = std::minmax_element(raw.begin(), raw.end());
    const double mn = *mn_it, mx = *mx_it;
    std::vector<double> out(raw.size(), 0.0);
    if (mx == mn) return out;
    for (std::size_t i = 0; i < raw.size(); ++i) out[i] = (raw[i] - mn) / (mx - mn);
    return out;
}

std::vector<double> gaussian_prior(std::uint32_t n_layers, double mu, double sigma) {
    if (!(sigma > 0.0)) throw ConfigError("gaussian_prior: sigma must be positive");
    std::vector<double> out(n_layers);
    for (std::uint32_t l = 0; l < n_layers; ++l) {
        const double dlt = static_cast<double>(l) - mu;
        out[l] = std::exp(-(dlt * dlt) / (2.0 * sigma * sigma));
    }
    return out;
}

std::vector<double> combine_scores(const std::vector<double>& normalized,
                                   const std::vector<double>& prior, double alpha) {
    if (normalized.size() != prior.size())
        throw ShapeError("combine_scores: length mismatch");
    if (alpha < 0.0 || alpha > 1.0) throw ConfigError("combine_scores: alpha must be in [0,1]");
    std::vector<double> out(normalized.size());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = alpha * normalized[i] + (1.0 - alpha) * prior[i];
    return out;
}

std::uint32_t resolve_m(std::uint32_t n_layers, double ratio) {
    if (ratio <= 0.0 || ratio > 1.0) throw ConfigError("resolve_m: ratio must be in (0,1]");
    const double product = ratio * static_cast<double>(n_layers);
    const double snapped = std::abs(product - std::round(product)) < 1e-9
                               ? std::round(product)
                               : std::ceil(product);
    return static_cast<std::uint32_t>(snapped);
}

std::vector<std::uint32_t> select_top_m(const std::vector<double>& scores, std::uint32_t m) {
    const std::uint32_t L = static_cast<std::uint32_t>(scores.size());
    if (m > L) throw ConfigError("select_top_m: M exceeds layer count");
    if (m == 0) return {};
    std::vector<std::uint32_t> order(L);
    std::iota(order.begin(), order.end(), 0u);
    std::stable_sort(order.begin(), order.end(), [&scores](std::uint32_t a, std::uint32_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return a < b;
    });
    std::vector<std::uint32_t> picked(order.begin(), order.begin() + m);
    std::sort(picked.begin(), picked.end());
    return picked;
}

std::vector<std::uint32_t> select_chunk(std::uint32_t layer_from, std::uint32_t layer_to,
                                        std::uint32_t n_layers) {
    if (layer_from > layer_to) throw ConfigError("select_chunk: inverted range");
    if (layer_to >= n_layers) throw ConfigError("select_chunk: range end out of bounds");
    std::vector<std::uint32_t> out;
    for (std::uint32_t l = layer_from; l <= layer_to; ++l) out.push_back(l);
    return out;
}

std::vector<std::uint32_t> select_random(std::uint32_t n_layers, std::uint32_t m,
                                         std::uint64_t seed) {
    if (m > n_layers) throw ConfigError("select_random: M exceeds layer count");
    std::vector<std::uint32_t> pool(n_layers);
    std::iota(pool.begin(), pool.end(), 0u);
    std::mt19937_64 rng(seed);
    // partial Fisher-Yates; the modulo bias at these ranges is immaterial
    for (std::uint32_t i = 0; i < m; ++i) {
        const std::uint32_t j = i + static_cast<std::uint32_t>(rng() % (n_layers - i));
        std::swap(pool[i], pool[j]);
    }
    std::vector<std::uint32_t> picked(pool.begin(), pool.begin() + m);
    std::sort(picked.begin(), picked.end());
    return picked;
}

std::vector<std::uint32_t> select_by_attention_level(const std::vector<double>& scores,
                                                     std::uint32_t m, double level) {
    const std::uint32_t L = static_cast<std::uint32_t>(scores.size());
    if (m > L) throw ConfigError("select_by_attention_level: M exceeds layer count");
    if (level < 0.0 || level > 1.0)
        throw ConfigError("select_by_attention_level: level must be in [0,1]");
    if (m == 0) return {};
    std::vector<std::uint32_t> order(L);
    std::iota(order.begin(), order.end(), 0u);
    std::stable_sort(order.begin(), order.end(), [&scores](std::uint32_t a, std::uint32_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return a < b;
    });
    const std::uint32_t start =
        static_cast<std::uint32_t>(std::lround((1.0 - level) * static_cast<double>(L - m)));
    std::vector<std::uint32_t> picked(order.begin() + start, order.begin() + start + m);
    std::sort(picked.begin(), picked.end());
    return picked;
}

CalibrationResult calibrate(const Model& scoring_model,
                            const std::vector<std::uint32_t>& context,
                            const std::vector<std::uint32_t>& query,
                            const SelectionConfig& config) {
    return calibrate_multi(scoring_model, {{context, query}}, config);
}

CalibrationResult calibrate_multi(
    const Model& scoring_model,
    const std::vector<std::pair<std::vector<std::uint32_t>, std::vector<std::uint32_t>>>& pairs,
    const SelectionConfig& config) {
    const std::uint32_t L = scoring_model.config().n_layers;
    config.validate(L);
    if (pairs.empty()) throw ConfigError("calibrate: need at least one (context, query) pair");

    std::vector<double> raw_sum(L, 0.0);
    for (const auto& [context, query] : pairs) {
        std::vector<std::uint32_t> joined = context;
        joined.insert(joined.end(), query.begin(), query.end());
        Model::PrefillOptions opts;
        opts.capture.attention = true;
        auto [trace, cache] = scoring_model.prefill(joined, opts);
        std::vector<double> raw = attention_importance(trace, context.size(), query.size());
        for (std::uint32_t l = 0; l < L; ++l) raw_sum[l] += raw[l];
    }
    CalibrationResult result;
    result.scores.raw = raw_sum;
    for (double& v : result.scores.raw) v /= static_cast<double>(pairs.size());
    result.scores.normalized = normalize_scores(result.scores.raw);
    result.scores.prior = gaussian_prior(L, config.mu, config.sigma);
    result.scores.combined =
        combine_scores(result.scores.normalized, result.scores.prior, config.alpha);
    result.layers = select_top_m(result.scores.combined, config.resolve_budget(L));
    return result;
}

std::string scores_to_json(const SelectionScores& scores,
                           const std::vector<std::uint32_t>& selected) {
    std::ostringstream os;
    os.precision(17);
    os << "{\"layers\":[";
    for (std::size_t l = 0; l < scores.raw.size(); ++l) {
        const bool sel =
            std::binary_search(selected.begin(), selected.end(), static_cast<std::uint32_t>(l));
        if (l) os << ",";
        os << "{\"layer\":" << l << ",\"raw\":" << scores.raw[l]
           << ",\"normalized\":" << scores.normalized[l] << ",\"prior\":" << scores.prior[l]
           << ",\"combined\":" << scores.combined[l] << ",\"selected\":" << (sel ? "true" : "false")
           << "}";
    }
    os << "],\"selected\":[";
    for (std::size_t i = 0; i < selected.size(); ++i) {
        if (i) os << ",";
        os << selected[i];
    }
    os << "]}";
    return os.str();
}

} // namespace kvcomm
