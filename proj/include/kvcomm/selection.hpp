#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kvcomm/model.hpp"

namespace kvcomm {

enum class SelectionStrategy { Score, Chunk, Random, Explicit };

/// Layer-selection hyperparameters. mu is a 0-based layer coordinate; the
/// default sits at the geometric middle of 0..L-1, which is where the
/// customary "L/2 in 1-based numbering" lands (see README).
struct SelectionConfig {
    double alpha = 1.0;
    double mu = 0.0;
    double sigma = 10.0;
    std::uint32_t m = 0;             // explicit layer budget; wins over ratio when set
    double ratio = 0.0;              // fraction of layers, resolved via resolve_m
    SelectionStrategy strategy = SelectionStrategy::Score;

    static SelectionConfig defaults(std::uint32_t n_layers);
    std::uint32_t resolve_budget(std::uint32_t n_layers) const;
    void validate(std::uint32_t n_layers) const;
};

struct SelectionScores {
    std::vector<double> raw;        // mean query->context attention mass per layer
    std::vector<double> normalized; // min-max rescaled across layers
    std::vector<double> prior;      // Gaussian depth prior
    std::vector<double> combined;   // alpha * normalized + (1-alpha) * prior
};

/// Mean attention mass query tokens place on the first `context_len` rows of
/// a captured [C;Q] trace, per layer. Both spans must be non-empty.
std::vector<double> attention_importance(const ForwardTrace& trace, std::size_t context_len,
                                         std::size_t query_len);

/// (x - min) / (max - min); a constant vector maps to all zeros so that a
/// degenerate signal defers entirely to the prior.
std::vector<double> normalize_scores(const std::vector<double>& raw);

/// exp(-(l - mu)^2 / (2 sigma^2)) over 0-based layers l.
std::vector<double> gaussian_prior(std::uint32_t n_layers, double mu, double sigma);

std::vector<double> combine_scores(const std::vector<double>& normalized,
                                   const std::vector<double>& prior, double alpha);

/// ceil(ratio * L) with tolerance snapping so exact products do not round up.
std::uint32_t resolve_m(std::uint32_t n_layers, double ratio);

/// The M highest-scoring layers; ties prefer the lower index. Sorted output.
std::vector<std::uint32_t> select_top_m(const std::vector<double>& scores, std::uint32_t m);

/// Inclusive contiguous range [from, to].
std::vector<std::uint32_t> select_chunk(std::uint32_t layer_from, std::uint32_t layer_to,
                                        std::uint32_t n_layers);

/// M layers uniformly without replacement, deterministic per seed.
std::vector<std::uint32_t> select_random(std::uint32_t n_layers, std::uint32_t m,
                                         std::uint64_t seed);

/// M layers whose descending score ranks form a window centred at the given
/// quantile: level 1.0 is the top window (== select_top_m), 0.0 the bottom.
std::vector<std::uint32_t> select_by_attention_level(const std::vector<double>& scores,
                                                     std::uint32_t m, double level);

struct CalibrationResult {
    std::vector<std::uint32_t> layers;
    SelectionScores scores;
};

/// One capture-enabled pass over [context; query] on the scoring model,
/// then score -> normalize -> prior -> combine -> top-M. The returned layer
/// set is what a Session freezes for all subsequent samples.
CalibrationResult calibrate(const Model& scoring_model,
                            const std::vector<std::uint32_t>& context,
                            const std::vector<std::uint32_t>& query,
                            const SelectionConfig& config);

/// Multi-sample variant: raw scores are averaged across pairs before
/// normalization.
CalibrationResult calibrate_multi(
    const Model& scoring_model,
    const std::vector<std::pair<std::vector<std::uint32_t>, std::vector<std::uint32_t>>>& pairs,
    const SelectionConfig& config);

std::string scores_to_json(const SelectionScores& scores,
                           const std::vector<std::uint32_t>& selected);

} // namespace kvcomm
