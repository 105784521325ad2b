#pragma once

#include <cstdint>
#include <vector>

#include "kvcomm/baselines.hpp"
#include "kvcomm/cost_model.hpp"
#include "kvcomm/selection.hpp"

namespace kvcomm {

/// Bounded worker pool over [0, n); cells must be independent.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn,
                  unsigned max_workers = 0);

/// KL shift from ablating each (layer, position) cell of the prompt.
ExperimentGrid grid_token_importance(const Model& model,
                                     const std::vector<std::uint32_t>& prompt,
                                     TokenAblation mode);

/// Agreement with the skyline continuation when sender residuals from
/// layer_from are prepended at receiver layer_to; full rectangular sweep.
ExperimentGrid grid_hs_prepend(const Model& sender, const Model& receiver,
                               const std::vector<std::uint32_t>& context,
                               const std::vector<std::uint32_t>& query, std::uint32_t max_new);

/// Contiguous-chunk selection sweep over layer ranges [from, to]; cells with
/// from > to hold the -1 sentinel.
ExperimentGrid grid_chunk(const Model& sender, const Model& receiver,
                          const std::vector<std::uint32_t>& context,
                          const std::vector<std::uint32_t>& query, std::uint32_t max_new);

/// Agreement as the selected rank window slides from the bottom (level 0) to
/// the top (level 1) of the attention-importance ordering.
ExperimentGrid grid_attention_level(const Model& sender, const Model& receiver,
                                    const std::vector<std::uint32_t>& context,
                                    const std::vector<std::uint32_t>& query, std::uint32_t m,
                                    std::uint32_t n_levels, std::uint32_t max_new);

/// Score-based selection vs seed-averaged random selection per ratio.
ExperimentGrid grid_random_vs_kvcomm(const Model& sender, const Model& receiver,
                                     const std::vector<std::uint32_t>& context,
                                     const std::vector<std::uint32_t>& query,
                                     const std::vector<double>& ratios, std::uint32_t n_seeds,
                                     std::uint32_t max_new, const SelectionConfig& config);

/// Instrumented receiver-side FLOPs per selection ratio, with the analytic
/// prediction and the skyline ratio alongside.
ExperimentGrid grid_flops_sweep(const Model& sender, const Model& receiver,
                                const std::vector<std::uint32_t>& context,
                                const std::vector<std::uint32_t>& query,
                                const std::vector<double>& ratios, std::uint32_t max_new,
                                const SelectionConfig& config);

} // namespace kvcomm
