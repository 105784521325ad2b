#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "kvcomm/model.hpp"

namespace kvcomm {

struct RunResult {
    std::vector<std::uint32_t> tokens;
    Tensor prefill_logits; // logits over the prompt span of the first pass
    std::vector<std::vector<float>> step_logits;
};

/// No communication: the receiver answers from the query alone.
RunResult run_baseline(const Model& receiver, const std::vector<std::uint32_t>& query,
                       std::uint32_t max_new,
                       std::optional<std::uint32_t> eos_id = std::nullopt);

/// Upper bound: one model reads [context; query] directly.
RunResult run_skyline(const Model& receiver, const std::vector<std::uint32_t>& context,
                      const std::vector<std::uint32_t>& query, std::uint32_t max_new,
                      std::optional<std::uint32_t> eos_id = std::nullopt);

/// Skyline plus a capture-enabled trace (feeds calibration unchanged).
std::pair<ForwardTrace, RunResult> run_skyline_traced(const Model& receiver,
                                                      const std::vector<std::uint32_t>& context,
                                                      const std::vector<std::uint32_t>& query,
                                                      std::uint32_t max_new,
                                                      CaptureFlags capture);

enum class AcMode { Replace, Mean, Sum };
AcMode ac_mode_from_string(const std::string& s);

/// Activation communication: the sender's last-context-token residual at the
/// output of `boundary_layer` is merged into the receiver's last query token
/// at the same boundary.
RunResult run_ac(const Model& sender, const Model& receiver,
                 const std::vector<std::uint32_t>& context,
                 const std::vector<std::uint32_t>& query, AcMode mode,
                 std::uint32_t boundary_layer, std::uint32_t max_new,
                 std::optional<std::uint32_t> eos_id = std::nullopt);

/// Boundary defaults to the last layer's output (pre-head).
RunResult run_ac(const Model& sender, const Model& receiver,
                 const std::vector<std::uint32_t>& context,
                 const std::vector<std::uint32_t>& query, AcMode mode, std::uint32_t max_new);

/// All-token hidden-state prepending: sender residuals entering layer_from
/// are prepended to the receiver's sequence at the input of layer_to; the
/// query re-offsets to positions after the context from that depth on.
RunResult run_hs_prepend(const Model& sender, const Model& receiver,
                         const std::vector<std::uint32_t>& context,
                         const std::vector<std::uint32_t>& query, std::uint32_t layer_from,
                         std::uint32_t layer_to, std::uint32_t max_new,
                         std::optional<std::uint32_t> eos_id = std::nullopt);

enum class TokenAblation { Remove, Retain };

struct TokenImportanceResult {
    double kl = 0.0;      // KL(reference next-token dist || ablated)
    bool top1_match = true;
};

/// Zeroes the residual vector of one position (Remove) or of all other
/// positions (Retain) at the output of layer `layer`, and measures the shift
/// of the final next-token distribution against the untouched run.
TokenImportanceResult run_token_importance(const Model& model,
                                           const std::vector<std::uint32_t>& prompt,
                                           TokenAblation mode, std::uint32_t position,
                                           std::uint32_t layer);

/// Rectangular deterministic sweep output, CSV/JSON emittable.
struct ExperimentGrid {
    std::string kind;
    std::string row_axis;
    std::string col_axis;
    std::vector<double> row_labels;
    std::vector<double> col_labels;
    std::vector<double> cells; // row-major [rows × cols]
    std::vector<std::pair<std::string, std::string>> metadata;

    std::size_t rows() const { return row_labels.size(); }
    std::size_t cols() const { return col_labels.size(); }
    double& at(std::size_t r, std::size_t c) { return cells[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return cells[r * cols() + c]; }

    std::string to_csv() const;
    std::string to_json() const;
};

/// Fraction of greedy tokens agreeing with a reference continuation,
/// position-wise over the longer of the two.
double token_agreement(const std::vector<std::uint32_t>& a, const std::vector<std::uint32_t>& b);

} // namespace kvcomm
