// Copyright (c) 2026, mosld contributors
// SPDX-License-Identifier: Apache-2.0
//
// Top-K gating, dispatch statistics and the load-balancing auxiliary loss.

#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "mosld/matrix.hpp"
#include "mosld/tape.hpp"

namespace mosld {

/// Selected experts for one token, scores renormalized over the selection.
struct GateResult {
    std::vector<std::size_t> indices;  ///< descending by probability, ties by lower index
    std::vector<double> scores;        ///< positive, sums to 1
    std::vector<double> full_probs;    ///< softmax over all experts
};

/// Dispatch fractions f_k and mean router probabilities P_k for one site.
struct LoadBalanceStats {
    std::vector<double> token_fraction;
    std::vector<double> mean_prob;
    std::size_t n_experts = 0;
    std::size_t n_tokens = 0;
};

/// Per-layer expert counts and the global top-K.
struct ExpertAllocation {
    std::vector<std::size_t> per_layer;
    std::size_t top_k = 2;

    /// Throws ConfigError unless every N_l >= 1, K >= 1 and (when
    /// n_layers != 0) per_layer has n_layers entries. Sites with fewer than
    /// K experts use all of them.
    void validate(std::size_t n_layers = 0) const;
    [[nodiscard]] std::size_t total_experts() const;
    [[nodiscard]] std::string to_string() const;

    /// Named schedules: "descending" (8,6,4,2), "ascending" (2,4,6,8),
    /// "uniform" (5,5,5,5), "single" (all 1). Four-entry schedules are
    /// stretched over n_layers in equal quarters.
    static ExpertAllocation preset(const std::string& name, std::size_t n_layers, std::size_t top_k);
};

/// Indices of the k largest entries, ordered by value descending; equal
/// values are ordered by lower index.
[[nodiscard]] std::vector<std::size_t> top_k_indices(std::span<const double> values, std::size_t k);

/// TopK(softmax(logits), min(K, N)) renormalized. Throws ConfigError if k == 0 or there are no logits.
[[nodiscard]] GateResult gate_from_logits(std::span<const double> logits, std::size_t k);
/// Gate for one token: logits = router_w (N x d_in) * x.
[[nodiscard]] GateResult gate(const Matrix& router_w, std::span<const double> x, std::size_t k);

[[nodiscard]] LoadBalanceStats accumulate_stats(std::span<const GateResult> gates, std::size_t n_experts);
/// N * sum_k f_k * P_k.
[[nodiscard]] double load_balance_loss(const LoadBalanceStats& stats);
/// Population standard deviation over mean.
[[nodiscard]] double coefficient_of_variation(std::span<const double> values);

/// Routing decisions for a batch of tokens recorded on a tape.
struct BatchGate {
    Var probs;   ///< n x N softmax probabilities
    Var scores;  ///< n x N, renormalized scores at selected entries, zero elsewhere
    std::vector<std::vector<std::size_t>> selected;
    std::size_t n_experts = 0;
};

/// Renormalized top-k of each row of `probs`. The gradient is the exact
/// derivative of p_j / sum_{i in S} p_i with the selection S held fixed.
Var topk_renorm(Tape& t, Var probs, std::size_t k, std::vector<std::vector<std::size_t>>& selected);
/// softmax(x * router^T) followed by topk_renorm.
BatchGate gate_batch(Tape& t, Var x, Var router_w, std::size_t k);
[[nodiscard]] LoadBalanceStats batch_stats(const Tape& t, const BatchGate& gate);
[[nodiscard]] std::vector<GateResult> to_gate_results(const Tape& t, const BatchGate& gate);
/// Load-balance loss on a tape; f_k is a constant, gradient flows through P_k.
Var balance_loss(Tape& t, const BatchGate& gate);

}  // namespace mosld
