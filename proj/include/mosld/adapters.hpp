// Copyright (c) 2026, mosld contributors
// SPDX-License-Identifier: Apache-2.0
//
// Mixture of low-rank experts sharing one general-feature matrix per site.
//
// Conventions (column vectors): A is r x d_in and is Gaussian-initialized,
// each expert B_k is d_out x r and starts at zero, the router W is N x d_in.
// The adapter output for token x is
//
//     delta(x) = (alpha / r) * sum_{k in TopK} S_k(x) * B_k (A~ x)
//
// where A~ is A under inverted weight dropout during training. The product
// A~ x is formed once and reused by every selected expert.

#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mosld/matrix.hpp"
#include "mosld/rng.hpp"
#include "mosld/routing.hpp"
#include "mosld/tape.hpp"

namespace mosld {

enum class Target { Q, V };
enum class Mode { Train, Eval };

/// Shared: one A read by all experts. Independent: one A per expert (MoLA-style).
enum class Sharing { Shared, Independent };

[[nodiscard]] const char* to_string(Target t);

struct AdapterHyper {
    std::size_t rank = 8;
    double alpha = 16.0;
    double drop_p = 0.1;
    std::vector<Target> targets{Target::Q, Target::V};
    /// Std-dev of A's Gaussian init; 0 selects 1/sqrt(rank).
    double a_init_sigma = 0.0;

    /// Throws ConfigError unless rank >= 1, alpha > 0, 0 <= drop_p < 1, targets nonempty.
    void validate() const;
    [[nodiscard]] double scaling() const { return alpha / static_cast<double>(rank); }
    [[nodiscard]] double a_sigma() const;
};

/// Binary keep-mask over A, entries 1 with probability keep_prob.
struct DropoutMask {
    Matrix mask;
    double keep_prob = 1.0;

    static DropoutMask sample(std::size_t rows, std::size_t cols, double drop_p, Rng& rng);
    static DropoutMask ones(std::size_t rows, std::size_t cols);
};

/// Adapter state for one (layer, target projection) site.
class SharedLoraLayer {
public:
    SharedLoraLayer() = default;
    SharedLoraLayer(const std::string& prefix, std::size_t d_in, std::size_t d_out, const AdapterHyper& hyper,
                    std::size_t n_experts, Rng& rng, Sharing sharing = Sharing::Shared, bool with_router = true);

    [[nodiscard]] std::size_t d_in() const noexcept { return d_in_; }
    [[nodiscard]] std::size_t d_out() const noexcept { return d_out_; }
    [[nodiscard]] std::size_t n_experts() const noexcept { return experts_.size(); }
    [[nodiscard]] const AdapterHyper& hyper() const noexcept { return hyper_; }
    [[nodiscard]] AdapterHyper& hyper() noexcept { return hyper_; }
    [[nodiscard]] Sharing sharing() const noexcept { return sharing_; }
    [[nodiscard]] bool has_router() const noexcept { return has_router_; }

    /// General-feature matrix read by `expert`. Under Sharing::Shared every
    /// expert gets a reference to the same storage.
    [[nodiscard]] const Parameter& general_for(std::size_t expert) const;
    [[nodiscard]] Parameter& general_for(std::size_t expert);
    [[nodiscard]] const Parameter& a_shared() const { return general_for(0); }
    [[nodiscard]] Parameter& a_shared() { return general_for(0); }

    [[nodiscard]] const std::vector<Parameter>& generals() const noexcept { return generals_; }
    [[nodiscard]] std::vector<Parameter>& generals() noexcept { return generals_; }
    [[nodiscard]] const std::vector<Parameter>& experts() const noexcept { return experts_; }
    [[nodiscard]] std::vector<Parameter>& experts() noexcept { return experts_; }
    [[nodiscard]] const Parameter& router() const noexcept { return router_; }
    [[nodiscard]] Parameter& router() noexcept { return router_; }

    [[nodiscard]] std::vector<const Parameter*> parameters() const;
    [[nodiscard]] std::vector<Parameter*> parameters();

private:
    std::size_t d_in_ = 0;
    std::size_t d_out_ = 0;
    AdapterHyper hyper_;
    Sharing sharing_ = Sharing::Shared;
    bool has_router_ = true;
    std::vector<Parameter> generals_;
    std::vector<Parameter> experts_;
    Parameter router_;
};

/// Fresh site: A ~ N(0, sigma^2), all B zero, router ~ N(0, 1/d_in).
/// Throws ConfigError if n_experts == 0 or rank > min(d_in, d_out).
[[nodiscard]] SharedLoraLayer init_shared_layer(std::size_t d_in, std::size_t d_out, const AdapterHyper& hyper,
                                                std::size_t n_experts, Rng& rng);

/// A under dropout: Train -> (mask ⊙ A) / (1 - p) with a fresh mask; Eval -> A.
[[nodiscard]] Matrix dropped_a(const SharedLoraLayer& layer, Mode mode, Rng& rng);
/// (mask ⊙ A) / (1 - p) for an explicit mask.
[[nodiscard]] Matrix dropped_a(const SharedLoraLayer& layer, const DropoutMask& mask);

/// (alpha/r) * sum_k S_k B_k (A~ x). Throws InternalError on gate indices out of range.
[[nodiscard]] Vector adapter_delta(const SharedLoraLayer& layer, std::span<const double> x, const GateResult& gate,
                                   Mode mode, Rng& rng);
/// W0 x + adapter_delta(x).
[[nodiscard]] Vector mosld_forward(const Matrix& w0, const SharedLoraLayer& layer, std::span<const double> x,
                                   const GateResult& gate, Mode mode, Rng& rng);
/// Effective dense update (alpha/r) * sum_k S_k B_k A for a fixed gate (evaluation mode).
[[nodiscard]] Matrix merge_check(const SharedLoraLayer& layer, const GateResult& gate);

/// Gate for a site without a router (plain LoRA): the single expert with score 1.
[[nodiscard]] GateResult trivial_gate();

// ---------------------------------------------------------------------------
// Tape-level site computation over a row batch of tokens.

/// Row i of the result is scaling * sum_k scores(i,k) * projected[src(k)].row(i) * up[k]^T,
/// where src(k) = k if projected.size() == up.size() else 0. Entries with a
/// zero score are skipped in both passes.
Var gated_up_projection(Tape& t, std::span<const Var> projected, std::span<const Var> up, Var scores,
                        double scaling);

struct SiteOutput {
    Var delta;
    std::optional<BatchGate> gate;  ///< absent for router-less sites
};

/// Batched adapter delta for x (n x d_in). Dropout masks are drawn from `rng`
/// only in Train mode with drop_p > 0.
SiteOutput site_delta(Tape& t, const SharedLoraLayer& layer, Var x, std::size_t top_k, Mode mode, Rng& rng);

}  // namespace mosld
