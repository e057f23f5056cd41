// Copyright (c) 2026, mosld contributors
// SPDX-License-Identifier: Apache-2.0
//
// Closed-form trainable / forward parameter counts per method.

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mosld/arm.hpp"

namespace mosld {

class AdaptedModel;

struct GeometrySpec {
    std::uint64_t layers = 32;
    std::uint64_t d_in = 4096;
    std::uint64_t d_out = 4096;
    std::uint64_t rank = 8;
    std::uint64_t targets = 2;
    /// Per-layer expert counts; when empty every layer has `experts` experts.
    std::vector<std::uint64_t> experts_per_layer;
    std::uint64_t experts = 5;
    std::uint64_t top_k = 2;
    /// Size of the frozen base model (FP trainable count, forward baseline).
    std::uint64_t base_params = 6'738'415'616;

    /// 32 layers, d = 4096, r = 8, {Q, V}, five experts per layer.
    static GeometrySpec reference();
    /// Geometry of a constructed model (d_in = d_out = d_model).
    static GeometrySpec of(const AdaptedModel& model);

    void validate() const;
    [[nodiscard]] std::uint64_t experts_at(std::uint64_t layer) const;
    [[nodiscard]] std::uint64_t expert_total() const;
};

struct ParamReport {
    Arm method = Arm::LoRA;
    std::uint64_t trainable = 0;
    std::uint64_t forward = 0;
    /// LoRA-matrix bookkeeping per adapted projection, e.g. "(1A+5B)*32".
    std::string formula;
};

[[nodiscard]] ParamReport count_trainable(const GeometrySpec& geom, Arm method);
/// Parameters touched by one token's forward pass: base plus, per site, the
/// general matrices and B matrices of the selected experts and the router.
[[nodiscard]] ParamReport count_forward(const GeometrySpec& geom, Arm method, std::uint64_t base_params);
/// trainable and forward counts together.
[[nodiscard]] ParamReport count_params(const GeometrySpec& geom, Arm method);

[[nodiscard]] std::vector<ParamReport> report_table(const GeometrySpec& geom, std::span<const Arm> methods);
[[nodiscard]] std::string report_markdown(std::span<const ParamReport> rows);
[[nodiscard]] std::string report_csv(std::span<const ParamReport> rows);

/// Counts the trainable entries of a constructed model after arm setup.
[[nodiscard]] std::uint64_t count_trainable_walk(const AdaptedModel& model);

}  // namespace mosld
