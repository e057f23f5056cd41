// Copyright (c) 2026, mosld contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <string>

namespace mosld {

/// Fine-tuning methods compared by the experiment grid.
///   FP     full fine-tuning, every base tensor trainable
///   LoRA   one expert per site, no router
///   MoLA   routed experts with independent (A_k, B_k)
///   MoSL   routed experts sharing A, no dropout
///   MoSLD  routed experts sharing A, weight dropout on A
enum class Arm { FP, LoRA, MoLA, MoSL, MoSLD };

inline constexpr Arm kAllArms[] = {Arm::FP, Arm::LoRA, Arm::MoLA, Arm::MoSL, Arm::MoSLD};

[[nodiscard]] std::string to_string(Arm arm);
/// Case-insensitive. Throws ConfigError listing the valid names.
[[nodiscard]] Arm parse_arm(const std::string& name);

}  // namespace mosld
