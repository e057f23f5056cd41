// Copyright (c) 2026, mosld contributors
// SPDX-License-Identifier: Apache-2.0
//
// Experiment config files: a TOML subset (sections, scalars, flat arrays).

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "mosld/trainer.hpp"

namespace mosld {

struct ConfigValue;
using ConfigArray = std::vector<ConfigValue>;

struct ConfigValue {
    std::variant<bool, std::int64_t, double, std::string, ConfigArray> v;
};

/// Parsed file: section -> key -> value. Top-level keys live in section "".
struct ConfigDoc {
    std::map<std::string, std::map<std::string, ConfigValue>> sections;

    [[nodiscard]] bool has(const std::string& section, const std::string& key) const;
};

/// Throws ConfigError with `source:line` on syntax errors or duplicate keys.
[[nodiscard]] ConfigDoc parse_config(const std::string& text, const std::string& source = "<config>");
[[nodiscard]] ConfigDoc load_config_file(const std::string& path);

/// Applies "section.key=value" (value in config syntax; bare words are strings).
void apply_override(ConfigDoc& doc, const std::string& assignment);

/// Maps a document onto the experiment schema. Missing required fields,
/// unknown keys and wrong types raise ConfigError naming the field.
[[nodiscard]] ExperimentConfig experiment_from(const ConfigDoc& doc);

/// Every effective value in fixed order; the manifest hash is taken over this.
[[nodiscard]] std::string canonical_config(const ExperimentConfig& cfg);

}  // namespace mosld
