// Copyright (c) 2026, mosld contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

namespace mosld {

/// Tool version string embedded in every output.
[[nodiscard]] std::string tool_version();

/// SHA-1 over "blob <len>\0" + content, as `git hash-object` computes it.
[[nodiscard]] std::string git_blob_hash(std::string_view content);

/// Provenance written into every emitted artifact.
struct Stamp {
    std::string manifest_hash;
    std::string version = tool_version();
};

/// Record of one CLI invocation.
struct RunManifest {
    std::filesystem::path config_path;
    std::string canonical_config;  ///< effective config after flag overrides
    std::string config_hash;       ///< git_blob_hash(canonical_config)
    std::string command;
    std::uint64_t seed = 0;
    std::filesystem::path output_dir;
    std::string started_at;
    std::string finished_at;

    [[nodiscard]] Stamp stamp() const { return Stamp{config_hash}; }
    /// JSON document describing the run.
    [[nodiscard]] std::string to_json() const;
};

/// Current UTC time, ISO-8601.
[[nodiscard]] std::string utc_timestamp();

}  // namespace mosld
