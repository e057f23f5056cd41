// Copyright (c) 2026, mosld contributors
// SPDX-License-Identifier: Apache-2.0
//
// Binary tensor container.
//
//   "MOSLD1"                       6 magic bytes
//   u64 meta_count, then per entry: u64 key_length, key, u64 value_length, value
//   repeated until end of file:
//     u64 name_length, name bytes (UTF-8)
//     u64 rank, rank x u64 dims
//     prod(dims) x f64 payload
//
// All integers and floats are little-endian. Reading back a written file
// reproduces every record bit-exactly.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mosld/matrix.hpp"

namespace mosld {

struct TensorRecord {
    std::string name;
    std::vector<std::uint64_t> dims;
    std::vector<double> data;

    [[nodiscard]] static TensorRecord from_matrix(std::string name, const Matrix& m);
    /// Rank-2 records only; throws DataError otherwise.
    [[nodiscard]] Matrix to_matrix() const;
    friend bool operator==(const TensorRecord&, const TensorRecord&) = default;
};

/// String metadata such as the manifest hash and tool version.
using CheckpointMeta = std::map<std::string, std::string>;

struct Checkpoint {
    CheckpointMeta meta;
    std::vector<TensorRecord> tensors;
};

inline constexpr char kCheckpointMagic[] = "MOSLD1";

[[nodiscard]] std::string encode_checkpoint(std::span<const TensorRecord> records, const CheckpointMeta& meta = {});
/// Throws DataError on bad magic or truncation.
[[nodiscard]] Checkpoint decode_checkpoint(const std::string& bytes);

void write_checkpoint(const std::filesystem::path& path, std::span<const TensorRecord> records,
                      const CheckpointMeta& meta = {});
/// Throws MissingArtifactError if the file does not exist.
[[nodiscard]] Checkpoint read_checkpoint(const std::filesystem::path& path);

}  // namespace mosld
