// Copyright (c) 2026, mosld contributors
// SPDX-License-Identifier: Apache-2.0
//
// Differentiable operations recorded on a Tape, plus the plain (tape-free)
// helpers they share.

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "mosld/matrix.hpp"
#include "mosld/tape.hpp"

namespace mosld {

/// Numerically stable softmax (max-subtracted). Precondition: v nonempty and finite.
[[nodiscard]] Vector softmax(std::span<const double> v);
[[nodiscard]] double log_sum_exp(std::span<const double> v);
/// Mean of -log softmax(logits_i)[targets_i]. Throws DataError on out-of-range targets.
[[nodiscard]] double cross_entropy(const Matrix& logits, std::span<const std::size_t> targets);

namespace ops {

/// a * b; backward dA = dC B^T, dB = A^T dC.
Var matmul(Tape& t, Var a, Var b);
/// a * b^T (row-batched linear layer with weights stored out x in).
Var matmul_nt(Tape& t, Var a, Var b);
Var add(Tape& t, Var a, Var b);
Var scale(Tape& t, Var a, double s);
/// (mask ⊙ a) * s with a constant mask.
Var masked_scale(Tape& t, Var a, const Matrix& mask, double s);
/// Sum of all entries, 1x1.
Var sum(Tape& t, Var a);
/// Sum of squared entries, 1x1.
Var sum_squares(Tape& t, Var a);
Var softmax_rows(Tape& t, Var a);
/// tanh-approximated GELU.
Var gelu(Tape& t, Var a);
/// Row-wise RMS normalization with a 1 x d gain.
Var rmsnorm(Tape& t, Var x, Var gain, double eps = 1e-5);
/// Gathers rows of `table` (vocab x d) for each id.
Var embedding(Tape& t, Var table, std::span<const std::size_t> ids);
Var select_rows(Tape& t, Var x, std::span<const std::size_t> rows);
/// Mean cross-entropy over rows, 1x1.
Var cross_entropy(Tape& t, Var logits, std::span<const std::size_t> targets);

/// Multi-head causal self-attention over packed sequences. `lengths` splits
/// the rows of q/k/v into independent sequences; heads split the columns.
Var causal_attention(Tape& t, Var q, Var k, Var v, std::span<const std::size_t> lengths, std::size_t n_heads);

}  // namespace ops
}  // namespace mosld
