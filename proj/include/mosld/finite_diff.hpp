// Copyright (c) 2026, mosld contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <span>

#include "mosld/matrix.hpp"

namespace mosld {

/// Central-difference gradient of a scalar function of a matrix:
/// (f(x + eps e_ij) - f(x - eps e_ij)) / (2 eps) for every entry.
template <class F>
    requires std::invocable<F&, const Matrix&>
[[nodiscard]] Matrix finite_diff_grad(F&& f, const Matrix& x, double eps = 1e-6) {
    Matrix probe = x;
    Matrix grad(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = probe.data()[i];
        probe.data()[i] = orig + eps;
        const double up = f(static_cast<const Matrix&>(probe));
        probe.data()[i] = orig - eps;
        const double down = f(static_cast<const Matrix&>(probe));
        probe.data()[i] = orig;
        grad.data()[i] = (up - down) / (2.0 * eps);
    }
    return grad;
}

/// max |a-b| / max(max|a|, max|b|, floor). Used for gradient comparisons.
[[nodiscard]] inline double relative_error(const Matrix& a, const Matrix& b, double floor = 1e-8) {
    double diff = 0.0;
    double scale = floor;
    for (std::size_t i = 0; i < a.size(); ++i) {
        diff = std::max(diff, std::abs(a.data()[i] - b.data()[i]));
        scale = std::max({scale, std::abs(a.data()[i]), std::abs(b.data()[i])});
    }
    return diff / scale;
}

}  // namespace mosld
