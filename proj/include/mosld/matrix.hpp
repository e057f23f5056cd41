// Copyright (c) 2026, mosld contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace mosld {

class Rng;

using Vector = std::vector<double>;

/// Dense row-major matrix of doubles with value semantics.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
    Matrix(std::initializer_list<std::initializer_list<double>> rows);

    static Matrix identity(std::size_t n);
    /// n x 1 column from a vector.
    static Matrix column(std::span<const double> v);
    /// 1 x n row from a vector.
    static Matrix row_vector(std::span<const double> v);

    [[nodiscard]] std::size_t rows() const noexcept { return rows_; }
    [[nodiscard]] std::size_t cols() const noexcept { return cols_; }
    [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }
    [[nodiscard]] bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    [[nodiscard]] std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    [[nodiscard]] std::span<const double> row(std::size_t r) const noexcept {
        return {data_.data() + r * cols_, cols_};
    }
    [[nodiscard]] std::span<double> data() noexcept { return data_; }
    [[nodiscard]] std::span<const double> data() const noexcept { return data_; }

    [[nodiscard]] Matrix transposed() const;
    [[nodiscard]] bool all_finite() const noexcept;
    [[nodiscard]] bool same_shape(const Matrix& other) const noexcept {
        return rows_ == other.rows_ && cols_ == other.cols_;
    }
    [[nodiscard]] std::string shape_str() const;

    void fill(double v) noexcept;
    Matrix& operator+=(const Matrix& other);
    Matrix& operator*=(double s) noexcept;

    /// Exact element-wise equality (bit-level for non-NaN values).
    friend bool operator==(const Matrix& a, const Matrix& b) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

Matrix operator+(Matrix a, const Matrix& b);
Matrix operator-(Matrix a, const Matrix& b);
Matrix operator*(double s, Matrix a);

/// a * b. Throws ConfigError naming both shapes on mismatch.
[[nodiscard]] Matrix matmul(const Matrix& a, const Matrix& b);
/// a * b^T.
[[nodiscard]] Matrix matmul_nt(const Matrix& a, const Matrix& b);
/// a^T * b.
[[nodiscard]] Matrix matmul_tn(const Matrix& a, const Matrix& b);
/// m * x for a column vector x.
[[nodiscard]] Vector matvec(const Matrix& m, std::span<const double> x);

[[nodiscard]] double max_abs_diff(const Matrix& a, const Matrix& b);
[[nodiscard]] double max_abs_diff(std::span<const double> a, std::span<const double> b);
[[nodiscard]] double frobenius_norm(const Matrix& m);
/// Numerical rank via Gaussian elimination with partial pivoting.
[[nodiscard]] std::size_t numerical_rank(const Matrix& m, double tol = 1e-9);
/// Entries drawn i.i.d. from N(0, sigma^2) in row-major order. Throws ConfigError unless sigma > 0.
[[nodiscard]] Matrix gaussian_matrix(std::size_t rows, std::size_t cols, double sigma, Rng& rng);

}  // namespace mosld
