// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major storage for activations and expert weights.

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace scattermoe {

/// Raised when operand shapes are incompatible. The message names both shapes.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when an object is used outside its lifecycle contract.
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

std::string shape_string(std::size_t rows, std::size_t cols);

/// Row-major 2-D float matrix. Batch and time are flattened into rows.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols, 0.0f) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<float> data);

  static Matrix identity(std::size_t n);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  float& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  float operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<float> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const float> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }

  bool same_shape(const Matrix& other) const noexcept {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }
  std::string shape() const { return shape_string(rows_, cols_); }

  void fill(float value);

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<float> data_;
};

/// Dense d_in x d_out transform shared by every token (key/value projections,
/// dense reference layers).
class WeightMatrix {
 public:
  WeightMatrix() = default;
  WeightMatrix(std::size_t d_in, std::size_t d_out) : d_in_(d_in), d_out_(d_out), data_(d_in * d_out, 0.0f) {}
  WeightMatrix(std::size_t d_in, std::size_t d_out, std::vector<float> data);
  explicit WeightMatrix(const Matrix& m);

  std::size_t d_in() const noexcept { return d_in_; }
  std::size_t d_out() const noexcept { return d_out_; }

  float& operator()(std::size_t i, std::size_t o) { return data_[i * d_out_ + o]; }
  float operator()(std::size_t i, std::size_t o) const { return data_[i * d_out_ + o]; }

  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }
  std::string shape() const { return shape_string(d_in_, d_out_); }

  friend bool operator==(const WeightMatrix&, const WeightMatrix&) = default;

 private:
  std::size_t d_in_ = 0;
  std::size_t d_out_ = 0;
  std::vector<float> data_;
};

/// E stacked d_in x d_out transforms, expert-major then row-major.
class ExpertTensor {
 public:
  ExpertTensor() = default;
  ExpertTensor(std::size_t experts, std::size_t d_in, std::size_t d_out);
  ExpertTensor(std::size_t experts, std::size_t d_in, std::size_t d_out, std::vector<float> data);

  std::size_t experts() const noexcept { return experts_; }
  std::size_t d_in() const noexcept { return d_in_; }
  std::size_t d_out() const noexcept { return d_out_; }
  std::size_t expert_stride() const noexcept { return d_in_ * d_out_; }

  float& operator()(std::size_t e, std::size_t i, std::size_t o) {
    return data_[e * expert_stride() + i * d_out_ + o];
  }
  float operator()(std::size_t e, std::size_t i, std::size_t o) const {
    return data_[e * expert_stride() + i * d_out_ + o];
  }

  std::span<float> expert(std::size_t e) { return {data_.data() + e * expert_stride(), expert_stride()}; }
  std::span<const float> expert(std::size_t e) const {
    return {data_.data() + e * expert_stride(), expert_stride()};
  }

  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }
  std::string shape() const;

  friend bool operator==(const ExpertTensor&, const ExpertTensor&) = default;

 private:
  std::size_t experts_ = 0;
  std::size_t d_in_ = 0;
  std::size_t d_out_ = 0;
  std::vector<float> data_;
};

// All products accumulate in double and round once to float.

/// a (n x d_in) * b (d_in x d_out).
Matrix matmul(const Matrix& a, const WeightMatrix& b);
/// a (n x d_out) * b^T, giving n x d_in. Reads b with swapped index roles.
Matrix matmul_transposed(const Matrix& a, const WeightMatrix& b);
/// a^T (d_in x n) * b (n x d_out), the dense weight gradient.
WeightMatrix matmul_at_b(const Matrix& a, const Matrix& b);

/// Elementwise a += b.
void add_inplace(Matrix& a, const Matrix& b);
void scale_inplace(std::span<float> values, float alpha);

/// Uniform in [-scale, scale], deterministic for a fixed (rows, cols, seed, scale).
Matrix seeded_random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed, float scale = 1.0f);
WeightMatrix seeded_random_weights(std::size_t d_in, std::size_t d_out, std::uint64_t seed, float scale = 1.0f);
ExpertTensor seeded_random_experts(std::size_t experts, std::size_t d_in, std::size_t d_out, std::uint64_t seed,
                                   float scale = 1.0f);

bool all_finite(std::span<const float> values);

/// Largest |a - b| over corresponding elements; the spans must be equal length.
double max_abs_diff(std::span<const float> a, std::span<const float> b);

}  // namespace scattermoe
