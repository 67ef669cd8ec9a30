// SPDX-License-Identifier: Apache-2.0

#include "scattermoe/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "scattermoe/mac_counter.hpp"

namespace scattermoe {

std::string shape_string(std::size_t rows, std::size_t cols) {
  return "[" + std::to_string(rows) + " x " + std::to_string(cols) + "]";
}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<float> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw DimensionError("Matrix " + shape_string(rows, cols) + " given " + std::to_string(data_.size()) +
                         " elements");
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0f;
  return m;
}

void Matrix::fill(float value) { std::fill(data_.begin(), data_.end(), value); }

WeightMatrix::WeightMatrix(std::size_t d_in, std::size_t d_out, std::vector<float> data)
    : d_in_(d_in), d_out_(d_out), data_(std::move(data)) {
  if (data_.size() != d_in * d_out) {
    throw DimensionError("WeightMatrix " + shape_string(d_in, d_out) + " given " +
                         std::to_string(data_.size()) + " elements");
  }
}

WeightMatrix::WeightMatrix(const Matrix& m)
    : d_in_(m.rows()), d_out_(m.cols()), data_(m.data().begin(), m.data().end()) {}

ExpertTensor::ExpertTensor(std::size_t experts, std::size_t d_in, std::size_t d_out)
    : experts_(experts), d_in_(d_in), d_out_(d_out), data_(experts * d_in * d_out, 0.0f) {
  if (experts == 0) throw std::invalid_argument("ExpertTensor needs at least one expert");
}

ExpertTensor::ExpertTensor(std::size_t experts, std::size_t d_in, std::size_t d_out, std::vector<float> data)
    : experts_(experts), d_in_(d_in), d_out_(d_out), data_(std::move(data)) {
  if (experts == 0) throw std::invalid_argument("ExpertTensor needs at least one expert");
  if (data_.size() != experts * d_in * d_out) {
    throw DimensionError("ExpertTensor " + shape() + " given " + std::to_string(data_.size()) + " elements");
  }
}

std::string ExpertTensor::shape() const {
  return "[" + std::to_string(experts_) + " x " + std::to_string(d_in_) + " x " + std::to_string(d_out_) + "]";
}

Matrix matmul(const Matrix& a, const WeightMatrix& b) {
  if (a.cols() != b.d_in()) {
    throw DimensionError("matmul: lhs " + a.shape() + " incompatible with rhs " + b.shape());
  }
  Matrix out(a.rows(), b.d_out());
  std::vector<double> acc(b.d_out());
  const auto w = b.data();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    const auto x = a.row(i);
    for (std::size_t m = 0; m < a.cols(); ++m) {
      const double xm = x[m];
      const float* wrow = w.data() + m * b.d_out();
      for (std::size_t j = 0; j < b.d_out(); ++j) acc[j] += xm * wrow[j];
    }
    auto y = out.row(i);
    for (std::size_t j = 0; j < b.d_out(); ++j) y[j] = static_cast<float>(acc[j]);
  }
  mac_counter::add(static_cast<std::uint64_t>(a.rows()) * a.cols() * b.d_out());
  return out;
}

Matrix matmul_transposed(const Matrix& a, const WeightMatrix& b) {
  if (a.cols() != b.d_out()) {
    throw DimensionError("matmul_transposed: lhs " + a.shape() + " incompatible with transposed rhs " +
                         b.shape());
  }
  Matrix out(a.rows(), b.d_in());
  const auto w = b.data();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto g = a.row(i);
    auto y = out.row(i);
    for (std::size_t m = 0; m < b.d_in(); ++m) {
      const float* wrow = w.data() + m * b.d_out();
      double acc = 0.0;
      for (std::size_t j = 0; j < b.d_out(); ++j) acc += static_cast<double>(g[j]) * wrow[j];
      y[m] = static_cast<float>(acc);
    }
  }
  mac_counter::add(static_cast<std::uint64_t>(a.rows()) * a.cols() * b.d_in());
  return out;
}

WeightMatrix matmul_at_b(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw DimensionError("matmul_at_b: " + a.shape() + " and " + b.shape() + " differ in row count");
  }
  std::vector<double> acc(a.cols() * b.cols(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto x = a.row(i);
    const auto y = b.row(i);
    for (std::size_t m = 0; m < a.cols(); ++m) {
      const double xm = x[m];
      double* arow = acc.data() + m * b.cols();
      for (std::size_t j = 0; j < b.cols(); ++j) arow[j] += xm * y[j];
    }
  }
  mac_counter::add(static_cast<std::uint64_t>(a.rows()) * a.cols() * b.cols());
  std::vector<float> out(acc.begin(), acc.end());
  return WeightMatrix(a.cols(), b.cols(), std::move(out));
}

void add_inplace(Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) throw DimensionError("add_inplace: " + a.shape() + " vs " + b.shape());
  auto dst = a.data();
  const auto src = b.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void scale_inplace(std::span<float> values, float alpha) {
  for (auto& v : values) v *= alpha;
}

namespace {

std::vector<float> uniform_values(std::size_t n, std::uint64_t seed, float scale) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> dist(-scale, scale);
  std::vector<float> out(n);
  for (auto& v : out) v = dist(rng);
  return out;
}

}  // namespace

Matrix seeded_random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed, float scale) {
  return Matrix(rows, cols, uniform_values(rows * cols, seed, scale));
}

WeightMatrix seeded_random_weights(std::size_t d_in, std::size_t d_out, std::uint64_t seed, float scale) {
  return WeightMatrix(d_in, d_out, uniform_values(d_in * d_out, seed, scale));
}

ExpertTensor seeded_random_experts(std::size_t experts, std::size_t d_in, std::size_t d_out, std::uint64_t seed,
                                   float scale) {
  return ExpertTensor(experts, d_in, d_out, uniform_values(experts * d_in * d_out, seed, scale));
}

bool all_finite(std::span<const float> values) {
  return std::all_of(values.begin(), values.end(), [](float v) { return std::isfinite(v); });
}

double max_abs_diff(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) {
    throw DimensionError("max_abs_diff: lengths " + std::to_string(a.size()) + " and " + std::to_string(b.size()));
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    worst = std::max(worst, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  }
  return worst;
}

}  // namespace scattermoe
