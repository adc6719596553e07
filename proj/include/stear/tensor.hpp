#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace stear {

using Vec = std::vector<double>;

// Dense row-major matrix of doubles.
struct Mat {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Mat() = default;
  Mat(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}
  Mat(std::size_t r, std::size_t c, std::vector<double> values);

  static Mat identity(std::size_t n);

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const {
    return {data.data() + r * cols, cols};
  }

  std::string shape_string() const;
  bool operator==(const Mat&) const = default;
};

// Standard product. Each output entry accumulates k = 0..K-1 left to right.
Mat matmul(const Mat& a, const Mat& b);

// Row vector times matrix: out[j] = sum_k x[k] * w(k, j), k ascending.
Vec vec_mat(std::span<const double> x, const Mat& w);

// Numerically stable softmax (max subtraction).
Vec softmax_row(std::span<const double> v);

// Normalizes v to zero mean / unit variance, then applies scale and shift.
Vec layer_norm(std::span<const double> v, std::span<const double> scale,
               std::span<const double> shift, double eps = 1e-5);

// Indices of the k largest scores, ties to the lowest index, sorted ascending.
std::vector<std::size_t> top_k_indices(std::span<const double> scores, std::size_t k);

// Lowest index of the maximum entry.
std::size_t argmax(std::span<const double> v);

double dot(std::span<const double> a, std::span<const double> b);
double cosine(std::span<const double> a, std::span<const double> b);

// Compensated (Neumaier) summation.
double stable_sum(std::span<const double> v);

bool all_finite(std::span<const double> v);

}  // namespace stear
