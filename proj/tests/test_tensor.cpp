#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "stear/error.hpp"
#include "stear/random.hpp"
#include "stear/tensor.hpp"

using namespace stear;

namespace {

Mat random_mat(Rng& rng, std::size_t r, std::size_t c) {
  Mat m(r, c);
  for (auto& x : m.data) x = rng.normal();
  return m;
}

Mat naive_matmul(const Mat& a, const Mat& b) {
  Mat out(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < b.cols; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols; ++k) s += a.data[i * a.cols + k] * b.data[k * b.cols + j];
      out.data[i * out.cols + j] = s;
    }
  return out;
}

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return ErrorCode::kInvariant;
}

}  // namespace

TEST_SUITE("tensor") {

TEST_CASE("matmul identity and small product") {
  Rng rng(1);
  const Mat x = random_mat(rng, 3, 4);
  CHECK(matmul(Mat::identity(3), x) == x);

  const Mat a(2, 2, {1, 2, 3, 4});
  const Mat b(2, 1, {0, 1});
  const Mat c = matmul(a, b);
  CHECK(c.rows == 2);
  CHECK(c.cols == 1);
  CHECK(c(0, 0) == 2.0);
  CHECK(c(1, 0) == 4.0);
}

TEST_CASE("matmul matches triple loop on random shapes up to 16x16") {
  Rng rng(2);
  const Mat a = random_mat(rng, 5, 4);
  const Mat b = random_mat(rng, 4, 3);
  const Mat got = matmul(a, b);
  const Mat want = naive_matmul(a, b);
  for (std::size_t i = 0; i < got.data.size(); ++i) CHECK(std::abs(got.data[i] - want.data[i]) < 1e-12);

  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t r = 1 + rng.below(16), k = 1 + rng.below(16), c = 1 + rng.below(16);
    const Mat x = random_mat(rng, r, k);
    const Mat y = random_mat(rng, k, c);
    const Mat p = matmul(x, y);
    const Mat q = naive_matmul(x, y);
    double worst = 0.0;
    for (std::size_t i = 0; i < p.data.size(); ++i) worst = std::max(worst, std::abs(p.data[i] - q.data[i]));
    CHECK(worst < 1e-12);
  }
}

TEST_CASE("matmul shape mismatch names both shapes") {
  const Mat a(2, 3), b(2, 2);
  try {
    (void)matmul(a, b);
    FAIL("no error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kShape);
    const std::string msg = e.what();
    CHECK(msg.find("2x3") != std::string::npos);
    CHECK(msg.find("2x2") != std::string::npos);
  }
}

TEST_CASE("softmax examples") {
  const Vec u = softmax_row(Vec{0, 0, 0, 0});
  for (double p : u) CHECK(p == 0.25);

  const Vec big = softmax_row(Vec{1000, 0});
  CHECK(all_finite(big));
  CHECK(big[0] == doctest::Approx(1.0));
  CHECK(big[1] < 1e-300);

  const Vec s = softmax_row(Vec{1, 2, 3});
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  CHECK(std::abs(s[0] - std::exp(1.0) / z) < 1e-12);
  CHECK(std::abs(s[1] - std::exp(2.0) / z) < 1e-12);
  CHECK(std::abs(s[2] - std::exp(3.0) / z) < 1e-12);

  CHECK(code_of([] { (void)softmax_row(Vec{}); }) == ErrorCode::kShape);
}

TEST_CASE("softmax sums to one on random vectors") {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    Vec v(1 + rng.below(40));
    for (auto& x : v) x = 20.0 * rng.normal();
    const Vec p = softmax_row(v);
    CHECK(std::abs(std::accumulate(p.begin(), p.end(), 0.0) - 1.0) < 1e-12);
    for (double x : p) CHECK(x >= 0.0);
  }
}

TEST_CASE("layer_norm examples") {
  const Vec ones(5, 1.0), zeros(5, 0.0);
  for (double x : layer_norm(Vec(5, 3.0), ones, zeros)) CHECK(x == 0.0);

  // [1,-1]: mean 0, var 1, so out = v / sqrt(1 + eps).
  const Vec two = layer_norm(Vec{1, -1}, Vec{1, 1}, Vec{0, 0});
  CHECK(std::abs(two[0] - 1.0 / std::sqrt(1.0 + 1e-5)) < 1e-12);
  CHECK(std::abs(two[1] + 1.0 / std::sqrt(1.0 + 1e-5)) < 1e-12);

  const Vec shift{0.5, -2.0, 7.0};
  CHECK(layer_norm(Vec{4, 1, 9}, Vec(3, 0.0), shift) == shift);

  CHECK(code_of([] { (void)layer_norm(Vec{1, 2}, Vec{1}, Vec{0, 0}); }) == ErrorCode::kShape);
}

TEST_CASE("layer_norm output is standardized for non-constant input") {
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    Vec v(2 + rng.below(30));
    for (auto& x : v) x = 3.0 * rng.normal() + 1.0;
    const Vec y = layer_norm(v, Vec(v.size(), 1.0), Vec(v.size(), 0.0), 1e-12);
    double mean = 0.0, var = 0.0;
    for (double x : y) mean += x;
    mean /= static_cast<double>(y.size());
    for (double x : y) var += (x - mean) * (x - mean);
    var /= static_cast<double>(y.size());
    CHECK(std::abs(mean) < 1e-9);
    CHECK(std::abs(var - 1.0) < 1e-9);
  }
}

TEST_CASE("top_k_indices examples") {
  CHECK(top_k_indices(Vec{0.1, 0.9, 0.5}, 1) == std::vector<std::size_t>{1});
  CHECK(top_k_indices(Vec{0.5, 0.5, 0.1}, 1) == std::vector<std::size_t>{0});
  CHECK(top_k_indices(Vec{0.3, 0.2, 0.1}, 3) == std::vector<std::size_t>{0, 1, 2});
  CHECK(code_of([] { (void)top_k_indices(Vec{1, 2}, 0); }) == ErrorCode::kRange);
  CHECK(code_of([] { (void)top_k_indices(Vec{1, 2}, 3); }) == ErrorCode::kRange);
}

TEST_CASE("top_k_indices property: size, order, separation") {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    Vec s(1 + rng.below(30));
    // coarse values so ties are common
    for (auto& x : s) x = static_cast<double>(rng.below(5));
    const std::size_t k = 1 + rng.below(s.size());
    const auto idx = top_k_indices(s, k);
    REQUIRE(idx.size() == k);
    CHECK(std::is_sorted(idx.begin(), idx.end()));
    CHECK(idx == top_k_indices(s, k));
    double min_in = INFINITY;
    for (auto i : idx) min_in = std::min(min_in, s[i]);
    std::size_t last_tied_in = 0;
    for (auto i : idx)
      if (s[i] == min_in) last_tied_in = i;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (std::binary_search(idx.begin(), idx.end(), i)) continue;
      CHECK(s[i] <= min_in);
      if (s[i] == min_in) CHECK(i > last_tied_in);
    }
  }
}

TEST_CASE("argmax prefers the lowest index") {
  CHECK(argmax(Vec{1, 3, 3, 2}) == 1);
  CHECK(argmax(Vec{-1}) == 0);
}

TEST_CASE("stable_sum and cosine") {
  CHECK(stable_sum(Vec{1e16, 1.0, -1e16}) == doctest::Approx(1.0));
  CHECK(cosine(Vec{1, 0}, Vec{0, 1}) == 0.0);
  CHECK(cosine(Vec{2, 2}, Vec{1, 1}) == doctest::Approx(1.0));
}

}  // TEST_SUITE
