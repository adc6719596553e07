#include "stear/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "stear/error.hpp"

namespace stear {

const char* error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kConfig: return "config";
    case ErrorCode::kIo: return "io";
    case ErrorCode::kShape: return "shape";
    case ErrorCode::kRange: return "range";
    case ErrorCode::kVersion: return "version";
    case ErrorCode::kTruncated: return "truncated";
    case ErrorCode::kInvariant: return "invariant";
  }
  return "unknown";
}

Mat::Mat(std::size_t r, std::size_t c, std::vector<double> values)
    : rows(r), cols(c), data(std::move(values)) {
  if (data.size() != r * c) {
    std::ostringstream os;
    os << "matrix " << r << "x" << c << " needs " << r * c << " values, got "
       << data.size();
    fail(ErrorCode::kShape, os.str());
  }
}

Mat Mat::identity(std::size_t n) {
  Mat m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

std::string Mat::shape_string() const {
  std::ostringstream os;
  os << "[" << rows << "x" << cols << "]";
  return os.str();
}

Mat matmul(const Mat& a, const Mat& b) {
  if (a.cols != b.rows) {
    fail(ErrorCode::kShape,
         "matmul: incompatible shapes " + a.shape_string() + " x " + b.shape_string());
  }
  Mat out(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    for (std::size_t j = 0; j < b.cols; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols; ++k) acc += a(i, k) * b(k, j);
      out(i, j) = acc;
    }
  }
  return out;
}

Vec vec_mat(std::span<const double> x, const Mat& w) {
  if (x.size() != w.rows) {
    std::ostringstream os;
    os << "vec_mat: vector of length " << x.size() << " against matrix "
       << w.shape_string();
    fail(ErrorCode::kShape, os.str());
  }
  Vec out(w.cols, 0.0);
  for (std::size_t j = 0; j < w.cols; ++j) {
    double acc = 0.0;
    for (std::size_t k = 0; k < w.rows; ++k) acc += x[k] * w(k, j);
    out[j] = acc;
  }
  return out;
}

Vec softmax_row(std::span<const double> v) {
  if (v.empty()) fail(ErrorCode::kShape, "softmax_row: empty vector");
  const double mx = *std::max_element(v.begin(), v.end());
  Vec out(v.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - mx);
    sum += out[i];
  }
  for (double& x : out) x /= sum;
  return out;
}

Vec layer_norm(std::span<const double> v, std::span<const double> scale,
               std::span<const double> shift, double eps) {
  if (v.size() != scale.size() || v.size() != shift.size()) {
    std::ostringstream os;
    os << "layer_norm: length mismatch (input " << v.size() << ", scale "
       << scale.size() << ", shift " << shift.size() << ")";
    fail(ErrorCode::kShape, os.str());
  }
  if (v.empty()) fail(ErrorCode::kShape, "layer_norm: empty vector");
  if (!(eps > 0.0)) fail(ErrorCode::kRange, "layer_norm: eps must be positive");
  const double n = static_cast<double>(v.size());
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= n;
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  var /= n;
  const double inv = 1.0 / std::sqrt(var + eps);
  Vec out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = (v[i] - mean) * inv * scale[i] + shift[i];
  }
  return out;
}

std::vector<std::size_t> top_k_indices(std::span<const double> scores, std::size_t k) {
  if (k < 1 || k > scores.size()) {
    std::ostringstream os;
    os << "top_k_indices: k=" << k << " outside [1, " << scores.size() << "]";
    fail(ErrorCode::kRange, os.str());
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k),
                    order.end(), [&](std::size_t a, std::size_t b) {
                      if (scores[a] != scores[b]) return scores[a] > scores[b];
                      return a < b;
                    });
  order.resize(k);
  std::sort(order.begin(), order.end());
  return order;
}

std::size_t argmax(std::span<const double> v) {
  if (v.empty()) fail(ErrorCode::kShape, "argmax: empty vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) fail(ErrorCode::kShape, "dot: length mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

double cosine(std::span<const double> a, std::span<const double> b) {
  const double na = std::sqrt(dot(a, a));
  const double nb = std::sqrt(dot(b, b));
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot(a, b) / (na * nb);
}

double stable_sum(std::span<const double> v) {
  double sum = 0.0;
  double comp = 0.0;
  for (double x : v) {
    const double t = sum + x;
    if (std::fabs(sum) >= std::fabs(x)) {
      comp += (sum - t) + x;
    } else {
      comp += (x - t) + sum;
    }
    sum = t;
  }
  return sum + comp;
}

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace stear
