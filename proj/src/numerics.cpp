#include "adavib/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "adavib/errors.hpp"

namespace adavib {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, Vector data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw DimensionError("matrix data length " + std::to_string(data_.size()) +
                         " does not match " + std::to_string(rows) + "x" +
                         std::to_string(cols));
  }
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  Vector data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) {
      throw DimensionError("ragged rows in Matrix::from_rows");
    }
    data.insert(data.end(), row.begin(), row.end());
  }
  return Matrix(r, c, std::move(data));
}

namespace {

std::string shape_str(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

}  // namespace

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: " + shape_str(a) + " * " + shape_str(b));
  }
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto dst = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      const auto brow = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) {
        dst[j] += aik * brow[j];
      }
    }
  }
  return out;
}

Matrix matmul_transposed(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_transposed: " + shape_str(a) + " * (" + shape_str(b) + ")^T");
  }
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.rows(); ++j) {
      out(i, j) = dot(a.row(i), b.row(j));
    }
  }
  return out;
}

Matrix transposed_matmul(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw DimensionError("transposed_matmul: (" + shape_str(a) + ")^T * " + shape_str(b));
  }
  Matrix out(a.cols(), b.cols());
  for (std::size_t n = 0; n < a.rows(); ++n) {
    const auto arow = a.row(n);
    const auto brow = b.row(n);
    for (std::size_t i = 0; i < a.cols(); ++i) {
      auto dst = out.row(i);
      for (std::size_t j = 0; j < b.cols(); ++j) {
        dst[j] += arow[i] * brow[j];
      }
    }
  }
  return out;
}

Matrix transpose(const Matrix& a) {
  Matrix out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) {
      out(j, i) = a(i, j);
    }
  }
  return out;
}

Vector matvec(const Matrix& m, std::span<const double> x) {
  if (m.cols() != x.size()) {
    throw DimensionError("matvec: " + shape_str(m) + " * " + std::to_string(x.size()));
  }
  Vector out(m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    out[i] = dot(m.row(i), x);
  }
  return out;
}

Vector transposed_matvec(const Matrix& m, std::span<const double> x) {
  if (m.rows() != x.size()) {
    throw DimensionError("transposed_matvec: (" + shape_str(m) + ")^T * " +
                         std::to_string(x.size()));
  }
  Vector out(m.cols(), 0.0);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const auto row = m.row(i);
    for (std::size_t j = 0; j < m.cols(); ++j) {
      out[j] += row[j] * x[i];
    }
  }
  return out;
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw DimensionError("dot: length " + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()));
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    acc += a[i] * b[i];
  }
  return acc;
}

void require_finite(std::span<const double> values, const char* what) {
  for (double x : values) {
    if (!std::isfinite(x)) {
      throw DomainError(std::string(what) + ": non-finite value");
    }
  }
}

Vector softmax(std::span<const double> logits) {
  if (logits.empty()) {
    throw InvalidArgument("softmax: empty input");
  }
  require_finite(logits, "softmax");
  const double mx = *std::max_element(logits.begin(), logits.end());
  Vector out(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - mx);
    sum += out[i];
  }
  for (double& p : out) {
    p /= sum;
  }
  return out;
}

Vector log_softmax(std::span<const double> logits) {
  if (logits.empty()) {
    throw InvalidArgument("log_softmax: empty input");
  }
  require_finite(logits, "log_softmax");
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double x : logits) {
    sum += std::exp(x - mx);
  }
  const double lse = mx + std::log(sum);
  Vector out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = logits[i] - lse;
  }
  return out;
}

double sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus(double x) {
  if (x > 30.0) {
    return x;
  }
  return std::log1p(std::exp(x));
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

double gelu(double x) {
  const double u = kGeluC * (x + kGeluA * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

double gelu_grad(double x) {
  const double u = kGeluC * (x + kGeluA * x * x * x);
  const double t = std::tanh(u);
  const double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

namespace {

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace

SeededRng::SeededRng(std::uint64_t seed) : seed_(seed), key_(mix64(seed + kGolden)) {}

SeededRng::SeededRng(std::uint64_t seed, std::uint64_t key) : seed_(seed), key_(key) {}

std::uint64_t SeededRng::next_u64() {
  ++counter_;
  return mix64(key_ + counter_ * kGolden);
}

double SeededRng::uniform() {
  return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
}

std::uint64_t SeededRng::uniform_index(std::uint64_t n) {
  if (n == 0) {
    throw InvalidArgument("uniform_index: n must be positive");
  }
  // Rejection sampling keeps the result unbiased.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t x = next_u64();
  while (x >= limit) {
    x = next_u64();
  }
  return x % n;
}

double SeededRng::normal() {
  // Box-Muller; the sine branch is discarded so every draw consumes exactly
  // two counter values.
  const double u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

SeededRng SeededRng::split(std::uint64_t stream) const {
  return SeededRng(seed_, mix64(key_ ^ mix64(stream + 0x632BE59BD9B4E019ULL)));
}

Vector sample_standard_normal(SeededRng& rng, std::size_t n) {
  if (n == 0) {
    throw InvalidArgument("sample_standard_normal: n must be at least 1");
  }
  Vector out(n);
  for (double& x : out) {
    x = rng.normal();
  }
  return out;
}

Matrix sample_standard_normal(SeededRng& rng, std::size_t rows, std::size_t cols) {
  return Matrix(rows, cols, sample_standard_normal(rng, rows * cols));
}

}  // namespace adavib
