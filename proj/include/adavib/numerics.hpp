#pragma once

// Dense row-major f64 matrices, the elementwise nonlinearities used by the
// projector, and a counter-based seeded RNG.

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <vector>

namespace adavib {

using Vector = std::vector<double>;

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, Vector data);
  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  bool same_shape(const Matrix& other) const {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

  bool operator==(const Matrix& other) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  Vector data_;
};

// a (n×k) · b (k×m)
Matrix matmul(const Matrix& a, const Matrix& b);
// a (n×k) · bᵀ where b is (m×k)
Matrix matmul_transposed(const Matrix& a, const Matrix& b);
// aᵀ (k×n) · b (n×m) where a is (n×k)
Matrix transposed_matmul(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);
// Single row of a matrix times a vector: m (r×c) · x (c) -> r
Vector matvec(const Matrix& m, std::span<const double> x);
// mᵀ · x for m (r×c), x (r) -> c
Vector transposed_matvec(const Matrix& m, std::span<const double> x);

double dot(std::span<const double> a, std::span<const double> b);
// Throws DomainError naming `what` if any entry is NaN or infinite.
void require_finite(std::span<const double> values, const char* what);

Vector softmax(std::span<const double> logits);
// log(softmax(logits)) computed without forming the probabilities.
Vector log_softmax(std::span<const double> logits);

double sigmoid(double x);
// log(1 + e^x); identity above x = 30.
double softplus(double x);
// tanh-approximated GeLU: 0.5·x·(1 + tanh(√(2/π)(x + 0.044715x³))).
double gelu(double x);
double gelu_grad(double x);

// Counter-based generator: the i-th draw is a SplitMix64 hash of (key, i),
// so any stream can be replayed or split into independent child streams
// without sharing state.
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

  std::uint64_t next_u64();
  // Uniform on the open interval (0, 1).
  double uniform();
  // Uniform integer in [0, n).
  std::uint64_t uniform_index(std::uint64_t n);
  double normal();

  // Independent child stream keyed by (this key, stream id). Does not
  // advance this generator.
  SeededRng split(std::uint64_t stream) const;

 private:
  SeededRng(std::uint64_t seed, std::uint64_t key);

  std::uint64_t seed_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

Vector sample_standard_normal(SeededRng& rng, std::size_t n);
Matrix sample_standard_normal(SeededRng& rng, std::size_t rows, std::size_t cols);

}  // namespace adavib
