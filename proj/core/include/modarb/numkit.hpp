#pragma once

#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "modarb/error.hpp"

namespace modarb::numkit {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// Dense row-major matrix of 64-bit floats. All analysis arithmetic runs in
// doubles so attribution telescoping checks are not confounded by precision.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  static Matrix identity(std::size_t n);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

  std::span<double> row(std::size_t i) { return {data_.data() + i * cols_, cols_}; }
  std::span<const double> row(std::size_t i) const {
    return {data_.data() + i * cols_, cols_};
  }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  Matrix& operator+=(const Matrix& o);
  Matrix operator+(const Matrix& o) const;
  Matrix operator-(const Matrix& o) const;
  Matrix& scale(double c);

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Additive attention mask: entries are 0 or -inf. Rows attend, columns are
// attended. The causal constraint (j > i masked) is established at build time;
// interventions may only add further -inf entries.
class MaskMatrix {
 public:
  MaskMatrix() = default;
  explicit MaskMatrix(std::size_t n) : m_(n, n, 0.0) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) m_(i, j) = kNegInf;
  }

  std::size_t size() const { return m_.rows(); }
  double operator()(std::size_t i, std::size_t j) const { return m_(i, j); }
  void block(std::size_t i, std::size_t j) { m_(i, j) = kNegInf; }
  const Matrix& as_matrix() const { return m_; }

 private:
  Matrix m_;
};

// Two-point probability distribution over the decision subspace {y_p, y_c}.
struct TwoPoint {
  double p = 0.0;  // mass on the compliant token
  double c = 0.0;  // mass on the competitor
};

Matrix matmul(const Matrix& a, const Matrix& b);

// Row-wise softmax under an additive mask. Each row is shifted by its
// unmasked maximum; -inf positions come out as exact 0. A fully masked row is
// a degenerate attention row and raises Error.
Matrix masked_softmax(const Matrix& scores, const MaskMatrix& mask);

std::vector<double> layer_norm(std::span<const double> v, std::span<const double> gain,
                               std::span<const double> bias, double eps = 1e-8);

// D(p || q) over two-point distributions, with 0*ln(0/q) := 0. q entries
// facing positive p mass must be > 0.
double kl_divergence(const TwoPoint& p, const TwoPoint& q);

// Counter-based generator: the i-th draw is a pure function of
// (seed, stream, i), so parallel per-sample streams replay independently of
// scheduling. Identical seeds give identical sequences.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0);

  // Child generator for worker / sample `index`.
  Rng derive(std::uint64_t index) const;

  std::uint64_t next_u64();
  double next_double();                       // [0, 1)
  double gaussian();                          // standard normal, Box-Muller
  std::size_t next_index(std::size_t bound);  // [0, bound)

  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace modarb::numkit
