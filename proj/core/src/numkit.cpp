#include "modarb/numkit.hpp"

#include <cmath>
#include <string>

namespace modarb::numkit {

namespace {

std::string shape_str(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

}  // namespace

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix& Matrix::operator+=(const Matrix& o) {
  if (!same_shape(o))
    throw Error("matrix add: shape mismatch " + shape_str(*this) + " vs " + shape_str(o));
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
  return *this;
}

Matrix Matrix::operator+(const Matrix& o) const {
  Matrix r = *this;
  r += o;
  return r;
}

Matrix Matrix::operator-(const Matrix& o) const {
  if (!same_shape(o))
    throw Error("matrix sub: shape mismatch " + shape_str(*this) + " vs " + shape_str(o));
  Matrix r = *this;
  for (std::size_t i = 0; i < data_.size(); ++i) r.data_[i] -= o.data_[i];
  return r;
}

Matrix& Matrix::scale(double c) {
  for (double& x : data_) x *= c;
  return *this;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows())
    throw Error("matmul: inner dimension mismatch " + shape_str(a) + " x " + shape_str(b));
  Matrix r(a.rows(), b.cols());
  const std::size_t cols = b.cols();
  if (cols <= 16) {
    // narrow right-hand side (per-head projections): accumulate the whole
    // output row in registers instead of bouncing it through memory
    double acc[16];
    for (std::size_t i = 0; i < a.rows(); ++i) {
      for (std::size_t j = 0; j < cols; ++j) acc[j] = 0.0;
      const double* arow = a.row(i).data();
      for (std::size_t k = 0; k < a.cols(); ++k) {
        const double aik = arow[k];
        const double* brow = b.row(k).data();
        for (std::size_t j = 0; j < cols; ++j) acc[j] += aik * brow[j];
      }
      double* rrow = r.row(i).data();
      for (std::size_t j = 0; j < cols; ++j) rrow[j] = acc[j];
    }
    return r;
  }
  // four output rows per pass so each row of b is streamed through the cache
  // a quarter as often; the all-zero test keeps sparse planted weights cheap
  std::size_t i = 0;
  for (; i + 4 <= a.rows(); i += 4) {
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double a0 = a(i, k), a1 = a(i + 1, k), a2 = a(i + 2, k), a3 = a(i + 3, k);
      if (a0 == 0.0 && a1 == 0.0 && a2 == 0.0 && a3 == 0.0) continue;
      const double* brow = b.row(k).data();
      double* r0 = r.row(i).data();
      double* r1 = r.row(i + 1).data();
      double* r2 = r.row(i + 2).data();
      double* r3 = r.row(i + 3).data();
      for (std::size_t j = 0; j < cols; ++j) {
        const double bv = brow[j];
        r0[j] += a0 * bv;
        r1[j] += a1 * bv;
        r2[j] += a2 * bv;
        r3[j] += a3 * bv;
      }
    }
  }
  for (; i < a.rows(); ++i) {
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      const double* brow = b.row(k).data();
      double* rrow = r.row(i).data();
      for (std::size_t j = 0; j < cols; ++j) rrow[j] += aik * brow[j];
    }
  }
  return r;
}

Matrix masked_softmax(const Matrix& scores, const MaskMatrix& mask) {
  if (scores.rows() != mask.size() || scores.cols() != mask.size())
    throw Error("masked_softmax: scores " + shape_str(scores) + " vs mask " +
                std::to_string(mask.size()) + "x" + std::to_string(mask.size()));
  Matrix out(scores.rows(), scores.cols());
  for (std::size_t i = 0; i < scores.rows(); ++i) {
    double mx = kNegInf;
    for (std::size_t j = 0; j < scores.cols(); ++j)
      if (mask(i, j) != kNegInf && scores(i, j) > mx) mx = scores(i, j);
    if (mx == kNegInf)
      throw Error("masked_softmax: fully masked attention row " + std::to_string(i));
    double sum = 0.0;
    for (std::size_t j = 0; j < scores.cols(); ++j) {
      if (mask(i, j) == kNegInf) continue;
      const double e = std::exp(scores(i, j) - mx);
      out(i, j) = e;
      sum += e;
    }
    for (std::size_t j = 0; j < scores.cols(); ++j)
      if (mask(i, j) != kNegInf) out(i, j) /= sum;
  }
  return out;
}

std::vector<double> layer_norm(std::span<const double> v, std::span<const double> gain,
                               std::span<const double> bias, double eps) {
  if (v.size() != gain.size() || v.size() != bias.size())
    throw Error("layer_norm: length mismatch v=" + std::to_string(v.size()) +
                " gain=" + std::to_string(gain.size()) +
                " bias=" + std::to_string(bias.size()));
  if (!(eps > 0.0)) throw Error("layer_norm: eps must be > 0");
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  var /= static_cast<double>(v.size());
  const double inv = 1.0 / std::sqrt(var + eps);
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i)
    out[i] = (v[i] - mean) * inv * gain[i] + bias[i];
  return out;
}

double kl_divergence(const TwoPoint& p, const TwoPoint& q) {
  if (std::abs(p.p + p.c - 1.0) > 1e-9 || std::abs(q.p + q.c - 1.0) > 1e-9)
    throw Error("kl_divergence: inputs must sum to 1");
  auto term = [](double pi, double qi) {
    if (pi == 0.0) return 0.0;
    if (qi <= 0.0) throw Error("kl_divergence: infinite divergence (q entry is 0)");
    return pi * std::log(pi / qi);
  };
  return term(p.p, q.p) + term(p.c, q.c);
}

Rng::Rng(std::uint64_t seed, std::uint64_t stream) : seed_(seed), stream_(stream) {
  key_ = splitmix64(splitmix64(seed) ^ splitmix64(~stream * 0xD1342543DE82EF95ULL));
}

Rng Rng::derive(std::uint64_t index) const {
  return Rng(seed_, splitmix64(stream_ * 0x9E3779B97F4A7C15ULL + index + 1));
}

std::uint64_t Rng::next_u64() { return splitmix64(key_ + ++counter_ * 0xA0761D6478BD642FULL); }

double Rng::next_double() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::gaussian() {
  if (have_spare_) {
    have_spare_ = false;
    return spare_;
  }
  double u, v, s;
  do {
    u = 2.0 * next_double() - 1.0;
    v = 2.0 * next_double() - 1.0;
    s = u * u + v * v;
  } while (s >= 1.0 || s == 0.0);
  const double f = std::sqrt(-2.0 * std::log(s) / s);
  spare_ = v * f;
  have_spare_ = true;
  return u * f;
}

std::size_t Rng::next_index(std::size_t bound) {
  if (bound == 0) throw Error("Rng::next_index: bound must be > 0");
  return static_cast<std::size_t>(next_u64() % bound);
}

}  // namespace modarb::numkit
