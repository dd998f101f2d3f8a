#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "fpgx/common.hpp"

namespace fpgx {

using Index = Eigen::Index;

/// Dense row-major matrix of real scalars.
template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

/// Matrix product with a pinned summation order: every output entry
/// accumulates a(i,k)*b(k,j) with k ascending, so results are bit-stable
/// across runs and independent of any row-level scheduling.
template <class S>
Mat<S> matmul(const Mat<S>& a, const Mat<S>& b) {
  if (a.cols() != b.rows())
    throw DimensionError("matmul: inner dimensions " + std::to_string(a.cols()) +
                         " vs " + std::to_string(b.rows()));
  Mat<S> c = Mat<S>::Zero(a.rows(), b.cols());
  for (Index i = 0; i < a.rows(); ++i)
    for (Index k = 0; k < a.cols(); ++k) c.row(i) += a(i, k) * b.row(k);
  return c;
}

template <class S>
Mat<S> hconcat(const std::vector<Mat<S>>& parts) {
  if (parts.empty()) throw DimensionError("hconcat: empty part list");
  const Index rows = parts.front().rows();
  Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw DimensionError("hconcat: row counts differ");
    cols += p.cols();
  }
  Mat<S> out(rows, cols);
  Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p;
    at += p.cols();
  }
  return out;
}

template <class S>
Mat<S> vstack(const std::vector<Mat<S>>& parts) {
  if (parts.empty()) throw DimensionError("vstack: empty part list");
  const Index cols = parts.front().cols();
  Index rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw DimensionError("vstack: column counts differ");
    rows += p.rows();
  }
  Mat<S> out(rows, cols);
  Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p;
    at += p.rows();
  }
  return out;
}

/// Singular values sorted descending; exactly min(rows, cols) of them.
template <class S>
std::vector<S> singular_values(const Mat<S>& m) {
  if (m.rows() == 0 || m.cols() == 0)
    throw DimensionError("singular_values: empty matrix");
  if (!m.allFinite()) throw NumericError("singular_values: non-finite entries");
  Eigen::JacobiSVD<Mat<S>> svd(m);
  const auto& sv = svd.singularValues();
  return std::vector<S>(sv.data(), sv.data() + sv.size());
}

/// Exponential of the spectral entropy of the singular-value distribution:
/// p_i = s_i / sum(s), erank = exp(-sum p_i ln p_i). Lies in
/// [1, min(rows, cols)] and is invariant to global rescaling.
template <class S>
double effective_rank(const Mat<S>& m) {
  const auto sv = singular_values(m);
  double total = 0.0;
  for (S s : sv) total += double(s);
  if (total == 0.0)
    throw ZeroMatrixError("effective_rank: all singular values are zero");
  double entropy = 0.0;
  for (S s : sv) {
    const double p = double(s) / total;
    if (p > 0.0) entropy -= p * std::log(p);
  }
  return std::exp(entropy);
}

/// Counter-based generator (splitmix64 finalizer over seed + i*gamma).
/// Draw i is a pure function of (seed, i): the u64 stream is identical on
/// every platform; real-valued draws add libm rounding on top.
class Rng {
 public:
  explicit Rng(uint64_t seed) : seed_(seed) {}

  uint64_t next_u64() { return mix(seed_ + kGamma * ++counter_); }

  /// Uniform in [0, 1).
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  /// Standard normal via Box-Muller, two fresh draws per sample.
  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(kTwoPi * u2);
  }

  /// Uniform in [0, n).
  int uniform_int(int n) {
    return int((static_cast<unsigned __int128>(next_u64()) * uint64_t(n)) >> 64);
  }

  /// Independent generator for a tagged substream.
  Rng split(uint64_t stream) const { return Rng(mix(seed_ ^ mix(stream + kGamma))); }

  template <class S>
  Mat<S> gaussian(Index rows, Index cols, double stddev) {
    Mat<S> m(rows, cols);
    for (Index i = 0; i < rows; ++i)
      for (Index j = 0; j < cols; ++j) m(i, j) = S(stddev * normal());
    return m;
  }

  template <class S>
  Vec<S> gaussian_vec(Index n, double stddev) {
    Vec<S> v(n);
    for (Index i = 0; i < n; ++i) v(i) = S(stddev * normal());
    return v;
  }

 private:
  static constexpr uint64_t kGamma = 0x9E3779B97F4A7C15ull;
  static constexpr double kTwoPi = 6.283185307179586476925286766559;

  static uint64_t mix(uint64_t z) {
    z ^= z >> 30;
    z *= 0xBF58476D1CE4E5B9ull;
    z ^= z >> 27;
    z *= 0x94D049BB133111EBull;
    z ^= z >> 31;
    return z;
  }

  uint64_t seed_;
  uint64_t counter_ = 0;
};

}  // namespace fpgx
