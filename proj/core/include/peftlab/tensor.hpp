// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "peftlab/errors.hpp"

namespace peftlab {

// ---------------------------------------------------------------------------
// Allocation tracking
// ---------------------------------------------------------------------------

/// Process-wide tally of live tensor bytes. peak_bytes() is the high-water
/// mark since the last reset_peak(); it never drops below current_bytes().
class AllocCounter {
 public:
  static std::size_t current_bytes() { return current().load(std::memory_order_relaxed); }
  static std::size_t peak_bytes() { return peak().load(std::memory_order_relaxed); }

  /// Starts a new measurement window: peak := current.
  static void reset_peak() {
    peak().store(current().load(std::memory_order_relaxed), std::memory_order_relaxed);
  }

  static void add(std::size_t n) {
    std::size_t cur = current().fetch_add(n, std::memory_order_relaxed) + n;
    std::size_t prev = peak().load(std::memory_order_relaxed);
    while (prev < cur && !peak().compare_exchange_weak(prev, cur, std::memory_order_relaxed)) {
    }
  }

  static void sub(std::size_t n) { current().fetch_sub(n, std::memory_order_relaxed); }

 private:
  static std::atomic<std::size_t>& current() {
    static std::atomic<std::size_t> v{0};
    return v;
  }
  static std::atomic<std::size_t>& peak() {
    static std::atomic<std::size_t> v{0};
    return v;
  }
};

/// std::vector allocator that reports to AllocCounter.
template <typename T>
struct TrackingAllocator {
  using value_type = T;

  TrackingAllocator() = default;
  template <typename U>
  TrackingAllocator(const TrackingAllocator<U>&) {}

  T* allocate(std::size_t n) {
    AllocCounter::add(n * sizeof(T));
    return static_cast<T*>(::operator new(n * sizeof(T)));
  }
  void deallocate(T* p, std::size_t n) {
    AllocCounter::sub(n * sizeof(T));
    ::operator delete(p);
  }

  bool operator==(const TrackingAllocator&) const { return true; }
};

// ---------------------------------------------------------------------------
// Matrix
// ---------------------------------------------------------------------------

/// Row-major dense matrix. Scalar type is float or double, fixed per engine
/// instantiation. A 1xN matrix doubles as a row vector throughout the engine.
template <typename T>
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols) {}
  Matrix(std::size_t rows, std::size_t cols, T fill)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  static Matrix zeros(std::size_t rows, std::size_t cols) { return Matrix(rows, cols); }
  static Matrix ones(std::size_t rows, std::size_t cols) { return Matrix(rows, cols, T(1)); }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  T& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  T operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

  std::span<T> row(std::size_t i) { return {data_.data() + i * cols_, cols_}; }
  std::span<const T> row(std::size_t i) const { return {data_.data() + i * cols_, cols_}; }

  bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  bool operator==(const Matrix& o) const {
    return rows_ == o.rows_ && cols_ == o.cols_ && data_ == o.data_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T, TrackingAllocator<T>> data_;
};

// ---------------------------------------------------------------------------
// Deterministic RNG
// ---------------------------------------------------------------------------

/// splitmix64-seeded xoshiro256** stream with hand-rolled uniform and
/// Box-Muller normal transforms, so the same seed yields the same scalars on
/// every platform regardless of the standard library's distributions.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) {
    // splitmix64 expansion of the seed into the xoshiro state
    std::uint64_t x = seed;
    for (auto& s : state_) {
      x += 0x9e3779b97f4a7c15ULL;
      std::uint64_t z = x;
      z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
      z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
      s = z ^ (z >> 31);
    }
  }

  std::uint64_t next_u64() {
    auto rotl = [](std::uint64_t v, int k) { return (v << k) | (v >> (64 - k)); };
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  /// Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform in (0, 1]; safe as a log() argument.
  double uniform_open() { return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53; }

  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t uniform_int(std::uint64_t n) { return next_u64() % n; }

  /// Box-Muller normal draw; consumes exactly two raw words per call.
  double normal(double mean = 0.0, double stddev = 1.0) {
    const double u1 = uniform_open();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    return mean + stddev * r * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  template <typename T>
  void fill_normal(Matrix<T>& m, double mean, double stddev) {
    for (std::size_t i = 0; i < m.rows(); ++i)
      for (std::size_t j = 0; j < m.cols(); ++j) m(i, j) = static_cast<T>(normal(mean, stddev));
  }

 private:
  std::uint64_t state_[4];
};

// ---------------------------------------------------------------------------
// Kernels
//
// All kernels are pure functions with fixed loop order; given identical
// inputs they produce bit-identical outputs on every run.
// ---------------------------------------------------------------------------

template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.cols() != b.rows())
    throw DimensionError("matmul: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                         " * " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  Matrix<T> out(a.rows(), b.cols());
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  // i-k-j order: each out[i][j] accumulates over k in ascending order, which
  // matches a scalar triple loop exactly while the j loop still vectorizes.
  for (std::size_t i = 0; i < n; ++i) {
    T* out_row = out.data() + i * m;
    const T* a_row = a.data() + i * k;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const T av = a_row[kk];
      const T* b_row = b.data() + kk * m;
      for (std::size_t j = 0; j < m; ++j) out_row[j] += av * b_row[j];
    }
  }
  return out;
}

template <typename T>
Matrix<T> transpose(const Matrix<T>& a) {
  Matrix<T> out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

template <typename T>
Matrix<T> add(const Matrix<T>& a, const Matrix<T>& b) {
  if (!a.same_shape(b)) throw DimensionError("add: shape mismatch");
  Matrix<T> out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
  return out;
}

template <typename T>
void add_inplace(Matrix<T>& a, const Matrix<T>& b) {
  if (!a.same_shape(b)) throw DimensionError("add_inplace: shape mismatch");
  for (std::size_t i = 0; i < a.size(); ++i) a.data()[i] += b.data()[i];
}

template <typename T>
Matrix<T> hadamard(const Matrix<T>& a, const Matrix<T>& b) {
  if (!a.same_shape(b)) throw DimensionError("hadamard: shape mismatch");
  Matrix<T> out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
  return out;
}

template <typename T>
void hadamard_inplace(Matrix<T>& a, const Matrix<T>& b) {
  if (!a.same_shape(b)) throw DimensionError("hadamard: shape mismatch");
  for (std::size_t i = 0; i < a.size(); ++i) a.data()[i] *= b.data()[i];
}

template <typename T>
Matrix<T> scale(const Matrix<T>& a, T s) {
  Matrix<T> out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * s;
  return out;
}

/// Broadcast product across rows: out[i][j] = v[j] * m[i][j].
/// v is a 1xC row vector with C == m.cols().
template <typename T>
Matrix<T> colwise_scale(const Matrix<T>& m, const Matrix<T>& v) {
  if (v.rows() != 1 || v.cols() != m.cols())
    throw DimensionError("colwise_scale: vector length " + std::to_string(v.cols()) +
                         " vs cols " + std::to_string(m.cols()));
  Matrix<T> out(m.rows(), m.cols());
  const T* vd = v.data();
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const T* src = m.data() + i * m.cols();
    T* dst = out.data() + i * m.cols();
    for (std::size_t j = 0; j < m.cols(); ++j) dst[j] = vd[j] * src[j];
  }
  return out;
}

template <typename T>
void colwise_scale_inplace(Matrix<T>& m, const Matrix<T>& v) {
  if (v.rows() != 1 || v.cols() != m.cols())
    throw DimensionError("colwise_scale_inplace: vector length " + std::to_string(v.cols()) +
                         " vs cols " + std::to_string(m.cols()));
  const T* vd = v.data();
  for (std::size_t i = 0; i < m.rows(); ++i) {
    T* dst = m.data() + i * m.cols();
    for (std::size_t j = 0; j < m.cols(); ++j) dst[j] *= vd[j];
  }
}

/// Row-wise softmax with max-subtraction, overwriting the input.
/// Throws NumericalError on NaN input.
template <typename T>
void softmax_rows_inplace(Matrix<T>& a) {
  if (a.empty()) throw DimensionError("softmax_rows: empty input");
  for (std::size_t i = 0; i < a.rows(); ++i) {
    T* row = a.data() + i * a.cols();
    T mx = row[0];
    for (std::size_t j = 1; j < a.cols(); ++j) mx = std::max(mx, row[j]);
    if (!std::isfinite(static_cast<double>(mx)))
      throw NumericalError("softmax_rows: non-finite input");
    T sum = 0;
    for (std::size_t j = 0; j < a.cols(); ++j) {
      row[j] = std::exp(row[j] - mx);
      sum += row[j];
    }
    const T inv = T(1) / sum;
    for (std::size_t j = 0; j < a.cols(); ++j) row[j] *= inv;
  }
}

template <typename T>
Matrix<T> softmax_rows(const Matrix<T>& a) {
  Matrix<T> out = a;
  softmax_rows_inplace(out);
  return out;
}

// Activations. GELU uses the tanh approximation with the documented constant
// sqrt(2/pi) = 0.7978845608028654; this is the only GELU variant in the engine.
inline constexpr double kGeluCoeff = 0.7978845608028654;

template <typename T>
T gelu(T x) {
  const double xd = static_cast<double>(x);
  return static_cast<T>(0.5 * xd * (1.0 + std::tanh(kGeluCoeff * (xd + 0.044715 * xd * xd * xd))));
}

/// Derivative of the tanh-approximation GELU.
template <typename T>
T gelu_grad(T x) {
  const double xd = static_cast<double>(x);
  const double u = kGeluCoeff * (xd + 0.044715 * xd * xd * xd);
  const double t = std::tanh(u);
  const double du = kGeluCoeff * (1.0 + 3.0 * 0.044715 * xd * xd);
  return static_cast<T>(0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du);
}

template <typename T>
T sigmoid(T x) {
  return static_cast<T>(1.0 / (1.0 + std::exp(-static_cast<double>(x))));
}

template <typename T>
T silu(T x) {
  return x * sigmoid(x);
}

template <typename T>
T silu_grad(T x) {
  const T s = sigmoid(x);
  return s + x * s * (T(1) - s);
}

template <typename T>
T relu(T x) {
  return x > T(0) ? x : T(0);
}

template <typename T>
T relu_grad(T x) {
  return x > T(0) ? T(1) : T(0);
}

enum class Activation { silu, gelu, relu };

template <typename T>
T apply_activation(Activation a, T x) {
  switch (a) {
    case Activation::silu: return silu(x);
    case Activation::gelu: return gelu(x);
    case Activation::relu: return relu(x);
  }
  return x;
}

template <typename T>
T activation_grad(Activation a, T x) {
  switch (a) {
    case Activation::silu: return silu_grad(x);
    case Activation::gelu: return gelu_grad(x);
    case Activation::relu: return relu_grad(x);
  }
  return T(1);
}

template <typename T>
Matrix<T> map_activation(Activation a, const Matrix<T>& m) {
  Matrix<T> out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.size(); ++i) out.data()[i] = apply_activation(a, m.data()[i]);
  return out;
}

template <typename T>
bool all_finite(const Matrix<T>& m) {
  for (std::size_t i = 0; i < m.size(); ++i)
    if (!std::isfinite(static_cast<double>(m.data()[i]))) return false;
  return true;
}

}  // namespace peftlab
