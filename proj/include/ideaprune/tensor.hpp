#pragma once

// Dense fp64 kernels. Every matmul accumulates each output element in a fixed
// left-to-right order over the inner dimension, so results never depend on
// threading or call site.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdlib>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "ideaprune/error.hpp"

namespace ideaprune {

struct Tensor1D {
  std::vector<double> values;

  Tensor1D() = default;
  explicit Tensor1D(std::size_t len, double fill = 0.0) : values(len, fill) {}
  Tensor1D(std::initializer_list<double> init) : values(init) {}

  std::size_t len() const { return values.size(); }
  double& operator[](std::size_t i) { return values[i]; }
  double operator[](std::size_t i) const { return values[i]; }

  bool operator==(const Tensor1D&) const = default;
};

struct Tensor2D {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;  // row-major

  Tensor2D() = default;
  Tensor2D(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), values(r * c, fill) {}

  static Tensor2D from_rows(std::initializer_list<std::initializer_list<double>> init) {
    Tensor2D t;
    t.rows = init.size();
    t.cols = t.rows ? init.begin()->size() : 0;
    for (const auto& row : init) {
      if (row.size() != t.cols) throw DimensionError("ragged initializer for Tensor2D");
      t.values.insert(t.values.end(), row.begin(), row.end());
    }
    return t;
  }

  static Tensor2D identity(std::size_t n) {
    Tensor2D t(n, n);
    for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
    return t;
  }

  double& operator()(std::size_t r, std::size_t c) { return values[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }

  std::span<double> row(std::size_t r) { return {values.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {values.data() + r * cols, cols}; }

  std::size_t size() const { return values.size(); }

  std::string shape_string() const { return "[" + std::to_string(rows) + "x" + std::to_string(cols) + "]"; }

  bool operator==(const Tensor2D&) const = default;
};

namespace detail {

inline void require_shape(bool ok, const char* op, const Tensor2D& a, const Tensor2D& b) {
  if (!ok) {
    throw DimensionError(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " + b.shape_string());
  }
}

/// Worker count for row-partitioned kernels; 1 unless IDEA_PRUNE_DETERMINISTIC=0.
inline std::size_t kernel_threads() {
  static const std::size_t n = [] {
    const char* env = std::getenv("IDEA_PRUNE_DETERMINISTIC");
    if (env == nullptr || std::string(env) != "0") return std::size_t{1};
    return std::max<std::size_t>(1, std::thread::hardware_concurrency());
  }();
  return n;
}

/// Runs body(begin, end) over [0, rows). Partitioning is by output row only, so
/// the per-element accumulation order is the same for any thread count.
template <class Body>
void for_row_blocks(std::size_t rows, std::size_t work_per_row, Body&& body) {
  const std::size_t threads = kernel_threads();
  if (threads <= 1 || rows < 2 || rows * work_per_row < (1u << 16)) {
    body(std::size_t{0}, rows);
    return;
  }
  const std::size_t n = std::min(threads, rows);
  std::vector<std::thread> pool;
  pool.reserve(n);
  for (std::size_t w = 0; w < n; ++w) {
    const std::size_t b = rows * w / n;
    const std::size_t e = rows * (w + 1) / n;
    pool.emplace_back([&body, b, e] { body(b, e); });
  }
  for (auto& t : pool) t.join();
}

}  // namespace detail

/// a (m x k) times b (k x n).
inline Tensor2D matmul(const Tensor2D& a, const Tensor2D& b) {
  detail::require_shape(a.cols == b.rows, "matmul", a, b);
  Tensor2D c(a.rows, b.cols);
  const std::size_t k_dim = a.cols;
  const std::size_t n = b.cols;
  detail::for_row_blocks(a.rows, k_dim * n, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      double* crow = c.values.data() + i * n;
      const double* arow = a.values.data() + i * k_dim;
      for (std::size_t k = 0; k < k_dim; ++k) {
        const double aik = arow[k];
        const double* brow = b.values.data() + k * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
      }
    }
  });
  return c;
}

inline Tensor2D transpose(const Tensor2D& a) {
  Tensor2D t(a.cols, a.rows);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < a.cols; ++j) t(j, i) = a(i, j);
  return t;
}

/// a (m x k) times b^T where b is (n x k). The usual x * W^T of a linear layer.
inline Tensor2D matmul_bt(const Tensor2D& a, const Tensor2D& b) {
  detail::require_shape(a.cols == b.cols, "matmul_bt", a, b);
  return matmul(a, transpose(b));
}

/// a^T times b, where a is (r x m) and b is (r x n). Weight gradients.
inline Tensor2D matmul_at(const Tensor2D& a, const Tensor2D& b) {
  detail::require_shape(a.rows == b.rows, "matmul_at", a, b);
  Tensor2D c(a.cols, b.cols);
  const std::size_t m = a.cols;
  const std::size_t n = b.cols;
  detail::for_row_blocks(m, a.rows * n, [&](std::size_t begin, std::size_t end) {
    for (std::size_t r = 0; r < a.rows; ++r) {
      const double* arow = a.values.data() + r * m;
      const double* brow = b.values.data() + r * n;
      for (std::size_t i = begin; i < end; ++i) {
        const double ari = arow[i];
        double* crow = c.values.data() + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += ari * brow[j];
      }
    }
  });
  return c;
}

inline void add_inplace(Tensor2D& a, const Tensor2D& b) {
  detail::require_shape(a.rows == b.rows && a.cols == b.cols, "add", a, b);
  for (std::size_t i = 0; i < a.values.size(); ++i) a.values[i] += b.values[i];
}

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline double silu(double z) { return z * sigmoid(z); }

/// d/dz [z * sigmoid(z)].
inline double silu_grad(double z) {
  const double s = sigmoid(z);
  return s * (1.0 + z * (1.0 - s));
}

inline Tensor2D silu(const Tensor2D& z) {
  Tensor2D out(z.rows, z.cols);
  for (std::size_t i = 0; i < z.values.size(); ++i) out.values[i] = silu(z.values[i]);
  return out;
}

inline Tensor1D silu(const Tensor1D& z) {
  Tensor1D out(z.len());
  for (std::size_t i = 0; i < z.len(); ++i) out[i] = silu(z[i]);
  return out;
}

/// In-place softmax of one row with max subtraction.
inline void softmax_inplace(std::span<double> row) {
  if (row.empty()) return;
  const double mx = *std::max_element(row.begin(), row.end());
  double sum = 0.0;
  for (double& v : row) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (double& v : row) v /= sum;
}

inline Tensor2D softmax_rows(const Tensor2D& a) {
  Tensor2D out = a;
  for (std::size_t r = 0; r < out.rows; ++r) softmax_inplace(out.row(r));
  return out;
}

/// log(sum(exp(row))) computed stably.
inline double log_sum_exp(std::span<const double> row) {
  const double mx = *std::max_element(row.begin(), row.end());
  double sum = 0.0;
  for (double v : row) sum += std::exp(v - mx);
  return mx + std::log(sum);
}

inline bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

/// Central-difference gradient of loss() with respect to params, perturbing one
/// element at a time in place. loss must read params and be deterministic.
inline std::vector<double> finite_difference_grad(const std::function<double()>& loss, std::span<double> params,
                                                  double h) {
  if (!(h > 0.0)) throw OracleError("finite_difference_grad: step must be positive");
  std::vector<double> grad(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double saved = params[i];
    params[i] = saved + h;
    const double plus = loss();
    params[i] = saved - h;
    const double minus = loss();
    params[i] = saved;
    if (!std::isfinite(plus) || !std::isfinite(minus)) {
      throw OracleError("finite_difference_grad: non-finite loss at element " + std::to_string(i));
    }
    grad[i] = (plus - minus) / (2.0 * h);
  }
  return grad;
}

}  // namespace ideaprune
