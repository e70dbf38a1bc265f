#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "stylediff/rng.hpp"

namespace stylediff {

// Dense row-major tensor of doubles.  Most of the pipeline works with rank-2
// tensors (rows x cols); higher-rank data (head stacks, batches) is stored as
// an explicit leading dimension over 2-D slabs.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape);
  Tensor(int rows, int cols);
  Tensor(int rows, int cols, std::vector<double> data);

  static Tensor zeros(int rows, int cols) { return Tensor(rows, cols); }
  static Tensor full(int rows, int cols, double v);
  static Tensor eye(int n);
  static Tensor randn(int rows, int cols, Rng& rng, double stddev = 1.0);
  static Tensor from_scalar(double v);

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  // Rank-2 accessors; a rank-1 tensor behaves as a single row.
  int rows() const;
  int cols() const;
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(int r, int c);
  double at(int r, int c) const;

  void fill(double v);
  Tensor reshaped(std::vector<int> shape) const;  // same data, new shape

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  std::string shape_str() const;

  bool all_finite() const;
  double max_abs() const;
  double l2_norm() const;
  double sum() const;
  double mean() const;

  // Elementwise arithmetic; shapes must match exactly.
  Tensor& operator+=(const Tensor& o);
  Tensor& operator-=(const Tensor& o);
  Tensor& operator*=(double s);

 private:
  std::vector<int> shape_;
  std::vector<double> data_;
};

Tensor operator+(Tensor a, const Tensor& b);
Tensor operator-(Tensor a, const Tensor& b);
Tensor operator*(Tensor a, double s);
Tensor hadamard(const Tensor& a, const Tensor& b);

// C = alpha * op(A) . op(B) + beta * C, all rank-2, via BLAS dgemm.
void gemm(const Tensor& a, bool trans_a, const Tensor& b, bool trans_b,
          Tensor& c, double alpha = 1.0, double beta = 0.0);
// Raw-pointer variant for strided slices (per-head attention blocks).
void gemm_raw(int m, int n, int k, const double* a, int lda, bool trans_a,
              const double* b, int ldb, bool trans_b, double* c, int ldc,
              double alpha = 1.0, double beta = 0.0);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // a . b^T
Tensor matmul_tn(const Tensor& a, const Tensor& b);  // a^T . b
Tensor transpose2d(const Tensor& a);

// Column sums of a rank-2 tensor, returned as 1 x cols.
Tensor colsum(const Tensor& a);

double max_abs_diff(const Tensor& a, const Tensor& b);

// Pin the BLAS backend to one thread.  Called once from every entry point so
// results are bitwise reproducible regardless of the host CPU count.
void pin_blas_single_thread();

}  // namespace stylediff
