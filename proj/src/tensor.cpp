#include "stylediff/tensor.hpp"

#include <cblas.h>

#include <cmath>
#include <numeric>
#include <sstream>

#include "stylediff/error.hpp"

namespace stylediff {

namespace {

std::size_t shape_numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw InputError("tensor dimension must be non-negative");
    n *= static_cast<std::size_t>(d);
  }
  return shape.empty() ? 0 : n;
}

}  // namespace

Tensor::Tensor(std::vector<int> shape)
    : shape_(std::move(shape)), data_(shape_numel(shape_), 0.0) {}

Tensor::Tensor(int rows, int cols) : Tensor(std::vector<int>{rows, cols}) {}

Tensor::Tensor(int rows, int cols, std::vector<double> data)
    : shape_{rows, cols}, data_(std::move(data)) {
  if (data_.size() != shape_numel(shape_))
    throw InputError("tensor data size does not match shape");
}

Tensor Tensor::full(int rows, int cols, double v) {
  Tensor t(rows, cols);
  t.fill(v);
  return t;
}

Tensor Tensor::eye(int n) {
  Tensor t(n, n);
  for (int i = 0; i < n; ++i) t.at(i, i) = 1.0;
  return t;
}

Tensor Tensor::randn(int rows, int cols, Rng& rng, double stddev) {
  Tensor t(rows, cols);
  for (auto& v : t.data_) v = stddev * rng.normal();
  return t;
}

Tensor Tensor::from_scalar(double v) {
  Tensor t(1, 1);
  t[0] = v;
  return t;
}

int Tensor::rows() const {
  if (shape_.size() == 2) return shape_[0];
  if (shape_.size() == 1) return 1;
  throw InputError("rows(): tensor is not rank-2, shape " + shape_str());
}

int Tensor::cols() const {
  if (shape_.size() == 2) return shape_[1];
  if (shape_.size() == 1) return shape_[0];
  throw InputError("cols(): tensor is not rank-2, shape " + shape_str());
}

double& Tensor::at(int r, int c) {
  return data_[static_cast<std::size_t>(r) * cols() + c];
}

double Tensor::at(int r, int c) const {
  return data_[static_cast<std::size_t>(r) * cols() + c];
}

void Tensor::fill(double v) {
  for (auto& x : data_) x = v;
}

Tensor Tensor::reshaped(std::vector<int> shape) const {
  if (shape_numel(shape) != data_.size())
    throw InputError("reshape changes element count");
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = data_;
  return t;
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape_.size(); ++i)
    os << (i ? "," : "") << shape_[i];
  os << "]";
  return os.str();
}

bool Tensor::all_finite() const {
  for (double v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

double Tensor::max_abs() const {
  double m = 0.0;
  for (double v : data_) m = std::max(m, std::abs(v));
  return m;
}

double Tensor::l2_norm() const {
  double s = 0.0;
  for (double v : data_) s += v * v;
  return std::sqrt(s);
}

double Tensor::sum() const {
  return std::accumulate(data_.begin(), data_.end(), 0.0);
}

double Tensor::mean() const {
  if (data_.empty()) throw InputError("mean of empty tensor");
  return sum() / static_cast<double>(data_.size());
}

Tensor& Tensor::operator+=(const Tensor& o) {
  if (!same_shape(o))
    throw InputError("shape mismatch " + shape_str() + " += " + o.shape_str());
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
  return *this;
}

Tensor& Tensor::operator-=(const Tensor& o) {
  if (!same_shape(o))
    throw InputError("shape mismatch " + shape_str() + " -= " + o.shape_str());
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
  return *this;
}

Tensor& Tensor::operator*=(double s) {
  for (auto& v : data_) v *= s;
  return *this;
}

Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
Tensor operator*(Tensor a, double s) { return a *= s; }

Tensor hadamard(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b))
    throw InputError("hadamard shape mismatch " + a.shape_str() + " vs " +
                     b.shape_str());
  Tensor c = a;
  for (std::size_t i = 0; i < c.numel(); ++i) c[i] *= b[i];
  return c;
}

void gemm_raw(int m, int n, int k, const double* a, int lda, bool trans_a,
              const double* b, int ldb, bool trans_b, double* c, int ldc,
              double alpha, double beta) {
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b,
              ldb, beta, c, ldc);
}

void gemm(const Tensor& a, bool trans_a, const Tensor& b, bool trans_b,
          Tensor& c, double alpha, double beta) {
  const int m = trans_a ? a.cols() : a.rows();
  const int ka = trans_a ? a.rows() : a.cols();
  const int kb = trans_b ? b.cols() : b.rows();
  const int n = trans_b ? b.rows() : b.cols();
  if (ka != kb)
    throw InputError("gemm inner dimension mismatch " + a.shape_str() +
                     " vs " + b.shape_str());
  if (c.rows() != m || c.cols() != n)
    throw InputError("gemm output shape mismatch");
  gemm_raw(m, n, ka, a.data(), a.cols(), trans_a, b.data(), b.cols(), trans_b,
           c.data(), c.cols(), alpha, beta);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  Tensor c(a.rows(), b.cols());
  gemm(a, false, b, false, c);
  return c;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  Tensor c(a.rows(), b.rows());
  gemm(a, false, b, true, c);
  return c;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  Tensor c(a.cols(), b.cols());
  gemm(a, true, b, false, c);
  return c;
}

Tensor transpose2d(const Tensor& a) {
  Tensor t(a.cols(), a.rows());
  for (int r = 0; r < a.rows(); ++r)
    for (int c = 0; c < a.cols(); ++c) t.at(c, r) = a.at(r, c);
  return t;
}

Tensor colsum(const Tensor& a) {
  Tensor s(1, a.cols());
  for (int r = 0; r < a.rows(); ++r)
    for (int c = 0; c < a.cols(); ++c) s[static_cast<std::size_t>(c)] += a.at(r, c);
  return s;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b))
    throw InputError("max_abs_diff shape mismatch " + a.shape_str() + " vs " +
                     b.shape_str());
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

void pin_blas_single_thread() { openblas_set_num_threads(1); }

}  // namespace stylediff
