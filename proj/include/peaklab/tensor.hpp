#pragma once

#include <cstddef>
#include <vector>

namespace peak {

// Dense row-major matrix of doubles. All model math runs at 64-bit precision.
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(int r, int c) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, 0.0) {}

  double& operator()(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
  double operator()(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }

  double* row(int r) { return data.data() + static_cast<std::size_t>(r) * cols; }
  const double* row(int r) const { return data.data() + static_cast<std::size_t>(r) * cols; }

  std::size_t size() const { return data.size(); }
  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
  void zero() { data.assign(data.size(), 0.0); }
};

using Vec = std::vector<double>;

// out = a @ b
void matmul(const Matrix& a, const Matrix& b, Matrix& out);
// out += a @ b
void matmul_acc(const Matrix& a, const Matrix& b, Matrix& out);
// out = a @ b^T
void matmul_nt(const Matrix& a, const Matrix& b, Matrix& out);
// out += a^T @ b
void matmul_tn_acc(const Matrix& a, const Matrix& b, Matrix& out);

Matrix transpose(const Matrix& a);

double dot(const double* a, const double* b, int n);
double norm2(const double* a, int n);
double norm2(const Vec& a);

// Cholesky factorization of a symmetric positive-definite matrix, kept for
// repeated right-hand-side solves. Throws ErrorCode::kDegeneracy when the
// matrix is not numerically positive definite.
class CholeskySolver {
 public:
  explicit CholeskySolver(const Matrix& spd);

  Vec solve(const Vec& b) const;
  int dim() const { return l_.rows; }

 private:
  Matrix l_;  // lower triangular factor
};

bool all_finite(const Matrix& m);
bool all_finite(const Vec& v);

}  // namespace peak
