#include "peaklab/tensor.hpp"

#include <cassert>
#include <cmath>

#include "peaklab/error.hpp"

namespace peak {

void matmul(const Matrix& a, const Matrix& b, Matrix& out) {
  assert(a.cols == b.rows);
  if (out.rows != a.rows || out.cols != b.cols) out = Matrix(a.rows, b.cols);
  out.zero();
  matmul_acc(a, b, out);
}

void matmul_acc(const Matrix& a, const Matrix& b, Matrix& out) {
  assert(a.cols == b.rows && out.rows == a.rows && out.cols == b.cols);
  // i-k-j order keeps the inner loop contiguous over both b and out.
  for (int i = 0; i < a.rows; ++i) {
    double* out_row = out.row(i);
    const double* a_row = a.row(i);
    for (int k = 0; k < a.cols; ++k) {
      const double aik = a_row[k];
      if (aik == 0.0) continue;
      const double* b_row = b.row(k);
      for (int j = 0; j < b.cols; ++j) out_row[j] += aik * b_row[j];
    }
  }
}

void matmul_nt(const Matrix& a, const Matrix& b, Matrix& out) {
  assert(a.cols == b.cols);
  if (out.rows != a.rows || out.cols != b.rows) out = Matrix(a.rows, b.rows);
  for (int i = 0; i < a.rows; ++i) {
    const double* a_row = a.row(i);
    double* out_row = out.row(i);
    for (int j = 0; j < b.rows; ++j) out_row[j] = dot(a_row, b.row(j), a.cols);
  }
}

void matmul_tn_acc(const Matrix& a, const Matrix& b, Matrix& out) {
  assert(a.rows == b.rows && out.rows == a.cols && out.cols == b.cols);
  for (int k = 0; k < a.rows; ++k) {
    const double* a_row = a.row(k);
    const double* b_row = b.row(k);
    for (int i = 0; i < a.cols; ++i) {
      const double aki = a_row[i];
      if (aki == 0.0) continue;
      double* out_row = out.row(i);
      for (int j = 0; j < b.cols; ++j) out_row[j] += aki * b_row[j];
    }
  }
}

Matrix transpose(const Matrix& a) {
  Matrix t(a.cols, a.rows);
  for (int i = 0; i < a.rows; ++i)
    for (int j = 0; j < a.cols; ++j) t(j, i) = a(i, j);
  return t;
}

double dot(const double* a, const double* b, int n) {
  double s = 0.0;
  for (int i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

double norm2(const double* a, int n) { return std::sqrt(dot(a, a, n)); }

double norm2(const Vec& a) { return norm2(a.data(), static_cast<int>(a.size())); }

CholeskySolver::CholeskySolver(const Matrix& spd) {
  if (spd.rows != spd.cols)
    throw Error(ErrorCode::kDegeneracy, "cholesky: matrix must be square");
  const int n = spd.rows;
  l_ = Matrix(n, n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j <= i; ++j) {
      double s = spd(i, j);
      for (int k = 0; k < j; ++k) s -= l_(i, k) * l_(j, k);
      if (i == j) {
        if (s <= 0.0 || !std::isfinite(s))
          throw Error(ErrorCode::kDegeneracy,
                      "cholesky: matrix not positive definite");
        l_(i, i) = std::sqrt(s);
      } else {
        l_(i, j) = s / l_(j, j);
      }
    }
  }
}

Vec CholeskySolver::solve(const Vec& b) const {
  const int n = l_.rows;
  assert(static_cast<int>(b.size()) == n);
  Vec y(n), x(n);
  for (int i = 0; i < n; ++i) {
    double s = b[i];
    for (int k = 0; k < i; ++k) s -= l_(i, k) * y[k];
    y[i] = s / l_(i, i);
  }
  for (int i = n - 1; i >= 0; --i) {
    double s = y[i];
    for (int k = i + 1; k < n; ++k) s -= l_(k, i) * x[k];
    x[i] = s / l_(i, i);
  }
  return x;
}

bool all_finite(const Matrix& m) {
  for (double v : m.data)
    if (!std::isfinite(v)) return false;
  return true;
}

bool all_finite(const Vec& v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace peak
