#pragma once

#include <cstddef>
#include <stdexcept>
#include <vector>

// Minimal dense helpers over contiguous doubles.  Everything the project
// needs reduces to dots, axpys and one Gram-Schmidt orthonormalization, so a
// full linear-algebra dependency is not warranted.
namespace dptail {

// Column-major dense matrix.
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> a;

  Matrix() = default;
  Matrix(int r, int c) : rows(r), cols(c), a(static_cast<std::size_t>(r) * c, 0.0) {}

  double* col(int j) { return a.data() + static_cast<std::size_t>(j) * rows; }
  const double* col(int j) const { return a.data() + static_cast<std::size_t>(j) * rows; }
  double& at(int i, int j) { return a[static_cast<std::size_t>(j) * rows + i]; }
  double at(int i, int j) const { return a[static_cast<std::size_t>(j) * rows + i]; }
};

// Eight independent accumulators: a single running sum serializes on the FP
// add latency, which dominates every training profile.  The fixed summation
// tree keeps results deterministic for a given build.
inline double dot(const double* x, const double* y, int n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  double s4 = 0.0, s5 = 0.0, s6 = 0.0, s7 = 0.0;
  int i = 0;
  for (; i + 8 <= n; i += 8) {
    s0 += x[i] * y[i];
    s1 += x[i + 1] * y[i + 1];
    s2 += x[i + 2] * y[i + 2];
    s3 += x[i + 3] * y[i + 3];
    s4 += x[i + 4] * y[i + 4];
    s5 += x[i + 5] * y[i + 5];
    s6 += x[i + 6] * y[i + 6];
    s7 += x[i + 7] * y[i + 7];
  }
  double s = ((s0 + s1) + (s2 + s3)) + ((s4 + s5) + (s6 + s7));
  for (; i < n; ++i) s += x[i] * y[i];
  return s;
}

inline void axpy(double alpha, const double* x, double* y, int n) {
  for (int i = 0; i < n; ++i) y[i] += alpha * x[i];
}

inline void scal(double alpha, double* x, int n) {
  for (int i = 0; i < n; ++i) x[i] *= alpha;
}

double nrm2(const double* x, int n);

// In-place modified Gram-Schmidt with one re-orthogonalization pass.
// Throws if the columns are numerically rank deficient.
void orthonormalize_columns(Matrix& m);

// max |M^T M - I| entry; orthonormality residual used by invariant checks.
double orthonormality_residual(const Matrix& m);

}  // namespace dptail
