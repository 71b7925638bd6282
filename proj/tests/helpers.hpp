#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <zlib.h>

#include "dptail/datagen.hpp"
#include "dptail/linalg.hpp"

// Brute-force oracles shared by the test suites.  These deliberately avoid
// the library's closed forms: dense matrices, direct summation, no clever
// identities, so agreement is meaningful.
namespace oracle {

using dptail::Matrix;

// Dense d x d materialization of A_k = lambda_k q_k q_k^T + c Q_s Q_s^T.
inline Matrix materialize_transform(const dptail::NoiseModel& nm, int k) {
  const int d = nm.d;
  Matrix qs = nm.shared_basis();
  Matrix A(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) {
      double v = nm.spike_vals[k] * nm.spike_dirs[k][i] * nm.spike_dirs[k][j];
      for (int c = 0; c < qs.cols; ++c) v += nm.base_eig * qs.at(i, c) * qs.at(j, c);
      A.at(i, j) = v;
    }
  return A;
}

inline Matrix matmul_t(const Matrix& x, const Matrix& y) {  // x^T * y
  Matrix r(x.cols, y.cols);
  for (int i = 0; i < x.cols; ++i)
    for (int j = 0; j < y.cols; ++j) {
      double s = 0.0;
      for (int t = 0; t < x.rows; ++t) s += x.at(t, i) * y.at(t, j);
      r.at(i, j) = s;
    }
  return r;
}

inline std::vector<double> matvec(const Matrix& m, const std::vector<double>& v) {
  std::vector<double> r(m.rows, 0.0);
  for (int j = 0; j < m.cols; ++j)
    for (int i = 0; i < m.rows; ++i) r[i] += m.at(i, j) * v[j];
  return r;
}

inline std::vector<double> matvec_t(const Matrix& m, const std::vector<double>& v) {  // m^T * v
  std::vector<double> r(m.cols, 0.0);
  for (int j = 0; j < m.cols; ++j)
    for (int i = 0; i < m.rows; ++i) r[j] += m.at(i, j) * v[i];
  return r;
}

inline double fro_norm(const Matrix& m) {
  double s = 0.0;
  for (double v : m.a) s += v * v;
  return std::sqrt(s);
}

inline double trace(const Matrix& m) {
  double s = 0.0;
  for (int i = 0; i < m.rows; ++i) s += m.at(i, i);
  return s;
}

inline double vec_norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

inline double vec_dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double rel_err(double got, double want) {
  const double den = std::fabs(want) > 1e-300 ? std::fabs(want) : 1.0;
  return std::fabs(got - want) / den;
}

}  // namespace oracle

// Synthetic MNIST-shaped IDX fixtures (shared by the loader, harness, and
// acceptance suites).  Pixels follow a fixed pattern with the sample index
// encoded in the first two bytes; labels cycle 0..9.
namespace idxfix {

using Bytes = std::vector<unsigned char>;

inline void push_u32be(Bytes& out, std::uint32_t v) {
  out.push_back(static_cast<unsigned char>(v >> 24));
  out.push_back(static_cast<unsigned char>(v >> 16));
  out.push_back(static_cast<unsigned char>(v >> 8));
  out.push_back(static_cast<unsigned char>(v));
}

inline Bytes images(int n) {
  Bytes out;
  push_u32be(out, 0x00000803u);
  push_u32be(out, static_cast<std::uint32_t>(n));
  push_u32be(out, 28u);
  push_u32be(out, 28u);
  for (int i = 0; i < n; ++i)
    for (int p = 0; p < 784; ++p) {
      int v = (i * 31 + p * 7) % 256;
      if (p == 0) v = i & 0xff;
      if (p == 1) v = (i >> 8) & 0xff;
      out.push_back(static_cast<unsigned char>(v));
    }
  return out;
}

inline Bytes labels(int n) {
  Bytes out;
  push_u32be(out, 0x00000801u);
  push_u32be(out, static_cast<std::uint32_t>(n));
  for (int i = 0; i < n; ++i) out.push_back(static_cast<unsigned char>(i % 10));
  return out;
}

inline Bytes gzip(const Bytes& raw) {
  z_stream zs{};
  if (deflateInit2(&zs, 1, Z_DEFLATED, 15 + 16, 8, Z_DEFAULT_STRATEGY) != Z_OK)
    throw std::runtime_error("fixture gzip: deflateInit2 failed");
  Bytes out(deflateBound(&zs, static_cast<uLong>(raw.size())) + 64);
  zs.next_in = const_cast<Bytef*>(raw.data());
  zs.avail_in = static_cast<uInt>(raw.size());
  zs.next_out = out.data();
  zs.avail_out = static_cast<uInt>(out.size());
  if (deflate(&zs, Z_FINISH) != Z_STREAM_END)
    throw std::runtime_error("fixture gzip: deflate failed");
  out.resize(zs.total_out);
  deflateEnd(&zs);
  return out;
}

inline void write_bytes(const std::string& path, const Bytes& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (!f.good()) throw std::runtime_error("fixture write failed: " + path);
}

// Writes the four official-named files into dir (created if needed).
inline void write_mnist_dir(const std::string& dir, int n_train, int n_test,
                            bool gzipped = false) {
  std::filesystem::create_directories(dir);
  const std::string suffix = gzipped ? ".gz" : "";
  auto emit = [&](const std::string& base, const Bytes& raw) {
    write_bytes(dir + "/" + base + suffix, gzipped ? gzip(raw) : raw);
  };
  emit("train-images-idx3-ubyte", images(n_train));
  emit("train-labels-idx1-ubyte", labels(n_train));
  emit("t10k-images-idx3-ubyte", images(n_test));
  emit("t10k-labels-idx1-ubyte", labels(n_test));
}

}  // namespace idxfix
