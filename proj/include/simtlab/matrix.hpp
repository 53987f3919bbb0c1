#pragma once

#include <cassert>
#include <cstddef>
#include <span>
#include <vector>

namespace simtlab {

// Dense row-major matrix of doubles.
//
// The kernels below fix the floating-point accumulation order of every
// output element (inner products run over the shared dimension in index
// order), independent of how many rows are processed together. This is what
// makes a full teacher-forced pass agree bit for bit with the incremental
// single-step path, so the build must not enable -ffast-math or FMA
// contraction.
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

  std::span<double> row_span(int r) { return {row(r), static_cast<std::size_t>(cols)}; }
  std::span<const double> row_span(int r) const { return {row(r), static_cast<std::size_t>(cols)}; }

  void zero() { std::fill(data.begin(), data.end(), 0.0); }
  std::size_t size() const { return data.size(); }
};

namespace detail {

using Vec4 = double __attribute__((vector_size(32)));

inline Vec4 load4(const double* p) {
  Vec4 v;
  __builtin_memcpy(&v, p, sizeof(v));
  return v;
}

inline void store4(double* p, Vec4 v) { __builtin_memcpy(p, &v, sizeof(v)); }

// y[r][c] += x[r][p] * w[p][c] for p = 0..depth-1, in p order, on an
// R x 8 register tile. Each element sees exactly the operation sequence of
// the scalar loop below, so tiled and untiled results agree bitwise.
template <int R>
inline void tile8(const double* x, int ldx, const double* w, int ldw, int depth, double* y, int ldy) {
  Vec4 acc[R][2];
  for (int r = 0; r < R; ++r) {
    acc[r][0] = load4(y + r * ldy);
    acc[r][1] = load4(y + r * ldy + 4);
  }
  for (int p = 0; p < depth; ++p) {
    const double* wr = w + static_cast<std::size_t>(p) * ldw;
    const Vec4 w0 = load4(wr), w1 = load4(wr + 4);
    for (int r = 0; r < R; ++r) {
      const double a = x[r * ldx + p];
      const Vec4 av = {a, a, a, a};
      acc[r][0] += av * w0;
      acc[r][1] += av * w1;
    }
  }
  for (int r = 0; r < R; ++r) {
    store4(y + r * ldy, acc[r][0]);
    store4(y + r * ldy + 4, acc[r][1]);
  }
}

inline void scalar_madd(const double* x, int ldx, int rows, const double* w, int ldw, int depth, int c0, int c1,
                        double* y, int ldy) {
  for (int r = 0; r < rows; ++r)
    for (int c = c0; c < c1; ++c) {
      double acc = y[r * ldy + c];
      for (int p = 0; p < depth; ++p) acc += x[r * ldx + p] * w[static_cast<std::size_t>(p) * ldw + c];
      y[r * ldy + c] = acc;
    }
}

// y += x w over the full shapes.
inline void madd(const double* x, int ldx, int rows, const double* w, int ldw, int depth, int cols, double* y,
                 int ldy) {
  constexpr int R = 4;
  const int c8 = cols - cols % 8;
  int r = 0;
  for (; r + R <= rows; r += R)
    for (int c = 0; c < c8; c += 8) tile8<R>(x + r * ldx, ldx, w + c, ldw, depth, y + r * ldy + c, ldy);
  for (; r < rows; ++r)
    for (int c = 0; c < c8; c += 8) tile8<1>(x + r * ldx, ldx, w + c, ldw, depth, y + r * ldy + c, ldy);
  if (c8 < cols) scalar_madd(x, ldx, rows, w, ldw, depth, c8, cols, y, ldy);
}

}  // namespace detail

// y = x w + b   (x: n x p, w: p x m, b: 1 x m)
inline void affine(const Matrix& x, const Matrix& w, const Matrix& b, Matrix& y) {
  assert(x.cols == w.rows && b.cols == w.cols);
  y = Matrix(x.rows, w.cols);
  detail::madd(x.data.data(), x.cols, x.rows, w.data.data(), w.cols, w.rows, w.cols, y.data.data(), y.cols);
  const double* br = b.row(0);
  for (int i = 0; i < y.rows; ++i) {
    double* yr = y.row(i);
    for (int j = 0; j < y.cols; ++j) yr[j] += br[j];
  }
}

// dw += x^T dy, db += column sums of dy   (sums run over rows in order)
inline void accumulate_affine_grads(const Matrix& x, const Matrix& dy, Matrix& dw, Matrix& db) {
  assert(x.rows == dy.rows && dw.rows == x.cols && dw.cols == dy.cols);
  Matrix xt(x.cols, x.rows);
  for (int i = 0; i < x.rows; ++i)
    for (int p = 0; p < x.cols; ++p) xt(p, i) = x(i, p);
  detail::madd(xt.data.data(), xt.cols, xt.rows, dy.data.data(), dy.cols, dy.rows, dy.cols, dw.data.data(), dw.cols);
  double* dbr = db.row(0);
  for (int i = 0; i < dy.rows; ++i) {
    const double* dyr = dy.row(i);
    for (int j = 0; j < dy.cols; ++j) dbr[j] += dyr[j];
  }
}

inline Matrix transpose(const Matrix& a) {
  Matrix t(a.cols, a.rows);
  for (int i = 0; i < a.rows; ++i)
    for (int j = 0; j < a.cols; ++j) t(j, i) = a(i, j);
  return t;
}

// dx += dy w^T
inline void accumulate_input_grad(const Matrix& dy, const Matrix& w, Matrix& dx) {
  assert(dy.cols == w.cols && dx.cols == w.rows && dx.rows == dy.rows);
  const Matrix wt = transpose(w);
  detail::madd(dy.data.data(), dy.cols, dy.rows, wt.data.data(), wt.cols, wt.rows, wt.cols, dx.data.data(), dx.cols);
}

inline void add_inplace(Matrix& a, const Matrix& b) {
  assert(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) a.data[i] += b.data[i];
}

}  // namespace simtlab
