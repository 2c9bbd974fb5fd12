#pragma once

#include <cstddef>

namespace throttle::kernels {

// C[m,n] (+)= A[m,k] * B[k,n], all row-major and contiguous. Every output
// element accumulates its k products in ascending order, so results do not
// depend on the element's position within C.
void gemm(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
          double* c, bool accumulate);
// c[m,n] = a[m,k] * transpose(b[n,k]); rows are reduced with four
// interleaved partial sums combined in a fixed order.
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c);

// out[cols,rows] = in[rows,cols]^T
void transpose(std::size_t rows, std::size_t cols, const double* in, double* out);

struct ConvGeometry {
  std::size_t batch, channels, height, width;
  std::size_t kernel_h, kernel_w, stride, padding;
  std::size_t out_h, out_w;

  std::size_t patch() const { return channels * kernel_h * kernel_w; }
  std::size_t positions() const { return batch * out_h * out_w; }
};

// cols[patch, positions] from x[N,C,H,W]; out-of-bounds taps read zero.
void im2col(const ConvGeometry& g, const double* x, double* cols);
// Adds cols back into dx[N,C,H,W] (adjoint of im2col).
void col2im_add(const ConvGeometry& g, const double* cols, double* dx);

}  // namespace throttle::kernels
