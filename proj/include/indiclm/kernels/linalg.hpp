#pragma once

#include <cstddef>
#include <cstdint>

// Dense kernels used by the transformer. Weight matrices are row-major
// [out x in]; activations are row-major [rows x features].
//
// ref:: is the plain serial definition and is what tests compare against.
// par:: splits work over independent output rows with OpenMP, so each output
// element is still produced by one thread in a fixed order; results do not
// depend on the thread count (they may differ from ref:: in the last bits
// because of vectorized summation order).

namespace indiclm::kernels {

namespace ref {

// y[r][o] = sum_k x[r][k] * w[o][k]
template <typename Real>
void matmul_wt(const Real* x, const Real* w, Real* y, std::size_t rows, std::size_t in, std::size_t out) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t o = 0; o < out; ++o) {
      Real acc = 0;
      for (std::size_t k = 0; k < in; ++k) acc += x[r * in + k] * w[o * in + k];
      y[r * out + o] = acc;
    }
}

// dx[r][k] += sum_o dy[r][o] * w[o][k]
template <typename Real>
void matmul_dx(const Real* dy, const Real* w, Real* dx, std::size_t rows, std::size_t in, std::size_t out) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t o = 0; o < out; ++o) {
      const Real g = dy[r * out + o];
      for (std::size_t k = 0; k < in; ++k) dx[r * in + k] += g * w[o * in + k];
    }
}

// dw[o][k] += sum_r dy[r][o] * x[r][k]
template <typename Real>
void matmul_dw(const Real* dy, const Real* x, Real* dw, std::size_t rows, std::size_t in, std::size_t out) {
  for (std::size_t o = 0; o < out; ++o)
    for (std::size_t r = 0; r < rows; ++r) {
      const Real g = dy[r * out + o];
      for (std::size_t k = 0; k < in; ++k) dw[o * in + k] += g * x[r * in + k];
    }
}

// y[r][o] = scale[o] * sum_k x[r][k] * q[o][k]
inline void matmul_wt_q8(const float* x, const std::int8_t* q, const float* scale, float* y, std::size_t rows,
                         std::size_t in, std::size_t out) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t o = 0; o < out; ++o) {
      float acc = 0;
      for (std::size_t k = 0; k < in; ++k) acc += x[r * in + k] * static_cast<float>(q[o * in + k]);
      y[r * out + o] = acc * scale[o];
    }
}

}  // namespace ref

namespace par {

template <typename Real>
void matmul_wt(const Real* x, const Real* w, Real* y, std::size_t rows, std::size_t in, std::size_t out) {
  const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(rows * out);
#pragma omp parallel for schedule(static) if (n * static_cast<std::ptrdiff_t>(in) > 32768)
  for (std::ptrdiff_t idx = 0; idx < n; ++idx) {
    const std::size_t r = static_cast<std::size_t>(idx) / out;
    const std::size_t o = static_cast<std::size_t>(idx) % out;
    const Real* xr = x + r * in;
    const Real* wo = w + o * in;
    Real acc = 0;
#pragma omp simd reduction(+ : acc)
    for (std::size_t k = 0; k < in; ++k) acc += xr[k] * wo[k];
    y[idx] = acc;
  }
}

template <typename Real>
void matmul_dx(const Real* dy, const Real* w, Real* dx, std::size_t rows, std::size_t in, std::size_t out) {
  const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(rows);
#pragma omp parallel for schedule(static) if (rows * in * out > 32768)
  for (std::ptrdiff_t r = 0; r < n; ++r) {
    Real* dxr = dx + static_cast<std::size_t>(r) * in;
    for (std::size_t o = 0; o < out; ++o) {
      const Real g = dy[static_cast<std::size_t>(r) * out + o];
      const Real* wo = w + o * in;
#pragma omp simd
      for (std::size_t k = 0; k < in; ++k) dxr[k] += g * wo[k];
    }
  }
}

template <typename Real>
void matmul_dw(const Real* dy, const Real* x, Real* dw, std::size_t rows, std::size_t in, std::size_t out) {
  const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(out);
#pragma omp parallel for schedule(static) if (rows * in * out > 32768)
  for (std::ptrdiff_t o = 0; o < n; ++o) {
    Real* dwo = dw + static_cast<std::size_t>(o) * in;
    for (std::size_t r = 0; r < rows; ++r) {
      const Real g = dy[r * out + static_cast<std::size_t>(o)];
      if (g == Real(0)) continue;
      const Real* xr = x + r * in;
#pragma omp simd
      for (std::size_t k = 0; k < in; ++k) dwo[k] += g * xr[k];
    }
  }
}

inline void matmul_wt_q8(const float* x, const std::int8_t* q, const float* scale, float* y, std::size_t rows,
                         std::size_t in, std::size_t out) {
  const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(rows * out);
#pragma omp parallel for schedule(static) if (n * static_cast<std::ptrdiff_t>(in) > 32768)
  for (std::ptrdiff_t idx = 0; idx < n; ++idx) {
    const std::size_t r = static_cast<std::size_t>(idx) / out;
    const std::size_t o = static_cast<std::size_t>(idx) % out;
    const float* xr = x + r * in;
    const std::int8_t* qo = q + o * in;
    float acc = 0;
#pragma omp simd reduction(+ : acc)
    for (std::size_t k = 0; k < in; ++k) acc += xr[k] * static_cast<float>(qo[k]);
    y[idx] = acc * scale[o];
  }
}

}  // namespace par

// Thread count OpenMP will use for parallel regions (1 without OpenMP).
int max_threads();
void set_threads(int n);

}  // namespace indiclm::kernels
