#pragma once

// Dense inner loops shared by the tensor operations.
//
// Every output element is accumulated along the reduction index in strictly
// increasing order with a single running sum, starting from the value already
// stored in C. Tiling only changes which elements are computed together, so
// a row's result never depends on how many other rows share the call.

#include <algorithm>
#include <vector>

#ifdef __AVX512F__
#include <immintrin.h>
#endif
#include "comet/tensor.hpp"

namespace comet::kernels {

/// C(i, j) += sum_p A(i, p) * B(p, j) where
///   A(i, p) = a[a_offsets[p] + i * a_row_stride]
///   B(p, j) = b[b_offsets[p] + j]           (each B row contiguous)
///   C(i, j) = c[i * c_row_stride + j]
template <typename Scalar>
struct Gemm {
  Index m = 0, n = 0, k = 0;
  const Scalar* a = nullptr;
  Index a_row_stride = 0;
  const Index* a_offsets = nullptr;
  const Scalar* b = nullptr;
  const Index* b_offsets = nullptr;
  Scalar* c = nullptr;
  Index c_row_stride = 0;
};

namespace detail {

template <typename Scalar, int MR, int NR>
inline void gemm_tile(const Gemm<Scalar>& g, Index i0, Index j0, Index p0, Index p1) {
  Scalar acc[MR][NR];
  for (int i = 0; i < MR; ++i) {
    const Scalar* crow = g.c + (i0 + i) * g.c_row_stride + j0;
    for (int j = 0; j < NR; ++j) acc[i][j] = crow[j];
  }
  const Scalar* a = g.a + i0 * g.a_row_stride;
  for (Index p = p0; p < p1; ++p) {
    const Scalar* bp = g.b + g.b_offsets[p] + j0;
    const Scalar* ap = a + g.a_offsets[p];
    for (int i = 0; i < MR; ++i) {
      const Scalar av = ap[i * g.a_row_stride];
      for (int j = 0; j < NR; ++j) acc[i][j] = fused_madd(av, bp[j], acc[i][j]);
    }
  }
  for (int i = 0; i < MR; ++i) {
    Scalar* crow = g.c + (i0 + i) * g.c_row_stride + j0;
    for (int j = 0; j < NR; ++j) crow[j] = acc[i][j];
  }
}

template <typename Scalar, int NR>
inline void gemm_panel(const Gemm<Scalar>& g, Index j0, Index p0, Index p1) {
  Index i0 = 0;
  for (; i0 + 8 <= g.m; i0 += 8) gemm_tile<Scalar, 8, NR>(g, i0, j0, p0, p1);
  for (; i0 + 2 <= g.m; i0 += 2) gemm_tile<Scalar, 2, NR>(g, i0, j0, p0, p1);
  for (; i0 < g.m; ++i0) gemm_tile<Scalar, 1, NR>(g, i0, j0, p0, p1);
}

template <typename Scalar>
void gemm_generic(const Gemm<Scalar>& g, Index p0, Index p1) {
  Index j0 = 0;
  for (; j0 + 16 <= g.n; j0 += 16) gemm_panel<Scalar, 16>(g, j0, p0, p1);
  for (; j0 + 4 <= g.n; j0 += 4) gemm_panel<Scalar, 4>(g, j0, p0, p1);
  for (; j0 < g.n; ++j0) gemm_panel<Scalar, 1>(g, j0, p0, p1);
}

#ifdef __AVX512F__

template <typename Scalar>
struct Simd;

template <>
struct Simd<float> {
  using V = __m512;
  using Mask = __mmask16;
  static constexpr int lanes = 16;
  static V load(const float* p) { return _mm512_loadu_ps(p); }
  static V load(Mask m, const float* p) { return _mm512_maskz_loadu_ps(m, p); }
  static void store(float* p, V v) { _mm512_storeu_ps(p, v); }
  static void store(Mask m, float* p, V v) { _mm512_mask_storeu_ps(p, m, v); }
  static V broadcast(float x) { return _mm512_set1_ps(x); }
  static V fmadd(V a, V b, V c) { return _mm512_fmadd_ps(a, b, c); }
  static Mask first(Index n) { return static_cast<Mask>((1u << n) - 1u); }
};

template <>
struct Simd<double> {
  using V = __m512d;
  using Mask = __mmask8;
  static constexpr int lanes = 8;
  static V load(const double* p) { return _mm512_loadu_pd(p); }
  static V load(Mask m, const double* p) { return _mm512_maskz_loadu_pd(m, p); }
  static void store(double* p, V v) { _mm512_storeu_pd(p, v); }
  static void store(Mask m, double* p, V v) { _mm512_mask_storeu_pd(p, m, v); }
  static V broadcast(double x) { return _mm512_set1_pd(x); }
  static V fmadd(V a, V b, V c) { return _mm512_fmadd_pd(a, b, c); }
  static Mask first(Index n) { return static_cast<Mask>((1u << n) - 1u); }
};

/// MR rows by NV vectors; with `masked`, only the lanes in `tail` of the last
/// vector are read and written.
template <typename Scalar, int MR, int NV, bool masked>
inline void simd_tile(const Gemm<Scalar>& g, Index i0, Index j0, Index p0, Index p1,
                      typename Simd<Scalar>::Mask tail) {
  using T = Simd<Scalar>;
  constexpr int L = T::lanes;
  typename T::V acc[MR][NV];
  for (int i = 0; i < MR; ++i) {
    const Scalar* crow = g.c + (i0 + i) * g.c_row_stride + j0;
    for (int v = 0; v < NV; ++v)
      acc[i][v] = (masked && v == NV - 1) ? T::load(tail, crow + v * L) : T::load(crow + v * L);
  }
  const Scalar* a = g.a + i0 * g.a_row_stride;
  for (Index p = p0; p < p1; ++p) {
    const Scalar* bp = g.b + g.b_offsets[p] + j0;
    const Scalar* ap = a + g.a_offsets[p];
    typename T::V bv[NV];
    for (int v = 0; v < NV; ++v)
      bv[v] = (masked && v == NV - 1) ? T::load(tail, bp + v * L) : T::load(bp + v * L);
    for (int i = 0; i < MR; ++i) {
      const typename T::V av = T::broadcast(ap[i * g.a_row_stride]);
      for (int v = 0; v < NV; ++v) acc[i][v] = T::fmadd(av, bv[v], acc[i][v]);
    }
  }
  for (int i = 0; i < MR; ++i) {
    Scalar* crow = g.c + (i0 + i) * g.c_row_stride + j0;
    for (int v = 0; v < NV; ++v) {
      if (masked && v == NV - 1)
        T::store(tail, crow + v * L, acc[i][v]);
      else
        T::store(crow + v * L, acc[i][v]);
    }
  }
}

/// One block of MR rows across every column: the rows' A values stay in L1
/// while B streams past.
template <typename Scalar, int MR>
inline void simd_rows(const Gemm<Scalar>& g, Index i0, Index p0, Index p1) {
  using T = Simd<Scalar>;
  constexpr int L = T::lanes;
  Index j0 = 0;
  for (; j0 + L <= g.n; j0 += L) simd_tile<Scalar, MR, 1, false>(g, i0, j0, p0, p1, 0);
  if (j0 < g.n) simd_tile<Scalar, MR, 1, true>(g, i0, j0, p0, p1, T::first(g.n - j0));
}

template <typename Scalar>
void gemm_simd(const Gemm<Scalar>& g, Index p0, Index p1) {
  Index i0 = 0;
  for (; i0 + 8 <= g.m; i0 += 8) simd_rows<Scalar, 8>(g, i0, p0, p1);
  for (; i0 + 4 <= g.m; i0 += 4) simd_rows<Scalar, 4>(g, i0, p0, p1);
  for (; i0 < g.m; ++i0) simd_rows<Scalar, 1>(g, i0, p0, p1);
}

#endif  // __AVX512F__

}  // namespace detail

/// Elements per 512-bit vector register.
template <typename Scalar>
inline constexpr int kLanes = 64 / static_cast<int>(sizeof(Scalar));

template <typename Scalar>
void gemm(const Gemm<Scalar>& g) {
  // Reduction blocks are visited in increasing order, so each element still
  // sees one sequential sum; blocking only bounds the working set.
  constexpr Index kBlock = 256;
  constexpr Index nBlock = 512;
  for (Index p0 = 0; p0 < g.k; p0 += kBlock) {
    const Index p1 = std::min(g.k, p0 + kBlock);
    for (Index j0 = 0; j0 < g.n; j0 += nBlock) {
      Gemm<Scalar> part = g;
      part.n = std::min(nBlock, g.n - j0);
      part.b = g.b + j0;
      part.c = g.c + j0;
#ifdef __AVX512F__
      detail::gemm_simd(part, p0, p1);
#else
      detail::gemm_generic(part, p0, p1);
#endif
    }
  }
}

/// dst[j * rows + i] (+)= src[i * cols + j], in cache-sized blocks.
template <typename Scalar, bool accumulate = false>
void transpose(Index rows, Index cols, const Scalar* src, Scalar* dst) {
  constexpr Index kTile = 16;
  for (Index i0 = 0; i0 < rows; i0 += kTile)
    for (Index j0 = 0; j0 < cols; j0 += kTile) {
      const Index i1 = std::min(rows, i0 + kTile);
      const Index j1 = std::min(cols, j0 + kTile);
      for (Index j = j0; j < j1; ++j)
        for (Index i = i0; i < i1; ++i) {
          if constexpr (accumulate)
            dst[j * rows + i] += src[i * cols + j];
          else
            dst[j * rows + i] = src[i * cols + j];
        }
    }
}

/// Offsets 0, step, 2*step, ... (count entries).
inline std::vector<Index> strided_offsets(Index count, Index step, Index start = 0) {
  std::vector<Index> out(static_cast<std::size_t>(count));
  for (Index p = 0; p < count; ++p) out[static_cast<std::size_t>(p)] = start + p * step;
  return out;
}

/// y[0..n) += alpha * x[0..n)
template <typename Scalar>
inline void axpy(Index n, Scalar alpha, const Scalar* x, Scalar* y) {
  for (Index t = 0; t < n; ++t) y[t] = fused_madd(alpha, x[t], y[t]);
}

}  // namespace comet::kernels
