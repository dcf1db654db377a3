#pragma once

// Dense inner-loop kernels. Every kernel exists twice: a serial reference and
// an OpenMP version that partitions output rows across threads. Each output
// element is reduced in the same fixed order in both, so the two agree bitwise
// and results never depend on the thread count.

#include <cstddef>
#include <vector>

#if defined(FAM_HAVE_OPENMP)
#include <omp.h>
#endif

namespace fam::kernels {

// Below this many multiply-adds the parallel kernels run on one thread.
inline constexpr std::size_t kParallelThreshold = 1u << 15;

namespace serial {

// c[r x n] (+)= a[r x k] * b[k x n]
template <class T>
void matmul(const T* a, const T* b, T* c, std::size_t r, std::size_t k, std::size_t n,
            bool accumulate) {
  for (std::size_t i = 0; i < r; ++i) {
    T* ci = c + i * n;
    if (!accumulate) {
      for (std::size_t j = 0; j < n; ++j) ci[j] = T{0};
    }
    const T* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ai[p];
      const T* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// c[k x n] (+)= a[r x k]^T * b[r x n]
template <class T>
void matmul_at_b(const T* a, const T* b, T* c, std::size_t r, std::size_t k, std::size_t n,
                 bool accumulate) {
  if (!accumulate) {
    for (std::size_t i = 0; i < k * n; ++i) c[i] = T{0};
  }
  for (std::size_t p = 0; p < k; ++p) {
    T* cp = c + p * n;
    for (std::size_t i = 0; i < r; ++i) {
      const T av = a[i * k + p];
      const T* bi = b + i * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += av * bi[j];
    }
  }
}

// out[c x r] = in[r x c]^T
template <class T>
void transpose(const T* in, T* out, std::size_t r, std::size_t c) {
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = in[i * c + j];
  }
}

// c[r x n] (+)= a[r x k] * b[n x k]^T
template <class T>
void matmul_a_bt(const T* a, const T* b, T* c, std::size_t r, std::size_t k, std::size_t n,
                 bool accumulate) {
  std::vector<T> bt(k * n);
  transpose(b, bt.data(), n, k);
  matmul(a, bt.data(), c, r, k, n, accumulate);
}

}  // namespace serial

namespace parallel {

template <class T>
void matmul(const T* a, const T* b, T* c, std::size_t r, std::size_t k, std::size_t n,
            bool accumulate) {
  [[maybe_unused]] const bool wide = r * k * n >= kParallelThreshold;
#pragma omp parallel for schedule(static) if (wide)
  for (long t = 0; t < static_cast<long>(r); ++t) {
    serial::matmul(a + t * k, b, c + t * n, 1, k, n, accumulate);
  }
}

template <class T>
void matmul_at_b(const T* a, const T* b, T* c, std::size_t r, std::size_t k, std::size_t n,
                 bool accumulate) {
  [[maybe_unused]] const bool wide = r * k * n >= kParallelThreshold;
#pragma omp parallel for schedule(static) if (wide)
  for (long p = 0; p < static_cast<long>(k); ++p) {
    T* cp = c + p * n;
    if (!accumulate) {
      for (std::size_t j = 0; j < n; ++j) cp[j] = T{0};
    }
    for (std::size_t i = 0; i < r; ++i) {
      const T av = a[i * k + p];
      const T* bi = b + i * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += av * bi[j];
    }
  }
}

template <class T>
void matmul_a_bt(const T* a, const T* b, T* c, std::size_t r, std::size_t k, std::size_t n,
                 bool accumulate) {
  std::vector<T> bt(k * n);
  serial::transpose(b, bt.data(), n, k);
  parallel::matmul(a, bt.data(), c, r, k, n, accumulate);
}

}  // namespace parallel

// Production entry points.
template <class T>
void matmul(const T* a, const T* b, T* c, std::size_t r, std::size_t k, std::size_t n,
            bool accumulate) {
  parallel::matmul(a, b, c, r, k, n, accumulate);
}
template <class T>
void matmul_at_b(const T* a, const T* b, T* c, std::size_t r, std::size_t k, std::size_t n,
                 bool accumulate) {
  parallel::matmul_at_b(a, b, c, r, k, n, accumulate);
}
template <class T>
void matmul_a_bt(const T* a, const T* b, T* c, std::size_t r, std::size_t k, std::size_t n,
                 bool accumulate) {
  parallel::matmul_a_bt(a, b, c, r, k, n, accumulate);
}

inline int max_threads() {
#if defined(FAM_HAVE_OPENMP)
  return omp_get_max_threads();
#else
  return 1;
#endif
}

}  // namespace fam::kernels
