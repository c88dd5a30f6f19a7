#include "blas.hpp"

#include <dlfcn.h>
#include <stdlib.h>

#include <cstddef>
#include <mutex>
#include <vector>

namespace salt::detail {
namespace {

// cblas constants
constexpr int kRowMajor = 101;
constexpr int kNoTrans = 111;
constexpr int kTrans = 112;

using cblas_dgemm_fn = void (*)(int, int, int, int, int, int, double, const double*, int,
                                const double*, int, double, double*, int);

cblas_dgemm_fn load_openblas() {
  // The dynamic-arch core type is chosen in an ELF constructor when the
  // library loads, so the environment has to be set before dlopen, not in
  // main(). Virtualized CPUs are often misdetected (falling back to a slow
  // generic kernel); pin an AVX-512 core when the hardware has it.
  if (__builtin_cpu_supports("avx512f")) setenv("OPENBLAS_CORETYPE", "SKYLAKEX", 0);
  setenv("OPENBLAS_NUM_THREADS", "1", 0);
  void* handle = dlopen("libopenblas.so.0", RTLD_NOW | RTLD_LOCAL);
  if (!handle) handle = dlopen("libopenblas.so", RTLD_NOW | RTLD_LOCAL);
  if (!handle) return nullptr;
  if (auto set_threads =
          reinterpret_cast<void (*)(int)>(dlsym(handle, "openblas_set_num_threads")))
    set_threads(1);
  return reinterpret_cast<cblas_dgemm_fn>(dlsym(handle, "cblas_dgemm"));
}

// Blocked fallback; correct but several times slower than a tuned BLAS.
void portable_dgemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
                    double alpha, const double* a, std::size_t lda, const double* b,
                    std::size_t ldb, double beta, double* c, std::size_t ldc) {
  std::vector<double> at, bt;
  const double* A = a;
  const double* B = b;
  std::size_t As = lda, Bs = ldb;
  if (trans_a) {
    at.resize(m * k);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < k; ++p) at[i * k + p] = a[p * lda + i];
    A = at.data();
    As = k;
  }
  if (trans_b) {
    bt.resize(k * n);
    for (std::size_t p = 0; p < k; ++p)
      for (std::size_t j = 0; j < n; ++j) bt[p * n + j] = b[j * ldb + p];
    B = bt.data();
    Bs = n;
  }
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * ldc;
    if (beta == 0.0)
      for (std::size_t j = 0; j < n; ++j) ci[j] = 0.0;
    else if (beta != 1.0)
      for (std::size_t j = 0; j < n; ++j) ci[j] *= beta;
    for (std::size_t p = 0; p < k; ++p) {
      double av = alpha * A[i * As + p];
      const double* bp = B + p * Bs;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

cblas_dgemm_fn cblas_impl = nullptr;
std::once_flag init_flag;

void init_backend() { cblas_impl = load_openblas(); }

}  // namespace

void dgemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
           double alpha, const double* a, std::size_t lda, const double* b, std::size_t ldb,
           double beta, double* c, std::size_t ldc) {
  std::call_once(init_flag, init_backend);
  if (cblas_impl) {
    cblas_impl(kRowMajor, trans_a ? kTrans : kNoTrans, trans_b ? kTrans : kNoTrans,
               static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, a,
               static_cast<int>(lda), b, static_cast<int>(ldb), beta, c, static_cast<int>(ldc));
    return;
  }
  portable_dgemm(trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

const char* dgemm_backend() {
  std::call_once(init_flag, init_backend);
  return cblas_impl ? "openblas" : "portable";
}

}  // namespace salt::detail
