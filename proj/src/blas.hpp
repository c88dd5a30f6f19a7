#pragma once

#include <cstddef>

namespace salt::detail {

// C = alpha * op(A) * op(B) + beta * C, row-major.
// op(A) is [m,k], op(B) is [k,n], C is [m,n]; lda/ldb are the leading
// dimensions of the stored (untransposed) arrays.
void dgemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
           double alpha, const double* a, std::size_t lda, const double* b, std::size_t ldb,
           double beta, double* c, std::size_t ldc);

// Which backend dgemm resolved to ("openblas" or "portable").
const char* dgemm_backend();

}  // namespace salt::detail
