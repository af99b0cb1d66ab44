#pragma once

#include <cstdint>

namespace nsvar {

// Dense kernels. The OpenMP variants partition output rows, so each element is
// accumulated by exactly one thread in a fixed k order: results are identical
// for any thread count, and bit-identical across repeated calls.

// c[m x n] = a[m x k] * b[k x n], ikj order, OpenMP over rows.
void matmul(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n);

// Naive triple-loop (ijk) serial reference.
void matmul_serial(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n);

// out[n x m] = in[m x n]^T
void transpose(const double* in, double* out, int64_t m, int64_t n);

// How many threads the parallel kernels would use right now.
int kernel_threads();

}  // namespace nsvar
