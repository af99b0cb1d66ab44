#include "nsvar/kernels.hpp"

#include <cstring>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace nsvar {

void matmul(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
    std::memset(c, 0, static_cast<size_t>(m * n) * sizeof(double));
    // Inner j loop is contiguous and vectorizes without reassociating the
    // k-sum, so results match the serial reference exactly.
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (!omp_in_parallel() && m * k * n > 32768)
#endif
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t p = 0; p < k; ++p) {
            const double aip = a[i * k + p];
            const double* brow = b + p * n;
            double* crow = c + i * n;
            for (int64_t j = 0; j < n; ++j) {
                crow[j] += aip * brow[j];
            }
        }
    }
}

void matmul_serial(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (int64_t p = 0; p < k; ++p) {
                s += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = s;
        }
    }
}

void transpose(const double* in, double* out, int64_t m, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t j = 0; j < n; ++j) {
            out[j * m + i] = in[i * n + j];
        }
    }
}

int kernel_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

}  // namespace nsvar
