// Compares the OpenMP matmul kernel against the serial triple-loop reference:
// same results, different wall clock.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "nsvar/kernels.hpp"
#include "nsvar/rng.hpp"

using namespace nsvar;

namespace {

double now_sec() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

double time_best_of(int repeats, const std::function<void()>& fn) {
    double best = 1e300;
    for (int r = 0; r < repeats; ++r) {
        double t0 = now_sec();
        fn();
        best = std::min(best, now_sec() - t0);
    }
    return best;
}

}  // namespace

int main() {
    std::printf("threads: %d\n", kernel_threads());
    std::printf("%6s %6s %6s | %10s %10s %8s | %s\n", "m", "k", "n", "serial_ms", "omp_ms",
                "speedup", "max_rel_err");

    Rng rng(1);
    for (int64_t dim : {64, 128, 256, 512}) {
        int64_t m = dim, k = dim, n = dim;
        std::vector<double> a(static_cast<size_t>(m * k)), b(static_cast<size_t>(k * n));
        for (double& v : a) v = rng.gaussian();
        for (double& v : b) v = rng.gaussian();
        std::vector<double> c1(static_cast<size_t>(m * n)), c2(static_cast<size_t>(m * n));

        double serial = time_best_of(3, [&] { matmul_serial(a.data(), b.data(), c1.data(), m, k, n); });
        double omp = time_best_of(3, [&] { matmul(a.data(), b.data(), c2.data(), m, k, n); });

        double err = 0.0;
        for (size_t i = 0; i < c1.size(); ++i) {
            double denom = std::max(1.0, std::fabs(c1[i]));
            err = std::max(err, std::fabs(c1[i] - c2[i]) / denom);
        }
        std::printf("%6lld %6lld %6lld | %10.2f %10.2f %8.2fx | %.3g\n",
                    static_cast<long long>(m), static_cast<long long>(k),
                    static_cast<long long>(n), serial * 1e3, omp * 1e3, serial / omp, err);
    }
    return 0;
}
