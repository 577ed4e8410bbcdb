// Times the parallel matrix kernels against their serial reference
// implementations and checks they agree while at it. Sizes are small enough
// for a laptop; pass a scale factor to grow them.

#include <chrono>
#include <cstdlib>
#include <iomanip>
#include <iostream>
#include <string>

#include "eigenkv/linalg.hpp"
#include "eigenkv/rng.hpp"

using eigenkv::Matrix;

namespace {

Matrix random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed) {
    eigenkv::Rng rng(seed);
    Matrix m(rows, cols);
    for (auto& x : m.data()) x = rng.normal();
    return m;
}

template <typename F>
double time_ms(F&& f, int reps) {
    using clock = std::chrono::steady_clock;
    // one warm-up call, then the timed block
    f();
    const auto t0 = clock::now();
    for (int i = 0; i < reps; ++i) f();
    const auto t1 = clock::now();
    return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

void report(const std::string& name, double serial_ms, double parallel_ms,
            double diff) {
    std::cout << std::left << std::setw(22) << name << std::right << std::fixed
              << std::setprecision(3) << std::setw(10) << serial_ms << " ms"
              << std::setw(10) << parallel_ms << " ms" << std::setprecision(2)
              << std::setw(9) << serial_ms / parallel_ms << "x   max|diff| "
              << std::scientific << std::setprecision(1) << diff << '\n';
}

}  // namespace

int main(int argc, char** argv) {
    std::size_t scale = 1;
    if (argc > 1) scale = std::strtoull(argv[1], nullptr, 10);
    if (scale == 0) scale = 1;

    const std::size_t n = 192 * scale;
    const int reps = 5;

    const Matrix a = random_matrix(n, n, 1);
    const Matrix b = random_matrix(n, n, 2);
    const Matrix wide = random_matrix(n, 4 * n, 3);

    std::cout << "n = " << n << ", " << reps << " reps each\n";
    std::cout << std::left << std::setw(22) << "kernel" << std::right
              << std::setw(13) << "serial" << std::setw(13) << "parallel"
              << std::setw(10) << "speedup" << '\n';

    {
        const auto serial = time_ms([&] { eigenkv::ref::matmul(a, b); }, reps);
        const auto parallel = time_ms([&] { eigenkv::matmul(a, b); }, reps);
        const double diff =
            eigenkv::max_abs_diff(eigenkv::ref::matmul(a, b), eigenkv::matmul(a, b));
        report("matmul", serial, parallel, diff);
    }
    {
        const auto serial = time_ms([&] { eigenkv::ref::softmax_rows(wide); }, reps);
        const auto parallel = time_ms([&] { eigenkv::softmax_rows(wide); }, reps);
        const double diff = eigenkv::max_abs_diff(eigenkv::ref::softmax_rows(wide),
                                                  eigenkv::softmax_rows(wide));
        report("softmax_rows", serial, parallel, diff);
    }
    {
        const auto serial = time_ms([&] { eigenkv::ref::frobenius_norm(wide); }, reps);
        const auto parallel = time_ms([&] { eigenkv::frobenius_norm(wide); }, reps);
        const double diff = std::abs(eigenkv::ref::frobenius_norm(wide) -
                                     eigenkv::frobenius_norm(wide));
        report("frobenius_norm", serial, parallel, diff);
    }
    return 0;
}
