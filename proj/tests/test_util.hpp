#pragma once

#include <cstdint>

#include "eigenkv/linalg.hpp"
#include "eigenkv/rng.hpp"

namespace testutil {

inline eigenkv::Matrix random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed,
                                     double scale = 1.0) {
    eigenkv::Rng rng(seed);
    eigenkv::Matrix m(rows, cols);
    for (double& v : m.data()) v = rng.normal() * scale;
    return m;
}

// Orthonormal dim x k column block via modified Gram-Schmidt on random data.
inline eigenkv::Matrix random_orthonormal(std::size_t dim, std::size_t k, std::uint64_t seed) {
    eigenkv::Rng rng(seed);
    eigenkv::Matrix q(dim, k);
    for (std::size_t j = 0; j < k; ++j) {
        std::vector<double> col(dim);
        for (double& v : col) v = rng.normal();
        for (int pass = 0; pass < 2; ++pass) {
            for (std::size_t p = 0; p < j; ++p) {
                double dot = 0.0;
                for (std::size_t i = 0; i < dim; ++i) dot += col[i] * q(i, p);
                for (std::size_t i = 0; i < dim; ++i) col[i] -= dot * q(i, p);
            }
        }
        double norm = 0.0;
        for (double v : col) norm += v * v;
        norm = std::sqrt(norm);
        for (std::size_t i = 0; i < dim; ++i) q(i, j) = col[i] / norm;
    }
    return q;
}

inline double rel_frobenius_error(const eigenkv::Matrix& approx, const eigenkv::Matrix& exact) {
    return eigenkv::frobenius_norm(eigenkv::sub(approx, exact)) / eigenkv::frobenius_norm(exact);
}

}  // namespace testutil
