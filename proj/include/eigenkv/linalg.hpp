#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace eigenkv {

// Counts multiply-accumulate operations performed by the matrix kernels.
// Attention code threads one of these through the products that belong to
// the generation-phase accounting convention (projections and cache dot
// products); everything else runs uncounted.
struct MacCounter {
    std::uint64_t macs = 0;
};

// Dense row-major matrix of doubles. Value semantics throughout; all
// kernels treat inputs as immutable and return fresh matrices.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

    double* row(std::size_t i) { return data_.data() + i * cols_; }
    const double* row(std::size_t i) const { return data_.data() + i * cols_; }

    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }

    bool operator==(const Matrix& other) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

Matrix identity(std::size_t n);

// c = a * b
Matrix matmul(const Matrix& a, const Matrix& b, MacCounter* counter = nullptr);
// c = a * b^T
Matrix matmul_nt(const Matrix& a, const Matrix& b, MacCounter* counter = nullptr);
// c = a^T * b
Matrix matmul_tn(const Matrix& a, const Matrix& b, MacCounter* counter = nullptr);

Matrix transpose(const Matrix& a);
Matrix add(const Matrix& a, const Matrix& b);
Matrix sub(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& a, double s);

// Grows dst by the rows of src (column counts must match; appending to an
// empty matrix adopts src's shape).
void append_rows(Matrix& dst, const Matrix& src);

double frobenius_norm(const Matrix& a);
double max_abs_diff(const Matrix& a, const Matrix& b);
double max_abs(const Matrix& a);
bool all_finite(const Matrix& a);

// Row-wise softmax, stabilized by subtracting each row's maximum.
Matrix softmax_rows(const Matrix& a);

// Full singular value decomposition a = u * diag(singular_values) * vt.
// u is rows x rows orthogonal, vt is cols x cols orthogonal, and
// singular_values has length min(rows, cols) sorted non-increasing.
// Sign convention: the largest-magnitude entry of each left singular
// vector is non-negative, which makes the factorization deterministic.
struct SvdResult {
    Matrix u;
    std::vector<double> singular_values;
    Matrix vt;
};

SvdResult svd(const Matrix& a);

// Thin right-side decomposition: singular values plus the right singular
// vectors of a (columns of v, cols x min(rows, cols)). Shares the Jacobi
// core and the sign convention with svd() and avoids materializing the
// rows x rows factor, which matters for tall calibration stacks.
struct RightSingularBasis {
    std::vector<double> singular_values;
    Matrix v;
};

RightSingularBasis right_singular_basis(const Matrix& a);

// Sum of the top-k rank-one terms of the decomposition.
Matrix low_rank_reconstruct(const SvdResult& s, std::size_t k);

// Serial reference kernels. These stay deliberately naive so the parallel
// implementations above have an independent baseline; tests compare the
// two and the bench tool times them against each other.
namespace ref {

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix softmax_rows(const Matrix& a);
double frobenius_norm(const Matrix& a);

}  // namespace ref

}  // namespace eigenkv
