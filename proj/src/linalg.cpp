#include "eigenkv/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace eigenkv {

namespace {

void check_mul_shapes(std::size_t a_cols, std::size_t b_rows, const char* what) {
    if (a_cols != b_rows) {
        throw std::invalid_argument(std::string(what) + ": inner dimensions differ (" +
                                    std::to_string(a_cols) + " vs " + std::to_string(b_rows) + ")");
    }
}

std::string shape_str(const Matrix& a) {
    return std::to_string(a.rows()) + "x" + std::to_string(a.cols());
}

}  // namespace

Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

Matrix matmul(const Matrix& a, const Matrix& b, MacCounter* counter) {
    check_mul_shapes(a.cols(), b.rows(), "matmul");
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    Matrix c(m, n);
    if (counter) counter->macs += static_cast<std::uint64_t>(m) * k * n;
    // i-k-j order keeps the b accesses contiguous; each output row is owned
    // by one thread so the accumulation order per element is fixed.
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(m); ++ii) {
        const auto i = static_cast<std::size_t>(ii);
        double* crow = c.row(i);
        const double* arow = a.row(i);
        for (std::size_t l = 0; l < k; ++l) {
            const double aval = arow[l];
            if (aval == 0.0) continue;
            const double* brow = b.row(l);
            for (std::size_t j = 0; j < n; ++j) crow[j] += aval * brow[j];
        }
    }
    return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b, MacCounter* counter) {
    check_mul_shapes(a.cols(), b.cols(), "matmul_nt");
    const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
    Matrix c(m, n);
    if (counter) counter->macs += static_cast<std::uint64_t>(m) * k * n;
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(m); ++ii) {
        const auto i = static_cast<std::size_t>(ii);
        const double* arow = a.row(i);
        double* crow = c.row(i);
        for (std::size_t j = 0; j < n; ++j) {
            const double* brow = b.row(j);
            double acc = 0.0;
            for (std::size_t l = 0; l < k; ++l) acc += arow[l] * brow[l];
            crow[j] = acc;
        }
    }
    return c;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b, MacCounter* counter) {
    check_mul_shapes(a.rows(), b.rows(), "matmul_tn");
    const std::size_t m = a.cols(), k = a.rows(), n = b.cols();
    Matrix c(m, n);
    if (counter) counter->macs += static_cast<std::uint64_t>(m) * k * n;
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(m); ++ii) {
        const auto i = static_cast<std::size_t>(ii);
        double* crow = c.row(i);
        for (std::size_t l = 0; l < k; ++l) {
            const double aval = a(l, i);
            if (aval == 0.0) continue;
            const double* brow = b.row(l);
            for (std::size_t j = 0; j < n; ++j) crow[j] += aval * brow[j];
        }
    }
    return c;
}

Matrix transpose(const Matrix& a) {
    Matrix t(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
    return t;
}

Matrix add(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw std::invalid_argument("add: shape mismatch");
    Matrix c = a;
    for (std::size_t i = 0; i < c.size(); ++i) c.data()[i] += b.data()[i];
    return c;
}

Matrix sub(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw std::invalid_argument("sub: shape mismatch");
    Matrix c = a;
    for (std::size_t i = 0; i < c.size(); ++i) c.data()[i] -= b.data()[i];
    return c;
}

Matrix scale(const Matrix& a, double s) {
    Matrix c = a;
    for (double& v : c.data()) v *= s;
    return c;
}

void append_rows(Matrix& dst, const Matrix& src) {
    if (src.rows() == 0) return;
    if (dst.empty()) {
        dst = src;
        return;
    }
    if (dst.cols() != src.cols()) {
        throw std::invalid_argument("append_rows: column mismatch " +
                                    std::to_string(dst.cols()) + " vs " +
                                    std::to_string(src.cols()));
    }
    Matrix grown(dst.rows() + src.rows(), dst.cols());
    std::copy(dst.data().begin(), dst.data().end(), grown.data().begin());
    std::copy(src.data().begin(), src.data().end(),
              grown.data().begin() + static_cast<std::ptrdiff_t>(dst.size()));
    dst = std::move(grown);
}

double frobenius_norm(const Matrix& a) {
    // Per-row partial sums combined serially: the result does not depend on
    // the number of threads.
    std::vector<double> partial(a.rows(), 0.0);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(a.rows()); ++ii) {
        const auto i = static_cast<std::size_t>(ii);
        const double* r = a.row(i);
        double acc = 0.0;
        for (std::size_t j = 0; j < a.cols(); ++j) acc += r[j] * r[j];
        partial[i] = acc;
    }
    double total = 0.0;
    for (double p : partial) total += p;
    return std::sqrt(total);
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw std::invalid_argument("max_abs_diff: shape mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    return m;
}

double max_abs(const Matrix& a) {
    double m = 0.0;
    for (double v : a.data()) m = std::max(m, std::abs(v));
    return m;
}

bool all_finite(const Matrix& a) {
    for (double v : a.data())
        if (!std::isfinite(v)) return false;
    return true;
}

Matrix softmax_rows(const Matrix& a) {
    Matrix out(a.rows(), a.cols());
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(a.rows()); ++ii) {
        const auto i = static_cast<std::size_t>(ii);
        const double* src = a.row(i);
        double* dst = out.row(i);
        double mx = src[0];
        for (std::size_t j = 1; j < a.cols(); ++j) mx = std::max(mx, src[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < a.cols(); ++j) {
            dst[j] = std::exp(src[j] - mx);
            sum += dst[j];
        }
        const double inv = 1.0 / sum;
        for (std::size_t j = 0; j < a.cols(); ++j) dst[j] *= inv;
    }
    return out;
}

namespace {

// One-sided Jacobi on the columns of w, with w stored transposed so each
// column is a contiguous row of `cols`. Rotations run in a fixed (p, q)
// sweep order; only the element-wise application is parallelized, so the
// result is identical for any thread count.
struct JacobiState {
    Matrix cols;  // n x m, row j = column j of the input
    Matrix vt;    // n x n, row j = column j of the accumulated V
};

constexpr double kJacobiTol = 1e-14;
// Squared-norm deflation threshold relative to the total squared mass.
// Columns below it carry singular values under 1e-14 * ||a||_F, beneath the
// deflation cutoff applied when the left factor is assembled.
constexpr double kJacobiDead = 1e-28;
constexpr int kJacobiMaxSweeps = 64;

JacobiState one_sided_jacobi(const Matrix& a_tall, const std::string& orig_shape) {
    const std::size_t m = a_tall.rows(), n = a_tall.cols();
    JacobiState st{transpose(a_tall), identity(n)};

    // Exactly dependent columns (duplicated input rows) cancel toward zero
    // during the sweep; once their squared norm underflows, the relative
    // criterion below can never pass. Freeze such columns instead: their
    // directions are rebuilt by the orthonormal completion downstream. The
    // total squared mass is rotation-invariant, so it is computed once.
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
        const double* r = st.cols.row(j);
        for (std::size_t i = 0; i < m; ++i) total += r[i] * r[i];
    }
    const double dead = total * kJacobiDead;

    bool converged = false;
    for (int sweep = 0; sweep < kJacobiMaxSweeps && !converged; ++sweep) {
        converged = true;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                double* wp = st.cols.row(p);
                double* wq = st.cols.row(q);
                double alpha = 0.0, beta = 0.0, gamma = 0.0;
                for (std::size_t i = 0; i < m; ++i) {
                    alpha += wp[i] * wp[i];
                    beta += wq[i] * wq[i];
                    gamma += wp[i] * wq[i];
                }
                if (alpha <= dead || beta <= dead) continue;
                if (gamma == 0.0) continue;
                if (std::abs(gamma) <= kJacobiTol * std::sqrt(alpha * beta)) continue;
                converged = false;

                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;

#pragma omp parallel for schedule(static)
                for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(m); ++ii) {
                    const auto i = static_cast<std::size_t>(ii);
                    const double vp = wp[i], vq = wq[i];
                    wp[i] = c * vp - s * vq;
                    wq[i] = s * vp + c * vq;
                }
                double* rp = st.vt.row(p);
                double* rq = st.vt.row(q);
                for (std::size_t i = 0; i < n; ++i) {
                    const double vp = rp[i], vq = rq[i];
                    rp[i] = c * vp - s * vq;
                    rq[i] = s * vp + c * vq;
                }
            }
        }
    }
    if (!converged) {
        throw std::runtime_error("svd: Jacobi iteration did not converge for " + orig_shape +
                                 " matrix after " + std::to_string(kJacobiMaxSweeps) + " sweeps");
    }
    return st;
}

std::vector<std::size_t> order_by_norm_desc(const Matrix& cols, std::vector<double>& sigma_out) {
    const std::size_t n = cols.rows(), m = cols.cols();
    sigma_out.assign(n, 0.0);
    for (std::size_t j = 0; j < n; ++j) {
        const double* r = cols.row(j);
        double acc = 0.0;
        for (std::size_t i = 0; i < m; ++i) acc += r[i] * r[i];
        sigma_out[j] = std::sqrt(acc);
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return sigma_out[x] > sigma_out[y]; });
    std::vector<double> sorted(n);
    for (std::size_t j = 0; j < n; ++j) sorted[j] = sigma_out[order[j]];
    sigma_out = std::move(sorted);
    return order;
}

// Greedy deterministic completion: orthonormalize standard basis vectors
// against the rows already present in `rows` starting at row `have`.
void complete_orthonormal_rows(Matrix& rows, std::size_t have) {
    const std::size_t want = rows.rows(), dim = rows.cols();
    std::size_t next = have;
    std::vector<double> cand(dim);
    for (std::size_t e = 0; e < dim && next < want; ++e) {
        std::fill(cand.begin(), cand.end(), 0.0);
        cand[e] = 1.0;
        for (int pass = 0; pass < 2; ++pass) {
            for (std::size_t j = 0; j < next; ++j) {
                const double* r = rows.row(j);
                double dot = 0.0;
                for (std::size_t i = 0; i < dim; ++i) dot += cand[i] * r[i];
                for (std::size_t i = 0; i < dim; ++i) cand[i] -= dot * r[i];
            }
        }
        double norm = 0.0;
        for (double v : cand) norm += v * v;
        norm = std::sqrt(norm);
        if (norm < 1e-4) continue;
        double* dst = rows.row(next);
        for (std::size_t i = 0; i < dim; ++i) dst[i] = cand[i] / norm;
        ++next;
    }
    if (next < want)
        throw std::runtime_error("svd: orthonormal completion failed");
}

void validate_svd_input(const Matrix& a) {
    if (a.empty()) throw std::invalid_argument("svd: empty matrix");
    if (!all_finite(a)) throw std::invalid_argument("svd: non-finite entries");
}

// Left singular vectors with largest-magnitude entry non-negative; paired
// sign flips keep u * s * vt unchanged.
void canonicalize_signs(Matrix& u, Matrix& vt) {
    const std::size_t m = u.rows(), n = vt.rows();
    const std::size_t paired = std::min(m, n);
    for (std::size_t j = 0; j < u.cols(); ++j) {
        std::size_t arg = 0;
        double best = -1.0;
        for (std::size_t i = 0; i < m; ++i) {
            const double v = std::abs(u(i, j));
            if (v > best) {
                best = v;
                arg = i;
            }
        }
        if (u(arg, j) < 0.0) {
            for (std::size_t i = 0; i < m; ++i) u(i, j) = -u(i, j);
            if (j < paired)
                for (std::size_t i = 0; i < vt.cols(); ++i) vt(j, i) = -vt(j, i);
        }
    }
    for (std::size_t j = paired; j < n; ++j) {
        std::size_t arg = 0;
        double best = -1.0;
        for (std::size_t i = 0; i < vt.cols(); ++i) {
            const double v = std::abs(vt(j, i));
            if (v > best) {
                best = v;
                arg = i;
            }
        }
        if (vt(j, arg) < 0.0)
            for (std::size_t i = 0; i < vt.cols(); ++i) vt(j, i) = -vt(j, i);
    }
}

// Factorization of a tall (rows >= cols) matrix: full left factor with
// completed columns for tiny singular values, right factor as vt.
SvdResult svd_tall(const Matrix& a, const std::string& orig_shape) {
    const std::size_t m = a.rows(), n = a.cols();
    JacobiState st = one_sided_jacobi(a, orig_shape);

    std::vector<double> sigma;
    const std::vector<std::size_t> order = order_by_norm_desc(st.cols, sigma);
    const double sigma_max = sigma.empty() ? 0.0 : sigma[0];
    const double tiny = sigma_max * 1e-13;

    Matrix ut(m, m);  // row j = j-th left singular vector
    std::size_t have = 0;
    for (std::size_t j = 0; j < n; ++j) {
        if (sigma[j] <= tiny || sigma[j] == 0.0) break;
        const double* src = st.cols.row(order[j]);
        double* dst = ut.row(j);
        const double inv = 1.0 / sigma[j];
        for (std::size_t i = 0; i < m; ++i) dst[i] = src[i] * inv;
        ++have;
    }
    complete_orthonormal_rows(ut, have);

    Matrix vt(n, n);
    for (std::size_t j = 0; j < n; ++j) {
        const double* src = st.vt.row(order[j]);
        double* dst = vt.row(j);
        for (std::size_t i = 0; i < n; ++i) dst[i] = src[i];
    }

    SvdResult out{transpose(ut), std::move(sigma), std::move(vt)};
    canonicalize_signs(out.u, out.vt);
    return out;
}

}  // namespace

SvdResult svd(const Matrix& a) {
    validate_svd_input(a);
    const std::string shape = shape_str(a);
    if (a.rows() >= a.cols()) return svd_tall(a, shape);
    // Wide case via the transposed problem: a = (u_t s vt_t)^T.
    SvdResult t = svd_tall(transpose(a), shape);
    SvdResult out;
    out.singular_values = std::move(t.singular_values);
    out.u = transpose(t.vt);
    out.vt = transpose(t.u);
    canonicalize_signs(out.u, out.vt);
    return out;
}

RightSingularBasis right_singular_basis(const Matrix& a) {
    validate_svd_input(a);
    const std::string shape = shape_str(a);
    if (a.rows() >= a.cols()) {
        const std::size_t n = a.cols();
        JacobiState st = one_sided_jacobi(a, shape);
        std::vector<double> sigma;
        const std::vector<std::size_t> order = order_by_norm_desc(st.cols, sigma);
        Matrix v(n, n);
        for (std::size_t j = 0; j < n; ++j) {
            const double* wcol = st.cols.row(order[j]);   // sigma_j * u_j
            const double* vcol = st.vt.row(order[j]);
            // Same sign rule as svd(): largest-magnitude entry of u_j, with
            // w = sigma * u sharing its argmax.
            std::size_t arg = 0;
            double best = -1.0;
            for (std::size_t i = 0; i < a.rows(); ++i) {
                const double val = std::abs(wcol[i]);
                if (val > best) {
                    best = val;
                    arg = i;
                }
            }
            const double flip = (sigma[j] > 0.0 && wcol[arg] < 0.0) ? -1.0 : 1.0;
            for (std::size_t i = 0; i < n; ++i) v(i, j) = flip * vcol[i];
        }
        return {std::move(sigma), std::move(v)};
    }
    // Wide input: right singular vectors of a are left singular vectors of a^T.
    SvdResult t = svd_tall(transpose(a), shape);
    const std::size_t k = t.singular_values.size();
    Matrix v(a.cols(), k);
    for (std::size_t j = 0; j < k; ++j)
        for (std::size_t i = 0; i < a.cols(); ++i) v(i, j) = t.u(i, j);
    // Re-anchor signs on the left vectors of a itself (rows of t.vt).
    for (std::size_t j = 0; j < k; ++j) {
        if (t.singular_values[j] <= 0.0) break;
        std::size_t arg = 0;
        double best = -1.0;
        for (std::size_t i = 0; i < a.rows(); ++i) {
            const double val = std::abs(t.vt(j, i));
            if (val > best) {
                best = val;
                arg = i;
            }
        }
        if (t.vt(j, arg) < 0.0)
            for (std::size_t i = 0; i < a.cols(); ++i) v(i, j) = -v(i, j);
    }
    return {std::move(t.singular_values), std::move(v)};
}

Matrix low_rank_reconstruct(const SvdResult& s, std::size_t k) {
    const std::size_t m = s.u.rows(), n = s.vt.cols();
    if (k < 1 || k > s.singular_values.size())
        throw std::invalid_argument("low_rank_reconstruct: k out of range [1, " +
                                    std::to_string(s.singular_values.size()) + "]");
    Matrix out(m, n);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(m); ++ii) {
        const auto i = static_cast<std::size_t>(ii);
        double* dst = out.row(i);
        for (std::size_t t = 0; t < k; ++t) {
            const double w = s.singular_values[t] * s.u(i, t);
            const double* vrow = s.vt.row(t);
            for (std::size_t j = 0; j < n; ++j) dst[j] += w * vrow[j];
        }
    }
    return out;
}

namespace ref {

Matrix matmul(const Matrix& a, const Matrix& b) {
    check_mul_shapes(a.cols(), b.rows(), "ref::matmul");
    Matrix c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t l = 0; l < a.cols(); ++l) {
            const double aval = a(i, l);
            if (aval == 0.0) continue;
            for (std::size_t j = 0; j < b.cols(); ++j) c(i, j) += aval * b(l, j);
        }
    return c;
}

Matrix softmax_rows(const Matrix& a) {
    Matrix out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double mx = a(i, 0);
        for (std::size_t j = 1; j < a.cols(); ++j) mx = std::max(mx, a(i, j));
        double sum = 0.0;
        for (std::size_t j = 0; j < a.cols(); ++j) {
            out(i, j) = std::exp(a(i, j) - mx);
            sum += out(i, j);
        }
        for (std::size_t j = 0; j < a.cols(); ++j) out(i, j) /= sum;
    }
    return out;
}

double frobenius_norm(const Matrix& a) {
    double acc = 0.0;
    for (double v : a.data()) acc += v * v;
    return std::sqrt(acc);
}

}  // namespace ref

}  // namespace eigenkv
