#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <random>
#include <vector>

#include "dsl/errors.hpp"

namespace dsl {

using Vector = std::vector<double>;

// Row-major dense matrix, sized for the small problems in this library
// (MLP layers, the (d+2)x(d+2) implicit-function Jacobian, class heads).
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    Vector data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

    double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
};

inline void matvec(const Matrix& m, const Vector& x, Vector& out) {
    if (x.size() != m.cols) throw ShapeMismatch("matvec: vector length does not match matrix columns");
    out.assign(m.rows, 0.0);
    for (std::size_t i = 0; i < m.rows; ++i) {
        const double* row = m.data.data() + i * m.cols;
        double acc = 0.0;
        for (std::size_t j = 0; j < m.cols; ++j) acc += row[j] * x[j];
        out[i] = acc;
    }
}

// out += m^T * y
inline void matvec_transpose_add(const Matrix& m, const Vector& y, Vector& out) {
    if (y.size() != m.rows) throw ShapeMismatch("matvec_transpose_add: vector length does not match matrix rows");
    out.resize(m.cols, 0.0);
    for (std::size_t i = 0; i < m.rows; ++i) {
        const double* row = m.data.data() + i * m.cols;
        const double yi = y[i];
        for (std::size_t j = 0; j < m.cols; ++j) out[j] += row[j] * yi;
    }
}

inline double dot(const Vector& a, const Vector& b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

// LU factorization with partial pivoting; solves square systems of the
// modest sizes used here (d+2 at most a few dozen).
struct LuFactors {
    Matrix lu;
    std::vector<std::size_t> perm;

    static LuFactors factor(const Matrix& a) {
        if (a.rows != a.cols) throw ShapeMismatch("lu: matrix must be square");
        const std::size_t n = a.rows;
        LuFactors f;
        f.lu = a;
        f.perm.resize(n);
        for (std::size_t i = 0; i < n; ++i) f.perm[i] = i;
        for (std::size_t k = 0; k < n; ++k) {
            std::size_t piv = k;
            double best = std::fabs(f.lu(k, k));
            for (std::size_t i = k + 1; i < n; ++i) {
                const double v = std::fabs(f.lu(i, k));
                if (v > best) { best = v; piv = i; }
            }
            if (best == 0.0)
                throw SingularJacobian("lu: exactly singular pivot at column " + std::to_string(k),
                                       std::numeric_limits<double>::infinity());
            if (piv != k) {
                for (std::size_t j = 0; j < n; ++j) std::swap(f.lu(k, j), f.lu(piv, j));
                std::swap(f.perm[k], f.perm[piv]);
            }
            const double inv = 1.0 / f.lu(k, k);
            for (std::size_t i = k + 1; i < n; ++i) {
                const double l = f.lu(i, k) * inv;
                f.lu(i, k) = l;
                for (std::size_t j = k + 1; j < n; ++j) f.lu(i, j) -= l * f.lu(k, j);
            }
        }
        return f;
    }

    Vector solve(const Vector& b) const {
        const std::size_t n = lu.rows;
        if (b.size() != n) throw ShapeMismatch("lu solve: rhs length mismatch");
        Vector x(n);
        for (std::size_t i = 0; i < n; ++i) x[i] = b[perm[i]];
        for (std::size_t i = 1; i < n; ++i) {
            double acc = x[i];
            for (std::size_t j = 0; j < i; ++j) acc -= lu(i, j) * x[j];
            x[i] = acc;
        }
        for (std::size_t ii = n; ii-- > 0;) {
            double acc = x[ii];
            for (std::size_t j = ii + 1; j < n; ++j) acc -= lu(ii, j) * x[j];
            x[ii] = acc / lu(ii, ii);
        }
        return x;
    }
};

inline double inf_norm(const Matrix& a) {
    double best = 0.0;
    for (std::size_t i = 0; i < a.rows; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < a.cols; ++j) s += std::fabs(a(i, j));
        best = std::max(best, s);
    }
    return best;
}

// ||A||_inf * ||A^-1||_inf, with the inverse reconstructed column by column.
// Fine at the (d+2) sizes involved; used only for diagnostics.
inline double condition_estimate_inf(const Matrix& a, const LuFactors& f) {
    const std::size_t n = a.rows;
    Matrix inv(n, n);
    Vector e(n, 0.0);
    for (std::size_t j = 0; j < n; ++j) {
        e.assign(n, 0.0);
        e[j] = 1.0;
        Vector col = f.solve(e);
        for (std::size_t i = 0; i < n; ++i) inv(i, j) = col[i];
    }
    return inf_norm(a) * inf_norm(inv);
}

// Orthonormal matrix via Householder QR of a Gaussian sample, sign-fixed so
// the factorization is unique. rows <= cols gives orthonormal rows,
// rows >= cols orthonormal columns.
inline Matrix random_orthogonal(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
    const bool transposed = rows < cols;
    const std::size_t m = transposed ? cols : rows;
    const std::size_t n = transposed ? rows : cols;

    std::normal_distribution<double> gauss(0.0, 1.0);
    Matrix a(m, n);
    for (double& v : a.data) v = gauss(rng);

    Matrix q(m, m, 0.0);
    for (std::size_t i = 0; i < m; ++i) q(i, i) = 1.0;

    Vector v(m);
    for (std::size_t k = 0; k < n && k + 1 < m; ++k) {
        double norm = 0.0;
        for (std::size_t i = k; i < m; ++i) norm += a(i, k) * a(i, k);
        norm = std::sqrt(norm);
        if (norm == 0.0) continue;
        const double alpha = a(k, k) >= 0.0 ? -norm : norm;
        double vnorm2 = 0.0;
        v[k] = a(k, k) - alpha;
        for (std::size_t i = k + 1; i < m; ++i) v[i] = a(i, k);
        for (std::size_t i = k; i < m; ++i) vnorm2 += v[i] * v[i];
        if (vnorm2 == 0.0) continue;
        const double beta = 2.0 / vnorm2;
        // A <- (I - beta v v^T) A
        for (std::size_t j = k; j < n; ++j) {
            double s = 0.0;
            for (std::size_t i = k; i < m; ++i) s += v[i] * a(i, j);
            s *= beta;
            for (std::size_t i = k; i < m; ++i) a(i, j) -= s * v[i];
        }
        // Q <- Q (I - beta v v^T)
        for (std::size_t i = 0; i < m; ++i) {
            double s = 0.0;
            for (std::size_t j = k; j < m; ++j) s += q(i, j) * v[j];
            s *= beta;
            for (std::size_t j = k; j < m; ++j) q(i, j) -= s * v[j];
        }
    }
    // Fix signs so diag(R) > 0.
    for (std::size_t k = 0; k < n; ++k) {
        if (a(k, k) < 0.0)
            for (std::size_t i = 0; i < m; ++i) q(i, k) = -q(i, k);
    }

    Matrix out(rows, cols);
    if (transposed) {
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < cols; ++j) out(i, j) = q(j, i);
    } else {
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < cols; ++j) out(i, j) = q(i, j);
    }
    return out;
}

// Eigenvalues of a symmetric tridiagonal matrix by Sturm-sequence bisection
// (the EISPACK tridib approach). Returns the `count` smallest eigenvalues.
// Used as an implementation-independent oracle for the shooting solver.
inline Vector tridiagonal_smallest_eigenvalues(const Vector& diag, const Vector& off, std::size_t count) {
    const std::size_t n = diag.size();
    if (off.size() + 1 != n) throw ShapeMismatch("tridiagonal: off-diagonal must have n-1 entries");
    if (count == 0 || count > n) throw ShapeMismatch("tridiagonal: bad eigenvalue count");

    // Gershgorin bounds.
    double lo = diag[0], hi = diag[0];
    for (std::size_t i = 0; i < n; ++i) {
        double r = 0.0;
        if (i > 0) r += std::fabs(off[i - 1]);
        if (i + 1 < n) r += std::fabs(off[i]);
        lo = std::min(lo, diag[i] - r);
        hi = std::max(hi, diag[i] + r);
    }
    const double span = hi - lo;
    lo -= 1e-12 * (1.0 + std::fabs(lo)) + 1e-300;
    hi += 1e-12 * (1.0 + std::fabs(hi)) + 1e-300;

    const double tiny = std::numeric_limits<double>::min() / std::numeric_limits<double>::epsilon();
    // Number of eigenvalues strictly below x (negative-count of the Sturm sequence).
    auto count_below = [&](double x) {
        std::size_t cnt = 0;
        double q = diag[0] - x;
        if (q < 0.0) ++cnt;
        for (std::size_t i = 1; i < n; ++i) {
            const double denom = (q == 0.0) ? tiny : q;
            q = diag[i] - x - off[i - 1] * off[i - 1] / denom;
            if (q < 0.0) ++cnt;
        }
        return cnt;
    };

    Vector out(count);
    for (std::size_t k = 0; k < count; ++k) {
        double a = lo, b = hi;
        // Bisect until the interval isolates eigenvalue k to near machine precision.
        for (int iter = 0; iter < 128; ++iter) {
            const double mid = 0.5 * (a + b);
            if (count_below(mid) > k)
                b = mid;
            else
                a = mid;
            if (b - a <= 4.0 * std::numeric_limits<double>::epsilon() * (std::fabs(a) + std::fabs(b)) + 1e-14 * span)
                break;
        }
        out[k] = 0.5 * (a + b);
    }
    return out;
}

}  // namespace dsl
