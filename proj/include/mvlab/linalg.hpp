#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "mvlab/errors.hpp"

namespace mvlab {

using Vec = std::vector<double>;

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline double dist2(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return std::sqrt(s);
}

inline bool all_finite(std::span<const double> a) {
    for (double v : a)
        if (!std::isfinite(v)) return false;
    return true;
}

// Dense row-major matrix. Small (d x m with d,m <= 3 in the hot paths), so no
// attempt at blocking or expression templates.
struct Mat {
    int rows = 0, cols = 0;
    std::vector<double> data;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, 0.0) {}

    double& operator()(int i, int j) { return data[static_cast<std::size_t>(i) * cols + j]; }
    double operator()(int i, int j) const { return data[static_cast<std::size_t>(i) * cols + j]; }

    static Mat identity(int n) {
        Mat m(n, n);
        for (int i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }
};

// View over caller-owned storage; used by coefficient callables to avoid a
// heap allocation per evaluation.
struct MatView {
    double* p = nullptr;
    int rows = 0, cols = 0;
    double& operator()(int i, int j) { return p[static_cast<std::size_t>(i) * cols + j]; }
    double operator()(int i, int j) const { return p[static_cast<std::size_t>(i) * cols + j]; }
    void set_identity() {
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < cols; ++j) (*this)(i, j) = (i == j) ? 1.0 : 0.0;
    }
    void scale(double c) {
        for (int i = 0; i < rows * cols; ++i) p[i] *= c;
    }
};

inline Mat operator-(const Mat& a, const Mat& b) {
    Mat r(a.rows, a.cols);
    for (std::size_t i = 0; i < r.data.size(); ++i) r.data[i] = a.data[i] - b.data[i];
    return r;
}

inline Mat operator+(const Mat& a, const Mat& b) {
    Mat r(a.rows, a.cols);
    for (std::size_t i = 0; i < r.data.size(); ++i) r.data[i] = a.data[i] + b.data[i];
    return r;
}

inline Mat operator*(const Mat& a, double c) {
    Mat r = a;
    for (double& v : r.data) v *= c;
    return r;
}

// a * a^T for a d x m coefficient matrix (the diffusion Gram matrix).
inline Mat gram(const Mat& a) {
    Mat g(a.rows, a.rows);
    for (int i = 0; i < a.rows; ++i)
        for (int j = 0; j <= i; ++j) {
            double s = 0.0;
            for (int k = 0; k < a.cols; ++k) s += a(i, k) * a(j, k);
            g(i, j) = g(j, i) = s;
        }
    return g;
}

inline double frobenius_norm(const Mat& a) {
    double s = 0.0;
    for (double v : a.data) s += v * v;
    return std::sqrt(s);
}

inline double max_abs_offdiag(const Mat& a) {
    double m = 0.0;
    for (int i = 0; i < a.rows; ++i)
        for (int j = 0; j < a.cols; ++j)
            if (i != j) m = std::max(m, std::abs(a(i, j)));
    return m;
}

// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations. Sizes here
// are tiny (d <= 3 typically), so convergence is immediate.
inline std::vector<double> sym_eigenvalues(Mat a) {
    const int n = a.rows;
    require(n == a.cols, "invalid-parameter", "sym_eigenvalues needs a square matrix");
    for (int sweep = 0; sweep < 64; ++sweep) {
        double off = 0.0;
        for (int i = 0; i < n; ++i)
            for (int j = i + 1; j < n; ++j) off += a(i, j) * a(i, j);
        if (off < 1e-30) break;
        for (int p = 0; p < n; ++p)
            for (int q = p + 1; q < n; ++q) {
                if (std::abs(a(p, q)) < 1e-300) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (int k = 0; k < n; ++k) {
                    const double akp = a(k, p), akq = a(k, q);
                    a(k, p) = c * akp - s * akq;
                    a(k, q) = s * akp + c * akq;
                }
                for (int k = 0; k < n; ++k) {
                    const double apk = a(p, k), aqk = a(q, k);
                    a(p, k) = c * apk - s * aqk;
                    a(q, k) = s * apk + c * aqk;
                }
            }
    }
    std::vector<double> ev(n);
    for (int i = 0; i < n; ++i) ev[i] = a(i, i);
    return ev;
}

// Spectral (operator) norm of a general matrix: sqrt(lambda_max(a a^T)).
inline double operator_norm(const Mat& a) {
    const Mat g = gram(a);
    double m = 0.0;
    for (double ev : sym_eigenvalues(g)) m = std::max(m, ev);
    return std::sqrt(std::max(0.0, m));
}

struct Cholesky {
    Mat L;          // lower triangular
    double log_det = 0.0;
    bool ok = false;

    // Solve L L^T x = b.
    Vec solve(std::span<const double> b) const {
        const int n = L.rows;
        Vec x(b.begin(), b.end());
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < i; ++j) x[i] -= L(i, j) * x[j];
            x[i] /= L(i, i);
        }
        for (int i = n - 1; i >= 0; --i) {
            for (int j = i + 1; j < n; ++j) x[i] -= L(j, i) * x[j];
            x[i] /= L(i, i);
        }
        return x;
    }
};

inline Cholesky cholesky(const Mat& a) {
    const int n = a.rows;
    Cholesky c;
    c.L = Mat(n, n);
    c.log_det = 0.0;
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j <= i; ++j) {
            double s = a(i, j);
            for (int k = 0; k < j; ++k) s -= c.L(i, k) * c.L(j, k);
            if (i == j) {
                if (s <= 0.0 || !std::isfinite(s)) return c; // ok stays false
                c.L(i, i) = std::sqrt(s);
                c.log_det += 2.0 * std::log(c.L(i, i));
            } else {
                c.L(i, j) = s / c.L(j, j);
            }
        }
    }
    c.ok = true;
    return c;
}

// Symmetric inverse via Cholesky. Throws with the supplied code when the
// matrix is not numerically SPD.
inline Mat spd_inverse(const Mat& a, const std::string& error_code) {
    const int n = a.rows;
    const Cholesky c = cholesky(a);
    require(c.ok, error_code, "matrix is not positive definite");
    Mat inv(n, n);
    Vec e(n, 0.0);
    for (int j = 0; j < n; ++j) {
        e.assign(n, 0.0);
        e[j] = 1.0;
        Vec col = c.solve(e);
        for (int i = 0; i < n; ++i) inv(i, j) = col[i];
    }
    // symmetrize away the last-bit asymmetry from the two triangular solves
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < i; ++j) inv(i, j) = inv(j, i) = 0.5 * (inv(i, j) + inv(j, i));
    return inv;
}

} // namespace mvlab
