#pragma once

// Small dense symmetric linear algebra in double precision: cyclic Jacobi
// eigensolver and Cholesky factorization with log-determinant and solves.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <utility>
#include <vector>

#include "adm/error.hpp"

namespace adm {

/// Row-major square matrix of doubles.
class Matrix {
public:
    Matrix() = default;
    explicit Matrix(std::size_t n, double fill = 0.0) : n_(n), a_(n * n, fill) {}

    static Matrix identity(std::size_t n) {
        Matrix m(n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    static Matrix from(std::size_t n, std::span<const double> values) {
        if (values.size() != n * n) throw ConfigError("Matrix::from: wrong element count");
        Matrix m(n);
        std::copy(values.begin(), values.end(), m.a_.begin());
        return m;
    }

    std::size_t size() const { return n_; }
    double& operator()(std::size_t i, std::size_t j) { return a_[i * n_ + j]; }
    double operator()(std::size_t i, std::size_t j) const { return a_[i * n_ + j]; }
    std::span<const double> values() const { return a_; }
    std::span<double> values() { return a_; }

    Matrix transposed() const {
        Matrix t(n_);
        for (std::size_t i = 0; i < n_; ++i)
            for (std::size_t j = 0; j < n_; ++j) t(j, i) = (*this)(i, j);
        return t;
    }

    friend Matrix operator*(const Matrix& a, const Matrix& b) {
        Matrix c(a.n_);
        for (std::size_t i = 0; i < a.n_; ++i)
            for (std::size_t k = 0; k < a.n_; ++k) {
                const double x = a(i, k);
                for (std::size_t j = 0; j < a.n_; ++j) c(i, j) += x * b(k, j);
            }
        return c;
    }

    double max_abs_diff(const Matrix& o) const {
        double m = 0.0;
        for (std::size_t i = 0; i < a_.size(); ++i) m = std::max(m, std::abs(a_[i] - o.a_[i]));
        return m;
    }

private:
    std::size_t n_ = 0;
    std::vector<double> a_;
};

struct SymEigResult {
    std::vector<double> values;  // descending
    Matrix vectors;              // column i pairs with values[i]
};

/// Symmetric eigendecomposition by cyclic Jacobi rotations. The input is
/// symmetrized as (m + m^T)/2 first. Stops when the largest off-diagonal
/// magnitude drops below 1e-10 (relative to the Frobenius norm for large
/// matrices) or after 100 sweeps.
inline SymEigResult sym_eig(const Matrix& m) {
    const std::size_t n = m.size();
    Matrix a(n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            const double v = 0.5 * (m(i, j) + m(j, i));
            if (!std::isfinite(v)) throw NumericError("sym_eig: non-finite matrix entry");
            a(i, j) = v;
        }
    Matrix q = Matrix::identity(n);

    double frob = 0.0;
    for (const double v : a.values()) frob += v * v;
    frob = std::sqrt(frob);
    const double tol = 1e-10 * std::max(1.0, frob);

    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) off = std::max(off, std::abs(a(i, j)));
        if (off < tol) break;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t r = p + 1; r < n; ++r) {
                const double apr = a(p, r);
                if (apr == 0.0) continue;
                const double theta = (a(r, r) - a(p, p)) / (2.0 * apr);
                const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a(k, p), akr = a(k, r);
                    a(k, p) = c * akp - s * akr;
                    a(k, r) = s * akp + c * akr;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a(p, k), ark = a(r, k);
                    a(p, k) = c * apk - s * ark;
                    a(r, k) = s * apk + c * ark;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double qkp = q(k, p), qkr = q(k, r);
                    q(k, p) = c * qkp - s * qkr;
                    q(k, r) = s * qkp + c * qkr;
                }
            }
    }

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return a(x, x) > a(y, y); });
    SymEigResult res{std::vector<double>(n), Matrix(n)};
    for (std::size_t i = 0; i < n; ++i) {
        res.values[i] = a(order[i], order[i]);
        for (std::size_t k = 0; k < n; ++k) res.vectors(k, i) = q(k, order[i]);
    }
    return res;
}

/// Q * diag(values) * Q^T.
inline Matrix reassemble(const Matrix& q, std::span<const double> values) {
    const std::size_t n = q.size();
    Matrix out(n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i; j < n; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < n; ++k) s += q(i, k) * values[k] * q(j, k);
            out(i, j) = s;
            out(j, i) = s;
        }
    return out;
}

/// Lower-triangular Cholesky factor L with m = L L^T.
class Cholesky {
public:
    Cholesky() = default;

    explicit Cholesky(const Matrix& m) : l_(m.size()) {
        const std::size_t n = m.size();
        for (std::size_t j = 0; j < n; ++j) {
            double d = m(j, j);
            for (std::size_t k = 0; k < j; ++k) d -= l_(j, k) * l_(j, k);
            if (!(d > 0.0) || !std::isfinite(d)) throw SingularityError("Cholesky: non-positive pivot", j);
            const double ljj = std::sqrt(d);
            l_(j, j) = ljj;
            for (std::size_t i = j + 1; i < n; ++i) {
                double s = m(i, j);
                for (std::size_t k = 0; k < j; ++k) s -= l_(i, k) * l_(j, k);
                l_(i, j) = s / ljj;
            }
        }
        logdet_ = 0.0;
        for (std::size_t i = 0; i < n; ++i) logdet_ += 2.0 * std::log(l_(i, i));
    }

    std::size_t size() const { return l_.size(); }
    const Matrix& factor() const { return l_; }
    double logdet() const { return logdet_; }

    /// Solves L y = v in place.
    void forward(std::span<double> v) const {
        const std::size_t n = l_.size();
        for (std::size_t i = 0; i < n; ++i) {
            double s = v[i];
            for (std::size_t k = 0; k < i; ++k) s -= l_(i, k) * v[k];
            v[i] = s / l_(i, i);
        }
    }

    /// Solves L^T x = y in place.
    void backward(std::span<double> v) const {
        const std::size_t n = l_.size();
        for (std::size_t ii = n; ii-- > 0;) {
            double s = v[ii];
            for (std::size_t k = ii + 1; k < n; ++k) s -= l_(k, ii) * v[k];
            v[ii] = s / l_(ii, ii);
        }
    }

    /// m^-1 v.
    std::vector<double> solve(std::span<const double> v) const {
        std::vector<double> x(v.begin(), v.end());
        forward(x);
        backward(x);
        return x;
    }

    /// m^-1 as a dense matrix.
    Matrix inverse() const {
        const std::size_t n = l_.size();
        Matrix inv(n);
        std::vector<double> e(n);
        for (std::size_t j = 0; j < n; ++j) {
            std::fill(e.begin(), e.end(), 0.0);
            e[j] = 1.0;
            const auto x = solve(e);
            for (std::size_t i = 0; i < n; ++i) inv(i, j) = x[i];
        }
        return inv;
    }

private:
    Matrix l_;
    double logdet_ = 0.0;
};

struct LogdetSolve {
    double logdet;
    std::vector<double> solution;
};

/// log det(m) and m^-1 v for positive-definite m.
inline LogdetSolve cholesky_logdet_solve(const Matrix& m, std::span<const double> v) {
    if (v.size() != m.size()) throw ConfigError("cholesky_logdet_solve: vector length mismatch");
    const Cholesky c(m);
    return {c.logdet(), c.solve(v)};
}

}  // namespace adm
