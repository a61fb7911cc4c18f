#pragma once

// Gaussian mixture density estimation driven by network responsibilities:
// responsibility-weighted parameter estimates, the eigenvalue lower bound that
// keeps covariances positive definite, the negative log-likelihood energy,
// the diagonal-penalty alternative, and the fused differentiable batch
// objective used in joint training.

#include <algorithm>
#include <cfloat>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "adm/error.hpp"
#include "adm/exact_sum.hpp"
#include "adm/linalg.hpp"
#include "adm/tensor.hpp"

namespace adm {

struct GmmOptions {
    double eps = 1e-6;
    /// Apply the eigenvalue lower bound. Disabled for the unconstrained and
    /// diagonal-penalty comparison models.
    bool clamp = true;
    /// Without the clamp, a covariance whose smallest/largest eigenvalue ratio
    /// falls to this level cannot be inverted at the 32-bit precision of the
    /// features and is reported as singular.
    double singular_rcond = FLT_EPSILON;
};

struct ClampResult {
    Matrix pd;
    Matrix eigenvectors;
    std::vector<double> eigenvalues;          // of the input, descending
    std::vector<double> clamped_eigenvalues;  // max(lambda, eps)
    std::vector<bool> was_clamped;
};

/// Eigendecomposes sigma and raises every eigenvalue to at least eps:
/// lambda_p = ReLU(lambda - eps) + eps = max(lambda, eps), then Q diag Q^T.
inline ClampResult clamp_covariance(const Matrix& sigma, double eps) {
    auto eig = sym_eig(sigma);
    ClampResult r;
    r.eigenvalues = eig.values;
    r.clamped_eigenvalues.resize(eig.values.size());
    r.was_clamped.resize(eig.values.size());
    bool any = false;
    for (std::size_t i = 0; i < eig.values.size(); ++i) {
        r.was_clamped[i] = !(eig.values[i] > eps);
        r.clamped_eigenvalues[i] = std::max(eig.values[i], eps);
        any = any || r.was_clamped[i];
    }
    if (any) {
        r.pd = reassemble(eig.vectors, r.clamped_eigenvalues);
    } else {
        // No-op branch: keep the symmetrized input exactly.
        const std::size_t n = sigma.size();
        r.pd = Matrix(n);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) r.pd(i, j) = 0.5 * (sigma(i, j) + sigma(j, i));
    }
    r.eigenvectors = std::move(eig.vectors);
    return r;
}

/// Mixture parameters with cached factorizations.
struct GmmParams {
    std::size_t dim = 0;
    double eps = 1e-6;
    bool clamped = true;
    std::vector<double> pi;                // fractions
    std::vector<std::vector<double>> mu;   // [C][d]
    std::vector<Matrix> cov_raw;           // before the clamp
    std::vector<Matrix> cov;               // final (pd) covariances
    std::vector<Matrix> eigenvectors;      // of cov_raw
    std::vector<std::vector<double>> eigenvalues;          // of cov_raw, descending
    std::vector<std::vector<double>> clamped_eigenvalues;  // of cov (== eigenvalues without clamp)
    std::vector<std::vector<bool>> was_clamped;
    std::vector<bool> degenerate;
    std::vector<Cholesky> chol;

    std::size_t components() const { return pi.size(); }

    /// Smallest eigenvalue over all final covariances.
    double min_eigenvalue() const {
        double m = std::numeric_limits<double>::infinity();
        for (const auto& v : clamped_eigenvalues) m = std::min(m, *std::min_element(v.begin(), v.end()));
        return m;
    }
    /// Smallest eigenvalue over all covariances before the clamp.
    double min_raw_eigenvalue() const {
        double m = std::numeric_limits<double>::infinity();
        for (const auto& v : eigenvalues) m = std::min(m, *std::min_element(v.begin(), v.end()));
        return m;
    }
};

namespace detail {
inline std::string sci(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3e", v);
    return buf;
}
}  // namespace detail

/// Builds the final covariances and factorizations from raw estimates.
inline GmmParams finalize_params(std::vector<double> pi, std::vector<std::vector<double>> mu,
                                 std::vector<Matrix> cov_raw, std::vector<bool> degenerate, const GmmOptions& opt) {
    GmmParams p;
    p.dim = mu.empty() ? 0 : mu[0].size();
    p.eps = opt.eps;
    p.clamped = opt.clamp;
    p.pi = std::move(pi);
    p.mu = std::move(mu);
    p.cov_raw = std::move(cov_raw);
    p.degenerate = std::move(degenerate);
    const std::size_t C = p.pi.size();
    for (std::size_t c = 0; c < C; ++c) {
        if (opt.clamp) {
            auto r = clamp_covariance(p.cov_raw[c], opt.eps);
            p.cov.push_back(std::move(r.pd));
            p.eigenvectors.push_back(std::move(r.eigenvectors));
            p.eigenvalues.push_back(std::move(r.eigenvalues));
            p.clamped_eigenvalues.push_back(std::move(r.clamped_eigenvalues));
            p.was_clamped.push_back(std::move(r.was_clamped));
        } else {
            auto eig = sym_eig(p.cov_raw[c]);
            const double top = std::max(std::abs(eig.values.front()), std::numeric_limits<double>::min());
            if (!(eig.values.back() > opt.singular_rcond * top))
                throw SingularityError("covariance of component " + std::to_string(c) +
                                           " is singular: min eigenvalue " + detail::sci(eig.values.back()),
                                       p.dim - 1);
            p.cov.push_back(p.cov_raw[c]);
            p.eigenvectors.push_back(std::move(eig.vectors));
            p.clamped_eigenvalues.push_back(eig.values);
            p.eigenvalues.push_back(std::move(eig.values));
            p.was_clamped.emplace_back(p.dim, false);
        }
        p.chol.emplace_back(p.cov[c]);
    }
    return p;
}

namespace detail {
constexpr double kDegenerateMass = 1e-12;

inline std::vector<double> column_mean(std::span<const double> z, std::size_t N, std::size_t d) {
    std::vector<double> m(d, 0.0);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < d; ++i) m[i] += z[n * d + i];
    for (auto& v : m) v /= static_cast<double>(N);
    return m;
}
}  // namespace detail

/// Responsibility-weighted estimates: pi_c = sum_n f_nc / N,
/// mu_c = sum_n f_nc z_n / sum_n f_nc, Sigma_c = weighted outer products about
/// mu_c, followed by the clamp. z is [N][d], f is [N][C], both row-major.
/// A component with total responsibility below 1e-12 keeps its tiny fraction,
/// takes the batch mean and eps*I.
inline GmmParams estimate_params(std::span<const double> z, std::span<const double> f, std::size_t N, std::size_t d,
                                 std::size_t C, const GmmOptions& opt = {}) {
    if (N == 0) throw DataError("estimate_params: no samples");
    if (z.size() != N * d || f.size() != N * C) throw ConfigError("estimate_params: size mismatch");
    std::vector<double> pi(C), S(C, 0.0);
    std::vector<std::vector<double>> mu(C, std::vector<double>(d, 0.0));
    std::vector<Matrix> cov(C, Matrix(d));
    std::vector<bool> degenerate(C, false);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) {
            const double w = f[n * C + c];
            S[c] += w;
            for (std::size_t i = 0; i < d; ++i) mu[c][i] += w * z[n * d + i];
        }
    const auto global = detail::column_mean(z, N, d);
    for (std::size_t c = 0; c < C; ++c) {
        pi[c] = S[c] / static_cast<double>(N);
        if (S[c] < detail::kDegenerateMass) {
            degenerate[c] = true;
            mu[c] = global;
            cov[c] = Matrix::identity(d);
            for (auto& v : cov[c].values()) v *= opt.eps;
            continue;
        }
        for (auto& v : mu[c]) v /= S[c];
    }
    std::vector<double> r(d);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) {
            if (degenerate[c]) continue;
            const double w = f[n * C + c];
            for (std::size_t i = 0; i < d; ++i) r[i] = z[n * d + i] - mu[c][i];
            for (std::size_t i = 0; i < d; ++i)
                for (std::size_t j = i; j < d; ++j) cov[c](i, j) += w * r[i] * r[j];
        }
    for (std::size_t c = 0; c < C; ++c) {
        if (degenerate[c]) continue;
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = i; j < d; ++j) {
                cov[c](i, j) /= S[c];
                cov[c](j, i) = cov[c](i, j);
            }
    }
    return finalize_params(std::move(pi), std::move(mu), std::move(cov), std::move(degenerate), opt);
}

/// Per-component log(pi_c N(z | mu_c, Sigma_c)) for one point.
inline void component_log_densities(const GmmParams& p, std::span<const double> z, std::span<double> out,
                                    std::vector<double>& scratch) {
    const std::size_t d = p.dim;
    const double log2pi = std::log(2.0 * std::numbers::pi);
    scratch.resize(d);
    for (std::size_t c = 0; c < p.components(); ++c) {
        if (!(p.pi[c] > 0.0)) {
            out[c] = -std::numeric_limits<double>::infinity();
            continue;
        }
        for (std::size_t i = 0; i < d; ++i) scratch[i] = z[i] - p.mu[c][i];
        p.chol[c].forward(scratch);
        double maha = 0.0;
        for (const double v : scratch) maha += v * v;
        out[c] = std::log(p.pi[c]) - 0.5 * (static_cast<double>(d) * log2pi + p.chol[c].logdet() + maha);
    }
}

/// Numerically stable -log sum_c exp(l_c); fills the posterior weights.
inline double neg_log_sum_exp(std::span<const double> l, std::span<double> posterior) {
    double mx = -std::numeric_limits<double>::infinity();
    for (const double v : l) mx = std::max(mx, v);
    if (!std::isfinite(mx)) throw NumericError("energy: no component with positive weight");
    double s = 0.0;
    for (std::size_t c = 0; c < l.size(); ++c) s += (posterior[c] = std::exp(l[c] - mx));
    for (auto& v : posterior) v /= s;
    return -(mx + std::log(s));
}

/// E_n = -log sum_c pi_c N(z_n | mu_c, Sigma_c) for each row of z ([N][d]).
inline std::vector<double> energy(std::span<const double> z, const GmmParams& p) {
    const std::size_t d = p.dim, N = z.size() / d, C = p.components();
    std::vector<double> E(N), l(C), post(C), scratch;
    for (std::size_t n = 0; n < N; ++n) {
        component_log_densities(p, z.subspan(n * d, d), l, scratch);
        E[n] = neg_log_sum_exp(l, post);
    }
    return E;
}

/// dE_n/dz_n = sum_c posterior_nc Sigma_c^-1 (z_n - mu_c).
inline std::vector<double> energy_grad_z(std::span<const double> z, const GmmParams& p) {
    const std::size_t d = p.dim, N = z.size() / d, C = p.components();
    std::vector<double> G(N * d, 0.0), l(C), post(C), scratch, r(d);
    for (std::size_t n = 0; n < N; ++n) {
        component_log_densities(p, z.subspan(n * d, d), l, scratch);
        neg_log_sum_exp(l, post);
        for (std::size_t c = 0; c < C; ++c) {
            if (post[c] == 0.0) continue;
            for (std::size_t i = 0; i < d; ++i) r[i] = z[n * d + i] - p.mu[c][i];
            const auto u = p.chol[c].solve(r);
            for (std::size_t i = 0; i < d; ++i) G[n * d + i] += post[c] * u[i];
        }
    }
    return G;
}

/// Energy of each row of z [N,d] under fixed parameters; differentiable in z.
template <class T>
Tensor<T> energy_op(const Tensor<T>& z, const GmmParams& p) {
    if (z.rank() != 2 || z.dim(1) != p.dim) throw ConfigError("energy_op: z must be [N," + std::to_string(p.dim) + "]");
    std::vector<double> zd(z.data().begin(), z.data().end());
    const auto E = energy(zd, p);
    std::vector<T> out(E.begin(), E.end());
    return make_result<T>("energy", {z.dim(0)}, std::move(out), {z},
                          [zd = std::move(zd), p](TensorNode<T>& self) {
                              const auto G = energy_grad_z(zd, p);
                              const std::size_t d = p.dim;
                              auto& pz = *self.parents[0];
                              for (std::size_t n = 0; n < self.grad.size(); ++n)
                                  for (std::size_t i = 0; i < d; ++i)
                                      pz.grad[n * d + i] += static_cast<T>(self.grad[n] * G[n * d + i]);
                          });
}

struct PenaltyResult {
    double value = 0.0;
    bool singular = false;  // some diagonal entry was <= 0
};

/// L_p = sum_c sum_i 1 / Sigma_c,ii on the covariances before any clamp.
inline PenaltyResult penalty_loss(const GmmParams& p) {
    PenaltyResult r;
    for (const auto& s : p.cov_raw)
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (!(s(i, i) > 0.0)) {
                r.singular = true;
                r.value = std::numeric_limits<double>::max();
                return r;
            }
            r.value += 1.0 / s(i, i);
        }
    return r;
}

/// Sufficient statistics sum f, sum f z, sum f z z^T per component, summed
/// exactly so that partial statistics merge without rounding differences.
class BatchStats {
public:
    BatchStats(std::size_t dim, std::size_t components)
        : d_(dim), C_(components), mass_(components), first_(components * dim),
          second_(components * dim * (dim + 1) / 2), sum_z_(dim) {}

    std::size_t dim() const { return d_; }
    std::size_t components() const { return C_; }
    std::size_t count() const { return n_; }

    void accumulate(std::span<const double> z, std::span<const double> f) {
        const std::size_t N = z.size() / d_;
        if (z.size() != N * d_ || f.size() != N * C_) throw ConfigError("BatchStats: size mismatch");
        for (std::size_t n = 0; n < N; ++n) {
            const double* zn = z.data() + n * d_;
            for (std::size_t i = 0; i < d_; ++i) sum_z_[i].add(zn[i]);
            for (std::size_t c = 0; c < C_; ++c) {
                const double w = f[n * C_ + c];
                mass_[c].add(w);
                std::size_t k = 0;
                for (std::size_t i = 0; i < d_; ++i) {
                    const double wz = w * zn[i];
                    // For 32-bit inputs the product w*z is exact in double.
                    first_[c * d_ + i].add_product(w, zn[i]);
                    for (std::size_t j = i; j < d_; ++j, ++k) second_[c * tri() + k].add_product(wz, zn[j]);
                }
            }
        }
        n_ += N;
    }

    void merge(const BatchStats& o) {
        if (o.d_ != d_ || o.C_ != C_) throw ConfigError("BatchStats::merge: shape mismatch");
        for (std::size_t i = 0; i < mass_.size(); ++i) mass_[i].merge(o.mass_[i]);
        for (std::size_t i = 0; i < first_.size(); ++i) first_[i].merge(o.first_[i]);
        for (std::size_t i = 0; i < second_.size(); ++i) second_[i].merge(o.second_[i]);
        for (std::size_t i = 0; i < sum_z_.size(); ++i) sum_z_[i].merge(o.sum_z_[i]);
        n_ += o.n_;
    }

    friend bool operator==(const BatchStats& a, const BatchStats& b) {
        return a.d_ == b.d_ && a.C_ == b.C_ && a.n_ == b.n_ && a.mass_ == b.mass_ && a.first_ == b.first_ &&
               a.second_ == b.second_ && a.sum_z_ == b.sum_z_;
    }

    double mass(std::size_t c) const { return mass_[c].value(); }
    double first(std::size_t c, std::size_t i) const { return first_[c * d_ + i].value(); }
    double second(std::size_t c, std::size_t i, std::size_t j) const {
        if (j < i) std::swap(i, j);
        // Row-major upper triangle offset.
        const std::size_t k = i * d_ - i * (i - 1) / 2 + (j - i);
        return second_[c * tri() + k].value();
    }
    double sum_z(std::size_t i) const { return sum_z_[i].value(); }

private:
    std::size_t tri() const { return d_ * (d_ + 1) / 2; }

    std::size_t d_, C_;
    std::size_t n_ = 0;
    std::vector<ExactSum> mass_, first_, second_, sum_z_;
};

/// Parameters from accumulated statistics (same algebra as estimate_params,
/// using raw moments).
inline GmmParams freeze(const BatchStats& s, const GmmOptions& opt = {}) {
    const std::size_t d = s.dim(), C = s.components(), N = s.count();
    if (N == 0) throw DataError("freeze: no samples accumulated");
    std::vector<double> pi(C), global(d);
    for (std::size_t i = 0; i < d; ++i) global[i] = s.sum_z(i) / static_cast<double>(N);
    std::vector<std::vector<double>> mu(C, std::vector<double>(d));
    std::vector<Matrix> cov(C, Matrix(d));
    std::vector<bool> degenerate(C, false);
    for (std::size_t c = 0; c < C; ++c) {
        const double S = s.mass(c);
        pi[c] = S / static_cast<double>(N);
        if (S < detail::kDegenerateMass) {
            degenerate[c] = true;
            mu[c] = global;
            cov[c] = Matrix::identity(d);
            for (auto& v : cov[c].values()) v *= opt.eps;
            continue;
        }
        for (std::size_t i = 0; i < d; ++i) mu[c][i] = s.first(c, i) / S;
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = i; j < d; ++j) {
                cov[c](i, j) = s.second(c, i, j) / S - mu[c][i] * mu[c][j];
                cov[c](j, i) = cov[c](i, j);
            }
    }
    return finalize_params(std::move(pi), std::move(mu), std::move(cov), std::move(degenerate), opt);
}

// ---------------------------------------------------------------------------
// Fused differentiable batch objective
// ---------------------------------------------------------------------------

struct GmmObjectiveOptions {
    GmmOptions gmm;
    double energy_weight = 1.0;
    double penalty_weight = 0.0;
};

template <class T>
struct GmmObjective {
    Tensor<T> loss;  // energy_weight * mean(E) + penalty_weight * L_p
    double mean_energy = 0.0;
    double penalty = 0.0;
    GmmParams params;
};

/// Estimates the mixture from this batch (z [N,d], responsibilities f [N,C])
/// and evaluates the weighted mean energy plus optional diagonal penalty.
///
/// Gradients reach z and f through pi, mu and Sigma. Through the clamp the
/// eigenvectors are held constant: each eigenvalue's component in the
/// eigenbasis passes with slope 1 if it lies above eps and 0 otherwise; the
/// remaining entries pass unchanged, so an unclamped covariance gets the exact
/// identity. Degenerate components contribute only through pi.
template <class T>
GmmObjective<T> gmm_objective(const Tensor<T>& z, const Tensor<T>& f, const GmmObjectiveOptions& opt) {
    if (z.rank() != 2 || f.rank() != 2 || z.dim(0) != f.dim(0))
        throw ConfigError("gmm_objective: z " + shape_str(z.shape()) + " and f " + shape_str(f.shape()) +
                          " must be [N,d] and [N,C]");
    const std::size_t N = z.dim(0), d = z.dim(1), C = f.dim(1);
    std::vector<double> zd(z.data().begin(), z.data().end()), fd(f.data().begin(), f.data().end());

    GmmObjective<T> out;
    out.params = estimate_params(zd, fd, N, d, C, opt.gmm);
    const GmmParams& p = out.params;

    std::vector<double> gamma(N * C), l(C), scratch;
    double esum = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
        component_log_densities(p, std::span<const double>(zd).subspan(n * d, d), l, scratch);
        esum += neg_log_sum_exp(l, std::span<double>(gamma).subspan(n * C, C));
    }
    out.mean_energy = esum / static_cast<double>(N);
    if (!std::isfinite(out.mean_energy)) throw NumericError("gmm_objective: non-finite energy");
    if (opt.penalty_weight != 0.0) {
        const auto pen = penalty_loss(p);
        if (pen.singular) throw SingularityError("diagonal penalty: non-positive covariance diagonal", 0);
        out.penalty = pen.value;
    }
    const double total = opt.energy_weight * out.mean_energy + opt.penalty_weight * out.penalty;

    out.loss = make_result<T>(
        "gmm_objective", {1}, {static_cast<T>(total)}, {z, f},
        [zd = std::move(zd), fd = std::move(fd), gamma = std::move(gamma), p, N, d, C,
         we = opt.energy_weight, wp = opt.penalty_weight](TensorNode<T>& self) {
            const double g = self.grad[0];
            std::vector<double> gz(N * d, 0.0), gf(N * C, 0.0);
            std::vector<double> S(C, 0.0);
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t c = 0; c < C; ++c) S[c] += fd[n * C + c];

            std::vector<double> r(d), u(d);
            for (std::size_t c = 0; c < C; ++c) {
                const Matrix inv = p.chol[c].inverse();
                double W = 0.0;
                std::vector<double> g_mu(d, 0.0);
                Matrix wuu(d);
                for (std::size_t n = 0; n < N; ++n) {
                    const double w = g * we * gamma[n * C + c] / static_cast<double>(N);
                    if (w == 0.0) continue;
                    W += w;
                    for (std::size_t i = 0; i < d; ++i) r[i] = zd[n * d + i] - p.mu[c][i];
                    for (std::size_t i = 0; i < d; ++i) {
                        double s = 0.0;
                        for (std::size_t j = 0; j < d; ++j) s += inv(i, j) * r[j];
                        u[i] = s;
                    }
                    for (std::size_t i = 0; i < d; ++i) {
                        gz[n * d + i] += w * u[i];  // direct dependence of E_n on z_n
                        g_mu[i] -= w * u[i];
                        for (std::size_t j = 0; j < d; ++j) wuu(i, j) += w * u[i] * u[j];
                    }
                }
                // dL/dlog(pi_c) = -W ; pi_c = S_c / N.
                const double g_logpi = -W;
                if (p.degenerate[c]) {
                    if (S[c] > 0.0)
                        for (std::size_t n = 0; n < N; ++n) gf[n * C + c] += g_logpi / S[c];
                    continue;
                }
                // dL/dSigma_pd = W/2 Sigma^-1 - 1/2 sum_n w u u^T
                Matrix g_pd(d);
                for (std::size_t i = 0; i < d; ++i)
                    for (std::size_t j = 0; j < d; ++j) g_pd(i, j) = 0.5 * W * inv(i, j) - 0.5 * wuu(i, j);
                Matrix g_raw = g_pd;
                if (p.clamped) {
                    const Matrix& q = p.eigenvectors[c];
                    for (std::size_t k = 0; k < d; ++k) {
                        if (!p.was_clamped[c][k]) continue;
                        double proj = 0.0;
                        for (std::size_t i = 0; i < d; ++i)
                            for (std::size_t j = 0; j < d; ++j) proj += q(i, k) * g_pd(i, j) * q(j, k);
                        for (std::size_t i = 0; i < d; ++i)
                            for (std::size_t j = 0; j < d; ++j) g_raw(i, j) -= proj * q(i, k) * q(j, k);
                    }
                }
                if (wp != 0.0)
                    for (std::size_t i = 0; i < d; ++i) {
                        const double s = p.cov_raw[c](i, i);
                        g_raw(i, i) -= g * wp / (s * s);
                    }
                // <G_raw, Sigma_raw>, reused for every n.
                double g_dot_sigma = 0.0;
                for (std::size_t i = 0; i < d; ++i)
                    for (std::size_t j = 0; j < d; ++j) g_dot_sigma += g_raw(i, j) * p.cov_raw[c](i, j);
                const double Sc = S[c];
                for (std::size_t n = 0; n < N; ++n) {
                    for (std::size_t i = 0; i < d; ++i) r[i] = zd[n * d + i] - p.mu[c][i];
                    double mu_term = 0.0, quad = 0.0;
                    for (std::size_t i = 0; i < d; ++i) {
                        mu_term += g_mu[i] * r[i];
                        double s = 0.0;
                        for (std::size_t j = 0; j < d; ++j) s += (g_raw(i, j) + g_raw(j, i)) * r[j];
                        u[i] = s;
                        quad += r[i] * s;
                    }
                    // (G + G^T) r . r = 2 <G, r r^T>
                    gf[n * C + c] += g_logpi / Sc + mu_term / Sc + (0.5 * quad - g_dot_sigma) / Sc;
                    const double a = fd[n * C + c] / Sc;
                    for (std::size_t i = 0; i < d; ++i) gz[n * d + i] += a * (g_mu[i] + u[i]);
                }
            }
            auto& pz = *self.parents[0];
            auto& pf = *self.parents[1];
            if (pz.requires_grad)
                for (std::size_t i = 0; i < gz.size(); ++i) pz.grad[i] += static_cast<T>(gz[i]);
            if (pf.requires_grad)
                for (std::size_t i = 0; i < gf.size(); ++i) pf.grad[i] += static_cast<T>(gf[i]);
        });
    return out;
}

}  // namespace adm
