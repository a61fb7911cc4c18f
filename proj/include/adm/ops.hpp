#pragma once

// Neural-network layers with registered gradients: convolutions, dense,
// activations, instance normalization, dropout.

#include <cmath>
#include <cstddef>
#include <vector>

#include "adm/error.hpp"
#include "adm/parallel.hpp"
#include "adm/rng.hpp"
#include "adm/tensor.hpp"

namespace adm {

namespace detail {

/// Sliding-window geometry between a "large" image (conv input / transposed
/// conv output) and the "small" grid of window positions.
struct ConvGeometry {
    std::size_t channels, height, width;  // large image
    std::size_t kernel, stride, pad;
    std::size_t out_h, out_w;             // window grid

    std::size_t rows() const { return channels * kernel * kernel; }
    std::size_t cols() const { return out_h * out_w; }
};

/// col[(c*k + ky)*k + kx][oy*out_w + ox] = img[c][oy*s - p + ky][ox*s - p + kx].
template <class T>
void im2col(const T* img, const ConvGeometry& g, T* col) {
    const std::size_t k = g.kernel, P = g.cols();
    for (std::size_t c = 0; c < g.channels; ++c)
        for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
                T* row = col + ((c * k + ky) * k + kx) * P;
                for (std::size_t oy = 0; oy < g.out_h; ++oy) {
                    const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
                    T* dst = row + oy * g.out_w;
                    if (iy < 0 || iy >= static_cast<long>(g.height)) {
                        std::fill_n(dst, g.out_w, T(0));
                        continue;
                    }
                    const T* src = img + (c * g.height + static_cast<std::size_t>(iy)) * g.width;
                    for (std::size_t ox = 0; ox < g.out_w; ++ox) {
                        const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
                        dst[ox] = (ix < 0 || ix >= static_cast<long>(g.width)) ? T(0) : src[ix];
                    }
                }
            }
}

/// Adjoint of im2col: scatters-adds columns back into the image.
template <class T>
void col2im(const T* col, const ConvGeometry& g, T* img) {
    const std::size_t k = g.kernel, P = g.cols();
    for (std::size_t c = 0; c < g.channels; ++c)
        for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
                const T* row = col + ((c * k + ky) * k + kx) * P;
                for (std::size_t oy = 0; oy < g.out_h; ++oy) {
                    const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
                    if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
                    T* dst = img + (c * g.height + static_cast<std::size_t>(iy)) * g.width;
                    const T* src = row + oy * g.out_w;
                    for (std::size_t ox = 0; ox < g.out_w; ++ox) {
                        const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
                        if (ix >= 0 && ix < static_cast<long>(g.width)) dst[ix] += src[ox];
                    }
                }
            }
}

template <class T>
void transpose(const T* a, std::size_t rows, std::size_t cols, T* at) {
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) at[c * rows + r] = a[r * cols + c];
}

/// C[r][:] += sum_i a(r, i) * B[i][:] for r < R, i < I, rows of length N.
/// Register-blocked over 4 rows and one vector-friendly column tile; every
/// output element still accumulates its terms in ascending i.
template <class T, class AFn>
void gemm_rows(AFn a, const T* B, T* C, std::size_t R, std::size_t I, std::size_t N) {
    constexpr std::size_t MR = 4, NR = 256 / sizeof(T);
    std::size_t r = 0;
    for (; r + MR <= R; r += MR) {
        std::size_t n0 = 0;
        for (; n0 + NR <= N; n0 += NR) {
            T acc[MR][NR];
            for (std::size_t m = 0; m < MR; ++m)
                for (std::size_t j = 0; j < NR; ++j) acc[m][j] = C[(r + m) * N + n0 + j];
            for (std::size_t i = 0; i < I; ++i) {
                const T* b = B + i * N + n0;
                T av[MR];
                for (std::size_t m = 0; m < MR; ++m) av[m] = a(r + m, i);
                for (std::size_t m = 0; m < MR; ++m)
                    for (std::size_t j = 0; j < NR; ++j) acc[m][j] += av[m] * b[j];
            }
            for (std::size_t m = 0; m < MR; ++m)
                for (std::size_t j = 0; j < NR; ++j) C[(r + m) * N + n0 + j] = acc[m][j];
        }
        if (n0 < N)
            for (std::size_t m = 0; m < MR; ++m) {
                T* c = C + (r + m) * N;
                for (std::size_t i = 0; i < I; ++i) {
                    const T av = a(r + m, i);
                    const T* b = B + i * N;
                    for (std::size_t n = n0; n < N; ++n) c[n] += av * b[n];
                }
            }
    }
    for (; r < R; ++r) {
        T* c = C + r * N;
        for (std::size_t i = 0; i < I; ++i) {
            const T av = a(r, i);
            const T* b = B + i * N;
            for (std::size_t n = 0; n < N; ++n) c[n] += av * b[n];
        }
    }
}

/// C[m][:] += sum_k A[m][k] * B[k][:]   (A: M x K, B: K x N, C: M x N)
template <class T>
void gemm_acc(const T* A, const T* B, T* C, std::size_t M, std::size_t K, std::size_t N) {
    gemm_rows<T>([A, K](std::size_t m, std::size_t k) { return A[m * K + k]; }, B, C, M, K, N);
}

/// C[k][:] += sum_m A[m][k] * B[m][:]   (A: M x K, B: M x N, C: K x N)
template <class T>
void gemm_tn_acc(const T* A, const T* B, T* C, std::size_t M, std::size_t K, std::size_t N) {
    gemm_rows<T>([A, K](std::size_t k, std::size_t m) { return A[m * K + k]; }, B, C, K, M, N);
}

inline std::size_t conv_out(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
    if (in + 2 * pad < k) throw ConfigError("convolution kernel larger than padded input");
    return (in + 2 * pad - k) / stride + 1;
}

}  // namespace detail

/// Cross-correlation. input [B,Cin,H,W], weight [Cout,Cin,k,k], bias [Cout].
template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias, std::size_t stride,
                 std::size_t pad) {
    if (input.rank() != 4 || weight.rank() != 4 || bias.rank() != 1)
        throw ConfigError("conv2d: expected ranks 4/4/1, got " + shape_str(input.shape()) + " " +
                          shape_str(weight.shape()) + " " + shape_str(bias.shape()));
    const std::size_t B = input.dim(0), cin = input.dim(1), H = input.dim(2), W = input.dim(3);
    const std::size_t cout = weight.dim(0), k = weight.dim(2);
    if (weight.dim(1) != cin || weight.dim(3) != k || bias.dim(0) != cout)
        throw ConfigError("conv2d: input " + shape_str(input.shape()) + " incompatible with weight " +
                          shape_str(weight.shape()) + " / bias " + shape_str(bias.shape()));
    if (k % 2 == 0) throw ConfigError("conv2d: kernel size must be odd, got " + std::to_string(k));
    if (stride < 1 || stride > 2) throw ConfigError("conv2d: stride must be 1 or 2");
    const detail::ConvGeometry g{cin, H, W, k, stride, pad, detail::conv_out(H, k, stride, pad),
                                 detail::conv_out(W, k, stride, pad)};
    const std::size_t K = g.rows(), P = g.cols();

    std::vector<T> out(B * cout * P);
    parallel_for(B, [&](std::size_t b) {
        std::vector<T> col(K * P);
        detail::im2col(input.data().data() + b * cin * H * W, g, col.data());
        T* o = out.data() + b * cout * P;
        for (std::size_t co = 0; co < cout; ++co) std::fill_n(o + co * P, P, bias.data()[co]);
        detail::gemm_acc(weight.data().data(), col.data(), o, cout, K, P);
    });

    return make_result<T>(
        "conv2d", {B, cout, g.out_h, g.out_w}, std::move(out), {input, weight, bias},
        [g, B, cout](TensorNode<T>& self) {
            auto& px = *self.parents[0];
            auto& pw = *self.parents[1];
            auto& pb = *self.parents[2];
            const std::size_t K = g.rows(), P = g.cols(), in_sz = g.channels * g.height * g.width;
            std::vector<std::vector<T>> dw(B), db(B);
            parallel_for(B, [&](std::size_t b) {
                const T* go = self.grad.data() + b * cout * P;
                if (pw.requires_grad) {
                    std::vector<T> col(K * P), colt(P * K);
                    detail::im2col(px.data.data() + b * in_sz, g, col.data());
                    detail::transpose(col.data(), K, P, colt.data());
                    dw[b].assign(cout * K, T(0));
                    detail::gemm_acc(go, colt.data(), dw[b].data(), cout, P, K);
                }
                if (pb.requires_grad) {
                    db[b].assign(cout, T(0));
                    for (std::size_t co = 0; co < cout; ++co) {
                        double s = 0.0;
                        for (std::size_t p = 0; p < P; ++p) s += go[co * P + p];
                        db[b][co] = static_cast<T>(s);
                    }
                }
                if (px.requires_grad) {
                    std::vector<T> dcol(K * P, T(0));
                    detail::gemm_tn_acc(pw.data.data(), go, dcol.data(), cout, K, P);
                    detail::col2im(dcol.data(), g, px.grad.data() + b * in_sz);
                }
            });
            for (std::size_t b = 0; b < B; ++b) {
                for (std::size_t i = 0; i < dw[b].size(); ++i) pw.grad[i] += dw[b][i];
                for (std::size_t i = 0; i < db[b].size(); ++i) pb.grad[i] += db[b][i];
            }
        });
}

/// Transposed convolution (adjoint of conv2d with the same geometry).
/// input [B,Cin,h,w], weight [Cin,Cout,k,k], bias [Cout]. Output size is
/// (h-1)*stride - 2*pad + k + output_pad.
template <class T>
Tensor<T> conv_transpose2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                           std::size_t stride, std::size_t pad, std::size_t output_pad) {
    if (input.rank() != 4 || weight.rank() != 4 || bias.rank() != 1)
        throw ConfigError("conv_transpose2d: expected ranks 4/4/1");
    const std::size_t B = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
    const std::size_t cout = weight.dim(1), k = weight.dim(2);
    if (weight.dim(0) != cin || weight.dim(3) != k || bias.dim(0) != cout)
        throw ConfigError("conv_transpose2d: input " + shape_str(input.shape()) + " incompatible with weight " +
                          shape_str(weight.shape()) + " / bias " + shape_str(bias.shape()));
    if (output_pad >= stride) throw ConfigError("conv_transpose2d: output_pad must be < stride");
    const long Hl = static_cast<long>((h - 1) * stride + k + output_pad) - 2 * static_cast<long>(pad);
    const long Wl = static_cast<long>((w - 1) * stride + k + output_pad) - 2 * static_cast<long>(pad);
    if (Hl <= 0 || Wl <= 0) throw ConfigError("conv_transpose2d: empty output");
    const detail::ConvGeometry g{cout, static_cast<std::size_t>(Hl), static_cast<std::size_t>(Wl), k, stride, pad,
                                 h, w};
    if (detail::conv_out(g.height, k, stride, pad) != h || detail::conv_out(g.width, k, stride, pad) != w)
        throw ConfigError("conv_transpose2d: output size " + std::to_string(Hl) + "x" + std::to_string(Wl) +
                          " does not map back onto input grid " + std::to_string(h) + "x" + std::to_string(w));
    const std::size_t K = g.rows(), P = g.cols(), out_sz = cout * g.height * g.width;

    std::vector<T> out(B * out_sz);
    parallel_for(B, [&](std::size_t b) {
        std::vector<T> col(K * P, T(0));
        detail::gemm_tn_acc(weight.data().data(), input.data().data() + b * cin * P, col.data(), cin, K, P);
        T* o = out.data() + b * out_sz;
        const std::size_t hw = g.height * g.width;
        for (std::size_t co = 0; co < cout; ++co) std::fill_n(o + co * hw, hw, bias.data()[co]);
        detail::col2im(col.data(), g, o);
    });

    return make_result<T>(
        "conv_transpose2d", {B, cout, g.height, g.width}, std::move(out), {input, weight, bias},
        [g, B, cin, cout](TensorNode<T>& self) {
            auto& px = *self.parents[0];
            auto& pw = *self.parents[1];
            auto& pb = *self.parents[2];
            const std::size_t K = g.rows(), P = g.cols(), hw = g.height * g.width, out_sz = cout * hw;
            std::vector<std::vector<T>> dw(B), db(B);
            parallel_for(B, [&](std::size_t b) {
                const T* go = self.grad.data() + b * out_sz;
                std::vector<T> gcol(K * P);
                detail::im2col(go, g, gcol.data());
                if (px.requires_grad)
                    detail::gemm_acc(pw.data.data(), gcol.data(), px.grad.data() + b * cin * P, cin, K, P);
                if (pw.requires_grad) {
                    std::vector<T> gcolt(P * K);
                    detail::transpose(gcol.data(), K, P, gcolt.data());
                    dw[b].assign(cin * K, T(0));
                    detail::gemm_acc(px.data.data() + b * cin * P, gcolt.data(), dw[b].data(), cin, P, K);
                }
                if (pb.requires_grad) {
                    db[b].assign(cout, T(0));
                    for (std::size_t co = 0; co < cout; ++co) {
                        double s = 0.0;
                        for (std::size_t p = 0; p < hw; ++p) s += go[co * hw + p];
                        db[b][co] = static_cast<T>(s);
                    }
                }
            });
            for (std::size_t b = 0; b < B; ++b) {
                for (std::size_t i = 0; i < dw[b].size(); ++i) pw.grad[i] += dw[b][i];
                for (std::size_t i = 0; i < db[b].size(); ++i) pb.grad[i] += db[b][i];
            }
        });
}

/// Affine map: input [N,din], weight [dout,din], bias [dout].
template <class T>
Tensor<T> dense(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
    if (input.rank() != 2 || weight.rank() != 2 || bias.rank() != 1 || weight.dim(1) != input.dim(1) ||
        bias.dim(0) != weight.dim(0))
        throw ConfigError("dense: input " + shape_str(input.shape()) + " incompatible with weight " +
                          shape_str(weight.shape()) + " / bias " + shape_str(bias.shape()));
    const std::size_t N = input.dim(0), din = input.dim(1), dout = weight.dim(0);
    std::vector<T> out(N * dout);
    const T* x = input.data().data();
    const T* w = weight.data().data();
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t o = 0; o < dout; ++o) {
            double s = bias.data()[o];
            for (std::size_t i = 0; i < din; ++i) s += static_cast<double>(x[n * din + i]) * w[o * din + i];
            out[n * dout + o] = static_cast<T>(s);
        }
    return make_result<T>("dense", {N, dout}, std::move(out), {input, weight, bias},
                          [N, din, dout](TensorNode<T>& self) {
                              auto& px = *self.parents[0];
                              auto& pw = *self.parents[1];
                              auto& pb = *self.parents[2];
                              const T* g = self.grad.data();
                              if (px.requires_grad)
                                  for (std::size_t n = 0; n < N; ++n)
                                      for (std::size_t i = 0; i < din; ++i) {
                                          double s = 0.0;
                                          for (std::size_t o = 0; o < dout; ++o)
                                              s += static_cast<double>(g[n * dout + o]) * pw.data[o * din + i];
                                          px.grad[n * din + i] += static_cast<T>(s);
                                      }
                              if (pw.requires_grad || pb.requires_grad) {
                                  std::vector<double> dw(dout * din, 0.0), db(dout, 0.0);
                                  for (std::size_t n = 0; n < N; ++n)
                                      for (std::size_t o = 0; o < dout; ++o) {
                                          const double go = g[n * dout + o];
                                          db[o] += go;
                                          for (std::size_t i = 0; i < din; ++i)
                                              dw[o * din + i] += go * px.data[n * din + i];
                                      }
                                  if (pw.requires_grad)
                                      for (std::size_t i = 0; i < dw.size(); ++i) pw.grad[i] += static_cast<T>(dw[i]);
                                  if (pb.requires_grad)
                                      for (std::size_t i = 0; i < db.size(); ++i) pb.grad[i] += static_cast<T>(db[i]);
                              }
                          });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
    std::vector<T> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] > T(0) ? x.data()[i] : T(0);
    return make_result<T>("relu", x.shape(), std::move(out), {x}, [](TensorNode<T>& self) {
        auto& p = *self.parents[0];
        // Subgradient at 0 is 0.
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            if (p.data[i] > T(0)) p.grad[i] += self.grad[i];
    });
}

template <class T>
Tensor<T> tanh(const Tensor<T>& x) {
    std::vector<T> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(x.data()[i]);
    return make_result<T>("tanh", x.shape(), std::move(out), {x}, [](TensorNode<T>& self) {
        auto& p = *self.parents[0];
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const T y = self.data[i];
            p.grad[i] += self.grad[i] * (T(1) - y * y);
        }
    });
}

/// Softmax over the last dimension.
template <class T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
    if (x.rank() < 1) throw ConfigError("softmax_rows on scalar");
    const std::size_t D = x.shape().back(), R = x.numel() / D;
    std::vector<T> out(x.numel());
    for (std::size_t r = 0; r < R; ++r) {
        const T* in = x.data().data() + r * D;
        const T mx = *std::max_element(in, in + D);
        double z = 0.0;
        std::vector<double> e(D);
        for (std::size_t j = 0; j < D; ++j) z += (e[j] = std::exp(static_cast<double>(in[j] - mx)));
        for (std::size_t j = 0; j < D; ++j) out[r * D + j] = static_cast<T>(e[j] / z);
    }
    return make_result<T>("softmax_rows", x.shape(), std::move(out), {x}, [R, D](TensorNode<T>& self) {
        auto& p = *self.parents[0];
        for (std::size_t r = 0; r < R; ++r) {
            const T* y = self.data.data() + r * D;
            const T* g = self.grad.data() + r * D;
            double dot = 0.0;
            for (std::size_t j = 0; j < D; ++j) dot += static_cast<double>(g[j]) * y[j];
            for (std::size_t j = 0; j < D; ++j) p.grad[r * D + j] += static_cast<T>(y[j] * (g[j] - dot));
        }
    });
}

/// Per-(sample, channel) normalization over spatial dims with affine
/// gamma/beta [C]. x is [B,C,H,W].
template <class T>
Tensor<T> instance_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, double eps = 1e-5) {
    if (x.rank() != 4 || gamma.numel() != x.dim(1) || beta.numel() != x.dim(1))
        throw ConfigError("instance_norm: x " + shape_str(x.shape()) + " gamma " + shape_str(gamma.shape()));
    const std::size_t B = x.dim(0), C = x.dim(1), hw = x.dim(2) * x.dim(3);
    std::vector<T> out(x.numel()), xhat(x.numel());
    std::vector<double> inv_std(B * C);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c) {
            const T* in = x.data().data() + (b * C + c) * hw;
            double m = 0.0;
            for (std::size_t i = 0; i < hw; ++i) m += in[i];
            m /= static_cast<double>(hw);
            double v = 0.0;
            for (std::size_t i = 0; i < hw; ++i) v += (in[i] - m) * (in[i] - m);
            v /= static_cast<double>(hw);
            const double is = 1.0 / std::sqrt(v + eps);
            inv_std[b * C + c] = is;
            for (std::size_t i = 0; i < hw; ++i) {
                const std::size_t k = (b * C + c) * hw + i;
                xhat[k] = static_cast<T>((in[i] - m) * is);
                out[k] = gamma.data()[c] * xhat[k] + beta.data()[c];
            }
        }
    return make_result<T>(
        "instance_norm", x.shape(), std::move(out), {x, gamma, beta},
        [B, C, hw, xhat = std::move(xhat), inv_std = std::move(inv_std)](TensorNode<T>& self) {
            auto& px = *self.parents[0];
            auto& pg = *self.parents[1];
            auto& pb = *self.parents[2];
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t c = 0; c < C; ++c) {
                    const std::size_t base = (b * C + c) * hw;
                    double sg = 0.0, sgx = 0.0;
                    for (std::size_t i = 0; i < hw; ++i) {
                        sg += self.grad[base + i];
                        sgx += static_cast<double>(self.grad[base + i]) * xhat[base + i];
                    }
                    if (pg.requires_grad) pg.grad[c] += static_cast<T>(sgx);
                    if (pb.requires_grad) pb.grad[c] += static_cast<T>(sg);
                    if (px.requires_grad) {
                        const double gm = pg.data[c];
                        const double mg = sg / static_cast<double>(hw), mgx = sgx / static_cast<double>(hw);
                        const double is = inv_std[b * C + c];
                        for (std::size_t i = 0; i < hw; ++i)
                            px.grad[base + i] +=
                                static_cast<T>(gm * is * (self.grad[base + i] - mg - xhat[base + i] * mgx));
                    }
                }
        });
}

/// Inverted dropout: in training, zeroes each element with probability p and
/// scales survivors by 1/(1-p). Identity when train is false.
template <class T>
Tensor<T> dropout(const Tensor<T>& x, double p, bool train, Rng& rng) {
    if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout: p must lie in [0,1), got " + std::to_string(p));
    if (!train || p == 0.0) return x;
    const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
    std::vector<T> mask(x.numel()), out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        mask[i] = rng.uniform() >= p ? keep_scale : T(0);
        out[i] = x.data()[i] * mask[i];
    }
    return make_result<T>("dropout", x.shape(), std::move(out), {x}, [mask = std::move(mask)](TensorNode<T>& self) {
        auto& px = *self.parents[0];
        for (std::size_t i = 0; i < self.grad.size(); ++i) px.grad[i] += self.grad[i] * mask[i];
    });
}

}  // namespace adm
