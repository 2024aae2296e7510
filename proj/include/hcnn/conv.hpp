#pragma once

#include <cassert>
#include <cstddef>
#include <span>
#include <vector>

#include "hcnn/errors.hpp"
#include "hcnn/parallel.hpp"
#include "hcnn/tensor.hpp"

namespace hcnn {

// Convolution convention, used by every kernel in this header:
//   out[n] = sum_d w[d] * z[n*stride + d - floor(support/2)]   per axis.
// Odd supports are centered; even supports anchor at index support/2.
// Output length is ceil(in_len / stride) in both boundary modes; strided
// outputs keep input phases 0, s, 2s, ...

inline std::size_t conv_out_len(std::size_t in_len, std::size_t stride) {
    assert(stride > 0);
    return (in_len + stride - 1) / stride;
}

// Precomputed source indices for one convolved axis: src(n, d) is the input
// position read by output n at filter tap d, or -1 when the read falls
// outside under zero padding.
struct TapTable {
    std::size_t out_len = 0;
    std::size_t support = 0;
    std::vector<int> src;
    int at(std::size_t n, std::size_t d) const { return src[n * support + d]; }
};

inline TapTable make_taps(std::size_t in_len, std::size_t support,
                          std::size_t stride, BoundaryMode mode) {
    if (stride == 0) throw config_error("stride must be positive");
    if (in_len == 0) throw config_error("empty convolution axis");
    if (mode == BoundaryMode::Periodic && support > in_len)
        throw config_error("periodic mode requires support <= axis length");
    TapTable t;
    t.out_len = conv_out_len(in_len, stride);
    t.support = support;
    t.src.resize(t.out_len * support);
    const long long anchor = static_cast<long long>(support / 2);
    const long long len = static_cast<long long>(in_len);
    for (std::size_t n = 0; n < t.out_len; ++n)
        for (std::size_t d = 0; d < support; ++d) {
            long long pos = static_cast<long long>(n * stride) +
                            static_cast<long long>(d) - anchor;
            if (pos < 0 || pos >= len) {
                if (mode == BoundaryMode::ZeroPad) {
                    t.src[n * support + d] = -1;
                    continue;
                }
                pos %= len;
                if (pos < 0) pos += len;
            }
            t.src[n * support + d] = static_cast<int>(pos);
        }
    return t;
}

// General N-dimensional convolution along `axes` of z with kernel w (one w
// axis per entry of `axes`). Not the training hot path; the model uses the
// specialized kernels below.
template <class T>
Tensor<T> conv_nd(const Tensor<T>& z, const Tensor<T>& w,
                  std::span<const std::size_t> axes, BoundaryMode mode,
                  std::span<const std::size_t> strides) {
    if (axes.size() != w.rank())
        throw config_error("conv_nd: one filter axis per convolved axis");
    if (axes.size() != strides.size())
        throw config_error("conv_nd: one stride per convolved axis");
    for (std::size_t k = 0; k < axes.size(); ++k) {
        if (axes[k] >= z.rank()) throw config_error("conv_nd: bad axis");
        for (std::size_t m = k + 1; m < axes.size(); ++m)
            if (axes[k] == axes[m])
                throw config_error("conv_nd: duplicate axis");
    }

    std::vector<TapTable> taps(axes.size());
    std::vector<std::size_t> oshape = z.shape();
    for (std::size_t k = 0; k < axes.size(); ++k) {
        taps[k] = make_taps(z.dim(axes[k]), w.dim(k), strides[k], mode);
        oshape[axes[k]] = taps[k].out_len;
    }
    Tensor<T> out(oshape);
    if (out.size() == 0) return out;

    std::vector<std::size_t> oidx(oshape.size(), 0);
    std::vector<std::size_t> widx(w.rank(), 0);
    std::vector<std::size_t> zidx(z.rank(), 0);
    for (std::size_t o = 0; o < out.size(); ++o) {
        T acc{};
        std::fill(widx.begin(), widx.end(), 0);
        for (std::size_t t = 0; t < w.size(); ++t) {
            zidx.assign(oidx.begin(), oidx.end());
            bool inside = true;
            for (std::size_t k = 0; k < axes.size(); ++k) {
                int s = taps[k].at(oidx[axes[k]], widx[k]);
                if (s < 0) { inside = false; break; }
                zidx[axes[k]] = static_cast<std::size_t>(s);
            }
            if (inside) {
                std::size_t zoff = 0;
                for (std::size_t d = 0; d < z.rank(); ++d)
                    zoff = zoff * z.dim(d) + zidx[d];
                acc += w.flat(t) * z.flat(zoff);
            }
            for (std::size_t d = w.rank(); d-- > 0;) {
                if (++widx[d] < w.dim(d)) break;
                widx[d] = 0;
            }
        }
        out.flat(o) = acc;
        for (std::size_t d = oshape.size(); d-- > 0;) {
            if (++oidx[d] < oshape[d]) break;
            oidx[d] = 0;
        }
    }
    return out;
}

template <class T>
Tensor<T> conv_nd(const Tensor<T>& z, const Tensor<T>& w,
                  std::initializer_list<std::size_t> axes, BoundaryMode mode,
                  std::initializer_list<std::size_t> strides) {
    return conv_nd(z, w, std::span<const std::size_t>(axes.begin(), axes.size()),
                   mode, std::span<const std::size_t>(strides.begin(),
                                                      strides.size()));
}

// ---- layer 1: RGB image to first attribute layer -------------------------
// in (B, U1, U2, Cin), filters (Kout, Cin, S1, S2) -> out (B, U1, U2, Kout).
// The channel axis is contracted; spatial stride is always 1 here.

template <class T>
Tensor<T> image_conv_forward(const Tensor<T>& in, const Tensor<T>& w,
                             BoundaryMode mode, int threads = 1) {
    assert(in.rank() == 4 && w.rank() == 4);
    const std::size_t B = in.dim(0), U1 = in.dim(1), U2 = in.dim(2),
                      C = in.dim(3);
    const std::size_t K = w.dim(0), S1 = w.dim(2), S2 = w.dim(3);
    if (w.dim(1) != C) throw config_error("image_conv: channel mismatch");
    TapTable t1 = make_taps(U1, S1, 1, mode), t2 = make_taps(U2, S2, 1, mode);

    // Tap-major filter repack: (S1, S2, Cin, Kout), output channel innermost.
    Tensor<T> wp({S1, S2, C, K});
    for (std::size_t k = 0; k < K; ++k)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t d1 = 0; d1 < S1; ++d1)
                for (std::size_t d2 = 0; d2 < S2; ++d2)
                    wp(d1, d2, c, k) = w(k, c, d1, d2);

    Tensor<T> out({B, U1, U2, K});
    parallel_for(B * U1, threads, [&](std::size_t bu) {
        const std::size_t b = bu / U1, u1 = bu % U1;
        for (std::size_t u2 = 0; u2 < U2; ++u2) {
            T* orow = out.data() + ((b * U1 + u1) * U2 + u2) * K;
            for (std::size_t d1 = 0; d1 < S1; ++d1) {
                const int s1 = t1.at(u1, d1);
                if (s1 < 0) continue;
                for (std::size_t d2 = 0; d2 < S2; ++d2) {
                    const int s2 = t2.at(u2, d2);
                    if (s2 < 0) continue;
                    const T* irow =
                        in.data() + ((b * U1 + s1) * U2 + s2) * C;
                    const T* wrow = wp.data() + (d1 * S2 + d2) * C * K;
                    for (std::size_t c = 0; c < C; ++c) {
                        const T x = irow[c];
                        const T* wk = wrow + c * K;
                        for (std::size_t k = 0; k < K; ++k)
                            orow[k] += x * wk[k];
                    }
                }
            }
        }
    });
    return out;
}

// Filter gradient for layer 1; the image is network input, so no data
// gradient is ever needed below this layer.
template <class T>
Tensor<T> image_conv_grad_filter(const Tensor<T>& in, const Tensor<T>& gout,
                                 std::size_t S1, std::size_t S2,
                                 BoundaryMode mode, int threads = 1) {
    const std::size_t B = in.dim(0), U1 = in.dim(1), U2 = in.dim(2),
                      C = in.dim(3);
    const std::size_t K = gout.dim(3);
    TapTable t1 = make_taps(U1, S1, 1, mode), t2 = make_taps(U2, S2, 1, mode);

    Tensor<T> gw({K, C, S1, S2});
    parallel_for(S1 * S2, threads, [&](std::size_t tap) {
        const std::size_t d1 = tap / S2, d2 = tap % S2;
        std::vector<T> acc(C * K, T{});
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t u1 = 0; u1 < U1; ++u1) {
                const int s1 = t1.at(u1, d1);
                if (s1 < 0) continue;
                for (std::size_t u2 = 0; u2 < U2; ++u2) {
                    const int s2 = t2.at(u2, d2);
                    if (s2 < 0) continue;
                    const T* irow =
                        in.data() + ((b * U1 + s1) * U2 + s2) * C;
                    const T* grow =
                        gout.data() + ((b * U1 + u1) * U2 + u2) * K;
                    for (std::size_t c = 0; c < C; ++c) {
                        T* a = acc.data() + c * K;
                        const T x = irow[c];
                        for (std::size_t k = 0; k < K; ++k)
                            a[k] += x * grow[k];
                    }
                }
            }
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t k = 0; k < K; ++k)
                gw(k, c, d1, d2) = acc[c * K + k];
    });
    return gw;
}

// ---- dense attribute convolution (layers 2 and 3) -------------------------
// in (B, U1, U2, A, R), filters (Kout, S1, S2, Sa, Sr), strides
// (1, sa, sr) on (u, A, R) -> out (B, U1, U2, A', R', Kout).
// Layer 2 passes A = 1, Sa = 1; layer 3 passes (sa, sr) = (4, 2).

struct DenseConvGeom {
    std::size_t sa = 1, sr = 1;        // attribute strides
    std::size_t su = 1;                // spatial stride (1 for layers 2-3)
    BoundaryMode mode = BoundaryMode::ZeroPad;
};

template <class T>
Tensor<T> dense_attr_forward(const Tensor<T>& in, const Tensor<T>& w,
                             const DenseConvGeom& g, int threads = 1) {
    assert(in.rank() == 5 && w.rank() == 5);
    const std::size_t B = in.dim(0), U1 = in.dim(1), U2 = in.dim(2),
                      A = in.dim(3), R = in.dim(4);
    const std::size_t K = w.dim(0), S1 = w.dim(1), S2 = w.dim(2),
                      Sa = w.dim(3), Sr = w.dim(4);
    TapTable t1 = make_taps(U1, S1, g.su, g.mode),
             t2 = make_taps(U2, S2, g.su, g.mode),
             ta = make_taps(A, Sa, g.sa, g.mode),
             tr = make_taps(R, Sr, g.sr, g.mode);
    const std::size_t O1 = t1.out_len, O2 = t2.out_len, Ao = ta.out_len,
                      Ro = tr.out_len;

    // Tap-major repack with the output channel innermost.
    Tensor<T> wp({S1, S2, Sa, Sr, K});
    for (std::size_t k = 0; k < K; ++k)
        for (std::size_t d1 = 0; d1 < S1; ++d1)
            for (std::size_t d2 = 0; d2 < S2; ++d2)
                for (std::size_t da = 0; da < Sa; ++da)
                    for (std::size_t dr = 0; dr < Sr; ++dr)
                        wp(d1, d2, da, dr, k) = w(k, d1, d2, da, dr);

    Tensor<T> out({B, O1, O2, Ao, Ro, K});
    parallel_for(B * O1, threads, [&](std::size_t bu) {
        const std::size_t b = bu / O1, u1 = bu % O1;
        std::vector<T> acc(K);
        for (std::size_t u2 = 0; u2 < O2; ++u2)
            for (std::size_t p = 0; p < Ao; ++p)
                for (std::size_t r = 0; r < Ro; ++r) {
                    std::fill(acc.begin(), acc.end(), T{});
                    for (std::size_t d1 = 0; d1 < S1; ++d1) {
                        const int s1 = t1.at(u1, d1);
                        if (s1 < 0) continue;
                        for (std::size_t d2 = 0; d2 < S2; ++d2) {
                            const int s2 = t2.at(u2, d2);
                            if (s2 < 0) continue;
                            const T* iplane =
                                in.data() +
                                ((b * U1 + s1) * U2 + s2) * A * R;
                            for (std::size_t da = 0; da < Sa; ++da) {
                                const int pa = ta.at(p, da);
                                if (pa < 0) continue;
                                for (std::size_t dr = 0; dr < Sr; ++dr) {
                                    const int pr = tr.at(r, dr);
                                    if (pr < 0) continue;
                                    const T x = iplane[pa * R + pr];
                                    const T* wk =
                                        wp.data() +
                                        (((d1 * S2 + d2) * Sa + da) * Sr +
                                         dr) * K;
                                    for (std::size_t k = 0; k < K; ++k)
                                        acc[k] += x * wk[k];
                                }
                            }
                        }
                    }
                    T* orow = out.data() +
                              ((((b * O1 + u1) * O2 + u2) * Ao + p) * Ro +
                               r) * K;
                    for (std::size_t k = 0; k < K; ++k) orow[k] = acc[k];
                }
    });
    return out;
}

// Gather-form data gradient: every input element accumulates its own sum,
// so the result is independent of the thread split.
template <class T>
Tensor<T> dense_attr_grad_data(const Tensor<T>& gout, const Tensor<T>& w,
                               const std::vector<std::size_t>& in_shape,
                               const DenseConvGeom& g, int threads = 1) {
    const std::size_t B = in_shape[0], U1 = in_shape[1], U2 = in_shape[2],
                      A = in_shape[3], R = in_shape[4];
    const std::size_t K = w.dim(0), S1 = w.dim(1), S2 = w.dim(2),
                      Sa = w.dim(3), Sr = w.dim(4);
    TapTable t1 = make_taps(U1, S1, g.su, g.mode),
             t2 = make_taps(U2, S2, g.su, g.mode),
             ta = make_taps(A, Sa, g.sa, g.mode),
             tr = make_taps(R, Sr, g.sr, g.mode);
    const std::size_t O1 = t1.out_len, O2 = t2.out_len, Ao = ta.out_len,
                      Ro = tr.out_len;

    // Reverse maps: for each input position along an axis, the (out, tap)
    // pairs that read it. Built by scanning the forward tables.
    auto reverse_map = [](const TapTable& t, std::size_t in_len) {
        std::vector<std::vector<std::pair<int, int>>> rm(in_len);
        for (std::size_t n = 0; n < t.out_len; ++n)
            for (std::size_t d = 0; d < t.support; ++d) {
                int s = t.at(n, d);
                if (s >= 0)
                    rm[static_cast<std::size_t>(s)].emplace_back(
                        static_cast<int>(n), static_cast<int>(d));
            }
        return rm;
    };
    auto r1 = reverse_map(t1, U1), r2 = reverse_map(t2, U2),
         rA = reverse_map(ta, A), rR = reverse_map(tr, R);

    // Tap-major repack so the inner k-loop reads both factors contiguously.
    Tensor<T> wp({S1, S2, Sa, Sr, K});
    for (std::size_t k = 0; k < K; ++k)
        for (std::size_t d1 = 0; d1 < S1; ++d1)
            for (std::size_t d2 = 0; d2 < S2; ++d2)
                for (std::size_t da = 0; da < Sa; ++da)
                    for (std::size_t dr = 0; dr < Sr; ++dr)
                        wp(d1, d2, da, dr, k) = w(k, d1, d2, da, dr);

    Tensor<T> gin({B, U1, U2, A, R});
    parallel_for(B * U1, threads, [&](std::size_t bu) {
        const std::size_t b = bu / U1, u1 = bu % U1;
        for (std::size_t u2 = 0; u2 < U2; ++u2)
            for (std::size_t a = 0; a < A; ++a)
                for (std::size_t r = 0; r < R; ++r) {
                    T acc{};
                    for (auto [o1, d1] : r1[u1])
                        for (auto [o2, d2] : r2[u2])
                            for (auto [pa, da] : rA[a])
                                for (auto [pr, dr] : rR[r]) {
                                    const T* grow =
                                        gout.data() +
                                        ((((b * O1 + o1) * O2 + o2) * Ao +
                                          pa) * Ro + pr) * K;
                                    const T* wk =
                                        wp.data() +
                                        (((static_cast<std::size_t>(d1) * S2 +
                                           d2) * Sa + da) * Sr + dr) * K;
                                    for (std::size_t k = 0; k < K; ++k)
                                        acc += grow[k] * wk[k];
                                }
                    gin(b, u1, u2, a, r) = acc;
                }
    });
    return gin;
}

template <class T>
Tensor<T> dense_attr_grad_filter(const Tensor<T>& in, const Tensor<T>& gout,
                                 const std::vector<std::size_t>& w_shape,
                                 const DenseConvGeom& g, int threads = 1) {
    const std::size_t B = in.dim(0), U1 = in.dim(1), U2 = in.dim(2),
                      A = in.dim(3), R = in.dim(4);
    const std::size_t K = w_shape[0], S1 = w_shape[1], S2 = w_shape[2],
                      Sa = w_shape[3], Sr = w_shape[4];
    TapTable t1 = make_taps(U1, S1, g.su, g.mode),
             t2 = make_taps(U2, S2, g.su, g.mode),
             ta = make_taps(A, Sa, g.sa, g.mode),
             tr = make_taps(R, Sr, g.sr, g.mode);
    const std::size_t O1 = t1.out_len, O2 = t2.out_len, Ao = ta.out_len,
                      Ro = tr.out_len;

    Tensor<T> gw({K, S1, S2, Sa, Sr});
    parallel_for(S1 * S2 * Sa * Sr, threads, [&](std::size_t tap) {
        std::size_t rest = tap;
        const std::size_t dr = rest % Sr; rest /= Sr;
        const std::size_t da = rest % Sa; rest /= Sa;
        const std::size_t d2 = rest % S2; rest /= S2;
        const std::size_t d1 = rest;
        std::vector<T> acc(K, T{});
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t u1 = 0; u1 < O1; ++u1) {
                const int s1 = t1.at(u1, d1);
                if (s1 < 0) continue;
                for (std::size_t u2 = 0; u2 < O2; ++u2) {
                    const int s2 = t2.at(u2, d2);
                    if (s2 < 0) continue;
                    for (std::size_t p = 0; p < Ao; ++p) {
                        const int pa = ta.at(p, da);
                        if (pa < 0) continue;
                        for (std::size_t r = 0; r < Ro; ++r) {
                            const int pr = tr.at(r, dr);
                            if (pr < 0) continue;
                            const T x =
                                in(b, static_cast<std::size_t>(s1),
                                   static_cast<std::size_t>(s2),
                                   static_cast<std::size_t>(pa),
                                   static_cast<std::size_t>(pr));
                            const T* grow =
                                gout.data() +
                                ((((b * O1 + u1) * O2 + u2) * Ao + p) * Ro +
                                 r) * K;
                            for (std::size_t k = 0; k < K; ++k)
                                acc[k] += x * grow[k];
                        }
                    }
                }
            }
        for (std::size_t k = 0; k < K; ++k)
            gw(k, d1, d2, da, dr) = acc[k];
    });
    return gw;
}

// ---- separable stage kernels (layers 4 .. J-1) ----------------------------
// h-stage: in (B, U1, U2, A, R), filters (Q, S1, S2) -> full-resolution
// out (B, U1, U2, A, R, Q). Normalization and the g-stage read follow.

template <class T>
Tensor<T> spatial_bank_forward(const Tensor<T>& in, const Tensor<T>& h,
                               BoundaryMode mode, int threads = 1) {
    assert(in.rank() == 5 && h.rank() == 3);
    const std::size_t B = in.dim(0), U1 = in.dim(1), U2 = in.dim(2),
                      A = in.dim(3), R = in.dim(4);
    const std::size_t Q = h.dim(0), S1 = h.dim(1), S2 = h.dim(2);
    TapTable t1 = make_taps(U1, S1, 1, mode), t2 = make_taps(U2, S2, 1, mode);
    const std::size_t M = A * R;

    Tensor<T> hp({S1, S2, Q});
    for (std::size_t q = 0; q < Q; ++q)
        for (std::size_t d1 = 0; d1 < S1; ++d1)
            for (std::size_t d2 = 0; d2 < S2; ++d2)
                hp(d1, d2, q) = h(q, d1, d2);

    Tensor<T> out({B, U1, U2, A, R, Q});
    parallel_for(B * U1, threads, [&](std::size_t bu) {
        const std::size_t b = bu / U1, u1 = bu % U1;
        for (std::size_t u2 = 0; u2 < U2; ++u2) {
            T* obase = out.data() + ((b * U1 + u1) * U2 + u2) * M * Q;
            for (std::size_t d1 = 0; d1 < S1; ++d1) {
                const int s1 = t1.at(u1, d1);
                if (s1 < 0) continue;
                for (std::size_t d2 = 0; d2 < S2; ++d2) {
                    const int s2 = t2.at(u2, d2);
                    if (s2 < 0) continue;
                    const T* irow =
                        in.data() + ((b * U1 + s1) * U2 + s2) * M;
                    const T* hq = hp.data() + (d1 * S2 + d2) * Q;
                    for (std::size_t m = 0; m < M; ++m) {
                        const T x = irow[m];
                        T* orow = obase + m * Q;
                        for (std::size_t q = 0; q < Q; ++q)
                            orow[q] += x * hq[q];
                    }
                }
            }
        }
    });
    return out;
}

template <class T>
Tensor<T> spatial_bank_grad_data(const Tensor<T>& gt, const Tensor<T>& h,
                                 BoundaryMode mode, int threads = 1) {
    const std::size_t B = gt.dim(0), U1 = gt.dim(1), U2 = gt.dim(2),
                      A = gt.dim(3), R = gt.dim(4), Q = gt.dim(5);
    const std::size_t S1 = h.dim(1), S2 = h.dim(2);
    TapTable t1 = make_taps(U1, S1, 1, mode), t2 = make_taps(U2, S2, 1, mode);
    auto reverse_map = [](const TapTable& t, std::size_t in_len) {
        std::vector<std::vector<std::pair<int, int>>> rm(in_len);
        for (std::size_t n = 0; n < t.out_len; ++n)
            for (std::size_t d = 0; d < t.support; ++d) {
                int s = t.at(n, d);
                if (s >= 0) rm[s].emplace_back(static_cast<int>(n),
                                               static_cast<int>(d));
            }
        return rm;
    };
    auto r1 = reverse_map(t1, U1), r2 = reverse_map(t2, U2);
    const std::size_t M = A * R;

    // Tap-major repack (S1, S2, Q) for contiguous q rows.
    Tensor<T> hp({S1, S2, Q});
    for (std::size_t q = 0; q < Q; ++q)
        for (std::size_t d1 = 0; d1 < S1; ++d1)
            for (std::size_t d2 = 0; d2 < S2; ++d2)
                hp(d1, d2, q) = h(q, d1, d2);

    Tensor<T> gin({B, U1, U2, A, R});
    parallel_for(B * U1, threads, [&](std::size_t bu) {
        const std::size_t b = bu / U1, u1 = bu % U1;
        for (std::size_t u2 = 0; u2 < U2; ++u2) {
            T* gbase = gin.data() + ((b * U1 + u1) * U2 + u2) * M;
            for (auto [o1, d1] : r1[u1])
                for (auto [o2, d2] : r2[u2]) {
                    const T* trow =
                        gt.data() + ((b * U1 + o1) * U2 + o2) * M * Q;
                    const T* hq =
                        hp.data() +
                        (static_cast<std::size_t>(d1) * S2 + d2) * Q;
                    for (std::size_t m = 0; m < M; ++m) {
                        T acc{};
                        const T* tq = trow + m * Q;
                        for (std::size_t q = 0; q < Q; ++q)
                            acc += tq[q] * hq[q];
                        gbase[m] += acc;
                    }
                }
        }
    });
    return gin;
}

template <class T>
Tensor<T> spatial_bank_grad_filter(const Tensor<T>& in, const Tensor<T>& gt,
                                   std::size_t S1, std::size_t S2,
                                   BoundaryMode mode, int threads = 1) {
    const std::size_t B = in.dim(0), U1 = in.dim(1), U2 = in.dim(2),
                      A = in.dim(3), R = in.dim(4);
    const std::size_t Q = gt.dim(5);
    TapTable t1 = make_taps(U1, S1, 1, mode), t2 = make_taps(U2, S2, 1, mode);
    const std::size_t M = A * R;

    Tensor<T> gh({Q, S1, S2});
    parallel_for(S1 * S2, threads, [&](std::size_t tap) {
        const std::size_t d1 = tap / S2, d2 = tap % S2;
        std::vector<T> acc(Q, T{});
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t u1 = 0; u1 < U1; ++u1) {
                const int s1 = t1.at(u1, d1);
                if (s1 < 0) continue;
                for (std::size_t u2 = 0; u2 < U2; ++u2) {
                    const int s2 = t2.at(u2, d2);
                    if (s2 < 0) continue;
                    const T* irow =
                        in.data() + ((b * U1 + s1) * U2 + s2) * M;
                    const T* trow =
                        gt.data() + ((b * U1 + u1) * U2 + u2) * M * Q;
                    for (std::size_t m = 0; m < M; ++m) {
                        const T x = irow[m];
                        const T* tq = trow + m * Q;
                        for (std::size_t q = 0; q < Q; ++q)
                            acc[q] += x * tq[q];
                    }
                }
            }
        for (std::size_t q = 0; q < Q; ++q) gh(q, d1, d2) = acc[q];
    });
    return gh;
}

// g-stage: t (B, U1, U2, A, R, Q), filters (Kout, Q, Sa, Sr), spatial
// stride su applied as a strided read, attribute strides (sa, sr) ->
// out (B, U1', U2', A', R', Kout).

struct AttrConvGeom {
    std::size_t su = 1, sa = 2, sr = 2;
    BoundaryMode mode = BoundaryMode::ZeroPad;
};

template <class T>
Tensor<T> attr_bank_forward(const Tensor<T>& t, const Tensor<T>& gfilt,
                            const AttrConvGeom& geo, int threads = 1) {
    assert(t.rank() == 6 && gfilt.rank() == 4);
    const std::size_t B = t.dim(0), U1 = t.dim(1), U2 = t.dim(2),
                      A = t.dim(3), R = t.dim(4), Q = t.dim(5);
    const std::size_t K = gfilt.dim(0), Sa = gfilt.dim(2), Sr = gfilt.dim(3);
    assert(gfilt.dim(1) == Q);
    TapTable ta = make_taps(A, Sa, geo.sa, geo.mode),
             tr = make_taps(R, Sr, geo.sr, geo.mode);
    const std::size_t O1 = conv_out_len(U1, geo.su),
                      O2 = conv_out_len(U2, geo.su);
    const std::size_t Ao = ta.out_len, Ro = tr.out_len;

    // Repack (Sa, Sr, Q, Kout): the microkernel walks q rows of length K.
    Tensor<T> gp({Sa, Sr, Q, K});
    for (std::size_t k = 0; k < K; ++k)
        for (std::size_t q = 0; q < Q; ++q)
            for (std::size_t da = 0; da < Sa; ++da)
                for (std::size_t dr = 0; dr < Sr; ++dr)
                    gp(da, dr, q, k) = gfilt(k, q, da, dr);

    Tensor<T> out({B, O1, O2, Ao, Ro, K});
    parallel_for(B * O1, threads, [&](std::size_t bu) {
        const std::size_t b = bu / O1, u1 = bu % O1;
        const std::size_t s1 = u1 * geo.su;
        std::vector<T> acc(K);
        for (std::size_t u2 = 0; u2 < O2; ++u2) {
            const std::size_t s2 = u2 * geo.su;
            const T* tplane = t.data() + ((b * U1 + s1) * U2 + s2) * A * R * Q;
            for (std::size_t p = 0; p < Ao; ++p)
                for (std::size_t r = 0; r < Ro; ++r) {
                    std::fill(acc.begin(), acc.end(), T{});
                    for (std::size_t da = 0; da < Sa; ++da) {
                        const int pa = ta.at(p, da);
                        if (pa < 0) continue;
                        for (std::size_t dr = 0; dr < Sr; ++dr) {
                            const int pr = tr.at(r, dr);
                            if (pr < 0) continue;
                            const T* tq = tplane + (pa * R + pr) * Q;
                            const T* gq =
                                gp.data() + (da * Sr + dr) * Q * K;
                            for (std::size_t q = 0; q < Q; ++q) {
                                const T x = tq[q];
                                const T* gk = gq + q * K;
                                for (std::size_t k = 0; k < K; ++k)
                                    acc[k] += x * gk[k];
                            }
                        }
                    }
                    T* orow = out.data() +
                              ((((b * O1 + u1) * O2 + u2) * Ao + p) * Ro +
                               r) * K;
                    for (std::size_t k = 0; k < K; ++k) orow[k] = acc[k];
                }
        }
    });
    return out;
}

// Data gradient of the g-stage, gather form. Spatial positions that are not
// multiples of su were never read, so their gradient stays zero.
template <class T>
Tensor<T> attr_bank_grad_data(const Tensor<T>& gout, const Tensor<T>& gfilt,
                              const std::vector<std::size_t>& t_shape,
                              const AttrConvGeom& geo, int threads = 1) {
    const std::size_t B = t_shape[0], U1 = t_shape[1], U2 = t_shape[2],
                      A = t_shape[3], R = t_shape[4], Q = t_shape[5];
    const std::size_t K = gfilt.dim(0), Sa = gfilt.dim(2), Sr = gfilt.dim(3);
    TapTable ta = make_taps(A, Sa, geo.sa, geo.mode),
             tr = make_taps(R, Sr, geo.sr, geo.mode);
    const std::size_t O1 = conv_out_len(U1, geo.su),
                      O2 = conv_out_len(U2, geo.su);
    const std::size_t Ao = ta.out_len, Ro = tr.out_len;
    auto reverse_map = [](const TapTable& t, std::size_t in_len) {
        std::vector<std::vector<std::pair<int, int>>> rm(in_len);
        for (std::size_t n = 0; n < t.out_len; ++n)
            for (std::size_t d = 0; d < t.support; ++d) {
                int s = t.at(n, d);
                if (s >= 0) rm[s].emplace_back(static_cast<int>(n),
                                               static_cast<int>(d));
            }
        return rm;
    };
    auto rA = reverse_map(ta, A), rR = reverse_map(tr, R);

    // Tap-major repack (Sa, Sr, Q, K): contiguous k rows in the inner loop.
    Tensor<T> gp({Sa, Sr, Q, K});
    for (std::size_t k = 0; k < K; ++k)
        for (std::size_t q = 0; q < Q; ++q)
            for (std::size_t da = 0; da < Sa; ++da)
                for (std::size_t dr = 0; dr < Sr; ++dr)
                    gp(da, dr, q, k) = gfilt(k, q, da, dr);

    Tensor<T> gt({B, U1, U2, A, R, Q});
    parallel_for(B * U1, threads, [&](std::size_t bu) {
        const std::size_t b = bu / U1, u1 = bu % U1;
        if (u1 % geo.su != 0) return;
        const std::size_t o1 = u1 / geo.su;
        if (o1 >= O1) return;
        for (std::size_t o2 = 0; o2 < O2; ++o2) {
            const std::size_t u2 = o2 * geo.su;
            T* tplane = gt.data() + ((b * U1 + u1) * U2 + u2) * A * R * Q;
            for (std::size_t a = 0; a < A; ++a)
                for (std::size_t r = 0; r < R; ++r) {
                    T* trow = tplane + (a * R + r) * Q;
                    for (auto [pa, da] : rA[a])
                        for (auto [pr, dr] : rR[r]) {
                            const T* grow =
                                gout.data() +
                                ((((b * O1 + o1) * O2 + o2) * Ao + pa) * Ro +
                                 pr) * K;
                            const T* gq =
                                gp.data() +
                                (static_cast<std::size_t>(da) * Sr + dr) * Q *
                                    K;
                            for (std::size_t q = 0; q < Q; ++q) {
                                const T* gk = gq + q * K;
                                T acc{};
                                for (std::size_t k = 0; k < K; ++k)
                                    acc += grow[k] * gk[k];
                                trow[q] += acc;
                            }
                        }
                }
        }
    });
    return gt;
}

template <class T>
Tensor<T> attr_bank_grad_filter(const Tensor<T>& t, const Tensor<T>& gout,
                                const std::vector<std::size_t>& g_shape,
                                const AttrConvGeom& geo, int threads = 1) {
    const std::size_t B = t.dim(0), U1 = t.dim(1), U2 = t.dim(2),
                      A = t.dim(3), R = t.dim(4), Q = t.dim(5);
    const std::size_t K = g_shape[0], Sa = g_shape[2], Sr = g_shape[3];
    TapTable ta = make_taps(A, Sa, geo.sa, geo.mode),
             tr = make_taps(R, Sr, geo.sr, geo.mode);
    const std::size_t O1 = conv_out_len(U1, geo.su),
                      O2 = conv_out_len(U2, geo.su);
    const std::size_t Ao = ta.out_len, Ro = tr.out_len;

    Tensor<T> gg({K, Q, Sa, Sr});
    parallel_for(Sa * Sr, threads, [&](std::size_t tap) {
        const std::size_t da = tap / Sr, dr = tap % Sr;
        std::vector<T> acc(Q * K, T{});
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t o1 = 0; o1 < O1; ++o1) {
                const std::size_t u1 = o1 * geo.su;
                for (std::size_t o2 = 0; o2 < O2; ++o2) {
                    const std::size_t u2 = o2 * geo.su;
                    const T* tplane =
                        t.data() + ((b * U1 + u1) * U2 + u2) * A * R * Q;
                    for (std::size_t p = 0; p < Ao; ++p) {
                        const int pa = ta.at(p, da);
                        if (pa < 0) continue;
                        for (std::size_t r = 0; r < Ro; ++r) {
                            const int pr = tr.at(r, dr);
                            if (pr < 0) continue;
                            const T* trow = tplane + (pa * R + pr) * Q;
                            const T* grow =
                                gout.data() +
                                ((((b * O1 + o1) * O2 + o2) * Ao + p) * Ro +
                                 r) * K;
                            for (std::size_t q = 0; q < Q; ++q) {
                                T* a = acc.data() + q * K;
                                const T x = trow[q];
                                for (std::size_t k = 0; k < K; ++k)
                                    a[k] += x * grow[k];
                            }
                        }
                    }
                }
            }
        for (std::size_t k = 0; k < K; ++k)
            for (std::size_t q = 0; q < Q; ++q)
                gg(k, q, da, dr) = acc[q * K + k];
    });
    return gg;
}

}  // namespace hcnn
