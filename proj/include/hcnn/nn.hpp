#pragma once

#include <cassert>
#include <cmath>
#include <cstddef>
#include <vector>

#include "hcnn/conv.hpp"
#include "hcnn/errors.hpp"
#include "hcnn/tensor.hpp"

namespace hcnn {

// ---- ELU with per-channel bias --------------------------------------------
// The channel is always the trailing axis. out = c for c >= 0, e^c - 1
// otherwise, with c = z + bias[channel].

template <class T>
Tensor<T> elu_forward(const Tensor<T>& z, const Tensor<T>& bias) {
    const std::size_t K = z.dim(z.rank() - 1);
    if (bias.size() != K) throw config_error("elu: bias length mismatch");
    Tensor<T> out(z.shape());
    const std::size_t rows = z.size() / K;
    const T* b = bias.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* zi = z.data() + r * K;
        T* oi = out.data() + r * K;
        for (std::size_t k = 0; k < K; ++k) {
            T c = zi[k] + b[k];
            oi[k] = c >= T(0) ? c : std::expm1(c);
        }
    }
    return out;
}

// d out / d c recovered from the output: e^c = out + 1 on the negative
// branch, 1 on the nonnegative one (continuous at c = 0).
template <class T>
T elu_slope_from_output(T out) {
    return out < T(0) ? out + T(1) : T(1);
}

// Returns dL/dz; accumulates dL/dbias into gbias (same pre-activation
// derivative, reduced over all non-channel axes).
template <class T>
Tensor<T> elu_backward(const Tensor<T>& out, const Tensor<T>& gout,
                       Tensor<T>& gbias) {
    assert(out.shape() == gout.shape());
    const std::size_t K = out.dim(out.rank() - 1);
    assert(gbias.size() == K);
    Tensor<T> gz(out.shape());
    const std::size_t rows = out.size() / K;
    for (std::size_t r = 0; r < rows; ++r) {
        const T* oi = out.data() + r * K;
        const T* gi = gout.data() + r * K;
        T* zi = gz.data() + r * K;
        T* gb = gbias.data();
        for (std::size_t k = 0; k < K; ++k) {
            T d = gi[k] * elu_slope_from_output(oi[k]);
            zi[k] = d;
            gb[k] += d;
        }
    }
    return gz;
}

// ---- batch normalization ---------------------------------------------------
// Statistics are per coordinate of the trailing axes (v_{j-2}, v_{j-1}, q),
// aggregated over batch and both spatial axes; the input is the h-stage
// output (B, U1, U2, P, R, Q) at full spatial resolution.

template <class T>
struct BatchNormState {
    Tensor<T> gamma, beta;          // trainable, shape (P, R, Q)
    Tensor<T> run_mean, run_var;    // running estimates for evaluation
    T eps = T(1e-5);
    T momentum = T(0.9);

    static BatchNormState init(std::size_t P, std::size_t R, std::size_t Q) {
        BatchNormState s;
        s.gamma = Tensor<T>({P, R, Q}, T(1));
        s.beta = Tensor<T>({P, R, Q}, T(0));
        s.run_mean = Tensor<T>({P, R, Q}, T(0));
        s.run_var = Tensor<T>({P, R, Q}, T(1));
        return s;
    }
};

// Batch statistics kept for the backward pass.
template <class T>
struct BatchNormCache {
    Tensor<T> mean, invstd;
};

// Normalizes z in place. Training mode computes batch statistics (biased
// variance, matching the running estimates) and updates the running
// arrays; evaluation mode applies the stored estimates.
template <class T>
void batch_norm_forward(Tensor<T>& z, BatchNormState<T>& state, bool training,
                        BatchNormCache<T>* cache = nullptr) {
    const std::size_t M = state.gamma.size();
    if (z.size() % M != 0) throw config_error("batch_norm: extent mismatch");
    const std::size_t rows = z.size() / M;

    if (!training) {
        std::vector<T> scale(M), shift(M);
        for (std::size_t m = 0; m < M; ++m) {
            T istd = T(1) / std::sqrt(state.run_var.flat(m) + state.eps);
            scale[m] = state.gamma.flat(m) * istd;
            shift[m] = state.beta.flat(m) -
                       state.run_mean.flat(m) * scale[m];
        }
        for (std::size_t r = 0; r < rows; ++r) {
            T* zi = z.data() + r * M;
            for (std::size_t m = 0; m < M; ++m)
                zi[m] = zi[m] * scale[m] + shift[m];
        }
        return;
    }

    if (rows < 2)
        throw config_error("batch_norm: training needs slice size >= 2");
    Tensor<T> mean({M}), var({M});
    for (std::size_t r = 0; r < rows; ++r) {
        const T* zi = z.data() + r * M;
        for (std::size_t m = 0; m < M; ++m) mean.flat(m) += zi[m];
    }
    mean.scale(T(1) / T(rows));
    for (std::size_t r = 0; r < rows; ++r) {
        const T* zi = z.data() + r * M;
        for (std::size_t m = 0; m < M; ++m) {
            T d = zi[m] - mean.flat(m);
            var.flat(m) += d * d;
        }
    }
    var.scale(T(1) / T(rows));

    Tensor<T> invstd({M});
    for (std::size_t m = 0; m < M; ++m)
        invstd.flat(m) = T(1) / std::sqrt(var.flat(m) + state.eps);
    for (std::size_t r = 0; r < rows; ++r) {
        T* zi = z.data() + r * M;
        for (std::size_t m = 0; m < M; ++m)
            zi[m] = state.gamma.flat(m) * (zi[m] - mean.flat(m)) *
                        invstd.flat(m) +
                    state.beta.flat(m);
    }
    for (std::size_t m = 0; m < M; ++m) {
        state.run_mean.flat(m) = state.momentum * state.run_mean.flat(m) +
                                 (T(1) - state.momentum) * mean.flat(m);
        state.run_var.flat(m) = state.momentum * state.run_var.flat(m) +
                                (T(1) - state.momentum) * var.flat(m);
    }
    if (cache) {
        cache->mean = mean.reshaped(state.gamma.shape());
        cache->invstd = invstd.reshaped(state.gamma.shape());
    }
}

// Full batch-statistics gradient. z_raw is the pre-normalization input
// (recomputed by the caller); returns dL/dz_raw and accumulates parameter
// gradients.
template <class T>
Tensor<T> batch_norm_backward(const Tensor<T>& gout, const Tensor<T>& z_raw,
                              const BatchNormState<T>& state,
                              const BatchNormCache<T>& cache,
                              Tensor<T>& ggamma, Tensor<T>& gbeta) {
    const std::size_t M = state.gamma.size();
    const std::size_t rows = z_raw.size() / M;
    const T n = T(rows);

    // Per-coordinate reductions: sum(dy) and sum(dy * x_hat).
    Tensor<T> sum_dy({M}), sum_dyx({M});
    for (std::size_t r = 0; r < rows; ++r) {
        const T* gi = gout.data() + r * M;
        const T* zi = z_raw.data() + r * M;
        for (std::size_t m = 0; m < M; ++m) {
            T xh = (zi[m] - cache.mean.flat(m)) * cache.invstd.flat(m);
            sum_dy.flat(m) += gi[m];
            sum_dyx.flat(m) += gi[m] * xh;
        }
    }
    for (std::size_t m = 0; m < M; ++m) {
        ggamma.flat(m) += sum_dyx.flat(m);
        gbeta.flat(m) += sum_dy.flat(m);
    }

    Tensor<T> gz(z_raw.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const T* gi = gout.data() + r * M;
        const T* zi = z_raw.data() + r * M;
        T* go = gz.data() + r * M;
        for (std::size_t m = 0; m < M; ++m) {
            T istd = cache.invstd.flat(m);
            T xh = (zi[m] - cache.mean.flat(m)) * istd;
            go[m] = state.gamma.flat(m) * istd *
                    (gi[m] - sum_dy.flat(m) / n - xh * sum_dyx.flat(m) / n);
        }
    }
    return gz;
}

// ---- softmax and cross-entropy ---------------------------------------------

template <class T>
Tensor<T> softmax(const Tensor<T>& z) {
    assert(z.rank() == 2);
    const std::size_t B = z.dim(0), C = z.dim(1);
    Tensor<T> p(z.shape());
    for (std::size_t b = 0; b < B; ++b) {
        const T* zi = z.data() + b * C;
        T* pi = p.data() + b * C;
        T mx = zi[0];
        for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, zi[c]);
        T sum{};
        for (std::size_t c = 0; c < C; ++c) {
            pi[c] = std::exp(zi[c] - mx);
            sum += pi[c];
        }
        for (std::size_t c = 0; c < C; ++c) pi[c] /= sum;
    }
    return p;
}

// Minibatch-mean negative log likelihood of the true classes.
template <class T>
T cross_entropy(const Tensor<T>& probs, const std::vector<int>& labels) {
    const std::size_t B = probs.dim(0), C = probs.dim(1);
    if (labels.size() != B) throw config_error("cross_entropy: batch mismatch");
    T loss{};
    for (std::size_t b = 0; b < B; ++b) {
        int y = labels[b];
        if (y < 0 || static_cast<std::size_t>(y) >= C)
            throw config_error("cross_entropy: label out of range");
        loss -= std::log(probs.flat(b * C + static_cast<std::size_t>(y)));
    }
    return loss / T(B);
}

// Same quantity computed from raw scores via log-sum-exp; stays finite for
// any finite logits even when the softmax saturates and probabilities
// underflow to zero.
template <class T>
T cross_entropy_from_logits(const Tensor<T>& z,
                            const std::vector<int>& labels) {
    const std::size_t B = z.dim(0), C = z.dim(1);
    if (labels.size() != B) throw config_error("cross_entropy: batch mismatch");
    T loss{};
    for (std::size_t b = 0; b < B; ++b) {
        int y = labels[b];
        if (y < 0 || static_cast<std::size_t>(y) >= C)
            throw config_error("cross_entropy: label out of range");
        const T* zi = z.data() + b * C;
        T mx = zi[0];
        for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, zi[c]);
        T sum{};
        for (std::size_t c = 0; c < C; ++c) sum += std::exp(zi[c] - mx);
        loss += std::log(sum) + mx - zi[y];
    }
    return loss / T(B);
}

// d(mean CE)/d logits = (probs - onehot) / B, fused through the softmax.
template <class T>
Tensor<T> softmax_cross_entropy_backward(const Tensor<T>& probs,
                                         const std::vector<int>& labels) {
    const std::size_t B = probs.dim(0), C = probs.dim(1);
    Tensor<T> g(probs.shape());
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t c = 0; c < C; ++c)
            g.flat(b * C + c) = probs.flat(b * C + c) / T(B);
        g.flat(b * C + static_cast<std::size_t>(labels[b])) -= T(1) / T(B);
    }
    return g;
}

// ---- separable attribute layer ---------------------------------------------
// One layer of depth 3 < j < J: marginalize v_{j-3}, spatial filter bank,
// intermediate normalization, attribute convolution with subsampling, bias
// and ELU. The plus variant inserts an extra ELU (no bias; beta already
// provides the shift) between normalization and the attribute stage.

enum class Variant { Standard, Plus };

template <class T>
struct SeparableFilterBank {
    Tensor<T> h;  // (Q, S1, S2)
    Tensor<T> g;  // (Kout, Q, Sa, Sr)
};

template <class T>
struct SeparableLayerCache {
    BatchNormCache<T> bn;
};

template <class T>
Tensor<T> marginalize_oldest(const Tensor<T>& x_prev) {
    assert(x_prev.rank() == 6);
    return sum_axis(x_prev, 3);
}

// Broadcast adjoint of marginalize_oldest.
template <class T>
Tensor<T> broadcast_oldest(const Tensor<T>& gy, std::size_t extent) {
    assert(gy.rank() == 5);
    const std::size_t B = gy.dim(0), U1 = gy.dim(1), U2 = gy.dim(2),
                      P = gy.dim(3), R = gy.dim(4);
    Tensor<T> gx({B, U1, U2, extent, P, R});
    const std::size_t inner = P * R;
    for (std::size_t o = 0; o < B * U1 * U2; ++o) {
        const T* src = gy.data() + o * inner;
        for (std::size_t a = 0; a < extent; ++a)
            std::memcpy(gx.data() + (o * extent + a) * inner, src,
                        inner * sizeof(T));
    }
    return gx;
}

struct SeparableGeom {
    std::size_t su = 1;  // 2^{s_j}
    BoundaryMode mode = BoundaryMode::ZeroPad;
};

// x_prev: (B, U1, U2, A, P, R). Output: (B, U1/su, U2/su, P/2, R/2, Kout).
template <class T>
Tensor<T> separable_attribute_conv(const Tensor<T>& x_prev,
                                   const SeparableFilterBank<T>& bank,
                                   BatchNormState<T>& bn,
                                   const Tensor<T>& bias,
                                   const SeparableGeom& geom, Variant variant,
                                   bool training,
                                   SeparableLayerCache<T>* cache = nullptr,
                                   int threads = 1) {
    Tensor<T> y = marginalize_oldest(x_prev);
    Tensor<T> t = spatial_bank_forward(y, bank.h, geom.mode, threads);
    batch_norm_forward(t, bn, training, cache ? &cache->bn : nullptr);
    if (variant == Variant::Plus)
        for (std::size_t i = 0; i < t.size(); ++i) {
            T c = t.flat(i);
            t.flat(i) = c >= T(0) ? c : std::expm1(c);
        }
    AttrConvGeom geo;
    geo.su = geom.su;
    geo.sa = 2;
    geo.sr = 2;
    geo.mode = geom.mode;
    Tensor<T> z = attr_bank_forward(t, bank.g, geo, threads);
    return elu_forward(z, bias);
}

template <class T>
struct SeparableLayerGrads {
    Tensor<T> gx_prev, gh, gg, ggamma, gbeta, gbias;
};

// Reverse pass. Intermediates (marginalized input, h-stage output, the
// normalized tensor) are recomputed from x_prev and the cached batch
// statistics rather than stored; only the small statistic arrays persist
// between passes.
template <class T>
SeparableLayerGrads<T> separable_attribute_conv_backward(
        const Tensor<T>& x_prev, const Tensor<T>& x_out,
        const Tensor<T>& gout, const SeparableFilterBank<T>& bank,
        const BatchNormState<T>& bn, const SeparableGeom& geom,
        Variant variant, const SeparableLayerCache<T>& cache,
        int threads = 1) {
    const std::size_t Q = bank.h.dim(0);
    const std::size_t S1 = bank.h.dim(1), S2 = bank.h.dim(2);
    SeparableLayerGrads<T> gr;
    gr.gh = Tensor<T>({Q, S1, S2});
    gr.gg = Tensor<T>(bank.g.shape());
    gr.ggamma = Tensor<T>(bn.gamma.shape());
    gr.gbeta = Tensor<T>(bn.beta.shape());
    gr.gbias = Tensor<T>({x_out.dim(5)});

    // Recompute forward intermediates up to the g-stage input.
    Tensor<T> y = marginalize_oldest(x_prev);
    Tensor<T> t_raw = spatial_bank_forward(y, bank.h, geom.mode, threads);
    Tensor<T> t_in = t_raw;  // becomes the g-stage input below
    {
        const std::size_t M = bn.gamma.size();
        const std::size_t rows = t_in.size() / M;
        for (std::size_t r = 0; r < rows; ++r) {
            T* zi = t_in.data() + r * M;
            for (std::size_t m = 0; m < M; ++m)
                zi[m] = bn.gamma.flat(m) *
                            (zi[m] - cache.bn.mean.flat(m)) *
                            cache.bn.invstd.flat(m) +
                        bn.beta.flat(m);
        }
    }
    if (variant == Variant::Plus)
        for (std::size_t i = 0; i < t_in.size(); ++i) {
            T c = t_in.flat(i);
            t_in.flat(i) = c >= T(0) ? c : std::expm1(c);
        }

    // ELU and bias at the output.
    Tensor<T> gz = elu_backward(x_out, gout, gr.gbias);

    // g-stage adjoints.
    AttrConvGeom geo;
    geo.su = geom.su;
    geo.sa = 2;
    geo.sr = 2;
    geo.mode = geom.mode;
    std::vector<std::size_t> tshape = t_in.shape();
    Tensor<T> gt = attr_bank_grad_data(gz, bank.g, tshape, geo, threads);
    gr.gg = attr_bank_grad_filter(t_in, gz, bank.g.shape(), geo, threads);

    if (variant == Variant::Plus)
        for (std::size_t i = 0; i < gt.size(); ++i)
            gt.flat(i) *= elu_slope_from_output(t_in.flat(i));

    // Normalization adjoint against the recomputed raw h-stage output.
    Tensor<T> gt_raw =
        batch_norm_backward(gt, t_raw, bn, cache.bn, gr.ggamma, gr.gbeta);

    // h-stage adjoints and the marginalization broadcast.
    Tensor<T> gy = spatial_bank_grad_data(gt_raw, bank.h, geom.mode, threads);
    gr.gh = spatial_bank_grad_filter(y, gt_raw, S1, S2, geom.mode, threads);
    gr.gx_prev = broadcast_oldest(gy, x_prev.dim(3));
    return gr;
}

}  // namespace hcnn
