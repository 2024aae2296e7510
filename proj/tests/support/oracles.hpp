// Independent brute-force oracles used by the test and acceptance suites.
// Deliberately naive and self-contained: no code shared with include/hcnn,
// raw vectors plus shape arrays only. If these disagree with the library,
// the library is wrong.
#pragma once

#include <cassert>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <vector>

namespace oracle {

// Row-major flat offset of a multi-index.
inline std::size_t flat(const std::vector<std::size_t>& shape,
                        const std::vector<std::size_t>& idx) {
    assert(shape.size() == idx.size());
    std::size_t off = 0;
    for (std::size_t d = 0; d < shape.size(); ++d) {
        assert(idx[d] < shape[d]);
        off = off * shape[d] + idx[d];
    }
    return off;
}

// Advances a multi-index in row-major order; returns false after the last.
inline bool next_index(const std::vector<std::size_t>& shape,
                       std::vector<std::size_t>& idx) {
    for (std::size_t d = shape.size(); d-- > 0;) {
        if (++idx[d] < shape[d]) return true;
        idx[d] = 0;
    }
    return false;
}

inline std::size_t ceil_div(std::size_t a, std::size_t s) {
    return (a + s - 1) / s;
}

// Literal evaluation of the convolution sum at every output point:
//   out[n] = sum_i w[i] * z[n*stride + i - floor(support/2)]   per axis,
// with out-of-range reads either zero (zero_pad=true) or wrapped.
// `axes` selects which axes of z are convolved, in the order of w's axes.
// Everything is evaluated with one explicit loop nest per output element.
inline std::vector<double> conv_brute(
        const std::vector<double>& z, const std::vector<std::size_t>& zshape,
        const std::vector<double>& w, const std::vector<std::size_t>& wshape,
        const std::vector<std::size_t>& axes,
        const std::vector<std::size_t>& strides,
        bool zero_pad,
        std::vector<std::size_t>* out_shape_ret = nullptr) {
    assert(axes.size() == wshape.size());
    assert(axes.size() == strides.size());

    std::vector<std::size_t> oshape = zshape;
    for (std::size_t k = 0; k < axes.size(); ++k)
        oshape[axes[k]] = ceil_div(zshape[axes[k]], strides[k]);
    std::size_t osize = 1;
    for (std::size_t d : oshape) osize *= d;
    std::vector<double> out(osize, 0.0);

    std::vector<std::size_t> oidx(oshape.size(), 0);
    if (osize == 0) return out;
    do {
        std::vector<std::size_t> widx(wshape.size(), 0);
        double acc = 0.0;
        bool more_w = true;
        while (more_w) {
            // Input index for this tap; skip the tap if any coordinate
            // falls outside under zero padding.
            std::vector<std::size_t> zidx(oidx.begin(), oidx.end());
            bool inside = true;
            for (std::size_t k = 0; k < axes.size(); ++k) {
                std::size_t a = axes[k];
                long long pos = static_cast<long long>(oidx[a]) *
                                    static_cast<long long>(strides[k]) +
                                static_cast<long long>(widx[k]) -
                                static_cast<long long>(wshape[k] / 2);
                long long len = static_cast<long long>(zshape[a]);
                if (pos < 0 || pos >= len) {
                    if (zero_pad) { inside = false; break; }
                    pos %= len;
                    if (pos < 0) pos += len;
                }
                zidx[a] = static_cast<std::size_t>(pos);
            }
            if (inside)
                acc += w[flat(wshape, widx)] * z[flat(zshape, zidx)];
            more_w = next_index(wshape, widx);
        }
        out[flat(oshape, oidx)] = acc;
    } while (next_index(oshape, oidx));

    if (out_shape_ret) *out_shape_ret = oshape;
    return out;
}

// Cyclic/zero-fill shift: out[i] = in[i - shift] along one axis.
inline std::vector<double> translate_brute(
        const std::vector<double>& z, const std::vector<std::size_t>& zshape,
        std::size_t axis, long long shift, bool zero_pad) {
    std::vector<double> out(z.size(), 0.0);
    std::vector<std::size_t> idx(zshape.size(), 0);
    if (z.empty()) return out;
    do {
        long long src = static_cast<long long>(idx[axis]) - shift;
        long long len = static_cast<long long>(zshape[axis]);
        if (src < 0 || src >= len) {
            if (zero_pad) continue;
            src %= len;
            if (src < 0) src += len;
        }
        std::vector<std::size_t> sidx = idx;
        sidx[axis] = static_cast<std::size_t>(src);
        out[flat(zshape, idx)] = z[flat(zshape, sidx)];
    } while (next_index(zshape, idx));
    return out;
}

// Central-difference derivative of f with respect to *theta.
inline double central_difference(const std::function<double()>& f,
                                 double* theta, double step) {
    double saved = *theta;
    *theta = saved + step;
    double fp = f();
    *theta = saved - step;
    double fm = f();
    *theta = saved;
    return (fp - fm) / (2.0 * step);
}

// Relative error with an absolute floor for near-zero references.
inline double rel_err(double got, double want, double floor_ = 1e-8) {
    double denom = std::abs(want) > floor_ ? std::abs(want) : floor_;
    return std::abs(got - want) / denom;
}

// Deterministic 64-bit splitmix, used to build reproducible test data
// without depending on library RNG choices.
struct SplitMix {
    std::uint64_t state;
    explicit SplitMix(std::uint64_t seed) : state(seed) {}
    std::uint64_t next() {
        std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }
    // Uniform in [-1, 1).
    double uniform() {
        return static_cast<double>(next() >> 11) * (2.0 / 9007199254740992.0)
               - 1.0;
    }
    // Integer in [0, n).
    std::size_t below(std::size_t n) { return next() % n; }
};

}  // namespace oracle
