#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "hcnn/conv.hpp"
#include "hcnn/tensor.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"

using namespace hcnn;

TEST_CASE("conv output lengths", "[conv]") {
    REQUIRE(conv_out_len(16, 1) == 16);
    REQUIRE(conv_out_len(16, 2) == 8);
    REQUIRE(conv_out_len(5, 2) == 3);
    REQUIRE(conv_out_len(4, 4) == 1);
}

TEST_CASE("conv_nd frozen examples", "[conv]") {
    // even support, periodic, stride 1: [1,2,3,4] * [1,1] -> [5,3,5,7]
    Tensor<double> z({4});
    z.vec() = {1, 2, 3, 4};
    Tensor<double> w({2});
    w.vec() = {1, 1};
    auto out = conv_nd<double>(z, w, {0}, BoundaryMode::Periodic, {1});
    REQUIRE(out.dim(0) == 4);
    REQUIRE(out.flat(0) == 5.0);
    REQUIRE(out.flat(1) == 3.0);
    REQUIRE(out.flat(2) == 5.0);
    REQUIRE(out.flat(3) == 7.0);

    // trailing-axes 2-D stencil with stride 2 halves the convolved axes
    Tensor<double> z2({8, 16, 16}, 1.0);
    Tensor<double> w2({3, 3}, 1.0);
    auto out2 = conv_nd<double>(z2, w2, {1, 2}, BoundaryMode::ZeroPad, {2, 2});
    REQUIRE(out2.dim(0) == 8);
    REQUIRE(out2.dim(1) == 8);
    REQUIRE(out2.dim(2) == 8);

    // width-1 kernel of value 1 is the identity
    Tensor<double> d({1});
    d.vec() = {1};
    auto out3 = conv_nd<double>(z, d, {0}, BoundaryMode::ZeroPad, {1});
    for (std::size_t i = 0; i < 4; ++i) REQUIRE(out3.flat(i) == z.flat(i));

    // periodic mode rejects supports longer than the axis
    Tensor<double> wbig({5}, 1.0);
    REQUIRE_THROWS_AS(
        conv_nd<double>(z, wbig, {0}, BoundaryMode::Periodic, {1}),
        config_error);
}

TEST_CASE("conv_nd matches the brute-force oracle", "[conv]") {
    oracle::SplitMix rng(42);
    double maxerr = 0;
    for (int trial = 0; trial < 60; ++trial) {
        std::vector<std::size_t> zshape = {2 + rng.below(4), 2 + rng.below(4),
                                           2 + rng.below(4)};
        std::vector<std::size_t> axes = {1, 2};
        std::vector<std::size_t> wshape = {1 + rng.below(3), 1 + rng.below(3)};
        bool zp = rng.below(2) == 0;
        std::vector<std::size_t> strides = {1 + rng.below(2),
                                            1 + rng.below(2)};
        if (!zp) {
            wshape[0] = std::min(wshape[0], zshape[1]);
            wshape[1] = std::min(wshape[1], zshape[2]);
        }
        Tensor<double> zz(zshape), ww(wshape);
        for (auto& v : zz.vec()) v = rng.uniform();
        for (auto& v : ww.vec()) v = rng.uniform();
        auto got = conv_nd(zz, ww, std::span<const std::size_t>(axes),
                           zp ? BoundaryMode::ZeroPad : BoundaryMode::Periodic,
                           std::span<const std::size_t>(strides));
        auto want = oracle::conv_brute(zz.vec(), zshape, ww.vec(), wshape,
                                       axes, strides, zp);
        REQUIRE(got.size() == want.size());
        for (std::size_t i = 0; i < got.size(); ++i)
            maxerr = std::max(maxerr, std::abs(got.flat(i) - want[i]));
    }
    REQUIRE(maxerr < 1e-12);
}

TEST_CASE("image_conv composes per-channel conv_nd", "[conv]") {
    oracle::SplitMix rng(7);
    std::size_t B = 2, U = 6, C = 3, K = 4;
    Tensor<double> in({B, U, U, C});
    fixtures::randomize(in, rng);
    Tensor<double> w({K, C, 3, 3});
    fixtures::randomize(w, rng);
    for (auto mode : {BoundaryMode::ZeroPad, BoundaryMode::Periodic}) {
        auto got = image_conv_forward(in, w, mode);
        double maxerr = 0;
        for (std::size_t k = 0; k < K; ++k) {
            Tensor<double> acc({B, U, U});
            for (std::size_t c = 0; c < C; ++c) {
                Tensor<double> slice({B, U, U});
                for (std::size_t b = 0; b < B; ++b)
                    for (std::size_t u1 = 0; u1 < U; ++u1)
                        for (std::size_t u2 = 0; u2 < U; ++u2)
                            slice(b, u1, u2) = in(b, u1, u2, c);
                Tensor<double> wk({3, 3});
                for (std::size_t d1 = 0; d1 < 3; ++d1)
                    for (std::size_t d2 = 0; d2 < 3; ++d2)
                        wk(d1, d2) = w(k, c, d1, d2);
                auto conv = conv_nd<double>(slice, wk, {1, 2}, mode, {1, 1});
                acc.add(conv);
            }
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t u1 = 0; u1 < U; ++u1)
                    for (std::size_t u2 = 0; u2 < U; ++u2)
                        maxerr = std::max(maxerr,
                                          std::abs(got(b, u1, u2, k) -
                                                   acc(b, u1, u2)));
        }
        REQUIRE(maxerr < 1e-12);
    }
}

TEST_CASE("dense attribute conv matches conv_nd per output channel",
          "[conv]") {
    oracle::SplitMix rng(8);
    std::size_t B = 2, U = 5, A = 8, R = 8, K = 3, Sa = 3, Sr = 5;
    Tensor<double> in({B, U, U, A, R});
    fixtures::randomize(in, rng);
    Tensor<double> w({K, 3, 3, Sa, Sr});
    fixtures::randomize(w, rng);
    for (auto mode : {BoundaryMode::ZeroPad, BoundaryMode::Periodic}) {
        DenseConvGeom g;
        g.sa = 4;
        g.sr = 2;
        g.su = 1;
        g.mode = mode;
        auto got = dense_attr_forward(in, w, g);
        REQUIRE(got.dim(3) == 2);  // 8 / stride 4
        REQUIRE(got.dim(4) == 4);  // 8 / stride 2
        double maxerr = 0;
        for (std::size_t k = 0; k < K; ++k) {
            Tensor<double> wk({3, 3, Sa, Sr});
            for (std::size_t i = 0; i < wk.size(); ++i)
                wk.flat(i) = w.flat(k * wk.size() + i);
            auto conv =
                conv_nd<double>(in, wk, {1, 2, 3, 4}, mode, {1, 1, 4, 2});
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t u1 = 0; u1 < U; ++u1)
                    for (std::size_t u2 = 0; u2 < U; ++u2)
                        for (std::size_t p = 0; p < conv.dim(3); ++p)
                            for (std::size_t r = 0; r < conv.dim(4); ++r)
                                maxerr = std::max(
                                    maxerr,
                                    std::abs(got(b, u1, u2, p, r, k) -
                                             conv(b, u1, u2, p, r)));
        }
        REQUIRE(maxerr < 1e-12);
    }
}

TEST_CASE("separable bank equals materialized dense filter", "[conv]") {
    oracle::SplitMix rng(9);
    std::size_t B = 2, U = 4, A = 4, R = 8, K = 5, Q = 3, Sa = 3, Sr = 5;
    Tensor<double> in({B, U, U, A, R});
    fixtures::randomize(in, rng);
    Tensor<double> h({Q, 3, 3});
    fixtures::randomize(h, rng);
    Tensor<double> g({K, Q, Sa, Sr});
    fixtures::randomize(g, rng);
    for (auto mode : {BoundaryMode::ZeroPad, BoundaryMode::Periodic}) {
        for (std::size_t su : {std::size_t{1}, std::size_t{2}}) {
            auto t = spatial_bank_forward(in, h, mode);
            AttrConvGeom geo;
            geo.su = su;
            geo.sa = 2;
            geo.sr = 2;
            geo.mode = mode;
            auto got = attr_bank_forward(t, g, geo);

            // w[k](du1,du2,da,dr) = sum_q h[q](du) g[k,q](da,dr)
            Tensor<double> w({K, 3, 3, Sa, Sr});
            for (std::size_t k = 0; k < K; ++k)
                for (std::size_t d1 = 0; d1 < 3; ++d1)
                    for (std::size_t d2 = 0; d2 < 3; ++d2)
                        for (std::size_t da = 0; da < Sa; ++da)
                            for (std::size_t dr = 0; dr < Sr; ++dr) {
                                double acc = 0;
                                for (std::size_t q = 0; q < Q; ++q)
                                    acc += h(q, d1, d2) * g(k, q, da, dr);
                                w(k, d1, d2, da, dr) = acc;
                            }
            DenseConvGeom dg;
            dg.sa = 2;
            dg.sr = 2;
            dg.su = su;
            dg.mode = mode;
            auto want = dense_attr_forward(in, w, dg);
            REQUIRE(got.shape() == want.shape());
            double maxerr = 0;
            for (std::size_t i = 0; i < got.size(); ++i)
                maxerr = std::max(maxerr,
                                  std::abs(got.flat(i) - want.flat(i)));
            REQUIRE(maxerr < 1e-12);
        }
    }
}

TEST_CASE("convolution gradient kernels match finite differences", "[conv]") {
    oracle::SplitMix rng(10);
    std::size_t B = 1, U = 4, A = 4, R = 6, K = 3, Q = 2, Sa = 3, Sr = 3;
    Tensor<double> in({B, U, U, A, R});
    fixtures::randomize(in, rng);
    Tensor<double> h({Q, 3, 3});
    fixtures::randomize(h, rng);
    Tensor<double> g({K, Q, Sa, Sr});
    fixtures::randomize(g, rng);
    Tensor<double> w({K, 3, 3, Sa, Sr});
    fixtures::randomize(w, rng);

    for (auto mode : {BoundaryMode::ZeroPad, BoundaryMode::Periodic}) {
        DenseConvGeom dg;
        dg.sa = 2;
        dg.sr = 3;
        dg.su = 1;
        dg.mode = mode;
        auto out0 = dense_attr_forward(in, w, dg);
        Tensor<double> mask(out0.shape());
        fixtures::randomize(mask, rng);
        auto loss = [&] {
            auto o = dense_attr_forward(in, w, dg);
            double s = 0;
            for (std::size_t i = 0; i < o.size(); ++i)
                s += o.flat(i) * mask.flat(i);
            return s;
        };
        auto gin = dense_attr_grad_data(mask, w, {B, U, U, A, R}, dg);
        auto gw = dense_attr_grad_filter(in, mask, {K, 3, 3, Sa, Sr}, dg);
        double e1 = 0, e2 = 0;
        for (std::size_t i = 0; i < in.size(); i += 7)
            e1 = std::max(e1, oracle::rel_err(gin.flat(i),
                                              oracle::central_difference(
                                                  loss, &in.vec()[i], 1e-6)));
        for (std::size_t i = 0; i < w.size(); i += 5)
            e2 = std::max(e2, oracle::rel_err(gw.flat(i),
                                              oracle::central_difference(
                                                  loss, &w.vec()[i], 1e-6)));
        REQUIRE(e1 < 1e-5);
        REQUIRE(e2 < 1e-5);

        AttrConvGeom geo;
        geo.su = 2;
        geo.sa = 2;
        geo.sr = 2;
        geo.mode = mode;
        auto t0 = spatial_bank_forward(in, h, mode);
        auto out1 = attr_bank_forward(t0, g, geo);
        Tensor<double> mask2(out1.shape());
        fixtures::randomize(mask2, rng);
        auto loss2 = [&] {
            auto t = spatial_bank_forward(in, h, mode);
            auto o = attr_bank_forward(t, g, geo);
            double s = 0;
            for (std::size_t i = 0; i < o.size(); ++i)
                s += o.flat(i) * mask2.flat(i);
            return s;
        };
        auto gt = attr_bank_grad_data(mask2, g, {B, U, U, A, R, Q}, geo);
        auto gg = attr_bank_grad_filter(t0, mask2, {K, Q, Sa, Sr}, geo);
        auto gin2 = spatial_bank_grad_data(gt, h, mode);
        auto gh = spatial_bank_grad_filter(in, gt, 3, 3, mode);
        double e3 = 0, e4 = 0, e5 = 0;
        for (std::size_t i = 0; i < in.size(); i += 5)
            e3 = std::max(e3, oracle::rel_err(gin2.flat(i),
                                              oracle::central_difference(
                                                  loss2, &in.vec()[i], 1e-6)));
        for (std::size_t i = 0; i < g.size(); i += 3)
            e4 = std::max(e4, oracle::rel_err(gg.flat(i),
                                              oracle::central_difference(
                                                  loss2, &g.vec()[i], 1e-6)));
        for (std::size_t i = 0; i < h.size(); ++i)
            e5 = std::max(e5, oracle::rel_err(gh.flat(i),
                                              oracle::central_difference(
                                                  loss2, &h.vec()[i], 1e-6)));
        REQUIRE(e3 < 1e-5);
        REQUIRE(e4 < 1e-5);
        REQUIRE(e5 < 1e-5);
    }
}
