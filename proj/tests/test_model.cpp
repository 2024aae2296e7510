#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "hcnn/model.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"

using namespace hcnn;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    REQUIRE(is.good());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

bool shape_is(const Tensor<double>& t, std::vector<std::size_t> s) {
    return t.shape() == s;
}

}  // namespace

TEST_CASE("forward shape trace, toy net", "[model]") {
    NetworkConfig c = fixtures::toy_config();
    auto p = init_parameters<double>(c, 7);
    Tensor<double> x0({2, 8, 8, 3});
    oracle::SplitMix rng(11);
    for (auto& v : x0.vec()) v = rng.uniform();
    auto acts = forward(x0, p, c, false);
    REQUIRE(shape_is(acts.x[1], {2, 8, 8, 8}));
    REQUIRE(shape_is(acts.x[2], {2, 8, 8, 8, 8}));
    REQUIRE(shape_is(acts.x[3], {2, 8, 8, 2, 4, 8}));
    REQUIRE(shape_is(acts.x[4], {2, 8, 8, 2, 4, 8}));
    REQUIRE(shape_is(acts.x[5], {2, 4, 4, 2, 4, 4}));
    REQUIRE(shape_is(acts.x[6], {2, 4}));
    REQUIRE(acts.x[6].all_finite());

    // zero input gives zero scores: biases start at zero, every filter path
    // sees zeros.
    Tensor<double> z0({2, 8, 8, 3});
    auto a0 = forward(z0, p, c, false);
    double m = 0;
    for (std::size_t i = 0; i < a0.x[6].size(); ++i)
        m = std::max(m, std::abs(a0.x[6].flat(i)));
    REQUIRE(m == 0.0);
}

TEST_CASE("forward shape trace, reference geometry", "[model]") {
    NetworkConfig c;
    c.depth = 12;
    c.max_attributes = 16;
    c.rank = 32;
    c.spatial_size = 32;
    c.num_classes = 10;
    c.attr_support_a = 7;
    c.attr_support_b = 11;
    auto p = init_parameters<double>(c, 3);
    Tensor<double> x0({1, 32, 32, 3});
    oracle::SplitMix rng(5);
    for (auto& v : x0.vec()) v = rng.uniform();
    auto acts = forward(x0, p, c, false);
    REQUIRE(shape_is(acts.x[1], {1, 32, 32, 16}));
    REQUIRE(shape_is(acts.x[2], {1, 32, 32, 16, 16}));
    REQUIRE(shape_is(acts.x[3], {1, 32, 32, 4, 8, 16}));
    REQUIRE(shape_is(acts.x[4], {1, 32, 32, 4, 8, 16}));
    REQUIRE(shape_is(acts.x[5], {1, 16, 16, 4, 8, 16}));
    REQUIRE(shape_is(acts.x[8], {1, 16, 16, 4, 8, 16}));
    REQUIRE(shape_is(acts.x[9], {1, 8, 8, 4, 8, 16}));
    REQUIRE(shape_is(acts.x[11], {1, 8, 8, 4, 8, 10}));
    REQUIRE(shape_is(acts.x[12], {1, 10}));
    REQUIRE(acts.x[12].all_finite());
}

TEST_CASE("parameter counts match the independent oracle pins", "[model]") {
    auto mk = [](int C, std::size_t sa, std::size_t sb, Variant v) {
        NetworkConfig c;
        c.depth = 12;
        c.max_attributes = 16;
        c.rank = 32;
        c.spatial_size = 32;
        c.num_classes = C;
        c.attr_support_a = sa;
        c.attr_support_b = sb;
        c.variant = v;
        return c;
    };
    auto c10s = count_parameters(mk(10, 7, 11, Variant::Standard));
    REQUIRE(c10s.headline == 97650);
    REQUIRE(c10s.auxiliary == 65706);
    REQUIRE(c10s.trainable == 381722);

    auto c100s = count_parameters(mk(100, 11, 11, Variant::Standard));
    REQUIRE(c100s.headline == 250308);
    REQUIRE(c100s.auxiliary == 65796);
    REQUIRE(c100s.trainable == 908404);

    auto c10p = count_parameters(mk(10, 7, 11, Variant::Plus));
    REQUIRE(c10p.headline == 316016);
    REQUIRE(c10p.auxiliary == 65706);
    REQUIRE(c10p.trainable == 381722);

    auto c100p = count_parameters(mk(100, 11, 11, Variant::Plus));
    REQUIRE(c100p.headline == 842608);
    REQUIRE(c100p.auxiliary == 65796);
    REQUIRE(c100p.trainable == 908404);

    auto toy = count_parameters(fixtures::toy_config());
    REQUIRE(toy.headline == 3276);
    REQUIRE(toy.auxiliary == 548);
    REQUIRE(toy.trainable == 2996);

    NetworkConfig desk;
    desk.depth = 12;
    desk.max_attributes = 8;
    desk.rank = 8;
    desk.spatial_size = 32;
    desk.num_classes = 10;
    desk.attr_support_a = 3;
    desk.attr_support_b = 5;
    auto dc = count_parameters(desk);
    REQUIRE(dc.headline == 10566);
    REQUIRE(dc.auxiliary == 4186);
    REQUIRE(dc.trainable == 14338);

    // the literal trainable count matches the parameter registry
    auto p = init_parameters<double>(mk(10, 7, 11, Variant::Standard), 0);
    std::size_t live = 0;
    for (auto* t : trainable_arrays(p)) live += t->size();
    REQUIRE(live == c10s.trainable);

    // per-layer breakdown sums to the totals
    std::size_t hsum = 0, asum = 0;
    for (const auto& l : c10s.layers) {
        hsum += l.headline;
        asum += l.auxiliary;
    }
    REQUIRE(hsum == c10s.headline);
    REQUIRE(asum == c10s.auxiliary);
}

TEST_CASE("canonical architecture json round trips", "[model]") {
    NetworkConfig c =
        fixtures::toy_config(BoundaryMode::Periodic, Variant::Plus);
    std::string j = to_canonical_json(c);
    NetworkConfig c2 = from_canonical_json(j);
    REQUIRE(to_canonical_json(c2) == j);
    REQUIRE(j.find("\"boundary\":\"periodic\"") != std::string::npos);
    REQUIRE(j.find("\"variant\":\"plus\"") != std::string::npos);
    REQUIRE(j.find("\"depth\":6") != std::string::npos);
}

TEST_CASE("checkpoint round trip is byte-stable", "[model][io]") {
    NetworkConfig c = fixtures::toy_config();
    auto p = init_parameters<double>(c, 42);
    for (auto& s : p.sep) {  // perturb running stats so they round-trip
        for (auto& v : s.bn.run_mean.vec()) v = 0.25;
        for (auto& v : s.bn.run_var.vec()) v = 2.0;
    }
    p.std_mean.flat(0) = 0.49;
    p.std_std.flat(2) = 0.22;
    const std::string f1 = "/tmp/hcnn_test_ck1.bin";
    const std::string f2 = "/tmp/hcnn_test_ck2.bin";
    save_checkpoint(f1, p, c, 123);
    auto ck = load_checkpoint<double>(f1);
    REQUIRE(ck.step == 123);
    REQUIRE(to_canonical_json(ck.config) == to_canonical_json(c));
    save_checkpoint(f2, ck.params, ck.config, ck.step);
    REQUIRE(slurp(f1) == slurp(f2));

    // loaded parameters reproduce outputs exactly
    Tensor<double> x0({2, 8, 8, 3});
    oracle::SplitMix rng(17);
    for (auto& v : x0.vec()) v = rng.uniform();
    auto a1 = forward(x0, p, c, false);
    auto a2 = forward(x0, ck.params, c, false);
    for (std::size_t i = 0; i < a1.x[6].size(); ++i)
        REQUIRE(a1.x[6].flat(i) == a2.x[6].flat(i));

    std::remove(f1.c_str());
    std::remove(f2.c_str());
}

TEST_CASE("full-model gradients match finite differences", "[model]") {
    for (Variant var : {Variant::Standard, Variant::Plus}) {
        NetworkConfig c = fixtures::toy_config(BoundaryMode::ZeroPad, var);
        auto p = init_parameters<double>(c, 9);
        Tensor<double> x0({2, 8, 8, 3});
        std::vector<int> labels = {1, 3};
        oracle::SplitMix rng(23);
        for (auto& v : x0.vec()) v = rng.uniform();
        auto acts = forward(x0, p, c, true);
        auto grads = zero_gradients(p);
        double loss = backward(acts, p, c, labels, grads);
        REQUIRE(std::isfinite(loss));
        REQUIRE(loss > 0);

        auto arrays = trainable_arrays(p);
        auto garrays = trainable_arrays(grads);
        auto names = trainable_names(p);
        auto loss_fn = [&]() {
            auto a = forward(x0, p, c, true);
            Tensor<double> pr = softmax(a.x[6]);
            return cross_entropy(pr, labels);
        };
        double worst = 0;
        std::string worst_name;
        oracle::SplitMix pick(31);
        for (std::size_t ai = 0; ai < arrays.size(); ++ai) {
            for (int rep = 0; rep < 3; ++rep) {
                std::size_t i = pick.below(arrays[ai]->size());
                double* slot = arrays[ai]->data() + i;
                double got = garrays[ai]->flat(i);
                double fd = oracle::central_difference(loss_fn, slot, 1e-5);
                double re = oracle::rel_err(got, fd, 1e-7);
                if (re > worst) {
                    worst = re;
                    worst_name = names[ai];
                }
            }
        }
        CAPTURE(int(var), worst_name);
        REQUIRE(worst < 1e-3);
    }
}

TEST_CASE("admissible splices leave the scores unchanged", "[model]") {
    NetworkConfig c =
        fixtures::toy_config(BoundaryMode::Periodic, Variant::Standard);
    auto p = init_parameters<double>(c, 77);
    Tensor<double> x0({2, 8, 8, 3});
    oracle::SplitMix rng(41);
    for (auto& v : x0.vec()) v = rng.uniform();
    auto base = forward(x0, p, c, false);
    auto xJ = base.x[6];

    // x_4 axes (b, u1, u2, v2, v3, v4): v2 shifts freely, v3 and v4 in even
    // steps, spatial axes in multiples of 2 (one stride below).
    struct Case {
        int axis;
        int tau;
    };
    std::vector<Case> cases = {{3, 1}, {3, 3}, {4, 2}, {5, 2},
                               {1, 2}, {2, 2}, {1, 4}};
    for (auto [axis, tau] : cases) {
        Activations<double> spl;
        spl.x.resize(7);
        spl.x[4] = translate(base.x[4], static_cast<std::size_t>(axis), tau,
                             BoundaryMode::Periodic);
        forward_from(4, p, c, spl, false);
        double d = 0;
        for (std::size_t i = 0; i < xJ.size(); ++i)
            d = std::max(d, std::abs(spl.x[6].flat(i) - xJ.flat(i)));
        CAPTURE(axis, tau);
        REQUIRE(d < 1e-10);
    }

    // control: an odd shift on v3 is outside the admissible set and must
    // change the scores
    Activations<double> spl;
    spl.x.resize(7);
    spl.x[4] = translate(base.x[4], 4, 1, BoundaryMode::Periodic);
    forward_from(4, p, c, spl, false);
    double d = 0;
    for (std::size_t i = 0; i < xJ.size(); ++i)
        d = std::max(d, std::abs(spl.x[6].flat(i) - xJ.flat(i)));
    REQUIRE(d > 1e-6);
}

TEST_CASE("prediction breaks score ties toward the lowest class", "[model]") {
    NetworkConfig c = fixtures::toy_config();
    auto p = init_parameters<double>(c, 1);
    for (auto* t : trainable_arrays(p)) t->fill(0);  // zero net
    Tensor<double> x0({1, 8, 8, 3});
    x0.fill(0.5);
    auto pr = predict(x0, p, c);
    REQUIRE(pr.labels[0] == 0);
    REQUIRE(pr.probs.dim(1) == 4);
    double sum = 0;
    for (std::size_t i = 0; i < 4; ++i) sum += pr.probs.flat(i);
    REQUIRE(std::abs(sum - 1.0) < 1e-12);
}

TEST_CASE("configuration validation rejects malformed geometry", "[model]") {
    NetworkConfig c = fixtures::toy_config();
    REQUIRE_NOTHROW(c.validate());

    NetworkConfig bad = c;
    bad.depth = 4;  // needs at least one separable layer
    REQUIRE_THROWS_AS(bad.validate(), config_error);

    bad = c;
    bad.max_attributes = 6;  // attribute count must be a multiple of 4
    REQUIRE_THROWS_AS(bad.validate(), config_error);

    bad = c;
    bad.stride_depths = {1};  // strides live in [2, depth-1]
    REQUIRE_THROWS_AS(bad.validate(), config_error);

    bad = c;
    bad.boundary = BoundaryMode::Periodic;
    bad.attr_support_a = 100;  // periodic support cannot exceed the axis
    REQUIRE_THROWS_AS(bad.validate(), config_error);
}
