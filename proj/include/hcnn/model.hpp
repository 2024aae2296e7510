#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "hcnn/conv.hpp"
#include "hcnn/errors.hpp"
#include "hcnn/nn.hpp"
#include "hcnn/tensor.hpp"

namespace hcnn {

// ---- configuration ---------------------------------------------------------

struct NetworkConfig {
    int depth = 12;           // J: layers 1..J-1 are trainable, J is the sum
    int max_attributes = 16;  // K
    int rank = 32;            // Q, separable factor count
    int spatial_size = 32;    // N
    int num_classes = 10;     // C
    std::size_t attr_support_a = 7;   // along v_{j-2}
    std::size_t attr_support_b = 11;  // along v_{j-1}
    std::size_t spatial_support_1 = 3;
    std::size_t spatial_support_2 = 3;
    std::vector<int> stride_depths = {5, 9};  // s_j = 1 at these depths
    BoundaryMode boundary = BoundaryMode::ZeroPad;
    Variant variant = Variant::Standard;

    void validate() const {
        if (depth < 5) throw config_error("depth must be at least 5");
        if (max_attributes < 4 || max_attributes % 4 != 0)
            throw config_error("max_attributes must be a positive multiple of 4");
        if (rank < 1) throw config_error("rank must be positive");
        if (spatial_size < 1) throw config_error("spatial_size must be positive");
        if (num_classes < 2) throw config_error("need at least two classes");
        if (attr_support_a < 1 || attr_support_b < 1 ||
            spatial_support_1 < 1 || spatial_support_2 < 1)
            throw config_error("filter supports must be positive");
        for (int d : stride_depths)
            if (d < 2 || d > depth - 1)
                throw config_error("stride depths must lie in [2, depth-1]");
        if (boundary == BoundaryMode::Periodic) {
            // Periodic convolutions require support <= axis length at every
            // layer; the binding constraints are the steady-state extents.
            if (attr_support_a > static_cast<std::size_t>(max_attributes / 2) ||
                attr_support_b > static_cast<std::size_t>(max_attributes))
                throw config_error(
                    "periodic boundary requires attribute supports <= (K/2, K)");
        }
    }

    std::size_t K() const { return static_cast<std::size_t>(max_attributes); }
    std::size_t C() const { return static_cast<std::size_t>(num_classes); }
    std::size_t Q() const { return static_cast<std::size_t>(rank); }

    bool strided_at(int j) const {
        return std::find(stride_depths.begin(), stride_depths.end(), j) !=
               stride_depths.end();
    }

    // Output attribute count of trainable layer j.
    std::size_t kout(int j) const { return j == depth - 1 ? C() : K(); }

    // Spatial extent of x_j.
    std::size_t spatial_extent(int j) const {
        std::size_t n = static_cast<std::size_t>(spatial_size);
        for (int d = 2; d <= j && d <= depth - 1; ++d)
            if (strided_at(d)) n = (n + 1) / 2;
        return n;
    }
};

inline const char* to_string(BoundaryMode m) {
    return m == BoundaryMode::ZeroPad ? "zero_pad" : "periodic";
}
inline const char* to_string(Variant v) {
    return v == Variant::Standard ? "standard" : "plus";
}

// Canonical single-line JSON with alphabetically ordered keys; this exact
// byte sequence is embedded in checkpoints.
inline std::string to_canonical_json(const NetworkConfig& c) {
    std::ostringstream os;
    os << "{\"attribute_support\":[" << c.attr_support_a << ","
       << c.attr_support_b << "],\"boundary\":\"" << to_string(c.boundary)
       << "\",\"depth\":" << c.depth << ",\"max_attributes\":"
       << c.max_attributes << ",\"num_classes\":" << c.num_classes
       << ",\"rank\":" << c.rank << ",\"spatial_size\":" << c.spatial_size
       << ",\"spatial_support\":[" << c.spatial_support_1 << ","
       << c.spatial_support_2 << "],\"stride_depths\":[";
    for (std::size_t i = 0; i < c.stride_depths.size(); ++i)
        os << (i ? "," : "") << c.stride_depths[i];
    os << "],\"variant\":\"" << to_string(c.variant) << "\"}";
    return os.str();
}

// Strict parser for the canonical form above (the only producer is
// to_canonical_json, so the grammar is exact).
namespace detail {
struct CanonReader {
    const std::string& s;
    std::size_t pos = 0;
    explicit CanonReader(const std::string& str) : s(str) {}
    void expect(const std::string& lit) {
        if (s.compare(pos, lit.size(), lit) != 0)
            throw data_error("malformed embedded config near offset " +
                             std::to_string(pos));
        pos += lit.size();
    }
    long long integer() {
        std::size_t start = pos;
        if (pos < s.size() && s[pos] == '-') ++pos;
        while (pos < s.size() && std::isdigit(static_cast<unsigned char>(s[pos])))
            ++pos;
        if (pos == start) throw data_error("expected integer in config");
        return std::stoll(s.substr(start, pos - start));
    }
    std::string quoted() {
        expect("\"");
        std::size_t end = s.find('"', pos);
        if (end == std::string::npos) throw data_error("unterminated string");
        std::string out = s.substr(pos, end - pos);
        pos = end + 1;
        return out;
    }
};
}  // namespace detail

inline NetworkConfig from_canonical_json(const std::string& s) {
    detail::CanonReader r(s);
    NetworkConfig c;
    r.expect("{\"attribute_support\":[");
    c.attr_support_a = static_cast<std::size_t>(r.integer());
    r.expect(",");
    c.attr_support_b = static_cast<std::size_t>(r.integer());
    r.expect("],\"boundary\":");
    std::string b = r.quoted();
    if (b == "zero_pad") c.boundary = BoundaryMode::ZeroPad;
    else if (b == "periodic") c.boundary = BoundaryMode::Periodic;
    else throw data_error("unknown boundary mode: " + b);
    r.expect(",\"depth\":");
    c.depth = static_cast<int>(r.integer());
    r.expect(",\"max_attributes\":");
    c.max_attributes = static_cast<int>(r.integer());
    r.expect(",\"num_classes\":");
    c.num_classes = static_cast<int>(r.integer());
    r.expect(",\"rank\":");
    c.rank = static_cast<int>(r.integer());
    r.expect(",\"spatial_size\":");
    c.spatial_size = static_cast<int>(r.integer());
    r.expect(",\"spatial_support\":[");
    c.spatial_support_1 = static_cast<std::size_t>(r.integer());
    r.expect(",");
    c.spatial_support_2 = static_cast<std::size_t>(r.integer());
    r.expect("],\"stride_depths\":[");
    c.stride_depths.clear();
    if (r.s[r.pos] != ']')
        while (true) {
            c.stride_depths.push_back(static_cast<int>(r.integer()));
            if (r.s[r.pos] == ',') { ++r.pos; continue; }
            break;
        }
    r.expect("],\"variant\":");
    std::string v = r.quoted();
    if (v == "standard") c.variant = Variant::Standard;
    else if (v == "plus") c.variant = Variant::Plus;
    else throw data_error("unknown variant: " + v);
    r.expect("}");
    c.validate();
    return c;
}

// ---- parameters ------------------------------------------------------------

template <class T>
struct DenseLayer {
    Tensor<T> w;
    Tensor<T> bias;
};

template <class T>
struct SepLayer {
    SeparableFilterBank<T> bank;
    BatchNormState<T> bn;
    Tensor<T> bias;
};

template <class T>
struct Parameters {
    DenseLayer<T> l1, l2, l3;
    std::vector<SepLayer<T>> sep;  // trainable layers 4 .. J-1 in order
    // Training-split standardization statistics, carried for inference.
    Tensor<T> std_mean{std::vector<std::size_t>{3}};
    Tensor<T> std_std{std::vector<std::size_t>{3}, T(1)};
};

namespace detail {
template <class T, class Rng>
void fill_uniform(Tensor<T>& t, double bound, Rng& rng) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& v : t.vec()) v = static_cast<T>(dist(rng));
}
}  // namespace detail

// Fan-in scaled uniform initialization; biases zero, normalization affine
// at identity. fan_in counts the filter support together with any channel
// sum feeding the same output (v_0 at layer 1, the marginalized v_{j-3}
// ahead of each spatial bank).
template <class T>
Parameters<T> init_parameters(const NetworkConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    const std::size_t K = cfg.K(), Q = cfg.Q();
    const std::size_t S1 = cfg.spatial_support_1, S2 = cfg.spatial_support_2;
    const std::size_t Sa = cfg.attr_support_a, Sb = cfg.attr_support_b;
    std::mt19937_64 rng(seed);
    Parameters<T> p;

    p.l1.w = Tensor<T>({K, 3, S1, S2});
    detail::fill_uniform(p.l1.w, std::sqrt(6.0 / double(3 * S1 * S2)), rng);
    p.l1.bias = Tensor<T>({K});

    p.l2.w = Tensor<T>({K, S1, S2, Sb});
    detail::fill_uniform(p.l2.w, std::sqrt(6.0 / double(S1 * S2 * Sb)), rng);
    p.l2.bias = Tensor<T>({K});

    p.l3.w = Tensor<T>({K, S1, S2, Sa, Sb});
    detail::fill_uniform(p.l3.w, std::sqrt(6.0 / double(S1 * S2 * Sa * Sb)),
                         rng);
    p.l3.bias = Tensor<T>({K});

    for (int j = 4; j <= cfg.depth - 1; ++j) {
        SepLayer<T> layer;
        layer.bank.h = Tensor<T>({Q, S1, S2});
        detail::fill_uniform(layer.bank.h,
                             std::sqrt(6.0 / double(S1 * S2 * (K / 4))), rng);
        layer.bank.g = Tensor<T>({cfg.kout(j), Q, Sa, Sb});
        detail::fill_uniform(layer.bank.g,
                             std::sqrt(6.0 / double(Q * Sa * Sb)), rng);
        layer.bn = BatchNormState<T>::init(K / 2, K, Q);
        layer.bias = Tensor<T>({cfg.kout(j)});
        p.sep.push_back(std::move(layer));
    }
    return p;
}

// Flat trainable-array registry; the order here is the contract for
// checkpoints, optimizer state, and gradient layouts.
template <class T>
std::vector<Tensor<T>*> trainable_arrays(Parameters<T>& p) {
    std::vector<Tensor<T>*> out = {&p.l1.w, &p.l1.bias, &p.l2.w, &p.l2.bias,
                                   &p.l3.w, &p.l3.bias};
    for (auto& s : p.sep) {
        out.push_back(&s.bank.h);
        out.push_back(&s.bank.g);
        out.push_back(&s.bn.gamma);
        out.push_back(&s.bn.beta);
        out.push_back(&s.bias);
    }
    return out;
}

template <class T>
std::vector<std::string> trainable_names(const Parameters<T>& p) {
    std::vector<std::string> out = {"layer1.w", "layer1.bias", "layer2.w",
                                    "layer2.bias", "layer3.w", "layer3.bias"};
    for (std::size_t i = 0; i < p.sep.size(); ++i) {
        std::string base = "layer" + std::to_string(i + 4);
        out.push_back(base + ".h");
        out.push_back(base + ".g");
        out.push_back(base + ".gamma");
        out.push_back(base + ".beta");
        out.push_back(base + ".bias");
    }
    return out;
}

// Checkpoint order: trainables per layer, with the running normalization
// estimates appended after each separable layer, then the standardization
// statistics.
template <class T>
std::vector<Tensor<T>*> checkpoint_arrays(Parameters<T>& p) {
    std::vector<Tensor<T>*> out = {&p.l1.w, &p.l1.bias, &p.l2.w, &p.l2.bias,
                                   &p.l3.w, &p.l3.bias};
    for (auto& s : p.sep) {
        out.push_back(&s.bank.h);
        out.push_back(&s.bank.g);
        out.push_back(&s.bn.gamma);
        out.push_back(&s.bn.beta);
        out.push_back(&s.bias);
        out.push_back(&s.bn.run_mean);
        out.push_back(&s.bn.run_var);
    }
    out.push_back(&p.std_mean);
    out.push_back(&p.std_std);
    return out;
}

// ---- parameter counting ----------------------------------------------------

struct LayerCount {
    std::string name;
    std::size_t headline = 0;   // filter coefficients, reference accounting
    std::size_t auxiliary = 0;  // biases and normalization affine terms
};

struct ParameterCount {
    std::vector<LayerCount> layers;
    std::size_t headline = 0;
    std::size_t auxiliary = 0;
    std::size_t trainable = 0;  // literal trainable scalars
};

inline ParameterCount count_parameters(const NetworkConfig& cfg) {
    cfg.validate();
    const std::size_t K = cfg.K(), Q = cfg.Q();
    const std::size_t S = cfg.spatial_support_1 * cfg.spatial_support_2;
    const std::size_t Sa = cfg.attr_support_a, Sb = cfg.attr_support_b;
    ParameterCount out;
    auto add = [&out](std::string name, std::size_t headline,
                      std::size_t aux) {
        out.layers.push_back({std::move(name), headline, aux});
        out.headline += headline;
        out.auxiliary += aux;
    };
    add("layer1", K * 3 * S, K);
    add("layer2", K * S * Sb, K);
    add("layer3", K * S * Sa * Sb, K);
    std::size_t sep_trainable = 0;
    for (int j = 4; j <= cfg.depth - 1; ++j) {
        const std::size_t kout = cfg.kout(j);
        const std::size_t factored = Q * S + kout * Q * Sa * Sb;
        const std::size_t materialized = kout * S * Sa * Sb;
        const std::size_t aux = kout + 2 * ((K / 2) * K * Q);
        add("layer" + std::to_string(j),
            cfg.variant == Variant::Plus ? factored : materialized, aux);
        sep_trainable += factored + aux;
    }
    out.trainable = out.layers[0].headline + out.layers[1].headline +
                    out.layers[2].headline + 3 * K + sep_trainable;
    return out;
}

// ---- activations and forward/backward --------------------------------------

template <class T>
struct Activations {
    std::vector<Tensor<T>> x;                    // x[0] .. x[J]
    std::vector<SeparableLayerCache<T>> cache;   // per separable layer
    bool training = false;
};

template <class T>
void forward_layer(int j, Parameters<T>& params, const NetworkConfig& cfg,
                   Activations<T>& acts, bool training, int threads = 1) {
    const BoundaryMode mode = cfg.boundary;
    const std::size_t K = cfg.K();
    const std::size_t su = cfg.strided_at(j) ? 2 : 1;
    const Tensor<T>& prev = acts.x[static_cast<std::size_t>(j) - 1];

    if (j == cfg.depth) {
        // Invariant summation: collapse everything except the newest
        // attribute axis. No filters, no nonlinearity.
        const std::size_t B = prev.dim(0), C = prev.dim(5);
        const std::size_t rows = prev.size() / (B * C);
        Tensor<T> out({B, C});
        for (std::size_t b = 0; b < B; ++b) {
            const T* base = prev.data() + b * rows * C;
            T* o = out.data() + b * C;
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < C; ++c) o[c] += base[r * C + c];
        }
        acts.x[static_cast<std::size_t>(j)] = std::move(out);
        return;
    }

    Tensor<T> z;
    if (j == 1) {
        if (su != 1) throw config_error("layer 1 cannot be strided");
        z = image_conv_forward(prev, params.l1.w, mode, threads);
        acts.x[1] = elu_forward(z, params.l1.bias);
    } else if (j == 2) {
        const std::size_t B = prev.dim(0), U = prev.dim(1), U2 = prev.dim(2);
        Tensor<T> in5 = prev.reshaped({B, U, U2, 1, K});
        Tensor<T> w5 = params.l2.w.reshaped({K, cfg.spatial_support_1,
                                             cfg.spatial_support_2, 1,
                                             cfg.attr_support_b});
        DenseConvGeom g{1, 1, su, mode};
        z = dense_attr_forward(in5, w5, g, threads);
        const std::size_t Uo = z.dim(1), Uo2 = z.dim(2);
        z = z.reshaped({B, Uo, Uo2, K, K});
        acts.x[2] = elu_forward(z, params.l2.bias);
    } else if (j == 3) {
        DenseConvGeom g{4, 2, su, mode};
        z = dense_attr_forward(prev, params.l3.w, g, threads);
        acts.x[3] = elu_forward(z, params.l3.bias);
    } else {
        auto& layer = params.sep[static_cast<std::size_t>(j) - 4];
        SeparableGeom geom{su, mode};
        acts.x[static_cast<std::size_t>(j)] = separable_attribute_conv(
            prev, layer.bank, layer.bn, layer.bias, geom, cfg.variant,
            training, &acts.cache[static_cast<std::size_t>(j) - 4], threads);
    }
}

// Runs layers from_layer+1 .. J given x[from_layer]; from_layer = 0 is the
// full forward pass. The splice tests preset an intermediate x_j and resume.
template <class T>
void forward_from(int from_layer, Parameters<T>& params,
                  const NetworkConfig& cfg, Activations<T>& acts,
                  bool training, int threads = 1) {
    acts.x.resize(static_cast<std::size_t>(cfg.depth) + 1);
    acts.cache.resize(static_cast<std::size_t>(cfg.depth - 4));
    acts.training = training;
    for (int j = from_layer + 1; j <= cfg.depth; ++j)
        forward_layer(j, params, cfg, acts, training, threads);
}

template <class T>
Activations<T> forward(const Tensor<T>& x0, Parameters<T>& params,
                       const NetworkConfig& cfg, bool training,
                       int threads = 1) {
    if (x0.rank() != 4 || x0.dim(3) != 3)
        throw config_error("input must be (batch, N, N, 3)");
    if (x0.dim(1) != static_cast<std::size_t>(cfg.spatial_size) ||
        x0.dim(2) != static_cast<std::size_t>(cfg.spatial_size))
        throw config_error("input spatial size does not match config");
    Activations<T> acts;
    acts.x.resize(static_cast<std::size_t>(cfg.depth) + 1);
    acts.x[0] = x0;
    forward_from(0, params, cfg, acts, training, threads);
    return acts;
}

template <class T>
struct GradientSet {
    Tensor<T> gw1, gb1, gw2, gb2, gw3, gb3;
    struct Sep {
        Tensor<T> gh, gg, ggamma, gbeta, gbias;
    };
    std::vector<Sep> sep;
};

template <class T>
std::vector<Tensor<T>*> trainable_arrays(GradientSet<T>& g) {
    std::vector<Tensor<T>*> out = {&g.gw1, &g.gb1, &g.gw2,
                                   &g.gb2, &g.gw3, &g.gb3};
    for (auto& s : g.sep) {
        out.push_back(&s.gh);
        out.push_back(&s.gg);
        out.push_back(&s.ggamma);
        out.push_back(&s.gbeta);
        out.push_back(&s.gbias);
    }
    return out;
}

template <class T>
GradientSet<T> zero_gradients(Parameters<T>& params) {
    GradientSet<T> g;
    g.gw1 = Tensor<T>(params.l1.w.shape());
    g.gb1 = Tensor<T>(params.l1.bias.shape());
    g.gw2 = Tensor<T>(params.l2.w.shape());
    g.gb2 = Tensor<T>(params.l2.bias.shape());
    g.gw3 = Tensor<T>(params.l3.w.shape());
    g.gb3 = Tensor<T>(params.l3.bias.shape());
    for (auto& s : params.sep)
        g.sep.push_back({Tensor<T>(s.bank.h.shape()),
                         Tensor<T>(s.bank.g.shape()),
                         Tensor<T>(s.bn.gamma.shape()),
                         Tensor<T>(s.bn.beta.shape()),
                         Tensor<T>(s.bias.shape())});
    return g;
}

// Reverse pass over the whole network. Returns the minibatch-mean
// cross-entropy; gradients for every trainable array land in `grads`.
template <class T>
T backward(Activations<T>& acts, Parameters<T>& params,
           const NetworkConfig& cfg, const std::vector<int>& labels,
           GradientSet<T>& grads, int threads = 1) {
    const BoundaryMode mode = cfg.boundary;
    const std::size_t K = cfg.K();
    const int J = cfg.depth;
    if (!acts.training)
        throw config_error("backward requires training-mode activations");

    Tensor<T>& xJ = acts.x[static_cast<std::size_t>(J)];
    Tensor<T> probs = softmax(xJ);
    T loss = cross_entropy_from_logits(xJ, labels);
    Tensor<T> gflat = softmax_cross_entropy_backward(probs, labels);

    // Adjoint of the final summation: broadcast over all collapsed axes.
    const Tensor<T>& xlast = acts.x[static_cast<std::size_t>(J) - 1];
    Tensor<T> gx(xlast.shape());
    {
        const std::size_t B = xlast.dim(0), C = xlast.dim(5);
        const std::size_t rows = xlast.size() / (B * C);
        for (std::size_t b = 0; b < B; ++b) {
            const T* src = gflat.data() + b * C;
            T* dst = gx.data() + b * rows * C;
            for (std::size_t r = 0; r < rows; ++r)
                std::memcpy(dst + r * C, src, C * sizeof(T));
        }
    }

    for (int j = J - 1; j >= 4; --j) {
        auto& layer = params.sep[static_cast<std::size_t>(j) - 4];
        auto& gsep = grads.sep[static_cast<std::size_t>(j) - 4];
        SeparableGeom geom{cfg.strided_at(j) ? std::size_t(2) : std::size_t(1),
                           mode};
        auto gr = separable_attribute_conv_backward(
            acts.x[static_cast<std::size_t>(j) - 1],
            acts.x[static_cast<std::size_t>(j)], gx, layer.bank, layer.bn,
            geom, cfg.variant, acts.cache[static_cast<std::size_t>(j) - 4],
            threads);
        gsep.gh.add(gr.gh);
        gsep.gg.add(gr.gg);
        gsep.ggamma.add(gr.ggamma);
        gsep.gbeta.add(gr.gbeta);
        gsep.gbias.add(gr.gbias);
        gx = std::move(gr.gx_prev);
    }

    {  // layer 3
        Tensor<T> gz = elu_backward(acts.x[3], gx, grads.gb3);
        DenseConvGeom g{4, 2, cfg.strided_at(3) ? std::size_t(2) : std::size_t(1),
                        mode};
        grads.gw3.add(dense_attr_grad_filter(acts.x[2], gz,
                                             params.l3.w.shape(), g, threads));
        gx = dense_attr_grad_data(gz, params.l3.w, acts.x[2].shape(), g,
                                  threads);
    }
    {  // layer 2
        Tensor<T> gz = elu_backward(acts.x[2], gx, grads.gb2);
        const std::size_t B = acts.x[1].dim(0), U = acts.x[1].dim(1),
                          U2 = acts.x[1].dim(2);
        Tensor<T> in5 = acts.x[1].reshaped({B, U, U2, 1, K});
        Tensor<T> w5 = params.l2.w.reshaped({K, cfg.spatial_support_1,
                                             cfg.spatial_support_2, 1,
                                             cfg.attr_support_b});
        const std::size_t Zo1 = gz.dim(1), Zo2 = gz.dim(2);
        Tensor<T> gz5 = gz.reshaped({B, Zo1, Zo2, 1, K, K});
        DenseConvGeom g{1, 1, cfg.strided_at(2) ? std::size_t(2) : std::size_t(1),
                        mode};
        Tensor<T> gw5 = dense_attr_grad_filter(in5, gz5, w5.shape(), g,
                                               threads);
        grads.gw2.add(gw5.reshaped(params.l2.w.shape()));
        Tensor<T> gin5 = dense_attr_grad_data(gz5, w5, in5.shape(), g,
                                              threads);
        gx = gin5.reshaped({B, U, U2, K});
    }
    {  // layer 1
        Tensor<T> gz = elu_backward(acts.x[1], gx, grads.gb1);
        grads.gw1.add(image_conv_grad_filter(acts.x[0], gz,
                                             cfg.spatial_support_1,
                                             cfg.spatial_support_2, mode,
                                             threads));
    }
    return loss;
}

// ---- prediction ------------------------------------------------------------

template <class T>
struct Prediction {
    std::vector<int> labels;
    Tensor<T> probs;
};

template <class T>
Prediction<T> predict(const Tensor<T>& x0, Parameters<T>& params,
                      const NetworkConfig& cfg, int threads = 1) {
    Activations<T> acts = forward(x0, params, cfg, false, threads);
    Prediction<T> out;
    out.probs = softmax(acts.x[static_cast<std::size_t>(cfg.depth)]);
    const std::size_t B = out.probs.dim(0), C = out.probs.dim(1);
    out.labels.resize(B);
    for (std::size_t b = 0; b < B; ++b) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < C; ++c)
            if (out.probs.flat(b * C + c) > out.probs.flat(b * C + best))
                best = c;  // ties keep the lowest index
        out.labels[b] = static_cast<int>(best);
    }
    return out;
}

// ---- checkpoints -----------------------------------------------------------

constexpr std::uint32_t kCheckpointVersion = 1;

template <class T>
void save_checkpoint(const std::string& path, Parameters<T>& params,
                     const NetworkConfig& cfg, std::uint64_t step) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw data_error("cannot open for write: " + path);
    detail::put_bytes(os, "HCNN", 4);
    std::uint32_t ver = kCheckpointVersion;
    detail::put_bytes(os, &ver, 4);
    std::string cj = to_canonical_json(cfg);
    std::uint32_t len = static_cast<std::uint32_t>(cj.size());
    detail::put_bytes(os, &len, 4);
    detail::put_bytes(os, cj.data(), cj.size());
    for (Tensor<T>* t : checkpoint_arrays(params)) {
        if (!t->all_finite())
            throw numeric_error("refusing to checkpoint non-finite values");
        save_tensor(os, *t);
    }
    detail::put_bytes(os, &step, 8);
    if (!os) throw data_error("write failed: " + path);
}

template <class T>
struct Checkpoint {
    Parameters<T> params;
    NetworkConfig config;
    std::uint64_t step = 0;
};

template <class T>
Checkpoint<T> load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw data_error("cannot open: " + path);
    char magic[4];
    detail::get_bytes(is, magic, 4);
    if (std::memcmp(magic, "HCNN", 4) != 0)
        throw data_error("bad checkpoint magic");
    std::uint32_t ver = 0, len = 0;
    detail::get_bytes(is, &ver, 4);
    if (ver != kCheckpointVersion)
        throw data_error("unsupported checkpoint version");
    detail::get_bytes(is, &len, 4);
    if (len > (1u << 20)) throw data_error("implausible config length");
    std::string cj(len, '\0');
    detail::get_bytes(is, cj.data(), len);
    Checkpoint<T> out;
    out.config = from_canonical_json(cj);
    out.params = init_parameters<T>(out.config, 0);
    for (Tensor<T>* t : checkpoint_arrays(out.params)) {
        Tensor<T> loaded = load_tensor<T>(is);
        if (loaded.shape() != t->shape())
            throw data_error("checkpoint tensor shape mismatch");
        *t = std::move(loaded);
    }
    detail::get_bytes(is, &out.step, 8);
    return out;
}

}  // namespace hcnn
