#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "hcnn/data.hpp"
#include "hcnn/errors.hpp"
#include "hcnn/model.hpp"
#include "hcnn/tensor.hpp"

namespace hcnn {

// Attribute signature of one image at depth j: activations at the central
// spatial position, summed over the oldest attribute axis. Values are
// indexed (v_{j-1}, v_j).
template <class T>
struct AttributeArray {
    Tensor<T> values;
    long image_id = -1;
    int depth = 0;
    int label = -1;
    std::size_t u0_row = 0, u0_col = 0;
};

// Requires Periodic activations (the translation arguments below rely on
// circular geometry). 3 <= j <= J-1.
template <class T>
AttributeArray<T> invariant_array(const Activations<T>& acts,
                                  const NetworkConfig& cfg, int j,
                                  std::size_t batch_index, long image_id = -1,
                                  int label = -1) {
    if (j < 3 || j > cfg.depth - 1)
        throw config_error("invariant_array: depth out of range");
    const Tensor<T>& x = acts.x[static_cast<std::size_t>(j)];
    if (x.rank() != 6) throw config_error("invariant_array: rank-6 layer required");
    const std::size_t U = x.dim(1);
    const std::size_t P = x.dim(3), R = x.dim(4), K = x.dim(5);
    AttributeArray<T> out;
    out.depth = j;
    out.image_id = image_id;
    out.label = label;
    out.u0_row = U / 2;
    out.u0_col = x.dim(2) / 2;
    out.values = Tensor<T>({R, K});
    for (std::size_t p = 0; p < P; ++p)
        for (std::size_t r = 0; r < R; ++r)
            for (std::size_t k = 0; k < K; ++k)
                out.values(r, k) +=
                    x(batch_index, out.u0_row, out.u0_col, p, r, k);
    return out;
}

// Circular box average along the first axis: out(r) = mean of in(r .. r+w-1).
// Commutes exactly with circular shifts.
template <class T>
Tensor<T> box_smooth(const Tensor<T>& values, std::size_t width) {
    if (width < 1) throw config_error("box_smooth: width must be >= 1");
    const std::size_t R = values.dim(0), K = values.dim(1);
    Tensor<T> out({R, K});
    for (std::size_t r = 0; r < R; ++r)
        for (std::size_t k = 0; k < K; ++k) {
            T acc{};
            for (std::size_t d = 0; d < width; ++d)
                acc += values((r + d) % R, k);
            out(r, k) = acc / static_cast<T>(width);
        }
    return out;
}

template <class T>
struct RankedMatch {
    long image_id = -1;
    int label = -1;
    std::size_t corpus_index = 0;
    double distance = 0;
};

// Ranks corpus arrays by Euclidean distance to the query translated by tau
// along v_{j-1} (circularly), after box smoothing both sides. Ties resolve
// to the lowest image id.
template <class T>
std::vector<RankedMatch<T>> nearest_translated(
        const AttributeArray<T>& query, int tau,
        const std::vector<AttributeArray<T>>& corpus,
        std::size_t smooth_width = 2) {
    Tensor<T> q = box_smooth(query.values, smooth_width);
    q = translate(q, 0, tau, BoundaryMode::Periodic);
    std::vector<RankedMatch<T>> out;
    out.reserve(corpus.size());
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        const auto& cand = corpus[i];
        if (cand.values.shape() != query.values.shape())
            throw config_error("nearest_translated: extent mismatch");
        Tensor<T> c = box_smooth(cand.values, smooth_width);
        double d2 = 0;
        for (std::size_t n = 0; n < c.size(); ++n) {
            const double d = double(q.flat(n)) - double(c.flat(n));
            d2 += d * d;
        }
        out.push_back({cand.image_id, cand.label, i, std::sqrt(d2)});
    }
    std::stable_sort(out.begin(), out.end(),
                     [](const RankedMatch<T>& a, const RankedMatch<T>& b) {
                         if (a.distance != b.distance)
                             return a.distance < b.distance;
                         return a.image_id < b.image_id;
                     });
    return out;
}

// Builds per-image attribute arrays at one depth over a whole set.
template <class T>
std::vector<AttributeArray<T>> build_attribute_corpus(
        const LabeledImageSet<T>& set, Parameters<T>& params,
        const NetworkConfig& cfg, int depth, int batch_size = 100,
        int threads = 1) {
    if (cfg.boundary != BoundaryMode::Periodic)
        throw config_error("attribute analysis requires periodic boundary");
    std::vector<AttributeArray<T>> out;
    out.reserve(set.count());
    for (std::size_t start = 0; start < set.count();
         start += static_cast<std::size_t>(batch_size)) {
        const std::size_t stop = std::min(
            set.count(), start + static_cast<std::size_t>(batch_size));
        std::vector<std::size_t> idx(stop - start);
        std::iota(idx.begin(), idx.end(), start);
        auto [batch, labels] = gather_batch(set, idx);
        auto acts = forward(batch, params, cfg, false, threads);
        for (std::size_t b = 0; b < idx.size(); ++b)
            out.push_back(invariant_array(acts, cfg, depth, b,
                                          static_cast<long>(idx[b]),
                                          labels[b]));
    }
    return out;
}

// Fraction of queries whose top-1 translated match (self excluded) shares
// the query's class.
template <class T>
double class_agreement(const std::vector<AttributeArray<T>>& queries,
                       const std::vector<AttributeArray<T>>& corpus, int tau,
                       std::size_t smooth_width = 2) {
    if (queries.empty()) throw config_error("class_agreement: no queries");
    std::size_t hits = 0;
    for (const auto& q : queries) {
        auto ranked = nearest_translated(q, tau, corpus, smooth_width);
        for (const auto& m : ranked) {
            if (m.image_id == q.image_id) continue;
            if (m.label == q.label) ++hits;
            break;
        }
    }
    return double(hits) / double(queries.size());
}

// ---- covariance probe -------------------------------------------------

// Admissible translation moduli for every axis of x_j: translating x_j by a
// multiple of the modulus (Periodic mode) must leave x_J unchanged. A zero
// modulus marks an axis with no invariance claim (the class axis at J-1).
struct AxisRule {
    std::size_t axis = 0;
    std::string name;
    int modulus = 0;
};

inline std::vector<AxisRule> admissible_rules(const NetworkConfig& cfg,
                                              int j) {
    const int J = cfg.depth;
    if (j < 1 || j > J - 1)
        throw config_error("admissible_rules: depth out of range");
    std::vector<AxisRule> rules;
    int spatial = 1;
    for (int i = j + 1; i <= J - 1; ++i)
        if (cfg.strided_at(i)) spatial *= 2;
    rules.push_back({1, "u1", spatial});
    rules.push_back({2, "u2", spatial});
    auto attr_name = [](int v) { return "v" + std::to_string(v); };
    if (j == 1) {
        rules.push_back({3, attr_name(1), 4});
    } else if (j == 2) {
        rules.push_back({3, attr_name(1), 4});
        rules.push_back({4, attr_name(2), 4});
    } else {
        // axes (v_{j-2}, v_{j-1}, v_j)
        rules.push_back({3, attr_name(j - 2), 1});
        rules.push_back({4, attr_name(j - 1), j == J - 1 ? 1 : 2});
        int mod;
        if (j == J - 1) mod = 0;         // class axis: no claim
        else if (j == J - 2) mod = 2;    // one stride-2 pass then summed
        else mod = 4;                    // two stride-2 passes then summed
        rules.push_back({5, attr_name(j), mod});
    }
    return rules;
}

struct ProbeRecord {
    int depth = 0;
    std::string axis;
    int tau = 0;
    double max_rel = 0;
};

struct ProbeReport {
    std::vector<ProbeRecord> records;
    double worst = 0;
    bool informational = false;  // set for ZeroPad runs (expected to fail)
};

// Proposition-style splice test: forward once, translate x_j along each
// admissible axis/stride, resume from layer j+1, and compare x_J.
template <class T>
ProbeReport covariance_probe(Parameters<T>& params, const NetworkConfig& cfg,
                             const Tensor<T>& x0, int threads = 1) {
    ProbeReport report;
    report.informational = cfg.boundary != BoundaryMode::Periodic;
    Activations<T> base = forward(x0, params, cfg, false, threads);
    const Tensor<T>& xJ = base.x[static_cast<std::size_t>(cfg.depth)];
    double ref = 0;
    for (std::size_t i = 0; i < xJ.size(); ++i)
        ref = std::max(ref, std::abs(double(xJ.flat(i))));
    ref = std::max(ref, 1e-12);

    for (int j = 1; j <= cfg.depth - 1; ++j) {
        const Tensor<T>& xj = base.x[static_cast<std::size_t>(j)];
        for (const AxisRule& rule : admissible_rules(cfg, j)) {
            if (rule.modulus == 0) continue;
            const std::size_t extent = xj.dim(rule.axis);
            for (int mult : {1, 2}) {
                const int tau = rule.modulus * mult;
                if (static_cast<std::size_t>(tau) >= extent) break;
                Activations<T> spliced;
                spliced.x.resize(static_cast<std::size_t>(cfg.depth) + 1);
                spliced.x[static_cast<std::size_t>(j)] =
                    translate(xj, rule.axis, tau, BoundaryMode::Periodic);
                forward_from(j, params, cfg, spliced, false, threads);
                const Tensor<T>& got =
                    spliced.x[static_cast<std::size_t>(cfg.depth)];
                double dev = 0;
                for (std::size_t i = 0; i < xJ.size(); ++i)
                    dev = std::max(
                        dev, std::abs(double(got.flat(i)) -
                                      double(xJ.flat(i))));
                ProbeRecord rec{j, rule.name, tau, dev / ref};
                report.records.push_back(rec);
                report.worst = std::max(report.worst, rec.max_rel);
            }
        }
    }
    return report;
}

// ---- corpus cache and heatmaps -----------------------------------------

constexpr std::uint32_t kCorpusFormatVersion = 1;

template <class T>
void save_attribute_corpus(const std::string& path,
                           const std::vector<AttributeArray<T>>& corpus) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw data_error("cannot open for write: " + path);
    detail::put_bytes(os, "HATC", 4);
    std::uint32_t ver = kCorpusFormatVersion;
    detail::put_bytes(os, &ver, 4);
    std::uint64_t n = corpus.size();
    detail::put_bytes(os, &n, 8);
    for (const auto& a : corpus) {
        std::int64_t id = a.image_id;
        std::int32_t depth = a.depth, label = a.label;
        std::uint32_t u0r = static_cast<std::uint32_t>(a.u0_row);
        std::uint32_t u0c = static_cast<std::uint32_t>(a.u0_col);
        detail::put_bytes(os, &id, 8);
        detail::put_bytes(os, &depth, 4);
        detail::put_bytes(os, &label, 4);
        detail::put_bytes(os, &u0r, 4);
        detail::put_bytes(os, &u0c, 4);
        save_tensor(os, a.values);
    }
    if (!os) throw data_error("write failed: " + path);
}

template <class T>
std::vector<AttributeArray<T>> load_attribute_corpus(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw data_error("cannot open: " + path);
    char magic[4];
    detail::get_bytes(is, magic, 4);
    if (std::memcmp(magic, "HATC", 4) != 0)
        throw data_error("bad corpus magic");
    std::uint32_t ver = 0;
    detail::get_bytes(is, &ver, 4);
    if (ver != kCorpusFormatVersion)
        throw data_error("unsupported corpus version");
    std::uint64_t n = 0;
    detail::get_bytes(is, &n, 8);
    std::vector<AttributeArray<T>> out;
    out.reserve(n);
    for (std::uint64_t i = 0; i < n; ++i) {
        AttributeArray<T> a;
        std::int64_t id;
        std::int32_t depth, label;
        std::uint32_t u0r, u0c;
        detail::get_bytes(is, &id, 8);
        detail::get_bytes(is, &depth, 4);
        detail::get_bytes(is, &label, 4);
        detail::get_bytes(is, &u0r, 4);
        detail::get_bytes(is, &u0c, 4);
        a.image_id = id;
        a.depth = depth;
        a.label = label;
        a.u0_row = u0r;
        a.u0_col = u0c;
        a.values = load_tensor<T>(is);
        out.push_back(std::move(a));
    }
    return out;
}

// Grayscale min-max scaled dump of a 2-D array (binary PGM, P5).
template <class T>
void write_pgm(const std::string& path, const Tensor<T>& values) {
    if (values.rank() != 2) throw config_error("write_pgm: rank-2 required");
    const std::size_t R = values.dim(0), K = values.dim(1);
    T lo = values.flat(0), hi = values.flat(0);
    for (std::size_t i = 0; i < values.size(); ++i) {
        lo = std::min(lo, values.flat(i));
        hi = std::max(hi, values.flat(i));
    }
    const double span = std::max(double(hi) - double(lo), 1e-12);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw data_error("cannot open for write: " + path);
    os << "P5\n" << K << " " << R << "\n255\n";
    for (std::size_t i = 0; i < values.size(); ++i) {
        const double t = (double(values.flat(i)) - double(lo)) / span;
        unsigned char px =
            static_cast<unsigned char>(std::lround(t * 255.0));
        os.write(reinterpret_cast<const char*>(&px), 1);
    }
    if (!os) throw data_error("write failed: " + path);
}

}  // namespace hcnn
