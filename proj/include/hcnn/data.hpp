#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "hcnn/errors.hpp"
#include "hcnn/tensor.hpp"

namespace hcnn {

// Images are (count, N, N, 3) reals, channels interleaved on the trailing
// axis; labels are class ids in [0, C).
template <class T>
struct LabeledImageSet {
    Tensor<T> images;
    std::vector<int> labels;
    std::string split;

    std::size_t count() const { return labels.size(); }
};

namespace detail {

inline std::vector<unsigned char> read_all(const std::string& path) {
    std::ifstream is(path, std::ios::binary | std::ios::ate);
    if (!is) throw data_error("cannot open: " + path);
    std::streamsize n = is.tellg();
    is.seekg(0);
    std::vector<unsigned char> buf(static_cast<std::size_t>(n));
    is.read(reinterpret_cast<char*>(buf.data()), n);
    if (!is) throw data_error("short read: " + path);
    return buf;
}

// One CIFAR file: fixed-size records, label byte(s) then 3072 channel-planar
// pixel bytes (1024 red, 1024 green, 1024 blue, each row-major 32x32).
template <class T>
void append_cifar_file(LabeledImageSet<T>& out, const std::string& path,
                       std::size_t record_len, std::size_t label_offset,
                       std::size_t expected_records, int num_classes,
                       std::size_t& cursor) {
    auto buf = read_all(path);
    if (buf.size() != record_len * expected_records)
        throw data_error(path + ": expected " +
                         std::to_string(record_len * expected_records) +
                         " bytes, got " + std::to_string(buf.size()));
    const std::size_t plane = 32 * 32;
    for (std::size_t r = 0; r < expected_records; ++r) {
        const unsigned char* rec = buf.data() + r * record_len;
        int label = rec[label_offset];
        if (label < 0 || label >= num_classes)
            throw data_error(path + ": label out of range at record " +
                             std::to_string(r));
        out.labels[cursor] = label;
        const unsigned char* px = rec + label_offset + 1;
        T* dst = out.images.data() + cursor * plane * 3;
        for (std::size_t u = 0; u < plane; ++u)
            for (std::size_t c = 0; c < 3; ++c)
                dst[u * 3 + c] = static_cast<T>(px[c * plane + u]) / T(255);
        ++cursor;
    }
}

}  // namespace detail

template <class T>
struct DatasetPair {
    LabeledImageSet<T> train;
    LabeledImageSet<T> test;
};

template <class T = float>
DatasetPair<T> load_cifar10(const std::string& dir) {
    DatasetPair<T> out;
    out.train.images = Tensor<T>({50000, 32, 32, 3});
    out.train.labels.resize(50000);
    out.train.split = "train";
    std::size_t cursor = 0;
    for (int i = 1; i <= 5; ++i)
        detail::append_cifar_file(out.train,
                                  dir + "/data_batch_" + std::to_string(i) +
                                      ".bin",
                                  3073, 0, 10000, 10, cursor);
    out.test.images = Tensor<T>({10000, 32, 32, 3});
    out.test.labels.resize(10000);
    out.test.split = "test";
    cursor = 0;
    detail::append_cifar_file(out.test, dir + "/test_batch.bin", 3073, 0,
                              10000, 10, cursor);
    return out;
}

// CIFAR-100 records carry a coarse then a fine label; fine labels are used.
template <class T = float>
DatasetPair<T> load_cifar100(const std::string& dir) {
    DatasetPair<T> out;
    out.train.images = Tensor<T>({50000, 32, 32, 3});
    out.train.labels.resize(50000);
    out.train.split = "train";
    std::size_t cursor = 0;
    detail::append_cifar_file(out.train, dir + "/train.bin", 3074, 1, 50000,
                              100, cursor);
    out.test.images = Tensor<T>({10000, 32, 32, 3});
    out.test.labels.resize(10000);
    out.test.split = "test";
    cursor = 0;
    detail::append_cifar_file(out.test, dir + "/test.bin", 3074, 1, 10000,
                              100, cursor);
    return out;
}

// Per-channel standardization with training-split statistics applied to both
// splits. Returns (mean, std) as length-3 tensors; std is floored at 1e-8.
template <class T>
std::pair<Tensor<T>, Tensor<T>> standardize(LabeledImageSet<T>& train,
                                            LabeledImageSet<T>* test = nullptr) {
    Tensor<T> mean({3}), stdev({3});
    const std::size_t n = train.images.size() / 3;
    if (n == 0) throw data_error("standardize: empty training split");
    double acc[3] = {0, 0, 0};
    const T* p = train.images.data();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < 3; ++c) acc[c] += p[i * 3 + c];
    for (std::size_t c = 0; c < 3; ++c)
        mean.flat(c) = static_cast<T>(acc[c] / double(n));
    double var[3] = {0, 0, 0};
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < 3; ++c) {
            double d = double(p[i * 3 + c]) - double(mean.flat(c));
            var[c] += d * d;
        }
    for (std::size_t c = 0; c < 3; ++c)
        stdev.flat(c) =
            static_cast<T>(std::max(std::sqrt(var[c] / double(n)), 1e-8));
    auto apply = [&](LabeledImageSet<T>& s) {
        T* q = s.images.data();
        const std::size_t m = s.images.size() / 3;
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t c = 0; c < 3; ++c)
                q[i * 3 + c] = (q[i * 3 + c] - mean.flat(c)) / stdev.flat(c);
    };
    apply(train);
    if (test) apply(*test);
    return {mean, stdev};
}

// Applies stored standardization statistics (e.g., from a checkpoint).
template <class T>
void apply_standardization(LabeledImageSet<T>& s, const Tensor<T>& mean,
                           const Tensor<T>& stdev) {
    T* q = s.images.data();
    const std::size_t m = s.images.size() / 3;
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t c = 0; c < 3; ++c)
            q[i * 3 + c] = (q[i * 3 + c] - mean.flat(c)) / stdev.flat(c);
}

// Synthetic classes that are linearly separable in pixel space: each class
// is a fixed oriented grating plus small noise. "easy" keeps the noise at
// 0.05; "noisy" raises it to 0.3.
template <class T = float>
LabeledImageSet<T> synth_dataset(const std::string& kind, std::size_t count,
                                 std::uint64_t seed, int spatial = 8,
                                 int classes = 4) {
    T noise_amp;
    if (kind == "easy") noise_amp = T(0.05);
    else if (kind == "noisy") noise_amp = T(0.3);
    else throw config_error("synth_dataset: unknown kind: " + kind);
    const std::size_t N = static_cast<std::size_t>(spatial);
    LabeledImageSet<T> out;
    out.images = Tensor<T>({count, N, N, 3});
    out.labels.resize(count);
    out.split = "synth";
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    const double pi = 3.14159265358979323846;
    for (std::size_t i = 0; i < count; ++i) {
        int label = static_cast<int>(i % static_cast<std::size_t>(classes));
        out.labels[i] = label;
        // direction and frequency are distinct per class
        double theta = pi * double(label) / double(classes);
        double freq = 1.0 + double(label % 3);
        for (std::size_t u1 = 0; u1 < N; ++u1)
            for (std::size_t u2 = 0; u2 < N; ++u2) {
                double phase = 2.0 * pi * freq *
                               (std::cos(theta) * double(u1) +
                                std::sin(theta) * double(u2)) /
                               double(N);
                for (std::size_t c = 0; c < 3; ++c)
                    out.images(i, u1, u2, c) =
                        static_cast<T>(std::sin(phase + double(c))) +
                        noise_amp * static_cast<T>(unit(rng));
            }
    }
    return out;
}

// First n records in file order; n == 0 keeps everything.
template <class T>
LabeledImageSet<T> take_front(const LabeledImageSet<T>& s, std::size_t n) {
    if (n == 0 || n >= s.count()) return s;
    LabeledImageSet<T> out;
    const std::size_t stride = s.images.dim(1) * s.images.dim(2) * 3;
    out.images = Tensor<T>({n, s.images.dim(1), s.images.dim(2), 3});
    std::memcpy(out.images.data(), s.images.data(), n * stride * sizeof(T));
    out.labels.assign(s.labels.begin(),
                      s.labels.begin() + static_cast<long>(n));
    out.split = s.split;
    return out;
}

template <class T>
std::pair<Tensor<T>, std::vector<int>> gather_batch(
        const LabeledImageSet<T>& set, const std::vector<std::size_t>& idx) {
    const std::size_t N1 = set.images.dim(1), N2 = set.images.dim(2);
    Tensor<T> batch({idx.size(), N1, N2, 3});
    std::vector<int> labels(idx.size());
    const std::size_t stride = N1 * N2 * 3;
    for (std::size_t b = 0; b < idx.size(); ++b) {
        if (idx[b] >= set.count())
            throw data_error("gather_batch: index out of range");
        std::memcpy(batch.data() + b * stride,
                    set.images.data() + idx[b] * stride, stride * sizeof(T));
        labels[b] = set.labels[idx[b]];
    }
    return {batch, labels};
}

// In-place training augmentation: per sample, a uniform spatial translation
// in [-max_shift, max_shift]^2 with zero fill, then a horizontal flip with
// probability 1/2. Draw order per sample: dx, dy, flip.
template <class T>
void augment_batch(Tensor<T>& batch, std::mt19937_64& rng,
                   int max_shift = 6) {
    const std::size_t B = batch.dim(0), N1 = batch.dim(1), N2 = batch.dim(2),
                      C = batch.dim(3);
    std::uniform_int_distribution<int> shift(-max_shift, max_shift);
    std::uniform_int_distribution<int> coin(0, 1);
    std::vector<T> tmp(N1 * N2 * C);
    for (std::size_t b = 0; b < B; ++b) {
        const int dx = shift(rng), dy = shift(rng);
        const bool flip = coin(rng) == 1;
        T* img = batch.data() + b * tmp.size();
        std::fill(tmp.begin(), tmp.end(), T(0));
        for (std::size_t u1 = 0; u1 < N1; ++u1) {
            const long s1 = static_cast<long>(u1) - dx;
            if (s1 < 0 || s1 >= static_cast<long>(N1)) continue;
            for (std::size_t u2 = 0; u2 < N2; ++u2) {
                const long s2 = static_cast<long>(u2) - dy;
                if (s2 < 0 || s2 >= static_cast<long>(N2)) continue;
                const std::size_t src =
                    (static_cast<std::size_t>(s1) * N2 +
                     static_cast<std::size_t>(s2)) * C;
                const std::size_t col = flip ? N2 - 1 - u2 : u2;
                std::memcpy(tmp.data() + (u1 * N2 + col) * C, img + src,
                            C * sizeof(T));
            }
        }
        std::memcpy(img, tmp.data(), tmp.size() * sizeof(T));
    }
}

}  // namespace hcnn
