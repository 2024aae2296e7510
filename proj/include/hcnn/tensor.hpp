#pragma once

#include <algorithm>
#include <array>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "hcnn/errors.hpp"

namespace hcnn {

enum class BoundaryMode { ZeroPad, Periodic };

// Dense row-major tensor. Rank and shape are dynamic; the scalar type is
// the template parameter (float for training, double for oracles).
template <class T>
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> shape, T fill = T{})
        : shape_(std::move(shape)),
          data_(count(shape_), fill) {}

    static std::size_t count(const std::vector<std::size_t>& shape) {
        std::size_t n = 1;
        for (std::size_t d : shape) n *= d;
        return n;
    }

    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    std::size_t dim(std::size_t axis) const {
        assert(axis < shape_.size());
        return shape_[axis];
    }
    const std::vector<std::size_t>& shape() const { return shape_; }
    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::vector<T>& vec() { return data_; }
    const std::vector<T>& vec() const { return data_; }

    T& flat(std::size_t i) { assert(i < data_.size()); return data_[i]; }
    T flat(std::size_t i) const { assert(i < data_.size()); return data_[i]; }

    template <class... Ix>
    T& operator()(Ix... ix) { return data_[offset(ix...)]; }
    template <class... Ix>
    T operator()(Ix... ix) const { return data_[offset(ix...)]; }

    // Row-major offset; bounds enforced per axis in debug builds.
    template <class... Ix>
    std::size_t offset(Ix... ix) const {
        assert(sizeof...(Ix) == shape_.size());
        std::array<std::size_t, sizeof...(Ix)> idx{
            static_cast<std::size_t>(ix)...};
        std::size_t off = 0;
        for (std::size_t d = 0; d < idx.size(); ++d) {
            assert(idx[d] < shape_[d]);
            off = off * shape_[d] + idx[d];
        }
        return off;
    }

    std::size_t stride(std::size_t axis) const {
        assert(axis < shape_.size());
        std::size_t s = 1;
        for (std::size_t d = shape_.size() - 1; d > axis; --d) s *= shape_[d];
        return s;
    }

    // Same element count, new shape.
    Tensor reshaped(std::vector<std::size_t> shape) const {
        if (count(shape) != data_.size())
            throw config_error("reshape changes element count");
        Tensor out;
        out.shape_ = std::move(shape);
        out.data_ = data_;
        return out;
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    Tensor& add(const Tensor& other) {
        assert(shape_ == other.shape_);
        for (std::size_t i = 0; i < data_.size(); ++i)
            data_[i] += other.data_[i];
        return *this;
    }
    Tensor& scale(T a) {
        for (T& v : data_) v *= a;
        return *this;
    }
    Tensor& axpy(T a, const Tensor& other) {
        assert(shape_ == other.shape_);
        for (std::size_t i = 0; i < data_.size(); ++i)
            data_[i] += a * other.data_[i];
        return *this;
    }

    bool all_finite() const {
        for (T v : data_)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

  private:
    std::vector<std::size_t> shape_;
    std::vector<T> data_;
};

// out[i] = in[i - shift] along `axis`; vacated positions are zero-filled or
// wrapped. This is the group action the invariance tests quantify over.
template <class T>
Tensor<T> translate(const Tensor<T>& z, std::size_t axis, long long shift,
                    BoundaryMode mode) {
    if (axis >= z.rank()) throw config_error("translate: bad axis");
    const std::size_t len = z.dim(axis);
    Tensor<T> out(z.shape());
    if (len == 0 || z.size() == 0) return out;

    // Walk (outer, axis, inner) with inner contiguous.
    const std::size_t inner = z.stride(axis);
    const std::size_t outer = z.size() / (len * inner);
    const T* src = z.data();
    T* dst = out.data();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < len; ++i) {
            long long s = static_cast<long long>(i) - shift;
            const long long L = static_cast<long long>(len);
            if (s < 0 || s >= L) {
                if (mode == BoundaryMode::ZeroPad) continue;  // stays zero
                s %= L;
                if (s < 0) s += L;
            }
            std::memcpy(dst + (o * len + i) * inner,
                        src + (o * len + static_cast<std::size_t>(s)) * inner,
                        inner * sizeof(T));
        }
    }
    return out;
}

// Reduces one axis by summation; the axis is removed from the shape.
template <class T>
Tensor<T> sum_axis(const Tensor<T>& z, std::size_t axis) {
    if (axis >= z.rank()) throw config_error("sum_axis: bad axis");
    std::vector<std::size_t> oshape;
    for (std::size_t d = 0; d < z.rank(); ++d)
        if (d != axis) oshape.push_back(z.dim(d));
    Tensor<T> out(oshape);
    const std::size_t len = z.dim(axis);
    const std::size_t inner = z.stride(axis);
    const std::size_t outer = z.size() / (len * inner);
    const T* src = z.data();
    T* dst = out.data();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < len; ++i) {
            const T* s = src + (o * len + i) * inner;
            T* d = dst + o * inner;
            for (std::size_t k = 0; k < inner; ++k) d[k] += s[k];
        }
    return out;
}

// --- serialization -------------------------------------------------------
// Little-endian binary: "HTNS", u32 version, u32 rank, rank x u64 shape,
// u8 dtype (0=f32, 1=f64), raw row-major payload.

namespace detail {
inline void put_bytes(std::ostream& os, const void* p, std::size_t n) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}
inline void get_bytes(std::istream& is, void* p, std::size_t n) {
    is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (!is) throw data_error("tensor stream truncated");
}
template <class T> constexpr std::uint8_t dtype_tag();
template <> constexpr std::uint8_t dtype_tag<float>() { return 0; }
template <> constexpr std::uint8_t dtype_tag<double>() { return 1; }
}  // namespace detail

constexpr std::uint32_t kTensorFormatVersion = 1;

template <class T>
void save_tensor(std::ostream& os, const Tensor<T>& t) {
    detail::put_bytes(os, "HTNS", 4);
    std::uint32_t ver = kTensorFormatVersion;
    std::uint32_t rank = static_cast<std::uint32_t>(t.rank());
    detail::put_bytes(os, &ver, 4);
    detail::put_bytes(os, &rank, 4);
    for (std::size_t d = 0; d < t.rank(); ++d) {
        std::uint64_t e = t.dim(d);
        detail::put_bytes(os, &e, 8);
    }
    std::uint8_t tag = detail::dtype_tag<T>();
    detail::put_bytes(os, &tag, 1);
    detail::put_bytes(os, t.data(), t.size() * sizeof(T));
}

template <class T>
Tensor<T> load_tensor(std::istream& is) {
    char magic[4];
    detail::get_bytes(is, magic, 4);
    if (std::memcmp(magic, "HTNS", 4) != 0)
        throw data_error("bad tensor magic");
    std::uint32_t ver = 0, rank = 0;
    detail::get_bytes(is, &ver, 4);
    detail::get_bytes(is, &rank, 4);
    if (ver != kTensorFormatVersion)
        throw data_error("unsupported tensor version");
    if (rank > 64) throw data_error("implausible tensor rank");
    std::vector<std::size_t> shape(rank);
    for (auto& d : shape) {
        std::uint64_t e = 0;
        detail::get_bytes(is, &e, 8);
        d = static_cast<std::size_t>(e);
    }
    std::uint8_t tag = 0;
    detail::get_bytes(is, &tag, 1);
    if (tag != detail::dtype_tag<T>())
        throw data_error("tensor dtype mismatch");
    Tensor<T> t(shape);
    detail::get_bytes(is, t.data(), t.size() * sizeof(T));
    return t;
}

template <class T>
void save_tensor_file(const std::string& path, const Tensor<T>& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw data_error("cannot open for write: " + path);
    save_tensor(os, t);
    if (!os) throw data_error("write failed: " + path);
}

template <class T>
Tensor<T> load_tensor_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw data_error("cannot open: " + path);
    return load_tensor<T>(is);
}

}  // namespace hcnn
