#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "msgen/error.hpp"
#include "msgen/volume.hpp"

namespace msgen {

inline constexpr std::size_t default_slice_side = 224;

/// Row-major 2D grid; rows follow the volume's y axis, columns its x axis.
template <typename T>
struct Grid2D {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<T> data;

    Grid2D() = default;
    Grid2D(std::size_t r, std::size_t c, T fill = T{}) : rows(r), cols(c), data(r * c, fill) {}

    T& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    const T& operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
    [[nodiscard]] std::size_t size() const { return data.size(); }
    bool operator==(const Grid2D&) const = default;
};

using Image2D = Grid2D<float>;
using Mask2D = Grid2D<std::uint8_t>;

struct SliceProvenance {
    std::string dataset_id;
    std::string patient_id;
    std::string scan_id;
    std::size_t z_index = 0;
};

struct SliceSample {
    Image2D image;
    Mask2D mask;
    SliceProvenance provenance;
    std::size_t lesion_pixels = 0;
};

namespace detail {

// Source coordinate of output index i with pixel centers at (i + 0.5) * in / out - 0.5.
inline double source_coordinate(std::size_t i, std::size_t in, std::size_t out)
{
    return (static_cast<double>(i) + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
}

} // namespace detail

inline Image2D resize_bilinear(const Image2D& img, std::size_t rows = default_slice_side,
                               std::size_t cols = default_slice_side)
{
    if (img.rows == 0 || img.cols == 0)
        throw ValidationError("resize_bilinear: empty image");
    if (img.rows == rows && img.cols == cols)
        return img;

    struct Tap {
        std::size_t lo, hi;
        double w;
    };
    auto taps = [](std::size_t in, std::size_t out) {
        std::vector<Tap> t(out);
        for (std::size_t i = 0; i < out; ++i) {
            const double s = std::clamp(detail::source_coordinate(i, in, out), 0.0, static_cast<double>(in - 1));
            const auto lo = static_cast<std::size_t>(std::floor(s));
            t[i] = {lo, std::min(lo + 1, in - 1), s - static_cast<double>(lo)};
        }
        return t;
    };
    const auto ty = taps(img.rows, rows);
    const auto tx = taps(img.cols, cols);

    Image2D out(rows, cols);
    for (std::size_t r = 0; r < rows; ++r) {
        const auto& y = ty[r];
        for (std::size_t c = 0; c < cols; ++c) {
            const auto& x = tx[c];
            const double top = (1 - x.w) * img(y.lo, x.lo) + x.w * img(y.lo, x.hi);
            const double bottom = (1 - x.w) * img(y.hi, x.lo) + x.w * img(y.hi, x.hi);
            out(r, c) = static_cast<float>((1 - y.w) * top + y.w * bottom);
        }
    }
    return out;
}

inline Mask2D resize_nearest(const Mask2D& mask, std::size_t rows = default_slice_side,
                             std::size_t cols = default_slice_side)
{
    if (mask.rows == 0 || mask.cols == 0)
        throw ValidationError("resize_nearest: empty mask");
    if (mask.rows == rows && mask.cols == cols)
        return mask;
    auto nearest = [](std::size_t i, std::size_t in, std::size_t out) {
        const auto s = static_cast<std::size_t>(std::floor(detail::source_coordinate(i, in, out) + 0.5));
        return std::min(s, in - 1);
    };
    Mask2D out(rows, cols);
    for (std::size_t r = 0; r < rows; ++r) {
        const auto sr = nearest(r, mask.rows, rows);
        for (std::size_t c = 0; c < cols; ++c) out(r, c) = mask(sr, nearest(c, mask.cols, cols)) ? 1 : 0;
    }
    return out;
}

/// Constant-z planes containing at least min_brain_voxels nonzero image
/// voxels, resized to side x side.
inline std::vector<SliceSample> extract_slices(const Volume& v, const LabelVolume& m,
                                               std::size_t min_brain_voxels = 1,
                                               std::size_t side = default_slice_side)
{
    validate_pair(v, m);
    const auto [nx, ny, nz] = v.dims;
    std::vector<SliceSample> out;
    for (std::size_t z = 0; z < nz; ++z) {
        Image2D img(ny, nx);
        Mask2D mask(ny, nx);
        std::size_t brain = 0;
        for (std::size_t y = 0; y < ny; ++y)
            for (std::size_t x = 0; x < nx; ++x) {
                const float value = v.at(x, y, z);
                img(y, x) = value;
                mask(y, x) = m.at(x, y, z);
                brain += (value != 0.0f);
            }
        if (brain < std::max<std::size_t>(min_brain_voxels, 1))
            continue;
        SliceSample s;
        s.image = resize_bilinear(img, side, side);
        s.mask = resize_nearest(mask, side, side);
        s.provenance = {v.provenance.dataset_id, v.provenance.patient_id, v.provenance.scan_id, z};
        s.lesion_pixels = static_cast<std::size_t>(std::count(s.mask.data.begin(), s.mask.data.end(), 1));
        out.push_back(std::move(s));
    }
    return out;
}

// Slice cache, one file per scan, little-endian:
//   "MSSC" u32 version=1 u32 count u32 side
//   3 x (u32 length, bytes) for dataset_id, patient_id, scan_id
//   count x (u32 z_index, side*side float32 image, ceil(side*side/8) mask bits LSB-first)
namespace detail {

template <typename T>
void put_le(std::ostream& os, T v)
{
    if constexpr (std::endian::native == std::endian::big) {
        auto* b = reinterpret_cast<unsigned char*>(&v);
        std::reverse(b, b + sizeof(T));
    }
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get_le(std::istream& is)
{
    T v;
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is)
        throw DataError("truncated slice cache");
    if constexpr (std::endian::native == std::endian::big) {
        auto* b = reinterpret_cast<unsigned char*>(&v);
        std::reverse(b, b + sizeof(T));
    }
    return v;
}

} // namespace detail

inline void write_slice_cache(const std::filesystem::path& path, const std::vector<SliceSample>& slices)
{
    std::ofstream os(path, std::ios::binary);
    if (!os)
        throw DataError("cannot write slice cache " + path.string());
    const std::size_t side = slices.empty() ? 0 : slices.front().image.rows;
    os.write("MSSC", 4);
    detail::put_le<std::uint32_t>(os, 1);
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(slices.size()));
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(side));
    const SliceProvenance p = slices.empty() ? SliceProvenance{} : slices.front().provenance;
    for (const std::string* s : {&p.dataset_id, &p.patient_id, &p.scan_id}) {
        detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(s->size()));
        os.write(s->data(), static_cast<std::streamsize>(s->size()));
    }
    for (const auto& s : slices) {
        if (s.image.rows != side || s.image.cols != side || s.mask.rows != side || s.mask.cols != side)
            throw ValidationError("slice cache requires uniformly sized square slices");
        detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(s.provenance.z_index));
        for (float f : s.image.data) detail::put_le<float>(os, f);
        std::vector<unsigned char> bits((side * side + 7) / 8, 0);
        for (std::size_t i = 0; i < s.mask.data.size(); ++i)
            if (s.mask.data[i]) bits[i / 8] |= static_cast<unsigned char>(1u << (i % 8));
        os.write(reinterpret_cast<const char*>(bits.data()), static_cast<std::streamsize>(bits.size()));
    }
    if (!os)
        throw DataError("write failed for slice cache " + path.string());
}

inline std::vector<SliceSample> read_slice_cache(const std::filesystem::path& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is)
        throw DataError("cannot open slice cache " + path.string());
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "MSSC", 4) != 0)
        throw DataError("not a slice cache: " + path.string());
    if (detail::get_le<std::uint32_t>(is) != 1)
        throw DataError("unsupported slice cache version: " + path.string());
    const auto count = detail::get_le<std::uint32_t>(is);
    const auto side = detail::get_le<std::uint32_t>(is);
    SliceProvenance p;
    for (std::string* s : {&p.dataset_id, &p.patient_id, &p.scan_id}) {
        s->resize(detail::get_le<std::uint32_t>(is));
        is.read(s->data(), static_cast<std::streamsize>(s->size()));
    }
    std::vector<SliceSample> out(count);
    for (auto& s : out) {
        s.provenance = p;
        s.provenance.z_index = detail::get_le<std::uint32_t>(is);
        s.image = Image2D(side, side);
        for (auto& f : s.image.data) f = detail::get_le<float>(is);
        std::vector<unsigned char> bits((std::size_t{side} * side + 7) / 8);
        is.read(reinterpret_cast<char*>(bits.data()), static_cast<std::streamsize>(bits.size()));
        if (!is)
            throw DataError("truncated slice cache " + path.string());
        s.mask = Mask2D(side, side);
        for (std::size_t i = 0; i < s.mask.data.size(); ++i) s.mask.data[i] = (bits[i / 8] >> (i % 8)) & 1u;
        s.lesion_pixels = static_cast<std::size_t>(std::count(s.mask.data.begin(), s.mask.data.end(), 1));
    }
    return out;
}

} // namespace msgen
