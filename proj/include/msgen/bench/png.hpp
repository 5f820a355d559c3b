#pragma once

// Minimal RGB PNG writer (zlib deflate) and prediction overlays.

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <zlib.h>

#include "msgen/error.hpp"
#include "msgen/slicer.hpp"

namespace msgen::bench {

using Rgb = std::array<std::uint8_t, 3>;

inline constexpr Rgb overlay_tp{255, 165, 0};
inline constexpr Rgb overlay_fp{255, 0, 0};
inline constexpr Rgb overlay_fn{0, 0, 255};

struct RgbImage {
    std::size_t rows = 0, cols = 0;
    std::vector<std::uint8_t> data;  // row-major RGB

    RgbImage() = default;
    RgbImage(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c * 3, 0) {}

    [[nodiscard]] Rgb at(std::size_t r, std::size_t c) const
    {
        const auto* p = &data[(r * cols + c) * 3];
        return {p[0], p[1], p[2]};
    }
    void set(std::size_t r, std::size_t c, Rgb v)
    {
        auto* p = &data[(r * cols + c) * 3];
        p[0] = v[0];
        p[1] = v[1];
        p[2] = v[2];
    }
};

namespace detail {

inline void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v)
{
    for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

inline void put_chunk(std::vector<std::uint8_t>& out, const char* type, const std::vector<std::uint8_t>& body)
{
    put_be32(out, static_cast<std::uint32_t>(body.size()));
    const std::size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), body.begin(), body.end());
    const auto crc = ::crc32(0L, out.data() + start, static_cast<uInt>(out.size() - start));
    put_be32(out, static_cast<std::uint32_t>(crc));
}

} // namespace detail

inline std::vector<std::uint8_t> encode_png(const RgbImage& img)
{
    if (img.rows == 0 || img.cols == 0 || img.data.size() != img.rows * img.cols * 3)
        throw ValidationError("png: bad image shape");
    std::vector<std::uint8_t> raw;
    raw.reserve(img.rows * (img.cols * 3 + 1));
    for (std::size_t r = 0; r < img.rows; ++r) {
        raw.push_back(0);  // filter: none
        const auto* row = &img.data[r * img.cols * 3];
        raw.insert(raw.end(), row, row + img.cols * 3);
    }
    uLongf packed_size = compressBound(static_cast<uLong>(raw.size()));
    std::vector<std::uint8_t> packed(packed_size);
    if (compress2(packed.data(), &packed_size, raw.data(), static_cast<uLong>(raw.size()), 9) != Z_OK)
        throw DataError("png: deflate failed");
    packed.resize(packed_size);

    std::vector<std::uint8_t> out = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    std::vector<std::uint8_t> ihdr;
    detail::put_be32(ihdr, static_cast<std::uint32_t>(img.cols));
    detail::put_be32(ihdr, static_cast<std::uint32_t>(img.rows));
    ihdr.insert(ihdr.end(), {8, 2, 0, 0, 0});  // 8-bit RGB, no interlace
    detail::put_chunk(out, "IHDR", ihdr);
    detail::put_chunk(out, "IDAT", packed);
    detail::put_chunk(out, "IEND", {});
    return out;
}

inline void write_png(const RgbImage& img, const std::filesystem::path& path)
{
    const auto bytes = encode_png(img);
    std::ofstream out(path, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("cannot write " + path.string());
}

/// Grayscale image (min..max stretched to 0..255) with TP orange, FP red
/// and FN blue.
inline RgbImage overlay_image(const Image2D& image, const Mask2D& pred, const Mask2D& truth)
{
    if (image.rows != pred.rows || image.cols != pred.cols || image.rows != truth.rows || image.cols != truth.cols)
        throw ValidationError("overlay: image, prediction and truth shapes differ");
    RgbImage out(image.rows, image.cols);
    float lo = 0, hi = 0;
    if (!image.data.empty()) {
        const auto [a, b] = std::minmax_element(image.data.begin(), image.data.end());
        lo = *a;
        hi = *b;
    }
    const float scale = hi > lo ? 255.0f / (hi - lo) : 0.0f;
    for (std::size_t r = 0; r < image.rows; ++r)
        for (std::size_t c = 0; c < image.cols; ++c) {
            const bool p = pred(r, c) != 0, t = truth(r, c) != 0;
            if (p && t)
                out.set(r, c, overlay_tp);
            else if (p)
                out.set(r, c, overlay_fp);
            else if (t)
                out.set(r, c, overlay_fn);
            else {
                const auto g = static_cast<std::uint8_t>(std::clamp((image(r, c) - lo) * scale + 0.5f, 0.0f, 255.0f));
                out.set(r, c, {g, g, g});
            }
        }
    return out;
}

inline void render_overlay(const Image2D& image, const Mask2D& pred, const Mask2D& truth,
                           const std::filesystem::path& path)
{
    write_png(overlay_image(image, pred, truth), path);
}

/// Decodes PNGs produced by encode_png (8-bit RGB, filter 0 only).
inline RgbImage decode_png(const std::vector<std::uint8_t>& bytes)
{
    static constexpr std::array<std::uint8_t, 8> sig = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    if (bytes.size() < 8 || !std::equal(sig.begin(), sig.end(), bytes.begin())) throw DataError("png: bad signature");
    auto be32 = [&](std::size_t at) {
        if (at + 4 > bytes.size()) throw DataError("png: truncated");
        return (std::uint32_t(bytes[at]) << 24) | (std::uint32_t(bytes[at + 1]) << 16)
               | (std::uint32_t(bytes[at + 2]) << 8) | std::uint32_t(bytes[at + 3]);
    };
    std::size_t pos = 8, rows = 0, cols = 0;
    std::vector<std::uint8_t> packed;
    while (pos + 12 <= bytes.size()) {
        const auto len = be32(pos);
        const std::string type(bytes.begin() + long(pos) + 4, bytes.begin() + long(pos) + 8);
        if (pos + 12 + len > bytes.size()) throw DataError("png: truncated chunk");
        const auto crc = ::crc32(0L, bytes.data() + pos + 4, static_cast<uInt>(len + 4));
        if (be32(pos + 8 + len) != static_cast<std::uint32_t>(crc)) throw DataError("png: crc mismatch in " + type);
        const auto* body = bytes.data() + pos + 8;
        if (type == "IHDR") {
            cols = be32(pos + 8);
            rows = be32(pos + 12);
            if (body[8] != 8 || body[9] != 2) throw DataError("png: only 8-bit RGB supported");
        } else if (type == "IDAT") {
            packed.insert(packed.end(), body, body + len);
        } else if (type == "IEND") {
            break;
        }
        pos += 12 + len;
    }
    std::vector<std::uint8_t> raw(rows * (cols * 3 + 1));
    uLongf raw_size = static_cast<uLongf>(raw.size());
    if (uncompress(raw.data(), &raw_size, packed.data(), static_cast<uLong>(packed.size())) != Z_OK
        || raw_size != raw.size())
        throw DataError("png: inflate failed");
    RgbImage img(rows, cols);
    for (std::size_t r = 0; r < rows; ++r) {
        if (raw[r * (cols * 3 + 1)] != 0) throw DataError("png: unsupported filter");
        std::copy_n(&raw[r * (cols * 3 + 1) + 1], cols * 3, &img.data[r * cols * 3]);
    }
    return img;
}

} // namespace msgen::bench
