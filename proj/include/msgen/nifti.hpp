#pragma once

// NIfTI-1 single-file (.nii / .nii.gz) and portable raw (.json + payload)
// readers and writers.

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "msgen/error.hpp"
#include "msgen/volume.hpp"

namespace msgen {

enum class DataType : std::int16_t { uint8 = 2, int16 = 4, float32 = 16 };

inline const char* dtype_name(DataType t)
{
    switch (t) {
        case DataType::uint8: return "uint8";
        case DataType::int16: return "int16";
        case DataType::float32: return "float32";
    }
    return "?";
}

namespace detail {

constexpr std::size_t nifti_header_size = 348;
constexpr std::size_t nifti_vox_offset = 352;

inline bool ends_with(const std::string& s, const std::string& suffix)
{
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

inline bool is_raw_path(const std::filesystem::path& p) { return p.extension() == ".json"; }

template <typename T>
T byteswap_value(T v)
{
    auto* b = reinterpret_cast<unsigned char*>(&v);
    std::reverse(b, b + sizeof(T));
    return v;
}

/// Little-endian field access on a byte buffer, optionally byte-swapped.
class ByteReader {
  public:
    ByteReader(const std::vector<unsigned char>& buf, bool swap) : buf_(buf), swap_(swap) {}

    template <typename T>
    T get(std::size_t offset) const
    {
        if (offset + sizeof(T) > buf_.size())
            throw DataError("truncated NIfTI header");
        T v;
        std::memcpy(&v, buf_.data() + offset, sizeof(T));
        if constexpr (std::endian::native == std::endian::big) v = byteswap_value(v);
        return swap_ ? byteswap_value(v) : v;
    }

  private:
    const std::vector<unsigned char>& buf_;
    bool swap_;
};

class ByteWriter {
  public:
    explicit ByteWriter(std::size_t n) : buf_(n, 0) {}

    template <typename T>
    void put(std::size_t offset, T v)
    {
        if constexpr (std::endian::native == std::endian::big) v = byteswap_value(v);
        std::memcpy(buf_.data() + offset, &v, sizeof(T));
    }
    void put_bytes(std::size_t offset, const char* s, std::size_t n) { std::memcpy(buf_.data() + offset, s, n); }
    std::vector<unsigned char>& bytes() { return buf_; }

  private:
    std::vector<unsigned char> buf_;
};

/// Reads a whole file; gzip streams are decompressed transparently.
inline std::vector<unsigned char> read_file(const std::filesystem::path& path)
{
    if (!std::filesystem::exists(path))
        throw DataError("file not found: " + path.string());
    gzFile f = gzopen(path.string().c_str(), "rb");
    if (!f)
        throw DataError("cannot open " + path.string());
    std::vector<unsigned char> out;
    std::vector<unsigned char> chunk(1 << 16);
    for (;;) {
        const int n = gzread(f, chunk.data(), static_cast<unsigned>(chunk.size()));
        if (n < 0) {
            gzclose(f);
            throw DataError("read error in " + path.string());
        }
        if (n == 0)
            break;
        out.insert(out.end(), chunk.begin(), chunk.begin() + n);
    }
    gzclose(f);
    return out;
}

inline void write_file(const std::filesystem::path& path, const std::vector<unsigned char>& bytes)
{
    if (path.has_parent_path())
        std::filesystem::create_directories(path.parent_path());
    if (ends_with(path.string(), ".gz")) {
        gzFile f = gzopen(path.string().c_str(), "wb");
        if (!f)
            throw DataError("cannot write " + path.string());
        const int n = gzwrite(f, bytes.data(), static_cast<unsigned>(bytes.size()));
        if (gzclose(f) != Z_OK || n != static_cast<int>(bytes.size()))
            throw DataError("write failed for " + path.string());
        return;
    }
    std::ofstream os(path, std::ios::binary);
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os)
        throw DataError("write failed for " + path.string());
}

/// Image payload as read from disk, before conversion to Volume/LabelVolume.
struct RawImage {
    Dims dims{};
    Spacing spacing{1, 1, 1};
    DataType dtype = DataType::float32;
    std::vector<float> values;
    Orientation orientation;
};

inline std::size_t dtype_size(DataType t)
{
    switch (t) {
        case DataType::uint8: return 1;
        case DataType::int16: return 2;
        case DataType::float32: return 4;
    }
    return 0;
}

inline DataType parse_dtype_code(int code)
{
    switch (code) {
        case 2: return DataType::uint8;
        case 4: return DataType::int16;
        case 16: return DataType::float32;
        default: throw DataError("unsupported NIfTI datatype code " + std::to_string(code));
    }
}

inline DataType parse_dtype_name(const std::string& s)
{
    if (s == "uint8") return DataType::uint8;
    if (s == "int16") return DataType::int16;
    if (s == "float32") return DataType::float32;
    throw DataError("unsupported dtype '" + s + "'");
}

inline void decode_payload(const unsigned char* p, std::size_t n, DataType dtype, bool swap, double slope,
                           double inter, std::vector<float>& out)
{
    out.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        double raw = 0;
        switch (dtype) {
            case DataType::uint8: raw = p[i]; break;
            case DataType::int16: {
                std::int16_t v;
                std::memcpy(&v, p + 2 * i, 2);
                if ((std::endian::native == std::endian::big) != swap) v = byteswap_value(v);
                raw = v;
                break;
            }
            case DataType::float32: {
                float v;
                std::memcpy(&v, p + 4 * i, 4);
                if ((std::endian::native == std::endian::big) != swap) v = byteswap_value(v);
                raw = v;
                break;
            }
        }
        const double value = raw * slope + inter;
        if (!std::isfinite(value))
            throw DataError("non-finite voxel at index " + std::to_string(i));
        out[i] = static_cast<float>(value);
    }
}

/// Permutes axes so that the voxel axis closest to world superior becomes
/// the third stored axis. The other two keep their relative order.
inline void reorder_axes(RawImage& img, const double (&rot)[3][3])
{
    int zaxis = 0;
    for (int j = 1; j < 3; ++j)
        if (std::abs(rot[2][j]) > std::abs(rot[2][zaxis])) zaxis = j;
    std::array<int, 3> src{};
    int k = 0;
    for (int j = 0; j < 3; ++j)
        if (j != zaxis) src[k++] = j;
    src[2] = zaxis;
    img.orientation.unknown = false;
    img.orientation.source_axis = src;
    if (!img.orientation.permuted())
        return;

    const Dims in = img.dims;
    Dims out{in[src[0]], in[src[1]], in[src[2]]};
    std::vector<float> values(img.values.size());
    std::array<std::size_t, 3> stride{1, in[0], in[0] * in[1]};
    std::size_t o = 0;
    for (std::size_t z = 0; z < out[2]; ++z)
        for (std::size_t y = 0; y < out[1]; ++y)
            for (std::size_t x = 0; x < out[0]; ++x)
                values[o++] = img.values[x * stride[src[0]] + y * stride[src[1]] + z * stride[src[2]]];
    img.values = std::move(values);
    img.dims = out;
    img.spacing = {img.spacing[src[0]], img.spacing[src[1]], img.spacing[src[2]]};
}

inline RawImage read_nifti(const std::filesystem::path& path)
{
    const auto bytes = read_file(path);
    if (bytes.size() < nifti_header_size)
        throw DataError("unreadable NIfTI header (file too short): " + path.string());

    bool swap = false;
    {
        ByteReader probe(bytes, false);
        const auto ndim = probe.get<std::int16_t>(40);
        if (ndim < 1 || ndim > 7) {
            swap = true;
            const auto swapped = ByteReader(bytes, true).get<std::int16_t>(40);
            if (swapped < 1 || swapped > 7)
                throw DataError("unreadable NIfTI header (bad dim[0]): " + path.string());
        }
    }
    ByteReader h(bytes, swap);
    if (h.get<std::int32_t>(0) != 348)
        throw DataError("unreadable NIfTI header (sizeof_hdr != 348): " + path.string());
    if (std::memcmp(bytes.data() + 344, "n+1\0", 4) != 0)
        throw DataError("not a single-file NIfTI-1 image (magic): " + path.string());

    int ndim = h.get<std::int16_t>(40);
    std::array<std::int64_t, 7> dim{};
    for (int i = 0; i < 7; ++i) dim[i] = h.get<std::int16_t>(42 + 2 * i);
    while (ndim > 3 && dim[ndim - 1] == 1) --ndim;
    if (ndim != 3)
        throw DataError("expected a 3D image, got " + std::to_string(ndim) + " dimensions: " + path.string());
    for (int i = 0; i < 3; ++i)
        if (dim[i] < 1)
            throw DataError("non-positive dimension in " + path.string());

    RawImage img;
    img.dims = {static_cast<std::size_t>(dim[0]), static_cast<std::size_t>(dim[1]), static_cast<std::size_t>(dim[2])};
    img.dtype = parse_dtype_code(h.get<std::int16_t>(70));
    for (int i = 0; i < 3; ++i) {
        const double s = std::abs(h.get<float>(80 + 4 * i));
        img.spacing[i] = (s > 0 && std::isfinite(s)) ? s : 1.0;
    }
    double slope = h.get<float>(112);
    double inter = h.get<float>(116);
    if (slope == 0.0 || !std::isfinite(slope)) slope = 1.0;
    if (!std::isfinite(inter)) inter = 0.0;

    const auto offset = static_cast<std::size_t>(h.get<float>(108));
    const std::size_t n = voxel_count(img.dims);
    const std::size_t need = offset + n * dtype_size(img.dtype);
    if (offset < nifti_header_size || bytes.size() < need)
        throw DataError("truncated NIfTI payload: " + path.string());
    decode_payload(bytes.data() + offset, n, img.dtype, swap, slope, inter, img.values);

    const int qform = h.get<std::int16_t>(252);
    const int sform = h.get<std::int16_t>(254);
    double rot[3][3]{};
    if (sform > 0) {
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) rot[r][c] = h.get<float>(280 + 16 * r + 4 * c);
        reorder_axes(img, rot);
    } else if (qform > 0) {
        const double b = h.get<float>(256), c = h.get<float>(260), d = h.get<float>(264);
        const double a = std::sqrt(std::max(0.0, 1.0 - (b * b + c * c + d * d)));
        const double qfac = h.get<float>(76) < 0 ? -1.0 : 1.0;
        const double m[3][3] = {{a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)},
                                {2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)},
                                {2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b}};
        for (int r = 0; r < 3; ++r)
            for (int cc = 0; cc < 3; ++cc) rot[r][cc] = m[r][cc] * (cc == 2 ? qfac : 1.0);
        reorder_axes(img, rot);
    }
    return img;
}

inline void write_nifti(const std::filesystem::path& path, const Dims& dims, const Spacing& spacing, DataType dtype,
                        const std::vector<unsigned char>& payload)
{
    ByteWriter w(nifti_vox_offset);
    w.put<std::int32_t>(0, 348);
    w.put<std::int16_t>(40, 3);
    for (int i = 0; i < 3; ++i) w.put<std::int16_t>(42 + 2 * i, static_cast<std::int16_t>(dims[i]));
    for (int i = 3; i < 7; ++i) w.put<std::int16_t>(42 + 2 * i, 1);
    w.put<std::int16_t>(70, static_cast<std::int16_t>(dtype));
    w.put<std::int16_t>(72, static_cast<std::int16_t>(8 * dtype_size(dtype)));
    w.put<float>(76, 1.0f);
    for (int i = 0; i < 3; ++i) w.put<float>(80 + 4 * i, static_cast<float>(spacing[i]));
    w.put<float>(108, static_cast<float>(nifti_vox_offset));
    w.put<float>(112, 1.0f);
    w.put<float>(116, 0.0f);
    w.put<char>(123, 2); // mm
    // scanner-aligned axes: sform is a pure scaling
    w.put<std::int16_t>(254, 1);
    for (int r = 0; r < 3; ++r) w.put<float>(280 + 16 * r + 4 * r, static_cast<float>(spacing[r]));
    w.put_bytes(344, "n+1\0", 4);
    auto& out = w.bytes();
    out.insert(out.end(), payload.begin(), payload.end());
    write_file(path, out);
}

inline RawImage read_raw(const std::filesystem::path& sidecar)
{
    std::ifstream is(sidecar);
    if (!is)
        throw DataError("cannot open " + sidecar.string());
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("bad raw sidecar " + sidecar.string() + ": " + e.what());
    }
    RawImage img;
    try {
        const auto d = j.at("dims").get<std::vector<std::int64_t>>();
        const auto s = j.value("spacing", std::vector<double>{1, 1, 1});
        if (d.size() != 3 || s.size() != 3)
            throw DataError("raw sidecar dims/spacing must have 3 entries: " + sidecar.string());
        for (int i = 0; i < 3; ++i) {
            if (d[i] < 1) throw DataError("non-positive dimension in " + sidecar.string());
            img.dims[i] = static_cast<std::size_t>(d[i]);
            img.spacing[i] = s[i];
        }
        img.dtype = parse_dtype_name(j.value("dtype", std::string("float32")));
    } catch (const nlohmann::json::exception& e) {
        throw DataError("bad raw sidecar " + sidecar.string() + ": " + e.what());
    }
    auto payload_path = sidecar;
    payload_path.replace_extension(".raw");
    if (j.contains("payload"))
        payload_path = sidecar.parent_path() / j["payload"].get<std::string>();
    const auto bytes = read_file(payload_path);
    const std::size_t n = voxel_count(img.dims);
    if (bytes.size() != n * dtype_size(img.dtype))
        throw DataError("raw payload size mismatch: " + payload_path.string());
    decode_payload(bytes.data(), n, img.dtype, false, 1.0, 0.0, img.values);
    return img;
}

inline void write_raw(const std::filesystem::path& sidecar, const Dims& dims, const Spacing& spacing, DataType dtype,
                      const std::vector<unsigned char>& payload)
{
    auto payload_path = sidecar;
    payload_path.replace_extension(".raw");
    nlohmann::json j;
    j["dims"] = dims;
    j["spacing"] = spacing;
    j["dtype"] = dtype_name(dtype);
    j["payload"] = payload_path.filename().string();
    if (sidecar.has_parent_path())
        std::filesystem::create_directories(sidecar.parent_path());
    std::ofstream os(sidecar);
    os << j.dump(2) << '\n';
    if (!os)
        throw DataError("write failed for " + sidecar.string());
    write_file(payload_path, payload);
}

inline RawImage read_image(const std::filesystem::path& path)
{
    return is_raw_path(path) ? read_raw(path) : read_nifti(path);
}

inline void write_image(const std::filesystem::path& path, const Dims& dims, const Spacing& spacing, DataType dtype,
                        const std::vector<unsigned char>& payload)
{
    if (is_raw_path(path))
        write_raw(path, dims, spacing, dtype, payload);
    else
        write_nifti(path, dims, spacing, dtype, payload);
}

} // namespace detail

/// Loads a NIfTI-1 (.nii, .nii.gz) or portable raw (.json sidecar) image.
inline Volume load_volume(const std::filesystem::path& path)
{
    auto img = detail::read_image(path);
    Volume v;
    v.dims = img.dims;
    v.spacing = img.spacing;
    v.voxels = std::move(img.values);
    v.orientation = img.orientation;
    for (std::size_t i = 0; i < v.voxels.size(); ++i)
        if (v.voxels[i] < 0.0f)
            throw DataError("negative intensity at index " + std::to_string(i) + " in " + path.string());
    return v;
}

/// Loads a lesion mask. Masks stored as floats are binarized at > 0.5
/// (with a warning if any value was not already 0 or 1).
inline LabelVolume load_label_volume(const std::filesystem::path& path)
{
    auto img = detail::read_image(path);
    LabelVolume m;
    m.dims = img.dims;
    m.spacing = img.spacing;
    m.orientation = img.orientation;
    m.labels.resize(img.values.size());
    bool coerced = false;
    for (std::size_t i = 0; i < img.values.size(); ++i) {
        const float v = img.values[i];
        if (img.dtype == DataType::float32) {
            coerced |= (v != 0.0f && v != 1.0f);
            m.labels[i] = v > 0.5f ? 1 : 0;
        } else {
            if (v != 0.0f && v != 1.0f)
                throw ValidationError("non-binary label value " + std::to_string(static_cast<int>(v)) + " at index "
                                      + std::to_string(i) + " in " + path.string());
            m.labels[i] = static_cast<std::uint8_t>(v);
        }
    }
    if (coerced)
        std::cerr << "warning: " << path.string() << ": float mask binarized at > 0.5\n";
    return m;
}

/// Writes a float32 image. Path ending in .json selects the raw format.
inline void save_volume(const Volume& v, const std::filesystem::path& path)
{
    std::vector<unsigned char> payload(v.voxels.size() * 4);
    for (std::size_t i = 0; i < v.voxels.size(); ++i) {
        float f = v.voxels[i];
        if constexpr (std::endian::native == std::endian::big) f = detail::byteswap_value(f);
        std::memcpy(payload.data() + 4 * i, &f, 4);
    }
    detail::write_image(path, v.dims, v.spacing, DataType::float32, payload);
}

/// Writes a uint8 mask.
inline void save_volume(const LabelVolume& m, const std::filesystem::path& path)
{
    std::vector<unsigned char> payload(m.labels.begin(), m.labels.end());
    detail::write_image(path, m.dims, m.spacing, DataType::uint8, payload);
}

} // namespace msgen
