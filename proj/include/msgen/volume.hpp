#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "msgen/error.hpp"

namespace msgen {

using Dims = std::array<std::size_t, 3>;
using Spacing = std::array<double, 3>;

struct Provenance {
    std::string dataset_id;
    std::string patient_id;
    std::string scan_id;
    std::string modality = "FLAIR";
    std::string rater_id;
};

inline std::size_t voxel_count(const Dims& d) { return d[0] * d[1] * d[2]; }

inline std::string to_string(const Dims& d)
{
    std::ostringstream os;
    os << '(' << d[0] << ',' << d[1] << ',' << d[2] << ')';
    return os.str();
}

/// How the stored axes relate to the axes on disk.
struct Orientation {
    bool unknown = true;
    // stored axis k was file axis source_axis[k]
    std::array<int, 3> source_axis{0, 1, 2};

    [[nodiscard]] bool permuted() const { return source_axis != std::array<int, 3>{0, 1, 2}; }
};

/// 3D magnitude image, x-fastest. The third axis is the slicing (axial) axis.
struct Volume {
    Dims dims{0, 0, 0};
    Spacing spacing{1.0, 1.0, 1.0};
    std::vector<float> voxels;
    Provenance provenance;
    Orientation orientation;

    Volume() = default;
    Volume(Dims d, Spacing s) : dims(d), spacing(s), voxels(voxel_count(d), 0.0f) {}

    [[nodiscard]] std::size_t size() const { return voxels.size(); }
    [[nodiscard]] std::size_t index(std::size_t x, std::size_t y, std::size_t z) const
    {
        return x + dims[0] * (y + dims[1] * z);
    }
    float& at(std::size_t x, std::size_t y, std::size_t z) { return voxels[index(x, y, z)]; }
    [[nodiscard]] float at(std::size_t x, std::size_t y, std::size_t z) const { return voxels[index(x, y, z)]; }

    /// Throws unless dims, spacing and values satisfy the Volume invariants.
    void validate() const
    {
        if (dims[0] == 0 || dims[1] == 0 || dims[2] == 0)
            throw ValidationError("volume has a zero dimension " + to_string(dims));
        if (voxels.size() != voxel_count(dims))
            throw ValidationError("voxel count does not match dims " + to_string(dims));
        for (double s : spacing)
            if (!(s > 0.0) || !std::isfinite(s))
                throw ValidationError("spacing must be positive and finite");
        for (std::size_t i = 0; i < voxels.size(); ++i) {
            if (!std::isfinite(voxels[i]))
                throw NumericalError("non-finite voxel at index " + std::to_string(i));
            if (voxels[i] < 0.0f)
                throw ValidationError("negative voxel at index " + std::to_string(i));
        }
    }
};

/// Binary lesion mask. Labels are stored as bytes; anything other than
/// 0/1 violates the invariant and is reported by validate().
struct LabelVolume {
    Dims dims{0, 0, 0};
    Spacing spacing{1.0, 1.0, 1.0};
    std::vector<std::uint8_t> labels;
    Provenance provenance;
    Orientation orientation;

    LabelVolume() = default;
    LabelVolume(Dims d, Spacing s) : dims(d), spacing(s), labels(voxel_count(d), 0) {}

    [[nodiscard]] std::size_t size() const { return labels.size(); }
    [[nodiscard]] std::size_t index(std::size_t x, std::size_t y, std::size_t z) const
    {
        return x + dims[0] * (y + dims[1] * z);
    }
    std::uint8_t& at(std::size_t x, std::size_t y, std::size_t z) { return labels[index(x, y, z)]; }
    [[nodiscard]] std::uint8_t at(std::size_t x, std::size_t y, std::size_t z) const
    {
        return labels[index(x, y, z)];
    }

    [[nodiscard]] std::size_t count_ones() const
    {
        std::size_t n = 0;
        for (auto v : labels) n += (v == 1);
        return n;
    }

    void validate() const
    {
        if (labels.size() != voxel_count(dims))
            throw ValidationError("label count does not match dims " + to_string(dims));
        for (std::size_t i = 0; i < labels.size(); ++i)
            if (labels[i] > 1)
                throw ValidationError("non-binary label value " + std::to_string(int(labels[i])) + " at index "
                                      + std::to_string(i));
    }
};

/// Succeeds iff the mask has the image's dims and is strictly binary.
inline void validate_pair(const Volume& v, const LabelVolume& m)
{
    if (v.dims != m.dims)
        throw ValidationError("dim mismatch: volume " + to_string(v.dims) + " vs mask " + to_string(m.dims));
    m.validate();
}

} // namespace msgen
