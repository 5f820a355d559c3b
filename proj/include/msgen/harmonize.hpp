#pragma once

// Intensity harmonization: template-based quantile normalization and the
// plain [0,1] linear rescaling baseline.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "msgen/error.hpp"
#include "msgen/volume.hpp"

namespace msgen {

inline constexpr std::size_t default_template_resolution = 1024;

/// Target intensity distribution, stored as its quantile function sampled
/// at ranks k/(M-1), k = 0..M-1.
struct IntensityTemplate {
    std::vector<double> quantiles;
    std::vector<std::string> source_ids;

    [[nodiscard]] std::size_t resolution() const { return quantiles.size(); }

    void validate() const
    {
        if (quantiles.size() < 2)
            throw ValidationError("template needs at least 2 quantiles");
        for (std::size_t k = 0; k < quantiles.size(); ++k) {
            if (!std::isfinite(quantiles[k]))
                throw ValidationError("non-finite template quantile");
            if (k > 0 && quantiles[k] < quantiles[k - 1])
                throw ValidationError("template quantiles are not monotone");
        }
        if (quantiles.front() < 0)
            throw ValidationError("template quantiles must be nonnegative");
    }

    /// Quantile function at rank r in [0,1], linear between samples.
    [[nodiscard]] double quantile_at(double r) const
    {
        const double pos = std::clamp(r, 0.0, 1.0) * static_cast<double>(quantiles.size() - 1);
        const auto k = std::min(static_cast<std::size_t>(pos), quantiles.size() - 2);
        const double frac = pos - static_cast<double>(k);
        return quantiles[k] + frac * (quantiles[k + 1] - quantiles[k]);
    }

    /// Right-continuous CDF of the piecewise-linear template distribution.
    [[nodiscard]] double cdf(double x) const
    {
        const auto& q = quantiles;
        const double last = static_cast<double>(q.size() - 1);
        if (x < q.front()) return 0.0;
        if (x >= q.back()) return 1.0;
        const auto k = static_cast<std::size_t>(std::upper_bound(q.begin(), q.end(), x) - q.begin()) - 1;
        return (static_cast<double>(k) + (x - q[k]) / (q[k + 1] - q[k])) / last;
    }

    /// Left limit of cdf at x.
    [[nodiscard]] double cdf_left(double x) const
    {
        const auto& q = quantiles;
        const double last = static_cast<double>(q.size() - 1);
        if (x <= q.front()) return 0.0;
        if (x > q.back()) return 1.0;
        const auto k = static_cast<std::size_t>(std::lower_bound(q.begin(), q.end(), x) - q.begin());
        return (static_cast<double>(k - 1) + (x - q[k - 1]) / (q[k] - q[k - 1])) / last;
    }
};

inline nlohmann::json to_json(const IntensityTemplate& t)
{
    return {{"M", t.quantiles.size()}, {"quantiles", t.quantiles}, {"source_ids", t.source_ids}};
}

inline IntensityTemplate template_from_json(const nlohmann::json& j)
{
    IntensityTemplate t;
    try {
        t.quantiles = j.at("quantiles").get<std::vector<double>>();
        t.source_ids = j.value("source_ids", std::vector<std::string>{});
        if (j.contains("M") && j["M"].get<std::size_t>() != t.quantiles.size())
            throw DataError("template M does not match quantile count");
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("bad template json: ") + e.what());
    }
    t.validate();
    return t;
}

inline void save_template(const IntensityTemplate& t, const std::filesystem::path& path)
{
    std::ofstream os(path);
    os << to_json(t).dump(1) << '\n';
    if (!os)
        throw DataError("cannot write template " + path.string());
}

inline IntensityTemplate load_template(const std::filesystem::path& path)
{
    std::ifstream is(path);
    if (!is)
        throw DataError("cannot open template " + path.string());
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("bad template json " + path.string() + ": " + e.what());
    }
    return template_from_json(j);
}

namespace detail {

inline std::vector<double> sorted_nonzero(const Volume& v)
{
    std::vector<double> out;
    out.reserve(v.voxels.size());
    for (float x : v.voxels)
        if (x != 0.0f) out.push_back(x);
    std::sort(out.begin(), out.end());
    return out;
}

/// Empirical quantile at p of sorted data, linear between order statistics.
inline double empirical_quantile(std::span<const double> sorted, double p)
{
    const double pos = p * static_cast<double>(sorted.size() - 1);
    const auto k = std::min(static_cast<std::size_t>(pos), sorted.size() - 1);
    if (k + 1 >= sorted.size()) return sorted[k];
    return sorted[k] + (pos - static_cast<double>(k)) * (sorted[k + 1] - sorted[k]);
}

} // namespace detail

/// Average-quantile template over the nonzero voxels of each volume.
inline IntensityTemplate build_template(std::span<const Volume> volumes,
                                        std::size_t resolution = default_template_resolution)
{
    if (volumes.empty())
        throw ValidationError("build_template: empty volume list");
    if (resolution < 2)
        throw ValidationError("build_template: resolution must be >= 2");

    IntensityTemplate t;
    t.quantiles.assign(resolution, 0.0);
    const double last = static_cast<double>(resolution - 1);
    for (const auto& v : volumes) {
        const auto sorted = detail::sorted_nonzero(v);
        if (sorted.size() < resolution)
            throw ValidationError("build_template: volume '" + v.provenance.scan_id + "' has "
                                  + std::to_string(sorted.size()) + " nonzero voxels, fewer than M = "
                                  + std::to_string(resolution));
        for (std::size_t k = 0; k < resolution; ++k)
            t.quantiles[k] += detail::empirical_quantile(sorted, static_cast<double>(k) / last);
        t.source_ids.push_back(v.provenance.scan_id);
    }
    for (auto& q : t.quantiles) q /= static_cast<double>(volumes.size());
    // the per-rank mean of monotone curves is monotone; guard against
    // round-off in the division anyway
    for (std::size_t k = 1; k < resolution; ++k) t.quantiles[k] = std::max(t.quantiles[k], t.quantiles[k - 1]);
    return t;
}

/// Maps nonzero voxels through their average fractional rank onto the
/// template. Zero voxels stay zero.
inline Volume quantile_normalize(const Volume& v, const IntensityTemplate& t)
{
    t.validate();
    std::vector<std::size_t> idx;
    idx.reserve(v.voxels.size());
    for (std::size_t i = 0; i < v.voxels.size(); ++i)
        if (v.voxels[i] != 0.0f) idx.push_back(i);
    if (idx.empty())
        throw ValidationError("quantile_normalize: all-zero volume");

    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        return v.voxels[a] < v.voxels[b] || (v.voxels[a] == v.voxels[b] && a < b);
    });

    Volume out = v;
    std::fill(out.voxels.begin(), out.voxels.end(), 0.0f);
    const std::size_t n = idx.size();
    const double denom = n > 1 ? static_cast<double>(n - 1) : 1.0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i + 1;
        while (j < n && v.voxels[idx[j]] == v.voxels[idx[i]]) ++j;
        // ranks i..j-1 share their mean
        const double r = n > 1 ? 0.5 * static_cast<double>(i + j - 1) / denom : 0.5;
        const auto value = static_cast<float>(t.quantile_at(r));
        for (std::size_t k = i; k < j; ++k) out.voxels[idx[k]] = value;
        i = j;
    }
    return out;
}

/// (v - min) / (max - min) over all voxels, background included.
inline Volume linear_normalize(const Volume& v)
{
    if (v.voxels.empty())
        throw ValidationError("linear_normalize: empty volume");
    const auto [lo_it, hi_it] = std::minmax_element(v.voxels.begin(), v.voxels.end());
    const double lo = *lo_it, hi = *hi_it;
    if (!(hi > lo))
        throw ValidationError("linear_normalize: constant volume");
    Volume out = v;
    const double scale = 1.0 / (hi - lo);
    for (auto& x : out.voxels) x = static_cast<float>(std::clamp((x - lo) * scale, 0.0, 1.0));
    return out;
}

/// Kolmogorov-Smirnov distance between the nonzero-voxel distribution of v
/// and the template's piecewise-linear distribution.
inline double ks_distance(const Volume& v, const IntensityTemplate& t)
{
    t.validate();
    const auto sorted = detail::sorted_nonzero(v);
    if (sorted.empty())
        throw ValidationError("ks_distance: all-zero volume");
    const double n = static_cast<double>(sorted.size());
    double d = 0.0;
    for (std::size_t i = 0; i < sorted.size();) {
        std::size_t j = i + 1;
        while (j < sorted.size() && sorted[j] == sorted[i]) ++j;
        const double x = sorted[i];
        d = std::max(d, std::abs(static_cast<double>(i) / n - t.cdf_left(x)));
        d = std::max(d, std::abs(static_cast<double>(j) / n - t.cdf(x)));
        i = j;
    }
    return std::min(d, 1.0);
}

} // namespace msgen
