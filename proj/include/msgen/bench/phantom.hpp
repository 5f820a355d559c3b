#pragma once

// Synthetic multi-site FLAIR-like phantoms with exact lesion ground truth.
// Anatomy and lesions depend only on the structural seed; the site adds a
// strictly increasing intensity warp and Gaussian noise to the image.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "msgen/bench/manifest.hpp"
#include "msgen/error.hpp"
#include "msgen/nifti.hpp"
#include "msgen/rng.hpp"
#include "msgen/volume.hpp"

namespace msgen::bench {

struct PhantomProfile {
    std::string site_id = "site";
    // warp(x) = gain * x^gamma + offset on brain voxels; background stays 0
    double gamma = 1.0;
    double gain = 1.0;
    double offset = 0.0;
    double noise_sigma = 0.0;
    std::pair<int, int> lesion_count_range{3, 6};
    std::pair<double, double> lesion_radius_range_mm{4.0, 9.0};
    Dims dims{64, 64, 24};
    Spacing spacing{2.5, 2.5, 5.0};
    std::uint64_t seed = 1;  // structural seed (anatomy, lesions)
    std::size_t n_raters = 1;

    void validate() const
    {
        if (dims[0] < 8 || dims[1] < 8 || dims[2] < 3)
            throw ValidationError("phantom: degenerate dims " + msgen::to_string(dims));
        if (!(gamma > 0) || !(gain > 0) || offset < 0)
            throw ValidationError("phantom: warp must be strictly increasing with warp(0+) >= 0");
        if (noise_sigma < 0) throw ValidationError("phantom: noise_sigma must be >= 0");
        if (lesion_count_range.first < 1 || lesion_count_range.second < lesion_count_range.first)
            throw ValidationError("phantom: bad lesion_count_range");
        if (!(lesion_radius_range_mm.first > 0) || lesion_radius_range_mm.second < lesion_radius_range_mm.first)
            throw ValidationError("phantom: bad lesion_radius_range_mm");
        if (n_raters < 1) throw ValidationError("phantom: n_raters must be >= 1");
    }

    [[nodiscard]] double warp(double x) const { return x > 0 ? gain * std::pow(x, gamma) + offset : 0.0; }
};

inline nlohmann::json to_json(const PhantomProfile& p)
{
    return {{"site_id", p.site_id},
            {"gamma", p.gamma},
            {"gain", p.gain},
            {"offset", p.offset},
            {"noise_sigma", p.noise_sigma},
            {"lesion_count_range", {p.lesion_count_range.first, p.lesion_count_range.second}},
            {"lesion_radius_range_mm", {p.lesion_radius_range_mm.first, p.lesion_radius_range_mm.second}},
            {"dims", p.dims},
            {"spacing", p.spacing},
            {"seed", p.seed},
            {"n_raters", p.n_raters}};
}

inline PhantomProfile profile_from_json(const nlohmann::json& j, PhantomProfile p = {})
{
    try {
        p.site_id = j.value("site_id", p.site_id);
        p.gamma = j.value("gamma", p.gamma);
        p.gain = j.value("gain", p.gain);
        p.offset = j.value("offset", p.offset);
        p.noise_sigma = j.value("noise_sigma", p.noise_sigma);
        if (j.contains("lesion_count_range")) {
            const auto v = j["lesion_count_range"].get<std::vector<int>>();
            p.lesion_count_range = {v.at(0), v.at(1)};
        }
        if (j.contains("lesion_radius_range_mm")) {
            const auto v = j["lesion_radius_range_mm"].get<std::vector<double>>();
            p.lesion_radius_range_mm = {v.at(0), v.at(1)};
        }
        if (j.contains("dims")) p.dims = j["dims"].get<Dims>();
        if (j.contains("spacing")) p.spacing = j["spacing"].get<Spacing>();
        p.seed = j.value("seed", p.seed);
        p.n_raters = j.value("n_raters", p.n_raters);
    } catch (const std::exception& e) {
        throw ValidationError(std::string("bad phantom profile: ") + e.what());
    }
    p.validate();
    return p;
}

// Tissue levels before warping (white matter = 1).
inline constexpr double phantom_gm_level = 0.72;
inline constexpr double phantom_wm_level = 1.0;
inline constexpr double phantom_lesion_level = 1.6;
inline constexpr double phantom_field_amplitude = 0.08;

struct PhantomScan {
    Volume image;
    LabelVolume truth;
    std::vector<LabelVolume> raters;  // empty when n_raters == 1
};

namespace detail {

struct Ellipsoid {
    double cx, cy, cz, rx, ry, rz;
    [[nodiscard]] double level(double x, double y, double z) const
    {
        const double dx = (x - cx) / rx, dy = (y - cy) / ry, dz = (z - cz) / rz;
        return dx * dx + dy * dy + dz * dz;
    }
};

} // namespace detail

/// One scan of a site. scan_index selects the subject; the same
/// (seed, scan_index) gives the same anatomy and lesions at every site.
inline PhantomScan generate_phantom_scan(const PhantomProfile& profile, std::size_t scan_index)
{
    profile.validate();
    const auto [nx, ny, nz] = profile.dims;
    Rng anatomy(derive_seed(profile.seed, "phantom-structure", scan_index));

    const detail::Ellipsoid brain{
        double(nx - 1) / 2 + anatomy.uniform(-1, 1), double(ny - 1) / 2 + anatomy.uniform(-1, 1),
        double(nz - 1) / 2,
        0.42 * double(nx) * anatomy.uniform(0.9, 1.0), 0.45 * double(ny) * anatomy.uniform(0.9, 1.0),
        0.40 * double(nz) * anatomy.uniform(0.9, 1.0)};
    const double wm_scale = anatomy.uniform(0.62, 0.72);
    const detail::Ellipsoid wm{brain.cx, brain.cy, brain.cz, brain.rx * wm_scale, brain.ry * wm_scale,
                               brain.rz * wm_scale};
    const double fx = anatomy.uniform(0.5, 1.5), fy = anatomy.uniform(0.5, 1.5);
    const double px = anatomy.uniform(0, 2 * std::numbers::pi), py = anatomy.uniform(0, 2 * std::numbers::pi);

    const int n_lesions = profile.lesion_count_range.first
                          + static_cast<int>(anatomy.below(
                              static_cast<std::uint64_t>(profile.lesion_count_range.second
                                                         - profile.lesion_count_range.first + 1)));
    std::vector<detail::Ellipsoid> lesions;
    for (int l = 0; l < n_lesions; ++l) {
        // uniform direction and radius inside 70% of the white matter
        double ux, uy, uz;
        do {
            ux = anatomy.uniform(-1, 1);
            uy = anatomy.uniform(-1, 1);
            uz = anatomy.uniform(-1, 1);
        } while (ux * ux + uy * uy + uz * uz > 1);
        const double r_mm = anatomy.uniform(profile.lesion_radius_range_mm.first, profile.lesion_radius_range_mm.second);
        lesions.push_back({wm.cx + 0.7 * ux * wm.rx, wm.cy + 0.7 * uy * wm.ry, wm.cz + 0.7 * uz * wm.rz,
                           r_mm / profile.spacing[0] * anatomy.uniform(0.8, 1.2),
                           r_mm / profile.spacing[1] * anatomy.uniform(0.8, 1.2),
                           std::max(0.6, r_mm / profile.spacing[2] * anatomy.uniform(0.8, 1.2))});
    }
    // per-rater lesion radius scaling, structural as well
    std::vector<std::vector<double>> rater_scale(profile.n_raters > 1 ? profile.n_raters : 0);
    for (auto& r : rater_scale)
        for (int l = 0; l < n_lesions; ++l) r.push_back(anatomy.uniform(0.75, 1.25));

    PhantomScan scan;
    scan.image = Volume(profile.dims, profile.spacing);
    scan.truth = LabelVolume(profile.dims, profile.spacing);
    for (std::size_t r = 0; r < rater_scale.size(); ++r) scan.raters.emplace_back(profile.dims, profile.spacing);

    Rng noise(derive_seed(profile.seed ^ fnv1a(profile.site_id), "phantom-noise", scan_index));
    for (std::size_t z = 0; z < nz; ++z)
        for (std::size_t y = 0; y < ny; ++y)
            for (std::size_t x = 0; x < nx; ++x) {
                const double X = double(x), Y = double(y), Z = double(z);
                if (brain.level(X, Y, Z) > 1.0) continue;
                const double field = 1.0
                                     + phantom_field_amplitude * std::sin(2 * std::numbers::pi * fx * X / double(nx) + px)
                                           * std::cos(2 * std::numbers::pi * fy * Y / double(ny) + py);
                double base = wm.level(X, Y, Z) <= 1.0 ? phantom_wm_level : phantom_gm_level;
                bool lesion = false;
                for (int l = 0; l < n_lesions; ++l)
                    if (lesions[std::size_t(l)].level(X, Y, Z) <= 1.0) lesion = true;
                if (lesion) base = phantom_lesion_level;
                const std::size_t i = scan.image.index(x, y, z);
                scan.truth.labels[i] = lesion ? 1 : 0;
                for (std::size_t r = 0; r < rater_scale.size(); ++r) {
                    bool marked = false;
                    for (int l = 0; l < n_lesions; ++l) {
                        auto e = lesions[std::size_t(l)];
                        const double s = rater_scale[r][std::size_t(l)];
                        e.rx *= s;
                        e.ry *= s;
                        e.rz *= s;
                        if (e.level(X, Y, Z) <= 1.0) marked = true;
                    }
                    scan.raters[r].labels[i] = marked ? 1 : 0;
                }
                double value = profile.warp(base * field);
                if (profile.noise_sigma > 0) value += profile.noise_sigma * noise.normal();
                // keep brain voxels strictly positive so background stays the only zero
                scan.image.voxels[i] = static_cast<float>(std::max(value, 1e-3));
            }

    const std::string scan_id = profile.site_id + "_scan" + (scan_index < 10 ? "0" : "") + std::to_string(scan_index);
    scan.image.provenance = {profile.site_id, profile.site_id + "_p" + std::to_string(scan_index), scan_id, "FLAIR", ""};
    scan.image.orientation.unknown = false;
    scan.truth.provenance = scan.image.provenance;
    scan.truth.provenance.rater_id = "consensus";
    scan.truth.orientation = scan.image.orientation;
    for (std::size_t r = 0; r < scan.raters.size(); ++r) {
        scan.raters[r].provenance = scan.image.provenance;
        scan.raters[r].provenance.rater_id = "rater" + std::to_string(r + 1);
        scan.raters[r].orientation = scan.image.orientation;
    }
    return scan;
}

/// The default four-site suite: same anatomy generator, different scanners.
inline std::vector<PhantomProfile> default_phantom_suite(std::uint64_t seed = 1)
{
    std::vector<PhantomProfile> sites(4);
    const char* names[] = {"siteA", "siteB", "siteC", "siteD"};
    const double gamma[] = {1.0, 0.5, 2.0, 1.5};
    const double gain[] = {1.0, 1.6, 0.6, 120.0};
    const double offset[] = {0.0, 0.1, 0.05, 5.0};
    const double noise[] = {0.03, 0.05, 0.02, 4.0};
    for (std::size_t s = 0; s < sites.size(); ++s) {
        sites[s].site_id = names[s];
        sites[s].gamma = gamma[s];
        sites[s].gain = gain[s];
        sites[s].offset = offset[s];
        sites[s].noise_sigma = noise[s];
        // distinct subjects per site
        sites[s].seed = derive_seed(seed, names[s]);
    }
    return sites;
}

inline constexpr std::size_t default_scans_per_site = 6;

/// Writes n_scans scans of one site under dir as gzipped NIfTI plus
/// dir/manifest.json, and returns the manifest.
inline DatasetManifest generate_phantom_dataset(const PhantomProfile& profile, std::size_t n_scans,
                                                const std::filesystem::path& dir)
{
    profile.validate();
    if (n_scans == 0) throw ValidationError("phantom: n_scans must be >= 1");
    std::filesystem::create_directories(dir);
    DatasetManifest m;
    m.dataset_id = profile.site_id;
    for (std::size_t i = 0; i < n_scans; ++i) {
        const auto scan = generate_phantom_scan(profile, i);
        const auto& id = scan.image.provenance.scan_id;
        ManifestEntry e;
        e.patient_id = scan.image.provenance.patient_id;
        e.scan_id = id;
        e.image = dir / (id + "_flair.nii.gz");
        save_volume(scan.image, e.image);
        e.masks["consensus"] = dir / (id + "_mask.nii.gz");
        save_volume(scan.truth, e.masks["consensus"]);
        for (const auto& r : scan.raters) {
            const auto path = dir / (id + "_" + r.provenance.rater_id + ".nii.gz");
            save_volume(r, path);
            e.masks[r.provenance.rater_id] = path;
        }
        m.entries.push_back(std::move(e));
    }
    m.source = dir / "manifest.json";
    save_manifest(m, m.source);
    {
        std::ofstream out(dir / "profile.json");
        out << to_json(profile).dump(2) << "\n";
    }
    return m;
}

/// Default suite on disk: <dir>/<site>/manifest.json for each site.
inline std::vector<DatasetManifest> generate_phantom_suite(const std::vector<PhantomProfile>& sites,
                                                           std::size_t scans_per_site,
                                                           const std::filesystem::path& dir)
{
    std::vector<DatasetManifest> out;
    for (const auto& p : sites) out.push_back(generate_phantom_dataset(p, scans_per_site, dir / p.site_id));
    return out;
}

} // namespace msgen::bench
