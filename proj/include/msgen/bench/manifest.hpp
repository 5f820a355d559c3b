#pragma once

// Dataset manifests: JSON lists of scans with image and mask paths.
// Relative paths resolve against the manifest's directory.
//
// {
//   "dataset_id": "siteA",
//   "heterogeneous": false,
//   "entries": [
//     {"patient_id": "p1", "scan_id": "s1", "center_tag": "c01",
//      "image": "s1_flair.nii.gz",
//      "masks": {"consensus": "s1_mask.nii.gz", "rater1": "..."}}
//   ]
// }

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "msgen/error.hpp"
#include "msgen/metrics.hpp"
#include "msgen/nifti.hpp"
#include "msgen/volume.hpp"

namespace msgen::bench {

struct ManifestEntry {
    std::string patient_id;
    std::string scan_id;
    std::string center_tag;  // empty when the dataset has a single center
    std::filesystem::path image;
    std::map<std::string, std::filesystem::path> masks;  // rater id -> path
};

struct DatasetManifest {
    std::string dataset_id;
    bool heterogeneous = false;
    std::vector<ManifestEntry> entries;
    std::filesystem::path source;  // the manifest file itself, if loaded

    void validate() const
    {
        if (dataset_id.empty()) throw ValidationError("manifest: empty dataset_id");
        if (entries.empty()) throw ValidationError("manifest " + dataset_id + ": no entries");
        std::set<std::pair<std::string, std::string>> ids;
        std::set<std::filesystem::path> paths;
        auto distinct = [&](const std::filesystem::path& p) {
            if (!paths.insert(p.lexically_normal()).second)
                throw ValidationError("manifest " + dataset_id + ": path used twice: " + p.string());
        };
        for (const auto& e : entries) {
            if (e.scan_id.empty()) throw ValidationError("manifest " + dataset_id + ": entry without scan_id");
            if (!ids.emplace(e.patient_id, e.scan_id).second)
                throw ValidationError("manifest " + dataset_id + ": duplicate (patient_id, scan_id) (" + e.patient_id
                                      + ", " + e.scan_id + ")");
            if (e.image.empty()) throw ValidationError("manifest " + dataset_id + ": " + e.scan_id + " has no image");
            if (e.masks.empty()) throw ValidationError("manifest " + dataset_id + ": " + e.scan_id + " has no masks");
            distinct(e.image);
            for (const auto& [rater, p] : e.masks) distinct(p);
        }
    }
};

inline nlohmann::json to_json(const DatasetManifest& m)
{
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& e : m.entries) {
        nlohmann::json masks = nlohmann::json::object();
        for (const auto& [rater, path] : e.masks) masks[rater] = path.generic_string();
        nlohmann::json j = {{"patient_id", e.patient_id}, {"scan_id", e.scan_id}, {"image", e.image.generic_string()},
                            {"masks", masks}};
        if (!e.center_tag.empty()) j["center_tag"] = e.center_tag;
        entries.push_back(std::move(j));
    }
    return {{"dataset_id", m.dataset_id}, {"heterogeneous", m.heterogeneous}, {"entries", entries}};
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j, const std::filesystem::path& base = {})
{
    DatasetManifest m;
    try {
        m.dataset_id = j.at("dataset_id").get<std::string>();
        m.heterogeneous = j.value("heterogeneous", false);
        for (const auto& je : j.at("entries")) {
            ManifestEntry e;
            e.scan_id = je.at("scan_id").get<std::string>();
            e.patient_id = je.value("patient_id", e.scan_id);
            e.center_tag = je.value("center_tag", std::string{});
            auto resolve = [&](const std::string& p) {
                std::filesystem::path path(p);
                return path.is_relative() && !base.empty() ? base / path : path;
            };
            e.image = resolve(je.at("image").get<std::string>());
            for (const auto& [rater, path] : je.at("masks").items()) e.masks[rater] = resolve(path.get<std::string>());
            m.entries.push_back(std::move(e));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("bad manifest: ") + e.what());
    }
    m.validate();
    return m;
}

inline DatasetManifest load_manifest(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw DataError("cannot open manifest " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("manifest " + path.string() + " is not valid JSON: " + e.what());
    }
    auto m = manifest_from_json(j, path.parent_path());
    m.source = path;
    return m;
}

/// Writes paths relative to the manifest directory when they lie below it.
inline void save_manifest(const DatasetManifest& m, const std::filesystem::path& path)
{
    DatasetManifest rel = m;
    const auto dir = std::filesystem::absolute(path).parent_path();
    auto relativize = [&](std::filesystem::path& p) {
        const auto r = std::filesystem::absolute(p).lexically_relative(dir);
        if (!r.empty() && *r.begin() != "..") p = r;
    };
    for (auto& e : rel.entries) {
        relativize(e.image);
        for (auto& [rater, p] : e.masks) relativize(p);
    }
    std::ofstream out(path);
    if (!out) throw DataError("cannot write manifest " + path.string());
    out << to_json(rel).dump(2) << "\n";
}

// Which annotation counts as ground truth: "consensus" (falling back to
// the union of raters when a scan has none), "union", or a rater id.
inline constexpr const char* default_label_source = "consensus";

struct LoadedScan {
    Volume image;
    LabelVolume truth;
    std::string center_tag;
};

inline LabelVolume resolve_truth(const ManifestEntry& e, const std::string& label_source)
{
    auto load_all_raters = [&] {
        std::vector<LabelVolume> raters;
        for (const auto& [rater, path] : e.masks)
            if (rater != "consensus") {
                raters.push_back(load_label_volume(path));
                raters.back().provenance.rater_id = rater;
            }
        return raters;
    };
    if (label_source == "consensus" || label_source == "union") {
        if (label_source == "consensus") {
            if (auto it = e.masks.find("consensus"); it != e.masks.end()) {
                auto m = load_label_volume(it->second);
                m.provenance.rater_id = "consensus";
                return m;
            }
        }
        auto raters = load_all_raters();
        if (raters.empty()) {
            // only a consensus mask exists; it is its own union
            auto m = load_label_volume(e.masks.begin()->second);
            m.provenance.rater_id = e.masks.begin()->first;
            return m;
        }
        auto u = fuse_union(raters);
        u.provenance.rater_id = "union";
        return u;
    }
    const auto it = e.masks.find(label_source);
    if (it == e.masks.end()) throw ValidationError("scan " + e.scan_id + " has no mask for rater '" + label_source + "'");
    auto m = load_label_volume(it->second);
    m.provenance.rater_id = label_source;
    return m;
}

inline LoadedScan load_scan(const DatasetManifest& m, const ManifestEntry& e,
                            const std::string& label_source = default_label_source)
{
    LoadedScan s;
    s.image = load_volume(e.image);
    s.truth = resolve_truth(e, label_source);
    try {
        validate_pair(s.image, s.truth);
    } catch (const ValidationError& err) {
        throw ValidationError("scan " + e.scan_id + ": " + err.what());
    }
    s.image.provenance.dataset_id = m.dataset_id;
    s.image.provenance.patient_id = e.patient_id;
    s.image.provenance.scan_id = e.scan_id;
    const auto rater = s.truth.provenance.rater_id;
    s.truth.provenance = s.image.provenance;
    s.truth.provenance.rater_id = rater;
    s.center_tag = e.center_tag;
    return s;
}

} // namespace msgen::bench
