#pragma once

// Overlap metrics, scan/dataset aggregation, rater agreement and label fusion.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "msgen/error.hpp"
#include "msgen/slicer.hpp"
#include "msgen/volume.hpp"

namespace msgen {

struct ConfusionCounts {
    std::uint64_t tp = 0;
    std::uint64_t fp = 0;
    std::uint64_t fn = 0;
    std::uint64_t tn = 0;

    [[nodiscard]] std::uint64_t total() const { return tp + fp + fn + tn; }

    ConfusionCounts& operator+=(const ConfusionCounts& o)
    {
        tp += o.tp;
        fp += o.fp;
        fn += o.fn;
        tn += o.tn;
        return *this;
    }
    bool operator==(const ConfusionCounts&) const = default;
};

inline ConfusionCounts confusion(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth)
{
    if (pred.size() != truth.size())
        throw ValidationError("confusion: shape mismatch (" + std::to_string(pred.size()) + " vs "
                              + std::to_string(truth.size()) + " pixels)");
    ConfusionCounts c;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool p = pred[i] != 0, t = truth[i] != 0;
        c.tp += p && t;
        c.fp += p && !t;
        c.fn += !p && t;
        c.tn += !p && !t;
    }
    return c;
}

inline ConfusionCounts confusion(const Mask2D& pred, const Mask2D& truth)
{
    if (pred.rows != truth.rows || pred.cols != truth.cols)
        throw ValidationError("confusion: shape mismatch");
    return confusion(std::span<const std::uint8_t>(pred.data), std::span<const std::uint8_t>(truth.data));
}

inline ConfusionCounts confusion(const LabelVolume& pred, const LabelVolume& truth)
{
    if (pred.dims != truth.dims)
        throw ValidationError("confusion: dim mismatch " + to_string(pred.dims) + " vs " + to_string(truth.dims));
    return confusion(std::span<const std::uint8_t>(pred.labels), std::span<const std::uint8_t>(truth.labels));
}

// Both-empty (2TP+FP+FN = 0) scores 1 by convention.
inline double dice(const ConfusionCounts& c)
{
    const auto denom = 2 * c.tp + c.fp + c.fn;
    return denom == 0 ? 1.0 : 2.0 * static_cast<double>(c.tp) / static_cast<double>(denom);
}

inline double iou(const ConfusionCounts& c)
{
    const auto denom = c.tp + c.fp + c.fn;
    return denom == 0 ? 1.0 : static_cast<double>(c.tp) / static_cast<double>(denom);
}

struct ScanScore {
    std::string patient_id;
    std::string scan_id;
    std::string center_tag;
    double dice = 0;
    double iou = 0;
    ConfusionCounts counts;
    bool empty_truth = false;
};

/// Pools counts over all slices of one scan, then applies dice/iou.
/// Slices are matched by position; z indices must agree when given.
inline ScanScore scan_score(std::span<const Mask2D> pred, std::span<const Mask2D> truth, std::string scan_id,
                            std::span<const std::size_t> pred_z = {}, std::span<const std::size_t> truth_z = {})
{
    if (pred.size() != truth.size())
        throw ValidationError("scan_score: mismatched slice sets for scan " + scan_id);
    if (pred_z.size() != truth_z.size() || !std::equal(pred_z.begin(), pred_z.end(), truth_z.begin()))
        throw ValidationError("scan_score: mismatched z indices for scan " + scan_id);
    ScanScore s;
    s.scan_id = std::move(scan_id);
    for (std::size_t i = 0; i < pred.size(); ++i) s.counts += confusion(pred[i], truth[i]);
    s.dice = dice(s.counts);
    s.iou = iou(s.counts);
    s.empty_truth = (s.counts.tp + s.counts.fn) == 0;
    return s;
}

struct DatasetScore {
    double dice = 0;
    double iou = 0;
    std::size_t n_evaluated = 0;
    std::size_t n_excluded = 0;
};

/// Unweighted mean over scans with nonempty ground truth.
inline DatasetScore dataset_score(std::span<const ScanScore> scores)
{
    DatasetScore d;
    for (const auto& s : scores) {
        if (s.empty_truth) {
            ++d.n_excluded;
            continue;
        }
        d.dice += s.dice;
        d.iou += s.iou;
        ++d.n_evaluated;
    }
    if (d.n_evaluated == 0)
        throw ValidationError("dataset_score: every scan is excluded (empty ground truth)");
    d.dice /= static_cast<double>(d.n_evaluated);
    d.iou /= static_cast<double>(d.n_evaluated);
    return d;
}

struct RaterAgreement {
    double pairwise_dice = 0;  // mean over raters i<j, per scan
    std::optional<double> consensus_dice;  // mean over raters of Dice(rater, consensus)
};

inline void check_same_dims(std::span<const LabelVolume> masks)
{
    for (const auto& m : masks)
        if (m.dims != masks.front().dims)
            throw ValidationError("dim mismatch between raters: " + to_string(masks.front().dims) + " vs "
                                  + to_string(m.dims));
}

/// Agreement for a single scan.
inline RaterAgreement rater_agreement(std::span<const LabelVolume> raters, const LabelVolume* consensus = nullptr)
{
    if (raters.size() < 2)
        throw ValidationError("rater_agreement: needs at least 2 raters");
    check_same_dims(raters);
    RaterAgreement r;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < raters.size(); ++i)
        for (std::size_t j = i + 1; j < raters.size(); ++j) {
            r.pairwise_dice += dice(confusion(raters[i], raters[j]));
            ++pairs;
        }
    r.pairwise_dice /= static_cast<double>(pairs);
    if (consensus) {
        if (consensus->dims != raters.front().dims)
            throw ValidationError("dim mismatch between raters and consensus");
        double acc = 0;
        for (const auto& m : raters) acc += dice(confusion(m, *consensus));
        r.consensus_dice = acc / static_cast<double>(raters.size());
    }
    return r;
}

/// Dataset-level agreement: mean of the per-scan values.
inline RaterAgreement mean_agreement(std::span<const RaterAgreement> per_scan)
{
    if (per_scan.empty())
        throw ValidationError("mean_agreement: no scans");
    RaterAgreement out;
    double cons = 0;
    std::size_t n_cons = 0;
    for (const auto& a : per_scan) {
        out.pairwise_dice += a.pairwise_dice;
        if (a.consensus_dice) {
            cons += *a.consensus_dice;
            ++n_cons;
        }
    }
    out.pairwise_dice /= static_cast<double>(per_scan.size());
    if (n_cons > 0) out.consensus_dice = cons / static_cast<double>(n_cons);
    return out;
}

inline LabelVolume fuse_majority(std::span<const LabelVolume> masks, std::size_t k)
{
    if (masks.empty())
        throw ValidationError("fuse: no masks");
    if (k < 1 || k > masks.size())
        throw ValidationError("fuse_majority: k must be in [1, rater count]");
    check_same_dims(masks);
    LabelVolume out(masks.front().dims, masks.front().spacing);
    out.provenance = masks.front().provenance;
    out.provenance.rater_id = k == 1 ? "union" : "majority" + std::to_string(k);
    for (std::size_t i = 0; i < out.labels.size(); ++i) {
        std::size_t votes = 0;
        for (const auto& m : masks) votes += (m.labels[i] != 0);
        out.labels[i] = votes >= k ? 1 : 0;
    }
    return out;
}

inline LabelVolume fuse_union(std::span<const LabelVolume> masks) { return fuse_majority(masks, 1); }

} // namespace msgen
