#pragma once

// Grouped train/validation split, mini-batch Adam training with
// best-validation-Dice model selection, inference, and checkpoints.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "msgen/error.hpp"
#include "msgen/metrics.hpp"
#include "msgen/rng.hpp"
#include "msgen/segnet/adam.hpp"
#include "msgen/segnet/network.hpp"
#include "msgen/slicer.hpp"

#if defined(__SSE2__)
#include <pmmintrin.h>
#include <xmmintrin.h>
#endif

namespace msgen::segnet {

struct TrainConfig {
    AdamConfig adam;
    double pos_weight = 0.8;
    std::size_t epochs = 50;
    std::size_t batch_size = 8;
    double split_ratio = 0.8;
    std::uint64_t seed = 0;
    Topology topology;
    double prediction_threshold = 0.5;

    void validate() const
    {
        if (!(pos_weight > 0 && pos_weight < 1)) throw ValidationError("pos_weight must be in (0,1)");
        if (!(split_ratio > 0 && split_ratio < 1)) throw ValidationError("split_ratio must be in (0,1)");
        if (epochs < 1) throw ValidationError("epochs must be >= 1");
        if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
        if (!(adam.lr > 0)) throw ValidationError("lr must be positive");
        topology.validate();
    }
};

inline nlohmann::json to_json(const Topology& t)
{
    return {{"kind", to_string(t.kind)},
            {"depth", t.depth},
            {"base_channels", t.base_channels},
            {"multiplier", t.multiplier}};
}

inline Topology topology_from_json(const nlohmann::json& j, Topology t = {})
{
    if (j.contains("kind")) t.kind = parse_skip_kind(j["kind"].get<std::string>());
    t.depth = j.value("depth", t.depth);
    t.base_channels = j.value("base_channels", t.base_channels);
    t.multiplier = j.value("multiplier", t.multiplier);
    return t;
}

inline nlohmann::json to_json(const TrainConfig& c)
{
    return {{"lr", c.adam.lr},
            {"weight_decay", c.adam.weight_decay},
            {"betas", {c.adam.beta1, c.adam.beta2}},
            {"adam_eps", c.adam.eps},
            {"bce_pos_weight", c.pos_weight},
            {"epochs", c.epochs},
            {"batch_size", c.batch_size},
            {"split_ratio", c.split_ratio},
            {"seed", c.seed},
            {"topology", to_json(c.topology)},
            {"prediction_threshold", c.prediction_threshold}};
}

/// Reads the keys present in j on top of base.
inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c = {})
{
    try {
        c.adam.lr = j.value("lr", c.adam.lr);
        c.adam.weight_decay = j.value("weight_decay", c.adam.weight_decay);
        if (j.contains("betas")) {
            const auto b = j["betas"].get<std::vector<double>>();
            if (b.size() != 2) throw ValidationError("betas must have two entries");
            c.adam.beta1 = b[0];
            c.adam.beta2 = b[1];
        }
        c.adam.eps = j.value("adam_eps", c.adam.eps);
        c.pos_weight = j.value("bce_pos_weight", c.pos_weight);
        c.epochs = j.value("epochs", c.epochs);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.split_ratio = j.value("split_ratio", c.split_ratio);
        c.seed = j.value("seed", c.seed);
        if (j.contains("topology")) c.topology = topology_from_json(j["topology"], c.topology);
        c.prediction_threshold = j.value("prediction_threshold", c.prediction_threshold);
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("bad train config: ") + e.what());
    }
    c.validate();
    return c;
}

/// Group key: patient when known, else scan.
inline const std::string& group_key(const SliceSample& s)
{
    return s.provenance.patient_id.empty() ? s.provenance.scan_id : s.provenance.patient_id;
}

struct Split {
    std::vector<SliceSample> train;
    std::vector<SliceSample> val;
};

/// Shuffles the groups with the seed and fills train until it holds at
/// least ratio of the groups; the rest go to validation. No group is split.
inline Split split_grouped(const std::vector<SliceSample>& samples, double ratio, std::uint64_t seed)
{
    if (!(ratio > 0 && ratio < 1))
        throw ValidationError("split ratio must be in (0,1)");
    std::vector<std::string> groups;
    {
        std::set<std::string> seen;
        for (const auto& s : samples)
            if (seen.insert(group_key(s)).second) groups.push_back(group_key(s));
    }
    if (groups.size() < 2)
        throw ValidationError("split_grouped: need at least 2 groups, got " + std::to_string(groups.size()));
    // canonical order first so the split depends only on the group set
    std::sort(groups.begin(), groups.end());
    Rng rng(seed);
    rng.shuffle(groups);

    std::set<std::string> train_groups;
    const double total = static_cast<double>(groups.size());
    for (const auto& g : groups) {
        if (static_cast<double>(train_groups.size()) >= ratio * total) break;
        train_groups.insert(g);
    }
    if (train_groups.size() == groups.size()) train_groups.erase(groups.back());

    Split out;
    for (const auto& s : samples) (train_groups.count(group_key(s)) ? out.train : out.val).push_back(s);
    return out;
}

template <typename T>
Batch<T> make_batch(const std::vector<SliceSample>& samples, std::span<const std::size_t> indices)
{
    Batch<T> b;
    if (indices.empty()) return b;
    b.count = indices.size();
    b.h = samples[indices[0]].image.rows;
    b.w = samples[indices[0]].image.cols;
    b.images.reserve(b.count * b.h * b.w);
    b.masks.reserve(b.count * b.h * b.w);
    for (std::size_t i : indices) {
        const auto& s = samples[i];
        if (s.image.rows != b.h || s.image.cols != b.w)
            throw ValidationError("all slices in a batch must have the same size");
        b.images.insert(b.images.end(), s.image.data.begin(), s.image.data.end());
        b.masks.insert(b.masks.end(), s.mask.data.begin(), s.mask.data.end());
    }
    return b;
}

/// Flushes subnormal floats to zero on this thread while alive. Tiny
/// activations late in training otherwise slow SSE arithmetic several fold.
class FlushDenormals {
public:
    FlushDenormals()
    {
#if defined(__SSE2__)
        saved_ = _mm_getcsr();
        _MM_SET_FLUSH_ZERO_MODE(_MM_FLUSH_ZERO_ON);
        _MM_SET_DENORMALS_ZERO_MODE(_MM_DENORMALS_ZERO_ON);
#endif
    }
    ~FlushDenormals()
    {
#if defined(__SSE2__)
        _mm_setcsr(saved_);
#endif
    }
    FlushDenormals(const FlushDenormals&) = delete;
    FlushDenormals& operator=(const FlushDenormals&) = delete;

private:
    unsigned saved_ = 0;
};

/// Binary masks, prob >= threshold.
template <typename T>
std::vector<Mask2D> predict(const ModelParams<T>& p, const std::vector<SliceSample>& samples, double threshold)
{
    const FlushDenormals ftz;
    std::vector<Mask2D> out;
    out.reserve(samples.size());
    Workspace<T> ws;
    for (const auto& s : samples) {
        Batch<T> b{1, s.image.rows, s.image.cols, {}, {}};
        b.images.assign(s.image.data.begin(), s.image.data.end());
        check_batch(p, b, false);
        forward_sample<T>(p, b.image(0), b.h, b.w, ws);
        Mask2D m(s.image.rows, s.image.cols);
        for (std::size_t i = 0; i < m.data.size(); ++i)
            m.data[i] = static_cast<double>(ws.probs[i]) >= threshold ? 1 : 0;
        out.push_back(std::move(m));
    }
    return out;
}

/// Per-scan pooled scores of predictions against the samples' masks, in
/// order of first appearance of each scan.
inline std::vector<ScanScore> score_by_scan(const std::vector<SliceSample>& samples, const std::vector<Mask2D>& preds)
{
    std::vector<std::string> order;
    std::map<std::string, ScanScore> by_scan;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto& pv = samples[i].provenance;
        const auto key = pv.dataset_id + "/" + pv.patient_id + "/" + pv.scan_id;
        auto [it, inserted] = by_scan.try_emplace(key);
        if (inserted) {
            order.push_back(key);
            it->second.scan_id = samples[i].provenance.scan_id;
        }
        it->second.counts += confusion(preds[i], samples[i].mask);
    }
    std::vector<ScanScore> out;
    for (const auto& key : order) {
        auto s = by_scan[key];
        s.dice = dice(s.counts);
        s.iou = iou(s.counts);
        s.empty_truth = (s.counts.tp + s.counts.fn) == 0;
        out.push_back(std::move(s));
    }
    return out;
}

/// Mean per-scan Dice over scans with lesions; falls back to all scans
/// when none has lesions.
inline double mean_scan_dice(const std::vector<ScanScore>& scores)
{
    if (scores.empty()) return 0.0;
    double acc = 0;
    std::size_t n = 0;
    for (const auto& s : scores)
        if (!s.empty_truth) {
            acc += s.dice;
            ++n;
        }
    if (n > 0) return acc / static_cast<double>(n);
    for (const auto& s : scores) acc += s.dice;
    return acc / static_cast<double>(scores.size());
}

struct EpochLog {
    std::size_t epoch = 0;
    double train_loss = 0;
    double val_dice = 0;
};

template <typename T>
struct TrainResult {
    ModelParams<T> params;
    std::size_t best_epoch = 0;
    double best_val_dice = 0;
    std::vector<EpochLog> log;
};

using EpochCallback = std::function<void(const EpochLog&)>;

/// Trains on train, selects on val. Shuffling, init and any sampling derive
/// from cfg.seed.
template <typename T = float>
TrainResult<T> train(const std::vector<SliceSample>& train_set, const std::vector<SliceSample>& val_set,
                     const TrainConfig& cfg, const EpochCallback& on_epoch = {})
{
    cfg.validate();
    if (train_set.empty() || val_set.empty())
        throw ValidationError("train: empty training or validation set");
    cfg.topology.validate(train_set.front().image.rows);
    const FlushDenormals ftz;

    TrainResult<T> result;
    ModelParams<T> params = init_params<T>(cfg.topology, derive_seed(cfg.seed, "init"));
    AdamState state(params.values.size());
    Workspace<T> ws;
    std::vector<std::size_t> order(train_set.size());
    result.best_val_dice = -1.0;

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng rng(derive_seed(cfg.seed, "shuffle", epoch));
        rng.shuffle(order);

        double loss_sum = 0;
        std::size_t seen = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t n = std::min(cfg.batch_size, order.size() - start);
            const auto batch = make_batch<T>(train_set, std::span<const std::size_t>(order).subspan(start, n));
            auto g = gradients<T>(params, batch, cfg.pos_weight, ws);
            adam_step<T>(params.values, g.grad, state, cfg.adam);
            loss_sum += g.loss * static_cast<double>(n);
            seen += n;
        }
        for (const T& v : params.values)
            if (!std::isfinite(v)) throw NumericalError("non-finite parameter after epoch " + std::to_string(epoch));

        EpochLog entry;
        entry.epoch = epoch;
        entry.train_loss = loss_sum / static_cast<double>(seen);
        entry.val_dice = mean_scan_dice(score_by_scan(val_set, predict(params, val_set, cfg.prediction_threshold)));
        result.log.push_back(entry);
        if (on_epoch) on_epoch(entry);
        if (entry.val_dice > result.best_val_dice) {
            result.best_val_dice = entry.val_dice;
            result.best_epoch = epoch;
            result.params = params;
        }
    }
    return result;
}

/// Splits samples by group, then trains.
template <typename T = float>
TrainResult<T> train(const std::vector<SliceSample>& samples, const TrainConfig& cfg, const EpochCallback& on_epoch = {})
{
    const auto split = split_grouped(samples, cfg.split_ratio, derive_seed(cfg.seed, "split"));
    return train<T>(split.train, split.val, cfg, on_epoch);
}

// Checkpoint: <path> holds JSON metadata, <path>.bin (or the "payload"
// entry) the parameters as little-endian float32 in ModelParams order.
inline std::uint32_t swap32(std::uint32_t v)
{
    return (v >> 24) | ((v >> 8) & 0xff00u) | ((v << 8) & 0xff0000u) | (v << 24);
}

struct CheckpointMeta {
    TrainConfig config;
    std::size_t epoch = 0;
    double val_dice = 0;
    nlohmann::json preprocess = nlohmann::json::object();  // how inputs were prepared; opaque here
};

inline void save_checkpoint(const std::filesystem::path& path, const ModelParams<float>& p, const CheckpointMeta& meta)
{
    auto payload = path;
    payload += ".bin";
    nlohmann::json j;
    j["topology"] = to_json(p.network.topology());
    j["config"] = to_json(meta.config);
    j["epoch"] = meta.epoch;
    j["val_dice"] = meta.val_dice;
    j["preprocess"] = meta.preprocess;
    j["param_count"] = p.values.size();
    j["payload"] = payload.filename().string();
    j["dtype"] = "float32";
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    {
        std::ofstream os(path);
        os << j.dump(2) << '\n';
        if (!os) throw DataError("cannot write checkpoint " + path.string());
    }
    std::ofstream os(payload, std::ios::binary);
    for (float f : p.values) {
        auto bits = std::bit_cast<std::uint32_t>(f);
        if constexpr (std::endian::native == std::endian::big) bits = swap32(bits);
        os.write(reinterpret_cast<const char*>(&bits), 4);
    }
    if (!os) throw DataError("cannot write checkpoint payload " + payload.string());
}

inline std::pair<ModelParams<float>, CheckpointMeta> load_checkpoint(const std::filesystem::path& path)
{
    std::ifstream is(path);
    if (!is) throw DataError("cannot open checkpoint " + path.string());
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("bad checkpoint json " + path.string() + ": " + e.what());
    }
    CheckpointMeta meta;
    ModelParams<float> p;
    try {
        meta.config = train_config_from_json(j.at("config"));
        meta.epoch = j.value("epoch", std::size_t{0});
        meta.val_dice = j.value("val_dice", 0.0);
        if (j.contains("preprocess")) meta.preprocess = j["preprocess"];
        p = ModelParams<float>(topology_from_json(j.at("topology")));
    } catch (const nlohmann::json::exception& e) {
        throw DataError("bad checkpoint json " + path.string() + ": " + e.what());
    }
    const auto payload = path.parent_path() / j.value("payload", path.filename().string() + ".bin");
    std::ifstream bs(payload, std::ios::binary);
    if (!bs) throw DataError("cannot open checkpoint payload " + payload.string());
    for (auto& f : p.values) {
        std::uint32_t bits;
        bs.read(reinterpret_cast<char*>(&bits), 4);
        if constexpr (std::endian::native == std::endian::big) bits = swap32(bits);
        f = std::bit_cast<float>(bits);
    }
    if (!bs) throw DataError("checkpoint payload too short: " + payload.string());
    if (bs.peek() != std::char_traits<char>::eof()) throw DataError("checkpoint payload too long: " + payload.string());
    return {std::move(p), meta};
}

} // namespace msgen::segnet
