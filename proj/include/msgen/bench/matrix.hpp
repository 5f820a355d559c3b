#pragma once

// Cross-dataset experiment matrix: train on each training key, test on
// every disjoint test key, persist rows as they finish.
//
// Seed chain for one row: the training seed is
// derive_seed(seed, "row:" + train_key); segnet derives "split", "init" and
// "shuffle" from it. Normalization and topology do not enter the chain, so
// ablation rows sharing (train_key, seed) share split, init and batch order.

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "msgen/bench/manifest.hpp"
#include "msgen/error.hpp"
#include "msgen/harmonize.hpp"
#include "msgen/metrics.hpp"
#include "msgen/rng.hpp"
#include "msgen/segnet/train.hpp"
#include "msgen/slicer.hpp"

namespace msgen::bench {

enum class Normalization { quantile, linear };

inline const char* to_string(Normalization n) { return n == Normalization::quantile ? "quantile" : "linear"; }

inline Normalization parse_normalization(const std::string& s)
{
    if (s == "quantile") return Normalization::quantile;
    if (s == "linear") return Normalization::linear;
    throw ValidationError("unknown normalization '" + s + "' (expected quantile or linear)");
}

using DatasetKey = std::vector<std::string>;  // sorted dataset ids

inline std::string key_string(const DatasetKey& k)
{
    std::string s;
    for (const auto& id : k) s += (s.empty() ? "" : "+") + id;
    return s;
}

inline DatasetKey parse_key(const std::string& s)
{
    DatasetKey k;
    std::string part;
    std::istringstream in(s);
    while (std::getline(in, part, '+'))
        if (!part.empty()) k.push_back(part);
    std::sort(k.begin(), k.end());
    return k;
}

inline bool disjoint(const DatasetKey& a, const DatasetKey& b)
{
    for (const auto& x : a)
        if (std::find(b.begin(), b.end(), x) != b.end()) return false;
    return true;
}

struct ExperimentSpec {
    std::string name = "matrix";
    std::vector<std::filesystem::path> datasets;  // manifest files
    std::vector<DatasetKey> train_sets;           // empty: every dataset alone
    std::vector<DatasetKey> test_sets;            // empty: every dataset disjoint from the train key
    std::vector<Normalization> normalizations{Normalization::quantile};
    std::vector<segnet::SkipKind> topologies{segnet::SkipKind::nested_dense};
    std::vector<std::uint64_t> seeds{0};
    segnet::TrainConfig train;
    std::size_t slice_side = default_slice_side;
    std::size_t min_brain_voxels = 1;
    std::size_t template_resolution = default_template_resolution;
    std::string label_source = default_label_source;
    std::string template_source = "train";  // "train" or a saved template file
    bool save_checkpoints = true;

    void validate() const
    {
        if (datasets.empty()) throw ValidationError("experiment: no datasets");
        if (normalizations.empty() || topologies.empty() || seeds.empty())
            throw ValidationError("experiment: normalization, topology and seed lists must be nonempty");
        if (slice_side == 0) throw ValidationError("experiment: slice_side must be positive");
        if (template_source.empty()) throw ValidationError("experiment: empty template_source");
        train.validate();
    }
};

inline nlohmann::json to_json(const ExperimentSpec& s)
{
    nlohmann::json j;
    j["name"] = s.name;
    j["datasets"] = nlohmann::json::array();
    for (const auto& d : s.datasets) j["datasets"].push_back(d.generic_string());
    auto keys = [](const std::vector<DatasetKey>& v) {
        nlohmann::json a = nlohmann::json::array();
        for (const auto& k : v) a.push_back(key_string(k));
        return a;
    };
    j["train_sets"] = keys(s.train_sets);
    j["test_sets"] = keys(s.test_sets);
    for (auto n : s.normalizations) j["normalization"].push_back(to_string(n));
    for (auto t : s.topologies) j["topology"].push_back(segnet::to_string(t));
    j["seeds"] = s.seeds;
    j["train"] = segnet::to_json(s.train);
    j["slice_side"] = s.slice_side;
    j["min_brain_voxels"] = s.min_brain_voxels;
    j["template_resolution"] = s.template_resolution;
    j["label_source"] = s.label_source;
    j["template_source"] = s.template_source;
    j["save_checkpoints"] = s.save_checkpoints;
    return j;
}

/// Relative dataset paths resolve against base (the experiment file's directory).
inline ExperimentSpec experiment_from_json(const nlohmann::json& j, const std::filesystem::path& base = {},
                                           ExperimentSpec s = {})
{
    auto strings = [](const nlohmann::json& v) {
        std::vector<std::string> out;
        if (v.is_string())
            out.push_back(v.get<std::string>());
        else
            for (const auto& x : v) out.push_back(x.get<std::string>());
        return out;
    };
    auto keys = [](const nlohmann::json& v) {
        std::vector<DatasetKey> out;
        for (const auto& x : v) {
            if (x.is_string()) {
                out.push_back(parse_key(x.get<std::string>()));
            } else {
                auto k = x.get<std::vector<std::string>>();
                std::sort(k.begin(), k.end());
                out.push_back(k);
            }
        }
        return out;
    };
    try {
        s.name = j.value("name", s.name);
        if (j.contains("datasets")) {
            s.datasets.clear();
            for (const auto& d : strings(j["datasets"])) {
                std::filesystem::path p(d);
                s.datasets.push_back(p.is_relative() && !base.empty() ? base / p : p);
            }
        }
        if (j.contains("train_sets")) s.train_sets = keys(j["train_sets"]);
        if (j.contains("test_sets")) s.test_sets = keys(j["test_sets"]);
        if (j.contains("normalization")) {
            s.normalizations.clear();
            for (const auto& n : strings(j["normalization"])) s.normalizations.push_back(parse_normalization(n));
        }
        if (j.contains("topology")) {
            s.topologies.clear();
            for (const auto& t : strings(j["topology"])) s.topologies.push_back(segnet::parse_skip_kind(t));
        }
        if (j.contains("seeds"))
            s.seeds = j["seeds"].get<std::vector<std::uint64_t>>();
        else if (j.contains("seed"))
            s.seeds = {j["seed"].get<std::uint64_t>()};
        if (j.contains("train")) s.train = segnet::train_config_from_json(j["train"], s.train);
        s.slice_side = j.value("slice_side", s.slice_side);
        s.min_brain_voxels = j.value("min_brain_voxels", s.min_brain_voxels);
        s.template_resolution = j.value("template_resolution", s.template_resolution);
        s.label_source = j.value("label_source", s.label_source);
        if (j.contains("template_source")) {
            s.template_source = j["template_source"].get<std::string>();
            std::filesystem::path p(s.template_source);
            if (s.template_source != "train" && p.is_relative() && !base.empty())
                s.template_source = (base / p).string();
        }
        s.save_checkpoints = j.value("save_checkpoints", s.save_checkpoints);
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("bad experiment spec: ") + e.what());
    }
    s.validate();
    return s;
}

struct ResultRow {
    std::string train_key;
    std::string test_key;
    std::string normalization;
    std::string topology;
    std::uint64_t seed = 0;
    double dice = 0;
    double iou = 0;
    std::size_t n_scans_evaluated = 0;
    std::size_t n_scans_excluded = 0;
    std::map<std::string, double> per_center;
    std::vector<ScanScore> scans;  // empty for rows read back from disk

    [[nodiscard]] std::string key() const
    {
        return train_key + "|" + test_key + "|" + normalization + "|" + topology + "|" + std::to_string(seed);
    }
};

inline constexpr const char* results_header =
    "train_key,test_key,normalization,topology,seed,dice,iou,n_scans_evaluated,n_scans_excluded";
inline constexpr const char* scores_header =
    "train_key,test_key,normalization,topology,seed,patient_id,scan_id,center_tag,dice,iou,tp,fp,fn,tn,excluded";
inline constexpr const char* per_center_header = "train_key,test_key,normalization,topology,seed,center_tag,dice,n_scans";

inline std::string format_double(double v)
{
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string csv_line(const ResultRow& r)
{
    return r.train_key + "," + r.test_key + "," + r.normalization + "," + r.topology + "," + std::to_string(r.seed) + ","
           + format_double(r.dice) + "," + format_double(r.iou) + "," + std::to_string(r.n_scans_evaluated) + ","
           + std::to_string(r.n_scans_excluded);
}

inline std::vector<std::string> split_csv(const std::string& line)
{
    std::vector<std::string> out;
    std::string field;
    std::istringstream in(line);
    while (std::getline(in, field, ',')) out.push_back(field);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

inline ResultRow parse_result_line(const std::string& line)
{
    const auto f = split_csv(line);
    if (f.size() != 9) throw DataError("results csv: expected 9 fields, got " + std::to_string(f.size()) + ": " + line);
    ResultRow r;
    try {
        r.train_key = f[0];
        r.test_key = f[1];
        r.normalization = f[2];
        r.topology = f[3];
        r.seed = std::stoull(f[4]);
        r.dice = std::stod(f[5]);
        r.iou = std::stod(f[6]);
        r.n_scans_evaluated = std::stoul(f[7]);
        r.n_scans_excluded = std::stoul(f[8]);
    } catch (const std::exception&) {
        throw DataError("results csv: malformed row: " + line);
    }
    if (!(r.dice >= 0 && r.dice <= 1 && r.iou >= 0 && r.iou <= 1))
        throw DataError("results csv: dice/iou outside [0,1]: " + line);
    return r;
}

inline std::vector<ResultRow> read_results(const std::filesystem::path& path)
{
    std::vector<ResultRow> rows;
    std::ifstream in(path);
    if (!in) return rows;
    std::string line;
    bool header = true;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (header) {
            header = false;
            if (line != results_header) throw DataError("results csv " + path.string() + ": unexpected header");
            continue;
        }
        rows.push_back(parse_result_line(line));
    }
    return rows;
}

/// per_center.csv as row key -> (center_tag -> dice).
inline std::map<std::string, std::map<std::string, double>> read_per_center(const std::filesystem::path& path)
{
    std::map<std::string, std::map<std::string, double>> out;
    std::ifstream in(path);
    std::string line;
    bool header = true;
    while (std::getline(in, line)) {
        if (header || line.empty()) {
            header = false;
            continue;
        }
        const auto f = split_csv(line);
        if (f.size() != 8) throw DataError("per_center csv: malformed row: " + line);
        try {
            out[f[0] + "|" + f[1] + "|" + f[2] + "|" + f[3] + "|" + f[4]][f[5]] = std::stod(f[6]);
        } catch (const std::exception&) {
            throw DataError("per_center csv: malformed row: " + line);
        }
    }
    return out;
}

/// Unweighted mean Dice per center over scans with nonempty truth; untagged
/// scans form the group "untagged".
inline std::map<std::string, double> per_center_breakdown(std::span<const ScanScore> scores)
{
    std::map<std::string, std::pair<double, std::size_t>> acc;
    for (const auto& s : scores) {
        if (s.empty_truth) continue;
        auto& [sum, n] = acc[s.center_tag.empty() ? "untagged" : s.center_tag];
        sum += s.dice;
        ++n;
    }
    std::map<std::string, double> out;
    for (const auto& [tag, v] : acc) out[tag] = v.first / static_cast<double>(v.second);
    return out;
}

// Preprocessing shared by training and evaluation.

inline Volume normalize_volume(const Volume& v, Normalization n, const IntensityTemplate* t)
{
    if (n == Normalization::linear) return linear_normalize(v);
    if (t == nullptr) throw ValidationError("quantile normalization needs a template");
    return quantile_normalize(v, *t);
}

inline std::vector<SliceSample> prepare_scan(const LoadedScan& s, Normalization n, const IntensityTemplate* t,
                                             std::size_t side, std::size_t min_brain_voxels)
{
    return extract_slices(normalize_volume(s.image, n, t), s.truth, min_brain_voxels, side);
}

/// Scores one scan: predicts its slices and pools counts.
inline ScanScore evaluate_scan(const segnet::ModelParams<float>& params, const LoadedScan& s, Normalization n,
                               const IntensityTemplate* t, std::size_t side, std::size_t min_brain_voxels,
                               double threshold)
{
    const auto slices = prepare_scan(s, n, t, side, min_brain_voxels);
    const auto preds = segnet::predict(params, slices, threshold);
    std::vector<Mask2D> truth;
    truth.reserve(slices.size());
    for (const auto& sl : slices) truth.push_back(sl.mask);
    auto score = scan_score(preds, truth, s.image.provenance.scan_id);
    score.center_tag = s.center_tag;
    return score;
}

struct MatrixOptions {
    std::size_t jobs = 1;
    bool resume = true;
    bool verbose = false;
};

namespace detail {

struct Job {
    DatasetKey train;
    std::vector<DatasetKey> tests;
    Normalization normalization;
    segnet::SkipKind topology;
    std::uint64_t seed;
};

inline std::string job_name(const Job& j)
{
    return key_string(j.train) + "__" + to_string(j.normalization) + "__" + segnet::to_string(j.topology) + "__s"
           + std::to_string(j.seed);
}

class ResultSink {
public:
    explicit ResultSink(const std::filesystem::path& dir) : dir_(dir)
    {
        std::filesystem::create_directories(dir_);
        ensure_header(dir_ / "results.csv", results_header);
        ensure_header(dir_ / "scores.csv", scores_header);
        ensure_header(dir_ / "per_center.csv", per_center_header);
    }

    // Detail rows go first; the results row is written last so a row
    // present in results.csv always has its details on disk.
    void write(const ResultRow& r)
    {
        std::string scores, centers;
        const std::string prefix = r.train_key + "," + r.test_key + "," + r.normalization + "," + r.topology + ","
                                   + std::to_string(r.seed) + ",";
        for (const auto& s : r.scans)
            scores += prefix + s.patient_id + "," + s.scan_id + "," + s.center_tag + "," + format_double(s.dice) + ","
                      + format_double(s.iou) + "," + std::to_string(s.counts.tp) + "," + std::to_string(s.counts.fp)
                      + "," + std::to_string(s.counts.fn) + "," + std::to_string(s.counts.tn) + ","
                      + (s.empty_truth ? "1" : "0") + "\n";
        std::map<std::string, std::size_t> counts;
        for (const auto& s : r.scans)
            if (!s.empty_truth) ++counts[s.center_tag.empty() ? "untagged" : s.center_tag];
        for (const auto& [tag, d] : r.per_center)
            centers += prefix + tag + "," + format_double(d) + "," + std::to_string(counts[tag]) + "\n";
        const std::lock_guard lock(mutex_);
        append(dir_ / "scores.csv", scores);
        append(dir_ / "per_center.csv", centers);
        append(dir_ / "results.csv", csv_line(r) + "\n");
    }

    /// Drops detail rows whose results row never landed (interrupted job).
    void prune_orphans(const std::set<std::string>& done)
    {
        for (const char* file : {"scores.csv", "per_center.csv"}) {
            const auto path = dir_ / file;
            std::ifstream in(path);
            std::string line, kept;
            bool header = true;
            while (std::getline(in, line)) {
                if (header) {
                    kept += line + "\n";
                    header = false;
                    continue;
                }
                const auto f = split_csv(line);
                if (f.size() < 5) continue;
                const auto key = f[0] + "|" + f[1] + "|" + f[2] + "|" + f[3] + "|" + f[4];
                if (done.contains(key)) kept += line + "\n";
            }
            in.close();
            std::ofstream out(path, std::ios::trunc);
            out << kept;
        }
    }

private:
    static void ensure_header(const std::filesystem::path& p, const char* header)
    {
        if (std::filesystem::exists(p) && std::filesystem::file_size(p) > 0) return;
        std::ofstream out(p);
        out << header << "\n";
    }

    static void append(const std::filesystem::path& p, const std::string& text)
    {
        if (text.empty()) return;
        std::ofstream out(p, std::ios::app | std::ios::binary);
        out.write(text.data(), static_cast<std::streamsize>(text.size()));
        out.flush();
        if (!out) throw DataError("cannot append to " + p.string());
    }

    std::filesystem::path dir_;
    std::mutex mutex_;
};

} // namespace detail

/// The (train, test) pairs a spec expands to, in canonical order.
inline std::vector<std::pair<DatasetKey, std::vector<DatasetKey>>> expand_pairs(const ExperimentSpec& spec,
                                                                                const std::vector<std::string>& ids)
{
    auto trains = spec.train_sets;
    if (trains.empty())
        for (const auto& id : ids) trains.push_back({id});
    std::set<std::string> known(ids.begin(), ids.end());
    auto check_known = [&](const DatasetKey& k) {
        if (k.empty()) throw ValidationError("experiment: empty dataset key");
        for (const auto& id : k)
            if (!known.contains(id)) throw ValidationError("experiment: unknown dataset '" + id + "'");
    };
    std::vector<std::pair<DatasetKey, std::vector<DatasetKey>>> out;
    for (const auto& train : trains) {
        check_known(train);
        std::vector<DatasetKey> tests;
        if (spec.test_sets.empty()) {
            for (const auto& id : ids)
                if (disjoint(train, {id})) tests.push_back({id});
        } else {
            for (const auto& test : spec.test_sets) {
                check_known(test);
                if (!disjoint(train, test))
                    throw ValidationError("train set " + key_string(train) + " overlaps test set " + key_string(test));
                tests.push_back(test);
            }
        }
        if (tests.empty()) throw ValidationError("train set " + key_string(train) + " has no disjoint test set");
        out.emplace_back(train, std::move(tests));
    }
    return out;
}

/// Runs every (train_key, test_key, normalization, topology, seed) row,
/// appending each to out_dir/results.csv as it completes. With
/// opts.resume, rows already in results.csv are kept and not recomputed.
/// Returns all rows of the spec in canonical order.
inline std::vector<ResultRow> run_matrix(const ExperimentSpec& spec, const std::filesystem::path& out_dir,
                                         const MatrixOptions& opts = {})
{
    spec.validate();
    std::vector<DatasetManifest> manifests;
    std::map<std::string, std::size_t> by_id;
    for (const auto& path : spec.datasets) {
        manifests.push_back(load_manifest(path));
        const auto& id = manifests.back().dataset_id;
        if (id.find_first_of("+,|\"") != std::string::npos)
            throw ValidationError("dataset_id '" + id + "' may not contain + , | or quotes");
        if (!by_id.emplace(id, manifests.size() - 1).second) throw ValidationError("duplicate dataset_id " + id);
    }
    for (const auto& m : manifests)
        for (const auto& e : m.entries) {
            if (!std::filesystem::exists(e.image)) throw DataError("missing image " + e.image.string());
            for (const auto& [rater, p] : e.masks)
                if (!std::filesystem::exists(p)) throw DataError("missing mask " + p.string());
        }
    std::vector<std::string> ids;
    for (const auto& m : manifests) ids.push_back(m.dataset_id);
    std::optional<IntensityTemplate> fixed_template;
    if (spec.template_source != "train") fixed_template = load_template(spec.template_source);

    std::vector<detail::Job> jobs;
    for (const auto& [train, tests] : expand_pairs(spec, ids))
        for (auto n : spec.normalizations)
            for (auto t : spec.topologies)
                for (auto seed : spec.seeds) jobs.push_back({train, tests, n, t, seed});

    std::filesystem::create_directories(out_dir);
    {
        std::ofstream out(out_dir / "experiment.json");
        out << to_json(spec).dump(2) << "\n";
    }
    std::map<std::string, ResultRow> done;
    if (opts.resume) {
        for (auto& r : read_results(out_dir / "results.csv")) done.emplace(r.key(), std::move(r));
        for (auto& [key, centers] : read_per_center(out_dir / "per_center.csv"))
            if (auto it = done.find(key); it != done.end()) it->second.per_center = std::move(centers);
    } else {
        for (const char* f : {"results.csv", "scores.csv", "per_center.csv"}) std::filesystem::remove(out_dir / f);
    }
    detail::ResultSink sink(out_dir);
    {
        std::set<std::string> keys;
        for (const auto& [k, r] : done) keys.insert(k);
        sink.prune_orphans(keys);
    }

    auto row_for = [](const detail::Job& j, const DatasetKey& test) {
        ResultRow r;
        r.train_key = key_string(j.train);
        r.test_key = key_string(test);
        r.normalization = to_string(j.normalization);
        r.topology = segnet::to_string(j.topology);
        r.seed = j.seed;
        return r;
    };

    auto load_all = [&](const DatasetKey& key) {
        std::vector<LoadedScan> scans;
        for (const auto& id : key) {
            const auto& m = manifests[by_id.at(id)];
            for (const auto& e : m.entries) scans.push_back(load_scan(m, e, spec.label_source));
        }
        return scans;
    };

    std::vector<std::vector<ResultRow>> produced(jobs.size());
    auto run_job = [&](std::size_t index) {
        const auto& job = jobs[index];
        std::vector<DatasetKey> todo;
        for (const auto& test : job.tests)
            if (!done.contains(row_for(job, test).key())) todo.push_back(test);
        if (todo.empty()) return;

        auto train_scans = load_all(job.train);
        std::optional<IntensityTemplate> tmpl;
        if (job.normalization == Normalization::quantile && fixed_template) {
            tmpl = fixed_template;
        } else if (job.normalization == Normalization::quantile) {
            std::vector<Volume> vols;
            for (const auto& s : train_scans) vols.push_back(s.image);
            tmpl = build_template(vols, spec.template_resolution);
        }
        const IntensityTemplate* tp = tmpl ? &*tmpl : nullptr;
        std::vector<SliceSample> samples;
        std::set<std::string> train_scan_ids, train_images;
        for (const auto& s : train_scans) {
            auto sl = prepare_scan(s, job.normalization, tp, spec.slice_side, spec.min_brain_voxels);
            samples.insert(samples.end(), std::make_move_iterator(sl.begin()), std::make_move_iterator(sl.end()));
            train_scan_ids.insert(s.image.provenance.dataset_id + "/" + s.image.provenance.patient_id + "/"
                                  + s.image.provenance.scan_id);
        }
        for (const auto& id : job.train)
            for (const auto& e : manifests[by_id.at(id)].entries)
                train_images.insert(std::filesystem::weakly_canonical(e.image).string());
        train_scans.clear();
        if (samples.empty()) throw DataError("training set " + key_string(job.train) + " yields no slices");

        auto cfg = spec.train;
        cfg.topology.kind = job.topology;
        cfg.seed = derive_seed(job.seed, "row:" + key_string(job.train));
        const auto name = detail::job_name(job);
        std::vector<segnet::EpochLog> log;
        auto result = segnet::train<float>(samples, cfg, [&](const segnet::EpochLog& e) {
            log.push_back(e);
            if (opts.verbose) {
                std::ostringstream msg;
                msg << name << " epoch " << e.epoch << " loss " << e.train_loss << " val_dice " << e.val_dice << "\n";
                std::fputs(msg.str().c_str(), stderr);
            }
        });
        samples.clear();
        samples.shrink_to_fit();
        {
            std::filesystem::create_directories(out_dir / "logs");
            std::ofstream out(out_dir / "logs" / (name + ".csv"));
            out << "epoch,train_loss,val_dice\n";
            for (const auto& e : log)
                out << e.epoch << "," << format_double(e.train_loss) << "," << format_double(e.val_dice) << "\n";
        }
        if (spec.save_checkpoints) {
            std::filesystem::create_directories(out_dir / "models");
            segnet::CheckpointMeta meta;
            meta.config = cfg;
            meta.epoch = result.best_epoch;
            meta.val_dice = result.best_val_dice;
            meta.preprocess = {{"normalization", to_string(job.normalization)},
                               {"slice_side", spec.slice_side},
                               {"min_brain_voxels", spec.min_brain_voxels}};
            if (tmpl) {
                save_template(*tmpl, out_dir / "models" / (name + ".template.json"));
                meta.preprocess["template"] = name + ".template.json";
            }
            segnet::save_checkpoint(out_dir / "models" / (name + ".json"), result.params, meta);
        }

        for (const auto& test : todo) {
            std::vector<ScanScore> scores;
            for (const auto& id : test) {
                const auto& m = manifests[by_id.at(id)];
                for (const auto& e : m.entries) {
                    // leakage guard: no test scan or image may have been trained on
                    if (train_images.contains(std::filesystem::weakly_canonical(e.image).string()))
                        throw ValidationError("leakage: image " + e.image.string() + " is in both train and test");
                    const auto s = load_scan(m, e, spec.label_source);
                    const auto key = s.image.provenance.dataset_id + "/" + s.image.provenance.patient_id + "/"
                                     + s.image.provenance.scan_id;
                    if (train_scan_ids.contains(key))
                        throw ValidationError("leakage: scan " + key + " is in both train and test");
                    auto score = evaluate_scan(result.params, s, job.normalization, tp, spec.slice_side,
                                               spec.min_brain_voxels, cfg.prediction_threshold);
                    score.patient_id = s.image.provenance.patient_id;
                    scores.push_back(std::move(score));
                }
            }
            auto row = row_for(job, test);
            const auto ds = dataset_score(scores);
            row.dice = ds.dice;
            row.iou = ds.iou;
            row.n_scans_evaluated = ds.n_evaluated;
            row.n_scans_excluded = ds.n_excluded;
            row.per_center = per_center_breakdown(scores);
            row.scans = std::move(scores);
            sink.write(row);
            produced[index].push_back(std::move(row));
        }
    };

    const std::size_t workers = std::max<std::size_t>(1, std::min(opts.jobs, jobs.size()));
    std::atomic<std::size_t> next{0};
    std::mutex error_mutex;
    std::exception_ptr first_error;
    auto worker = [&] {
        for (std::size_t i = next++; i < jobs.size(); i = next++) {
            try {
                run_job(i);
            } catch (...) {
                const std::lock_guard lock(error_mutex);
                if (!first_error) first_error = std::current_exception();
                next = jobs.size();
            }
        }
    };
    if (workers == 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
    }
    if (first_error) std::rethrow_exception(first_error);

    std::vector<ResultRow> rows;
    for (std::size_t i = 0; i < jobs.size(); ++i) {
        std::map<std::string, ResultRow> fresh;
        for (auto& r : produced[i]) fresh.emplace(r.key(), std::move(r));
        for (const auto& test : jobs[i].tests) {
            const auto key = row_for(jobs[i], test).key();
            if (auto it = fresh.find(key); it != fresh.end())
                rows.push_back(std::move(it->second));
            else
                rows.push_back(done.at(key));
        }
    }
    return rows;
}

} // namespace msgen::bench
