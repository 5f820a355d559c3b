// msgen command-line tool.
//
// Exit codes: 0 ok, 2 validation error, 3 data error, 4 numerical failure.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "msgen/bench/manifest.hpp"
#include "msgen/bench/matrix.hpp"
#include "msgen/bench/phantom.hpp"
#include "msgen/bench/png.hpp"
#include "msgen/bench/report.hpp"
#include "msgen/error.hpp"
#include "msgen/harmonize.hpp"
#include "msgen/metrics.hpp"
#include "msgen/nifti.hpp"
#include "msgen/segnet/train.hpp"
#include "msgen/slicer.hpp"
#include "msgen/stats/tests.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace msgen;
using namespace msgen::bench;

namespace {

struct Globals {
    std::optional<std::uint64_t> seed;
    std::string config;
    std::string out;
    std::size_t jobs = 1;

    [[nodiscard]] json config_json() const
    {
        if (config.empty()) return json::object();
        std::ifstream in(config);
        if (!in) throw DataError("cannot open config " + config);
        try {
            return json::parse(in);
        } catch (const json::exception& e) {
            throw ValidationError("config " + config + " is not valid JSON: " + e.what());
        }
    }
    [[nodiscard]] fs::path out_or(const char* fallback) const { return out.empty() ? fs::path(fallback) : fs::path(out); }
};

void print_json(const json& j) { std::cout << j.dump(2) << "\n"; }

void write_json(const fs::path& path, const json& j)
{
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    out << j.dump(2) << "\n";
}

// CSV with a header row; fields by column name.
std::vector<std::map<std::string, std::string>> read_table(const fs::path& path)
{
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    std::vector<std::map<std::string, std::string>> rows;
    std::vector<std::string> header;
    for (std::string line; std::getline(in, line);) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        auto f = split_csv(line);
        if (header.empty()) {
            header = std::move(f);
            continue;
        }
        if (f.size() != header.size()) throw DataError(path.string() + ": row has the wrong number of fields: " + line);
        std::map<std::string, std::string> row;
        for (std::size_t i = 0; i < f.size(); ++i) row[header[i]] = f[i];
        rows.push_back(std::move(row));
    }
    return rows;
}

const std::string& field(const std::map<std::string, std::string>& row, const std::string& col)
{
    const auto it = row.find(col);
    if (it == row.end()) throw ValidationError("missing column '" + col + "'");
    return it->second;
}

double number(const std::string& s)
{
    try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw DataError("not a number: '" + s + "'");
    }
}

std::vector<DatasetManifest> load_manifests(const std::vector<std::string>& paths)
{
    if (paths.empty()) throw ValidationError("no manifests given");
    std::vector<DatasetManifest> out;
    for (const auto& p : paths) out.push_back(load_manifest(p));
    return out;
}

// How a checkpoint expects its inputs to be prepared.
struct Preprocess {
    Normalization normalization = Normalization::quantile;
    std::size_t slice_side = default_slice_side;
    std::size_t min_brain_voxels = 1;
    std::optional<IntensityTemplate> tmpl;

    [[nodiscard]] const IntensityTemplate* template_ptr() const { return tmpl ? &*tmpl : nullptr; }
};

Preprocess read_preprocess(const segnet::CheckpointMeta& meta, const fs::path& model)
{
    Preprocess p;
    const auto& j = meta.preprocess;
    try {
        p.normalization = parse_normalization(j.value("normalization", std::string("quantile")));
        p.slice_side = j.value("slice_side", p.slice_side);
        p.min_brain_voxels = j.value("min_brain_voxels", p.min_brain_voxels);
        if (j.contains("template")) p.tmpl = load_template(model.parent_path() / j["template"].get<std::string>());
    } catch (const json::exception& e) {
        throw DataError("bad preprocess record in " + model.string() + ": " + e.what());
    }
    if (p.normalization == Normalization::quantile && !p.tmpl)
        throw DataError("model " + model.string() + " uses quantile normalization but names no template");
    return p;
}

// ---- subcommands ---------------------------------------------------------

int cmd_ingest(const std::vector<std::string>& manifests, bool load_images)
{
    json report = json::array();
    for (const auto& m : load_manifests(manifests)) {
        std::set<std::string> patients, centers, raters;
        std::size_t lesion_voxels = 0;
        json dims = json::array();
        for (const auto& e : m.entries) {
            patients.insert(e.patient_id);
            if (!e.center_tag.empty()) centers.insert(e.center_tag);
            for (const auto& [r, p] : e.masks) {
                raters.insert(r);
                if (!fs::exists(p)) throw DataError("missing mask " + p.string());
            }
            if (!fs::exists(e.image)) throw DataError("missing image " + e.image.string());
            if (load_images) {
                const auto s = load_scan(m, e);
                s.image.validate();
                lesion_voxels += s.truth.count_ones();
                const json d = {s.image.dims[0], s.image.dims[1], s.image.dims[2]};
                if (std::find(dims.begin(), dims.end(), d) == dims.end()) dims.push_back(d);
            }
        }
        json entry = {{"dataset_id", m.dataset_id},
                      {"scans", m.entries.size()},
                      {"patients", patients.size()},
                      {"centers", centers},
                      {"raters", raters},
                      {"heterogeneous", m.heterogeneous}};
        if (load_images) {
            entry["lesion_voxels"] = lesion_voxels;
            entry["dims"] = dims;
        }
        report.push_back(std::move(entry));
    }
    print_json(report);
    return 0;
}

int cmd_phantom(const Globals& g, std::size_t scans, std::size_t raters)
{
    const auto cfg = g.config_json();
    const std::uint64_t seed = g.seed.value_or(1);
    std::vector<PhantomProfile> sites;
    if (cfg.contains("sites")) {
        for (const auto& s : cfg["sites"]) {
            auto p = profile_from_json(s);
            if (!s.contains("seed")) p.seed = derive_seed(seed, p.site_id);
            sites.push_back(p);
        }
    } else {
        sites = default_phantom_suite(seed);
    }
    scans = cfg.value("scans_per_site", scans);
    for (auto& p : sites) {
        if (raters > 0) p.n_raters = raters;
        p.validate();
    }
    const auto dir = g.out_or("phantoms");
    json listing = json::array();
    for (const auto& m : generate_phantom_suite(sites, scans, dir))
        listing.push_back({{"dataset_id", m.dataset_id}, {"manifest", m.source.string()}, {"scans", m.entries.size()}});
    print_json(listing);
    return 0;
}

int cmd_normalize(const Globals& g, const std::vector<std::string>& inputs, const std::string& method,
                  const std::string& template_path, std::size_t resolution)
{
    if (inputs.empty()) throw ValidationError("normalize: no input volumes");
    const auto norm = parse_normalization(method);
    std::vector<Volume> vols;
    for (const auto& p : inputs) vols.push_back(load_volume(p));
    const auto dir = g.out_or("normalized");
    fs::create_directories(dir);
    std::optional<IntensityTemplate> tmpl;
    if (norm == Normalization::quantile) {
        if (!template_path.empty()) {
            tmpl = load_template(template_path);
        } else {
            tmpl = build_template(vols, resolution);
            save_template(*tmpl, dir / "template.json");
        }
    }
    json listing = json::array();
    for (std::size_t i = 0; i < vols.size(); ++i) {
        const auto out = normalize_volume(vols[i], norm, tmpl ? &*tmpl : nullptr);
        const auto path = dir / fs::path(inputs[i]).filename();
        save_volume(out, path);
        json e = {{"input", inputs[i]}, {"output", path.string()}};
        if (tmpl) e["ks_distance"] = ks_distance(out, *tmpl);
        listing.push_back(std::move(e));
    }
    print_json(listing);
    return 0;
}

struct TrainOptions {
    std::string normalization = "quantile";
    std::string topology = "nested_dense";
    std::optional<std::size_t> epochs, batch_size, depth, channels;
    std::size_t slice_side = default_slice_side;
    std::size_t min_brain_voxels = 1;
    std::size_t template_resolution = default_template_resolution;
    std::string label_source = default_label_source;
    bool verbose = false;
};

int cmd_train(const Globals& g, const std::vector<std::string>& manifest_paths, const TrainOptions& o)
{
    const auto cfg_json = g.config_json();
    auto cfg = segnet::train_config_from_json(cfg_json.contains("train") ? cfg_json["train"] : cfg_json);
    cfg.topology.kind = segnet::parse_skip_kind(o.topology);
    if (o.epochs) cfg.epochs = *o.epochs;
    if (o.batch_size) cfg.batch_size = *o.batch_size;
    if (o.depth) cfg.topology.depth = *o.depth;
    if (o.channels) cfg.topology.base_channels = *o.channels;
    if (g.seed) cfg.seed = *g.seed;
    cfg.validate();
    const auto norm = parse_normalization(o.normalization);

    std::vector<LoadedScan> scans;
    for (const auto& m : load_manifests(manifest_paths))
        for (const auto& e : m.entries) scans.push_back(load_scan(m, e, o.label_source));
    std::optional<IntensityTemplate> tmpl;
    if (norm == Normalization::quantile) {
        std::vector<Volume> vols;
        for (const auto& s : scans) vols.push_back(s.image);
        tmpl = build_template(vols, o.template_resolution);
    }
    std::vector<SliceSample> samples;
    for (const auto& s : scans) {
        auto sl = prepare_scan(s, norm, tmpl ? &*tmpl : nullptr, o.slice_side, o.min_brain_voxels);
        samples.insert(samples.end(), std::make_move_iterator(sl.begin()), std::make_move_iterator(sl.end()));
    }
    scans.clear();
    if (samples.empty()) throw DataError("training data yields no slices");

    const auto dir = g.out_or("model");
    fs::create_directories(dir);
    std::ofstream log(dir / "log.csv");
    log << "epoch,train_loss,val_dice\n";
    const auto result = segnet::train<float>(samples, cfg, [&](const segnet::EpochLog& e) {
        log << e.epoch << "," << format_double(e.train_loss) << "," << format_double(e.val_dice) << "\n";
        log.flush();
        if (o.verbose)
            std::cerr << "epoch " << e.epoch << " loss " << e.train_loss << " val_dice " << e.val_dice << "\n";
    });
    segnet::CheckpointMeta meta;
    meta.config = cfg;
    meta.epoch = result.best_epoch;
    meta.val_dice = result.best_val_dice;
    meta.preprocess = {{"normalization", to_string(norm)},
                       {"slice_side", o.slice_side},
                       {"min_brain_voxels", o.min_brain_voxels},
                       {"label_source", o.label_source}};
    if (tmpl) {
        save_template(*tmpl, dir / "model.template.json");
        meta.preprocess["template"] = "model.template.json";
    }
    segnet::save_checkpoint(dir / "model.json", result.params, meta);
    print_json({{"model", (dir / "model.json").string()},
                {"best_epoch", result.best_epoch},
                {"best_val_dice", result.best_val_dice},
                {"slices", samples.size()}});
    return 0;
}

int cmd_evaluate(const Globals& g, const std::string& model, const std::vector<std::string>& manifest_paths,
                 const std::string& label_source, std::optional<double> threshold)
{
    const auto [params, meta] = segnet::load_checkpoint(model);
    const auto pre = read_preprocess(meta, model);
    const double t = threshold.value_or(meta.config.prediction_threshold);
    const auto dir = g.out_or("evaluation");
    fs::create_directories(dir);
    std::ofstream csv(dir / "scores.csv");
    csv << "dataset_id,patient_id,scan_id,center_tag,dice,iou,tp,fp,fn,tn,excluded\n";
    json summary = json::array();
    for (const auto& m : load_manifests(manifest_paths)) {
        std::vector<ScanScore> scores;
        for (const auto& e : m.entries) {
            const auto s = load_scan(m, e, label_source);
            auto score = evaluate_scan(params, s, pre.normalization, pre.template_ptr(), pre.slice_side,
                                       pre.min_brain_voxels, t);
            score.patient_id = e.patient_id;
            csv << m.dataset_id << "," << e.patient_id << "," << score.scan_id << "," << score.center_tag << ","
                << format_double(score.dice) << "," << format_double(score.iou) << "," << score.counts.tp << ","
                << score.counts.fp << "," << score.counts.fn << "," << score.counts.tn << ","
                << (score.empty_truth ? 1 : 0) << "\n";
            scores.push_back(std::move(score));
        }
        const auto ds = dataset_score(scores);
        summary.push_back({{"dataset_id", m.dataset_id},
                           {"dice", ds.dice},
                           {"iou", ds.iou},
                           {"n_scans_evaluated", ds.n_evaluated},
                           {"n_scans_excluded", ds.n_excluded},
                           {"per_center", per_center_breakdown(scores)}});
    }
    write_json(dir / "summary.json", summary);
    print_json(summary);
    return 0;
}

int cmd_matrix(const Globals& g, bool no_resume, bool verbose, bool with_report)
{
    if (g.config.empty()) throw ValidationError("matrix: --config <experiment.json> is required");
    auto spec = experiment_from_json(g.config_json(), fs::absolute(g.config).parent_path());
    if (g.seed) spec.seeds = {*g.seed};
    const auto dir = g.out_or("results");
    MatrixOptions opts;
    opts.jobs = std::max<std::size_t>(1, g.jobs);
    opts.resume = !no_resume;
    opts.verbose = verbose;
    const auto rows = run_matrix(spec, dir, opts);
    if (with_report) emit_report(rows, dir);
    json listing = json::array();
    for (const auto& r : rows)
        listing.push_back({{"train_key", r.train_key},
                           {"test_key", r.test_key},
                           {"normalization", r.normalization},
                           {"topology", r.topology},
                           {"seed", r.seed},
                           {"dice", r.dice},
                           {"iou", r.iou}});
    print_json(listing);
    return 0;
}

struct StatsOptions {
    std::string test;
    std::string input;
    std::string group_col = "group";
    std::string condition_col = "condition";
    std::string subject_col = "subject";
    std::string value_col = "value";
    std::string a_col = "a";
    std::string b_col = "b";
    std::string mode = "both";
};

int cmd_stats(const StatsOptions& o)
{
    const auto rows = read_table(o.input);
    if (rows.empty()) throw ValidationError("stats: " + o.input + " has no data rows");
    json out;
    if (o.test == "anova" || o.test == "tukey") {
        std::vector<std::string> names;
        std::map<std::string, stats::Samples> by_group;
        for (const auto& r : rows) {
            const auto& name = field(r, o.group_col);
            if (!by_group.contains(name)) names.push_back(name);
            by_group[name].push_back(number(field(r, o.value_col)));
        }
        std::vector<stats::Samples> groups;
        for (const auto& n : names) groups.push_back(by_group[n]);
        if (o.test == "anova") {
            out = stats::to_json(stats::one_way_anova(groups));
        } else {
            out = json::array();
            for (const auto& p : stats::tukey_hsd(groups)) {
                auto j = stats::to_json(p.test);
                j["first"] = names[p.first];
                j["second"] = names[p.second];
                j["mean_difference"] = p.mean_difference;
                out.push_back(std::move(j));
            }
        }
    } else if (o.test == "rm-anova") {
        std::vector<std::string> conditions, subjects;
        std::map<std::pair<std::string, std::string>, double> cells;
        for (const auto& r : rows) {
            const auto& c = field(r, o.condition_col);
            const auto& s = field(r, o.subject_col);
            if (std::find(conditions.begin(), conditions.end(), c) == conditions.end()) conditions.push_back(c);
            if (std::find(subjects.begin(), subjects.end(), s) == subjects.end()) subjects.push_back(s);
            if (!cells.emplace(std::pair{c, s}, number(field(r, o.value_col))).second)
                throw ValidationError("rm-anova: duplicate cell (" + c + ", " + s + ")");
        }
        std::vector<stats::Samples> table;
        for (const auto& c : conditions) {
            stats::Samples row;
            for (const auto& s : subjects) {
                const auto it = cells.find({c, s});
                if (it == cells.end()) throw ValidationError("rm-anova: missing cell (" + c + ", " + s + ")");
                row.push_back(it->second);
            }
            table.push_back(std::move(row));
        }
        out = stats::to_json(stats::rm_anova(table));
    } else if (o.test == "wilcoxon") {
        std::vector<std::pair<double, double>> pairs;
        for (const auto& r : rows) pairs.emplace_back(number(field(r, o.a_col)), number(field(r, o.b_col)));
        if (o.mode == "exact") {
            out = stats::to_json(stats::wilcoxon_signed_rank(pairs, stats::WilcoxonMode::exact));
        } else if (o.mode == "normal") {
            out = stats::to_json(stats::wilcoxon_signed_rank(pairs, stats::WilcoxonMode::normal_approx));
        } else {
            out = json::array();
            if (pairs.size() <= stats::wilcoxon_exact_max_n)
                out.push_back(stats::to_json(stats::wilcoxon_signed_rank(pairs, stats::WilcoxonMode::exact)));
            out.push_back(stats::to_json(stats::wilcoxon_signed_rank(pairs, stats::WilcoxonMode::normal_approx)));
        }
    } else {
        throw ValidationError("stats: unknown test '" + o.test + "'");
    }
    print_json(out);
    return 0;
}

std::vector<LabelVolume> load_masks(const std::vector<std::string>& paths)
{
    std::vector<LabelVolume> out;
    for (const auto& p : paths) out.push_back(load_label_volume(p));
    return out;
}

int cmd_agree(const std::vector<std::string>& masks, const std::string& consensus, const std::string& manifest)
{
    if (!manifest.empty()) {
        const auto m = load_manifest(manifest);
        std::vector<RaterAgreement> per_scan;
        json scans = json::array();
        for (const auto& e : m.entries) {
            std::vector<std::string> paths;
            for (const auto& [r, p] : e.masks)
                if (r != "consensus") paths.push_back(p.string());
            if (paths.size() < 2) continue;
            const auto raters = load_masks(paths);
            std::optional<LabelVolume> cons;
            if (auto it = e.masks.find("consensus"); it != e.masks.end()) cons = load_label_volume(it->second);
            const auto a = rater_agreement(raters, cons ? &*cons : nullptr);
            json j = {{"scan_id", e.scan_id}, {"pairwise_dice", a.pairwise_dice}};
            if (a.consensus_dice) j["consensus_dice"] = *a.consensus_dice;
            scans.push_back(std::move(j));
            per_scan.push_back(a);
        }
        if (per_scan.empty()) throw ValidationError("agree: no scan in " + manifest + " has two or more raters");
        const auto mean = mean_agreement(per_scan);
        json out = {{"dataset_id", m.dataset_id}, {"scans", scans}, {"pairwise_dice", mean.pairwise_dice}};
        if (mean.consensus_dice) out["consensus_dice"] = *mean.consensus_dice;
        print_json(out);
        return 0;
    }
    const auto raters = load_masks(masks);
    std::optional<LabelVolume> cons;
    if (!consensus.empty()) cons = load_label_volume(consensus);
    const auto a = rater_agreement(raters, cons ? &*cons : nullptr);
    json out = {{"pairwise_dice", a.pairwise_dice}};
    if (a.consensus_dice) out["consensus_dice"] = *a.consensus_dice;
    print_json(out);
    return 0;
}

int cmd_fuse(const Globals& g, const std::vector<std::string>& masks, const std::string& method, std::size_t k,
             const std::string& output)
{
    const auto raters = load_masks(masks);
    LabelVolume fused;
    if (method == "union")
        fused = fuse_union(raters);
    else if (method == "majority")
        fused = fuse_majority(raters, k == 0 ? raters.size() / 2 + 1 : k);
    else
        throw ValidationError("fuse: unknown method '" + method + "'");
    const fs::path path = output.empty() ? g.out_or(".") / "fused.nii.gz" : fs::path(output);
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    save_volume(fused, path);
    print_json({{"output", path.string()}, {"lesion_voxels", fused.count_ones()}});
    return 0;
}

struct OverlayOptions {
    std::string image, truth, pred, model, output;
    std::optional<std::size_t> z;
};

int cmd_overlay(const Globals& g, const OverlayOptions& o)
{
    if (o.image.empty() || o.truth.empty()) throw ValidationError("overlay: --image and --truth are required");
    if (o.pred.empty() == o.model.empty()) throw ValidationError("overlay: give exactly one of --pred or --model");
    const auto image = load_volume(o.image);
    const auto truth = load_label_volume(o.truth);
    validate_pair(image, truth);
    std::size_t z = 0;
    if (o.z) {
        z = *o.z;
        if (z >= image.dims[2]) throw ValidationError("overlay: slice index out of range");
    } else {
        // the plane with the most lesion voxels
        std::size_t best = 0;
        for (std::size_t k = 0; k < truth.dims[2]; ++k) {
            std::size_t n = 0;
            for (std::size_t y = 0; y < truth.dims[1]; ++y)
                for (std::size_t x = 0; x < truth.dims[0]; ++x) n += truth.at(x, y, k);
            if (n > best) {
                best = n;
                z = k;
            }
        }
    }
    Image2D plane;
    Mask2D pred_plane, truth_plane;
    if (!o.pred.empty()) {
        const auto pred = load_label_volume(o.pred);
        validate_pair(image, pred);
        const std::size_t ny = image.dims[1], nx = image.dims[0];
        plane = Image2D(ny, nx);
        pred_plane = Mask2D(ny, nx);
        truth_plane = Mask2D(ny, nx);
        for (std::size_t y = 0; y < ny; ++y)
            for (std::size_t x = 0; x < nx; ++x) {
                plane(y, x) = image.at(x, y, z);
                pred_plane(y, x) = pred.at(x, y, z);
                truth_plane(y, x) = truth.at(x, y, z);
            }
    } else {
        const auto [params, meta] = segnet::load_checkpoint(o.model);
        const auto pre = read_preprocess(meta, o.model);
        const auto slices =
            extract_slices(normalize_volume(image, pre.normalization, pre.template_ptr()), truth, 0, pre.slice_side);
        const auto it = std::find_if(slices.begin(), slices.end(), [&](const auto& s) { return s.provenance.z_index == z; });
        if (it == slices.end()) throw ValidationError("overlay: slice " + std::to_string(z) + " is empty");
        const std::vector<SliceSample> one = {*it};
        pred_plane = segnet::predict(params, one, meta.config.prediction_threshold)[0];
        plane = it->image;
        truth_plane = it->mask;
    }
    const fs::path path = o.output.empty() ? g.out_or(".") / "overlay.png" : fs::path(o.output);
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    render_overlay(plane, pred_plane, truth_plane, path);
    const auto c = confusion(pred_plane, truth_plane);
    print_json({{"output", path.string()}, {"z", z}, {"tp", c.tp}, {"fp", c.fp}, {"fn", c.fn}});
    return 0;
}

int cmd_report(const Globals& g, const std::vector<std::string>& inputs)
{
    if (inputs.empty()) throw ValidationError("report: no results files");
    std::vector<ResultRow> rows;
    for (const auto& in : inputs) {
        if (!fs::exists(in)) throw DataError("missing results file " + in);
        auto part = read_results(in);
        const auto centers = read_per_center(fs::path(in).parent_path() / "per_center.csv");
        for (auto& r : part)
            if (auto it = centers.find(r.key()); it != centers.end()) r.per_center = it->second;
        rows.insert(rows.end(), part.begin(), part.end());
    }
    const auto dir = g.out_or("report");
    const auto rep = emit_report(rows, dir);
    print_json({{"rows", rows.size()}, {"directory", dir.string()}, {"tests", rep.stats.size()}});
    return 0;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Cross-dataset generalizability harness for MS lesion segmentation"};
    app.require_subcommand(1);
    app.fallthrough();
    Globals g;
    app.add_option("--seed", g.seed, "Seed for stochastic steps");
    app.add_option("--config", g.config, "JSON configuration file");
    app.add_option("--out", g.out, "Output directory");
    app.add_option("--jobs", g.jobs, "Parallel jobs")->check(CLI::PositiveNumber);

    int status = 0;
    std::function<int()> action;

    std::vector<std::string> manifests;
    bool headers_only = false;
    auto* ingest = app.add_subcommand("ingest", "Validate dataset manifests and their files");
    ingest->add_option("manifests", manifests, "Manifest files")->required();
    ingest->add_flag("--headers-only", headers_only, "Check paths without loading volumes");
    ingest->callback([&] { action = [&] { return cmd_ingest(manifests, !headers_only); }; });

    std::size_t scans = default_scans_per_site, raters = 0;
    auto* phantom = app.add_subcommand("phantom", "Generate the synthetic phantom suite");
    phantom->add_option("--scans", scans, "Scans per site")->check(CLI::PositiveNumber);
    phantom->add_option("--raters", raters, "Simulated raters per scan");
    phantom->callback([&] { action = [&] { return cmd_phantom(g, scans, raters); }; });

    std::vector<std::string> volumes;
    std::string method = "quantile", template_path;
    std::size_t resolution = default_template_resolution;
    auto* normalize = app.add_subcommand("normalize", "Quantile or linear intensity normalization");
    normalize->add_option("volumes", volumes, "Input volumes")->required();
    normalize->add_option("--method", method, "quantile or linear");
    normalize->add_option("--template", template_path, "Existing template; built from the inputs when omitted");
    normalize->add_option("--resolution", resolution, "Template resolution M");
    normalize->callback([&] { action = [&] { return cmd_normalize(g, volumes, method, template_path, resolution); }; });

    TrainOptions topts;
    auto* train = app.add_subcommand("train", "Train a model on one or more datasets");
    train->add_option("manifests", manifests, "Training manifests")->required();
    train->add_option("--normalization", topts.normalization, "quantile or linear");
    train->add_option("--topology", topts.topology, "nested_dense or plain_skip");
    train->add_option("--epochs", topts.epochs);
    train->add_option("--batch-size", topts.batch_size);
    train->add_option("--depth", topts.depth);
    train->add_option("--channels", topts.channels, "Base channel count");
    train->add_option("--slice-side", topts.slice_side);
    train->add_option("--min-brain-voxels", topts.min_brain_voxels);
    train->add_option("--template-resolution", topts.template_resolution);
    train->add_option("--label-source", topts.label_source, "consensus, union or a rater id");
    train->add_flag("--verbose", topts.verbose);
    train->callback([&] { action = [&] { return cmd_train(g, manifests, topts); }; });

    std::string model, label_source = default_label_source;
    std::optional<double> threshold;
    auto* evaluate = app.add_subcommand("evaluate", "Score a trained model on datasets");
    evaluate->add_option("--model", model, "Checkpoint JSON")->required();
    evaluate->add_option("manifests", manifests, "Test manifests")->required();
    evaluate->add_option("--label-source", label_source);
    evaluate->add_option("--threshold", threshold);
    evaluate->callback([&] { action = [&] { return cmd_evaluate(g, model, manifests, label_source, threshold); }; });

    bool no_resume = false, verbose = false, with_report = false;
    auto* matrix = app.add_subcommand("matrix", "Run the cross-dataset experiment matrix (--config experiment.json)");
    matrix->add_flag("--no-resume", no_resume, "Discard existing results");
    matrix->add_flag("--verbose", verbose);
    matrix->add_flag("--report", with_report, "Emit the report next to the results");
    matrix->callback([&] { action = [&] { return cmd_matrix(g, no_resume, verbose, with_report); }; });

    StatsOptions sopts;
    auto* stats_cmd = app.add_subcommand("stats", "Statistical tests on a CSV table");
    stats_cmd->add_option("test", sopts.test, "anova, tukey, rm-anova or wilcoxon")
        ->required()
        ->check(CLI::IsMember({"anova", "tukey", "rm-anova", "wilcoxon"}));
    stats_cmd->add_option("input", sopts.input, "CSV with a header row")->required();
    stats_cmd->add_option("--group-col", sopts.group_col);
    stats_cmd->add_option("--condition-col", sopts.condition_col);
    stats_cmd->add_option("--subject-col", sopts.subject_col);
    stats_cmd->add_option("--value-col", sopts.value_col);
    stats_cmd->add_option("--a-col", sopts.a_col);
    stats_cmd->add_option("--b-col", sopts.b_col);
    stats_cmd->add_option("--mode", sopts.mode, "exact, normal or both")
        ->check(CLI::IsMember({"exact", "normal", "both"}));
    stats_cmd->callback([&] { action = [&] { return cmd_stats(sopts); }; });

    std::vector<std::string> masks;
    std::string consensus, agree_manifest;
    auto* agree = app.add_subcommand("agree", "Inter-rater agreement");
    agree->add_option("masks", masks, "Rater masks");
    agree->add_option("--consensus", consensus, "Consensus mask");
    agree->add_option("--manifest", agree_manifest, "Score every multi-rater scan of a manifest");
    agree->callback([&] {
        action = [&] {
            if (agree_manifest.empty() && masks.size() < 2)
                throw ValidationError("agree: give two or more masks or --manifest");
            return cmd_agree(masks, consensus, agree_manifest);
        };
    });

    std::string fuse_method = "majority", output;
    std::size_t k = 0;
    auto* fuse = app.add_subcommand("fuse", "Fuse rater masks by union or k-of-n majority");
    fuse->add_option("masks", masks, "Rater masks")->required();
    fuse->add_option("--method", fuse_method, "union or majority");
    fuse->add_option("--k", k, "Votes needed (default: strict majority)");
    fuse->add_option("-o,--output", output, "Output mask file");
    fuse->callback([&] { action = [&] { return cmd_fuse(g, masks, fuse_method, k, output); }; });

    OverlayOptions oopts;
    auto* overlay = app.add_subcommand("overlay", "Render a prediction overlay PNG");
    overlay->add_option("--image", oopts.image)->required();
    overlay->add_option("--truth", oopts.truth)->required();
    overlay->add_option("--pred", oopts.pred, "Predicted mask volume");
    overlay->add_option("--model", oopts.model, "Checkpoint to predict with");
    overlay->add_option("--z", oopts.z, "Slice index (default: most lesion voxels)");
    overlay->add_option("-o,--output", oopts.output, "Output PNG");
    overlay->callback([&] { action = [&] { return cmd_overlay(g, oopts); }; });

    std::vector<std::string> results;
    auto* report = app.add_subcommand("report", "Tables and statistics from results CSVs");
    report->add_option("results", results, "results.csv files")->required();
    report->callback([&] { action = [&] { return cmd_report(g, results); }; });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : static_cast<int>(ExitCode::validation);
    }
    try {
        status = action ? action() : 0;
    } catch (const Error& e) {
        std::cerr << "msgen: " << e.what() << "\n";
        return static_cast<int>(e.code());
    } catch (const json::exception& e) {
        std::cerr << "msgen: " << e.what() << "\n";
        return static_cast<int>(ExitCode::validation);
    } catch (const fs::filesystem_error& e) {
        std::cerr << "msgen: " << e.what() << "\n";
        return static_cast<int>(ExitCode::data);
    } catch (const std::exception& e) {
        std::cerr << "msgen: internal error: " << e.what() << "\n";
        return 1;
    }
    return status;
}
