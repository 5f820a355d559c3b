// Acceptance suite: one PASS/FAIL line per criterion. Exit status is the
// number of failed criteria (0 when all pass).
//
//   acceptance [--workdir DIR] [--only 1,5,9]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "msgen/bench/matrix.hpp"
#include "msgen/bench/phantom.hpp"
#include "msgen/bench/report.hpp"
#include "msgen/harmonize.hpp"
#include "msgen/metrics.hpp"
#include "msgen/rng.hpp"
#include "msgen/segnet/network.hpp"
#include "msgen/segnet/train.hpp"
#include "msgen/stats/tests.hpp"
#include "published_tables.hpp"

namespace fs = std::filesystem;
using namespace msgen;
using namespace msgen::bench;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args)
{
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

bool within(double value, double target, double tol) { return std::abs(value - target) <= tol; }

// ---- 1-5: published tables -------------------------------------------------

Outcome anova_reproduction()
{
    const auto r = stats::one_way_anova(fixtures::cross_dice);
    const bool ok = within(r.statistic, 4.57, 0.05) && within(r.p_value, 0.038, 0.004);
    return {ok, fmt("F = %.4f (4.57 +- 0.05), p = %.5f (0.038 +- 0.004)", r.statistic, r.p_value)};
}

Outcome tukey_reproduction()
{
    const auto pairs = stats::tukey_hsd(fixtures::cross_dice);
    // groups: 0 MSSEG-2016 train, 1 3D-MR-MS, 2 MSSEG-2016 test, 3 ISBI-2015
    bool ok = true;
    std::string detail;
    for (const auto& p : pairs) {
        const bool target = (p.first == 2 && p.second == 3) || (p.first == 3 && p.second == 2);
        const bool good = target ? within(p.test.p_value, 0.027, 0.005) : p.test.p_value > 0.05;
        ok = ok && good;
        if (target) detail = fmt("(%s, %s) p = %.5f (0.027 +- 0.005)", fixtures::training_sets[p.first].c_str(),
                                 fixtures::training_sets[p.second].c_str(), p.test.p_value);
    }
    double others = 1.0;
    for (const auto& p : pairs)
        if (!((p.first == 2 && p.second == 3) || (p.first == 3 && p.second == 2)))
            others = std::min(others, p.test.p_value);
    return {ok && pairs.size() == 6, detail + fmt("; smallest other pair p = %.4f (> 0.05)", others)};
}

Outcome rm_anova_reproduction()
{
    const auto r = stats::rm_anova(fixtures::rater_dice);
    const bool ok = within(r.statistic, 3.93, 0.05) && within(r.p_value, 0.114, 0.010);
    return {ok, fmt("F = %.4f (3.93 +- 0.05), p = %.5f (0.114 +- 0.010)", r.statistic, r.p_value)};
}

Outcome wilcoxon_reproduction()
{
    const auto arch = stats::wilcoxon_signed_rank(fixtures::nested_vs_plain, stats::WilcoxonMode::normal_approx);
    const auto norm_exact = stats::wilcoxon_signed_rank(fixtures::quantile_vs_linear, stats::WilcoxonMode::exact);
    const auto norm_approx =
        stats::wilcoxon_signed_rank(fixtures::quantile_vs_linear, stats::WilcoxonMode::normal_approx);
    const bool ok =
        within(arch.p_value, 0.0003, 0.0002) && norm_exact.p_value < 0.001 && norm_approx.p_value < 0.001;
    std::string conventions;
    for (const auto& f : norm_approx.flags) conventions += " [" + f + "]";
    return {ok, fmt("architecture pairs normal p = %.6f (0.0003 +- 0.0002); normalization pairs exact p = %.3e, "
                    "normal p = %.3e (< 0.001); ",
                    arch.p_value, norm_exact.p_value, norm_approx.p_value)
                    + norm_approx.method + conventions};
}

Outcome table_means()
{
    std::vector<ResultRow> rows;
    for (std::size_t g = 0; g < fixtures::cross_dice.size(); ++g)
        for (std::size_t t = 0; t < fixtures::cross_dice[g].size(); ++t)
            rows.push_back({fixtures::training_sets[g], "test" + std::to_string(t), "quantile", "nested_dense", 0,
                            fixtures::cross_dice[g][t], 0, 1, 0, {}, {}});
    const auto means = training_set_means(cross_matrix(rows, "quantile", "nested_dense"));
    std::map<std::string, double> got(means.begin(), means.end());
    const double expected[] = {0.5647, 0.5843, 0.6300, 0.4970};
    bool ok = true;
    std::size_t printed_matches = 0;
    std::string flagged;
    std::ostringstream d;
    for (std::size_t g = 0; g < 4; ++g) {
        const double m = got.at(fixtures::training_sets[g]);
        ok = ok && within(m, expected[g], 1e-4);
        // printed to three decimals: consistent iff it is the rounded mean
        if (std::abs(m - fixtures::printed_means[g]) <= 0.0005 + 1e-12)
            ++printed_matches;
        else
            flagged += fixtures::training_sets[g] + fmt(" (mean %.4f, printed %.3f)", m, fixtures::printed_means[g]);
        d << (g ? ", " : "") << fmt("%.4f", m);
    }
    ok = ok && printed_matches == 3;
    return {ok, "means (" + d.str() + ") to 1e-4; " + std::to_string(printed_matches)
                    + " of 4 agree with the printed values; rounding discrepancy flagged: " + flagged};
}

// ---- 6: quantile normalization ---------------------------------------------

Outcome quantile_property()
{
    constexpr std::size_t M = 1024;
    Rng rng(606);
    std::vector<Volume> vols;
    for (int i = 0; i < 20; ++i) {
        PhantomProfile p;
        p.site_id = "ks" + std::to_string(i);
        p.dims = {64, 64, 64};
        p.spacing = {2.5, 2.5, 2.5};
        p.gamma = rng.uniform(0.5, 2.0);
        p.gain = rng.uniform(0.5, 2.0);
        p.offset = rng.uniform(0.0, 0.2);
        p.noise_sigma = rng.uniform(0.01, 0.05);
        p.seed = rng.next();
        vols.push_back(generate_phantom_scan(p, 0).image);
    }
    const auto t = build_template(vols, M);
    double worst = 0;
    std::size_t violations = 0, pairs = 0;
    for (const auto& v : vols) {
        const auto out = quantile_normalize(v, t);
        worst = std::max(worst, ks_distance(out, t));
        for (int k = 0; k < 5000; ++k, ++pairs) {
            const auto a = rng.below(v.size()), b = rng.below(v.size());
            const float va = v.voxels[a], vb = v.voxels[b], oa = out.voxels[a], ob = out.voxels[b];
            if ((va < vb && !(oa <= ob)) || (vb < va && !(ob <= oa)) || (va == vb && oa != ob)) ++violations;
        }
    }
    const bool ok = worst <= 2.0 / M && violations == 0;
    return {ok, fmt("max KS = %.6f (<= 2/M = %.6f), monotonicity violations %zu of %zu pairs", worst, 2.0 / M,
                    violations, pairs)};
}

// ---- 7: gradient check -----------------------------------------------------

Outcome gradient_check()
{
    using namespace segnet;
    const double h = 1e-4;
    Topology topo;
    topo.depth = 2;
    topo.base_channels = 2;
    // Central differences need every ReLU and max-pool switch to stay put
    // within +-h. Fixtures where the h and h/2 quotients disagree cross a
    // kink and are skipped; the first smooth one is checked.
    for (std::uint64_t seed = 1; seed <= 100; ++seed) {
        auto p = init_params<double>(topo, seed);
        Rng rng(seed + 1);
        for (auto& v : p.values) v += rng.uniform(-0.05, 0.05);
        Rng data(seed + 2);
        Batch<double> b{2, 8, 8, {}, {}};
        for (int i = 0; i < 128; ++i) {
            b.images.push_back(data.uniform(0.0, 2.0));
            b.masks.push_back(data.uniform() < 0.3 ? 1 : 0);
        }
        auto quotient = [&](std::size_t i, double step) {
            const double orig = p.values[i];
            p.values[i] = orig + step;
            const double up = gradients(p, b, 0.8).loss;
            p.values[i] = orig - step;
            const double down = gradients(p, b, 0.8).loss;
            p.values[i] = orig;
            return (up - down) / (2 * step);
        };
        std::vector<double> fd;
        bool smooth = true;
        for (std::size_t i = 0; i < p.values.size() && smooth; ++i) {
            const double a = quotient(i, h), c = quotient(i, h / 2);
            smooth = std::abs(a - c) <= 1e-6 * std::max({std::abs(a), std::abs(c), 1e-8});
            fd.push_back(a);
        }
        if (!smooth) continue;
        const auto g = gradients(p, b, 0.8);
        double worst = 0;
        for (std::size_t i = 0; i < fd.size(); ++i)
            worst = std::max(worst, std::abs(fd[i] - g.grad[i]) / std::max({std::abs(fd[i]), std::abs(g.grad[i]), 1e-8}));
        return {worst < 1e-4, fmt("max relative error %.3e over %zu parameters (< 1e-4), h = 1e-4, fixture seed %llu",
                                  worst, fd.size(), static_cast<unsigned long long>(seed))};
    }
    return {false, "no kink-free fixture found"};
}

// ---- 8: overfit fixture ----------------------------------------------------

Outcome overfit()
{
    auto profile = default_phantom_suite(1)[0];
    profile.noise_sigma = 0;
    profile.lesion_radius_range_mm = {8.0, 14.0};
    auto scan = generate_phantom_scan(profile, 0);
    auto v = linear_normalize(scan.image);
    auto slices = extract_slices(v, scan.truth, 1, default_slice_side);
    std::stable_sort(slices.begin(), slices.end(),
                     [](const auto& a, const auto& b) { return a.lesion_pixels > b.lesion_pixels; });
    slices.resize(8);
    segnet::TrainConfig cfg;
    cfg.batch_size = 1;
    cfg.seed = 1;
    const auto r = segnet::train<float>(slices, slices, cfg);
    const double dice = segnet::mean_scan_dice(segnet::score_by_scan(slices, segnet::predict(r.params, slices, 0.5)));
    const double first = r.log.front().train_loss, last = r.log.back().train_loss;
    const bool ok = r.log.size() == 50 && dice > 0.95 && last < first;
    return {ok, fmt("train Dice %.4f (> 0.95, best epoch %zu; epoch-50 Dice %.4f), loss epoch 1 %.5f -> epoch 50 %.5f",
                    dice, r.best_epoch, r.log.back().val_dice, first, last)};
}

// ---- 9: normalization finding on phantoms ----------------------------------

constexpr std::uint64_t matrix_seeds[] = {1, 2, 3, 4, 5};

ExperimentSpec desk_spec(const std::vector<fs::path>& manifests)
{
    ExperimentSpec s;
    s.datasets = manifests;
    s.normalizations = {Normalization::quantile, Normalization::linear};
    s.topologies = {segnet::SkipKind::nested_dense};
    s.seeds.assign(std::begin(matrix_seeds), std::end(matrix_seeds));
    s.slice_side = 64;
    s.train.epochs = 12;
    s.train.batch_size = 1;
    s.save_checkpoints = false;
    return s;
}

struct MatrixRun {
    std::vector<fs::path> manifests;
    std::vector<ResultRow> rows;
};
std::optional<MatrixRun> desk_matrix;

std::vector<fs::path> phantom_suite(const fs::path& dir)
{
    std::vector<fs::path> out;
    for (const auto& m : generate_phantom_suite(default_phantom_suite(1), default_scans_per_site, dir))
        out.push_back(m.source);
    return out;
}

Outcome normalization_finding(const fs::path& work)
{
    MatrixRun run;
    run.manifests = phantom_suite(work / "phantoms");
    MatrixOptions opts;
    opts.resume = false;
    run.rows = run_matrix(desk_spec(run.manifests), work / "matrix", opts);
    emit_report(run.rows, work / "matrix");

    std::size_t wins = 0;
    std::ostringstream per_seed;
    for (auto seed : matrix_seeds) {
        double q = 0, l = 0;
        std::size_t nq = 0, nl = 0;
        for (const auto& r : run.rows) {
            if (r.seed != seed) continue;
            if (r.normalization == "quantile") {
                q += r.dice;
                ++nq;
            } else {
                l += r.dice;
                ++nl;
            }
        }
        q /= double(nq);
        l /= double(nl);
        wins += q > l;
        per_seed << fmt(" s%llu %.3f/%.3f", static_cast<unsigned long long>(seed), q, l);
    }
    const auto pairs = ablation_pairs(run.rows, "normalization", "quantile", "linear");
    std::vector<std::pair<double, double>> xy;
    for (const auto& p : pairs) xy.emplace_back(p.first, p.second);
    const auto w = stats::wilcoxon_signed_rank(xy, stats::WilcoxonMode::normal_approx);
    desk_matrix = std::move(run);
    const bool ok = wins >= 4 && w.p_value < 0.05;
    return {ok, fmt("quantile > linear in %zu of 5 seeds (quantile/linear mean Dice:", wins) + per_seed.str()
                    + fmt("); pooled Wilcoxon over %zu pairs p = %.3e (< 0.05)", xy.size(), w.p_value)};
}

// ---- 10-11: metrics --------------------------------------------------------

Outcome metric_oracle()
{
    Rng rng(1010);
    std::size_t mismatches = 0;
    double worst_identity = 0;
    for (int t = 0; t < 1000; ++t) {
        Mask2D a(16, 16), b(16, 16);
        const double pa = rng.uniform(), pb = rng.uniform();
        for (auto& x : a.data) x = rng.uniform() < pa;
        for (auto& x : b.data) x = rng.uniform() < pb;
        std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
        for (std::size_t i = 0; i < 256; ++i) {
            tp += a.data[i] && b.data[i];
            fp += a.data[i] && !b.data[i];
            fn += !a.data[i] && b.data[i];
            tn += !a.data[i] && !b.data[i];
        }
        const auto c = confusion(a, b);
        const double d_ref = 2 * tp + fp + fn == 0 ? 1.0 : 2.0 * double(tp) / double(2 * tp + fp + fn);
        const double j_ref = tp + fp + fn == 0 ? 1.0 : double(tp) / double(tp + fp + fn);
        if (!(c == ConfusionCounts{tp, fp, fn, tn}) || dice(c) != d_ref || iou(c) != j_ref) ++mismatches;
        worst_identity = std::max(worst_identity, std::abs(dice(c) - 2 * iou(c) / (1 + iou(c))));
    }
    return {mismatches == 0 && worst_identity <= 1e-12,
            fmt("%zu mismatches against the pixel tally over 1000 pairs; max |dice - 2 iou/(1+iou)| = %.2e", mismatches,
                worst_identity)};
}

Outcome fusion_properties()
{
    Rng rng(1111);
    std::size_t union_bad = 0, and_bad = 0;
    for (int t = 0; t < 1000; ++t) {
        std::vector<LabelVolume> r;
        for (int k = 0; k < 3; ++k) {
            LabelVolume m({8, 8, 1}, {1, 1, 1});
            const double p = rng.uniform();
            for (auto& x : m.labels) x = rng.uniform() < p;
            r.push_back(std::move(m));
        }
        const auto u = fuse_union(r), all = fuse_majority(r, r.size());
        for (std::size_t i = 0; i < 64; ++i) {
            for (const auto& m : r) union_bad += m.labels[i] > u.labels[i];
            and_bad += all.labels[i] != (r[0].labels[i] & r[1].labels[i] & r[2].labels[i]);
        }
    }
    return {union_bad == 0 && and_bad == 0,
            fmt("1000 random 3-rater 8x8 fixtures: %zu union violations, %zu majority(k=3) != AND", union_bad, and_bad)};
}

// ---- 12: determinism across --jobs -----------------------------------------

Outcome determinism(const fs::path& work)
{
    std::vector<ResultRow> reference;
    std::vector<fs::path> manifests;
    if (desk_matrix) {
        manifests = desk_matrix->manifests;
        reference = desk_matrix->rows;
    } else {
        manifests = phantom_suite(work / "phantoms");
    }
    // two training sets so two jobs actually run side by side
    auto spec = desk_spec(manifests);
    spec.train_sets = {{"siteA"}, {"siteB"}};
    spec.normalizations = {Normalization::quantile};
    spec.seeds = {matrix_seeds[0]};
    MatrixOptions serial, parallel;
    serial.resume = parallel.resume = false;
    parallel.jobs = 2;
    if (reference.empty()) reference = run_matrix(spec, work / "rerun_serial", serial);
    const auto rerun = run_matrix(spec, work / "rerun_parallel", parallel);

    std::map<std::string, const ResultRow*> ref;
    for (const auto& r : reference) ref[r.key()] = &r;
    std::size_t same = 0;
    for (const auto& r : rerun) {
        const auto it = ref.find(r.key());
        if (it != ref.end() && it->second->dice == r.dice && it->second->iou == r.iou) ++same;
    }
    return {same == rerun.size() && rerun.size() == 6,
            fmt("%zu of %zu rerun rows bit-identical (jobs = 2 vs jobs = 1)", same, rerun.size())};
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Acceptance criteria"};
    std::string workdir = "acceptance_work";
    std::vector<int> only;
    app.add_option("--workdir", workdir, "Scratch directory (cleared first)");
    app.add_option("--only", only, "Run only these criteria")->delimiter(',');
    CLI11_PARSE(app, argc, argv);

    const fs::path work(workdir);
    fs::remove_all(work);
    fs::create_directories(work);

    struct Criterion {
        int id;
        const char* name;
        double limit_seconds;  // 0: no runtime bound
        std::function<Outcome()> run;
    };
    const std::vector<Criterion> criteria = {
        {1, "ANOVA reproduction", 1, anova_reproduction},
        {2, "Tukey HSD reproduction", 5, tukey_reproduction},
        {3, "repeated-measures ANOVA reproduction", 1, rm_anova_reproduction},
        {4, "Wilcoxon signed-rank reproduction", 0, wilcoxon_reproduction},
        {5, "training-set means recomputation", 0, table_means},
        {6, "quantile normalization KS bound and monotonicity", 30, quantile_property},
        {7, "gradient check", 60, gradient_check},
        {8, "overfit fixture", 300, overfit},
        {9, "quantile beats linear on the phantom suite", 1800, [&] { return normalization_finding(work); }},
        {10, "metric oracle", 0, metric_oracle},
        {11, "fusion properties", 0, fusion_properties},
        {12, "determinism across --jobs", 0, [&] { return determinism(work); }},
    };

    int failed = 0;
    for (const auto& c : criteria) {
        if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("threw: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (c.limit_seconds > 0 && secs >= c.limit_seconds) {
            o.pass = false;
            o.detail += fmt("; runtime %.1f s exceeds %.0f s", secs, c.limit_seconds);
        }
        failed += !o.pass;
        std::printf("%s %2d %s: %s [%.2f s]\n", o.pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str(), secs);
        std::fflush(stdout);
    }
    std::printf("%d criteria failed\n", failed);
    return failed;
}
