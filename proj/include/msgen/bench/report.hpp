#pragma once

// Report tables over ResultRows: cross matrix, training-set means,
// combined vs individual training sets, ablation pairs, plus the
// statistical tests that go with them.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "msgen/bench/matrix.hpp"
#include "msgen/error.hpp"
#include "msgen/stats/tests.hpp"

namespace msgen::bench {

/// (normalization, topology) configuration label.
inline std::string config_label(const std::string& normalization, const std::string& topology)
{
    return normalization + "/" + topology;
}

// train_key -> test_key -> Dice averaged over seeds
using CrossMatrix = std::map<std::string, std::map<std::string, double>>;

inline CrossMatrix cross_matrix(std::span<const ResultRow> rows, const std::string& normalization,
                                const std::string& topology)
{
    std::map<std::string, std::map<std::string, std::pair<double, std::size_t>>> acc;
    for (const auto& r : rows) {
        if (r.normalization != normalization || r.topology != topology) continue;
        auto& [sum, n] = acc[r.train_key][r.test_key];
        sum += r.dice;
        ++n;
    }
    CrossMatrix m;
    for (const auto& [train, tests] : acc)
        for (const auto& [test, v] : tests) m[train][test] = v.first / static_cast<double>(v.second);
    return m;
}

inline bool is_union_key(const std::string& key) { return key.find('+') != std::string::npos; }

/// Mean over test sets for every single-dataset training key.
inline std::vector<std::pair<std::string, double>> training_set_means(const CrossMatrix& m)
{
    std::vector<std::pair<std::string, double>> out;
    for (const auto& [train, tests] : m) {
        if (is_union_key(train) || tests.empty()) continue;
        double sum = 0;
        for (const auto& [test, d] : tests) sum += d;
        out.emplace_back(train, sum / static_cast<double>(tests.size()));
    }
    return out;
}

struct AblationPair {
    std::string train_key, test_key, shared;  // shared = the fixed factor
    std::uint64_t seed = 0;
    double first = 0, second = 0;
};

/// Rows matched on everything except the ablated factor. factor is
/// "normalization" or "topology"; first/second name its two levels.
inline std::vector<AblationPair> ablation_pairs(std::span<const ResultRow> rows, const std::string& factor,
                                                const std::string& first, const std::string& second)
{
    auto level = [&](const ResultRow& r) { return factor == "normalization" ? r.normalization : r.topology; };
    auto shared = [&](const ResultRow& r) { return factor == "normalization" ? r.topology : r.normalization; };
    std::map<std::string, const ResultRow*> a, b;
    for (const auto& r : rows) {
        const auto key = r.train_key + "|" + r.test_key + "|" + shared(r) + "|" + std::to_string(r.seed);
        if (level(r) == first) a[key] = &r;
        if (level(r) == second) b[key] = &r;
    }
    std::vector<AblationPair> out;
    for (const auto& [key, ra] : a)
        if (auto it = b.find(key); it != b.end())
            out.push_back({ra->train_key, ra->test_key, shared(*ra), ra->seed, ra->dice, it->second->dice});
    return out;
}

struct Report {
    std::string csv;
    std::string markdown;
    nlohmann::json stats = nlohmann::json::array();
};

namespace detail {

inline std::string fixed(double v, int digits = 4)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

inline std::string pvalue(double p)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, p < 1e-3 ? "%.3e" : "%.4f", p);
    return buf;
}

inline std::string describe(const stats::TestResult& t)
{
    std::string s = t.method + ": statistic " + fixed(t.statistic) + ", p = " + pvalue(t.p_value);
    if (!t.df.empty()) {
        s += ", df (";
        for (std::size_t i = 0; i < t.df.size(); ++i) s += (i ? ", " : "") + fixed(t.df[i], 0);
        s += ")";
    }
    for (const auto& f : t.flags) s += " [" + f + "]";
    return s;
}

} // namespace detail

/// Builds every table and test the rows support. A single row yields the
/// CSV only.
inline Report build_report(std::span<const ResultRow> rows)
{
    if (rows.empty()) throw ValidationError("report: no rows");
    Report rep;
    rep.csv = std::string(results_header) + "\n";
    for (const auto& r : rows) rep.csv += csv_line(r) + "\n";
    if (rows.size() == 1) return rep;

    std::ostringstream md;
    md << "# Cross-dataset results\n\n";
    std::set<std::pair<std::string, std::string>> configs;
    std::set<std::string> norms, topos;
    for (const auto& r : rows) {
        configs.emplace(r.normalization, r.topology);
        norms.insert(r.normalization);
        topos.insert(r.topology);
    }
    std::ostringstream tests_md;
    auto add_test = [&](const std::string& title, const stats::TestResult& t) {
        tests_md << "- " << title << ": " << detail::describe(t) << "\n";
        auto j = stats::to_json(t);
        j["title"] = title;
        rep.stats.push_back(std::move(j));
    };
    auto try_test = [&](const std::string& title, auto&& fn) {
        try {
            add_test(title, fn());
        } catch (const Error& e) {
            tests_md << "- " << title << ": not run (" << e.what() << ")\n";
        }
    };

    for (const auto& [norm, topo] : configs) {
        const auto label = config_label(norm, topo);
        const auto m = cross_matrix(rows, norm, topo);
        std::set<std::string> test_keys;
        for (const auto& [train, tests] : m)
            for (const auto& [test, d] : tests) test_keys.insert(test);

        md << "## " << label << "\n\n### Cross-dataset Dice (rows: training set, columns: test set)\n\n| train |";
        for (const auto& t : test_keys) md << " " << t << " |";
        md << "\n|---|";
        for (std::size_t i = 0; i < test_keys.size(); ++i) md << "---|";
        md << "\n";
        for (const auto& [train, tests] : m) {
            md << "| " << train << " |";
            for (const auto& t : test_keys) {
                const auto it = tests.find(t);
                md << " " << (it == tests.end() ? std::string("-") : detail::fixed(it->second, 3)) << " |";
            }
            md << "\n";
        }

        const auto means = training_set_means(m);
        if (!means.empty()) {
            md << "\n### Mean Dice per training set\n\n| train | mean Dice |\n|---|---|\n";
            for (const auto& [train, mean] : means) md << "| " << train << " | " << detail::fixed(mean) << " |\n";
        }

        // combined training sets against their components on the same test set
        std::ostringstream combined;
        for (const auto& [train, tests] : m) {
            if (!is_union_key(train)) continue;
            const auto parts = parse_key(train);
            for (const auto& [test, d] : tests) {
                combined << "| " << train << " | " << test << " | " << detail::fixed(d, 3) << " |";
                for (const auto& p : parts) {
                    const auto it = m.find(p);
                    const bool has = it != m.end() && it->second.contains(test);
                    combined << " " << p << ": " << (has ? detail::fixed(it->second.at(test), 3) : std::string("-"))
                             << ";";
                }
                combined << " |\n";
            }
        }
        if (!combined.str().empty())
            md << "\n### Combined training sets\n\n| train | test | Dice | individual Dice |\n|---|---|---|---|\n"
               << combined.str();
        md << "\n";

        // one-way ANOVA across single-dataset training groups
        std::vector<stats::Samples> groups;
        std::vector<std::string> group_names;
        for (const auto& [train, tests] : m) {
            if (is_union_key(train)) continue;
            stats::Samples g;
            for (const auto& [test, d] : tests) g.push_back(d);
            groups.push_back(std::move(g));
            group_names.push_back(train);
        }
        if (groups.size() >= 2) {
            try_test(label + " one-way ANOVA across training sets", [&] { return stats::one_way_anova(groups); });
            try {
                for (const auto& pr : stats::tukey_hsd(groups))
                    add_test(label + " Tukey HSD " + group_names[pr.first] + " vs " + group_names[pr.second], [&] {
                        auto t = pr.test;
                        t.flags.push_back("mean difference " + detail::fixed(pr.mean_difference));
                        return t;
                    }());
            } catch (const Error& e) {
                tests_md << "- " << label << " Tukey HSD: not run (" << e.what() << ")\n";
            }
        }
    }

    auto ablation = [&](const std::string& factor, const std::string& a, const std::string& b) {
        const auto pairs = ablation_pairs(rows, factor, a, b);
        if (pairs.empty()) return;
        md << "## Ablation: " << a << " vs " << b << "\n\n| train | test | fixed | seed | " << a << " | " << b
           << " |\n|---|---|---|---|---|---|\n";
        std::vector<std::pair<double, double>> xy;
        stats::Samples x, y;
        for (const auto& p : pairs) {
            md << "| " << p.train_key << " | " << p.test_key << " | " << p.shared << " | " << p.seed << " | "
               << detail::fixed(p.first, 3) << " | " << detail::fixed(p.second, 3) << " |\n";
            x.push_back(p.first);
            y.push_back(p.second);
            xy.emplace_back(p.first, p.second);
        }
        double ma = 0, mb = 0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            ma += x[i];
            mb += y[i];
        }
        md << "\nMean over " << x.size() << " pairs: " << a << " " << detail::fixed(ma / double(x.size())) << ", " << b
           << " " << detail::fixed(mb / double(x.size())) << "\n\n";
        const std::string title = "Wilcoxon signed-rank " + a + " vs " + b;
        if (x.size() <= stats::wilcoxon_exact_max_n)
            try_test(title + " (exact)", [&] { return stats::wilcoxon_signed_rank(xy, stats::WilcoxonMode::exact); });
        try_test(title + " (normal approximation)",
                 [&] { return stats::wilcoxon_signed_rank(xy, stats::WilcoxonMode::normal_approx); });
    };
    if (norms.contains("quantile") && norms.contains("linear")) ablation("normalization", "quantile", "linear");
    if (topos.contains("nested_dense") && topos.contains("plain_skip"))
        ablation("topology", "nested_dense", "plain_skip");

    // per-center breakdowns where present
    std::ostringstream centers;
    for (const auto& r : rows)
        if (r.per_center.size() > 1)
            for (const auto& [tag, d] : r.per_center)
                centers << "| " << r.train_key << " | " << r.test_key << " | "
                        << config_label(r.normalization, r.topology) << " | " << r.seed << " | " << tag << " | "
                        << detail::fixed(d, 3) << " |\n";
    if (!centers.str().empty())
        md << "## Per-center Dice\n\n| train | test | config | seed | center | Dice |\n|---|---|---|---|---|---|\n"
           << centers.str() << "\n";

    if (!tests_md.str().empty()) md << "## Statistical tests\n\n" << tests_md.str();
    rep.markdown = md.str();
    return rep;
}

/// Writes report.csv, and with more than one row report.md and
/// report_stats.json, under dir.
inline Report emit_report(std::span<const ResultRow> rows, const std::filesystem::path& dir)
{
    auto rep = build_report(rows);
    std::filesystem::create_directories(dir);
    auto write = [&](const char* name, const std::string& text) {
        std::ofstream out(dir / name);
        if (!out) throw DataError("cannot write " + (dir / name).string());
        out << text;
    };
    write("report.csv", rep.csv);
    if (!rep.markdown.empty()) {
        write("report.md", rep.markdown);
        write("report_stats.json", rep.stats.dump(2) + "\n");
    }
    return rep;
}

} // namespace msgen::bench
