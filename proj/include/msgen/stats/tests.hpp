#pragma once

// Hypothesis tests: one-way ANOVA, Tukey HSD, Wilcoxon signed-rank and
// one-way repeated-measures ANOVA.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "msgen/error.hpp"
#include "msgen/stats/distributions.hpp"

namespace msgen::stats {

struct TestResult {
    double statistic = 0;
    std::vector<double> df;
    double p_value = 1;
    std::string method;
    std::vector<std::string> flags;
};

inline nlohmann::json to_json(const TestResult& r)
{
    return {{"statistic", r.statistic}, {"df", r.df}, {"p_value", r.p_value}, {"method", r.method}, {"flags", r.flags}};
}

using Samples = std::vector<double>;

namespace detail {

inline double mean(std::span<const double> v)
{
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

struct AnovaParts {
    double ss_between = 0, ss_within = 0;
    std::size_t k = 0, n_total = 0;
    std::vector<double> means;
};

inline AnovaParts anova_parts(std::span<const Samples> groups)
{
    if (groups.size() < 2) throw ValidationError("ANOVA needs at least 2 groups");
    AnovaParts a;
    a.k = groups.size();
    double grand = 0;
    for (const auto& g : groups) {
        if (g.size() < 2) throw ValidationError("ANOVA needs at least 2 values per group");
        for (double x : g)
            if (!std::isfinite(x)) throw ValidationError("ANOVA input contains a non-finite value");
        a.n_total += g.size();
        grand += std::accumulate(g.begin(), g.end(), 0.0);
        a.means.push_back(mean(g));
    }
    grand /= static_cast<double>(a.n_total);
    for (std::size_t i = 0; i < groups.size(); ++i) {
        a.ss_between += static_cast<double>(groups[i].size()) * (a.means[i] - grand) * (a.means[i] - grand);
        for (double x : groups[i]) a.ss_within += (x - a.means[i]) * (x - a.means[i]);
    }
    return a;
}

// Sums of squares below this fraction of the total are treated as zero so
// that shift/scale round-off does not flip the degenerate cases.
inline bool negligible(double part, double total) { return part <= 1e-14 * std::max(total, 1e-300); }

} // namespace detail

/// F = MSB / MSW with df (k-1, N-k).
inline TestResult one_way_anova(std::span<const Samples> groups)
{
    const auto a = detail::anova_parts(groups);
    TestResult r;
    r.method = "one-way ANOVA, F upper tail via regularized incomplete beta";
    const double df1 = static_cast<double>(a.k - 1), df2 = static_cast<double>(a.n_total - a.k);
    r.df = {df1, df2};
    const double total = a.ss_between + a.ss_within;
    if (detail::negligible(a.ss_between, total) || total == 0) {
        r.statistic = 0;
        r.p_value = 1;
        return r;
    }
    if (detail::negligible(a.ss_within, total)) {
        r.statistic = std::numeric_limits<double>::infinity();
        r.p_value = 0;
        r.flags.push_back("zero_within_group_variance");
        return r;
    }
    r.statistic = (a.ss_between / df1) / (a.ss_within / df2);
    r.p_value = f_upper_tail(r.statistic, df1, df2);
    return r;
}

struct PairwiseResult {
    std::size_t first = 0, second = 0;
    double mean_difference = 0;  // mean(first) - mean(second)
    TestResult test;
};

/// Tukey HSD for equal group sizes: q = |mean_i - mean_j| / sqrt(MSW / n),
/// p from the studentized range distribution q(k, N-k).
inline std::vector<PairwiseResult> tukey_hsd(std::span<const Samples> groups)
{
    const auto a = detail::anova_parts(groups);
    const std::size_t n = groups.front().size();
    for (const auto& g : groups)
        if (g.size() != n) throw ValidationError("tukey_hsd: unequal group sizes are not supported");
    const double df = static_cast<double>(a.n_total - a.k);
    const double msw = a.ss_within / df;
    const double total = a.ss_between + a.ss_within;
    std::vector<PairwiseResult> out;
    for (std::size_t i = 0; i < a.k; ++i)
        for (std::size_t j = i + 1; j < a.k; ++j) {
            PairwiseResult pr;
            pr.first = i;
            pr.second = j;
            pr.mean_difference = a.means[i] - a.means[j];
            auto& r = pr.test;
            r.method = "Tukey HSD, studentized range by adaptive Gauss-Kronrod double integral";
            r.df = {static_cast<double>(a.k), df};
            const double gap = std::abs(pr.mean_difference);
            if (detail::negligible(gap * gap, total)) {
                r.statistic = 0;
                r.p_value = 1;
            } else if (detail::negligible(a.ss_within, total)) {
                r.statistic = std::numeric_limits<double>::infinity();
                r.p_value = 0;
                r.flags.push_back("zero_within_group_variance");
            } else {
                r.statistic = gap / std::sqrt(msw / static_cast<double>(n));
                r.p_value = std::clamp(1.0 - studentized_range_cdf(r.statistic, static_cast<int>(a.k), df), 0.0, 1.0);
            }
            out.push_back(std::move(pr));
        }
    return out;
}

enum class WilcoxonMode { exact, normal_approx };

inline constexpr std::size_t wilcoxon_exact_max_n = 25;
inline constexpr std::size_t wilcoxon_min_n = 6;

/// Signed ranks of the nonzero differences a - b (average ranks for ties).
struct SignedRanks {
    std::vector<double> ranks;   // rank of |d|, in order of the nonzero differences
    std::vector<bool> positive;
    std::size_t zeros_dropped = 0;
    double w_plus = 0, w_minus = 0;
    double tie_term = 0;         // sum over tie groups of t^3 - t
};

inline SignedRanks signed_ranks(std::span<const std::pair<double, double>> pairs)
{
    SignedRanks s;
    std::vector<double> d;
    for (const auto& [a, b] : pairs) {
        if (!std::isfinite(a) || !std::isfinite(b)) throw ValidationError("wilcoxon: non-finite input");
        const double diff = a - b;
        if (diff == 0) {
            ++s.zeros_dropped;
            continue;
        }
        d.push_back(diff);
    }
    const std::size_t n = d.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) { return std::abs(d[x]) < std::abs(d[y]); });
    s.ranks.assign(n, 0);
    s.positive.assign(n, false);
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i + 1;
        while (j < n && std::abs(d[idx[j]]) == std::abs(d[idx[i]])) ++j;
        const double rank = 0.5 * static_cast<double>(i + 1 + j);
        const double t = static_cast<double>(j - i);
        s.tie_term += t * t * t - t;
        for (std::size_t k = i; k < j; ++k) s.ranks[idx[k]] = rank;
        i = j;
    }
    for (std::size_t i = 0; i < n; ++i) {
        s.positive[i] = d[i] > 0;
        (s.positive[i] ? s.w_plus : s.w_minus) += s.ranks[i];
    }
    return s;
}

/// Two-sided Wilcoxon signed-rank test on the differences a - b.
/// W = min(W+, W-). Exact mode counts the sign assignments (all 2^n of
/// them, through their subset-sum distribution) with min(W+, W-) <= W.
inline TestResult wilcoxon_signed_rank(std::span<const std::pair<double, double>> pairs, WilcoxonMode mode)
{
    const auto s = signed_ranks(pairs);
    const std::size_t n = s.ranks.size();
    if (n < wilcoxon_min_n)
        throw ValidationError("wilcoxon: need at least " + std::to_string(wilcoxon_min_n)
                              + " nonzero differences, got " + std::to_string(n));
    TestResult r;
    r.statistic = std::min(s.w_plus, s.w_minus);
    r.df = {static_cast<double>(n)};
    const std::string conventions = "zeros dropped (" + std::to_string(s.zeros_dropped)
                                    + "), average ranks for ties, W = min(W+, W-), two-sided";
    if (mode == WilcoxonMode::exact) {
        if (n > wilcoxon_exact_max_n)
            throw ValidationError("wilcoxon exact mode supports n <= 25, got " + std::to_string(n));
        // doubled ranks are integers even with average ranks
        std::vector<std::size_t> r2(n);
        std::size_t total = 0;
        for (std::size_t i = 0; i < n; ++i) {
            r2[i] = static_cast<std::size_t>(std::llround(2 * s.ranks[i]));
            total += r2[i];
        }
        std::vector<std::uint64_t> count(total + 1, 0);
        count[0] = 1;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t v = total; v + 1 > r2[i]; --v) count[v] += count[v - r2[i]];
        const auto w2 = static_cast<std::size_t>(std::llround(2 * r.statistic));
        std::uint64_t extreme = 0;
        for (std::size_t v = 0; v <= total; ++v)
            if (std::min(v, total - v) <= w2) extreme += count[v];
        r.p_value = std::min(1.0, static_cast<double>(extreme) / std::ldexp(1.0, static_cast<int>(n)));
        r.method = "Wilcoxon signed-rank, exact null over 2^n sign assignments; " + conventions;
    } else {
        const double nn = static_cast<double>(n);
        const double mean = nn * (nn + 1) / 4;
        const double var = nn * (nn + 1) * (2 * nn + 1) / 24 - s.tie_term / 48;
        if (!(var > 0)) throw NumericalError("wilcoxon: zero variance under the null");
        const double z = std::min(0.0, r.statistic - mean + 0.5) / std::sqrt(var);
        r.p_value = std::min(1.0, 2 * normal_cdf(z));
        r.method = "Wilcoxon signed-rank, normal approximation with continuity correction 0.5 and tie-corrected "
                   "variance; "
                   + conventions;
    }
    return r;
}

/// One-way repeated-measures ANOVA on a conditions x subjects table.
inline TestResult rm_anova(std::span<const Samples> table)
{
    const std::size_t k = table.size();
    if (k < 2) throw ValidationError("rm_anova: needs at least 2 conditions");
    const std::size_t n = table.front().size();
    if (n < 2) throw ValidationError("rm_anova: needs at least 2 subjects");
    for (const auto& row : table) {
        if (row.size() != n) throw ValidationError("rm_anova: incomplete matrix (ragged rows)");
        for (double x : row)
            if (!std::isfinite(x)) throw ValidationError("rm_anova: incomplete matrix (non-finite entry)");
    }
    double grand = 0;
    std::vector<double> cond_mean(k, 0), subj_mean(n, 0);
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            cond_mean[i] += table[i][j];
            subj_mean[j] += table[i][j];
            grand += table[i][j];
        }
    grand /= static_cast<double>(k * n);
    for (auto& m : cond_mean) m /= static_cast<double>(n);
    for (auto& m : subj_mean) m /= static_cast<double>(k);
    double ss_cond = 0, ss_err = 0, ss_total = 0;
    for (std::size_t i = 0; i < k; ++i) ss_cond += static_cast<double>(n) * (cond_mean[i] - grand) * (cond_mean[i] - grand);
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            const double res = table[i][j] - cond_mean[i] - subj_mean[j] + grand;
            ss_err += res * res;
            ss_total += (table[i][j] - grand) * (table[i][j] - grand);
        }
    TestResult r;
    r.method = "one-way repeated-measures ANOVA, condition x subject residual error term";
    const double df1 = static_cast<double>(k - 1), df2 = static_cast<double>((k - 1) * (n - 1));
    r.df = {df1, df2};
    if (detail::negligible(ss_cond, ss_total) || ss_total == 0) {
        r.statistic = 0;
        r.p_value = 1;
        return r;
    }
    if (detail::negligible(ss_err, ss_total)) {
        r.statistic = std::numeric_limits<double>::infinity();
        r.p_value = 0;
        r.flags.push_back("zero_residual_variance");
        return r;
    }
    r.statistic = (ss_cond / df1) / (ss_err / df2);
    r.p_value = f_upper_tail(r.statistic, df1, df2);
    return r;
}

} // namespace msgen::stats
