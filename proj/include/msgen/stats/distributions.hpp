#pragma once

// Special functions and null distributions used by the hypothesis tests.

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>

#include "msgen/error.hpp"

namespace msgen::stats {

/// Regularized incomplete beta I_x(a, b), continued fraction (modified
/// Lentz) with the usual symmetry switch.
inline double incomplete_beta(double a, double b, double x)
{
    if (!(a > 0 && b > 0)) throw ValidationError("incomplete_beta: a and b must be positive");
    if (x <= 0) return 0.0;
    if (x >= 1) return 1.0;

    auto continued_fraction = [](double a, double b, double x) {
        constexpr double tiny = 1e-300;
        constexpr double eps = 1e-15;
        const double qab = a + b, qap = a + 1, qam = a - 1;
        double c = 1.0;
        double d = 1.0 - qab * x / qap;
        if (std::abs(d) < tiny) d = tiny;
        d = 1.0 / d;
        double h = d;
        for (int m = 1; m <= 10000; ++m) {
            const double m2 = 2.0 * m;
            double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
            d = 1.0 + aa * d;
            if (std::abs(d) < tiny) d = tiny;
            c = 1.0 + aa / c;
            if (std::abs(c) < tiny) c = tiny;
            d = 1.0 / d;
            h *= d * c;
            aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
            d = 1.0 + aa * d;
            if (std::abs(d) < tiny) d = tiny;
            c = 1.0 + aa / c;
            if (std::abs(c) < tiny) c = tiny;
            d = 1.0 / d;
            const double del = d * c;
            h *= del;
            if (std::abs(del - 1.0) < eps) return h;
        }
        throw NumericalError("incomplete_beta: continued fraction did not converge");
    };

    const double log_front =
        std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
    const double front = std::exp(log_front);
    if (x < (a + 1) / (a + b + 2))
        return front * continued_fraction(a, b, x) / a;
    return 1.0 - front * continued_fraction(b, a, 1 - x) / b;
}

/// Upper tail P(F > f) of the F distribution with (df1, df2) degrees of freedom.
inline double f_upper_tail(double f, double df1, double df2)
{
    if (!(df1 > 0 && df2 > 0)) throw ValidationError("f_upper_tail: degrees of freedom must be positive");
    if (!(f > 0)) return 1.0;
    if (std::isinf(f)) return 0.0;
    return incomplete_beta(df2 / 2, df1 / 2, df2 / (df2 + df1 * f));
}

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

inline double normal_pdf(double z) { return std::exp(-0.5 * z * z) / std::sqrt(2 * std::numbers::pi); }

/// Adaptive Gauss-Kronrod (7/15) quadrature on [a, b] to absolute tolerance tol.
inline double integrate(const std::function<double(double)>& f, double a, double b, double tol, int depth = 0)
{
    static constexpr std::array<double, 8> xk = {0.991455371120812639206854697526329, 0.949107912342758524526189684047851,
                                                 0.864864423359769072789712788640926, 0.741531185599394439863864773280788,
                                                 0.586087235467691130294144845693013, 0.405845151377397166906606412076961,
                                                 0.207784955007898467600689403773245, 0.0};
    static constexpr std::array<double, 8> wk = {0.022935322010529224963732008058970, 0.063092092629978553290700663189204,
                                                 0.104790010322250183839876322541518, 0.140653259715525918745189590510238,
                                                 0.169004726639267902826583426598550, 0.190350578064785409913256402421014,
                                                 0.204432940075298892414161999234649, 0.209482141084727828012999174891714};
    static constexpr std::array<double, 4> wg = {0.129484966168869693270611432679082, 0.279705391489276667901467771423780,
                                                 0.381830050505118944950369775488975, 0.417959183673469387755102040816327};
    const double c = 0.5 * (a + b), h = 0.5 * (b - a);
    const double fc = f(c);
    double kronrod = wk[7] * fc;
    double gauss = wg[3] * fc;
    for (int i = 0; i < 7; ++i) {
        const double s = f(c - h * xk[i]) + f(c + h * xk[i]);
        kronrod += wk[i] * s;
        if (i % 2 == 1) gauss += wg[i / 2] * s;
    }
    kronrod *= h;
    gauss *= h;
    if (std::abs(kronrod - gauss) <= tol || depth >= 40) return kronrod;
    return integrate(f, a, c, tol / 2, depth + 1) + integrate(f, c, b, tol / 2, depth + 1);
}

/// P(range of k standard normals <= w).
inline double normal_range_cdf(double w, int k, double tol = 1e-10)
{
    if (w <= 0) return 0.0;
    auto integrand = [w, k](double z) {
        const double inner = normal_cdf(z) - normal_cdf(z - w);
        return normal_pdf(z) * std::pow(std::max(inner, 0.0), k - 1);
    };
    constexpr double lo = -9.0, hi = 9.0;
    double total = 0;
    // split so the adaptive rule sees the structure near the peak
    const std::array<double, 7> knots = {lo, -3.0, -1.0, 0.0, 1.0, 3.0, hi};
    for (std::size_t i = 0; i + 1 < knots.size(); ++i) total += integrate(integrand, knots[i], knots[i + 1], tol / 6);
    return std::min(1.0, k * total);
}

/// CDF of the studentized range distribution q(k, df) by the double
/// integral over the scaled chi distribution of the variance estimate.
inline double studentized_range_cdf(double q, int k, double df, double tol = 1e-8)
{
    if (k < 2) throw ValidationError("studentized range needs k >= 2");
    if (!(df > 0)) throw ValidationError("studentized range needs df > 0");
    if (q <= 0) return 0.0;
    // density of s = sqrt(chi2_df / df)
    const double log_norm = (df / 2) * std::log(df) - std::lgamma(df / 2) - (df / 2 - 1) * std::numbers::ln2;
    auto outer = [&](double s) {
        if (s <= 0) return 0.0;
        const double log_density = log_norm + (df - 1) * std::log(s) - df * s * s / 2;
        if (log_density < -745) return 0.0;
        return std::exp(log_density) * normal_range_cdf(q * s, k, tol / 10);
    };
    const double spread = 1.0 / std::sqrt(2 * df);
    std::array<double, 13> knots{};
    const std::array<double, 13> offsets = {-60, -8, -4, -2, -1, -0.5, 0, 0.5, 1, 2, 4, 8, 60};
    for (std::size_t i = 0; i < knots.size(); ++i) knots[i] = std::max(0.0, 1.0 + offsets[i] * spread);
    knots.front() = 0.0;
    knots.back() = std::max(knots.back(), 12.0);
    double total = 0;
    for (std::size_t i = 0; i + 1 < knots.size(); ++i)
        if (knots[i + 1] > knots[i]) total += integrate(outer, knots[i], knots[i + 1], tol / 12);
    return std::clamp(total, 0.0, 1.0);
}

} // namespace msgen::stats
