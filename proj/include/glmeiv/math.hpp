#ifndef GLMEIV_MATH_HPP
#define GLMEIV_MATH_HPP

#include <cmath>
#include <limits>
#include <stdexcept>

namespace glmeiv {

inline constexpr double kLogTwoPi = 1.8378770664093454836;

inline double norm_pdf(double x) {
    return std::exp(-0.5 * x * x - 0.5 * kLogTwoPi);
}

inline double norm_cdf(double x) {
    return 0.5 * std::erfc(-x * M_SQRT1_2);
}

/// log Phi(x), valid far into the lower tail where Phi underflows.
inline double log_norm_cdf(double x) {
    if (x > -37.0) {
        double p = 0.5 * std::erfc(-x * M_SQRT1_2);
        if (p > 0.0) return std::log(p);
    }
    // Asymptotic expansion of the Mills ratio for x << 0.
    double z = -x;
    double z2 = z * z;
    double series = 1.0 - 1.0 / z2 + 3.0 / (z2 * z2) - 15.0 / (z2 * z2 * z2);
    return -0.5 * z2 - 0.5 * kLogTwoPi - std::log(z) + std::log(series);
}

/// Standard normal quantile (Acklam's rational approximation plus one
/// Newton polish step; ~1e-15 absolute error).
inline double norm_quantile(double p) {
    if (!(p > 0.0 && p < 1.0)) throw std::domain_error("norm_quantile: p outside (0,1)");
    static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                               -2.759285104469687e+02, 1.383577518672690e+02,
                               -3.066479806614716e+01, 2.506628277459239e+00};
    static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                               -1.556989798598866e+02, 6.680131188771972e+01,
                               -1.328068155288572e+01};
    static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                               -2.400758277161838e+00, -2.549732539343734e+00,
                               4.374664141464968e+00,  2.938163982698783e+00};
    static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                               2.445134137142996e+00, 3.754408661907416e+00};
    const double plow = 0.02425, phigh = 1.0 - plow;
    double x;
    if (p < plow) {
        double q = std::sqrt(-2.0 * std::log(p));
        x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    } else if (p <= phigh) {
        double q = p - 0.5, r = q * q;
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
            (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
    } else {
        double q = std::sqrt(-2.0 * std::log(1.0 - p));
        x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    }
    double e = norm_cdf(x) - p;
    x -= e * std::sqrt(2.0 * M_PI) * std::exp(0.5 * x * x);
    return x;
}

/// Two-sided normal p-value for a z statistic.
inline double norm_two_sided_p(double z) {
    return std::erfc(std::abs(z) * M_SQRT1_2);
}

/// log(exp(a) + exp(b)) without overflow.
inline double log_sum_exp(double a, double b) {
    if (a == -std::numeric_limits<double>::infinity()) return b;
    if (b == -std::numeric_limits<double>::infinity()) return a;
    double m = std::max(a, b);
    return m + std::log1p(std::exp(-std::abs(a - b)));
}

/// log(1 - exp(x)) for x <= 0.
inline double log1m_exp(double x) {
    if (x >= 0.0) return -std::numeric_limits<double>::infinity();
    return (x > -M_LN2) ? std::log(-std::expm1(x)) : std::log1p(-std::exp(x));
}

}  // namespace glmeiv

#endif
