#ifndef GLMEIV_FAMILY_HPP
#define GLMEIV_FAMILY_HPP

#include <cmath>
#include <stdexcept>
#include <string>

#include "glmeiv/math.hpp"

namespace glmeiv {

/// Response distribution + link pair. Three pairs are supported:
/// Gaussian/identity (unit variance), Poisson/log, and negative
/// binomial/log with fixed size (inverse dispersion) s.
struct Family {
    enum class Kind { gaussian_identity, poisson_log, negbin_log };

    Kind kind = Kind::poisson_log;
    double size = 0.0;       // NB only
    bool size_known = true;  // false when size was estimated from data

    static Family gaussian() { return Family{Kind::gaussian_identity, 0.0, true}; }
    static Family poisson() { return Family{Kind::poisson_log, 0.0, true}; }
    static Family negbin(double s, bool known = true) {
        if (!(s > 0.0)) throw std::invalid_argument("negbin family requires size > 0");
        return Family{Kind::negbin_log, s, known};
    }

    bool is_count() const { return kind != Kind::gaussian_identity; }
    bool log_link() const { return kind != Kind::gaussian_identity; }

    std::string name() const {
        switch (kind) {
            case Kind::gaussian_identity: return "gaussian-identity";
            case Kind::poisson_log: return "poisson-log";
            case Kind::negbin_log: return "negbin-log";
        }
        return "?";
    }

    static Family parse(const std::string& s, double nb_size = 0.0, bool known = true) {
        if (s == "gaussian-identity" || s == "gaussian") return gaussian();
        if (s == "poisson-log" || s == "poisson") return poisson();
        if (s == "negbin-log" || s == "negbin" || s == "nb") return negbin(nb_size, known);
        throw std::invalid_argument("unknown family: " + s);
    }

    double require_size() const {
        if (kind == Kind::negbin_log && !(size > 0.0))
            throw std::logic_error("negbin family used without a size parameter");
        return size;
    }

    // Link-scale kernel functions (argument is the linear component).
    double linkinv(double x) const {
        return kind == Kind::gaussian_identity ? x : std::exp(x);
    }
    double mu_eta(double x) const {
        return kind == Kind::gaussian_identity ? 1.0 : std::exp(x);
    }
    double mu_eta_prime(double x) const {
        return kind == Kind::gaussian_identity ? 0.0 : std::exp(x);
    }
    double link(double mu) const {
        return kind == Kind::gaussian_identity ? mu : std::log(mu);
    }

    // Mean-scale kernel functions.
    double variance(double mu) const {
        switch (kind) {
            case Kind::gaussian_identity: return 1.0;
            case Kind::poisson_log:
                if (!(mu > 0.0)) throw std::domain_error("poisson variance: mu must be positive");
                return mu;
            case Kind::negbin_log:
                if (!(mu > 0.0)) throw std::domain_error("negbin variance: mu must be positive");
                return mu + mu * mu / require_size();
        }
        return 0.0;
    }
    double skewness(double mu) const {
        switch (kind) {
            case Kind::gaussian_identity: return 0.0;
            case Kind::poisson_log:
                if (!(mu > 0.0)) throw std::domain_error("poisson skewness: mu must be positive");
                return 1.0 / std::sqrt(mu);
            case Kind::negbin_log: {
                if (!(mu > 0.0)) throw std::domain_error("negbin skewness: mu must be positive");
                double s = require_size();
                return (2.0 * mu + s) / (std::sqrt(s * mu) * std::sqrt(mu + s));
            }
        }
        return 0.0;
    }

    /// Log mass (count families) or log density (Gaussian, unit variance).
    /// mu is clamped to [1e-300, 1e300] so transient EM iterates cannot
    /// produce log(0); clamps are counted through the optional pointer.
    double log_density(double y, double mu, long* clamp_count = nullptr) const {
        if (is_count() && y < 0.0) throw std::domain_error("count response must be >= 0");
        if (is_count()) {
            if (mu < 1e-300 || mu > 1e300) {
                mu = std::clamp(mu, 1e-300, 1e300);
                if (clamp_count) ++*clamp_count;
            }
        }
        switch (kind) {
            case Kind::gaussian_identity: {
                double r = y - mu;
                return -0.5 * kLogTwoPi - 0.5 * r * r;
            }
            case Kind::poisson_log:
                return y * std::log(mu) - mu - std::lgamma(y + 1.0);
            case Kind::negbin_log: {
                double s = require_size();
                return std::lgamma(y + s) - std::lgamma(s) - std::lgamma(y + 1.0) +
                       s * std::log(s / (s + mu)) + y * std::log(mu / (s + mu));
            }
        }
        return 0.0;
    }
};

struct KernelValues {
    double linkinv, variance, mu_eta, skewness, mu_eta_prime;
};

/// The five family-object entries, evaluated at x (link scale) and mu
/// (mean scale).
inline KernelValues kernel_functions(const Family& fam, double x, double mu) {
    return KernelValues{fam.linkinv(x), fam.variance(mu), fam.mu_eta(x), fam.skewness(mu),
                        fam.mu_eta_prime(x)};
}

}  // namespace glmeiv

#endif
