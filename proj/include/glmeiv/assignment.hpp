#ifndef GLMEIV_ASSIGNMENT_HPP
#define GLMEIV_ASSIGNMENT_HPP

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <vector>

#include "glmeiv/em.hpp"
#include "glmeiv/louis.hpp"

namespace glmeiv {

/// Closed-form asymptotics of the thresholding estimator in the Gaussian
/// theoretical model (unit noise): attenuation factor gamma, relative bias
/// b = 1 - gamma, and the no-intercept limit/variance pair (l, avar).
struct ThresholdTheory {
    double beta_g1 = 0.0, pi = 0.0, c = 0.0, beta_g0 = 0.0;  // inputs
    double omega = 0.0;   // Phi(beta_g1 + beta_g0 - c)
    double zeta = 0.0;    // Phi(beta_g0 - c)
    double e_phat = 0.0;  // zeta(1-pi) + omega pi
    double gamma = 0.0;
    double bias = 0.0;  // 1 - gamma
    double l = 0.0;     // no-intercept asymptotic mean (set by bv_decomposition)
    double avar = 0.0;  // asymptotic variance of sqrt(n)(beta_hat - l)
};

/// gamma via the factored form
///   gamma = pi (1-pi) [Phi(a1) - Phi(a0)] / (B * C),
///   B = (1-pi)Phi(a0) + pi Phi(a1), C = (1-pi)Phi(-a0) + pi Phi(-a1),
/// evaluated on the log scale with log-normal-tail functions so extreme
/// thresholds (|c| up to 1e6 and beyond) stay finite.
inline ThresholdTheory attenuation_bias(double beta_g1, double pi, double c, double beta_g0) {
    if (!(pi > 0.0 && pi < 1.0)) throw std::domain_error("attenuation_bias: pi outside (0,1)");
    ThresholdTheory out;
    out.beta_g1 = beta_g1;
    out.pi = pi;
    out.c = c;
    out.beta_g0 = beta_g0;

    const double a1 = beta_g0 + beta_g1 - c;
    const double a0 = beta_g0 - c;
    out.omega = norm_cdf(a1);
    out.zeta = norm_cdf(a0);
    out.e_phat = out.zeta * (1.0 - pi) + out.omega * pi;

    if (beta_g1 == 0.0) {
        out.gamma = 0.0;
        out.bias = 1.0;
        return out;
    }
    const double hi = std::max(a1, a0), lo = std::min(a1, a0);
    const double lp0 = std::log1p(-pi), lp1 = std::log(pi);
    // Gamma is a ratio of same-scale tail masses; the dominant log terms are
    // cancelled analytically per branch so that only moderate differences of
    // log-tails remain (|c| ~ 1e6 would otherwise lose ~5 digits to the ulp
    // of log-values near -c^2/2).
    const bool swap = a0 > a1;  // beta_g1 < 0: numerator sign flips
    double log_gamma;
    if (hi <= 0.0) {
        // Lower tail: pivot on log Phi(hi).
        double delta = log_norm_cdf(lo) - log_norm_cdf(hi);
        double lB = swap ? log_sum_exp(lp0, lp1 + delta) : log_sum_exp(lp0 + delta, lp1);
        double logC = log_sum_exp(lp0 + log_norm_cdf(-a0), lp1 + log_norm_cdf(-a1));
        log_gamma = lp0 + lp1 + log1m_exp(delta) - lB - logC;
    } else if (lo >= 0.0) {
        // Upper tail: pivot on log Phibar(lo).
        double delta = log_norm_cdf(-hi) - log_norm_cdf(-lo);
        double lC = swap ? log_sum_exp(lp0 + delta, lp1) : log_sum_exp(lp0, lp1 + delta);
        double logB = log_sum_exp(lp0 + log_norm_cdf(a0), lp1 + log_norm_cdf(a1));
        log_gamma = lp0 + lp1 + log1m_exp(delta) - logB - lC;
    } else {
        // Straddling zero: every factor is O(1); the definition form is exact.
        double e = out.e_phat;
        double g = pi * (out.omega - e) / (e * (1.0 - e));
        out.gamma = g;
        out.bias = 1.0 - g;
        return out;
    }
    out.gamma = (beta_g1 > 0.0 ? 1.0 : -1.0) * std::exp(log_gamma);
    out.bias = 1.0 - out.gamma;
    return out;
}

/// Limiting mean and asymptotic variance of the no-intercept thresholding
/// estimator (intercepts fixed at zero, so omega = Phi(beta_g - c) and
/// zeta = Phi(-c)).
inline ThresholdTheory bv_decomposition(double beta_m, double beta_g, double pi, double c) {
    if (!(pi > 0.0 && pi < 1.0)) throw std::domain_error("bv_decomposition: pi outside (0,1)");
    ThresholdTheory out;
    out.beta_g1 = beta_g;
    out.pi = pi;
    out.c = c;
    out.omega = norm_cdf(beta_g - c);
    out.zeta = norm_cdf(-c);
    out.e_phat = pi * out.omega + (1.0 - pi) * out.zeta;
    out.l = beta_m * out.omega * pi / out.e_phat;
    out.avar = (beta_m * out.omega * pi * (beta_m - 2.0 * out.l) +
                out.e_phat * (1.0 + out.l * out.l)) /
               (out.e_phat * out.e_phat);
    return out;
}

/// Bayes-optimal classification boundary between mixture components with
/// means mu0 < mu1 and mixing probability pi. Closed form per family;
/// returned as a real, callers compare counts with >= (ties classify as
/// perturbed).
inline double bayes_threshold(const Family& fam, double mu0, double mu1, double pi) {
    if (!(pi > 0.0 && pi < 1.0)) throw std::domain_error("bayes_threshold: pi outside (0,1)");
    if (mu0 == mu1)
        throw DegenerateComponentError("bayes_threshold: equal component means (no separation)");
    if (fam.is_count() && !(mu1 > mu0 && mu0 > 0.0))
        throw std::domain_error("bayes_threshold: count families need mu1 > mu0 > 0");
    const double lodds = std::log(pi) - std::log1p(-pi);
    switch (fam.kind) {
        case Family::Kind::gaussian_identity:
            return 0.5 * (mu0 + mu1) - lodds / (mu1 - mu0);
        case Family::Kind::poisson_log:
            return (mu0 - mu1 + lodds) / (std::log(mu0) - std::log(mu1));
        case Family::Kind::negbin_log: {
            double s = fam.require_size();
            double num = s * (std::log(mu0 + s) - std::log(mu1 + s)) + lodds;
            double den = std::log(mu0) + std::log(mu1 + s) - std::log(mu1) - std::log(mu0 + s);
            return num / den;
        }
    }
    return 0.0;
}

struct CovariateBayesThreshold {
    double threshold = 0.0;
    Eigen::Index cells_used = 0;
    Eigen::Index cells_excluded = 0;  // mu1 <= mu0 under the fitted model
};

/// Per-cell Bayes boundaries from a fitted gRNA model (cell means under
/// p=0/1 including covariates and offsets), averaged across cells.
inline CovariateBayesThreshold covariate_bayes_threshold(const VectorXd& beta_g, double pi,
                                                         const Dataset& data,
                                                         const Family& fam_g) {
    VectorXd l0, l1;
    detail::modality_linear(beta_g, data.design, data.offset_g, l0, l1);
    CovariateBayesThreshold out;
    double sum = 0.0;
    for (Eigen::Index i = 0; i < data.n(); ++i) {
        double mu0 = fam_g.linkinv(l0[i]), mu1 = fam_g.linkinv(l1[i]);
        if (!(mu1 > mu0) || (fam_g.is_count() && !(mu0 > 0.0))) {
            ++out.cells_excluded;
            continue;
        }
        sum += bayes_threshold(fam_g, mu0, mu1, pi);
        ++out.cells_used;
    }
    if (out.cells_used == 0)
        throw DegenerateComponentError(
            "covariate_bayes_threshold: no cell had mu1 > mu0 under the fitted model");
    out.threshold = sum / static_cast<double>(out.cells_used);
    return out;
}

/// Componentwise medians of sampled per-pair gRNA fits fed through the
/// per-cell boundary average: the dataset-wide threshold.
inline CovariateBayesThreshold dataset_wide_threshold(
    const std::vector<VectorXd>& beta_g_fits, const std::vector<double>& pi_fits,
    const Dataset& data, const Family& fam_g) {
    if (beta_g_fits.empty() || beta_g_fits.size() != pi_fits.size())
        throw DataError("dataset_wide_threshold: empty or mismatched fit collection");
    auto median = [](std::vector<double> v) {
        std::sort(v.begin(), v.end());
        std::size_t n = v.size();
        return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
    };
    Eigen::Index d = beta_g_fits.front().size();
    VectorXd beta_med(d);
    for (Eigen::Index j = 0; j < d; ++j) {
        std::vector<double> col;
        col.reserve(beta_g_fits.size());
        for (const auto& b : beta_g_fits) col.push_back(b[j]);
        beta_med[j] = median(col);
    }
    return covariate_bayes_threshold(beta_med, median(pi_fits), data, fam_g);
}

struct ThresholdedRegression {
    VectorXi phat;
    GlmFit fit;
    WaldRecord beta1_m;
};

/// Thresholded regression: impute p-hat = 1{g >= c}, fit the gene GLM with
/// the imputed perturbation column, and report standard Wald inference on
/// the perturbation coefficient.
inline ThresholdedRegression thresholded_regression(const Dataset& data, double c,
                                                    const Family& fam_m, double level = 0.95) {
    if (!std::isfinite(c)) throw std::domain_error("thresholded_regression: threshold not finite");
    const Eigen::Index n = data.n();
    ThresholdedRegression out;
    out.phat.resize(n);
    Eigen::Index ones = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
        out.phat[i] = data.g[i] >= c ? 1 : 0;
        ones += out.phat[i];
    }
    if (ones == 0 || ones == n)
        throw DegenerateComponentError(
            "thresholded_regression: imputed assignments are constant (" +
            std::to_string(ones == 0 ? 0 : 1) + " everywhere)");

    MatrixXd X(n, data.design.cols() + 1);
    X.col(0) = data.design.X.col(0);
    X.col(1) = out.phat.cast<double>();
    X.rightCols(data.design.cols() - 1) = data.design.X.rightCols(data.design.cols() - 1);
    VectorXd w = VectorXd::Ones(n);
    out.fit = fit_weighted_glm(X, data.m, w, data.offset_m, fam_m,
                               data.design.augmented_names());
    out.beta1_m = glm_wald(out.fit, 1, level, "beta1_m");
    return out;
}

struct MixtureAssignment {
    VectorXi assignments;  // 1 where posterior > 1/2
    VectorXd posterior;    // t_i(1)
    GlmEivParams params;   // beta_g and pi of the fitted gRNA model
    bool converged = false;
    bool identified = true;
    int n_glm_fits = 0;
};

/// gRNA mixture assignment: fits the latent-variable gRNA model (the
/// beta_g/pi subset of GLM-EIV, E step on the gRNA density ratio alone)
/// with the same accelerations, then thresholds the posterior at 1/2.
inline MixtureAssignment mixture_assign(const VectorXd& g, const DesignMatrix& design,
                                        const VectorXd& offsets, const Family& fam_g,
                                        const EmConfig& cfg) {
    design.validate();
    const Eigen::Index n = g.size();
    if ((g.array() == g[0]).all())
        throw DataError("mixture_assign: gRNA counts are constant");

    Dataset data;
    data.m = VectorXd::Zero(n);
    data.g = g;
    data.design = design;
    data.offset_m = VectorXd::Zero(n);
    data.offset_g = offsets;

    VectorXd ones = VectorXd::Ones(n);
    GlmFit nuisance = fit_weighted_glm(design, g, ones, offsets, fam_g);
    const VectorXd& fhat = nuisance.fitted_linear;

    // Reduced gRNA-only EM: closed-form M steps on the fitted offsets.
    long clamps = 0;
    detail::DensityEvaluator dens(fam_g, g);
    VectorXd ld_base, ld1, shifted;
    dens.eval(fhat, ld_base, &clamps);
    const double collapsed = ld_base.sum();
    double best_ll = -std::numeric_limits<double>::infinity();
    double best_pi = 0.1, best_b1 = 1.0;
    bool any_converged = false;
    for (int b = 0; b < cfg.n_restarts; ++b) {
        Rng rng(cfg.seed, static_cast<std::uint64_t>(b), 0x9a55169);
        double pi = rng.uniform(0.001, 0.45);
        double b1 = rng.uniform(-2.0 * cfg.random_effect_scale, 2.0 * cfg.random_effect_scale);
        shifted = fhat.array() + b1;
        dens.eval(shifted, ld1, &clamps);
        double ll_prev = -std::numeric_limits<double>::infinity(), ll = ll_prev;
        bool converged = false;
        for (int it = 0; it < cfg.max_iter; ++it) {
            VectorXd t1 = detail::memberships_from_log_densities(pi, ld_base, ld1);
            t1 = t1.cwiseMax(1e-12).cwiseMin(1.0 - 1e-12);
            pi = t1.mean();
            b1 = fit_intercept_plus_offset(g, fhat, t1, fam_g);
            shifted = fhat.array() + b1;
            dens.eval(shifted, ld1, &clamps);
            ll = detail::loglik_from_log_densities(pi, ld_base, ld1);
            if (std::abs(ll - ll_prev) / (std::abs(ll) + 1.0) < cfg.tol) {
                converged = true;
                break;
            }
            ll_prev = ll;
        }
        any_converged = any_converged || converged;
        if (ll > best_ll) {
            best_ll = ll;
            best_pi = pi;
            best_b1 = b1;
        }
    }

    double shift = 0.0;
    if (best_pi > 0.5) {
        best_pi = 1.0 - best_pi;
        shift = best_b1;
        best_b1 = -best_b1;
    }

    GlmEivParams start;
    const Eigen::Index d = design.cols() + 1;
    start.pi = std::clamp(best_pi, 1e-4, 0.5);
    start.beta_m = VectorXd::Zero(d);
    start.beta_g = VectorXd::Zero(d);
    start.beta_g[0] = nuisance.coefficients[0] + shift;
    start.beta_g[1] = best_b1;
    for (Eigen::Index j = 1; j < d - 1; ++j) start.beta_g[j + 1] = nuisance.coefficients[j];

    GlmEivFit fit = detail::run_em(start, data, {fam_g, fam_g}, cfg, /*grna_only=*/true);

    MixtureAssignment out;
    out.posterior = fit.memberships;
    out.assignments.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) out.assignments[i] = out.posterior[i] > 0.5 ? 1 : 0;
    out.params = fit.params;
    out.converged = fit.converged && any_converged;
    out.identified = best_ll - collapsed > 6.0;
    out.n_glm_fits = fit.n_glm_fits + 1;
    return out;
}

}  // namespace glmeiv

#endif
