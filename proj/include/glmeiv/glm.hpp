#ifndef GLMEIV_GLM_HPP
#define GLMEIV_GLM_HPP

#include <Eigen/Dense>
#include <algorithm>
#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/special_functions/trigamma.hpp>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "glmeiv/data.hpp"
#include "glmeiv/errors.hpp"
#include "glmeiv/family.hpp"
#include "glmeiv/math.hpp"

namespace glmeiv {

struct GlmFit {
    VectorXd coefficients;
    VectorXd fitted_linear;  // <x_i, beta> + o_i
    VectorXd fitted_mean;
    double log_likelihood = 0.0;
    bool converged = false;
    int iterations = 0;
    MatrixXd fisher_info;  // X^T W X at the solution (expected information)
};

struct WaldRecord {
    std::string name;
    double estimate = 0.0, se = 0.0, ci_lo = 0.0, ci_hi = 0.0, z = 0.0, p_value = 1.0;
};

inline WaldRecord wald_record(const std::string& name, double estimate, double se,
                              double level) {
    double mult = norm_quantile(1.0 - (1.0 - level) / 2.0);
    double z = se > 0.0 ? estimate / se : 0.0;
    return WaldRecord{name,           estimate,          se, estimate - mult * se,
                      estimate + mult * se, z, norm_two_sided_p(z)};
}

namespace detail {

inline double weighted_log_lik(const Family& fam, const VectorXd& y, const VectorXd& mu,
                               const VectorXd& w, long* clamps = nullptr) {
    double ll = 0.0;
    for (Eigen::Index i = 0; i < y.size(); ++i)
        if (w[i] > 0.0) ll += w[i] * fam.log_density(y[i], mu[i], clamps);
    return ll;
}

/// Weighted log-likelihood up to terms constant in the coefficients; the
/// IRLS deviance guard and convergence checks only need differences, so the
/// per-row lgamma constants are dropped.
inline double loglik_kernel(const Family& fam, const VectorXd& y, const VectorXd& eta,
                            const VectorXd& mu, const VectorXd& w) {
    double ll = 0.0;
    switch (fam.kind) {
        case Family::Kind::gaussian_identity:
            for (Eigen::Index i = 0; i < y.size(); ++i) {
                double r = y[i] - mu[i];
                ll -= 0.5 * w[i] * r * r;
            }
            break;
        case Family::Kind::poisson_log:
            for (Eigen::Index i = 0; i < y.size(); ++i)
                ll += w[i] * (y[i] * eta[i] - mu[i]);
            break;
        case Family::Kind::negbin_log: {
            double s = fam.require_size();
            double log_s = std::log(s);
            for (Eigen::Index i = 0; i < y.size(); ++i) {
                double lsp = std::log(s + mu[i]);
                ll += w[i] * (y[i] * (eta[i] - lsp) + s * (log_s - lsp));
            }
            break;
        }
    }
    return ll;
}

inline std::string join_names(const std::vector<std::string>& names) {
    std::string out;
    for (std::size_t i = 0; i < names.size(); ++i) {
        if (i) out += ", ";
        out += names[i];
    }
    return out;
}

}  // namespace detail

struct GlmFitOptions {
    const VectorXd* beta_init = nullptr;  // warm start (EM M steps reuse the iterate)
    bool compute_loglik = true;           // skip the constant-bearing final pass
};

/// Weighted GLM fit via IRLS with fixed offsets. Rows with weight below
/// 1e-12 are dropped from the working set. Iterates until the weighted
/// score is numerically zero (sup-norm below 1e-10 on a problem-scaled
/// basis) or 50 iterations; the deviance is guarded by up to 10 step
/// halvings.
inline GlmFit fit_weighted_glm(const MatrixXd& X, const VectorXd& y, const VectorXd& weights,
                               const VectorXd& offsets, const Family& fam,
                               const std::vector<std::string>& column_names = {},
                               const GlmFitOptions& opt = {}) {
    const Eigen::Index n = y.size(), p = X.cols();
    if (X.rows() != n || weights.size() != n || offsets.size() != n)
        throw DataError("fit_weighted_glm: length mismatch");
    if (!(weights.sum() > 0.0)) throw DataError("fit_weighted_glm: all weights are zero");

    constexpr double kWeightFloor = 1e-12;
    Eigen::Index na = 0;
    for (Eigen::Index i = 0; i < n; ++i)
        if (weights[i] >= kWeightFloor) ++na;
    if (na < p) throw DataError("fit_weighted_glm: fewer active rows than coefficients");

    // Rows below the weight floor are dropped; when none are, work on the
    // caller's storage directly.
    MatrixXd X_store;
    VectorXd y_store, w_store, o_store;
    if (na < n) {
        X_store.resize(na, p);
        y_store.resize(na);
        w_store.resize(na);
        o_store.resize(na);
        Eigen::Index k = 0;
        for (Eigen::Index i = 0; i < n; ++i) {
            if (weights[i] < kWeightFloor) continue;
            X_store.row(k) = X.row(i);
            y_store[k] = y[i];
            w_store[k] = weights[i];
            o_store[k] = offsets[i];
            ++k;
        }
    }
    const MatrixXd& Xa = na < n ? X_store : X;
    const VectorXd& ya = na < n ? y_store : y;
    const VectorXd& wa = na < n ? w_store : weights;
    const VectorXd& oa = na < n ? o_store : offsets;

    VectorXd mu(na), eta(na);
    VectorXd beta = VectorXd::Zero(p);
    double ll = -std::numeric_limits<double>::infinity();
    bool have_beta = false;
    bool converged = false;
    int iter = 0;

    if (opt.beta_init && opt.beta_init->size() == p) {
        beta = *opt.beta_init;
        eta = Xa * beta + oa;
        mu = eta.unaryExpr([&](double t) { return fam.linkinv(t); });
        ll = detail::loglik_kernel(fam, ya, eta, mu, wa);
        have_beta = std::isfinite(ll);
    }
    if (!have_beta) {
        // Mean start: y + 0.5 for count families, the response for Gaussian.
        for (Eigen::Index k = 0; k < na; ++k) {
            mu[k] = fam.is_count() ? ya[k] + 0.5 : ya[k];
            eta[k] = fam.link(std::max(mu[k], fam.is_count() ? 1e-8 : mu[k]));
        }
    }

    // Score entries are n-term sums of O(|y|) values; their achievable floor
    // is the pairwise-summation rounding scale, not an absolute epsilon.
    const double y_scale = 1.0 + (wa.array() * ya.array().abs()).sum();
    const double score_tol =
        std::max(1e-10, 8.0 * std::numeric_limits<double>::epsilon() *
                            std::log2(static_cast<double>(na) + 2.0) * y_scale);

    VectorXd irls_w(na), zresp(na), score(p);
    for (iter = 1; iter <= 50; ++iter) {
        for (Eigen::Index k = 0; k < na; ++k) {
            double me = fam.mu_eta(eta[k]);
            double v = fam.variance(fam.is_count() ? std::max(mu[k], 1e-300) : mu[k]);
            irls_w[k] = wa[k] * me * me / v;
            zresp[k] = (eta[k] - oa[k]) + (ya[k] - mu[k]) / me;
        }
        if (!irls_w.allFinite() || !zresp.allFinite()) {
            std::ostringstream os;
            os << "fit_weighted_glm: non-finite working quantities at iteration " << iter
               << "; last coefficients: " << beta.transpose();
            throw NonconvergenceError(os.str());
        }

        VectorXd sw = irls_w.array().sqrt();
        MatrixXd Xw = sw.asDiagonal() * Xa;
        VectorXd zw = sw.array() * zresp.array();
        Eigen::ColPivHouseholderQR<MatrixXd> qr(Xw);
        qr.setThreshold(1e-10);
        if (qr.rank() < p) {
            std::vector<std::string> bad;
            const auto& piv = qr.colsPermutation().indices();
            for (Eigen::Index j = qr.rank(); j < p; ++j) {
                Eigen::Index col = piv[j];
                bad.push_back(col < static_cast<Eigen::Index>(column_names.size())
                                  ? column_names[col]
                                  : "column" + std::to_string(col));
            }
            throw SingularFitError("fit_weighted_glm: weighted design is rank-deficient; "
                                   "collinear columns: " +
                                   detail::join_names(bad));
        }
        VectorXd beta_new = qr.solve(zw);

        // Deviance guard: halve the step while the weighted log-likelihood
        // (constant terms dropped) decreases.
        VectorXd eta_new = Xa * beta_new + oa;
        VectorXd mu_new = eta_new.unaryExpr([&](double t) { return fam.linkinv(t); });
        double ll_new = detail::loglik_kernel(fam, ya, eta_new, mu_new, wa);
        if (have_beta) {
            double step = 1.0;
            int halvings = 0;
            const double ll_slack = 1e-11 * (1.0 + std::abs(ll));
            while ((!std::isfinite(ll_new) || ll_new < ll - ll_slack) && halvings < 10) {
                step *= 0.5;
                ++halvings;
                beta_new = step * beta_new + (1.0 - step) * beta;
                eta_new = Xa * beta_new + oa;
                mu_new = eta_new.unaryExpr([&](double t) { return fam.linkinv(t); });
                ll_new = detail::loglik_kernel(fam, ya, eta_new, mu_new, wa);
            }
        }

        double delta = have_beta ? (beta_new - beta).cwiseAbs().maxCoeff() : 1.0;
        beta = beta_new;
        eta = eta_new;
        mu = mu_new;
        ll = ll_new;
        have_beta = true;

        for (Eigen::Index j = 0; j < p; ++j) score[j] = 0.0;
        for (Eigen::Index k = 0; k < na; ++k) {
            double me = fam.mu_eta(eta[k]);
            double v = fam.variance(fam.is_count() ? std::max(mu[k], 1e-300) : mu[k]);
            score += wa[k] * (ya[k] - mu[k]) * me / v * Xa.row(k).transpose();
        }
        if (score.cwiseAbs().maxCoeff() < score_tol ||
            delta < 1e-13 * (1.0 + beta.cwiseAbs().maxCoeff())) {
            converged = true;
            break;
        }
    }

    GlmFit fit;
    fit.coefficients = beta;
    fit.fitted_linear = X * beta + offsets;
    fit.fitted_mean = fit.fitted_linear.unaryExpr([&](double t) { return fam.linkinv(t); });
    fit.log_likelihood = opt.compute_loglik
                             ? detail::weighted_log_lik(fam, ya, mu, wa)
                             : std::numeric_limits<double>::quiet_NaN();
    fit.converged = converged;
    fit.iterations = iter;
    fit.fisher_info.setZero(p, p);
    for (Eigen::Index k = 0; k < na; ++k) {
        double me = fam.mu_eta(eta[k]);
        double v = fam.variance(fam.is_count() ? std::max(mu[k], 1e-300) : mu[k]);
        fit.fisher_info.selfadjointView<Eigen::Lower>().rankUpdate(Xa.row(k).transpose(),
                                                                   wa[k] * me * me / v);
    }
    fit.fisher_info = fit.fisher_info.selfadjointView<Eigen::Lower>();
    return fit;
}

inline GlmFit fit_weighted_glm(const DesignMatrix& design, const VectorXd& y,
                               const VectorXd& weights, const VectorXd& offsets,
                               const Family& fam) {
    return fit_weighted_glm(design.X, y, weights, offsets, fam, design.column_names);
}

/// Wald record for one coefficient of a plain GLM fit.
inline WaldRecord glm_wald(const GlmFit& fit, Eigen::Index coef, double level,
                           const std::string& name = "") {
    MatrixXd cov = fit.fisher_info.ldlt().solve(
        MatrixXd::Identity(fit.fisher_info.rows(), fit.fisher_info.cols()));
    double se = std::sqrt(std::max(cov(coef, coef), 0.0));
    return wald_record(name, fit.coefficients[coef], se, level);
}

/// Closed-form MLE of the intercept-plus-offset model. Gaussian and Poisson
/// are exact finite-sample maximizers; the NB MLE is approximated by the
/// Poisson formula (asymptotically exact).
inline double fit_intercept_plus_offset(const VectorXd& y, const VectorXd& offsets,
                                        const VectorXd& weights, const Family& fam) {
    if (y.size() != offsets.size() || y.size() != weights.size())
        throw DataError("fit_intercept_plus_offset: length mismatch");
    double sw = weights.sum();
    if (!(sw > 0.0)) throw DataError("fit_intercept_plus_offset: all weights are zero");
    if (fam.kind == Family::Kind::gaussian_identity)
        return (weights.array() * (y - offsets).array()).sum() / sw;

    double swy = (weights.array() * y.array()).sum();
    if (!(swy > 0.0))
        throw DegenerateComponentError(
            "fit_intercept_plus_offset: weighted response sum is zero under a log link "
            "(MLE diverges to -infinity)");
    double omax = offsets.maxCoeff();
    double sweo = (weights.array() * (offsets.array() - omax).exp()).sum();
    return std::log(swy) - (omax + std::log(sweo));
}

struct NbSizeEstimate {
    double size = 0.0;
    bool effectively_poisson = false;  // hit the upper clamp
    bool underdispersed_warning = false;
    int outer_iterations = 0;
};

namespace detail {

/// Profile score and negative curvature of the NB log-likelihood in s with
/// the means held fixed.
inline void nb_size_score(double s, const VectorXd& y, const VectorXd& mu, double& score,
                          double& info) {
    score = 0.0;
    info = 0.0;
    for (Eigen::Index i = 0; i < y.size(); ++i) {
        score += boost::math::digamma(y[i] + s) - boost::math::digamma(s) + std::log(s) +
                 1.0 - std::log(s + mu[i]) - (y[i] + s) / (mu[i] + s);
        info += boost::math::trigamma(s) - boost::math::trigamma(y[i] + s) - 1.0 / s +
                2.0 / (mu[i] + s) - (y[i] + s) / ((mu[i] + s) * (mu[i] + s));
    }
}

inline double nb_size_newton(double s0, const VectorXd& y, const VectorXd& mu) {
    double t = std::log(std::clamp(s0, 1e-2, 1e6));
    for (int it = 0; it < 100; ++it) {
        double s = std::exp(t);
        double score, info;
        nb_size_score(s, y, mu, score, info);
        double d1 = s * score;               // d/dt
        double d2 = -s * s * info + d1;      // d2/dt2
        double step = d2 < 0.0 ? -d1 / d2 : (d1 > 0.0 ? 0.5 : -0.5);
        step = std::clamp(step, -2.0, 2.0);
        t += step;
        t = std::clamp(t, std::log(1e-2), std::log(1e6));
        if (std::abs(step) < 1e-10) break;
    }
    return std::exp(t);
}

}  // namespace detail

/// Alternating NB size estimation: IRLS for the coefficients given s, then
/// a Newton pass for s in log scale given the fitted means, repeated until
/// the size stabilizes. The estimate is clamped to [1e-2, 1e6]; hitting the
/// upper clamp flags the data as effectively Poisson.
inline NbSizeEstimate estimate_nb_size(const VectorXd& y, const DesignMatrix& design,
                                       const VectorXd& offsets) {
    const Eigen::Index n = y.size();
    design.validate();
    if (n < 10 * (design.cols() + 1))
        throw DataError("estimate_nb_size: need at least 10 rows per coefficient");
    double ybar = y.mean();
    double yvar = (y.array() - ybar).square().sum() / std::max<double>(n - 1, 1);
    if (yvar <= 0.0) throw DataError("estimate_nb_size: degenerate (constant) response");

    NbSizeEstimate out;
    out.underdispersed_warning = yvar <= ybar;

    VectorXd ones = VectorXd::Ones(n);
    GlmFit fit = fit_weighted_glm(design, y, ones, offsets, Family::poisson());
    VectorXd mu = fit.fitted_mean;

    double s = n / std::max(1e-8, ((y.array() / mu.array()) - 1.0).square().sum());
    s = std::clamp(s, 1e-2, 1e6);
    for (int outer = 1; outer <= 25; ++outer) {
        out.outer_iterations = outer;
        double s_new = detail::nb_size_newton(s, y, mu);
        fit = fit_weighted_glm(design, y, ones, offsets, Family::negbin(s_new));
        mu = fit.fitted_mean;
        double rel = std::abs(s_new - s) / (std::abs(s) + 1.0);
        s = s_new;
        if (rel < 1e-6) break;
    }
    out.size = s;
    out.effectively_poisson = s >= 1e6 * (1.0 - 1e-9);
    return out;
}

}  // namespace glmeiv

#endif
