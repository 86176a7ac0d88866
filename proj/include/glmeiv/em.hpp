#ifndef GLMEIV_EM_HPP
#define GLMEIV_EM_HPP

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "glmeiv/data.hpp"
#include "glmeiv/errors.hpp"
#include "glmeiv/family.hpp"
#include "glmeiv/glm.hpp"
#include "glmeiv/math.hpp"
#include "glmeiv/rng.hpp"

namespace glmeiv {

struct FamilyPair {
    Family m, g;
};

/// theta = (beta_m, beta_g, pi); coefficient layout [beta_0, beta_1, gamma...]
/// matching the augmented design [1, p, z].
struct GlmEivParams {
    VectorXd beta_m, beta_g;
    double pi = 0.0;

    void validate() const {
        if (!(pi > 0.0 && pi <= 0.5)) throw DataError("pi must lie in (0, 1/2]");
        if (!beta_m.allFinite() || !beta_g.allFinite())
            throw DataError("non-finite coefficients");
        if (beta_m.size() != beta_g.size() || beta_m.size() < 2)
            throw DataError("coefficient vectors must share length >= 2");
    }

    /// Component relabeling: pi <- 1-pi and, per modality, the baseline
    /// absorbs the perturbation effect. Leaves the marginal likelihood
    /// unchanged; applied whenever an iterate has pi > 1/2.
    GlmEivParams label_swapped() const {
        GlmEivParams out = *this;
        out.pi = 1.0 - pi;
        out.beta_m[0] += beta_m[1];
        out.beta_m[1] = -beta_m[1];
        out.beta_g[0] += beta_g[1];
        out.beta_g[1] = -beta_g[1];
        return out;
    }
};

namespace detail {

/// Linear components under p=0 and p=1 for one modality:
/// l0 = beta_0 + gamma^T z + o, l1 = l0 + beta_1.
inline void modality_linear(const VectorXd& beta, const DesignMatrix& design,
                            const VectorXd& offsets, VectorXd& l0, VectorXd& l1) {
    const Eigen::Index n = design.n();
    l0 = VectorXd::Constant(n, beta[0]) + offsets;
    for (Eigen::Index j = 1; j < design.cols(); ++j) l0 += beta[j + 1] * design.X.col(j);
    l1 = l0.array() + beta[1];
}

/// Log densities as a function of the linear component with the per-cell
/// lgamma terms cached; the EM evaluates densities tens of times per fit
/// and those terms never change. Matches Family::log_density up to the
/// usual exp/log rounding, with the same [1e-300, 1e300] mean clamp
/// (applied as |l| <= log(1e300) under a log link).
class DensityEvaluator {
public:
    DensityEvaluator(const Family& fam, const VectorXd& y) : fam_(fam), y_(y) {
        konst_.resize(y.size());
        switch (fam.kind) {
            case Family::Kind::gaussian_identity:
                konst_.setConstant(-0.5 * kLogTwoPi);
                break;
            case Family::Kind::poisson_log:
                for (Eigen::Index i = 0; i < y.size(); ++i) {
                    if (y[i] < 0.0) throw std::domain_error("count response must be >= 0");
                    konst_[i] = -std::lgamma(y[i] + 1.0);
                }
                break;
            case Family::Kind::negbin_log: {
                double s = fam.require_size();
                log_s_ = std::log(s);
                for (Eigen::Index i = 0; i < y.size(); ++i) {
                    if (y[i] < 0.0) throw std::domain_error("count response must be >= 0");
                    konst_[i] =
                        std::lgamma(y[i] + s) - std::lgamma(s) - std::lgamma(y[i] + 1.0);
                }
                break;
            }
        }
    }

    void eval(const VectorXd& l, VectorXd& out, long* clamps = nullptr) const {
        const Eigen::Index n = y_.size();
        out.resize(n);
        constexpr double kMaxLogMean = 690.77552789821368;  // log(1e300)
        switch (fam_.kind) {
            case Family::Kind::gaussian_identity:
                out = konst_.array() - 0.5 * (y_ - l).array().square();
                break;
            case Family::Kind::poisson_log:
                for (Eigen::Index i = 0; i < n; ++i) {
                    double li = l[i];
                    if (std::abs(li) > kMaxLogMean) {
                        li = std::clamp(li, -kMaxLogMean, kMaxLogMean);
                        if (clamps) ++*clamps;
                    }
                    out[i] = y_[i] * li - std::exp(li) + konst_[i];
                }
                break;
            case Family::Kind::negbin_log: {
                double s = fam_.size;
                for (Eigen::Index i = 0; i < n; ++i) {
                    double li = l[i];
                    if (std::abs(li) > kMaxLogMean) {
                        li = std::clamp(li, -kMaxLogMean, kMaxLogMean);
                        if (clamps) ++*clamps;
                    }
                    // log(s + e^l) without overflow
                    double lsp = li > log_s_ ? li + std::log1p(std::exp(log_s_ - li))
                                             : log_s_ + std::log1p(std::exp(li - log_s_));
                    out[i] = konst_[i] + y_[i] * (li - lsp) + s * (log_s_ - lsp);
                }
                break;
            }
        }
    }

private:
    Family fam_;
    VectorXd y_;
    VectorXd konst_;
    double log_s_ = 0.0;
};

inline void log_densities(const Family& fam, const VectorXd& y, const VectorXd& l,
                          VectorXd& out, long* clamps) {
    DensityEvaluator(fam, y).eval(l, out, clamps);
}

/// Membership probabilities from per-cell component log densities via the
/// log-ratio q_i; t_i(1) = 1 / (exp(q_i) + 1).
inline VectorXd memberships_from_log_densities(double pi, const VectorXd& ld0,
                                               const VectorXd& ld1) {
    const double lp0 = std::log1p(-pi), lp1 = std::log(pi);
    VectorXd t1(ld0.size());
    for (Eigen::Index i = 0; i < ld0.size(); ++i) {
        double q = lp0 + ld0[i] - lp1 - ld1[i];
        if (std::isnan(q))
            throw NumericalError("e_step: non-finite log-density at cell " + std::to_string(i));
        t1[i] = 1.0 / (std::exp(q) + 1.0);
    }
    return t1;
}

inline double loglik_from_log_densities(double pi, const VectorXd& ld0, const VectorXd& ld1) {
    const double lp0 = std::log1p(-pi), lp1 = std::log(pi);
    double ll = 0.0;
    for (Eigen::Index i = 0; i < ld0.size(); ++i) {
        double cell = log_sum_exp(lp0 + ld0[i], lp1 + ld1[i]);
        if (!std::isfinite(cell))
            throw NumericalError("marginal_log_lik: non-finite value at cell " +
                                 std::to_string(i));
        ll += cell;
    }
    return ll;
}

}  // namespace detail

/// Posterior perturbation probabilities t_i(1) at the given parameters.
inline VectorXd e_step(const GlmEivParams& params, const Dataset& data,
                       const FamilyPair& fams, long* clamps = nullptr) {
    params.validate();
    VectorXd lm0, lm1, lg0, lg1;
    detail::modality_linear(params.beta_m, data.design, data.offset_m, lm0, lm1);
    detail::modality_linear(params.beta_g, data.design, data.offset_g, lg0, lg1);
    VectorXd ldm0, ldm1, ldg0, ldg1;
    detail::log_densities(fams.m, data.m, lm0, ldm0, clamps);
    detail::log_densities(fams.m, data.m, lm1, ldm1, clamps);
    detail::log_densities(fams.g, data.g, lg0, ldg0, clamps);
    detail::log_densities(fams.g, data.g, lg1, ldg1, clamps);
    return detail::memberships_from_log_densities(params.pi, ldm0 + ldg0, ldm1 + ldg1);
}

inline double marginal_log_lik(const GlmEivParams& params, const Dataset& data,
                               const FamilyPair& fams, long* clamps = nullptr) {
    params.validate();
    VectorXd lm0, lm1, lg0, lg1;
    detail::modality_linear(params.beta_m, data.design, data.offset_m, lm0, lm1);
    detail::modality_linear(params.beta_g, data.design, data.offset_g, lg0, lg1);
    VectorXd ldm0, ldm1, ldg0, ldg1;
    detail::log_densities(fams.m, data.m, lm0, ldm0, clamps);
    detail::log_densities(fams.m, data.m, lm1, ldm1, clamps);
    detail::log_densities(fams.g, data.g, lg0, ldg0, clamps);
    detail::log_densities(fams.g, data.g, lg1, ldg1, clamps);
    return detail::loglik_from_log_densities(params.pi, ldm0 + ldg0, ldm1 + ldg1);
}

namespace detail {

/// Row-doubled weighted GLM refit for one modality's coefficients:
/// design [X(0); X(1)], responses [y; y], offsets [o; o], weights
/// [t(0); t(1)].
inline GlmFit m_step_modality(const VectorXd& t1, const Dataset& data, const VectorXd& y,
                              const VectorXd& offsets, const Family& fam) {
    const Eigen::Index n = data.n(), d = data.design.cols() + 1;
    MatrixXd Xd(2 * n, d);
    Xd.topRows(n) = data.design.augmented(0.0);
    Xd.bottomRows(n) = data.design.augmented(1.0);
    VectorXd yd(2 * n), od(2 * n), wd(2 * n);
    yd << y, y;
    od << offsets, offsets;
    wd << (1.0 - t1.array()), t1.array();
    return fit_weighted_glm(Xd, yd, wd, od, fam, data.design.augmented_names());
}

}  // namespace detail

/// One M step: pi is the membership mean; each modality's coefficients are
/// refit by a membership-weighted GLM on the row-doubled design. Memberships
/// are clamped to [1e-12, 1-1e-12] first.
inline GlmEivParams m_step(const VectorXd& t1_raw, const Dataset& data, const FamilyPair& fams,
                           bool* small_effective_sample = nullptr) {
    VectorXd t1 = t1_raw.cwiseMax(1e-12).cwiseMin(1.0 - 1e-12);
    if (small_effective_sample) *small_effective_sample = t1.sum() < 10.0;
    GlmEivParams out;
    out.pi = t1.mean();
    out.beta_m = detail::m_step_modality(t1, data, data.m, data.offset_m, fams.m).coefficients;
    out.beta_g = detail::m_step_modality(t1, data, data.g, data.offset_g, fams.g).coefficients;
    return out;
}

struct PilotEstimates {
    VectorXd fhat_m, fhat_g;          // fitted linear components incl. offsets
    VectorXd nuisance_m, nuisance_g;  // [beta_0, gamma...] per modality
    double beta1_m = 0.0, beta1_g = 0.0, pi = 0.0;
    double reduced_loglik = -std::numeric_limits<double>::infinity();
};

/// Algorithm stage 1: per modality, regress the response on the observed
/// covariates only (no perturbation column) and keep the coefficient pilots
/// and the untransformed fitted values.
inline PilotEstimates pilot_nuisance(const Dataset& data, const FamilyPair& fams) {
    data.validate();
    VectorXd ones = VectorXd::Ones(data.n());
    PilotEstimates out;
    GlmFit fm = fit_weighted_glm(data.design, data.m, ones, data.offset_m, fams.m);
    GlmFit fg = fit_weighted_glm(data.design, data.g, ones, data.offset_g, fams.g);
    out.nuisance_m = fm.coefficients;
    out.nuisance_g = fg.coefficients;
    out.fhat_m = fm.fitted_linear;
    out.fhat_g = fg.fitted_linear;
    return out;
}

struct ReducedFit {
    double beta1_m = 0.0, beta1_g = 0.0, pi = 0.0;
    // Label-swap residue: amounts to add to the beta_0 pilots when the swap
    // fired (the reduced model has no intercept of its own).
    double baseline_shift_m = 0.0, baseline_shift_g = 0.0;
    double log_lik = -std::numeric_limits<double>::infinity();
    bool converged = false;
    bool identified = true;
    int restarts_used = 0;
};

struct EmConfig {
    enum class Mode { vanilla, accelerated };
    Mode mode = Mode::accelerated;
    int n_restarts = 15;  // reduced EM and vanilla starts
    double tol = 1e-7;    // relative log-likelihood change
    int max_iter = 100;
    double param_tol = 0.0;  // optional sup-norm stopping rule; 0 disables
    double random_effect_scale = 1.0;
    std::uint64_t seed = 1;
};

/// Algorithm stage 2: the reduced GLM-EIV. Both modalities' structure is
/// folded into the fitted offsets, so the M step uses the closed-form
/// intercept-plus-offset MLEs only; no GLM is fit. Runs from B random
/// starts and keeps the best log-likelihood.
inline ReducedFit fit_reduced_glmeiv(const VectorXd& m, const VectorXd& g,
                                     const VectorXd& fhat_m, const VectorXd& fhat_g,
                                     const FamilyPair& fams, int n_restarts,
                                     std::uint64_t seed, double tol = 1e-7, int max_iter = 100,
                                     double effect_scale = 1.0) {
    ReducedFit best;
    long clamps = 0;
    bool any_converged = false;

    detail::DensityEvaluator dens_m(fams.m, m), dens_g(fams.g, g);

    // Collapsed (beta_1 = 0) log-likelihood, the non-identifiability floor.
    VectorXd ldm_base, ldg_base;
    dens_m.eval(fhat_m, ldm_base, &clamps);
    dens_g.eval(fhat_g, ldg_base, &clamps);
    const VectorXd ld_base = ldm_base + ldg_base;
    const double collapsed = ld_base.sum();

    // Closed-form M-step pieces that do not change across iterations.
    const double omax_m = fhat_m.maxCoeff(), omax_g = fhat_g.maxCoeff();
    const VectorXd eo_m = (fhat_m.array() - omax_m).exp();
    const VectorXd eo_g = (fhat_g.array() - omax_g).exp();
    auto closed_mle = [](const Family& fam, const VectorXd& y, const VectorXd& fhat,
                         const VectorXd& eo, double omax, const VectorXd& w) {
        if (fam.kind == Family::Kind::gaussian_identity)
            return (w.array() * (y - fhat).array()).sum() / w.sum();
        double swy = (w.array() * y.array()).sum();
        if (!(swy > 0.0))
            throw DegenerateComponentError(
                "fit_reduced_glmeiv: weighted response sum is zero under a log link");
        return std::log(swy) - (omax + std::log((w.array() * eo.array()).sum()));
    };

    VectorXd shifted_m, shifted_g, ldm1, ldg1, ld1;
    for (int b = 0; b < n_restarts; ++b) {
        Rng rng(seed, static_cast<std::uint64_t>(b), 0x0ed1ced);
        double pi = rng.uniform(0.001, 0.45);
        double b1m = rng.uniform(-2.0 * effect_scale, 2.0 * effect_scale);
        double b1g = rng.uniform(-2.0 * effect_scale, 2.0 * effect_scale);

        shifted_m = fhat_m.array() + b1m;
        shifted_g = fhat_g.array() + b1g;
        dens_m.eval(shifted_m, ldm1, &clamps);
        dens_g.eval(shifted_g, ldg1, &clamps);
        ld1 = ldm1 + ldg1;

        double ll_prev = -std::numeric_limits<double>::infinity();
        double ll = ll_prev;
        bool converged = false;
        for (int it = 0; it < max_iter; ++it) {
            VectorXd t1 = detail::memberships_from_log_densities(pi, ld_base, ld1);
            t1 = t1.cwiseMax(1e-12).cwiseMin(1.0 - 1e-12);
            pi = t1.mean();
            b1m = closed_mle(fams.m, m, fhat_m, eo_m, omax_m, t1);
            b1g = closed_mle(fams.g, g, fhat_g, eo_g, omax_g, t1);

            shifted_m = fhat_m.array() + b1m;
            shifted_g = fhat_g.array() + b1g;
            dens_m.eval(shifted_m, ldm1, &clamps);
            dens_g.eval(shifted_g, ldg1, &clamps);
            ld1 = ldm1 + ldg1;
            ll = detail::loglik_from_log_densities(pi, ld_base, ld1);
            if (std::abs(ll - ll_prev) / (std::abs(ll) + 1.0) < tol) {
                converged = true;
                break;
            }
            ll_prev = ll;
        }
        any_converged = any_converged || converged;
        if (ll > best.log_lik) {
            best.log_lik = ll;
            best.pi = pi;
            best.beta1_m = b1m;
            best.beta1_g = b1g;
            best.converged = converged;
        }
    }
    best.restarts_used = n_restarts;
    if (!any_converged)
        throw NonconvergenceError(
            "fit_reduced_glmeiv: no restart converged; fall back to the vanilla fit");

    if (best.pi > 0.5) {
        best.pi = 1.0 - best.pi;
        best.baseline_shift_m = best.beta1_m;
        best.baseline_shift_g = best.beta1_g;
        best.beta1_m = -best.beta1_m;
        best.beta1_g = -best.beta1_g;
    }
    // Null (beta_1 = 0) data still gains an O_p(1) likelihood-ratio amount
    // over the collapsed model by fitting noise, so the identification
    // flag uses an LRT-scale cut rather than a numerical epsilon.
    best.identified = best.log_lik - collapsed > 6.0;
    return best;
}

struct GlmEivFit {
    GlmEivParams params;
    VectorXd memberships;  // t_i(1) at the final parameters
    std::vector<double> loglik_trace;
    bool converged = false;
    int n_glm_fits = 0;
    int restarts_used = 0;
    MatrixXd info;  // filled by wald_inference
    VectorXd se;
    std::vector<std::string> flags;
    long mu_clamps = 0;
    double log_lik() const {
        return loglik_trace.empty() ? -std::numeric_limits<double>::infinity()
                                    : loglik_trace.back();
    }
    bool has_flag(const std::string& f) const {
        for (const auto& x : flags)
            if (x == f) return true;
        return false;
    }
};

namespace detail {

/// One full EM run (Algorithm 1) from a given start. grna_only drops the
/// gene modality everywhere, which yields the latent-variable gRNA model
/// used for mixture assignment. The row-doubled design and the per-cell
/// density constants are built once and reused across iterations.
inline GlmEivFit run_em(GlmEivParams params, const Dataset& data, const FamilyPair& fams,
                        const EmConfig& cfg, bool grna_only = false) {
    GlmEivFit fit;
    if (params.pi > 0.5) params = params.label_swapped();

    const Eigen::Index n = data.n(), d = data.design.cols() + 1;
    MatrixXd Xd(2 * n, d);
    Xd.topRows(n) = data.design.augmented(0.0);
    Xd.bottomRows(n) = data.design.augmented(1.0);
    VectorXd ym(2 * n), yg(2 * n), om(2 * n), og(2 * n), wd(2 * n);
    ym << data.m, data.m;
    yg << data.g, data.g;
    om << data.offset_m, data.offset_m;
    og << data.offset_g, data.offset_g;
    const auto names = data.design.augmented_names();

    DensityEvaluator dens_m(fams.m, data.m), dens_g(fams.g, data.g);
    VectorXd lm0, lm1, lg0, lg1, ldm0, ldm1, ldg0, ldg1;
    auto log_parts = [&](const GlmEivParams& th) {
        modality_linear(th.beta_g, data.design, data.offset_g, lg0, lg1);
        dens_g.eval(lg0, ldg0, &fit.mu_clamps);
        dens_g.eval(lg1, ldg1, &fit.mu_clamps);
        if (grna_only) {
            ldm0 = VectorXd::Zero(n);
            ldm1 = ldm0;
        } else {
            modality_linear(th.beta_m, data.design, data.offset_m, lm0, lm1);
            dens_m.eval(lm0, ldm0, &fit.mu_clamps);
            dens_m.eval(lm1, ldm1, &fit.mu_clamps);
        }
    };

    double ll_prev = -std::numeric_limits<double>::infinity();
    log_parts(params);
    for (int it = 0; it < cfg.max_iter; ++it) {
        VectorXd t1 = memberships_from_log_densities(params.pi, ldm0 + ldg0, ldm1 + ldg1);
        t1 = t1.cwiseMax(1e-12).cwiseMin(1.0 - 1e-12);
        wd << (1.0 - t1.array()), t1.array();

        GlmEivParams next = params;
        next.pi = t1.mean();
        if (!grna_only) {
            GlmFitOptions opt{&params.beta_m, false};
            next.beta_m = fit_weighted_glm(Xd, ym, wd, om, fams.m, names, opt).coefficients;
            ++fit.n_glm_fits;
        }
        GlmFitOptions opt_g{&params.beta_g, false};
        next.beta_g = fit_weighted_glm(Xd, yg, wd, og, fams.g, names, opt_g).coefficients;
        ++fit.n_glm_fits;
        if (next.pi > 0.5) next = next.label_swapped();

        log_parts(next);
        double ll = loglik_from_log_densities(next.pi, ldm0 + ldg0, ldm1 + ldg1);
        fit.loglik_trace.push_back(ll);

        double param_delta =
            std::max({std::abs(next.pi - params.pi),
                      (next.beta_g - params.beta_g).cwiseAbs().maxCoeff(),
                      grna_only ? 0.0 : (next.beta_m - params.beta_m).cwiseAbs().maxCoeff()});
        params = next;
        bool ll_done = std::abs(ll - ll_prev) / (std::abs(ll) + 1.0) < cfg.tol;
        bool param_done = cfg.param_tol > 0.0 && param_delta < cfg.param_tol;
        ll_prev = ll;
        if (ll_done || param_done) {
            fit.converged = true;
            break;
        }
    }

    fit.params = params;
    fit.memberships = memberships_from_log_densities(params.pi, ldm0 + ldg0, ldm1 + ldg1);
    if (fit.memberships.sum() < 10.0 || params.pi < 1e-6) fit.flags.push_back("degenerate_pi");
    return fit;
}

}  // namespace detail

/// Full GLM-EIV fit from precomputed nuisance pilots (the at-scale pipeline
/// loads these from its store; fit_glmeiv computes them inline). Accelerated
/// mode runs the reduced GLM-EIV and then one EM pass; vanilla mode runs the
/// EM from n_restarts random effect starts and keeps the best likelihood.
inline GlmEivFit fit_glmeiv_from_pilots(const Dataset& data, const FamilyPair& fams,
                                        const EmConfig& cfg, const PilotEstimates& pilots,
                                        int pilot_fits = 2) {
    const Eigen::Index d = data.design.cols() + 1;

    auto assemble = [&](double pi, double b1m, double b1g, double shift_m,
                        double shift_g) {
        GlmEivParams th;
        th.pi = pi;
        th.beta_m = VectorXd::Zero(d);
        th.beta_g = VectorXd::Zero(d);
        th.beta_m[0] = pilots.nuisance_m[0] + shift_m;
        th.beta_g[0] = pilots.nuisance_g[0] + shift_g;
        th.beta_m[1] = b1m;
        th.beta_g[1] = b1g;
        for (Eigen::Index j = 1; j < d - 1; ++j) {
            th.beta_m[j + 1] = pilots.nuisance_m[j];
            th.beta_g[j + 1] = pilots.nuisance_g[j];
        }
        return th;
    };

    if (cfg.mode == EmConfig::Mode::accelerated) {
        ReducedFit red = fit_reduced_glmeiv(data.m, data.g, pilots.fhat_m, pilots.fhat_g, fams,
                                            cfg.n_restarts, cfg.seed, cfg.tol, cfg.max_iter,
                                            cfg.random_effect_scale);
        GlmEivParams start = assemble(red.pi, red.beta1_m, red.beta1_g, red.baseline_shift_m,
                                      red.baseline_shift_g);
        GlmEivFit fit = detail::run_em(start, data, fams, cfg);
        fit.n_glm_fits += pilot_fits;
        fit.restarts_used = 1;
        if (!red.identified) fit.flags.push_back("pilot_unidentified");
        return fit;
    }

    GlmEivFit best;
    bool have = false;
    std::vector<double> beta1m_converged;
    int total_fits = pilot_fits;
    for (int b = 0; b < cfg.n_restarts; ++b) {
        Rng rng(cfg.seed, static_cast<std::uint64_t>(b), 0xba5e11);
        GlmEivParams start = assemble(
            rng.uniform(0.001, 0.45),
            rng.uniform(-2.0 * cfg.random_effect_scale, 2.0 * cfg.random_effect_scale),
            rng.uniform(-2.0 * cfg.random_effect_scale, 2.0 * cfg.random_effect_scale), 0.0,
            0.0);
        GlmEivFit fit = detail::run_em(start, data, fams, cfg);
        total_fits += fit.n_glm_fits;
        if (fit.converged) beta1m_converged.push_back(fit.params.beta_m[1]);
        if (!have || fit.log_lik() > best.log_lik()) {
            best = fit;
            have = true;
        }
    }
    best.n_glm_fits = total_fits;
    best.restarts_used = cfg.n_restarts;
    for (double b1 : beta1m_converged)
        if (std::abs(b1 - best.params.beta_m[1]) > 0.1 &&
            !best.has_flag("restart_disagreement")) {
            best.flags.push_back("restart_disagreement");
        }
    return best;
}

inline GlmEivFit fit_glmeiv(const Dataset& data, const FamilyPair& fams, const EmConfig& cfg) {
    data.validate();
    if ((data.g.array() == data.g[0]).all())
        throw DataError("fit_glmeiv: gRNA modality is degenerate (constant counts)");
    return fit_glmeiv_from_pilots(data, fams, cfg, pilot_nuisance(data, fams));
}

}  // namespace glmeiv

#endif
