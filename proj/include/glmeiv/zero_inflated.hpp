#ifndef GLMEIV_ZERO_INFLATED_HPP
#define GLMEIV_ZERO_INFLATED_HPP

#include <Eigen/Dense>
#include <cmath>
#include <string>
#include <vector>

#include "glmeiv/em.hpp"
#include "glmeiv/louis.hpp"

namespace glmeiv {

/// Zero-inflated model parameters: unperturbed cells emit exactly zero gRNA
/// reads, so the gRNA coefficient vector loses its perturbation entry.
struct ZiParams {
    VectorXd beta_m;   // length d
    VectorXd beta_gz;  // length d-1: [beta_0^g, gamma_g]
    double pi = 0.0;

    void validate() const {
        if (!(pi > 0.0 && pi <= 0.5)) throw DataError("pi must lie in (0, 1/2]");
        if (!beta_m.allFinite() || !beta_gz.allFinite())
            throw DataError("non-finite coefficients");
        if (beta_m.size() != beta_gz.size() + 1)
            throw DataError("beta_gz must have one fewer entry than beta_m");
    }
};

namespace detail {

/// l^{g,z} = <x_i, beta_gz> + o^g (observed design, no perturbation column).
inline VectorXd zi_linear(const VectorXd& beta_gz, const Dataset& data) {
    VectorXd l = VectorXd::Constant(data.n(), beta_gz[0]) + data.offset_g;
    for (Eigen::Index j = 1; j < data.design.cols(); ++j)
        l += beta_gz[j] * data.design.X.col(j);
    return l;
}

inline void check_integer_grna(const Dataset& data) {
    for (Eigen::Index i = 0; i < data.n(); ++i) {
        if (data.g[i] < 0.0 || data.g[i] != std::floor(data.g[i]))
            throw std::domain_error("zero-inflated model requires integer gRNA counts (cell " +
                                    std::to_string(i) + ")");
    }
}

}  // namespace detail

/// E step of the zero-inflated model. Cells with g >= 1 have membership
/// exactly 1; g = 0 cells use the zero-inflated log-ratio with the point
/// mass at zero in place of the unperturbed gRNA density.
inline VectorXd zi_e_step(const ZiParams& params, const Dataset& data, const FamilyPair& fams,
                          long* clamps = nullptr) {
    params.validate();
    detail::check_integer_grna(data);
    VectorXd lm0, lm1;
    detail::modality_linear(params.beta_m, data.design, data.offset_m, lm0, lm1);
    VectorXd lgz = detail::zi_linear(params.beta_gz, data);

    const double lp0 = std::log1p(-params.pi), lp1 = std::log(params.pi);
    VectorXd t1(data.n());
    for (Eigen::Index i = 0; i < data.n(); ++i) {
        if (data.g[i] >= 1.0) {
            t1[i] = 1.0;
            continue;
        }
        double ldm0 = fams.m.log_density(data.m[i], fams.m.linkinv(lm0[i]), clamps);
        double ldm1 = fams.m.log_density(data.m[i], fams.m.linkinv(lm1[i]), clamps);
        double ldg = fams.g.log_density(0.0, fams.g.linkinv(lgz[i]), clamps);
        double q = lp0 + ldm0 - lp1 - ldm1 - ldg;
        if (std::isnan(q))
            throw NumericalError("zi_e_step: non-finite log-density at cell " +
                                 std::to_string(i));
        t1[i] = 1.0 / (std::exp(q) + 1.0);
    }
    return t1;
}

inline double zi_marginal_log_lik(const ZiParams& params, const Dataset& data,
                                  const FamilyPair& fams, long* clamps = nullptr) {
    params.validate();
    VectorXd lm0, lm1;
    detail::modality_linear(params.beta_m, data.design, data.offset_m, lm0, lm1);
    VectorXd lgz = detail::zi_linear(params.beta_gz, data);
    const double lp0 = std::log1p(-params.pi), lp1 = std::log(params.pi);
    double ll = 0.0;
    for (Eigen::Index i = 0; i < data.n(); ++i) {
        double ldm1 = fams.m.log_density(data.m[i], fams.m.linkinv(lm1[i]), clamps);
        double ldg = fams.g.log_density(data.g[i], fams.g.linkinv(lgz[i]), clamps);
        double cell;
        if (data.g[i] >= 1.0) {
            cell = lp1 + ldm1 + ldg;
        } else {
            double ldm0 = fams.m.log_density(data.m[i], fams.m.linkinv(lm0[i]), clamps);
            cell = log_sum_exp(lp0 + ldm0, lp1 + ldm1 + ldg);
        }
        if (!std::isfinite(cell))
            throw NumericalError("zi_marginal_log_lik: non-finite value at cell " +
                                 std::to_string(i));
        ll += cell;
    }
    return ll;
}

struct ZiFit {
    ZiParams params;
    VectorXd memberships;
    std::vector<double> loglik_trace;
    bool converged = false;
    int n_glm_fits = 0;
    std::vector<std::string> flags;
    double log_lik() const {
        return loglik_trace.empty() ? -std::numeric_limits<double>::infinity()
                                    : loglik_trace.back();
    }
};

/// EM for the zero-inflated model. The M step updates pi and beta_m exactly
/// as in the background-read model; beta_gz is refit by a single-copy GLM
/// with responses g, weights t(1), design X, and offsets o^g. Memberships
/// are initialized from the zero pattern of g.
inline ZiFit run_zi_em(const Dataset& data, const FamilyPair& fams, const EmConfig& cfg) {
    data.validate();
    detail::check_integer_grna(data);
    if ((data.g.array() == 0.0).all())
        throw DataError("run_zi_em: all gRNA counts are zero (degenerate)");

    ZiFit fit;
    VectorXd t1(data.n());
    for (Eigen::Index i = 0; i < data.n(); ++i) t1[i] = data.g[i] >= 1.0 ? 1.0 : 1e-3;

    ZiParams params;
    double ll_prev = -std::numeric_limits<double>::infinity();
    for (int it = 0; it < cfg.max_iter; ++it) {
        VectorXd t1c = t1.cwiseMax(1e-12).cwiseMin(1.0 - 1e-12);
        params.pi = std::min(t1c.mean(), 0.5);
        params.beta_m =
            detail::m_step_modality(t1c, data, data.m, data.offset_m, fams.m).coefficients;
        params.beta_gz =
            fit_weighted_glm(data.design, data.g, t1c, data.offset_g, fams.g).coefficients;
        fit.n_glm_fits += 2;

        double ll = zi_marginal_log_lik(params, data, fams);
        fit.loglik_trace.push_back(ll);
        if (std::abs(ll - ll_prev) / (std::abs(ll) + 1.0) < cfg.tol) {
            fit.converged = true;
            break;
        }
        ll_prev = ll;
        t1 = zi_e_step(params, data, fams);
    }
    fit.params = params;
    fit.memberships = zi_e_step(params, data, fams);
    if (params.pi >= 0.5) fit.flags.push_back("pi_at_boundary");
    return fit;
}

inline VectorXd zi_pack_params(const ZiParams& p) {
    VectorXd out(1 + p.beta_m.size() + p.beta_gz.size());
    out[0] = p.pi;
    out.segment(1, p.beta_m.size()) = p.beta_m;
    out.segment(1 + p.beta_m.size(), p.beta_gz.size()) = p.beta_gz;
    return out;
}

inline ZiParams zi_unpack_params(const VectorXd& v, Eigen::Index d) {
    ZiParams p;
    p.pi = v[0];
    p.beta_m = v.segment(1, d);
    p.beta_gz = v.segment(1 + d, d - 1);
    return p;
}

/// Zero-inflated observed information, dimension 2d x 2d with block order
/// (pi | beta_m | beta_gz). Submatrices I, II, and V are shared with the
/// background-read model; III, IV, and VI use the zero-inflated forms.
inline InfoMatrix zi_observed_information(const ZiParams& params, const Dataset& data,
                                          const FamilyPair& fams) {
    params.validate();
    const Eigen::Index n = data.n();
    const Eigen::Index d = params.beta_m.size();
    const double pi = params.pi;
    const double a = 1.0 / pi + 1.0 / (1.0 - pi);

    VectorXd t1 = zi_e_step(params, data, fams);
    VectorXd t0 = 1.0 - t1.array();

    detail::ModalityBlocks bm =
        detail::modality_blocks(params.beta_m, data.design, data.m, data.offset_m, fams.m);

    // gRNA component quantities at the single linear component l^{g,z}.
    VectorXd lgz = detail::zi_linear(params.beta_gz, data);
    VectorXd dgz(n), dpgz(n), vgz(n), hgz(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        double mu = fams.g.linkinv(lgz[i]);
        double sig2 = fams.g.variance(mu);
        double delta = fams.g.mu_eta(lgz[i]) / sig2;
        double gam = fams.g.skewness(mu);
        dgz[i] = delta;
        dpgz[i] =
            (fams.g.mu_eta_prime(lgz[i]) - std::pow(sig2, 1.5) * gam * delta * delta) / sig2;
        vgz[i] = sig2;
        hgz[i] = data.g[i] - mu;
    }

    double sub1 = (1.0 / (pi * pi) - 1.0 / ((1.0 - pi) * (1.0 - pi))) * t1.sum() +
                  n / ((1.0 - pi) * (1.0 - pi)) +
                  a * a * (t1.array().square() - t1.array()).sum();

    MatrixXd sub2 = MatrixXd::Zero(d, d);
    MatrixXd sub3 = MatrixXd::Zero(d - 1, d - 1);
    MatrixXd sub4 = MatrixXd::Zero(d - 1, d);  // rows beta_gz, cols beta_m
    VectorXd sub5 = VectorXd::Zero(d);
    VectorXd sub6 = VectorXd::Zero(d - 1);

    VectorXd x0(d), x1(d);
    for (Eigen::Index i = 0; i < n; ++i) {
        detail::aug_row(data.design, i, 0.0, x0);
        detail::aug_row(data.design, i, 1.0, x1);
        VectorXd xi = data.design.X.row(i).transpose();
        const double T[2] = {t0[i], t1[i]};
        const VectorXd* x[2] = {&x0, &x1};

        double cm_[2], dhm[2];
        for (int s = 0; s < 2; ++s) {
            const auto& m = bm.cm[s];
            cm_[s] = m.delta[i] * m.v[i] * m.delta[i] - m.delta_prime[i] * m.h[i];
            dhm[s] = m.delta[i] * m.h[i];
        }
        VectorXd um = VectorXd::Zero(d);
        for (int s = 0; s < 2; ++s) um += T[s] * dhm[s] * (*x[s]);
        for (int s = 0; s < 2; ++s)
            sub2 += T[s] * (cm_[s] - dhm[s] * dhm[s]) * (*x[s]) * x[s]->transpose();
        sub2 += um * um.transpose();
        sub5 += a * t0[i] * t1[i] * (dhm[0] * x0 - dhm[1] * x1);

        double cgz = dgz[i] * vgz[i] * dgz[i] - dpgz[i] * hgz[i];
        double dh = dgz[i] * hgz[i];
        sub3 += (t1[i] * cgz - t1[i] * (1.0 - t1[i]) * dh * dh) * xi * xi.transpose();

        // Submatrix IV (zero-inflated).
        for (int s = 0; s < 2; ++s)
            sub4 += t1[i] * dh * T[s] * dhm[s] * xi * x[s]->transpose();
        sub4 -= t1[i] * dh * dhm[1] * xi * x1.transpose();

        sub6 -= a * t0[i] * t1[i] * dh * xi;
    }

    InfoMatrix out;
    out.J.setZero(2 * d, 2 * d);
    out.J(0, 0) = sub1;
    out.J.block(1, 1, d, d) = sub2;
    out.J.block(1 + d, 1 + d, d - 1, d - 1) = sub3;
    out.J.block(1 + d, 1, d - 1, d) = sub4;
    out.J.block(1, 1 + d, d, d - 1) = sub4.transpose();
    out.J.block(1, 0, d, 1) = sub5;
    out.J.block(0, 1, 1, d) = sub5.transpose();
    out.J.block(1 + d, 0, d - 1, 1) = sub6;
    out.J.block(0, 1 + d, 1, d - 1) = sub6.transpose();

    if (!out.J.allFinite())
        throw NumericalError("zi_observed_information: non-finite entries");
    Eigen::JacobiSVD<MatrixXd> svd(out.J);
    double smin = svd.singularValues().minCoeff();
    out.condition = smin > 0.0 ? svd.singularValues().maxCoeff() / smin
                               : std::numeric_limits<double>::infinity();
    return out;
}

}  // namespace glmeiv

#endif
