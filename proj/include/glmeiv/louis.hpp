#ifndef GLMEIV_LOUIS_HPP
#define GLMEIV_LOUIS_HPP

#include <Eigen/Dense>
#include <cmath>
#include <string>
#include <vector>

#include "glmeiv/em.hpp"

namespace glmeiv {

/// Per-cell diagonal quantities entering the Louis submatrices for one
/// modality and one value j of the latent indicator. h doubles as the
/// residual vector s(j).
struct ComponentMatrices {
    VectorXd delta;        // h'(l_i(j))
    VectorXd delta_prime;  // h''(l_i(j))
    VectorXd v;            // psi''(eta_i(j)) = variance at the fitted mean
    VectorXd h;            // y_i - mu_i(j); equals s(j)
    VectorXd l;            // linear components, kept for diagnostics
};

/// Kernel-function assembly of the per-cell component quantities:
/// delta = mu_eta(l)/sigma^2 and
/// delta' = (mu_eta_prime(l) - sigma^3 * skewness * delta^2) / sigma^2.
inline ComponentMatrices component_matrices(const VectorXd& beta, const DesignMatrix& design,
                                            const VectorXd& y, const VectorXd& offsets,
                                            const Family& fam, int j) {
    const Eigen::Index n = design.n();
    ComponentMatrices out;
    out.delta.resize(n);
    out.delta_prime.resize(n);
    out.v.resize(n);
    out.h.resize(n);
    out.l.resize(n);
    VectorXd l0, l1;
    detail::modality_linear(beta, design, offsets, l0, l1);
    const VectorXd& l = (j == 0) ? l0 : l1;
    for (Eigen::Index i = 0; i < n; ++i) {
        try {
            double mu = fam.linkinv(l[i]);
            double sig2 = fam.variance(mu);
            double delta = fam.mu_eta(l[i]) / sig2;
            double gam = fam.skewness(mu);
            double dprime =
                (fam.mu_eta_prime(l[i]) - std::pow(sig2, 1.5) * gam * delta * delta) / sig2;
            out.l[i] = l[i];
            out.delta[i] = delta;
            out.delta_prime[i] = dprime;
            out.v[i] = sig2;
            out.h[i] = y[i] - mu;
        } catch (const std::domain_error& e) {
            throw NumericalError("component_matrices: cell " + std::to_string(i) + ": " +
                                 e.what());
        }
    }
    return out;
}

struct InfoMatrix {
    MatrixXd J;
    double condition = 0.0;
};

namespace detail {

struct ModalityBlocks {
    ComponentMatrices cm[2];
};

inline ModalityBlocks modality_blocks(const VectorXd& beta, const DesignMatrix& design,
                                      const VectorXd& y, const VectorXd& offsets,
                                      const Family& fam) {
    ModalityBlocks b;
    b.cm[0] = component_matrices(beta, design, y, offsets, fam, 0);
    b.cm[1] = component_matrices(beta, design, y, offsets, fam, 1);
    return b;
}

/// x-tilde_i(j) = [1, j, z_i].
inline void aug_row(const DesignMatrix& design, Eigen::Index i, double j, VectorXd& row) {
    row[0] = 1.0;
    row[1] = j;
    for (Eigen::Index k = 1; k < design.cols(); ++k) row[k + 1] = design.X(i, k);
}

}  // namespace detail

/// Observed information of the GLM-EIV log-likelihood via Louis's theorem:
/// submatrices I (pi), II (beta_m), III (beta_g), IV (beta_g x beta_m),
/// V (beta_m x pi), VI (beta_g x pi), mirrored into a symmetric
/// (2d+1) x (2d+1) matrix with block order (pi | beta_m | beta_g).
/// Memberships are recomputed at the supplied parameters.
inline InfoMatrix observed_information(const GlmEivParams& params, const Dataset& data,
                                       const FamilyPair& fams) {
    params.validate();
    const Eigen::Index n = data.n();
    const Eigen::Index d = data.design.cols() + 1;
    const double pi = params.pi;

    VectorXd t1 = e_step(params, data, fams);
    VectorXd t0 = 1.0 - t1.array();

    detail::ModalityBlocks bm =
        detail::modality_blocks(params.beta_m, data.design, data.m, data.offset_m, fams.m);
    detail::ModalityBlocks bg =
        detail::modality_blocks(params.beta_g, data.design, data.g, data.offset_g, fams.g);

    const double a = 1.0 / pi + 1.0 / (1.0 - pi);

    // Submatrix I.
    double sub1 = 0.0;
    {
        double sum_t1 = t1.sum();
        double sum_sq = (t1.array().square() - t1.array()).sum();
        sub1 = (1.0 / (pi * pi) - 1.0 / ((1.0 - pi) * (1.0 - pi))) * sum_t1 +
               n / ((1.0 - pi) * (1.0 - pi)) + a * a * sum_sq;
    }

    MatrixXd sub2 = MatrixXd::Zero(d, d);  // beta_m block
    MatrixXd sub3 = MatrixXd::Zero(d, d);  // beta_g block
    MatrixXd sub4 = MatrixXd::Zero(d, d);  // rows beta_g, cols beta_m
    VectorXd sub5 = VectorXd::Zero(d);     // beta_m x pi
    VectorXd sub6 = VectorXd::Zero(d);     // beta_g x pi

    VectorXd x0(d), x1(d);
    for (Eigen::Index i = 0; i < n; ++i) {
        detail::aug_row(data.design, i, 0.0, x0);
        detail::aug_row(data.design, i, 1.0, x1);
        const double T[2] = {t0[i], t1[i]};
        const VectorXd* x[2] = {&x0, &x1};

        // Per-cell scalars: c(s) = Delta^2 V - Delta' H, dh(s) = Delta H.
        double cm_[2], cg_[2], dhm[2], dhg[2];
        for (int s = 0; s < 2; ++s) {
            const auto& m = (s == 0) ? bm.cm[0] : bm.cm[1];
            const auto& g = (s == 0) ? bg.cm[0] : bg.cm[1];
            cm_[s] = m.delta[i] * m.v[i] * m.delta[i] - m.delta_prime[i] * m.h[i];
            cg_[s] = g.delta[i] * g.v[i] * g.delta[i] - g.delta_prime[i] * g.h[i];
            dhm[s] = m.delta[i] * m.h[i];
            dhg[s] = g.delta[i] * g.h[i];
        }

        VectorXd um = VectorXd::Zero(d), ug = VectorXd::Zero(d);
        for (int s = 0; s < 2; ++s) {
            um += T[s] * dhm[s] * (*x[s]);
            ug += T[s] * dhg[s] * (*x[s]);
        }
        for (int s = 0; s < 2; ++s) {
            sub2 += T[s] * (cm_[s] - dhm[s] * dhm[s]) * (*x[s]) * x[s]->transpose();
            sub3 += T[s] * (cg_[s] - dhg[s] * dhg[s]) * (*x[s]) * x[s]->transpose();
            sub4 -= T[s] * dhg[s] * dhm[s] * (*x[s]) * x[s]->transpose();
        }
        sub2 += um * um.transpose();
        sub3 += ug * ug.transpose();
        sub4 += ug * um.transpose();

        double w01 = t0[i] * t1[i];
        sub5 += a * w01 * (dhm[0] * x0 - dhm[1] * x1);
        sub6 += a * w01 * (dhg[0] * x0 - dhg[1] * x1);
    }

    InfoMatrix out;
    out.J.setZero(2 * d + 1, 2 * d + 1);
    out.J(0, 0) = sub1;
    out.J.block(1, 1, d, d) = sub2;
    out.J.block(d + 1, d + 1, d, d) = sub3;
    out.J.block(d + 1, 1, d, d) = sub4;
    out.J.block(1, d + 1, d, d) = sub4.transpose();
    out.J.block(1, 0, d, 1) = sub5;
    out.J.block(0, 1, 1, d) = sub5.transpose();
    out.J.block(d + 1, 0, d, 1) = sub6;
    out.J.block(0, d + 1, 1, d) = sub6.transpose();

    if (!out.J.allFinite()) {
        const char* names[] = {"I", "II", "III", "IV", "V", "VI"};
        bool bad[6] = {!std::isfinite(sub1), !sub2.allFinite(), !sub3.allFinite(),
                       !sub4.allFinite(),    !sub5.allFinite(), !sub6.allFinite()};
        std::string which;
        for (int k = 0; k < 6; ++k)
            if (bad[k]) which += std::string(which.empty() ? "" : ",") + names[k];
        throw NumericalError("observed_information: non-finite entries in submatrix " + which);
    }

    Eigen::JacobiSVD<MatrixXd> svd(out.J);
    double smin = svd.singularValues().minCoeff();
    out.condition = smin > 0.0 ? svd.singularValues().maxCoeff() / smin
                               : std::numeric_limits<double>::infinity();
    return out;
}

/// Parameter packing used by the information matrix: [pi, beta_m, beta_g].
inline VectorXd pack_params(const GlmEivParams& p) {
    VectorXd out(1 + p.beta_m.size() + p.beta_g.size());
    out[0] = p.pi;
    out.segment(1, p.beta_m.size()) = p.beta_m;
    out.segment(1 + p.beta_m.size(), p.beta_g.size()) = p.beta_g;
    return out;
}

inline GlmEivParams unpack_params(const VectorXd& v, Eigen::Index d) {
    GlmEivParams p;
    p.pi = v[0];
    p.beta_m = v.segment(1, d);
    p.beta_g = v.segment(1 + d, d);
    return p;
}

inline std::vector<std::string> param_names(const Dataset& data) {
    std::vector<std::string> names{"pi"};
    for (const auto& s : data.design.augmented_names()) names.push_back("m:" + s);
    for (const auto& s : data.design.augmented_names()) names.push_back("g:" + s);
    return names;
}

/// Wald inference for every parameter from the analytic observed
/// information: se = sqrt(diag(J^-1)), normal CIs, two-sided p-values for
/// H0: parameter = 0. Attaches J and the standard errors to the fit.
inline std::vector<WaldRecord> wald_inference(GlmEivFit& fit, const Dataset& data,
                                              const FamilyPair& fams, double level = 0.95) {
    InfoMatrix info = observed_information(fit.params, data, fams);
    Eigen::LDLT<MatrixXd> ldlt(info.J);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) {
        std::ostringstream os;
        os << "wald_inference: information matrix is not positive definite "
              "(condition number "
           << info.condition << ")";
        throw InferenceError(os.str());
    }
    MatrixXd cov = ldlt.solve(MatrixXd::Identity(info.J.rows(), info.J.cols()));
    VectorXd theta = pack_params(fit.params);
    auto names = param_names(data);
    std::vector<WaldRecord> out;
    fit.info = info.J;
    fit.se.resize(theta.size());
    for (Eigen::Index k = 0; k < theta.size(); ++k) {
        double var = cov(k, k);
        if (!(var > 0.0) || !std::isfinite(var))
            throw InferenceError("wald_inference: non-positive variance for " + names[k]);
        fit.se[k] = std::sqrt(var);
        out.push_back(wald_record(names[k], theta[k], fit.se[k], level));
    }
    return out;
}

}  // namespace glmeiv

#endif
