#ifndef GLMEIV_DATA_HPP
#define GLMEIV_DATA_HPP

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "glmeiv/errors.hpp"

namespace glmeiv {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using Eigen::VectorXi;

/// Observed design matrix: leading intercept column of ones plus covariates.
/// The augmented forms X-tilde(0)/X-tilde(1) used by the EM are produced by
/// inserting a constant perturbation column after the intercept.
struct DesignMatrix {
    MatrixXd X;  // n x (d-1)
    std::vector<std::string> column_names;

    Eigen::Index n() const { return X.rows(); }
    Eigen::Index cols() const { return X.cols(); }

    static DesignMatrix intercept_only(Eigen::Index n) {
        DesignMatrix d;
        d.X = MatrixXd::Ones(n, 1);
        d.column_names = {"intercept"};
        return d;
    }

    void validate() const {
        if (X.rows() == 0 || X.cols() == 0) throw DataError("design matrix is empty");
        if (!X.allFinite()) throw DataError("design matrix has non-finite entries");
        if ((X.col(0).array() != 1.0).any())
            throw DataError("design matrix must start with an intercept column of ones");
        if (X.rows() < X.cols() + 1)
            throw DataError("design matrix has fewer rows than coefficients");
        if (!column_names.empty() &&
            column_names.size() != static_cast<std::size_t>(X.cols()))
            throw DataError("design column name count does not match column count");
    }

    std::string column_name(Eigen::Index j) const {
        if (j < static_cast<Eigen::Index>(column_names.size())) return column_names[j];
        return "column" + std::to_string(j);
    }

    /// Augmented design [1, j, z] for a constant perturbation value j.
    MatrixXd augmented(double j) const {
        MatrixXd out(X.rows(), X.cols() + 1);
        out.col(0) = X.col(0);
        out.col(1).setConstant(j);
        out.rightCols(X.cols() - 1) = X.rightCols(X.cols() - 1);
        return out;
    }

    std::vector<std::string> augmented_names() const {
        std::vector<std::string> names;
        names.push_back(column_name(0));
        names.push_back("perturbation");
        for (Eigen::Index j = 1; j < cols(); ++j) names.push_back(column_name(j));
        return names;
    }
};

/// Paired per-cell counts with shared observed covariates and per-modality
/// offsets. latent_p holds the simulation truth when available (size 0
/// otherwise).
struct Dataset {
    VectorXd m;  // gene responses
    VectorXd g;  // gRNA responses
    DesignMatrix design;
    VectorXd offset_m;
    VectorXd offset_g;
    VectorXi latent_p;  // optional

    Eigen::Index n() const { return m.size(); }
    bool has_latent_truth() const { return latent_p.size() == m.size(); }

    void validate() const {
        design.validate();
        Eigen::Index nn = design.n();
        if (m.size() != nn || g.size() != nn) throw DataError("response length mismatch");
        if (offset_m.size() != nn || offset_g.size() != nn)
            throw DataError("offset length mismatch");
        if (!m.allFinite() || !g.allFinite() || !offset_m.allFinite() || !offset_g.allFinite())
            throw DataError("non-finite data entries");
    }
};

}  // namespace glmeiv

#endif
