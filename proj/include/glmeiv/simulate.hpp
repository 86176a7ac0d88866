#ifndef GLMEIV_SIMULATE_HPP
#define GLMEIV_SIMULATE_HPP

#include <Eigen/Dense>
#include <chrono>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "glmeiv/assignment.hpp"
#include "glmeiv/em.hpp"
#include "glmeiv/io.hpp"
#include "glmeiv/louis.hpp"
#include "glmeiv/parallel.hpp"
#include "glmeiv/rng.hpp"

namespace glmeiv {

/// Generative parameter set for one Monte Carlo study. Coefficient layout
/// is [beta_0, beta_1, gamma_batch]; the batch covariate is Bernoulli(1/2).
/// Library depths are Poisson with the given means and enter log-link
/// models as log-depth offsets (Gaussian scenarios carry zero offsets).
struct SimScenario {
    Eigen::Index n = 50000;
    double pi = 0.02;
    VectorXd beta_m, beta_g;
    Family family_m = Family::poisson();
    Family family_g = Family::poisson();
    double depth_mean_m = 5000.0;
    double depth_mean_g = 5000.0;
    bool include_batch = true;

    // Misspecification knobs (studies 5-6).
    double doublet_fraction = 0.0;
    enum class Modality { none, gene, grna } doublet_modality = Modality::none;
    bool hidden_covariate = false;  // Uniform(0,1), withheld from the design
    double hidden_coef_m = 0.0, hidden_coef_g = 0.0;

    int n_sim = 100;
    std::uint64_t seed = 1;

    void validate() const {
        if (!(pi > 0.0 && pi <= 0.5)) throw DataError("scenario: pi outside (0, 1/2]");
        if (n_sim < 1) throw DataError("scenario: n_sim must be >= 1");
        if (!(doublet_fraction >= 0.0 && doublet_fraction < 0.5))
            throw DataError("scenario: doublet_fraction outside [0, 0.5)");
        if (beta_m.size() < 2 || beta_m.size() != beta_g.size())
            throw DataError("scenario: coefficient vectors must share length >= 2");
    }

    /// Reference defaults: exp(beta) = (0.01, 0.25, 0.9) for the gene
    /// model, (5e-3, grna_effect, 1.1) for the gRNA model, pi = 0.02.
    static SimScenario main_text(double grna_fold_change = 2.5) {
        SimScenario s;
        s.beta_m = VectorXd(3);
        s.beta_m << std::log(0.01), std::log(0.25), std::log(0.9);
        s.beta_g = VectorXd(3);
        s.beta_g << std::log(5.0e-3), std::log(grna_fold_change), std::log(1.1);
        return s;
    }
};

inline SimScenario scenario_from_config(const KeyValueConfig& kv) {
    SimScenario sc = SimScenario::main_text();
    sc.n = kv.get_long("n", sc.n);
    sc.pi = kv.get_double("pi", sc.pi);
    auto bm = kv.get_doubles("beta_m");
    auto bg = kv.get_doubles("beta_g");
    if (!bm.empty()) sc.beta_m = Eigen::Map<VectorXd>(bm.data(), bm.size());
    if (!bg.empty()) sc.beta_g = Eigen::Map<VectorXd>(bg.data(), bg.size());
    double nb_size = kv.get_double("nb_size", 0.0);
    bool nb_known = kv.get("nb_size_known", "true") != "false";
    sc.family_m = Family::parse(kv.get("family_m", "poisson-log"), nb_size, nb_known);
    sc.family_g = Family::parse(kv.get("family_g", "poisson-log"), nb_size, nb_known);
    sc.depth_mean_m = kv.get_double("depth_mean_m", sc.depth_mean_m);
    sc.depth_mean_g = kv.get_double("depth_mean_g", sc.depth_mean_g);
    sc.include_batch = kv.get("include_batch", "true") != "false";
    sc.doublet_fraction = kv.get_double("doublet_fraction", 0.0);
    std::string dm = kv.get("doublet_modality", "none");
    sc.doublet_modality = dm == "grna"   ? SimScenario::Modality::grna
                          : dm == "gene" ? SimScenario::Modality::gene
                                         : SimScenario::Modality::none;
    sc.hidden_covariate = kv.get("hidden_covariate", "false") == "true";
    sc.hidden_coef_m = kv.get_double("hidden_coef_m", 0.0);
    sc.hidden_coef_g = kv.get_double("hidden_coef_g", 0.0);
    sc.n_sim = static_cast<int>(kv.get_long("n_sim", sc.n_sim));
    sc.seed = static_cast<std::uint64_t>(kv.get_long("seed", 1));
    return sc;
}


namespace detail {

inline double draw_response(const Family& fam, double mu, Rng& rng) {
    switch (fam.kind) {
        case Family::Kind::gaussian_identity: return mu + rng.normal();
        case Family::Kind::poisson_log: return static_cast<double>(rng.poisson(mu));
        case Family::Kind::negbin_log:
            return static_cast<double>(rng.neg_binomial(mu, fam.require_size()));
    }
    return 0.0;
}

inline double linear_component(const VectorXd& beta, int p, double batch, double offset,
                               double hidden = 0.0) {
    double l = beta[0] + beta[1] * p + offset + hidden;
    if (beta.size() > 2) l += beta[2] * batch;
    return l;
}

inline void check_linear_range(const Family& fam, double l) {
    if (fam.log_link() && std::abs(l) > 700.0)
        throw DataError("scenario: linear component exceeds +-700 on the log scale");
}

}  // namespace detail

/// Draws one replicate. Every per-cell quantity comes from a stream keyed
/// by (seed, replicate, cell), so datasets are bit-identical for a given
/// key regardless of execution order. The latent truth is retained.
inline Dataset generate_dataset(const SimScenario& sc, int replicate) {
    sc.validate();
    const Eigen::Index n = sc.n;
    Dataset ds;
    ds.m.resize(n);
    ds.g.resize(n);
    ds.offset_m.resize(n);
    ds.offset_g.resize(n);
    ds.latent_p.resize(n);
    ds.design.X.resize(n, sc.include_batch ? 2 : 1);
    ds.design.X.col(0).setOnes();
    ds.design.column_names =
        sc.include_batch ? std::vector<std::string>{"intercept", "batch"}
                         : std::vector<std::string>{"intercept"};

    const bool offsets = sc.family_m.log_link();
    for (Eigen::Index i = 0; i < n; ++i) {
        Rng rng(sc.seed, static_cast<std::uint64_t>(replicate),
                0x6e000000ULL + static_cast<std::uint64_t>(i));
        int p = rng.bernoulli(sc.pi) ? 1 : 0;
        double batch = sc.include_batch ? (rng.bernoulli(0.5) ? 1.0 : 0.0) : 0.0;
        double dm = offsets ? std::max<long>(1, rng.poisson(sc.depth_mean_m)) : 1.0;
        double dg = offsets ? std::max<long>(1, rng.poisson(sc.depth_mean_g)) : 1.0;
        ds.offset_m[i] = offsets ? std::log(dm) : 0.0;
        ds.offset_g[i] = sc.family_g.log_link() ? std::log(dg) : 0.0;
        ds.latent_p[i] = p;
        if (sc.include_batch) ds.design.X(i, 1) = batch;

        double lm = detail::linear_component(sc.beta_m, p, batch, ds.offset_m[i]);
        double lg = detail::linear_component(sc.beta_g, p, batch, ds.offset_g[i]);
        detail::check_linear_range(sc.family_m, lm);
        detail::check_linear_range(sc.family_g, lg);
        ds.m[i] = detail::draw_response(sc.family_m, sc.family_m.linkinv(lm), rng);
        ds.g[i] = detail::draw_response(sc.family_g, sc.family_g.linkinv(lg), rng);
    }
    return ds;
}

/// Applies the study-5/6 misspecifications: counts are regenerated with the
/// hidden covariate inside the linear component (the emitted design is
/// unchanged), and a random doublet_fraction of cells has the flagged
/// modality's count doubled. Identity when no knob is set.
inline Dataset inject_misspecification(Dataset ds, const SimScenario& sc, int replicate) {
    if (!sc.hidden_covariate && sc.doublet_fraction == 0.0) return ds;
    const Eigen::Index n = ds.n();

    if (sc.hidden_covariate) {
        for (Eigen::Index i = 0; i < n; ++i) {
            Rng rng(sc.seed, static_cast<std::uint64_t>(replicate),
                    0x41dd0000ULL + static_cast<std::uint64_t>(i));
            double u = rng.uniform();
            double batch = sc.include_batch ? ds.design.X(i, 1) : 0.0;
            int p = ds.latent_p[i];
            double lm = detail::linear_component(sc.beta_m, p, batch, ds.offset_m[i],
                                                 sc.hidden_coef_m * u);
            double lg = detail::linear_component(sc.beta_g, p, batch, ds.offset_g[i],
                                                 sc.hidden_coef_g * u);
            ds.m[i] = detail::draw_response(sc.family_m, sc.family_m.linkinv(lm), rng);
            ds.g[i] = detail::draw_response(sc.family_g, sc.family_g.linkinv(lg), rng);
        }
    }

    if (sc.doublet_fraction > 0.0 && sc.doublet_modality != SimScenario::Modality::none) {
        Eigen::Index k = static_cast<Eigen::Index>(std::lround(sc.doublet_fraction * n));
        std::vector<Eigen::Index> idx(n);
        for (Eigen::Index i = 0; i < n; ++i) idx[i] = i;
        Rng rng(sc.seed, static_cast<std::uint64_t>(replicate), 0xd0b1e7);
        for (Eigen::Index i = 0; i < k; ++i) {  // partial Fisher-Yates
            Eigen::Index j = i + static_cast<Eigen::Index>(rng() % (n - i));
            std::swap(idx[i], idx[j]);
        }
        for (Eigen::Index i = 0; i < k; ++i) {
            if (sc.doublet_modality == SimScenario::Modality::grna)
                ds.g[idx[i]] *= 2.0;
            else
                ds.m[idx[i]] *= 2.0;
        }
    }
    return ds;
}

/// Excess background contamination: resamples the gRNA counts from the
/// fitted model with beta_0' = beta_0 + eps*beta_1 and beta_1' =
/// (1-eps)*beta_1, raising the unperturbed mean toward the fixed perturbed
/// mean on the log scale. eps = 0 reproduces the fitted model; eps = 1
/// collapses the separation. Gene expressions, covariates, offsets, and the
/// latent memberships in data.latent_p are held fixed.
inline VectorXd inject_excess_contamination(const VectorXd& beta_g_fitted, const Family& fam_g,
                                            double eps, const Dataset& data, Rng& rng) {
    if (!(eps >= 0.0 && eps <= 1.0))
        throw std::domain_error("inject_excess_contamination: eps outside [0,1]");
    if (!(beta_g_fitted[1] > 0.0))
        throw DataError("inject_excess_contamination: fitted beta_1^g must be positive");
    if (!data.has_latent_truth())
        throw DataError("inject_excess_contamination: data must carry fixed latent memberships");

    VectorXd beta = beta_g_fitted;
    beta[0] += eps * beta_g_fitted[1];
    beta[1] = (1.0 - eps) * beta_g_fitted[1];

    VectorXd l0, l1;
    detail::modality_linear(beta, data.design, data.offset_g, l0, l1);
    VectorXd g_new(data.n());
    for (Eigen::Index i = 0; i < data.n(); ++i) {
        double l = data.latent_p[i] ? l1[i] : l0[i];
        g_new[i] = detail::draw_response(fam_g, fam_g.linkinv(l), rng);
    }
    return g_new;
}

struct ClassificationMetrics {
    double sensitivity = 0.0, specificity = 0.0, balanced_accuracy = 0.0;
    long tp = 0, fp = 0, tn = 0, fn = 0;
};

inline ClassificationMetrics classification_metrics(const VectorXi& assigned,
                                                    const VectorXi& truth) {
    if (assigned.size() != truth.size())
        throw DataError("classification_metrics: length mismatch");
    ClassificationMetrics cm;
    for (Eigen::Index i = 0; i < truth.size(); ++i) {
        if (truth[i] && assigned[i]) ++cm.tp;
        else if (truth[i] && !assigned[i]) ++cm.fn;
        else if (!truth[i] && assigned[i]) ++cm.fp;
        else ++cm.tn;
    }
    if (cm.tp + cm.fn == 0 || cm.fp + cm.tn == 0)
        throw DataError("classification_metrics: truth contains a single class");
    cm.sensitivity = static_cast<double>(cm.tp) / (cm.tp + cm.fn);
    cm.specificity = static_cast<double>(cm.tn) / (cm.tn + cm.fp);
    cm.balanced_accuracy = 0.5 * (cm.sensitivity + cm.specificity);
    return cm;
}

enum class Method { glmeiv_accelerated, glmeiv_vanilla, thresholding, mixture_assign_glm };

inline std::string method_name(Method m) {
    switch (m) {
        case Method::glmeiv_accelerated: return "glmeiv-accelerated";
        case Method::glmeiv_vanilla: return "glmeiv-vanilla";
        case Method::thresholding: return "thresholding";
        case Method::mixture_assign_glm: return "mixture-assign+glm";
    }
    return "?";
}

struct MetricsRow {
    std::string method;
    double grna_fold_change = 0.0;  // scenario coordinate exp(beta_1^g)
    double bias = 0.0, mse = 0.0, coverage = 0.0, ci_width = 0.0;
    double rejection_probability = 0.0, mean_runtime_ms = 0.0;
    int n_converged = 0, n_total = 0;
};

struct EvalConfig {
    EmConfig em;
    double level = 0.95;
    double alpha = 0.05;
    // Threshold selection: a finite number, or NaN for the Bayes boundary
    // computed from the true generative parameters.
    double threshold = std::numeric_limits<double>::quiet_NaN();
    bool nb_size_known = true;  // when false, s is re-estimated per replicate
    int workers = 1;
};

struct ReplicateOutcome {
    bool ok = false;
    double estimate = 0.0, se = 0.0, ci_lo = 0.0, ci_hi = 0.0, p_value = 1.0;
    double runtime_ms = 0.0;
};

namespace detail {

/// Gene GLM on externally supplied assignments (mixture-assign + regression).
inline WaldRecord regress_on_assignments(const Dataset& data, const VectorXi& phat,
                                         const Family& fam_m, double level) {
    Eigen::Index ones = phat.sum();
    if (ones == 0 || ones == phat.size())
        throw DegenerateComponentError("assignment regression: constant assignments");
    MatrixXd X(data.n(), data.design.cols() + 1);
    X.col(0) = data.design.X.col(0);
    X.col(1) = phat.cast<double>();
    X.rightCols(data.design.cols() - 1) = data.design.X.rightCols(data.design.cols() - 1);
    VectorXd w = VectorXd::Ones(data.n());
    GlmFit fit =
        fit_weighted_glm(X, data.m, w, data.offset_m, fam_m, data.design.augmented_names());
    return glm_wald(fit, 1, level, "beta1_m");
}

inline ReplicateOutcome run_method(Method method, const Dataset& data, const SimScenario& sc,
                                   const FamilyPair& fams, const EvalConfig& cfg,
                                   std::uint64_t replicate) {
    ReplicateOutcome out;
    auto t0 = std::chrono::steady_clock::now();
    try {
        switch (method) {
            case Method::glmeiv_accelerated:
            case Method::glmeiv_vanilla: {
                EmConfig em = cfg.em;
                em.mode = method == Method::glmeiv_vanilla ? EmConfig::Mode::vanilla
                                                           : EmConfig::Mode::accelerated;
                em.seed = mix_key(cfg.em.seed, replicate, 0xf17);
                GlmEivFit fit = fit_glmeiv(data, fams, em);
                if (!fit.converged || fit.has_flag("degenerate_pi")) break;
                auto records = wald_inference(fit, data, fams, cfg.level);
                const auto& r = records[2];  // [pi, m:intercept, m:perturbation, ...]
                out = {true, r.estimate, r.se, r.ci_lo, r.ci_hi, r.p_value, 0.0};
                break;
            }
            case Method::thresholding: {
                double c = cfg.threshold;
                if (std::isnan(c))
                    c = covariate_bayes_threshold(sc.beta_g, sc.pi, data, fams.g).threshold;
                ThresholdedRegression tr = thresholded_regression(data, c, fams.m, cfg.level);
                if (!tr.fit.converged) break;
                out = {true,        tr.beta1_m.estimate, tr.beta1_m.se, tr.beta1_m.ci_lo,
                       tr.beta1_m.ci_hi, tr.beta1_m.p_value,  0.0};
                break;
            }
            case Method::mixture_assign_glm: {
                EmConfig em = cfg.em;
                em.seed = mix_key(cfg.em.seed, replicate, 0xa5519);
                MixtureAssignment ma =
                    mixture_assign(data.g, data.design, data.offset_g, fams.g, em);
                if (!ma.converged || !ma.identified) break;
                WaldRecord r = regress_on_assignments(data, ma.assignments, fams.m, cfg.level);
                out = {true, r.estimate, r.se, r.ci_lo, r.ci_hi, r.p_value, 0.0};
                break;
            }
        }
    } catch (const std::exception&) {
        out.ok = false;
    }
    out.runtime_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
            .count();
    return out;
}

}  // namespace detail

/// Monte Carlo method comparison on one scenario: per replicate, every
/// method produces an estimate/CI for beta_1^m; aggregates are bias, MSE,
/// CI coverage of the truth, mean CI width, rejection probability at
/// alpha, and mean runtime. Failed replicates are excluded and counted.
inline std::vector<MetricsRow> evaluate_methods(const SimScenario& sc,
                                                const std::vector<Method>& methods,
                                                const EvalConfig& cfg) {
    sc.validate();
    if (methods.empty()) throw DataError("evaluate_methods: no methods given");
    FamilyPair fams{sc.family_m, sc.family_g};

    std::vector<std::vector<ReplicateOutcome>> results(
        methods.size(), std::vector<ReplicateOutcome>(sc.n_sim));

    parallel_for(sc.n_sim, cfg.workers, [&](std::size_t r) {
        Dataset ds = inject_misspecification(generate_dataset(sc, static_cast<int>(r)), sc,
                                             static_cast<int>(r));
        FamilyPair rep_fams = fams;
        if (sc.family_m.kind == Family::Kind::negbin_log && !cfg.nb_size_known) {
            NbSizeEstimate est = estimate_nb_size(ds.m, ds.design, ds.offset_m);
            rep_fams.m = Family::negbin(est.size, false);
        }
        for (std::size_t k = 0; k < methods.size(); ++k)
            results[k][r] = detail::run_method(methods[k], ds, sc, rep_fams, cfg,
                                               static_cast<std::uint64_t>(r));
    });

    const double truth = sc.beta_m[1];
    std::vector<MetricsRow> rows;
    for (std::size_t k = 0; k < methods.size(); ++k) {
        MetricsRow row;
        row.method = method_name(methods[k]);
        row.grna_fold_change = std::exp(sc.beta_g[1]);
        row.n_total = sc.n_sim;
        double sum = 0, sum_sq = 0, cover = 0, width = 0, reject = 0, ms = 0;
        int n_ok = 0;
        for (const auto& o : results[k]) {
            ms += o.runtime_ms;
            if (!o.ok) continue;
            ++n_ok;
            sum += o.estimate - truth;
            sum_sq += (o.estimate - truth) * (o.estimate - truth);
            cover += (o.ci_lo <= truth && truth <= o.ci_hi) ? 1.0 : 0.0;
            width += o.ci_hi - o.ci_lo;
            reject += o.p_value < cfg.alpha ? 1.0 : 0.0;
        }
        row.n_converged = n_ok;
        if (n_ok > 0) {
            row.bias = sum / n_ok;
            row.mse = sum_sq / n_ok;
            row.coverage = cover / n_ok;
            row.ci_width = width / n_ok;
            row.rejection_probability = reject / n_ok;
        }
        row.mean_runtime_ms = ms / sc.n_sim;
        rows.push_back(row);
    }
    return rows;
}

struct RecCurve {
    std::vector<double> epsilon;
    // median over pairs of |REC| per level, one curve per method
    std::vector<double> thresholding_median;
    std::vector<double> glmeiv_median;
};

/// Semi-synthetic contamination study. Per pair: generate a base dataset,
/// fit GLM-EIV, freeze the Bayes threshold implied by the fitted model,
/// then for each epsilon resample the gRNA counts B times from the
/// contaminated fitted model and track the relative estimate change of
/// both methods against their epsilon = 0 mean estimates.
inline RecCurve contamination_study(const SimScenario& sc, const std::vector<double>& eps_grid,
                                    int B, int n_pairs, const EvalConfig& cfg) {
    sc.validate();
    FamilyPair fams{sc.family_m, sc.family_g};
    const std::size_t L = eps_grid.size();

    // rec[pair][level][method 0=thresh 1=glmeiv]
    std::vector<std::vector<std::array<double, 2>>> mean_est(
        n_pairs, std::vector<std::array<double, 2>>(L, {0.0, 0.0}));
    std::vector<bool> pair_ok(n_pairs, true);

    parallel_for(n_pairs, cfg.workers, [&](std::size_t p) {
        Dataset base = generate_dataset(sc, static_cast<int>(p));
        EmConfig em = cfg.em;
        em.seed = mix_key(cfg.em.seed, p, 0xba5e);
        GlmEivFit fit0;
        try {
            fit0 = fit_glmeiv(base, fams, em);
        } catch (const std::exception&) {
            pair_ok[p] = false;
            return;
        }
        if (!(fit0.params.beta_g[1] > 0.0)) {
            pair_ok[p] = false;
            return;
        }
        double c = covariate_bayes_threshold(fit0.params.beta_g, fit0.params.pi, base, fams.g)
                       .threshold;

        for (std::size_t li = 0; li < L; ++li) {
            int ok[2] = {0, 0};
            double acc[2] = {0.0, 0.0};
            for (int b = 0; b < B; ++b) {
                Rng rng(sc.seed, mix_key(0xec5, p, li, static_cast<std::uint64_t>(b)));
                Dataset ds = base;
                ds.g = inject_excess_contamination(fit0.params.beta_g, fams.g, eps_grid[li],
                                                   base, rng);
                try {
                    ThresholdedRegression tr = thresholded_regression(ds, c, fams.m, cfg.level);
                    acc[0] += tr.beta1_m.estimate;
                    ++ok[0];
                } catch (const std::exception&) {
                }
                try {
                    EmConfig em2 = em;
                    em2.seed = mix_key(em.seed, li, b);
                    GlmEivFit f = fit_glmeiv(ds, fams, em2);
                    if (f.converged) {
                        acc[1] += f.params.beta_m[1];
                        ++ok[1];
                    }
                } catch (const std::exception&) {
                }
            }
            if (ok[0] == 0 || ok[1] == 0) {
                pair_ok[p] = false;
                return;
            }
            mean_est[p][li] = {acc[0] / ok[0], acc[1] / ok[1]};
        }
    });

    RecCurve out;
    out.epsilon = eps_grid;
    for (std::size_t li = 0; li < L; ++li) {
        std::vector<double> rec_t, rec_g;
        for (int p = 0; p < n_pairs; ++p) {
            if (!pair_ok[p]) continue;
            double base_t = mean_est[p][0][0], base_g = mean_est[p][0][1];
            rec_t.push_back(std::abs((mean_est[p][li][0] - base_t) / base_t));
            rec_g.push_back(std::abs((mean_est[p][li][1] - base_g) / base_g));
        }
        if (rec_t.empty()) throw DataError("contamination_study: every pair failed");
        auto median = [](std::vector<double> v) {
            std::sort(v.begin(), v.end());
            return v.size() % 2 ? v[v.size() / 2]
                                : 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]);
        };
        out.thresholding_median.push_back(median(rec_t));
        out.glmeiv_median.push_back(median(rec_g));
    }
    return out;
}

inline std::string metrics_header() {
    return "method,grna_fold_change,bias,mse,coverage,ci_width,rejection_probability,"
           "mean_runtime_ms,n_converged,n_total";
}

inline std::string metrics_row(const MetricsRow& r) {
    std::ostringstream os;
    os << r.method << ',' << format_double(r.grna_fold_change) << ','
       << format_double(r.bias) << ',' << format_double(r.mse) << ','
       << format_double(r.coverage) << ',' << format_double(r.ci_width) << ','
       << format_double(r.rejection_probability) << ',' << format_double(r.mean_runtime_ms)
       << ',' << r.n_converged << ',' << r.n_total;
    return os.str();
}

}  // namespace glmeiv

#endif
