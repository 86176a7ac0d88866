#ifndef GLMEIV_PIPELINE_HPP
#define GLMEIV_PIPELINE_HPP

#include <chrono>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "glmeiv/assignment.hpp"
#include "glmeiv/em.hpp"
#include "glmeiv/io.hpp"
#include "glmeiv/louis.hpp"
#include "glmeiv/parallel.hpp"
#include "glmeiv/zero_inflated.hpp"

namespace glmeiv {

struct PipelineConfig {
    Family family_m = Family::poisson();
    Family family_g = Family::poisson();
    std::string mode = "accelerated";  // vanilla | accelerated | zero_inflated
    // Threshold selection for the thresholding comparator: empty (off),
    // a number, "bayes", or "dataset-wide".
    std::string threshold;
    double level = 0.95;
    EmConfig em;
    int workers = 1;
    std::uint64_t seed = 1;

    static PipelineConfig from_config(const KeyValueConfig& kv) {
        PipelineConfig c;
        double nb_size = kv.get_double("nb_size", 0.0);
        bool nb_known = kv.get("nb_size_known", "true") != "false";
        c.family_m = Family::parse(kv.get("family_m", "poisson-log"), nb_size, nb_known);
        c.family_g = Family::parse(kv.get("family_g", "poisson-log"), nb_size, nb_known);
        c.mode = kv.get("mode", "accelerated");
        if (c.mode != "vanilla" && c.mode != "accelerated" && c.mode != "zero_inflated")
            throw DataError("config: unknown mode '" + c.mode + "'");
        c.threshold = kv.get("threshold", "");
        c.level = kv.get_double("level", 0.95);
        c.em.n_restarts = static_cast<int>(kv.get_long("restarts", 15));
        c.em.tol = kv.get_double("tol", 1e-7);
        c.em.max_iter = static_cast<int>(kv.get_long("max_iter", 100));
        c.em.param_tol = kv.get_double("param_tol", 0.0);
        c.em.mode = c.mode == "vanilla" ? EmConfig::Mode::vanilla : EmConfig::Mode::accelerated;
        return c;
    }
};

/// log(row sum) offsets, the library-size convention for count models.
inline VectorXd depth_offsets(const MatrixXd& counts) {
    VectorXd o(counts.rows());
    for (Eigen::Index i = 0; i < counts.rows(); ++i)
        o[i] = std::log(std::max(1.0, counts.row(i).sum()));
    return o;
}

namespace detail {

inline std::string sanitize_id(const std::string& id) {
    std::string out;
    for (char ch : id)
        out += (std::isalnum(static_cast<unsigned char>(ch)) || ch == '-' || ch == '_')
                   ? ch
                   : '_';
    return out;
}

inline std::uint64_t fnv1a(const void* data, std::size_t len, std::uint64_t h) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
    }
    return h;
}

}  // namespace detail

/// One flat CSV per feature under a directory stamped with a hash of the
/// design, offsets, and family configuration. Entries round-trip doubles
/// exactly.
class PrecomputeStore {
public:
    explicit PrecomputeStore(std::string dir) : dir_(std::move(dir)) {}

    const std::string& dir() const { return dir_; }

    static std::uint64_t context_hash(const DesignMatrix& design, const VectorXd& offset_m,
                                      const VectorXd& offset_g, const PipelineConfig& cfg) {
        std::uint64_t h = 1469598103934665603ULL;
        h = detail::fnv1a(design.X.data(), sizeof(double) * design.X.size(), h);
        h = detail::fnv1a(offset_m.data(), sizeof(double) * offset_m.size(), h);
        h = detail::fnv1a(offset_g.data(), sizeof(double) * offset_g.size(), h);
        std::string fam = cfg.family_m.name() + "|" + cfg.family_g.name() + "|" +
                          format_double(cfg.family_m.size);
        h = detail::fnv1a(fam.data(), fam.size(), h);
        return h;
    }

    void open(std::uint64_t context_hash) {
        namespace fs = std::filesystem;
        fs::create_directories(dir_);
        std::string meta = dir_ + "/store_meta.csv";
        if (fs::exists(meta)) {
            std::ifstream in(meta);
            std::string line;
            std::getline(in, line);
            if (line != "context_hash," + std::to_string(context_hash))
                throw DataError("precompute store " + dir_ +
                                " was built for different inputs; use --force");
        } else {
            std::ofstream out(meta);
            out << "context_hash," << context_hash << '\n';
        }
    }

    std::string entry_path(const std::string& kind, const std::string& id) const {
        return dir_ + "/" + kind + "_" + detail::sanitize_id(id) + ".csv";
    }

    bool has(const std::string& kind, const std::string& id) const {
        return std::filesystem::exists(entry_path(kind, id));
    }

    void write(const std::string& kind, const std::string& id, const VectorXd& coef,
               const VectorXd& fhat) const {
        std::string tmp = entry_path(kind, id) + ".tmp";
        {
            std::ofstream out(tmp);
            if (!out) throw DataError("cannot write " + tmp);
            out << "coef";
            for (Eigen::Index j = 0; j < coef.size(); ++j) out << ',' << format_double(coef[j]);
            out << '\n';
            for (Eigen::Index i = 0; i < fhat.size(); ++i)
                out << "fhat," << format_double(fhat[i]) << '\n';
        }
        std::filesystem::rename(tmp, entry_path(kind, id));
    }

    void read(const std::string& kind, const std::string& id, VectorXd& coef,
              VectorXd& fhat) const {
        std::ifstream in(entry_path(kind, id));
        if (!in) throw DataError("missing precompute entry " + entry_path(kind, id));
        std::string line;
        std::vector<double> c, f;
        while (std::getline(in, line)) {
            auto fields = split_csv_line(line);
            if (fields.empty()) continue;
            if (fields[0] == "coef")
                for (std::size_t j = 1; j < fields.size(); ++j)
                    c.push_back(std::stod(fields[j]));
            else if (fields[0] == "fhat" && fields.size() == 2)
                f.push_back(std::stod(fields[1]));
        }
        coef = Eigen::Map<VectorXd>(c.data(), static_cast<Eigen::Index>(c.size()));
        fhat = Eigen::Map<VectorXd>(f.data(), static_cast<Eigen::Index>(f.size()));
    }

private:
    std::string dir_;
};

struct PrecomputeSummary {
    int fits_executed = 0;
    int entries_skipped = 0;
};

/// Covariate-only nuisance regressions for every gene and every gRNA, written
/// once to the store. Idempotent: existing entries are skipped unless forced.
inline PrecomputeSummary precompute_all(const CountMatrix& genes, const CountMatrix& grnas,
                                        const DesignMatrix& design, const VectorXd& offset_m,
                                        const VectorXd& offset_g, const PipelineConfig& cfg,
                                        PrecomputeStore& store, bool force = false) {
    if (genes.n_cells() != design.n() || grnas.n_cells() != design.n())
        throw DataError("precompute_all: matrices and design are not row-aligned");
    design.validate();
    store.open(PrecomputeStore::context_hash(design, offset_m, offset_g, cfg));

    PrecomputeSummary summary;
    VectorXd ones = VectorXd::Ones(design.n());
    auto run = [&](const CountMatrix& mat, const std::string& kind, const Family& fam,
                   const VectorXd& offsets) {
        for (Eigen::Index j = 0; j < mat.n_features(); ++j) {
            const std::string& id = mat.feature_ids[j];
            if (!force && store.has(kind, id)) {
                ++summary.entries_skipped;
                continue;
            }
            GlmFit fit = fit_weighted_glm(design, mat.values.col(j), ones, offsets, fam);
            store.write(kind, id, fit.coefficients, fit.fitted_linear);
            ++summary.fits_executed;
        }
    };
    run(genes, "gene", cfg.family_m, offset_m);
    run(grnas, "grna", cfg.family_g, offset_g);
    return summary;
}

struct PairResult {
    std::string gene_id, grna_id, label;
    std::string method;
    double estimate = 0.0, fold_change = 0.0, se = 0.0, ci_lo = 0.0, ci_hi = 0.0,
           p_value = 1.0;
    bool converged = false;
    std::string flags;
    int n_glm_fits = 0;
    double ms_elapsed = 0.0;
    bool errored = false;
};

inline std::string pair_result_header() {
    return "gene_id,grna_id,label,method,estimate,fold_change,se,ci_lo,ci_hi,p_value,"
           "converged,flags,n_glm_fits,ms_elapsed";
}

inline std::string pair_result_row(const PairResult& r) {
    std::ostringstream os;
    os << r.gene_id << ',' << r.grna_id << ',' << r.label << ',' << r.method << ','
       << format_double(r.estimate) << ',' << format_double(r.fold_change) << ','
       << format_double(r.se) << ',' << format_double(r.ci_lo) << ','
       << format_double(r.ci_hi) << ',' << format_double(r.p_value) << ','
       << (r.converged ? "true" : "false") << ',' << r.flags << ',' << r.n_glm_fits << ','
       << format_double(r.ms_elapsed);
    return os.str();
}

namespace detail {

inline std::string join_flags(const std::vector<std::string>& flags) {
    std::string out;
    for (const auto& f : flags) out += (out.empty() ? "" : ";") + f;
    return out;
}

inline PairResult analyze_one_pair(const PairSpec& pair, const CountMatrix& genes,
                                   const CountMatrix& grnas, const DesignMatrix& design,
                                   const VectorXd& offset_m, const VectorXd& offset_g,
                                   const PrecomputeStore& store, const PipelineConfig& cfg,
                                   std::uint64_t pair_index) {
    PairResult r;
    r.gene_id = pair.gene_id;
    r.grna_id = pair.grna_id;
    r.label = pair.label;
    r.method = cfg.mode == "zero_inflated" ? "glmeiv-zero-inflated"
                                           : ("glmeiv-" + cfg.mode);
    auto t0 = std::chrono::steady_clock::now();
    try {
        Dataset data;
        data.m = genes.values.col(genes.feature_index(pair.gene_id));
        data.g = grnas.values.col(grnas.feature_index(pair.grna_id));
        data.design = design;
        data.offset_m = offset_m;
        data.offset_g = offset_g;
        data.validate();

        FamilyPair fams{cfg.family_m, cfg.family_g};
        if (cfg.mode == "zero_inflated") {
            EmConfig em = cfg.em;
            ZiFit fit = run_zi_em(data, fams, em);
            InfoMatrix info = zi_observed_information(fit.params, data, fams);
            Eigen::LDLT<MatrixXd> ldlt(info.J);
            if (ldlt.info() != Eigen::Success || !ldlt.isPositive())
                throw InferenceError("zero-inflated information not positive definite");
            MatrixXd cov = ldlt.solve(MatrixXd::Identity(info.J.rows(), info.J.cols()));
            WaldRecord w = wald_record("m:perturbation", fit.params.beta_m[1],
                                       std::sqrt(cov(2, 2)), cfg.level);
            r.estimate = w.estimate;
            r.fold_change = std::exp(w.estimate);
            r.se = w.se;
            r.ci_lo = w.ci_lo;
            r.ci_hi = w.ci_hi;
            r.p_value = w.p_value;
            r.converged = fit.converged;
            r.flags = join_flags(fit.flags);
            r.n_glm_fits = fit.n_glm_fits;
        } else {
            PilotEstimates pilots;
            store.read("gene", pair.gene_id, pilots.nuisance_m, pilots.fhat_m);
            store.read("grna", pair.grna_id, pilots.nuisance_g, pilots.fhat_g);
            if (pilots.fhat_m.size() != data.n() || pilots.fhat_g.size() != data.n())
                throw DataError("precompute entries do not match the cell count");
            EmConfig em = cfg.em;
            em.seed = mix_key(cfg.seed, pair_index, 0xfa17);
            GlmEivFit fit = fit_glmeiv_from_pilots(data, fams, em, pilots);
            auto records = wald_inference(fit, data, fams, cfg.level);
            const auto& w = records[2];  // m:perturbation
            r.estimate = w.estimate;
            r.fold_change = std::exp(w.estimate);
            r.se = w.se;
            r.ci_lo = w.ci_lo;
            r.ci_hi = w.ci_hi;
            r.p_value = w.p_value;
            r.converged = fit.converged;
            r.flags = join_flags(fit.flags);
            r.n_glm_fits = fit.n_glm_fits;
        }
    } catch (const std::exception& e) {
        r.errored = true;
        r.converged = false;
        r.flags = std::string("error: ") + e.what();
    }
    r.ms_elapsed =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
            .count();
    return r;
}

inline PairResult threshold_one_pair(const PairSpec& pair, const CountMatrix& genes,
                                     const CountMatrix& grnas, const DesignMatrix& design,
                                     const VectorXd& offset_m, const VectorXd& offset_g,
                                     std::optional<double> shared_threshold,
                                     const PipelineConfig& cfg, std::uint64_t pair_index) {
    PairResult r;
    r.gene_id = pair.gene_id;
    r.grna_id = pair.grna_id;
    r.label = pair.label;
    r.method = "thresholding";
    auto t0 = std::chrono::steady_clock::now();
    try {
        Dataset data;
        data.m = genes.values.col(genes.feature_index(pair.gene_id));
        data.g = grnas.values.col(grnas.feature_index(pair.grna_id));
        data.design = design;
        data.offset_m = offset_m;
        data.offset_g = offset_g;
        double threshold;
        if (shared_threshold) {
            threshold = *shared_threshold;
        } else {
            // Per-pair Bayes boundary from this pair's own gRNA mixture fit.
            EmConfig em = cfg.em;
            em.seed = mix_key(cfg.seed, pair_index, 0xba1);
            MixtureAssignment ma =
                mixture_assign(data.g, design, offset_g, cfg.family_g, em);
            if (!ma.identified || !(ma.params.beta_g[1] > 0.0))
                throw DegenerateComponentError(
                    "per-pair Bayes threshold: gRNA mixture not identified");
            threshold =
                covariate_bayes_threshold(ma.params.beta_g, ma.params.pi, data, cfg.family_g)
                    .threshold;
        }
        ThresholdedRegression tr = thresholded_regression(data, threshold, cfg.family_m,
                                                          cfg.level);
        r.estimate = tr.beta1_m.estimate;
        r.fold_change = std::exp(tr.beta1_m.estimate);
        r.se = tr.beta1_m.se;
        r.ci_lo = tr.beta1_m.ci_lo;
        r.ci_hi = tr.beta1_m.ci_hi;
        r.p_value = tr.beta1_m.p_value;
        r.converged = tr.fit.converged;
        r.n_glm_fits = 1;
    } catch (const std::exception& e) {
        r.errored = true;
        r.flags = std::string("error: ") + e.what();
    }
    r.ms_elapsed =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
            .count();
    return r;
}

}  // namespace detail

/// Resolves the configured threshold: a number, or "bayes"/"dataset-wide"
/// computed from gRNA-only mixture fits on sampled pairs (medians across
/// pairs for the dataset-wide variant).
inline double resolve_threshold(const std::vector<PairSpec>& pairs, const CountMatrix& grnas,
                                const DesignMatrix& design, const VectorXd& offset_g,
                                const PipelineConfig& cfg, int sample_size = 200) {
    if (cfg.threshold.empty()) throw DataError("no threshold configured");
    if (cfg.threshold != "dataset-wide") return std::stod(cfg.threshold);

    // Distinct gRNA features referenced by the pairs, in first-seen order.
    std::vector<std::string> ids;
    for (const auto& p : pairs) {
        bool seen = false;
        for (const auto& id : ids) seen = seen || id == p.grna_id;
        if (!seen) ids.push_back(p.grna_id);
    }
    int take = std::min<int>(sample_size, static_cast<int>(ids.size()));
    std::vector<VectorXd> betas;
    std::vector<double> pis;
    Dataset probe;
    probe.design = design;
    probe.offset_g = offset_g;
    probe.offset_m = VectorXd::Zero(design.n());
    probe.m = VectorXd::Zero(design.n());
    for (int k = 0; k < take; ++k) {
        EmConfig em = cfg.em;
        em.seed = mix_key(cfg.seed, static_cast<std::uint64_t>(k), 0x7712e5);
        MixtureAssignment ma = mixture_assign(grnas.values.col(grnas.feature_index(ids[k])),
                                              design, offset_g, cfg.family_g, em);
        if (!ma.identified || !(ma.params.beta_g[1] > 0.0)) continue;
        betas.push_back(ma.params.beta_g);
        pis.push_back(ma.params.pi);
    }
    if (betas.empty())
        throw DegenerateComponentError("threshold resolution: no identified gRNA fits");
    probe.g = grnas.values.col(grnas.feature_index(ids[0]));
    return dataset_wide_threshold(betas, pis, probe, cfg.family_g).threshold;
}

struct AnalyzeResult {
    std::vector<PairResult> rows;
    int n_errored = 0;
};

/// Per-pair reduced GLM-EIV + full EM + Wald inference over the precompute
/// store, processed concurrently; failures become flagged rows, never an
/// aborted batch. Row order follows pair order regardless of worker count.
inline AnalyzeResult analyze_pairs(const std::vector<PairSpec>& pairs,
                                   const CountMatrix& genes, const CountMatrix& grnas,
                                   const DesignMatrix& design, const VectorXd& offset_m,
                                   const VectorXd& offset_g, const PrecomputeStore& store,
                                   const PipelineConfig& cfg) {
    AnalyzeResult out;
    const bool with_threshold = !cfg.threshold.empty();
    std::optional<double> shared_threshold;
    if (with_threshold && cfg.threshold != "bayes")
        shared_threshold = resolve_threshold(pairs, grnas, design, offset_g, cfg);

    const int rows_per_pair = with_threshold ? 2 : 1;
    out.rows.resize(pairs.size() * rows_per_pair);
    parallel_for(pairs.size(), cfg.workers, [&](std::size_t k) {
        out.rows[k * rows_per_pair] =
            detail::analyze_one_pair(pairs[k], genes, grnas, design, offset_m, offset_g,
                                     store, cfg, static_cast<std::uint64_t>(k));
        if (with_threshold)
            out.rows[k * rows_per_pair + 1] = detail::threshold_one_pair(
                pairs[k], genes, grnas, design, offset_m, offset_g, shared_threshold, cfg,
                static_cast<std::uint64_t>(k));
    });
    for (const auto& r : out.rows) out.n_errored += r.errored ? 1 : 0;
    return out;
}

inline void write_pair_results(const std::string& path, const std::vector<PairResult>& rows) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path);
    out << pair_result_header() << '\n';
    for (const auto& r : rows) out << pair_result_row(r) << '\n';
}

}  // namespace glmeiv

#endif
