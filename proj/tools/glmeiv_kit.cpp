// glmeiv-kit: command-line front end for simulation studies, single-pair
// fits, the at-scale precompute/analyze pipeline, the thresholding-theory
// grid dump, and gRNA-to-cell assignment.

#include <CLI11.hpp>
#include <fstream>
#include <iostream>

#include "glmeiv/glmeiv.hpp"

using namespace glmeiv;

namespace {

std::vector<Method> parse_methods(const std::string& csv) {
    std::vector<Method> out;
    for (const auto& name : split_csv_line(csv)) {
        if (name == "glmeiv-accelerated") out.push_back(Method::glmeiv_accelerated);
        else if (name == "glmeiv-vanilla") out.push_back(Method::glmeiv_vanilla);
        else if (name == "thresholding") out.push_back(Method::thresholding);
        else if (name == "mixture-assign+glm") out.push_back(Method::mixture_assign_glm);
        else if (!name.empty()) throw DataError("unknown method '" + name + "'");
    }
    return out;
}

EvalConfig eval_config_from(const KeyValueConfig& kv, int workers) {
    EvalConfig cfg;
    cfg.em.n_restarts = static_cast<int>(kv.get_long("restarts", 15));
    cfg.em.tol = kv.get_double("tol", 1e-7);
    cfg.em.max_iter = static_cast<int>(kv.get_long("max_iter", 100));
    cfg.em.param_tol = kv.get_double("param_tol", 0.0);
    cfg.em.seed = static_cast<std::uint64_t>(kv.get_long("seed", 1));
    cfg.level = kv.get_double("level", 0.95);
    cfg.nb_size_known = kv.get("nb_size_known", "true") != "false";
    std::string thr = kv.get("threshold", "bayes");
    cfg.threshold = thr == "bayes" ? std::numeric_limits<double>::quiet_NaN()
                                   : std::stod(thr);
    cfg.workers = workers;
    return cfg;
}

int cmd_simulate(const std::string& scenario_path, const std::string& out_path,
                 const std::string& rec_out, int workers) {
    KeyValueConfig kv = KeyValueConfig::from_file(scenario_path);
    SimScenario base = scenario_from_config(kv);
    EvalConfig cfg = eval_config_from(kv, workers);
    std::vector<Method> methods = parse_methods(
        kv.get("methods", "glmeiv-accelerated,thresholding,mixture-assign+glm"));

    std::vector<double> grid = kv.get_doubles("grna_fold_changes");
    if (grid.empty()) grid.push_back(std::exp(base.beta_g[1]));

    std::ofstream out(out_path);
    if (!out) throw DataError("cannot write " + out_path);
    out << metrics_header() << '\n';
    for (double fc : grid) {
        SimScenario sc = base;
        sc.beta_g[1] = std::log(fc);
        for (const auto& row : evaluate_methods(sc, methods, cfg))
            out << metrics_row(row) << '\n';
    }
    std::cerr << "wrote " << out_path << '\n';

    std::vector<double> eps = kv.get_doubles("contamination_grid");
    if (!eps.empty()) {
        int B = static_cast<int>(kv.get_long("contamination_reps", 50));
        int n_pairs = static_cast<int>(kv.get_long("contamination_pairs", 20));
        RecCurve rec = contamination_study(base, eps, B, n_pairs, cfg);
        std::string path = rec_out.empty() ? out_path + ".rec.csv" : rec_out;
        std::ofstream ro(path);
        ro << "epsilon,thresholding_median_rec,glmeiv_median_rec\n";
        for (std::size_t i = 0; i < rec.epsilon.size(); ++i)
            ro << format_double(rec.epsilon[i]) << ','
               << format_double(rec.thresholding_median[i]) << ','
               << format_double(rec.glmeiv_median[i]) << '\n';
        std::cerr << "wrote " << path << '\n';
    }
    return 0;
}

struct PipelineInputs {
    CountMatrix genes, grnas;
    DesignMatrix design;
    VectorXd offset_m, offset_g;
};

PipelineInputs load_inputs(const std::string& genes_path, const std::string& grnas_path,
                           const std::string& cov_path) {
    PipelineInputs in;
    in.genes = read_count_matrix(genes_path);
    in.grnas = read_count_matrix(grnas_path);
    if (cov_path.empty())
        in.design = DesignMatrix::intercept_only(in.genes.n_cells());
    else
        in.design = read_covariates_csv(cov_path);
    if (in.genes.n_cells() != in.grnas.n_cells() || in.genes.n_cells() != in.design.n())
        throw DataError("gene matrix, gRNA matrix, and covariates are not row-aligned");
    in.offset_m = depth_offsets(in.genes.values);
    in.offset_g = depth_offsets(in.grnas.values);
    return in;
}

int cmd_pipeline(const std::string& genes_path, const std::string& grnas_path,
                 const std::string& cov_path, const std::string& pairs_path,
                 const std::string& config_path, const std::string& out_path,
                 const std::string& store_dir, int workers, long seed, bool force) {
    PipelineInputs in = load_inputs(genes_path, grnas_path, cov_path);
    std::vector<PairSpec> pairs = read_pairs_csv(pairs_path);
    PipelineConfig cfg = config_path.empty()
                             ? PipelineConfig{}
                             : PipelineConfig::from_config(
                                   KeyValueConfig::from_file(config_path));
    cfg.workers = workers;
    cfg.seed = static_cast<std::uint64_t>(seed);

    PrecomputeStore store(store_dir.empty() ? out_path + ".store" : store_dir);
    PrecomputeSummary pre = precompute_all(in.genes, in.grnas, in.design, in.offset_m,
                                           in.offset_g, cfg, store, force);
    std::cerr << "precompute: " << pre.fits_executed << " fits, " << pre.entries_skipped
              << " reused\n";

    AnalyzeResult res = analyze_pairs(pairs, in.genes, in.grnas, in.design, in.offset_m,
                                      in.offset_g, store, cfg);
    write_pair_results(out_path, res.rows);
    std::cerr << "wrote " << out_path << " (" << res.rows.size() << " rows, "
              << res.n_errored << " errored)\n";
    return res.n_errored == 0 ? 0 : 2;
}

int cmd_fit_pair(const std::string& genes_path, const std::string& grnas_path,
                 const std::string& cov_path, const std::string& gene_id,
                 const std::string& grna_id, const std::string& config_path, long seed) {
    PipelineInputs in = load_inputs(genes_path, grnas_path, cov_path);
    PipelineConfig cfg = config_path.empty()
                             ? PipelineConfig{}
                             : PipelineConfig::from_config(
                                   KeyValueConfig::from_file(config_path));
    Dataset data;
    data.m = in.genes.values.col(in.genes.feature_index(gene_id));
    data.g = in.grnas.values.col(in.grnas.feature_index(grna_id));
    data.design = in.design;
    data.offset_m = in.offset_m;
    data.offset_g = in.offset_g;
    data.validate();

    FamilyPair fams{cfg.family_m, cfg.family_g};
    EmConfig em = cfg.em;
    em.seed = static_cast<std::uint64_t>(seed);
    GlmEivFit fit = fit_glmeiv(data, fams, em);
    auto records = wald_inference(fit, data, fams, cfg.level);

    std::cout << "pair: gene=" << gene_id << " grna=" << grna_id << '\n'
              << "mode: " << cfg.mode << "  families: " << cfg.family_m.name() << '/'
              << cfg.family_g.name() << '\n'
              << "converged: " << (fit.converged ? "yes" : "no")
              << "  iterations: " << fit.loglik_trace.size()
              << "  glm fits: " << fit.n_glm_fits << "  mu clamps: " << fit.mu_clamps << '\n'
              << "log-likelihood: " << format_double(fit.log_lik()) << '\n';
    if (!fit.flags.empty()) {
        std::cout << "flags:";
        for (const auto& f : fit.flags) std::cout << ' ' << f;
        std::cout << '\n';
    }
    std::cout << "parameter,estimate,se,ci_lo,ci_hi,z,p_value\n";
    for (const auto& r : records)
        std::cout << r.name << ',' << format_double(r.estimate) << ',' << format_double(r.se)
                  << ',' << format_double(r.ci_lo) << ',' << format_double(r.ci_hi) << ','
                  << format_double(r.z) << ',' << format_double(r.p_value) << '\n';
    std::cout << "fold_change," << format_double(std::exp(fit.params.beta_m[1])) << '\n';
    std::cout << "loglik_trace";
    for (double v : fit.loglik_trace) std::cout << ',' << format_double(v);
    std::cout << '\n';
    return fit.converged ? 0 : 2;
}

int cmd_threshold_theory(const std::vector<double>& b1_grid, const std::vector<double>& pis,
                         const std::vector<double>& cs, const std::vector<double>& b0s,
                         double beta_m, const std::string& out_path) {
    std::ofstream out(out_path);
    if (!out) throw DataError("cannot write " + out_path);
    out << "beta_g1,pi,c,beta_g0,gamma,bias,l,avar\n";
    for (double b1 : b1_grid)
        for (double pi : pis)
            for (double c : cs)
                for (double b0 : b0s) {
                    ThresholdTheory att = attenuation_bias(b1, pi, c, b0);
                    ThresholdTheory bv = bv_decomposition(beta_m, b1, pi, c);
                    out << format_double(b1) << ',' << format_double(pi) << ','
                        << format_double(c) << ',' << format_double(b0) << ','
                        << format_double(att.gamma) << ',' << format_double(att.bias) << ','
                        << format_double(bv.l) << ',' << format_double(bv.avar) << '\n';
                }
    std::cerr << "wrote " << out_path << '\n';
    return 0;
}

int cmd_assign(const std::string& grnas_path, const std::string& cov_path,
               const std::string& config_path, const std::string& grna_id,
               const std::string& out_path, long seed) {
    CountMatrix grnas = read_count_matrix(grnas_path);
    DesignMatrix design = cov_path.empty() ? DesignMatrix::intercept_only(grnas.n_cells())
                                           : read_covariates_csv(cov_path);
    PipelineConfig cfg = config_path.empty()
                             ? PipelineConfig{}
                             : PipelineConfig::from_config(
                                   KeyValueConfig::from_file(config_path));
    VectorXd offsets = depth_offsets(grnas.values);

    std::vector<std::string> ids =
        grna_id.empty() ? grnas.feature_ids : std::vector<std::string>{grna_id};
    std::ofstream out(out_path);
    if (!out) throw DataError("cannot write " + out_path);
    out << "cell,grna_id,assignment,posterior,converged,identified\n";
    for (const auto& id : ids) {
        EmConfig em = cfg.em;
        em.seed = mix_key(static_cast<std::uint64_t>(seed),
                          std::hash<std::string>{}(id));
        MixtureAssignment ma = mixture_assign(grnas.values.col(grnas.feature_index(id)),
                                              design, offsets, cfg.family_g, em);
        for (Eigen::Index i = 0; i < ma.assignments.size(); ++i)
            out << (i + 1) << ',' << id << ',' << ma.assignments[i] << ','
                << format_double(ma.posterior[i]) << ',' << (ma.converged ? 1 : 0) << ','
                << (ma.identified ? 1 : 0) << '\n';
    }
    std::cerr << "wrote " << out_path << '\n';
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"GLM-EIV toolkit: paired-count measurement-error models for "
                 "single-cell CRISPR screens"};
    app.require_subcommand(1);

    // simulate
    std::string sim_scenario, sim_out, sim_rec_out;
    int sim_workers = 1;
    auto* sim = app.add_subcommand("simulate", "run a Monte Carlo scenario to a metrics CSV");
    sim->add_option("--scenario", sim_scenario, "scenario key=value file")->required();
    sim->add_option("--out", sim_out, "metrics CSV path")->required();
    sim->add_option("--rec-out", sim_rec_out, "REC curve CSV (with contamination_grid)");
    sim->add_option("--workers", sim_workers, "worker threads");

    // fit-pair
    std::string fp_genes, fp_grnas, fp_cov, fp_gene, fp_grna, fp_config;
    long fp_seed = 1;
    auto* fp = app.add_subcommand("fit-pair", "fit one gene/gRNA pair with diagnostics");
    fp->add_option("--genes", fp_genes)->required();
    fp->add_option("--grnas", fp_grnas)->required();
    fp->add_option("--covariates", fp_cov);
    fp->add_option("--gene-id", fp_gene)->required();
    fp->add_option("--grna-id", fp_grna)->required();
    fp->add_option("--config", fp_config);
    fp->add_option("--seed", fp_seed);

    // pipeline
    std::string pl_genes, pl_grnas, pl_cov, pl_pairs, pl_config, pl_out, pl_store;
    int pl_workers = 1;
    long pl_seed = 1;
    bool pl_force = false;
    auto* pl = app.add_subcommand("pipeline", "precompute and analyze gene/gRNA pairs");
    pl->add_option("--genes", pl_genes)->required();
    pl->add_option("--grnas", pl_grnas)->required();
    pl->add_option("--covariates", pl_cov);
    pl->add_option("--pairs", pl_pairs)->required();
    pl->add_option("--config", pl_config);
    pl->add_option("--out", pl_out)->required();
    pl->add_option("--store", pl_store, "precompute store directory");
    pl->add_option("--workers", pl_workers);
    pl->add_option("--seed", pl_seed);
    pl->add_flag("--force", pl_force, "recompute existing store entries");

    // threshold-theory
    std::vector<double> tt_b1, tt_pi, tt_c, tt_b0;
    double tt_bm = 1.0;
    std::string tt_out;
    auto* tt = app.add_subcommand("threshold-theory",
                                  "dump the closed-form bias/variance grid as CSV");
    tt->add_option("--beta-g1", tt_b1, "gRNA effect grid")->required();
    tt->add_option("--pi", tt_pi, "perturbation probability grid")->required();
    tt->add_option("--c", tt_c, "threshold grid")->required();
    tt->add_option("--beta-g0", tt_b0, "gRNA intercept grid")->required();
    tt->add_option("--beta-m", tt_bm, "gene effect for the (l, avar) columns");
    tt->add_option("--out", tt_out)->required();

    // assign
    std::string as_grnas, as_cov, as_config, as_id, as_out;
    long as_seed = 1;
    auto* as = app.add_subcommand("assign", "gRNA mixture assignment to per-cell CSV");
    as->add_option("--grnas", as_grnas)->required();
    as->add_option("--covariates", as_cov);
    as->add_option("--config", as_config);
    as->add_option("--grna-id", as_id, "restrict to one gRNA");
    as->add_option("--out", as_out)->required();
    as->add_option("--seed", as_seed);

    CLI11_PARSE(app, argc, argv);
    try {
        if (sim->parsed()) return cmd_simulate(sim_scenario, sim_out, sim_rec_out, sim_workers);
        if (fp->parsed())
            return cmd_fit_pair(fp_genes, fp_grnas, fp_cov, fp_gene, fp_grna, fp_config,
                                fp_seed);
        if (pl->parsed())
            return cmd_pipeline(pl_genes, pl_grnas, pl_cov, pl_pairs, pl_config, pl_out,
                                pl_store, pl_workers, pl_seed, pl_force);
        if (tt->parsed())
            return cmd_threshold_theory(tt_b1, tt_pi, tt_c, tt_b0, tt_bm, tt_out);
        if (as->parsed())
            return cmd_assign(as_grnas, as_cov, as_config, as_id, as_out, as_seed);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
