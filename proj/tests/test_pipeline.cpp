#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "glmeiv/pipeline.hpp"
#include "glmeiv/simulate.hpp"

using namespace glmeiv;

namespace {

// Synthetic multi-feature fixture. Each gRNA feature carries its own latent
// perturbation; gene feature j responds to gRNA feature (j mod R) with the
// given effect (0 = negative-control genes). Filler features absorb the
// remaining library so that row sums equal the generated depths.
struct Fixture {
    CountMatrix genes, grnas;
    DesignMatrix design;
    VectorXd offset_m, offset_g;
    std::vector<std::vector<int>> latent;  // per gRNA feature, per cell
};

Fixture make_fixture(Eigen::Index n, int n_genes, int n_grnas, std::uint64_t seed,
                     double beta1_m, double grna_fc = 4.0) {
    Fixture fx;
    const double dm_mean = 1000.0, dg_mean = 1000.0, pi = 0.02;
    fx.design.X.resize(n, 2);
    fx.design.X.col(0).setOnes();
    fx.design.column_names = {"intercept", "batch"};
    fx.genes.values.resize(n, n_genes + 1);
    fx.grnas.values.resize(n, n_grnas + 1);
    for (int j = 0; j < n_genes; ++j) fx.genes.feature_ids.push_back("gene" + std::to_string(j));
    fx.genes.feature_ids.push_back("gene_other");
    for (int r = 0; r < n_grnas; ++r) fx.grnas.feature_ids.push_back("grna" + std::to_string(r));
    fx.grnas.feature_ids.push_back("grna_other");
    fx.latent.assign(n_grnas, std::vector<int>(n, 0));

    for (Eigen::Index i = 0; i < n; ++i) {
        Rng rng(seed, 0, 0x50000ULL + static_cast<std::uint64_t>(i));
        double batch = rng.bernoulli(0.5) ? 1.0 : 0.0;
        fx.design.X(i, 1) = batch;
        double dm = std::max<long>(1, rng.poisson(dm_mean));
        double dg = std::max<long>(1, rng.poisson(dg_mean));
        for (int r = 0; r < n_grnas; ++r) fx.latent[r][i] = rng.bernoulli(pi) ? 1 : 0;

        double gene_total = 0.0;
        for (int j = 0; j < n_genes; ++j) {
            int p = fx.latent[j % n_grnas][i];
            double mu = std::exp(std::log(0.01) + beta1_m * p + std::log(0.9) * batch) * dm;
            double y = rng.poisson(mu);
            fx.genes.values(i, j) = y;
            gene_total += y;
        }
        fx.genes.values(i, n_genes) = std::max(0.0, dm - gene_total);

        double grna_total = 0.0;
        for (int r = 0; r < n_grnas; ++r) {
            int p = fx.latent[r][i];
            double mu =
                std::exp(std::log(5e-3) + std::log(grna_fc) * p + std::log(1.1) * batch) * dg;
            double y = rng.poisson(mu);
            fx.grnas.values(i, r) = y;
            grna_total += y;
        }
        fx.grnas.values(i, n_grnas) = std::max(0.0, dg - grna_total);
    }
    fx.offset_m = depth_offsets(fx.genes.values);
    fx.offset_g = depth_offsets(fx.grnas.values);
    return fx;
}

std::string strip_timing(const std::string& csv) {
    // Drop the trailing ms_elapsed column of every row.
    std::istringstream in(csv);
    std::string line, out;
    while (std::getline(in, line)) {
        auto pos = line.rfind(',');
        out += line.substr(0, pos) + '\n';
    }
    return out;
}

std::string results_to_string(const std::vector<PairResult>& rows) {
    std::string s = pair_result_header() + '\n';
    for (const auto& r : rows) s += pair_result_row(r) + '\n';
    return s;
}

std::string temp_dir(const std::string& tag) {
    auto dir = std::filesystem::temp_directory_path() / ("glmeiv_test_" + tag);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir.string();
}

}  // namespace

TEST_CASE("matrix and table IO") {
    std::string dir = temp_dir("io");
    SECTION("matrix market round trip") {
        MatrixXd m(3, 2);
        m << 0, 2, 5, 0, 1.5, 7;
        write_matrix_market(dir + "/m.mtx", m);
        CountMatrix back = read_matrix_market(dir + "/m.mtx");
        CHECK(back.values == m);
        CHECK(back.feature_ids == std::vector<std::string>{"1", "2"});
    }
    SECTION("dense csv with header") {
        {
            std::ofstream out(dir + "/counts.csv");
            out << "f1,f2\n1,2\n3,4\n";
        }
        CountMatrix cm = read_dense_csv(dir + "/counts.csv");
        CHECK(cm.feature_ids == std::vector<std::string>{"f1", "f2"});
        CHECK(cm.values(1, 0) == 3.0);
        CHECK(cm.feature_index("f2") == 1);
        CHECK_THROWS_AS(cm.feature_index("nope"), DataError);
    }
    SECTION("covariates gain an intercept column") {
        {
            std::ofstream out(dir + "/cov.csv");
            out << "batch\n0\n1\n0\n1\n";
        }
        DesignMatrix d = read_covariates_csv(dir + "/cov.csv");
        CHECK(d.X.cols() == 2);
        CHECK(d.column_names.front() == "intercept");
        CHECK((d.X.col(0).array() == 1.0).all());
    }
    SECTION("pairs csv with labels") {
        {
            std::ofstream out(dir + "/pairs.csv");
            out << "gene_id,grna_id,label\n"
                << "gene0,grna0,cis\n"
                << "gene1,grna1,negative-control\n"
                << "gene2,grna0,\n";
        }
        auto pairs = read_pairs_csv(dir + "/pairs.csv");
        REQUIRE(pairs.size() == 3);
        CHECK(pairs[0].label == "cis");
        CHECK(pairs[2].label.empty());
        {
            std::ofstream out(dir + "/bad.csv");
            out << "gene0,grna0,bogus-label\n";
        }
        CHECK_THROWS_AS(read_pairs_csv(dir + "/bad.csv"), DataError);
    }
    SECTION("pipeline config parsing") {
        {
            std::ofstream out(dir + "/run.cfg");
            out << "family_m = negbin-log\nnb_size = 20\nfamily_g = poisson-log\n"
                << "mode = accelerated\nthreshold = bayes\nrestarts = 9\ntol = 1e-8\n"
                << "max_iter = 60\n";
        }
        PipelineConfig cfg = PipelineConfig::from_config(KeyValueConfig::from_file(dir + "/run.cfg"));
        CHECK(cfg.family_m.kind == Family::Kind::negbin_log);
        CHECK(cfg.family_m.size == 20.0);
        CHECK(cfg.threshold == "bayes");
        CHECK(cfg.em.n_restarts == 9);
        CHECK(cfg.em.tol == 1e-8);
        CHECK(cfg.em.max_iter == 60);
    }
}

TEST_CASE("precompute store") {
    std::string dir = temp_dir("store");
    Fixture fx = make_fixture(5000, 10, 5, 42, std::log(0.25));
    PipelineConfig cfg;
    PrecomputeStore store(dir + "/store");

    SECTION("one entry per feature, each with a full-length fitted vector") {
        PrecomputeSummary s = precompute_all(fx.genes, fx.grnas, fx.design, fx.offset_m,
                                             fx.offset_g, cfg, store);
        CHECK(s.fits_executed == 11 + 6);  // every gene and gRNA feature once
        VectorXd coef, fhat;
        store.read("gene", "gene0", coef, fhat);
        CHECK(coef.size() == 2);
        CHECK(fhat.size() == 5000);
    }
    SECTION("idempotent reruns execute zero fits; --force recomputes") {
        precompute_all(fx.genes, fx.grnas, fx.design, fx.offset_m, fx.offset_g, cfg, store);
        PrecomputeSummary again = precompute_all(fx.genes, fx.grnas, fx.design, fx.offset_m,
                                                 fx.offset_g, cfg, store);
        CHECK(again.fits_executed == 0);
        CHECK(again.entries_skipped == 17);
        PrecomputeSummary forced = precompute_all(fx.genes, fx.grnas, fx.design, fx.offset_m,
                                                  fx.offset_g, cfg, store, true);
        CHECK(forced.fits_executed == 17);
    }
    SECTION("entries round-trip bit-exactly") {
        precompute_all(fx.genes, fx.grnas, fx.design, fx.offset_m, fx.offset_g, cfg, store);
        VectorXd ones = VectorXd::Ones(fx.design.n());
        GlmFit direct = fit_weighted_glm(fx.design, fx.genes.values.col(0), ones, fx.offset_m,
                                         cfg.family_m);
        VectorXd coef, fhat;
        store.read("gene", "gene0", coef, fhat);
        CHECK(coef == direct.coefficients);          // bitwise
        CHECK(fhat == direct.fitted_linear);         // bitwise
    }
    SECTION("misaligned inputs are rejected before any fitting") {
        DesignMatrix bad = fx.design;
        bad.X.conservativeResize(100, 2);
        PrecomputeStore s2(dir + "/store2");
        CHECK_THROWS_AS(precompute_all(fx.genes, fx.grnas, bad, fx.offset_m, fx.offset_g,
                                       cfg, s2),
                        DataError);
    }
    SECTION("a store built for different inputs refuses to open") {
        precompute_all(fx.genes, fx.grnas, fx.design, fx.offset_m, fx.offset_g, cfg, store);
        VectorXd shifted = fx.offset_m.array() + 0.1;
        PrecomputeStore reopened(dir + "/store");
        CHECK_THROWS_AS(precompute_all(fx.genes, fx.grnas, fx.design, shifted, fx.offset_g,
                                       cfg, reopened),
                        DataError);
    }
}

TEST_CASE("pair analysis") {
    std::string dir = temp_dir("pairs");
    Fixture fx = make_fixture(4000, 4, 2, 77, std::log(0.25));
    PipelineConfig cfg;
    cfg.seed = 11;
    PrecomputeStore store(dir + "/store");
    precompute_all(fx.genes, fx.grnas, fx.design, fx.offset_m, fx.offset_g, cfg, store);

    SECTION("a pair reproduces the direct fit bit-for-bit") {
        std::vector<PairSpec> pairs{{"gene0", "grna0", "positive-control"}};
        AnalyzeResult res = analyze_pairs(pairs, fx.genes, fx.grnas, fx.design, fx.offset_m,
                                          fx.offset_g, store, cfg);
        REQUIRE(res.rows.size() == 1);
        REQUIRE_FALSE(res.rows[0].errored);

        Dataset data;
        data.m = fx.genes.values.col(0);
        data.g = fx.grnas.values.col(0);
        data.design = fx.design;
        data.offset_m = fx.offset_m;
        data.offset_g = fx.offset_g;
        EmConfig em = cfg.em;
        em.seed = mix_key(cfg.seed, 0, 0xfa17);  // pair index 0
        GlmEivFit direct = fit_glmeiv(data, {cfg.family_m, cfg.family_g}, em);
        CHECK(res.rows[0].estimate == direct.params.beta_m[1]);  // bitwise
    }
    SECTION("missing store keys yield an error row, not an aborted batch") {
        std::vector<PairSpec> pairs{{"gene0", "grna0", ""}, {"gene0", "missing", ""}};
        AnalyzeResult res = analyze_pairs(pairs, fx.genes, fx.grnas, fx.design, fx.offset_m,
                                          fx.offset_g, store, cfg);
        REQUIRE(res.rows.size() == 2);
        CHECK_FALSE(res.rows[0].errored);
        CHECK(res.rows[1].errored);
        CHECK(res.n_errored == 1);
    }
    SECTION("worker counts 1 and 8 give identical tables modulo timing") {
        std::vector<PairSpec> pairs;
        for (int j = 0; j < 4; ++j)
            for (int r = 0; r < 2; ++r)
                pairs.push_back({"gene" + std::to_string(j), "grna" + std::to_string(r), ""});
        PipelineConfig c1 = cfg;
        c1.workers = 1;
        PipelineConfig c8 = cfg;
        c8.workers = 8;
        AnalyzeResult a = analyze_pairs(pairs, fx.genes, fx.grnas, fx.design, fx.offset_m,
                                        fx.offset_g, store, c1);
        AnalyzeResult b = analyze_pairs(pairs, fx.genes, fx.grnas, fx.design, fx.offset_m,
                                        fx.offset_g, store, c8);
        CHECK(strip_timing(results_to_string(a.rows)) ==
              strip_timing(results_to_string(b.rows)));
    }
    SECTION("thresholding rows appear when a threshold is configured") {
        for (const char* mode : {"dataset-wide", "bayes", "20"}) {
            PipelineConfig ct = cfg;
            ct.threshold = mode;
            std::vector<PairSpec> pairs{{"gene0", "grna0", ""}, {"gene1", "grna1", ""}};
            AnalyzeResult res = analyze_pairs(pairs, fx.genes, fx.grnas, fx.design,
                                              fx.offset_m, fx.offset_g, store, ct);
            REQUIRE(res.rows.size() == 4);
            INFO("threshold mode " << mode);
            CHECK(res.rows[1].method == "thresholding");
            CHECK(res.rows[1].converged);
            CHECK(res.n_errored == 0);
        }
    }
}

TEST_CASE("zero-inflated pipeline mode") {
    // gRNA features emit zero counts in unperturbed cells.
    std::string dir = temp_dir("zi_mode");
    const Eigen::Index n = 3000;
    Fixture fx = make_fixture(n, 2, 1, 99, std::log(0.25));
    for (Eigen::Index i = 0; i < n; ++i) {
        if (fx.latent[0][i] == 0) fx.grnas.values(i, 0) = 0.0;
        else fx.grnas.values(i, 0) = std::max(1.0, fx.grnas.values(i, 0));
    }
    fx.offset_g = depth_offsets(fx.grnas.values);

    PipelineConfig cfg;
    cfg.mode = "zero_inflated";
    PrecomputeStore store(dir + "/store");
    precompute_all(fx.genes, fx.grnas, fx.design, fx.offset_m, fx.offset_g, cfg, store);
    std::vector<PairSpec> pairs{{"gene0", "grna0", "positive-control"}};
    AnalyzeResult res = analyze_pairs(pairs, fx.genes, fx.grnas, fx.design, fx.offset_m,
                                      fx.offset_g, store, cfg);
    REQUIRE(res.rows.size() == 1);
    INFO(res.rows[0].flags);
    CHECK_FALSE(res.rows[0].errored);
    CHECK(res.rows[0].method == "glmeiv-zero-inflated");
    CHECK(res.rows[0].converged);
    // gene0 responds to grna0 with log fold change log(0.25)
    CHECK(res.rows[0].estimate == Catch::Approx(std::log(0.25)).margin(0.2));
}

#ifdef GLMEIV_KIT_PATH
TEST_CASE("the CLI drives the whole pipeline end to end") {
    std::string dir = temp_dir("cli");
    Fixture fx = make_fixture(2500, 3, 2, 2024, std::log(0.25));

    // Inputs on disk: gene matrix as MatrixMarket, gRNAs as dense CSV,
    // covariates, pairs, and a config file.
    write_matrix_market(dir + "/genes.mtx", fx.genes.values);
    {
        std::ofstream out(dir + "/grnas.csv");
        for (std::size_t j = 0; j < fx.grnas.feature_ids.size(); ++j)
            out << (j ? "," : "") << fx.grnas.feature_ids[j];
        out << '\n';
        for (Eigen::Index i = 0; i < fx.grnas.values.rows(); ++i) {
            for (Eigen::Index j = 0; j < fx.grnas.values.cols(); ++j)
                out << (j ? "," : "") << fx.grnas.values(i, j);
            out << '\n';
        }
    }
    {
        std::ofstream out(dir + "/cov.csv");
        out << "batch\n";
        for (Eigen::Index i = 0; i < fx.design.n(); ++i) out << fx.design.X(i, 1) << '\n';
    }
    {
        std::ofstream out(dir + "/pairs.csv");
        out << "gene_id,grna_id,label\n";
        // genes.mtx features are addressed by 1-based column number
        out << "1,grna0,cis\n2,grna1,cis\n3,grna0,negative-control\n";
    }
    {
        std::ofstream out(dir + "/run.cfg");
        out << "family_m = poisson-log\nfamily_g = poisson-log\nmode = accelerated\n";
    }

    auto run = [&](const std::string& args) {
        std::string cmd = std::string(GLMEIV_KIT_PATH) + " " + args + " 2>" + dir + "/err.log";
        return std::system(cmd.c_str());
    };

    SECTION("pipeline runs and is byte-deterministic across worker counts") {
        int rc1 = run("pipeline --genes " + dir + "/genes.mtx --grnas " + dir +
                      "/grnas.csv --covariates " + dir + "/cov.csv --pairs " + dir +
                      "/pairs.csv --config " + dir + "/run.cfg --out " + dir +
                      "/r1.csv --store " + dir + "/store1 --workers 1 --seed 9");
        int rc2 = run("pipeline --genes " + dir + "/genes.mtx --grnas " + dir +
                      "/grnas.csv --covariates " + dir + "/cov.csv --pairs " + dir +
                      "/pairs.csv --config " + dir + "/run.cfg --out " + dir +
                      "/r8.csv --store " + dir + "/store8 --workers 8 --seed 9");
        REQUIRE(rc1 == 0);
        REQUIRE(rc2 == 0);
        auto slurp_stripped = [](const std::string& p) {
            std::ifstream in(p);
            std::string line, out;
            while (std::getline(in, line)) out += line.substr(0, line.rfind(',')) + '\n';
            return out;
        };
        CHECK(slurp_stripped(dir + "/r1.csv") == slurp_stripped(dir + "/r8.csv"));
        std::ifstream head(dir + "/r1.csv");
        std::string header;
        std::getline(head, header);
        CHECK(header == pair_result_header());
    }
    SECTION("fit-pair and assign subcommands run") {
        CHECK(run("fit-pair --genes " + dir + "/genes.mtx --grnas " + dir +
                  "/grnas.csv --covariates " + dir + "/cov.csv --gene-id 1 --grna-id "
                  "grna0 --config " + dir + "/run.cfg > " + dir + "/fit.txt") == 0);
        CHECK(run("assign --grnas " + dir + "/grnas.csv --covariates " + dir +
                  "/cov.csv --grna-id grna0 --out " + dir + "/assign.csv") == 0);
        std::ifstream in(dir + "/assign.csv");
        std::string header;
        std::getline(in, header);
        CHECK(header == "cell,grna_id,assignment,posterior,converged,identified");
    }
    SECTION("a missing pair id yields exit code 2 and an error row") {
        {
            std::ofstream out(dir + "/bad_pairs.csv");
            out << "gene_id,grna_id\n1,grna0\n1,not_a_grna\n";
        }
        int rc = run("pipeline --genes " + dir + "/genes.mtx --grnas " + dir +
                     "/grnas.csv --covariates " + dir + "/cov.csv --pairs " + dir +
                     "/bad_pairs.csv --config " + dir + "/run.cfg --out " + dir +
                     "/rbad.csv --store " + dir + "/storebad --workers 1 --seed 9");
        CHECK(WEXITSTATUS(rc) == 2);
    }
}
#endif

TEST_CASE("negative-control pairs are calibrated") {
    // 100 null pairs: the gene never responds to the paired gRNA, so the
    // ground-truth fold change is 1. Estimates center on 1 and the CIs cover
    // it at roughly the nominal rate.
    std::string dir = temp_dir("nc");
    const int n_grnas = 10;
    Fixture fx = make_fixture(3000, 10, n_grnas, 123, std::log(0.25));
    PipelineConfig cfg;
    cfg.seed = 31;
    PrecomputeStore store(dir + "/store");
    precompute_all(fx.genes, fx.grnas, fx.design, fx.offset_m, fx.offset_g, cfg, store);

    std::vector<PairSpec> pairs;
    for (int j = 0; j < 10; ++j)
        for (int r = 0; r < n_grnas; ++r) {
            if (r == j % n_grnas) continue;  // skip the true pair
            pairs.push_back({"gene" + std::to_string(j), "grna" + std::to_string(r),
                             "negative-control"});
            if (pairs.size() == 100) break;
        }
    REQUIRE(pairs.size() >= 90);
    AnalyzeResult res = analyze_pairs(pairs, fx.genes, fx.grnas, fx.design, fx.offset_m,
                                      fx.offset_g, store, cfg);
    int covered = 0, converged = 0;
    double fold_sum = 0.0;
    for (const auto& r : res.rows) {
        if (r.errored || !r.converged) continue;
        ++converged;
        fold_sum += r.fold_change;
        if (r.ci_lo <= 0.0 && 0.0 <= r.ci_hi) ++covered;
    }
    REQUIRE(converged >= 80);
    double coverage = static_cast<double>(covered) / converged;
    double mean_fold = fold_sum / converged;
    INFO("coverage " << coverage << " mean fold change " << mean_fold);
    CHECK(coverage >= 0.88);
    CHECK(mean_fold == Catch::Approx(1.0).margin(0.05));
}
