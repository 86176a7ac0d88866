#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "glmeiv/simulate.hpp"

using namespace glmeiv;

TEST_CASE("dataset generation") {
    SECTION("main-text defaults match the parameter table") {
        SimScenario sc = SimScenario::main_text(2.5);
        CHECK(std::exp(sc.beta_m[0]) == Catch::Approx(0.01));
        CHECK(std::exp(sc.beta_m[1]) == Catch::Approx(0.25));
        CHECK(std::exp(sc.beta_m[2]) == Catch::Approx(0.9));
        CHECK(std::exp(sc.beta_g[0]) == Catch::Approx(5.0e-3));
        CHECK(std::exp(sc.beta_g[2]) == Catch::Approx(1.1));
        CHECK(sc.pi == 0.02);
    }
    SECTION("deterministic: same (seed, replicate) gives bit-identical data") {
        SimScenario sc = SimScenario::main_text(2.0);
        sc.n = 500;
        Dataset a = generate_dataset(sc, 3);
        Dataset b = generate_dataset(sc, 3);
        CHECK(a.m == b.m);
        CHECK(a.g == b.g);
        CHECK(a.offset_m == b.offset_m);
        CHECK(a.latent_p == b.latent_p);
        Dataset c = generate_dataset(sc, 4);
        CHECK(a.m != c.m);
    }
    SECTION("no perturbed cells under pi ~ 0") {
        SimScenario sc = SimScenario::main_text(2.0);
        sc.n = 2000;
        sc.pi = 1e-12;
        Dataset ds = generate_dataset(sc, 0);
        CHECK(ds.latent_p.sum() == 0);
    }
    SECTION("group means differ by exp(beta_1^g) at large n") {
        SimScenario sc = SimScenario::main_text(3.0);
        sc.n = 100000;
        sc.pi = 0.1;
        Dataset ds = generate_dataset(sc, 1);
        // Compare depth-normalized gRNA means across the latent groups.
        double s1 = 0, s0 = 0;
        long n1 = 0, n0 = 0;
        for (Eigen::Index i = 0; i < ds.n(); ++i) {
            double rate = ds.g[i] / std::exp(ds.offset_g[i]);
            if (ds.latent_p[i]) {
                s1 += rate;
                ++n1;
            } else {
                s0 += rate;
                ++n0;
            }
        }
        double ratio = (s1 / n1) / (s0 / n0);
        CHECK(ratio == Catch::Approx(3.0).epsilon(0.05));
    }
    SECTION("overflowing linear components are rejected") {
        SimScenario sc = SimScenario::main_text(2.0);
        sc.n = 10;
        sc.beta_m[0] = 800.0;
        CHECK_THROWS_AS(generate_dataset(sc, 0), DataError);
    }
}

TEST_CASE("misspecification injection") {
    SECTION("identity when no knob is set") {
        SimScenario sc = SimScenario::main_text(2.0);
        sc.n = 300;
        Dataset ds = generate_dataset(sc, 0);
        Dataset out = inject_misspecification(ds, sc, 0);
        CHECK(out.m == ds.m);
        CHECK(out.g == ds.g);
    }
    SECTION("doublets double exactly round(frac*n) gRNA counts") {
        SimScenario sc = SimScenario::main_text(2.0);
        sc.n = 1000;
        sc.doublet_fraction = 0.01;
        sc.doublet_modality = SimScenario::Modality::grna;
        Dataset ds = generate_dataset(sc, 0);
        Dataset out = inject_misspecification(ds, sc, 0);
        long changed = 0;
        for (Eigen::Index i = 0; i < ds.n(); ++i) {
            if (out.g[i] != ds.g[i]) {
                CHECK(out.g[i] == 2.0 * ds.g[i]);
                ++changed;
            }
        }
        // 10 cells are selected; those with a zero count double to zero.
        long zero_selected = 0;
        for (Eigen::Index i = 0; i < ds.n(); ++i)
            if (out.g[i] == ds.g[i] && ds.g[i] == 0.0) ++zero_selected;
        CHECK(changed <= 10);
        CHECK(out.m == ds.m);
    }
    SECTION("hidden covariate changes counts but not the emitted design") {
        SimScenario sc = SimScenario::main_text(2.0);
        sc.n = 500;
        sc.hidden_covariate = true;
        sc.hidden_coef_m = 0.8;
        sc.hidden_coef_g = 0.8;
        Dataset ds = generate_dataset(sc, 0);
        Dataset out = inject_misspecification(ds, sc, 0);
        CHECK(out.design.X == ds.design.X);  // withheld from the design
        CHECK(out.m != ds.m);                // counts regenerated
        CHECK(out.design.X.cols() == 2);
    }
}

TEST_CASE("excess background contamination") {
    SimScenario sc = SimScenario::main_text(4.0);
    sc.n = 20000;
    sc.pi = 0.05;
    Dataset ds = generate_dataset(sc, 0);

    SECTION("epsilon outside [0,1] is rejected") {
        Rng rng(1, 0, 0);
        CHECK_THROWS_AS(
            inject_excess_contamination(sc.beta_g, Family::poisson(), -0.1, ds, rng),
            std::domain_error);
        CHECK_THROWS_AS(
            inject_excess_contamination(sc.beta_g, Family::poisson(), 1.5, ds, rng),
            std::domain_error);
    }
    SECTION("epsilon = 0 reproduces the model distribution (two-sample KS)") {
        Rng rng(2, 0, 0);
        VectorXd g0 = inject_excess_contamination(sc.beta_g, Family::poisson(), 0.0, ds, rng);
        // Depth-normalized group-mean agreement.
        double a1 = 0, a0 = 0, b1 = 0, b0 = 0;
        long n1 = 0, n0 = 0;
        for (Eigen::Index i = 0; i < ds.n(); ++i) {
            double ra = ds.g[i] / std::exp(ds.offset_g[i]);
            double rb = g0[i] / std::exp(ds.offset_g[i]);
            if (ds.latent_p[i]) {
                a1 += ra;
                b1 += rb;
                ++n1;
            } else {
                a0 += ra;
                b0 += rb;
                ++n0;
            }
        }
        CHECK(b1 / n1 == Catch::Approx(a1 / n1).epsilon(0.05));
        CHECK(b0 / n0 == Catch::Approx(a0 / n0).epsilon(0.05));

        // Two-sample Kolmogorov-Smirnov between the original counts and the
        // eps = 0 resample (identical per-cell laws; the asymptotic p-value
        // is conservative for discrete ties).
        std::vector<double> a(ds.g.data(), ds.g.data() + ds.n());
        std::vector<double> b(g0.data(), g0.data() + g0.size());
        std::sort(a.begin(), a.end());
        std::sort(b.begin(), b.end());
        double d_stat = 0.0;
        std::size_t ia = 0, ib = 0;
        while (ia < a.size() && ib < b.size()) {
            double x = std::min(a[ia], b[ib]);
            while (ia < a.size() && a[ia] <= x) ++ia;
            while (ib < b.size() && b[ib] <= x) ++ib;
            d_stat = std::max(d_stat, std::abs(static_cast<double>(ia) / a.size() -
                                               static_cast<double>(ib) / b.size()));
        }
        double ne = static_cast<double>(a.size()) * b.size() / (a.size() + b.size());
        double lambda = d_stat * std::sqrt(ne);
        double p = 0.0;
        for (int k = 1; k <= 100; ++k)
            p += 2.0 * ((k % 2) ? 1.0 : -1.0) * std::exp(-2.0 * k * k * lambda * lambda);
        INFO("KS D = " << d_stat << " p = " << p);
        CHECK(p > 0.01);
    }
    SECTION("epsilon = 1 equalizes the conditional means cellwise") {
        VectorXd beta = sc.beta_g;
        beta[0] += 1.0 * beta[1];
        beta[1] = 0.0;
        // Construction check: the contaminated parameters at eps = 1.
        VectorXd l0, l1;
        detail::modality_linear(beta, ds.design, ds.offset_g, l0, l1);
        CHECK((l0 - l1).cwiseAbs().maxCoeff() == 0.0);
    }
    SECTION("requires fixed latent memberships") {
        Dataset no_truth = ds;
        no_truth.latent_p.resize(0);
        Rng rng(3, 0, 0);
        CHECK_THROWS_AS(
            inject_excess_contamination(sc.beta_g, Family::poisson(), 0.2, no_truth, rng),
            DataError);
    }
}

TEST_CASE("classification metrics") {
    VectorXi truth(6), same(6), opposite(6);
    truth << 1, 0, 0, 1, 0, 0;
    same = truth;
    for (int i = 0; i < 6; ++i) opposite[i] = 1 - truth[i];
    SECTION("perfect agreement") {
        ClassificationMetrics cm = classification_metrics(same, truth);
        CHECK(cm.sensitivity == 1.0);
        CHECK(cm.specificity == 1.0);
        CHECK(cm.balanced_accuracy == 1.0);
    }
    SECTION("perfect disagreement") {
        ClassificationMetrics cm = classification_metrics(opposite, truth);
        CHECK(cm.sensitivity == 0.0);
        CHECK(cm.specificity == 0.0);
    }
    SECTION("single-class truth is undefined") {
        VectorXi ones = VectorXi::Ones(6);
        CHECK_THROWS_AS(classification_metrics(same, ones), DataError);
    }
    SECTION("low-MOI-shaped confusion arithmetic") {
        // 137 true positives all recovered, 4 extra assignments, n = 5000.
        const int n = 5000;
        VectorXi truth_big = VectorXi::Zero(n), assigned = VectorXi::Zero(n);
        for (int i = 0; i < 137; ++i) truth_big[i] = assigned[i] = 1;
        for (int i = 137; i < 141; ++i) assigned[i] = 1;
        ClassificationMetrics cm = classification_metrics(assigned, truth_big);
        CHECK(cm.sensitivity == 1.0);
        CHECK(cm.specificity == Catch::Approx(1.0 - 4.0 / (n - 137)));
        CHECK(cm.balanced_accuracy == Catch::Approx(0.5 * (1.0 + 1.0 - 4.0 / (n - 137))));
    }
}

TEST_CASE("method evaluation harness") {
    SECTION("coverage estimator is calibrated on an exact-Wald Gaussian toy") {
        // Known-truth toy where the Wald interval is exact: mean of n
        // standard normals. Coverage over replicates must sit inside the
        // 95% binomial band around 0.95.
        const int R = 2000, n = 10000;
        const double mult = norm_quantile(0.975);
        int covered = 0;
        for (int r = 0; r < R; ++r) {
            Rng rng(424242, static_cast<std::uint64_t>(r), 0);
            double sum = 0;
            for (int i = 0; i < n; ++i) sum += rng.normal();
            double mean = sum / n, se = 1.0 / std::sqrt(n);
            if (std::abs(mean) <= mult * se) ++covered;
        }
        double cov = static_cast<double>(covered) / R;
        double band = 3.0 * std::sqrt(0.95 * 0.05 / R);
        CHECK(std::abs(cov - 0.95) < band);
    }
    SECTION("small end-to-end run produces sane aggregates") {
        SimScenario sc = SimScenario::main_text(4.0);
        sc.n = 4000;
        sc.n_sim = 8;
        sc.seed = 5;
        EvalConfig cfg;
        cfg.workers = 2;
        auto rows = evaluate_methods(
            sc, {Method::glmeiv_accelerated, Method::thresholding}, cfg);
        REQUIRE(rows.size() == 2);
        for (const auto& r : rows) {
            INFO(r.method);
            CHECK(r.n_converged >= 6);
            CHECK(r.coverage >= 0.0);
            CHECK(r.coverage <= 1.0);
            CHECK(r.mse >= r.bias * r.bias - 1e-12);
        }
        // GLM-EIV estimates the strong negative effect with small bias.
        CHECK(std::abs(rows[0].bias) < 0.1);
        CHECK(rows[0].rejection_probability == 1.0);
    }
    SECTION("null scenario rejects at roughly the nominal 5% level") {
        SimScenario sc = SimScenario::main_text(2.5);
        sc.beta_m[1] = 0.0;  // no perturbation effect on expression
        sc.n = 4000;
        sc.n_sim = 200;
        sc.seed = 44;
        EvalConfig cfg;
        cfg.workers = 2;
        auto rows = evaluate_methods(
            sc, {Method::glmeiv_accelerated, Method::thresholding, Method::mixture_assign_glm},
            cfg);
        for (const auto& r : rows) {
            if (r.n_converged < 150) continue;  // mixture fits may flag some nulls
            double band = 3.0 * std::sqrt(0.05 * 0.95 / r.n_converged);
            INFO(r.method << " rejection " << r.rejection_probability << " over "
                          << r.n_converged);
            CHECK(std::abs(r.rejection_probability - 0.05) < band + 0.01);
        }
        CHECK(rows[0].n_converged >= 150);
    }
    SECTION("worker counts do not change the aggregates") {
        SimScenario sc = SimScenario::main_text(3.0);
        sc.n = 2000;
        sc.n_sim = 6;
        sc.seed = 6;
        EvalConfig one;
        one.workers = 1;
        EvalConfig two;
        two.workers = 2;
        auto a = evaluate_methods(sc, {Method::glmeiv_accelerated}, one);
        auto b = evaluate_methods(sc, {Method::glmeiv_accelerated}, two);
        CHECK(a[0].bias == b[0].bias);
        CHECK(a[0].mse == b[0].mse);
        CHECK(a[0].coverage == b[0].coverage);
    }
}

TEST_CASE("scenario config parsing") {
    std::string path = "/tmp/glmeiv_test_scenario.cfg";
    {
        std::ofstream out(path);
        out << "n = 1234\npi = 0.03\nfamily_m = negbin-log\nnb_size = 20\n"
            << "beta_g = -5.3,1.2,0.1\nn_sim = 7\nseed = 99\n"
            << "doublet_fraction = 0.01\ndoublet_modality = grna\n";
    }
    SimScenario sc = scenario_from_config(KeyValueConfig::from_file(path));
    CHECK(sc.n == 1234);
    CHECK(sc.pi == 0.03);
    CHECK(sc.family_m.kind == Family::Kind::negbin_log);
    CHECK(sc.family_m.size == 20.0);
    CHECK(sc.beta_g[1] == Catch::Approx(1.2));
    CHECK(sc.n_sim == 7);
    CHECK(sc.seed == 99);
    CHECK(sc.doublet_modality == SimScenario::Modality::grna);
}
