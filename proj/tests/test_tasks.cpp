#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include "npstream/tasks.hpp"
#include "oracles.hpp"

using namespace npstream;

namespace {
const KernelFamily kFamilies[] = {KernelFamily::rbf, KernelFamily::matern12, KernelFamily::matern32,
                                  KernelFamily::matern52, KernelFamily::periodic};

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape) return false;
    for (std::size_t i = 0; i < a.data.size(); ++i)
        if (a.data[i] != b.data[i]) return false;
    return true;
}
}  // namespace

TEST_CASE("kernel closed forms at frozen points") {
    KernelSpec k;
    k.lengthscale = 1.0;

    k.family = KernelFamily::rbf;
    CHECK(kernel_eval(k, 0.0, 1.0) == doctest::Approx(std::exp(-0.5)).epsilon(1e-12));
    CHECK(kernel_eval(k, 0.3, 1.3) == doctest::Approx(0.6065306597126334).epsilon(1e-12));

    k.family = KernelFamily::matern12;
    CHECK(kernel_eval(k, 0.0, 1.0) == doctest::Approx(std::exp(-1.0)).epsilon(1e-12));

    k.family = KernelFamily::matern32;
    CHECK(kernel_eval(k, 0.0, 1.0) ==
          doctest::Approx((1.0 + std::sqrt(3.0)) * std::exp(-std::sqrt(3.0))).epsilon(1e-12));

    k.family = KernelFamily::matern52;
    CHECK(kernel_eval(k, 0.0, 1.0) ==
          doctest::Approx((1.0 + std::sqrt(5.0) + 5.0 / 3.0) * std::exp(-std::sqrt(5.0))).epsilon(1e-12));

    k.family = KernelFamily::periodic;
    k.period = 2.0;
    CHECK(kernel_eval(k, 0.0, 1.0) == doctest::Approx(std::exp(-2.0)).epsilon(1e-12));
    // A full period away correlates perfectly again.
    CHECK(kernel_eval(k, 0.0, 2.0) == doctest::Approx(1.0).epsilon(1e-12));

    SUBCASE("k(x, x) = 1 and symmetry for every family") {
        Rng rng(3);
        for (KernelFamily f : kFamilies) {
            KernelSpec spec = sample_kernel(f, rng);
            for (int i = 0; i < 20; ++i) {
                const double a = rng.uniform(-2.0, 2.0), b = rng.uniform(-2.0, 2.0);
                CHECK(kernel_eval(spec, a, a) == doctest::Approx(1.0).epsilon(1e-12));
                CHECK(kernel_eval(spec, a, b) == doctest::Approx(kernel_eval(spec, b, a)).epsilon(1e-14));
            }
        }
    }
    SUBCASE("validation") {
        KernelSpec bad;
        bad.lengthscale = 0.0;
        CHECK_THROWS_AS(bad.validate(), ValueError);
        bad.lengthscale = 1.0;
        bad.family = KernelFamily::periodic;
        bad.period = -1.0;
        CHECK_THROWS_AS(bad.validate(), ValueError);
        CHECK_THROWS_AS(kernel_family_from_string("linear"), ValueError);
        for (KernelFamily f : kFamilies) CHECK(kernel_family_from_string(kernel_family_name(f)) == f);
    }
}

TEST_CASE("lengthscales are log-uniform on [0.25, 1]") {
    Rng rng(5);
    std::vector<double> logs;
    for (int i = 0; i < 2000; ++i) {
        KernelSpec spec = sample_kernel(KernelFamily::rbf, rng);
        CHECK(spec.lengthscale >= 0.25);
        CHECK(spec.lengthscale <= 1.0);
        logs.push_back(std::log10(spec.lengthscale));
    }
    // KS statistic below the 1% critical value 1.63 / sqrt(n).
    const double d = oracle::ks_uniform(logs, std::log10(0.25), 0.0);
    CHECK(d < 1.63 / std::sqrt(2000.0));
}

TEST_CASE("mixed kernel draws families uniformly with fixed period") {
    Rng rng(7);
    std::map<KernelFamily, int> counts;
    const int n = 100000;
    for (int i = 0; i < n; ++i) {
        KernelSpec spec = sample_mixed_kernel(rng);
        counts[spec.family]++;
        if (spec.family == KernelFamily::periodic) CHECK(spec.period == 2.0);
    }
    for (KernelFamily f : kFamilies) {
        const double freq = static_cast<double>(counts[f]) / n;
        CHECK(freq == doctest::Approx(0.2).epsilon(0.05));  // 0.2 +- 0.01
    }
}

TEST_CASE("change-surface kernel blends between its two kernels") {
    ShiftSpec spec;
    spec.k1 = KernelSpec{KernelFamily::rbf, 0.5, 2.0};
    spec.k2 = KernelSpec{KernelFamily::matern32, 0.9, 2.0};
    spec.t0 = 20.0;
    spec.tau = 10.0;

    const double x = 0.3, xp = -0.7;
    const double k1 = kernel_eval(spec.k1, x, xp);
    const double k2 = kernel_eval(spec.k2, x, xp);

    SUBCASE("far before the shift it is the first kernel") {
        CHECK(change_surface_eval(spec, x, -500.0, xp, -500.0) == doctest::Approx(k1).epsilon(1e-10));
    }
    SUBCASE("far after the shift it is the second kernel") {
        CHECK(change_surface_eval(spec, x, 500.0, xp, 500.0) == doctest::Approx(k2).epsilon(1e-10));
    }
    SUBCASE("at the centre both kernels mix with weight one quarter") {
        CHECK(shift_weight(spec, spec.t0) == doctest::Approx(0.5).epsilon(1e-12));
        CHECK(change_surface_eval(spec, x, spec.t0, xp, spec.t0) ==
              doctest::Approx(0.25 * k1 + 0.25 * k2).epsilon(1e-12));
    }
    SUBCASE("zero temperature gives a near-step transition") {
        ShiftSpec sharp = spec;
        sharp.tau = 0.0;
        CHECK(shift_weight(sharp, spec.t0 - 1e-3) < 1e-6);
        CHECK(shift_weight(sharp, spec.t0 + 1e-3) > 1.0 - 1e-6);
    }
    SUBCASE("symmetry in the paired arguments") {
        CHECK(change_surface_eval(spec, x, 12.0, xp, 31.0) ==
              doctest::Approx(change_surface_eval(spec, xp, 31.0, x, 12.0)).epsilon(1e-14));
    }
}

TEST_CASE("cholesky factorisation") {
    SUBCASE("hand example") {
        std::vector<double> a = {4.0, 2.0, 2.0, 3.0};
        REQUIRE(try_cholesky(a, 2));
        CHECK(a[0] == doctest::Approx(2.0));
        CHECK(a[1] == 0.0);
        CHECK(a[2] == doctest::Approx(1.0));
        CHECK(a[3] == doctest::Approx(std::sqrt(2.0)));
    }
    SUBCASE("indefinite matrix is rejected") {
        std::vector<double> a = {1.0, 2.0, 2.0, 1.0};
        CHECK_FALSE(try_cholesky(a, 2));
    }
    SUBCASE("jitter rescues a singular gram matrix") {
        // Duplicate inputs make K exactly singular.
        KernelSpec k;
        const auto K = build_gram(k, {0.3, 0.3, 1.0});
        const auto L = cholesky_jittered(K, 3);
        // L L^T reconstructs K + jitter I.
        for (i64 i = 0; i < 3; ++i)
            for (i64 j = 0; j < 3; ++j) {
                double acc = 0.0;
                for (i64 t = 0; t < 3; ++t)
                    acc += L[static_cast<std::size_t>(i * 3 + t)] * L[static_cast<std::size_t>(j * 3 + t)];
                const double want = K[static_cast<std::size_t>(i * 3 + j)] + (i == j ? 1e-6 : 0.0);
                CHECK(acc == doctest::Approx(want).epsilon(1e-9));
            }
    }
    SUBCASE("escalation gives up after three attempts") {
        std::vector<double> K = {1.0, 2.0, 2.0, 1.0};  // eigenvalues 3 and -1, beyond any jitter used
        CHECK_THROWS_AS(cholesky_jittered(K, 2), NumericError);
    }
    SUBCASE("random gram matrices of every family admit a jittered factorisation") {
        Rng rng(11);
        for (KernelFamily f : kFamilies) {
            KernelSpec spec = sample_kernel(f, rng);
            std::vector<double> xs(64);
            for (auto& x : xs) x = rng.uniform(-2.0, 2.0);
            CHECK_NOTHROW(cholesky_jittered(build_gram(spec, xs), 64));
        }
    }
}

TEST_CASE("gp draws have the covariance the kernel promises") {
    Rng rng(13);
    KernelSpec spec;
    spec.family = KernelFamily::rbf;
    spec.lengthscale = 0.7;
    const double sigma = 0.1;
    const double k01 = kernel_eval(spec, 0.0, 0.5);

    const int n = 10000;
    std::vector<double> y0(n), y1(n);
    for (int i = 0; i < n; ++i) {
        const auto y = gp_draw(spec, {0.0, 0.5}, sigma, rng);
        y0[static_cast<std::size_t>(i)] = y[0];
        y1[static_cast<std::size_t>(i)] = y[1];
    }

    const double var0 = 1.0 + sigma * sigma;  // k(x,x) = 1 plus observation noise
    const double cov = oracle::covariance(y0, y1);
    const double se_cov = std::sqrt((var0 * var0 + k01 * k01) / n);
    CHECK(std::fabs(cov - k01) < 3.0 * se_cov);

    const double v = oracle::variance(y0);
    const double se_var = std::sqrt(2.0 / n) * var0;
    CHECK(std::fabs(v - var0) < 3.0 * se_var);

    SUBCASE("means are zero") {
        CHECK(std::fabs(oracle::mean(y0)) < 3.0 * std::sqrt(var0 / n));
    }
}

TEST_CASE("noise-free draws at duplicate inputs coincide") {
    Rng rng(17);
    KernelSpec spec = sample_kernel(KernelFamily::matern32, rng);
    for (int i = 0; i < 20; ++i) {
        const double x = rng.uniform(-2.0, 2.0);
        const auto y = gp_draw(spec, {x, x, rng.uniform(-2.0, 2.0)}, 0.0, rng);
        // Only jitter (1e-6 on the diagonal) separates the two copies.
        CHECK(std::fabs(y[0] - y[1]) < 1e-2);
    }
}

TEST_CASE("gp task batches follow the documented recipe") {
    GpTaskConfig cfg;
    cfg.batch = 4;
    cfg.n_ctx_max = 24;
    cfg.n_target = 16;

    SUBCASE("shapes and ranges") {
        Rng rng(19);
        for (int rep = 0; rep < 50; ++rep) {
            TaskBatch task = sample_gp_task(cfg, rng);
            task.validate(1, 1);
            CHECK(task.batch() == 4);
            CHECK(task.n_t() == 16);
            CHECK(task.n_c() >= 1);
            CHECK(task.n_c() <= 24);
            for (double v : task.xc.data) {
                CHECK(v >= -2.0);
                CHECK(v <= 2.0);
            }
        }
    }
    SUBCASE("context counts cover the whole range roughly uniformly") {
        Rng rng(23);
        const int reps = 3000;
        double sum = 0.0;
        i64 lo = 1 << 30, hi = 0;
        for (int rep = 0; rep < reps; ++rep) {
            TaskBatch task = sample_gp_task(cfg, rng);
            sum += static_cast<double>(task.n_c());
            lo = std::min(lo, task.n_c());
            hi = std::max(hi, task.n_c());
        }
        CHECK(lo == 1);
        CHECK(hi == 24);
        const double mean = sum / reps;
        const double want = (1.0 + 24.0) / 2.0;
        const double se = std::sqrt((24.0 * 24.0 - 1.0) / 12.0 / reps);
        CHECK(std::fabs(mean - want) < 3.0 * se);
    }
    SUBCASE("same seed reproduces byte-identical batches") {
        Rng a(29), b(29);
        TaskBatch ta = sample_gp_task(cfg, a);
        TaskBatch tb = sample_gp_task(cfg, b);
        CHECK(bitwise_equal(ta.xc, tb.xc));
        CHECK(bitwise_equal(ta.yc, tb.yc));
        CHECK(bitwise_equal(ta.xt, tb.xt));
        CHECK(bitwise_equal(ta.yt, tb.yt));
    }
    SUBCASE("validation") {
        GpTaskConfig bad = cfg;
        bad.n_ctx_min = 0;
        Rng rng(31);
        CHECK_THROWS_AS(sample_gp_task(bad, rng), ValueError);
        bad = cfg;
        bad.sigma_obs = -0.1;
        CHECK_THROWS_AS(sample_gp_task(bad, rng), ValueError);
    }
}

TEST_CASE("gp and shift streams arrive in generation order with matching shapes") {
    Rng rng(37);
    KernelSpec spec = sample_kernel(KernelFamily::rbf, rng);
    StreamTask s = sample_gp_stream(spec, 32, 0.1, rng);
    REQUIRE(s.x.shape == Shape{32, 1});
    REQUIRE(s.y.shape == Shape{32, 1});
    CHECK(s.size() == 32);

    ShiftStreamConfig cfg;
    cfg.n_points = 48;
    cfg.t0 = 24.0;
    cfg.tau = 4.0;
    StreamTask shift = sample_shift_stream(cfg, rng);
    REQUIRE(shift.x.shape == Shape{48, 1});
    CHECK(shift.size() == 48);

    SUBCASE("reproducible") {
        Rng a(41), b(41);
        StreamTask sa = sample_shift_stream(cfg, a);
        StreamTask sb = sample_shift_stream(cfg, b);
        CHECK(bitwise_equal(sa.x, sb.x));
        CHECK(bitwise_equal(sa.y, sb.y));
    }
    SUBCASE("validation") {
        ShiftStreamConfig bad = cfg;
        bad.n_points = 1;
        Rng rng2(43);
        CHECK_THROWS_AS(sample_shift_stream(bad, rng2), ValueError);
    }
}

TEST_CASE("tabular prior spec sampling respects the minima") {
    Rng rng(47);
    for (int i = 0; i < 2000; ++i) {
        TabularMlpSpec spec = sample_tabular_spec(rng);
        CHECK(spec.depth >= 2);
        CHECK(spec.width >= 4);
        CHECK(spec.activation >= 0);
        CHECK(spec.activation <= 4);
    }
}

TEST_CASE("tabular tasks are normalised, padded and reproducible") {
    TabularTaskConfig cfg;
    cfg.batch = 3;
    cfg.n_ctx_min = 20;
    cfg.n_ctx_max = 40;
    cfg.n_target = 24;

    Rng rng(53);
    TaskBatch task = sample_tabular_task(cfg, rng);
    task.validate(20, 1);
    CHECK(task.n_t() == 24);
    REQUIRE(task.n_c() >= 20);

    const i64 n_c = task.n_c(), n = n_c + 24;
    for (i64 b = 0; b < 3; ++b) {
        for (i64 c = 0; c < 20; ++c) {
            // Gather the column across context and target points.
            std::vector<double> col;
            for (i64 i = 0; i < n_c; ++i) col.push_back(task.xc.at(b, i, c));
            for (i64 i = 0; i < 24; ++i) col.push_back(task.xt.at(b, i, c));
            const bool all_zero = std::all_of(col.begin(), col.end(), [](double v) { return v == 0.0; });
            if (all_zero) continue;  // padded column
            CHECK(std::fabs(oracle::mean(col)) < 1e-10);
            double var = 0.0;
            const double m = oracle::mean(col);
            for (double v : col) var += (v - m) * (v - m);
            var /= static_cast<double>(n);
            CHECK(var == doctest::Approx(1.0).epsilon(1e-6));
        }
        // Targets must carry signal.
        std::vector<double> ys;
        for (i64 i = 0; i < n_c; ++i) ys.push_back(task.yc.at(b, i, 0));
        for (i64 i = 0; i < 24; ++i) ys.push_back(task.yt.at(b, i, 0));
        CHECK(oracle::variance(ys) > 1e-10);
    }

    SUBCASE("byte-identical under the same seed") {
        Rng a(59), b(59);
        TaskBatch ta = sample_tabular_task(cfg, a);
        TaskBatch tb = sample_tabular_task(cfg, b);
        CHECK(bitwise_equal(ta.xc, tb.xc));
        CHECK(bitwise_equal(ta.yc, tb.yc));
        CHECK(bitwise_equal(ta.xt, tb.xt));
        CHECK(bitwise_equal(ta.yt, tb.yt));
    }
    SUBCASE("some padding actually occurs across repeated draws") {
        Rng rng2(61);
        bool saw_padding = false;
        for (int rep = 0; rep < 10 && !saw_padding; ++rep) {
            TaskBatch t = sample_tabular_task(cfg, rng2);
            for (i64 b = 0; b < 3 && !saw_padding; ++b) {
                // The last column is padded whenever fewer than 20 features are active.
                bool all_zero = true;
                for (i64 i = 0; i < t.n_c(); ++i) all_zero = all_zero && t.xc.at(b, i, 19) == 0.0;
                saw_padding = saw_padding || all_zero;
            }
        }
        CHECK(saw_padding);
    }
}

TEST_CASE("fourier encoding") {
    SUBCASE("frozen wavelengths at D=4") {
        // Log spacing with divisor D/2 - 1 puts the two wavelengths at the ends.
        const auto enc = fourier_encode(1.0, 1.0, 4.0, 4);
        REQUIRE(enc.size() == 4);
        CHECK(enc[0] == doctest::Approx(1.0).epsilon(1e-12));        // cos(2 pi / 1)
        CHECK(std::fabs(enc[1]) < 1e-12);                            // sin(2 pi / 1)
        CHECK(std::fabs(enc[2]) < 1e-12);                            // cos(pi / 2)
        CHECK(enc[3] == doctest::Approx(1.0).epsilon(1e-12));        // sin(pi / 2)
    }
    SUBCASE("zero input gives exact cos 1, sin 0") {
        const auto enc = fourier_encode(0.0, 0.5, 8.0, 6);
        for (std::size_t i = 0; i < enc.size(); i += 2) {
            CHECK(enc[i] == 1.0);
            CHECK(enc[i + 1] == 0.0);
        }
    }
    SUBCASE("a full cycle returns to (1, 0)") {
        const auto enc = fourier_encode(2.5, 2.5, 10.0, 8);
        CHECK(enc[0] == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(std::fabs(enc[1]) < 1e-12);
    }
    SUBCASE("two dims collapse to the minimum wavelength") {
        const auto enc = fourier_encode(0.25, 0.25, 64.0, 2);
        REQUIRE(enc.size() == 2);
        CHECK(enc[0] == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(std::fabs(enc[1]) < 1e-12);
    }
    SUBCASE("validation") {
        CHECK_THROWS_AS(fourier_encode(0.0, 1.0, 4.0, 3), ValueError);
        CHECK_THROWS_AS(fourier_encode(0.0, 1.0, 4.0, 0), ValueError);
        CHECK_THROWS_AS(fourier_encode(0.0, 4.0, 1.0, 4), ValueError);
        CHECK_THROWS_AS(fourier_encode(0.0, 0.0, 1.0, 4), ValueError);
    }
    SUBCASE("matrix form expands every column") {
        Rng rng(67);
        Tensor X = randn<double>({5, 3}, rng);
        Tensor enc = fourier_encode_matrix(X, 0.5, 4.0, 6);
        REQUIRE(enc.shape == Shape{5, 18});
        const auto one = fourier_encode(X.at(2, 1), 0.5, 4.0, 6);
        for (i64 k = 0; k < 6; ++k) CHECK(enc.at(2, 6 + k) == one[static_cast<std::size_t>(k)]);
    }
}

TEST_CASE("online normalizer") {
    SUBCASE("constant stream normalises to zero") {
        OnlineNormalizer norm(2);
        const std::vector<double> x = {3.5, -1.25};
        for (int i = 0; i < 10; ++i) norm.update(x);
        const auto z = norm.normalize(x);
        CHECK(z[0] == 0.0);
        CHECK(z[1] == 0.0);
    }
    SUBCASE("statistics match a two-pass batch computation") {
        Rng rng(71);
        OnlineNormalizer norm(3);
        std::vector<std::vector<double>> cols(3);
        for (int i = 0; i < 137; ++i) {
            std::vector<double> x = {rng.normal() * 4.0 + 1.0, rng.uniform(-9.0, 3.0), rng.normal()};
            norm.update(x);
            for (int j = 0; j < 3; ++j) cols[static_cast<std::size_t>(j)].push_back(x[static_cast<std::size_t>(j)]);
        }
        for (i64 j = 0; j < 3; ++j) {
            const auto& c = cols[static_cast<std::size_t>(j)];
            const double m = oracle::mean(c);
            double v = 0.0;
            for (double val : c) v += (val - m) * (val - m);
            v /= static_cast<double>(c.size());
            CHECK(std::fabs(norm.mean(j) - m) < 1e-10);
            CHECK(std::fabs(norm.variance(j) - v) < 1e-10);
        }
    }
    SUBCASE("outliers clip to the bound") {
        OnlineNormalizer norm(1);
        Rng rng(73);
        for (int i = 0; i < 200; ++i) norm.update({rng.normal()});
        const double big = norm.mean(0) + 10.0 * std::sqrt(norm.variance(0));
        CHECK(norm.normalize({big})[0] == 5.0);
        CHECK(norm.normalize({-big})[0] == -5.0);
    }
    SUBCASE("zero variance substitutes unit std") {
        OnlineNormalizer norm(1);
        norm.update({2.0});
        norm.update({2.0});
        CHECK(norm.normalize({3.5})[0] == doctest::Approx(1.5));
    }
    SUBCASE("emit-then-update uses the statistics before the point") {
        OnlineNormalizer norm(1);
        norm.update({0.0});
        norm.update({2.0});  // mean 1, population var 1
        const auto z = norm.normalize_then_update({3.0});
        CHECK(z[0] == doctest::Approx(2.0));  // (3 - 1) / 1
        CHECK(norm.count() == 3);
        CHECK(norm.mean(0) == doctest::Approx(5.0 / 3.0));
    }
    SUBCASE("dimension mismatches throw") {
        OnlineNormalizer norm(2);
        CHECK_THROWS_AS(norm.update({1.0}), ShapeError);
        CHECK_THROWS_AS(norm.normalize({1.0, 2.0, 3.0}), ShapeError);
        CHECK_THROWS_AS(OnlineNormalizer(0), ValueError);
    }
}
