#include "npstream/bench.hpp"

#include <chrono>
#include <cmath>
#include <locale>
#include <ostream>
#include <sstream>

#include "npstream/error.hpp"
#include "npstream/streaming.hpp"

namespace npstream {

namespace {

// Two-sided 97.5% Student-t quantiles for df = 1..30; 1.96 beyond.
constexpr double kT975[30] = {12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228,
                              2.201,  2.179, 2.160, 2.145, 2.131, 2.120, 2.110, 2.101, 2.093, 2.086,
                              2.080,  2.074, 2.069, 2.064, 2.060, 2.056, 2.052, 2.048, 2.045, 2.042};

double t975(i64 df) {
    if (df < 1) throw ValueError("fit_loglog: not enough points for a confidence interval");
    return df <= 30 ? kT975[df - 1] : 1.96;
}

double now_us() {
    return std::chrono::duration<double, std::micro>(std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

Tensor probe_target(i64 d_x) {
    Tensor x({1, d_x});
    for (i64 j = 0; j < d_x; ++j) x.at(0, j) = 0.25;
    return x;
}

// Feed rows [r0, r1) one point at a time; returns accumulated cond ops.
std::uint64_t stream_points(StreamSession& s, const Tensor& X, const Tensor& Y, i64 r0, i64 r1) {
    std::uint64_t cond = 0;
    for (i64 r = r0; r < r1; ++r) {
        const std::size_t before = s.ledger().observes.size();
        s.observe(slice_rows(X, r, r + 1), slice_rows(Y, r, r + 1));
        cond += s.ledger().observes[before].cond_ops;
    }
    return cond;
}

BenchSeries run_series(Family family, const BenchConfig& cfg) {
    ModelConfig mc = cfg.model;
    mc.family = family;
    Rng mrng(cfg.seed + 17);
    const ModelParams model = make_model(mc, mrng);

    const i64 n_max = cfg.grid.back();
    Rng drng(cfg.seed + 31);
    const Tensor X = randn<double>({n_max, mc.d_x}, drng);
    const Tensor Y = randn<double>({n_max, mc.d_y}, drng);
    const Tensor probe = probe_target(mc.d_x);

    BenchSeries series;
    series.family = family;
    series.cumulative = cfg.cumulative;

    for (i64 rep = 0; rep < cfg.repeats; ++rep) {
        std::vector<BenchRow> rows;
        if (cfg.cumulative) {
            StreamSession s(model);
            std::uint64_t cond = 0, query = 0;
            double wall = 0.0;
            std::size_t next = 0;
            for (i64 n = 1; n <= n_max; ++n) {
                const double t0 = now_us();
                cond += stream_points(s, X, Y, n - 1, n);
                const std::size_t before = s.ledger().queries.size();
                s.predict_factorised(probe);
                wall += now_us() - t0;
                const CostRow& q = s.ledger().queries[before];
                cond += q.cond_ops;
                query += q.query_ops;
                if (next < cfg.grid.size() && n == cfg.grid[next]) {
                    rows.push_back({n, cond, query, wall});
                    ++next;
                }
            }
        } else {
            for (i64 n : cfg.grid) {
                StreamSession s(model);
                if (n > 1) s.observe(slice_rows(X, 0, n - 1), slice_rows(Y, 0, n - 1));
                const double t0 = now_us();
                const std::uint64_t arrival_cond = stream_points(s, X, Y, n - 1, n);
                const std::size_t before = s.ledger().queries.size();
                s.predict_factorised(probe);
                const double wall = now_us() - t0;
                const CostRow& q = s.ledger().queries[before];
                rows.push_back({n, arrival_cond + q.cond_ops, q.query_ops, wall});
            }
        }
        if (rep == 0) {
            series.rows = rows;
        } else {
            for (std::size_t i = 0; i < rows.size(); ++i) {
                if (rows[i].cond_ops != series.rows[i].cond_ops || rows[i].query_ops != series.rows[i].query_ops)
                    throw NumericError("bench: op counts changed between repeats");
                series.rows[i].wall_us += rows[i].wall_us;
            }
        }
    }
    for (BenchRow& row : series.rows) row.wall_us /= static_cast<double>(cfg.repeats);

    for (std::size_t i = 1; i < series.rows.size(); ++i)
        if (series.rows[i].cond_ops < series.rows[i - 1].cond_ops ||
            series.rows[i].query_ops < series.rows[i - 1].query_ops)
            throw NumericError("bench: op counts must be non-decreasing in N_s");

    std::vector<double> xs, ys;
    for (const BenchRow& row : series.rows) {
        xs.push_back(static_cast<double>(row.n_s));
        ys.push_back(static_cast<double>(row.cond_ops));
    }
    series.fit = fit_loglog(xs, ys);
    return series;
}

}  // namespace

LogLogFit fit_loglog(const std::vector<double>& xs, const std::vector<double>& ys) {
    if (xs.size() != ys.size()) throw ShapeError("fit_loglog: size mismatch");
    const i64 m = static_cast<i64>(xs.size());
    if (m < 4) throw ValueError("fit_loglog: need at least 4 points");
    std::vector<double> lx(m), ly(m);
    for (i64 i = 0; i < m; ++i) {
        if (!(xs[i] > 0.0) || !(ys[i] > 0.0)) throw ValueError("fit_loglog: inputs must be positive");
        lx[i] = std::log(xs[i]);
        ly[i] = std::log(ys[i]);
    }
    double mx = 0.0, my = 0.0;
    for (i64 i = 0; i < m; ++i) {
        mx += lx[i];
        my += ly[i];
    }
    mx /= static_cast<double>(m);
    my /= static_cast<double>(m);
    double sxx = 0.0, sxy = 0.0;
    for (i64 i = 0; i < m; ++i) {
        sxx += (lx[i] - mx) * (lx[i] - mx);
        sxy += (lx[i] - mx) * (ly[i] - my);
    }
    if (!(sxx > 0.0)) throw ValueError("fit_loglog: degenerate grid");

    LogLogFit fit;
    fit.slope = sxy / sxx;
    fit.intercept = my - fit.slope * mx;
    double sse = 0.0;
    for (i64 i = 0; i < m; ++i) {
        const double r = ly[i] - (fit.intercept + fit.slope * lx[i]);
        sse += r * r;
    }
    const i64 df = m - 2;
    const double sigma2 = sse / static_cast<double>(df);
    fit.ci_half = t975(df) * std::sqrt(sigma2 / sxx);
    return fit;
}

BenchConfig::BenchConfig() {
    model.d_x = 1;
    model.d_y = 1;
    model.d_model = 32;
    model.heads = 2;
    model.qk_dim = 8;
    model.v_dim = 8;
    model.layers = 2;
    model.mlp_hidden = 32;
    model.embed_hidden = 32;
    model.lbanp_latents = 8;
}

void BenchConfig::validate() const {
    if (families.empty()) throw ValueError("bench: no families given");
    for (Family f : families)
        if (f == Family::cnp)
            throw ValueError("bench: cnp has no attention cost to fit; pick tnpd, lbanp, inctnp or inctnp_seq");
    if (grid.size() < 4) throw ValueError("bench: grid needs at least 4 points");
    for (std::size_t i = 0; i < grid.size(); ++i) {
        if (grid[i] < 1) throw ValueError("bench: grid sizes must be positive");
        if (i > 0 && grid[i] <= grid[i - 1]) throw ValueError("bench: grid must be strictly increasing");
    }
    if (repeats < 1) throw ValueError("bench: repeats must be positive");
    model.validate();
}

BenchResult bench_scaling(const BenchConfig& cfg) {
    cfg.validate();
    BenchResult result;
    for (Family f : cfg.families) result.series.push_back(run_series(f, cfg));
    return result;
}

void write_bench_csv(const BenchResult& result, std::ostream& out) {
    std::ostringstream buf;
    buf.imbue(std::locale::classic());
    buf.precision(17);
    buf << "family,mode,n_s,cond_ops,query_ops,wall_us,slope,slope_ci95_lo,slope_ci95_hi\n";
    for (const BenchSeries& s : result.series)
        for (const BenchRow& row : s.rows)
            buf << family_name(s.family) << ',' << (s.cumulative ? "cumulative" : "per-step") << ',' << row.n_s
                << ',' << row.cond_ops << ',' << row.query_ops << ',' << row.wall_us << ',' << s.fit.slope << ','
                << s.fit.lo() << ',' << s.fit.hi() << '\n';
    out << buf.str();
}

}  // namespace npstream
