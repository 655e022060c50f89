#pragma once

#include <cstdint>
#include <iosfwd>
#include <vector>

#include "npstream/models.hpp"

namespace npstream {

// Scaling harness for the streamed conditioning/query cost curves. Per-step
// mode measures the cost of one arrival plus one probe query at each grid
// size; cumulative mode streams points one at a time and accumulates the
// exact op counts, snapshotting at grid sizes. The fitted log-log slope of
// conditioning ops over N_s is the gated quantity; wall-clock is reported
// but never gated.

struct LogLogFit {
    double slope = 0.0;
    double intercept = 0.0;
    double ci_half = 0.0;  // 95% half-width on the slope

    double lo() const { return slope - ci_half; }
    double hi() const { return slope + ci_half; }
};

// Least-squares fit of log(y) against log(x); inputs must be positive.
LogLogFit fit_loglog(const std::vector<double>& xs, const std::vector<double>& ys);

struct BenchRow {
    i64 n_s = 0;
    std::uint64_t cond_ops = 0;
    std::uint64_t query_ops = 0;
    double wall_us = 0.0;
};

struct BenchSeries {
    Family family = Family::inctnp;
    bool cumulative = false;
    std::vector<BenchRow> rows;
    LogLogFit fit;  // conditioning ops vs N_s
};

struct BenchConfig {
    std::vector<Family> families;
    std::vector<i64> grid;  // strictly increasing, >= 4 points
    bool cumulative = false;
    i64 repeats = 1;  // wall-clock averaging only; op counts are exact
    std::uint64_t seed = 0;
    ModelConfig model;  // family field is overwritten per series

    BenchConfig();
    void validate() const;
};

struct BenchResult {
    std::vector<BenchSeries> series;
};

BenchResult bench_scaling(const BenchConfig& cfg);

// family,mode,n_s,cond_ops,query_ops,wall_us,slope,slope_ci95_lo,slope_ci95_hi
void write_bench_csv(const BenchResult& result, std::ostream& out);

}  // namespace npstream
