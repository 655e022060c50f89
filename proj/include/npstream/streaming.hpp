#pragma once

#include <cstdint>
#include <vector>

#include "npstream/models.hpp"
#include "npstream/rng.hpp"

namespace npstream {

// One timed unit of session work. n_s is the effective conditioning size the
// row was recorded at: the session size for observes and factorised queries,
// session size + autoregressive prefix length for AR steps. Op counts are
// attention score multiplies, incremented inside the kernels, never modeled.
struct CostRow {
    i64 n_s = 0;
    std::uint64_t cond_ops = 0;
    std::uint64_t query_ops = 0;
    double wall_ms = 0.0;
};

struct CostLedger {
    std::vector<CostRow> observes;
    std::vector<CostRow> queries;

    std::uint64_t total_cond() const;
    std::uint64_t total_query() const;
};

/**
 * One live stream against a fixed model. Conditioning state depends on the
 * family: causal families keep an append-only KV cache and never touch past
 * tokens again, cnp keeps a running sum of embedded context tokens, tnpd and
 * lbanp keep the raw context and re-encode it at every query. Sessions copy
 * deeply, so fork() is plain value copy and forks never alias the parent.
 */
class StreamSession {
public:
    explicit StreamSession(const ModelParams& model, i64 max_points = 0);

    // Appends m >= 1 points. Causal families pay their conditioning cost
    // here; buffered families defer it to the next query.
    void observe(const Tensor& X, const Tensor& Y);

    // Independent per-target Gaussians from the accumulated context. Pure:
    // repeated calls return identical predictions (the ledger still grows).
    GaussianPrediction predict_factorised(const Tensor& Xt);

    // Joint log-likelihood sum_n log p(y_n | x_n, context, (x_j, y_j)_{j<n})
    // with the true y appended after each step. Runs on a fork; the session
    // state is untouched.
    double predict_ar_teacher_forced(const Tensor& Xt, const Tensor& Yt);

    // One sampled autoregressive rollout: per-step Gaussians plus the y
    // values drawn from them.
    struct ArUnroll {
        GaussianPrediction pred;
        Tensor y;
    };

    // S independent rollouts forming an equal-weight mixture per target.
    std::vector<ArUnroll> predict_ar_sampled(const Tensor& Xt, i64 S, Rng& rng);

    StreamSession fork() const { return *this; }

    i64 size() const { return n_s_; }
    const CostLedger& ledger() const { return ledger_; }
    const ModelParams& model() const { return *model_; }

private:
    void check_points(const Tensor& X, const Tensor& Y) const;
    void require_nonempty(const char* what) const;
    GaussianPrediction query_from_state(const Tensor& Xt, AttnCounter& ctr) const;
    void extend_state(const Tensor& X, const Tensor& Y, std::uint64_t* cond_ops);

    const ModelParams* model_;
    i64 max_points_ = 0;
    i64 n_s_ = 0;
    IncState inc_;          // inctnp, inctnp_seq
    Tensor ctx_x_, ctx_y_;  // tnpd, lbanp
    Tensor embed_sum_;      // cnp, (1, d_model)
    CostLedger ledger_;
};

}  // namespace npstream
