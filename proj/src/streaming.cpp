#include "npstream/streaming.hpp"

#include <chrono>
#include <utility>

#include "npstream/error.hpp"

namespace npstream {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

Tensor append_rows2(const Tensor& a, const Tensor& b) {
    if (a.numel() == 0) return b;
    if (a.dim(1) != b.dim(1)) throw ShapeError("stream: appended column count changed");
    Tensor out({a.dim(0) + b.dim(0), a.dim(1)});
    std::copy(a.data.begin(), a.data.end(), out.data.begin());
    std::copy(b.data.begin(), b.data.end(), out.data.begin() + a.data.size());
    return out;
}

Tensor row_of(const Tensor& a, i64 r) {
    Tensor out({1, a.dim(1)});
    for (i64 j = 0; j < a.dim(1); ++j) out.at(0, j) = a.at(r, j);
    return out;
}

}  // namespace

std::uint64_t CostLedger::total_cond() const {
    std::uint64_t n = 0;
    for (const CostRow& r : observes) n += r.cond_ops;
    for (const CostRow& r : queries) n += r.cond_ops;
    return n;
}

std::uint64_t CostLedger::total_query() const {
    std::uint64_t n = 0;
    for (const CostRow& r : observes) n += r.query_ops;
    for (const CostRow& r : queries) n += r.query_ops;
    return n;
}

StreamSession::StreamSession(const ModelParams& model, i64 max_points)
    : model_(&model), max_points_(max_points) {
    model.cfg.validate();
    if (max_points_ < 0) throw ValueError("stream: max_points must be >= 0");
}

void StreamSession::check_points(const Tensor& X, const Tensor& Y) const {
    if (X.rank() != 2 || X.dim(1) != model_->cfg.d_x) throw ShapeError("stream: X must be (m, d_x)");
    if (Y.rank() != 2 || Y.dim(1) != model_->cfg.d_y) throw ShapeError("stream: Y must be (m, d_y)");
    if (X.dim(0) != Y.dim(0)) throw ShapeError("stream: X and Y row counts disagree");
    if (X.dim(0) < 1) throw ValueError("stream: need at least one point");
}

void StreamSession::require_nonempty(const char* what) const {
    if (n_s_ < 1) throw ValueError(std::string(what) + ": session has no observations");
}

void StreamSession::extend_state(const Tensor& X, const Tensor& Y, std::uint64_t* cond_ops) {
    const ModelParams& m = *model_;
    switch (m.cfg.family) {
        case Family::inctnp:
        case Family::inctnp_seq:
            inctnp_extend(m, inc_, X, Y, cond_ops);
            break;
        case Family::cnp: {
            Tensor zc = embed_points(m, X, &Y, 0.0);
            if (embed_sum_.numel() == 0) embed_sum_ = Tensor::zeros({1, m.cfg.d_model});
            for (i64 r = 0; r < zc.dim(0); ++r)
                for (i64 c = 0; c < zc.dim(1); ++c) embed_sum_.at(0, c) += zc.at(r, c);
            break;
        }
        case Family::tnpd:
        case Family::lbanp:
            ctx_x_ = append_rows2(ctx_x_, X);
            ctx_y_ = append_rows2(ctx_y_, Y);
            break;
    }
    n_s_ += X.dim(0);
}

void StreamSession::observe(const Tensor& X, const Tensor& Y) {
    check_points(X, Y);
    if (max_points_ > 0 && n_s_ + X.dim(0) > max_points_)
        throw ValueError("stream: observation would exceed the configured point cap");
    const auto t0 = Clock::now();
    std::uint64_t cond = 0;
    extend_state(X, Y, &cond);
    ledger_.observes.push_back({n_s_, cond, 0, ms_since(t0)});
}

GaussianPrediction StreamSession::query_from_state(const Tensor& Xt, AttnCounter& ctr) const {
    const ModelParams& m = *model_;
    switch (m.cfg.family) {
        case Family::inctnp:
        case Family::inctnp_seq:
            return inctnp_query(m, inc_, Xt, &ctr.query);
        case Family::tnpd:
            return tnpd_forward_task(m, ctx_x_, ctx_y_, Xt, nullptr, &ctr);
        case Family::lbanp:
            return lbanp_forward_task(m, ctx_x_, ctx_y_, Xt, nullptr, &ctr);
        case Family::cnp: {
            Tensor pooled({1, m.cfg.d_model});
            for (i64 c = 0; c < m.cfg.d_model; ++c)
                pooled.at(0, c) = embed_sum_.at(0, c) / static_cast<double>(n_s_);
            Tensor dec_in = concat_cols<double>({repeat_rows(pooled, Xt.dim(0)), Xt});
            return decode_gaussian(m, dec_in);
        }
    }
    throw ValueError("stream: bad family enum value");
}

GaussianPrediction StreamSession::predict_factorised(const Tensor& Xt) {
    require_nonempty("predict_factorised");
    if (Xt.rank() != 2 || Xt.dim(1) != model_->cfg.d_x) throw ShapeError("stream: Xt must be (n_t, d_x)");
    if (Xt.dim(0) < 1) throw ValueError("stream: no target points");
    const auto t0 = Clock::now();
    AttnCounter ctr;
    GaussianPrediction p = query_from_state(Xt, ctr);
    ledger_.queries.push_back({n_s_, ctr.cond, ctr.query, ms_since(t0)});
    return p;
}

double StreamSession::predict_ar_teacher_forced(const Tensor& Xt, const Tensor& Yt) {
    require_nonempty("predict_ar_teacher_forced");
    check_points(Xt, Yt);
    const i64 n_t = Xt.dim(0), d_y = Yt.dim(1);
    StreamSession work = fork();
    double ll = 0.0;
    for (i64 n = 0; n < n_t; ++n) {
        const auto t0 = Clock::now();
        AttnCounter ctr;
        const Tensor xn = row_of(Xt, n), yn = row_of(Yt, n);
        GaussianPrediction p = work.query_from_state(xn, ctr);
        for (i64 j = 0; j < d_y; ++j) ll += gaussian_logpdf(yn.at(0, j), p.mean.at(0, j), p.var.at(0, j));
        std::uint64_t cond = 0;
        if (n + 1 < n_t) work.extend_state(xn, yn, &cond);
        ledger_.queries.push_back({n_s_ + n, ctr.cond + cond, ctr.query, ms_since(t0)});
    }
    return ll;
}

std::vector<StreamSession::ArUnroll> StreamSession::predict_ar_sampled(const Tensor& Xt, i64 S, Rng& rng) {
    require_nonempty("predict_ar_sampled");
    if (S < 1) throw ValueError("stream: need at least one rollout");
    if (Xt.rank() != 2 || Xt.dim(1) != model_->cfg.d_x) throw ShapeError("stream: Xt must be (n_t, d_x)");
    const i64 n_t = Xt.dim(0), d_y = model_->cfg.d_y;
    if (n_t < 1) throw ValueError("stream: no target points");

    std::vector<Rng> streams;
    streams.reserve(static_cast<std::size_t>(S));
    for (i64 s = 0; s < S; ++s) streams.push_back(rng.split());

    const auto t0 = Clock::now();
    std::vector<ArUnroll> unrolls(static_cast<std::size_t>(S));
    std::vector<AttnCounter> counters(static_cast<std::size_t>(S));
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic)
#endif
    for (i64 s = 0; s < S; ++s) {
        Rng& local = streams[static_cast<std::size_t>(s)];
        AttnCounter& ctr = counters[static_cast<std::size_t>(s)];
        StreamSession work = fork();
        ArUnroll u;
        u.pred.mean = Tensor({n_t, d_y});
        u.pred.var = Tensor({n_t, d_y});
        u.y = Tensor({n_t, d_y});
        for (i64 n = 0; n < n_t; ++n) {
            const Tensor xn = row_of(Xt, n);
            GaussianPrediction p = work.query_from_state(xn, ctr);
            Tensor yn({1, d_y});
            for (i64 j = 0; j < d_y; ++j) {
                u.pred.mean.at(n, j) = p.mean.at(0, j);
                u.pred.var.at(n, j) = p.var.at(0, j);
                yn.at(0, j) = local.normal(p.mean.at(0, j), std::sqrt(p.var.at(0, j)));
                u.y.at(n, j) = yn.at(0, j);
            }
            std::uint64_t cond = 0;
            if (n + 1 < n_t) work.extend_state(xn, yn, &cond);
            ctr.cond += cond;
        }
        unrolls[static_cast<std::size_t>(s)] = std::move(u);
    }
    AttnCounter total;
    for (const AttnCounter& c : counters) {
        total.cond += c.cond;
        total.query += c.query;
    }
    ledger_.queries.push_back({n_s_, total.cond, total.query, ms_since(t0)});
    return unrolls;
}

}  // namespace npstream
