#include "npstream/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <set>

#include "npstream/error.hpp"

namespace npstream {

namespace {

Tensor copy_rows(const Tensor& t, i64 r0, i64 r1) {
    const i64 d = t.dim(1);
    Tensor out({r1 - r0, d});
    std::copy(t.data.begin() + r0 * d, t.data.begin() + r1 * d, out.data.begin());
    return out;
}

Tensor row_of(const Tensor& t, i64 r) { return copy_rows(t, r, r + 1); }

Tensor permute_rows(const Tensor& t, const std::vector<i64>& perm) {
    const i64 d = t.dim(1);
    Tensor out({static_cast<i64>(perm.size()), d});
    for (i64 i = 0; i < static_cast<i64>(perm.size()); ++i)
        for (i64 j = 0; j < d; ++j) out.at(i, j) = t.at(perm[i], j);
    return out;
}

void check_sequence(const Tensor& X, const Tensor& Y, i64 d_y, const char* who) {
    if (X.rank() != 2 || Y.rank() != 2) throw ShapeError(std::string(who) + ": X and Y must be rank 2");
    if (X.dim(0) != Y.dim(0)) throw ShapeError(std::string(who) + ": X/Y row mismatch");
    if (X.dim(0) < 1) throw ValueError(std::string(who) + ": need at least one point");
    if (Y.dim(1) != d_y) throw ShapeError(std::string(who) + ": Y column mismatch");
}

void check_prediction(const GaussianPrediction& p, i64 d_y, const char* who) {
    if (p.mean.rank() != 2 || p.mean.dim(0) != 1 || p.mean.dim(1) != d_y)
        throw ShapeError(std::string(who) + ": prediction mean must be (1, d_y)");
    if (p.var.shape != p.mean.shape) throw ShapeError(std::string(who) + ": mean/var shape mismatch");
    for (i64 j = 0; j < d_y; ++j)
        if (!(p.var.at(0, j) > 0.0)) throw NumericError(std::string(who) + ": non-positive variance");
}

std::uint64_t factorial_u64(i64 n) {
    std::uint64_t f = 1;
    for (i64 i = 2; i <= n; ++i) f *= static_cast<std::uint64_t>(i);
    return f;
}

std::vector<i64> random_perm(i64 n, Rng& rng) {
    std::vector<i64> p(n);
    for (i64 i = 0; i < n; ++i) p[i] = i;
    for (i64 i = n - 1; i > 0; --i) std::swap(p[i], p[rng.uniform_int(0, i)]);
    return p;
}

double mean_of(const std::vector<double>& v) {
    double acc = 0.0;
    for (double x : v) acc += x;
    return acc / static_cast<double>(v.size());
}

double sem_of(const std::vector<double>& v, double mean) {
    if (v.size() < 2) return 0.0;
    double ss = 0.0;
    for (double x : v) {
        const double d = x - mean;
        ss += d * d;
    }
    const double var = ss / static_cast<double>(v.size() - 1);
    return std::sqrt(var / static_cast<double>(v.size()));
}

}  // namespace

// ---------------------------------------------------------------------------
// PredictionRule
// ---------------------------------------------------------------------------

double PredictionRule::joint_logpdf(const Tensor& X, const Tensor& Y) const {
    check_sequence(X, Y, d_y(), "joint_logpdf");
    const i64 n = X.dim(0);
    double ll = 0.0;
    for (i64 i = 0; i < n; ++i) {
        const GaussianPrediction pred = predict_next(copy_rows(X, 0, i), copy_rows(Y, 0, i), row_of(X, i));
        check_prediction(pred, d_y(), "joint_logpdf");
        for (i64 j = 0; j < d_y(); ++j) ll += gaussian_logpdf(Y.at(i, j), pred.mean.at(0, j), pred.var.at(0, j));
    }
    return ll;
}

std::pair<Tensor, double> PredictionRule::sample(const Tensor& X, Rng& rng) const {
    if (X.rank() != 2 || X.dim(0) < 1) throw ShapeError("sample: X must be (n, d_x) with n >= 1");
    const i64 n = X.dim(0);
    Tensor Y({n, d_y()});
    double ll = 0.0;
    for (i64 i = 0; i < n; ++i) {
        const GaussianPrediction pred = predict_next(copy_rows(X, 0, i), copy_rows(Y, 0, i), row_of(X, i));
        check_prediction(pred, d_y(), "sample");
        for (i64 j = 0; j < d_y(); ++j) {
            const double m = pred.mean.at(0, j), v = pred.var.at(0, j);
            Y.at(i, j) = rng.normal(m, std::sqrt(v));
            ll += gaussian_logpdf(Y.at(i, j), m, v);
        }
    }
    return {std::move(Y), ll};
}

IidGaussianRule::IidGaussianRule(double mean, double var, i64 d_y) : PredictionRule(d_y), mean_(mean), var_(var) {
    if (!(var > 0.0)) throw ValueError("IidGaussianRule: var must be positive");
    if (d_y < 1) throw ValueError("IidGaussianRule: d_y must be positive");
}

GaussianPrediction IidGaussianRule::predict_next(const Tensor& hist_x, const Tensor& hist_y,
                                                 const Tensor& x_next) const {
    (void)hist_x;
    (void)hist_y;
    if (x_next.rank() != 2 || x_next.dim(0) != 1) throw ShapeError("predict_next: x_next must be a single row");
    GaussianPrediction p;
    p.mean = Tensor::full({1, d_y()}, mean_);
    p.var = Tensor::full({1, d_y()}, var_);
    return p;
}

MarkovRule::MarkovRule(double prior_mean, double var, i64 d_y)
    : PredictionRule(d_y), prior_mean_(prior_mean), var_(var) {
    if (!(var > 0.0)) throw ValueError("MarkovRule: var must be positive");
    if (d_y < 1) throw ValueError("MarkovRule: d_y must be positive");
}

GaussianPrediction MarkovRule::predict_next(const Tensor& hist_x, const Tensor& hist_y,
                                            const Tensor& x_next) const {
    (void)hist_x;
    if (x_next.rank() != 2 || x_next.dim(0) != 1) throw ShapeError("predict_next: x_next must be a single row");
    const i64 n = hist_y.rank() == 2 ? hist_y.dim(0) : 0;
    GaussianPrediction p;
    p.mean = Tensor::full({1, d_y()}, prior_mean_);
    p.var = Tensor::full({1, d_y()}, var_);
    if (n > 0) {
        if (hist_y.dim(1) != d_y()) throw ShapeError("predict_next: history d_y mismatch");
        for (i64 j = 0; j < d_y(); ++j) p.mean.at(0, j) = hist_y.at(n - 1, j);
    }
    return p;
}

NpStreamRule::NpStreamRule(const ModelParams& model, const Tensor& x_fixed, const Tensor& y_fixed, bool append)
    : PredictionRule(model.cfg.d_y), base_(model), append_(append) {
    if (x_fixed.rank() != 2 || x_fixed.dim(0) < 1)
        throw ValueError("NpStreamRule: need a non-empty fixed conditioning set");
    base_.observe(x_fixed, y_fixed);
}

GaussianPrediction NpStreamRule::predict_next(const Tensor& hist_x, const Tensor& hist_y,
                                              const Tensor& x_next) const {
    StreamSession s = base_.fork();
    const i64 n = hist_x.rank() == 2 ? hist_x.dim(0) : 0;
    if (append_ && n > 0) s.observe(hist_x, hist_y);
    return s.predict_factorised(x_next);
}

double NpStreamRule::joint_logpdf(const Tensor& X, const Tensor& Y) const {
    check_sequence(X, Y, d_y(), "joint_logpdf");
    if (!append_) return PredictionRule::joint_logpdf(X, Y);
    StreamSession s = base_.fork();
    return s.predict_ar_teacher_forced(X, Y);
}

std::pair<Tensor, double> NpStreamRule::sample(const Tensor& X, Rng& rng) const {
    if (!append_) return PredictionRule::sample(X, rng);
    if (X.rank() != 2 || X.dim(0) < 1) throw ShapeError("sample: X must be (n, d_x) with n >= 1");
    StreamSession s = base_.fork();
    const std::vector<StreamSession::ArUnroll> unrolls = s.predict_ar_sampled(X, 1, rng);
    const StreamSession::ArUnroll& u = unrolls[0];
    double ll = 0.0;
    for (i64 i = 0; i < X.dim(0); ++i)
        for (i64 j = 0; j < d_y(); ++j)
            ll += gaussian_logpdf(u.y.at(i, j), u.pred.mean.at(i, j), u.pred.var.at(i, j));
    return {u.y, ll};
}

// ---------------------------------------------------------------------------
// Permutation machinery
// ---------------------------------------------------------------------------

double log_mean_exp(const std::vector<double>& values) {
    if (values.empty()) throw ValueError("log_mean_exp: empty input");
    const double m = *std::max_element(values.begin(), values.end());
    if (!std::isfinite(m)) return m;
    double acc = 0.0;
    for (double v : values) acc += std::exp(v - m);
    return m + std::log(acc / static_cast<double>(values.size()));
}

std::vector<std::vector<i64>> all_permutations(i64 n) {
    if (n < 1) throw ValueError("all_permutations: n must be positive");
    if (n > 6) throw ValueError("all_permutations: enumeration capped at n = 6");
    std::vector<i64> p(n);
    for (i64 i = 0; i < n; ++i) p[i] = i;
    std::vector<std::vector<i64>> out;
    do {
        out.push_back(p);
    } while (std::next_permutation(p.begin(), p.end()));
    return out;
}

std::vector<std::vector<i64>> sample_permutations(i64 n, i64 k, Rng& rng) {
    if (n < 1 || k < 1) throw ValueError("sample_permutations: n and k must be positive");
    if (n <= 20 && static_cast<std::uint64_t>(k) > factorial_u64(n))
        throw ValueError("sample_permutations: k exceeds n!");
    std::set<std::vector<i64>> seen;
    i64 attempts = 0;
    const i64 max_attempts = 10000 * k;
    while (static_cast<i64>(seen.size()) < k) {
        seen.insert(random_perm(n, rng));
        if (++attempts > max_attempts)
            throw NumericError("sample_permutations: rejection sampling failed to find distinct permutations");
    }
    return {seen.begin(), seen.end()};
}

double joint_ar_logpdf(const PredictionRule& rule, const Tensor& X, const Tensor& Y) {
    return rule.joint_logpdf(X, Y);
}

namespace {

double lme_over_perms(const PredictionRule& rule, const Tensor& X, const Tensor& Y,
                      const std::vector<std::vector<i64>>& perms) {
    std::vector<double> joints;
    joints.reserve(perms.size());
    for (const auto& perm : perms) joints.push_back(rule.joint_logpdf(permute_rows(X, perm), permute_rows(Y, perm)));
    return log_mean_exp(joints);
}

}  // namespace

double exchangeable_logpdf_enumerated(const PredictionRule& rule, const Tensor& X, const Tensor& Y) {
    check_sequence(X, Y, rule.d_y(), "exchangeable_logpdf");
    return lme_over_perms(rule, X, Y, all_permutations(X.dim(0)));
}

double exchangeable_logpdf_sampled(const PredictionRule& rule, const Tensor& X, const Tensor& Y, i64 n_perm,
                                   Rng& rng) {
    check_sequence(X, Y, rule.d_y(), "exchangeable_logpdf");
    return lme_over_perms(rule, X, Y, sample_permutations(X.dim(0), n_perm, rng));
}

double exchangeable_logpdf(const PredictionRule& rule, const Tensor& X, const Tensor& Y, i64 n_perm, Rng& rng) {
    check_sequence(X, Y, rule.d_y(), "exchangeable_logpdf");
    if (n_perm < 1) throw ValueError("exchangeable_logpdf: n_perm must be positive");
    const i64 n = X.dim(0);
    if (n <= 6 && static_cast<std::uint64_t>(n_perm) >= factorial_u64(n))
        return exchangeable_logpdf_enumerated(rule, X, Y);
    return exchangeable_logpdf_sampled(rule, X, Y, n_perm, rng);
}

// ---------------------------------------------------------------------------
// KL gap
// ---------------------------------------------------------------------------

void KlGapConfig::validate() const {
    if (n_datasets < 1 || n_perm_inner < 1 || n_perm_outer < 1 || n_mc < 1)
        throw ValueError("KlGapConfig: all counts must be positive");
}

KlGapConfig KlGapConfig::desk_scale() {
    KlGapConfig cfg;
    cfg.n_datasets = 200;
    cfg.n_perm_inner = 25;
    cfg.n_perm_outer = 12;
    cfg.n_mc = 3;
    return cfg;
}

KLGapEstimate kl_gap(const RuleFactory& make_rule, const KlDatasetSampler& sampler, const KlGapConfig& cfg,
                     Rng& rng) {
    cfg.validate();
    KLGapEstimate est;
    est.n_perm_inner = cfg.n_perm_inner;
    est.n_perm_outer = cfg.n_perm_outer;
    est.n_mc = cfg.n_mc;
    est.per_cell.assign(static_cast<std::size_t>(cfg.n_datasets * cfg.n_perm_outer), 0.0);

    std::vector<Rng> streams;
    streams.reserve(cfg.n_datasets);
    for (i64 d = 0; d < cfg.n_datasets; ++d) streams.push_back(rng.split());

    std::exception_ptr failure;

#pragma omp parallel for schedule(dynamic)
    for (i64 d = 0; d < cfg.n_datasets; ++d) {
        try {
            Rng local = streams[d];
            const KlDataset data = sampler(local);
            if (data.x.rank() != 2 || data.x.dim(0) < 1)
                throw ValueError("kl_gap: dataset must provide at least one evaluation point");
            const std::unique_ptr<PredictionRule> rule = make_rule(data.x_fixed, data.y_fixed);
            const i64 n = data.x.dim(0);
            for (i64 o = 0; o < cfg.n_perm_outer; ++o) {
                const std::vector<i64> sigma = random_perm(n, local);
                const Tensor x_ord = permute_rows(data.x, sigma);
                double cell = 0.0;
                for (i64 s = 0; s < cfg.n_mc; ++s) {
                    const auto [y, log_q] = rule->sample(x_ord, local);
                    const double log_qhat = exchangeable_logpdf(*rule, x_ord, y, cfg.n_perm_inner, local);
                    cell += log_q - log_qhat;
                }
                est.per_cell[static_cast<std::size_t>(d * cfg.n_perm_outer + o)] =
                    cell / static_cast<double>(cfg.n_mc);
            }
        } catch (...) {
#pragma omp critical(npstream_kl_gap_failure)
            if (!failure) failure = std::current_exception();
        }
    }
    if (failure) std::rethrow_exception(failure);

    est.gap = mean_of(est.per_cell);
    est.se = sem_of(est.per_cell, est.gap);
    return est;
}

KlDatasetSampler make_gp_kl_sampler(KernelSpec spec, i64 n_fixed, i64 n_eval, double sigma_obs) {
    spec.validate();
    if (n_fixed < 1) throw ValueError("make_gp_kl_sampler: need at least one fixed conditioning point");
    if (n_eval < 1) throw ValueError("make_gp_kl_sampler: need at least one evaluation point");
    if (sigma_obs < 0.0) throw ValueError("make_gp_kl_sampler: sigma_obs must be non-negative");
    return [spec, n_fixed, n_eval, sigma_obs](Rng& rng) {
        const StreamTask task = sample_gp_stream(spec, n_fixed + n_eval, sigma_obs, rng);
        KlDataset data;
        data.x_fixed = copy_rows(task.x, 0, n_fixed);
        data.y_fixed = copy_rows(task.y, 0, n_fixed);
        data.x = copy_rows(task.x, n_fixed, n_fixed + n_eval);
        return data;
    };
}

// ---------------------------------------------------------------------------
// Log-likelihood report
// ---------------------------------------------------------------------------

LlReport ll_report(const ModelParams& model, const std::vector<TaskBatch>& batches) {
    if (batches.empty()) throw ValueError("ll_report: no tasks");
    LlReport rep;
    for (const TaskBatch& task : batches) {
        task.validate(model.cfg.d_x, model.cfg.d_y);
        if (task.yt.numel() == 0) throw ValueError("ll_report: tasks need target values");
        const GaussianPrediction pred = forward(model, task);
        const i64 B = task.batch(), Nt = task.n_t(), dy = model.cfg.d_y;
        for (i64 b = 0; b < B; ++b) {
            double ll = 0.0;
            for (i64 i = 0; i < Nt; ++i)
                for (i64 j = 0; j < dy; ++j)
                    ll += gaussian_logpdf(task.yt.at(b, i, j), pred.mean.at(b, i, j), pred.var.at(b, i, j));
            rep.per_task.push_back(ll / static_cast<double>(Nt * dy));
        }
    }
    rep.mean = mean_of(rep.per_task);
    rep.sem = sem_of(rep.per_task, rep.mean);
    return rep;
}

}  // namespace npstream
