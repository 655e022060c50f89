#include "npstream/training.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>
#include <utility>

#include "npstream/error.hpp"
#include "npstream/rng.hpp"

namespace npstream {

const char* schedule_name(Schedule s) {
    switch (s) {
        case Schedule::constant: return "constant";
        case Schedule::cosine: return "cosine";
    }
    throw ValueError("schedule_name: bad enum value");
}

Schedule schedule_from_string(const std::string& name) {
    if (name == "constant") return Schedule::constant;
    if (name == "cosine") return Schedule::cosine;
    throw ValueError("unknown schedule: " + name);
}

void TrainConfig::validate() const {
    if (epochs < 1) throw ValueError("train config: epochs must be >= 1");
    if (batch < 1) throw ValueError("train config: batch must be >= 1");
    if (samples_per_epoch < batch || samples_per_epoch % batch != 0)
        throw ValueError("train config: samples_per_epoch must be a positive multiple of batch");
    if (!(lr >= 0.0)) throw ValueError("train config: lr must be >= 0");
    if (!(lr_min >= 0.0) || lr_min > lr) throw ValueError("train config: need 0 <= lr_min <= lr");
    if (!(warmup_frac >= 0.0) || warmup_frac >= 1.0) throw ValueError("train config: warmup_frac in [0, 1)");
    if (!(beta1 >= 0.0) || beta1 >= 1.0 || !(beta2 >= 0.0) || beta2 >= 1.0)
        throw ValueError("train config: betas must lie in [0, 1)");
    if (!(eps > 0.0)) throw ValueError("train config: eps must be > 0");
    if (!(weight_decay >= 0.0)) throw ValueError("train config: weight_decay must be >= 0");
}

OptState make_opt_state(const std::vector<Tensor*>& params) {
    OptState st;
    st.m.reserve(params.size());
    st.v.reserve(params.size());
    for (const Tensor* p : params) {
        st.m.push_back(Tensor::zeros(p->shape));
        st.v.push_back(Tensor::zeros(p->shape));
    }
    return st;
}

double grad_global_norm(const std::vector<Tensor>& grads) {
    double sq = 0.0;
    for (const Tensor& g : grads)
        for (const double x : g.data) sq += x * x;
    return std::sqrt(sq);
}

double clip_gradients(std::vector<Tensor>& grads, double clip_norm) {
    const double norm = grad_global_norm(grads);
    if (clip_norm > 0.0 && norm > clip_norm) {
        const double s = clip_norm / norm;
        for (Tensor& g : grads)
            for (double& x : g.data) x *= s;
    }
    return norm;
}

double adamw_step(const std::vector<Tensor*>& params, std::vector<Tensor> grads, OptState& st, double lr,
                  const TrainConfig& cfg) {
    if (params.size() != grads.size() || params.size() != st.m.size() || params.size() != st.v.size())
        throw ShapeError("adamw_step: parameter, gradient, and moment counts disagree");
    const double pre_clip = clip_gradients(grads, cfg.clip_norm);
    st.step += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = *params[i];
        const Tensor& g = grads[i];
        if (g.shape != p.shape || st.m[i].shape != p.shape)
            throw ShapeError("adamw_step: shape mismatch at parameter " + std::to_string(i));
        for (std::size_t j = 0; j < p.data.size(); ++j) {
            double& m = st.m[i].data[j];
            double& v = st.v[i].data[j];
            const double gj = g.data[j];
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * gj;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * gj * gj;
            const double mhat = m / bc1;
            const double vhat = v / bc2;
            p.data[j] -= lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * p.data[j]);
        }
    }
    return pre_clip;
}

double lr_at_step(i64 t, i64 total, const TrainConfig& cfg) {
    if (total < 1) throw ValueError("lr_at_step: total must be >= 1");
    if (t < 0 || t >= total) throw ValueError("lr_at_step: step out of range");
    if (cfg.schedule == Schedule::constant) return cfg.lr;
    const i64 warmup = static_cast<i64>(std::ceil(cfg.warmup_frac * static_cast<double>(total)));
    if (t < warmup) return cfg.lr * static_cast<double>(t) / static_cast<double>(warmup);
    if (total <= warmup) return cfg.lr;
    const double progress = static_cast<double>(t - warmup) / static_cast<double>(total - warmup);
    return cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1.0 + std::cos(M_PI * progress));
}

Tensor nll_loss(const GaussianPrediction& pred, const Tensor& y, Tape* tape) {
    if (pred.mean.shape != y.shape || pred.var.shape != y.shape)
        throw ShapeError("nll_loss: prediction and target shapes disagree");
    if (y.numel() < 1) throw ShapeError("nll_loss: empty target");
    for (const double v : pred.var.data)
        if (!(v > 0.0)) throw NumericError("nll_loss: non-positive variance");
    Tensor d = sub(y, pred.mean, tape);
    Tensor q = div(mul(d, d, tape), pred.var, tape);
    Tensor s = scale(add(q, log(pred.var, tape), tape), 0.5, tape);
    s = add_scalar(s, 0.5 * std::log(2.0 * M_PI), tape);
    return mean_all(s, tape);
}

Tensor dense_seq_loss(const ModelParams& model, const Tensor& seq_x, const Tensor& seq_y, Tape* tape) {
    GaussianPrediction pred = inctnp_seq_forward(model, seq_x, seq_y, tape);
    const i64 B = seq_y.dim(0), N = seq_y.dim(1), d_y = seq_y.dim(2);
    Tensor targets({B, N - 1, d_y});
    for (i64 b = 0; b < B; ++b)
        for (i64 i = 1; i < N; ++i)
            for (i64 j = 0; j < d_y; ++j) targets.at(b, i - 1, j) = seq_y.at(b, i, j);
    return nll_loss(pred, targets, tape);
}

TaskBatch join_task_stream(const TaskBatch& task) {
    if (task.yt.numel() < 1) throw ValueError("join_task_stream: target values required");
    const i64 B = task.batch(), n_c = task.n_c(), n_t = task.n_t();
    const i64 d_x = task.xc.dim(2), d_y = task.yc.dim(2);
    TaskBatch out;
    out.xc = Tensor({B, n_c + n_t, d_x});
    out.yc = Tensor({B, n_c + n_t, d_y});
    for (i64 b = 0; b < B; ++b) {
        for (i64 i = 0; i < n_c; ++i) {
            for (i64 j = 0; j < d_x; ++j) out.xc.at(b, i, j) = task.xc.at(b, i, j);
            for (i64 j = 0; j < d_y; ++j) out.yc.at(b, i, j) = task.yc.at(b, i, j);
        }
        for (i64 i = 0; i < n_t; ++i) {
            for (i64 j = 0; j < d_x; ++j) out.xc.at(b, n_c + i, j) = task.xt.at(b, i, j);
            for (i64 j = 0; j < d_y; ++j) out.yc.at(b, n_c + i, j) = task.yt.at(b, i, j);
        }
    }
    return out;
}

std::uint64_t task_seed_for_step(std::uint64_t base_seed, i64 step) {
    std::uint64_t z = base_seed + 0x9e3779b97f4a7c15ull * (static_cast<std::uint64_t>(step) + 1ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

TaskSource make_gp_source(const GpTaskConfig& cfg) {
    cfg.validate();
    return [cfg](std::uint64_t s) {
        Rng rng(s);
        return sample_gp_task(cfg, rng);
    };
}

TaskSource make_gp_seq_source(const GpTaskConfig& cfg) {
    cfg.validate();
    return [cfg](std::uint64_t s) {
        Rng rng(s);
        return join_task_stream(sample_gp_task(cfg, rng));
    };
}

TaskSource make_tabular_source(const TabularTaskConfig& cfg) {
    cfg.validate();
    return [cfg](std::uint64_t s) {
        Rng rng(s);
        return sample_tabular_task(cfg, rng);
    };
}

void write_metrics_header(std::ostream& os) { os << "step,lr,train_loss,grad_norm\n"; }

namespace {

void write_metrics_row(std::ostream& os, const StepMetrics& m) {
    std::ostringstream row;
    row << std::setprecision(17) << m.step << ',' << m.lr << ',' << m.loss << ',' << m.grad_norm << '\n';
    os << row.str();
}

}  // namespace

std::vector<StepMetrics> train_epoch(ModelParams& model, const TaskSource& source, const TrainConfig& cfg,
                                     OptState& st, std::ostream* metrics_csv) {
    cfg.validate();
    model.cfg.validate();
    if (!source) throw ValueError("train_epoch: no data source");
    NamedParams<double> named;
    collect_params(model, named);
    std::vector<Tensor*> params;
    params.reserve(named.size());
    for (auto& [name, p] : named) params.push_back(p);
    if (st.m.empty() && st.v.empty() && st.step == 0) st = make_opt_state(params);
    const i64 total = cfg.total_steps();
    std::vector<StepMetrics> metrics;
    metrics.reserve(static_cast<std::size_t>(cfg.steps_per_epoch()));
    const bool dense = model.cfg.family == Family::inctnp_seq;
    for (i64 k = 0; k < cfg.steps_per_epoch(); ++k) {
        const i64 t = st.step;
        if (t >= total) throw ValueError("train_epoch: optimiser already ran the configured step budget");
        const std::uint64_t tseed = task_seed_for_step(cfg.seed, t);
        const TaskBatch task = source(tseed);
        Tape tape;
        for (Tensor* p : params) tape.watch(*p);
        Tensor loss;
        try {
            loss = dense ? dense_seq_loss(model, task.xc, task.yc, &tape)
                         : nll_loss(forward(model, task, &tape), task.yt, &tape);
            if (!std::isfinite(loss.data[0])) throw NumericError("loss is non-finite");
        } catch (const NumericError& e) {
            for (Tensor* p : params) p->detach();
            throw NumericError("train aborted at step " + std::to_string(t) + " (task seed " +
                               std::to_string(tseed) + "): " + e.what());
        }
        tape.backward(loss);
        std::vector<Tensor> grads;
        grads.reserve(params.size());
        for (Tensor* p : params) grads.push_back(tape.grad(*p));
        for (Tensor* p : params) p->detach();
        const double lr_t = lr_at_step(t, total, cfg);
        const double gnorm = adamw_step(params, std::move(grads), st, lr_t, cfg);
        StepMetrics m{t, lr_t, loss.data[0], gnorm};
        if (metrics_csv) write_metrics_row(*metrics_csv, m);
        metrics.push_back(m);
    }
    return metrics;
}

TrainResult train(ModelParams& model, const TaskSource& source, const TrainConfig& cfg,
                  std::ostream* metrics_csv) {
    cfg.validate();
    NamedParams<double> named;
    collect_params(model, named);
    std::vector<Tensor*> params;
    params.reserve(named.size());
    for (auto& [name, p] : named) params.push_back(p);
    OptState st = make_opt_state(params);
    if (metrics_csv) write_metrics_header(*metrics_csv);
    TrainResult result;
    result.history.reserve(static_cast<std::size_t>(cfg.total_steps()));
    for (i64 e = 0; e < cfg.epochs; ++e) {
        std::vector<StepMetrics> epoch = train_epoch(model, source, cfg, st, metrics_csv);
        result.history.insert(result.history.end(), epoch.begin(), epoch.end());
    }
    return result;
}

}  // namespace npstream
