#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "npstream/models.hpp"
#include "npstream/tasks.hpp"
#include "npstream/training.hpp"
#include "oracles.hpp"

using namespace npstream;

namespace {

ModelConfig tiny_config(Family f, i64 d_model = 16) {
    ModelConfig cfg;
    cfg.family = f;
    cfg.d_x = 1;
    cfg.d_y = 1;
    cfg.d_model = d_model;
    cfg.heads = 2;
    cfg.qk_dim = 4;
    cfg.v_dim = 4;
    cfg.layers = 2;
    cfg.mlp_hidden = d_model;
    cfg.embed_hidden = d_model;
    cfg.lbanp_latents = 4;
    return cfg;
}

TaskBatch make_task(i64 B, i64 Nc, i64 Nt, i64 d_x, i64 d_y, Rng& rng) {
    TaskBatch t;
    t.xc = randn<double>({B, Nc, d_x}, rng);
    t.yc = randn<double>({B, Nc, d_y}, rng);
    t.xt = randn<double>({B, Nt, d_x}, rng);
    t.yt = randn<double>({B, Nt, d_y}, rng);
    return t;
}

std::vector<Tensor*> param_ptrs(ModelParams& m) {
    NamedParams<double> named;
    collect_params(m, named);
    std::vector<Tensor*> out;
    for (auto& [name, p] : named) out.push_back(p);
    return out;
}

std::vector<Tensor> snapshot(ModelParams& m) {
    std::vector<Tensor> out;
    for (Tensor* p : param_ptrs(m)) out.push_back(*p);
    return out;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape) return false;
    for (std::size_t i = 0; i < a.data.size(); ++i)
        if (a.data[i] != b.data[i]) return false;
    return true;
}

Tensor lift3(const Tensor& a) {
    Tensor out({1, a.dim(0), a.dim(1)});
    out.data = a.data;
    return out;
}

// Average NLL of the N-1 prefix-conditioned single-point queries on one
// (N, d) stream, each evaluated through the standard forward path.
double prefix_oracle(const ModelParams& m, const Tensor& X, const Tensor& Y) {
    const i64 N = X.dim(0), d_y = Y.dim(1);
    double acc = 0.0;
    i64 count = 0;
    for (i64 i = 1; i < N; ++i) {
        TaskBatch t;
        t.xc = lift3(slice_rows(X, 0, i));
        t.yc = lift3(slice_rows(Y, 0, i));
        t.xt = lift3(slice_rows(X, i, i + 1));
        t.yt = lift3(slice_rows(Y, i, i + 1));
        GaussianPrediction p = forward(m, t);
        for (i64 j = 0; j < d_y; ++j) {
            acc += -gaussian_logpdf(Y.at(i, j), p.mean.data[static_cast<std::size_t>(j)],
                                    p.var.data[static_cast<std::size_t>(j)]);
            ++count;
        }
    }
    return acc / static_cast<double>(count);
}

double eval_nll(const ModelParams& m, const TaskBatch& task) {
    return nll_loss(forward(m, task), task.yt).data[0];
}

}  // namespace

TEST_CASE("lr schedule: warmup ramp then half-cosine decay") {
    TrainConfig cfg;
    cfg.lr = 3e-4;

    const i64 total = 1000;  // warmup = 100
    CHECK(lr_at_step(0, total, cfg) == 0.0);
    CHECK(lr_at_step(50, total, cfg) == doctest::Approx(0.5 * cfg.lr).epsilon(1e-12));
    CHECK(std::fabs(lr_at_step(100, total, cfg) - cfg.lr) < 1e-9);

    for (i64 t = 1; t <= 100; ++t) CHECK(lr_at_step(t, total, cfg) > lr_at_step(t - 1, total, cfg));
    for (i64 t = 101; t < total; t += 97) CHECK(lr_at_step(t, total, cfg) < lr_at_step(t - 1, total, cfg));

    // ceil on fractional warmup windows
    CHECK(lr_at_step(10, 95, cfg) == doctest::Approx(cfg.lr).epsilon(1e-12));
    CHECK(lr_at_step(9, 95, cfg) == doctest::Approx(0.9 * cfg.lr).epsilon(1e-12));

    const i64 big = 2000000;
    CHECK(std::fabs(lr_at_step(big - 1, big, cfg) - cfg.lr_min) < 1e-9);

    const double mid = lr_at_step(550, total, cfg);
    CHECK(mid == doctest::Approx(cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1.0 + std::cos(M_PI * 0.5)))
                     .epsilon(1e-12));
}

TEST_CASE("lr schedule: constant mode and argument validation") {
    TrainConfig cfg;
    cfg.lr = 2e-3;
    cfg.schedule = Schedule::constant;
    for (i64 t : {i64(0), i64(7), i64(99)}) CHECK(lr_at_step(t, 100, cfg) == cfg.lr);

    cfg.schedule = Schedule::cosine;
    CHECK_THROWS_AS(lr_at_step(-1, 100, cfg), ValueError);
    CHECK_THROWS_AS(lr_at_step(100, 100, cfg), ValueError);
    CHECK_THROWS_AS(lr_at_step(0, 0, cfg), ValueError);

    cfg.warmup_frac = 0.0;
    CHECK(lr_at_step(0, 100, cfg) == cfg.lr);

    CHECK(schedule_from_string("cosine") == Schedule::cosine);
    CHECK(schedule_from_string("constant") == Schedule::constant);
    CHECK_THROWS_AS(schedule_from_string("linear"), ValueError);
    CHECK(std::string(schedule_name(Schedule::cosine)) == "cosine");
}

TEST_CASE("nll loss: closed-form anchor values") {
    const double half_log_2pi = 0.9189385332046727;

    GaussianPrediction p;
    p.mean = Tensor::zeros({2, 3, 1});
    p.var = Tensor::ones({2, 3, 1});
    Tensor y = Tensor::zeros({2, 3, 1});
    CHECK(nll_loss(p, y).data[0] == doctest::Approx(half_log_2pi).epsilon(1e-14));

    p.var = Tensor::full({2, 3, 1}, 1.0 / (2.0 * M_PI));
    CHECK(std::fabs(nll_loss(p, y).data[0]) < 1e-12);

    p.var = Tensor::full({2, 3, 1}, 2.0);
    CHECK(nll_loss(p, y).data[0] - half_log_2pi == doctest::Approx(0.5 * std::log(2.0)).epsilon(1e-12));

    p.var = Tensor::full({2, 3, 1}, 4.0);  // doubled sigma
    CHECK(nll_loss(p, y).data[0] - half_log_2pi == doctest::Approx(std::log(2.0)).epsilon(1e-12));

    GaussianPrediction q;
    q.mean = Tensor({1, 1}, {0.5});
    q.var = Tensor({1, 1}, {0.49});
    Tensor y1({1, 1}, {1.3});
    const double expect = 0.5 * (std::log(2.0 * M_PI) + std::log(0.49) + 0.64 / 0.49);
    CHECK(nll_loss(q, y1).data[0] == doctest::Approx(expect).epsilon(1e-14));

    GaussianPrediction r;
    r.mean = Tensor({2, 2}, {0.0, 1.0, -1.0, 2.0});
    r.var = Tensor({2, 2}, {1.0, 0.5, 2.0, 1.5});
    Tensor y2({2, 2}, {0.3, 1.0, -1.4, 1.1});
    double hand = 0.0;
    for (int i = 0; i < 4; ++i) {
        const double d = y2.data[i] - r.mean.data[i];
        hand += 0.5 * (std::log(2.0 * M_PI * r.var.data[i]) + d * d / r.var.data[i]);
    }
    CHECK(nll_loss(r, y2).data[0] == doctest::Approx(hand / 4.0).epsilon(1e-14));
}

TEST_CASE("nll loss: gradients match the closed form") {
    Rng rng(11);
    GaussianPrediction p;
    p.mean = randn<double>({3, 2}, rng);
    p.var = Tensor({3, 2}, {0.5, 1.2, 2.0, 0.9, 1.7, 0.3});
    Tensor y = randn<double>({3, 2}, rng);

    Tape tape;
    tape.watch(p.mean);
    tape.watch(p.var);
    Tensor loss = nll_loss(p, y, &tape);
    tape.backward(loss);
    const Tensor& gm = tape.grad(p.mean);
    const Tensor& gv = tape.grad(p.var);
    const double n = 6.0;
    for (int i = 0; i < 6; ++i) {
        const double d = y.data[i] - p.mean.data[i];
        const double v = p.var.data[i];
        CHECK(gm.data[i] == doctest::Approx((p.mean.data[i] - y.data[i]) / (v * n)).epsilon(1e-12));
        CHECK(gv.data[i] == doctest::Approx((1.0 / v - d * d / (v * v)) / (2.0 * n)).epsilon(1e-12));
    }
    p.mean.detach();
    p.var.detach();
}

TEST_CASE("nll loss: shape and variance validation") {
    GaussianPrediction p;
    p.mean = Tensor::zeros({2, 1});
    p.var = Tensor::ones({2, 1});
    CHECK_THROWS_AS(nll_loss(p, Tensor::zeros({3, 1})), ShapeError);
    p.var.data[1] = 0.0;
    CHECK_THROWS_AS(nll_loss(p, Tensor::zeros({2, 1})), NumericError);
    p.var.data[1] = -1.0;
    CHECK_THROWS_AS(nll_loss(p, Tensor::zeros({2, 1})), NumericError);
}

TEST_CASE("adamw: first and second step reproduce the hand calculation") {
    TrainConfig cfg;
    Tensor theta({1}, {1.0});
    std::vector<Tensor*> params = {&theta};
    OptState st = make_opt_state(params);
    REQUIRE(st.m.size() == 1);
    CHECK(st.m[0].shape == theta.shape);
    CHECK(st.v[0].shape == theta.shape);

    const double lr = 0.1;
    std::vector<Tensor> g1;
    g1.push_back(Tensor({1}, {1.0}));
    const double norm1 = adamw_step(params, g1, st, lr, cfg);
    CHECK(norm1 == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(st.step == 1);

    // clip 1.0 -> 0.5; mhat = 0.5, vhat = 0.25; decay lr*1e-2*theta
    const double upd1 = lr * (0.5 / (0.5 + cfg.eps)) + lr * cfg.weight_decay * 1.0;
    const double theta1 = 1.0 - upd1;
    CHECK(theta.data[0] == doctest::Approx(theta1).epsilon(1e-15));
    CHECK(theta.data[0] == doctest::Approx(0.899000002).epsilon(1e-9));

    std::vector<Tensor> g2;
    g2.push_back(Tensor({1}, {1.0}));
    adamw_step(params, g2, st, lr, cfg);
    CHECK(st.step == 2);

    // second-step moments keep mhat = 0.5, vhat = 0.25 exactly for a repeated
    // clipped gradient, so only the decay term changes
    const double m2 = cfg.beta1 * (0.1 * 0.5) + (1.0 - cfg.beta1) * 0.5;
    const double v2 = cfg.beta2 * (0.001 * 0.25) + (1.0 - cfg.beta2) * 0.25;
    const double mhat2 = m2 / (1.0 - cfg.beta1 * cfg.beta1);
    const double vhat2 = v2 / (1.0 - cfg.beta2 * cfg.beta2);
    const double theta2 = theta1 - lr * (mhat2 / (std::sqrt(vhat2) + cfg.eps) + cfg.weight_decay * theta1);
    CHECK(theta.data[0] == doctest::Approx(theta2).epsilon(1e-14));
}

TEST_CASE("adamw: global-norm clipping arithmetic") {
    std::vector<Tensor> grads;
    grads.push_back(Tensor({2}, {std::sqrt(2.0), std::sqrt(2.0)}));
    CHECK(grad_global_norm(grads) == doctest::Approx(2.0).epsilon(1e-12));

    const double pre = clip_gradients(grads, 0.5);
    CHECK(pre == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(grads[0].data[0] == doctest::Approx(0.25 * std::sqrt(2.0)).epsilon(1e-12));
    CHECK(grads[0].data[1] == doctest::Approx(0.25 * std::sqrt(2.0)).epsilon(1e-12));
    CHECK(grad_global_norm(grads) == doctest::Approx(0.5).epsilon(1e-12));

    std::vector<Tensor> small;
    small.push_back(Tensor({1}, {0.3}));
    CHECK(clip_gradients(small, 0.5) == doctest::Approx(0.3).epsilon(1e-15));
    CHECK(small[0].data[0] == 0.3);

    std::vector<Tensor> untouched;
    untouched.push_back(Tensor({1}, {4.0}));
    CHECK(clip_gradients(untouched, 0.0) == doctest::Approx(4.0).epsilon(1e-15));
    CHECK(untouched[0].data[0] == 4.0);

    // multi-tensor norm spans every buffer
    std::vector<Tensor> multi;
    multi.push_back(Tensor({2}, {3.0, 0.0}));
    multi.push_back(Tensor({1}, {4.0}));
    CHECK(grad_global_norm(multi) == doctest::Approx(5.0).epsilon(1e-12));
    clip_gradients(multi, 0.5);
    CHECK(multi[1].data[0] == doctest::Approx(0.4).epsilon(1e-12));
}

TEST_CASE("adamw: zero gradients leave only decay, zero decay leaves nothing") {
    TrainConfig cfg;
    Tensor theta({2, 2}, {1.0, -2.0, 0.5, 3.0});
    const Tensor before = theta;
    std::vector<Tensor*> params = {&theta};

    TrainConfig no_decay = cfg;
    no_decay.weight_decay = 0.0;
    OptState st = make_opt_state(params);
    std::vector<Tensor> zeros;
    zeros.push_back(Tensor::zeros({2, 2}));
    adamw_step(params, zeros, st, 0.05, no_decay);
    CHECK(bitwise_equal(theta, before));

    OptState st2 = make_opt_state(params);
    std::vector<Tensor> zeros2;
    zeros2.push_back(Tensor::zeros({2, 2}));
    adamw_step(params, zeros2, st2, 0.05, cfg);
    for (int i = 0; i < 4; ++i)
        CHECK(theta.data[i] == doctest::Approx(before.data[i] * (1.0 - 0.05 * cfg.weight_decay)).epsilon(1e-15));

    std::vector<Tensor> bad;
    bad.push_back(Tensor::zeros({3}));
    CHECK_THROWS_AS(adamw_step(params, bad, st2, 0.05, cfg), ShapeError);
}

TEST_CASE("dense sequence objective equals the per-prefix oracle") {
    for (int draw = 0; draw < 21; ++draw) {
        const i64 N = 2 + (draw % 7);
        Rng rng(400 + static_cast<std::uint64_t>(draw));
        ModelParams m = make_model(tiny_config(Family::inctnp_seq), rng);
        Tensor sx = randn<double>({2, N, 1}, rng);
        Tensor sy = randn<double>({2, N, 1}, rng);
        const double dense = dense_seq_loss(m, sx, sy).data[0];
        double oracle_loss = 0.0;
        for (i64 b = 0; b < 2; ++b)
            oracle_loss += prefix_oracle(m, task_slice(sx, b), task_slice(sy, b));
        oracle_loss /= 2.0;
        CHECK(std::fabs(dense - oracle_loss) < 1e-10);
    }
}

TEST_CASE("dense sequence objective: degenerate stream equals a single-point task") {
    Rng rng(77);
    ModelParams m = make_model(tiny_config(Family::inctnp_seq), rng);
    Tensor sx = randn<double>({1, 2, 1}, rng);
    Tensor sy = randn<double>({1, 2, 1}, rng);
    const double dense = dense_seq_loss(m, sx, sy).data[0];

    TaskBatch t;
    t.xc = lift3(slice_rows(task_slice(sx, 0), 0, 1));
    t.yc = lift3(slice_rows(task_slice(sy, 0), 0, 1));
    t.xt = lift3(slice_rows(task_slice(sx, 0), 1, 2));
    t.yt = lift3(slice_rows(task_slice(sy, 0), 1, 2));
    const double single = eval_nll(m, t);
    CHECK(dense == single);
}

TEST_CASE("dense sequence objective: order-dependent, validated") {
    Rng rng(88);
    ModelParams m = make_model(tiny_config(Family::inctnp_seq), rng);
    Tensor sx = randn<double>({1, 6, 1}, rng);
    Tensor sy = randn<double>({1, 6, 1}, rng);
    const double base = dense_seq_loss(m, sx, sy).data[0];

    Tensor px(sx.shape), py(sy.shape);
    for (i64 i = 0; i < 6; ++i) {
        px.at(0, i, 0) = sx.at(0, (i + 2) % 6, 0);
        py.at(0, i, 0) = sy.at(0, (i + 2) % 6, 0);
    }
    const double permuted = dense_seq_loss(m, px, py).data[0];
    CHECK(std::fabs(base - permuted) > 1e-10);

    Tensor one_x = randn<double>({1, 1, 1}, rng), one_y = randn<double>({1, 1, 1}, rng);
    CHECK_THROWS_AS(dense_seq_loss(m, one_x, one_y), ValueError);

    ModelParams wrong = make_model(tiny_config(Family::tnpd), rng);
    CHECK_THROWS_AS(dense_seq_loss(wrong, sx, sy), ValueError);
}

TEST_CASE("join_task_stream concatenates context then targets") {
    Rng rng(5);
    TaskBatch task = make_task(2, 3, 2, 1, 1, rng);
    TaskBatch joined = join_task_stream(task);
    REQUIRE(joined.xc.shape == Shape{2, 5, 1});
    REQUIRE(joined.yc.shape == Shape{2, 5, 1});
    CHECK(joined.xt.numel() == 0);
    for (i64 b = 0; b < 2; ++b) {
        for (i64 i = 0; i < 3; ++i) {
            CHECK(joined.xc.at(b, i, 0) == task.xc.at(b, i, 0));
            CHECK(joined.yc.at(b, i, 0) == task.yc.at(b, i, 0));
        }
        for (i64 i = 0; i < 2; ++i) {
            CHECK(joined.xc.at(b, 3 + i, 0) == task.xt.at(b, i, 0));
            CHECK(joined.yc.at(b, 3 + i, 0) == task.yt.at(b, i, 0));
        }
    }
    TaskBatch no_targets = task;
    no_targets.yt = Tensor();
    CHECK_THROWS_AS(join_task_stream(no_targets), ValueError);

    GpTaskConfig gcfg;
    gcfg.batch = 2;
    gcfg.n_ctx_min = 2;
    gcfg.n_ctx_max = 6;
    gcfg.n_target = 4;
    TaskSource src = make_gp_seq_source(gcfg);
    TaskBatch stream = src(123);
    CHECK(stream.xc.dim(0) == 2);
    CHECK(stream.xc.dim(1) == stream.yc.dim(1));
    Rng rng2(99);
    ModelParams m = make_model(tiny_config(Family::inctnp_seq), rng2);
    CHECK(std::isfinite(dense_seq_loss(m, stream.xc, stream.yc).data[0]));
}

TEST_CASE("training losses pass finite-difference gradient checks") {
    ModelConfig micro = tiny_config(Family::tnpd, 8);
    micro.layers = 1;
    micro.mlp_hidden = 8;
    micro.embed_hidden = 8;

    Rng rng(2024);
    ModelParams m = make_model(micro, rng);
    TaskBatch task = make_task(2, 3, 2, 1, 1, rng);
    const auto loss_fn = [&](Tape* t) { return nll_loss(forward(m, task, t), task.yt, t); };
    CHECK(gradcheck_params(loss_fn, param_ptrs(m)) < 1e-4);

    ModelConfig seq_cfg = micro;
    seq_cfg.family = Family::inctnp_seq;
    ModelParams ms = make_model(seq_cfg, rng);
    Tensor sx = randn<double>({2, 4, 1}, rng);
    Tensor sy = randn<double>({2, 4, 1}, rng);
    const auto seq_loss_fn = [&](Tape* t) { return dense_seq_loss(ms, sx, sy, t); };
    CHECK(gradcheck_params(seq_loss_fn, param_ptrs(ms)) < 1e-4);
}

TEST_CASE("train loop: zero learning rate leaves parameters bit-identical") {
    Rng rng(31);
    ModelParams m = make_model(tiny_config(Family::cnp), rng);
    const std::vector<Tensor> before = snapshot(m);

    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.samples_per_epoch = 8;
    cfg.batch = 2;
    cfg.lr = 0.0;
    cfg.lr_min = 0.0;
    cfg.schedule = Schedule::constant;
    cfg.seed = 7;

    GpTaskConfig gcfg;
    gcfg.batch = 2;
    gcfg.n_ctx_min = 1;
    gcfg.n_ctx_max = 6;
    gcfg.n_target = 4;
    TrainResult res = train(m, make_gp_source(gcfg), cfg);
    CHECK(res.history.size() == 4);

    const std::vector<Tensor> after = snapshot(m);
    for (std::size_t i = 0; i < before.size(); ++i) CHECK(bitwise_equal(before[i], after[i]));
}

TEST_CASE("train loop: deterministic per seed, seed changes the trajectory") {
    GpTaskConfig gcfg;
    gcfg.batch = 4;
    gcfg.n_ctx_min = 1;
    gcfg.n_ctx_max = 6;
    gcfg.n_target = 3;

    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.samples_per_epoch = 16;
    cfg.batch = 4;
    cfg.lr = 1e-3;
    cfg.seed = 42;

    const auto run = [&](std::uint64_t model_seed, const TrainConfig& c) {
        Rng rng(model_seed);
        ModelParams m = make_model(tiny_config(Family::tnpd), rng);
        TrainResult r = train(m, make_gp_source(gcfg), c);
        return std::make_pair(std::move(m), std::move(r));
    };

    auto [m1, r1] = run(9, cfg);
    auto [m2, r2] = run(9, cfg);
    REQUIRE(r1.history.size() == r2.history.size());
    REQUIRE(r1.history.size() == 8);
    for (std::size_t i = 0; i < r1.history.size(); ++i) {
        CHECK(r1.history[i].loss == r2.history[i].loss);
        CHECK(r1.history[i].grad_norm == r2.history[i].grad_norm);
        CHECK(r1.history[i].lr == r2.history[i].lr);
        CHECK(r1.history[i].step == static_cast<i64>(i));
    }
    auto p1 = param_ptrs(m1), p2 = param_ptrs(m2);
    for (std::size_t i = 0; i < p1.size(); ++i) CHECK(bitwise_equal(*p1[i], *p2[i]));

    TrainConfig other = cfg;
    other.seed = 43;
    auto [m3, r3] = run(9, other);
    bool any_diff = false;
    for (std::size_t i = 0; i < r1.history.size(); ++i) any_diff = any_diff || r1.history[i].loss != r3.history[i].loss;
    CHECK(any_diff);
}

TEST_CASE("train loop: metrics csv layout") {
    Rng rng(3);
    ModelParams m = make_model(tiny_config(Family::cnp), rng);
    GpTaskConfig gcfg;
    gcfg.batch = 2;
    gcfg.n_ctx_min = 1;
    gcfg.n_ctx_max = 4;
    gcfg.n_target = 3;

    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.samples_per_epoch = 12;
    cfg.batch = 2;
    cfg.lr = 1e-3;

    std::ostringstream csv;
    TrainResult res = train(m, make_gp_source(gcfg), cfg, &csv);
    std::istringstream in(csv.str());
    std::string line;
    REQUIRE(std::getline(in, line));
    CHECK(line == "step,lr,train_loss,grad_norm");
    i64 rows = 0;
    while (std::getline(in, line)) {
        std::istringstream ls(line);
        std::string step_s, lr_s, loss_s, gn_s;
        REQUIRE(std::getline(ls, step_s, ','));
        REQUIRE(std::getline(ls, lr_s, ','));
        REQUIRE(std::getline(ls, loss_s, ','));
        REQUIRE(std::getline(ls, gn_s, ','));
        CHECK(std::stoll(step_s) == rows);
        CHECK(std::stod(lr_s) == doctest::Approx(lr_at_step(rows, cfg.total_steps(), cfg)).epsilon(1e-15));
        CHECK(std::isfinite(std::stod(loss_s)));
        CHECK(std::stod(gn_s) >= 0.0);
        ++rows;
    }
    CHECK(rows == 6);
    REQUIRE(res.history.size() == 6);
}

TEST_CASE("train loop: non-finite loss aborts naming the task seed") {
    Rng rng(13);
    ModelParams m = make_model(tiny_config(Family::cnp), rng);

    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.samples_per_epoch = 8;
    cfg.batch = 2;
    cfg.lr = 1e-3;
    cfg.seed = 100;

    const std::uint64_t bad_seed = task_seed_for_step(cfg.seed, 2);
    TaskSource source = [bad_seed](std::uint64_t s) {
        Rng r(s);
        TaskBatch t = make_task(2, 3, 2, 1, 1, r);
        if (s == bad_seed) t.yt.data[0] = std::numeric_limits<double>::quiet_NaN();
        return t;
    };

    std::string message;
    try {
        train(m, source, cfg);
    } catch (const NumericError& e) {
        message = e.what();
    }
    REQUIRE(!message.empty());
    CHECK(message.find("step 2") != std::string::npos);
    CHECK(message.find(std::to_string(bad_seed)) != std::string::npos);
}

TEST_CASE("train loop: held-out loss decreases over 200 tiny steps") {
    GpTaskConfig gcfg;
    gcfg.batch = 8;
    gcfg.n_ctx_min = 1;
    gcfg.n_ctx_max = 16;
    gcfg.n_target = 16;

    Rng held_rng(9999);
    const TaskBatch held_out = sample_gp_task(gcfg, held_rng);

    double before_sum = 0.0, after_sum = 0.0;
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
        ModelConfig mc = tiny_config(Family::cnp, 32);
        Rng rng(seed);
        ModelParams m = make_model(mc, rng);
        before_sum += eval_nll(m, held_out);

        TrainConfig cfg;
        cfg.epochs = 1;
        cfg.samples_per_epoch = 200 * 8;
        cfg.batch = 8;
        cfg.lr = 1e-3;
        cfg.seed = seed;
        train(m, make_gp_source(gcfg), cfg);
        after_sum += eval_nll(m, held_out);
    }
    CHECK(after_sum / 3.0 < before_sum / 3.0);
}
