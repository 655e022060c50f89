#include "npstream/cli.hpp"

#include <CLI11.hpp>
#include <fstream>
#include <iostream>
#include <locale>
#include <sstream>

#include "npstream/bench.hpp"
#include "npstream/checkpoint.hpp"
#include "npstream/config.hpp"
#include "npstream/error.hpp"
#include "npstream/kernels.hpp"
#include "npstream/metrics.hpp"
#include "npstream/streaming.hpp"
#include "npstream/taskfile.hpp"
#include "npstream/training.hpp"

namespace npstream {

namespace {

std::ofstream open_out(const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw ValueError("cannot open '" + path + "' for writing");
    out.imbue(std::locale::classic());
    out.precision(17);
    return out;
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream in(s);
    while (std::getline(in, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

// ---------------------------------------------------------------------------
// datagen
// ---------------------------------------------------------------------------

struct DatagenOpts {
    std::string out;
    std::string task = "gp";
    std::string kernel = "rbf";
    std::string format = "bin";
    i64 tasks = 16;
    i64 n_ctx_min = 1;
    i64 n_ctx_max = 64;
    i64 n_target = 128;
    double sigma_obs = 0.1;
    std::uint64_t seed = 0;
};

void cmd_datagen(const DatagenOpts& o) {
    if (o.tasks < 1) throw ValueError("datagen: --tasks must be positive");
    Rng rng(o.seed);
    TaskFile file;
    if (o.task == "gp") {
        GpTaskConfig cfg;
        cfg.batch = 1;
        cfg.n_ctx_min = o.n_ctx_min;
        cfg.n_ctx_max = o.n_ctx_max;
        cfg.n_target = o.n_target;
        cfg.sigma_obs = o.sigma_obs;
        if (o.kernel == "mixed")
            cfg.mixed = true;
        else
            cfg.family = kernel_family_from_string(o.kernel);
        cfg.validate();
        file.d_x = 1;
        file.d_y = 1;
        for (i64 t = 0; t < o.tasks; ++t) {
            const TaskBatch batch = sample_gp_task(cfg, rng);
            file.tasks.push_back({task_slice(batch.xc, 0), task_slice(batch.yc, 0), task_slice(batch.xt, 0),
                                  task_slice(batch.yt, 0)});
        }
    } else if (o.task == "tabular") {
        TabularTaskConfig cfg;
        cfg.batch = 1;
        cfg.n_ctx_min = o.n_ctx_min;
        cfg.n_ctx_max = o.n_ctx_max;
        cfg.n_target = o.n_target;
        cfg.validate();
        file.d_x = cfg.d_x;
        file.d_y = 1;
        for (i64 t = 0; t < o.tasks; ++t) {
            const TaskBatch batch = sample_tabular_task(cfg, rng);
            file.tasks.push_back({task_slice(batch.xc, 0), task_slice(batch.yc, 0), task_slice(batch.xt, 0),
                                  task_slice(batch.yt, 0)});
        }
    } else {
        throw ValueError("datagen: --task must be gp or tabular");
    }

    if (o.format == "bin")
        write_task_file(file, o.out);
    else if (o.format == "csv")
        write_task_csv(file, o.out);
    else
        throw ValueError("datagen: --format must be bin or csv");
    std::cout << "wrote " << file.tasks.size() << " tasks to " << o.out << "\n";
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainOpts {
    std::string config;
    std::string out;
    std::string metrics;
    std::uint64_t seed = 0;
    bool seed_given = false;
};

ModelConfig model_config_from(const ConfigMap& cfg) {
    ModelConfig mc;
    mc.family = family_from_string(config_str(cfg, "family", "inctnp"));
    mc.d_x = config_i64(cfg, "d_x", 1);
    mc.d_y = config_i64(cfg, "d_y", 1);
    mc.d_model = config_i64(cfg, "d_model", 128);
    mc.heads = static_cast<int>(config_i64(cfg, "heads", 8));
    mc.qk_dim = config_i64(cfg, "qk_dim", 16);
    mc.v_dim = config_i64(cfg, "v_dim", 16);
    mc.layers = static_cast<int>(config_i64(cfg, "layers", 5));
    mc.mlp_hidden = config_i64(cfg, "mlp_hidden", mc.d_model);
    mc.embed_hidden = config_i64(cfg, "embed_hidden", 128);
    mc.lbanp_latents = config_i64(cfg, "lbanp_latents", 32);
    mc.sigma_min2 = config_f64(cfg, "sigma_min2", 0.0);
    mc.validate();
    return mc;
}

TrainConfig train_config_from(const ConfigMap& cfg) {
    TrainConfig tc;
    tc.epochs = config_i64(cfg, "epochs", tc.epochs);
    tc.samples_per_epoch = config_i64(cfg, "samples_per_epoch", tc.samples_per_epoch);
    tc.batch = config_i64(cfg, "batch", tc.batch);
    tc.lr = config_f64(cfg, "lr", tc.lr);
    tc.schedule = schedule_from_string(config_str(cfg, "schedule", "cosine"));
    tc.warmup_frac = config_f64(cfg, "warmup_frac", tc.warmup_frac);
    tc.lr_min = config_f64(cfg, "lr_min", tc.lr_min);
    tc.clip_norm = config_f64(cfg, "clip_norm", tc.clip_norm);
    tc.beta1 = config_f64(cfg, "beta1", tc.beta1);
    tc.beta2 = config_f64(cfg, "beta2", tc.beta2);
    tc.weight_decay = config_f64(cfg, "weight_decay", tc.weight_decay);
    tc.eps = config_f64(cfg, "eps", tc.eps);
    tc.seed = static_cast<std::uint64_t>(config_i64(cfg, "seed", 0));
    return tc;
}

TaskSource source_from(const ConfigMap& cfg, const ModelConfig& mc) {
    const std::string task = config_str(cfg, "task", "gp");
    const bool dense = mc.family == Family::inctnp_seq;
    if (task == "gp") {
        if (mc.d_x != 1 || mc.d_y != 1) throw ValueError("config: gp tasks want d_x = d_y = 1");
        GpTaskConfig gp;
        gp.batch = config_i64(cfg, "batch", 16);
        gp.n_ctx_min = config_i64(cfg, "n_ctx_min", gp.n_ctx_min);
        gp.n_ctx_max = config_i64(cfg, "n_ctx_max", gp.n_ctx_max);
        gp.n_target = config_i64(cfg, "n_target", gp.n_target);
        gp.sigma_obs = config_f64(cfg, "sigma_obs", gp.sigma_obs);
        const std::string kernel = config_str(cfg, "kernel", "rbf");
        if (kernel == "mixed")
            gp.mixed = true;
        else
            gp.family = kernel_family_from_string(kernel);
        gp.validate();
        return dense ? make_gp_seq_source(gp) : make_gp_source(gp);
    }
    if (task == "tabular") {
        TabularTaskConfig tab;
        tab.batch = config_i64(cfg, "batch", 16);
        tab.n_ctx_min = config_i64(cfg, "n_ctx_min", tab.n_ctx_min);
        tab.n_ctx_max = config_i64(cfg, "n_ctx_max", tab.n_ctx_max);
        tab.n_target = config_i64(cfg, "n_target", tab.n_target);
        tab.d_x = mc.d_x;
        tab.validate();
        if (mc.d_y != 1) throw ValueError("config: tabular tasks want d_y = 1");
        const TaskSource base = make_tabular_source(tab);
        if (!dense) return base;
        return [base](std::uint64_t s) { return join_task_stream(base(s)); };
    }
    throw ValueError("config: task must be gp or tabular");
}

const std::set<std::string> kTrainKeys = {
    "family",     "d_x",         "d_y",       "d_model",    "heads",      "qk_dim",
    "v_dim",      "layers",      "mlp_hidden", "embed_hidden", "lbanp_latents", "sigma_min2",
    "task",       "kernel",      "n_ctx_min", "n_ctx_max",  "n_target",   "sigma_obs",
    "epochs",     "samples_per_epoch", "batch", "lr",       "schedule",   "warmup_frac",
    "lr_min",     "clip_norm",   "beta1",     "beta2",      "weight_decay", "eps",
    "seed"};

void cmd_train(const TrainOpts& o) {
    const ConfigMap cfg = load_config(o.config);
    check_config_keys(cfg, kTrainKeys);
    const ModelConfig mc = model_config_from(cfg);
    TrainConfig tc = train_config_from(cfg);
    if (o.seed_given) tc.seed = o.seed;
    tc.validate();
    const TaskSource source = source_from(cfg, mc);

    Rng mrng(tc.seed);
    ModelParams model = make_model(mc, mrng);

    std::ofstream metrics;
    std::ostream* metrics_ptr = nullptr;
    if (!o.metrics.empty()) {
        metrics = open_out(o.metrics);
        metrics_ptr = &metrics;
    }
    const TrainResult result = train(model, source, tc, metrics_ptr);

    if (!o.out.empty()) save_checkpoint(model, o.out);
    std::ostringstream summary;
    summary.imbue(std::locale::classic());
    summary.precision(6);
    summary << "trained " << family_name(mc.family) << " for " << result.history.size() << " steps, final loss "
            << (result.history.empty() ? 0.0 : result.history.back().loss);
    if (!o.out.empty()) summary << ", checkpoint " << o.out;
    std::cout << summary.str() << "\n";
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalOpts {
    std::string model;
    std::string tasks;
    std::string out;
    std::uint64_t seed = 0;
};

void cmd_eval(const EvalOpts& o) {
    const ModelParams model = load_checkpoint(o.model);
    const TaskFile file = read_task_file(o.tasks);
    if (file.d_x != model.cfg.d_x || file.d_y != model.cfg.d_y)
        throw ValueError("eval: task file dims do not match the model");
    std::vector<TaskBatch> batches;
    for (const TaskRecord& rec : file.tasks) batches.push_back(record_to_batch(rec));
    const LlReport rep = ll_report(model, batches);

    std::ofstream out = open_out(o.out);
    out << "task,ll\n";
    for (std::size_t t = 0; t < rep.per_task.size(); ++t) out << t << ',' << rep.per_task[t] << '\n';

    std::ostringstream summary;
    summary.imbue(std::locale::classic());
    summary.precision(6);
    summary << "tasks=" << rep.per_task.size() << " mean_ll=" << rep.mean << " sem=" << rep.sem;
    std::cout << summary.str() << "\n";
}

// ---------------------------------------------------------------------------
// stream
// ---------------------------------------------------------------------------

struct StreamOpts {
    std::string model;
    std::string tasks;
    std::string out;
    i64 task_index = 0;
    std::uint64_t seed = 0;
};

void cmd_stream(const StreamOpts& o) {
    const ModelParams model = load_checkpoint(o.model);
    const TaskFile file = read_task_file(o.tasks);
    if (file.d_x != model.cfg.d_x || file.d_y != model.cfg.d_y)
        throw ValueError("stream: task file dims do not match the model");
    if (o.task_index < 0 || o.task_index >= static_cast<i64>(file.tasks.size()))
        throw ValueError("stream: --task-index out of range");
    const TaskRecord& rec = file.tasks[static_cast<std::size_t>(o.task_index)];
    const i64 n_points = rec.xt.dim(0) * rec.yt.dim(1);

    std::ofstream out = open_out(o.out);
    out << "step,N_s,ll_factorised,ll_ar,cond_ops,query_ops,wall_ms\n";

    StreamSession s(model);
    for (i64 i = 0; i < rec.xc.dim(0); ++i) {
        const std::size_t obs0 = s.ledger().observes.size();
        const std::size_t qry0 = s.ledger().queries.size();

        s.observe(slice_rows(rec.xc, i, i + 1), slice_rows(rec.yc, i, i + 1));

        const GaussianPrediction pred = s.predict_factorised(rec.xt);
        double ll_fact = 0.0;
        for (i64 r = 0; r < rec.xt.dim(0); ++r)
            for (i64 j = 0; j < rec.yt.dim(1); ++j)
                ll_fact += gaussian_logpdf(rec.yt.at(r, j), pred.mean.at(r, j), pred.var.at(r, j));
        ll_fact /= static_cast<double>(n_points);

        const double ll_ar = s.predict_ar_teacher_forced(rec.xt, rec.yt) / static_cast<double>(n_points);

        std::uint64_t cond = 0, query = 0;
        double wall = 0.0;
        const CostLedger& ledger = s.ledger();
        for (std::size_t r = obs0; r < ledger.observes.size(); ++r) {
            cond += ledger.observes[r].cond_ops;
            query += ledger.observes[r].query_ops;
            wall += ledger.observes[r].wall_ms;
        }
        for (std::size_t r = qry0; r < ledger.queries.size(); ++r) {
            cond += ledger.queries[r].cond_ops;
            query += ledger.queries[r].query_ops;
            wall += ledger.queries[r].wall_ms;
        }
        out << (i + 1) << ',' << s.size() << ',' << ll_fact << ',' << ll_ar << ',' << cond << ',' << query << ','
            << wall << '\n';
    }
    std::cout << "streamed " << rec.xc.dim(0) << " context points from task " << o.task_index << " to " << o.out
              << "\n";
}

// ---------------------------------------------------------------------------
// klgap
// ---------------------------------------------------------------------------

struct KlgapOpts {
    std::string model;
    std::string out;
    std::string kernel = "rbf";
    i64 datasets = 2000;
    i64 inner = 256;
    i64 outer = 128;
    i64 mc = 32;
    i64 n_fixed = 20;
    i64 n_eval = 40;
    double sigma_obs = 0.1;
    bool desk = false;
    std::uint64_t seed = 0;
    bool datasets_given = false;
    bool inner_given = false;
    bool outer_given = false;
    bool mc_given = false;
    bool n_fixed_given = false;
    bool n_eval_given = false;
};

void cmd_klgap(const KlgapOpts& o) {
    const ModelParams model = load_checkpoint(o.model);
    if (model.cfg.d_x != 1 || model.cfg.d_y != 1) throw ValueError("klgap: gp datasets want d_x = d_y = 1");

    // Desk mode rescales the defaults only; sizes passed explicitly are taken
    // verbatim so a quick profile can still be tweaked flag by flag.
    KlGapConfig cfg;
    cfg.n_datasets = o.datasets;
    cfg.n_perm_inner = o.inner;
    cfg.n_perm_outer = o.outer;
    cfg.n_mc = o.mc;
    i64 n_fixed = o.n_fixed, n_eval = o.n_eval;
    if (o.desk) {
        const KlGapConfig desk = KlGapConfig::desk_scale();
        if (!o.datasets_given) cfg.n_datasets = desk.n_datasets;
        if (!o.inner_given) cfg.n_perm_inner = desk.n_perm_inner;
        if (!o.outer_given) cfg.n_perm_outer = desk.n_perm_outer;
        if (!o.mc_given) cfg.n_mc = desk.n_mc;
        if (!o.n_fixed_given) n_fixed = std::max<i64>(1, n_fixed / 10);
        if (!o.n_eval_given) n_eval = std::max<i64>(1, n_eval / 10);
    }

    KernelSpec spec;
    if (o.kernel == "mixed") throw ValueError("klgap: pick a single kernel family");
    spec.family = kernel_family_from_string(o.kernel);
    const KlDatasetSampler sampler = make_gp_kl_sampler(spec, n_fixed, n_eval, o.sigma_obs);
    const RuleFactory factory = [&model](const Tensor& xf, const Tensor& yf) {
        return std::make_unique<NpStreamRule>(model, xf, yf);
    };

    Rng rng(o.seed);
    const KLGapEstimate est = kl_gap(factory, sampler, cfg, rng);

    std::ofstream out = open_out(o.out);
    out << "dataset_id,gap,se\n";
    for (i64 d = 0; d < cfg.n_datasets; ++d) {
        double mean = 0.0;
        for (i64 p = 0; p < cfg.n_perm_outer; ++p)
            mean += est.per_cell[static_cast<std::size_t>(d * cfg.n_perm_outer + p)];
        mean /= static_cast<double>(cfg.n_perm_outer);
        double ss = 0.0;
        for (i64 p = 0; p < cfg.n_perm_outer; ++p) {
            const double v = est.per_cell[static_cast<std::size_t>(d * cfg.n_perm_outer + p)] - mean;
            ss += v * v;
        }
        const double se = cfg.n_perm_outer > 1
                              ? std::sqrt(ss / static_cast<double>(cfg.n_perm_outer - 1) /
                                          static_cast<double>(cfg.n_perm_outer))
                              : 0.0;
        out << d << ',' << mean << ',' << se << '\n';
    }

    std::ostringstream summary;
    summary.imbue(std::locale::classic());
    summary.precision(6);
    summary << "gap=" << est.gap << " se=" << est.se << " datasets=" << cfg.n_datasets
            << " inner=" << est.n_perm_inner << " outer=" << est.n_perm_outer << " mc=" << est.n_mc;
    std::cout << summary.str() << "\n";
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

struct BenchOpts {
    std::string families = "inctnp,tnpd";
    std::string ns = "128,256,512,1024";
    std::string out;
    bool cumulative = false;
    i64 repeats = 1;
    std::uint64_t seed = 0;
};

void cmd_bench(const BenchOpts& o) {
    BenchConfig cfg;
    for (const std::string& name : split_list(o.families)) cfg.families.push_back(family_from_string(name));
    for (const std::string& n : split_list(o.ns)) {
        ConfigMap one{{"n", n}};
        cfg.grid.push_back(config_i64(one, "n", 0));
    }
    cfg.cumulative = o.cumulative;
    cfg.repeats = o.repeats;
    cfg.seed = o.seed;

    const BenchResult result = bench_scaling(cfg);
    std::ofstream out = open_out(o.out);
    write_bench_csv(result, out);

    for (const BenchSeries& s : result.series) {
        std::ostringstream line;
        line.imbue(std::locale::classic());
        line.precision(4);
        line << "family=" << family_name(s.family) << " mode=" << (s.cumulative ? "cumulative" : "per-step")
             << " slope=" << s.fit.slope << " ci95=[" << s.fit.lo() << ',' << s.fit.hi() << ']';
        std::cout << line.str() << "\n";
    }
}

}  // namespace

int run_command(const std::vector<std::string>& args) {
    kernels::apply_thread_env();

    CLI::App app{"streaming neural process engine", "npstream"};
    app.require_subcommand(1);

    DatagenOpts dg;
    CLI::App* datagen = app.add_subcommand("datagen", "generate synthetic task files");
    datagen->add_option("--out", dg.out, "output path")->required();
    datagen->add_option("--tasks", dg.tasks, "number of tasks");
    datagen->add_option("--task", dg.task, "task family: gp or tabular");
    datagen->add_option("--kernel", dg.kernel, "gp kernel: rbf, matern12, matern32, matern52, periodic, mixed");
    datagen->add_option("--format", dg.format, "bin or csv");
    datagen->add_option("--n-ctx-min", dg.n_ctx_min, "minimum context size");
    datagen->add_option("--n-ctx-max", dg.n_ctx_max, "maximum context size");
    datagen->add_option("--n-target", dg.n_target, "target points per task");
    datagen->add_option("--sigma-obs", dg.sigma_obs, "observation noise");
    datagen->add_option("--seed", dg.seed, "rng seed");

    TrainOpts tr;
    CLI::App* train_cmd = app.add_subcommand("train", "train a model from a config file");
    train_cmd->add_option("--config", tr.config, "key=value config file")->required();
    train_cmd->add_option("--out", tr.out, "checkpoint output path");
    train_cmd->add_option("--metrics", tr.metrics, "per-step metrics CSV path");
    CLI::Option* seed_opt = train_cmd->add_option("--seed", tr.seed, "rng seed (overrides the config)");

    EvalOpts ev;
    CLI::App* eval_cmd = app.add_subcommand("eval", "per-task log-likelihood report");
    eval_cmd->add_option("--model", ev.model, "checkpoint path")->required();
    eval_cmd->add_option("--tasks", ev.tasks, "task file path")->required();
    eval_cmd->add_option("--out", ev.out, "per-task LL CSV path")->required();
    eval_cmd->add_option("--seed", ev.seed, "rng seed (unused; accepted for uniformity)");

    StreamOpts st;
    CLI::App* stream_cmd = app.add_subcommand("stream", "replay a task's context point by point");
    stream_cmd->add_option("--model", st.model, "checkpoint path")->required();
    stream_cmd->add_option("--tasks", st.tasks, "task file path")->required();
    stream_cmd->add_option("--task-index", st.task_index, "task to replay");
    stream_cmd->add_option("--out", st.out, "per-step CSV path")->required();
    stream_cmd->add_option("--seed", st.seed, "rng seed (unused; accepted for uniformity)");

    KlgapOpts kg;
    CLI::App* klgap_cmd = app.add_subcommand("klgap", "permutation KL-gap estimate");
    klgap_cmd->add_option("--model", kg.model, "checkpoint path")->required();
    klgap_cmd->add_option("--out", kg.out, "per-dataset CSV path")->required();
    klgap_cmd->add_option("--kernel", kg.kernel, "gp kernel for the datasets");
    klgap_cmd->add_option("--datasets", kg.datasets, "number of datasets");
    klgap_cmd->add_option("--inner", kg.inner, "permutations defining the exchangeable mixture");
    klgap_cmd->add_option("--outer", kg.outer, "outer permutations for the expectation");
    klgap_cmd->add_option("--mc", kg.mc, "monte carlo samples per KL");
    klgap_cmd->add_option("--n-fixed", kg.n_fixed, "fixed conditioning points per dataset");
    klgap_cmd->add_option("--n-eval", kg.n_eval, "unroll points per dataset");
    klgap_cmd->add_option("--sigma-obs", kg.sigma_obs, "observation noise");
    klgap_cmd->add_flag("--desk", kg.desk, "desk-scale profile (all sizes divided by 10)");
    klgap_cmd->add_option("--seed", kg.seed, "rng seed");

    BenchOpts bn;
    CLI::App* bench_cmd = app.add_subcommand("bench", "conditioning/query scaling curves");
    bench_cmd->add_option("--families", bn.families, "comma list: tnpd, lbanp, inctnp, inctnp_seq");
    bench_cmd->add_option("--ns", bn.ns, "comma list of stream sizes, strictly increasing");
    bench_cmd->add_option("--out", bn.out, "CSV path")->required();
    bench_cmd->add_flag("--cumulative", bn.cumulative, "accumulate per-arrival cost over the whole stream");
    bench_cmd->add_option("--repeats", bn.repeats, "wall-clock averaging repeats");
    bench_cmd->add_option("--seed", bn.seed, "rng seed");

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        std::cout << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << app.help();
        return 1;
    }

    try {
        if (app.got_subcommand(datagen)) {
            cmd_datagen(dg);
        } else if (app.got_subcommand(train_cmd)) {
            tr.seed_given = seed_opt->count() > 0;
            cmd_train(tr);
        } else if (app.got_subcommand(eval_cmd)) {
            cmd_eval(ev);
        } else if (app.got_subcommand(stream_cmd)) {
            cmd_stream(st);
        } else if (app.got_subcommand(klgap_cmd)) {
            cmd_klgap(kg);
        } else if (app.got_subcommand(bench_cmd)) {
            cmd_bench(bn);
        }
        return 0;
    } catch (const NumericError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 2;
    } catch (const ValueError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const ShapeError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 2;
    }
}

}  // namespace npstream
