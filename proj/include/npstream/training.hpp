#pragma once

#include <cstdint>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "npstream/models.hpp"
#include "npstream/tasks.hpp"
#include "npstream/tensor.hpp"

namespace npstream {

enum class Schedule { constant, cosine };

const char* schedule_name(Schedule s);
Schedule schedule_from_string(const std::string& name);

struct TrainConfig {
    i64 epochs = 200;
    i64 samples_per_epoch = 16000;
    i64 batch = 16;
    double lr = 3e-4;
    Schedule schedule = Schedule::cosine;
    double warmup_frac = 0.10;
    double lr_min = 1e-6;
    double clip_norm = 0.5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 1e-2;
    double eps = 1e-8;
    std::uint64_t seed = 0;

    i64 steps_per_epoch() const { return samples_per_epoch / batch; }
    i64 total_steps() const { return epochs * steps_per_epoch(); }
    void validate() const;
};

// Per-parameter Adam moment buffers, parallel to the parameter list order.
struct OptState {
    std::vector<Tensor> m;
    std::vector<Tensor> v;
    i64 step = 0;
};

OptState make_opt_state(const std::vector<Tensor*>& params);

double grad_global_norm(const std::vector<Tensor>& grads);

// Scales grads in place when their global norm exceeds clip_norm (clip_norm
// <= 0 disables). Returns the pre-clip norm.
double clip_gradients(std::vector<Tensor>& grads, double clip_norm);

// Global-norm clip first, then bias-corrected AdamW with decoupled weight
// decay. Returns the pre-clip gradient norm.
double adamw_step(const std::vector<Tensor*>& params, std::vector<Tensor> grads, OptState& st, double lr,
                  const TrainConfig& cfg);

// Linear warmup over the first warmup_frac of steps, then half-cosine decay
// to lr_min. The constant schedule is flat at lr with no warmup.
double lr_at_step(i64 t, i64 total, const TrainConfig& cfg);

// Mean negative Gaussian log-density per scalar target entry.
Tensor nll_loss(const GaussianPrediction& pred, const Tensor& y, Tape* tape = nullptr);

// One causal forward over joined (B, N, d) streams supervising positions
// 2..N; equals the mean of the N-1 prefix-conditioned single-point NLLs.
Tensor dense_seq_loss(const ModelParams& model, const Tensor& seq_x, const Tensor& seq_y, Tape* tape = nullptr);

// Joins context and target points into (B, Nc+Nt, d) streams stored in
// xc/yc, the layout the dense objective consumes. xt/yt are left empty.
TaskBatch join_task_stream(const TaskBatch& task);

struct StepMetrics {
    i64 step = 0;
    double lr = 0.0;
    double loss = 0.0;
    double grad_norm = 0.0;
};

// Data source: deterministic function of the per-step task seed.
using TaskSource = std::function<TaskBatch(std::uint64_t task_seed)>;

std::uint64_t task_seed_for_step(std::uint64_t base_seed, i64 step);

TaskSource make_gp_source(const GpTaskConfig& cfg);
TaskSource make_gp_seq_source(const GpTaskConfig& cfg);
TaskSource make_tabular_source(const TabularTaskConfig& cfg);

void write_metrics_header(std::ostream& os);

// Runs steps_per_epoch optimiser steps. The model family picks the loss:
// inctnp_seq trains on the dense objective over xc/yc streams, everything
// else on forward() + nll_loss against yt. A non-finite loss aborts with the
// offending task seed in the message.
std::vector<StepMetrics> train_epoch(ModelParams& model, const TaskSource& source, const TrainConfig& cfg,
                                     OptState& st, std::ostream* metrics_csv = nullptr);

struct TrainResult {
    std::vector<StepMetrics> history;
};

TrainResult train(ModelParams& model, const TaskSource& source, const TrainConfig& cfg,
                  std::ostream* metrics_csv = nullptr);

}  // namespace npstream
