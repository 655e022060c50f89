#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "npstream/models.hpp"
#include "npstream/rng.hpp"
#include "npstream/streaming.hpp"
#include "npstream/tasks.hpp"

namespace npstream {

/**
 * An autoregressive prediction rule: a deterministic map from an ordered
 * history of (x, y) pairs (possibly empty) and the next input to a Gaussian
 * over the next y. Any fixed conditioning set lives inside the rule.
 */
class PredictionRule {
public:
    virtual ~PredictionRule() = default;

    virtual GaussianPrediction predict_next(const Tensor& hist_x, const Tensor& hist_y,
                                            const Tensor& x_next) const = 0;

    // log q(y_1, ..., y_n) under the given ordering; the default chains
    // predict_next over growing prefixes.
    virtual double joint_logpdf(const Tensor& X, const Tensor& Y) const;

    // Draws y_{1:n} ~ q at inputs X by sampling each step and appending it;
    // returns the draw and its log density.
    virtual std::pair<Tensor, double> sample(const Tensor& X, Rng& rng) const;

    i64 d_y() const { return d_y_; }

protected:
    explicit PredictionRule(i64 d_y) : d_y_(d_y) {}

private:
    i64 d_y_ = 1;
};

// History-blind N(mean, var) per output dimension. Exchangeable by
// construction, so its KL gap is exactly zero.
class IidGaussianRule final : public PredictionRule {
public:
    IidGaussianRule(double mean, double var, i64 d_y = 1);
    GaussianPrediction predict_next(const Tensor& hist_x, const Tensor& hist_y,
                                    const Tensor& x_next) const override;

private:
    double mean_, var_;
};

// Random-walk rule y_{n+1} ~ N(y_n, var) (prior mean on an empty history).
// Deliberately order-dependent.
class MarkovRule final : public PredictionRule {
public:
    MarkovRule(double prior_mean, double var, i64 d_y = 1);
    GaussianPrediction predict_next(const Tensor& hist_x, const Tensor& hist_y,
                                    const Tensor& x_next) const override;

private:
    double prior_mean_, var_;
};

// A neural-process session as a prediction rule: conditioned on a fixed set,
// the history is streamed in before each prediction. With append disabled
// the history is ignored and every prediction is factorised against the
// fixed set alone.
class NpStreamRule final : public PredictionRule {
public:
    NpStreamRule(const ModelParams& model, const Tensor& x_fixed, const Tensor& y_fixed,
                 bool append = true);
    GaussianPrediction predict_next(const Tensor& hist_x, const Tensor& hist_y,
                                    const Tensor& x_next) const override;
    double joint_logpdf(const Tensor& X, const Tensor& Y) const override;
    std::pair<Tensor, double> sample(const Tensor& X, Rng& rng) const override;

private:
    StreamSession base_;
    bool append_;
};

// Stabilised log((1/K) sum exp(v_k)).
double log_mean_exp(const std::vector<double>& values);

std::vector<std::vector<i64>> all_permutations(i64 n);
std::vector<std::vector<i64>> sample_permutations(i64 n, i64 k, Rng& rng);

double joint_ar_logpdf(const PredictionRule& rule, const Tensor& X, const Tensor& Y);

// log q-hat(y_1:n): log-mean-exp of joint_ar_logpdf over permutations of the
// (x, y) pairs. Enumerates all n! permutations when that is both feasible
// (n! <= 720) and no more than requested; otherwise samples n_perm distinct
// permutations without replacement.
double exchangeable_logpdf(const PredictionRule& rule, const Tensor& X, const Tensor& Y, i64 n_perm,
                           Rng& rng);
double exchangeable_logpdf_enumerated(const PredictionRule& rule, const Tensor& X, const Tensor& Y);
double exchangeable_logpdf_sampled(const PredictionRule& rule, const Tensor& X, const Tensor& Y,
                                   i64 n_perm, Rng& rng);

// One evaluation dataset for the KL gap: a fixed conditioning set plus the
// input locations the rule is unrolled over.
struct KlDataset {
    Tensor x_fixed, y_fixed;
    Tensor x;
};

using KlDatasetSampler = std::function<KlDataset(Rng&)>;
using RuleFactory = std::function<std::unique_ptr<PredictionRule>(const Tensor& x_fixed, const Tensor& y_fixed)>;

struct KlGapConfig {
    i64 n_datasets = 2000;
    i64 n_perm_inner = 256;
    i64 n_perm_outer = 128;
    i64 n_mc = 32;
    void validate() const;
    static KlGapConfig desk_scale();
};

struct KLGapEstimate {
    double gap = 0.0;
    double se = 0.0;
    i64 n_perm_inner = 0;
    i64 n_perm_outer = 0;
    i64 n_mc = 0;
    std::vector<double> per_cell;  // one KL estimate per dataset x outer permutation
};

// Monte Carlo estimate of E[D_KL(q || q-hat)]: for each dataset and each
// outer permutation of its points, draws n_mc sequences y ~ q and averages
// log q(y) - log q-hat(y). The reported se is the standard error over the
// dataset x permutation cells.
KLGapEstimate kl_gap(const RuleFactory& make_rule, const KlDatasetSampler& sampler, const KlGapConfig& cfg,
                     Rng& rng);

// GP-stream datasets for the gap metric: n_fixed conditioning points and
// n_eval unroll locations per dataset.
KlDatasetSampler make_gp_kl_sampler(KernelSpec spec, i64 n_fixed, i64 n_eval, double sigma_obs);

struct LlReport {
    std::vector<double> per_task;  // mean log-likelihood per point, one entry per task
    double mean = 0.0;
    double sem = 0.0;
};

// Factorised predictive log-likelihood per task (mean over target points and
// output dims), aggregated with the standard error of the mean over tasks.
LlReport ll_report(const ModelParams& model, const std::vector<TaskBatch>& batches);

}  // namespace npstream
