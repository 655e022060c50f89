#pragma once

#include <string>
#include <vector>

#include "npstream/models.hpp"
#include "npstream/tensor.hpp"

namespace npstream {

// ============================================================================
// Synthetic task generation: GP regression over five stationary kernels (plus
// a mixed-family sampler and a change-surface kernel for distribution-shift
// streams), a random-MLP tabular prior, Fourier feature encoding, and an
// online feature normaliser for streaming data.
// ============================================================================

enum class KernelFamily { rbf, matern12, matern32, matern52, periodic };

const char* kernel_family_name(KernelFamily f);
KernelFamily kernel_family_from_string(const std::string& s);

struct KernelSpec {
    KernelFamily family = KernelFamily::rbf;
    double lengthscale = 1.0;
    double period = 2.0;  // periodic only

    void validate() const;
};

// Stationary kernel value k(x, x'); k(x, x) = 1 for every family.
double kernel_eval(const KernelSpec& spec, double x, double xp);

// Lengthscale is sampled log-uniformly: log10(l) ~ U[log10(0.25), 0].
KernelSpec sample_kernel(KernelFamily family, Rng& rng);

// Uniform over the five families, then hyperparameters for the drawn family.
KernelSpec sample_mixed_kernel(Rng& rng);

// ---------------------------------------------------------------------------
// Change-surface kernel: blends k1 into k2 over an observation index t.
//   k_cs((x,t),(x',t')) = (1-w(t))(1-w(t')) k1(x,x') + w(t) w(t') k2(x,x')
//   w(t) = sigmoid((t - t0) / (tau + eps))
// ---------------------------------------------------------------------------

struct ShiftSpec {
    KernelSpec k1, k2;
    double t0 = 20.0;
    double tau = 10.0;
    double eps = 1e-8;
};

double shift_weight(const ShiftSpec& spec, double t);
double change_surface_eval(const ShiftSpec& spec, double x, double t, double xp, double tp);

// ---------------------------------------------------------------------------
// Dense linear algebra for exact GP draws
// ---------------------------------------------------------------------------

// In-place lower Cholesky of a row-major symmetric matrix; the upper triangle
// is zeroed on success. Returns false if a pivot is non-positive.
bool try_cholesky(std::vector<double>& a, i64 n);

// Cholesky of K + jitter*I with escalation 1e-6 -> 1e-5 -> 1e-4; throws
// NumericError when all three fail.
std::vector<double> cholesky_jittered(std::vector<double> K, i64 n);

std::vector<double> build_gram(const KernelSpec& spec, const std::vector<double>& xs);

// One exact GP draw at the given locations: f = L eps, y = f + sigma_obs nu.
// Consumes xs.size() normals for f, then xs.size() for the observation noise.
std::vector<double> gp_draw(const KernelSpec& spec, const std::vector<double>& xs, double sigma_obs,
                            Rng& rng);

// ---------------------------------------------------------------------------
// Task samplers
// ---------------------------------------------------------------------------

struct GpTaskConfig {
    i64 batch = 16;
    i64 n_ctx_min = 1;
    i64 n_ctx_max = 64;  // N_c ~ U[n_ctx_min, n_ctx_max], shared across the batch
    i64 n_target = 128;
    double sigma_obs = 0.1;
    bool mixed = false;                         // draw the family per batch
    KernelFamily family = KernelFamily::rbf;    // used when mixed is false

    void validate() const;
};

// One training batch: a single kernel draw and a single N_c for the whole
// batch, fresh x ~ U[-2,2] and an exact GP draw per task.
TaskBatch sample_gp_task(const GpTaskConfig& cfg, Rng& rng);

// A joined stream (x_i, y_i) in arrival order, for autoregressive evaluation.
struct StreamTask {
    Tensor x;  // (n, d_x)
    Tensor y;  // (n, d_y)

    i64 size() const { return x.rank() == 2 ? x.dim(0) : 0; }
};

// Stationary GP stream of n points.
StreamTask sample_gp_stream(const KernelSpec& spec, i64 n, double sigma_obs, Rng& rng);

struct ShiftStreamConfig {
    i64 n_points = 64;
    double t0 = 20.0;
    double tau = 10.0;
    double sigma_obs = 0.1;
    bool mixed = true;                        // family per stream, shared by k1/k2
    KernelFamily family = KernelFamily::rbf;  // used when mixed is false

    void validate() const;
};

// Distribution-shift stream: both kernels come from the same family with
// independently sampled hyperparameters; t is the 1-based arrival index.
StreamTask sample_shift_stream(const ShiftStreamConfig& cfg, Rng& rng);

// ---------------------------------------------------------------------------
// Tabular prior: randomly weighted MLPs in the shape of the TabPFN v1
// synthetic pipeline (depth/width truncated normals with log-uniform
// hyperpriors, random activation, IQR-clipped targets, randomised target
// scaling), z-scored features zero-padded to a fixed width.
// ---------------------------------------------------------------------------

struct TabularMlpSpec {
    i64 depth = 2;       // number of affine layers, >= 2
    i64 width = 4;       // hidden width, >= 4
    int activation = 0;  // 0 relu, 1 tanh, 2 sigmoid, 3 elu, 4 identity
};

TabularMlpSpec sample_tabular_spec(Rng& rng);

enum class TargetScaling { zscore, minmax, maxabs, robust };

struct TabularTaskConfig {
    i64 batch = 8;
    i64 n_ctx_min = 10;
    i64 n_ctx_max = 512;
    i64 n_target = 128;
    i64 d_x = 20;  // padded feature width

    void validate() const;
};

TaskBatch sample_tabular_task(const TabularTaskConfig& cfg, Rng& rng);

// ---------------------------------------------------------------------------
// Fourier features
// ---------------------------------------------------------------------------

// Encodes a scalar into D dims as [cos(2 pi x / L_i), sin(2 pi x / L_i)] with
// D/2 wavelengths log-spaced from lambda_min to lambda_max (a single
// wavelength collapses to lambda_min).
std::vector<double> fourier_encode(double x, double lambda_min, double lambda_max, i64 D);

// Column-wise encoding: (n, d) -> (n, d*D).
Tensor fourier_encode_matrix(const Tensor& X, double lambda_min, double lambda_max, i64 D);

// ---------------------------------------------------------------------------
// Online feature normalisation (Welford), emit-then-update, clipped output
// ---------------------------------------------------------------------------

class OnlineNormalizer {
  public:
    explicit OnlineNormalizer(i64 dim, double clip = 5.0);

    void update(const std::vector<double>& x);
    // (x - mean) / std clipped to [-clip, clip]; a feature with zero variance
    // (or no observations yet) normalises with unit std and zero mean shift
    // relative to the running mean.
    std::vector<double> normalize(const std::vector<double>& x) const;
    // Emit with the statistics as they stood before this point, then fold the
    // point in.
    std::vector<double> normalize_then_update(const std::vector<double>& x);

    i64 count() const { return n_; }
    i64 dim() const { return dim_; }
    double mean(i64 j) const;
    double variance(i64 j) const;  // population variance of the points seen

  private:
    i64 dim_;
    double clip_;
    i64 n_ = 0;
    std::vector<double> mean_, m2_;
};

}  // namespace npstream
