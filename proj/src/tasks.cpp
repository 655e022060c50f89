#include "npstream/tasks.hpp"

#include <algorithm>
#include <cmath>

#include "npstream/error.hpp"

namespace npstream {

namespace {
constexpr double kTwoPi = 6.283185307179586476925286766559;

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

double quantile_sorted(const std::vector<double>& sorted, double q) {
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = static_cast<std::size_t>(std::ceil(pos));
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] * (1.0 - frac) + sorted[hi] * frac;
}
}  // namespace

const char* kernel_family_name(KernelFamily f) {
    switch (f) {
        case KernelFamily::rbf: return "rbf";
        case KernelFamily::matern12: return "matern12";
        case KernelFamily::matern32: return "matern32";
        case KernelFamily::matern52: return "matern52";
        case KernelFamily::periodic: return "periodic";
    }
    return "?";
}

KernelFamily kernel_family_from_string(const std::string& s) {
    if (s == "rbf") return KernelFamily::rbf;
    if (s == "matern12") return KernelFamily::matern12;
    if (s == "matern32") return KernelFamily::matern32;
    if (s == "matern52") return KernelFamily::matern52;
    if (s == "periodic") return KernelFamily::periodic;
    throw ValueError("unknown kernel family '" + s + "'");
}

void KernelSpec::validate() const {
    if (!(lengthscale > 0.0)) throw ValueError("kernel: lengthscale must be positive");
    if (family == KernelFamily::periodic && !(period > 0.0))
        throw ValueError("kernel: period must be positive");
}

double kernel_eval(const KernelSpec& spec, double x, double xp) {
    const double r = std::fabs(x - xp);
    const double l = spec.lengthscale;
    switch (spec.family) {
        case KernelFamily::rbf:
            return std::exp(-r * r / (2.0 * l * l));
        case KernelFamily::matern12:
            return std::exp(-r / l);
        case KernelFamily::matern32: {
            const double a = std::sqrt(3.0) * r / l;
            return (1.0 + a) * std::exp(-a);
        }
        case KernelFamily::matern52: {
            const double a = std::sqrt(5.0) * r / l;
            return (1.0 + a + 5.0 * r * r / (3.0 * l * l)) * std::exp(-a);
        }
        case KernelFamily::periodic: {
            const double s = std::sin(M_PI * r / spec.period);
            return std::exp(-2.0 * s * s / (l * l));
        }
    }
    throw ValueError("kernel_eval: bad family");
}

KernelSpec sample_kernel(KernelFamily family, Rng& rng) {
    KernelSpec spec;
    spec.family = family;
    spec.lengthscale = std::pow(10.0, rng.uniform(std::log10(0.25), 0.0));
    spec.period = 2.0;
    return spec;
}

KernelSpec sample_mixed_kernel(Rng& rng) {
    const KernelFamily families[] = {KernelFamily::rbf, KernelFamily::matern12, KernelFamily::matern32,
                                     KernelFamily::matern52, KernelFamily::periodic};
    return sample_kernel(families[rng.uniform_int(0, 4)], rng);
}

double shift_weight(const ShiftSpec& spec, double t) {
    return sigmoid((t - spec.t0) / (spec.tau + spec.eps));
}

double change_surface_eval(const ShiftSpec& spec, double x, double t, double xp, double tp) {
    const double w = shift_weight(spec, t);
    const double wp = shift_weight(spec, tp);
    return (1.0 - w) * (1.0 - wp) * kernel_eval(spec.k1, x, xp) + w * wp * kernel_eval(spec.k2, x, xp);
}

bool try_cholesky(std::vector<double>& a, i64 n) {
    for (i64 j = 0; j < n; ++j) {
        double d = a[static_cast<std::size_t>(j * n + j)];
        for (i64 k = 0; k < j; ++k) {
            const double v = a[static_cast<std::size_t>(j * n + k)];
            d -= v * v;
        }
        if (!(d > 0.0) || !std::isfinite(d)) return false;
        const double piv = std::sqrt(d);
        a[static_cast<std::size_t>(j * n + j)] = piv;
        for (i64 i = j + 1; i < n; ++i) {
            double s = a[static_cast<std::size_t>(i * n + j)];
            for (i64 k = 0; k < j; ++k)
                s -= a[static_cast<std::size_t>(i * n + k)] * a[static_cast<std::size_t>(j * n + k)];
            a[static_cast<std::size_t>(i * n + j)] = s / piv;
        }
    }
    for (i64 i = 0; i < n; ++i)
        for (i64 j = i + 1; j < n; ++j) a[static_cast<std::size_t>(i * n + j)] = 0.0;
    return true;
}

std::vector<double> cholesky_jittered(std::vector<double> K, i64 n) {
    double jitter = 1e-6;
    for (int attempt = 0; attempt < 3; ++attempt) {
        std::vector<double> a = K;
        for (i64 i = 0; i < n; ++i) a[static_cast<std::size_t>(i * n + i)] += jitter;
        if (try_cholesky(a, n)) return a;
        jitter *= 10.0;
    }
    throw NumericError("cholesky failed after jitter escalation to 1e-4");
}

std::vector<double> build_gram(const KernelSpec& spec, const std::vector<double>& xs) {
    const i64 n = static_cast<i64>(xs.size());
    std::vector<double> K(static_cast<std::size_t>(n * n));
    for (i64 i = 0; i < n; ++i)
        for (i64 j = 0; j <= i; ++j) {
            const double v = kernel_eval(spec, xs[static_cast<std::size_t>(i)],
                                         xs[static_cast<std::size_t>(j)]);
            K[static_cast<std::size_t>(i * n + j)] = v;
            K[static_cast<std::size_t>(j * n + i)] = v;
        }
    return K;
}

namespace {
std::vector<double> draw_from_gram(std::vector<double> K, i64 n, double sigma_obs, Rng& rng) {
    const std::vector<double> L = cholesky_jittered(std::move(K), n);
    std::vector<double> eps(static_cast<std::size_t>(n));
    for (auto& e : eps) e = rng.normal();
    std::vector<double> y(static_cast<std::size_t>(n), 0.0);
    for (i64 i = 0; i < n; ++i) {
        double f = 0.0;
        for (i64 j = 0; j <= i; ++j)
            f += L[static_cast<std::size_t>(i * n + j)] * eps[static_cast<std::size_t>(j)];
        y[static_cast<std::size_t>(i)] = f;
    }
    if (sigma_obs > 0.0)
        for (auto& v : y) v += sigma_obs * rng.normal();
    return y;
}
}  // namespace

std::vector<double> gp_draw(const KernelSpec& spec, const std::vector<double>& xs, double sigma_obs,
                            Rng& rng) {
    spec.validate();
    if (xs.empty()) throw ValueError("gp_draw: no locations");
    return draw_from_gram(build_gram(spec, xs), static_cast<i64>(xs.size()), sigma_obs, rng);
}

void GpTaskConfig::validate() const {
    if (batch < 1) throw ValueError("gp task: batch must be >= 1");
    if (n_ctx_min < 1 || n_ctx_max < n_ctx_min) throw ValueError("gp task: bad context range");
    if (n_target < 1) throw ValueError("gp task: n_target must be >= 1");
    if (sigma_obs < 0.0) throw ValueError("gp task: sigma_obs must be >= 0");
}

TaskBatch sample_gp_task(const GpTaskConfig& cfg, Rng& rng) {
    cfg.validate();
    const KernelSpec spec = cfg.mixed ? sample_mixed_kernel(rng) : sample_kernel(cfg.family, rng);
    const i64 n_c = rng.uniform_int(cfg.n_ctx_min, cfg.n_ctx_max);
    const i64 n = n_c + cfg.n_target;

    TaskBatch task;
    task.xc = Tensor({cfg.batch, n_c, 1});
    task.yc = Tensor({cfg.batch, n_c, 1});
    task.xt = Tensor({cfg.batch, cfg.n_target, 1});
    task.yt = Tensor({cfg.batch, cfg.n_target, 1});
    for (i64 b = 0; b < cfg.batch; ++b) {
        std::vector<double> xs(static_cast<std::size_t>(n));
        for (auto& x : xs) x = rng.uniform(-2.0, 2.0);
        const std::vector<double> ys = gp_draw(spec, xs, cfg.sigma_obs, rng);
        for (i64 i = 0; i < n_c; ++i) {
            task.xc.at(b, i, 0) = xs[static_cast<std::size_t>(i)];
            task.yc.at(b, i, 0) = ys[static_cast<std::size_t>(i)];
        }
        for (i64 i = 0; i < cfg.n_target; ++i) {
            task.xt.at(b, i, 0) = xs[static_cast<std::size_t>(n_c + i)];
            task.yt.at(b, i, 0) = ys[static_cast<std::size_t>(n_c + i)];
        }
    }
    return task;
}

StreamTask sample_gp_stream(const KernelSpec& spec, i64 n, double sigma_obs, Rng& rng) {
    if (n < 1) throw ValueError("gp stream: need at least one point");
    std::vector<double> xs(static_cast<std::size_t>(n));
    for (auto& x : xs) x = rng.uniform(-2.0, 2.0);
    const std::vector<double> ys = gp_draw(spec, xs, sigma_obs, rng);
    StreamTask s;
    s.x = Tensor({n, 1});
    s.y = Tensor({n, 1});
    for (i64 i = 0; i < n; ++i) {
        s.x.at(i, 0) = xs[static_cast<std::size_t>(i)];
        s.y.at(i, 0) = ys[static_cast<std::size_t>(i)];
    }
    return s;
}

void ShiftStreamConfig::validate() const {
    if (n_points < 2) throw ValueError("shift stream: need at least two points");
    if (tau < 0.0) throw ValueError("shift stream: tau must be >= 0");
    if (sigma_obs < 0.0) throw ValueError("shift stream: sigma_obs must be >= 0");
}

StreamTask sample_shift_stream(const ShiftStreamConfig& cfg, Rng& rng) {
    cfg.validate();
    const KernelFamily family =
        cfg.mixed ? sample_mixed_kernel(rng).family : cfg.family;
    ShiftSpec spec;
    spec.k1 = sample_kernel(family, rng);
    spec.k2 = sample_kernel(family, rng);
    spec.t0 = cfg.t0;
    spec.tau = cfg.tau;

    const i64 n = cfg.n_points;
    std::vector<double> xs(static_cast<std::size_t>(n));
    for (auto& x : xs) x = rng.uniform(-2.0, 2.0);
    std::vector<double> K(static_cast<std::size_t>(n * n));
    for (i64 i = 0; i < n; ++i)
        for (i64 j = 0; j <= i; ++j) {
            const double v =
                change_surface_eval(spec, xs[static_cast<std::size_t>(i)], static_cast<double>(i + 1),
                                    xs[static_cast<std::size_t>(j)], static_cast<double>(j + 1));
            K[static_cast<std::size_t>(i * n + j)] = v;
            K[static_cast<std::size_t>(j * n + i)] = v;
        }
    const std::vector<double> ys = draw_from_gram(std::move(K), n, cfg.sigma_obs, rng);

    StreamTask s;
    s.x = Tensor({n, 1});
    s.y = Tensor({n, 1});
    for (i64 i = 0; i < n; ++i) {
        s.x.at(i, 0) = xs[static_cast<std::size_t>(i)];
        s.y.at(i, 0) = ys[static_cast<std::size_t>(i)];
    }
    return s;
}

TabularMlpSpec sample_tabular_spec(Rng& rng) {
    TabularMlpSpec spec;
    const double depth_mean = rng.log_uniform(1.0, 6.0);
    const double depth_std = rng.log_uniform(1.0, 6.0);
    spec.depth = static_cast<i64>(std::llround(rng.truncated_normal(depth_mean, depth_std, 2.0)));
    const double width_mean = rng.log_uniform(5.0, 130.0);
    const double width_std = rng.log_uniform(5.0, 130.0);
    spec.width = static_cast<i64>(std::llround(rng.truncated_normal(width_mean, width_std, 4.0)));
    spec.activation = static_cast<int>(rng.uniform_int(0, 4));
    return spec;
}

void TabularTaskConfig::validate() const {
    if (batch < 1) throw ValueError("tabular task: batch must be >= 1");
    if (n_ctx_min < 1 || n_ctx_max < n_ctx_min) throw ValueError("tabular task: bad context range");
    if (n_target < 1) throw ValueError("tabular task: n_target must be >= 1");
    if (d_x < 1) throw ValueError("tabular task: d_x must be >= 1");
}

namespace {
double apply_activation(int kind, double v) {
    switch (kind) {
        case 0: return std::max(0.0, v);
        case 1: return std::tanh(v);
        case 2: return sigmoid(v);
        case 3: return v >= 0.0 ? v : std::expm1(v);
        default: return v;
    }
}

// One dataset of n points: z-scored active features (padded with zeros up to
// d_x) plus scaled targets. Returns false when the target column degenerates.
bool generate_tabular_dataset(i64 n, i64 d_x, Rng& rng, std::vector<double>& X,
                              std::vector<double>& Y) {
    const i64 d_active = rng.uniform_int(1, d_x);
    const TabularMlpSpec spec = sample_tabular_spec(rng);

    std::vector<i64> dims;
    dims.push_back(d_active);
    for (i64 l = 0; l + 1 < spec.depth; ++l) dims.push_back(spec.width);
    dims.push_back(1);
    std::vector<std::vector<double>> weights, biases;
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
        const i64 fan_in = dims[l], fan_out = dims[l + 1];
        std::vector<double> w(static_cast<std::size_t>(fan_in * fan_out));
        const double scale = 1.0 / std::sqrt(static_cast<double>(fan_in));
        for (auto& v : w) v = rng.normal() * scale;
        std::vector<double> b(static_cast<std::size_t>(fan_out));
        for (auto& v : b) v = rng.normal() * 0.1;
        weights.push_back(std::move(w));
        biases.push_back(std::move(b));
    }

    std::vector<double> feats(static_cast<std::size_t>(n * d_active));
    for (auto& v : feats) v = rng.normal();

    std::vector<double> y(static_cast<std::size_t>(n));
    for (i64 i = 0; i < n; ++i) {
        std::vector<double> h(feats.begin() + i * d_active, feats.begin() + (i + 1) * d_active);
        for (std::size_t l = 0; l < weights.size(); ++l) {
            const i64 fan_in = dims[l], fan_out = dims[l + 1];
            std::vector<double> next(static_cast<std::size_t>(fan_out));
            for (i64 o = 0; o < fan_out; ++o) {
                double acc = biases[l][static_cast<std::size_t>(o)];
                for (i64 k = 0; k < fan_in; ++k)
                    acc += h[static_cast<std::size_t>(k)] *
                           weights[l][static_cast<std::size_t>(k * fan_out + o)];
                next[static_cast<std::size_t>(o)] = acc;
            }
            if (l + 1 < weights.size())
                for (auto& v : next) v = apply_activation(spec.activation, v);
            h = std::move(next);
        }
        y[static_cast<std::size_t>(i)] = h[0];
    }

    // IQR clip with factor 3.
    std::vector<double> sorted = y;
    std::sort(sorted.begin(), sorted.end());
    const double q1 = quantile_sorted(sorted, 0.25);
    const double q3 = quantile_sorted(sorted, 0.75);
    const double iqr = q3 - q1;
    const double lo = q1 - 3.0 * iqr, hi = q3 + 3.0 * iqr;
    for (auto& v : y) v = std::clamp(v, lo, hi);

    // Randomised target scaling.
    const auto scaling = static_cast<TargetScaling>(rng.uniform_int(0, 3));
    double m = 0.0;
    for (double v : y) m += v;
    m /= static_cast<double>(n);
    double var = 0.0;
    for (double v : y) var += (v - m) * (v - m);
    var /= static_cast<double>(n);
    if (var < 1e-12) return false;
    sorted = y;
    std::sort(sorted.begin(), sorted.end());
    switch (scaling) {
        case TargetScaling::zscore: {
            const double sd = std::sqrt(var);
            for (auto& v : y) v = (v - m) / sd;
            break;
        }
        case TargetScaling::minmax: {
            const double ymin = sorted.front(), ymax = sorted.back();
            if (ymax - ymin < 1e-12) return false;
            for (auto& v : y) v = (v - ymin) / (ymax - ymin);
            break;
        }
        case TargetScaling::maxabs: {
            double ma = 0.0;
            for (double v : y) ma = std::max(ma, std::fabs(v));
            if (ma < 1e-12) return false;
            for (auto& v : y) v /= ma;
            break;
        }
        case TargetScaling::robust: {
            const double med = quantile_sorted(sorted, 0.5);
            const double riqr = quantile_sorted(sorted, 0.75) - quantile_sorted(sorted, 0.25);
            if (riqr < 1e-12) return false;
            for (auto& v : y) v = (v - med) / riqr;
            break;
        }
    }

    // Per-column z-score, then pad to d_x.
    X.assign(static_cast<std::size_t>(n * d_x), 0.0);
    for (i64 c = 0; c < d_active; ++c) {
        double cm = 0.0;
        for (i64 i = 0; i < n; ++i) cm += feats[static_cast<std::size_t>(i * d_active + c)];
        cm /= static_cast<double>(n);
        double cv = 0.0;
        for (i64 i = 0; i < n; ++i) {
            const double d = feats[static_cast<std::size_t>(i * d_active + c)] - cm;
            cv += d * d;
        }
        cv /= static_cast<double>(n);
        const double sd = cv > 0.0 ? std::sqrt(cv) : 1.0;
        for (i64 i = 0; i < n; ++i)
            X[static_cast<std::size_t>(i * d_x + c)] =
                (feats[static_cast<std::size_t>(i * d_active + c)] - cm) / sd;
    }
    Y = std::move(y);
    return true;
}
}  // namespace

TaskBatch sample_tabular_task(const TabularTaskConfig& cfg, Rng& rng) {
    cfg.validate();
    const i64 n_c = rng.uniform_int(cfg.n_ctx_min, cfg.n_ctx_max);
    const i64 n = n_c + cfg.n_target;

    TaskBatch task;
    task.xc = Tensor({cfg.batch, n_c, cfg.d_x});
    task.yc = Tensor({cfg.batch, n_c, 1});
    task.xt = Tensor({cfg.batch, cfg.n_target, cfg.d_x});
    task.yt = Tensor({cfg.batch, cfg.n_target, 1});
    for (i64 b = 0; b < cfg.batch; ++b) {
        std::vector<double> X, Y;
        bool ok = false;
        for (int attempt = 0; attempt < 5 && !ok; ++attempt)
            ok = generate_tabular_dataset(n, cfg.d_x, rng, X, Y);
        if (!ok) throw NumericError("tabular sampler: degenerate targets after 5 attempts");
        for (i64 i = 0; i < n_c; ++i) {
            for (i64 c = 0; c < cfg.d_x; ++c)
                task.xc.at(b, i, c) = X[static_cast<std::size_t>(i * cfg.d_x + c)];
            task.yc.at(b, i, 0) = Y[static_cast<std::size_t>(i)];
        }
        for (i64 i = 0; i < cfg.n_target; ++i) {
            for (i64 c = 0; c < cfg.d_x; ++c)
                task.xt.at(b, i, c) = X[static_cast<std::size_t>((n_c + i) * cfg.d_x + c)];
            task.yt.at(b, i, 0) = Y[static_cast<std::size_t>(n_c + i)];
        }
    }
    return task;
}

std::vector<double> fourier_encode(double x, double lambda_min, double lambda_max, i64 D) {
    if (D < 2 || D % 2 != 0) throw ValueError("fourier_encode: D must be even and >= 2");
    if (!(lambda_min > 0.0) || !(lambda_max > lambda_min))
        throw ValueError("fourier_encode: need 0 < lambda_min < lambda_max");
    const i64 half = D / 2;
    std::vector<double> out(static_cast<std::size_t>(D));
    for (i64 i = 0; i < half; ++i) {
        const double lam =
            half == 1 ? lambda_min
                      : std::exp(std::log(lambda_min) + static_cast<double>(i) *
                                                            (std::log(lambda_max) - std::log(lambda_min)) /
                                                            static_cast<double>(half - 1));
        out[static_cast<std::size_t>(2 * i)] = std::cos(kTwoPi * x / lam);
        out[static_cast<std::size_t>(2 * i + 1)] = std::sin(kTwoPi * x / lam);
    }
    return out;
}

Tensor fourier_encode_matrix(const Tensor& X, double lambda_min, double lambda_max, i64 D) {
    if (X.rank() != 2) throw ShapeError("fourier_encode_matrix: need (n, d)");
    const i64 n = X.dim(0), d = X.dim(1);
    Tensor out({n, d * D});
    for (i64 i = 0; i < n; ++i)
        for (i64 c = 0; c < d; ++c) {
            const auto enc = fourier_encode(X.at(i, c), lambda_min, lambda_max, D);
            for (i64 k = 0; k < D; ++k) out.at(i, c * D + k) = enc[static_cast<std::size_t>(k)];
        }
    return out;
}

OnlineNormalizer::OnlineNormalizer(i64 dim, double clip) : dim_(dim), clip_(clip) {
    if (dim < 1) throw ValueError("normalizer: dim must be >= 1");
    if (!(clip > 0.0)) throw ValueError("normalizer: clip must be positive");
    mean_.assign(static_cast<std::size_t>(dim), 0.0);
    m2_.assign(static_cast<std::size_t>(dim), 0.0);
}

void OnlineNormalizer::update(const std::vector<double>& x) {
    if (static_cast<i64>(x.size()) != dim_) throw ShapeError("normalizer: dim mismatch");
    ++n_;
    for (i64 j = 0; j < dim_; ++j) {
        const double v = x[static_cast<std::size_t>(j)];
        const double delta = v - mean_[static_cast<std::size_t>(j)];
        mean_[static_cast<std::size_t>(j)] += delta / static_cast<double>(n_);
        m2_[static_cast<std::size_t>(j)] += delta * (v - mean_[static_cast<std::size_t>(j)]);
    }
}

double OnlineNormalizer::mean(i64 j) const { return mean_[static_cast<std::size_t>(j)]; }

double OnlineNormalizer::variance(i64 j) const {
    return n_ > 0 ? m2_[static_cast<std::size_t>(j)] / static_cast<double>(n_) : 0.0;
}

std::vector<double> OnlineNormalizer::normalize(const std::vector<double>& x) const {
    if (static_cast<i64>(x.size()) != dim_) throw ShapeError("normalizer: dim mismatch");
    std::vector<double> out(x.size());
    for (i64 j = 0; j < dim_; ++j) {
        const double var = variance(j);
        const double sd = var > 0.0 ? std::sqrt(var) : 1.0;
        const double z = (x[static_cast<std::size_t>(j)] - mean_[static_cast<std::size_t>(j)]) / sd;
        out[static_cast<std::size_t>(j)] = std::clamp(z, -clip_, clip_);
    }
    return out;
}

std::vector<double> OnlineNormalizer::normalize_then_update(const std::vector<double>& x) {
    std::vector<double> out = normalize(x);
    update(x);
    return out;
}

}  // namespace npstream
