#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "npstream/nn_blocks.hpp"
#include "npstream/tensor.hpp"

namespace npstream {

// ============================================================================
// Neural-process families over a shared token format:
//   context token [x, y, 0], target token [x, 0, 1]
// all embedded by one MLP into d_model, decoded to a factorised Gaussian
// (mean raw, variance = softplus(raw) + sigma_min2).
//
//   cnp         mean-pooled context embedding, no attention
//   tnpd        per layer: full self-attention over context, then targets
//               cross-attend to that layer's context encodings
//   lbanp       per layer: latents cross-attend to context embeddings, latent
//               self-attention, targets cross-attend to the latents
//   inctnp      tnpd with causal masking over the context stream; targets
//               cross-attend (unmasked) to the causal encodings, which makes
//               the context state extendable via the KV cache
//   inctnp_seq  same network as inctnp; trained with a dense autoregressive
//               objective over a joined stream (see inctnp_seq_forward)
// ============================================================================

enum class Family { cnp, tnpd, lbanp, inctnp, inctnp_seq };

inline const char* family_name(Family f) {
    switch (f) {
        case Family::cnp: return "cnp";
        case Family::tnpd: return "tnpd";
        case Family::lbanp: return "lbanp";
        case Family::inctnp: return "inctnp";
        case Family::inctnp_seq: return "inctnp_seq";
    }
    return "?";
}

inline Family family_from_string(const std::string& s) {
    if (s == "cnp") return Family::cnp;
    if (s == "tnpd") return Family::tnpd;
    if (s == "lbanp") return Family::lbanp;
    if (s == "inctnp") return Family::inctnp;
    if (s == "inctnp_seq") return Family::inctnp_seq;
    throw ValueError("unknown model family '" + s + "'");
}

struct ModelConfig {
    Family family = Family::inctnp;
    i64 d_x = 1;
    i64 d_y = 1;
    i64 d_model = 128;
    int heads = 8;
    i64 qk_dim = 16;
    i64 v_dim = 16;
    int layers = 5;
    i64 mlp_hidden = 128;    // width of the feed-forward inside each block
    i64 embed_hidden = 128;  // hidden width of the embedder/decoder MLPs
    i64 lbanp_latents = 32;
    double sigma_min2 = 0.0;  // variance floor added after softplus

    i64 token_dim() const { return d_x + d_y + 1; }
    i64 decoder_in() const { return family == Family::cnp ? d_model + d_x : d_model; }

    void validate() const {
        if (d_x < 1 || d_y < 1) throw ValueError("config: d_x/d_y must be >= 1");
        if (d_model < 1 || heads < 1 || qk_dim < 1 || v_dim < 1) throw ValueError("config: bad attention dims");
        if (layers < 1 && family != Family::cnp) throw ValueError("config: layers must be >= 1");
        if (family == Family::lbanp && lbanp_latents < 1) throw ValueError("config: lbanp needs latents");
        if (sigma_min2 < 0.0) throw ValueError("config: sigma_min2 must be >= 0");
        if (mlp_hidden < 1 || embed_hidden < 1) throw ValueError("config: bad MLP widths");
    }
};

template <class T>
struct ModelParamsT {
    ModelConfig cfg;
    MlpParamsT<T> embedder;  // token_dim -> embed_hidden -> embed_hidden -> d_model
    MlpParamsT<T> decoder;   // decoder_in -> embed_hidden -> embed_hidden -> 2*d_y
    std::vector<BlockParamsT<T>> self_blocks;       // tnp families: context stack
    std::vector<BlockParamsT<T>> cross_blocks;      // tnp families: target <- context; lbanp: target <- latents
    std::vector<BlockParamsT<T>> lat_cross_blocks;  // lbanp: latents <- context
    std::vector<BlockParamsT<T>> lat_self_blocks;   // lbanp: latent self-attention
    TensorT<T> latents;                             // lbanp: (lbanp_latents, d_model)
};

using ModelParams = ModelParamsT<double>;

inline ModelParams make_model(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    ModelParams m;
    m.cfg = cfg;
    m.embedder = make_mlp<double>({cfg.token_dim(), cfg.embed_hidden, cfg.embed_hidden, cfg.d_model}, rng);
    m.decoder = make_mlp<double>({cfg.decoder_in(), cfg.embed_hidden, cfg.embed_hidden, 2 * cfg.d_y}, rng);
    const auto block = [&]() {
        return make_block<double>(cfg.d_model, cfg.heads, cfg.qk_dim, cfg.v_dim, cfg.mlp_hidden, rng);
    };
    switch (cfg.family) {
        case Family::cnp:
            break;
        case Family::tnpd:
        case Family::inctnp:
        case Family::inctnp_seq:
            for (int l = 0; l < cfg.layers; ++l) m.self_blocks.push_back(block());
            for (int l = 0; l < cfg.layers; ++l) m.cross_blocks.push_back(block());
            break;
        case Family::lbanp:
            for (int l = 0; l < cfg.layers; ++l) m.lat_cross_blocks.push_back(block());
            for (int l = 0; l < cfg.layers; ++l) m.lat_self_blocks.push_back(block());
            for (int l = 0; l < cfg.layers; ++l) m.cross_blocks.push_back(block());
            m.latents = randn<double>({cfg.lbanp_latents, cfg.d_model}, rng,
                                      1.0 / std::sqrt(static_cast<double>(cfg.d_model)));
            break;
    }
    return m;
}

template <class T>
void collect_params(ModelParamsT<T>& m, NamedParams<T>& out) {
    collect_params(m.embedder, "embedder", out);
    collect_params(m.decoder, "decoder", out);
    for (std::size_t l = 0; l < m.self_blocks.size(); ++l)
        collect_params(m.self_blocks[l], "self." + std::to_string(l), out);
    for (std::size_t l = 0; l < m.lat_cross_blocks.size(); ++l)
        collect_params(m.lat_cross_blocks[l], "lat_cross." + std::to_string(l), out);
    for (std::size_t l = 0; l < m.lat_self_blocks.size(); ++l)
        collect_params(m.lat_self_blocks[l], "lat_self." + std::to_string(l), out);
    for (std::size_t l = 0; l < m.cross_blocks.size(); ++l)
        collect_params(m.cross_blocks[l], "cross." + std::to_string(l), out);
    if (m.latents.numel() > 0) out.emplace_back("latents", &m.latents);
}

template <class T>
ModelParamsT<float> model_to_f32(const ModelParamsT<T>& m) {
    ModelParamsT<float> out;
    out.cfg = m.cfg;
    const auto conv_mlp = [](const MlpParamsT<T>& p) {
        MlpParamsT<float> q;
        for (const auto& w : p.w) q.w.push_back(to_f32(w));
        for (const auto& b : p.b) q.b.push_back(to_f32(b));
        return q;
    };
    const auto conv_block = [&](const BlockParamsT<T>& p) {
        BlockParamsT<float> q;
        q.attn.heads = p.attn.heads;
        q.attn.qk_dim = p.attn.qk_dim;
        q.attn.v_dim = p.attn.v_dim;
        q.attn.w_q = to_f32(p.attn.w_q);
        q.attn.w_k = to_f32(p.attn.w_k);
        q.attn.w_v = to_f32(p.attn.w_v);
        q.attn.w_o = to_f32(p.attn.w_o);
        q.attn.b_o = to_f32(p.attn.b_o);
        q.ln1_g = to_f32(p.ln1_g);
        q.ln1_b = to_f32(p.ln1_b);
        q.ln2_g = to_f32(p.ln2_g);
        q.ln2_b = to_f32(p.ln2_b);
        q.mlp = conv_mlp(p.mlp);
        return q;
    };
    out.embedder = conv_mlp(m.embedder);
    out.decoder = conv_mlp(m.decoder);
    for (const auto& b : m.self_blocks) out.self_blocks.push_back(conv_block(b));
    for (const auto& b : m.cross_blocks) out.cross_blocks.push_back(conv_block(b));
    for (const auto& b : m.lat_cross_blocks) out.lat_cross_blocks.push_back(conv_block(b));
    for (const auto& b : m.lat_self_blocks) out.lat_self_blocks.push_back(conv_block(b));
    if (m.latents.numel() > 0) out.latents = to_f32(m.latents);
    return out;
}

// ---------------------------------------------------------------------------
// Task batches
// ---------------------------------------------------------------------------

// Context points are stored in arrival order; that order is the stream order
// for incremental conditioning and the sequence order for dense training.
template <class T>
struct TaskBatchT {
    TensorT<T> xc, yc;  // (B, N_c, d_x), (B, N_c, d_y)
    TensorT<T> xt, yt;  // (B, N_t, d_x), (B, N_t, d_y)

    i64 batch() const { return xc.rank() == 3 ? xc.dim(0) : 0; }
    i64 n_c() const { return xc.rank() == 3 ? xc.dim(1) : 0; }
    i64 n_t() const { return xt.rank() == 3 ? xt.dim(1) : 0; }

    void validate(i64 d_x, i64 d_y) const {
        if (xc.rank() != 3 || yc.rank() != 3 || xt.rank() != 3)
            throw ShapeError("task batch: tensors must be (B, N, d)");
        if (xc.dim(2) != d_x || xt.dim(2) != d_x) throw ShapeError("task batch: d_x mismatch");
        if (yc.dim(2) != d_y) throw ShapeError("task batch: d_y mismatch");
        if (xc.dim(0) != xt.dim(0) || xc.dim(0) != yc.dim(0)) throw ShapeError("task batch: batch mismatch");
        if (yc.dim(1) != xc.dim(1)) throw ShapeError("task batch: context x/y mismatch");
        if (yt.numel() > 0 && (yt.rank() != 3 || yt.dim(1) != xt.dim(1) || yt.dim(2) != d_y))
            throw ShapeError("task batch: target y mismatch");
    }
};

using TaskBatch = TaskBatchT<double>;

// Copy task b out of a (B, N, d) tensor as a (N, d) matrix.
template <class T>
TensorT<T> task_slice(const TensorT<T>& t, i64 b) {
    if (t.rank() != 3) throw ShapeError("task_slice: expected rank-3 tensor");
    const i64 n = t.dim(1), d = t.dim(2);
    TensorT<T> out({n, d});
    std::copy(t.data.begin() + b * n * d, t.data.begin() + (b + 1) * n * d, out.data.begin());
    return out;
}

template <class T>
TaskBatchT<float> task_to_f32(const TaskBatchT<T>& t) {
    return {to_f32(t.xc), to_f32(t.yc), to_f32(t.xt), to_f32(t.yt)};
}

// ---------------------------------------------------------------------------
// Shared pieces
// ---------------------------------------------------------------------------

template <class T>
struct GaussianPredictionT {
    TensorT<T> mean;
    TensorT<T> var;
};

using GaussianPrediction = GaussianPredictionT<double>;

inline double gaussian_logpdf(double y, double mean, double var) {
    const double d = y - mean;
    return -0.5 * (std::log(2.0 * M_PI * var) + d * d / var);
}

// Token embedding: [x, y, flag] for context (flag 0, y given), [x, 0, flag]
// for targets (flag 1, y omitted).
template <class T>
TensorT<T> embed_points(const ModelParamsT<T>& m, const TensorT<T>& X,
                        const TensorT<std::type_identity_t<T>>* Y, T flag, Tape* tape = nullptr) {
    if (X.rank() != 2 || X.dim(1) != m.cfg.d_x) throw ShapeError("embed_points: X must be (n, d_x)");
    const i64 n = X.dim(0);
    if (n < 1) throw ValueError("embed_points: need at least one point");
    TensorT<T> ycol = Y ? *Y : TensorT<T>::zeros({n, m.cfg.d_y});
    if (ycol.rank() != 2 || ycol.dim(0) != n || ycol.dim(1) != m.cfg.d_y)
        throw ShapeError("embed_points: Y must be (n, d_y)");
    TensorT<T> flags = TensorT<T>::full({n, 1}, flag);
    TensorT<T> tokens = concat_cols<T>({X, ycol, flags}, tape);
    return mlp_forward(m.embedder, tokens, tape);
}

// Decoder head: raw mean plus softplus variance with the configured floor.
template <class T>
GaussianPredictionT<T> decode_gaussian(const ModelParamsT<T>& m, const TensorT<T>& z, Tape* tape = nullptr) {
    TensorT<T> out = mlp_forward(m.decoder, z, tape);
    const i64 d_y = m.cfg.d_y;
    GaussianPredictionT<T> pred;
    pred.mean = slice_cols(out, 0, d_y, tape);
    TensorT<T> raw = slice_cols(out, d_y, 2 * d_y, tape);
    pred.var = add_scalar(softplus(raw, tape), static_cast<T>(m.cfg.sigma_min2), tape);
    return pred;
}

// ---------------------------------------------------------------------------
// Per-task forwards (2D in, 2D out). The batched entry point loops tasks and
// stacks. Context must be non-empty for every family: an unconditioned query
// is refused rather than answered from an undefined state.
// ---------------------------------------------------------------------------

template <class T>
GaussianPredictionT<T> cnp_forward_task(const ModelParamsT<T>& m, const TensorT<T>& Xc, const TensorT<T>& Yc,
                                        const TensorT<T>& Xt, Tape* tape = nullptr) {
    if (Xc.dim(0) < 1) throw ValueError("cnp: empty context");
    TensorT<T> zc = embed_points(m, Xc, &Yc, T(0), tape);
    TensorT<T> pooled = mean_rows(zc, tape);
    TensorT<T> dec_in = concat_cols<T>({repeat_rows(pooled, Xt.dim(0), tape), Xt}, tape);
    return decode_gaussian(m, dec_in, tape);
}

template <class T>
GaussianPredictionT<T> tnpd_forward_task(const ModelParamsT<T>& m, const TensorT<T>& Xc, const TensorT<T>& Yc,
                                         const TensorT<T>& Xt, Tape* tape = nullptr,
                                         AttnCounter* ctr = nullptr) {
    if (Xc.dim(0) < 1) throw ValueError("tnpd: empty context");
    TensorT<T> zc = embed_points(m, Xc, &Yc, T(0), tape);
    auto layers = encode_context(m.self_blocks, std::move(zc), nullptr, tape, ctr ? &ctr->cond : nullptr);
    TensorT<T> zt = embed_points(m, Xt, nullptr, T(1), tape);
    zt = decode_targets(m.cross_blocks, std::move(zt), layers, nullptr, tape, ctr ? &ctr->query : nullptr);
    return decode_gaussian(m, zt, tape);
}

template <class T>
GaussianPredictionT<T> inctnp_forward_task(const ModelParamsT<T>& m, const TensorT<T>& Xc,
                                           const TensorT<T>& Yc, const TensorT<T>& Xt, Tape* tape = nullptr,
                                           AttnCounter* ctr = nullptr) {
    if (Xc.dim(0) < 1) throw ValueError("inctnp: empty context");
    TensorT<T> zc = embed_points(m, Xc, &Yc, T(0), tape);
    TensorT<T> mask = build_causal_mask<T>(Xc.dim(0));
    auto layers = encode_context(m.self_blocks, std::move(zc), &mask, tape, ctr ? &ctr->cond : nullptr);
    TensorT<T> zt = embed_points(m, Xt, nullptr, T(1), tape);
    zt = decode_targets(m.cross_blocks, std::move(zt), layers, nullptr, tape, ctr ? &ctr->query : nullptr);
    return decode_gaussian(m, zt, tape);
}

template <class T>
GaussianPredictionT<T> lbanp_forward_task(const ModelParamsT<T>& m, const TensorT<T>& Xc,
                                          const TensorT<T>& Yc, const TensorT<T>& Xt, Tape* tape = nullptr,
                                          AttnCounter* ctr = nullptr) {
    if (Xc.dim(0) < 1) throw ValueError("lbanp: empty context");
    TensorT<T> zc = embed_points(m, Xc, &Yc, T(0), tape);
    TensorT<T> u = m.latents;
    TensorT<T> zt = embed_points(m, Xt, nullptr, T(1), tape);
    for (std::size_t l = 0; l < m.cross_blocks.size(); ++l) {
        u = residual_block(m.lat_cross_blocks[l], u, zc, nullptr, tape, ctr ? &ctr->cond : nullptr);
        u = residual_block(m.lat_self_blocks[l], u, u, nullptr, tape, ctr ? &ctr->cond : nullptr);
        zt = residual_block(m.cross_blocks[l], zt, u, nullptr, tape, ctr ? &ctr->query : nullptr);
    }
    return decode_gaussian(m, zt, tape);
}

// ---------------------------------------------------------------------------
// Incremental interface (causal families)
// ---------------------------------------------------------------------------

template <class T>
struct IncStateT {
    KVCacheT<T> cache;
};

using IncState = IncStateT<double>;

namespace detail {
inline void require_causal(Family f, const char* what) {
    if (f != Family::inctnp && f != Family::inctnp_seq)
        throw ValueError(std::string(what) + ": model family has no incremental context state");
}
}  // namespace detail

template <class T>
void inctnp_extend(const ModelParamsT<T>& m, IncStateT<T>& state, const TensorT<T>& Xnew,
                   const TensorT<T>& Ynew, std::uint64_t* counter = nullptr) {
    detail::require_causal(m.cfg.family, "inctnp_extend");
    TensorT<T> z = embed_points(m, Xnew, &Ynew, T(0));
    kv_extend(state.cache, m.self_blocks, m.cross_blocks, z, counter);
}

template <class T>
IncStateT<T> inctnp_condition(const ModelParamsT<T>& m, const TensorT<T>& Xc, const TensorT<T>& Yc,
                              std::uint64_t* counter = nullptr) {
    detail::require_causal(m.cfg.family, "inctnp_condition");
    if (Xc.rank() != 2 || Xc.dim(0) < 1) throw ValueError("inctnp_condition: empty context");
    IncStateT<T> state;
    inctnp_extend(m, state, Xc, Yc, counter);
    return state;
}

template <class T>
GaussianPredictionT<T> inctnp_query(const ModelParamsT<T>& m, const IncStateT<T>& state,
                                    const TensorT<T>& Xt, std::uint64_t* counter = nullptr) {
    detail::require_causal(m.cfg.family, "inctnp_query");
    if (state.cache.empty()) throw ValueError("inctnp_query: query against empty context");
    TensorT<T> zt = embed_points(m, Xt, nullptr, T(1));
    zt = decode_targets_cached(m.cross_blocks, std::move(zt), state.cache, counter);
    return decode_gaussian(m, zt, nullptr);
}

// ---------------------------------------------------------------------------
// Batched entry points
// ---------------------------------------------------------------------------

template <class T>
GaussianPredictionT<T> forward(const ModelParamsT<T>& m, const TaskBatchT<T>& task, Tape* tape = nullptr,
                               AttnCounter* ctr = nullptr) {
    task.validate(m.cfg.d_x, m.cfg.d_y);
    const i64 B = task.batch();
    if (B < 1) throw ValueError("forward: empty batch");
    if (task.n_c() < 1) throw ValueError("forward: every family requires a non-empty context");
    if (task.n_t() < 1) throw ValueError("forward: no target points");
    std::vector<TensorT<T>> means(static_cast<std::size_t>(B)), vars(static_cast<std::size_t>(B));
    const auto run_one = [&](i64 b) {
        TensorT<T> Xc = task_slice(task.xc, b), Yc = task_slice(task.yc, b), Xt = task_slice(task.xt, b);
        GaussianPredictionT<T> p;
        switch (m.cfg.family) {
            case Family::cnp: p = cnp_forward_task(m, Xc, Yc, Xt, tape); break;
            case Family::tnpd: p = tnpd_forward_task(m, Xc, Yc, Xt, tape, ctr); break;
            case Family::lbanp: p = lbanp_forward_task(m, Xc, Yc, Xt, tape, ctr); break;
            case Family::inctnp:
            case Family::inctnp_seq: p = inctnp_forward_task(m, Xc, Yc, Xt, tape, ctr); break;
        }
        means[static_cast<std::size_t>(b)] = std::move(p.mean);
        vars[static_cast<std::size_t>(b)] = std::move(p.var);
    };
    if (tape == nullptr && ctr == nullptr && B > 1) {
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic)
#endif
        for (i64 b = 0; b < B; ++b) run_one(b);
    } else {
        for (i64 b = 0; b < B; ++b) run_one(b);
    }
    return {stack0(means, tape), stack0(vars, tape)};
}

/**
 * Dense autoregressive forward over joined streams (B, N, d): every point is
 * embedded once as a context token (causal self-attention over the full
 * stream) and once as a target token; target i cross-attends to context
 * encodings of points strictly before i at every layer. Predictions cover
 * positions 2..N, so the result is (B, N-1, d_y). Position i's prediction
 * depends on exactly the first i-1 (x, y) pairs, which is what makes this one
 * forward equivalent to N-1 prefix-conditioned queries.
 */
template <class T>
GaussianPredictionT<T> inctnp_seq_forward(const ModelParamsT<T>& m, const TensorT<T>& seq_x,
                                          const TensorT<T>& seq_y, Tape* tape = nullptr,
                                          AttnCounter* ctr = nullptr) {
    if (m.cfg.family != Family::inctnp_seq)
        throw ValueError("inctnp_seq_forward: model family is not inctnp_seq");
    if (seq_x.rank() != 3 || seq_y.rank() != 3) throw ShapeError("inctnp_seq_forward: need (B, N, d)");
    const i64 B = seq_x.dim(0), N = seq_x.dim(1);
    if (seq_y.dim(0) != B || seq_y.dim(1) != N) throw ShapeError("inctnp_seq_forward: x/y mismatch");
    if (N < 2) throw ValueError("inctnp_seq_forward: need at least two points");
    std::vector<TensorT<T>> means(static_cast<std::size_t>(B)), vars(static_cast<std::size_t>(B));
    TensorT<T> ctx_mask = build_causal_mask<T>(N);
    TensorT<T> cross_mask = build_dense_cross_mask<T>(N);
    for (i64 b = 0; b < B; ++b) {
        TensorT<T> X = task_slice(seq_x, b), Y = task_slice(seq_y, b);
        TensorT<T> zc = embed_points(m, X, &Y, T(0), tape);
        auto layers = encode_context(m.self_blocks, std::move(zc), &ctx_mask, tape, ctr ? &ctr->cond : nullptr);
        TensorT<T> zt_all = embed_points(m, X, nullptr, T(1), tape);
        TensorT<T> zt = slice_rows(zt_all, 1, N, tape);
        zt = decode_targets(m.cross_blocks, std::move(zt), layers, &cross_mask, tape,
                            ctr ? &ctr->query : nullptr);
        GaussianPredictionT<T> p = decode_gaussian(m, zt, tape);
        means[static_cast<std::size_t>(b)] = std::move(p.mean);
        vars[static_cast<std::size_t>(b)] = std::move(p.var);
    }
    return {stack0(means, tape), stack0(vars, tape)};
}

}  // namespace npstream
