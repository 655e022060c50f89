#pragma once

#include <cstdint>
#include <type_traits>
#include <utility>
#include <vector>

#include "npstream/tensor.hpp"

namespace npstream {

// ============================================================================
// Transformer building blocks: multi-head attention, pre-norm residual
// blocks, causal masks, and an append-only KV cache for incremental context
// extension.
//
// Score accounting: attention entry points accept an optional counter and add
// heads * n_q * n_k to it (one unit per query-key score per head). Streaming
// sessions point this at either their conditioning or querying tally.
// ============================================================================

// Split score tally: context conditioning work vs per-query work.
struct AttnCounter {
    std::uint64_t cond = 0;
    std::uint64_t query = 0;
};

template <class T>
struct MlpParamsT {
    std::vector<TensorT<T>> w;  // affine weights, (in x out)
    std::vector<TensorT<T>> b;  // biases, (1 x out)
};

template <class T>
struct AttentionParamsT {
    int heads = 8;
    i64 qk_dim = 16;  // per-head query/key width
    i64 v_dim = 16;   // per-head value width
    TensorT<T> w_q, w_k;  // (d_model, heads*qk_dim), no bias
    TensorT<T> w_v;       // (d_model, heads*v_dim), no bias
    TensorT<T> w_o;       // (heads*v_dim, d_model)
    TensorT<T> b_o;       // (1, d_model)
};

template <class T>
struct BlockParamsT {
    AttentionParamsT<T> attn;
    TensorT<T> ln1_g, ln1_b;  // norm in front of attention
    TensorT<T> ln2_g, ln2_b;  // norm in front of the MLP
    MlpParamsT<T> mlp;        // d_model -> hidden -> d_model
};

using MlpParams = MlpParamsT<double>;
using AttentionParams = AttentionParamsT<double>;
using BlockParams = BlockParamsT<double>;

// ---------------------------------------------------------------------------
// Construction / parameter enumeration
// ---------------------------------------------------------------------------

template <class T = double>
MlpParamsT<T> make_mlp(const std::vector<i64>& dims, Rng& rng) {
    if (dims.size() < 2) throw ValueError("make_mlp: need at least in/out dims");
    MlpParamsT<T> p;
    for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
        p.w.push_back(glorot<T>(dims[i], dims[i + 1], rng));
        p.b.push_back(TensorT<T>::zeros({1, dims[i + 1]}));
    }
    return p;
}

template <class T = double>
AttentionParamsT<T> make_attention(i64 d_model, int heads, i64 qk_dim, i64 v_dim, Rng& rng) {
    if (heads <= 0 || qk_dim <= 0 || v_dim <= 0) throw ValueError("make_attention: bad dims");
    AttentionParamsT<T> p;
    p.heads = heads;
    p.qk_dim = qk_dim;
    p.v_dim = v_dim;
    p.w_q = glorot<T>(d_model, heads * qk_dim, rng);
    p.w_k = glorot<T>(d_model, heads * qk_dim, rng);
    p.w_v = glorot<T>(d_model, heads * v_dim, rng);
    p.w_o = glorot<T>(heads * v_dim, d_model, rng);
    p.b_o = TensorT<T>::zeros({1, d_model});
    return p;
}

template <class T = double>
BlockParamsT<T> make_block(i64 d_model, int heads, i64 qk_dim, i64 v_dim, i64 mlp_hidden, Rng& rng) {
    BlockParamsT<T> p;
    p.attn = make_attention<T>(d_model, heads, qk_dim, v_dim, rng);
    p.ln1_g = TensorT<T>::ones({d_model});
    p.ln1_b = TensorT<T>::zeros({d_model});
    p.ln2_g = TensorT<T>::ones({d_model});
    p.ln2_b = TensorT<T>::zeros({d_model});
    p.mlp = make_mlp<T>({d_model, mlp_hidden, d_model}, rng);
    return p;
}

template <class T>
using NamedParams = std::vector<std::pair<std::string, TensorT<T>*>>;

template <class T>
void collect_params(MlpParamsT<T>& p, const std::string& prefix, NamedParams<T>& out) {
    for (std::size_t i = 0; i < p.w.size(); ++i) {
        out.emplace_back(prefix + ".w" + std::to_string(i), &p.w[i]);
        out.emplace_back(prefix + ".b" + std::to_string(i), &p.b[i]);
    }
}

template <class T>
void collect_params(AttentionParamsT<T>& p, const std::string& prefix, NamedParams<T>& out) {
    out.emplace_back(prefix + ".wq", &p.w_q);
    out.emplace_back(prefix + ".wk", &p.w_k);
    out.emplace_back(prefix + ".wv", &p.w_v);
    out.emplace_back(prefix + ".wo", &p.w_o);
    out.emplace_back(prefix + ".bo", &p.b_o);
}

template <class T>
void collect_params(BlockParamsT<T>& p, const std::string& prefix, NamedParams<T>& out) {
    collect_params(p.attn, prefix + ".attn", out);
    out.emplace_back(prefix + ".ln1_g", &p.ln1_g);
    out.emplace_back(prefix + ".ln1_b", &p.ln1_b);
    out.emplace_back(prefix + ".ln2_g", &p.ln2_g);
    out.emplace_back(prefix + ".ln2_b", &p.ln2_b);
    collect_params(p.mlp, prefix + ".mlp", out);
}

// ---------------------------------------------------------------------------
// Masks
// ---------------------------------------------------------------------------

// Square causal mask: entry (i, j) is 0 when j <= i (self included), -inf
// otherwise.
template <class T = double>
TensorT<T> build_causal_mask(i64 n) {
    if (n <= 0) throw ShapeError("build_causal_mask: n must be positive");
    constexpr T kNegInf = -std::numeric_limits<T>::infinity();
    TensorT<T> m({n, n});
    for (i64 i = 0; i < n; ++i)
        for (i64 j = 0; j < n; ++j) m.at(i, j) = j <= i ? T(0) : kNegInf;
    return m;
}

// Mask for extending a causal stream of n_prev tokens by m more: new token i
// may attend every cached token plus new tokens up to and including itself.
template <class T = double>
TensorT<T> build_extension_mask(i64 n_prev, i64 m) {
    if (m <= 0 || n_prev < 0) throw ShapeError("build_extension_mask: bad sizes");
    constexpr T kNegInf = -std::numeric_limits<T>::infinity();
    TensorT<T> mask({m, n_prev + m});
    for (i64 i = 0; i < m; ++i)
        for (i64 j = 0; j < n_prev + m; ++j) mask.at(i, j) = j <= n_prev + i ? T(0) : kNegInf;
    return mask;
}

// Cross mask for dense autoregressive training over a joined stream of n
// points: row r (the target for point r+2, 1-based) attends context columns
// 1..r+1, i.e. strictly earlier points. Shape (n-1, n).
template <class T = double>
TensorT<T> build_dense_cross_mask(i64 n) {
    if (n < 2) throw ShapeError("build_dense_cross_mask: need n >= 2");
    constexpr T kNegInf = -std::numeric_limits<T>::infinity();
    TensorT<T> mask({n - 1, n});
    for (i64 r = 0; r < n - 1; ++r)
        for (i64 j = 0; j < n; ++j) mask.at(r, j) = j <= r ? T(0) : kNegInf;
    return mask;
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

namespace detail {
template <class T>
std::pair<TensorT<T>, TensorT<T>> project_kv(const AttentionParamsT<T>& p, const TensorT<T>& kv_ln,
                                             Tape* tape) {
    return {matmul(kv_ln, p.w_k, tape), matmul(kv_ln, p.w_v, tape)};
}
}  // namespace detail

/**
 * Multi-head scaled dot-product attention against precomputed projected keys
 * and values. K is (n_k, heads*qk_dim), V is (n_k, heads*v_dim); mask, when
 * given, is (n_q, n_k) of 0/-inf and is shared across heads.
 */
template <class T>
TensorT<T> attention_kv(const AttentionParamsT<T>& p, const TensorT<T>& q_in, const TensorT<T>& K,
                        const TensorT<T>& V, const TensorT<std::type_identity_t<T>>* mask = nullptr, Tape* tape = nullptr,
                        std::uint64_t* counter = nullptr) {
    const i64 n_q = q_in.dim(0), n_k = K.dim(0);
    if (K.cols() != p.heads * p.qk_dim || V.cols() != p.heads * p.v_dim)
        throw ShapeError("attention_kv: K/V widths do not match head layout");
    if (mask && (mask->dim(0) != n_q || mask->dim(1) != n_k))
        throw ShapeError("attention_kv: mask must be (n_q, n_k)");
    TensorT<T> Q = matmul(q_in, p.w_q, tape);
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(p.qk_dim));
    std::vector<TensorT<T>> head_outs;
    head_outs.reserve(static_cast<std::size_t>(p.heads));
    for (int h = 0; h < p.heads; ++h) {
        TensorT<T> Qh = slice_cols(Q, h * p.qk_dim, (h + 1) * p.qk_dim, tape);
        TensorT<T> Kh = slice_cols(K, h * p.qk_dim, (h + 1) * p.qk_dim, tape);
        TensorT<T> Vh = slice_cols(V, h * p.v_dim, (h + 1) * p.v_dim, tape);
        TensorT<T> scores = scale(matmul_nt(Qh, Kh, tape), inv_sqrt, tape);
        TensorT<T> weights = masked_softmax(scores, mask, tape);
        head_outs.push_back(matmul(weights, Vh, tape));
    }
    if (counter) *counter += static_cast<std::uint64_t>(p.heads) * static_cast<std::uint64_t>(n_q) *
                             static_cast<std::uint64_t>(n_k);
    TensorT<T> merged = p.heads == 1 ? std::move(head_outs[0]) : concat_cols(head_outs, tape);
    return add_rowvec(matmul(merged, p.w_o, tape), p.b_o, tape);
}

// Full attention: projects keys/values from kv_in, then attends.
template <class T>
TensorT<T> attention(const AttentionParamsT<T>& p, const TensorT<T>& q_in, const TensorT<T>& kv_in,
                     const TensorT<std::type_identity_t<T>>* mask = nullptr, Tape* tape = nullptr,
                     std::uint64_t* counter = nullptr) {
    auto [K, V] = detail::project_kv(p, kv_in, tape);
    return attention_kv(p, q_in, K, V, mask, tape, counter);
}

// Affine-ReLU-...-affine (no activation after the last affine).
template <class T>
TensorT<T> mlp_forward(const MlpParamsT<T>& p, const TensorT<T>& x, Tape* tape = nullptr) {
    if (p.w.empty()) throw ValueError("mlp_forward: uninitialised params");
    TensorT<T> h = x;
    for (std::size_t i = 0; i < p.w.size(); ++i) {
        h = add_rowvec(matmul(h, p.w[i], tape), p.b[i], tape);
        if (i + 1 < p.w.size()) h = relu(h, tape);
    }
    return h;
}

/**
 * Pre-norm residual block:
 *   z   = x_q + Attn(LN1(x_q), LN1(x_kv), mask)
 *   out = z   + MLP(LN2(z))
 * Self-attention is the x_kv == x_q case.
 */
template <class T>
TensorT<T> residual_block(const BlockParamsT<T>& p, const TensorT<T>& x_q, const TensorT<T>& x_kv,
                          const TensorT<std::type_identity_t<T>>* mask = nullptr, Tape* tape = nullptr,
                          std::uint64_t* counter = nullptr) {
    TensorT<T> qn = layer_norm(x_q, p.ln1_g, p.ln1_b, tape);
    TensorT<T> attn_out;
    if (&x_q == &x_kv) {
        attn_out = attention(p.attn, qn, qn, mask, tape, counter);
    } else {
        TensorT<T> kn = layer_norm(x_kv, p.ln1_g, p.ln1_b, tape);
        attn_out = attention(p.attn, qn, kn, mask, tape, counter);
    }
    TensorT<T> z = add(x_q, attn_out, tape);
    TensorT<T> h = mlp_forward(p.mlp, layer_norm(z, p.ln2_g, p.ln2_b, tape), tape);
    return add(z, h, tape);
}

// Cached variant: keys/values come from the cache, queries from x_q.
template <class T>
TensorT<T> residual_block_cached(const BlockParamsT<T>& p, const TensorT<T>& x_q, const TensorT<T>& K,
                                 const TensorT<T>& V, const TensorT<std::type_identity_t<T>>* mask = nullptr,
                                 Tape* tape = nullptr, std::uint64_t* counter = nullptr) {
    TensorT<T> qn = layer_norm(x_q, p.ln1_g, p.ln1_b, tape);
    TensorT<T> z = add(x_q, attention_kv(p.attn, qn, K, V, mask, tape, counter), tape);
    TensorT<T> h = mlp_forward(p.mlp, layer_norm(z, p.ln2_g, p.ln2_b, tape), tape);
    return add(z, h, tape);
}

// ---------------------------------------------------------------------------
// KV cache
// ---------------------------------------------------------------------------

/**
 * Append-only per-layer cache for a causally encoded context stream.
 *
 * self_k/self_v hold the projected keys/values the self-attention stack needs
 * to extend the stream; cross_k/cross_v hold the projected keys/values of the
 * matching cross-attention blocks, computed from each layer's context
 * encodings, so queries never have to touch context representations again.
 * All layers always hold the same number of cached rows, and extending never
 * rewrites an existing row.
 */
template <class T>
struct KVCacheT {
    struct Layer {
        TensorT<T> self_k, self_v;
        TensorT<T> cross_k, cross_v;
    };
    std::vector<Layer> layers;
    i64 n_cached = 0;

    bool empty() const { return n_cached == 0; }
};

using KVCache = KVCacheT<double>;

namespace detail {
template <class T>
void append_rows(TensorT<T>& buf, const TensorT<T>& rows) {
    if (buf.numel() == 0 && buf.shape.empty()) {
        buf = rows;
        return;
    }
    if (buf.cols() != rows.cols()) throw ShapeError("append_rows: column mismatch");
    TensorT<T> out({buf.dim(0) + rows.dim(0), buf.cols()});
    std::copy(buf.data.begin(), buf.data.end(), out.data.begin());
    std::copy(rows.data.begin(), rows.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(buf.numel()));
    buf = std::move(out);
}
}  // namespace detail

/**
 * Extends the cached causal stream by m new embedded tokens (m x d_model).
 * Runs the self-attention stack for the new tokens only: each new token
 * attends to every cached token and to new tokens up to itself. When
 * cross_blocks is non-empty, the matching cross-attention key/value rows are
 * appended as well. Cost per layer-head is m * (n_prev + m) score entries.
 */
template <class T>
void kv_extend(KVCacheT<T>& cache, const std::vector<BlockParamsT<T>>& self_blocks,
               const std::vector<BlockParamsT<T>>& cross_blocks, const TensorT<T>& z_new,
               std::uint64_t* counter = nullptr) {
    if (self_blocks.empty()) throw ValueError("kv_extend: no blocks");
    if (!cross_blocks.empty() && cross_blocks.size() != self_blocks.size())
        throw ValueError("kv_extend: cross/self layer count mismatch");
    if (z_new.rank() != 2 || z_new.dim(0) < 1) throw ShapeError("kv_extend: need (m, d_model) tokens");
    if (cache.layers.empty()) {
        cache.layers.resize(self_blocks.size());
        cache.n_cached = 0;
    }
    if (cache.layers.size() != self_blocks.size()) throw ValueError("kv_extend: cache/blocks layer mismatch");

    const i64 m = z_new.dim(0);
    const i64 n_prev = cache.n_cached;
    TensorT<T> mask;
    const TensorT<T>* mask_ptr = nullptr;
    if (m > 1) {
        // Single-token extension attends everything cached plus itself, so no
        // mask is needed and the unmasked path stays bitwise identical.
        mask = build_extension_mask<T>(n_prev, m);
        mask_ptr = &mask;
    }

    TensorT<T> z = z_new;
    for (std::size_t l = 0; l < self_blocks.size(); ++l) {
        const BlockParamsT<T>& B = self_blocks[l];
        auto& layer = cache.layers[l];
        TensorT<T> qn = layer_norm(z, B.ln1_g, B.ln1_b);
        detail::append_rows(layer.self_k, matmul(qn, B.attn.w_k));
        detail::append_rows(layer.self_v, matmul(qn, B.attn.w_v));
        TensorT<T> attn_out =
            attention_kv(B.attn, qn, layer.self_k, layer.self_v, mask_ptr, nullptr, counter);
        z = add(z, attn_out);
        z = add(z, mlp_forward(B.mlp, layer_norm(z, B.ln2_g, B.ln2_b)));
        if (!cross_blocks.empty()) {
            const BlockParamsT<T>& C = cross_blocks[l];
            TensorT<T> xn = layer_norm(z, C.ln1_g, C.ln1_b);
            detail::append_rows(layer.cross_k, matmul(xn, C.attn.w_k));
            detail::append_rows(layer.cross_v, matmul(xn, C.attn.w_v));
        }
    }
    cache.n_cached = n_prev + m;
}

/**
 * Monolithic context encoding: runs the self-attention stack over all tokens
 * at once (mask = causal for incremental-family semantics, null for full
 * bidirectional encoding). Returns the per-layer outputs [Z_1 .. Z_L].
 */
template <class T>
std::vector<TensorT<T>> encode_context(const std::vector<BlockParamsT<T>>& self_blocks, TensorT<T> z0,
                                       const TensorT<std::type_identity_t<T>>* mask = nullptr, Tape* tape = nullptr,
                                       std::uint64_t* counter = nullptr) {
    std::vector<TensorT<T>> out;
    out.reserve(self_blocks.size());
    TensorT<T> z = std::move(z0);
    for (const auto& B : self_blocks) {
        z = residual_block(B, z, z, mask, tape, counter);
        out.push_back(z);
    }
    return out;
}

// Query path against per-layer context encodings (monolithic form).
template <class T>
TensorT<T> decode_targets(const std::vector<BlockParamsT<T>>& cross_blocks, TensorT<T> zt,
                          const std::vector<TensorT<T>>& z_ctx_layers, const TensorT<std::type_identity_t<T>>* mask = nullptr,
                          Tape* tape = nullptr, std::uint64_t* counter = nullptr) {
    if (cross_blocks.size() != z_ctx_layers.size())
        throw ValueError("decode_targets: layer count mismatch");
    for (std::size_t l = 0; l < cross_blocks.size(); ++l)
        zt = residual_block(cross_blocks[l], zt, z_ctx_layers[l], mask, tape, counter);
    return zt;
}

// Query path against cached cross keys/values (incremental form).
template <class T>
TensorT<T> decode_targets_cached(const std::vector<BlockParamsT<T>>& cross_blocks, TensorT<T> zt,
                                 const KVCacheT<T>& cache, std::uint64_t* counter = nullptr) {
    if (cache.layers.size() != cross_blocks.size())
        throw ValueError("decode_targets_cached: layer count mismatch");
    if (cache.empty()) throw ValueError("decode_targets_cached: empty cache");
    for (std::size_t l = 0; l < cross_blocks.size(); ++l)
        zt = residual_block_cached(cross_blocks[l], zt, cache.layers[l].cross_k, cache.layers[l].cross_v,
                                   static_cast<const TensorT<T>*>(nullptr), nullptr, counter);
    return zt;
}

}  // namespace npstream
