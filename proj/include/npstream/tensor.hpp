#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "npstream/error.hpp"
#include "npstream/kernels.hpp"
#include "npstream/rng.hpp"

namespace npstream {

using i64 = std::int64_t;
using Shape = std::vector<i64>;

inline i64 shape_numel(const Shape& s) {
    i64 n = 1;
    for (i64 d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

/**
 * Dense row-major tensor. Value semantics: ops never mutate their inputs,
 * they allocate fresh outputs. `node`/`tape_id` tie a tensor to the gradient
 * tape that produced it (-1/0 when detached).
 *
 * The default scalar type is double; float instantiations exist for
 * inference/benchmark paths and cannot be taped.
 */
template <class T>
struct TensorT {
    Shape shape;
    std::vector<T> data;
    std::int32_t node = -1;
    std::uint32_t tape_id = 0;

    TensorT() = default;
    explicit TensorT(Shape s) : shape(std::move(s)), data(static_cast<std::size_t>(shape_numel(shape)), T(0)) {}
    TensorT(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
        if (static_cast<i64>(data.size()) != shape_numel(shape))
            throw ShapeError("tensor: " + shape_str(shape) + " does not hold " +
                             std::to_string(data.size()) + " values");
    }

    static TensorT zeros(Shape s) { return TensorT(std::move(s)); }
    static TensorT full(Shape s, T v) {
        TensorT t(std::move(s));
        for (T& x : t.data) x = v;
        return t;
    }
    static TensorT ones(Shape s) { return full(std::move(s), T(1)); }
    static TensorT scalar(T v) { return TensorT({1}, {v}); }

    i64 numel() const { return static_cast<i64>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    i64 dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
    // Collapse all leading dims: ops that work "per row over the last dim".
    i64 cols() const { return shape.empty() ? 1 : shape.back(); }
    i64 rows() const { return cols() ? numel() / cols() : 0; }

    T& at(i64 i, i64 j) { return data[static_cast<std::size_t>(i * cols() + j)]; }
    T at(i64 i, i64 j) const { return data[static_cast<std::size_t>(i * cols() + j)]; }
    T& at(i64 b, i64 i, i64 j) { return data[static_cast<std::size_t>((b * dim(1) + i) * dim(2) + j)]; }
    T at(i64 b, i64 i, i64 j) const { return data[static_cast<std::size_t>((b * dim(1) + i) * dim(2) + j)]; }

    bool taped() const { return node >= 0; }
    void detach() {
        node = -1;
        tape_id = 0;
    }
};

using Tensor = TensorT<double>;
using TensorF = TensorT<float>;

template <class T>
TensorT<T> randn(Shape s, Rng& rng, T stddev = T(1)) {
    TensorT<T> t(std::move(s));
    for (T& x : t.data) x = static_cast<T>(rng.normal()) * stddev;
    return t;
}

// Glorot-uniform init: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
template <class T = double>
TensorT<T> glorot(i64 fan_in, i64 fan_out, Rng& rng) {
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    TensorT<T> t({fan_in, fan_out});
    for (T& x : t.data) x = static_cast<T>(rng.uniform(-a, a));
    return t;
}

template <class T>
TensorT<float> to_f32(const TensorT<T>& t) {
    TensorF out(t.shape);
    for (std::size_t i = 0; i < t.data.size(); ++i) out.data[i] = static_cast<float>(t.data[i]);
    return out;
}

template <class T>
Tensor to_f64(const TensorT<T>& t) {
    Tensor out(t.shape);
    for (std::size_t i = 0; i < t.data.size(); ++i) out.data[i] = static_cast<double>(t.data[i]);
    return out;
}

/**
 * Reverse-mode gradient tape over double tensors.
 *
 * Explicit by design: ops record onto the tape passed to them, there is no
 * ambient global graph. One forward/backward pair per tape; reset() clears
 * recorded nodes and invalidates every tensor that pointed at them (the tape
 * takes a fresh identity, so stale tensors fail fast instead of silently
 * picking up wrong gradients).
 */
class Tape {
public:
    // Fills parent gradients (same order as the node's parent list). Entries
    // may be left empty for parents that receive no gradient.
    using BackFn = std::function<void(const Tensor& adj, std::vector<Tensor>& pgrads)>;

    Tape() : id_(next_id()) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    std::uint32_t id() const { return id_; }
    std::size_t size() const { return nodes_.size(); }

    // Registers a leaf whose gradient is retained through backward().
    void watch(Tensor& t) {
        check_input(t);
        if (t.taped()) return;
        Node n;
        n.shape = t.shape;
        n.adj = Tensor::zeros(t.shape);
        n.has_adj = true;
        t.node = static_cast<std::int32_t>(nodes_.size());
        t.tape_id = id_;
        nodes_.push_back(std::move(n));
    }

    int emit(const Shape& out_shape, std::vector<int> parents, BackFn back) {
        Node n;
        n.shape = out_shape;
        n.parents = std::move(parents);
        n.back = std::move(back);
        nodes_.push_back(std::move(n));
        return static_cast<int>(nodes_.size() - 1);
    }

    // Rejects tensors recorded on a different tape (or on this tape before a
    // reset). Detached tensors always pass.
    void check_input(const Tensor& t) const {
        if (t.taped() && t.tape_id != id_)
            throw Error("tape: tensor recorded on another tape (or before reset) used here");
    }

    void backward(const Tensor& loss) {
        if (ran_backward_) throw Error("tape: backward already ran; reset() first");
        if (!loss.taped() || loss.tape_id != id_)
            throw Error("tape: loss is not recorded on this tape");
        if (loss.numel() != 1) throw ShapeError("tape: loss must be scalar, got " + shape_str(loss.shape));
        ran_backward_ = true;
        accumulate(loss.node, Tensor::ones({1}));
        for (int id = loss.node; id >= 0; --id) {
            Node& n = nodes_[static_cast<std::size_t>(id)];
            if (!n.has_adj || !n.back) continue;
            std::vector<Tensor> pgrads(n.parents.size());
            n.back(n.adj, pgrads);
            for (std::size_t i = 0; i < n.parents.size(); ++i) {
                if (n.parents[i] >= 0 && pgrads[i].numel() > 0) accumulate(n.parents[i], std::move(pgrads[i]));
            }
            if (id != loss.node) {
                // Interior adjoints are dead once propagated.
                n.adj = Tensor();
                n.has_adj = false;
            }
        }
    }

    bool ran_backward() const { return ran_backward_; }

    const Tensor& grad(const Tensor& t) const {
        if (!ran_backward_) throw Error("tape: grad() before backward()");
        if (!t.taped() || t.tape_id != id_) throw Error("tape: grad() of a tensor not on this tape");
        const Node& n = nodes_[static_cast<std::size_t>(t.node)];
        if (!n.has_adj) throw Error("tape: gradient not retained for this node (only watched leaves keep theirs)");
        return n.adj;
    }

    void reset() {
        nodes_.clear();
        ran_backward_ = false;
        id_ = next_id();
    }

private:
    struct Node {
        Shape shape;
        std::vector<int> parents;
        BackFn back;  // null for leaves
        Tensor adj;
        bool has_adj = false;
    };

    static std::uint32_t next_id() {
        static std::atomic<std::uint32_t> counter{1};
        return counter.fetch_add(1);
    }

    void accumulate(int node, Tensor g) {
        Node& n = nodes_[static_cast<std::size_t>(node)];
        if (g.shape != n.shape)
            throw ShapeError("tape: adjoint shape " + shape_str(g.shape) + " vs node " + shape_str(n.shape));
        if (!n.has_adj) {
            n.adj = std::move(g);
            n.has_adj = true;
        } else {
            for (std::size_t i = 0; i < n.adj.data.size(); ++i) n.adj.data[i] += g.data[i];
        }
    }

    std::vector<Node> nodes_;
    bool ran_backward_ = false;
    std::uint32_t id_ = 0;
};

// ============================================================================
// Ops. Every op validates shapes, checks the output for NaN/Inf, and (double
// only) records its backward onto the tape when any input is taped.
// ============================================================================

namespace detail {

template <class T>
void check_finite(const TensorT<T>& t, const char* op) {
    for (const T v : t.data)
        if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite value in output");
}

template <class T>
void require_same_shape(const TensorT<T>& a, const TensorT<T>& b, const char* op) {
    if (a.shape != b.shape)
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
}

// Returns true when the op should record: tape present and some input taped.
// Also fail-fast checks tape identity of the inputs.
template <class T, class... Ts>
bool taping(Tape* tape, const TensorT<T>& first, const Ts&... rest) {
    if constexpr (std::is_same_v<T, double>) {
        if (!tape) return false;
        bool any = false;
        for (const TensorT<T>* t : {&first, (&rest)...}) {
            tape->check_input(*t);
            any = any || t->taped();
        }
        return any;
    } else {
        if (tape) throw Error("ops: gradient tape supports double tensors only");
        return false;
    }
}

inline void attach(Tensor& out, Tape* tape, std::vector<int> parents, Tape::BackFn back) {
    out.node = static_cast<std::int32_t>(tape->emit(out.shape, std::move(parents), std::move(back)));
    out.tape_id = tape->id();
}

}  // namespace detail

template <class T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b, Tape* tape = nullptr) {
    detail::require_same_shape(a, b, "add");
    TensorT<T> out(a.shape);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = a.data[i] + b.data[i];
    detail::check_finite(out, "add");
    if (detail::taping(tape, a, b)) {
        if constexpr (std::is_same_v<T, double>) {
            detail::attach(out, tape, {a.node, b.node}, [](const Tensor& adj, std::vector<Tensor>& pg) {
                pg[0] = adj;
                pg[1] = adj;
            });
        }
    }
    return out;
}

template <class T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b, Tape* tape = nullptr) {
    detail::require_same_shape(a, b, "sub");
    TensorT<T> out(a.shape);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = a.data[i] - b.data[i];
    detail::check_finite(out, "sub");
    if (detail::taping(tape, a, b)) {
        if constexpr (std::is_same_v<T, double>) {
            detail::attach(out, tape, {a.node, b.node}, [](const Tensor& adj, std::vector<Tensor>& pg) {
                pg[0] = adj;
                Tensor g(adj.shape);
                for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] = -adj.data[i];
                pg[1] = std::move(g);
            });
        }
    }
    return out;
}

template <class T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b, Tape* tape = nullptr) {
    detail::require_same_shape(a, b, "mul");
    TensorT<T> out(a.shape);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = a.data[i] * b.data[i];
    detail::check_finite(out, "mul");
    if (detail::taping(tape, a, b)) {
        if constexpr (std::is_same_v<T, double>) {
            detail::attach(out, tape, {a.node, b.node}, [a, b](const Tensor& adj, std::vector<Tensor>& pg) {
                Tensor ga(adj.shape), gb(adj.shape);
                for (std::size_t i = 0; i < adj.data.size(); ++i) {
                    ga.data[i] = adj.data[i] * b.data[i];
                    gb.data[i] = adj.data[i] * a.data[i];
                }
                pg[0] = std::move(ga);
                pg[1] = std::move(gb);
            });
        }
    }
    return out;
}

template <class T>
TensorT<T> div(const TensorT<T>& a, const TensorT<T>& b, Tape* tape = nullptr) {
    detail::require_same_shape(a, b, "div");
    TensorT<T> out(a.shape);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = a.data[i] / b.data[i];
    detail::check_finite(out, "div");
    if (detail::taping(tape, a, b)) {
        if constexpr (std::is_same_v<T, double>) {
            detail::attach(out, tape, {a.node, b.node}, [a, b](const Tensor& adj, std::vector<Tensor>& pg) {
                Tensor ga(adj.shape), gb(adj.shape);
                for (std::size_t i = 0; i < adj.data.size(); ++i) {
                    const double inv = 1.0 / b.data[i];
                    ga.data[i] = adj.data[i] * inv;
                    gb.data[i] = -adj.data[i] * a.data[i] * inv * inv;
                }
                pg[0] = std::move(ga);
                pg[1] = std::move(gb);
            });
        }
    }
    return out;
}

template <class T>
TensorT<T> scale(const TensorT<T>& a, T c, Tape* tape = nullptr) {
    TensorT<T> out(a.shape);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = a.data[i] * c;
    detail::check_finite(out, "scale");
    if (detail::taping(tape, a)) {
        if constexpr (std::is_same_v<T, double>) {
            detail::attach(out, tape, {a.node}, [c](const Tensor& adj, std::vector<Tensor>& pg) {
                Tensor g(adj.shape);
                for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] = adj.data[i] * c;
                pg[0] = std::move(g);
            });
        }
    }
    return out;
}

template <class T>
TensorT<T> add_scalar(const TensorT<T>& a, T c, Tape* tape = nullptr) {
    TensorT<T> out(a.shape);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = a.data[i] + c;
    detail::check_finite(out, "add_scalar");
    if (detail::taping(tape, a)) {
        if constexpr (std::is_same_v<T, double>) {
            detail::attach(out, tape, {a.node},
                           [](const Tensor& adj, std::vector<Tensor>& pg) { pg[0] = adj; });
        }
    }
    return out;
}

template <class T>
TensorT<T> relu(const TensorT<T>& a, Tape* tape = nullptr) {
    TensorT<T> out(a.shape);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = a.data[i] > T(0) ? a.data[i] : T(0);
    detail::check_finite(out, "relu");
    if (detail::taping(tape, a)) {
        if constexpr (std::is_same_v<T, double>) {
            detail::attach(out, tape, {a.node}, [a](const Tensor& adj, std::vector<Tensor>& pg) {
                Tensor g(adj.shape);
                for (std::size_t i = 0; i < g.data.size(); ++i)
                    g.data[i] = a.data[i] > 0.0 ? adj.data[i] : 0.0;
                pg[0] = std::move(g);
            });
        }
    }
    return out;
}

namespace detail {
template <class T>
T softplus_scalar(T x) {
    // Overflow-safe in both tails: softplus(100) == 100, softplus(-100) stays
    // strictly positive.
    return x > T(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}
}  // namespace detail

template <class T>
TensorT<T> softplus(const TensorT<T>& a, Tape* tape = nullptr) {
    TensorT<T> out(a.shape);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = detail::softplus_scalar(a.data[i]);
    detail::check_finite(out, "softplus");
    if (detail::taping(tape, a)) {
        if constexpr (std::is_same_v<T, double>) {
            detail::attach(out, tape, {a.node}, [a](const Tensor& adj, std::vector<Tensor>& pg) {
                Tensor g(adj.shape);
                for (std::size_t i = 0; i < g.data.size(); ++i) {
                    const double x = a.data[i];
                    const double sig = x > 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
                    g.data[i] = adj.data[i] * sig;
                }
                pg[0] = std::move(g);
            });
        }
    }
    return out;
}

template <class T>
TensorT<T> log(const TensorT<T>& a, Tape* tape = nullptr) {
    TensorT<T> out(a.shape);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = std::log(a.data[i]);
    detail::check_finite(out, "log");
    if (detail::taping(tape, a)) {
        if constexpr (std::is_same_v<T, double>) {
            detail::attach(out, tape, {a.node}, [a](const Tensor& adj, std::vector<Tensor>& pg) {
                Tensor g(adj.shape);
                for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] = adj.data[i] / a.data[i];
                pg[0] = std::move(g);
            });
        }
    }
    return out;
}

namespace detail {
template <class T>
void require_rank2(const TensorT<T>& t, const char* op) {
    if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected rank-2 tensor, got " + shape_str(t.shape));
}
}  // namespace detail

// c = a @ b
template <class T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b, Tape* tape = nullptr) {
    detail::require_rank2(a, "matmul");
    detail::require_rank2(b, "matmul");
    if (a.dim(1) != b.dim(0))
        throw ShapeError("matmul: inner dims " + shape_str(a.shape) + " @ " + shape_str(b.shape));
    const i64 m = a.dim(0), k = a.dim(1), n = b.dim(1);
    TensorT<T> out({m, n});
    kernels::matmul(a.data.data(), b.data.data(), out.data.data(), m, k, n);
    detail::check_finite(out, "matmul");
    if (detail::taping(tape, a, b)) {
        if constexpr (std::is_same_v<T, double>) {
            detail::attach(out, tape, {a.node, b.node},
                           [a, b, m, k, n](const Tensor& adj, std::vector<Tensor>& pg) {
                               Tensor ga({m, k}), gb({k, n});
                               kernels::matmul_nt(adj.data.data(), b.data.data(), ga.data.data(), m, n, k);
                               kernels::matmul_tn(a.data.data(), adj.data.data(), gb.data.data(), m, k, n);
                               pg[0] = std::move(ga);
                               pg[1] = std::move(gb);
                           });
        }
    }
    return out;
}

// c = a @ b^T with b stored (n x k); saves materialising transposes in attention.
template <class T>
TensorT<T> matmul_nt(const TensorT<T>& a, const TensorT<T>& b, Tape* tape = nullptr) {
    detail::require_rank2(a, "matmul_nt");
    detail::require_rank2(b, "matmul_nt");
    if (a.dim(1) != b.dim(1))
        throw ShapeError("matmul_nt: inner dims " + shape_str(a.shape) + " @ " + shape_str(b.shape) + "^T");
    const i64 m = a.dim(0), k = a.dim(1), n = b.dim(0);
    TensorT<T> out({m, n});
    kernels::matmul_nt(a.data.data(), b.data.data(), out.data.data(), m, k, n);
    detail::check_finite(out, "matmul_nt");
    if (detail::taping(tape, a, b)) {
        if constexpr (std::is_same_v<T, double>) {
            detail::attach(out, tape, {a.node, b.node},
                           [a, b, m, k, n](const Tensor& adj, std::vector<Tensor>& pg) {
                               Tensor ga({m, k}), gb({n, k});
                               kernels::matmul(adj.data.data(), b.data.data(), ga.data.data(), m, n, k);
                               kernels::matmul_tn(adj.data.data(), a.data.data(), gb.data.data(), m, n, k);
                               pg[0] = std::move(ga);
                               pg[1] = std::move(gb);
                           });
        }
    }
    return out;
}

/**
 * Row-wise softmax over the last dim of logits + mask. Mask entries are 0
 * (keep) or -inf (drop); the mask is a constant, no gradient flows to it.
 * A fully masked row is a NumericError. Numerically stabilised by per-row
 * max subtraction.
 */
template <class T>
TensorT<T> masked_softmax(const TensorT<T>& logits, const TensorT<T>* mask = nullptr, Tape* tape = nullptr) {
    if (logits.rank() < 1) throw ShapeError("masked_softmax: rank >= 1 required");
    if (mask && mask->shape != logits.shape)
        throw ShapeError("masked_softmax: mask shape " + shape_str(mask->shape) + " vs logits " +
                         shape_str(logits.shape));
    if (mask && mask->taped()) throw Error("masked_softmax: mask must be a constant tensor");
    const i64 rows = logits.rows(), cols = logits.cols();
    TensorT<T> out(logits.shape);
    const i64 bad = kernels::softmax_rows(logits.data.data(), mask ? mask->data.data() : nullptr,
                                          out.data.data(), rows, cols);
    if (bad >= 0) throw NumericError("masked_softmax: fully masked row " + std::to_string(bad));
    detail::check_finite(out, "masked_softmax");
    if (detail::taping(tape, logits)) {
        if constexpr (std::is_same_v<T, double>) {
            detail::attach(out, tape, {logits.node},
                           [out, rows, cols](const Tensor& adj, std::vector<Tensor>& pg) {
                               Tensor g(adj.shape);
                               for (i64 i = 0; i < rows; ++i) {
                                   const double* arow = adj.data.data() + i * cols;
                                   const double* srow = out.data.data() + i * cols;
                                   double dot = 0.0;
                                   for (i64 j = 0; j < cols; ++j) dot += arow[j] * srow[j];
                                   double* grow = g.data.data() + i * cols;
                                   for (i64 j = 0; j < cols; ++j) grow[j] = srow[j] * (arow[j] - dot);
                               }
                               pg[0] = std::move(g);
                           });
        }
    }
    return out;
}

/**
 * Layer norm over the last dim with affine gain/bias. Population variance,
 * eps inside the sqrt. A constant row maps to gain*0 + bias.
 */
template <class T>
TensorT<T> layer_norm(const TensorT<T>& x, const TensorT<T>& gain, const TensorT<T>& bias,
                      Tape* tape = nullptr, T eps = T(1e-5)) {
    const i64 cols = x.cols(), rows = x.rows();
    if (gain.numel() != cols || bias.numel() != cols)
        throw ShapeError("layer_norm: gain/bias must have " + std::to_string(cols) + " entries");
    TensorT<T> out(x.shape);
    kernels::layer_norm_rows(x.data.data(), gain.data.data(), bias.data.data(), out.data.data(), rows,
                             cols, eps);
    detail::check_finite(out, "layer_norm");
    if (detail::taping(tape, x, gain, bias)) {
        if constexpr (std::is_same_v<T, double>) {
            detail::attach(
                out, tape, {x.node, gain.node, bias.node},
                [x, gain, rows, cols, eps](const Tensor& adj, std::vector<Tensor>& pg) {
                    Tensor gx(x.shape), gg(gain.shape), gb(gain.shape);
                    for (i64 i = 0; i < rows; ++i) {
                        const double* xr = x.data.data() + i * cols;
                        const double* ar = adj.data.data() + i * cols;
                        double mean = 0.0;
                        for (i64 j = 0; j < cols; ++j) mean += xr[j];
                        mean /= static_cast<double>(cols);
                        double var = 0.0;
                        for (i64 j = 0; j < cols; ++j) var += (xr[j] - mean) * (xr[j] - mean);
                        var /= static_cast<double>(cols);
                        const double inv = 1.0 / std::sqrt(var + eps);
                        // xhat = (x - mean) * inv; out = xhat * gain + bias
                        double m_dxhat = 0.0, m_dxhat_xhat = 0.0;
                        for (i64 j = 0; j < cols; ++j) {
                            const double xhat = (xr[j] - mean) * inv;
                            const double dxhat = ar[j] * gain.data[static_cast<std::size_t>(j)];
                            m_dxhat += dxhat;
                            m_dxhat_xhat += dxhat * xhat;
                            gg.data[static_cast<std::size_t>(j)] += ar[j] * xhat;
                            gb.data[static_cast<std::size_t>(j)] += ar[j];
                        }
                        m_dxhat /= static_cast<double>(cols);
                        m_dxhat_xhat /= static_cast<double>(cols);
                        double* gxr = gx.data.data() + i * cols;
                        for (i64 j = 0; j < cols; ++j) {
                            const double xhat = (xr[j] - mean) * inv;
                            const double dxhat = ar[j] * gain.data[static_cast<std::size_t>(j)];
                            gxr[j] = inv * (dxhat - m_dxhat - xhat * m_dxhat_xhat);
                        }
                    }
                    pg[0] = std::move(gx);
                    pg[1] = std::move(gg);
                    pg[2] = std::move(gb);
                });
        }
    }
    return out;
}

// Column-concatenate rank-2 tensors with equal row counts.
template <class T>
TensorT<T> concat_cols(const std::vector<TensorT<T>>& parts, Tape* tape = nullptr) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    const i64 rows = parts[0].rows();
    i64 cols = 0;
    for (const auto& p : parts) {
        detail::require_rank2(p, "concat_cols");
        if (p.rows() != rows) throw ShapeError("concat_cols: row counts differ");
        cols += p.cols();
    }
    TensorT<T> out({rows, cols});
    i64 off = 0;
    for (const auto& p : parts) {
        const i64 pc = p.cols();
        for (i64 i = 0; i < rows; ++i)
            for (i64 j = 0; j < pc; ++j) out.data[static_cast<std::size_t>(i * cols + off + j)] = p.at(i, j);
        off += pc;
    }
    detail::check_finite(out, "concat_cols");
    bool any_taped = false;
    if constexpr (std::is_same_v<T, double>) {
        if (tape) {
            for (const auto& p : parts) {
                tape->check_input(p);
                any_taped = any_taped || p.taped();
            }
        }
    } else {
        if (tape) throw Error("ops: gradient tape supports double tensors only");
    }
    if (any_taped) {
        if constexpr (std::is_same_v<T, double>) {
            std::vector<int> parents;
            std::vector<i64> widths;
            for (const auto& p : parts) {
                parents.push_back(p.node);
                widths.push_back(p.cols());
            }
            detail::attach(out, tape, std::move(parents),
                           [widths, rows, cols](const Tensor& adj, std::vector<Tensor>& pg) {
                               i64 off2 = 0;
                               for (std::size_t pi = 0; pi < widths.size(); ++pi) {
                                   Tensor g({rows, widths[pi]});
                                   for (i64 i = 0; i < rows; ++i)
                                       for (i64 j = 0; j < widths[pi]; ++j)
                                           g.at(i, j) = adj.data[static_cast<std::size_t>(i * cols + off2 + j)];
                                   pg[pi] = std::move(g);
                                   off2 += widths[pi];
                               }
                           });
        }
    }
    return out;
}

template <class T>
TensorT<T> slice_cols(const TensorT<T>& a, i64 c0, i64 c1, Tape* tape = nullptr) {
    detail::require_rank2(a, "slice_cols");
    if (c0 < 0 || c1 > a.cols() || c0 >= c1)
        throw ShapeError("slice_cols: bad range [" + std::to_string(c0) + "," + std::to_string(c1) + ")");
    const i64 rows = a.rows(), w = c1 - c0, cols = a.cols();
    TensorT<T> out({rows, w});
    for (i64 i = 0; i < rows; ++i)
        for (i64 j = 0; j < w; ++j) out.at(i, j) = a.at(i, c0 + j);
    if (detail::taping(tape, a)) {
        if constexpr (std::is_same_v<T, double>) {
            Shape ashape = a.shape;
            detail::attach(out, tape, {a.node},
                           [ashape, c0, w, rows, cols](const Tensor& adj, std::vector<Tensor>& pg) {
                               Tensor g(ashape);
                               for (i64 i = 0; i < rows; ++i)
                                   for (i64 j = 0; j < w; ++j)
                                       g.data[static_cast<std::size_t>(i * cols + c0 + j)] = adj.at(i, j);
                               pg[0] = std::move(g);
                           });
        }
    }
    return out;
}

template <class T>
TensorT<T> slice_rows(const TensorT<T>& a, i64 r0, i64 r1, Tape* tape = nullptr) {
    detail::require_rank2(a, "slice_rows");
    if (r0 < 0 || r1 > a.dim(0) || r0 >= r1)
        throw ShapeError("slice_rows: bad range [" + std::to_string(r0) + "," + std::to_string(r1) + ")");
    const i64 cols = a.cols(), h = r1 - r0;
    TensorT<T> out({h, cols});
    for (i64 i = 0; i < h; ++i)
        for (i64 j = 0; j < cols; ++j) out.at(i, j) = a.at(r0 + i, j);
    if (detail::taping(tape, a)) {
        if constexpr (std::is_same_v<T, double>) {
            Shape ashape = a.shape;
            detail::attach(out, tape, {a.node},
                           [ashape, r0, h, cols](const Tensor& adj, std::vector<Tensor>& pg) {
                               Tensor g(ashape);
                               for (i64 i = 0; i < h; ++i)
                                   for (i64 j = 0; j < cols; ++j)
                                       g.data[static_cast<std::size_t>((r0 + i) * cols + j)] = adj.at(i, j);
                               pg[0] = std::move(g);
                           });
        }
    }
    return out;
}

// Mean over rows of a rank-2 tensor -> (1 x cols).
template <class T>
TensorT<T> mean_rows(const TensorT<T>& a, Tape* tape = nullptr) {
    detail::require_rank2(a, "mean_rows");
    const i64 rows = a.dim(0), cols = a.dim(1);
    if (rows == 0) throw ShapeError("mean_rows: empty tensor");
    TensorT<T> out({1, cols});
    for (i64 i = 0; i < rows; ++i)
        for (i64 j = 0; j < cols; ++j) out.data[static_cast<std::size_t>(j)] += a.at(i, j);
    for (i64 j = 0; j < cols; ++j) out.data[static_cast<std::size_t>(j)] /= T(rows);
    detail::check_finite(out, "mean_rows");
    if (detail::taping(tape, a)) {
        if constexpr (std::is_same_v<T, double>) {
            detail::attach(out, tape, {a.node}, [rows, cols](const Tensor& adj, std::vector<Tensor>& pg) {
                Tensor g({rows, cols});
                for (i64 i = 0; i < rows; ++i)
                    for (i64 j = 0; j < cols; ++j) g.at(i, j) = adj.data[static_cast<std::size_t>(j)] / rows;
                pg[0] = std::move(g);
            });
        }
    }
    return out;
}

// Tile a (1 x cols) row n times.
template <class T>
TensorT<T> repeat_rows(const TensorT<T>& a, i64 n, Tape* tape = nullptr) {
    detail::require_rank2(a, "repeat_rows");
    if (a.dim(0) != 1) throw ShapeError("repeat_rows: expected a single row, got " + shape_str(a.shape));
    if (n <= 0) throw ShapeError("repeat_rows: n must be positive");
    const i64 cols = a.dim(1);
    TensorT<T> out({n, cols});
    for (i64 i = 0; i < n; ++i)
        for (i64 j = 0; j < cols; ++j) out.at(i, j) = a.data[static_cast<std::size_t>(j)];
    if (detail::taping(tape, a)) {
        if constexpr (std::is_same_v<T, double>) {
            detail::attach(out, tape, {a.node}, [n, cols](const Tensor& adj, std::vector<Tensor>& pg) {
                Tensor g({1, cols});
                for (i64 i = 0; i < n; ++i)
                    for (i64 j = 0; j < cols; ++j) g.data[static_cast<std::size_t>(j)] += adj.at(i, j);
                pg[0] = std::move(g);
            });
        }
    }
    return out;
}

// Row-wise add of a (1 x cols) bias to every row.
template <class T>
TensorT<T> add_rowvec(const TensorT<T>& a, const TensorT<T>& bias, Tape* tape = nullptr) {
    const i64 cols = a.cols(), rows = a.rows();
    if (bias.numel() != cols) throw ShapeError("add_rowvec: bias must have " + std::to_string(cols) + " entries");
    TensorT<T> out(a.shape);
    for (i64 i = 0; i < rows; ++i)
        for (i64 j = 0; j < cols; ++j)
            out.data[static_cast<std::size_t>(i * cols + j)] =
                a.data[static_cast<std::size_t>(i * cols + j)] + bias.data[static_cast<std::size_t>(j)];
    detail::check_finite(out, "add_rowvec");
    if (detail::taping(tape, a, bias)) {
        if constexpr (std::is_same_v<T, double>) {
            Shape bshape = bias.shape;
            detail::attach(out, tape, {a.node, bias.node},
                           [rows, cols, bshape](const Tensor& adj, std::vector<Tensor>& pg) {
                               pg[0] = adj;
                               Tensor gb(bshape);
                               for (i64 i = 0; i < rows; ++i)
                                   for (i64 j = 0; j < cols; ++j)
                                       gb.data[static_cast<std::size_t>(j)] +=
                                           adj.data[static_cast<std::size_t>(i * cols + j)];
                               pg[1] = std::move(gb);
                           });
        }
    }
    return out;
}

// Stack same-shaped tensors along a new leading dim.
template <class T>
TensorT<T> stack0(const std::vector<TensorT<T>>& parts, Tape* tape = nullptr) {
    if (parts.empty()) throw ShapeError("stack0: no inputs");
    const Shape inner = parts[0].shape;
    for (const auto& p : parts)
        if (p.shape != inner) throw ShapeError("stack0: mismatched shapes");
    Shape s;
    s.push_back(static_cast<i64>(parts.size()));
    for (i64 d : inner) s.push_back(d);
    TensorT<T> out(s);
    const i64 step = shape_numel(inner);
    for (std::size_t p = 0; p < parts.size(); ++p)
        std::copy(parts[p].data.begin(), parts[p].data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(p) * step);
    bool any_taped = false;
    if constexpr (std::is_same_v<T, double>) {
        if (tape) {
            for (const auto& p : parts) {
                tape->check_input(p);
                any_taped = any_taped || p.taped();
            }
        }
    } else {
        if (tape) throw Error("ops: gradient tape supports double tensors only");
    }
    if (any_taped) {
        if constexpr (std::is_same_v<T, double>) {
            std::vector<int> parents;
            for (const auto& p : parts) parents.push_back(p.node);
            detail::attach(out, tape, std::move(parents),
                           [inner, step](const Tensor& adj, std::vector<Tensor>& pg) {
                               for (std::size_t p = 0; p < pg.size(); ++p) {
                                   Tensor g(inner);
                                   std::copy(adj.data.begin() + static_cast<std::ptrdiff_t>(p) * step,
                                             adj.data.begin() + static_cast<std::ptrdiff_t>(p + 1) * step,
                                             g.data.begin());
                                   pg[p] = std::move(g);
                               }
                           });
        }
    }
    return out;
}

template <class T>
TensorT<T> sum_all(const TensorT<T>& a, Tape* tape = nullptr) {
    T acc = T(0);
    for (const T v : a.data) acc += v;
    TensorT<T> out = TensorT<T>::scalar(acc);
    detail::check_finite(out, "sum_all");
    if (detail::taping(tape, a)) {
        if constexpr (std::is_same_v<T, double>) {
            Shape ashape = a.shape;
            detail::attach(out, tape, {a.node}, [ashape](const Tensor& adj, std::vector<Tensor>& pg) {
                pg[0] = Tensor::full(ashape, adj.data[0]);
            });
        }
    }
    return out;
}

template <class T>
TensorT<T> mean_all(const TensorT<T>& a, Tape* tape = nullptr) {
    if (a.numel() == 0) throw ShapeError("mean_all: empty tensor");
    T acc = T(0);
    for (const T v : a.data) acc += v;
    acc /= static_cast<T>(a.numel());
    TensorT<T> out = TensorT<T>::scalar(acc);
    detail::check_finite(out, "mean_all");
    if (detail::taping(tape, a)) {
        if constexpr (std::is_same_v<T, double>) {
            Shape ashape = a.shape;
            const double inv = 1.0 / static_cast<double>(a.numel());
            detail::attach(out, tape, {a.node}, [ashape, inv](const Tensor& adj, std::vector<Tensor>& pg) {
                pg[0] = Tensor::full(ashape, adj.data[0] * inv);
            });
        }
    }
    return out;
}

// ============================================================================
// Finite-difference gradient checking (central differences).
// ============================================================================

/**
 * Central-difference check of `analytic` against f evaluated while perturbing
 * theta coordinate-wise. Returns the max relative error over coordinates,
 * with relative error |fd - an| / max(1, |fd|, |an|). theta is restored.
 */
inline double finite_diff_check(const std::function<double()>& f, Tensor& theta, const Tensor& analytic,
                                double h = 1e-5) {
    if (analytic.shape != theta.shape)
        throw ShapeError("finite_diff_check: gradient shape mismatch");
    double worst = 0.0;
    for (std::size_t i = 0; i < theta.data.size(); ++i) {
        const double saved = theta.data[i];
        theta.data[i] = saved + h;
        const double fp = f();
        theta.data[i] = saved - h;
        const double fm = f();
        theta.data[i] = saved;
        const double fd = (fp - fm) / (2.0 * h);
        const double an = analytic.data[i];
        const double denom = std::max({1.0, std::fabs(fd), std::fabs(an)});
        worst = std::max(worst, std::fabs(fd - an) / denom);
    }
    return worst;
}

/**
 * End-to-end gradient check: runs loss_fn once on a tape to get analytic
 * gradients for every parameter, then finite-differences each coordinate.
 * loss_fn(tape) must build the scalar loss through taped ops when tape is
 * non-null and evaluate the same scalar without taping when null.
 */
inline double gradcheck_params(const std::function<Tensor(Tape*)>& loss_fn, std::vector<Tensor*> params,
                               double h = 1e-5) {
    Tape tape;
    for (Tensor* p : params) tape.watch(*p);
    Tensor loss = loss_fn(&tape);
    tape.backward(loss);
    std::vector<Tensor> grads;
    grads.reserve(params.size());
    for (Tensor* p : params) grads.push_back(tape.grad(*p));
    for (Tensor* p : params) p->detach();
    double worst = 0.0;
    const auto eval = [&]() { return loss_fn(nullptr).data[0]; };
    for (std::size_t pi = 0; pi < params.size(); ++pi)
        worst = std::max(worst, finite_diff_check(eval, *params[pi], grads[pi], h));
    return worst;
}

}  // namespace npstream
