#pragma once

// Reverse-mode differentiation over dense 1D/2D real arrays.
//
// A Tape records primitive operations in creation order. Every node owns a
// contiguous row-major block of values (a scalar is a 1x1 block). Binary
// elementwise operations broadcast along any axis of extent 1, which covers
// scalar-with-matrix, row-vector-with-matrix and the outer product of a
// column and a row vector. Complex quantities never enter the tape; callers
// expand them into explicit real and imaginary parts.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fbm::ad {

enum class Op : std::uint8_t {
    leaf,
    constant,
    add,
    sub,
    mul,
    div,
    neg,
    exp,
    log,
    sin,
    cos,
    tanh,
    sech2,
    softplus,
    sigmoid,
    leaky_relu,
    floor,
    sum,
    row_sum,
    dot,
    matmul,
    slice,
    slice_cols,
    concat,
    reshape,
};

inline const char* op_name(Op op) {
    switch (op) {
        case Op::leaf: return "leaf";
        case Op::constant: return "constant";
        case Op::add: return "add";
        case Op::sub: return "sub";
        case Op::mul: return "mul";
        case Op::div: return "div";
        case Op::neg: return "neg";
        case Op::exp: return "exp";
        case Op::log: return "log";
        case Op::sin: return "sin";
        case Op::cos: return "cos";
        case Op::tanh: return "tanh";
        case Op::sech2: return "sech2";
        case Op::softplus: return "softplus";
        case Op::sigmoid: return "sigmoid";
        case Op::leaky_relu: return "leaky_relu";
        case Op::floor: return "floor";
        case Op::sum: return "sum";
        case Op::row_sum: return "row_sum";
        case Op::dot: return "dot";
        case Op::matmul: return "matmul";
        case Op::slice: return "slice";
        case Op::slice_cols: return "slice_cols";
        case Op::concat: return "concat";
        case Op::reshape: return "reshape";
    }
    return "unknown";
}

/// Raised when a recorded value is NaN or infinite at differentiation time.
class NonFiniteError : public std::runtime_error {
public:
    NonFiniteError(std::size_t node, Op op)
        : std::runtime_error("non-finite value at tape node " + std::to_string(node) + " (" +
                             op_name(op) + ")"),
          node_(node),
          op_(op) {}

    std::size_t node() const noexcept { return node_; }
    Op op() const noexcept { return op_; }

private:
    std::size_t node_;
    Op op_;
};

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Numerically stable scalar kernels shared by the tape and by plain evaluation.
template <class T>
T softplus(T x) {
    using std::exp;
    using std::log1p;
    return x > T(0) ? x + log1p(exp(-x)) : log1p(exp(x));
}

template <class T>
T sigmoid(T x) {
    using std::exp;
    if (x >= T(0)) return T(1) / (T(1) + exp(-x));
    const T e = exp(x);
    return e / (T(1) + e);
}

template <class T>
T sech2(T x) {
    using std::abs;
    using std::exp;
    const T e = exp(-T(2) * abs(x));
    const T d = T(1) + e;
    return T(4) * e / (d * d);
}

template <class T>
class Tape;

template <class T>
class Var {
public:
    Var() = default;

    Tape<T>* tape() const noexcept { return tape_; }
    std::uint32_t id() const noexcept { return id_; }
    std::size_t rows() const { return tape_->node(id_).rows; }
    std::size_t cols() const { return tape_->node(id_).cols; }
    std::size_t size() const { return rows() * cols(); }
    std::span<const T> values() const { return tape_->values(*this); }
    T value() const { return values()[0]; }

private:
    friend class Tape<T>;
    Var(Tape<T>* tape, std::uint32_t id) : tape_(tape), id_(id) {}

    Tape<T>* tape_ = nullptr;
    std::uint32_t id_ = 0;
};

template <class T>
struct GradResult {
    T value;
    std::vector<T> gradient;
};

template <class T>
class Tape {
public:
    struct Node {
        Op op;
        bool requires_grad;
        std::uint32_t rows;
        std::uint32_t cols;
        std::uint32_t lhs;
        std::uint32_t rhs;
        std::uint32_t extra;
        std::size_t offset;
        std::size_t partial_offset;
        T aux;

        std::size_t size() const { return std::size_t(rows) * cols; }
    };

    static constexpr std::uint32_t none = std::numeric_limits<std::uint32_t>::max();

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Drops all nodes but keeps allocated storage for the next trace.
    void clear() {
        nodes_.clear();
        values_.clear();
        partials_.clear();
        links_.clear();
    }

    std::size_t node_count() const { return nodes_.size(); }
    const Node& node(std::uint32_t id) const { return nodes_[id]; }
    std::span<const Node> nodes() const { return nodes_; }

    std::span<const T> values(Var<T> v) const {
        const Node& n = nodes_[v.id()];
        return {values_.data() + n.offset, n.size()};
    }

    template <class U>
    Var<T> variable(std::span<const U> v, std::size_t rows, std::size_t cols) {
        return input(Op::leaf, v, rows, cols);
    }
    template <class U>
    Var<T> variable(const std::vector<U>& v) {
        return variable(std::span<const U>(v), v.size(), 1);
    }

    template <class U>
    Var<T> constant(std::span<const U> v, std::size_t rows, std::size_t cols) {
        return input(Op::constant, v, rows, cols);
    }
    template <class U>
    Var<T> constant(const std::vector<U>& v) {
        return constant(std::span<const U>(v), v.size(), 1);
    }
    Var<T> scalar(T c) {
        const std::uint32_t id = push(Op::constant, 1, 1, none, none, false);
        values_[nodes_[id].offset] = c;
        return {this, id};
    }
    Var<T> fill(T c, std::size_t rows, std::size_t cols) {
        const std::uint32_t id = push(Op::constant, rows, cols, none, none, false);
        std::fill_n(values_.begin() + std::ptrdiff_t(nodes_[id].offset), rows * cols, c);
        return {this, id};
    }

    Var<T> binary(Op op, Var<T> a, Var<T> b) {
        check_owner(a);
        check_owner(b);
        const Node& na = nodes_[a.id()];
        const Node& nb = nodes_[b.id()];
        const auto rows = broadcast_extent(na.rows, nb.rows);
        const auto cols = broadcast_extent(na.cols, nb.cols);
        const bool rg = na.requires_grad || nb.requires_grad;
        return record(op, rows, cols, a.id(), b.id(), rg);
    }

    Var<T> unary(Op op, Var<T> a, T aux = T(0)) {
        check_owner(a);
        const Node& na = nodes_[a.id()];
        return record(op, na.rows, na.cols, a.id(), none, na.requires_grad, aux);
    }

    Var<T> sum(Var<T> a) {
        check_owner(a);
        return record(Op::sum, 1, 1, a.id(), none, nodes_[a.id()].requires_grad);
    }

    Var<T> row_sum(Var<T> a) {
        check_owner(a);
        const Node& na = nodes_[a.id()];
        return record(Op::row_sum, na.rows, 1, a.id(), none, na.requires_grad);
    }

    Var<T> dot(Var<T> a, Var<T> b) {
        check_owner(a);
        check_owner(b);
        if (a.size() != b.size()) throw ShapeError("dot: operand sizes differ");
        const bool rg = nodes_[a.id()].requires_grad || nodes_[b.id()].requires_grad;
        return record(Op::dot, 1, 1, a.id(), b.id(), rg);
    }

    Var<T> matmul(Var<T> a, Var<T> b) {
        check_owner(a);
        check_owner(b);
        const Node& na = nodes_[a.id()];
        const Node& nb = nodes_[b.id()];
        if (na.cols != nb.rows) throw ShapeError("matmul: inner dimensions differ");
        const bool rg = na.requires_grad || nb.requires_grad;
        return record(Op::matmul, na.rows, nb.cols, a.id(), b.id(), rg);
    }

    /// Flat range [begin, begin + count) of `a`, returned as a column.
    Var<T> slice(Var<T> a, std::size_t begin, std::size_t count) {
        check_owner(a);
        if (begin + count > a.size()) throw ShapeError("slice: range out of bounds");
        return record(Op::slice, count, 1, a.id(), none, nodes_[a.id()].requires_grad, T(0),
                      std::uint32_t(begin));
    }

    /// Columns [begin, begin + count) of a matrix.
    Var<T> slice_cols(Var<T> a, std::size_t begin, std::size_t count) {
        check_owner(a);
        const Node& na = nodes_[a.id()];
        if (begin + count > na.cols) throw ShapeError("slice_cols: range out of bounds");
        return record(Op::slice_cols, na.rows, count, a.id(), none, na.requires_grad, T(0),
                      std::uint32_t(begin));
    }

    Var<T> reshape(Var<T> a, std::size_t rows, std::size_t cols) {
        check_owner(a);
        if (rows * cols != a.size()) throw ShapeError("reshape: size mismatch");
        return record(Op::reshape, rows, cols, a.id(), none, nodes_[a.id()].requires_grad);
    }

    /// Flattened concatenation of the operands into one column.
    Var<T> concat(std::span<const Var<T>> parts) {
        const auto first = std::uint32_t(links_.size());
        std::size_t total = 0;
        bool rg = false;
        for (const auto& p : parts) {
            check_owner(p);
            links_.push_back(p.id());
            total += p.size();
            rg = rg || nodes_[p.id()].requires_grad;
        }
        return record(Op::concat, total, 1, first, std::uint32_t(parts.size()), rg);
    }

    /// Value and gradient of a 1x1 `loss` with respect to the leaf `wrt`.
    GradResult<T> grad(Var<T> loss, Var<T> wrt) const {
        check_owner(loss);
        check_owner(wrt);
        if (loss.size() != 1) throw ShapeError("grad: loss must be a scalar");
        if (nodes_[wrt.id()].op != Op::leaf) throw ShapeError("grad: wrt must be a leaf");
        for (std::uint32_t i = 0; i <= loss.id(); ++i) {
            const Node& n = nodes_[i];
            for (std::size_t k = 0; k < n.size(); ++k) {
                if (!std::isfinite(static_cast<double>(values_[n.offset + k])))
                    throw NonFiniteError(i, n.op);
            }
        }
        std::vector<T> adj(nodes_[loss.id()].offset + 1, T(0));
        adj[nodes_[loss.id()].offset] = T(1);
        for (std::uint32_t i = loss.id() + 1; i-- > 0;) {
            if (nodes_[i].requires_grad) backward(i, adj);
        }
        const Node& w = nodes_[wrt.id()];
        std::vector<T> g(w.size(), T(0));
        if (w.offset < adj.size()) {
            std::copy_n(adj.begin() + std::ptrdiff_t(w.offset), w.size(), g.begin());
        }
        return {values_[nodes_[loss.id()].offset], std::move(g)};
    }

    /// Recomputes every derived node from the recorded leaves and constants
    /// and reports whether each value is reproduced bit for bit.
    bool replay_matches() const {
        std::vector<T> vals(values_.size());
        std::vector<T> parts(partials_.size());
        for (std::uint32_t i = 0; i < nodes_.size(); ++i) {
            const Node& n = nodes_[i];
            if (n.op == Op::leaf || n.op == Op::constant) {
                std::copy_n(values_.begin() + std::ptrdiff_t(n.offset), n.size(),
                            vals.begin() + std::ptrdiff_t(n.offset));
            } else {
                forward(n, vals, parts);
            }
        }
        for (std::size_t k = 0; k < vals.size(); ++k) {
            const bool both_nan = std::isnan(static_cast<double>(vals[k])) &&
                                  std::isnan(static_cast<double>(values_[k]));
            if (!both_nan && vals[k] != values_[k]) return false;
        }
        return true;
    }

    /// Smallest distance from any leaky-relu or floor input to its kink.
    T kink_margin() const {
        T margin = std::numeric_limits<T>::infinity();
        for (const Node& n : nodes_) {
            if (n.op != Op::leaky_relu && n.op != Op::floor) continue;
            const Node& a = nodes_[n.lhs];
            const T at = n.op == Op::floor ? n.aux : T(0);
            for (std::size_t k = 0; k < a.size(); ++k) {
                using std::abs;
                margin = std::min<T>(margin, abs(values_[a.offset + k] - at));
            }
        }
        return margin;
    }

private:
    static std::uint32_t broadcast_extent(std::uint32_t a, std::uint32_t b) {
        if (a == b || b == 1) return a;
        if (a == 1) return b;
        throw ShapeError("incompatible shapes for broadcasting");
    }

    static bool is_unary(Op op) {
        switch (op) {
            case Op::neg:
            case Op::exp:
            case Op::log:
            case Op::sin:
            case Op::cos:
            case Op::tanh:
            case Op::sech2:
            case Op::softplus:
            case Op::sigmoid:
            case Op::leaky_relu:
            case Op::floor: return true;
            default: return false;
        }
    }

    void check_owner(Var<T> v) const {
        if (v.tape() != this) throw std::invalid_argument("variable belongs to another tape");
    }

    template <class U>
    Var<T> input(Op op, std::span<const U> v, std::size_t rows, std::size_t cols) {
        if (v.size() != rows * cols) throw ShapeError("input: size does not match shape");
        const std::uint32_t id = push(op, rows, cols, none, none, op == Op::leaf);
        auto dst = values_.begin() + std::ptrdiff_t(nodes_[id].offset);
        for (std::size_t k = 0; k < v.size(); ++k) dst[std::ptrdiff_t(k)] = T(v[k]);
        return {this, id};
    }

    std::uint32_t push(Op op, std::size_t rows, std::size_t cols, std::uint32_t lhs,
                       std::uint32_t rhs, bool requires_grad, T aux = T(0),
                       std::uint32_t extra = 0) {
        Node n{op,
               requires_grad,
               std::uint32_t(rows),
               std::uint32_t(cols),
               lhs,
               rhs,
               extra,
               values_.size(),
               partials_.size(),
               aux};
        values_.resize(values_.size() + n.size());
        if (is_unary(op)) partials_.resize(partials_.size() + n.size());
        nodes_.push_back(n);
        return std::uint32_t(nodes_.size() - 1);
    }

    Var<T> record(Op op, std::size_t rows, std::size_t cols, std::uint32_t lhs,
                  std::uint32_t rhs, bool requires_grad, T aux = T(0),
                  std::uint32_t extra = 0) {
        const std::uint32_t id = push(op, rows, cols, lhs, rhs, requires_grad, aux, extra);
        forward(nodes_[id], values_, partials_);
        return {this, id};
    }

    void forward(const Node& n, std::vector<T>& vals, std::vector<T>& parts) const {
        T* out = vals.data() + n.offset;
        switch (n.op) {
            case Op::leaf:
            case Op::constant: return;
            case Op::add:
            case Op::sub:
            case Op::mul:
            case Op::div: {
                const Node& a = nodes_[n.lhs];
                const Node& b = nodes_[n.rhs];
                const T* av = vals.data() + a.offset;
                const T* bv = vals.data() + b.offset;
                const std::size_t ra = a.rows == 1 ? 0 : a.cols, ca = a.cols == 1 ? 0 : 1;
                const std::size_t rb = b.rows == 1 ? 0 : b.cols, cb = b.cols == 1 ? 0 : 1;
                for (std::size_t i = 0; i < n.rows; ++i)
                    binary_kernel(n.op, av + i * ra, bv + i * rb, out + i * n.cols, n.cols, ca, cb);
                return;
            }
            case Op::sum: {
                const Node& a = nodes_[n.lhs];
                T s = T(0);
                for (std::size_t k = 0; k < a.size(); ++k) s += vals[a.offset + k];
                out[0] = s;
                return;
            }
            case Op::row_sum: {
                const Node& a = nodes_[n.lhs];
                for (std::size_t i = 0; i < a.rows; ++i) {
                    T s = T(0);
                    for (std::size_t j = 0; j < a.cols; ++j) s += vals[a.offset + i * a.cols + j];
                    out[i] = s;
                }
                return;
            }
            case Op::dot: {
                const Node& a = nodes_[n.lhs];
                const Node& b = nodes_[n.rhs];
                T s = T(0);
                for (std::size_t k = 0; k < a.size(); ++k)
                    s += vals[a.offset + k] * vals[b.offset + k];
                out[0] = s;
                return;
            }
            case Op::matmul: {
                const Node& a = nodes_[n.lhs];
                const Node& b = nodes_[n.rhs];
                const T* av = vals.data() + a.offset;
                const T* bv = vals.data() + b.offset;
                const std::size_t inner = a.cols;
                const std::size_t nc = n.cols;
                std::fill_n(out, n.size(), T(0));
                for (std::size_t i = 0; i < n.rows; ++i) {
                    T* orow = out + i * nc;
                    for (std::size_t k = 0; k < inner; ++k) {
                        const T aik = av[i * inner + k];
                        const T* brow = bv + k * nc;
                        for (std::size_t j = 0; j < nc; ++j) orow[j] += aik * brow[j];
                    }
                }
                return;
            }
            case Op::slice: {
                const Node& a = nodes_[n.lhs];
                std::copy_n(vals.begin() + std::ptrdiff_t(a.offset + n.extra), n.size(), out);
                return;
            }
            case Op::slice_cols: {
                const Node& a = nodes_[n.lhs];
                for (std::size_t i = 0; i < n.rows; ++i)
                    for (std::size_t j = 0; j < n.cols; ++j)
                        out[i * n.cols + j] = vals[a.offset + i * a.cols + n.extra + j];
                return;
            }
            case Op::reshape: {
                const Node& a = nodes_[n.lhs];
                std::copy_n(vals.begin() + std::ptrdiff_t(a.offset), n.size(), out);
                return;
            }
            case Op::concat: {
                std::size_t pos = 0;
                for (std::uint32_t p = 0; p < n.rhs; ++p) {
                    const Node& a = nodes_[links_[n.lhs + p]];
                    std::copy_n(vals.begin() + std::ptrdiff_t(a.offset), a.size(), out + pos);
                    pos += a.size();
                }
                return;
            }
            default: {
                const Node& a = nodes_[n.lhs];
                const T* av = vals.data() + a.offset;
                T* dv = parts.data() + n.partial_offset;
                unary_kernel(n, av, out, dv);
                return;
            }
        }
    }

    static void binary_kernel(Op op, const T* a, const T* b, T* out, std::size_t count,
                              std::size_t sa, std::size_t sb) {
        switch (op) {
            case Op::add:
                for (std::size_t k = 0; k < count; ++k) out[k] = a[k * sa] + b[k * sb];
                return;
            case Op::sub:
                for (std::size_t k = 0; k < count; ++k) out[k] = a[k * sa] - b[k * sb];
                return;
            case Op::mul:
                for (std::size_t k = 0; k < count; ++k) out[k] = a[k * sa] * b[k * sb];
                return;
            case Op::div:
                for (std::size_t k = 0; k < count; ++k) out[k] = a[k * sa] / b[k * sb];
                return;
            default: return;
        }
    }

    static void unary_kernel(const Node& n, const T* x, T* y, T* d) {
        using std::cos;
        using std::exp;
        using std::log;
        using std::sin;
        using std::tanh;
        const std::size_t m = n.size();
        const T aux = n.aux;
        switch (n.op) {
            case Op::neg:
                for (std::size_t k = 0; k < m; ++k) { y[k] = -x[k]; d[k] = T(-1); }
                return;
            case Op::exp:
                for (std::size_t k = 0; k < m; ++k) d[k] = y[k] = exp(x[k]);
                return;
            case Op::log:
                for (std::size_t k = 0; k < m; ++k) { y[k] = log(x[k]); d[k] = T(1) / x[k]; }
                return;
            case Op::sin:
                for (std::size_t k = 0; k < m; ++k) { y[k] = sin(x[k]); d[k] = cos(x[k]); }
                return;
            case Op::cos:
                for (std::size_t k = 0; k < m; ++k) { y[k] = cos(x[k]); d[k] = -sin(x[k]); }
                return;
            case Op::tanh:
                for (std::size_t k = 0; k < m; ++k) { y[k] = tanh(x[k]); d[k] = T(1) - y[k] * y[k]; }
                return;
            case Op::sech2:
                for (std::size_t k = 0; k < m; ++k) {
                    y[k] = ad::sech2(x[k]);
                    d[k] = T(-2) * y[k] * tanh(x[k]);
                }
                return;
            case Op::softplus:
                for (std::size_t k = 0; k < m; ++k) {
                    y[k] = ad::softplus(x[k]);
                    d[k] = ad::sigmoid(x[k]);
                }
                return;
            case Op::sigmoid:
                for (std::size_t k = 0; k < m; ++k) {
                    y[k] = ad::sigmoid(x[k]);
                    d[k] = y[k] * (T(1) - y[k]);
                }
                return;
            case Op::leaky_relu:
                for (std::size_t k = 0; k < m; ++k) {
                    const bool pos = x[k] > T(0);
                    y[k] = pos ? x[k] : aux * x[k];
                    d[k] = pos ? T(1) : aux;
                }
                return;
            case Op::floor:
                for (std::size_t k = 0; k < m; ++k) {
                    const bool above = x[k] > aux;
                    y[k] = above ? x[k] : aux;
                    d[k] = above ? T(1) : T(0);
                }
                return;
            default: return;
        }
    }

    void backward(std::uint32_t id, std::vector<T>& adj) const {
        const Node& n = nodes_[id];
        if (n.op == Op::leaf || n.op == Op::constant) return;
        if (n.offset >= adj.size()) return;
        const T* g = adj.data() + n.offset;
        auto operand_adj = [&](const Node& a) -> T* {
            return a.requires_grad ? adj.data() + a.offset : nullptr;
        };
        switch (n.op) {
            case Op::add:
            case Op::sub:
            case Op::mul:
            case Op::div: {
                const Node& a = nodes_[n.lhs];
                const Node& b = nodes_[n.rhs];
                T* ga = operand_adj(a);
                T* gb = operand_adj(b);
                const T* av = values_.data() + a.offset;
                const T* bv = values_.data() + b.offset;
                const T* ov = values_.data() + n.offset;
                const std::size_t ra = a.rows == 1 ? 0 : a.cols, ca = a.cols == 1 ? 0 : 1;
                const std::size_t rb = b.rows == 1 ? 0 : b.cols, cb = b.cols == 1 ? 0 : 1;
                for (std::size_t i = 0; i < n.rows; ++i) {
                    const T* gi = g + i * n.cols;
                    const T* ai = av + i * ra;
                    const T* bi = bv + i * rb;
                    T* gai = ga ? ga + i * ra : nullptr;
                    T* gbi = gb ? gb + i * rb : nullptr;
                    const std::size_t nc = n.cols;
                    switch (n.op) {
                        case Op::add:
                            if (gai) for (std::size_t j = 0; j < nc; ++j) gai[j * ca] += gi[j];
                            if (gbi) for (std::size_t j = 0; j < nc; ++j) gbi[j * cb] += gi[j];
                            break;
                        case Op::sub:
                            if (gai) for (std::size_t j = 0; j < nc; ++j) gai[j * ca] += gi[j];
                            if (gbi) for (std::size_t j = 0; j < nc; ++j) gbi[j * cb] -= gi[j];
                            break;
                        case Op::mul:
                            if (gai)
                                for (std::size_t j = 0; j < nc; ++j) gai[j * ca] += gi[j] * bi[j * cb];
                            if (gbi)
                                for (std::size_t j = 0; j < nc; ++j) gbi[j * cb] += gi[j] * ai[j * ca];
                            break;
                        default: {
                            const T* oi = ov + i * nc;
                            if (gai)
                                for (std::size_t j = 0; j < nc; ++j) gai[j * ca] += gi[j] / bi[j * cb];
                            if (gbi)
                                for (std::size_t j = 0; j < nc; ++j)
                                    gbi[j * cb] -= gi[j] * oi[j] / bi[j * cb];
                            break;
                        }
                    }
                }
                return;
            }
            case Op::sum: {
                const Node& a = nodes_[n.lhs];
                T* ga = adj.data() + a.offset;
                for (std::size_t k = 0; k < a.size(); ++k) ga[k] += g[0];
                return;
            }
            case Op::row_sum: {
                const Node& a = nodes_[n.lhs];
                T* ga = adj.data() + a.offset;
                for (std::size_t i = 0; i < a.rows; ++i)
                    for (std::size_t j = 0; j < a.cols; ++j) ga[i * a.cols + j] += g[i];
                return;
            }
            case Op::dot: {
                const Node& a = nodes_[n.lhs];
                const Node& b = nodes_[n.rhs];
                T* ga = operand_adj(a);
                T* gb = operand_adj(b);
                for (std::size_t k = 0; k < a.size(); ++k) {
                    if (ga) ga[k] += g[0] * values_[b.offset + k];
                    if (gb) gb[k] += g[0] * values_[a.offset + k];
                }
                return;
            }
            case Op::matmul: {
                const Node& a = nodes_[n.lhs];
                const Node& b = nodes_[n.rhs];
                const T* av = values_.data() + a.offset;
                const T* bv = values_.data() + b.offset;
                const std::size_t inner = a.cols;
                const std::size_t nc = n.cols;
                if (T* ga = operand_adj(a)) {
                    std::vector<T> bt(inner * nc);
                    for (std::size_t k = 0; k < inner; ++k)
                        for (std::size_t j = 0; j < nc; ++j) bt[j * inner + k] = bv[k * nc + j];
                    for (std::size_t i = 0; i < n.rows; ++i) {
                        T* garow = ga + i * inner;
                        const T* grow = g + i * nc;
                        for (std::size_t j = 0; j < nc; ++j) {
                            const T gij = grow[j];
                            const T* btrow = bt.data() + j * inner;
                            for (std::size_t k = 0; k < inner; ++k) garow[k] += gij * btrow[k];
                        }
                    }
                }
                if (T* gb = operand_adj(b)) {
                    for (std::size_t i = 0; i < n.rows; ++i)
                        for (std::size_t k = 0; k < inner; ++k) {
                            const T aik = av[i * inner + k];
                            T* gbrow = gb + k * nc;
                            const T* grow = g + i * nc;
                            for (std::size_t j = 0; j < nc; ++j) gbrow[j] += aik * grow[j];
                        }
                }
                return;
            }
            case Op::slice: {
                const Node& a = nodes_[n.lhs];
                T* ga = adj.data() + a.offset + n.extra;
                for (std::size_t k = 0; k < n.size(); ++k) ga[k] += g[k];
                return;
            }
            case Op::slice_cols: {
                const Node& a = nodes_[n.lhs];
                T* ga = adj.data() + a.offset;
                for (std::size_t i = 0; i < n.rows; ++i)
                    for (std::size_t j = 0; j < n.cols; ++j)
                        ga[i * a.cols + n.extra + j] += g[i * n.cols + j];
                return;
            }
            case Op::reshape: {
                const Node& a = nodes_[n.lhs];
                T* ga = adj.data() + a.offset;
                for (std::size_t k = 0; k < n.size(); ++k) ga[k] += g[k];
                return;
            }
            case Op::concat: {
                std::size_t pos = 0;
                for (std::uint32_t p = 0; p < n.rhs; ++p) {
                    const Node& a = nodes_[links_[n.lhs + p]];
                    if (a.requires_grad) {
                        T* ga = adj.data() + a.offset;
                        for (std::size_t k = 0; k < a.size(); ++k) ga[k] += g[pos + k];
                    }
                    pos += a.size();
                }
                return;
            }
            default: {
                const Node& a = nodes_[n.lhs];
                T* ga = adj.data() + a.offset;
                const T* dv = partials_.data() + n.partial_offset;
                for (std::size_t k = 0; k < n.size(); ++k) ga[k] += g[k] * dv[k];
                return;
            }
        }
    }

    std::vector<Node> nodes_;
    std::vector<T> values_;
    std::vector<T> partials_;
    std::vector<std::uint32_t> links_;
};

// Expression helpers.

template <class T>
Var<T> operator+(Var<T> a, Var<T> b) { return a.tape()->binary(Op::add, a, b); }
template <class T>
Var<T> operator-(Var<T> a, Var<T> b) { return a.tape()->binary(Op::sub, a, b); }
template <class T>
Var<T> operator*(Var<T> a, Var<T> b) { return a.tape()->binary(Op::mul, a, b); }
template <class T>
Var<T> operator/(Var<T> a, Var<T> b) { return a.tape()->binary(Op::div, a, b); }
template <class T>
Var<T> operator-(Var<T> a) { return a.tape()->unary(Op::neg, a); }

template <class T>
Var<T> operator+(Var<T> a, double c) { return a + a.tape()->scalar(T(c)); }
template <class T>
Var<T> operator+(double c, Var<T> a) { return a.tape()->scalar(T(c)) + a; }
template <class T>
Var<T> operator-(Var<T> a, double c) { return a - a.tape()->scalar(T(c)); }
template <class T>
Var<T> operator-(double c, Var<T> a) { return a.tape()->scalar(T(c)) - a; }
template <class T>
Var<T> operator*(Var<T> a, double c) { return a * a.tape()->scalar(T(c)); }
template <class T>
Var<T> operator*(double c, Var<T> a) { return a.tape()->scalar(T(c)) * a; }
template <class T>
Var<T> operator/(Var<T> a, double c) { return a / a.tape()->scalar(T(c)); }
template <class T>
Var<T> operator/(double c, Var<T> a) { return a.tape()->scalar(T(c)) / a; }

template <class T>
Var<T> exp(Var<T> a) { return a.tape()->unary(Op::exp, a); }
template <class T>
Var<T> log(Var<T> a) { return a.tape()->unary(Op::log, a); }
template <class T>
Var<T> sin(Var<T> a) { return a.tape()->unary(Op::sin, a); }
template <class T>
Var<T> cos(Var<T> a) { return a.tape()->unary(Op::cos, a); }
template <class T>
Var<T> tanh(Var<T> a) { return a.tape()->unary(Op::tanh, a); }
template <class T>
Var<T> sech2(Var<T> a) { return a.tape()->unary(Op::sech2, a); }
template <class T>
Var<T> softplus(Var<T> a) { return a.tape()->unary(Op::softplus, a); }
template <class T>
Var<T> sigmoid(Var<T> a) { return a.tape()->unary(Op::sigmoid, a); }
template <class T>
Var<T> leaky_relu(Var<T> a, double slope) { return a.tape()->unary(Op::leaky_relu, a, T(slope)); }
/// max(a, lo) elementwise; gradient flows only where a > lo.
template <class T>
Var<T> floor(Var<T> a, double lo) { return a.tape()->unary(Op::floor, a, T(lo)); }

template <class T>
Var<T> sum(Var<T> a) { return a.tape()->sum(a); }
template <class T>
Var<T> row_sum(Var<T> a) { return a.tape()->row_sum(a); }
template <class T>
Var<T> mean(Var<T> a) { return a.tape()->sum(a) * (1.0 / double(a.size())); }
template <class T>
Var<T> dot(Var<T> a, Var<T> b) { return a.tape()->dot(a, b); }
template <class T>
Var<T> matmul(Var<T> a, Var<T> b) { return a.tape()->matmul(a, b); }
template <class T>
Var<T> slice(Var<T> a, std::size_t begin, std::size_t count) {
    return a.tape()->slice(a, begin, count);
}
template <class T>
Var<T> slice_cols(Var<T> a, std::size_t begin, std::size_t count) {
    return a.tape()->slice_cols(a, begin, count);
}
template <class T>
Var<T> reshape(Var<T> a, std::size_t rows, std::size_t cols) {
    return a.tape()->reshape(a, rows, cols);
}
template <class T>
Var<T> concat(std::initializer_list<Var<T>> parts) {
    return parts.begin()->tape()->concat(std::span<const Var<T>>(parts.begin(), parts.size()));
}
template <class T>
Var<T> concat(const std::vector<Var<T>>& parts) {
    return parts.front().tape()->concat(std::span<const Var<T>>(parts));
}

/// Row-wise log-sum-exp of a matrix, shifted by a per-row constant maximum.
template <class T>
Var<T> row_logsumexp(Var<T> a) {
    Tape<T>& tape = *a.tape();
    const auto v = a.values();
    std::vector<T> shift(a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        T m = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < a.cols(); ++j) m = std::max(m, v[i * a.cols() + j]);
        shift[i] = std::isfinite(static_cast<double>(m)) ? m : T(0);
    }
    auto m = tape.constant(std::span<const T>(shift), a.rows(), 1);
    return log(row_sum(exp(a - m))) + m;
}

/// Log-sum-exp over all entries, returned as a scalar.
template <class T>
Var<T> logsumexp(Var<T> a) {
    return row_logsumexp(reshape(a, 1, a.size()));
}

template <class T>
GradResult<T> grad(Var<T> loss, Var<T> wrt) {
    return loss.tape()->grad(loss, wrt);
}

struct GradientCheck {
    double max_rel_error = 0.0;
    std::size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
};

/// Compares the tape gradient of `loss` against central differences.
///
/// `loss` is a generic callable `(Tape<T>&, Var<T> params) -> Var<T>`. The
/// analytic gradient is taken in double precision; the differences are
/// evaluated in `FdScalar` so that cancellation in L(p+h) - L(p-h) stays far
/// below the tolerances being checked. A non-empty `indices` restricts the
/// comparison to those coordinates.
template <class FdScalar = long double, class Loss>
GradientCheck check_gradient(Loss&& loss, std::span<const double> params, double h = 1e-6,
                             std::span<const std::size_t> indices = {}) {
    Tape<double> tape;
    auto p = tape.variable(params, params.size(), 1);
    const auto analytic = tape.grad(loss(tape, p), p).gradient;

    Tape<FdScalar> fd_tape;
    std::vector<FdScalar> shifted(params.begin(), params.end());
    auto eval = [&]() -> FdScalar {
        fd_tape.clear();
        auto q = fd_tape.variable(std::span<const FdScalar>(shifted), shifted.size(), 1);
        return loss(fd_tape, q).value();
    };

    std::vector<std::size_t> all;
    if (indices.empty()) {
        all.resize(params.size());
        std::iota(all.begin(), all.end(), std::size_t{0});
        indices = all;
    }
    GradientCheck result;
    bool first = true;
    for (std::size_t i : indices) {
        if (i >= params.size()) throw std::out_of_range("check_gradient: index out of range");
        const FdScalar base = shifted[i];
        shifted[i] = base + FdScalar(h);
        const FdScalar up = eval();
        shifted[i] = base - FdScalar(h);
        const FdScalar down = eval();
        shifted[i] = base;
        const double numeric = static_cast<double>((up - down) / (FdScalar(2) * FdScalar(h)));
        if (!std::isfinite(numeric)) throw NonFiniteError(i, Op::leaf);
        const double err = std::abs(analytic[i] - numeric) / (std::abs(analytic[i]) + 1e-12);
        if (first || err > result.max_rel_error) {
            first = false;
            result.max_rel_error = err;
            result.worst_index = i;
            result.analytic = analytic[i];
            result.numeric = numeric;
        }
    }
    return result;
}

}  // namespace fbm::ad
