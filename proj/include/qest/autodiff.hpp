#pragma once

// Reverse-mode automatic differentiation on an append-only tape.
//
// Primal values are computed eagerly into an arena owned by the tape; each
// node records its operation, input ids and value offset. A node id is its
// position in the tape, so ids are topologically ordered by construction.
// backward() runs a single reverse sweep and may be called once per tape;
// reset() re-arms the tape and reuses its storage.
//
// Shapes are scalar / vector / matrix only. Binary elementwise operations
// broadcast a scalar operand against any shape; everything else requires
// equal shapes. All arithmetic is IEEE double.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <stdexcept>
#include <vector>

#include "qest/tensor.hpp"

namespace qest::ad {

enum class Op : std::uint8_t {
    Leaf,
    Add, Sub, Mul, Div,
    Neg, Cos, Sin, Exp, Log, Tanh, Sigmoid, Square, Sqrt, Abs,
    Min, Max, Clamp,
    MatVec,
    Sum, Mean, LogSumExp,
    StopGrad,
    Pack, Index, Row,
};

class Tape;

struct Variable {
    Tape* tape = nullptr;
    std::int32_t id = -1;
    Shape shape;

    bool valid() const { return tape != nullptr && id >= 0; }
};

// Leaf node id -> adjoint tensor, for every requires_grad leaf.
using GradientMap = std::map<std::int32_t, Tensor>;

class Tape {
  public:
    // ---- construction of the computation ----

    Variable leaf(const Tensor& value, bool requires_grad = false) {
        if (!value.all_finite())
            throw std::invalid_argument("Tape::leaf: non-finite input rejected");
        const std::int32_t id = new_node(Op::Leaf, value.shape(), -1, -1, requires_grad);
        std::copy(value.data().begin(), value.data().end(), values(id).begin());
        return {this, id, value.shape()};
    }

    Variable leaf(double scalar, bool requires_grad = false) {
        return leaf(Tensor::scalar(scalar), requires_grad);
    }

    Variable add(Variable a, Variable b) { return binary(Op::Add, a, b); }
    Variable sub(Variable a, Variable b) { return binary(Op::Sub, a, b); }
    Variable mul(Variable a, Variable b) { return binary(Op::Mul, a, b); }
    Variable div(Variable a, Variable b) { return binary(Op::Div, a, b); }
    Variable min(Variable a, Variable b) { return binary(Op::Min, a, b); }
    Variable max(Variable a, Variable b) { return binary(Op::Max, a, b); }

    Variable neg(Variable a) { return unary(Op::Neg, a); }
    Variable cos(Variable a) { return unary(Op::Cos, a); }
    Variable sin(Variable a) { return unary(Op::Sin, a); }
    Variable exp(Variable a) { return unary(Op::Exp, a); }
    Variable log(Variable a) { return unary(Op::Log, a); }
    Variable tanh(Variable a) { return unary(Op::Tanh, a); }
    Variable sigmoid(Variable a) { return unary(Op::Sigmoid, a); }
    Variable square(Variable a) { return unary(Op::Square, a); }
    Variable sqrt(Variable a) { return unary(Op::Sqrt, a); }
    Variable abs(Variable a) { return unary(Op::Abs, a); }

    Variable clamp(Variable a, double lo, double hi) {
        if (!(lo <= hi)) throw std::invalid_argument("Tape::clamp: lo > hi");
        check_owned(a);
        const std::int32_t id = new_node(Op::Clamp, a.shape, a.id, -1, nodes_[a.id].needs_grad);
        nodes_[id].lo = lo;
        nodes_[id].hi = hi;
        eval_node(id, values(id));
        return {this, id, a.shape};
    }

    Variable matvec(Variable m, Variable v) {
        check_owned(m);
        check_owned(v);
        if (m.shape.kind != Shape::Kind::Matrix || v.shape.kind != Shape::Kind::Vector ||
            m.shape.cols != v.shape.rows)
            throw std::invalid_argument("Tape::matvec: shape mismatch " + m.shape.str() + " * " +
                                        v.shape.str());
        const Shape out = Shape::vector(m.shape.rows);
        const std::int32_t id = new_node(Op::MatVec, out, m.id, v.id,
                                         nodes_[m.id].needs_grad || nodes_[v.id].needs_grad);
        eval_node(id, values(id));
        return {this, id, out};
    }

    Variable sum(Variable v) { return reduce(Op::Sum, v); }
    Variable mean(Variable v) { return reduce(Op::Mean, v); }
    Variable logsumexp(Variable v) { return reduce(Op::LogSumExp, v); }

    Variable stop_gradient(Variable v) {
        check_owned(v);
        const std::int32_t id = new_node(Op::StopGrad, v.shape, v.id, -1, false);
        eval_node(id, values(id));
        return {this, id, v.shape};
    }

    // Pack scalar variables into a vector.
    Variable pack(std::span<const Variable> parts) {
        if (parts.empty()) throw std::invalid_argument("Tape::pack: empty input");
        bool needs = false;
        for (const Variable& p : parts) {
            check_owned(p);
            if (!p.shape.is_scalar())
                throw std::invalid_argument("Tape::pack: all inputs must be scalars");
            needs = needs || nodes_[p.id].needs_grad;
        }
        const Shape out = Shape::vector(static_cast<std::int32_t>(parts.size()));
        const auto ofs = static_cast<std::int32_t>(pack_inputs_.size());
        for (const Variable& p : parts) pack_inputs_.push_back(p.id);
        const std::int32_t id = new_node(Op::Pack, out, ofs,
                                         static_cast<std::int32_t>(parts.size()), needs);
        eval_node(id, values(id));
        return {this, id, out};
    }

    // Extract element i of a vector as a scalar.
    Variable index(Variable v, std::int32_t i) {
        check_owned(v);
        if (v.shape.kind != Shape::Kind::Vector)
            throw std::invalid_argument("Tape::index: input must be a vector");
        if (i < 0 || i >= v.shape.rows) throw std::out_of_range("Tape::index: out of range");
        const std::int32_t id = new_node(Op::Index, Shape::scalar(), v.id, i,
                                         nodes_[v.id].needs_grad);
        eval_node(id, values(id));
        return {this, id, Shape::scalar()};
    }

    // Extract row i of a matrix as a vector.
    Variable row(Variable m, std::int32_t i) {
        check_owned(m);
        if (m.shape.kind != Shape::Kind::Matrix)
            throw std::invalid_argument("Tape::row: input must be a matrix");
        if (i < 0 || i >= m.shape.rows) throw std::out_of_range("Tape::row: out of range");
        const Shape out = Shape::vector(m.shape.cols);
        const std::int32_t id = new_node(Op::Row, out, m.id, i, nodes_[m.id].needs_grad);
        eval_node(id, values(id));
        return {this, id, out};
    }

    // ---- reading values ----

    std::span<const double> values(Variable v) const {
        check_owned(v);
        return values(v.id);
    }

    Tensor tensor(Variable v) const {
        check_owned(v);
        Tensor t(v.shape);
        const auto src = values(v.id);
        std::copy(src.begin(), src.end(), t.data().begin());
        return t;
    }

    double value(Variable v) const {
        check_owned(v);
        if (!v.shape.is_scalar())
            throw std::logic_error("Tape::value: variable is not a scalar");
        return values(v.id)[0];
    }

    // ---- backward ----

    // Single reverse sweep from a scalar loss. May be called once per tape;
    // a second call without reset() is an error. Returns adjoints for every
    // requires_grad leaf (zero tensors for leaves the loss does not reach).
    GradientMap backward(Variable loss) {
        arm_backward(loss);
        GradientMap out;
        sweep(loss.id);
        collect(out);
        return out;
    }

    // Same contract, several scalar roots in one call: returns one gradient
    // map per root. Counts as the tape's single backward invocation.
    std::vector<GradientMap> backward_multi(std::span<const Variable> roots) {
        if (roots.empty()) throw std::invalid_argument("backward_multi: no roots");
        arm_backward(roots.front());
        for (const Variable& r : roots) {
            check_owned(r);
            if (!r.shape.is_scalar())
                throw std::invalid_argument("backward: loss must be a scalar");
        }
        std::vector<GradientMap> out(roots.size());
        for (std::size_t k = 0; k < roots.size(); ++k) {
            if (k > 0) std::fill(adj_.begin(), adj_.end(), 0.0);
            sweep(roots[k].id);
            collect(out[k]);
        }
        return out;
    }

    // ---- lifecycle / introspection ----

    void reset() {
        nodes_.clear();
        val_.clear();
        adj_.clear();
        pack_inputs_.clear();
        backward_done_ = false;
    }

    std::size_t node_count() const { return nodes_.size(); }
    std::size_t value_count() const { return val_.size(); }

    // Recomputes every non-leaf primal from the leaves and checks the arena
    // is reproduced bit-exactly.
    bool replay_verify() {
        const std::vector<double> before = val_;
        for (std::int32_t i = 0; i < static_cast<std::int32_t>(nodes_.size()); ++i)
            if (nodes_[i].op != Op::Leaf) eval_node(i, values(i));
        return before == val_;
    }

  private:
    struct Node {
        Op op;
        std::int32_t a = -1;  // first input id (Pack: offset into pack_inputs_)
        std::int32_t b = -1;  // second input id (Index/Row: payload; Pack: count)
        Shape shape;
        std::size_t ofs = 0;  // offset into the value arena
        bool needs_grad = false;
        double lo = 0.0, hi = 0.0;  // clamp bounds
    };

    void check_owned(const Variable& v) const {
        if (v.tape != this || v.id < 0 || v.id >= static_cast<std::int32_t>(nodes_.size()))
            throw std::logic_error("variable does not belong to this tape");
    }

    std::int32_t new_node(Op op, Shape shape, std::int32_t a, std::int32_t b, bool needs_grad) {
        Node n;
        n.op = op;
        n.a = a;
        n.b = b;
        n.shape = shape;
        n.ofs = val_.size();
        n.needs_grad = needs_grad;
        val_.resize(val_.size() + static_cast<std::size_t>(shape.size()), 0.0);
        nodes_.push_back(n);
        return static_cast<std::int32_t>(nodes_.size()) - 1;
    }

    std::span<double> values(std::int32_t id) {
        const Node& n = nodes_[id];
        return {val_.data() + n.ofs, static_cast<std::size_t>(n.shape.size())};
    }
    std::span<const double> values(std::int32_t id) const {
        const Node& n = nodes_[id];
        return {val_.data() + n.ofs, static_cast<std::size_t>(n.shape.size())};
    }

    Variable binary(Op op, Variable a, Variable b) {
        check_owned(a);
        check_owned(b);
        Shape out;
        if (a.shape == b.shape)
            out = a.shape;
        else if (a.shape.is_scalar())
            out = b.shape;
        else if (b.shape.is_scalar())
            out = a.shape;
        else
            throw std::invalid_argument("elementwise: incompatible shapes " + a.shape.str() +
                                        ", " + b.shape.str());
        const std::int32_t id =
            new_node(op, out, a.id, b.id, nodes_[a.id].needs_grad || nodes_[b.id].needs_grad);
        eval_node(id, values(id));
        return {this, id, out};
    }

    Variable unary(Op op, Variable a) {
        check_owned(a);
        const std::int32_t id = new_node(op, a.shape, a.id, -1, nodes_[a.id].needs_grad);
        eval_node(id, values(id));
        return {this, id, a.shape};
    }

    Variable reduce(Op op, Variable v) {
        check_owned(v);
        if (v.shape.size() < 1) throw std::invalid_argument("reduce: empty input");
        const std::int32_t id = new_node(op, Shape::scalar(), v.id, -1, nodes_[v.id].needs_grad);
        eval_node(id, values(id));
        return {this, id, Shape::scalar()};
    }

    // Broadcast-aware element fetch for binary elementwise inputs.
    static double pick(std::span<const double> x, std::size_t i) {
        return x.size() == 1 ? x[0] : x[i];
    }

    void eval_node(std::int32_t id, std::span<double> out) {
        const Node& n = nodes_[id];
        switch (n.op) {
            case Op::Leaf:
                return;  // leaves keep their stored value
            case Op::Add: case Op::Sub: case Op::Mul: case Op::Div:
            case Op::Min: case Op::Max: {
                const auto xa = values(n.a);
                const auto xb = values(n.b);
                for (std::size_t i = 0; i < out.size(); ++i) {
                    const double a = pick(xa, i), b = pick(xb, i);
                    switch (n.op) {
                        case Op::Add: out[i] = a + b; break;
                        case Op::Sub: out[i] = a - b; break;
                        case Op::Mul: out[i] = a * b; break;
                        case Op::Div:
                            if (b == 0.0) throw std::domain_error("div: division by zero");
                            out[i] = a / b;
                            break;
                        case Op::Min: out[i] = a <= b ? a : b; break;
                        case Op::Max: out[i] = a >= b ? a : b; break;
                        default: break;
                    }
                }
                return;
            }
            case Op::Neg: case Op::Cos: case Op::Sin: case Op::Exp: case Op::Log:
            case Op::Tanh: case Op::Sigmoid: case Op::Square: case Op::Sqrt:
            case Op::Abs: case Op::Clamp: {
                const auto xa = values(n.a);
                for (std::size_t i = 0; i < out.size(); ++i) {
                    const double a = xa[i];
                    switch (n.op) {
                        case Op::Neg: out[i] = -a; break;
                        case Op::Cos: out[i] = std::cos(a); break;
                        case Op::Sin: out[i] = std::sin(a); break;
                        case Op::Exp: out[i] = std::exp(a); break;
                        case Op::Log:
                            if (a < 0.0) throw std::domain_error("log: negative input");
                            out[i] = std::log(a);
                            break;
                        case Op::Tanh: out[i] = std::tanh(a); break;
                        case Op::Sigmoid: out[i] = 1.0 / (1.0 + std::exp(-a)); break;
                        case Op::Square: out[i] = a * a; break;
                        case Op::Sqrt:
                            if (a < 0.0) throw std::domain_error("sqrt: negative input");
                            out[i] = std::sqrt(a);
                            break;
                        case Op::Abs: out[i] = std::fabs(a); break;
                        case Op::Clamp: out[i] = a < n.lo ? n.lo : (a > n.hi ? n.hi : a); break;
                        default: break;
                    }
                }
                return;
            }
            case Op::MatVec: {
                const auto m = values(n.a);
                const auto v = values(n.b);
                const std::int32_t rows = nodes_[n.a].shape.rows;
                const std::int32_t cols = nodes_[n.a].shape.cols;
                for (std::int32_t r = 0; r < rows; ++r) {
                    double acc = 0.0;
                    for (std::int32_t c = 0; c < cols; ++c)
                        acc += m[static_cast<std::size_t>(r) * cols + c] * v[c];
                    out[r] = acc;
                }
                return;
            }
            case Op::Sum: case Op::Mean: {
                const auto xa = values(n.a);
                double acc = 0.0;
                for (double x : xa) acc += x;
                out[0] = n.op == Op::Sum ? acc : acc / static_cast<double>(xa.size());
                return;
            }
            case Op::LogSumExp: {
                const auto xa = values(n.a);
                double m = -std::numeric_limits<double>::infinity();
                for (double x : xa) m = std::max(m, x);
                if (!std::isfinite(m)) {
                    out[0] = m;  // all -inf (or contains +inf)
                    return;
                }
                double acc = 0.0;
                for (double x : xa) acc += std::exp(x - m);
                out[0] = m + std::log(acc);
                return;
            }
            case Op::StopGrad: {
                const auto xa = values(n.a);
                std::copy(xa.begin(), xa.end(), out.begin());
                return;
            }
            case Op::Pack: {
                for (std::int32_t i = 0; i < n.b; ++i)
                    out[i] = values(pack_inputs_[static_cast<std::size_t>(n.a) + i])[0];
                return;
            }
            case Op::Index: {
                out[0] = values(n.a)[n.b];
                return;
            }
            case Op::Row: {
                const auto m = values(n.a);
                const std::int32_t cols = nodes_[n.a].shape.cols;
                for (std::int32_t c = 0; c < cols; ++c)
                    out[c] = m[static_cast<std::size_t>(n.b) * cols + c];
                return;
            }
        }
    }

    void arm_backward(Variable root) {
        check_owned(root);
        if (backward_done_)
            throw std::logic_error("backward already called on this tape; reset() first");
        if (!root.shape.is_scalar())
            throw std::invalid_argument("backward: loss must be a scalar");
        backward_done_ = true;
        adj_.assign(val_.size(), 0.0);
        touched_.assign(nodes_.size(), 0);
    }

    std::span<double> adjoint(std::int32_t id) {
        const Node& n = nodes_[id];
        return {adj_.data() + n.ofs, static_cast<std::size_t>(n.shape.size())};
    }

    void touch(std::int32_t id) { touched_[static_cast<std::size_t>(id)] = 1; }

    // Accumulate g into input `src`, reducing over elements when the input
    // is a broadcast scalar.
    void accum_binary(std::int32_t src, std::span<const double> contrib) {
        auto dst = adjoint(src);
        touch(src);
        if (dst.size() == 1 && contrib.size() > 1) {
            double acc = 0.0;
            for (double c : contrib) acc += c;
            dst[0] += acc;
        } else {
            for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += contrib[i];
        }
    }

    void sweep(std::int32_t root) {
        if (root >= 0) {
            adjoint(root)[0] = 1.0;
            std::fill(touched_.begin(), touched_.end(), 0);
            touch(root);
        }
        std::vector<double> scratch;
        for (std::int32_t i = root; i >= 0; --i) {
            const Node& n = nodes_[i];
            if (!touched_[static_cast<std::size_t>(i)] || !n.needs_grad) continue;
            if (n.op == Op::Leaf || n.op == Op::StopGrad) {
                if (n.op == Op::StopGrad) continue;  // adjoint stops here
                continue;                            // leaves terminate the sweep
            }
            const auto g = adjoint(i);
            propagate(i, g, scratch);
        }
    }

    void propagate(std::int32_t id, std::span<const double> g, std::vector<double>& scratch) {
        const Node& n = nodes_[id];
        const auto grad_to = [&](std::int32_t src, auto&& fn) {
            if (src < 0 || !nodes_[src].needs_grad) return;
            scratch.resize(g.size());
            fn(std::span<double>(scratch));
            accum_binary(src, std::span<const double>(scratch.data(), g.size()));
        };
        switch (n.op) {
            case Op::Add: {
                grad_to(n.a, [&](std::span<double> s) { std::copy(g.begin(), g.end(), s.begin()); });
                grad_to(n.b, [&](std::span<double> s) { std::copy(g.begin(), g.end(), s.begin()); });
                return;
            }
            case Op::Sub: {
                grad_to(n.a, [&](std::span<double> s) { std::copy(g.begin(), g.end(), s.begin()); });
                grad_to(n.b, [&](std::span<double> s) {
                    for (std::size_t i = 0; i < s.size(); ++i) s[i] = -g[i];
                });
                return;
            }
            case Op::Mul: {
                const auto xa = values(n.a);
                const auto xb = values(n.b);
                grad_to(n.a, [&](std::span<double> s) {
                    for (std::size_t i = 0; i < s.size(); ++i) s[i] = g[i] * pick(xb, i);
                });
                grad_to(n.b, [&](std::span<double> s) {
                    for (std::size_t i = 0; i < s.size(); ++i) s[i] = g[i] * pick(xa, i);
                });
                return;
            }
            case Op::Div: {
                const auto xa = values(n.a);
                const auto xb = values(n.b);
                grad_to(n.a, [&](std::span<double> s) {
                    for (std::size_t i = 0; i < s.size(); ++i) s[i] = g[i] / pick(xb, i);
                });
                grad_to(n.b, [&](std::span<double> s) {
                    for (std::size_t i = 0; i < s.size(); ++i) {
                        const double b = pick(xb, i);
                        s[i] = -g[i] * pick(xa, i) / (b * b);
                    }
                });
                return;
            }
            case Op::Min: case Op::Max: {
                const auto xa = values(n.a);
                const auto xb = values(n.b);
                const bool take_a_on_tie = true;
                grad_to(n.a, [&](std::span<double> s) {
                    for (std::size_t i = 0; i < s.size(); ++i) {
                        const double a = pick(xa, i), b = pick(xb, i);
                        const bool a_wins = n.op == Op::Min ? (a < b || (a == b && take_a_on_tie))
                                                            : (a > b || (a == b && take_a_on_tie));
                        s[i] = a_wins ? g[i] : 0.0;
                    }
                });
                grad_to(n.b, [&](std::span<double> s) {
                    for (std::size_t i = 0; i < s.size(); ++i) {
                        const double a = pick(xa, i), b = pick(xb, i);
                        const bool a_wins = n.op == Op::Min ? (a < b || (a == b && take_a_on_tie))
                                                            : (a > b || (a == b && take_a_on_tie));
                        s[i] = a_wins ? 0.0 : g[i];
                    }
                });
                return;
            }
            case Op::Neg: {
                grad_to(n.a, [&](std::span<double> s) {
                    for (std::size_t i = 0; i < s.size(); ++i) s[i] = -g[i];
                });
                return;
            }
            case Op::Cos: case Op::Sin: case Op::Exp: case Op::Log: case Op::Tanh:
            case Op::Sigmoid: case Op::Square: case Op::Sqrt: case Op::Abs: case Op::Clamp: {
                const auto xa = values(n.a);
                const auto y = values(id);
                grad_to(n.a, [&](std::span<double> s) {
                    for (std::size_t i = 0; i < s.size(); ++i) {
                        double d = 0.0;
                        switch (n.op) {
                            case Op::Cos: d = -std::sin(xa[i]); break;
                            case Op::Sin: d = std::cos(xa[i]); break;
                            case Op::Exp: d = y[i]; break;
                            case Op::Log: d = 1.0 / xa[i]; break;
                            case Op::Tanh: d = 1.0 - y[i] * y[i]; break;
                            case Op::Sigmoid: d = y[i] * (1.0 - y[i]); break;
                            case Op::Square: d = 2.0 * xa[i]; break;
                            case Op::Sqrt: d = 0.5 / y[i]; break;
                            case Op::Abs: d = xa[i] > 0 ? 1.0 : (xa[i] < 0 ? -1.0 : 0.0); break;
                            case Op::Clamp: d = (xa[i] >= n.lo && xa[i] <= n.hi) ? 1.0 : 0.0; break;
                            default: break;
                        }
                        s[i] = g[i] * d;
                    }
                });
                return;
            }
            case Op::MatVec: {
                const std::int32_t rows = nodes_[n.a].shape.rows;
                const std::int32_t cols = nodes_[n.a].shape.cols;
                const auto m = values(n.a);
                const auto v = values(n.b);
                if (nodes_[n.a].needs_grad) {
                    auto dm = adjoint(n.a);
                    touch(n.a);
                    for (std::int32_t r = 0; r < rows; ++r)
                        for (std::int32_t c = 0; c < cols; ++c)
                            dm[static_cast<std::size_t>(r) * cols + c] += g[r] * v[c];
                }
                if (nodes_[n.b].needs_grad) {
                    auto dv = adjoint(n.b);
                    touch(n.b);
                    for (std::int32_t r = 0; r < rows; ++r)
                        for (std::int32_t c = 0; c < cols; ++c)
                            dv[c] += m[static_cast<std::size_t>(r) * cols + c] * g[r];
                }
                return;
            }
            case Op::Sum: case Op::Mean: {
                if (!nodes_[n.a].needs_grad) return;
                auto da = adjoint(n.a);
                touch(n.a);
                const double gi =
                    n.op == Op::Sum ? g[0] : g[0] / static_cast<double>(da.size());
                for (double& d : da) d += gi;
                return;
            }
            case Op::LogSumExp: {
                if (!nodes_[n.a].needs_grad) return;
                const double y = values(id)[0];
                if (!std::isfinite(y)) return;
                const auto xa = values(n.a);
                auto da = adjoint(n.a);
                touch(n.a);
                for (std::size_t i = 0; i < da.size(); ++i)
                    da[i] += g[0] * std::exp(xa[i] - y);
                return;
            }
            case Op::Pack: {
                for (std::int32_t i = 0; i < n.b; ++i) {
                    const std::int32_t src = pack_inputs_[static_cast<std::size_t>(n.a) + i];
                    if (!nodes_[src].needs_grad) continue;
                    adjoint(src)[0] += g[i];
                    touch(src);
                }
                return;
            }
            case Op::Index: {
                if (!nodes_[n.a].needs_grad) return;
                adjoint(n.a)[n.b] += g[0];
                touch(n.a);
                return;
            }
            case Op::Row: {
                if (!nodes_[n.a].needs_grad) return;
                const std::int32_t cols = nodes_[n.a].shape.cols;
                auto dm = adjoint(n.a);
                touch(n.a);
                for (std::int32_t c = 0; c < cols; ++c)
                    dm[static_cast<std::size_t>(n.b) * cols + c] += g[c];
                return;
            }
            case Op::Leaf: case Op::StopGrad:
                return;
        }
    }

    void collect(GradientMap& out) {
        out.clear();
        for (std::int32_t i = 0; i < static_cast<std::int32_t>(nodes_.size()); ++i) {
            const Node& n = nodes_[i];
            if (n.op != Op::Leaf || !n.needs_grad) continue;
            Tensor t(n.shape);
            if (touched_[static_cast<std::size_t>(i)]) {
                const auto a = adjoint(i);
                std::copy(a.begin(), a.end(), t.data().begin());
            }
            out.emplace(i, std::move(t));
        }
    }

    std::vector<Node> nodes_;
    std::vector<double> val_;
    std::vector<double> adj_;
    std::vector<std::uint8_t> touched_;
    std::vector<std::int32_t> pack_inputs_;
    bool backward_done_ = false;
};

// ---- operator sugar ----

inline Variable operator+(Variable a, Variable b) { return a.tape->add(a, b); }
inline Variable operator-(Variable a, Variable b) { return a.tape->sub(a, b); }
inline Variable operator*(Variable a, Variable b) { return a.tape->mul(a, b); }
inline Variable operator/(Variable a, Variable b) { return a.tape->div(a, b); }
inline Variable operator-(Variable a) { return a.tape->neg(a); }

inline Variable operator+(Variable a, double c) { return a.tape->add(a, a.tape->leaf(c)); }
inline Variable operator+(double c, Variable a) { return a.tape->add(a.tape->leaf(c), a); }
inline Variable operator-(Variable a, double c) { return a.tape->sub(a, a.tape->leaf(c)); }
inline Variable operator-(double c, Variable a) { return a.tape->sub(a.tape->leaf(c), a); }
inline Variable operator*(Variable a, double c) { return a.tape->mul(a, a.tape->leaf(c)); }
inline Variable operator*(double c, Variable a) { return a.tape->mul(a.tape->leaf(c), a); }
inline Variable operator/(Variable a, double c) { return a.tape->div(a, a.tape->leaf(c)); }
inline Variable operator/(double c, Variable a) { return a.tape->div(a.tape->leaf(c), a); }

}  // namespace qest::ad
