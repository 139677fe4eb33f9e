#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "awmp/tensor.hpp"

namespace awmp::ad {

/// Handle into a Tape. Cheap to copy; only valid for the tape that made it.
struct Var {
    std::size_t id = static_cast<std::size_t>(-1);
};

/// Reverse-mode tape over dense tensors. Nodes are appended in evaluation
/// order, which is already a topological order, so backward() is a single
/// reverse sweep. A tape is built fresh for every forward pass and is
/// single-threaded; independent tapes may run on different threads.
class Tape {
    struct Node {
        Tensor value;
        Tensor grad;             // same shape as value, zeroed on creation
        bool needs_grad = false; // leaves: requested; interior: any input needs it
        std::vector<std::size_t> inputs;
        // Adds this node's contribution to its inputs' grad accumulators.
        std::function<void(Tape&, const Node&)> pull;
    };

public:
    Var leaf(Tensor value, bool needs_grad = true) {
        return push(std::move(value), needs_grad, {}, nullptr);
    }

    Var constant(Tensor value) { return leaf(std::move(value), false); }
    Var constant(double v) { return leaf(Tensor::scalar(v), false); }

    const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
    const Tensor& grad(Var v) const { return nodes_.at(v.id).grad; }
    std::size_t size() const { return nodes_.size(); }

    void zero_grads() {
        for (Node& n : nodes_) n.grad.fill(0.0);
    }

    /// Reverse sweep from a scalar output. Accumulators are reset first, so
    /// repeated calls over the same tape give identical gradients.
    void backward(Var output) {
        const Node& out = nodes_.at(output.id);
        if (!out.value.is_scalar())
            throw std::invalid_argument("backward: output is not scalar, shape " +
                                        out.value.shape_str());
        zero_grads();
        nodes_[output.id].grad.fill(1.0);
        for (std::size_t i = output.id + 1; i-- > 0;) {
            const Node& n = nodes_[i];
            if (n.pull && n.needs_grad) n.pull(*this, n);
        }
    }

    // --- elementwise binary ops (broadcast: equal shape, row [N], col [B,1], scalar)

    Var add(Var a, Var b) { return binary_bcast("add", a, b, Combine::Add); }
    Var sub(Var a, Var b) { return binary_bcast("sub", a, b, Combine::Sub); }
    Var mul(Var a, Var b) { return binary_bcast("mul", a, b, Combine::Mul); }

    /// Elementwise minimum; ties route the gradient to the first argument.
    Var min(Var a, Var b) {
        const Tensor& ta = nodes_[a.id].value;
        const Tensor& tb = nodes_[b.id].value;
        if (!ta.same_shape(tb))
            throw std::invalid_argument("min: shape mismatch " + ta.shape_str() + " vs " +
                                        tb.shape_str());
        Tensor out = ta;
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(ta[i], tb[i]);
        return push(std::move(out), needs(a) || needs(b), {a.id, b.id},
                    [](Tape& t, const Node& n) {
                        const Tensor& va = t.nodes_[n.inputs[0]].value;
                        const Tensor& vb = t.nodes_[n.inputs[1]].value;
                        Tensor& ga = t.nodes_[n.inputs[0]].grad;
                        Tensor& gb = t.nodes_[n.inputs[1]].grad;
                        for (std::size_t i = 0; i < n.grad.size(); ++i) {
                            if (va[i] <= vb[i])
                                ga[i] += n.grad[i];
                            else
                                gb[i] += n.grad[i];
                        }
                    });
    }

    Var matmul(Var a, Var b) {
        const Tensor& ta = nodes_[a.id].value;
        const Tensor& tb = nodes_[b.id].value;
        Tensor out = awmp::matmul(ta, tb);
        return push(std::move(out), needs(a) || needs(b), {a.id, b.id},
                    [](Tape& t, const Node& n) {
                        Node& na = t.nodes_[n.inputs[0]];
                        Node& nb = t.nodes_[n.inputs[1]];
                        const std::size_t m = na.value.shape()[0];
                        const std::size_t k = na.value.shape()[1];
                        const std::size_t c = nb.value.shape()[1];
                        if (na.needs_grad)
                            matmul_accum_bt(n.grad.data(), nb.value.data(), na.grad.data(), m, k, c);
                        if (nb.needs_grad)
                            matmul_accum_at(na.value.data(), n.grad.data(), nb.grad.data(), m, k, c);
                    });
    }

    // --- elementwise unary ops

    Var neg(Var a) {
        return unary(a, [](double x) { return -x; },
                     [](double, double) { return -1.0; });
    }

    /// tanh'(x) = 1 - tanh(x)^2, reusing the forward value.
    Var tanh(Var a) {
        return unary(a, [](double x) { return std::tanh(x); },
                     [](double, double y) { return 1.0 - y * y; });
    }

    Var exp(Var a) {
        return unary(a, [](double x) { return std::exp(x); },
                     [](double, double y) { return y; });
    }

    Var log(Var a) {
        return unary(a, [](double x) { return std::log(x); },
                     [](double x, double) { return 1.0 / x; });
    }

    Var log1p(Var a) {
        return unary(a, [](double x) { return std::log1p(x); },
                     [](double x, double) { return 1.0 / (1.0 + x); });
    }

    Var square(Var a) {
        return unary(a, [](double x) { return x * x; },
                     [](double x, double) { return 2.0 * x; });
    }

    Var relu(Var a) {
        return unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
                     [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
    }

    Var softplus(Var a) {
        return unary(a, [](double x) { return stable_softplus(x); },
                     [](double x, double) { return sigmoid(x); });
    }

    Var atanh(Var a) {
        return unary(a, [](double x) { return std::atanh(x); },
                     [](double x, double) { return 1.0 / (1.0 - x * x); });
    }

    /// Hard clamp; gradient passes only strictly inside the interval.
    Var clamp(Var a, double lo, double hi) {
        return unary(a, [lo, hi](double x) { return std::min(std::max(x, lo), hi); },
                     [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
    }

    Var scale(Var a, double c) {
        return unary(a, [c](double x) { return c * x; },
                     [c](double, double) { return c; });
    }

    Var add_const(Var a, double c) {
        return unary(a, [c](double x) { return x + c; },
                     [](double, double) { return 1.0; });
    }

    // --- reductions

    Var sum(Var a) {
        const Tensor& ta = nodes_[a.id].value;
        double s = 0.0;
        for (std::size_t i = 0; i < ta.size(); ++i) s += ta[i];
        return push(Tensor::scalar(s), needs(a), {a.id}, [](Tape& t, const Node& n) {
            Node& na = t.nodes_[n.inputs[0]];
            if (!na.needs_grad) return;
            const double g = n.grad[0];
            for (std::size_t i = 0; i < na.grad.size(); ++i) na.grad[i] += g;
        });
    }

    Var mean(Var a) {
        const Tensor& ta = nodes_[a.id].value;
        double s = 0.0;
        for (std::size_t i = 0; i < ta.size(); ++i) s += ta[i];
        const double inv = 1.0 / static_cast<double>(ta.size());
        return push(Tensor::scalar(s * inv), needs(a), {a.id}, [inv](Tape& t, const Node& n) {
            Node& na = t.nodes_[n.inputs[0]];
            if (!na.needs_grad) return;
            const double g = n.grad[0] * inv;
            for (std::size_t i = 0; i < na.grad.size(); ++i) na.grad[i] += g;
        });
    }

    /// [B,N] -> [B,1], sum over columns.
    Var row_sum(Var a) {
        const Tensor& ta = require2d("row_sum", a);
        const std::size_t B = ta.shape()[0], N = ta.shape()[1];
        Tensor out = Tensor::zeros({B, 1});
        for (std::size_t r = 0; r < B; ++r) {
            double s = 0.0;
            for (std::size_t j = 0; j < N; ++j) s += ta(r, j);
            out[r] = s;
        }
        return push(std::move(out), needs(a), {a.id}, [N](Tape& t, const Node& n) {
            Node& na = t.nodes_[n.inputs[0]];
            if (!na.needs_grad) return;
            const std::size_t B = na.value.shape()[0];
            for (std::size_t r = 0; r < B; ++r) {
                const double g = n.grad[r];
                for (std::size_t j = 0; j < N; ++j) na.grad[r * N + j] += g;
            }
        });
    }

    /// [B,N] -> [1,N], sum over rows.
    Var col_sum(Var a) {
        const Tensor& ta = require2d("col_sum", a);
        const std::size_t B = ta.shape()[0], N = ta.shape()[1];
        Tensor out = Tensor::zeros({1, N});
        for (std::size_t r = 0; r < B; ++r)
            for (std::size_t j = 0; j < N; ++j) out[j] += ta(r, j);
        return push(std::move(out), needs(a), {a.id}, [B, N](Tape& t, const Node& n) {
            Node& na = t.nodes_[n.inputs[0]];
            if (!na.needs_grad) return;
            for (std::size_t r = 0; r < B; ++r)
                for (std::size_t j = 0; j < N; ++j) na.grad[r * N + j] += n.grad[j];
        });
    }

    // --- stable softmax family (row-wise over [B,N])

    Var softmax_rows(Var a) {
        const Tensor& ta = require2d("softmax_rows", a);
        Tensor out = ta;
        softmax_rows_inplace(out.data(), out.shape()[0], out.shape()[1]);
        return push(std::move(out), needs(a), {a.id}, [](Tape& t, const Node& n) {
            Node& na = t.nodes_[n.inputs[0]];
            if (!na.needs_grad) return;
            const std::size_t B = n.value.shape()[0], N = n.value.shape()[1];
            for (std::size_t r = 0; r < B; ++r) {
                const double* y = n.value.data() + r * N;
                const double* g = n.grad.data() + r * N;
                double dot = 0.0;
                for (std::size_t j = 0; j < N; ++j) dot += y[j] * g[j];
                double* gx = na.grad.data() + r * N;
                for (std::size_t j = 0; j < N; ++j) gx[j] += y[j] * (g[j] - dot);
            }
        });
    }

    Var log_softmax_rows(Var a) {
        const Tensor& ta = require2d("log_softmax_rows", a);
        const std::size_t B = ta.shape()[0], N = ta.shape()[1];
        Tensor out = Tensor::zeros({B, N});
        for (std::size_t r = 0; r < B; ++r) {
            const double* x = ta.data() + r * N;
            double m = x[0];
            for (std::size_t j = 1; j < N; ++j) m = std::max(m, x[j]);
            double s = 0.0;
            for (std::size_t j = 0; j < N; ++j) s += std::exp(x[j] - m);
            const double lse = m + std::log(s);
            for (std::size_t j = 0; j < N; ++j) out(r, j) = x[j] - lse;
        }
        return push(std::move(out), needs(a), {a.id}, [](Tape& t, const Node& n) {
            Node& na = t.nodes_[n.inputs[0]];
            if (!na.needs_grad) return;
            const std::size_t B = n.value.shape()[0], N = n.value.shape()[1];
            for (std::size_t r = 0; r < B; ++r) {
                const double* y = n.value.data() + r * N;  // log p
                const double* g = n.grad.data() + r * N;
                double gsum = 0.0;
                for (std::size_t j = 0; j < N; ++j) gsum += g[j];
                double* gx = na.grad.data() + r * N;
                for (std::size_t j = 0; j < N; ++j) gx[j] += g[j] - std::exp(y[j]) * gsum;
            }
        });
    }

    /// [B,N] -> [B,1]. Backward distributes via the row softmax.
    Var logsumexp_rows(Var a) {
        const Tensor& ta = require2d("logsumexp_rows", a);
        const std::size_t B = ta.shape()[0], N = ta.shape()[1];
        Tensor out = Tensor::zeros({B, 1});
        for (std::size_t r = 0; r < B; ++r) {
            const double* x = ta.data() + r * N;
            double m = x[0];
            for (std::size_t j = 1; j < N; ++j) m = std::max(m, x[j]);
            double s = 0.0;
            for (std::size_t j = 0; j < N; ++j) s += std::exp(x[j] - m);
            out[r] = m + std::log(s);
        }
        return push(std::move(out), needs(a), {a.id}, [N](Tape& t, const Node& n) {
            Node& na = t.nodes_[n.inputs[0]];
            if (!na.needs_grad) return;
            const std::size_t B = n.value.shape()[0];
            for (std::size_t r = 0; r < B; ++r) {
                const double lse = n.value[r];
                const double g = n.grad[r];
                const double* x = na.value.data() + r * N;
                double* gx = na.grad.data() + r * N;
                for (std::size_t j = 0; j < N; ++j) gx[j] += g * std::exp(x[j] - lse);
            }
        });
    }

    // --- shape ops

    /// Explicit broadcast of [1,N], [B,1], [N] or scalar up to [B,N].
    /// Backward sums over the expanded axes.
    Var broadcast_to(Var a, std::size_t B, std::size_t N) {
        const Tensor& ta = nodes_[a.id].value;
        Tensor out = Tensor::zeros({B, N});
        const BcastKind kind = bcast_kind(ta, B, N, "broadcast_to");
        for (std::size_t r = 0; r < B; ++r)
            for (std::size_t j = 0; j < N; ++j) out(r, j) = bcast_read(ta, kind, r, j, N);
        return push(std::move(out), needs(a), {a.id}, [kind, N](Tape& t, const Node& n) {
            Node& na = t.nodes_[n.inputs[0]];
            if (!na.needs_grad) return;
            const std::size_t B = n.value.shape()[0];
            for (std::size_t r = 0; r < B; ++r)
                for (std::size_t j = 0; j < N; ++j)
                    bcast_accum(na.grad, kind, r, j, N, n.grad(r, j));
        });
    }

    Var concat_cols(const std::vector<Var>& parts) {
        if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
        const std::size_t B = require2d("concat_cols", parts[0]).shape()[0];
        std::size_t total = 0;
        std::vector<std::size_t> widths, ids;
        bool ng = false;
        for (Var p : parts) {
            const Tensor& tp = require2d("concat_cols", p);
            if (tp.shape()[0] != B)
                throw std::invalid_argument("concat_cols: row mismatch " + tp.shape_str());
            widths.push_back(tp.shape()[1]);
            total += tp.shape()[1];
            ids.push_back(p.id);
            ng = ng || needs(p);
        }
        Tensor out = Tensor::zeros({B, total});
        std::size_t off = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
            const Tensor& tp = nodes_[ids[k]].value;
            for (std::size_t r = 0; r < B; ++r)
                for (std::size_t j = 0; j < widths[k]; ++j) out(r, off + j) = tp(r, j);
            off += widths[k];
        }
        return push(std::move(out), ng, ids, [widths](Tape& t, const Node& n) {
            const std::size_t B = n.value.shape()[0];
            const std::size_t total = n.value.shape()[1];
            std::size_t off = 0;
            for (std::size_t k = 0; k < n.inputs.size(); ++k) {
                Node& np = t.nodes_[n.inputs[k]];
                if (np.needs_grad) {
                    for (std::size_t r = 0; r < B; ++r)
                        for (std::size_t j = 0; j < widths[k]; ++j)
                            np.grad(r, j) += n.grad[r * total + off + j];
                }
                off += widths[k];
            }
        });
    }

    /// Columns [c0, c1) of a [B,N] tensor.
    Var slice_cols(Var a, std::size_t c0, std::size_t c1) {
        const Tensor& ta = require2d("slice_cols", a);
        const std::size_t B = ta.shape()[0], N = ta.shape()[1];
        if (c0 >= c1 || c1 > N)
            throw std::invalid_argument("slice_cols: range [" + std::to_string(c0) + "," +
                                        std::to_string(c1) + ") of " + ta.shape_str());
        Tensor out = Tensor::zeros({B, c1 - c0});
        for (std::size_t r = 0; r < B; ++r)
            for (std::size_t j = c0; j < c1; ++j) out(r, j - c0) = ta(r, j);
        return push(std::move(out), needs(a), {a.id}, [c0, N](Tape& t, const Node& n) {
            Node& na = t.nodes_[n.inputs[0]];
            if (!na.needs_grad) return;
            const std::size_t B = n.value.shape()[0], W = n.value.shape()[1];
            for (std::size_t r = 0; r < B; ++r)
                for (std::size_t j = 0; j < W; ++j) na.grad[r * N + c0 + j] += n.grad(r, j);
        });
    }

private:
    enum class Combine { Add, Sub, Mul };
    enum class BcastKind { Same, Row, Col, Scalar };

    std::vector<Node> nodes_;

    bool needs(Var v) const { return nodes_[v.id].needs_grad; }

    Var push(Tensor value, bool needs_grad, std::vector<std::size_t> inputs,
             std::function<void(Tape&, const Node&)> pull) {
        Node n;
        n.grad = Tensor::zeros(value.shape());
        n.value = std::move(value);
        n.needs_grad = needs_grad;
        n.inputs = std::move(inputs);
        n.pull = std::move(pull);
        nodes_.push_back(std::move(n));
        return Var{nodes_.size() - 1};
    }

    const Tensor& require2d(const char* op, Var v) const {
        const Tensor& t = nodes_[v.id].value;
        if (t.rank() != 2)
            throw std::invalid_argument(std::string(op) + ": expected rank-2, got " +
                                        t.shape_str());
        return t;
    }

    template <class F, class DF>
    Var unary(Var a, F f, DF df) {
        const Tensor& ta = nodes_[a.id].value;
        Tensor out = ta;
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(ta[i]);
        return push(std::move(out), needs(a), {a.id}, [df](Tape& t, const Node& n) {
            Node& na = t.nodes_[n.inputs[0]];
            if (!na.needs_grad) return;
            for (std::size_t i = 0; i < n.grad.size(); ++i)
                na.grad[i] += n.grad[i] * df(na.value[i], n.value[i]);
        });
    }

    static BcastKind bcast_kind(const Tensor& small, std::size_t B, std::size_t N,
                                const char* op) {
        if (small.rank() == 2 && small.shape()[0] == B && small.shape()[1] == N)
            return BcastKind::Same;
        if (small.size() == 1) return BcastKind::Scalar;
        if ((small.rank() == 1 && small.shape()[0] == N) ||
            (small.rank() == 2 && small.shape()[0] == 1 && small.shape()[1] == N))
            return BcastKind::Row;
        if (small.rank() == 2 && small.shape()[0] == B && small.shape()[1] == 1)
            return BcastKind::Col;
        throw std::invalid_argument(std::string(op) + ": cannot broadcast " + small.shape_str() +
                                    " to [" + std::to_string(B) + "," + std::to_string(N) + "]");
    }

    static double bcast_read(const Tensor& t, BcastKind k, std::size_t r, std::size_t j,
                             std::size_t N) {
        switch (k) {
            case BcastKind::Same: return t[r * N + j];
            case BcastKind::Row: return t[j];
            case BcastKind::Col: return t[r];
            default: return t[0];
        }
    }

    static void bcast_accum(Tensor& g, BcastKind k, std::size_t r, std::size_t j, std::size_t N,
                            double v) {
        switch (k) {
            case BcastKind::Same: g[r * N + j] += v; break;
            case BcastKind::Row: g[j] += v; break;
            case BcastKind::Col: g[r] += v; break;
            default: g[0] += v; break;
        }
    }

    Var binary_bcast(const char* op, Var a, Var b, Combine c) {
        const Tensor& ta = nodes_[a.id].value;
        const Tensor& tb = nodes_[b.id].value;

        // Same-shape fast path (any rank).
        if (ta.same_shape(tb)) {
            Tensor out = ta;
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = combine(c, ta[i], tb[i]);
            return push(std::move(out), needs(a) || needs(b), {a.id, b.id},
                        [c](Tape& t, const Node& n) {
                            Node& na = t.nodes_[n.inputs[0]];
                            Node& nb = t.nodes_[n.inputs[1]];
                            for (std::size_t i = 0; i < n.grad.size(); ++i) {
                                const double g = n.grad[i];
                                if (na.needs_grad) na.grad[i] += g * dleft(c, nb.value[i]);
                                if (nb.needs_grad) nb.grad[i] += g * dright(c, na.value[i]);
                            }
                        });
        }

        // Broadcast path: the larger operand must be [B,N].
        const bool a_big = ta.size() >= tb.size();
        const Tensor& big = a_big ? ta : tb;
        const Tensor& small = a_big ? tb : ta;
        if (big.rank() != 2)
            throw std::invalid_argument(std::string(op) + ": shape mismatch " + ta.shape_str() +
                                        " vs " + tb.shape_str());
        const std::size_t B = big.shape()[0], N = big.shape()[1];
        const BcastKind kind = bcast_kind(small, B, N, op);

        Tensor out = Tensor::zeros({B, N});
        for (std::size_t r = 0; r < B; ++r)
            for (std::size_t j = 0; j < N; ++j) {
                const double sv = bcast_read(small, kind, r, j, N);
                const double bv = big(r, j);
                out(r, j) = a_big ? combine(c, bv, sv) : combine(c, sv, bv);
            }
        return push(std::move(out), needs(a) || needs(b), {a.id, b.id},
                    [c, kind, a_big, N](Tape& t, const Node& n) {
                        Node& na = t.nodes_[n.inputs[0]];
                        Node& nb = t.nodes_[n.inputs[1]];
                        Node& nbig = a_big ? na : nb;
                        Node& nsmall = a_big ? nb : na;
                        const std::size_t B = n.value.shape()[0];
                        for (std::size_t r = 0; r < B; ++r)
                            for (std::size_t j = 0; j < N; ++j) {
                                const double g = n.grad(r, j);
                                const double sv = bcast_read(nsmall.value, kind, r, j, N);
                                const double bv = nbig.value(r, j);
                                // left/right derivative depends on operand order
                                const double dbig = a_big ? dleft(c, sv) : dright(c, sv);
                                const double dsmall = a_big ? dright(c, bv) : dleft(c, bv);
                                if (nbig.needs_grad) nbig.grad(r, j) += g * dbig;
                                if (nsmall.needs_grad)
                                    bcast_accum(nsmall.grad, kind, r, j, N, g * dsmall);
                            }
                    });
    }

    static double combine(Combine c, double l, double r) {
        switch (c) {
            case Combine::Add: return l + r;
            case Combine::Sub: return l - r;
            default: return l * r;
        }
    }
    // derivative w.r.t. left operand given the right value, and vice versa
    static double dleft(Combine c, double rval) {
        switch (c) {
            case Combine::Add: return 1.0;
            case Combine::Sub: return 1.0;
            default: return rval;
        }
    }
    static double dright(Combine c, double lval) {
        switch (c) {
            case Combine::Add: return 1.0;
            case Combine::Sub: return -1.0;
            default: return lval;
        }
    }
};

/// Max relative error between analytic gradients and central finite
/// differences over a parameter set. `eval` must be a deterministic scalar
/// function of the parameters; `analytic` is the gradient list in the same
/// order as `params` (computed however the caller likes, typically one tape
/// backward). Relative error per entry: |a - n| / max(1e-8, |a| + |n|).
inline double grad_check(const std::function<double()>& eval,
                         const std::vector<Tensor*>& params,
                         const std::vector<Tensor>& analytic, double step = 1e-5) {
    double worst = 0.0;
    for (std::size_t p = 0; p < params.size(); ++p) {
        Tensor& t = *params[p];
        for (std::size_t i = 0; i < t.size(); ++i) {
            const double keep = t[i];
            t[i] = keep + step;
            const double fp = eval();
            t[i] = keep - step;
            const double fm = eval();
            t[i] = keep;
            const double numeric = (fp - fm) / (2.0 * step);
            const double a = analytic[p][i];
            const double err = std::fabs(a - numeric) / std::max(1e-8, std::fabs(a) + std::fabs(numeric));
            worst = std::max(worst, err);
        }
    }
    return worst;
}

}  // namespace awmp::ad
