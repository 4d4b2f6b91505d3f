// Define-by-run reverse-mode autodiff over Tensor.
//
// A Tape owns every value produced during one forward pass. Nodes are appended
// in execution order, so the tape is topologically sorted by construction and
// backward() is a single reverse sweep. Var is a cheap handle (tape, index).
#pragma once

#include <Eigen/Core>

#include <deque>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tensor.hpp"

namespace pointmamba {

class Tape;

class Var {
public:
    Var() = default;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape& tape() const { return *tape_; }
    std::size_t id() const { return id_; }
    bool valid() const { return tape_ != nullptr; }

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    std::size_t dim(std::size_t i) const { return value().dim(i); }
    bool requires_grad() const;
    const Tensor& grad() const;

private:
    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

class Tape {
public:
    // Receives the gradient of the node's output; accumulates into inputs.
    using BackwardFn = std::function<void(Tape&, const Tensor&)>;

    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool grad_enabled() const { return grad_enabled_; }
    std::size_t size() const { return nodes_.size(); }

    Var leaf(Tensor value, bool requires_grad = false)
    {
        Node n;
        n.value = std::move(value);
        n.requires_grad = requires_grad && grad_enabled_;
        nodes_.push_back(std::move(n));
        return {this, nodes_.size() - 1};
    }

    Var constant(Tensor value) { return leaf(std::move(value), false); }

    Var record(const char* op, Tensor value, std::initializer_list<Var> inputs, BackwardFn fn)
    {
        return record(op, std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(fn));
    }

    Var record(const char* op, Tensor value, std::span<const Var> inputs, BackwardFn fn)
    {
        if (!value.all_finite()) throw Error(std::string(op) + ": non-finite output");
        bool needs_grad = false;
        for (const auto& in : inputs) {
            if (&in.tape() != this) throw Error(std::string(op) + ": input recorded on a different tape");
            needs_grad = needs_grad || nodes_[in.id()].requires_grad;
        }
        Node n;
        n.value = std::move(value);
        n.requires_grad = needs_grad;
        if (needs_grad) n.backward = std::move(fn);
        nodes_.push_back(std::move(n));
        return {this, nodes_.size() - 1};
    }

    const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
    bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

    // Zero-initialized gradient accumulator for a node, or nullptr when the
    // node does not participate in differentiation.
    Tensor* grad_slot(std::size_t id)
    {
        auto& n = nodes_.at(id);
        if (!n.requires_grad) return nullptr;
        if (!n.grad) n.grad = Tensor::zeros(n.value.shape());
        return &*n.grad;
    }

    const Tensor& grad(std::size_t id) const
    {
        const auto& n = nodes_.at(id);
        if (!n.requires_grad) throw Error("grad: node does not require grad");
        if (!n.grad) throw Error("grad: backward has not reached this node");
        return *n.grad;
    }

    void backward(Var loss)
    {
        if (nodes_.empty()) throw Error("backward: empty tape");
        if (&loss.tape() != this) throw Error("backward: loss belongs to a different tape");
        if (backward_done_) throw Error("backward: already run on this tape; call zero_grad() first");
        const auto& lv = nodes_.at(loss.id()).value;
        if (lv.numel() != 1) throw Error("backward: loss must be scalar, got shape " + shape_str(lv.shape()));
        if (!nodes_[loss.id()].requires_grad) throw Error("backward: loss does not depend on any requires_grad leaf");
        backward_done_ = true;
        grad_slot(loss.id())->data()[0] = 1.0;
        for (std::size_t i = loss.id() + 1; i-- > 0;) {
            auto& n = nodes_[i];
            if (!n.backward || !n.grad) continue;
            n.backward(*this, *n.grad);
        }
    }

    void zero_grad()
    {
        for (auto& n : nodes_) n.grad.reset();
        backward_done_ = false;
    }

private:
    struct Node {
        Tensor value;
        std::optional<Tensor> grad;
        bool requires_grad = false;
        BackwardFn backward;
    };

    // deque keeps references to earlier values valid while the tape grows.
    std::deque<Node> nodes_;
    bool grad_enabled_;
    bool backward_done_ = false;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline bool Var::requires_grad() const { return tape_->requires_grad(id_); }
inline const Tensor& Var::grad() const { return tape_->grad(id_); }

namespace detail {

inline void require(bool ok, const std::string& msg)
{
    if (!ok) throw Error(msg);
}

inline double sigmoid(double x)
{
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

template <class F, class DF>
Var unary(const char* op, Var x, F f, DF df, std::uint64_t flops_per_elem)
{
    const Tensor& xv = x.value();
    Tensor out(xv.shape());
    for (std::size_t i = 0; i < xv.numel(); ++i) out[i] = f(xv[i]);
    flops::add(flops_per_elem * xv.numel());
    const auto xid = x.id();
    auto& tape = x.tape();
    const auto self = tape.size();
    return tape.record(op, std::move(out), {x}, [xid, self, df](Tape& t, const Tensor& g) {
        Tensor* gx = t.grad_slot(xid);
        if (!gx) return;
        const Tensor& xv = t.value(xid);
        const Tensor& yv = t.value(self);
        for (std::size_t i = 0; i < g.numel(); ++i) (*gx)[i] += g[i] * df(xv[i], yv[i]);
    });
}

// Row-major broadcasting plan with per-operand strides in output index space.
struct BroadcastPlan {
    Shape out;
    std::vector<std::size_t> stride_a;
    std::vector<std::size_t> stride_b;
    bool same = false;
};

inline BroadcastPlan plan_broadcast(const char* op, const Shape& a, const Shape& b)
{
    BroadcastPlan p;
    if (a == b) {
        p.out = a;
        p.same = true;
        return p;
    }
    const std::size_t r = std::max(a.size(), b.size());
    p.out.assign(r, 1);
    p.stride_a.assign(r, 0);
    p.stride_b.assign(r, 0);
    std::size_t sa = 1, sb = 1;
    for (std::size_t k = 0; k < r; ++k) {
        const std::size_t axis = r - 1 - k;
        const std::size_t da = k < a.size() ? a[a.size() - 1 - k] : 1;
        const std::size_t db = k < b.size() ? b[b.size() - 1 - k] : 1;
        if (da != db && da != 1 && db != 1) {
            throw Error(std::string(op) + ": cannot broadcast shapes " + shape_str(a) + " and " + shape_str(b));
        }
        p.out[axis] = std::max(da, db);
        p.stride_a[axis] = da == 1 ? 0 : sa;
        p.stride_b[axis] = db == 1 ? 0 : sb;
        sa *= da;
        sb *= db;
    }
    return p;
}

template <class F>
void for_each_broadcast(const BroadcastPlan& p, F&& f)
{
    const std::size_t n = numel_of(p.out);
    if (p.same) {
        for (std::size_t i = 0; i < n; ++i) f(i, i, i);
        return;
    }
    const std::size_t r = p.out.size();
    std::vector<std::size_t> counter(r, 0);
    std::size_t ia = 0, ib = 0;
    for (std::size_t i = 0; i < n; ++i) {
        f(i, ia, ib);
        for (std::size_t d = r; d-- > 0;) {
            ++counter[d];
            ia += p.stride_a[d];
            ib += p.stride_b[d];
            if (counter[d] < p.out[d]) break;
            ia -= p.stride_a[d] * p.out[d];
            ib -= p.stride_b[d] * p.out[d];
            counter[d] = 0;
        }
    }
}

template <class F, class DA, class DB>
Var binary(const char* op, Var a, Var b, F f, DA da, DB db)
{
    auto plan = plan_broadcast(op, a.shape(), b.shape());
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    Tensor out(plan.out);
    for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = f(av[ia], bv[ib]); });
    flops::add(out.numel());
    const auto aid = a.id(), bid = b.id();
    return a.tape().record(op, std::move(out), {a, b}, [aid, bid, plan, da, db](Tape& t, const Tensor& g) {
        Tensor* ga = t.grad_slot(aid);
        Tensor* gb = t.grad_slot(bid);
        const Tensor& av = t.value(aid);
        const Tensor& bv = t.value(bid);
        for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) {
            if (ga) (*ga)[ia] += g[i] * da(av[ia], bv[ib]);
            if (gb) (*gb)[ib] += g[i] * db(av[ia], bv[ib]);
        });
    });
}

// Splits a shape around `axis` into (outer, extent, inner) for strided loops.
struct AxisSplit {
    std::size_t outer = 1, extent = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis)
{
    AxisSplit r;
    for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
    r.extent = s[axis];
    for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
    return r;
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

inline Var add(Var a, Var b)
{
    return detail::binary(
        "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
        [](double, double) { return 1.0; });
}

inline Var sub(Var a, Var b)
{
    return detail::binary(
        "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
        [](double, double) { return -1.0; });
}

inline Var mul(Var a, Var b)
{
    return detail::binary(
        "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
        [](double x, double) { return x; });
}

inline Var neg(Var x)
{
    return detail::unary(
        "neg", x, [](double v) { return -v; }, [](double, double) { return -1.0; }, 1);
}

inline Var scale(Var x, double c)
{
    return detail::unary(
        "scale", x, [c](double v) { return c * v; }, [c](double, double) { return c; }, 1);
}

inline Var exp(Var x)
{
    return detail::unary(
        "exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; }, 1);
}

inline Var log(Var x)
{
    return detail::unary(
        "log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; }, 1);
}

inline Var sigmoid(Var x)
{
    return detail::unary(
        "sigmoid", x, [](double v) { return detail::sigmoid(v); },
        [](double, double y) { return y * (1.0 - y); }, 1);
}

inline Var silu(Var x)
{
    return detail::unary(
        "silu", x, [](double v) { return v * detail::sigmoid(v); },
        [](double v, double) {
            const double s = detail::sigmoid(v);
            return s + v * s * (1.0 - s);
        },
        1);
}

// log(1 + exp(x)), evaluated without overflow.
inline Var softplus(Var x)
{
    return detail::unary(
        "softplus", x, [](double v) { return detail::softplus(v); },
        [](double v, double) { return detail::sigmoid(v); }, 1);
}

// ---------------------------------------------------------------- linear algebra

// x (..., K) times w (K, J) -> (..., J). Leading dims of x are flattened into rows.
inline Var matmul(Var x, Var w)
{
    const Shape& xs = x.shape();
    const Shape& ws = w.shape();
    detail::require(xs.size() >= 1 && ws.size() == 2 && xs.back() == ws[0],
                    "matmul: shape mismatch " + shape_str(xs) + " x " + shape_str(ws));
    const std::size_t k = ws[0], j = ws[1];
    const std::size_t rows = x.value().numel() / k;
    Shape os = xs;
    os.back() = j;
    Tensor out(os);
    detail::MutMap(out.ptr(), rows, j).noalias() =
        detail::ConstMap(x.value().ptr(), rows, k) * detail::ConstMap(w.value().ptr(), k, j);
    flops::add(2 * rows * k * j);
    const auto xid = x.id(), wid = w.id();
    return x.tape().record("matmul", std::move(out), {x, w}, [xid, wid, rows, k, j](Tape& t, const Tensor& g) {
        detail::ConstMap gm(g.ptr(), rows, j);
        if (Tensor* gx = t.grad_slot(xid)) {
            detail::MutMap(gx->ptr(), rows, k).noalias() += gm * detail::ConstMap(t.value(wid).ptr(), k, j).transpose();
        }
        if (Tensor* gw = t.grad_slot(wid)) {
            detail::MutMap(gw->ptr(), k, j).noalias() += detail::ConstMap(t.value(xid).ptr(), rows, k).transpose() * gm;
        }
    });
}

// Normalizes over the last axis, then applies per-channel scale and bias.
inline Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5)
{
    const Shape& xs = x.shape();
    detail::require(!xs.empty(), "layer_norm: scalar input");
    const std::size_t c = xs.back();
    detail::require(gamma.shape() == Shape{c} && beta.shape() == Shape{c},
                    "layer_norm: scale/bias shapes " + shape_str(gamma.shape()) + ", " + shape_str(beta.shape()) +
                        " do not match input " + shape_str(xs));
    const std::size_t rows = x.value().numel() / c;
    const Tensor& xv = x.value();
    const Tensor& gv = gamma.value();
    const Tensor& bv = beta.value();
    Tensor out(xs);
    std::vector<double> mean(rows), rstd(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = xv.ptr() + r * c;
        double mu = 0.0;
        for (std::size_t i = 0; i < c; ++i) mu += row[i];
        mu /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t i = 0; i < c; ++i) var += (row[i] - mu) * (row[i] - mu);
        var /= static_cast<double>(c);
        const double rs = 1.0 / std::sqrt(var + eps);
        mean[r] = mu;
        rstd[r] = rs;
        double* o = out.ptr() + r * c;
        for (std::size_t i = 0; i < c; ++i) o[i] = (row[i] - mu) * rs * gv[i] + bv[i];
    }
    flops::add(8 * rows * c);
    const auto xid = x.id(), gid = gamma.id(), bid = beta.id();
    return x.tape().record(
        "layer_norm", std::move(out), {x, gamma, beta},
        [xid, gid, bid, rows, c, mean = std::move(mean), rstd = std::move(rstd)](Tape& t, const Tensor& g) {
            const Tensor& xv = t.value(xid);
            const Tensor& gv = t.value(gid);
            Tensor* gx = t.grad_slot(xid);
            Tensor* gg = t.grad_slot(gid);
            Tensor* gb = t.grad_slot(bid);
            std::vector<double> dxhat(c);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* row = xv.ptr() + r * c;
                const double* gr = g.ptr() + r * c;
                double m1 = 0.0, m2 = 0.0;
                for (std::size_t i = 0; i < c; ++i) {
                    const double xhat = (row[i] - mean[r]) * rstd[r];
                    if (gg) (*gg)[i] += gr[i] * xhat;
                    if (gb) (*gb)[i] += gr[i];
                    dxhat[i] = gr[i] * gv[i];
                    m1 += dxhat[i];
                    m2 += dxhat[i] * xhat;
                }
                if (!gx) continue;
                m1 /= static_cast<double>(c);
                m2 /= static_cast<double>(c);
                double* gxr = gx->ptr() + r * c;
                for (std::size_t i = 0; i < c; ++i) {
                    const double xhat = (row[i] - mean[r]) * rstd[r];
                    gxr[i] += rstd[r] * (dxhat[i] - m1 - xhat * m2);
                }
            }
        });
}

// Depthwise causal convolution along the sequence axis of x (..., N, E):
// y[n, e] = bias[e] + sum_j w[e, j] * x[n - j, e], with x[n < 0] = 0.
inline Var causal_conv1d(Var x, Var w, Var bias)
{
    const Shape& xs = x.shape();
    detail::require(xs.size() >= 2, "causal_conv1d: input needs (..., N, E), got " + shape_str(xs));
    const std::size_t e = xs.back(), n = xs[xs.size() - 2];
    detail::require(w.shape().size() == 2 && w.dim(0) == e && bias.shape() == Shape{e},
                    "causal_conv1d: weight " + shape_str(w.shape()) + " / bias " + shape_str(bias.shape()) +
                        " incompatible with input " + shape_str(xs));
    const std::size_t k = w.dim(1);
    const std::size_t batch = x.value().numel() / (n * e);
    const Tensor& xv = x.value();
    const Tensor& wv = w.value();
    const Tensor& bv = bias.value();
    Tensor out(xs);
    for (std::size_t b = 0; b < batch; ++b) {
        const double* xb = xv.ptr() + b * n * e;
        double* ob = out.ptr() + b * n * e;
        for (std::size_t t = 0; t < n; ++t) {
            for (std::size_t c = 0; c < e; ++c) {
                double acc = bv[c];
                const std::size_t taps = std::min(k, t + 1);
                for (std::size_t j = 0; j < taps; ++j) acc += wv[c * k + j] * xb[(t - j) * e + c];
                ob[t * e + c] = acc;
            }
        }
    }
    flops::add(2 * batch * n * e * k);
    const auto xid = x.id(), wid = w.id(), bid = bias.id();
    return x.tape().record("causal_conv1d", std::move(out), {x, w, bias},
                           [xid, wid, bid, batch, n, e, k](Tape& t, const Tensor& g) {
                               const Tensor& xv = t.value(xid);
                               const Tensor& wv = t.value(wid);
                               Tensor* gx = t.grad_slot(xid);
                               Tensor* gw = t.grad_slot(wid);
                               Tensor* gb = t.grad_slot(bid);
                               for (std::size_t b = 0; b < batch; ++b) {
                                   const double* xb = xv.ptr() + b * n * e;
                                   const double* gbt = g.ptr() + b * n * e;
                                   for (std::size_t s = 0; s < n; ++s) {
                                       for (std::size_t c = 0; c < e; ++c) {
                                           const double go = gbt[s * e + c];
                                           if (gb) (*gb)[c] += go;
                                           const std::size_t taps = std::min(k, s + 1);
                                           for (std::size_t j = 0; j < taps; ++j) {
                                               if (gw) (*gw)[c * k + j] += go * xb[(s - j) * e + c];
                                               if (gx) (*gx)[b * n * e + (s - j) * e + c] += go * wv[c * k + j];
                                           }
                                       }
                                   }
                               }
                           });
}

// ---------------------------------------------------------------- shape ops

inline Var reshape(Var x, Shape shape)
{
    Tensor out = x.value().reshaped(std::move(shape));
    const auto xid = x.id();
    return x.tape().record("reshape", std::move(out), {x}, [xid](Tape& t, const Tensor& g) {
        Tensor* gx = t.grad_slot(xid);
        for (std::size_t i = 0; i < g.numel(); ++i) (*gx)[i] += g[i];
    });
}

inline Tensor reverse_tensor(const Tensor& x, std::size_t axis)
{
    detail::require(axis < x.rank(), "reverse: axis out of range for " + shape_str(x.shape()));
    const auto s = detail::split_axis(x.shape(), axis);
    Tensor out(x.shape());
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t a = 0; a < s.extent; ++a) {
            const double* src = x.ptr() + (o * s.extent + a) * s.inner;
            double* dst = out.ptr() + (o * s.extent + (s.extent - 1 - a)) * s.inner;
            std::copy(src, src + s.inner, dst);
        }
    }
    return out;
}

inline Var reverse(Var x, std::size_t axis)
{
    Tensor out = reverse_tensor(x.value(), axis);
    const auto xid = x.id();
    return x.tape().record("reverse", std::move(out), {x}, [xid, axis](Tape& t, const Tensor& g) {
        Tensor* gx = t.grad_slot(xid);
        Tensor back = reverse_tensor(g, axis);
        for (std::size_t i = 0; i < g.numel(); ++i) (*gx)[i] += back[i];
    });
}

inline Var slice(Var x, std::size_t axis, std::size_t begin, std::size_t end)
{
    const Shape& xs = x.shape();
    detail::require(axis < xs.size() && begin < end && end <= xs[axis],
                    "slice: range [" + std::to_string(begin) + ", " + std::to_string(end) + ") invalid for axis " +
                        std::to_string(axis) + " of " + shape_str(xs));
    const auto s = detail::split_axis(xs, axis);
    Shape os = xs;
    os[axis] = end - begin;
    Tensor out(os);
    const std::size_t len = (end - begin) * s.inner;
    for (std::size_t o = 0; o < s.outer; ++o) {
        const double* src = x.value().ptr() + (o * s.extent + begin) * s.inner;
        std::copy(src, src + len, out.ptr() + o * len);
    }
    const auto xid = x.id();
    return x.tape().record("slice", std::move(out), {x}, [xid, s, begin, len](Tape& t, const Tensor& g) {
        Tensor* gx = t.grad_slot(xid);
        for (std::size_t o = 0; o < s.outer; ++o) {
            double* dst = gx->ptr() + (o * s.extent + begin) * s.inner;
            for (std::size_t i = 0; i < len; ++i) dst[i] += g[o * len + i];
        }
    });
}

inline Var concat(std::span<const Var> parts, std::size_t axis)
{
    detail::require(!parts.empty(), "concat: no inputs");
    Shape os = parts[0].shape();
    detail::require(axis < os.size(), "concat: axis out of range for " + shape_str(os));
    std::size_t total = 0;
    for (const auto& p : parts) {
        Shape ps = p.shape();
        detail::require(ps.size() == os.size(), "concat: rank mismatch " + shape_str(os) + " vs " + shape_str(ps));
        total += ps[axis];
        ps[axis] = os[axis];
        detail::require(ps == os, "concat: shapes " + shape_str(os) + " and " + shape_str(p.shape()) +
                                      " differ off the concat axis");
    }
    os[axis] = total;
    Tensor out(os);
    const auto so = detail::split_axis(os, axis);
    std::vector<std::size_t> ids, offsets, extents;
    std::size_t at = 0;
    for (const auto& p : parts) {
        const auto sp = detail::split_axis(p.shape(), axis);
        for (std::size_t o = 0; o < so.outer; ++o) {
            const double* src = p.value().ptr() + o * sp.extent * sp.inner;
            std::copy(src, src + sp.extent * sp.inner, out.ptr() + (o * so.extent + at) * so.inner);
        }
        ids.push_back(p.id());
        offsets.push_back(at);
        extents.push_back(sp.extent);
        at += sp.extent;
    }
    return parts[0].tape().record("concat", std::move(out), parts, [ids, offsets, extents, so](Tape& t, const Tensor& g) {
        for (std::size_t p = 0; p < ids.size(); ++p) {
            Tensor* gp = t.grad_slot(ids[p]);
            if (!gp) continue;
            const std::size_t len = extents[p] * so.inner;
            for (std::size_t o = 0; o < so.outer; ++o) {
                const double* src = g.ptr() + (o * so.extent + offsets[p]) * so.inner;
                double* dst = gp->ptr() + o * len;
                for (std::size_t i = 0; i < len; ++i) dst[i] += src[i];
            }
        }
    });
}

inline Var concat(std::initializer_list<Var> parts, std::size_t axis)
{
    return concat(std::span<const Var>(parts.begin(), parts.size()), axis);
}

// ---------------------------------------------------------------- reductions

inline Var sum(Var x)
{
    double acc = 0.0;
    for (double v : x.value().data()) acc += v;
    flops::add(x.value().numel());
    const auto xid = x.id();
    return x.tape().record("sum", Tensor::scalar(acc), {x}, [xid](Tape& t, const Tensor& g) {
        Tensor* gx = t.grad_slot(xid);
        for (auto& v : gx->data()) v += g[0];
    });
}

inline Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().numel())); }

namespace detail {

inline Shape drop_axis(const Shape& s, std::size_t axis)
{
    Shape out = s;
    out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
    return out;
}

}  // namespace detail

inline Var sum(Var x, std::size_t axis)
{
    const Shape& xs = x.shape();
    detail::require(axis < xs.size(), "sum: axis out of range for " + shape_str(xs));
    const auto s = detail::split_axis(xs, axis);
    Tensor out(detail::drop_axis(xs, axis));
    const Tensor& xv = x.value();
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t a = 0; a < s.extent; ++a)
            for (std::size_t i = 0; i < s.inner; ++i) out[o * s.inner + i] += xv[(o * s.extent + a) * s.inner + i];
    flops::add(xv.numel());
    const auto xid = x.id();
    return x.tape().record("sum_axis", std::move(out), {x}, [xid, s](Tape& t, const Tensor& g) {
        Tensor* gx = t.grad_slot(xid);
        for (std::size_t o = 0; o < s.outer; ++o)
            for (std::size_t a = 0; a < s.extent; ++a)
                for (std::size_t i = 0; i < s.inner; ++i) (*gx)[(o * s.extent + a) * s.inner + i] += g[o * s.inner + i];
    });
}

inline Var mean(Var x, std::size_t axis)
{
    const double n = static_cast<double>(x.shape().at(axis));
    return scale(sum(x, axis), 1.0 / n);
}

inline Var max(Var x, std::size_t axis)
{
    const Shape& xs = x.shape();
    detail::require(axis < xs.size(), "max: axis out of range for " + shape_str(xs));
    const auto s = detail::split_axis(xs, axis);
    Tensor out(detail::drop_axis(xs, axis));
    std::vector<std::size_t> arg(out.numel(), 0);
    const Tensor& xv = x.value();
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.inner; ++i) {
            std::size_t best = o * s.extent * s.inner + i;
            for (std::size_t a = 1; a < s.extent; ++a) {
                const std::size_t idx = (o * s.extent + a) * s.inner + i;
                if (xv[idx] > xv[best]) best = idx;
            }
            out[o * s.inner + i] = xv[best];
            arg[o * s.inner + i] = best;
        }
    }
    flops::add(xv.numel());
    const auto xid = x.id();
    return x.tape().record("max_axis", std::move(out), {x}, [xid, arg = std::move(arg)](Tape& t, const Tensor& g) {
        Tensor* gx = t.grad_slot(xid);
        for (std::size_t i = 0; i < arg.size(); ++i) (*gx)[arg[i]] += g[i];
    });
}

// ---------------------------------------------------------------- row indexing

// out[i] = x[index[i]] for rows of a (R, C) matrix.
inline Var gather_rows(Var x, std::vector<std::size_t> index)
{
    const Shape& xs = x.shape();
    detail::require(xs.size() == 2, "gather_rows: expects (R, C), got " + shape_str(xs));
    detail::require(!index.empty(), "gather_rows: empty index");
    const std::size_t r = xs[0], c = xs[1];
    Tensor out({index.size(), c});
    for (std::size_t i = 0; i < index.size(); ++i) {
        detail::require(index[i] < r, "gather_rows: row index out of range");
        std::copy_n(x.value().ptr() + index[i] * c, c, out.ptr() + i * c);
    }
    const auto xid = x.id();
    return x.tape().record("gather_rows", std::move(out), {x}, [xid, c, index = std::move(index)](Tape& t, const Tensor& g) {
        Tensor* gx = t.grad_slot(xid);
        for (std::size_t i = 0; i < index.size(); ++i)
            for (std::size_t j = 0; j < c; ++j) (*gx)[index[i] * c + j] += g[i * c + j];
    });
}

struct RowRange {
    std::size_t begin = 0;
    std::size_t end = 0;
    std::size_t size() const { return end - begin; }
    bool operator==(const RowRange&) const = default;
};

// Elementwise max over each contiguous row range of a (R, C) matrix.
inline Var segment_max(Var x, const std::vector<RowRange>& groups)
{
    const Shape& xs = x.shape();
    detail::require(xs.size() == 2, "segment_max: expects (R, C), got " + shape_str(xs));
    detail::require(!groups.empty(), "segment_max: no groups");
    const std::size_t c = xs[1];
    const Tensor& xv = x.value();
    Tensor out({groups.size(), c});
    std::vector<std::size_t> arg(groups.size() * c);
    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
        const auto& rg = groups[gi];
        detail::require(rg.begin < rg.end && rg.end <= xs[0], "segment_max: invalid row range");
        for (std::size_t j = 0; j < c; ++j) {
            std::size_t best = rg.begin * c + j;
            for (std::size_t r = rg.begin + 1; r < rg.end; ++r)
                if (xv[r * c + j] > xv[best]) best = r * c + j;
            out[gi * c + j] = xv[best];
            arg[gi * c + j] = best;
        }
    }
    flops::add(xv.numel());
    const auto xid = x.id();
    return x.tape().record("segment_max", std::move(out), {x}, [xid, arg = std::move(arg)](Tape& t, const Tensor& g) {
        Tensor* gx = t.grad_slot(xid);
        for (std::size_t i = 0; i < arg.size(); ++i) (*gx)[arg[i]] += g[i];
    });
}

// ---------------------------------------------------------------- losses

// Mean softmax cross-entropy of logits (R, K) against integer labels.
inline Var cross_entropy(Var logits, std::span<const int> labels)
{
    const Shape& ls = logits.shape();
    detail::require(ls.size() == 2 || ls.size() == 1, "cross_entropy: expects (R, K) or (K), got " + shape_str(ls));
    const std::size_t k = ls.back();
    const std::size_t rows = logits.value().numel() / k;
    detail::require(labels.size() == rows, "cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                                               std::to_string(rows) + " rows");
    const Tensor& lv = logits.value();
    Tensor probs(Shape{rows, k});
    double loss = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        detail::require(labels[r] >= 0 && static_cast<std::size_t>(labels[r]) < k, "cross_entropy: label out of range");
        const double* row = lv.ptr() + r * k;
        const double m = *std::max_element(row, row + k);
        double z = 0.0;
        for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - m);
        for (std::size_t j = 0; j < k; ++j) probs[r * k + j] = std::exp(row[j] - m) / z;
        loss += -(row[labels[r]] - m - std::log(z));
    }
    loss /= static_cast<double>(rows);
    std::vector<int> lab(labels.begin(), labels.end());
    const auto lid = logits.id();
    return logits.tape().record("cross_entropy", Tensor::scalar(loss), {logits},
                                [lid, rows, k, probs = std::move(probs), lab = std::move(lab)](Tape& t, const Tensor& g) {
                                    Tensor* gl = t.grad_slot(lid);
                                    const double s = g[0] / static_cast<double>(rows);
                                    for (std::size_t r = 0; r < rows; ++r)
                                        for (std::size_t j = 0; j < k; ++j)
                                            (*gl)[r * k + j] += s * (probs[r * k + j] - (static_cast<int>(j) == lab[r] ? 1.0 : 0.0));
                                });
}

// ---------------------------------------------------------------- gradient check

using ScalarFn = std::function<Var(Tape&, std::span<const Var>)>;

// Max over all parameter entries of |analytic - central difference| / max(1, |analytic|).
inline double finite_diff_check(const ScalarFn& f, std::vector<Tensor> params, double h = 1e-5)
{
    auto evaluate = [&](bool with_grad, std::vector<Tensor>* grads) {
        Tape tape(with_grad);
        std::vector<Var> leaves;
        leaves.reserve(params.size());
        for (const auto& p : params) leaves.push_back(tape.leaf(p, with_grad));
        Var loss = f(tape, leaves);
        if (loss.value().numel() != 1) throw Error("finite_diff_check: function must return a scalar");
        const double value = loss.value()[0];
        if (with_grad) {
            tape.backward(loss);
            for (const auto& leaf : leaves) grads->push_back(leaf.grad());
        }
        return value;
    };

    std::vector<Tensor> analytic;
    const double base = evaluate(true, &analytic);
    const double again = evaluate(false, nullptr);
    if (std::memcmp(&base, &again, sizeof(double)) != 0) {
        throw Error("finite_diff_check: function is not deterministic across evaluations");
    }

    double worst = 0.0;
    for (std::size_t p = 0; p < params.size(); ++p) {
        for (std::size_t i = 0; i < params[p].numel(); ++i) {
            const double orig = params[p][i];
            const double hi = orig + h, lo = orig - h;
            params[p][i] = hi;
            const double up = evaluate(false, nullptr);
            params[p][i] = lo;
            const double down = evaluate(false, nullptr);
            params[p][i] = orig;
            // divide by the step actually taken after rounding
            const double numeric = (up - down) / (hi - lo);
            const double a = analytic[p][i];
            worst = std::max(worst, std::abs(a - numeric) / std::max(1.0, std::abs(a)));
        }
    }
    return worst;
}

}  // namespace pointmamba
