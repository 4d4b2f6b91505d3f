// Diagonal state-space core: discretization, the selective recurrence, the
// time-invariant convolution-kernel form, and the differentiable fused scan
// used inside the Point Mamba block.
//
// Shape conventions (batch may be omitted, in which case it is 1):
//   A      (E, M)         strictly negative, one row per channel
//   B, C   (batch, N, M)  input-dependent, shared across channels
//   delta  (batch, N, E)  strictly positive step sizes
//   x, y   (batch, N, E)
//   D      (E)            skip gain
#pragma once

#include <optional>
#include <string>

#include "autodiff.hpp"

namespace pointmamba {

enum class Discretization {
    simplified,  // B_bar = delta * B
    exact_zoh,   // B_bar = (exp(delta * A) - 1) / A * B
};

inline std::string to_string(Discretization d) { return d == Discretization::simplified ? "simplified" : "exact_zoh"; }

inline Discretization parse_discretization(const std::string& s)
{
    if (s == "simplified") return Discretization::simplified;
    if (s == "exact_zoh") return Discretization::exact_zoh;
    throw Error("unknown discretization '" + s + "' (expected simplified|exact_zoh)");
}

namespace ssm {

struct SeqDims {
    std::size_t batch = 1, n = 1, width = 1;
};

inline SeqDims seq_dims(const char* op, const Tensor& t)
{
    if (t.rank() == 2) return {1, t.dim(0), t.dim(1)};
    if (t.rank() == 3) return {t.dim(0), t.dim(1), t.dim(2)};
    throw Error(std::string(op) + ": expected (batch, N, W) or (N, W), got " + shape_str(t.shape()));
}

inline void expect_seq(const char* op, const char* name, const Tensor& t, std::size_t batch, std::size_t n, std::size_t w)
{
    const auto d = seq_dims(op, t);
    if (d.batch != batch || d.n != n || d.width != w) {
        throw Error(std::string(op) + ": " + name + " has shape " + shape_str(t.shape()) + ", expected (" +
                    std::to_string(batch) + "," + std::to_string(n) + "," + std::to_string(w) + ")");
    }
}

}  // namespace ssm

// Per-step discrete parameters, both shaped (batch, N, E, M).
struct DiscreteParams {
    Tensor a_bar;
    Tensor b_bar;
};

inline DiscreteParams discretize(const Tensor& a, const Tensor& b, const Tensor& delta, Discretization mode)
{
    if (a.rank() != 2) throw Error("discretize: A must be (E, M), got " + shape_str(a.shape()));
    const std::size_t e = a.dim(0), m = a.dim(1);
    const auto dd = ssm::seq_dims("discretize", delta);
    if (dd.width != e) throw Error("discretize: delta " + shape_str(delta.shape()) + " does not match A " + shape_str(a.shape()));
    ssm::expect_seq("discretize", "B", b, dd.batch, dd.n, m);
    for (double v : a.data())
        if (!(v < 0.0)) throw Error("discretize: A must be strictly negative");
    for (double v : delta.data())
        if (!(v > 0.0)) throw Error("discretize: delta must be strictly positive");

    DiscreteParams dp{Tensor({dd.batch, dd.n, e, m}), Tensor({dd.batch, dd.n, e, m})};
    for (std::size_t bt = 0; bt < dd.batch; ++bt) {
        for (std::size_t t = 0; t < dd.n; ++t) {
            const std::size_t row = bt * dd.n + t;
            for (std::size_t c = 0; c < e; ++c) {
                const double dt = delta[row * e + c];
                for (std::size_t s = 0; s < m; ++s) {
                    const double av = a[c * m + s];
                    const double abar = std::exp(dt * av);
                    const std::size_t o = (row * e + c) * m + s;
                    dp.a_bar[o] = abar;
                    dp.b_bar[o] = mode == Discretization::simplified ? dt * b[row * m + s] : (abar - 1.0) / av * b[row * m + s];
                }
            }
        }
    }
    return dp;
}

struct ScanTrace {
    Tensor y;
    Tensor states;  // (batch, N, E, M)
};

namespace ssm {

inline std::size_t check_scan_shapes(const char* op, const DiscreteParams& dp, const Tensor& c, const Tensor& d,
                                     const Tensor& x, SeqDims& xd)
{
    xd = seq_dims(op, x);
    if (dp.a_bar.rank() != 4 || dp.a_bar.shape() != dp.b_bar.shape()) {
        throw Error(std::string(op) + ": discrete params must be matching (batch, N, E, M) tensors");
    }
    const std::size_t m = dp.a_bar.dim(3);
    if (dp.a_bar.dim(0) != xd.batch || dp.a_bar.dim(1) != xd.n || dp.a_bar.dim(2) != xd.width) {
        throw Error(std::string(op) + ": discrete params " + shape_str(dp.a_bar.shape()) + " do not match x " +
                    shape_str(x.shape()));
    }
    expect_seq(op, "C", c, xd.batch, xd.n, m);
    if (d.shape() != Shape{xd.width}) throw Error(std::string(op) + ": D has shape " + shape_str(d.shape()));
    return m;
}

}  // namespace ssm

// Sequential reference recurrence:
//   h_k = a_bar_k * h_{k-1} + b_bar_k * x_k,   y_k = <C_k, h_k> + D * x_k
inline ScanTrace recurrent_scan_trace(const DiscreteParams& dp, const Tensor& c, const Tensor& d, const Tensor& x,
                                      const std::optional<Tensor>& initial_state = std::nullopt, bool keep_states = true)
{
    ssm::SeqDims xd;
    const std::size_t m = ssm::check_scan_shapes("recurrent_scan", dp, c, d, x, xd);
    const std::size_t e = xd.width;
    if (initial_state && initial_state->shape() != Shape{xd.batch, e, m}) {
        throw Error("recurrent_scan: initial state has shape " + shape_str(initial_state->shape()));
    }
    ScanTrace tr{Tensor(x.shape()), keep_states ? Tensor({xd.batch, xd.n, e, m}) : Tensor()};
    std::vector<double> h(e * m);
    for (std::size_t bt = 0; bt < xd.batch; ++bt) {
        if (initial_state) {
            std::copy_n(initial_state->ptr() + bt * e * m, e * m, h.begin());
        } else {
            std::fill(h.begin(), h.end(), 0.0);
        }
        for (std::size_t t = 0; t < xd.n; ++t) {
            const std::size_t row = bt * xd.n + t;
            for (std::size_t ch = 0; ch < e; ++ch) {
                const double xv = x[row * e + ch];
                double acc = 0.0;
                for (std::size_t s = 0; s < m; ++s) {
                    const std::size_t o = (row * e + ch) * m + s;
                    double& hs = h[ch * m + s];
                    hs = dp.a_bar[o] * hs + dp.b_bar[o] * xv;
                    acc += c[row * m + s] * hs;
                    if (keep_states) tr.states[o] = hs;
                }
                tr.y[row * e + ch] = acc + d[ch] * xv;
            }
        }
    }
    flops::add(5 * xd.batch * xd.n * e * m + 2 * xd.batch * xd.n * e);
    if (!tr.y.all_finite()) throw Error("recurrent_scan: non-finite state");
    return tr;
}

inline Tensor recurrent_scan(const DiscreteParams& dp, const Tensor& c, const Tensor& d, const Tensor& x)
{
    return recurrent_scan_trace(dp, c, d, x, std::nullopt, false).y;
}

// Blocked evaluation: each chunk is scanned from a zero state while tracking
// the running product of a_bar, then chunk carries are folded in. Chunks are
// independent in the first pass, which is what makes this form parallelizable.
inline Tensor chunked_scan(const DiscreteParams& dp, const Tensor& c, const Tensor& d, const Tensor& x,
                           std::size_t chunk = 16)
{
    if (chunk == 0) throw Error("chunked_scan: chunk size must be positive");
    ssm::SeqDims xd;
    const std::size_t m = ssm::check_scan_shapes("chunked_scan", dp, c, d, x, xd);
    const std::size_t e = xd.width, n = xd.n;
    Tensor y(x.shape());
    std::vector<double> local(n), prod(n);
    for (std::size_t bt = 0; bt < xd.batch; ++bt) {
        for (std::size_t ch = 0; ch < e; ++ch) {
            for (std::size_t s = 0; s < m; ++s) {
                for (std::size_t start = 0; start < n; start += chunk) {
                    const std::size_t stop = std::min(n, start + chunk);
                    double h = 0.0, p = 1.0;
                    for (std::size_t t = start; t < stop; ++t) {
                        const std::size_t o = ((bt * n + t) * e + ch) * m + s;
                        h = dp.a_bar[o] * h + dp.b_bar[o] * x[(bt * n + t) * e + ch];
                        p *= dp.a_bar[o];
                        local[t] = h;
                        prod[t] = p;
                    }
                }
                double carry = 0.0;
                for (std::size_t start = 0; start < n; start += chunk) {
                    const std::size_t stop = std::min(n, start + chunk);
                    for (std::size_t t = start; t < stop; ++t) local[t] += prod[t] * carry;
                    carry = local[stop - 1];
                }
                for (std::size_t t = 0; t < n; ++t) y[(bt * n + t) * e + ch] += c[(bt * n + t) * m + s] * local[t];
            }
            for (std::size_t t = 0; t < n; ++t) {
                const std::size_t o = (bt * n + t) * e + ch;
                y[o] += d[ch] * x[o];
            }
        }
    }
    if (!y.all_finite()) throw Error("chunked_scan: non-finite state");
    return y;
}

// Convolution kernel of a time-invariant system: K[e, j] = <C, a_bar^j * b_bar>.
// a_bar, b_bar are (E, M); c is (M).
inline Tensor lti_kernel(const Tensor& a_bar, const Tensor& b_bar, const Tensor& c, std::size_t length)
{
    if (a_bar.rank() != 2 || b_bar.rank() != 2) {
        throw Error("lti_kernel: per-step (selective) parameters " + shape_str(a_bar.shape()) +
                    " supplied; the kernel form needs time-invariant (E, M) parameters");
    }
    if (a_bar.shape() != b_bar.shape() || c.shape() != Shape{a_bar.dim(1)}) {
        throw Error("lti_kernel: shape mismatch A_bar " + shape_str(a_bar.shape()) + ", B_bar " +
                    shape_str(b_bar.shape()) + ", C " + shape_str(c.shape()));
    }
    if (length == 0) throw Error("lti_kernel: length must be positive");
    const std::size_t e = a_bar.dim(0), m = a_bar.dim(1);
    Tensor k({e, length});
    std::vector<double> pw(m);
    for (std::size_t ch = 0; ch < e; ++ch) {
        for (std::size_t s = 0; s < m; ++s) pw[s] = b_bar[ch * m + s];
        for (std::size_t j = 0; j < length; ++j) {
            double acc = 0.0;
            for (std::size_t s = 0; s < m; ++s) {
                acc += c[s] * pw[s];
                pw[s] *= a_bar[ch * m + s];
            }
            k[ch * length + j] = acc;
        }
    }
    return k;
}

// Causal per-channel convolution y_k = sum_{j<=k} K_j x_{k-j} (+ D x_k).
// Kernel taps past the sequence length are ignored.
inline Tensor conv_apply(const Tensor& kernel, const Tensor& x, const std::optional<Tensor>& d = std::nullopt)
{
    const auto xd = ssm::seq_dims("conv_apply", x);
    if (kernel.rank() != 2 || kernel.dim(0) != xd.width) {
        throw Error("conv_apply: kernel " + shape_str(kernel.shape()) + " does not match x " + shape_str(x.shape()));
    }
    if (d && d->shape() != Shape{xd.width}) throw Error("conv_apply: D has shape " + shape_str(d->shape()));
    const std::size_t e = xd.width, n = xd.n, taps = kernel.dim(1);
    Tensor y(x.shape());
    for (std::size_t bt = 0; bt < xd.batch; ++bt) {
        for (std::size_t t = 0; t < n; ++t) {
            for (std::size_t ch = 0; ch < e; ++ch) {
                double acc = 0.0;
                const std::size_t upto = std::min(t + 1, taps);
                for (std::size_t j = 0; j < upto; ++j) acc += kernel[ch * taps + j] * x[(bt * n + t - j) * e + ch];
                if (d) acc += (*d)[ch] * x[(bt * n + t) * e + ch];
                y[(bt * n + t) * e + ch] = acc;
            }
        }
    }
    return y;
}

// Differentiable selective scan with discretization fused in. Matches
// discretize() followed by recurrent_scan() operation for operation.
inline Var selective_scan(Var x, Var delta, Var a, Var b, Var c, Var d, Discretization mode)
{
    const Tensor& xv = x.value();
    const auto xd = ssm::seq_dims("selective_scan", xv);
    const Tensor& av = a.value();
    if (av.rank() != 2 || av.dim(0) != xd.width) {
        throw Error("selective_scan: A " + shape_str(av.shape()) + " does not match x " + shape_str(xv.shape()));
    }
    const std::size_t e = xd.width, m = av.dim(1), n = xd.n, batch = xd.batch;
    ssm::expect_seq("selective_scan", "delta", delta.value(), batch, n, e);
    ssm::expect_seq("selective_scan", "B", b.value(), batch, n, m);
    ssm::expect_seq("selective_scan", "C", c.value(), batch, n, m);
    if (d.shape() != Shape{e}) throw Error("selective_scan: D has shape " + shape_str(d.shape()));

    const Tensor& dv = delta.value();
    const Tensor& bv = b.value();
    const Tensor& cv = c.value();
    const Tensor& skip = d.value();
    const bool keep = x.tape().grad_enabled();
    Tensor y(xv.shape());
    Tensor states = keep ? Tensor({batch, n, e, m}) : Tensor();
    std::vector<double> h(e * m);
    for (std::size_t bt = 0; bt < batch; ++bt) {
        std::fill(h.begin(), h.end(), 0.0);
        for (std::size_t t = 0; t < n; ++t) {
            const std::size_t row = bt * n + t;
            for (std::size_t ch = 0; ch < e; ++ch) {
                const double dt = dv[row * e + ch];
                const double xin = xv[row * e + ch];
                double acc = 0.0;
                for (std::size_t s = 0; s < m; ++s) {
                    const double aval = av[ch * m + s];
                    const double abar = std::exp(dt * aval);
                    const double bbar =
                        mode == Discretization::simplified ? dt * bv[row * m + s] : (abar - 1.0) / aval * bv[row * m + s];
                    double& hs = h[ch * m + s];
                    hs = abar * hs + bbar * xin;
                    acc += cv[row * m + s] * hs;
                    if (keep) states[(row * e + ch) * m + s] = hs;
                }
                y[row * e + ch] = acc + skip[ch] * xin;
            }
        }
    }
    const std::uint64_t disc = mode == Discretization::simplified ? 3 : 5;
    flops::add((disc + 5) * batch * n * e * m + 2 * batch * n * e);

    const auto xid = x.id(), did = delta.id(), aid = a.id(), bid = b.id(), cid = c.id(), sid = d.id();
    return x.tape().record(
        "selective_scan", std::move(y), {x, delta, a, b, c, d},
        [=, states = std::move(states)](Tape& tp, const Tensor& gy) {
            const Tensor& xv = tp.value(xid);
            const Tensor& dv = tp.value(did);
            const Tensor& av = tp.value(aid);
            const Tensor& bv = tp.value(bid);
            const Tensor& cv = tp.value(cid);
            const Tensor& skip = tp.value(sid);
            Tensor* gx = tp.grad_slot(xid);
            Tensor* gd = tp.grad_slot(did);
            Tensor* ga = tp.grad_slot(aid);
            Tensor* gb = tp.grad_slot(bid);
            Tensor* gc = tp.grad_slot(cid);
            Tensor* gs = tp.grad_slot(sid);
            std::vector<double> carry(e * m);
            for (std::size_t bt = 0; bt < batch; ++bt) {
                std::fill(carry.begin(), carry.end(), 0.0);
                for (std::size_t t = n; t-- > 0;) {
                    const std::size_t row = bt * n + t;
                    for (std::size_t ch = 0; ch < e; ++ch) {
                        const double dy = gy[row * e + ch];
                        const double dt = dv[row * e + ch];
                        const double xin = xv[row * e + ch];
                        double dx = dy * skip[ch];
                        double ddt = 0.0;
                        if (gs) (*gs)[ch] += dy * xin;
                        for (std::size_t s = 0; s < m; ++s) {
                            const std::size_t o = (row * e + ch) * m + s;
                            const double aval = av[ch * m + s];
                            const double abar = std::exp(dt * aval);
                            const double hcur = states[o];
                            const double hprev = t > 0 ? states[o - e * m] : 0.0;
                            const double gh = dy * cv[row * m + s] + carry[ch * m + s];
                            if (gc) (*gc)[row * m + s] += dy * hcur;
                            const double dabar = gh * hprev;
                            const double dbbar = gh * xin;
                            const double bin = bv[row * m + s];
                            if (mode == Discretization::simplified) {
                                dx += gh * dt * bin;
                                ddt += dabar * abar * aval + dbbar * bin;
                                if (ga) (*ga)[ch * m + s] += dabar * abar * dt;
                                if (gb) (*gb)[row * m + s] += dbbar * dt;
                            } else {
                                const double f = (abar - 1.0) / aval;
                                dx += gh * f * bin;
                                ddt += dabar * abar * aval + dbbar * bin * abar;
                                if (ga) {
                                    const double dfda = (dt * abar * aval - (abar - 1.0)) / (aval * aval);
                                    (*ga)[ch * m + s] += dabar * abar * dt + dbbar * bin * dfda;
                                }
                                if (gb) (*gb)[row * m + s] += dbbar * f;
                            }
                            carry[ch * m + s] = gh * abar;
                        }
                        if (gx) (*gx)[row * e + ch] += dx;
                        if (gd) (*gd)[row * e + ch] += ddt;
                    }
                }
            }
        });
}

}  // namespace pointmamba
