// Point Mamba block: LayerNorm, x/z projections, a forward and a reversed
// selective-scan branch, SiLU(z) gating of both branches, output projection
// and residual.
#pragma once

#include <string>

#include "params.hpp"
#include "ssm.hpp"

namespace pointmamba {

struct BlockConfig {
    std::size_t channels = 16;
    std::size_t expansion = 2;
    std::size_t state_size = 16;
    std::size_t conv_width = 4;
    Discretization mode = Discretization::simplified;

    std::size_t inner() const { return expansion * channels; }
};

inline constexpr const char* kDirections[2] = {"fwd", "bwd"};

namespace block_stats {

// FLOPs issued inside block_forward on this thread.
inline std::uint64_t& flops()
{
    thread_local std::uint64_t n = 0;
    return n;
}

}  // namespace block_stats

inline double softplus_inverse(double y) { return y > 20.0 ? y : std::log(std::expm1(y)); }

inline void init_block_params(ParamStore& store, const std::string& prefix, const BlockConfig& cfg, std::mt19937_64& rng)
{
    const std::size_t c = cfg.channels, e = cfg.inner(), m = cfg.state_size, k = cfg.conv_width;
    if (c == 0 || e == 0 || m == 0 || k == 0) throw Error("init_block_params: all block dimensions must be positive");
    store.add(prefix + "norm.weight", Tensor({c}, 1.0));
    store.add(prefix + "norm.bias", Tensor({c}, 0.0));
    store.add(prefix + "W_x", linear_init(c, e, rng));
    store.add(prefix + "W_z", linear_init(c, e, rng));
    for (const char* dir : kDirections) {
        const std::string p = prefix + dir + ".";
        const double conv_bound = 1.0 / std::sqrt(static_cast<double>(k));
        store.add(p + "conv.weight", uniform_tensor({e, k}, conv_bound, rng));
        store.add(p + "conv.bias", uniform_tensor({e}, conv_bound, rng));
        store.add(p + "W_B", linear_init(e, m, rng));
        store.add(p + "W_C", linear_init(e, m, rng));
        store.add(p + "W_delta", linear_init(e, e, rng));
        // softplus(bias) log-spaced over [1e-3, 1e-1] across channels.
        Tensor bias({e});
        for (std::size_t i = 0; i < e; ++i) {
            const double frac = e > 1 ? static_cast<double>(i) / static_cast<double>(e - 1) : 0.0;
            bias[i] = softplus_inverse(std::exp(std::log(1e-3) + frac * (std::log(1e-1) - std::log(1e-3))));
        }
        store.add(p + "delta_bias", std::move(bias));
        // -A = exp(A_log) log-spaced over [1, M] for every channel.
        Tensor a_log({e, m});
        for (std::size_t i = 0; i < e; ++i) {
            for (std::size_t s = 0; s < m; ++s) {
                const double frac = m > 1 ? static_cast<double>(s) / static_cast<double>(m - 1) : 0.0;
                a_log[i * m + s] = frac * std::log(static_cast<double>(m));
            }
        }
        store.add(p + "A_log", std::move(a_log));
        store.add(p + "D", Tensor({e}, 1.0));
    }
    store.add(prefix + "W_P", linear_init(e, c, rng));
}

struct BlockOutputs {
    Var out;
    Var y_forward;   // forward branch, before gating
    Var y_backward;  // backward branch, reversed back to input order, before gating
};

inline BlockOutputs block_forward_detailed(Bound& p, const std::string& prefix, const BlockConfig& cfg, Var input)
{
    const Shape in_shape = input.shape();
    const bool batched = in_shape.size() == 3;
    if (!(in_shape.size() == 2 || (batched && in_shape[0] == 1))) {
        throw Error("block_forward: expected (1, N, C) or (N, C), got " + shape_str(in_shape));
    }
    const std::size_t c = in_shape.back();
    if (c != cfg.channels) {
        throw Error("block_forward: input has " + std::to_string(c) + " channels, block expects " +
                    std::to_string(cfg.channels));
    }
    flops::Scope scope;
    Var seq = batched ? reshape(input, {in_shape[1], c}) : input;

    Var normed = layer_norm(seq, p(prefix + "norm.weight"), p(prefix + "norm.bias"));
    Var x = matmul(normed, p(prefix + "W_x"));
    Var z = matmul(normed, p(prefix + "W_z"));
    Var gate = silu(z);

    Var branch[2];
    for (int o = 0; o < 2; ++o) {
        const std::string d = prefix + kDirections[o] + ".";
        Var xo = o == 0 ? x : reverse(x, 0);
        Var xc = silu(causal_conv1d(xo, p(d + "conv.weight"), p(d + "conv.bias")));
        Var b = matmul(xc, p(d + "W_B"));
        Var cm = matmul(xc, p(d + "W_C"));
        Var delta = softplus(add(matmul(xc, p(d + "W_delta")), p(d + "delta_bias")));
        Var a = neg(exp(p(d + "A_log")));
        Var y = selective_scan(xc, delta, a, b, cm, p(d + "D"), cfg.mode);
        branch[o] = o == 0 ? y : reverse(y, 0);
    }
    Var hidden = add(mul(branch[0], gate), mul(branch[1], gate));
    Var out = add(matmul(hidden, p(prefix + "W_P")), seq);
    if (batched) out = reshape(out, in_shape);
    block_stats::flops() += scope.elapsed();
    return {out, branch[0], branch[1]};
}

inline Var block_forward(Bound& p, const std::string& prefix, const BlockConfig& cfg, Var input)
{
    return block_forward_detailed(p, prefix, cfg, input).out;
}

inline Tensor block_forward(const ParamStore& store, const std::string& prefix, const BlockConfig& cfg, const Tensor& input)
{
    Tape tape(false);
    Bound p(tape, store, false);
    return block_forward(p, prefix, cfg, tape.constant(input)).value();
}

// Copy of `store` with the forward and backward parameter sets of one block exchanged.
inline ParamStore swap_block_directions(const ParamStore& store, const std::string& prefix)
{
    ParamStore out;
    const std::string f = prefix + "fwd.", b = prefix + "bwd.";
    for (std::size_t i = 0; i < store.size(); ++i) {
        std::string name = store.names()[i];
        if (name.rfind(f, 0) == 0) {
            name = b + name.substr(f.size());
        } else if (name.rfind(b, 0) == 0) {
            name = f + name.substr(b.size());
        }
        out.add(name, store.values()[i]);
    }
    return out;
}

// max |block(reverse(P); swapped params) - reverse(block(P; params))|.
inline double block_reversal_symmetry_check(const Tensor& input, const ParamStore& store, const std::string& prefix,
                                            const BlockConfig& cfg)
{
    const std::size_t seq_axis = input.rank() == 3 ? 1 : 0;
    const ParamStore swapped = swap_block_directions(store, prefix);
    const Tensor lhs = block_forward(swapped, prefix, cfg, reverse_tensor(input, seq_axis));
    const Tensor rhs = reverse_tensor(block_forward(store, prefix, cfg, input), seq_axis);
    return max_abs_diff(lhs, rhs);
}

}  // namespace pointmamba
