// Verification suites and scaling benchmark shared by the CLI and the
// acceptance tests.
#pragma once

#include <chrono>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "block.hpp"
#include "data.hpp"
#include "network.hpp"
#include "octree.hpp"
#include "ssm.hpp"

namespace pointmamba {

struct SuiteResult {
    std::string name;
    std::string metric;
    double value = 0.0;
    double threshold = 0.0;
    bool pass = false;
    double seconds = 0.0;
};

enum class Fault {
    none,
    discretize_sign,  // negates B_bar coming out of discretize()
};

namespace harness {

using Clock = std::chrono::steady_clock;

inline double seconds_since(Clock::time_point t0)
{
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

inline Tensor random_tensor(Shape shape, double lo, double hi, std::mt19937_64& rng)
{
    std::uniform_real_distribution<double> d(lo, hi);
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = d(rng);
    return t;
}

inline std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi)
{
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

inline DiscreteParams discretize_with_fault(const Tensor& a, const Tensor& b, const Tensor& delta, Discretization mode,
                                            Fault fault)
{
    DiscreteParams dp = discretize(a, b, delta, mode);
    if (fault == Fault::discretize_sign)
        for (auto& v : dp.b_bar.data()) v = -v;
    return dp;
}

}  // namespace harness

// recurrent_scan vs conv_apply(lti_kernel) on random time-invariant systems.
// The kernel path discretizes with its own closed form, independent of discretize().
inline SuiteResult check_lti_equivalence(std::size_t trials = 100, std::uint64_t seed = 1, Fault fault = Fault::none)
{
    using namespace harness;
    const auto t0 = Clock::now();
    std::mt19937_64 rng(seed);
    double worst = 0.0;
    for (std::size_t trial = 0; trial < trials; ++trial) {
        const std::size_t e = pick(rng, 1, 8), m = pick(rng, 1, 16), n = pick(rng, 1, 128);
        const auto mode = trial % 2 == 0 ? Discretization::simplified : Discretization::exact_zoh;
        const Tensor a = random_tensor({e, m}, -2.0, -0.05, rng);
        const Tensor dt = random_tensor({e}, 0.01, 0.5, rng);
        const Tensor b = random_tensor({m}, -1.0, 1.0, rng);
        const Tensor c = random_tensor({m}, -1.0, 1.0, rng);
        const Tensor d = random_tensor({e}, -1.0, 1.0, rng);
        const Tensor x = random_tensor({1, n, e}, -1.0, 1.0, rng);

        Tensor delta_seq({1, n, e}), b_seq({1, n, m}), c_seq({1, n, m});
        for (std::size_t t = 0; t < n; ++t) {
            for (std::size_t i = 0; i < e; ++i) delta_seq[t * e + i] = dt[i];
            for (std::size_t s = 0; s < m; ++s) {
                b_seq[t * m + s] = b[s];
                c_seq[t * m + s] = c[s];
            }
        }
        const Tensor y_scan = recurrent_scan(discretize_with_fault(a, b_seq, delta_seq, mode, fault), c_seq, d, x);

        Tensor a_bar({e, m}), b_bar({e, m});
        for (std::size_t i = 0; i < e; ++i) {
            for (std::size_t s = 0; s < m; ++s) {
                const double av = a[i * m + s];
                a_bar[i * m + s] = std::exp(dt[i] * av);
                b_bar[i * m + s] = mode == Discretization::simplified ? dt[i] * b[s] : std::expm1(dt[i] * av) / av * b[s];
            }
        }
        const Tensor y_conv = conv_apply(lti_kernel(a_bar, b_bar, c, n), x, d);
        worst = std::max(worst, max_abs_diff(y_scan, y_conv));
    }
    return {"lti_equivalence", "max_abs_diff", worst, 1e-10, worst <= 1e-10, seconds_since(t0)};
}

// Optimized scans (chunked, fused differentiable) vs the sequential reference.
inline SuiteResult check_selective_scan(std::size_t trials = 100, std::uint64_t seed = 2)
{
    using namespace harness;
    const auto t0 = Clock::now();
    std::mt19937_64 rng(seed);
    double worst = 0.0;
    for (std::size_t trial = 0; trial < trials; ++trial) {
        const std::size_t batch = pick(rng, 1, 2), e = pick(rng, 1, 8), m = pick(rng, 1, 16), n = pick(rng, 1, 128);
        const auto mode = trial % 2 == 0 ? Discretization::simplified : Discretization::exact_zoh;
        const Tensor a = random_tensor({e, m}, -3.0, -0.05, rng);
        const Tensor delta = random_tensor({batch, n, e}, 1e-3, 1.0, rng);
        const Tensor b = random_tensor({batch, n, m}, -1.0, 1.0, rng);
        const Tensor c = random_tensor({batch, n, m}, -1.0, 1.0, rng);
        const Tensor d = random_tensor({e}, -1.0, 1.0, rng);
        const Tensor x = random_tensor({batch, n, e}, -1.0, 1.0, rng);
        const auto dp = discretize(a, b, delta, mode);
        const Tensor ref = recurrent_scan(dp, c, d, x);
        worst = std::max(worst, max_abs_diff(ref, chunked_scan(dp, c, d, x, pick(rng, 1, 32))));
        Tape tape(false);
        Var y = selective_scan(tape.constant(x), tape.constant(delta), tape.constant(a), tape.constant(b),
                               tape.constant(c), tape.constant(d), mode);
        worst = std::max(worst, max_abs_diff(ref, y.value()));
    }
    return {"selective_scan_oracle", "max_abs_diff", worst, 1e-12, worst <= 1e-12, seconds_since(t0)};
}

// Zero input from a random initial state: the state norm must strictly decrease.
inline SuiteResult check_scan_stability(std::size_t trials = 50, std::uint64_t seed = 3)
{
    using namespace harness;
    const auto t0 = Clock::now();
    std::mt19937_64 rng(seed);
    std::size_t violations = 0;
    for (std::size_t trial = 0; trial < trials; ++trial) {
        const std::size_t e = pick(rng, 1, 8), m = pick(rng, 1, 16), n = pick(rng, 2, 128);
        const Tensor a = random_tensor({e, m}, -2.0, -0.05, rng);
        const Tensor delta = random_tensor({1, n, e}, 1e-3, 0.5, rng);
        const Tensor b = random_tensor({1, n, m}, -1.0, 1.0, rng);
        const Tensor c = random_tensor({1, n, m}, -1.0, 1.0, rng);
        const Tensor h0 = random_tensor({1, e, m}, -1.0, 1.0, rng);
        const auto trace = recurrent_scan_trace(discretize(a, b, delta, Discretization::simplified), c,
                                                Tensor({e}, 1.0), Tensor({1, n, e}, 0.0), h0);
        double prev = 0.0;
        for (double v : h0.data()) prev += v * v;
        for (std::size_t t = 0; t < n; ++t) {
            double nrm = 0.0;
            for (std::size_t i = 0; i < e * m; ++i) nrm += trace.states[t * e * m + i] * trace.states[t * e * m + i];
            if (!(nrm < prev || prev == 0.0)) ++violations;
            prev = nrm;
        }
    }
    const auto v = static_cast<double>(violations);
    return {"scan_stability", "violations", v, 0.0, violations == 0, seconds_since(t0)};
}

inline ParamStore random_block_params(const BlockConfig& cfg, std::mt19937_64& rng)
{
    ParamStore store;
    init_block_params(store, "", cfg, rng);
    // Move the norm affine and skip gains off their trivial initial values.
    for (const char* name : {"norm.weight", "norm.bias", "fwd.D", "bwd.D"}) {
        for (auto& v : store.at(name).data()) v += std::uniform_real_distribution<double>(-0.5, 0.5)(rng);
    }
    return store;
}

// Central-difference gradient check over every block parameter.
inline SuiteResult check_block_gradient(std::uint64_t seed = 4, std::size_t n = 8, std::size_t channels = 16,
                                        std::size_t state = 16)
{
    using namespace harness;
    const auto t0 = Clock::now();
    std::mt19937_64 rng(seed);
    const BlockConfig cfg{channels, 2, state, 4, Discretization::simplified};
    const ParamStore store = random_block_params(cfg, rng);
    const Tensor input = random_tensor({1, n, channels}, -1.0, 1.0, rng);
    const Tensor weights = random_tensor({1, n, channels}, -1.0, 1.0, rng);
    const ScalarFn loss = [&](Tape& tape, std::span<const Var> leaves) {
        Bound p(tape, store, leaves);
        Var out = block_forward(p, "", cfg, tape.constant(input));
        return sum(mul(out, tape.constant(weights)));
    };
    const double err = finite_diff_check(loss, store.values(), 1e-5);
    return {"block_gradient", "max_rel_error", err, 1e-4, err <= 1e-4, seconds_since(t0)};
}

// Reversed input through direction-swapped parameters vs reversed output.
inline SuiteResult check_block_symmetry(std::size_t instances = 20, std::uint64_t seed = 5)
{
    using namespace harness;
    const auto t0 = Clock::now();
    std::mt19937_64 rng(seed);
    double worst = 0.0;
    for (std::size_t i = 0; i < instances; ++i) {
        const BlockConfig cfg{pick(rng, 1, 4) * 4, 2, pick(rng, 1, 16), pick(rng, 1, 4), i % 2 ? Discretization::exact_zoh
                                                                                               : Discretization::simplified};
        const ParamStore store = random_block_params(cfg, rng);
        const Tensor input = random_tensor({1, pick(rng, 1, 48), cfg.channels}, -2.0, 2.0, rng);
        worst = std::max(worst, block_reversal_symmetry_check(input, store, "", cfg));
    }
    return {"block_reversal_symmetry", "max_abs_diff", worst, 1e-10, worst <= 1e-10, seconds_since(t0)};
}

inline SuiteResult check_key_roundtrip(std::size_t trials = 10000, std::uint64_t seed = 6)
{
    using namespace harness;
    const auto t0 = Clock::now();
    std::mt19937_64 rng(seed);
    std::size_t failures = 0;
    for (std::size_t i = 0; i < trials; ++i) {
        const auto depth = static_cast<unsigned>(pick(rng, 1, 10));
        const std::uint32_t hi = (1u << depth) - 1;
        const GridCoord c{static_cast<std::uint32_t>(pick(rng, 0, hi)), static_cast<std::uint32_t>(pick(rng, 0, hi)),
                          static_cast<std::uint32_t>(pick(rng, 0, hi))};
        AxisOrder order;
        std::array<int, 3> perm{0, 1, 2};
        std::shuffle(perm.begin(), perm.end(), rng);
        order.axes = perm;
        const auto key = shuffled_key(c, depth, order);
        if (key >> (3 * depth) || !(deinterleave(key, depth, order) == c)) ++failures;
    }
    return {"key_roundtrip", "failures", static_cast<double>(failures), 0.0, failures == 0, seconds_since(t0)};
}

inline Tensor random_unit_cloud(std::size_t n, std::mt19937_64& rng)
{
    return harness::random_tensor({n, 3}, 0.0, 1.0, rng);
}

// Every level sorted strictly increasing and every parent's children contiguous.
inline bool sibling_contiguous(const Octree& tree)
{
    for (unsigned level = 1; level <= tree.depth; ++level) {
        const auto& keys = tree.keys[level];
        for (std::size_t i = 1; i < keys.size(); ++i)
            if (!(keys[i - 1] < keys[i])) return false;
        std::vector<std::uint64_t> parents_seen;
        for (std::size_t i = 0; i < keys.size(); ++i) {
            const auto parent = keys[i] >> 3;
            if (!parents_seen.empty() && parents_seen.back() == parent) continue;
            if (std::find(parents_seen.begin(), parents_seen.end(), parent) != parents_seen.end()) return false;
            parents_seen.push_back(parent);
        }
        for (std::size_t p = 0; p < tree.keys[level - 1].size(); ++p) {
            const auto& r = tree.children[level - 1][p];
            for (std::size_t i = r.begin; i < r.end; ++i)
                if ((keys[i] >> 3) != tree.keys[level - 1][p]) return false;
        }
    }
    return true;
}

inline SuiteResult check_sibling_contiguity(std::size_t clouds = 100, std::uint64_t seed = 7)
{
    using namespace harness;
    const auto t0 = Clock::now();
    std::mt19937_64 rng(seed);
    std::size_t failures = 0;
    for (std::size_t i = 0; i < clouds; ++i) {
        const Tensor pts = random_unit_cloud(pick(rng, 1, 1024), rng);
        AxisOrder order;
        std::shuffle(order.axes.begin(), order.axes.end(), rng);
        if (!sibling_contiguous(build_octree(pts, pts, static_cast<unsigned>(pick(rng, 1, 8)), order))) ++failures;
    }
    return {"sibling_contiguity", "failures", static_cast<double>(failures), 0.0, failures == 0, seconds_since(t0)};
}

// z-order vs uniformly random order: mean sequence distance to the nearest spatial neighbour.
inline SuiteResult check_locality(std::size_t clouds = 100, std::size_t points = 512, unsigned depth = 6,
                                  std::uint64_t seed = 8)
{
    using namespace harness;
    const auto t0 = Clock::now();
    std::mt19937_64 rng(seed);
    std::size_t wins = 0;
    for (std::size_t i = 0; i < clouds; ++i) {
        const Tensor pts = random_unit_cloud(points, rng);
        const Octree tree = build_octree(pts, pts, depth);
        std::vector<std::size_t> zpos(tree.num_leaves()), rpos(tree.num_leaves());
        std::iota(zpos.begin(), zpos.end(), std::size_t{0});
        std::iota(rpos.begin(), rpos.end(), std::size_t{0});
        std::shuffle(rpos.begin(), rpos.end(), rng);
        if (locality_score(tree.leaf_coords, zpos) < locality_score(tree.leaf_coords, rpos)) ++wins;
    }
    const double threshold = std::ceil(0.95 * static_cast<double>(clouds));
    return {"zorder_locality", "clouds_better_than_random", static_cast<double>(wins), threshold,
            static_cast<double>(wins) >= threshold, seconds_since(t0)};
}

// Suites: ssm, block, octree, all.
// seed offsets every suite's own seed.
inline std::vector<SuiteResult> run_checks(const std::string& suite, Fault fault = Fault::none, std::uint64_t seed = 0)
{
    if (suite != "all" && suite != "ssm" && suite != "block" && suite != "octree") {
        throw Error("unknown suite '" + suite + "' (expected ssm|block|octree|all)");
    }
    std::vector<SuiteResult> out;
    if (suite == "all" || suite == "ssm") {
        out.push_back(check_lti_equivalence(100, 1 + seed, fault));
        out.push_back(check_selective_scan(100, 2 + seed));
        out.push_back(check_scan_stability(50, 3 + seed));
    }
    if (suite == "all" || suite == "block") {
        out.push_back(check_block_gradient(4 + seed));
        out.push_back(check_block_symmetry(20, 5 + seed));
    }
    if (suite == "all" || suite == "octree") {
        out.push_back(check_key_roundtrip(10000, 6 + seed));
        out.push_back(check_sibling_contiguity(100, 7 + seed));
        out.push_back(check_locality(100, 512, 6, 8 + seed));
    }
    return out;
}

// ---------------------------------------------------------------- benchmark

struct BenchRow {
    std::size_t points = 0;
    std::size_t leaves = 0;
    std::uint64_t block_flops = 0;
    double seconds = 0.0;          // median wall time of model_forward
    std::int64_t peak_bytes = 0;   // peak tracked tensor bytes above the pre-forward baseline
};

inline std::uint64_t block_flops_for_length(const BlockConfig& cfg, std::size_t n, std::uint64_t seed = 9)
{
    std::mt19937_64 rng(seed);
    ParamStore store;
    init_block_params(store, "", cfg, rng);
    const Tensor input = harness::random_tensor({1, n, cfg.channels}, -1.0, 1.0, rng);
    flops::Scope scope;
    block_forward(store, "", cfg, input);
    return scope.elapsed();
}

inline std::vector<BenchRow> run_bench(const Model& model, std::span<const std::size_t> sizes, std::uint64_t seed,
                                       std::size_t repeats = 5)
{
    std::vector<BenchRow> rows;
    for (std::size_t n : sizes) {
        const PointCloud pc = synth_shape(ShapeKind::sphere, n, seed + n);
        const std::optional<Tensor> normals = model.config.use_normals ? pc.normals : std::nullopt;
        BenchRow row;
        row.points = n;
        std::vector<double> times;
        for (std::size_t r = 0; r < repeats; ++r) {
            block_stats::flops() = 0;
            memory::reset_peak();
            const auto base = memory::current_bytes();
            const auto t0 = harness::Clock::now();
            Tape tape(false);
            Bound p(tape, model.params, false);
            auto fwd = model_forward(p, model.config, pc.positions, normals);
            times.push_back(harness::seconds_since(t0));
            row.peak_bytes = memory::peak_bytes() - base;
            row.leaves = fwd.tree.num_leaves();
            row.block_flops = block_stats::flops();
        }
        std::sort(times.begin(), times.end());
        row.seconds = times[times.size() / 2];
        rows.push_back(row);
    }
    return rows;
}

}  // namespace pointmamba
