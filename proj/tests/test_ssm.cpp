#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "pointmamba/harness.hpp"

using namespace pointmamba;
using harness::random_tensor;

namespace {

struct Instance {
    Tensor a, delta, b, c, d, x;
};

Instance random_instance(std::size_t batch, std::size_t n, std::size_t e, std::size_t m, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    return {random_tensor({e, m}, -2.0, -0.1, rng),   random_tensor({batch, n, e}, 1e-3, 0.8, rng),
            random_tensor({batch, n, m}, -1.0, 1.0, rng), random_tensor({batch, n, m}, -1.0, 1.0, rng),
            random_tensor({e}, -1.0, 1.0, rng),          random_tensor({batch, n, e}, -1.0, 1.0, rng)};
}

Tensor scan(const Instance& s, Discretization mode = Discretization::simplified)
{
    return recurrent_scan(discretize(s.a, s.b, s.delta, mode), s.c, s.d, s.x);
}

}  // namespace

TEST(Discretize, ClosedFormExamples)
{
    const double ln2 = std::log(2.0);
    const Tensor a({1, 1}, -1.0), b({1, 1, 1}, 1.0), delta({1, 1, 1}, ln2);
    const auto zoh = discretize(a, b, delta, Discretization::exact_zoh);
    const auto simp = discretize(a, b, delta, Discretization::simplified);
    const long double abar = std::exp(-static_cast<long double>(ln2));
    EXPECT_NEAR(zoh.a_bar[0], static_cast<double>(abar), 1e-15);
    EXPECT_NEAR(simp.a_bar[0], 0.5, 1e-15);
    // (e^{-ln2} - 1) / (-1) * 1
    EXPECT_NEAR(zoh.b_bar[0], static_cast<double>((abar - 1.0L) / -1.0L), 1e-15);
    EXPECT_NEAR(simp.b_bar[0], ln2, 1e-15);
    EXPECT_EQ(zoh.a_bar.shape(), (Shape{1, 1, 1, 1}));
}

TEST(Discretize, SmallStepLimit)
{
    const Tensor a({1, 2}, {-1.0, -5.0}), b({1, 1, 2}, 1.0), delta({1, 1, 1}, 1e-12);
    for (auto mode : {Discretization::simplified, Discretization::exact_zoh}) {
        const auto dp = discretize(a, b, delta, mode);
        for (double v : dp.a_bar.data()) EXPECT_NEAR(v, 1.0, 1e-11);
        for (double v : dp.b_bar.data()) EXPECT_NEAR(v, 0.0, 1e-11);
    }
}

TEST(Discretize, ABarInUnitInterval)
{
    const auto s = random_instance(2, 20, 3, 5, 1);
    const auto dp = discretize(s.a, s.b, s.delta, Discretization::exact_zoh);
    for (double v : dp.a_bar.data()) {
        EXPECT_GT(v, 0.0);
        EXPECT_LT(v, 1.0);
    }
}

TEST(Discretize, Errors)
{
    const Tensor b({1, 1, 1}, 1.0), delta({1, 1, 1}, 0.1);
    EXPECT_THROW(discretize(Tensor({1, 1}, 0.0), b, delta, Discretization::simplified), Error);
    EXPECT_THROW(discretize(Tensor({1, 1}, 0.5), b, delta, Discretization::simplified), Error);
    EXPECT_THROW(discretize(Tensor({1, 1}, -1.0), b, Tensor({1, 1, 1}, 0.0), Discretization::simplified), Error);
    EXPECT_THROW(discretize(Tensor({1, 1}, -1.0), b, Tensor({1, 1, 1}, -0.1), Discretization::exact_zoh), Error);
    EXPECT_THROW(parse_discretization("euler"), Error);
    EXPECT_EQ(parse_discretization("exact_zoh"), Discretization::exact_zoh);
}

TEST(RecurrentScan, ScalarExample)
{
    DiscreteParams dp{Tensor({1, 2, 1, 1}, 0.5), Tensor({1, 2, 1, 1}, 1.0)};
    const auto trace = recurrent_scan_trace(dp, Tensor({1, 2, 1}, 2.0), Tensor({1}, 0.0), Tensor({1, 2, 1}, {1.0, 0.0}));
    EXPECT_EQ(trace.states[0], 1.0);
    EXPECT_EQ(trace.states[1], 0.5);
    EXPECT_EQ(trace.y[0], 2.0);
    EXPECT_EQ(trace.y[1], 1.0);
}

TEST(RecurrentScan, ZeroInputZeroOutput)
{
    auto s = random_instance(1, 30, 4, 6, 2);
    s.x = Tensor({1, 30, 4}, 0.0);
    const Tensor y = scan(s);
    for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(RecurrentScan, ShapeErrors)
{
    const auto s = random_instance(1, 10, 3, 4, 3);
    const auto dp = discretize(s.a, s.b, s.delta, Discretization::simplified);
    EXPECT_THROW(recurrent_scan(dp, s.c, Tensor({2}, 1.0), s.x), Error);
    EXPECT_THROW(recurrent_scan(dp, Tensor({1, 9, 4}), s.d, s.x), Error);
    EXPECT_THROW(recurrent_scan(dp, s.c, s.d, Tensor({1, 10, 2})), Error);
}

TEST(RecurrentScan, CausalityUnderPerturbation)
{
    const std::size_t n = 40;
    const auto s = random_instance(1, n, 3, 4, 4);
    const Tensor base = scan(s);
    for (std::size_t k : {0u, 7u, 20u, 39u}) {
        auto p = s;
        for (std::size_t e = 0; e < 3; ++e) p.x[k * 3 + e] += 0.25;
        const Tensor y = scan(p);
        for (std::size_t j = 0; j < n; ++j) {
            double diff = 0.0;
            for (std::size_t e = 0; e < 3; ++e) diff = std::max(diff, std::abs(y[j * 3 + e] - base[j * 3 + e]));
            if (j < k) EXPECT_EQ(diff, 0.0) << "k=" << k << " j=" << j;
            else if (j == k) EXPECT_GT(diff, 0.0);
        }
    }
}

TEST(RecurrentScan, LinearInInputForFrozenSelection)
{
    auto s = random_instance(2, 50, 4, 8, 5);
    const Tensor y = scan(s);
    for (double alpha : {-3.0, 0.5, 7.25}) {
        auto p = s;
        for (auto& v : p.x.data()) v *= alpha;
        const Tensor ya = scan(p);
        for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(ya[i], alpha * y[i], 1e-10);
    }
}

TEST(RecurrentScan, StabilityOfStateNorm)
{
    EXPECT_TRUE(check_scan_stability(50, 17).pass);
}

// FLOPs(N, E, M) must be exactly c*N*M*E + d*N*E with constants c, d.
TEST(RecurrentScan, FlopCountIsExactlyLinear)
{
    auto count = [](std::size_t n, std::size_t e, std::size_t m) {
        const auto s = random_instance(1, n, e, m, 6);
        const auto dp = discretize(s.a, s.b, s.delta, Discretization::simplified);
        flops::Scope scope;
        recurrent_scan(dp, s.c, s.d, s.x);
        return static_cast<double>(scope.elapsed());
    };
    // Solve for c and d from two shapes, then predict the rest.
    const double f1 = count(10, 2, 3), f2 = count(10, 2, 7);
    const double c = (f2 - f1) / (10.0 * 2 * 4);
    const double d = (f1 - c * 10 * 2 * 3) / (10.0 * 2);
    EXPECT_EQ(c, std::round(c));
    EXPECT_EQ(d, std::round(d));
    for (auto [n, e, m] : {std::tuple{64, 4, 8}, std::tuple{128, 4, 8}, std::tuple{33, 7, 16}, std::tuple{1, 1, 1}}) {
        const double nn = n, ee = e, mm = m;
        EXPECT_EQ(count(n, e, m), c * nn * mm * ee + d * nn * ee) << n << " " << e << " " << m;
    }
    EXPECT_EQ(count(128, 4, 8), 2.0 * count(64, 4, 8));
}

TEST(LtiKernel, GeometricTaps)
{
    const Tensor k = lti_kernel(Tensor({1, 1}, 0.5), Tensor({1, 1}, 1.0), Tensor({1}, 1.0), 3);
    EXPECT_TRUE(k.bitwise_equal(Tensor({1, 3}, {1.0, 0.5, 0.25})));
}

TEST(LtiKernel, MemorylessWhenABarIsZero)
{
    const Tensor k = lti_kernel(Tensor({1, 2}, 0.0), Tensor({1, 2}, {2.0, 3.0}), Tensor({2}, {1.0, -1.0}), 4);
    EXPECT_TRUE(k.bitwise_equal(Tensor({1, 4}, {-1.0, 0.0, 0.0, 0.0})));
}

TEST(LtiKernel, RejectsPerStepParameters)
{
    EXPECT_THROW(lti_kernel(Tensor({1, 2, 1, 1}, 0.5), Tensor({1, 2, 1, 1}, 1.0), Tensor({1}, 1.0), 2), Error);
}

TEST(ConvApply, ImpulseIdentityAndTruncation)
{
    const Tensor impulse({1, 3, 1}, {1.0, 0.0, 0.0});
    EXPECT_TRUE(conv_apply(Tensor({1, 3}, {1.0, 0.5, 0.25}), impulse).bitwise_equal(Tensor({1, 3, 1}, {1.0, 0.5, 0.25})));
    std::mt19937_64 rng(7);
    const Tensor x = random_tensor({2, 5, 3}, -1.0, 1.0, rng);
    EXPECT_TRUE(conv_apply(Tensor({3, 1}, 1.0), x).bitwise_equal(x));
    const Tensor long_kernel({1, 6}, {1, 2, 3, 4, 5, 6});
    EXPECT_TRUE(conv_apply(long_kernel, impulse).bitwise_equal(Tensor({1, 3, 1}, {1.0, 2.0, 3.0})));
    const Tensor with_d = conv_apply(Tensor({1, 1}, 1.0), impulse, Tensor({1}, 2.0));
    EXPECT_EQ(with_d[0], 3.0);
}

TEST(ConvApply, MatchesScanOnRandomLtiSystem)
{
    // E = 4, M = 8, N = 64
    std::mt19937_64 rng(8);
    const std::size_t e = 4, m = 8, n = 64;
    const Tensor a = random_tensor({e, m}, -2.0, -0.1, rng);
    const Tensor dt = random_tensor({e}, 0.01, 0.5, rng);
    const Tensor b = random_tensor({m}, -1.0, 1.0, rng), c = random_tensor({m}, -1.0, 1.0, rng);
    const Tensor d = random_tensor({e}, -1.0, 1.0, rng), x = random_tensor({1, n, e}, -1.0, 1.0, rng);
    Tensor delta({1, n, e}), bs({1, n, m}), cs({1, n, m});
    for (std::size_t t = 0; t < n; ++t) {
        for (std::size_t i = 0; i < e; ++i) delta[t * e + i] = dt[i];
        for (std::size_t s = 0; s < m; ++s) bs[t * m + s] = b[s], cs[t * m + s] = c[s];
    }
    for (auto mode : {Discretization::simplified, Discretization::exact_zoh}) {
        const Tensor y = recurrent_scan(discretize(a, bs, delta, mode), cs, d, x);
        Tensor a_bar({e, m}), b_bar({e, m});
        for (std::size_t i = 0; i < e; ++i) {
            for (std::size_t s = 0; s < m; ++s) {
                const double av = a[i * m + s];
                a_bar[i * m + s] = std::exp(dt[i] * av);
                b_bar[i * m + s] = mode == Discretization::simplified ? dt[i] * b[s] : std::expm1(dt[i] * av) / av * b[s];
            }
        }
        EXPECT_LE(max_abs_diff(y, conv_apply(lti_kernel(a_bar, b_bar, c, n), x, d)), 1e-10);
    }
}

TEST(Suites, LtiEquivalenceAndFaultInjection)
{
    const auto ok = check_lti_equivalence(100, 1);
    EXPECT_TRUE(ok.pass) << ok.value;
    EXPECT_LT(ok.seconds, 10.0);
    const auto bad = check_lti_equivalence(100, 1, Fault::discretize_sign);
    EXPECT_FALSE(bad.pass);
    for (const auto& r : run_checks("ssm")) EXPECT_TRUE(r.pass) << r.name;
    EXPECT_THROW(run_checks("bogus"), Error);
}

TEST(OptimizedScans, MatchReference)
{
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto s = random_instance(2, 37 + seed * 9, 3, 5, 100 + seed);
        for (auto mode : {Discretization::simplified, Discretization::exact_zoh}) {
            const auto dp = discretize(s.a, s.b, s.delta, mode);
            const Tensor ref = recurrent_scan(dp, s.c, s.d, s.x);
            for (std::size_t chunk : {1u, 4u, 16u, 1000u}) EXPECT_LE(max_abs_diff(ref, chunked_scan(dp, s.c, s.d, s.x, chunk)), 1e-12);
            Tape tape(false);
            Var y = selective_scan(tape.constant(s.x), tape.constant(s.delta), tape.constant(s.a), tape.constant(s.b),
                                   tape.constant(s.c), tape.constant(s.d), mode);
            EXPECT_LE(max_abs_diff(ref, y.value()), 1e-12);
        }
    }
    EXPECT_TRUE(check_selective_scan(100, 2).pass);
}

TEST(OptimizedScans, SelectiveScanGradient)
{
    for (auto mode : {Discretization::simplified, Discretization::exact_zoh}) {
        const auto s = random_instance(2, 9, 3, 4, 55);
        std::mt19937_64 rng(56);
        const Tensor w = random_tensor({2, 9, 3}, -1.0, 1.0, rng);
        auto f = [&](Tape& tape, std::span<const Var> p) {
            return sum(mul(selective_scan(p[0], p[1], p[2], p[3], p[4], p[5], mode), tape.constant(w)));
        };
        EXPECT_LE(finite_diff_check(f, {s.x, s.delta, s.a, s.b, s.c, s.d}), 1e-7) << to_string(mode);
    }
}
