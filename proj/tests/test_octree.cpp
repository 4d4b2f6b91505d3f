#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>
#include <string>

#include "pointmamba/harness.hpp"

using namespace pointmamba;

namespace {

// Builds the key as a bit string "x0 y0 z0 x1 y1 z1 ..." (x0 = MSB) and parses it.
std::uint64_t string_key(GridCoord c, unsigned depth, AxisOrder order = {})
{
    std::string bits;
    for (unsigned i = 0; i < depth; ++i)
        for (int a : order.axes) bits.push_back(((c[a] >> (depth - 1 - i)) & 1u) ? '1' : '0');
    return bits.empty() ? 0 : std::stoull(bits, nullptr, 2);
}

std::string bit_string(std::uint64_t key, unsigned depth)
{
    std::string s;
    for (unsigned i = 3 * depth; i-- > 0;) s.push_back(((key >> i) & 1u) ? '1' : '0');
    return s;
}

Tensor cloud(std::size_t n, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    return harness::random_tensor({n, 3}, 0.0, 1.0, rng);
}

}  // namespace

TEST(ShuffledKey, SpecExamples)
{
    EXPECT_EQ(shuffled_key({0, 0, 0}, 3), 0u);
    EXPECT_EQ(shuffled_key({1, 0, 0}, 1), 4u);
    EXPECT_EQ(shuffled_key({3, 1, 2}, 2), 46u);
    EXPECT_EQ(string_key({3, 1, 2}, 2), 46u);
}

TEST(ShuffledKey, MatchesBruteForceOracleAtDepth2)
{
    for (std::uint32_t x = 0; x < 4; ++x)
        for (std::uint32_t y = 0; y < 4; ++y)
            for (std::uint32_t z = 0; z < 4; ++z) EXPECT_EQ(shuffled_key({x, y, z}, 2), string_key({x, y, z}, 2));
}

TEST(ShuffledKey, AxisOrderPermutesTriplets)
{
    for (const char* o : {"xyz", "xzy", "yxz", "yzx", "zxy", "zyx"}) {
        const AxisOrder order = AxisOrder::parse(o);
        EXPECT_EQ(order.str(), o);
        for (std::uint32_t v = 0; v < 64; ++v) {
            const GridCoord c{v % 4, (v / 4) % 4, v / 16};
            EXPECT_EQ(shuffled_key(c, 2, order), string_key(c, 2, order)) << o;
        }
    }
    EXPECT_EQ(shuffled_key({1, 0, 0}, 1, AxisOrder::parse("zyx")), 1u);
    EXPECT_THROW(AxisOrder::parse("xxy"), Error);
    EXPECT_THROW(AxisOrder::parse("xy"), Error);
}

TEST(ShuffledKey, Errors)
{
    EXPECT_THROW(shuffled_key({4, 0, 0}, 2), Error);
    EXPECT_THROW(shuffled_key({0, 0, 0}, 22), Error);
}

TEST(ShuffledKey, RoundTripAndRange)
{
    EXPECT_TRUE(check_key_roundtrip(10000, 123).pass);
    const GridCoord c{(1u << 21) - 1, 5, (1u << 21) - 2};
    EXPECT_EQ(deinterleave(shuffled_key(c, 21), 21), c);
    EXPECT_LT(shuffled_key({7, 7, 7}, 3), 1u << 9);
}

TEST(ShuffledKey, SortEqualsLexicographicBitStringOrder)
{
    std::mt19937_64 rng(5);
    for (const char* o : {"xyz", "zyx", "yzx"}) {
        const AxisOrder order = AxisOrder::parse(o);
        std::vector<GridCoord> cells(200);
        for (auto& c : cells) c = {static_cast<std::uint32_t>(rng() % 32), static_cast<std::uint32_t>(rng() % 32),
                                   static_cast<std::uint32_t>(rng() % 32)};
        auto by_key = cells, by_string = cells;
        std::stable_sort(by_key.begin(), by_key.end(),
                         [&](auto a, auto b) { return shuffled_key(a, 5, order) < shuffled_key(b, 5, order); });
        std::stable_sort(by_string.begin(), by_string.end(), [&](auto a, auto b) {
            return bit_string(string_key(a, 5, order), 5) < bit_string(string_key(b, 5, order), 5);
        });
        EXPECT_EQ(by_key, by_string) << o;
    }
}

TEST(Normalize, SpecExamples)
{
    const Tensor a = normalize_points(Tensor({2, 3}, {-1, -1, -1, 1, 1, 1}));
    EXPECT_TRUE(a.bitwise_equal(Tensor({2, 3}, {0, 0, 0, 1, 1, 1})));
    const Tensor b = normalize_points(Tensor({1, 3}, {7, -3, 2}));
    EXPECT_TRUE(b.bitwise_equal(Tensor({1, 3}, {0.5, 0.5, 0.5})));
    const Tensor c = normalize_points(Tensor({2, 3}, {0, 0, 0, 2, 1, 0}));
    EXPECT_TRUE(c.bitwise_equal(Tensor({2, 3}, {0, 0, 0, 1, 0.5, 0})));
    const Tensor d = normalize_points(Tensor({3, 3}, {1, 2, 3, 1, 2, 3, 1, 2, 3}));
    for (double v : d.data()) EXPECT_EQ(v, 0.5);
}

TEST(Normalize, RejectsBadInput)
{
    EXPECT_THROW(normalize_points(Tensor({2, 2})), Error);
    EXPECT_THROW(normalize_points(Tensor({1, 3}, {std::nan(""), 0, 0})), Error);
}

TEST(BuildOctree, OctantCorners)
{
    Tensor pts({8, 3});
    for (std::size_t i = 0; i < 8; ++i) {
        // reverse order so sorting has work to do
        const std::size_t o = 7 - i;
        pts[i * 3 + 0] = (o >> 2) & 1;
        pts[i * 3 + 1] = (o >> 1) & 1;
        pts[i * 3 + 2] = o & 1;
    }
    const Octree t = build_octree(pts, pts, 1);
    ASSERT_EQ(t.num_leaves(), 8u);
    for (std::size_t l = 0; l < 8; ++l) {
        const GridCoord c{static_cast<std::uint32_t>(pts[(7 - l) * 3]), static_cast<std::uint32_t>(pts[(7 - l) * 3 + 1]),
                          static_cast<std::uint32_t>(pts[(7 - l) * 3 + 2])};
        EXPECT_EQ(t.keys[1][l], string_key(c, 1));
        EXPECT_EQ(t.keys[1][l], l);
    }
}

TEST(BuildOctree, CoincidentPointsAverageFeatures)
{
    const Tensor pts({2, 3}, {0.3, 0.3, 0.3, 0.3, 0.3, 0.3});
    const Tensor feats({2, 1}, {0.0, 2.0});
    const Octree t = build_octree(pts, feats, 4);
    ASSERT_EQ(t.num_leaves(), 1u);
    EXPECT_EQ(t.leaf_features[0], 1.0);
    EXPECT_EQ(t.points_per_leaf[0].size(), 2u);
}

TEST(BuildOctree, GridCellClampsUpperEdge)
{
    EXPECT_EQ(grid_cell(1.0, 3), 7u);
    EXPECT_EQ(grid_cell(0.0, 3), 0u);
    EXPECT_EQ(grid_cell(0.5, 1), 1u);
}

TEST(BuildOctree, Errors)
{
    EXPECT_THROW(build_octree(Tensor({1, 3}, 0.5), Tensor({2, 1}), 3), Error);
    EXPECT_THROW(build_octree(Tensor({1, 3}, 1.5), Tensor({1, 1}), 3), Error);
}

TEST(BuildOctree, PermutationGivesIdenticalLeaves)
{
    std::mt19937_64 rng(3);
    const Tensor pts = cloud(300, 1);
    const Octree ref = build_octree(pts, pts, 4);
    for (int trial = 0; trial < 5; ++trial) {
        std::vector<std::size_t> perm(300);
        std::iota(perm.begin(), perm.end(), std::size_t{0});
        std::shuffle(perm.begin(), perm.end(), rng);
        Tensor q({300, 3});
        for (std::size_t i = 0; i < 300; ++i)
            for (int a = 0; a < 3; ++a) q[i * 3 + a] = pts[perm[i] * 3 + a];
        const Octree t = build_octree(q, q, 4);
        EXPECT_EQ(t.keys, ref.keys);
        EXPECT_TRUE(t.leaf_features.bitwise_equal(ref.leaf_features));
        EXPECT_TRUE(t.leaf_positions.bitwise_equal(ref.leaf_positions));
        for (std::size_t i = 0; i < 300; ++i) EXPECT_EQ(t.leaf_of_point[i], ref.leaf_of_point[perm[i]]);
    }
}

TEST(BuildOctree, HierarchyInvariants)
{
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const Tensor pts = cloud(50 + 97 * seed, seed);
        const Octree t = build_octree(pts, pts, 5, AxisOrder::parse(seed % 2 ? "zxy" : "xyz"));
        EXPECT_TRUE(sibling_contiguous(t));
        EXPECT_EQ(t.keys[0], std::vector<std::uint64_t>{0});
        std::size_t covered = 0;
        for (std::size_t l = 0; l < t.num_leaves(); ++l) {
            covered += t.points_per_leaf[l].size();
            for (auto i : t.points_per_leaf[l]) EXPECT_EQ(t.leaf_of_point[i], l);
        }
        EXPECT_EQ(covered, pts.dim(0));
        for (unsigned lvl = 1; lvl <= t.depth; ++lvl) {
            EXPECT_LE(t.num_nodes(lvl - 1), t.num_nodes(lvl));
            for (std::size_t i = 0; i < t.num_nodes(lvl); ++i)
                EXPECT_EQ(t.keys[lvl - 1][t.parent[lvl][i]], t.keys[lvl][i] >> 3);
        }
    }
}

TEST(ParentGroups, SpecExamples)
{
    const std::uint64_t keys[] = {0, 1, 2, 7, 8, 9};
    const auto g = parent_groups(keys);
    ASSERT_EQ(g.size(), 2u);
    EXPECT_EQ(g[0].begin, 0u);
    EXPECT_EQ(g[0].end, 4u);
    EXPECT_EQ(g[1].begin, 4u);
    EXPECT_EQ(g[1].end, 6u);

    const std::uint64_t single[] = {42};
    const auto s = parent_groups(single);
    ASSERT_EQ(s.size(), 1u);
    EXPECT_EQ(s[0].end - s[0].begin, 1u);
    EXPECT_EQ(single[0] >> 3, 5u);
}

TEST(ParentGroups, FullLevelHasGroupsOfEight)
{
    std::vector<std::uint64_t> keys(64);
    std::iota(keys.begin(), keys.end(), std::uint64_t{0});
    const auto g = parent_groups(keys);
    ASSERT_EQ(g.size(), 8u);
    for (const auto& r : g) EXPECT_EQ(r.end - r.begin, 8u);
}

TEST(ParentGroups, TreeLevelsAndErrors)
{
    const Tensor pts = cloud(500, 4);
    const Octree t = build_octree(pts, pts, 4);
    EXPECT_THROW(parent_groups(t, 0), Error);
    for (unsigned lvl = 1; lvl <= 4; ++lvl) {
        const auto g = parent_groups(t, lvl);
        ASSERT_EQ(g.size(), t.num_nodes(lvl - 1));
        std::size_t next = 0;
        for (std::size_t p = 0; p < g.size(); ++p) {
            EXPECT_EQ(g[p].begin, next);
            EXPECT_EQ(g[p].begin, t.children[lvl - 1][p].begin);
            EXPECT_EQ(g[p].end, t.children[lvl - 1][p].end);
            next = g[p].end;
        }
        EXPECT_EQ(next, t.num_nodes(lvl));
    }
}

TEST(Serialize, TableListsEveryLeaf)
{
    const Tensor pts({3, 3}, {0, 0, 0, 1, 1, 1, 0.01, 0.01, 0.01});
    const std::string table = serialize_table(build_octree(pts, pts, 2));
    EXPECT_NE(table.find("leaves=2"), std::string::npos);
    EXPECT_NE(table.find("0 0x0 0 0 0 2"), std::string::npos) << table;
    EXPECT_NE(table.find("1 0x3f 3 3 3 1"), std::string::npos) << table;
}

TEST(Locality, ZOrderBeatsRandomOrder)
{
    const auto r = check_locality(100, 512, 6, 99);
    EXPECT_GE(r.value, 95.0);
    EXPECT_TRUE(r.pass);
}

TEST(Locality, ScoreOfLineIsOne)
{
    const GridCoord cells[] = {{0, 0, 0}, {1, 0, 0}, {2, 0, 0}, {3, 0, 0}};
    const std::size_t in_order[] = {0, 1, 2, 3};
    EXPECT_DOUBLE_EQ(locality_score(cells, in_order), 1.0);
}

TEST(Suites, OctreeSuitePasses)
{
    for (const auto& r : run_checks("octree")) EXPECT_TRUE(r.pass) << r.name << " " << r.value;
}
