// Octree serialization of point clouds along the z-order curve.
//
// A shuffled key interleaves the grid coordinate bits MSB-first, one triplet
// per depth level, so key >> 3 is the parent cell and siblings are adjacent
// after sorting.
#pragma once

#include <array>
#include <cstdint>
#include <iomanip>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "autodiff.hpp"

namespace pointmamba {

inline constexpr unsigned kMaxOctreeDepth = 21;

struct GridCoord {
    std::uint32_t x = 0, y = 0, z = 0;

    std::uint32_t operator[](int axis) const { return axis == 0 ? x : axis == 1 ? y : z; }
    bool operator==(const GridCoord&) const = default;
};

// Permutation of {x, y, z} giving the bit order inside each key triplet.
struct AxisOrder {
    std::array<int, 3> axes{0, 1, 2};

    static AxisOrder parse(const std::string& s)
    {
        if (s.size() != 3) throw Error("axis order '" + s + "' must be a permutation of xyz");
        AxisOrder o;
        std::array<bool, 3> seen{};
        for (int i = 0; i < 3; ++i) {
            const char ch = s[static_cast<std::size_t>(i)];
            if (ch < 'x' || ch > 'z' || seen[ch - 'x']) throw Error("axis order '" + s + "' must be a permutation of xyz");
            seen[ch - 'x'] = true;
            o.axes[static_cast<std::size_t>(i)] = ch - 'x';
        }
        return o;
    }

    std::string str() const
    {
        std::string s;
        for (int a : axes) s.push_back(static_cast<char>('x' + a));
        return s;
    }

    bool operator==(const AxisOrder&) const = default;
};

inline std::uint64_t shuffled_key(GridCoord c, unsigned depth, AxisOrder order = {})
{
    if (depth > kMaxOctreeDepth) throw Error("shuffled_key: depth " + std::to_string(depth) + " exceeds 21");
    const std::uint64_t limit = std::uint64_t{1} << depth;
    if (c.x >= limit || c.y >= limit || c.z >= limit) {
        throw Error("shuffled_key: coordinate (" + std::to_string(c.x) + "," + std::to_string(c.y) + "," +
                    std::to_string(c.z) + ") out of range for depth " + std::to_string(depth));
    }
    std::uint64_t key = 0;
    for (unsigned i = 0; i < depth; ++i) {
        const unsigned bit = depth - 1 - i;
        for (int axis : order.axes) key = (key << 1) | ((c[axis] >> bit) & 1u);
    }
    return key;
}

inline GridCoord deinterleave(std::uint64_t key, unsigned depth, AxisOrder order = {})
{
    if (depth > kMaxOctreeDepth) throw Error("deinterleave: depth exceeds 21");
    if (depth < kMaxOctreeDepth && key >> (3 * depth)) throw Error("deinterleave: key has bits above depth");
    std::array<std::uint32_t, 3> v{};
    for (unsigned i = 0; i < depth; ++i) {
        const unsigned bit = depth - 1 - i;
        for (int j = 0; j < 3; ++j) {
            const unsigned pos = 3 * bit + static_cast<unsigned>(2 - j);
            v[static_cast<std::size_t>(order.axes[static_cast<std::size_t>(j)])] |=
                static_cast<std::uint32_t>((key >> pos) & 1u) << bit;
        }
    }
    return {v[0], v[1], v[2]};
}

// Isotropic map into the unit cube: subtract the per-axis minimum, divide by
// the largest extent. A cloud with zero extent collapses to the cube center.
inline Tensor normalize_points(const Tensor& points)
{
    if (points.rank() != 2 || points.dim(1) != 3) {
        throw Error("normalize_points: expected (N, 3), got " + shape_str(points.shape()));
    }
    if (!points.all_finite()) throw Error("normalize_points: non-finite coordinate");
    const std::size_t n = points.dim(0);
    std::array<double, 3> lo{}, hi{};
    for (int a = 0; a < 3; ++a) lo[a] = hi[a] = points[static_cast<std::size_t>(a)];
    for (std::size_t i = 0; i < n; ++i) {
        for (int a = 0; a < 3; ++a) {
            lo[a] = std::min(lo[a], points[i * 3 + a]);
            hi[a] = std::max(hi[a], points[i * 3 + a]);
        }
    }
    const double extent = std::max({hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]});
    Tensor out(points.shape());
    for (std::size_t i = 0; i < n; ++i) {
        for (int a = 0; a < 3; ++a) {
            out[i * 3 + a] = extent > 0.0 ? (points[i * 3 + a] - lo[a]) / extent : 0.5;
        }
    }
    return out;
}

inline std::uint32_t grid_cell(double u, unsigned depth)
{
    const double cells = static_cast<double>(std::uint64_t{1} << depth);
    const double f = std::floor(u * cells);
    if (f <= 0.0) return 0;
    return static_cast<std::uint32_t>(std::min(f, cells - 1.0));
}

struct Octree {
    unsigned depth = 0;
    AxisOrder axis_order;
    // keys[l] holds the sorted occupied keys at depth l (keys[0] == {0}).
    std::vector<std::vector<std::uint64_t>> keys;
    // children[l][i] is the range of level l + 1 nodes under node i of level l.
    std::vector<std::vector<RowRange>> children;
    // parent[l][i] is the level l - 1 index of node i of level l (parent[0] empty).
    std::vector<std::vector<std::size_t>> parent;
    std::vector<std::size_t> leaf_of_point;
    std::vector<std::vector<std::size_t>> points_per_leaf;
    std::vector<GridCoord> leaf_coords;
    Tensor leaf_positions;  // (L, 3) mean normalized position per leaf
    Tensor leaf_features;   // (L, C) mean input feature per leaf

    std::size_t num_leaves() const { return keys.back().size(); }
    std::size_t num_nodes(unsigned level) const { return keys.at(level).size(); }
};

// Groups a sorted key array by parent (key >> 3) into contiguous ranges.
inline std::vector<RowRange> parent_groups(std::span<const std::uint64_t> child_keys)
{
    std::vector<RowRange> groups;
    for (std::size_t i = 0; i < child_keys.size(); ++i) {
        if (groups.empty() || (child_keys[i] >> 3) != (child_keys[groups.back().begin] >> 3)) {
            groups.push_back({i, i + 1});
        } else {
            groups.back().end = i + 1;
        }
    }
    return groups;
}

inline std::vector<RowRange> parent_groups(const Octree& tree, unsigned level)
{
    if (level == 0) throw Error("parent_groups: level 0 has no parent");
    if (level > tree.depth) throw Error("parent_groups: level beyond octree depth");
    return tree.children[level - 1];
}

inline Octree build_octree(const Tensor& points, const Tensor& features, unsigned depth, AxisOrder order = {})
{
    if (points.rank() != 2 || points.dim(1) != 3) throw Error("build_octree: points must be (N, 3), got " + shape_str(points.shape()));
    const std::size_t n = points.dim(0);
    if (n == 0) throw Error("build_octree: empty input");
    if (features.rank() != 2 || features.dim(0) != n) {
        throw Error("build_octree: features " + shape_str(features.shape()) + " do not match " + std::to_string(n) + " points");
    }
    if (depth < 1 || depth > kMaxOctreeDepth) throw Error("build_octree: depth must be in [1, 21]");
    for (double v : points.data()) {
        if (!(v >= 0.0 && v <= 1.0)) throw Error("build_octree: points must lie in the unit cube");
    }
    const std::size_t fc = features.dim(1);

    std::vector<std::uint64_t> point_key(n);
    std::vector<GridCoord> point_cell(n);
    for (std::size_t i = 0; i < n; ++i) {
        point_cell[i] = {grid_cell(points[i * 3], depth), grid_cell(points[i * 3 + 1], depth),
                         grid_cell(points[i * 3 + 2], depth)};
        point_key[i] = shuffled_key(point_cell[i], depth, order);
    }

    // Canonical order: key, then coordinates, then features. Independent of
    // the input permutation, so per-leaf sums are reproducible bit for bit.
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::sort(perm.begin(), perm.end(), [&](std::size_t a, std::size_t b) {
        if (point_key[a] != point_key[b]) return point_key[a] < point_key[b];
        for (int ax = 0; ax < 3; ++ax) {
            if (points[a * 3 + ax] != points[b * 3 + ax]) return points[a * 3 + ax] < points[b * 3 + ax];
        }
        for (std::size_t f = 0; f < fc; ++f) {
            if (features[a * fc + f] != features[b * fc + f]) return features[a * fc + f] < features[b * fc + f];
        }
        return a < b;
    });

    Octree tree;
    tree.depth = depth;
    tree.axis_order = order;
    tree.keys.assign(depth + 1, {});
    tree.leaf_of_point.assign(n, 0);
    auto& leaves = tree.keys[depth];
    for (std::size_t idx : perm) {
        if (leaves.empty() || leaves.back() != point_key[idx]) {
            leaves.push_back(point_key[idx]);
            tree.points_per_leaf.emplace_back();
            tree.leaf_coords.push_back(point_cell[idx]);
        }
        tree.points_per_leaf.back().push_back(idx);
        tree.leaf_of_point[idx] = leaves.size() - 1;
    }

    const std::size_t num_leaves = leaves.size();
    tree.leaf_positions = Tensor({num_leaves, 3});
    tree.leaf_features = Tensor({num_leaves, fc});
    for (std::size_t l = 0; l < num_leaves; ++l) {
        const auto& members = tree.points_per_leaf[l];
        const double inv = 1.0 / static_cast<double>(members.size());
        for (int ax = 0; ax < 3; ++ax) {
            double s = 0.0;
            for (std::size_t idx : members) s += points[idx * 3 + ax];
            tree.leaf_positions[l * 3 + ax] = s * inv;
        }
        for (std::size_t f = 0; f < fc; ++f) {
            double s = 0.0;
            for (std::size_t idx : members) s += features[idx * fc + f];
            tree.leaf_features[l * fc + f] = s * inv;
        }
    }

    tree.parent.assign(depth + 1, {});
    tree.children.assign(depth + 1, {});
    for (unsigned level = depth; level >= 1; --level) {
        const auto& child = tree.keys[level];
        auto& up = tree.keys[level - 1];
        auto groups = parent_groups(child);
        tree.parent[level].resize(child.size());
        for (std::size_t g = 0; g < groups.size(); ++g) {
            up.push_back(child[groups[g].begin] >> 3);
            for (std::size_t i = groups[g].begin; i < groups[g].end; ++i) tree.parent[level][i] = g;
        }
        tree.children[level - 1] = std::move(groups);
    }
    return tree;
}

// Text table: leaf index, key (hex), grid coordinates, point count.
inline std::string serialize_table(const Octree& tree)
{
    std::ostringstream os;
    os << "# depth=" << tree.depth << " axis_order=" << tree.axis_order.str() << " leaves=" << tree.num_leaves() << '\n';
    os << "# leaf key x y z count\n";
    for (std::size_t l = 0; l < tree.num_leaves(); ++l) {
        const auto& c = tree.leaf_coords[l];
        os << l << " 0x" << std::hex << tree.keys[tree.depth][l] << std::dec << ' ' << c.x << ' ' << c.y << ' ' << c.z
           << ' ' << tree.points_per_leaf[l].size() << '\n';
    }
    return os.str();
}

// Mean |position(i) - position(nn(i))| over cells, where nn is the spatially
// nearest other cell (ties to the lower index) and position() is the
// sequence slot assigned by `order_position`.
inline double locality_score(std::span<const GridCoord> cells, std::span<const std::size_t> order_position)
{
    if (cells.size() < 2 || order_position.size() != cells.size()) {
        throw Error("locality_score: need >= 2 cells and one position per cell");
    }
    double total = 0.0;
    for (std::size_t i = 0; i < cells.size(); ++i) {
        std::int64_t best = -1;
        std::uint64_t best_d = ~std::uint64_t{0};
        for (std::size_t j = 0; j < cells.size(); ++j) {
            if (j == i) continue;
            std::uint64_t d = 0;
            for (int a = 0; a < 3; ++a) {
                const std::int64_t diff = static_cast<std::int64_t>(cells[i][a]) - static_cast<std::int64_t>(cells[j][a]);
                d += static_cast<std::uint64_t>(diff * diff);
            }
            if (d < best_d) {
                best_d = d;
                best = static_cast<std::int64_t>(j);
            }
        }
        const auto pi = static_cast<double>(order_position[i]);
        const auto pj = static_cast<double>(order_position[static_cast<std::size_t>(best)]);
        total += std::abs(pi - pj);
    }
    return total / static_cast<double>(cells.size());
}

}  // namespace pointmamba
