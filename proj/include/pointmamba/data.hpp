// Point cloud I/O, synthetic shapes, and training-time augmentation.
#pragma once

#include <charconv>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "config.hpp"
#include "tensor.hpp"

namespace pointmamba {

struct PointCloud {
    Tensor positions;               // (N, 3)
    std::optional<Tensor> normals;  // (N, 3), unit length
    int label = -1;                 // class id for classification
    std::vector<int> point_labels;  // per-point labels for segmentation

    std::size_t size() const { return positions.dim(0); }
};

// ---------------------------------------------------------------- ASCII XYZ

// Lines of "x y z" or "x y z nx ny nz"; '#' starts a comment.
inline PointCloud parse_xyz(const std::string& text, const std::string& source = "<text>")
{
    std::istringstream in(text);
    std::string line;
    std::vector<double> pos, nrm;
    int columns = 0;
    std::size_t no = 0;
    while (std::getline(in, line)) {
        ++no;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        std::istringstream ls(line);
        std::vector<double> vals;
        std::string tok;
        while (ls >> tok) {
            double v = 0.0;
            auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
            if (ec != std::errc{} || ptr != tok.data() + tok.size()) {
                throw Error(source + ":" + std::to_string(no) + ": non-numeric token '" + tok + "'");
            }
            vals.push_back(v);
        }
        if (vals.empty()) continue;
        const int cols = static_cast<int>(vals.size());
        if (cols != 3 && cols != 6) {
            throw Error(source + ":" + std::to_string(no) + ": expected 3 or 6 numbers, got " + std::to_string(cols));
        }
        if (columns == 0) columns = cols;
        if (cols != columns) throw Error(source + ":" + std::to_string(no) + ": mixed 3- and 6-column lines");
        pos.insert(pos.end(), vals.begin(), vals.begin() + 3);
        if (cols == 6) nrm.insert(nrm.end(), vals.begin() + 3, vals.end());
    }
    if (pos.empty()) throw Error(source + ": no points");
    PointCloud pc;
    const std::size_t n = pos.size() / 3;
    pc.positions = Tensor({n, 3}, pos);
    if (columns == 6) pc.normals = Tensor({n, 3}, nrm);
    return pc;
}

inline PointCloud load_xyz_ascii(const std::string& path) { return parse_xyz(cfg::read_file(path), path); }

// Shortest round-trip decimal representation, so reloading is bitwise exact.
inline std::string format_xyz(const PointCloud& pc)
{
    std::string out;
    char buf[64];
    auto put = [&](double v) {
        auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
        out.append(buf, ptr);
    };
    for (std::size_t i = 0; i < pc.size(); ++i) {
        for (int a = 0; a < 3; ++a) {
            if (a) out += ' ';
            put(pc.positions[i * 3 + a]);
        }
        if (pc.normals) {
            for (int a = 0; a < 3; ++a) {
                out += ' ';
                put((*pc.normals)[i * 3 + a]);
            }
        }
        out += '\n';
    }
    return out;
}

inline void write_xyz_ascii(const std::string& path, const PointCloud& pc)
{
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot write '" + path + "'");
    f << format_xyz(pc);
}

// ---------------------------------------------------------------- manifest

struct ManifestEntry {
    std::string path;
    std::string label;
};

// One "path,label" per line; relative paths resolve against the manifest's directory.
inline std::vector<ManifestEntry> load_manifest(const std::string& path)
{
    const std::string text = cfg::read_file(path);
    const auto base = std::filesystem::path(path).parent_path();
    std::vector<ManifestEntry> out;
    std::istringstream in(text);
    std::string line;
    std::size_t no = 0;
    while (std::getline(in, line)) {
        ++no;
        line = cfg::trim(line);
        if (line.empty() || line[0] == '#') continue;
        const auto comma = line.rfind(',');
        if (comma == std::string::npos) throw Error(path + ":" + std::to_string(no) + ": expected path,label");
        std::filesystem::path p = cfg::trim(line.substr(0, comma));
        if (p.is_relative()) p = base / p;
        out.push_back({p.string(), cfg::trim(line.substr(comma + 1))});
    }
    if (out.empty()) throw Error(path + ": empty manifest");
    return out;
}

inline std::vector<int> load_point_labels(const std::string& path)
{
    std::istringstream in(cfg::read_file(path));
    std::vector<int> out;
    std::string tok;
    while (in >> tok) {
        int v = 0;
        auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
        if (ec != std::errc{} || ptr != tok.data() + tok.size() || v < 0) throw Error(path + ": bad label '" + tok + "'");
        out.push_back(v);
    }
    return out;
}

// ---------------------------------------------------------------- synthetic shapes

enum class ShapeKind { sphere, cube, torus, cylinder };

inline constexpr ShapeKind kShapeKinds[4] = {ShapeKind::sphere, ShapeKind::cube, ShapeKind::torus, ShapeKind::cylinder};

inline std::string to_string(ShapeKind k)
{
    switch (k) {
    case ShapeKind::sphere: return "sphere";
    case ShapeKind::cube: return "cube";
    case ShapeKind::torus: return "torus";
    case ShapeKind::cylinder: return "cylinder";
    }
    return "?";
}

inline ShapeKind parse_shape_kind(const std::string& s)
{
    for (auto k : kShapeKinds)
        if (to_string(k) == s) return k;
    throw Error("unknown shape '" + s + "' (expected sphere|cube|torus|cylinder)");
}

namespace shapes {
inline constexpr double kTorusMajor = 1.0;
inline constexpr double kTorusMinor = 0.35;
inline constexpr double kCylinderRadius = 0.5;
inline constexpr double kCylinderHeight = 1.0;
}  // namespace shapes

// Area-uniform surface samples with analytic outward normals:
// unit sphere, unit cube centred at the origin, torus (R = 1, r = 0.35) around
// z, closed cylinder (radius 0.5, height 1) along z.
inline PointCloud synth_shape(ShapeKind kind, std::size_t n, std::uint64_t seed)
{
    if (n < 8) throw Error("synth_shape: need at least 8 points");
    constexpr double pi = std::numbers::pi;
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);
    PointCloud pc;
    pc.positions = Tensor({n, 3});
    pc.normals = Tensor({n, 3});
    auto& p = pc.positions;
    auto& q = *pc.normals;
    for (std::size_t i = 0; i < n; ++i) {
        double px = 0, py = 0, pz = 0, nx = 0, ny = 0, nz = 0;
        switch (kind) {
        case ShapeKind::sphere: {
            double gx = 0, gy = 0, gz = 0, r = 0;
            do {
                gx = gauss(rng);
                gy = gauss(rng);
                gz = gauss(rng);
                r = std::sqrt(gx * gx + gy * gy + gz * gz);
            } while (r < 1e-12);
            px = nx = gx / r;
            py = ny = gy / r;
            pz = nz = gz / r;
            break;
        }
        case ShapeKind::cube: {
            const int face = static_cast<int>(std::min(5.0, std::floor(u01(rng) * 6.0)));
            const double a = u01(rng) - 0.5, b = u01(rng) - 0.5;
            const double s = face % 2 == 0 ? 0.5 : -0.5;
            const int axis = face / 2;
            double v[3], nv[3] = {0, 0, 0};
            v[axis] = s;
            v[(axis + 1) % 3] = a;
            v[(axis + 2) % 3] = b;
            nv[axis] = s > 0 ? 1.0 : -1.0;
            px = v[0], py = v[1], pz = v[2];
            nx = nv[0], ny = nv[1], nz = nv[2];
            break;
        }
        case ShapeKind::torus: {
            using namespace shapes;
            double th = 0, ph = 0;
            do {  // accept with probability proportional to the local area element
                th = 2 * pi * u01(rng);
                ph = 2 * pi * u01(rng);
            } while (u01(rng) * (kTorusMajor + kTorusMinor) > kTorusMajor + kTorusMinor * std::cos(ph));
            nx = std::cos(ph) * std::cos(th);
            ny = std::cos(ph) * std::sin(th);
            nz = std::sin(ph);
            px = (kTorusMajor + kTorusMinor * std::cos(ph)) * std::cos(th);
            py = (kTorusMajor + kTorusMinor * std::cos(ph)) * std::sin(th);
            pz = kTorusMinor * std::sin(ph);
            break;
        }
        case ShapeKind::cylinder: {
            using namespace shapes;
            const double side = 2 * pi * kCylinderRadius * kCylinderHeight;
            const double cap = pi * kCylinderRadius * kCylinderRadius;
            const double pick = u01(rng) * (side + 2 * cap);
            const double th = 2 * pi * u01(rng);
            if (pick < side) {
                px = kCylinderRadius * std::cos(th);
                py = kCylinderRadius * std::sin(th);
                pz = (u01(rng) - 0.5) * kCylinderHeight;
                nx = std::cos(th);
                ny = std::sin(th);
            } else {
                const double r = kCylinderRadius * std::sqrt(u01(rng));
                const double s = pick < side + cap ? 0.5 : -0.5;
                px = r * std::cos(th);
                py = r * std::sin(th);
                pz = s * kCylinderHeight;
                nz = s > 0 ? 1.0 : -1.0;
            }
            break;
        }
        }
        p[i * 3] = px, p[i * 3 + 1] = py, p[i * 3 + 2] = pz;
        q[i * 3] = nx, q[i * 3 + 1] = ny, q[i * 3 + 2] = nz;
    }
    return pc;
}

// ---------------------------------------------------------------- augmentation

struct AugmentRanges {
    double scale_min = 2.0 / 3.0;
    double scale_max = 1.5;
    double angle = std::numbers::pi;  // rotation about z drawn from [-angle, angle]
    double shift = 0.2;               // per-axis translation drawn from [-shift, shift]

    static AugmentRanges classification() { return {}; }
    static AugmentRanges segmentation() { return {2.0 / 3.0, 1.5, std::numbers::pi, 0.1}; }
    static AugmentRanges identity() { return {1.0, 1.0, 0.0, 0.0}; }
};

struct AugmentDraw {
    double scale[3] = {1, 1, 1};
    double angle = 0;
    double shift[3] = {0, 0, 0};
};

inline AugmentDraw draw_augment(const AugmentRanges& r, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    auto uniform = [&](double lo, double hi) {
        if (lo == hi) return lo;
        return std::uniform_real_distribution<double>(lo, hi)(rng);
    };
    AugmentDraw d;
    for (double& s : d.scale) s = uniform(r.scale_min, r.scale_max);
    d.angle = uniform(-r.angle, r.angle);
    for (double& s : d.shift) s = uniform(-r.shift, r.shift);
    return d;
}

// Anisotropic scale, then rotation about z, then translation. Normals are
// rotated only, and renormalized if rounding moved them off unit length.
inline PointCloud apply_augment(const PointCloud& in, const AugmentDraw& d)
{
    PointCloud out = in;
    const bool identity = d.angle == 0.0 && d.scale[0] == 1.0 && d.scale[1] == 1.0 && d.scale[2] == 1.0 &&
                          d.shift[0] == 0.0 && d.shift[1] == 0.0 && d.shift[2] == 0.0;
    if (identity) return out;
    const double c = std::cos(d.angle), s = std::sin(d.angle);
    for (std::size_t i = 0; i < in.size(); ++i) {
        const double x = in.positions[i * 3] * d.scale[0];
        const double y = in.positions[i * 3 + 1] * d.scale[1];
        const double z = in.positions[i * 3 + 2] * d.scale[2];
        out.positions[i * 3] = c * x - s * y + d.shift[0];
        out.positions[i * 3 + 1] = s * x + c * y + d.shift[1];
        out.positions[i * 3 + 2] = z + d.shift[2];
        if (in.normals) {
            const auto& n = *in.normals;
            double nx = c * n[i * 3] - s * n[i * 3 + 1];
            double ny = s * n[i * 3] + c * n[i * 3 + 1];
            double nz = n[i * 3 + 2];
            const double len = std::sqrt(nx * nx + ny * ny + nz * nz);
            if (std::abs(len - 1.0) > 1e-12 && len > 0) nx /= len, ny /= len, nz /= len;
            auto& m = *out.normals;
            m[i * 3] = nx, m[i * 3 + 1] = ny, m[i * 3 + 2] = nz;
        }
    }
    return out;
}

inline PointCloud augment(const PointCloud& in, std::uint64_t seed, const AugmentRanges& r = AugmentRanges::classification())
{
    return apply_augment(in, draw_augment(r, seed));
}

// ---------------------------------------------------------------- datasets

// count clouds cycling through the four shapes; label = shape index.
inline std::vector<PointCloud> synthetic_classification(std::size_t count, std::size_t points, std::uint64_t seed,
                                                        bool with_augment)
{
    std::vector<PointCloud> out;
    out.reserve(count);
    std::mt19937_64 seeds(seed);
    for (std::size_t i = 0; i < count; ++i) {
        const int label = static_cast<int>(i % 4);
        const std::uint64_t shape_seed = seeds(), aug_seed = seeds();
        PointCloud pc = synth_shape(kShapeKinds[label], points, shape_seed);
        if (with_augment) pc = augment(pc, aug_seed);
        pc.label = label;
        out.push_back(std::move(pc));
    }
    return out;
}

// Scenes of two different shapes side by side along x; every point is
// labelled with the index of the shape it was sampled from.
inline std::vector<PointCloud> synthetic_segmentation(std::size_t count, std::size_t points, std::uint64_t seed,
                                                      bool with_augment)
{
    std::vector<PointCloud> out;
    std::mt19937_64 seeds(seed);
    for (std::size_t i = 0; i < count; ++i) {
        const int first = static_cast<int>(seeds() % 4);
        const int second = static_cast<int>((static_cast<std::uint64_t>(first) + 1 + seeds() % 3) % 4);
        const std::size_t half = points / 2;
        PointCloud a = synth_shape(kShapeKinds[first], half, seeds());
        PointCloud b = synth_shape(kShapeKinds[second], points - half, seeds());
        PointCloud pc;
        pc.positions = Tensor({points, 3});
        pc.normals = Tensor({points, 3});
        for (std::size_t j = 0; j < points; ++j) {
            const bool in_a = j < half;
            const PointCloud& src = in_a ? a : b;
            const std::size_t k = in_a ? j : j - half;
            for (int ax = 0; ax < 3; ++ax) {
                pc.positions[j * 3 + ax] = src.positions[k * 3 + ax] + (ax == 0 ? (in_a ? -1.5 : 1.5) : 0.0);
                (*pc.normals)[j * 3 + ax] = (*src.normals)[k * 3 + ax];
            }
            pc.point_labels.push_back(in_a ? first : second);
        }
        if (with_augment) {
            auto labels = pc.point_labels;
            pc = augment(pc, seeds(), AugmentRanges::segmentation());
            pc.point_labels = std::move(labels);
        } else {
            seeds();
        }
        out.push_back(std::move(pc));
    }
    return out;
}

}  // namespace pointmamba
