// Hierarchical Point Mamba network: octree serialization, feature embedding,
// stages of blocks with octree max-pool downsampling, a lightweight FPN
// decoder and classification / segmentation heads.
//
// Stage i (0-based) runs on the occupied nodes of octree level depth - i.
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "block.hpp"
#include "config.hpp"
#include "octree.hpp"

namespace pointmamba {

enum class HeadType { classify, segment };

struct ModelConfig {
    unsigned octree_depth = 6;
    AxisOrder axis_order;
    std::vector<std::size_t> stage_blocks{6, 6};
    std::vector<std::size_t> stage_channels{96, 192};
    std::size_t state_size = 16;
    std::size_t conv_width = 4;
    std::size_t expansion = 2;
    Discretization mode = Discretization::simplified;
    HeadType head = HeadType::classify;
    std::size_t num_classes = 4;
    bool use_normals = false;

    static ModelConfig classification() { return {}; }

    static ModelConfig segmentation()
    {
        ModelConfig c;
        c.stage_blocks = {2, 2, 18, 2};
        c.stage_channels = {96, 192, 384, 384};
        c.head = HeadType::segment;
        return c;
    }

    std::size_t num_stages() const { return stage_channels.size(); }
    std::size_t input_width() const { return use_normals ? 9 : 6; }

    BlockConfig block(std::size_t stage) const
    {
        return {stage_channels.at(stage), expansion, state_size, conv_width, mode};
    }

    void validate() const
    {
        if (octree_depth < 1 || octree_depth > kMaxOctreeDepth) throw Error("octree_depth must be in [1, 21]");
        if (stage_blocks.size() != stage_channels.size()) throw Error("stage_blocks and stage_channels differ in length");
        if (stage_channels.empty()) throw Error("at least one stage is required");
        if (stage_channels.size() > octree_depth + 1) throw Error("more stages than octree levels");
        for (auto c : stage_channels)
            if (c == 0) throw Error("stage_channels must be positive");
        if (state_size == 0 || conv_width == 0 || expansion == 0) throw Error("state_size, conv_width, expansion must be positive");
        if (num_classes < 2) throw Error("num_classes must be at least 2");
    }

    // Returns false for keys this struct does not own.
    bool set(const std::string& key, const std::string& v)
    {
        if (key == "octree_depth") octree_depth = static_cast<unsigned>(cfg::to_size(key, v));
        else if (key == "axis_order") axis_order = AxisOrder::parse(v);
        else if (key == "stage_blocks") stage_blocks = cfg::to_size_list(key, v);
        else if (key == "stage_channels") stage_channels = cfg::to_size_list(key, v);
        else if (key == "state_size") state_size = cfg::to_size(key, v);
        else if (key == "conv_width") conv_width = cfg::to_size(key, v);
        else if (key == "expansion") expansion = cfg::to_size(key, v);
        else if (key == "discretization") mode = parse_discretization(v);
        else if (key == "head") {
            if (v == "classify") head = HeadType::classify;
            else if (v == "segment") head = HeadType::segment;
            else throw Error("head: '" + v + "' (expected classify|segment)");
        }
        else if (key == "num_classes") num_classes = cfg::to_size(key, v);
        else if (key == "use_normals") use_normals = cfg::to_bool(key, v);
        else return false;
        return true;
    }

    std::string to_text() const
    {
        std::ostringstream os;
        os << "octree_depth = " << octree_depth << '\n'
           << "axis_order = " << axis_order.str() << '\n'
           << "stage_blocks = " << cfg::join(stage_blocks) << '\n'
           << "stage_channels = " << cfg::join(stage_channels) << '\n'
           << "state_size = " << state_size << '\n'
           << "conv_width = " << conv_width << '\n'
           << "expansion = " << expansion << '\n'
           << "discretization = " << to_string(mode) << '\n'
           << "head = " << (head == HeadType::classify ? "classify" : "segment") << '\n'
           << "num_classes = " << num_classes << '\n'
           << "use_normals = " << (use_normals ? "true" : "false") << '\n';
        return os.str();
    }

    static ModelConfig from_text(const std::string& text)
    {
        ModelConfig c;
        for (const auto& e : cfg::parse(text)) {
            if (!c.set(e.key, e.value)) throw Error("unknown model config key '" + e.key + "'");
        }
        c.validate();
        return c;
    }
};

struct Model {
    ModelConfig config;
    ParamStore params;
};

namespace net {

inline std::string stage_prefix(std::size_t s, std::size_t b)
{
    return "stage" + std::to_string(s) + ".block" + std::to_string(b) + ".";
}

inline void add_linear(ParamStore& store, const std::string& prefix, std::size_t in, std::size_t out, std::mt19937_64& rng)
{
    store.add(prefix + "W", linear_init(in, out, rng));
    store.add(prefix + "b", uniform_tensor({out}, 1.0 / std::sqrt(static_cast<double>(in)), rng));
}

inline void add_norm(ParamStore& store, const std::string& prefix, std::size_t c)
{
    store.add(prefix + "weight", Tensor({c}, 1.0));
    store.add(prefix + "bias", Tensor({c}, 0.0));
}

inline Var linear(Bound& p, const std::string& prefix, Var x)
{
    return add(matmul(x, p(prefix + "W")), p(prefix + "b"));
}

}  // namespace net

inline Model init_model(const ModelConfig& config, std::uint64_t seed)
{
    config.validate();
    Model m{config, {}};
    std::mt19937_64 rng(seed);
    auto& s = m.params;
    const auto& ch = config.stage_channels;
    net::add_linear(s, "embed.", config.input_width(), ch[0], rng);
    net::add_norm(s, "embed.norm.", ch[0]);
    for (std::size_t st = 0; st < config.num_stages(); ++st) {
        if (st > 0) {
            const std::string d = "down" + std::to_string(st) + ".";
            net::add_linear(s, d, ch[st - 1], ch[st], rng);
            net::add_norm(s, d + "norm.", ch[st]);
        }
        for (std::size_t b = 0; b < config.stage_blocks[st]; ++b) {
            init_block_params(s, net::stage_prefix(st, b), config.block(st), rng);
        }
    }
    if (config.head == HeadType::classify) {
        net::add_linear(s, "head.fc1.", 2 * ch.back(), ch.back(), rng);
        net::add_linear(s, "head.fc2.", ch.back(), config.num_classes, rng);
    } else {
        for (std::size_t st = 0; st < config.num_stages(); ++st) {
            net::add_linear(s, "fpn.lateral" + std::to_string(st) + ".", ch[st], ch.back(), rng);
        }
        net::add_linear(s, "head.", ch.back(), config.num_classes, rng);
    }
    return m;
}

// Normalizes the cloud and builds its octree. Leaf features are mean normals
// when normals are used, otherwise mean positions.
inline Octree build_model_octree(const ModelConfig& config, const Tensor& points, const std::optional<Tensor>& normals)
{
    if (config.use_normals && !normals) throw Error("model config uses normals but the cloud has none");
    if (normals && normals->shape() != points.shape()) throw Error("normals shape does not match points");
    const Tensor unit = normalize_points(points);
    const Tensor& feats = config.use_normals ? *normals : unit;
    return build_octree(unit, feats, config.octree_depth, config.axis_order);
}

// Per-leaf embedding input: offset of the mean point from its cell center (in
// cell units), global position in [-1, 1], and optionally the mean normal.
inline Tensor leaf_input_features(const Octree& tree, bool use_normals)
{
    const std::size_t l = tree.num_leaves();
    const std::size_t w = use_normals ? 9 : 6;
    if (use_normals && tree.leaf_features.dim(1) != 3) throw Error("embed: octree leaf features are not normals");
    const double cells = static_cast<double>(std::uint64_t{1} << tree.depth);
    Tensor f({l, w});
    for (std::size_t i = 0; i < l; ++i) {
        const auto& c = tree.leaf_coords[i];
        for (int a = 0; a < 3; ++a) {
            const double u = tree.leaf_positions[i * 3 + a];
            f[i * w + a] = u * cells - (static_cast<double>(c[a]) + 0.5);
            f[i * w + 3 + a] = 2.0 * u - 1.0;
            if (use_normals) f[i * w + 6 + a] = tree.leaf_features[i * 3 + a];
        }
    }
    return f;
}

inline Var embed_features(Bound& p, const Octree& tree, const ModelConfig& config)
{
    const Tensor f = leaf_input_features(tree, config.use_normals);
    if (p.store().at("embed.W").dim(0) != f.dim(1)) {
        throw Error("embed: feature width " + std::to_string(f.dim(1)) + " does not match embedding weight " +
                    shape_str(p.store().at("embed.W").shape()));
    }
    Var x = net::linear(p, "embed.", p.tape().constant(f));
    return silu(layer_norm(x, p("embed.norm.weight"), p("embed.norm.bias")));
}

inline Var run_stage(Bound& p, std::size_t stage, std::size_t blocks, const BlockConfig& cfg, Var features)
{
    for (std::size_t b = 0; b < blocks; ++b) features = block_forward(p, net::stage_prefix(stage, b), cfg, features);
    return features;
}

// Max over each parent's children, then Linear -> LayerNorm -> SiLU.
inline Var downsample(Bound& p, const std::string& prefix, Var features, const std::vector<RowRange>& groups)
{
    Var pooled = segment_max(features, groups);
    Var proj = net::linear(p, prefix, pooled);
    return silu(layer_norm(proj, p(prefix + "norm.weight"), p(prefix + "norm.bias")));
}

// Top-down decode: project the coarsest stage to the common width, then per
// finer stage broadcast parent rows to children and add the lateral projection.
inline Var fpn_decode(Bound& p, std::span<const Var> stages, const Octree& tree)
{
    if (stages.empty()) throw Error("fpn_decode: no stage outputs");
    const std::size_t k = stages.size();
    Var cur = net::linear(p, "fpn.lateral" + std::to_string(k - 1) + ".", stages[k - 1]);
    for (std::size_t i = k - 1; i-- > 0;) {
        const unsigned level = tree.depth - static_cast<unsigned>(i);
        if (stages[i].dim(0) != tree.num_nodes(level)) throw Error("fpn_decode: stage rows do not match octree level");
        Var up = gather_rows(cur, tree.parent[level]);
        cur = add(up, net::linear(p, "fpn.lateral" + std::to_string(i) + ".", stages[i]));
    }
    return cur;
}

// concat(mean, max) over rows -> Linear -> SiLU -> Linear.
inline Var classify_head(Bound& p, Var features)
{
    Var pooled = concat({mean(features, 0), max(features, 0)}, 0);
    Var row = reshape(pooled, {1, pooled.dim(0)});
    Var hidden = silu(net::linear(p, "head.fc1.", row));
    Var logits = net::linear(p, "head.fc2.", hidden);
    return reshape(logits, {logits.dim(1)});
}

// Per-leaf logits broadcast to every input point through leaf_of_point.
inline Var segment_head(Bound& p, Var leaf_features, const std::vector<std::size_t>& leaf_of_point)
{
    Var leaf_logits = net::linear(p, "head.", leaf_features);
    return gather_rows(leaf_logits, leaf_of_point);
}

struct ForwardResult {
    Octree tree;
    std::vector<Var> stage_outputs;
    Var logits;  // (K) for classification, (N, K) for segmentation
};

inline ForwardResult model_forward(Bound& p, const ModelConfig& config, const Tensor& points,
                                   const std::optional<Tensor>& normals = std::nullopt)
{
    config.validate();
    ForwardResult r{build_model_octree(config, points, normals), {}, {}};
    Var x = embed_features(p, r.tree, config);
    for (std::size_t st = 0; st < config.num_stages(); ++st) {
        if (st > 0) {
            const unsigned level = config.octree_depth - static_cast<unsigned>(st) + 1;
            x = downsample(p, "down" + std::to_string(st) + ".", x, parent_groups(r.tree, level));
        }
        x = run_stage(p, st, config.stage_blocks[st], config.block(st), x);
        r.stage_outputs.push_back(x);
    }
    if (config.head == HeadType::classify) {
        r.logits = classify_head(p, x);
    } else {
        r.logits = segment_head(p, fpn_decode(p, r.stage_outputs, r.tree), r.tree.leaf_of_point);
    }
    return r;
}

// Inference without gradient recording.
inline Tensor predict_logits(const Model& model, const Tensor& points, const std::optional<Tensor>& normals = std::nullopt)
{
    Tape tape(false);
    Bound p(tape, model.params, false);
    return model_forward(p, model.config, points, normals).logits.value();
}

}  // namespace pointmamba
