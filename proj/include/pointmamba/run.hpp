// Run configuration for the CLI and dataset assembly from manifests or the
// synthetic generators.
#pragma once

#include <cstdlib>
#include <optional>

#include "checkpoint.hpp"
#include "data.hpp"
#include "train.hpp"

namespace pointmamba {

struct RunConfig {
    ModelConfig model;
    std::uint64_t seed = 0;
    std::size_t epochs = 10;
    std::size_t batch_size = 8;
    std::size_t max_steps = 0;
    double learning_rate = 1e-3;
    std::string manifest;  // empty: synthetic data
    std::string output_dir = ".";
    std::size_t synthetic_train = 256;
    std::size_t synthetic_test = 64;
    std::size_t points_per_cloud = 1024;
    bool augment = true;
    std::size_t threads = 1;

    void set(const std::string& key, const std::string& v)
    {
        if (model.set(key, v)) return;
        if (key == "seed") seed = cfg::to_size(key, v);
        else if (key == "epochs") epochs = cfg::to_size(key, v);
        else if (key == "batch_size") batch_size = cfg::to_size(key, v);
        else if (key == "max_steps") max_steps = cfg::to_size(key, v);
        else if (key == "learning_rate") learning_rate = cfg::to_double(key, v);
        else if (key == "manifest") manifest = v;
        else if (key == "output_dir") output_dir = v;
        else if (key == "synthetic_train") synthetic_train = cfg::to_size(key, v);
        else if (key == "synthetic_test") synthetic_test = cfg::to_size(key, v);
        else if (key == "points_per_cloud") points_per_cloud = cfg::to_size(key, v);
        else if (key == "augment") augment = cfg::to_bool(key, v);
        else if (key == "threads") threads = cfg::to_size(key, v);
        else throw Error("unknown config key '" + key + "'");
    }

    void validate() const
    {
        model.validate();
        if (batch_size == 0) throw Error("batch_size must be positive");
        if (!(learning_rate > 0.0)) throw Error("learning_rate must be positive");
        if (threads == 0) throw Error("threads must be positive");
        if (manifest.empty() && (synthetic_train == 0 || synthetic_test == 0))
            throw Error("synthetic_train and synthetic_test must be positive");
        if (points_per_cloud < 8) throw Error("points_per_cloud must be at least 8");
    }

    static RunConfig parse(const std::string& text)
    {
        RunConfig r;
        for (const auto& e : cfg::parse(text)) {
            try {
                r.set(e.key, e.value);
            } catch (const Error& err) {
                throw Error("line " + std::to_string(e.line) + ": " + err.what());
            }
        }
        return r;
    }

    static RunConfig load(const std::string& path)
    {
        try {
            return parse(cfg::read_file(path));
        } catch (const Error& err) {
            throw Error(path + ": " + err.what());
        }
    }

    TrainOptions train_options() const { return {epochs, batch_size, max_steps, learning_rate, seed, threads}; }
};

// --seed flag, then PM_SEED, then the given fallback.
inline std::uint64_t resolve_seed(std::optional<std::uint64_t> flag, std::uint64_t fallback)
{
    if (flag) return *flag;
    if (const char* env = std::getenv("PM_SEED"); env && *env) return cfg::to_size("PM_SEED", env);
    return fallback;
}

// Classification: label is an integer class id. Segmentation: label is a path
// to a per-point label file.
inline std::vector<PointCloud> load_dataset(const std::string& manifest, const ModelConfig& config)
{
    std::vector<PointCloud> out;
    const auto base = std::filesystem::path(manifest).parent_path();
    for (const auto& e : load_manifest(manifest)) {
        PointCloud pc = load_xyz_ascii(e.path);
        if (config.head == HeadType::classify) {
            const auto label = cfg::to_size("label", e.label);
            if (label >= config.num_classes) throw Error(e.path + ": label " + e.label + " out of range");
            pc.label = static_cast<int>(label);
        } else {
            std::filesystem::path lp = e.label;
            if (lp.is_relative()) lp = base / lp;
            pc.point_labels = load_point_labels(lp.string());
            if (pc.point_labels.size() != pc.size())
                throw Error(lp.string() + ": expected " + std::to_string(pc.size()) + " labels");
            for (int l : pc.point_labels)
                if (static_cast<std::size_t>(l) >= config.num_classes) throw Error(lp.string() + ": label out of range");
        }
        if (config.use_normals && !pc.normals) throw Error(e.path + ": model expects normals");
        out.push_back(std::move(pc));
    }
    return out;
}

inline std::vector<PointCloud> synthetic_dataset(const ModelConfig& config, std::size_t count, std::size_t points,
                                                 std::uint64_t seed, bool with_augment)
{
    return config.head == HeadType::classify ? synthetic_classification(count, points, seed, with_augment)
                                             : synthetic_segmentation(count, points, seed, with_augment);
}

// Writes clouds as .xyz files plus a manifest next to them.
inline void write_dataset(const std::string& dir, const std::vector<PointCloud>& data, const ModelConfig& config)
{
    std::filesystem::create_directories(dir);
    std::ofstream manifest(std::filesystem::path(dir) / "manifest.csv");
    if (!manifest) throw Error("cannot write manifest in '" + dir + "'");
    for (std::size_t i = 0; i < data.size(); ++i) {
        const std::string name = "cloud_" + std::to_string(i);
        write_xyz_ascii((std::filesystem::path(dir) / (name + ".xyz")).string(), data[i]);
        if (config.head == HeadType::classify) {
            manifest << name << ".xyz," << data[i].label << '\n';
        } else {
            std::ofstream labels(std::filesystem::path(dir) / (name + ".labels"));
            for (int l : data[i].point_labels) labels << l << '\n';
            manifest << name << ".xyz," << name << ".labels\n";
        }
    }
}

}  // namespace pointmamba
