// pointmamba: verification suites, serialization dump, toy training,
// evaluation and scaling benchmark.
#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>

#include "pointmamba/harness.hpp"
#include "pointmamba/run.hpp"

using namespace pointmamba;

namespace {

std::optional<std::uint64_t> seed_flag;

int cmd_check(const std::string& suite, const std::string& fault_name)
{
    Fault fault = Fault::none;
    if (fault_name == "discretize-sign") fault = Fault::discretize_sign;
    else if (!fault_name.empty() && fault_name != "none") throw Error("unknown fault '" + fault_name + "'");
    bool ok = true;
    std::printf("%-26s %-28s %-12s %-10s %s\n", "suite", "metric", "value", "threshold", "result");
    for (const auto& r : run_checks(suite, fault, resolve_seed(seed_flag, 0))) {
        std::printf("%-26s %-28s %-12.4g %-10.3g %s (%.2fs)\n", r.name.c_str(), r.metric.c_str(), r.value, r.threshold,
                    r.pass ? "PASS" : "FAIL", r.seconds);
        ok = ok && r.pass;
    }
    return ok ? 0 : 1;
}

int cmd_serialize(const std::string& path, unsigned depth, const std::string& order)
{
    const PointCloud pc = load_xyz_ascii(path);
    const Tensor unit = normalize_points(pc.positions);
    std::cout << "# " << path << '\n' << serialize_table(build_octree(unit, unit, depth, AxisOrder::parse(order)));
    return 0;
}

RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides)
{
    RunConfig rc = path.empty() ? RunConfig{} : RunConfig::load(path);
    for (const auto& kv : overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw Error("--set expects key=value, got '" + kv + "'");
        rc.set(cfg::trim(kv.substr(0, eq)), cfg::trim(kv.substr(eq + 1)));
    }
    rc.seed = resolve_seed(seed_flag, rc.seed);
    rc.validate();
    return rc;
}

int cmd_train(const RunConfig& rc, bool dump_test)
{
    namespace fs = std::filesystem;
    fs::create_directories(rc.output_dir);
    std::vector<PointCloud> train_set, test_set;
    if (!rc.manifest.empty()) {
        train_set = load_dataset(rc.manifest, rc.model);
    } else {
        train_set = synthetic_dataset(rc.model, rc.synthetic_train, rc.points_per_cloud, rc.seed * 2 + 1, rc.augment);
        test_set = synthetic_dataset(rc.model, rc.synthetic_test, rc.points_per_cloud, rc.seed * 2 + 2, rc.augment);
    }
    Model model = init_model(rc.model, rc.seed);
    std::cerr << "parameters: " << model.params.total_elements() << ", training samples: " << train_set.size() << '\n';

    const std::string csv_path = (fs::path(rc.output_dir) / "metrics.csv").string();
    std::ofstream csv(csv_path);
    if (!csv) throw Error("cannot write '" + csv_path + "'");
    csv << "epoch,loss,acc\n";
    csv.precision(17);
    const auto summary = train(model, train_set, rc.train_options(), [&](const EpochMetrics& m) {
        csv << m.epoch << ',' << m.loss << ',' << m.acc << '\n';
        csv.flush();
        std::cerr << "epoch " << m.epoch << "  loss " << m.loss << "  acc " << m.acc << '\n';
    });

    const std::string ckpt = (fs::path(rc.output_dir) / "model.ckpt").string();
    save_checkpoint(ckpt, model);
    std::cout << "steps " << summary.steps << '\n' << "checkpoint " << ckpt << '\n' << "metrics " << csv_path << '\n';

    const auto fit = evaluate(model, train_set, rc.threads);
    std::cout << "train_accuracy " << fit.accuracy << "\ntrain_miou " << fit.miou << '\n';
    if (!test_set.empty()) {
        const auto res = evaluate(model, test_set, rc.threads);
        std::cout << "test_accuracy " << res.accuracy << "\ntest_miou " << res.miou << '\n';
        if (dump_test) {
            const std::string dir = (fs::path(rc.output_dir) / "test").string();
            write_dataset(dir, test_set, rc.model);
            std::cout << "test_manifest " << (fs::path(dir) / "manifest.csv").string() << '\n';
        }
    }
    return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& manifest, std::size_t threads)
{
    const Model model = load_checkpoint(ckpt);
    const auto data = load_dataset(manifest, model.config);
    const auto res = evaluate(model, data, threads);
    std::cout << "samples " << res.samples << "\naccuracy " << res.accuracy << "\nmiou " << res.miou << '\n';
    return 0;
}

int cmd_bench(const RunConfig& rc, const std::vector<std::size_t>& sizes, std::size_t repeats)
{
    const Model model = init_model(rc.model, rc.seed);
    std::cout << "n_points,leaves,block_flops,seconds,peak_bytes\n";
    for (std::size_t n : sizes) {
        const std::size_t one[] = {n};
        const auto row = run_bench(model, one, rc.seed, repeats).front();
        std::cout << row.points << ',' << row.leaves << ',' << row.block_flops << ',' << row.seconds << ','
                  << row.peak_bytes << std::endl;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Point Mamba point-cloud backbone: checks, training, evaluation, benchmarks"};
    app.require_subcommand(1);
    app.add_option("--seed", seed_flag, "Seed for every random choice (falls back to PM_SEED)");

    std::string suite = "all", fault;
    auto* check = app.add_subcommand("check", "Run the numerical and ordering verification suites");
    check->add_option("--suite", suite, "ssm | block | octree | all")->check(CLI::IsMember({"ssm", "block", "octree", "all"}));
    check->add_option("--inject-fault", fault, "Deliberately break a kernel (discretize-sign)");

    std::string cloud, axis_order = "xyz";
    unsigned depth = 6;
    auto* ser = app.add_subcommand("serialize", "Print the z-order leaf table of a point cloud");
    ser->add_option("cloud", cloud, "ASCII .xyz file")->required();
    ser->add_option("--depth", depth, "Octree depth")->check(CLI::Range(1u, kMaxOctreeDepth));
    ser->add_option("--axis-order", axis_order, "Axis order of the shuffled key");

    std::string config_path;
    std::vector<std::string> overrides;
    bool dump_test = false;
    auto* tr = app.add_subcommand("train-toy", "Train on synthetic shapes or a manifest");
    tr->add_option("--config", config_path, "key = value config file")->required();
    tr->add_option("--set", overrides, "Override a config key (key=value), repeatable");
    tr->add_flag("--write-test-set", dump_test, "Write the synthetic test set as .xyz files plus manifest");

    std::string ckpt, manifest;
    std::size_t threads = 1;
    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a manifest");
    ev->add_option("--ckpt", ckpt, "Checkpoint file")->required();
    ev->add_option("--manifest", manifest, "Manifest of path,label lines")->required();
    ev->add_option("--threads", threads, "Worker threads");

    std::string bench_config;
    std::vector<std::size_t> sizes{4096, 8192, 16384};
    std::size_t repeats = 5;
    auto* be = app.add_subcommand("bench", "Forward-pass FLOPs, time and memory against cloud size");
    be->add_option("--config", bench_config, "key = value config file")->required();
    be->add_option("--sizes", sizes, "Point counts")->delimiter(',');
    be->add_option("--repeats", repeats, "Timed runs per size (median reported)")->check(CLI::PositiveNumber);

    CLI11_PARSE(app, argc, argv);

    try {
        if (*check) return cmd_check(suite, fault);
        if (*ser) return cmd_serialize(cloud, depth, axis_order);
        if (*tr) return cmd_train(load_run_config(config_path, overrides), dump_test);
        if (*ev) return cmd_eval(ckpt, manifest, threads);
        if (*be) return cmd_bench(load_run_config(bench_config, {}), sizes, repeats);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}
