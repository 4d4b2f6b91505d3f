#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sys/wait.h>

#include "pointmamba/checkpoint.hpp"
#include "pointmamba/run.hpp"
#include "pointmamba/train.hpp"

using namespace pointmamba;
namespace fs = std::filesystem;

namespace {

struct Proc {
    int code = -1;
    std::string out;
};

Proc run(const std::string& args)
{
    const std::string cmd = std::string(POINTMAMBA_CLI) + " " + args + " 2>/dev/null";
    Proc p;
    FILE* pipe = popen(cmd.c_str(), "r");
    if (!pipe) throw std::runtime_error("popen failed");
    std::array<char, 4096> buf{};
    std::size_t n = 0;
    while ((n = fread(buf.data(), 1, buf.size(), pipe)) > 0) p.out.append(buf.data(), n);
    const int status = pclose(pipe);
    p.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return p;
}

fs::path scratch(const std::string& name)
{
    auto dir = fs::temp_directory_path() / ("pm_cli_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path& p) { return cfg::read_file(p.string()); }

ModelConfig tiny_model()
{
    ModelConfig c;
    c.octree_depth = 4;
    c.stage_blocks = {1};
    c.stage_channels = {8};
    c.state_size = 4;
    c.use_normals = true;
    return c;
}

// Small fast config for subprocess runs.
std::string tiny_flags(const fs::path& out)
{
    return "--set octree_depth=4 --set stage_blocks=1 --set stage_channels=8 --set state_size=4 "
           "--set synthetic_train=8 --set synthetic_test=4 --set points_per_cloud=64 --set batch_size=4 "
           "--set output_dir=" +
           out.string();
}

}  // namespace

TEST(Metrics, AccuracyAndIou)
{
    const std::vector<int> truth{0, 1, 2, 1, 0};
    EXPECT_EQ(accuracy(truth, truth), 1.0);
    EXPECT_EQ(mean_iou(truth, truth, 4), 1.0);  // class 3 absent from both, excluded
    const std::vector<int> pred{0, 0, 0, 0};
    const std::vector<int> half{0, 0, 1, 1};
    EXPECT_DOUBLE_EQ(mean_iou(pred, half, 2), 0.25);
    EXPECT_DOUBLE_EQ(accuracy(pred, half), 0.5);
    EXPECT_THROW(accuracy(pred, truth), Error);
    EXPECT_THROW(mean_iou(std::vector<int>{}, std::vector<int>{}, 2), Error);
    EXPECT_THROW(mean_iou(std::vector<int>{5}, std::vector<int>{0}, 2), Error);
}

TEST(Adam, FirstStepMovesByLearningRate)
{
    ParamStore s;
    s.add("w", Tensor({3}, {1.0, -2.0, 0.5}));
    Adam adam(s, 0.1);
    adam.step(s, {Tensor({3}, {4.0, -0.001, 0.0})});
    // bias-corrected first step is lr * sign(g) for nonzero g
    EXPECT_NEAR(s.values()[0][0], 0.9, 1e-9);
    EXPECT_NEAR(s.values()[0][1], -1.9, 1e-4);
    EXPECT_EQ(s.values()[0][2], 0.5);
    EXPECT_EQ(adam.steps(), 1u);
    EXPECT_THROW(adam.step(s, {}), Error);
}

TEST(Adam, MinimizesQuadratic)
{
    ParamStore s;
    s.add("x", Tensor({2}, {3.0, -4.0}));
    Adam adam(s, 0.05);
    for (int i = 0; i < 2000; ++i) {
        const auto& x = s.values()[0];
        adam.step(s, {Tensor({2}, {2 * (x[0] - 1.0), 2 * (x[1] + 2.0)})});
    }
    EXPECT_NEAR(s.values()[0][0], 1.0, 1e-3);
    EXPECT_NEAR(s.values()[0][1], -2.0, 1e-3);
}

TEST(RunConfigText, ParsesAndRejects)
{
    auto rc = RunConfig::parse("seed = 7\nepochs = 3\nstage_channels = 8, 16\nstage_blocks = 1,1\nlearning_rate = 0.01\n");
    EXPECT_EQ(rc.seed, 7u);
    EXPECT_EQ(rc.epochs, 3u);
    EXPECT_EQ(rc.model.stage_channels, (std::vector<std::size_t>{8, 16}));
    EXPECT_DOUBLE_EQ(rc.learning_rate, 0.01);
    try {
        RunConfig::parse("seed = 1\nstage_chanels = 8\n");
        FAIL();
    } catch (const Error& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("line 2"), std::string::npos) << msg;
        EXPECT_NE(msg.find("stage_chanels"), std::string::npos) << msg;
    }
    EXPECT_THROW(RunConfig::parse("batch_size = 0\n").validate(), Error);
    EXPECT_THROW(RunConfig::parse("learning_rate = -1\n").validate(), Error);
    EXPECT_THROW(RunConfig::parse("epochs = many\n"), Error);
}

TEST(RunConfigText, ShippedConfigsLoad)
{
    for (const char* name : {"toy_cls.cfg", "toy_seg.cfg", "bench.cfg"}) {
        const auto path = fs::path(POINTMAMBA_SOURCE_DIR) / "configs" / name;
        EXPECT_NO_THROW(RunConfig::load(path.string())) << name;
    }
}

TEST(Seed, FlagThenEnvThenFallback)
{
    unsetenv("PM_SEED");
    EXPECT_EQ(resolve_seed(std::nullopt, 5), 5u);
    setenv("PM_SEED", "11", 1);
    EXPECT_EQ(resolve_seed(std::nullopt, 5), 11u);
    EXPECT_EQ(resolve_seed(3, 5), 3u);
    setenv("PM_SEED", "abc", 1);
    EXPECT_THROW(resolve_seed(std::nullopt, 5), Error);
    unsetenv("PM_SEED");
}

TEST(Checkpoint, RoundTripBitwiseLogits)
{
    for (auto head : {HeadType::classify, HeadType::segment}) {
        ModelConfig c = tiny_model();
        c.head = head;
        c.stage_blocks = {1, 1};
        c.stage_channels = {8, 12};
        const Model m = init_model(c, 21);
        const Model back = decode_checkpoint(encode_checkpoint(m));
        EXPECT_EQ(back.config.to_text(), m.config.to_text());
        auto pc = synth_shape(ShapeKind::torus, 300, 2);
        EXPECT_TRUE(predict_logits(m, pc.positions, pc.normals).bitwise_equal(predict_logits(back, pc.positions, pc.normals)));
    }
}

TEST(Checkpoint, FileRoundTripAndCorruption)
{
    const Model m = init_model(tiny_model(), 1);
    const auto path = scratch("ckpt") / "m.ckpt";
    save_checkpoint(path.string(), m);
    const std::string bytes = slurp(path);
    EXPECT_EQ(bytes, encode_checkpoint(load_checkpoint(path.string())));

    std::string bad = bytes;
    bad[0] = 'X';
    EXPECT_THROW(decode_checkpoint(bad), Error);
    EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 5)), Error);
    EXPECT_THROW(decode_checkpoint(bytes + "z"), Error);
    EXPECT_THROW(decode_checkpoint(""), Error);
    EXPECT_THROW(load_checkpoint((path.parent_path() / "nope.ckpt").string()), Error);
}

TEST(Training, NonFiniteLossAborts)
{
    Model m = init_model(tiny_model(), 0);
    for (auto& v : m.params.values()[0].data()) v = 1e308;
    auto data = synthetic_classification(4, 64, 0, false);
    TrainOptions opt;
    opt.epochs = 1;
    EXPECT_THROW(train(m, data, opt), Error);
}

TEST(Training, EmptyDatasetRejected)
{
    Model m = init_model(tiny_model(), 0);
    EXPECT_THROW(train(m, {}, TrainOptions{}), Error);
    EXPECT_THROW(evaluate(m, {}), Error);
}

TEST(Training, ThreadCountDoesNotChangeResult)
{
    auto data = synthetic_classification(8, 64, 4, true);
    TrainOptions opt;
    opt.epochs = 1;
    opt.batch_size = 4;
    Model a = init_model(tiny_model(), 2), b = a;
    train(a, data, opt);
    opt.threads = 3;
    train(b, data, opt);
    for (std::size_t i = 0; i < a.params.size(); ++i) EXPECT_TRUE(a.params.values()[i].bitwise_equal(b.params.values()[i]));
}

// 64 synthetic clouds, widths (32,64), at most 500 optimizer steps.
TEST(Training, OverfitsSixtyFourClouds)
{
    RunConfig rc = RunConfig::load((fs::path(POINTMAMBA_SOURCE_DIR) / "configs" / "toy_cls.cfg").string());
    rc.model.stage_channels = {32, 64};
    rc.max_steps = 500;
    rc.epochs = 1000;
    const auto data = synthetic_dataset(rc.model, 64, rc.points_per_cloud, 1, true);
    Model m = init_model(rc.model, rc.seed);
    const auto summary = train(m, data, rc.train_options());
    EXPECT_LE(summary.steps, 500u);
    EXPECT_EQ(evaluate(m, data).accuracy, 1.0);
}

TEST(Cli, CheckPassesAndFaultFails)
{
    const auto ok = run("check");
    EXPECT_EQ(ok.code, 0) << ok.out;
    EXPECT_EQ(ok.out.find("FAIL"), std::string::npos);
    for (const char* s : {"lti_equivalence", "selective_scan_oracle", "block_gradient", "block_reversal_symmetry", "key_roundtrip"})
        EXPECT_NE(ok.out.find(s), std::string::npos) << s;

    const auto bad = run("check --suite ssm --inject-fault discretize-sign");
    EXPECT_NE(bad.code, 0);
    EXPECT_NE(bad.out.find("lti_equivalence"), std::string::npos);
    EXPECT_NE(bad.out.find("FAIL"), std::string::npos);
}

TEST(Cli, SuiteFilter)
{
    const auto p = run("check --suite octree");
    EXPECT_EQ(p.code, 0);
    EXPECT_NE(p.out.find("key_roundtrip"), std::string::npos);
    EXPECT_EQ(p.out.find("lti_equivalence"), std::string::npos);
    EXPECT_EQ(p.out.find("block_"), std::string::npos);
    EXPECT_NE(run("check --suite nonsense").code, 0);
}

TEST(Cli, Serialize)
{
    const auto dir = scratch("ser");
    std::ofstream(dir / "c.xyz") << "0 0 0\n1 1 1\n0.5 0.5 0.5\n0.9 0.1 0.2\n";
    const auto p = run("serialize " + (dir / "c.xyz").string() + " --depth 2 --axis-order zyx");
    EXPECT_EQ(p.code, 0);
    EXPECT_NE(p.out.find("leaves=4"), std::string::npos) << p.out;
    EXPECT_NE(p.out.find("1 0x9 3 0 0 1"), std::string::npos) << p.out;
    EXPECT_NE(run("serialize " + (dir / "missing.xyz").string()).code, 0);
    EXPECT_NE(run("serialize " + (dir / "c.xyz").string() + " --axis-order xxy").code, 0);
}

TEST(Cli, TrainIsDeterministicAndEvalReadsTestSet)
{
    const auto a = scratch("train_a"), b = scratch("train_b");
    const auto pa = run("--seed 3 train-toy --config " + (fs::path(POINTMAMBA_SOURCE_DIR) / "configs" / "toy_cls.cfg").string() +
                        " --set epochs=2 --write-test-set " + tiny_flags(a));
    ASSERT_EQ(pa.code, 0) << pa.out;
    const auto pb = run("--seed 3 train-toy --config " + (fs::path(POINTMAMBA_SOURCE_DIR) / "configs" / "toy_cls.cfg").string() +
                        " --set epochs=2 " + tiny_flags(b));
    ASSERT_EQ(pb.code, 0) << pb.out;
    const std::string csv = slurp(a / "metrics.csv");
    EXPECT_EQ(csv, slurp(b / "metrics.csv"));
    EXPECT_EQ(csv.rfind("epoch,loss,acc\n", 0), 0u);
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
    EXPECT_EQ(slurp(a / "model.ckpt"), slurp(b / "model.ckpt"));
    EXPECT_NE(pa.out.find("test_accuracy"), std::string::npos);

    const auto ev = run("eval --ckpt " + (a / "model.ckpt").string() + " --manifest " + (a / "test" / "manifest.csv").string());
    EXPECT_EQ(ev.code, 0) << ev.out;
    EXPECT_NE(ev.out.find("samples 4"), std::string::npos) << ev.out;
    // the saved test set reproduces the in-process score
    const auto at = pa.out.find("test_accuracy ");
    const auto line = pa.out.substr(at + 14, pa.out.find('\n', at) - at - 14);
    EXPECT_NE(ev.out.find("accuracy " + line + "\n"), std::string::npos) << ev.out << " vs " << line;
}

TEST(Cli, ZeroEpochsWritesInitialParams)
{
    const auto dir = scratch("zero");
    const auto p = run("--seed 9 train-toy --config " + (fs::path(POINTMAMBA_SOURCE_DIR) / "configs" / "toy_cls.cfg").string() +
                       " --set epochs=0 " + tiny_flags(dir));
    ASSERT_EQ(p.code, 0) << p.out;
    EXPECT_EQ(slurp(dir / "metrics.csv"), "epoch,loss,acc\n");
    EXPECT_NE(p.out.find("steps 0"), std::string::npos);
    const Model saved = load_checkpoint((dir / "model.ckpt").string());
    EXPECT_EQ(slurp(dir / "model.ckpt"), encode_checkpoint(init_model(saved.config, 9)));
}

TEST(Cli, SeedFromEnvironment)
{
    const auto a = scratch("env_a"), b = scratch("env_b");
    const std::string cfg = (fs::path(POINTMAMBA_SOURCE_DIR) / "configs" / "toy_cls.cfg").string();
    setenv("PM_SEED", "5", 1);
    ASSERT_EQ(run("train-toy --config " + cfg + " --set epochs=0 " + tiny_flags(a)).code, 0);
    unsetenv("PM_SEED");
    ASSERT_EQ(run("--seed 5 train-toy --config " + cfg + " --set epochs=0 " + tiny_flags(b)).code, 0);
    EXPECT_EQ(slurp(a / "model.ckpt"), slurp(b / "model.ckpt"));
}

TEST(Cli, Errors)
{
    const auto dir = scratch("errors");
    std::ofstream(dir / "empty.csv") << "";
    const Model m = init_model(tiny_model(), 0);
    save_checkpoint((dir / "m.ckpt").string(), m);
    const auto ev = run("eval --ckpt " + (dir / "m.ckpt").string() + " --manifest " + (dir / "empty.csv").string());
    EXPECT_EQ(ev.code, 2);
    EXPECT_EQ(run("eval --ckpt " + (dir / "m.ckpt").string() + " --manifest " + (dir / "missing.csv").string()).code, 2);

    const std::string cfg = (fs::path(POINTMAMBA_SOURCE_DIR) / "configs" / "toy_cls.cfg").string();
    EXPECT_EQ(run("train-toy --config " + cfg + " --set no_such_key=1").code, 2);
    EXPECT_EQ(run("train-toy --config " + cfg + " --set manifest=" + (dir / "missing.csv").string() + " " + tiny_flags(dir)).code, 2);
    EXPECT_NE(run("").code, 0);
}

TEST(Cli, BenchCsv)
{
    const auto p = run("bench --config " + (fs::path(POINTMAMBA_SOURCE_DIR) / "configs" / "bench.cfg").string() +
                       " --sizes 512,1024 --repeats 1");
    ASSERT_EQ(p.code, 0) << p.out;
    std::istringstream in(p.out);
    std::string header, r1, r2;
    std::getline(in, header);
    std::getline(in, r1);
    std::getline(in, r2);
    EXPECT_EQ(header, "n_points,leaves,block_flops,seconds,peak_bytes");
    EXPECT_EQ(r1.rfind("512,", 0), 0u);
    EXPECT_EQ(r2.rfind("1024,", 0), 0u);
}
