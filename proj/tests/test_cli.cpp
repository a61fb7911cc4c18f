#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path& root() {
    static const fs::path r = [] {
        auto p = fs::temp_directory_path() / "adm_cli_test";
        fs::remove_all(p);
        fs::create_directories(p);
        return p;
    }();
    return r;
}

/// Runs the CLI with `args`, output discarded; returns the exit status.
int adm(const std::string& args, const std::string& env = "") {
    const std::string cmd = env + (env.empty() ? "" : " ") + "'" + std::string(ADM_CLI_PATH) + "' " + args +
                            " >>'" + (root() / "log.txt").string() + "' 2>&1";
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string p(const std::string& rel) { return (root() / rel).string(); }

std::string slurp(const fs::path& f) {
    std::ifstream in(f, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

json read_json(const fs::path& f) { return json::parse(slurp(f)); }

const std::string kSmallData = "--size 16x16 --n-train 6 --n-val 2 --n-test 4 --radius-min 2 --radius-max 3";
const std::string kSmallTrain =
    "--epochs-ctoc 1 --epochs-joint 2 --batch-size 3 --base-channels 4 --resblocks 1 --threads 1";

/// Dataset and bundle shared by the pipeline tests.
void ensure_pipeline() {
    static bool done = false;
    if (done) return;
    ASSERT_EQ(adm("gen-data --out " + p("data") + " --seed 4 " + kSmallData), 0);
    ASSERT_EQ(adm("train --data " + p("data") + " --out " + p("models/adm.admb") + " " + kSmallTrain), 0);
    done = true;
}

}  // namespace

TEST(Cli, UsageErrorsExitWithTwo) {
    EXPECT_EQ(adm(""), 2);
    EXPECT_EQ(adm("bogus"), 2);
    EXPECT_EQ(adm("gen-data"), 2);
    EXPECT_EQ(adm("gen-data --out " + p("x") + " --size 16by16"), 2);
    EXPECT_EQ(adm("gen-data --out " + p("x") + " --contrasts 3"), 2);
    EXPECT_EQ(adm("train --data " + p("nowhere")), 2);
    EXPECT_EQ(adm("train --data " + p("d") + " --out " + p("m.admb") + " --variant nope"), 2);
    EXPECT_EQ(adm("eval --bundle " + p("missing.admb") + " --data " + p("d") + " --out " + p("e")), 2);
    EXPECT_EQ(adm("singularity-demo --out " + p("s") + " --mode sideways"), 2);
    EXPECT_EQ(adm("gen-data --out " + p("x") + " --config " + p("no_such.json")), 2);
    EXPECT_EQ(adm("--help"), 0);
}

TEST(Cli, GenDataIsByteIdenticalAcrossRuns) {
    ASSERT_EQ(adm("gen-data --out " + p("g1") + " --seed 9 " + kSmallData), 0);
    ASSERT_EQ(adm("gen-data --out " + p("g2") + " --seed 9 " + kSmallData), 0);
    std::size_t files = 0;
    for (const auto& e : fs::directory_iterator(root() / "g1")) {
        EXPECT_EQ(slurp(e.path()), slurp(root() / "g2" / e.path().filename())) << e.path().filename();
        ++files;
    }
    EXPECT_EQ(files, 6u + 2u + 4u + 2u);  // samples, manifest, config echo
    EXPECT_EQ(read_json(root() / "g1" / "config.json").at("phantom").at("seed"), 9);
}

TEST(Cli, SeedPrecedenceFlagThenConfigThenEnvironment) {
    {
        std::ofstream c(p("seed.json"));
        c << R"({"gen-data": {"seed": 21}})";
    }
    ASSERT_EQ(adm("gen-data --out " + p("s_env") + " " + kSmallData, "ADM_SEED=17"), 0);
    ASSERT_EQ(adm("gen-data --out " + p("s_cfg") + " --config " + p("seed.json") + " " + kSmallData, "ADM_SEED=17"), 0);
    ASSERT_EQ(adm("gen-data --out " + p("s_flag") + " --seed 5 --config " + p("seed.json") + " " + kSmallData,
                  "ADM_SEED=17"),
              0);
    EXPECT_EQ(read_json(root() / "s_env" / "config.json").at("phantom").at("seed"), 17);
    EXPECT_EQ(read_json(root() / "s_cfg" / "config.json").at("phantom").at("seed"), 21);
    EXPECT_EQ(read_json(root() / "s_flag" / "config.json").at("phantom").at("seed"), 5);
    EXPECT_EQ(adm("gen-data --out " + p("s_bad") + " " + kSmallData, "ADM_SEED=abc"), 2);
}

TEST(Cli, TrainWritesBundleReportAndConfigEcho) {
    ensure_pipeline();
    EXPECT_TRUE(fs::exists(root() / "models" / "adm.admb"));
    const auto report = read_json(root() / "models" / "adm.report.json");
    EXPECT_EQ(report.at("status"), "completed");
    EXPECT_EQ(report.at("joint_total").size(), 2u);
    const auto cfg = read_json(root() / "models" / "adm.config.json");
    EXPECT_EQ(cfg.at("variant"), "adm");
    EXPECT_EQ(cfg.at("train").at("base_channels"), 4);
    EXPECT_EQ(cfg.at("train").at("epochs_joint"), 2);
}

TEST(Cli, TrainingIsReproducible) {
    ensure_pipeline();
    ASSERT_EQ(adm("train --data " + p("data") + " --out " + p("models/again.admb") + " " + kSmallTrain), 0);
    EXPECT_EQ(slurp(root() / "models" / "adm.admb"), slurp(root() / "models" / "again.admb"));
}

TEST(Cli, EvalReportsMetricsWithFixedKeys) {
    ensure_pipeline();
    ASSERT_EQ(adm("eval --bundle " + p("models/adm.admb") + " --data " + p("data") + " --out " + p("eval") +
                  " --by-size --export-maps"),
              0);
    const auto m = read_json(root() / "eval" / "metrics.json");
    for (const char* k : {"auc", "precision", "recall", "f1", "threshold", "counts"}) EXPECT_TRUE(m.contains(k)) << k;
    EXPECT_GE(m.at("auc").get<double>(), 0.0);
    EXPECT_LE(m.at("auc").get<double>(), 1.0);
    EXPECT_TRUE(fs::exists(root() / "eval" / "by_size.json"));
    EXPECT_TRUE(fs::exists(root() / "eval" / "test_0000.pgm"));
    EXPECT_EQ(read_json(root() / "eval" / "config.json").at("command"), "eval");

    // Same inputs, same report bytes.
    ASSERT_EQ(adm("eval --bundle " + p("models/adm.admb") + " --data " + p("data") + " --out " + p("eval2") +
                  " --by-size --export-maps"),
              0);
    EXPECT_EQ(slurp(root() / "eval" / "metrics.json"), slurp(root() / "eval2" / "metrics.json"));
}

TEST(Cli, ScoreWritesOneMapPerImage) {
    ensure_pipeline();
    ASSERT_EQ(adm("score --bundle " + p("models/adm.admb") + " --data " + p("data") + " --split validation --out " +
                  p("scores")),
              0);
    std::size_t maps = 0;
    for (const auto& e : fs::directory_iterator(root() / "scores")) maps += e.path().extension() == ".mcad";
    EXPECT_EQ(maps, 2u);
    EXPECT_EQ(read_json(root() / "scores" / "config.json").at("split"), "validation");
    EXPECT_EQ(adm("score --bundle " + p("models/adm.admb") + " --data " + p("data") + " --split train --out " +
                  p("scores_train")),
              2);
}

TEST(Cli, SingularityDemoExitCodes) {
    EXPECT_EQ(adm("singularity-demo --mode baseline --out " + p("demo_base") + " --threads 1"), 1);
    EXPECT_EQ(adm("singularity-demo --mode clamped --out " + p("demo_clamp") + " --threads 1"), 0);
    const auto base = read_json(root() / "demo_base" / "summary.json");
    const auto clamp = read_json(root() / "demo_clamp" / "summary.json");
    EXPECT_NE(base.at("status"), "completed");
    EXPECT_EQ(clamp.at("status"), "completed");
    const auto csv = slurp(root() / "demo_clamp" / "curve.csv");
    EXPECT_EQ(csv.substr(0, csv.find(',')), "epoch");
    EXPECT_EQ(read_json(root() / "demo_clamp" / "config.json").at("mode"), "clamped");
}
