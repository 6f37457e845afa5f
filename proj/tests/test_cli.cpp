#include <gtest/gtest.h>

#include <cstdlib>
#include <sys/wait.h>

#include "toy_fleet.hpp"

using namespace restitch;
namespace fs = std::filesystem;

namespace {

struct Result {
    int code = -1;
    std::string err;
    std::string out;
};

/// Runs the CLI with `args`, capturing both streams.
Result run(const fs::path& work, const std::string& args) {
    const fs::path o = work / "stdout.txt", e = work / "stderr.txt";
    const std::string cmd =
        std::string("'") + RESTITCH_CLI + "' " + args + " >'" + o.string() + "' 2>'" + e.string() + "'";
    const int status = std::system(cmd.c_str());
    Result r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = read_file_text(o);
    r.err = read_file_text(e);
    return r;
}

class Cli : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        dir_ = toy::temp_dir("cli");
        const std::string configs = std::string(RESTITCH_SOURCE_DIR) + "/configs/";
        auto must = [](const Result& r) {
            if (r.code != 0) throw std::runtime_error("pipeline step failed: " + r.err);
        };
        const std::string d = dir_.string();
        must(run(dir_, "gen-data --seed 3 --per-class 20 --out " + d + "/data"));
        must(run(dir_, "train-base --spec " + configs + "toy_large.json --data " + d +
                           "/data --epochs 2 --seed 1 --out " + d + "/large"));
        must(run(dir_, "train-base --spec " + configs + "toy_small.json --data " + d +
                           "/data --epochs 2 --seed 2 --out " + d + "/small"));
        must(run(dir_, "cka --front-spec " + d + "/large --front-weights " + d + "/large --back-spec " + d +
                           "/small --back-weights " + d + "/small --data " + d +
                           "/data --batch-size 32 --repeats 2 --seed 5 --out " + d + "/cka"));
    }
    static void TearDownTestSuite() { fs::remove_all(dir_); }

    static std::string d() { return dir_.string(); }
    static fs::path dir_;
};

fs::path Cli::dir_;

}  // namespace

TEST_F(Cli, PlanStitchFinetuneEval) {
    const std::string plan_args = "plan --similarity " + d() + "/cka --front-spec " + d() + "/large/spec.json --back-spec " +
                                  d() + "/small/spec.json --budget 100000 --out " + d() + "/plan";
    ASSERT_EQ(run(dir_, plan_args).code, 0);
    const auto plan = load_plan(dir_ / "plan" / "plan.json");
    EXPECT_EQ(plan.front_model_id, "toy-large");
    EXPECT_LE(plan.accounting.total, 100000u);

    auto r = run(dir_, "stitch --plan " + d() + "/plan --front-weights " + d() + "/large --back-weights " + d() +
                           "/small --calib-data " + d() + "/data --out " + d() + "/stitched");
    ASSERT_EQ(r.code, 0) << r.err;
    const auto m = load_stitched(dir_ / "stitched");
    EXPECT_EQ(m.measured_params(), plan.accounting.total);

    // untrained hybrid evaluates fine
    r = run(dir_, "eval --model " + d() + "/stitched --data " + d() + "/data");
    ASSERT_EQ(r.code, 0) << r.err;
    const json untrained = json::parse(r.out);
    EXPECT_GE(untrained.at("accuracy").get<double>(), 0.0);

    r = run(dir_, "finetune --model " + d() + "/stitched --data " + d() + "/data --epochs 1 --out " + d() + "/ft");
    ASSERT_EQ(r.code, 0) << r.err;
    const auto tuned = load_stitched(dir_ / "ft" / "model");
    EXPECT_TRUE(tuned.front.weights.bit_equal(m.front.weights));
    EXPECT_TRUE(tuned.back.weights.bit_equal(m.back.weights));
    EXPECT_FALSE(tuned.adapter_weights.bit_equal(m.adapter_weights));

    r = run(dir_, "eval --model " + d() + "/ft --data " + d() + "/data");
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_TRUE(json::parse(r.out).contains("accuracy"));

    r = run(dir_, "report --runs " + d() + "/large " + d() + "/ft --out " + d() + "/report");
    ASSERT_EQ(r.code, 0) << r.err;
    const auto md = read_file_text(dir_ / "report" / "report.md");
    EXPECT_NE(md.find("| Front Model |"), std::string::npos) << md;
}

TEST_F(Cli, InfeasibleBudgetExitsFour) {
    const auto r = run(dir_, "plan --similarity " + d() + "/cka/similarity.json --front-spec " + d() +
                                 "/large --back-spec " + d() + "/small --budget 10 --out " + d() + "/never");
    EXPECT_EQ(r.code, 4);
    EXPECT_EQ(r.err.rfind("error: kind=infeasible min_cost=", 0), 0u) << r.err;
    EXPECT_FALSE(fs::exists(dir_ / "never"));
}

TEST_F(Cli, ErrorKindsMapToExitCodes) {
    auto r = run(dir_, "eval --model " + d() + "/nothing --data " + d() + "/data");
    EXPECT_EQ(r.code, 3) << r.err;
    EXPECT_NE(r.err.find("error: kind="), std::string::npos);
    r = run(dir_, "plan --similarity " + d() + "/cka --front-spec " + d() + "/large --back-spec " + d() +
                      "/small --budget 100 --metric bogus --out " + d() + "/bad");
    EXPECT_EQ(r.code, 2) << r.err;
    r = run(dir_, "gen-data");
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("kind=configuration"), std::string::npos) << r.err;
}

TEST_F(Cli, ManifestDigestsVerify) {
    const json m = json::parse(read_file_text(dir_ / "cka" / "run_manifest.json"));
    EXPECT_EQ(m.at("command").get<std::string>(), "cka");
    ASSERT_FALSE(m.at("outputs").empty());
    for (const auto& o : m.at("outputs"))
        EXPECT_EQ(file_digest(dir_ / "cka" / o.at("path").get<std::string>()), o.at("sha256").get<std::string>());
    EXPECT_FALSE(m.at("inputs").empty());
    EXPECT_TRUE(m.contains("config_digest"));
}

TEST_F(Cli, TapesReproduceLiveMatrix) {
    ASSERT_EQ(run(dir_, "capture --spec " + d() + "/large --weights " + d() + "/large --data " + d() +
                            "/data --batch-size 32 --repeats 2 --seed 5 --out " + d() + "/tl")
                  .code,
              0);
    ASSERT_EQ(run(dir_, "capture --spec " + d() + "/small --weights " + d() + "/small --data " + d() +
                            "/data --batch-size 32 --repeats 2 --seed 5 --out " + d() + "/ts")
                  .code,
              0);
    const auto r = run(dir_, "cka --front-tapes " + d() + "/tl --back-tapes " + d() + "/ts --out " + d() + "/cka2");
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(read_file_text(dir_ / "cka2" / "similarity.json"), read_file_text(dir_ / "cka" / "similarity.json"));
}

TEST_F(Cli, ConfigFileLosesToFlags) {
    const fs::path cfg = dir_ / "cfg.json";
    write_file_text(cfg, R"({"gen-data": {"classes": 4, "per-class": 5, "seed": 9}, "noise": 0.5})");
    auto r = run(dir_, "gen-data --config " + cfg.string() + " --classes 3 --out " + d() + "/cfgdata");
    ASSERT_EQ(r.code, 0) << r.err;
    const auto data = load_dataset(dir_ / "cfgdata");
    EXPECT_EQ(data.train.num_classes, 3u);
    EXPECT_EQ(data.train.size() + data.test.size(), 15u);
    EXPECT_EQ(data.train.seed, 9u);
    const json j = json::parse(read_file_text(dir_ / "cfgdata" / "data.json"));
    EXPECT_EQ(j.at("noise").get<double>(), 0.5);
}
