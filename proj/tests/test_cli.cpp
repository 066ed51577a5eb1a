/*
 * facedirs - Face reenactment by learned latent directions.
 *
 * File: tests/test_cli.cpp
 *
 * Copyright 2026 The facedirs authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 * http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#include "testkit.hpp"

#include "gtest/gtest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <sys/wait.h>

#ifndef FACEDIRS_CLI_PATH
#error "FACEDIRS_CLI_PATH must name the facedirs executable"
#endif

using namespace facedirs;
using namespace facedirs::testkit;
namespace fs = std::filesystem;

namespace {

const fs::path root = fs::temp_directory_path() / "facedirs_test_cli";

struct RunResult
{
    int code = -1;
    std::string out;
};

/// Runs the CLI with the given arguments; stdout and stderr are captured together.
RunResult cli(const std::string& args, const std::string& env = "FACEDIRS_MODEL_ROOT=")
{
    const fs::path log = root / "last_run.txt";
    const std::string cmd =
        "env " + env + " '" + std::string(FACEDIRS_CLI_PATH) + "' " + args + " > '" + log.string() + "' 2>&1";
    const int status = std::system(cmd.c_str());
    RunResult r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    std::ifstream is(log);
    r.out.assign(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
    return r;
}

std::string slurp(const fs::path& p)
{
    std::ifstream is(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

std::string q(const fs::path& p)
{
    return "'" + p.string() + "'";
}

/// Shared toy dataset and a briefly trained model, built once through the CLI.
class Cli : public ::testing::Test
{
protected:
    static fs::path data, model;

    static void SetUpTestSuite()
    {
        fs::remove_all(root);
        fs::create_directories(root);
        data = root / "data";
        model = root / "model";
        const fs::path cfg = root / "train.cfg";
        std::ofstream(cfg) << "encoder.steps = 20\nbatch_size = 2\n";
        ASSERT_EQ(cli("make-toy-data --out " + q(data) + " --videos 3 --frames 6").code, 0);
        auto r = cli("train --phase encoder --encoder-warm-start 100 --config " + q(cfg) + " --data " + q(data) +
                     " --model " + q(model));
        ASSERT_EQ(r.code, 0) << r.out;
        r = cli("train --phase synthetic --steps 30 --config " + q(cfg) + " --model " + q(model));
        ASSERT_EQ(r.code, 0) << r.out;
    }

    static fs::path frame(int video, int f)
    {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "video%04d/%04d.png", video, f);
        return data / buf;
    }
};

fs::path Cli::data;
fs::path Cli::model;

TEST_F(Cli, ExitCodes)
{
    const fs::path out = root / "codes.png";
    EXPECT_EQ(cli("invert --source " + q(frame(0, 0)) + " --out " + q(out)).code, 2) << "no model configured";
    EXPECT_EQ(cli("invert --model " + q(root / "nowhere") + " --source " + q(frame(0, 0)) + " --out " + q(out)).code,
              2);
    EXPECT_EQ(cli("edit --model " + q(model) + " --source " + q(frame(0, 0)) + " --out " + q(out) + " nose=2").code,
              2);
    EXPECT_EQ(cli("edit --model " + q(model) + " --source " + q(frame(0, 0)) + " --out " + q(out) + " yaw=abc").code,
              2);
    EXPECT_EQ(cli("reenact --model " + q(model) + " --source " + q(frame(0, 0)) + " --target " + q(frame(1, 0)) +
                  " --out " + q(out) + " --fsr on")
                  .code,
              2)
        << "fsr requested on a model without fsr components";
    EXPECT_EQ(cli("build-benchmark --data " + q(data) + " --kind M --out " + q(root / "b.txt")).code, 2);
    EXPECT_EQ(cli("analyze bogus --model " + q(model) + " --out " + q(root / "an")).code, 2);

    const fs::path garbage = root / "garbage.png";
    std::ofstream(garbage) << "not a png";
    EXPECT_EQ(cli("invert --model " + q(model) + " --source " + q(garbage) + " --out " + q(out)).code, 3);
}

TEST_F(Cli, ModelRootFromEnvironment)
{
    const fs::path out = root / "env_invert.png";
    const auto r = cli("invert --source " + q(frame(0, 1)) + " --out " + q(out), "FACEDIRS_MODEL_ROOT=" + q(model));
    EXPECT_EQ(r.code, 0) << r.out;
    EXPECT_TRUE(fs::exists(out));
}

TEST_F(Cli, ReenactDirectoryOfTargets)
{
    const fs::path targets = root / "targets";
    fs::create_directories(targets);
    for (int i = 0; i < 5; ++i)
        fs::copy_file(frame(1, i), targets / ("t" + std::to_string(i) + ".png"), fs::copy_options::overwrite_existing);
    const fs::path out = root / "reenacted";
    const auto r = cli("reenact --model " + q(model) + " --source " + q(frame(0, 0)) + " --target " + q(targets) +
                       " --out " + q(out));
    ASSERT_EQ(r.code, 0) << r.out;
    int count = 0;
    for (const auto& e : fs::directory_iterator(out))
    {
        EXPECT_TRUE(fs::exists(targets / e.path().filename())) << e.path();
        const ImageTensor img = read_png(e.path().string());
        EXPECT_EQ(img.width, 64);
        ++count;
    }
    EXPECT_EQ(count, 5);
}

TEST_F(Cli, OutputsAreByteIdenticalAcrossRuns)
{
    const fs::path a = root / "rerun_a.png", b = root / "rerun_b.png";
    for (const auto& p : {a, b})
    {
        const auto r = cli("reenact --model " + q(model) + " --source " + q(frame(0, 2)) + " --target " +
                           q(frame(2, 3)) + " --out " + q(p));
        ASSERT_EQ(r.code, 0) << r.out;
    }
    EXPECT_EQ(slurp(a), slurp(b));

    const fs::path ea = root / "edit_a.png", eb = root / "edit_b.png";
    for (const auto& p : {ea, eb})
        ASSERT_EQ(cli("edit --model " + q(model) + " --source " + q(frame(0, 2)) + " --out " + q(p) + " expr11=2").code,
                  0);
    EXPECT_EQ(slurp(ea), slurp(eb));
}

TEST_F(Cli, TrainingIsByteIdenticalAcrossRuns)
{
    std::string dirs[2], logs[2];
    for (int i = 0; i < 2; ++i)
    {
        const fs::path m = root / ("det" + std::to_string(i));
        fs::remove_all(m);
        fs::create_directories(m);
        fs::copy(model, m, fs::copy_options::recursive | fs::copy_options::overwrite_existing);
        const fs::path log = root / ("det" + std::to_string(i) + ".jsonl");
        const auto r = cli("train --phase synthetic --steps 5 --batch-size 2 --seed 11 --model " + q(m) + " --log " +
                           q(log));
        ASSERT_EQ(r.code, 0) << r.out;
        dirs[i] = slurp(m / "directions.fdir");
        logs[i] = slurp(log);
    }
    EXPECT_FALSE(dirs[0].empty());
    EXPECT_EQ(dirs[0], dirs[1]);
    EXPECT_FALSE(logs[0].empty());
    EXPECT_EQ(logs[0], logs[1]);
}

TEST_F(Cli, EmptyEditMatchesInversion)
{
    const fs::path inv = root / "inv.png", ed = root / "ed.png";
    ASSERT_EQ(cli("invert --model " + q(model) + " --source " + q(frame(2, 0)) + " --out " + q(inv)).code, 0);
    const auto r = cli("edit --model " + q(model) + " --source " + q(frame(2, 0)) + " --out " + q(ed));
    ASSERT_EQ(r.code, 0) << r.out;
    EXPECT_EQ(slurp(inv), slurp(ed));
    EXPECT_NE(r.out.find("delta_p (scaled): yaw=0.000000"), std::string::npos) << r.out;
}

TEST_F(Cli, EditReportsDeltaAndWarnsOutsideRange)
{
    const fs::path out = root / "edit_far.png";
    const auto r = cli("edit --model " + q(model) + " --source " + q(frame(0, 0)) + " --out " + q(out) + " yaw=7");
    EXPECT_EQ(r.code, 0) << r.out;
    EXPECT_NE(r.out.find("warning: yaw=7"), std::string::npos) << r.out;
    EXPECT_NE(r.out.find("delta_p"), std::string::npos);
}

TEST_F(Cli, FrontalizeWritesImage)
{
    const fs::path out = root / "front.png";
    const auto r = cli("frontalize --model " + q(model) + " --source " + q(frame(1, 1)) + " --out " + q(out));
    EXPECT_EQ(r.code, 0) << r.out;
    EXPECT_EQ(read_png(out.string()).width, 64);
}

// The edit command shifts by A·Δp; a +3 then −3 yaw edit must return the latent.
TEST(CliSemantics, YawEditRoundTripsLatent)
{
    const auto& A = ideal_directions();
    std::mt19937_64 rng(5);
    const LatentCode w = random_code(rng);
    Eigen::VectorXd d = Eigen::VectorXd::Zero(A.d_in());
    d(0) = 3.0;
    const LatentCode up = apply_shift(w, compute_shift(d, A), A);
    const LatentCode back = apply_shift(up, compute_shift(-d, A), A);
    EXPECT_GT((up.flat() - w.flat()).cwiseAbs().maxCoeff(), 1e-3);
    EXPECT_LE((back.flat() - w.flat()).cwiseAbs().maxCoeff(), 1e-6);
}

TEST_F(Cli, EvaluateReportParsesBack)
{
    const fs::path rep = root / "report.jsonl", csv = root / "report.csv";
    const auto r = cli("evaluate --model " + q(model) + " --data " + q(data) + " --pairs 6 --report " + q(rep) +
                       " --csv " + q(csv));
    ASSERT_EQ(r.code, 0) << r.out;
    std::ifstream is(rep);
    const auto agg = read_report_aggregate(is);
    ASSERT_EQ(agg.count("csim"), 1u);
    ASSERT_EQ(agg.count("ard"), 1u);

    // Means recomputed from the CSV rows match the aggregate record.
    std::ifstream cs(csv);
    std::string line;
    std::getline(cs, line);
    double csim = 0, ard = 0;
    int n = 0;
    while (std::getline(cs, line))
    {
        std::stringstream ss(line);
        std::string cell[7];
        for (auto& c : cell)
            std::getline(ss, c, ',');
        csim += std::stod(cell[2]);
        ard += std::stod(cell[3]);
        ++n;
    }
    ASSERT_EQ(n, 6);
    EXPECT_NEAR(csim / n, agg.at("csim"), 1e-12);
    EXPECT_NEAR(ard / n, agg.at("ard"), 1e-12);
}

TEST_F(Cli, BenchmarkBuildAndEvaluate)
{
    const fs::path bench = root / "bench_L.txt";
    const auto r = cli("build-benchmark --data " + q(data) + " --kind L --max-pairs 4 --out " + q(bench));
    if (r.code == 1)
    {
        // No pair qualified on this small dataset.
        EXPECT_NE(r.out.find("EMPTY"), std::string::npos) << r.out;
        return;
    }
    ASSERT_EQ(r.code, 0) << r.out;
    const fs::path rep = root / "bench_report.jsonl";
    const auto e =
        cli("evaluate --model " + q(model) + " --data " + q(data) + " --benchmark " + q(bench) + " --report " + q(rep));
    EXPECT_EQ(e.code, 0) << e.out;
    std::ifstream is(rep);
    EXPECT_NO_THROW(read_report_aggregate(is));
}

TEST_F(Cli, AnalyzeWritesReports)
{
    const fs::path out = root / "analysis";
    auto r = cli("analyze linearity --model " + q(model) + " --probes 5 --out " + q(out));
    ASSERT_EQ(r.code, 0) << r.out;
    const auto lin = nlohmann::json::parse(slurp(out / "linearity_report.json"));
    EXPECT_EQ(lin["attributes"].size(), 15u);
    EXPECT_TRUE(fs::exists(out / "linearity_yaw.png"));

    r = cli("analyze disentanglement --model " + q(model) + " --probes 2 --out " + q(out));
    ASSERT_EQ(r.code, 0) << r.out;
    const auto dis = nlohmann::json::parse(slurp(out / "disentanglement_report.json"));
    EXPECT_EQ(dis["attributes"].size(), 15u);
    EXPECT_TRUE(fs::exists(out / "disentanglement_leakage.png"));
}

TEST(CliBare, AnalyzeUntrainedModelFails)
{
    const fs::path m = root / "untrained";
    fs::remove_all(m);
    fs::create_directories(root);
    save_bundle(init_toy_bundle(7), m.string());
    EXPECT_EQ(cli("analyze linearity --model " + q(m) + " --out " + q(root / "an2")).code, 2);
}

} // namespace
