#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <array>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct RunResult {
  int code = -1;
  std::string out;
};

RunResult run(const std::string& args) {
  const std::string cmd = std::string(MW_TOOL_PATH) + " " + args + " 2>/dev/null";
  RunResult r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  std::array<char, 4096> buf{};
  std::size_t n = 0;
  while ((n = std::fread(buf.data(), 1, buf.size(), pipe)) > 0) r.out.append(buf.data(), n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& s) {
  std::ofstream(p, std::ios::binary) << s;
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(slurp(p));
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::string cell;
    std::stringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    rows.push_back(cells);
  }
  return rows;
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("mw_cli_" + std::to_string(::getpid()) + "_" +
            ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string at(const std::string& name) const { return (dir_ / name).string(); }

  // gen -> corrupt -> train -> measure -> pca -> constrained measure -> advdir, all under `sub`
  void pipeline(const std::string& sub) {
    fs::create_directories(dir_ / sub);
    const auto p = [&](const std::string& f) { return at(sub + "/" + f); };
    ASSERT_EQ(run("gen-data --classes 3 --dim 5 --samples-per-class 60 --test-samples-per-class 40 --seed 5 --out " +
                  p("train.csv") + " --test-out " + p("test.csv"))
                  .code,
              0);
    ASSERT_EQ(run("corrupt --in " + p("train.csv") + " --out " + p("noisy.csv") +
                  " --kind label --fraction 0.2 --seed 5 --report " + p("report.json"))
                  .code,
              0);
    ASSERT_EQ(run("train --data " + p("noisy.csv") + " --test-data " + p("test.csv") +
                  " --hidden 24 --epochs 30 --batch-size 16 --lr 0.05 --seed 5 --out " + p("model.json"))
                  .code,
              0);
    ASSERT_EQ(run("measure --model " + p("model.json") + " --data " + p("noisy.csv") + " --delta 1e-4 --out " +
                  p("margins.csv") + " --boundary-out " + p("boundary.csv"))
                  .code,
              0);
    ASSERT_EQ(run("pca --data " + p("noisy.csv") + " --model " + p("model.json") + " --out " + p("pca.json")).code, 0);
    ASSERT_EQ(run("measure --model " + p("model.json") + " --data " + p("noisy.csv") +
                  " --estimator constrained-deepfool --pca " + p("pca.json") + " --samples 50 --seed 3 --out " +
                  p("constrained.csv"))
                  .code,
              0);
    ASSERT_EQ(run("measure --model " + p("model.json") + " --data " + p("noisy.csv") +
                  " --estimator taylor --layer 1 --tv-normalize --out " + p("hidden.csv"))
                  .code,
              0);
    ASSERT_EQ(run("advdir --pca " + p("pca.json") + " --boundary-csv " + p("boundary.csv") + " --out " +
                  p("advdir.csv"))
                  .code,
              0);
  }

  std::string sweep_config(const std::string& out, const std::string& widths = "[4, 8, 16]") const {
    return R"({"seed": 3, "output_dir": ")" + out + R"(",
      "data": {"source": "blobs", "classes": 2, "dim": 6, "samples_per_class": 40,
               "test_samples_per_class": 40, "center_range": 1.0, "spread": 1.0},
      "conditions": ["clean", "label"],
      "corruption": {"label_fraction": 0.2},
      "model": {"widths": )" + widths + R"(, "depth": 1, "seeds": 1},
      "train": {"epochs": 60, "batch_size": 8, "learning_rate": 0.05},
      "margin": {"estimator": "deepfool", "delta": 1e-4}})";
  }

  fs::path dir_;
};

const char* kFourModels = R"([
  {"model_path": "a", "hyperparams": {"w": "8"}, "train_acc": 1.0, "test_acc": 0.70, "mean_margin": 0.1},
  {"model_path": "b", "hyperparams": {"w": "16"}, "train_acc": 1.0, "test_acc": 0.80, "mean_margin": 0.3},
  {"model_path": "c", "hyperparams": {"w": "32"}, "train_acc": 1.0, "test_acc": 0.75, "mean_margin": 0.2},
  {"model_path": "d", "hyperparams": {"w": "64"}, "train_acc": 1.0, "test_acc": 0.90, "mean_margin": 0.15}
])";

}  // namespace

TEST_F(Cli, EvaluateKendallPrintsOneLine) {
  spit(at("models.json"), kFourModels);
  const auto r = run("evaluate --metric kendall --measure-col mean_margin --models " + at("models.json"));
  ASSERT_EQ(r.code, 0);
  ASSERT_EQ(std::count(r.out.begin(), r.out.end(), '\n'), 1);
  // pairs (margin, acc): 6 unordered pairs, 4 concordant and 2 discordant
  EXPECT_NEAR(std::stod(r.out), 2.0 / 6.0, 1e-15);
}

TEST_F(Cli, EvaluateWritesTables) {
  spit(at("models.json"), kFourModels);
  ASSERT_EQ(run("evaluate --metric kendall --measure-col mean_margin --models " + at("models.json") + " --out " +
                at("score.json"))
                .code,
            0);
  const json doc = json::parse(slurp(at("score.json")));
  EXPECT_EQ(doc.at("meta").at("target"), "test_acc");
  EXPECT_EQ(doc.at("meta").at("negated"), false);
  ASSERT_EQ(run("evaluate --metric kendall --measure-col mean_margin --models " + at("models.json") + " --out " +
                at("score.csv"))
                .code,
            0);
  EXPECT_EQ(read_csv(at("score.csv")).front(), (std::vector<std::string>{"name", "value"}));
}

TEST_F(Cli, ConfigFileWithFlagOverride) {
  spit(at("models.json"), kFourModels);
  spit(at("cfg.json"), R"({"metric": "kendall", "measure-col": "missing_column", "models": ")" + at("models.json") +
                           R"("})");
  EXPECT_EQ(run("evaluate --config " + at("cfg.json")).code, 2);
  const auto r = run("evaluate --config " + at("cfg.json") + " --measure-col mean_margin");
  ASSERT_EQ(r.code, 0);
  EXPECT_NEAR(std::stod(r.out), 2.0 / 6.0, 1e-15);
}

TEST_F(Cli, ConfigErrorsExitTwo) {
  EXPECT_EQ(run("measure --model " + at("missing.json") + " --data " + at("missing.csv")).code, 2);
  EXPECT_EQ(run("evaluate --metric kendall --measure-col m --models " + at("missing.json")).code, 2);
  EXPECT_EQ(run("no-such-command").code, 2);
  EXPECT_EQ(run("").code, 2);
  spit(at("cfg.json"), R"({"metric": "kendall", "colour": "red"})");
  EXPECT_EQ(run("evaluate --config " + at("cfg.json")).code, 2);
  spit(at("models.json"), kFourModels);
  EXPECT_EQ(run("evaluate --metric spearman --measure-col mean_margin --models " + at("models.json")).code, 2);
  // one hyperparameter is not enough for CMI
  EXPECT_EQ(run("evaluate --metric cmi --measure-col mean_margin --models " + at("models.json")).code, 2);
}

TEST_F(Cli, DegenerateAdvdirExitsThree) {
  ASSERT_EQ(run("gen-data --dim 3 --samples-per-class 10 --out " + at("d.csv")).code, 0);
  ASSERT_EQ(run("pca --data " + at("d.csv") + " --components 3 --out " + at("pca.json")).code, 0);
  spit(at("boundary.csv"), "sample_id,x_0,x_1,x_2,xhat_0,xhat_1,xhat_2\n0,1,2,3,1,2,3\n");
  EXPECT_EQ(run("advdir --pca " + at("pca.json") + " --boundary-csv " + at("boundary.csv")).code, 3);
}

TEST_F(Cli, FullPipelineWithinBudget) {
  const auto t0 = std::chrono::steady_clock::now();
  pipeline("run");
  const auto margins = read_csv(at("run/margins.csv"));
  ASSERT_GT(margins.size(), 100u);
  EXPECT_EQ(margins.front(), (std::vector<std::string>{"sample_id", "i", "j", "d", "v", "steps", "status"}));
  json models = json::array();
  for (int k = 0; k < 4; ++k)
    models.push_back({{"model_path", at("run/model.json")},
                      {"hyperparams", {{"w", std::to_string(k)}}},
                      {"train_acc", 1.0},
                      {"test_acc", 0.5 + 0.1 * k},
                      {"mean_margin", std::stod(margins[1 + k][3])}});
  spit(at("run/models.json"), models.dump());
  const auto r = run("evaluate --metric kendall --measure-col mean_margin --models " + at("run/models.json"));
  EXPECT_EQ(r.code, 0);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  EXPECT_LT(seconds, 120.0);

  const auto adv = read_csv(at("run/advdir.csv"));
  ASSERT_EQ(adv.size(), 6u);
  EXPECT_NEAR(std::stod(adv.back()[3]), 1.0, 1e-12);
  const auto hidden = read_csv(at("run/hidden.csv"));
  EXPECT_GT(hidden.size(), 100u);
}

TEST_F(Cli, PipelineIsByteIdentical) {
  pipeline("a");
  pipeline("b");
  for (const char* f : {"train.csv", "test.csv", "noisy.csv", "report.json", "model.json", "margins.csv",
                        "boundary.csv", "pca.json", "constrained.csv", "hidden.csv", "advdir.csv"})
    EXPECT_EQ(slurp(at(std::string("a/") + f)), slurp(at(std::string("b/") + f))) << f;
}

TEST_F(Cli, SweepStructure) {
  spit(at("sweep.json"), sweep_config(at("out")));
  ASSERT_EQ(run("sweep --config " + at("sweep.json")).code, 0);
  const auto models = read_csv(at("out/models.csv"));
  EXPECT_EQ(models.size(), 7u);
  const auto cap = read_csv(at("out/capacity.csv"));
  ASSERT_EQ(cap.size(), 4u);
  EXPECT_EQ(cap[0], (std::vector<std::string>{"width", "clean:clean", "clean:label-corrupted",
                                              "corrupt:label-corrupted", "overall:label-corrupted"}));
  for (std::size_t r = 1; r < cap.size(); ++r) {
    ASSERT_EQ(cap[r].size(), 5u);
    for (const auto& cell : cap[r]) EXPECT_FALSE(cell.empty());
  }
  for (const char* f : {"margins.csv", "histogram.csv", "max_margin.csv", "summary.json"})
    EXPECT_TRUE(fs::exists(at(std::string("out/") + f))) << f;
  const json summary = json::parse(slurp(at("out/summary.json")));
  EXPECT_EQ(summary.at("models").size(), 6u);
}

TEST_F(Cli, SweepFlagsOverrideAndThreadsDoNotMatter) {
  spit(at("sweep.json"), sweep_config(at("ignored")));
  ASSERT_EQ(run("sweep --config " + at("sweep.json") + " --out " + at("one") + " --threads 1").code, 0);
  ASSERT_EQ(run("sweep --config " + at("sweep.json") + " --out " + at("four") + " --threads 4").code, 0);
  EXPECT_FALSE(fs::exists(at("ignored")));
  for (const char* f : {"models.csv", "capacity.csv", "margins.csv", "histogram.csv", "max_margin.csv",
                        "summary.json"})
    EXPECT_EQ(slurp(at(std::string("one/") + f)), slurp(at(std::string("four/") + f))) << f;
  ASSERT_EQ(run("sweep --config " + at("sweep.json") + " --out " + at("narrow") + " --widths 4").code, 0);
  EXPECT_EQ(read_csv(at("narrow/models.csv")).size(), 3u);
}

TEST_F(Cli, SweepConfigErrors) {
  spit(at("empty.json"), sweep_config(at("out"), "[]"));
  EXPECT_EQ(run("sweep --config " + at("empty.json")).code, 2);
  spit(at("zero.json"), sweep_config(at("out"), "[0, 8]"));
  EXPECT_EQ(run("sweep --config " + at("zero.json")).code, 2);
  spit(at("extra.json"), R"({"model": {"widths": [4], "depht": 2}})");
  EXPECT_EQ(run("sweep --config " + at("extra.json")).code, 2);
  EXPECT_FALSE(fs::exists(at("out")));
}
