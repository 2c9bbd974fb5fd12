#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include "throttlenet.h"

namespace fs = std::filesystem;

namespace {

const fs::path& workdir() {
  static const fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / ("throttle_cli_" + std::to_string(::getpid()));
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

fs::path write_config(const std::string& name, const std::string& extra = "") {
  const fs::path p = workdir() / name;
  std::ofstream(p) << "[run]\nseed = 5\n[model]\nname = t-mlp\ncomponents = 4\nwidths = [16, 16]\nhead_width = 16\n"
                      "[data]\nkind = blobs\nclasses = 4\nsize = 8\ntrain_count = 160\ntest_count = 80\n"
                      "[train]\nepochs = 2\nbatch_size = 16\nt0 = 2\n[controller]\nepochs = 2\nbatch_size = 16\n"
                      "[sweep]\npoints = 5\n"
                   << extra;
  return p;
}

struct CliRun {
  int code = -1;
  std::string out;
  std::string err;
};

CliRun cli(const std::string& args) {
  static int counter = 0;
  const fs::path out = workdir() / ("stdout" + std::to_string(counter));
  const fs::path err = workdir() / ("stderr" + std::to_string(counter++));
  const std::string cmd = std::string(THROTTLENET_CLI) + " " + args + " >" + out.string() + " 2>" + err.string();
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
}

std::size_t lines(const std::string& s) {
  std::size_t n = 0;
  for (char c : s) n += c == '\n';
  return n;
}

}  // namespace

TEST(Cli, FullPipelineProducesArtifacts) {
  const fs::path cfg = write_config("pipeline.toml");
  const fs::path out = workdir() / "pipeline";
  const std::string common = "--config " + cfg.string() + " --out " + out.string();
  ASSERT_EQ(cli("train-datapath " + common).code, 0);
  EXPECT_TRUE(fs::exists(out / "datapath.ckpt"));
  EXPECT_TRUE(fs::exists(out / "train-datapath.config.toml"));
  // 160 examples / 16 per batch * 2 epochs
  EXPECT_EQ(lines(slurp(out / "metrics_datapath.jsonl")), 20u);

  const std::string before = slurp(out / "datapath.ckpt");
  ASSERT_EQ(cli("train-controller " + common).code, 0);
  EXPECT_EQ(slurp(out / "datapath.ckpt"), before);
  EXPECT_TRUE(fs::exists(out / "controller.ckpt"));
  EXPECT_EQ(lines(slurp(out / "metrics_controller.jsonl")), 20u);

  const CliRun nested = cli("sweep " + common + " --strategy nested");
  ASSERT_EQ(nested.code, 0);
  EXPECT_NE(nested.out.find("points 5"), std::string::npos);
  EXPECT_EQ(lines(slurp(out / "curve.csv")), 6u);

  const CliRun learned = cli("sweep " + common + " --strategy learned --controller " + (out / "controller.ckpt").string() +
                          " --csv " + (out / "learned.csv").string());
  ASSERT_EQ(learned.code, 0);
  EXPECT_TRUE(fs::exists(out / "learned.csv"));
  EXPECT_TRUE(fs::exists(out / "profile.csv"));
}

TEST(Cli, EpochOverrideChangesMetricLog) {
  const fs::path cfg = write_config("override.toml");
  const fs::path out = workdir() / "override";
  ASSERT_EQ(cli("train-datapath --config " + cfg.string() + " --out " + out.string() + " --set train.epochs=1").code, 0);
  const std::string log = slurp(out / "metrics_datapath.jsonl");
  EXPECT_EQ(lines(log), 10u);
  EXPECT_EQ(log.find("\"epoch\":1"), std::string::npos);
  EXPECT_NE(slurp(out / "train-datapath.config.toml").find("epochs = 1"), std::string::npos);
}

TEST(Cli, RerunsAreByteIdentical) {
  const fs::path cfg = write_config("repeat.toml");
  for (const char* dir : {"repeat_a", "repeat_b"}) {
    const std::string common = "--config " + cfg.string() + " --out " + (workdir() / dir).string();
    ASSERT_EQ(cli("train-datapath " + common).code, 0);
    ASSERT_EQ(cli("sweep " + common + " --strategy independent").code, 0);
  }
  for (const char* f : {"metrics_datapath.jsonl", "curve.csv", "datapath.ckpt"})
    EXPECT_EQ(slurp(workdir() / "repeat_a" / f), slurp(workdir() / "repeat_b" / f)) << f;
}

TEST(Cli, UsageErrorsExitTwo) {
  const fs::path cfg = write_config("usage.toml");
  const std::string base = "train-datapath --config " + cfg.string() + " --out " + (workdir() / "usage").string();
  EXPECT_EQ(cli(base + " --set train.nonsense=1").code, 2);
  EXPECT_EQ(cli(base + " --set noequals").code, 2);
  EXPECT_EQ(cli("train-datapath --bogus-flag").code, 2);
  EXPECT_EQ(cli("").code, 2);

  const CliRun bad_value = cli("train-datapath --config " + write_config("badvalue.toml", "[train]\nepochs = ten\n").string());
  EXPECT_EQ(bad_value.code, 2);
  EXPECT_NE(bad_value.err.find("badvalue.toml:"), std::string::npos);

  const CliRun idx = cli(base + " --set data.source=idx");
  EXPECT_EQ(idx.code, 2);
  EXPECT_NE(idx.err.find("data.train_images"), std::string::npos);

  EXPECT_EQ(cli(base + " --set controller.estimator=concrete --set controller.temperature=0").code, 2);
  EXPECT_EQ(cli("sweep --config " + cfg.string() + " --strategy learned").code, 2);
}

TEST(Cli, DivergenceExitsThree) {
  const fs::path cfg = write_config("diverge.toml");
  const CliRun r = cli("train-datapath --config " + cfg.string() + " --out " + (workdir() / "diverge").string() +
                    " --set train.lr=1e6");
  EXPECT_EQ(r.code, 3);
  EXPECT_FALSE(r.err.empty());
}

TEST(Cli, GradcheckListsEveryOpOnce) {
  const CliRun r = cli("gradcheck");
  ASSERT_EQ(r.code, 0);
  std::istringstream in(r.out);
  std::string line;
  std::getline(in, line);
  std::set<std::string> names;
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    std::istringstream row(line);
    std::string name, err, status;
    row >> name >> err >> status;
    EXPECT_EQ(status, "ok") << name;
    names.insert(name);
    ++rows;
  }
  EXPECT_EQ(rows, names.size());
  for (const char* op : {"matmul", "conv2d", "relu", "sigmoid", "concat", "binary_concrete", "softmax_cross_entropy"})
    EXPECT_EQ(names.count(op), 1u) << op;
}

TEST(Cli, CorruptedOpFailsGradcheck) {
  const CliRun r = cli("gradcheck --corrupt-op relu");
  EXPECT_EQ(r.code, 1);
  std::istringstream in(r.out);
  std::string line;
  bool flagged = false;
  while (std::getline(in, line))
    if (line.rfind("relu ", 0) == 0) flagged = line.find("FAIL") != std::string::npos;
  EXPECT_TRUE(flagged);
}

TEST(CApi, StatusesAndLastError) {
  tn_experiment* exp = nullptr;
  ASSERT_EQ(tn_experiment_create(nullptr, &exp), TN_OK);
  EXPECT_EQ(tn_experiment_set(exp, "train.epochs", "3"), TN_OK);
  EXPECT_EQ(tn_experiment_set(exp, "train.epochs", "-1"), TN_USAGE_ERROR);
  EXPECT_NE(std::string(tn_last_error()).find("train.epochs"), std::string::npos);
  const char* text = nullptr;
  ASSERT_EQ(tn_experiment_config(exp, &text), TN_OK);
  EXPECT_NE(std::string(text).find("epochs = 3"), std::string::npos);
  EXPECT_EQ(tn_experiment_set(exp, "nope.key", "1"), TN_USAGE_ERROR);
  tn_experiment_destroy(exp);
  EXPECT_EQ(tn_experiment_create((workdir() / "absent.toml").c_str(), &exp), TN_USAGE_ERROR);
  EXPECT_STREQ(tn_version(), "1.0.0");
}
