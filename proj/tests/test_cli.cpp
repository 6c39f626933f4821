#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "rcnf/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

Run run(const std::string& args) {
  const std::string cmd = std::string(RCNF_CLI_PATH) + " " + args + " 2>/dev/null";
  Run r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) { return rcnf::read_text_file(p); }

int count_lines(const std::string& s, char lead = 0) {
  std::istringstream in(s);
  std::string line;
  int n = 0;
  while (std::getline(in, line))
    if (!line.empty() && (lead == 0 || line[0] == lead)) ++n;
  return n;
}

const std::string kSmallTrain =
    " --steps 1 --d-model 16 --heads 2 --mlp-hidden 16 --tasks 2 --epochs 2 --next-stage-epoch 2 --seed 3";

}  // namespace

// A two-task dataset and a tiny trained model shared by the pipeline tests.
class CliPipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = fs::temp_directory_path() / ("rcnf_cli_" + std::to_string(getpid()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    ok_ = run("gen-data --tasks 2 --episodes-per-task 4 --length 24 --seed 1 --out-dir " + p("nominal")).code == 0 &&
          run("gen-data --tasks 2 --episodes-per-task 1 --length 48 --anomaly all --seed 2 --out-dir " + p("bench"))
                  .code == 0 &&
          run("train --data " + p("nominal") + kSmallTrain + " --out " + p("m.json")).code == 0 &&
          run("calibrate --model " + p("m.json") + " --data " + p("nominal") + " --seed 3 --out " + p("prof.json"))
                  .code == 0;
  }
  static void TearDownTestSuite() { fs::remove_all(dir_); }
  void SetUp() override { ASSERT_TRUE(ok_) << "pipeline setup failed"; }

  static std::string p(const std::string& name) { return (dir_ / name).string(); }

  static inline fs::path dir_;
  static inline bool ok_ = false;
};

TEST(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run("--help").code, 0);
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("frobnicate").code, 2);
  EXPECT_EQ(run("train --epochs banana").code, 2);
  EXPECT_EQ(run("gen-data --anomaly meteor --out-dir x").code, 2);
  EXPECT_EQ(run("train --config /nonexistent/cfg.json").code, 2);
}

TEST(Cli, ValidationErrorsExitTwo) {
  EXPECT_EQ(run("calibrate --alpha 1.5 --print-config").code, 2);
  EXPECT_EQ(run("monitor --persist-k 1 --print-config").code, 2);
  EXPECT_EQ(run("train --frames 7 --print-config").code, 2);
  EXPECT_EQ(run("train --epochs 5 --print-config").code, 2);  // balanced stage would start after the end
  EXPECT_EQ(run("encode-tasks").code, 2);  // --out missing
}

TEST(Cli, ConfigPrecedence) {
  const auto defaults = json::parse(run("train --print-config").out);
  const auto dir = fs::temp_directory_path() / ("rcnf_cfg_" + std::to_string(getpid()));
  fs::create_directories(dir);
  const auto cfg = dir / "c.json";
  std::ofstream(cfg) << R"({"seed": 11, "train": {"epochs": 7, "next_stage_epoch": 3, "batch_size": 8},
                          "monitor": {"alpha": 0.1}})";

  const auto from_file = json::parse(run("train --print-config --config " + cfg.string()).out);
  EXPECT_EQ(from_file["seed"], 11);
  EXPECT_EQ(from_file["train"]["epochs"], 7);
  EXPECT_EQ(from_file["train"]["batch_size"], 8);
  EXPECT_EQ(from_file["train"]["learning_rate"], defaults["train"]["learning_rate"]);

  const auto flags = json::parse(run("train --print-config --epochs 9 --config " + cfg.string()).out);
  EXPECT_EQ(flags["train"]["epochs"], 9);
  EXPECT_EQ(flags["train"]["batch_size"], 8);

  // the resolved config is itself a valid config file
  const auto resolved = dir / "r.json";
  std::ofstream(resolved) << flags.dump();
  EXPECT_EQ(json::parse(run("train --print-config --config " + resolved.string()).out), flags);
  fs::remove_all(dir);
}

TEST(Cli, SeedFanOutIsRecorded) {
  const auto a = json::parse(run("train --print-config --seed 5").out);
  const auto b = json::parse(run("train --print-config --seed 6").out);
  EXPECT_EQ(a["seed"], 5);
  EXPECT_NE(a["flow"]["seed"], b["flow"]["seed"]);
  EXPECT_NE(a["train"]["seed"], a["flow"]["seed"]);
  EXPECT_EQ(a, json::parse(run("train --print-config --seed 5").out));
}

TEST(Cli, EncodeTasksIsReproducible) {
  const auto dir = fs::temp_directory_path() / ("rcnf_enc_" + std::to_string(getpid()));
  fs::create_directories(dir);
  const auto a = (dir / "a.json").string(), b = (dir / "b.json").string();
  ASSERT_EQ(run("encode-tasks --tasks 6 --dim 3 --seed 4 --out " + a).code, 0);
  ASSERT_EQ(run("encode-tasks --tasks 6 --dim 3 --seed 4 --out " + b).code, 0);
  EXPECT_EQ(slurp(a), slurp(b));
  const auto cb = rcnf::load_codebook(a);
  EXPECT_EQ(cb.size(), 6u);
  EXPECT_EQ(cb.dim(), 3);
  EXPECT_EQ(run("encode-tasks --tasks 6 --dim 3 --seed 4 --out " + a).code, 2);
  EXPECT_EQ(run("encode-tasks --tasks 6 --dim 3 --seed 4 --force --out " + a).code, 0);
  fs::remove_all(dir);
}

TEST_F(CliPipeline, DatasetLayout) {
  rcnf::Manifest m;
  const auto eps = rcnf::load_dataset(p("nominal"), &m);
  EXPECT_EQ(eps.size(), 8u);
  EXPECT_EQ(m.episode_length, 24);
  EXPECT_FALSE(m.norm_stats.empty());
  for (const auto& e : eps) EXPECT_EQ(e.anomaly_kind, rcnf::AnomalyKind::none);
  const auto bench = rcnf::load_dataset(p("bench"));
  EXPECT_EQ(bench.size(), 6u);  // 2 tasks x 3 anomaly kinds
  EXPECT_FALSE(fs::exists(p("nominal") + ".partial"));
}

TEST_F(CliPipeline, TrainReportAndRetrainDeterminism) {
  const auto report = rcnf::read_report_json(p("m.json") + ".report.json");
  EXPECT_EQ(report["command"], "train");
  EXPECT_EQ(report["report"]["epoch_nll"].size(), 2u);
  EXPECT_EQ(slurp(p("m.json") + ".report.json").rfind("# rcnf train utc=", 0), 0u);

  ASSERT_EQ(run("train --data " + p("nominal") + kSmallTrain + " --out " + p("m2.json")).code, 0);
  EXPECT_EQ(slurp(p("m.json")), slurp(p("m2.json")));
  auto a = rcnf::read_report_json(p("m.json") + ".report.json");
  auto b = rcnf::read_report_json(p("m2.json") + ".report.json");
  a.erase("checkpoint");  // the output path is the one intended difference
  b.erase("checkpoint");
  EXPECT_EQ(a, b);
}

TEST_F(CliPipeline, CalibrationProfiles) {
  const auto ps = rcnf::profiles_from_json(rcnf::read_report_json(p("prof.json")).at("profiles"));
  ASSERT_EQ(ps.size(), 2u);
  for (const auto& pr : ps) {
    EXPECT_EQ(pr.alpha, 0.05);
    // 4 episodes of 24 frames give 52 scores, 26 of them in the second split
    EXPECT_EQ(pr.deviations.size(), 26u);
    EXPECT_NEAR(pr.upper, pr.recompute_upper(), 1e-12);
  }
}

TEST_F(CliPipeline, ScoreCsv) {
  ASSERT_EQ(run("score --model " + p("m.json") + " --data " + p("nominal") + " --out " + p("s.csv")).code, 0);
  const auto csv = slurp(p("s.csv"));
  EXPECT_EQ(count_lines(csv, '#'), 2);
  EXPECT_NE(csv.find("episode_id,task_id,anomaly_kind,frame,score,label\n"), std::string::npos);
  EXPECT_EQ(count_lines(csv), 2 + 1 + 8 * 13);
}

TEST_F(CliPipeline, EvalReport) {
  const auto r = run("eval --model " + p("m.json") + " --data " + p("bench") + " --profiles " + p("prof.json") +
                     " --out " + p("eval.json") + " --curves " + p("curves.csv"));
  ASSERT_EQ(r.code, 0);
  const auto j = rcnf::read_report_json(p("eval.json"));
  EXPECT_EQ(j["report"]["per_kind"].size(), 3u);
  EXPECT_TRUE(j["report"].contains("macro_auc"));
  EXPECT_NE(r.out.find("macro"), std::string::npos);
  // 6 episodes of 48 frames, 37 scored frames each
  EXPECT_EQ(count_lines(slurp(p("curves.csv"))), 1 + 1 + 6 * 37);
}

TEST_F(CliPipeline, MonitorEpisodeAndJsonLines) {
  const auto manifest = rcnf::read_json_file(fs::path(p("nominal")) / "manifest.json");
  const fs::path ep_file = fs::path(p("nominal")) / manifest["episodes"][0].get<std::string>();
  const auto r = run("monitor --model " + p("m.json") + " --profiles " + p("prof.json") + " --input " +
                     ep_file.string());
  ASSERT_EQ(r.code, 0);
  EXPECT_EQ(count_lines(r.out, '#'), 2);
  EXPECT_EQ(count_lines(r.out, '{'), 13);

  // the same frames as JSON lines on stdin, with one malformed line
  const auto ep = rcnf::read_json_file(ep_file);
  const auto lines = fs::path(p("frames.jsonl"));
  {
    std::ofstream out(lines);
    for (std::size_t i = 0; i < ep["frames"].size(); ++i) {
      if (i == 15) out << "{not json\n";
      out << ep["frames"][i].dump() << "\n";
    }
  }
  const auto task = ep["task_id"].get<std::string>();
  const auto s = run("monitor --model " + p("m.json") + " --profiles " + p("prof.json") + " --task " + task + " < " +
                     lines.string());
  ASSERT_EQ(s.code, 0);
  EXPECT_EQ(count_lines(s.out, '{'), 14);
  EXPECT_NE(s.out.find("frame_rejected"), std::string::npos);

  EXPECT_EQ(run("monitor --model " + p("m.json") + " --profiles " + p("prof.json") + " --task task09 --input " +
                ep_file.string())
                .code,
            2);
}

TEST_F(CliPipeline, RuntimeErrorsExitThree) {
  EXPECT_EQ(run("score --model " + p("missing.json") + " --data " + p("nominal") + " --out " + p("x.csv")).code, 3);
  EXPECT_EQ(run("score --model " + p("m.json") + " --data " + p("nowhere") + " --out " + p("x.csv")).code, 3);
}

TEST_F(CliPipeline, RefusesOverwrite) {
  EXPECT_EQ(run("calibrate --model " + p("m.json") + " --data " + p("nominal") + " --out " + p("prof.json")).code, 2);
  EXPECT_EQ(run("gen-data --tasks 2 --episodes-per-task 1 --length 24 --out-dir " + p("nominal")).code, 2);
}
