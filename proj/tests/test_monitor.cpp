#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "rcnf/monitor.hpp"
#include "rcnf/scene_sim.hpp"
#include "support.hpp"

using namespace rcnf;

namespace {

FlowConfig scene_config() {
  FlowConfig cfg;
  cfg.steps = 1;
  cfg.net.d_model = 16;
  cfg.net.heads = 2;
  cfg.net.mlp_hidden = 16;
  return cfg;
}

// Independent oracle for the escalation policy, written as a run-length rule.
std::vector<MonitorEvent> expected_events(const std::vector<int>& states, int persist_k) {
  std::vector<MonitorEvent> out;
  int run = 0;
  for (int s : states) {
    if (s) {
      ++run;
      out.push_back(run == 1 ? MonitorEvent::rollback_requested
                             : run == persist_k ? MonitorEvent::replan_requested : MonitorEvent::none);
    } else {
      out.push_back(run > 0 ? MonitorEvent::resume : MonitorEvent::none);
      run = 0;
    }
  }
  return out;
}

}  // namespace

TEST(Calibrate, WorkedExample) {
  std::vector<double> dev;
  for (int i = 0; i < 20; ++i) dev.push_back(0.1 * i);
  // ceil(0.95 * 21) = 20: the largest of the 20 deviations
  std::vector<double> shuffled = dev;
  std::shuffle(shuffled.begin(), shuffled.end(), std::mt19937_64(1));
  ThresholdProfile p;
  p.mu = -2.0;
  p.deviations = shuffled;
  p.alpha = 0.05;
  EXPECT_NEAR(p.recompute_upper(), -0.1, 1e-12);
}

TEST(Calibrate, IdenticalScores) {
  const std::vector<double> s(60, -3.25);
  const auto p = calibrate_scores(s, "task00", 0.05, 0);
  EXPECT_EQ(p.mu, -3.25);
  for (double d : p.deviations) EXPECT_EQ(d, 0.0);
  EXPECT_EQ(p.upper, -3.25);
}

TEST(Calibrate, SplitAndRecomputability) {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> g(1.0, 2.0);
  std::vector<double> s(101);
  for (auto& v : s) v = g(rng);
  const auto p = calibrate_scores(s, "task03", 0.1, 4);
  EXPECT_EQ(p.deviations.size(), 51u);
  EXPECT_NEAR(p.upper, p.recompute_upper(), 1e-12);
  // S1 and S2 partition the scores
  std::vector<double> s2;
  for (double d : p.deviations) s2.push_back(d + p.mu);
  double s1_sum = 0;
  for (double v : s) s1_sum += v;
  for (double v : s2) s1_sum -= v;
  EXPECT_NEAR(s1_sum / 50, p.mu, 1e-9);
  EXPECT_EQ(calibrate_scores(s, "task03", 0.1, 4).upper, p.upper);
}

TEST(Calibrate, AlphaMonotone) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> g;
  std::vector<double> s(400);
  for (auto& v : s) v = g(rng);
  double prev = std::numeric_limits<double>::infinity();
  for (double a : {0.01, 0.02, 0.05, 0.1, 0.2, 0.3, 0.5}) {
    const double u = calibrate_scores(s, "t", a, 7).upper;
    EXPECT_LE(u, prev) << "alpha " << a;
    prev = u;
  }
}

TEST(Calibrate, Errors) {
  const std::vector<double> few(39, 0.0);
  try {
    calibrate_scores(few, "t", 0.05, 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::insufficient_calibration_data);
  }
  EXPECT_NO_THROW(calibrate_scores(std::vector<double>(40, 0.0), "t", 0.05, 0));

  const auto ep = generate_episode("task01", AnomalyKind::gripper_slippage, 3, 48);
  const auto ws = windows_from_episode(ep, 12, 1);
  const auto cfg = scene_config();
  FlowModel m(cfg, optimize_codebook(10, 12, 5.0, 0), compute_norm_stats(ws));
  try {
    calibrate(m, ws, "task01", 0.05, 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::mixed_labels);
  }
}

TEST(Calibrate, ConformalFalsePositiveRate) {
  // exchangeable nominal scores: calibrate on 200, test on 1000, 200 resamples
  const double alpha = 0.05;
  const int n_cal = 200, n_test = 1000, reps = 200;
  std::mt19937_64 rng(2024);
  std::gamma_distribution<double> g(2.0, 1.5);  // skewed, like NLL tails
  double fpr_sum = 0;
  for (int r = 0; r < reps; ++r) {
    std::vector<double> cal(n_cal);
    for (auto& v : cal) v = g(rng);
    const auto p = calibrate_scores(cal, "t", alpha, static_cast<std::uint64_t>(r));
    int fp = 0;
    for (int i = 0; i < n_test; ++i) fp += judge_state(p, g(rng)) == MonitorState::anomalous;
    fpr_sum += static_cast<double>(fp) / n_test;
  }
  const double mean_fpr = fpr_sum / reps;
  EXPECT_LE(mean_fpr, alpha + 2.0 / std::sqrt(n_test));
  EXPECT_LE(mean_fpr, alpha + 0.03);
  // not vacuous either: the order statistic sits near the nominal level
  EXPECT_GE(mean_fpr, alpha - 0.03);
}

TEST(Calibrate, JsonRoundTrip) {
  ThresholdProfile p;
  p.task_id = "task02";
  p.mu = -1.0 / 3.0;
  p.deviations = {0.1, -0.7, 1e-17, 2.5};
  p.alpha = 0.2;
  p.upper = p.recompute_upper();
  const auto q = profile_from_json(nlohmann::json::parse(profile_to_json(p).dump()));
  EXPECT_EQ(q.mu, p.mu);
  EXPECT_EQ(q.deviations, p.deviations);
  EXPECT_EQ(q.upper, p.upper);
  EXPECT_THROW(profile_from_json(nlohmann::json{{"task_id", "x"}}), Error);
}

TEST(Judge, StrictBoundary) {
  ThresholdProfile p;
  p.upper = 1.5;
  EXPECT_EQ(judge_state(p, 1.5), MonitorState::normal);
  EXPECT_EQ(judge_state(p, 2.5), MonitorState::anomalous);
  EXPECT_EQ(judge_state(p, std::nextafter(1.5, 2.0)), MonitorState::anomalous);
}

TEST(Judge, AlternatingMatchesPointwise) {
  EventPolicy pol;
  for (int i = 0; i < 20; ++i) {
    const double score = (i % 2) ? 1.0 + 0.01 * i : 1.0 - 0.01 * i;
    EXPECT_EQ(pol.judge(1.0, score, i).state, score > 1.0 ? MonitorState::anomalous : MonitorState::normal);
  }
}

TEST(Policy, EnumeratedEightFrameSequences) {
  for (int k : {2, 3, 5, 8}) {
    for (int bits = 0; bits < 256; ++bits) {
      std::vector<int> states;
      for (int i = 0; i < 8; ++i) states.push_back((bits >> i) & 1);
      EventPolicy pol(PolicyConfig{k, 0.0});
      std::vector<MonitorEvent> got;
      for (int i = 0; i < 8; ++i) {
        const auto v = pol.judge(0.0, states[i] ? 1.0 : -1.0, i);
        EXPECT_EQ(v.state == MonitorState::anomalous, states[i] == 1);
        got.push_back(v.event);
      }
      ASSERT_EQ(got, expected_events(states, k)) << "k " << k << " bits " << bits;
    }
  }
}

TEST(Policy, PersistFiveWithSixAnomalousFrames) {
  EventPolicy pol;
  std::vector<MonitorEvent> events;
  for (int i = 0; i < 6; ++i)
    if (auto e = pol.judge(0.0, 3.0, i).event; e != MonitorEvent::none) events.push_back(e);
  EXPECT_EQ(events, (std::vector{MonitorEvent::rollback_requested, MonitorEvent::replan_requested}));
}

TEST(Policy, HysteresisDelaysResume) {
  EventPolicy pol(PolicyConfig{5, 0.5});
  pol.judge(0.0, 1.0, 0);
  EXPECT_EQ(pol.judge(0.0, -0.2, 1).state, MonitorState::anomalous);
  const auto v = pol.judge(0.0, -0.5, 2);
  EXPECT_EQ(v.state, MonitorState::normal);
  EXPECT_EQ(v.event, MonitorEvent::resume);
  EXPECT_THROW(EventPolicy(PolicyConfig{1, 0.0}), Error);
  EXPECT_THROW(EventPolicy(PolicyConfig{5, -1.0}), Error);
}

class StreamTest : public ::testing::Test {
 protected:
  void SetUp() override {
    ep_ = generate_episode("task04", AnomalyKind::none, 11, 40);
    const auto ws = windows_from_episode(ep_, 12, 1);
    model_ = std::make_unique<FlowModel>(scene_config(), optimize_codebook(10, 12, 5.0, 0), compute_norm_stats(ws));
    rcnf::testing::randomize(*model_, 5, 0.05);
  }
  Episode ep_;
  std::unique_ptr<FlowModel> model_;
};

TEST_F(StreamTest, MatchesOfflineWindows) {
  const auto ws = windows_from_episode(ep_, 12, 1);
  const auto offline = model_->anomaly_scores(ws);
  ThresholdProfile p;
  p.task_id = "task04";
  p.upper = offline[offline.size() / 2];
  const auto verdicts = run_monitor(*model_, p, ep_.frames);
  ASSERT_EQ(verdicts.size(), offline.size());
  for (std::size_t i = 0; i < verdicts.size(); ++i) {
    EXPECT_EQ(verdicts[i].frame, static_cast<int>(i) + 11);
    EXPECT_NEAR(verdicts[i].score, offline[i], 1e-9 * std::max(1.0, std::abs(offline[i])));
    EXPECT_EQ(verdicts[i].state, judge_state(p, verdicts[i].score));
    EXPECT_GE(verdicts[i].latency_ms, 0.0);
  }
}

TEST_F(StreamTest, NominalStreamEmitsNothing) {
  const auto offline = model_->anomaly_scores(windows_from_episode(ep_, 12, 1));
  ThresholdProfile p;
  p.task_id = "task04";
  p.upper = *std::max_element(offline.begin(), offline.end()) + 1.0;
  for (const auto& v : run_monitor(*model_, p, ep_.frames)) {
    EXPECT_EQ(v.state, MonitorState::normal);
    EXPECT_EQ(v.event, MonitorEvent::none);
  }
}

TEST_F(StreamTest, WarmUpAndMalformedFrames) {
  ThresholdProfile p;
  p.task_id = "task04";
  p.upper = 1e9;
  StreamMonitor mon(*model_, p);
  for (int i = 0; i < 11; ++i) EXPECT_FALSE(mon.push(ep_.frames[static_cast<std::size_t>(i)]).has_value());
  Frame bad = ep_.frames[11];
  bad.points.points[3][0] = std::nan("");
  const auto r = mon.push(bad);
  ASSERT_TRUE(r.has_value());
  EXPECT_EQ(r->event, MonitorEvent::frame_rejected);
  EXPECT_EQ(mon.buffered(), 11u);
  Frame short_frame = ep_.frames[11];
  short_frame.points.points.pop_back();
  EXPECT_EQ(mon.push(short_frame)->event, MonitorEvent::frame_rejected);
  const auto ok = mon.push(ep_.frames[11]);
  ASSERT_TRUE(ok.has_value());
  EXPECT_EQ(ok->event, MonitorEvent::none);
  EXPECT_EQ(mon.buffered(), 12u);
}

TEST_F(StreamTest, UnknownProfileTask) {
  ThresholdProfile p;
  p.task_id = "nope";
  EXPECT_THROW(StreamMonitor(*model_, p), Error);
}
