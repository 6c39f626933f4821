#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <deque>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "rcnf/dataset.hpp"
#include "rcnf/error.hpp"
#include "rcnf/flow.hpp"
#include "rcnf/seed.hpp"

namespace rcnf {

struct ThresholdProfile {
  std::string task_id;
  double mu = 0.0;                  // mean score over S1
  std::vector<double> deviations;   // score - mu over S2
  double alpha = 0.05;
  double upper = 0.0;

  /// The ceil((1 - alpha)(n + 1))-th smallest deviation.
  static double conformal_quantile(std::vector<double> deviations, double alpha) {
    require(!deviations.empty(), Errc::insufficient_calibration_data, "no deviations");
    require(alpha > 0 && alpha < 1, Errc::invalid_argument, "alpha must be in (0, 1)");
    const double n = static_cast<double>(deviations.size());
    const double pos = (1.0 - alpha) * (n + 1.0);
    const auto k = static_cast<std::size_t>(std::ceil(pos - 1e-9));
    require(k <= deviations.size(), Errc::insufficient_calibration_data,
            "too few calibration windows for alpha = " + std::to_string(alpha));
    std::sort(deviations.begin(), deviations.end());
    return deviations[std::max<std::size_t>(k, 1) - 1];
  }

  double recompute_upper() const { return mu + conformal_quantile(deviations, alpha); }
};

inline nlohmann::json profile_to_json(const ThresholdProfile& p) {
  return {{"task_id", p.task_id}, {"mu", p.mu}, {"deviations", p.deviations}, {"alpha", p.alpha}, {"upper", p.upper}};
}

inline ThresholdProfile profile_from_json(const nlohmann::json& j) {
  try {
    ThresholdProfile p;
    p.task_id = j.at("task_id").get<std::string>();
    p.mu = j.at("mu").get<double>();
    p.deviations = j.at("deviations").get<std::vector<double>>();
    p.alpha = j.at("alpha").get<double>();
    p.upper = j.at("upper").get<double>();
    return p;
  } catch (const nlohmann::json::exception& ex) {
    throw Error(Errc::parse_error, std::string("threshold profile: ") + ex.what());
  }
}

inline std::size_t min_calibration_windows(double alpha) {
  return 2 * static_cast<std::size_t>(std::ceil(1.0 / alpha - 1e-9));
}

/// Conformal threshold from nominal scores: seeded 50/50 split into S1 (mean)
/// and S2 (deviations from that mean).
inline ThresholdProfile calibrate_scores(std::span<const double> scores, const std::string& task_id, double alpha,
                                         std::uint64_t split_seed) {
  require(alpha > 0 && alpha < 1, Errc::invalid_argument, "alpha must be in (0, 1)");
  require(scores.size() >= min_calibration_windows(alpha), Errc::insufficient_calibration_data,
          "task '" + task_id + "' has " + std::to_string(scores.size()) + " calibration windows, need " +
              std::to_string(min_calibration_windows(alpha)));
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(derive_seed(split_seed, "calibrate/" + task_id));
  std::shuffle(idx.begin(), idx.end(), rng);
  const std::size_t n1 = scores.size() / 2;
  ThresholdProfile p;
  p.task_id = task_id;
  p.alpha = alpha;
  double sum = 0;
  for (std::size_t i = 0; i < n1; ++i) sum += scores[idx[i]];
  p.mu = sum / static_cast<double>(n1);
  for (std::size_t i = n1; i < idx.size(); ++i) p.deviations.push_back(scores[idx[i]] - p.mu);
  p.upper = p.recompute_upper();
  return p;
}

/// Scores the task's windows with the model and calibrates on them.
inline ThresholdProfile calibrate(const FlowModel& model, const std::vector<Window>& windows, const std::string& task_id,
                                  double alpha, std::uint64_t split_seed) {
  std::vector<const Window*> mine;
  for (const auto& w : windows) {
    if (w.task_id != task_id) continue;
    require(w.label == Label::normal, Errc::mixed_labels, "calibration windows must all be normal");
    mine.push_back(&w);
  }
  const auto scores = model.anomaly_scores(mine);
  return calibrate_scores(scores, task_id, alpha, split_seed);
}

// ---------------------------------------------------------------------------
// Verdicts and events

enum class MonitorState { normal, anomalous };
enum class MonitorEvent { none, rollback_requested, replan_requested, resume, frame_rejected };

inline std::string_view to_string(MonitorState s) { return s == MonitorState::normal ? "normal" : "anomalous"; }

inline std::string_view to_string(MonitorEvent e) {
  switch (e) {
    case MonitorEvent::none: return "none";
    case MonitorEvent::rollback_requested: return "rollback_requested";
    case MonitorEvent::replan_requested: return "replan_requested";
    case MonitorEvent::resume: return "resume";
    case MonitorEvent::frame_rejected: return "frame_rejected";
  }
  return "none";
}

struct Verdict {
  int frame = 0;
  double score = std::numeric_limits<double>::quiet_NaN();
  double upper = 0.0;
  MonitorState state = MonitorState::normal;
  MonitorEvent event = MonitorEvent::none;
  double latency_ms = 0.0;
};

inline nlohmann::json verdict_to_json(const Verdict& v) {
  return {{"frame", v.frame},
          {"score", std::isfinite(v.score) ? nlohmann::json(v.score) : nlohmann::json(nullptr)},
          {"upper", v.upper},
          {"state", to_string(v.state)},
          {"event", to_string(v.event)},
          {"latency_ms", v.latency_ms}};
}

struct PolicyConfig {
  int persist_k = 5;
  double hysteresis = 0.0;  // resume only once score <= upper - hysteresis

  void validate() const {
    require(persist_k >= 2, Errc::invalid_argument, "persist_k must be >= 2");
    require(hysteresis >= 0, Errc::invalid_argument, "hysteresis must be >= 0");
  }
};

/// Escalation automaton: entering the anomalous state requests a rollback,
/// the persist_k-th consecutive anomalous frame requests a replan, and
/// dropping back to the threshold resumes.
class EventPolicy {
 public:
  explicit EventPolicy(PolicyConfig cfg = {}) : cfg_(cfg) { cfg.validate(); }

  MonitorState state() const { return state_; }
  int consecutive() const { return consecutive_; }

  Verdict judge(double upper, double score, int frame) {
    Verdict v;
    v.frame = frame;
    v.score = score;
    v.upper = upper;
    if (state_ == MonitorState::normal) {
      if (score > upper) {
        state_ = MonitorState::anomalous;
        consecutive_ = 1;
        v.event = MonitorEvent::rollback_requested;
      }
    } else if (score > upper) {
      ++consecutive_;
      if (consecutive_ == cfg_.persist_k) v.event = MonitorEvent::replan_requested;
    } else if (score <= upper - cfg_.hysteresis) {
      state_ = MonitorState::normal;
      consecutive_ = 0;
      v.event = MonitorEvent::resume;
    }
    v.state = state_;
    return v;
  }

 private:
  PolicyConfig cfg_;
  MonitorState state_ = MonitorState::normal;
  int consecutive_ = 0;
};

/// Pointwise judgement without memory: anomalous iff score > upper.
inline MonitorState judge_state(const ThresholdProfile& p, double score) {
  return score > p.upper ? MonitorState::anomalous : MonitorState::normal;
}

/// Streaming monitor over a ring buffer of the last T frames.
class StreamMonitor {
 public:
  StreamMonitor(const FlowModel& model, ThresholdProfile profile, PolicyConfig policy = {})
      : model_(model), profile_(std::move(profile)), policy_(policy) {
    require(model.codebook().contains(profile_.task_id), Errc::unknown_task,
            "profile task '" + profile_.task_id + "' is not in the codebook");
  }

  const ThresholdProfile& profile() const { return profile_; }
  std::size_t buffered() const { return buffer_.size(); }

  bool well_formed(const Frame& f) const {
    const auto& cfg = model_.config();
    if (static_cast<int>(f.points.points.size()) != cfg.points) return false;
    if (static_cast<int>(f.robot.flat_size()) != cfg.state_dim) return false;
    for (const auto& p : f.points.points)
      if (!std::isfinite(p[0]) || !std::isfinite(p[1])) return false;
    std::vector<double> s;
    f.robot.append_to(s);
    return std::all_of(s.begin(), s.end(), [](double v) { return std::isfinite(v); });
  }

  /// Returns a verdict once T frames are buffered; rejected frames always
  /// produce a frame_rejected verdict and leave the buffer untouched.
  std::optional<Verdict> push(const Frame& f) {
    const int index = next_index_++;
    if (!well_formed(f)) {
      Verdict v;
      v.frame = index;
      v.upper = profile_.upper;
      v.state = policy_.state();
      v.event = MonitorEvent::frame_rejected;
      return v;
    }
    const auto t0 = std::chrono::steady_clock::now();
    buffer_.push_back(f);
    if (static_cast<int>(buffer_.size()) > model_.config().frames) buffer_.pop_front();
    if (static_cast<int>(buffer_.size()) < model_.config().frames) return std::nullopt;
    const double score = model_.anomaly_score(current_window());
    Verdict v = policy_.judge(profile_.upper, score, index);
    v.latency_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return v;
  }

  Window current_window() const {
    const auto& cfg = model_.config();
    Window w;
    w.task_id = profile_.task_id;
    w.frames = cfg.frames;
    w.points = cfg.points;
    w.state_dim = cfg.state_dim;
    for (const auto& f : buffer_) {
      for (const auto& p : f.points.points) {
        w.x.push_back(p[0]);
        w.x.push_back(p[1]);
      }
      f.robot.append_to(w.s);
    }
    return w;
  }

 private:
  const FlowModel& model_;
  ThresholdProfile profile_;
  EventPolicy policy_;
  std::deque<Frame> buffer_;
  int next_index_ = 0;
};

inline std::vector<Verdict> run_monitor(const FlowModel& model, const ThresholdProfile& profile,
                                        const std::vector<Frame>& frames, const PolicyConfig& policy = {}) {
  StreamMonitor mon(model, profile, policy);
  std::vector<Verdict> out;
  for (const auto& f : frames)
    if (auto v = mon.push(f)) out.push_back(*v);
  return out;
}

}  // namespace rcnf
