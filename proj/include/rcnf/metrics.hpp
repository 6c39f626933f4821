#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "rcnf/dataset.hpp"
#include "rcnf/error.hpp"
#include "rcnf/flow.hpp"
#include "rcnf/monitor.hpp"
#include "rcnf/scene_sim.hpp"

namespace rcnf {

struct ScoredFrame {
  double score = 0.0;
  int label = 0;  // 1 = anomalous
  std::string episode_id;
  int frame = 0;
};

/// Mann-Whitney AUC with ties counted one half, via midranks.
inline double auc(std::span<const double> scores, std::span<const int> labels) {
  require(scores.size() == labels.size(), Errc::shape_mismatch, "scores and labels differ in length");
  const std::size_t n = scores.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[idx[j]] == scores[idx[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k)
      if (labels[idx[k]]) {
        rank_sum += midrank;
        ++pos;
      }
    i = j;
  }
  const std::size_t neg = n - pos;
  require(pos > 0 && neg > 0, Errc::single_class, "AUC needs both classes");
  const double p = static_cast<double>(pos), q = static_cast<double>(neg);
  return (rank_sum - p * (p + 1) / 2) / (p * q);
}

/// Step-wise average precision over descending scores. Tied scores keep
/// input order; `tied` is set when that happened.
inline double average_precision(std::span<const double> scores, std::span<const int> labels, bool* tied = nullptr) {
  require(scores.size() == labels.size(), Errc::shape_mismatch, "scores and labels differ in length");
  const std::size_t n = scores.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  const auto positives = static_cast<std::size_t>(std::count_if(labels.begin(), labels.end(), [](int l) { return l != 0; }));
  require(positives > 0, Errc::no_positives, "average precision needs a positive");
  if (tied) {
    *tied = false;
    for (std::size_t i = 1; i < n; ++i)
      if (scores[idx[i]] == scores[idx[i - 1]]) *tied = true;
  }
  double ap = 0;
  std::size_t tp = 0;
  for (std::size_t r = 0; r < n; ++r) {
    if (!labels[idx[r]]) continue;
    ++tp;
    ap += static_cast<double>(tp) / static_cast<double>(r + 1);
  }
  return ap / static_cast<double>(positives);
}

inline double auc(std::span<const ScoredFrame> frames) {
  std::vector<double> s;
  std::vector<int> l;
  for (const auto& f : frames) {
    s.push_back(f.score);
    l.push_back(f.label);
  }
  return auc(s, l);
}

inline double average_precision(std::span<const ScoredFrame> frames, bool* tied = nullptr) {
  std::vector<double> s;
  std::vector<int> l;
  for (const auto& f : frames) {
    s.push_back(f.score);
    l.push_back(f.label);
  }
  return average_precision(s, l, tied);
}

// ---------------------------------------------------------------------------
// Benchmark

struct KindMetrics {
  std::optional<double> auc;
  std::optional<double> ap;
  int frames = 0;
  int positives = 0;
};

struct CurvePoint {
  int frame = 0;
  double score = 0.0;
  double upper = std::numeric_limits<double>::quiet_NaN();
  int label = 0;
};

struct EpisodeCurve {
  std::string episode_id;
  std::string task_id;
  AnomalyKind kind = AnomalyKind::none;
  std::vector<CurvePoint> points;
};

struct BenchReport {
  std::map<std::string, KindMetrics> per_kind;                             // keyed by anomaly kind
  std::map<std::string, std::map<std::string, KindMetrics>> per_task;      // task -> kind -> metrics
  std::optional<double> macro_auc, macro_ap;
  std::vector<std::string> missing_kinds;
  std::vector<std::string> warnings;
  std::vector<EpisodeCurve> curves;
};

namespace detail {

inline KindMetrics metrics_of(const std::vector<double>& s, const std::vector<int>& l, const std::string& what,
                              std::vector<std::string>& warnings) {
  KindMetrics m;
  m.frames = static_cast<int>(s.size());
  m.positives = static_cast<int>(std::count(l.begin(), l.end(), 1));
  if (m.positives > 0 && m.positives < m.frames) m.auc = auc(s, l);
  if (m.positives > 0) {
    bool tied = false;
    m.ap = average_precision(s, l, &tied);
    if (tied) warnings.push_back(what + ": tied scores ranked in input order for AP");
  }
  return m;
}

}  // namespace detail

/// Scores every frame of every episode with the window ending at it (the
/// first T-1 frames have no window and are skipped) and aggregates AUC/AP
/// per anomaly kind over the frames of that kind's episodes.
inline BenchReport evaluate_benchmark(const FlowModel& model, const std::vector<ThresholdProfile>& profiles,
                                      const std::vector<Episode>& episodes) {
  const int t = model.config().frames;
  std::map<std::string, double> upper;
  for (const auto& p : profiles) upper[p.task_id] = p.upper;

  BenchReport r;
  std::map<std::string, std::pair<std::vector<double>, std::vector<int>>> by_kind;
  std::map<std::string, std::map<std::string, std::pair<std::vector<double>, std::vector<int>>>> by_task;
  for (const auto& ep : episodes) {
    if (ep.length() < t) {
      r.warnings.push_back("episode '" + ep.episode_id + "' is shorter than T and was skipped");
      continue;
    }
    const auto windows = windows_from_episode(ep, t, 1);
    const auto scores = model.anomaly_scores(windows);
    EpisodeCurve curve;
    curve.episode_id = ep.episode_id;
    curve.task_id = ep.task_id;
    curve.kind = ep.anomaly_kind;
    const auto up = upper.find(ep.task_id);
    for (std::size_t i = 0; i < windows.size(); ++i) {
      CurvePoint cp;
      cp.frame = windows[i].end_frame();
      cp.score = scores[i];
      cp.label = ep.frames[static_cast<std::size_t>(cp.frame)].label == Label::anomalous ? 1 : 0;
      if (up != upper.end()) cp.upper = up->second;
      curve.points.push_back(cp);
      if (ep.anomaly_kind == AnomalyKind::none) continue;
      const std::string kind(to_string(ep.anomaly_kind));
      by_kind[kind].first.push_back(cp.score);
      by_kind[kind].second.push_back(cp.label);
      by_task[ep.task_id][kind].first.push_back(cp.score);
      by_task[ep.task_id][kind].second.push_back(cp.label);
    }
    r.curves.push_back(std::move(curve));
  }

  double auc_sum = 0, ap_sum = 0;
  int auc_n = 0, ap_n = 0;
  for (AnomalyKind k : kAnomalyKinds) {
    const std::string kind(to_string(k));
    const auto it = by_kind.find(kind);
    if (it == by_kind.end()) {
      r.missing_kinds.push_back(kind);
      continue;
    }
    const KindMetrics m = detail::metrics_of(it->second.first, it->second.second, kind, r.warnings);
    if (m.auc) {
      auc_sum += *m.auc;
      ++auc_n;
    }
    if (m.ap) {
      ap_sum += *m.ap;
      ++ap_n;
    }
    r.per_kind[kind] = m;
  }
  if (auc_n) r.macro_auc = auc_sum / auc_n;
  if (ap_n) r.macro_ap = ap_sum / ap_n;
  for (const auto& [task, kinds] : by_task)
    for (const auto& [kind, sl] : kinds)
      r.per_task[task][kind] = detail::metrics_of(sl.first, sl.second, task + "/" + kind, r.warnings);
  return r;
}

inline nlohmann::json kind_metrics_to_json(const KindMetrics& m) {
  return {{"auc", m.auc ? nlohmann::json(*m.auc) : nlohmann::json(nullptr)},
          {"ap", m.ap ? nlohmann::json(*m.ap) : nlohmann::json(nullptr)},
          {"frames", m.frames},
          {"positives", m.positives}};
}

inline nlohmann::json bench_report_to_json(const BenchReport& r) {
  nlohmann::json kinds = nlohmann::json::object(), tasks = nlohmann::json::object();
  for (const auto& [k, m] : r.per_kind) kinds[k] = kind_metrics_to_json(m);
  for (const auto& [t, ks] : r.per_task)
    for (const auto& [k, m] : ks) tasks[t][k] = kind_metrics_to_json(m);
  return {{"per_kind", kinds},
          {"per_task", tasks},
          {"macro_auc", r.macro_auc ? nlohmann::json(*r.macro_auc) : nlohmann::json(nullptr)},
          {"macro_ap", r.macro_ap ? nlohmann::json(*r.macro_ap) : nlohmann::json(nullptr)},
          {"missing_kinds", r.missing_kinds},
          {"warnings", r.warnings}};
}

inline std::string curves_to_csv(const std::vector<EpisodeCurve>& curves) {
  std::ostringstream out;
  out.precision(17);
  out << "episode_id,task_id,anomaly_kind,frame,score,upper,label\n";
  for (const auto& c : curves)
    for (const auto& p : c.points) {
      out << c.episode_id << ',' << c.task_id << ',' << to_string(c.kind) << ',' << p.frame << ',' << p.score << ',';
      if (std::isfinite(p.upper)) out << p.upper;
      out << ',' << p.label << '\n';
    }
  return out.str();
}

}  // namespace rcnf
