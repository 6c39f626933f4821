#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "rcnf/error.hpp"
#include "rcnf/scene_sim.hpp"

namespace rcnf {

/// One sliding window: x is (T, N, 2) and s is (T, J+1+7), both row-major.
struct Window {
  std::vector<double> x;
  std::vector<double> s;
  std::string task_id;
  Label label = Label::normal;
  std::string episode_id;
  int start_frame = 0;
  int frames = 0;
  int points = 0;
  int state_dim = 0;

  int end_frame() const { return start_frame + frames - 1; }
};

/// Windows of length T every `stride` frames. A window is anomalous when any
/// of its frames is at or after t_anomaly, which with monotone labels is the
/// label of its last frame.
inline std::vector<Window> windows_from_episode(const Episode& ep, int frames, int stride = 1) {
  require(frames >= 1 && stride >= 1, Errc::invalid_argument, "T and stride must be >= 1");
  require(ep.length() >= frames, Errc::episode_too_short,
          "episode '" + ep.episode_id + "' has " + std::to_string(ep.length()) + " frames, T = " +
              std::to_string(frames));
  const int n = static_cast<int>(ep.frames.front().points.points.size());
  const int sdim = static_cast<int>(ep.frames.front().robot.flat_size());
  std::vector<Window> out;
  for (int start = 0; start + frames <= ep.length(); start += stride) {
    Window w;
    w.task_id = ep.task_id;
    w.episode_id = ep.episode_id;
    w.start_frame = start;
    w.frames = frames;
    w.points = n;
    w.state_dim = sdim;
    w.x.reserve(static_cast<std::size_t>(frames) * n * 2);
    w.s.reserve(static_cast<std::size_t>(frames) * sdim);
    for (int t = start; t < start + frames; ++t) {
      const Frame& f = ep.frames[t];
      require(static_cast<int>(f.points.points.size()) == n, Errc::shape_mismatch, "ragged point frames");
      for (const auto& p : f.points.points) {
        w.x.push_back(p[0]);
        w.x.push_back(p[1]);
      }
      f.robot.append_to(w.s);
      if (f.label == Label::anomalous) w.label = Label::anomalous;
    }
    out.push_back(std::move(w));
  }
  return out;
}

/// Per-dimension affine standardization of the robot state.
struct NormStats {
  std::vector<double> mean;
  std::vector<double> std;

  bool empty() const { return mean.empty(); }

  static NormStats identity(int dim) { return {std::vector<double>(dim, 0.0), std::vector<double>(dim, 1.0)}; }

  void apply(std::span<double> s) const {
    const std::size_t d = mean.size();
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = (s[i] - mean[i % d]) / std[i % d];
  }
};

inline NormStats compute_norm_stats(const std::vector<Window>& windows) {
  require(!windows.empty(), Errc::invalid_argument, "no windows for normalization statistics");
  const int d = windows.front().state_dim;
  std::vector<double> sum(d, 0.0), sq(d, 0.0);
  double count = 0;
  for (const auto& w : windows) {
    for (std::size_t i = 0; i < w.s.size(); ++i) {
      sum[i % d] += w.s[i];
      sq[i % d] += w.s[i] * w.s[i];
    }
    count += w.frames;
  }
  NormStats ns{std::vector<double>(d), std::vector<double>(d)};
  for (int i = 0; i < d; ++i) {
    ns.mean[i] = sum[i] / count;
    const double var = std::max(0.0, sq[i] / count - ns.mean[i] * ns.mean[i]);
    ns.std[i] = std::max(std::sqrt(var), 1e-6);
  }
  return ns;
}

/// Debiasing weights: scores go into `bins` equal-width bins over
/// [min, max]; window i gets 1 / (bins * |bin(i)|), then everything is
/// renormalized so empty bins simply drop out.
inline std::vector<double> compute_balanced_weights(std::span<const double> scores, int bins) {
  require(!scores.empty(), Errc::invalid_argument, "no scores to balance");
  require(bins >= 1, Errc::invalid_argument, "bins must be >= 1");
  const auto [lo_it, hi_it] = std::minmax_element(scores.begin(), scores.end());
  const double lo = *lo_it, hi = *hi_it;
  std::vector<int> bin(scores.size(), 0);
  if (hi > lo) {
    for (std::size_t i = 0; i < scores.size(); ++i)
      bin[i] = std::min(bins - 1, static_cast<int>((scores[i] - lo) / (hi - lo) * bins));
  }
  std::vector<int> counts(bins, 0);
  for (int b : bin) ++counts[b];
  std::vector<double> w(scores.size());
  double total = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    w[i] = 1.0 / (static_cast<double>(bins) * counts[bin[i]]);
    total += w[i];
  }
  for (double& v : w) v /= total;
  return w;
}

/// i.i.d. draws with replacement from the categorical distribution `weights`.
inline std::vector<std::size_t> weighted_sample(std::span<const double> weights, std::size_t count,
                                                std::uint64_t seed) {
  require(count >= 1, Errc::invalid_argument, "count must be >= 1");
  std::mt19937_64 rng(seed);
  std::discrete_distribution<std::size_t> dist(weights.begin(), weights.end());
  std::vector<std::size_t> out(count);
  for (auto& i : out) i = dist(rng);
  return out;
}

// ---------------------------------------------------------------------------
// Persistence

inline nlohmann::json frame_to_json(const Frame& f) {
  nlohmann::json pts = nlohmann::json::array();
  for (const auto& p : f.points.points) pts.push_back({p[0], p[1]});
  return {{"joints", f.robot.joints},
          {"gripper", f.robot.gripper},
          {"pose", f.robot.pose},
          {"points", pts},
          {"label", to_string(f.label)}};
}

inline Frame frame_from_json(const nlohmann::json& j) {
  Frame f;
  f.robot.joints = j.at("joints").get<std::vector<double>>();
  f.robot.gripper = j.at("gripper").get<double>();
  const auto pose = j.at("pose").get<std::vector<double>>();
  require(pose.size() == 7, Errc::shape_mismatch, "pose must have 7 entries");
  std::copy(pose.begin(), pose.end(), f.robot.pose.begin());
  for (const auto& p : j.at("points")) {
    require(p.size() == 2, Errc::shape_mismatch, "points must be pairs");
    f.points.points.push_back({p[0].get<double>(), p[1].get<double>()});
  }
  if (j.contains("label")) f.label = label_from_string(j.at("label").get<std::string>());
  return f;
}

inline nlohmann::json episode_to_json(const Episode& ep) {
  nlohmann::json frames = nlohmann::json::array();
  for (const auto& f : ep.frames) frames.push_back(frame_to_json(f));
  return {{"episode_id", ep.episode_id},
          {"task_id", ep.task_id},
          {"anomaly_kind", to_string(ep.anomaly_kind)},
          {"t_anomaly", ep.t_anomaly ? nlohmann::json(*ep.t_anomaly) : nlohmann::json(nullptr)},
          {"frames", frames}};
}

inline Episode episode_from_json(const nlohmann::json& j) {
  try {
    Episode ep;
    ep.episode_id = j.at("episode_id").get<std::string>();
    ep.task_id = j.at("task_id").get<std::string>();
    ep.anomaly_kind = anomaly_kind_from_string(j.at("anomaly_kind").get<std::string>());
    if (!j.at("t_anomaly").is_null()) ep.t_anomaly = j.at("t_anomaly").get<int>();
    for (const auto& f : j.at("frames")) ep.frames.push_back(frame_from_json(f));
    return ep;
  } catch (const nlohmann::json::exception& ex) {
    throw Error(Errc::parse_error, std::string("episode: ") + ex.what());
  }
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), Errc::io_error, "cannot read " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& ex) {
    throw Error(Errc::parse_error, path.string() + ": " + ex.what());
  }
}

/// Writes through a temporary file so a failed write never leaves a partial artifact.
inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    require(static_cast<bool>(out), Errc::io_error, "cannot write " + tmp.string());
    out << text;
    require(static_cast<bool>(out), Errc::io_error, "write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline void save_episode(const Episode& ep, const std::filesystem::path& path) {
  write_text_file(path, episode_to_json(ep).dump() + "\n");
}

inline Episode load_episode(const std::filesystem::path& path) { return episode_from_json(read_json_file(path)); }

struct Manifest {
  int frames = 12;  // T
  int points = 32;  // N
  int joints = 7;   // J
  int episode_length = 48;
  int image_size = 128;
  std::vector<std::string> tasks;
  NormStats norm_stats;
  std::vector<std::string> episodes;  // file names relative to the manifest
};

inline nlohmann::json manifest_to_json(const Manifest& m) {
  nlohmann::json j{{"T", m.frames},
                   {"N", m.points},
                   {"J", m.joints},
                   {"episode_length", m.episode_length},
                   {"image_size", m.image_size},
                   {"tasks", m.tasks},
                   {"episodes", m.episodes}};
  j["norm_stats"] = m.norm_stats.empty() ? nlohmann::json(nullptr)
                                         : nlohmann::json{{"mean", m.norm_stats.mean}, {"std", m.norm_stats.std}};
  return j;
}

inline Manifest manifest_from_json(const nlohmann::json& j) {
  try {
    Manifest m;
    m.frames = j.at("T").get<int>();
    m.points = j.at("N").get<int>();
    m.joints = j.at("J").get<int>();
    m.episode_length = j.value("episode_length", 48);
    m.image_size = j.value("image_size", 128);
    m.tasks = j.at("tasks").get<std::vector<std::string>>();
    m.episodes = j.at("episodes").get<std::vector<std::string>>();
    if (j.contains("norm_stats") && !j.at("norm_stats").is_null()) {
      m.norm_stats.mean = j.at("norm_stats").at("mean").get<std::vector<double>>();
      m.norm_stats.std = j.at("norm_stats").at("std").get<std::vector<double>>();
    }
    return m;
  } catch (const nlohmann::json::exception& ex) {
    throw Error(Errc::parse_error, std::string("manifest: ") + ex.what());
  }
}

/// Loads every episode listed in `<dir>/manifest.json`.
inline std::vector<Episode> load_dataset(const std::filesystem::path& dir, Manifest* manifest_out = nullptr) {
  const Manifest m = manifest_from_json(read_json_file(dir / "manifest.json"));
  std::vector<Episode> eps;
  eps.reserve(m.episodes.size());
  for (const auto& name : m.episodes) eps.push_back(load_episode(dir / name));
  if (manifest_out) *manifest_out = m;
  return eps;
}

}  // namespace rcnf
