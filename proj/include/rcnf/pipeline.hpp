#pragma once

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "rcnf/checkpoint.hpp"
#include "rcnf/dataset.hpp"
#include "rcnf/metrics.hpp"
#include "rcnf/monitor.hpp"
#include "rcnf/scene_sim.hpp"
#include "rcnf/seed.hpp"
#include "rcnf/task_codec.hpp"
#include "rcnf/trainer.hpp"

namespace rcnf {

// Workflow glue shared by the command-line tool, the demo and the acceptance
// run: one resolved configuration, dataset generation, calibration over all
// tasks, and report files whose only non-reproducible content (timestamps,
// wall-clock) sits on a leading '#' line.

struct DataConfig {
  int tasks = 10;
  int episodes_per_task = 50;
  int episode_length = 48;
  int image_size = 128;
  double radius = 5.0;  // codebook R
  MisalignmentTarget misalignment = MisalignmentTarget::sibling;

  void validate() const {
    require(tasks >= 1 && tasks <= static_cast<int>(default_task_set().size()), Errc::invalid_argument,
            "tasks must be in [1, " + std::to_string(default_task_set().size()) + "]");
    require(episodes_per_task >= 1, Errc::invalid_argument, "episodes_per_task must be >= 1");
    require(image_size >= 8, Errc::invalid_argument, "image_size must be >= 8");
    require(radius > 0, Errc::invalid_argument, "radius must be > 0");
  }
};

struct MonitorConfig {
  double alpha = 0.05;
  int persist_k = 5;
  double hysteresis = 0.0;

  PolicyConfig policy() const { return {persist_k, hysteresis}; }

  void validate() const {
    require(alpha > 0 && alpha < 1, Errc::invalid_argument, "alpha must be in (0, 1)");
    policy().validate();
  }
};

struct RunConfig {
  std::uint64_t seed = 0;
  int joints = 7;  // J; the flow's state_dim is J + 8 (gripper and 7-dof pose)
  FlowConfig flow;
  TrainConfig train;
  DataConfig data;
  MonitorConfig monitor;

  void validate() const {
    require(joints >= 1, Errc::invalid_dimensions, "J must be >= 1");
    require(flow.state_dim == joints + 8, Errc::invalid_dimensions, "state_dim must equal J + 8");
    require(data.episode_length >= 2 * flow.frames, Errc::invalid_argument, "episode_length must be >= 2T");
    flow.validate();
    train.validate();
    data.validate();
    monitor.validate();
  }

  SceneConfig scene() const {
    SceneConfig s;
    s.num_points = flow.points;
    s.num_joints = joints;
    s.image_size = data.image_size;
    s.misalignment = data.misalignment;
    return s;
  }
};

inline nlohmann::json train_config_to_json(const TrainConfig& t) {
  return {{"epochs", t.epochs},
          {"next_stage_epoch", t.next_stage_epoch},
          {"batch_size", t.batch_size},
          {"micro_batch", t.micro_batch},
          {"learning_rate", t.learning_rate},
          {"grad_clip", t.grad_clip},
          {"seed", t.seed},
          {"bins", t.bins},
          {"refresh_interval", t.refresh_interval},
          {"validation_fraction", t.validation_fraction},
          {"windows_per_epoch", t.windows_per_epoch},
          {"max_val_windows", t.max_val_windows},
          {"checkpoint_every", t.checkpoint_every}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig t = {}) {
  t.epochs = j.value("epochs", t.epochs);
  t.next_stage_epoch = j.value("next_stage_epoch", t.next_stage_epoch);
  t.batch_size = j.value("batch_size", t.batch_size);
  t.micro_batch = j.value("micro_batch", t.micro_batch);
  t.learning_rate = j.value("learning_rate", t.learning_rate);
  t.grad_clip = j.value("grad_clip", t.grad_clip);
  t.seed = j.value("seed", t.seed);
  t.bins = j.value("bins", t.bins);
  t.refresh_interval = j.value("refresh_interval", t.refresh_interval);
  t.validation_fraction = j.value("validation_fraction", t.validation_fraction);
  t.windows_per_epoch = j.value("windows_per_epoch", t.windows_per_epoch);
  t.max_val_windows = j.value("max_val_windows", t.max_val_windows);
  t.checkpoint_every = j.value("checkpoint_every", t.checkpoint_every);
  return t;
}

inline nlohmann::json run_config_to_json(const RunConfig& c) {
  return {{"seed", c.seed},
          {"J", c.joints},
          {"flow", flow_config_to_json(c.flow)},
          {"train", train_config_to_json(c.train)},
          {"data",
           {{"tasks", c.data.tasks},
            {"episodes_per_task", c.data.episodes_per_task},
            {"episode_length", c.data.episode_length},
            {"image_size", c.data.image_size},
            {"radius", c.data.radius},
            {"misalignment", to_string(c.data.misalignment)}}},
          {"monitor",
           {{"alpha", c.monitor.alpha}, {"persist_k", c.monitor.persist_k}, {"hysteresis", c.monitor.hysteresis}}}};
}

/// Overlays the keys present in `j` onto `c`; absent keys keep their value.
inline RunConfig run_config_from_json(const nlohmann::json& j, RunConfig c = {}) {
  try {
    c.seed = j.value("seed", c.seed);
    c.joints = j.value("J", c.joints);
    c.flow.state_dim = c.joints + 8;
    if (j.contains("flow")) c.flow = flow_config_from_json(j.at("flow"), c.flow);
    if (j.contains("train")) c.train = train_config_from_json(j.at("train"), c.train);
    if (j.contains("data")) {
      const auto& d = j.at("data");
      c.data.tasks = d.value("tasks", c.data.tasks);
      c.data.episodes_per_task = d.value("episodes_per_task", c.data.episodes_per_task);
      c.data.episode_length = d.value("episode_length", c.data.episode_length);
      c.data.image_size = d.value("image_size", c.data.image_size);
      c.data.radius = d.value("radius", c.data.radius);
      if (d.contains("misalignment"))
        c.data.misalignment = misalignment_target_from_string(d.at("misalignment").get<std::string>());
    }
    if (j.contains("monitor")) {
      const auto& m = j.at("monitor");
      c.monitor.alpha = m.value("alpha", c.monitor.alpha);
      c.monitor.persist_k = m.value("persist_k", c.monitor.persist_k);
      c.monitor.hysteresis = m.value("hysteresis", c.monitor.hysteresis);
    }
    return c;
  } catch (const nlohmann::json::exception& ex) {
    throw Error(Errc::parse_error, std::string("run config: ") + ex.what());
  }
}

// ---------------------------------------------------------------------------
// Reports

inline std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// First line of every report: the only place for run-dependent values.
inline std::string header_line(const std::string& command, double wall_seconds) {
  std::ostringstream out;
  out.precision(6);
  out << "# rcnf " << command << " utc=" << utc_timestamp() << " wall_seconds=" << wall_seconds << "\n";
  return out.str();
}

inline void write_report(const std::filesystem::path& path, const std::string& command, double wall_seconds,
                         const std::string& body) {
  write_text_file(path, header_line(command, wall_seconds) + body);
}

/// Report text without its leading '#' lines.
inline std::string strip_header(const std::string& text) {
  std::size_t pos = 0;
  while (pos < text.size() && text[pos] == '#') {
    const std::size_t nl = text.find('\n', pos);
    pos = nl == std::string::npos ? text.size() : nl + 1;
  }
  return text.substr(pos);
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), Errc::io_error, "cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline nlohmann::json read_report_json(const std::filesystem::path& path) {
  try {
    return nlohmann::json::parse(strip_header(read_text_file(path)));
  } catch (const nlohmann::json::exception& ex) {
    throw Error(Errc::parse_error, path.string() + ": " + ex.what());
  }
}

// ---------------------------------------------------------------------------
// Data

inline std::vector<std::string> task_ids(int count) {
  std::vector<std::string> ids;
  for (int i = 0; i < count; ++i) ids.push_back(default_task_id(i));
  return ids;
}

/// Episode e of (task, kind) uses seed derive_seed(seed, "gen/<e>"); the
/// simulator further keys its stream on task and kind. Ids are <task>_<kind>_<e>.
inline std::vector<Episode> generate_episodes(const RunConfig& cfg, const std::vector<AnomalyKind>& kinds,
                                              int episodes_per_task, std::uint64_t seed) {
  const auto tasks = default_task_set();
  const SceneConfig scene = cfg.scene();
  std::vector<Episode> eps;
  for (const auto& id : task_ids(cfg.data.tasks))
    for (AnomalyKind k : kinds)
      for (int e = 0; e < episodes_per_task; ++e) {
        eps.push_back(generate_episode(tasks, id, k, derive_seed(seed, "gen/" + std::to_string(e)),
                                       cfg.data.episode_length, scene));
        eps.back().episode_id = id + "_" + std::string(to_string(k)) + "_" + std::to_string(e);
      }
  return eps;
}

inline std::vector<Window> windows_of(const std::vector<Episode>& eps, int frames) {
  std::vector<Window> out;
  for (const auto& ep : eps) {
    auto ws = windows_from_episode(ep, frames, 1);
    out.insert(out.end(), std::make_move_iterator(ws.begin()), std::make_move_iterator(ws.end()));
  }
  return out;
}

/// Writes episodes plus manifest.json into `dir`. Everything goes to a
/// sibling temporary directory first, so a failure leaves no partial dataset.
inline Manifest write_dataset(const std::filesystem::path& dir, const std::vector<Episode>& eps, const RunConfig& cfg,
                              bool force) {
  namespace fs = std::filesystem;
  require(force || !fs::exists(dir), Errc::invalid_argument, dir.string() + " exists (use --force to replace)");
  Manifest m;
  m.frames = cfg.flow.frames;
  m.points = cfg.flow.points;
  m.joints = cfg.joints;
  m.episode_length = cfg.data.episode_length;
  m.image_size = cfg.data.image_size;
  std::set<std::string> tasks;
  std::vector<Window> nominal;
  for (const auto& ep : eps) {
    tasks.insert(ep.task_id);
    if (ep.anomaly_kind == AnomalyKind::none) {
      auto ws = windows_from_episode(ep, cfg.flow.frames, 1);
      nominal.insert(nominal.end(), ws.begin(), ws.end());
    }
  }
  m.tasks.assign(tasks.begin(), tasks.end());
  if (!nominal.empty()) m.norm_stats = compute_norm_stats(nominal);

  const fs::path tmp = dir.string() + ".partial";
  fs::remove_all(tmp);
  fs::create_directories(tmp / "episodes");
  for (const auto& ep : eps) {
    const std::string name = "episodes/" + ep.episode_id + ".json";
    save_episode(ep, tmp / name);
    m.episodes.push_back(name);
  }
  write_text_file(tmp / "manifest.json", manifest_to_json(m).dump(2) + "\n");
  fs::remove_all(dir);
  if (dir.has_parent_path()) fs::create_directories(dir.parent_path());
  fs::rename(tmp, dir);
  return m;
}

inline std::vector<Episode> filter_kind(const std::vector<Episode>& eps, AnomalyKind kind) {
  std::vector<Episode> out;
  for (const auto& ep : eps)
    if (ep.anomaly_kind == kind) out.push_back(ep);
  return out;
}

// ---------------------------------------------------------------------------
// Models and profiles

/// Sub-seeds for model initialization and training come from the master seed.
inline void fan_out_seeds(RunConfig& cfg) {
  cfg.flow.seed = derive_seed(cfg.seed, "model");
  cfg.train.seed = derive_seed(cfg.seed, "train");
}

inline TaskCodebook make_codebook(const RunConfig& cfg) {
  return optimize_codebook(cfg.data.tasks, cfg.flow.frames, cfg.data.radius, derive_seed(cfg.seed, "codebook"));
}

inline FlowModel build_model(const RunConfig& cfg, TaskCodebook codebook, NormStats norm) {
  FlowConfig fc = cfg.flow;
  fc.state_dim = cfg.joints + 8;
  return FlowModel(fc, std::move(codebook), std::move(norm));
}

/// One conformal profile per task found in the nominal windows.
inline std::vector<ThresholdProfile> calibrate_all(const FlowModel& model, const std::vector<Window>& nominal,
                                                   double alpha, std::uint64_t seed) {
  std::set<std::string> tasks;
  for (const auto& w : nominal) tasks.insert(w.task_id);
  std::vector<ThresholdProfile> out;
  for (const auto& t : tasks) out.push_back(calibrate(model, nominal, t, alpha, derive_seed(seed, "calibrate")));
  return out;
}

inline nlohmann::json profiles_to_json(const std::vector<ThresholdProfile>& ps) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& p : ps) arr.push_back(profile_to_json(p));
  return arr;
}

inline std::vector<ThresholdProfile> profiles_from_json(const nlohmann::json& j) {
  std::vector<ThresholdProfile> ps;
  for (const auto& p : j) ps.push_back(profile_from_json(p));
  return ps;
}

inline const ThresholdProfile& find_profile(const std::vector<ThresholdProfile>& ps, const std::string& task_id) {
  for (const auto& p : ps)
    if (p.task_id == task_id) return p;
  throw Error(Errc::unknown_task, "no threshold profile for task '" + task_id + "'");
}

}  // namespace rcnf
