#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "rcnf/error.hpp"
#include "rcnf/mask_sampling.hpp"
#include "rcnf/seed.hpp"
#include "rcnf/task_codec.hpp"

namespace rcnf {

enum class AnomalyKind { none, gripper_open, gripper_slippage, spatial_misalignment };
enum class Label { normal, anomalous };

inline constexpr std::array<AnomalyKind, 3> kAnomalyKinds = {
    AnomalyKind::gripper_open, AnomalyKind::gripper_slippage, AnomalyKind::spatial_misalignment};

inline std::string_view to_string(AnomalyKind k) {
  switch (k) {
    case AnomalyKind::none: return "none";
    case AnomalyKind::gripper_open: return "gripper_open";
    case AnomalyKind::gripper_slippage: return "gripper_slippage";
    case AnomalyKind::spatial_misalignment: return "spatial_misalignment";
  }
  return "none";
}

inline AnomalyKind anomaly_kind_from_string(std::string_view s) {
  for (auto k : {AnomalyKind::none, AnomalyKind::gripper_open, AnomalyKind::gripper_slippage,
                 AnomalyKind::spatial_misalignment})
    if (to_string(k) == s) return k;
  throw Error(Errc::invalid_argument, "unknown anomaly kind '" + std::string(s) + "'");
}

inline std::string_view to_string(Label l) { return l == Label::normal ? "normal" : "anomalous"; }

inline Label label_from_string(std::string_view s) {
  if (s == "normal") return Label::normal;
  if (s == "anomalous") return Label::anomalous;
  throw Error(Errc::invalid_argument, "unknown label '" + std::string(s) + "'");
}

/// Joint angles (rad), gripper opening in [0,1] (0 closed), pose = position
/// (m) followed by a unit quaternion (w, x, y, z).
struct RobotStateFrame {
  std::vector<double> joints;
  double gripper = 1.0;
  std::array<double, 7> pose{0, 0, 0, 1, 0, 0, 0};

  std::size_t flat_size() const { return joints.size() + 1 + pose.size(); }

  /// joints ++ gripper ++ pose
  void append_to(std::vector<double>& out) const {
    out.insert(out.end(), joints.begin(), joints.end());
    out.push_back(gripper);
    out.insert(out.end(), pose.begin(), pose.end());
  }
};

struct Frame {
  RobotStateFrame robot;
  PointFrame points;
  Label label = Label::normal;
};

struct Episode {
  std::string episode_id;
  std::string task_id;
  AnomalyKind anomaly_kind = AnomalyKind::none;
  std::optional<int> t_anomaly;
  std::vector<Frame> frames;
  // Scripted object center per frame before jitter and rendering; not persisted.
  std::vector<Point2> object_track;

  int length() const { return static_cast<int>(frames.size()); }
};

enum class ObjectShape { disc, rect };

/// Where a misaligned episode ends up: a sibling task's target (the route is
/// nominal for another instruction in the same scene) or a decoy compartment
/// that no task uses (the route never appears in nominal data).
enum class MisalignmentTarget { sibling, decoy };

inline std::string_view to_string(MisalignmentTarget m) { return m == MisalignmentTarget::sibling ? "sibling" : "decoy"; }

inline MisalignmentTarget misalignment_target_from_string(std::string_view s) {
  if (s == "sibling") return MisalignmentTarget::sibling;
  if (s == "decoy") return MisalignmentTarget::decoy;
  throw Error(Errc::invalid_argument, "unknown misalignment target '" + std::string(s) + "'");
}

/// One scripted pick-and-place variant. Tasks that share `scene` start from
/// the same place and differ only in their target, so a misaligned episode of
/// one task looks like a nominal episode of a sibling.
struct TaskSpec {
  std::string id;
  int scene = 0;
  Point2 home{};    // end-effector start
  Point2 start{};   // object rest position (on the table line)
  Point2 target{};  // object placement
  double lift_y = 0.4;
  double table_y = 0.82;
  ObjectShape shape = ObjectShape::disc;
  Point2 half_size{0.045, 0.045};  // disc uses half_size[0] as radius
  std::vector<Point2> decoys;      // scene compartments that are no task's target
};

struct SceneConfig {
  int num_points = 32;
  int image_size = 128;
  int num_joints = 7;
  double jitter = 0.003;
  double gravity = 0.004;  // normalized units per frame^2
  // Tolerance on the measured object centroid against its scripted position.
  double render_epsilon = 0.025;
  MisalignmentTarget misalignment = MisalignmentTarget::sibling;
};

inline std::vector<TaskSpec> default_task_set() {
  struct SceneDef {
    Point2 home, start;
    double lift_y;
    ObjectShape shape;
    Point2 half;
    std::vector<Point2> targets;
    std::vector<Point2> decoys;
  };
  const std::vector<SceneDef> scenes = {
      {{0.12, 0.30}, {0.18, 0.82}, 0.40, ObjectShape::disc, {0.045, 0.045},
       {{0.48, 0.60}, {0.62, 0.68}, {0.76, 0.58}, {0.90, 0.68}},
       {{0.32, 0.70}, {0.55, 0.46}, {0.83, 0.46}}},
      {{0.88, 0.28}, {0.84, 0.82}, 0.38, ObjectShape::rect, {0.05, 0.035},
       {{0.54, 0.58}, {0.38, 0.68}, {0.22, 0.58}},
       {{0.68, 0.70}, {0.46, 0.46}, {0.12, 0.70}}},
      {{0.50, 0.25}, {0.50, 0.82}, 0.35, ObjectShape::disc, {0.055, 0.055},
       {{0.20, 0.54}, {0.50, 0.50}, {0.80, 0.54}},
       {{0.35, 0.68}, {0.65, 0.68}, {0.92, 0.70}}},
  };
  std::vector<TaskSpec> tasks;
  for (int s = 0; s < static_cast<int>(scenes.size()); ++s)
    for (const auto& tgt : scenes[s].targets) {
      TaskSpec t;
      t.id = default_task_id(static_cast<int>(tasks.size()));
      t.scene = s;
      t.home = scenes[s].home;
      t.start = scenes[s].start;
      t.target = tgt;
      t.lift_y = scenes[s].lift_y;
      t.table_y = scenes[s].start[1];
      t.shape = scenes[s].shape;
      t.half_size = scenes[s].half;
      t.decoys = scenes[s].decoys;
      tasks.push_back(t);
    }
  return tasks;
}

inline const TaskSpec& find_task(const std::vector<TaskSpec>& tasks, const std::string& id) {
  for (const auto& t : tasks)
    if (t.id == id) return t;
  throw Error(Errc::unknown_task, "task '" + id + "' is not in the task set");
}

namespace detail {

inline double smoothstep(double u) {
  u = std::clamp(u, 0.0, 1.0);
  return u * u * (3.0 - 2.0 * u);
}

inline Point2 lerp(Point2 a, Point2 b, double u) { return {a[0] + (b[0] - a[0]) * u, a[1] + (b[1] - a[1]) * u}; }

/// Position at fraction u of the arc length along a polyline.
inline Point2 along(const std::vector<Point2>& path, double u) {
  std::vector<double> seg;
  double total = 0;
  for (std::size_t i = 1; i < path.size(); ++i) {
    seg.push_back(std::hypot(path[i][0] - path[i - 1][0], path[i][1] - path[i - 1][1]));
    total += seg.back();
  }
  if (total <= 0) return path.back();
  double d = std::clamp(u, 0.0, 1.0) * total;
  for (std::size_t i = 0; i < seg.size(); ++i) {
    if (d <= seg[i] || i + 1 == seg.size()) return lerp(path[i], path[i + 1], seg[i] > 0 ? std::min(d / seg[i], 1.0) : 1.0);
    d -= seg[i];
  }
  return path.back();
}

inline RobotStateFrame robot_state_from(Point2 ee, double gripper, int num_joints) {
  const double ex = ee[0], ey = ee[1];
  RobotStateFrame s;
  const std::array<double, 7> base = {std::atan2(ex - 0.5, 0.6),
                                      -0.4 + 1.1 * ey,
                                      0.3 * std::sin(3.0 * ex),
                                      -2.0 + 0.9 * ey + 0.3 * ex,
                                      0.2 * std::cos(2.0 * ey),
                                      1.4 + 0.5 * (ey - ex),
                                      0.8 - 0.3 * gripper};
  s.joints.resize(num_joints);
  for (int j = 0; j < num_joints; ++j) s.joints[j] = base[j % 7] + 0.05 * (j / 7);
  s.gripper = std::clamp(gripper, 0.0, 1.0);
  const double yaw = 0.4 * (ex - 0.5);
  s.pose = {0.45 + 0.1 * (ey - 0.5), 0.6 * (ex - 0.5), 1.1 - 0.8 * ey,
            std::cos(0.5 * yaw), 0.0, 0.0, std::sin(0.5 * yaw)};
  return s;
}

inline Mask render_object(const TaskSpec& task, Point2 center, int res) {
  const double cx = center[0] * res, cy = center[1] * res;
  if (task.shape == ObjectShape::disc) return Mask::disc(res, res, cx, cy, task.half_size[0] * res);
  return Mask::rect(res, res, cx, cy, task.half_size[0] * res, task.half_size[1] * res);
}

}  // namespace detail

/// Scripted 2D pick-and-place episode with optional anomaly injection.
///
/// Timeline: approach (gripper open) until t_grasp, carry (gripper closed)
/// along start -> lift height -> over target -> target until t_release, then
/// release and retreat. Anomalies start at t_anomaly inside the middle 60% of
/// the episode:
///   gripper_open          t_anomaly = t_grasp; gripper never closes and the
///                         object stays at rest while the arm carries on.
///   gripper_slippage      object detaches and falls with constant
///                         acceleration to the table line.
///   spatial_misalignment  arm and object re-route to a sibling task's target
///                         or to a decoy compartment (SceneConfig::misalignment).
inline Episode generate_episode(const std::vector<TaskSpec>& tasks, const std::string& task_id,
                                AnomalyKind kind, std::uint64_t seed, int length,
                                const SceneConfig& cfg = {}) {
  const TaskSpec& task = find_task(tasks, task_id);
  require(length >= 12, Errc::invalid_argument, "episode length must be >= 12 frames");

  std::mt19937_64 rng(derive_seed(seed, "episode/" + task_id + "/" + std::string(to_string(kind))));
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::normal_distribution<double> jitter(0.0, cfg.jitter);

  const int lo = static_cast<int>(std::ceil(0.2 * length));
  const int hi = static_cast<int>(std::floor(0.8 * length));
  std::uniform_int_distribution<int> shift(-2, 2);
  const int t_grasp = std::clamp(static_cast<int>(std::lround(0.25 * length)) + shift(rng), lo, hi - 6);
  const int t_release =
      std::clamp(static_cast<int>(std::lround(0.75 * length)) + shift(rng), t_grasp + 6, hi);

  const Point2 home{task.home[0] + 0.03 * unit(rng), task.home[1] + 0.03 * unit(rng)};
  const Point2 start{task.start[0] + 0.02 * unit(rng), task.start[1]};
  const double lift_y = task.lift_y + 0.02 * unit(rng);
  Point2 target{task.target[0] + 0.015 * unit(rng), task.target[1] + 0.015 * unit(rng)};
  const double grip = task.half_size[1] + 0.02;  // ee sits this far above the object center

  std::optional<int> t_anomaly;
  if (kind == AnomalyKind::gripper_open) {
    t_anomaly = t_grasp;
  } else if (kind != AnomalyKind::none) {
    std::uniform_int_distribution<int> pick(std::max(t_grasp + 2, lo), std::min(t_release - 4, hi));
    t_anomaly = pick(rng);
  }

  Point2 wrong_target = target;
  if (kind == AnomalyKind::spatial_misalignment) {
    std::vector<Point2> wrong;
    if (cfg.misalignment == MisalignmentTarget::sibling) {
      for (const auto& t : tasks)
        if (t.scene == task.scene && t.id != task.id) wrong.push_back(t.target);
    } else {
      wrong = task.decoys;
    }
    require(!wrong.empty(), Errc::invalid_argument,
            "spatial misalignment needs a " + std::string(to_string(cfg.misalignment)) + " location");
    std::uniform_int_distribution<std::size_t> which(0, wrong.size() - 1);
    const Point2 w = wrong[which(rng)];
    wrong_target = {w[0] + 0.015 * unit(rng), w[1] + 0.015 * unit(rng)};
  }

  auto above = [grip](Point2 p) { return Point2{p[0], p[1] - grip}; };
  const std::vector<Point2> carry = {above(start), {start[0], lift_y}, {target[0], lift_y}, above(target)};
  auto nominal_ee = [&](int t) -> Point2 {
    if (t < t_grasp) return detail::lerp(home, above(start), detail::smoothstep(static_cast<double>(t) / t_grasp));
    if (t <= t_release)
      return detail::along(carry, detail::smoothstep(static_cast<double>(t - t_grasp) / (t_release - t_grasp)));
    const double u = static_cast<double>(t - t_release) / std::max(1, length - 1 - t_release);
    return detail::lerp(above(target), {target[0], lift_y}, detail::smoothstep(u));
  };

  std::vector<Point2> divert_path;
  Point2 final_place = target;
  if (kind == AnomalyKind::spatial_misalignment) {
    divert_path = {nominal_ee(*t_anomaly - 1), {wrong_target[0], lift_y}, above(wrong_target)};
    final_place = wrong_target;
  }

  Episode ep;
  ep.task_id = task_id;
  ep.anomaly_kind = kind;
  ep.t_anomaly = t_anomaly;
  ep.episode_id = task_id + "_" + std::string(to_string(kind)) + "_" + std::to_string(seed);
  ep.frames.reserve(length);

  Point2 slip_from{};
  for (int t = 0; t < length; ++t) {
    Point2 ee = nominal_ee(t);
    double gripper = (t >= t_grasp && t < t_release) ? 0.0 : 1.0;
    Point2 obj;
    if (t < t_grasp) {
      obj = start;
    } else if (t <= t_release) {
      obj = {ee[0], ee[1] + grip};
    } else {
      obj = target;
    }

    switch (kind) {
      case AnomalyKind::none: break;
      case AnomalyKind::gripper_open:
        gripper = 1.0;
        obj = start;
        break;
      case AnomalyKind::gripper_slippage:
        if (t == *t_anomaly) slip_from = ep.object_track.back();
        if (t >= *t_anomaly) {
          const double dt = t - *t_anomaly + 1;
          obj = {slip_from[0], std::min(task.table_y, slip_from[1] + 0.5 * cfg.gravity * dt * dt)};
        }
        break;
      case AnomalyKind::spatial_misalignment:
        if (t >= *t_anomaly) {
          if (t <= t_release) {
            const double u = static_cast<double>(t - *t_anomaly + 1) / (t_release - *t_anomaly + 1);
            ee = detail::along(divert_path, detail::smoothstep(u));
            obj = {ee[0], ee[1] + grip};
          } else {
            const double u = static_cast<double>(t - t_release) / std::max(1, length - 1 - t_release);
            ee = detail::lerp(above(final_place), {final_place[0], lift_y}, detail::smoothstep(u));
            obj = final_place;
          }
        }
        break;
    }
    ep.object_track.push_back(obj);

    const Point2 ee_seen{ee[0] + jitter(rng), ee[1] + jitter(rng)};
    const Point2 obj_seen{obj[0] + jitter(rng), obj[1] + jitter(rng)};
    Frame f;
    f.robot = detail::robot_state_from(ee_seen, gripper, cfg.num_joints);
    f.points = grid_sample_mask(detail::render_object(task, obj_seen, cfg.image_size), cfg.num_points);
    // sub-pixel dequantization so the point coordinates have a continuous density
    std::uniform_real_distribution<double> dequant(-0.5 / cfg.image_size, 0.5 / cfg.image_size);
    for (auto& p : f.points.points) {
      p[0] += dequant(rng);
      p[1] += dequant(rng);
    }
    f.label = (t_anomaly && t >= *t_anomaly) ? Label::anomalous : Label::normal;
    ep.frames.push_back(std::move(f));
  }
  return ep;
}

inline Episode generate_episode(const std::string& task_id, AnomalyKind kind, std::uint64_t seed,
                                int length, const SceneConfig& cfg = {}) {
  return generate_episode(default_task_set(), task_id, kind, seed, length, cfg);
}

}  // namespace rcnf
