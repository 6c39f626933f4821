// Command-line front end: encode-tasks, gen-data, train, calibrate, score,
// eval and monitor. Exit codes: 0 success, 2 invalid input, 3 runtime failure.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "rcnf/rcnf.hpp"

namespace fs = std::filesystem;
using namespace rcnf;
using nlohmann::json;

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitRuntime = 3;

bool is_runtime(Errc c) {
  return c == Errc::io_error || c == Errc::divergence || c == Errc::singular_mixing ||
         c == Errc::uninitialized_weights || c == Errc::uninitialized_actnorm;
}

// Unset optionals keep the config-file or default value.
struct Overrides {
  std::string config;
  bool print_config = false;
  std::optional<std::uint64_t> seed;
  std::optional<int> T, N, K, J, d_model, heads, mlp_hidden;
  std::optional<int> codebook_dim;  // encode-tasks only; defaults to T
  bool no_task_embedding = false, no_robot_state = false;
  std::optional<std::string> score_mode;
  std::optional<int> epochs, next_stage_epoch, batch_size, windows_per_epoch, max_val_windows;
  std::optional<double> learning_rate;
  std::optional<int> tasks, episodes_per_task, episode_length;
  std::optional<double> radius;
  std::optional<std::string> misalignment;
  std::optional<double> alpha, hysteresis;
  std::optional<int> persist_k;
};

template <class T, class U>
void apply(const std::optional<T>& v, U& dst) {
  if (v) dst = static_cast<U>(*v);
}

RunConfig resolve(const Overrides& o) {
  RunConfig c;
  if (!o.config.empty()) c = run_config_from_json(read_json_file(o.config));
  apply(o.seed, c.seed);
  apply(o.T, c.flow.frames);
  if (o.N) {
    c.flow.points = *o.N;
    c.flow.groups = default_groups(*o.N);
  }
  apply(o.K, c.flow.steps);
  if (o.J) c.joints = *o.J;
  c.flow.state_dim = c.joints + 8;
  apply(o.d_model, c.flow.net.d_model);
  apply(o.heads, c.flow.net.heads);
  apply(o.mlp_hidden, c.flow.net.mlp_hidden);
  if (o.no_task_embedding) c.flow.use_task_embedding = false;
  if (o.no_robot_state) c.flow.use_robot_state = false;
  if (o.score_mode) c.flow.score_mode = score_mode_from_string(*o.score_mode);
  apply(o.epochs, c.train.epochs);
  apply(o.next_stage_epoch, c.train.next_stage_epoch);
  apply(o.batch_size, c.train.batch_size);
  apply(o.windows_per_epoch, c.train.windows_per_epoch);
  apply(o.max_val_windows, c.train.max_val_windows);
  apply(o.learning_rate, c.train.learning_rate);
  apply(o.tasks, c.data.tasks);
  apply(o.episodes_per_task, c.data.episodes_per_task);
  apply(o.episode_length, c.data.episode_length);
  apply(o.radius, c.data.radius);
  if (o.misalignment) c.data.misalignment = misalignment_target_from_string(*o.misalignment);
  apply(o.alpha, c.monitor.alpha);
  apply(o.persist_k, c.monitor.persist_k);
  apply(o.hysteresis, c.monitor.hysteresis);
  fan_out_seeds(c);
  c.validate();
  return c;
}

void add_common(CLI::App* app, Overrides& o) {
  app->add_option("--config", o.config, "Run configuration file (JSON); flags override it")->check(CLI::ExistingFile);
  app->add_flag("--print-config", o.print_config, "Print the resolved configuration as JSON and exit");
  app->add_option("--seed", o.seed, "Master seed; every random stream is derived from it");
}

void add_dims(CLI::App* app, Overrides& o) {
  app->add_option("--frames", o.T, "Window length T");
  app->add_option("--points", o.N, "Points per object mask N");
  app->add_option("--joints", o.J, "Robot joints J");
}

void add_model(CLI::App* app, Overrides& o) {
  app->add_option("--steps", o.K, "Flow steps K");
  app->add_option("--d-model", o.d_model, "Coupling network width");
  app->add_option("--heads", o.heads, "Attention heads");
  app->add_option("--mlp-hidden", o.mlp_hidden, "Hidden width of the coupling MLPs");
  app->add_flag("--no-task-embedding", o.no_task_embedding, "Ablation: zero task embedding and prior mean");
  app->add_flag("--no-robot-state", o.no_robot_state, "Ablation: drop robot-state conditioning");
  app->add_option("--score-mode", o.score_mode, "raw or per_dim")->check(CLI::IsMember({"raw", "per_dim"}));
}

void add_train(CLI::App* app, Overrides& o) {
  app->add_option("--epochs", o.epochs, "Training epochs");
  app->add_option("--next-stage-epoch", o.next_stage_epoch, "Epoch at which balanced sampling starts");
  app->add_option("--batch-size", o.batch_size, "Windows per optimizer step");
  app->add_option("--windows-per-epoch", o.windows_per_epoch, "Windows drawn per epoch (0: full pass)");
  app->add_option("--max-val-windows", o.max_val_windows, "Cap on validation windows (0: all)");
  app->add_option("--lr", o.learning_rate, "Learning rate");
}

void add_data(CLI::App* app, Overrides& o) {
  app->add_option("--tasks", o.tasks, "Number of tasks");
  app->add_option("--episodes-per-task", o.episodes_per_task, "Episodes per task and anomaly kind");
  app->add_option("--length", o.episode_length, "Frames per episode");
  app->add_option("--misalignment", o.misalignment, "sibling or decoy")->check(CLI::IsMember({"sibling", "decoy"}));
}

void add_monitor(CLI::App* app, Overrides& o) {
  app->add_option("--alpha", o.alpha, "Conformal miscoverage level");
  app->add_option("--persist-k", o.persist_k, "Consecutive anomalous frames before a replan request");
  app->add_option("--hysteresis", o.hysteresis, "Resume only below upper - hysteresis");
}

void need(const std::string& value, const std::string& flag) {
  require(!value.empty(), Errc::invalid_argument, flag + " is required");
}

void refuse_overwrite(const fs::path& path, bool force) {
  require(force || !fs::exists(path), Errc::invalid_argument, path.string() + " exists (use --force to replace)");
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string config_line(const RunConfig& c) { return "# config " + run_config_to_json(c).dump() + "\n"; }

void check_dataset(const Manifest& m, const RunConfig& c) {
  require(m.points == c.flow.points && m.joints == c.joints, Errc::invalid_dimensions,
          "dataset dims (N=" + std::to_string(m.points) + ", J=" + std::to_string(m.joints) +
              ") differ from the configuration");
}

void check_model(const FlowModel& model, const Manifest& m) {
  const auto& fc = model.config();
  require(m.points == fc.points && m.joints + 8 == fc.state_dim, Errc::invalid_dimensions,
          "dataset dims differ from the model");
}

// --- commands ---------------------------------------------------------------

int cmd_encode_tasks(const RunConfig& c, std::optional<int> dim, const std::string& out, bool force) {
  need(out, "--out");
  refuse_overwrite(out, force);
  const auto cb = dim ? optimize_codebook(c.data.tasks, *dim, c.data.radius, derive_seed(c.seed, "codebook"))
                      : make_codebook(c);
  write_text_file(out, codebook_to_json(cb).dump(2) + "\n");
  std::printf("codebook: %zu tasks, T=%d, R=%g, min angle %.6f deg -> %s\n", cb.size(), cb.dim(), cb.radius(),
              cb.min_pairwise_angle(), out.c_str());
  return 0;
}

int cmd_gen_data(const RunConfig& c, const std::string& anomaly, const std::string& out_dir, bool force) {
  need(out_dir, "--out-dir");
  refuse_overwrite(out_dir, force);
  std::vector<AnomalyKind> kinds;
  if (anomaly == "all")
    kinds.assign(kAnomalyKinds.begin(), kAnomalyKinds.end());
  else
    kinds.push_back(anomaly_kind_from_string(anomaly));
  const auto eps = generate_episodes(c, kinds, c.data.episodes_per_task, derive_seed(c.seed, "data"));
  const auto m = write_dataset(out_dir, eps, c, force);
  std::printf("dataset: %zu episodes of %d frames, %zu tasks -> %s\n", m.episodes.size(), m.episode_length,
              m.tasks.size(), out_dir.c_str());
  return 0;
}

int cmd_train(const RunConfig& cfg, const std::string& data, const std::string& codebook_path, const std::string& out,
              std::string report_path, const std::string& checkpoint_dir, bool force) {
  need(data, "--data");
  need(out, "--out");
  refuse_overwrite(out, force);
  if (report_path.empty()) report_path = out + ".report.json";
  const auto t0 = std::chrono::steady_clock::now();
  Manifest m;
  const auto eps = load_dataset(data, &m);
  check_dataset(m, cfg);
  const auto windows = windows_of(eps, cfg.flow.frames);
  const TaskCodebook cb = codebook_path.empty() ? make_codebook(cfg) : load_codebook(codebook_path);
  require(cb.dim() == cfg.flow.frames, Errc::invalid_dimensions, "codebook dimension differs from T");
  const NormStats norm = m.norm_stats.empty() ? compute_norm_stats(windows) : m.norm_stats;
  FlowModel model = build_model(cfg, cb, norm);
  TrainConfig tc = cfg.train;
  tc.checkpoint_dir = checkpoint_dir;
  const auto rep = train(model, windows, tc, [&](int epoch, const TrainReport& r) {
    std::fprintf(stderr, "epoch %3d  nll %.4f  val %.4f  %s\n", epoch, r.epoch_nll.back(), r.val_nll.back(),
                 r.sampler.back().c_str());
  });
  save_model(model, out);
  const json body{{"command", "train"},
                  {"config", run_config_to_json(cfg)},
                  {"data", data},
                  {"checkpoint", out},
                  {"report", train_report_to_json(rep)}};
  write_report(report_path, "train", seconds_since(t0), body.dump(2) + "\n");
  std::printf("trained %d epochs, final val NLL %.4f -> %s\n", tc.epochs, rep.final_val_nll, out.c_str());
  return 0;
}

int cmd_calibrate(const RunConfig& cfg, const std::string& model_path, const std::string& data,
                  const std::string& task, const std::string& out, bool force) {
  need(model_path, "--model");
  need(data, "--data");
  need(out, "--out");
  refuse_overwrite(out, force);
  const auto t0 = std::chrono::steady_clock::now();
  const FlowModel model = load_model(model_path);
  Manifest m;
  const auto eps = load_dataset(data, &m);
  check_model(model, m);
  auto windows = windows_of(eps, model.config().frames);
  std::vector<ThresholdProfile> profiles;
  if (task.empty()) {
    profiles = calibrate_all(model, windows, cfg.monitor.alpha, cfg.seed);
  } else {
    profiles.push_back(calibrate(model, windows, task, cfg.monitor.alpha, derive_seed(cfg.seed, "calibrate")));
  }
  const json body{{"command", "calibrate"},
                  {"config", run_config_to_json(cfg)},
                  {"model", model_path},
                  {"profiles", profiles_to_json(profiles)}};
  write_report(out, "calibrate", seconds_since(t0), body.dump(2) + "\n");
  for (const auto& p : profiles)
    std::printf("%s: mu %.4f upper %.4f (n2=%zu, alpha=%g)\n", p.task_id.c_str(), p.mu, p.upper, p.deviations.size(),
                p.alpha);
  return 0;
}

int cmd_score(const RunConfig& cfg, const std::string& model_path, const std::string& data, const std::string& out,
              bool force) {
  need(model_path, "--model");
  need(data, "--data");
  need(out, "--out");
  refuse_overwrite(out, force);
  const auto t0 = std::chrono::steady_clock::now();
  const FlowModel model = load_model(model_path);
  Manifest m;
  const auto eps = load_dataset(data, &m);
  check_model(model, m);
  std::ostringstream csv;
  csv.precision(17);
  csv << config_line(cfg) << "episode_id,task_id,anomaly_kind,frame,score,label\n";
  std::size_t n = 0;
  for (const auto& ep : eps) {
    const auto ws = windows_from_episode(ep, model.config().frames, 1);
    const auto scores = model.anomaly_scores(ws);
    for (std::size_t i = 0; i < ws.size(); ++i, ++n) {
      const int f = ws[i].end_frame();
      csv << ep.episode_id << ',' << ep.task_id << ',' << to_string(ep.anomaly_kind) << ',' << f << ',' << scores[i]
          << ',' << (ep.frames[static_cast<std::size_t>(f)].label == Label::anomalous ? 1 : 0) << '\n';
    }
  }
  write_report(out, "score", seconds_since(t0), csv.str());
  std::printf("scored %zu windows -> %s\n", n, out.c_str());
  return 0;
}

int cmd_eval(const RunConfig& cfg, const std::string& model_path, const std::string& data,
             const std::string& profiles_path, const std::string& out, const std::string& curves, bool force) {
  need(model_path, "--model");
  need(data, "--data");
  need(out, "--out");
  refuse_overwrite(out, force);
  if (!curves.empty()) refuse_overwrite(curves, force);
  const auto t0 = std::chrono::steady_clock::now();
  const FlowModel model = load_model(model_path);
  Manifest m;
  const auto eps = load_dataset(data, &m);
  check_model(model, m);
  std::vector<ThresholdProfile> profiles;
  if (!profiles_path.empty()) profiles = profiles_from_json(read_report_json(profiles_path).at("profiles"));
  const auto r = evaluate_benchmark(model, profiles, eps);
  const json body{{"command", "eval"},
                  {"config", run_config_to_json(cfg)},
                  {"model", model_path},
                  {"data", data},
                  {"report", bench_report_to_json(r)}};
  const double wall = seconds_since(t0);
  if (!curves.empty()) write_report(curves, "eval", wall, curves_to_csv(r.curves));
  write_report(out, "eval", wall, body.dump(2) + "\n");
  for (const auto& [kind, km] : r.per_kind)
    std::printf("%-22s AUC %s  AP %s\n", kind.c_str(), km.auc ? std::to_string(*km.auc).c_str() : "n/a",
                km.ap ? std::to_string(*km.ap).c_str() : "n/a");
  if (r.macro_auc) std::printf("%-22s AUC %.6f  AP %.6f\n", "macro", *r.macro_auc, r.macro_ap.value_or(0.0));
  for (const auto& k : r.missing_kinds) std::fprintf(stderr, "warning: no episodes of kind %s\n", k.c_str());
  return 0;
}

/// Frames come as one episode document or as JSON lines in the frame schema.
/// Unparseable lines become empty frames, which the monitor rejects.
std::vector<Frame> read_frames(const std::string& text, std::string* task_out) {
  std::vector<Frame> frames;
  try {
    const json doc = json::parse(text);
    if (doc.is_object() && doc.contains("frames")) {
      const Episode ep = episode_from_json(doc);
      if (task_out) *task_out = ep.task_id;
      return ep.frames;
    }
  } catch (const json::exception&) {
  }
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      frames.push_back(frame_from_json(json::parse(line)));
    } catch (const std::exception&) {
      frames.emplace_back();
    }
  }
  return frames;
}

int cmd_monitor(const RunConfig& cfg, const std::string& model_path, const std::string& profiles_path,
                std::string task, const std::string& input, const std::string& out, bool force) {
  need(model_path, "--model");
  need(profiles_path, "--profiles");
  if (!out.empty()) refuse_overwrite(out, force);
  const auto t0 = std::chrono::steady_clock::now();
  const FlowModel model = load_model(model_path);
  const auto profiles = profiles_from_json(read_report_json(profiles_path).at("profiles"));
  std::string text;
  if (input.empty() || input == "-") {
    std::ostringstream ss;
    ss << std::cin.rdbuf();
    text = ss.str();
  } else {
    text = read_text_file(input);
  }
  std::string episode_task;
  const auto frames = read_frames(text, &episode_task);
  if (task.empty()) task = episode_task;
  need(task, "--task");
  const ThresholdProfile& profile = find_profile(profiles, task);

  StreamMonitor mon(model, profile, cfg.monitor.policy());
  std::ostringstream log;
  log.precision(17);
  log << config_line(cfg);
  int events = 0, scored = 0;
  double latency = 0;
  for (const auto& f : frames)
    if (auto v = mon.push(f)) {
      log << verdict_to_json(*v).dump() << '\n';
      events += v->event != MonitorEvent::none;
      if (v->event != MonitorEvent::frame_rejected) {
        ++scored;
        latency += v->latency_ms;
      }
    }
  if (out.empty()) {
    std::cout << header_line("monitor", seconds_since(t0)) << log.str();
  } else {
    write_report(out, "monitor", seconds_since(t0), log.str());
  }
  std::fprintf(stderr, "%zu frames, %d verdicts, %d events, mean latency %.3f ms\n", frames.size(), scored, events,
               scored ? latency / scored : 0.0);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Robot-conditioned normalizing flow: data generation, training, calibration and monitoring"};
  app.require_subcommand(1);

  Overrides o;
  std::string out, out_dir, data, model, profiles, codebook, report, checkpoint_dir, task, input, curves;
  std::string anomaly = "none";
  bool force = false;

  auto* enc = app.add_subcommand("encode-tasks", "Optimize the spherical task codebook");
  add_common(enc, o);
  enc->add_option("--tasks", o.tasks, "Number of tasks M");
  enc->add_option("--dim", o.codebook_dim, "Embedding dimension (default: T)");
  enc->add_option("--radius", o.radius, "Sphere radius R");
  enc->add_option("--out", out, "Codebook file");
  enc->add_flag("--force", force, "Replace an existing output");

  auto* gen = app.add_subcommand("gen-data", "Generate synthetic pick-and-place episodes");
  add_common(gen, o);
  add_dims(gen, o);
  add_data(gen, o);
  gen->add_option("--anomaly", anomaly, "none, gripper_open, gripper_slippage, spatial_misalignment or all")
      ->check(CLI::IsMember({"none", "gripper_open", "gripper_slippage", "spatial_misalignment", "all"}));
  gen->add_option("--out-dir", out_dir, "Dataset directory");
  gen->add_flag("--force", force, "Replace an existing output");

  auto* tr = app.add_subcommand("train", "Train the flow on nominal episodes");
  add_common(tr, o);
  add_dims(tr, o);
  add_model(tr, o);
  add_train(tr, o);
  tr->add_option("--tasks", o.tasks, "Number of tasks when no codebook file is given");
  tr->add_option("--data", data, "Nominal dataset directory");
  tr->add_option("--codebook", codebook, "Codebook file (default: optimized from the seed)");
  tr->add_option("--out", out, "Checkpoint file");
  tr->add_option("--report", report, "Training report (default: <out>.report.json)");
  tr->add_option("--checkpoint-dir", checkpoint_dir, "Directory for periodic and best checkpoints");
  tr->add_flag("--force", force, "Replace an existing output");

  auto* cal = app.add_subcommand("calibrate", "Conformal thresholds from nominal episodes");
  add_common(cal, o);
  add_monitor(cal, o);
  cal->add_option("--model", model, "Checkpoint file");
  cal->add_option("--data", data, "Nominal calibration dataset");
  cal->add_option("--task", task, "Calibrate one task only");
  cal->add_option("--out", out, "Profiles report");
  cal->add_flag("--force", force, "Replace an existing output");

  auto* sc = app.add_subcommand("score", "Per-frame anomaly scores as CSV");
  add_common(sc, o);
  sc->add_option("--model", model, "Checkpoint file");
  sc->add_option("--data", data, "Dataset directory");
  sc->add_option("--out", out, "CSV output");
  sc->add_flag("--force", force, "Replace an existing output");

  auto* ev = app.add_subcommand("eval", "AUC and AP per anomaly kind");
  add_common(ev, o);
  ev->add_option("--model", model, "Checkpoint file");
  ev->add_option("--data", data, "Benchmark dataset directory");
  ev->add_option("--profiles", profiles, "Profiles report (adds thresholds to the curves)");
  ev->add_option("--out", out, "Benchmark report");
  ev->add_option("--curves", curves, "Per-frame score curves as CSV");
  ev->add_flag("--force", force, "Replace an existing output");

  auto* mo = app.add_subcommand("monitor", "Stream frames through the monitor and log verdicts");
  add_common(mo, o);
  add_monitor(mo, o);
  mo->add_option("--model", model, "Checkpoint file");
  mo->add_option("--profiles", profiles, "Profiles report");
  mo->add_option("--task", task, "Task being executed (default: from an episode input)");
  mo->add_option("--input", input, "Episode file or JSON-lines frames; '-' or absent reads stdin");
  mo->add_option("--out", out, "Verdict log (default: stdout)");
  mo->add_flag("--force", force, "Replace an existing output");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitValidation;
  }

  try {
    const RunConfig cfg = resolve(o);
    if (o.print_config) {
      std::cout << run_config_to_json(cfg).dump(2) << "\n";
      return 0;
    }
    if (enc->parsed()) return cmd_encode_tasks(cfg, o.codebook_dim, out, force);
    if (gen->parsed()) return cmd_gen_data(cfg, anomaly, out_dir, force);
    if (tr->parsed()) return cmd_train(cfg, data, codebook, out, report, checkpoint_dir, force);
    if (cal->parsed()) return cmd_calibrate(cfg, model, data, task, out, force);
    if (sc->parsed()) return cmd_score(cfg, model, data, out, force);
    if (ev->parsed()) return cmd_eval(cfg, model, data, profiles, out, curves, force);
    if (mo->parsed()) return cmd_monitor(cfg, model, profiles, task, input, out, force);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return is_runtime(e.code()) ? kExitRuntime : kExitValidation;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
  return 0;
}
