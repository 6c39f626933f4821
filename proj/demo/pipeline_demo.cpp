// End-to-end walk through the library in memory: generate nominal episodes,
// train a small flow, calibrate per-task thresholds, then stream an episode
// with a slipping grasp through the monitor and print what it decides.
//
// Usage: rcnf_demo [epochs]

#include <cstdio>
#include <cstdlib>

#include "rcnf/rcnf.hpp"

using namespace rcnf;

int main(int argc, char** argv) {
  RunConfig cfg;
  cfg.seed = 7;
  cfg.data.tasks = 3;
  cfg.flow.steps = 4;
  cfg.flow.net.d_model = 32;
  cfg.flow.net.heads = 4;
  cfg.flow.net.mlp_hidden = 64;
  cfg.train.epochs = argc > 1 ? std::atoi(argv[1]) : 15;
  cfg.train.next_stage_epoch = cfg.train.epochs / 3 + 1;
  cfg.train.windows_per_epoch = 256;
  fan_out_seeds(cfg);
  cfg.validate();

  const auto nominal = generate_episodes(cfg, {AnomalyKind::none}, 20, derive_seed(cfg.seed, "train-data"));
  const auto windows = windows_of(nominal, cfg.flow.frames);
  std::printf("%zu nominal episodes, %zu windows\n", nominal.size(), windows.size());

  FlowModel model = build_model(cfg, make_codebook(cfg), compute_norm_stats(windows));
  train(model, windows, cfg.train, [](int epoch, const TrainReport& r) {
    std::printf("epoch %2d  train NLL %9.2f  val NLL %9.2f\n", epoch, r.epoch_nll.back(), r.val_nll.back());
  });

  const auto cal = generate_episodes(cfg, {AnomalyKind::none}, 8, derive_seed(cfg.seed, "cal-data"));
  const auto profiles = calibrate_all(model, windows_of(cal, cfg.flow.frames), cfg.monitor.alpha, cfg.seed);
  for (const auto& p : profiles) std::printf("%s  threshold %.2f\n", p.task_id.c_str(), p.upper);

  const auto test = generate_episodes(cfg, {AnomalyKind::gripper_slippage}, 1, derive_seed(cfg.seed, "test-data"));
  const Episode& ep = test.front();
  std::printf("\nstreaming %s\n", ep.episode_id.c_str());
  for (const auto& v : run_monitor(model, find_profile(profiles, ep.task_id), ep.frames, cfg.monitor.policy())) {
    const bool truth = ep.frames[static_cast<std::size_t>(v.frame)].label == Label::anomalous;
    std::printf("frame %2d  score %9.2f  %-9s truth %-9s %s\n", v.frame, v.score, to_string(v.state).data(),
                truth ? "anomalous" : "normal", v.event == MonitorEvent::none ? "" : to_string(v.event).data());
  }
}
