#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "rcnf/autodiff.hpp"
#include "rcnf/checkpoint.hpp"
#include "rcnf/dataset.hpp"
#include "rcnf/error.hpp"
#include "rcnf/flow.hpp"
#include "rcnf/seed.hpp"

namespace rcnf {

struct TrainConfig {
  int epochs = 100;
  int next_stage_epoch = 30;
  int batch_size = 64;
  // Gradients are accumulated over chunks of this many windows; per-point
  // activations of a full batch overflow the cache. 0: no chunking.
  int micro_batch = 16;
  double learning_rate = 1e-3;
  double grad_clip = 5.0;
  std::uint64_t seed = 0;
  int bins = 10;
  int refresh_interval = 0;  // re-balance every n epochs after the handoff; 0 = never
  double validation_fraction = 0.1;
  int windows_per_epoch = 0;  // 0: one full pass over the training windows
  int max_val_windows = 0;    // 0: all validation windows
  int checkpoint_every = 10;
  std::string checkpoint_dir;  // empty: no checkpoints
  bool verbose = false;

  void validate() const {
    require(epochs >= 1, Errc::invalid_argument, "epochs must be >= 1");
    require(next_stage_epoch >= 1 && next_stage_epoch <= epochs, Errc::invalid_argument,
            "next_stage_epoch must lie in [1, epochs]");
    require(batch_size >= 1 && learning_rate > 0 && grad_clip > 0 && bins >= 1, Errc::invalid_argument,
            "training hyperparameters must be positive");
    require(micro_batch >= 0, Errc::invalid_argument, "micro_batch must be >= 0");
    require(refresh_interval >= 0 && checkpoint_every >= 0 && windows_per_epoch >= 0 && max_val_windows >= 0,
            Errc::invalid_argument,
            "intervals must be non-negative");
    require(validation_fraction >= 0 && validation_fraction < 1, Errc::invalid_argument,
            "validation_fraction must be in [0, 1)");
  }
};

struct TrainReport {
  std::vector<double> epoch_nll;  // mean training NLL per window
  std::vector<double> val_nll;    // NaN when there is no validation split
  std::vector<std::string> sampler;
  std::vector<double> round_trip_error;
  int sampler_stage_epoch = 0;  // first epoch that used balanced sampling, 0 if none
  double final_val_nll = std::numeric_limits<double>::quiet_NaN();
  double best_val_nll = std::numeric_limits<double>::quiet_NaN();
  int best_epoch = 0;
  double wall_seconds = 0.0;
  int train_windows = 0;
  int val_windows = 0;
  bool diverged = false;
  std::string message;
  std::vector<std::string> warnings;
};

inline nlohmann::json nullable(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

/// Report body without the wall-clock time, which goes to the header line.
inline nlohmann::json train_report_to_json(const TrainReport& r) {
  nlohmann::json val = nlohmann::json::array();
  for (double v : r.val_nll) val.push_back(nullable(v));
  return {{"epoch_nll", r.epoch_nll},
          {"val_nll", val},
          {"sampler", r.sampler},
          {"round_trip_error", r.round_trip_error},
          {"sampler_stage_epoch", r.sampler_stage_epoch},
          {"final_val_nll", nullable(r.final_val_nll)},
          {"best_val_nll", nullable(r.best_val_nll)},
          {"best_epoch", r.best_epoch},
          {"train_windows", r.train_windows},
          {"val_windows", r.val_windows},
          {"diverged", r.diverged},
          {"message", r.message},
          {"warnings", r.warnings}};
}

class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, TrainReport report)
      : Error(Errc::divergence, what), report_(std::move(report)) {}
  const TrainReport& report() const { return report_; }

 private:
  TrainReport report_;
};

/// Adam with bias correction.
class Adam {
 public:
  Adam(std::vector<Var> params, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
    for (const auto& p : params_) {
      m_.push_back(Mat::Zero(p.rows(), p.cols()));
      v_.push_back(Mat::Zero(p.rows(), p.cols()));
    }
  }

  /// Scales gradients so their global L2 norm is at most max_norm; returns the pre-clip norm.
  double clip_grad_norm(double max_norm) {
    double sq = 0;
    for (const auto& p : params_)
      if (p.has_grad()) sq += p.grad().squaredNorm();
    const double norm = std::sqrt(sq);
    if (norm > max_norm) {
      const double k = max_norm / (norm + 1e-12);
      for (auto& p : params_)
        if (p.has_grad()) p.node()->grad *= k;
    }
    return norm;
  }

  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, t_), c2 = 1.0 - std::pow(b2_, t_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (!p.has_grad()) continue;
      const Mat& g = p.grad();
      m_[i] = b1_ * m_[i] + (1 - b1_) * g;
      v_[i] = b2_ * v_[i] + (1 - b2_) * g.cwiseProduct(g);
      p.mutable_value().array() -= lr_ * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps_);
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

 private:
  std::vector<Var> params_;
  std::vector<Mat> m_, v_;
  double lr_, b1_, b2_, eps_;
  int t_ = 0;
};

struct SplitWindows {
  std::vector<const Window*> train, val;
};

/// Holds out about `fraction` of the episodes (at least one when there are
/// two or more and fraction > 0).
inline SplitWindows split_by_episode(const std::vector<Window>& windows, double fraction, std::uint64_t seed) {
  std::vector<std::string> ids;
  std::set<std::string> seen;
  for (const auto& w : windows)
    if (seen.insert(w.episode_id).second) ids.push_back(w.episode_id);
  std::mt19937_64 rng(derive_seed(seed, "trainer/split"));
  std::shuffle(ids.begin(), ids.end(), rng);
  std::size_t n_val = 0;
  if (fraction > 0 && ids.size() >= 2)
    n_val = std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(fraction * ids.size())), 1, ids.size() - 1);
  const std::set<std::string> val_ids(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_val));
  SplitWindows s;
  for (const auto& w : windows) (val_ids.count(w.episode_id) ? s.val : s.train).push_back(&w);
  return s;
}

inline std::vector<const Window*> pick(const std::vector<const Window*>& ws, std::span<const std::size_t> idx) {
  std::vector<const Window*> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(ws[i]);
  return out;
}

/// Per-window NLL in eval mode.
inline std::vector<double> window_nll(const FlowModel& model, const std::vector<const Window*>& ws,
                                      std::size_t batch = 16) {
  ad::NoGradGuard ng;
  std::vector<double> out;
  out.reserve(ws.size());
  for (std::size_t start = 0; start < ws.size(); start += batch) {
    const std::span<const Window* const> part(ws.data() + start, std::min(batch, ws.size() - start));
    const Var lp = model.log_prob(Var(model.stack_x(part)), model.condition(part));
    for (Index i = 0; i < lp.rows(); ++i) out.push_back(-lp.value()(i, 0));
  }
  return out;
}

inline double mean_of(const std::vector<double>& v) {
  return v.empty() ? std::numeric_limits<double>::quiet_NaN()
                   : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

/// Max |inverse(forward(x)) - x| over a few windows.
inline double round_trip_error(const FlowModel& model, const std::vector<const Window*>& ws) {
  ad::NoGradGuard ng;
  const Mat x = model.stack_x(ws);
  const Conditioning c = model.condition(ws);
  const Mat z = model.forward(Var(x), c).z.value();
  return (model.inverse(z, c) - x).cwiseAbs().maxCoeff();
}

/// Maximum-likelihood training on nominal windows: uniform sampling until
/// next_stage_epoch, then loss-balanced sampling from a full eval pass.
inline TrainReport train(FlowModel& model, const std::vector<Window>& windows, const TrainConfig& cfg,
                         const std::function<void(int, const TrainReport&)>& on_epoch = {}) {
  cfg.validate();
  require(!windows.empty(), Errc::invalid_argument, "no training windows");
  for (const auto& w : windows)
    require(w.label == Label::normal, Errc::anomalous_data_in_training,
            "window from episode '" + w.episode_id + "' is labeled anomalous");
  const auto t0 = std::chrono::steady_clock::now();
  const auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };

  TrainReport report;
  const SplitWindows split = split_by_episode(windows, cfg.validation_fraction, cfg.seed);
  require(!split.train.empty(), Errc::invalid_argument, "validation split left no training windows");
  report.train_windows = static_cast<int>(split.train.size());
  report.val_windows = static_cast<int>(split.val.size());
  const std::size_t n = split.train.size();
  const std::size_t per_epoch = cfg.windows_per_epoch > 0 ? static_cast<std::size_t>(cfg.windows_per_epoch) : n;
  const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);
  std::vector<const Window*> val = split.val;
  if (cfg.max_val_windows > 0 && val.size() > static_cast<std::size_t>(cfg.max_val_windows)) {
    std::vector<const Window*> sub;
    const std::size_t m = static_cast<std::size_t>(cfg.max_val_windows);
    for (std::size_t i = 0; i < m; ++i) sub.push_back(val[i * val.size() / m]);
    val = std::move(sub);
  }

  std::mt19937_64 order_rng(derive_seed(cfg.seed, "trainer/order"));
  std::mt19937_64 dropout_rng(derive_seed(cfg.seed, "trainer/dropout"));

  std::vector<Var> params;
  for (const auto& [_, v] : model.params().entries()) params.push_back(v);
  Adam opt(params, cfg.learning_rate);

  std::vector<const Window*> probe(split.train.begin(), split.train.begin() + static_cast<std::ptrdiff_t>(std::min<std::size_t>(4, n)));
  std::optional<std::vector<double>> weights;
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::size_t cursor = n;
  const std::filesystem::path ckdir = cfg.checkpoint_dir;

  // ActNorm sees the first uniform batch, before any balanced scoring pass
  if (!model.actnorm_ready()) {
    std::shuffle(perm.begin(), perm.end(), order_rng);
    cursor = 0;
    const auto first = pick(split.train, std::span<const std::size_t>(perm.data(), std::min(bs, n)));
    for (auto& w : model.actnorm_init(model.stack_x(first), model.condition(first)))
      report.warnings.push_back(std::move(w));
  }

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const bool balanced = epoch >= cfg.next_stage_epoch;
    const bool refresh = balanced && weights && cfg.refresh_interval > 0 &&
                         (epoch - cfg.next_stage_epoch) % cfg.refresh_interval == 0;
    if (balanced && (!weights || refresh)) {
      const auto scores = window_nll(model, split.train);
      if (!std::all_of(scores.begin(), scores.end(), [](double v) { return std::isfinite(v); })) {
        report.diverged = true;
        report.message = "non-finite NLL in the balancing pass of epoch " + std::to_string(epoch);
        report.wall_seconds = elapsed();
        throw DivergenceError(report.message, report);
      }
      weights = compute_balanced_weights(scores, cfg.bins);
      if (!report.sampler_stage_epoch) report.sampler_stage_epoch = epoch;
    }
    std::vector<std::size_t> order;
    if (balanced) {
      order = weighted_sample(*weights, per_epoch, derive_seed(cfg.seed, "trainer/sample/" + std::to_string(epoch)));
    } else {
      // draw without replacement from a reshuffled permutation
      while (order.size() < per_epoch) {
        if (cursor == perm.size()) {
          std::shuffle(perm.begin(), perm.end(), order_rng);
          cursor = 0;
        }
        order.push_back(perm[cursor++]);
      }
    }
    report.sampler.push_back(balanced ? "balanced" : "uniform");

    double loss_sum = 0;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::span<const std::size_t> idx(order.data() + start, std::min(bs, order.size() - start));
      const std::size_t chunk = cfg.micro_batch > 0 ? static_cast<std::size_t>(cfg.micro_batch) : idx.size();
      opt.zero_grad();
      for (std::size_t off = 0; off < idx.size(); off += chunk) {
        const auto part = pick(split.train, idx.subspan(off, std::min(chunk, idx.size() - off)));
        const Var loss = model.nll(Var(model.stack_x(part)), model.condition(part), &dropout_rng);
        if (!std::isfinite(loss.item())) {
          report.diverged = true;
          report.message = "NLL became non-finite in epoch " + std::to_string(epoch);
          report.wall_seconds = elapsed();
          throw DivergenceError(report.message, report);
        }
        // chunk means weighted back to the batch mean
        const double w = static_cast<double>(part.size()) / static_cast<double>(idx.size());
        ad::backward(ad::scale(loss, w));
        loss_sum += loss.item() * static_cast<double>(part.size());
      }
      opt.clip_grad_norm(cfg.grad_clip);
      opt.step();
      seen += idx.size();
    }
    report.epoch_nll.push_back(loss_sum / static_cast<double>(seen));
    const double val_nll = val.empty() ? std::numeric_limits<double>::quiet_NaN() : mean_of(window_nll(model, val));
    report.val_nll.push_back(val_nll);
    report.round_trip_error.push_back(round_trip_error(model, probe));
    if (std::isfinite(val_nll) && !(val_nll >= report.best_val_nll)) {
      report.best_val_nll = val_nll;
      report.best_epoch = epoch;
      if (!ckdir.empty()) save_model(model, ckdir / "best.json");
    }
    if (!ckdir.empty() && cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0) {
      char name[32];
      std::snprintf(name, sizeof name, "epoch_%03d.json", epoch);
      save_model(model, ckdir / name);
    }
    if (on_epoch) on_epoch(epoch, report);
  }
  report.final_val_nll = report.val_nll.back();
  report.wall_seconds = elapsed();
  return report;
}

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::string worst_param;
};

/// Compares analytic parameter gradients of the NLL of one window with
/// central differences on a random subsample of scalar parameters.
inline GradCheckResult grad_check(FlowModel& model, const Window& window, double epsilon, std::uint64_t seed,
                                  std::size_t samples = 200,
                                  const std::function<bool(const std::string&)>& filter = {}) {
  require(model.actnorm_ready(), Errc::uninitialized_actnorm, "grad_check needs an initialized model");
  const std::vector<const Window*> one{&window};
  const Mat x = model.stack_x(one);
  const Conditioning c = model.condition(one);
  model.params().zero_grad();
  ad::backward(model.nll(Var(x), c));

  struct Ref {
    std::size_t entry;
    Index offset;
  };
  std::vector<Ref> all;
  auto& entries = model.params().entries();
  for (std::size_t e = 0; e < entries.size(); ++e) {
    if (filter && !filter(entries[e].first)) continue;
    for (Index k = 0; k < entries[e].second.value().size(); ++k) all.push_back({e, k});
  }
  std::mt19937_64 rng(seed);
  std::shuffle(all.begin(), all.end(), rng);
  if (all.size() > samples) all.resize(samples);

  const auto loss = [&] {
    ad::NoGradGuard ng;
    return model.nll(Var(x), c).item();
  };
  GradCheckResult r;
  for (const auto& ref : all) {
    Var p = entries[ref.entry].second;
    const double analytic = p.has_grad() ? p.grad().data()[ref.offset] : 0.0;
    double& slot = p.mutable_value().data()[ref.offset];
    const double orig = slot;
    slot = orig + epsilon;
    const double up = loss();
    slot = orig - epsilon;
    const double down = loss();
    slot = orig;
    const double numeric = (up - down) / (2 * epsilon);
    const double rel = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    if (rel > r.max_rel_error) {
      r.max_rel_error = rel;
      r.worst_param = entries[ref.entry].first + "[" + std::to_string(ref.offset) + "]";
    }
    ++r.checked;
  }
  model.params().zero_grad();
  return r;
}

}  // namespace rcnf
