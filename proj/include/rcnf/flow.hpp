#pragma once

#include <cmath>
#include <numbers>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "rcnf/autodiff.hpp"
#include "rcnf/dataset.hpp"
#include "rcnf/error.hpp"
#include "rcnf/nn.hpp"
#include "rcnf/rcpqnet.hpp"
#include "rcnf/seed.hpp"
#include "rcnf/task_codec.hpp"

namespace rcnf {

using ad::Index;
using ad::Mat;
using ad::Var;

enum class ScoreMode { raw, per_dim };

inline std::string_view to_string(ScoreMode m) { return m == ScoreMode::raw ? "raw" : "per_dim"; }

inline ScoreMode score_mode_from_string(std::string_view s) {
  if (s == "raw") return ScoreMode::raw;
  if (s == "per_dim") return ScoreMode::per_dim;
  throw Error(Errc::invalid_argument, "unknown score mode '" + std::string(s) + "'");
}

/// Points are grouped G at a time into C = 2G channels; G divides N.
inline int default_groups(int points) { return std::gcd(points, 4); }

struct FlowConfig {
  int frames = 12;  // T
  int points = 32;  // N
  int steps = 12;   // K
  int groups = 4;   // G
  int state_dim = 15;
  RcpqConfig net;
  ScoreMode score_mode = ScoreMode::raw;
  bool use_task_embedding = true;
  bool use_robot_state = true;
  std::uint64_t seed = 0;

  int channels() const { return 2 * groups; }
  int dim() const { return frames * points * 2; }
  int half_frames() const { return frames / 2; }

  void validate() const {
    require(frames >= 2 && frames % 2 == 0, Errc::invalid_dimensions, "T must be even and >= 2");
    require(points >= 1, Errc::invalid_dimensions, "N must be >= 1");
    require(steps >= 1, Errc::invalid_dimensions, "K must be >= 1");
    require(groups >= 1 && points % groups == 0, Errc::invalid_dimensions, "G must divide N");
    require(state_dim >= 1, Errc::invalid_dimensions, "state_dim must be >= 1");
    net.validate();
  }
};

/// Per-batch conditioning: normalized robot states (B*T, S), task vectors
/// (B, T) and prior means (B, T*N*2).
struct Conditioning {
  Mat s;
  Mat tau;
  Mat mu;
  Index batch() const { return tau.rows(); }
};

struct ActNorm {
  Var log_scale;  // (1, C); scale = exp(log_scale)
  Var bias;       // (1, C)
  bool initialized = false;
  std::vector<int> flagged_channels;
};

/// W = P L U; see ad::plu_weight.
struct Mixing {
  Var lower, upper, log_diag;
  std::vector<Index> perm;

  double log_abs_det() const { return log_diag.value().sum(); }

  Mat matrix() const {
    ad::NoGradGuard ng;
    return ad::plu_weight(lower, upper, log_diag, perm).value();
  }
};

struct FlowStep {
  ActNorm actnorm;
  Mixing mixing;
  RcpqNet coupling;
  bool condition_on_first = true;
};

struct StepOutput {
  Var y;
  Var log_det;  // (B, 1)
};

struct FlowOutput {
  Var z;
  Var log_det;                   // (B, 1), sum over steps
  std::vector<Var> step_log_dets;  // K entries of (B, 1)
};

struct LatentCode {
  std::vector<double> z;
  double log_det_total = 0.0;
  std::vector<double> mu_task;
};

class FlowModel {
 public:
  FlowModel(const FlowConfig& cfg, TaskCodebook codebook, NormStats norm)
      : cfg_(cfg), codebook_(std::move(codebook)), norm_(std::move(norm)) {
    cfg.validate();
    require(codebook_.dim() == cfg.frames, Errc::invalid_dimensions, "codebook dimension must equal T");
    if (norm_.empty()) norm_ = NormStats::identity(cfg.state_dim);
    require(static_cast<int>(norm_.mean.size()) == cfg.state_dim, Errc::invalid_dimensions,
            "normalization statistics do not match state_dim");
    std::mt19937_64 rng(derive_seed(cfg.seed, "flow/init"));
    const Index c = cfg.channels();
    const RcpqShape shape{cfg.half_frames(), cfg.points, cfg.state_dim, cfg.frames};
    for (int i = 0; i < cfg.steps; ++i) {
      const std::string p = step_path(i);
      FlowStep st;
      st.actnorm.log_scale = params_.add(p + ".actnorm.log_scale", Mat::Zero(1, c));
      st.actnorm.bias = params_.add(p + ".actnorm.bias", Mat::Zero(1, c));
      init_mixing(st.mixing, p, c, rng);
      st.coupling = RcpqNet(params_, p + ".coupling", cfg.net, shape, rng);
      st.condition_on_first = i % 2 == 0;
      steps_.push_back(std::move(st));
    }
  }

  // Parameters are shared handles, so a copy would alias the original.
  FlowModel(const FlowModel&) = delete;
  FlowModel& operator=(const FlowModel&) = delete;
  FlowModel(FlowModel&&) = default;
  FlowModel& operator=(FlowModel&&) = default;

  const FlowConfig& config() const { return cfg_; }
  const TaskCodebook& codebook() const { return codebook_; }
  const NormStats& norm_stats() const { return norm_; }
  nn::ParamSet& params() { return params_; }
  const nn::ParamSet& params() const { return params_; }
  std::vector<FlowStep>& steps() { return steps_; }
  const std::vector<FlowStep>& steps() const { return steps_; }

  static std::string step_path(int i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "step%02d", i);
    return buf;
  }

  bool actnorm_ready() const {
    for (const auto& st : steps_)
      if (!st.actnorm.initialized) return false;
    return true;
  }

  /// Identity flow: unit ActNorm, identity mixing, coupling with gamma = 1 and beta = 0.
  void set_identity() {
    const double a = std::log(std::expm1(1.0 - kGammaFloor));
    const Index n2 = 2 * cfg_.points;
    for (auto& st : steps_) {
      st.actnorm.log_scale.mutable_value().setZero();
      st.actnorm.bias.mutable_value().setZero();
      st.actnorm.initialized = true;
      st.mixing.lower.mutable_value().setZero();
      st.mixing.upper.mutable_value().setZero();
      st.mixing.log_diag.mutable_value().setZero();
      std::iota(st.mixing.perm.begin(), st.mixing.perm.end(), Index{0});
      st.coupling.head().zero();
      st.coupling.head().bias.mutable_value().leftCols(n2).setConstant(a);
    }
  }

  // -------------------------------------------------------------------------
  // Conditioning

  Conditioning condition(std::span<const Window* const> windows) const {
    const Index b = static_cast<Index>(windows.size());
    const int t = cfg_.frames, sd = cfg_.state_dim;
    Conditioning c;
    c.s = Mat::Zero(b * t, sd);
    c.tau = Mat::Zero(b, t);
    c.mu = Mat::Zero(b, cfg_.dim());
    for (Index i = 0; i < b; ++i) {
      const Window& w = *windows[static_cast<std::size_t>(i)];
      check_window(w);
      const auto& emb = embed_task(codebook_, w.task_id);
      if (cfg_.use_robot_state) {
        std::vector<double> s = w.s;
        norm_.apply(s);
        c.s.middleRows(i * t, t) = Eigen::Map<const Mat>(s.data(), t, sd);
      }
      if (cfg_.use_task_embedding) {
        c.tau.row(i) = Eigen::Map<const Eigen::RowVectorXd>(emb.vector.data(), t);
        const auto mu = prior_mean(emb, t, cfg_.points);
        c.mu.row(i) = Eigen::Map<const Eigen::RowVectorXd>(mu.data(), cfg_.dim());
      }
    }
    return c;
  }

  Conditioning condition(const std::vector<Window>& windows) const {
    std::vector<const Window*> ptrs;
    for (const auto& w : windows) ptrs.push_back(&w);
    return condition(ptrs);
  }

  Mat stack_x(std::span<const Window* const> windows) const {
    Mat x(static_cast<Index>(windows.size()), cfg_.dim());
    for (std::size_t i = 0; i < windows.size(); ++i) {
      check_window(*windows[i]);
      x.row(static_cast<Index>(i)) = Eigen::Map<const Eigen::RowVectorXd>(windows[i]->x.data(), cfg_.dim());
    }
    return x;
  }

  Mat stack_x(const std::vector<Window>& windows) const {
    std::vector<const Window*> ptrs;
    for (const auto& w : windows) ptrs.push_back(&w);
    return stack_x(ptrs);
  }

  // -------------------------------------------------------------------------
  // Steps

  StepOutput step_forward(int i, const Var& y_in, const Conditioning& c, std::mt19937_64* dropout_rng = nullptr) const {
    const FlowStep& st = step(i);
    require(st.actnorm.initialized, Errc::uninitialized_actnorm, "ActNorm of step " + std::to_string(i) +
                                                                     " is not initialized");
    const Index b = y_in.rows(), d = cfg_.dim(), ch = cfg_.channels();
    require(y_in.cols() == d && c.batch() == b, Errc::shape_mismatch, "flow input has the wrong shape");
    const double mult = static_cast<double>(d / ch);

    Var h = ad::reshape(y_in, b * d / ch, ch);
    h = ad::add_row(ad::mul_row(h, ad::exp(st.actnorm.log_scale)), st.actnorm.bias);
    const Var w = ad::plu_weight(st.mixing.lower, st.mixing.upper, st.mixing.log_diag, st.mixing.perm);
    h = ad::reshape(ad::linear(h, w), b, d);
    const Var vol = ad::scale(ad::add(ad::sum(st.actnorm.log_scale), ad::sum(st.mixing.log_diag)), mult);

    const Index half = d / 2;
    const Index cond_off = st.condition_on_first ? 0 : half;
    const Index tr_off = st.condition_on_first ? half : 0;
    const Var xb = ad::slice_cols(h, cond_off, half);
    const Var xt = ad::slice_cols(h, tr_off, half);
    const auto cp = st.coupling.coupling_params(xb, half_states(c, !st.condition_on_first), Var(c.tau), b,
                                                dropout_rng);
    const Var yt = ad::add(ad::mul(cp.gamma, xt), cp.beta);
    const Var y = st.condition_on_first ? ad::concat_cols({xb, yt}) : ad::concat_cols({yt, xb});
    const Var log_det = ad::add(ad::sum_cols(ad::log(cp.gamma)), ad::tile_rows(ad::reshape(vol, 1, 1), b));
    return {y, log_det};
  }

  Mat step_inverse(int i, const Mat& y_out, const Conditioning& c) const {
    ad::NoGradGuard ng;
    const FlowStep& st = step(i);
    require(st.actnorm.initialized, Errc::uninitialized_actnorm, "ActNorm of step " + std::to_string(i) +
                                                                     " is not initialized");
    require(st.mixing.log_abs_det() > std::log(1e-12), Errc::singular_mixing,
            "mixing matrix of step " + std::to_string(i) + " is singular");
    const Index b = y_out.rows(), d = cfg_.dim(), ch = cfg_.channels(), half = d / 2;
    require(y_out.cols() == d && c.batch() == b, Errc::shape_mismatch, "flow output has the wrong shape");
    const Index cond_off = st.condition_on_first ? 0 : half;
    const Index tr_off = st.condition_on_first ? half : 0;
    const Mat yb = y_out.middleCols(cond_off, half);
    const auto cp = st.coupling.coupling_params(Var(yb), half_states(c, !st.condition_on_first), Var(c.tau), b);
    Mat h(b, d);
    h.middleCols(cond_off, half) = yb;
    h.middleCols(tr_off, half) = ((y_out.middleCols(tr_off, half) - cp.beta.value()).array() / cp.gamma.value().array()).matrix();

    Mat rows = Eigen::Map<const Mat>(h.data(), b * d / ch, ch);
    const Mat w = st.mixing.matrix();
    // rows = x W^T  =>  x = rows W^{-T}
    Mat x = w.partialPivLu().solve(rows.transpose()).transpose();
    const Eigen::RowVectorXd scale = st.actnorm.log_scale.value().array().exp();
    for (Index r = 0; r < x.rows(); ++r)
      x.row(r) = ((x.row(r) - st.actnorm.bias.value()).array() / scale.array()).matrix();
    return Eigen::Map<const Mat>(x.data(), b, d);
  }

  // -------------------------------------------------------------------------
  // Whole flow

  FlowOutput forward(const Var& x, const Conditioning& c, std::mt19937_64* dropout_rng = nullptr) const {
    FlowOutput out;
    Var y = x;
    for (int i = 0; i < cfg_.steps; ++i) {
      StepOutput so = step_forward(i, y, c, dropout_rng);
      y = so.y;
      out.step_log_dets.push_back(so.log_det);
      out.log_det = i == 0 ? so.log_det : ad::add(out.log_det, so.log_det);
    }
    out.z = y;
    return out;
  }

  Mat inverse(const Mat& z, const Conditioning& c) const {
    Mat y = z;
    for (int i = cfg_.steps - 1; i >= 0; --i) y = step_inverse(i, y, c);
    return y;
  }

  static double log_normalizer(Index d) { return -0.5 * static_cast<double>(d) * std::log(2.0 * std::numbers::pi); }

  /// Per-window log-density (B, 1).
  Var log_prob(const FlowOutput& f, const Conditioning& c) const {
    const Var quad = ad::sum_cols(ad::square(ad::sub(f.z, Var(c.mu))));
    return ad::add_scalar(ad::sub(f.log_det, ad::scale(quad, 0.5)), log_normalizer(cfg_.dim()));
  }

  Var log_prob(const Var& x, const Conditioning& c, std::mt19937_64* dropout_rng = nullptr) const {
    return log_prob(forward(x, c, dropout_rng), c);
  }

  /// Mean negative log-likelihood per window.
  Var nll(const Var& x, const Conditioning& c, std::mt19937_64* dropout_rng = nullptr) const {
    return ad::scale(ad::mean(log_prob(x, c, dropout_rng)), -1.0);
  }

  /// Data-dependent ActNorm initialization, step by step on one batch.
  /// Returns a warning per zero-variance channel.
  std::vector<std::string> actnorm_init(const Mat& x, const Conditioning& c) {
    require(x.rows() > 0, Errc::invalid_argument, "ActNorm initialization needs a nonempty batch");
    for (const auto& st : steps_)
      require(!st.actnorm.initialized, Errc::already_initialized, "ActNorm is already initialized");
    ad::NoGradGuard ng;
    std::vector<std::string> warnings;
    Mat y = x;
    for (int i = 0; i < cfg_.steps; ++i) {
      for (int ch : init_actnorm_step(i, y)) {
        warnings.push_back("step " + std::to_string(i) + " channel " + std::to_string(ch) +
                           " has zero variance; using scale 1");
      }
      y = step_forward(i, Var(y), c).y.value();
    }
    return warnings;
  }

  /// Sets one step's ActNorm from the statistics of its input batch.
  std::vector<int> init_actnorm_step(int i, const Mat& y_in) {
    FlowStep& st = steps_.at(static_cast<std::size_t>(i));
    require(!st.actnorm.initialized, Errc::already_initialized, "ActNorm is already initialized");
    require(y_in.rows() > 0 && y_in.cols() == cfg_.dim(), Errc::shape_mismatch, "bad ActNorm batch");
    const Index ch = cfg_.channels();
    const Mat rows = Eigen::Map<const Mat>(y_in.data(), y_in.rows() * cfg_.dim() / ch, ch);
    const Eigen::RowVectorXd mean = rows.colwise().mean();
    const Eigen::RowVectorXd var = (rows.rowwise() - mean).array().square().colwise().mean();
    st.actnorm.flagged_channels.clear();
    for (Index k = 0; k < ch; ++k) {
      if (var(k) < 1e-12) {
        st.actnorm.log_scale.mutable_value()(0, k) = 0.0;
        st.actnorm.bias.mutable_value()(0, k) = -mean(k);
        st.actnorm.flagged_channels.push_back(static_cast<int>(k));
      } else {
        const double ls = -0.5 * std::log(var(k));
        st.actnorm.log_scale.mutable_value()(0, k) = ls;
        st.actnorm.bias.mutable_value()(0, k) = -mean(k) * std::exp(ls);
      }
    }
    st.actnorm.initialized = true;
    return st.actnorm.flagged_channels;
  }

  // -------------------------------------------------------------------------
  // Single-window density and score

  std::pair<double, LatentCode> log_likelihood(std::span<const double> x, std::span<const double> s,
                                               const std::string& task_id) const {
    require(static_cast<int>(x.size()) == cfg_.dim(), Errc::shape_mismatch, "x has the wrong size");
    require(static_cast<int>(s.size()) == cfg_.frames * cfg_.state_dim, Errc::shape_mismatch,
            "s has the wrong size");
    Window w;
    w.x.assign(x.begin(), x.end());
    w.s.assign(s.begin(), s.end());
    w.task_id = task_id;
    w.frames = cfg_.frames;
    w.points = cfg_.points;
    w.state_dim = cfg_.state_dim;
    return log_likelihood(w);
  }

  std::pair<double, LatentCode> log_likelihood(const Window& w) const {
    ad::NoGradGuard ng;
    const Window* ptr = &w;
    const Conditioning c = condition(std::span<const Window* const>(&ptr, 1));
    const FlowOutput f = forward(Var(stack_x(std::span<const Window* const>(&ptr, 1))), c);
    LatentCode code;
    code.z.assign(f.z.value().data(), f.z.value().data() + cfg_.dim());
    code.log_det_total = f.log_det.item();
    code.mu_task.assign(c.mu.data(), c.mu.data() + cfg_.dim());
    return {log_prob(f, c).item(), std::move(code)};
  }

  double score_from_logp(double logp) const {
    return cfg_.score_mode == ScoreMode::per_dim ? -logp / cfg_.dim() : -logp;
  }

  double anomaly_score(const Window& w) const { return score_from_logp(log_likelihood(w).first); }

  double anomaly_score(std::span<const double> x, std::span<const double> s, const std::string& task_id) const {
    return score_from_logp(log_likelihood(x, s, task_id).first);
  }

  /// Batched scores, same values as anomaly_score per window.
  std::vector<double> anomaly_scores(std::span<const Window* const> windows, std::size_t batch = 16) const {
    ad::NoGradGuard ng;
    std::vector<double> out;
    out.reserve(windows.size());
    for (std::size_t start = 0; start < windows.size(); start += batch) {
      const auto part = windows.subspan(start, std::min(batch, windows.size() - start));
      const Conditioning c = condition(part);
      const Var lp = log_prob(Var(stack_x(part)), c);
      for (Index i = 0; i < lp.rows(); ++i) out.push_back(score_from_logp(lp.value()(i, 0)));
    }
    return out;
  }

  std::vector<double> anomaly_scores(const std::vector<Window>& windows, std::size_t batch = 16) const {
    std::vector<const Window*> ptrs;
    for (const auto& w : windows) ptrs.push_back(&w);
    return anomaly_scores(ptrs, batch);
  }

 private:
  const FlowStep& step(int i) const {
    require(i >= 0 && i < cfg_.steps, Errc::invalid_argument, "step index out of range");
    return steps_[static_cast<std::size_t>(i)];
  }

  void check_window(const Window& w) const {
    require(w.frames == cfg_.frames && w.points == cfg_.points && w.state_dim == cfg_.state_dim &&
                static_cast<int>(w.x.size()) == cfg_.dim() &&
                static_cast<int>(w.s.size()) == cfg_.frames * cfg_.state_dim,
            Errc::shape_mismatch, "window shape does not match the model");
  }

  /// Robot states of the frames in one temporal half, (B*T/2, S).
  Var half_states(const Conditioning& c, bool first_half) const {
    const Index b = c.batch(), t = cfg_.frames, f = cfg_.half_frames();
    const Index off = first_half ? 0 : f;
    Mat out(b * f, cfg_.state_dim);
    for (Index i = 0; i < b; ++i) out.middleRows(i * f, f) = c.s.middleRows(i * t + off, f);
    return Var(std::move(out));
  }

  void init_mixing(Mixing& m, const std::string& path, Index c, std::mt19937_64& rng) {
    // random rotation, factored so that W = P L U with a positive U diagonal
    std::normal_distribution<double> g(0.0, 1.0);
    Mat a(c, c);
    for (Index i = 0; i < a.size(); ++i) a.data()[i] = g(rng);
    Mat q = Eigen::HouseholderQR<Mat>(a).householderQ();
    Eigen::PartialPivLU<Mat> lu(q);
    Mat lu_m = lu.matrixLU();
    // flip columns so U has a positive diagonal; q stays orthogonal
    for (Index k = 0; k < c; ++k)
      if (lu_m(k, k) < 0)
        for (Index r = 0; r <= k; ++r) lu_m(r, k) = -lu_m(r, k);
    // P_lu q = L U  =>  q.row(perm_index[i]) = (L U).row(i)
    const auto& pidx = lu.permutationP().indices();
    m.perm.assign(static_cast<std::size_t>(c), 0);
    for (Index i = 0; i < c; ++i) m.perm[static_cast<std::size_t>(pidx(i))] = i;
    Mat lower = Mat::Zero(c, c), upper = Mat::Zero(c, c), logd(1, c);
    for (Index i = 0; i < c; ++i)
      for (Index j = 0; j < c; ++j) {
        if (j < i) lower(i, j) = lu_m(i, j);
        if (j > i) upper(i, j) = lu_m(i, j);
      }
    for (Index k = 0; k < c; ++k) logd(0, k) = std::log(lu_m(k, k));
    m.lower = params_.add(path + ".mixing.lower", lower);
    m.upper = params_.add(path + ".mixing.upper", upper);
    m.log_diag = params_.add(path + ".mixing.log_diag", logd);
  }

  FlowConfig cfg_;
  TaskCodebook codebook_;
  NormStats norm_;
  nn::ParamSet params_;
  std::vector<FlowStep> steps_;
};

}  // namespace rcnf
