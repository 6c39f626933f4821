#pragma once

#include <random>
#include <string>
#include <utility>
#include <vector>

#include "rcnf/autodiff.hpp"
#include "rcnf/error.hpp"
#include "rcnf/nn.hpp"

namespace rcnf {

struct RcpqConfig {
  int d_model = 64;
  int heads = 4;
  int gru_layers = 1;
  int mlp_hidden = 128;
  double dropout = 0.0;

  void validate() const {
    require(d_model > 0 && heads > 0 && gru_layers > 0 && mlp_hidden > 0, Errc::invalid_argument,
            "RCPQNet widths must be positive");
    require(d_model % heads == 0, Errc::invalid_argument, "d_model must be divisible by heads");
    require(dropout >= 0.0 && dropout < 1.0, Errc::invalid_argument, "dropout must be in [0, 1)");
  }
};

/// Dimensions of one coupling: `frames` is the half-window length T/2.
struct RcpqShape {
  int frames = 6;
  int points = 32;
  int state_dim = 15;
  int tau_dim = 12;
};

inline constexpr double kGammaFloor = 1e-3;

struct PointFeatures {
  ad::Var shape_frames;     // (B*F, d) pooled shape-branch features before the GRU
  ad::Var residual_frames;  // (B*F, d) pooled residual-branch features before the GRU
  ad::Var shape_seq;        // (B*F, d) after the shape GRU
  ad::Var residual_seq;     // (B*F, d) after the residual GRU
  std::vector<bool> degenerate;  // per frame: radius fell back to 1
};

struct CouplingParams {
  ad::Var gamma;  // (B, F*N*2), > 0
  ad::Var beta;   // (B, F*N*2)
};

/// Coupling-parameter network. Robot-state query tokens, FiLM-modulated by
/// the task embedding, cross-attend to memory tokens built from two point-set
/// branches: a shape branch on per-frame centered and RMS-normalized points,
/// and a positional-residual branch on raw points plus the discarded
/// centroid and radius. Each branch pools a per-point MLP over the N points,
/// runs a GRU over frames, and the concatenated token sequence goes through a
/// transformer encoder layer to form the memory.
class RcpqNet {
 public:
  RcpqNet() = default;

  RcpqNet(nn::ParamSet& ps, const std::string& path, const RcpqConfig& cfg, const RcpqShape& shape,
          std::mt19937_64& rng)
      : cfg_(cfg), shape_(shape) {
    cfg.validate();
    const ad::Index d = cfg.d_model, h = cfg.mlp_hidden, f = shape.frames;
    shape_mlp_ = nn::Linear(ps, path + ".shape_mlp", 2, h, rng);
    shape_proj_ = nn::Linear(ps, path + ".shape_proj", h, d, rng);
    residual_mlp_ = nn::Linear(ps, path + ".residual_mlp", 5, h, rng);
    residual_proj_ = nn::Linear(ps, path + ".residual_proj", h, d, rng);
    for (int l = 0; l < cfg.gru_layers; ++l) {
      shape_gru_.emplace_back(ps, path + ".shape_gru" + std::to_string(l), d, d, rng);
      residual_gru_.emplace_back(ps, path + ".residual_gru" + std::to_string(l), d, d, rng);
    }
    memory_pos_ = ps.add(path + ".memory_pos", nn::uniform_init(2 * f, d, 0.1, rng));
    encoder_ = nn::TransformerLayer(ps, path + ".encoder", d, cfg.heads, 2 * d, cfg.dropout, rng);
    query_in_ = nn::Linear(ps, path + ".query_in", shape.state_dim, d, rng);
    // FiLM starts as the identity map: zero weights, scale bias 1, shift bias 0
    film_ = nn::Linear(ps, path + ".film", shape.tau_dim, 2 * d, rng);
    film_.weight.mutable_value().setZero();
    film_.bias.mutable_value().setZero();
    film_.bias.mutable_value().leftCols(d).setOnes();
    query_pos_ = ps.add(path + ".query_pos", nn::uniform_init(f, d, 0.1, rng));
    cross_ = nn::TransformerLayer(ps, path + ".cross", d, cfg.heads, 2 * d, cfg.dropout, rng);
    head_ = nn::Linear(ps, path + ".head", d, 4 * shape.points, rng);
    head_.zero();
    initialized_ = true;
  }

  const RcpqConfig& config() const { return cfg_; }
  const RcpqShape& shape() const { return shape_; }
  bool initialized() const { return initialized_; }
  nn::Linear& head() { return head_; }
  nn::Linear& film_map() { return film_; }

  /// x_b is (B, F*N*2).
  PointFeatures encode_points(const ad::Var& xb, ad::Index batch) const {
    check_ready();
    const ad::Index n = shape_.points, f = shape_.frames;
    require(xb.rows() == batch && xb.cols() == f * n * 2, Errc::shape_mismatch, "x_b has the wrong shape");
    const ad::Var pts = ad::reshape(xb, batch * f * n, 2);
    const ad::Var centroid = ad::mean_row_groups(pts, n);
    const ad::Var centered = ad::sub(pts, ad::repeat_rows(centroid, n));
    const ad::Var mean_sq = ad::mean_row_groups(ad::sum_cols(ad::square(centered)), n);
    const ad::Var radius = ad::safe_rms_radius(mean_sq);
    const ad::Var radius_pp = ad::repeat_rows(radius, n);

    PointFeatures out;
    out.degenerate.resize(static_cast<std::size_t>(batch * f));
    for (ad::Index i = 0; i < batch * f; ++i) out.degenerate[static_cast<std::size_t>(i)] = mean_sq.value()(i, 0) < 1e-18;

    // The last MLP layer is linear, so pooling before it equals pooling after it.
    const ad::Var normalized = ad::div_col(centered, radius_pp);
    out.shape_frames = shape_proj_(ad::mean_row_groups(ad::gelu(shape_mlp_(normalized)), n));
    const ad::Var residual_in = ad::concat_cols({pts, ad::repeat_rows(centroid, n), radius_pp});
    out.residual_frames = residual_proj_(ad::mean_row_groups(ad::gelu(residual_mlp_(residual_in)), n));

    out.shape_seq = out.shape_frames;
    for (const auto& g : shape_gru_) out.shape_seq = g(out.shape_seq, batch, f);
    out.residual_seq = out.residual_frames;
    for (const auto& g : residual_gru_) out.residual_seq = g(out.residual_seq, batch, f);
    return out;
  }

  /// robot_features is (B*F, d), tau is (B, T); FiLM parameters are shared across frames.
  ad::Var film_modulate(const ad::Var& robot_features, const ad::Var& tau, ad::Index batch) const {
    check_ready();
    const ad::Index d = cfg_.d_model;
    require(robot_features.cols() == d && robot_features.rows() % batch == 0, Errc::shape_mismatch,
            "robot features have the wrong shape");
    require(tau.rows() == batch && tau.cols() == shape_.tau_dim, Errc::shape_mismatch, "tau has the wrong shape");
    const ad::Index frames = robot_features.rows() / batch;
    const ad::Var p = film_(tau);
    const ad::Var scale = ad::repeat_rows(ad::slice_cols(p, 0, d), frames);
    const ad::Var shift = ad::repeat_rows(ad::slice_cols(p, d, d), frames);
    return ad::add(ad::mul(robot_features, scale), shift);
  }

  /// x_b (B, F*N*2), robot states of the transformed frames (B*F, state_dim),
  /// tau (B, T). gamma = softplus(a) + kGammaFloor.
  CouplingParams coupling_params(const ad::Var& xb, const ad::Var& states, const ad::Var& tau, ad::Index batch,
                                 std::mt19937_64* dropout_rng = nullptr) const {
    check_ready();
    const ad::Index f = shape_.frames, n = shape_.points;
    require(states.rows() == batch * f && states.cols() == shape_.state_dim, Errc::shape_mismatch,
            "robot state block has the wrong shape");
    const PointFeatures pf = encode_points(xb, batch);

    const ad::Var both = ad::concat_rows({pf.shape_seq, pf.residual_seq});
    std::vector<ad::Index> order(static_cast<std::size_t>(2 * batch * f));
    for (ad::Index b = 0; b < batch; ++b)
      for (ad::Index j = 0; j < 2 * f; ++j)
        order[static_cast<std::size_t>(b * 2 * f + j)] = j < f ? b * f + j : batch * f + b * f + (j - f);
    ad::Var memory = ad::add(ad::gather_rows(both, std::move(order)), ad::tile_rows(memory_pos_, batch));
    memory = encoder_(memory, memory, batch, 2 * f, 2 * f, dropout_rng);

    ad::Var query = film_modulate(query_in_(states), tau, batch);
    query = ad::add(query, ad::tile_rows(query_pos_, batch));
    const ad::Var decoded = cross_(query, memory, batch, f, 2 * f, dropout_rng);

    const ad::Var raw = head_(decoded);  // (B*F, 4N)
    const ad::Var a = ad::reshape(ad::slice_cols(raw, 0, 2 * n), batch, f * 2 * n);
    const ad::Var b = ad::reshape(ad::slice_cols(raw, 2 * n, 2 * n), batch, f * 2 * n);
    return {ad::add_scalar(ad::softplus(a), kGammaFloor), b};
  }

 private:
  void check_ready() const {
    require(initialized_, Errc::uninitialized_weights, "RCPQNet weights are not initialized");
  }

  RcpqConfig cfg_;
  RcpqShape shape_;
  bool initialized_ = false;
  nn::Linear shape_mlp_, shape_proj_, residual_mlp_, residual_proj_;
  std::vector<nn::Gru> shape_gru_, residual_gru_;
  ad::Var memory_pos_, query_pos_;
  nn::TransformerLayer encoder_, cross_;
  nn::Linear query_in_, film_, head_;
};

}  // namespace rcnf
