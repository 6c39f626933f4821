#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "rcnf/flow.hpp"

namespace rcnf::testing {

inline Window random_window(const FlowConfig& cfg, const TaskCodebook& cb, std::mt19937_64& rng, double spread = 1.0) {
  std::normal_distribution<double> g(0.0, spread);
  std::uniform_int_distribution<std::size_t> pick(0, cb.size() - 1);
  Window w;
  w.frames = cfg.frames;
  w.points = cfg.points;
  w.state_dim = cfg.state_dim;
  w.task_id = cb.embeddings()[pick(rng)].task_id;
  w.x.resize(static_cast<std::size_t>(cfg.dim()));
  for (auto& v : w.x) v = g(rng);
  w.s.resize(static_cast<std::size_t>(cfg.frames * cfg.state_dim));
  for (auto& v : w.s) v = g(rng);
  return w;
}

inline std::vector<Window> random_windows(const FlowConfig& cfg, const TaskCodebook& cb, int count,
                                          std::uint64_t seed, double spread = 1.0) {
  std::mt19937_64 rng(seed);
  std::vector<Window> ws;
  for (int i = 0; i < count; ++i) ws.push_back(random_window(cfg, cb, rng, spread));
  return ws;
}

inline FlowConfig tiny_config(int steps, std::uint64_t seed = 0) {
  FlowConfig cfg;
  cfg.frames = 4;
  cfg.points = 2;
  cfg.groups = default_groups(2);
  cfg.steps = steps;
  cfg.state_dim = 3;
  cfg.net.d_model = 8;
  cfg.net.heads = 2;
  cfg.net.mlp_hidden = 8;
  cfg.seed = seed;
  return cfg;
}

/// Perturbs every parameter (including the zero-initialized heads and FiLM)
/// so that the flow is far from the identity, then runs ActNorm init.
inline void randomize(FlowModel& m, std::uint64_t seed, double scale = 0.3) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, scale);
  for (auto& [name, v] : m.params().entries()) {
    if (name.find("actnorm") != std::string::npos) continue;
    auto& val = v.mutable_value();
    for (Eigen::Index i = 0; i < val.size(); ++i) val.data()[i] += g(rng);
  }
  const auto batch = random_windows(m.config(), m.codebook(), 16, seed + 1);
  m.actnorm_init(m.stack_x(batch), m.condition(batch));
}

/// Central-difference Jacobian of a map R^d -> R^d.
template <class F>
Eigen::MatrixXd numeric_jacobian(F&& f, const Eigen::VectorXd& x, double h = 1e-5) {
  const Eigen::Index d = x.size();
  Eigen::MatrixXd j(d, d);
  for (Eigen::Index k = 0; k < d; ++k) {
    Eigen::VectorXd xp = x, xm = x;
    xp(k) += h;
    xm(k) -= h;
    j.col(k) = (f(xp) - f(xm)) / (2 * h);
  }
  return j;
}

inline double log_abs_det(const Eigen::MatrixXd& j) {
  // LU with partial pivoting: log|det| = sum log|u_ii|
  const Eigen::PartialPivLU<Eigen::MatrixXd> lu(j);
  return lu.matrixLU().diagonal().array().abs().log().sum();
}

}  // namespace rcnf::testing
