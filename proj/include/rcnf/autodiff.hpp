#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// matrices. A Var is a handle to a graph node; ops record a backward closure
// when grad mode is on and any input requires a gradient. backward() runs the
// closures in reverse topological order, accumulating into Node::grad.

#include <cmath>
#include <functional>
#include <memory>
#include <numbers>
#include <random>
#include <span>
#include <unordered_set>
#include <vector>

#include <Eigen/Dense>

#include "rcnf/error.hpp"

namespace rcnf::ad {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

struct Node {
  Mat value;
  Mat grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  void add_grad(const Mat& g) {
    if (grad.size() == 0)
      grad = g;
    else
      grad += g;
  }
};

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

class NoGradGuard {
 public:
  NoGradGuard() : prev_(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

class Var {
 public:
  Var() = default;
  explicit Var(Mat value, bool requires_grad = false) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  static Var param(Mat value) { return Var(std::move(value), true); }
  static Var scalar(double v) { return Var(Mat::Constant(1, 1, v)); }

  bool defined() const { return static_cast<bool>(node_); }
  const Mat& value() const { return node_->value; }
  Mat& mutable_value() { return node_->value; }
  const Mat& grad() const { return node_->grad; }
  bool has_grad() const { return node_->grad.size() != 0; }
  void zero_grad() { node_->grad.resize(0, 0); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  double item() const { return node_->value(0, 0); }

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& shared() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

inline bool any_requires_grad(std::span<const Var> vs) {
  for (const auto& v : vs)
    if (v.requires_grad()) return true;
  return false;
}

template <class F>
Var record(Mat value, std::vector<Var> inputs, F&& fn) {
  Var out(std::move(value));
  if (!grad_mode() || !any_requires_grad(inputs)) return out;
  Node* n = out.node();
  n->requires_grad = true;
  for (auto& v : inputs) n->inputs.push_back(v.shared());
  n->backward_fn = std::forward<F>(fn);
  return out;
}

inline void accumulate(const Var& v, const Mat& g) {
  if (v.requires_grad()) v.node()->add_grad(g);
}

inline void check(bool cond, const char* what) {
  if (!cond) throw Error(Errc::shape_mismatch, what);
}

}  // namespace detail

/// Seeds d(root)/d(root) with ones and propagates to every reachable node.
inline void backward(const Var& root) {
  if (!root.requires_grad()) return;
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.node(), 0}};
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      Node* child = n->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.push_back({child, 0});
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  root.node()->add_grad(Mat::Ones(root.rows(), root.cols()));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->grad.size() != 0) n->backward_fn(*n);
  }
}

// ---------------------------------------------------------------------------
// Linear algebra

inline Var matmul(const Var& a, const Var& b) {
  detail::check(a.cols() == b.rows(), "matmul: inner dimensions differ");
  return detail::record(a.value() * b.value(), {a, b}, [a, b](Node& self) {
    detail::accumulate(a, self.grad * b.value().transpose());
    detail::accumulate(b, a.value().transpose() * self.grad);
  });
}

/// x W^T + b with W stored (out, in) and b as a (1, out) row.
inline Var linear(const Var& x, const Var& w, const Var& b) {
  detail::check(x.cols() == w.cols() && b.cols() == w.rows(), "linear: shape mismatch");
  Mat y = x.value() * w.value().transpose();
  y.rowwise() += b.value().row(0);
  return detail::record(std::move(y), {x, w, b}, [x, w, b](Node& self) {
    detail::accumulate(x, self.grad * w.value());
    detail::accumulate(w, self.grad.transpose() * x.value());
    detail::accumulate(b, self.grad.colwise().sum());
  });
}

inline Var linear(const Var& x, const Var& w) {
  detail::check(x.cols() == w.cols(), "linear: shape mismatch");
  return detail::record(x.value() * w.value().transpose(), {x, w}, [x, w](Node& self) {
    detail::accumulate(x, self.grad * w.value());
    detail::accumulate(w, self.grad.transpose() * x.value());
  });
}

// ---------------------------------------------------------------------------
// Elementwise

inline Var add(const Var& a, const Var& b) {
  detail::check(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
  return detail::record(a.value() + b.value(), {a, b}, [a, b](Node& self) {
    detail::accumulate(a, self.grad);
    detail::accumulate(b, self.grad);
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::check(a.rows() == b.rows() && a.cols() == b.cols(), "sub: shape mismatch");
  return detail::record(a.value() - b.value(), {a, b}, [a, b](Node& self) {
    detail::accumulate(a, self.grad);
    detail::accumulate(b, -self.grad);
  });
}

inline Var mul(const Var& a, const Var& b) {
  detail::check(a.rows() == b.rows() && a.cols() == b.cols(), "mul: shape mismatch");
  return detail::record(a.value().cwiseProduct(b.value()), {a, b}, [a, b](Node& self) {
    detail::accumulate(a, self.grad.cwiseProduct(b.value()));
    detail::accumulate(b, self.grad.cwiseProduct(a.value()));
  });
}

inline Var div(const Var& a, const Var& b) {
  detail::check(a.rows() == b.rows() && a.cols() == b.cols(), "div: shape mismatch");
  Mat y = a.value().cwiseQuotient(b.value());
  return detail::record(y, {a, b}, [a, b, y](Node& self) {
    detail::accumulate(a, self.grad.cwiseQuotient(b.value()));
    detail::accumulate(b, -self.grad.cwiseProduct(y).cwiseQuotient(b.value()));
  });
}

inline Var scale(const Var& a, double c) {
  return detail::record(a.value() * c, {a}, [a, c](Node& self) { detail::accumulate(a, self.grad * c); });
}

inline Var add_scalar(const Var& a, double c) {
  return detail::record((a.value().array() + c).matrix(), {a}, [a](Node& self) { detail::accumulate(a, self.grad); });
}

inline Var square(const Var& a) {
  return detail::record(a.value().cwiseAbs2(), {a},
                        [a](Node& self) { detail::accumulate(a, 2.0 * self.grad.cwiseProduct(a.value())); });
}

inline Var exp(const Var& a) {
  Mat y = a.value().array().exp().matrix();
  return detail::record(y, {a}, [a, y](Node& self) { detail::accumulate(a, self.grad.cwiseProduct(y)); });
}

inline Var log(const Var& a) {
  return detail::record(a.value().array().log().matrix(), {a},
                        [a](Node& self) { detail::accumulate(a, self.grad.cwiseQuotient(a.value())); });
}

namespace detail {

/// tanh through the vectorized exponential; saturates cleanly at +-1.
template <class Derived>
Mat fast_tanh(const Eigen::ArrayBase<Derived>& u) {
  return (1.0 - 2.0 / ((2.0 * u).exp() + 1.0)).matrix();
}

}  // namespace detail

inline Var sigmoid(const Var& a) {
  Mat y = (1.0 / (1.0 + (-a.value().array()).exp())).matrix();
  return detail::record(y, {a}, [a, y](Node& self) {
    detail::accumulate(a, (self.grad.array() * y.array() * (1.0 - y.array())).matrix());
  });
}

inline Var tanh(const Var& a) {
  Mat y = detail::fast_tanh(a.value().array());
  return detail::record(y, {a}, [a, y](Node& self) {
    detail::accumulate(a, (self.grad.array() * (1.0 - y.array().square())).matrix());
  });
}

/// log(1 + e^x), evaluated stably.
inline Var softplus(const Var& a) {
  Mat y = a.value().unaryExpr([](double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); });
  return detail::record(y, {a}, [a](Node& self) {
    Mat s = a.value().unaryExpr([](double x) { return 1.0 / (1.0 + std::exp(-x)); });
    detail::accumulate(a, self.grad.cwiseProduct(s));
  });
}

/// tanh-approximated GELU.
inline Var gelu(const Var& a) {
  static constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  static constexpr double c = 0.044715;
  Mat th = detail::fast_tanh(k * (a.value().array() + c * a.value().array().cube()));
  Mat y = (0.5 * a.value().array() * (1.0 + th.array())).matrix();
  return detail::record(y, {a}, [a, th](Node& self) {
    const auto x = a.value().array();
    const auto t = th.array();
    Mat d = (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t.square()) * k * (1.0 + 3.0 * c * x.square())).matrix();
    detail::accumulate(a, self.grad.cwiseProduct(d));
  });
}

/// Inverted dropout; identity when p == 0 or grad mode is off.
inline Var dropout(const Var& a, double p, std::mt19937_64& rng) {
  if (p <= 0.0 || !grad_mode()) return a;
  std::bernoulli_distribution keep(1.0 - p);
  Mat mask(a.rows(), a.cols());
  for (Index i = 0; i < mask.size(); ++i) mask.data()[i] = keep(rng) ? 1.0 / (1.0 - p) : 0.0;
  return detail::record(a.value().cwiseProduct(mask), {a},
                        [a, mask](Node& self) { detail::accumulate(a, self.grad.cwiseProduct(mask)); });
}

// ---------------------------------------------------------------------------
// Broadcasting and reductions

/// a (r, c) plus a (1, c) row broadcast over rows.
inline Var add_row(const Var& a, const Var& row) {
  detail::check(row.rows() == 1 && row.cols() == a.cols(), "add_row: shape mismatch");
  Mat y = a.value();
  y.rowwise() += row.value().row(0);
  return detail::record(std::move(y), {a, row}, [a, row](Node& self) {
    detail::accumulate(a, self.grad);
    detail::accumulate(row, self.grad.colwise().sum());
  });
}

/// a (r, c) times a (1, c) row broadcast over rows.
inline Var mul_row(const Var& a, const Var& row) {
  detail::check(row.rows() == 1 && row.cols() == a.cols(), "mul_row: shape mismatch");
  Mat y = a.value() * row.value().row(0).asDiagonal();
  return detail::record(std::move(y), {a, row}, [a, row](Node& self) {
    detail::accumulate(a, self.grad * row.value().row(0).asDiagonal());
    detail::accumulate(row, self.grad.cwiseProduct(a.value()).colwise().sum());
  });
}

/// a (r, c) times an (r, 1) column broadcast over columns.
inline Var mul_col(const Var& a, const Var& col) {
  detail::check(col.cols() == 1 && col.rows() == a.rows(), "mul_col: shape mismatch");
  Mat y = col.value().col(0).asDiagonal() * a.value();
  return detail::record(std::move(y), {a, col}, [a, col](Node& self) {
    detail::accumulate(a, col.value().col(0).asDiagonal() * self.grad);
    detail::accumulate(col, self.grad.cwiseProduct(a.value()).rowwise().sum());
  });
}

inline Var div_col(const Var& a, const Var& col) {
  detail::check(col.cols() == 1 && col.rows() == a.rows(), "div_col: shape mismatch");
  Mat inv = col.value().cwiseInverse();
  Mat y = inv.col(0).asDiagonal() * a.value();
  return detail::record(y, {a, col}, [a, col, inv, y](Node& self) {
    detail::accumulate(a, inv.col(0).asDiagonal() * self.grad);
    detail::accumulate(col, -(self.grad.cwiseProduct(y).rowwise().sum()).cwiseProduct(inv));
  });
}

/// Repeats every row k times consecutively: (r, c) -> (r*k, c).
inline Var repeat_rows(const Var& a, Index k) {
  const Index r = a.rows(), c = a.cols();
  Mat y(r * k, c);
  for (Index i = 0; i < r; ++i) y.middleRows(i * k, k).rowwise() = a.value().row(i);
  return detail::record(std::move(y), {a}, [a, r, c, k](Node& self) {
    Mat g = Mat::Zero(r, c);
    for (Index i = 0; i < r; ++i) g.row(i) = self.grad.middleRows(i * k, k).colwise().sum();
    detail::accumulate(a, g);
  });
}

/// Stacks `times` copies of the whole block: (r, c) -> (r*times, c).
inline Var tile_rows(const Var& a, Index times) {
  const Index r = a.rows();
  Mat y = a.value().replicate(times, 1);
  return detail::record(std::move(y), {a}, [a, r, times](Node& self) {
    Mat g = Mat::Zero(r, a.cols());
    for (Index t = 0; t < times; ++t) g += self.grad.middleRows(t * r, r);
    detail::accumulate(a, g);
  });
}

/// Means over consecutive groups of k rows: (r*k, c) -> (r, c).
inline Var mean_row_groups(const Var& a, Index k) {
  detail::check(a.rows() % k == 0, "mean_row_groups: rows not divisible by group");
  const Index r = a.rows() / k;
  Mat y(r, a.cols());
  for (Index i = 0; i < r; ++i) y.row(i) = a.value().middleRows(i * k, k).colwise().mean();
  return detail::record(std::move(y), {a}, [a, r, k](Node& self) {
    Mat g(a.rows(), a.cols());
    for (Index i = 0; i < r; ++i) g.middleRows(i * k, k).rowwise() = self.grad.row(i) / static_cast<double>(k);
    detail::accumulate(a, g);
  });
}

/// Row sums: (r, c) -> (r, 1).
inline Var sum_cols(const Var& a) {
  return detail::record(a.value().rowwise().sum(), {a}, [a](Node& self) {
    detail::accumulate(a, self.grad.col(0).replicate(1, a.cols()));
  });
}

inline Var sum(const Var& a) {
  return detail::record(Mat::Constant(1, 1, a.value().sum()), {a},
                        [a](Node& self) { detail::accumulate(a, Mat::Constant(a.rows(), a.cols(), self.grad(0, 0))); });
}

inline Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

// ---------------------------------------------------------------------------
// Shape manipulation

/// Row-major reinterpretation.
inline Var reshape(const Var& a, Index rows, Index cols) {
  detail::check(rows * cols == a.value().size(), "reshape: size mismatch");
  Mat y = Eigen::Map<const Mat>(a.value().data(), rows, cols);
  const Index r0 = a.rows(), c0 = a.cols();
  return detail::record(std::move(y), {a}, [a, r0, c0](Node& self) {
    detail::accumulate(a, Eigen::Map<const Mat>(self.grad.data(), r0, c0));
  });
}

inline Var slice_cols(const Var& a, Index start, Index count) {
  detail::check(start >= 0 && start + count <= a.cols(), "slice_cols: out of range");
  return detail::record(a.value().middleCols(start, count), {a}, [a, start, count](Node& self) {
    Mat g = Mat::Zero(a.rows(), a.cols());
    g.middleCols(start, count) = self.grad;
    detail::accumulate(a, g);
  });
}

inline Var slice_rows(const Var& a, Index start, Index count) {
  detail::check(start >= 0 && start + count <= a.rows(), "slice_rows: out of range");
  return detail::record(a.value().middleRows(start, count), {a}, [a, start, count](Node& self) {
    Mat g = Mat::Zero(a.rows(), a.cols());
    g.middleRows(start, count) = self.grad;
    detail::accumulate(a, g);
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  detail::check(!parts.empty(), "concat_cols: no inputs");
  Index cols = 0;
  for (const auto& p : parts) {
    detail::check(p.rows() == parts.front().rows(), "concat_cols: row mismatch");
    cols += p.cols();
  }
  Mat y(parts.front().rows(), cols);
  Index at = 0;
  for (const auto& p : parts) {
    y.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return detail::record(std::move(y), parts, [parts](Node& self) {
    Index off = 0;
    for (const auto& p : parts) {
      detail::accumulate(p, self.grad.middleCols(off, p.cols()));
      off += p.cols();
    }
  });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  detail::check(!parts.empty(), "concat_rows: no inputs");
  Index rows = 0;
  for (const auto& p : parts) {
    detail::check(p.cols() == parts.front().cols(), "concat_rows: column mismatch");
    rows += p.rows();
  }
  Mat y(rows, parts.front().cols());
  Index at = 0;
  for (const auto& p : parts) {
    y.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return detail::record(std::move(y), parts, [parts](Node& self) {
    Index off = 0;
    for (const auto& p : parts) {
      detail::accumulate(p, self.grad.middleRows(off, p.rows()));
      off += p.rows();
    }
  });
}

/// y.row(i) = a.row(index[i]); repeated indices accumulate in backward.
inline Var gather_rows(const Var& a, std::vector<Index> index) {
  Mat y(static_cast<Index>(index.size()), a.cols());
  for (std::size_t i = 0; i < index.size(); ++i) y.row(static_cast<Index>(i)) = a.value().row(index[i]);
  return detail::record(std::move(y), {a}, [a, index = std::move(index)](Node& self) {
    Mat g = Mat::Zero(a.rows(), a.cols());
    for (std::size_t i = 0; i < index.size(); ++i) g.row(index[i]) += self.grad.row(static_cast<Index>(i));
    detail::accumulate(a, g);
  });
}

// ---------------------------------------------------------------------------
// Fused layers

/// Per-row layer normalization with gain and bias rows of width c.
inline Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5) {
  const Index r = x.rows(), c = x.cols();
  Mat xhat(r, c);
  Eigen::VectorXd inv_std(r);
  for (Index i = 0; i < r; ++i) {
    const double mu = x.value().row(i).mean();
    const double var = (x.value().row(i).array() - mu).square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (x.value().row(i).array() - mu) * inv_std(i);
  }
  Mat y = xhat * gain.value().row(0).asDiagonal();
  y.rowwise() += bias.value().row(0);
  return detail::record(std::move(y), {x, gain, bias}, [x, gain, bias, xhat, inv_std, c](Node& self) {
    detail::accumulate(gain, self.grad.cwiseProduct(xhat).colwise().sum());
    detail::accumulate(bias, self.grad.colwise().sum());
    if (!x.requires_grad()) return;
    Mat dxhat = self.grad * gain.value().row(0).asDiagonal();
    Mat dx(dxhat.rows(), c);
    for (Index i = 0; i < dxhat.rows(); ++i) {
      const double m1 = dxhat.row(i).mean();
      const double m2 = dxhat.row(i).dot(xhat.row(i)) / static_cast<double>(c);
      dx.row(i) = inv_std(i) * (dxhat.row(i).array() - m1 - xhat.row(i).array() * m2);
    }
    detail::accumulate(x, dx);
  });
}

/// Multi-head scaled dot-product attention over a batch of independent
/// sequences. q is (batch*lq, d), k and v are (batch*lk, d); heads split the
/// d columns evenly.
inline Var attention(const Var& q, const Var& k, const Var& v, Index batch, Index lq, Index lk, Index heads) {
  const Index d = q.cols();
  detail::check(d % heads == 0 && k.cols() == d && v.cols() == d, "attention: width mismatch");
  detail::check(q.rows() == batch * lq && k.rows() == batch * lk && v.rows() == batch * lk,
                "attention: row mismatch");
  const Index dh = d / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  Mat out(batch * lq, d);
  auto probs = std::make_shared<std::vector<Mat>>(static_cast<std::size_t>(batch * heads));
  for (Index b = 0; b < batch; ++b)
    for (Index h = 0; h < heads; ++h) {
      Mat s = q.value().block(b * lq, h * dh, lq, dh) * k.value().block(b * lk, h * dh, lk, dh).transpose() * sc;
      for (Index i = 0; i < lq; ++i) {
        const double mx = s.row(i).maxCoeff();
        s.row(i) = (s.row(i).array() - mx).exp().matrix();
        s.row(i) /= s.row(i).sum();
      }
      out.block(b * lq, h * dh, lq, dh) = s * v.value().block(b * lk, h * dh, lk, dh);
      (*probs)[static_cast<std::size_t>(b * heads + h)] = std::move(s);
    }
  return detail::record(std::move(out), {q, k, v}, [q, k, v, batch, lq, lk, heads, dh, sc, probs](Node& self) {
    Mat dq = Mat::Zero(q.rows(), q.cols()), dk = Mat::Zero(k.rows(), k.cols()), dv = Mat::Zero(v.rows(), v.cols());
    for (Index b = 0; b < batch; ++b)
      for (Index h = 0; h < heads; ++h) {
        const Mat& p = (*probs)[static_cast<std::size_t>(b * heads + h)];
        const auto go = self.grad.block(b * lq, h * dh, lq, dh);
        const auto vb = v.value().block(b * lk, h * dh, lk, dh);
        const auto kb = k.value().block(b * lk, h * dh, lk, dh);
        const auto qb = q.value().block(b * lq, h * dh, lq, dh);
        dv.block(b * lk, h * dh, lk, dh) += p.transpose() * go;
        Mat dp = go * vb.transpose();
        Eigen::VectorXd rs = dp.cwiseProduct(p).rowwise().sum();
        Mat ds = p.cwiseProduct((dp.colwise() - rs));
        dq.block(b * lq, h * dh, lq, dh) += ds * kb * sc;
        dk.block(b * lk, h * dh, lk, dh) += ds.transpose() * qb * sc;
      }
    detail::accumulate(q, dq);
    detail::accumulate(k, dk);
    detail::accumulate(v, dv);
  });
}

/// Root-mean-square radius from a column of mean squared distances; frames
/// whose radius falls below 1e-9 get radius 1 (and no gradient).
inline Var safe_rms_radius(const Var& mean_sq) {
  Mat y = mean_sq.value().unaryExpr([](double m) { return m < 1e-18 ? 1.0 : std::sqrt(m); });
  return detail::record(y, {mean_sq}, [mean_sq, y](Node& self) {
    Mat d = Mat::Zero(y.rows(), y.cols());
    for (Index i = 0; i < y.size(); ++i)
      if (mean_sq.value().data()[i] >= 1e-18) d.data()[i] = 0.5 / y.data()[i];
    detail::accumulate(mean_sq, self.grad.cwiseProduct(d));
  });
}

/// W = P L U with L unit lower triangular (strict part from `lower`), U upper
/// triangular with positive diagonal exp(log_diag) (strict part from `upper`)
/// and P the fixed row permutation W.row(i) = (L U).row(perm[i]).
inline Var plu_weight(const Var& lower, const Var& upper, const Var& log_diag, const std::vector<Index>& perm) {
  const Index c = lower.rows();
  Mat l = Mat::Identity(c, c), u = Mat::Zero(c, c);
  for (Index i = 0; i < c; ++i)
    for (Index j = 0; j < c; ++j) {
      if (j < i) l(i, j) = lower.value()(i, j);
      if (j > i) u(i, j) = upper.value()(i, j);
    }
  for (Index i = 0; i < c; ++i) u(i, i) = std::exp(log_diag.value()(0, i));
  const Mat lu = l * u;
  Mat w(c, c);
  for (Index i = 0; i < c; ++i) w.row(i) = lu.row(perm[i]);
  return detail::record(std::move(w), {lower, upper, log_diag}, [lower, upper, log_diag, perm, l, u, c](Node& self) {
    Mat dlu(c, c);
    for (Index i = 0; i < c; ++i) dlu.row(perm[i]) = self.grad.row(i);
    Mat dl = dlu * u.transpose();
    Mat du = l.transpose() * dlu;
    Mat gl = Mat::Zero(c, c), gu = Mat::Zero(c, c), gd(1, c);
    for (Index i = 0; i < c; ++i)
      for (Index j = 0; j < c; ++j) {
        if (j < i) gl(i, j) = dl(i, j);
        if (j > i) gu(i, j) = du(i, j);
      }
    for (Index i = 0; i < c; ++i) gd(0, i) = du(i, i) * u(i, i);
    detail::accumulate(lower, gl);
    detail::accumulate(upper, gu);
    detail::accumulate(log_diag, gd);
  });
}

}  // namespace rcnf::ad
