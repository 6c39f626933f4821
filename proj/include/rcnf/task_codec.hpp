#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "rcnf/error.hpp"

namespace rcnf {

struct TaskEmbedding {
  std::string task_id;
  std::vector<double> vector;
  double radius = 1.0;
};

/// Pairwise angle in degrees between two equal-length vectors.
inline double angle_degrees(std::span<const double> a, std::span<const double> b) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double c = std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
  return std::acos(c) * 180.0 / std::numbers::pi;
}

class TaskCodebook {
 public:
  TaskCodebook() = default;

  TaskCodebook(std::vector<TaskEmbedding> embeddings, int dim, double radius)
      : embeddings_(std::move(embeddings)), dim_(dim), radius_(radius) {
    require(dim_ >= 1 && radius_ > 0, Errc::invalid_dimensions, "codebook needs T >= 1 and R > 0");
    std::set<std::string> ids;
    for (const auto& e : embeddings_) {
      require(static_cast<int>(e.vector.size()) == dim_, Errc::shape_mismatch,
              "embedding '" + e.task_id + "' has wrong length");
      require(ids.insert(e.task_id).second, Errc::invalid_argument,
              "duplicate task id '" + e.task_id + "'");
    }
    for (std::size_t i = 0; i < embeddings_.size(); ++i)
      for (std::size_t j = i + 1; j < embeddings_.size(); ++j)
        require(embeddings_[i].vector != embeddings_[j].vector, Errc::invalid_argument,
                "duplicate embedding vectors");
    min_angle_ = compute_min_angle();
  }

  const std::vector<TaskEmbedding>& embeddings() const { return embeddings_; }
  int dim() const { return dim_; }
  double radius() const { return radius_; }
  std::size_t size() const { return embeddings_.size(); }
  double min_pairwise_angle() const { return min_angle_; }

  bool contains(const std::string& task_id) const {
    return std::any_of(embeddings_.begin(), embeddings_.end(),
                       [&](const auto& e) { return e.task_id == task_id; });
  }

  std::vector<std::string> task_ids() const {
    std::vector<std::string> out;
    for (const auto& e : embeddings_) out.push_back(e.task_id);
    return out;
  }

 private:
  double compute_min_angle() const {
    double best = 180.0;
    for (std::size_t i = 0; i < embeddings_.size(); ++i)
      for (std::size_t j = i + 1; j < embeddings_.size(); ++j)
        best = std::min(best, angle_degrees(embeddings_[i].vector, embeddings_[j].vector));
    return best;
  }

  std::vector<TaskEmbedding> embeddings_;
  int dim_ = 0;
  double radius_ = 1.0;
  double min_angle_ = 180.0;
};

inline std::string default_task_id(int index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "task%02d", index);
  return buf;
}

struct CodebookOptions {
  int iterations = 2000;
  double step = 0.05;
};

/// Spreads `task_ids.size()` points on the radius-R sphere in R^T by
/// Riemannian gradient descent on the Riesz 1-energy sum 1/|x_i - x_j|.
/// Works on the unit sphere and scales by R at the end. The configuration
/// with the largest minimum angle seen during descent is returned.
inline TaskCodebook optimize_codebook(const std::vector<std::string>& task_ids, int dim,
                                      double radius, std::uint64_t seed,
                                      const CodebookOptions& opts = {}) {
  const int m = static_cast<int>(task_ids.size());
  require(m >= 2 && dim >= 2, Errc::invalid_dimensions, "optimize_codebook needs M >= 2 and T >= 2");
  require(radius > 0, Errc::invalid_dimensions, "radius must be positive");

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<std::vector<double>> x(m, std::vector<double>(dim));
  auto normalize = [](std::vector<double>& v) {
    double n = 0;
    for (double c : v) n += c * c;
    n = std::sqrt(n);
    for (double& c : v) c /= n;
  };
  for (auto& v : x) {
    for (double& c : v) c = normal(rng);
    normalize(v);
  }

  auto min_angle = [&](const std::vector<std::vector<double>>& pts) {
    double best = 180.0;
    for (int i = 0; i < m; ++i)
      for (int j = i + 1; j < m; ++j) best = std::min(best, angle_degrees(pts[i], pts[j]));
    return best;
  };

  auto best = x;
  double best_angle = min_angle(x);
  std::vector<std::vector<double>> grad(m, std::vector<double>(dim));
  for (int it = 0; it < opts.iterations; ++it) {
    const double lr =
        opts.step * 0.5 * (1.0 + std::cos(std::numbers::pi * it / std::max(1, opts.iterations)));
    for (auto& g : grad) std::fill(g.begin(), g.end(), 0.0);
    for (int i = 0; i < m; ++i) {
      for (int j = i + 1; j < m; ++j) {
        double d2 = 0;
        for (int k = 0; k < dim; ++k) d2 += (x[i][k] - x[j][k]) * (x[i][k] - x[j][k]);
        const double inv3 = 1.0 / (std::max(d2, 1e-24) * std::sqrt(std::max(d2, 1e-24)));
        for (int k = 0; k < dim; ++k) {
          const double f = (x[i][k] - x[j][k]) * inv3;
          grad[i][k] -= f;
          grad[j][k] += f;
        }
      }
    }
    for (int i = 0; i < m; ++i) {
      double radial = 0;
      for (int k = 0; k < dim; ++k) radial += grad[i][k] * x[i][k];
      double norm = 0;
      for (int k = 0; k < dim; ++k) {
        grad[i][k] = (grad[i][k] - radial * x[i][k]) / (m - 1);
        norm += grad[i][k] * grad[i][k];
      }
      // cap the per-point move at 0.1 rad so near-coincident starts stay stable
      const double cap = norm > 0 ? std::min(1.0, 0.1 / (lr * std::sqrt(norm))) : 1.0;
      for (int k = 0; k < dim; ++k) x[i][k] -= lr * cap * grad[i][k];
      normalize(x[i]);
    }
    const double a = min_angle(x);
    if (a > best_angle) {
      best_angle = a;
      best = x;
    }
  }

  std::vector<TaskEmbedding> out;
  out.reserve(m);
  for (int i = 0; i < m; ++i) {
    TaskEmbedding e{task_ids[i], best[i], radius};
    for (double& c : e.vector) c *= radius;
    out.push_back(std::move(e));
  }
  return TaskCodebook(std::move(out), dim, radius);
}

inline TaskCodebook optimize_codebook(int num_tasks, int dim, double radius, std::uint64_t seed,
                                      const CodebookOptions& opts = {}) {
  require(num_tasks >= 2, Errc::invalid_dimensions, "optimize_codebook needs M >= 2");
  std::vector<std::string> ids;
  for (int i = 0; i < num_tasks; ++i) ids.push_back(default_task_id(i));
  return optimize_codebook(ids, dim, radius, seed, opts);
}

inline const TaskEmbedding& embed_task(const TaskCodebook& codebook, const std::string& task_id) {
  for (const auto& e : codebook.embeddings())
    if (e.task_id == task_id) return e;
  throw Error(Errc::unknown_task, "task '" + task_id + "' is not in the codebook");
}

/// Temporal broadcast of the task embedding: coordinate t fills frame t of a
/// (T, N, 2) latent, flattened row-major.
inline std::vector<double> prior_mean(const TaskEmbedding& embedding, int frames, int points,
                                      int coords = 2) {
  require(static_cast<int>(embedding.vector.size()) == frames, Errc::shape_mismatch,
          "task embedding length must equal the window length T");
  std::vector<double> mu(static_cast<std::size_t>(frames) * points * coords);
  const std::size_t per_frame = static_cast<std::size_t>(points) * coords;
  for (int t = 0; t < frames; ++t)
    std::fill_n(mu.begin() + t * per_frame, per_frame, embedding.vector[t]);
  return mu;
}

inline nlohmann::json codebook_to_json(const TaskCodebook& cb) {
  nlohmann::json tasks = nlohmann::json::array();
  for (const auto& e : cb.embeddings()) tasks.push_back({{"id", e.task_id}, {"vector", e.vector}});
  return {{"T", cb.dim()}, {"R", cb.radius()}, {"tasks", tasks}};
}

inline TaskCodebook codebook_from_json(const nlohmann::json& j) {
  try {
    const int dim = j.at("T").get<int>();
    const double radius = j.at("R").get<double>();
    std::vector<TaskEmbedding> es;
    for (const auto& t : j.at("tasks"))
      es.push_back({t.at("id").get<std::string>(), t.at("vector").get<std::vector<double>>(), radius});
    return TaskCodebook(std::move(es), dim, radius);
  } catch (const nlohmann::json::exception& ex) {
    throw Error(Errc::parse_error, std::string("codebook: ") + ex.what());
  }
}

inline void save_codebook(const TaskCodebook& cb, const std::string& path) {
  std::ofstream out(path);
  require(static_cast<bool>(out), Errc::io_error, "cannot write " + path);
  out << codebook_to_json(cb).dump(2) << "\n";
}

inline TaskCodebook load_codebook(const std::string& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), Errc::io_error, "cannot read " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& ex) {
    throw Error(Errc::parse_error, path + ": " + ex.what());
  }
  return codebook_from_json(j);
}

}  // namespace rcnf
