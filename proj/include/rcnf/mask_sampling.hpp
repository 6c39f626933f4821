#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <vector>

#include "rcnf/error.hpp"

namespace rcnf {

using Point2 = std::array<double, 2>;

/// One temporal slice of the point window: N points in normalized image
/// coordinates.
struct PointFrame {
  std::vector<Point2> points;
};

/// Row-major binary image.
class Mask {
 public:
  Mask() = default;
  Mask(int width, int height) : width_(width), height_(height), data_(static_cast<std::size_t>(width) * height, 0) {
    require(width > 0 && height > 0, Errc::invalid_argument, "mask size must be positive");
  }

  int width() const { return width_; }
  int height() const { return height_; }
  bool at(int col, int row) const { return data_[static_cast<std::size_t>(row) * width_ + col] != 0; }
  void set(int col, int row, bool v = true) { data_[static_cast<std::size_t>(row) * width_ + col] = v; }
  std::size_t count() const { return static_cast<std::size_t>(std::count(data_.begin(), data_.end(), 1)); }

  /// Pixels whose centers fall inside the disc (pixel units).
  static Mask disc(int width, int height, double cx, double cy, double radius) {
    Mask m(width, height);
    for (int r = 0; r < height; ++r)
      for (int c = 0; c < width; ++c) {
        const double dx = c + 0.5 - cx, dy = r + 0.5 - cy;
        if (dx * dx + dy * dy <= radius * radius) m.set(c, r);
      }
    return m;
  }

  /// Pixels whose centers fall inside the axis-aligned rectangle (pixel units).
  static Mask rect(int width, int height, double cx, double cy, double half_w, double half_h) {
    Mask m(width, height);
    for (int r = 0; r < height; ++r)
      for (int c = 0; c < width; ++c)
        if (std::abs(c + 0.5 - cx) <= half_w && std::abs(r + 0.5 - cy) <= half_h) m.set(c, r);
    return m;
  }

 private:
  int width_ = 0;
  int height_ = 0;
  std::vector<std::uint8_t> data_;
};

/// Lattice sampling of a segmentation mask into exactly `n` points.
///
/// A ceil(sqrt(n)) x ceil(sqrt(n)) lattice is laid over the bounding box of
/// the true pixel centers and the lattice points whose pixel is set are kept
/// (row-major order). Too many points are thinned evenly by index; too few are
/// padded by cycling through the kept points ordered by distance to their
/// centroid. Output is normalized by (width, height).
inline PointFrame grid_sample_mask(const Mask& mask, int n) {
  require(n >= 1, Errc::invalid_argument, "point count must be >= 1");
  int cmin = mask.width(), cmax = -1, rmin = mask.height(), rmax = -1;
  for (int r = 0; r < mask.height(); ++r)
    for (int c = 0; c < mask.width(); ++c)
      if (mask.at(c, r)) {
        cmin = std::min(cmin, c);
        cmax = std::max(cmax, c);
        rmin = std::min(rmin, r);
        rmax = std::max(rmax, r);
      }
  require(cmax >= 0, Errc::empty_mask, "mask has no foreground pixels");

  // Lattice offsets are computed relative to the box corner so that shifting
  // the mask by whole pixels shifts every sample by exactly that amount.
  const int side = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n))));
  auto rel = [side](int span, int i) {
    return side == 1 ? 0.5 * span + 0.5 : 0.5 + static_cast<double>(i) * span / (side - 1);
  };

  struct Sample {
    double rx, ry;  // offsets from (cmin, rmin) in pixels
  };
  std::vector<Sample> kept;
  for (int i = 0; i < side; ++i) {
    const double ry = rel(rmax - rmin, i);
    for (int j = 0; j < side; ++j) {
      const double rx = rel(cmax - cmin, j);
      const int c = cmin + std::min(static_cast<int>(std::floor(rx)), cmax - cmin);
      const int r = rmin + std::min(static_cast<int>(std::floor(ry)), rmax - rmin);
      if (mask.at(c, r)) kept.push_back({rx, ry});
    }
  }
  if (kept.empty()) {
    // thin shapes can miss every lattice point; fall back to the set pixel
    // nearest the box center
    const double mx = 0.5 * (cmax - cmin) + 0.5, my = 0.5 * (rmax - rmin) + 0.5;
    double best = std::numeric_limits<double>::infinity();
    Sample pick{};
    for (int r = rmin; r <= rmax; ++r)
      for (int c = cmin; c <= cmax; ++c)
        if (mask.at(c, r)) {
          const double px = c - cmin + 0.5, py = r - rmin + 0.5;
          const double d = (px - mx) * (px - mx) + (py - my) * (py - my);
          if (d < best) {
            best = d;
            pick = {px, py};
          }
        }
    kept.push_back(pick);
  }

  std::vector<Sample> chosen;
  chosen.reserve(n);
  const std::size_t k = kept.size();
  if (k >= static_cast<std::size_t>(n)) {
    for (int i = 0; i < n; ++i) chosen.push_back(kept[static_cast<std::size_t>(i) * k / n]);
  } else {
    chosen = kept;
    double mx = 0, my = 0;
    for (const auto& p : kept) {
      mx += p.rx;
      my += p.ry;
    }
    mx /= k;
    my /= k;
    std::vector<std::size_t> order(k);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      const double da = (kept[a].rx - mx) * (kept[a].rx - mx) + (kept[a].ry - my) * (kept[a].ry - my);
      const double db = (kept[b].rx - mx) * (kept[b].rx - mx) + (kept[b].ry - my) * (kept[b].ry - my);
      return da < db;
    });
    for (std::size_t i = 0; chosen.size() < static_cast<std::size_t>(n); ++i) chosen.push_back(kept[order[i % k]]);
  }

  PointFrame out;
  out.points.reserve(n);
  for (const auto& p : chosen)
    out.points.push_back({(cmin + p.rx) / mask.width(), (rmin + p.ry) / mask.height()});
  return out;
}

}  // namespace rcnf
