#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "rcnf/error.hpp"

namespace rcnf {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

constexpr double kDepthEpsilon = 1e-6;

inline bool is_orthonormal(const Mat3& r, double tol = 1e-6) {
  return (r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff() <= tol;
}

struct CameraModel {
  Mat3 intrinsics = Mat3::Identity();
  Mat4 extrinsic = Mat4::Identity();  // world -> camera
  int width = 1;
  int height = 1;

  CameraModel() = default;
  CameraModel(const Mat3& k, const Mat4& ext, int w, int h)
      : intrinsics(k), extrinsic(ext), width(w), height(h) {
    require(k(0, 0) > 0 && k(1, 1) > 0, Errc::invalid_argument, "camera needs fx, fy > 0");
    require(is_orthonormal(ext.topLeftCorner<3, 3>()), Errc::invalid_argument,
            "extrinsic rotation block must be orthonormal");
    require(w > 0 && h > 0, Errc::invalid_argument, "image size must be positive");
  }

  static CameraModel pinhole(double fx, double fy, double cx, double cy, int w, int h,
                             const Mat4& ext = Mat4::Identity()) {
    Mat3 k;
    k << fx, 0, cx, 0, fy, cy, 0, 0, 1;
    return CameraModel(k, ext, w, h);
  }
};

struct GeomBox {
  Vec3 position = Vec3::Zero();
  Mat3 rotation = Mat3::Identity();
  Vec3 size = Vec3::Ones();  // W, H, D

  GeomBox() = default;
  GeomBox(const Vec3& pos, const Mat3& rot, const Vec3& sz) : position(pos), rotation(rot), size(sz) {
    require(is_orthonormal(rot), Errc::invalid_argument, "geometry rotation must be orthonormal");
    require((sz.array() > 0).all(), Errc::invalid_argument, "geometry sizes must be positive");
  }
};

/// World-frame grid of grid^3 points spanning the box: offsets dx, dy, dz take
/// `grid` evenly spaced values in [-0.5, 0.5] (just 0 when grid == 1) and are
/// scaled by (W, H, D) before rotation. Ordering is x-major, then y, then z.
inline std::vector<Vec3> sample_geom_points(const GeomBox& box, int grid) {
  require(grid >= 1, Errc::invalid_argument, "grid must be >= 1");
  auto offset = [grid](int i) { return grid == 1 ? 0.0 : -0.5 + static_cast<double>(i) / (grid - 1); };
  std::vector<Vec3> out;
  out.reserve(static_cast<std::size_t>(grid) * grid * grid);
  for (int i = 0; i < grid; ++i)
    for (int j = 0; j < grid; ++j)
      for (int k = 0; k < grid; ++k) {
        const Vec3 local(offset(i) * box.size.x(), offset(j) * box.size.y(), offset(k) * box.size.z());
        out.push_back(box.position + box.rotation * local);
      }
  return out;
}

/// Pinhole projection with homogeneous division. Points at camera depth
/// <= kDepthEpsilon and pixels outside [0,width) x [0,height) are dropped;
/// survivors keep their input order.
inline std::vector<Vec2> project_points(const CameraModel& camera, std::span<const Vec3> world_points) {
  std::vector<Vec2> out;
  out.reserve(world_points.size());
  for (const auto& p : world_points) {
    const Eigen::Vector4d cam = camera.extrinsic * p.homogeneous();
    if (cam.z() <= kDepthEpsilon) continue;
    const Vec3 img = camera.intrinsics * cam.head<3>();
    const Vec2 px(img.x() / img.z(), img.y() / img.z());
    if (px.x() < 0 || px.x() >= camera.width || px.y() < 0 || px.y() >= camera.height) continue;
    out.push_back(px);
  }
  return out;
}

/// Inverse of the intrinsic step for a camera-frame point of known depth.
inline Vec3 unproject_pixel(const CameraModel& camera, const Vec2& px, double depth) {
  return depth * camera.intrinsics.inverse() * Vec3(px.x(), px.y(), 1.0);
}

struct BBox {
  double x_min, y_min, x_max, y_max;
  bool operator==(const BBox&) const = default;
};

inline BBox bbox_of(std::span<const Vec2> pixels) {
  require(!pixels.empty(), Errc::empty_projection, "no valid projected pixels");
  BBox b{pixels[0].x(), pixels[0].y(), pixels[0].x(), pixels[0].y()};
  for (const auto& p : pixels) {
    b.x_min = std::min(b.x_min, p.x());
    b.y_min = std::min(b.y_min, p.y());
    b.x_max = std::max(b.x_max, p.x());
    b.y_max = std::max(b.y_max, p.y());
  }
  return b;
}

}  // namespace rcnf
