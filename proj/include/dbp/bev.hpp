#pragma once

// Metric BEV geometry.
//
// Grid convention: a continuous grid point (gx, gy) addresses column gx and
// row gy of a C x H x W feature map. Integer grid points are cell centers;
// cell (0, 0) is centered at (x_min + res/2, y_min + res/2). Columns run
// along +x, rows along +y.

#include <cstddef>
#include <cstdint>
#include <vector>

#include "dbp/scene_types.hpp"
#include "dbp/tensor.hpp"

namespace dbp {

struct BevSpec {
  double x_min = -15.0;
  double x_max = 15.0;
  double y_min = -7.5;
  double y_max = 7.5;
  double resolution = 0.5;

  static BevSpec desk_scale() { return {}; }
  static BevSpec full_scale() { return {-30.0, 30.0, -15.0, 15.0, 0.15}; }

  // Throws std::invalid_argument unless both extents are positive integer
  // multiples of the resolution.
  void validate() const;
  std::size_t width() const;   // cells along x
  std::size_t height() const;  // cells along y
  double length_m() const { return x_max - x_min; }
  double width_m() const { return y_max - y_min; }
  friend bool operator==(const BevSpec&, const BevSpec&) = default;
};

Vec2 world_to_grid(const BevSpec& spec, Vec2 p);
Vec2 grid_to_world(const BevSpec& spec, Vec2 g);

struct BevGrid {
  BevSpec spec;
  Tensor features;  // C x H x W

  BevGrid(BevSpec s, Tensor f);
  std::size_t channels() const { return features.dim(0); }
};

// Bilinear sample at one continuous grid point q (a 2-vector tensor, so the
// location itself can carry gradient). Returns a length-C vector.
Tensor bilinear_sample(const BevGrid& grid, const Tensor& q);

bool rect_contains(const OrientedRect& r, Vec2 p);

using Polygon = std::vector<Vec2>;

// Corners counter-clockwise starting at the rear-right corner.
Polygon rect_polygon(const OrientedRect& r);
double polygon_area(const Polygon& poly);
// Closed containment test for a convex counter-clockwise polygon.
bool polygon_contains(const Polygon& poly, Vec2 p);

// Sutherland-Hodgman clip of a's corners against b's edges. Counter-clockwise
// vertices, empty when the overlap has no area.
Polygon rect_intersection_region(const OrientedRect& a, const OrientedRect& b);

// Separating-axis overlap test (touching counts as overlap).
bool rects_overlap(const OrientedRect& a, const OrientedRect& b);

// Per-point flags for valid ground-truth points inside region.
struct PointMask {
  std::size_t n_map = 0;
  std::size_t n_point = 0;
  std::vector<std::uint8_t> values;
  std::size_t count() const;
};

PointMask mask_points(const MapInstanceSet& gt, const Polygon& region);

// Squared 2-Wasserstein distance between the Gaussians N(center, Sigma) with
// Sigma = R diag(hl^2, hw^2) R^T, in closed form for 2x2 SPD matrices.
double gwd(const OrientedRect& a, const OrientedRect& b);

// Differentiable box description: every field is a scalar tensor.
struct BoxTensor {
  Tensor cx, cy, half_length, half_width, cos_h, sin_h;
};

// p is a 5-vector (cx, cy, half_length, half_width, heading).
BoxTensor box_from_params(const Tensor& p);
BoxTensor box_constant(const OrientedRect& r);
Tensor gwd(const BoxTensor& a, const BoxTensor& b);
Tensor gwd(const Tensor& a_params, const Tensor& b_params);

}  // namespace dbp
