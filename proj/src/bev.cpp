#include "dbp/bev.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace dbp {

double normalize_angle(double a) {
  constexpr double kTwoPi = 2.0 * std::numbers::pi;
  a = std::fmod(a, kTwoPi);
  if (a <= -std::numbers::pi) a += kTwoPi;
  if (a > std::numbers::pi) a -= kTwoPi;
  return a;
}

OrientedRect OrientedRect::make(Vec2 center, double length, double width, double heading) {
  if (!(length > 0.0) || !(width > 0.0)) {
    throw std::invalid_argument("OrientedRect: extents must be positive, got " + std::to_string(length) + " x " +
                                std::to_string(width));
  }
  return {center, {length / 2.0, width / 2.0}, normalize_angle(heading)};
}

std::vector<double> path_headings(const std::vector<Vec2>& waypoints, double min_step) {
  std::vector<double> out;
  out.reserve(waypoints.size());
  Vec2 prev{};
  double h = 0.0;
  for (const Vec2& w : waypoints) {
    const Vec2 d = w - prev;
    if (std::hypot(d.x, d.y) >= min_step) h = std::atan2(d.y, d.x);
    out.push_back(h);
    prev = w;
  }
  return out;
}

std::string_view command_name(Command c) {
  switch (c) {
    case Command::Straight: return "straight";
    case Command::Left: return "left";
    case Command::Right: return "right";
  }
  return "straight";
}

Command parse_command(std::string_view s) {
  if (s == "straight") return Command::Straight;
  if (s == "left") return Command::Left;
  if (s == "right") return Command::Right;
  throw std::invalid_argument("unknown command '" + std::string(s) + "'");
}

MapInstanceSet MapInstanceSet::empty(std::size_t n_map, std::size_t n_point) {
  MapInstanceSet m;
  m.n_map = n_map;
  m.n_point = n_point;
  m.points.assign(n_map * n_point * 2, 0.0);
  m.classes.assign(n_map, MapClass::LaneDivider);
  m.valid.assign(n_map, 0);
  return m;
}

std::size_t MapInstanceSet::valid_count() const {
  return static_cast<std::size_t>(std::count(valid.begin(), valid.end(), std::uint8_t{1}));
}

namespace {

std::size_t cell_count(double extent, double res, const char* axis) {
  const double n = extent / res;
  const double r = std::round(n);
  if (!(res > 0.0) || r < 1.0 || std::fabs(n - r) > 1e-9 * std::max(1.0, r)) {
    throw std::invalid_argument(std::string("BevSpec: ") + axis + " extent " + std::to_string(extent) +
                                " is not a positive multiple of resolution " + std::to_string(res));
  }
  return static_cast<std::size_t>(r);
}

double cross(Vec2 a, Vec2 b) { return a.x * b.y - a.y * b.x; }

}  // namespace

void BevSpec::validate() const {
  cell_count(x_max - x_min, resolution, "x");
  cell_count(y_max - y_min, resolution, "y");
}

std::size_t BevSpec::width() const { return cell_count(x_max - x_min, resolution, "x"); }
std::size_t BevSpec::height() const { return cell_count(y_max - y_min, resolution, "y"); }

Vec2 world_to_grid(const BevSpec& spec, Vec2 p) {
  return {(p.x - spec.x_min) / spec.resolution - 0.5, (p.y - spec.y_min) / spec.resolution - 0.5};
}

Vec2 grid_to_world(const BevSpec& spec, Vec2 g) {
  return {(g.x + 0.5) * spec.resolution + spec.x_min, (g.y + 0.5) * spec.resolution + spec.y_min};
}

BevGrid::BevGrid(BevSpec s, Tensor f) : spec(s), features(std::move(f)) {
  if (features.rank() != 3 || features.dim(1) != spec.height() || features.dim(2) != spec.width()) {
    throw ShapeError("BevGrid", features.shape(), {0, spec.height(), spec.width()});
  }
}

Tensor bilinear_sample(const BevGrid& grid, const Tensor& q) {
  if (q.numel() != 2) throw ShapeError("bilinear_sample: point must have 2 coordinates, got " + shape_str(q.shape()));
  return reshape(grid_sample(grid.features, reshape(q, {1, 2})), {grid.channels()});
}

bool rect_contains(const OrientedRect& r, Vec2 p) {
  const double c = std::cos(r.heading), s = std::sin(r.heading);
  const Vec2 d = p - r.center;
  const double lx = c * d.x + s * d.y;
  const double ly = -s * d.x + c * d.y;
  return std::fabs(lx) <= r.half_extents.x && std::fabs(ly) <= r.half_extents.y;
}

Polygon rect_polygon(const OrientedRect& r) {
  const double c = std::cos(r.heading), s = std::sin(r.heading);
  const double hl = r.half_extents.x, hw = r.half_extents.y;
  const double local[4][2] = {{-hl, -hw}, {hl, -hw}, {hl, hw}, {-hl, hw}};
  Polygon poly;
  for (const auto& l : local) poly.push_back({r.center.x + c * l[0] - s * l[1], r.center.y + s * l[0] + c * l[1]});
  return poly;
}

double polygon_area(const Polygon& poly) {
  if (poly.size() < 3) return 0.0;
  double a = 0.0;
  for (std::size_t i = 0; i < poly.size(); ++i) a += cross(poly[i], poly[(i + 1) % poly.size()]);
  return 0.5 * a;
}

bool polygon_contains(const Polygon& poly, Vec2 p) {
  if (poly.size() < 3) return false;
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const Vec2 a = poly[i], b = poly[(i + 1) % poly.size()];
    if (cross(b - a, p - a) < 0.0) return false;
  }
  return true;
}

Polygon rect_intersection_region(const OrientedRect& a, const OrientedRect& b) {
  Polygon out = rect_polygon(a);
  const Polygon clip = rect_polygon(b);
  for (std::size_t e = 0; e < clip.size() && !out.empty(); ++e) {
    const Vec2 c0 = clip[e], c1 = clip[(e + 1) % clip.size()];
    const Vec2 dir = c1 - c0;
    auto side = [&](Vec2 p) { return cross(dir, p - c0); };
    Polygon in = std::move(out);
    out.clear();
    for (std::size_t i = 0; i < in.size(); ++i) {
      const Vec2 p = in[i], q = in[(i + 1) % in.size()];
      const double sp = side(p), sq = side(q);
      if (sp >= 0.0) out.push_back(p);
      if ((sp >= 0.0) != (sq >= 0.0)) {
        const double t = sp / (sp - sq);
        out.push_back(p + t * (q - p));
      }
    }
  }
  // Drop repeated vertices produced by clipping through a corner.
  Polygon clean;
  for (const Vec2& p : out) {
    if (clean.empty() || std::hypot(p.x - clean.back().x, p.y - clean.back().y) > 1e-12) clean.push_back(p);
  }
  while (clean.size() > 1 && std::hypot(clean.front().x - clean.back().x, clean.front().y - clean.back().y) <= 1e-12) {
    clean.pop_back();
  }
  if (clean.size() < 3 || polygon_area(clean) <= 0.0) return {};
  return clean;
}

bool rects_overlap(const OrientedRect& a, const OrientedRect& b) {
  const Polygon pa = rect_polygon(a), pb = rect_polygon(b);
  for (const OrientedRect* r : {&a, &b}) {
    const double c = std::cos(r->heading), s = std::sin(r->heading);
    for (const Vec2 axis : {Vec2{c, s}, Vec2{-s, c}}) {
      double amin = INFINITY, amax = -INFINITY, bmin = INFINITY, bmax = -INFINITY;
      for (const Vec2& p : pa) {
        const double d = p.x * axis.x + p.y * axis.y;
        amin = std::min(amin, d);
        amax = std::max(amax, d);
      }
      for (const Vec2& p : pb) {
        const double d = p.x * axis.x + p.y * axis.y;
        bmin = std::min(bmin, d);
        bmax = std::max(bmax, d);
      }
      if (amax < bmin || bmax < amin) return false;
    }
  }
  return true;
}

std::size_t PointMask::count() const {
  return static_cast<std::size_t>(std::count(values.begin(), values.end(), std::uint8_t{1}));
}

PointMask mask_points(const MapInstanceSet& gt, const Polygon& region) {
  PointMask m{gt.n_map, gt.n_point, std::vector<std::uint8_t>(gt.n_map * gt.n_point, 0)};
  if (region.size() < 3) return m;
  for (std::size_t i = 0; i < gt.n_map; ++i) {
    if (!gt.valid[i]) continue;
    for (std::size_t j = 0; j < gt.n_point; ++j) m.values[i * gt.n_point + j] = polygon_contains(region, gt.point(i, j));
  }
  return m;
}

namespace {

struct Cov {
  double xx, xy, yy;
};

Cov covariance(const OrientedRect& r) {
  const double c = std::cos(r.heading), s = std::sin(r.heading);
  const double a2 = r.half_extents.x * r.half_extents.x, b2 = r.half_extents.y * r.half_extents.y;
  return {a2 * c * c + b2 * s * s, (a2 - b2) * c * s, a2 * s * s + b2 * c * c};
}

}  // namespace

double gwd(const OrientedRect& a, const OrientedRect& b) {
  const Cov sa = covariance(a), sb = covariance(b);
  const double dx = a.center.x - b.center.x, dy = a.center.y - b.center.y;
  const double tr_ab = sa.xx * sb.xx + 2.0 * sa.xy * sb.xy + sa.yy * sb.yy;
  const double det_a = sa.xx * sa.yy - sa.xy * sa.xy;
  const double det_b = sb.xx * sb.yy - sb.xy * sb.xy;
  const double cross_term = std::sqrt(std::max(0.0, tr_ab + 2.0 * std::sqrt(std::max(0.0, det_a * det_b))));
  const double d2 = dx * dx + dy * dy + (sa.xx + sa.yy) + (sb.xx + sb.yy) - 2.0 * cross_term;
  return std::max(0.0, d2);
}

BoxTensor box_from_params(const Tensor& p) {
  if (p.numel() != 5) throw ShapeError("box_from_params: expected 5 parameters, got " + shape_str(p.shape()));
  const Tensor flat = reshape(p, {5});
  const Tensor heading = slice(flat, 0, 4, 5);
  return {slice(flat, 0, 0, 1), slice(flat, 0, 1, 2), slice(flat, 0, 2, 3), slice(flat, 0, 3, 4), cos(heading),
          sin(heading)};
}

BoxTensor box_constant(const OrientedRect& r) {
  return {Tensor::from({1}, {r.center.x}),          Tensor::from({1}, {r.center.y}),
          Tensor::from({1}, {r.half_extents.x}),    Tensor::from({1}, {r.half_extents.y}),
          Tensor::from({1}, {std::cos(r.heading)}), Tensor::from({1}, {std::sin(r.heading)})};
}

namespace {

struct CovT {
  Tensor xx, xy, yy;
};

CovT covariance(const BoxTensor& b) {
  const Tensor a2 = square(b.half_length), b2 = square(b.half_width);
  const Tensor cc = square(b.cos_h), ss = square(b.sin_h), cs = b.cos_h * b.sin_h;
  return {a2 * cc + b2 * ss, (a2 - b2) * cs, a2 * ss + b2 * cc};
}

}  // namespace

Tensor gwd(const BoxTensor& a, const BoxTensor& b) {
  const CovT sa = covariance(a), sb = covariance(b);
  const Tensor center = square(a.cx - b.cx) + square(a.cy - b.cy);
  const Tensor tr_ab = sa.xx * sb.xx + 2.0 * (sa.xy * sb.xy) + sa.yy * sb.yy;
  const Tensor det_a = sa.xx * sa.yy - square(sa.xy);
  const Tensor det_b = sb.xx * sb.yy - square(sb.xy);
  const Tensor cross_term = sqrt(tr_ab + 2.0 * sqrt(det_a * det_b));
  const Tensor d2 = center + sa.xx + sa.yy + sb.xx + sb.yy - 2.0 * cross_term;
  // Rounding can leave -1e-14 at coincident boxes; the true minimum is 0.
  return reshape(relu(d2), {});
}

Tensor gwd(const Tensor& a_params, const Tensor& b_params) {
  return gwd(box_from_params(a_params), box_from_params(b_params));
}

}  // namespace dbp
