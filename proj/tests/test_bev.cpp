#include <Eigen/Dense>
#include <cmath>
#include <numbers>
#include <random>

#include "doctest.h"
#include "dbp/bev.hpp"
#include "dbp/gradcheck.hpp"

using namespace dbp;

namespace {

// Eigendecomposition route to the Gaussian 2-Wasserstein distance.
double gwd_eigen_oracle(const OrientedRect& a, const OrientedRect& b) {
  auto cov = [](const OrientedRect& r) {
    Eigen::Matrix2d rot;
    rot << std::cos(r.heading), -std::sin(r.heading), std::sin(r.heading), std::cos(r.heading);
    Eigen::Matrix2d d = Eigen::Matrix2d::Zero();
    d(0, 0) = r.half_extents.x * r.half_extents.x;
    d(1, 1) = r.half_extents.y * r.half_extents.y;
    return Eigen::Matrix2d(rot * d * rot.transpose());
  };
  auto spd_sqrt = [](const Eigen::Matrix2d& m) {
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(m);
    return Eigen::Matrix2d(es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() *
                           es.eigenvectors().transpose());
  };
  const Eigen::Matrix2d sa = cov(a), sb = cov(b);
  const Eigen::Matrix2d ra = spd_sqrt(sa);
  const Eigen::Matrix2d inner = spd_sqrt(ra * sb * ra);
  const double dx = a.center.x - b.center.x, dy = a.center.y - b.center.y;
  return dx * dx + dy * dy + (sa + sb - 2.0 * inner).trace();
}

OrientedRect random_rect(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> c(-5, 5), e(0.5, 4.0), h(-3.1, 3.1);
  return OrientedRect::make({c(rng), c(rng)}, e(rng), e(rng), h(rng));
}

}  // namespace

TEST_CASE("bev spec cell counts and validation") {
  const BevSpec desk = BevSpec::desk_scale();
  CHECK(desk.width() == 60);
  CHECK(desk.height() == 30);
  const BevSpec full = BevSpec::full_scale();
  CHECK(full.width() == 400);
  CHECK(full.height() == 200);
  BevSpec bad = desk;
  bad.resolution = 0.7;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("world_to_grid conventions") {
  const BevSpec s = BevSpec::desk_scale();
  const Vec2 origin = world_to_grid(s, {s.x_min + s.resolution / 2, s.y_min + s.resolution / 2});
  CHECK(origin.x == doctest::Approx(0.0));
  CHECK(origin.y == doctest::Approx(0.0));
  const Vec2 mid = world_to_grid(s, {0.0, 0.0});
  CHECK(mid.x == doctest::Approx((s.width() - 1) / 2.0));
  CHECK(mid.y == doctest::Approx((s.height() - 1) / 2.0));
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> d(-40, 40);
  for (int i = 0; i < 100; ++i) {
    const Vec2 p{d(rng), d(rng)};
    const Vec2 q = grid_to_world(s, world_to_grid(s, p));
    CHECK(std::fabs(q.x - p.x) <= 1e-12);
    CHECK(std::fabs(q.y - p.y) <= 1e-12);
  }
}

TEST_CASE("bilinear sample examples") {
  BevSpec s{0, 2, 0, 2, 1.0};
  BevGrid g(s, Tensor::from({1, 2, 2}, {0, 1, 2, 3}));
  CHECK(bilinear_sample(g, Tensor::from({2}, {0.5, 0.5})).item() == doctest::Approx(1.5));
  // Lattice point (col j, row i) returns B[:, i, j].
  CHECK(bilinear_sample(g, Tensor::from({2}, {1.0, 0.0})).item() == 1.0);
  CHECK(bilinear_sample(g, Tensor::from({2}, {0.0, 1.0})).item() == 2.0);

  BevSpec s2{0, 6, 0, 4, 1.0};
  BevGrid c(s2, Tensor::full({3, 4, 6}, 5.0));
  const Tensor v = bilinear_sample(c, Tensor::from({2}, {2.3, 1.7}));
  for (double x : v.data()) CHECK(x == doctest::Approx(5.0).epsilon(1e-15));
  // Zero padding outside the grid.
  CHECK(bilinear_sample(c, Tensor::from({2}, {-3.0, 1.0}))[0] == 0.0);
  CHECK(bilinear_sample(c, Tensor::from({2}, {-0.5, 1.0}))[0] == doctest::Approx(2.5));
}

TEST_CASE("bilinear sample is linear in the grid") {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> d(-2, 2), q(-1, 6);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> b1(2 * 5 * 7), b2(2 * 5 * 7);
    for (auto& x : b1) x = d(rng);
    for (auto& x : b2) x = d(rng);
    const double al = d(rng), be = d(rng);
    std::vector<double> mix(b1.size());
    for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = al * b1[i] + be * b2[i];
    const Tensor pt = Tensor::from({1, 2}, {q(rng), q(rng)});
    const Tensor s1 = grid_sample(Tensor::from({2, 5, 7}, b1), pt);
    const Tensor s2 = grid_sample(Tensor::from({2, 5, 7}, b2), pt);
    const Tensor sm = grid_sample(Tensor::from({2, 5, 7}, mix), pt);
    for (std::size_t c = 0; c < 2; ++c) CHECK(std::fabs(sm[c] - (al * s1[c] + be * s2[c])) <= 1e-12);
  }
}

TEST_CASE("bilinear sample gradient wrt location off the lattice") {
  std::mt19937_64 rng(10);
  std::uniform_real_distribution<double> d(-2, 2), q(-0.9, 5.9);
  int checked = 0;
  while (checked < 30) {
    const double gx = q(rng), gy = q(rng);
    auto lattice_dist = [](double v) { return std::fabs(v - std::round(v)); };
    if (lattice_dist(gx) < 1e-3 || lattice_dist(gy) < 1e-3) continue;
    std::vector<double> b(3 * 6 * 6);
    for (auto& x : b) x = d(rng);
    Tensor grid = Tensor::from({3, 6, 6}, b, true);
    Tensor pt = Tensor::from({2}, {gx, gy}, true);
    BevSpec s{0, 6, 0, 6, 1.0};
    const auto r = check_gradients(
        [&](const std::vector<Tensor>& in) {
          return random_projection(bilinear_sample(BevGrid(s, in[0]), in[1]), 1);
        },
        {grid, pt});
    INFO(r.worst);
    CHECK(r.max_rel_error <= 1e-6);
    ++checked;
  }
}

TEST_CASE("rect containment") {
  const OrientedRect r = OrientedRect::make({0, 0}, 2.0, 1.0, 0.0);
  CHECK(rect_contains(r, {0, 0}));
  CHECK(rect_contains(r, {1.0, 0.5}));
  CHECK_FALSE(rect_contains(r, {3.0, 0.0}));
  const OrientedRect rot = OrientedRect::make({1, 1}, 4.0, 1.0, std::numbers::pi / 2);
  CHECK(rect_contains(rot, {1.0, 2.9}));
  CHECK_FALSE(rect_contains(rot, {2.9, 1.0}));
  CHECK(OrientedRect::make({0, 0}, 1, 1, 3 * std::numbers::pi).heading == doctest::Approx(std::numbers::pi));
  CHECK_THROWS_AS(OrientedRect::make({0, 0}, 0.0, 1.0, 0.0), std::invalid_argument);
}

TEST_CASE("rect intersection examples") {
  const OrientedRect a = OrientedRect::make({0.3, -0.2}, 3.0, 1.5, 0.4);
  const Polygon self = rect_intersection_region(a, a);
  CHECK(std::fabs(polygon_area(self) - 4.5) <= 1e-9);

  const OrientedRect far = OrientedRect::make({20, 0}, 1, 1, 0);
  CHECK(rect_intersection_region(a, far).empty());

  const OrientedRect u0 = OrientedRect::make({0.5, 0.5}, 1, 1, 0);
  const OrientedRect u1 = OrientedRect::make({1.0, 0.5}, 1, 1, 0);
  const Polygon ov = rect_intersection_region(u0, u1);
  CHECK(std::fabs(polygon_area(ov) - 0.5) <= 1e-12);

  // Monte-Carlo area oracle over the bounding box of u0.
  std::mt19937_64 rng(123);
  std::uniform_real_distribution<double> d(0.0, 1.0);
  std::size_t hits = 0;
  const std::size_t n = 1000000;
  for (std::size_t i = 0; i < n; ++i) {
    const Vec2 p{d(rng), d(rng)};
    if (rect_contains(u0, p) && rect_contains(u1, p)) ++hits;
  }
  CHECK(std::fabs(static_cast<double>(hits) / n - polygon_area(ov)) <= 1e-2);
}

TEST_CASE("rect intersection area properties") {
  std::mt19937_64 rng(77);
  for (int i = 0; i < 500; ++i) {
    const OrientedRect a = random_rect(rng), b = random_rect(rng);
    const Polygon ab = rect_intersection_region(a, b);
    const Polygon ba = rect_intersection_region(b, a);
    const double area_a = 4 * a.half_extents.x * a.half_extents.y;
    const double area_b = 4 * b.half_extents.x * b.half_extents.y;
    CHECK(polygon_area(ab) <= std::min(area_a, area_b) + 1e-9);
    CHECK(std::fabs(polygon_area(ab) - polygon_area(ba)) <= 1e-9);
    CHECK(polygon_area(ab) >= 0.0);
    if (!ab.empty()) CHECK(rects_overlap(a, b));
  }
}

TEST_CASE("mask_points") {
  MapInstanceSet m = MapInstanceSet::empty(3, 4);
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> d(-10, 10);
  for (auto& v : m.points) v = d(rng);
  m.valid = {1, 1, 0};
  CHECK(mask_points(m, {}).count() == 0);
  const Polygon everything = rect_polygon(OrientedRect::make({0, 0}, 40, 40, 0));
  const PointMask all = mask_points(m, everything);
  CHECK(all.count() == 8);  // invalid instance stays masked out
  for (int trial = 0; trial < 50; ++trial) {
    const OrientedRect a = OrientedRect::make({d(rng) / 2, d(rng) / 2}, 12, 8, d(rng));
    const OrientedRect b = OrientedRect::make({d(rng) / 2, d(rng) / 2}, 12, 8, d(rng));
    const Polygon region = rect_intersection_region(a, b);
    const PointMask pm = mask_points(m, region);
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 4; ++j) {
        const bool inside = m.valid[i] && rect_contains(a, m.point(i, j)) && rect_contains(b, m.point(i, j));
        CHECK(pm.values[i * 4 + j] == static_cast<std::uint8_t>(inside));
      }
  }
}

TEST_CASE("gwd examples and properties") {
  std::mt19937_64 rng(31);
  for (int i = 0; i < 200; ++i) {
    const OrientedRect a = random_rect(rng), b = random_rect(rng);
    CHECK(gwd(a, a) <= 1e-10);
    CHECK(std::fabs(gwd(a, b) - gwd(b, a)) <= 1e-12 * std::max(1.0, gwd(a, b)));
    CHECK(gwd(a, b) == doctest::Approx(gwd_eigen_oracle(a, b)).epsilon(1e-9));
    OrientedRect shifted = a;
    shifted.center = a.center + Vec2{1.5, -2.0};
    CHECK(std::fabs(gwd(a, shifted) - 6.25) <= 1e-10);
  }
  const OrientedRect sq = OrientedRect::make({1, 2}, 3, 3, 0.3);
  const OrientedRect sq90 = OrientedRect::make({1, 2}, 3, 3, 0.3 + std::numbers::pi / 2);
  CHECK(gwd(sq, sq90) <= 1e-10);
  CHECK(gwd_eigen_oracle(sq, sq90) <= 1e-10);

  // Tensor route agrees with the scalar route.
  const OrientedRect a = random_rect(rng), b = random_rect(rng);
  const Tensor pa = Tensor::from({5}, {a.center.x, a.center.y, a.half_extents.x, a.half_extents.y, a.heading});
  const Tensor pb = Tensor::from({5}, {b.center.x, b.center.y, b.half_extents.x, b.half_extents.y, b.heading});
  CHECK(gwd(pa, pb).item() == doctest::Approx(gwd(a, b)).epsilon(1e-12));
}

TEST_CASE("gwd gradient over all five box parameters") {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> c(-3, 3), e(0.5, 2.0), h(-3.0, 3.0);
  for (int i = 0; i < 30; ++i) {
    Tensor a = Tensor::from({5}, {c(rng), c(rng), e(rng), e(rng), h(rng)}, true);
    Tensor b = Tensor::from({5}, {c(rng), c(rng), e(rng), e(rng), h(rng)}, true);
    const auto r = check_gradients([](const std::vector<Tensor>& in) { return gwd(in[0], in[1]); }, {a, b});
    INFO(r.worst);
    CHECK(r.max_rel_error <= 1e-5);
  }
}
