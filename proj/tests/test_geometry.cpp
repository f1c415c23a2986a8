#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

#include "supportaff/errors.hpp"
#include "supportaff/geometry.hpp"

using namespace supportaff;

namespace {

PointCloud make_cloud(const Eigen::Matrix3Xd& pos) {
  PointCloud c;
  c.positions = pos;
  c.normals = Eigen::Matrix3Xd::Zero(3, pos.cols());
  c.normals.row(2).setOnes();
  c.part_label.assign(pos.cols(), 0);
  return c;
}

Eigen::Matrix3Xd random_positions(int n, SeedState seed) {
  Rng rng(seed);
  Eigen::Matrix3Xd p(3, n);
  for (int i = 0; i < n; ++i) p.col(i) = Vec3(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
  return p;
}

double min_pairwise(const Eigen::Matrix3Xd& p, const std::vector<int>& idx) {
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t a = 0; a < idx.size(); ++a)
    for (std::size_t b = a + 1; b < idx.size(); ++b) best = std::min(best, (p.col(idx[a]) - p.col(idx[b])).norm());
  return best;
}

// Exhaustive best min-pairwise distance over all subsets of size m.
double brute_force_dispersion(const Eigen::Matrix3Xd& p, int m) {
  const int n = static_cast<int>(p.cols());
  std::vector<int> pick(m);
  double best = 0.0;
  std::vector<bool> mask(n, false);
  std::fill(mask.begin(), mask.begin() + m, true);
  do {
    pick.clear();
    for (int i = 0; i < n; ++i)
      if (mask[i]) pick.push_back(i);
    best = std::max(best, min_pairwise(p, pick));
  } while (std::prev_permutation(mask.begin(), mask.end()));
  return best;
}

Pose rot_z(double angle) { return Pose{Vec3::Zero(), Quat(Eigen::AngleAxisd(angle, Vec3::UnitZ()))}; }

}  // namespace

TEST_CASE("farthest_point_sample examples") {
  const PointCloud cloud = make_cloud(random_positions(40, {1, 0}));

  SUBCASE("M = N is a permutation") {
    auto idx = farthest_point_sample(cloud, 40, {3, 4});
    std::sort(idx.begin(), idx.end());
    for (int i = 0; i < 40; ++i) CHECK(idx[i] == i);
  }
  SUBCASE("M = 1 returns the seeded start only") {
    const auto idx = farthest_point_sample(cloud, 1, {3, 4});
    REQUIRE(idx.size() == 1);
    CHECK(idx[0] == Rng(SeedState{3, 4}).index(40));
  }
  SUBCASE("cube corners, M = 2 gives an antipodal pair") {
    Eigen::Matrix3Xd corners(3, 8);
    for (int i = 0; i < 8; ++i) corners.col(i) = Vec3(i & 1, (i >> 1) & 1, (i >> 2) & 1);
    for (std::uint64_t s = 0; s < 16; ++s) {
      const auto idx = farthest_point_sample(make_cloud(corners), 2, {s, 7});
      CHECK((corners.col(idx[0]) - corners.col(idx[1])).norm() == doctest::Approx(std::sqrt(3.0)));
    }
  }
  SUBCASE("count out of range") {
    CHECK_THROWS_AS(farthest_point_sample(cloud, 0, {}), InvalidArgument);
    CHECK_THROWS_AS(farthest_point_sample(cloud, 41, {}), InvalidArgument);
  }
}

TEST_CASE("farthest_point_sample properties") {
  SUBCASE("deterministic and distinct") {
    const PointCloud cloud = make_cloud(random_positions(64, {2, 0}));
    const auto a = farthest_point_sample(cloud, 16, {9, 9});
    CHECK(a == farthest_point_sample(cloud, 16, {9, 9}));
    CHECK(std::set<int>(a.begin(), a.end()).size() == a.size());
  }
  SUBCASE("greedy dispersion is within half of the exhaustive optimum") {
    for (std::uint64_t s = 0; s < 6; ++s) {
      const Eigen::Matrix3Xd p = random_positions(14, {100 + s, 0});
      for (int m : {2, 3, 4}) {
        const auto idx = farthest_point_sample(p, m, {s, 1});
        CHECK(min_pairwise(p, idx) >= 0.5 * brute_force_dispersion(p, m) - 1e-12);
      }
    }
  }
}

TEST_CASE("ball_query examples") {
  SUBCASE("tiny radius returns coincident points") {
    Eigen::Matrix3Xd p(3, 5);
    p << 0, 1, 0, 2, 0,  //
        0, 0, 0, 0, 0,   //
        0, 0, 0, 0, 1;
    const auto idx = ball_query(make_cloud(p), Vec3::Zero(), 1e-9, 4);
    CHECK(std::set<int>(idx.begin(), idx.end()) == std::set<int>{0, 2});
  }
  SUBCASE("huge radius returns everything") {
    const PointCloud c = make_cloud(random_positions(30, {5, 0}));
    auto idx = ball_query(c, Vec3::Zero(), 100.0, 30);
    std::sort(idx.begin(), idx.end());
    CHECK(idx.size() == 30);
    CHECK(idx.back() == 29);
  }
  SUBCASE("colinear points") {
    Eigen::Matrix3Xd p = Eigen::Matrix3Xd::Zero(3, 4);
    p.row(0) << 0, 1, 2, 3;
    CHECK(ball_query(make_cloud(p), Vec3::Zero(), 1.5, 2) == std::vector<int>{0, 1});
  }
  SUBCASE("padding rule returns the nearest point") {
    Eigen::Matrix3Xd p = Eigen::Matrix3Xd::Zero(3, 3);
    p.row(0) << 5, 3, 4;
    CHECK(ball_query(make_cloud(p), Vec3::Zero(), 0.5, 4) == std::vector<int>{1});
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(ball_query(Eigen::Matrix3Xd(3, 0), Vec3::Zero(), 1.0, 1), InvalidArgument);
    const PointCloud c = make_cloud(random_positions(3, {1, 1}));
    CHECK_THROWS_AS(ball_query(c, Vec3::Zero(), 0.0, 1), InvalidArgument);
    CHECK_THROWS_AS(ball_query(c, Vec3::Zero(), 1.0, 0), InvalidArgument);
  }
}

TEST_CASE("ball_query results are sorted and inside the radius") {
  const PointCloud c = make_cloud(random_positions(200, {8, 0}));
  Rng rng({8, 1});
  for (int trial = 0; trial < 50; ++trial) {
    const Vec3 center(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
    const double r = rng.uniform(0.05, 0.8);
    const auto idx = ball_query(c, center, r, 16);
    CHECK(idx.size() <= 16);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const double d = (c.position(idx[k]) - center).norm();
      if (idx.size() > 1 || d <= r) CHECK(d <= r);
      if (k > 0) CHECK((c.position(idx[k - 1]) - center).norm() <= d);
    }
  }
}

TEST_CASE("pose_displacement examples") {
  const Pose id;
  CHECK(pose_displacement(id, id, 0.1) == 0.0);
  Pose moved;
  moved.translation = Vec3(0.03, 0, 0.04);
  CHECK(pose_displacement(id, moved, 7.0) == doctest::Approx(0.05).epsilon(1e-12));
  CHECK(pose_displacement(id, rot_z(std::numbers::pi / 2), 0.1) == doctest::Approx(0.05 * std::numbers::pi));

  Pose bad;
  bad.rotation = Quat(2, 0, 0, 0);
  CHECK_THROWS_AS(pose_displacement(id, bad, 0.1), InvalidArgument);
  CHECK_THROWS_AS(pose_displacement(id, id, -1.0), InvalidArgument);
}

TEST_CASE("pose_displacement symmetry and translation triangle inequality") {
  Rng rng({11, 0});
  for (int i = 0; i < 200; ++i) {
    Pose a, b, c;
    a.translation = Vec3(rng.normal(), rng.normal(), rng.normal());
    b.translation = Vec3(rng.normal(), rng.normal(), rng.normal());
    c.translation = Vec3(rng.normal(), rng.normal(), rng.normal());
    CHECK(pose_displacement(a, b, 0.1) == doctest::Approx(pose_displacement(b, a, 0.1)));
    CHECK(pose_displacement(a, c, 0.1) <= pose_displacement(a, b, 0.1) + pose_displacement(b, c, 0.1) + 1e-12);
    a.rotation = Quat(Eigen::AngleAxisd(rng.uniform(0, 3), rng.unit_vector()));
    b.rotation = Quat(Eigen::AngleAxisd(rng.uniform(0, 3), rng.unit_vector()));
    CHECK(pose_displacement(a, b, 0.3) == doctest::Approx(pose_displacement(b, a, 0.3)));
  }
}

TEST_CASE("SeedState streams") {
  const SeedState s{42, 3};
  Rng a(s), b(s);
  for (int i = 0; i < 10; ++i) CHECK(a.uniform() == b.uniform());
  CHECK(!(s.child(1) == s.child(2)));
  CHECK(s.child(5) == s.child(5));
}

TEST_CASE("PointCloud validation") {
  PointCloud c = make_cloud(random_positions(4, {1, 2}));
  CHECK_NOTHROW(c.validate());
  c.normals(0, 1) = 0.5;
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
  CHECK_THROWS_AS(PointCloud{}.validate(), InvalidArgument);
}
