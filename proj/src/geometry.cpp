#include "supportaff/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "supportaff/errors.hpp"

namespace supportaff {

void PointCloud::validate() const {
  const auto n = positions.cols();
  if (n < 1) throw InvalidArgument("point cloud is empty");
  if (normals.cols() != n || static_cast<Eigen::Index>(part_label.size()) != n)
    throw InvalidArgument("point cloud arrays disagree on point count");
  if (!positions.allFinite()) throw InvalidArgument("point cloud has non-finite positions");
  for (Eigen::Index i = 0; i < n; ++i) {
    if (std::abs(normals.col(i).norm() - 1.0) > 1e-6)
      throw InvalidArgument("point cloud normal is not unit length");
  }
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

SeedState SeedState::child(std::uint64_t key) const {
  return {seed, splitmix64(stream ^ splitmix64(key + 0x632BE59BD9B4E019ULL))};
}

Rng::Rng(SeedState state) {
  std::seed_seq seq{static_cast<std::uint32_t>(state.seed), static_cast<std::uint32_t>(state.seed >> 32),
                    static_cast<std::uint32_t>(state.stream), static_cast<std::uint32_t>(state.stream >> 32)};
  engine_.seed(seq);
}

double Rng::uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double Rng::normal() { return normal_(engine_); }

int Rng::index(int n) { return std::uniform_int_distribution<int>(0, n - 1)(engine_); }

Vec3 Rng::unit_vector() {
  for (;;) {
    Vec3 v(normal(), normal(), normal());
    const double len = v.norm();
    if (len > 1e-12) return v / len;
  }
}

std::vector<int> farthest_point_sample(const Eigen::Matrix3Xd& positions, int count, SeedState seed) {
  const int n = static_cast<int>(positions.cols());
  if (count < 1 || count > n) throw InvalidArgument("farthest_point_sample: count must be in [1, N]");
  Rng rng(seed);
  std::vector<int> chosen;
  chosen.reserve(count);
  chosen.push_back(rng.index(n));
  Eigen::VectorXd min_d2 = Eigen::VectorXd::Constant(n, std::numeric_limits<double>::infinity());
  while (static_cast<int>(chosen.size()) < count) {
    const Vec3 last = positions.col(chosen.back());
    int best = -1;
    double best_d2 = -1.0;
    for (int i = 0; i < n; ++i) {
      min_d2[i] = std::min(min_d2[i], (positions.col(i) - last).squaredNorm());
      if (min_d2[i] > best_d2) {
        best_d2 = min_d2[i];
        best = i;
      }
    }
    chosen.push_back(best);
  }
  return chosen;
}

std::vector<int> farthest_point_sample(const PointCloud& cloud, int count, SeedState seed) {
  return farthest_point_sample(cloud.positions, count, seed);
}

std::vector<int> ball_query(const Eigen::Matrix3Xd& positions, const Vec3& center, double radius, int max_k) {
  const int n = static_cast<int>(positions.cols());
  if (n == 0) throw InvalidArgument("ball_query: empty cloud");
  if (!(radius > 0.0) || max_k < 1) throw InvalidArgument("ball_query: radius must be > 0 and max_k >= 1");
  Eigen::VectorXd d2(n);
  for (int i = 0; i < n; ++i) d2[i] = (positions.col(i) - center).squaredNorm();
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  const double r2 = radius * radius;
  std::vector<int> inside;
  for (int i : order)
    if (d2[i] <= r2) inside.push_back(i);
  auto by_distance = [&](int a, int b) { return d2[a] < d2[b] || (d2[a] == d2[b] && a < b); };
  if (inside.empty()) return {*std::min_element(order.begin(), order.end(), by_distance)};
  const auto keep = std::min<std::size_t>(inside.size(), static_cast<std::size_t>(max_k));
  std::partial_sort(inside.begin(), inside.begin() + static_cast<std::ptrdiff_t>(keep), inside.end(), by_distance);
  inside.resize(keep);
  return inside;
}

std::vector<int> ball_query(const PointCloud& cloud, const Vec3& center, double radius, int max_k) {
  return ball_query(cloud.positions, center, radius, max_k);
}

namespace {

void require_unit(const Quat& q) {
  if (std::abs(q.norm() - 1.0) > 1e-6) throw InvalidArgument("quaternion is not unit norm");
}

}  // namespace

double rotation_angle(const Quat& a, const Quat& b) {
  const Quat rel = a.conjugate() * b;
  const double w = std::min(1.0, std::abs(rel.w()) / rel.norm());
  const double v = rel.vec().norm() / rel.norm();
  return 2.0 * std::atan2(v, w);
}

double pose_displacement(const Pose& before, const Pose& after, double rot_weight) {
  if (rot_weight < 0.0) throw InvalidArgument("pose_displacement: rot_weight must be >= 0");
  require_unit(before.rotation);
  require_unit(after.rotation);
  return (after.translation - before.translation).norm() + rot_weight * rotation_angle(before.rotation, after.rotation);
}

Vec3 axis_angle(const Quat& q) {
  Quat u = q.normalized();
  if (u.w() < 0.0) u.coeffs() = -u.coeffs();
  const double s = u.vec().norm();
  if (s < 1e-15) return Vec3::Zero();
  const double angle = 2.0 * std::atan2(s, u.w());
  return u.vec() / s * angle;
}

}  // namespace supportaff
