#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace supportaff {

using Vec3 = Eigen::Vector3d;
using Quat = Eigen::Quaterniond;

/// Surface samples of an assembly: one column per point.
struct PointCloud {
  Eigen::Matrix3Xd positions;
  Eigen::Matrix3Xd normals;
  std::vector<int> part_label;  // base part = 0

  int size() const { return static_cast<int>(positions.cols()); }
  Vec3 position(int i) const { return positions.col(i); }
  Vec3 normal(int i) const { return normals.col(i); }

  /// Throws InvalidArgument on empty clouds, shape mismatches, non-finite
  /// positions or normals that are not unit length within 1e-6.
  void validate() const;
};

struct Pose {
  Vec3 translation = Vec3::Zero();
  Quat rotation = Quat::Identity();
};

/// Root of every random draw. Identical (seed, stream) pairs produce identical
/// sequences; child() derives independent sub-streams.
struct SeedState {
  std::uint64_t seed = 0;
  std::uint64_t stream = 0;

  SeedState child(std::uint64_t key) const;
  friend bool operator==(const SeedState&, const SeedState&) = default;
};

std::uint64_t splitmix64(std::uint64_t x);

class Rng {
 public:
  explicit Rng(SeedState state);

  double uniform();                  // [0, 1)
  double uniform(double lo, double hi);
  double normal();
  int index(int n);                  // uniform over [0, n)
  Vec3 unit_vector();
  bool bernoulli(double p) { return uniform() < p; }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

/// Greedy max-min subsampling; the first index is drawn from `seed`, ties go to
/// the lowest index.
std::vector<int> farthest_point_sample(const Eigen::Matrix3Xd& positions, int count, SeedState seed);
std::vector<int> farthest_point_sample(const PointCloud& cloud, int count, SeedState seed);

/// Points within `radius` of `center`, nearest first (ties by index), at most
/// `max_k`. When nothing lies inside the radius the single nearest point is
/// returned so downstream groups are never empty.
std::vector<int> ball_query(const Eigen::Matrix3Xd& positions, const Vec3& center, double radius, int max_k);
std::vector<int> ball_query(const PointCloud& cloud, const Vec3& center, double radius, int max_k);

/// Geodesic angle of the relative rotation between two unit quaternions.
double rotation_angle(const Quat& a, const Quat& b);

/// ||dt|| + rot_weight * angle(dR).
double pose_displacement(const Pose& before, const Pose& after, double rot_weight);

/// Rotation vector (axis * angle) of a unit quaternion, angle in [0, pi].
Vec3 axis_angle(const Quat& q);

}  // namespace supportaff
