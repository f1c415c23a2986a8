#pragma once

#include <cstdint>
#include <numbers>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "supportaff/geometry.hpp"

namespace supportaff {

enum class TaskType : std::uint8_t { Screw = 0, Push = 1, Pull = 2, Pick = 3 };

inline constexpr TaskType kAllTasks[] = {TaskType::Screw, TaskType::Push, TaskType::Pull, TaskType::Pick};

std::string_view to_string(TaskType task);
TaskType parse_task(std::string_view name);  // throws InvalidArgument

/// Quasi-static contact model. Support and operation wrenches are summed about
/// the base centroid; whatever exceeds the resist budgets turns into motion.
struct PhysicsParams {
  double resist_force = 12.0;                 // N
  double resist_torque = 0.8;                 // N m
  double support_force = 10.0;                // N
  double cone_angle = std::numbers::pi / 4;   // rad
  double gain_force = 0.01;                   // m / N
  double gain_torque = 0.05;                  // m / (N m)
  double epsilon = 0.02;                      // m
  double rot_weight = 0.1;                    // m / rad

  void validate() const;
};

struct EnvConfig {
  PhysicsParams physics;
  int steps_to_goal = 4;
  int n_points = 256;
  double random_perturb_deg = 30.0;
  double heuristic_perturb_deg = 10.0;
  int feasibility_retries = 64;
  // A failed attempt is undone before the next one, so later observations
  // show the pre-attempt pose and the failure is visible only as context.
  bool restore_after_failure = true;
};

struct Wrench {
  Vec3 force = Vec3::Zero();   // N, applied at the operation point
  Vec3 torque = Vec3::Zero();  // N m, pure couple
};

struct SupportAction {
  int p_sp = 0;
  Vec3 direction = Vec3::UnitZ();
};

/// Base-part motion produced by one operation step: the scalar m plus the
/// translation and rotation (axis * angle) that realise it.
struct DisplacementBundle {
  double m = 0.0;
  Vec3 translation = Vec3::Zero();
  Vec3 rotation = Vec3::Zero();
};

struct SceneInstance {
  PointCloud cloud;
  Pose base_pose;  // translation tracks the base centroid
  TaskType task = TaskType::Screw;
  int p_op = 0;
  Wrench op_wrench;
  PhysicsParams physics;
  std::vector<int> heuristic_region;
  double goal_progress = 0.0;
  int steps_to_goal = 4;
  std::uint64_t variant_id = 0;

  Vec3 base_centroid() const;
  void validate() const;
};

struct OracleResult {
  DisplacementBundle displacement;
  Pose new_base_pose;
  double goal_delta = 0.0;
  bool contact_valid = false;
  Vec3 net_force = Vec3::Zero();
  Vec3 net_torque = Vec3::Zero();
};

struct EpisodeResult {
  double m = 0.0;
  bool supported = false;
  bool goal_reached = false;
  bool success = false;
};

struct StepOutcome {
  SceneInstance scene;
  DisplacementBundle displacement;
  double goal_delta = 0.0;
  EpisodeResult result;
};

/// One support attempt held until the goal is reached or a step leaves the
/// base unsupported. `first` and `last` are the outcomes of the attempt's first
/// and final steps; the round succeeded iff the final step was supported.
struct RoundOutcome {
  StepOutcome first;
  StepOutcome last;
  SceneInstance scene;
  int steps = 0;
  EpisodeResult result;
};

bool contact_is_valid(const SceneInstance& scene, const SupportAction& action);
OracleResult displacement_oracle(const SceneInstance& scene, const std::optional<SupportAction>& action);
double goal_delta_for(double m, double epsilon);
StepOutcome step_episode(const SceneInstance& scene, const SupportAction& action);
RoundOutcome run_round(const SceneInstance& scene, const SupportAction& action);

SceneInstance generate_scene(TaskType task, SeedState variant_seed, int n_points, const EnvConfig& config = {});

/// -normal(p) tilted by an angle drawn uniformly in [0, max_angle] about a
/// uniformly drawn tangent axis.
Vec3 perturbed_press(const Vec3& normal, double max_angle, Rng& rng);

SupportAction random_support(const SceneInstance& scene, SeedState seed, double max_perturb_rad);
SupportAction heuristic_support(const SceneInstance& scene, SeedState seed, double max_perturb_rad);

/// Base points where pressing straight along -normal keeps m below epsilon.
std::vector<int> oracle_good_points(const SceneInstance& scene);

/// Stable 64-bit digest of every scene field; used for paired-seed checks.
std::uint64_t scene_hash(const SceneInstance& scene);

}  // namespace supportaff
