#include "supportaff/env.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <limits>

#include "supportaff/errors.hpp"

namespace supportaff {

std::string_view to_string(TaskType task) {
  switch (task) {
    case TaskType::Screw: return "screw";
    case TaskType::Push: return "push";
    case TaskType::Pull: return "pull";
    case TaskType::Pick: return "pick";
  }
  return "unknown";
}

TaskType parse_task(std::string_view name) {
  for (TaskType t : kAllTasks)
    if (to_string(t) == name) return t;
  throw InvalidArgument("unknown task type: " + std::string(name));
}

void PhysicsParams::validate() const {
  const double values[] = {resist_force, resist_torque, support_force, cone_angle,
                           gain_force,   gain_torque,   epsilon,       rot_weight};
  for (double v : values)
    if (!(v > 0.0) || !std::isfinite(v)) throw InvalidArgument("physics parameters must be positive and finite");
  if (cone_angle >= std::numbers::pi / 2) throw InvalidArgument("contact cone angle must be below pi/2");
}

Vec3 SceneInstance::base_centroid() const {
  Vec3 sum = Vec3::Zero();
  int count = 0;
  for (int i = 0; i < cloud.size(); ++i) {
    if (cloud.part_label[i] != 0) continue;
    sum += cloud.position(i);
    ++count;
  }
  if (count == 0) throw InvalidArgument("scene has no base-part points");
  return sum / count;
}

void SceneInstance::validate() const {
  cloud.validate();
  physics.validate();
  if (p_op < 0 || p_op >= cloud.size()) throw InvalidArgument("operation point index out of range");
  if (!op_wrench.force.allFinite() || !op_wrench.torque.allFinite())
    throw InvalidArgument("operation wrench is not finite");
  if (heuristic_region.empty()) throw InvalidArgument("heuristic region is empty");
  for (int i : heuristic_region)
    if (i < 0 || i >= cloud.size()) throw InvalidArgument("heuristic region index out of range");
  if (steps_to_goal < 1) throw InvalidArgument("steps_to_goal must be >= 1");
}

bool contact_is_valid(const SceneInstance& scene, const SupportAction& action) {
  if (scene.cloud.part_label[action.p_sp] != 0) return false;
  return action.direction.dot(-scene.cloud.normal(action.p_sp)) >= std::cos(scene.physics.cone_angle);
}

double goal_delta_for(double m, double epsilon) {
  if (m < epsilon) return 1.0;
  return std::clamp((2.0 * epsilon - m) / epsilon, 0.0, 1.0);
}

OracleResult displacement_oracle(const SceneInstance& scene, const std::optional<SupportAction>& action) {
  const PhysicsParams& ph = scene.physics;
  const Vec3 c = scene.base_centroid();
  const Vec3 x_op = scene.cloud.position(scene.p_op);

  OracleResult out;
  Vec3 f = scene.op_wrench.force;
  Vec3 tau = scene.op_wrench.torque + (x_op - c).cross(scene.op_wrench.force);
  if (action) {
    if (action->p_sp < 0 || action->p_sp >= scene.cloud.size())
      throw InvalidArgument("support point index out of range");
    if (std::abs(action->direction.norm() - 1.0) > 1e-6) throw InvalidArgument("support direction is not unit length");
    out.contact_valid = contact_is_valid(scene, *action);
    if (out.contact_valid) {
      const Vec3 support = ph.support_force * action->direction;
      f += support;
      tau += (scene.cloud.position(action->p_sp) - c).cross(support);
    }
  }
  out.net_force = f;
  out.net_torque = tau;

  const double excess_f = std::max(0.0, f.norm() - ph.resist_force);
  const double excess_t = std::max(0.0, tau.norm() - ph.resist_torque);
  const double shift = ph.gain_force * excess_f;
  const double turn = ph.gain_torque * excess_t;

  DisplacementBundle& d = out.displacement;
  d.m = shift + turn;
  d.translation = excess_f > 0.0 ? Vec3(f.normalized() * shift) : Vec3::Zero();
  d.rotation = excess_t > 0.0 ? Vec3(tau.normalized() * (turn / ph.rot_weight)) : Vec3::Zero();

  const double angle = d.rotation.norm();
  const Quat dq = angle > 0.0 ? Quat(Eigen::AngleAxisd(angle, d.rotation / angle)) : Quat::Identity();
  out.new_base_pose.translation = scene.base_pose.translation + d.translation;
  out.new_base_pose.rotation = (dq * scene.base_pose.rotation).normalized();
  out.goal_delta = goal_delta_for(d.m, ph.epsilon);
  return out;
}

namespace {

// Rigid motion of every point about the base centroid.
PointCloud move_cloud(const PointCloud& cloud, const Vec3& center, const DisplacementBundle& d) {
  PointCloud out = cloud;
  const double angle = d.rotation.norm();
  if (angle == 0.0 && d.translation.isZero(0.0)) return out;
  const Eigen::Matrix3d rot =
      angle > 0.0 ? Eigen::AngleAxisd(angle, d.rotation / angle).toRotationMatrix() : Eigen::Matrix3d::Identity();
  out.positions = (rot * (cloud.positions.colwise() - center)).colwise() + (center + d.translation);
  out.normals = rot * cloud.normals;
  out.normals.colwise().normalize();
  return out;
}

}  // namespace

StepOutcome step_episode(const SceneInstance& scene, const SupportAction& action) {
  const OracleResult oracle = displacement_oracle(scene, action);
  StepOutcome out;
  out.scene = scene;
  out.scene.cloud = move_cloud(scene.cloud, scene.base_centroid(), oracle.displacement);
  out.scene.base_pose = oracle.new_base_pose;
  out.scene.goal_progress = scene.goal_progress + oracle.goal_delta / scene.steps_to_goal;
  out.displacement = oracle.displacement;
  out.goal_delta = oracle.goal_delta;
  out.result.m = oracle.displacement.m;
  out.result.supported = oracle.displacement.m < scene.physics.epsilon;
  out.result.goal_reached = out.scene.goal_progress >= 1.0 - 1e-12;
  out.result.success = out.result.supported && out.result.goal_reached;
  return out;
}

RoundOutcome run_round(const SceneInstance& scene, const SupportAction& action) {
  RoundOutcome out;
  SceneInstance current = scene;
  const int max_steps = scene.steps_to_goal + 1;
  for (int step = 0; step < max_steps; ++step) {
    StepOutcome s = step_episode(current, action);
    if (step == 0) out.first = s;
    out.steps = step + 1;
    out.result = s.result;
    out.last = s;
    current = std::move(s.scene);
    if (!out.result.supported || out.result.goal_reached) break;
  }
  out.scene = std::move(current);
  return out;
}

Vec3 perturbed_press(const Vec3& normal, double max_angle, Rng& rng) {
  const Vec3 base = -normal.normalized();
  const double angle = rng.uniform() * max_angle;
  const double phi = rng.uniform(0.0, 2.0 * std::numbers::pi);
  if (angle == 0.0) return base;
  const Vec3 helper = std::abs(base.x()) < 0.9 ? Vec3::UnitX() : Vec3::UnitY();
  const Vec3 t1 = base.cross(helper).normalized();
  const Vec3 t2 = base.cross(t1);
  const Vec3 axis = std::cos(phi) * t1 + std::sin(phi) * t2;
  return (Eigen::AngleAxisd(angle, axis) * base).normalized();
}

SupportAction random_support(const SceneInstance& scene, SeedState seed, double max_perturb_rad) {
  Rng rng(seed);
  SupportAction a;
  a.p_sp = rng.index(scene.cloud.size());
  a.direction = perturbed_press(scene.cloud.normal(a.p_sp), max_perturb_rad, rng);
  return a;
}

SupportAction heuristic_support(const SceneInstance& scene, SeedState seed, double max_perturb_rad) {
  if (scene.heuristic_region.empty()) throw InvalidArgument("heuristic region is empty");
  Rng rng(seed);
  SupportAction a;
  a.p_sp = scene.heuristic_region[rng.index(static_cast<int>(scene.heuristic_region.size()))];
  a.direction = perturbed_press(scene.cloud.normal(a.p_sp), max_perturb_rad, rng);
  return a;
}

std::vector<int> oracle_good_points(const SceneInstance& scene) {
  std::vector<int> good;
  for (int i = 0; i < scene.cloud.size(); ++i) {
    if (scene.cloud.part_label[i] != 0) continue;
    const SupportAction a{i, -scene.cloud.normal(i)};
    if (displacement_oracle(scene, a).displacement.m < scene.physics.epsilon) good.push_back(i);
  }
  return good;
}

// ---------------------------------------------------------------------------
// Procedural families

namespace {

struct Patch {
  enum class Kind { Rect, Cylinder, Disk } kind = Kind::Rect;
  Vec3 origin = Vec3::Zero();
  Vec3 u = Vec3::Zero();  // rect edges
  Vec3 v = Vec3::Zero();
  Vec3 normal = Vec3::UnitZ();
  std::optional<std::array<double, 4>> hole;  // s0, s1, t0, t1 in edge coordinates
  double radius = 0.0;                         // cylinder / disk
  double z0 = 0.0, z1 = 0.0;                   // cylinder height range
  int label = 0;
  bool heuristic = false;

  double area() const {
    switch (kind) {
      case Kind::Rect: {
        double a = u.norm() * v.norm();
        if (hole) a *= 1.0 - ((*hole)[1] - (*hole)[0]) * ((*hole)[3] - (*hole)[2]);
        return a;
      }
      case Kind::Cylinder: return 2.0 * std::numbers::pi * radius * (z1 - z0);
      case Kind::Disk: return std::numbers::pi * radius * radius;
    }
    return 0.0;
  }

  void sample(Rng& rng, Vec3& p, Vec3& n) const {
    switch (kind) {
      case Kind::Rect: {
        double s, t;
        do {
          s = rng.uniform();
          t = rng.uniform();
        } while (hole && s > (*hole)[0] && s < (*hole)[1] && t > (*hole)[2] && t < (*hole)[3]);
        p = origin + s * u + t * v;
        n = normal;
        return;
      }
      case Kind::Cylinder: {
        const double phi = rng.uniform(0.0, 2.0 * std::numbers::pi);
        const double z = rng.uniform(z0, z1);
        n = Vec3(std::cos(phi), std::sin(phi), 0.0);
        p = origin + radius * n + Vec3(0, 0, z);
        return;
      }
      case Kind::Disk: {
        const double r = radius * std::sqrt(rng.uniform());
        const double phi = rng.uniform(0.0, 2.0 * std::numbers::pi);
        p = origin + Vec3(r * std::cos(phi), r * std::sin(phi), 0.0);
        n = normal;
        return;
      }
    }
  }
};

Patch rect(Vec3 origin, Vec3 u, Vec3 v, Vec3 normal, int label, bool heuristic = false) {
  Patch p;
  p.kind = Patch::Kind::Rect;
  p.origin = origin;
  p.u = u;
  p.v = v;
  p.normal = normal;
  p.label = label;
  p.heuristic = heuristic;
  return p;
}

Patch cylinder(Vec3 base, double radius, double z0, double z1, int label, bool heuristic = false) {
  Patch p;
  p.kind = Patch::Kind::Cylinder;
  p.origin = base;
  p.radius = radius;
  p.z0 = z0;
  p.z1 = z1;
  p.label = label;
  p.heuristic = heuristic;
  return p;
}

Patch disk(Vec3 center, double radius, Vec3 normal, int label) {
  Patch p;
  p.kind = Patch::Kind::Disk;
  p.origin = center;
  p.radius = radius;
  p.normal = normal;
  p.label = label;
  return p;
}

// Axis-aligned box faces; `skip` masks faces as +x,-x,+y,-y,+z,-z.
void box_faces(std::vector<Patch>& out, Vec3 lo, Vec3 hi, int label, std::array<bool, 6> heuristic,
               std::array<bool, 6> skip = {}) {
  const Vec3 e = hi - lo;
  const Vec3 ex(e.x(), 0, 0), ey(0, e.y(), 0), ez(0, 0, e.z());
  if (!skip[0]) out.push_back(rect(Vec3(hi.x(), lo.y(), lo.z()), ey, ez, Vec3::UnitX(), label, heuristic[0]));
  if (!skip[1]) out.push_back(rect(lo, ey, ez, -Vec3::UnitX(), label, heuristic[1]));
  if (!skip[2]) out.push_back(rect(Vec3(lo.x(), hi.y(), lo.z()), ex, ez, Vec3::UnitY(), label, heuristic[2]));
  if (!skip[3]) out.push_back(rect(lo, ex, ez, -Vec3::UnitY(), label, heuristic[3]));
  if (!skip[4]) out.push_back(rect(Vec3(lo.x(), lo.y(), hi.z()), ex, ey, Vec3::UnitZ(), label, heuristic[4]));
  if (!skip[5]) out.push_back(rect(lo, ex, ey, -Vec3::UnitZ(), label, heuristic[5]));
}

struct Blueprint {
  std::vector<Patch> patches;
  Vec3 op_target = Vec3::Zero();
  int op_label = 1;
  // Wrench is finalised after sampling because some families need the centroid.
  Vec3 op_force = Vec3::Zero();
  Vec3 op_couple = Vec3::Zero();
  double weight = 0.0;  // Pick: body weight acting at the centroid
};

Blueprint screw_blueprint(Rng& rng, Rng& latent) {
  Blueprint bp;
  const double a = rng.uniform(0.15, 0.25), b = rng.uniform(0.15, 0.25), t = rng.uniform(0.04, 0.06);
  box_faces(bp.patches, Vec3(-a, -b, -t / 2), Vec3(a, b, t / 2), 0, {true, true, true, true, false, false});
  const double sx = rng.bernoulli(0.5) ? 1.0 : -1.0, sy = rng.bernoulli(0.5) ? 1.0 : -1.0;
  const double r = rng.uniform(0.02, 0.03), h = rng.uniform(0.2, 0.3);
  const Vec3 foot(sx * (a - 0.06), sy * (b - 0.06), t / 2);
  bp.patches.push_back(cylinder(foot, r, 0.0, h, 1));
  bp.patches.push_back(disk(foot + Vec3(0, 0, h), r, Vec3::UnitZ(), 1));
  bp.op_target = foot + Vec3(r, 0, 0.5 * h);
  const double sign = latent.bernoulli(0.5) ? 1.0 : -1.0;  // hidden thread direction
  bp.op_couple = Vec3(0, 0, sign * rng.uniform(1.6, 2.2));
  return bp;
}

Blueprint drawer_blueprint(Rng& rng, bool pull) {
  Blueprint bp;
  const double L = rng.uniform(0.18, 0.25), W = rng.uniform(0.18, 0.26), H = rng.uniform(0.12, 0.18);
  const double ws = rng.uniform(0.03, 0.05), wt = rng.uniform(0.04, 0.08);
  const double z_lo = rng.uniform(-H + 0.03, -0.3 * H);
  // body: back, sides, top, bottom, front frame around the opening
  box_faces(bp.patches, Vec3(-L, -W, -H), Vec3(L, W, H), 0, {false, !pull, false, false, false, false},
            {true, false, false, false, false, false});
  Patch front = rect(Vec3(L, -W, -H), Vec3(0, 2 * W, 0), Vec3(0, 0, 2 * H), Vec3::UnitX(), 0, pull);
  front.hole = std::array<double, 4>{ws / (2 * W), 1.0 - ws / (2 * W), (z_lo + H) / (2 * H), 1.0 - wt / (2 * H)};
  bp.patches.push_back(front);
  // drawer box protruding from the opening
  const double delta = rng.uniform(0.04, 0.12), gap = 0.005;
  const Vec3 lo(L - 0.02, -W + ws + gap, z_lo + gap), hi(L + delta, W - ws - gap, H - wt - gap);
  box_faces(bp.patches, lo, hi, 1, {}, {false, true, false, false, false, true});
  const double y_h = rng.uniform(0.8 * lo.y(), 0.8 * hi.y());
  const double z_h = rng.uniform(lo.z() + 0.2 * (hi.z() - lo.z()), hi.z() - 0.2 * (hi.z() - lo.z()));
  bp.op_target = Vec3(hi.x(), y_h, z_h);
  bp.op_force = Vec3((pull ? 1.0 : -1.0) * rng.uniform(15.0, 17.5), 0, 0);
  return bp;
}

Blueprint container_blueprint(Rng& rng) {
  Blueprint bp;
  bp.op_label = 0;
  const bool bucket = rng.bernoulli(0.5);
  const double h = rng.uniform(0.2, 0.28), split = 0.6 * h;
  double reach;
  if (bucket) {
    const double r = rng.uniform(0.12, 0.17);
    bp.patches.push_back(cylinder(Vec3::Zero(), r, 0.0, split, 0));
    bp.patches.push_back(cylinder(Vec3::Zero(), r, split, h, 0, true));
    bp.patches.push_back(disk(Vec3::Zero(), r, -Vec3::UnitZ(), 0));
    reach = r;
  } else {
    const double a = rng.uniform(0.11, 0.16), b = rng.uniform(0.11, 0.16);
    box_faces(bp.patches, Vec3(-a, -b, 0), Vec3(a, b, split), 0, {}, {false, false, false, false, true, false});
    box_faces(bp.patches, Vec3(-a, -b, split), Vec3(a, b, h), 0, {true, true, true, true, false, false},
              {false, false, false, false, true, true});
    reach = std::max(a, b);
  }
  const double phi = rng.uniform(0.0, 2.0 * std::numbers::pi);
  bp.op_target = Vec3(1.3 * reach * std::cos(phi), 1.3 * reach * std::sin(phi), 0.92 * h);
  const double lift = rng.uniform(10.0, 12.0);
  bp.weight = rng.uniform(7.0, 9.0);
  bp.op_force = Vec3(0, 0, lift - bp.weight);
  return bp;
}

SceneInstance realise(const Blueprint& bp, TaskType task, Rng& rng, int n_points, const EnvConfig& config) {
  std::vector<double> cdf;
  double total = 0.0;
  for (const Patch& p : bp.patches) {
    total += p.area();
    cdf.push_back(total);
  }
  SceneInstance scene;
  scene.task = task;
  scene.physics = config.physics;
  scene.steps_to_goal = config.steps_to_goal;
  scene.cloud.positions.resize(3, n_points);
  scene.cloud.normals.resize(3, n_points);
  scene.cloud.part_label.resize(n_points);
  for (int i = 0; i < n_points; ++i) {
    const double x = rng.uniform() * total;
    const auto it = std::upper_bound(cdf.begin(), cdf.end(), x);
    const auto k = std::min<std::size_t>(static_cast<std::size_t>(it - cdf.begin()), bp.patches.size() - 1);
    Vec3 p, n;
    bp.patches[k].sample(rng, p, n);
    scene.cloud.positions.col(i) = p;
    scene.cloud.normals.col(i) = n;
    scene.cloud.part_label[i] = bp.patches[k].label;
    if (bp.patches[k].heuristic) scene.heuristic_region.push_back(i);
  }
  // Operation point: nearest sample of the operated part to the target.
  double best = std::numeric_limits<double>::infinity();
  for (int i = 0; i < n_points; ++i) {
    if (scene.cloud.part_label[i] != bp.op_label) continue;
    const double d = (scene.cloud.position(i) - bp.op_target).squaredNorm();
    if (d < best) {
      best = d;
      scene.p_op = i;
    }
  }
  const Vec3 c = scene.base_centroid();
  scene.base_pose.translation = c;
  scene.op_wrench.force = bp.op_force;
  scene.op_wrench.torque = bp.op_couple;
  if (bp.weight > 0.0) scene.op_wrench.torque += (scene.cloud.position(scene.p_op) - c).cross(Vec3(0, 0, bp.weight));
  return scene;
}

}  // namespace

SceneInstance generate_scene(TaskType task, SeedState variant_seed, int n_points, const EnvConfig& config) {
  if (n_points < 128) throw InvalidArgument("generate_scene: n_points must be >= 128");
  config.physics.validate();
  SceneInstance scene;
  const int attempts = std::max(1, config.feasibility_retries);
  for (int attempt = 0; attempt < attempts; ++attempt) {
    const SeedState s = variant_seed.child(static_cast<std::uint64_t>(attempt));
    Rng shape(s.child(1)), points(s.child(2)), latent(variant_seed.child(0x7468726561ULL));
    Blueprint bp;
    switch (task) {
      case TaskType::Screw: bp = screw_blueprint(shape, latent); break;
      case TaskType::Push: bp = drawer_blueprint(shape, false); break;
      case TaskType::Pull: bp = drawer_blueprint(shape, true); break;
      case TaskType::Pick: bp = container_blueprint(shape); break;
    }
    scene = realise(bp, task, points, n_points, config);
    scene.variant_id = variant_seed.seed ^ splitmix64(variant_seed.stream);
    // Feasible: support is needed, and some straight press provides it.
    const bool needs_support = displacement_oracle(scene, std::nullopt).displacement.m >= scene.physics.epsilon;
    if (!scene.heuristic_region.empty() && needs_support && !oracle_good_points(scene).empty()) break;
  }
  if (scene.heuristic_region.empty()) scene.heuristic_region.push_back(scene.p_op);
  return scene;
}

namespace {

struct Hasher {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ULL;
    }
  }
  template <class T>
  void value(const T& v) {
    bytes(&v, sizeof(T));
  }
};

}  // namespace

std::uint64_t scene_hash(const SceneInstance& scene) {
  Hasher h;
  h.bytes(scene.cloud.positions.data(), sizeof(double) * scene.cloud.positions.size());
  h.bytes(scene.cloud.normals.data(), sizeof(double) * scene.cloud.normals.size());
  h.bytes(scene.cloud.part_label.data(), sizeof(int) * scene.cloud.part_label.size());
  h.value(scene.task);
  h.value(scene.p_op);
  h.bytes(scene.op_wrench.force.data(), sizeof(double) * 3);
  h.bytes(scene.op_wrench.torque.data(), sizeof(double) * 3);
  h.bytes(scene.heuristic_region.data(), sizeof(int) * scene.heuristic_region.size());
  h.value(scene.goal_progress);
  h.value(scene.steps_to_goal);
  h.value(scene.variant_id);
  h.bytes(scene.base_pose.translation.data(), sizeof(double) * 3);
  h.bytes(scene.base_pose.rotation.coeffs().data(), sizeof(double) * 4);
  const PhysicsParams& ph = scene.physics;
  for (double v : {ph.resist_force, ph.resist_torque, ph.support_force, ph.cone_angle, ph.gain_force, ph.gain_torque,
                   ph.epsilon, ph.rot_weight})
    h.value(v);
  return h.h;
}

}  // namespace supportaff
