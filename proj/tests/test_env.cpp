#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numbers>

#include "supportaff/env.hpp"
#include "supportaff/errors.hpp"

using namespace supportaff;

namespace {

// Square slab of half-width 0.2 centred at the origin: a grid on each side
// face plus a denser grid on top and bottom, symmetric so the centroid is 0.
// The heuristic region is the side-face band whose inward press opposes the
// +z torque. The last point is the op point, a label-1 stub on the top face,
// so it does not move the base centroid.
SceneInstance hand_screw_scene(double op_torque = 2.0) {
  std::vector<Vec3> pos, nrm;
  std::vector<int> label, region;
  const double h = 0.2;
  for (int i = -4; i <= 4; ++i) {
    const double s = 0.05 * i;
    const Vec3 faces[4][2] = {{Vec3(s, h, 0), Vec3::UnitY()},
                              {Vec3(s, -h, 0), -Vec3::UnitY()},
                              {Vec3(h, s, 0), Vec3::UnitX()},
                              {Vec3(-h, s, 0), -Vec3::UnitX()}};
    for (const auto& f : faces) {
      if (f[0].cross(-f[1]).z() < 0.0) region.push_back(static_cast<int>(pos.size()));
      pos.push_back(f[0]);
      nrm.push_back(f[1]);
      label.push_back(0);
    }
  }
  for (int i = -3; i <= 3; ++i)
    for (int j = -3; j <= 3; ++j)
      for (double z : {0.02, -0.02}) {
        pos.push_back(Vec3(0.05 * i, 0.05 * j, z));
        nrm.push_back(Vec3(0, 0, z > 0 ? 1.0 : -1.0));
        label.push_back(0);
      }
  pos.push_back(Vec3(0.1, 0.1, 0.05));
  nrm.push_back(Vec3::UnitZ());
  label.push_back(1);

  SceneInstance s;
  const int n = static_cast<int>(pos.size());
  s.cloud.positions.resize(3, n);
  s.cloud.normals.resize(3, n);
  for (int i = 0; i < n; ++i) {
    s.cloud.positions.col(i) = pos[i];
    s.cloud.normals.col(i) = nrm[i];
  }
  s.cloud.part_label = label;
  s.heuristic_region = region;
  s.p_op = n - 1;
  s.task = TaskType::Screw;
  s.op_wrench.torque = Vec3(0, 0, op_torque);
  s.physics.resist_force = 1e3;
  s.physics.resist_torque = 1.0;
  s.physics.gain_torque = 0.05;
  s.physics.support_force = 10.0;
  s.base_pose.translation = s.base_centroid();
  return s;
}

int index_of(const SceneInstance& s, const Vec3& p) {
  for (int i = 0; i < s.cloud.size(); ++i)
    if ((s.cloud.position(i) - p).norm() < 1e-12) return i;
  FAIL("point not found");
  return -1;
}

SupportAction press(const SceneInstance& s, int i) { return {i, -s.cloud.normal(i)}; }

}  // namespace

TEST_CASE("generate_scene examples") {
  SUBCASE("deterministic") {
    const SceneInstance a = generate_scene(TaskType::Screw, {17, 0}, 1024);
    const SceneInstance b = generate_scene(TaskType::Screw, {17, 0}, 1024);
    CHECK(scene_hash(a) == scene_hash(b));
    CHECK(a.cloud.positions == b.cloud.positions);
    CHECK(a.cloud.size() == 1024);
  }
  SUBCASE("pick force points up") {
    for (std::uint64_t s = 0; s < 30; ++s)
      CHECK(generate_scene(TaskType::Pick, {s, 1}, 256).op_wrench.force.z() > 0.0);
  }
  SUBCASE("hidden thread direction is balanced") {
    int plus = 0;
    for (std::uint64_t s = 0; s < 100; ++s)
      if (generate_scene(TaskType::Screw, {s, 2}, 128).op_wrench.torque.z() > 0.0) ++plus;
    CHECK(plus >= 35);
    CHECK(plus <= 65);
  }
  SUBCASE("too few points") { CHECK_THROWS_AS(generate_scene(TaskType::Push, {1, 1}, 127), InvalidArgument); }
}

TEST_CASE("generated scenes satisfy their invariants") {
  for (TaskType task : kAllTasks) {
    for (std::uint64_t s = 0; s < 10; ++s) {
      const SceneInstance scene = generate_scene(task, {s, 3}, 256);
      CHECK_NOTHROW(scene.validate());
      CHECK(scene.goal_progress == 0.0);
      CHECK(!oracle_good_points(scene).empty());
      CHECK(displacement_oracle(scene, std::nullopt).displacement.m >= scene.physics.epsilon);
      CHECK((scene.base_pose.translation - scene.base_centroid()).norm() < 1e-12);
    }
  }
}

TEST_CASE("displacement_oracle examples") {
  SUBCASE("loads within budget need no support") {
    SceneInstance s = hand_screw_scene(0.5);
    CHECK(displacement_oracle(s, std::nullopt).displacement.m == 0.0);
  }
  SUBCASE("anti-parallel support at the centroid cancels the load") {
    SceneInstance s = hand_screw_scene(0.0);
    s.physics.resist_force = 1.0;
    s.physics.resist_torque = 0.1;
    // Extra base points at the centroid: one to push on, one for the op.
    const int n = s.cloud.size();
    s.cloud.positions.conservativeResize(3, n + 2);
    s.cloud.normals.conservativeResize(3, n + 2);
    s.cloud.positions.col(n).setZero();
    s.cloud.normals.col(n) = Vec3::UnitX();
    s.cloud.positions.col(n + 1).setZero();
    s.cloud.normals.col(n + 1) = Vec3::UnitZ();
    s.cloud.part_label.push_back(0);
    s.cloud.part_label.push_back(0);
    s.p_op = n + 1;
    s.op_wrench.force = Vec3(10, 0, 0);
    REQUIRE(s.base_centroid().norm() < 1e-12);
    const OracleResult r = displacement_oracle(s, SupportAction{n, -Vec3::UnitX()});
    CHECK(r.contact_valid);
    CHECK(r.net_force.norm() < 1e-12);
    CHECK(r.net_torque.norm() < 1e-12);
    CHECK(r.displacement.m == 0.0);
  }
  SUBCASE("screw torque balance by hand") {
    const SceneInstance s = hand_screw_scene();
    const int good = index_of(s, Vec3(0.15, 0.2, 0));
    const int bad = index_of(s, Vec3(-0.15, 0.2, 0));
    const OracleResult g = displacement_oracle(s, press(s, good));
    CHECK(g.net_torque.z() == doctest::Approx(0.5));
    CHECK(g.displacement.m == 0.0);
    const OracleResult b = displacement_oracle(s, press(s, bad));
    CHECK(b.net_torque.z() == doctest::Approx(3.5));
    CHECK(b.displacement.m == doctest::Approx(0.125));
  }
  SUBCASE("screw hand formula over the face grid") {
    const SceneInstance s = hand_screw_scene();
    for (int i = -4; i <= 4; ++i) {
      const double x = 0.05 * i;
      const int p = index_of(s, Vec3(x, 0.2, 0));
      const double expected = 0.05 * std::max(0.0, std::abs(2.0 - 10.0 * x) - 1.0);
      CHECK(displacement_oracle(s, press(s, p)).displacement.m == doctest::Approx(expected).epsilon(1e-12));
    }
  }
  SUBCASE("bad index") {
    const SceneInstance s = hand_screw_scene();
    CHECK_THROWS_AS(displacement_oracle(s, SupportAction{-1, Vec3::UnitZ()}), InvalidArgument);
    CHECK_THROWS_AS(displacement_oracle(s, SupportAction{s.cloud.size(), Vec3::UnitZ()}), InvalidArgument);
  }
}

TEST_CASE("oracle pose update realises m") {
  Rng rng({5, 5});
  for (TaskType task : kAllTasks) {
    const SceneInstance s = generate_scene(task, {21, 0}, 256);
    for (int k = 0; k < 40; ++k) {
      const SupportAction a = random_support(s, {static_cast<std::uint64_t>(k), 9}, 0.5);
      const OracleResult r = displacement_oracle(s, a);
      CHECK(pose_displacement(s.base_pose, r.new_base_pose, s.physics.rot_weight) ==
            doctest::Approx(r.displacement.m).epsilon(1e-9));
      CHECK(r.goal_delta >= 0.0);
      CHECK(r.goal_delta <= 1.0);
    }
  }
}

TEST_CASE("oracle monotonicity in support force") {
  // Torque-only load with an opposing press at lever l; valid while the support
  // does not overshoot the torque (F_s <= T / l) or the force budget.
  Rng rng({6, 0});
  for (int trial = 0; trial < 100; ++trial) {
    const double torque = rng.uniform(1.2, 3.0);
    SceneInstance s = hand_screw_scene(torque);
    s.physics.resist_force = rng.uniform(5.0, 50.0);
    const int p = index_of(s, Vec3(0.05 * (1 + rng.index(4)), 0.2, 0));
    const double lever = s.cloud.position(p).x();
    const double cap = std::min(torque / lever, s.physics.resist_force);
    double prev = std::numeric_limits<double>::infinity();
    for (int k = 0; k <= 20; ++k) {
      s.physics.support_force = std::max(1e-6, cap * k / 20.0);
      const double m = displacement_oracle(s, press(s, p)).displacement.m;
      CHECK(m <= prev + 1e-12);
      prev = m;
    }
  }
}

TEST_CASE("invalid contacts act like no support") {
  Rng rng({7, 0});
  for (TaskType task : kAllTasks) {
    const SceneInstance s = generate_scene(task, {31, 1}, 256);
    const double none = displacement_oracle(s, std::nullopt).displacement.m;
    int tested = 0;
    while (tested < 50) {
      SupportAction a{rng.index(s.cloud.size()), rng.unit_vector()};
      if (a.direction.dot(-s.cloud.normal(a.p_sp)) >= std::cos(s.physics.cone_angle)) continue;
      CHECK(!contact_is_valid(s, a));
      CHECK(displacement_oracle(s, a).displacement.m == none);
      ++tested;
    }
  }
}

TEST_CASE("step_episode examples") {
  SUBCASE("perfect support reaches the goal") {
    SceneInstance s = hand_screw_scene();
    const int p = index_of(s, Vec3(0.15, 0.2, 0));
    for (int k = 0; k < s.steps_to_goal; ++k) {
      const StepOutcome o = step_episode(s, press(s, p));
      CHECK(o.result.supported);
      CHECK(o.result.success == (k + 1 == s.steps_to_goal));
      s = o.scene;
    }
  }
  SUBCASE("large displacement stalls progress") {
    SceneInstance s = hand_screw_scene();
    const int p = index_of(s, Vec3(-0.15, 0.2, 0));
    for (int k = 0; k < 6; ++k) {
      const StepOutcome o = step_episode(s, press(s, p));
      CHECK(o.result.m >= 2 * s.physics.epsilon);
      CHECK(o.scene.goal_progress == 0.0);
      CHECK(!o.result.success);
      s = o.scene;
    }
  }
  SUBCASE("one bad step at 1.5 epsilon then perfect steps") {
    SceneInstance s = hand_screw_scene();
    // 2 - 10x = 1.6 gives e = 0.6 and m = 0.03 = 1.5 epsilon. The mirrored
    // point moves too so the centroid stays at the origin.
    s.cloud.positions.col(index_of(s, Vec3(0.05, 0.2, 0))) = Vec3(0.04, 0.2, 0);
    s.cloud.positions.col(index_of(s, Vec3(-0.05, -0.2, 0))) = Vec3(-0.04, -0.2, 0);
    const int bad = index_of(s, Vec3(0.04, 0.2, 0));
    const int good = index_of(s, Vec3(0.15, 0.2, 0));
    StepOutcome o = step_episode(s, press(s, bad));
    CHECK(o.result.m == doctest::Approx(1.5 * s.physics.epsilon));
    CHECK(o.goal_delta == doctest::Approx(0.5));
    int steps = 1;
    while (!o.result.goal_reached) {
      o = step_episode(o.scene, press(o.scene, good));
      CHECK(o.result.supported);
      ++steps;
    }
    CHECK(steps == s.steps_to_goal + 1);
    CHECK(o.result.success);
  }
}

TEST_CASE("episodes replay identically and success implies support") {
  for (TaskType task : kAllTasks) {
    const SceneInstance s = generate_scene(task, {41, 0}, 256);
    for (std::uint64_t k = 0; k < 20; ++k) {
      const SupportAction a = heuristic_support(s, {k, 1}, 10.0 * std::numbers::pi / 180);
      const RoundOutcome r1 = run_round(s, a);
      const RoundOutcome r2 = run_round(s, a);
      CHECK(r1.result.m == r2.result.m);
      CHECK(r1.result.success == r2.result.success);
      CHECK(r1.steps == r2.steps);
      CHECK(scene_hash(r1.scene) == scene_hash(r2.scene));
      if (r1.result.success) {
        CHECK(r1.result.supported);
        CHECK(r1.scene.goal_progress >= 1.0 - 1e-12);
      }
    }
  }
}

TEST_CASE("random_support examples") {
  const SceneInstance s = generate_scene(TaskType::Push, {3, 0}, 256);
  SUBCASE("zero perturbation presses along the inward normal") {
    for (std::uint64_t k = 0; k < 20; ++k) {
      const SupportAction a = random_support(s, {k, 0}, 0.0);
      CHECK((a.direction + s.cloud.normal(a.p_sp)).norm() == 0.0);
    }
  }
  SUBCASE("deterministic") {
    const SupportAction a = random_support(s, {9, 1}, 0.5);
    const SupportAction b = random_support(s, {9, 1}, 0.5);
    CHECK(a.p_sp == b.p_sp);
    CHECK(a.direction == b.direction);
  }
  SUBCASE("perturbation stays within the cap") {
    for (std::uint64_t k = 0; k < 200; ++k) {
      const SupportAction a = random_support(s, {k, 2}, 30.0 * std::numbers::pi / 180);
      CHECK(std::abs(a.direction.norm() - 1.0) < 1e-12);
      CHECK(a.direction.dot(-s.cloud.normal(a.p_sp)) >= std::cos(30.0 * std::numbers::pi / 180) - 1e-12);
    }
  }
  SUBCASE("point histogram is uniform (chi-square within 3 sigma)") {
    const int n = s.cloud.size(), draws = 10000;
    std::vector<int> hist(n, 0);
    for (int k = 0; k < draws; ++k) ++hist[random_support(s, {static_cast<std::uint64_t>(k), 3}, 0.5).p_sp];
    const double expected = static_cast<double>(draws) / n;
    double chi2 = 0.0;
    for (int h : hist) chi2 += (h - expected) * (h - expected) / expected;
    const double dof = n - 1;
    CHECK(std::abs(chi2 - dof) <= 3.0 * std::sqrt(2.0 * dof));
  }
}

TEST_CASE("heuristic_support examples") {
  const SceneInstance s = hand_screw_scene();
  const double cap = 10.0 * std::numbers::pi / 180;
  SUBCASE("point in region and deterministic") {
    for (std::uint64_t k = 0; k < 100; ++k) {
      const SupportAction a = heuristic_support(s, {k, 4}, cap);
      CHECK(std::find(s.heuristic_region.begin(), s.heuristic_region.end(), a.p_sp) != s.heuristic_region.end());
      const SupportAction b = heuristic_support(s, {k, 4}, cap);
      CHECK(a.p_sp == b.p_sp);
      CHECK(a.direction == b.direction);
    }
  }
  SUBCASE("heuristic beats random by 20 points on the hand example") {
    int heur = 0, rnd = 0;
    for (std::uint64_t k = 0; k < 100; ++k) {
      heur += run_round(s, heuristic_support(s, {k, 5}, cap)).result.success;
      rnd += run_round(s, random_support(s, {k, 6}, 30.0 * std::numbers::pi / 180)).result.success;
    }
    MESSAGE("heuristic " << heur << " random " << rnd);
    CHECK(heur - rnd >= 20);
  }
}

TEST_CASE("task names round-trip") {
  for (TaskType t : kAllTasks) CHECK(parse_task(to_string(t)) == t);
  CHECK_THROWS_AS(parse_task("drill"), InvalidArgument);
}
