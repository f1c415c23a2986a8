#pragma once

#include <vector>

#include "supportaff/policy.hpp"

namespace supportaff::testing {

/// Every width small enough for finite differences to stay cheap.
inline ModelConfig tiny_config() {
  ModelConfig c;
  c.encoder.sa_widths = {{{6, 8}, {8}, {8}}};
  c.encoder.fp_widths = {{{8, 8}, {8}, {8}}};
  c.encoder.small_hidden = 8;
  c.encoder.small_dim = 4;
  c.context_dim = 6;
  c.latent_dim = 5;
  c.affordance_hidden = {8};
  c.scoring_hidden = {8};
  c.posterior_hidden = {8};
  c.decoder_hidden = {8};
  c.context_hidden = {8};
  c.attention_hidden = {4};
  return c;
}

struct Fixture {
  ModelConfig config;
  ModelWeights w;
  SceneInstance scene;
  HierarchyPlan plan;
  int p_op = 0;

  Fixture(const ModelConfig& cfg, std::uint64_t seed, TaskType task = TaskType::Screw, int n = 128)
      : config(cfg),
        w(make_model(cfg, {seed, 1})),
        scene(generate_scene(task, {seed, 2}, n)),
        plan(plan_hierarchy(scene.cloud, cfg.encoder)),
        p_op(scene.p_op) {}
};

struct Sample {
  Vec3 direction;
  double score = 0.0;
};

/// Re-enumerates the n_dirs prior samples at `point` one at a time through
/// the public per-sample operations, bypassing the batched candidate path.
inline std::vector<Sample> enumerate_samples(const ModelWeights& w, const HierarchyPlan& plan, int p_op, int point,
                                             const nn::Vec& f_I, int n_dirs, SeedState seed) {
  const auto pos = [&](const nn::Mlp& m, int i) {
    return nn::Vec(nn::forward(m, nn::Mat(plan.positions[0].col(i))).col(0));
  };
  const std::vector<int> rows{p_op, point};
  const nn::Mat pr = encode_rows(w.proposal.enc.cloud, plan, rows);
  const nn::Mat sr = encode_rows(w.scoring.enc.cloud, plan, rows);
  const nn::Vec cond = make_condition(pr.col(0), pr.col(1), pos(w.proposal.enc.position, p_op),
                                      pos(w.proposal.enc.position, point), f_I);
  const nn::Mat z = candidate_latents(seed, point, w.config.latent_dim, n_dirs);
  std::vector<Sample> out;
  for (int j = 0; j < n_dirs; ++j) {
    const Vec3 d = propose_decode(z.col(j), cond, w.proposal);
    const nn::Vec f_d = nn::forward(w.scoring.enc.direction, nn::Mat(d)).col(0);
    out.push_back({d, score_action(sr.col(0), sr.col(1), pos(w.scoring.enc.position, p_op),
                                   pos(w.scoring.enc.position, point), f_d, f_I, w.scoring)});
  }
  return out;
}

}  // namespace supportaff::testing
