#include "supportaff/policy.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "supportaff/errors.hpp"

namespace supportaff {

using nn::Activation;
using nn::Mat;
using nn::Vec;

namespace {

std::vector<int> widths(int in, const std::vector<int>& hidden, int out) {
  std::vector<int> w{in};
  w.insert(w.end(), hidden.begin(), hidden.end());
  w.push_back(out);
  return w;
}

Mat column(const Vec3& v) { return Mat(v); }

Mat two_positions(const PairInput& in) {
  if (in.cached_positions) return *in.cached_positions;
  Mat m(3, 2);
  m.col(0) = in.plan->positions[0].col(in.p_op);
  m.col(1) = in.plan->positions[0].col(in.p_sp);
  return m;
}

void add_mlp(nn::Mlp& m, const std::string& name, nn::ParamList& out) { nn::append_params(m, name, out); }

void add_cloud(CloudEncoder& c, const std::string& prefix, nn::ParamList& out) {
  for (int l = 0; l < 3; ++l) add_mlp(c.sa[l], prefix + ".sa" + std::to_string(l), out);
  for (int l = 0; l < 3; ++l) add_mlp(c.fp[l], prefix + ".fp" + std::to_string(l), out);
}

void add_small(EncoderWeights& e, const std::string& prefix, nn::ParamList& out) {
  add_mlp(e.position, prefix + ".position", out);
  add_mlp(e.direction, prefix + ".direction", out);
  add_mlp(e.displacement, prefix + ".displacement", out);
}

void zero_mlp(nn::Mlp& m) {
  for (auto& d : m.layers) {
    d.weight.setZero();
    d.bias.setZero();
  }
}

void zero_encoder(EncoderWeights& e) {
  for (auto& m : e.cloud.sa) zero_mlp(m);
  for (auto& m : e.cloud.fp) zero_mlp(m);
  zero_mlp(e.position);
  zero_mlp(e.direction);
  zero_mlp(e.displacement);
}

}  // namespace

void ModelConfig::validate() const {
  encoder.validate();
  if (context_dim < 1 || latent_dim < 1) throw InvalidArgument("model config: dimensions must be positive");
}

std::size_t ModelWeights::parameter_count() const {
  ModelWeights copy = *this;
  return nn::count(model_params(copy, ParamGroup::All));
}

ModelWeights make_model(const ModelConfig& config, SeedState seed) {
  config.validate();
  ModelWeights w;
  w.config = config;
  const int s = config.small_dim(), cond = config.condition_dim();
  {
    Rng rng(seed.child(1));
    w.affordance.enc = make_encoder_weights(config.encoder, {}, rng);
    w.affordance.mlp = nn::make_mlp(widths(config.affordance_input_dim(), config.affordance_hidden, 1),
                                    Activation::Silu, Activation::Sigmoid, rng);
  }
  {
    Rng rng(seed.child(2));
    w.proposal.enc = make_encoder_weights(config.encoder, {.direction = true}, rng);
    w.proposal.posterior = nn::make_mlp(widths(cond + s, config.posterior_hidden, 2 * config.latent_dim),
                                        Activation::Silu, Activation::Identity, rng);
    w.proposal.decoder = nn::make_mlp(widths(cond + config.latent_dim, config.decoder_hidden, 3), Activation::Silu,
                                      Activation::Identity, rng);
  }
  {
    Rng rng(seed.child(3));
    w.scoring.enc = make_encoder_weights(config.encoder, {.direction = true}, rng);
    w.scoring.mlp =
        nn::make_mlp(widths(cond + s, config.scoring_hidden, 1), Activation::Silu, Activation::Sigmoid, rng);
  }
  {
    Rng rng(seed.child(4));
    w.context.enc = make_encoder_weights(config.encoder, {.direction = true, .displacement = true}, rng);
    w.context.step = nn::make_mlp(widths(config.feature_dim() + 3 * s, config.context_hidden, config.context_dim),
                                  Activation::Silu, Activation::Identity, rng);
    w.context.attention = nn::make_mlp(widths(config.context_dim, config.attention_hidden, 1), Activation::Silu,
                                       Activation::Softplus, rng);
    w.context.no_context.resize(config.context_dim, 1);
    for (Eigen::Index i = 0; i < w.context.no_context.size(); ++i) w.context.no_context(i) = rng.uniform(-0.1, 0.1);
  }
  return w;
}

nn::ParamList model_params(ModelWeights& w, ParamGroup group) {
  nn::ParamList out;
  if (group == ParamGroup::All || group == ParamGroup::Affordance) {
    add_cloud(w.affordance.enc.cloud, "affordance.enc", out);
    add_small(w.affordance.enc, "affordance.enc", out);
    add_mlp(w.affordance.mlp, "affordance.mlp", out);
  }
  if (group == ParamGroup::Affordance) return out;
  const bool clouds = group != ParamGroup::Adapt;
  if (clouds) add_cloud(w.proposal.enc.cloud, "proposal.enc", out);
  add_small(w.proposal.enc, "proposal.enc", out);
  add_mlp(w.proposal.posterior, "proposal.posterior", out);
  add_mlp(w.proposal.decoder, "proposal.decoder", out);
  if (clouds) add_cloud(w.scoring.enc.cloud, "scoring.enc", out);
  add_small(w.scoring.enc, "scoring.enc", out);
  add_mlp(w.scoring.mlp, "scoring.mlp", out);
  if (group == ParamGroup::All) add_cloud(w.context.enc.cloud, "context.enc", out);
  add_small(w.context.enc, "context.enc", out);
  add_mlp(w.context.step, "context.step", out);
  add_mlp(w.context.attention, "context.attention", out);
  out.push_back({"context.no_context", &w.context.no_context});
  return out;
}

ModelWeights zeros_like(const ModelWeights& w) {
  ModelWeights z = w;
  zero_encoder(z.affordance.enc);
  zero_mlp(z.affordance.mlp);
  zero_encoder(z.proposal.enc);
  zero_mlp(z.proposal.posterior);
  zero_mlp(z.proposal.decoder);
  zero_encoder(z.scoring.enc);
  zero_mlp(z.scoring.mlp);
  zero_encoder(z.context.enc);
  zero_mlp(z.context.step);
  zero_mlp(z.context.attention);
  z.context.no_context.setZero();
  return z;
}

// ---------------------------------------------------------------------------
// Context

Vec global_feature(const CloudEncoder& enc, const HierarchyPlan& plan, CloudTape* tape, std::vector<int>* argmax) {
  const Mat rows = encode_all(enc, plan, tape);
  Vec g(rows.rows());
  if (argmax) argmax->assign(static_cast<std::size_t>(rows.rows()), 0);
  for (Eigen::Index ch = 0; ch < rows.rows(); ++ch) {
    Eigen::Index best = 0;
    for (Eigen::Index i = 1; i < rows.cols(); ++i)
      if (rows(ch, i) > rows(ch, best)) best = i;
    g(ch) = rows(ch, best);
    if (argmax) (*argmax)[static_cast<std::size_t>(ch)] = static_cast<int>(best);
  }
  return g;
}

namespace {

FrameFeature frame_forward(const ContextModule& ctx, const ModelConfig& config, const FrameInput& in, FrameTape& t) {
  const int F = config.feature_dim(), s = config.small_dim();
  const Vec g = in.cached_global ? *in.cached_global : global_feature(ctx.enc.cloud, *in.plan, &t.cloud, &t.argmax);
  const Vec3 p_sp = in.cached_position ? *in.cached_position : Vec3(in.plan->positions[0].col(in.action.p_sp));
  const Mat f_sp = nn::forward(ctx.enc.position, column(p_sp), &t.pos);
  const Mat f_d = nn::forward(ctx.enc.direction, column(in.action.direction), &t.dir);
  const Mat f_m = nn::forward(ctx.enc.displacement, displacement_input(in.displacement, config.encoder), &t.disp);
  Vec x(F + 3 * s);
  x << g, f_sp.col(0), f_d.col(0), f_m.col(0);
  t.feature = nn::forward(ctx.step, x, &t.step).col(0);
  t.weight = nn::forward(ctx.attention, t.feature, &t.attention)(0, 0);
  return {t.feature, t.weight};
}

}  // namespace

FrameFeature context_step(const PointCloud& cloud, const SupportAction& action, const DisplacementBundle& m,
                          const ModelWeights& w) {
  const HierarchyPlan plan = plan_hierarchy(cloud, w.config.encoder);
  if (action.p_sp < 0 || action.p_sp >= cloud.size()) throw InvalidArgument("context_step: support index out of range");
  FrameInput in{&plan, action, m, nullptr};
  FrameTape tape;
  return frame_forward(w.context, w.config, in, tape);
}

Vec aggregate_context(std::span<const FrameFeature> frames, const Vec& no_context) {
  if (frames.empty()) return no_context;
  double total = 0.0;
  for (const FrameFeature& f : frames) total += f.weight;
  if (!(total > 0.0)) throw InvalidArgument("aggregate_context: weights must be positive");
  Vec out = Vec::Zero(frames.front().feature.size());
  for (const FrameFeature& f : frames) out += (f.weight / total) * f.feature;
  return out;
}

Vec context_forward(const ContextModule& ctx, const ModelConfig& config, std::span<const FrameInput> frames,
                    ContextTape* tape) {
  ContextTape local;
  ContextTape& t = tape ? *tape : local;
  t.frames.resize(frames.size());
  std::vector<FrameFeature> feats;
  feats.reserve(frames.size());
  for (std::size_t i = 0; i < frames.size(); ++i) feats.push_back(frame_forward(ctx, config, frames[i], t.frames[i]));
  t.f_I = aggregate_context(feats, ctx.no_context.col(0));
  return t.f_I;
}

void context_backward(const ContextModule& ctx, const ModelConfig& config, std::span<const FrameInput> frames,
                      const ContextTape& t, const Vec& d_fI, ContextModule* grad) {
  if (frames.empty()) {
    if (grad) grad->no_context.col(0) += d_fI;
    return;
  }
  const int F = config.feature_dim(), s = config.small_dim();
  double total = 0.0;
  for (const FrameTape& f : t.frames) total += f.weight;
  for (std::size_t i = 0; i < frames.size(); ++i) {
    const FrameTape& ft = t.frames[i];
    Vec d_feature = (ft.weight / total) * d_fI;
    Mat d_weight(1, 1);
    d_weight(0, 0) = (ft.feature - t.f_I).dot(d_fI) / total;
    d_feature += nn::backward(ctx.attention, ft.attention, d_weight, grad ? &grad->attention : nullptr).col(0);
    const Mat dx = nn::backward(ctx.step, ft.step, d_feature, grad ? &grad->step : nullptr);
    if (!grad) continue;
    nn::backward(ctx.enc.position, ft.pos, dx.block(F, 0, s, 1), &grad->enc.position);
    nn::backward(ctx.enc.direction, ft.dir, dx.block(F + s, 0, s, 1), &grad->enc.direction);
    nn::backward(ctx.enc.displacement, ft.disp, dx.block(F + 2 * s, 0, s, 1), &grad->enc.displacement);
    if (frames[i].cached_global) continue;
    const HierarchyPlan& plan = *frames[i].plan;
    Mat d_rows = Mat::Zero(F, plan.size());
    for (int ch = 0; ch < F; ++ch) d_rows(ch, ft.argmax[static_cast<std::size_t>(ch)]) += dx(ch, 0);
    encode_rows_backward(ctx.enc.cloud, plan, ft.cloud, d_rows, &grad->enc.cloud);
  }
}

Vec context_feature(const ModelWeights& w, std::span<const ContextFrame> frames) {
  std::vector<HierarchyPlan> plans;
  plans.reserve(frames.size());
  std::vector<FrameInput> inputs;
  for (const ContextFrame& f : frames) plans.push_back(plan_hierarchy(f.cloud, w.config.encoder));
  for (std::size_t i = 0; i < frames.size(); ++i)
    inputs.push_back({&plans[i], frames[i].action, frames[i].displacement, nullptr});
  return context_forward(w.context, w.config, inputs, nullptr);
}

// ---------------------------------------------------------------------------
// Heads

Vec affordance_forward(const Mat& inputs, const AffordanceHead& head) {
  if (inputs.rows() != head.mlp.in_dim()) throw InvalidArgument("affordance_forward: input width mismatch");
  return nn::forward(head.mlp, inputs).row(0).transpose();
}

Vec predict_affordance(const ModelWeights& w, const HierarchyPlan& plan, int p_op, const Vec& f_I) {
  const int F = w.config.feature_dim();
  const Mat rows = encode_all(w.affordance.enc.cloud, plan);
  const Mat f_op = nn::forward(w.affordance.enc.position, column(plan.positions[0].col(p_op)));
  const Vec base = assemble_input(rows.col(p_op), Vec::Zero(F), f_op.col(0), &f_I, w.context.no_context.col(0));
  return nn::forward_split(w.affordance.mlp, base, F, rows).row(0).transpose();
}

std::vector<int> topk_candidates(std::span<const double> scores, int K) {
  const int n = static_cast<int>(scores.size());
  if (K < 1 || K > n) throw InvalidArgument("topk_candidates: K must be in [1, N]");
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::partial_sort(idx.begin(), idx.begin() + K, idx.end(),
                    [&](int a, int b) { return scores[a] > scores[b] || (scores[a] == scores[b] && a < b); });
  idx.resize(K);
  return idx;
}

Vec3 normalize_direction(const Vec3& raw) {
  const double n = raw.norm();
  if (!(n > 1e-12)) return Vec3::UnitZ();
  return raw / n;
}

Vec make_condition(const Vec& f_p_op, const Vec& f_p_sp, const Vec& f_op, const Vec& f_sp, const Vec& f_I) {
  Vec c(f_p_op.size() + f_p_sp.size() + f_op.size() + f_sp.size() + f_I.size());
  c << f_p_op, f_p_sp, f_op, f_sp, f_I;
  return c;
}

LatentCode propose_encode(const Vec3& d, const Vec& condition, const ProposalHead& head, const Vec& noise) {
  const Mat f_d = nn::forward(head.enc.direction, column(d));
  Vec x(condition.size() + f_d.rows());
  x << condition, f_d.col(0);
  const Vec out = nn::forward(head.posterior, x).col(0);
  const auto L = out.size() / 2;
  if (noise.size() != L) throw InvalidArgument("propose_encode: noise size mismatch");
  LatentCode code;
  code.mu = out.head(L);
  code.logvar = out.tail(L);
  code.z = code.mu + ((0.5 * code.logvar).array().exp() * noise.array()).matrix();
  return code;
}

Vec3 propose_decode(const Vec& z, const Vec& condition, const ProposalHead& head) {
  Vec x(condition.size() + z.size());
  x << condition, z;
  return normalize_direction(nn::forward(head.decoder, x).col(0));
}

double score_action(const Vec& f_p_op, const Vec& f_p_sp, const Vec& f_op, const Vec& f_sp, const Vec& f_d,
                    const Vec& f_I, const ScoringHead& head) {
  const Vec cond = make_condition(f_p_op, f_p_sp, f_op, f_sp, f_I);
  Vec x(cond.size() + f_d.size());
  x << cond, f_d;
  if (x.size() != head.mlp.in_dim()) throw InvalidArgument("score_action: input width mismatch");
  return nn::forward(head.mlp, x)(0, 0);
}

// ---------------------------------------------------------------------------
// Candidate search

PairFeatures pair_features(const ModelWeights& w, const HierarchyPlan& plan, int p_op, std::span<const int> points) {
  PairFeatures pf;
  pf.points.assign(points.begin(), points.end());
  std::vector<int> rows{p_op};
  rows.insert(rows.end(), points.begin(), points.end());
  Mat pos(3, static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) pos.col(static_cast<Eigen::Index>(i)) = plan.positions[0].col(rows[i]);

  const Mat prow = encode_rows(w.proposal.enc.cloud, plan, rows);
  const Mat srow = encode_rows(w.scoring.enc.cloud, plan, rows);
  const Mat ppos = nn::forward(w.proposal.enc.position, pos);
  const Mat spos = nn::forward(w.scoring.enc.position, pos);
  const auto k = static_cast<Eigen::Index>(points.size());
  pf.proposal_op_row = prow.col(0);
  pf.scoring_op_row = srow.col(0);
  pf.proposal_op_pos = ppos.col(0);
  pf.scoring_op_pos = spos.col(0);
  pf.proposal_rows = prow.rightCols(k);
  pf.scoring_rows = srow.rightCols(k);
  pf.proposal_pos = ppos.rightCols(k);
  pf.scoring_pos = spos.rightCols(k);
  return pf;
}

Mat candidate_latents(SeedState seed, int point, int latent_dim, int n_dirs) {
  Rng rng(seed.child(static_cast<std::uint64_t>(point)));
  Mat z(latent_dim, n_dirs);
  for (Eigen::Index j = 0; j < z.cols(); ++j)
    for (Eigen::Index i = 0; i < z.rows(); ++i) z(i, j) = rng.normal();
  return z;
}

CandidateGrid evaluate_candidates(const ModelWeights& w, const PairFeatures& pf, const Vec& f_I, int n_dirs,
                                  SeedState seed, Exec exec) {
  if (n_dirs < 1) throw InvalidArgument("evaluate_candidates: n_dirs must be >= 1");
  const int k = static_cast<int>(pf.points.size());
  CandidateGrid grid;
  grid.points = pf.points;
  grid.directions.resize(k);
  grid.scores.resize(n_dirs, k);
#pragma omp parallel for schedule(static) if (exec == Exec::Parallel)
  for (int c = 0; c < k; ++c) {
    const Vec cond_p = make_condition(pf.proposal_op_row, pf.proposal_rows.col(c), pf.proposal_op_pos,
                                      pf.proposal_pos.col(c), f_I);
    const Mat z = candidate_latents(seed, pf.points[c], w.config.latent_dim, n_dirs);
    const Mat raw = nn::forward_shared_prefix(w.proposal.decoder, cond_p, z);
    Eigen::Matrix3Xd dirs(3, n_dirs);
    for (int j = 0; j < n_dirs; ++j) dirs.col(j) = normalize_direction(raw.col(j));
    const Mat f_d = nn::forward(w.scoring.enc.direction, dirs);
    const Vec cond_s =
        make_condition(pf.scoring_op_row, pf.scoring_rows.col(c), pf.scoring_op_pos, pf.scoring_pos.col(c), f_I);
    grid.scores.col(c) = nn::forward_shared_prefix(w.scoring.mlp, cond_s, f_d).row(0).transpose();
    grid.directions[c] = std::move(dirs);
  }
  return grid;
}

Selection best_of(const CandidateGrid& grid) {
  std::vector<int> order(grid.points.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) { return grid.points[a] < grid.points[b]; });
  Selection best;
  bool found = false;
  for (int c : order) {
    for (Eigen::Index j = 0; j < grid.scores.rows(); ++j) {
      const double s = grid.scores(j, c);
      if (!found || s > best.score) {
        found = true;
        best.score = s;
        best.action = {grid.points[c], grid.directions[c].col(j)};
      }
    }
  }
  if (!found) throw InvalidArgument("best_of: empty candidate grid");
  return best;
}

Selection select_best(const ModelWeights& w, const HierarchyPlan& plan, int p_op, const Vec& f_I,
                      std::span<const double> affordance, int K, int n_dirs, SeedState seed, Exec exec) {
  if (n_dirs < 1) throw InvalidArgument("select_best: n_dirs must be >= 1");
  if (static_cast<int>(affordance.size()) != plan.size()) throw InvalidArgument("select_best: affordance size mismatch");
  const std::vector<int> candidates = topk_candidates(affordance, K);
  const PairFeatures pf = pair_features(w, plan, p_op, candidates);
  return best_of(evaluate_candidates(w, pf, f_I, n_dirs, seed, exec));
}

// ---------------------------------------------------------------------------
// Differentiable pieces

namespace {

Mat pair_rows(const CloudEncoder& enc, const PairInput& in, CloudTape& tape) {
  if (in.cached_rows) return *in.cached_rows;
  const int rows[2] = {in.p_op, in.p_sp};
  return encode_rows(enc, *in.plan, rows, &tape);
}

}  // namespace

double scoring_forward(const ScoringHead& head, const ModelConfig& config, const PairInput& in, const Vec& f_I,
                       ScoreTape* tape) {
  ScoreTape local;
  ScoreTape& t = tape ? *tape : local;
  t.rows = pair_rows(head.enc.cloud, in, t.cloud);
  const Mat pos = nn::forward(head.enc.position, two_positions(in), &t.pos);
  const Mat f_d = nn::forward(head.enc.direction, column(in.direction), &t.dir);
  const Vec cond = make_condition(t.rows.col(0), t.rows.col(1), pos.col(0), pos.col(1), f_I);
  Vec x(cond.size() + f_d.rows());
  x << cond, f_d.col(0);
  (void)config;
  return nn::forward(head.mlp, x, &t.head)(0, 0);
}

Vec scoring_backward(const ScoringHead& head, const ModelConfig& config, const PairInput& in, const ScoreTape& t,
                     double d_score, ScoringHead* grad) {
  const int F = config.feature_dim(), s = config.small_dim(), C = config.context_dim;
  const Mat dx = nn::backward(head.mlp, t.head, Mat::Constant(1, 1, d_score), grad ? &grad->mlp : nullptr);
  if (grad) {
    Mat d_pos(s, 2);
    d_pos.col(0) = dx.block(2 * F, 0, s, 1);
    d_pos.col(1) = dx.block(2 * F + s, 0, s, 1);
    nn::backward(head.enc.position, t.pos, d_pos, &grad->enc.position);
    nn::backward(head.enc.direction, t.dir, dx.block(2 * F + 2 * s + C, 0, s, 1), &grad->enc.direction);
    if (!in.cached_rows) {
      Mat d_rows(F, 2);
      d_rows.col(0) = dx.block(0, 0, F, 1);
      d_rows.col(1) = dx.block(F, 0, F, 1);
      encode_rows_backward(head.enc.cloud, *in.plan, t.cloud, d_rows, &grad->enc.cloud);
    }
  }
  return dx.block(2 * F + 2 * s, 0, C, 1);
}

ProposalOutput proposal_forward(const ProposalHead& head, const ModelConfig& config, const PairInput& in,
                                const Vec& f_I, const Vec& noise, ProposalTape* tape) {
  ProposalTape local;
  ProposalTape& t = tape ? *tape : local;
  const int L = config.latent_dim;
  if (noise.size() != L) throw InvalidArgument("proposal_forward: noise size mismatch");
  t.rows = pair_rows(head.enc.cloud, in, t.cloud);
  const Mat pos = nn::forward(head.enc.position, two_positions(in), &t.pos);
  const Mat f_d = nn::forward(head.enc.direction, column(in.direction), &t.dir);
  const Vec cond = make_condition(t.rows.col(0), t.rows.col(1), pos.col(0), pos.col(1), f_I);
  Vec post_in(cond.size() + f_d.rows());
  post_in << cond, f_d.col(0);
  const Vec post = nn::forward(head.posterior, post_in, &t.posterior).col(0);
  t.noise = noise;
  t.mu = post.head(L);
  t.logvar = post.tail(L);
  t.z = t.mu + ((0.5 * t.logvar).array().exp() * noise.array()).matrix();
  Vec dec_in(cond.size() + L);
  dec_in << cond, t.z;
  t.raw = nn::forward(head.decoder, dec_in, &t.decoder).col(0);
  t.d_hat = normalize_direction(t.raw);
  return {t.d_hat, t.mu, t.logvar};
}

Vec proposal_backward(const ProposalHead& head, const ModelConfig& config, const PairInput& in,
                      const ProposalTape& t, const Vec3& d_dhat, const Vec& d_mu, const Vec& d_logvar,
                      ProposalHead* grad) {
  const int F = config.feature_dim(), s = config.small_dim(), C = config.context_dim, L = config.latent_dim;
  const int cond = config.condition_dim();
  const double n = t.raw.norm();
  Vec3 d_raw = Vec3::Zero();
  if (n > 1e-12) d_raw = (d_dhat - t.d_hat * t.d_hat.dot(d_dhat)) / n;

  const Mat d_dec = nn::backward(head.decoder, t.decoder, column(d_raw), grad ? &grad->decoder : nullptr);
  const Vec d_z = d_dec.block(cond, 0, L, 1);
  Vec d_post(2 * L);
  d_post.head(L) = d_mu + d_z;
  d_post.tail(L) = d_logvar + (d_z.array() * t.noise.array() * (0.5 * t.logvar).array().exp() * 0.5).matrix();
  const Mat d_pin = nn::backward(head.posterior, t.posterior, d_post, grad ? &grad->posterior : nullptr);
  const Vec d_cond = d_dec.block(0, 0, cond, 1) + d_pin.block(0, 0, cond, 1);

  if (grad) {
    nn::backward(head.enc.direction, t.dir, d_pin.block(cond, 0, s, 1), &grad->enc.direction);
    Mat d_pos(s, 2);
    d_pos.col(0) = d_cond.segment(2 * F, s);
    d_pos.col(1) = d_cond.segment(2 * F + s, s);
    nn::backward(head.enc.position, t.pos, d_pos, &grad->enc.position);
    if (!in.cached_rows) {
      Mat d_rows(F, 2);
      d_rows.col(0) = d_cond.segment(0, F);
      d_rows.col(1) = d_cond.segment(F, F);
      encode_rows_backward(head.enc.cloud, *in.plan, t.cloud, d_rows, &grad->enc.cloud);
    }
  }
  return d_cond.segment(2 * F + 2 * s, C);
}

Vec affordance_points_forward(const AffordanceHead& head, const HierarchyPlan& plan, int p_op,
                              std::span<const int> points, const Vec& f_I, AffordanceTape* tape) {
  AffordanceTape local;
  AffordanceTape& t = tape ? *tape : local;
  std::vector<int> rows{p_op};
  rows.insert(rows.end(), points.begin(), points.end());
  t.rows = encode_rows(head.enc.cloud, plan, rows, &t.cloud);
  const Mat f_op = nn::forward(head.enc.position, column(plan.positions[0].col(p_op)), &t.pos);
  const auto F = t.rows.rows(), s = f_op.rows();
  const auto P = static_cast<Eigen::Index>(points.size());
  Mat x(2 * F + s + f_I.size(), P);
  for (Eigen::Index j = 0; j < P; ++j) x.col(j) << t.rows.col(0), t.rows.col(j + 1), f_op.col(0), f_I;
  return nn::forward(head.mlp, x, &t.head).row(0).transpose();
}

void affordance_points_backward(const AffordanceHead& head, const HierarchyPlan& plan, int p_op,
                                std::span<const int> points, const AffordanceTape& t, const Vec& d_scores,
                                AffordanceHead* grad) {
  (void)p_op;
  const Mat dx = nn::backward(head.mlp, t.head, d_scores.transpose(), grad ? &grad->mlp : nullptr);
  if (!grad) return;
  const auto F = t.rows.rows();
  const auto s = grad->enc.position.out_dim();
  const auto P = static_cast<Eigen::Index>(points.size());
  Mat d_rows(F, P + 1);
  d_rows.col(0) = dx.topRows(F).rowwise().sum();
  d_rows.rightCols(P) = dx.middleRows(F, F);
  nn::backward(head.enc.position, t.pos, dx.middleRows(2 * F, s).rowwise().sum(), &grad->enc.position);
  encode_rows_backward(head.enc.cloud, plan, t.cloud, d_rows, &grad->enc.cloud);
}

}  // namespace supportaff
