#include "supportaff/learning.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "json.hpp"

#include "supportaff/errors.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace supportaff {

using nn::Mat;
using nn::Vec;

void TrainConfig::validate() const {
  const bool positive = lr > 0 && decay > 0 && decay_every > 0 && batch > 0 && lr_floor > 0 && top_k > 0 &&
                        n_dirs > 0 && k_avg > 0 && proposal_batch > 0 && label_points > 0 && adapt_steps > 0 &&
                        adapt_online > 0 && adapt_offline > 0;
  if (!positive) throw InvalidArgument("train config: sizes and rates must be positive");
  if (alpha < 0 || beta < 0 || lambda_dir < 0 || lambda_kl < 0 || weight_decay < 0 || adapt_lr < 0)
    throw InvalidArgument("train config: loss weights must be non-negative");
  if (k_avg > n_dirs) throw InvalidArgument("train config: k_avg must not exceed n_dirs");
  if (stage1_steps < 0 || stage2_steps < 0) throw InvalidArgument("train config: step caps must be non-negative");
  if (!(positive_fraction >= 0.0 && positive_fraction <= 1.0))
    throw InvalidArgument("train config: positive_fraction must lie in [0, 1]");
}

double TrainConfig::lr_at(int step) const { return lr * std::pow(decay, step / decay_every); }

// ---------------------------------------------------------------------------
// Losses

double scoring_loss(std::span<const double> c_hat, std::span<const double> r, std::vector<double>* d_c_hat) {
  if (c_hat.size() != r.size() || c_hat.empty()) throw InvalidArgument("scoring_loss: size mismatch");
  const double n = static_cast<double>(c_hat.size());
  double sum = 0.0;
  if (d_c_hat) d_c_hat->resize(c_hat.size());
  for (std::size_t i = 0; i < c_hat.size(); ++i) {
    const double e = c_hat[i] - r[i];
    sum += e * e;
    if (d_c_hat) (*d_c_hat)[i] = 2.0 * e / n;
  }
  return sum / n;
}

double affordance_loss(std::span<const double> a_hat, std::span<const double> a, std::vector<double>* d_a_hat) {
  if (a_hat.size() != a.size() || a_hat.empty()) throw InvalidArgument("affordance_loss: size mismatch");
  const double n = static_cast<double>(a_hat.size());
  double sum = 0.0;
  if (d_a_hat) d_a_hat->resize(a_hat.size());
  for (std::size_t i = 0; i < a_hat.size(); ++i) {
    const double e = a_hat[i] - a[i];
    sum += std::abs(e);
    if (d_a_hat) (*d_a_hat)[i] = (e > 0 ? 1.0 : e < 0 ? -1.0 : 0.0) / n;
  }
  return sum / n;
}

ProposalLossTerms proposal_loss(const Vec3& d_hat, const Vec3& d, const Vec& mu, const Vec& logvar,
                                double lambda_dir, double lambda_kl, ProposalLossGrad* grad) {
  if (mu.size() != logvar.size()) throw InvalidArgument("proposal_loss: mu and logvar sizes differ");
  ProposalLossTerms t;
  t.direction = lambda_dir * (1.0 - d_hat.dot(d));
  const auto var = logvar.array().exp();
  t.kl = lambda_kl * 0.5 * (mu.array().square() + var - 1.0 - logvar.array()).sum();
  if (grad) {
    grad->d_dhat = -lambda_dir * d;
    grad->d_mu = lambda_kl * mu;
    grad->d_logvar = (lambda_kl * 0.5 * (var - 1.0)).matrix();
  }
  return t;
}

// ---------------------------------------------------------------------------
// Frozen features

RecordFeatures record_features(const ModelWeights& w, const HierarchyPlan& plan, int p_op, int p_sp,
                               bool with_pairs) {
  RecordFeatures f;
  f.positions.col(0) = plan.positions[0].col(p_op);
  f.positions.col(1) = plan.positions[0].col(p_sp);
  f.sp_position = f.positions.col(1);
  f.global = global_feature(w.context.enc.cloud, plan);
  if (with_pairs) {
    const int rows[2] = {p_op, p_sp};
    f.scoring_rows = encode_rows(w.scoring.enc.cloud, plan, rows);
    f.proposal_rows = encode_rows(w.proposal.enc.cloud, plan, rows);
  }
  return f;
}

namespace {

FeatureCache build_cache(const ModelWeights& w, const Dataset& d, Exec exec, bool with_pairs) {
  FeatureCache cache;
  cache.records.resize(d.records.size());
  const int n = static_cast<int>(d.records.size());
#pragma omp parallel for schedule(dynamic, 8) if (exec == Exec::Parallel)
  for (int i = 0; i < n; ++i) {
    const InteractionRecord& r = d.records[static_cast<std::size_t>(i)];
    const HierarchyPlan plan = plan_hierarchy(d.scenes[r.scene_id].cloud, w.config.encoder);
    cache.records[static_cast<std::size_t>(i)] = record_features(w, plan, r.p_op, r.action.p_sp, with_pairs);
  }
  return cache;
}

}  // namespace

FeatureCache build_feature_cache(const ModelWeights& w, const Dataset& d, Exec exec) {
  return build_cache(w, d, exec, true);
}

std::vector<FrameInput> cached_frames(const Dataset& d, const FeatureCache& cache, std::size_t i) {
  std::vector<FrameInput> frames;
  for (std::uint32_t c : d.records[i].context) {
    const InteractionRecord& r = d.records[c];
    const RecordFeatures& f = cache.records[c];
    frames.push_back({nullptr, r.action, r.displacement, &f.global, &f.sp_position});
  }
  return frames;
}

// ---------------------------------------------------------------------------
// Labels

double top_mean(std::span<const double> scores, int k) {
  if (k < 1 || static_cast<std::size_t>(k) > scores.size()) throw InvalidArgument("top_mean: k out of range");
  std::vector<double> v(scores.begin(), scores.end());
  std::partial_sort(v.begin(), v.begin() + k, v.end(), std::greater<>());
  return std::accumulate(v.begin(), v.begin() + k, 0.0) / k;
}

std::vector<double> affordance_labels(const ModelWeights& w, const HierarchyPlan& plan, int p_op,
                                      std::span<const int> points, const Vec& f_I, int n_dirs, int k_avg,
                                      SeedState seed) {
  if (k_avg < 1 || k_avg > n_dirs) throw InvalidArgument("affordance_labels: need 1 <= k_avg <= n_dirs");
  const PairFeatures pf = pair_features(w, plan, p_op, points);
  const CandidateGrid grid = evaluate_candidates(w, pf, f_I, n_dirs, seed, Exec::Serial);
  std::vector<double> labels(points.size());
  for (std::size_t c = 0; c < points.size(); ++c) {
    const Vec col = grid.scores.col(static_cast<Eigen::Index>(c));
    labels[c] = top_mean(std::span<const double>(col.data(), static_cast<std::size_t>(col.size())), k_avg);
  }
  return labels;
}

double affordance_label(const ModelWeights& w, const HierarchyPlan& plan, int p_op, int point, const Vec& f_I,
                        int n_dirs, int k_avg, SeedState seed) {
  const int pts[1] = {point};
  return affordance_labels(w, plan, p_op, pts, f_I, n_dirs, k_avg, seed)[0];
}

// ---------------------------------------------------------------------------
// Gradient plumbing

namespace {

int thread_count(Exec exec) {
#ifdef _OPENMP
  return exec == Exec::Parallel ? omp_get_max_threads() : 1;
#else
  (void)exec;
  return 1;
#endif
}

int thread_id() {
#ifdef _OPENMP
  return omp_get_thread_num();
#else
  return 0;
#endif
}

void add_into(ModelWeights& dst, ModelWeights& src) {
  const nn::ParamList a = model_params(dst, ParamGroup::All), b = model_params(src, ParamGroup::All);
  for (std::size_t i = 0; i < a.size(); ++i) *a[i].value += *b[i].value;
}

void add(BatchLoss& a, const BatchLoss& b) {
  a.scoring += b.scoring;
  a.direction += b.direction;
  a.kl += b.kl;
  a.affordance += b.affordance;
}

/// Runs body(j, grad, loss) for j in [0, n). Parallel runs give each thread
/// its own gradient buffer and sum the buffers into `grad` in thread order.
template <class Body>
BatchLoss accumulate(int n, Exec exec, ModelWeights* grad, Body&& body) {
  const int threads = std::min(thread_count(exec), std::max(n, 1));
  if (threads == 1) {
    BatchLoss t;
    for (int j = 0; j < n; ++j) body(j, grad, t);
    return t;
  }
  std::vector<ModelWeights> scratch;
  if (grad) scratch.assign(static_cast<std::size_t>(threads), zeros_like(*grad));
  std::vector<BatchLoss> parts(static_cast<std::size_t>(threads));
#pragma omp parallel for schedule(static) num_threads(threads)
  for (int j = 0; j < n; ++j) {
    const auto id = static_cast<std::size_t>(thread_id());
    body(j, grad ? &scratch[id] : nullptr, parts[id]);
  }
  BatchLoss total;
  for (std::size_t t = 0; t < parts.size(); ++t) {
    if (grad) add_into(*grad, scratch[t]);
    add(total, parts[t]);
  }
  return total;
}

Vec standard_normal(Rng& rng, int n) {
  Vec v(n);
  for (auto& x : v) x = rng.normal();
  return v;
}

/// Where a stage-1 sample's observation comes from: a fresh plan (trainable
/// cloud encoders) or cached rows (frozen).
struct SampleSource {
  const Dataset* data = nullptr;
  const FeatureCache* cache = nullptr;
  bool cached_rows = false;
};

/// Stage-1 losses for record i, scaled by the given weights, accumulated into grad.
void stage1_sample(const ModelWeights& w, const SampleSource& src, std::size_t i, double score_weight,
                   double proposal_weight, const TrainConfig& cfg, SeedState noise_seed, ModelWeights* grad,
                   BatchLoss& terms) {
  const ModelConfig& mc = w.config;
  const Dataset& d = *src.data;
  const InteractionRecord& rec = d.records[i];
  const RecordFeatures& feat = src.cache->records[i];
  const std::vector<FrameInput> frames = cached_frames(d, *src.cache, i);

  HierarchyPlan plan;
  if (!src.cached_rows) plan = plan_hierarchy(d.scenes[rec.scene_id].cloud, mc.encoder);

  ContextTape ct;
  const Vec f_I = context_forward(w.context, mc, frames, grad ? &ct : nullptr);
  Vec d_fI = Vec::Zero(f_I.size());

  if (score_weight > 0.0) {
    PairInput in{src.cached_rows ? nullptr : &plan, rec.p_op, rec.action.p_sp, rec.action.direction,
                 src.cached_rows ? &feat.scoring_rows : nullptr, &feat.positions};
    ScoreTape st;
    const double c = scoring_forward(w.scoring, mc, in, f_I, &st);
    const double e = c - rec.r;
    terms.scoring += score_weight * e * e;
    if (grad) d_fI += scoring_backward(w.scoring, mc, in, st, 2.0 * e * score_weight, &grad->scoring);
  }
  if (proposal_weight > 0.0) {
    PairInput in{src.cached_rows ? nullptr : &plan, rec.p_op, rec.action.p_sp, rec.action.direction,
                 src.cached_rows ? &feat.proposal_rows : nullptr, &feat.positions};
    Rng rng(noise_seed);
    const Vec noise = standard_normal(rng, mc.latent_dim);
    ProposalTape pt;
    const ProposalOutput out = proposal_forward(w.proposal, mc, in, f_I, noise, &pt);
    ProposalLossGrad g;
    const ProposalLossTerms t =
        proposal_loss(out.d_hat, rec.action.direction.normalized(), out.mu, out.logvar, cfg.lambda_dir, cfg.lambda_kl, &g);
    terms.direction += proposal_weight * t.direction;
    terms.kl += proposal_weight * t.kl;
    if (grad)
      d_fI += proposal_backward(w.proposal, mc, in, pt, proposal_weight * g.d_dhat, proposal_weight * g.d_mu,
                                proposal_weight * g.d_logvar, &grad->proposal);
  }
  if (grad) context_backward(w.context, mc, frames, ct, d_fI, &grad->context);
}

std::vector<std::size_t> positive_indices(const Dataset& d, bool positive) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < d.records.size(); ++i)
    if (d.records[i].positive() == positive) out.push_back(i);
  return out;
}

void check_trainable(const Dataset& d) {
  if (d.records.empty()) throw InvalidArgument("train: dataset is empty");
  if (d.positives() == 0) throw TrainingDegenerate("train: dataset has no positive records");
}

}  // namespace

BatchLoss stage1_batch_loss(const ModelWeights& w, const Dataset& d, const FeatureCache& cache,
                            std::span<const std::size_t> score_batch, std::span<const std::size_t> proposal_batch,
                            const TrainConfig& config, SeedState noise_seed, bool frozen_clouds, ModelWeights* grad) {
  if (cache.records.size() != d.records.size()) throw InvalidArgument("stage1_batch_loss: cache does not match dataset");
  const SampleSource src{&d, &cache, frozen_clouds};
  const auto n_score = static_cast<int>(score_batch.size());
  const double score_weight = n_score > 0 ? 1.0 / n_score : 0.0;
  const double proposal_weight = proposal_batch.empty() ? 0.0 : 1.0 / static_cast<double>(proposal_batch.size());
  return accumulate(n_score + static_cast<int>(proposal_batch.size()), config.exec, grad,
                    [&](int j, ModelWeights* g, BatchLoss& loss) {
                      if (j < n_score) {
                        stage1_sample(w, src, score_batch[static_cast<std::size_t>(j)], score_weight, 0.0, config,
                                      noise_seed, g, loss);
                      } else {
                        const auto k = static_cast<std::size_t>(j - n_score);
                        stage1_sample(w, src, proposal_batch[k], 0.0, proposal_weight, config, noise_seed.child(k), g,
                                      loss);
                      }
                    });
}

BatchLoss stage2_batch_loss(const ModelWeights& w, const Dataset& d, const LabelSet& labels,
                            std::span<const std::size_t> batch, Exec exec, ModelWeights* grad, bool balanced) {
  if (labels.points.size() != d.records.size()) throw InvalidArgument("stage2_batch_loss: labels do not match dataset");
  std::size_t total_points = 0, high = 0;
  for (std::size_t k : batch) {
    total_points += labels.points[k].size();
    for (double a : labels.labels[k]) high += a >= 0.5;
  }
  if (total_points == 0) throw InvalidArgument("stage2_batch_loss: empty batch");
  double scale_high = 1.0 / static_cast<double>(total_points), scale_low = scale_high;
  if (balanced && high > 0 && high < total_points) {
    scale_high = 0.5 / static_cast<double>(high);
    scale_low = 0.5 / static_cast<double>(total_points - high);
  }
  return accumulate(static_cast<int>(batch.size()), exec, grad, [&](int j, ModelWeights* g, BatchLoss& loss) {
    const std::size_t k = batch[static_cast<std::size_t>(j)];
    const InteractionRecord& rec = d.records[k];
    const HierarchyPlan plan = plan_hierarchy(d.scenes[rec.scene_id].cloud, w.config.encoder);
    AffordanceTape tape;
    const Vec a_hat =
        affordance_points_forward(w.affordance, plan, rec.p_op, labels.points[k], labels.f_I[k], g ? &tape : nullptr);
    Vec d_a(a_hat.size());
    for (Eigen::Index p = 0; p < a_hat.size(); ++p) {
      const double label = labels.labels[k][static_cast<std::size_t>(p)];
      const double scale = label >= 0.5 ? scale_high : scale_low;
      const double e = a_hat(p) - label;
      loss.affordance += std::abs(e) * scale;
      d_a(p) = (e > 0 ? 1.0 : e < 0 ? -1.0 : 0.0) * scale;
    }
    if (g) affordance_points_backward(w.affordance, plan, rec.p_op, labels.points[k], tape, d_a, &g->affordance);
  });
}

std::string to_json_line(const LogEntry& e) {
  nlohmann::ordered_json j;
  j["stage"] = e.stage;
  j["step"] = e.step;
  j["lr"] = e.lr;
  j["loss"] = e.loss;
  if (e.stage == 1) {
    j["scoring"] = e.scoring;
    j["direction"] = e.direction;
    j["kl"] = e.kl;
  } else {
    j["affordance"] = e.affordance;
  }
  return j.dump();
}

// ---------------------------------------------------------------------------
// Training

TrainResult train_stage1(const Dataset& d, ModelWeights w, const TrainConfig& config,
                         const std::function<void(const LogEntry&)>& on_log) {
  config.validate();
  check_trainable(d);
  TrainResult result;
  const std::vector<std::size_t> pos = positive_indices(d, true), neg = positive_indices(d, false);
  // The context cloud encoder never trains, so its descriptors are cached once.
  const FeatureCache cache = build_cache(w, d, config.exec, false);
  const SeedState root = SeedState{config.seed, 0x57A6E1}.child(1);

  ModelWeights grad = zeros_like(w);
  const nn::ParamList params = model_params(w, ParamGroup::Stage1);
  const nn::ParamList grads = model_params(grad, ParamGroup::Stage1);
  nn::Adam opt(0.9, 0.999, 1e-8, config.weight_decay);

  const int n_pos_score =
      neg.empty() ? config.batch : static_cast<int>(std::lround(config.positive_fraction * config.batch));
  for (int step = 0; step < config.stage1_steps; ++step) {
    const double lr = config.lr_at(step);
    if (lr < config.lr_floor) break;
    Rng rng(root.child(static_cast<std::uint64_t>(step)));
    std::vector<std::size_t> score_batch, proposal_batch;
    for (int j = 0; j < config.batch; ++j) {
      const auto& pool = j < n_pos_score ? pos : neg;
      score_batch.push_back(pool[static_cast<std::size_t>(rng.index(static_cast<int>(pool.size())))]);
    }
    for (int j = 0; j < config.proposal_batch; ++j) {
      if (config.proposal_positives_only)
        proposal_batch.push_back(pos[static_cast<std::size_t>(rng.index(static_cast<int>(pos.size())))]);
      else
        proposal_batch.push_back(static_cast<std::size_t>(rng.index(static_cast<int>(d.records.size()))));
    }

    nn::zero(model_params(grad, ParamGroup::All));
    const BatchLoss t = stage1_batch_loss(w, d, cache, score_batch, proposal_batch, config,
                                          root.child(static_cast<std::uint64_t>(step)).child(7), false, &grad);
    opt.step(params, grads, lr);
    LogEntry e{1, step, lr, t.scoring + t.direction + t.kl, t.scoring, t.direction, t.kl, 0.0};
    result.log.push_back(e);
    if (on_log) on_log(e);
  }
  result.weights = std::move(w);
  return result;
}

LabelSet generate_labels(const ModelWeights& w, const Dataset& d, const TrainConfig& config) {
  config.validate();
  const FeatureCache cache = build_cache(w, d, config.exec, false);
  const SeedState root = SeedState{config.seed, 0x57A6E1}.child(2);
  const int n = static_cast<int>(d.records.size());
  LabelSet out;
  out.points.resize(static_cast<std::size_t>(n));
  out.labels.resize(static_cast<std::size_t>(n));
  out.f_I.resize(static_cast<std::size_t>(n));
#pragma omp parallel for schedule(dynamic, 4) if (config.exec == Exec::Parallel)
  for (int i = 0; i < n; ++i) {
    const auto k = static_cast<std::size_t>(i);
    const InteractionRecord& rec = d.records[k];
    const SceneInstance& scene = d.scenes[rec.scene_id];
    const HierarchyPlan plan = plan_hierarchy(scene.cloud, w.config.encoder);
    const std::vector<FrameInput> frames = cached_frames(d, cache, k);
    out.f_I[k] = context_forward(w.context, w.config, frames, nullptr);
    // The attempted point plus distinct random points of the observation.
    std::vector<int> pts{rec.action.p_sp};
    Rng rng(root.child(k).child(0));
    const int want = std::min(config.label_points, scene.cloud.size());
    while (static_cast<int>(pts.size()) < want) {
      const int p = rng.index(scene.cloud.size());
      if (std::find(pts.begin(), pts.end(), p) == pts.end()) pts.push_back(p);
    }
    out.labels[k] = affordance_labels(w, plan, rec.p_op, pts, out.f_I[k], config.n_dirs, config.k_avg, root.child(k).child(1));
    out.points[k] = std::move(pts);
  }
  return out;
}

TrainResult train_stage2(const Dataset& d, ModelWeights w, const TrainConfig& config,
                         const std::function<void(const LogEntry&)>& on_log) {
  config.validate();
  check_trainable(d);
  TrainResult result;
  const LabelSet labels = generate_labels(w, d, config);
  const SeedState root = SeedState{config.seed, 0x57A6E1}.child(3);

  ModelWeights grad = zeros_like(w);
  const nn::ParamList params = model_params(w, ParamGroup::Affordance);
  const nn::ParamList grads = model_params(grad, ParamGroup::Affordance);
  nn::Adam opt(0.9, 0.999, 1e-8, config.weight_decay);
  const int n = static_cast<int>(d.records.size());

  for (int step = 0; step < config.stage2_steps; ++step) {
    const double lr = config.lr_at(step);
    if (lr < config.lr_floor) break;
    Rng rng(root.child(static_cast<std::uint64_t>(step)));
    std::vector<std::size_t> batch(static_cast<std::size_t>(config.batch));
    for (auto& b : batch) b = static_cast<std::size_t>(rng.index(n));
    nn::zero(model_params(grad, ParamGroup::All));
    const BatchLoss t = stage2_batch_loss(w, d, labels, batch, config.exec, &grad, config.affordance_balanced);
    opt.step(params, grads, lr);
    LogEntry e{2, step, lr, t.affordance, 0.0, 0.0, 0.0, t.affordance};
    result.log.push_back(e);
    if (on_log) on_log(e);
  }
  result.weights = std::move(w);
  return result;
}

TrainResult train(const Dataset& d, const ModelConfig& model, const TrainConfig& config,
                  const std::function<void(const LogEntry&)>& on_log) {
  config.validate();
  check_trainable(d);
  ModelWeights w = make_model(model, SeedState{config.seed, 0x1417});
  TrainResult s1 = train_stage1(d, std::move(w), config, on_log);
  TrainResult s2 = train_stage2(d, std::move(s1.weights), config, on_log);
  s1.log.insert(s1.log.end(), s2.log.begin(), s2.log.end());
  return {std::move(s2.weights), std::move(s1.log)};
}

// ---------------------------------------------------------------------------
// Adaptation

ModelWeights adapt_update(const ModelWeights& w, const OnlineStore& online, const Dataset& offline,
                          const FeatureCache& offline_cache, const TrainConfig& config, SeedState seed,
                          AdaptStats* stats) {
  config.validate();
  if (offline.records.empty()) throw InvalidState("adapt_update: the offline store is empty");
  if (online.data.records.empty()) throw InvalidArgument("adapt_update: need at least one online record");
  if (offline_cache.records.size() != offline.records.size() ||
      online.cache.records.size() != online.data.records.size())
    throw InvalidArgument("adapt_update: feature cache does not match its dataset");

  ModelWeights out = w;
  ModelWeights grad = zeros_like(w);
  const nn::ParamList params = model_params(out, ParamGroup::Adapt);
  const nn::ParamList grads = model_params(grad, ParamGroup::Adapt);
  nn::Adam opt(0.9, 0.999, 1e-8, config.weight_decay);
  const SampleSource on_src{&online.data, &online.cache, true}, off_src{&offline, &offline_cache, true};
  const int n_online = static_cast<int>(online.data.records.size());
  const int n_offline = static_cast<int>(offline.records.size());
  if (stats) *stats = {};

  for (int step = 0; step < config.adapt_steps; ++step) {
    Rng rng(seed.child(static_cast<std::uint64_t>(step)));
    struct Job {
      const SampleSource* src;
      std::size_t record;
    };
    std::vector<Job> jobs;
    for (int j = 0; j < config.adapt_online; ++j) jobs.push_back({&on_src, static_cast<std::size_t>(rng.index(n_online))});
    for (int j = 0; j < config.adapt_offline; ++j)
      jobs.push_back({&off_src, static_cast<std::size_t>(rng.index(n_offline))});
    int positives = 0;
    for (const Job& j : jobs)
      positives += !config.proposal_positives_only || j.src->data->records[j.record].positive();
    const double score_weight = 1.0 / static_cast<double>(jobs.size());
    const double proposal_weight = positives > 0 ? 1.0 / positives : 0.0;

    nn::zero(model_params(grad, ParamGroup::All));
    const SeedState noise_root = seed.child(static_cast<std::uint64_t>(step)).child(7);
    accumulate(static_cast<int>(jobs.size()), config.exec, &grad, [&](int j, ModelWeights* g, BatchLoss& terms) {
      const Job& job = jobs[static_cast<std::size_t>(j)];
      const bool pos = !config.proposal_positives_only || job.src->data->records[job.record].positive();
      stage1_sample(out, *job.src, job.record, score_weight, pos ? proposal_weight : 0.0, config,
                    noise_root.child(static_cast<std::uint64_t>(j)), g, terms);
    });
    opt.step(params, grads, config.adapt_lr);
    if (stats) {
      ++stats->steps;
      stats->online_per_step.push_back(config.adapt_online);
      stats->offline_per_step.push_back(config.adapt_offline);
    }
  }
  return out;
}

}  // namespace supportaff
