#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "supportaff/data.hpp"
#include "supportaff/policy.hpp"

namespace supportaff {

struct TrainConfig {
  double alpha = 1.0;
  double beta = 1.0;
  double lambda_dir = 1.0;
  double lambda_kl = 1.0;
  double lr = 1e-3;
  double weight_decay = 1e-5;
  double decay = 0.9;      // multiplies lr every decay_every steps
  int decay_every = 500;
  int batch = 64;
  double lr_floor = 5e-7;  // training stops once the scheduled lr falls below this
  int top_k = 10;
  int n_dirs = 100;
  int k_avg = 10;
  int stage1_steps = 1000;   // step caps; the lr floor alone would allow ~36k steps
  int stage2_steps = 600;
  int proposal_batch = 32;   // positives per step for the proposal loss
  double positive_fraction = 0.5;  // share of positives in each scorer batch
  bool proposal_positives_only = false;  // when set the cVAE reconstructs only successful directions
  bool affordance_balanced = true;       // class-balanced weights in the stage-2 L1
  int label_points = 8;      // labelled points per record in stage 2
  int adapt_steps = 3;
  int adapt_online = 32;
  int adapt_offline = 32;
  double adapt_lr = 1e-3;
  std::uint64_t seed = 0;
  Exec exec = Exec::Serial;

  void validate() const;
  /// lr after `step` optimizer steps.
  double lr_at(int step) const;
};

// ---------------------------------------------------------------------------
// Losses. Each returns the batch mean and, when a gradient pointer is given,
// writes d(loss)/d(input) for every sample.

double scoring_loss(std::span<const double> c_hat, std::span<const double> r, std::vector<double>* d_c_hat = nullptr);
double affordance_loss(std::span<const double> a_hat, std::span<const double> a, std::vector<double>* d_a_hat = nullptr);

struct ProposalLossTerms {
  double direction = 0.0;  // lambda_dir (1 - cos)
  double kl = 0.0;         // lambda_kl KL(N(mu, sigma^2) || N(0, I))
  double total() const { return direction + kl; }
};

struct ProposalLossGrad {
  Vec3 d_dhat = Vec3::Zero();
  nn::Vec d_mu;
  nn::Vec d_logvar;
};

/// Single-sample loss; d_hat and d are unit vectors.
ProposalLossTerms proposal_loss(const Vec3& d_hat, const Vec3& d, const nn::Vec& mu, const nn::Vec& logvar,
                                double lambda_dir, double lambda_kl, ProposalLossGrad* grad = nullptr);

// ---------------------------------------------------------------------------
// Frozen features

/// Cloud-encoder outputs a frozen model needs for one record.
struct RecordFeatures {
  nn::Mat scoring_rows;     // feature_dim x 2: op, sp
  nn::Mat proposal_rows;
  Eigen::Matrix<double, 3, 2> positions;  // normalized op, sp
  Vec3 sp_position = Vec3::Zero();
  nn::Vec global;           // context encoder descriptor of the record's observation
};

/// Per-record features of a dataset under fixed cloud encoders; valid while
/// the proposal, scoring and context cloud encoders are unchanged.
struct FeatureCache {
  std::vector<RecordFeatures> records;
};

RecordFeatures record_features(const ModelWeights& w, const HierarchyPlan& plan, int p_op, int p_sp,
                               bool with_pairs = true);
FeatureCache build_feature_cache(const ModelWeights& w, const Dataset& d, Exec exec = Exec::Serial);

/// Context frames of record i, backed by the cache.
std::vector<FrameInput> cached_frames(const Dataset& d, const FeatureCache& cache, std::size_t i);

// ---------------------------------------------------------------------------
// Affordance labels

/// Mean of the k_avg largest scores among n_dirs prior samples at `point`.
double affordance_label(const ModelWeights& w, const HierarchyPlan& plan, int p_op, int point, const nn::Vec& f_I,
                        int n_dirs, int k_avg, SeedState seed);

/// Labels for several points of one observation in one pass.
std::vector<double> affordance_labels(const ModelWeights& w, const HierarchyPlan& plan, int p_op,
                                      std::span<const int> points, const nn::Vec& f_I, int n_dirs, int k_avg,
                                      SeedState seed);

/// Mean of the k largest entries.
double top_mean(std::span<const double> scores, int k);

// ---------------------------------------------------------------------------
// Training

/// Stage-2 training pairs: points, their labels and the context feature per record.
struct LabelSet {
  std::vector<std::vector<int>> points;
  std::vector<std::vector<double>> labels;
  std::vector<nn::Vec> f_I;
};
LabelSet generate_labels(const ModelWeights& w, const Dataset& d, const TrainConfig& config);

struct BatchLoss {
  double scoring = 0.0;
  double direction = 0.0;
  double kl = 0.0;
  double affordance = 0.0;
  double total() const { return scoring + direction + kl + affordance; }
};

/// Stage-1 objective on explicit batches: the mean scoring loss over
/// `score_batch` plus the mean proposal loss over `proposal_batch`, whose
/// sample k draws its noise from noise_seed.child(k). With frozen_clouds the
/// cached rows replace the proposal and scoring cloud encoders. Adds the
/// gradient into *grad when given.
BatchLoss stage1_batch_loss(const ModelWeights& w, const Dataset& d, const FeatureCache& cache,
                            std::span<const std::size_t> score_batch, std::span<const std::size_t> proposal_batch,
                            const TrainConfig& config, SeedState noise_seed, bool frozen_clouds,
                            ModelWeights* grad = nullptr);

/// Mean L1 over every labelled point of the batch records. When balanced, points
/// labelled >= 0.5 and points below carry half the weight each (if both occur).
BatchLoss stage2_batch_loss(const ModelWeights& w, const Dataset& d, const LabelSet& labels,
                            std::span<const std::size_t> batch, Exec exec, ModelWeights* grad = nullptr,
                            bool balanced = false);

struct LogEntry {
  int stage = 0;
  int step = 0;
  double lr = 0.0;
  double loss = 0.0;
  double scoring = 0.0;    // stage 1
  double direction = 0.0;  // stage 1
  double kl = 0.0;         // stage 1
  double affordance = 0.0; // stage 2
};

std::string to_json_line(const LogEntry& e);

struct TrainResult {
  ModelWeights weights;
  std::vector<LogEntry> log;
};

/// Stage 1 fits the scorer and the proposal (through the context module);
/// stage 2 freezes them, labels points and fits the affordance head.
/// `on_log` receives each entry as it is produced.
TrainResult train(const Dataset& d, const ModelConfig& model, const TrainConfig& config,
                  const std::function<void(const LogEntry&)>& on_log = {});

/// Stage 1 alone on an existing model; returns the updated copy.
TrainResult train_stage1(const Dataset& d, ModelWeights w, const TrainConfig& config,
                         const std::function<void(const LogEntry&)>& on_log = {});
/// Stage 2 alone; the proposal, scoring and context heads are read-only.
TrainResult train_stage2(const Dataset& d, ModelWeights w, const TrainConfig& config,
                         const std::function<void(const LogEntry&)>& on_log = {});


// ---------------------------------------------------------------------------
// Adaptation

struct AdaptStats {
  int steps = 0;
  std::vector<int> online_per_step;
  std::vector<int> offline_per_step;
};

/// Online records of the running episode with their own cache.
struct OnlineStore {
  Dataset data;
  FeatureCache cache;
};

/// Returns an updated copy of `w` after config.adapt_steps Adam steps, each on
/// adapt_online records drawn with replacement from the online store and
/// adapt_offline records drawn from the offline store. Stage-1 losses only;
/// cloud encoders and the affordance head are left as they are.
ModelWeights adapt_update(const ModelWeights& w, const OnlineStore& online, const Dataset& offline,
                          const FeatureCache& offline_cache, const TrainConfig& config, SeedState seed,
                          AdaptStats* stats = nullptr);

}  // namespace supportaff
