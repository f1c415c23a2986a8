#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "supportaff/encoders.hpp"
#include "supportaff/env.hpp"
#include "supportaff/nn.hpp"

namespace supportaff {

enum class Exec : std::uint8_t { Serial, Parallel };

struct ModelConfig {
  EncoderConfig encoder;
  int context_dim = 128;
  int latent_dim = 128;
  std::vector<int> affordance_hidden{128, 128};
  std::vector<int> scoring_hidden{128, 128};
  std::vector<int> posterior_hidden{128};
  std::vector<int> decoder_hidden{128, 128};
  std::vector<int> context_hidden{128};
  std::vector<int> attention_hidden{32};

  int feature_dim() const { return encoder.feature_dim(); }
  int small_dim() const { return encoder.small_dim; }
  /// [f_p_op, f_p_sp, f_op, f_sp, f_I], shared by the proposal and scoring heads.
  int condition_dim() const { return 2 * feature_dim() + 2 * small_dim() + context_dim; }
  int affordance_input_dim() const { return 2 * feature_dim() + small_dim() + context_dim; }
  void validate() const;
};

struct AffordanceHead {
  EncoderWeights enc;
  nn::Mlp mlp;  // [f_p_op, f_p_i, f_op, f_I] -> sigmoid
};

struct ProposalHead {
  EncoderWeights enc;
  nn::Mlp posterior;  // [condition, f_d] -> [mu, logvar]
  nn::Mlp decoder;    // [condition, z] -> raw direction
};

struct ScoringHead {
  EncoderWeights enc;
  nn::Mlp mlp;  // [condition, f_d] -> sigmoid
};

struct ContextModule {
  EncoderWeights enc;
  nn::Mlp step;       // [f_O, f_sp, f_d, f_m] -> f_I_i
  nn::Mlp attention;  // f_I_i -> softplus weight
  nn::Mat no_context;  // context_dim x 1
};

/// Parameters of every head; no array is shared between heads.
struct ModelWeights {
  ModelConfig config;
  AffordanceHead affordance;
  ProposalHead proposal;
  ScoringHead scoring;
  ContextModule context;

  std::size_t parameter_count() const;
};

ModelWeights make_model(const ModelConfig& config, SeedState seed);

enum class ParamGroup : std::uint8_t {
  All,
  Affordance,  // affordance head including its extractor
  Stage1,      // proposal, scoring and context; the context cloud encoder stays at its initial values
  Adapt,       // Stage1 minus the proposal and scoring cloud encoders
};
nn::ParamList model_params(ModelWeights& w, ParamGroup group);

/// Same architecture with every array zeroed; used as a gradient buffer.
ModelWeights zeros_like(const ModelWeights& w);

// ---------------------------------------------------------------------------
// Interaction context

/// One context frame (O_i, u_i, m_i): the observation before a failed
/// attempt, the attempt and the displacement it caused.
struct ContextFrame {
  PointCloud cloud;
  SupportAction action;
  DisplacementBundle displacement;
};

struct FrameFeature {
  nn::Vec feature;
  double weight = 0.0;
};

FrameFeature context_step(const PointCloud& cloud, const SupportAction& action, const DisplacementBundle& m,
                          const ModelWeights& w);

/// Weighted mean of frame features; the learned no-context vector when empty.
nn::Vec aggregate_context(std::span<const FrameFeature> frames, const nn::Vec& no_context);

nn::Vec context_feature(const ModelWeights& w, std::span<const ContextFrame> frames);

// ---------------------------------------------------------------------------
// Heads at inference

/// Scores for columns built by assemble_input.
nn::Vec affordance_forward(const nn::Mat& inputs, const AffordanceHead& head);

/// Affordance for every point of a planned observation.
nn::Vec predict_affordance(const ModelWeights& w, const HierarchyPlan& plan, int p_op, const nn::Vec& f_I);

/// Indices of the K largest scores in descending order, ties to the lower index.
std::vector<int> topk_candidates(std::span<const double> scores, int K);

struct LatentCode {
  nn::Vec z;
  nn::Vec mu;
  nn::Vec logvar;
};

/// Posterior over z for a known direction; z = mu + exp(logvar / 2) * noise.
LatentCode propose_encode(const Vec3& d, const nn::Vec& condition, const ProposalHead& head, const nn::Vec& noise);
Vec3 propose_decode(const nn::Vec& z, const nn::Vec& condition, const ProposalHead& head);

/// Unit vector along raw; the zero vector maps to +z.
Vec3 normalize_direction(const Vec3& raw);

nn::Vec make_condition(const nn::Vec& f_p_op, const nn::Vec& f_p_sp, const nn::Vec& f_op, const nn::Vec& f_sp,
                       const nn::Vec& f_I);

double score_action(const nn::Vec& f_p_op, const nn::Vec& f_p_sp, const nn::Vec& f_op, const nn::Vec& f_sp,
                    const nn::Vec& f_d, const nn::Vec& f_I, const ScoringHead& head);

// ---------------------------------------------------------------------------
// Candidate search

/// Encoder outputs of one observation that the proposal and scoring heads
/// need for a set of support points.
struct PairFeatures {
  std::vector<int> points;
  nn::Mat proposal_rows;  // feature_dim x points
  nn::Mat scoring_rows;
  nn::Mat proposal_pos;   // small_dim x points
  nn::Mat scoring_pos;
  nn::Vec proposal_op_row, scoring_op_row;
  nn::Vec proposal_op_pos, scoring_op_pos;
};

PairFeatures pair_features(const ModelWeights& w, const HierarchyPlan& plan, int p_op, std::span<const int> points);

/// Seeded latent samples for one candidate point: latent_dim x n_dirs.
nn::Mat candidate_latents(SeedState seed, int point, int latent_dim, int n_dirs);

struct CandidateGrid {
  std::vector<int> points;                  // candidate order
  std::vector<Eigen::Matrix3Xd> directions;  // per candidate, 3 x n_dirs
  nn::Mat scores;                           // n_dirs x candidates
};

CandidateGrid evaluate_candidates(const ModelWeights& w, const PairFeatures& features, const nn::Vec& f_I, int n_dirs,
                                  SeedState seed, Exec exec = Exec::Serial);

struct Selection {
  SupportAction action;
  double score = 0.0;
};

/// Best-scoring pair of the grid; ties go to the lower point index, then to
/// the earlier sample.
Selection best_of(const CandidateGrid& grid);

Selection select_best(const ModelWeights& w, const HierarchyPlan& plan, int p_op, const nn::Vec& f_I,
                      std::span<const double> affordance, int K, int n_dirs, SeedState seed,
                      Exec exec = Exec::Serial);

// ---------------------------------------------------------------------------
// Differentiable pieces used by training. Cached rows stand in for a frozen
// cloud encoder; when present no gradient reaches that encoder.

struct PairInput {
  const HierarchyPlan* plan = nullptr;
  int p_op = 0;
  int p_sp = 0;
  Vec3 direction = Vec3::UnitZ();
  const nn::Mat* cached_rows = nullptr;  // feature_dim x 2: op, sp
  const Eigen::Matrix<double, 3, 2>* cached_positions = nullptr;  // normalized op, sp; replaces plan lookups
};

struct ScoreTape {
  CloudTape cloud;
  nn::MlpTape pos, dir, head;
  nn::Mat rows;
};

double scoring_forward(const ScoringHead& head, const ModelConfig& config, const PairInput& in, const nn::Vec& f_I,
                       ScoreTape* tape);
/// Returns the gradient with respect to f_I.
nn::Vec scoring_backward(const ScoringHead& head, const ModelConfig& config, const PairInput& in,
                         const ScoreTape& tape, double d_score, ScoringHead* grad);

struct ProposalTape {
  CloudTape cloud;
  nn::MlpTape pos, dir, posterior, decoder;
  nn::Mat rows;
  nn::Vec noise, mu, logvar, z;
  Vec3 raw = Vec3::Zero();
  Vec3 d_hat = Vec3::UnitZ();
};

struct ProposalOutput {
  Vec3 d_hat = Vec3::UnitZ();
  nn::Vec mu, logvar;
};

ProposalOutput proposal_forward(const ProposalHead& head, const ModelConfig& config, const PairInput& in,
                                const nn::Vec& f_I, const nn::Vec& noise, ProposalTape* tape);
/// Back-propagates loss gradients with respect to d_hat, mu and logvar;
/// returns the gradient with respect to f_I.
nn::Vec proposal_backward(const ProposalHead& head, const ModelConfig& config, const PairInput& in,
                          const ProposalTape& tape, const Vec3& d_dhat, const nn::Vec& d_mu, const nn::Vec& d_logvar,
                          ProposalHead* grad);

struct FrameInput {
  const HierarchyPlan* plan = nullptr;
  SupportAction action;
  DisplacementBundle displacement;
  const nn::Vec* cached_global = nullptr;  // frozen f_O
  const Vec3* cached_position = nullptr;   // normalized p_sp
};

struct FrameTape {
  CloudTape cloud;
  std::vector<int> argmax;
  nn::MlpTape pos, dir, disp, step, attention;
  nn::Vec feature;
  double weight = 0.0;
};

struct ContextTape {
  std::vector<FrameTape> frames;
  nn::Vec f_I;
};

/// Global descriptor of a cloud: channel-wise max over all rows.
nn::Vec global_feature(const CloudEncoder& enc, const HierarchyPlan& plan, CloudTape* tape = nullptr,
                       std::vector<int>* argmax = nullptr);

nn::Vec context_forward(const ContextModule& ctx, const ModelConfig& config, std::span<const FrameInput> frames,
                        ContextTape* tape);
void context_backward(const ContextModule& ctx, const ModelConfig& config, std::span<const FrameInput> frames,
                      const ContextTape& tape, const nn::Vec& d_fI, ContextModule* grad);

struct AffordanceTape {
  CloudTape cloud;
  nn::MlpTape pos, head;
  nn::Mat rows;  // op row first, then the requested points
};

nn::Vec affordance_points_forward(const AffordanceHead& head, const HierarchyPlan& plan, int p_op,
                                  std::span<const int> points, const nn::Vec& f_I, AffordanceTape* tape);
void affordance_points_backward(const AffordanceHead& head, const HierarchyPlan& plan, int p_op,
                                std::span<const int> points, const AffordanceTape& tape, const nn::Vec& d_scores,
                                AffordanceHead* grad);

}  // namespace supportaff
