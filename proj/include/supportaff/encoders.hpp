#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "supportaff/geometry.hpp"
#include "supportaff/nn.hpp"

namespace supportaff {

struct DisplacementBundle;

struct EncoderConfig {
  int min_points = 64;
  std::array<int, 3> sample_divisor{4, 16, 64};
  std::array<double, 3> radius{0.1, 0.2, 0.4};  // in the normalized (unit-sphere) frame
  int group_size = 16;
  std::array<std::vector<int>, 3> sa_widths{{{32, 64}, {128}, {128}}};
  // fp_widths[l] is the propagation stage that produces level-l features.
  std::array<std::vector<int>, 3> fp_widths{{{128, 128}, {128}, {128}}};
  int small_hidden = 128;
  int small_dim = 32;
  double disp_scale = 50.0;  // multiplies m and translation before the disp encoder
  std::uint64_t plan_seed = 0x5EEDULL;

  int feature_dim() const { return fp_widths[0].back(); }
  void validate() const;
};

/// Point-cloud backbone: three set-abstraction levels and three propagation
/// stages back to full resolution.
struct CloudEncoder {
  std::array<nn::Mlp, 3> sa;
  std::array<nn::Mlp, 3> fp;
};

/// Extractor owned by one head. Small encoders a head does not consume are
/// left empty.
struct EncoderWeights {
  CloudEncoder cloud;
  nn::Mlp position;      // shared by the op and sp roles
  nn::Mlp direction;
  nn::Mlp displacement;
};

struct EncoderParts {
  bool direction = false;
  bool displacement = false;
};

EncoderWeights make_encoder_weights(const EncoderConfig& config, EncoderParts parts, Rng& rng);
void append_params(EncoderWeights& w, const std::string& prefix, nn::ParamList& out);

struct GroupLevel {
  std::vector<int> centers;  // indices into the previous level
  std::vector<int> offsets;  // CSR offsets into members, size centers + 1
  std::vector<int> members;  // indices into the previous level
};

struct Interpolation {
  std::vector<std::array<int, 3>> index;  // into the coarser level
  std::vector<std::array<double, 3>> weight;
  int k = 3;
};

/// Everything about a cloud the encoder needs that does not depend on
/// weights: normalization, sampled centers, groups and interpolation stencils.
struct HierarchyPlan {
  Vec3 center = Vec3::Zero();
  double scale = 1.0;
  std::array<Eigen::Matrix3Xd, 4> positions;  // [0] is the normalized cloud
  nn::Mat level0_features;                     // 6 x N: normalized position, normal
  std::array<GroupLevel, 3> levels;            // levels[l] builds level l + 1
  std::array<Interpolation, 3> interp;         // interp[l]: level l + 1 onto level l
  std::array<double, 3> radius{1.0, 1.0, 1.0};  // grouping radius per level

  int size() const { return static_cast<int>(positions[0].cols()); }
  Vec3 normalize(const Vec3& p) const { return (p - center) / scale; }
};

HierarchyPlan plan_hierarchy(const PointCloud& cloud, const EncoderConfig& config);
HierarchyPlan plan_hierarchy(const PointCloud& cloud, const EncoderConfig& config, SeedState seed);

/// Plan for the cloud whose row i is row perm[i] of the planned cloud, with
/// every sampled index remapped instead of resampled.
HierarchyPlan permute_plan(const HierarchyPlan& plan, std::span<const int> perm);

struct SaTape {
  nn::Mat grouped;
  nn::MlpTape mlp;
  std::vector<int> argmax;  // column of the winning member, per (channel, center)
};

struct CloudTape {
  std::array<nn::Mat, 4> features;  // pooled features per level; [0] is the input
  std::array<SaTape, 3> sa;
  std::vector<int> rows;
  std::vector<int> subset1, subset2;  // level-1/2 points whose propagated features are needed
  nn::Mat up2, up1;                   // propagated features on subset2 / subset1
  std::array<nn::MlpTape, 3> fp;
};

/// Per-point features (feature_dim x rows.size()) for the requested rows only.
nn::Mat encode_rows(const CloudEncoder& enc, const HierarchyPlan& plan, std::span<const int> rows,
                    CloudTape* tape = nullptr);
void encode_rows_backward(const CloudEncoder& enc, const HierarchyPlan& plan, const CloudTape& tape,
                          const nn::Mat& d_rows, CloudEncoder* grad);

/// All rows, feature_dim x N.
nn::Mat encode_all(const CloudEncoder& enc, const HierarchyPlan& plan, CloudTape* tape = nullptr);

/// Row-major N x feature_dim view used at the public surface.
nn::Mat encode_cloud(const PointCloud& cloud, const EncoderWeights& w, const EncoderConfig& config);

enum class SmallRole : std::uint8_t { Op, Sp, Dir, Disp };

nn::Vec encode_small(std::span<const double> x, SmallRole role, const EncoderWeights& w);

/// 7-number displacement input: scaled m, scaled translation, rotation.
nn::Vec displacement_input(const DisplacementBundle& bundle, const EncoderConfig& config);

/// [fp_op, fp_i, f_op, f_I]; a null f_I is replaced by no_context.
nn::Vec assemble_input(const nn::Vec& fp_op, const nn::Vec& fp_i, const nn::Vec& f_op, const nn::Vec* f_I,
                       const nn::Vec& no_context);

}  // namespace supportaff
