#include "supportaff/encoders.hpp"

#include <algorithm>
#include <limits>
#include <numeric>

#include "supportaff/env.hpp"
#include "supportaff/errors.hpp"

namespace supportaff {

using nn::Mat;
using nn::Vec;

namespace {

constexpr int kLevel0Channels = 6;

int level_count(int n, int divisor) { return std::max(1, n / divisor); }

std::vector<int> with_ends(int in, const std::vector<int>& widths) {
  std::vector<int> w{in};
  w.insert(w.end(), widths.begin(), widths.end());
  return w;
}

Interpolation build_interpolation(const Eigen::Matrix3Xd& fine, const Eigen::Matrix3Xd& coarse) {
  Interpolation out;
  const int nc = static_cast<int>(coarse.cols());
  out.k = std::min(3, nc);
  out.index.resize(fine.cols());
  out.weight.resize(fine.cols());
  std::vector<int> order(nc);
  std::vector<double> d(nc);
  for (Eigen::Index i = 0; i < fine.cols(); ++i) {
    for (int j = 0; j < nc; ++j) d[j] = (coarse.col(j) - fine.col(i)).norm();
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + out.k, order.end(),
                      [&](int a, int b) { return d[a] < d[b] || (d[a] == d[b] && a < b); });
    double total = 0.0;
    std::array<int, 3> idx{0, 0, 0};
    std::array<double, 3> w{0.0, 0.0, 0.0};
    for (int k = 0; k < out.k; ++k) {
      idx[k] = order[k];
      w[k] = 1.0 / (d[order[k]] + 1e-8);
      total += w[k];
    }
    for (int k = 0; k < out.k; ++k) w[k] /= total;
    out.index[i] = idx;
    out.weight[i] = w;
  }
  return out;
}

std::vector<int> sorted_unique(std::vector<int> v) {
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
  return v;
}

// Map from a level index to its column in `subset`, -1 when absent.
std::vector<int> column_map(const std::vector<int>& subset, int n) {
  std::vector<int> map(n, -1);
  for (std::size_t c = 0; c < subset.size(); ++c) map[subset[c]] = static_cast<int>(c);
  return map;
}

// Interpolated coarse features at `targets`; coarse columns are addressed
// through `coarse_col` (identity when null).
Mat interpolate(const Interpolation& ip, const Mat& coarse, const std::vector<int>& targets,
                const std::vector<int>* coarse_col) {
  Mat out = Mat::Zero(coarse.rows(), static_cast<Eigen::Index>(targets.size()));
  for (std::size_t c = 0; c < targets.size(); ++c) {
    const auto& idx = ip.index[targets[c]];
    const auto& w = ip.weight[targets[c]];
    for (int k = 0; k < ip.k; ++k) {
      const int col = coarse_col ? (*coarse_col)[idx[k]] : idx[k];
      out.col(static_cast<Eigen::Index>(c)) += w[k] * coarse.col(col);
    }
  }
  return out;
}

void interpolate_backward(const Interpolation& ip, const Mat& d_out, const std::vector<int>& targets,
                          const std::vector<int>* coarse_col, Mat& d_coarse) {
  for (std::size_t c = 0; c < targets.size(); ++c) {
    const auto& idx = ip.index[targets[c]];
    const auto& w = ip.weight[targets[c]];
    for (int k = 0; k < ip.k; ++k) {
      const int col = coarse_col ? (*coarse_col)[idx[k]] : idx[k];
      d_coarse.col(col) += w[k] * d_out.col(static_cast<Eigen::Index>(c));
    }
  }
}

Mat gather_cols(const Mat& m, const std::vector<int>& cols) {
  Mat out(m.rows(), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t c = 0; c < cols.size(); ++c) out.col(static_cast<Eigen::Index>(c)) = m.col(cols[c]);
  return out;
}

Mat stack(const Mat& top, const Mat& bottom) {
  Mat out(top.rows() + bottom.rows(), top.cols());
  out.topRows(top.rows()) = top;
  out.bottomRows(bottom.rows()) = bottom;
  return out;
}

}  // namespace

void EncoderConfig::validate() const {
  if (min_points < 1 || group_size < 1 || small_hidden < 1 || small_dim < 1)
    throw InvalidArgument("encoder config: sizes must be positive");
  for (int l = 0; l < 3; ++l) {
    if (sample_divisor[l] < 1 || !(radius[l] > 0.0)) throw InvalidArgument("encoder config: bad level parameters");
    if (sa_widths[l].empty() || fp_widths[l].empty()) throw InvalidArgument("encoder config: empty layer widths");
  }
}

EncoderWeights make_encoder_weights(const EncoderConfig& config, EncoderParts parts, Rng& rng) {
  config.validate();
  EncoderWeights w;
  std::array<int, 4> channels{kLevel0Channels, 0, 0, 0};
  for (int l = 0; l < 3; ++l) {
    w.cloud.sa[l] = nn::make_mlp(with_ends(3 + channels[l], config.sa_widths[l]), nn::Activation::Silu,
                                 nn::Activation::Silu, rng);
    channels[l + 1] = config.sa_widths[l].back();
  }
  int upper = channels[3];
  for (int l = 2; l >= 0; --l) {
    w.cloud.fp[l] = nn::make_mlp(with_ends(upper + channels[l], config.fp_widths[l]), nn::Activation::Silu,
                                 l == 0 ? nn::Activation::Identity : nn::Activation::Silu, rng);
    upper = config.fp_widths[l].back();
  }
  const auto small = [&](int in) {
    return nn::make_mlp({in, config.small_hidden, config.small_dim}, nn::Activation::Silu, nn::Activation::Identity,
                        rng);
  };
  w.position = small(3);
  if (parts.direction) w.direction = small(3);
  if (parts.displacement) w.displacement = small(7);
  return w;
}

void append_params(EncoderWeights& w, const std::string& prefix, nn::ParamList& out) {
  for (int l = 0; l < 3; ++l) nn::append_params(w.cloud.sa[l], prefix + ".sa" + std::to_string(l), out);
  for (int l = 0; l < 3; ++l) nn::append_params(w.cloud.fp[l], prefix + ".fp" + std::to_string(l), out);
  nn::append_params(w.position, prefix + ".position", out);
  nn::append_params(w.direction, prefix + ".direction", out);
  nn::append_params(w.displacement, prefix + ".displacement", out);
}

HierarchyPlan plan_hierarchy(const PointCloud& cloud, const EncoderConfig& config) {
  return plan_hierarchy(cloud, config, SeedState{config.plan_seed, 0});
}

HierarchyPlan plan_hierarchy(const PointCloud& cloud, const EncoderConfig& config, SeedState seed) {
  config.validate();
  cloud.validate();
  const int n = static_cast<int>(cloud.size());
  if (n < config.min_points) throw InvalidArgument("encoder: cloud has fewer points than the smallest abstraction size");

  HierarchyPlan plan;
  plan.center = cloud.positions.rowwise().mean();
  Eigen::Matrix3Xd centered = cloud.positions.colwise() - plan.center;
  const double radius = centered.colwise().norm().maxCoeff();
  plan.scale = radius > 1e-12 ? radius : 1.0;
  plan.positions[0] = centered / plan.scale;
  plan.level0_features.resize(kLevel0Channels, n);
  plan.level0_features.topRows(3) = plan.positions[0];
  plan.level0_features.bottomRows(3) = cloud.normals;

  for (int l = 0; l < 3; ++l) {
    const Eigen::Matrix3Xd& prev = plan.positions[l];
    const int m = std::min(static_cast<int>(prev.cols()), level_count(n, config.sample_divisor[l]));
    GroupLevel& g = plan.levels[l];
    g.centers = farthest_point_sample(prev, m, seed.child(static_cast<std::uint64_t>(l)));
    g.offsets.assign(1, 0);
    plan.positions[l + 1].resize(3, m);
    for (int j = 0; j < m; ++j) {
      const Vec3 c = prev.col(g.centers[j]);
      plan.positions[l + 1].col(j) = c;
      const auto members = ball_query(prev, c, config.radius[l], config.group_size);
      g.members.insert(g.members.end(), members.begin(), members.end());
      g.offsets.push_back(static_cast<int>(g.members.size()));
    }
  }
  for (int l = 0; l < 3; ++l) plan.interp[l] = build_interpolation(plan.positions[l], plan.positions[l + 1]);
  plan.radius = config.radius;
  return plan;
}

HierarchyPlan permute_plan(const HierarchyPlan& plan, std::span<const int> perm) {
  const int n = plan.size();
  if (static_cast<int>(perm.size()) != n) throw InvalidArgument("permute_plan: permutation size mismatch");
  std::vector<int> inverse(n, -1);
  for (int i = 0; i < n; ++i) {
    if (perm[i] < 0 || perm[i] >= n || inverse[perm[i]] != -1) throw InvalidArgument("permute_plan: not a permutation");
    inverse[perm[i]] = i;
  }
  HierarchyPlan out = plan;
  for (int i = 0; i < n; ++i) {
    out.positions[0].col(i) = plan.positions[0].col(perm[i]);
    out.level0_features.col(i) = plan.level0_features.col(perm[i]);
    out.interp[0].index[i] = plan.interp[0].index[perm[i]];
    out.interp[0].weight[i] = plan.interp[0].weight[perm[i]];
  }
  for (int& c : out.levels[0].centers) c = inverse[c];
  for (int& m : out.levels[0].members) m = inverse[m];
  return out;
}


Mat encode_rows(const CloudEncoder& enc, const HierarchyPlan& plan, std::span<const int> rows, CloudTape* tape) {
  const int n = plan.size();
  if (rows.empty()) throw InvalidArgument("encode_rows: no rows requested");
  for (int r : rows)
    if (r < 0 || r >= n) throw InvalidArgument("encode_rows: row index out of range");
  CloudTape local;
  CloudTape& t = tape ? *tape : local;

  t.features[0] = plan.level0_features;
  for (int l = 0; l < 3; ++l) {
    const GroupLevel& g = plan.levels[l];
    const Eigen::Matrix3Xd& prev_pos = plan.positions[l];
    const Mat& prev = t.features[l];
    const double inv_r = 1.0 / plan.radius[l];
    SaTape& st = t.sa[l];
    st.grouped.resize(3 + prev.rows(), static_cast<Eigen::Index>(g.members.size()));
    const auto centers = static_cast<Eigen::Index>(g.centers.size());
    for (Eigen::Index j = 0; j < centers; ++j) {
      const Vec3 c = plan.positions[l + 1].col(j);
      for (int q = g.offsets[j]; q < g.offsets[j + 1]; ++q) {
        st.grouped.col(q).head<3>() = (prev_pos.col(g.members[q]) - c) * inv_r;
        st.grouped.col(q).tail(prev.rows()) = prev.col(g.members[q]);
      }
    }
    const Mat h = nn::forward(enc.sa[l], st.grouped, &st.mlp);
    Mat pooled(h.rows(), centers);
    st.argmax.assign(static_cast<std::size_t>(h.rows() * centers), 0);
    for (Eigen::Index j = 0; j < centers; ++j) {
      for (Eigen::Index ch = 0; ch < h.rows(); ++ch) {
        int best = g.offsets[j];
        for (int q = g.offsets[j] + 1; q < g.offsets[j + 1]; ++q)
          if (h(ch, q) > h(ch, best)) best = q;
        pooled(ch, j) = h(ch, best);
        st.argmax[static_cast<std::size_t>(j * h.rows() + ch)] = best;
      }
    }
    t.features[l + 1] = std::move(pooled);
  }

  t.rows.assign(rows.begin(), rows.end());
  std::vector<int> s1;
  for (int r : t.rows)
    for (int k = 0; k < plan.interp[0].k; ++k) s1.push_back(plan.interp[0].index[r][k]);
  t.subset1 = sorted_unique(std::move(s1));
  std::vector<int> s2;
  for (int p : t.subset1)
    for (int k = 0; k < plan.interp[1].k; ++k) s2.push_back(plan.interp[1].index[p][k]);
  t.subset2 = sorted_unique(std::move(s2));

  const std::vector<int> col2 = column_map(t.subset2, static_cast<int>(plan.positions[2].cols()));
  const std::vector<int> col1 = column_map(t.subset1, static_cast<int>(plan.positions[1].cols()));
  t.up2 = nn::forward(enc.fp[2], stack(interpolate(plan.interp[2], t.features[3], t.subset2, nullptr),
                                       gather_cols(t.features[2], t.subset2)),
                      &t.fp[2]);
  t.up1 = nn::forward(enc.fp[1], stack(interpolate(plan.interp[1], t.up2, t.subset1, &col2),
                                       gather_cols(t.features[1], t.subset1)),
                      &t.fp[1]);
  return nn::forward(enc.fp[0], stack(interpolate(plan.interp[0], t.up1, t.rows, &col1),
                                      gather_cols(t.features[0], t.rows)),
                     &t.fp[0]);
}

void encode_rows_backward(const CloudEncoder& enc, const HierarchyPlan& plan, const CloudTape& t,
                          const Mat& d_rows, CloudEncoder* grad) {
  const std::vector<int> col2 = column_map(t.subset2, static_cast<int>(plan.positions[2].cols()));
  const std::vector<int> col1 = column_map(t.subset1, static_cast<int>(plan.positions[1].cols()));
  std::array<Mat, 4> d_feat;
  for (int l = 1; l < 4; ++l) d_feat[l] = Mat::Zero(t.features[l].rows(), t.features[l].cols());

  // Propagation stages, finest first.
  Mat dx0 = nn::backward(enc.fp[0], t.fp[0], d_rows, grad ? &grad->fp[0] : nullptr);
  Mat d_up1 = Mat::Zero(t.up1.rows(), t.up1.cols());
  interpolate_backward(plan.interp[0], dx0.topRows(t.up1.rows()), t.rows, &col1, d_up1);

  Mat dx1 = nn::backward(enc.fp[1], t.fp[1], d_up1, grad ? &grad->fp[1] : nullptr);
  Mat d_up2 = Mat::Zero(t.up2.rows(), t.up2.cols());
  interpolate_backward(plan.interp[1], dx1.topRows(t.up2.rows()), t.subset1, &col2, d_up2);
  const Mat skip1 = dx1.bottomRows(t.features[1].rows());
  for (std::size_t c = 0; c < t.subset1.size(); ++c)
    d_feat[1].col(t.subset1[c]) += skip1.col(static_cast<Eigen::Index>(c));

  Mat dx2 = nn::backward(enc.fp[2], t.fp[2], d_up2, grad ? &grad->fp[2] : nullptr);
  interpolate_backward(plan.interp[2], dx2.topRows(t.features[3].rows()), t.subset2, nullptr, d_feat[3]);
  const Mat skip2 = dx2.bottomRows(t.features[2].rows());
  for (std::size_t c = 0; c < t.subset2.size(); ++c)
    d_feat[2].col(t.subset2[c]) += skip2.col(static_cast<Eigen::Index>(c));

  // Set abstraction, coarsest first. Level-0 features are inputs.
  for (int l = 2; l >= 0; --l) {
    const GroupLevel& g = plan.levels[l];
    const SaTape& st = t.sa[l];
    const Mat& dp = d_feat[l + 1];
    Mat dh = Mat::Zero(dp.rows(), st.grouped.cols());
    for (Eigen::Index j = 0; j < dp.cols(); ++j)
      for (Eigen::Index ch = 0; ch < dp.rows(); ++ch)
        dh(ch, st.argmax[static_cast<std::size_t>(j * dp.rows() + ch)]) += dp(ch, j);
    if (l == 0) {
      if (grad) {
        // Input gradient is not needed below level 0; only accumulate parameters.
        nn::backward(enc.sa[0], st.mlp, dh, &grad->sa[0]);
      }
      break;
    }
    const Mat dx = nn::backward(enc.sa[l], st.mlp, dh, grad ? &grad->sa[l] : nullptr);
    const auto c = t.features[l].rows();
    for (std::size_t q = 0; q < g.members.size(); ++q)
      d_feat[l].col(g.members[q]) += dx.col(static_cast<Eigen::Index>(q)).tail(c);
  }
}

Mat encode_all(const CloudEncoder& enc, const HierarchyPlan& plan, CloudTape* tape) {
  std::vector<int> rows(plan.size());
  std::iota(rows.begin(), rows.end(), 0);
  return encode_rows(enc, plan, rows, tape);
}

Mat encode_cloud(const PointCloud& cloud, const EncoderWeights& w, const EncoderConfig& config) {
  const HierarchyPlan plan = plan_hierarchy(cloud, config);
  return encode_all(w.cloud, plan).transpose();
}

Vec encode_small(std::span<const double> x, SmallRole role, const EncoderWeights& w) {
  const std::size_t arity = role == SmallRole::Disp ? 7 : 3;
  if (x.size() != arity) throw InvalidArgument("encode_small: wrong input arity for role");
  const nn::Mlp& mlp = role == SmallRole::Dir ? w.direction : role == SmallRole::Disp ? w.displacement : w.position;
  if (mlp.empty()) throw InvalidArgument("encode_small: this extractor has no encoder for the role");
  const Mat in = Eigen::Map<const Vec>(x.data(), static_cast<Eigen::Index>(x.size()));
  return nn::forward(mlp, in).col(0);
}

Vec displacement_input(const DisplacementBundle& bundle, const EncoderConfig& config) {
  Vec x(7);
  x << config.disp_scale * bundle.m, config.disp_scale * bundle.translation, bundle.rotation;
  return x;
}

Vec assemble_input(const Vec& fp_op, const Vec& fp_i, const Vec& f_op, const Vec* f_I, const Vec& no_context) {
  if (fp_op.size() != fp_i.size()) throw InvalidArgument("assemble_input: point feature sizes differ");
  const Vec& ctx = f_I ? *f_I : no_context;
  if (ctx.size() != no_context.size()) throw InvalidArgument("assemble_input: context size mismatch");
  Vec out(fp_op.size() + fp_i.size() + f_op.size() + ctx.size());
  out << fp_op, fp_i, f_op, ctx;
  return out;
}

}  // namespace supportaff
