#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "supportaff/geometry.hpp"

namespace supportaff::nn {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

enum class Activation : std::uint8_t { Identity, Silu, Sigmoid, Softplus };

double activate(Activation act, double x);
double activate_grad(Activation act, double x);  // derivative w.r.t. the pre-activation

struct Dense {
  Mat weight;  // out x in
  Mat bias;    // out x 1
};

/// Stack of dense layers. Columns of every input matrix are independent
/// samples.
struct Mlp {
  std::vector<Dense> layers;
  Activation hidden = Activation::Silu;
  Activation output = Activation::Identity;

  bool empty() const { return layers.empty(); }
  int in_dim() const { return empty() ? 0 : static_cast<int>(layers.front().weight.cols()); }
  int out_dim() const { return empty() ? 0 : static_cast<int>(layers.back().weight.rows()); }
  std::size_t parameter_count() const;
};

/// `widths` lists the input width followed by every layer's output width.
Mlp make_mlp(std::span<const int> widths, Activation hidden, Activation output, Rng& rng);
Mlp make_mlp(std::initializer_list<int> widths, Activation hidden, Activation output, Rng& rng);

struct MlpTape {
  std::vector<Mat> inputs;
  std::vector<Mat> pre;
};

Mat forward(const Mlp& mlp, const Mat& x, MlpTape* tape = nullptr);

/// Same as forward() on the stacked input [shared (broadcast to every column);
/// varying], without materialising the broadcast copy.
Mat forward_shared_prefix(const Mlp& mlp, const Vec& shared, const Mat& varying);

/// forward() on inputs that equal `base` except rows [offset, offset +
/// varying.rows()), which take each column of `varying`. Rows of `base` inside
/// that block are ignored.
Mat forward_split(const Mlp& mlp, const Vec& base, Eigen::Index offset, const Mat& varying);

/// Reverse pass. Accumulates parameter gradients into `grad` when it is
/// non-null and returns the gradient with respect to the input.
Mat backward(const Mlp& mlp, const MlpTape& tape, const Mat& d_out, Mlp* grad);

// ---------------------------------------------------------------------------
// Parameter bookkeeping

struct ParamRef {
  std::string name;
  Mat* value = nullptr;
};
using ParamList = std::vector<ParamRef>;

void append_params(Mlp& mlp, const std::string& prefix, ParamList& out);

/// Zero every array in the list.
void zero(const ParamList& params);
std::size_t count(const ParamList& params);

/// Adam with L2 weight decay folded into the gradient.
class Adam {
 public:
  Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8, double weight_decay = 0.0)
      : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

  /// `params` and `grads` must enumerate matching arrays in the same order on
  /// every call.
  void step(const ParamList& params, const ParamList& grads, double lr);
  int steps_taken() const { return t_; }

 private:
  double beta1_, beta2_, eps_, weight_decay_;
  int t_ = 0;
  std::vector<Mat> m_, v_;
};

}  // namespace supportaff::nn
