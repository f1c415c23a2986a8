#include "supportaff/nn.hpp"

#include <cmath>

#include "supportaff/errors.hpp"

namespace supportaff::nn {

namespace {

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

void apply(Activation act, Mat& m) {
  if (act == Activation::Identity) return;
  m = m.unaryExpr([act](double x) { return activate(act, x); });
}

}  // namespace

double activate(Activation act, double x) {
  switch (act) {
    case Activation::Identity: return x;
    case Activation::Silu: return x * sigmoid(x);
    case Activation::Sigmoid: return sigmoid(x);
    case Activation::Softplus: return x > 30.0 ? x : std::log1p(std::exp(x));
  }
  return x;
}

double activate_grad(Activation act, double x) {
  switch (act) {
    case Activation::Identity: return 1.0;
    case Activation::Silu: {
      const double s = sigmoid(x);
      return s * (1.0 + x * (1.0 - s));
    }
    case Activation::Sigmoid: {
      const double s = sigmoid(x);
      return s * (1.0 - s);
    }
    case Activation::Softplus: return sigmoid(x);
  }
  return 1.0;
}

std::size_t Mlp::parameter_count() const {
  std::size_t n = 0;
  for (const Dense& d : layers) n += static_cast<std::size_t>(d.weight.size() + d.bias.size());
  return n;
}

Mlp make_mlp(std::span<const int> widths, Activation hidden, Activation output, Rng& rng) {
  if (widths.size() < 2) throw InvalidArgument("make_mlp needs an input and at least one output width");
  Mlp mlp;
  mlp.hidden = hidden;
  mlp.output = output;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    const int in = widths[i], out = widths[i + 1];
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    Dense d;
    d.weight.resize(out, in);
    d.bias.resize(out, 1);
    for (Eigen::Index k = 0; k < d.weight.size(); ++k) d.weight.data()[k] = rng.uniform(-bound, bound);
    for (Eigen::Index k = 0; k < d.bias.size(); ++k) d.bias.data()[k] = rng.uniform(-bound, bound);
    mlp.layers.push_back(std::move(d));
  }
  return mlp;
}

Mlp make_mlp(std::initializer_list<int> widths, Activation hidden, Activation output, Rng& rng) {
  const std::vector<int> w(widths);
  return make_mlp(std::span<const int>(w), hidden, output, rng);
}

Mat forward(const Mlp& mlp, const Mat& x, MlpTape* tape) {
  if (tape) {
    tape->inputs.clear();
    tape->pre.clear();
  }
  Mat h = x;
  for (std::size_t i = 0; i < mlp.layers.size(); ++i) {
    const Dense& d = mlp.layers[i];
    Mat z = d.weight * h;
    z.colwise() += d.bias.col(0);
    if (tape) {
      tape->inputs.push_back(std::move(h));
      tape->pre.push_back(z);
    }
    apply(i + 1 == mlp.layers.size() ? mlp.output : mlp.hidden, z);
    h = std::move(z);
  }
  return h;
}

Mat forward_shared_prefix(const Mlp& mlp, const Vec& shared, const Mat& varying) {
  Vec base = Vec::Zero(shared.size() + varying.rows());
  base.head(shared.size()) = shared;
  return forward_split(mlp, base, shared.size(), varying);
}

Mat forward_split(const Mlp& mlp, const Vec& base, Eigen::Index offset, const Mat& varying) {
  const Dense& first = mlp.layers.front();
  if (base.size() != first.weight.cols() || offset < 0 || offset + varying.rows() > base.size())
    throw InvalidArgument("forward_split: input layout does not match the first layer");
  Vec masked = base;
  masked.segment(offset, varying.rows()).setZero();
  const Vec shared = first.weight * masked + first.bias.col(0);
  Mat z = first.weight.middleCols(offset, varying.rows()) * varying;
  z.colwise() += shared;
  apply(mlp.layers.size() == 1 ? mlp.output : mlp.hidden, z);
  for (std::size_t i = 1; i < mlp.layers.size(); ++i) {
    const Dense& d = mlp.layers[i];
    Mat y = d.weight * z;
    y.colwise() += d.bias.col(0);
    apply(i + 1 == mlp.layers.size() ? mlp.output : mlp.hidden, y);
    z = std::move(y);
  }
  return z;
}

Mat backward(const Mlp& mlp, const MlpTape& tape, const Mat& d_out, Mlp* grad) {
  Mat d = d_out;
  for (std::size_t k = mlp.layers.size(); k-- > 0;) {
    const Activation act = k + 1 == mlp.layers.size() ? mlp.output : mlp.hidden;
    const Mat& pre = tape.pre[k];
    if (act != Activation::Identity) d.array() *= pre.unaryExpr([act](double x) { return activate_grad(act, x); }).array();
    if (grad) {
      grad->layers[k].weight.noalias() += d * tape.inputs[k].transpose();
      grad->layers[k].bias.col(0) += d.rowwise().sum();
    }
    d = mlp.layers[k].weight.transpose() * d;
  }
  return d;
}

void append_params(Mlp& mlp, const std::string& prefix, ParamList& out) {
  for (std::size_t i = 0; i < mlp.layers.size(); ++i) {
    out.push_back({prefix + ".l" + std::to_string(i) + ".weight", &mlp.layers[i].weight});
    out.push_back({prefix + ".l" + std::to_string(i) + ".bias", &mlp.layers[i].bias});
  }
}

void zero(const ParamList& params) {
  for (const ParamRef& p : params) p.value->setZero();
}

std::size_t count(const ParamList& params) {
  std::size_t n = 0;
  for (const ParamRef& p : params) n += static_cast<std::size_t>(p.value->size());
  return n;
}

void Adam::step(const ParamList& params, const ParamList& grads, double lr) {
  if (params.size() != grads.size()) throw InvalidArgument("Adam: parameter and gradient lists differ");
  if (m_.empty()) {
    for (const ParamRef& p : params) {
      m_.push_back(Mat::Zero(p.value->rows(), p.value->cols()));
      v_.push_back(Mat::Zero(p.value->rows(), p.value->cols()));
    }
  }
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, t_);
  const double c2 = 1.0 - std::pow(beta2_, t_);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Mat& w = *params[i].value;
    Mat g = *grads[i].value;
    if (weight_decay_ != 0.0) g += weight_decay_ * w;
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g.cwiseAbs2();
    w.array() -= lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps_);
  }
}

}  // namespace supportaff::nn
