#ifndef MIBCI_LAYERS_HPP
#define MIBCI_LAYERS_HPP

#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mibci/common.hpp"
#include "mibci/tensor.hpp"

namespace mibci {

// ----------------------------- constrained parameters -----------------------------

// How a max-norm cap groups a parameter tensor:
//  per_row_block  - one norm per leading-dim slice (depthwise filters)
//  per_column     - one norm per trailing-dim column (dense output units)
enum class NormGroup { per_row_block, per_column };

struct MaxNormConstraint {
  double cap = 1.0;
  NormGroup group = NormGroup::per_row_block;
};

template <typename T>
struct Param {
  std::string name;
  Tensor<T> tensor;
  std::optional<MaxNormConstraint> max_norm;
};

// Rescale any over-cap group to exactly the cap. Applied after optimizer steps.
template <typename T>
void apply_max_norm(Param<T>& p) {
  if (!p.max_norm) return;
  const double cap = p.max_norm->cap;
  auto& v = p.tensor.mutable_value();
  const auto& shape = p.tensor.shape();
  if (p.max_norm->group == NormGroup::per_row_block) {
    const int64_t rows = shape[0];
    const int64_t block = p.tensor.size() / rows;
    for (int64_t r = 0; r < rows; ++r) {
      double ss = 0;
      for (int64_t i = 0; i < block; ++i) ss += static_cast<double>(v[r * block + i]) * v[r * block + i];
      const double nrm = std::sqrt(ss);
      if (nrm > cap) {
        const T s = static_cast<T>(cap / nrm);
        for (int64_t i = 0; i < block; ++i) v[r * block + i] *= s;
      }
    }
  } else {
    const int64_t cols = shape.back();
    const int64_t rows = p.tensor.size() / cols;
    for (int64_t c = 0; c < cols; ++c) {
      double ss = 0;
      for (int64_t r = 0; r < rows; ++r) ss += static_cast<double>(v[r * cols + c]) * v[r * cols + c];
      const double nrm = std::sqrt(ss);
      if (nrm > cap) {
        const T s = static_cast<T>(cap / nrm);
        for (int64_t r = 0; r < rows; ++r) v[r * cols + c] *= s;
      }
    }
  }
}

// largest group norm, for constraint property checks
template <typename T>
double max_group_norm(const Param<T>& p) {
  if (!p.max_norm) return 0.0;
  const auto& v = p.tensor.value();
  const auto& shape = p.tensor.shape();
  double worst = 0;
  if (p.max_norm->group == NormGroup::per_row_block) {
    const int64_t rows = shape[0];
    const int64_t block = p.tensor.size() / rows;
    for (int64_t r = 0; r < rows; ++r) {
      double ss = 0;
      for (int64_t i = 0; i < block; ++i) ss += static_cast<double>(v[r * block + i]) * v[r * block + i];
      worst = std::max(worst, std::sqrt(ss));
    }
  } else {
    const int64_t cols = shape.back();
    const int64_t rows = p.tensor.size() / cols;
    for (int64_t c = 0; c < cols; ++c) {
      double ss = 0;
      for (int64_t r = 0; r < rows; ++r) ss += static_cast<double>(v[r * cols + c]) * v[r * cols + c];
      worst = std::max(worst, std::sqrt(ss));
    }
  }
  return worst;
}

// ----------------------------- initialization -----------------------------

// Glorot-uniform from the kernel layout: conv [Co,Ci,kh,kw] uses
// fan_in = Ci*kh*kw, fan_out = Co*kh*kw; dense [In,Out] uses In/Out.
template <typename T>
void glorot_uniform_init(Tensor<T>& t, Rng& rng) {
  const auto& s = t.shape();
  double fan_in = 1, fan_out = 1;
  if (s.size() == 4) {
    fan_in = static_cast<double>(s[1] * s[2] * s[3]);
    fan_out = static_cast<double>(s[0] * s[2] * s[3]);
  } else if (s.size() == 2) {
    fan_in = static_cast<double>(s[0]);
    fan_out = static_cast<double>(s[1]);
  } else {
    fan_in = fan_out = static_cast<double>(t.size());
  }
  const double limit = std::sqrt(6.0 / (fan_in + fan_out));
  for (auto& v : t.mutable_value()) v = static_cast<T>(rng.uniform(-limit, limit));
}

// ----------------------------- forward context -----------------------------

template <typename T>
struct ForwardCtx {
  bool train = false;
  Rng* rng = nullptr;  // required when train and any dropout layer exists
};

// ----------------------------- layers -----------------------------

template <typename T>
struct Conv2dLayer {
  Param<T> kernel;
  std::optional<Param<T>> bias;
  std::pair<int, int> stride{1, 1};
  Pad2d pad;  // applied before the valid convolution

  Conv2dLayer(std::string name, int64_t co, int64_t ci, int64_t kh, int64_t kw, bool with_bias, Pad2d p,
              std::pair<int, int> s, Rng& rng) {
    kernel.name = name + ".kernel";
    kernel.tensor = Tensor<T>::zeros({co, ci, kh, kw}, true);
    glorot_uniform_init(kernel.tensor, rng);
    stride = s;
    pad = p;
    if (with_bias) {
      bias.emplace();
      bias->name = name + ".bias";
      bias->tensor = Tensor<T>::zeros({co}, true);
    }
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    Tensor<T> in = (pad.top || pad.bottom || pad.left || pad.right) ? pad2d(x, pad) : x;
    Tensor<T> out = conv2d(in, kernel.tensor, stride, {0, 0});
    if (bias) out = add_channel_bias(out, bias->tensor);
    return out;
  }
};

template <typename T>
struct DepthwiseConv2dLayer {
  Param<T> kernel;  // [C*D, 1, kh, kw]
  int depth = 1;
  Pad2d pad;

  DepthwiseConv2dLayer(std::string name, int64_t channels, int depth_multiplier, int64_t kh, int64_t kw,
                       std::optional<MaxNormConstraint> constraint, Pad2d p, Rng& rng) {
    depth = depth_multiplier;
    pad = p;
    kernel.name = name + ".kernel";
    kernel.tensor = Tensor<T>::zeros({channels * depth_multiplier, 1, kh, kw}, true);
    glorot_uniform_init(kernel.tensor, rng);
    kernel.max_norm = constraint;
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    Tensor<T> in = (pad.top || pad.bottom || pad.left || pad.right) ? pad2d(x, pad) : x;
    return depthwise_conv2d(in, kernel.tensor, depth);
  }
};

template <typename T>
struct BatchNormLayer {
  Param<T> gamma;
  Param<T> beta;
  std::vector<T> running_mean;
  std::vector<T> running_var;
  double momentum = 0.99;
  double epsilon = 1e-5;

  BatchNormLayer(std::string name, int64_t channels, double mom = 0.99, double eps = 1e-5) {
    gamma.name = name + ".gamma";
    gamma.tensor = Tensor<T>::full({channels}, T(1), true);
    beta.name = name + ".beta";
    beta.tensor = Tensor<T>::zeros({channels}, true);
    running_mean.assign(static_cast<size_t>(channels), T(0));
    running_var.assign(static_cast<size_t>(channels), T(1));
    momentum = mom;
    epsilon = eps;
  }

  Tensor<T> forward(const Tensor<T>& x, bool train) {
    return batch_norm(x, gamma.tensor, beta.tensor, running_mean, running_var,
                      train ? BatchNormMode::train : BatchNormMode::infer, momentum, epsilon);
  }
};

template <typename T>
struct DenseLayer {
  Param<T> kernel;  // [In, Out]
  Param<T> bias;    // [Out]

  DenseLayer(std::string name, int64_t in, int64_t out, std::optional<MaxNormConstraint> constraint,
             Rng& rng) {
    kernel.name = name + ".kernel";
    kernel.tensor = Tensor<T>::zeros({in, out}, true);
    glorot_uniform_init(kernel.tensor, rng);
    kernel.max_norm = constraint;
    bias.name = name + ".bias";
    bias.tensor = Tensor<T>::zeros({out}, true);
  }

  Tensor<T> forward(const Tensor<T>& x) const { return add_row_bias(matmul(x, kernel.tensor), bias.tensor); }
};

template <typename T>
struct DropoutLayer {
  double rate = 0.0;

  Tensor<T> forward(const Tensor<T>& x, const ForwardCtx<T>& ctx) const {
    if (!ctx.train || rate == 0.0) return x;
    if (!ctx.rng) throw ContractError("dropout: train-mode forward needs an rng");
    return dropout(x, rate, *ctx.rng);
  }
};

}  // namespace mibci

#endif  // MIBCI_LAYERS_HPP
