#ifndef MIBCI_MODELS_HPP
#define MIBCI_MODELS_HPP

#include <array>
#include <cmath>
#include <fstream>
#include <memory>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mibci/binary_io.hpp"
#include "mibci/common.hpp"
#include "mibci/layers.hpp"
#include "mibci/tensor.hpp"

namespace mibci {

// ----------------------------- model spec -----------------------------

enum class ModelKind : uint8_t { eegnet = 0, deepconvnet = 1, min2net = 2 };

inline std::string model_kind_name(ModelKind k) {
  switch (k) {
    case ModelKind::eegnet: return "eegnet";
    case ModelKind::deepconvnet: return "deepconvnet";
    case ModelKind::min2net: return "min2net";
  }
  return "?";
}

inline ModelKind model_kind_from_name(std::string_view s) {
  if (s == "eegnet") return ModelKind::eegnet;
  if (s == "deepconvnet") return ModelKind::deepconvnet;
  if (s == "min2net") return ModelKind::min2net;
  throw ConfigError("unknown model kind \"" + std::string(s) + "\" (eegnet|deepconvnet|min2net)");
}

struct ModelSpec {
  ModelKind kind = ModelKind::eegnet;
  int n_channels = 16;
  int n_samples = 2000;
  int n_classes = 2;
  double dropout_rate = 0.0;

  // eegnet knobs
  int eegnet_f1 = 8;
  int eegnet_depth = 2;
  int eegnet_f2 = 16;
  int eegnet_temporal_len = 125;  // round(sample_rate/2) at 250 Hz
  int eegnet_pool1 = 4;
  int eegnet_pool2 = 8;
  int eegnet_sep_len = 16;
  double eegnet_depthwise_cap = 1.0;
  double eegnet_dense_cap = 0.25;

  // deepconvnet knobs
  std::array<int, 5> deep_filters{25, 25, 50, 100, 200};
  int deep_kernel_len = 10;
  int deep_pool = 3;

  // min2net knobs (encoder filter count defaults to n_channels via <=0)
  int latent_dim = 64;
  int min2net_f1 = 0;
  int min2net_f2 = 10;
  int min2net_kernel1 = 64;
  int min2net_kernel2 = 32;
  int min2net_pool1 = 10;
  int min2net_pool2 = 10;
  double triplet_margin = 1.0;
  double weight_ce = 1.0;
  double weight_mse = 1.0;
  double weight_triplet = 1.0;

  int min2net_encoder_filters() const { return min2net_f1 > 0 ? min2net_f1 : n_channels; }

  void validate() const {
    if (n_channels < 1) throw SpecError("model spec: n_channels must be >= 1");
    if (n_classes < 2) throw SpecError("model spec: n_classes must be >= 2");
    if (dropout_rate < 0.0 || dropout_rate >= 1.0) throw SpecError("model spec: dropout_rate out of [0,1)");
    if (n_samples < 1) throw SpecError("model spec: n_samples must be >= 1");
    switch (kind) {
      case ModelKind::eegnet:
        if (n_samples < eegnet_temporal_len) {
          throw SpecError("eegnet: n_samples " + std::to_string(n_samples) +
                          " shorter than temporal kernel " + std::to_string(eegnet_temporal_len));
        }
        if (eegnet_f1 < 1 || eegnet_depth < 1 || eegnet_f2 < 1) throw SpecError("eegnet: filter counts must be >= 1");
        break;
      case ModelKind::deepconvnet:
        if (deep_kernel_len < 1 || deep_pool < 1) throw SpecError("deepconvnet: kernel/pool must be >= 1");
        break;
      case ModelKind::min2net: {
        if (latent_dim < 1) throw SpecError("min2net: latent_dim must be >= 1");
        if (min2net_pool1 < 1 || min2net_pool2 < 1) throw SpecError("min2net: pool sizes must be >= 1");
        if (n_samples % (min2net_pool1 * min2net_pool2) != 0) {
          throw SpecError("min2net: n_samples " + std::to_string(n_samples) + " not divisible by pool1*pool2 = " +
                          std::to_string(min2net_pool1 * min2net_pool2) +
                          " (exact reconstruction shape required)");
        }
        if (n_samples < min2net_kernel1) {
          throw SpecError("min2net: n_samples shorter than temporal kernel " + std::to_string(min2net_kernel1));
        }
        break;
      }
    }
  }

  // canonical serialization: feeds config hashing and checkpoint headers
  std::string canonical_string() const {
    std::ostringstream os;
    os << "kind=" << model_kind_name(kind) << ";ch=" << n_channels << ";samp=" << n_samples
       << ";cls=" << n_classes << ";drop=" << dropout_rate << ";f1=" << eegnet_f1 << ";d=" << eegnet_depth
       << ";f2=" << eegnet_f2 << ";lt=" << eegnet_temporal_len << ";p1=" << eegnet_pool1
       << ";p2=" << eegnet_pool2 << ";sep=" << eegnet_sep_len << ";dwcap=" << eegnet_depthwise_cap
       << ";dcap=" << eegnet_dense_cap << ";df=" << deep_filters[0] << "," << deep_filters[1] << ","
       << deep_filters[2] << "," << deep_filters[3] << "," << deep_filters[4] << ";dk=" << deep_kernel_len
       << ";dp=" << deep_pool << ";lat=" << latent_dim << ";mf1=" << min2net_f1 << ";mf2=" << min2net_f2
       << ";mk1=" << min2net_kernel1 << ";mk2=" << min2net_kernel2 << ";mp1=" << min2net_pool1
       << ";mp2=" << min2net_pool2 << ";margin=" << triplet_margin << ";w=" << weight_ce << ","
       << weight_mse << "," << weight_triplet;
    return os.str();
  }
};

// Table I dropout per model; MIN2Net has no dropout hyperparameter.
inline ModelSpec default_model_spec(ModelKind kind, int n_channels = 16, int n_samples = 2000,
                                    int n_classes = 2) {
  ModelSpec s;
  s.kind = kind;
  s.n_channels = n_channels;
  s.n_samples = n_samples;
  s.n_classes = n_classes;
  switch (kind) {
    case ModelKind::eegnet: s.dropout_rate = 0.4; break;
    case ModelKind::deepconvnet: s.dropout_rate = 0.5; break;
    case ModelKind::min2net: s.dropout_rate = 0.0; break;
  }
  return s;
}

// ----------------------------- losses -----------------------------

// -mean_n log(probs[n, label_n]) with a 1e-12 probability floor.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& probs, std::span<const int> labels) {
  if (probs.rank() != 2) throw DimensionError("cross_entropy: probs must be [N,K]");
  const int64_t n = probs.dim(0), k = probs.dim(1);
  if (static_cast<int64_t>(labels.size()) != n) {
    throw ContractError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                        std::to_string(n));
  }
  for (const int lb : labels) {
    if (lb < 0 || lb >= k) throw ContractError("cross_entropy: label " + std::to_string(lb) + " out of range");
  }
  constexpr double kFloor = 1e-12;
  auto node = detail::new_node<T>({1});
  const T* p = probs.value().data();
  double acc = 0;
  for (int64_t i = 0; i < n; ++i) {
    acc -= std::log(std::max(static_cast<double>(p[i * k + labels[static_cast<size_t>(i)]]), kFloor));
  }
  node->value[0] = static_cast<T>(acc / static_cast<double>(n));
  if (probs.requires_grad()) {
    node->requires_grad = true;
    node->parents = {probs.node()};
    std::vector<int> lab(labels.begin(), labels.end());
    node->backprop = [n, k, lab = std::move(lab)](TensorNode<T>& self) {
      auto& pp = *self.parents[0];
      detail::ensure_grad(pp);
      const T g = self.grad[0];
      for (int64_t i = 0; i < n; ++i) {
        const int64_t idx = i * k + lab[static_cast<size_t>(i)];
        const double pv = static_cast<double>(pp.value[idx]);
        if (pv < kFloor) continue;  // clamped region: flat
        pp.grad[idx] -= static_cast<T>(static_cast<double>(g) / (static_cast<double>(n) * pv));
      }
    };
  }
  return wrap_node(std::move(node));
}

struct TripletInfo {
  int64_t n_triplets = 0;
  bool single_class = false;  // flagged warning, not an exception
};

namespace detail {

struct TripletIdx {
  int64_t a, p, n;
};

// Mining rule shared by the op and its test oracle: (a,p,n) with a != p,
// label(a) == label(p), label(n) != label(a), and semi-hard band
// d(a,p) <= d(a,n) < d(a,p) + margin. Euclidean distances.
inline bool triplet_selected(double d_ap, double d_an, double margin) {
  return d_ap <= d_an && d_an < d_ap + margin;
}

}  // namespace detail

// Mean over selected semi-hard triplets of max(0, d(a,p) - d(a,n) + margin).
// A batch with no selected triplet contributes 0.
template <typename T>
Tensor<T> triplet_loss(const Tensor<T>& latent, std::span<const int> labels, double margin,
                       TripletInfo* info = nullptr) {
  if (latent.rank() != 2) throw DimensionError("triplet_loss: latent must be [N,dz]");
  const int64_t n = latent.dim(0), dz = latent.dim(1);
  if (static_cast<int64_t>(labels.size()) != n) throw ContractError("triplet_loss: label count mismatch");
  if (margin < 0) throw ConfigError("triplet_loss: negative margin");

  bool multiple_classes = false;
  for (size_t i = 1; i < labels.size(); ++i) {
    if (labels[i] != labels[0]) {
      multiple_classes = true;
      break;
    }
  }
  if (info) {
    info->single_class = !multiple_classes;
    info->n_triplets = 0;
  }

  auto node = detail::new_node<T>({1});
  if (!multiple_classes || n < 3) {
    // no (anchor, positive, negative) exists; constant zero, no gradient path
    return wrap_node(std::move(node));
  }

  const T* z = latent.value().data();
  auto dist = [&](int64_t i, int64_t j) {
    double ss = 0;
    for (int64_t d = 0; d < dz; ++d) {
      const double diff = static_cast<double>(z[i * dz + d]) - static_cast<double>(z[j * dz + d]);
      ss += diff * diff;
    }
    return std::sqrt(ss);
  };

  std::vector<detail::TripletIdx> picked;
  double total = 0;
  for (int64_t a = 0; a < n; ++a) {
    for (int64_t p = 0; p < n; ++p) {
      if (a == p || labels[static_cast<size_t>(a)] != labels[static_cast<size_t>(p)]) continue;
      const double d_ap = dist(a, p);
      for (int64_t neg = 0; neg < n; ++neg) {
        if (labels[static_cast<size_t>(neg)] == labels[static_cast<size_t>(a)]) continue;
        const double d_an = dist(a, neg);
        if (!detail::triplet_selected(d_ap, d_an, margin)) continue;
        picked.push_back({a, p, neg});
        total += std::max(0.0, d_ap - d_an + margin);
      }
    }
  }
  if (picked.empty()) {
    return wrap_node(std::move(node));
  }
  if (info) info->n_triplets = static_cast<int64_t>(picked.size());
  node->value[0] = static_cast<T>(total / static_cast<double>(picked.size()));

  if (latent.requires_grad()) {
    node->requires_grad = true;
    node->parents = {latent.node()};
    node->backprop = [n, dz, margin, picked = std::move(picked)](TensorNode<T>& self) {
      (void)n;
      auto& pz = *self.parents[0];
      detail::ensure_grad(pz);
      const double g = static_cast<double>(self.grad[0]) / static_cast<double>(picked.size());
      auto add_pair = [&](int64_t i, int64_t j, double coef) {
        // coef * d/dz_i ||z_i - z_j||; zero-distance pairs get a zero subgradient
        double ss = 0;
        for (int64_t d = 0; d < dz; ++d) {
          const double diff = static_cast<double>(pz.value[i * dz + d]) - static_cast<double>(pz.value[j * dz + d]);
          ss += diff * diff;
        }
        const double dist = std::sqrt(ss);
        if (dist <= 0) return;
        for (int64_t d = 0; d < dz; ++d) {
          const double diff = static_cast<double>(pz.value[i * dz + d]) - static_cast<double>(pz.value[j * dz + d]);
          const double dv = coef * diff / dist;
          pz.grad[i * dz + d] += static_cast<T>(dv);
          pz.grad[j * dz + d] -= static_cast<T>(dv);
        }
      };
      for (const auto& t : picked) {
        // loss term = d(a,p) - d(a,n) + margin (positive inside the band)
        add_pair(t.a, t.p, g);
        add_pair(t.a, t.n, -g);
      }
    };
  }
  return wrap_node(std::move(node));
}

struct LossBundle {
  double classification = 0;
  double reconstruction = 0;
  double metric = 0;
  double weight_ce = 1;
  double weight_mse = 0;
  double weight_triplet = 0;
  double total = 0;
  bool triplet_single_class = false;
};

template <typename T>
struct LossResult {
  Tensor<T> total;
  LossBundle bundle;
};

// beta_mse*MSE + beta_triplet*triplet + beta_ce*CE over already-computed
// component scalars.
template <typename T>
Tensor<T> multitask_loss(const Tensor<T>& ce, const Tensor<T>& mse, const Tensor<T>& triplet, double w_ce,
                         double w_mse, double w_triplet) {
  if (w_ce < 0 || w_mse < 0 || w_triplet < 0) throw ConfigError("multitask_loss: negative weight");
  return add(add(scale(mse, static_cast<T>(w_mse)), scale(triplet, static_cast<T>(w_triplet))),
             scale(ce, static_cast<T>(w_ce)));
}

// ----------------------------- model interface -----------------------------

template <typename T>
struct ModelOutput {
  Tensor<T> probs;           // [N, K], rows on the simplex
  Tensor<T> latent;          // min2net only
  Tensor<T> reconstruction;  // min2net only
  Tensor<T> input;           // graph input the batch was loaded into
};

template <typename T>
class Model {
 public:
  explicit Model(ModelSpec spec) : spec_(std::move(spec)) {}
  virtual ~Model() = default;

  // batch is [N, n_channels, n_samples]
  virtual ModelOutput<T> forward(const Tensor<T>& batch, const ForwardCtx<T>& ctx) = 0;
  virtual std::vector<Param<T>*> parameters() = 0;
  // non-trainable state (batch-norm running stats)
  virtual std::vector<std::vector<T>*> state_buffers() = 0;

  virtual LossResult<T> loss(const ModelOutput<T>& out, std::span<const int> labels) {
    Tensor<T> ce = cross_entropy(out.probs, labels);
    LossBundle b;
    b.classification = static_cast<double>(ce.item());
    b.weight_ce = 1;
    b.total = b.classification;
    return {ce, b};
  }

  const ModelSpec& spec() const { return spec_; }

  int64_t parameter_count() {
    int64_t n = 0;
    for (auto* p : parameters()) n += p->tensor.size();
    return n;
  }

  void check_batch(const Tensor<T>& batch) const {
    if (batch.rank() != 3 || batch.dim(1) != spec_.n_channels || batch.dim(2) != spec_.n_samples) {
      throw DimensionError("model expects batches of [N," + std::to_string(spec_.n_channels) + "," +
                           std::to_string(spec_.n_samples) + "], got " + shape_str(batch.shape()));
    }
  }

 protected:
  ModelSpec spec_;
};

namespace detail {

// TF-style "same" padding for a width-k kernel at stride 1: total k-1,
// extra tap on the right when k is even.
inline Pad2d same_pad_w(int k) {
  Pad2d p;
  p.left = (k - 1) / 2;
  p.right = (k - 1) - p.left;
  return p;
}

}  // namespace detail

// ----------------------------- EEGNet -----------------------------

template <typename T>
class EegNetModel final : public Model<T> {
 public:
  EegNetModel(const ModelSpec& spec, uint64_t seed)
      : Model<T>(spec),
        rng_(seed),
        temporal_("temporal", spec.eegnet_f1, 1, 1, spec.eegnet_temporal_len, /*bias=*/false,
                  detail::same_pad_w(spec.eegnet_temporal_len), {1, 1}, rng_),
        bn1_("bn1", spec.eegnet_f1),
        spatial_("spatial", spec.eegnet_f1, spec.eegnet_depth, spec.n_channels, 1,
                 MaxNormConstraint{spec.eegnet_depthwise_cap, NormGroup::per_row_block}, Pad2d{}, rng_),
        bn2_("bn2", spec.eegnet_f1 * spec.eegnet_depth),
        sep_depth_("sep_depth", spec.eegnet_f1 * spec.eegnet_depth, 1, 1, spec.eegnet_sep_len, std::nullopt,
                   detail::same_pad_w(spec.eegnet_sep_len), rng_),
        sep_point_("sep_point", spec.eegnet_f2, spec.eegnet_f1 * spec.eegnet_depth, 1, 1, /*bias=*/false,
                   Pad2d{}, {1, 1}, rng_),
        bn3_("bn3", spec.eegnet_f2),
        drop_{spec.dropout_rate},
        t_pool1_(spec.n_samples / spec.eegnet_pool1),
        t_pool2_(t_pool1_ / spec.eegnet_pool2),
        head_("head", static_cast<int64_t>(spec.eegnet_f2) * t_pool2_, spec.n_classes,
              MaxNormConstraint{spec.eegnet_dense_cap, NormGroup::per_column}, rng_) {
    if (t_pool1_ < 1 || t_pool2_ < 1) throw SpecError("eegnet: n_samples too short for pooling ladder");
  }

  ModelOutput<T> forward(const Tensor<T>& batch, const ForwardCtx<T>& ctx) override {
    this->check_batch(batch);
    const auto& sp = this->spec_;
    Tensor<T> x = reshape(batch, {batch.dim(0), 1, sp.n_channels, sp.n_samples});
    Tensor<T> h = temporal_.forward(x);
    h = bn1_.forward(h, ctx.train);
    h = spatial_.forward(h);  // collapses the channel axis
    h = bn2_.forward(h, ctx.train);
    h = activation(h, Activation::elu);
    h = pool2d(h, PoolKind::average, {1, sp.eegnet_pool1}, {1, sp.eegnet_pool1});
    h = drop_.forward(h, ctx);
    h = sep_depth_.forward(h);
    h = sep_point_.forward(h);
    h = bn3_.forward(h, ctx.train);
    h = activation(h, Activation::elu);
    h = pool2d(h, PoolKind::average, {1, sp.eegnet_pool2}, {1, sp.eegnet_pool2});
    h = drop_.forward(h, ctx);
    h = flatten(h);
    h = head_.forward(h);
    ModelOutput<T> out;
    out.probs = softmax(h, 1);
    out.input = x;
    return out;
  }

  std::vector<Param<T>*> parameters() override {
    std::vector<Param<T>*> ps{&temporal_.kernel, &bn1_.gamma, &bn1_.beta, &spatial_.kernel,
                              &bn2_.gamma,       &bn2_.beta,  &sep_depth_.kernel, &sep_point_.kernel,
                              &bn3_.gamma,       &bn3_.beta,  &head_.kernel, &head_.bias};
    return ps;
  }

  std::vector<std::vector<T>*> state_buffers() override {
    return {&bn1_.running_mean, &bn1_.running_var, &bn2_.running_mean,
            &bn2_.running_var,  &bn3_.running_mean, &bn3_.running_var};
  }

 private:
  Rng rng_;
  Conv2dLayer<T> temporal_;
  BatchNormLayer<T> bn1_;
  DepthwiseConv2dLayer<T> spatial_;
  BatchNormLayer<T> bn2_;
  DepthwiseConv2dLayer<T> sep_depth_;
  Conv2dLayer<T> sep_point_;
  BatchNormLayer<T> bn3_;
  DropoutLayer<T> drop_;
  int64_t t_pool1_;
  int64_t t_pool2_;
  DenseLayer<T> head_;
};

// ----------------------------- DeepConvNet -----------------------------

template <typename T>
class DeepConvNetModel final : public Model<T> {
 public:
  DeepConvNetModel(const ModelSpec& spec, uint64_t seed) : Model<T>(spec), rng_(seed), drop_{spec.dropout_rate} {
    const int k = spec.deep_kernel_len;
    const int pool = spec.deep_pool;
    int64_t t = spec.n_samples;
    auto conv_extent = [&](int64_t in, int kernel, const char* where) {
      const int64_t out = in - kernel + 1;
      if (out < 1) {
        throw SpecError(std::string("deepconvnet: temporal extent exhausted at ") + where + " (have " +
                        std::to_string(in) + ", kernel " + std::to_string(kernel) + ")");
      }
      return out;
    };
    auto pool_extent = [&](int64_t in, const char* where) {
      if (pool > in) {
        throw SpecError(std::string("deepconvnet: temporal extent exhausted at ") + where + " (have " +
                        std::to_string(in) + ", pool " + std::to_string(pool) + ")");
      }
      return (in - pool) / pool + 1;
    };

    t = conv_extent(t, k, "block1 conv");
    convs_.emplace_back("block1.temporal", spec.deep_filters[0], 1, 1, k, /*bias=*/true, Pad2d{},
                        std::pair<int, int>{1, 1}, rng_);
    spatial_.emplace("block1.spatial", spec.deep_filters[1], spec.deep_filters[0], spec.n_channels, 1,
                     /*bias=*/true, Pad2d{}, std::pair<int, int>{1, 1}, rng_);
    bns_.emplace_back("block1.bn", spec.deep_filters[1]);
    t = pool_extent(t, "block1 pool");

    for (int b = 2; b <= 4; ++b) {
      const std::string tag = "block" + std::to_string(b);
      t = conv_extent(t, k, (tag + " conv").c_str());
      convs_.emplace_back(tag + ".conv", spec.deep_filters[static_cast<size_t>(b)],
                          spec.deep_filters[static_cast<size_t>(b - 1)], 1, k, /*bias=*/true, Pad2d{},
                          std::pair<int, int>{1, 1}, rng_);
      bns_.emplace_back(tag + ".bn", spec.deep_filters[static_cast<size_t>(b)]);
      t = pool_extent(t, (tag + " pool").c_str());
    }
    final_t_ = t;
    head_.emplace("head", static_cast<int64_t>(spec.deep_filters[4]) * final_t_, spec.n_classes, std::nullopt,
                  rng_);
  }

  ModelOutput<T> forward(const Tensor<T>& batch, const ForwardCtx<T>& ctx) override {
    this->check_batch(batch);
    const auto& sp = this->spec_;
    const int pool = sp.deep_pool;
    Tensor<T> x = reshape(batch, {batch.dim(0), 1, sp.n_channels, sp.n_samples});
    Tensor<T> h = convs_[0].forward(x);
    h = spatial_->forward(h);
    h = bns_[0].forward(h, ctx.train);
    h = activation(h, Activation::elu);
    h = pool2d(h, PoolKind::max, {1, pool}, {1, pool});
    for (size_t b = 1; b < convs_.size(); ++b) {
      h = drop_.forward(h, ctx);
      h = convs_[b].forward(h);
      h = bns_[b].forward(h, ctx.train);
      h = activation(h, Activation::elu);
      h = pool2d(h, PoolKind::max, {1, pool}, {1, pool});
    }
    h = drop_.forward(h, ctx);
    h = flatten(h);
    h = head_->forward(h);
    ModelOutput<T> out;
    out.probs = softmax(h, 1);
    out.input = x;
    return out;
  }

  std::vector<Param<T>*> parameters() override {
    std::vector<Param<T>*> ps;
    auto push_conv = [&](Conv2dLayer<T>& c) {
      ps.push_back(&c.kernel);
      if (c.bias) ps.push_back(&*c.bias);
    };
    push_conv(convs_[0]);
    push_conv(*spatial_);
    ps.push_back(&bns_[0].gamma);
    ps.push_back(&bns_[0].beta);
    for (size_t b = 1; b < convs_.size(); ++b) {
      push_conv(convs_[b]);
      ps.push_back(&bns_[b].gamma);
      ps.push_back(&bns_[b].beta);
    }
    ps.push_back(&head_->kernel);
    ps.push_back(&head_->bias);
    return ps;
  }

  std::vector<std::vector<T>*> state_buffers() override {
    std::vector<std::vector<T>*> bs;
    for (auto& bn : bns_) {
      bs.push_back(&bn.running_mean);
      bs.push_back(&bn.running_var);
    }
    return bs;
  }

 private:
  Rng rng_;
  std::vector<Conv2dLayer<T>> convs_;  // block1 temporal + blocks 2-4
  std::optional<Conv2dLayer<T>> spatial_;
  std::vector<BatchNormLayer<T>> bns_;
  DropoutLayer<T> drop_;
  int64_t final_t_ = 0;
  std::optional<DenseLayer<T>> head_;
};

// ----------------------------- MIN2Net -----------------------------

// Autoencoder over [N, C, 1, S] with EEG channels as feature maps, a latent
// bottleneck feeding both the classifier head and the metric loss, and a
// mirrored upsample+conv decoder reproducing the input shape exactly.
template <typename T>
class Min2NetModel final : public Model<T> {
 public:
  Min2NetModel(const ModelSpec& spec, uint64_t seed)
      : Model<T>(spec),
        rng_(seed),
        f1_(spec.min2net_encoder_filters()),
        t1_(spec.n_samples / spec.min2net_pool1),
        t2_(t1_ / spec.min2net_pool2),
        enc_conv1_("enc.conv1", f1_, spec.n_channels, 1, spec.min2net_kernel1, /*bias=*/true,
                   detail::same_pad_w(spec.min2net_kernel1), std::pair<int, int>{1, 1}, rng_),
        enc_conv2_("enc.conv2", spec.min2net_f2, f1_, 1, spec.min2net_kernel2, /*bias=*/true,
                   detail::same_pad_w(spec.min2net_kernel2), std::pair<int, int>{1, 1}, rng_),
        enc_dense_("enc.dense", static_cast<int64_t>(spec.min2net_f2) * t2_, spec.latent_dim, std::nullopt,
                   rng_),
        dec_dense_("dec.dense", spec.latent_dim, static_cast<int64_t>(spec.min2net_f2) * t2_, std::nullopt,
                   rng_),
        dec_conv1_("dec.conv1", f1_, spec.min2net_f2, 1, spec.min2net_kernel2, /*bias=*/true,
                   detail::same_pad_w(spec.min2net_kernel2), std::pair<int, int>{1, 1}, rng_),
        dec_conv2_("dec.conv2", spec.n_channels, f1_, 1, spec.min2net_kernel1, /*bias=*/true,
                   detail::same_pad_w(spec.min2net_kernel1), std::pair<int, int>{1, 1}, rng_),
        head_("head", spec.latent_dim, spec.n_classes, std::nullopt, rng_) {
    if (t2_ < 1) throw SpecError("min2net: n_samples too short for pooling ladder");
  }

  ModelOutput<T> forward(const Tensor<T>& batch, const ForwardCtx<T>& ctx) override {
    (void)ctx;  // no dropout in this architecture
    this->check_batch(batch);
    const auto& sp = this->spec_;
    Tensor<T> x = reshape(batch, {batch.dim(0), sp.n_channels, 1, sp.n_samples});
    // encoder
    Tensor<T> h = activation(enc_conv1_.forward(x), Activation::elu);
    h = pool2d(h, PoolKind::average, {1, sp.min2net_pool1}, {1, sp.min2net_pool1});
    h = activation(enc_conv2_.forward(h), Activation::elu);
    h = pool2d(h, PoolKind::average, {1, sp.min2net_pool2}, {1, sp.min2net_pool2});
    Tensor<T> z = enc_dense_.forward(flatten(h));
    // decoder
    Tensor<T> d = activation(dec_dense_.forward(z), Activation::elu);
    d = reshape(d, {batch.dim(0), sp.min2net_f2, 1, t2_});
    d = upsample2d(d, {1, sp.min2net_pool2});
    d = activation(dec_conv1_.forward(d), Activation::elu);
    d = upsample2d(d, {1, sp.min2net_pool1});
    d = dec_conv2_.forward(d);  // linear output stage
    ModelOutput<T> out;
    out.probs = softmax(head_.forward(z), 1);
    out.latent = z;
    out.reconstruction = d;
    out.input = x;
    return out;
  }

  LossResult<T> loss(const ModelOutput<T>& out, std::span<const int> labels) override {
    const auto& sp = this->spec_;
    Tensor<T> ce = cross_entropy(out.probs, labels);
    Tensor<T> rec = mse_loss(out.reconstruction, out.input);
    TripletInfo tinfo;
    Tensor<T> tri = triplet_loss(out.latent, labels, sp.triplet_margin, &tinfo);
    Tensor<T> total = multitask_loss(ce, rec, tri, sp.weight_ce, sp.weight_mse, sp.weight_triplet);
    LossBundle b;
    b.classification = static_cast<double>(ce.item());
    b.reconstruction = static_cast<double>(rec.item());
    b.metric = static_cast<double>(tri.item());
    b.weight_ce = sp.weight_ce;
    b.weight_mse = sp.weight_mse;
    b.weight_triplet = sp.weight_triplet;
    b.total = static_cast<double>(total.item());
    b.triplet_single_class = tinfo.single_class;
    return {total, b};
  }

  std::vector<Param<T>*> parameters() override {
    std::vector<Param<T>*> ps;
    auto push_conv = [&](Conv2dLayer<T>& c) {
      ps.push_back(&c.kernel);
      if (c.bias) ps.push_back(&*c.bias);
    };
    push_conv(enc_conv1_);
    push_conv(enc_conv2_);
    ps.push_back(&enc_dense_.kernel);
    ps.push_back(&enc_dense_.bias);
    ps.push_back(&dec_dense_.kernel);
    ps.push_back(&dec_dense_.bias);
    push_conv(dec_conv1_);
    push_conv(dec_conv2_);
    ps.push_back(&head_.kernel);
    ps.push_back(&head_.bias);
    return ps;
  }

  std::vector<std::vector<T>*> state_buffers() override { return {}; }

 private:
  Rng rng_;
  int f1_;
  int64_t t1_;
  int64_t t2_;
  Conv2dLayer<T> enc_conv1_;
  Conv2dLayer<T> enc_conv2_;
  DenseLayer<T> enc_dense_;
  DenseLayer<T> dec_dense_;
  Conv2dLayer<T> dec_conv1_;
  Conv2dLayer<T> dec_conv2_;
  DenseLayer<T> head_;
};

// ----------------------------- builders -----------------------------

template <typename T>
std::unique_ptr<Model<T>> build_eegnet(const ModelSpec& spec, uint64_t seed) {
  if (spec.kind != ModelKind::eegnet) throw SpecError("build_eegnet: spec.kind is not eegnet");
  spec.validate();
  return std::make_unique<EegNetModel<T>>(spec, seed);
}

template <typename T>
std::unique_ptr<Model<T>> build_deepconvnet(const ModelSpec& spec, uint64_t seed) {
  if (spec.kind != ModelKind::deepconvnet) throw SpecError("build_deepconvnet: spec.kind is not deepconvnet");
  spec.validate();
  return std::make_unique<DeepConvNetModel<T>>(spec, seed);
}

template <typename T>
std::unique_ptr<Model<T>> build_min2net(const ModelSpec& spec, uint64_t seed) {
  if (spec.kind != ModelKind::min2net) throw SpecError("build_min2net: spec.kind is not min2net");
  spec.validate();
  return std::make_unique<Min2NetModel<T>>(spec, seed);
}

template <typename T>
std::unique_ptr<Model<T>> build_model(const ModelSpec& spec, uint64_t seed) {
  switch (spec.kind) {
    case ModelKind::eegnet: return build_eegnet<T>(spec, seed);
    case ModelKind::deepconvnet: return build_deepconvnet<T>(spec, seed);
    case ModelKind::min2net: return build_min2net<T>(spec, seed);
  }
  throw SpecError("build_model: unknown kind");
}

// ----------------------------- checkpoints -----------------------------

// "MICP" v1: header (kind, precision, spec knobs) + flat parameter payload in
// declaration order + batch-norm running stats.
namespace detail {

inline constexpr char kCheckpointMagic[4] = {'M', 'I', 'C', 'P'};
inline constexpr uint16_t kCheckpointVersion = 1;

inline void write_spec(BinaryWriter& w, const ModelSpec& s) {
  auto wi = [&](int v) { w.write<int32_t>(v); };
  auto wd = [&](double v) { w.write<double>(v); };
  wi(s.n_channels);
  wi(s.n_samples);
  wi(s.n_classes);
  wd(s.dropout_rate);
  wi(s.eegnet_f1);
  wi(s.eegnet_depth);
  wi(s.eegnet_f2);
  wi(s.eegnet_temporal_len);
  wi(s.eegnet_pool1);
  wi(s.eegnet_pool2);
  wi(s.eegnet_sep_len);
  wd(s.eegnet_depthwise_cap);
  wd(s.eegnet_dense_cap);
  for (const int f : s.deep_filters) wi(f);
  wi(s.deep_kernel_len);
  wi(s.deep_pool);
  wi(s.latent_dim);
  wi(s.min2net_f1);
  wi(s.min2net_f2);
  wi(s.min2net_kernel1);
  wi(s.min2net_kernel2);
  wi(s.min2net_pool1);
  wi(s.min2net_pool2);
  wd(s.triplet_margin);
  wd(s.weight_ce);
  wd(s.weight_mse);
  wd(s.weight_triplet);
}

inline ModelSpec read_spec(BinaryReader& r, ModelKind kind) {
  ModelSpec s;
  s.kind = kind;
  auto ri = [&](const char* what) { return static_cast<int>(r.read<int32_t>(what)); };
  auto rd = [&](const char* what) { return r.read<double>(what); };
  s.n_channels = ri("n_channels");
  s.n_samples = ri("n_samples");
  s.n_classes = ri("n_classes");
  s.dropout_rate = rd("dropout_rate");
  s.eegnet_f1 = ri("eegnet_f1");
  s.eegnet_depth = ri("eegnet_depth");
  s.eegnet_f2 = ri("eegnet_f2");
  s.eegnet_temporal_len = ri("eegnet_temporal_len");
  s.eegnet_pool1 = ri("eegnet_pool1");
  s.eegnet_pool2 = ri("eegnet_pool2");
  s.eegnet_sep_len = ri("eegnet_sep_len");
  s.eegnet_depthwise_cap = rd("eegnet_depthwise_cap");
  s.eegnet_dense_cap = rd("eegnet_dense_cap");
  for (auto& f : s.deep_filters) f = ri("deep_filters");
  s.deep_kernel_len = ri("deep_kernel_len");
  s.deep_pool = ri("deep_pool");
  s.latent_dim = ri("latent_dim");
  s.min2net_f1 = ri("min2net_f1");
  s.min2net_f2 = ri("min2net_f2");
  s.min2net_kernel1 = ri("min2net_kernel1");
  s.min2net_kernel2 = ri("min2net_kernel2");
  s.min2net_pool1 = ri("min2net_pool1");
  s.min2net_pool2 = ri("min2net_pool2");
  s.triplet_margin = rd("triplet_margin");
  s.weight_ce = rd("weight_ce");
  s.weight_mse = rd("weight_mse");
  s.weight_triplet = rd("weight_triplet");
  return s;
}

}  // namespace detail

template <typename T>
void save_checkpoint(Model<T>& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path);
  BinaryWriter w(out);
  w.write_bytes(detail::kCheckpointMagic, 4);
  w.write<uint16_t>(detail::kCheckpointVersion);
  w.write<uint8_t>(static_cast<uint8_t>(model.spec().kind));
  w.write<uint8_t>(static_cast<uint8_t>(sizeof(T) == 4 ? Precision::single32 : Precision::double64));
  detail::write_spec(w, model.spec());
  const auto params = model.parameters();
  w.write<uint32_t>(static_cast<uint32_t>(params.size()));
  for (auto* p : params) {
    w.write<uint64_t>(static_cast<uint64_t>(p->tensor.size()));
    w.write_bytes(p->tensor.value().data(), p->tensor.value().size() * sizeof(T));
  }
  const auto state = model.state_buffers();
  w.write<uint32_t>(static_cast<uint32_t>(state.size()));
  for (auto* s : state) {
    w.write<uint64_t>(static_cast<uint64_t>(s->size()));
    w.write_bytes(s->data(), s->size() * sizeof(T));
  }
  if (!out) throw IoError("short write on checkpoint: " + path);
}

template <typename T>
std::unique_ptr<Model<T>> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint for reading: " + path);
  BinaryReader r(in, path);
  r.expect_magic(detail::kCheckpointMagic, "checkpoint");
  const auto version = r.read<uint16_t>("version");
  if (version != detail::kCheckpointVersion) {
    throw FormatError(path + ": unsupported checkpoint version " + std::to_string(version));
  }
  const auto kind = static_cast<ModelKind>(r.read<uint8_t>("kind"));
  const auto precision = static_cast<Precision>(r.read<uint8_t>("precision"));
  const Precision want = sizeof(T) == 4 ? Precision::single32 : Precision::double64;
  if (precision != want) {
    throw FormatError(path + ": checkpoint precision is " + std::string(precision_name(precision)) +
                      ", loader instantiated for " + std::string(precision_name(want)));
  }
  ModelSpec spec = detail::read_spec(r, kind);
  auto model = build_model<T>(spec, /*seed=*/0);
  const auto n_params = r.read<uint32_t>("param count");
  auto params = model->parameters();
  if (n_params != params.size()) {
    throw FormatError(path + ": checkpoint has " + std::to_string(n_params) + " parameters, model defines " +
                      std::to_string(params.size()));
  }
  for (auto* p : params) {
    const auto count = r.read<uint64_t>("param extent");
    if (count != static_cast<uint64_t>(p->tensor.size())) {
      throw FormatError(path + ": parameter " + p->name + " has " + std::to_string(count) +
                        " values, expected " + std::to_string(p->tensor.size()) + " at offset " +
                        std::to_string(r.offset()));
    }
    r.read_bytes(p->tensor.mutable_value().data(), count * sizeof(T), p->name.c_str());
  }
  const auto n_state = r.read<uint32_t>("state count");
  auto state = model->state_buffers();
  if (n_state != state.size()) {
    throw FormatError(path + ": checkpoint has " + std::to_string(n_state) + " state buffers, model defines " +
                      std::to_string(state.size()));
  }
  for (auto* s : state) {
    const auto count = r.read<uint64_t>("state extent");
    if (count != s->size()) {
      throw FormatError(path + ": state buffer size mismatch at offset " + std::to_string(r.offset()));
    }
    r.read_bytes(s->data(), count * sizeof(T), "state buffer");
  }
  r.expect_eof("checkpoint");
  return model;
}

}  // namespace mibci

#endif  // MIBCI_MODELS_HPP
