#ifndef MIBCI_TRAINING_HPP
#define MIBCI_TRAINING_HPP

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mibci/common.hpp"
#include "mibci/eeg_data.hpp"
#include "mibci/models.hpp"

namespace mibci {

// ----------------------------- configuration -----------------------------

enum class Monitor : uint8_t { validation_loss = 0, train_loss = 1 };

struct TrainConfig {
  int epochs = 100;
  double learning_rate = 0.1;
  double min_lr = 0.001;
  double factor = 0.25;   // LR multiplier on plateau
  int patience = 7;       // epochs without improvement before an LR cut
  int es_patience = 18;   // epochs without improvement before stopping
  int batch_size = 64;
  uint64_t seed = 0;
  double validation_fraction = 0.1;
  Monitor monitor = Monitor::validation_loss;
  double improvement_tol = 1e-8;  // "improved" means below best - tol

  // Adam
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  void validate() const {
    if (epochs < 1) throw ConfigError("train config: epochs must be >= 1");
    if (!(factor > 0.0 && factor < 1.0)) throw ConfigError("train config: factor must be in (0,1)");
    if (min_lr > learning_rate) throw ConfigError("train config: min_lr exceeds learning_rate");
    if (learning_rate <= 0) throw ConfigError("train config: learning_rate must be positive");
    if (patience < 1 || es_patience < 1) throw ConfigError("train config: patience values must be >= 1");
    if (patience > es_patience) throw ConfigError("train config: patience must be <= es_patience");
    if (batch_size < 1) throw ConfigError("train config: batch_size must be >= 1");
    if (!(validation_fraction > 0.0 && validation_fraction < 0.5)) {
      throw ConfigError("train config: validation_fraction must be in (0, 0.5)");
    }
  }

  std::string canonical_string() const {
    std::ostringstream os;
    os << "epochs=" << epochs << ";lr=" << learning_rate << ";min_lr=" << min_lr << ";factor=" << factor
       << ";patience=" << patience << ";es=" << es_patience << ";batch=" << batch_size << ";seed=" << seed
       << ";val=" << validation_fraction << ";monitor=" << (monitor == Monitor::validation_loss ? "val" : "train")
       << ";b1=" << beta1 << ";b2=" << beta2 << ";eps=" << epsilon;
    return os.str();
  }
};

// Table I rows: epochs, dropout (lives in ModelSpec), LR, min LR, factor,
// patience, es_patience.
inline TrainConfig table_train_config(ModelKind kind) {
  TrainConfig c;
  switch (kind) {
    case ModelKind::eegnet:
      c.epochs = 100;
      c.learning_rate = 0.1;
      c.min_lr = 0.001;
      c.factor = 0.25;
      c.patience = 7;
      c.es_patience = 18;
      break;
    case ModelKind::deepconvnet:
      c.epochs = 120;
      c.learning_rate = 0.01;
      c.min_lr = 0.001;
      c.factor = 0.25;
      c.patience = 10;
      c.es_patience = 30;
      break;
    case ModelKind::min2net:
      c.epochs = 200;
      c.learning_rate = 0.01;
      c.min_lr = 0.0006;
      c.factor = 0.5;
      c.patience = 12;
      c.es_patience = 32;
      break;
  }
  return c;
}

// ----------------------------- epoch trace -----------------------------

struct EpochRecord {
  int epoch = 0;  // 1-based
  double train_loss = 0;
  double val_loss = 0;
  double lr = 0;  // LR in effect during this epoch
  bool improved = false;
};

struct EpochTrace {
  std::vector<EpochRecord> records;
  bool stopped_early = false;
  int best_epoch = 0;  // 1-based epoch whose parameters the model carries

  void to_csv(std::ostream& out) const {
    out << "epoch,train_loss,val_loss,lr,improved\n";
    char buf[96];
    for (const auto& r : records) {
      std::snprintf(buf, sizeof buf, "%d,%.10g,%.10g,%.10g,%d\n", r.epoch, r.train_loss, r.val_loss, r.lr,
                    r.improved ? 1 : 0);
      out << buf;
    }
  }
};

// ----------------------------- schedules -----------------------------

// LR in effect after observing `monitored`; a pure replay of the plateau rule,
// so the trajectory is reproducible from the monitored sequence alone.
// A cut fires after `patience` consecutive non-improving epochs and resets the
// counter; cuts clamp at min_lr.
inline double reduce_lr_on_plateau(std::span<const double> monitored, double initial_lr,
                                   const TrainConfig& cfg) {
  double lr = initial_lr;
  double best = std::numeric_limits<double>::infinity();
  int since = 0;
  for (const double v : monitored) {
    if (v < best - cfg.improvement_tol) {
      best = v;
      since = 0;
    } else {
      ++since;
      if (since >= cfg.patience) {
        lr = std::max(lr * cfg.factor, cfg.min_lr);
        since = 0;
      }
    }
  }
  return lr;
}

struct EarlyStopDecision {
  bool stop = false;
  int best_epoch = 0;  // 1-based index of the best monitored value
};

// Stop once es_patience consecutive epochs pass without improvement.
inline EarlyStopDecision early_stop_check(std::span<const double> monitored, const TrainConfig& cfg) {
  EarlyStopDecision d;
  double best = std::numeric_limits<double>::infinity();
  int since = 0;
  for (size_t i = 0; i < monitored.size(); ++i) {
    if (monitored[i] < best - cfg.improvement_tol) {
      best = monitored[i];
      since = 0;
      d.best_epoch = static_cast<int>(i) + 1;
    } else {
      ++since;
    }
    if (since >= cfg.es_patience) {
      d.stop = true;
      return d;
    }
  }
  return d;
}

// ----------------------------- Adam -----------------------------

template <typename T>
struct AdamState {
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  int64_t t = 0;

  static AdamState init(std::span<Param<T>* const> params) {
    AdamState s;
    for (const auto* p : params) {
      s.m.emplace_back(p->tensor.value().size(), T(0));
      s.v.emplace_back(p->tensor.value().size(), T(0));
    }
    return s;
  }
};

// One Adam update with bias correction, then max-norm re-projection of
// constrained parameters. Non-finite gradients abort the fold.
template <typename T>
void adam_step(std::span<Param<T>* const> params, AdamState<T>& state, double lr, const TrainConfig& cfg) {
  if (state.m.size() != params.size()) throw ContractError("adam_step: state does not match parameter list");
  ++state.t;
  const double b1 = cfg.beta1, b2 = cfg.beta2, eps = cfg.epsilon;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
  for (size_t i = 0; i < params.size(); ++i) {
    Param<T>& p = *params[i];
    if (!p.tensor.has_grad()) continue;  // parameter unused by this graph
    const auto& g = p.tensor.grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    auto& w = p.tensor.mutable_value();
    if (m.size() != g.size()) throw ContractError("adam_step: moment shape mismatch for " + p.name);
    for (size_t j = 0; j < g.size(); ++j) {
      const double gj = static_cast<double>(g[j]);
      if (!std::isfinite(gj)) {
        throw TrainingDiverged("non-finite gradient in " + p.name + " at element " + std::to_string(j));
      }
      const double mj = b1 * static_cast<double>(m[j]) + (1.0 - b1) * gj;
      const double vj = b2 * static_cast<double>(v[j]) + (1.0 - b2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double mhat = mj / bc1;
      const double vhat = vj / bc2;
      w[j] = static_cast<T>(static_cast<double>(w[j]) - lr * mhat / (std::sqrt(vhat) + eps));
    }
  }
  for (auto* p : params) apply_max_norm(*p);
}

// ----------------------------- fit -----------------------------

namespace detail {

struct TrialRef {
  const SubjectRecord* rec;
  int64_t trial;
  int label;
  int group;  // subject index, for stratification
};

template <typename T>
Tensor<T> assemble_batch(std::span<const TrialRef> refs, int64_t n_channels, int64_t n_samples) {
  Tensor<T> batch = Tensor<T>::zeros({static_cast<int64_t>(refs.size()), n_channels, n_samples});
  auto& v = batch.mutable_value();
  for (size_t i = 0; i < refs.size(); ++i) {
    const auto tr = refs[i].rec->trial(refs[i].trial);
    T* dst = v.data() + static_cast<int64_t>(i) * n_channels * n_samples;
    for (size_t j = 0; j < tr.size(); ++j) dst[j] = static_cast<T>(tr[j]);
  }
  return batch;
}

// Stratified, seeded split: from every (subject, class) cell take
// floor(fraction * cell size) trials for validation, at least one trial
// overall when the fraction rounds everything down.
inline void split_train_val(std::vector<TrialRef>& all, double fraction, Rng& rng,
                            std::vector<TrialRef>& train, std::vector<TrialRef>& val) {
  std::map<std::pair<int, int>, std::vector<TrialRef>> cells;
  for (const auto& r : all) cells[{r.group, r.label}].push_back(r);
  for (auto& [key, cell] : cells) {
    rng.shuffle(cell.begin(), cell.end());
    const size_t n_val = static_cast<size_t>(std::floor(fraction * static_cast<double>(cell.size())));
    for (size_t i = 0; i < cell.size(); ++i) {
      (i < n_val ? val : train).push_back(cell[i]);
    }
  }
  if (val.empty() && train.size() >= 2) {
    val.push_back(train.back());
    train.pop_back();
  }
}

// Class-stratified batches: per-epoch shuffle within each class, then batches
// draw proportionally from both queues so every batch carries both classes
// while trials remain (the triplet loss needs mixed batches).
inline std::vector<std::vector<TrialRef>> make_batches(std::vector<TrialRef>& train, int batch_size,
                                                       Rng& rng) {
  std::vector<TrialRef> by_class[2];
  for (const auto& r : train) by_class[r.label].push_back(r);
  rng.shuffle(by_class[0].begin(), by_class[0].end());
  rng.shuffle(by_class[1].begin(), by_class[1].end());
  const size_t total = train.size();
  const size_t n_batches = (total + static_cast<size_t>(batch_size) - 1) / static_cast<size_t>(batch_size);
  std::vector<std::vector<TrialRef>> batches(n_batches);
  size_t idx0 = 0, idx1 = 0;
  for (size_t b = 0; b < n_batches; ++b) {
    const size_t want = std::min(static_cast<size_t>(batch_size), total - b * static_cast<size_t>(batch_size));
    // proportional quota for class 0, remainder class 1; clamped to availability
    const size_t rem0 = by_class[0].size() - idx0;
    const size_t rem1 = by_class[1].size() - idx1;
    size_t take0 = std::min(rem0, (want * rem0 + (rem0 + rem1) / 2) / std::max<size_t>(rem0 + rem1, 1));
    size_t take1 = std::min(rem1, want - std::min(want, take0));
    take0 = std::min(rem0, want - take1);
    for (size_t i = 0; i < take0; ++i) batches[b].push_back(by_class[0][idx0++]);
    for (size_t i = 0; i < take1; ++i) batches[b].push_back(by_class[1][idx1++]);
    rng.shuffle(batches[b].begin(), batches[b].end());
  }
  return batches;
}

template <typename T>
struct Snapshot {
  std::vector<std::vector<T>> params;
  std::vector<std::vector<T>> state;

  static Snapshot take(Model<T>& model) {
    Snapshot s;
    for (auto* p : model.parameters()) s.params.push_back(p->tensor.value());
    for (auto* b : model.state_buffers()) s.state.push_back(*b);
    return s;
  }

  void restore(Model<T>& model) const {
    auto ps = model.parameters();
    for (size_t i = 0; i < ps.size(); ++i) ps[i]->tensor.mutable_value() = params[i];
    auto bs = model.state_buffers();
    for (size_t i = 0; i < bs.size(); ++i) *bs[i] = state[i];
  }
};

}  // namespace detail

// Mean model loss over a trial list in inference mode.
template <typename T>
double evaluate_loss(Model<T>& model, std::span<const detail::TrialRef> refs, int batch_size) {
  const auto& spec = model.spec();
  ForwardCtx<T> ctx;  // inference
  double total = 0;
  size_t count = 0;
  for (size_t start = 0; start < refs.size(); start += static_cast<size_t>(batch_size)) {
    const size_t n = std::min(static_cast<size_t>(batch_size), refs.size() - start);
    const std::span<const detail::TrialRef> chunk(refs.data() + start, n);
    Tensor<T> batch = detail::assemble_batch<T>(chunk, spec.n_channels, spec.n_samples);
    std::vector<int> labels;
    labels.reserve(n);
    for (const auto& r : chunk) labels.push_back(r.label);
    auto out = model.forward(batch, ctx);
    auto loss = model.loss(out, labels);
    total += loss.bundle.total * static_cast<double>(n);
    count += n;
  }
  return count ? total / static_cast<double>(count) : 0.0;
}

// Train a model on the given subjects' trials. Carves a stratified validation
// split, iterates seeded minibatches with Adam, applies the plateau LR rule
// and early stopping on the monitored loss, and returns the model restored to
// its best epoch. The dataset itself is never written to.
template <typename T>
EpochTrace fit(Model<T>& model, std::span<const SubjectRecord* const> subjects, const TrainConfig& cfg) {
  cfg.validate();
  const auto& spec = model.spec();
  std::vector<detail::TrialRef> all;
  for (size_t s = 0; s < subjects.size(); ++s) {
    const SubjectRecord* rec = subjects[s];
    if (rec->n_channels != spec.n_channels || rec->n_samples != spec.n_samples) {
      throw DimensionError("fit: subject " + rec->subject_id + " geometry does not match model spec");
    }
    for (int64_t t = 0; t < rec->n_trials; ++t) {
      all.push_back({rec, t, static_cast<int>(rec->labels[static_cast<size_t>(t)]), static_cast<int>(s)});
    }
  }
  if (all.empty()) throw ConfigError("fit: no training trials");
  bool has0 = false, has1 = false;
  for (const auto& r : all) (r.label == 0 ? has0 : has1) = true;
  if (!has0 || !has1) throw ConfigError("fit: training data contains a single class");

  Rng rng(cfg.seed);
  std::vector<detail::TrialRef> train, val;
  detail::split_train_val(all, cfg.validation_fraction, rng, train, val);

  auto params_vec = model.parameters();
  AdamState<T> adam = AdamState<T>::init(params_vec);

  EpochTrace trace;
  std::vector<double> monitored;
  detail::Snapshot<T> best = detail::Snapshot<T>::take(model);
  double best_value = std::numeric_limits<double>::infinity();
  double lr = cfg.learning_rate;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    auto batches = detail::make_batches(train, cfg.batch_size, rng);
    double train_loss_acc = 0;
    size_t train_count = 0;
    for (auto& batch_refs : batches) {
      if (batch_refs.empty()) continue;
      Tensor<T> batch = detail::assemble_batch<T>(batch_refs, spec.n_channels, spec.n_samples);
      std::vector<int> labels;
      labels.reserve(batch_refs.size());
      for (const auto& r : batch_refs) labels.push_back(r.label);
      ForwardCtx<T> ctx{true, &rng};
      auto out = model.forward(batch, ctx);
      auto loss = model.loss(out, labels);
      if (!std::isfinite(loss.bundle.total)) {
        throw TrainingDiverged("non-finite loss at epoch " + std::to_string(epoch));
      }
      for (auto* p : params_vec) p->tensor.zero_grad();
      backward(loss.total);
      adam_step<T>(params_vec, adam, lr, cfg);
      train_loss_acc += loss.bundle.total * static_cast<double>(batch_refs.size());
      train_count += batch_refs.size();
    }
    const double train_loss = train_count ? train_loss_acc / static_cast<double>(train_count) : 0.0;
    const double val_loss = evaluate_loss(model, val, cfg.batch_size);
    const double watched = cfg.monitor == Monitor::validation_loss ? val_loss : train_loss;
    const bool improved = watched < best_value - cfg.improvement_tol;
    if (improved) {
      best_value = watched;
      best = detail::Snapshot<T>::take(model);
      trace.best_epoch = epoch;
    }
    trace.records.push_back({epoch, train_loss, val_loss, lr, improved});
    monitored.push_back(watched);
    lr = reduce_lr_on_plateau(monitored, cfg.learning_rate, cfg);
    const auto es = early_stop_check(monitored, cfg);
    if (es.stop) {
      trace.stopped_early = true;
      break;
    }
  }
  best.restore(model);
  return trace;
}

}  // namespace mibci

#endif  // MIBCI_TRAINING_HPP
