#ifndef MIBCI_TRANSFER_EVAL_HPP
#define MIBCI_TRANSFER_EVAL_HPP

#include <array>
#include <atomic>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "mibci/common.hpp"
#include "mibci/eeg_data.hpp"
#include "mibci/models.hpp"
#include "mibci/training.hpp"

namespace mibci {

// ----------------------------- protocol types -----------------------------

struct FoldPlan {
  std::string held_out;
  std::vector<std::string> train;
};

// one fold per subject, deterministic (sorted) order
std::vector<FoldPlan> loso_split(std::vector<std::string> subject_ids);

struct FoldResult {
  std::string subject_id;
  int64_t n_test = 0;
  int64_t n_correct = 0;
  double accuracy = 0.0;
  int epochs_run = 0;
  bool stopped_early = false;
  bool failed = false;
  std::string error;
};

struct EvalSummary {
  std::vector<double> accuracies;  // subject order
  double median = 0;
  double max = 0;
  int count_at_threshold = 0;  // accuracy >= threshold, inclusive
  double threshold = 0.70;
  std::array<int, 10> histogram{};  // percent bins [0,10) ... [90,100]
};

// median is the lower-middle element for even n
EvalSummary summarize(std::span<const FoldResult> results, double threshold = 0.70);

// ----------------------------- persistence -----------------------------

// per-fold CSV: subject_id,n_test,n_correct,accuracy,epochs_run,stopped_early
void write_fold_csv(const std::string& path, const FoldResult& r);
std::optional<FoldResult> read_fold_csv(const std::string& path);
void write_folds_csv(const std::string& path, std::span<const FoldResult> results);
std::vector<FoldResult> read_folds_csv(const std::string& path);
void write_text_atomic(const std::string& path, const std::string& content);

struct LosoOptions {
  ModelSpec spec;          // geometry fields are overwritten from the dataset
  TrainConfig train;
  bool standardize = false;
  std::string out_dir;
  int jobs = 1;
  Precision precision = Precision::single32;
};

std::string loso_config_hash(const LosoOptions& opt);

// Writes out_dir/manifest.json on first use; a rerun against a different
// config hash refuses instead of mixing results.
void write_or_check_manifest(const LosoOptions& opt, const std::string& config_hash);

// ----------------------------- evaluation -----------------------------

// Frozen-model accuracy on one held-out subject. Argmax per trial with ties
// broken toward the lower class index.
template <typename T>
FoldResult evaluate_fold(Model<T>& model, const SubjectRecord& held_out) {
  const auto& spec = model.spec();
  if (held_out.n_channels != spec.n_channels || held_out.n_samples != spec.n_samples) {
    throw DimensionError("evaluate_fold: subject " + held_out.subject_id + " geometry " +
                         std::to_string(held_out.n_channels) + "x" + std::to_string(held_out.n_samples) +
                         " does not match model " + std::to_string(spec.n_channels) + "x" +
                         std::to_string(spec.n_samples));
  }
  FoldResult r;
  r.subject_id = held_out.subject_id;
  r.n_test = held_out.n_trials;
  ForwardCtx<T> ctx;  // inference
  const int64_t batch_size = 64;
  for (int64_t start = 0; start < held_out.n_trials; start += batch_size) {
    const int64_t n = std::min(batch_size, held_out.n_trials - start);
    Tensor<T> batch = Tensor<T>::zeros({n, spec.n_channels, spec.n_samples});
    auto& bv = batch.mutable_value();
    for (int64_t i = 0; i < n; ++i) {
      const auto tr = held_out.trial(start + i);
      for (size_t j = 0; j < tr.size(); ++j) bv[static_cast<size_t>(i * spec.n_channels * spec.n_samples) + j] = static_cast<T>(tr[j]);
    }
    auto out = model.forward(batch, ctx);
    const auto& probs = out.probs.value();
    const int64_t k = out.probs.dim(1);
    for (int64_t i = 0; i < n; ++i) {
      int best = 0;
      for (int64_t c = 1; c < k; ++c) {
        if (probs[static_cast<size_t>(i * k + c)] > probs[static_cast<size_t>(i * k + best)]) {
          best = static_cast<int>(c);
        }
      }
      if (best == held_out.labels[static_cast<size_t>(start + i)]) ++r.n_correct;
    }
  }
  r.accuracy = static_cast<double>(r.n_correct) / static_cast<double>(r.n_test);
  return r;
}

// ----------------------------- LOSO campaign -----------------------------

namespace detail {

template <typename T>
FoldResult run_one_fold(const EpochedDataset& ds, const FoldPlan& plan, const LosoOptions& opt) {
  std::vector<const SubjectRecord*> train_ptrs;
  const SubjectRecord* held = ds.find(plan.held_out);
  for (const auto& id : plan.train) train_ptrs.push_back(ds.find(id));

  std::vector<SubjectRecord> owned;  // standardized copies when enabled
  SubjectRecord held_std;
  if (opt.standardize) {
    const ChannelStats stats = compute_channel_stats(train_ptrs);
    owned.reserve(train_ptrs.size());
    for (const auto* rec : train_ptrs) owned.push_back(standardized(*rec, stats));
    train_ptrs.clear();
    for (const auto& rec : owned) train_ptrs.push_back(&rec);
    held_std = standardized(*held, stats);
    held = &held_std;
  }

  TrainConfig cfg = opt.train;
  cfg.seed = derive_seed(opt.train.seed, "fold:" + plan.held_out);
  auto model = build_model<T>(opt.spec, derive_seed(opt.train.seed, "init:" + plan.held_out));
  EpochTrace trace = fit(*model, train_ptrs, cfg);
  FoldResult r = evaluate_fold(*model, *held);
  r.epochs_run = static_cast<int>(trace.records.size());
  r.stopped_early = trace.stopped_early;

  if (!opt.out_dir.empty()) {
    std::ostringstream tr;
    trace.to_csv(tr);
    write_text_atomic(opt.out_dir + "/trace_" + plan.held_out + ".csv", tr.str());
  }
  return r;
}

}  // namespace detail

// Leave-one-subject-out campaign: per-fold train + evaluate with incremental,
// crash-resumable persistence. Completed folds (matching manifest hash) are
// skipped on rerun. A diverged fold is recorded as failed and the remaining
// folds still run.
template <typename T>
std::vector<FoldResult> run_loso(const EpochedDataset& ds, const LosoOptions& options) {
  ds.validate();
  LosoOptions opt = options;
  opt.spec.n_channels = static_cast<int>(ds.n_channels());
  opt.spec.n_samples = static_cast<int>(ds.n_samples());
  opt.spec.validate();
  opt.train.validate();

  std::vector<std::string> ids;
  for (const auto& s : ds.subjects) ids.push_back(s.subject_id);
  const auto plans = loso_split(ids);

  const std::string hash = loso_config_hash(opt);
  if (!opt.out_dir.empty()) {
    std::filesystem::create_directories(opt.out_dir);
    write_or_check_manifest(opt, hash);
  }

  std::vector<FoldResult> results(plans.size());
  std::atomic<size_t> next{0};
  std::exception_ptr first_error;
  std::mutex error_mu;

  auto worker = [&]() {
    for (;;) {
      const size_t i = next.fetch_add(1);
      if (i >= plans.size()) return;
      const auto& plan = plans[i];
      const std::string fold_path = opt.out_dir.empty() ? "" : opt.out_dir + "/fold_" + plan.held_out + ".csv";
      try {
        if (!fold_path.empty()) {
          if (auto existing = read_fold_csv(fold_path)) {
            results[i] = *existing;
            continue;
          }
        }
        results[i] = detail::run_one_fold<T>(ds, plan, opt);
        if (!fold_path.empty()) write_fold_csv(fold_path, results[i]);
      } catch (const TrainingDiverged& e) {
        results[i].subject_id = plan.held_out;
        results[i].failed = true;
        results[i].error = e.what();
        if (!opt.out_dir.empty()) {
          write_text_atomic(opt.out_dir + "/fold_" + plan.held_out + ".failed",
                            std::string("training aborted: ") + e.what() + "\n");
        }
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mu);
        if (!first_error) first_error = std::current_exception();
        return;
      }
    }
  };

  const int jobs = std::max(1, opt.jobs);
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (first_error) std::rethrow_exception(first_error);

  if (!opt.out_dir.empty()) {
    std::vector<FoldResult> ok;
    for (const auto& r : results) {
      if (!r.failed) ok.push_back(r);
    }
    write_folds_csv(opt.out_dir + "/folds.csv", ok);
  }
  return results;
}

}  // namespace mibci

#endif  // MIBCI_TRANSFER_EVAL_HPP
