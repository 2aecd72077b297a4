#ifndef MIBCI_REPORT_HPP
#define MIBCI_REPORT_HPP

#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "mibci/common.hpp"
#include "mibci/eeg_data.hpp"
#include "mibci/models.hpp"
#include "mibci/training.hpp"
#include "mibci/transfer_eval.hpp"

namespace mibci {

// ----------------------------- run configuration -----------------------------

struct RunConfig {
  std::string command;  // synth | train | loso | stats | report
  std::optional<ModelKind> model;
  std::string data_dir;
  std::string out_dir;
  uint64_t seed = 0;
  int jobs = 1;
  Precision precision = Precision::single32;
  std::optional<bool> standardize;  // default per model: on for min2net only
  double threshold = 0.70;

  // training overrides (unset fields keep the per-model built-in defaults)
  std::optional<int> epochs, patience, es_patience, batch_size;
  std::optional<double> lr, min_lr, factor, dropout, validation_fraction;
  std::optional<Monitor> monitor;

  // architecture overrides
  std::optional<int> latent_dim, pool1, pool2, temporal_len;
  std::optional<double> triplet_margin, w_ce, w_mse, w_triplet;

  // synth settings
  std::optional<int> subjects, trials, channels, samples;
  std::optional<double> rate, erd_depth, noise_scale;
  std::optional<std::string> export_csv_path;

  std::optional<std::string> holdout;  // train: subject excluded and tested
  std::vector<std::string> inputs;     // stats/report: fold CSVs or loso dirs

  ModelSpec effective_spec() const;
  TrainConfig effective_train() const;
  SynthConfig effective_synth() const;
  bool effective_standardize() const;
};

// argv without the program name; precedence CLI flag > config-file line >
// built-in default. Unknown keys are rejected.
RunConfig parse_config(const std::vector<std::string>& args);

// executes a parsed command; returns 0 on success, 1 if any fold failed
int dispatch(const RunConfig& cfg, std::ostream& out);

// parse + dispatch with the exit-code contract: 0 success, 1 failed fold,
// 2 usage/config/data errors
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// ----------------------------- report bundle -----------------------------

struct ModelReport {
  std::string model_name;
  std::string config_hash;  // "unknown" when not recoverable from inputs
  EvalSummary summary;
};

struct ReportBundle {
  std::vector<ModelReport> models;
  std::vector<std::string> files_written;
};

std::string summary_to_json(const ModelReport& report);
ModelReport summary_from_json(const std::string& json_text);

std::string histogram_svg(const ModelReport& report);
std::string distribution_svg(const std::vector<ModelReport>& reports);

// Writes, per model, summary_<name>.json, histogram_<name>.svg and
// folds_<name>.csv, plus a cross-model distribution.svg with the 70% line.
ReportBundle emit_report(const std::vector<std::pair<std::string, std::vector<FoldResult>>>& per_model,
                         const std::vector<std::string>& config_hashes, double threshold,
                         const std::string& out_dir);

}  // namespace mibci

#endif  // MIBCI_REPORT_HPP
