#ifndef MIBCI_EEG_DATA_HPP
#define MIBCI_EEG_DATA_HPP

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mibci/common.hpp"

namespace mibci {

// Epoched motor-imagery EEG: per-subject trials of (channels x samples)
// float32 values with binary labels (0 = left hand, 1 = right hand).
//
// On-disk layout ("MIEP" v1, little-endian), one file per subject named
// <subject_id>.miep:
//   magic "MIEP" | u16 version=1 | u32 n_trials | u16 n_channels |
//   u32 n_samples | f32 sample_rate | n_trials label bytes |
//   trial-major / channel-major float32 samples
// An optional montage.txt sidecar in the dataset directory lists one channel
// name per line; without it a 16-channel dataset gets the standard
// sensorimotor montage.

struct SubjectRecord {
  std::string subject_id;
  int64_t n_trials = 0;
  int64_t n_channels = 0;
  int64_t n_samples = 0;
  std::vector<uint8_t> labels;  // n_trials entries of {0,1}
  std::vector<float> samples;   // n_trials * n_channels * n_samples

  std::span<const float> trial(int64_t t) const {
    return {samples.data() + t * n_channels * n_samples, static_cast<size_t>(n_channels * n_samples)};
  }
  std::span<float> mutable_trial(int64_t t) {
    return {samples.data() + t * n_channels * n_samples, static_cast<size_t>(n_channels * n_samples)};
  }
  void validate() const;
};

struct EpochedDataset {
  std::vector<SubjectRecord> subjects;  // sorted by subject_id
  std::vector<std::string> montage;     // ordered channel names
  float sample_rate_hz = 0;

  int64_t n_channels() const { return subjects.empty() ? 0 : subjects.front().n_channels; }
  int64_t n_samples() const { return subjects.empty() ? 0 : subjects.front().n_samples; }
  int64_t total_trials() const;
  const SubjectRecord* find(const std::string& id) const;
  void validate() const;
};

const std::vector<std::string>& default_montage_16();

EpochedDataset load_dataset(const std::string& dir);
void save_dataset(const EpochedDataset& ds, const std::string& dir);

// inspection export: one row per (trial, channel); columns
// subject,trial,label,channel followed by the samples
void export_csv(const EpochedDataset& ds, const std::string& path);

// ----------------------------- synthetic generator -----------------------------

// Pink-noise background on every channel plus a 10 Hz mu rhythm on C3/C4.
// After the cue, the mu amplitude on the hemisphere contralateral to the
// labeled hand drops by erd_depth. Per-subject random gains model
// inter-subject variability. Deterministic for a fixed seed.
struct SynthConfig {
  int n_subjects = 8;
  int trials_per_subject = 120;
  int n_channels = 16;
  int n_samples = 2000;  // 8 s at 250 Hz (3 s fixation + 1.25 s cue + 3.75 s feedback)
  float sample_rate = 250.0f;
  double erd_depth = 0.5;  // in [0,1]
  double noise_scale = 1.0;
  uint64_t seed = 0;
  std::vector<std::string> montage;  // empty: standard 16-channel montage

  void validate() const;
};

EpochedDataset synthesize_dataset(const SynthConfig& cfg);

// fraction of the trial before the cue; the post-cue window carries the ERD
inline constexpr double kCueOnsetFraction = 3.0 / 8.0;

// ----------------------------- standardization -----------------------------

struct ChannelStats {
  std::vector<float> mean;
  std::vector<float> stddev;  // floored at 1e-8
};

// statistics from training subjects only; the held-out record never enters
ChannelStats compute_channel_stats(std::span<const SubjectRecord* const> train_subjects);
SubjectRecord standardized(const SubjectRecord& rec, const ChannelStats& stats);

}  // namespace mibci

#endif  // MIBCI_EEG_DATA_HPP
