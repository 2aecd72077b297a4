#include "mibci/eeg_data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "mibci/binary_io.hpp"

namespace fs = std::filesystem;

namespace mibci {

namespace {

constexpr char kMagic[4] = {'M', 'I', 'E', 'P'};
constexpr uint16_t kVersion = 1;

}  // namespace

void SubjectRecord::validate() const {
  if (subject_id.empty()) throw FormatError("subject record without id");
  if (n_trials != static_cast<int64_t>(labels.size())) {
    throw FormatError(subject_id + ": n_trials " + std::to_string(n_trials) + " != label count " +
                      std::to_string(labels.size()));
  }
  if (static_cast<int64_t>(samples.size()) != n_trials * n_channels * n_samples) {
    throw FormatError(subject_id + ": sample payload size mismatch");
  }
  for (const uint8_t l : labels) {
    if (l > 1) throw FormatError(subject_id + ": label " + std::to_string(l) + " outside {0,1}");
  }
}

int64_t EpochedDataset::total_trials() const {
  int64_t n = 0;
  for (const auto& s : subjects) n += s.n_trials;
  return n;
}

const SubjectRecord* EpochedDataset::find(const std::string& id) const {
  for (const auto& s : subjects) {
    if (s.subject_id == id) return &s;
  }
  return nullptr;
}

void EpochedDataset::validate() const {
  if (sample_rate_hz <= 0) throw FormatError("dataset: sample rate must be positive");
  if (subjects.empty()) return;
  const int64_t ch = subjects.front().n_channels;
  const int64_t sp = subjects.front().n_samples;
  for (const auto& s : subjects) {
    s.validate();
    if (s.n_channels != ch || s.n_samples != sp) {
      throw FormatError("dataset: subject " + s.subject_id + " geometry " + std::to_string(s.n_channels) +
                        "x" + std::to_string(s.n_samples) + " differs from " + std::to_string(ch) + "x" +
                        std::to_string(sp));
    }
  }
  if (!montage.empty() && static_cast<int64_t>(montage.size()) != ch) {
    throw FormatError("dataset: montage has " + std::to_string(montage.size()) + " names for " +
                      std::to_string(ch) + " channels");
  }
}

const std::vector<std::string>& default_montage_16() {
  static const std::vector<std::string> names = {"F3", "Fz",  "F4",  "FC1", "FC5", "FC2", "FC6", "C3",
                                                 "Cz", "C4",  "CP1", "CP5", "CP2", "CP6", "T7",  "T8"};
  return names;
}

// ----------------------------- load / save -----------------------------

namespace {

SubjectRecord read_subject_file(const fs::path& path, float* rate_out) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  BinaryReader r(in, path.string());
  SubjectRecord rec;
  rec.subject_id = path.stem().string();
  r.expect_magic(kMagic, "MIEP header");
  const uint16_t version = r.read<uint16_t>("version");
  if (version != kVersion) {
    throw FormatError(path.string() + ": unsupported MIEP version " + std::to_string(version) +
                      " at offset 4");
  }
  rec.n_trials = r.read<uint32_t>("n_trials");
  rec.n_channels = r.read<uint16_t>("n_channels");
  rec.n_samples = r.read<uint32_t>("n_samples");
  const float rate = r.read<float>("sample_rate");
  if (rate <= 0) throw FormatError(path.string() + ": non-positive sample rate at offset 12");
  if (rec.n_trials < 1 || rec.n_channels < 1 || rec.n_samples < 1) {
    throw FormatError(path.string() + ": degenerate geometry in header");
  }
  rec.labels.resize(static_cast<size_t>(rec.n_trials));
  r.read_bytes(rec.labels.data(), rec.labels.size(), "labels");
  for (size_t i = 0; i < rec.labels.size(); ++i) {
    if (rec.labels[i] > 1) {
      throw FormatError(path.string() + ": label " + std::to_string(rec.labels[i]) + " outside {0,1} at offset " +
                        std::to_string(16 + i));
    }
  }
  rec.samples.resize(static_cast<size_t>(rec.n_trials * rec.n_channels * rec.n_samples));
  r.read_bytes(rec.samples.data(), rec.samples.size() * sizeof(float), "samples");
  r.expect_eof("MIEP payload");
  rec.validate();
  *rate_out = rate;
  return rec;
}

}  // namespace

EpochedDataset load_dataset(const std::string& dir) {
  const fs::path root(dir);
  if (!fs::is_directory(root)) throw IoError("dataset directory not found: " + dir);
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(root)) {
    if (e.is_regular_file() && e.path().extension() == ".miep") files.push_back(e.path());
  }
  if (files.empty()) throw FormatError("no .miep files in " + dir);
  std::sort(files.begin(), files.end());

  EpochedDataset ds;
  for (const auto& f : files) {
    float rate = 0;
    ds.subjects.push_back(read_subject_file(f, &rate));
    if (ds.sample_rate_hz == 0) {
      ds.sample_rate_hz = rate;
    } else if (ds.sample_rate_hz != rate) {
      throw FormatError(f.string() + ": sample rate " + std::to_string(rate) +
                        " differs from dataset rate " + std::to_string(ds.sample_rate_hz));
    }
  }
  std::sort(ds.subjects.begin(), ds.subjects.end(),
            [](const SubjectRecord& a, const SubjectRecord& b) { return a.subject_id < b.subject_id; });

  const fs::path montage_file = root / "montage.txt";
  if (fs::exists(montage_file)) {
    std::ifstream min(montage_file);
    std::string line;
    while (std::getline(min, line)) {
      while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
      if (!line.empty()) ds.montage.push_back(line);
    }
  } else if (ds.n_channels() == 16) {
    ds.montage = default_montage_16();
  }
  ds.validate();
  return ds;
}

void save_dataset(const EpochedDataset& ds, const std::string& dir) {
  if (ds.subjects.empty()) throw IoError("save_dataset: nothing to write (empty subject list)");
  ds.validate();
  const fs::path root(dir);
  std::error_code ec;
  fs::create_directories(root, ec);
  if (!fs::is_directory(root)) throw IoError("cannot create dataset directory: " + dir);
  for (const auto& rec : ds.subjects) {
    const fs::path path = root / (rec.subject_id + ".miep");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    BinaryWriter w(out);
    w.write_bytes(kMagic, 4);
    w.write<uint16_t>(kVersion);
    w.write<uint32_t>(static_cast<uint32_t>(rec.n_trials));
    w.write<uint16_t>(static_cast<uint16_t>(rec.n_channels));
    w.write<uint32_t>(static_cast<uint32_t>(rec.n_samples));
    w.write<float>(ds.sample_rate_hz);
    w.write_bytes(rec.labels.data(), rec.labels.size());
    w.write_bytes(rec.samples.data(), rec.samples.size() * sizeof(float));
    if (!out) throw IoError("short write on " + path.string());
  }
  if (!ds.montage.empty()) {
    std::ofstream mo(root / "montage.txt");
    for (const auto& name : ds.montage) mo << name << "\n";
  }
}

void export_csv(const EpochedDataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << "subject,trial,label,channel";
  for (int64_t s = 0; s < ds.n_samples(); ++s) out << ",s" << s;
  out << "\n";
  char buf[32];
  for (const auto& rec : ds.subjects) {
    for (int64_t t = 0; t < rec.n_trials; ++t) {
      for (int64_t c = 0; c < rec.n_channels; ++c) {
        out << rec.subject_id << "," << t << "," << static_cast<int>(rec.labels[static_cast<size_t>(t)]) << ","
            << (static_cast<size_t>(c) < ds.montage.size() ? ds.montage[static_cast<size_t>(c)]
                                                           : "ch" + std::to_string(c));
        const float* row = rec.samples.data() + (t * rec.n_channels + c) * rec.n_samples;
        for (int64_t s = 0; s < rec.n_samples; ++s) {
          std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(row[s]));
          out << ',' << buf;
        }
        out << "\n";
      }
    }
  }
}

// ----------------------------- synthesis -----------------------------

void SynthConfig::validate() const {
  if (n_subjects < 1) throw ConfigError("synth: n_subjects must be >= 1");
  if (trials_per_subject < 1) throw ConfigError("synth: trials_per_subject must be >= 1");
  if (n_channels < 1 || n_samples < 2) throw ConfigError("synth: degenerate geometry");
  if (sample_rate <= 0) throw ConfigError("synth: sample rate must be positive");
  if (erd_depth < 0.0 || erd_depth > 1.0) throw ConfigError("synth: erd_depth out of [0,1]");
  if (noise_scale < 0.0) throw ConfigError("synth: negative noise_scale");
}

namespace {

// Paul Kellet's economy pink-noise filter over white Gaussian input.
class PinkNoise {
 public:
  explicit PinkNoise(Rng& rng) : rng_(rng) {}
  double next() {
    const double white = rng_.normal();
    b0_ = 0.99765 * b0_ + white * 0.0990460;
    b1_ = 0.96300 * b1_ + white * 0.2965164;
    b2_ = 0.57000 * b2_ + white * 1.0526913;
    return (b0_ + b1_ + b2_ + white * 0.1848) * 0.25;
  }

 private:
  Rng& rng_;
  double b0_ = 0, b1_ = 0, b2_ = 0;
};

}  // namespace

EpochedDataset synthesize_dataset(const SynthConfig& cfg) {
  cfg.validate();
  EpochedDataset ds;
  ds.sample_rate_hz = cfg.sample_rate;
  if (!cfg.montage.empty()) {
    ds.montage = cfg.montage;
  } else if (cfg.n_channels == 16) {
    ds.montage = default_montage_16();
  } else {
    throw ConfigError("synth: montage required for " + std::to_string(cfg.n_channels) +
                      " channels (must name C3 and C4)");
  }
  if (static_cast<int>(ds.montage.size()) != cfg.n_channels) {
    throw ConfigError("synth: montage size does not match n_channels");
  }
  const auto c3_it = std::find(ds.montage.begin(), ds.montage.end(), "C3");
  const auto c4_it = std::find(ds.montage.begin(), ds.montage.end(), "C4");
  if (c3_it == ds.montage.end() || c4_it == ds.montage.end()) {
    throw ConfigError("synth: montage lacks C3/C4 positions");
  }
  const int64_t c3 = c3_it - ds.montage.begin();
  const int64_t c4 = c4_it - ds.montage.begin();

  const int64_t cue_start = static_cast<int64_t>(std::floor(kCueOnsetFraction * cfg.n_samples));
  const double mu_freq = 10.0;
  const double base_mu_amp = 2.0;

  for (int s = 0; s < cfg.n_subjects; ++s) {
    char idbuf[16];
    std::snprintf(idbuf, sizeof idbuf, "S%02d", s + 1);
    SubjectRecord rec;
    rec.subject_id = idbuf;
    rec.n_trials = cfg.trials_per_subject;
    rec.n_channels = cfg.n_channels;
    rec.n_samples = cfg.n_samples;
    rec.labels.resize(static_cast<size_t>(rec.n_trials));
    rec.samples.assign(static_cast<size_t>(rec.n_trials * rec.n_channels * rec.n_samples), 0.0f);

    Rng rng(derive_seed(cfg.seed, rec.subject_id));
    // inter-subject variability: per-channel gains and overall mu strength
    std::vector<double> gain(static_cast<size_t>(cfg.n_channels));
    for (auto& g : gain) g = rng.uniform(0.7, 1.3);
    const double subject_mu = base_mu_amp * rng.uniform(0.8, 1.2);

    // balanced labels, order shuffled per subject
    for (int64_t t = 0; t < rec.n_trials; ++t) rec.labels[static_cast<size_t>(t)] = t % 2 == 0 ? 0 : 1;
    rng.shuffle(rec.labels.begin(), rec.labels.end());

    for (int64_t t = 0; t < rec.n_trials; ++t) {
      const uint8_t label = rec.labels[static_cast<size_t>(t)];
      float* trial = rec.samples.data() + t * rec.n_channels * rec.n_samples;
      for (int64_t c = 0; c < rec.n_channels; ++c) {
        PinkNoise pink(rng);
        float* row = trial + c * rec.n_samples;
        const double g = gain[static_cast<size_t>(c)] * cfg.noise_scale;
        for (int64_t i = 0; i < rec.n_samples; ++i) row[i] = static_cast<float>(g * pink.next());
      }
      // mu rhythm on the motor channels; ERD on the contralateral side
      const double phase_c3 = rng.uniform(0.0, 2.0 * 3.141592653589793);
      const double phase_c4 = rng.uniform(0.0, 2.0 * 3.141592653589793);
      const int64_t attenuated = label == 1 ? c3 : c4;  // right hand -> left hemisphere (C3)
      for (const int64_t mc : {c3, c4}) {
        float* row = trial + mc * rec.n_samples;
        const double amp = subject_mu * gain[static_cast<size_t>(mc)];
        const double phase = mc == c3 ? phase_c3 : phase_c4;
        for (int64_t i = 0; i < rec.n_samples; ++i) {
          double a = amp;
          if (i >= cue_start && mc == attenuated) a *= 1.0 - cfg.erd_depth;
          row[i] += static_cast<float>(
              a * std::sin(2.0 * 3.141592653589793 * mu_freq * (static_cast<double>(i) / cfg.sample_rate) +
                           phase));
        }
      }
    }
    ds.subjects.push_back(std::move(rec));
  }
  ds.validate();
  return ds;
}

// ----------------------------- standardization -----------------------------

ChannelStats compute_channel_stats(std::span<const SubjectRecord* const> train_subjects) {
  if (train_subjects.empty()) throw ProtocolError("standardize: no training subjects");
  const int64_t ch = train_subjects.front()->n_channels;
  std::vector<double> sum(static_cast<size_t>(ch), 0.0), sum2(static_cast<size_t>(ch), 0.0);
  int64_t count = 0;
  for (const auto* rec : train_subjects) {
    if (rec->n_channels != ch) throw DimensionError("standardize: channel count mismatch across subjects");
    for (int64_t t = 0; t < rec->n_trials; ++t) {
      for (int64_t c = 0; c < ch; ++c) {
        const float* row = rec->samples.data() + (t * ch + c) * rec->n_samples;
        double& s = sum[static_cast<size_t>(c)];
        double& s2 = sum2[static_cast<size_t>(c)];
        for (int64_t i = 0; i < rec->n_samples; ++i) {
          s += row[i];
          s2 += static_cast<double>(row[i]) * row[i];
        }
      }
    }
    count += rec->n_trials * rec->n_samples;
  }
  if (count == 0) throw ProtocolError("standardize: training subjects contain no samples");
  ChannelStats st;
  st.mean.resize(static_cast<size_t>(ch));
  st.stddev.resize(static_cast<size_t>(ch));
  for (int64_t c = 0; c < ch; ++c) {
    const double m = sum[static_cast<size_t>(c)] / static_cast<double>(count);
    const double var = std::max(0.0, sum2[static_cast<size_t>(c)] / static_cast<double>(count) - m * m);
    st.mean[static_cast<size_t>(c)] = static_cast<float>(m);
    st.stddev[static_cast<size_t>(c)] = static_cast<float>(std::max(std::sqrt(var), 1e-8));
  }
  return st;
}

SubjectRecord standardized(const SubjectRecord& rec, const ChannelStats& stats) {
  if (static_cast<int64_t>(stats.mean.size()) != rec.n_channels) {
    throw DimensionError("standardize: stats cover " + std::to_string(stats.mean.size()) + " channels, record has " +
                         std::to_string(rec.n_channels));
  }
  SubjectRecord out = rec;
  for (int64_t t = 0; t < out.n_trials; ++t) {
    for (int64_t c = 0; c < out.n_channels; ++c) {
      float* row = out.samples.data() + (t * out.n_channels + c) * out.n_samples;
      const float m = stats.mean[static_cast<size_t>(c)];
      const float inv = 1.0f / stats.stddev[static_cast<size_t>(c)];
      for (int64_t i = 0; i < out.n_samples; ++i) row[i] = (row[i] - m) * inv;
    }
  }
  return out;
}

}  // namespace mibci
