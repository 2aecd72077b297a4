#include "mibci/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "json.hpp"

#include "mibci/stat_tests.hpp"

namespace fs = std::filesystem;

namespace mibci {

namespace {

std::string fmt_num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

int parse_int(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    const int r = std::stoi(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw UsageError("value \"" + v + "\" for " + key + " is not an integer");
  }
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    const double r = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw UsageError("value \"" + v + "\" for " + key + " is not a number");
  }
}

uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    const unsigned long long r = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw UsageError("value \"" + v + "\" for " + key + " is not an unsigned integer");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "on" || v == "true" || v == "1") return true;
  if (v == "off" || v == "false" || v == "0") return false;
  throw UsageError("value \"" + v + "\" for " + key + " is not on/off");
}

struct ParsedKv {
  bool dropout_explicit = false;
};

void apply_kv(RunConfig& cfg, ParsedKv& meta, const std::string& key, const std::string& value) {
  if (key == "model") {
    cfg.model = model_kind_from_name(value);
  } else if (key == "data") {
    cfg.data_dir = value;
  } else if (key == "out") {
    cfg.out_dir = value;
  } else if (key == "seed") {
    cfg.seed = parse_u64(key, value);
  } else if (key == "jobs") {
    cfg.jobs = parse_int(key, value);
  } else if (key == "precision") {
    if (value == "single") {
      cfg.precision = Precision::single32;
    } else if (value == "double") {
      cfg.precision = Precision::double64;
    } else {
      throw UsageError("precision must be single or double, got \"" + value + "\"");
    }
  } else if (key == "standardize") {
    cfg.standardize = parse_bool(key, value);
  } else if (key == "threshold") {
    cfg.threshold = parse_double(key, value);
  } else if (key == "epochs") {
    cfg.epochs = parse_int(key, value);
  } else if (key == "patience") {
    cfg.patience = parse_int(key, value);
  } else if (key == "es_patience") {
    cfg.es_patience = parse_int(key, value);
  } else if (key == "batch_size") {
    cfg.batch_size = parse_int(key, value);
  } else if (key == "lr") {
    cfg.lr = parse_double(key, value);
  } else if (key == "min_lr") {
    cfg.min_lr = parse_double(key, value);
  } else if (key == "factor") {
    cfg.factor = parse_double(key, value);
  } else if (key == "dropout") {
    cfg.dropout = parse_double(key, value);
    meta.dropout_explicit = true;
  } else if (key == "validation_fraction") {
    cfg.validation_fraction = parse_double(key, value);
  } else if (key == "monitor") {
    if (value == "val_loss") {
      cfg.monitor = Monitor::validation_loss;
    } else if (value == "train_loss") {
      cfg.monitor = Monitor::train_loss;
    } else {
      throw UsageError("monitor must be val_loss or train_loss, got \"" + value + "\"");
    }
  } else if (key == "latent_dim") {
    cfg.latent_dim = parse_int(key, value);
  } else if (key == "pool1") {
    cfg.pool1 = parse_int(key, value);
  } else if (key == "pool2") {
    cfg.pool2 = parse_int(key, value);
  } else if (key == "temporal_len") {
    cfg.temporal_len = parse_int(key, value);
  } else if (key == "margin") {
    cfg.triplet_margin = parse_double(key, value);
  } else if (key == "w_ce") {
    cfg.w_ce = parse_double(key, value);
  } else if (key == "w_mse") {
    cfg.w_mse = parse_double(key, value);
  } else if (key == "w_triplet") {
    cfg.w_triplet = parse_double(key, value);
  } else if (key == "subjects") {
    cfg.subjects = parse_int(key, value);
  } else if (key == "trials") {
    cfg.trials = parse_int(key, value);
  } else if (key == "channels") {
    cfg.channels = parse_int(key, value);
  } else if (key == "samples") {
    cfg.samples = parse_int(key, value);
  } else if (key == "rate") {
    cfg.rate = parse_double(key, value);
  } else if (key == "erd_depth") {
    cfg.erd_depth = parse_double(key, value);
  } else if (key == "noise_scale") {
    cfg.noise_scale = parse_double(key, value);
  } else if (key == "export_csv") {
    cfg.export_csv_path = value;
  } else if (key == "holdout") {
    cfg.holdout = value;
  } else {
    throw UsageError("unknown key \"" + key + "\"");
  }
}

std::string normalize_key(std::string key) {
  for (auto& c : key) {
    if (c == '-') c = '_';
  }
  return key;
}

std::map<std::string, std::string> read_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config file: " + path);
  std::map<std::string, std::string> kv;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw UsageError(path + ":" + std::to_string(lineno) + ": expected key = value");
    }
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty() || value.empty()) {
      throw UsageError(path + ":" + std::to_string(lineno) + ": empty key or value");
    }
    kv[normalize_key(key)] = value;
  }
  return kv;
}

}  // namespace

// ----------------------------- parse_config -----------------------------

RunConfig parse_config(const std::vector<std::string>& args) {
  if (args.empty()) {
    throw UsageError("usage: mibci <synth|train|loso|stats|report> [--flags]; see README");
  }
  RunConfig cfg;
  cfg.command = args[0];
  if (cfg.command != "synth" && cfg.command != "train" && cfg.command != "loso" && cfg.command != "stats" &&
      cfg.command != "report") {
    throw UsageError("unknown command \"" + cfg.command + "\" (synth|train|loso|stats|report)");
  }

  std::vector<std::pair<std::string, std::string>> cli_kv;
  std::string config_file;
  for (size_t i = 1; i < args.size(); ++i) {
    const std::string& a = args[i];
    if (a.rfind("--", 0) == 0) {
      std::string key = a.substr(2);
      std::string value;
      const auto eq = key.find('=');
      if (eq != std::string::npos) {
        value = key.substr(eq + 1);
        key = key.substr(0, eq);
      } else {
        if (i + 1 >= args.size()) throw UsageError("flag --" + key + " expects a value");
        value = args[++i];
      }
      key = normalize_key(key);
      if (key == "config") {
        config_file = value;
      } else {
        cli_kv.emplace_back(key, value);
      }
    } else {
      cfg.inputs.push_back(a);
    }
  }

  ParsedKv meta;
  if (!config_file.empty()) {
    for (const auto& [k, v] : read_config_file(config_file)) apply_kv(cfg, meta, k, v);
  }
  for (const auto& [k, v] : cli_kv) apply_kv(cfg, meta, k, v);

  // command-level requirements
  if (cfg.command == "train" || cfg.command == "loso") {
    if (!cfg.model) throw UsageError(cfg.command + ": --model is required");
    if (cfg.data_dir.empty()) throw UsageError(cfg.command + ": --data is required");
    if (cfg.out_dir.empty()) throw UsageError(cfg.command + ": --out is required");
  }
  if (cfg.command == "synth") {
    if (cfg.out_dir.empty()) throw UsageError("synth: --out is required");
  }
  if (cfg.command == "stats" && cfg.inputs.size() < 2) {
    throw UsageError("stats: need at least 2 fold CSVs or loso directories");
  }
  if (cfg.command == "report") {
    if (cfg.inputs.empty()) throw UsageError("report: need at least 1 fold CSV or loso directory");
    if (cfg.out_dir.empty()) throw UsageError("report: --out is required");
  }
  if ((cfg.command == "synth" || cfg.command == "train" || cfg.command == "loso") && !cfg.inputs.empty()) {
    throw UsageError(cfg.command + ": unexpected positional argument \"" + cfg.inputs.front() + "\"");
  }
  if (cfg.model && *cfg.model == ModelKind::min2net && meta.dropout_explicit) {
    throw UsageError("min2net has no dropout rate hyperparameter");
  }
  if (cfg.jobs < 1) throw UsageError("--jobs must be >= 1");
  return cfg;
}

// ----------------------------- effective configs -----------------------------

ModelSpec RunConfig::effective_spec() const {
  if (!model) throw ConfigError("no model selected");
  ModelSpec s = default_model_spec(*model);
  if (dropout) s.dropout_rate = *dropout;
  if (latent_dim) s.latent_dim = *latent_dim;
  if (pool1) s.min2net_pool1 = *pool1;
  if (pool2) s.min2net_pool2 = *pool2;
  if (temporal_len) s.eegnet_temporal_len = *temporal_len;
  if (triplet_margin) s.triplet_margin = *triplet_margin;
  if (w_ce) s.weight_ce = *w_ce;
  if (w_mse) s.weight_mse = *w_mse;
  if (w_triplet) s.weight_triplet = *w_triplet;
  return s;
}

TrainConfig RunConfig::effective_train() const {
  if (!model) throw ConfigError("no model selected");
  TrainConfig c = table_train_config(*model);
  c.seed = seed;
  if (epochs) c.epochs = *epochs;
  if (patience) c.patience = *patience;
  if (es_patience) c.es_patience = *es_patience;
  if (batch_size) c.batch_size = *batch_size;
  if (lr) c.learning_rate = *lr;
  if (min_lr) c.min_lr = *min_lr;
  if (factor) c.factor = *factor;
  if (validation_fraction) c.validation_fraction = *validation_fraction;
  if (monitor) c.monitor = *monitor;
  return c;
}

SynthConfig RunConfig::effective_synth() const {
  SynthConfig s;
  s.seed = seed;
  if (subjects) s.n_subjects = *subjects;
  if (trials) s.trials_per_subject = *trials;
  if (channels) s.n_channels = *channels;
  if (samples) s.n_samples = *samples;
  if (rate) s.sample_rate = static_cast<float>(*rate);
  if (erd_depth) s.erd_depth = *erd_depth;
  if (noise_scale) s.noise_scale = *noise_scale;
  return s;
}

bool RunConfig::effective_standardize() const {
  if (standardize) return *standardize;
  // raw input for the CNNs; MIN2Net's reconstruction needs bounded targets
  return model && *model == ModelKind::min2net;
}

// ----------------------------- summary json -----------------------------

std::string summary_to_json(const ModelReport& report) {
  nlohmann::json j;
  j["model"] = report.model_name;
  j["config_hash"] = report.config_hash;
  j["n_folds"] = report.summary.accuracies.size();
  j["accuracies"] = report.summary.accuracies;
  j["median"] = report.summary.median;
  j["max"] = report.summary.max;
  j["count_ge_70"] = report.summary.count_at_threshold;
  j["threshold"] = report.summary.threshold;
  j["histogram"] = report.summary.histogram;
  return j.dump(2) + "\n";
}

ModelReport summary_from_json(const std::string& json_text) {
  const auto j = nlohmann::json::parse(json_text);
  ModelReport r;
  r.model_name = j.at("model").get<std::string>();
  r.config_hash = j.at("config_hash").get<std::string>();
  r.summary.accuracies = j.at("accuracies").get<std::vector<double>>();
  r.summary.median = j.at("median").get<double>();
  r.summary.max = j.at("max").get<double>();
  r.summary.count_at_threshold = j.at("count_ge_70").get<int>();
  r.summary.threshold = j.at("threshold").get<double>();
  const auto h = j.at("histogram").get<std::vector<int>>();
  if (h.size() != r.summary.histogram.size()) throw FormatError("summary json: histogram must have 10 bins");
  std::copy(h.begin(), h.end(), r.summary.histogram.begin());
  return r;
}

// ----------------------------- SVG plots -----------------------------

// All numeric text in the plots comes from the EvalSummary itself.

std::string histogram_svg(const ModelReport& report) {
  const auto& s = report.summary;
  const int width = 640, height = 400;
  const int left = 60, bottom = 340, top = 50;
  const double bar_w = (width - left - 20) / 10.0;
  int max_count = 1;
  for (const int c : s.histogram) max_count = std::max(max_count, c);
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
  svg << "<rect width=\"" << width << "\" height=\"" << height << "\" fill=\"white\"/>\n";
  svg << "<text x=\"" << left << "\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\">" << report.model_name
      << " test accuracy distribution</text>\n";
  svg << "<text x=\"" << left << "\" y=\"42\" font-family=\"sans-serif\" font-size=\"12\">median "
      << fmt_num(s.median) << ", max " << fmt_num(s.max) << ", " << s.count_at_threshold << " of "
      << s.accuracies.size() << " at accuracy &#8805; " << fmt_num(s.threshold) << "</text>\n";
  for (int b = 0; b < 10; ++b) {
    const int count = s.histogram[static_cast<size_t>(b)];
    const double h = static_cast<double>(count) / max_count * (bottom - top);
    const double x = left + b * bar_w;
    svg << "<rect x=\"" << fmt_num(x) << "\" y=\"" << fmt_num(bottom - h) << "\" width=\"" << fmt_num(bar_w - 4)
        << "\" height=\"" << fmt_num(h) << "\" fill=\"#4878a8\"/>\n";
    svg << "<text x=\"" << fmt_num(x + (bar_w - 4) / 2) << "\" y=\"" << fmt_num(bottom - h - 4)
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" << count << "</text>\n";
    svg << "<text x=\"" << fmt_num(x) << "\" y=\"" << bottom + 16
        << "\" font-family=\"sans-serif\" font-size=\"10\">" << b * 10 << "</text>\n";
  }
  svg << "<text x=\"" << fmt_num(left + 10 * bar_w) << "\" y=\"" << bottom + 16
      << "\" font-family=\"sans-serif\" font-size=\"10\">100</text>\n";
  // 70% threshold marker
  const double tx = left + s.threshold * 10.0 * bar_w;
  svg << "<line x1=\"" << fmt_num(tx) << "\" y1=\"" << top << "\" x2=\"" << fmt_num(tx) << "\" y2=\"" << bottom
      << "\" stroke=\"#c03028\" stroke-dasharray=\"5,4\"/>\n";
  svg << "<line x1=\"" << left << "\" y1=\"" << bottom << "\" x2=\"" << width - 20 << "\" y2=\"" << bottom
      << "\" stroke=\"black\"/>\n";
  svg << "<text x=\"" << fmt_num((left + width - 20) / 2.0) << "\" y=\"" << bottom + 34
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">accuracy (%)</text>\n";
  svg << "</svg>\n";
  return svg.str();
}

std::string distribution_svg(const std::vector<ModelReport>& reports) {
  const int width = 640, height = 400;
  const int left = 70, right = 30, top = 50, bottom = 350;
  const auto y_of = [&](double acc) { return bottom - acc * (bottom - top); };
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
  svg << "<rect width=\"" << width << "\" height=\"" << height << "\" fill=\"white\"/>\n";
  svg << "<text x=\"" << left << "\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\">"
      << "classification accuracy by model</text>\n";
  for (int tick = 0; tick <= 4; ++tick) {
    const double acc = tick * 0.25;
    svg << "<line x1=\"" << left << "\" y1=\"" << fmt_num(y_of(acc)) << "\" x2=\"" << width - right
        << "\" y2=\"" << fmt_num(y_of(acc)) << "\" stroke=\"#dddddd\"/>\n";
    svg << "<text x=\"" << left - 8 << "\" y=\"" << fmt_num(y_of(acc) + 4)
        << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">" << fmt_num(acc * 100)
        << "</text>\n";
  }
  const double slot = static_cast<double>(width - left - right) / std::max<size_t>(reports.size(), 1);
  for (size_t m = 0; m < reports.size(); ++m) {
    const auto& s = reports[m].summary;
    std::vector<double> sorted = s.accuracies;
    std::sort(sorted.begin(), sorted.end());
    const auto q_at = [&](double f) {
      return sorted[static_cast<size_t>(std::floor(f * static_cast<double>(sorted.size() - 1)))];
    };
    const double cx = left + slot * (static_cast<double>(m) + 0.5);
    const double bw = std::min(60.0, slot * 0.5);
    const double q1 = q_at(0.25), q3 = q_at(0.75);
    svg << "<line x1=\"" << fmt_num(cx) << "\" y1=\"" << fmt_num(y_of(sorted.front())) << "\" x2=\""
        << fmt_num(cx) << "\" y2=\"" << fmt_num(y_of(sorted.back())) << "\" stroke=\"black\"/>\n";
    svg << "<rect x=\"" << fmt_num(cx - bw / 2) << "\" y=\"" << fmt_num(y_of(q3)) << "\" width=\"" << fmt_num(bw)
        << "\" height=\"" << fmt_num(y_of(q1) - y_of(q3)) << "\" fill=\"#a8c4e0\" stroke=\"black\"/>\n";
    svg << "<line x1=\"" << fmt_num(cx - bw / 2) << "\" y1=\"" << fmt_num(y_of(s.median)) << "\" x2=\""
        << fmt_num(cx + bw / 2) << "\" y2=\"" << fmt_num(y_of(s.median))
        << "\" stroke=\"#203050\" stroke-width=\"2\"/>\n";
    svg << "<text x=\"" << fmt_num(cx) << "\" y=\"" << bottom + 18
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" << reports[m].model_name
        << "</text>\n";
    svg << "<text x=\"" << fmt_num(cx) << "\" y=\"" << bottom + 34
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">median "
        << fmt_num(s.median) << "</text>\n";
  }
  // BCI efficiency threshold
  const double ty = y_of(reports.empty() ? 0.7 : reports.front().summary.threshold);
  svg << "<line x1=\"" << left << "\" y1=\"" << fmt_num(ty) << "\" x2=\"" << width - right << "\" y2=\""
      << fmt_num(ty) << "\" stroke=\"#c03028\" stroke-dasharray=\"5,4\"/>\n";
  svg << "<text x=\"" << width - right << "\" y=\"" << fmt_num(ty - 6)
      << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\" fill=\"#c03028\">"
      << fmt_num((reports.empty() ? 0.7 : reports.front().summary.threshold) * 100) << "% threshold</text>\n";
  svg << "</svg>\n";
  return svg.str();
}

// ----------------------------- emit_report -----------------------------

ReportBundle emit_report(const std::vector<std::pair<std::string, std::vector<FoldResult>>>& per_model,
                         const std::vector<std::string>& config_hashes, double threshold,
                         const std::string& out_dir) {
  if (per_model.empty()) throw ProtocolError("emit_report: no fold results");
  fs::create_directories(out_dir);
  ReportBundle bundle;
  for (size_t m = 0; m < per_model.size(); ++m) {
    const auto& [name, folds] = per_model[m];
    ModelReport rep;
    rep.model_name = name;
    rep.config_hash = m < config_hashes.size() ? config_hashes[m] : "unknown";
    rep.summary = summarize(folds, threshold);
    const std::string base = out_dir + "/";
    write_text_atomic(base + "summary_" + name + ".json", summary_to_json(rep));
    write_text_atomic(base + "histogram_" + name + ".svg", histogram_svg(rep));
    write_folds_csv(base + "folds_" + name + ".csv", folds);
    bundle.files_written.push_back(base + "summary_" + name + ".json");
    bundle.files_written.push_back(base + "histogram_" + name + ".svg");
    bundle.files_written.push_back(base + "folds_" + name + ".csv");
    bundle.models.push_back(std::move(rep));
  }
  write_text_atomic(out_dir + "/distribution.svg", distribution_svg(bundle.models));
  bundle.files_written.push_back(out_dir + "/distribution.svg");
  return bundle;
}

// ----------------------------- dispatch -----------------------------

namespace {

struct NamedFolds {
  std::string name;
  std::string config_hash = "unknown";
  std::vector<FoldResult> folds;
};

NamedFolds load_fold_input(const std::string& input) {
  NamedFolds nf;
  fs::path p(input);
  if (fs::is_directory(p)) {
    nf.folds = read_folds_csv((p / "folds.csv").string());
    nf.name = p.filename().string();
    const fs::path manifest = p / "manifest.json";
    if (fs::exists(manifest)) {
      std::ifstream in(manifest);
      std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
      const auto j = nlohmann::json::parse(text, nullptr, false);
      if (!j.is_discarded()) {
        if (j.contains("model")) nf.name = j["model"].get<std::string>();
        if (j.contains("config_hash")) nf.config_hash = j["config_hash"].get<std::string>();
      }
    }
  } else {
    nf.folds = read_folds_csv(input);
    nf.name = p.stem().string();
  }
  if (nf.folds.empty()) throw ProtocolError(input + ": no folds found");
  return nf;
}

// subject-aligned accuracy vectors for compare_models
std::vector<std::vector<double>> align_by_subject(const std::vector<NamedFolds>& inputs) {
  std::vector<std::string> ref;
  for (const auto& f : inputs.front().folds) ref.push_back(f.subject_id);
  std::sort(ref.begin(), ref.end());
  std::vector<std::vector<double>> vectors;
  for (const auto& nf : inputs) {
    std::map<std::string, double> by_subject;
    for (const auto& f : nf.folds) by_subject[f.subject_id] = f.accuracy;
    if (by_subject.size() != ref.size()) {
      throw ProtocolError(nf.name + ": subject set does not align with " + inputs.front().name);
    }
    std::vector<double> v;
    for (const auto& id : ref) {
      const auto it = by_subject.find(id);
      if (it == by_subject.end()) {
        throw ProtocolError(nf.name + ": missing subject " + id + "; fold sets are misaligned");
      }
      v.push_back(it->second);
    }
    vectors.push_back(std::move(v));
  }
  return vectors;
}

int dispatch_synth(const RunConfig& cfg, std::ostream& out) {
  const SynthConfig sc = cfg.effective_synth();
  const EpochedDataset ds = synthesize_dataset(sc);
  save_dataset(ds, cfg.out_dir);
  if (cfg.export_csv_path) export_csv(ds, *cfg.export_csv_path);
  out << "synthesized " << ds.subjects.size() << " subjects x " << sc.trials_per_subject << " trials ("
      << sc.n_channels << " ch, " << sc.n_samples << " samples @ " << sc.sample_rate << " Hz) -> "
      << cfg.out_dir << "\n";
  return 0;
}

template <typename T>
int dispatch_train(const RunConfig& cfg, std::ostream& out) {
  EpochedDataset ds = load_dataset(cfg.data_dir);
  ModelSpec spec = cfg.effective_spec();
  spec.n_channels = static_cast<int>(ds.n_channels());
  spec.n_samples = static_cast<int>(ds.n_samples());
  spec.validate();
  TrainConfig tc = cfg.effective_train();
  tc.validate();

  std::vector<const SubjectRecord*> train_ptrs;
  const SubjectRecord* held = nullptr;
  for (const auto& s : ds.subjects) {
    if (cfg.holdout && s.subject_id == *cfg.holdout) {
      held = &s;
    } else {
      train_ptrs.push_back(&s);
    }
  }
  if (cfg.holdout && !held) throw UsageError("holdout subject \"" + *cfg.holdout + "\" not in dataset");
  if (train_ptrs.empty()) throw UsageError("train: no training subjects left");

  std::vector<SubjectRecord> owned;
  SubjectRecord held_std;
  if (cfg.effective_standardize()) {
    const ChannelStats stats = compute_channel_stats(train_ptrs);
    for (const auto* rec : train_ptrs) owned.push_back(standardized(*rec, stats));
    train_ptrs.clear();
    for (const auto& rec : owned) train_ptrs.push_back(&rec);
    if (held) {
      held_std = standardized(*held, stats);
      held = &held_std;
    }
  }

  fs::create_directories(cfg.out_dir);
  auto model = build_model<T>(spec, derive_seed(cfg.seed, "init"));
  TrainConfig fit_cfg = tc;
  fit_cfg.seed = derive_seed(cfg.seed, "fit");
  const EpochTrace trace = fit(*model, train_ptrs, fit_cfg);
  std::ostringstream tr;
  trace.to_csv(tr);
  write_text_atomic(cfg.out_dir + "/trace.csv", tr.str());
  save_checkpoint(*model, cfg.out_dir + "/" + model_kind_name(spec.kind) + ".ckpt");
  out << "trained " << model_kind_name(spec.kind) << " for " << trace.records.size() << " epochs (best epoch "
      << trace.best_epoch << (trace.stopped_early ? ", early stop" : "") << ")\n";
  if (held) {
    const FoldResult r = evaluate_fold(*model, *held);
    write_fold_csv(cfg.out_dir + "/fold_" + held->subject_id + ".csv", r);
    out << "held-out subject " << held->subject_id << ": " << r.n_correct << "/" << r.n_test << " = "
        << fmt_num(r.accuracy) << "\n";
  }
  return 0;
}

template <typename T>
int dispatch_loso(const RunConfig& cfg, std::ostream& out) {
  EpochedDataset ds = load_dataset(cfg.data_dir);
  LosoOptions opt;
  opt.spec = cfg.effective_spec();
  opt.train = cfg.effective_train();
  opt.standardize = cfg.effective_standardize();
  opt.out_dir = cfg.out_dir;
  opt.jobs = cfg.jobs;
  opt.precision = cfg.precision;
  const auto results = run_loso<T>(ds, opt);

  int failed = 0;
  std::vector<FoldResult> ok;
  for (const auto& r : results) {
    if (r.failed) {
      ++failed;
      out << "fold " << r.subject_id << " FAILED: " << r.error << "\n";
    } else {
      ok.push_back(r);
    }
  }
  if (!ok.empty()) {
    const EvalSummary s = summarize(ok, cfg.threshold);
    ModelReport rep;
    rep.model_name = model_kind_name(opt.spec.kind);
    opt.spec.n_channels = static_cast<int>(ds.n_channels());
    opt.spec.n_samples = static_cast<int>(ds.n_samples());
    rep.config_hash = loso_config_hash(opt);
    rep.summary = s;
    write_text_atomic(cfg.out_dir + "/summary.json", summary_to_json(rep));
    out << "loso " << rep.model_name << ": " << ok.size() << " folds, median " << fmt_num(s.median) << ", max "
        << fmt_num(s.max) << ", " << s.count_at_threshold << " at accuracy >= " << fmt_num(s.threshold) << "\n";
  }
  return failed > 0 ? 1 : 0;
}

int dispatch_stats(const RunConfig& cfg, std::ostream& out) {
  std::vector<NamedFolds> inputs;
  for (const auto& in : cfg.inputs) inputs.push_back(load_fold_input(in));
  const auto vectors = align_by_subject(inputs);
  std::vector<std::string> names;
  for (const auto& nf : inputs) names.push_back(nf.name);
  const StatReport rep = compare_models(vectors, names, 0.05);
  const std::string json = stat_report_json(rep);
  if (!cfg.out_dir.empty()) {
    fs::create_directories(cfg.out_dir);
    write_text_atomic(cfg.out_dir + "/stats.json", json);
  }
  out << json;
  return 0;
}

int dispatch_report(const RunConfig& cfg, std::ostream& out) {
  std::vector<std::pair<std::string, std::vector<FoldResult>>> per_model;
  std::vector<std::string> hashes;
  for (const auto& in : cfg.inputs) {
    NamedFolds nf = load_fold_input(in);
    per_model.emplace_back(nf.name, std::move(nf.folds));
    hashes.push_back(nf.config_hash);
  }
  const ReportBundle bundle = emit_report(per_model, hashes, cfg.threshold, cfg.out_dir);
  for (const auto& f : bundle.files_written) out << "wrote " << f << "\n";
  return 0;
}

}  // namespace

int dispatch(const RunConfig& cfg, std::ostream& out) {
  if (cfg.command == "synth") return dispatch_synth(cfg, out);
  if (cfg.command == "train") {
    return cfg.precision == Precision::double64 ? dispatch_train<double>(cfg, out)
                                                : dispatch_train<float>(cfg, out);
  }
  if (cfg.command == "loso") {
    return cfg.precision == Precision::double64 ? dispatch_loso<double>(cfg, out)
                                                : dispatch_loso<float>(cfg, out);
  }
  if (cfg.command == "stats") return dispatch_stats(cfg, out);
  if (cfg.command == "report") return dispatch_report(cfg, out);
  throw UsageError("unknown command \"" + cfg.command + "\"");
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  try {
    const RunConfig cfg = parse_config(args);
    return dispatch(cfg, out);
  } catch (const TrainingDiverged& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace mibci
