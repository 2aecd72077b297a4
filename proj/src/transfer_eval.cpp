#include "mibci/transfer_eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

namespace fs = std::filesystem;

namespace mibci {

std::vector<FoldPlan> loso_split(std::vector<std::string> subject_ids) {
  std::sort(subject_ids.begin(), subject_ids.end());
  if (std::adjacent_find(subject_ids.begin(), subject_ids.end()) != subject_ids.end()) {
    throw ProtocolError("loso_split: duplicate subject ids");
  }
  if (subject_ids.size() < 2) {
    throw ProtocolError("loso_split: need at least 2 subjects, got " + std::to_string(subject_ids.size()));
  }
  std::vector<FoldPlan> plans;
  plans.reserve(subject_ids.size());
  for (size_t i = 0; i < subject_ids.size(); ++i) {
    FoldPlan p;
    p.held_out = subject_ids[i];
    for (size_t j = 0; j < subject_ids.size(); ++j) {
      if (j != i) p.train.push_back(subject_ids[j]);
    }
    plans.push_back(std::move(p));
  }
  return plans;
}

EvalSummary summarize(std::span<const FoldResult> results, double threshold) {
  if (results.empty()) throw ProtocolError("summarize: no fold results");
  EvalSummary s;
  s.threshold = threshold;
  for (const auto& r : results) {
    if (r.failed) throw ProtocolError("summarize: fold " + r.subject_id + " failed; exclude it first");
    s.accuracies.push_back(r.accuracy);
  }
  std::vector<double> sorted = s.accuracies;
  std::sort(sorted.begin(), sorted.end());
  // lower-middle median for even n
  s.median = sorted[(sorted.size() - 1) / 2];
  s.max = sorted.back();
  for (const double a : s.accuracies) {
    if (a >= threshold) ++s.count_at_threshold;
    int bin = static_cast<int>(std::floor(a * 10.0));
    bin = std::clamp(bin, 0, 9);  // 100% falls in the [90,100] bin
    ++s.histogram[static_cast<size_t>(bin)];
  }
  return s;
}

// ----------------------------- persistence -----------------------------

void write_text_atomic(const std::string& path, const std::string& content) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot open " + tmp + " for writing");
    out << content;
    if (!out) throw IoError("short write on " + tmp);
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp + " into place: " + ec.message());
}

namespace {

constexpr char kFoldHeader[] = "subject_id,n_test,n_correct,accuracy,epochs_run,stopped_early";

std::string fold_row(const FoldResult& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%s,%lld,%lld,%.10g,%d,%d", r.subject_id.c_str(),
                static_cast<long long>(r.n_test), static_cast<long long>(r.n_correct), r.accuracy,
                r.epochs_run, r.stopped_early ? 1 : 0);
  return buf;
}

FoldResult parse_fold_row(const std::string& line, const std::string& where) {
  FoldResult r;
  std::istringstream is(line);
  std::string field;
  auto next = [&]() {
    if (!std::getline(is, field, ',')) throw FormatError(where + ": truncated fold row \"" + line + "\"");
    return field;
  };
  r.subject_id = next();
  try {
    r.n_test = std::stoll(next());
    r.n_correct = std::stoll(next());
    r.accuracy = std::stod(next());
    r.epochs_run = std::stoi(next());
    r.stopped_early = std::stoi(next()) != 0;
  } catch (const std::exception&) {
    throw FormatError(where + ": unparseable fold row \"" + line + "\"");
  }
  return r;
}

}  // namespace

void write_fold_csv(const std::string& path, const FoldResult& r) {
  write_text_atomic(path, std::string(kFoldHeader) + "\n" + fold_row(r) + "\n");
}

std::optional<FoldResult> read_fold_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) return std::nullopt;
  std::string header, row;
  if (!std::getline(in, header) || header != kFoldHeader) {
    throw FormatError(path + ": unexpected fold CSV header");
  }
  if (!std::getline(in, row)) throw FormatError(path + ": missing fold row");
  return parse_fold_row(row, path);
}

void write_folds_csv(const std::string& path, std::span<const FoldResult> results) {
  std::string body = std::string(kFoldHeader) + "\n";
  for (const auto& r : results) body += fold_row(r) + "\n";
  write_text_atomic(path, body);
}

std::vector<FoldResult> read_folds_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open fold CSV: " + path);
  std::string line;
  if (!std::getline(in, line) || line != kFoldHeader) {
    throw FormatError(path + ": unexpected fold CSV header");
  }
  std::vector<FoldResult> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(parse_fold_row(line, path));
  }
  return out;
}

std::string loso_config_hash(const LosoOptions& opt) {
  std::ostringstream os;
  os << opt.spec.canonical_string() << "|" << opt.train.canonical_string() << "|std=" << opt.standardize
     << "|prec=" << precision_name(opt.precision);
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(os.str())));
  return buf;
}

void write_or_check_manifest(const LosoOptions& opt, const std::string& config_hash) {
  const std::string path = opt.out_dir + "/manifest.json";
  std::ifstream in(path);
  if (in) {
    std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (content.find(config_hash) == std::string::npos) {
      throw ProtocolError(opt.out_dir + ": existing results were produced under a different config (see " +
                          path + "); use a fresh output directory");
    }
    return;
  }
  std::ostringstream os;
  os << "{\n"
     << "  \"model\": \"" << model_kind_name(opt.spec.kind) << "\",\n"
     << "  \"config_hash\": \"" << config_hash << "\",\n"
     << "  \"standardize\": " << (opt.standardize ? "true" : "false") << ",\n"
     << "  \"precision\": \"" << precision_name(opt.precision) << "\",\n"
     << "  \"seed\": " << opt.train.seed << "\n"
     << "}\n";
  write_text_atomic(path, os.str());
}

}  // namespace mibci
