#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "convnova/io.hpp"
#include "convnova/metrics.hpp"
#include "convnova/train.hpp"

namespace convnova {

namespace fs = std::filesystem;

struct PretrainRequest {
  RunConfig config;
  /// FASTA corpus.
  fs::path data;
  fs::path out_dir;
};

struct PretrainOutcome {
  PretrainResult result;
  fs::path checkpoint;
  fs::path loss_csv;
  fs::path manifest;
};

/// Writes checkpoint.cnvn, loss.csv (per epoch), steps.csv and manifest.json to `out_dir`.
PretrainOutcome cmd_pretrain(const PretrainRequest& request);

struct FinetuneRequest {
  RunConfig config;
  /// Labeled TSV; split by train.train_fraction unless `valid` is given.
  fs::path data;
  std::optional<fs::path> valid;
  /// Warm start; the head is replaced when it does not match the config.
  std::optional<fs::path> checkpoint;
  fs::path out_dir;
  std::vector<std::string> metrics = kAllMetrics;
  /// Also train from scratch with the same seed and write comparison.csv.
  bool compare_scratch = false;
};

struct FinetuneOutcome {
  FinetuneResult result;
  std::optional<FinetuneResult> scratch;
  fs::path checkpoint;
  fs::path report;
  fs::path manifest;
};

/// Writes checkpoint.cnvn, metrics.txt (best validation report), loss.csv and manifest.json.
FinetuneOutcome cmd_finetune(const FinetuneRequest& request);

struct EvalRequest {
  fs::path checkpoint;
  fs::path data;
  std::vector<std::string> metrics = kAllMetrics;
  fs::path out;
  std::size_t workers = 1;
};

/// Read-only evaluation of a sequence-classification checkpoint; writes the report to `out`.
MetricReport cmd_eval(const EvalRequest& request);

struct BenchRequest {
  ModelConfig model;
  std::string precision = "f32";
  std::vector<std::size_t> lengths;
  std::size_t repeats = kMinBenchRepeats;
  std::uint64_t seed = 0;
  fs::path out;
};

std::vector<BenchRow> cmd_bench(const BenchRequest& request);

struct RfRequest {
  ModelConfig model;
  /// Input length for the dilation plan.
  std::size_t length = 500;
  double fraction = 0.15;
  std::uint64_t seed = 0;
};

struct RfReport {
  std::optional<std::size_t> analytic;
  std::optional<std::size_t> empirical;
  std::size_t probe_length = 0;
  bool agree = false;
  std::size_t length = 0;
  double fraction = 0.0;
  DilationPlan plan;
  std::string notice;
};

RfReport cmd_receptive_field(const RfRequest& request);
void print_rf_report(std::ostream& out, const RfReport& report);

struct SynthRequest {
  /// "motif", "longrange" or "kmer".
  std::string generator;
  std::map<std::string, std::string> params;
  std::uint64_t seed = 0;
  /// TSV for labeled generators, FASTA for "kmer". The manifest goes to <out>.manifest.json.
  fs::path out;
};

struct SynthOutcome {
  fs::path data;
  fs::path manifest;
  Json params;
  std::size_t n_records = 0;
};

SynthOutcome cmd_synth(const SynthRequest& request);
/// Request that regenerates the data described by a synth manifest into `out`.
SynthRequest synth_request_from_manifest(const RunManifest& manifest, const fs::path& out);

/// Config stored in a pretrain or finetune manifest, after checking the
/// recorded input hashes against the files on disk.
RunConfig replay_config(const RunManifest& manifest);

}  // namespace convnova
