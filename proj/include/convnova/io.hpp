#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "convnova/model.hpp"
#include "convnova/train.hpp"

namespace convnova {

using Json = nlohmann::ordered_json;

Json to_json(const ModelConfig& config);
Json to_json(const TrainConfig& config);
/// Missing keys keep their defaults; unknown keys and bad types throw Error("bad_config").
ModelConfig model_config_from_json(const Json& j);
TrainConfig train_config_from_json(const Json& j);

/// {"model": {...}, "train": {...}}
struct RunConfig {
  ModelConfig model;
  TrainConfig train;

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

Json to_json(const RunConfig& config);
RunConfig run_config_from_json(const Json& j);
RunConfig load_run_config(const std::filesystem::path& path);

Json read_json(const std::filesystem::path& path);
void write_json(const std::filesystem::path& path, const Json& j);

inline constexpr std::string_view kCheckpointMagic = "CNVN";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TensorEntry {
  std::string name;
  Shape shape;
  std::string dtype;
  std::uint64_t offset = 0;
  std::uint64_t length = 0;
};

/// Layout: magic, u32 version, u64 header length, JSON header, payload.
/// Integers and tensor data are little-endian.
struct CheckpointHeader {
  ModelConfig config;
  std::vector<TensorEntry> tensors;
  Json meta = Json::object();
};

template <typename T>
struct Checkpoint {
  CheckpointHeader header;
  ModelParams<Tensor<T>> params;
};

template <typename T>
void save_checkpoint(std::ostream& out, const ModelParams<Tensor<T>>& params, const ModelConfig& config,
                     const Json& meta = Json::object());
template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ModelParams<Tensor<T>>& params,
                     const ModelConfig& config, const Json& meta = Json::object());

/// Reads and validates a checkpoint; tensors stored in another precision are cast.
template <typename T>
Checkpoint<T> load_checkpoint(std::istream& in);
template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path);

CheckpointHeader read_checkpoint_header(const std::filesystem::path& path);

/// Git blob id: SHA-1 of "blob <size>\0" followed by the content, in hex.
std::string git_blob_sha1(std::string_view content);
std::string hash_file(const std::filesystem::path& path);
/// Current UTC time as YYYY-MM-DDTHH:MM:SSZ.
std::string utc_timestamp();

struct InputFile {
  std::string path;
  std::string hash;
};

struct RunManifest {
  std::string command;
  Json config = Json::object();
  std::uint64_t seed = 0;
  std::string started;
  std::string finished;
  std::vector<InputFile> inputs;
  std::vector<InputFile> outputs;
};

Json to_json(const RunManifest& m);
RunManifest manifest_from_json(const Json& j);
void write_manifest(const std::filesystem::path& path, const RunManifest& m);
RunManifest read_manifest(const std::filesystem::path& path);

/// Header "<index_name>,<column>..." then one row per entry, 1-based index.
void write_loss_csv(std::ostream& out, const std::string& index_name, const std::vector<std::string>& columns,
                    const std::vector<std::vector<double>>& rows);

struct BenchRow {
  std::size_t length = 0;
  double median_seconds = 0.0;
  std::size_t batch_size = 1;
  std::size_t repeats = 0;
  std::size_t n_params = 0;
  bool ok = true;
  std::string error;
};

inline constexpr std::size_t kMinBenchRepeats = 5;

/// Forward-only wall time (features plus head) at batch 1 for each length.
/// Lengths are timed round-robin: one discarded warmup round, then `repeats`
/// timed rounds whose median is kept. A length that throws or runs out of
/// memory yields a failed row and is skipped from then on.
template <typename T>
std::vector<BenchRow> bench_throughput(const ModelParams<Tensor<T>>& params, const ModelConfig& config,
                                       const std::vector<std::size_t>& lengths, std::size_t repeats,
                                       std::uint64_t seed = 0);

void write_bench_csv(std::ostream& out, const std::vector<BenchRow>& rows);
std::vector<BenchRow> read_bench_csv(std::istream& in);

struct DoublingRatio {
  std::size_t length = 0;
  double ratio = 0.0;
};

/// median(2n) / median(n) for every successful row whose double is also present.
std::vector<DoublingRatio> doubling_ratios(const std::vector<BenchRow>& rows);

}  // namespace convnova
