#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "arwkv/model.hpp"
#include "arwkv/tasks.hpp"
#include "arwkv/train.hpp"

namespace arwkv {

using Json = nlohmann::json;

enum class CheckpointErrorKind {
  io,
  bad_magic,
  unsupported_version,
  truncated,
  checksum_mismatch,
  shape_mismatch,
  unknown_parameter,
  missing_parameter,
  bad_config,
};

std::string_view to_string(CheckpointErrorKind k);

class CheckpointError : public std::runtime_error {
 public:
  CheckpointError(CheckpointErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}
  CheckpointErrorKind kind() const { return kind_; }

 private:
  CheckpointErrorKind kind_;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::uint32_t kCorpusVersion = 1;

// ---- configuration ----------------------------------------------------------

Json to_json(const ModelConfig& c);
Json to_json(const TrainConfig& c);
Json to_json(const TaskSpec& c);

/// Strict readers: unknown keys and wrong types throw ConfigError naming the key.
ModelConfig model_config_from_json(const Json& j);
TrainConfig train_config_from_json(const Json& j);
TaskSpec task_spec_from_json(const Json& j);

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  TaskSpec task;

  /// Every field with defaults applied.
  Json to_json() const;
};

/// Top-level object with optional "model", "train" and "task" sections.
RunConfig parse_config(const Json& j);
RunConfig load_config(const std::string& path);

// ---- checkpoints ------------------------------------------------------------

struct CheckpointData {
  ModelConfig config;
  std::vector<NamedTensor> params;
};

/// magic "ARWK" | u32 version | u32 length + canonical config JSON | u64 count |
/// per parameter: u32 name length, name, u32 ndim, u64 extents | f32 payload |
/// u64 FNV-1a of the payload. Little-endian throughout.
std::vector<std::uint8_t> encode_checkpoint(const CheckpointData& data);
CheckpointData decode_checkpoint(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> checkpoint_bytes(const DecoderModel& model);
DecoderModel model_from_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const DecoderModel& model, const std::string& path);
DecoderModel load_checkpoint(const std::string& path);

// ---- corpus files -----------------------------------------------------------

struct CorpusFile {
  std::uint32_t vocab_size = 0;
  std::vector<std::int32_t> tokens;
};

/// magic "ARWC" | u32 version | u32 vocab_size | u64 count | u32 ids.
void save_corpus(std::span<const std::int32_t> tokens, std::uint32_t vocab_size,
                 const std::string& path);
CorpusFile load_corpus(const std::string& path);

// ---- hashing and files ------------------------------------------------------

std::vector<std::uint8_t> read_file(const std::string& path);
void write_file(const std::string& path, std::span<const std::uint8_t> bytes);
/// Hex SHA-1 of "blob <size>\0" + bytes, as git computes it.
std::string git_blob_sha1(std::span<const std::uint8_t> bytes);
std::string file_hash(const std::string& path);

// ---- run records ------------------------------------------------------------

struct RunManifest {
  std::string stage;
  std::string variant;
  Json config;
  std::map<std::string, std::string> inputs;   // role -> content hash
  std::map<std::string, std::string> corpora;  // path -> content hash
  std::string output_path;
  std::string output_hash;
  std::uint64_t seed = 0;
  std::size_t step = 0;
  std::size_t tokens_seen = 0;
  std::string metrics_path;
  Json results = Json::object();

  Json to_json() const;
  static RunManifest from_json(const Json& j);
};

void write_manifest(const RunManifest& m, const std::string& path);
RunManifest read_manifest(const std::string& path);

/// Append-only JSONL sink; every record is flushed before write() returns.
class MetricsWriter {
 public:
  explicit MetricsWriter(const std::string& path, bool append = false);
  void write(const StepRecord& r);
  void write(const Json& object);

 private:
  std::string path_;
  std::ofstream out_;
};

Json to_json(const StepRecord& r);

/// Replays a finished run's curve as records every log_every steps.
void emit_metrics(const TrainRun& run, std::size_t log_every, const std::string& path,
                  bool append = false);

// ---- resumable training state -----------------------------------------------

struct TrainState {
  DecoderModel model;
  TrainRun run;
};

/// 64-bit parameters, Adam moments, loss curve and counters.
void save_train_state(const DecoderModel& model, const TrainRun& run, const std::string& path);
TrainState load_train_state(const std::string& path);

}  // namespace arwkv
