#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "arwkv/model.hpp"

namespace arwkv {

/// One stage-2 ablation setting of the comparison grid.
struct VariantSpec {
  std::string tag;
  std::string label;
  GateMode gate_mode = GateMode::gate_free;
  bool freeze_mlp = true;
  bool larger_teacher = false;
};

/// ARWKV, ARWKV-M, ARWKV-G-M and ARWKV-from-larger, in column order.
const std::vector<VariantSpec>& table_variants();
/// nullptr for tags outside the grid.
const VariantSpec* find_variant(std::string_view tag);

struct ReportInput {
  std::string variant;
  const DecoderModel* model = nullptr;
  std::string checkpoint_hash;
  std::size_t tokens_seen = 0;
};

struct ReportSettings {
  std::size_t seq_len = 64;
  std::size_t max_windows = 0;
  std::uint64_t dataset_seed = 0;
  std::string dataset_hash;
};

struct EvalReport {
  std::vector<std::string> columns;  // variant tags
  std::vector<std::string> labels;   // display names
  std::vector<std::string> metrics;  // row names
  std::map<std::string, std::map<std::string, double>> values;  // metric -> column -> value
  std::map<std::string, std::string> checkpoint_hashes;        // column -> hash
  std::uint64_t dataset_seed = 0;
  std::string dataset_hash;

  nlohmann::json to_json() const;
  /// Aligned plain-text table, one row per metric.
  std::string to_text() const;
};

/// Evaluates each run on the held-out corpus. With a teacher, adds a leading
/// teacher column and the KL / top-1 agreement rows.
EvalReport build_report(const DecoderModel* teacher, const std::string& teacher_hash,
                        const std::vector<ReportInput>& runs,
                        std::span<const std::int32_t> heldout, const ReportSettings& settings);

}  // namespace arwkv
