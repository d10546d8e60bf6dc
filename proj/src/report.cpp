#include "arwkv/report.hpp"

#include <algorithm>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include "arwkv/tasks.hpp"

namespace arwkv {

const std::vector<VariantSpec>& table_variants() {
  static const std::vector<VariantSpec> variants = {
      {"ARWKV", "ARWKV", GateMode::gate_free, true, false},
      {"ARWKV-M", "active MLP", GateMode::gate_free, false, false},
      {"ARWKV-G-M", "w/ gate & active MLP", GateMode::gated, false, false},
      {"ARWKV-from-larger", "ARWKV-from-larger", GateMode::gate_free, true, true},
  };
  return variants;
}

const VariantSpec* find_variant(std::string_view tag) {
  for (const auto& v : table_variants()) {
    if (v.tag == tag) return &v;
  }
  return nullptr;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& m : metrics) {
    nlohmann::json row = {{"metric", m}};
    for (const auto& c : columns) {
      auto it = values.at(m).find(c);
      row[c] = it == values.at(m).end() ? nlohmann::json(nullptr) : nlohmann::json(it->second);
    }
    rows.push_back(row);
  }
  return {{"columns", columns},
          {"labels", labels},
          {"rows", rows},
          {"checkpoint_hashes", checkpoint_hashes},
          {"dataset_seed", dataset_seed},
          {"dataset_hash", dataset_hash}};
}

std::string EvalReport::to_text() const {
  std::vector<std::vector<std::string>> cells;
  std::vector<std::string> header = {"metric"};
  header.insert(header.end(), labels.begin(), labels.end());
  cells.push_back(header);
  for (const auto& m : metrics) {
    std::vector<std::string> row = {m};
    for (const auto& c : columns) {
      auto it = values.at(m).find(c);
      if (it == values.at(m).end()) {
        row.push_back("-");
        continue;
      }
      std::ostringstream os;
      if (m == "tokens_seen") {
        os << static_cast<std::uint64_t>(it->second);
      } else {
        os << std::fixed << std::setprecision(4) << it->second;
      }
      row.push_back(os.str());
    }
    cells.push_back(row);
  }
  std::vector<std::size_t> width(header.size(), 0);
  for (const auto& row : cells) {
    for (std::size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], row[i].size());
  }
  std::ostringstream os;
  for (const auto& row : cells) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i == 0) {
        os << std::left << std::setw(static_cast<int>(width[i])) << row[i];
      } else {
        os << "  " << std::right << std::setw(static_cast<int>(width[i])) << row[i];
      }
    }
    os << '\n';
  }
  os << "dataset seed " << dataset_seed;
  if (!dataset_hash.empty()) os << ", corpus " << dataset_hash;
  os << '\n';
  for (const auto& c : columns) {
    auto it = checkpoint_hashes.find(c);
    if (it != checkpoint_hashes.end()) os << c << ": " << it->second << '\n';
  }
  return os.str();
}

EvalReport build_report(const DecoderModel* teacher, const std::string& teacher_hash,
                        const std::vector<ReportInput>& runs,
                        std::span<const std::int32_t> heldout, const ReportSettings& settings) {
  if (runs.empty()) throw std::invalid_argument("build_report: no runs");
  EvalReport r;
  r.dataset_seed = settings.dataset_seed;
  r.dataset_hash = settings.dataset_hash;
  r.metrics = {"heldout_ppl"};
  if (teacher) {
    r.metrics.push_back("kl_to_teacher");
    r.metrics.push_back("top1_agreement");
  }
  r.metrics.push_back("tokens_seen");
  for (const auto& m : r.metrics) r.values[m];

  if (teacher) {
    r.columns.push_back("teacher");
    r.labels.push_back("teacher");
    r.checkpoint_hashes["teacher"] = teacher_hash;
    r.values["heldout_ppl"]["teacher"] =
        eval_perplexity(*teacher, heldout, settings.seq_len, settings.max_windows);
    r.values["kl_to_teacher"]["teacher"] = 0.0;
    r.values["top1_agreement"]["teacher"] = 1.0;
  }
  for (const auto& run : runs) {
    if (!run.model) throw std::invalid_argument("build_report: missing model for " + run.variant);
    if (std::find(r.columns.begin(), r.columns.end(), run.variant) != r.columns.end()) {
      throw std::invalid_argument("build_report: duplicate column " + run.variant);
    }
    if (teacher && teacher->config.vocab_size != run.model->config.vocab_size) {
      throw std::invalid_argument("build_report: " + run.variant + " vocabulary differs");
    }
    const VariantSpec* spec = find_variant(run.variant);
    r.columns.push_back(run.variant);
    r.labels.push_back(spec ? spec->label : run.variant);
    r.checkpoint_hashes[run.variant] = run.checkpoint_hash;
    r.values["heldout_ppl"][run.variant] =
        eval_perplexity(*run.model, heldout, settings.seq_len, settings.max_windows);
    if (teacher) {
      const auto cmp =
          compare_to_teacher(*teacher, *run.model, heldout, settings.seq_len, settings.max_windows);
      r.values["kl_to_teacher"][run.variant] = cmp.kl;
      r.values["top1_agreement"][run.variant] = cmp.agreement;
    }
    r.values["tokens_seen"][run.variant] = static_cast<double>(run.tokens_seen);
  }
  return r;
}

}  // namespace arwkv
