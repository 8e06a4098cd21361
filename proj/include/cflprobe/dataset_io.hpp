#pragma once

// Dataset directory layout (format version 1):
//   spec.pda      the PDA in cfl-pda text form
//   meta.json     digest, generation config, sizes, symbol tables, policies
//   train.jsonl   one record per line
//   test.jsonl
// See docs/formats.md for the record fields.

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "cflprobe/datagen.hpp"
#include "cflprobe/pda_format.hpp"
#include "json.hpp"

namespace cflprobe {

inline constexpr int kDatasetFormatVersion = 1;
inline constexpr const char* kNegativePolicy =
    "1-3 random edits (sub/ins/del/swap/trunc), resampled until rejected, length within +-3";
inline constexpr const char* kOraclePolicy = "oracle losses on positives only";

using ordered_json = nlohmann::ordered_json;

inline std::string mask_bits(const std::vector<bool>& mask) {
  std::string s(mask.size(), '0');
  for (std::size_t i = 0; i < mask.size(); ++i) s[i] = mask[i] ? '1' : '0';
  return s;
}

inline std::vector<bool> parse_mask_bits(const std::string& s) {
  std::vector<bool> m(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '0' && s[i] != '1') throw std::runtime_error("dataset: bad mask bit");
    m[i] = s[i] == '1';
  }
  return m;
}

inline std::string op_to_string(const CorruptionOp& op) {
  std::string s = to_string(op.kind);
  s += '@' + std::to_string(op.position);
  if (op.kind == EditKind::Substitute || op.kind == EditKind::Insert) s += ':' + std::to_string(op.symbol);
  if (op.kind == EditKind::Truncate) s += ':' + std::to_string(op.length);
  return s;
}

inline CorruptionOp op_from_string(const std::string& s) {
  CorruptionOp op;
  const auto at = s.find('@');
  if (at == std::string::npos) throw std::runtime_error("dataset: bad corruption op " + s);
  const std::string kind = s.substr(0, at);
  if (kind == "sub") op.kind = EditKind::Substitute;
  else if (kind == "ins") op.kind = EditKind::Insert;
  else if (kind == "del") op.kind = EditKind::Delete;
  else if (kind == "swap") op.kind = EditKind::Swap;
  else if (kind == "trunc") op.kind = EditKind::Truncate;
  else throw std::runtime_error("dataset: bad corruption op " + s);
  const auto colon = s.find(':', at);
  op.position = std::stoul(s.substr(at + 1, colon == std::string::npos ? std::string::npos : colon - at - 1));
  if (colon != std::string::npos) {
    const auto v = std::stoul(s.substr(colon + 1));
    if (op.kind == EditKind::Truncate) op.length = v;
    else op.symbol = static_cast<SymbolId>(v);
  }
  return op;
}

inline std::string record_to_line(const DatasetRecord& r) {
  ordered_json j;
  j["id"] = r.id;
  j["label"] = to_string(r.label);
  j["sequence"] = r.sequence;
  j["states"] = r.trace.states;
  j["stacks"] = r.trace.stacks;
  auto masks = ordered_json::array();
  for (const auto& m : r.trace.lm_masks) masks.push_back(mask_bits(m));
  j["lm_mask"] = std::move(masks);
  j["accepted"] = r.trace.accepted;
  j["failure"] = to_string(r.trace.failure);
  if (r.trace.failure != StepError::None) j["failed_at"] = r.trace.failed_at;
  if (r.label == Label::Corrupted) {
    j["source"] = r.source;
    auto ops = ordered_json::array();
    for (const auto& op : r.corruption_ops) ops.push_back(op_to_string(op));
    j["ops"] = std::move(ops);
  }
  return j.dump();
}

inline StepError step_error_from_string(const std::string& s) {
  for (auto e : {StepError::None, StepError::NoRule, StepError::StackOverflow,
                 StepError::StackUnderflow, StepError::EpsilonLoop}) {
    if (s == to_string(e)) return e;
  }
  throw std::runtime_error("dataset: bad failure kind " + s);
}

inline DatasetRecord record_from_line(const std::string& line) {
  const auto j = nlohmann::json::parse(line);
  DatasetRecord r;
  r.id = j.at("id").get<std::uint64_t>();
  const auto label = j.at("label").get<std::string>();
  if (label != "positive" && label != "corrupted") throw std::runtime_error("dataset: bad label");
  r.label = label == "positive" ? Label::Positive : Label::Corrupted;
  r.sequence = j.at("sequence").get<Sequence>();
  r.trace.symbols = r.sequence;
  r.trace.states = j.at("states").get<std::vector<StateId>>();
  r.trace.stacks = j.at("stacks").get<std::vector<std::vector<SymbolId>>>();
  for (const auto& m : j.at("lm_mask")) r.trace.lm_masks.push_back(parse_mask_bits(m.get<std::string>()));
  r.trace.accepted = j.at("accepted").get<bool>();
  r.trace.failure = step_error_from_string(j.at("failure").get<std::string>());
  if (j.contains("failed_at")) r.trace.failed_at = j["failed_at"].get<std::size_t>();
  if (j.contains("source")) r.source = j["source"].get<std::int64_t>();
  if (j.contains("ops")) {
    for (const auto& op : j["ops"]) r.corruption_ops.push_back(op_from_string(op.get<std::string>()));
  }
  return r;
}

inline ordered_json meta_to_json(const DatasetMeta& m) {
  ordered_json j;
  j["split"] = m.split;
  j["requested"] = m.requested;
  j["positives"] = m.positives;
  j["corrupted"] = m.corrupted;
  return j;
}

/// Everything needed to rebuild models for a dataset directory.
struct DatasetInfo {
  std::string spec_name;
  std::uint64_t spec_digest = 0;
  std::size_t num_states = 0;
  std::size_t num_symbols = 0;
  std::size_t num_stack_symbols = 0;
  std::size_t max_stack = 0;
  std::size_t max_len = 0;
  std::string kind;  // "pda" or "scan"
};

inline void write_lines(const std::filesystem::path& path, const Dataset& ds) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& r : ds.records) out << record_to_line(r) << '\n';
}

/// Writes spec.pda, meta.json, train.jsonl and test.jsonl under `dir`.
inline void write_dataset_dir(const std::filesystem::path& dir, const PdaSpec& spec,
                              const DatasetSplits& splits, const std::string& kind,
                              const ordered_json& extra = ordered_json::object()) {
  std::filesystem::create_directories(dir);
  save_spec(spec, (dir / "spec.pda").string());
  const auto& m = splits.train.meta;
  ordered_json meta;
  meta["format"] = "cfl-dataset";
  meta["version"] = kDatasetFormatVersion;
  meta["kind"] = kind;
  meta["spec_name"] = m.spec_name;
  meta["spec_digest"] = hex64(m.spec_digest);
  meta["num_states"] = m.num_states;
  meta["num_symbols"] = m.num_symbols;
  meta["num_stack_symbols"] = m.num_stack_symbols;
  meta["max_stack"] = m.max_stack;
  meta["max_len"] = m.max_len;
  ordered_json gen;
  gen["n_train"] = m.config.n_train;
  gen["n_test"] = m.config.n_test;
  gen["max_len"] = m.max_len;
  gen["seed"] = m.config.seed;
  gen["enumerate"] = m.config.enumerate;
  gen["p_stop"] = m.config.p_stop;
  meta["gen_config"] = gen;
  meta["negative_policy"] = kNegativePolicy;
  meta["oracle_policy"] = kOraclePolicy;
  meta["states"] = spec.states().names();
  meta["alphabet"] = spec.alphabet().names();
  meta["stack_symbols"] = spec.stack_symbols().names();
  meta["splits"] = {meta_to_json(splits.train.meta), meta_to_json(splits.test.meta)};
  for (const auto& [k, v] : extra.items()) meta[k] = v;
  {
    std::ofstream out(dir / "meta.json", std::ios::binary);
    if (!out) throw std::runtime_error("cannot write meta.json");
    out << meta.dump(2) << '\n';
  }
  write_lines(dir / "train.jsonl", splits.train);
  write_lines(dir / "test.jsonl", splits.test);
}

inline nlohmann::json read_meta_json(const std::filesystem::path& dir) {
  std::ifstream in(dir / "meta.json", std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + (dir / "meta.json").string());
  auto j = nlohmann::json::parse(in);
  if (j.value("format", "") != "cfl-dataset" || j.value("version", 0) != kDatasetFormatVersion) {
    throw std::runtime_error("unsupported dataset format in " + dir.string());
  }
  return j;
}

inline DatasetInfo read_dataset_info(const std::filesystem::path& dir) {
  const auto j = read_meta_json(dir);
  DatasetInfo info;
  info.spec_name = j.at("spec_name").get<std::string>();
  info.spec_digest = std::stoull(j.at("spec_digest").get<std::string>(), nullptr, 16);
  info.num_states = j.at("num_states").get<std::size_t>();
  info.num_symbols = j.at("num_symbols").get<std::size_t>();
  info.num_stack_symbols = j.at("num_stack_symbols").get<std::size_t>();
  info.max_stack = j.at("max_stack").get<std::size_t>();
  info.max_len = j.at("max_len").get<std::size_t>();
  info.kind = j.value("kind", "pda");
  return info;
}

inline std::vector<DatasetRecord> read_records(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::vector<DatasetRecord> out;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty()) out.push_back(record_from_line(line));
  }
  return out;
}

}  // namespace cflprobe
