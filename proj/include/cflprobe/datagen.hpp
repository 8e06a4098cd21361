#pragma once

// Sampling of accepted sequences, corruption into rejected ones, and
// trace-annotated dataset construction.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "cflprobe/hash.hpp"
#include "cflprobe/pda.hpp"
#include "cflprobe/pda_format.hpp"

namespace cflprobe {

using Rng = std::mt19937_64;

inline constexpr double kDefaultStopProbability = 0.25;
inline constexpr std::size_t kMaxLengthDrift = 3;

class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GenConfig {
  std::size_t n_train = 50'000;
  std::size_t n_test = 50'000;
  std::size_t max_len = 0;  // 0 = the spec's default budget
  std::uint64_t seed = 0;
  bool enumerate = false;
  double p_stop = kDefaultStopProbability;
  std::size_t threads = 1;

  void validate() const {
    if (n_train == 0 || n_test == 0) throw GenerationError("gen config: counts must be > 0");
    if (max_len != 0 && max_len < 2) throw GenerationError("gen config: max_len must be >= 2");
    if (!(p_stop > 0.0 && p_stop <= 1.0)) throw GenerationError("gen config: p_stop in (0,1]");
  }
};

inline std::size_t effective_max_len(const PdaSpec& spec, const GenConfig& cfg) {
  return cfg.max_len ? cfg.max_len : spec.default_max_len();
}

enum class Label { Positive, Corrupted };

inline const char* to_string(Label l) { return l == Label::Positive ? "positive" : "corrupted"; }

enum class EditKind { Substitute, Insert, Delete, Swap, Truncate };

inline const char* to_string(EditKind k) {
  switch (k) {
    case EditKind::Substitute: return "sub";
    case EditKind::Insert: return "ins";
    case EditKind::Delete: return "del";
    case EditKind::Swap: return "swap";
    case EditKind::Truncate: return "trunc";
  }
  return "?";
}

/// One applied edit. `position` is the index in the sequence at the time
/// of the edit; `symbol` is the written symbol (sub/ins) and `length` the
/// new length (trunc).
struct CorruptionOp {
  EditKind kind = EditKind::Substitute;
  std::size_t position = 0;
  SymbolId symbol = 0;
  std::size_t length = 0;

  bool operator==(const CorruptionOp&) const = default;
};

struct DatasetRecord {
  std::uint64_t id = 0;
  Sequence sequence;
  OracleTrace trace;
  Label label = Label::Positive;
  std::vector<CorruptionOp> corruption_ops;
  std::int64_t source = -1;  // id of the positive a corrupted record came from
};

struct DatasetMeta {
  std::string spec_name;
  std::uint64_t spec_digest = 0;
  std::string split;
  GenConfig config;
  std::size_t num_states = 0;
  std::size_t num_symbols = 0;
  std::size_t num_stack_symbols = 0;
  std::size_t max_stack = 0;
  std::size_t max_len = 0;
  std::size_t requested = 0;
  std::size_t positives = 0;
  std::size_t corrupted = 0;
};

struct Dataset {
  DatasetMeta meta;
  std::vector<DatasetRecord> records;
};

/// Replays one edit; used both when corrupting and when checking records.
inline bool apply_edit(Sequence& s, const CorruptionOp& op) {
  switch (op.kind) {
    case EditKind::Substitute:
      if (op.position >= s.size()) return false;
      s[op.position] = op.symbol;
      return true;
    case EditKind::Insert:
      if (op.position > s.size()) return false;
      s.insert(s.begin() + static_cast<std::ptrdiff_t>(op.position), op.symbol);
      return true;
    case EditKind::Delete:
      if (op.position >= s.size()) return false;
      s.erase(s.begin() + static_cast<std::ptrdiff_t>(op.position));
      return true;
    case EditKind::Swap:
      if (op.position + 1 >= s.size()) return false;
      std::swap(s[op.position], s[op.position + 1]);
      return true;
    case EditKind::Truncate:
      if (op.length > s.size()) return false;
      s.resize(op.length);
      return true;
  }
  return false;
}

namespace detail {

inline std::size_t uniform_index(Rng& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

}  // namespace detail

/// Random walk over mask-valid symbols that stops with probability p_stop
/// whenever the prefix is accepted. Never returns the empty string.
inline Sequence sample_accepted(const PdaSpec& spec, std::size_t max_len, Rng& rng,
                                CompletionOracle& oracle, double p_stop = kDefaultStopProbability,
                                std::size_t retries = 100) {
  std::bernoulli_distribution stop(p_stop);
  for (std::size_t attempt = 0; attempt < retries; ++attempt) {
    PdaConfiguration c = initial_configuration(spec);
    Sequence seq;
    for (;;) {
      const bool accepting = !seq.empty() && is_accepting(spec, c);
      const auto mask = oracle.valid_next(c, max_len);
      std::vector<SymbolId> choices;
      for (SymbolId x = 0; x < mask.size(); ++x) {
        if (mask[x]) choices.push_back(x);
      }
      if (accepting && (choices.empty() || stop(rng))) return seq;
      if (choices.empty()) break;
      const SymbolId x = choices[detail::uniform_index(rng, choices.size())];
      c = step(spec, c, x).config;
      seq.push_back(x);
    }
  }
  throw GenerationError("sample_accepted: retry budget exhausted for " + spec.name());
}

inline Sequence sample_accepted(const PdaSpec& spec, std::size_t max_len, Rng& rng) {
  CompletionOracle oracle(spec);
  return sample_accepted(spec, max_len, rng, oracle);
}

struct Corruption {
  Sequence sequence;
  std::vector<CorruptionOp> ops;
};

/// Applies 1–3 random edits until the result is rejected; the result has
/// length ≥ 1 and within ±3 of the input.
inline Corruption corrupt(const PdaSpec& spec, const Sequence& positive, Rng& rng,
                          std::size_t retries = 1000) {
  const std::size_t sigma = spec.num_symbols();
  for (std::size_t attempt = 0; attempt < retries; ++attempt) {
    Corruption out{positive, {}};
    const std::size_t n_edits = 1 + detail::uniform_index(rng, 3);
    for (std::size_t e = 0; e < n_edits; ++e) {
      auto& s = out.sequence;
      CorruptionOp op;
      op.kind = static_cast<EditKind>(detail::uniform_index(rng, 5));
      switch (op.kind) {
        case EditKind::Substitute:
          if (s.empty() || sigma < 2) continue;
          op.position = detail::uniform_index(rng, s.size());
          op.symbol = static_cast<SymbolId>((s[op.position] + 1 + detail::uniform_index(rng, sigma - 1)) % sigma);
          break;
        case EditKind::Insert:
          op.position = detail::uniform_index(rng, s.size() + 1);
          op.symbol = static_cast<SymbolId>(detail::uniform_index(rng, sigma));
          break;
        case EditKind::Delete:
          if (s.size() < 2) continue;
          op.position = detail::uniform_index(rng, s.size());
          break;
        case EditKind::Swap:
          if (s.size() < 2) continue;
          op.position = detail::uniform_index(rng, s.size() - 1);
          if (s[op.position] == s[op.position + 1]) continue;
          break;
        case EditKind::Truncate: {
          if (s.size() < 2) continue;
          const std::size_t lo = s.size() > kMaxLengthDrift ? s.size() - kMaxLengthDrift : 1;
          op.length = lo + detail::uniform_index(rng, s.size() - lo);
          break;
        }
      }
      apply_edit(s, op);
      out.ops.push_back(op);
    }
    if (out.ops.empty() || out.sequence.empty()) continue;
    const auto a = static_cast<std::ptrdiff_t>(out.sequence.size());
    const auto b = static_cast<std::ptrdiff_t>(positive.size());
    if (static_cast<std::size_t>(std::abs(a - b)) > kMaxLengthDrift) continue;
    if (!accepts(spec, out.sequence)) return out;
  }
  throw GenerationError("corrupt: retry budget exhausted for " + spec.name());
}

/// Runs fn(index, oracle) for index in [0, n) over `threads` workers.
/// Each worker owns its oracle; results must be written by index.
inline void parallel_for(const PdaSpec& spec, std::size_t n, std::size_t threads,
                         const std::function<void(std::size_t, CompletionOracle&)>& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    CompletionOracle oracle(spec);
    for (std::size_t i = 0; i < n; ++i) fn(i, oracle);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (std::size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      try {
        CompletionOracle oracle(spec);
        for (std::size_t i = w; i < n; i += threads) fn(i, oracle);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

/// Stable split key of a sequence (independent of any seed).
inline std::uint64_t sequence_hash(const Sequence& s) {
  return fnv1a_values<SymbolId>(std::span<const SymbolId>(s.data(), s.size()));
}

inline DatasetMeta make_meta(const PdaSpec& spec, const GenConfig& cfg, std::string split,
                             std::size_t requested) {
  DatasetMeta m;
  m.spec_name = spec.name();
  m.spec_digest = spec_digest(spec);
  m.split = std::move(split);
  m.config = cfg;
  m.num_states = spec.num_states();
  m.num_symbols = spec.num_symbols();
  m.num_stack_symbols = spec.num_stack_symbols();
  m.max_stack = spec.max_stack();
  m.max_len = effective_max_len(spec, cfg);
  m.requested = requested;
  return m;
}

/// Runs the PDA over every record and fills ids, traces and counts.
/// Positives are at even ids and their corruptions at the following odd id.
inline Dataset annotate_pairs(const PdaSpec& spec, DatasetMeta meta,
                              const std::vector<Sequence>& positives, std::uint64_t stream,
                              bool with_corruptions) {
  const std::size_t budget = meta.max_len;
  const std::size_t per = with_corruptions ? 2 : 1;
  Dataset ds;
  ds.meta = std::move(meta);
  ds.records.resize(positives.size() * per);
  parallel_for(spec, positives.size(), ds.meta.config.threads,
               [&](std::size_t i, CompletionOracle& oracle) {
                 auto& pos = ds.records[i * per];
                 pos.id = i * per;
                 pos.sequence = positives[i];
                 pos.label = Label::Positive;
                 pos.trace = run(spec, pos.sequence, budget, oracle);
                 if (!pos.trace.accepted) throw GenerationError("annotate: positive rejected");
                 if (!with_corruptions) return;
                 Rng rng(derive_seed(ds.meta.config.seed, stream + 100, i));
                 auto cor = corrupt(spec, pos.sequence, rng);
                 auto& neg = ds.records[i * per + 1];
                 neg.id = i * per + 1;
                 neg.sequence = std::move(cor.sequence);
                 neg.corruption_ops = std::move(cor.ops);
                 neg.label = Label::Corrupted;
                 neg.source = static_cast<std::int64_t>(pos.id);
                 neg.trace = run(spec, neg.sequence, std::max(budget, neg.sequence.size()), oracle);
               });
  ds.meta.positives = positives.size();
  ds.meta.corrupted = with_corruptions ? positives.size() : 0;
  return ds;
}

struct DatasetSplits {
  Dataset train;
  Dataset test;
};

/// Sampled (or enumerated) positives plus one corruption each, per split.
/// Deterministic in (spec, config), independent of the thread count.
inline DatasetSplits build_dataset(const PdaSpec& spec, const GenConfig& cfg) {
  cfg.validate();
  const std::size_t max_len = effective_max_len(spec, cfg);
  std::vector<Sequence> train_pos, test_pos;
  if (cfg.enumerate) {
    auto all = enumerate_accepted(spec, max_len);
    for (auto& s : all) ((sequence_hash(s) & 1) == 0 ? train_pos : test_pos).push_back(std::move(s));
    auto take = [&](std::vector<Sequence>& v, std::size_t n, std::uint64_t stream) {
      Rng rng(derive_seed(cfg.seed, stream, 0));
      std::shuffle(v.begin(), v.end(), rng);
      if (v.size() > n) v.resize(n);
    };
    take(train_pos, cfg.n_train, 10);
    take(test_pos, cfg.n_test, 11);
  } else {
    auto sample = [&](std::vector<Sequence>& v, std::size_t n, std::uint64_t stream) {
      v.resize(n);
      parallel_for(spec, n, cfg.threads, [&](std::size_t i, CompletionOracle& oracle) {
        Rng rng(derive_seed(cfg.seed, stream, i));
        v[i] = sample_accepted(spec, max_len, rng, oracle, cfg.p_stop);
      });
    };
    sample(train_pos, cfg.n_train, 0);
    sample(test_pos, cfg.n_test, 1);
  }
  DatasetSplits out;
  out.train = annotate_pairs(spec, make_meta(spec, cfg, "train", cfg.n_train), train_pos, 0, true);
  out.test = annotate_pairs(spec, make_meta(spec, cfg, "test", cfg.n_test), test_pos, 1, true);
  return out;
}

}  // namespace cflprobe
