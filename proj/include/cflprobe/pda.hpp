#pragma once

// Bounded deterministic pushdown automata: definition, validation,
// execution, oracle traces and LM masks.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace cflprobe {

using SymbolId = std::uint16_t;
using StateId = std::uint16_t;
using Sequence = std::vector<SymbolId>;

/// Lookahead value meaning "no further input symbol".
inline constexpr SymbolId kEndOfInput = std::numeric_limits<SymbolId>::max();

/// Names used for the two reserved stack symbols.
inline constexpr std::string_view kEpsilonName = "ε";
inline constexpr std::string_view kBottomName = "I";

class PdaError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Ordered table of display strings; the index is the symbol id.
class SymbolTable {
 public:
  SymbolTable() = default;
  explicit SymbolTable(std::vector<std::string> names) : names_(std::move(names)) {
    for (std::size_t i = 0; i < names_.size(); ++i) {
      if (names_[i].empty()) throw PdaError("symbol table: empty symbol name");
      if (!index_.emplace(names_[i], static_cast<SymbolId>(i)).second) {
        throw PdaError("symbol table: duplicate symbol '" + names_[i] + "'");
      }
    }
    if (names_.size() >= kEndOfInput) throw PdaError("symbol table: too many symbols");
  }

  std::size_t size() const { return names_.size(); }
  const std::string& name(SymbolId id) const { return names_.at(id); }
  const std::vector<std::string>& names() const { return names_; }

  std::optional<SymbolId> find(std::string_view text) const {
    auto it = index_.find(std::string(text));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  SymbolId id(std::string_view text) const {
    auto found = find(text);
    if (!found) throw PdaError("unknown symbol '" + std::string(text) + "'");
    return *found;
  }

  bool operator==(const SymbolTable& other) const { return names_ == other.names_; }

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, SymbolId> index_;
};

/// One transition. `pop` is the required top segment of the stack
/// (bottom→top), removed when the rule fires; empty means "do not pop".
/// `push` is appended (bottom→top); empty means "push nothing".
/// `lookahead` restricts the rule to the listed next input symbols
/// (kEndOfInput allowed); empty means unrestricted.
struct TransitionRule {
  StateId from = 0;
  std::optional<SymbolId> input;  // nullopt = ε-input
  std::vector<SymbolId> pop;
  StateId to = 0;
  std::vector<SymbolId> push;
  std::vector<SymbolId> lookahead;

  bool operator==(const TransitionRule&) const = default;
};

/// Plain description of a PDA, as written by builders and parsed from files.
struct PdaDefinition {
  std::string name;
  std::vector<std::string> states;
  std::vector<std::string> alphabet;
  std::vector<std::string> stack_symbols;  // must contain "ε" and the bottom symbol
  std::vector<TransitionRule> rules;
  StateId initial_state = 0;
  std::string initial_stack{kBottomName};
  std::vector<StateId> accepting;
  std::size_t max_stack = 1;
  std::size_t default_max_len = 0;  // 0 = unset; used as the LM-mask budget
  // Working stack (above I, bottom→top) required for acceptance; empty by
  // default. SCAN accepts with [C].
  std::vector<SymbolId> accept_stack;
};

/// Validated, immutable PDA with a rule index.
class PdaSpec {
 public:
  explicit PdaSpec(PdaDefinition def)
      : def_(std::move(def)),
        alphabet_(def_.alphabet),
        stack_(def_.stack_symbols),
        states_(def_.states) {
    validate();
    epsilon_ = stack_.id(kEpsilonName);
    bottom_ = stack_.id(def_.initial_stack);
    accepting_.assign(def_.states.size(), false);
    for (StateId q : def_.accepting) accepting_[q] = true;
    by_input_.assign(def_.states.size() * (alphabet_.size() + 1), {});
    for (std::size_t r = 0; r < def_.rules.size(); ++r) {
      const auto& rule = def_.rules[r];
      by_input_[slot(rule.from, rule.input)].push_back(r);
      if (!rule.lookahead.empty()) uses_lookahead_ = true;
    }
    if (def_.default_max_len == 0) def_.default_max_len = 2 * def_.max_stack + 10;
    check_deterministic();
  }

  const PdaDefinition& definition() const { return def_; }
  const std::string& name() const { return def_.name; }
  const SymbolTable& alphabet() const { return alphabet_; }
  const SymbolTable& stack_symbols() const { return stack_; }
  const SymbolTable& states() const { return states_; }
  const std::vector<TransitionRule>& rules() const { return def_.rules; }

  std::size_t num_states() const { return def_.states.size(); }
  std::size_t num_symbols() const { return alphabet_.size(); }
  std::size_t num_stack_symbols() const { return stack_.size(); }
  std::size_t max_stack() const { return def_.max_stack; }
  std::size_t default_max_len() const { return def_.default_max_len; }
  StateId initial_state() const { return def_.initial_state; }
  SymbolId bottom() const { return bottom_; }
  SymbolId epsilon() const { return epsilon_; }
  bool is_accepting_state(StateId q) const { return accepting_[q]; }
  bool uses_lookahead() const { return uses_lookahead_; }
  const std::vector<SymbolId>& accept_stack() const { return def_.accept_stack; }

  /// Indices of rules leaving `state` on `input` (nullopt = ε-input).
  const std::vector<std::size_t>& rules_for(StateId state, std::optional<SymbolId> input) const {
    return by_input_[slot(state, input)];
  }

 private:
  std::size_t slot(StateId state, std::optional<SymbolId> input) const {
    return state * (alphabet_.size() + 1) + (input ? *input + 1 : 0);
  }

  void validate() const {
    if (def_.states.empty()) throw PdaError(def_.name + ": no states");
    if (def_.initial_state >= def_.states.size()) throw PdaError(def_.name + ": q0 not in Q");
    if (def_.max_stack == 0) throw PdaError(def_.name + ": max stack must be positive");
    if (!stack_.find(kEpsilonName)) throw PdaError(def_.name + ": stack symbols lack ε");
    if (!stack_.find(def_.initial_stack)) throw PdaError(def_.name + ": I not in S");
    for (StateId q : def_.accepting) {
      if (q >= def_.states.size()) throw PdaError(def_.name + ": F not a subset of Q");
    }
    const auto eps = *stack_.find(kEpsilonName);
    for (const auto& rule : def_.rules) {
      if (rule.from >= def_.states.size() || rule.to >= def_.states.size()) {
        throw PdaError(def_.name + ": rule references an undeclared state");
      }
      if (rule.input && *rule.input >= alphabet_.size()) {
        throw PdaError(def_.name + ": rule references an undeclared input symbol");
      }
      for (SymbolId s : rule.pop) {
        if (s >= stack_.size() || s == eps) throw PdaError(def_.name + ": bad pop symbol");
      }
      for (SymbolId s : rule.push) {
        if (s >= stack_.size() || s == eps) throw PdaError(def_.name + ": bad push symbol");
      }
      for (SymbolId s : rule.lookahead) {
        if (s != kEndOfInput && s >= alphabet_.size()) {
          throw PdaError(def_.name + ": bad lookahead symbol");
        }
      }
    }
    for (SymbolId s : def_.accept_stack) {
      if (s >= stack_.size() || s == eps) throw PdaError(def_.name + ": bad accepting stack symbol");
    }
    if (def_.accept_stack.size() > def_.max_stack) throw PdaError(def_.name + ": accepting stack exceeds m");
  }

  static bool suffix_related(const std::vector<SymbolId>& a, const std::vector<SymbolId>& b) {
    const auto& shorter = a.size() <= b.size() ? a : b;
    const auto& longer = a.size() <= b.size() ? b : a;
    return std::equal(shorter.rbegin(), shorter.rend(), longer.rbegin());
  }

  static bool lookahead_overlaps(const std::vector<SymbolId>& a, const std::vector<SymbolId>& b) {
    if (a.empty() || b.empty()) return true;
    return std::any_of(a.begin(), a.end(), [&](SymbolId s) {
      return std::find(b.begin(), b.end(), s) != b.end();
    });
  }

  // Two rules can fire on the same configuration when they leave the same
  // state, read the same input (or one of them is an ε-rule), their pop
  // patterns can both match one stack and their lookahead sets intersect.
  void check_deterministic() const {
    const auto& rules = def_.rules;
    for (std::size_t a = 0; a < rules.size(); ++a) {
      for (std::size_t b = a + 1; b < rules.size(); ++b) {
        const auto& ra = rules[a];
        const auto& rb = rules[b];
        if (ra.from != rb.from) continue;
        const bool inputs_clash = ra.input == rb.input || !ra.input || !rb.input;
        if (inputs_clash && suffix_related(ra.pop, rb.pop) &&
            lookahead_overlaps(ra.lookahead, rb.lookahead)) {
          throw PdaError(def_.name + ": nondeterministic rules #" + std::to_string(a) +
                         " and #" + std::to_string(b));
        }
      }
    }
  }

  PdaDefinition def_;
  SymbolTable alphabet_;
  SymbolTable stack_;
  SymbolTable states_;
  SymbolId epsilon_ = 0;
  SymbolId bottom_ = 0;
  std::vector<bool> accepting_;
  std::vector<std::vector<std::size_t>> by_input_;
  bool uses_lookahead_ = false;
};

/// Execution snapshot. `stack` holds the bottom symbol I followed by the
/// working symbols (bottom→top). For specs with lookahead rules, the most
/// recently read symbol waits in `pending` until the next symbol (or the
/// end of input) is known.
struct PdaConfiguration {
  StateId state = 0;
  std::vector<SymbolId> stack;
  std::size_t consumed = 0;
  std::optional<SymbolId> pending;

  std::size_t depth() const { return stack.empty() ? 0 : stack.size() - 1; }
  bool operator==(const PdaConfiguration&) const = default;
};

enum class StepError { None, NoRule, StackOverflow, StackUnderflow, EpsilonLoop };

inline const char* to_string(StepError e) {
  switch (e) {
    case StepError::None: return "ok";
    case StepError::NoRule: return "no-rule";
    case StepError::StackOverflow: return "stack-overflow";
    case StepError::StackUnderflow: return "stack-underflow";
    case StepError::EpsilonLoop: return "epsilon-loop";
  }
  return "?";
}

struct StepResult {
  StepError error = StepError::None;
  PdaConfiguration config;

  bool ok() const { return error == StepError::None; }
};

inline PdaConfiguration initial_configuration(const PdaSpec& spec) {
  PdaConfiguration c;
  c.state = spec.initial_state();
  c.stack = {spec.bottom()};
  return c;
}

namespace detail {

inline bool pattern_matches(const std::vector<SymbolId>& stack, const std::vector<SymbolId>& pop) {
  if (pop.size() > stack.size()) return false;
  return std::equal(pop.rbegin(), pop.rend(), stack.rbegin());
}

inline bool lookahead_matches(const TransitionRule& rule, SymbolId lookahead) {
  if (rule.lookahead.empty()) return true;
  return std::find(rule.lookahead.begin(), rule.lookahead.end(), lookahead) != rule.lookahead.end();
}

// Returns the matching rule index, or the failure classification.
inline std::pair<std::optional<std::size_t>, StepError> find_rule(
    const PdaSpec& spec, const PdaConfiguration& c, std::optional<SymbolId> input,
    SymbolId lookahead) {
  bool would_underflow = false;
  for (std::size_t r : spec.rules_for(c.state, input)) {
    const auto& rule = spec.rules()[r];
    if (!lookahead_matches(rule, lookahead)) continue;
    if (pattern_matches(c.stack, rule.pop)) return {r, StepError::None};
    if (rule.pop.size() > c.depth()) would_underflow = true;
  }
  return {std::nullopt, would_underflow ? StepError::StackUnderflow : StepError::NoRule};
}

inline StepError fire(const PdaSpec& spec, PdaConfiguration& c, const TransitionRule& rule) {
  // A rule may pop I only to put it straight back.
  c.stack.resize(c.stack.size() - rule.pop.size());
  c.stack.insert(c.stack.end(), rule.push.begin(), rule.push.end());
  if (c.stack.empty() || c.stack.front() != spec.bottom()) return StepError::StackUnderflow;
  if (c.depth() > spec.max_stack()) return StepError::StackOverflow;
  c.state = rule.to;
  return StepError::None;
}

// Reads one input symbol with a known lookahead, then applies ε-rules to
// quiescence.
inline StepResult apply(const PdaSpec& spec, PdaConfiguration c, SymbolId input,
                        SymbolId lookahead) {
  auto [rule, err] = find_rule(spec, c, input, lookahead);
  if (!rule) return {err, std::move(c)};
  if (auto e = fire(spec, c, spec.rules()[*rule]); e != StepError::None) return {e, std::move(c)};
  const std::size_t limit = 4 * (spec.max_stack() + 1) * (spec.num_states() + 1);
  for (std::size_t n = 0;; ++n) {
    auto [eps_rule, eps_err] = find_rule(spec, c, std::nullopt, lookahead);
    if (!eps_rule) break;
    if (n >= limit) return {StepError::EpsilonLoop, std::move(c)};
    if (auto e = fire(spec, c, spec.rules()[*eps_rule]); e != StepError::None) {
      return {e, std::move(c)};
    }
  }
  return {StepError::None, std::move(c)};
}

}  // namespace detail

/// Consumes one input symbol. For lookahead specs the symbol becomes
/// pending and the previously pending one is resolved with `input` as its
/// lookahead.
inline StepResult step(const PdaSpec& spec, const PdaConfiguration& config, SymbolId input) {
  if (input >= spec.num_symbols()) throw PdaError("step: symbol id out of range");
  if (!spec.uses_lookahead()) {
    auto r = detail::apply(spec, config, input, kEndOfInput);
    r.config.consumed = config.consumed + 1;
    return r;
  }
  StepResult r{StepError::None, config};
  if (config.pending) {
    r = detail::apply(spec, config, *config.pending, input);
    if (!r.ok()) return r;
  }
  r.config.pending = input;
  r.config.consumed = config.consumed + 1;
  return r;
}

/// Resolves a pending symbol against the end of input.
inline StepResult finish(const PdaSpec& spec, const PdaConfiguration& config) {
  if (!config.pending) return {StepError::None, config};
  auto r = detail::apply(spec, config, *config.pending, kEndOfInput);
  r.config.pending.reset();
  r.config.consumed = config.consumed;
  return r;
}

namespace detail {

inline bool settled_accepting(const PdaSpec& spec, const PdaConfiguration& c) {
  const auto& want = spec.accept_stack();
  return spec.is_accepting_state(c.state) && c.stack.size() == want.size() + 1 &&
         c.stack.front() == spec.bottom() && std::equal(want.begin(), want.end(), c.stack.begin() + 1);
}

}  // namespace detail

/// Final state in F and the working stack reduced to the spec's accepting
/// content (empty unless the spec says otherwise).
inline bool is_accepting(const PdaSpec& spec, const PdaConfiguration& config) {
  auto r = finish(spec, config);
  return r.ok() && detail::settled_accepting(spec, r.config);
}

/// Shortest-completion oracle over configurations. Caches the minimum
/// number of further symbols needed to reach acceptance; not thread-safe,
/// so each thread owns its own instance.
class CompletionOracle {
 public:
  static constexpr std::size_t kUnreachable = std::numeric_limits<std::size_t>::max();

  explicit CompletionOracle(const PdaSpec& spec) : spec_(&spec) {}

  const PdaSpec& spec() const { return *spec_; }

  /// Minimum number of symbols that extend `config` to an accepted string.
  std::size_t min_completion(const PdaConfiguration& config) {
    const std::string key = make_key(config);
    if (auto it = cache_.find(key); it != cache_.end()) return it->second;
    const std::size_t d = search(config);
    cache_.emplace(key, d);
    return d;
  }

  /// Mask over Σ: x is set iff step(config, x) succeeds and the result can
  /// still be completed to an accepted string of total length ≤ budget.
  std::vector<bool> valid_next(const PdaConfiguration& config, std::size_t budget) {
    std::vector<bool> mask(spec_->num_symbols(), false);
    if (config.consumed >= budget) return mask;
    const std::size_t remaining = budget - config.consumed - 1;
    for (SymbolId x = 0; x < spec_->num_symbols(); ++x) {
      auto r = step(*spec_, config, x);
      if (!r.ok()) continue;
      const std::size_t d = min_completion(r.config);
      mask[x] = d != kUnreachable && d <= remaining;
    }
    return mask;
  }

 private:
  static std::string make_key(const PdaConfiguration& c) {
    std::string key;
    key.reserve(2 * (c.stack.size() + 2));
    auto put = [&key](std::uint32_t v) {
      key.push_back(static_cast<char>(v & 0xff));
      key.push_back(static_cast<char>((v >> 8) & 0xff));
    };
    put(c.state);
    put(c.pending ? *c.pending : kEndOfInput);
    for (SymbolId s : c.stack) put(s);
    return key;
  }

  // Breadth-first search over the (finite, stack-bounded) configuration
  // graph; every distance found on the way is a valid upper bound only for
  // the root, so only the root result is cached.
  std::size_t search(const PdaConfiguration& root) {
    std::unordered_map<std::string, bool> seen;
    std::deque<std::pair<PdaConfiguration, std::size_t>> frontier;
    PdaConfiguration start = root;
    start.consumed = 0;
    frontier.emplace_back(start, 0);
    seen.emplace(make_key(start), true);
    while (!frontier.empty()) {
      auto [c, dist] = std::move(frontier.front());
      frontier.pop_front();
      if (is_accepting(*spec_, c)) return dist;
      for (SymbolId x = 0; x < spec_->num_symbols(); ++x) {
        auto r = step(*spec_, c, x);
        if (!r.ok()) continue;
        r.config.consumed = 0;
        if (seen.emplace(make_key(r.config), true).second) frontier.emplace_back(r.config, dist + 1);
      }
    }
    return kUnreachable;
  }

  const PdaSpec* spec_;
  std::unordered_map<std::string, std::size_t> cache_;
};

inline std::vector<bool> valid_next_symbols(const PdaSpec& spec, const PdaConfiguration& config,
                                            std::size_t budget) {
  CompletionOracle oracle(spec);
  return oracle.valid_next(config, budget);
}

inline std::vector<bool> valid_next_symbols(const PdaSpec& spec, const PdaConfiguration& config) {
  return valid_next_symbols(spec, config, spec.default_max_len());
}

/// Per-step supervision produced by running the PDA over a sequence.
/// Entry t describes the configuration after consuming symbols[t].
struct OracleTrace {
  Sequence symbols;
  std::vector<StateId> states;
  std::vector<std::vector<SymbolId>> stacks;  // each exactly m entries, ε above the top
  std::vector<std::vector<bool>> lm_masks;
  bool accepted = false;
  StepError failure = StepError::None;
  std::size_t failed_at = 0;  // index of the failing symbol when failure != None

  std::size_t length() const { return states.size(); }
};

/// Working stack (without I) padded with ε to exactly m slots.
inline std::vector<SymbolId> padded_stack(const PdaSpec& spec, const PdaConfiguration& c) {
  std::vector<SymbolId> slots(spec.max_stack(), spec.epsilon());
  for (std::size_t j = 1; j < c.stack.size() && j - 1 < slots.size(); ++j) slots[j - 1] = c.stack[j];
  return slots;
}

namespace detail {

inline OracleTrace run_impl(const PdaSpec& spec, const Sequence& sequence, std::size_t budget,
                            CompletionOracle* oracle) {
  OracleTrace trace;
  trace.symbols = sequence;
  PdaConfiguration settled = initial_configuration(spec);
  PdaConfiguration reading = settled;  // configuration in step()/valid_next form
  for (std::size_t t = 0; t < sequence.size(); ++t) {
    const SymbolId x = sequence[t];
    if (x >= spec.num_symbols()) throw PdaError("run: symbol id out of range");
    StepResult now;
    if (spec.uses_lookahead()) {
      const SymbolId la = t + 1 < sequence.size() ? sequence[t + 1] : kEndOfInput;
      now = detail::apply(spec, settled, x, la);
      now.config.consumed = t + 1;
      if (now.ok()) {
        reading = settled;
        reading.pending = x;
        reading.consumed = t + 1;
      }
    } else {
      now = step(spec, settled, x);
      reading = now.config;
    }
    if (!now.ok()) {
      trace.failure = now.error;
      trace.failed_at = t;
      trace.accepted = false;
      return trace;
    }
    settled = now.config;
    trace.states.push_back(settled.state);
    trace.stacks.push_back(padded_stack(spec, settled));
    if (oracle) trace.lm_masks.push_back(oracle->valid_next(reading, budget));
  }
  trace.accepted = detail::settled_accepting(spec, settled);
  return trace;
}

}  // namespace detail

inline OracleTrace run(const PdaSpec& spec, const Sequence& sequence, std::size_t budget,
                       CompletionOracle& oracle) {
  return detail::run_impl(spec, sequence, budget, &oracle);
}

/// Same as run() but without LM masks (states and stacks only).
inline OracleTrace replay(const PdaSpec& spec, const Sequence& sequence) {
  return detail::run_impl(spec, sequence, 0, nullptr);
}

inline OracleTrace run(const PdaSpec& spec, const Sequence& sequence, std::size_t budget) {
  CompletionOracle oracle(spec);
  return run(spec, sequence, budget, oracle);
}

inline OracleTrace run(const PdaSpec& spec, const Sequence& sequence) {
  return run(spec, sequence, std::max(spec.default_max_len(), sequence.size()));
}

/// Membership only; no masks are computed.
inline bool accepts(const PdaSpec& spec, const Sequence& sequence) {
  PdaConfiguration c = initial_configuration(spec);
  for (SymbolId x : sequence) {
    if (x >= spec.num_symbols()) return false;
    auto r = step(spec, c, x);
    if (!r.ok()) return false;
    c = std::move(r.config);
  }
  return is_accepting(spec, c);
}

class EnumerationBudgetExceeded : public PdaError {
 public:
  using PdaError::PdaError;
};

/// All accepted non-empty sequences of length ≤ max_len, sorted
/// lexicographically by symbol id.
inline std::vector<Sequence> enumerate_accepted(const PdaSpec& spec, std::size_t max_len,
                                                std::size_t cap = 1'000'000) {
  std::vector<Sequence> out;
  CompletionOracle oracle(spec);
  Sequence prefix;
  // Depth-first in id order emits prefixes before extensions, which is
  // lexicographic order.
  auto visit = [&](auto&& self, const PdaConfiguration& c) -> void {
    if (!prefix.empty() && is_accepting(spec, c)) {
      if (out.size() >= cap) throw EnumerationBudgetExceeded("enumerate_accepted: cap exceeded");
      out.push_back(prefix);
    }
    if (prefix.size() >= max_len) return;
    const auto mask = oracle.valid_next(c, max_len);
    for (SymbolId x = 0; x < spec.num_symbols(); ++x) {
      if (!mask[x]) continue;
      auto r = step(spec, c, x);
      prefix.push_back(x);
      self(self, r.config);
      prefix.pop_back();
    }
  };
  visit(visit, initial_configuration(spec));
  return out;
}

/// Converts between display strings and symbol ids.
inline Sequence encode(const PdaSpec& spec, const std::vector<std::string>& tokens) {
  Sequence s;
  s.reserve(tokens.size());
  for (const auto& t : tokens) s.push_back(spec.alphabet().id(t));
  return s;
}

/// Splits every character into its own token (for single-character alphabets).
inline Sequence encode_chars(const PdaSpec& spec, std::string_view text) {
  Sequence s;
  for (char ch : text) s.push_back(spec.alphabet().id(std::string(1, ch)));
  return s;
}

inline std::string decode(const PdaSpec& spec, const Sequence& seq, std::string_view sep = "") {
  std::string out;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (i) out += sep;
    out += spec.alphabet().name(seq[i]);
  }
  return out;
}

}  // namespace cflprobe
