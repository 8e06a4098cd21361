#pragma once

// SCAN command grammar, exhaustive generation, a deterministic
// shift-reduce parser that materializes stack-only reductions as <reduce>
// tokens, and the equivalent single-state PDA.

#include <algorithm>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <span>
#include <string>
#include <vector>

#include "cflprobe/datagen.hpp"
#include "cflprobe/pda.hpp"

namespace cflprobe {

inline constexpr const char* kReduceToken = "<reduce>";
/// Deepest parser stack over the whole language ([CP, VP, D]); the
/// exhaustive test re-derives it.
inline constexpr std::size_t kScanMaxStack = 3;
/// Longest padded sequence over the whole language.
inline constexpr std::size_t kScanMaxPadded = 16;
/// Default record budget: the size of the commonly used split pair.
inline constexpr std::size_t kScanDefaultRecords = 33'456;

struct Production {
  std::string lhs;
  std::vector<std::string> rhs;
};

struct ScanGrammar {
  std::vector<std::string> nonterminals;
  std::vector<std::string> terminals;  // without <reduce>
  std::vector<Production> productions;
  std::string start;

  bool is_nonterminal(const std::string& s) const {
    return std::find(nonterminals.begin(), nonterminals.end(), s) != nonterminals.end();
  }
};

inline const ScanGrammar& scan_grammar() {
  static const ScanGrammar g{
      {"C", "CP", "S", "V", "VP", "D", "U"},
      {"after", "and", "around", "jump", "left", "look", "opposite", "right", "run", "thrice",
       "turn", "twice", "walk"},
      {
          {"C", {"CP", "S"}},
          {"C", {"CP", "V"}},
          {"C", {"S"}},
          {"CP", {"S", "and"}},
          {"CP", {"S", "after"}},
          {"S", {"V"}},
          {"S", {"V", "twice"}},
          {"S", {"V", "thrice"}},
          {"V", {"VP", "D"}},
          {"V", {"VP", "left"}},
          {"V", {"VP", "right"}},
          {"V", {"D"}},
          {"VP", {"D", "opposite"}},
          {"VP", {"D", "around"}},
          {"D", {"U"}},
          {"D", {"U", "left"}},
          {"D", {"U", "right"}},
          {"U", {"walk"}},
          {"U", {"look"}},
          {"U", {"run"}},
          {"U", {"jump"}},
          {"U", {"turn"}},
      },
      "C"};
  return g;
}

/// Σ of the SCAN PDA: terminals and <reduce> in byte order, so id order
/// is string order.
inline std::vector<std::string> scan_alphabet(const ScanGrammar& g = scan_grammar()) {
  std::vector<std::string> a = g.terminals;
  a.emplace_back(kReduceToken);
  std::sort(a.begin(), a.end());
  return a;
}

/// Stack symbols of the SCAN PDA (ids fixed: ε=0, I=1, then C, CP, S, V, VP, D, U).
inline std::vector<std::string> scan_stack_symbols(const ScanGrammar& g = scan_grammar()) {
  std::vector<std::string> s{std::string(kEpsilonName), std::string(kBottomName)};
  s.insert(s.end(), g.nonterminals.begin(), g.nonterminals.end());
  return s;
}

/// Flat list of token sequences (one buffer, one offset table).
class CommandList {
 public:
  std::size_t size() const { return offsets_.size() - 1; }
  bool empty() const { return size() == 0; }
  std::span<const SymbolId> operator[](std::size_t i) const {
    return {tokens_.data() + offsets_[i], offsets_[i + 1] - offsets_[i]};
  }
  Sequence sequence(std::size_t i) const {
    auto s = (*this)[i];
    return {s.begin(), s.end()};
  }
  void push_back(std::span<const SymbolId> a, std::span<const SymbolId> b = {}) {
    tokens_.insert(tokens_.end(), a.begin(), a.end());
    tokens_.insert(tokens_.end(), b.begin(), b.end());
    offsets_.push_back(tokens_.size());
  }
  void reserve(std::size_t n, std::size_t tokens) {
    offsets_.reserve(n + 1);
    tokens_.reserve(tokens);
  }
  std::size_t total_tokens() const { return tokens_.size(); }

  /// Sorts lexicographically and drops duplicates.
  void sort_unique() {
    std::vector<std::uint32_t> idx(size());
    std::iota(idx.begin(), idx.end(), 0u);
    auto less = [this](std::uint32_t a, std::uint32_t b) {
      auto x = (*this)[a], y = (*this)[b];
      return std::lexicographical_compare(x.begin(), x.end(), y.begin(), y.end());
    };
    std::sort(idx.begin(), idx.end(), less);
    CommandList out;
    out.reserve(size(), total_tokens());
    for (std::size_t k = 0; k < idx.size(); ++k) {
      if (k && !less(idx[k - 1], idx[k])) continue;
      out.push_back((*this)[idx[k]]);
    }
    *this = std::move(out);
  }

 private:
  std::vector<SymbolId> tokens_;
  std::vector<std::size_t> offsets_{0};
};

/// Every string derivable from the start symbol, as ids over scan_alphabet,
/// sorted and duplicate-free. The grammar must be non-recursive.
inline CommandList generate_commands(const ScanGrammar& g = scan_grammar()) {
  const SymbolTable alpha(scan_alphabet(g));
  std::map<std::string, CommandList> memo;
  std::set<std::string> active;
  auto expand = [&](auto&& self, const std::string& nt) -> const CommandList& {
    if (auto it = memo.find(nt); it != memo.end()) return it->second;
    if (!active.insert(nt).second) throw std::runtime_error("scan grammar: recursive nonterminal " + nt);
    CommandList all;
    for (const auto& p : g.productions) {
      if (p.lhs != nt) continue;
      CommandList acc;
      acc.push_back({});
      for (const auto& sym : p.rhs) {
        CommandList next;
        if (g.is_nonterminal(sym)) {
          const CommandList& part = self(self, sym);
          next.reserve(acc.size() * part.size(), 0);
          for (std::size_t i = 0; i < acc.size(); ++i) {
            for (std::size_t j = 0; j < part.size(); ++j) next.push_back(acc[i], part[j]);
          }
        } else {
          const SymbolId t = alpha.id(sym);
          for (std::size_t i = 0; i < acc.size(); ++i) next.push_back(acc[i], std::span<const SymbolId>(&t, 1));
        }
        acc = std::move(next);
      }
      for (std::size_t i = 0; i < acc.size(); ++i) all.push_back(acc[i]);
    }
    all.sort_unique();
    active.erase(nt);
    return memo.emplace(nt, std::move(all)).first->second;
  };
  CommandList out = expand(expand, g.start);
  return out;
}

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t position)
      : std::runtime_error(what + " (at token " + std::to_string(position) + ")"), position_(position) {}
  std::size_t position() const { return position_; }

 private:
  std::size_t position_;
};

/// Parser output. stacks[t] is the stack after padded[t], in stack-symbol
/// ids of scan_pda(), bottom→top, ε-padded to kScanMaxStack.
struct ParseTrace {
  Sequence padded;
  std::vector<std::vector<SymbolId>> stacks;
  std::vector<std::string> transitions;
  std::size_t max_depth = 0;

  std::vector<SymbolId> final_stack() const { return stacks.empty() ? std::vector<SymbolId>{} : stacks.back(); }
};

namespace detail {

enum class ScanNt : SymbolId { C = 2, CP, S, V, VP, D, U };
enum class ScanCat { Reduce, Action, Direction, Turn, Repeat, Conjunction, End };

inline ScanCat scan_category(const std::string& w) {
  if (w == kReduceToken) return ScanCat::Reduce;
  if (w == "left" || w == "right") return ScanCat::Direction;
  if (w == "opposite" || w == "around") return ScanCat::Turn;
  if (w == "twice" || w == "thrice") return ScanCat::Repeat;
  if (w == "and" || w == "after") return ScanCat::Conjunction;
  return ScanCat::Action;
}

inline const char* nt_name(ScanNt n) {
  static const char* names[] = {"C", "CP", "S", "V", "VP", "D", "U"};
  return names[static_cast<SymbolId>(n) - 2];
}

class ScanParser {
 public:
  ScanParser(const SymbolTable& alpha, const Sequence& cmd) : alpha_(alpha), cmd_(cmd) {
    reduce_ = alpha.id(kReduceToken);
  }

  ParseTrace parse() {
    if (cmd_.empty()) throw ParseError("empty command", 0);
    for (pos_ = 0; pos_ < cmd_.size(); ++pos_) {
      const SymbolId tok = cmd_[pos_];
      const std::string& w = alpha_.name(tok);
      const ScanCat la = pos_ + 1 < cmd_.size() ? scan_category(alpha_.name(cmd_[pos_ + 1])) : ScanCat::End;
      switch (scan_category(w)) {
        case ScanCat::Reduce:
          fail("<reduce> in a raw command");
        case ScanCat::Action: {
          if (!st_.empty() && top() != ScanNt::CP && top() != ScanNt::VP) fail("unexpected " + w);
          const ScanNt pushed = la == ScanCat::Direction ? ScanNt::U : ScanNt::D;
          st_.push_back(pushed);
          emit(tok, w + ": shift " + (pushed == ScanNt::U ? "U" : "U, D := U"));
          break;
        }
        case ScanCat::Direction:
          if (!st_.empty() && top() == ScanNt::U) {
            top() = ScanNt::D;
            emit(tok, "D := U " + w);
          } else if (!st_.empty() && top() == ScanNt::VP) {
            top() = ScanNt::V;
            emit(tok, "V := VP " + w);
          } else {
            fail("unexpected " + w);
          }
          break;
        case ScanCat::Turn:
          if (st_.empty() || top() != ScanNt::D || (st_.size() > 1 && below() != ScanNt::CP)) {
            fail("unexpected " + w);
          }
          top() = ScanNt::VP;
          emit(tok, "VP := D " + w);
          break;
        case ScanCat::Repeat: {
          Plan plan;
          plan_to_v(plan, w);
          plan.push_back({[](std::vector<ScanNt>& s) { s.back() = ScanNt::S; }, "S := V " + w});
          schedule(tok, plan);
          break;
        }
        case ScanCat::Conjunction: {
          Plan plan;
          if (st_.size() == 1 && top() == ScanNt::S) {
            // nothing pending
          } else {
            plan_to_v(plan, w);
            plan.push_back({[](std::vector<ScanNt>& s) { s.back() = ScanNt::S; }, "S := V"});
          }
          if (st_.empty() || st_.front() == ScanNt::CP) fail("unexpected " + w);
          plan.push_back({[](std::vector<ScanNt>& s) { s.back() = ScanNt::CP; }, "CP := S " + w});
          schedule(tok, plan);
          break;
        }
        case ScanCat::End:
          break;
      }
    }
    pos_ = cmd_.size();
    finish();
    return std::move(trace_);
  }

 private:
  struct Action {
    void (*apply)(std::vector<ScanNt>&);
    std::string label;
  };
  using Plan = std::vector<Action>;

  ScanNt& top() { return st_.back(); }
  ScanNt below() const { return st_[st_.size() - 2]; }

  [[noreturn]] void fail(const std::string& what) const { throw ParseError(what, pos_); }

  // Reductions that bring the current top to V; checked against the
  // current stack, applied later.
  void plan_to_v(Plan& plan, const std::string& w) {
    if (st_.empty()) fail("unexpected " + w);
    if (top() == ScanNt::V) return;
    if (top() != ScanNt::D) fail("unexpected " + w);
    if (st_.size() > 1 && below() == ScanNt::VP) {
      plan.push_back({[](std::vector<ScanNt>& s) { s.pop_back(); s.back() = ScanNt::V; }, "V := VP D"});
    } else {
      plan.push_back({[](std::vector<ScanNt>& s) { s.back() = ScanNt::V; }, "V := D"});
    }
  }

  // The terminal carries the first action; each further one is a <reduce>.
  void schedule(SymbolId tok, const Plan& plan) {
    for (std::size_t i = 0; i < plan.size(); ++i) {
      plan[i].apply(st_);
      emit(i == 0 ? tok : reduce_, (i == 0 ? alpha_.name(tok) : std::string(kReduceToken)) + ": " + plan[i].label);
    }
  }

  void finish() {
    while (!(st_.size() == 1 && top() == ScanNt::C)) {
      if (st_.empty()) fail("incomplete command");
      std::string label;
      const bool under_cp = st_.size() > 1 && below() == ScanNt::CP;
      switch (top()) {
        case ScanNt::D:
          if (st_.size() > 1 && below() == ScanNt::VP) {
            st_.pop_back();
            top() = ScanNt::V;
            label = "V := VP D";
          } else {
            top() = ScanNt::V;
            label = "V := D";
          }
          break;
        case ScanNt::V:
          if (under_cp) {
            st_.pop_back();
            top() = ScanNt::C;
            label = "C := CP V";
          } else if (st_.size() == 1) {
            top() = ScanNt::S;
            label = "S := V";
          } else {
            fail("incomplete command");
          }
          break;
        case ScanNt::S:
          if (under_cp) {
            st_.pop_back();
            top() = ScanNt::C;
            label = "C := CP S";
          } else if (st_.size() == 1) {
            top() = ScanNt::C;
            label = "C := S";
          } else {
            fail("incomplete command");
          }
          break;
        default:
          fail("incomplete command");
      }
      emit(reduce_, std::string(kReduceToken) + ": " + label);
    }
  }

  void emit(SymbolId tok, std::string label) {
    if (st_.size() > kScanMaxStack) throw ParseError("stack deeper than the SCAN bound", pos_);
    trace_.max_depth = std::max(trace_.max_depth, st_.size());
    trace_.padded.push_back(tok);
    std::vector<SymbolId> slots(kScanMaxStack, 0);
    for (std::size_t i = 0; i < st_.size(); ++i) slots[i] = static_cast<SymbolId>(st_[i]);
    trace_.stacks.push_back(std::move(slots));
    trace_.transitions.push_back(std::move(label));
  }

  const SymbolTable& alpha_;
  const Sequence& cmd_;
  SymbolId reduce_ = 0;
  std::size_t pos_ = 0;
  std::vector<ScanNt> st_;
  ParseTrace trace_;
};

}  // namespace detail

/// Parses a command given as ids over scan_alphabet().
inline ParseTrace shift_reduce_parse(const Sequence& command) {
  static const SymbolTable alpha(scan_alphabet());
  for (std::size_t i = 0; i < command.size(); ++i) {
    if (command[i] >= alpha.size()) throw ParseError("symbol id out of range", i);
  }
  return detail::ScanParser(alpha, command).parse();
}

inline ParseTrace shift_reduce_parse(const std::vector<std::string>& words) {
  static const SymbolTable alpha(scan_alphabet());
  Sequence ids;
  for (std::size_t i = 0; i < words.size(); ++i) {
    auto id = alpha.find(words[i]);
    if (!id) throw ParseError("unknown word '" + words[i] + "'", i);
    ids.push_back(*id);
  }
  return shift_reduce_parse(ids);
}

/// Whitespace-separated command text.
inline std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream is(text);
  for (std::string w; is >> w;) out.push_back(w);
  return out;
}

/// Single-state PDA equivalent to the parser. Reductions are keyed on the
/// stack context and one symbol of lookahead.
inline PdaSpec scan_pda() {
  const ScanGrammar& g = scan_grammar();
  PdaDefinition d;
  d.name = "scan";
  d.states = {"q0"};
  d.alphabet = scan_alphabet(g);
  d.stack_symbols = scan_stack_symbols(g);
  d.accepting = {0};
  d.max_stack = kScanMaxStack;
  d.default_max_len = kScanMaxPadded;
  const SymbolTable alpha(d.alphabet), stack(d.stack_symbols);
  d.accept_stack = {stack.id("C")};
  auto sym = [&](const char* n) { return stack.id(n); };
  const SymbolId I = sym("I"), C = sym("C"), CP = sym("CP"), S = sym("S"), V = sym("V"),
                 VP = sym("VP"), D = sym("D"), U = sym("U");
  const SymbolId R = alpha.id(kReduceToken);
  auto words = [&](std::initializer_list<const char*> ws) {
    std::vector<SymbolId> ids;
    for (auto w : ws) ids.push_back(alpha.id(w));
    return ids;
  };
  const auto actions = words({"jump", "look", "run", "turn", "walk"});
  const auto dirs = words({"left", "right"});
  const auto turns = words({"around", "opposite"});
  const auto reps = words({"thrice", "twice"});
  const auto conjs = words({"after", "and"});
  std::vector<SymbolId> not_dir;
  for (SymbolId x = 0; x < alpha.size(); ++x) {
    if (std::find(dirs.begin(), dirs.end(), x) == dirs.end()) not_dir.push_back(x);
  }
  not_dir.push_back(kEndOfInput);
  const std::vector<SymbolId> only_reduce{R}, only_end{kEndOfInput};
  std::vector<SymbolId> reduce_or_conj{R};
  reduce_or_conj.insert(reduce_or_conj.end(), conjs.begin(), conjs.end());

  auto add = [&d](SymbolId in, std::vector<SymbolId> pop, std::vector<SymbolId> push,
                  std::vector<SymbolId> la = {}) {
    d.rules.push_back({0, in, std::move(pop), 0, std::move(push), std::move(la)});
  };
  for (SymbolId w : actions) {
    for (SymbolId x : {I, CP, VP}) {
      add(w, {x}, {x, U}, dirs);
      add(w, {x}, {x, D}, not_dir);
    }
  }
  for (SymbolId w : dirs) {
    add(w, {U}, {D});
    add(w, {VP}, {V});
  }
  for (SymbolId w : turns) {
    for (SymbolId x : {I, CP}) add(w, {x, D}, {x, VP});
  }
  for (SymbolId w : reps) {
    add(w, {VP, D}, {V}, only_reduce);
    for (SymbolId x : {I, CP}) {
      add(w, {x, D}, {x, V}, only_reduce);
      add(w, {x, V}, {x, S});
    }
  }
  for (SymbolId w : conjs) {
    add(w, {I, VP, D}, {I, V}, only_reduce);
    add(w, {I, D}, {I, V}, only_reduce);
    add(w, {I, V}, {I, S}, only_reduce);
    add(w, {I, S}, {I, CP});
  }
  add(R, {VP, D}, {V}, only_reduce);
  for (SymbolId x : {I, CP}) add(R, {x, D}, {x, V}, only_reduce);
  add(R, {I, V}, {I, S}, reduce_or_conj);
  add(R, {CP, V}, {C}, only_end);
  add(R, {CP, V}, {CP, S}, only_reduce);
  add(R, {I, S}, {I, C}, only_end);
  add(R, {I, S}, {I, CP}, actions);
  add(R, {CP, S}, {C}, only_end);
  return PdaSpec(std::move(d));
}

struct ScanDatasetOptions {
  std::uint64_t seed = 0;
  std::size_t max_records = kScanDefaultRecords;  // 0 = every command
  std::size_t threads = 1;
};

struct ScanDataset {
  DatasetSplits splits;
  std::size_t language_size = 0;
  std::size_t max_depth = 0;
};

/// Parses every command, splits by stable hash parity and keeps up to
/// max_records/2 per split (seeded choice). Positives only.
inline ScanDataset build_scan_dataset(const ScanDatasetOptions& opt = {}) {
  const PdaSpec spec = scan_pda();
  const CommandList all = generate_commands();
  std::vector<std::uint32_t> train_idx, test_idx;
  for (std::uint32_t i = 0; i < all.size(); ++i) {
    const auto s = all[i];
    ((fnv1a_values<SymbolId>(s) & 1) == 0 ? train_idx : test_idx).push_back(i);
  }
  auto choose = [&](std::vector<std::uint32_t>& v, std::uint64_t stream) {
    if (opt.max_records == 0 || v.size() <= opt.max_records / 2) return;
    Rng rng(derive_seed(opt.seed, stream, 0));
    std::shuffle(v.begin(), v.end(), rng);
    v.resize(opt.max_records / 2);
    std::sort(v.begin(), v.end());
  };
  choose(train_idx, 20);
  choose(test_idx, 21);
  ScanDataset out;
  out.language_size = all.size();
  auto padded = [&](const std::vector<std::uint32_t>& idx) {
    std::vector<Sequence> seqs;
    seqs.reserve(idx.size());
    for (auto i : idx) {
      auto t = shift_reduce_parse(all.sequence(i));
      out.max_depth = std::max(out.max_depth, t.max_depth);
      seqs.push_back(std::move(t.padded));
    }
    return seqs;
  };
  GenConfig cfg;
  cfg.n_train = train_idx.size();
  cfg.n_test = test_idx.size();
  cfg.seed = opt.seed;
  cfg.threads = opt.threads;
  out.splits.train = annotate_pairs(spec, make_meta(spec, cfg, "train", cfg.n_train), padded(train_idx), 0, false);
  out.splits.test = annotate_pairs(spec, make_meta(spec, cfg, "test", cfg.n_test), padded(test_idx), 1, false);
  return out;
}

}  // namespace cflprobe
