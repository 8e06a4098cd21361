#pragma once

// Constructors for the four canonical bounded languages: Dyck-(k,m),
// aⁿbⁿ, parity and (wcwʳ)ⁿ-(k,m).

#include <cstddef>
#include <string>
#include <vector>

#include "cflprobe/pda.hpp"

namespace cflprobe {

namespace detail {

// Stack table S = Σ ∪ {I, ε}: ε first, then I, then the input symbols.
inline std::vector<std::string> stack_table_for(const std::vector<std::string>& alphabet) {
  std::vector<std::string> s{std::string(kEpsilonName), std::string(kBottomName)};
  s.insert(s.end(), alphabet.begin(), alphabet.end());
  return s;
}

inline SymbolId stack_id_of_input(SymbolId input) { return static_cast<SymbolId>(input + 2); }

inline void require(bool ok, const std::string& what) {
  if (!ok) throw PdaError(what);
}

}  // namespace detail

/// Bracket names for type i: "(" "[" "{" "<" for the first four types,
/// then "(5" / ")5" and so on.
inline std::pair<std::string, std::string> dyck_brackets(std::size_t i) {
  static constexpr const char* kOpen[] = {"(", "[", "{", "<"};
  static constexpr const char* kClose[] = {")", "]", "}", ">"};
  if (i < 4) return {kOpen[i], kClose[i]};
  return {"(" + std::to_string(i + 1), ")" + std::to_string(i + 1)};
}

/// Paired brackets of k types nested at most m deep. |Q| = 1.
inline PdaSpec build_dyck(std::size_t k, std::size_t m) {
  detail::require(k >= 1 && m >= 1, "build_dyck: k and m must be >= 1");
  PdaDefinition def;
  def.name = "dyck-" + std::to_string(k) + "-" + std::to_string(m);
  def.states = {"q0"};
  for (std::size_t i = 0; i < k; ++i) {
    auto [open, close] = dyck_brackets(i);
    def.alphabet.push_back(open);
    def.alphabet.push_back(close);
  }
  def.stack_symbols = detail::stack_table_for(def.alphabet);
  for (std::size_t i = 0; i < k; ++i) {
    const auto open = static_cast<SymbolId>(2 * i);
    const auto close = static_cast<SymbolId>(2 * i + 1);
    def.rules.push_back({0, open, {}, 0, {detail::stack_id_of_input(open)}, {}});
    def.rules.push_back({0, close, {detail::stack_id_of_input(open)}, 0, {}, {}});
  }
  def.accepting = {0};
  def.max_stack = m;
  def.default_max_len = 2 * m + 10;
  return PdaSpec(std::move(def));
}

/// aⁿbⁿ for 1 ≤ n ≤ m. States: reading-a, reading-b.
inline PdaSpec build_anbn(std::size_t m) {
  detail::require(m >= 1, "build_anbn: m must be >= 1");
  PdaDefinition def;
  def.name = "anbn-" + std::to_string(m);
  def.states = {"qa", "qb"};
  def.alphabet = {"a", "b"};
  def.stack_symbols = detail::stack_table_for(def.alphabet);
  const SymbolId a = 0, b = 1;
  const SymbolId count = detail::stack_id_of_input(a);
  def.rules = {
      {0, a, {}, 0, {count}, {}},
      {0, b, {count}, 1, {}, {}},
      {1, b, {count}, 1, {}, {}},
  };
  def.accepting = {1};
  def.max_stack = m;
  def.default_max_len = 2 * m;
  return PdaSpec(std::move(def));
}

/// Binary strings with an even number of 0s; no rule touches the stack.
/// The stack bound is 1 so traces carry a single (always ε) slot.
inline PdaSpec build_parity() {
  PdaDefinition def;
  def.name = "parity";
  def.states = {"even", "odd"};
  def.alphabet = {"0", "1"};
  def.stack_symbols = detail::stack_table_for(def.alphabet);
  const SymbolId zero = 0, one = 1;
  def.rules = {
      {0, zero, {}, 1, {}, {}},
      {1, zero, {}, 0, {}, {}},
      {0, one, {}, 0, {}, {}},
      {1, one, {}, 1, {}, {}},
  };
  def.accepting = {0};
  def.max_stack = 1;
  def.default_max_len = 20;
  return PdaSpec(std::move(def));
}

/// Name of the i-th ω character: a, b, d, e, ..., z ('c' is the
/// separator), then w26, w27, ...
inline std::string wcwr_char(std::size_t i) {
  if (i < 2) return std::string(1, static_cast<char>('a' + i));
  if (i < 25) return std::string(1, static_cast<char>('a' + i + 1));
  return "w" + std::to_string(i + 1);
}

/// One to n concatenated blocks ω c ωʳ with |ω| ≤ m over k characters.
/// States push_i / pop_i per block i; acceptance in any pop_i with an empty
/// working stack.
inline PdaSpec build_wcwr(std::size_t k, std::size_t m, std::size_t n) {
  detail::require(k >= 1 && m >= 1 && n >= 1, "build_wcwr: k, m and n must be >= 1");
  PdaDefinition def;
  def.name = "wcwr-" + std::to_string(k) + "-" + std::to_string(m) + "-" + std::to_string(n);
  for (std::size_t i = 0; i < n; ++i) {
    def.states.push_back("push" + std::to_string(i + 1));
    def.states.push_back("pop" + std::to_string(i + 1));
  }
  for (std::size_t i = 0; i < k; ++i) def.alphabet.push_back(wcwr_char(i));
  def.alphabet.push_back("c");
  def.stack_symbols = detail::stack_table_for(def.alphabet);
  const auto sep = static_cast<SymbolId>(k);
  const SymbolId bottom = 1;
  for (std::size_t blk = 0; blk < n; ++blk) {
    const auto push_q = static_cast<StateId>(2 * blk);
    const auto pop_q = static_cast<StateId>(2 * blk + 1);
    for (std::size_t i = 0; i < k; ++i) {
      const auto w = static_cast<SymbolId>(i);
      const auto sw = detail::stack_id_of_input(w);
      def.rules.push_back({push_q, w, {}, push_q, {sw}, {}});
      def.rules.push_back({pop_q, w, {sw}, pop_q, {}, {}});
      if (blk + 1 < n) {
        // Block finished and the next one starts with a character.
        def.rules.push_back({pop_q, w, {bottom}, static_cast<StateId>(push_q + 2), {bottom, sw}, {}});
      }
    }
    def.rules.push_back({push_q, sep, {}, pop_q, {}, {}});
    if (blk + 1 < n) {
      // Next block has an empty ω.
      def.rules.push_back({pop_q, sep, {bottom}, static_cast<StateId>(pop_q + 2), {bottom}, {}});
    }
    def.accepting.push_back(pop_q);
  }
  def.max_stack = m;
  def.default_max_len = n * (2 * m + 1);
  return PdaSpec(std::move(def));
}

}  // namespace cflprobe
