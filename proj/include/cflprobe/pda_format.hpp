#pragma once

// Line-oriented text format for PdaSpec (version 1). See docs/formats.md.
//
//   cfl-pda 1
//   name dyck-1-2
//   states q0
//   initial q0
//   accepting q0
//   alphabet ( )
//   stack ε I ( )
//   bottom I
//   max-stack 2
//   max-len 14
//   accept-stack C        (optional; working stack required at acceptance)
//   rule q0 ( - -> q0 (
//   rule q0 ) ( -> q0 -
//
// Rule fields: from-state, input ('-' = ε), pop sequence, '->', to-state,
// push sequence, and optionally 'la' followed by a comma list of lookahead
// symbols ('$end' = end of input). Sequences are comma-joined bottom→top;
// '-' is the empty sequence. '#' starts a comment.

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "cflprobe/hash.hpp"
#include "cflprobe/pda.hpp"

namespace cflprobe {

inline constexpr int kPdaFormatVersion = 1;
inline constexpr std::string_view kEndOfInputToken = "$end";

namespace detail {

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

inline std::string join_symbols(const std::vector<SymbolId>& ids, const SymbolTable& table) {
  if (ids.empty()) return "-";
  std::string s;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) s += ',';
    s += ids[i] == kEndOfInput ? std::string(kEndOfInputToken) : table.name(ids[i]);
  }
  return s;
}

inline std::vector<SymbolId> parse_symbols(const std::string& field, const SymbolTable& table,
                                           bool allow_end) {
  std::vector<SymbolId> ids;
  if (field == "-") return ids;
  for (const auto& tok : split(field, ',')) {
    if (allow_end && tok == kEndOfInputToken) {
      ids.push_back(kEndOfInput);
    } else {
      ids.push_back(table.id(tok));
    }
  }
  return ids;
}

inline void check_name(const std::string& n) {
  if (n.empty() || n == "-" || n == "->" || n.find_first_of(" \t,#") != std::string::npos) {
    throw PdaError("pda format: symbol or state name '" + n + "' is not serializable");
  }
}

}  // namespace detail

inline std::string to_text(const PdaSpec& spec) {
  const auto& d = spec.definition();
  for (const auto& n : d.states) detail::check_name(n);
  for (const auto& n : d.alphabet) detail::check_name(n);
  for (const auto& n : d.stack_symbols) detail::check_name(n);
  std::ostringstream os;
  auto list = [&os](const char* key, const std::vector<std::string>& names) {
    os << key;
    for (const auto& n : names) os << ' ' << n;
    os << '\n';
  };
  os << "cfl-pda " << kPdaFormatVersion << '\n';
  os << "name " << d.name << '\n';
  list("states", d.states);
  os << "initial " << d.states[d.initial_state] << '\n';
  os << "accepting";
  for (StateId q : d.accepting) os << ' ' << d.states[q];
  os << '\n';
  list("alphabet", d.alphabet);
  list("stack", d.stack_symbols);
  os << "bottom " << d.initial_stack << '\n';
  os << "max-stack " << d.max_stack << '\n';
  os << "max-len " << spec.default_max_len() << '\n';
  if (!d.accept_stack.empty()) {
    os << "accept-stack " << detail::join_symbols(d.accept_stack, spec.stack_symbols()) << '\n';
  }
  for (const auto& r : d.rules) {
    os << "rule " << d.states[r.from] << ' '
       << (r.input ? spec.alphabet().name(*r.input) : std::string("-")) << ' '
       << detail::join_symbols(r.pop, spec.stack_symbols()) << " -> " << d.states[r.to] << ' '
       << detail::join_symbols(r.push, spec.stack_symbols());
    if (!r.lookahead.empty()) os << " la " << detail::join_symbols(r.lookahead, spec.alphabet());
    os << '\n';
  }
  return os.str();
}

inline PdaSpec from_text(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  PdaDefinition d;
  bool header = false;
  std::string initial, bottom, accept_stack;
  std::vector<std::string> accepting;
  std::vector<std::vector<std::string>> rule_lines;
  std::size_t lineno = 0;
  auto fail = [&lineno](const std::string& what) -> PdaError {
    return PdaError("pda format line " + std::to_string(lineno) + ": " + what);
  };
  while (std::getline(is, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::vector<std::string> tok;
    for (std::string t; ls >> t;) tok.push_back(t);
    if (tok.empty()) continue;
    const std::string key = tok[0];
    std::vector<std::string> rest(tok.begin() + 1, tok.end());
    if (!header) {
      if (key != "cfl-pda" || rest.size() != 1) throw fail("missing 'cfl-pda <version>' header");
      if (rest[0] != std::to_string(kPdaFormatVersion)) throw fail("unsupported version " + rest[0]);
      header = true;
      continue;
    }
    auto single = [&]() -> const std::string& {
      if (rest.size() != 1) throw fail("'" + key + "' takes exactly one value");
      return rest[0];
    };
    if (key == "name") {
      d.name = single();
    } else if (key == "states") {
      d.states = rest;
    } else if (key == "initial") {
      initial = single();
    } else if (key == "accepting") {
      accepting = rest;
    } else if (key == "alphabet") {
      d.alphabet = rest;
    } else if (key == "stack") {
      d.stack_symbols = rest;
    } else if (key == "bottom") {
      bottom = single();
    } else if (key == "max-stack") {
      d.max_stack = std::stoul(single());
    } else if (key == "max-len") {
      d.default_max_len = std::stoul(single());
    } else if (key == "accept-stack") {
      accept_stack = single();
    } else if (key == "rule") {
      if ((rest.size() != 6 && rest.size() != 8) || rest[3] != "->" ||
          (rest.size() == 8 && rest[6] != "la")) {
        throw fail("malformed rule (expected: from input pop -> to push [la symbols])");
      }
      rule_lines.push_back(rest);
    } else {
      throw fail("unknown key '" + key + "'");
    }
  }
  if (!header) throw PdaError("pda format: empty input");
  SymbolTable states(d.states), alpha(d.alphabet), stack(d.stack_symbols);
  d.initial_state = states.id(initial);
  d.initial_stack = bottom.empty() ? std::string(kBottomName) : bottom;
  for (const auto& q : accepting) d.accepting.push_back(states.id(q));
  if (!accept_stack.empty()) d.accept_stack = detail::parse_symbols(accept_stack, stack, false);
  for (const auto& r : rule_lines) {
    TransitionRule rule;
    rule.from = states.id(r[0]);
    if (r[1] != "-") rule.input = alpha.id(r[1]);
    rule.pop = detail::parse_symbols(r[2], stack, false);
    rule.to = states.id(r[4]);
    rule.push = detail::parse_symbols(r[5], stack, false);
    if (r.size() == 8) rule.lookahead = detail::parse_symbols(r[7], alpha, true);
    d.rules.push_back(std::move(rule));
  }
  return PdaSpec(std::move(d));
}

/// Stable identity of a spec: FNV-1a of its canonical text.
inline std::uint64_t spec_digest(const PdaSpec& spec) { return fnv1a(to_text(spec)); }

inline void save_spec(const PdaSpec& spec, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw PdaError("cannot write " + path);
  out << to_text(spec);
}

inline PdaSpec load_spec(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw PdaError("cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return from_text(ss.str());
}

}  // namespace cflprobe
