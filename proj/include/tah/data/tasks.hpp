#pragma once

#include <algorithm>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "tah/errors.hpp"
#include "tah/numerics/random.hpp"

namespace tah {

enum class TaskKind { mod_chain, copy, brackets };

inline std::string to_string(TaskKind k) {
  switch (k) {
    case TaskKind::mod_chain:
      return "mod-chain";
    case TaskKind::copy:
      return "copy";
    case TaskKind::brackets:
      return "brackets";
  }
  return "mod-chain";
}

inline TaskKind parse_task_kind(const std::string& s) {
  if (s == "mod-chain" || s == "mod_chain") return TaskKind::mod_chain;
  if (s == "copy") return TaskKind::copy;
  if (s == "brackets") return TaskKind::brackets;
  throw ConfigError("unknown task '" + s + "'");
}

/// Answer-key flag per character.
enum KeyFlag : char { kPrompt = 'p', kFormat = 'f', kCompute = 'c' };

struct TaskSpec {
  TaskKind kind = TaskKind::mod_chain;
  // mod-chain: terms drawn from [0, modulus); response lists running sums.
  int modulus = 5;
  int min_terms = 2;
  int max_terms = 6;
  // copy: source of copy_length symbols over copy_alphabet letters.
  int copy_length = 8;
  int copy_alphabet = 8;
  bool copy_reverse = false;
  // brackets: random strings of up to bracket_length symbols.
  int bracket_length = 10;

  void validate() const {
    switch (kind) {
      case TaskKind::mod_chain:
        if (modulus < 2 || modulus > 10) throw ConfigError("mod-chain: modulus must lie in [2, 10]");
        if (min_terms < 1 || max_terms < min_terms) throw ConfigError("mod-chain: need 1 <= min_terms <= max_terms");
        break;
      case TaskKind::copy:
        if (copy_length < 1) throw ConfigError("copy: length must be >= 1");
        if (copy_alphabet < 1 || copy_alphabet > 26) throw ConfigError("copy: alphabet must lie in [1, 26]");
        break;
      case TaskKind::brackets:
        if (bracket_length < 1) throw ConfigError("brackets: length must be >= 1");
        break;
    }
  }

  /// Every character the task can emit, in a fixed order.
  std::string alphabet() const {
    switch (kind) {
      case TaskKind::mod_chain:
        return "0123456789+=,.";
      case TaskKind::copy: {
        std::string s;
        for (int i = 0; i < copy_alphabet; ++i) s += static_cast<char>('a' + i);
        return s + "|.";
      }
      case TaskKind::brackets:
        return "()[]=01.";
    }
    return {};
  }
};

inline void to_json(nlohmann::json& j, const TaskSpec& t) {
  j = nlohmann::json{{"kind", to_string(t.kind)},         {"modulus", t.modulus},
                     {"min_terms", t.min_terms},          {"max_terms", t.max_terms},
                     {"copy_length", t.copy_length},      {"copy_alphabet", t.copy_alphabet},
                     {"copy_reverse", t.copy_reverse},    {"bracket_length", t.bracket_length}};
}

inline void from_json(const nlohmann::json& j, TaskSpec& t) {
  TaskSpec d;
  t.kind = parse_task_kind(j.value("kind", to_string(d.kind)));
  t.modulus = j.value("modulus", d.modulus);
  t.min_terms = j.value("min_terms", d.min_terms);
  t.max_terms = j.value("max_terms", d.max_terms);
  t.copy_length = j.value("copy_length", d.copy_length);
  t.copy_alphabet = j.value("copy_alphabet", d.copy_alphabet);
  t.copy_reverse = j.value("copy_reverse", d.copy_reverse);
  t.bracket_length = j.value("bracket_length", d.bracket_length);
}

/// One generated example. `key[i]` flags character i; the first
/// `prompt_len` characters are the prompt.
struct RawExample {
  std::string text;
  std::string key;
  std::size_t prompt_len = 0;
};

/// The example at `index` of the stream for (spec, seed). Examples depend
/// only on these arguments, never on how many were generated before.
inline RawExample generate_example(const TaskSpec& spec, std::uint64_t seed, std::uint64_t index) {
  Rng rng(derive_seed(seed, "task:" + to_string(spec.kind), index));
  auto uniform = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
  RawExample ex;
  auto emit = [&](char c, KeyFlag f) {
    ex.text += c;
    ex.key += static_cast<char>(f);
  };
  switch (spec.kind) {
    case TaskKind::mod_chain: {
      const int n = uniform(spec.min_terms, spec.max_terms);
      std::vector<int> terms(static_cast<std::size_t>(n));
      for (auto& t : terms) t = uniform(0, spec.modulus - 1);
      for (int i = 0; i < n; ++i) {
        if (i > 0) emit('+', kPrompt);
        emit(static_cast<char>('0' + terms[static_cast<std::size_t>(i)]), kPrompt);
      }
      emit('=', kPrompt);
      ex.prompt_len = ex.text.size();
      int acc = 0;
      for (int i = 0; i < n; ++i) {
        acc = (acc + terms[static_cast<std::size_t>(i)]) % spec.modulus;
        if (i > 0) emit(',', kFormat);
        emit(static_cast<char>('0' + acc), kCompute);
      }
      emit('.', kFormat);
      break;
    }
    case TaskKind::copy: {
      std::string src;
      for (int i = 0; i < spec.copy_length; ++i) src += static_cast<char>('a' + uniform(0, spec.copy_alphabet - 1));
      for (char c : src) emit(c, kPrompt);
      emit('|', kPrompt);
      ex.prompt_len = ex.text.size();
      if (spec.copy_reverse) std::reverse(src.begin(), src.end());
      for (char c : src) emit(c, kCompute);
      emit('.', kFormat);
      break;
    }
    case TaskKind::brackets: {
      const int n = uniform(1, spec.bracket_length);
      const std::string sym = "()[]";
      std::string s;
      for (int i = 0; i < n; ++i) s += sym[static_cast<std::size_t>(uniform(0, 3))];
      std::string stack;
      bool ok = true;
      for (char c : s) {
        if (c == '(' || c == '[') {
          stack += c;
        } else if (!stack.empty() && ((c == ')' && stack.back() == '(') || (c == ']' && stack.back() == '['))) {
          stack.pop_back();
        } else {
          ok = false;
        }
      }
      ok = ok && stack.empty();
      for (char c : s) emit(c, kPrompt);
      emit('=', kPrompt);
      ex.prompt_len = ex.text.size();
      emit(ok ? '1' : '0', kCompute);
      emit('.', kFormat);
      break;
    }
  }
  return ex;
}

inline std::vector<RawExample> generate_task(const TaskSpec& spec, std::size_t count, std::uint64_t seed) {
  spec.validate();
  std::vector<RawExample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate_example(spec, seed, i));
  return out;
}

}  // namespace tah
