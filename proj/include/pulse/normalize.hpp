#pragma once

#include <charconv>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "pulse/errors.hpp"
#include "pulse/trace.hpp"

namespace pulse {

// How instruction text is turned into "words" of a function sentence.
//
//   spaced:       each instruction keeps its internal spacing, so one
//                 instruction contributes several words ("mov esp, esi" ->
//                 "mov esp, esi" as three words with the comma attached).
//   concatenated: each instruction collapses into a single word
//                 ("mov esp, esi" -> "movespesi"), except masked jump targets
//                 which stay separate ("jnz memoryaddress"), keeping the
//                 branch mnemonic itself a reusable token.
enum class NormStyle { spaced, concatenated };

struct NormalizationMode {
  NormStyle style = NormStyle::concatenated;
  // Standalone immediates >= this value are rewritten to "memoryaddress".
  std::uint64_t address_threshold = 0x10000;
};

inline const char* to_string(NormStyle s) {
  return s == NormStyle::spaced ? "spaced" : "concatenated";
}

inline NormStyle norm_style_from_string(const std::string& s) {
  if (s == "spaced") return NormStyle::spaced;
  if (s == "concatenated") return NormStyle::concatenated;
  throw ConfigError("unknown normalization style '" + s +
                    "' (expected spaced|concatenated)");
}

// One function sentence: the normalized words plus provenance.
struct NormalizedFunction {
  std::vector<std::string> words;
  std::string text;  // words joined by single spaces
  std::string sample_id;
  Label label = Label::benign;
  std::size_t index_in_sample = 0;       // ordinal among the sample's functions
  std::size_t n_instructions = 0;
  std::size_t first_instruction = 0;     // index into the sample's stream
};

namespace detail {

// A standalone immediate operand: optional sign, then hex (0x...) or decimal
// digits, nothing else. "0x30" inside "[0x30]" is not standalone.
inline bool parse_immediate(std::string_view s, std::uint64_t* value) {
  if (s.empty()) return false;
  if (s.front() == '-') s.remove_prefix(1);
  if (s.empty()) return false;
  int base = 10;
  if (s.size() > 2 && (s.substr(0, 2) == "0x" || s.substr(0, 2) == "0X")) {
    base = 16;
    s.remove_prefix(2);
  }
  if (s.empty()) return false;
  std::uint64_t v = 0;
  const auto [ptr, ec] =
      std::from_chars(s.data(), s.data() + s.size(), v, base);
  if (ptr != s.data() + s.size()) return false;
  if (ec == std::errc::result_out_of_range) v = UINT64_MAX;
  else if (ec != std::errc()) return false;
  if (value) *value = v;
  return true;
}

inline bool is_control_transfer(std::string_view mnemonic) {
  // call, jmp and the whole jcc family; x86 has no other j* mnemonics.
  return mnemonic == "call" || (!mnemonic.empty() && mnemonic.front() == 'j');
}

// Concatenated rendering of an operand: drop spaces and commas, keep
// structural punctuation ([ ] : + -) so "byte ptr [ebp-0x19]" becomes
// "byteptr[ebp-0x19]".
inline std::string squeeze_operand(std::string_view op) {
  std::string out;
  out.reserve(op.size());
  for (char c : op)
    if (c != ' ' && c != ',') out += c;
  return out;
}

}  // namespace detail

// Rewrites one instruction into its word sequence under the given mode.
//
// Masking first: any standalone immediate >= mode.address_threshold becomes
// "memoryaddress"; the sole immediate operand of a control transfer
// (call/jmp/jcc) is masked regardless of magnitude, since concrete branch
// targets never generalize across runs.
inline std::vector<std::string> normalize_instruction(
    const Instruction& instr, const NormalizationMode& mode) {
  const bool transfer = detail::is_control_transfer(instr.mnemonic);
  std::vector<std::string> ops;
  ops.reserve(instr.operands.size());
  bool masked_jump_target = false;
  for (std::size_t i = 0; i < instr.operands.size(); ++i) {
    const std::string& op = instr.operands[i];
    std::uint64_t value = 0;
    if (detail::parse_immediate(op, &value)) {
      const bool is_single_target = transfer && instr.operands.size() == 1;
      if (is_single_target || value >= mode.address_threshold) {
        ops.emplace_back("memoryaddress");
        if (is_single_target && instr.mnemonic.front() == 'j')
          masked_jump_target = true;
        continue;
      }
    }
    ops.push_back(op);
  }

  std::vector<std::string> words;
  if (mode.style == NormStyle::spaced) {
    // Words are the whitespace-separated pieces of the canonical text, commas
    // attached: "mov esp, esi" -> ["mov", "esp,", "esi"].
    words.push_back(instr.mnemonic);
    for (std::size_t i = 0; i < ops.size(); ++i) {
      std::string piece = ops[i];
      if (i + 1 < ops.size()) piece += ',';
      std::size_t start = 0;
      for (std::size_t j = 0; j <= piece.size(); ++j) {
        if (j < piece.size() && piece[j] != ' ') continue;
        if (j > start) words.push_back(piece.substr(start, j - start));
        start = j + 1;
      }
    }
  } else {
    if (masked_jump_target) {
      // Branches keep their target word separate even in concatenated mode,
      // so every jcc shares the "memoryaddress" token.
      words.push_back(instr.mnemonic);
      words.emplace_back("memoryaddress");
    } else {
      std::string word = instr.mnemonic;
      for (const std::string& op : ops) word += detail::squeeze_operand(op);
      words.push_back(std::move(word));
    }
  }
  return words;
}

// Splits a sample's instruction stream into function sentences. A function
// ends after "ret" or "call"; in spaced mode a "push ebp" prologue also
// starts a new function. Every instruction lands in exactly one function.
inline std::vector<NormalizedFunction> segment_functions(
    const RawSample& sample, const NormalizationMode& mode) {
  std::vector<NormalizedFunction> funcs;
  NormalizedFunction cur;
  cur.sample_id = sample.sample_id;
  cur.label = sample.label;
  cur.first_instruction = 0;

  auto flush = [&](std::size_t next_start) {
    if (cur.n_instructions == 0) return;
    cur.text.clear();
    for (std::size_t i = 0; i < cur.words.size(); ++i) {
      if (i > 0) cur.text += ' ';
      cur.text += cur.words[i];
    }
    cur.index_in_sample = funcs.size();
    funcs.push_back(std::move(cur));
    cur = NormalizedFunction{};
    cur.sample_id = sample.sample_id;
    cur.label = sample.label;
    cur.first_instruction = next_start;
  };

  for (std::size_t i = 0; i < sample.instructions.size(); ++i) {
    const Instruction& instr = sample.instructions[i];
    if (mode.style == NormStyle::spaced && cur.n_instructions > 0 &&
        instr.mnemonic == "push" && instr.operands.size() == 1 &&
        instr.operands[0] == "ebp") {
      flush(i);
    }
    std::vector<std::string> words = normalize_instruction(instr, mode);
    for (std::string& w : words) cur.words.push_back(std::move(w));
    cur.n_instructions += 1;
    if (instr.mnemonic == "ret" || instr.mnemonic == "call") flush(i + 1);
  }
  flush(sample.instructions.size());
  return funcs;
}

// Drops functions shorter than min_instructions; stubs that short carry no
// usable signal. Surviving functions keep their original ordinals.
inline std::vector<NormalizedFunction> filter_short(
    std::vector<NormalizedFunction> funcs, std::size_t min_instructions = 6) {
  std::vector<NormalizedFunction> kept;
  kept.reserve(funcs.size());
  for (NormalizedFunction& f : funcs)
    if (f.n_instructions >= min_instructions) kept.push_back(std::move(f));
  return kept;
}

}  // namespace pulse
