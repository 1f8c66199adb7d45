#pragma once

#include <array>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "pulse/errors.hpp"

namespace pulse {

enum class Label { benign, malicious };
enum class Split { train, validation, test };

inline const char* to_string(Label l) {
  return l == Label::benign ? "benign" : "malicious";
}

inline const char* to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::validation: return "validation";
    default: return "test";
  }
}

inline Label label_from_string(const std::string& s) {
  if (s == "benign") return Label::benign;
  if (s == "malicious") return Label::malicious;
  throw ConfigError("unknown label '" + s + "' (expected benign|malicious)");
}

inline Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "validation") return Split::validation;
  if (s == "test") return Split::test;
  throw ConfigError("unknown split '" + s +
                    "' (expected train|validation|test)");
}

// ---------------------------------------------------------------------------
// Instruction and line parsing
// ---------------------------------------------------------------------------

// One disassembled instruction from a dynamic trace.
struct Instruction {
  std::string mnemonic;               // lowercased
  std::vector<std::string> operands;  // in order, whitespace-normalized

  // Canonical rendering: "mnemonic op1, op2". Re-parsing it yields the same
  // instruction (round-trip is exact modulo whitespace collapsing).
  std::string text() const {
    std::string out = mnemonic;
    for (std::size_t i = 0; i < operands.size(); ++i) {
      out += (i == 0 ? " " : ", ");
      out += operands[i];
    }
    return out;
  }

  bool operator==(const Instruction&) const = default;
};

struct LineParse {
  enum class Kind { instruction, skip, error };
  Kind kind = Kind::skip;
  Instruction instr;   // set when kind == instruction
  std::string reason;  // set when kind == error
};

namespace detail {

inline bool is_space(char c) {
  return c == ' ' || c == '\t' || c == '\r' || c == '\n' || c == '\f' ||
         c == '\v';
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
  while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
  return s;
}

// Collapse runs of whitespace to single spaces.
inline std::string collapse_ws(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  bool in_ws = false;
  for (char c : s) {
    if (is_space(c)) {
      in_ws = true;
      continue;
    }
    if (in_ws && !out.empty()) out += ' ';
    in_ws = false;
    out += c;
  }
  return out;
}

}  // namespace detail

// Parses one raw trace line into an instruction. Blank lines and lines whose
// first non-space character is '#' are skipped. Lines holding non-printable
// bytes are reported as parse errors, never silently dropped. Operands are
// split on commas at bracket depth zero, so "mov byte ptr [ebp-0x19], al"
// has exactly two operands.
inline LineParse parse_trace_line(std::string_view line) {
  LineParse out;
  for (char c : line) {
    const unsigned char u = static_cast<unsigned char>(c);
    if ((u < 0x20 && !detail::is_space(c)) || u == 0x7f) {
      out.kind = LineParse::Kind::error;
      out.reason = "non-printable byte in line";
      return out;
    }
  }
  const std::string_view t = detail::trim(line);
  if (t.empty() || t.front() == '#') {
    out.kind = LineParse::Kind::skip;
    return out;
  }
  std::size_t i = 0;
  while (i < t.size() && !detail::is_space(t[i])) ++i;
  std::string mnemonic(t.substr(0, i));
  for (char& c : mnemonic)
    c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));

  out.kind = LineParse::Kind::instruction;
  out.instr.mnemonic = std::move(mnemonic);

  const std::string_view rest = detail::trim(t.substr(i));
  if (rest.empty()) return out;

  int depth = 0;
  std::size_t start = 0;
  for (std::size_t j = 0; j <= rest.size(); ++j) {
    if (j < rest.size()) {
      const char c = rest[j];
      if (c == '[') ++depth;
      else if (c == ']') --depth;
      if (!(c == ',' && depth <= 0)) continue;
    }
    out.instr.operands.push_back(
        detail::collapse_ws(rest.substr(start, j - start)));
    start = j + 1;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Samples and corpus manifest
// ---------------------------------------------------------------------------

struct ParseError {
  std::size_t line_no = 0;  // 1-based
  std::string reason;
};

// One traced binary: its identity plus the instruction stream.
struct RawSample {
  std::string sample_id;
  Label label = Label::benign;
  std::string family;
  std::vector<Instruction> instructions;
  std::vector<ParseError> parse_errors;
};

namespace detail {

// Trace files follow a Type-Family-Hash naming convention; the family is the
// middle dash-separated field when present.
inline std::string family_from_stem(const std::string& stem) {
  const std::size_t a = stem.find('-');
  if (a == std::string::npos) return "Unknown";
  const std::size_t b = stem.find('-', a + 1);
  if (b == std::string::npos) return "Unknown";
  return stem.substr(a + 1, b - a - 1);
}

}  // namespace detail

inline RawSample load_sample(const std::filesystem::path& path, Label label,
                             std::string sample_id = {},
                             std::string family = {}) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open trace file: " + path.string());

  RawSample s;
  const std::string stem = path.stem().string();
  s.sample_id = sample_id.empty() ? stem : std::move(sample_id);
  s.family = family.empty() ? detail::family_from_stem(stem) : std::move(family);
  s.label = label;

  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    LineParse p = parse_trace_line(line);
    switch (p.kind) {
      case LineParse::Kind::instruction:
        s.instructions.push_back(std::move(p.instr));
        break;
      case LineParse::Kind::error:
        s.parse_errors.push_back({line_no, std::move(p.reason)});
        break;
      case LineParse::Kind::skip:
        break;
    }
  }
  if (s.instructions.empty())
    throw DataError("sample has no instructions: " + path.string());
  return s;
}

struct ManifestEntry {
  std::string path;  // relative to the manifest's directory
  std::string sample_id;
  Label label = Label::benign;
  std::string family;
  Split split = Split::train;
};

struct CorpusManifest {
  std::vector<ManifestEntry> entries;

  static CorpusManifest parse(const nlohmann::json& j) {
    if (!j.is_array())
      throw ConfigError("manifest must be a JSON array of entries");
    CorpusManifest m;
    std::set<std::string> paths, ids;
    for (const auto& e : j) {
      ManifestEntry entry;
      if (!e.contains("path") || !e.contains("label") || !e.contains("split"))
        throw ConfigError("manifest entry needs path, label and split fields");
      entry.path = e.at("path").get<std::string>();
      entry.label = label_from_string(e.at("label").get<std::string>());
      entry.split = split_from_string(e.at("split").get<std::string>());
      const std::string stem =
          std::filesystem::path(entry.path).stem().string();
      entry.sample_id = e.value("sample_id", stem);
      entry.family = e.value("family", detail::family_from_stem(stem));
      if (!paths.insert(entry.path).second)
        throw ConfigError("manifest lists path twice: " + entry.path);
      if (!ids.insert(entry.sample_id).second)
        throw ConfigError("manifest lists sample_id twice: " + entry.sample_id);
      m.entries.push_back(std::move(entry));
    }
    return m;
  }

  static CorpusManifest load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open manifest: " + path.string());
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("manifest is not valid JSON (" + path.string() +
                        "): " + e.what());
    }
    return parse(j);
  }
};

struct LoadedCorpus {
  std::vector<RawSample> samples;         // manifest order
  std::array<std::size_t, 3> split_of;    // index by static_cast<int>(Split)
  std::vector<Split> splits;              // split per sample, manifest order
  std::size_t parse_error_count = 0;
};

inline LoadedCorpus load_corpus(const CorpusManifest& manifest,
                                const std::filesystem::path& base_dir) {
  LoadedCorpus c;
  c.split_of = {0, 0, 0};
  for (const ManifestEntry& e : manifest.entries) {
    RawSample s = load_sample(base_dir / e.path, e.label, e.sample_id, e.family);
    c.parse_error_count += s.parse_errors.size();
    c.split_of[static_cast<std::size_t>(e.split)] += 1;
    c.splits.push_back(e.split);
    c.samples.push_back(std::move(s));
  }
  return c;
}

}  // namespace pulse
