#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pulse/errors.hpp"
#include "pulse/normalize.hpp"
#include "pulse/rng.hpp"
#include "pulse/trace.hpp"

namespace pulse {

// Synthetic trace corpus with known ground truth, for exercising the whole
// pipeline without real binaries. Each class draws from its own pool of
// function templates (plus a configurable shared pool that lands in both
// classes, which is what the cross-label filter must catch). Template usage
// frequencies across the training split follow a configurable power law,
// realized by largest-remainder quotas rather than iid sampling so the
// configured exponent is recovered exactly up to rounding.
//
// Validation and test samples mix two kinds of functions:
//   leaked  - drawn from the training pools (leakage removal must drop them)
//   novel   - freshly built, guaranteed absent from every pool
// so after leakage removal there is still signal to classify.

struct SyntheticSplit {
  std::size_t benign = 0;
  std::size_t malicious = 0;
};

struct SyntheticSpec {
  SyntheticSplit train{};
  SyntheticSplit validation{};
  SyntheticSplit test{};
  std::size_t funcs_per_sample_min = 10;
  std::size_t funcs_per_sample_max = 30;
  std::size_t instrs_per_func_min = 6;
  std::size_t instrs_per_func_max = 20;
  std::size_t templates_per_class = 100;
  double overlap_fraction = 0.3;   // of each class pool that is shared
  double zipf_exponent = -1.0;     // template frequency law f(r) ~ r^a
  double leak_fraction = 0.3;      // of val/test functions drawn from pools
  NormalizationMode mode{};        // must match the downstream pipeline mode
  std::uint64_t seed = 1;

  void validate() const {
    if (train.benign == 0 || train.malicious == 0)
      throw ConfigError("synthetic spec needs training samples of both classes");
    if (funcs_per_sample_min == 0 || funcs_per_sample_min > funcs_per_sample_max)
      throw ConfigError("funcs_per_sample range is empty");
    if (instrs_per_func_min < 3 || instrs_per_func_min > instrs_per_func_max)
      throw ConfigError("instrs_per_func range must start at 3 or more");
    if (templates_per_class < 2)
      throw ConfigError("templates_per_class must be at least 2");
    if (overlap_fraction < 0.0 || overlap_fraction > 1.0)
      throw ConfigError("overlap_fraction must lie in [0, 1]");
    if (leak_fraction < 0.0 || leak_fraction > 1.0)
      throw ConfigError("leak_fraction must lie in [0, 1]");
    if (zipf_exponent > 0.0)
      throw ConfigError("zipf_exponent must be non-positive");
  }

  nlohmann::json to_json() const {
    return {{"train", {{"benign", train.benign}, {"malicious", train.malicious}}},
            {"validation",
             {{"benign", validation.benign}, {"malicious", validation.malicious}}},
            {"test", {{"benign", test.benign}, {"malicious", test.malicious}}},
            {"funcs_per_sample", {funcs_per_sample_min, funcs_per_sample_max}},
            {"instrs_per_func", {instrs_per_func_min, instrs_per_func_max}},
            {"templates_per_class", templates_per_class},
            {"overlap_fraction", overlap_fraction},
            {"zipf_exponent", zipf_exponent},
            {"leak_fraction", leak_fraction},
            {"style", to_string(mode.style)},
            {"address_threshold", mode.address_threshold},
            {"seed", seed}};
  }

  static SyntheticSpec from_json(const nlohmann::json& j) {
    SyntheticSpec s;
    auto split = [&](const char* key, SyntheticSplit& out) {
      if (!j.contains(key)) return;
      out.benign = j.at(key).value("benign", std::size_t{0});
      out.malicious = j.at(key).value("malicious", std::size_t{0});
    };
    split("train", s.train);
    split("validation", s.validation);
    split("test", s.test);
    if (j.contains("funcs_per_sample")) {
      s.funcs_per_sample_min = j.at("funcs_per_sample").at(0).get<std::size_t>();
      s.funcs_per_sample_max = j.at("funcs_per_sample").at(1).get<std::size_t>();
    }
    if (j.contains("instrs_per_func")) {
      s.instrs_per_func_min = j.at("instrs_per_func").at(0).get<std::size_t>();
      s.instrs_per_func_max = j.at("instrs_per_func").at(1).get<std::size_t>();
    }
    s.templates_per_class = j.value("templates_per_class", std::size_t{100});
    s.overlap_fraction = j.value("overlap_fraction", 0.3);
    s.zipf_exponent = j.value("zipf_exponent", -1.0);
    s.leak_fraction = j.value("leak_fraction", 0.3);
    if (j.contains("style"))
      s.mode.style = norm_style_from_string(j.at("style").get<std::string>());
    s.mode.address_threshold =
        j.value("address_threshold", std::uint64_t{0x10000});
    s.seed = j.value("seed", std::uint64_t{1});
    return s;
  }
};

struct GeneratorLog {
  std::size_t n_shared_templates = 0;
  std::vector<std::string> shared_texts;         // sorted normalized texts
  std::vector<std::string> cross_label_realized; // shared texts placed in both
                                                 // classes of the train split
  std::map<std::string, std::uint64_t> train_counts_benign;
  std::map<std::string, std::uint64_t> train_counts_malicious;
  std::size_t novel_validation = 0, novel_test = 0;
  std::size_t leaked_validation = 0, leaked_test = 0;

  nlohmann::json to_json(const SyntheticSpec& spec) const {
    return {{"spec", spec.to_json()},
            {"n_shared_templates", n_shared_templates},
            {"shared_texts", shared_texts},
            {"cross_label_realized", cross_label_realized},
            {"train_counts_benign", train_counts_benign},
            {"train_counts_malicious", train_counts_malicious},
            {"novel", {{"validation", novel_validation}, {"test", novel_test}}},
            {"leaked",
             {{"validation", leaked_validation}, {"test", leaked_test}}}};
  }
};

namespace detail {

// Concrete instruction strings for one class, built by crossing the class's
// mnemonics with a few operand shapes. ebp/esp never appear as operands so
// "push ebp" stays a pure prologue marker.
inline std::vector<std::string> build_inventory(
    const std::vector<std::string>& unary,
    const std::vector<std::string>& binary,
    const std::vector<std::string>& jumps, unsigned salt) {
  static const char* regs[6] = {"eax", "ebx", "ecx", "edx", "esi", "edi"};
  std::vector<std::string> out;
  for (const std::string& m : unary)
    for (int r = 0; r < 6; ++r) out.push_back(m + " " + regs[r]);
  for (std::size_t mi = 0; mi < binary.size(); ++mi) {
    const std::string& m = binary[mi];
    for (int r = 0; r < 6; ++r) {
      const char* ra = regs[r];
      const char* rb = regs[(r + 1 + mi) % 6];
      out.push_back(m + " " + ra + ", " + rb);
      char imm[32];
      std::snprintf(imm, sizeof(imm), "0x%x",
                    static_cast<unsigned>((r + 1) * 8 + mi + salt) & 0xfff);
      out.push_back(m + " " + ra + ", " + imm);
      char off[32];
      std::snprintf(off, sizeof(off), "0x%x",
                    static_cast<unsigned>(4 * (r + 1 + mi)) & 0xff);
      out.push_back(m + " " + ra + ", dword ptr [" + rb + "+" + off + "]");
      out.push_back(std::string(m) + " dword ptr [" + ra + "-" + off + "], " +
                    rb);
    }
  }
  for (std::size_t ji = 0; ji < jumps.size(); ++ji) {
    char tgt[32];
    std::snprintf(tgt, sizeof(tgt), "0x%x",
                  0x40100000u + 0x1000u * static_cast<unsigned>(ji) + salt);
    out.push_back(jumps[ji] + " " + tgt);
  }
  return out;
}

inline std::vector<std::string> benign_inventory() {
  return build_inventory({"push", "pop", "inc"},
                         {"mov", "add", "lea", "imul", "shl"}, {"jz", "jbe"},
                         0x11);
}

inline std::vector<std::string> malicious_inventory() {
  return build_inventory({"dec", "not", "neg"},
                         {"xor", "cmp", "test", "or", "and"}, {"jnz", "ja"},
                         0x37);
}

inline std::vector<std::string> shared_inventory() {
  return build_inventory({"nop"}, {"xchg", "adc", "sbb"}, {"jmp"}, 0x53);
}

struct FunctionLines {
  std::vector<std::string> lines;
  std::string norm_text;
};

// Normalized sentence of a stand-alone function body.
inline std::string normalized_text_of(const std::vector<std::string>& lines,
                                      const NormalizationMode& mode) {
  std::string text;
  for (const std::string& line : lines) {
    LineParse p = parse_trace_line(line);
    if (p.kind != LineParse::Kind::instruction)
      throw ContractError("generator produced an unparsable line: " + line);
    for (const std::string& w : normalize_instruction(p.instr, mode)) {
      if (!text.empty()) text += ' ';
      text += w;
    }
  }
  return text;
}

inline FunctionLines make_function(Rng& rng,
                                   const std::vector<std::string>& inventory,
                                   std::size_t n_instructions,
                                   const NormalizationMode& mode) {
  FunctionLines f;
  f.lines.push_back("push ebp");
  for (std::size_t i = 0; i + 2 < n_instructions; ++i)
    f.lines.push_back(inventory[rng.index(inventory.size())]);
  switch (rng.index(4)) {
    case 0: f.lines.push_back("ret"); break;
    case 1: f.lines.push_back("ret 0x4"); break;
    case 2: f.lines.push_back("ret 0x10"); break;
    default: {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "call 0x%llx",
                    static_cast<unsigned long long>(
                        rng.uniform_int(0x10000, 0xffffffffULL)));
      f.lines.push_back(buf);
    }
  }
  f.norm_text = normalized_text_of(f.lines, mode);
  return f;
}

// Keeps drawing until the normalized text is new; duplicate templates would
// silently change pool semantics, so exhaustion is an error.
inline FunctionLines make_distinct_function(
    Rng& rng, const std::vector<std::string>& inventory, std::size_t n_min,
    std::size_t n_max, const NormalizationMode& mode,
    std::set<std::string>& used_texts) {
  for (int attempt = 0; attempt < 1000; ++attempt) {
    const std::size_t n = static_cast<std::size_t>(
        rng.uniform_int(n_min, n_max));
    FunctionLines f = make_function(rng, inventory, n, mode);
    if (used_texts.insert(f.norm_text).second) return f;
  }
  throw ContractError(
      "could not generate a distinct function after 1000 attempts; "
      "widen instrs_per_func or shrink templates_per_class");
}

// Largest-remainder apportionment of `total` slots over weights r^a.
inline std::vector<std::uint64_t> power_law_quota(std::size_t n_ranks,
                                                  double exponent,
                                                  std::uint64_t total) {
  std::vector<double> p(n_ranks);
  double norm = 0.0;
  for (std::size_t r = 0; r < n_ranks; ++r) {
    p[r] = std::pow(static_cast<double>(r + 1), exponent);
    norm += p[r];
  }
  std::vector<std::uint64_t> counts(n_ranks);
  std::vector<std::pair<double, std::size_t>> fractional(n_ranks);
  std::uint64_t assigned = 0;
  for (std::size_t r = 0; r < n_ranks; ++r) {
    const double ideal = static_cast<double>(total) * p[r] / norm;
    counts[r] = static_cast<std::uint64_t>(std::floor(ideal));
    assigned += counts[r];
    fractional[r] = {ideal - std::floor(ideal), r};
  }
  std::stable_sort(fractional.begin(), fractional.end(),
                   [](const auto& a, const auto& b) {
                     if (a.first != b.first) return a.first > b.first;
                     return a.second < b.second;
                   });
  for (std::uint64_t i = 0; assigned < total; ++i, ++assigned)
    counts[fractional[i % n_ranks].second] += 1;
  return counts;
}

}  // namespace detail

// Writes traces/<sample_id>.txt files, manifest.json and generator_log.json
// under out_dir. Returns the log for direct inspection.
inline GeneratorLog generate_synthetic_corpus(
    const SyntheticSpec& spec, const std::filesystem::path& out_dir) {
  spec.validate();
  namespace fs = std::filesystem;
  fs::create_directories(out_dir / "traces");
  Rng rng(spec.seed);

  const std::vector<std::string> inv_b = detail::benign_inventory();
  const std::vector<std::string> inv_m = detail::malicious_inventory();
  const std::vector<std::string> inv_s = detail::shared_inventory();

  // --- template pools -------------------------------------------------------
  const std::size_t T = spec.templates_per_class;
  std::size_t n_shared = static_cast<std::size_t>(
      std::llround(spec.overlap_fraction * static_cast<double>(T)));
  if (spec.overlap_fraction < 1.0 && n_shared >= T) n_shared = T - 1;

  std::set<std::string> used_texts;
  std::vector<detail::FunctionLines> shared_pool, pool_b, pool_m;
  for (std::size_t i = 0; i < n_shared; ++i)
    shared_pool.push_back(detail::make_distinct_function(
        rng, inv_s, spec.instrs_per_func_min, spec.instrs_per_func_max,
        spec.mode, used_texts));
  for (std::size_t i = 0; i + n_shared < T; ++i)
    pool_b.push_back(detail::make_distinct_function(
        rng, inv_b, spec.instrs_per_func_min, spec.instrs_per_func_max,
        spec.mode, used_texts));
  for (std::size_t i = 0; i + n_shared < T; ++i)
    pool_m.push_back(detail::make_distinct_function(
        rng, inv_m, spec.instrs_per_func_min, spec.instrs_per_func_max,
        spec.mode, used_texts));
  // Shared templates close each class pool; ranks are pool positions after
  // a deterministic shuffle so the frequency law is not correlated with class.
  pool_b.insert(pool_b.end(), shared_pool.begin(), shared_pool.end());
  pool_m.insert(pool_m.end(), shared_pool.begin(), shared_pool.end());
  rng.shuffle(pool_b);
  rng.shuffle(pool_m);

  GeneratorLog log;
  log.n_shared_templates = n_shared;
  for (const auto& f : shared_pool) log.shared_texts.push_back(f.norm_text);
  std::sort(log.shared_texts.begin(), log.shared_texts.end());
  const std::set<std::string> shared_set(log.shared_texts.begin(),
                                         log.shared_texts.end());

  // --- sample bookkeeping ----------------------------------------------------
  struct PendingSample {
    std::string id;
    std::string family;
    Label label;
    Split split;
    std::vector<const detail::FunctionLines*> functions;
    std::vector<detail::FunctionLines> owned;  // novel functions live here
  };
  std::vector<PendingSample> samples;

  static const char* mal_families[4] = {"SynthA", "SynthB", "SynthC",
                                        "SynthD"};
  std::size_t counter = 0;
  auto new_sample = [&](Label label, Split split) {
    PendingSample s;
    char buf[64];
    if (label == Label::benign) {
      std::snprintf(buf, sizeof(buf), "Benign-Synth-%06zx", counter++);
      s.family = "Synth";
    } else {
      s.family = mal_families[counter % 4];
      std::snprintf(buf, sizeof(buf), "Ransomware-%s-%06zx", s.family.c_str(),
                    counter++);
    }
    s.id = buf;
    s.label = label;
    s.split = split;
    return s;
  };

  // --- training split: quota-realized template frequencies -------------------
  auto realize_train = [&](Label label, std::size_t n_samples,
                           const std::vector<detail::FunctionLines>& pool,
                           std::map<std::string, std::uint64_t>& counts_out) {
    std::vector<std::size_t> per_sample(n_samples);
    std::uint64_t slots = 0;
    for (std::size_t i = 0; i < n_samples; ++i) {
      per_sample[i] = static_cast<std::size_t>(rng.uniform_int(
          spec.funcs_per_sample_min, spec.funcs_per_sample_max));
      slots += per_sample[i];
    }
    const std::vector<std::uint64_t> quota =
        detail::power_law_quota(pool.size(), spec.zipf_exponent, slots);
    std::vector<std::size_t> deck;
    deck.reserve(slots);
    for (std::size_t r = 0; r < pool.size(); ++r) {
      for (std::uint64_t k = 0; k < quota[r]; ++k) deck.push_back(r);
      if (quota[r] > 0) counts_out[pool[r].norm_text] += quota[r];
    }
    rng.shuffle(deck);
    std::size_t next = 0;
    for (std::size_t i = 0; i < n_samples; ++i) {
      PendingSample s = new_sample(label, Split::train);
      for (std::size_t k = 0; k < per_sample[i]; ++k)
        s.functions.push_back(&pool[deck[next++]]);
      samples.push_back(std::move(s));
    }
  };
  realize_train(Label::benign, spec.train.benign, pool_b,
                log.train_counts_benign);
  realize_train(Label::malicious, spec.train.malicious, pool_m,
                log.train_counts_malicious);

  // --- validation / test splits: leaked + novel ------------------------------
  // Leaked draws follow the same power law via inverse CDF.
  auto zipf_draw = [&](std::size_t n_ranks) {
    double norm = 0.0;
    for (std::size_t r = 0; r < n_ranks; ++r)
      norm += std::pow(static_cast<double>(r + 1), spec.zipf_exponent);
    double u = rng.uniform() * norm;
    for (std::size_t r = 0; r < n_ranks; ++r) {
      u -= std::pow(static_cast<double>(r + 1), spec.zipf_exponent);
      if (u <= 0.0) return r;
    }
    return n_ranks - 1;
  };

  auto realize_eval = [&](Label label, Split split, std::size_t n_samples,
                          const std::vector<detail::FunctionLines>& pool,
                          const std::vector<std::string>& inventory,
                          std::size_t& novel_count, std::size_t& leak_count) {
    for (std::size_t i = 0; i < n_samples; ++i) {
      PendingSample s = new_sample(label, split);
      const std::size_t k = static_cast<std::size_t>(rng.uniform_int(
          spec.funcs_per_sample_min, spec.funcs_per_sample_max));
      const std::size_t n_leak = static_cast<std::size_t>(
          std::llround(spec.leak_fraction * static_cast<double>(k)));
      std::vector<const detail::FunctionLines*> fns;
      for (std::size_t j = 0; j < n_leak; ++j) {
        fns.push_back(&pool[zipf_draw(pool.size())]);
        ++leak_count;
      }
      for (std::size_t j = n_leak; j < k; ++j) {
        s.owned.push_back(detail::make_distinct_function(
            rng, inventory, spec.instrs_per_func_min, spec.instrs_per_func_max,
            spec.mode, used_texts));
        ++novel_count;
      }
      // Interleave: plan positions then fill, leaked first then novel.
      for (const auto& f : s.owned) fns.push_back(&f);
      rng.shuffle(fns);
      s.functions = std::move(fns);
      samples.push_back(std::move(s));
    }
  };
  realize_eval(Label::benign, Split::validation, spec.validation.benign,
               pool_b, inv_b, log.novel_validation, log.leaked_validation);
  realize_eval(Label::malicious, Split::validation, spec.validation.malicious,
               pool_m, inv_m, log.novel_validation, log.leaked_validation);
  realize_eval(Label::benign, Split::test, spec.test.benign, pool_b, inv_b,
               log.novel_test, log.leaked_test);
  realize_eval(Label::malicious, Split::test, spec.test.malicious, pool_m,
               inv_m, log.novel_test, log.leaked_test);

  // --- cross-label realization check -----------------------------------------
  std::set<std::string> in_benign_train, in_malicious_train;
  for (const PendingSample& s : samples) {
    if (s.split != Split::train) continue;
    auto& dst = s.label == Label::benign ? in_benign_train : in_malicious_train;
    for (const auto* f : s.functions) dst.insert(f->norm_text);
  }
  for (const std::string& t : in_benign_train)
    if (in_malicious_train.contains(t)) log.cross_label_realized.push_back(t);
  // Already sorted: std::set iterates in order.

  // --- emit files -------------------------------------------------------------
  nlohmann::json manifest = nlohmann::json::array();
  for (const PendingSample& s : samples) {
    const fs::path rel = fs::path("traces") / (s.id + ".txt");
    std::ofstream out(out_dir / rel, std::ios::binary);
    if (!out)
      throw DataError("cannot write trace file: " + (out_dir / rel).string());
    for (const auto* f : s.functions)
      for (const std::string& line : f->lines) out << line << '\n';
    manifest.push_back({{"path", rel.generic_string()},
                        {"sample_id", s.id},
                        {"label", to_string(s.label)},
                        {"family", s.family},
                        {"split", to_string(s.split)}});
  }
  {
    std::ofstream out(out_dir / "manifest.json", std::ios::binary);
    if (!out) throw DataError("cannot write manifest.json");
    out << manifest.dump(2) << '\n';
  }
  {
    std::ofstream out(out_dir / "generator_log.json", std::ios::binary);
    if (!out) throw DataError("cannot write generator_log.json");
    out << log.to_json(spec).dump(2) << '\n';
  }
  return log;
}

}  // namespace pulse
