#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "pulse/checkpoint.hpp"
#include "pulse/corpus.hpp"
#include "pulse/errors.hpp"
#include "pulse/hash.hpp"
#include "pulse/model.hpp"
#include "pulse/normalize.hpp"
#include "pulse/svm.hpp"
#include "pulse/synthetic.hpp"
#include "pulse/tokenizer.hpp"
#include "pulse/trace.hpp"
#include "pulse/train.hpp"
#include "pulse/zipf.hpp"

namespace pulse {

// File-based pipeline: every stage reads artifacts from disk and writes new
// ones, plus a manifest recording content hashes of its config, inputs and
// outputs. A stage whose manifest still matches reality is skipped, so
// re-running with unchanged inputs is a no-op and any edit upstream
// invalidates exactly the stages that can see it.
//
//   ingest -> normalize -> corpus -> tokenizer -> stats
//                   \         \-> zipf
//                    \-> leakage -> train_model -> classify -> svm_fit
//                                                      \-> evaluate

struct TokenizerSettings {
  std::size_t vocab_size = 30000;
  bool punctuation_split = true;
  std::size_t token_budget = 256;  // reporting threshold for long functions
};

struct TrainingSettings {
  std::size_t epochs = 3;
  std::size_t batch_size = 16;
  double learning_rate = 3e-4;
};

struct PipelineConfig {
  std::filesystem::path corpus_dir;
  std::filesystem::path manifest_path;  // default: corpus_dir/manifest.json
  std::filesystem::path output_dir;
  NormalizationMode normalization{};
  std::size_t min_function_len = 6;
  TokenizerSettings tokenizer{};
  ModelConfig model{};  // vocab_size 0 = fill from the trained tokenizer
  TrainingSettings training{};
  SvmOptions svm{};
  std::uint64_t seed = 0;
  std::optional<SyntheticSpec> synthetic;

  void validate() const {
    if (corpus_dir.empty()) throw ConfigError("corpus_dir must be set");
    if (output_dir.empty()) throw ConfigError("output_dir must be set");
    if (min_function_len == 0)
      throw ConfigError("min_function_len must be positive");
    if (tokenizer.vocab_size < 5)
      throw ConfigError("tokenizer vocab_size must be at least 5");
    if (tokenizer.token_budget < 2)
      throw ConfigError("token_budget must be at least 2");
  }

  nlohmann::json to_json() const {
    nlohmann::json j = {
        {"corpus_dir", corpus_dir.generic_string()},
        {"manifest", manifest_path.generic_string()},
        {"output_dir", output_dir.generic_string()},
        {"normalization",
         {{"style", to_string(normalization.style)},
          {"address_threshold", normalization.address_threshold}}},
        {"min_function_len", min_function_len},
        {"tokenizer",
         {{"vocab_size", tokenizer.vocab_size},
          {"punctuation_split", tokenizer.punctuation_split},
          {"token_budget", tokenizer.token_budget}}},
        {"model",
         {{"n_layers", model.n_layers},
          {"hidden", model.hidden},
          {"n_heads", model.n_heads},
          {"ffn", model.ffn},
          {"max_len", model.max_len},
          {"attention", to_string(model.attention)},
          {"pooling", to_string(model.pooling)},
          {"dropout", model.dropout}}},
        {"training",
         {{"epochs", training.epochs},
          {"batch_size", training.batch_size},
          {"learning_rate", training.learning_rate}}},
        {"svm", {{"C", svm.C}, {"iterations", svm.iterations}}},
        {"seed", seed}};
    if (synthetic) j["synthetic"] = synthetic->to_json();
    return j;
  }

  static PipelineConfig from_json(const nlohmann::json& j) {
    PipelineConfig c;
    c.corpus_dir = j.at("corpus_dir").get<std::string>();
    c.manifest_path = j.contains("manifest")
                          ? std::filesystem::path(j.at("manifest").get<std::string>())
                          : c.corpus_dir / "manifest.json";
    c.output_dir = j.at("output_dir").get<std::string>();
    if (j.contains("normalization")) {
      const auto& n = j.at("normalization");
      if (n.contains("style"))
        c.normalization.style =
            norm_style_from_string(n.at("style").get<std::string>());
      c.normalization.address_threshold =
          n.value("address_threshold", std::uint64_t{0x10000});
    }
    c.min_function_len = j.value("min_function_len", std::size_t{6});
    if (j.contains("tokenizer")) {
      const auto& t = j.at("tokenizer");
      c.tokenizer.vocab_size = t.value("vocab_size", std::size_t{30000});
      c.tokenizer.punctuation_split = t.value("punctuation_split", true);
      c.tokenizer.token_budget = t.value("token_budget", std::size_t{256});
    }
    if (j.contains("model")) {
      const auto& m = j.at("model");
      c.model.n_layers = m.value("n_layers", std::size_t{2});
      c.model.hidden = m.value("hidden", std::size_t{64});
      c.model.n_heads = m.value("n_heads", std::size_t{4});
      c.model.ffn = m.value("ffn", std::size_t{256});
      c.model.max_len = m.value("max_len", std::size_t{128});
      if (m.contains("attention"))
        c.model.attention =
            attention_from_string(m.at("attention").get<std::string>());
      if (m.contains("pooling"))
        c.model.pooling = pooling_from_string(m.at("pooling").get<std::string>());
      c.model.dropout = m.value("dropout", 0.0);
    }
    if (j.contains("training")) {
      const auto& t = j.at("training");
      c.training.epochs = t.value("epochs", std::size_t{3});
      c.training.batch_size = t.value("batch_size", std::size_t{16});
      c.training.learning_rate = t.value("learning_rate", 3e-4);
    }
    if (j.contains("svm")) {
      c.svm.C = j.at("svm").value("C", 1.0);
      c.svm.iterations = j.at("svm").value("iterations", std::size_t{4000});
    }
    c.seed = j.value("seed", std::uint64_t{0});
    if (j.contains("synthetic"))
      c.synthetic = SyntheticSpec::from_json(j.at("synthetic"));
    return c;
  }

  static PipelineConfig load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open config: " + path.string());
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config is not valid JSON (" + path.string() +
                        "): " + e.what());
    }
    return from_json(j);
  }
};

struct StageResult {
  std::string stage;
  bool executed = false;  // false = cache hit
};

namespace detail {

// Shortest-roundtrip decimal rendering; identical bits give identical text on
// every platform, which keeps CSV artifacts byte-stable.
inline std::string dtos(double v) { return nlohmann::json(v).dump(); }

inline void write_text(const std::filesystem::path& path,
                       const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write: " + path.string());
  out << content;
  if (!out) throw DataError("write failed: " + path.string());
}

inline void write_json_file(const std::filesystem::path& path,
                            const nlohmann::json& j) {
  write_text(path, j.dump(2) + "\n");
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("not valid JSON (" + path.string() + "): " + e.what());
  }
  return j;
}

inline std::vector<nlohmann::json> read_jsonl(
    const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open: " + path.string());
  std::vector<nlohmann::json> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      out.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw DataError("bad JSONL line in " + path.string() + ": " + e.what());
    }
  }
  return out;
}

inline std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open: " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  return lines;
}

}  // namespace detail

class Pipeline {
 public:
  explicit Pipeline(PipelineConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    if (cfg_.manifest_path.empty())
      cfg_.manifest_path = cfg_.corpus_dir / "manifest.json";
  }

  const PipelineConfig& config() const { return cfg_; }

  static const std::vector<std::string>& stage_order() {
    static const std::vector<std::string> order = {
        "ingest",   "normalize",   "corpus",   "zipf",    "tokenizer",
        "stats",    "leakage",     "train_model", "classify", "svm_fit",
        "evaluate"};
    return order;
  }

  // Runs the generator described by cfg.synthetic into cfg.corpus_dir.
  GeneratorLog run_synth() {
    if (!cfg_.synthetic)
      throw ConfigError("config has no \"synthetic\" block to generate from");
    SyntheticSpec spec = *cfg_.synthetic;
    spec.mode = cfg_.normalization;  // generator accounting must match
    GeneratorLog log = generate_synthetic_corpus(spec, cfg_.corpus_dir);
    const auto generated = cfg_.corpus_dir / "manifest.json";
    if (cfg_.manifest_path != generated)
      std::filesystem::copy_file(
          generated, cfg_.manifest_path,
          std::filesystem::copy_options::overwrite_existing);
    return log;
  }

  // Brings `target` and everything upstream of it up to date.
  std::vector<StageResult> ensure(const std::string& target) {
    require_stage_name(target);
    std::filesystem::create_directories(cfg_.output_dir / "stages");
    std::set<std::string> needed;
    collect_deps(target, needed);
    std::vector<StageResult> results;
    for (const std::string& stage : stage_order()) {
      if (!needed.contains(stage)) continue;
      StageResult r{stage, false};
      if (!stage_fresh(stage)) {
        run_stage(stage);
        record_stage(stage);
        r.executed = true;
      }
      results.push_back(r);
    }
    return results;
  }

  // --- artifact paths --------------------------------------------------------
  std::filesystem::path artifact(const std::string& rel) const {
    return cfg_.output_dir / rel;
  }

 private:
  PipelineConfig cfg_;
  mutable std::optional<CorpusManifest> manifest_cache_;

  static void require_stage_name(const std::string& s) {
    for (const std::string& n : stage_order())
      if (n == s) return;
    throw ConfigError("unknown stage: " + s);
  }

  static const std::map<std::string, std::vector<std::string>>& deps() {
    static const std::map<std::string, std::vector<std::string>> d = {
        {"ingest", {}},
        {"normalize", {"ingest"}},
        {"corpus", {"normalize"}},
        {"zipf", {"normalize"}},
        {"tokenizer", {"corpus"}},
        {"stats", {"corpus", "tokenizer"}},
        {"leakage", {"normalize", "corpus"}},
        {"train_model", {"corpus", "tokenizer", "leakage"}},
        {"classify", {"train_model", "leakage", "tokenizer"}},
        {"svm_fit", {"classify"}},
        {"evaluate", {"classify", "svm_fit", "leakage", "corpus"}}};
    return d;
  }

  void collect_deps(const std::string& stage, std::set<std::string>& out) const {
    if (out.contains(stage)) return;
    for (const std::string& d : deps().at(stage)) collect_deps(d, out);
    out.insert(stage);
  }

  const CorpusManifest& manifest() const {
    if (!manifest_cache_)
      manifest_cache_ = CorpusManifest::load(cfg_.manifest_path);
    return *manifest_cache_;
  }

  std::vector<std::filesystem::path> stage_inputs(const std::string& s) const {
    std::vector<std::filesystem::path> in;
    auto add_traces = [&] {
      in.push_back(cfg_.manifest_path);
      for (const ManifestEntry& e : manifest().entries)
        in.push_back(cfg_.corpus_dir / e.path);
    };
    if (s == "ingest" || s == "normalize" || s == "zipf") add_traces();
    if (s == "corpus") in.push_back(artifact("normalized/train.jsonl"));
    if (s == "zipf") {
      in.push_back(artifact("normalized/train.jsonl"));
      in.push_back(artifact("normalized/validation.jsonl"));
      in.push_back(artifact("normalized/test.jsonl"));
    }
    if (s == "tokenizer") {
      in.push_back(artifact("corpus/benign.txt"));
      in.push_back(artifact("corpus/malicious.txt"));
    }
    if (s == "stats") {
      in.push_back(artifact("corpus/corpus_report.json"));
      in.push_back(artifact("corpus/benign.txt"));
      in.push_back(artifact("corpus/malicious.txt"));
      in.push_back(artifact("tokenizer.json"));
    }
    if (s == "leakage") {
      in.push_back(artifact("normalized/validation.jsonl"));
      in.push_back(artifact("normalized/test.jsonl"));
      in.push_back(artifact("corpus/train_union.txt"));
    }
    if (s == "train_model") {
      in.push_back(artifact("corpus/benign.txt"));
      in.push_back(artifact("corpus/malicious.txt"));
      in.push_back(artifact("tokenizer.json"));
      in.push_back(artifact("filtered/validation.jsonl"));
    }
    if (s == "classify") {
      in.push_back(artifact("checkpoint.bin"));
      in.push_back(artifact("tokenizer.json"));
      in.push_back(artifact("filtered/validation.jsonl"));
      in.push_back(artifact("filtered/test.jsonl"));
    }
    if (s == "svm_fit") in.push_back(artifact("verdicts/validation.jsonl"));
    if (s == "evaluate") {
      in.push_back(artifact("verdicts/test.jsonl"));
      in.push_back(artifact("hyperplane.json"));
      in.push_back(artifact("filtered/test.jsonl"));
      in.push_back(artifact("corpus/train_union.txt"));
    }
    return in;
  }

  std::vector<std::filesystem::path> stage_outputs(const std::string& s) const {
    std::vector<std::filesystem::path> out;
    if (s == "ingest") out.push_back(artifact("ingest_report.json"));
    if (s == "normalize") {
      out.push_back(artifact("normalized/train.jsonl"));
      out.push_back(artifact("normalized/validation.jsonl"));
      out.push_back(artifact("normalized/test.jsonl"));
      out.push_back(artifact("normalize_report.json"));
    }
    if (s == "corpus") {
      out.push_back(artifact("corpus/benign.txt"));
      out.push_back(artifact("corpus/malicious.txt"));
      out.push_back(artifact("corpus/cross_label.txt"));
      out.push_back(artifact("corpus/train_union.txt"));
      out.push_back(artifact("corpus/corpus_report.json"));
    }
    if (s == "zipf") {
      out.push_back(artifact("zipf/instructions.csv"));
      out.push_back(artifact("zipf/instructions_fit.json"));
      out.push_back(artifact("zipf/functions.csv"));
      out.push_back(artifact("zipf/functions_fit.json"));
    }
    if (s == "tokenizer") out.push_back(artifact("tokenizer.json"));
    if (s == "stats") out.push_back(artifact("stats.json"));
    if (s == "leakage") {
      out.push_back(artifact("filtered/validation.jsonl"));
      out.push_back(artifact("filtered/test.jsonl"));
      out.push_back(artifact("leakage_report.json"));
    }
    if (s == "train_model") {
      out.push_back(artifact("checkpoint.bin"));
      out.push_back(artifact("training_report.json"));
    }
    if (s == "classify") {
      out.push_back(artifact("verdicts/validation.jsonl"));
      out.push_back(artifact("verdicts/test.jsonl"));
    }
    if (s == "svm_fit") out.push_back(artifact("hyperplane.json"));
    if (s == "evaluate") {
      out.push_back(artifact("verdict_report.jsonl"));
      out.push_back(artifact("metrics.json"));
      out.push_back(artifact("plot_data.csv"));
      out.push_back(artifact("audit_report.json"));
    }
    return out;
  }

  std::uint64_t config_hash() const { return fnv1a64(cfg_.to_json().dump()); }

  std::filesystem::path stage_manifest_path(const std::string& s) const {
    return cfg_.output_dir / "stages" / (s + ".manifest.json");
  }

  bool stage_fresh(const std::string& stage) const {
    namespace fs = std::filesystem;
    const fs::path mpath = stage_manifest_path(stage);
    if (!fs::exists(mpath)) return false;
    nlohmann::json m;
    try {
      m = detail::read_json_file(mpath);
    } catch (const DataError&) {
      return false;
    }
    if (!m.contains("config_hash") ||
        m.at("config_hash").get<std::string>() != hash_hex(config_hash()))
      return false;
    auto check = [&](const char* key,
                     const std::vector<fs::path>& paths) {
      if (!m.contains(key)) return false;
      const auto& rec = m.at(key);
      for (const fs::path& p : paths) {
        const std::string k = p.generic_string();
        if (!fs::exists(p) || !rec.contains(k)) return false;
        if (rec.at(k).get<std::string>() != hash_hex(hash_file(p)))
          return false;
      }
      return true;
    };
    try {
      return check("inputs", stage_inputs(stage)) &&
             check("outputs", stage_outputs(stage));
    } catch (const DataError&) {
      return false;  // e.g. corpus manifest unreadable -> stage must rerun
    }
  }

  void record_stage(const std::string& stage) const {
    nlohmann::json m;
    m["stage"] = stage;
    m["config_hash"] = hash_hex(config_hash());
    nlohmann::json ins = nlohmann::json::object();
    for (const auto& p : stage_inputs(stage))
      ins[p.generic_string()] = hash_hex(hash_file(p));
    nlohmann::json outs = nlohmann::json::object();
    for (const auto& p : stage_outputs(stage))
      outs[p.generic_string()] = hash_hex(hash_file(p));
    m["inputs"] = std::move(ins);
    m["outputs"] = std::move(outs);
    detail::write_json_file(stage_manifest_path(stage), m);
  }

  void run_stage(const std::string& stage) {
    namespace fs = std::filesystem;
    fs::create_directories(cfg_.output_dir);
    if (stage == "ingest") return do_ingest();
    if (stage == "normalize") return do_normalize();
    if (stage == "corpus") return do_corpus();
    if (stage == "zipf") return do_zipf();
    if (stage == "tokenizer") return do_tokenizer();
    if (stage == "stats") return do_stats();
    if (stage == "leakage") return do_leakage();
    if (stage == "train_model") return do_train_model();
    if (stage == "classify") return do_classify();
    if (stage == "svm_fit") return do_svm_fit();
    if (stage == "evaluate") return do_evaluate();
    throw ContractError("unhandled stage: " + stage);
  }

  // --- stage bodies -----------------------------------------------------------

  void do_ingest() {
    const LoadedCorpus corpus = load_corpus(manifest(), cfg_.corpus_dir);
    nlohmann::json per_sample = nlohmann::json::array();
    for (std::size_t i = 0; i < corpus.samples.size(); ++i) {
      const RawSample& s = corpus.samples[i];
      per_sample.push_back({{"sample_id", s.sample_id},
                            {"label", to_string(s.label)},
                            {"family", s.family},
                            {"split", to_string(corpus.splits[i])},
                            {"n_instructions", s.instructions.size()},
                            {"n_parse_errors", s.parse_errors.size()}});
    }
    detail::write_json_file(
        artifact("ingest_report.json"),
        {{"n_samples", corpus.samples.size()},
         {"split_counts",
          {{"train", corpus.split_of[0]},
           {"validation", corpus.split_of[1]},
           {"test", corpus.split_of[2]}}},
         {"parse_errors", corpus.parse_error_count},
         {"samples", std::move(per_sample)}});
  }

  void do_normalize() {
    namespace fs = std::filesystem;
    fs::create_directories(artifact("normalized"));
    const LoadedCorpus corpus = load_corpus(manifest(), cfg_.corpus_dir);
    std::array<std::string, 3> streams;
    std::array<std::size_t, 3> initial{0, 0, 0}, kept{0, 0, 0};
    for (std::size_t i = 0; i < corpus.samples.size(); ++i) {
      const RawSample& s = corpus.samples[i];
      const std::size_t split = static_cast<std::size_t>(corpus.splits[i]);
      std::vector<NormalizedFunction> funcs =
          segment_functions(s, cfg_.normalization);
      initial[split] += funcs.size();
      funcs = filter_short(std::move(funcs), cfg_.min_function_len);
      kept[split] += funcs.size();
      const std::string family = manifest().entries[i].family;
      for (const NormalizedFunction& f : funcs) {
        nlohmann::json rec = {{"sample_id", f.sample_id},
                              {"label", to_string(f.label)},
                              {"family", family},
                              {"index", f.index_in_sample},
                              {"n_instructions", f.n_instructions},
                              {"text", f.text}};
        streams[split] += rec.dump();
        streams[split] += '\n';
      }
    }
    detail::write_text(artifact("normalized/train.jsonl"), streams[0]);
    detail::write_text(artifact("normalized/validation.jsonl"), streams[1]);
    detail::write_text(artifact("normalized/test.jsonl"), streams[2]);
    detail::write_json_file(
        artifact("normalize_report.json"),
        {{"style", to_string(cfg_.normalization.style)},
         {"min_function_len", cfg_.min_function_len},
         {"functions_initial",
          {{"train", initial[0]},
           {"validation", initial[1]},
           {"test", initial[2]}}},
         {"functions_kept",
          {{"train", kept[0]}, {"validation", kept[1]}, {"test", kept[2]}}}});
  }

  // Rebuilds NormalizedFunction-equivalents from the normalize artifacts.
  struct FuncRec {
    std::string sample_id, family, text;
    Label label;
  };
  std::vector<FuncRec> load_funcs(const std::filesystem::path& p) const {
    std::vector<FuncRec> out;
    for (const nlohmann::json& j : detail::read_jsonl(p)) {
      FuncRec r;
      r.sample_id = j.at("sample_id").get<std::string>();
      r.family = j.at("family").get<std::string>();
      r.text = j.at("text").get<std::string>();
      r.label = label_from_string(j.at("label").get<std::string>());
      out.push_back(std::move(r));
    }
    return out;
  }

  void do_corpus() {
    std::filesystem::create_directories(artifact("corpus"));
    const std::vector<FuncRec> recs =
        load_funcs(artifact("normalized/train.jsonl"));
    std::vector<NormalizedFunction> funcs;
    funcs.reserve(recs.size());
    for (const FuncRec& r : recs) {
      NormalizedFunction f;
      f.sample_id = r.sample_id;
      f.label = r.label;
      f.text = r.text;
      funcs.push_back(std::move(f));
    }
    const LabeledCorpus corpus = build_labeled_corpus(funcs);
    auto write_set = [&](const char* name, const std::set<std::string>& s) {
      std::string body;
      for (const std::string& t : s) {
        body += t;
        body += '\n';
      }
      detail::write_text(artifact(std::string("corpus/") + name), body);
    };
    write_set("benign.txt", corpus.benign);
    write_set("malicious.txt", corpus.malicious);
    write_set("cross_label.txt", corpus.cross_label);
    write_set("train_union.txt", corpus.training_union());
    detail::write_json_file(
        artifact("corpus/corpus_report.json"),
        {{"binaries", corpus.stats.n_binaries},
         {"initial", corpus.stats.n_initial},
         {"deduplicated", corpus.stats.n_deduplicated},
         {"filtered", corpus.stats.n_filtered},
         {"cross_label_removed", corpus.cross_label.size()}});
  }

  void do_zipf() {
    std::filesystem::create_directories(artifact("zipf"));
    // Instruction-level items come straight from the traces so concatenated
    // jump words do not have to be re-assembled from function sentences.
    const LoadedCorpus corpus = load_corpus(manifest(), cfg_.corpus_dir);
    std::vector<std::string> instruction_items;
    for (const RawSample& s : corpus.samples) {
      for (const Instruction& ins : s.instructions) {
        const std::vector<std::string> words =
            normalize_instruction(ins, cfg_.normalization);
        std::string item;
        for (const std::string& w : words) {
          if (!item.empty()) item += ' ';
          item += w;
        }
        instruction_items.push_back(std::move(item));
      }
    }
    std::vector<std::string> function_items;
    for (const char* split : {"train", "validation", "test"})
      for (const FuncRec& r : load_funcs(
               artifact(std::string("normalized/") + split + ".jsonl")))
        function_items.push_back(r.text);

    auto emit = [&](const char* unit, const std::vector<std::string>& items) {
      const ZipfSeries series =
          zipf_rank_frequency(count_occurrences(items));
      std::string csv = "rank,frequency\n";
      for (const ZipfPoint& p : series.points) {
        csv += std::to_string(p.rank);
        csv += ',';
        csv += std::to_string(static_cast<std::uint64_t>(p.frequency));
        csv += '\n';
      }
      detail::write_text(artifact(std::string("zipf/") + unit + ".csv"), csv);
      nlohmann::json fit_json;
      try {
        const PowerLawFit fit = fit_power_law(series);
        fit_json = {{"exponent", fit.exponent},
                    {"intercept", fit.intercept},
                    {"r_squared", fit.r_squared},
                    {"n_points", series.points.size()}};
      } catch (const DataError& e) {
        fit_json = {{"error", e.what()},
                    {"n_points", series.points.size()}};
      }
      detail::write_json_file(
          artifact(std::string("zipf/") + unit + "_fit.json"), fit_json);
    };
    emit("instructions", instruction_items);
    emit("functions", function_items);
  }

  void do_tokenizer() {
    std::vector<std::string> texts = detail::read_lines(artifact("corpus/benign.txt"));
    for (std::string& t : detail::read_lines(artifact("corpus/malicious.txt")))
      texts.push_back(std::move(t));
    const TokenizerModel tok = train_tokenizer(
        texts, cfg_.tokenizer.vocab_size, cfg_.tokenizer.punctuation_split);
    tok.save(artifact("tokenizer.json"));
  }

  void do_stats() {
    const nlohmann::json corpus_report =
        detail::read_json_file(artifact("corpus/corpus_report.json"));
    const TokenizerModel tok = TokenizerModel::load(artifact("tokenizer.json"));
    std::vector<std::string> texts = detail::read_lines(artifact("corpus/benign.txt"));
    for (std::string& t : detail::read_lines(artifact("corpus/malicious.txt")))
      texts.push_back(std::move(t));
    std::size_t over = 0;
    std::unordered_map<std::string, std::size_t> cache;
    for (const std::string& text : texts) {
      std::size_t len = 2;  // leading/trailing specials
      for (std::string& w : pre_split(text, tok.punctuation_split)) {
        auto it = cache.find(w);
        if (it == cache.end()) {
          const std::size_t n = encode_word(tok, w).size();
          it = cache.emplace(std::move(w), n).first;
        }
        len += it->second;
      }
      if (len > cfg_.tokenizer.token_budget) ++over;
    }
    const double pct =
        texts.empty() ? 0.0
                      : 100.0 * static_cast<double>(over) /
                            static_cast<double>(texts.size());
    detail::write_json_file(
        artifact("stats.json"),
        {{"binaries", corpus_report.at("binaries")},
         {"initial", corpus_report.at("initial")},
         {"deduplicated", corpus_report.at("deduplicated")},
         {"filtered", corpus_report.at("filtered")},
         {"token_budget", cfg_.tokenizer.token_budget},
         {"pct_over_budget", pct},
         {"fragmentation_rate", fragmentation_rate(tok, texts)},
         {"tokenizer_vocab", tok.vocab_size()}});
  }

  void do_leakage() {
    std::filesystem::create_directories(artifact("filtered"));
    std::set<std::string> train_union;
    for (std::string& t : detail::read_lines(artifact("corpus/train_union.txt")))
      if (!t.empty()) train_union.insert(std::move(t));

    nlohmann::json report_splits = nlohmann::json::object();
    for (const char* split : {"validation", "test"}) {
      const std::vector<FuncRec> funcs = load_funcs(
          artifact(std::string("normalized/") + split + ".jsonl"));
      // Group by sample, preserving first-appearance order.
      std::vector<std::string> order;
      std::map<std::string, std::vector<const FuncRec*>> by_sample;
      std::map<std::string, std::pair<Label, std::string>> meta;
      for (const FuncRec& f : funcs) {
        if (!by_sample.contains(f.sample_id)) {
          order.push_back(f.sample_id);
          meta[f.sample_id] = {f.label, f.family};
        }
        by_sample[f.sample_id].push_back(&f);
      }
      std::size_t total_before = 0, total_after = 0;
      std::string body;
      for (const std::string& sid : order) {
        std::vector<std::string> texts;
        for (const FuncRec* f : by_sample[sid]) texts.push_back(f->text);
        total_before += texts.size();
        const std::vector<std::string> kept_texts =
            remove_leakage(texts, train_union);
        total_after += kept_texts.size();
        const nlohmann::json rec = {
            {"sample_id", sid},
            {"label", to_string(meta[sid].first)},
            {"family", meta[sid].second},
            {"n_before", texts.size()},
            {"functions", kept_texts}};
        body += rec.dump();
        body += '\n';
      }
      detail::write_text(
          artifact(std::string("filtered/") + split + ".jsonl"), body);
      report_splits[split] = {{"functions_before", total_before},
                              {"functions_after", total_after},
                              {"removed", total_before - total_after},
                              {"samples", order.size()}};
    }
    detail::write_json_file(artifact("leakage_report.json"),
                            {{"splits", std::move(report_splits)}});
  }

  void do_train_model() {
    const TokenizerModel tok = TokenizerModel::load(artifact("tokenizer.json"));
    ModelConfig mc = cfg_.model;
    if (mc.vocab_size == 0) mc.vocab_size = tok.vocab_size();
    mc.init_seed = derive_seed(cfg_.seed, "model.init");

    Encoder enc(tok, mc.max_len);
    std::vector<TokenSequence> train_x, val_x;
    std::vector<Label> train_y, val_y;
    for (std::string& t : detail::read_lines(artifact("corpus/benign.txt"))) {
      if (t.empty()) continue;
      train_x.push_back(enc(t));
      train_y.push_back(Label::benign);
    }
    for (std::string& t : detail::read_lines(artifact("corpus/malicious.txt"))) {
      if (t.empty()) continue;
      train_x.push_back(enc(t));
      train_y.push_back(Label::malicious);
    }
    for (const nlohmann::json& rec :
         detail::read_jsonl(artifact("filtered/validation.jsonl"))) {
      const Label y = label_from_string(rec.at("label").get<std::string>());
      for (const auto& t : rec.at("functions")) {
        val_x.push_back(enc(t.get<std::string>()));
        val_y.push_back(y);
      }
    }
    if (val_x.empty())
      throw DataError(
          "no validation functions survived leakage removal; the SVM stage "
          "needs a validation split with novel functions");

    TrainOptions opt;
    opt.epochs = cfg_.training.epochs;
    opt.batch_size = cfg_.training.batch_size;
    opt.learning_rate = cfg_.training.learning_rate;
    opt.seed = derive_seed(cfg_.seed, "train");

    TransformerClassifier<float> model(mc);
    const TrainingReport report =
        train_classifier(model, train_x, train_y, val_x, val_y, opt);
    save_checkpoint(model, artifact("checkpoint.bin"));
    nlohmann::json epochs = nlohmann::json::array();
    for (const EpochStats& e : report.epochs)
      epochs.push_back({{"train_loss", e.train_loss},
                        {"val_loss", e.val_loss},
                        {"val_accuracy", e.val_accuracy}});
    detail::write_json_file(artifact("training_report.json"),
                            {{"epochs", std::move(epochs)},
                             {"n_train", train_x.size()},
                             {"n_val", val_x.size()},
                             {"vocab_size", mc.vocab_size}});
  }

  void do_classify() {
    std::filesystem::create_directories(artifact("verdicts"));
    const TransformerClassifier<float> model =
        load_checkpoint(artifact("checkpoint.bin"));
    const TokenizerModel tok = TokenizerModel::load(artifact("tokenizer.json"));
    Encoder enc(tok, model.config().max_len);
    for (const char* split : {"validation", "test"}) {
      std::string body;
      for (const nlohmann::json& rec : detail::read_jsonl(
               artifact(std::string("filtered/") + split + ".jsonl"))) {
        nlohmann::json preds = nlohmann::json::array();
        nlohmann::json probs = nlohmann::json::array();
        for (const auto& t : rec.at("functions")) {
          const FunctionVerdict v = model.classify(enc(t.get<std::string>()));
          preds.push_back(v.label == Label::malicious ? 1 : 0);
          probs.push_back(v.probs[1]);
        }
        const nlohmann::json out = {{"sample_id", rec.at("sample_id")},
                                    {"label", rec.at("label")},
                                    {"family", rec.at("family")},
                                    {"n_functions", preds.size()},
                                    {"predicted", std::move(preds)},
                                    {"p_malicious", std::move(probs)}};
        body += out.dump();
        body += '\n';
      }
      detail::write_text(
          artifact(std::string("verdicts/") + split + ".jsonl"), body);
    }
  }

  // Shared by svm_fit and evaluate: per-sample features from a verdicts file.
  struct SampleRow {
    SampleFeatures features;
    Label truth;
    std::string family;
  };
  std::vector<SampleRow> load_sample_rows(
      const std::filesystem::path& p) const {
    std::vector<SampleRow> rows;
    for (const nlohmann::json& rec : detail::read_jsonl(p)) {
      SampleRow row;
      std::vector<FunctionVerdict> verdicts;
      for (const auto& v : rec.at("predicted")) {
        FunctionVerdict fv;
        fv.label = v.get<int>() == 1 ? Label::malicious : Label::benign;
        verdicts.push_back(fv);
      }
      row.features =
          aggregate_sample(verdicts, rec.at("sample_id").get<std::string>());
      row.truth = label_from_string(rec.at("label").get<std::string>());
      row.family = rec.at("family").get<std::string>();
      rows.push_back(std::move(row));
    }
    return rows;
  }

  void do_svm_fit() {
    const std::vector<SampleRow> rows =
        load_sample_rows(artifact("verdicts/validation.jsonl"));
    std::vector<SampleFeatures> feats;
    std::vector<Label> labels;
    std::size_t degenerate = 0;
    for (const SampleRow& r : rows) {
      if (r.features.degenerate) {
        ++degenerate;
        continue;
      }
      feats.push_back(r.features);
      labels.push_back(r.truth);
    }
    SvmOptions opt = cfg_.svm;
    opt.seed = derive_seed(cfg_.seed, "svm");
    const Hyperplane h = fit_svm(feats, labels, opt);
    nlohmann::json j = h.to_json();
    j["fit_samples"] = feats.size();
    j["degenerate_excluded"] = degenerate;
    detail::write_json_file(artifact("hyperplane.json"), j);
  }

  void do_evaluate() {
    const Hyperplane h =
        Hyperplane::from_json(detail::read_json_file(artifact("hyperplane.json")));
    const std::vector<SampleRow> rows =
        load_sample_rows(artifact("verdicts/test.jsonl"));

    std::string report_body;
    std::string csv = "# boundary w_pct=" + detail::dtos(h.weights[0]) +
                      " w_logn=" + detail::dtos(h.weights[1]) +
                      " bias=" + detail::dtos(h.bias) +
                      " mean_pct=" + detail::dtos(h.feature_mean[0]) +
                      " mean_logn=" + detail::dtos(h.feature_mean[1]) +
                      " std_pct=" + detail::dtos(h.feature_std[0]) +
                      " std_logn=" + detail::dtos(h.feature_std[1]) + "\n";
    csv += "malicious_pct,n_functions,size_class,truth\n";
    std::vector<SampleVerdictKind> preds;
    std::vector<Label> truths;
    nlohmann::json indeterminate_ids = nlohmann::json::array();
    for (const SampleRow& r : rows) {
      const SampleDecision d = classify_sample(h, r.features);
      preds.push_back(d.verdict);
      truths.push_back(r.truth);
      if (d.verdict == SampleVerdictKind::indeterminate)
        indeterminate_ids.push_back(r.features.sample_id);
      const nlohmann::json rec = {
          {"sample_id", r.features.sample_id},
          {"family", r.family},
          {"n_functions", r.features.n_functions},
          {"malicious_pct", r.features.malicious_pct},
          {"size_class", to_string(r.features.size_class)},
          {"margin", d.margin},
          {"verdict", to_string(d.verdict)},
          {"truth", to_string(r.truth)}};
      report_body += rec.dump();
      report_body += '\n';
      if (!r.features.degenerate) {
        csv += detail::dtos(r.features.malicious_pct) + "," +
               std::to_string(r.features.n_functions) + "," +
               to_string(r.features.size_class) + "," + to_string(r.truth) +
               "\n";
      }
    }
    detail::write_text(artifact("verdict_report.jsonl"), report_body);
    detail::write_text(artifact("plot_data.csv"), csv);

    const Metrics m = compute_metrics(preds, truths);
    detail::write_json_file(
        artifact("metrics.json"),
        {{"tp", m.tp},
         {"fp", m.fp},
         {"fn", m.fn},
         {"tn", m.tn},
         {"accuracy", m.accuracy},
         {"precision", m.precision},
         {"recall", m.recall},
         {"f1", m.f1},
         {"n_evaluated", m.total()},
         {"n_indeterminate", indeterminate_ids.size()},
         {"indeterminate", std::move(indeterminate_ids)}});

    // Independent leakage audit: re-derive the intersection with separate
    // set machinery. Any hit is a contract violation, not a metric.
    std::unordered_set<std::string> train_union;
    for (const std::string& t :
         detail::read_lines(artifact("corpus/train_union.txt")))
      if (!t.empty()) train_union.insert(t);
    std::size_t leaked = 0;
    nlohmann::json leaked_examples = nlohmann::json::array();
    for (const nlohmann::json& rec :
         detail::read_jsonl(artifact("filtered/test.jsonl"))) {
      for (const auto& t : rec.at("functions")) {
        if (train_union.count(t.get<std::string>()) > 0) {
          ++leaked;
          if (leaked_examples.size() < 10)
            leaked_examples.push_back(
                {{"sample_id", rec.at("sample_id")}, {"text", t}});
        }
      }
    }
    detail::write_json_file(artifact("audit_report.json"),
                            {{"test_functions_in_training_union", leaked},
                             {"examples", std::move(leaked_examples)},
                             {"ok", leaked == 0}});
    if (leaked > 0)
      throw ContractError(
          "leakage audit failed: " + std::to_string(leaked) +
          " test functions are present in the training union");
  }
};

// Convenience: full run to the final stage.
inline std::vector<StageResult> run_pipeline(const PipelineConfig& cfg) {
  Pipeline p(cfg);
  return p.ensure("evaluate");
}

}  // namespace pulse
