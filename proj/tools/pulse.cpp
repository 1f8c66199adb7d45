// pulse: end-to-end ransomware detection from dynamic instruction traces.
//
// Subcommands map to pipeline stages (each brings its upstream stages up to
// date first; unchanged stages are skipped via content hashes):
//
//   synth            generate a synthetic corpus from the config's block
//   ingest           load + validate traces, write ingest_report.json
//   normalize        segment and normalize functions per split
//   zipf             rank/frequency study (--unit instructions|functions)
//   train-tokenizer  learn the subword vocabulary from the training corpus
//   stats            corpus funnel counts and token-length stats
//   train-model      train the transformer function classifier
//   classify         function verdicts for validation + test samples
//   evaluate         sample verdicts, metrics, plot data, leakage audit
//   run              everything through evaluate
//
// Exit codes: 0 ok, 2 config error, 3 data error, 4 contract violation.

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "pulse/pulse.hpp"

namespace {

struct CommonOpts {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> mode;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
  cmd->add_option("--config", o.config_path, "pipeline config JSON")
      ->required();
  cmd->add_option("--seed", o.seed, "override the global seed");
  cmd->add_option("--mode", o.mode,
                  "override normalization style (spaced|concatenated)")
      ->check(CLI::IsMember({"spaced", "concatenated"}));
}

pulse::PipelineConfig load_config(const CommonOpts& o) {
  pulse::PipelineConfig cfg = pulse::PipelineConfig::load(o.config_path);
  if (o.seed) cfg.seed = *o.seed;
  if (o.mode) cfg.normalization.style = pulse::norm_style_from_string(*o.mode);
  return cfg;
}

void print_results(const std::vector<pulse::StageResult>& results) {
  for (const pulse::StageResult& r : results)
    std::cout << "stage " << r.stage << ": "
              << (r.executed ? "executed" : "up to date") << "\n";
}

int run_through(const CommonOpts& opts, const std::string& stage) {
  pulse::Pipeline pipeline(load_config(opts));
  print_results(pipeline.ensure(stage));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pulse - ransomware detection from instruction traces"};
  app.require_subcommand(1);

  CommonOpts synth_opts, ingest_opts, normalize_opts, zipf_opts, tok_opts,
      stats_opts, train_opts, classify_opts, eval_opts, run_opts;
  std::string zipf_unit = "functions";

  add_common(app.add_subcommand("synth", "generate a synthetic corpus"),
             synth_opts);
  add_common(app.add_subcommand("ingest", "load and validate traces"),
             ingest_opts);
  add_common(app.add_subcommand("normalize", "normalize and segment functions"),
             normalize_opts);
  CLI::App* zipf_cmd =
      app.add_subcommand("zipf", "rank/frequency power-law fit");
  add_common(zipf_cmd, zipf_opts);
  zipf_cmd->add_option("--unit", zipf_unit, "items to rank")
      ->check(CLI::IsMember({"instructions", "functions"}));
  add_common(app.add_subcommand("train-tokenizer", "learn the subword vocab"),
             tok_opts);
  add_common(app.add_subcommand("stats", "corpus funnel statistics"),
             stats_opts);
  add_common(app.add_subcommand("train-model", "train the function classifier"),
             train_opts);
  add_common(app.add_subcommand("classify", "function-level verdicts"),
             classify_opts);
  add_common(app.add_subcommand("evaluate", "sample verdicts and metrics"),
             eval_opts);
  add_common(app.add_subcommand("run", "full pipeline through evaluate"),
             run_opts);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (app.got_subcommand("synth")) {
      pulse::PipelineConfig cfg = load_config(synth_opts);
      if (synth_opts.seed && cfg.synthetic)
        cfg.synthetic->seed = *synth_opts.seed;
      pulse::Pipeline pipeline(cfg);
      const pulse::GeneratorLog log = pipeline.run_synth();
      std::cout << "generated corpus in " << cfg.corpus_dir.string() << "\n"
                << "shared templates: " << log.n_shared_templates << "\n"
                << "cross-label realized: " << log.cross_label_realized.size()
                << "\n";
      return 0;
    }
    if (app.got_subcommand("ingest")) return run_through(ingest_opts, "ingest");
    if (app.got_subcommand("normalize"))
      return run_through(normalize_opts, "normalize");
    if (app.got_subcommand("zipf")) {
      pulse::Pipeline pipeline(load_config(zipf_opts));
      print_results(pipeline.ensure("zipf"));
      const auto fit = pulse::detail::read_json_file(
          pipeline.artifact("zipf/" + zipf_unit + "_fit.json"));
      std::cout << zipf_unit << " fit: " << fit.dump() << "\n";
      return 0;
    }
    if (app.got_subcommand("train-tokenizer"))
      return run_through(tok_opts, "tokenizer");
    if (app.got_subcommand("stats")) {
      pulse::Pipeline pipeline(load_config(stats_opts));
      print_results(pipeline.ensure("stats"));
      std::cout << pulse::detail::read_json_file(pipeline.artifact("stats.json"))
                       .dump(2)
                << "\n";
      return 0;
    }
    if (app.got_subcommand("train-model"))
      return run_through(train_opts, "train_model");
    if (app.got_subcommand("classify"))
      return run_through(classify_opts, "classify");
    if (app.got_subcommand("evaluate") || app.got_subcommand("run")) {
      const CommonOpts& opts =
          app.got_subcommand("evaluate") ? eval_opts : run_opts;
      pulse::Pipeline pipeline(load_config(opts));
      print_results(pipeline.ensure("evaluate"));
      std::cout << pulse::detail::read_json_file(
                       pipeline.artifact("metrics.json"))
                       .dump(2)
                << "\n";
      return 0;
    }
  } catch (const pulse::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const pulse::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const pulse::ContractError& e) {
    std::cerr << "contract violation: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 4;
  }
  return 0;
}
