#include <cstdlib>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "peaklab/error.hpp"
#include "peaklab/pipeline.hpp"

namespace {

std::vector<std::string> split_labels(const std::string& csv) {
  std::vector<std::string> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

struct Options {
  std::string config_path;
  std::string out_dir;
  std::string runs;
  std::uint64_t seed = 0;
  bool seed_set = false;
  int threads = 1;
  bool pooled_thresholds = false;
  bool filter_all_prompts = false;
};

peak::pipeline::RunConfig resolve_config(const Options& opt) {
  peak::pipeline::RunConfig config =
      opt.config_path.empty() ? peak::pipeline::default_run_config()
                              : peak::pipeline::load_run_config(opt.config_path);
  if (opt.seed_set) config.master_seed = opt.seed;
  if (!opt.out_dir.empty()) {
    config.out_dir = opt.out_dir;
  } else if (opt.config_path.empty() || config.out_dir.empty()) {
    if (const char* env = std::getenv("PEAKLAB_OUT"))
      config.out_dir = env;
  }
  if (opt.pooled_thresholds) config.eval.pooled_thresholds = true;
  if (opt.filter_all_prompts) config.eval.filter_all_prompts = true;
  config.validate();
  return config;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale knowledge-editing laboratory"};
  app.require_subcommand(1);

  Options opt;
  app.add_option("--config", opt.config_path, "run configuration file (JSON)");
  app.add_option("--out", opt.out_dir, "output directory (overrides config)");
  auto* seed_opt =
      app.add_option("--seed", opt.seed, "master seed (overrides config)");
  app.add_option("--runs", opt.runs, "comma-separated run labels");
  app.add_option("--threads", opt.threads, "worker threads for edit/eval");
  app.add_flag("--pooled-thresholds", opt.pooled_thresholds,
               "pool additivity thresholds across prompts");
  app.add_flag("--filter-all-prompts", opt.filter_all_prompts,
               "filter against paraphrase prompts too");

  auto* gen = app.add_subcommand("gen", "generate the synthetic world");
  auto* train = app.add_subcommand("train", "train the base model and filter");
  auto* edit = app.add_subcommand("edit", "run the configured editors");
  auto* eval = app.add_subcommand("eval", "evaluate edited snapshots");
  auto* report = app.add_subcommand("report", "verify artifacts and summarize");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    if (rc != 0)
      std::cerr << "error[USAGE]: invalid command line" << std::endl;
    return rc == 0 ? 0 : peak::error_code_exit_status(peak::ErrorCode::kUsage);
  }
  opt.seed_set = seed_opt->count() > 0;

  try {
    if (report->parsed()) {
      std::string out_dir = opt.out_dir;
      if (out_dir.empty() && !opt.config_path.empty())
        out_dir = peak::pipeline::load_run_config(opt.config_path).out_dir;
      if (out_dir.empty())
        if (const char* env = std::getenv("PEAKLAB_OUT")) out_dir = env;
      if (out_dir.empty())
        throw peak::Error(peak::ErrorCode::kUsage,
                          "report needs --out, --config, or PEAKLAB_OUT");
      peak::pipeline::cmd_report(out_dir);
      return 0;
    }

    const peak::pipeline::RunConfig config = resolve_config(opt);
    const std::vector<std::string> labels = split_labels(opt.runs);
    if (gen->parsed()) peak::pipeline::cmd_gen(config);
    if (train->parsed()) peak::pipeline::cmd_train(config);
    if (edit->parsed()) peak::pipeline::cmd_edit(config, labels, opt.threads);
    if (eval->parsed()) peak::pipeline::cmd_eval(config, labels, opt.threads);
    return 0;
  } catch (const peak::Error& e) {
    std::cerr << "error[" << peak::error_code_name(e.code()) << "]: " << e.what()
              << std::endl;
    return peak::error_code_exit_status(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error[UNKNOWN]: " << e.what() << std::endl;
    return 1;
  }
}
