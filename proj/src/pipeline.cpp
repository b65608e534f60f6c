#include "peaklab/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "peaklab/error.hpp"
#include "peaklab/objective.hpp"
#include "peaklab/rng.hpp"

namespace peak::pipeline {

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kWorldTag = 0x31776f726cULL;
constexpr std::uint64_t kModelTag = 0x326d6f646cULL;
constexpr std::uint64_t kTrainTag = 0x337472616eULL;
constexpr std::uint64_t kDeltaMagic = 0x504b44454c544131ULL;  // "PKDELTA1"

void require_keys(const json& obj, const std::set<std::string>& allowed,
                  const std::string& where) {
  if (!obj.is_object())
    throw Error(ErrorCode::kConfig, where + ": expected an object");
  for (const auto& [key, value] : obj.items()) {
    (void)value;
    if (!allowed.count(key))
      throw Error(ErrorCode::kConfig, where + ": unknown key '" + key + "'");
  }
}

template <typename T>
T get_or(const json& obj, const std::string& key, T fallback) {
  if (!obj.contains(key)) return fallback;
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw Error(ErrorCode::kConfig, "config: bad value for '" + key + "'");
  }
}

dataset::FalseSet parse_false_set(const std::string& name,
                                  const std::string& where) {
  if (name == "hard") return dataset::FalseSet::kHard;
  if (name == "random") return dataset::FalseSet::kRandom;
  throw Error(ErrorCode::kConfig,
              where + ": false set must be 'hard' or 'random', got '" + name +
                  "'");
}

dataset::SyntheticWorldConfig parse_world(const json& j) {
  require_keys(j,
               {"n_relations", "n_subjects_per_relation", "n_correct_per_fact",
                "n_hard", "n_random", "n_paraphrases", "n_locality",
                "clusters_per_relation", "cluster_size", "two_token_every",
                "corpus_repetitions", "special_lo", "special_hi", "template_lo",
                "template_hi", "entity_lo", "entity_hi", "seed"},
               "world");
  dataset::SyntheticWorldConfig c;
  c.n_relations = get_or(j, "n_relations", c.n_relations);
  c.n_subjects_per_relation =
      get_or(j, "n_subjects_per_relation", c.n_subjects_per_relation);
  c.n_correct_per_fact = get_or(j, "n_correct_per_fact", c.n_correct_per_fact);
  c.n_hard = get_or(j, "n_hard", c.n_hard);
  c.n_random = get_or(j, "n_random", c.n_random);
  c.n_paraphrases = get_or(j, "n_paraphrases", c.n_paraphrases);
  c.n_locality = get_or(j, "n_locality", c.n_locality);
  c.clusters_per_relation =
      get_or(j, "clusters_per_relation", c.clusters_per_relation);
  c.cluster_size = get_or(j, "cluster_size", c.cluster_size);
  c.two_token_every = get_or(j, "two_token_every", c.two_token_every);
  c.corpus_repetitions = get_or(j, "corpus_repetitions", c.corpus_repetitions);
  c.special_lo = get_or(j, "special_lo", c.special_lo);
  c.special_hi = get_or(j, "special_hi", c.special_hi);
  c.template_lo = get_or(j, "template_lo", c.template_lo);
  c.template_hi = get_or(j, "template_hi", c.template_hi);
  c.entity_lo = get_or(j, "entity_lo", c.entity_lo);
  c.entity_hi = get_or(j, "entity_hi", c.entity_hi);
  c.seed = get_or(j, "seed", c.seed);
  return c;
}

microlm::ModelConfig parse_model(const json& j) {
  require_keys(j,
               {"vocab_size", "d_model", "n_layers", "n_heads", "d_ff",
                "max_seq_len", "seed"},
               "model");
  microlm::ModelConfig c;
  c.vocab_size = get_or(j, "vocab_size", c.vocab_size);
  c.d_model = get_or(j, "d_model", c.d_model);
  c.n_layers = get_or(j, "n_layers", c.n_layers);
  c.n_heads = get_or(j, "n_heads", c.n_heads);
  c.d_ff = get_or(j, "d_ff", c.d_ff);
  c.max_seq_len = get_or(j, "max_seq_len", c.max_seq_len);
  c.seed = get_or(j, "seed", c.seed);
  return c;
}

microlm::TrainConfig parse_train(const json& j) {
  require_keys(j,
               {"steps", "batch_size", "learning_rate", "warmup_steps", "beta2",
                "eps", "seed"},
               "train");
  microlm::TrainConfig c;
  c.steps = get_or(j, "steps", c.steps);
  c.batch_size = get_or(j, "batch_size", c.batch_size);
  c.learning_rate = get_or(j, "learning_rate", c.learning_rate);
  c.warmup_steps = get_or(j, "warmup_steps", c.warmup_steps);
  c.beta2 = get_or(j, "beta2", c.beta2);
  c.eps = get_or(j, "eps", c.eps);
  c.seed = get_or(j, "seed", c.seed);
  return c;
}

EvalOptions parse_eval(const json& j) {
  require_keys(
      j, {"tau", "false_sets", "pooled_thresholds", "filter_all_prompts"},
      "eval");
  EvalOptions e;
  e.tau = get_or(j, "tau", e.tau);
  e.pooled_thresholds = get_or(j, "pooled_thresholds", e.pooled_thresholds);
  e.filter_all_prompts = get_or(j, "filter_all_prompts", e.filter_all_prompts);
  if (j.contains("false_sets")) {
    e.false_sets.clear();
    for (const auto& el : j.at("false_sets"))
      e.false_sets.push_back(parse_false_set(el.get<std::string>(), "eval"));
    if (e.false_sets.empty())
      throw Error(ErrorCode::kConfig, "eval: false_sets must be nonempty");
  }
  return e;
}

editors::APPConfig parse_app(const json& j) {
  require_keys(j, {"alpha", "beta", "gamma", "margin", "false_set"}, "app");
  editors::APPConfig c;
  c.alpha = get_or(j, "alpha", c.alpha);
  c.beta = get_or(j, "beta", c.beta);
  c.gamma = get_or(j, "gamma", c.gamma);
  c.margin = get_or(j, "margin", c.margin);
  if (j.contains("false_set"))
    c.false_set = parse_false_set(j.at("false_set").get<std::string>(), "app");
  return c;
}

editors::ROMEConfig parse_rome(const json& j) {
  require_keys(j,
               {"layer", "n_prefixes", "prefix_len_min", "prefix_len_max",
                "v_steps", "v_rate", "kl_weight", "z_norm_clamp_factor",
                "cov_samples", "cov_ridge", "kl_all_positions", "seed"},
               "rome");
  editors::ROMEConfig c;
  c.layer = get_or(j, "layer", c.layer);
  c.n_prefixes = get_or(j, "n_prefixes", c.n_prefixes);
  c.prefix_len_min = get_or(j, "prefix_len_min", c.prefix_len_min);
  c.prefix_len_max = get_or(j, "prefix_len_max", c.prefix_len_max);
  c.v_steps = get_or(j, "v_steps", c.v_steps);
  c.v_rate = get_or(j, "v_rate", c.v_rate);
  c.kl_weight = get_or(j, "kl_weight", c.kl_weight);
  if (j.contains("z_norm_clamp_factor")) {
    if (j.at("z_norm_clamp_factor").is_null())
      c.z_norm_clamp_factor.reset();
    else
      c.z_norm_clamp_factor = j.at("z_norm_clamp_factor").get<double>();
  }
  c.cov_samples = get_or(j, "cov_samples", c.cov_samples);
  c.cov_ridge = get_or(j, "cov_ridge", c.cov_ridge);
  c.kl_all_positions = get_or(j, "kl_all_positions", c.kl_all_positions);
  c.seed = get_or(j, "seed", c.seed);
  return c;
}

editors::FTConfig parse_ft(const json& j) {
  require_keys(j, {"layer", "steps", "rate", "norm_budget"}, "ft");
  editors::FTConfig c;
  c.layer = get_or(j, "layer", c.layer);
  c.steps = get_or(j, "steps", c.steps);
  c.rate = get_or(j, "rate", c.rate);
  c.norm_budget = get_or(j, "norm_budget", c.norm_budget);
  return c;
}

json world_to_json(const dataset::SyntheticWorldConfig& c) {
  return json{{"n_relations", c.n_relations},
              {"n_subjects_per_relation", c.n_subjects_per_relation},
              {"n_correct_per_fact", c.n_correct_per_fact},
              {"n_hard", c.n_hard},
              {"n_random", c.n_random},
              {"n_paraphrases", c.n_paraphrases},
              {"n_locality", c.n_locality},
              {"clusters_per_relation", c.clusters_per_relation},
              {"cluster_size", c.cluster_size},
              {"two_token_every", c.two_token_every},
              {"corpus_repetitions", c.corpus_repetitions},
              {"special_lo", c.special_lo},
              {"special_hi", c.special_hi},
              {"template_lo", c.template_lo},
              {"template_hi", c.template_hi},
              {"entity_lo", c.entity_lo},
              {"entity_hi", c.entity_hi},
              {"seed", c.seed}};
}

json model_to_json(const microlm::ModelConfig& c) {
  return json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model},
              {"n_layers", c.n_layers},     {"n_heads", c.n_heads},
              {"d_ff", c.d_ff},             {"max_seq_len", c.max_seq_len},
              {"seed", c.seed}};
}

json train_to_json(const microlm::TrainConfig& c) {
  return json{{"steps", c.steps},
              {"batch_size", c.batch_size},
              {"learning_rate", c.learning_rate},
              {"warmup_steps", c.warmup_steps},
              {"beta2", c.beta2},
              {"eps", c.eps},
              {"seed", c.seed}};
}

json eval_to_json(const EvalOptions& e) {
  json sets = json::array();
  for (dataset::FalseSet fs : e.false_sets)
    sets.push_back(dataset::false_set_name(fs));
  return json{{"tau", e.tau},
              {"false_sets", sets},
              {"pooled_thresholds", e.pooled_thresholds},
              {"filter_all_prompts", e.filter_all_prompts}};
}

json app_to_json(const editors::APPConfig& c) {
  return json{{"alpha", c.alpha},
              {"beta", c.beta},
              {"gamma", c.gamma},
              {"margin", c.margin},
              {"false_set", dataset::false_set_name(c.false_set)}};
}

json rome_to_json(const editors::ROMEConfig& c) {
  json j{{"layer", c.layer},
         {"n_prefixes", c.n_prefixes},
         {"prefix_len_min", c.prefix_len_min},
         {"prefix_len_max", c.prefix_len_max},
         {"v_steps", c.v_steps},
         {"v_rate", c.v_rate},
         {"kl_weight", c.kl_weight},
         {"cov_samples", c.cov_samples},
         {"cov_ridge", c.cov_ridge},
         {"kl_all_positions", c.kl_all_positions},
         {"seed", c.seed}};
  if (c.z_norm_clamp_factor)
    j["z_norm_clamp_factor"] = *c.z_norm_clamp_factor;
  else
    j["z_norm_clamp_factor"] = nullptr;
  return j;
}

json ft_to_json(const editors::FTConfig& c) {
  return json{{"layer", c.layer},
              {"steps", c.steps},
              {"rate", c.rate},
              {"norm_budget", c.norm_budget}};
}

json config_to_json(const RunConfig& config) {
  json runs = json::array();
  for (const EditorRun& run : config.runs) {
    json r{{"label", run.label}, {"editor", run.editor}};
    if (run.editor == "rome") r["rome"] = rome_to_json(run.rome);
    if (run.editor == "ft") r["ft"] = ft_to_json(run.ft);
    if (run.app) r["app"] = app_to_json(*run.app);
    runs.push_back(r);
  }
  return json{{"master_seed", config.master_seed},
              {"out_dir", config.out_dir},
              {"world", world_to_json(config.world)},
              {"model", model_to_json(config.model)},
              {"train", train_to_json(config.train)},
              {"eval", eval_to_json(config.eval)},
              {"runs", runs}};
}

json load_json_file(const std::string& path, ErrorCode parse_code) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open for read: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw Error(parse_code, "cannot parse " + path + ": " + e.what());
  }
  return j;
}

void write_json_file(const json& j, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot open for write: " + path);
  out << j.dump(2) << '\n';
  if (!out) throw Error(ErrorCode::kIo, "write failed: " + path);
}

void write_text_file(const std::string& text, const std::string& path) {
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, "cannot open for write: " + path);
  out << text;
  if (!out) throw Error(ErrorCode::kIo, "write failed: " + path);
}

std::uint64_t file_checksum(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open for read: " + path);
  std::uint64_t h = kFnvBasis;
  char buf[1 << 16];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0)
    h = fnv1a(buf, static_cast<std::size_t>(in.gcount()), h);
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(v));
  return buf;
}

std::string manifest_path(const std::string& out_dir) {
  return (fs::path(out_dir) / "manifest.json").string();
}

// Read-modify-write of the stage ledger; stages are keyed by name.
void record_stage(const RunConfig& config, const std::string& stage,
                  const std::vector<std::string>& artifact_paths,
                  double wall_ms) {
  const std::string path = manifest_path(config.out_dir);
  json manifest;
  if (fs::exists(path)) {
    manifest = load_json_file(path, ErrorCode::kManifest);
  } else {
    manifest = json{{"schema_version", 1},
                    {"config_hash", run_config_hash(config)},
                    {"master_seed", config.master_seed},
                    {"stages", json::object()}};
  }
  manifest["config_hash"] = run_config_hash(config);
  manifest["master_seed"] = config.master_seed;
  json artifacts = json::array();
  for (const std::string& p : artifact_paths) {
    const std::string rel =
        fs::relative(fs::path(p), fs::path(config.out_dir)).string();
    artifacts.push_back(
        json{{"path", rel}, {"checksum", hex64(file_checksum(p))}});
  }
  manifest["stages"][stage] =
      json{{"wall_ms", wall_ms}, {"artifacts", artifacts}};
  write_json_file(manifest, path);
}

class StageTimer {
 public:
  StageTimer() : start_(std::chrono::steady_clock::now()) {}
  double ms() const {
    return std::chrono::duration<double, std::milli>(
               std::chrono::steady_clock::now() - start_)
        .count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
  threads = std::max(1, threads);
  if (threads == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  std::exception_ptr failure;
  std::mutex failure_mu;
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (;;) {
        const int i = next.fetch_add(1);
        if (i >= n) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(failure_mu);
          if (!failure) failure = std::current_exception();
          return;
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

std::string edit_dir(const RunConfig& config, const std::string& label) {
  return (fs::path(config.out_dir) / "edits" / label).string();
}

std::string edit_delta_path(const RunConfig& config, const std::string& label,
                            int index) {
  char name[32];
  std::snprintf(name, sizeof(name), "edit_%04d.pkd", index);
  return (fs::path(edit_dir(config, label)) / name).string();
}

std::string edit_diag_path(const RunConfig& config, const std::string& label,
                           int index) {
  char name[32];
  std::snprintf(name, sizeof(name), "edit_%04d.json", index);
  return (fs::path(edit_dir(config, label)) / name).string();
}

std::string eval_dir(const RunConfig& config) {
  return (fs::path(config.out_dir) / "eval").string();
}

const EditorRun& find_run(const RunConfig& config, const std::string& label) {
  for (const EditorRun& run : config.runs)
    if (run.label == label) return run;
  throw Error(ErrorCode::kUsage, "unknown run label: " + label);
}

std::vector<std::string> select_labels(const RunConfig& config,
                                       const std::vector<std::string>& labels) {
  if (labels.empty()) {
    std::vector<std::string> all;
    for (const EditorRun& run : config.runs) all.push_back(run.label);
    return all;
  }
  for (const std::string& label : labels) find_run(config, label);
  return labels;
}

json probes_to_json(const std::vector<metrics::AnswerProbe>& pre,
                    const std::vector<metrics::AnswerProbe>& post,
                    const dataset::SymbolTable& symbols) {
  json arr = json::array();
  for (std::size_t i = 0; i < pre.size(); ++i) {
    json names = json::array();
    for (const std::string& n : symbols.names(pre[i].answer)) names.push_back(n);
    arr.push_back(json{{"answer", names},
                       {"pre", pre[i].probability},
                       {"post", post[i].probability}});
  }
  return arr;
}

json additivity_to_json(const metrics::AdditivityEval& a,
                        const dataset::SymbolTable& symbols) {
  json per_prompt = json::array();
  for (const metrics::PromptAdditivity& pa : a.per_prompt) {
    json names = json::array();
    for (const std::string& n : symbols.names(pa.prompt)) names.push_back(n);
    per_prompt.push_back(json{
        {"prompt", names},
        {"p_f_max", pa.p_f_max},
        {"p_c_min", pa.p_c_min},
        {"rff", pa.rff},
        {"rnf", pa.rnf},
        {"cpc", pa.cpc},
        {"fpc", pa.fpc},
        {"aff", pa.aff},
        {"anf", pa.anf},
        {"correct_probes", probes_to_json(pa.pre_correct, pa.post_correct, symbols)},
        {"false_probes", probes_to_json(pa.pre_false, pa.post_false, symbols)}});
  }
  return json{{"false_set", dataset::false_set_name(a.false_set)},
              {"rff", a.rff},
              {"rnf", a.rnf},
              {"cpc", a.cpc},
              {"fpc", a.fpc},
              {"aff", a.aff},
              {"anf", a.anf},
              {"per_prompt", per_prompt}};
}

struct LoadedWorld {
  dataset::Dataset data;
  microlm::ModelParams base;
};

LoadedWorld load_filtered_and_base(const RunConfig& config) {
  const std::string fpath = filtered_path(config);
  const std::string mpath = base_model_path(config);
  if (!fs::exists(fpath))
    throw Error(ErrorCode::kIo,
                "filtered dataset missing (run the train stage first): " + fpath);
  if (!fs::exists(mpath))
    throw Error(ErrorCode::kIo,
                "base model missing (run the train stage first): " + mpath);
  return LoadedWorld{dataset::load_instances(fpath),
                     microlm::load_model(mpath)};
}

}  // namespace

void RunConfig::validate() const {
  if (out_dir.empty())
    throw Error(ErrorCode::kConfig, "config: out_dir must be set");
  world.validate();
  model.validate();
  train.validate();
  if (!(eval.tau > 0.0 && eval.tau < 1.0))
    throw Error(ErrorCode::kConfig, "config: eval.tau must lie in (0, 1)");
  if (world.entity_hi > model.vocab_size)
    throw Error(ErrorCode::kConfig,
                "config: world entity range exceeds model vocab_size");
  std::set<std::string> labels;
  for (const EditorRun& run : runs) {
    if (run.label.empty())
      throw Error(ErrorCode::kConfig, "config: run label must be nonempty");
    if (!labels.insert(run.label).second)
      throw Error(ErrorCode::kConfig,
                  "config: duplicate run label '" + run.label + "'");
    if (run.editor != "identity" && run.editor != "rome" && run.editor != "ft")
      throw Error(ErrorCode::kConfig,
                  "config: run '" + run.label + "' has unknown editor '" +
                      run.editor + "'");
    if (run.editor == "rome") run.rome.validate(model);
    if (run.editor == "ft") run.ft.validate(model);
    if (run.app) run.app->validate();
  }
}

RunConfig default_run_config() {
  RunConfig config;
  config.out_dir = "peaklab_out";

  EditorRun identity;
  identity.label = "identity";
  identity.editor = "identity";
  config.runs.push_back(identity);

  EditorRun rome;
  rome.label = "rome";
  rome.editor = "rome";
  config.runs.push_back(rome);

  EditorRun rome_app = rome;
  rome_app.label = "rome_app";
  rome_app.app = editors::APPConfig{};  // alpha 0.2, beta 0.2, gamma 0.1
  config.runs.push_back(rome_app);

  EditorRun ft;
  ft.label = "ft";
  ft.editor = "ft";
  config.runs.push_back(ft);

  EditorRun ft_app = ft;
  ft_app.label = "ft_app";
  editors::APPConfig ft_weights;
  ft_weights.alpha = 0.2;
  ft_weights.beta = 0.5;
  ft_weights.gamma = 0.2;
  ft_app.app = ft_weights;
  config.runs.push_back(ft_app);

  return config;
}

RunConfig load_run_config(const std::string& path) {
  const json j = load_json_file(path, ErrorCode::kConfig);
  require_keys(
      j, {"master_seed", "out_dir", "world", "model", "train", "eval", "runs"},
      "config");
  RunConfig base = default_run_config();
  RunConfig config;
  config.out_dir = base.out_dir;
  config.master_seed = get_or(j, "master_seed", config.master_seed);
  config.out_dir = get_or(j, "out_dir", config.out_dir);
  if (j.contains("world")) config.world = parse_world(j.at("world"));
  if (j.contains("model")) config.model = parse_model(j.at("model"));
  if (j.contains("train")) config.train = parse_train(j.at("train"));
  if (j.contains("eval")) config.eval = parse_eval(j.at("eval"));
  if (j.contains("runs")) {
    for (const auto& el : j.at("runs")) {
      require_keys(el, {"label", "editor", "rome", "ft", "app"}, "run");
      EditorRun run;
      run.label = get_or<std::string>(el, "label", "");
      run.editor = get_or<std::string>(el, "editor", "");
      if (el.contains("rome")) run.rome = parse_rome(el.at("rome"));
      if (el.contains("ft")) run.ft = parse_ft(el.at("ft"));
      if (el.contains("app")) run.app = parse_app(el.at("app"));
      config.runs.push_back(run);
    }
  } else {
    config.runs = base.runs;
  }
  config.validate();
  return config;
}

std::string run_config_hash(const RunConfig& config) {
  const std::string dump = config_to_json(config).dump();
  return hex64(fnv1a(dump.data(), dump.size()));
}

std::uint64_t world_seed(const RunConfig& config) {
  return mix_seed(config.master_seed, config.world.seed, kWorldTag);
}

std::uint64_t model_seed(const RunConfig& config) {
  return mix_seed(config.master_seed, config.model.seed, kModelTag);
}

std::uint64_t train_seed(const RunConfig& config) {
  return mix_seed(config.master_seed, config.train.seed, kTrainTag);
}

std::uint64_t edit_seed(const RunConfig& config, std::uint64_t editor_seed,
                        int instance_index) {
  return mix_seed(config.master_seed, editor_seed,
                  static_cast<std::uint64_t>(instance_index));
}

std::string world_path(const RunConfig& config) {
  return (fs::path(config.out_dir) / "world.json").string();
}

std::string corpus_path(const RunConfig& config) {
  return (fs::path(config.out_dir) / "corpus.json").string();
}

std::string base_model_path(const RunConfig& config) {
  return (fs::path(config.out_dir) / "base_model.pkm").string();
}

std::string filtered_path(const RunConfig& config) {
  return (fs::path(config.out_dir) / "filtered.json").string();
}

std::string aggregate_csv_path(const RunConfig& config) {
  return (fs::path(eval_dir(config)) / "aggregate.csv").string();
}

void cmd_gen(const RunConfig& config) {
  config.validate();
  StageTimer timer;
  fs::create_directories(config.out_dir);

  dataset::SyntheticWorldConfig wcfg = config.world;
  wcfg.seed = world_seed(config);
  const dataset::WorldBundle world = dataset::generate_world(wcfg);

  dataset::save_instances(world.instances, world.symbols, world_path(config));
  dataset::save_corpus(world.corpus, world.symbols, corpus_path(config));
  record_stage(config, "gen", {world_path(config), corpus_path(config)},
               timer.ms());
  std::cout << "gen: " << world.instances.size() << " instances, "
            << world.corpus.size() << " corpus sequences -> " << config.out_dir
            << "\n";
}

void cmd_train(const RunConfig& config) {
  config.validate();
  if (config.train.steps < 1)
    throw Error(ErrorCode::kConfig, "train: steps must be >= 1 for cmd_train");
  StageTimer timer;
  if (!fs::exists(world_path(config)) || !fs::exists(corpus_path(config)))
    throw Error(ErrorCode::kIo, "world files missing (run the gen stage first)");

  const dataset::Dataset world = dataset::load_instances(world_path(config));
  const std::vector<microlm::TokenSeq> corpus =
      dataset::load_corpus(corpus_path(config));

  microlm::ModelConfig mcfg = config.model;
  mcfg.seed = model_seed(config);
  microlm::TrainConfig tcfg = config.train;
  tcfg.seed = train_seed(config);

  const microlm::ModelParams init = microlm::init_model(mcfg);
  const microlm::TrainResult trained = microlm::train(init, corpus, tcfg);
  microlm::save_model(trained.params, base_model_path(config));

  // Fidelity: per fact, does the trained model put correct answers above the
  // false ones under the editing prompt?
  const dataset::FilterPrompts mode = config.eval.filter_all_prompts
                                          ? dataset::FilterPrompts::kAllPrompts
                                          : dataset::FilterPrompts::kEditingOnly;
  json fidelity;
  fidelity["initial_ce"] = trained.initial_corpus_ce;
  fidelity["final_ce"] = trained.final_corpus_ce;
  json per_fact = json::array();
  int n_ordered = 0;
  std::vector<dataset::PeakInstance> kept;
  json rejected = json::array();
  for (std::size_t i = 0; i < world.instances.size(); ++i) {
    const dataset::PeakInstance& inst = world.instances[i];
    double mean_correct = 0.0, mean_false = 0.0;
    for (const auto& o : inst.correct)
      mean_correct +=
          microlm::answer_probability(trained.params, inst.prompt, o) /
          static_cast<double>(inst.correct.size());
    const std::size_t n_false = inst.hard_false.size() + inst.random_false.size();
    for (const auto& f : inst.hard_false)
      mean_false += microlm::answer_probability(trained.params, inst.prompt, f) /
                    static_cast<double>(n_false);
    for (const auto& f : inst.random_false)
      mean_false += microlm::answer_probability(trained.params, inst.prompt, f) /
                    static_cast<double>(n_false);
    const bool ordered = mean_correct > mean_false;
    if (ordered) ++n_ordered;
    per_fact.push_back(json{{"index", i},
                            {"mean_correct", mean_correct},
                            {"mean_false", mean_false},
                            {"ordered", ordered}});

    const dataset::FilterOutcome filtered =
        dataset::filter_instance(trained.params, inst, config.eval.tau, mode);
    if (filtered.instance) {
      kept.push_back(*filtered.instance);
    } else {
      rejected.push_back(json{{"index", i}, {"reason", filtered.reject_reason}});
    }
  }
  fidelity["per_fact"] = per_fact;
  fidelity["ordered_fraction"] =
      static_cast<double>(n_ordered) /
      static_cast<double>(world.instances.size());
  fidelity["rejected"] = rejected;
  fidelity["kept_fraction"] = static_cast<double>(kept.size()) /
                              static_cast<double>(world.instances.size());

  const std::string fidelity_path =
      (fs::path(config.out_dir) / "fidelity.json").string();
  write_json_file(fidelity, fidelity_path);
  dataset::save_instances(kept, world.symbols, filtered_path(config));

  record_stage(config, "train",
               {base_model_path(config), fidelity_path, filtered_path(config)},
               timer.ms());
  std::cout << "train: final ce " << trained.final_corpus_ce << ", kept "
            << kept.size() << "/" << world.instances.size()
            << " instances after filtering\n";
}

void save_model_delta(const microlm::ModelParams& base,
                      const microlm::ModelParams& edited,
                      const std::string& path) {
  std::string body;
  auto put_u64 = [&body](std::uint64_t v) {
    body.append(reinterpret_cast<const char*>(&v), sizeof(v));
  };
  put_u64(kDeltaMagic);
  put_u64(microlm::params_checksum(base));

  std::vector<std::pair<std::string, const Matrix*>> changed;
  std::vector<std::pair<std::string, const Matrix*>> base_tensors;
  microlm::for_each_tensor(base, [&](const std::string& name, const Matrix& m) {
    base_tensors.emplace_back(name, &m);
  });
  std::size_t idx = 0;
  microlm::for_each_tensor(edited, [&](const std::string& name,
                                       const Matrix& m) {
    if (base_tensors[idx].second->data != m.data) changed.emplace_back(name, &m);
    ++idx;
  });

  put_u64(changed.size());
  for (const auto& [name, m] : changed) {
    put_u64(name.size());
    body.append(name);
    put_u64(static_cast<std::uint64_t>(m->rows));
    put_u64(static_cast<std::uint64_t>(m->cols));
    body.append(reinterpret_cast<const char*>(m->data.data()),
                m->data.size() * sizeof(double));
  }
  const std::uint64_t checksum = fnv1a(body.data(), body.size());
  body.append(reinterpret_cast<const char*>(&checksum), sizeof(checksum));
  write_text_file(body, path);
}

microlm::ModelParams apply_model_delta(const microlm::ModelParams& base,
                                       const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open for read: " + path);
  std::string body((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  if (body.size() < 3 * sizeof(std::uint64_t))
    throw Error(ErrorCode::kCorruption, "delta file truncated: " + path);

  std::uint64_t stored_sum;
  std::memcpy(&stored_sum, body.data() + body.size() - sizeof(std::uint64_t),
              sizeof(std::uint64_t));
  if (fnv1a(body.data(), body.size() - sizeof(std::uint64_t)) != stored_sum)
    throw Error(ErrorCode::kCorruption, "delta file checksum mismatch: " + path);

  std::size_t off = 0;
  auto get_u64 = [&body, &off, &path]() {
    if (off + sizeof(std::uint64_t) > body.size())
      throw Error(ErrorCode::kCorruption, "delta file truncated: " + path);
    std::uint64_t v;
    std::memcpy(&v, body.data() + off, sizeof(v));
    off += sizeof(v);
    return v;
  };
  if (get_u64() != kDeltaMagic)
    throw Error(ErrorCode::kCorruption, "not a delta file: " + path);
  if (get_u64() != microlm::params_checksum(base))
    throw Error(ErrorCode::kValidation,
                "delta file was made against a different base model: " + path);

  microlm::ModelParams edited = base;
  const std::uint64_t n_changed = get_u64();
  for (std::uint64_t k = 0; k < n_changed; ++k) {
    const std::uint64_t name_len = get_u64();
    if (off + name_len > body.size())
      throw Error(ErrorCode::kCorruption, "delta file truncated: " + path);
    const std::string name = body.substr(off, name_len);
    off += name_len;
    const int rows = static_cast<int>(get_u64());
    const int cols = static_cast<int>(get_u64());

    Matrix* target = nullptr;
    microlm::for_each_tensor(edited, [&](const std::string& n, Matrix& m) {
      if (n == name) target = &m;
    });
    if (!target)
      throw Error(ErrorCode::kValidation,
                  "delta file names unknown tensor " + name);
    if (target->rows != rows || target->cols != cols)
      throw Error(ErrorCode::kValidation,
                  "delta tensor " + name + " has mismatched shape");
    const std::size_t bytes = target->data.size() * sizeof(double);
    if (off + bytes > body.size())
      throw Error(ErrorCode::kCorruption, "delta file truncated: " + path);
    std::memcpy(target->data.data(), body.data() + off, bytes);
    off += bytes;
  }
  return edited;
}

void cmd_edit(const RunConfig& config, const std::vector<std::string>& labels,
              int threads) {
  config.validate();
  const std::vector<std::string> selected = select_labels(config, labels);
  const LoadedWorld loaded = load_filtered_and_base(config);
  const std::vector<microlm::TokenSeq> corpus =
      fs::exists(corpus_path(config))
          ? dataset::load_corpus(corpus_path(config))
          : std::vector<microlm::TokenSeq>{};

  const int n = static_cast<int>(loaded.data.instances.size());
  for (const std::string& label : selected) {
    const EditorRun& run = find_run(config, label);
    StageTimer timer;
    fs::create_directories(edit_dir(config, label));

    // The key covariance is a model-level constant shared by every edit.
    Matrix cov;
    if (run.editor == "rome") {
      editors::ROMEConfig cov_cfg = run.rome;
      cov_cfg.seed = mix_seed(config.master_seed, run.rome.seed);
      cov = editors::estimate_covariance(loaded.base, cov_cfg, corpus);
    }

    struct EditSlot {
      json diag;
      bool ok = false;
      std::optional<microlm::ModelParams> edited;
    };
    std::vector<EditSlot> slots(n);

    parallel_for(n, threads, [&](int i) {
      const dataset::PeakInstance& inst = loaded.data.instances[i];
      EditSlot& slot = slots[i];
      slot.diag = json{{"index", i},
                       {"label", label},
                       {"editor", run.editor},
                       {"subject", inst.subject},
                       {"relation", inst.relation}};
      try {
        if (run.editor == "identity") {
          slot.edited = loaded.base;
          slot.diag["steps"] = 0;
          slot.ok = true;
          return;
        }
        editors::EditOutcome outcome;
        if (run.editor == "rome") {
          editors::ROMEConfig cfg = run.rome;
          cfg.seed = edit_seed(config, run.rome.seed, i);
          slot.diag["seed"] = cfg.seed;
          outcome = editors::apply_rome(loaded.base, inst, run.app, cfg, cov);
          slot.diag["lambda_norm"] = outcome.lambda_norm;
        } else {
          outcome = editors::apply_ft(loaded.base, inst, run.app, run.ft);
          slot.diag["weight_delta_norm"] = outcome.weight_delta_norm;
        }
        slot.diag["steps"] = outcome.steps_taken;
        slot.diag["loss_trajectory"] = outcome.loss_trajectory;
        slot.diag["warnings"] = outcome.warnings;
        slot.edited = std::move(outcome.edited);
        slot.ok = true;
      } catch (const Error& e) {
        slot.diag["error"] = json{{"code", error_code_name(e.code())},
                                  {"message", e.what()}};
      }
    });

    std::vector<std::string> artifacts;
    int n_failed = 0;
    json summary_failures = json::array();
    for (int i = 0; i < n; ++i) {
      const EditSlot& slot = slots[i];
      if (slot.ok) {
        save_model_delta(loaded.base, *slot.edited,
                         edit_delta_path(config, label, i));
        artifacts.push_back(edit_delta_path(config, label, i));
      } else {
        ++n_failed;
        summary_failures.push_back(slot.diag);
      }
      write_json_file(slot.diag, edit_diag_path(config, label, i));
      artifacts.push_back(edit_diag_path(config, label, i));
    }
    json summary{{"label", label},
                 {"n_instances", n},
                 {"n_failed", n_failed},
                 {"failures", summary_failures}};
    const std::string summary_path =
        (fs::path(edit_dir(config, label)) / "summary.json").string();
    write_json_file(summary, summary_path);
    artifacts.push_back(summary_path);

    record_stage(config, "edit:" + label, artifacts, timer.ms());
    std::cout << "edit[" << label << "]: " << (n - n_failed) << "/" << n
              << " edits succeeded\n";
  }
}

void cmd_eval(const RunConfig& config, const std::vector<std::string>& labels,
              int threads) {
  config.validate();
  const std::vector<std::string> selected = select_labels(config, labels);
  const LoadedWorld loaded = load_filtered_and_base(config);
  const int n = static_cast<int>(loaded.data.instances.size());
  const metrics::ThresholdMode mode = config.eval.pooled_thresholds
                                          ? metrics::ThresholdMode::kPooled
                                          : metrics::ThresholdMode::kPerPrompt;

  StageTimer timer;
  fs::create_directories(eval_dir(config));

  struct LabelResult {
    std::vector<std::optional<metrics::EditEval>> evals;
    json records;
  };
  std::vector<LabelResult> results;

  for (const std::string& label : selected) {
    find_run(config, label);
    LabelResult result;
    result.evals.resize(n);
    std::vector<json> edit_records(n);

    parallel_for(n, threads, [&](int i) {
      const dataset::PeakInstance& inst = loaded.data.instances[i];
      const std::string delta = edit_delta_path(config, label, i);
      json rec{{"index", i},
               {"subject", inst.subject},
               {"relation", inst.relation}};
      if (!fs::exists(delta)) {
        rec["skipped"] = true;
        rec["reason"] = "edited snapshot missing";
        edit_records[i] = std::move(rec);
        return;
      }
      const microlm::ModelParams edited = apply_model_delta(loaded.base, delta);
      const metrics::EditEval eval = metrics::evaluate_edit(
          loaded.base, edited, inst, config.eval.false_sets, mode);
      rec["skipped"] = false;
      rec["es"] = eval.es;
      rec["gs"] = eval.gs;
      rec["ls"] = eval.ls;
      json adds = json::array();
      for (const metrics::AdditivityEval& a : eval.additivity)
        adds.push_back(additivity_to_json(a, loaded.data.symbols));
      rec["additivity"] = adds;
      result.evals[i] = eval;
      edit_records[i] = std::move(rec);
    });

    json records = json::array();
    for (int i = 0; i < n; ++i) records.push_back(std::move(edit_records[i]));
    result.records = json{{"label", label}, {"edits", records}};
    results.push_back(std::move(result));
  }

  // Per-edit record files plus aggregate tables, all in label order.
  std::vector<std::string> artifacts;
  std::vector<metrics::ReportRow> rows;
  std::ostringstream csv;
  csv << "label,n_edits";
  for (const std::string& col : metrics::report_header(config.eval.false_sets))
    csv << ',' << col;
  csv << '\n';

  std::ostringstream md;
  md << "| label | n |";
  for (const std::string& col : metrics::report_header(config.eval.false_sets))
    md << ' ' << col << " |";
  md << "\n|---|---|";
  for (std::size_t k = 0; k < metrics::report_header(config.eval.false_sets).size();
       ++k)
    md << "---|";
  md << '\n';

  for (std::size_t li = 0; li < selected.size(); ++li) {
    const std::string& label = selected[li];
    const LabelResult& result = results[li];

    const std::string record_path =
        (fs::path(eval_dir(config)) / (label + ".records.json")).string();
    write_json_file(result.records, record_path);
    artifacts.push_back(record_path);

    std::vector<metrics::EditEval> ok;
    for (const auto& e : result.evals)
      if (e) ok.push_back(*e);
    if (ok.empty()) {
      std::cout << "eval[" << label << "]: warning: no evaluable edits\n";
      continue;
    }
    const metrics::ReportRow row = metrics::aggregate_dataset(label, ok);
    rows.push_back(row);

    csv << row.label << ',' << row.n_edits;
    for (const std::string& cell : metrics::report_cells(row)) csv << ',' << cell;
    csv << '\n';
    md << "| " << row.label << " | " << row.n_edits << " |";
    for (const std::string& cell : metrics::report_cells(row))
      md << ' ' << cell << " |";
    md << '\n';
  }

  write_text_file(csv.str(), aggregate_csv_path(config));
  const std::string md_path =
      (fs::path(eval_dir(config)) / "aggregate.md").string();
  write_text_file(md.str(), md_path);
  artifacts.push_back(aggregate_csv_path(config));
  artifacts.push_back(md_path);

  // Paired plain-vs-coupled comparison with per-edit sign counts.
  std::ostringstream paired;
  paired << "# Paired comparisons (coupled minus plain)\n\n";
  bool any_pair = false;
  for (std::size_t li = 0; li < selected.size(); ++li) {
    const EditorRun& run = find_run(config, selected[li]);
    if (!run.app || run.editor == "identity") continue;
    // Find the unique plain run of the same editor.
    int plain_idx = -1;
    int n_plain = 0;
    for (std::size_t lj = 0; lj < selected.size(); ++lj) {
      const EditorRun& other = find_run(config, selected[lj]);
      if (other.editor == run.editor && !other.app) {
        plain_idx = static_cast<int>(lj);
        ++n_plain;
      }
    }
    if (n_plain != 1) continue;
    any_pair = true;

    const metrics::ReportRow* app_row = nullptr;
    const metrics::ReportRow* plain_row = nullptr;
    for (const metrics::ReportRow& r : rows) {
      if (r.label == selected[li]) app_row = &r;
      if (r.label == selected[plain_idx]) plain_row = &r;
    }
    if (!app_row || !plain_row) continue;

    paired << "## " << selected[li] << " vs " << selected[plain_idx] << "\n\n";
    paired << "| metric | plain | coupled | delta | improved | tied | worse |\n";
    paired << "|---|---|---|---|---|---|---|\n";

    struct MetricView {
      std::string name;
      std::function<double(const metrics::EditEval&)> get;
      bool lower_better;
    };
    std::vector<MetricView> views{
        {"ES", [](const metrics::EditEval& e) { return double(e.es); }, false},
        {"GS", [](const metrics::EditEval& e) { return e.gs; }, false},
        {"LS", [](const metrics::EditEval& e) { return e.ls; }, false}};
    for (dataset::FalseSet fs_kind : config.eval.false_sets) {
      const std::string tag = fs_kind == dataset::FalseSet::kHard ? "h" : "r";
      views.push_back({"AFF(" + tag + ")",
                       [fs_kind](const metrics::EditEval& e) {
                         return e.for_set(fs_kind).aff;
                       },
                       true});
      views.push_back({"ANF(" + tag + ")",
                       [fs_kind](const metrics::EditEval& e) {
                         return e.for_set(fs_kind).anf;
                       },
                       true});
    }

    const auto& app_evals = results[li].evals;
    const auto& plain_evals = results[plain_idx].evals;
    for (const MetricView& view : views) {
      double app_mean = 0.0, plain_mean = 0.0;
      int improved = 0, tied = 0, worse = 0, paired_n = 0;
      for (int i = 0; i < n; ++i) {
        if (!app_evals[i] || !plain_evals[i]) continue;
        ++paired_n;
        const double a = view.get(*app_evals[i]);
        const double p = view.get(*plain_evals[i]);
        app_mean += a;
        plain_mean += p;
        const double diff = view.lower_better ? p - a : a - p;
        if (diff > 0)
          ++improved;
        else if (diff < 0)
          ++worse;
        else
          ++tied;
      }
      if (paired_n == 0) continue;
      app_mean /= paired_n;
      plain_mean /= paired_n;
      paired << "| " << view.name << " | " << metrics::format_percent(plain_mean)
             << " | " << metrics::format_percent(app_mean) << " | "
             << metrics::format_percent(app_mean - plain_mean) << " | "
             << improved << " | " << tied << " | " << worse << " |\n";
    }
    paired << '\n';
  }
  if (!any_pair) paired << "(no plain/coupled run pairs selected)\n";
  const std::string paired_path =
      (fs::path(eval_dir(config)) / "paired.md").string();
  write_text_file(paired.str(), paired_path);
  artifacts.push_back(paired_path);

  record_stage(config, "eval", artifacts, timer.ms());
  std::cout << "eval: wrote " << rows.size() << " aggregate rows -> "
            << aggregate_csv_path(config) << "\n";
}

void cmd_report(const std::string& out_dir) {
  const std::string path = manifest_path(out_dir);
  if (!fs::exists(path))
    throw Error(ErrorCode::kManifest, "manifest missing: " + path);
  const json manifest = load_json_file(path, ErrorCode::kManifest);
  if (!manifest.contains("stages") || !manifest.at("stages").is_object())
    throw Error(ErrorCode::kManifest, "manifest has no stage table: " + path);
  if (manifest.at("stages").empty())
    throw Error(ErrorCode::kUsage, "manifest lists no completed stages");

  std::cout << "config_hash: "
            << manifest.value("config_hash", std::string("?")) << "\n";
  std::cout << "master_seed: " << manifest.value("master_seed", 0ULL) << "\n";

  int n_bad = 0;
  for (const auto& [stage, info] : manifest.at("stages").items()) {
    const double wall = info.value("wall_ms", 0.0);
    std::cout << "stage " << stage << ": " << wall << " ms\n";
    for (const auto& artifact : info.at("artifacts")) {
      const std::string rel = artifact.at("path").get<std::string>();
      const std::string full = (fs::path(out_dir) / rel).string();
      std::string status = "ok";
      if (!fs::exists(full)) {
        status = "MISSING";
        ++n_bad;
      } else if (hex64(file_checksum(full)) !=
                 artifact.at("checksum").get<std::string>()) {
        status = "CHECKSUM MISMATCH";
        ++n_bad;
      }
      if (status != "ok") std::cout << "  " << rel << ": " << status << "\n";
    }
  }

  const std::string csv = (fs::path(out_dir) / "eval" / "aggregate.csv").string();
  if (fs::exists(csv)) {
    std::ifstream in(csv);
    std::cout << "\naggregate results:\n" << in.rdbuf();
  }

  if (n_bad > 0)
    throw Error(ErrorCode::kManifest,
                std::to_string(n_bad) + " artifacts failed verification");
  std::cout << "all artifacts verified\n";
}

void run_full_pipeline(const RunConfig& config, int threads) {
  cmd_gen(config);
  cmd_train(config);
  cmd_edit(config, {}, threads);
  cmd_eval(config, {}, threads);
}

}  // namespace peak::pipeline
