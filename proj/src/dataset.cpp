#include "peaklab/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "peaklab/error.hpp"
#include "peaklab/rng.hpp"

namespace peak::dataset {

using json = nlohmann::json;

namespace {

constexpr int kSchemaVersion = 1;
constexpr const char* kIsASymbol = "is_a";

bool contains_seq(const std::vector<TokenSeq>& haystack, const TokenSeq& needle) {
  for (const TokenSeq& s : haystack)
    if (s == needle) return true;
  return false;
}

// Seeded sample of k distinct indices from [0, n).
std::vector<int> sample_without_replacement(Rng& rng, int n, int k) {
  std::vector<int> pool(n);
  for (int i = 0; i < n; ++i) pool[i] = i;
  std::vector<int> out;
  out.reserve(k);
  for (int i = 0; i < k; ++i) {
    const int j = static_cast<int>(rng.uniform_int(i, n - 1));
    std::swap(pool[i], pool[j]);
    out.push_back(pool[i]);
  }
  return out;
}

json seq_to_json(const TokenSeq& seq, const SymbolTable& symbols) {
  json arr = json::array();
  for (int tok : seq) arr.push_back(symbols.name(tok));
  return arr;
}

TokenSeq seq_from_json(const json& arr, const SymbolTable& symbols) {
  if (!arr.is_array())
    throw Error(ErrorCode::kValidation, "dataset: expected symbol array");
  TokenSeq seq;
  for (const auto& el : arr) seq.push_back(symbols.token(el.get<std::string>()));
  return seq;
}

void require_keys(const json& obj, const std::set<std::string>& allowed,
                  const std::string& where) {
  for (const auto& [key, value] : obj.items()) {
    (void)value;
    if (!allowed.count(key))
      throw Error(ErrorCode::kValidation,
                  where + ": unknown key '" + key + "'");
  }
}

}  // namespace

const char* false_set_name(FalseSet fs) {
  return fs == FalseSet::kHard ? "hard" : "random";
}

void SymbolTable::add(const std::string& name, int token) {
  if (to_token_.count(name))
    throw Error(ErrorCode::kValidation, "symbol table: duplicate name " + name);
  if (to_name_.count(token))
    throw Error(ErrorCode::kValidation,
                "symbol table: duplicate token " + std::to_string(token));
  to_token_[name] = token;
  to_name_[token] = name;
}

int SymbolTable::token(const std::string& name) const {
  const auto it = to_token_.find(name);
  if (it == to_token_.end())
    throw Error(ErrorCode::kValidation, "symbol table: unknown symbol " + name);
  return it->second;
}

const std::string& SymbolTable::name(int token) const {
  const auto it = to_name_.find(token);
  if (it == to_name_.end())
    throw Error(ErrorCode::kValidation,
                "symbol table: unknown token " + std::to_string(token));
  return it->second;
}

bool SymbolTable::has(const std::string& name) const {
  return to_token_.count(name) > 0;
}

TokenSeq SymbolTable::tokens(const std::vector<std::string>& names) const {
  TokenSeq seq;
  seq.reserve(names.size());
  for (const std::string& n : names) seq.push_back(token(n));
  return seq;
}

std::vector<std::string> SymbolTable::names(const TokenSeq& toks) const {
  std::vector<std::string> out;
  out.reserve(toks.size());
  for (int t : toks) out.push_back(name(t));
  return out;
}

std::vector<std::string> validate_instance(const PeakInstance& inst) {
  std::vector<std::string> violations;
  if (inst.prompt.empty()) violations.push_back("empty editing prompt");
  if (inst.new_answer.empty()) violations.push_back("empty new answer");
  if (inst.correct.empty()) violations.push_back("empty correct answer set");
  if (inst.paraphrases.empty()) violations.push_back("empty paraphrase set");
  if (inst.locality.empty()) violations.push_back("empty locality probe set");
  if (contains_seq(inst.correct, inst.new_answer))
    violations.push_back("new answer already correct");
  for (const TokenSeq& f : inst.hard_false) {
    if (contains_seq(inst.correct, f))
      violations.push_back("false/correct overlap (hard)");
    if (f == inst.new_answer) violations.push_back("hard false equals new answer");
  }
  for (const TokenSeq& f : inst.random_false) {
    if (contains_seq(inst.correct, f))
      violations.push_back("false/correct overlap (random)");
    if (f == inst.new_answer)
      violations.push_back("random false equals new answer");
  }
  for (const LocalityProbe& probe : inst.locality) {
    if (probe.prompt.empty()) violations.push_back("empty locality prompt");
    if (probe.answer.empty()) violations.push_back("empty locality answer");
  }
  return violations;
}

void SyntheticWorldConfig::validate() const {
  if (n_relations < 2)
    throw Error(ErrorCode::kConfig,
                "world: need at least two relations for locality probes");
  if (n_subjects_per_relation < 1 || n_correct_per_fact < 1 || n_hard < 1 ||
      n_random < 1 || n_paraphrases < 1 || n_locality < 1 ||
      clusters_per_relation < 2 || cluster_size < 2 || corpus_repetitions < 1)
    throw Error(ErrorCode::kConfig, "world: all counts must be >= 1");
  if (special_lo >= special_hi || template_lo >= template_hi ||
      entity_lo >= entity_hi)
    throw Error(ErrorCode::kConfig, "world: empty vocabulary range");
  if (special_hi > template_lo || template_hi > entity_lo)
    throw Error(ErrorCode::kConfig, "world: vocabulary ranges must be disjoint");
  if (n_hard > cluster_size - 1)
    throw Error(ErrorCode::kConfig,
                "world: n_hard exceeds cluster capacity (cluster_size - 1)");
  if (n_correct_per_fact > (clusters_per_relation - 1) * cluster_size)
    throw Error(ErrorCode::kConfig,
                "world: n_correct_per_fact exceeds non-target cluster capacity");
  if (n_random > (n_relations - 1) * clusters_per_relation * cluster_size)
    throw Error(ErrorCode::kConfig, "world: n_random exceeds foreign pool");
  const int n_templates = n_relations * (1 + n_paraphrases);
  if (n_templates > template_hi - template_lo)
    throw Error(ErrorCode::kConfig, "world: template range too small");
  const int n_objects = n_relations * clusters_per_relation * cluster_size;
  const int object_tokens =
      n_objects + (two_token_every > 0 ? n_objects / two_token_every : 0);
  const int subject_tokens = n_relations * n_subjects_per_relation;
  if (subject_tokens + object_tokens > entity_hi - entity_lo)
    throw Error(ErrorCode::kConfig,
                "world: entity range too small for requested counts");
}

WorldBundle generate_world(const SyntheticWorldConfig& cfg) {
  cfg.validate();
  WorldBundle world;
  Rng rng(mix_seed(cfg.seed, 0x776f726c64ULL));

  world.symbols.add(kIsASymbol, cfg.special_lo);
  const int is_a_token = cfg.special_lo;

  // Template tokens: one editing template plus paraphrase variants per relation.
  const int n_variants = 1 + cfg.n_paraphrases;
  auto template_token = [&cfg, n_variants](int r, int v) {
    return cfg.template_lo + r * n_variants + v;
  };
  for (int r = 0; r < cfg.n_relations; ++r)
    for (int v = 0; v < n_variants; ++v)
      world.symbols.add("tpl_rel" + std::to_string(r) + "_v" + std::to_string(v),
                        template_token(r, v));

  // Subject entities: one token each.
  int next_token = cfg.entity_lo;
  std::vector<std::vector<TokenSeq>> subjects(cfg.n_relations);
  std::vector<std::vector<std::string>> subject_names(cfg.n_relations);
  for (int r = 0; r < cfg.n_relations; ++r) {
    for (int i = 0; i < cfg.n_subjects_per_relation; ++i) {
      const std::string name =
          "subj_r" + std::to_string(r) + "_" + std::to_string(i);
      world.symbols.add(name, next_token);
      subjects[r].push_back({next_token});
      subject_names[r].push_back(name);
      ++next_token;
    }
  }

  // Object entities, partitioned into clusters; every cluster belongs to one
  // relation. Hard negatives come from the new answer's cluster, random ones
  // from other relations' clusters.
  const int n_clusters = cfg.n_relations * cfg.clusters_per_relation;
  std::vector<std::vector<TokenSeq>> clusters(n_clusters);
  int object_counter = 0;
  for (int c = 0; c < n_clusters; ++c) {
    for (int j = 0; j < cfg.cluster_size; ++j) {
      const std::string base =
          "obj_c" + std::to_string(c) + "_" + std::to_string(j);
      TokenSeq entity;
      const bool two_tokens =
          cfg.two_token_every > 0 &&
          (object_counter % cfg.two_token_every) == cfg.two_token_every - 1;
      if (two_tokens) {
        world.symbols.add(base + "_a", next_token);
        entity.push_back(next_token++);
        world.symbols.add(base + "_b", next_token);
        entity.push_back(next_token++);
      } else {
        world.symbols.add(base, next_token);
        entity.push_back(next_token++);
      }
      clusters[c].push_back(entity);
      ++object_counter;
    }
  }
  auto relation_cluster = [&cfg](int r, int k) {
    return r * cfg.clusters_per_relation + k;
  };

  // First pass: facts (correct answers, new answer, false answers, prompts).
  for (int r = 0; r < cfg.n_relations; ++r) {
    for (int i = 0; i < cfg.n_subjects_per_relation; ++i) {
      PeakInstance inst;
      inst.subject = subject_names[r][i];
      inst.relation = "rel" + std::to_string(r);
      inst.subject_tokens = subjects[r][i];

      inst.prompt = inst.subject_tokens;
      inst.prompt.push_back(template_token(r, 0));
      for (int v = 1; v < n_variants; ++v) {
        TokenSeq para = inst.subject_tokens;
        para.push_back(template_token(r, v));
        inst.paraphrases.push_back(para);
      }
      inst.essence_prompt = inst.subject_tokens;
      inst.essence_prompt.push_back(is_a_token);

      // Target cluster holds o* and its hard negatives; O comes from the
      // relation's other clusters.
      const int target_k = static_cast<int>(rng.uniform_int(0, cfg.clusters_per_relation - 1));
      const std::vector<TokenSeq>& target = clusters[relation_cluster(r, target_k)];
      const int star_idx = static_cast<int>(rng.uniform_int(0, cfg.cluster_size - 1));
      inst.new_answer = target[star_idx];

      std::vector<TokenSeq> correct_pool;
      for (int k = 0; k < cfg.clusters_per_relation; ++k) {
        if (k == target_k) continue;
        for (const TokenSeq& e : clusters[relation_cluster(r, k)])
          correct_pool.push_back(e);
      }
      for (int idx : sample_without_replacement(
               rng, static_cast<int>(correct_pool.size()), cfg.n_correct_per_fact))
        inst.correct.push_back(correct_pool[idx]);

      std::vector<TokenSeq> hard_pool;
      for (int j = 0; j < cfg.cluster_size; ++j)
        if (j != star_idx) hard_pool.push_back(target[j]);
      for (int idx : sample_without_replacement(
               rng, static_cast<int>(hard_pool.size()), cfg.n_hard))
        inst.hard_false.push_back(hard_pool[idx]);

      std::vector<TokenSeq> random_pool;
      for (int rr = 0; rr < cfg.n_relations; ++rr) {
        if (rr == r) continue;
        for (int k = 0; k < cfg.clusters_per_relation; ++k)
          for (const TokenSeq& e : clusters[relation_cluster(rr, k)])
            random_pool.push_back(e);
      }
      for (int idx : sample_without_replacement(
               rng, static_cast<int>(random_pool.size()), cfg.n_random))
        inst.random_false.push_back(random_pool[idx]);

      world.instances.push_back(std::move(inst));
    }
  }

  // Second pass: locality probes reference facts of other relations, so the
  // new answer can never be a taught answer of the probe's prompt.
  const int n_facts = static_cast<int>(world.instances.size());
  for (int f = 0; f < n_facts; ++f) {
    PeakInstance& inst = world.instances[f];
    const int own_relation = f / cfg.n_subjects_per_relation;
    std::vector<int> candidates;
    for (int g = 0; g < n_facts; ++g)
      if (g / cfg.n_subjects_per_relation != own_relation) candidates.push_back(g);
    for (int idx : sample_without_replacement(
             rng, static_cast<int>(candidates.size()), cfg.n_locality)) {
      const PeakInstance& src = world.instances[candidates[idx]];
      inst.locality.push_back(LocalityProbe{src.prompt, src.correct.front()});
    }
  }

  // Training corpus: every (prompt variant, correct answer) pair, repeated.
  // No sequence pairs any prompt of a fact with that fact's new answer.
  std::vector<TokenSeq> pairs;
  for (const PeakInstance& inst : world.instances) {
    std::vector<TokenSeq> prompts{inst.prompt};
    prompts.insert(prompts.end(), inst.paraphrases.begin(),
                   inst.paraphrases.end());
    for (const TokenSeq& prompt : prompts) {
      for (const TokenSeq& answer : inst.correct) {
        TokenSeq seq = prompt;
        seq.insert(seq.end(), answer.begin(), answer.end());
        pairs.push_back(std::move(seq));
      }
    }
  }
  for (int rep = 0; rep < cfg.corpus_repetitions; ++rep)
    for (const TokenSeq& seq : pairs) world.corpus.push_back(seq);
  // Deterministic shuffle.
  for (int i = static_cast<int>(world.corpus.size()) - 1; i > 0; --i) {
    const int j = static_cast<int>(rng.uniform_int(0, i));
    std::swap(world.corpus[i], world.corpus[j]);
  }

  for (const PeakInstance& inst : world.instances) {
    const auto violations = validate_instance(inst);
    if (!violations.empty())
      throw Error(ErrorCode::kValidation,
                  "generated instance violates invariants: " + violations.front());
  }
  return world;
}

FilterOutcome filter_instance(const microlm::ModelParams& model,
                              const PeakInstance& instance, double tau,
                              FilterPrompts mode) {
  if (!(tau > 0.0 && tau < 1.0))
    throw Error(ErrorCode::kInput, "filter: tau must lie in (0, 1)");

  std::vector<TokenSeq> prompts{instance.prompt};
  if (mode == FilterPrompts::kAllPrompts)
    prompts.insert(prompts.end(), instance.paraphrases.begin(),
                   instance.paraphrases.end());

  FilterOutcome outcome;
  PeakInstance kept = instance;
  kept.correct.clear();
  kept.hard_false.clear();
  kept.random_false.clear();

  // Minimum surviving correct probability per filtering prompt.
  std::vector<double> min_correct(prompts.size(), 1e300);
  for (std::size_t a = 0; a < instance.correct.size(); ++a) {
    const TokenSeq& answer = instance.correct[a];
    bool keep = true;
    std::vector<double> probs(prompts.size());
    for (std::size_t q = 0; q < prompts.size(); ++q) {
      probs[q] = microlm::answer_probability(model, prompts[q], answer);
      if (probs[q] < tau) keep = false;
    }
    if (keep) {
      kept.correct.push_back(answer);
      for (std::size_t q = 0; q < prompts.size(); ++q)
        min_correct[q] = std::min(min_correct[q], probs[q]);
    } else {
      outcome.dropped_correct.push_back("correct[" + std::to_string(a) +
                                        "] below tau");
    }
  }
  if (kept.correct.empty()) {
    outcome.reject_reason = "all correct answers filtered out";
    return outcome;
  }

  auto keep_false = [&](const TokenSeq& answer) {
    for (std::size_t q = 0; q < prompts.size(); ++q) {
      const double p = microlm::answer_probability(model, prompts[q], answer);
      if (p >= min_correct[q]) return false;
    }
    return true;
  };
  for (const TokenSeq& f : instance.hard_false)
    if (keep_false(f)) kept.hard_false.push_back(f);
  for (const TokenSeq& f : instance.random_false)
    if (keep_false(f)) kept.random_false.push_back(f);

  if (kept.hard_false.empty()) {
    outcome.reject_reason = "hard false answer set emptied by filtering";
    return outcome;
  }
  if (kept.random_false.empty()) {
    outcome.reject_reason = "random false answer set emptied by filtering";
    return outcome;
  }
  outcome.instance = std::move(kept);
  return outcome;
}

namespace {

json instance_to_json(const PeakInstance& inst, const SymbolTable& symbols) {
  json j;
  j["subject"] = inst.subject;
  j["relation"] = inst.relation;
  j["prompt"] = seq_to_json(inst.prompt, symbols);
  j["correct"] = json::array();
  for (const TokenSeq& s : inst.correct)
    j["correct"].push_back(seq_to_json(s, symbols));
  j["new"] = seq_to_json(inst.new_answer, symbols);
  j["paraphrases"] = json::array();
  for (const TokenSeq& s : inst.paraphrases)
    j["paraphrases"].push_back(seq_to_json(s, symbols));
  j["locality"] = json::array();
  for (const LocalityProbe& probe : inst.locality)
    j["locality"].push_back(json{{"prompt", seq_to_json(probe.prompt, symbols)},
                                 {"answer", seq_to_json(probe.answer, symbols)}});
  j["hard_false"] = json::array();
  for (const TokenSeq& s : inst.hard_false)
    j["hard_false"].push_back(seq_to_json(s, symbols));
  j["random_false"] = json::array();
  for (const TokenSeq& s : inst.random_false)
    j["random_false"].push_back(seq_to_json(s, symbols));
  return j;
}

PeakInstance instance_from_json(const json& j, const SymbolTable& symbols) {
  require_keys(j,
               {"subject", "relation", "prompt", "correct", "new", "paraphrases",
                "locality", "hard_false", "random_false"},
               "instance");
  PeakInstance inst;
  inst.subject = j.at("subject").get<std::string>();
  inst.relation = j.at("relation").get<std::string>();
  inst.prompt = seq_from_json(j.at("prompt"), symbols);
  for (const auto& el : j.at("correct"))
    inst.correct.push_back(seq_from_json(el, symbols));
  inst.new_answer = seq_from_json(j.at("new"), symbols);
  for (const auto& el : j.at("paraphrases"))
    inst.paraphrases.push_back(seq_from_json(el, symbols));
  for (const auto& el : j.at("locality")) {
    require_keys(el, {"prompt", "answer"}, "locality probe");
    inst.locality.push_back(LocalityProbe{seq_from_json(el.at("prompt"), symbols),
                                          seq_from_json(el.at("answer"), symbols)});
  }
  for (const auto& el : j.at("hard_false"))
    inst.hard_false.push_back(seq_from_json(el, symbols));
  for (const auto& el : j.at("random_false"))
    inst.random_false.push_back(seq_from_json(el, symbols));

  if (symbols.has(inst.subject)) {
    inst.subject_tokens = {symbols.token(inst.subject)};
  }
  if (symbols.has(kIsASymbol)) {
    inst.essence_prompt = inst.subject_tokens;
    inst.essence_prompt.push_back(symbols.token(kIsASymbol));
  }
  return inst;
}

json symbols_to_json(const SymbolTable& symbols) {
  json j = json::object();
  for (const auto& [name, token] : symbols.entries()) j[name] = token;
  return j;
}

SymbolTable symbols_from_json(const json& j) {
  SymbolTable symbols;
  for (const auto& [name, token] : j.items()) symbols.add(name, token.get<int>());
  return symbols;
}

json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open for read: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kValidation,
                "cannot parse " + path + ": " + e.what());
  }
  return j;
}

void write_json_file(const json& j, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot open for write: " + path);
  out << j.dump(2) << '\n';
  if (!out) throw Error(ErrorCode::kIo, "write failed: " + path);
}

}  // namespace

void save_instances(const std::vector<PeakInstance>& instances,
                    const SymbolTable& symbols, const std::string& path) {
  json j;
  j["schema_version"] = kSchemaVersion;
  j["symbols"] = symbols_to_json(symbols);
  j["instances"] = json::array();
  for (const PeakInstance& inst : instances)
    j["instances"].push_back(instance_to_json(inst, symbols));
  write_json_file(j, path);
}

Dataset load_instances(const std::string& path, bool permissive) {
  const json j = load_json_file(path);
  require_keys(j, {"schema_version", "symbols", "instances"}, "dataset file");
  if (j.at("schema_version").get<int>() != kSchemaVersion)
    throw Error(ErrorCode::kValidation,
                "dataset file has unsupported schema_version");
  Dataset ds;
  ds.symbols = symbols_from_json(j.at("symbols"));
  std::vector<std::size_t> offenders;
  std::string first_violation;
  for (const auto& el : j.at("instances")) {
    PeakInstance inst = instance_from_json(el, ds.symbols);
    const auto violations = validate_instance(inst);
    if (!violations.empty()) {
      if (first_violation.empty()) first_violation = violations.front();
      offenders.push_back(ds.instances.size());
    }
    ds.instances.push_back(std::move(inst));
  }
  if (!offenders.empty() && !permissive) {
    std::ostringstream msg;
    msg << "dataset file contains invalid instances at indices [";
    for (std::size_t i = 0; i < offenders.size(); ++i)
      msg << (i ? " " : "") << offenders[i];
    msg << "]: " << first_violation;
    throw Error(ErrorCode::kValidation, msg.str());
  }
  return ds;
}

void save_corpus(const std::vector<TokenSeq>& corpus, const SymbolTable& symbols,
                 const std::string& path) {
  json j;
  j["schema_version"] = kSchemaVersion;
  j["symbols"] = symbols_to_json(symbols);
  j["sequences"] = json::array();
  for (const TokenSeq& seq : corpus)
    j["sequences"].push_back(seq_to_json(seq, symbols));
  write_json_file(j, path);
}

std::vector<TokenSeq> load_corpus(const std::string& path) {
  const json j = load_json_file(path);
  require_keys(j, {"schema_version", "symbols", "sequences"}, "corpus file");
  const SymbolTable symbols = symbols_from_json(j.at("symbols"));
  std::vector<TokenSeq> corpus;
  for (const auto& el : j.at("sequences"))
    corpus.push_back(seq_from_json(el, symbols));
  return corpus;
}

std::uint64_t bundle_checksum(const WorldBundle& bundle) {
  std::uint64_t h = kFnvBasis;
  auto hash_seq = [&h](const TokenSeq& seq) {
    const std::uint64_t len = seq.size();
    h = fnv1a(&len, sizeof(len), h);
    h = fnv1a(seq.data(), seq.size() * sizeof(int), h);
  };
  for (const PeakInstance& inst : bundle.instances) {
    h = fnv1a(inst.subject.data(), inst.subject.size(), h);
    h = fnv1a(inst.relation.data(), inst.relation.size(), h);
    hash_seq(inst.prompt);
    for (const TokenSeq& s : inst.correct) hash_seq(s);
    hash_seq(inst.new_answer);
    for (const TokenSeq& s : inst.paraphrases) hash_seq(s);
    for (const LocalityProbe& p : inst.locality) {
      hash_seq(p.prompt);
      hash_seq(p.answer);
    }
    for (const TokenSeq& s : inst.hard_false) hash_seq(s);
    for (const TokenSeq& s : inst.random_false) hash_seq(s);
  }
  for (const TokenSeq& seq : bundle.corpus) hash_seq(seq);
  return h;
}

}  // namespace peak::dataset
