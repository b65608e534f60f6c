#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "peaklab/microlm.hpp"

namespace peak::dataset {

using microlm::TokenSeq;

enum class FalseSet { kHard, kRandom };

const char* false_set_name(FalseSet fs);

// Bidirectional symbol <-> token-id map. Multi-token answers are sequences
// of symbols, one symbol per token.
class SymbolTable {
 public:
  void add(const std::string& name, int token);
  int token(const std::string& name) const;       // throws kValidation
  const std::string& name(int token) const;       // throws kValidation
  bool has(const std::string& name) const;
  std::size_t size() const { return to_token_.size(); }

  TokenSeq tokens(const std::vector<std::string>& names) const;
  std::vector<std::string> names(const TokenSeq& tokens) const;

  const std::map<std::string, int>& entries() const { return to_token_; }

 private:
  std::map<std::string, int> to_token_;
  std::map<int, std::string> to_name_;
};

struct LocalityProbe {
  TokenSeq prompt;
  TokenSeq answer;  // the probe's original answer o_l
};

// One edit case: append new_answer to the answer list of (subject, relation).
struct PeakInstance {
  std::string subject;
  std::string relation;
  TokenSeq prompt;                      // editing prompt p
  std::vector<TokenSeq> correct;        // O
  TokenSeq new_answer;                  // o*
  std::vector<TokenSeq> paraphrases;    // P^G
  std::vector<LocalityProbe> locality;  // P^L
  std::vector<TokenSeq> hard_false;     // O_h, same entity cluster as o*
  std::vector<TokenSeq> random_false;   // O_r, unrelated clusters

  // Derived at generation/load time; not part of the file schema.
  TokenSeq subject_tokens;
  TokenSeq essence_prompt;  // subject followed by the reserved IS-A token

  const std::vector<TokenSeq>& false_answers(FalseSet fs) const {
    return fs == FalseSet::kHard ? hard_false : random_false;
  }
};

// Returns every invariant violation (empty when the instance is well-formed).
std::vector<std::string> validate_instance(const PeakInstance& instance);

struct SyntheticWorldConfig {
  int n_relations = 8;
  int n_subjects_per_relation = 8;
  int n_correct_per_fact = 4;
  int n_hard = 4;
  int n_random = 4;
  int n_paraphrases = 2;
  int n_locality = 2;
  int clusters_per_relation = 3;
  int cluster_size = 8;
  // Every k-th object entity spans two tokens; 0 disables multi-token objects.
  int two_token_every = 8;
  int corpus_repetitions = 8;
  // Token-id ranges [lo, hi) carving up the model vocabulary.
  int special_lo = 0, special_hi = 16;
  int template_lo = 16, template_hi = 80;
  int entity_lo = 80, entity_hi = 512;
  std::uint64_t seed = 0;

  void validate() const;  // throws ErrorCode::kConfig
};

struct WorldBundle {
  std::vector<PeakInstance> instances;
  std::vector<TokenSeq> corpus;
  SymbolTable symbols;
};

WorldBundle generate_world(const SyntheticWorldConfig& cfg);

enum class FilterPrompts { kEditingOnly, kAllPrompts };

struct FilterOutcome {
  std::optional<PeakInstance> instance;  // nullopt when rejected
  std::string reject_reason;
  std::vector<std::string> dropped_correct;  // audit info, symbol-joined
};

// §-style pre-edit pruning: drops correct answers whose probability under the
// filtering prompt(s) falls below tau, then drops false answers whose
// probability reaches the minimum surviving correct probability.
FilterOutcome filter_instance(const microlm::ModelParams& model,
                              const PeakInstance& instance, double tau,
                              FilterPrompts mode = FilterPrompts::kEditingOnly);

struct Dataset {
  std::vector<PeakInstance> instances;
  SymbolTable symbols;
};

void save_instances(const std::vector<PeakInstance>& instances,
                    const SymbolTable& symbols, const std::string& path);
Dataset load_instances(const std::string& path, bool permissive = false);

void save_corpus(const std::vector<TokenSeq>& corpus, const SymbolTable& symbols,
                 const std::string& path);
std::vector<TokenSeq> load_corpus(const std::string& path);

std::uint64_t bundle_checksum(const WorldBundle& bundle);

}  // namespace peak::dataset
