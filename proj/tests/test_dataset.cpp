#include <algorithm>
#include <cstdio>
#include <string>

#include "doctest.h"
#include "peaklab/dataset.hpp"
#include "peaklab/error.hpp"
#include "peaklab/microlm.hpp"
#include "test_util.hpp"

using namespace peak;
using namespace peak::dataset;

namespace {

SyntheticWorldConfig small_world(std::uint64_t seed = 1) {
  SyntheticWorldConfig cfg;
  cfg.n_relations = 3;
  cfg.n_subjects_per_relation = 3;
  cfg.n_correct_per_fact = 3;
  cfg.n_hard = 3;
  cfg.n_random = 3;
  cfg.n_paraphrases = 2;
  cfg.n_locality = 2;
  cfg.clusters_per_relation = 2;
  cfg.cluster_size = 5;
  cfg.corpus_repetitions = 2;
  cfg.entity_hi = 256;
  cfg.seed = seed;
  return cfg;
}

// Cluster id parsed from an object entity's first symbol name ("obj_c<k>_...").
int cluster_of(const SymbolTable& symbols, const microlm::TokenSeq& entity) {
  const std::string name = symbols.name(entity.front());
  REQUIRE(name.rfind("obj_c", 0) == 0);
  return std::stoi(name.substr(5));
}

bool starts_with(const microlm::TokenSeq& seq, const microlm::TokenSeq& prefix) {
  if (prefix.size() > seq.size()) return false;
  return std::equal(prefix.begin(), prefix.end(), seq.begin());
}

}  // namespace

TEST_CASE("generate_world is deterministic and respects invariants") {
  const WorldBundle a = generate_world(small_world(5));
  const WorldBundle b = generate_world(small_world(5));
  CHECK(bundle_checksum(a) == bundle_checksum(b));
  CHECK(bundle_checksum(generate_world(small_world(6))) != bundle_checksum(a));

  for (const PeakInstance& inst : a.instances) {
    CHECK(validate_instance(inst).empty());

    // Hard negatives share the new answer's cluster; random ones never do.
    const int star_cluster = cluster_of(a.symbols, inst.new_answer);
    for (const auto& f : inst.hard_false)
      CHECK(cluster_of(a.symbols, f) == star_cluster);
    for (const auto& f : inst.random_false)
      CHECK(cluster_of(a.symbols, f) != star_cluster);

    // The new knowledge is unseen: no corpus sequence pairs any of the
    // instance's prompts with its new answer.
    std::vector<microlm::TokenSeq> prompts{inst.prompt};
    prompts.insert(prompts.end(), inst.paraphrases.begin(),
                   inst.paraphrases.end());
    for (const auto& prompt : prompts) {
      microlm::TokenSeq pair = prompt;
      pair.insert(pair.end(), inst.new_answer.begin(), inst.new_answer.end());
      for (const auto& seq : a.corpus) CHECK_FALSE(starts_with(seq, pair));
    }
  }

  // Every correct answer appears in the corpus with its editing prompt.
  for (const PeakInstance& inst : a.instances) {
    for (const auto& answer : inst.correct) {
      microlm::TokenSeq pair = inst.prompt;
      pair.insert(pair.end(), answer.begin(), answer.end());
      CHECK(std::count(a.corpus.begin(), a.corpus.end(), pair) ==
            small_world().corpus_repetitions);
    }
  }
}

TEST_CASE("world config validation") {
  SyntheticWorldConfig cfg = small_world();
  cfg.n_hard = cfg.cluster_size;  // needs cluster_size - 1 at most
  CHECK_THROWS_AS(generate_world(cfg), Error);

  cfg = small_world();
  cfg.entity_hi = cfg.entity_lo + 4;  // far too small
  CHECK_THROWS_AS(generate_world(cfg), Error);

  cfg = small_world();
  cfg.template_hi = cfg.entity_lo + 1;  // overlapping ranges
  CHECK_THROWS_AS(generate_world(cfg), Error);
}

TEST_CASE("validate_instance reports all violations") {
  const WorldBundle world = generate_world(small_world(9));
  PeakInstance inst = world.instances.front();
  CHECK(validate_instance(inst).empty());

  PeakInstance bad = inst;
  bad.correct.push_back(bad.new_answer);
  auto violations = validate_instance(bad);
  CHECK(std::count(violations.begin(), violations.end(),
                   "new answer already correct") == 1);

  bad = inst;
  bad.hard_false.push_back(bad.correct.front());
  violations = validate_instance(bad);
  CHECK(std::count(violations.begin(), violations.end(),
                   "false/correct overlap (hard)") == 1);

  bad = inst;
  bad.correct.clear();
  bad.hard_false.push_back(bad.new_answer);
  violations = validate_instance(bad);
  CHECK(violations.size() >= 2);  // empty O and hard==new reported together
}

TEST_CASE("filter_instance enforces the pre-edit ordering") {
  const WorldBundle world = generate_world(small_world(13));
  microlm::ModelConfig model_cfg = testutil::tiny_config(3);
  model_cfg.vocab_size = 256;  // cover the world's token ranges
  const microlm::ModelParams model = microlm::init_model(model_cfg);
  const PeakInstance& inst = world.instances.front();

  CHECK_THROWS_AS(filter_instance(model, inst, 0.0), Error);
  CHECK_THROWS_AS(filter_instance(model, inst, 1.0), Error);

  // A threshold near 1 removes every correct answer.
  const FilterOutcome rejected = filter_instance(model, inst, 0.999999);
  CHECK(!rejected.instance.has_value());
  CHECK(rejected.reject_reason == "all correct answers filtered out");

  // A tiny threshold keeps all correct answers and prunes false answers that
  // reach the minimum surviving correct probability.
  const FilterOutcome kept = filter_instance(model, inst, 1e-9);
  if (kept.instance) {
    const PeakInstance& f = *kept.instance;
    CHECK(f.correct.size() == inst.correct.size());
    double min_correct = 1e300;
    for (const auto& o : f.correct)
      min_correct = std::min(min_correct,
                             microlm::answer_probability(model, f.prompt, o));
    for (const auto& fa : f.hard_false)
      CHECK(microlm::answer_probability(model, f.prompt, fa) < min_correct);
    for (const auto& fa : f.random_false)
      CHECK(microlm::answer_probability(model, f.prompt, fa) < min_correct);
    CHECK(validate_instance(f).empty());
  }
}

TEST_CASE("instances save/load round trip") {
  const WorldBundle world = generate_world(small_world(17));
  const std::string path = "test_dataset_roundtrip.json";
  save_instances(world.instances, world.symbols, path);

  const Dataset loaded = load_instances(path);
  REQUIRE(loaded.instances.size() == world.instances.size());
  for (std::size_t i = 0; i < loaded.instances.size(); ++i) {
    const PeakInstance& x = world.instances[i];
    const PeakInstance& y = loaded.instances[i];
    CHECK(x.subject == y.subject);
    CHECK(x.relation == y.relation);
    CHECK(x.prompt == y.prompt);
    CHECK(x.correct == y.correct);
    CHECK(x.new_answer == y.new_answer);
    CHECK(x.paraphrases == y.paraphrases);
    CHECK(x.hard_false == y.hard_false);
    CHECK(x.random_false == y.random_false);
    CHECK(x.subject_tokens == y.subject_tokens);
    CHECK(x.essence_prompt == y.essence_prompt);
    REQUIRE(x.locality.size() == y.locality.size());
    for (std::size_t k = 0; k < x.locality.size(); ++k) {
      CHECK(x.locality[k].prompt == y.locality[k].prompt);
      CHECK(x.locality[k].answer == y.locality[k].answer);
    }
  }
  std::remove(path.c_str());
}

TEST_CASE("loader rejects invalid instances unless permissive") {
  const WorldBundle world = generate_world(small_world(23));
  std::vector<PeakInstance> instances = world.instances;
  instances[1].hard_false.push_back(instances[1].correct.front());

  const std::string path = "test_dataset_invalid.json";
  save_instances(instances, world.symbols, path);

  CHECK_THROWS_WITH_AS(load_instances(path), doctest::Contains("indices [1]"),
                       Error);
  const Dataset permissive = load_instances(path, /*permissive=*/true);
  CHECK(permissive.instances.size() == instances.size());
  std::remove(path.c_str());
}

TEST_CASE("empty instance list is a valid dataset") {
  const WorldBundle world = generate_world(small_world(29));
  const std::string path = "test_dataset_empty.json";
  save_instances({}, world.symbols, path);
  const Dataset loaded = load_instances(path);
  CHECK(loaded.instances.empty());
  std::remove(path.c_str());
}

TEST_CASE("corpus save/load round trip") {
  const WorldBundle world = generate_world(small_world(31));
  const std::string path = "test_corpus_roundtrip.json";
  save_corpus(world.corpus, world.symbols, path);
  const auto corpus = load_corpus(path);
  CHECK(corpus == world.corpus);
  std::remove(path.c_str());
}
