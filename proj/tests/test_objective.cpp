#include <cmath>
#include <variant>

#include "doctest.h"
#include "peaklab/error.hpp"
#include "peaklab/microlm.hpp"
#include "peaklab/objective.hpp"
#include "test_util.hpp"

using namespace peak;
using namespace peak::microlm;

namespace {

// Builds a mixed term set whose hinge/freeze kinks sit at least `slack` away
// from the operating point, so central differences stay on one branch.
std::vector<ObjectiveTerm> random_term_set(const ModelParams& params, Rng& rng,
                                           const std::optional<Patch>& patch,
                                           double slack = 0.25) {
  const int vocab = params.config.vocab_size;
  const int min_len = patch ? patch->site.position + 1 : 1;
  auto prompt = [&] {
    const int len = std::max<int>(min_len + 1, 3);
    return testutil::random_tokens(rng, len, vocab);
  };
  auto answer = [&] {
    return testutil::random_tokens(rng, 1 + static_cast<int>(rng.uniform_int(0, 1)),
                                   vocab);
  };
  auto lp = [&](const TokenSeq& p, const TokenSeq& a) {
    return answer_logprob(params, p, a, patch);
  };

  std::vector<ObjectiveTerm> terms;
  {
    ObjectiveTerm t;
    t.kind = TermKind::kAnswerLogprob;
    t.prompt = prompt();
    t.primary = answer();
    t.weight = 0.5 + rng.uniform();
    terms.push_back(t);
  }
  for (int active = 0; active < 2; ++active) {
    ObjectiveTerm t;
    t.kind = TermKind::kHingePair;
    t.prompt = prompt();
    t.primary = answer();
    t.secondary = answer();
    const double gap = lp(t.prompt, t.primary) - lp(t.prompt, t.secondary);
    t.reference = active ? gap + slack : gap - slack;  // margin
    t.weight = 0.5 + rng.uniform();
    terms.push_back(t);
  }
  for (int active = 0; active < 2; ++active) {
    ObjectiveTerm t;
    t.kind = TermKind::kFreezeLower;
    t.prompt = prompt();
    t.primary = answer();
    const double ref = lp(t.prompt, t.primary);
    t.reference = active ? ref + slack : ref - slack;
    t.weight = 0.5 + rng.uniform();
    terms.push_back(t);
  }
  {
    ObjectiveTerm t;
    t.kind = TermKind::kFreezeUpper;
    t.prompt = prompt();
    t.primary = answer();
    t.reference = lp(t.prompt, t.primary) - slack;  // active
    t.weight = 0.5 + rng.uniform();
    terms.push_back(t);
  }
  {
    ObjectiveTerm t;
    t.kind = TermKind::kKlAnchor;
    t.prompt = prompt();
    t.weight = 0.5 + rng.uniform();
    // Anchor against a slightly different snapshot so the KL is nonzero.
    ModelConfig other_cfg = params.config;
    other_cfg.seed ^= 0x9e37;
    const ModelParams other = init_model(other_cfg);
    t.ref_distribution = kl_reference_distribution(other, t.prompt, false);
    terms.push_back(t);
  }
  return terms;
}

double max_grad_error_patch(const ModelParams& params,
                            const std::vector<ObjectiveTerm>& terms,
                            const PatchSite& site, const Vec& z0) {
  const ObjectiveResult res =
      objective_value_and_grad(params, terms, PatchTarget{site, z0});
  const double h = 1e-4;
  double worst = 0.0;
  for (std::size_t j = 0; j < z0.size(); ++j) {
    Vec zp = z0, zm = z0;
    zp[j] += h;
    zm[j] -= h;
    const double fp = objective_value(params, terms, Patch{site, zp});
    const double fm = objective_value(params, terms, Patch{site, zm});
    const double fd = (fp - fm) / (2.0 * h);
    worst = std::max(worst, testutil::rel_err(res.patch_grad[j], fd));
  }
  return worst;
}

double max_grad_error_weight(const ModelParams& params,
                             const std::vector<ObjectiveTerm>& terms, int layer) {
  const ObjectiveResult res =
      objective_value_and_grad(params, terms, WeightTarget{layer});
  const double h = 1e-4;
  double worst = 0.0;
  ModelParams work = params;
  Matrix& w = work.layers[layer].w_proj;
  for (std::size_t i = 0; i < w.data.size(); ++i) {
    const double orig = w.data[i];
    w.data[i] = orig + h;
    const double fp = objective_value(work, terms, std::nullopt);
    w.data[i] = orig - h;
    const double fm = objective_value(work, terms, std::nullopt);
    w.data[i] = orig;
    const double fd = (fp - fm) / (2.0 * h);
    worst = std::max(worst, testutil::rel_err(res.weight_grad.data[i], fd));
  }
  return worst;
}

}  // namespace

TEST_CASE("empty term list gives zero value and zero gradient") {
  const ModelParams params = init_model(testutil::tiny_config());
  const ObjectiveResult res = objective_value_and_grad(
      params, {}, PatchTarget{PatchSite{0, 0}, Vec(params.config.d_model, 0.0)});
  CHECK(res.value == 0.0);
  for (double g : res.patch_grad) CHECK(g == 0.0);

  const ObjectiveResult wres =
      objective_value_and_grad(params, {}, WeightTarget{1});
  CHECK(wres.value == 0.0);
  for (double g : wres.weight_grad.data) CHECK(g == 0.0);
}

TEST_CASE("term values follow their defining formulas") {
  const ModelParams params = init_model(testutil::tiny_config(40));
  const TokenSeq prompt{1, 2, 3};
  const TokenSeq a{4};
  const TokenSeq b{5, 6};
  const double lp_a = answer_logprob(params, prompt, a);
  const double lp_b = answer_logprob(params, prompt, b);

  ObjectiveTerm hinge;
  hinge.kind = TermKind::kHingePair;
  hinge.prompt = prompt;
  hinge.primary = a;
  hinge.secondary = b;
  hinge.reference = 2.0;

  ObjectiveTerm freeze_lo;
  freeze_lo.kind = TermKind::kFreezeLower;
  freeze_lo.prompt = prompt;
  freeze_lo.primary = a;
  freeze_lo.reference = lp_a + 0.75;

  ObjectiveTerm freeze_hi;
  freeze_hi.kind = TermKind::kFreezeUpper;
  freeze_hi.prompt = prompt;
  freeze_hi.primary = a;
  freeze_hi.reference = lp_a + 0.75;  // inactive

  ObjectiveTerm answer;
  answer.kind = TermKind::kAnswerLogprob;
  answer.prompt = prompt;
  answer.primary = b;

  const ObjectiveResult res = objective_value_and_grad(
      params, {hinge, freeze_lo, freeze_hi, answer}, WeightTarget{0});
  CHECK(res.term_values[0] ==
        doctest::Approx(std::max(0.0, 2.0 - lp_a + lp_b)).epsilon(1e-12));
  CHECK(res.term_values[1] == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(res.term_values[2] == 0.0);
  CHECK(res.term_values[3] == doctest::Approx(-lp_b).epsilon(1e-12));

  // Worked hinge example: margin 2, lp(primary) = -1, lp(secondary) = -2
  // gives max{0, 2 - (-1) + (-2)} = 1; the formula above reduces to it.
  CHECK(std::max(0.0, 2.0 - (-1.0) + (-2.0)) == 1.0);
}

TEST_CASE("patch gradient matches central finite differences") {
  Rng rng(123);
  double worst = 0.0;
  for (int trial = 0; trial < 2; ++trial) {
    const ModelParams params = init_model(testutil::tiny_config(50 + trial));
    const PatchSite site{trial % params.config.n_layers, 1};
    Vec z0(params.config.d_model);
    for (double& v : z0) v = rng.gauss() * 0.5;
    const std::optional<Patch> patch = Patch{site, z0};
    const auto terms = random_term_set(params, rng, patch);
    worst = std::max(worst, max_grad_error_patch(params, terms, site, z0));
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("w_proj gradient matches central finite differences") {
  Rng rng(321);
  double worst = 0.0;
  for (int trial = 0; trial < 2; ++trial) {
    const ModelParams params = init_model(testutil::tiny_config(70 + trial));
    const auto terms = random_term_set(params, rng, std::nullopt);
    const int layer = trial % params.config.n_layers;
    worst = std::max(worst, max_grad_error_weight(params, terms, layer));
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("non-finite inputs raise numerical errors with term index") {
  const ModelParams params = init_model(testutil::tiny_config());
  ObjectiveTerm t;
  t.kind = TermKind::kAnswerLogprob;
  t.prompt = {1, 2};
  t.primary = {3};
  Vec nan_z(params.config.d_model, std::nan(""));
  CHECK_THROWS_WITH_AS(
      objective_value_and_grad(params, {t}, PatchTarget{PatchSite{0, 0}, nan_z}),
      doctest::Contains("term 0"), Error);
}

TEST_CASE("patch position must lie inside every term prompt") {
  const ModelParams params = init_model(testutil::tiny_config());
  ObjectiveTerm t;
  t.kind = TermKind::kAnswerLogprob;
  t.prompt = {1, 2};
  t.primary = {3};
  CHECK_THROWS_AS(objective_value_and_grad(
                      params, {t},
                      PatchTarget{PatchSite{0, 5}, Vec(params.config.d_model, 0.0)}),
                  Error);
}
