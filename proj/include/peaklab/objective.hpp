#pragma once

#include <optional>
#include <variant>
#include <vector>

#include "peaklab/microlm.hpp"

namespace peak::microlm {

enum class TermKind {
  kAnswerLogprob,  // -lp(primary); drives the edited answer up
  kHingePair,      // max{0, margin - lp(primary) + lp(secondary)}
  kFreezeLower,    // max{0, ref - lp(primary)}; penalizes drops below ref
  kFreezeUpper,    // max{0, lp(primary) - ref}; penalizes rises above ref
  kKlAnchor,       // KL(current distribution || reference) on the prompt
};

// One additive summand of a composite editing loss. lp(.) is the
// length-normalized answer log-probability under the current target setting.
struct ObjectiveTerm {
  TermKind kind = TermKind::kAnswerLogprob;
  TokenSeq prompt;
  TokenSeq primary;
  TokenSeq secondary;        // kHingePair only
  double reference = 0.0;    // margin for kHingePair, pre-edit lp for freezes
  double weight = 1.0;
  // kKlAnchor: reference next-token distribution, captured from the unedited
  // snapshot at the anchor position of `prompt`.
  Vec ref_distribution;
  // kKlAnchor: when true, KL is summed over every prompt position instead of
  // the final one (ref_distribution then has one row per position, flattened).
  bool kl_all_positions = false;

  void validate(int vocab_size) const;  // throws ErrorCode::kInput
};

// Gradient target: either a patched hidden vector or one W_proj matrix.
struct PatchTarget {
  PatchSite site;
  Vec z;
};

struct WeightTarget {
  int layer = 0;  // selects w_proj of this layer
};

using GradTarget = std::variant<PatchTarget, WeightTarget>;

struct ObjectiveResult {
  double value = 0.0;
  Vec patch_grad;     // set for PatchTarget
  Matrix weight_grad; // set for WeightTarget (d_ff x d_model)
  std::vector<double> term_values;  // unweighted, per input term
};

// Evaluates sum_k weight_k * term_k under the target's current setting and
// its exact reverse-mode gradient with respect to the target. Forward passes
// are shared across terms that score the same token sequence.
ObjectiveResult objective_value_and_grad(const ModelParams& params,
                                         const std::vector<ObjectiveTerm>& terms,
                                         const GradTarget& target);

// Value-only evaluation (no backward passes).
double objective_value(const ModelParams& params,
                       const std::vector<ObjectiveTerm>& terms,
                       const std::optional<Patch>& patch);

// Reference next-token distribution at the anchor position(s) of `prompt`
// under `params`, for building kKlAnchor terms.
Vec kl_reference_distribution(const ModelParams& params, const TokenSeq& prompt,
                              bool all_positions);

}  // namespace peak::microlm
