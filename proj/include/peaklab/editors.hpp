#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "peaklab/dataset.hpp"
#include "peaklab/microlm.hpp"
#include "peaklab/objective.hpp"

namespace peak::editors {

using dataset::FalseSet;
using dataset::PeakInstance;
using microlm::ModelParams;
using microlm::ObjectiveTerm;
using microlm::TokenSeq;
using peak::Matrix;
using peak::Vec;

// Weights of the three auxiliary preservation/prevention objectives added to
// an editor's own loss: alpha scales the correct-vs-false margin hinge, beta
// the correct-probability floor, gamma the false-probability ceiling.
struct APPConfig {
  double alpha = 0.2;
  double beta = 0.2;
  double gamma = 0.1;
  double margin = 2.0;
  FalseSet false_set = FalseSet::kHard;

  void validate() const;  // throws ErrorCode::kConfig
};

struct ROMEConfig {
  int layer = 2;
  int n_prefixes = 20;
  int prefix_len_min = 0;
  int prefix_len_max = 10;
  int v_steps = 25;
  double v_rate = 0.5;
  double kl_weight = 0.0625;
  std::optional<double> z_norm_clamp_factor = 4.0;
  int cov_samples = 200;
  double cov_ridge = 1e-2;
  bool kl_all_positions = false;
  std::uint64_t seed = 0;

  void validate(const microlm::ModelConfig& model) const;
};

struct FTConfig {
  int layer = 2;
  int steps = 30;
  double rate = 5e-4;
  double norm_budget = 5e-4;  // max-magnitude bound on the weight delta

  void validate(const microlm::ModelConfig& model) const;
};

struct EditOutcome {
  ModelParams edited;
  std::vector<double> loss_trajectory;  // one entry per optimization step
  double lambda_norm = 0.0;             // ROME residual magnitude
  double weight_delta_norm = 0.0;       // FT: max |W - W_base| after editing
  int steps_taken = 0;
  std::vector<std::string> warnings;
};

// Emits the weighted auxiliary terms: N*M margin hinges at alpha/(N*M) each,
// N probability floors at beta/N, M probability ceilings at gamma/M.
// Freeze references are captured once from the unedited snapshot. Terms whose
// weight is exactly zero are omitted, so alpha=beta=gamma=0 yields an empty
// list and editors degrade bit-exactly to their uncoupled form.
std::vector<ObjectiveTerm> build_app_terms(const ModelParams& base,
                                           const PeakInstance& instance,
                                           const APPConfig& cfg,
                                           const TokenSeq& prompt);

// Average mid-MLP activation of the last subject token under random prefixes.
Vec compute_key(const ModelParams& base, const PeakInstance& instance,
                const ROMEConfig& cfg);

// C = (1/S) sum k k^T + ridge I, keys harvested at the last token of each
// sampled prompt. cov_samples limits how many prompts are drawn (seeded).
Matrix estimate_covariance(const ModelParams& base, const ROMEConfig& cfg,
                           const std::vector<TokenSeq>& sample_prompts);

struct ValueResult {
  Vec v_star;
  std::vector<double> trajectory;
  std::vector<std::string> warnings;
};

// Gradient descent on the patched editing objective (answer term, optional
// KL anchor on the essence prompt, optional APP terms), starting from the
// site's unpatched activation.
ValueResult optimize_value(const ModelParams& base, const PeakInstance& instance,
                           const std::optional<APPConfig>& app,
                           const ROMEConfig& cfg);

// W, k*, v* in associative-memory orientation: W is (out x in) with
// W k* = v* after the update. Solves C u = k* (never forms C^-1).
Matrix rank_one_update(const Matrix& w, const Vec& k_star, const Vec& v_star,
                       const Matrix& cov);

// Rank-one edit of w_proj at cfg.layer. The covariance matrix is shared
// across edits of one run; estimate it once via estimate_covariance.
EditOutcome apply_rome(const ModelParams& base, const PeakInstance& instance,
                       const std::optional<APPConfig>& app, const ROMEConfig& cfg,
                       const Matrix& cov);

EditOutcome apply_rome(const ModelParams& base, const PeakInstance& instance,
                       const std::optional<APPConfig>& app, const ROMEConfig& cfg,
                       const std::vector<TokenSeq>& cov_sample_prompts);

// Constrained fine-tuning of w_proj at cfg.layer: descent on the editing
// loss with the weight delta projected onto the max-magnitude ball.
EditOutcome apply_ft(const ModelParams& base, const PeakInstance& instance,
                     const std::optional<APPConfig>& app, const FTConfig& cfg);

// Index of the last token of the subject's final occurrence inside prompt.
int last_subject_position(const TokenSeq& prompt, const TokenSeq& subject);

}  // namespace peak::editors
