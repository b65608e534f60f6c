#pragma once

#include <string>
#include <vector>

#include "peaklab/dataset.hpp"
#include "peaklab/microlm.hpp"

namespace peak::metrics {

using dataset::FalseSet;
using dataset::PeakInstance;
using microlm::ModelParams;
using microlm::TokenSeq;

// One scored (prompt, answer) reading; probability = exp(logprob).
struct AnswerProbe {
  TokenSeq prompt;
  TokenSeq answer;
  double probability = 0.0;
  double logprob = 0.0;
};

AnswerProbe make_probe(const ModelParams& params, const TokenSeq& prompt,
                       const TokenSeq& answer);

double logistic(double x);

// Sigmoid-weighted fraction of correct answers ranked below the strongest
// false answer.
double ranking_forgetting(const std::vector<AnswerProbe>& correct,
                          double false_max);

// Sigmoid-weighted fraction of false answers ranked above the weakest
// correct answer.
double ranking_noise(const std::vector<AnswerProbe>& false_probes,
                     double correct_min);

struct ProbabilityChange {
  double cpc = 1.0;
  double fpc = 1.0;
};

// Post-to-pre ratios of summed correct / false answer probability.
ProbabilityChange probability_changes(const std::vector<AnswerProbe>& pre_correct,
                                      const std::vector<AnswerProbe>& post_correct,
                                      const std::vector<AnswerProbe>& pre_false,
                                      const std::vector<AnswerProbe>& post_false);

struct AggregatedAdditivity {
  double aff = 0.0;
  double anf = 0.0;
};

AggregatedAdditivity aggregate_additivity(double rff, double rnf, double cpc,
                                          double fpc);

struct PromptAdditivity {
  TokenSeq prompt;
  double p_f_max = 0.0;  // max post-edit false probability
  double p_c_min = 0.0;  // min post-edit correct probability
  double rff = 0.0, rnf = 0.0, cpc = 1.0, fpc = 1.0, aff = 0.0, anf = 0.0;
  std::vector<AnswerProbe> pre_correct, post_correct, pre_false, post_false;
};

enum class ThresholdMode { kPerPrompt, kPooled };

struct AdditivityEval {
  FalseSet false_set = FalseSet::kHard;
  ThresholdMode mode = ThresholdMode::kPerPrompt;
  double rff = 0.0, rnf = 0.0, cpc = 1.0, fpc = 1.0, aff = 0.0, anf = 0.0;
  std::vector<PromptAdditivity> per_prompt;
};

struct EditEval {
  int es = 0;
  double gs = 0.0;
  double ls = 0.0;
  std::vector<AdditivityEval> additivity;  // one entry per evaluated false set

  const AdditivityEval& for_set(FalseSet fs) const;
};

// 1 iff the edited model ranks the new answer above the weakest original
// correct answer under the editing prompt (strict).
int efficacy(const ModelParams& post, const PeakInstance& instance);

// Mean efficacy indicator over the paraphrase prompts.
double generalization(const ModelParams& post, const PeakInstance& instance);

// Mean over locality probes of 1[P(o_l | p_l) > P(o* | p_l)].
double locality(const ModelParams& post, const PeakInstance& instance);

// Additivity over the editing prompt and every paraphrase. Per-prompt mode
// recomputes thresholds for each prompt and averages the per-prompt metrics;
// pooled mode concatenates all probes first.
AdditivityEval additivity_eval(const ModelParams& pre, const ModelParams& post,
                               const PeakInstance& instance, FalseSet fs,
                               ThresholdMode mode = ThresholdMode::kPerPrompt);

EditEval evaluate_edit(const ModelParams& pre, const ModelParams& post,
                       const PeakInstance& instance,
                       const std::vector<FalseSet>& false_sets =
                           {FalseSet::kHard, FalseSet::kRandom},
                       ThresholdMode mode = ThresholdMode::kPerPrompt);

struct ReportRow {
  std::string label;
  int n_edits = 0;
  std::vector<FalseSet> false_sets;
  // Fractions in [0, 1]; additivity ordered as false_sets.
  double es = 0.0, gs = 0.0, ls = 0.0;
  std::vector<double> aff, anf;
};

ReportRow aggregate_dataset(const std::string& label,
                            const std::vector<EditEval>& evals);

// Percentage with two decimals, ties rounded half-to-even.
std::string format_percent(double fraction);

std::vector<std::string> report_header(const std::vector<FalseSet>& false_sets);
std::vector<std::string> report_cells(const ReportRow& row);

}  // namespace peak::metrics
