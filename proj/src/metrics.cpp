#include "peaklab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "peaklab/error.hpp"

namespace peak::metrics {

namespace {

double min_correct_probability(const ModelParams& model,
                               const PeakInstance& inst,
                               const TokenSeq& prompt) {
  double mn = 1e300;
  for (const TokenSeq& answer : inst.correct)
    mn = std::min(mn, microlm::answer_probability(model, prompt, answer));
  return mn;
}

std::vector<AnswerProbe> probe_all(const ModelParams& model,
                                   const TokenSeq& prompt,
                                   const std::vector<TokenSeq>& answers) {
  std::vector<AnswerProbe> probes;
  probes.reserve(answers.size());
  for (const TokenSeq& answer : answers)
    probes.push_back(make_probe(model, prompt, answer));
  return probes;
}

double sum_probability(const std::vector<AnswerProbe>& probes) {
  double s = 0.0;
  for (const AnswerProbe& p : probes) s += p.probability;
  return s;
}

// Computes one additivity reading from matched pre/post probe lists.
PromptAdditivity additivity_from_probes(std::vector<AnswerProbe> pre_correct,
                                        std::vector<AnswerProbe> post_correct,
                                        std::vector<AnswerProbe> pre_false,
                                        std::vector<AnswerProbe> post_false) {
  PromptAdditivity out;
  out.p_f_max = 0.0;
  for (const AnswerProbe& p : post_false)
    out.p_f_max = std::max(out.p_f_max, p.probability);
  out.p_c_min = 1e300;
  for (const AnswerProbe& p : post_correct)
    out.p_c_min = std::min(out.p_c_min, p.probability);

  out.rff = ranking_forgetting(post_correct, out.p_f_max);
  out.rnf = ranking_noise(post_false, out.p_c_min);
  const ProbabilityChange pc =
      probability_changes(pre_correct, post_correct, pre_false, post_false);
  out.cpc = pc.cpc;
  out.fpc = pc.fpc;
  const AggregatedAdditivity agg =
      aggregate_additivity(out.rff, out.rnf, out.cpc, out.fpc);
  out.aff = agg.aff;
  out.anf = agg.anf;

  out.pre_correct = std::move(pre_correct);
  out.post_correct = std::move(post_correct);
  out.pre_false = std::move(pre_false);
  out.post_false = std::move(post_false);
  return out;
}

}  // namespace

AnswerProbe make_probe(const ModelParams& params, const TokenSeq& prompt,
                       const TokenSeq& answer) {
  AnswerProbe probe;
  probe.prompt = prompt;
  probe.answer = answer;
  probe.logprob = microlm::answer_logprob(params, prompt, answer);
  probe.probability = std::exp(probe.logprob);
  return probe;
}

double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double ranking_forgetting(const std::vector<AnswerProbe>& correct,
                          double false_max) {
  if (correct.empty())
    throw Error(ErrorCode::kInput, "ranking_forgetting: no correct probes");
  double num = 0.0, den = 0.0;
  for (const AnswerProbe& p : correct) {
    const double w = logistic(p.probability);
    den += w;
    if (p.probability < false_max) num += w;
  }
  return num / den;
}

double ranking_noise(const std::vector<AnswerProbe>& false_probes,
                     double correct_min) {
  if (false_probes.empty())
    throw Error(ErrorCode::kInput, "ranking_noise: no false probes");
  double num = 0.0, den = 0.0;
  for (const AnswerProbe& p : false_probes) {
    const double w = logistic(p.probability);
    den += w;
    if (p.probability > correct_min) num += w;
  }
  return num / den;
}

ProbabilityChange probability_changes(const std::vector<AnswerProbe>& pre_correct,
                                      const std::vector<AnswerProbe>& post_correct,
                                      const std::vector<AnswerProbe>& pre_false,
                                      const std::vector<AnswerProbe>& post_false) {
  if (pre_correct.size() != post_correct.size() ||
      pre_false.size() != post_false.size())
    throw Error(ErrorCode::kInput, "probability_changes: mismatched probe lists");
  const double pre_c = sum_probability(pre_correct);
  const double pre_f = sum_probability(pre_false);
  if (pre_c <= 0.0 || pre_f <= 0.0)
    throw Error(ErrorCode::kInput,
                "probability_changes: zero pre-edit probability mass");
  return ProbabilityChange{sum_probability(post_correct) / pre_c,
                           sum_probability(post_false) / pre_f};
}

AggregatedAdditivity aggregate_additivity(double rff, double rnf, double cpc,
                                          double fpc) {
  AggregatedAdditivity out;
  out.aff = 1.0 - (1.0 - rff) * std::min(1.0, cpc);
  out.anf = 1.0 - (1.0 - rnf) * std::min(1.0, 1.0 / fpc);
  return out;
}

int efficacy(const ModelParams& post, const PeakInstance& instance) {
  if (instance.correct.empty())
    throw Error(ErrorCode::kInput, "efficacy: instance has no correct answers");
  const double p_new =
      microlm::answer_probability(post, instance.prompt, instance.new_answer);
  return p_new > min_correct_probability(post, instance, instance.prompt) ? 1 : 0;
}

double generalization(const ModelParams& post, const PeakInstance& instance) {
  if (instance.paraphrases.empty())
    throw Error(ErrorCode::kInput, "generalization: no paraphrase prompts");
  double hits = 0.0;
  for (const TokenSeq& prompt : instance.paraphrases) {
    const double p_new =
        microlm::answer_probability(post, prompt, instance.new_answer);
    if (p_new > min_correct_probability(post, instance, prompt)) hits += 1.0;
  }
  return hits / static_cast<double>(instance.paraphrases.size());
}

double locality(const ModelParams& post, const PeakInstance& instance) {
  if (instance.locality.empty())
    throw Error(ErrorCode::kInput, "locality: no locality probes");
  double hits = 0.0;
  for (const dataset::LocalityProbe& probe : instance.locality) {
    const double p_orig =
        microlm::answer_probability(post, probe.prompt, probe.answer);
    const double p_new =
        microlm::answer_probability(post, probe.prompt, instance.new_answer);
    if (p_orig > p_new) hits += 1.0;
  }
  return hits / static_cast<double>(instance.locality.size());
}

AdditivityEval additivity_eval(const ModelParams& pre, const ModelParams& post,
                               const PeakInstance& instance, FalseSet fs,
                               ThresholdMode mode) {
  const std::vector<TokenSeq>& false_answers = instance.false_answers(fs);
  if (false_answers.empty())
    throw Error(ErrorCode::kInput, std::string("additivity: empty ") +
                                       dataset::false_set_name(fs) +
                                       " false answer set");
  std::vector<TokenSeq> prompts{instance.prompt};
  prompts.insert(prompts.end(), instance.paraphrases.begin(),
                 instance.paraphrases.end());

  AdditivityEval eval;
  eval.false_set = fs;
  eval.mode = mode;
  for (const TokenSeq& prompt : prompts) {
    PromptAdditivity pa = additivity_from_probes(
        probe_all(pre, prompt, instance.correct),
        probe_all(post, prompt, instance.correct),
        probe_all(pre, prompt, false_answers),
        probe_all(post, prompt, false_answers));
    pa.prompt = prompt;
    eval.per_prompt.push_back(std::move(pa));
  }

  if (mode == ThresholdMode::kPerPrompt) {
    const double n = static_cast<double>(eval.per_prompt.size());
    eval.cpc = 0.0;
    eval.fpc = 0.0;
    for (const PromptAdditivity& pa : eval.per_prompt) {
      eval.rff += pa.rff / n;
      eval.rnf += pa.rnf / n;
      eval.cpc += pa.cpc / n;
      eval.fpc += pa.fpc / n;
      eval.aff += pa.aff / n;
      eval.anf += pa.anf / n;
    }
  } else {
    std::vector<AnswerProbe> pre_c, post_c, pre_f, post_f;
    for (const PromptAdditivity& pa : eval.per_prompt) {
      pre_c.insert(pre_c.end(), pa.pre_correct.begin(), pa.pre_correct.end());
      post_c.insert(post_c.end(), pa.post_correct.begin(), pa.post_correct.end());
      pre_f.insert(pre_f.end(), pa.pre_false.begin(), pa.pre_false.end());
      post_f.insert(post_f.end(), pa.post_false.begin(), pa.post_false.end());
    }
    const PromptAdditivity pooled =
        additivity_from_probes(std::move(pre_c), std::move(post_c),
                               std::move(pre_f), std::move(post_f));
    eval.rff = pooled.rff;
    eval.rnf = pooled.rnf;
    eval.cpc = pooled.cpc;
    eval.fpc = pooled.fpc;
    eval.aff = pooled.aff;
    eval.anf = pooled.anf;
  }
  return eval;
}

const AdditivityEval& EditEval::for_set(FalseSet fs) const {
  for (const AdditivityEval& a : additivity)
    if (a.false_set == fs) return a;
  throw Error(ErrorCode::kInput, "edit eval: false set not evaluated");
}

EditEval evaluate_edit(const ModelParams& pre, const ModelParams& post,
                       const PeakInstance& instance,
                       const std::vector<FalseSet>& false_sets,
                       ThresholdMode mode) {
  const auto violations = validate_instance(instance);
  if (!violations.empty())
    throw Error(ErrorCode::kInput,
                "evaluate_edit: invalid instance: " + violations.front());
  EditEval eval;
  eval.es = efficacy(post, instance);
  eval.gs = generalization(post, instance);
  eval.ls = locality(post, instance);
  for (FalseSet fs : false_sets)
    eval.additivity.push_back(additivity_eval(pre, post, instance, fs, mode));
  return eval;
}

ReportRow aggregate_dataset(const std::string& label,
                            const std::vector<EditEval>& evals) {
  if (evals.empty())
    throw Error(ErrorCode::kInput, "aggregate_dataset: no edit evaluations");
  ReportRow row;
  row.label = label;
  row.n_edits = static_cast<int>(evals.size());
  for (const AdditivityEval& a : evals.front().additivity)
    row.false_sets.push_back(a.false_set);
  row.aff.assign(row.false_sets.size(), 0.0);
  row.anf.assign(row.false_sets.size(), 0.0);
  const double n = static_cast<double>(evals.size());
  for (const EditEval& e : evals) {
    row.es += e.es / n;
    row.gs += e.gs / n;
    row.ls += e.ls / n;
    for (std::size_t k = 0; k < row.false_sets.size(); ++k) {
      const AdditivityEval& a = e.for_set(row.false_sets[k]);
      row.aff[k] += a.aff / n;
      row.anf[k] += a.anf / n;
    }
  }
  return row;
}

std::string format_percent(double fraction) {
  const double percent = fraction * 100.0;
  // Round half-to-even at two decimals.
  const double scaled = percent * 100.0;
  double floor_v = std::floor(scaled);
  const double frac = scaled - floor_v;
  double rounded;
  if (frac > 0.5) {
    rounded = floor_v + 1.0;
  } else if (frac < 0.5) {
    rounded = floor_v;
  } else {
    rounded = (std::fmod(floor_v, 2.0) == 0.0) ? floor_v : floor_v + 1.0;
  }
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", rounded / 100.0);
  return buf;
}

std::vector<std::string> report_header(const std::vector<FalseSet>& false_sets) {
  std::vector<std::string> header{"ES", "GS", "LS"};
  for (FalseSet fs : false_sets) {
    const std::string tag = fs == FalseSet::kHard ? "h" : "r";
    header.push_back("AFF(" + tag + ")");
    header.push_back("ANF(" + tag + ")");
  }
  return header;
}

std::vector<std::string> report_cells(const ReportRow& row) {
  std::vector<std::string> cells{format_percent(row.es), format_percent(row.gs),
                                 format_percent(row.ls)};
  for (std::size_t k = 0; k < row.false_sets.size(); ++k) {
    cells.push_back(format_percent(row.aff[k]));
    cells.push_back(format_percent(row.anf[k]));
  }
  return cells;
}

}  // namespace peak::metrics
