#include "peaklab/objective.hpp"

#include <cmath>
#include <map>
#include <utility>

#include "peaklab/error.hpp"

namespace peak::microlm {

namespace {

struct Job {
  TokenSeq prompt;
  TokenSeq answer;             // empty for KL-only jobs
  double logprob = 0.0;        // filled after forward (empty answer: unused)
  ForwardResult fwd;
  Matrix dlogits;              // lazily sized; all-zero until a term pulls
  bool has_grad = false;
};

using JobKey = std::pair<TokenSeq, TokenSeq>;

int job_index(std::map<JobKey, int>& index, std::vector<Job>& jobs,
              const TokenSeq& prompt, const TokenSeq& answer) {
  const auto [it, inserted] =
      index.try_emplace(JobKey{prompt, answer}, static_cast<int>(jobs.size()));
  if (inserted) {
    Job j;
    j.prompt = prompt;
    j.answer = answer;
    jobs.push_back(std::move(j));
  }
  return it->second;
}

// Adds c * d(lp)/d(logits) for the job's answer to its dlogits buffer.
void pull_logprob(Job& job, double c) {
  if (c == 0.0) return;
  const int p = static_cast<int>(job.prompt.size());
  const int a = static_cast<int>(job.answer.size());
  const double per_token = c / static_cast<double>(a);
  const Matrix& probs = job.fwd.probs;
  if (job.dlogits.rows == 0) job.dlogits = Matrix(probs.rows, probs.cols);
  for (int t = 0; t < a; ++t) {
    const int row = p - 1 + t;
    double* dst = job.dlogits.row(row);
    const double* prob = probs.row(row);
    for (int j = 0; j < probs.cols; ++j) dst[j] -= per_token * prob[j];
    dst[job.answer[t]] += per_token;
  }
  job.has_grad = true;
}

// KL(q || r) at one row plus its logit gradient scaled by c.
double kl_row(Job& job, int row, const double* ref, double c, bool want_grad) {
  const Matrix& probs = job.fwd.probs;
  const Matrix& logprobs = job.fwd.trace.logprobs;
  const int v = probs.cols;
  double kl = 0.0;
  for (int j = 0; j < v; ++j)
    kl += probs(row, j) * (logprobs(row, j) - std::log(ref[j]));
  if (want_grad && c != 0.0) {
    if (job.dlogits.rows == 0) job.dlogits = Matrix(probs.rows, probs.cols);
    double* dst = job.dlogits.row(row);
    for (int j = 0; j < v; ++j) {
      const double diff = logprobs(row, j) - std::log(ref[j]);
      dst[j] += c * probs(row, j) * (diff - kl);
    }
    job.has_grad = true;
  }
  return kl;
}

struct Evaluation {
  double value = 0.0;
  std::vector<double> term_values;
  std::vector<Job> jobs;
};

Evaluation evaluate_terms(const ModelParams& params,
                          const std::vector<ObjectiveTerm>& terms,
                          const std::optional<Patch>& patch, bool want_grad) {
  for (std::size_t k = 0; k < terms.size(); ++k) {
    terms[k].validate(params.config.vocab_size);
    if (patch &&
        patch->site.position >= static_cast<int>(terms[k].prompt.size()))
      throw Error(ErrorCode::kInput,
                  "objective term " + std::to_string(k) +
                      ": prompt does not contain the patch position");
  }

  Evaluation ev;
  std::map<JobKey, int> index;
  struct TermJobs {
    int primary = -1;
    int secondary = -1;
  };
  std::vector<TermJobs> tj(terms.size());
  for (std::size_t k = 0; k < terms.size(); ++k) {
    const ObjectiveTerm& term = terms[k];
    if (term.kind == TermKind::kKlAnchor) {
      tj[k].primary = job_index(index, ev.jobs, term.prompt, {});
    } else {
      tj[k].primary = job_index(index, ev.jobs, term.prompt, term.primary);
      if (term.kind == TermKind::kHingePair)
        tj[k].secondary = job_index(index, ev.jobs, term.prompt, term.secondary);
    }
  }

  for (Job& job : ev.jobs) {
    TokenSeq seq = job.prompt;
    seq.insert(seq.end(), job.answer.begin(), job.answer.end());
    job.fwd = forward(params, seq, patch);
    if (!job.answer.empty()) {
      const int p = static_cast<int>(job.prompt.size());
      double sum = 0.0;
      for (std::size_t t = 0; t < job.answer.size(); ++t)
        sum += job.fwd.trace.logprobs(p - 1 + static_cast<int>(t),
                                      job.answer[t]);
      job.logprob = sum / static_cast<double>(job.answer.size());
    }
  }

  ev.term_values.resize(terms.size(), 0.0);
  for (std::size_t k = 0; k < terms.size(); ++k) {
    const ObjectiveTerm& term = terms[k];
    Job& pj = ev.jobs[tj[k].primary];
    double v = 0.0;
    switch (term.kind) {
      case TermKind::kAnswerLogprob: {
        v = -pj.logprob;
        if (want_grad) pull_logprob(pj, -term.weight);
        break;
      }
      case TermKind::kHingePair: {
        Job& sj = ev.jobs[tj[k].secondary];
        const double gap = term.reference - pj.logprob + sj.logprob;
        v = std::max(0.0, gap);
        if (want_grad && gap > 0.0) {
          pull_logprob(pj, -term.weight);
          pull_logprob(sj, term.weight);
        }
        break;
      }
      case TermKind::kFreezeLower: {
        const double gap = term.reference - pj.logprob;
        v = std::max(0.0, gap);
        if (want_grad && gap > 0.0) pull_logprob(pj, -term.weight);
        break;
      }
      case TermKind::kFreezeUpper: {
        const double gap = pj.logprob - term.reference;
        v = std::max(0.0, gap);
        if (want_grad && gap > 0.0) pull_logprob(pj, term.weight);
        break;
      }
      case TermKind::kKlAnchor: {
        const int vocab = params.config.vocab_size;
        if (term.kl_all_positions) {
          for (int row = 0; row < static_cast<int>(term.prompt.size()); ++row)
            v += kl_row(pj, row, term.ref_distribution.data() + row * vocab,
                        term.weight, want_grad);
        } else {
          const int row = static_cast<int>(term.prompt.size()) - 1;
          v = kl_row(pj, row, term.ref_distribution.data(), term.weight,
                     want_grad);
        }
        break;
      }
    }
    if (!std::isfinite(v))
      throw Error(ErrorCode::kNumerical,
                  "objective term " + std::to_string(k) +
                      " produced a non-finite value");
    ev.term_values[k] = v;
    ev.value += term.weight * v;
  }
  return ev;
}

}  // namespace

void ObjectiveTerm::validate(int vocab_size) const {
  if (prompt.empty())
    throw Error(ErrorCode::kInput, "objective term: empty prompt");
  if (weight < 0.0)
    throw Error(ErrorCode::kInput, "objective term: negative weight");
  if (kind == TermKind::kKlAnchor) {
    const std::size_t expected =
        kl_all_positions ? prompt.size() * static_cast<std::size_t>(vocab_size)
                         : static_cast<std::size_t>(vocab_size);
    if (ref_distribution.size() != expected)
      throw Error(ErrorCode::kInput,
                  "objective term: KL reference has wrong size");
    return;
  }
  if (primary.empty())
    throw Error(ErrorCode::kInput, "objective term: empty primary answer");
  if (kind == TermKind::kHingePair && secondary.empty())
    throw Error(ErrorCode::kInput,
                "objective term: hinge pair needs a secondary answer");
  if ((kind == TermKind::kFreezeLower || kind == TermKind::kFreezeUpper) &&
      !std::isfinite(reference))
    throw Error(ErrorCode::kInput,
                "objective term: freeze reference must be finite");
}

ObjectiveResult objective_value_and_grad(const ModelParams& params,
                                         const std::vector<ObjectiveTerm>& terms,
                                         const GradTarget& target) {
  std::optional<Patch> patch;
  const PatchTarget* pt = std::get_if<PatchTarget>(&target);
  const WeightTarget* wt = std::get_if<WeightTarget>(&target);
  if (pt) patch = Patch{pt->site, pt->z};
  if (wt && (wt->layer < 0 || wt->layer >= params.config.n_layers))
    throw Error(ErrorCode::kInput, "objective: weight target layer out of range");

  Evaluation ev = evaluate_terms(params, terms, patch, /*want_grad=*/true);

  ObjectiveResult res;
  res.value = ev.value;
  res.term_values = std::move(ev.term_values);
  if (pt) res.patch_grad.assign(params.config.d_model, 0.0);
  if (wt) res.weight_grad = Matrix(params.config.d_ff, params.config.d_model);

  BackwardOptions opts;
  opts.want_param_grads = wt != nullptr;
  opts.want_patch_grad = pt != nullptr;
  for (Job& job : ev.jobs) {
    if (!job.has_grad) continue;
    const BackwardResult back =
        backward(params, job.fwd.trace, job.dlogits, opts);
    if (pt)
      for (int j = 0; j < params.config.d_model; ++j)
        res.patch_grad[j] += back.patch_grad[j];
    if (wt) {
      const Matrix& g = back.param_grads->layers[wt->layer].w_proj;
      for (std::size_t i = 0; i < g.data.size(); ++i)
        res.weight_grad.data[i] += g.data[i];
    }
  }
  if ((pt && !all_finite(res.patch_grad)) ||
      (wt && !all_finite(res.weight_grad)))
    throw Error(ErrorCode::kNumerical, "objective: non-finite gradient");
  return res;
}

double objective_value(const ModelParams& params,
                       const std::vector<ObjectiveTerm>& terms,
                       const std::optional<Patch>& patch) {
  return evaluate_terms(params, terms, patch, /*want_grad=*/false).value;
}

Vec kl_reference_distribution(const ModelParams& params, const TokenSeq& prompt,
                              bool all_positions) {
  const ForwardResult fr = forward(params, prompt);
  if (all_positions) return fr.probs.data;
  const int row = static_cast<int>(prompt.size()) - 1;
  return Vec(fr.probs.row(row), fr.probs.row(row) + fr.probs.cols);
}

}  // namespace peak::microlm
