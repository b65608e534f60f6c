#include "peaklab/editors.hpp"

#include <algorithm>
#include <cmath>

#include "peaklab/error.hpp"
#include "peaklab/rng.hpp"
#include "peaklab/tensor.hpp"

namespace peak::editors {

using microlm::BackwardOptions;
using microlm::ForwardResult;
using microlm::GradTarget;
using microlm::Patch;
using microlm::PatchSite;
using microlm::PatchTarget;
using microlm::TermKind;
using microlm::WeightTarget;

namespace {

constexpr std::uint64_t kPrefixTag = 0x707266ULL;
constexpr std::uint64_t kCovTag = 0x636f76ULL;

// Mid-MLP activation (after w_fc and the nonlinearity) at `position`.
Vec key_activation(const ModelParams& base, const TokenSeq& seq, int layer,
                   int position) {
  const ForwardResult fr = microlm::forward(base, seq);
  const Matrix& act = fr.trace.layers[layer].fc_act;
  return Vec(act.row(position), act.row(position) + act.cols);
}

std::vector<ObjectiveTerm> editing_terms(const ModelParams& base,
                                         const PeakInstance& instance,
                                         const std::optional<APPConfig>& app,
                                         const ROMEConfig& cfg) {
  std::vector<ObjectiveTerm> terms;
  ObjectiveTerm answer;
  answer.kind = TermKind::kAnswerLogprob;
  answer.prompt = instance.prompt;
  answer.primary = instance.new_answer;
  answer.weight = 1.0;
  terms.push_back(std::move(answer));

  if (cfg.kl_weight != 0.0) {
    if (instance.essence_prompt.empty())
      throw Error(ErrorCode::kInput,
                  "optimize_value: instance has no essence prompt");
    ObjectiveTerm kl;
    kl.kind = TermKind::kKlAnchor;
    kl.prompt = instance.essence_prompt;
    kl.weight = cfg.kl_weight;
    kl.kl_all_positions = cfg.kl_all_positions;
    kl.ref_distribution = microlm::kl_reference_distribution(
        base, instance.essence_prompt, cfg.kl_all_positions);
    terms.push_back(std::move(kl));
  }

  if (app) {
    const auto app_terms = build_app_terms(base, instance, *app, instance.prompt);
    terms.insert(terms.end(), app_terms.begin(), app_terms.end());
  }
  return terms;
}

}  // namespace

void APPConfig::validate() const {
  if (alpha < 0.0 || beta < 0.0 || gamma < 0.0)
    throw Error(ErrorCode::kConfig, "app: alpha, beta, gamma must be >= 0");
  if (!(margin > 0.0))
    throw Error(ErrorCode::kConfig, "app: margin must be > 0");
}

void ROMEConfig::validate(const microlm::ModelConfig& model) const {
  if (layer < 0 || layer >= model.n_layers)
    throw Error(ErrorCode::kConfig, "rome: layer out of range");
  if (n_prefixes < 1)
    throw Error(ErrorCode::kConfig, "rome: n_prefixes must be >= 1");
  if (prefix_len_min < 0 || prefix_len_max < prefix_len_min)
    throw Error(ErrorCode::kConfig, "rome: bad prefix length range");
  if (v_steps < 0) throw Error(ErrorCode::kConfig, "rome: v_steps must be >= 0");
  if (v_rate <= 0.0) throw Error(ErrorCode::kConfig, "rome: v_rate must be > 0");
  if (kl_weight < 0.0)
    throw Error(ErrorCode::kConfig, "rome: kl_weight must be >= 0");
  if (z_norm_clamp_factor && *z_norm_clamp_factor <= 0.0)
    throw Error(ErrorCode::kConfig, "rome: z_norm_clamp_factor must be > 0");
  if (cov_samples < 0)
    throw Error(ErrorCode::kConfig, "rome: cov_samples must be >= 0");
  if (cov_ridge < 0.0)
    throw Error(ErrorCode::kConfig, "rome: cov_ridge must be >= 0");
  if (cov_samples < model.d_ff && cov_ridge <= 0.0)
    throw Error(ErrorCode::kConfig,
                "rome: cov_ridge must be > 0 when cov_samples < d_ff");
}

void FTConfig::validate(const microlm::ModelConfig& model) const {
  if (layer < 0 || layer >= model.n_layers)
    throw Error(ErrorCode::kConfig, "ft: layer out of range");
  if (steps < 1) throw Error(ErrorCode::kConfig, "ft: steps must be >= 1");
  if (rate <= 0.0) throw Error(ErrorCode::kConfig, "ft: rate must be > 0");
  if (!(norm_budget > 0.0))
    throw Error(ErrorCode::kConfig, "ft: norm_budget must be > 0");
}

std::vector<ObjectiveTerm> build_app_terms(const ModelParams& base,
                                           const PeakInstance& instance,
                                           const APPConfig& cfg,
                                           const TokenSeq& prompt) {
  cfg.validate();
  const std::vector<TokenSeq>& correct = instance.correct;
  const std::vector<TokenSeq>& false_answers =
      instance.false_answers(cfg.false_set);
  if (correct.empty())
    throw Error(ErrorCode::kInput, "app: instance has no correct answers");
  if (false_answers.empty())
    throw Error(ErrorCode::kInput,
                std::string("app: empty ") + dataset::false_set_name(cfg.false_set) +
                    " false answer set");

  const int n = static_cast<int>(correct.size());
  const int m = static_cast<int>(false_answers.size());
  std::vector<ObjectiveTerm> terms;

  if (cfg.alpha > 0.0) {
    const double w = cfg.alpha / static_cast<double>(n) / static_cast<double>(m);
    for (const TokenSeq& o : correct) {
      for (const TokenSeq& f : false_answers) {
        ObjectiveTerm t;
        t.kind = TermKind::kHingePair;
        t.prompt = prompt;
        t.primary = o;
        t.secondary = f;
        t.reference = cfg.margin;
        t.weight = w;
        terms.push_back(std::move(t));
      }
    }
  }
  if (cfg.beta > 0.0) {
    const double w = cfg.beta / static_cast<double>(n);
    for (const TokenSeq& o : correct) {
      ObjectiveTerm t;
      t.kind = TermKind::kFreezeLower;
      t.prompt = prompt;
      t.primary = o;
      t.reference = microlm::answer_logprob(base, prompt, o);
      t.weight = w;
      terms.push_back(std::move(t));
    }
  }
  if (cfg.gamma > 0.0) {
    const double w = cfg.gamma / static_cast<double>(m);
    for (const TokenSeq& f : false_answers) {
      ObjectiveTerm t;
      t.kind = TermKind::kFreezeUpper;
      t.prompt = prompt;
      t.primary = f;
      t.reference = microlm::answer_logprob(base, prompt, f);
      t.weight = w;
      terms.push_back(std::move(t));
    }
  }
  return terms;
}

int last_subject_position(const TokenSeq& prompt, const TokenSeq& subject) {
  if (subject.empty() || subject.size() > prompt.size())
    throw Error(ErrorCode::kInput, "subject tokens not found in prompt");
  for (int start = static_cast<int>(prompt.size() - subject.size()); start >= 0;
       --start) {
    bool match = true;
    for (std::size_t k = 0; k < subject.size(); ++k)
      if (prompt[start + static_cast<int>(k)] != subject[k]) {
        match = false;
        break;
      }
    if (match) return start + static_cast<int>(subject.size()) - 1;
  }
  throw Error(ErrorCode::kInput, "subject tokens not found in prompt");
}

Vec compute_key(const ModelParams& base, const PeakInstance& instance,
                const ROMEConfig& cfg) {
  cfg.validate(base.config);
  if (instance.subject_tokens.empty())
    throw Error(ErrorCode::kInput, "compute_key: instance has no subject tokens");
  last_subject_position(instance.prompt, instance.subject_tokens);

  Rng rng(mix_seed(cfg.seed, kPrefixTag));
  const int d_ff = base.config.d_ff;
  Vec k_star(d_ff, 0.0);
  for (int j = 0; j < cfg.n_prefixes; ++j) {
    const int len =
        static_cast<int>(rng.uniform_int(cfg.prefix_len_min, cfg.prefix_len_max));
    TokenSeq seq;
    seq.reserve(len + instance.subject_tokens.size());
    for (int i = 0; i < len; ++i)
      seq.push_back(static_cast<int>(rng.uniform_int(0, base.config.vocab_size - 1)));
    seq.insert(seq.end(), instance.subject_tokens.begin(),
               instance.subject_tokens.end());
    const Vec k = key_activation(base, seq, cfg.layer,
                                 static_cast<int>(seq.size()) - 1);
    for (int i = 0; i < d_ff; ++i) k_star[i] += k[i];
  }
  for (double& v : k_star) v /= static_cast<double>(cfg.n_prefixes);
  return k_star;
}

Matrix estimate_covariance(const ModelParams& base, const ROMEConfig& cfg,
                           const std::vector<TokenSeq>& sample_prompts) {
  cfg.validate(base.config);
  const int d_ff = base.config.d_ff;
  Matrix cov(d_ff, d_ff);

  std::vector<int> chosen;
  const int pool = static_cast<int>(sample_prompts.size());
  const int want = std::min(cfg.cov_samples, pool);
  if (want > 0) {
    Rng rng(mix_seed(cfg.seed, kCovTag));
    std::vector<int> indices(pool);
    for (int i = 0; i < pool; ++i) indices[i] = i;
    for (int i = 0; i < want; ++i) {
      const int j = static_cast<int>(rng.uniform_int(i, pool - 1));
      std::swap(indices[i], indices[j]);
      chosen.push_back(indices[i]);
    }
  }

  for (int idx : chosen) {
    const TokenSeq& prompt = sample_prompts[idx];
    const Vec k = key_activation(base, prompt, cfg.layer,
                                 static_cast<int>(prompt.size()) - 1);
    for (int i = 0; i < d_ff; ++i) {
      const double ki = k[i];
      double* row = cov.row(i);
      for (int j = 0; j < d_ff; ++j) row[j] += ki * k[j];
    }
  }
  if (!chosen.empty()) {
    const double inv = 1.0 / static_cast<double>(chosen.size());
    for (double& v : cov.data) v *= inv;
  }
  for (int i = 0; i < d_ff; ++i) cov(i, i) += cfg.cov_ridge;
  return cov;
}

ValueResult optimize_value(const ModelParams& base, const PeakInstance& instance,
                           const std::optional<APPConfig>& app,
                           const ROMEConfig& cfg) {
  cfg.validate(base.config);
  const int pos = last_subject_position(instance.prompt, instance.subject_tokens);
  const PatchSite site{cfg.layer, pos};

  const ForwardResult clean = microlm::forward(base, instance.prompt);
  const Matrix& mlp_out = clean.trace.layers[cfg.layer].mlp_out;
  Vec z(mlp_out.row(pos), mlp_out.row(pos) + mlp_out.cols);
  const double init_norm = norm2(z);

  const std::vector<ObjectiveTerm> terms = editing_terms(base, instance, app, cfg);

  ValueResult res;
  for (int step = 0; step < cfg.v_steps; ++step) {
    microlm::ObjectiveResult obj;
    try {
      obj = microlm::objective_value_and_grad(base, terms, PatchTarget{site, z});
    } catch (const Error& e) {
      if (e.code() == ErrorCode::kNumerical)
        throw Error(ErrorCode::kNumerical,
                    "optimize_value step " + std::to_string(step) + ": " +
                        e.what());
      throw;
    }
    res.trajectory.push_back(obj.value);
    for (std::size_t i = 0; i < z.size(); ++i)
      z[i] -= cfg.v_rate * obj.patch_grad[i];
    if (cfg.z_norm_clamp_factor) {
      const double limit = *cfg.z_norm_clamp_factor * init_norm;
      const double n = norm2(z);
      if (n > limit && n > 0.0)
        for (double& v : z) v *= limit / n;
    }
  }
  if (!res.trajectory.empty() && res.trajectory.back() > res.trajectory.front())
    res.warnings.push_back("value optimization did not reduce the loss");
  res.v_star = std::move(z);
  return res;
}

Matrix rank_one_update(const Matrix& w, const Vec& k_star, const Vec& v_star,
                       const Matrix& cov) {
  const int n_out = w.rows, n_in = w.cols;
  if (static_cast<int>(k_star.size()) != n_in ||
      static_cast<int>(v_star.size()) != n_out || cov.rows != n_in ||
      cov.cols != n_in)
    throw Error(ErrorCode::kInput, "rank_one_update: inconsistent shapes");

  const CholeskySolver solver(cov);
  const Vec u = solver.solve(k_star);  // C^-1 k*
  const double denom = dot(u.data(), k_star.data(), n_in);
  if (std::abs(denom) < 1e-12)
    throw Error(ErrorCode::kDegeneracy,
                "rank_one_update: (C^-1 k*)^T k* is numerically zero");

  Matrix w_hat = w;
  for (int i = 0; i < n_out; ++i) {
    double residual = v_star[i];
    const double* w_row = w.row(i);
    for (int j = 0; j < n_in; ++j) residual -= w_row[j] * k_star[j];
    const double lambda_i = residual / denom;
    double* out_row = w_hat.row(i);
    for (int j = 0; j < n_in; ++j) out_row[j] += lambda_i * u[j];
  }
  return w_hat;
}

EditOutcome apply_rome(const ModelParams& base, const PeakInstance& instance,
                       const std::optional<APPConfig>& app, const ROMEConfig& cfg,
                       const Matrix& cov) {
  cfg.validate(base.config);
  if (app) app->validate();

  const Vec k_star = compute_key(base, instance, cfg);
  ValueResult vres = optimize_value(base, instance, app, cfg);

  const Matrix w_math = transpose(base.layers[cfg.layer].w_proj);
  const Matrix w_hat = rank_one_update(w_math, k_star, vres.v_star, cov);

  EditOutcome outcome;
  outcome.edited = base;
  outcome.edited.layers[cfg.layer].w_proj = transpose(w_hat);
  outcome.loss_trajectory = std::move(vres.trajectory);
  outcome.steps_taken = cfg.v_steps;
  outcome.warnings = std::move(vres.warnings);

  // ||Lambda||_2 from the realized update: delta W = Lambda (C^-1 k*)^T.
  double lambda_sq = 0.0;
  for (int i = 0; i < w_math.rows; ++i) {
    double residual = vres.v_star[i];
    for (int j = 0; j < w_math.cols; ++j)
      residual -= w_math(i, j) * k_star[j];
    lambda_sq += residual * residual;
  }
  const CholeskySolver solver(cov);
  const Vec u = solver.solve(k_star);
  const double denom = dot(u.data(), k_star.data(), w_math.cols);
  outcome.lambda_norm = std::sqrt(lambda_sq) / std::abs(denom);
  return outcome;
}

EditOutcome apply_rome(const ModelParams& base, const PeakInstance& instance,
                       const std::optional<APPConfig>& app, const ROMEConfig& cfg,
                       const std::vector<TokenSeq>& cov_sample_prompts) {
  return apply_rome(base, instance, app, cfg,
                    estimate_covariance(base, cfg, cov_sample_prompts));
}

EditOutcome apply_ft(const ModelParams& base, const PeakInstance& instance,
                     const std::optional<APPConfig>& app, const FTConfig& cfg) {
  cfg.validate(base.config);
  if (app) app->validate();

  std::vector<ObjectiveTerm> terms;
  ObjectiveTerm answer;
  answer.kind = TermKind::kAnswerLogprob;
  answer.prompt = instance.prompt;
  answer.primary = instance.new_answer;
  answer.weight = 1.0;
  terms.push_back(std::move(answer));
  if (app) {
    const auto app_terms = build_app_terms(base, instance, *app, instance.prompt);
    terms.insert(terms.end(), app_terms.begin(), app_terms.end());
  }

  EditOutcome outcome;
  outcome.edited = base;
  Matrix& w = outcome.edited.layers[cfg.layer].w_proj;
  const Matrix& w0 = base.layers[cfg.layer].w_proj;

  // The edit is tracked as an explicit delta so the projection onto the
  // max-magnitude ball is exact: clamped entries are exactly +-norm_budget.
  Matrix delta(w0.rows, w0.cols);
  for (int step = 0; step < cfg.steps; ++step) {
    microlm::ObjectiveResult obj;
    try {
      obj = microlm::objective_value_and_grad(outcome.edited, terms,
                                              WeightTarget{cfg.layer});
    } catch (const Error& e) {
      if (e.code() == ErrorCode::kNumerical)
        throw Error(ErrorCode::kNumerical,
                    "apply_ft step " + std::to_string(step) + ": " + e.what());
      throw;
    }
    outcome.loss_trajectory.push_back(obj.value);
    for (std::size_t i = 0; i < w.data.size(); ++i) {
      double d = delta.data[i] - cfg.rate * obj.weight_grad.data[i];
      d = std::min(d, cfg.norm_budget);
      d = std::max(d, -cfg.norm_budget);
      delta.data[i] = d;
      w.data[i] = w0.data[i] + d;
    }
  }
  outcome.steps_taken = cfg.steps;
  double max_delta = 0.0;
  for (double d : delta.data) max_delta = std::max(max_delta, std::abs(d));
  outcome.weight_delta_norm = max_delta;
  return outcome;
}

}  // namespace peak::editors
