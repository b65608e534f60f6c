#include "peaklab/train.hpp"

#include <cmath>
#include <string>

#include "peaklab/error.hpp"
#include "peaklab/rng.hpp"

namespace peak::microlm {

namespace {

struct TensorRefs {
  std::vector<Matrix*> tensors;
};

TensorRefs collect(ModelParams& p) {
  TensorRefs r;
  for_each_tensor(p, [&r](const std::string&, Matrix& m) { r.tensors.push_back(&m); });
  return r;
}

TensorRefs collect(ParamGrads& g) {
  TensorRefs r;
  for_each_tensor(g, [&r](const std::string&, Matrix& m) { r.tensors.push_back(&m); });
  return r;
}

// Accumulates cross-entropy loss and gradients for one sequence. Every
// position predicts its successor; contributions are scaled by inv_tokens.
double sequence_ce_backward(const ModelParams& params, const TokenSeq& seq,
                            double inv_tokens, ParamGrads* grads) {
  const ForwardResult fr = forward(params, seq);
  const int t = static_cast<int>(seq.size());
  double loss = 0.0;
  Matrix dlogits;
  if (grads) dlogits = Matrix(t, params.config.vocab_size);
  for (int i = 0; i + 1 < t; ++i) {
    const int target = seq[i + 1];
    loss -= fr.trace.logprobs(i, target) * inv_tokens;
    if (grads) {
      double* row = dlogits.row(i);
      const double* prob = fr.probs.row(i);
      for (int j = 0; j < params.config.vocab_size; ++j)
        row[j] = prob[j] * inv_tokens;
      row[target] -= inv_tokens;
    }
  }
  if (grads) {
    BackwardResult br = backward(params, fr.trace, dlogits,
                                 BackwardOptions{/*want_param_grads=*/true});
    TensorRefs dst = collect(*grads);
    TensorRefs src = collect(*br.param_grads);
    for (std::size_t k = 0; k < dst.tensors.size(); ++k) {
      const Matrix& s = *src.tensors[k];
      Matrix& d = *dst.tensors[k];
      for (std::size_t i = 0; i < d.data.size(); ++i) d.data[i] += s.data[i];
    }
  }
  return loss;
}

}  // namespace

void TrainConfig::validate() const {
  if (steps < 0) throw Error(ErrorCode::kConfig, "train: steps must be >= 0");
  if (batch_size < 1)
    throw Error(ErrorCode::kConfig, "train: batch_size must be >= 1");
  if (learning_rate <= 0.0)
    throw Error(ErrorCode::kConfig, "train: learning_rate must be > 0");
  if (warmup_steps < 0)
    throw Error(ErrorCode::kConfig, "train: warmup_steps must be >= 0");
  if (beta2 <= 0.0 || beta2 >= 1.0)
    throw Error(ErrorCode::kConfig, "train: beta2 must lie in (0, 1)");
}

double corpus_cross_entropy(const ModelParams& params,
                            const std::vector<TokenSeq>& corpus) {
  double total = 0.0;
  long n_tokens = 0;
  for (const TokenSeq& seq : corpus) {
    const ForwardResult fr = forward(params, seq);
    for (int i = 0; i + 1 < static_cast<int>(seq.size()); ++i) {
      total -= fr.trace.logprobs(i, seq[i + 1]);
      ++n_tokens;
    }
  }
  if (n_tokens == 0)
    throw Error(ErrorCode::kInput, "corpus has no predictable tokens");
  return total / static_cast<double>(n_tokens);
}

TrainResult train(const ModelParams& params, const std::vector<TokenSeq>& corpus,
                  const TrainConfig& cfg) {
  cfg.validate();
  if (corpus.empty()) throw Error(ErrorCode::kInput, "train: empty corpus");
  for (const TokenSeq& seq : corpus)
    if (seq.size() < 2)
      throw Error(ErrorCode::kInput,
                  "train: corpus sequences need at least two tokens");

  TrainResult res;
  res.params = params;
  if (cfg.steps == 0) return res;

  res.initial_corpus_ce = corpus_cross_entropy(params, corpus);

  ParamGrads grads = zero_grads(params);
  ParamGrads second_moment = zero_grads(params);
  TensorRefs w = collect(res.params);
  TensorRefs g = collect(grads);
  TensorRefs v = collect(second_moment);

  Rng rng(mix_seed(cfg.seed, 0x747261696eULL));
  const int n = static_cast<int>(corpus.size());

  for (int step = 1; step <= cfg.steps; ++step) {
    for (Matrix* m : g.tensors) m->zero();

    std::vector<int> batch(cfg.batch_size);
    long batch_tokens = 0;
    for (int& idx : batch) {
      idx = static_cast<int>(rng.uniform_int(0, n - 1));
      batch_tokens += static_cast<long>(corpus[idx].size()) - 1;
    }
    const double inv_tokens = 1.0 / static_cast<double>(batch_tokens);

    double loss = 0.0;
    for (int idx : batch)
      loss += sequence_ce_backward(res.params, corpus[idx], inv_tokens, &grads);
    if (!std::isfinite(loss))
      throw Error(ErrorCode::kTraining,
                  "training diverged at step " + std::to_string(step));
    res.loss_history.push_back(loss);

    const double lr =
        cfg.warmup_steps > 0
            ? cfg.learning_rate *
                  std::min(1.0, static_cast<double>(step) / cfg.warmup_steps)
            : cfg.learning_rate;
    const double correction = 1.0 - std::pow(cfg.beta2, step);
    for (std::size_t k = 0; k < w.tensors.size(); ++k) {
      Matrix& weights = *w.tensors[k];
      Matrix& grad = *g.tensors[k];
      Matrix& moment = *v.tensors[k];
      for (std::size_t i = 0; i < weights.data.size(); ++i) {
        const double gi = grad.data[i];
        moment.data[i] = cfg.beta2 * moment.data[i] + (1.0 - cfg.beta2) * gi * gi;
        const double vhat = moment.data[i] / correction;
        weights.data[i] -= lr * gi / (std::sqrt(vhat) + cfg.eps);
      }
    }
  }

  res.final_corpus_ce = corpus_cross_entropy(res.params, corpus);
  return res;
}

}  // namespace peak::microlm
