#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "peaklab/tensor.hpp"

namespace peak::microlm {

using TokenSeq = std::vector<int>;

struct ModelConfig {
  int vocab_size = 512;
  int d_model = 64;
  int n_layers = 4;
  int n_heads = 4;
  int d_ff = 256;
  int max_seq_len = 64;
  std::uint64_t seed = 0;

  int head_dim() const { return d_model / n_heads; }
  void validate() const;  // throws ErrorCode::kConfig
  bool operator==(const ModelConfig&) const = default;
};

// Weights of one pre-norm decoder block. All projections are stored
// input-major (rows = input dim, cols = output dim): y = x @ W.
struct LayerParams {
  Matrix ln1_scale, ln1_shift;  // 1 x d_model
  Matrix w_q, w_k, w_v, w_o;    // d_model x d_model
  Matrix ln2_scale, ln2_shift;  // 1 x d_model
  Matrix w_fc;                  // d_model x d_ff
  Matrix w_proj;                // d_ff x d_model
};

// Immutable snapshot of all model weights. Editors copy a snapshot and
// return a new one; nothing in the library mutates a shared snapshot.
struct ModelParams {
  ModelConfig config;
  Matrix tok_emb;  // vocab_size x d_model, doubles as the tied output head
  Matrix pos_emb;  // max_seq_len x d_model
  std::vector<LayerParams> layers;
  Matrix lnf_scale, lnf_shift;  // 1 x d_model
};

struct PatchSite {
  int layer = 0;
  int position = 0;
  bool operator==(const PatchSite&) const = default;
};

// Substitutes z for the MLP output at (layer, position) during a forward pass.
struct Patch {
  PatchSite site;
  Vec z;  // d_model
};

struct LayerTrace {
  Matrix x_in;                 // T x d_model, residual stream entering block
  Vec ln1_mean, ln1_rstd;
  Matrix ln1_out;
  Matrix q, k, v;              // T x d_model
  std::vector<Matrix> att;     // per head: T x T causal softmax weights
  Matrix att_mix;              // T x d_model, heads merged, before w_o
  Matrix att_out;              // T x d_model
  Matrix x_mid;                // x_in + att_out
  Vec ln2_mean, ln2_rstd;
  Matrix ln2_out;              // MLP input
  Matrix fc_pre;               // T x d_ff
  Matrix fc_act;               // T x d_ff, gelu(fc_pre); the key activations
  Matrix mlp_out;              // T x d_model, after any patch substitution
  Vec mlp_out_raw;             // original MLP output row at a patched position
};

struct HiddenTrace {
  TokenSeq tokens;
  std::optional<Patch> patch;
  std::vector<LayerTrace> layers;
  Matrix x_final;              // T x d_model, stream entering the final norm
  Vec lnf_mean, lnf_rstd;
  Matrix lnf_out;
  Matrix logits;               // T x vocab
  Matrix logprobs;             // T x vocab, log-softmax rows
};

struct ForwardResult {
  Matrix probs;  // T x vocab, next-token distribution per position
  HiddenTrace trace;
};

// Gradients with respect to every weight tensor; shapes mirror ModelParams.
struct ParamGrads {
  Matrix tok_emb, pos_emb;
  std::vector<LayerParams> layers;
  Matrix lnf_scale, lnf_shift;
};

ModelParams init_model(const ModelConfig& config);

ForwardResult forward(const ModelParams& params, const TokenSeq& tokens,
                      const std::optional<Patch>& patch = std::nullopt);

// Length-normalized answer log-probability:
// (1/|answer|) * sum_t log P(answer_t | prompt, answer_<t). Always <= 0.
double answer_logprob(const ModelParams& params, const TokenSeq& prompt,
                      const TokenSeq& answer,
                      const std::optional<Patch>& patch = std::nullopt);

double answer_probability(const ModelParams& params, const TokenSeq& prompt,
                          const TokenSeq& answer,
                          const std::optional<Patch>& patch = std::nullopt);

struct BackwardOptions {
  bool want_param_grads = true;
  bool want_patch_grad = false;  // requires trace.patch
};

struct BackwardResult {
  std::optional<ParamGrads> param_grads;
  Vec patch_grad;  // d_model, valid when want_patch_grad
};

// Exact reverse-mode pass. dlogits is the gradient of the scalar objective
// with respect to trace.logits. A patched position receives gradient only
// through z; its original MLP branch is disconnected.
BackwardResult backward(const ModelParams& params, const HiddenTrace& trace,
                        const Matrix& dlogits, const BackwardOptions& opts);

ParamGrads zero_grads(const ModelParams& params);

// Enumerates every weight tensor in a fixed order shared by serialization,
// checksums and the optimizer.
template <typename P, typename Fn>
void for_each_tensor(P& params, Fn&& fn) {
  fn("tok_emb", params.tok_emb);
  fn("pos_emb", params.pos_emb);
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    auto& lp = params.layers[l];
    const std::string prefix = "layer" + std::to_string(l) + ".";
    fn(prefix + "ln1_scale", lp.ln1_scale);
    fn(prefix + "ln1_shift", lp.ln1_shift);
    fn(prefix + "w_q", lp.w_q);
    fn(prefix + "w_k", lp.w_k);
    fn(prefix + "w_v", lp.w_v);
    fn(prefix + "w_o", lp.w_o);
    fn(prefix + "ln2_scale", lp.ln2_scale);
    fn(prefix + "ln2_shift", lp.ln2_shift);
    fn(prefix + "w_fc", lp.w_fc);
    fn(prefix + "w_proj", lp.w_proj);
  }
  fn("lnf_scale", params.lnf_scale);
  fn("lnf_shift", params.lnf_shift);
}

std::uint64_t params_checksum(const ModelParams& params);

void save_model(const ModelParams& params, const std::string& path);
ModelParams load_model(const std::string& path);

double gelu(double x);
double gelu_grad(double x);

}  // namespace peak::microlm
