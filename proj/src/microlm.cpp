#include "peaklab/microlm.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "peaklab/error.hpp"
#include "peaklab/rng.hpp"

namespace peak::microlm {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

// Per-row layer norm; records mean and reciprocal std for the backward pass.
void layer_norm(const Matrix& x, const Matrix& scale, const Matrix& shift,
                Matrix& out, Vec& means, Vec& rstds) {
  const int t = x.rows, d = x.cols;
  if (!out.same_shape(x)) out = Matrix(t, d);
  means.resize(t);
  rstds.resize(t);
  for (int i = 0; i < t; ++i) {
    const double* row = x.row(i);
    double mean = 0.0;
    for (int j = 0; j < d; ++j) mean += row[j];
    mean /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      const double c = row[j] - mean;
      var += c * c;
    }
    var /= d;
    const double rstd = 1.0 / std::sqrt(var + 1e-5);
    means[i] = mean;
    rstds[i] = rstd;
    double* out_row = out.row(i);
    for (int j = 0; j < d; ++j)
      out_row[j] = (row[j] - mean) * rstd * scale(0, j) + shift(0, j);
  }
}

// dx += backward of layer_norm given dy; accumulates scale/shift grads.
void layer_norm_backward(const Matrix& dy, const Matrix& x, const Matrix& scale,
                         const Vec& means, const Vec& rstds, Matrix& dx,
                         Matrix* dscale, Matrix* dshift) {
  const int t = x.rows, d = x.cols;
  for (int i = 0; i < t; ++i) {
    const double* x_row = x.row(i);
    const double* dy_row = dy.row(i);
    double* dx_row = dx.row(i);
    const double mean = means[i], rstd = rstds[i];
    double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
    for (int j = 0; j < d; ++j) {
      const double xhat = (x_row[j] - mean) * rstd;
      const double dxhat = dy_row[j] * scale(0, j);
      sum_dxhat += dxhat;
      sum_dxhat_xhat += dxhat * xhat;
      if (dscale) (*dscale)(0, j) += dy_row[j] * xhat;
      if (dshift) (*dshift)(0, j) += dy_row[j];
    }
    const double inv_d = 1.0 / d;
    for (int j = 0; j < d; ++j) {
      const double xhat = (x_row[j] - mean) * rstd;
      const double dxhat = dy_row[j] * scale(0, j);
      dx_row[j] += rstd * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat);
    }
  }
}

void check_tokens(const ModelConfig& cfg, const TokenSeq& tokens) {
  if (tokens.empty())
    throw Error(ErrorCode::kInput, "forward: empty token sequence");
  if (static_cast<int>(tokens.size()) > cfg.max_seq_len)
    throw Error(ErrorCode::kInput,
                "forward: sequence length " + std::to_string(tokens.size()) +
                    " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
  for (int tok : tokens)
    if (tok < 0 || tok >= cfg.vocab_size)
      throw Error(ErrorCode::kInput,
                  "forward: token id " + std::to_string(tok) +
                      " outside vocabulary of size " +
                      std::to_string(cfg.vocab_size));
}

Matrix gaussian_matrix(Rng& rng, int rows, int cols, double stddev) {
  Matrix m(rows, cols);
  for (double& v : m.data) v = rng.gauss() * stddev;
  return m;
}

Matrix const_row(int n, double value) {
  Matrix m(1, n);
  for (double& v : m.data) v = value;
  return m;
}

void write_u64(std::ofstream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint64_t read_u64(std::ifstream& in) {
  std::uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!in) throw Error(ErrorCode::kCorruption, "model file truncated");
  return v;
}

constexpr std::uint64_t kModelMagic = 0x504b4c4d30303031ULL;  // "PKLM0001"

}  // namespace

void ModelConfig::validate() const {
  if (vocab_size < 1 || d_model < 1 || n_layers < 1 || n_heads < 1 ||
      d_ff < 1 || max_seq_len < 1)
    throw Error(ErrorCode::kConfig, "model config: all dimensions must be >= 1");
  if (d_model % n_heads != 0)
    throw Error(ErrorCode::kConfig,
                "model config: d_model " + std::to_string(d_model) +
                    " not divisible by n_heads " + std::to_string(n_heads));
}

ModelParams init_model(const ModelConfig& config) {
  config.validate();
  ModelParams p;
  p.config = config;
  Rng rng(mix_seed(config.seed, 0x6d6f64656cULL));
  const double std_base = 0.02;
  // Residual-branch projections are scaled down with depth, GPT-2 style.
  const double std_resid = std_base / std::sqrt(2.0 * config.n_layers);
  p.tok_emb = gaussian_matrix(rng, config.vocab_size, config.d_model, std_base);
  p.pos_emb = gaussian_matrix(rng, config.max_seq_len, config.d_model, 0.01);
  p.layers.resize(config.n_layers);
  for (auto& lp : p.layers) {
    lp.ln1_scale = const_row(config.d_model, 1.0);
    lp.ln1_shift = const_row(config.d_model, 0.0);
    lp.w_q = gaussian_matrix(rng, config.d_model, config.d_model, std_base);
    lp.w_k = gaussian_matrix(rng, config.d_model, config.d_model, std_base);
    lp.w_v = gaussian_matrix(rng, config.d_model, config.d_model, std_base);
    lp.w_o = gaussian_matrix(rng, config.d_model, config.d_model, std_resid);
    lp.ln2_scale = const_row(config.d_model, 1.0);
    lp.ln2_shift = const_row(config.d_model, 0.0);
    lp.w_fc = gaussian_matrix(rng, config.d_model, config.d_ff, std_base);
    lp.w_proj = gaussian_matrix(rng, config.d_ff, config.d_model, std_resid);
  }
  p.lnf_scale = const_row(config.d_model, 1.0);
  p.lnf_shift = const_row(config.d_model, 0.0);
  return p;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
  const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
  return cdf + x * pdf;
}

ForwardResult forward(const ModelParams& params, const TokenSeq& tokens,
                      const std::optional<Patch>& patch) {
  const ModelConfig& cfg = params.config;
  check_tokens(cfg, tokens);
  const int t = static_cast<int>(tokens.size());
  const int d = cfg.d_model;
  const int hd = cfg.head_dim();
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(hd));

  if (patch) {
    if (patch->site.layer < 0 || patch->site.layer >= cfg.n_layers)
      throw Error(ErrorCode::kInput, "patch: layer out of range");
    if (patch->site.position < 0 || patch->site.position >= t)
      throw Error(ErrorCode::kInput, "patch: position out of range");
    if (static_cast<int>(patch->z.size()) != d)
      throw Error(ErrorCode::kInput, "patch: z has wrong dimension");
  }

  ForwardResult res;
  HiddenTrace& tr = res.trace;
  tr.tokens = tokens;
  tr.patch = patch;
  tr.layers.resize(cfg.n_layers);

  Matrix x(t, d);
  for (int i = 0; i < t; ++i) {
    const double* emb = params.tok_emb.row(tokens[i]);
    const double* pos = params.pos_emb.row(i);
    double* row = x.row(i);
    for (int j = 0; j < d; ++j) row[j] = emb[j] + pos[j];
  }

  for (int l = 0; l < cfg.n_layers; ++l) {
    const LayerParams& lp = params.layers[l];
    LayerTrace& lt = tr.layers[l];
    lt.x_in = x;

    layer_norm(lt.x_in, lp.ln1_scale, lp.ln1_shift, lt.ln1_out, lt.ln1_mean,
               lt.ln1_rstd);
    matmul(lt.ln1_out, lp.w_q, lt.q);
    matmul(lt.ln1_out, lp.w_k, lt.k);
    matmul(lt.ln1_out, lp.w_v, lt.v);

    lt.att.assign(cfg.n_heads, Matrix(t, t));
    lt.att_mix = Matrix(t, d);
    for (int h = 0; h < cfg.n_heads; ++h) {
      Matrix& att = lt.att[h];
      const int off = h * hd;
      for (int i = 0; i < t; ++i) {
        // causal scores for queries at position i
        double max_s = -1e300;
        for (int j = 0; j <= i; ++j) {
          const double s =
              dot(lt.q.row(i) + off, lt.k.row(j) + off, hd) * att_scale;
          att(i, j) = s;
          max_s = std::max(max_s, s);
        }
        double denom = 0.0;
        for (int j = 0; j <= i; ++j) {
          const double e = std::exp(att(i, j) - max_s);
          att(i, j) = e;
          denom += e;
        }
        const double inv = 1.0 / denom;
        double* mix = lt.att_mix.row(i) + off;
        for (int j = 0; j <= i; ++j) {
          att(i, j) *= inv;
          const double w = att(i, j);
          const double* v_row = lt.v.row(j) + off;
          for (int c = 0; c < hd; ++c) mix[c] += w * v_row[c];
        }
      }
    }
    matmul(lt.att_mix, lp.w_o, lt.att_out);

    lt.x_mid = Matrix(t, d);
    for (std::size_t i = 0; i < lt.x_mid.data.size(); ++i)
      lt.x_mid.data[i] = lt.x_in.data[i] + lt.att_out.data[i];

    layer_norm(lt.x_mid, lp.ln2_scale, lp.ln2_shift, lt.ln2_out, lt.ln2_mean,
               lt.ln2_rstd);
    matmul(lt.ln2_out, lp.w_fc, lt.fc_pre);
    lt.fc_act = Matrix(t, cfg.d_ff);
    for (std::size_t i = 0; i < lt.fc_pre.data.size(); ++i)
      lt.fc_act.data[i] = gelu(lt.fc_pre.data[i]);
    matmul(lt.fc_act, lp.w_proj, lt.mlp_out);

    if (patch && patch->site.layer == l) {
      const int pos = patch->site.position;
      lt.mlp_out_raw.assign(lt.mlp_out.row(pos), lt.mlp_out.row(pos) + d);
      std::copy(patch->z.begin(), patch->z.end(), lt.mlp_out.row(pos));
    }

    for (std::size_t i = 0; i < x.data.size(); ++i)
      x.data[i] = lt.x_mid.data[i] + lt.mlp_out.data[i];
  }

  tr.x_final = x;
  layer_norm(tr.x_final, params.lnf_scale, params.lnf_shift, tr.lnf_out,
             tr.lnf_mean, tr.lnf_rstd);
  matmul_nt(tr.lnf_out, params.tok_emb, tr.logits);

  tr.logprobs = Matrix(t, cfg.vocab_size);
  res.probs = Matrix(t, cfg.vocab_size);
  for (int i = 0; i < t; ++i) {
    const double* lrow = tr.logits.row(i);
    double max_l = -1e300;
    for (int j = 0; j < cfg.vocab_size; ++j) max_l = std::max(max_l, lrow[j]);
    double denom = 0.0;
    for (int j = 0; j < cfg.vocab_size; ++j) denom += std::exp(lrow[j] - max_l);
    const double lse = max_l + std::log(denom);
    double* lp_row = tr.logprobs.row(i);
    double* p_row = res.probs.row(i);
    for (int j = 0; j < cfg.vocab_size; ++j) {
      lp_row[j] = lrow[j] - lse;
      p_row[j] = std::exp(lp_row[j]);
    }
  }
  return res;
}

double answer_logprob(const ModelParams& params, const TokenSeq& prompt,
                      const TokenSeq& answer, const std::optional<Patch>& patch) {
  if (answer.empty())
    throw Error(ErrorCode::kInput, "answer_logprob: empty answer");
  if (prompt.empty())
    throw Error(ErrorCode::kInput, "answer_logprob: empty prompt");
  if (patch && patch->site.position >= static_cast<int>(prompt.size()))
    throw Error(ErrorCode::kInput,
                "answer_logprob: patch position outside prompt");
  TokenSeq seq = prompt;
  seq.insert(seq.end(), answer.begin(), answer.end());
  const ForwardResult fr = forward(params, seq, patch);
  const int p = static_cast<int>(prompt.size());
  double sum = 0.0;
  for (std::size_t a = 0; a < answer.size(); ++a)
    sum += fr.trace.logprobs(p - 1 + static_cast<int>(a), answer[a]);
  return sum / static_cast<double>(answer.size());
}

double answer_probability(const ModelParams& params, const TokenSeq& prompt,
                          const TokenSeq& answer,
                          const std::optional<Patch>& patch) {
  return std::exp(answer_logprob(params, prompt, answer, patch));
}

ParamGrads zero_grads(const ModelParams& params) {
  const ModelConfig& cfg = params.config;
  ParamGrads g;
  g.tok_emb = Matrix(cfg.vocab_size, cfg.d_model);
  g.pos_emb = Matrix(cfg.max_seq_len, cfg.d_model);
  g.layers.resize(cfg.n_layers);
  for (auto& lp : g.layers) {
    lp.ln1_scale = Matrix(1, cfg.d_model);
    lp.ln1_shift = Matrix(1, cfg.d_model);
    lp.w_q = Matrix(cfg.d_model, cfg.d_model);
    lp.w_k = Matrix(cfg.d_model, cfg.d_model);
    lp.w_v = Matrix(cfg.d_model, cfg.d_model);
    lp.w_o = Matrix(cfg.d_model, cfg.d_model);
    lp.ln2_scale = Matrix(1, cfg.d_model);
    lp.ln2_shift = Matrix(1, cfg.d_model);
    lp.w_fc = Matrix(cfg.d_model, cfg.d_ff);
    lp.w_proj = Matrix(cfg.d_ff, cfg.d_model);
  }
  g.lnf_scale = Matrix(1, cfg.d_model);
  g.lnf_shift = Matrix(1, cfg.d_model);
  return g;
}

BackwardResult backward(const ModelParams& params, const HiddenTrace& trace,
                        const Matrix& dlogits, const BackwardOptions& opts) {
  const ModelConfig& cfg = params.config;
  const int t = static_cast<int>(trace.tokens.size());
  const int d = cfg.d_model;
  const int hd = cfg.head_dim();
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(hd));

  BackwardResult res;
  if (opts.want_param_grads) res.param_grads = zero_grads(params);
  if (opts.want_patch_grad) {
    if (!trace.patch)
      throw Error(ErrorCode::kInput, "backward: trace carries no patch");
    res.patch_grad.assign(d, 0.0);
  }
  ParamGrads* pg = opts.want_param_grads ? &*res.param_grads : nullptr;

  // logits = lnf_out @ tok_emb^T
  Matrix dlnf_out;
  matmul(dlogits, params.tok_emb, dlnf_out);
  if (pg) matmul_tn_acc(dlogits, trace.lnf_out, pg->tok_emb);

  Matrix dx(t, d);
  layer_norm_backward(dlnf_out, trace.x_final, params.lnf_scale, trace.lnf_mean,
                      trace.lnf_rstd, dx, pg ? &pg->lnf_scale : nullptr,
                      pg ? &pg->lnf_shift : nullptr);

  Matrix dmlp_out(t, d), dfc_act, dfc_pre, dln2_out, dx_mid(t, d);
  Matrix datt_mix(t, d), dq(t, d), dk(t, d), dv(t, d), dln1_out(t, d);

  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    const LayerParams& lp = params.layers[l];
    const LayerTrace& lt = trace.layers[l];
    const bool patched_here = trace.patch && trace.patch->site.layer == l;

    // x_out = x_mid + mlp_out
    dmlp_out = dx;
    dx_mid = dx;
    if (patched_here) {
      const int pos = trace.patch->site.position;
      if (opts.want_patch_grad)
        for (int j = 0; j < d; ++j) res.patch_grad[j] += dmlp_out(pos, j);
      // The substituted row does not backpropagate into the MLP branch.
      for (int j = 0; j < d; ++j) dmlp_out(pos, j) = 0.0;
    }

    // mlp_out = fc_act @ w_proj
    matmul_nt(dmlp_out, lp.w_proj, dfc_act);
    if (pg) matmul_tn_acc(lt.fc_act, dmlp_out, pg->layers[l].w_proj);

    if (!dfc_pre.same_shape(dfc_act)) dfc_pre = Matrix(t, cfg.d_ff);
    for (std::size_t i = 0; i < dfc_act.data.size(); ++i)
      dfc_pre.data[i] = dfc_act.data[i] * gelu_grad(lt.fc_pre.data[i]);

    // fc_pre = ln2_out @ w_fc
    matmul_nt(dfc_pre, lp.w_fc, dln2_out);
    if (pg) matmul_tn_acc(lt.ln2_out, dfc_pre, pg->layers[l].w_fc);

    layer_norm_backward(dln2_out, lt.x_mid, lp.ln2_scale, lt.ln2_mean,
                        lt.ln2_rstd, dx_mid,
                        pg ? &pg->layers[l].ln2_scale : nullptr,
                        pg ? &pg->layers[l].ln2_shift : nullptr);

    // x_mid = x_in + att_out
    matmul_nt(dx_mid, lp.w_o, datt_mix);
    if (pg) matmul_tn_acc(lt.att_mix, dx_mid, pg->layers[l].w_o);

    dq.zero();
    dk.zero();
    dv.zero();
    for (int h = 0; h < cfg.n_heads; ++h) {
      const Matrix& att = lt.att[h];
      const int off = h * hd;
      for (int i = 0; i < t; ++i) {
        const double* dmix = datt_mix.row(i) + off;
        // datt(i,j) = dmix . v_j ; dv_j += att(i,j) * dmix
        double row_dot = 0.0;  // sum_k att(i,k) * datt(i,k)
        Vec datt_row(i + 1);
        for (int j = 0; j <= i; ++j) {
          const double da = dot(dmix, lt.v.row(j) + off, hd);
          datt_row[j] = da;
          row_dot += att(i, j) * da;
          const double w = att(i, j);
          double* dv_row = dv.row(j) + off;
          for (int c = 0; c < hd; ++c) dv_row[c] += w * dmix[c];
        }
        // softmax backward then score backward
        for (int j = 0; j <= i; ++j) {
          const double dscore = att(i, j) * (datt_row[j] - row_dot) * att_scale;
          const double* k_row = lt.k.row(j) + off;
          const double* q_row = lt.q.row(i) + off;
          double* dq_row = dq.row(i) + off;
          double* dk_row = dk.row(j) + off;
          for (int c = 0; c < hd; ++c) {
            dq_row[c] += dscore * k_row[c];
            dk_row[c] += dscore * q_row[c];
          }
        }
      }
    }

    // q/k/v = ln1_out @ w_{q,k,v}
    matmul_nt(dq, lp.w_q, dln1_out);
    Matrix tmp;
    matmul_nt(dk, lp.w_k, tmp);
    for (std::size_t i = 0; i < dln1_out.data.size(); ++i)
      dln1_out.data[i] += tmp.data[i];
    matmul_nt(dv, lp.w_v, tmp);
    for (std::size_t i = 0; i < dln1_out.data.size(); ++i)
      dln1_out.data[i] += tmp.data[i];
    if (pg) {
      matmul_tn_acc(lt.ln1_out, dq, pg->layers[l].w_q);
      matmul_tn_acc(lt.ln1_out, dk, pg->layers[l].w_k);
      matmul_tn_acc(lt.ln1_out, dv, pg->layers[l].w_v);
    }

    dx = dx_mid;
    layer_norm_backward(dln1_out, lt.x_in, lp.ln1_scale, lt.ln1_mean,
                        lt.ln1_rstd, dx,
                        pg ? &pg->layers[l].ln1_scale : nullptr,
                        pg ? &pg->layers[l].ln1_shift : nullptr);
  }

  if (pg) {
    for (int i = 0; i < t; ++i) {
      const double* dx_row = dx.row(i);
      double* emb_row = pg->tok_emb.row(trace.tokens[i]);
      double* pos_row = pg->pos_emb.row(i);
      for (int j = 0; j < d; ++j) {
        emb_row[j] += dx_row[j];
        pos_row[j] += dx_row[j];
      }
    }
  }
  return res;
}

std::uint64_t params_checksum(const ModelParams& params) {
  std::uint64_t h = kFnvBasis;
  const ModelConfig& c = params.config;
  const std::uint64_t head[7] = {
      static_cast<std::uint64_t>(c.vocab_size),
      static_cast<std::uint64_t>(c.d_model),
      static_cast<std::uint64_t>(c.n_layers),
      static_cast<std::uint64_t>(c.n_heads),
      static_cast<std::uint64_t>(c.d_ff),
      static_cast<std::uint64_t>(c.max_seq_len),
      c.seed};
  h = fnv1a(head, sizeof(head), h);
  for_each_tensor(params, [&h](const std::string&, const Matrix& m) {
    h = fnv1a(m.data.data(), m.data.size() * sizeof(double), h);
  });
  return h;
}

void save_model(const ModelParams& params, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot open for write: " + path);
  write_u64(out, kModelMagic);
  const ModelConfig& c = params.config;
  for (std::uint64_t v :
       {static_cast<std::uint64_t>(c.vocab_size),
        static_cast<std::uint64_t>(c.d_model),
        static_cast<std::uint64_t>(c.n_layers),
        static_cast<std::uint64_t>(c.n_heads),
        static_cast<std::uint64_t>(c.d_ff),
        static_cast<std::uint64_t>(c.max_seq_len), c.seed})
    write_u64(out, v);
  std::uint64_t n_tensors = 0;
  for_each_tensor(params, [&n_tensors](const std::string&, const Matrix&) {
    ++n_tensors;
  });
  write_u64(out, n_tensors);
  for_each_tensor(params, [&out](const std::string& name, const Matrix& m) {
    write_u64(out, name.size());
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u64(out, static_cast<std::uint64_t>(m.rows));
    write_u64(out, static_cast<std::uint64_t>(m.cols));
    out.write(reinterpret_cast<const char*>(m.data.data()),
              static_cast<std::streamsize>(m.data.size() * sizeof(double)));
  });
  write_u64(out, params_checksum(params));
  if (!out) throw Error(ErrorCode::kIo, "write failed: " + path);
}

ModelParams load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open for read: " + path);
  if (read_u64(in) != kModelMagic)
    throw Error(ErrorCode::kCorruption, "not a model file: " + path);
  ModelConfig c;
  c.vocab_size = static_cast<int>(read_u64(in));
  c.d_model = static_cast<int>(read_u64(in));
  c.n_layers = static_cast<int>(read_u64(in));
  c.n_heads = static_cast<int>(read_u64(in));
  c.d_ff = static_cast<int>(read_u64(in));
  c.max_seq_len = static_cast<int>(read_u64(in));
  c.seed = read_u64(in);
  c.validate();

  ModelParams p = init_model(c);  // allocates correct shapes
  const std::uint64_t n_tensors = read_u64(in);
  std::uint64_t expected = 0;
  for_each_tensor(p, [&expected](const std::string&, const Matrix&) {
    ++expected;
  });
  if (n_tensors != expected)
    throw Error(ErrorCode::kValidation,
                "model file declares " + std::to_string(n_tensors) +
                    " tensors, config implies " + std::to_string(expected));
  for_each_tensor(p, [&in, &path](const std::string& name, Matrix& m) {
    const std::uint64_t name_len = read_u64(in);
    std::string stored(name_len, '\0');
    in.read(stored.data(), static_cast<std::streamsize>(name_len));
    if (!in) throw Error(ErrorCode::kCorruption, "model file truncated");
    if (stored != name)
      throw Error(ErrorCode::kValidation,
                  "model file tensor order mismatch: expected " + name +
                      ", found " + stored + " in " + path);
    const int rows = static_cast<int>(read_u64(in));
    const int cols = static_cast<int>(read_u64(in));
    if (rows != m.rows || cols != m.cols)
      throw Error(ErrorCode::kValidation,
                  "tensor " + name + " has shape " + std::to_string(rows) +
                      "x" + std::to_string(cols) + ", config implies " +
                      std::to_string(m.rows) + "x" + std::to_string(m.cols));
    in.read(reinterpret_cast<char*>(m.data.data()),
            static_cast<std::streamsize>(m.data.size() * sizeof(double)));
    if (!in) throw Error(ErrorCode::kCorruption, "model file truncated");
  });
  const std::uint64_t stored_sum = read_u64(in);
  if (stored_sum != params_checksum(p))
    throw Error(ErrorCode::kCorruption, "model file checksum mismatch: " + path);
  return p;
}

}  // namespace peak::microlm
