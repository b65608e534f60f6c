#pragma once

#include <vector>

#include "peaklab/microlm.hpp"
#include "peaklab/rng.hpp"

namespace testutil {

// Small config that keeps unit tests fast.
inline peak::microlm::ModelConfig tiny_config(std::uint64_t seed = 7) {
  peak::microlm::ModelConfig cfg;
  cfg.vocab_size = 48;
  cfg.d_model = 16;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_ff = 24;
  cfg.max_seq_len = 16;
  cfg.seed = seed;
  return cfg;
}

inline peak::microlm::TokenSeq random_tokens(peak::Rng& rng, int len, int vocab) {
  peak::microlm::TokenSeq seq(len);
  for (int& t : seq) t = static_cast<int>(rng.uniform_int(0, vocab - 1));
  return seq;
}

inline double rel_err(double a, double b) {
  return std::abs(a - b) / (std::max(std::abs(a), std::abs(b)) + 1e-6);
}

}  // namespace testutil
