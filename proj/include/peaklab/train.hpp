#pragma once

#include <cstdint>
#include <vector>

#include "peaklab/microlm.hpp"

namespace peak::microlm {

// Momentum-free adaptive optimizer: per-parameter second-moment scaling with
// linear warmup into a constant rate. Single-threaded for bitwise determinism.
struct TrainConfig {
  int steps = 3000;
  int batch_size = 16;
  double learning_rate = 3e-3;
  int warmup_steps = 100;
  double beta2 = 0.99;
  double eps = 1e-8;
  std::uint64_t seed = 0;

  void validate() const;  // throws ErrorCode::kConfig
};

struct TrainResult {
  ModelParams params;
  std::vector<double> loss_history;  // mean batch cross-entropy per step
  double initial_corpus_ce = 0.0;
  double final_corpus_ce = 0.0;
};

// Next-token cross-entropy averaged over all predicted tokens in the corpus.
double corpus_cross_entropy(const ModelParams& params,
                            const std::vector<TokenSeq>& corpus);

TrainResult train(const ModelParams& params, const std::vector<TokenSeq>& corpus,
                  const TrainConfig& cfg);

}  // namespace peak::microlm
